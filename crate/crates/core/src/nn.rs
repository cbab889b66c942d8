//! Parameterized layers over the graph engine. Each layer registers its
//! parameters in a [`ParamStore`] at build time and reads them back into
//! the graph on every forward pass.

use rand::Rng;

use crate::error::Result;
use crate::params::{glorot_uniform, ParamId, ParamKind, ParamStore};
use crate::tensor::{DiffTensor, Graph, NormAxes, Padding, RunningStatUpdate, Var};

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1dLayer {
    /// Weight layout `[c_out, filter, c_in]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        filter: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot_uniform(&[c_out, filter, c_in], filter * c_in, filter * c_out, rng)?;
        Ok(Self {
            weight: store.add(&format!("{name}.w"), ParamKind::Conv, w)?,
            bias: store.add(&format!("{name}.b"), ParamKind::Conv, DiffTensor::zeros(&[c_out])?)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub padding: Padding,
}

impl Conv3dLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let k: usize = kernel.iter().product();
        let w = glorot_uniform(
            &[c_out, c_in, kernel[0], kernel[1], kernel[2]],
            k * c_in,
            k * c_out,
            rng,
        )?;
        Ok(Self {
            weight: store.add(&format!("{name}.w"), ParamKind::Conv, w)?,
            bias: store.add(&format!("{name}.b"), ParamKind::Conv, DiffTensor::zeros(&[c_out])?)?,
            stride: [1, 1, 1],
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        let w = glorot_uniform(&[n_out, n_in], n_in, n_out, rng)?;
        Ok(Self {
            weight: store.add(&format!("{name}.w"), ParamKind::Dense, w)?,
            bias: store.add(&format!("{name}.b"), ParamKind::Dense, DiffTensor::zeros(&[n_out])?)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Batch norm with learnable per-channel scale/shift and running
/// statistics kept as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub axes: NormAxes,
    pub eps: f64,
}

impl BatchNormLayer {
    /// `groups` is the number of statistics: channels for
    /// [`NormAxes::Channel`], channels × positions for
    /// [`NormAxes::BatchOnly`].
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        axes: NormAxes,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), ParamKind::Norm, DiffTensor::filled(&[channels], 1.0)?)?,
            beta: store.add(&format!("{name}.beta"), ParamKind::Norm, DiffTensor::zeros(&[channels])?)?,
            running_mean: store.add(&format!("{name}.mean"), ParamKind::Buffer, DiffTensor::zeros(&[groups])?)?,
            running_var: store.add(&format!("{name}.var"), ParamKind::Buffer, DiffTensor::filled(&[groups], 1.0)?)?,
            axes,
            eps,
        })
    }

    /// Train mode normalizes with batch statistics and queues a running
    /// statistics update on the graph; eval mode uses the stored buffers.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if g.is_training() {
            let (y, batch_mean, batch_var) = g.batchnorm_train(x, gamma, beta, self.axes, self.eps)?;
            g.record_stats(RunningStatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean,
                batch_var,
            });
            Ok(y)
        } else {
            g.batchnorm_eval(
                x,
                gamma,
                beta,
                store.tensor(self.running_mean).values(),
                store.tensor(self.running_var).values(),
                self.axes,
                self.eps,
            )
        }
    }
}
