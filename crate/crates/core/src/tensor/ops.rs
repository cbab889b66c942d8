//! Dense layers, activations, normalization and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Op, Var};
use super::DiffTensor;
use crate::error::{invalid, Result};

/// Which axes batch norm reduces over. The input is read as
/// `[batch, channels, rest...]`; `gamma`/`beta` are always per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// One statistic per channel, over batch and every trailing axis.
    Channel,
    /// One statistic per (channel, position), over the batch axis only.
    BatchOnly,
}

pub(crate) struct BnCache {
    batch: usize,
    channels: usize,
    inner: usize,
    axes: NormAxes,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BnCache {
    fn group(&self, c: usize, s: usize) -> usize {
        match self.axes {
            NormAxes::Channel => c,
            NormAxes::BatchOnly => c * self.inner + s,
        }
    }

    fn groups(&self) -> usize {
        match self.axes {
            NormAxes::Channel => self.channels,
            NormAxes::BatchOnly => self.channels * self.inner,
        }
    }

    fn group_size(&self) -> f64 {
        match self.axes {
            NormAxes::Channel => (self.batch * self.inner) as f64,
            NormAxes::BatchOnly => self.batch as f64,
        }
    }
}

impl Graph {
    /// `x [batch, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(invalid(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(invalid(format!(
                "linear: bias {:?} does not match {} outputs",
                self.shape(b),
                ws[0]
            )));
        }
        let (rows, n_in, n_out) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.values(x), self.values(w), self.values(b));
        let mut out = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let xr = &xv[r * n_in..][..n_in];
            for o in 0..n_out {
                let wr = &wv[o * n_in..][..n_in];
                out.push(bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Ok(self.push(vec![rows, n_out], out, Op::Linear { input: x, weight: w, bias: b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        for chunk in out.chunks(64) {
            let word = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
            self.fold_kinks(word);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { input: x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::Softmax { input: x })
    }

    /// Batch norm using the statistics of this batch. Returns the output
    /// together with the batch mean and (biased) variance per statistic
    /// group.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let mut cache = self.bn_cache(x, gamma, beta, axes, true)?;
        let xv = self.values(x);
        let n = cache.group_size();
        let mut mean = vec![0.0; cache.groups()];
        let mut var = vec![0.0; cache.groups()];
        for_each_bn(&cache, |i, c, s| mean[cache.group(c, s)] += xv[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        for_each_bn(&cache, |i, c, s| {
            let gi = cache.group(c, s);
            let d = xv[i] - mean[gi];
            var[gi] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= n);
        cache.inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(&mut cache, x, gamma, beta, &mean);
        let shape = self.shape(x).to_vec();
        let y = self.push(shape, out, Op::BatchNorm { input: x, gamma, beta, cache });
        Ok((y, mean, var))
    }

    /// Batch norm with fixed statistics (inference).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        axes: NormAxes,
        eps: f64,
    ) -> Result<Var> {
        let mut cache = self.bn_cache(x, gamma, beta, axes, false)?;
        if mean.len() != cache.groups() || var.len() != cache.groups() {
            return Err(invalid(format!(
                "batchnorm: expected {} running statistics, got {}/{}",
                cache.groups(),
                mean.len(),
                var.len()
            )));
        }
        cache.inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(&mut cache, x, gamma, beta, mean);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::BatchNorm { input: x, gamma, beta, cache }))
    }

    fn bn_cache(&self, x: Var, gamma: Var, beta: Var, axes: NormAxes, train: bool) -> Result<BnCache> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(invalid(format!("batchnorm: input {xs:?} needs [batch, channels, ...]")));
        }
        let (batch, channels) = (xs[0], xs[1]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(invalid(format!(
                "batchnorm: gamma/beta must be [{channels}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(BnCache {
            batch,
            channels,
            inner: xs[2..].iter().product(),
            axes,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            train,
        })
    }

    fn bn_apply(&self, cache: &mut BnCache, x: Var, gamma: Var, beta: Var, mean: &[f64]) -> Vec<f64> {
        let (xv, gv, bv) = (self.values(x), self.values(gamma), self.values(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for_each_bn(cache, |i, c, s| {
            let gi = cache.group(c, s);
            xhat[i] = (xv[i] - mean[gi]) * cache.inv_std[gi];
            out[i] = gv[c] * xhat[i] + bv[c];
        });
        cache.xhat = xhat;
        out
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity outside train mode.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout: rate {rate} outside [0, 1)")));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { input: x, mask }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("mul", lhs, rhs)?;
        let out = self.values(lhs).iter().zip(self.values(rhs)).map(|(a, b)| a * b).collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(shape, out, Op::Mul { lhs, rhs }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("add", lhs, rhs)?;
        let out = self.values(lhs).iter().zip(self.values(rhs)).map(|(a, b)| a + b).collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(shape, out, Op::Add { lhs, rhs }))
    }

    /// Multiplies `x [batch, channels, rest...]` by a constant
    /// `factor [batch, rest...]` repeated over the channel axis. The factor
    /// receives no gradient.
    pub fn scale_channels(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || factor.len() * xs[1] != self.value(x).len() {
            return Err(invalid(format!(
                "scale_channels: factor of {} values cannot broadcast over {xs:?}",
                factor.len()
            )));
        }
        let out = channel_scale(self.values(x), &factor, xs[0], xs[1]);
        Ok(self.push(xs.clone(), out, Op::ChannelScale { input: x, factor, channels: xs[1] }))
    }

    /// Mean categorical cross-entropy of `logits [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(invalid(format!(
                "cross_entropy: logits {ls:?} do not match {} labels",
                labels.len()
            )));
        }
        let cols = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(invalid(format!("cross_entropy: label {bad} outside 0..{cols}")));
        }
        let mut probs = self.values(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(cols).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Concatenates `[batch, f_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat: nothing to concatenate"));
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(invalid(format!("concat: part {s:?} is not [{rows}, _]")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(shape.to_vec(), t.into_values(), Op::Reshape { input: x }))
    }

    /// `[batch, a, c] -> [batch, c, a]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(invalid(format!("transpose: expected rank 3, got {s:?}")));
        }
        let out = transpose_last2(self.values(x), s[0], s[1], s[2]);
        Ok(self.push(vec![s[0], s[2], s[1]], out, Op::Transpose { input: x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { input: x })
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

fn for_each_bn(cache: &BnCache, mut f: impl FnMut(usize, usize, usize)) {
    let mut i = 0;
    for _ in 0..cache.batch {
        for c in 0..cache.channels {
            for s in 0..cache.inner {
                f(i, c, s);
                i += 1;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn softmax_backward(out: &DiffTensor, grad: &[f64]) -> Vec<f64> {
    let cols = *out.shape().last().expect("non-empty shape");
    let mut gx = vec![0.0; grad.len()];
    for ((y, g), dst) in out
        .values()
        .chunks(cols)
        .zip(grad.chunks(cols))
        .zip(gx.chunks_mut(cols))
    {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
            *d = yi * (gi - dot);
        }
    }
    gx
}

type Grads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn linear_backward(x: &DiffTensor, w: &DiffTensor, grad: &[f64], need: [bool; 3]) -> Grads {
    let (rows, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = w.shape()[0];
    let (xv, wv) = (x.values(), w.values());
    let gx = need[0].then(|| {
        let mut gx = vec![0.0; xv.len()];
        for r in 0..rows {
            let dst = &mut gx[r * n_in..][..n_in];
            for o in 0..n_out {
                let g = grad[r * n_out + o];
                for (d, &wi) in dst.iter_mut().zip(&wv[o * n_in..][..n_in]) {
                    *d += g * wi;
                }
            }
        }
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = vec![0.0; wv.len()];
        for r in 0..rows {
            let xr = &xv[r * n_in..][..n_in];
            for o in 0..n_out {
                let g = grad[r * n_out + o];
                for (d, &xi) in gw[o * n_in..][..n_in].iter_mut().zip(xr) {
                    *d += g * xi;
                }
            }
        }
        gw
    });
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; n_out];
        for r in 0..rows {
            for (d, g) in gb.iter_mut().zip(&grad[r * n_out..][..n_out]) {
                *d += g;
            }
        }
        gb
    });
    (gx, gw, gb)
}

pub(crate) fn batchnorm_backward(cache: &BnCache, gamma: &[f64], grad: &[f64], need: [bool; 3]) -> Grads {
    let groups = cache.groups();
    let mut sum_dy = vec![0.0; groups];
    let mut sum_dy_xhat = vec![0.0; groups];
    let mut gg = vec![0.0; cache.channels];
    let mut gb = vec![0.0; cache.channels];
    for_each_bn(cache, |i, c, s| {
        let gi = cache.group(c, s);
        sum_dy[gi] += grad[i] * gamma[c];
        sum_dy_xhat[gi] += grad[i] * gamma[c] * cache.xhat[i];
        gg[c] += grad[i] * cache.xhat[i];
        gb[c] += grad[i];
    });
    let gx = need[0].then(|| {
        let n = cache.group_size();
        let mut gx = vec![0.0; grad.len()];
        for_each_bn(cache, |i, c, s| {
            let gi = cache.group(c, s);
            let dxhat = grad[i] * gamma[c];
            gx[i] = if cache.train {
                cache.inv_std[gi] / n * (n * dxhat - sum_dy[gi] - cache.xhat[i] * sum_dy_xhat[gi])
            } else {
                dxhat * cache.inv_std[gi]
            };
        });
        gx
    });
    (gx, need[1].then_some(gg), need[2].then_some(gb))
}

pub(crate) fn channel_scale(values: &[f64], factor: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    let inner = factor.len() / batch;
    let mut out = Vec::with_capacity(values.len());
    for b in 0..batch {
        let f = &factor[b * inner..][..inner];
        for c in 0..channels {
            let v = &values[(b * channels + c) * inner..][..inner];
            out.extend(v.iter().zip(f).map(|(a, b)| a * b));
        }
    }
    out
}

/// `[batch, a, c] -> [batch, c, a]`.
pub(crate) fn transpose_last2(v: &[f64], batch: usize, a: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for b in 0..batch {
        let src = &v[b * a * c..][..a * c];
        let dst = &mut out[b * a * c..][..a * c];
        for i in 0..a {
            for j in 0..c {
                dst[j * a + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn t(shape: &[usize], v: &[f64]) -> DiffTensor {
        DiffTensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 4], &[0.3; 4]));
        let y = g.softmax(x);
        assert_eq!(g.values(y), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_large_margin_is_near_zero() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 3], &[40.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        // -log(e^40 / (e^40 + 2)) = ln(1 + 2e^-40)
        let oracle = (2.0 * (-40.0f64).exp()).ln_1p();
        assert!((g.values(l)[0] - oracle).abs() < 1e-15);
        assert!(g.values(l)[0] < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 3], &[0.0; 3]));
        let err = g.cross_entropy(x, &[3]).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidArgument(_)));
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(t(&[2, 2, 2], &[1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0]));
        let gamma = g.input(t(&[2], &[1.0, 1.0]));
        let beta = g.input(t(&[2], &[0.0, 0.0]));
        let (y, mean, var) = g.batchnorm_train(x, gamma, beta, NormAxes::Channel, 0.0).unwrap();
        assert_eq!(mean, vec![4.0, 20.0]);
        assert_eq!(var[0], 5.0);
        let ch0: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| g.values(y)[i]).collect();
        assert!(ch0.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn batchnorm_batch_only_axes() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 6.0]));
        let gamma = g.input(t(&[1], &[1.0]));
        let beta = g.input(t(&[1], &[0.0]));
        let (_, mean, var) = g.batchnorm_train(x, gamma, beta, NormAxes::BatchOnly, 0.0).unwrap();
        assert_eq!(mean, vec![2.0, 4.0]);
        assert_eq!(var, vec![1.0, 4.0]);
    }

    #[test]
    fn dropout_is_seeded_and_identity_in_eval() {
        let run = |mode| {
            let mut g = Graph::new(mode);
            let x = g.input(DiffTensor::filled(&[100], 1.0).unwrap());
            let y = g.dropout(x, 0.5, 42).unwrap();
            g.values(y).to_vec()
        };
        assert_eq!(run(Mode::Train), run(Mode::Train));
        let train = run(Mode::Train);
        assert!(train.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(train.iter().any(|&v| v == 0.0));
        assert_eq!(run(Mode::Eval), vec![1.0; 100]);
    }

    #[test]
    fn concat_and_transpose_layouts() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(t(&[2, 1], &[1.0, 2.0]));
        let b = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.values(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let x = g.input(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2]);
        assert_eq!(g.values(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn scale_channels_broadcasts() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.scale_channels(x, vec![10.0, 100.0]).unwrap();
        assert_eq!(g.values(y), &[10.0, 200.0, 30.0, 400.0]);
        assert!(g.scale_channels(x, vec![1.0; 3]).is_err());
    }
}
