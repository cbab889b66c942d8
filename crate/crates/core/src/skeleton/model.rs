use rand::Rng;

use super::SkeletonSequence;
use crate::error::{invalid, Result};
use crate::nn::{BatchNormLayer, Conv1dLayer, LinearLayer};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{DiffTensor, Graph, NormAxes, Padding, Var};

/// One temporal convolution: filter count, temporal filter size, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub filters: usize,
    pub filter_size: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(filters: usize, filter_size: usize, stride: usize) -> Self {
        Self { filters, filter_size, stride }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResTcnConfig {
    pub joints: usize,
    pub skeletons: usize,
    pub frames: usize,
    pub classes: usize,
    /// The first entry is the input convolution, each later entry one
    /// residual block.
    pub tcn_layers: Vec<LayerSpec>,
    pub bjcn_downsample_factor: usize,
    pub bjcn_filter_multiplier: usize,
    pub fc_tcn_width: usize,
    pub fc_bjcn_width: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    /// BJCN batch norm pools statistics over the joint rows as well as the
    /// batch; otherwise every (filter, row) pair has its own statistics.
    pub bjcn_norm_over_rows: bool,
    /// Subtract each coordinate row's mean over the valid frames before the
    /// network sees it, so posture offsets drop out and motion remains.
    pub center_trajectories: bool,
}

impl ResTcnConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            joints: 5,
            skeletons: 1,
            frames: 60,
            classes,
            tcn_layers: vec![
                LayerSpec::new(8, 3, 1),
                LayerSpec::new(8, 3, 1),
                LayerSpec::new(16, 3, 2),
                LayerSpec::new(32, 3, 2),
            ],
            bjcn_downsample_factor: 5,
            bjcn_filter_multiplier: 2,
            fc_tcn_width: 16,
            fc_bjcn_width: 32,
            dropout: 0.0,
            bn_eps: 1e-5,
            bjcn_norm_over_rows: true,
            center_trajectories: true,
        }
    }

    /// Full-size layout: 25 joints, two skeletons, 300 frames, Res-TCN
    /// stages of 64/128/256 filters of size 8, FC-256 + FC-512.
    pub fn paper(classes: usize) -> Self {
        let mut tcn_layers = vec![LayerSpec::new(64, 8, 1)];
        for (filters, stride) in [(64, 1), (128, 2), (256, 2)] {
            tcn_layers.push(LayerSpec::new(filters, 8, stride));
            tcn_layers.push(LayerSpec::new(filters, 8, 1));
            tcn_layers.push(LayerSpec::new(filters, 8, 1));
        }
        Self {
            joints: 25,
            skeletons: 2,
            frames: 300,
            classes,
            tcn_layers,
            bjcn_downsample_factor: 5,
            bjcn_filter_multiplier: 2,
            fc_tcn_width: 256,
            fc_bjcn_width: 512,
            dropout: 0.5,
            bn_eps: 1e-5,
            bjcn_norm_over_rows: true,
            center_trajectories: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.skeletons * self.joints * 3
    }

    pub fn bjcn_filters(&self) -> Vec<usize> {
        self.tcn_layers.iter().map(|l| l.filters * self.bjcn_filter_multiplier).collect()
    }

    pub fn downsampled_frames(&self) -> usize {
        (self.frames - 1) / self.bjcn_downsample_factor + 1
    }

    pub fn feature_width(&self) -> usize {
        self.fc_tcn_width + self.fc_bjcn_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.skeletons == 0 || self.frames == 0 || self.classes < 2 {
            return Err(invalid("skeleton config needs joints, skeletons, frames > 0 and classes >= 2"));
        }
        if self.tcn_layers.len() < super::MAX_SCORE_LAYER {
            return Err(invalid(format!(
                "skeleton config needs at least {} layers for score extraction, got {}",
                super::MAX_SCORE_LAYER,
                self.tcn_layers.len()
            )));
        }
        if self.tcn_layers.iter().any(|l| l.filters == 0 || l.filter_size == 0 || l.stride == 0) {
            return Err(invalid("tcn layer filters, filter size and stride must be positive"));
        }
        if self.bjcn_downsample_factor == 0 || self.bjcn_downsample_factor > self.frames {
            return Err(invalid(format!(
                "bjcn downsample factor {} must be in 1..={} (frame count)",
                self.bjcn_downsample_factor, self.frames
            )));
        }
        if self.bjcn_filter_multiplier == 0 || self.fc_tcn_width == 0 || self.fc_bjcn_width == 0 {
            return Err(invalid("bjcn multiplier and fc widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.bn_eps > 0.0) {
            return Err(invalid("dropout must be in [0, 1) and bn_eps > 0"));
        }
        Ok(())
    }
}

/// `out = proj(x) + conv(dropout(relu(bn(x))))`; `proj` is a filter-size-1
/// convolution with the block's stride, present only when the channel count
/// or length changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub norm: BatchNormLayer,
    pub conv: Conv1dLayer,
    pub proj: Option<Conv1dLayer>,
}

impl ResidualBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64, seed: u64) -> Result<Var> {
        let a = self.activate(g, store, x, dropout, seed)?;
        self.forward_activated(g, store, x, a)
    }

    /// `dropout(relu(bn(x)))`, the input of this block's convolution.
    pub fn activate(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64, seed: u64) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let r = g.relu(n);
        g.dropout(r, dropout, seed)
    }

    pub fn forward_activated(&self, g: &mut Graph, store: &ParamStore, x: Var, activated: Var) -> Result<Var> {
        let c = self.conv.forward(g, store, activated)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, c)
    }
}

#[allow(clippy::too_many_arguments)]
fn block<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    filter: usize,
    stride: usize,
    norm_positions: Option<usize>,
    eps: f64,
    rng: &mut R,
) -> Result<ResidualBlock> {
    let norm = match norm_positions {
        None => BatchNormLayer::new(store, &format!("{name}.bn"), c_in, c_in, NormAxes::Channel, eps)?,
        Some(p) => BatchNormLayer::new(store, &format!("{name}.bn"), c_in, c_in * p, NormAxes::BatchOnly, eps)?,
    };
    let conv = Conv1dLayer::new(store, &format!("{name}.conv"), c_in, c_out, filter, stride, Padding::Same, rng)?;
    let proj = if c_in != c_out || stride != 1 {
        Some(Conv1dLayer::new(store, &format!("{name}.proj"), c_in, c_out, 1, stride, Padding::Same, rng)?)
    } else {
        None
    };
    Ok(ResidualBlock { norm, conv, proj })
}

/// Temporal branch over `[batch, M, N]`.
#[derive(Debug, Clone)]
pub struct TcnBranch {
    pub input: Conv1dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub out_norm: BatchNormLayer,
    pub fc: LinearLayer,
}

impl TcnBranch {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64, seed: u64) -> Result<Var> {
        let mut h = self.input.forward(g, store, x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, store, h, dropout, rng::derive(seed, &format!("tcn{i}")))?;
        }
        let n = self.out_norm.forward(g, store, h)?;
        let r = g.relu(n);
        let r = g.dropout(r, dropout, rng::derive(seed, "tcn.out"))?;
        let s = g.shape(r).to_vec();
        let flat = g.reshape(r, &[s[0], s[1] * s[2]])?;
        let f = self.fc.forward(g, store, flat)?;
        let f = g.relu(f);
        g.dropout(f, dropout, rng::derive(seed, "tcn.fc"))
    }
}

/// Joint-axis branch: transpose, temporal downsample, then size-1 filters
/// sliding over the `M` coordinate rows with weights spanning all kept
/// frames.
#[derive(Debug, Clone)]
pub struct BjcnBranch {
    pub downsample: Conv1dLayer,
    pub input: Conv1dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub out_norm: BatchNormLayer,
    pub fc: LinearLayer,
}

impl BjcnBranch {
    /// Returns the FC output (after softmax) and the post-ReLU bottom
    /// features `[batch, N_l, M]` of every layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        dropout: f64,
        seed: u64,
    ) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(x).to_vec();
        let (b, m, n) = (s[0], s[1], s[2]);
        let per_row = g.reshape(x, &[b * m, 1, n])?;
        let down = self.downsample.forward(g, store, per_row)?;
        let n_down = g.shape(down)[2];
        let down = g.reshape(down, &[b, m, n_down])?;
        let t = g.transpose(down)?;

        let mut h = self.input.forward(g, store, t)?;
        let mut features = Vec::with_capacity(self.blocks.len() + 1);
        for (i, blk) in self.blocks.iter().enumerate() {
            let a = blk.activate(g, store, h, 0.0, 0)?;
            features.push(a);
            let a = g.dropout(a, dropout, rng::derive(seed, &format!("bjcn{i}")))?;
            h = blk.forward_activated(g, store, h, a)?;
        }
        let nrm = self.out_norm.forward(g, store, h)?;
        let last = g.relu(nrm);
        features.push(last);
        let last = g.dropout(last, dropout, rng::derive(seed, "bjcn.out"))?;
        let ls = g.shape(last).to_vec();
        let flat = g.reshape(last, &[ls[0], ls[1] * ls[2]])?;
        let f = self.fc.forward(g, store, flat)?;
        Ok((g.softmax(f), features))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SkeletonOutput {
    pub logits: Var,
    /// Concatenated branch features `[batch, fc_tcn + fc_bjcn]`.
    pub feature: Var,
}

/// Two-branch skeleton network. Parameter names start with the prefix
/// given at build time.
#[derive(Debug, Clone)]
pub struct SkeletonNet {
    pub config: ResTcnConfig,
    pub prefix: String,
    pub tcn: TcnBranch,
    pub bjcn: BjcnBranch,
    pub head: LinearLayer,
}

impl SkeletonNet {
    pub fn build<R: Rng>(config: ResTcnConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let eps = config.bn_eps;
        let m = config.rows();
        let layers = &config.tcn_layers;

        let first = layers[0];
        let input = Conv1dLayer::new(
            store,
            &format!("{prefix}.tcn.in"),
            m,
            first.filters,
            first.filter_size,
            first.stride,
            Padding::Same,
            rng,
        )?;
        let mut blocks = Vec::new();
        let mut len = config.frames.div_ceil(first.stride);
        for (i, w) in layers.windows(2).enumerate() {
            let (prev, cur) = (w[0], w[1]);
            blocks.push(block(
                store,
                &format!("{prefix}.tcn.b{}", i + 1),
                prev.filters,
                cur.filters,
                cur.filter_size,
                cur.stride,
                None,
                eps,
                rng,
            )?);
            len = len.div_ceil(cur.stride);
        }
        let c_last = layers[layers.len() - 1].filters;
        let out_norm = BatchNormLayer::new(store, &format!("{prefix}.tcn.bn_out"), c_last, c_last, NormAxes::Channel, eps)?;
        let fc = LinearLayer::new(store, &format!("{prefix}.tcn.fc"), c_last * len, config.fc_tcn_width, rng)?;
        let tcn = TcnBranch { input, blocks, out_norm, fc };

        let filters = config.bjcn_filters();
        let downsample = Conv1dLayer::new(
            store,
            &format!("{prefix}.bjcn.down"),
            1,
            1,
            1,
            config.bjcn_downsample_factor,
            Padding::Valid,
            rng,
        )?;
        let n_down = config.downsampled_frames();
        let input = Conv1dLayer::new(store, &format!("{prefix}.bjcn.in"), n_down, filters[0], 1, 1, Padding::Same, rng)?;
        let row_norm = (!config.bjcn_norm_over_rows).then_some(m);
        let mut bblocks = Vec::new();
        for (i, w) in filters.windows(2).enumerate() {
            bblocks.push(block(store, &format!("{prefix}.bjcn.b{}", i + 1), w[0], w[1], 1, 1, row_norm, eps, rng)?);
        }
        let f_last = filters[filters.len() - 1];
        let out_norm = match row_norm {
            Some(m) => BatchNormLayer::new(store, &format!("{prefix}.bjcn.bn_out"), f_last, f_last * m, NormAxes::BatchOnly, eps)?,
            None => BatchNormLayer::new(store, &format!("{prefix}.bjcn.bn_out"), f_last, f_last, NormAxes::Channel, eps)?,
        };
        let fc = LinearLayer::new(store, &format!("{prefix}.bjcn.fc"), f_last * m, config.fc_bjcn_width, rng)?;
        let bjcn = BjcnBranch { downsample, input, blocks: bblocks, out_norm, fc };

        let head = LinearLayer::new(store, &format!("{prefix}.head"), config.feature_width(), config.classes, rng)?;
        Ok(Self { config, prefix: prefix.to_string(), tcn, bjcn, head })
    }

    /// Stacks sequences into a `[batch, M, N]` tensor, each row centered
    /// over its valid frames when `center_trajectories` is set.
    pub fn batch_tensor(&self, seqs: &[&SkeletonSequence]) -> Result<DiffTensor> {
        let (m, n) = (self.config.rows(), self.config.frames);
        let mut data = Vec::with_capacity(seqs.len() * m * n);
        for s in seqs {
            if s.rows() != m || s.frames != n {
                return Err(invalid(format!(
                    "skeleton sequence is {}x{}, network expects {m}x{n}",
                    s.rows(),
                    s.frames
                )));
            }
            let start = data.len();
            data.extend_from_slice(&s.data);
            if self.config.center_trajectories && s.valid_frames > 0 {
                for row in data[start..].chunks_mut(n) {
                    let mean = row[..s.valid_frames].iter().sum::<f64>() / s.valid_frames as f64;
                    row[..s.valid_frames].iter_mut().for_each(|v| *v -= mean);
                }
            }
        }
        DiffTensor::new(&[seqs.len(), m, n], data)
    }

    /// Class logits, fused feature and the post-ReLU BJCN bottom features
    /// (one `[batch, N_l, M]` map per layer, shallowest first).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seed: u64,
    ) -> Result<(SkeletonOutput, Vec<Var>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.rows() || s[2] != self.config.frames {
            return Err(invalid(format!(
                "skeleton input {s:?} does not match [batch, {}, {}]",
                self.config.rows(),
                self.config.frames
            )));
        }
        let p = self.config.dropout;
        let t = self.tcn.forward(g, store, x, p, rng::derive(seed, "tcn"))?;
        let (b, features) = self.bjcn.forward(g, store, x, p, rng::derive(seed, "bjcn"))?;
        let feature = g.concat(&[t, b])?;
        let logits = self.head.forward(g, store, feature)?;
        Ok((SkeletonOutput { logits, feature }, features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get(id);
            if p.name.starts_with(prefix) && p.kind == ParamKind::Conv && p.name.ends_with(".w") {
                store.tensor_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn random_input(cfg: &ResTcnConfig, batch: usize, seed: u64) -> DiffTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * cfg.rows() * cfg.frames;
        DiffTensor::new(&[batch, cfg.rows(), cfg.frames], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn centering_removes_row_means_and_keeps_padding() {
        let cfg = ResTcnConfig { frames: 6, ..ResTcnConfig::desk(2) };
        let (_, net) = build(cfg.clone());
        let mut data = vec![0.0; cfg.rows() * 6];
        for (i, row) in data.chunks_mut(6).enumerate() {
            row[..4].copy_from_slice(&[i as f64, i as f64 + 1.0, i as f64 + 3.0, i as f64 + 4.0]);
        }
        let seq = SkeletonSequence { joints: 5, skeletons: 1, frames: 6, valid_frames: 4, data: data.clone() };
        let x = net.batch_tensor(&[&seq]).unwrap();
        for row in x.values().chunks(6) {
            assert_eq!(row, &[-2.0, -1.0, 1.0, 2.0, 0.0, 0.0]);
        }
        let (_, raw) = build(ResTcnConfig { center_trajectories: false, ..cfg });
        assert_eq!(raw.batch_tensor(&[&seq]).unwrap().values(), &data[..]);
    }

    fn build(cfg: ResTcnConfig) -> (ParamStore, SkeletonNet) {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let net = SkeletonNet::build(cfg, &mut store, "skel", &mut r).unwrap();
        (store, net)
    }

    #[test]
    fn zero_conv_path_block_passes_projected_input() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let b = block(&mut store, "b", 2, 2, 3, 1, None, 1e-5, &mut r).unwrap();
        assert!(b.proj.is_none());
        zero_prefix(&mut store, "b.conv");
        let mut g = Graph::new(Mode::Train);
        let xt = DiffTensor::new(&[1, 2, 4], vec![1.0, -2.0, 3.0, 0.5, 4.0, 0.0, -1.0, 2.0]).unwrap();
        let x = g.input(xt.clone());
        let y = b.forward(&mut g, &store, x, 0.0, 0).unwrap();
        assert_eq!(g.values(y), xt.values());

        // with a projection: the output is exactly the stride-2 size-1 conv
        let b2 = block(&mut store, "c", 2, 3, 3, 2, None, 1e-5, &mut r).unwrap();
        zero_prefix(&mut store, "c.conv");
        let proj = b2.proj.as_ref().unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.input(xt.clone());
        let y = b2.forward(&mut g, &store, x, 0.0, 0).unwrap();
        let w = store.tensor(proj.weight).values();
        let mut expect = vec![0.0; 6];
        for o in 0..3 {
            for (t_out, t_in) in [0usize, 2].into_iter().enumerate() {
                expect[o * 2 + t_out] = (0..2).map(|c| w[o * 2 + c] * xt.values()[c * 4 + t_in]).sum();
            }
        }
        assert_eq!(g.shape(y), &[1, 3, 2]);
        for (a, e) in g.values(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_block() {
        // one channel, 4 frames, filter 3 with same padding, eval-mode BN
        // with unit statistics, so bn(x) = x / sqrt(1 + eps)
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let b = block(&mut store, "b", 1, 1, 3, 1, None, 1e-5, &mut r).unwrap();
        store.tensor_mut(b.conv.weight).values_mut().copy_from_slice(&[1.0, 2.0, -1.0]);
        store.tensor_mut(b.conv.bias).values_mut()[0] = 0.5;
        let x = [1.0, -3.0, 2.0, 4.0];
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(DiffTensor::new(&[1, 1, 4], x.to_vec()).unwrap());
        let y = b.forward(&mut g, &store, xv, 0.5, 9).unwrap();

        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let a: Vec<f64> = x.iter().map(|v| (v * s).max(0.0)).collect();
        let at = |t: isize| if (0..4).contains(&t) { a[t as usize] } else { 0.0 };
        for t in 0..4 {
            let conv = 0.5 + at(t as isize - 1) + 2.0 * at(t as isize) - at(t as isize + 1);
            assert!((g.values(y)[t] - (x[t] + conv)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn two_zero_blocks_compose_projections() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let b1 = block(&mut store, "p", 2, 3, 3, 2, None, 1e-5, &mut r).unwrap();
        let b2 = block(&mut store, "q", 3, 2, 3, 1, None, 1e-5, &mut r).unwrap();
        zero_prefix(&mut store, "p.conv");
        zero_prefix(&mut store, "q.conv");
        let xt = random_input(&ResTcnConfig { joints: 1, ..ResTcnConfig::desk(2) }, 1, 5);
        let xt = xt.reshaped(&[1, 3, 60]).unwrap();
        let xt = DiffTensor::new(&[1, 2, 6], xt.values()[..12].to_vec()).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.input(xt.clone());
        let h = b1.forward(&mut g, &store, x, 0.0, 0).unwrap();
        let y = b2.forward(&mut g, &store, h, 0.0, 0).unwrap();

        let mut g2 = Graph::new(Mode::Train);
        let x2 = g2.input(xt);
        let p1 = b1.proj.as_ref().unwrap().forward(&mut g2, &store, x2).unwrap();
        let p2 = b2.proj.as_ref().unwrap().forward(&mut g2, &store, p1).unwrap();
        assert_eq!(g.values(y), g2.values(p2));
    }

    #[test]
    fn bottom_feature_shapes_follow_bjcn_filters() {
        let cfg = ResTcnConfig::desk(4);
        let (store, net) = build(cfg.clone());
        let mut g = Graph::new(Mode::Train);
        let x = g.input(random_input(&cfg, 3, 1));
        let (out, feats) = net.forward(&mut g, &store, x, 0).unwrap();
        assert_eq!(feats.len(), 4);
        for (f, n_l) in feats.iter().zip([16, 16, 32, 64]) {
            assert_eq!(g.shape(*f), &[3, n_l, 15]);
            assert!(g.values(*f).iter().all(|v| *v >= 0.0));
        }
        assert_eq!(g.shape(out.feature), &[3, 48]);
        assert_eq!(g.shape(out.logits), &[3, 4]);
    }

    #[test]
    fn zero_weights_give_zero_bottom_features() {
        let cfg = ResTcnConfig::desk(3);
        let (mut store, net) = build(cfg.clone());
        zero_prefix(&mut store, "skel.bjcn");
        let mut g = Graph::new(Mode::Train);
        let x = g.input(random_input(&cfg, 2, 3));
        let (_, feats) = net.forward(&mut g, &store, x, 0).unwrap();
        for f in feats {
            assert!(g.values(f).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn glorot_net_gives_finite_probabilities() {
        let cfg = ResTcnConfig::desk(4);
        let (store, net) = build(cfg.clone());
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(random_input(&cfg, 2, 4));
        let (out, _) = net.forward(&mut g, &store, x, 0).unwrap();
        let p = g.softmax(out.logits);
        for row in g.values(p).chunks(4) {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_logits_follow_bias_path() {
        // eval mode, random biases; the oracle propagates the biases by hand
        let cfg = ResTcnConfig::desk(3);
        let (mut store, net) = build(cfg.clone());
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with(".b") {
                store.tensor_mut(id).values_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
            }
        }
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(DiffTensor::zeros(&[1, cfg.rows(), cfg.frames]).unwrap());
        let (out, _) = net.forward(&mut g, &store, x, 0).unwrap();
        let oracle = bias_trace(&store, &net);
        for (a, e) in g.values(out.logits).iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    /// Independent scalar re-implementation of the forward pass for a zero
    /// input, with every intermediate held as plain vectors.
    fn bias_trace(store: &ParamStore, net: &SkeletonNet) -> Vec<f64> {
        let cfg = &net.config;
        let eps = cfg.bn_eps;
        let v = |id| store.tensor(id).values().to_vec();
        let bn = |x: &[Vec<f64>], l: &BatchNormLayer| -> Vec<Vec<f64>> {
            let (g, b, m, s) = (v(l.gamma), v(l.beta), v(l.running_mean), v(l.running_var));
            x.iter()
                .enumerate()
                .map(|(c, row)| row.iter().map(|xv| g[c] * (xv - m[c]) / (s[c] + eps).sqrt() + b[c]).collect())
                .collect()
        };
        let relu = |x: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
        };
        // conv1d with same padding, [c_out, f, c_in] weights
        let conv = |x: &[Vec<f64>], l: &Conv1dLayer| -> Vec<Vec<f64>> {
            let (w, b) = (v(l.weight), v(l.bias));
            let (c_in, n) = (x.len(), x[0].len());
            let c_out = b.len();
            let f = w.len() / (c_out * c_in);
            let out_n = n.div_ceil(l.stride);
            let total = ((out_n - 1) * l.stride + f).saturating_sub(n);
            let pad = total / 2;
            (0..c_out)
                .map(|o| {
                    (0..out_n)
                        .map(|t| {
                            let mut acc = b[o];
                            for k in 0..f {
                                let src = (t * l.stride + k) as isize - pad as isize;
                                if src >= 0 && (src as usize) < n {
                                    for c in 0..c_in {
                                        acc += w[(o * f + k) * c_in + c] * x[c][src as usize];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let add = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.into_iter().zip(b).map(|(x, y)| x.into_iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        };
        let run_blocks = |mut h: Vec<Vec<f64>>, blocks: &[ResidualBlock]| {
            for b in blocks {
                let a = relu(bn(&h, &b.norm));
                let c = conv(&a, &b.conv);
                let skip = match &b.proj {
                    Some(p) => conv(&h, p),
                    None => h.clone(),
                };
                h = add(skip, c);
            }
            h
        };
        let linear = |x: &[f64], l: &LinearLayer| -> Vec<f64> {
            let (w, b) = (v(l.weight), v(l.bias));
            (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
        };

        let x0 = vec![vec![0.0; cfg.frames]; cfg.rows()];
        let h = run_blocks(conv(&x0, &net.tcn.input), &net.tcn.blocks);
        let a: Vec<f64> = relu(bn(&h, &net.tcn.out_norm)).concat();
        let t: Vec<f64> = linear(&a, &net.tcn.fc).into_iter().map(|v| v.max(0.0)).collect();

        // downsample conv on zeros yields its bias everywhere
        let db = v(net.bjcn.downsample.bias)[0];
        let xt = vec![vec![db; cfg.rows()]; cfg.downsampled_frames()];
        let h = run_blocks(conv(&xt, &net.bjcn.input), &net.bjcn.blocks);
        let a: Vec<f64> = relu(bn(&h, &net.bjcn.out_norm)).concat();
        let mut s = linear(&a, &net.bjcn.fc);
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        s.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let z: f64 = s.iter().sum();
        s.iter_mut().for_each(|v| *v /= z);

        linear(&[t, s].concat(), &net.head)
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ResTcnConfig { dropout: 0.5, ..ResTcnConfig::desk(4) };
        let (store, net) = build(cfg.clone());
        let run = || {
            let mut g = Graph::new(Mode::Train);
            let x = g.input(random_input(&cfg, 2, 6));
            let (out, _) = net.forward(&mut g, &store, x, 77).unwrap();
            g.values(out.logits).to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn oscillation_filter_responds_on_the_moving_joint() {
        let cfg = ResTcnConfig::desk(2);
        let (mut store, net) = build(cfg.clone());
        let (m, n) = (cfg.rows(), cfg.frames);
        let wave: Vec<f64> = (0..n).map(|t| (t as f64 * 0.7).sin()).collect();
        let mut x = vec![0.0; m * n];
        x[9 * n..10 * n].copy_from_slice(&wave);
        x[10 * n..11 * n].iter_mut().zip(&wave).for_each(|(d, w)| *d = 0.5 * w);

        let down = net.bjcn.downsample.clone();
        store.tensor_mut(down.weight).values_mut()[0] = 1.0;
        let f = cfg.downsampled_frames();
        let template: Vec<f64> = (0..f).map(|i| wave[i * cfg.bjcn_downsample_factor]).collect();
        let w = store.tensor_mut(net.bjcn.input.weight).values_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        w[..f].copy_from_slice(&template);

        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(DiffTensor::new(&[1, m, n], x).unwrap());
        let (_, feats) = net.forward(&mut g, &store, xv, 0).unwrap();
        let row = &g.values(feats[0])[..m];
        let per_joint: Vec<f64> = row.chunks(3).map(|c| c.iter().sum()).collect();
        for (k, s) in per_joint.iter().enumerate() {
            if k != 3 {
                assert!(per_joint[3] > *s, "{per_joint:?}");
            }
        }
    }

    #[test]
    fn oversized_downsample_is_rejected() {
        let cfg = ResTcnConfig { frames: 4, ..ResTcnConfig::desk(2) };
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(SkeletonNet::build(cfg, &mut store, "s", &mut r).is_err());
    }
}
