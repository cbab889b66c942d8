//! Small C3D-style spatiotemporal network over flow clips with an
//! attention module after every convolution.

use rand::Rng;

use crate::attention::{
    apply_attention, build_binary_mask, build_weighted_mask, downsample_joint_coords, interpolate_temporal_coords,
    radius_for_width, AttentionMask, CharacteristicAreaSet, FeatureDims,
};
use crate::error::{invalid, Result};
use crate::flow::{FlowClip, Joint2d};
use crate::nn::{Conv3dLayer, LinearLayer};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{DiffTensor, Graph, Mode, Padding, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLevel {
    None,
    /// Binary joint discs.
    Binary,
    /// Discs weighted by `1 + score`.
    Weighted,
}

impl AttentionLevel {
    /// `none`, `at1` or `at2`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "at1" | "1" => Ok(Self::Binary),
            "at2" | "2" => Ok(Self::Weighted),
            other => Err(invalid(format!("unknown attention level `{other}` (none, at1, at2)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Binary => "at1",
            Self::Weighted => "at2",
        }
    }
}

/// Subtracted from every colorized value before the first convolution;
/// zero motion then enters the network as zero.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct C3dConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: [usize; 3],
    /// Pool applied after each conv layer (after its attention module).
    pub pools: Vec<Option<[usize; 3]>>,
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    pub attention: Vec<AttentionLevel>,
    pub radius_override: Option<usize>,
    pub dropout: f64,
}

impl C3dConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            conv_channels: vec![8, 16, 16, 32],
            kernel: [3, 3, 3],
            pools: vec![Some([1, 2, 2]), Some([2, 2, 2]), Some([2, 2, 2]), None],
            fc_widths: vec![64, 64],
            classes,
            attention: vec![AttentionLevel::None; 4],
            radius_override: None,
            dropout: 0.0,
        }
    }

    /// Eight convolutions in five pooled stages over `3 × 16 × 112 × 112`,
    /// FC-4096 twice.
    pub fn paper(classes: usize) -> Self {
        let p = |t, s| Some([t, s, s]);
        Self {
            frames: 16,
            height: 112,
            width: 112,
            conv_channels: vec![64, 128, 256, 256, 512, 512, 512, 512],
            kernel: [3, 3, 3],
            pools: vec![p(1, 2), p(2, 2), None, p(2, 2), None, p(2, 2), None, p(2, 2)],
            fc_widths: vec![4096, 4096],
            classes,
            attention: vec![AttentionLevel::None; 8],
            radius_override: None,
            dropout: 0.5,
        }
    }

    pub fn with_attention(mut self, level: AttentionLevel) -> Self {
        self.attention = vec![level; self.conv_channels.len()];
        self
    }

    /// `(frames, height, width)` of every conv layer's output.
    pub fn layer_dims(&self) -> Vec<FeatureDims> {
        let mut d = FeatureDims::new(self.frames, self.height, self.width);
        let mut out = Vec::with_capacity(self.conv_channels.len());
        for p in &self.pools {
            out.push(d);
            if let Some([pt, ph, pw]) = p {
                d = FeatureDims::new(d.frames.div_ceil(*pt), d.height.div_ceil(*ph), d.width.div_ceil(*pw));
            }
        }
        out
    }

    fn flat_width(&self) -> usize {
        let dims = self.layer_dims();
        let mut d = *dims.last().unwrap();
        if let Some(Some([pt, ph, pw])) = self.pools.last() {
            d = FeatureDims::new(d.frames.div_ceil(*pt), d.height.div_ceil(*ph), d.width.div_ceil(*pw));
        }
        d.len() * self.conv_channels.last().unwrap()
    }

    pub fn feature_width(&self) -> usize {
        *self.fc_widths.last().unwrap()
    }

    pub fn uses_scores(&self) -> bool {
        self.attention.contains(&AttentionLevel::Weighted)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.fc_widths.is_empty() || self.classes < 2 {
            return Err(invalid("c3d config needs conv layers, fc layers and >= 2 classes"));
        }
        if self.pools.len() != n || self.attention.len() != n {
            return Err(invalid(format!(
                "c3d config has {n} conv layers but {} pools and {} attention levels",
                self.pools.len(),
                self.attention.len()
            )));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("c3d input dims must be positive"));
        }
        if self.conv_channels.iter().chain(&self.fc_widths).any(|&c| c == 0) || self.kernel.contains(&0) {
            return Err(invalid("c3d widths and kernel must be positive"));
        }
        for (i, (p, d)) in self.pools.iter().zip(self.layer_dims()).enumerate() {
            if let Some(p) = p {
                if p.contains(&0) || p[0] > d.frames || p[1] > d.height || p[2] > d.width {
                    return Err(invalid(format!("pool {p:?} after conv {} does not fit feature {d:?}", i + 1)));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// What the attention modules need for one clip: its joint positions in
/// input pixels, and joint scores for weighted masks.
#[derive(Debug, Clone, Copy)]
pub struct ClipGuidance<'a> {
    pub joints: &'a [Vec<Joint2d>],
    pub scores: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy)]
pub struct C3dOutput {
    pub logits: Var,
    /// Output of the last hidden FC layer.
    pub feature: Var,
}

#[derive(Debug, Clone)]
pub struct C3dNet {
    pub config: C3dConfig,
    pub convs: Vec<Conv3dLayer>,
    pub fcs: Vec<LinearLayer>,
    pub out: LinearLayer,
}

impl C3dNet {
    pub fn build<R: Rng>(config: C3dConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c_in = 3;
        let mut convs = Vec::new();
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv3dLayer::new(store, &format!("{prefix}.conv{}", i + 1), c_in, c, config.kernel, Padding::Same, rng)?);
            c_in = c;
        }
        let mut n_in = config.flat_width();
        let mut fcs = Vec::new();
        for (i, &w) in config.fc_widths.iter().enumerate() {
            fcs.push(LinearLayer::new(store, &format!("{prefix}.fc{}", i + 1), n_in, w, rng)?);
            n_in = w;
        }
        let out = LinearLayer::new(store, &format!("{prefix}.out"), n_in, config.classes, rng)?;
        Ok(Self { config, convs, fcs, out })
    }

    /// Joint positions aligned to every conv layer's output grid: spatial
    /// floor-downsampling, with temporal midpoints taken before it at each
    /// temporal pool.
    pub fn align_joints(&self, joints: &[Vec<Joint2d>]) -> Result<Vec<Vec<Vec<Joint2d>>>> {
        let cfg = &self.config;
        if joints.len() != cfg.frames {
            return Err(invalid(format!("clip has joints for {} frames, network expects {}", joints.len(), cfg.frames)));
        }
        let dims = cfg.layer_dims();
        let mut cur = joints.to_vec();
        let mut out = Vec::with_capacity(dims.len());
        for (i, d) in dims.iter().enumerate() {
            if i > 0 {
                let prev = dims[i - 1];
                if d.frames < prev.frames {
                    cur = interpolate_temporal_coords(&cur);
                }
                cur = downsample_joint_coords(&cur, (prev.height, prev.width), (d.height, d.width))?;
            }
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Mask for conv layer `layer` (0-based), or `None` when that layer has
    /// no attention.
    pub fn layer_mask(&self, layer: usize, aligned: &[Vec<Joint2d>], scores: Option<&[f64]>) -> Result<Option<AttentionMask>> {
        let dims = self.config.layer_dims()[layer];
        let radius = self.config.radius_override.unwrap_or_else(|| radius_for_width(dims.width));
        let level = self.config.attention[layer];
        if level == AttentionLevel::None {
            return Ok(None);
        }
        let areas = CharacteristicAreaSet::new(aligned, dims, radius)?;
        Ok(Some(match level {
            AttentionLevel::Binary => build_binary_mask(&areas),
            _ => {
                let s = scores.ok_or_else(|| invalid(format!("conv layer {} uses weighted attention but no scores were given", layer + 1)))?;
                build_weighted_mask(&areas, s)?
            }
        }))
    }

    /// Masks per layer for a batch, `[layer][sample]`.
    pub fn batch_masks(&self, guidance: &[ClipGuidance<'_>]) -> Result<Vec<Option<Vec<AttentionMask>>>> {
        let n = self.convs.len();
        let mut per_layer: Vec<Option<Vec<AttentionMask>>> =
            (0..n).map(|i| (self.config.attention[i] != AttentionLevel::None).then(Vec::new)).collect();
        if per_layer.iter().all(Option::is_none) {
            return Ok(per_layer);
        }
        for gd in guidance {
            let aligned = self.align_joints(gd.joints)?;
            for (layer, slot) in per_layer.iter_mut().enumerate() {
                if let Some(v) = slot {
                    v.push(self.layer_mask(layer, &aligned[layer], gd.scores)?.unwrap());
                }
            }
        }
        Ok(per_layer)
    }

    /// Network input for a batch of clips, shifted by [`INPUT_MEAN`].
    pub fn clip_batch(&self, clips: &[&FlowClip]) -> Result<DiffTensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(clips.len() * 3 * c.frames * c.height * c.width);
        for clip in clips {
            if (clip.frames, clip.height, clip.width) != (c.frames, c.height, c.width) {
                return Err(invalid(format!(
                    "clip is {}x{}x{}, network expects {}x{}x{}",
                    clip.frames, clip.height, clip.width, c.frames, c.height, c.width
                )));
            }
            data.extend(clip.data.iter().map(|v| v - INPUT_MEAN));
        }
        DiffTensor::new(&[clips.len(), 3, c.frames, c.height, c.width], data)
    }

    /// `x [batch, 3, L, H, W]`; `guidance` has one entry per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        guidance: &[ClipGuidance<'_>],
        seed: u64,
    ) -> Result<C3dOutput> {
        let masks = self.batch_masks(guidance)?;
        self.forward_with_masks(g, store, x, &masks, seed)
    }

    pub fn forward_with_masks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        masks: &[Option<Vec<AttentionMask>>],
        seed: u64,
    ) -> Result<C3dOutput> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
            if let Some(Some(m)) = masks.get(i) {
                h = apply_attention(g, h, m)?;
            }
            if let Some(p) = self.config.pools[i] {
                h = g.maxpool3d(h, p)?;
            }
        }
        let b = g.shape(h)[0];
        let width = g.value(h).len() / b;
        h = g.reshape(h, &[b, width])?;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(g, store, h)?;
            h = g.relu(h);
            h = g.dropout(h, self.config.dropout, rng::derive(seed, &format!("c3d.fc{i}")))?;
        }
        let logits = self.out.forward(g, store, h)?;
        Ok(C3dOutput { logits, feature: h })
    }

    /// Mean softmax over every clip of one sequence.
    pub fn predict_sequence(&self, store: &ParamStore, clips: &[FlowClip], scores: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut per_clip = Vec::with_capacity(clips.len());
        for clip in clips {
            let mut g = Graph::inference(Mode::Eval);
            let x = g.constant(self.clip_batch(&[clip])?);
            let gd = [ClipGuidance { joints: &clip.joints2d, scores }];
            let out = self.forward(&mut g, store, x, &gd, 0)?;
            let p = g.softmax(out.logits);
            per_clip.push(g.values(p).to_vec());
        }
        mean_probabilities(&per_clip)
    }
}

/// Arithmetic mean of per-clip probability vectors.
pub fn mean_probabilities(per_clip: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_clip.first().ok_or_else(|| invalid("cannot predict a sequence with no clips"))?;
    let mut mean = vec![0.0; first.len()];
    for p in per_clip {
        if p.len() != mean.len() {
            return Err(invalid("clip predictions differ in class count"));
        }
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    let n = per_clip.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
