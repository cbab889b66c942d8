//! Late fusion of the skeleton and flow networks: one softmax head over the
//! concatenated FC features, trained jointly or with the skeleton frozen.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::c3d::{mean_probabilities, C3dNet, ClipGuidance};
use crate::error::{invalid, Error, Result};
use crate::flow::FlowClip;
use crate::nn::LinearLayer;
use crate::params::ParamStore;
use crate::rng;
use crate::skeleton::{LayerSelection, SkeletonNet, SkeletonSequence};
use crate::tensor::{Graph, Mode, Var};
use crate::train::{draw_clips, scores_from_graph, train_loop, BatchOutcome, EpochRecord, PreparedSample, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionPolicy {
    /// Every parameter, skeleton included, follows the fused loss.
    Joint,
    /// The skeleton network only runs in inference mode; its parameters and
    /// running statistics never change.
    FrozenSkeleton,
}

impl FusionPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "frozen" | "frozen_skeleton" => Ok(Self::FrozenSkeleton),
            _ => Err(invalid(format!("unknown fusion policy {s:?} (expected joint or frozen_skeleton)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::FrozenSkeleton => "frozen_skeleton",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub flow_width: usize,
    pub skeleton_width: usize,
    pub policy: FusionPolicy,
    /// Bottom layers the weighted masks draw their scores from.
    pub selection: LayerSelection,
    /// Lets joint training start from a skeleton that was never trained.
    pub allow_untrained_skeleton: bool,
}

impl FusionConfig {
    /// 64 flow + 48 skeleton features.
    pub fn desk(policy: FusionPolicy) -> Self {
        Self {
            flow_width: 64,
            skeleton_width: 48,
            policy,
            selection: LayerSelection::sum(),
            allow_untrained_skeleton: false,
        }
    }

    pub fn head_width(&self) -> usize {
        self.flow_width + self.skeleton_width
    }
}

#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub logits: Var,
    /// `[batch, flow_width + skeleton_width]`, flow first.
    pub feature: Var,
    /// Joint scores that shaped each sample's masks.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FusedNet {
    pub config: FusionConfig,
    pub skeleton: SkeletonNet,
    pub flow: C3dNet,
    pub head: LinearLayer,
}

/// Adds the fused head (named `fused.head`) to `store`.
pub fn build_fused<R: Rng>(
    skeleton: SkeletonNet,
    flow: C3dNet,
    config: FusionConfig,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<FusedNet> {
    let (fw, sw) = (flow.config.feature_width(), skeleton.config.feature_width());
    if fw != config.flow_width || sw != config.skeleton_width {
        return Err(invalid(format!(
            "fusion expects {} flow + {} skeleton features, networks produce {fw} + {sw}",
            config.flow_width, config.skeleton_width
        )));
    }
    if flow.config.classes != skeleton.config.classes {
        return Err(invalid(format!(
            "flow network has {} classes, skeleton network {}",
            flow.config.classes, skeleton.config.classes
        )));
    }
    let head = LinearLayer::new(store, "fused.head", config.head_width(), flow.config.classes, rng)?;
    Ok(FusedNet { config, skeleton, flow, head })
}

impl FusedNet {
    pub fn classes(&self) -> usize {
        self.flow.config.classes
    }

    /// Skeleton features and per-sample joint scores. Under the frozen
    /// policy (or in eval mode) they come from a separate eval-mode graph
    /// and enter `g` as a constant.
    fn skeleton_part(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[&SkeletonSequence],
        seed: u64,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let x = self.skeleton.batch_tensor(seqs)?;
        let sel = &self.config.selection;
        if self.config.policy == FusionPolicy::Joint && g.is_training() {
            let xv = g.constant(x);
            let (out, features) = self.skeleton.forward(g, store, xv, seed)?;
            let scores = scores_from_graph(g, &features, sel)?;
            return Ok((out.feature, scores.into_iter().map(|s| s.scores).collect()));
        }
        let mut sg = Graph::inference(Mode::Eval);
        let xv = sg.constant(x);
        let (out, features) = self.skeleton.forward(&mut sg, store, xv, 0)?;
        let scores = scores_from_graph(&sg, &features, sel)?;
        let feature = g.constant(sg.value(out.feature).clone());
        Ok((feature, scores.into_iter().map(|s| s.scores).collect()))
    }

    /// `seqs[i]` is the skeleton of the sequence clip `i` was cut from.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[&SkeletonSequence],
        clips: &[&FlowClip],
        seed: u64,
    ) -> Result<FusedOutput> {
        self.forward_with_scores(g, store, seqs, clips, None, seed)
    }

    /// As [`forward`](Self::forward), with the mask scores pinned to
    /// `scores` instead of read from the skeleton features.
    pub fn forward_with_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[&SkeletonSequence],
        clips: &[&FlowClip],
        scores: Option<&[Vec<f64>]>,
        seed: u64,
    ) -> Result<FusedOutput> {
        if seqs.len() != clips.len() {
            return Err(invalid(format!("{} skeletons for {} clips", seqs.len(), clips.len())));
        }
        let (skel, live) = self.skeleton_part(g, store, seqs, rng::derive(seed, "skeleton"))?;
        let scores = match scores {
            Some(s) if s.len() == clips.len() => s.to_vec(),
            Some(s) => return Err(invalid(format!("{} score vectors for {} clips", s.len(), clips.len()))),
            None => live,
        };
        let guidance: Vec<ClipGuidance<'_>> = clips
            .iter()
            .zip(&scores)
            .map(|(c, s)| ClipGuidance { joints: &c.joints2d, scores: Some(s.as_slice()) })
            .collect();
        let x = g.constant(self.flow.clip_batch(clips)?);
        let flow = self.flow.forward(g, store, x, &guidance, rng::derive(seed, "flow"))?;
        let feature = g.concat(&[flow.feature, skel])?;
        let logits = self.head.forward(g, store, feature)?;
        Ok(FusedOutput { logits, feature, scores })
    }

    /// Mean fused softmax over the given clips of one sequence.
    pub fn predict_sequence(&self, store: &ParamStore, seq: &SkeletonSequence, clips: &[FlowClip]) -> Result<Vec<f64>> {
        let mut per_clip = Vec::with_capacity(clips.len());
        for clip in clips {
            let mut g = Graph::inference(Mode::Eval);
            let out = self.forward(&mut g, store, &[seq], &[clip], 0)?;
            let p = g.softmax(out.logits);
            per_clip.push(g.values(p).to_vec());
        }
        mean_probabilities(&per_clip)
    }
}

/// Trains the fused network under its policy. `skeleton_pretrained` says
/// whether the skeleton parameters in `store` come from pretraining; joint
/// training refuses an untrained skeleton unless the config allows it.
pub fn train_fused(
    net: &FusedNet,
    store: &mut ParamStore,
    samples: &[&PreparedSample],
    input: &crate::train::InputConfig,
    opts: &TrainOptions,
    skeleton_pretrained: bool,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    if net.config.policy == FusionPolicy::Joint && !skeleton_pretrained && !net.config.allow_untrained_skeleton {
        return Err(Error::Refused(
            "joint fusion needs a pretrained skeleton network: its bottom layers guide the flow masks from the \
             first epoch (pretrain it first or allow an untrained skeleton explicitly)"
                .into(),
        ));
    }
    let prefix = format!("{}.", net.skeleton.prefix);
    let frozen = net.config.policy == FusionPolicy::FrozenSkeleton;
    if frozen {
        store.set_trainable_prefix(&prefix, false);
    }
    let result = train_loop(
        store,
        opts,
        seed,
        |_, r: &mut ChaCha8Rng| draw_clips(samples, input, opts.clips_per_sample, r),
        |store, items: &[(usize, FlowClip)], bseed| {
            let seqs: Vec<&SkeletonSequence> = items.iter().map(|(i, _)| &samples[*i].skeleton).collect();
            let clips: Vec<&FlowClip> = items.iter().map(|(_, c)| c).collect();
            let labels: Vec<usize> = items.iter().map(|(i, _)| samples[*i].meta.class).collect();
            let mut g = Graph::new(Mode::Train);
            let out = net.forward(&mut g, store, &seqs, &clips, bseed)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            Ok(BatchOutcome { graph: g, loss, logits: out.logits, labels })
        },
    );
    if frozen {
        store.set_trainable_prefix(&prefix, true);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::c3d::{AttentionLevel, C3dConfig};
    use crate::dataset::{benchmark_actions, generate, sample_seed, BenchmarkConfig};
    use crate::flow::Joint2d;
    use crate::gradcheck::{grad_check, Coordinates, GradCheckOptions};
    use crate::optim::LrSchedule;
    use crate::skeleton::ResTcnConfig;
    use crate::train::{prepare_sample, InputConfig};
    use rand::SeedableRng;

    fn tiny_flow() -> C3dConfig {
        C3dConfig {
            frames: 4,
            height: 8,
            width: 8,
            conv_channels: vec![2, 3],
            kernel: [3, 3, 3],
            pools: vec![Some([2, 2, 2]), None],
            fc_widths: vec![6],
            classes: 4,
            attention: vec![AttentionLevel::Weighted; 2],
            radius_override: None,
            dropout: 0.0,
        }
    }

    fn tiny(policy: FusionPolicy, store: &mut ParamStore) -> FusedNet {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let skel = SkeletonNet::build(ResTcnConfig::desk(4), store, "skel", &mut r).unwrap();
        let flow = C3dNet::build(tiny_flow(), store, "flow", &mut r).unwrap();
        let cfg = FusionConfig { flow_width: 6, ..FusionConfig::desk(policy) };
        build_fused(skel, flow, cfg, store, &mut r).unwrap()
    }

    fn inputs(batch: usize, seed: u64) -> (Vec<SkeletonSequence>, Vec<FlowClip>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..batch)
            .map(|_| SkeletonSequence {
                joints: 5,
                skeletons: 1,
                frames: 60,
                valid_frames: 60,
                data: (0..15 * 60).map(|_| r.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let cfg = tiny_flow();
        let clips = (0..batch)
            .map(|_| FlowClip {
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                valid_frames: cfg.frames,
                start: 0,
                data: (0..3 * 4 * 8 * 8).map(|_| r.gen::<f64>()).collect(),
                joints2d: (0..4)
                    .map(|_| (0..5).map(|_| Joint2d::new(r.gen_range(0.0..8.0), r.gen_range(0.0..8.0))).collect())
                    .collect(),
            })
            .collect();
        (seqs, clips)
    }

    fn refs<T>(v: &[T]) -> Vec<&T> {
        v.iter().collect()
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let skel = SkeletonNet::build(ResTcnConfig::desk(4), &mut store, "skel", &mut r).unwrap();
        let flow = C3dNet::build(tiny_flow(), &mut store, "flow", &mut r).unwrap();
        let cfg = FusionConfig::desk(FusionPolicy::Joint);
        assert!(build_fused(skel, flow, cfg, &mut store, &mut r).is_err());
    }

    #[test]
    fn zeroed_flow_features_leave_only_skeleton_contribution() {
        let mut store = ParamStore::new();
        let net = tiny(FusionPolicy::FrozenSkeleton, &mut store);
        let head = store.find("fused.head.w").unwrap();
        // head weights are [out, in]; zero the flow columns
        for row in store.tensor_mut(head).values_mut().chunks_mut(6 + 48) {
            row[..6].iter_mut().for_each(|v| *v = 0.0);
        }
        let (seqs, clips) = inputs(2, 1);
        let (_, other) = inputs(2, 2);
        let run = |clips: &[FlowClip]| {
            let mut g = Graph::inference(Mode::Eval);
            let out = net.forward(&mut g, &store, &refs(&seqs), &refs(clips), 0).unwrap();
            g.values(out.logits).to_vec()
        };
        let a = run(&clips);
        // joints change the masks, so reuse them; only the flow values differ
        let swapped: Vec<FlowClip> =
            other.into_iter().zip(&clips).map(|(o, c)| FlowClip { joints2d: c.joints2d.clone(), ..o }).collect();
        assert_eq!(a, run(&swapped));
    }

    #[test]
    fn permuted_head_gives_identical_logits() {
        let mut store = ParamStore::new();
        let net = tiny(FusionPolicy::FrozenSkeleton, &mut store);
        let (seqs, clips) = inputs(2, 3);
        let mut g = Graph::inference(Mode::Eval);
        let out = net.forward(&mut g, &store, &refs(&seqs), &refs(&clips), 0).unwrap();
        let feat = g.value(out.feature).clone();
        let logits = g.values(out.logits).to_vec();
        let w = store.tensor(store.find("fused.head.w").unwrap()).clone();
        let b = store.tensor(store.find("fused.head.b").unwrap()).clone();
        let (c, n) = (w.shape()[0], w.shape()[1]);
        assert_eq!(n, 6 + 48);
        // skeleton first, flow second, with the weight columns moved along
        let perm: Vec<usize> = (6..n).chain(0..6).collect();
        for s in 0..2 {
            let x: Vec<f64> = perm.iter().map(|&i| feat.values()[s * n + i]).collect();
            for k in 0..c {
                let wk: Vec<f64> = perm.iter().map(|&i| w.values()[k * n + i]).collect();
                let z = b.values()[k] + x.iter().zip(&wk).map(|(a, b)| a * b).sum::<f64>();
                assert!((z - logits[s * c + k]).abs() < 1e-12);
            }
        }
    }

    // masks are constants of the step, so the scores stay at their
    // unperturbed values
    fn loss_fn<'a>(
        net: &'a FusedNet,
        seqs: &'a [SkeletonSequence],
        clips: &'a [FlowClip],
        scores: &'a [Vec<f64>],
    ) -> impl FnMut(&ParamStore) -> Result<(Graph, Var)> + 'a {
        move |store| {
            let mut g = Graph::new(Mode::Train);
            let out = net.forward_with_scores(&mut g, store, &refs(seqs), &refs(clips), Some(scores), 7)?;
            let l = g.cross_entropy(out.logits, &[0, 3])?;
            Ok((g, l))
        }
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        for policy in [FusionPolicy::Joint, FusionPolicy::FrozenSkeleton] {
            let mut store = ParamStore::new();
            let net = tiny(policy, &mut store);
            if policy == FusionPolicy::FrozenSkeleton {
                store.set_trainable_prefix("skel.", false);
            }
            let (seqs, clips) = inputs(2, 4);
            let opts = GradCheckOptions {
                coordinates: Coordinates::Sample { per_tensor: 6, seed: 2 },
                skip_kinks: true,
                denominator_floor: 1e-6,
                ..GradCheckOptions::default()
            };
            let mut g = Graph::new(Mode::Train);
            let scores = net.forward(&mut g, &store, &refs(&seqs), &refs(&clips), 7).unwrap().scores;
            assert!(scores.iter().all(|s| s.iter().any(|v| *v > 0.0)));
            let report = grad_check(&mut store, &opts, loss_fn(&net, &seqs, &clips, &scores)).unwrap();
            assert!(report.passes(1e-4), "{policy:?}: {report:?}");
        }
    }

    fn prepared(n_per_class: usize) -> Vec<PreparedSample> {
        let cfg = BenchmarkConfig { samples_per_class: n_per_class, ..BenchmarkConfig::desk(0.0) };
        benchmark_actions(&cfg, 2)
            .unwrap()
            .into_iter()
            .map(|(m, a)| prepare_sample(m, &generate(&a, &cfg.render, sample_seed(2, m.id)).unwrap(), &InputConfig::desk()).unwrap())
            .collect()
    }

    fn desk(policy: FusionPolicy, store: &mut ParamStore) -> FusedNet {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let skel = SkeletonNet::build(ResTcnConfig::desk(4), store, "skel", &mut r).unwrap();
        let flow = C3dNet::build(C3dConfig::desk(4).with_attention(AttentionLevel::Weighted), store, "flow", &mut r).unwrap();
        build_fused(skel, flow, FusionConfig::desk(policy), store, &mut r).unwrap()
    }

    #[test]
    fn frozen_policy_leaves_skeleton_bit_identical() {
        let data = prepared(2);
        let mut store = ParamStore::new();
        let net = desk(FusionPolicy::FrozenSkeleton, &mut store);
        let before = store.checksum("skel.");
        let flow_before = store.checksum("flow.");
        let opts = TrainOptions { epochs: 2, batch_size: 4, ..TrainOptions::flow_desk() };
        train_fused(&net, &mut store, &refs(&data), &InputConfig::desk(), &opts, true, 0).unwrap();
        assert_eq!(store.checksum("skel."), before);
        assert_ne!(store.checksum("flow."), flow_before);
        assert!(store.ids().filter(|&id| store.get(id).name.starts_with("skel.")).any(|id| store.is_trainable(id)));
    }

    #[test]
    fn joint_policy_refuses_untrained_skeleton() {
        let data = prepared(1);
        let mut store = ParamStore::new();
        let net = desk(FusionPolicy::Joint, &mut store);
        let opts = TrainOptions { epochs: 1, ..TrainOptions::flow_desk() };
        let err = train_fused(&net, &mut store, &refs(&data), &InputConfig::desk(), &opts, false, 0).unwrap_err();
        assert!(matches!(err, Error::Refused(_)));
    }

    #[test]
    fn joint_training_moves_bottom_layers_and_reduces_loss() {
        let data = prepared(3);
        let mut store = ParamStore::new();
        let mut net = desk(FusionPolicy::Joint, &mut store);
        net.config.allow_untrained_skeleton = true;
        let bottom = store.checksum("skel.bjcn.in");
        let opts = TrainOptions {
            epochs: 3,
            batch_size: data.len(),
            learning_rate: 5e-3,
            schedule: LrSchedule::Constant,
            ..TrainOptions::flow_desk()
        };
        let rec = train_fused(&net, &mut store, &refs(&data), &InputConfig::desk(), &opts, false, 0).unwrap();
        assert_ne!(store.checksum("skel.bjcn.in"), bottom);
        assert!(rec.windows(2).all(|w| w[1].loss < w[0].loss), "{rec:?}");
    }
}
