//! Input preparation and minibatch SGD loops for the skeleton and flow
//! networks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::c3d::{argmax, C3dNet, ClipGuidance};
use crate::dataset::{GeneratedSample, SampleMeta};
use crate::error::{invalid, Result};
use crate::flow::{choose_crop, colorize_flow, crop_resize, split_clips, temporal_downsample, FlowClip, FrameSequence};
use crate::optim::{sgd_step, LrSchedule, LrScheduler, OptimizerState};
use crate::params::ParamStore;
use crate::rng;
use crate::skeleton::{
    extract_informativeness, normalize_skeleton, FeatureMap, JointScoreVector, LayerSelection, SkeletonNet,
    SkeletonSequence,
};
use crate::tensor::{Graph, Mode, Var};

/// How raw samples become network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputConfig {
    pub skeleton_frames: usize,
    pub flow_downsample: usize,
    pub clip_len: usize,
    pub clip_overlap: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

impl InputConfig {
    pub fn desk() -> Self {
        Self { skeleton_frames: 60, flow_downsample: 2, clip_len: 8, clip_overlap: 4, crop_height: 32, crop_width: 32 }
    }

    /// Crops (jittered when `rng` is given, centered otherwise) and splits a
    /// sample's colorized flow into clips.
    pub fn clips<R: Rng>(&self, frames: &FrameSequence, rng: Option<&mut R>) -> Result<Vec<FlowClip>> {
        let crop = choose_crop(frames.height, frames.width, self.crop_height, self.crop_width, rng)?;
        let cropped = crop_resize(frames, crop, self.crop_height, self.crop_width)?;
        split_clips(&cropped, self.clip_len, self.clip_overlap)
    }

    pub fn center_clips(&self, frames: &FrameSequence) -> Result<Vec<FlowClip>> {
        self.clips::<ChaCha8Rng>(frames, None)
    }
}

/// A sample ready for either network: normalized skeleton and colorized,
/// temporally downsampled flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub meta: SampleMeta,
    pub skeleton: SkeletonSequence,
    pub frames: FrameSequence,
}

pub fn prepare_sample(meta: SampleMeta, sample: &GeneratedSample, input: &InputConfig) -> Result<PreparedSample> {
    let skeleton = normalize_skeleton(&sample.skeleton, input.skeleton_frames)?;
    let frames = temporal_downsample(&colorize_flow(&sample.flow)?, input.flow_downsample)?;
    Ok(PreparedSample { meta, skeleton, frames })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub nesterov: bool,
    pub l1: f64,
    pub bn_momentum: f64,
    /// Random clips drawn per sample per epoch (flow and fused training).
    pub clips_per_sample: usize,
    /// Fill `wall_seconds` in epoch records. Off keeps reports reproducible.
    pub record_wall_time: bool,
}

impl TrainOptions {
    pub fn skeleton_desk() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-2,
            schedule: LrSchedule::Plateau { factor: 10.0, patience: 5 },
            momentum: 0.9,
            nesterov: true,
            l1: 1e-4,
            bn_momentum: 0.9,
            clips_per_sample: 1,
            record_wall_time: false,
        }
    }

    pub fn flow_desk() -> Self {
        Self {
            epochs: 16,
            batch_size: 16,
            learning_rate: 2e-2,
            schedule: LrSchedule::StepDecay { factor: 5.0, every: 8 },
            momentum: 0.9,
            nesterov: true,
            l1: 1e-4,
            bn_momentum: 0.9,
            clips_per_sample: 1,
            record_wall_time: false,
        }
    }

    /// Skeleton pretraining as published: lr 1e-2 divided by 10 on plateau,
    /// batch 128, 150 epochs.
    pub fn skeleton_paper() -> Self {
        Self { epochs: 150, batch_size: 128, bn_momentum: 0.99, ..Self::skeleton_desk() }
    }

    /// Flow and fused training as published: lr 3e-3 divided by 5 every 4
    /// epochs, batch 60, 30 epochs.
    pub fn flow_paper() -> Self {
        Self {
            epochs: 30,
            batch_size: 60,
            learning_rate: 3e-3,
            schedule: LrSchedule::StepDecay { factor: 5.0, every: 4 },
            bn_momentum: 0.99,
            ..Self::flow_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.clips_per_sample == 0 {
            return Err(invalid("epochs, batch size and clips per sample must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(invalid(format!("batch-norm momentum {} outside [0, 1)", self.bn_momentum)));
        }
        Ok(())
    }
}

/// One line of a training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: Option<f64>,
}

/// A built training graph for one minibatch.
pub struct BatchOutcome {
    pub graph: Graph,
    pub loss: Var,
    pub logits: Var,
    pub labels: Vec<usize>,
}

/// Shuffled minibatch SGD. `epoch_items` lists the epoch's training items
/// (it may draw crops or clips from the rng); `batch` builds the loss graph
/// of one minibatch from the current parameters.
pub fn train_loop<I>(
    store: &mut ParamStore,
    opts: &TrainOptions,
    seed: u64,
    mut epoch_items: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<I>>,
    mut batch: impl FnMut(&ParamStore, &[I], u64) -> Result<BatchOutcome>,
) -> Result<Vec<EpochRecord>> {
    opts.validate()?;
    let mut sched = LrScheduler::new(opts.learning_rate, opts.schedule)?;
    let mut optim = OptimizerState::new(opts.learning_rate, opts.momentum, opts.nesterov, opts.l1)?;
    let mut records = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        let lr = sched.lr(epoch);
        optim.learning_rate = lr;
        let mut r = rng::stream(seed, &format!("epoch/{epoch}"));
        let mut items = epoch_items(epoch, &mut r)?;
        if items.is_empty() {
            return Err(invalid("training set is empty"));
        }
        items.shuffle(&mut r);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in items.chunks(opts.batch_size).enumerate() {
            let bseed = rng::derive(seed, &format!("epoch/{epoch}/batch/{b}"));
            let mut out = batch(store, chunk, bseed)?;
            out.graph.backward(out.loss)?;
            let n = out.labels.len();
            loss_sum += out.graph.values(out.loss)[0] * n as f64;
            let logits = out.graph.values(out.logits);
            let classes = logits.len() / n;
            for (row, &l) in logits.chunks(classes).zip(&out.labels) {
                correct += usize::from(argmax(row) == l);
            }
            seen += n;
            out.graph.accumulate_grads(store);
            let stats = out.graph.take_stat_updates();
            sgd_step(store, &mut optim)?;
            store.apply_stat_updates(&stats, opts.bn_momentum);
        }
        let loss = loss_sum / seen as f64;
        sched.observe(loss);
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss,
            accuracy: correct as f64 / seen as f64,
            lr,
            wall_seconds: opts.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(records)
}

pub fn train_skeleton(
    net: &SkeletonNet,
    store: &mut ParamStore,
    samples: &[&PreparedSample],
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    train_loop(
        store,
        opts,
        seed,
        |_, _| Ok((0..samples.len()).collect()),
        |store, idx: &[usize], bseed| {
            let seqs: Vec<&SkeletonSequence> = idx.iter().map(|&i| &samples[i].skeleton).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].meta.class).collect();
            let mut g = Graph::new(Mode::Train);
            let x = g.constant(net.batch_tensor(&seqs)?);
            let (out, _) = net.forward(&mut g, store, x, bseed)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            Ok(BatchOutcome { graph: g, loss, logits: out.logits, labels })
        },
    )
}

/// Eval-mode skeleton forward: class probabilities and joint scores per
/// sequence.
pub fn skeleton_inference(
    net: &SkeletonNet,
    store: &ParamStore,
    seqs: &[&SkeletonSequence],
    selection: &LayerSelection,
) -> Result<Vec<(Vec<f64>, JointScoreVector)>> {
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(net.batch_tensor(seqs)?);
    let (out, features) = net.forward(&mut g, store, x, 0)?;
    let p = g.softmax(out.logits);
    let classes = net.config.classes;
    let probs = g.values(p).to_vec();
    let scores = scores_from_graph(&g, &features, selection)?;
    Ok(probs.chunks(classes).map(<[f64]>::to_vec).zip(scores).collect())
}

/// Joint scores of every sample from the values of bottom features in a
/// graph. Values only: nothing flows back through the scores.
pub fn scores_from_graph(g: &Graph, features: &[Var], selection: &LayerSelection) -> Result<Vec<JointScoreVector>> {
    let batch = features.first().map_or(0, |f| g.shape(*f)[0]);
    (0..batch)
        .map(|b| {
            let maps = features
                .iter()
                .map(|f| FeatureMap::from_network(g.values(*f), g.shape(*f), b))
                .collect::<Result<Vec<_>>>()?;
            extract_informativeness(&maps, selection)
        })
        .collect()
}

/// One training clip per draw: a fresh jittered crop of every sample each
/// epoch, then `clips_per_sample` clips chosen at random.
pub fn draw_clips(
    samples: &[&PreparedSample],
    input: &InputConfig,
    per_sample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, FlowClip)>> {
    let mut out = Vec::with_capacity(samples.len() * per_sample);
    for (i, s) in samples.iter().enumerate() {
        let clips = input.clips(&s.frames, Some(&mut *rng))?;
        for c in rand::seq::index::sample(rng, clips.len(), per_sample.min(clips.len())) {
            out.push((i, clips[c].clone()));
        }
    }
    Ok(out)
}

/// Trains the flow network. `scores[i]` guides sample `i` when the network
/// uses weighted attention.
pub fn train_flow(
    net: &C3dNet,
    store: &mut ParamStore,
    samples: &[&PreparedSample],
    scores: Option<&[Vec<f64>]>,
    input: &InputConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    if net.config.uses_scores() && scores.is_none_or(|s| s.len() != samples.len()) {
        return Err(invalid("weighted attention needs one score vector per training sample"));
    }
    train_loop(
        store,
        opts,
        seed,
        |_, r| draw_clips(samples, input, opts.clips_per_sample, r),
        |store, items: &[(usize, FlowClip)], bseed| {
            let clips: Vec<&FlowClip> = items.iter().map(|(_, c)| c).collect();
            let labels: Vec<usize> = items.iter().map(|(i, _)| samples[*i].meta.class).collect();
            let guidance: Vec<ClipGuidance<'_>> = items
                .iter()
                .map(|(i, c)| ClipGuidance { joints: &c.joints2d, scores: scores.map(|s| s[*i].as_slice()) })
                .collect();
            let mut g = Graph::new(Mode::Train);
            let x = g.constant(net.clip_batch(&clips)?);
            let out = net.forward(&mut g, store, x, &guidance, bseed)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            Ok(BatchOutcome { graph: g, loss, logits: out.logits, labels })
        },
    )
}

/// Mean clip probabilities over a sample's centered clips.
pub fn predict_flow(
    net: &C3dNet,
    store: &ParamStore,
    sample: &PreparedSample,
    scores: Option<&[f64]>,
    input: &InputConfig,
) -> Result<Vec<f64>> {
    let clips = input.center_clips(&sample.frames)?;
    net.predict_sequence(store, &clips, scores)
}
