//! The pipeline commands. Each writes `config.resolved` into its output
//! directory before doing anything else.
//!
//! Seeds: everything derives from the root seed through
//! `rng::derive(root, label)` with labels `data`, `skeleton/init`,
//! `skeleton/train`, `flow/init`, `flow/train`, `fused/init`,
//! `fused/train`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use skelflow_core::attention::mask_to_pgm;
use skelflow_core::c3d::{argmax, C3dNet};
use skelflow_core::dataset::{
    benchmark_actions, generate, make_splits, parse_manifest, sample_seed, Evaluation, GeneratedSample,
    ManifestEntry, SampleMeta,
};
use skelflow_core::flow::{frame_to_ppm, read_flow, write_flow};
use skelflow_core::fusion::{build_fused, train_fused, FusedNet};
use skelflow_core::rng;
use skelflow_core::skeleton::{RawSkeleton, SkeletonNet};
use skelflow_core::train::{
    predict_flow, prepare_sample, skeleton_inference, train_flow, train_skeleton, EpochRecord, PreparedSample,
};
use skelflow_core::ParamStore;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainSkeleton,
    TrainFlow,
    TrainFused,
    ExtractScores,
    RenderMasks,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainSkeleton => "train-skeleton",
            Self::TrainFlow => "train-flow",
            Self::TrainFused => "train-fused",
            Self::ExtractScores => "extract-scores",
            Self::RenderMasks => "render-masks",
            Self::Eval => "eval",
        }
    }
}

/// What a command produced, for callers that chain commands in-process.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub records: Vec<EpochRecord>,
    pub evaluation: Option<Evaluation>,
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path, seed: u64) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved"), cfg.resolved())?;
    match cmd {
        Command::GenData => gen_data(cfg, out, seed),
        Command::TrainSkeleton => cmd_train_skeleton(cfg, out, seed),
        Command::TrainFlow => cmd_train_flow(cfg, out, seed),
        Command::TrainFused => cmd_train_fused(cfg, out, seed),
        Command::ExtractScores => extract_scores(cfg, out),
        Command::RenderMasks => render_masks(cfg, out),
        Command::Eval => eval(cfg, out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Outcome> {
    let bench = cfg.benchmark()?;
    let root = rng::derive(seed, "data");
    fs::create_dir_all(out.join("skeletons"))?;
    fs::create_dir_all(out.join("flow"))?;
    let mut manifest = String::new();
    for (meta, action) in benchmark_actions(&bench, root)? {
        let s = generate(&action, &bench.render, sample_seed(root, meta.id))?;
        let entry = ManifestEntry {
            meta,
            skeleton_path: format!("skeletons/{:05}.skel", meta.id),
            flow_path: format!("flow/{:05}.flw", meta.id),
        };
        fs::write(out.join(&entry.skeleton_path), s.skeleton.to_text())?;
        fs::write(out.join(&entry.flow_path), write_flow(&s.flow)?)?;
        if meta.id == 0 {
            let frames = prepare_sample(meta, &s, &cfg.input()?)?.frames;
            fs::create_dir_all(out.join("previews"))?;
            for t in 0..frames.frames {
                fs::write(out.join(format!("previews/{:05}_t{t:03}.ppm", meta.id)), frame_to_ppm(&frames, t)?)?;
            }
        }
        manifest.push_str(&entry.to_line());
        manifest.push('\n');
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    Ok(Outcome::default())
}

/// A generated dataset read back from disk.
pub struct Dataset {
    pub samples: Vec<PreparedSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_refs(&self) -> Vec<&PreparedSample> {
        self.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn test_refs(&self) -> Vec<&PreparedSample> {
        self.test.iter().map(|&i| &self.samples[i]).collect()
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.required_path("data.dir")?;
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("reading {}", dir.join("manifest.txt").display()))?;
    let input = cfg.input()?;
    let mut samples = Vec::new();
    for e in parse_manifest(&text)? {
        let skel = fs::read_to_string(dir.join(&e.skeleton_path))
            .with_context(|| format!("reading {}", e.skeleton_path))?;
        let flow = fs::read(dir.join(&e.flow_path)).with_context(|| format!("reading {}", e.flow_path))?;
        let g = GeneratedSample { skeleton: RawSkeleton::parse(&skel)?, flow: read_flow(&flow)?, label: e.meta.class };
        samples.push(prepare_sample(e.meta, &g, &input)?);
    }
    let metas: Vec<SampleMeta> = samples.iter().map(|s| s.meta).collect();
    let (train, test) = make_splits(&metas, &cfg.protocol()?)?;
    Ok(Dataset { samples, train, test })
}

fn write_report<T: Serialize>(out: &Path, lines: &[T]) -> Result<()> {
    let mut f = fs::File::create(out.join("report.ndjson"))?;
    for l in lines {
        writeln!(f, "{}", serde_json::to_string(l)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TestRecord<'a> {
    split: &'a str,
    accuracy: f64,
    confusion: &'a [Vec<usize>],
}

fn report_with_test(out: &Path, records: &[EpochRecord], eval: &Evaluation) -> Result<()> {
    let mut lines: Vec<serde_json::Value> = records.iter().map(serde_json::to_value).collect::<Result<_, _>>()?;
    lines.push(serde_json::to_value(TestRecord { split: "test", accuracy: eval.accuracy, confusion: &eval.confusion })?);
    write_report(out, &lines)
}

pub fn build_skeleton(cfg: &RunConfig, store: &mut ParamStore, seed: u64) -> Result<SkeletonNet> {
    Ok(SkeletonNet::build(cfg.skeleton_model()?, store, "skel", &mut rng::stream(seed, "skeleton/init"))?)
}

pub fn build_flow(cfg: &RunConfig, store: &mut ParamStore, seed: u64) -> Result<C3dNet> {
    Ok(C3dNet::build(cfg.flow_model()?, store, "flow", &mut rng::stream(seed, "flow/init"))?)
}

/// Skeleton network with parameters from `skeleton.checkpoint`.
pub fn load_skeleton(cfg: &RunConfig, store: &mut ParamStore) -> Result<SkeletonNet> {
    let dir = cfg.required_path("skeleton.checkpoint")?;
    let net = build_skeleton(cfg, store, 0)?;
    store.load_checkpoint(&dir).with_context(|| format!("loading skeleton checkpoint {}", dir.display()))?;
    Ok(net)
}

fn cmd_train_skeleton(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Outcome> {
    let data = load_dataset(cfg)?;
    let mut store = ParamStore::new();
    let net = build_skeleton(cfg, &mut store, seed)?;
    let records = train_skeleton(&net, &mut store, &data.train_refs(), &cfg.skeleton_train()?, rng::derive(seed, "skeleton/train"))?;
    let sel = cfg.selection()?;
    let eval = skelflow_core::dataset::evaluate(&data.test_refs(), net.config.classes, |s| s.meta.class, |s| {
        Ok(argmax(&skeleton_inference(&net, &store, &[&s.skeleton], &sel)?[0].0))
    })?;
    store.save_checkpoint(&out.join("checkpoints"))?;
    report_with_test(out, &records, &eval)?;
    Ok(Outcome { records, evaluation: Some(eval) })
}

/// Joint scores per sample id, from `scores.file` when set, otherwise from
/// the skeleton checkpoint.
pub fn sample_scores(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if let Some(path) = cfg.optional_path("scores.file")? {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let table = parse_scores(&text)?;
        return data
            .samples
            .iter()
            .map(|s| {
                table
                    .iter()
                    .find(|(id, _)| *id == s.meta.id)
                    .map(|(_, v)| v.clone())
                    .with_context(|| format!("{} has no scores for sample {}", path.display(), s.meta.id))
            })
            .collect();
    }
    let mut store = ParamStore::new();
    let net = load_skeleton(cfg, &mut store).context("weighted attention needs scores.file or skeleton.checkpoint")?;
    let sel = cfg.selection()?;
    data.samples
        .iter()
        .map(|s| Ok(skeleton_inference(&net, &store, &[&s.skeleton], &sel)?[0].1.scores.clone()))
        .collect()
}

/// `<sample id> <score_0> ... <score_K-1>` lines; `#` starts a comment.
pub fn parse_scores(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for line in text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()) {
        let mut f = line.split_whitespace();
        let id = f.next().unwrap_or("").parse().with_context(|| format!("bad sample id in `{line}`"))?;
        let v = f.map(str::parse).collect::<Result<Vec<f64>, _>>().with_context(|| format!("bad score in `{line}`"))?;
        rows.push((id, v));
    }
    Ok(rows)
}

fn cmd_train_flow(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Outcome> {
    let data = load_dataset(cfg)?;
    let mut store = ParamStore::new();
    let net = build_flow(cfg, &mut store, seed)?;
    let scores = if net.config.uses_scores() { Some(sample_scores(cfg, &data)?) } else { None };
    let train_scores: Option<Vec<Vec<f64>>> = scores.as_ref().map(|s| data.train.iter().map(|&i| s[i].clone()).collect());
    let input = cfg.input()?;
    let records = train_flow(
        &net,
        &mut store,
        &data.train_refs(),
        train_scores.as_deref(),
        &input,
        &cfg.flow_train()?,
        rng::derive(seed, "flow/train"),
    )?;
    let eval = skelflow_core::dataset::evaluate(&data.test, net.config.classes, |&i| data.samples[i].meta.class, |&i| {
        let s = scores.as_ref().map(|s| s[i].as_slice());
        Ok(argmax(&predict_flow(&net, &store, &data.samples[i], s, &input)?))
    })?;
    store.save_checkpoint(&out.join("checkpoints"))?;
    report_with_test(out, &records, &eval)?;
    Ok(Outcome { records, evaluation: Some(eval) })
}

/// Skeleton (from `skeleton.checkpoint` when set), flow network and fused
/// head in one store. The bool says whether the skeleton was loaded.
pub fn build_fused_net(cfg: &RunConfig, store: &mut ParamStore, seed: u64) -> Result<(FusedNet, bool)> {
    let (skel, pretrained) = match cfg.optional_path("skeleton.checkpoint")? {
        Some(_) => (load_skeleton(cfg, store)?, true),
        None => (build_skeleton(cfg, store, seed)?, false),
    };
    let flow = build_flow(cfg, store, seed)?;
    let net = build_fused(skel, flow, cfg.fusion()?, store, &mut rng::stream(seed, "fused/init"))?;
    Ok((net, pretrained))
}

fn fused_accuracy(net: &FusedNet, store: &ParamStore, data: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let input = cfg.input()?;
    Ok(skelflow_core::dataset::evaluate(&data.test_refs(), net.classes(), |s| s.meta.class, |s| {
        Ok(argmax(&net.predict_sequence(store, &s.skeleton, &input.center_clips(&s.frames)?)?))
    })?)
}

fn cmd_train_fused(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Outcome> {
    let data = load_dataset(cfg)?;
    let mut store = ParamStore::new();
    let (net, pretrained) = build_fused_net(cfg, &mut store, seed)?;
    let records = train_fused(
        &net,
        &mut store,
        &data.train_refs(),
        &cfg.input()?,
        &cfg.flow_train()?,
        pretrained,
        rng::derive(seed, "fused/train"),
    )?;
    let eval = fused_accuracy(&net, &store, &data, cfg)?;
    store.save_checkpoint(&out.join("checkpoints"))?;
    report_with_test(out, &records, &eval)?;
    Ok(Outcome { records, evaluation: Some(eval) })
}

fn extract_scores(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let data = load_dataset(cfg)?;
    let mut store = ParamStore::new();
    let net = load_skeleton(cfg, &mut store)?;
    let sel = cfg.selection()?;
    let mut text = format!("# layers={}\n", cfg.get("scores.layers")?);
    for s in &data.samples {
        let v = &skeleton_inference(&net, &store, &[&s.skeleton], &sel)?[0].1.scores;
        let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        text.push_str(&format!("{} {}\n", s.meta.id, cells.join(" ")));
    }
    fs::write(out.join("scores.txt"), text)?;
    Ok(Outcome::default())
}

/// Masks of every attention layer for the first centered clip of
/// `masks.sample`, one PGM per layer and frame.
fn render_masks(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let data = load_dataset(cfg)?;
    let id = cfg.usize("masks.sample")?;
    let Some(idx) = data.samples.iter().position(|s| s.meta.id == id) else {
        bail!("masks.sample {id} is not in the dataset");
    };
    let mut store = ParamStore::new();
    let net = build_flow(cfg, &mut store, 0)?;
    if net.config.attention.iter().all(|a| *a == skelflow_core::c3d::AttentionLevel::None) {
        bail!("flow.attention is none everywhere: there are no masks to render");
    }
    let scores = if net.config.uses_scores() { Some(sample_scores(cfg, &data)?.swap_remove(idx)) } else { None };
    let clips = cfg.input()?.center_clips(&data.samples[idx].frames)?;
    let aligned = net.align_joints(&clips[0].joints2d)?;
    let dir = out.join("masks");
    fs::create_dir_all(&dir)?;
    for (layer, joints) in aligned.iter().enumerate() {
        if let Some(mask) = net.layer_mask(layer, joints, scores.as_deref())? {
            for t in 0..mask.dims.frames {
                fs::write(dir.join(format!("{id:05}_conv{}_t{t:02}.pgm", layer + 1)), mask_to_pgm(&mask, t)?)?;
            }
        }
    }
    Ok(Outcome::default())
}

/// `<sample id> <predicted class>` lines.
pub fn parse_predictions(text: &str) -> Result<Vec<(usize, usize)>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f[..] {
                [a, b] => Ok((a.parse()?, b.parse()?)),
                _ => bail!("prediction line needs `<sample id> <class>`: `{l}`"),
            }
        })
        .collect()
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let classes = cfg.usize("data.classes")?;
    let evaluation = if let Some(path) = cfg.optional_path("eval.predictions")? {
        let dir = cfg.required_path("data.dir")?;
        let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        let preds = parse_predictions(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
        let mut labels = Vec::with_capacity(preds.len());
        for (id, _) in &preds {
            let e = manifest.iter().find(|e| e.meta.id == *id).with_context(|| format!("sample {id} not in manifest"))?;
            labels.push(e.meta.class);
        }
        let p: Vec<usize> = preds.iter().map(|(_, c)| *c).collect();
        Evaluation::from_predictions(&labels, &p, classes)?
    } else {
        let data = load_dataset(cfg)?;
        let ckpt: PathBuf = cfg.required_path("eval.checkpoint")?;
        let mut store = ParamStore::new();
        match cfg.get("eval.model")? {
            "skeleton" => {
                let net = build_skeleton(cfg, &mut store, 0)?;
                store.load_checkpoint(&ckpt)?;
                let sel = cfg.selection()?;
                skelflow_core::dataset::evaluate(&data.test_refs(), classes, |s| s.meta.class, |s| {
                    Ok(argmax(&skeleton_inference(&net, &store, &[&s.skeleton], &sel)?[0].0))
                })?
            }
            "flow" => {
                let net = build_flow(cfg, &mut store, 0)?;
                store.load_checkpoint(&ckpt)?;
                let scores = if net.config.uses_scores() { Some(sample_scores(cfg, &data)?) } else { None };
                let input = cfg.input()?;
                skelflow_core::dataset::evaluate(&data.test, classes, |&i| data.samples[i].meta.class, |&i| {
                    let s = scores.as_ref().map(|s| s[i].as_slice());
                    Ok(argmax(&predict_flow(&net, &store, &data.samples[i], s, &input)?))
                })?
            }
            _ => {
                let skel = build_skeleton(cfg, &mut store, 0)?;
                let flow = build_flow(cfg, &mut store, 0)?;
                let net = build_fused(skel, flow, cfg.fusion()?, &mut store, &mut rng::stream(0, "fused/init"))?;
                store.load_checkpoint(&ckpt)?;
                fused_accuracy(&net, &store, &data, cfg)?
            }
        }
    };
    write_report(out, &[TestRecord { split: "test", accuracy: evaluation.accuracy, confusion: &evaluation.confusion }])?;
    fs::write(out.join("eval.txt"), evaluation.report())?;
    Ok(Outcome { records: Vec::new(), evaluation: Some(evaluation) })
}
