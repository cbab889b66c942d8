//! Synthetic multimodal actions, split protocols and evaluation.
//!
//! A five-joint stick figure (head, left hand, right hand, left foot, right
//! foot) is animated by a per-joint motion program. The same trajectory
//! yields the skeleton sequence and a dense flow field whose pixels carry
//! the frame-to-frame 3-D displacement of the nearest joint disc.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::flow::{FlowField, Joint2d};
use crate::rng;
use crate::skeleton::RawSkeleton;

pub const JOINT_NAMES: [&str; 5] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

/// Rest pose in meters: x right, y up, z towards the camera.
const REST_POSE: [[f64; 3]; 5] = [
    [0.0, 1.6, 0.0],
    [-0.5, 1.0, 0.6],
    [0.5, 1.0, 0.6],
    [-0.2, 0.0, -0.4],
    [0.2, 0.0, -0.4],
];

/// Body centre the nuisance motions point towards.
const CENTROID: [f64; 2] = [0.0, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionType {
    /// `A sin(2π f t / N + φ)`
    Oscillation,
    /// One-sided pulses `A max(0, sin(2π f t / N + φ))²`, out and back.
    Thrust,
    /// `A t / N`
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMotion {
    pub joint: usize,
    pub kind: MotionType,
    /// Peak displacement from rest, meters.
    pub amplitude: f64,
    /// Cycles per sequence.
    pub frequency: f64,
    pub phase: f64,
    /// Unit direction of the displacement.
    pub direction: [f64; 3],
}

impl JointMotion {
    pub fn offset(&self, t: f64, frames: usize) -> f64 {
        let u = 2.0 * PI * self.frequency * t / frames as f64 + self.phase;
        match self.kind {
            MotionType::Oscillation => self.amplitude * u.sin(),
            MotionType::Thrust => self.amplitude * u.sin().max(0.0).powi(2),
            MotionType::Drift => self.amplitude * t / frames as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAction {
    pub class: usize,
    pub motions: Vec<JointMotion>,
    /// Noise level σ.
    pub noise: f64,
    pub actor: usize,
    pub view: usize,
    pub frames: usize,
}

impl SyntheticAction {
    pub fn validate(&self, render: &RenderConfig) -> Result<()> {
        if self.frames < 2 {
            return Err(invalid("a synthetic action needs at least 2 frames"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("noise level {} must be finite and >= 0", self.noise)));
        }
        if self.actor >= render.actors || self.view >= render.views {
            return Err(invalid(format!(
                "actor {} / view {} outside {} actors and {} views",
                self.actor, self.view, render.actors, render.views
            )));
        }
        for m in &self.motions {
            if m.joint >= REST_POSE.len() {
                return Err(invalid(format!("motion on joint {} but the figure has {}", m.joint, REST_POSE.len())));
            }
            let norm = m.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
            if !(m.amplitude >= 0.0 && m.frequency >= 0.0) || (norm - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("motion on joint {} needs amplitude, frequency >= 0 and a unit direction", m.joint)));
            }
        }
        Ok(())
    }

    /// Joint with the largest programmed amplitude.
    pub fn dominant_joint(&self) -> Option<usize> {
        let mut best: Option<&JointMotion> = None;
        for m in &self.motions {
            if best.is_none_or(|b| m.amplitude > b.amplitude) {
                best = Some(m);
            }
        }
        best.map(|m| m.joint)
    }
}

/// Rendering geometry and noise scales shared by every sample of a
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub pixels_per_meter: f64,
    pub disc_radius: usize,
    pub actors: usize,
    pub views: usize,
    /// In-plane rotation between neighbouring views, degrees.
    pub view_step_degrees: f64,
    /// Half-width of the uniform per-sample offset of every joint's rest
    /// position (x, y; half of it on z), meters.
    pub posture_jitter: f64,
    /// Standard deviation of flow noise per component at σ = 1, m/frame.
    pub flow_noise: f64,
    /// Standard deviation of joint jitter at σ = 1, meters.
    pub skeleton_noise: f64,
    /// Moving clutter discs per unit σ.
    pub clutter_per_sigma: f64,
    /// Peak clutter speed, m/frame.
    pub clutter_speed: f64,
}

impl RenderConfig {
    pub fn desk() -> Self {
        Self {
            height: 36,
            width: 36,
            pixels_per_meter: 15.0,
            disc_radius: 2,
            actors: 4,
            views: 3,
            view_step_degrees: 10.0,
            posture_jitter: 0.05,
            flow_noise: 0.05,
            skeleton_noise: 0.02,
            clutter_per_sigma: 10.0,
            clutter_speed: 0.06,
        }
    }

    /// In-plane rotation (radians) and pixel translation of a view.
    pub fn view_transform(&self, view: usize) -> (f64, [f64; 2]) {
        let c = view as f64 - (self.views as f64 - 1.0) / 2.0;
        let sign = if view % 2 == 0 { 1.0 } else { -1.0 };
        (c * self.view_step_degrees.to_radians(), [2.0 * c, sign])
    }

    /// Body scale and motion gain of an actor.
    pub fn actor_traits(&self, actor: usize) -> (f64, f64) {
        let u = if self.actors > 1 { actor as f64 / (self.actors - 1) as f64 } else { 0.5 };
        (0.9 + 0.2 * u, 1.1 - 0.2 * u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub skeleton: RawSkeleton,
    pub flow: FlowField,
    pub label: usize,
}

fn rotate(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Renders one action. Skeleton coordinates and flow are expressed in the
/// view's camera frame; `joints2d` is the orthographic projection of the
/// noiseless trajectory.
pub fn generate(action: &SyntheticAction, render: &RenderConfig, seed: u64) -> Result<GeneratedSample> {
    action.validate(render)?;
    let n = action.frames;
    let k = REST_POSE.len();
    let (scale, gain) = render.actor_traits(action.actor);
    let (angle, shift) = render.view_transform(action.view);
    let ppm = render.pixels_per_meter;
    let center = [render.width as f64 / 2.0, render.height as f64 / 2.0];
    let hip = 0.8 * scale;
    let mut prng = rng::stream(seed, "sample/posture");
    let pj = render.posture_jitter;
    let posture: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            if pj > 0.0 {
                [prng.gen_range(-pj..pj), prng.gen_range(-pj..pj), prng.gen_range(-pj..pj) / 2.0]
            } else {
                [0.0; 3]
            }
        })
        .collect();

    // camera-frame positions for frames 0..=n (one extra for the last displacement)
    let positions: Vec<Vec<[f64; 3]>> = (0..=n)
        .map(|t| {
            (0..k)
                .map(|j| {
                    let mut p = [0, 1, 2].map(|c| REST_POSE[j][c] * scale + posture[j][c]);
                    p[1] -= hip;
                    for m in action.motions.iter().filter(|m| m.joint == j) {
                        let d = gain * m.offset(t as f64, n);
                        for (c, dir) in p.iter_mut().zip(m.direction) {
                            *c += d * dir;
                        }
                    }
                    let mut r = rotate(p, angle);
                    r[0] += shift[0] / ppm;
                    r[1] -= shift[1] / ppm;
                    r
                })
                .collect()
        })
        .collect();
    let project = |p: [f64; 3]| Joint2d::new(quantize(center[0] + ppm * p[0]), quantize(center[1] - ppm * p[1]));

    let sigma = action.noise;
    let mut rng = rng::stream(seed, "sample/skeleton");
    let jitter = Normal::new(0.0, (sigma * render.skeleton_noise).max(f64::MIN_POSITIVE)).map_err(invalid)?;
    let frames = positions[..n]
        .iter()
        .map(|f| {
            f.iter()
                .flat_map(|p| p.map(|v| if sigma > 0.0 { v + jitter.sample(&mut rng) } else { v }))
                .collect()
        })
        .collect();
    let skeleton = RawSkeleton { joints: k, skeletons: 1, frames };

    let (h, w) = (render.height, render.width);
    let mut vectors = vec![0.0; n * h * w * 3];
    let r = render.disc_radius as i64;
    let splat = |vectors: &mut [f64], t: usize, cx: i64, cy: i64, v: [f64; 3]| {
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    let i = ((t * h + y as usize) * w + x as usize) * 3;
                    vectors[i..i + 3].iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
        }
    };
    let mut joints2d = Vec::with_capacity(n);
    for t in 0..n {
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            let (p0, p1) = (positions[t][j], positions[t + 1][j]);
            let q = project(p0);
            let d = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            if d.iter().any(|v| *v != 0.0) {
                splat(&mut vectors, t, q.x.floor() as i64, q.y.floor() as i64, d);
            }
            row.push(q);
        }
        joints2d.push(row);
    }

    let mut rng = rng::stream(seed, "sample/clutter");
    let clutter = (sigma * render.clutter_per_sigma).round() as usize;
    for _ in 0..clutter {
        let cx = rng.gen_range(0..w) as i64;
        let cy = rng.gen_range(0..h) as i64;
        let speed = render.clutter_speed * rng.gen_range(0.5..1.0);
        let freq = rng.gen_range(1.0..4.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let dir = random_direction(&mut rng);
        for t in 0..n {
            let s = speed * (2.0 * PI * freq * t as f64 / n as f64 + phase).cos();
            splat(&mut vectors, t, cx, cy, dir.map(|d| d * s));
        }
    }
    if sigma > 0.0 {
        let mut rng = rng::stream(seed, "sample/flow-noise");
        let noise = Normal::new(0.0, sigma * render.flow_noise).map_err(invalid)?;
        vectors.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    vectors.iter_mut().for_each(|v| *v = quantize(*v));

    let flow = FlowField { frames: n, height: h, width: w, joints: k, skeletons: 1, vectors, joints2d };
    Ok(GeneratedSample { skeleton, flow, label: action.class })
}

fn random_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// Primary motion of each class: joint, type, amplitude, cycles, direction.
/// Every path stays inside the rest pose's extent on each axis.
const CLASS_PROGRAMS: [(usize, MotionType, f64, f64, [f64; 3]); 6] = [
    (2, MotionType::Oscillation, 0.25, 3.0, [0.0, 1.0, 0.0]),
    (1, MotionType::Thrust, 0.35, 2.0, [1.0, 0.3, 0.0]),
    (4, MotionType::Thrust, 0.35, 2.0, [-0.3, 1.0, 0.0]),
    (0, MotionType::Oscillation, 0.15, 3.0, [1.0, 0.0, 0.0]),
    (3, MotionType::Thrust, 0.35, 2.0, [0.3, 1.0, 0.0]),
    (1, MotionType::Oscillation, 0.25, 3.0, [0.0, 1.0, 0.0]),
];

pub const MAX_CLASSES: usize = CLASS_PROGRAMS.len();

/// The motion program of one sample of a `classes`-class benchmark: the
/// class's primary motion with a random phase, plus up to two weaker
/// one-sided nuisance motions (amplitude at most 0.4 of the primary, never
/// faster) pointing towards the body centre. Nuisance motions only land on
/// joints that are the primary joint of another class.
pub fn class_program<R: Rng>(class: usize, classes: usize, nuisance: usize, rng: &mut R) -> Result<Vec<JointMotion>> {
    if class >= classes || classes > MAX_CLASSES {
        return Err(invalid(format!("class {class} outside {classes} classes (at most {MAX_CLASSES})")));
    }
    let (joint, kind, amplitude, frequency, direction) = CLASS_PROGRAMS[class];
    let mut motions = vec![JointMotion {
        joint,
        kind,
        amplitude: amplitude * rng.gen_range(0.9..1.1),
        frequency,
        phase: rng.gen_range(0.0..2.0 * PI),
        direction: unit(direction),
    }];
    let mut others: Vec<usize> = CLASS_PROGRAMS[..classes].iter().map(|p| p.0).filter(|&j| j != joint).collect();
    others.sort_unstable();
    others.dedup();
    for _ in 0..nuisance.min(others.len()) {
        let j = others.swap_remove(rng.gen_range(0..others.len()));
        let kind = if rng.gen_bool(0.5) { MotionType::Thrust } else { MotionType::Drift };
        let inward = [CENTROID[0] - REST_POSE[j][0], CENTROID[1] - REST_POSE[j][1]];
        let a = rng.gen_range(-1.0..1.0f64);
        let (sa, ca) = a.sin_cos();
        let dir = [ca * inward[0] - sa * inward[1], sa * inward[0] + ca * inward[1], 0.0];
        motions.push(JointMotion {
            joint: j,
            kind,
            amplitude: motions[0].amplitude * rng.gen_range(0.15..0.4),
            frequency: rng.gen_range(1.0..=frequency),
            phase: rng.gen_range(0.0..2.0 * PI),
            direction: unit(dir),
        });
    }
    Ok(motions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub noise: f64,
    /// Weaker secondary motions per action, placed on other classes' joints.
    pub nuisance_motions: usize,
    pub render: RenderConfig,
}

impl BenchmarkConfig {
    pub fn desk(noise: f64) -> Self {
        Self { classes: 4, samples_per_class: 40, frames: 60, noise, nuisance_motions: 0, render: RenderConfig::desk() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub class: usize,
    pub actor: usize,
    pub view: usize,
}

/// Actions of a balanced benchmark. Actors and views cycle through each
/// class so every (class, actor, view) cell is populated evenly.
pub fn benchmark_actions(cfg: &BenchmarkConfig, seed: u64) -> Result<Vec<(SampleMeta, SyntheticAction)>> {
    if cfg.classes == 0 || cfg.classes > MAX_CLASSES {
        return Err(invalid(format!("classes must be in 1..={MAX_CLASSES}, got {}", cfg.classes)));
    }
    let (actors, views) = (cfg.render.actors, cfg.render.views);
    let mut out = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for class in 0..cfg.classes {
        for i in 0..cfg.samples_per_class {
            let id = out.len();
            let mut r = rng::stream(seed, &format!("program/{id}"));
            let meta = SampleMeta { id, class, actor: i % actors, view: (i / actors) % views };
            let action = SyntheticAction {
                class,
                motions: class_program(class, cfg.classes, cfg.nuisance_motions, &mut r)?,
                noise: cfg.noise,
                actor: meta.actor,
                view: meta.view,
                frames: cfg.frames,
            };
            out.push((meta, action));
        }
    }
    Ok(out)
}

/// Seed of sample `id` under a benchmark root seed.
pub fn sample_seed(root: u64, id: usize) -> u64 {
    rng::derive(root, &format!("sample/{id}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Actors in the list train, all others test.
    CrossSubject { train_actors: Vec<usize> },
    /// One view tests, all others train.
    CrossView { test_view: usize },
}

impl Protocol {
    /// `cross_subject` (even actors train), `cross_subject:<a>,<b>,..`
    /// (listed actors train), `cross_view` (last view tests) or
    /// `cross_view:<v>`.
    pub fn parse(s: &str, actors: usize, views: usize) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("bad number `{v}` in protocol `{s}`")));
        match (name, arg) {
            ("cross_subject", None) => Ok(Self::CrossSubject { train_actors: (0..actors).step_by(2).collect() }),
            ("cross_subject", Some(a)) => Ok(Self::CrossSubject { train_actors: a.split(',').map(num).collect::<Result<_>>()? }),
            ("cross_view", None) => Ok(Self::CrossView { test_view: views.saturating_sub(1) }),
            ("cross_view", Some(v)) => Ok(Self::CrossView { test_view: num(v)? }),
            _ => Err(invalid(format!("unknown protocol `{s}` (cross_subject[:actors] | cross_view[:view])"))),
        }
    }
}

/// Indices of the training and test samples.
pub fn make_splits(samples: &[SampleMeta], protocol: &Protocol) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut actors: Vec<usize> = samples.iter().map(|s| s.actor).collect();
    let mut views: Vec<usize> = samples.iter().map(|s| s.view).collect();
    actors.sort_unstable();
    actors.dedup();
    views.sort_unstable();
    views.dedup();
    if actors.len() < 2 || views.len() < 3 {
        return Err(invalid(format!(
            "splits need at least 2 actors and 3 views, found {} and {}",
            actors.len(),
            views.len()
        )));
    }
    let in_train = |s: &SampleMeta| match protocol {
        Protocol::CrossSubject { train_actors } => train_actors.contains(&s.actor),
        Protocol::CrossView { test_view } => s.view != *test_view,
    };
    let (train, test): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| in_train(&samples[i]));
    if train.is_empty() || test.is_empty() {
        return Err(invalid(format!("protocol {protocol:?} leaves an empty split")));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("cannot evaluate an empty split"));
        }
        if labels.len() != predictions.len() {
            return Err(invalid(format!("{} labels but {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= classes || p >= classes {
                return Err(invalid(format!("label {l} / prediction {p} outside {classes} classes")));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Self { accuracy: correct as f64 / labels.len() as f64, confusion })
    }

    pub fn report(&self) -> String {
        let mut s = format!("accuracy {:.6}\n", self.accuracy);
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Runs `predict` over every item and scores it against `label`.
pub fn evaluate<T>(
    items: &[T],
    classes: usize,
    label: impl Fn(&T) -> usize,
    mut predict: impl FnMut(&T) -> Result<usize>,
) -> Result<Evaluation> {
    let labels: Vec<usize> = items.iter().map(&label).collect();
    let predictions = items.iter().map(&mut predict).collect::<Result<Vec<_>>>()?;
    Evaluation::from_predictions(&labels, &predictions, classes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub meta: SampleMeta,
    pub skeleton_path: String,
    pub flow_path: String,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let m = self.meta;
        format!("{} {} {} {} {} {}", m.id, m.class, m.actor, m.view, self.skeleton_path, self.flow_path)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format_err(format!("manifest line needs 6 fields: `{line}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad number `{s}` in `{line}`")));
        Ok(Self {
            meta: SampleMeta { id: num(f[0])?, class: num(f[1])?, actor: num(f[2])?, view: num(f[3])? },
            skeleton_path: f[4].to_string(),
            flow_path: f[5].to_string(),
        })
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestEntry::parse).collect()
}

/// Mean flow magnitude inside each joint's disc (noiseless positions), over
/// all frames.
pub fn joint_disc_activity(flow: &FlowField, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let per = flow.joints * flow.skeletons;
    let mut sum = vec![0.0; per];
    let mut count = vec![0usize; per];
    for t in 0..flow.frames {
        for (k, j) in flow.joints2d[t].iter().enumerate() {
            let (cx, cy) = (j.x.floor() as i64, j.y.floor() as i64);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let inside = (x - cx).pow(2) + (y - cy).pow(2) <= r * r;
                    if inside && x >= 0 && y >= 0 && (x as usize) < flow.width && (y as usize) < flow.height {
                        let v = flow.vector(t, y as usize, x as usize);
                        sum[k] += v.iter().map(|c| c * c).sum::<f64>().sqrt();
                        count[k] += 1;
                    }
                }
            }
        }
    }
    sum.iter().zip(count).map(|(s, c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(kind: MotionType, joint: usize, noise: f64) -> SyntheticAction {
        SyntheticAction {
            class: 0,
            motions: vec![JointMotion {
                joint,
                kind,
                amplitude: 0.3,
                frequency: 2.0,
                phase: 0.3,
                direction: [0.0, 1.0, 0.0],
            }],
            noise,
            actor: 1,
            view: 0,
            frames: 20,
        }
    }

    #[test]
    fn noiseless_flow_lives_in_the_moving_disc() {
        let render = RenderConfig::desk();
        let s = generate(&single(MotionType::Oscillation, 2, 0.0), &render, 5).unwrap();
        let r = render.disc_radius as f64;
        let mut nonzero = 0;
        for t in 0..s.flow.frames {
            let j = s.flow.joints2d[t][2];
            let (cx, cy) = (j.x.floor(), j.y.floor());
            for y in 0..s.flow.height {
                for x in 0..s.flow.width {
                    let v = s.flow.vector(t, y, x);
                    if v.iter().any(|c| *c != 0.0) {
                        nonzero += 1;
                        assert!((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r, "t={t} ({x},{y})");
                    }
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let render = RenderConfig::desk();
        let a = single(MotionType::Thrust, 1, 0.3);
        let x = generate(&a, &render, 9).unwrap();
        let y = generate(&a, &render, 9).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.flow.vectors, generate(&a, &render, 10).unwrap().flow.vectors);
    }

    #[test]
    fn still_joints_keep_their_rest_pose() {
        let render = RenderConfig::desk();
        let s = generate(&single(MotionType::Oscillation, 2, 0.0), &render, 1).unwrap();
        for f in &s.skeleton.frames {
            assert_eq!(&f[..3], &s.skeleton.frames[0][..3]);
        }
        assert_ne!(s.skeleton.frames[3][6..9], s.skeleton.frames[0][6..9]);
    }

    #[test]
    fn projection_matches_skeleton_coordinates() {
        let render = RenderConfig::desk();
        let mut a = single(MotionType::Drift, 4, 0.0);
        a.view = 2;
        let s = generate(&a, &render, 1).unwrap();
        let (w, h, ppm) = (render.width as f64, render.height as f64, render.pixels_per_meter);
        for (t, f) in s.skeleton.frames.iter().enumerate() {
            for k in 0..5 {
                let j = s.flow.joints2d[t][k];
                assert!((j.x - (w / 2.0 + ppm * f[3 * k])).abs() < 1e-4);
                assert!((j.y - (h / 2.0 - ppm * f[3 * k + 1])).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn disc_activity_ranks_programmed_amplitudes() {
        let render = RenderConfig::desk();
        let cfg = BenchmarkConfig { samples_per_class: 6, nuisance_motions: 2, ..BenchmarkConfig::desk(0.0) };
        for (meta, action) in benchmark_actions(&cfg, 3).unwrap() {
            let s = generate(&action, &render, sample_seed(3, meta.id)).unwrap();
            let act = joint_disc_activity(&s.flow, render.disc_radius);
            let mut by_amp = action.motions.clone();
            by_amp.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
            let mut by_act: Vec<usize> = (0..5).collect();
            by_act.sort_by(|&a, &b| act[b].total_cmp(&act[a]));
            assert_eq!(by_act[0], by_amp[0].joint, "sample {}: {act:?}", meta.id);
            assert_eq!(action.dominant_joint(), Some(by_amp[0].joint));
            for m in &action.motions {
                assert!(act[m.joint] > 0.0, "joint {}", m.joint);
            }
        }
    }

    #[test]
    fn balanced_benchmark_layout() {
        let cfg = BenchmarkConfig::desk(0.1);
        let acts = benchmark_actions(&cfg, 0).unwrap();
        assert_eq!(acts.len(), 160);
        for class in 0..4 {
            for actor in 0..4 {
                for view in 0..3 {
                    let n = acts.iter().filter(|(m, _)| m.class == class && m.actor == actor && m.view == view).count();
                    assert!(n >= 3, "class {class} actor {actor} view {view}: {n}");
                }
            }
        }
        assert!(benchmark_actions(&BenchmarkConfig { classes: 7, ..cfg }, 0).is_err());
    }

    #[test]
    fn flow_noise_is_centered() {
        let render = RenderConfig { clutter_per_sigma: 0.0, ..RenderConfig::desk() };
        let mut a = single(MotionType::Oscillation, 2, 1.0);
        a.motions.clear();
        let s = generate(&a, &render, 4).unwrap();
        let n = s.flow.vectors.len() as f64;
        let mean = s.flow.vectors.iter().sum::<f64>() / n;
        let var = s.flow.vectors.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * render.flow_noise / n.sqrt());
        assert!((var.sqrt() / render.flow_noise - 1.0).abs() < 0.02);
    }

    fn metas() -> Vec<SampleMeta> {
        let mut v = Vec::new();
        for actor in 0..4 {
            for view in 0..3 {
                for class in 0..2 {
                    v.push(SampleMeta { id: v.len(), class, actor, view });
                }
            }
        }
        v
    }

    #[test]
    fn cross_subject_partitions_by_actor() {
        let m = metas();
        let (train, test) = make_splits(&m, &Protocol::CrossSubject { train_actors: vec![0, 1] }).unwrap();
        assert!(train.iter().all(|&i| m[i].actor < 2));
        assert!(test.iter().all(|&i| m[i].actor >= 2));
        let mut all: Vec<usize> = train.iter().chain(&test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
    }

    #[test]
    fn cross_view_holds_out_one_view() {
        let m = metas();
        let (train, test) = make_splits(&m, &Protocol::CrossView { test_view: 2 }).unwrap();
        assert!(test.iter().all(|&i| m[i].view == 2));
        assert!(train.iter().all(|&i| m[i].view != 2));
        assert_eq!(train.len() + test.len(), m.len());
    }

    #[test]
    fn infeasible_protocols_rejected() {
        let m: Vec<SampleMeta> = metas().into_iter().filter(|s| s.view < 2).collect();
        assert!(make_splits(&m, &Protocol::CrossView { test_view: 1 }).is_err());
        assert!(make_splits(&metas(), &Protocol::CrossView { test_view: 7 }).is_err());
        assert!(Protocol::parse("random", 4, 3).is_err());
        assert!(Protocol::parse("cross_subject:0,x", 4, 3).is_err());
    }

    #[test]
    fn protocol_strings() {
        assert_eq!(Protocol::parse("cross_subject", 4, 3).unwrap(), Protocol::CrossSubject { train_actors: vec![0, 2] });
        assert_eq!(Protocol::parse("cross_subject:0,1", 4, 3).unwrap(), Protocol::CrossSubject { train_actors: vec![0, 1] });
        assert_eq!(Protocol::parse("cross_view", 4, 3).unwrap(), Protocol::CrossView { test_view: 2 });
        assert_eq!(Protocol::parse("cross_view:0", 4, 3).unwrap(), Protocol::CrossView { test_view: 0 });
    }

    #[test]
    fn evaluation_contracts() {
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let oracle = evaluate(&labels, 4, |l| *l, |l| Ok(*l)).unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let constant = evaluate(&labels, 4, |l| *l, |_| Ok(1)).unwrap();
        assert_eq!(constant.accuracy, 0.25);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rand = evaluate(&labels, 4, |l| *l, |_| Ok(r.gen_range(0..4))).unwrap();
        let trace: usize = (0..4).map(|c| rand.confusion[c][c]).sum();
        assert_eq!(trace as f64 / 8.0, rand.accuracy);
        for c in 0..4 {
            assert_eq!(rand.confusion[c].iter().sum::<usize>(), 2);
        }
        assert!(evaluate(&[] as &[usize], 4, |l| *l, |l| Ok(*l)).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let e = ManifestEntry {
            meta: SampleMeta { id: 3, class: 1, actor: 2, view: 0 },
            skeleton_path: "skeletons/3.skel".into(),
            flow_path: "flows/3.flw".into(),
        };
        assert_eq!(e.to_line(), "3 1 2 0 skeletons/3.skel flows/3.flw");
        assert_eq!(parse_manifest(&format!("{}\n\n", e.to_line())).unwrap(), vec![e]);
        assert!(ManifestEntry::parse("1 2 3").is_err());
    }
}
