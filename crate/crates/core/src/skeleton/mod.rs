//! Skeleton sequences, the two-branch skeleton network and per-joint
//! informativeness scores.

mod model;
mod score;

pub use model::{BjcnBranch, LayerSpec, ResTcnConfig, ResidualBlock, SkeletonNet, SkeletonOutput, TcnBranch};
pub use score::{
    extract_informativeness, format_score_report, FeatureMap, JointScoreVector, LayerSelection,
    MAX_SCORE_LAYER,
};

use std::fmt::Write as _;

use crate::error::{format_err, invalid, Error, Result};

/// Raw 3-D joint coordinates, one vector of `skeletons × joints × 3`
/// values per frame in joint-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSkeleton {
    pub joints: usize,
    pub skeletons: usize,
    pub frames: Vec<Vec<f64>>,
}

impl RawSkeleton {
    pub fn rows(&self) -> usize {
        self.skeletons * self.joints * 3
    }

    /// Parses the `SKEL v1` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| format_err("empty skeleton file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("SKEL") || fields.next() != Some("v1") {
            return Err(format_err(format!("bad skeleton header `{header}`")));
        }
        let mut get = |key: &str| -> Result<usize> {
            let f = fields
                .next()
                .ok_or_else(|| format_err(format!("skeleton header missing {key}")))?;
            f.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format_err(format!("bad header field `{f}`, expected {key}=<int>")))
        };
        let (joints, skeletons, t) = (get("K")?, get("S")?, get("T")?);
        let width = joints * skeletons * 3;
        let mut frames = Vec::with_capacity(t);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(format!("frame {i}: {e}")))?;
            if row.len() != width {
                return Err(format_err(format!("frame {i} has {} values, expected {width}", row.len())));
            }
            frames.push(row);
        }
        if frames.len() != t {
            return Err(format_err(format!("header says T={t} but found {} frames", frames.len())));
        }
        Ok(Self { joints, skeletons, frames })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("SKEL v1 K={} S={} T={}\n", self.joints, self.skeletons, self.frames.len());
        for f in &self.frames {
            let row: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// A normalized skeleton sequence as an `M × N` matrix (row-major): row
/// `3k + p` is motion plane `p` of joint `k`, column `j` is frame `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub joints: usize,
    pub skeletons: usize,
    pub frames: usize,
    pub valid_frames: usize,
    pub data: Vec<f64>,
}

impl SkeletonSequence {
    pub fn rows(&self) -> usize {
        self.skeletons * self.joints * 3
    }

    pub fn at(&self, row: usize, frame: usize) -> f64 {
        self.data[row * self.frames + frame]
    }
}

/// Min-max normalizes each motion plane to `[-1, 1]` over all joints and
/// kept frames, truncates to `max_frames` and zero-pads shorter sequences.
/// A constant plane maps to 0.
pub fn normalize_skeleton(raw: &RawSkeleton, max_frames: usize) -> Result<SkeletonSequence> {
    if raw.frames.is_empty() {
        return Err(Error::EmptySequence("skeleton has no frames".into()));
    }
    if max_frames == 0 || raw.joints == 0 || raw.skeletons == 0 {
        return Err(invalid("joints, skeletons and max_frames must be positive"));
    }
    let rows = raw.rows();
    let valid = raw.frames.len().min(max_frames);
    let kept = &raw.frames[..valid];
    if kept.iter().any(|f| f.len() != rows) {
        return Err(invalid(format!("every frame must hold {rows} values")));
    }
    if kept.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("skeleton coordinates must be finite"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for f in kept {
        for (i, &v) in f.iter().enumerate() {
            lo[i % 3] = lo[i % 3].min(v);
            hi[i % 3] = hi[i % 3].max(v);
        }
    }
    let mut data = vec![0.0; rows * max_frames];
    for (j, f) in kept.iter().enumerate() {
        for (i, &v) in f.iter().enumerate() {
            let p = i % 3;
            let span = hi[p] - lo[p];
            data[i * max_frames + j] = if span > 0.0 { 2.0 * (v - lo[p]) / span - 1.0 } else { 0.0 };
        }
    }
    Ok(SkeletonSequence {
        joints: raw.joints,
        skeletons: raw.skeletons,
        frames: max_frames,
        valid_frames: valid,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(frames: Vec<Vec<f64>>) -> RawSkeleton {
        RawSkeleton { joints: frames[0].len() / 3, skeletons: 1, frames }
    }

    #[test]
    fn plane_endpoints_map_to_unit_interval() {
        let r = raw(vec![vec![0.0, 1.0, 2.0], vec![5.0, 1.0, 2.0], vec![10.0, 1.0, 2.0]]);
        let s = normalize_skeleton(&r, 3).unwrap();
        assert_eq!(&s.data[0..3], &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn short_sequences_zero_padded() {
        let r = raw(vec![vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]]);
        let s = normalize_skeleton(&r, 5).unwrap();
        assert_eq!(s.valid_frames, 3);
        for row in 0..3 {
            assert_eq!(s.at(row, 3), 0.0);
            assert_eq!(s.at(row, 4), 0.0);
        }
    }

    #[test]
    fn constant_plane_maps_to_zero() {
        // plane 1 is constant (7.0) across both joints and all frames
        let frames = vec![vec![0.0, 7.0, 1.0, 3.0, 7.0, 2.0], vec![1.0, 7.0, 5.0, 2.0, 7.0, 0.0]];
        let s = normalize_skeleton(&raw(frames.clone()), 2).unwrap();
        // oracle: recompute plane ranges independently
        for (i, row) in (0..6).map(|i| (i, i % 3)) {
            let plane: Vec<f64> = frames.iter().flat_map(|f| [f[row], f[row + 3]]).collect();
            let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for j in 0..2 {
                let expect = if hi > lo { 2.0 * (frames[j][i] - lo) / (hi - lo) - 1.0 } else { 0.0 };
                assert!((s.at(i, j) - expect).abs() < 1e-15);
            }
        }
        assert!((0..2).all(|j| s.at(1, j) == 0.0 && s.at(4, j) == 0.0));
    }

    #[test]
    fn truncates_to_max_frames() {
        let r = raw((0..10).map(|i| vec![i as f64, 0.0, 0.0]).collect());
        let s = normalize_skeleton(&r, 4).unwrap();
        assert_eq!(s.valid_frames, 4);
        for (a, e) in s.data[0..4].iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn text_format_round_trip() {
        let r = RawSkeleton { joints: 2, skeletons: 1, frames: vec![vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.25]] };
        let text = r.to_text();
        assert!(text.starts_with("SKEL v1 K=2 S=1 T=1\n"));
        assert_eq!(RawSkeleton::parse(&text).unwrap(), r);
        assert!(RawSkeleton::parse("SKEL v1 K=2 S=1 T=2\n1 2 3 4 5 6\n").is_err());
        assert!(RawSkeleton::parse("SKEL v2 K=1 S=1 T=0\n").is_err());
    }
}
