//! Joint-centred spatial attention masks and residual boosting
//! `F = (1 + M) ⊙ Y`.

use crate::error::{invalid, Result};
use crate::flow::Joint2d;
use crate::tensor::{Graph, Var};

/// `ceil(0.05 w)`, at least 1.
pub fn radius_for_width(w: usize) -> usize {
    w.div_ceil(20).max(1)
}

/// Feature dimensions `(frames, height, width)` a mask is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureDims {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-frame disc centres `(a, b)` of radius `r`; `None` marks an excluded
/// joint. A radius of 0 yields no areas at all.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicAreaSet {
    pub centers: Vec<Vec<Option<(i64, i64)>>>,
    pub radius: usize,
    pub dims: FeatureDims,
}

impl CharacteristicAreaSet {
    pub fn new(joints: &[Vec<Joint2d>], dims: FeatureDims, radius: usize) -> Result<Self> {
        if joints.len() != dims.frames {
            return Err(invalid(format!(
                "mask over {} frames given joints for {}",
                dims.frames,
                joints.len()
            )));
        }
        let in_frame = |j: &Joint2d| {
            let (a, b) = (j.x.floor(), j.y.floor());
            (!j.excluded && a >= 0.0 && b >= 0.0 && a < dims.width as f64 && b < dims.height as f64)
                .then_some((a as i64, b as i64))
        };
        Ok(Self {
            centers: joints.iter().map(|f| f.iter().map(in_frame).collect()).collect(),
            radius,
            dims,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Calls `visit(pixel_index, joint)` for every pixel of every disc, in
    /// frame, joint, row, column order.
    fn for_each_covered(&self, mut visit: impl FnMut(usize, usize)) {
        if self.radius == 0 {
            return;
        }
        let r = self.radius as i64;
        let (h, w) = (self.dims.height as i64, self.dims.width as i64);
        for (t, frame) in self.centers.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                let Some((a, b)) = *c else { continue };
                for y in (b - r).max(0)..=(b + r).min(h - 1) {
                    for x in (a - r).max(0)..=(a + r).min(w - 1) {
                        if (x - a) * (x - a) + (y - b) * (y - b) <= r * r {
                            visit(((t as i64 * h + y) * w + x) as usize, k);
                        }
                    }
                }
            }
        }
    }
}

/// A mask plane `[l][h][w]`, shared by every channel of the feature it
/// modulates.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub dims: FeatureDims,
    pub level: u8,
    pub values: Vec<f64>,
}

impl AttentionMask {
    pub fn zeros(dims: FeatureDims) -> Self {
        Self { dims, level: 1, values: vec![0.0; dims.len()] }
    }

    /// The mask repeated over `channels`, `[c][l][h][w]`.
    pub fn expand(&self, channels: usize) -> Vec<f64> {
        self.values.repeat(channels)
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> f64 {
        self.values[(t * self.dims.height + y) * self.dims.width + x]
    }
}

/// 1 wherever some joint's disc `(x - a)² + (y - b)² ≤ r²` covers the
/// pixel, else 0.
pub fn build_binary_mask(areas: &CharacteristicAreaSet) -> AttentionMask {
    let mut values = vec![0.0; areas.dims.len()];
    areas.for_each_covered(|i, _| values[i] = 1.0);
    AttentionMask { dims: areas.dims, level: 1, values }
}

/// `1 + mean score` of the joints whose discs cover the pixel, 0 outside
/// every disc.
pub fn build_weighted_mask(areas: &CharacteristicAreaSet, scores: &[f64]) -> Result<AttentionMask> {
    if scores.len() != areas.joint_count() {
        return Err(invalid(format!(
            "{} scores given for {} joints",
            scores.len(),
            areas.joint_count()
        )));
    }
    let n = areas.dims.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    areas.for_each_covered(|i, k| {
        sum[i] += scores[k];
        count[i] += 1;
    });
    let values = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { 1.0 + s / c as f64 })
        .collect();
    Ok(AttentionMask { dims: areas.dims, level: 2, values })
}

/// `(a, b) -> (floor(a w' / w), floor(b h' / h))`.
pub fn downsample_joint_coords(
    joints: &[Vec<Joint2d>],
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Vec<Vec<Joint2d>>> {
    let ((h, w), (h2, w2)) = (from, to);
    if h == 0 || w == 0 || h2 == 0 || w2 == 0 || h2 > h || w2 > w {
        return Err(invalid(format!("cannot downsample joints from {h}x{w} to {h2}x{w2}")));
    }
    Ok(joints
        .iter()
        .map(|f| {
            f.iter()
                .map(|j| Joint2d {
                    x: (j.x.floor() * w2 as f64 / w as f64).floor(),
                    y: (j.y.floor() * h2 as f64 / h as f64).floor(),
                    excluded: j.excluded,
                })
                .collect()
        })
        .collect())
}

/// Halves the frame count: frame `t` becomes the half-up midpoint of frames
/// `2t` and `2t + 1` (an odd tail repeats its last frame). If one of the
/// pair is excluded the other is kept as is.
pub fn interpolate_temporal_coords(joints: &[Vec<Joint2d>]) -> Vec<Vec<Joint2d>> {
    joints
        .chunks(2)
        .map(|pair| {
            let (p, q) = (&pair[0], pair.get(1).unwrap_or(&pair[0]));
            p.iter()
                .zip(q)
                .map(|(a, b)| match (a.excluded, b.excluded) {
                    (false, true) => *a,
                    (true, false) => *b,
                    (ex, _) => Joint2d {
                        x: ((a.x.floor() + b.x.floor()) / 2.0 + 0.5).floor(),
                        y: ((a.y.floor() + b.y.floor()) / 2.0 + 0.5).floor(),
                        excluded: ex,
                    },
                })
                .collect()
        })
        .collect()
}

/// `F = (1 + M) ⊙ Y` for `Y [batch, channels, l, h, w]` with one mask per
/// sample. The mask is a constant: `∂F/∂Y = 1 + M`.
pub fn apply_attention(g: &mut Graph, y: Var, masks: &[AttentionMask]) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s.len() != 5 || s[0] != masks.len() {
        return Err(invalid(format!("attention: feature {s:?} needs one mask per sample, got {}", masks.len())));
    }
    let dims = FeatureDims::new(s[2], s[3], s[4]);
    let mut factor = Vec::with_capacity(s[0] * dims.len());
    for m in masks {
        if m.dims != dims {
            return Err(invalid(format!("attention: mask {:?} does not match feature {dims:?}", m.dims)));
        }
        factor.extend(m.values.iter().map(|v| 1.0 + v));
    }
    g.scale_channels(y, factor)
}

/// Binary PGM of mask frame `t`, value `round(127.5 m)`.
pub fn mask_to_pgm(mask: &AttentionMask, t: usize) -> Result<Vec<u8>> {
    if t >= mask.dims.frames {
        return Err(invalid(format!("frame {t} outside mask of {}", mask.dims.frames)));
    }
    let (h, w) = (mask.dims.height, mask.dims.width);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        mask.values[t * h * w..(t + 1) * h * w]
            .iter()
            .map(|v| (127.5 * v).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DiffTensor, Mode};

    fn one_frame(js: &[(f64, f64)]) -> Vec<Vec<Joint2d>> {
        vec![js.iter().map(|&(x, y)| Joint2d::new(x, y)).collect()]
    }

    #[test]
    fn radius_formula() {
        assert_eq!(radius_for_width(112), 6);
        assert_eq!(radius_for_width(20), 1);
        assert_eq!(radius_for_width(1), 1);
        assert_eq!(radius_for_width(21), 2);
        assert_eq!(radius_for_width(32), 2);
    }

    #[test]
    fn unit_disc_is_a_plus() {
        let dims = FeatureDims::new(1, 11, 11);
        let a = CharacteristicAreaSet::new(&one_frame(&[(5.0, 5.0)]), dims, 1).unwrap();
        let m = build_binary_mask(&a);
        let ones: Vec<(usize, usize)> =
            (0..11).flat_map(|y| (0..11).map(move |x| (x, y))).filter(|&(x, y)| m.at(0, y, x) == 1.0).collect();
        let mut expect = vec![(5, 5), (4, 5), (6, 5), (5, 4), (5, 6)];
        expect.sort_by_key(|&(x, y)| (y, x));
        assert_eq!(ones, expect);
    }

    #[test]
    fn no_joints_or_zero_radius_is_empty() {
        let dims = FeatureDims::new(1, 5, 5);
        let a = CharacteristicAreaSet::new(&one_frame(&[]), dims, 2).unwrap();
        assert!(build_binary_mask(&a).values.iter().all(|v| *v == 0.0));
        let a = CharacteristicAreaSet::new(&one_frame(&[(2.0, 2.0)]), dims, 0).unwrap();
        assert!(build_binary_mask(&a).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weighted_overlap_is_averaged() {
        let dims = FeatureDims::new(1, 9, 9);
        let a = CharacteristicAreaSet::new(&one_frame(&[(3.0, 4.0), (5.0, 4.0)]), dims, 2).unwrap();
        let m = build_weighted_mask(&a, &[0.2, 0.8]).unwrap();
        assert!((m.at(0, 4, 4) - 1.5).abs() < 1e-15);
        assert!((m.at(0, 4, 1) - 1.2).abs() < 1e-15);
        assert!((m.at(0, 4, 7) - 1.8).abs() < 1e-15);
        assert_eq!(m.at(0, 0, 0), 0.0);
        assert!(build_weighted_mask(&a, &[0.2]).is_err());

        let b = build_binary_mask(&a);
        let z = build_weighted_mask(&a, &[0.0, 0.0]).unwrap();
        assert_eq!(z.values, b.values);
        let one = CharacteristicAreaSet::new(&one_frame(&[(4.0, 4.0)]), dims, 1).unwrap();
        assert_eq!(build_weighted_mask(&one, &[1.0]).unwrap().at(0, 4, 4), 2.0);
    }

    #[test]
    fn excluded_joints_leave_no_disc() {
        let dims = FeatureDims::new(1, 6, 6);
        let joints = vec![vec![Joint2d { x: 3.0, y: 3.0, excluded: true }]];
        let a = CharacteristicAreaSet::new(&joints, dims, 2).unwrap();
        assert!(build_binary_mask(&a).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn joint_coordinate_alignment() {
        let j = one_frame(&[(56.0, 56.0), (111.0, 0.0)]);
        let d = downsample_joint_coords(&j, (112, 112), (56, 56)).unwrap();
        assert_eq!((d[0][0].x, d[0][0].y), (28.0, 28.0));
        let d = downsample_joint_coords(&j, (112, 112), (28, 28)).unwrap();
        assert_eq!((d[0][1].x, d[0][1].y), (27.0, 0.0));
        assert_eq!(downsample_joint_coords(&j, (112, 112), (112, 112)).unwrap(), j);
        assert!(downsample_joint_coords(&j, (28, 28), (56, 56)).is_err());
    }

    #[test]
    fn temporal_midpoints() {
        let frames: Vec<Vec<Joint2d>> =
            [10.0, 12.0, 3.0, 4.0].iter().map(|&x| vec![Joint2d::new(x, 7.0)]).collect();
        let m = interpolate_temporal_coords(&frames);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0][0].x, m[0][0].y), (11.0, 7.0));
        assert_eq!(m[1][0].x, 4.0);
        let same: Vec<Vec<Joint2d>> = (0..16).map(|_| vec![Joint2d::new(5.0, 6.0)]).collect();
        let h = interpolate_temporal_coords(&same);
        assert_eq!(h.len(), 8);
        assert!(h.iter().all(|f| f[0] == Joint2d::new(5.0, 6.0)));
        assert_eq!(interpolate_temporal_coords(&same[..3]).len(), 2);
    }

    fn feature(dims: FeatureDims, channels: usize) -> DiffTensor {
        let n = channels * dims.len();
        DiffTensor::new(
            &[1, channels, dims.frames, dims.height, dims.width],
            (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_and_unit_masks() {
        let dims = FeatureDims::new(2, 3, 3);
        let y = feature(dims, 2);
        let mut g = Graph::new(Mode::Train);
        let yv = g.input(y.clone());
        let f = apply_attention(&mut g, yv, &[AttentionMask::zeros(dims)]).unwrap();
        assert_eq!(g.values(f), y.values());
        let ones = AttentionMask { values: vec![1.0; dims.len()], ..AttentionMask::zeros(dims) };
        let f = apply_attention(&mut g, yv, &[ones]).unwrap();
        assert!(g.values(f).iter().zip(y.values()).all(|(a, b)| *a == 2.0 * b));
        let wrong = AttentionMask::zeros(FeatureDims::new(2, 3, 4));
        assert!(apply_attention(&mut g, yv, &[wrong]).is_err());
    }

    #[test]
    fn gradient_through_mask_is_one_plus_m() {
        let dims = FeatureDims::new(2, 5, 5);
        let a = CharacteristicAreaSet::new(
            &[one_frame(&[(1.0, 1.0), (2.0, 2.0)]).remove(0), one_frame(&[(3.0, 3.0), (4.0, 0.0)]).remove(0)],
            dims,
            1,
        )
        .unwrap();
        let m = build_weighted_mask(&a, &[0.3, 0.9]).unwrap();
        let mut g = Graph::new(Mode::Train);
        let y = g.input(feature(dims, 3).with_requires_grad(true));
        let f = apply_attention(&mut g, y, &[m.clone()]).unwrap();
        let l = g.sum(f);
        g.backward(l).unwrap();
        let expect = m.expand(3);
        assert!(g.grad(y).iter().zip(&expect).all(|(gr, mv)| *gr == 1.0 + mv));
    }

    #[test]
    fn pgm_export() {
        let dims = FeatureDims::new(1, 1, 3);
        let m = AttentionMask { dims, level: 2, values: vec![0.0, 1.0, 2.0] };
        let p = mask_to_pgm(&m, 0).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(&p[header.len()..], &[0, 128, 255]);
    }
}
