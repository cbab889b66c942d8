//! Scene-flow colorization and clip preparation.

use rand::Rng;

use crate::error::{format_err, invalid, Error, Result};

/// A 2-D joint position in pixels. Excluded joints fell outside a crop and
/// take no part in mask construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint2d {
    pub x: f64,
    pub y: f64,
    pub excluded: bool,
}

impl Joint2d {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, excluded: false }
    }
}

/// Dense 3-D motion vectors per pixel per frame, pixel-major with the three
/// components interleaved (`[T][H][W][3]`), plus per-frame joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub joints: usize,
    pub skeletons: usize,
    pub vectors: Vec<f64>,
    pub joints2d: Vec<Vec<Joint2d>>,
}

impl FlowField {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames * self.height * self.width * 3;
        if self.vectors.len() != n {
            return Err(invalid(format!("flow field needs {n} components, has {}", self.vectors.len())));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(invalid("flow vectors must be finite"));
        }
        let per = self.joints * self.skeletons;
        if self.joints2d.len() != self.frames || self.joints2d.iter().any(|f| f.len() != per) {
            return Err(invalid(format!("flow field needs {per} joints on each of {} frames", self.frames)));
        }
        Ok(())
    }

    pub fn vector(&self, t: usize, y: usize, x: usize) -> [f64; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.vectors[i], self.vectors[i + 1], self.vectors[i + 2]]
    }
}

/// Colorized frames, channel-first `[3][T][H][W]` with values in `[0, 1]`,
/// and aligned joint lists.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub joints2d: Vec<Vec<Joint2d>>,
}

impl FrameSequence {
    fn idx(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, t, y, x)]
    }

    /// Frames `indices` in order, each row may be `None` for a zero frame.
    fn gather(&self, indices: &[Option<usize>]) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 3 * indices.len() * plane];
        for c in 0..3 {
            for (j, src) in indices.iter().enumerate() {
                if let Some(t) = *src {
                    let from = self.idx(c, t, 0, 0);
                    let to = (c * indices.len() + j) * plane;
                    data[to..to + plane].copy_from_slice(&self.data[from..from + plane]);
                }
            }
        }
        data
    }
}

/// Maps each motion plane to one color channel. A plane whose components
/// reach magnitude `B` over the whole sequence maps `v` to
/// `(v + B) / (2B)`, so zero motion is 0.5; a plane that never moves is 0.5
/// everywhere.
pub fn colorize_flow(field: &FlowField) -> Result<FrameSequence> {
    field.validate()?;
    let mut bound = [0.0f64; 3];
    for px in field.vectors.chunks(3) {
        for p in 0..3 {
            bound[p] = bound[p].max(px[p].abs());
        }
    }
    let (t, h, w) = (field.frames, field.height, field.width);
    let plane = t * h * w;
    let mut data = vec![0.5; 3 * plane];
    for (i, px) in field.vectors.chunks(3).enumerate() {
        for p in 0..3 {
            if bound[p] > 0.0 {
                data[p * plane + i] = (px[p] + bound[p]) / (2.0 * bound[p]);
            }
        }
    }
    Ok(FrameSequence { frames: t, height: h, width: w, data, joints2d: field.joints2d.clone() })
}

/// Keeps frames `0, factor, 2 factor, ...` and their joints.
pub fn temporal_downsample(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(invalid("temporal downsample factor must be >= 1"));
    }
    let keep: Vec<Option<usize>> = (0..seq.frames).step_by(factor).map(Some).collect();
    Ok(FrameSequence {
        frames: keep.len(),
        height: seq.height,
        width: seq.width,
        data: seq.gather(&keep),
        joints2d: keep.iter().map(|t| seq.joints2d[t.unwrap()].clone()).collect(),
    })
}

/// A fixed-length clip `[3][L][H][W]`. Frames past `valid_frames` are
/// zero and their joints are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub valid_frames: usize,
    pub start: usize,
    pub data: Vec<f64>,
    pub joints2d: Vec<Vec<Joint2d>>,
}

/// Clip start frames: every `clip_len - overlap` frames while a whole clip
/// fits. If that leaves frames uncovered and at least `clip_len / 2` frames
/// remain from the next start, one more zero-padded clip starts there.
pub fn clip_starts(frames: usize, clip_len: usize, overlap: usize) -> Result<Vec<usize>> {
    if clip_len == 0 || overlap >= clip_len {
        return Err(invalid(format!("need clip_len > overlap >= 0, got {clip_len} and {overlap}")));
    }
    let half = clip_len.div_ceil(2);
    if frames < half {
        return Err(Error::EmptySequence(format!(
            "{frames} frames is fewer than half a clip of {clip_len}"
        )));
    }
    let stride = clip_len - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + clip_len <= frames).collect();
    let covered = starts.last().map_or(0, |s| s + clip_len);
    let next = starts.last().map_or(0, |s| s + stride);
    if covered < frames && frames - next >= half {
        starts.push(next);
    }
    Ok(starts)
}

pub fn split_clips(seq: &FrameSequence, clip_len: usize, overlap: usize) -> Result<Vec<FlowClip>> {
    let starts = clip_starts(seq.frames, clip_len, overlap)?;
    Ok(starts
        .into_iter()
        .map(|s| {
            let idx: Vec<Option<usize>> = (s..s + clip_len).map(|t| (t < seq.frames).then_some(t)).collect();
            let valid = idx.iter().filter(|t| t.is_some()).count();
            let last = seq.frames - 1;
            let joints2d = idx
                .iter()
                .map(|t| match t {
                    Some(t) => seq.joints2d[*t].clone(),
                    None => seq.joints2d[last].iter().map(|j| Joint2d { excluded: true, ..*j }).collect(),
                })
                .collect();
            FlowClip {
                frames: clip_len,
                height: seq.height,
                width: seq.width,
                valid_frames: valid,
                start: s,
                data: seq.gather(&idx),
                joints2d,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Centered crop for evaluation, uniformly jittered crop for training.
pub fn choose_crop<R: Rng>(
    frame_h: usize,
    frame_w: usize,
    crop_h: usize,
    crop_w: usize,
    jitter: Option<&mut R>,
) -> Result<CropBox> {
    if crop_h == 0 || crop_w == 0 || crop_h > frame_h || crop_w > frame_w {
        return Err(invalid(format!("crop {crop_h}x{crop_w} does not fit frame {frame_h}x{frame_w}")));
    }
    let (sy, sx) = (frame_h - crop_h, frame_w - crop_w);
    let (y0, x0) = match jitter {
        Some(r) => (r.gen_range(0..=sy), r.gen_range(0..=sx)),
        None => (sy / 2, sx / 2),
    };
    Ok(CropBox { x0, y0, width: crop_w, height: crop_h })
}

/// Crops then bilinearly resizes (half-pixel centers) to `target_h ×
/// target_w`. Joints map to `floor((x - x0) · target_w / crop_w)`; joints
/// outside the crop are clamped to the border and excluded.
pub fn crop_resize(seq: &FrameSequence, crop: CropBox, target_h: usize, target_w: usize) -> Result<FrameSequence> {
    if crop.width == 0 || crop.height == 0 || crop.x0 + crop.width > seq.width || crop.y0 + crop.height > seq.height {
        return Err(invalid(format!("crop {crop:?} outside frame {}x{}", seq.height, seq.width)));
    }
    if target_h == 0 || target_w == 0 {
        return Err(invalid("target size must be positive"));
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(target_h, crop.height);
    let xs = axis(target_w, crop.width);
    let mut data = Vec::with_capacity(3 * seq.frames * target_h * target_w);
    for c in 0..3 {
        for t in 0..seq.frames {
            for &(y_lo, y_hi, fy) in &ys {
                for &(x_lo, x_hi, fx) in &xs {
                    let p = |y: usize, x: usize| seq.at(c, t, crop.y0 + y, crop.x0 + x);
                    let top = p(y_lo, x_lo) * (1.0 - fx) + p(y_lo, x_hi) * fx;
                    let bottom = p(y_hi, x_lo) * (1.0 - fx) + p(y_hi, x_hi) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    let map = |v: f64, origin: usize, span: usize, target: usize| -> (f64, bool) {
        let rel = v - origin as f64;
        let inside = rel >= 0.0 && rel < span as f64;
        let m = (rel * target as f64 / span as f64).floor();
        (m.clamp(0.0, (target - 1) as f64), inside)
    };
    let joints2d = seq
        .joints2d
        .iter()
        .map(|f| {
            f.iter()
                .map(|j| {
                    let (x, in_x) = map(j.x, crop.x0, crop.width, target_w);
                    let (y, in_y) = map(j.y, crop.y0, crop.height, target_h);
                    Joint2d { x, y, excluded: j.excluded || !in_x || !in_y }
                })
                .collect()
        })
        .collect();
    Ok(FrameSequence { frames: seq.frames, height: target_h, width: target_w, data, joints2d })
}

pub const FLOW_MAGIC: &[u8; 4] = b"FLW1";

/// `FLW1`, u32 T H W K S, then `T·H·W·3` f32 vectors and `T·S·K·2` f32
/// joint coordinates, all little-endian.
pub fn write_flow(field: &FlowField) -> Result<Vec<u8>> {
    field.validate()?;
    let mut out = Vec::with_capacity(24 + 4 * (field.vectors.len() + field.frames * field.joints * field.skeletons * 2));
    out.extend_from_slice(FLOW_MAGIC);
    for d in [field.frames, field.height, field.width, field.joints, field.skeletons] {
        let d = u32::try_from(d).map_err(|_| invalid("flow dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &field.vectors {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for f in &field.joints2d {
        for j in f {
            out.extend_from_slice(&(j.x as f32).to_le_bytes());
            out.extend_from_slice(&(j.y as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 24 || &bytes[..4] != FLOW_MAGIC {
        return Err(format_err("not a FLW1 flow file"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, k, s) = (u(0), u(1), u(2), u(3), u(4));
    let nv = t * h * w * 3;
    let nj = t * s * k * 2;
    if bytes.len() != 24 + 4 * (nv + nj) {
        return Err(format_err(format!(
            "FLW1 payload is {} bytes, header implies {}",
            bytes.len() - 24,
            4 * (nv + nj)
        )));
    }
    let floats: Vec<f64> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let joints2d = floats[nv..]
        .chunks(2 * s * k)
        .map(|f| f.chunks(2).map(|p| Joint2d::new(p[0], p[1])).collect())
        .collect::<Vec<_>>();
    let field = FlowField {
        frames: t,
        height: h,
        width: w,
        joints: k,
        skeletons: s,
        vectors: floats[..nv].to_vec(),
        joints2d: if t == 0 { Vec::new() } else { joints2d },
    };
    field.validate()?;
    Ok(field)
}

/// Binary PPM of frame `t`, channel value `round(255 v)`.
pub fn frame_to_ppm(seq: &FrameSequence, t: usize) -> Result<Vec<u8>> {
    if t >= seq.frames {
        return Err(invalid(format!("frame {t} outside sequence of {}", seq.frames)));
    }
    let mut out = format!("P6\n{} {}\n255\n", seq.width, seq.height).into_bytes();
    for y in 0..seq.height {
        for x in 0..seq.width {
            for c in 0..3 {
                out.push((255.0 * seq.at(c, t, y, x).clamp(0.0, 1.0)).round() as u8);
            }
        }
    }
    Ok(out)
}
