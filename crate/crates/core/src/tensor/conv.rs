//! Temporal (1-D) and spatiotemporal (3-D) cross-correlation.

use super::graph::{Graph, Op, Var};
use super::Padding;
use crate::error::{invalid, Result};

/// Resolved geometry of a batched 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub filter: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_out: usize,
}

/// Resolved geometry of a batched 3-D convolution; dims are (l, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub dims_in: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dims_out: [usize; 3],
}

/// Output length and leading pad along one axis.
pub(crate) fn axis_geometry(n: usize, f: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (n >= f).then(|| ((n - f) / s + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + f).saturating_sub(n);
            Some((out, total / 2))
        }
    }
}

/// Output indices `lo..hi` whose tap `k` reads a real (unpadded) input.
fn tap_range(n_in: usize, n_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let lim = n_in + pad;
    let hi = if lim > k { ((lim - k - 1) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

impl Graph {
    /// 1-D convolution along time. `input` is `[c_in, t]` or
    /// `[batch, c_in, t]`, `weight` is `[c_out, filter, c_in]`, `bias` is
    /// `[c_out]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (batch, unbatched) = match xs.len() {
            2 => (1, true),
            3 => (xs[0], false),
            r => return Err(invalid(format!("conv1d: input must have rank 2 or 3, got rank {r}"))),
        };
        let (c_in, t_in) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let ws = self.shape(weight).to_vec();
        if ws.len() != 3 {
            return Err(invalid(format!("conv1d: weight must be [c_out, filter, c_in], got {ws:?}")));
        }
        let (c_out, filter) = (ws[0], ws[1]);
        if ws[2] != c_in {
            return Err(invalid(format!(
                "conv1d: input has {c_in} channels but weight {ws:?} expects {}",
                ws[2]
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(invalid(format!(
                "conv1d: bias shape {:?} does not match c_out={c_out}",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(invalid("conv1d: stride must be positive"));
        }
        let Some((t_out, pad)) = axis_geometry(t_in, filter, stride, padding) else {
            return Err(invalid(format!(
                "conv1d: input length {t_in} is shorter than filter size {filter}"
            )));
        };
        let geom = Conv1dGeom { batch, c_in, t_in, c_out, filter, stride, pad, t_out };
        let out = conv1d_forward(&geom, self.values(input), self.values(weight), self.values(bias));
        let shape = if unbatched { vec![c_out, t_out] } else { vec![batch, c_out, t_out] };
        Ok(self.push(shape, out, Op::Conv1d { input, weight, bias, geom }))
    }

    /// 3-D convolution. `input` is `[c, l, h, w]` or `[batch, c, l, h, w]`,
    /// `weight` is `[c_out, c, f_t, f_h, f_w]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (batch, unbatched) = match xs.len() {
            4 => (1, true),
            5 => (xs[0], false),
            r => return Err(invalid(format!("conv3d: input must have rank 4 or 5, got rank {r}"))),
        };
        let off = xs.len() - 4;
        let c_in = xs[off];
        let dims_in = [xs[off + 1], xs[off + 2], xs[off + 3]];
        let ws = self.shape(weight).to_vec();
        if ws.len() != 5 || ws[1] != c_in {
            return Err(invalid(format!(
                "conv3d: weight {ws:?} incompatible with input channels {c_in}"
            )));
        }
        let c_out = ws[0];
        let kernel = [ws[2], ws[3], ws[4]];
        if self.shape(bias) != [c_out] {
            return Err(invalid(format!(
                "conv3d: bias shape {:?} does not match c_out={c_out}",
                self.shape(bias)
            )));
        }
        if stride.contains(&0) {
            return Err(invalid("conv3d: strides must be positive"));
        }
        let mut dims_out = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let padded = match padding {
                Padding::Valid => dims_in[a],
                Padding::Same => dims_in[a].max(kernel[a]),
            };
            if kernel[a] > padded {
                return Err(invalid(format!(
                    "conv3d: kernel {kernel:?} larger than input {dims_in:?} on axis {a}"
                )));
            }
            let (o, p) = axis_geometry(dims_in[a], kernel[a], stride[a], padding)
                .expect("kernel fits after check");
            dims_out[a] = o;
            pad[a] = p;
        }
        let geom = Conv3dGeom { batch, c_in, dims_in, c_out, kernel, stride, pad, dims_out };
        let out = conv3d_forward(&geom, self.values(input), self.values(weight), self.values(bias));
        let [ol, oh, ow] = dims_out;
        let shape = if unbatched {
            vec![c_out, ol, oh, ow]
        } else {
            vec![batch, c_out, ol, oh, ow]
        };
        Ok(self.push(shape, out, Op::Conv3d { input, weight, bias, geom }))
    }
}

fn conv1d_forward(g: &Conv1dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.t_out];
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let row = &mut out[(bi * g.c_out + o) * g.t_out..][..g.t_out];
            row.fill(b[o]);
            for k in 0..g.filter {
                let (lo, hi) = tap_range(g.t_in, g.t_out, g.stride, k, g.pad);
                for i in 0..g.c_in {
                    let wv = w[(o * g.filter + k) * g.c_in + i];
                    let xr = &x[(bi * g.c_in + i) * g.t_in..][..g.t_in];
                    for t in lo..hi {
                        row[t] += wv * xr[t * g.stride + k - g.pad];
                    }
                }
            }
        }
    }
    out
}

type Grads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn conv1d_backward(g: &Conv1dGeom, x: &[f64], w: &[f64], gout: &[f64], need: [bool; 3]) -> Grads {
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gw = need[1].then(|| vec![0.0; w.len()]);
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; g.c_out];
        for bi in 0..g.batch {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gout[(bi * g.c_out + o) * g.t_out..][..g.t_out].iter().sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(bi * g.c_out + o) * g.t_out..][..g.t_out];
            for k in 0..g.filter {
                let (lo, hi) = tap_range(g.t_in, g.t_out, g.stride, k, g.pad);
                for i in 0..g.c_in {
                    let wi = (o * g.filter + k) * g.c_in + i;
                    let base = (bi * g.c_in + i) * g.t_in;
                    if let Some(gw) = gw.as_mut() {
                        let mut s = 0.0;
                        for t in lo..hi {
                            s += grow[t] * x[base + t * g.stride + k - g.pad];
                        }
                        gw[wi] += s;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[wi];
                        for t in lo..hi {
                            gx[base + t * g.stride + k - g.pad] += wv * grow[t];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn conv3d_forward(g: &Conv3dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    if g.stride == [1, 1, 1] {
        unit_stride_forward(g, x, w, b)
    } else {
        conv3d_forward_direct(g, x, w, b)
    }
}

pub(crate) fn conv3d_backward(g: &Conv3dGeom, x: &[f64], w: &[f64], gout: &[f64], need: [bool; 3]) -> Grads {
    if g.stride == [1, 1, 1] {
        unit_stride_backward(g, x, w, gout, need)
    } else {
        conv3d_backward_direct(g, x, w, gout, need)
    }
}

/// Stride-1 layout trick: inside a zero-padded input volume of dims
/// `(ol + kt - 1, oh + kh - 1, ow + kw - 1)`, output `(t, y, x)` sits at the
/// padded flat index of its window origin, so each kernel tap is a single
/// contiguous multiply-add over the whole volume. Columns and rows past
/// the output edge are computed and thrown away.
struct PaddedGrid {
    dims: [usize; 3],
    /// Flat span covering every output origin.
    span: usize,
}

impl PaddedGrid {
    fn new(g: &Conv3dGeom) -> Self {
        let [ol, oh, ow] = g.dims_out;
        let [kt, kh, kw] = g.kernel;
        let dims = [ol + kt - 1, oh + kh - 1, ow + kw - 1];
        let span = ((ol - 1) * dims[1] + (oh - 1)) * dims[2] + ow;
        Self { dims, span }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn offset(&self, dt: usize, dh: usize, dw: usize) -> usize {
        (dt * self.dims[1] + dh) * self.dims[2] + dw
    }

    /// Copies an input channel into the padded grid.
    fn pad_input(&self, g: &Conv3dGeom, src: &[f64], dst: &mut [f64]) {
        let [l, h, wd] = g.dims_in;
        let [pt, ph, pw] = g.pad;
        let [_, hp, wp] = self.dims;
        for t in 0..l.min(self.dims[0] - pt) {
            for y in 0..h.min(hp - ph) {
                let n = wd.min(wp - pw);
                let d = ((t + pt) * hp + y + ph) * wp + pw;
                dst[d..d + n].copy_from_slice(&src[(t * h + y) * wd..][..n]);
            }
        }
    }

    /// Adds the padded-grid values back onto an input-shaped channel.
    fn unpad_add(&self, g: &Conv3dGeom, src: &[f64], dst: &mut [f64]) {
        let [l, h, wd] = g.dims_in;
        let [pt, ph, pw] = g.pad;
        let [_, hp, wp] = self.dims;
        for t in 0..l.min(self.dims[0] - pt) {
            for y in 0..h.min(hp - ph) {
                let n = wd.min(wp - pw);
                let s = ((t + pt) * hp + y + ph) * wp + pw;
                for (d, v) in dst[(t * h + y) * wd..][..n].iter_mut().zip(&src[s..s + n]) {
                    *d += v;
                }
            }
        }
    }

    /// Index in the padded grid of each output element, in output order.
    fn output_origins(&self, g: &Conv3dGeom) -> impl Iterator<Item = usize> + '_ {
        let [ol, oh, ow] = g.dims_out;
        let [_, hp, wp] = self.dims;
        (0..ol).flat_map(move |t| (0..oh).flat_map(move |y| (0..ow).map(move |x| (t * hp + y) * wp + x)))
    }
}

/// `acc[i] += Σ_k row[k] · x[i + k]`, one pass per kernel row.
fn axpy_row(acc: &mut [f64], x: &[f64], row: &[f64]) {
    let n = acc.len();
    match *row {
        [w0, w1, w2] => {
            let (x0, x1, x2) = (&x[..n], &x[1..n + 1], &x[2..n + 2]);
            for i in 0..n {
                acc[i] += w0 * x0[i] + w1 * x1[i] + w2 * x2[i];
            }
        }
        _ => {
            for (k, &wv) in row.iter().enumerate() {
                for (a, v) in acc.iter_mut().zip(&x[k..k + n]) {
                    *a += wv * v;
                }
            }
        }
    }
}

/// `out[k] += Σ_i g[i] · x[i + k]`, one pass per kernel row.
fn dot_row(g: &[f64], x: &[f64], out: &mut [f64]) {
    let n = g.len();
    if let [o0, o1, o2] = out {
        let (x0, x1, x2) = (&x[..n], &x[1..n + 1], &x[2..n + 2]);
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            s0 += g[i] * x0[i];
            s1 += g[i] * x1[i];
            s2 += g[i] * x2[i];
        }
        *o0 += s0;
        *o1 += s1;
        *o2 += s2;
    } else {
        for (k, o) in out.iter_mut().enumerate() {
            *o += g.iter().zip(&x[k..k + n]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn unit_stride_forward(g: &Conv3dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let grid = PaddedGrid::new(g);
    let [kt, kh, kw] = g.kernel;
    let in_vol: usize = g.dims_in.iter().product();
    let out_vol: usize = g.dims_out.iter().product();
    let kvol = kt * kh * kw;
    let span = grid.span;
    let mut padded = vec![0.0; g.c_in * grid.len()];
    let mut acc = vec![0.0; span];
    let mut out = vec![0.0; g.batch * g.c_out * out_vol];
    for bi in 0..g.batch {
        for c in 0..g.c_in {
            let src = &x[(bi * g.c_in + c) * in_vol..][..in_vol];
            grid.pad_input(g, src, &mut padded[c * grid.len()..][..grid.len()]);
        }
        for o in 0..g.c_out {
            acc.fill(0.0);
            for c in 0..g.c_in {
                let xp = &padded[c * grid.len()..][..grid.len()];
                let w_oc = &w[(o * g.c_in + c) * kvol..][..kvol];
                for dt in 0..kt {
                    for dh in 0..kh {
                        let row = &w_oc[(dt * kh + dh) * kw..][..kw];
                        axpy_row(&mut acc, &xp[grid.offset(dt, dh, 0)..], row);
                    }
                }
            }
            let dst = &mut out[(bi * g.c_out + o) * out_vol..][..out_vol];
            for (d, i) in dst.iter_mut().zip(grid.output_origins(g)) {
                *d = b[o] + acc[i];
            }
        }
    }
    out
}

fn unit_stride_backward(g: &Conv3dGeom, x: &[f64], w: &[f64], gout: &[f64], need: [bool; 3]) -> Grads {
    let grid = PaddedGrid::new(g);
    let [kt, kh, kw] = g.kernel;
    let in_vol: usize = g.dims_in.iter().product();
    let out_vol: usize = g.dims_out.iter().product();
    let kvol = kt * kh * kw;
    let span = grid.span;
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gw = need[1].then(|| vec![0.0; w.len()]);
    let mut gb = need[2].then(|| vec![0.0; g.c_out]);
    let mut padded = vec![0.0; if gw.is_some() { g.c_in * grid.len() } else { 0 }];
    let mut gpad = vec![0.0; g.c_out * span];
    let mut gxp = vec![0.0; if gx.is_some() { grid.len() } else { 0 }];
    let lead_len = span + 2 * (kw - 1);
    let mut glead = vec![0.0; if gx.is_some() { g.c_out * lead_len } else { 0 }];
    let mut rev = Vec::with_capacity(kw);
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let src = &gout[(bi * g.c_out + o) * out_vol..][..out_vol];
            let dst = &mut gpad[o * span..][..span];
            for (i, v) in grid.output_origins(g).zip(src) {
                dst[i] = *v;
            }
            if let Some(gb) = gb.as_mut() {
                gb[o] += src.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            for c in 0..g.c_in {
                let src = &x[(bi * g.c_in + c) * in_vol..][..in_vol];
                grid.pad_input(g, src, &mut padded[c * grid.len()..][..grid.len()]);
            }
            for o in 0..g.c_out {
                let go = &gpad[o * span..][..span];
                for c in 0..g.c_in {
                    let xp = &padded[c * grid.len()..][..grid.len()];
                    let w_off = (o * g.c_in + c) * kvol;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let dst = &mut gw[w_off + (dt * kh + dh) * kw..][..kw];
                            dot_row(go, &xp[grid.offset(dt, dh, 0)..], dst);
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for o in 0..g.c_out {
                glead[o * lead_len + kw - 1..][..span].copy_from_slice(&gpad[o * span..][..span]);
            }
            for c in 0..g.c_in {
                gxp.fill(0.0);
                for o in 0..g.c_out {
                    // gxp[off + m] += Σ_k w_k · go[m - k], read from the
                    // front-padded copy so every row is one fused pass
                    let gl = &glead[o * lead_len..][..lead_len];
                    let w_oc = &w[(o * g.c_in + c) * kvol..][..kvol];
                    for dt in 0..kt {
                        for dh in 0..kh {
                            rev.clear();
                            rev.extend(w_oc[(dt * kh + dh) * kw..][..kw].iter().rev());
                            let off = grid.offset(dt, dh, 0);
                            axpy_row(&mut gxp[off..off + span + kw - 1], gl, &rev);
                        }
                    }
                }
                grid.unpad_add(g, &gxp, &mut gx[(bi * g.c_in + c) * in_vol..][..in_vol]);
            }
        }
    }
    (gx, gw, gb)
}

fn conv3d_forward_direct(g: &Conv3dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let [l, h, wd] = g.dims_in;
    let [ol, oh, ow] = g.dims_out;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let in_vol = l * h * wd;
    let out_vol = ol * oh * ow;
    let kvol = kt * kh * kw;
    let mut out = vec![0.0; g.batch * g.c_out * out_vol];
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let out_c = &mut out[(bi * g.c_out + o) * out_vol..][..out_vol];
            out_c.fill(b[o]);
            for c in 0..g.c_in {
                let x_c = &x[(bi * g.c_in + c) * in_vol..][..in_vol];
                let w_oc = &w[(o * g.c_in + c) * kvol..][..kvol];
                for dt in 0..kt {
                    let (t_lo, t_hi) = tap_range(l, ol, st, dt, pt);
                    for dh in 0..kh {
                        let (h_lo, h_hi) = tap_range(h, oh, sh, dh, ph);
                        for dw in 0..kw {
                            let (w_lo, w_hi) = tap_range(wd, ow, sw, dw, pw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wv = w_oc[(dt * kh + dh) * kw + dw];
                            for ot in t_lo..t_hi {
                                let it = ot * st + dt - pt;
                                for oy in h_lo..h_hi {
                                    let iy = oy * sh + dh - ph;
                                    let orow = &mut out_c[(ot * oh + oy) * ow..][w_lo..w_hi];
                                    let ibase = (it * h + iy) * wd;
                                    if sw == 1 {
                                        let start = ibase + w_lo + dw - pw;
                                        let irow = &x_c[start..start + orow.len()];
                                        for (ov, iv) in orow.iter_mut().zip(irow) {
                                            *ov += wv * iv;
                                        }
                                    } else {
                                        for (j, ov) in orow.iter_mut().enumerate() {
                                            *ov += wv * x_c[ibase + (w_lo + j) * sw + dw - pw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward_direct(g: &Conv3dGeom, x: &[f64], w: &[f64], gout: &[f64], need: [bool; 3]) -> Grads {
    let [l, h, wd] = g.dims_in;
    let [ol, oh, ow] = g.dims_out;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let in_vol = l * h * wd;
    let out_vol = ol * oh * ow;
    let kvol = kt * kh * kw;
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gw = need[1].then(|| vec![0.0; w.len()]);
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; g.c_out];
        for bi in 0..g.batch {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gout[(bi * g.c_out + o) * out_vol..][..out_vol].iter().sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    for bi in 0..g.batch {
        for o in 0..g.c_out {
            let g_c = &gout[(bi * g.c_out + o) * out_vol..][..out_vol];
            for c in 0..g.c_in {
                let x_off = (bi * g.c_in + c) * in_vol;
                let w_off = (o * g.c_in + c) * kvol;
                for dt in 0..kt {
                    let (t_lo, t_hi) = tap_range(l, ol, st, dt, pt);
                    for dh in 0..kh {
                        let (h_lo, h_hi) = tap_range(h, oh, sh, dh, ph);
                        for dw in 0..kw {
                            let (w_lo, w_hi) = tap_range(wd, ow, sw, dw, pw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wi = w_off + (dt * kh + dh) * kw + dw;
                            let wv = w[wi];
                            let mut wsum = 0.0;
                            for ot in t_lo..t_hi {
                                let it = ot * st + dt - pt;
                                for oy in h_lo..h_hi {
                                    let iy = oy * sh + dh - ph;
                                    let grow = &g_c[(ot * oh + oy) * ow..][w_lo..w_hi];
                                    let ibase = x_off + (it * h + iy) * wd;
                                    if sw == 1 {
                                        let start = ibase + w_lo + dw - pw;
                                        if gw.is_some() {
                                            let irow = &x[start..start + grow.len()];
                                            wsum += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                        }
                                        if let Some(gx) = gx.as_mut() {
                                            let xrow = &mut gx[start..start + grow.len()];
                                            for (xv, gv) in xrow.iter_mut().zip(grow) {
                                                *xv += wv * gv;
                                            }
                                        }
                                    } else {
                                        for (j, gv) in grow.iter().enumerate() {
                                            let xi = ibase + (w_lo + j) * sw + dw - pw;
                                            wsum += gv * x[xi];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xi] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wi] += wsum;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DiffTensor, Mode};

    fn t(shape: &[usize], v: &[f64]) -> DiffTensor {
        DiffTensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn unit_stride_path_matches_direct_loops() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..60 {
            let dims_in = [r.gen_range(1..6), r.gen_range(1..7), r.gen_range(1..7)];
            let kernel = [r.gen_range(1..=dims_in[0].min(3)), r.gen_range(1..=dims_in[1].min(4)), r.gen_range(1..=dims_in[2].min(4))];
            let padding = if trial % 2 == 0 { Padding::Same } else { Padding::Valid };
            let mut dims_out = [0; 3];
            let mut pad = [0; 3];
            for a in 0..3 {
                let (o, p) = axis_geometry(dims_in[a], kernel[a], 1, padding).unwrap();
                dims_out[a] = o;
                pad[a] = p;
            }
            let geom = Conv3dGeom {
                batch: r.gen_range(1..3),
                c_in: r.gen_range(1..3),
                dims_in,
                c_out: r.gen_range(1..3),
                kernel,
                stride: [1, 1, 1],
                pad,
                dims_out,
            };
            let n_in = geom.batch * geom.c_in * dims_in.iter().product::<usize>();
            let n_w = geom.c_out * geom.c_in * kernel.iter().product::<usize>();
            let n_out = geom.batch * geom.c_out * dims_out.iter().product::<usize>();
            let mut v = |n: usize| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (x, w, b, go) = (v(n_in), v(n_w), v(geom.c_out), v(n_out));
            let fast = unit_stride_forward(&geom, &x, &w, &b);
            let slow = conv3d_forward_direct(&geom, &x, &w, &b);
            let close = |a: &[f64], e: &[f64]| a.len() == e.len() && a.iter().zip(e).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&fast, &slow), "forward {geom:?}");
            let (fx, fw, fb) = unit_stride_backward(&geom, &x, &w, &go, [true; 3]);
            let (sx, sw, sb) = conv3d_backward_direct(&geom, &x, &w, &go, [true; 3]);
            assert!(close(&fx.unwrap(), &sx.unwrap()), "input grad {geom:?}");
            assert!(close(&fw.unwrap(), &sw.unwrap()), "weight grad {geom:?}");
            assert!(close(&fb.unwrap(), &sb.unwrap()), "bias grad {geom:?}");
        }
    }

    #[test]
    fn geometry_closed_forms() {
        assert_eq!(axis_geometry(4, 2, 2, Padding::Valid), Some((2, 0)));
        assert_eq!(axis_geometry(7, 3, 2, Padding::Valid), Some((3, 0)));
        assert_eq!(axis_geometry(2, 3, 1, Padding::Valid), None);
        assert_eq!(axis_geometry(7, 3, 2, Padding::Same), Some((4, 1)));
        assert_eq!(axis_geometry(8, 3, 1, Padding::Same), Some((8, 1)));
        assert_eq!(axis_geometry(8, 1, 2, Padding::Same), Some((4, 0)));
    }

    #[test]
    fn tap_range_matches_brute_force() {
        for n_in in 1..9 {
            for f in 1..5 {
                for s in 1..4 {
                    for pad in [Padding::Valid, Padding::Same] {
                        let Some((n_out, p)) = axis_geometry(n_in, f, s, pad) else { continue };
                        for k in 0..f {
                            let (lo, hi) = tap_range(n_in, n_out, s, k, p);
                            for o in 0..n_out {
                                let idx = (o * s + k) as isize - p as isize;
                                let inside = idx >= 0 && (idx as usize) < n_in;
                                assert_eq!(inside, (lo..hi).contains(&o), "n={n_in} f={f} s={s} k={k} o={o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_times_two() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.input(t(&[1, 1, 1], &[2.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 3]);
        assert_eq!(g.values(y), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv1d_stride_two_hand_oracle() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let w = g.input(t(&[1, 2, 1], &[1.0, 1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 2, Padding::Valid).unwrap();
        assert_eq!(g.values(y), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[2, 3, 2], &data));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.input(t(&[3, 1, 3], &eye));
        let b = g.input(DiffTensor::zeros(&[3]).unwrap());
        let y = g.conv1d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(g.values(y), &data[..]);
    }

    #[test]
    fn conv1d_errors_name_dimensions() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(DiffTensor::zeros(&[2, 5]).unwrap());
        let w = g.input(DiffTensor::zeros(&[1, 2, 3]).unwrap());
        let b = g.input(DiffTensor::zeros(&[1]).unwrap());
        let err = g.conv1d(x, w, b, 1, Padding::Valid).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
        let w = g.input(DiffTensor::zeros(&[1, 6, 2]).unwrap());
        let err = g.conv1d(x, w, b, 1, Padding::Valid).unwrap_err().to_string();
        assert!(err.contains("length 5") && err.contains("filter size 6"), "{err}");
    }

    #[test]
    fn conv3d_unit_kernel_is_identity() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 - 7.5).collect();
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 2, 3, 4], &data));
        let w = g.input(t(&[1, 1, 1, 1, 1], &[1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv3d(x, w, b, [1, 1, 1], Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 4]);
        assert_eq!(g.values(y), &data[..]);
    }

    #[test]
    fn conv3d_all_ones_sums_to_eight() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(DiffTensor::filled(&[1, 2, 2, 2], 1.0).unwrap());
        let w = g.input(DiffTensor::filled(&[1, 1, 2, 2, 2], 1.0).unwrap());
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv3d(x, w, b, [1, 1, 1], Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.values(y), &[8.0]);
    }

    #[test]
    fn conv3d_kernel_gradient_is_window_sum() {
        // d/dW sum(conv(x, W)) at tap k = sum over output positions of the input under tap k
        let (l, h, w) = (3, 4, 5);
        let data: Vec<f64> = (0..l * h * w).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let mut g = Graph::new(Mode::Train);
        let x = g.input(t(&[1, l, h, w], &data));
        let wt = g.input(DiffTensor::filled(&[1, 1, 2, 2, 2], 1.0).unwrap().with_requires_grad(true));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv3d(x, wt, b, [1, 1, 1], Padding::Valid).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        for dt in 0..2 {
            for dh in 0..2 {
                for dw in 0..2 {
                    let mut expect = 0.0;
                    for ot in 0..l - 1 {
                        for oy in 0..h - 1 {
                            for ox in 0..w - 1 {
                                expect += data[((ot + dt) * h + oy + dh) * w + ox + dw];
                            }
                        }
                    }
                    let got = g.grad(wt)[(dt * 2 + dh) * 2 + dw];
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn conv3d_rejects_oversized_kernel() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(DiffTensor::zeros(&[1, 2, 2, 2]).unwrap());
        let w = g.input(DiffTensor::zeros(&[1, 1, 3, 3, 3]).unwrap());
        let b = g.input(DiffTensor::zeros(&[1]).unwrap());
        assert!(g.conv3d(x, w, b, [1, 1, 1], Padding::Valid).is_err());
    }
}
