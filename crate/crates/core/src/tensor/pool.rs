use super::graph::{Graph, Op, Var};
use crate::error::{invalid, Result};

impl Graph {
    /// Non-overlapping 3-D max pooling with window = stride = `pool`
    /// (t, h, w). A dimension not divisible by its pool size is padded
    /// with negative infinity at the end, so the output size is
    /// `ceil(n / p)`. Ties go to the first element in scan order.
    pub fn maxpool3d(&mut self, input: Var, pool: [usize; 3]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (batch, unbatched) = match xs.len() {
            4 => (1, true),
            5 => (xs[0], false),
            r => return Err(invalid(format!("maxpool3d: input must have rank 4 or 5, got rank {r}"))),
        };
        let off = xs.len() - 4;
        let c = xs[off];
        let dims = [xs[off + 1], xs[off + 2], xs[off + 3]];
        for a in 0..3 {
            if pool[a] == 0 || pool[a] > dims[a] {
                return Err(invalid(format!(
                    "maxpool3d: pool {pool:?} exceeds input dims {dims:?} on axis {a}"
                )));
            }
        }
        let out_dims = [
            dims[0].div_ceil(pool[0]),
            dims[1].div_ceil(pool[1]),
            dims[2].div_ceil(pool[2]),
        ];
        let [l, h, w] = dims;
        let [ol, oh, ow] = out_dims;
        let in_vol = l * h * w;
        let out_vol = ol * oh * ow;
        let x = self.values(input);
        let mut out = vec![0.0; batch * c * out_vol];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..batch * c {
            for ot in 0..ol {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for t in ot * pool[0]..((ot + 1) * pool[0]).min(l) {
                            for y in oy * pool[1]..((oy + 1) * pool[1]).min(h) {
                                for xx in ox * pool[2]..((ox + 1) * pool[2]).min(w) {
                                    let i = bc * in_vol + (t * h + y) * w + xx;
                                    if best_i == usize::MAX || x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = bc * out_vol + (ot * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        for chunk in argmax.chunks(64) {
            let word = chunk
                .iter()
                .fold(0u64, |acc, &i| acc.wrapping_mul(31).wrapping_add(i as u64));
            self.fold_kinks(word);
        }
        let shape = if unbatched {
            vec![c, ol, oh, ow]
        } else {
            vec![batch, c, ol, oh, ow]
        };
        Ok(self.push(shape, out, Op::MaxPool3d { input, argmax }))
    }
}
