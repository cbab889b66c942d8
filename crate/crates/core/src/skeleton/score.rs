use std::fmt::Write as _;

use crate::error::{invalid, Result};

/// Deepest BJCN layer whose rows still correspond one-to-one with joint
/// coordinates.
pub const MAX_SCORE_LAYER: usize = 4;

/// A bottom-layer feature `X ∈ ℝ^{M × N_l}` (row-major): row `i` is input
/// coordinate row `i`, column `j` is filter `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("feature map {rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Sample `b` of a network feature laid out `[batch, N_l, M]`.
    pub fn from_network(values: &[f64], shape: &[usize], b: usize) -> Result<Self> {
        let [batch, filters, rows] = shape else {
            return Err(invalid(format!("bottom feature must be [batch, filters, rows], got {shape:?}")));
        };
        if b >= *batch {
            return Err(invalid(format!("sample {b} outside batch of {batch}")));
        }
        let base = b * filters * rows;
        let mut data = vec![0.0; rows * filters];
        for j in 0..*filters {
            for i in 0..*rows {
                data[i * filters + j] = values[base + j * rows + i];
            }
        }
        Self::new(*rows, *filters, data)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Which bottom layers (1-based) contribute to the score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSelection(Vec<usize>);

impl LayerSelection {
    pub fn new(mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(invalid("layer selection is empty"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > MAX_SCORE_LAYER) {
            return Err(invalid(format!(
                "layer {bad} cannot be scored: only layers 1..={MAX_SCORE_LAYER} keep a direct joint correspondence"
            )));
        }
        Ok(Self(layers))
    }

    pub fn single(layer: usize) -> Result<Self> {
        Self::new(vec![layer])
    }

    /// All four bottom layers summed.
    pub fn sum() -> Self {
        Self((1..=MAX_SCORE_LAYER).collect())
    }

    /// `"sum"`, a single layer `"3"` or a list `"1,3"`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("sum") {
            return Ok(Self::sum());
        }
        let layers = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| invalid(format!("bad layer selection `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointScoreVector {
    pub scores: Vec<f64>,
    pub source_layers: Vec<usize>,
}

impl JointScoreVector {
    /// First joint with the highest score.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Unnormalized per-joint sums of one feature map over the joint's three
/// coordinate rows and every column.
pub fn raw_scores(feature: &FeatureMap) -> Result<Vec<f64>> {
    if feature.rows % 3 != 0 {
        return Err(invalid(format!("feature has {} rows, not a multiple of 3", feature.rows)));
    }
    let mut out = vec![0.0; feature.rows / 3];
    for (k, s) in out.iter_mut().enumerate() {
        for i in 3 * k..3 * k + 3 {
            for j in 0..feature.cols {
                *s += feature.at(i, j);
            }
        }
    }
    Ok(out)
}

/// `features[l - 1]` is bottom layer `l`. Raw scores of the selected layers
/// are summed, then min-max scaled to `[0, 1]`; if every joint has the same
/// raw score all scores are 0.
pub fn extract_informativeness(features: &[FeatureMap], selection: &LayerSelection) -> Result<JointScoreVector> {
    let mut total: Option<Vec<f64>> = None;
    for &l in selection.layers() {
        let f = features
            .get(l - 1)
            .ok_or_else(|| invalid(format!("layer {l} requested but only {} features given", features.len())))?;
        let raw = raw_scores(f)?;
        match &mut total {
            None => total = Some(raw),
            Some(t) if t.len() == raw.len() => t.iter_mut().zip(raw).for_each(|(a, b)| *a += b),
            Some(t) => {
                return Err(invalid(format!("layer {l} has {} joints, earlier layers {}", raw.len(), t.len())))
            }
        }
    }
    let mut scores = total.unwrap_or_default();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter_mut().for_each(|s| *s = (*s - lo) / (hi - lo));
    } else {
        scores.iter_mut().for_each(|s| *s = 0.0);
    }
    Ok(JointScoreVector { scores, source_layers: selection.layers().to_vec() })
}

/// `"<joint> <score>"` per line, six decimals.
pub fn format_score_report(scores: &JointScoreVector) -> String {
    let mut s = String::new();
    for (k, v) in scores.scores.iter().enumerate() {
        let _ = writeln!(s, "{k} {v:.6}");
    }
    s
}
