//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Var};

/// Which coordinates of each trainable parameter to perturb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coordinates {
    All,
    /// Up to `per_tensor` distinct coordinates per parameter tensor, drawn
    /// from `seed`. Tensors smaller than that are checked in full.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Lower bound on the relative-error denominator `|a| + |n|`.
    pub denominator_floor: f64,
    pub coordinates: Coordinates,
    /// Exclude coordinates whose ±epsilon evaluations took a different
    /// ReLU / max-pool branch than the unperturbed one.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            denominator_floor: 1e-12,
            coordinates: Coordinates::All,
            skip_kinks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tensors: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Evaluates `loss` once with gradients and returns the gradient of every
/// trainable parameter (zero for parameters the graph never touched),
/// along with the activation-pattern signature of that evaluation.
pub fn analytic_gradients<F>(store: &ParamStore, loss: &mut F) -> Result<(Vec<(ParamId, Vec<f64>)>, u64)>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (mut g, l) = loss(store)?;
    let value = scalar(&g, l)?;
    if !value.is_finite() {
        return Err(Error::CheckFailed(format!("loss is {value}")));
    }
    g.backward(l)?;
    let computed = g.param_grads();
    let grads = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| {
            let g = computed
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, g)| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.tensor(id).len()]);
            (id, g)
        })
        .collect();
    Ok((grads, g.kink_signature()))
}

/// Compares supplied analytic gradients against central differences
/// `(L(w + e) - L(w - e)) / 2e`, restoring every perturbed value.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    analytic: &[(ParamId, Vec<f64>)],
    center_signature: u64,
    loss: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tensors: 0,
    };
    for (id, grad) in analytic {
        let n = store.tensor(*id).len();
        let coords: Vec<usize> = match opts.coordinates {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample { per_tensor, seed } if per_tensor < n => {
                let mut r = rng::stream(seed, &store.get(*id).name);
                let mut c = sample(&mut r, n, per_tensor).into_vec();
                c.sort_unstable();
                c
            }
            Coordinates::Sample { .. } => (0..n).collect(),
        };
        report.tensors += 1;
        for i in coords {
            let orig = store.tensor(*id).values()[i];
            store.tensor_mut(*id).values_mut()[i] = orig + opts.epsilon;
            let plus = evaluate(store, loss);
            store.tensor_mut(*id).values_mut()[i] = orig - opts.epsilon;
            let minus = evaluate(store, loss);
            store.tensor_mut(*id).values_mut()[i] = orig;
            let ((f_plus, sig_plus), (f_minus, sig_minus)) = (plus?, minus?);
            if opts.skip_kinks && (sig_plus != center_signature || sig_minus != center_signature) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * opts.epsilon);
            let err = relative_error(grad[i], numeric, opts.denominator_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstCoordinate {
                    param: store.get(*id).name.clone(),
                    index: i,
                    analytic: grad[i],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Full check: analytic gradients from one backward pass, then finite
/// differences over the selected coordinates.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (analytic, sig) = analytic_gradients(store, &mut loss)?;
    compare_with_finite_differences(store, opts, &analytic, sig, &mut loss)
}

fn scalar(g: &Graph, l: Var) -> Result<f64> {
    match g.values(l) {
        [v] => Ok(*v),
        other => Err(Error::CheckFailed(format!(
            "loss must be a scalar, got {} values",
            other.len()
        ))),
    }
}

fn evaluate<F>(store: &ParamStore, loss: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (g, l) = loss(store)?;
    let v = scalar(&g, l)?;
    if !v.is_finite() {
        return Err(Error::CheckFailed(format!("perturbed loss is {v}")));
    }
    Ok((v, g.kink_signature()))
}
