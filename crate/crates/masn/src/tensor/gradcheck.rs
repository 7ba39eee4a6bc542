//! Central-difference gradient checking.
//!
//! The loss closure is called in two modes: value-only (for finite-difference
//! probes) and gradient-filling (reverse mode writes into the store's gradient
//! slots). The two paths stay independent: the finite-difference side only ever
//! reads loss values.

use super::{ParamStore, Tensor};
use crate::error::{MasnError, Result};

/// At most this many entries are probed per tensor, at a deterministic stride.
pub const MAX_ENTRIES_PER_TENSOR: usize = 64;

/// Loss evaluation mode passed to the checked closure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Only the loss value is needed; gradient slots must not be touched.
    ValueOnly,
    /// Reverse-mode gradients must be accumulated into the store.
    WithGrads,
}

#[derive(Clone, Debug)]
pub struct PathCheck {
    pub path: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_path: Vec<PathCheck>,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_path.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst_path(&self) -> Option<&PathCheck> {
        self.per_path
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn all_below(&self, threshold: f64) -> bool {
        self.max_rel_err() < threshold
    }

    /// Render as an aligned text table, one row per parameter path.
    pub fn to_table(&self) -> String {
        let width = self
            .per_path
            .iter()
            .map(|p| p.path.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!("{:<width$}  {:>12}  {:>7}\n", "path", "max rel err", "checked");
        for p in &self.per_path {
            out.push_str(&format!(
                "{:<width$}  {:>12.3e}  {:>7}\n",
                p.path, p.max_rel_err, p.entries_checked
            ));
        }
        out
    }
}

/// Relative error between reverse-mode and finite-difference derivatives.
pub fn relative_error(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of `loss_fn` against central differences.
///
/// For each parameter, entries are sampled at a deterministic stride so no
/// tensor contributes more than [`MAX_ENTRIES_PER_TENSOR`] probes. The closure
/// must be deterministic; this is verified by evaluating the unperturbed loss
/// twice and requiring bit-equal results.
pub fn grad_check<F>(mut loss_fn: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, LossMode) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(MasnError::InvalidArgument(format!(
            "grad_check eps must lie in (0, 1e-3], got {eps}"
        )));
    }

    let l0 = loss_fn(params, LossMode::ValueOnly)?;
    let l1 = loss_fn(params, LossMode::ValueOnly)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(MasnError::NonDeterministicLoss(l0, l1));
    }

    params.zero_grads();
    loss_fn(params, LossMode::WithGrads)?;
    let analytic: Vec<(String, Tensor)> = params
        .iter()
        .map(|(path, entry)| (path.clone(), entry.grad.clone()))
        .collect();

    let mut per_path = Vec::with_capacity(analytic.len());
    for (path, grad) in &analytic {
        let n = grad.numel();
        let stride = n.div_ceil(MAX_ENTRIES_PER_TENSOR).max(1);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut idx = 0;
        while idx < n {
            let original = params.value(path)?.data()[idx];

            params.value_mut(path)?.data_mut()[idx] = original + eps;
            let lp = loss_fn(params, LossMode::ValueOnly)?;
            params.value_mut(path)?.data_mut()[idx] = original - eps;
            let lm = loss_fn(params, LossMode::ValueOnly)?;
            params.value_mut(path)?.data_mut()[idx] = original;

            let g_fd = (lp - lm) / (2.0 * eps);
            let rel = relative_error(grad.data()[idx], g_fd);
            max_rel = max_rel.max(rel);
            checked += 1;
            idx += stride;
        }
        per_path.push(PathCheck {
            path: path.clone(),
            max_rel_err: max_rel,
            entries_checked: checked,
        });
    }

    Ok(GradCheckReport { per_path, eps })
}
