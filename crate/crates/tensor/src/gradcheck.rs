//! Central finite-difference checks of analytic gradients (f64 only).

use crate::error::Result;
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding do not produce huge ratios.
    pub floor: f64,
    /// Check at most this many elements per input (evenly strided); `None` checks all.
    pub max_elements: Option<usize>,
    /// Use the fourth-order five-point stencil instead of the two-point one.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            max_elements: None,
            five_point: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` against central differences.
///
/// `f` is called once with `requires_grad` leaves for the analytic pass and
/// then repeatedly with constants for the perturbed evaluations.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    check_with(f, inputs, cfg, |_, g| g)
}

/// Like [`check`], with a hook that may rewrite the analytic gradient of
/// input `i` before comparison. Used to prove the harness catches errors.
pub fn check_with<F, H>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig, hook: H) -> Result<GradReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
    H: Fn(usize, Vec<f64>) -> Vec<f64>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let g = l
                .grad()
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; l.numel()]);
            hook(i, g)
        })
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = probe.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(f(&vars)?.item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match cfg.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut rep = InputReport {
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
        };
        for k in (0..n).step_by(stride) {
            let x0 = input.data()[k];
            let mut at = |d: f64| -> Result<f64> {
                probe[i].data_mut()[k] = x0 + d;
                eval(&probe)
            };
            let h = cfg.step;
            let numeric = if cfg.five_point {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            probe[i].data_mut()[k] = x0;
            let a = analytic[i][k];
            let rel = relative_error(a, numeric, cfg.floor);
            if rel > rep.max_rel_err || rep.checked == 0 {
                rep.max_rel_err = rel;
                rep.worst = k;
            }
            rep.max_abs_err = rep.max_abs_err.max((a - numeric).abs());
            rep.checked += 1;
        }
        reports.push(rep);
    }
    Ok(GradReport { inputs: reports })
}
