//! Central finite-difference gradient checking.

use crate::nn::Parameters;

/// Worst-case discrepancy for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` (same group order and lengths as `params.param_groups()`)
/// against central differences of `loss` with step `h`.
///
/// Parameters are restored bit-exactly after each probe.
pub fn grad_check<P, F>(params: &mut P, analytic: &[Vec<f64>], h: f64, mut loss: F) -> GradCheckReport
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    check_with(params, analytic, |p, gi, j| central(p, gi, j, h, &mut loss))
}

/// Like [`grad_check`] but probes each parameter on a ladder of steps,
/// finest first.
///
/// Coarser steps carry less rounding noise (which dominates for gradients
/// near 1e-8 on an O(1) loss). The coarsest estimate that agrees with the next
/// finer one, up to that finer one's rounding noise, is used; disagreement
/// signals a kink (e.g. LeakyReLU) inside the coarse interval. The choice
/// depends on the finite differences only, never on the analytic value.
pub fn grad_check_multistep<P, F>(
    params: &mut P,
    analytic: &[Vec<f64>],
    steps: &[f64],
    mut loss: F,
) -> GradCheckReport
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    assert!(!steps.is_empty(), "at least one step");
    check_with(params, analytic, |p, gi, j| {
        let scale = loss(p).abs().max(1.0);
        let est: Vec<f64> = steps.iter().map(|&h| central(p, gi, j, h, &mut loss)).collect();
        let mut chosen = est[0];
        for k in 1..steps.len() {
            let noise = 16.0 * f64::EPSILON * scale / steps[k - 1];
            if (est[k] - est[k - 1]).abs() <= noise + 1e-6 * est[k - 1].abs() {
                chosen = est[k];
            } else {
                break;
            }
        }
        chosen
    })
}

fn central<P, F>(params: &mut P, gi: usize, j: usize, h: f64, loss: &mut F) -> f64
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    let original = set_param(params, gi, j, None);
    set_param(params, gi, j, Some(original + h));
    let plus = loss(params);
    set_param(params, gi, j, Some(original - h));
    let minus = loss(params);
    set_param(params, gi, j, Some(original));
    (plus - minus) / (2.0 * h)
}

fn check_with<P, N>(params: &mut P, analytic: &[Vec<f64>], mut numeric_at: N) -> GradCheckReport
where
    P: Parameters + ?Sized,
    N: FnMut(&mut P, usize, usize) -> f64,
{
    let shapes: Vec<(String, usize)> = params
        .param_groups()
        .into_iter()
        .map(|(n, v)| (n, v.len()))
        .collect();
    assert_eq!(shapes.len(), analytic.len(), "analytic gradient group count");
    let mut report = GradCheckReport::default();
    for (gi, (name, len)) in shapes.into_iter().enumerate() {
        assert_eq!(analytic[gi].len(), len, "analytic gradient length for {name}");
        let mut check = GroupCheck {
            name,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: len,
        };
        for j in 0..len {
            let numeric = numeric_at(params, gi, j);
            let a = analytic[gi][j];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        report.groups.push(check);
    }
    report
}

fn set_param<P: Parameters + ?Sized>(params: &mut P, group: usize, idx: usize, value: Option<f64>) -> f64 {
    let mut groups = params.param_groups_mut();
    let slot = &mut groups[group].1[idx];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}
