//! Central finite-difference checks of autodiff gradients (f64 only).

pub mod suite;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(|g_ad| + |g_fd|, floor)` over checked elements;
    /// see [`SCALE_FLOOR`].
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    /// Analytic and numeric gradient at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn empty(tol: f64) -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
            tol,
            passed: true,
        }
    }

    /// Combines two reports; the result fails if either does.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let (worse, _) = if other.max_rel_error > self.max_rel_error { (&other, &self) } else { (&self, &other) };
        GradCheckReport {
            max_rel_error: worse.max_rel_error,
            worst_index: worse.worst_index,
            worst_analytic: worse.worst_analytic,
            worst_numeric: worse.worst_numeric,
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            checked: self.checked + other.checked,
            tol: self.tol.min(other.tol),
            passed: self.passed && other.passed,
        }
    }
}

/// Gradient components smaller than this fraction of the largest component
/// in a check are compared against that level rather than elementwise, so
/// structurally zero gradients are not judged on finite-difference noise.
pub const SCALE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a| + |n|, floor)`; zero when both sides are zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let den = (analytic.abs() + numeric.abs()).max(floor);
    if den == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / den
    }
}

/// Central differences `(f(+h) − f(−h)) / 2h` for `n` elements, where
/// `eval(i, delta)` evaluates the function with element `i` shifted by `delta`.
pub fn numeric_gradient(n: usize, mut eval: impl FnMut(usize, f64) -> Result<f64>, step: f64) -> Result<Vec<f64>> {
    (0..n).map(|i| Ok((eval(i, step)? - eval(i, -step)?) / (2.0 * step))).collect()
}

/// `SCALE_FLOOR` times the largest magnitude on either side.
pub fn scale_floor<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let mut m = 0.0f64;
    for (a, n) in pairs {
        for v in a.iter().chain(n) {
            m = m.max(v.abs());
        }
    }
    SCALE_FLOOR * m
}

/// Scores analytic against numeric gradients with a given floor.
pub fn score(analytic: &[f64], numeric: &[f64], floor: f64, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport::empty(tol);
    for (i, (&g_ad, &g_fd)) in analytic.iter().zip(numeric).enumerate() {
        let rel = relative_error(g_ad, g_fd, floor);
        report.max_abs_error = report.max_abs_error.max((g_ad - g_fd).abs());
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = g_ad;
            report.worst_numeric = g_fd;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tol;
    report
}

/// Compares one tensor's analytic gradient against central differences,
/// with the floor taken from that tensor alone.
pub fn compare_with_finite_differences(
    analytic: &[f64],
    eval: impl FnMut(usize, f64) -> Result<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let numeric = numeric_gradient(analytic.len(), eval, step)?;
    let floor = scale_floor([(analytic, numeric.as_slice())]);
    Ok(score(analytic, &numeric, floor, tol))
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape()));
    }
    Ok(v.data()[0])
}

/// Checks the autodiff gradient of a scalar function `f` at `x`.
///
/// `f` is called on fresh tapes; it must be deterministic (two evaluations at
/// `x` are compared bit for bit before any differencing).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_with_step(f, x, tol, DEFAULT_STEP)
}

pub fn finite_diff_check_with_step<F>(f: F, x: &Tensor<f64>, tol: f64, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut probe = x.clone();
    compare_with_finite_differences(
        analytic.data(),
        |i, delta| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + delta;
            let v = eval_scalar(&f, &probe);
            probe.data_mut()[i] = orig;
            v
        },
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{sum, Backward, BackwardCtx};

    fn random(seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 2, 3, 3], |_, _, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn sum_has_exact_gradient() {
        let r = finite_diff_check(sum, &random(1), 1e-4).unwrap();
        // Exact up to rounding in the differenced sums.
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(r.passed);
        assert_eq!(r.checked, 18);
    }

    /// Square with a backward rule that is off by a factor of two.
    struct BrokenSquare;

    impl Backward<f64> for BrokenSquare {
        fn name(&self) -> &'static str {
            "broken_square"
        }

        fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Vec<Option<Tensor<f64>>> {
            let x = ctx.inputs[0];
            let mut g = ctx.grad.clone();
            for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
                *gi *= 4.0 * xi;
            }
            vec![Some(g)]
        }
    }

    #[test]
    fn wrong_backward_is_reported() {
        let f = |t: &mut Tape<f64>, x: Var| {
            let sq = t.value(x).map(|v| v * v);
            let y = t.record(sq, &[x], BrokenSquare)?;
            sum(t, y)
        };
        let r = finite_diff_check(f, &random(2), 1e-4).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let f = |t: &mut Tape<f64>, x: Var| {
            let k = counter.fetch_add(1, Ordering::Relaxed) as f64;
            let c = t.constant(Tensor::full(t.shape(x), k));
            let y = crate::autodiff::add(t, x, c)?;
            sum(t, y)
        };
        assert!(matches!(finite_diff_check(f, &random(3), 1e-4), Err(Error::NonDeterministic { .. })));
    }
}
