//! Central finite-difference check of analytic gradients.

use super::{Differentiable, Matrix};
use crate::{Error, Result};

/// Perturbation applied to each parameter.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so parameters whose gradient
/// is essentially zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor, index)` of the worst relative error.
    pub worst: (usize, usize),
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the model's own analytic gradients against central differences.
pub fn grad_check<M: Differentiable>(
    model: &mut M,
    x: &Matrix,
    labels: &[usize],
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grads(x, labels)?;
    grad_check_against(model, x, labels, &analytic, tol)
}

/// Compares `analytic` (one vector per parameter tensor) against central
/// differences of the model's loss. Parameters are restored bit-exactly.
pub fn grad_check_against<M: Differentiable>(
    model: &mut M,
    x: &Matrix,
    labels: &[usize],
    analytic: &[Vec<f64>],
    tol: f64,
) -> Result<GradCheckReport> {
    let shapes = model.param_shapes();
    if shapes.len() != analytic.len() || shapes.iter().zip(analytic).any(|(&n, g)| n != g.len()) {
        return Err(Error::Shape("gradient tensors do not match parameter shapes".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        n_checked: 0,
        tol,
        passed: false,
    };
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params()[t][i];
            model.params_mut()[t][i] = orig + FD_STEP;
            let plus = model.loss(x, labels);
            model.params_mut()[t][i] = orig - FD_STEP;
            let minus = model.loss(x, labels);
            model.params_mut()[t][i] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);

            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (t, i);
            }
            report.n_checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AttentionMil, LinearProbe};
    use crate::Rng;

    fn random_matrix(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    #[test]
    fn linear_probe_batch_passes() {
        let mut rng = Rng::new(11);
        let mut m = LinearProbe::init(3, 8, &mut rng);
        let x = random_matrix(4, 8, &mut rng);
        let r = grad_check(&mut m, &x, &[0, 2, 1, 2], 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.n_checked, 3 * 8 + 3);
    }

    #[test]
    fn attention_mil_bag_passes() {
        let mut rng = Rng::new(12);
        let mut m = AttentionMil::init(8, 4, 2, &mut rng).unwrap();
        let bag = random_matrix(5, 8, &mut rng);
        let before = m.clone();
        let r = grad_check(&mut m, &bag, &[1], 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(m, before);
    }

    #[test]
    fn doubled_gradient_fails() {
        let mut rng = Rng::new(13);
        let mut m = AttentionMil::init(8, 4, 2, &mut rng).unwrap();
        let bag = random_matrix(5, 8, &mut rng);
        let (_, mut g) = m.loss_and_grads(&bag, &[0]).unwrap();
        g.iter_mut().flatten().for_each(|v| *v *= 2.0);
        let r = grad_check_against(&mut m, &bag, &[0], &g, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = LinearProbe::zeros(2, 3);
        let x = Matrix::zeros(1, 3);
        assert!(grad_check_against(&mut m, &x, &[0], &[vec![0.0; 6]], 1e-4).is_err());
    }
}
