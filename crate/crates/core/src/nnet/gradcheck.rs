//! Central finite-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamStore};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub tensors: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `loss`'s analytic gradient with central differences of step
/// `epsilon`. Every tensor is checked; tensors larger than
/// `max_coords_per_tensor` are checked at a seeded random subset.
pub fn grad_check<F>(params: &ParamStore, loss: F, epsilon: f64, max_coords_per_tensor: usize) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    let (_, analytic) = loss(params);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tensors: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        report.tensors += 1;
        for idx in coords {
            let original = tensor.data()[idx];
            probe.get_mut(name).expect("same names").data_mut()[idx] = original + epsilon;
            let (plus, _) = loss(&probe);
            probe.get_mut(name).expect("same names").data_mut()[idx] = original - epsilon;
            let (minus, _) = loss(&probe);
            probe.get_mut(name).expect("same names").data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic.get(name).map(|g| g.data()[idx]).unwrap_or(0.0);
            let err = relative_error(exact, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::matrix::Matrix;

    #[test]
    fn exact_gradient_passes_and_wrong_one_fails() {
        let mut params = ParamStore::new();
        params.insert("w", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let quad = |p: &ParamStore| {
            let w = p.get("w").unwrap();
            let mut g = ParamStore::new();
            g.insert("w", w.map(|v| 2.0 * v));
            (w.sum_sq(), g)
        };
        assert!(grad_check(&params, quad, 1e-5, 10).max_rel_error < 1e-8);
        let wrong = |p: &ParamStore| {
            let (v, mut g) = quad(p);
            g.get_mut("w").unwrap().data_mut()[1] += 0.1;
            (v, g)
        };
        let report = grad_check(&params, wrong, 1e-5, 10);
        assert!(report.max_rel_error > 1e-2);
        assert_eq!(report.worst, Some(("w".to_string(), 1)));
    }
}
