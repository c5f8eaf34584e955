//! Finite-difference verification of analytic gradients.

use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of `∇f` at `point`.
pub fn numerical_gradient<S, F>(f: F, point: &[S], h: S) -> Vec<S>
where
    S: Scalar,
    F: Fn(&[S]) -> S,
{
    let mut x = point.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Largest `|g_a − g_n| / max(1, |g_a|, |g_n|)` over all coordinates.
pub fn grad_check<S, F, G>(f: F, grad: G, point: &[S], h: S) -> S
where
    S: Scalar,
    F: Fn(&[S]) -> S,
    G: Fn(&[S]) -> Vec<S>,
{
    let analytic = grad(point);
    let numeric = numerical_gradient(f, point, h);
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / S::one().max(a.abs()).max(n.abs()))
        .fold(S::zero(), S::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::losses::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = DEFAULT_STEP;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |x: &[f64]| x.iter().map(|v| v * v).sum(),
            |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
            &[1.0, -2.0, 0.5],
            H,
        );
        assert!(err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let err = grad_check(|x: &[f64]| x[0] * x[0], |x: &[f64]| vec![x[0]], &[3.0], H);
        assert!(err > 0.1);
    }

    #[test]
    fn smooth_l1_example_point() {
        let target = [0.0, 0.0];
        let err = grad_check(
            |p: &[f64]| smooth_l1_loss(p, &target).unwrap(),
            |p: &[f64]| smooth_l1_grad(p, &target).unwrap(),
            &[0.3, 0.7],
            H,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_at_uniform_logits() {
        let err = grad_check(
            |z: &[f64]| softmax_cross_entropy(z, 1).unwrap(),
            |z: &[f64]| softmax_cross_entropy_grad(z, 1),
            &[0.0; 5],
            H,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn focal_at_random_interior_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target: Vec<f64> = (0..16)
            .map(|i| {
                if i == 5 {
                    1.0
                } else {
                    rng.gen_range(0.0..0.95)
                }
            })
            .collect();
        let pred: Vec<f64> = (0..16).map(|_| rng.gen_range(0.02..0.98)).collect();
        let err = grad_check(
            |p: &[f64]| focal_loss(p, &target, 2.0, 4.0).unwrap(),
            |p: &[f64]| focal_loss_grad(p, &target, 2.0, 4.0).unwrap(),
            &pred,
            H,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn seg_at_random_interior_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target: Vec<f64> = (0..20)
            .map(|_| f64::from(rng.gen_bool(0.3) as u8))
            .collect();
        let pred: Vec<f64> = (0..20).map(|_| rng.gen_range(0.02..0.98)).collect();
        let err = grad_check(
            |p: &[f64]| seg_loss(p, &target).unwrap(),
            |p: &[f64]| seg_loss_grad(p, &target).unwrap(),
            &pred,
            H,
        );
        assert!(err < 1e-4, "{err}");
    }
}
