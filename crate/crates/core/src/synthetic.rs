//! Random well-posed models and policies for tests and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics_fit::{LtvModel, LtvStep};
use crate::policy::{PolicyParams, PolicyStep};

/// A stable-ish random model with PD noise and a policy with a random,
/// generally full-rank covariance factor.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: usize,
    n: usize,
    na: usize,
) -> (LtvModel<f64>, PolicyParams<f64>) {
    let mut g = || rng.random_range(-1.0..1.0);
    let spd = |d: usize, scale: f64, g: &mut dyn FnMut() -> f64| {
        let m = DMatrix::from_fn(d, d, |_, _| g());
        &m * m.transpose() * scale + DMatrix::identity(d, d) * (0.1 * scale)
    };
    let steps = (0..horizon)
        .map(|_| LtvStep {
            a_d: DMatrix::from_fn(n, n, |_, _| g() * 0.8),
            b_d: DMatrix::from_fn(n, na, |_, _| g()),
            c_d: DVector::from_fn(n, |_, _| g()),
            a_r: DMatrix::from_fn(1, n, |_, _| g()),
            b_r: DMatrix::from_fn(1, na, |_, _| g()),
            c_r: g(),
            sigma_d: spd(n, 0.2, &mut g),
            sigma_r: 0.05 + g().abs() * 0.2,
        })
        .collect();
    let model = LtvModel {
        steps,
        mu1: DVector::from_fn(n, |_, _| g()),
        p1: spd(n, 0.5, &mut g),
    };
    let psteps = (0..horizon)
        .map(|_| {
            PolicyStep::new(
                DMatrix::from_fn(na, n, |_, _| g() * 0.5),
                DVector::from_fn(na, |_, _| g()),
                DMatrix::from_fn(na, na, |_, _| g() * 0.4),
            )
            .unwrap()
        })
        .collect();
    (model, PolicyParams::new(psteps).unwrap())
}
