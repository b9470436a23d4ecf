//! Quadratic running cost and its exponential transform into a cost
//! observation `y = exp(-Y)` in `(0, 1]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, check_len, check_square, min_eigenvalue};
use crate::scalar::{lit, Real};

/// Costs above this are clipped before exponentiation so `exp(-Y)` never
/// underflows to exactly zero.
pub const MAX_COST: f64 = 700.0;

/// Default exponential-rate parameter of the cost law.
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// `Y(s, a) = (s - s*)^T Q_s (s - s*) + (a - a*)^T Q_a (a - a*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T: Real> {
    q_s: DMatrix<T>,
    q_a: DMatrix<T>,
    s_star: DVector<T>,
    a_star: DVector<T>,
}

impl<T: Real> QuadraticCost<T> {
    /// Validates dimensions, symmetry (to 1e-12) and positive definiteness.
    pub fn new(
        q_s: DMatrix<T>,
        q_a: DMatrix<T>,
        s_star: DVector<T>,
        a_star: DVector<T>,
    ) -> Result<Self> {
        let n_s = s_star.len();
        let n_a = a_star.len();
        check_square(&q_s, n_s, "Q_s")?;
        check_square(&q_a, n_a, "Q_a")?;
        for (m, name) in [(&q_s, "Q_s"), (&q_a, "Q_a")] {
            if asymmetry(m) > 1e-12 {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
            if min_eigenvalue(m) <= T::zero() {
                return Err(Error::not_pd(name));
            }
        }
        Ok(Self {
            q_s,
            q_a,
            s_star,
            a_star,
        })
    }

    pub fn q_s(&self) -> &DMatrix<T> {
        &self.q_s
    }

    pub fn q_a(&self) -> &DMatrix<T> {
        &self.q_a
    }

    pub fn s_star(&self) -> &DVector<T> {
        &self.s_star
    }

    pub fn a_star(&self) -> &DVector<T> {
        &self.a_star
    }

    pub fn n_s(&self) -> usize {
        self.s_star.len()
    }

    pub fn n_a(&self) -> usize {
        self.a_star.len()
    }

    /// Instantaneous cost of a state/action pair; always `>= 0`.
    pub fn instantaneous(&self, s: &DVector<T>, a: &DVector<T>) -> Result<T> {
        check_len(s, self.n_s(), "state s")?;
        check_len(a, self.n_a(), "action a")?;
        let ds = s - &self.s_star;
        let da = a - &self.a_star;
        let y = ds.dot(&(&self.q_s * &ds)) + da.dot(&(&self.q_a * &da));
        Ok(y.max(T::zero()))
    }
}

/// Free-function form of [`QuadraticCost::instantaneous`].
pub fn instantaneous_cost<T: Real>(
    s: &DVector<T>,
    a: &DVector<T>,
    cost: &QuadraticCost<T>,
) -> Result<T> {
    cost.instantaneous(s, a)
}

/// `y = exp(-min(Y, MAX_COST))`.
pub fn observed_cost<T: Real>(y_cost: T) -> Result<T> {
    if !(y_cost >= T::zero()) {
        return Err(Error::InvalidArgument(
            "cost must be nonnegative and finite to form an observation".into(),
        ));
    }
    Ok((-y_cost.min(lit(MAX_COST))).exp())
}

/// Exponential law of the running cost, `p(Y) = lambda * exp(-lambda Y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostObservationLaw<T: Real> {
    lambda: T,
}

impl<T: Real> CostObservationLaw<T> {
    pub fn new(lambda: T) -> Result<Self> {
        if !(lambda > T::one()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 1, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    /// Density of `y = exp(-Y)`: `lambda * y^(lambda - 1)` on `(0, 1]`.
    pub fn pdf(&self, y: T) -> Result<T> {
        check_unit_interval(y)?;
        Ok(self.lambda * y.powf(self.lambda - T::one()))
    }

    /// Distribution function `y^lambda` on `(0, 1]`.
    pub fn cdf(&self, y: T) -> Result<T> {
        check_unit_interval(y)?;
        Ok(y.powf(self.lambda))
    }
}

impl<T: Real> Default for CostObservationLaw<T> {
    fn default() -> Self {
        Self {
            lambda: lit(DEFAULT_LAMBDA),
        }
    }
}

fn check_unit_interval<T: Real>(y: T) -> Result<()> {
    if !(y > T::zero() && y <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "cost observation must lie in (0, 1], got {y}"
        )));
    }
    Ok(())
}

/// Free-function form of [`CostObservationLaw::pdf`].
pub fn observed_cost_pdf<T: Real>(y: T, law: &CostObservationLaw<T>) -> Result<T> {
    law.pdf(y)
}
