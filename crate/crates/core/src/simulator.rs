//! Planar point mass with gravity, linear damping and noisy state sensing.
//!
//! State layout `x = (p_x, p_y, v_x, v_y)`, action is a 2D force.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cost::{observed_cost, QuadraticCost};
use crate::dynamics_fit::{EpisodeData, Transition};
use crate::error::{Error, Result};
use crate::linalg::check_len;
use crate::policy::{sample_action, PolicyParams, SampleMode};
use crate::scalar::{lit, to_f64, Real};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    default,
    deny_unknown_fields,
    bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>")
)]
pub struct PlantConfig<T: Real> {
    pub mass: T,
    pub gravity: [T; 2],
    pub damping: T,
    pub dt: T,
    /// Sensor-noise standard deviation.
    pub rho: T,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Initial true state.
    pub x0: [T; 4],
}

impl<T: Real> Default for PlantConfig<T> {
    fn default() -> Self {
        Self {
            mass: T::one(),
            gravity: [T::zero(), lit(-9.8)],
            damping: lit(0.5),
            dt: lit(0.1),
            rho: lit(0.3),
            horizon: 30,
            x0: [T::zero(), lit(5.0), T::zero(), T::zero()],
        }
    }
}

impl<T: Real> PlantConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero())
            || !(self.mass > T::zero())
            || !(self.rho >= T::zero())
            || self.horizon == 0
        {
            return Err(Error::InvalidArgument(
                "plant requires dt > 0, mass > 0, rho >= 0 and T >= 1".into(),
            ));
        }
        if self.damping < T::zero() {
            return Err(Error::InvalidArgument("damping must be >= 0".into()));
        }
        Ok(())
    }

    pub fn x0(&self) -> DVector<T> {
        DVector::from_column_slice(&self.x0)
    }

    /// Exact one-step linear map of [`step`]: `x' = A x + B a + c`.
    pub fn discretization(&self) -> (DMatrix<T>, DMatrix<T>, DVector<T>) {
        let (dt, k) = (self.dt, self.damping);
        let decay = T::one() - dt * k;
        let mut a = DMatrix::identity(4, 4);
        let mut b = DMatrix::zeros(4, 2);
        let mut c = DVector::zeros(4);
        for i in 0..2 {
            a[(i + 2, i + 2)] = decay;
            a[(i, i + 2)] = dt * decay;
            b[(i + 2, i)] = dt / self.mass;
            b[(i, i)] = dt * dt / self.mass;
            c[i + 2] = dt * self.gravity[i];
            c[i] = dt * dt * self.gravity[i];
        }
        (a, b, c)
    }
}

/// Semi-implicit Euler: velocity first, then position with the new velocity.
pub fn step<T: Real>(x: &DVector<T>, a: &DVector<T>, cfg: &PlantConfig<T>) -> Result<DVector<T>> {
    check_len(x, STATE_DIM, "plant state")?;
    check_len(a, ACTION_DIM, "plant action")?;
    if x.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite plant state or action".into(),
        ));
    }
    let p = Vector2::new(x[0], x[1]);
    let v = Vector2::new(x[2], x[3]);
    let g = Vector2::new(cfg.gravity[0], cfg.gravity[1]);
    let force = Vector2::new(a[0], a[1]);
    let v_next = v + (force / cfg.mass + g - v * cfg.damping) * cfg.dt;
    let p_next = p + v_next * cfg.dt;
    Ok(DVector::from_vec(vec![
        p_next.x, p_next.y, v_next.x, v_next.y,
    ]))
}

/// `x + N(0, rho^2 I)`.
pub fn measure<T: Real, R: Rng + ?Sized>(x: &DVector<T>, rho: T, rng: &mut R) -> DVector<T> {
    if rho == T::zero() {
        return x.clone();
    }
    x + DVector::from_fn(x.len(), |_, _| {
        lit::<T>(rng.sample::<f64, _>(StandardNormal)) * rho
    })
}

/// One episode; `states` and `measured` have `T+1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T: Real> {
    pub states: Vec<DVector<T>>,
    pub measured: Vec<DVector<T>>,
    pub actions: Vec<DVector<T>>,
    pub costs: Vec<T>,
    pub observed: Vec<T>,
}

impl<T: Real> Rollout<T> {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().map(|c| to_f64(*c)).sum()
    }

    /// Running sum of the stage costs.
    pub fn cumulative_costs(&self) -> Vec<f64> {
        self.costs
            .iter()
            .scan(0.0, |acc, c| {
                *acc += to_f64(*c);
                Some(*acc)
            })
            .collect()
    }

    /// Appends this episode's tuples to `data` (as a new experiment).
    pub fn append_to(&self, data: &mut EpisodeData<T>) -> Result<()> {
        for k in 0..self.actions.len() {
            data.push(
                k,
                Transition {
                    s: self.measured[k].clone(),
                    a: self.actions[k].clone(),
                    s_next: self.measured[k + 1].clone(),
                    y: self.observed[k],
                },
            )?;
        }
        Ok(())
    }
}

/// Noise is drawn for a step unless its covariance factor is exactly zero.
fn mode_for<T: Real>(policy: &PolicyParams<T>, k: usize, mode: SampleMode) -> SampleMode {
    if mode == SampleMode::Stochastic && policy.step(k).cov_sqrt.iter().all(|v| *v == T::zero()) {
        SampleMode::Deterministic
    } else {
        mode
    }
}

/// Runs the plant under `policy`, which acts on the measured state.
pub fn run_episode<T: Real, R: Rng + ?Sized>(
    cfg: &PlantConfig<T>,
    policy: &PolicyParams<T>,
    cost: &QuadraticCost<T>,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Rollout<T>> {
    cfg.validate()?;
    if policy.horizon() != cfg.horizon {
        return Err(Error::dim("policy horizon", cfg.horizon, policy.horizon()));
    }
    let mut x = cfg.x0();
    let mut s = measure(&x, cfg.rho, rng);
    let mut out = Rollout {
        states: vec![x.clone()],
        measured: vec![s.clone()],
        actions: Vec::with_capacity(cfg.horizon),
        costs: Vec::with_capacity(cfg.horizon),
        observed: Vec::with_capacity(cfg.horizon),
    };
    for k in 0..cfg.horizon {
        let a = sample_action(policy.step(k), &s, mode_for(policy, k, mode), rng, k + 1)?;
        let y_cost = cost.instantaneous(&s, &a)?;
        out.costs.push(y_cost);
        out.observed.push(observed_cost(y_cost)?);
        x = step(&x, &a, cfg).map_err(|e| e.at_step(k + 1))?;
        s = measure(&x, cfg.rho, rng);
        out.actions.push(a);
        out.states.push(x.clone());
        out.measured.push(s.clone());
    }
    Ok(out)
}
