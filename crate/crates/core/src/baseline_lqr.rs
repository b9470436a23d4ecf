//! Finite-horizon LQR on the fitted affine dynamics, used to initialize EM.
//!
//! Cost-to-go is kept as `J_k(s) = s^T V_k s + 2 v_k^T s + c_k`. The stage
//! cost is the quadratic cost of `(s_k, a_k)`; a terminal cost on `s_{T+1}`
//! with weight `Q_s` pulls the final state to the target.

use nalgebra::{DMatrix, DVector};

use crate::cost::QuadraticCost;
use crate::dynamics_fit::LtvModel;
use crate::error::{Error, Result};
use crate::linalg::{check_square, cholesky, symmetrize};
use crate::policy::{PolicyParams, PolicyStep};
use crate::scalar::Real;

/// Backward-pass output; every vector is indexed by 0-based timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiPass<T: Real> {
    /// `V_k`, `k = 1..T+1`.
    pub value_matrix: Vec<DMatrix<T>>,
    /// `v_k`, `k = 1..T+1`.
    pub value_vector: Vec<DVector<T>>,
    /// `c_k`, `k = 1..T+1`, including the expected noise contribution.
    pub value_constant: Vec<T>,
    /// `K_k`, `k = 1..T`.
    pub gains: Vec<DMatrix<T>>,
    /// `k_k`, `k = 1..T`.
    pub offsets: Vec<DVector<T>>,
}

impl<T: Real> RiccatiPass<T> {
    /// Expected cost-to-go from `s_1 ~ N(mu, p)` under the LQR policy.
    pub fn expected_cost(&self, mu: &DVector<T>, p: &DMatrix<T>) -> T {
        let v = &self.value_matrix[0];
        (mu.transpose() * v * mu)[0]
            + (v * p).trace()
            + self.value_vector[0].dot(mu) * (T::one() + T::one())
            + self.value_constant[0]
    }
}

/// Options of the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrOptions<T: Real> {
    /// Weight on `s_{T+1} - s*`; `None` uses `Q_s`.
    pub terminal_weight: Option<DMatrix<T>>,
}

impl<T: Real> Default for LqrOptions<T> {
    fn default() -> Self {
        Self {
            terminal_weight: None,
        }
    }
}

pub fn lqr_backward<T: Real>(
    model: &LtvModel<T>,
    cost: &QuadraticCost<T>,
    opts: &LqrOptions<T>,
) -> Result<RiccatiPass<T>> {
    let horizon = model.horizon();
    let (n, na) = (model.n_s(), model.n_a());
    if cost.n_s() != n || cost.n_a() != na {
        return Err(Error::dim(
            "cost dimensions",
            format!("({n}, {na})"),
            format!("({}, {})", cost.n_s(), cost.n_a()),
        ));
    }
    let (qs, qa, ss, as_) = (cost.q_s(), cost.q_a(), cost.s_star(), cost.a_star());
    let qf = opts.terminal_weight.clone().unwrap_or_else(|| qs.clone());
    check_square(&qf, n, "terminal weight")?;

    let mut vm = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut vv = vec![DVector::zeros(n); horizon + 1];
    let mut vc = vec![T::zero(); horizon + 1];
    let mut gains = vec![DMatrix::zeros(na, n); horizon];
    let mut offsets = vec![DVector::zeros(na); horizon];
    vm[horizon] = qf.clone();
    vv[horizon] = -(&qf * ss);
    vc[horizon] = (ss.transpose() * &qf * ss)[0];
    for k in (0..horizon).rev() {
        let st = &model.steps[k];
        let (a, b, c) = (&st.a_d, &st.b_d, &st.c_d);
        let v = &vm[k + 1].clone();
        let vcv = v * c + &vv[k + 1];
        let q_ss = qs + a.transpose() * v * a;
        let q_aa = symmetrize(&(qa + b.transpose() * v * b));
        let q_as = b.transpose() * v * a;
        let h_s = -(qs * ss) + a.transpose() * &vcv;
        let h_a = -(qa * as_) + b.transpose() * &vcv;
        let chol =
            cholesky(&q_aa, "control Hessian Q_a + B_d^T V B_d").map_err(|e| e.at_step(k + 1))?;
        let gain = -chol.solve(&q_as);
        let off = -chol.solve(&h_a);
        vm[k] = symmetrize(&(&q_ss + q_as.transpose() * &gain));
        vv[k] = &h_s + q_as.transpose() * &off;
        let stage = (ss.transpose() * qs * ss)[0] + (as_.transpose() * qa * as_)[0];
        let prop = (c.transpose() * v * c)[0]
            + vv[k + 1].dot(c) * (T::one() + T::one())
            + (v * &st.sigma_d).trace();
        vc[k] = vc[k + 1] + stage + prop + h_a.dot(&off);
        gains[k] = gain;
        offsets[k] = off;
    }
    Ok(RiccatiPass {
        value_matrix: vm,
        value_vector: vv,
        value_constant: vc,
        gains,
        offsets,
    })
}

/// `F_k = K_k`, `e_k = k_k`, `L_k = exploration_sigma * I`.
pub fn make_phi0<T: Real>(pass: &RiccatiPass<T>, exploration_sigma: T) -> Result<PolicyParams<T>> {
    if exploration_sigma < T::zero() {
        return Err(Error::InvalidArgument(
            "exploration_sigma must be >= 0".into(),
        ));
    }
    let steps = pass
        .gains
        .iter()
        .zip(&pass.offsets)
        .map(|(g, o)| {
            let na = o.len();
            PolicyStep::new(
                g.clone(),
                o.clone(),
                DMatrix::identity(na, na) * exploration_sigma,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    PolicyParams::new(steps)
}
