//! The EM surrogate over policy parameters and its maximization.
//!
//! With the latent states smoothed under the current policy, the expected
//! complete-data log-likelihood of step `k` is
//!
//! ```text
//! L_k = -1/2 Tr{ Sigma°^-1 (Θ1 - Θ2 A°^T - A° Θ2^T + A° Θ3 A°^T) } - 1/2 log|Sigma°|
//! ```
//!
//! where the Θ are second moments of `ζ = (s_{k+1}, y_k)` and
//! `z = (s_k, a_k, 1)` and the action moments come from the candidate policy.
//! The cost observation is carried through the model's reward row, so its
//! residual is pure reward noise and only the `B_d` rows depend on the policy.
//! The result is a concave quadratic in `φ_k = (vec F, e, vec L)`:
//!
//! ```text
//! L_k(φ) = const - 1/4 φ^T D φ - 1/2 O^T φ,   D = diag(Z, Z_σ)
//! Z   = 2 [[G ⊗ W, ŝ ⊗ W], [ŝ^T ⊗ W, W]],     Z_σ = 2 W ⊗ I,
//! W   = B_d^T Sigma_d^-1 B_d
//! ```
//!
//! so the gradient is `-1/2 (D φ + O)` and the Hessian `-1/2 D`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticCost;
use crate::dynamics_fit::{LtvModel, LtvStep};
use crate::error::{Error, Result};
use crate::linalg::{
    check_len, cholesky, max_eigenvalue, min_eigenvalue, min_singular_value, spd_inverse,
    spd_log_det, symmetrize, vec_of,
};
use crate::policy::{PolicyParams, PolicyStep};
use crate::scalar::{lit, to_f64, Real};
use crate::smoother::{smooth, FilterOptions, SmoothedPosterior};

/// Smallest admissible singular value of `B_d`.
pub const RANK_TOL: f64 = 1e-8;
/// Largest admissible condition number of `Z` for the closed-form step.
pub const MAX_CONDITION: f64 = 1e12;

/// Second moments at one timestep, with `z = (s_k, a_k, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMoments<T: Real> {
    /// `E[ζ ζ^T]`, `(n_s+1) x (n_s+1)`.
    pub theta1: DMatrix<T>,
    /// `E[ζ z^T]`, `(n_s+1) x (n_s+n_a+1)`.
    pub theta2: DMatrix<T>,
    /// `E[z z^T]`, `(n_s+n_a+1) x (n_s+n_a+1)`.
    pub theta3: DMatrix<T>,
}

/// Θ blocks at 0-based step `k` for candidate policy step `policy`.
pub fn theta_moments<T: Real>(
    post: &SmoothedPosterior<T>,
    model: &LtvModel<T>,
    policy: &PolicyStep<T>,
    k: usize,
) -> Result<ThetaMoments<T>> {
    if k >= post.horizon() || k >= model.horizon() {
        return Err(Error::InvalidArgument(format!(
            "timestep {} outside horizon",
            k + 1
        )));
    }
    let st = &model.steps[k];
    let (n, na) = (st.n_s(), st.n_a());
    if policy.n_s() != n || policy.n_a() != na {
        return Err(Error::dim(
            "policy step",
            format!("{na}x{n}"),
            format!("{}x{}", policy.n_a(), policy.n_s()),
        ));
    }
    let s = &post.mean[k];
    let s_next = &post.mean[k + 1];
    let g = &post.second_moment[k];
    let g_next = &post.second_moment[k + 1];
    let m = &post.cross_moment[k];
    check_len(s, n, "smoothed mean")?;
    let (f, e) = (&policy.gain, &policy.offset);

    let a_mean = f * s + e;
    let e_sa = g * f.transpose() + s * e.transpose();
    let e_aa = symmetrize(
        &(f * g * f.transpose()
            + f * s * e.transpose()
            + e * s.transpose() * f.transpose()
            + e * e.transpose()
            + policy.covariance()),
    );

    let nz = n + na + 1;
    let mut theta3 = DMatrix::zeros(nz, nz);
    theta3.view_mut((0, 0), (n, n)).copy_from(g);
    theta3.view_mut((0, n), (n, na)).copy_from(&e_sa);
    theta3
        .view_mut((n, 0), (na, n))
        .copy_from(&e_sa.transpose());
    theta3.view_mut((n, n), (na, na)).copy_from(&e_aa);
    theta3.view_mut((0, n + na), (n, 1)).copy_from(s);
    theta3
        .view_mut((n + na, 0), (1, n))
        .copy_from(&s.transpose());
    theta3.view_mut((n, n + na), (na, 1)).copy_from(&a_mean);
    theta3
        .view_mut((n + na, n), (1, na))
        .copy_from(&a_mean.transpose());
    theta3[(n + na, n + na)] = T::one();

    // E[s_{k+1} z^T]; the action noise is independent of the states.
    let mut e_next_z = DMatrix::zeros(n, nz);
    e_next_z.view_mut((0, 0), (n, n)).copy_from(m);
    e_next_z
        .view_mut((0, n), (n, na))
        .copy_from(&(m * f.transpose() + s_next * e.transpose()));
    e_next_z.view_mut((0, n + na), (n, 1)).copy_from(s_next);

    // y = h z + w_r through the reward row.
    let mut h = DMatrix::zeros(1, nz);
    h.view_mut((0, 0), (1, n)).copy_from(&st.a_r);
    h.view_mut((0, n), (1, na)).copy_from(&st.b_r);
    h[(0, n + na)] = st.c_r;
    let e_yz = &h * &theta3;
    let e_next_y = &e_next_z * h.transpose();
    let e_yy = (&e_yz * h.transpose())[(0, 0)] + st.sigma_r;

    let mut theta1 = DMatrix::zeros(n + 1, n + 1);
    theta1.view_mut((0, 0), (n, n)).copy_from(g_next);
    theta1.view_mut((0, n), (n, 1)).copy_from(&e_next_y);
    theta1
        .view_mut((n, 0), (1, n))
        .copy_from(&e_next_y.transpose());
    theta1[(n, n)] = e_yy;
    let mut theta2 = DMatrix::zeros(n + 1, nz);
    theta2.view_mut((0, 0), (n, nz)).copy_from(&e_next_z);
    theta2.view_mut((n, 0), (1, nz)).copy_from(&e_yz);
    Ok(ThetaMoments {
        theta1,
        theta2,
        theta3,
    })
}

/// `L_k` from the Θ blocks.
pub fn surrogate_term<T: Real>(theta: &ThetaMoments<T>, step: &LtvStep<T>) -> Result<T> {
    let a = step.augmented_map();
    let cov = step.output_cov();
    let inv = spd_inverse(&cov, "output covariance diag(Sigma_d, Sigma_r)")?;
    let inner = &theta.theta1 - &theta.theta2 * a.transpose() - &a * theta.theta2.transpose()
        + &a * &theta.theta3 * a.transpose();
    let half: T = lit(0.5);
    Ok(-(inv * inner).trace() * half - spd_log_det(&cov, "output covariance")? * half)
}

/// `E[log N(s_1; mu_1, P_1) | Y]` without the `2π` constant.
pub fn initial_state_term<T: Real>(post: &SmoothedPosterior<T>, model: &LtvModel<T>) -> Result<T> {
    let mu = &model.mu1;
    let s = &post.mean[0];
    let inner =
        &post.second_moment[0] - s * mu.transpose() - mu * s.transpose() + mu * mu.transpose();
    let half: T = lit(0.5);
    Ok(-(spd_inverse(&model.p1, "P_1")? * inner).trace() * half
        - spd_log_det(&model.p1, "P_1")? * half)
}

/// `Σ_k L_k(φ_k) + E[log p(s_1)]`, the surrogate of a whole policy.
pub fn surrogate_value<T: Real>(
    post: &SmoothedPosterior<T>,
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
) -> Result<T> {
    let mut total = initial_state_term(post, model)?;
    for k in 0..model.horizon() {
        let th = theta_moments(post, model, policy.step(k), k)?;
        total += surrogate_term(&th, &model.steps[k]).map_err(|e| e.at_step(k + 1))?;
    }
    Ok(total)
}

/// Which surrogate terms a step's parameters enter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveScope {
    /// `φ_j` only shapes the action at step `j`, so only `L_j` depends on it.
    #[default]
    Local,
    /// `φ_j` is scored against every step's moments, `Σ_k L_k(φ_j)`.
    Pooled,
}

/// The quadratic surrogate of one step's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateQuadratic<T: Real> {
    pub n_s: usize,
    pub n_a: usize,
    /// `(vec F, vec F)` block.
    pub z1: DMatrix<T>,
    /// `(e, e)` block.
    pub z2: DMatrix<T>,
    /// `(vec F, e)` coupling block.
    pub z3: DMatrix<T>,
    /// `(vec L, vec L)` block.
    pub z_sigma: DMatrix<T>,
    /// Linear terms of `vec F` and `e`; the `vec L` term is identically zero.
    pub o1: DVector<T>,
    pub o2: DVector<T>,
    /// Value at `φ = 0`.
    pub constant: T,
    /// Per-step `2 ŝ ŝ^T ⊗ W`, kept for diagnostics.
    pub z1_mean_part: DMatrix<T>,
}

impl<T: Real> SurrogateQuadratic<T> {
    pub fn dim(&self) -> usize {
        PolicyStep::<T>::packed_len(self.n_s, self.n_a)
    }

    fn n_fe(&self) -> usize {
        self.n_a * self.n_s + self.n_a
    }

    /// `Z = [[Z1, Z3], [Z3^T, Z2]]`.
    pub fn z(&self) -> DMatrix<T> {
        let (nf, na) = (self.n_a * self.n_s, self.n_a);
        let mut z = DMatrix::zeros(nf + na, nf + na);
        z.view_mut((0, 0), (nf, nf)).copy_from(&self.z1);
        z.view_mut((0, nf), (nf, na)).copy_from(&self.z3);
        z.view_mut((nf, 0), (na, nf))
            .copy_from(&self.z3.transpose());
        z.view_mut((nf, nf), (na, na)).copy_from(&self.z2);
        z
    }

    /// `D = diag(Z, Z_σ)`.
    pub fn curvature(&self) -> DMatrix<T> {
        let (nfe, d) = (self.n_fe(), self.dim());
        let mut m = DMatrix::zeros(d, d);
        m.view_mut((0, 0), (nfe, nfe)).copy_from(&self.z());
        m.view_mut((nfe, nfe), (d - nfe, d - nfe))
            .copy_from(&self.z_sigma);
        m
    }

    /// `O`, with zeros in the `vec L` slots.
    pub fn linear(&self) -> DVector<T> {
        let nf = self.n_a * self.n_s;
        let mut o = DVector::zeros(self.dim());
        o.rows_mut(0, nf).copy_from(&self.o1);
        o.rows_mut(nf, self.n_a).copy_from(&self.o2);
        o
    }

    /// Surrogate value at packed `φ`.
    pub fn value(&self, phi: &DVector<T>) -> T {
        let d = self.curvature();
        self.constant
            - (phi.transpose() * d * phi)[0] * lit::<T>(0.25)
            - self.linear().dot(phi) * lit::<T>(0.5)
    }
}

/// Builds the quadratic of step `j` (0-based) from the smoothed moments.
pub fn assemble_quadratic<T: Real>(
    post: &SmoothedPosterior<T>,
    model: &LtvModel<T>,
    j: usize,
    scope: ObjectiveScope,
) -> Result<SurrogateQuadratic<T>> {
    let horizon = model.horizon();
    if j >= horizon || post.horizon() != horizon {
        return Err(Error::InvalidArgument(format!(
            "step {} outside horizon {horizon}",
            j + 1
        )));
    }
    let (n, na) = (model.n_s(), model.n_a());
    let ks: Vec<usize> = match scope {
        ObjectiveScope::Local => vec![j],
        ObjectiveScope::Pooled => (0..horizon).collect(),
    };
    let nf = n * na;
    let two: T = lit(2.0);
    let mut q = SurrogateQuadratic {
        n_s: n,
        n_a: na,
        z1: DMatrix::zeros(nf, nf),
        z2: DMatrix::zeros(na, na),
        z3: DMatrix::zeros(nf, na),
        z_sigma: DMatrix::zeros(na * na, na * na),
        o1: DVector::zeros(nf),
        o2: DVector::zeros(na),
        constant: T::zero(),
        z1_mean_part: DMatrix::zeros(nf, nf),
    };
    let zero_step = PolicyStep::zeros(n, na);
    for &k in &ks {
        let st = &model.steps[k];
        let sv = min_singular_value(&st.b_d);
        if !(sv >= lit(RANK_TOL)) {
            return Err(Error::RankDeficient {
                step: k + 1,
                min_singular: to_f64(sv),
            });
        }
        let sd_inv = spd_inverse(&st.sigma_d, "Sigma_d").map_err(|e| e.at_step(k + 1))?;
        let bt_si = st.b_d.transpose() * &sd_inv;
        let w = symmetrize(&(&bt_si * &st.b_d));
        let (s, s_next) = (&post.mean[k], &post.mean[k + 1]);
        let g = &post.second_moment[k];
        let c_mat = &bt_si * (&post.cross_moment[k] - &st.a_d * g - &st.c_d * s.transpose());
        let c_vec = &bt_si * (s_next - &st.a_d * s - &st.c_d);

        q.z1 += g.kronecker(&w) * two;
        q.z1_mean_part += (s * s.transpose()).kronecker(&w) * two;
        q.z3 += s.kronecker(&w) * two;
        q.z2 += &w * two;
        q.z_sigma += w.kronecker(&DMatrix::<T>::identity(na, na)) * two;
        q.o1 -= vec_of(&c_mat) * two;
        q.o2 -= c_vec * two;
        let th = theta_moments(post, model, &zero_step, k)?;
        q.constant += surrogate_term(&th, st).map_err(|e| e.at_step(k + 1))?;
    }
    q.z1 = symmetrize(&q.z1);
    q.z_sigma = symmetrize(&q.z_sigma);
    Ok(q)
}

/// Ascent gradient `-1/2 (D φ + O)`.
pub fn surrogate_gradient<T: Real>(q: &SurrogateQuadratic<T>, phi: &DVector<T>) -> DVector<T> {
    (q.curvature() * phi + q.linear()) * lit::<T>(-0.5)
}

/// Constant Hessian `-1/2 D`.
pub fn surrogate_hessian<T: Real>(q: &SurrogateQuadratic<T>) -> DMatrix<T> {
    q.curvature() * lit::<T>(-0.5)
}

/// The unique maximizer `φ* = -D^-1 O`; its covariance factor is exactly 0.
pub fn closed_form_step<T: Real>(q: &SurrogateQuadratic<T>) -> Result<PolicyStep<T>> {
    let z = q.z();
    let (lo, hi) = (min_eigenvalue(&z), max_eigenvalue(&z));
    let cond = if lo > T::zero() {
        to_f64(hi / lo)
    } else {
        f64::INFINITY
    };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition: cond });
    }
    let nfe = q.n_fe();
    let o = q.linear().rows(0, nfe).into_owned();
    let fe = cholesky(&z, "Z")?.solve(&(-o));
    let mut phi = DVector::zeros(q.dim());
    phi.rows_mut(0, nfe).copy_from(&fe);
    PolicyStep::unpack(phi.as_slice(), q.n_s, q.n_a)
}

/// Outcome of a bounded step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionStep<T: Real> {
    pub step: PolicyStep<T>,
    /// Length of the move in packed-parameter norm.
    pub length: T,
    /// Whether the radius was active.
    pub bounded: bool,
}

/// Maximizes the quadratic within `|φ - φ̂| <= radius` around `current`.
///
/// The subproblem `max g^T d - 1/2 d^T A d` with `A = D/2` is solved exactly
/// in the eigenbasis of `A` by bisection on the multiplier. Because the
/// `vec L` block has no linear term, its update is
/// `μ (A_σ + μ I)^-1 σ̂`, which never lengthens `σ̂`.
pub fn trust_region_step<T: Real>(
    q: &SurrogateQuadratic<T>,
    current: &PolicyStep<T>,
    radius: T,
) -> Result<TrustRegionStep<T>> {
    if !(radius > T::zero()) {
        return Err(Error::InvalidArgument(
            "trust radius must be positive".into(),
        ));
    }
    let phi = current.pack();
    let g = surrogate_gradient(q, &phi);
    let a = symmetrize(&(q.curvature() * lit::<T>(0.5)));
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::not_pd("surrogate curvature"));
    }
    let gt = eig.eigenvectors.transpose() * &g;
    let step_len = |mu: T| -> T {
        gt.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(gi, li)| (*gi / (*li + mu)).powi(2))
            .fold(T::zero(), |acc, v| acc + v)
            .sqrt()
    };
    let (mu, bounded) = if step_len(T::zero()) <= radius {
        (T::zero(), false)
    } else {
        let (mut lo, mut hi) = (T::zero(), g.norm() / radius);
        for _ in 0..200 {
            let mid = (lo + hi) * lit::<T>(0.5);
            if step_len(mid) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= hi * lit::<T>(1e-15) {
                break;
            }
        }
        (hi, true)
    };
    let scaled = DVector::from_iterator(
        gt.len(),
        gt.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(gi, li)| *gi / (*li + mu)),
    );
    let d = &eig.eigenvectors * scaled;
    let mut next = &phi + &d;
    // The σ block of the exact step is zero when the radius is inactive.
    if !bounded {
        let nfe = q.n_fe();
        let tail = next.len() - nfe;
        next.rows_mut(nfe, tail).fill(T::zero());
    }
    Ok(TrustRegionStep {
        step: PolicyStep::unpack(next.as_slice(), q.n_s, q.n_a)?,
        length: d.norm(),
        bounded,
    })
}

/// Options of a BFGS run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// Maximizes `f` by BFGS with an Armijo backtracking line search.
/// Returns the final point and iteration count.
pub fn bfgs_maximize<F, G>(
    f: F,
    grad: G,
    x0: &DVector<f64>,
    opts: BfgsOptions,
) -> (DVector<f64>, usize)
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    for it in 0..opts.max_iter {
        if g.norm() <= opts.grad_tol {
            return (x, it);
        }
        let mut p = &h * &g;
        if p.dot(&g) <= 0.0 {
            h = DMatrix::identity(n, n);
            p = g.clone();
        }
        let mut t = 1.0;
        let slope = p.dot(&g);
        let (x_new, f_new, g_new) = loop {
            let cand = &x + &p * t;
            let fc = f(&cand);
            let gc = grad(&cand);
            // Near an ill-conditioned optimum f stops resolving progress;
            // then a smaller gradient is the acceptance signal.
            let flat = (fc - fx).abs() <= 1e-13 * (1.0 + fx.abs());
            if fc >= fx + 1e-4 * t * slope || (flat && gc.norm() < g.norm()) || t < 1e-20 {
                break (cand, fc, gc);
            }
            t *= 0.5;
        };
        let s = &x_new - &x;
        // Ascent on f is descent on -f: y = -(g_new - g).
        let y = -(&g_new - &g);
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    (x, opts.max_iter)
}

/// How each per-step subproblem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSolver {
    /// Exact maximizer within a ball of the given radius around `φ̂_j`.
    TrustRegion { radius: f64 },
    /// The unconstrained maximizer; collapses the policy covariance to 0.
    ClosedForm,
}

impl Default for StepSolver {
    fn default() -> Self {
        StepSolver::TrustRegion { radius: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EmOptions {
    pub scope: ObjectiveScope,
    pub solver: StepSolver,
    pub filter: FilterOptions,
}

/// Result of one EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EmStep<T: Real> {
    pub policy: PolicyParams<T>,
    /// `L(φ̂^i, φ̂^i)` under the posterior of `φ̂^i`.
    pub surrogate_before: T,
    /// `L(φ̂^{i+1}, φ̂^i)` under the same posterior.
    pub surrogate_after: T,
    /// Smallest eigenvalue of the negated Hessian over all subproblems.
    pub min_neg_hessian_eig: T,
    /// Every per-step subproblem ended no lower than it started.
    pub subproblem_ascent: bool,
}

fn solve_subproblem<T: Real>(
    q: &SurrogateQuadratic<T>,
    current: &PolicyStep<T>,
    solver: StepSolver,
) -> Result<PolicyStep<T>> {
    match solver {
        StepSolver::ClosedForm => closed_form_step(q),
        StepSolver::TrustRegion { radius } => Ok(trust_region_step(q, current, lit(radius))?.step),
    }
}

fn objective_value<T: Real>(qs: &[SurrogateQuadratic<T>], policy: &PolicyParams<T>, init: T) -> T {
    qs.iter()
        .enumerate()
        .fold(init, |acc, (j, q)| acc + q.value(&policy.step(j).pack()))
}

fn ascent_tol<T: Real>(v: T) -> T {
    lit::<T>(1e-9) * (T::one() + v.abs())
}

/// Independent per-step maximization against one fixed posterior; the
/// subproblems run in parallel.
pub fn soc_em_ii<T: Real>(
    post: &SmoothedPosterior<T>,
    model: &LtvModel<T>,
    current: &PolicyParams<T>,
    opts: &EmOptions,
) -> Result<EmStep<T>> {
    if current.horizon() != model.horizon() {
        return Err(Error::dim(
            "policy horizon",
            model.horizon(),
            current.horizon(),
        ));
    }
    let solved: Vec<(SurrogateQuadratic<T>, PolicyStep<T>)> = (0..model.horizon())
        .into_par_iter()
        .map(|j| {
            let q = assemble_quadratic(post, model, j, opts.scope)?;
            let step =
                solve_subproblem(&q, current.step(j), opts.solver).map_err(|e| e.at_step(j + 1))?;
            Ok((q, step))
        })
        .collect::<Result<Vec<_>>>()?;
    let (qs, steps): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let policy = PolicyParams::new(steps)?;
    let init = initial_state_term(post, model)?;
    let before = objective_value(&qs, current, init);
    let after = objective_value(&qs, &policy, init);
    let subproblem_ascent = qs.iter().enumerate().all(|(j, q)| {
        let (b, a) = (
            q.value(&current.step(j).pack()),
            q.value(&policy.step(j).pack()),
        );
        a >= b - ascent_tol(b)
    });
    Ok(EmStep {
        policy,
        surrogate_before: before,
        surrogate_after: after,
        min_neg_hessian_eig: min_neg_hessian(&qs),
        subproblem_ascent,
    })
}

fn min_neg_hessian<T: Real>(qs: &[SurrogateQuadratic<T>]) -> T {
    qs.iter()
        .map(|q| min_eigenvalue(&(q.curvature() * lit::<T>(0.5))))
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Sequential sweep: before step `j` is maximized the states are re-smoothed
/// under the policy whose first `j-1` steps are already updated.
pub fn soc_em_i<T: Real>(
    model: &LtvModel<T>,
    current: &PolicyParams<T>,
    observations: &[T],
    opts: &EmOptions,
) -> Result<EmStep<T>> {
    if current.horizon() != model.horizon() {
        return Err(Error::dim(
            "policy horizon",
            model.horizon(),
            current.horizon(),
        ));
    }
    let post0 = smooth(model, current, observations, opts.filter)?;
    let mut working = current.clone();
    let mut qs0 = Vec::with_capacity(model.horizon());
    let mut subproblem_ascent = true;
    let mut min_eig = T::max_value().unwrap();
    for j in 0..model.horizon() {
        let post = if j == 0 {
            post0.clone()
        } else {
            smooth(model, &working, observations, opts.filter)?
        };
        let q = assemble_quadratic(&post, model, j, opts.scope)?;
        let step =
            solve_subproblem(&q, working.step(j), opts.solver).map_err(|e| e.at_step(j + 1))?;
        let (b, a) = (q.value(&working.step(j).pack()), q.value(&step.pack()));
        subproblem_ascent &= a >= b - ascent_tol(b);
        min_eig = min_eig.min(min_eigenvalue(&(q.curvature() * lit::<T>(0.5))));
        working.replace_step(j, step)?;
        qs0.push(assemble_quadratic(&post0, model, j, opts.scope)?);
    }
    let init = initial_state_term(&post0, model)?;
    Ok(EmStep {
        surrogate_before: objective_value(&qs0, current, init),
        surrogate_after: objective_value(&qs0, &working, init),
        policy: working,
        min_neg_hessian_eig: min_eig,
        subproblem_ascent,
    })
}

/// Expected cumulative cost under the smoothed state marginals, with the
/// actions drawn from `policy`.
pub fn expected_cost_exact<T: Real>(
    post: &SmoothedPosterior<T>,
    policy: &PolicyParams<T>,
    cost: &QuadraticCost<T>,
) -> T {
    let mut total = T::zero();
    for (k, st) in policy.steps().iter().enumerate() {
        let (s, p) = (&post.mean[k], &post.cov[k]);
        let ds = s - cost.s_star();
        let a = st.mean_action(s);
        let da = &a - cost.a_star();
        let var_a = &st.gain * p * st.gain.transpose() + st.covariance();
        total += (ds.transpose() * cost.q_s() * &ds)[0]
            + (cost.q_s() * p).trace()
            + (da.transpose() * cost.q_a() * &da)[0]
            + (cost.q_a() * var_a).trace();
    }
    total
}

/// Monte-Carlo estimate of the same expectation and its standard error.
/// States are drawn from the smoothed marginals; passing the same `rng`
/// seed for two policies gives common random numbers.
pub fn expected_cost_mc<T: Real, R: Rng + ?Sized>(
    post: &SmoothedPosterior<T>,
    policy: &PolicyParams<T>,
    cost: &QuadraticCost<T>,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let factors = post
        .cov
        .iter()
        .take(policy.horizon())
        .map(|p| crate::linalg::floor_eigenvalues(p, T::zero()))
        .map(|p| {
            let eig = SymmetricEigen::new(p);
            &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(T::zero()).sqrt()))
        })
        .collect::<Vec<_>>();
    let (n, na) = (policy.n_s(), policy.n_a());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut total = 0.0;
        for (k, st) in policy.steps().iter().enumerate() {
            let z = DVector::<T>::from_fn(n, |_, _| lit(rng.sample::<f64, _>(StandardNormal)));
            let w = DVector::<T>::from_fn(na, |_, _| lit(rng.sample::<f64, _>(StandardNormal)));
            let s = &post.mean[k] + &factors[k] * z;
            let a = st.mean_action(&s) + st.cov_sqrt.transpose() * w;
            total += to_f64(cost.instantaneous(&s, &a)?);
        }
        sum += total;
        sum_sq += total * total;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok((mean, (var / m).sqrt()))
}

/// Per-iteration covariance trace sums and their increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// `Σ_k Tr(Sigma_k^i)`, which equals the sum of singular values.
    pub trace_sums: Vec<f64>,
    /// Iterations `i` with `sum_i > sum_{i-1} + tol`.
    pub violations: Vec<usize>,
}

pub fn covariance_decay_report<T: Real>(history: &[PolicyParams<T>], tol: f64) -> DecayReport {
    let trace_sums: Vec<f64> = history
        .iter()
        .map(|p| to_f64(p.covariance_trace_sum()))
        .collect();
    let violations = trace_sums
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + tol)
        .map(|(i, _)| i + 1)
        .collect();
    DecayReport {
        trace_sums,
        violations,
    }
}

/// One row of the EM diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub iteration: usize,
    pub surrogate: f64,
    pub expected_cost: f64,
    pub trace_sum: f64,
    pub min_eig_neg_hessian: f64,
}

pub fn write_diagnostics_csv<W: std::io::Write>(rows: &[EmDiagnostics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
