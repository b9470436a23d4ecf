//! Closed-loop Kalman filter and Rauch-Tung-Striebel smoother conditioned on
//! the scalar cost observations.
//!
//! Under a policy `a = F s + e + L^T w` the fitted model becomes
//!
//! ```text
//! s_{k+1} = Ad~ s_k + B_d e + c_d + B_d L^T w + w_d
//! y_k     = Ar~ s_k + B_r e + c_r + B_r L^T w + w_r
//! ```
//!
//! so the process and observation noises share the policy term and are
//! correlated through `C = B_d Sigma B_r^T`. The filter keeps that coupling;
//! dropping it would make the recursions disagree with exact conditioning
//! whenever the policy is stochastic.
//!
//! Indexing: states are `s_1 .. s_{T+1}` (stored 0-based, `T+1` entries),
//! observations `y_1 .. y_T`. The "filtered" state `š_{k|k}` is the law of
//! `s_k` given `y_1 .. y_{k-1}`: `y_k` is emitted at the same step as `a_k`,
//! so it is only informative about `s_k` jointly with the transition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics_fit::{LtvModel, LtvStep};
use crate::error::{Error, Result};
use crate::linalg::{check_len, check_square, cholesky, min_eigenvalue, symmetrize, to_rows};
use crate::policy::{PolicyParams, PolicyStep};
use crate::scalar::{lit, to_f64, Real};

/// Closed-loop matrices of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStep<T: Real> {
    /// `A_d + B_d F`.
    pub ad: DMatrix<T>,
    /// `A_r + B_r F` (`1 x n_s`).
    pub ar: DMatrix<T>,
    /// `B_d Sigma B_d^T + Sigma_d`.
    pub sigma_d: DMatrix<T>,
    /// `B_r Sigma B_r^T + Sigma_r`.
    pub sigma_r: T,
    /// `B_d Sigma B_r^T`, covariance between the two noise terms.
    pub cross: DVector<T>,
    /// `B_d e + c_d`.
    pub drift_d: DVector<T>,
    /// `B_r e + c_r`.
    pub drift_r: T,
}

/// Closes the loop of one model step around one policy step.
pub fn augment<T: Real>(model: &LtvStep<T>, policy: &PolicyStep<T>) -> Result<ClosedLoopStep<T>> {
    if policy.n_s() != model.n_s() {
        return Err(Error::dim("policy gain columns", model.n_s(), policy.n_s()));
    }
    if policy.n_a() != model.n_a() {
        return Err(Error::dim(
            "policy action dimension",
            model.n_a(),
            policy.n_a(),
        ));
    }
    let sigma = policy.covariance();
    let br_e = (&model.b_r * &policy.offset)[0];
    Ok(ClosedLoopStep {
        ad: &model.a_d + &model.b_d * &policy.gain,
        ar: &model.a_r + &model.b_r * &policy.gain,
        sigma_d: symmetrize(&(&model.b_d * &sigma * model.b_d.transpose() + &model.sigma_d)),
        sigma_r: (&model.b_r * &sigma * model.b_r.transpose())[(0, 0)] + model.sigma_r,
        cross: &model.b_d * &sigma * model.b_r.transpose().column(0),
        drift_d: &model.b_d * &policy.offset + &model.c_d,
        drift_r: br_e + model.c_r,
    })
}

/// Closes the loop over the whole horizon.
pub fn augment_all<T: Real>(
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
) -> Result<Vec<ClosedLoopStep<T>>> {
    if model.horizon() != policy.horizon() {
        return Err(Error::dim(
            "policy horizon",
            model.horizon(),
            policy.horizon(),
        ));
    }
    model
        .steps
        .iter()
        .zip(policy.steps())
        .enumerate()
        .map(|(k, (m, p))| augment(m, p).map_err(|e| e.at_step(k + 1)))
        .collect()
}

/// Filter options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Propagate Cholesky factors through an orthogonal (QR) array update
    /// instead of full covariances.
    pub square_root: bool,
}

/// Forward pass output.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct FilterState<T: Real> {
    /// `š_{k|k}`, law of `s_k` given `y_1..y_{k-1}`, for `k = 1..T+1`.
    pub filtered_mean: Vec<DVector<T>>,
    pub filtered_cov: Vec<DMatrix<T>>,
    /// `š_{k+1|k}` before the observation update, for `k = 1..T`.
    pub predicted_mean: Vec<DVector<T>>,
    pub predicted_cov: Vec<DMatrix<T>>,
    /// `Ǩ_{k+1}` (`n_s`), for `k = 1..T`.
    pub gain: Vec<DVector<T>>,
    /// Innovation variance of `y_k`.
    pub innovation_var: Vec<T>,
    /// Innovation `y_k - Ar~ š_{k|k} - B_r e - c_r`.
    pub innovation: Vec<T>,
}

/// Runs the closed-loop filter from `s_1 ~ N(s1, p1)`.
pub fn kalman_filter<T: Real>(
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
    observations: &[T],
    s1: &DVector<T>,
    p1: &DMatrix<T>,
    opts: FilterOptions,
) -> Result<FilterState<T>> {
    let cl = augment_all(model, policy)?;
    filter_closed_loop(&cl, observations, s1, p1, opts)
}

/// Filter on precomputed closed-loop steps.
pub fn filter_closed_loop<T: Real>(
    cl: &[ClosedLoopStep<T>],
    observations: &[T],
    s1: &DVector<T>,
    p1: &DMatrix<T>,
    opts: FilterOptions,
) -> Result<FilterState<T>> {
    let horizon = cl.len();
    let n = s1.len();
    if observations.len() != horizon {
        return Err(Error::dim("cost observations", horizon, observations.len()));
    }
    check_square(p1, n, "P_1")?;
    let mut out = FilterState {
        filtered_mean: vec![s1.clone()],
        filtered_cov: vec![symmetrize(p1)],
        predicted_mean: Vec::with_capacity(horizon),
        predicted_cov: Vec::with_capacity(horizon),
        gain: Vec::with_capacity(horizon),
        innovation_var: Vec::with_capacity(horizon),
        innovation: Vec::with_capacity(horizon),
    };
    // Upper factor U with P = U^T U, used in square-root mode.
    let mut factor = if opts.square_root {
        Some(upper_factor(p1, "P_1")?)
    } else {
        None
    };
    for (k, st) in cl.iter().enumerate() {
        check_square(&st.ad, n, "closed-loop A_d").map_err(|e| e.at_step(k + 1))?;
        let m = &out.filtered_mean[k];
        let p = &out.filtered_cov[k];
        let pred = &st.ad * m + &st.drift_d;
        let innov = observations[k] - (&st.ar * m)[0] - st.drift_r;

        let (pred_cov, s, gain, next_cov) = match factor.as_mut() {
            None => {
                let pred_cov = symmetrize(&(&st.ad * p * st.ad.transpose() + &st.sigma_d));
                let s = (&st.ar * p * st.ar.transpose())[(0, 0)] + st.sigma_r;
                if !(s > T::zero()) {
                    return Err(Error::InnovationVariance {
                        step: k + 1,
                        value: to_f64(s),
                    });
                }
                let gain = (&st.ad * p * st.ar.transpose().column(0) + &st.cross) / s;
                let next = symmetrize(&(&pred_cov - &gain * gain.transpose() * s));
                (pred_cov, s, gain, next)
            }
            Some(u) => {
                let (pred_cov, s, gain, u_next) = sqrt_update(st, u, k)?;
                *u = u_next;
                let next = u.transpose() * &*u;
                (pred_cov, s, gain, next)
            }
        };
        out.filtered_mean.push(&pred + &gain * innov);
        out.filtered_cov.push(next_cov);
        out.predicted_mean.push(pred);
        out.predicted_cov.push(pred_cov);
        out.gain.push(gain);
        out.innovation_var.push(s);
        out.innovation.push(innov);
    }
    Ok(out)
}

fn upper_factor<T: Real>(x: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    Ok(cholesky(x, what)?.l().transpose())
}

/// Array square-root update. The rows of
/// `[[U Ar~^T, U Ad~^T], [N]]` with `N^T N` the joint noise covariance of
/// `(w_y, w_s)` are triangularized by QR; the resulting `R` factors the
/// one-step joint covariance of `(y_k, s_{k+1})`, whose Schur complement is
/// the updated state covariance.
/// Predicted factor, innovation variance, gain and filtered factor.
type SqrtUpdate<T> = (DMatrix<T>, T, DVector<T>, DMatrix<T>);

fn sqrt_update<T: Real>(st: &ClosedLoopStep<T>, u: &DMatrix<T>, k: usize) -> Result<SqrtUpdate<T>> {
    let n = u.nrows();
    let mut noise = DMatrix::zeros(n + 1, n + 1);
    noise[(0, 0)] = st.sigma_r;
    noise.view_mut((1, 1), (n, n)).copy_from(&st.sigma_d);
    for i in 0..n {
        noise[(0, i + 1)] = st.cross[i];
        noise[(i + 1, 0)] = st.cross[i];
    }
    let noise_u =
        upper_factor(&noise, "closed-loop noise covariance").map_err(|e| e.at_step(k + 1))?;
    let mut pre = DMatrix::zeros(2 * n + 1, n + 1);
    pre.view_mut((0, 0), (n, 1))
        .copy_from(&(u * st.ar.transpose()));
    pre.view_mut((0, 1), (n, n))
        .copy_from(&(u * st.ad.transpose()));
    pre.view_mut((n, 0), (n + 1, n + 1)).copy_from(&noise_u);
    let r = pre.qr().r();
    let r11 = r[(0, 0)];
    let s = r11 * r11;
    if !(s > T::zero()) {
        return Err(Error::InnovationVariance {
            step: k + 1,
            value: to_f64(s),
        });
    }
    let r12 = r.view((0, 1), (1, n)).transpose();
    let r22 = r.view((1, 1), (n, n)).into_owned();
    let gain: DVector<T> = r12.column(0) / r11;
    let pred_cov = symmetrize(&(&r12 * r12.transpose() + r22.transpose() * &r22));
    Ok((pred_cov, s, gain, r22))
}

/// Smoothed moments of `s_1 .. s_{T+1}` given `y_1 .. y_T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct SmoothedPosterior<T: Real> {
    /// `ŝ_{k|T}`, `k = 1..T+1`.
    pub mean: Vec<DVector<T>>,
    /// `P̂_{k|T}`.
    pub cov: Vec<DMatrix<T>>,
    /// Smoother gains `J_k`, `k = 1..T`.
    pub gain: Vec<DMatrix<T>>,
    /// `M̂_{k+1|T} = Cov(s_{k+1}, s_k | Y)`, `k = 1..T`.
    pub lag_cov: Vec<DMatrix<T>>,
    /// `G_k = ŝ ŝ^T + P̂`.
    pub second_moment: Vec<DMatrix<T>>,
    /// `M_{k+1|T} = ŝ_{k+1} ŝ_k^T + M̂_{k+1|T}`.
    pub cross_moment: Vec<DMatrix<T>>,
}

impl<T: Real> SmoothedPosterior<T> {
    pub fn horizon(&self) -> usize {
        self.gain.len()
    }

    pub fn n_s(&self) -> usize {
        self.mean.first().map_or(0, DVector::len)
    }
}

impl SmoothedPosterior<f64> {
    /// Debug dump; not a stable format.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            mean: Vec<Vec<f64>>,
            cov: Vec<Vec<Vec<f64>>>,
            lag_cov: Vec<Vec<Vec<f64>>>,
        }
        let doc = Doc {
            mean: self
                .mean
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            cov: self.cov.iter().map(to_rows).collect(),
            lag_cov: self.lag_cov.iter().map(to_rows).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Backward pass.
pub fn rts_smooth<T: Real>(
    filter: &FilterState<T>,
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
) -> Result<SmoothedPosterior<T>> {
    let cl = augment_all(model, policy)?;
    smooth_closed_loop(filter, &cl)
}

/// Backward pass on precomputed closed-loop steps.
pub fn smooth_closed_loop<T: Real>(
    filter: &FilterState<T>,
    cl: &[ClosedLoopStep<T>],
) -> Result<SmoothedPosterior<T>> {
    let horizon = cl.len();
    if filter.gain.len() != horizon {
        return Err(Error::dim("filter horizon", horizon, filter.gain.len()));
    }
    let mut mean = filter.filtered_mean.clone();
    let mut cov = filter.filtered_cov.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut lag = vec![DMatrix::zeros(0, 0); horizon];
    for k in (0..horizon).rev() {
        let st = &cl[k];
        let m = &filter.filtered_mean[k];
        let p = &filter.filtered_cov[k];
        let s = filter.innovation_var[k];
        // Condition s_k on y_k as well.
        let par = p * st.ar.transpose();
        let m_plus = m + &par * (filter.innovation[k] / s);
        let p_plus = symmetrize(&(p - &par * par.transpose() / s));
        // Cov(s_k, s_{k+1} | y_1..y_k) = P (Ad~ - K Ar~)^T.
        let cross = p * (&st.ad - &filter.gain[k] * &st.ar).transpose();
        let next_cov = &filter.filtered_cov[k + 1];
        let chol = cholesky(next_cov, "filtered covariance").map_err(|_| Error::Singular {
            what: format!("filtered covariance at timestep {}", k + 2),
        })?;
        let j = chol.solve(&cross.transpose()).transpose();
        let dm = &mean[k + 1] - &filter.filtered_mean[k + 1];
        let dp = &cov[k + 1] - next_cov;
        mean[k] = &m_plus + &j * dm;
        cov[k] = symmetrize(&(&p_plus + &j * dp * j.transpose()));
        lag[k] = &cov[k + 1] * j.transpose();
        gains[k] = j;
    }
    let second_moment = mean
        .iter()
        .zip(&cov)
        .map(|(m, p)| m * m.transpose() + p)
        .collect();
    let cross_moment = (0..horizon)
        .map(|k| &mean[k + 1] * mean[k].transpose() + &lag[k])
        .collect();
    Ok(SmoothedPosterior {
        mean,
        cov,
        gain: gains,
        lag_cov: lag,
        second_moment,
        cross_moment,
    })
}

/// Filter then smooth, starting from the model's initial-state law.
pub fn smooth<T: Real>(
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
    observations: &[T],
    opts: FilterOptions,
) -> Result<SmoothedPosterior<T>> {
    let cl = augment_all(model, policy)?;
    let f = filter_closed_loop(&cl, observations, &model.mu1, &model.p1, opts)?;
    smooth_closed_loop(&f, &cl)
}

/// Smallest eigenvalue over every filtered and smoothed covariance.
pub fn min_covariance_eigenvalue<T: Real>(
    filter: &FilterState<T>,
    post: &SmoothedPosterior<T>,
) -> T {
    filter
        .filtered_cov
        .iter()
        .chain(&filter.predicted_cov)
        .chain(&post.cov)
        .map(min_eigenvalue)
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Exact conditional law of all states given a prefix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConditional<T: Real> {
    n_s: usize,
    pub means: Vec<DVector<T>>,
    /// Joint covariance of `(s_1, .., s_{T+1})`.
    pub cov: DMatrix<T>,
}

impl<T: Real> DenseConditional<T> {
    /// `Cov(s_i, s_j | .)`, 0-based state indices.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<T> {
        self.cov
            .view((i * self.n_s, j * self.n_s), (self.n_s, self.n_s))
            .into_owned()
    }
}

/// Reference smoother by brute force: writes every state and observation as
/// an affine function of the independent standard-normal noises, forms the
/// full joint covariance and conditions on `y_1 .. y_observed` by one dense
/// solve. Cubic in `T n_s`; intended for verification.
pub fn dense_reference<T: Real>(
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
    observations: &[T],
    observed: usize,
) -> Result<DenseConditional<T>> {
    let horizon = model.horizon();
    let (n, na) = (model.n_s(), model.n_a());
    if policy.horizon() != horizon {
        return Err(Error::dim("policy horizon", horizon, policy.horizon()));
    }
    if observations.len() != horizon || observed > horizon {
        return Err(Error::dim("cost observations", horizon, observations.len()));
    }
    check_len(&model.mu1, n, "mu_1")?;
    let per = na + n + 1;
    let nx = n + horizon * per;
    let sqrt_p1 = cholesky(&model.p1, "P_1")?.l();

    // Affine representation: value = mean + map * xi, xi ~ N(0, I).
    let mut s_mean = vec![model.mu1.clone()];
    let mut s_map = vec![{
        let mut m = DMatrix::zeros(n, nx);
        m.view_mut((0, 0), (n, n)).copy_from(&sqrt_p1);
        m
    }];
    let mut y_mean = Vec::with_capacity(horizon);
    let mut y_map: Vec<DMatrix<T>> = Vec::with_capacity(horizon);
    for (k, (st, ps)) in model.steps.iter().zip(policy.steps()).enumerate() {
        let off = n + k * per;
        let a_mean = &ps.gain * &s_mean[k] + &ps.offset;
        let mut a_map = &ps.gain * &s_map[k];
        let mut blk = a_map.view_mut((0, off), (na, na));
        blk += ps.cov_sqrt.transpose();
        let sqrt_d = cholesky(&st.sigma_d, "Sigma_d")
            .map_err(|e| e.at_step(k + 1))?
            .l();
        let mut next_map = &st.a_d * &s_map[k] + &st.b_d * &a_map;
        let mut blk = next_map.view_mut((0, off + na), (n, n));
        blk += &sqrt_d;
        let next_mean = &st.a_d * &s_mean[k] + &st.b_d * &a_mean + &st.c_d;
        let mut ym = &st.a_r * &s_map[k] + &st.b_r * &a_map;
        ym[(0, off + na + n)] += st.sigma_r.sqrt();
        y_mean.push((&st.a_r * &s_mean[k] + &st.b_r * &a_mean)[0] + st.c_r);
        y_map.push(ym);
        s_mean.push(next_mean);
        s_map.push(next_map);
    }
    let ns_total = n * (horizon + 1);
    let mut sx = DMatrix::zeros(ns_total, nx);
    for (k, m) in s_map.iter().enumerate() {
        sx.view_mut((k * n, 0), (n, nx)).copy_from(m);
    }
    let mut mean_all = DVector::zeros(ns_total);
    for (k, m) in s_mean.iter().enumerate() {
        mean_all.rows_mut(k * n, n).copy_from(m);
    }
    let mut cov = &sx * sx.transpose();
    if observed > 0 {
        let mut yx = DMatrix::zeros(observed, nx);
        let mut resid = DVector::zeros(observed);
        for k in 0..observed {
            yx.row_mut(k).copy_from(&y_map[k].row(0));
            resid[k] = observations[k] - y_mean[k];
        }
        let syy = &yx * yx.transpose();
        let ssy = &sx * yx.transpose();
        let chol = cholesky(&syy, "observation covariance")?;
        mean_all += &ssy * chol.solve(&resid);
        cov -= &ssy * chol.solve(&ssy.transpose());
    }
    let means = (0..=horizon)
        .map(|k| mean_all.rows(k * n, n).into_owned())
        .collect();
    Ok(DenseConditional {
        n_s: n,
        means,
        cov: symmetrize(&cov),
    })
}

/// Max-abs discrepancy between the recursions and the dense reference over
/// smoothed means, covariances and one-lag covariances.
pub fn reference_discrepancy<T: Real>(
    post: &SmoothedPosterior<T>,
    reference: &DenseConditional<T>,
) -> f64 {
    let mut worst = 0.0f64;
    let h = post.horizon();
    for k in 0..=h {
        worst = worst.max(to_f64((&post.mean[k] - &reference.means[k]).amax()));
        worst = worst.max(to_f64((&post.cov[k] - reference.block(k, k)).amax()));
        if k < h {
            worst = worst.max(to_f64(
                (&post.lag_cov[k] - reference.block(k + 1, k)).amax(),
            ));
        }
    }
    worst
}

/// Draws `T` cost observations of the closed loop from the model, for tests
/// and synthetic experiments: `y_k` and `s_{k+1}` are drawn jointly.
pub fn sample_observations<T: Real, R: rand::Rng + ?Sized>(
    model: &LtvModel<T>,
    policy: &PolicyParams<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    use rand_distr::StandardNormal;
    let mut draw =
        |n: usize| DVector::<T>::from_fn(n, |_, _| lit(rng.sample::<f64, _>(StandardNormal)));
    let n = model.n_s();
    let mut s = &model.mu1 + cholesky(&model.p1, "P_1")?.l() * draw(n);
    let mut ys = Vec::with_capacity(model.horizon());
    for (k, (st, ps)) in model.steps.iter().zip(policy.steps()).enumerate() {
        let a = &ps.gain * &s + &ps.offset + ps.cov_sqrt.transpose() * draw(ps.n_a());
        let sd = cholesky(&st.sigma_d, "Sigma_d")
            .map_err(|e| e.at_step(k + 1))?
            .l();
        let next = &st.a_d * &s + &st.b_d * &a + &st.c_d + sd * draw(n);
        ys.push((&st.a_r * &s + &st.b_r * &a)[0] + st.c_r + st.sigma_r.sqrt() * draw(1)[0]);
        s = next;
    }
    Ok(ys)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) use crate::synthetic::random_instance;

    #[test]
    fn open_loop_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, _) = random_instance(&mut rng, 1, 2, 1);
        let zero = PolicyStep::zeros(2, 1);
        let cl = augment(&model.steps[0], &zero).unwrap();
        assert_eq!(cl.ad, model.steps[0].a_d);
        assert_eq!(cl.sigma_d, model.steps[0].sigma_d);
        assert_eq!(cl.sigma_r, model.steps[0].sigma_r);
    }

    #[test]
    fn scalar_augmentation() {
        let step = LtvStep {
            a_d: DMatrix::from_element(1, 1, 1.0),
            b_d: DMatrix::from_element(1, 1, 1.0),
            c_d: DVector::zeros(1),
            a_r: DMatrix::from_element(1, 1, 0.0),
            b_r: DMatrix::from_element(1, 1, 0.0),
            c_r: 0.0,
            sigma_d: DMatrix::from_element(1, 1, 1.0),
            sigma_r: 1.0,
        };
        let p = PolicyStep::new(
            DMatrix::from_element(1, 1, -0.5),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert_eq!(augment(&step, &p).unwrap().ad[(0, 0)], 0.5);
    }

    #[test]
    fn augmentation_matches_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, policy) = random_instance(&mut rng, 1, 3, 2);
        let (m, p) = (&model.steps[0], policy.step(0));
        let cl = augment(m, p).unwrap();
        let sigma = p.cov_sqrt.transpose() * &p.cov_sqrt;
        for i in 0..3 {
            for j in 0..3 {
                let mut ad = m.a_d[(i, j)];
                for q in 0..2 {
                    ad += m.b_d[(i, q)] * p.gain[(q, j)];
                }
                assert!((cl.ad[(i, j)] - ad).abs() < 1e-14);
                let mut sd = m.sigma_d[(i, j)];
                for q in 0..2 {
                    for r in 0..2 {
                        sd += m.b_d[(i, q)] * sigma[(q, r)] * m.b_d[(j, r)];
                    }
                }
                assert!((cl.sigma_d[(i, j)] - sd).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn scalar_single_step_by_hand() {
        // s' = 0.9 s + 0.5 a + w, y = 2 s + w_r, a = 0 (deterministic policy).
        let model = LtvModel {
            steps: vec![LtvStep {
                a_d: DMatrix::from_element(1, 1, 0.9),
                b_d: DMatrix::from_element(1, 1, 0.5),
                c_d: DVector::zeros(1),
                a_r: DMatrix::from_element(1, 1, 2.0),
                b_r: DMatrix::from_element(1, 1, 0.0),
                c_r: 0.0,
                sigma_d: DMatrix::from_element(1, 1, 0.1),
                sigma_r: 0.2,
            }],
            mu1: DVector::from_element(1, 1.0),
            p1: DMatrix::from_element(1, 1, 0.5),
        };
        let policy = PolicyParams::zeros(1, 1, 1);
        let f = kalman_filter(
            &model,
            &policy,
            &[3.0],
            &model.mu1,
            &model.p1,
            FilterOptions::default(),
        )
        .unwrap();
        // S = 4 * 0.5 + 0.2 = 2.2, K = 0.9 * 0.5 * 2 / 2.2, innovation 3 - 2.
        let s: f64 = 2.2;
        let k: f64 = 0.9 / 2.2;
        let pred: f64 = 0.81 * 0.5 + 0.1;
        assert!((f.innovation_var[0] - s).abs() < 1e-12);
        assert!((f.gain[0][0] - k).abs() < 1e-12);
        assert!((f.filtered_mean[1][0] - (0.9 + k)).abs() < 1e-12);
        assert!((f.filtered_cov[1][(0, 0)] - (pred - k * k * s)).abs() < 1e-12);
    }

    #[test]
    fn uninformative_observations_leave_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut model, policy) = random_instance(&mut rng, 4, 2, 1);
        for st in &mut model.steps {
            st.sigma_r = 1e12;
        }
        let ys: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let f = kalman_filter(
            &model,
            &policy,
            &ys,
            &model.mu1,
            &model.p1,
            FilterOptions::default(),
        )
        .unwrap();
        for k in 0..4 {
            assert!((&f.filtered_mean[k + 1] - &f.predicted_mean[k]).amax() < 1e-9);
            assert!((&f.filtered_cov[k + 1] - &f.predicted_cov[k]).amax() < 1e-9);
        }
        // Smoothed moments collapse to the closed-loop prior rollout.
        let post = rts_smooth(&f, &model, &policy).unwrap();
        let prior = dense_reference(&model, &policy, &ys, 0).unwrap();
        for k in 0..=4 {
            let scale = prior.means[k].amax().max(1.0);
            assert!((&post.mean[k] - &prior.means[k]).amax() < 1e-6 * scale);
            let scale = prior.block(k, k).amax().max(1.0);
            assert!((&post.cov[k] - prior.block(k, k)).amax() < 1e-6 * scale);
        }
    }

    #[test]
    fn filter_matches_dense_prefix_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, policy) = random_instance(&mut rng, 5, 2, 2);
        let ys = sample_observations(&model, &policy, &mut rng).unwrap();
        let f = kalman_filter(
            &model,
            &policy,
            &ys,
            &model.mu1,
            &model.p1,
            FilterOptions::default(),
        )
        .unwrap();
        for k in 0..5 {
            let r = dense_reference(&model, &policy, &ys, k + 1).unwrap();
            assert!((&f.filtered_mean[k + 1] - &r.means[k + 1]).amax() < 1e-9);
            assert!((&f.filtered_cov[k + 1] - r.block(k + 1, k + 1)).amax() < 1e-9);
        }
    }

    #[test]
    fn smoother_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let horizon = rng.random_range(1..=6);
            let n = rng.random_range(1..=3);
            let na = rng.random_range(1..=2);
            let (model, policy) = random_instance(&mut rng, horizon, n, na);
            let ys = sample_observations(&model, &policy, &mut rng).unwrap();
            let post = smooth(&model, &policy, &ys, FilterOptions::default()).unwrap();
            let r = dense_reference(&model, &policy, &ys, horizon).unwrap();
            let err = reference_discrepancy(&post, &r);
            assert!(err < 1e-8, "discrepancy {err}");
        }
    }

    #[test]
    fn square_root_mode_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (model, policy) = random_instance(&mut rng, 6, 3, 2);
        let ys = sample_observations(&model, &policy, &mut rng).unwrap();
        let full = smooth(&model, &policy, &ys, FilterOptions::default()).unwrap();
        let sq = smooth(&model, &policy, &ys, FilterOptions { square_root: true }).unwrap();
        for k in 0..=6 {
            assert!((&full.mean[k] - &sq.mean[k]).amax() < 1e-10);
            assert!((&full.cov[k] - &sq.cov[k]).amax() < 1e-10);
        }
    }

    #[test]
    fn noiseless_system_follows_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut model, mut policy) = random_instance(&mut rng, 4, 2, 1);
        for st in &mut model.steps {
            st.sigma_d = DMatrix::identity(2, 2) * 1e-12;
            st.sigma_r = 1e12;
        }
        model.p1 = DMatrix::identity(2, 2) * 1e-12;
        for k in 0..4 {
            let mut st = policy.step(k).clone();
            st.cov_sqrt = DMatrix::zeros(1, 1);
            policy.replace_step(k, st).unwrap();
        }
        let ys = vec![0.5; 4];
        let post = smooth(&model, &policy, &ys, FilterOptions::default()).unwrap();
        let mut s = model.mu1.clone();
        for k in 0..4 {
            assert!((&post.mean[k] - &s).amax() < 1e-8);
            let st = &model.steps[k];
            let a = policy.step(k).mean_action(&s);
            s = &st.a_d * &s + &st.b_d * a + &st.c_d;
        }
        assert!((&post.mean[4] - &s).amax() < 1e-8);
    }

    #[test]
    fn moments_are_consistent_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (model, policy) = random_instance(&mut rng, 5, 3, 2);
        let ys = sample_observations(&model, &policy, &mut rng).unwrap();
        let cl = augment_all(&model, &policy).unwrap();
        let f =
            filter_closed_loop(&cl, &ys, &model.mu1, &model.p1, FilterOptions::default()).unwrap();
        let post = smooth_closed_loop(&f, &cl).unwrap();
        for k in 0..=5 {
            let g = &post.second_moment[k] - &post.mean[k] * post.mean[k].transpose();
            assert!(max_abs(&(g - &post.cov[k])) < 1e-12);
            assert!(max_abs(&(&post.cov[k] - post.cov[k].transpose())) == 0.0);
        }
        assert!(min_covariance_eigenvalue(&f, &post) >= -1e-10);
        assert!(post.to_json().unwrap().contains("lag_cov"));
    }

    #[test]
    fn innovation_variance_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut model, policy) = random_instance(&mut rng, 2, 1, 1);
        model.steps[1].sigma_r = -1e6;
        let err = kalman_filter(
            &model,
            &policy,
            &[0.5, 0.5],
            &model.mu1,
            &model.p1,
            FilterOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::InnovationVariance { step: 2, .. }),
            "{err}"
        );
    }
}
