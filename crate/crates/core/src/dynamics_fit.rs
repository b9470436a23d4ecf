//! Fitting the time-varying linear-Gaussian model of `(s_{k+1}, y_k)` given
//! `(s_k, a_k)` from rollout tuples.
//!
//! Each timestep gets a normal-inverse-Wishart posterior over the stacked
//! vector `x = (s_k, a_k, s_{k+1}, y_k)`; the posterior-mode Gaussian is then
//! conditioned on its `(s_k, a_k)` block. The prior mean pools the samples of
//! neighbouring timesteps so sparse steps borrow strength from their
//! neighbours.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    add_jitter, check_len, check_shape, check_square, cholesky, floor_eigenvalues, from_rows,
    min_singular_value, symmetrize, to_rows, JITTER_SCALE,
};
use crate::scalar::{lit, to_f64, Real};

/// One recorded `(s_k, a_k, s_{k+1}, y_k)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T: Real> {
    pub s: DVector<T>,
    pub a: DVector<T>,
    pub s_next: DVector<T>,
    pub y: T,
}

impl<T: Real> Transition<T> {
    /// The stacked vector `(s, a, s_next, y)`.
    pub fn stacked(&self) -> DVector<T> {
        let n = self.s.len() * 2 + self.a.len() + 1;
        let mut out = DVector::zeros(n);
        let (ns, na) = (self.s.len(), self.a.len());
        out.rows_mut(0, ns).copy_from(&self.s);
        out.rows_mut(ns, na).copy_from(&self.a);
        out.rows_mut(ns + na, ns).copy_from(&self.s_next);
        out[n - 1] = self.y;
        out
    }
}

/// Rollout tuples indexed by timestep, then by experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData<T: Real> {
    n_s: usize,
    n_a: usize,
    steps: Vec<Vec<Transition<T>>>,
}

impl<T: Real> EpisodeData<T> {
    pub fn new(horizon: usize, n_s: usize, n_a: usize) -> Self {
        Self {
            n_s,
            n_a,
            steps: vec![Vec::new(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    /// Dimension of the stacked joint vector, `2 n_s + n_a + 1`.
    pub fn joint_dim(&self) -> usize {
        2 * self.n_s + self.n_a + 1
    }

    /// Appends a tuple at 0-based timestep `k`.
    pub fn push(&mut self, k: usize, tr: Transition<T>) -> Result<()> {
        if k >= self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "timestep {} outside horizon {}",
                k + 1,
                self.horizon()
            )));
        }
        check_len(&tr.s, self.n_s, "s_k")?;
        check_len(&tr.a, self.n_a, "a_k")?;
        check_len(&tr.s_next, self.n_s, "s_{k+1}")?;
        if !(tr.y > T::zero() && tr.y <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "cost observation at timestep {} must lie in (0, 1], got {}",
                k + 1,
                tr.y
            )));
        }
        self.steps[k].push(tr);
        Ok(())
    }

    /// Records at 0-based timestep `k`.
    pub fn at(&self, k: usize) -> &[Transition<T>] {
        &self.steps[k]
    }

    /// Number of experiments (records at the first step).
    pub fn experiments(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    /// Columnar CSV: `k, m, s.., a.., s_next.., y` with 1-based `k` and `m`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string(), "m".to_string()];
        header.extend((0..self.n_s).map(|i| format!("s{i}")));
        header.extend((0..self.n_a).map(|i| format!("a{i}")));
        header.extend((0..self.n_s).map(|i| format!("s_next{i}")));
        header.push("y".into());
        w.write_record(&header)?;
        for (k, recs) in self.steps.iter().enumerate() {
            for (m, tr) in recs.iter().enumerate() {
                let mut row = vec![(k + 1).to_string(), (m + 1).to_string()];
                row.extend(tr.stacked().iter().map(|v| format!("{:e}", to_f64(*v))));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout of [`EpisodeData::write_csv`]; dimensions are
    /// inferred from the header.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.starts_with(prefix)
                        && h[prefix.len()..].chars().all(|c| c.is_ascii_digit())
                        && h.len() > prefix.len()
                })
                .count()
        };
        let (n_s, n_a) = (count("s"), count("a"));
        if count("s_next") != n_s || header.len() != 2 * n_s + n_a + 3 {
            return Err(Error::InvalidArgument(
                "malformed episode CSV header".into(),
            ));
        }
        let mut rows: Vec<(usize, Transition<T>)> = Vec::new();
        let mut horizon = 0;
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::InvalidArgument("short CSV row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad CSV number: {e}")))
            };
            let k = num(0)? as usize;
            if k == 0 {
                return Err(Error::InvalidArgument("timestep index is 1-based".into()));
            }
            let vals = (2..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
            let v = |lo: usize, n: usize| {
                DVector::from_iterator(n, vals[lo..lo + n].iter().map(|x| lit::<T>(*x)))
            };
            rows.push((
                k - 1,
                Transition {
                    s: v(0, n_s),
                    a: v(n_s, n_a),
                    s_next: v(n_s + n_a, n_s),
                    y: lit(vals[2 * n_s + n_a]),
                },
            ));
            horizon = horizon.max(k);
        }
        let mut data = Self::new(horizon, n_s, n_a);
        for (k, tr) in rows {
            data.push(k, tr)?;
        }
        Ok(data)
    }

    pub fn manifest(&self, csv_path: &str) -> EpisodeManifest {
        EpisodeManifest {
            horizon: self.horizon(),
            n_s: self.n_s,
            n_a: self.n_a,
            experiments: self.experiments(),
            csv: csv_path.to_string(),
        }
    }
}

/// JSON sidecar describing an episode CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n_s: usize,
    pub n_a: usize,
    #[serde(rename = "M")]
    pub experiments: usize,
    pub csv: String,
}

/// Normal-inverse-Wishart hyperparameters for the per-step joint Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior<T: Real> {
    /// Prior pseudo-count on the mean.
    pub kappa0: T,
    /// Prior degrees of freedom; `None` means `d + 2`.
    pub nu0: Option<T>,
    /// Prior scatter is `scatter_scale * I`.
    pub scatter_scale: T,
    /// Explicit prior mean; `None` pools the samples of timesteps within
    /// `pooling_window` of the fitted one.
    pub mean: Option<DVector<T>>,
    pub pooling_window: usize,
    /// Fewer records than this at a timestep is an error.
    pub min_samples: usize,
}

impl<T: Real> Default for NiwPrior<T> {
    fn default() -> Self {
        Self {
            kappa0: T::one(),
            nu0: None,
            scatter_scale: lit(1e-2),
            mean: None,
            pooling_window: 1,
            min_samples: 2,
        }
    }
}

/// Posterior-mode Gaussian over `(s_k, a_k, s_{k+1}, y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussianStep<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

/// NIW posterior at 0-based timestep `k`.
pub fn posterior_joint<T: Real>(
    data: &EpisodeData<T>,
    k: usize,
    prior: &NiwPrior<T>,
) -> Result<JointGaussianStep<T>> {
    let d = data.joint_dim();
    let recs = data.at(k);
    let m = recs.len();
    if m < prior.min_samples {
        return Err(Error::InsufficientSamples {
            step: k + 1,
            got: m,
            min: prior.min_samples,
        });
    }
    let prior_mean = match &prior.mean {
        Some(mu) => {
            check_len(mu, d, "prior mean")?;
            mu.clone()
        }
        None => {
            let lo = k.saturating_sub(prior.pooling_window);
            let hi = (k + prior.pooling_window).min(data.horizon() - 1);
            let mut acc = DVector::zeros(d);
            let mut n = 0usize;
            for kk in lo..=hi {
                for tr in data.at(kk) {
                    acc += tr.stacked();
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::InsufficientSamples {
                    step: k + 1,
                    got: 0,
                    min: prior.min_samples.max(1),
                });
            }
            acc / lit::<T>(n as f64)
        }
    };
    let dim_t: T = lit(d as f64);
    let nu0 = prior.nu0.unwrap_or(dim_t + lit(2.0));
    let m_t: T = lit(m as f64);
    let psi0 = DMatrix::<T>::identity(d, d) * prior.scatter_scale;

    let (mean, scatter) = if m == 0 {
        (prior_mean.clone(), psi0)
    } else {
        let xs: Vec<DVector<T>> = recs.iter().map(Transition::stacked).collect();
        let xbar = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / m_t;
        let mut s = DMatrix::zeros(d, d);
        for x in &xs {
            let dx = x - &xbar;
            s += &dx * dx.transpose();
        }
        let kappa_n = prior.kappa0 + m_t;
        let mean = (&prior_mean * prior.kappa0 + &xbar * m_t) / kappa_n;
        let dm = &xbar - &prior_mean;
        let shrink = &dm * dm.transpose() * (prior.kappa0 * m_t / kappa_n);
        (mean, psi0 + s + shrink)
    };
    let cov = symmetrize(&(scatter / (nu0 + m_t + dim_t + lit(2.0))));
    Ok(JointGaussianStep {
        mean,
        cov: add_jitter(&cov, lit(JITTER_SCALE)),
    })
}

/// One step of the fitted model:
/// `s_{k+1} = A_d s + B_d a + c_d + w_d`, `y_k = A_r s + B_r a + c_r + w_r`,
/// with `w_d ~ N(0, Sigma_d)`, `w_r ~ N(0, Sigma_r)` independent.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvStep<T: Real> {
    pub a_d: DMatrix<T>,
    pub b_d: DMatrix<T>,
    pub c_d: DVector<T>,
    /// `1 x n_s`.
    pub a_r: DMatrix<T>,
    /// `1 x n_a`.
    pub b_r: DMatrix<T>,
    pub c_r: T,
    pub sigma_d: DMatrix<T>,
    pub sigma_r: T,
}

impl<T: Real> LtvStep<T> {
    pub fn n_s(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn n_a(&self) -> usize {
        self.b_d.ncols()
    }

    /// `[[A_d, B_d, c_d], [A_r, B_r, c_r]]`, the output map of the augmented
    /// input `(s, a, 1)`.
    pub fn augmented_map(&self) -> DMatrix<T> {
        let (ns, na) = (self.n_s(), self.n_a());
        let mut m = DMatrix::zeros(ns + 1, ns + na + 1);
        m.view_mut((0, 0), (ns, ns)).copy_from(&self.a_d);
        m.view_mut((0, ns), (ns, na)).copy_from(&self.b_d);
        m.view_mut((0, ns + na), (ns, 1)).copy_from(&self.c_d);
        m.view_mut((ns, 0), (1, ns)).copy_from(&self.a_r);
        m.view_mut((ns, ns), (1, na)).copy_from(&self.b_r);
        m[(ns, ns + na)] = self.c_r;
        m
    }

    /// `diag(Sigma_d, Sigma_r)`; the cross block is zero.
    pub fn output_cov(&self) -> DMatrix<T> {
        let ns = self.n_s();
        let mut m = DMatrix::zeros(ns + 1, ns + 1);
        m.view_mut((0, 0), (ns, ns)).copy_from(&self.sigma_d);
        m[(ns, ns)] = self.sigma_r;
        m
    }

    /// `B° = [B_d; B_r]`.
    pub fn stacked_input(&self) -> DMatrix<T> {
        let (ns, na) = (self.n_s(), self.n_a());
        let mut m = DMatrix::zeros(ns + 1, na);
        m.view_mut((0, 0), (ns, na)).copy_from(&self.b_d);
        m.view_mut((ns, 0), (1, na)).copy_from(&self.b_r);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_s(), self.n_a());
        check_square(&self.a_d, ns, "A_d")?;
        check_shape(&self.b_d, ns, na, "B_d")?;
        check_len(&self.c_d, ns, "c_d")?;
        check_shape(&self.a_r, 1, ns, "A_r")?;
        check_shape(&self.b_r, 1, na, "B_r")?;
        check_square(&self.sigma_d, ns, "Sigma_d")?;
        cholesky(&self.sigma_d, "Sigma_d")?;
        if !(self.sigma_r > T::zero()) {
            return Err(Error::not_pd("Sigma_r"));
        }
        Ok(())
    }
}

/// Fitted horizon plus the initial-state law `N(mu_1, P_1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel<T: Real> {
    pub steps: Vec<LtvStep<T>>,
    pub mu1: DVector<T>,
    pub p1: DMatrix<T>,
}

impl<T: Real> LtvModel<T> {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n_s(&self) -> usize {
        self.mu1.len()
    }

    pub fn n_a(&self) -> usize {
        self.steps.first().map_or(0, LtvStep::n_a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("model horizon must be >= 1".into()));
        }
        check_square(&self.p1, self.n_s(), "P_1")?;
        for (k, st) in self.steps.iter().enumerate() {
            if st.n_s() != self.n_s() || st.n_a() != self.n_a() {
                return Err(Error::dim("model step", self.n_s(), st.n_s()).at_step(k + 1));
            }
            st.validate().map_err(|e| e.at_step(k + 1))?;
        }
        Ok(())
    }

    pub fn to_document(&self) -> LtvModelDocument {
        LtvModelDocument {
            horizon: self.horizon(),
            n_s: self.n_s(),
            n_a: self.n_a(),
            mu1: self.mu1.iter().map(|v| to_f64(*v)).collect(),
            p1: to_rows(&self.p1),
            steps: self
                .steps
                .iter()
                .map(|s| LtvStepDocument {
                    a_d: to_rows(&s.a_d),
                    b_d: to_rows(&s.b_d),
                    c_d: s.c_d.iter().map(|v| to_f64(*v)).collect(),
                    a_r: s.a_r.iter().map(|v| to_f64(*v)).collect(),
                    b_r: s.b_r.iter().map(|v| to_f64(*v)).collect(),
                    c_r: to_f64(s.c_r),
                    sigma_d: to_rows(&s.sigma_d),
                    sigma_r: to_f64(s.sigma_r),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &LtvModelDocument) -> Result<Self> {
        let vec = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|x| lit::<T>(*x)));
        let row =
            |v: &[f64]| DMatrix::from_row_iterator(1, v.len(), v.iter().map(|x| lit::<T>(*x)));
        let steps = doc
            .steps
            .iter()
            .map(|s| {
                Ok(LtvStep {
                    a_d: from_rows(&s.a_d)?,
                    b_d: from_rows(&s.b_d)?,
                    c_d: vec(&s.c_d),
                    a_r: row(&s.a_r),
                    b_r: row(&s.b_r),
                    c_r: lit(s.c_r),
                    sigma_d: from_rows(&s.sigma_d)?,
                    sigma_r: lit(s.sigma_r),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            steps,
            mu1: vec(&doc.mu1),
            p1: from_rows(&doc.p1)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvModelDocument {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n_s: usize,
    pub n_a: usize,
    pub mu1: Vec<f64>,
    #[serde(rename = "P1")]
    pub p1: Vec<Vec<f64>>,
    pub steps: Vec<LtvStepDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvStepDocument {
    #[serde(rename = "A_d")]
    pub a_d: Vec<Vec<f64>>,
    #[serde(rename = "B_d")]
    pub b_d: Vec<Vec<f64>>,
    pub c_d: Vec<f64>,
    #[serde(rename = "A_r")]
    pub a_r: Vec<f64>,
    #[serde(rename = "B_r")]
    pub b_r: Vec<f64>,
    pub c_r: f64,
    #[serde(rename = "Sigma_d")]
    pub sigma_d: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_r")]
    pub sigma_r: f64,
}

/// Conditions the joint Gaussian on its `(s_k, a_k)` block.
///
/// The regression is affine: the constant `mu_out - A° mu_in` is kept as the
/// offsets `c_d`, `c_r`. The cross covariance between `s_{k+1}` and `y_k` is
/// set to zero.
pub fn condition_step<T: Real>(
    joint: &JointGaussianStep<T>,
    n_s: usize,
    n_a: usize,
) -> Result<LtvStep<T>> {
    let d = 2 * n_s + n_a + 1;
    check_len(&joint.mean, d, "joint mean")?;
    check_square(&joint.cov, d, "joint covariance")?;
    let ni = n_s + n_a;
    let no = n_s + 1;
    let lam_ii = joint.cov.view((0, 0), (ni, ni)).into_owned();
    let lam_oi = joint.cov.view((ni, 0), (no, ni)).into_owned();
    let lam_oo = joint.cov.view((ni, ni), (no, no)).into_owned();
    let chol =
        cholesky(&lam_ii, "input block of the joint covariance").map_err(|_| Error::Singular {
            what: "input block of the joint covariance".into(),
        })?;
    // A° = Λ_oi Λ_ii^{-1}, computed as (Λ_ii^{-1} Λ_io)^T.
    let coef = chol.solve(&lam_oi.transpose()).transpose();
    let cond_cov = symmetrize(&(&lam_oo - &coef * lam_oi.transpose()));
    let mu_in = joint.mean.rows(0, ni).into_owned();
    let mu_out = joint.mean.rows(ni, no).into_owned();
    let offset = mu_out - &coef * mu_in;

    Ok(LtvStep {
        a_d: coef.view((0, 0), (n_s, n_s)).into_owned(),
        b_d: coef.view((0, n_s), (n_s, n_a)).into_owned(),
        c_d: offset.rows(0, n_s).into_owned(),
        a_r: coef.view((n_s, 0), (1, n_s)).into_owned(),
        b_r: coef.view((n_s, n_s), (1, n_a)).into_owned(),
        c_r: offset[n_s],
        sigma_d: cond_cov.view((0, 0), (n_s, n_s)).into_owned(),
        sigma_r: cond_cov[(n_s, n_s)],
    })
}

/// Options for [`fit_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions<T: Real> {
    pub prior: NiwPrior<T>,
    /// Eigenvalue floor of `P_1`.
    pub p1_floor: T,
    /// Smallest admissible singular value of `B_d`.
    pub rank_tol: T,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            prior: NiwPrior::default(),
            p1_floor: lit(1e-6),
            rank_tol: lit(1e-8),
        }
    }
}

/// Fits every timestep (in parallel) and the initial-state moments.
pub fn fit_model<T: Real>(data: &EpisodeData<T>, opts: &FitOptions<T>) -> Result<LtvModel<T>> {
    let (n_s, n_a) = (data.n_s(), data.n_a());
    if data.horizon() == 0 {
        return Err(Error::InvalidArgument(
            "episode data has no timesteps".into(),
        ));
    }
    let steps = (0..data.horizon())
        .into_par_iter()
        .map(|k| {
            let joint = posterior_joint(data, k, &opts.prior)?;
            let step = condition_step(&joint, n_s, n_a)?;
            let sv = min_singular_value(&step.b_d);
            if !(sv >= opts.rank_tol) {
                return Err(Error::RankDeficient {
                    step: k + 1,
                    min_singular: to_f64(sv),
                });
            }
            Ok(step)
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| e.at_step(k + 1)))
        .collect::<Result<Vec<_>>>()?;

    let firsts = data.at(0);
    if firsts.is_empty() {
        return Err(Error::InsufficientSamples {
            step: 1,
            got: 0,
            min: 1,
        });
    }
    let m_t: T = lit(firsts.len() as f64);
    let mu1 = firsts.iter().fold(DVector::zeros(n_s), |a, tr| a + &tr.s) / m_t;
    let mut p1 = DMatrix::zeros(n_s, n_s);
    for tr in firsts {
        let d = &tr.s - &mu1;
        p1 += &d * d.transpose();
    }
    p1 /= m_t;
    let p1 = floor_eigenvalues(&p1, opts.p1_floor);
    Ok(LtvModel { steps, mu1, p1 })
}
