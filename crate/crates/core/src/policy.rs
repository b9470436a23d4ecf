//! Time-varying linear-Gaussian policy `a_k ~ N(F_k s_k + e_k, Sigma_k)`.
//!
//! The covariance is stored through a square-root factor `L_k` with
//! `Sigma_k = L_k^T L_k`, so every iterate stays in the PSD cone. The packed
//! parameter vector concatenates, per step, `vec(F_k)`, `e_k` and `vec(L_k)`
//! (column-major `vec`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    check_len, check_shape, from_rows, min_eigenvalue, symmetrize, to_rows, unvec,
};
use crate::scalar::{lit, to_f64, Real};

/// Whether action noise is drawn or suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Draw `a = F s + e + L^T w`; requires a positive-definite covariance.
    Stochastic,
    /// Return the mean action `F s + e`, whatever the covariance.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep<T: Real> {
    /// `F_k`, `n_a x n_s`.
    pub gain: DMatrix<T>,
    /// `e_k`, `n_a`.
    pub offset: DVector<T>,
    /// `L_k`, `n_a x n_a`, with `Sigma_k = L_k^T L_k`.
    pub cov_sqrt: DMatrix<T>,
}

impl<T: Real> PolicyStep<T> {
    pub fn new(gain: DMatrix<T>, offset: DVector<T>, cov_sqrt: DMatrix<T>) -> Result<Self> {
        let n_a = offset.len();
        check_shape(&gain, n_a, gain.ncols(), "policy gain F")?;
        check_shape(&cov_sqrt, n_a, n_a, "policy covariance factor")?;
        Ok(Self {
            gain,
            offset,
            cov_sqrt,
        })
    }

    pub fn zeros(n_s: usize, n_a: usize) -> Self {
        Self {
            gain: DMatrix::zeros(n_a, n_s),
            offset: DVector::zeros(n_a),
            cov_sqrt: DMatrix::zeros(n_a, n_a),
        }
    }

    pub fn n_s(&self) -> usize {
        self.gain.ncols()
    }

    pub fn n_a(&self) -> usize {
        self.offset.len()
    }

    /// `Sigma_k = L^T L`, symmetric by construction.
    pub fn covariance(&self) -> DMatrix<T> {
        symmetrize(&(self.cov_sqrt.transpose() * &self.cov_sqrt))
    }

    pub fn mean_action(&self, s: &DVector<T>) -> DVector<T> {
        &self.gain * s + &self.offset
    }

    /// Number of packed parameters of one step.
    pub fn packed_len(n_s: usize, n_a: usize) -> usize {
        n_a * n_s + n_a + n_a * n_a
    }

    /// `col(vec F, e, vec L)`.
    pub fn pack(&self) -> DVector<T> {
        let mut out = Vec::with_capacity(Self::packed_len(self.n_s(), self.n_a()));
        out.extend_from_slice(self.gain.as_slice());
        out.extend_from_slice(self.offset.as_slice());
        out.extend_from_slice(self.cov_sqrt.as_slice());
        DVector::from_vec(out)
    }

    pub fn unpack(v: &[T], n_s: usize, n_a: usize) -> Result<Self> {
        let want = Self::packed_len(n_s, n_a);
        if v.len() != want {
            return Err(Error::dim("packed policy step", want, v.len()));
        }
        let nf = n_a * n_s;
        Ok(Self {
            gain: unvec(&v[..nf], n_a, n_s),
            offset: DVector::from_column_slice(&v[nf..nf + n_a]),
            cov_sqrt: unvec(&v[nf + n_a..], n_a, n_a),
        })
    }
}

/// Draws an action for measured state `s`. `step` is only used to label errors.
pub fn sample_action<T: Real, R: Rng + ?Sized>(
    policy: &PolicyStep<T>,
    s: &DVector<T>,
    mode: SampleMode,
    rng: &mut R,
    step: usize,
) -> Result<DVector<T>> {
    check_len(s, policy.n_s(), "state s")?;
    let mean = policy.mean_action(s);
    match mode {
        SampleMode::Deterministic => Ok(mean),
        SampleMode::Stochastic => {
            let cov = policy.covariance();
            let scale = cov.trace().max(T::one());
            if min_eigenvalue(&cov) <= T::default_epsilon() * scale {
                return Err(Error::NotPositiveDefinite {
                    what: "policy covariance".into(),
                    step: Some(step),
                });
            }
            let w = DVector::from_fn(policy.n_a(), |_, _| {
                lit::<T>(rng.sample::<f64, _>(StandardNormal))
            });
            Ok(mean + policy.cov_sqrt.transpose() * w)
        }
    }
}

/// A horizon of policy steps sharing dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T: Real> {
    n_s: usize,
    n_a: usize,
    steps: Vec<PolicyStep<T>>,
}

impl<T: Real> PolicyParams<T> {
    pub fn new(steps: Vec<PolicyStep<T>>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::InvalidArgument("policy horizon must be >= 1".into()))?;
        let (n_s, n_a) = (first.n_s(), first.n_a());
        for (k, st) in steps.iter().enumerate() {
            if st.n_s() != n_s
                || st.n_a() != n_a
                || st.cov_sqrt.nrows() != n_a
                || st.cov_sqrt.ncols() != n_a
            {
                return Err(Error::dim(
                    format!("policy step {}", k + 1),
                    format!("n_s={n_s}, n_a={n_a}"),
                    format!("n_s={}, n_a={}", st.n_s(), st.n_a()),
                ));
            }
        }
        Ok(Self { n_s, n_a, steps })
    }

    pub fn zeros(horizon: usize, n_s: usize, n_a: usize) -> Self {
        Self {
            n_s,
            n_a,
            steps: vec![PolicyStep::zeros(n_s, n_a); horizon],
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

    pub fn steps(&self) -> &[PolicyStep<T>] {
        &self.steps
    }

    /// 0-based access.
    pub fn step(&self, k: usize) -> &PolicyStep<T> {
        &self.steps[k]
    }

    pub fn replace_step(&mut self, k: usize, step: PolicyStep<T>) -> Result<()> {
        if step.n_s() != self.n_s || step.n_a() != self.n_a {
            return Err(Error::dim("replacement policy step", self.n_s, step.n_s()));
        }
        self.steps[k] = step;
        Ok(())
    }

    /// True when every covariance factor is exactly zero.
    pub fn is_deterministic(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.cov_sqrt.iter().all(|v| *v == T::zero()))
    }

    pub fn packed_len(&self) -> usize {
        self.horizon() * PolicyStep::<T>::packed_len(self.n_s, self.n_a)
    }

    pub fn pack(&self) -> DVector<T> {
        let mut out = Vec::with_capacity(self.packed_len());
        for st in &self.steps {
            out.extend_from_slice(st.pack().as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn unpack(v: &[T], horizon: usize, n_s: usize, n_a: usize) -> Result<Self> {
        let per = PolicyStep::<T>::packed_len(n_s, n_a);
        if v.len() != horizon * per {
            return Err(Error::dim("packed policy", horizon * per, v.len()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("policy horizon must be >= 1".into()));
        }
        let steps = v
            .chunks(per)
            .map(|c| PolicyStep::unpack(c, n_s, n_a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_s, n_a, steps })
    }

    /// `sum_k Tr(Sigma_k)`, which equals the summed singular values of the
    /// PSD covariances.
    pub fn covariance_trace_sum(&self) -> T {
        self.steps
            .iter()
            .fold(T::zero(), |acc, s| acc + s.covariance().trace())
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            horizon: self.horizon(),
            n_s: self.n_s,
            n_a: self.n_a,
            steps: self
                .steps
                .iter()
                .map(|s| PolicyStepDocument {
                    gain: to_rows(&s.gain),
                    offset: s.offset.iter().map(|v| to_f64(*v)).collect(),
                    cov_sqrt: to_rows(&s.cov_sqrt),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self> {
        if doc.steps.len() != doc.horizon {
            return Err(Error::dim(
                "policy document steps",
                doc.horizon,
                doc.steps.len(),
            ));
        }
        let steps = doc
            .steps
            .iter()
            .map(|s| {
                let gain = if doc.n_s == 0 {
                    DMatrix::zeros(doc.n_a, 0)
                } else {
                    from_rows::<T>(&s.gain)?
                };
                check_shape(&gain, doc.n_a, doc.n_s, "F")?;
                let offset =
                    DVector::from_iterator(s.offset.len(), s.offset.iter().map(|v| lit::<T>(*v)));
                check_len(&offset, doc.n_a, "e")?;
                let cov_sqrt = from_rows::<T>(&s.cov_sqrt)?;
                check_shape(&cov_sqrt, doc.n_a, doc.n_a, "Sigma_sqrt")?;
                PolicyStep::new(gain, offset, cov_sqrt)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

/// JSON layout: `{T, n_s, n_a, steps: [{F, e, Sigma_sqrt}]}` with row-major
/// matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n_s: usize,
    pub n_a: usize,
    pub steps: Vec<PolicyStepDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStepDocument {
    #[serde(rename = "F")]
    pub gain: Vec<Vec<f64>>,
    #[serde(rename = "e")]
    pub offset: Vec<f64>,
    #[serde(rename = "Sigma_sqrt")]
    pub cov_sqrt: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_layout() {
        let st = PolicyStep::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, 3.0),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let p = PolicyParams::new(vec![st]).unwrap();
        assert_eq!(p.pack().as_slice(), &[2.0, 3.0, 0.5]);
    }

    #[test]
    fn packed_length_formula() {
        let p = PolicyParams::<f64>::zeros(30, 4, 2);
        assert_eq!(p.pack().len(), 420);
        assert_eq!(p.packed_len(), 420);
    }

    #[test]
    fn zero_vector_unpacks_to_zero_policy() {
        let p = PolicyParams::<f64>::unpack(&vec![0.0; 28], 2, 4, 2).unwrap();
        assert_eq!(p, PolicyParams::zeros(2, 4, 2));
    }

    #[test]
    fn wrong_length_reports_expected_and_actual() {
        let err = PolicyParams::<f64>::unpack(&[0.0; 5], 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn deterministic_mode_ignores_covariance() {
        let st = PolicyStep::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -2.0]),
            DVector::from_element(1, 0.5),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = DVector::from_vec(vec![3.0, 1.0]);
        let a = sample_action(&st, &s, SampleMode::Deterministic, &mut rng, 1).unwrap();
        assert_eq!(a[0], 1.5);
        let err = sample_action(&st, &s, SampleMode::Stochastic, &mut rng, 7).unwrap_err();
        assert!(err.to_string().contains("timestep 7"), "{err}");
    }

    #[test]
    fn sample_mean_and_covariance() {
        let n = 100_000;
        let st = PolicyStep::new(
            DMatrix::zeros(2, 3),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = DVector::from_vec(vec![0.3, -0.1, 9.0]);
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += sample_action(&st, &s, SampleMode::Stochastic, &mut rng, 1).unwrap();
        }
        mean /= n as f64;
        let tol = 3.0 / (n as f64).sqrt();
        assert!(
            (mean[0] - 1.0).abs() < tol && (mean[1] - 2.0).abs() < tol,
            "{mean}"
        );

        let st = PolicyStep::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3])),
        )
        .unwrap();
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let a = sample_action(&st, &s, SampleMode::Stochastic, &mut rng, 1).unwrap();
            acc += &a * a.transpose();
        }
        acc /= n as f64;
        // Var of a sample variance is 2 sigma^4 / n; 4 standard errors.
        let se = |v: f64| 4.0 * (2.0f64).sqrt() * v / (n as f64).sqrt();
        assert!((acc[(0, 0)] - 0.04).abs() < se(0.04), "{acc}");
        assert!((acc[(1, 1)] - 0.09).abs() < se(0.09), "{acc}");
        assert!(acc[(0, 1)].abs() < 4.0 * 0.06 / (n as f64).sqrt(), "{acc}");
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let st = PolicyStep::new(
            DMatrix::<f64>::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let s = DVector::zeros(1);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_action(&st, &s, SampleMode::Stochastic, &mut rng, 1).unwrap()[0])
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn json_round_trip() {
        let v: Vec<f64> = (0..28).map(|i| i as f64 * 0.25 - 3.0).collect();
        let p = PolicyParams::<f64>::unpack(&v, 2, 4, 2).unwrap();
        let back = PolicyParams::<f64>::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let doc: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(doc["T"], 2);
        assert_eq!(doc["steps"][0]["F"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(v in proptest::collection::vec(-1e3f64..1e3, 3 * 14)) {
            let p = PolicyParams::<f64>::unpack(&v, 3, 4, 2).unwrap();
            let packed = p.pack();
            prop_assert_eq!(packed.as_slice(), v.as_slice());
            let q = PolicyParams::<f64>::unpack(p.pack().as_slice(), 3, 4, 2).unwrap();
            prop_assert_eq!(q, p);
        }

        #[test]
        fn covariance_is_symmetric(v in proptest::collection::vec(-10f64..10.0, 9)) {
            let st = PolicyStep::new(DMatrix::zeros(3, 1), DVector::zeros(3), DMatrix::from_column_slice(3, 3, &v)).unwrap();
            let c = st.covariance();
            prop_assert!(crate::linalg::asymmetry(&c) <= 1e-14);
            prop_assert!(crate::linalg::min_eigenvalue(&c) >= -1e-10 * c.trace().max(1.0));
        }
    }
}
