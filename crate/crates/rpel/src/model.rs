//! Marginal model pieces: longitudinal data container, mean/variance/link
//! family, and the working-correlation basis matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RpelError};

/// One subject's repeated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    /// Response vector, length `m_i`.
    pub y: DVector<f64>,
    /// Covariate matrix, `m_i x p`.
    pub x: DMatrix<f64>,
    /// Measurement times, length `m_i`.
    pub times: DVector<f64>,
}

impl Subject {
    pub fn cluster_size(&self) -> usize {
        self.y.len()
    }
}

/// Longitudinal dataset: independent subjects, correlated within-subject rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    p: usize,
}

impl LongitudinalDataset {
    /// Builds a dataset and checks the structural invariants: consistent
    /// covariate dimension, at least two subjects, non-empty clusters, and
    /// finite entries everywhere.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(RpelError::InvalidData(format!(
                "need at least 2 subjects, got {}",
                subjects.len()
            )));
        }
        let p = subjects[0].x.ncols();
        for (i, s) in subjects.iter().enumerate() {
            let m = s.y.len();
            if m == 0 {
                return Err(RpelError::InvalidData(format!("subject {i} has no rows")));
            }
            if s.x.nrows() != m || s.times.len() != m {
                return Err(RpelError::InvalidData(format!(
                    "subject {i}: y has {m} rows but X has {} and times has {}",
                    s.x.nrows(),
                    s.times.len()
                )));
            }
            if s.x.ncols() != p {
                return Err(RpelError::InvalidData(format!(
                    "subject {i}: X has {} columns, expected {p}",
                    s.x.ncols()
                )));
            }
            let finite = s.y.iter().all(|v| v.is_finite())
                && s.x.iter().all(|v| v.is_finite())
                && s.times.iter().all(|v| v.is_finite());
            if !finite {
                return Err(RpelError::InvalidData(format!(
                    "subject {i}: non-finite entry in y, X, or times"
                )));
            }
        }
        Ok(Self { subjects, p })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    /// Total number of observations across all subjects.
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.cluster_size()).sum()
    }

    /// All covariate rows stacked into one `(sum m_i) x p` matrix.
    pub fn stacked_covariates(&self) -> DMatrix<f64> {
        let total = self.n_obs();
        let mut out = DMatrix::zeros(total, self.p);
        let mut row = 0;
        for s in &self.subjects {
            for j in 0..s.cluster_size() {
                for k in 0..self.p {
                    out[(row, k)] = s.x[(j, k)];
                }
                row += 1;
            }
        }
        out
    }
}

/// Inverse link applied to the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkKind {
    Identity,
    Log,
}

/// Variance function v(mu).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceKind {
    Constant,
    EqualToMean,
}

/// Mean/variance family with dispersion. Only the two canonical pairings are
/// constructible: identity link with constant variance (continuous) and log
/// link with variance equal to the mean (counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFamily {
    link: LinkKind,
    variance: VarianceKind,
    dispersion: f64,
}

impl ModelFamily {
    /// Continuous model: identity link, constant variance, dispersion 1.
    pub fn gaussian() -> Self {
        Self {
            link: LinkKind::Identity,
            variance: VarianceKind::Constant,
            dispersion: 1.0,
        }
    }

    /// Count model: log link, variance equal to the mean, dispersion 1.
    pub fn poisson() -> Self {
        Self {
            link: LinkKind::Log,
            variance: VarianceKind::EqualToMean,
            dispersion: 1.0,
        }
    }

    pub fn with_dispersion(mut self, phi: f64) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return Err(RpelError::InvalidData(format!(
                "dispersion must be positive and finite, got {phi}"
            )));
        }
        self.dispersion = phi;
        Ok(self)
    }

    pub fn link(&self) -> LinkKind {
        self.link
    }

    pub fn variance(&self) -> VarianceKind {
        self.variance
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }
}

/// Computes the mean vector mu_i = g(X_i beta) for one subject.
///
/// `subject` is only used to label overflow errors.
pub fn mean_vector(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    family: &ModelFamily,
    subject: usize,
) -> Result<DVector<f64>> {
    debug_assert_eq!(x.ncols(), beta.len());
    let eta = x * beta;
    match family.link() {
        LinkKind::Identity => Ok(eta),
        LinkKind::Log => {
            let mut mu = eta;
            for j in 0..mu.len() {
                let v = mu[j].exp();
                if !v.is_finite() {
                    return Err(RpelError::Numeric(format!(
                        "mean overflow at subject {subject}, row {j}"
                    )));
                }
                mu[j] = v;
            }
            Ok(mu)
        }
    }
}

/// Diagonal of A_i = phi * diag(v(mu_ij)).
pub fn variance_diagonal(mu: &DVector<f64>, family: &ModelFamily) -> Result<DVector<f64>> {
    let phi = family.dispersion();
    match family.variance() {
        VarianceKind::Constant => Ok(DVector::from_element(mu.len(), phi)),
        VarianceKind::EqualToMean => {
            let mut a = DVector::zeros(mu.len());
            for j in 0..mu.len() {
                if mu[j] <= 0.0 {
                    return Err(RpelError::Numeric(format!(
                        "invalid mean for Poisson variance: mu[{j}] = {}",
                        mu[j]
                    )));
                }
                a[j] = phi * mu[j];
            }
            Ok(a)
        }
    }
}

/// A_i as a full diagonal matrix.
pub fn variance_matrix(mu: &DVector<f64>, family: &ModelFamily) -> Result<DMatrix<f64>> {
    let d = variance_diagonal(mu, family)?;
    Ok(DMatrix::from_diagonal(&d))
}

/// Mean Jacobian D_i = d mu_i / d beta (`m_i x p`): X_i for the identity
/// link, diag(mu_i) X_i for the log link.
pub fn mean_jacobian(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    family: &ModelFamily,
    subject: usize,
) -> Result<DMatrix<f64>> {
    match family.link() {
        LinkKind::Identity => Ok(x.clone()),
        LinkKind::Log => {
            let mu = mean_vector(x, beta, family, subject)?;
            let mut d = x.clone();
            for j in 0..d.nrows() {
                for k in 0..d.ncols() {
                    d[(j, k)] *= mu[j];
                }
            }
            Ok(d)
        }
    }
}

/// Working-correlation structure expanded by the basis matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationStructure {
    Cs,
    Ar1,
}

/// The basis-matrix set {M_1, M_2}: M_1 is the identity; M_2 encodes the
/// chosen structure (all off-diagonal ones for CS, first off-diagonals for
/// AR(1)). Matrices are built per subject at the subject's cluster size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSet {
    pub structure: CorrelationStructure,
}

impl BasisSet {
    pub fn new(structure: CorrelationStructure) -> Self {
        Self { structure }
    }

    /// Number of basis matrices (always 2 here).
    pub fn len(&self) -> usize {
        2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Materializes [M_1, M_2] at dimension `m`.
    pub fn matrices(&self, m: usize) -> Vec<DMatrix<f64>> {
        let ident = DMatrix::identity(m, m);
        let mut second = DMatrix::zeros(m, m);
        match self.structure {
            CorrelationStructure::Cs => {
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            second[(i, j)] = 1.0;
                        }
                    }
                }
            }
            CorrelationStructure::Ar1 => {
                for i in 1..m {
                    second[(i, i - 1)] = 1.0;
                    second[(i - 1, i)] = 1.0;
                }
            }
        }
        vec![ident, second]
    }

    /// Applies M_k to a vector in O(m) without materializing the matrix.
    /// `k` is the basis index (0 = identity, 1 = structure matrix).
    pub fn apply(&self, k: usize, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), out.len());
        match k {
            0 => out.copy_from_slice(v),
            1 => match self.structure {
                CorrelationStructure::Cs => {
                    let total: f64 = v.iter().sum();
                    for (o, &vi) in out.iter_mut().zip(v.iter()) {
                        *o = total - vi;
                    }
                }
                CorrelationStructure::Ar1 => {
                    let m = v.len();
                    for j in 0..m {
                        let left = if j > 0 { v[j - 1] } else { 0.0 };
                        let right = if j + 1 < m { v[j + 1] } else { 0.0 };
                        out[j] = left + right;
                    }
                }
            },
            _ => panic!("basis index {k} out of range"),
        }
    }
}

/// Median of a slice (averaging the two central order statistics).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation scaled for consistency at the normal (x1.4826).
pub fn mad(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&dev)
}

/// Robust dispersion plug-in: squared scaled MAD of residuals.
pub fn dispersion_from_residuals(residuals: &[f64]) -> f64 {
    let s = mad(residuals);
    (s * s).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_subject(m: usize, p: usize) -> Subject {
        Subject {
            y: DVector::from_fn(m, |i, _| i as f64),
            x: DMatrix::from_fn(m, p, |i, j| ((i + j) % 3) as f64 * 0.5),
            times: DVector::from_fn(m, |i, _| i as f64),
        }
    }

    #[test]
    fn dataset_rejects_single_subject() {
        let err = LongitudinalDataset::new(vec![toy_subject(3, 2)]).unwrap_err();
        assert!(err.to_string().contains("at least 2 subjects"));
    }

    #[test]
    fn dataset_rejects_dimension_mismatch() {
        let mut bad = toy_subject(3, 2);
        bad.x = DMatrix::zeros(2, 2);
        let err = LongitudinalDataset::new(vec![toy_subject(3, 2), bad]).unwrap_err();
        assert!(matches!(err, RpelError::InvalidData(_)));
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let mut bad = toy_subject(3, 2);
        bad.y[1] = f64::NAN;
        let err = LongitudinalDataset::new(vec![toy_subject(3, 2), bad]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn mean_zero_coefficients() {
        let x = DMatrix::identity(2, 2);
        let beta = DVector::zeros(2);
        let mu = mean_vector(&x, &beta, &ModelFamily::gaussian(), 0).unwrap();
        assert_eq!(mu, DVector::zeros(2));
        let mu = mean_vector(&x, &beta, &ModelFamily::poisson(), 0).unwrap();
        assert_eq!(mu, DVector::from_element(2, 1.0));
    }

    #[test]
    fn mean_dot_product() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let beta = DVector::from_vec(vec![3.0, 1.5]);
        let mu = mean_vector(&x, &beta, &ModelFamily::gaussian(), 0).unwrap();
        assert_relative_eq!(mu[0], 6.0);
    }

    #[test]
    fn mean_overflow_is_reported() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1000.0]);
        let beta = DVector::from_vec(vec![1.0]);
        let err = mean_vector(&x, &beta, &ModelFamily::poisson(), 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mean overflow"));
        assert!(msg.contains("subject 7"));
        assert!(msg.contains("row 1"));
    }

    #[test]
    fn variance_diagonals() {
        let fam = ModelFamily::gaussian();
        let a = variance_matrix(&DVector::from_element(3, 1.0), &fam).unwrap();
        assert_eq!(a, DMatrix::identity(3, 3));

        let fam = ModelFamily::poisson();
        let a = variance_diagonal(&DVector::from_vec(vec![2.0, 4.0]), &fam).unwrap();
        assert_eq!(a, DVector::from_vec(vec![2.0, 4.0]));

        let fam = ModelFamily::gaussian().with_dispersion(2.0).unwrap();
        let a = variance_diagonal(&DVector::from_vec(vec![2.0, 4.0]), &fam).unwrap();
        assert_eq!(a, DVector::from_vec(vec![2.0, 2.0]));
    }

    #[test]
    fn variance_rejects_nonpositive_poisson_mean() {
        let fam = ModelFamily::poisson();
        let err = variance_diagonal(&DVector::from_vec(vec![1.0, 0.0]), &fam).unwrap_err();
        assert!(err.to_string().contains("invalid mean for Poisson variance"));
    }

    #[test]
    fn jacobian_identity_link_is_design() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let beta = DVector::from_vec(vec![0.3, -0.7]);
        let d = mean_jacobian(&x, &beta, &ModelFamily::gaussian(), 0).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn jacobian_log_link_at_zero_beta() {
        let x = DMatrix::identity(2, 2);
        let beta = DVector::zeros(2);
        let d = mean_jacobian(&x, &beta, &ModelFamily::poisson(), 0).unwrap();
        assert_eq!(d, DMatrix::identity(2, 2));
    }

    #[test]
    fn jacobian_log_link_row_scaling() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let beta = DVector::from_vec(vec![2.0_f64.ln(), 0.0]);
        let d = mean_jacobian(&x, &beta, &ModelFamily::poisson(), 0).unwrap();
        assert_relative_eq!(d[(0, 0)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(d[(0, 1)], 4.0, max_relative = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        // Random (X, beta) with entries in [-1, 1]; relative tolerance 1e-6.
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for family in [ModelFamily::gaussian(), ModelFamily::poisson()] {
            for _ in 0..20 {
                let m = 4;
                let p = 3;
                let x = DMatrix::from_fn(m, p, |_, _| next());
                let beta = DVector::from_fn(p, |_, _| next());
                let d = mean_jacobian(&x, &beta, &family, 0).unwrap();
                let h = 1e-6;
                for t in 0..p {
                    let mut bp = beta.clone();
                    bp[t] += h;
                    let mut bm = beta.clone();
                    bm[t] -= h;
                    let mp = mean_vector(&x, &bp, &family, 0).unwrap();
                    let mm = mean_vector(&x, &bm, &family, 0).unwrap();
                    for j in 0..m {
                        let fd = (mp[j] - mm[j]) / (2.0 * h);
                        let scale = fd.abs().max(1.0);
                        assert!(
                            (d[(j, t)] - fd).abs() / scale < 1e-6,
                            "family {family:?} entry ({j},{t}): analytic {} vs fd {fd}",
                            d[(j, t)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn basis_structure_all_sizes() {
        for m in 1..=10 {
            let cs = BasisSet::new(CorrelationStructure::Cs).matrices(m);
            let ones = DMatrix::from_element(m, m, 1.0);
            assert_eq!(&cs[1] + DMatrix::identity(m, m), ones);
            assert_eq!(cs[0], DMatrix::identity(m, m));

            let ar = BasisSet::new(CorrelationStructure::Ar1).matrices(m);
            for i in 0..m {
                for j in 0..m {
                    let expected = if i.abs_diff(j) == 1 { 1.0 } else { 0.0 };
                    assert_eq!(ar[1][(i, j)], expected, "ar1 entry ({i},{j}) at m={m}");
                }
            }
            // Symmetry of every basis matrix.
            for set in [&cs, &ar] {
                for mk in set.iter() {
                    assert_eq!(mk, &mk.transpose());
                }
            }
        }
    }

    #[test]
    fn basis_apply_matches_matrices() {
        for structure in [CorrelationStructure::Cs, CorrelationStructure::Ar1] {
            let basis = BasisSet::new(structure);
            for m in 1..=6 {
                let mats = basis.matrices(m);
                let v: Vec<f64> = (0..m).map(|i| (i as f64) * 0.7 - 1.0).collect();
                let vv = DVector::from_vec(v.clone());
                for k in 0..2 {
                    let mut out = vec![0.0; m];
                    basis.apply(k, &v, &mut out);
                    let direct = &mats[k] * &vv;
                    for j in 0..m {
                        assert_relative_eq!(out[j], direct[j], max_relative = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn mad_of_symmetric_sample() {
        let vals = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert_relative_eq!(median(&vals), 0.0);
        assert_relative_eq!(mad(&vals), 1.4826);
    }
}
