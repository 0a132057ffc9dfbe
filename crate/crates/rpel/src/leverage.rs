//! Leverage-based covariate downweighting.
//!
//! Each observation row x_ij receives a weight
//! `w_ij = min{1, (b0 / d_ij^2)^(phi_w / 2)}` where `d_ij^2` is a robust
//! Mahalanobis distance of the covariate row and `b0` is the 0.95 quantile
//! of chi-square with p degrees of freedom. Rows in the bulk of the design
//! keep weight one; leverage points are shrunk toward zero.
//!
//! The location/scatter pair comes from a reduced minimum-covariance-
//! determinant estimate driven entirely by deterministic, permutation-
//! invariant starts, so repeated runs (and reordered datasets) produce
//! identical weights. When there are fewer than `2p` rows the scatter falls
//! back to a diagonal of squared MADs.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Result, RpelError};
use crate::model::{mad, median, LongitudinalDataset};

/// Maximum C-step iterations per start; convergence is almost always < 10.
const MAX_CSTEPS: usize = 30;

/// Per-observation covariate downweights, grouped by subject. The fitted
/// robust center and scatter factor are retained so weights can also be
/// produced for covariate rows outside the dataset (contamination probes).
#[derive(Debug, Clone)]
pub struct LeverageWeights {
    weights: Vec<DVector<f64>>,
    b0: f64,
    phi_w: f64,
    location: Option<(DVector<f64>, Cholesky<f64, nalgebra::Dyn>)>,
}

impl LeverageWeights {
    /// All-ones weights (no covariate downweighting).
    pub fn unit(data: &LongitudinalDataset) -> Self {
        LeverageWeights {
            weights: data
                .subjects()
                .iter()
                .map(|s| DVector::from_element(s.cluster_size(), 1.0))
                .collect(),
            b0: f64::INFINITY,
            phi_w: 0.0,
            location: None,
        }
    }

    /// Computes downweights from the pooled covariate rows of `data`.
    ///
    /// `phi_w > 0` sharpens the decay for leverage points; `phi_w = 1` is
    /// the usual default.
    pub fn compute(data: &LongitudinalDataset, phi_w: f64) -> Result<Self> {
        if !(phi_w.is_finite() && phi_w > 0.0) {
            return Err(RpelError::InvalidData(format!(
                "leverage exponent must be positive and finite, got {phi_w}"
            )));
        }
        let p = data.n_covariates();
        if p == 0 {
            return Ok(Self::unit(data));
        }
        let rows = data.stacked_covariates();
        let (center, scatter) = robust_location_scatter(&rows);
        let solver = ridged_cholesky(&scatter)?;
        let b0 = ChiSquared::new(p as f64)
            .map_err(|e| RpelError::Numeric(format!("chi-square quantile: {e}")))?
            .inverse_cdf(0.95);

        let fitted = LeverageWeights {
            weights: Vec::new(),
            b0,
            phi_w,
            location: Some((center, solver)),
        };
        let weights = data
            .subjects()
            .iter()
            .map(|s| {
                DVector::from_fn(s.cluster_size(), |j, _| fitted.weight_for(&s.x.row(j).transpose()))
            })
            .collect();
        Ok(LeverageWeights { weights, ..fitted })
    }

    /// Weight vector for subject `i`, aligned with its rows.
    pub fn subject(&self, i: usize) -> &DVector<f64> {
        &self.weights[i]
    }

    pub fn n_subjects(&self) -> usize {
        self.weights.len()
    }

    /// Weight for an arbitrary covariate row under the fitted center and
    /// scatter. Unit-weight instances return 1 for every row.
    pub fn weight_for(&self, x_row: &DVector<f64>) -> f64 {
        let Some((center, solver)) = &self.location else {
            return 1.0;
        };
        let diff = x_row - center;
        let d2 = diff.dot(&solver.solve(&diff)).max(0.0);
        if d2 <= self.b0 {
            1.0
        } else {
            (self.b0 / d2).powf(self.phi_w / 2.0)
        }
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn phi_w(&self) -> f64 {
        self.phi_w
    }
}

/// Cholesky with an escalating ridge on (near-)singular input.
fn ridged_cholesky(s: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(s.clone()) {
        return Ok(ch);
    }
    let p = s.nrows();
    let base = s.trace().abs() / p as f64;
    let mut ridge = (base * 1e-8).max(1e-12);
    for _ in 0..8 {
        let mut sr = s.clone();
        for k in 0..p {
            sr[(k, k)] += ridge;
        }
        if let Some(ch) = Cholesky::new(sr) {
            return Ok(ch);
        }
        ridge *= 100.0;
    }
    Err(RpelError::Numeric(
        "covariate scatter is numerically singular even after ridging".into(),
    ))
}

/// Robust center and scatter of the pooled rows: reduced MCD when the row
/// count supports it, diagonal MAD^2 otherwise.
fn robust_location_scatter(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let p = rows.ncols();
    if n < 2 * p {
        return mad_diagonal(rows);
    }
    mcd_reduced(rows)
}

/// Coordinatewise median center with diag(MAD^2) scatter. Degenerate columns
/// fall back to the standard deviation, then to one.
fn mad_diagonal(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let p = rows.ncols();
    let mut center = DVector::zeros(p);
    let mut scatter = DMatrix::zeros(p, p);
    for k in 0..p {
        let col: Vec<f64> = (0..n).map(|i| rows[(i, k)]).collect();
        center[k] = median(&col);
        let mut s = mad(&col);
        if s <= 0.0 {
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            s = var.sqrt();
        }
        if s <= 0.0 {
            s = 1.0;
        }
        scatter[(k, k)] = s * s;
    }
    (center, scatter)
}

/// Reduced MCD: a handful of deterministic starts, concentration steps to a
/// local optimum each, and the smallest-determinant solution rescaled for
/// consistency at the normal model.
fn mcd_reduced(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let p = rows.ncols();
    let h = (n + p + 1) / 2;

    let (med_center, mad_scatter) = mad_diagonal(rows);
    let identity = DMatrix::identity(p, p);
    let (mean_all, cov_all) = mean_cov(rows, &(0..n).collect::<Vec<_>>());
    let trimmed = trimmed_mean_center(rows, 0.2);

    // Each start is a (center, metric) pair used only to rank rows for the
    // initial h-subset; all are invariant to row order.
    let starts: [(&DVector<f64>, &DMatrix<f64>); 5] = [
        (&med_center, &mad_scatter),
        (&med_center, &identity),
        (&trimmed, &mad_scatter),
        (&med_center, &cov_all),
        (&mean_all, &cov_all),
    ];

    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    for (center, metric) in starts {
        let Some(ch) = Cholesky::new(metric.clone()).or_else(|| {
            let mut m = metric.clone();
            let bump = (m.trace().abs() / p as f64).max(1.0) * 1e-8;
            for k in 0..p {
                m[(k, k)] += bump;
            }
            Cholesky::new(m)
        }) else {
            continue;
        };
        let subset = h_smallest(rows, center, &ch, h);
        if let Some((logdet, c, s)) = concentrate(rows, subset, h) {
            let better = match &best {
                None => true,
                Some((d, _, _)) => logdet < *d,
            };
            if better {
                best = Some((logdet, c, s));
            }
        }
    }

    let (_, center, mut scatter) = match best {
        Some(b) => b,
        // Every start degenerated; fall back to the diagonal estimate.
        None => return mad_diagonal(rows),
    };

    // Consistency factor so the h-subset covariance estimates the full
    // covariance at the normal model.
    if let (Ok(chi_p), Ok(chi_p2)) = (ChiSquared::new(p as f64), ChiSquared::new(p as f64 + 2.0)) {
        let alpha = h as f64 / n as f64;
        let q = chi_p.inverse_cdf(alpha);
        let denom = chi_p2.cdf(q);
        if denom > 0.0 {
            scatter *= alpha / denom;
        }
    }
    (center, scatter)
}

/// Indices of the `h` rows nearest `center` in the metric `chol` factorizes.
fn h_smallest(
    rows: &DMatrix<f64>,
    center: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    h: usize,
) -> Vec<usize> {
    let n = rows.nrows();
    let p = rows.ncols();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut diff = DVector::zeros(p);
            for k in 0..p {
                diff[k] = rows[(i, k)] - center[k];
            }
            let d2 = diff.dot(&chol.solve(&diff));
            (d2, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(h);
    let mut idx: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

/// C-steps from an initial subset until the subset stabilizes. Returns the
/// log-determinant of the final subset covariance with its mean/covariance,
/// or None if the covariance stays singular.
fn concentrate(
    rows: &DMatrix<f64>,
    mut subset: Vec<usize>,
    h: usize,
) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let mut result = None;
    for _ in 0..MAX_CSTEPS {
        let (mean, cov) = mean_cov(rows, &subset);
        let ch = Cholesky::new(cov.clone())?;
        let logdet: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        result = Some((logdet, mean.clone(), cov));
        let next = h_smallest(rows, &mean, &ch, h);
        if next == subset {
            break;
        }
        subset = next;
    }
    result
}

fn mean_cov(rows: &DMatrix<f64>, subset: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let p = rows.ncols();
    let m = subset.len();
    let mut mean = DVector::zeros(p);
    for &i in subset {
        for k in 0..p {
            mean[k] += rows[(i, k)];
        }
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(p, p);
    for &i in subset {
        for a in 0..p {
            let da = rows[(i, a)] - mean[a];
            for b in a..p {
                cov[(a, b)] += da * (rows[(i, b)] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / (m as f64 - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Coordinatewise symmetrically trimmed mean (fraction `alpha` off each end).
fn trimmed_mean_center(rows: &DMatrix<f64>, alpha: f64) -> DVector<f64> {
    let n = rows.nrows();
    let p = rows.ncols();
    let cut = ((n as f64) * alpha).floor() as usize;
    let mut center = DVector::zeros(p);
    for k in 0..p {
        let mut col: Vec<f64> = (0..n).map(|i| rows[(i, k)]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let kept = &col[cut..n - cut];
        center[k] = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    center
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Dataset with `m = 2` rows per subject built from a flat row list.
    fn dataset_from_rows(rows: &[Vec<f64>]) -> LongitudinalDataset {
        assert!(rows.len() % 2 == 0);
        let p = rows[0].len();
        let subjects = rows
            .chunks(2)
            .map(|pair| Subject {
                y: DVector::zeros(2),
                x: DMatrix::from_fn(2, p, |i, j| pair[i][j]),
                times: DVector::from_vec(vec![0.0, 1.0]),
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    /// Reproducible bounded noise in [-0.8, 0.8] with decorrelated
    /// coordinates (splitmix64 of the cell index).
    fn wobble(i: usize, k: usize) -> f64 {
        let mut z = (i as u64)
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add((k as u64).wrapping_mul(0xBF58476D1CE4E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1.6
    }

    #[test]
    fn unit_weights_are_all_ones() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![wobble(i, 0), wobble(i, 1)]).collect();
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::unit(&data);
        for i in 0..data.n_subjects() {
            assert!(w.subject(i).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn clean_rows_keep_weight_near_one() {
        // 40 bounded rows in p = 2: the bulk of the design sits well below
        // the 0.95 chi-square(2) cutoff, so most weights are exactly one and
        // none falls far below it.
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![wobble(i, 0), wobble(i, 3)]).collect();
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        // chi-square(2) 0.95 quantile is -2 ln(0.05); the library inverse
        // CDF is a numeric root-find, hence the loose tolerance.
        assert_relative_eq!(w.b0(), 5.991464547107979, max_relative = 1e-8);
        let mut at_one = 0;
        for i in 0..data.n_subjects() {
            for &v in w.subject(i).iter() {
                assert!(v > 0.7, "clean weight {v}");
                if v == 1.0 {
                    at_one += 1;
                }
            }
        }
        assert!(at_one >= 28, "only {at_one}/40 rows kept weight one");
    }

    #[test]
    fn planted_leverage_point_is_downweighted() {
        let mut rows: Vec<Vec<f64>> = (0..40).map(|i| vec![wobble(i, 0), wobble(i, 3)]).collect();
        rows[10] = vec![60.0, -45.0];
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        // Row 10 lives in subject 5, position 0.
        let w_out = w.subject(5)[0];
        assert!(w_out > 0.0 && w_out < 0.05, "outlier weight {w_out}");
        // Clean rows are essentially untouched.
        assert!(w.subject(0)[0] > 0.9);
    }

    #[test]
    fn heavier_exponent_shrinks_outliers_harder() {
        let mut rows: Vec<Vec<f64>> = (0..40).map(|i| vec![wobble(i, 0), wobble(i, 3)]).collect();
        rows[4] = vec![30.0, 30.0];
        let data = dataset_from_rows(&rows);
        let w1 = LeverageWeights::compute(&data, 1.0).unwrap();
        let w2 = LeverageWeights::compute(&data, 2.0).unwrap();
        assert!(w2.subject(2)[0] < w1.subject(2)[0]);
        assert!(w1.subject(0)[0] > 0.9 && w2.subject(0)[0] > 0.9);
    }

    #[test]
    fn resists_a_cluster_of_leverage_points() {
        // 30% of rows sit in a tight remote cluster. A classical covariance
        // would absorb them; the concentrated subset must not.
        let mut rows: Vec<Vec<f64>> = (0..28).map(|i| vec![wobble(i, 0), wobble(i, 3)]).collect();
        for (j, row) in rows.iter_mut().enumerate().take(12) {
            *row = vec![100.0 + wobble(j, 5) * 0.1, 100.0 + wobble(j, 6) * 0.1];
        }
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        // Clean rows (subjects 6..) keep essentially full weight.
        for i in 6..data.n_subjects() {
            for &v in w.subject(i).iter() {
                assert!(v > 0.8, "clean subject {i} downweighted to {v}");
            }
        }
        // Clustered leverage rows are crushed.
        for i in 0..6 {
            for &v in w.subject(i).iter() {
                assert!(v < 1e-2, "leverage subject {i} kept weight {v}");
            }
        }
    }

    #[test]
    fn mad_fallback_used_when_rows_are_scarce() {
        // N = 6 rows with p = 4 < N < 2p triggers the diagonal path and
        // still flags the planted leverage row.
        let mut rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|k| wobble(i, k)).collect())
            .collect();
        rows[3] = vec![50.0, 50.0, 50.0, 50.0];
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        let flagged = w.subject(1)[1];
        assert!(flagged < 0.1, "outlier weight {flagged}");
        assert!(w.subject(0).iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn constant_column_does_not_break_fallback() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, wobble(i, 1), 0.0, 0.0]).collect();
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        for i in 0..data.n_subjects() {
            assert!(w.subject(i).iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn weight_for_agrees_with_stored_weights() {
        let mut rows: Vec<Vec<f64>> = (0..40).map(|i| vec![wobble(i, 0), wobble(i, 3)]).collect();
        rows[7] = vec![25.0, -30.0];
        let data = dataset_from_rows(&rows);
        let w = LeverageWeights::compute(&data, 1.0).unwrap();
        for (i, s) in data.subjects().iter().enumerate() {
            for j in 0..s.cluster_size() {
                let recomputed = w.weight_for(&s.x.row(j).transpose());
                assert_relative_eq!(recomputed, w.subject(i)[j], max_relative = 1e-12);
            }
        }
        // Unit weights score every row, even remote ones, as 1.
        let unit = LeverageWeights::unit(&data);
        assert_eq!(unit.weight_for(&DVector::from_vec(vec![1e6, 1e6])), 1.0);
    }

    #[test]
    fn rejects_bad_exponent() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![wobble(i, 0), wobble(i, 1)]).collect();
        let data = dataset_from_rows(&rows);
        assert!(LeverageWeights::compute(&data, 0.0).is_err());
        assert!(LeverageWeights::compute(&data, f64::NAN).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // Weights are a per-row property: reordering subjects permutes the
        // weight vectors but never changes their values.
        #[test]
        fn permutation_invariant(values in proptest::collection::vec(-3.0f64..3.0, 48)) {
            let rows: Vec<Vec<f64>> = values.chunks(2).map(|c| c.to_vec()).collect();
            let data = dataset_from_rows(&rows);
            let w = LeverageWeights::compute(&data, 1.0).unwrap();

            let mut shuffled: Vec<Subject> = data.subjects().to_vec();
            shuffled.reverse();
            let data_rev = LongitudinalDataset::new(shuffled).unwrap();
            let w_rev = LeverageWeights::compute(&data_rev, 1.0).unwrap();

            let n = data.n_subjects();
            for i in 0..n {
                let a = w.subject(i);
                let b = w_rev.subject(n - 1 - i);
                for j in 0..a.len() {
                    prop_assert!((a[j] - b[j]).abs() < 1e-10);
                }
            }
        }

        // Weights always live in (0, 1].
        #[test]
        fn weights_in_unit_interval(values in proptest::collection::vec(-50.0f64..50.0, 40)) {
            let rows: Vec<Vec<f64>> = values.chunks(2).map(|c| c.to_vec()).collect();
            let data = dataset_from_rows(&rows);
            let w = LeverageWeights::compute(&data, 1.0).unwrap();
            for i in 0..data.n_subjects() {
                for &v in w.subject(i).iter() {
                    prop_assert!(v > 0.0 && v <= 1.0);
                }
            }
        }
    }
}
