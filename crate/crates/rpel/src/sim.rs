//! Monte-Carlo benchmark harness: scenario specifications, correlated data
//! generators, contamination schemes, the standard estimator line-up, and a
//! replicated experiment runner that aggregates selection and estimation
//! metrics per method.
//!
//! Replicates are independent and run in parallel; replicate `k` owns the
//! RNG stream seeded with `base_seed + k`, so every method inside a
//! replicate sees the same data and reruns are byte-identical regardless of
//! the thread schedule.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::error::{Result, RpelError};
use crate::estfun::EstimatingContext;
use crate::leverage::LeverageWeights;
use crate::model::{
    median, BasisSet, CorrelationStructure, LinkKind, LongitudinalDataset, ModelFamily, Subject,
};
use crate::penalty::PenaltyConfig;
use crate::score::ScoreFunction;
use crate::solver::{initial_coefficients, SolverOptions};
use crate::tuning::{select, select_omega, TuningGrid};

/// Count scenarios scale the covariates by this factor before applying the
/// log link. The benchmark coefficients were chosen for an identity link;
/// exponentiating them against unit-variance covariates would overflow the
/// Poisson mean, so the covariates are shrunk instead of the coefficients,
/// keeping the estimand comparable across scenarios.
pub const COUNT_COVARIATE_SCALE: f64 = 0.2;

/// Largest admissible Poisson mean. Beyond this the inverse-CDF draw stops
/// being meaningful (counts approach the integer-precision limit of `f64`),
/// so generation fails instead of silently truncating.
pub const MAX_COUNT_MEAN: f64 = 1e8;

/// Distribution of the response layer given the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ErrorLaw {
    /// Additive errors `eps_i ~ N_m(0, R(alpha))`.
    GaussianMv,
    /// Additive errors `eps_i = z_i / sqrt(q_i / df)` with
    /// `z_i ~ N_m(0, R(alpha))` and one chi-square(df) draw per cluster:
    /// a multivariate t with heavy tails shared within the cluster.
    StudentT { df: f64 },
    /// Correlated Poisson counts: a `N_m(0, R(alpha))` vector pushed
    /// through the standard normal CDF and the Poisson quantile function.
    PoissonCopula,
}

/// Law of a single injected outlier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutlierLaw {
    Normal { mean: f64, sd: f64 },
    StudentT { df: f64 },
}

impl OutlierLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            OutlierLaw::Normal { mean, sd } => {
                if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
                    return Err(RpelError::InvalidData(format!(
                        "normal outlier law needs finite mean and positive sd, got N({mean}, {sd})"
                    )));
                }
            }
            OutlierLaw::StudentT { df } => {
                if !(df.is_finite() && df > 0.0) {
                    return Err(RpelError::InvalidData(format!(
                        "t outlier law needs positive degrees of freedom, got {df}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        match *self {
            OutlierLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                Ok(mean + sd * z)
            }
            OutlierLaw::StudentT { df } => {
                let t = rand_distr::StudentT::new(df)
                    .map_err(|e| RpelError::Numeric(format!("t sampler: {e}")))?;
                Ok(t.sample(rng))
            }
        }
    }
}

/// Contamination applied to a generated dataset. Each scheme picks
/// `floor(rate * N)` of the `N` observations uniformly without replacement;
/// the `Xy` variants pick the covariate and response victims independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Contamination {
    None,
    /// Adds an independent draw from `law` to each selected response.
    YOutlier { rate: f64, law: OutlierLaw },
    /// Replaces the first covariate with a draw from `x_law` on the
    /// selected rows, and adds `y_law` draws to the selected responses.
    XyOutlier {
        x_rate: f64,
        x_law: OutlierLaw,
        y_rate: f64,
        y_law: OutlierLaw,
    },
    /// Count responses: adds a chi-square(3) draw rounded to the nearest
    /// integer, so the contaminated response stays a valid count.
    CountY { rate: f64 },
    /// Count covariates and responses: adds 1 to the first covariate on the
    /// selected rows and applies the rounded chi-square response scheme.
    CountXy { x_rate: f64, y_rate: f64 },
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
        return Err(RpelError::InvalidData(format!(
            "{name} must lie in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

impl Contamination {
    fn validate(&self) -> Result<()> {
        match *self {
            Contamination::None => Ok(()),
            Contamination::YOutlier { rate, law } => {
                check_rate("contamination rate", rate)?;
                law.validate()
            }
            Contamination::XyOutlier {
                x_rate,
                x_law,
                y_rate,
                y_law,
            } => {
                check_rate("covariate contamination rate", x_rate)?;
                check_rate("response contamination rate", y_rate)?;
                x_law.validate()?;
                y_law.validate()
            }
            Contamination::CountY { rate } => check_rate("contamination rate", rate),
            Contamination::CountXy { x_rate, y_rate } => {
                check_rate("covariate contamination rate", x_rate)?;
                check_rate("response contamination rate", y_rate)
            }
        }
    }
}

/// Complete description of one benchmark scenario: dimensions, model
/// family, true coefficients, within-cluster correlation, response law,
/// contamination, and the replication plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Number of subjects.
    pub n: usize,
    /// Number of covariates.
    pub p: usize,
    /// Cluster size (observations per subject).
    pub m: usize,
    pub family: ModelFamily,
    /// True coefficients, length `p`.
    pub beta: Vec<f64>,
    /// True within-cluster correlation structure.
    pub correlation: CorrelationStructure,
    /// True correlation parameter of `R(alpha)`.
    pub alpha: f64,
    pub error_law: ErrorLaw,
    pub contamination: Contamination,
    pub replicates: usize,
    pub base_seed: u64,
}

/// The benchmark coefficient pattern `(3, 1.5, 0, 0, 2, 0, ..., 0)`,
/// truncated when `p < 5`.
pub fn default_beta(p: usize) -> Vec<f64> {
    let mut beta = vec![0.0; p];
    for (k, value) in [(0, 3.0), (1, 1.5), (4, 2.0)] {
        if k < p {
            beta[k] = value;
        }
    }
    beta
}

impl ScenarioSpec {
    /// Continuous benchmark scenario: 50 subjects observed 5 times,
    /// exchangeable correlation 0.7, the default sparse coefficients, and
    /// the requested additive error law.
    pub fn continuous(p: usize, error_law: ErrorLaw) -> Result<Self> {
        let spec = ScenarioSpec {
            n: 50,
            p,
            m: 5,
            family: ModelFamily::gaussian(),
            beta: default_beta(p),
            correlation: CorrelationStructure::Cs,
            alpha: 0.7,
            error_law,
            contamination: Contamination::None,
            replicates: 100,
            base_seed: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Count benchmark scenario: same shape as [`ScenarioSpec::continuous`]
    /// but with a log link and copula-correlated Poisson responses.
    pub fn count(p: usize) -> Result<Self> {
        let spec = ScenarioSpec {
            n: 50,
            p,
            m: 5,
            family: ModelFamily::poisson(),
            beta: default_beta(p),
            correlation: CorrelationStructure::Cs,
            alpha: 0.7,
            error_law: ErrorLaw::PoissonCopula,
            contamination: Contamination::None,
            replicates: 100,
            base_seed: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(RpelError::InvalidData(format!(
                "scenario needs at least 2 subjects, got {}",
                self.n
            )));
        }
        if self.p == 0 || self.m == 0 {
            return Err(RpelError::InvalidData(
                "scenario needs at least one covariate and one observation per subject".into(),
            ));
        }
        if self.beta.len() != self.p {
            return Err(RpelError::InvalidData(format!(
                "true coefficients have length {}, expected p = {}",
                self.beta.len(),
                self.p
            )));
        }
        if !self.beta.iter().all(|b| b.is_finite()) {
            return Err(RpelError::InvalidData(
                "true coefficients must be finite".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(RpelError::InvalidData(
                "scenario needs at least one replicate".into(),
            ));
        }
        let alpha_ok = match self.correlation {
            // Positive definiteness of the exchangeable matrix.
            CorrelationStructure::Cs => {
                let lower = if self.m > 1 {
                    -1.0 / (self.m as f64 - 1.0)
                } else {
                    -1.0
                };
                self.alpha.is_finite() && self.alpha > lower && self.alpha < 1.0
            }
            CorrelationStructure::Ar1 => self.alpha.is_finite() && self.alpha.abs() < 1.0,
        };
        if !alpha_ok {
            return Err(RpelError::InvalidData(format!(
                "correlation parameter {} leaves R(alpha) non-positive-definite for clusters of {}",
                self.alpha, self.m
            )));
        }
        match self.error_law {
            ErrorLaw::StudentT { df } => {
                if !(df.is_finite() && df > 0.0) {
                    return Err(RpelError::InvalidData(format!(
                        "t errors need positive degrees of freedom, got {df}"
                    )));
                }
                if self.family.link() != LinkKind::Identity {
                    return Err(RpelError::InvalidData(
                        "additive error laws need an identity-link family".into(),
                    ));
                }
            }
            ErrorLaw::GaussianMv => {
                if self.family.link() != LinkKind::Identity {
                    return Err(RpelError::InvalidData(
                        "additive error laws need an identity-link family".into(),
                    ));
                }
            }
            ErrorLaw::PoissonCopula => {
                if self.family.link() != LinkKind::Log {
                    return Err(RpelError::InvalidData(
                        "copula count responses need a log-link family".into(),
                    ));
                }
            }
        }
        self.contamination.validate()
    }

    /// Indices of the nonzero true coefficients.
    pub fn support(&self) -> Vec<usize> {
        (0..self.p).filter(|&k| self.beta[k] != 0.0).collect()
    }

    /// Covariance of the generated covariate rows:
    /// `(Sigma_x)_{kl} = 0.5^{|k-l|}`, times the square of the count
    /// covariate scale for copula scenarios.
    pub fn covariate_covariance(&self) -> DMatrix<f64> {
        let s2 = self.covariate_scale() * self.covariate_scale();
        DMatrix::from_fn(self.p, self.p, |k, l| {
            s2 * 0.5f64.powi((k as i32 - l as i32).abs())
        })
    }

    fn covariate_scale(&self) -> f64 {
        match self.error_law {
            ErrorLaw::PoissonCopula => COUNT_COVARIATE_SCALE,
            _ => 1.0,
        }
    }
}

/// Working/true correlation matrix `R(alpha)` for a cluster of size `m`.
fn correlation_matrix(structure: CorrelationStructure, alpha: f64, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |j, k| {
        if j == k {
            1.0
        } else {
            match structure {
                CorrelationStructure::Cs => alpha,
                CorrelationStructure::Ar1 => alpha.powi((j as i32 - k as i32).abs()),
            }
        }
    })
}

/// Lower Cholesky factors of the covariate covariance and of `R(alpha)`.
fn generation_factors(spec: &ScenarioSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l_x = Cholesky::new(spec.covariate_covariance())
        .ok_or_else(|| RpelError::Numeric("covariate covariance failed to factor".into()))?
        .l();
    let r = correlation_matrix(spec.correlation, spec.alpha, spec.m);
    let l_r = Cholesky::new(r)
        .ok_or_else(|| {
            RpelError::Numeric(format!(
                "within-cluster correlation R({}) failed to factor",
                spec.alpha
            ))
        })?
        .l();
    Ok((l_x, l_r))
}

fn standard_normal_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut z = DVector::zeros(len);
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    z
}

/// One cluster's covariate rows: each row is `L_x` times a fresh standard
/// normal vector.
fn draw_covariates(m: usize, l_x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = l_x.nrows();
    let mut x = DMatrix::zeros(m, p);
    for j in 0..m {
        let row = l_x * standard_normal_vector(p, rng);
        for k in 0..p {
            x[(j, k)] = row[k];
        }
    }
    x
}

fn default_times(m: usize) -> DVector<f64> {
    DVector::from_fn(m, |j, _| j as f64)
}

/// Generates one continuous dataset: correlated Gaussian covariates, an
/// identity-link mean, and additive `GaussianMv` or `StudentT` errors.
pub fn gen_continuous(spec: &ScenarioSpec, seed: u64) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_continuous_with(spec, &mut rng)
}

fn gen_continuous_with(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<LongitudinalDataset> {
    spec.validate()?;
    let df = match spec.error_law {
        ErrorLaw::GaussianMv => None,
        ErrorLaw::StudentT { df } => Some(df),
        ErrorLaw::PoissonCopula => {
            return Err(RpelError::InvalidData(
                "copula responses belong to the count generator".into(),
            ))
        }
    };
    let chi2 = df
        .map(rand_distr::ChiSquared::new)
        .transpose()
        .map_err(|e| RpelError::Numeric(format!("chi-square sampler: {e}")))?;
    let (l_x, l_r) = generation_factors(spec)?;
    let beta = DVector::from_column_slice(&spec.beta);
    let mut subjects = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = draw_covariates(spec.m, &l_x, rng);
        let mut eps = &l_r * standard_normal_vector(spec.m, rng);
        if let (Some(chi2), Some(df)) = (chi2, df) {
            let q: f64 = chi2.sample(rng);
            eps *= (df / q).sqrt();
        }
        let y = &x * &beta + eps;
        subjects.push(Subject {
            y,
            x,
            times: default_times(spec.m),
        });
    }
    LongitudinalDataset::new(subjects)
}

/// Generates one count dataset: scaled correlated Gaussian covariates, a
/// log-link Poisson mean, and within-cluster dependence induced by pushing
/// a correlated normal vector through the Gaussian copula.
pub fn gen_count(spec: &ScenarioSpec, seed: u64) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_count_with(spec, &mut rng)
}

fn gen_count_with(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<LongitudinalDataset> {
    spec.validate()?;
    if spec.error_law != ErrorLaw::PoissonCopula {
        return Err(RpelError::InvalidData(
            "additive error laws belong to the continuous generator".into(),
        ));
    }
    let (l_x, l_r) = generation_factors(spec)?;
    let beta = DVector::from_column_slice(&spec.beta);
    let std_normal = Normal::standard();
    let mut subjects = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let x = draw_covariates(spec.m, &l_x, rng);
        let z = &l_r * standard_normal_vector(spec.m, rng);
        let eta = &x * &beta;
        let mut y = DVector::zeros(spec.m);
        for j in 0..spec.m {
            let mu = eta[j].exp();
            if !mu.is_finite() || mu > MAX_COUNT_MEAN {
                return Err(RpelError::Numeric(format!(
                    "count mean {mu:.3e} at subject {i}, observation {j} exceeds {MAX_COUNT_MEAN:.0e}; \
                     rescale the coefficients or covariates"
                )));
            }
            y[j] = if mu > 0.0 {
                let u = std_normal.cdf(z[j]);
                let pois = Poisson::new(mu)
                    .map_err(|e| RpelError::Numeric(format!("count sampler: {e}")))?;
                pois.inverse_cdf(u) as f64
            } else {
                // exp underflowed: the distribution is degenerate at zero.
                0.0
            };
        }
        subjects.push(Subject {
            y,
            x,
            times: default_times(spec.m),
        });
    }
    LongitudinalDataset::new(subjects)
}

/// Dispatches to [`gen_continuous`] or [`gen_count`] per the error law.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(spec, &mut rng)
}

fn generate_with(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<LongitudinalDataset> {
    match spec.error_law {
        ErrorLaw::PoissonCopula => gen_count_with(spec, rng),
        _ => gen_continuous_with(spec, rng),
    }
}

/// Exclusive prefix sums of the cluster sizes; maps flat observation
/// indices to (subject, row) pairs.
fn observation_offsets(subjects: &[Subject]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(subjects.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for s in subjects {
        acc += s.cluster_size();
        offsets.push(acc);
    }
    offsets
}

fn locate(offsets: &[usize], flat: usize) -> (usize, usize) {
    let i = offsets.partition_point(|&o| o <= flat) - 1;
    (i, flat - offsets[i])
}

/// `floor(rate * total)` flat indices drawn uniformly without replacement,
/// returned sorted so the victims are visited in a fixed order.
fn pick_observations(total: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // The nudge absorbs the representation error of rate * total (e.g.
    // 0.3 * 10 lands just below 3).
    let count = (((rate * total as f64) + 1e-9).floor() as usize).min(total);
    let mut picked = rand::seq::index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    picked
}

fn add_to_responses(
    subjects: &mut [Subject],
    rate: f64,
    law: OutlierLaw,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let offsets = observation_offsets(subjects);
    for flat in pick_observations(*offsets.last().unwrap(), rate, rng) {
        let (i, j) = locate(&offsets, flat);
        subjects[i].y[j] += law.sample(rng)?;
    }
    Ok(())
}

fn add_rounded_chi2_to_responses(
    subjects: &mut [Subject],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let chi2 = rand_distr::ChiSquared::new(3.0)
        .map_err(|e| RpelError::Numeric(format!("chi-square sampler: {e}")))?;
    let offsets = observation_offsets(subjects);
    for flat in pick_observations(*offsets.last().unwrap(), rate, rng) {
        let (i, j) = locate(&offsets, flat);
        let draw: f64 = chi2.sample(rng);
        subjects[i].y[j] += (draw + 0.5).floor();
    }
    Ok(())
}

fn check_has_covariates(subjects: &[Subject]) -> Result<()> {
    if subjects.first().is_none_or(|s| s.x.ncols() == 0) {
        return Err(RpelError::InvalidData(
            "covariate contamination needs at least one covariate column".into(),
        ));
    }
    Ok(())
}

fn replace_first_covariate(
    subjects: &mut [Subject],
    rate: f64,
    law: OutlierLaw,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    check_has_covariates(subjects)?;
    let offsets = observation_offsets(subjects);
    for flat in pick_observations(*offsets.last().unwrap(), rate, rng) {
        let (i, j) = locate(&offsets, flat);
        subjects[i].x[(j, 0)] = law.sample(rng)?;
    }
    Ok(())
}

fn shift_first_covariate(subjects: &mut [Subject], rate: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    check_has_covariates(subjects)?;
    let offsets = observation_offsets(subjects);
    for flat in pick_observations(*offsets.last().unwrap(), rate, rng) {
        let (i, j) = locate(&offsets, flat);
        subjects[i].x[(j, 0)] += 1.0;
    }
    Ok(())
}

/// Applies a contamination scheme, touching exactly `floor(rate * N)`
/// entries per selection and leaving every other entry bit-identical.
pub fn contaminate(
    data: &LongitudinalDataset,
    contamination: &Contamination,
    seed: u64,
) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contaminate_with(data, contamination, &mut rng)
}

fn contaminate_with(
    data: &LongitudinalDataset,
    contamination: &Contamination,
    rng: &mut ChaCha8Rng,
) -> Result<LongitudinalDataset> {
    contamination.validate()?;
    let mut subjects = data.subjects().to_vec();
    match *contamination {
        Contamination::None => {}
        Contamination::YOutlier { rate, law } => add_to_responses(&mut subjects, rate, law, rng)?,
        Contamination::XyOutlier {
            x_rate,
            x_law,
            y_rate,
            y_law,
        } => {
            replace_first_covariate(&mut subjects, x_rate, x_law, rng)?;
            add_to_responses(&mut subjects, y_rate, y_law, rng)?;
        }
        Contamination::CountY { rate } => {
            add_rounded_chi2_to_responses(&mut subjects, rate, rng)?
        }
        Contamination::CountXy { x_rate, y_rate } => {
            shift_first_covariate(&mut subjects, x_rate, rng)?;
            add_rounded_chi2_to_responses(&mut subjects, y_rate, rng)?;
        }
    }
    LongitudinalDataset::new(subjects)
}

/// One estimator in the benchmark line-up. The labels are the usual
/// acronyms; the doc comments state what each one actually runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodConfig {
    /// Identity score, unit weights, multipliers left unpenalized
    /// (coefficient penalty only): the classical penalized-EL baseline.
    Pel,
    /// Identity score, unit weights, both penalties tuned.
    Npel,
    /// Exponential score at its default constant, leverage downweights,
    /// both penalties tuned.
    Erpel,
    /// Huber score at its default constant, leverage downweights, both
    /// penalties tuned.
    Hrpel,
    /// Tukey biweight score at its default constant, leverage downweights,
    /// both penalties tuned.
    Trpel,
}

impl MethodConfig {
    pub const ALL: [MethodConfig; 5] = [
        MethodConfig::Pel,
        MethodConfig::Npel,
        MethodConfig::Erpel,
        MethodConfig::Hrpel,
        MethodConfig::Trpel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodConfig::Pel => "PEL",
            MethodConfig::Npel => "NPEL",
            MethodConfig::Erpel => "ERPEL",
            MethodConfig::Hrpel => "HRPEL",
            MethodConfig::Trpel => "TRPEL",
        }
    }

    pub fn score(self) -> ScoreFunction {
        match self {
            MethodConfig::Pel | MethodConfig::Npel => ScoreFunction::Identity,
            MethodConfig::Erpel => ScoreFunction::exponential_default(),
            MethodConfig::Hrpel => ScoreFunction::huber_default(),
            MethodConfig::Trpel => ScoreFunction::tukey_default(),
        }
    }

    pub fn uses_leverage_weights(self) -> bool {
        matches!(
            self,
            MethodConfig::Erpel | MethodConfig::Hrpel | MethodConfig::Trpel
        )
    }

    pub fn penalizes_multipliers(self) -> bool {
        self != MethodConfig::Pel
    }
}

/// Selection and estimation metrics aggregated over a list of fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// True-zero coefficients estimated as zero, averaged over fits.
    pub c: f64,
    /// True-nonzero coefficients estimated as zero, averaged over fits.
    pub ic: f64,
    /// Percent of fits recovering the true support exactly.
    pub cf: f64,
    /// Retained estimating equations, averaged over fits.
    pub no_ee: f64,
    /// True-support coordinates the bias/mse entries refer to.
    pub support: Vec<usize>,
    /// Mean estimation error per true-support coordinate.
    pub bias: Vec<f64>,
    /// Mean squared estimation error per true-support coordinate.
    pub mse: Vec<f64>,
    /// Mean of the squared error norm over fits.
    pub aee: f64,
    /// Median of the quadratic form of the error in the covariate
    /// covariance (the model error under random covariates).
    pub mme: f64,
    /// Number of fits summarized.
    pub n_fits: usize,
}

/// Aggregates a list of `(beta_hat, retained estimating equations)` fits
/// against the true coefficients, using `sigma_x` (the covariate
/// covariance) for the model-error quadratic form.
pub fn metrics(
    fits: &[(DVector<f64>, usize)],
    truth: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
) -> Result<MetricSummary> {
    if fits.is_empty() {
        return Err(RpelError::InvalidData("no fits to summarize".into()));
    }
    let p = truth.len();
    if sigma_x.nrows() != p || sigma_x.ncols() != p {
        return Err(RpelError::InvalidData(format!(
            "covariate covariance is {}x{}, expected {p}x{p}",
            sigma_x.nrows(),
            sigma_x.ncols()
        )));
    }
    for (t, (beta, _)) in fits.iter().enumerate() {
        if beta.len() != p {
            return Err(RpelError::InvalidData(format!(
                "fit {t} has {} coefficients, expected {p}",
                beta.len()
            )));
        }
    }

    let support: Vec<usize> = (0..p).filter(|&k| truth[k] != 0.0).collect();
    let mut c_sum = 0.0;
    let mut ic_sum = 0.0;
    let mut exact = 0usize;
    let mut no_ee_sum = 0.0;
    let mut aee_sum = 0.0;
    let mut bias = vec![0.0; support.len()];
    let mut mse = vec![0.0; support.len()];
    let mut model_errors = Vec::with_capacity(fits.len());
    for (beta, no_ee) in fits {
        let mut matches = true;
        for k in 0..p {
            let true_zero = truth[k] == 0.0;
            let est_zero = beta[k] == 0.0;
            if true_zero && est_zero {
                c_sum += 1.0;
            }
            if !true_zero && est_zero {
                ic_sum += 1.0;
            }
            matches &= true_zero == est_zero;
        }
        exact += matches as usize;
        let diff = beta - truth;
        aee_sum += diff.norm_squared();
        model_errors.push(diff.dot(&(sigma_x * &diff)));
        for (t, &k) in support.iter().enumerate() {
            bias[t] += diff[k];
            mse[t] += diff[k] * diff[k];
        }
        no_ee_sum += *no_ee as f64;
    }
    let nf = fits.len() as f64;
    for value in bias.iter_mut().chain(mse.iter_mut()) {
        *value /= nf;
    }
    Ok(MetricSummary {
        c: c_sum / nf,
        ic: ic_sum / nf,
        cf: 100.0 * exact as f64 / nf,
        no_ee: no_ee_sum / nf,
        support,
        bias,
        mse,
        aee: aee_sum / nf,
        mme: median(&model_errors),
        n_fits: fits.len(),
    })
}

/// One method's aggregated results. `summary` is absent when every
/// replicate failed; `failures` counts the excluded replicates either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: MethodConfig,
    pub summary: Option<MetricSummary>,
    pub failures: usize,
}

/// Runs the full replicated experiment: per replicate, generate,
/// contaminate, and fit every method on the same data with penalty
/// strengths tuned over `grid`; then aggregate per-method metrics.
///
/// `working` is the correlation structure handed to the estimators, which
/// may deliberately differ from the generating structure. Replicate `k`
/// draws from a stream seeded with `base_seed + k`, so results do not
/// depend on the parallel schedule. A replicate whose tuning finds no
/// converged fit is recorded as a failure for that method and excluded
/// from its summary; structural errors (bad dimensions, impossible
/// scenarios) abort the whole run.
pub fn run_experiment(
    spec: &ScenarioSpec,
    methods: &[MethodConfig],
    working: CorrelationStructure,
    grid: &TuningGrid,
) -> Result<Vec<MethodResult>> {
    spec.validate()?;
    if methods.is_empty() {
        return Err(RpelError::InvalidData("no methods to run".into()));
    }
    let opts = SolverOptions::default();
    let replicate_fits: Vec<Vec<Option<(DVector<f64>, usize)>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|k| replicate(spec, methods, working, grid, &opts, k))
        .collect::<Result<_>>()?;

    let truth = DVector::from_column_slice(&spec.beta);
    let sigma_x = spec.covariate_covariance();
    methods
        .iter()
        .enumerate()
        .map(|(t, &method)| {
            let fits: Vec<(DVector<f64>, usize)> = replicate_fits
                .iter()
                .filter_map(|row| row[t].clone())
                .collect();
            let failures = spec.replicates - fits.len();
            let summary = if fits.is_empty() {
                None
            } else {
                Some(metrics(&fits, &truth, &sigma_x)?)
            };
            Ok(MethodResult {
                method,
                summary,
                failures,
            })
        })
        .collect()
}

fn replicate(
    spec: &ScenarioSpec,
    methods: &[MethodConfig],
    working: CorrelationStructure,
    grid: &TuningGrid,
    opts: &SolverOptions,
    k: usize,
) -> Result<Vec<Option<(DVector<f64>, usize)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed.wrapping_add(k as u64));
    let clean = generate_with(spec, &mut rng)?;
    let data = contaminate_with(&clean, &spec.contamination, &mut rng)?;
    let beta0 = initial_coefficients(&data, &spec.family)?;
    let basis = BasisSet::new(working);
    let unit = LeverageWeights::unit(&data);
    let leverage = if methods.iter().any(|m| m.uses_leverage_weights()) {
        Some(LeverageWeights::compute(&data, 1.0)?)
    } else {
        None
    };
    let template = PenaltyConfig::scad(1.0)?;

    let mut fits = Vec::with_capacity(methods.len());
    for &method in methods {
        let weights = if method.uses_leverage_weights() {
            leverage.as_ref().expect("computed above")
        } else {
            &unit
        };
        let ctx = EstimatingContext::new(&data, spec.family, basis, method.score(), weights)?;
        let selection = if method.penalizes_multipliers() {
            select(&ctx, grid, &template, &template, &beta0, opts)
        } else {
            select_omega(
                &ctx,
                &PenaltyConfig::scad(0.0)?,
                &grid.omega_values,
                &template,
                &beta0,
                opts,
            )
        };
        match selection {
            Ok(sel) => {
                let no_ee = sel.fit.lambda_support().len();
                fits.push(Some((sel.fit.beta, no_ee)));
            }
            Err(RpelError::TuningFailed { .. }) => fits.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(fits)
}
