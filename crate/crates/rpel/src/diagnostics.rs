//! Influence diagnostics and plug-in standard errors for a fitted state.
//!
//! Both estimation layers are penalized M-estimators, so the first-order
//! effect of one contaminated cluster z on either estimate has the
//! classical form
//!
//! ```text
//! IF(z) = -(H + P'')^{-1} [ u(z) + grad P ],
//! ```
//!
//! where `u(z)` is the single-cluster gradient of that layer's loss, `H`
//! the dataset-average curvature, and the inverse is taken on the active
//! block only: coordinates pinned at zero by the penalty do not move under
//! infinitesimal contamination, so their rows of the inverse are zero.
//! With a bounded score and leverage downweights, `u(z)` stays bounded in
//! both the response and the covariates, and so does the influence; with
//! the identity score it grows without bound. [`influence_sweep`] makes
//! that comparison concrete on a grid of synthetic contaminated clusters.
//!
//! [`sandwich`] computes the companion inference quantities for the active
//! coefficients: the information matrix built from the mean moment
//! Jacobian and the moment second-moment matrix (both restricted to the
//! retained moments), the standard errors from its inverse, and the
//! first-order bias correction to subtract from the fitted coefficients.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, RpelError};
use crate::estfun::EstimatingContext;
use crate::model::{mean_vector, median, Subject};
use crate::penalty::PenaltyConfig;
use crate::solver::{log_star_d1, log_star_d2, ElState};

/// Magnitudes of the default contamination shifts.
const SHIFT_MAGNITUDES: [f64; 5] = [1.0, 10.0, 100.0, 1e4, 1e6];

/// One synthetic contamination applied to the probe cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeShift {
    /// Added to every response in the cluster.
    Response(f64),
    /// Added to one covariate column across the cluster, responses left at
    /// the clean fitted mean.
    Covariate { column: usize, delta: f64 },
}

/// Influence functions evaluated over a grid of contaminated clusters.
#[derive(Debug, Clone)]
pub struct InfluenceReport {
    /// The shift that produced each probe, aligned with the value vectors.
    pub probes: Vec<ProbeShift>,
    /// Multiplier influence per probe, length r each.
    pub if_lambda: Vec<DVector<f64>>,
    /// Coefficient influence per probe, length p each.
    pub if_beta: Vec<DVector<f64>>,
    /// Largest max-norm of the multiplier influence over the grid.
    pub sup_if_lambda: f64,
    /// Largest max-norm of the coefficient influence over the grid.
    pub sup_if_beta: f64,
}

/// Plug-in inference quantities for the active coefficients.
#[derive(Debug, Clone)]
pub struct SandwichEstimate {
    /// Information matrix for the active coefficients, `s x s`.
    pub j_matrix: DMatrix<f64>,
    /// First-order bias correction, aligned with `beta_support`.
    pub bias: DVector<f64>,
    /// Standard errors `sqrt(diag(J^{-1})/n)`, aligned with `beta_support`.
    pub std_errors: DVector<f64>,
    /// Moment coordinates used: the support of the fitted multipliers, or
    /// every moment when that support is too small to identify the active
    /// coefficients.
    pub lambda_support: Vec<usize>,
    /// Active coefficient coordinates.
    pub beta_support: Vec<usize>,
    /// Whether the moment second-moment matrix needed a ridge to factor.
    pub ridged: bool,
}

fn sign0(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// Single-cluster gradient of the multiplier loss `-log*(1 + lambda' g)`:
/// `-log*'(1 + lambda' g_z) g_z`. The pseudo-log derivative supplies both
/// branches, so the value is continuous across the threshold.
fn multiplier_score(g_z: &DVector<f64>, lambda: &DVector<f64>, eps: f64) -> DVector<f64> {
    let t = 1.0 + lambda.dot(g_z);
    g_z * (-log_star_d1(t, eps))
}

/// Single-cluster gradient of the coefficient loss in beta with the
/// multipliers held fixed: `-log*'(1 + lambda' g_z) J_z' lambda`, where
/// `J_z` is the moment Jacobian of the probe cluster.
fn coefficient_score(
    jac_z: &DMatrix<f64>,
    g_z: &DVector<f64>,
    lambda: &DVector<f64>,
    eps: f64,
) -> DVector<f64> {
    let t = 1.0 + lambda.dot(g_z);
    jac_z.transpose() * lambda * (-log_star_d1(t, eps))
}

/// Leverage weights for a probe cluster under the fitted center/scatter.
fn probe_weights(ctx: &EstimatingContext, probe: &Subject) -> DVector<f64> {
    DVector::from_fn(probe.cluster_size(), |j, _| {
        ctx.weights().weight_for(&probe.x.row(j).transpose())
    })
}

/// Solves `(H + P'') x = rhs` on the active block and scatters `-x` into a
/// full-length vector, zero elsewhere. An all-zero right-hand side
/// short-circuits to zero without touching the curvature: a point that
/// nothing pushes on does not move, even where the penalty is flat.
fn active_block_influence(
    curvature: DMatrix<f64>,
    rhs: &DVector<f64>,
    active: &[usize],
    full_len: usize,
    label: &str,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(full_len);
    if active.is_empty() {
        return Ok(out);
    }
    let rhs_a = DVector::from_fn(active.len(), |a, _| rhs[active[a]]);
    if rhs_a.iter().all(|v| *v == 0.0) {
        return Ok(out);
    }
    let sol = curvature
        .lu()
        .solve(&rhs_a)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| RpelError::Numeric(format!("degenerate {label} curvature")))?;
    for (a, &j) in active.iter().enumerate() {
        out[j] = -sol[a];
    }
    Ok(out)
}

/// Influence of one contaminated cluster on the fitted multipliers.
///
/// The curvature is the dataset average of the multiplier-loss Hessian
/// plus the penalty's second derivative, restricted to the support of
/// `lambda`. Coordinates outside the support do not respond; a singular
/// active block is an error.
pub fn if_lambda(
    ctx: &EstimatingContext,
    probe: &Subject,
    lambda: &DVector<f64>,
    beta: &DVector<f64>,
    p1: &PenaltyConfig,
    eps: f64,
) -> Result<DVector<f64>> {
    let r = ctx.moment_dim();
    if lambda.len() != r {
        return Err(RpelError::InvalidData(format!(
            "multiplier vector has length {}, expected {r}",
            lambda.len()
        )));
    }
    let active: Vec<usize> = (0..r).filter(|&j| lambda[j] != 0.0).collect();
    let w = probe_weights(ctx, probe);
    let g_z = ctx.g_for(probe, &w, beta)?;
    let mut rhs = multiplier_score(&g_z, lambda, eps);
    for j in 0..r {
        rhs[j] += p1.d1(lambda[j].abs()) * sign0(lambda[j]);
    }
    if active.is_empty() {
        return Ok(DVector::zeros(r));
    }

    let eval = ctx.eval_beta(beta)?;
    let gm = eval.g_matrix();
    let n = ctx.n_subjects();
    let mut curv = DMatrix::zeros(active.len(), active.len());
    for i in 0..n {
        let gi = gm.column(i);
        let c = -log_star_d2(1.0 + lambda.dot(&gi), eps);
        for (a, &ja) in active.iter().enumerate() {
            for (b, &jb) in active.iter().enumerate() {
                curv[(a, b)] += c * gi[ja] * gi[jb];
            }
        }
    }
    curv /= n as f64;
    for (a, &ja) in active.iter().enumerate() {
        curv[(a, a)] += p1.d2(lambda[ja].abs());
    }
    active_block_influence(curv, &rhs, &active, r, "multiplier")
}

/// Influence of one contaminated cluster on the fitted coefficients, with
/// the multipliers held at their fitted values.
///
/// The curvature uses the Gauss-Newton form: the dataset average of
/// `|log*''| (J_i' lambda)(J_i' lambda)'` on the active block, dropping the
/// second derivative of the moment vector. That is the part of the Hessian
/// that survives at a stationary multiplier and it keeps the block positive
/// semidefinite before the penalty term is added.
pub fn if_beta(
    ctx: &EstimatingContext,
    probe: &Subject,
    beta: &DVector<f64>,
    lambda: &DVector<f64>,
    p2: &PenaltyConfig,
    eps: f64,
) -> Result<DVector<f64>> {
    let p = ctx.n_covariates();
    if beta.len() != p {
        return Err(RpelError::InvalidData(format!(
            "coefficient vector has length {}, expected {p}",
            beta.len()
        )));
    }
    let active: Vec<usize> = (0..p).filter(|&t| beta[t] != 0.0).collect();
    let w = probe_weights(ctx, probe);
    let g_z = ctx.g_for(probe, &w, beta)?;
    let jac_z = ctx.g_jacobian_for(probe, &w, beta)?;
    let mut rhs = coefficient_score(&jac_z, &g_z, lambda, eps);
    for t in 0..p {
        rhs[t] += p2.d1(beta[t].abs()) * sign0(beta[t]);
    }
    if active.is_empty() {
        return Ok(DVector::zeros(p));
    }

    let eval = ctx.eval_beta(beta)?;
    let gm = eval.g_matrix();
    let n = ctx.n_subjects();
    let mut curv = DMatrix::zeros(active.len(), active.len());
    for i in 0..n {
        let gi = gm.column(i);
        let c = -log_star_d2(1.0 + lambda.dot(&gi), eps);
        let ui = ctx.g_jacobian(i, beta)?.transpose() * lambda;
        for (a, &ta) in active.iter().enumerate() {
            for (b, &tb) in active.iter().enumerate() {
                curv[(a, b)] += c * ui[ta] * ui[tb];
            }
        }
    }
    curv /= n as f64;
    for (a, &ta) in active.iter().enumerate() {
        curv[(a, a)] += p2.d2(beta[ta].abs());
    }
    active_block_influence(curv, &rhs, &active, p, "coefficient")
}

/// Standard errors and bias correction for the active coefficients.
///
/// With `G = supp(lambda)` (widened to every moment when `|G| < |A|`,
/// including the all-zero case) and `A = supp(beta)`:
///
/// ```text
/// V  = (1/n) sum_i g_G g_G',
/// J  = Gbar' V^{-1} Gbar,          Gbar = mean moment Jacobian on (G, A),
/// b  = J^{-1} Gbar' V^{-1} (1/n) sum_i g_G log*'(1 + lambda' g_i),
/// se = sqrt(diag(J^{-1}) / n).
/// ```
///
/// The tilted average uses the pseudo-log derivative, which equals
/// `1 / (1 + lambda' g_i)` everywhere a converged fit puts its weights. A
/// singular `V` is retried with a ridge of `1e-8 tr(V)/|G|` and flagged.
pub fn sandwich(ctx: &EstimatingContext, state: &ElState) -> Result<SandwichEstimate> {
    let beta_support = state.beta_support();
    if beta_support.is_empty() {
        return Err(RpelError::Estimation(
            "no active coefficients to form standard errors for".into(),
        ));
    }
    let r = ctx.moment_dim();
    let mut lambda_support = state.lambda_support();
    // Fewer retained moments than active coefficients cannot identify them
    // (the information matrix would be rank-deficient by construction), and
    // an empty support carries no information at all. Both cases fall back
    // to the full moment vector.
    if lambda_support.len() < beta_support.len() {
        lambda_support = (0..r).collect();
    }
    let n = ctx.n_subjects();
    let nf = n as f64;
    let q = lambda_support.len();
    let s = beta_support.len();

    let eval = ctx.eval_beta(&state.beta)?;
    let gm = eval.g_matrix();
    let mut second = DMatrix::zeros(q, q);
    let mut tilted = DVector::zeros(q);
    for i in 0..n {
        let gi = gm.column(i);
        let d = log_star_d1(1.0 + state.lambda.dot(&gi), state.epsilon);
        for (a, &ja) in lambda_support.iter().enumerate() {
            tilted[a] += gi[ja] * d;
            for (b, &jb) in lambda_support.iter().enumerate() {
                second[(a, b)] += gi[ja] * gi[jb];
            }
        }
    }
    second /= nf;
    tilted /= nf;

    let jbar = ctx.g_jacobian_mean(&state.beta)?;
    let gbar = DMatrix::from_fn(q, s, |a, b| jbar[(lambda_support[a], beta_support[b])]);

    let (chol, ridged) = match Cholesky::new(second.clone()) {
        Some(c) => (c, false),
        None => {
            let ridge = 1e-8 * second.trace() / q as f64;
            let mut ridged_second = second;
            for a in 0..q {
                ridged_second[(a, a)] += ridge;
            }
            let c = Cholesky::new(ridged_second).ok_or_else(|| {
                RpelError::Numeric(
                    "moment second-moment matrix is singular even after ridging".into(),
                )
            })?;
            (c, true)
        }
    };
    let vinv_gbar = chol.solve(&gbar);
    let j_raw = gbar.transpose() * &vinv_gbar;
    let j_matrix = (&j_raw + j_raw.transpose()) * 0.5;
    let j_chol = Cholesky::new(j_matrix.clone()).ok_or_else(|| {
        RpelError::Numeric("coefficient information matrix is singular on the active set".into())
    })?;
    let bias = j_chol.solve(&(gbar.transpose() * chol.solve(&tilted)));
    let j_inv = j_chol.inverse();
    let std_errors = DVector::from_fn(s, |k, _| (j_inv[(k, k)] / nf).sqrt());

    Ok(SandwichEstimate {
        j_matrix,
        bias,
        std_errors,
        lambda_support,
        beta_support,
        ridged,
    })
}

/// Builds the default contamination grid: response shifts of +-1, +-10,
/// +-10^2, +-10^4, +-10^6 applied to a cluster sitting at the columnwise
/// median covariate row, plus the same shift sizes applied to the first
/// covariate column with the response left at the clean fitted mean.
///
/// Under the log link, large covariate shifts can overflow the probe mean;
/// the error propagates and the caller should supply a tamer grid to
/// [`influence_sweep_at`] instead.
pub fn default_probes(
    ctx: &EstimatingContext,
    beta: &DVector<f64>,
) -> Result<Vec<(ProbeShift, Subject)>> {
    let data = ctx.data();
    let p = data.n_covariates();
    let rows = data.stacked_covariates();
    let med = DVector::from_fn(p, |k, _| {
        let col: Vec<f64> = (0..rows.nrows()).map(|i| rows[(i, k)]).collect();
        median(&col)
    });
    let template = &data.subjects()[0];
    let m = template.cluster_size();
    let x0 = DMatrix::from_fn(m, p, |_, k| med[k]);
    let mu0 = mean_vector(&x0, beta, ctx.family(), usize::MAX)?;
    let times = &template.times;

    let mut probes = Vec::with_capacity(4 * SHIFT_MAGNITUDES.len());
    for &mag in &SHIFT_MAGNITUDES {
        for sign in [1.0, -1.0] {
            let delta = sign * mag;
            probes.push((
                ProbeShift::Response(delta),
                Subject {
                    y: DVector::from_fn(m, |j, _| mu0[j] + delta),
                    x: x0.clone(),
                    times: times.clone(),
                },
            ));
            let mut x = x0.clone();
            for j in 0..m {
                x[(j, 0)] += delta;
            }
            probes.push((
                ProbeShift::Covariate { column: 0, delta },
                Subject {
                    y: mu0.clone(),
                    x,
                    times: times.clone(),
                },
            ));
        }
    }
    Ok(probes)
}

/// Evaluates both influence functions at every probe, recording sup norms.
/// Probes are independent and run concurrently.
pub fn influence_sweep_at(
    ctx: &EstimatingContext,
    state: &ElState,
    p1: &PenaltyConfig,
    p2: &PenaltyConfig,
    probes: Vec<(ProbeShift, Subject)>,
) -> Result<InfluenceReport> {
    let values: Result<Vec<(DVector<f64>, DVector<f64>)>> = probes
        .par_iter()
        .map(|(_, subj)| {
            let il = if_lambda(ctx, subj, &state.lambda, &state.beta, p1, state.epsilon)?;
            let ib = if_beta(ctx, subj, &state.beta, &state.lambda, p2, state.epsilon)?;
            Ok((il, ib))
        })
        .collect();
    let values = values?;

    let mut sup_if_lambda = 0.0f64;
    let mut sup_if_beta = 0.0f64;
    let mut if_lambda_vals = Vec::with_capacity(values.len());
    let mut if_beta_vals = Vec::with_capacity(values.len());
    for (il, ib) in values {
        sup_if_lambda = sup_if_lambda.max(il.amax());
        sup_if_beta = sup_if_beta.max(ib.amax());
        if_lambda_vals.push(il);
        if_beta_vals.push(ib);
    }
    Ok(InfluenceReport {
        probes: probes.into_iter().map(|(shift, _)| shift).collect(),
        if_lambda: if_lambda_vals,
        if_beta: if_beta_vals,
        sup_if_lambda,
        sup_if_beta,
    })
}

/// [`influence_sweep_at`] over the default contamination grid.
pub fn influence_sweep(
    ctx: &EstimatingContext,
    state: &ElState,
    p1: &PenaltyConfig,
    p2: &PenaltyConfig,
) -> Result<InfluenceReport> {
    let probes = default_probes(ctx, &state.beta)?;
    influence_sweep_at(ctx, state, p1, p2, probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leverage::LeverageWeights;
    use crate::model::{BasisSet, CorrelationStructure, LongitudinalDataset, ModelFamily};
    use crate::score::ScoreFunction;
    use crate::solver::{initial_coefficients, solve, SolveTrace, SolverOptions};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn wobble(i: usize, k: usize) -> f64 {
        let mut z = (i as u64)
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add((k as u64).wrapping_mul(0xBF58476D1CE4E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1.6
    }

    fn noise(i: usize, k: usize) -> f64 {
        (wobble(i, k) + wobble(i + 7919, k + 13)) * 0.6
    }

    fn linear_data(n: usize, m: usize, beta_true: &[f64]) -> LongitudinalDataset {
        let p = beta_true.len();
        let subjects = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, p, |j, k| wobble(i * m + j, k) * 1.5);
                let shared = noise(i, 900) * 0.5;
                let y = DVector::from_fn(m, |j, _| {
                    let mut v = shared + noise(i * m + j, 17) * 0.4;
                    for k in 0..p {
                        v += x[(j, k)] * beta_true[k];
                    }
                    v
                });
                let times = DVector::from_fn(m, |j, _| j as f64);
                Subject { y, x, times }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn manual_state(beta: DVector<f64>, lambda: DVector<f64>, eps: f64) -> ElState {
        ElState {
            beta,
            lambda,
            objective: 0.0,
            el_sum: 0.0,
            epsilon: eps,
            trace: SolveTrace::default(),
        }
    }

    #[test]
    fn multiplier_score_matches_hand_values() {
        let eps = 0.05;
        // Log branch at zero multipliers: t = 1, so the score is just -g.
        let u = multiplier_score(&DVector::from_vec(vec![2.0]), &DVector::zeros(1), eps);
        assert_relative_eq!(u[0], -2.0);
        // Quadratic branch: t = 1 + (-1)(1) = 0 <= eps, score = -(2/eps)g.
        let u = multiplier_score(
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![-1.0]),
            eps,
        );
        assert_relative_eq!(u[0], -(2.0 / eps));
    }

    #[test]
    fn scores_agree_across_the_branch_seam() {
        let eps = 0.05;
        let g = DVector::from_vec(vec![0.8, -0.3]);
        let jac = DMatrix::from_row_slice(2, 2, &[0.4, -0.2, 0.1, 0.7]);
        for delta in [1e-13, 1e-12] {
            let lam_hi = DVector::from_vec(vec![(eps - 1.0 + delta) / 0.8, 0.0]);
            let lam_lo = DVector::from_vec(vec![(eps - 1.0 - delta) / 0.8, 0.0]);
            let u_hi = multiplier_score(&g, &lam_hi, eps);
            let u_lo = multiplier_score(&g, &lam_lo, eps);
            assert!((&u_hi - &u_lo).amax() < 1e-8, "multiplier seam at {delta}");
            let c_hi = coefficient_score(&jac, &g, &lam_hi, eps);
            let c_lo = coefficient_score(&jac, &g, &lam_lo, eps);
            assert!((&c_hi - &c_lo).amax() < 1e-8, "coefficient seam at {delta}");
        }
    }

    #[test]
    fn zero_multipliers_and_zero_moments_mean_zero_influence() {
        let data = linear_data(20, 3, &[1.0, -0.5]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let beta = DVector::from_vec(vec![1.0, -0.5]);
        // A probe whose responses sit exactly on the fitted mean has zero
        // residuals, hence zero moments.
        let x = DMatrix::from_element(3, 2, 0.4);
        let probe = Subject {
            y: &x * &beta,
            x,
            times: DVector::from_fn(3, |j, _| j as f64),
        };
        let gz = ctx.g_for(&probe, &probe_weights(&ctx, &probe), &beta).unwrap();
        assert!(gz.amax() == 0.0, "probe moments: {:?}", gz.as_slice());
        let lam = DVector::zeros(ctx.moment_dim());
        let p1 = PenaltyConfig::scad(0.1).unwrap();
        let out = if_lambda(&ctx, &probe, &lam, &beta, &p1, 0.05).unwrap();
        assert!(out.iter().all(|v| *v == 0.0), "{:?}", out.as_slice());
    }

    #[test]
    fn penalty_gradient_is_the_only_push_at_zero_multipliers() {
        let data = linear_data(20, 3, &[1.0, -0.5]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let probe = data.subjects()[0].clone();
        let lam = DVector::zeros(ctx.moment_dim());
        let p2 = PenaltyConfig::scad(0.1).unwrap();

        // With zero multipliers the loss term vanishes, so the influence on
        // an active coordinate in the penalty's concave stretch reduces to
        // -P'(|b|)/P''(|b|) = a*eta - |b|.
        let beta = DVector::from_vec(vec![0.2, 0.0]);
        let out = if_beta(&ctx, &probe, &beta, &lam, &p2, 0.05).unwrap();
        assert_relative_eq!(out[0], 3.7 * 0.1 - 0.2, max_relative = 1e-12);
        assert_eq!(out[1], 0.0);

        // Past the penalty's flat point nothing pushes and nothing moves.
        let beta = DVector::from_vec(vec![1.0, 0.0]);
        let out = if_beta(&ctx, &probe, &beta, &lam, &p2, 0.05).unwrap();
        assert!(out.iter().all(|v| *v == 0.0), "{:?}", out.as_slice());

        // All-zero coefficients: empty active set, zero vector back.
        let beta = DVector::zeros(2);
        let out = if_beta(&ctx, &probe, &beta, &lam, &p2, 0.05).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_penalty_with_nonzero_gradient_is_degenerate() {
        let data = linear_data(20, 3, &[1.0, -0.5]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let probe = data.subjects()[0].clone();
        // L1 has zero curvature everywhere but a nonzero gradient, and zero
        // multipliers contribute no loss curvature either: nothing pins the
        // estimate down.
        let err = if_beta(
            &ctx,
            &probe,
            &DVector::from_vec(vec![0.5, 0.0]),
            &DVector::zeros(ctx.moment_dim()),
            &PenaltyConfig::l1(0.1).unwrap(),
            0.05,
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("degenerate coefficient curvature"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn bounded_score_caps_contamination_but_identity_does_not() {
        let data = linear_data(30, 3, &[1.0, -0.8]);
        let weights = LeverageWeights::compute(&data, 1.0).unwrap();
        let beta0 = initial_coefficients(&data, &ModelFamily::gaussian()).unwrap();
        let r = 4;
        let lambda = DVector::from_fn(r, |j, _| if j % 2 == 0 { 0.04 } else { -0.04 });
        let p1 = PenaltyConfig::scad(0.05).unwrap();
        let p2 = PenaltyConfig::scad(0.1).unwrap();

        let sweep = |score: ScoreFunction| -> InfluenceReport {
            let ctx = EstimatingContext::new(
                &data,
                ModelFamily::gaussian(),
                BasisSet::new(CorrelationStructure::Cs),
                score,
                &weights,
            )
            .unwrap();
            let state = manual_state(beta0.clone(), lambda.clone(), 1.0 / 30.0);
            influence_sweep(&ctx, &state, &p1, &p2).unwrap()
        };

        let robust = sweep(ScoreFunction::huber_default());
        let fragile = sweep(ScoreFunction::Identity);

        assert_eq!(robust.probes.len(), 20);
        assert_eq!(robust.if_lambda.len(), 20);
        assert_eq!(robust.if_beta.len(), 20);
        assert!(robust.sup_if_lambda.is_finite() && robust.sup_if_beta.is_finite());
        assert!(
            robust
                .if_lambda
                .iter()
                .chain(robust.if_beta.iter())
                .all(|v| v.iter().all(|x| x.is_finite()))
        );

        // The bounded score plus leverage downweights keep the whole grid,
        // response and covariate shifts alike, at a moderate scale. The
        // identity score has no such cap and the largest shifts blow up.
        println!(
            "huber sup_l = {:.3e}, sup_b = {:.3e}; identity sup_l = {:.3e}, sup_b = {:.3e}",
            robust.sup_if_lambda, robust.sup_if_beta, fragile.sup_if_lambda, fragile.sup_if_beta
        );
        assert!(robust.sup_if_lambda < 1e3, "{}", robust.sup_if_lambda);
        assert!(robust.sup_if_beta < 1e3, "{}", robust.sup_if_beta);
        assert!(fragile.sup_if_lambda > 1e2 * robust.sup_if_lambda);
        assert!(fragile.sup_if_beta > 1e2 * robust.sup_if_beta);
    }

    #[test]
    fn sandwich_matches_scalar_arithmetic() {
        let data = linear_data(20, 3, &[0.9]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let eps = 1.0 / 20.0;
        let state = manual_state(
            DVector::from_vec(vec![0.85]),
            DVector::from_vec(vec![0.2, 0.0]),
            eps,
        );
        let est = sandwich(&ctx, &state).unwrap();
        assert_eq!(est.lambda_support, vec![0]);
        assert_eq!(est.beta_support, vec![0]);

        // Rebuild the scalar quantities directly: V = mean g0^2, Gbar the
        // (0,0) mean Jacobian entry, giving J = Gbar^2/V, bias = avg/Gbar,
        // se = sqrt(V/(n Gbar^2)).
        let eval = ctx.eval_beta(&state.beta).unwrap();
        let gm = eval.g_matrix();
        let n = 20;
        let mut v = 0.0;
        let mut avg = 0.0;
        for i in 0..n {
            let g0 = gm[(0, i)];
            v += g0 * g0 / n as f64;
            avg += g0 * log_star_d1(1.0 + 0.2 * g0, eps) / n as f64;
        }
        let gbar = ctx.g_jacobian_mean(&state.beta).unwrap()[(0, 0)];
        assert_relative_eq!(est.j_matrix[(0, 0)], gbar * gbar / v, max_relative = 1e-12);
        assert_relative_eq!(est.bias[0], avg / gbar, max_relative = 1e-12);
        assert_relative_eq!(
            est.std_errors[0],
            (v / (gbar * gbar * n as f64)).sqrt(),
            max_relative = 1e-12
        );
        assert!(!est.ridged);
    }

    #[test]
    fn zero_multipliers_use_plain_moment_averages() {
        let data = linear_data(25, 3, &[0.8, -0.5]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let state = manual_state(
            DVector::from_vec(vec![0.8, -0.5]),
            DVector::zeros(4),
            1.0 / 25.0,
        );
        let est = sandwich(&ctx, &state).unwrap();
        // All multipliers zero: every moment is kept and the tilted average
        // collapses to the plain mean moment vector.
        assert_eq!(est.lambda_support, vec![0, 1, 2, 3]);
        assert!(!est.ridged);

        let eval = ctx.eval_beta(&state.beta).unwrap();
        let gm = eval.g_matrix();
        let n = 25.0;
        let vhat = gm * gm.transpose() / n;
        let gbar_mean = eval.g_mean();
        let jbar = ctx.g_jacobian_mean(&state.beta).unwrap();
        let vinv = vhat.clone().try_inverse().unwrap();
        let j_manual = jbar.transpose() * &vinv * &jbar;
        let bias_manual = j_manual
            .clone()
            .try_inverse()
            .unwrap()
            * jbar.transpose()
            * &vinv
            * &gbar_mean;
        assert!((&est.j_matrix - &j_manual).amax() < 1e-10 * j_manual.amax());
        assert!((&est.bias - &bias_manual).amax() < 1e-10);
    }

    #[test]
    fn information_matrix_is_symmetric_psd_on_a_real_fit() {
        let data = linear_data(40, 4, &[2.0, 0.0, -1.5, 0.0]);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let beta0 = initial_coefficients(&data, &ModelFamily::gaussian()).unwrap();
        let p1 = PenaltyConfig::scad(0.2).unwrap();
        let p2 = PenaltyConfig::scad(0.4).unwrap();
        let fit = solve(&ctx, &p1, &p2, &beta0, &SolverOptions::default()).unwrap();
        assert!(fit.trace.converged);

        let est = sandwich(&ctx, &fit).unwrap();
        assert_eq!(est.beta_support, vec![0, 2]);
        let j = &est.j_matrix;
        assert!((j - j.transpose()).amax() <= 1e-12 * j.amax().max(1.0));
        let eigs = j.clone().symmetric_eigenvalues();
        let scale = j.amax();
        assert!(
            eigs.iter().all(|e| *e >= -1e-8 * scale),
            "eigenvalues: {:?}",
            eigs.as_slice()
        );
        assert!(est
            .std_errors
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn rank_deficient_moments_fall_back_to_a_ridge() {
        // A covariate column that is identically zero produces moment
        // coordinates that are identically zero, so the second-moment matrix
        // has exact zero rows and cannot factor without the ridge.
        let subjects = (0..6)
            .map(|i| {
                let x = DMatrix::from_fn(3, 2, |j, k| {
                    if k == 1 {
                        0.0
                    } else {
                        wobble(i * 3 + j, 0) * 1.5
                    }
                });
                let y = DVector::from_fn(3, |j, _| {
                    x[(j, 0)] * 1.0 + noise(i * 3 + j, 17) * 0.4
                });
                let times = DVector::from_fn(3, |j, _| j as f64);
                Subject { y, x, times }
            })
            .collect();
        let data = LongitudinalDataset::new(subjects).unwrap();
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data,
            ModelFamily::gaussian(),
            BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(),
            &w,
        )
        .unwrap();
        let state = manual_state(
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::zeros(4),
            1.0 / 6.0,
        );
        let est = sandwich(&ctx, &state).unwrap();
        assert!(est.ridged);
        assert_eq!(est.beta_support, vec![0]);
        assert!(est.std_errors.iter().all(|s| s.is_finite()));
    }

    /// Clean Gaussian panels with exchangeable within-cluster correlation.
    fn gaussian_panel(seed: u64, n: usize, m: usize, beta_true: &[f64]) -> LongitudinalDataset {
        let p = beta_true.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let subjects = (0..n)
            .map(|_| {
                let x = DMatrix::from_fn(m, p, |_, _| norm.sample(&mut rng));
                let shared: f64 = norm.sample(&mut rng);
                let y = DVector::from_fn(m, |j, _| {
                    let mut v = 0.7f64.sqrt() * shared + 0.3f64.sqrt() * norm.sample(&mut rng);
                    for k in 0..p {
                        v += x[(j, k)] * beta_true[k];
                    }
                    v
                });
                let times = DVector::from_fn(m, |j, _| j as f64);
                Subject { y, x, times }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    #[test]
    fn intervals_cover_the_truth_on_clean_replicates() {
        let truth = [1.2, 0.0, 0.9, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0];
        let reps = 200usize;
        let hits: usize = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let data = gaussian_panel(9000 + rep as u64, 100, 6, &truth);
                let w = LeverageWeights::unit(&data);
                let ctx = EstimatingContext::new(
                    &data,
                    ModelFamily::gaussian(),
                    BasisSet::new(CorrelationStructure::Cs),
                    ScoreFunction::huber_default(),
                    &w,
                )
                .unwrap();
                let beta0 = initial_coefficients(&data, &ModelFamily::gaussian()).unwrap();
                let p1 = PenaltyConfig::scad(0.4).unwrap();
                let p2 = PenaltyConfig::scad(0.15).unwrap();
                let fit = solve(&ctx, &p1, &p2, &beta0, &SolverOptions::default()).unwrap();
                let est = match sandwich(&ctx, &fit) {
                    Ok(e) => e,
                    Err(_) => return 0,
                };
                match est.beta_support.iter().position(|&t| t == 0) {
                    Some(k) => {
                        let center = fit.beta[0] - est.bias[k];
                        let half = 1.96 * est.std_errors[k];
                        usize::from((center - truth[0]).abs() <= half)
                    }
                    None => 0,
                }
            })
            .sum();
        let coverage = hits as f64 / reps as f64;
        println!("coverage = {coverage:.3}");
        assert!(
            (0.90..=1.0).contains(&coverage),
            "coverage {coverage} outside [0.90, 1.00]"
        );
    }
}
