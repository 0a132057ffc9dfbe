//! Two-layer coordinate solver for the doubly-penalized min-max estimator.
//!
//! The estimator is
//!
//! ```text
//! beta_hat = argmin_beta [ max_lambda f(lambda; beta) + n sum_t P_v(|beta_t|) ],
//! f(lambda; beta) = sum_i log*(1 + lambda' g_i(beta)) - n sum_j P_w(|lambda_j|),
//! ```
//!
//! with `log*` the pseudo-logarithm that extends `ln` quadratically below a
//! threshold `eps` so the objective stays twice differentiable no matter
//! where the multipliers wander.
//!
//! The outer layer minimizes the profiled objective
//!
//! ```text
//! T(beta) = f(lambda_hat(beta); beta) + n sum_t P_v(|beta_t|),
//! ```
//!
//! where `lambda_hat(beta)` is the multiplier vector produced by a
//! coordinate ascent started from zero and hard-thresholded — a completely
//! deterministic function of `beta`. Freezing that recipe matters: the
//! penalized inner objective is not concave (the penalty's concavity flips
//! sign under the maximization), so "the" inner maximum is ambiguous, and
//! warm-started re-maximization can hop between local maxima and drag the
//! outer iteration around. Coordinate Newton steps on `beta` are formed from
//! the envelope gradient (the multiplier is stationary, so its implicit
//! dependence on `beta` drops out of the first derivative), capped to a
//! trust region, and accepted only when `T` strictly decreases, which makes
//! the outer loop a monotone descent on a function bounded below by zero.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Result, RpelError};
use crate::estfun::EstimatingContext;
use crate::model::{mad, mean_vector, variance_diagonal, LinkKind, LongitudinalDataset, ModelFamily};
use crate::penalty::PenaltyConfig;

/// Pseudo-logarithm: ln(z) for z >= eps, quadratic continuation below.
pub fn log_star(z: f64, eps: f64) -> f64 {
    if z >= eps {
        z.ln()
    } else {
        eps.ln() - 1.5 + 2.0 * z / eps - z * z / (2.0 * eps * eps)
    }
}

/// First derivative of [`log_star`].
pub fn log_star_d1(z: f64, eps: f64) -> f64 {
    if z >= eps {
        1.0 / z
    } else {
        2.0 / eps - z / (eps * eps)
    }
}

/// Second derivative of [`log_star`].
pub fn log_star_d2(z: f64, eps: f64) -> f64 {
    if z >= eps {
        -1.0 / (z * z)
    } else {
        -1.0 / (eps * eps)
    }
}

/// Knobs for both solver layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Sweep-to-sweep sup-norm change declaring convergence.
    pub tol: f64,
    /// Cap on inner (multiplier) sweeps per inner solve.
    pub max_inner: usize,
    /// Cap on outer (coefficient) sweeps.
    pub max_outer: usize,
    /// Pseudo-log threshold; defaults to 1/n when unset.
    pub epsilon: Option<f64>,
    /// Coefficients below this magnitude are zeroed after each outer sweep.
    pub trim_threshold: f64,
    /// Step-halving attempts before a coordinate move is abandoned.
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_inner: 200,
            max_outer: 100,
            epsilon: None,
            trim_threshold: 1e-3,
            max_halvings: 20,
        }
    }
}

/// Counters from one full solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveTrace {
    pub outer_sweeps: usize,
    pub inner_sweeps: usize,
    pub halvings: usize,
    pub converged: bool,
}

/// Solution of the penalized min-max problem.
#[derive(Debug, Clone)]
pub struct ElState {
    pub beta: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Total outer objective: el_sum minus n times the multiplier penalty
    /// plus n times the coefficient penalty.
    /// Infinite when the multiplier ascent found no finite maximum at the
    /// final coefficients (the moment constraints are violated beyond what
    /// the penalty can absorb).
    pub objective: f64,
    /// sum_i log*(1 + lambda' g_i), the empirical-likelihood part (feeds
    /// the information criterion).
    pub el_sum: f64,
    pub epsilon: f64,
    pub trace: SolveTrace,
}

impl ElState {
    /// Indices of nonzero coefficients.
    pub fn beta_support(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&t| self.beta[t] != 0.0).collect()
    }

    /// Indices of nonzero multipliers (the retained estimating equations).
    pub fn lambda_support(&self) -> Vec<usize> {
        (0..self.lambda.len())
            .filter(|&j| self.lambda[j] != 0.0)
            .collect()
    }
}

/// Inner objective f(lambda; beta) given the moment matrix at beta.
pub fn inner_objective(g: &DMatrix<f64>, lambda: &DVector<f64>, p1: &PenaltyConfig, eps: f64) -> f64 {
    let n = g.ncols();
    let mut acc = 0.0;
    for i in 0..n {
        let t = lambda.dot(&g.column(i));
        acc += log_star(1.0 + t, eps);
    }
    let pen: f64 = lambda.iter().map(|l| p1.value(l.abs())).sum();
    acc - n as f64 * pen
}

/// Result of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub sweeps: usize,
    pub halvings: usize,
    pub converged: bool,
}

struct SweepOutcome {
    max_delta: f64,
    halvings: usize,
}

/// One cyclic pass of Newton coordinate updates on the multipliers with the
/// moment matrix fixed. `tvals` holds `lambda' g_i` and is kept in sync;
/// `pen` and `obj` track the penalty sum and the penalized objective. Fresh
/// coordinates whose step would land below `birth_floor` in magnitude are
/// left at zero.
fn lambda_sweep(
    g: &DMatrix<f64>,
    p1: &PenaltyConfig,
    eps: f64,
    opts: &SolverOptions,
    birth_floor: f64,
    lambda: &mut DVector<f64>,
    tvals: &mut [f64],
    pen: &mut f64,
    obj: &mut f64,
) -> SweepOutcome {
    let r = g.nrows();
    let n = g.ncols();
    let nf = n as f64;
    let zero_gate = nf * p1.d1(0.0);
    let mut max_delta = 0.0f64;
    let mut halvings = 0;

    for j in 0..r {
        let lj = lambda[j];
        let mut grad_el = 0.0;
        let mut hess = 0.0;
        for i in 0..n {
            let gij = g[(j, i)];
            if gij == 0.0 {
                continue;
            }
            let z = 1.0 + tvals[i];
            grad_el += log_star_d1(z, eps) * gij;
            hess += log_star_d2(z, eps) * gij * gij;
        }
        let grad = if lj == 0.0 {
            if grad_el.abs() <= zero_gate {
                continue;
            }
            grad_el - zero_gate * grad_el.signum()
        } else {
            grad_el - nf * p1.d1(lj.abs()) * lj.signum()
        };
        hess -= nf * p1.d2(lj.abs());
        if hess.abs() < 1e-10 {
            continue;
        }
        // Ascent direction with a sign-correct clamped denominator.
        let denom = hess.abs().max(1e-6 * nf);
        let mut delta = grad / denom;

        let mut halved = 0;
        loop {
            let mut cand = lj + delta;
            // A sign flip stops at zero first; the gate decides later
            // whether to continue through.
            if lj != 0.0 && cand * lj < 0.0 {
                cand = 0.0;
            }
            // A birth that the hard threshold would immediately undo is
            // not worth taking.
            if lj == 0.0 && cand.abs() < birth_floor {
                break;
            }
            if cand == lj {
                break;
            }
            let step = cand - lj;
            let mut el_new = 0.0;
            for i in 0..n {
                el_new += log_star(1.0 + tvals[i] + step * g[(j, i)], eps);
            }
            let pen_new = *pen - nf * p1.value(lj.abs()) + nf * p1.value(cand.abs());
            let obj_new = el_new - pen_new;
            if obj_new.is_finite() && obj_new > *obj {
                for i in 0..n {
                    tvals[i] += step * g[(j, i)];
                }
                lambda[j] = cand;
                *pen = pen_new;
                *obj = obj_new;
                max_delta = max_delta.max(step.abs());
                break;
            }
            halved += 1;
            halvings += 1;
            if halved > opts.max_halvings || delta.abs() < 1e-14 * (1.0 + lj.abs()) {
                break;
            }
            delta *= 0.5;
        }
    }

    SweepOutcome { max_delta, halvings }
}

/// Maximizes f(lambda; beta) by cyclic coordinate ascent from `lambda0`,
/// with the moment matrix `g` held fixed.
pub fn inner_solve(
    g: &DMatrix<f64>,
    p1: &PenaltyConfig,
    lambda0: &DVector<f64>,
    eps: f64,
    opts: &SolverOptions,
) -> Result<InnerSolution> {
    let r = g.nrows();
    let n = g.ncols();
    let nf = n as f64;
    if lambda0.len() != r {
        return Err(RpelError::InvalidData(format!(
            "multiplier start has length {}, expected {r}",
            lambda0.len()
        )));
    }

    let mut lambda = lambda0.clone();
    // t_i = lambda' g_i, maintained incrementally.
    let mut tvals: Vec<f64> = (0..n).map(|i| lambda.dot(&g.column(i))).collect();
    let el0: f64 = tvals.iter().map(|&t| log_star(1.0 + t, eps)).sum();
    let mut pen: f64 = lambda.iter().map(|l| nf * p1.value(l.abs())).sum();
    let mut obj = el0 - pen;

    let mut sweeps = 0;
    let mut halvings = 0;
    let mut converged = false;
    // Correlated moment rows make pure coordinate ascent zigzag with steps
    // above tol long after the objective has flattened out, so objective
    // stationarity also counts as convergence. The threshold follows the
    // requested tolerance down to machine resolution.
    let stall = (opts.tol * opts.tol).max(f64::EPSILON);

    while sweeps < opts.max_inner {
        sweeps += 1;
        let obj_sweep_start = obj;
        let out = lambda_sweep(g, p1, eps, opts, 0.0, &mut lambda, &mut tvals, &mut pen, &mut obj);
        halvings += out.halvings;
        let mut max_delta = out.max_delta;

        // Correlated moment rows make cyclic ascent zigzag along a ridge,
        // crawling for thousands of sweeps. A full Newton step on the active
        // set (scaled back to the first sign change, line-searched on the
        // exact objective) cuts straight along the ridge instead.
        let active: Vec<usize> = (0..r).filter(|&j| lambda[j] != 0.0).collect();
        if active.len() >= 2 {
            let k = active.len();
            let mut grad = DVector::<f64>::zeros(k);
            let mut hess = DMatrix::<f64>::zeros(k, k);
            for i in 0..n {
                let z = 1.0 + tvals[i];
                let d1 = log_star_d1(z, eps);
                let d2 = log_star_d2(z, eps);
                for (a, &ja) in active.iter().enumerate() {
                    let ga = g[(ja, i)];
                    if ga == 0.0 {
                        continue;
                    }
                    grad[a] += d1 * ga;
                    for (b, &jb) in active.iter().enumerate() {
                        hess[(a, b)] += d2 * ga * g[(jb, i)];
                    }
                }
            }
            for (a, &ja) in active.iter().enumerate() {
                let lj = lambda[ja];
                grad[a] -= nf * p1.d1(lj.abs()) * lj.signum();
                hess[(a, a)] -= nf * p1.d2(lj.abs());
            }
            if let Some(step) = hess.lu().solve(&grad) {
                let mut delta = -step;
                // Stop at the first coordinate sign change: the penalty has
                // a kink at zero, so the quadratic model ends there.
                let mut scale = 1.0f64;
                for (a, &ja) in active.iter().enumerate() {
                    let lj = lambda[ja];
                    if delta[a] * lj < 0.0 {
                        scale = scale.min(lj.abs() / delta[a].abs());
                    }
                }
                if scale.is_finite() && scale > 0.0 {
                    delta *= scale;
                    let mut halved = 0;
                    loop {
                        let mut tnew = tvals.clone();
                        for i in 0..n {
                            let mut acc = tnew[i];
                            for (a, &ja) in active.iter().enumerate() {
                                acc += delta[a] * g[(ja, i)];
                            }
                            tnew[i] = acc;
                        }
                        let el_new: f64 =
                            tnew.iter().map(|&t| log_star(1.0 + t, eps)).sum();
                        let mut pen_new = pen;
                        for (a, &ja) in active.iter().enumerate() {
                            let lj = lambda[ja];
                            pen_new += nf
                                * (p1.value((lj + delta[a]).abs()) - p1.value(lj.abs()));
                        }
                        let obj_new = el_new - pen_new;
                        if obj_new.is_finite() && obj_new > obj {
                            let step_norm = delta.amax();
                            for (a, &ja) in active.iter().enumerate() {
                                lambda[ja] += delta[a];
                            }
                            tvals = tnew;
                            pen = pen_new;
                            obj = obj_new;
                            max_delta = max_delta.max(step_norm);
                            break;
                        }
                        halved += 1;
                        halvings += 1;
                        if halved > opts.max_halvings || delta.amax() < 1e-14 {
                            break;
                        }
                        delta *= 0.5;
                    }
                }
            }
        }

        // When the moment violation exceeds what a saturating penalty can
        // hold, the ascent is genuinely unbounded and the multipliers grow
        // without limit. A legitimate maximizer stalls long before this
        // scale (the pseudo-log gradient is ~1/lambda by then), so stop
        // early and report non-convergence instead of burning the budget.
        if lambda.amax() > 1e8 {
            break;
        }

        if max_delta < opts.tol || obj - obj_sweep_start < stall * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
    }

    Ok(InnerSolution {
        lambda,
        objective: obj,
        sweeps,
        halvings,
        converged,
    })
}

/// The canonical multiplier vector at one beta: coordinate ascent from zero
/// followed by the hard threshold, plus the inner objective it attains.
/// Deterministic in `g`, so the outer layer sees a well-defined profile.
fn profiled_multipliers(
    g: &DMatrix<f64>,
    p1: &PenaltyConfig,
    eps: f64,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, f64, usize, usize)> {
    let sol = inner_solve(g, p1, &DVector::zeros(g.nrows()), eps, opts)?;
    let mut lambda = sol.lambda;
    let mut trimmed = false;
    for j in 0..lambda.len() {
        if lambda[j] != 0.0 && lambda[j].abs() < opts.trim_threshold {
            lambda[j] = 0.0;
            trimmed = true;
        }
    }
    // An ascent that is still climbing at the sweep cap means the moments at
    // this beta admit no finite maximum (zero has left the convex hull, and
    // the penalty tails are too flat to rein the multipliers in). Score such
    // points as infinitely bad so the outer descent never walks on the
    // noise of a truncated climb.
    let obj = if !sol.converged {
        f64::INFINITY
    } else if trimmed {
        inner_objective(g, &lambda, p1, eps)
    } else {
        sol.objective
    };
    Ok((lambda, obj, sol.sweeps, sol.halvings))
}

/// Solves the full doubly-penalized min-max problem from `beta0`.
///
/// `p1` penalizes the multipliers, `p2` the coefficients. Every candidate
/// beta is scored by the profiled objective (inner ascent from zero, hard
/// threshold, plus the coefficient penalty), and coordinate Newton moves are
/// accepted only when that score strictly drops. Convergence means a full
/// sweep moved no coordinate by `tol` or more and trimmed nothing. Returns
/// the final state even when the sweep cap is hit; check `trace.converged`.
pub fn solve(
    ctx: &EstimatingContext,
    p1: &PenaltyConfig,
    p2: &PenaltyConfig,
    beta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<ElState> {
    let n = ctx.n_subjects();
    let p = ctx.n_covariates();
    let nf = n as f64;
    if beta0.len() != p {
        return Err(RpelError::InvalidData(format!(
            "coefficient start has length {}, expected {p}",
            beta0.len()
        )));
    }
    let eps = opts.epsilon.unwrap_or(1.0 / nf);
    let beta_penalty =
        |b: &DVector<f64>| nf * b.iter().map(|v| p2.value(v.abs())).sum::<f64>();

    let mut beta = beta0.clone();
    // Entering coefficients below the hard threshold start as exact zeros so
    // the support bookkeeping is clean from the first sweep.
    for t in 0..p {
        if beta[t] != 0.0 && beta[t].abs() < opts.trim_threshold {
            beta[t] = 0.0;
        }
    }
    let mut eval = ctx.eval_beta(&beta)?;
    let mut trace = SolveTrace::default();
    let beta_gate = nf * p2.d1(0.0);

    let (mut lambda, f0, sw, hv) = profiled_multipliers(eval.g_matrix(), p1, eps, opts)?;
    trace.inner_sweeps += sw;
    trace.halvings += hv;
    let mut total_cur = f0 + beta_penalty(&beta);

    while trace.outer_sweeps < opts.max_outer {
        trace.outer_sweeps += 1;
        let mut max_move = 0.0f64;

        let mut profile = ctx.lambda_profile(&eval, &lambda);
        let mut tvals = profile.t_vals().to_vec();

        for t in 0..p {
            let (first, second) = ctx.coordinate_contractions(&eval, &profile, &lambda, t)?;
            let bt = beta[t];
            let mut grad_el = 0.0;
            let mut hess = 0.0;
            for i in 0..n {
                let z = 1.0 + tvals[i];
                let d1 = log_star_d1(z, eps);
                grad_el += d1 * first[i];
                hess += log_star_d2(z, eps) * first[i] * first[i] + d1 * second[i];
            }
            let grad = if bt == 0.0 {
                if grad_el.abs() <= beta_gate {
                    continue;
                }
                grad_el - beta_gate * grad_el.signum()
            } else {
                grad_el + nf * p2.d1(bt.abs()) * bt.signum()
            };
            hess += nf * p2.d2(bt.abs());
            // The fixed-multiplier partial Hessian lacks the positive
            // envelope correction from the profiled multipliers and often
            // comes out negative even in a valley of the profile. A Newton
            // step with a negative denominator would ascend, so use the
            // curvature magnitude as a scale and keep the step a descent
            // direction; backtracking sorts out the length.
            let denom = hess.abs().max(1e-6 * nf);
            let mut delta = -grad / denom;
            // Trust cap: one coordinate move per sweep stays local.
            let cap = 0.5 * (1.0 + bt.abs());
            if delta.abs() > cap {
                delta = cap * delta.signum();
            }

            let mut halved = 0;
            loop {
                let mut cand = bt + delta;
                if bt != 0.0 && cand * bt < 0.0 {
                    cand = 0.0;
                }
                // A birth that the hard threshold would immediately undo is
                // not worth taking.
                if bt == 0.0 && cand.abs() < opts.trim_threshold {
                    break;
                }
                if cand == bt {
                    break;
                }
                let mut btrial = beta.clone();
                btrial[t] = cand;
                // A trial that overflows the mean or the variance is simply
                // an inadmissible step: halve and retry.
                if let Ok(etrial) = ctx.eval_beta(&btrial) {
                    let (ltrial, ftrial, sw, hv) =
                        profiled_multipliers(etrial.g_matrix(), p1, eps, opts)?;
                    trace.inner_sweeps += sw;
                    trace.halvings += hv;
                    let total_new = ftrial + beta_penalty(&btrial);
                    if total_new.is_finite() && total_new < total_cur {
                        beta = btrial;
                        eval = etrial;
                        lambda = ltrial;
                        total_cur = total_new;
                        max_move = max_move.max((cand - bt).abs());
                        profile = ctx.lambda_profile(&eval, &lambda);
                        tvals = profile.t_vals().to_vec();
                        break;
                    }
                }
                halved += 1;
                trace.halvings += 1;
                if halved > opts.max_halvings {
                    break;
                }
                delta *= 0.5;
            }
        }

        // Hard threshold on the coefficients; a trim changes the moments, so
        // the profile is re-evaluated rather than descent-tested.
        let mut trimmed = false;
        for t in 0..p {
            if beta[t] != 0.0 && beta[t].abs() < opts.trim_threshold {
                max_move = max_move.max(beta[t].abs());
                beta[t] = 0.0;
                trimmed = true;
            }
        }
        if trimmed {
            eval = ctx.eval_beta(&beta)?;
            let (l, f, sw, hv) = profiled_multipliers(eval.g_matrix(), p1, eps, opts)?;
            trace.inner_sweeps += sw;
            trace.halvings += hv;
            lambda = l;
            total_cur = f + beta_penalty(&beta);
        }

        if max_move < opts.tol {
            // A standstill at an infinite profile is a failure to find any
            // feasible direction, not convergence.
            trace.converged = total_cur.is_finite();
            break;
        }
    }

    let profile = ctx.lambda_profile(&eval, &lambda);
    let el_sum: f64 = profile
        .t_vals()
        .iter()
        .map(|&t| log_star(1.0 + t, eps))
        .sum();

    Ok(ElState {
        beta,
        lambda,
        objective: total_cur,
        el_sum,
        epsilon: eps,
        trace,
    })
}

/// Robust starting coefficients: iteratively reweighted ridge regression on
/// the pooled observations with Huber downweighting of large residuals.
/// Entirely deterministic.
pub fn initial_coefficients(
    data: &LongitudinalDataset,
    family: &ModelFamily,
) -> Result<DVector<f64>> {
    const HUBER_C: f64 = 1.345;
    const MAX_ITERS: usize = 40;

    let p = data.n_covariates();
    let x = data.stacked_covariates();
    let n_obs = data.n_obs();
    let mut y = DVector::zeros(n_obs);
    {
        let mut row = 0;
        for s in data.subjects() {
            for j in 0..s.cluster_size() {
                y[row] = s.y[j];
                row += 1;
            }
        }
    }

    let mut beta = DVector::zeros(p);
    for _ in 0..MAX_ITERS {
        let (weights, response) = match family.link() {
            LinkKind::Identity => {
                let resid = &y - &x * &beta;
                let scale = mad(resid.as_slice()).max(1e-8);
                let w = DVector::from_fn(n_obs, |i, _| {
                    let r = resid[i] / scale;
                    if r.abs() <= HUBER_C {
                        1.0
                    } else {
                        HUBER_C / r.abs()
                    }
                });
                (w, y.clone())
            }
            LinkKind::Log => {
                let eta = (&x * &beta).map(|e| e.clamp(-30.0, 30.0));
                let mu = eta.map(f64::exp);
                let mut w = DVector::zeros(n_obs);
                let mut zeta = DVector::zeros(n_obs);
                for i in 0..n_obs {
                    let r = (y[i] - mu[i]) / mu[i].sqrt();
                    let hub = if r.abs() <= HUBER_C { 1.0 } else { HUBER_C / r.abs() };
                    w[i] = mu[i] * hub;
                    zeta[i] = eta[i] + (y[i] - mu[i]) / mu[i];
                }
                (w, zeta)
            }
        };

        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        for i in 0..n_obs {
            let wi = weights[i];
            for s in 0..p {
                let xis = x[(i, s)];
                b[s] += wi * xis * response[i];
                for t in s..p {
                    a[(s, t)] += wi * xis * x[(i, t)];
                }
            }
        }
        for s in 0..p {
            for t in 0..s {
                a[(s, t)] = a[(t, s)];
            }
        }
        let ridge = 1e-3 * a.trace().max(1e-8) / p as f64;
        for s in 0..p {
            a[(s, s)] += ridge;
        }
        let next = Cholesky::new(a)
            .ok_or_else(|| {
                RpelError::Numeric("weighted design matrix is not positive definite".into())
            })?
            .solve(&b);
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < 1e-8 {
            break;
        }
    }
    Ok(beta)
}

/// Robust dispersion estimate at `beta`: squared scaled MAD of the pooled
/// Pearson residuals computed at unit dispersion.
pub fn estimate_dispersion(
    data: &LongitudinalDataset,
    family: &ModelFamily,
    beta: &DVector<f64>,
) -> Result<f64> {
    let unit = family.with_dispersion(1.0)?;
    let mut resids = Vec::with_capacity(data.n_obs());
    for (i, s) in data.subjects().iter().enumerate() {
        let mu = mean_vector(&s.x, beta, &unit, i)?;
        let a = variance_diagonal(&mu, &unit)?;
        for j in 0..s.cluster_size() {
            resids.push((s.y[j] - mu[j]) / a[j].sqrt());
        }
    }
    let s = mad(&resids);
    Ok((s * s).max(1e-8))
}
