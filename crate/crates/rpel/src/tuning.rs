//! Grid selection of the two penalty strengths by a BIC-type criterion,
//! plus optional selection of the score-function tuning constant.
//!
//! `v` scales the multiplier penalty (how aggressively weak estimating
//! equations are dropped) and `omega` scales the coefficient penalty (how
//! aggressively coefficients are zeroed). Both are chosen by minimizing
//! `2 * el_sum + |support| * max(1, ln ln p) * ln n` over a grid.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::diagnostics::sandwich;
use crate::error::{Result, RpelError};
use crate::estfun::EstimatingContext;
use crate::penalty::PenaltyConfig;
use crate::solver::{solve, ElState, SolverOptions};

/// Candidate penalty strengths, each strictly increasing and positive.
/// `score_constants` optionally lists candidate score tuning constants for
/// [`select_score_constant`].
#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub v_values: Vec<f64>,
    pub omega_values: Vec<f64>,
    pub score_constants: Option<Vec<f64>>,
}

fn check_axis(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(RpelError::InvalidData(format!(
            "tuning grid needs at least one {name} value"
        )));
    }
    for w in values.windows(2) {
        if !(w[1] > w[0]) {
            return Err(RpelError::InvalidData(format!(
                "{name} values must be strictly increasing, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    if !(values[0] > 0.0 && values.iter().all(|v| v.is_finite())) {
        return Err(RpelError::InvalidData(format!(
            "{name} values must be positive finite reals"
        )));
    }
    Ok(())
}

impl TuningGrid {
    pub fn new(v_values: Vec<f64>, omega_values: Vec<f64>) -> Result<Self> {
        check_axis("v", &v_values)?;
        check_axis("omega", &omega_values)?;
        Ok(TuningGrid {
            v_values,
            omega_values,
            score_constants: None,
        })
    }

    /// Attaches candidate score constants (validated like the other axes).
    pub fn with_score_constants(mut self, constants: Vec<f64>) -> Result<Self> {
        check_axis("score constant", &constants)?;
        self.score_constants = Some(constants);
        Ok(self)
    }

    /// Ten log-spaced points per axis from `1e-3` to `1`, scaled by
    /// `sqrt(ln(max(p, r)) / n)` so the grid tracks how the workable
    /// penalty range shrinks with the sample size and grows with the
    /// dimension.
    pub fn default_for(n: usize, p: usize, r: usize) -> Self {
        let dim = p.max(r).max(2) as f64;
        let scale = (dim.ln() / n.max(1) as f64).sqrt();
        let values: Vec<f64> = (0..10)
            .map(|k| scale * 10f64.powf(-3.0 + k as f64 / 3.0))
            .collect();
        TuningGrid {
            v_values: values.clone(),
            omega_values: values,
            score_constants: None,
        }
    }
}

/// One evaluated grid point. `bic` is infinite when that point's solve
/// errored outright; `converged` distinguishes clean fits from iteration
/// cap-outs (only clean fits can win the selection).
#[derive(Debug, Clone, PartialEq)]
pub struct TuningRow {
    pub v: f64,
    pub omega: f64,
    pub bic: f64,
    pub support: usize,
    pub converged: bool,
}

/// Winning strengths with their fit and the full table of evaluated points
/// (ordered by `v`, then `omega`, both ascending).
#[derive(Debug, Clone)]
pub struct TuningSelection {
    pub v: f64,
    pub omega: f64,
    pub fit: ElState,
    pub table: Vec<TuningRow>,
}

/// `max(1, ln ln p)`: the dimension weight multiplying the per-coordinate
/// cost in [`bic`]. Equal to one until `p` exceeds `e^e ~ 15.15`.
pub fn complexity_weight(p: usize) -> f64 {
    (p as f64).ln().ln().max(1.0)
}

/// Information criterion for a completed fit:
/// `2 * el_sum + |support(beta)| * max(1, ln ln p) * ln n`.
///
/// `el_sum` already measures how hard the multipliers must work to
/// reconcile the moment conditions at `beta`, so no separate likelihood
/// enters; the second term charges for retained coefficients.
pub fn bic(state: &ElState, n: usize, p: usize) -> f64 {
    let support = state.beta_support().len() as f64;
    2.0 * state.el_sum + support * complexity_weight(p) * (n as f64).ln()
}

fn restrung(template: &PenaltyConfig, eta: f64) -> Result<PenaltyConfig> {
    PenaltyConfig::new(template.kind, eta, template.a)
}

/// Tie-break: smaller criterion wins; on exact ties prefer the stronger
/// coefficient penalty, then the stronger multiplier penalty (sparser
/// models on both layers).
fn improves(cand: &TuningRow, best: &TuningRow) -> bool {
    if cand.bic != best.bic {
        return cand.bic < best.bic;
    }
    if cand.omega != best.omega {
        return cand.omega > best.omega;
    }
    cand.v > best.v
}

/// Fits every `(v, omega)` pair on the grid and returns the criterion
/// minimizer together with the full table.
///
/// The `eta` fields of the two penalty templates are ignored; the grid
/// supplies the strengths, the templates only fix the family and shape.
/// Within each `v` the `omega` path ascends, warm-starting each solve from
/// the previous fit; the `v` paths are independent and run in parallel.
/// Grid points whose solve errors or hits the iteration caps stay in the
/// table but cannot be selected. If no point converged at all the error
/// carries the partial table.
pub fn select(
    ctx: &EstimatingContext,
    grid: &TuningGrid,
    multiplier_template: &PenaltyConfig,
    coefficient_template: &PenaltyConfig,
    beta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<TuningSelection> {
    let paths: Vec<Vec<(TuningRow, Option<ElState>)>> = grid
        .v_values
        .par_iter()
        .map(|&v| {
            let p1 = restrung(multiplier_template, v)?;
            omega_path(ctx, &p1, v, &grid.omega_values, coefficient_template, beta0, opts)
        })
        .collect::<Result<_>>()?;
    pick_winner(paths)
}

/// Tunes the coefficient penalty alone, with the multiplier penalty held
/// fixed at `multiplier_penalty` — including strength zero, which leaves
/// the multipliers classical and unpenalized. The rows carry the fixed
/// strength in their `v` column. Same warm-started ascent, criterion, and
/// failure behavior as [`select`].
pub fn select_omega(
    ctx: &EstimatingContext,
    multiplier_penalty: &PenaltyConfig,
    omega_values: &[f64],
    coefficient_template: &PenaltyConfig,
    beta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<TuningSelection> {
    check_axis("omega", omega_values)?;
    let path = omega_path(
        ctx,
        multiplier_penalty,
        multiplier_penalty.eta,
        omega_values,
        coefficient_template,
        beta0,
        opts,
    )?;
    pick_winner(vec![path])
}

/// Ascends one `omega` path at a fixed multiplier penalty, warm-starting
/// each solve from the previous converged fit.
fn omega_path(
    ctx: &EstimatingContext,
    p1: &PenaltyConfig,
    v: f64,
    omega_values: &[f64],
    coefficient_template: &PenaltyConfig,
    beta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Vec<(TuningRow, Option<ElState>)>> {
    let n = ctx.n_subjects();
    let p = ctx.n_covariates();
    let mut rows = Vec::with_capacity(omega_values.len());
    let mut warm = beta0.clone();
    for &omega in omega_values {
        let p2 = restrung(coefficient_template, omega)?;
        match solve(ctx, p1, &p2, &warm, opts) {
            Ok(state) => {
                let usable = state.trace.converged && state.objective.is_finite();
                let row = TuningRow {
                    v,
                    omega,
                    bic: bic(&state, n, p),
                    support: state.beta_support().len(),
                    converged: usable,
                };
                if usable {
                    warm = state.beta.clone();
                    rows.push((row, Some(state)));
                } else {
                    rows.push((row, None));
                }
            }
            Err(_) => rows.push((
                TuningRow {
                    v,
                    omega,
                    bic: f64::INFINITY,
                    support: 0,
                    converged: false,
                },
                None,
            )),
        }
    }
    Ok(rows)
}

fn pick_winner(paths: Vec<Vec<(TuningRow, Option<ElState>)>>) -> Result<TuningSelection> {
    let mut table = Vec::with_capacity(paths.iter().map(Vec::len).sum());
    let mut best: Option<(TuningRow, ElState)> = None;
    for path in paths {
        for (row, state) in path {
            if let Some(state) = state {
                if best.as_ref().is_none_or(|(b, _)| improves(&row, b)) {
                    best = Some((row.clone(), state));
                }
            }
            table.push(row);
        }
    }
    match best {
        Some((row, fit)) => Ok(TuningSelection {
            v: row.v,
            omega: row.omega,
            fit,
            table,
        }),
        None => Err(RpelError::TuningFailed {
            message: format!(
                "none of the {} grid points produced a converged fit",
                table.len()
            ),
            table,
        }),
    }
}

/// `det(J^{-1}/n)` on the active set from a fit's plug-in covariance;
/// infinite when the active set is empty or the information matrix fails
/// to factor, so degenerate fits always lose in [`select_score_constant`].
fn covariance_determinant(ctx: &EstimatingContext, state: &ElState) -> f64 {
    match sandwich(ctx, state) {
        Ok(est) => {
            let det_j = est.j_matrix.determinant();
            if det_j.is_finite() && det_j > 0.0 {
                let s = est.beta_support.len() as i32;
                1.0 / (det_j * (ctx.n_subjects() as f64).powi(s))
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Chooses the score-function tuning constant from `candidates`: each one
/// is fitted at its own criterion-optimal `(v, omega)` and scored by the
/// determinant of the estimated covariance of the active coefficients;
/// the smallest determinant (sharpest estimator) wins, first-listed on
/// ties. The context's score family is kept, only its constant changes.
pub fn select_score_constant(
    ctx: &EstimatingContext,
    candidates: &[f64],
    grid: &TuningGrid,
    multiplier_template: &PenaltyConfig,
    coefficient_template: &PenaltyConfig,
    beta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(RpelError::InvalidData(
            "no candidate score constants to choose from".into(),
        ));
    }
    let mut best: Option<(f64, f64)> = None;
    for &constant in candidates {
        let score = ctx.score().with_constant(constant)?;
        let cand_ctx = EstimatingContext::new(
            ctx.data(),
            *ctx.family(),
            *ctx.basis(),
            score,
            ctx.weights(),
        )?;
        let det = match select(
            &cand_ctx,
            grid,
            multiplier_template,
            coefficient_template,
            beta0,
            opts,
        ) {
            Ok(sel) => covariance_determinant(&cand_ctx, &sel.fit),
            Err(RpelError::TuningFailed { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|(_, d)| det < d) {
            best = Some((constant, det));
        }
    }
    let (constant, det) = best.expect("candidates checked nonempty");
    if det.is_infinite() {
        return Err(RpelError::Estimation(
            "every candidate score constant left the active set empty or degenerate".into(),
        ));
    }
    Ok(constant)
}
