//! Robustified quadratic-inference estimating functions.
//!
//! For subject i with mean mu_i(beta), variance diagonal A_i, and mean
//! Jacobian D_i, the moment vector stacks one block per basis matrix:
//!
//! ```text
//! g_i(beta) = [ D_i' A_i^{-1/2} M_1 h_i ; ... ; D_i' A_i^{-1/2} M_l h_i ],
//! h_i = W_i (psi(r_i) - c_i),   r_ij = (y_ij - mu_ij) / sqrt(phi v(mu_ij)),
//! ```
//!
//! where `W_i` are the leverage downweights, `psi` the bounded score, and
//! `c_i` its Fisher-consistency correction. With the identity score, unit
//! weights, and zero corrections this reduces to the classical quadratic
//! inference functions.
//!
//! Everything downstream (inner multiplier updates, outer coordinate
//! updates) consumes g only through `lambda' g_i` and its first two
//! derivatives in single coordinates of beta, so this module also provides
//! those contractions in O(cluster size) per coordinate instead of forming
//! any r x p Jacobian. Derivatives treat the corrections `c_i` as constants;
//! they vary slowly with beta and their exact derivative buys nothing for a
//! search direction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RpelError};
use crate::leverage::LeverageWeights;
use crate::model::{
    mean_vector, variance_diagonal, BasisSet, LinkKind, LongitudinalDataset, ModelFamily, Subject,
};
use crate::score::ScoreFunction;

/// Relative step for the finite-difference curvature used under the log
/// link (the identity link has the curvature in closed form).
const CURVATURE_FD_STEP: f64 = 1e-5;

/// Everything needed to evaluate the estimating functions: data, family,
/// correlation basis, score, and per-row downweights.
#[derive(Debug, Clone)]
pub struct EstimatingContext<'a> {
    data: &'a LongitudinalDataset,
    family: ModelFamily,
    basis: BasisSet,
    score: ScoreFunction,
    weights: &'a LeverageWeights,
}

/// Per-subject quantities cached at a fixed beta.
#[derive(Debug, Clone)]
struct SubjectEval {
    /// Diagonal factor b with A^{-1/2} D = diag(b) X.
    b: DVector<f64>,
    /// d b_j / d beta_t = kappa_j x_jt (zero under the identity link).
    kappa: DVector<f64>,
    /// d r_j / d beta_t = -rho_j x_jt.
    rho: DVector<f64>,
    /// psi'(r_j).
    psi1: DVector<f64>,
    /// psi''(r_j).
    psi2: DVector<f64>,
    /// Fisher-consistency corrections c_j.
    corr: DVector<f64>,
    /// u_k = M_k h for each basis matrix, h = W (psi(r) - c).
    u: Vec<DVector<f64>>,
}

/// All subject caches at one beta plus the stacked moment matrix.
#[derive(Debug, Clone)]
pub struct BetaEval {
    beta: DVector<f64>,
    evals: Vec<SubjectEval>,
    /// r x n; column i is g_i(beta).
    g: DMatrix<f64>,
}

impl BetaEval {
    /// r x n moment matrix, one column per subject.
    pub fn g_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Mean moment vector over subjects.
    pub fn g_mean(&self) -> DVector<f64> {
        let n = self.g.ncols() as f64;
        DVector::from_fn(self.g.nrows(), |r, _| self.g.row(r).sum() / n)
    }
}

/// Per-subject caches for a fixed (beta, lambda) pair, giving the
/// coordinate contractions `lambda' dg_i/dbeta_t` in O(m) per coordinate.
#[derive(Debug, Clone)]
pub struct LambdaProfile {
    /// lambda' g_i for each subject.
    t_vals: Vec<f64>,
    /// cvec_j with lambda' dg_i/dbeta_t = sum_j x_jt cvec_j.
    cvecs: Vec<DVector<f64>>,
    /// zvec_j with lambda' d2g_i/dbeta_t^2 = sum_j x_jt^2 zvec_j
    /// (identity link only; the log link differentiates numerically).
    zvecs: Option<Vec<DVector<f64>>>,
}

impl LambdaProfile {
    pub fn t_vals(&self) -> &[f64] {
        &self.t_vals
    }
}

impl<'a> EstimatingContext<'a> {
    pub fn new(
        data: &'a LongitudinalDataset,
        family: ModelFamily,
        basis: BasisSet,
        score: ScoreFunction,
        weights: &'a LeverageWeights,
    ) -> Result<Self> {
        if weights.n_subjects() != data.n_subjects() {
            return Err(RpelError::InvalidData(format!(
                "leverage weights cover {} subjects but the dataset has {}",
                weights.n_subjects(),
                data.n_subjects()
            )));
        }
        for (i, s) in data.subjects().iter().enumerate() {
            if weights.subject(i).len() != s.cluster_size() {
                return Err(RpelError::InvalidData(format!(
                    "leverage weights for subject {i} have length {}, expected {}",
                    weights.subject(i).len(),
                    s.cluster_size()
                )));
            }
        }
        Ok(Self {
            data,
            family,
            basis,
            score,
            weights,
        })
    }

    pub fn data(&self) -> &'a LongitudinalDataset {
        self.data
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn score(&self) -> &ScoreFunction {
        &self.score
    }

    pub fn weights(&self) -> &'a LeverageWeights {
        self.weights
    }

    pub fn n_subjects(&self) -> usize {
        self.data.n_subjects()
    }

    pub fn n_covariates(&self) -> usize {
        self.data.n_covariates()
    }

    /// Length of each moment vector: one block of p per basis matrix.
    pub fn moment_dim(&self) -> usize {
        self.basis.len() * self.data.n_covariates()
    }

    fn subject_eval(
        &self,
        label: usize,
        subj: &Subject,
        w: &DVector<f64>,
        beta: &DVector<f64>,
        frozen_corr: Option<&DVector<f64>>,
    ) -> Result<SubjectEval> {
        let m = subj.cluster_size();
        let mu = mean_vector(&subj.x, beta, &self.family, label)?;
        let a = variance_diagonal(&mu, &self.family)?;
        let phi = self.family.dispersion();

        let mut b = DVector::zeros(m);
        let mut kappa = DVector::zeros(m);
        let mut rho = DVector::zeros(m);
        let mut resid = DVector::zeros(m);
        for j in 0..m {
            let a_isqrt = 1.0 / a[j].sqrt();
            resid[j] = (subj.y[j] - mu[j]) * a_isqrt;
            match self.family.link() {
                LinkKind::Identity => {
                    b[j] = a_isqrt;
                    rho[j] = a_isqrt;
                }
                LinkKind::Log => {
                    b[j] = (mu[j] / phi).sqrt();
                    kappa[j] = 0.5 * b[j];
                    rho[j] = b[j] + 0.5 * resid[j];
                }
            }
        }

        let corr = match frozen_corr {
            Some(c) => c.clone(),
            None => DVector::from_fn(m, |j, _| self.score.correction(&self.family, mu[j])),
        };
        let mut psi1 = DVector::zeros(m);
        let mut psi2 = DVector::zeros(m);
        let mut h = DVector::zeros(m);
        for j in 0..m {
            psi1[j] = self.score.d1(resid[j]);
            psi2[j] = self.score.d2(resid[j]);
            h[j] = w[j] * (self.score.psi(resid[j]) - corr[j]);
        }

        let mut u = Vec::with_capacity(self.basis.len());
        for k in 0..self.basis.len() {
            let mut uk = DVector::zeros(m);
            self.basis.apply(k, h.as_slice(), uk.as_mut_slice());
            u.push(uk);
        }
        Ok(SubjectEval {
            b,
            kappa,
            rho,
            psi1,
            psi2,
            corr,
            u,
        })
    }

    fn g_from_eval(&self, subj: &Subject, eval: &SubjectEval) -> DVector<f64> {
        let p = self.data.n_covariates();
        let m = subj.cluster_size();
        let mut g = DVector::zeros(self.moment_dim());
        for (k, uk) in eval.u.iter().enumerate() {
            for t in 0..p {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += subj.x[(j, t)] * eval.b[j] * uk[j];
                }
                g[k * p + t] = acc;
            }
        }
        g
    }

    /// Moment vector for dataset subject `i`.
    pub fn g_subject(&self, i: usize, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let subj = &self.data.subjects()[i];
        let eval = self.subject_eval(i, subj, self.weights.subject(i), beta, None)?;
        Ok(self.g_from_eval(subj, &eval))
    }

    /// Moment vector for an arbitrary subject outside the dataset (used for
    /// contamination probes), with explicit row weights.
    pub fn g_for(
        &self,
        subj: &Subject,
        w: &DVector<f64>,
        beta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if subj.x.ncols() != self.data.n_covariates() {
            return Err(RpelError::InvalidData(format!(
                "probe subject has {} covariates, expected {}",
                subj.x.ncols(),
                self.data.n_covariates()
            )));
        }
        let eval = self.subject_eval(usize::MAX, subj, w, beta, None)?;
        Ok(self.g_from_eval(subj, &eval))
    }

    /// Evaluates every subject at `beta`, caching what the contractions and
    /// repeated `lambda' g` products need.
    pub fn eval_beta(&self, beta: &DVector<f64>) -> Result<BetaEval> {
        let n = self.data.n_subjects();
        let mut evals = Vec::with_capacity(n);
        let mut g = DMatrix::zeros(self.moment_dim(), n);
        for (i, subj) in self.data.subjects().iter().enumerate() {
            let eval = self.subject_eval(i, subj, self.weights.subject(i), beta, None)?;
            g.set_column(i, &self.g_from_eval(subj, &eval));
            evals.push(eval);
        }
        Ok(BetaEval {
            beta: beta.clone(),
            evals,
            g,
        })
    }

    /// Mean moment vector at `beta`.
    pub fn g_mean(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval_beta(beta)?.g_mean())
    }

    /// v_k = X_i lambda_k for each basis block, skipping zero multipliers.
    fn lambda_images(&self, subj: &Subject, lambda: &DVector<f64>) -> Vec<DVector<f64>> {
        let p = self.data.n_covariates();
        let m = subj.cluster_size();
        (0..self.basis.len())
            .map(|k| {
                let mut v = DVector::zeros(m);
                for t in 0..p {
                    let l = lambda[k * p + t];
                    if l != 0.0 {
                        for j in 0..m {
                            v[j] += subj.x[(j, t)] * l;
                        }
                    }
                }
                v
            })
            .collect()
    }

    fn profile_subject(
        &self,
        subj: &Subject,
        w: &DVector<f64>,
        eval: &SubjectEval,
        lambda: &DVector<f64>,
    ) -> (f64, DVector<f64>, DVector<f64>) {
        let m = subj.cluster_size();
        let vs = self.lambda_images(subj, lambda);

        // t = lambda' g = sum_k v_k . (b o u_k)
        let mut t_val = 0.0;
        // vu_j = sum_k v_kj u_kj feeds the db/dbeta term.
        let mut vu = DVector::<f64>::zeros(m);
        // q2 = sum_k M_k (b o v_k) feeds the dh/dbeta term.
        let mut q2 = DVector::<f64>::zeros(m);
        let mut bv = DVector::<f64>::zeros(m);
        let mut mk_bv = DVector::<f64>::zeros(m);
        for (k, vk) in vs.iter().enumerate() {
            for j in 0..m {
                let caching = eval.b[j] * eval.u[k][j];
                t_val += vk[j] * caching;
                vu[j] += vk[j] * eval.u[k][j];
                bv[j] = eval.b[j] * vk[j];
            }
            self.basis.apply(k, bv.as_slice(), mk_bv.as_mut_slice());
            for j in 0..m {
                q2[j] += mk_bv[j];
            }
        }

        let mut cvec = DVector::zeros(m);
        let mut zvec = DVector::zeros(m);
        for j in 0..m {
            cvec[j] = eval.kappa[j] * vu[j] - q2[j] * w[j] * eval.psi1[j] * eval.rho[j];
            zvec[j] = q2[j] * w[j] * eval.psi2[j] * eval.rho[j] * eval.rho[j];
        }
        (t_val, cvec, zvec)
    }

    /// Builds the (beta, lambda) contraction caches for every subject.
    pub fn lambda_profile(&self, eval: &BetaEval, lambda: &DVector<f64>) -> LambdaProfile {
        let n = self.data.n_subjects();
        let mut t_vals = Vec::with_capacity(n);
        let mut cvecs = Vec::with_capacity(n);
        let mut zvecs = Vec::with_capacity(n);
        for (i, subj) in self.data.subjects().iter().enumerate() {
            let (t, c, z) = self.profile_subject(subj, self.weights.subject(i), &eval.evals[i], lambda);
            t_vals.push(t);
            cvecs.push(c);
            zvecs.push(z);
        }
        let zvecs = match self.family.link() {
            LinkKind::Identity => Some(zvecs),
            LinkKind::Log => None,
        };
        LambdaProfile {
            t_vals,
            cvecs,
            zvecs,
        }
    }

    /// First and second contraction of `lambda' g_i` in coordinate `t`:
    /// returns (lambda' dg_i/dbeta_t, lambda' d2g_i/dbeta_t^2) for all i.
    pub fn coordinate_contractions(
        &self,
        eval: &BetaEval,
        profile: &LambdaProfile,
        lambda: &DVector<f64>,
        t: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.data.n_subjects();
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        match &profile.zvecs {
            Some(zvecs) => {
                for (i, subj) in self.data.subjects().iter().enumerate() {
                    let mut w1 = 0.0;
                    let mut w2 = 0.0;
                    for j in 0..subj.cluster_size() {
                        let xjt = subj.x[(j, t)];
                        w1 += xjt * profile.cvecs[i][j];
                        w2 += xjt * xjt * zvecs[i][j];
                    }
                    first.push(w1);
                    second.push(w2);
                }
            }
            None => {
                // Log link: curvature by central differencing of the first
                // contraction, corrections frozen at the base point.
                let h = CURVATURE_FD_STEP * eval.beta[t].abs().max(1.0);
                let mut beta_hi = eval.beta.clone();
                beta_hi[t] += h;
                let mut beta_lo = eval.beta.clone();
                beta_lo[t] -= h;
                for (i, subj) in self.data.subjects().iter().enumerate() {
                    let w = self.weights.subject(i);
                    let mut w1 = 0.0;
                    for j in 0..subj.cluster_size() {
                        w1 += subj.x[(j, t)] * profile.cvecs[i][j];
                    }
                    first.push(w1);

                    let frozen = Some(&eval.evals[i].corr);
                    let ev_hi = self.subject_eval(i, subj, w, &beta_hi, frozen)?;
                    let ev_lo = self.subject_eval(i, subj, w, &beta_lo, frozen)?;
                    let (_, c_hi, _) = self.profile_subject(subj, w, &ev_hi, lambda);
                    let (_, c_lo, _) = self.profile_subject(subj, w, &ev_lo, lambda);
                    let mut hi = 0.0;
                    let mut lo = 0.0;
                    for j in 0..subj.cluster_size() {
                        hi += subj.x[(j, t)] * c_hi[j];
                        lo += subj.x[(j, t)] * c_lo[j];
                    }
                    second.push((hi - lo) / (2.0 * h));
                }
            }
        }
        Ok((first, second))
    }

    /// lambda' g_i for all subjects at an arbitrary `beta`, without building
    /// the full moment matrix (trial steps during coordinate descent).
    pub fn lambda_dot_g(&self, beta: &DVector<f64>, lambda: &DVector<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.data.n_subjects());
        for (i, subj) in self.data.subjects().iter().enumerate() {
            let w = self.weights.subject(i);
            let eval = self.subject_eval(i, subj, w, beta, None)?;
            let vs = self.lambda_images(subj, lambda);
            let mut t_val = 0.0;
            for (k, vk) in vs.iter().enumerate() {
                for j in 0..subj.cluster_size() {
                    t_val += vk[j] * eval.b[j] * eval.u[k][j];
                }
            }
            out.push(t_val);
        }
        Ok(out)
    }

    /// Full r x p Jacobian dg_i/dbeta for one subject (diagnostics only;
    /// the solver never forms this).
    pub fn g_jacobian(&self, i: usize, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let subj = &self.data.subjects()[i];
        let w = self.weights.subject(i);
        let eval = self.subject_eval(i, subj, w, beta, None)?;
        Ok(self.jacobian_from_eval(subj, w, &eval))
    }

    fn jacobian_from_eval(
        &self,
        subj: &Subject,
        w: &DVector<f64>,
        eval: &SubjectEval,
    ) -> DMatrix<f64> {
        let p = self.data.n_covariates();
        let m = subj.cluster_size();
        let l = self.basis.len();
        let mut jac = DMatrix::zeros(l * p, p);
        let mut svec = DVector::zeros(m);
        let mut mk_s = DVector::zeros(m);
        for t in 0..p {
            for j in 0..m {
                svec[j] = w[j] * eval.psi1[j] * eval.rho[j] * subj.x[(j, t)];
            }
            for k in 0..l {
                self.basis.apply(k, svec.as_slice(), mk_s.as_mut_slice());
                for t2 in 0..p {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += subj.x[(j, t2)]
                            * (eval.kappa[j] * subj.x[(j, t)] * eval.u[k][j]
                                - eval.b[j] * mk_s[j]);
                    }
                    jac[(k * p + t2, t)] = acc;
                }
            }
        }
        jac
    }

    /// Jacobian for an arbitrary subject outside the dataset (contamination
    /// probes), with explicit row weights.
    pub fn g_jacobian_for(
        &self,
        subj: &Subject,
        w: &DVector<f64>,
        beta: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        if subj.x.ncols() != self.data.n_covariates() {
            return Err(RpelError::InvalidData(format!(
                "probe subject has {} covariates, expected {}",
                subj.x.ncols(),
                self.data.n_covariates()
            )));
        }
        let eval = self.subject_eval(usize::MAX, subj, w, beta, None)?;
        Ok(self.jacobian_from_eval(subj, w, &eval))
    }

    /// Mean Jacobian over all subjects.
    pub fn g_jacobian_mean(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.data.n_covariates();
        let mut acc = DMatrix::zeros(self.moment_dim(), p);
        for i in 0..self.data.n_subjects() {
            acc += self.g_jacobian(i, beta)?;
        }
        Ok(acc / self.data.n_subjects() as f64)
    }

    /// Moment vector with corrections frozen to `corr` (test hook for
    /// validating derivatives, which also treat corrections as constant).
    #[doc(hidden)]
    pub fn g_subject_frozen(
        &self,
        i: usize,
        beta: &DVector<f64>,
        corr: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let subj = &self.data.subjects()[i];
        let eval = self.subject_eval(i, subj, self.weights.subject(i), beta, Some(corr))?;
        Ok(self.g_from_eval(subj, &eval))
    }

    /// Corrections c_ij at `beta` for subject `i` (test hook).
    #[doc(hidden)]
    pub fn corrections(&self, i: usize, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let subj = &self.data.subjects()[i];
        let eval = self.subject_eval(i, subj, self.weights.subject(i), beta, None)?;
        Ok(eval.corr)
    }
}
