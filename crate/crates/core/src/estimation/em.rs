use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    check_shapes, loglik_grouped, ols, stacked_moments, unstack, DesignGroups, GroupMoments,
};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::model::{CovRegParams, MeanParams, ModelFile};
use crate::stochastics::{symmetrize, CholeskyFactor, RngStream};

#[derive(Clone, Debug)]
pub enum EmInit {
    /// Multi-start: a second-moment start plus random starts drawn from
    /// the given seed (see [`default_start`]), each run to convergence.
    Default { seed: u64 },
    Given {
        mean: MeanParams,
        params: CovRegParams,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol_rel: f64,
    pub max_iters: usize,
    /// Starts tried under [`EmInit::Default`]; the highest final
    /// log-likelihood wins.
    pub n_starts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-6,
            max_iters: 500,
            n_starts: 8,
        }
    }
}

/// Maximum-likelihood fit. `loglik_trace[0]` is the starting value and
/// `loglik_trace[k]` the value after `k` EM iterations.
#[derive(Clone, Debug)]
pub struct FitResultML {
    pub mean: MeanParams,
    pub params: CovRegParams,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub mean_labels: Vec<String>,
    pub cov_labels: Vec<String>,
}

impl FitResultML {
    pub fn loglik(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace holds the starting value")
    }

    pub fn to_json(&self) -> FitJson {
        FitJson {
            model: ModelFile::from_params(
                &self.mean,
                &self.params,
                self.mean_labels.clone(),
                self.cov_labels.clone(),
            ),
            loglik: self.loglik(),
            loglik_trace: self.loglik_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// On-disk form of [`FitResultML`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    #[serde(flatten)]
    pub model: ModelFile,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitJson {
    pub fn to_fit(&self) -> Result<FitResultML> {
        let (mean, params) = self.model.to_params()?;
        Ok(FitResultML {
            mean,
            params,
            loglik_trace: self.loglik_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            mean_labels: self.model.mean_labels.clone(),
            cov_labels: self.model.cov_labels.clone(),
        })
    }
}

pub(crate) fn check_estimable(
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rank: usize,
) -> Result<()> {
    let (n, p) = y.shape();
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    if n <= design1.n_cols() || n <= p {
        return Err(Error::DegenerateDesign(format!(
            "n = {n} must exceed q1 = {} and p = {p}",
            design1.n_cols()
        )));
    }
    if design1.n_rows() != n || design2.n_rows() != n {
        return Err(Error::ShapeMismatch(
            "design rows do not match responses".into(),
        ));
    }
    design1.check_full_rank()?;
    design2.check_full_rank()?;
    Ok(())
}

pub fn default_start(
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rank: usize,
    seed: u64,
    stream: u64,
) -> Result<(MeanParams, CovRegParams)> {
    let (n, p) = y.shape();
    let b1 = ols(y, &design1.matrix)?;
    let resid = y - &design1.matrix * b1.transpose();
    let a = symmetrize(&(resid.transpose() * &resid / n as f64));
    let mut rng = RngStream::new(seed, stream);
    // Loadings ~ N(0, 0.01) in units of each response's residual scale.
    let b = (0..rank)
        .map(|_| {
            DMatrix::from_fn(p, design2.n_cols(), |j, _| {
                0.1 * a[(j, j)].sqrt() * rng.standard_normal()
            })
        })
        .collect();
    let params = CovRegParams::new(a, b).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => {
            Error::DegenerateDesign("residual covariance is singular".into())
        }
        e => e,
    })?;
    Ok((MeanParams::new(b1), params))
}

/// Start from second moments of least-squares residuals: each product
/// `r_j r_k` is regressed on the pairwise products of the covariance
/// design, the fitted coefficients are assembled into a `pq × pq`
/// symmetric matrix, and its leading `rank` eigenvectors become the
/// loadings. `A` starts at half the residual covariance.
fn moment_start(
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rank: usize,
) -> Result<(MeanParams, CovRegParams)> {
    let (n, p) = y.shape();
    let x2 = &design2.matrix;
    let q = x2.ncols();
    let b1 = ols(y, &design1.matrix)?;
    let resid = y - &design1.matrix * b1.transpose();
    let feats: Vec<(usize, usize)> = (0..q).flat_map(|a| (a..q).map(move |b| (a, b))).collect();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect();
    let f = DMatrix::from_fn(n, feats.len(), |i, c| {
        x2[(i, feats[c].0)] * x2[(i, feats[c].1)]
    });
    let t = DMatrix::from_fn(n, pairs.len(), |i, c| {
        resid[(i, pairs[c].0)] * resid[(i, pairs[c].1)]
    });
    let coef = f
        .svd(true, true)
        .solve(&t, 1e-10)
        .map_err(|e| Error::DegenerateDesign(e.into()))?;
    let mut g = DMatrix::zeros(p * q, p * q);
    for (c, &(j, k)) in pairs.iter().enumerate() {
        for (ci, &(a, b)) in feats.iter().enumerate() {
            let v = if a == b {
                coef[(ci, c)]
            } else {
                coef[(ci, c)] / 2.0
            };
            for (u, w) in [(j * q + a, k * q + b), (j * q + b, k * q + a)] {
                g[(u, w)] = v;
                g[(w, u)] = v;
            }
        }
    }
    let eig = g.symmetric_eigen();
    let mut order: Vec<usize> = (0..p * q).collect();
    order.sort_by(|&u, &w| eig.eigenvalues[w].total_cmp(&eig.eigenvalues[u]));
    let b = order[..rank]
        .iter()
        .map(|&m| {
            let scale = eig.eigenvalues[m].max(0.0).sqrt();
            DMatrix::from_fn(p, q, |j, a| scale * eig.eigenvectors[(j * q + a, m)])
        })
        .collect();
    let a = symmetrize(&(resid.transpose() * &resid / (2 * n) as f64));
    let params = CovRegParams::new(a, b).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => {
            Error::DegenerateDesign("residual covariance is singular".into())
        }
        e => e,
    })?;
    Ok((MeanParams::new(b1), params))
}

/// Conditional law of the random effects within one design group:
/// `γ | y ~ N(M·(y − μ), V)` with `V = (I + Zᵀ A⁻¹ Z)⁻¹`, `M = V Zᵀ A⁻¹`.
pub(crate) struct LatentPosterior {
    pub mu: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

pub(crate) fn latent_posteriors(
    mean: &MeanParams,
    params: &CovRegParams,
    a_inv: &DMatrix<f64>,
    groups: &DesignGroups,
) -> Result<Vec<LatentPosterior>> {
    let r = params.rank();
    (0..groups.len())
        .map(|g| {
            let z = params.loadings_at(groups.x2[g].as_slice())?;
            let zt_ainv = z.transpose() * a_inv;
            let prec = DMatrix::identity(r, r) + &zt_ainv * &z;
            let cov = CholeskyFactor::new(&symmetrize(&prec))?.inverse();
            let gain = &cov * zt_ainv;
            Ok(LatentPosterior {
                mu: &mean.b1 * &groups.x1[g],
                gain,
                cov,
            })
        })
        .collect()
}

pub fn fit_em(
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rank: usize,
    init: EmInit,
    options: EmOptions,
) -> Result<FitResultML> {
    check_estimable(y, design1, design2, rank)?;
    let groups = DesignGroups::new(design1, design2)?;
    let best = match init {
        EmInit::Default { seed } => {
            let mut best: Option<EmState> = None;
            for k in 0..options.n_starts.max(1) {
                let (mean, params) = if k == 0 {
                    moment_start(y, design1, design2, rank)?
                } else {
                    default_start(y, design1, design2, rank, seed, k as u64)?
                };
                let mut state = EmState::new(mean, params, y, &groups)?;
                state.run(y, &groups, options.max_iters, options.tol_rel)?;
                if best.as_ref().is_none_or(|b| state.loglik() > b.loglik()) {
                    best = Some(state);
                }
            }
            best.expect("at least one start")
        }
        EmInit::Given { mean, params } => {
            if params.rank() != rank {
                return Err(Error::InvalidConfig(
                    "initial parameters have a different rank".into(),
                ));
            }
            check_shapes(&mean, &params, y, design1, design2)?;
            let mut state = EmState::new(mean, params, y, &groups)?;
            state.run(y, &groups, options.max_iters, options.tol_rel)?;
            state
        }
    };
    Ok(FitResultML {
        iterations: best.iterations(),
        converged: best.converged,
        mean: best.mean,
        params: best.params,
        loglik_trace: best.trace,
        mean_labels: design1.labels.clone(),
        cov_labels: design2.labels.clone(),
    })
}

struct EmState {
    mean: MeanParams,
    params: CovRegParams,
    trace: Vec<f64>,
    converged: bool,
}

impl EmState {
    fn new(
        mean: MeanParams,
        params: CovRegParams,
        y: &DMatrix<f64>,
        groups: &DesignGroups,
    ) -> Result<Self> {
        let ll = loglik_grouped(&mean, &params, y, groups)?;
        Ok(Self {
            mean,
            params,
            trace: vec![ll],
            converged: false,
        })
    }

    fn loglik(&self) -> f64 {
        *self.trace.last().unwrap()
    }

    fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    /// Up to `iters` EM iterations, stopping early on convergence.
    fn run(
        &mut self,
        y: &DMatrix<f64>,
        groups: &DesignGroups,
        iters: usize,
        tol_rel: f64,
    ) -> Result<()> {
        for _ in 0..iters {
            let (mean, params) = em_step(&self.mean, &self.params, y, groups)?;
            let ll = loglik_grouped(&mean, &params, y, groups)?;
            if !ll.is_finite() {
                return Err(Error::NonFiniteState(self.iterations() + 1));
            }
            let prev = self.loglik();
            self.mean = mean;
            self.params = params;
            self.trace.push(ll);
            if (ll - prev).abs() < tol_rel * ll.abs() {
                self.converged = true;
                break;
            }
        }
        Ok(())
    }
}

fn em_step(
    mean: &MeanParams,
    params: &CovRegParams,
    y: &DMatrix<f64>,
    groups: &DesignGroups,
) -> Result<(MeanParams, CovRegParams)> {
    let (n, p) = y.shape();
    let rank = params.rank();
    let (q1, q2) = (mean.q1(), params.q2());
    let a_inv = CholeskyFactor::new(params.a())?.inverse();
    let post = latent_posteriors(mean, params, &a_inv, groups)?;

    // E-step: expected sufficient statistics per group.
    let moments: Vec<GroupMoments> = (0..groups.len())
        .map(|g| {
            let lp = &post[g];
            let rows = &groups.rows[g];
            let mut m = GroupMoments {
                count: rows.len() as f64,
                sum_g: DVector::zeros(rank),
                sum_gg: &lp.cov * rows.len() as f64,
                sum_y: DVector::zeros(p),
                sum_yg: DMatrix::zeros(p, rank),
            };
            let mut dev = vec![0.0; p];
            let mut mi = vec![0.0; rank];
            for &i in rows {
                for j in 0..p {
                    dev[j] = y[(i, j)] - lp.mu[j];
                    m.sum_y[j] += y[(i, j)];
                }
                for (a, ma) in mi.iter_mut().enumerate() {
                    *ma = (0..p).map(|j| lp.gain[(a, j)] * dev[j]).sum();
                }
                for a in 0..rank {
                    m.sum_g[a] += mi[a];
                    for b in 0..rank {
                        m.sum_gg[(a, b)] += mi[a] * mi[b];
                    }
                    for j in 0..p {
                        m.sum_yg[(j, a)] += y[(i, j)] * mi[a];
                    }
                }
            }
            m
        })
        .collect();

    // M-step: every response shares the stacked regressor, so the
    // coefficient update is least squares on expected moments, and the
    // expected residual sum of squares is Syy − C·Syzᵀ.
    let (szz, syz) = stacked_moments(groups, &moments, p, rank);
    let szz_chol = CholeskyFactor::new(&symmetrize(&szz))
        .map_err(|_| Error::DegenerateDesign("expected moment matrix is singular".into()))?;
    let c = szz_chol.solve(&syz.transpose()).transpose();
    let (b1, b) = unstack(&c, q1, q2, rank);
    let syy = y.transpose() * y;
    let c_syz = &c * syz.transpose();
    let resid_ss = &syy - &c_syz - c_syz.transpose() + &c * &szz * c.transpose();
    let a = symmetrize(&(resid_ss / n as f64));
    Ok((MeanParams::new(b1), CovRegParams::new(a, b)?))
}
