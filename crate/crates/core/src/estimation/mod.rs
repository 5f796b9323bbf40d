//! Likelihood, EM and Gibbs estimation, and posterior summaries.

mod draws;
mod em;
mod gibbs;
mod summary;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

pub use draws::{Draw, PosteriorDraws};
pub use em::{default_start, fit_em, EmInit, EmOptions, FitResultML};
pub use gibbs::{fit_gibbs, ChainConfig, Priors};
pub use summary::{
    summarize_coefficients, summarize_groups, summarize_point, CellDesigns, CoefficientSummary,
    GroupSummary, Interval,
};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::model::{CovRegParams, MeanParams};
use crate::stochastics::CholeskyFactor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows sharing identical mean and covariance design rows. Model
/// quantities (`μ`, `Σ`, the conditional law of the random effects) are
/// constant within a group, so per-iteration work scales with the number
/// of distinct rows rather than with `n`.
#[derive(Clone, Debug)]
pub(crate) struct DesignGroups {
    pub x1: Vec<DVector<f64>>,
    pub x2: Vec<DVector<f64>>,
    pub rows: Vec<Vec<usize>>,
}

impl DesignGroups {
    pub fn new(design1: &DesignMatrix, design2: &DesignMatrix) -> Result<Self> {
        let n = design1.n_rows();
        if design2.n_rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "design row counts differ: {n} vs {}",
                design2.n_rows()
            )));
        }
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups = Self {
            x1: Vec::new(),
            x2: Vec::new(),
            rows: Vec::new(),
        };
        for i in 0..n {
            let key: Vec<u64> = design1
                .matrix
                .row(i)
                .iter()
                .chain(design2.matrix.row(i).iter())
                .map(|v| v.to_bits())
                .collect();
            let g = *index.entry(key).or_insert_with(|| {
                groups
                    .x1
                    .push(design1.matrix.row(i).transpose().into_owned());
                groups
                    .x2
                    .push(design2.matrix.row(i).transpose().into_owned());
                groups.rows.push(Vec::new());
                groups.rows.len() - 1
            });
            groups.rows[g].push(i);
        }
        Ok(groups)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

/// `Σᵢ log N_p(yᵢ; μ_{xᵢ}, Σ_{xᵢ})`.
pub fn loglik(
    mean: &MeanParams,
    params: &CovRegParams,
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
) -> Result<f64> {
    check_shapes(mean, params, y, design1, design2)?;
    let groups = DesignGroups::new(design1, design2)?;
    loglik_grouped(mean, params, y, &groups)
}

pub(crate) fn loglik_grouped(
    mean: &MeanParams,
    params: &CovRegParams,
    y: &DMatrix<f64>,
    groups: &DesignGroups,
) -> Result<f64> {
    let p = y.ncols();
    let mut total = 0.0;
    for g in 0..groups.len() {
        let mu = &mean.b1 * &groups.x1[g];
        let sigma = params.sigma_matrix(groups.x2[g].as_slice())?;
        let chol = CholeskyFactor::new(&sigma)?;
        let log_det = chol.log_det();
        let mut quad = 0.0;
        for &i in &groups.rows[g] {
            let r = y.row(i).transpose() - &mu;
            quad += chol.whiten(&r).norm_squared();
        }
        let n_g = groups.rows[g].len() as f64;
        total += -0.5 * (n_g * (p as f64 * LN_2PI + log_det) + quad);
    }
    Ok(total)
}

pub(crate) fn check_shapes(
    mean: &MeanParams,
    params: &CovRegParams,
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
) -> Result<()> {
    let (n, p) = y.shape();
    if mean.p() != p || params.p() != p {
        return Err(Error::ShapeMismatch(format!(
            "responses have {p} columns, parameters have {} and {}",
            mean.p(),
            params.p()
        )));
    }
    if design1.n_rows() != n || design2.n_rows() != n {
        return Err(Error::ShapeMismatch(
            "design rows do not match responses".into(),
        ));
    }
    if design1.n_cols() != mean.q1() || design2.n_cols() != params.q2() {
        return Err(Error::ShapeMismatch(
            "design columns do not match parameters".into(),
        ));
    }
    Ok(())
}

/// `−2·loglik + 2·k`.
pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

/// Free parameters of the homoscedastic mean model: `p·q1` coefficients
/// plus an unrestricted `p × p` covariance.
pub fn homoscedastic_param_count(p: usize, q1: usize) -> usize {
    p * q1 + p * (p + 1) / 2
}

/// Closed-form maximum likelihood fit under a common covariance: per-
/// response least squares and the residual covariance with divisor `n`.
#[derive(Clone, Debug)]
pub struct HomoscedasticFit {
    pub mean: MeanParams,
    pub sigma: DMatrix<f64>,
    pub loglik: f64,
    pub n_params: usize,
}

pub fn fit_homoscedastic(y: &DMatrix<f64>, design1: &DesignMatrix) -> Result<HomoscedasticFit> {
    let (n, p) = y.shape();
    if design1.n_rows() != n {
        return Err(Error::ShapeMismatch(
            "design rows do not match responses".into(),
        ));
    }
    design1.check_full_rank()?;
    let b1 = ols(y, &design1.matrix)?;
    let resid = y - &design1.matrix * b1.transpose();
    let sigma = resid.transpose() * &resid / n as f64;
    let chol = CholeskyFactor::new(&sigma)
        .map_err(|_| Error::DegenerateDesign("residual covariance is singular".into()))?;
    let loglik = -0.5 * n as f64 * (p as f64 * LN_2PI + chol.log_det() + p as f64);
    Ok(HomoscedasticFit {
        mean: MeanParams::new(b1),
        sigma,
        loglik,
        n_params: homoscedastic_param_count(p, design1.n_cols()),
    })
}

/// Least-squares coefficients `B1` (`p × q`) for `Y ≈ X·B1ᵀ`.
pub(crate) fn ols(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = x.transpose() * x;
    let chol = CholeskyFactor::new(&gram)
        .map_err(|_| Error::DegenerateDesign("design Gram matrix is singular".into()))?;
    let xty = x.transpose() * y;
    Ok(chol.solve(&xty).transpose())
}

/// Per-group latent moments feeding the complete-data sufficient
/// statistics: count, `Σγ`, `Σγγᵀ` (including conditional covariance in
/// the EM case), `Σy` and `Σyγᵀ`.
pub(crate) struct GroupMoments {
    pub count: f64,
    pub sum_g: DVector<f64>,
    pub sum_gg: DMatrix<f64>,
    pub sum_y: DVector<f64>,
    pub sum_yg: DMatrix<f64>,
}

/// Builds `Σ z zᵀ` and `Σ y zᵀ` for the stacked regressor
/// `z = [x₁; γ₁x₂; …; γᵣx₂]`, whose coefficient matrix is `[B1, B₁, …, Bᵣ]`.
pub(crate) fn stacked_moments(
    groups: &DesignGroups,
    moments: &[GroupMoments],
    p: usize,
    r: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let q1 = groups.x1[0].len();
    let q2 = groups.x2[0].len();
    let d = q1 + r * q2;
    let offset = |block: usize| if block == 0 { 0 } else { q1 + (block - 1) * q2 };
    let mut szz = DMatrix::zeros(d, d);
    let mut syz = DMatrix::zeros(p, d);
    let sparse = |x: &DVector<f64>| -> Vec<(usize, f64)> {
        x.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect()
    };
    for (g, m) in moments.iter().enumerate() {
        if m.count == 0.0 {
            continue;
        }
        let x1 = sparse(&groups.x1[g]);
        let x2 = sparse(&groups.x2[g]);
        let xs = |block: usize| if block == 0 { &x1 } else { &x2 };
        // weight[a][b] = Σ z-block-scalar products: count, Σγ, Σγγᵀ.
        let weight = |a: usize, b: usize| match (a, b) {
            (0, 0) => m.count,
            (0, k) => m.sum_g[k - 1],
            (k, 0) => m.sum_g[k - 1],
            (k, l) => m.sum_gg[(k - 1, l - 1)],
        };
        for a in 0..=r {
            for b in 0..=r {
                let w = weight(a, b);
                if w == 0.0 {
                    continue;
                }
                for &(i, xi) in xs(a) {
                    for &(j, xj) in xs(b) {
                        szz[(offset(a) + i, offset(b) + j)] += w * xi * xj;
                    }
                }
            }
        }
        for &(i, xi) in &x1 {
            for row in 0..p {
                syz[(row, i)] += m.sum_y[row] * xi;
            }
        }
        for k in 0..r {
            for &(i, xi) in &x2 {
                for row in 0..p {
                    syz[(row, offset(k + 1) + i)] += m.sum_yg[(row, k)] * xi;
                }
            }
        }
    }
    (szz, syz)
}

/// Splits a stacked `p × (q1 + r·q2)` coefficient matrix into its parts.
pub(crate) fn unstack(
    c: &DMatrix<f64>,
    q1: usize,
    q2: usize,
    r: usize,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let p = c.nrows();
    let b1 = c.view((0, 0), (p, q1)).into_owned();
    let b = (0..r)
        .map(|k| c.view((0, q1 + k * q2), (p, q2)).into_owned())
        .collect();
    (b1, b)
}
