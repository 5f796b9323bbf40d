use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::em::{check_estimable, latent_posteriors};
use super::{ols, stacked_moments, unstack, DesignGroups, Draw, GroupMoments, PosteriorDraws};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::model::{CovRegParams, MeanParams};
use crate::stochastics::{self, symmetrize, CholeskyFactor, RngStream, SpdMatrix};

/// Prior hyperparameters, on the standardized response scale.
///
/// Coefficients (`B1` and every `Bₖ`) get independent `N(0, tau2)` priors;
/// `A ~ inverse-Wishart(ν₀, (ν₀ − p − 1)·S₀)` with `S₀` the least-squares
/// residual covariance, so that the prior mean of `A` is `S₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub tau2: f64,
    /// Defaults to `p + 2`.
    #[serde(default)]
    pub a_dof: Option<f64>,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            tau2: 100.0,
            a_dof: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in: 2000,
            samples: 5000,
            thin: 5,
        }
    }
}

impl ChainConfig {
    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.samples * self.thin
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.thin == 0 {
            return Err(Error::InvalidConfig(
                "samples and thin must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Affine map `y = centre + scale ⊙ ỹ` between data and sampler scales.
struct Standardization {
    centre: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardization {
    fn new(y: &DMatrix<f64>, centre: bool) -> Result<Self> {
        let (n, p) = y.shape();
        let means = y.row_mean().transpose();
        let scale = DVector::from_fn(p, |j, _| {
            let m = means[j];
            (y.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        });
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::DegenerateDesign(
                "a response column is constant".into(),
            ));
        }
        Ok(Self {
            centre: if centre { means } else { DVector::zeros(p) },
            scale,
        })
    }

    fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            (y[(i, j)] - self.centre[j]) / self.scale[j]
        })
    }

    fn restore(&self, b1: &DMatrix<f64>, a: &DMatrix<f64>, b: &[DMatrix<f64>]) -> Result<Draw> {
        let d = DMatrix::from_diagonal(&self.scale);
        let mut b1 = &d * b1;
        for j in 0..b1.nrows() {
            b1[(j, 0)] += self.centre[j];
        }
        let a = symmetrize(&(&d * a * &d));
        let b = b.iter().map(|bk| &d * bk).collect();
        Ok(Draw {
            mean: MeanParams::new(b1),
            params: CovRegParams::new(a, b)?,
        })
    }
}

/// Gibbs sampler over (random effects, stacked coefficients, `A`).
///
/// Responses are standardized internally (centred only when the mean
/// design has an intercept column); stored draws are on the data scale.
pub fn fit_gibbs(
    y: &DMatrix<f64>,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rank: usize,
    priors: &Priors,
    chain: &ChainConfig,
    rng: &mut RngStream,
) -> Result<PosteriorDraws> {
    check_estimable(y, design1, design2, rank)?;
    chain.validate()?;
    let (n, p) = y.shape();
    let (q1, q2) = (design1.n_cols(), design2.n_cols());
    let std = Standardization::new(y, design1.has_intercept())?;
    let ys = std.apply(y);
    let groups = DesignGroups::new(design1, design2)?;
    let syy = ys.transpose() * &ys;

    let b1 = ols(&ys, &design1.matrix)?;
    let resid = &ys - &design1.matrix * b1.transpose();
    let pooled = symmetrize(&(resid.transpose() * &resid / n as f64));
    let a_dof = priors.a_dof.unwrap_or(p as f64 + 2.0);
    if !(a_dof > p as f64 + 1.0) {
        return Err(Error::DofTooSmall { dof: a_dof, dim: p });
    }
    let prior_scale = &pooled * (a_dof - p as f64 - 1.0);
    let prior_precision = 1.0 / priors.tau2;

    let mut mean = MeanParams::new(b1);
    let b = (0..rank)
        .map(|_| DMatrix::from_fn(p, q2, |_, _| 0.1 * rng.standard_normal()))
        .collect();
    let mut params = CovRegParams::new(pooled, b)
        .map_err(|_| Error::DegenerateDesign("residual covariance is singular".into()))?;

    let mut draws = Vec::with_capacity(chain.samples);
    for iter in 0..chain.total_iterations() {
        // Random effects.
        let a_inv = CholeskyFactor::new(params.a())?.inverse();
        let post = latent_posteriors(&mean, &params, &a_inv, &groups)?;
        let moments: Vec<GroupMoments> = (0..groups.len())
            .map(|g| {
                let lp = &post[g];
                let l = CholeskyFactor::new(&lp.cov)?;
                let l = l.l();
                let mut m = GroupMoments {
                    count: groups.rows[g].len() as f64,
                    sum_g: DVector::zeros(rank),
                    sum_gg: DMatrix::zeros(rank, rank),
                    sum_y: DVector::zeros(p),
                    sum_yg: DMatrix::zeros(p, rank),
                };
                let mut dev = vec![0.0; p];
                let mut z = vec![0.0; rank];
                let mut gi = vec![0.0; rank];
                for &i in &groups.rows[g] {
                    for j in 0..p {
                        dev[j] = ys[(i, j)] - lp.mu[j];
                    }
                    for (a, za) in z.iter_mut().enumerate() {
                        *za = rng.standard_normal();
                        gi[a] = (0..p).map(|j| lp.gain[(a, j)] * dev[j]).sum();
                    }
                    for a in 0..rank {
                        gi[a] += (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>();
                        m.sum_g[a] += gi[a];
                        for b in 0..=a {
                            m.sum_gg[(a, b)] += gi[a] * gi[b];
                        }
                        for j in 0..p {
                            m.sum_yg[(j, a)] += ys[(i, j)] * gi[a];
                        }
                    }
                    for j in 0..p {
                        m.sum_y[j] += ys[(i, j)];
                    }
                }
                for a in 0..rank {
                    for b in 0..a {
                        m.sum_gg[(b, a)] = m.sum_gg[(a, b)];
                    }
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;

        // Stacked coefficients [B1, B₁..Bᵣ] given γ and A.
        let (szz, syz) = stacked_moments(&groups, &moments, p, rank);
        let c = sample_coefficients(&szz, &syz, params.a(), prior_precision, rng);
        let (b1, b) = unstack(&c, q1, q2, rank);
        mean = MeanParams::new(b1);

        // Baseline covariance given everything else; the residual sum of
        // squares Σ(y − Cz)(y − Cz)ᵀ is expanded in the stacked moments.
        let c_syz = &c * syz.transpose();
        let resid_ss = &syy - &c_syz - c_syz.transpose() + &c * &szz * c.transpose();
        if resid_ss.iter().any(|v| !v.is_finite()) || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(iter));
        }
        let scale = SpdMatrix::new(symmetrize(&(&prior_scale + resid_ss)))?;
        let a = stochastics::sample_inverse_wishart(a_dof + n as f64, &scale, rng)?;
        params = CovRegParams::new(a.into_inner(), b)?;

        if iter >= chain.burn_in && (iter - chain.burn_in + 1).is_multiple_of(chain.thin) {
            draws.push(std.restore(&mean.b1, params.a(), params.b())?);
        }
    }

    Ok(PosteriorDraws {
        draws,
        burn_in: chain.burn_in,
        thin: chain.thin,
        seed: rng.seed(),
        stream_id: rng.stream_id(),
        mean_labels: design1.labels.clone(),
        cov_labels: design2.labels.clone(),
        response_names: Vec::new(),
        mean_formula: None,
        cov_formula: None,
    })
}

/// Draws `C` from its normal full conditional with precision
/// `(Szz ⊗ A⁻¹) + τ⁻²·I` on `vec(C)`. Both Kronecker factors are
/// diagonalized, so in the rotated basis `Uᵀ·C·W` the entries are
/// independent.
fn sample_coefficients(
    szz: &DMatrix<f64>,
    syz: &DMatrix<f64>,
    a: &DMatrix<f64>,
    prior_precision: f64,
    rng: &mut RngStream,
) -> DMatrix<f64> {
    let eig_a = a.clone().symmetric_eigen();
    let eig_z = symmetrize(szz).symmetric_eigen();
    let u = &eig_a.eigenvectors;
    let w = &eig_z.eigenvectors;
    let rhs = u.transpose() * syz * w;
    let (p, d) = rhs.shape();
    let rotated = DMatrix::from_fn(p, d, |i, j| {
        let lam_inv = 1.0 / eig_a.eigenvalues[i];
        let prec = eig_z.eigenvalues[j].max(0.0) * lam_inv + prior_precision;
        let centre = rhs[(i, j)] * lam_inv / prec;
        centre + rng.standard_normal() / prec.sqrt()
    });
    u * rotated * w.transpose()
}
