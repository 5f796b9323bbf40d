//! Rank-r covariance regression parameters.
//!
//! The mean of `y` at predictors `x₁` is `B1·x₁`; the covariance at `x₂` is
//! `A + Σₖ (Bₖ·x₂)(Bₖ·x₂)ᵀ`. Equivalently `y = B1·x₁ + Σₖ γₖ·Bₖ·x₂ + ε`
//! with `γₖ ~ N(0, 1)` and `ε ~ N(0, A)` independent.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::stochastics::{self, RngStream, SpdMatrix};

/// Baseline covariance `A` plus `r` loading matrices, each `p × q2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovRegParams {
    a: SpdMatrix,
    b: Vec<DMatrix<f64>>,
}

impl CovRegParams {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let a = SpdMatrix::new(a)?;
        if b.is_empty() {
            return Err(Error::ShapeMismatch("rank must be at least 1".into()));
        }
        let (p, q2) = b[0].shape();
        if p != a.dim() || b.iter().any(|bk| bk.shape() != (p, q2)) {
            return Err(Error::ShapeMismatch(format!(
                "every B_k must be {}x{q2}",
                a.dim()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn p(&self) -> usize {
        self.a.dim()
    }

    pub fn q2(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn rank(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        self.a.as_matrix()
    }

    pub fn a_spd(&self) -> &SpdMatrix {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    /// `p × r` matrix whose k-th column is `Bₖ·x₂`.
    pub fn loadings_at(&self, x2: &[f64]) -> Result<DMatrix<f64>> {
        if x2.len() != self.q2() {
            return Err(Error::ShapeMismatch(format!(
                "covariance design row has length {}, expected {}",
                x2.len(),
                self.q2()
            )));
        }
        let x = DVector::from_column_slice(x2);
        let mut z = DMatrix::zeros(self.p(), self.rank());
        for (k, bk) in self.b.iter().enumerate() {
            z.set_column(k, &(bk * &x));
        }
        Ok(z)
    }

    /// `A + Z·Zᵀ` as a plain matrix.
    pub fn sigma_matrix(&self, x2: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.loadings_at(x2)?;
        Ok(stochastics::symmetrize(&(self.a() + &z * z.transpose())))
    }

    /// Mixes the rank components by an `r × r` matrix: `B'ₖ = Σₗ Q[k,l]·Bₗ`.
    /// For orthogonal `Q` the implied covariances are unchanged.
    pub fn mix_components(&self, q: &DMatrix<f64>) -> Result<Self> {
        let r = self.rank();
        if q.shape() != (r, r) {
            return Err(Error::ShapeMismatch(format!(
                "mixing matrix must be {r}x{r}"
            )));
        }
        let b = (0..r)
            .map(|k| {
                (0..r).fold(DMatrix::zeros(self.p(), self.q2()), |acc, l| {
                    acc + &self.b[l] * q[(k, l)]
                })
            })
            .collect();
        Ok(Self {
            a: self.a.clone(),
            b,
        })
    }
}

pub fn sigma_at(params: &CovRegParams, x2: &[f64]) -> Result<SpdMatrix> {
    SpdMatrix::new(params.sigma_matrix(x2)?)
}

/// Mean coefficients `B1`, `p × q1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanParams {
    pub b1: DMatrix<f64>,
}

impl MeanParams {
    pub fn new(b1: DMatrix<f64>) -> Self {
        Self { b1 }
    }

    pub fn p(&self) -> usize {
        self.b1.nrows()
    }

    pub fn q1(&self) -> usize {
        self.b1.ncols()
    }
}

pub fn mu_at(mean: &MeanParams, x1: &[f64]) -> Result<DVector<f64>> {
    if x1.len() != mean.q1() {
        return Err(Error::ShapeMismatch(format!(
            "mean design row has length {}, expected {}",
            x1.len(),
            mean.q1()
        )));
    }
    Ok(&mean.b1 * DVector::from_column_slice(x1))
}

/// Per-observation random effects, `n × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEffects {
    pub gamma: DMatrix<f64>,
}

/// Draws responses from the random-effects form of the model. Returns the
/// `n × p` response matrix and the latent effects used.
pub fn simulate(
    mean: &MeanParams,
    params: &CovRegParams,
    design1: &DesignMatrix,
    design2: &DesignMatrix,
    rng: &mut RngStream,
) -> Result<(DMatrix<f64>, LatentEffects)> {
    let n = design1.n_rows();
    if design2.n_rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "design row counts differ: {n} vs {}",
            design2.n_rows()
        )));
    }
    if mean.p() != params.p() {
        return Err(Error::ShapeMismatch(
            "mean and covariance dimensions differ".into(),
        ));
    }
    let p = params.p();
    let r = params.rank();
    let a_chol = params.a_spd().cholesky();
    let mut y = DMatrix::zeros(n, p);
    let mut gamma = DMatrix::zeros(n, r);
    for i in 0..n {
        let x1: Vec<f64> = design1.matrix.row(i).iter().copied().collect();
        let x2: Vec<f64> = design2.matrix.row(i).iter().copied().collect();
        let mu = mu_at(mean, &x1)?;
        let z = params.loadings_at(&x2)?;
        let g = stochastics::standard_normal_vector(r, rng);
        let eps = stochastics::sample_mvn_factored(&DVector::zeros(p), a_chol.l(), rng);
        let yi = mu + &z * &g + eps;
        y.set_row(i, &yi.transpose());
        gamma.set_row(i, &g.transpose());
    }
    Ok((y, LatentEffects { gamma }))
}

/// Serialized parameter file. Matrices are stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub p: usize,
    pub q1: usize,
    pub q2: usize,
    pub r: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B1")]
    pub b1: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub mean_labels: Vec<String>,
    pub cov_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_formula: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_formula: Option<String>,
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {} entries for {rows}x{cols}, got {}",
            rows * cols,
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

impl ModelFile {
    pub fn from_params(
        mean: &MeanParams,
        params: &CovRegParams,
        mean_labels: Vec<String>,
        cov_labels: Vec<String>,
    ) -> Self {
        Self {
            p: params.p(),
            q1: mean.q1(),
            q2: params.q2(),
            r: params.rank(),
            a: to_row_major(params.a()),
            b1: to_row_major(&mean.b1),
            b: params.b().iter().map(to_row_major).collect(),
            mean_labels,
            cov_labels,
            mean_formula: None,
            cov_formula: None,
        }
    }

    pub fn to_params(&self) -> Result<(MeanParams, CovRegParams)> {
        if self.b.len() != self.r {
            return Err(Error::ShapeMismatch(format!(
                "r = {} but {} loading matrices",
                self.r,
                self.b.len()
            )));
        }
        let mean = MeanParams::new(from_row_major(self.p, self.q1, &self.b1)?);
        let a = from_row_major(self.p, self.p, &self.a)?;
        let b = self
            .b
            .iter()
            .map(|bk| from_row_major(self.p, self.q2, bk))
            .collect::<Result<Vec<_>>>()?;
        Ok((mean, CovRegParams::new(a, b)?))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn sigma_with_zero_loadings_is_baseline() {
        let a = dmatrix![2.0, 0.5; 0.5, 1.0];
        let params = CovRegParams::new(a.clone(), vec![DMatrix::zeros(2, 3)]).unwrap();
        for x in [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]] {
            assert_eq!(sigma_at(&params, &x).unwrap().as_matrix(), &a);
        }
    }

    #[test]
    fn sigma_rank_one_and_two_arithmetic() {
        let p1 = CovRegParams::new(DMatrix::identity(2, 2), vec![dmatrix![1.0; 1.0]]).unwrap();
        assert_eq!(
            sigma_at(&p1, &[1.0]).unwrap().as_matrix(),
            &dmatrix![2.0, 1.0; 1.0, 2.0]
        );
        let p2 = CovRegParams::new(
            DMatrix::identity(2, 2),
            vec![dmatrix![1.0; 0.0], dmatrix![0.0; 1.0]],
        )
        .unwrap();
        assert_eq!(
            sigma_at(&p2, &[1.0]).unwrap().as_matrix(),
            &dmatrix![2.0, 0.0; 0.0, 2.0]
        );
    }

    #[test]
    fn sigma_shape_mismatch() {
        let p1 = CovRegParams::new(DMatrix::identity(2, 2), vec![dmatrix![1.0; 1.0]]).unwrap();
        assert!(matches!(
            sigma_at(&p1, &[1.0, 0.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_variance_baseline_rejected() {
        assert!(matches!(
            CovRegParams::new(dmatrix![0.0, 0.0; 0.0, 1.0], vec![dmatrix![1.0; 1.0]]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn mu_intercept_row_and_zero() {
        let b1 = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
        let m = MeanParams::new(b1.clone());
        assert_eq!(
            mu_at(&m, &[1.0, 0.0, 0.0]).unwrap(),
            b1.column(0).into_owned()
        );
        let z = MeanParams::new(DMatrix::zeros(2, 3));
        assert_eq!(mu_at(&z, &[1.0, 1.0, 1.0]).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn mu_matches_dot_products() {
        let mut rng = RngStream::new(11, 0);
        let b1 = DMatrix::from_fn(3, 5, |_, _| rng.standard_normal());
        let x: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let mu = mu_at(&MeanParams::new(b1.clone()), &x).unwrap();
        for j in 0..3 {
            let dot: f64 = (0..5).map(|k| b1[(j, k)] * x[k]).sum();
            assert!((mu[j] - dot).abs() < 1e-12);
        }
    }

    fn replicate_cov(params: &CovRegParams, x2: &[f64], n: usize, seed: u64) -> DMatrix<f64> {
        let p = params.p();
        let mean = MeanParams::new(DMatrix::from_element(p, 1, 3.0));
        let d1 =
            DesignMatrix::from_matrix(DMatrix::from_element(n, 1, 1.0), vec!["1".into()]).unwrap();
        let d2 = DesignMatrix::from_matrix(
            DMatrix::from_fn(n, x2.len(), |_, c| x2[c]),
            (0..x2.len()).map(|c| c.to_string()).collect(),
        )
        .unwrap();
        let mut rng = RngStream::new(seed, 0);
        let (y, lat) = simulate(&mean, params, &d1, &d2, &mut rng).unwrap();
        assert_eq!(lat.gamma.shape(), (n, params.rank()));
        let m = y.row_mean();
        let c = &y - DMatrix::from_fn(n, p, |_, j| m[j]);
        c.transpose() * c / (n as f64 - 1.0)
    }

    #[test]
    fn simulate_zero_loadings_gives_baseline_covariance() {
        let a = dmatrix![1.0, 0.3, 0.0; 0.3, 1.5, -0.2; 0.0, -0.2, 0.8];
        let params = CovRegParams::new(a.clone(), vec![DMatrix::zeros(3, 2)]).unwrap();
        let s = replicate_cov(&params, &[1.0, 1.0], 100_000, 5);
        assert!((s - a).amax() < 0.05);
    }

    #[test]
    fn simulate_rank_one_matches_sigma() {
        let a = dmatrix![1.0, 0.2; 0.2, 0.5];
        let params = CovRegParams::new(a, vec![dmatrix![0.5, 0.7; -0.4, 0.3]]).unwrap();
        let x2 = [1.0, 1.0];
        let s = replicate_cov(&params, &x2, 100_000, 6);
        assert!((s - params.sigma_matrix(&x2).unwrap()).amax() < 0.05);
    }

    #[test]
    fn model_file_round_trip() {
        let mean = MeanParams::new(dmatrix![1.0, 2.0; 3.0, 4.0]);
        let params = CovRegParams::new(
            dmatrix![1.0, 0.1; 0.1, 2.0],
            vec![dmatrix![0.1, 0.2, 0.3; 0.4, 0.5, 0.6]],
        )
        .unwrap();
        let file = ModelFile::from_params(
            &mean,
            &params,
            vec!["a".into(), "b".into()],
            vec!["c".into(); 3],
        );
        assert_eq!(file.b1, vec![1.0, 2.0, 3.0, 4.0]);
        let json = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&json).unwrap();
        let (m2, p2) = back.to_params().unwrap();
        assert_eq!(m2, mean);
        assert_eq!(p2, params);
    }
}
