//! Dense linear-algebra contracts and random samplers.
//!
//! Everything here is deterministic given an [`RngStream`]. The Cholesky
//! factorization is hand-rolled so that the positive-definiteness tolerance
//! (`1e-12 × max diagonal`) is under our control; triangular solves go
//! through nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative pivot tolerance used by [`cholesky`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Relative asymmetry tolerated by [`SpdMatrix::new`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// A seeded, stream-addressable random number generator.
///
/// Two streams built from the same `(seed, stream_id)` produce identical
/// sequences; different stream ids select disjoint ChaCha streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream sharing this stream's seed.
    pub fn substream(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// A symmetric positive-definite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry (relative to the largest entry) and positive
    /// definiteness. The stored matrix is exactly symmetrized.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "SPD matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::ShapeMismatch(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let m = symmetrize(&m);
        cholesky(&m)?;
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn cholesky(&self) -> CholeskyFactor {
        // Validated at construction.
        CholeskyFactor {
            l: cholesky(&self.0).expect("SpdMatrix invariant"),
        }
    }
}

/// Lower Cholesky factor of `m`, `L·Lᵀ = m`.
///
/// Only the lower triangle of `m` is read. A pivot at or below
/// `1e-12 × max diagonal` fails with [`Error::NotPositiveDefinite`].
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            m.ncols()
        )));
    }
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// A computed Cholesky factorization with the usual derived quantities.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        Ok(Self { l: cholesky(m)? })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `m·x = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero pivots");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("nonzero pivots")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero pivots");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("nonzero pivots")
    }

    /// `L⁻¹·b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(b).expect("nonzero pivots")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        symmetrize(&self.solve(&DMatrix::identity(n, n)))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(CholeskyFactor::new(m)?.inverse())
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn standard_normal_vector(dim: usize, rng: &mut RngStream) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.standard_normal())
}

/// One draw from `N(mean, cov)`.
pub fn sample_mvn(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let factor = cov.cholesky();
    Ok(sample_mvn_factored(mean, factor.l(), rng))
}

/// `mean + L·z` with `z` standard normal; `L` is any square root of the
/// covariance.
pub fn sample_mvn_factored(
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
    rng: &mut RngStream,
) -> DVector<f64> {
    let z = standard_normal_vector(l.ncols(), rng);
    mean + l * z
}

/// Bartlett lower-triangular factor `T` with `T·Tᵀ ~ Wishart(dof, I)`.
fn bartlett_factor(dof: f64, dim: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let mut t = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        let chi = ChiSquared::new(dof - i as f64).expect("dof > dim - 1");
        t[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            t[(i, j)] = rng.standard_normal();
        }
    }
    t
}

/// One draw from `Wishart(dof, scale)`, mean `dof·scale`.
pub fn sample_wishart(dof: f64, scale: &SpdMatrix, rng: &mut RngStream) -> Result<SpdMatrix> {
    let dim = scale.dim();
    if !(dof > dim as f64 - 1.0) {
        return Err(Error::DofTooSmall { dof, dim });
    }
    let l = scale.cholesky();
    let g = l.l() * bartlett_factor(dof, dim, rng);
    SpdMatrix::new(symmetrize(&(&g * g.transpose())))
}

/// One draw from `inverse-Wishart(dof, scale)`, mean `scale / (dof − dim − 1)`.
///
/// With `scale = U·Uᵀ` the draw is `(U·T⁻ᵀ)(U·T⁻ᵀ)ᵀ`, the inverse of the
/// Bartlett Wishart draw with scale `scale⁻¹`; only triangular solves are
/// needed.
pub fn sample_inverse_wishart(
    dof: f64,
    scale: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<SpdMatrix> {
    let dim = scale.dim();
    if !(dof > dim as f64 - 1.0) {
        return Err(Error::DofTooSmall { dof, dim });
    }
    let u = scale.cholesky();
    let t = bartlett_factor(dof, dim, rng);
    let t_inv_tr = t
        .tr_solve_lower_triangular(&DMatrix::identity(dim, dim))
        .expect("Bartlett diagonal is positive");
    let g = u.l() * t_inv_tr;
    SpdMatrix::new(symmetrize(&(&g * g.transpose())))
}

/// Draw from `inverse-Wishart(dof, (dof − dim − 1)·mean)`, whose
/// expectation is `mean`. Requires `dof > dim + 1`.
pub fn sample_inverse_wishart_with_mean(
    dof: f64,
    mean: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<SpdMatrix> {
    let dim = mean.dim();
    if !(dof > dim as f64 + 1.0) {
        return Err(Error::DofTooSmall { dof, dim });
    }
    let scale = SpdMatrix::new(mean.as_matrix() * (dof - dim as f64 - 1.0))?;
    sample_inverse_wishart(dof, &scale, rng)
}

/// Converts a covariance matrix into standard deviations and correlations.
pub fn correlation(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()
        }
    })
}

/// Sample quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn random_spd(dim: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
        &g * g.transpose() + DMatrix::identity(dim, dim) * 0.5
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(l, DMatrix::identity(3, 3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky(&dmatrix![4.0, 2.0; 2.0, 5.0]).unwrap();
        assert_eq!(l, dmatrix![2.0, 0.0; 1.0, 2.0]);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = RngStream::new(7, 0);
        for dim in 1..=8 {
            let m = random_spd(dim, &mut rng);
            let l = cholesky(&m).unwrap();
            assert!(relative_frobenius(&(&l * l.transpose()), &m) < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_and_singular() {
        assert!(matches!(
            cholesky(&dmatrix![1.0, 2.0; 2.0, 1.0]),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        assert!(matches!(
            cholesky(&dmatrix![1.0, 1.0; 1.0, 1.0]),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(cholesky(&dmatrix![0.0, 0.0; 0.0, 1.0]).is_err());
    }

    #[test]
    fn spd_matrix_rejects_asymmetry() {
        assert!(matches!(
            SpdMatrix::new(dmatrix![2.0, 1.0; 0.0, 2.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let mut c = RngStream::new(42, 4);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn mvn_sample_mean_identity_cov() {
        let mut rng = RngStream::new(1, 0);
        let n = 100_000;
        let cov = SpdMatrix::identity(3);
        let mean = DVector::zeros(3);
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            acc += sample_mvn(&mean, &cov, &mut rng).unwrap();
        }
        acc /= n as f64;
        for v in acc.iter() {
            assert!(v.abs() < 4.0 / (n as f64).sqrt(), "{v}");
        }
    }

    #[test]
    fn mvn_location_shift() {
        let cov = SpdMatrix::identity(3);
        let c = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let mut r1 = RngStream::new(9, 1);
        let mut r2 = RngStream::new(9, 1);
        for _ in 0..10 {
            let shifted = sample_mvn(&c, &cov, &mut r1).unwrap();
            let centred = sample_mvn(&DVector::zeros(3), &cov, &mut r2).unwrap();
            assert!(((shifted - &c) - centred).amax() < 1e-15);
        }
    }

    #[test]
    fn mvn_sample_covariance() {
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let cov = SpdMatrix::new(dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        let mean = DVector::zeros(2);
        let mut acc = DMatrix::zeros(2, 2);
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            let y = sample_mvn(&mean, &cov, &mut rng).unwrap();
            acc += &y * y.transpose();
            sum += y;
        }
        let m = &sum / n as f64;
        let s = (acc - &m * m.transpose() * n as f64) / (n as f64 - 1.0);
        assert!((s - cov.as_matrix()).amax() < 0.05);
    }

    #[test]
    fn inverse_wishart_mean_preserving() {
        let mut rng = RngStream::new(3, 0);
        let target = random_spd(3, &mut rng);
        let target_spd = SpdMatrix::new(target.clone()).unwrap();
        let nu = 10.0;
        let draws = 10_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..draws {
            let d = sample_inverse_wishart_with_mean(nu, &target_spd, &mut rng).unwrap();
            assert!(cholesky(d.as_matrix()).is_ok());
            acc += d.as_matrix();
        }
        acc /= draws as f64;
        assert!(relative_frobenius(&acc, &target) < 0.05);
    }

    #[test]
    fn inverse_wishart_scalar_reduction() {
        // dim 1: 3 / chi2_5, mean 3 / (5 - 2) = 1.
        let mut rng = RngStream::new(4, 0);
        let scale = SpdMatrix::new(dmatrix![3.0]).unwrap();
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| {
                sample_inverse_wishart(5.0, &scale, &mut rng)
                    .unwrap()
                    .as_matrix()[(0, 0)]
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn inverse_wishart_dof_checks() {
        let mut rng = RngStream::new(5, 0);
        let m = SpdMatrix::identity(4);
        assert!(matches!(
            sample_inverse_wishart_with_mean(5.0, &m, &mut rng),
            Err(Error::DofTooSmall { .. })
        ));
        assert!(matches!(
            sample_inverse_wishart(2.0, &m, &mut rng),
            Err(Error::DofTooSmall { .. })
        ));
        assert!(sample_inverse_wishart(4.5, &m, &mut rng).is_ok());
    }

    #[test]
    fn wishart_mean() {
        let mut rng = RngStream::new(6, 0);
        let scale = SpdMatrix::new(dmatrix![1.0, 0.3; 0.3, 2.0]).unwrap();
        let draws = 20_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            acc += sample_wishart(7.0, &scale, &mut rng).unwrap().as_matrix();
        }
        acc /= draws as f64;
        assert!(relative_frobenius(&acc, &(scale.as_matrix() * 7.0)) < 0.03);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cholesky_factor_helpers() {
        let m = dmatrix![4.0, 2.0; 2.0, 5.0];
        let f = CholeskyFactor::new(&m).unwrap();
        assert!((f.log_det() - 16.0_f64.ln()).abs() < 1e-12);
        let inv = f.inverse();
        assert!((&m * inv - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }
}
