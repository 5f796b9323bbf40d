use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{DesignMatrix, FactorScheme, GroupIndex, Margin};
use crate::error::{Error, Result};
use crate::estimation::{DesignGroups, PosteriorDraws};
use crate::stochastics::{cholesky, CholeskyFactor, RngStream, SpdMatrix};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExcludedMargin {
    pub levels: (usize, usize),
    pub n: usize,
    pub reason: String,
}

/// Value of the discrepancy for one factor pair, with its per-margin terms.
#[derive(Clone, Debug, PartialEq)]
pub struct TStat {
    pub value: f64,
    /// `(margin levels, tr(S₀⁻¹S) − log det(S₀⁻¹S))` for included margins.
    pub terms: Vec<((usize, usize), f64)>,
    pub excluded: Vec<ExcludedMargin>,
}

/// Sample covariance with divisor `n − 1`.
pub fn sample_covariance(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let p = x.ncols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for &i in rows {
        for j in 0..p {
            mean[j] += x[(i, j)];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut s = DMatrix::zeros(p, p);
    for &i in rows {
        for j in 0..p {
            let dj = x[(i, j)] - mean[j];
            for k in 0..=j {
                s[(j, k)] += dj * (x[(i, k)] - mean[k]);
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            s[(k, j)] = s[(j, k)];
        }
    }
    s / (n - 1.0)
}

/// Pooled residual covariance (divisor `n − 1`).
pub fn pooled_covariance(residuals: &DMatrix<f64>) -> Result<SpdMatrix> {
    let rows: Vec<usize> = (0..residuals.nrows()).collect();
    if rows.len() <= residuals.ncols() {
        return Err(Error::SingularPooled);
    }
    SpdMatrix::new(sample_covariance(residuals, &rows)).map_err(|_| Error::SingularPooled)
}

/// Sum over the margins of one factor pair of
/// `tr(S₀⁻¹S) − log det(S₀⁻¹S)`, where `S` is the margin's sample
/// covariance of the residuals and `S₀` is `pooled`.
///
/// Margins with fewer than `p + 1` rows are excluded and reported.
pub fn t_stat(residuals: &DMatrix<f64>, margins: &[Margin], pooled: &SpdMatrix) -> Result<TStat> {
    let p = residuals.ncols();
    let l = cholesky(pooled.as_matrix()).map_err(|_| Error::SingularPooled)?;
    let whitened = l
        .solve_lower_triangular(&residuals.transpose())
        .ok_or(Error::SingularPooled)?
        .transpose();
    let mut terms = Vec::new();
    let mut excluded = Vec::new();
    for m in margins {
        if m.rows.len() < p + 1 {
            excluded.push(ExcludedMargin {
                levels: m.levels,
                n: m.rows.len(),
                reason: format!("fewer than {} observations", p + 1),
            });
            continue;
        }
        let s = sample_covariance(&whitened, &m.rows);
        match CholeskyFactor::new(&s) {
            Ok(c) => terms.push((m.levels, s.trace() - c.log_det())),
            Err(_) => excluded.push(ExcludedMargin {
                levels: m.levels,
                n: m.rows.len(),
                reason: "singular margin covariance".into(),
            }),
        }
    }
    if terms.is_empty() {
        return Err(Error::AllMarginsExcluded(format!(
            "{} margins",
            margins.len()
        )));
    }
    Ok(TStat {
        value: terms.iter().map(|t| t.1).sum(),
        terms,
        excluded,
    })
}

/// Fraction of replicates at or above the observed value.
pub fn tail_probability(observed: f64, replicates: &[f64]) -> f64 {
    if replicates.is_empty() {
        return f64::NAN;
    }
    replicates.iter().filter(|&&t| t >= observed).count() as f64 / replicates.len() as f64
}

/// Fraction of replicates at or below the observed value.
pub fn lower_tail_probability(observed: f64, replicates: &[f64]) -> f64 {
    if replicates.is_empty() {
        return f64::NAN;
    }
    replicates.iter().filter(|&&t| t <= observed).count() as f64 / replicates.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDiscrepancy {
    pub pair: (usize, usize),
    pub label: String,
    pub observed: f64,
    pub replicates: Vec<f64>,
    /// Fraction of replicates `≥` observed.
    pub tail_probability: f64,
    /// Fraction of replicates `≤` observed (diagnostic only).
    pub lower_tail_probability: f64,
    pub excluded: Vec<ExcludedMargin>,
}

impl PairDiscrepancy {
    pub fn fails(&self, threshold: f64) -> bool {
        self.tail_probability < threshold
    }

    /// Standardized distance of the observed value above the replicates.
    pub fn z_score(&self) -> f64 {
        let n = self.replicates.len() as f64;
        let mean = self.replicates.iter().sum::<f64>() / n;
        let var = self
            .replicates
            .iter()
            .map(|t| (t - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        (self.observed - mean) / var.sqrt().max(f64::MIN_POSITIVE)
    }
}

/// Observed versus replicated discrepancies for every factor pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub n_reps: usize,
    pub pairs: Vec<PairDiscrepancy>,
}

impl DiscrepancyReport {
    pub fn failing(&self, threshold: f64) -> Vec<&PairDiscrepancy> {
        self.pairs.iter().filter(|p| p.fails(threshold)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// One CSV per pair named `ppc_<A>_<B>.csv` with columns
    /// `replicate,t,observed`.
    pub fn write_pair_csvs(&self, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::new();
        for pd in &self.pairs {
            let path = dir.join(format!("{prefix}{}.csv", pd.label.replace('*', "_")));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["replicate", "t", "observed"])?;
            for (k, t) in pd.replicates.iter().enumerate() {
                w.write_record([k.to_string(), t.to_string(), pd.observed.to_string()])?;
            }
            w.flush()?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Summary CSV: `pair,observed,tail_probability,lower_tail_probability,n_excluded`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "pair",
            "observed",
            "tail_probability",
            "lower_tail_probability",
            "n_excluded",
        ])?;
        for pd in &self.pairs {
            w.write_record([
                pd.label.clone(),
                pd.observed.to_string(),
                pd.tail_probability.to_string(),
                pd.lower_tail_probability.to_string(),
                pd.excluded.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Data a posterior predictive check runs against.
#[derive(Clone, Copy, Debug)]
pub struct PpcData<'a> {
    pub scheme: &'a FactorScheme,
    pub index: &'a GroupIndex,
    pub y: &'a DMatrix<f64>,
    pub design1: &'a DesignMatrix,
    pub design2: &'a DesignMatrix,
}

fn pair_stats(
    scheme: &FactorScheme,
    index: &GroupIndex,
    residuals: &DMatrix<f64>,
) -> Result<Vec<TStat>> {
    let pooled = pooled_covariance(residuals)?;
    scheme
        .factor_pairs()
        .into_iter()
        .map(|pair| t_stat(residuals, &index.margins[&pair], &pooled))
        .collect()
}

/// Posterior predictive check of the discrepancy for every factor pair.
///
/// The observed statistic uses residuals from the posterior-mean mean
/// coefficients. Replicate `k` uses the draw at position
/// `⌊k·S/n_reps⌋` and simulates mean-zero rows with the real design's
/// covariance rows, on substream `k` of `rng`'s seed.
pub fn ppc(
    draws: &PosteriorDraws,
    data: PpcData<'_>,
    n_reps: usize,
    rng: &RngStream,
) -> Result<DiscrepancyReport> {
    if n_reps == 0 || n_reps > draws.len() {
        return Err(Error::InsufficientDraws {
            needed: n_reps.max(1),
            have: draws.len(),
        });
    }
    let b1 = draws.mean_b1();
    let residuals = data.y - data.design1.matrix.clone() * b1.b1.transpose();
    let observed = pair_stats(data.scheme, data.index, &residuals)?;
    let groups = DesignGroups::new(data.design2, data.design2)?;
    let (n, p) = data.y.shape();
    let s = draws.len();

    let reps: Vec<Vec<f64>> = (0..n_reps)
        .into_par_iter()
        .map(|k| {
            let draw = &draws.draws[k * s / n_reps];
            let mut r = rng.substream((rng.stream_id() << 32) | (k as u64 + 1));
            let mut y = DMatrix::zeros(n, p);
            for (g, rows) in groups.rows.iter().enumerate() {
                let sigma = draw.params.sigma_matrix(groups.x2[g].as_slice())?;
                let l = cholesky(&sigma)?;
                for &i in rows {
                    let z = crate::stochastics::standard_normal_vector(p, &mut r);
                    let yi = &l * z;
                    y.row_mut(i).copy_from(&yi.transpose());
                }
            }
            let stats = pair_stats(data.scheme, data.index, &y)?;
            Ok(stats.into_iter().map(|t| t.value).collect())
        })
        .collect::<Result<_>>()?;

    let pairs = data
        .scheme
        .factor_pairs()
        .into_iter()
        .zip(observed)
        .enumerate()
        .map(|(j, (pair, obs))| {
            let replicates: Vec<f64> = reps.iter().map(|r| r[j]).collect();
            PairDiscrepancy {
                pair,
                label: data.scheme.pair_label(pair),
                observed: obs.value,
                tail_probability: tail_probability(obs.value, &replicates),
                lower_tail_probability: lower_tail_probability(obs.value, &replicates),
                replicates,
                excluded: obs.excluded,
            }
        })
        .collect();
    Ok(DiscrepancyReport { n_reps, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::standard_normal_vector;
    use proptest::prelude::*;

    fn margin(levels: (usize, usize), rows: Vec<usize>) -> Margin {
        Margin { levels, rows }
    }

    /// Independent double-loop recomputation.
    fn brute_force(resid: &DMatrix<f64>, margins: &[Margin], s0: &DMatrix<f64>) -> f64 {
        let p = resid.ncols();
        let s0_inv = s0.clone().try_inverse().unwrap();
        let mut total = 0.0;
        for m in margins {
            let n = m.rows.len();
            if n < p + 1 {
                continue;
            }
            let mut mean = vec![0.0; p];
            for &i in &m.rows {
                for j in 0..p {
                    mean[j] += resid[(i, j)] / n as f64;
                }
            }
            let mut s = DMatrix::zeros(p, p);
            for a in 0..p {
                for b in 0..p {
                    let mut acc = 0.0;
                    for &i in &m.rows {
                        acc += (resid[(i, a)] - mean[a]) * (resid[(i, b)] - mean[b]);
                    }
                    s[(a, b)] = acc / (n as f64 - 1.0);
                }
            }
            let w = &s0_inv * &s;
            total += w.trace() - w.determinant().ln();
        }
        total
    }

    fn random_residuals(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, 0);
        let mix = DMatrix::from_fn(
            p,
            p,
            |i, j| if i == j { 1.0 } else { 0.0 } + 0.3 * rng.standard_normal(),
        );
        let mut y = DMatrix::zeros(n, p);
        for i in 0..n {
            let z = standard_normal_vector(p, &mut rng);
            y.row_mut(i).copy_from(&(&mix * z).transpose());
        }
        y
    }

    fn split_margins(n: usize, k: usize) -> Vec<Margin> {
        (0..k)
            .map(|m| margin((m, 0), (0..n).filter(|i| i % k == m).collect()))
            .collect()
    }

    #[test]
    fn identity_case_gives_m_times_p() {
        // Four margins that are exact copies of one block: each S equals S₀.
        let block = random_residuals(12, 3, 1);
        let mut y = DMatrix::zeros(48, 3);
        for m in 0..4 {
            y.view_mut((12 * m, 0), (12, 3)).copy_from(&block);
        }
        let margins: Vec<Margin> = (0..4)
            .map(|m| margin((m, 0), (12 * m..12 * (m + 1)).collect()))
            .collect();
        let s0 = SpdMatrix::new(sample_covariance(&block, &(0..12).collect::<Vec<_>>())).unwrap();
        let t = t_stat(&y, &margins, &s0).unwrap();
        assert!((t.value - 12.0).abs() < 1e-9, "{}", t.value);
    }

    #[test]
    fn arithmetic_example() {
        // S = diag(2, 1): rows (±√2·a, ±b) with unit sample variance pattern.
        let y = nalgebra::dmatrix![
            1.0, 1.0;
            -1.0, 1.0;
            1.0, -1.0;
            -1.0, -1.0
        ];
        let rows: Vec<usize> = (0..4).collect();
        let s = sample_covariance(&y, &rows);
        let scaled = DMatrix::from_fn(4, 2, |i, j| {
            y[(i, j)]
                * if j == 0 {
                    (2.0 / s[(0, 0)]).sqrt()
                } else {
                    (1.0 / s[(1, 1)]).sqrt()
                }
        });
        let t = t_stat(&scaled, &[margin((0, 0), rows)], &SpdMatrix::identity(2)).unwrap();
        assert!((t.value - (3.0 - 2f64.ln())).abs() < 1e-12);
        assert!((t.value - 2.30685).abs() < 1e-5);
    }

    #[test]
    fn small_margins_are_excluded() {
        let y = random_residuals(40, 3, 2);
        let margins = vec![
            margin((0, 0), (0..3).collect()),
            margin((0, 1), (3..40).collect()),
        ];
        let s0 = pooled_covariance(&y).unwrap();
        let t = t_stat(&y, &margins, &s0).unwrap();
        assert_eq!(t.excluded.len(), 1);
        assert_eq!(t.excluded[0].n, 3);
        assert_eq!(t.terms.len(), 1);
        let err = t_stat(&y, &margins[..1], &s0).unwrap_err();
        assert!(matches!(err, Error::AllMarginsExcluded(_)));
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..100 {
            let p = 2 + (seed as usize % 4);
            let n = 60 + 7 * seed as usize;
            let y = random_residuals(n, p, seed);
            let margins = split_margins(n, 2 + seed as usize % 5);
            let s0 = pooled_covariance(&y).unwrap();
            let t = t_stat(&y, &margins, &s0).unwrap();
            let oracle = brute_force(&y, &margins, s0.as_matrix());
            assert!(
                (t.value - oracle).abs() < 1e-8,
                "seed {seed}: {} vs {oracle}",
                t.value
            );
        }
    }

    #[test]
    fn degenerate_replicates_give_tail_one() {
        assert_eq!(tail_probability(2.5, &[2.5; 10]), 1.0);
        assert_eq!(tail_probability(3.0, &[1.0, 2.0, 3.0, 4.0]), 0.5);
        assert_eq!(lower_tail_probability(3.0, &[1.0, 2.0, 3.0, 4.0]), 0.75);
    }

    mod predictive {
        use super::*;
        use crate::design::{group_index_from_codes, Factor, Formula};
        use crate::estimation::{fit_gibbs, ChainConfig, Priors};
        use crate::model::{simulate, CovRegParams, MeanParams};

        fn setup() -> (FactorScheme, Vec<Vec<usize>>) {
            let s = FactorScheme::new(vec![
                Factor::new("G", &["m", "f"], "m").unwrap(),
                Factor::new("A", &["a1", "a2", "a3"], "a1").unwrap(),
                Factor::new("R", &["r1", "r2", "r3"], "r1").unwrap(),
            ])
            .unwrap();
            let codes = s
                .all_cells()
                .into_iter()
                .flat_map(|c| std::iter::repeat_n(c, 30))
                .collect();
            (s, codes)
        }

        fn run(
            y: &DMatrix<f64>,
            s: &FactorScheme,
            codes: &[Vec<usize>],
            cov: &str,
            seed: u64,
        ) -> DiscrepancyReport {
            let d1 = Formula::parse("G + A + R")
                .unwrap()
                .resolve(s)
                .unwrap()
                .design(s, codes);
            let d2 = Formula::parse(cov)
                .unwrap()
                .resolve(s)
                .unwrap()
                .design(s, codes);
            let chain = ChainConfig {
                burn_in: 300,
                samples: 600,
                thin: 3,
            };
            let draws = fit_gibbs(
                y,
                &d1,
                &d2,
                1,
                &Priors::default(),
                &chain,
                &mut RngStream::new(seed, 0),
            )
            .unwrap();
            let index = group_index_from_codes(s, codes);
            let data = PpcData {
                scheme: s,
                index: &index,
                y,
                design1: &d1,
                design2: &d2,
            };
            ppc(&draws, data, 200, &RngStream::new(seed, 1)).unwrap()
        }

        #[test]
        fn heterogeneous_pair_flagged_under_homogeneous_fit() {
            let (s, codes) = setup();
            let mut rng = RngStream::new(11, 0);
            let n = codes.len();
            let mut y = DMatrix::zeros(n, 3);
            for (i, c) in codes.iter().enumerate() {
                let sd = if c[0] == 1 { 3.0 } else { 1.0 };
                y[(i, 0)] = sd * rng.standard_normal() + c[1] as f64;
                y[(i, 1)] = rng.standard_normal();
                y[(i, 2)] = rng.standard_normal() - c[2] as f64;
            }
            let report = run(&y, &s, &codes, "1", 3);
            assert_eq!(report.pairs.len(), 3);
            for pd in &report.pairs {
                assert_eq!(pd.replicates.len(), 200);
                assert!((0.0..=1.0).contains(&pd.tail_probability));
            }
            let ga = &report.pairs[0];
            assert_eq!(ga.label, "G*A");
            assert!(ga.tail_probability < 0.025, "{}", ga.tail_probability);
        }

        #[test]
        fn well_specified_fit_passes() {
            let (s, codes) = setup();
            let d = Formula::parse("G + A + R")
                .unwrap()
                .resolve(&s)
                .unwrap()
                .design(&s, &codes);
            let mean =
                MeanParams::new(DMatrix::from_fn(3, d.n_cols(), |j, k| 0.3 * (j + k) as f64));
            let b = DMatrix::from_fn(3, d.n_cols(), |j, k| {
                if k == 0 {
                    0.8
                } else {
                    0.3 * (j as f64 - k as f64 / 3.0)
                }
            });
            let params = CovRegParams::new(DMatrix::identity(3, 3) * 0.5, vec![b]).unwrap();
            let (y, _) = simulate(&mean, &params, &d, &d, &mut RngStream::new(5, 0)).unwrap();
            let report = run(&y, &s, &codes, "G + A + R", 4);
            for pd in &report.pairs {
                assert!(
                    (0.025..=0.975).contains(&pd.tail_probability),
                    "{}: {}",
                    pd.label,
                    pd.tail_probability
                );
            }
        }

        #[test]
        fn too_many_replicates_rejected() {
            let (s, codes) = setup();
            let y = DMatrix::from_fn(codes.len(), 3, |i, j| ((i * 7 + j * 3) % 11) as f64);
            let d = Formula::parse("G")
                .unwrap()
                .resolve(&s)
                .unwrap()
                .design(&s, &codes);
            let chain = ChainConfig {
                burn_in: 5,
                samples: 10,
                thin: 1,
            };
            let draws = fit_gibbs(
                &y,
                &d,
                &d,
                1,
                &Priors::default(),
                &chain,
                &mut RngStream::new(1, 0),
            )
            .unwrap();
            let index = group_index_from_codes(&s, &codes);
            let data = PpcData {
                scheme: &s,
                index: &index,
                y: &y,
                design1: &d,
                design2: &d,
            };
            let err = ppc(&draws, data, 11, &RngStream::new(1, 1)).unwrap_err();
            assert_eq!(err.exit_code(), 2);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn per_margin_terms_at_least_p(seed in 0u64..10_000, p in 2usize..5, k in 1usize..5) {
            let n = 20 * k + 3 * p;
            let y = random_residuals(n, p, seed);
            let s0 = pooled_covariance(&y).unwrap();
            let t = t_stat(&y, &split_margins(n, k), &s0).unwrap();
            for (_, term) in &t.terms {
                prop_assert!(*term >= p as f64 - 1e-9);
            }
        }

        #[test]
        fn invariant_under_common_linear_map(seed in 0u64..10_000, p in 2usize..5) {
            let n = 80;
            let y = random_residuals(n, p, seed);
            let margins = split_margins(n, 3);
            let s0 = pooled_covariance(&y).unwrap();
            let mut rng = RngStream::new(seed, 9);
            let g = DMatrix::from_fn(p, p, |i, j| if i == j { 2.0 } else { 0.0 } + rng.standard_normal());
            prop_assume!(g.determinant().abs() > 0.1);
            let yt = &y * g.transpose();
            let s0t = SpdMatrix::new(crate::stochastics::symmetrize(&(&g * s0.as_matrix() * g.transpose()))).unwrap();
            let a = t_stat(&y, &margins, &s0).unwrap().value;
            let b = t_stat(&yt, &margins, &s0t).unwrap().value;
            prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
        }
    }
}
