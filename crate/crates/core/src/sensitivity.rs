//! Robustness study: perturb a fitted model's group covariances with
//! inverse-Wishart noise, simulate data with the original group sizes,
//! and compare the covariance regression refit with per-group estimates
//! that shrink toward the pooled covariance.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{FactorScheme, Formula, SchemaConfig};
use crate::error::{Error, Result};
use crate::estimation::{fit_em, EmInit, EmOptions};
use crate::model::{CovRegParams, MeanParams, ModelFile};
use crate::selection::pooled_covariance;
use crate::stochastics::{
    cholesky, correlation, sample_inverse_wishart, sample_inverse_wishart_with_mean,
    standard_normal_vector, symmetrize, RngStream, SpdMatrix,
};

const BUNDLED_SOURCE: &str = include_str!("../data/synthetic_source.json");

/// A fitted model plus the group sizes of the dataset it came from.
#[derive(Clone, Debug)]
pub struct SensitivitySource {
    pub scheme: FactorScheme,
    pub response_names: Vec<String>,
    pub mean_formula: Formula,
    pub cov_formula: Formula,
    pub mean: MeanParams,
    pub params: CovRegParams,
    /// Group size of every potential cell, in [`FactorScheme::all_cells`] order.
    pub cell_sizes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceFile {
    pub schema: SchemaConfig,
    pub model: ModelFile,
    pub cell_sizes: Vec<usize>,
}

impl SensitivitySource {
    pub fn new(
        scheme: FactorScheme,
        response_names: Vec<String>,
        mean_formula: Formula,
        cov_formula: Formula,
        mean: MeanParams,
        params: CovRegParams,
        cell_sizes: Vec<usize>,
    ) -> Result<Self> {
        if cell_sizes.len() != scheme.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} cell sizes for {} cells",
                cell_sizes.len(),
                scheme.n_cells()
            )));
        }
        if mean_formula.n_columns(&scheme)? != mean.q1()
            || cov_formula.n_columns(&scheme)? != params.q2()
        {
            return Err(Error::ShapeMismatch(
                "formulas do not match the parameter shapes".into(),
            ));
        }
        if response_names.len() != params.p() {
            return Err(Error::ShapeMismatch("response names do not match p".into()));
        }
        Ok(Self {
            scheme,
            response_names,
            mean_formula,
            cov_formula,
            mean,
            params,
            cell_sizes,
        })
    }

    pub fn from_file(file: &SourceFile) -> Result<Self> {
        let scheme = file.schema.scheme()?;
        let (mean, params) = file.model.to_params()?;
        let formula = |f: &Option<String>| {
            f.as_deref()
                .map(Formula::parse)
                .transpose()?
                .ok_or_else(|| Error::InvalidConfig("source model lacks a formula".into()))
        };
        let mean_formula = formula(&file.model.mean_formula)?;
        let cov_formula = formula(&file.model.cov_formula)?;
        let labels_match = |f: &Formula, labels: &[String]| -> Result<bool> {
            Ok(labels.is_empty() || f.resolve(&scheme)?.labels(&scheme) == labels)
        };
        if !labels_match(&mean_formula, &file.model.mean_labels)?
            || !labels_match(&cov_formula, &file.model.cov_labels)?
        {
            return Err(Error::SchemaMismatch(
                "model labels do not match the formulas".into(),
            ));
        }
        Self::new(
            scheme,
            file.schema
                .responses
                .iter()
                .map(|r| r.name.clone())
                .collect(),
            mean_formula,
            cov_formula,
            mean,
            params,
            file.cell_sizes.clone(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let file: SourceFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }

    /// Synthetic source shipped with the crate: four factors with 2, 4, 5
    /// and 5 levels, 2613 observations and a rank-2 model.
    pub fn bundled() -> Self {
        let file: SourceFile = serde_json::from_str(BUNDLED_SOURCE).expect("bundled source parses");
        Self::from_file(&file).expect("bundled source is valid")
    }

    pub fn p(&self) -> usize {
        self.params.p()
    }

    /// `Σ̂_x` for every potential cell.
    pub fn cell_covariances(&self) -> Result<Vec<SpdMatrix>> {
        let f2 = self.cov_formula.resolve(&self.scheme)?;
        self.scheme
            .all_cells()
            .iter()
            .map(|c| crate::model::sigma_at(&self.params, &f2.row(&self.scheme, c)))
            .collect()
    }

    fn codes(&self) -> Vec<Vec<usize>> {
        self.scheme
            .all_cells()
            .into_iter()
            .zip(&self.cell_sizes)
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }
}

/// How the per-group comparison estimate is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparateMode {
    /// Posterior mean `(S₀ + SS_x)/(n_x + 1)`.
    #[default]
    PosteriorMean,
    /// One draw from `inverse-Wishart(n_x + p + 2, S₀ + SS_x)`.
    Draw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub nu: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub separate: SeparateMode,
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            nu: vec![10.0, 20.0, 50.0],
            replicates: 5,
            seed: 1,
            separate: SeparateMode::PosteriorMean,
            em_tol: EmOptions::default().tol_rel,
            em_max_iters: EmOptions::default().max_iters,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.nu.is_empty() || self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "at least one ν and one replicate are required".into(),
            ));
        }
        for &nu in &self.nu {
            if !(nu > p as f64 + 1.0) {
                return Err(Error::DofTooSmall { dof: nu, dim: p });
            }
        }
        Ok(())
    }
}

/// Independent `Σ̃_x ~ inverse-Wishart(ν, (ν − p − 1)·Σ̂_x)` per cell, so
/// that `E[Σ̃_x] = Σ̂_x`.
pub fn generate_truth(
    sources: &[SpdMatrix],
    nu: f64,
    rng: &mut RngStream,
) -> Result<Vec<SpdMatrix>> {
    sources
        .iter()
        .map(|s| sample_inverse_wishart_with_mean(nu, s, rng))
        .collect()
}

/// `n_x` mean-zero normal rows per cell, cells in order. Returns the
/// stacked rows and the cell index of each row.
pub fn generate_data(
    truths: &[SpdMatrix],
    sizes: &[usize],
    rng: &mut RngStream,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if truths.len() != sizes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} truths for {} sizes",
            truths.len(),
            sizes.len()
        )));
    }
    let p = truths.first().map_or(0, SpdMatrix::dim);
    let n: usize = sizes.iter().sum();
    let mut y = DMatrix::zeros(n, p);
    let mut cell_of_row = Vec::with_capacity(n);
    let mut row = 0;
    for (c, (truth, &size)) in truths.iter().zip(sizes).enumerate() {
        let l = truth.cholesky();
        for _ in 0..size {
            let z = l.l() * standard_normal_vector(p, rng);
            y.row_mut(row).copy_from(&z.transpose());
            cell_of_row.push(c);
            row += 1;
        }
    }
    Ok((y, cell_of_row))
}

/// Uncentred sum of squares `Σ yᵢyᵢᵀ` of the given rows.
fn sum_of_squares(y: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let p = y.ncols();
    let mut ss = DMatrix::zeros(p, p);
    for &i in rows {
        let r = y.row(i);
        ss += r.transpose() * r;
    }
    ss
}

/// Per-cell estimates shrunk toward `pooled`: the posterior of
/// `inverse-Wishart(n_x + p + 2, S₀ + SS_x)` with `SS_x` the cell's sum of
/// squares about zero. Empty cells return `S₀`.
pub fn separate_estimate(
    y: &DMatrix<f64>,
    rows_by_cell: &[Vec<usize>],
    pooled: &SpdMatrix,
    mode: SeparateMode,
    rng: &mut RngStream,
) -> Result<Vec<SpdMatrix>> {
    let p = pooled.dim();
    rows_by_cell
        .iter()
        .map(|rows| {
            let scale = symmetrize(&(pooled.as_matrix() + sum_of_squares(y, rows)));
            let n = rows.len() as f64;
            match mode {
                SeparateMode::PosteriorMean => SpdMatrix::new(scale / (n + 1.0)),
                SeparateMode::Draw => {
                    sample_inverse_wishart(n + p as f64 + 2.0, &SpdMatrix::new(scale)?, rng)
                }
            }
        })
        .collect()
}

fn upper(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    (0..p)
        .flat_map(|i| (i..p).map(move |j| m[(i, j)]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub label: String,
    pub n: usize,
    pub data_free: bool,
    /// Upper triangles, row-major, diagonal included.
    pub source: Vec<f64>,
    pub truth: Vec<f64>,
    pub covreg: Vec<f64>,
    pub separate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub em_converged: bool,
    pub em_iterations: usize,
    pub cells: Vec<CellResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorRow {
    pub estimator: String,
    /// `covariance` (all entries), `variance` or `correlation`.
    pub entry: String,
    /// `all`, `below_median` or `at_or_above_median` group size.
    pub bucket: String,
    pub mean_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuResult {
    pub nu: f64,
    pub replicates: Vec<ReplicateResult>,
    /// Averages over replicates and over cells with data.
    pub summary: Vec<ErrorRow>,
}

impl NuResult {
    pub fn error(&self, estimator: &str, entry: &str, bucket: &str) -> f64 {
        self.summary
            .iter()
            .find(|r| r.estimator == estimator && r.entry == entry && r.bucket == bucket)
            .map_or(f64::NAN, |r| r.mean_abs_error)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub p: usize,
    pub response_names: Vec<String>,
    pub mean_formula: String,
    pub cov_formula: String,
    pub rank: usize,
    pub config: SensitivityConfig,
    pub median_cell_size: f64,
    pub runs: Vec<NuResult>,
}

fn entry_errors(cell: &CellResult, estimate: &[f64], p: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let to_mat = |v: &[f64]| {
        let mut m = DMatrix::zeros(p, p);
        let mut k = 0;
        for i in 0..p {
            for j in i..p {
                m[(i, j)] = v[k];
                m[(j, i)] = v[k];
                k += 1;
            }
        }
        m
    };
    let est = to_mat(estimate);
    let truth = to_mat(&cell.truth);
    let (ce, ct) = (correlation(&est), correlation(&truth));
    let mut cov = Vec::new();
    let mut var = Vec::new();
    let mut cor = Vec::new();
    for i in 0..p {
        for j in i..p {
            cov.push(est[(i, j)] - truth[(i, j)]);
            if i == j {
                var.push(est[(i, i)] - truth[(i, i)]);
            } else {
                cor.push(ce[(i, j)] - ct[(i, j)]);
            }
        }
    }
    (cov, var, cor)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    crate::stochastics::quantile_sorted(v, 0.5)
}

fn summarize_errors(replicates: &[ReplicateResult], p: usize, median_size: f64) -> Vec<ErrorRow> {
    let mut rows = Vec::new();
    for estimator in ["covreg", "separate"] {
        for (e, entry) in ["covariance", "variance", "correlation"].iter().enumerate() {
            for bucket in ["all", "below_median", "at_or_above_median"] {
                let mut total = 0.0;
                let mut count = 0usize;
                for rep in replicates {
                    for cell in rep.cells.iter().filter(|c| !c.data_free) {
                        let keep = match bucket {
                            "below_median" => (cell.n as f64) < median_size,
                            "at_or_above_median" => (cell.n as f64) >= median_size,
                            _ => true,
                        };
                        if !keep {
                            continue;
                        }
                        let est = if estimator == "covreg" {
                            &cell.covreg
                        } else {
                            &cell.separate
                        };
                        let errs = entry_errors(cell, est, p);
                        let v = [errs.0, errs.1, errs.2][e].clone();
                        total += v.iter().map(|x| x.abs()).sum::<f64>();
                        count += v.len();
                    }
                }
                rows.push(ErrorRow {
                    estimator: estimator.into(),
                    entry: entry.to_string(),
                    bucket: bucket.into(),
                    mean_abs_error: if count == 0 {
                        f64::NAN
                    } else {
                        total / count as f64
                    },
                });
            }
        }
    }
    rows
}

fn run_replicate(
    source: &SensitivitySource,
    sources: &[SpdMatrix],
    config: &SensitivityConfig,
    nu_index: usize,
    replicate: usize,
) -> Result<ReplicateResult> {
    let nu = config.nu[nu_index];
    let stream = ((nu_index as u64) << 32 | replicate as u64) * 4;
    let mut truth_rng = RngStream::new(config.seed, stream);
    let mut data_rng = RngStream::new(config.seed, stream + 1);
    let mut separate_rng = RngStream::new(config.seed, stream + 2);

    let truths = generate_truth(sources, nu, &mut truth_rng)?;
    let (y, cell_of_row) = generate_data(&truths, &source.cell_sizes, &mut data_rng)?;
    let codes = source.codes();
    let scheme = &source.scheme;
    let f1 = source.mean_formula.resolve(scheme)?;
    let f2 = source.cov_formula.resolve(scheme)?;
    let d1 = f1.design(scheme, &codes);
    let d2 = f2.design(scheme, &codes);
    let options = EmOptions {
        tol_rel: config.em_tol,
        max_iters: config.em_max_iters,
        ..Default::default()
    };
    let fit = fit_em(
        &y,
        &d1,
        &d2,
        source.params.rank(),
        EmInit::Default { seed: stream + 3 },
        options,
    )?;

    let mut rows_by_cell = vec![Vec::new(); source.cell_sizes.len()];
    for (i, &c) in cell_of_row.iter().enumerate() {
        rows_by_cell[c].push(i);
    }
    let pooled = pooled_covariance(&y)?;
    let separate = separate_estimate(
        &y,
        &rows_by_cell,
        &pooled,
        config.separate,
        &mut separate_rng,
    )?;

    let cells = scheme
        .all_cells()
        .iter()
        .enumerate()
        .map(|(c, levels)| {
            let covreg = fit.params.sigma_matrix(&f2.row(scheme, levels))?;
            Ok(CellResult {
                label: scheme.cell_label(levels),
                n: source.cell_sizes[c],
                data_free: source.cell_sizes[c] == 0,
                source: upper(sources[c].as_matrix()),
                truth: upper(truths[c].as_matrix()),
                covreg: upper(&covreg),
                separate: upper(separate[c].as_matrix()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReplicateResult {
        replicate,
        em_converged: fit.converged,
        em_iterations: fit.iterations,
        cells,
    })
}

/// Runs every `(ν, replicate)` combination. Replicate `k` of the `i`-th
/// ν uses streams `4·(i·2³² + k) + {0, 1, 2}` of `config.seed` for the
/// truth, the data and the separate draws.
pub fn run_study(
    source: &SensitivitySource,
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    let p = source.p();
    config.validate(p)?;
    let sources = source.cell_covariances()?;
    for s in &sources {
        cholesky(s.as_matrix())?;
    }
    let jobs: Vec<(usize, usize)> = (0..config.nu.len())
        .flat_map(|i| (0..config.replicates).map(move |k| (i, k)))
        .collect();
    let results: Vec<ReplicateResult> = jobs
        .par_iter()
        .map(|&(i, k)| run_replicate(source, &sources, config, i, k))
        .collect::<Result<_>>()?;
    let mut sizes: Vec<f64> = source
        .cell_sizes
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| n as f64)
        .collect();
    let median_size = median(&mut sizes);
    let mut results = results.into_iter();
    let runs = config
        .nu
        .iter()
        .map(|&nu| {
            let replicates: Vec<ReplicateResult> =
                results.by_ref().take(config.replicates).collect();
            NuResult {
                nu,
                summary: summarize_errors(&replicates, p, median_size),
                replicates,
            }
        })
        .collect();
    Ok(SensitivityReport {
        p,
        response_names: source.response_names.clone(),
        mean_formula: source.mean_formula.to_string(),
        cov_formula: source.cov_formula.to_string(),
        rank: source.params.rank(),
        config: config.clone(),
        median_cell_size: median_size,
        runs,
    })
}

fn nu_tag(nu: f64) -> String {
    let s = nu.to_string();
    s.replace('.', "p")
}

impl SensitivityReport {
    /// Writes `sensitivity_report.json` and, per ν,
    /// `sensitivity_nu<ν>_scatter.csv` (truth against source) and
    /// `sensitivity_nu<ν>_errors.csv` (errors against group size).
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        let json = dir.join("sensitivity_report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        paths.push(json);
        let p = self.p;
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
        let names = &self.response_names;
        for run in &self.runs {
            let tag = nu_tag(run.nu);
            let scatter = dir.join(format!("sensitivity_nu{tag}_scatter.csv"));
            let mut w = csv::Writer::from_path(&scatter)?;
            w.write_record([
                "replicate",
                "cell",
                "n",
                "kind",
                "response1",
                "response2",
                "source",
                "truth",
            ])?;
            for rep in &run.replicates {
                for cell in &rep.cells {
                    let sd = source_truth_entries(cell, p);
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let kind = if i == j { "variance" } else { "correlation" };
                        w.write_record([
                            rep.replicate.to_string(),
                            cell.label.clone(),
                            cell.n.to_string(),
                            kind.into(),
                            names[i].clone(),
                            names[j].clone(),
                            sd.0[k].to_string(),
                            sd.1[k].to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            paths.push(scatter);

            let errors = dir.join(format!("sensitivity_nu{tag}_errors.csv"));
            let mut w = csv::Writer::from_path(&errors)?;
            w.write_record([
                "replicate",
                "cell",
                "n",
                "data_free",
                "kind",
                "response1",
                "response2",
                "covreg_error",
                "separate_error",
            ])?;
            for rep in &run.replicates {
                for cell in &rep.cells {
                    let (_, hv, hc) = entry_errors(cell, &cell.covreg, p);
                    let (_, sv, sc) = entry_errors(cell, &cell.separate, p);
                    let (mut vi, mut ci) = (0, 0);
                    for &(i, j) in &pairs {
                        let (kind, h, s) = if i == j {
                            vi += 1;
                            ("variance", hv[vi - 1], sv[vi - 1])
                        } else {
                            ci += 1;
                            ("correlation", hc[ci - 1], sc[ci - 1])
                        };
                        w.write_record([
                            rep.replicate.to_string(),
                            cell.label.clone(),
                            cell.n.to_string(),
                            cell.data_free.to_string(),
                            kind.into(),
                            names[i].clone(),
                            names[j].clone(),
                            h.to_string(),
                            s.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            paths.push(errors);
        }
        Ok(paths)
    }
}

/// Variances and correlations of the source and truth, upper-triangle order.
fn source_truth_entries(cell: &CellResult, p: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = |v: &[f64]| {
        let mut m = DMatrix::zeros(p, p);
        let mut k = 0;
        for i in 0..p {
            for j in i..p {
                m[(i, j)] = v[k];
                m[(j, i)] = v[k];
                k += 1;
            }
        }
        let c = correlation(&m);
        let mut out = Vec::new();
        for i in 0..p {
            for j in i..p {
                out.push(if i == j { m[(i, i)] } else { c[(i, j)] });
            }
        }
        out
    };
    (scale(&cell.source), scale(&cell.truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::relative_frobenius;
    use nalgebra::dmatrix;

    #[test]
    fn bundled_source_is_consistent() {
        let s = SensitivitySource::bundled();
        assert_eq!(s.p(), 4);
        assert_eq!(s.params.rank(), 2);
        assert_eq!(s.cell_sizes.len(), 200);
        assert_eq!(s.cell_sizes.iter().sum::<usize>(), 2613);
        assert_eq!(s.cell_covariances().unwrap().len(), 200);
    }

    #[test]
    fn separate_estimate_arithmetic() {
        let y = dmatrix![2.0];
        let s0 = SpdMatrix::new(dmatrix![1.0]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let est = separate_estimate(
            &y,
            &[vec![0], vec![]],
            &s0,
            SeparateMode::PosteriorMean,
            &mut rng,
        )
        .unwrap();
        assert_eq!(est[0].as_matrix()[(0, 0)], 2.5);
        assert_eq!(est[1].as_matrix(), s0.as_matrix());
    }

    #[test]
    fn separate_estimate_is_consistent_and_spd() {
        let truth =
            SpdMatrix::new(dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, -0.3; 0.1, -0.3, 0.8]).unwrap();
        let mut rng = RngStream::new(2, 0);
        let (y, _) = generate_data(std::slice::from_ref(&truth), &[10_000], &mut rng).unwrap();
        let rows: Vec<usize> = (0..10_000).collect();
        let s0 = SpdMatrix::identity(3);
        for mode in [SeparateMode::PosteriorMean, SeparateMode::Draw] {
            let est =
                separate_estimate(&y, std::slice::from_ref(&rows), &s0, mode, &mut rng).unwrap();
            assert!(relative_frobenius(est[0].as_matrix(), truth.as_matrix()) < 0.05);
            assert!(cholesky(est[0].as_matrix()).is_ok());
        }
    }

    #[test]
    fn generated_data_bookkeeping_and_consistency() {
        let truths = vec![
            SpdMatrix::new(dmatrix![1.0, 0.3; 0.3, 2.0]).unwrap(),
            SpdMatrix::identity(2),
            SpdMatrix::new(dmatrix![0.5, -0.2; -0.2, 0.4]).unwrap(),
        ];
        let mut rng = RngStream::new(3, 0);
        let (y, cells) = generate_data(&truths, &[10_000, 0, 7], &mut rng).unwrap();
        assert_eq!(y.nrows(), 10_007);
        assert!(!cells.contains(&1));
        let rows: Vec<usize> = (0..10_000).collect();
        let s = sum_of_squares(&y, &rows) / 10_000.0;
        assert!(relative_frobenius(&s, truths[0].as_matrix()) < 0.05);
    }

    #[test]
    fn truth_mean_and_spread() {
        let src = vec![SpdMatrix::new(dmatrix![1.0, 0.4; 0.4, 0.5]).unwrap()];
        let dev = |nu: f64| {
            let mut rng = RngStream::new(4, nu as u64);
            let mut acc = DMatrix::zeros(2, 2);
            let mut spread = 0.0;
            let n = 10_000;
            for _ in 0..n {
                let t = generate_truth(&src, nu, &mut rng).unwrap().remove(0);
                assert!(cholesky(t.as_matrix()).is_ok());
                spread += (t.as_matrix() - src[0].as_matrix()).norm();
                acc += t.into_inner();
            }
            (
                relative_frobenius(&(acc / n as f64), src[0].as_matrix()),
                spread / n as f64,
            )
        };
        let (m10, s10) = dev(10.0);
        let (m50, s50) = dev(50.0);
        assert!(m10 < 0.05 && m50 < 0.05, "{m10} {m50}");
        assert!(s50 < s10);
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            generate_truth(&src, 3.0, &mut rng),
            Err(Error::DofTooSmall { .. })
        ));
    }

    #[test]
    fn small_study_is_reproducible_and_complete() {
        let source = SensitivitySource::bundled();
        let config = SensitivityConfig {
            nu: vec![20.0],
            replicates: 1,
            seed: 9,
            em_max_iters: 30,
            ..Default::default()
        };
        let a = run_study(&source, &config).unwrap();
        let b = run_study(&source, &config).unwrap();
        assert_eq!(a, b);
        let rep = &a.runs[0].replicates[0];
        assert_eq!(rep.cells.len(), 200);
        let empty = source.cell_sizes.iter().filter(|&&n| n == 0).count();
        assert_eq!(rep.cells.iter().filter(|c| c.data_free).count(), empty);
        assert_eq!(a.runs[0].summary.len(), 18);
        let dir = tempfile::tempdir().unwrap();
        let paths = a.write(dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let bad = SensitivityConfig {
            nu: vec![5.0],
            ..Default::default()
        };
        assert!(matches!(
            run_study(&source, &bad),
            Err(Error::DofTooSmall { .. })
        ));
    }
}
