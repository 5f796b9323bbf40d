use std::path::Path;

use serde::Serialize;

use super::{Draw, PosteriorDraws};
use crate::design::{FactorScheme, Formula};
use crate::error::{Error, Result};
use crate::model::{CovRegParams, MeanParams};
use crate::stochastics::{correlation, quantile_sorted};

/// Minimum number of draws for a 95% interval.
pub const MIN_DRAWS: usize = 40;

/// Posterior 2.5%, 50% and 97.5% quantiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

impl Interval {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| a.total_cmp(b));
        Self {
            lower: quantile_sorted(&values, 0.025),
            median: quantile_sorted(&values, 0.5),
            upper: quantile_sorted(&values, 0.975),
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Mean and covariance design rows for every potential cell of a scheme.
#[derive(Clone, Debug)]
pub struct CellDesigns {
    pub labels: Vec<String>,
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
}

impl CellDesigns {
    pub fn new(
        scheme: &FactorScheme,
        mean_formula: &Formula,
        cov_formula: &Formula,
    ) -> Result<Self> {
        let f1 = mean_formula.resolve(scheme)?;
        let f2 = cov_formula.resolve(scheme)?;
        let cells = scheme.all_cells();
        Ok(Self {
            labels: cells.iter().map(|c| scheme.cell_label(c)).collect(),
            x1: cells.iter().map(|c| f1.row(scheme, c)).collect(),
            x2: cells.iter().map(|c| f2.row(scheme, c)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub means: Vec<Interval>,
    pub variances: Vec<Interval>,
    /// `(j₁, j₂, interval)` for `j₁ < j₂`.
    pub correlations: Vec<(usize, usize, Interval)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub response_names: Vec<String>,
    pub cells: Vec<CellSummary>,
}

/// Per-cell posterior medians and 95% intervals of means, variances and
/// correlations.
pub fn summarize_groups(draws: &PosteriorDraws, cells: &CellDesigns) -> Result<GroupSummary> {
    if draws.len() < MIN_DRAWS {
        return Err(Error::InsufficientDraws {
            needed: MIN_DRAWS,
            have: draws.len(),
        });
    }
    group_summary(&draws.draws, &draws.response_names, cells)
}

/// Degenerate summary of a point estimate (all intervals have zero width).
pub fn summarize_point(
    mean: &MeanParams,
    params: &CovRegParams,
    response_names: &[String],
    cells: &CellDesigns,
) -> Result<GroupSummary> {
    let d = [Draw {
        mean: mean.clone(),
        params: params.clone(),
    }];
    group_summary(&d, response_names, cells)
}

fn group_summary(
    draws: &[Draw],
    response_names: &[String],
    cells: &CellDesigns,
) -> Result<GroupSummary> {
    let p = draws[0].params.p();
    let names = if response_names.len() == p {
        response_names.to_vec()
    } else {
        (1..=p).map(|j| format!("y{j}")).collect()
    };
    let mut out = Vec::with_capacity(cells.len());
    for c in 0..cells.len() {
        let s = draws.len();
        let mut mus = vec![Vec::with_capacity(s); p];
        let mut vars = vec![Vec::with_capacity(s); p];
        let mut cors = vec![Vec::with_capacity(s); p * (p - 1) / 2];
        for d in draws {
            let mu = crate::model::mu_at(&d.mean, &cells.x1[c])?;
            let sigma = d.params.sigma_matrix(&cells.x2[c])?;
            let rho = correlation(&sigma);
            let mut k = 0;
            for j in 0..p {
                mus[j].push(mu[j]);
                vars[j].push(sigma[(j, j)]);
                for l in (j + 1)..p {
                    cors[k].push(rho[(j, l)].clamp(-1.0, 1.0));
                    k += 1;
                }
            }
        }
        let pairs: Vec<(usize, usize)> = (0..p)
            .flat_map(|j| ((j + 1)..p).map(move |l| (j, l)))
            .collect();
        out.push(CellSummary {
            label: cells.labels[c].clone(),
            means: mus.into_iter().map(Interval::from_values).collect(),
            variances: vars.into_iter().map(Interval::from_values).collect(),
            correlations: pairs
                .into_iter()
                .zip(cors)
                .map(|((j, l), v)| (j, l, Interval::from_values(v)))
                .collect(),
        });
    }
    Ok(GroupSummary {
        response_names: names,
        cells: out,
    })
}

impl GroupSummary {
    /// Long format: `cell,quantity,response1,response2,lower,median,upper`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "cell",
            "quantity",
            "response1",
            "response2",
            "lower",
            "median",
            "upper",
        ])?;
        let names = &self.response_names;
        for c in &self.cells {
            let mut row = |q: &str, a: &str, b: &str, i: &Interval| {
                w.write_record([
                    c.label.as_str(),
                    q,
                    a,
                    b,
                    &i.lower.to_string(),
                    &i.median.to_string(),
                    &i.upper.to_string(),
                ])
            };
            for (j, i) in c.means.iter().enumerate() {
                row("mean", &names[j], "", i)?;
            }
            for (j, i) in c.variances.iter().enumerate() {
                row("variance", &names[j], "", i)?;
            }
            for (j, l, i) in &c.correlations {
                row("correlation", &names[*j], &names[*l], i)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub response1: usize,
    /// Second response for covariance coefficients.
    pub response2: Option<usize>,
    pub column: String,
    pub interval: Interval,
}

/// Interval summaries of regression coefficients.
///
/// With `b_{jk}` the r-vector of entry `(j, k)` across the loading
/// matrices, the variance coefficient of response `j` for column `k` is
/// `‖b_{j0} + b_{jk}‖²` and the covariance coefficient of responses
/// `j₁, j₂` is `(b_{j₁0} + b_{j₁k})ᵀ(b_{j₂0} + b_{j₂k})`. The baseline
/// references are `‖b_{j0}‖²` and `b_{j₁0}ᵀ b_{j₂0}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub response_names: Vec<String>,
    pub mean_coefficients: Vec<CoefficientRow>,
    pub variance_coefficients: Vec<CoefficientRow>,
    pub covariance_coefficients: Vec<CoefficientRow>,
    pub baseline_variance: Vec<CoefficientRow>,
    pub baseline_covariance: Vec<CoefficientRow>,
}

/// Summarizes coefficient functions over draws. Requires a design whose
/// first covariance column is the intercept. Any number of draws is
/// accepted; with one draw the intervals collapse to the point value.
pub fn summarize_coefficients(draws: &PosteriorDraws) -> Result<CoefficientSummary> {
    let first = draws
        .draws
        .first()
        .ok_or(Error::InsufficientDraws { needed: 1, have: 0 })?;
    let p = first.params.p();
    let q1 = first.mean.q1();
    let q2 = first.params.q2();
    let label =
        |labels: &[String], k: usize| labels.get(k).cloned().unwrap_or_else(|| format!("x{k}"));
    let names = if draws.response_names.len() == p {
        draws.response_names.clone()
    } else {
        (1..=p).map(|j| format!("y{j}")).collect()
    };

    // b(d, j, k) = r-vector of loadings.
    let bvec = |d: &Draw, j: usize, k: usize| -> Vec<f64> {
        d.params.b().iter().map(|bk| bk[(j, k)]).collect()
    };
    let combined = |d: &Draw, j: usize, k: usize| -> Vec<f64> {
        let b0 = bvec(d, j, 0);
        if k == 0 {
            return b0;
        }
        bvec(d, j, k).iter().zip(&b0).map(|(a, b)| a + b).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut mean_coefficients = Vec::new();
    for j in 0..p {
        for k in 0..q1 {
            mean_coefficients.push(CoefficientRow {
                response1: j,
                response2: None,
                column: label(&draws.mean_labels, k),
                interval: Interval::from_values(
                    draws.draws.iter().map(|d| d.mean.b1[(j, k)]).collect(),
                ),
            });
        }
    }
    let mut variance_coefficients = Vec::new();
    let mut baseline_variance = Vec::new();
    for j in 0..p {
        baseline_variance.push(CoefficientRow {
            response1: j,
            response2: None,
            column: label(&draws.cov_labels, 0),
            interval: Interval::from_values(
                draws
                    .draws
                    .iter()
                    .map(|d| {
                        let v = bvec(d, j, 0);
                        dot(&v, &v)
                    })
                    .collect(),
            ),
        });
        for k in 1..q2 {
            variance_coefficients.push(CoefficientRow {
                response1: j,
                response2: None,
                column: label(&draws.cov_labels, k),
                interval: Interval::from_values(
                    draws
                        .draws
                        .iter()
                        .map(|d| {
                            let v = combined(d, j, k);
                            dot(&v, &v)
                        })
                        .collect(),
                ),
            });
        }
    }
    let mut covariance_coefficients = Vec::new();
    let mut baseline_covariance = Vec::new();
    for j1 in 0..p {
        for j2 in (j1 + 1)..p {
            baseline_covariance.push(CoefficientRow {
                response1: j1,
                response2: Some(j2),
                column: label(&draws.cov_labels, 0),
                interval: Interval::from_values(
                    draws
                        .draws
                        .iter()
                        .map(|d| dot(&bvec(d, j1, 0), &bvec(d, j2, 0)))
                        .collect(),
                ),
            });
            for k in 1..q2 {
                covariance_coefficients.push(CoefficientRow {
                    response1: j1,
                    response2: Some(j2),
                    column: label(&draws.cov_labels, k),
                    interval: Interval::from_values(
                        draws
                            .draws
                            .iter()
                            .map(|d| dot(&combined(d, j1, k), &combined(d, j2, k)))
                            .collect(),
                    ),
                });
            }
        }
    }
    Ok(CoefficientSummary {
        response_names: names,
        mean_coefficients,
        variance_coefficients,
        covariance_coefficients,
        baseline_variance,
        baseline_covariance,
    })
}

impl CoefficientSummary {
    /// Long format: `kind,response1,response2,column,lower,median,upper`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "kind",
            "response1",
            "response2",
            "column",
            "lower",
            "median",
            "upper",
        ])?;
        let groups = [
            ("mean", &self.mean_coefficients),
            ("variance", &self.variance_coefficients),
            ("covariance", &self.covariance_coefficients),
            ("baseline_variance", &self.baseline_variance),
            ("baseline_covariance", &self.baseline_covariance),
        ];
        for (kind, rows) in groups {
            for r in rows.iter() {
                w.write_record([
                    kind,
                    &self.response_names[r.response1],
                    r.response2
                        .map(|j| self.response_names[j].as_str())
                        .unwrap_or(""),
                    &r.column,
                    &r.interval.lower.to_string(),
                    &r.interval.median.to_string(),
                    &r.interval.upper.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Factor;
    use crate::stochastics::RngStream;
    use nalgebra::{dmatrix, DMatrix};

    fn scheme() -> FactorScheme {
        FactorScheme::new(vec![
            Factor::new("g", &["m", "f"], "m").unwrap(),
            Factor::new("a", &["y", "o", "x"], "y").unwrap(),
        ])
        .unwrap()
    }

    fn random_draws(s: usize, r: usize, seed: u64) -> PosteriorDraws {
        let mut rng = RngStream::new(seed, 0);
        let draws = (0..s)
            .map(|_| Draw {
                mean: MeanParams::new(DMatrix::from_fn(3, 4, |_, _| rng.standard_normal())),
                params: CovRegParams::new(
                    DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.2 }),
                    (0..r)
                        .map(|_| DMatrix::from_fn(3, 4, |_, _| rng.standard_normal()))
                        .collect(),
                )
                .unwrap(),
            })
            .collect();
        PosteriorDraws {
            draws,
            burn_in: 0,
            thin: 1,
            seed,
            stream_id: 0,
            mean_labels: vec![],
            cov_labels: vec![],
            response_names: vec!["u".into(), "v".into(), "w".into()],
            mean_formula: None,
            cov_formula: None,
        }
    }

    fn cells() -> CellDesigns {
        let f = Formula::parse("g + a").unwrap();
        CellDesigns::new(&scheme(), &f, &f).unwrap()
    }

    #[test]
    fn identical_draws_give_zero_width() {
        let one = random_draws(1, 2, 1);
        let mut d = one.clone();
        d.draws = vec![one.draws[0].clone(); 50];
        let s = summarize_groups(&d, &cells()).unwrap();
        assert_eq!(s.cells.len(), 6);
        for c in &s.cells {
            for i in c.means.iter().chain(&c.variances) {
                assert_eq!(i.lower, i.upper);
            }
        }
        let mu = crate::model::mu_at(&one.draws[0].mean, &cells().x1[3]).unwrap();
        assert_eq!(s.cells[3].means[1].median, mu[1]);
    }

    #[test]
    fn too_few_draws_rejected() {
        assert!(matches!(
            summarize_groups(&random_draws(10, 1, 2), &cells()),
            Err(Error::InsufficientDraws { .. })
        ));
    }

    #[test]
    fn percentiles_match_sort_oracle() {
        let d = random_draws(101, 2, 3);
        let cd = cells();
        let s = summarize_groups(&d, &cd).unwrap();
        // Oracle: sort per-cell variance of response 0 and interpolate by hand.
        let c = 4;
        let mut v: Vec<f64> = d
            .draws
            .iter()
            .map(|dr| dr.params.sigma_matrix(&cd.x2[c]).unwrap()[(0, 0)])
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // n = 101: 2.5% at position 2.5, median at 50, 97.5% at 97.5.
        let lo = 0.5 * (v[2] + v[3]);
        let hi = 0.5 * (v[97] + v[98]);
        assert!((s.cells[c].variances[0].lower - lo).abs() < 1e-12);
        assert_eq!(s.cells[c].variances[0].median, v[50]);
        assert!((s.cells[c].variances[0].upper - hi).abs() < 1e-12);
        for cell in &s.cells {
            for (_, _, i) in &cell.correlations {
                assert!(
                    -1.0 <= i.lower && i.lower <= i.median && i.median <= i.upper && i.upper <= 1.0
                );
            }
        }
    }

    #[test]
    fn noise_widens_intervals() {
        let base = random_draws(1, 1, 4);
        let mut tight = base.clone();
        tight.draws = vec![base.draws[0].clone(); 60];
        let mut rng = RngStream::new(9, 0);
        let mut loose = tight.clone();
        for d in &mut loose.draws {
            d.mean.b1 += DMatrix::from_fn(3, 4, |_, _| 0.1 * rng.standard_normal());
        }
        let cd = cells();
        let a = summarize_groups(&tight, &cd).unwrap();
        let b = summarize_groups(&loose, &cd).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            for (ia, ib) in ca.means.iter().zip(&cb.means) {
                assert!(ib.width() >= ia.width());
            }
        }
    }

    #[test]
    fn sign_flip_leaves_group_summary_unchanged() {
        let d = random_draws(60, 2, 5);
        let cd = cells();
        let a = summarize_groups(&d, &cd).unwrap();
        let b = summarize_groups(&d.with_flipped_component(1).unwrap(), &cd).unwrap();
        assert_eq!(a, b);
    }

    fn single(b: Vec<DMatrix<f64>>) -> PosteriorDraws {
        let mut d = random_draws(1, 1, 6);
        let p = b[0].nrows();
        d.draws = vec![Draw {
            mean: MeanParams::new(DMatrix::zeros(p, 1)),
            params: CovRegParams::new(DMatrix::identity(p, p), b).unwrap(),
        }];
        d.response_names = (0..p).map(|j| j.to_string()).collect();
        d
    }

    #[test]
    fn coefficient_arithmetic() {
        // r = 1, b_j0 = 1, b_jk = 0.5 -> 2.25; b_jk = -b_j0 -> 0.
        let s =
            summarize_coefficients(&single(vec![dmatrix![1.0, 0.5, -1.0; 2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(s.variance_coefficients[0].interval.median, 2.25);
        assert_eq!(s.variance_coefficients[1].interval.median, 0.0);
        assert_eq!(s.baseline_variance[0].interval.median, 1.0);
        assert_eq!(s.baseline_covariance[0].interval.median, 2.0);
        // r = 2, orthogonal combined vectors -> covariance coefficient 0.
        let s = summarize_coefficients(&single(vec![
            dmatrix![0.5, 0.5; 0.0, 0.0],
            dmatrix![0.0, 0.0; 0.25, 0.75],
        ]))
        .unwrap();
        assert_eq!(s.covariance_coefficients[0].interval.median, 0.0);
        assert_eq!(s.variance_coefficients[0].interval.median, 1.0);
        assert_eq!(s.variance_coefficients[1].interval.median, 1.0);
    }

    #[test]
    fn variance_coefficients_nonnegative_and_sign_invariant() {
        let d = random_draws(50, 2, 7);
        let s = summarize_coefficients(&d).unwrap();
        assert!(s
            .variance_coefficients
            .iter()
            .all(|r| r.interval.lower >= 0.0));
        let f = summarize_coefficients(&d.with_flipped_component(0).unwrap()).unwrap();
        assert_eq!(s.variance_coefficients, f.variance_coefficients);
        assert_eq!(s.covariance_coefficients, f.covariance_coefficients);
    }
}
