use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovRegParams, MeanParams};

/// One retained MCMC state.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub mean: MeanParams,
    pub params: CovRegParams,
}

/// Retained posterior samples with chain metadata.
///
/// Loadings are stored as sampled; their sign and rotation are not
/// aligned across draws, so only rotation-invariant functions of them
/// (`Σ_x`, inner products of loading rows) are meaningful summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<Draw>,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub stream_id: u64,
    pub mean_labels: Vec<String>,
    pub cov_labels: Vec<String>,
    pub response_names: Vec<String>,
    pub mean_formula: Option<String>,
    pub cov_formula: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DrawsMetadata {
    p: usize,
    q1: usize,
    q2: usize,
    r: usize,
    n_draws: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    stream_id: u64,
    mean_labels: Vec<String>,
    cov_labels: Vec<String>,
    response_names: Vec<String>,
    mean_formula: Option<String>,
    cov_formula: Option<String>,
    columns: Vec<String>,
}

pub const METADATA_FILE: &str = "metadata.json";
pub const DRAWS_FILE: &str = "draws.csv";

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn p(&self) -> usize {
        self.draws[0].params.p()
    }

    pub fn rank(&self) -> usize {
        self.draws[0].params.rank()
    }

    /// Posterior mean of the mean coefficients.
    pub fn mean_b1(&self) -> MeanParams {
        let sum = self.draws.iter().fold(
            DMatrix::zeros(self.p(), self.draws[0].mean.q1()),
            |acc, d| acc + &d.mean.b1,
        );
        MeanParams::new(sum / self.len() as f64)
    }

    /// Posterior mean of `Σ_x` at one covariance design row.
    pub fn mean_sigma(&self, x2: &[f64]) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(self.p(), self.p());
        for d in &self.draws {
            acc += d.params.sigma_matrix(x2)?;
        }
        Ok(acc / self.len() as f64)
    }

    /// Every draw with the sign of loading matrix `k` flipped.
    pub fn with_flipped_component(&self, k: usize) -> Result<Self> {
        let r = self.rank();
        let mut q = DMatrix::identity(r, r);
        q[(k, k)] = -1.0;
        let draws = self
            .draws
            .iter()
            .map(|d| {
                Ok(Draw {
                    mean: d.mean.clone(),
                    params: d.params.mix_components(&q)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            draws,
            ..self.clone()
        })
    }

    fn column_names(&self) -> Vec<String> {
        let (p, q1, q2, r) = (
            self.p(),
            self.draws[0].mean.q1(),
            self.draws[0].params.q2(),
            self.rank(),
        );
        let mut cols = Vec::new();
        for i in 0..p {
            for j in i..p {
                cols.push(format!("A[{}][{}]", i + 1, j + 1));
            }
        }
        for i in 0..p {
            for j in 0..q1 {
                cols.push(format!("B1[{}][{}]", i + 1, j + 1));
            }
        }
        for k in 0..r {
            for i in 0..p {
                for j in 0..q2 {
                    cols.push(format!("B[{}][{}][{}]", k + 1, i + 1, j + 1));
                }
            }
        }
        cols
    }

    fn flatten(d: &Draw) -> Vec<f64> {
        let a = d.params.a();
        let p = a.nrows();
        let mut v = Vec::new();
        for i in 0..p {
            for j in i..p {
                v.push(a[(i, j)]);
            }
        }
        v.extend(crate::model::to_row_major(&d.mean.b1));
        for bk in d.params.b() {
            v.extend(crate::model::to_row_major(bk));
        }
        v
    }

    /// Writes `metadata.json` and `draws.csv` (one row per retained draw;
    /// `A` upper triangle, then `B1`, then each `Bₖ`, all row-major).
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InsufficientDraws { needed: 1, have: 0 });
        }
        std::fs::create_dir_all(dir)?;
        let columns = self.column_names();
        let meta = DrawsMetadata {
            p: self.p(),
            q1: self.draws[0].mean.q1(),
            q2: self.draws[0].params.q2(),
            r: self.rank(),
            n_draws: self.len(),
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            stream_id: self.stream_id,
            mean_labels: self.mean_labels.clone(),
            cov_labels: self.cov_labels.clone(),
            response_names: self.response_names.clone(),
            mean_formula: self.mean_formula.clone(),
            cov_formula: self.cov_formula.clone(),
            columns: columns.clone(),
        };
        let mut f = std::fs::File::create(dir.join(METADATA_FILE))?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        writeln!(f)?;
        let mut w = csv::Writer::from_path(dir.join(DRAWS_FILE))?;
        w.write_record(&columns)?;
        for d in &self.draws {
            w.write_record(Self::flatten(d).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|source| Error::FileUnreadable {
            path: meta_path.clone(),
            source,
        })?;
        let meta: DrawsMetadata = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", meta_path.display())))?;
        let draws_path = dir.join(DRAWS_FILE);
        let file = std::fs::File::open(&draws_path).map_err(|source| Error::FileUnreadable {
            path: draws_path.clone(),
            source,
        })?;
        let mut reader = csv::Reader::from_reader(file);
        let (p, q1, q2, r) = (meta.p, meta.q1, meta.q2, meta.r);
        let width = p * (p + 1) / 2 + p * q1 + r * p * q2;
        let mut draws = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("bad value in draws: {e}")))?;
            if v.len() != width {
                return Err(Error::ShapeMismatch(format!(
                    "draw row has {} values, expected {width}",
                    v.len()
                )));
            }
            let mut a = DMatrix::zeros(p, p);
            let mut it = v.iter().copied();
            for i in 0..p {
                for j in i..p {
                    let x = it.next().unwrap();
                    a[(i, j)] = x;
                    a[(j, i)] = x;
                }
            }
            let rest: Vec<f64> = it.collect();
            let b1 = DMatrix::from_row_slice(p, q1, &rest[..p * q1]);
            let b = (0..r)
                .map(|k| {
                    let off = p * q1 + k * p * q2;
                    DMatrix::from_row_slice(p, q2, &rest[off..off + p * q2])
                })
                .collect();
            draws.push(Draw {
                mean: MeanParams::new(b1),
                params: CovRegParams::new(a, b)?,
            });
        }
        if draws.len() != meta.n_draws || draws.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "metadata lists {} draws, file has {}",
                meta.n_draws,
                draws.len()
            )));
        }
        Ok(Self {
            draws,
            burn_in: meta.burn_in,
            thin: meta.thin,
            seed: meta.seed,
            stream_id: meta.stream_id,
            mean_labels: meta.mean_labels,
            cov_labels: meta.cov_labels,
            response_names: meta.response_names,
            mean_formula: meta.mean_formula,
            cov_formula: meta.cov_formula,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn sample_draws() -> PosteriorDraws {
        let mk = |s: f64| Draw {
            mean: MeanParams::new(dmatrix![1.0 * s, 2.0; 3.0, 4.0 / 3.0]),
            params: CovRegParams::new(
                dmatrix![1.0, 0.1 * s; 0.1 * s, 2.0],
                vec![
                    dmatrix![0.1, 0.2, s; 0.4, 0.5, 0.6],
                    dmatrix![-0.1, 0.0, 0.3; 0.7, 1e-17, 0.2],
                ],
            )
            .unwrap(),
        };
        PosteriorDraws {
            draws: vec![mk(1.0), mk(0.1 + 0.2)],
            burn_in: 10,
            thin: 2,
            seed: 5,
            stream_id: 1,
            mean_labels: vec!["(Intercept)".into(), "g[b]".into()],
            cov_labels: vec!["(Intercept)".into(), "h[b]".into(), "h[c]".into()],
            response_names: vec!["y1".into(), "y2".into()],
            mean_formula: Some("g".into()),
            cov_formula: Some("h".into()),
        }
    }

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample_draws();
        d.save(dir.path()).unwrap();
        let back = PosteriorDraws::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let header = std::fs::read_to_string(dir.path().join(DRAWS_FILE)).unwrap();
        assert!(header.starts_with("A[1][1],A[1][2],A[2][2],B1[1][1]"));
    }

    #[test]
    fn load_missing_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = PosteriorDraws::load(&dir.path().join("none")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
