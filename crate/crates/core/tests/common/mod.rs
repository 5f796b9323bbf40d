#![allow(dead_code)]

use std::path::{Path, PathBuf};

use covreg::design::{Factor, FactorScheme, Formula};
use covreg::model::{simulate, CovRegParams, MeanParams};
use covreg::stochastics::RngStream;
use nalgebra::DMatrix;

pub const FACTORS: [(&str, &[&str]); 4] = [
    ("G", &["m", "f"]),
    ("A", &["a1", "a2", "a3"]),
    ("R", &["r1", "r2", "r3"]),
    ("E", &["e1", "e2"]),
];
pub const RESPONSES: [&str; 3] = ["y1", "y2", "y3"];

pub fn scheme() -> FactorScheme {
    FactorScheme::new(
        FACTORS
            .iter()
            .map(|(name, levels)| Factor::new(*name, levels, levels[0]).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Balanced layout: every cell repeated `per_cell` times.
pub fn balanced_codes(scheme: &FactorScheme, per_cell: usize) -> Vec<Vec<usize>> {
    scheme
        .all_cells()
        .into_iter()
        .flat_map(|c| std::iter::repeat_n(c, per_cell))
        .collect()
}

/// Rank-1 model with main-effect mean and covariance designs.
pub fn main_effects_model(scheme: &FactorScheme) -> (MeanParams, CovRegParams) {
    let q = Formula::main_effects_of(scheme).n_columns(scheme).unwrap();
    let mean = MeanParams::new(DMatrix::from_fn(3, q, |j, k| {
        0.4 * (j as f64 + 1.0) - 0.2 * k as f64
    }));
    let b = DMatrix::from_fn(3, q, |j, k| {
        if k == 0 {
            0.9
        } else {
            0.35 * ((j + 2 * k) % 3) as f64 - 0.3
        }
    });
    let params = CovRegParams::new(DMatrix::identity(3, 3) * 0.4, vec![b]).unwrap();
    (mean, params)
}

pub fn simulate_main_effects(
    scheme: &FactorScheme,
    codes: &[Vec<usize>],
    seed: u64,
) -> DMatrix<f64> {
    let d = Formula::main_effects_of(scheme)
        .resolve(scheme)
        .unwrap()
        .design(scheme, codes);
    let (mean, params) = main_effects_model(scheme);
    simulate(&mean, &params, &d, &d, &mut RngStream::new(seed, 0))
        .unwrap()
        .0
}

pub fn write_schema(path: &Path) {
    let factors: Vec<serde_json::Value> = FACTORS
        .iter()
        .map(|(name, levels)| serde_json::json!({"name": name, "levels": levels, "baseline": levels[0]}))
        .collect();
    let responses: Vec<serde_json::Value> = RESPONSES
        .iter()
        .map(|r| serde_json::json!({"name": r}))
        .collect();
    let schema = serde_json::json!({"factors": factors, "responses": responses});
    std::fs::write(path, serde_json::to_string_pretty(&schema).unwrap()).unwrap();
}

pub fn write_csv(path: &Path, scheme: &FactorScheme, codes: &[Vec<usize>], y: &DMatrix<f64>) {
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header: Vec<&str> = FACTORS.iter().map(|f| f.0).collect();
    header.extend(RESPONSES);
    w.write_record(&header).unwrap();
    for (i, c) in codes.iter().enumerate() {
        let mut rec: Vec<String> = c
            .iter()
            .enumerate()
            .map(|(f, &l)| scheme.factors()[f].levels[l].clone())
            .collect();
        rec.extend((0..y.ncols()).map(|j| y[(i, j)].to_string()));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

/// Writes `schema.json` and `data.csv` for a main-effects rank-1 fixture.
pub fn fixture(dir: &Path, per_cell: usize, seed: u64) -> (PathBuf, PathBuf) {
    let s = scheme();
    let codes = balanced_codes(&s, per_cell);
    let y = simulate_main_effects(&s, &codes, seed);
    let (data, schema) = (dir.join("data.csv"), dir.join("schema.json"));
    write_csv(&data, &s, &codes, &y);
    write_schema(&schema);
    (data, schema)
}
