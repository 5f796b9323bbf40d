//! Categorical predictors: factor schemes, model formulas, dummy-coded
//! design matrices, cross-classified group indices, CSV ingestion and
//! one-way descriptive summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A categorical predictor with an ordered list of levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    /// Index into `levels` of the reference level (dropped from the design).
    pub baseline: usize,
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: &[&str], baseline: &str) -> Result<Self> {
        let name = name.into();
        let levels: Vec<String> = levels.iter().map(|s| s.to_string()).collect();
        let baseline = levels.iter().position(|l| l == baseline).ok_or_else(|| {
            Error::InvalidScheme(format!("baseline {baseline:?} is not a level of {name:?}"))
        })?;
        Ok(Self {
            name,
            levels,
            baseline,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    /// Position of `level` among the non-baseline levels, i.e. its dummy
    /// column offset, or `None` for the baseline.
    fn dummy_offset(&self, level: usize) -> Option<usize> {
        match level.cmp(&self.baseline) {
            std::cmp::Ordering::Less => Some(level),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(level - 1),
        }
    }

    fn non_baseline_levels(&self) -> impl Iterator<Item = (usize, &String)> {
        self.levels
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.baseline)
    }
}

/// Ordered collection of factors; the baseline cell takes the baseline
/// level of every factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorScheme {
    factors: Vec<Factor>,
}

impl FactorScheme {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidScheme("no factors".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.levels.len() < 2 {
                return Err(Error::InvalidScheme(format!(
                    "factor {:?} needs at least 2 levels",
                    f.name
                )));
            }
            if f.baseline >= f.levels.len() {
                return Err(Error::InvalidScheme(format!(
                    "baseline of {:?} out of range",
                    f.name
                )));
            }
            for (a, la) in f.levels.iter().enumerate() {
                if f.levels[a + 1..].contains(la) {
                    return Err(Error::InvalidScheme(format!(
                        "duplicate level {la:?} in factor {:?}",
                        f.name
                    )));
                }
            }
            if factors[i + 1..]
                .iter()
                .any(|g| g.name.eq_ignore_ascii_case(&f.name))
            {
                return Err(Error::InvalidScheme(format!(
                    "duplicate factor {:?}",
                    f.name
                )));
            }
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Case-insensitive lookup of a factor by name.
    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors
            .iter()
            .position(|f| f.name.eq_ignore_ascii_case(name))
    }

    pub fn n_cells(&self) -> usize {
        self.factors.iter().map(Factor::n_levels).product()
    }

    /// All factor pairs `(i, j)` with `i < j`, in lexicographic order.
    pub fn factor_pairs(&self) -> Vec<(usize, usize)> {
        let k = self.n_factors();
        (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .collect()
    }

    pub fn pair_label(&self, pair: (usize, usize)) -> String {
        format!(
            "{}*{}",
            self.factors[pair.0].name, self.factors[pair.1].name
        )
    }

    /// Every potential cell, first factor varying slowest.
    pub fn all_cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new()];
        for f in &self.factors {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    (0..f.n_levels()).map(move |l| {
                        let mut c = prefix.clone();
                        c.push(l);
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn baseline_cell(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.baseline).collect()
    }

    pub fn cell_label(&self, levels: &[usize]) -> String {
        self.factors
            .iter()
            .zip(levels)
            .map(|(f, &l)| format!("{}={}", f.name, f.levels[l]))
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Maps every row's labels to level indices.
    pub fn encode(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        let columns: Vec<usize> = self
            .factors
            .iter()
            .map(|f| {
                data.factor_names
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(&f.name))
                    .ok_or_else(|| {
                        Error::SchemaMismatch(format!("dataset lacks factor column {:?}", f.name))
                    })
            })
            .collect::<Result<_>>()?;
        data.factor_values
            .iter()
            .map(|row| {
                self.factors
                    .iter()
                    .zip(&columns)
                    .map(|(f, &c)| {
                        f.level_index(&row[c]).ok_or_else(|| Error::UnknownLevel {
                            factor: f.name.clone(),
                            level: row[c].clone(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// A model formula over factor names: main effects plus two-way
/// interactions. `A*B` denotes the interaction only; both main effects
/// must be listed separately.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Formula {
    pub main_effects: Vec<String>,
    pub interactions: Vec<(String, String)>,
}

impl Formula {
    pub fn new(main_effects: Vec<String>, interactions: Vec<(String, String)>) -> Result<Self> {
        let f = Self {
            main_effects,
            interactions,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn intercept_only() -> Self {
        Self::default()
    }

    pub fn main_effects_of(scheme: &FactorScheme) -> Self {
        Self {
            main_effects: scheme.factors.iter().map(|f| f.name.clone()).collect(),
            interactions: Vec::new(),
        }
    }

    /// Parses `Y ~ A + B + A*B`; the left-hand side is optional and
    /// ignored. `1` (or an empty right-hand side) is intercept-only.
    pub fn parse(text: &str) -> Result<Self> {
        let rhs = match text.split_once('~') {
            Some((lhs, rhs)) => {
                if lhs.trim().is_empty() || rhs.contains('~') {
                    return Err(Error::MalformedFormula(text.to_string()));
                }
                rhs
            }
            None => text,
        };
        let mut mains = Vec::new();
        let mut inters = Vec::new();
        if rhs.trim().is_empty() || rhs.trim() == "1" {
            return Ok(Self::default());
        }
        for term in rhs.split('+') {
            let term = term.trim();
            if term == "1" {
                continue;
            }
            let parts: Vec<&str> = term.split('*').map(str::trim).collect();
            if parts.iter().any(|p| !is_identifier(p)) {
                return Err(Error::MalformedFormula(format!(
                    "bad term {term:?} in {text:?}"
                )));
            }
            match parts.as_slice() {
                [name] => {
                    if !mains.iter().any(|m: &String| m.eq_ignore_ascii_case(name)) {
                        mains.push(name.to_string());
                    }
                }
                [a, b] => {
                    let dup = inters.iter().any(|(x, y): &(String, String)| {
                        (x.eq_ignore_ascii_case(a) && y.eq_ignore_ascii_case(b))
                            || (x.eq_ignore_ascii_case(b) && y.eq_ignore_ascii_case(a))
                    });
                    if !dup {
                        inters.push((a.to_string(), b.to_string()));
                    }
                }
                _ => {
                    return Err(Error::MalformedFormula(format!(
                        "only two-way interactions are supported: {term:?}"
                    )))
                }
            }
        }
        Self::new(mains, inters)
    }

    fn validate(&self) -> Result<()> {
        for (a, b) in &self.interactions {
            if a.eq_ignore_ascii_case(b) {
                return Err(Error::MalformedFormula(format!("self-interaction {a}*{b}")));
            }
            for x in [a, b] {
                if !self.main_effects.iter().any(|m| m.eq_ignore_ascii_case(x)) {
                    return Err(Error::MalformedFormula(format!(
                        "interaction {a}*{b} requires main effect {x}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolves names against a scheme and sorts terms into scheme order.
    pub fn resolve(&self, scheme: &FactorScheme) -> Result<ResolvedFormula> {
        self.validate()?;
        let lookup = |name: &str| {
            scheme
                .factor_index(name)
                .ok_or_else(|| Error::MalformedFormula(format!("unknown factor {name:?}")))
        };
        let mut mains = self
            .main_effects
            .iter()
            .map(|m| lookup(m))
            .collect::<Result<Vec<_>>>()?;
        mains.sort_unstable();
        mains.dedup();
        let mut inters = self
            .interactions
            .iter()
            .map(|(a, b)| {
                let (i, j) = (lookup(a)?, lookup(b)?);
                Ok((i.min(j), i.max(j)))
            })
            .collect::<Result<Vec<_>>>()?;
        inters.sort_unstable();
        inters.dedup();
        Ok(ResolvedFormula {
            mains,
            interactions: inters,
        })
    }

    /// The same formula with terms renamed and ordered as in `scheme`.
    pub fn canonical(&self, scheme: &FactorScheme) -> Result<Self> {
        Ok(self.resolve(scheme)?.to_formula(scheme))
    }

    pub fn has_interaction(&self, a: &str, b: &str) -> bool {
        self.interactions.iter().any(|(x, y)| {
            (x.eq_ignore_ascii_case(a) && y.eq_ignore_ascii_case(b))
                || (x.eq_ignore_ascii_case(b) && y.eq_ignore_ascii_case(a))
        })
    }

    pub fn with_interaction(&self, a: &str, b: &str) -> Result<Self> {
        let mut f = self.clone();
        if !f.has_interaction(a, b) {
            f.interactions.push((a.to_string(), b.to_string()));
        }
        f.validate()?;
        Ok(f)
    }

    /// Closed-form number of design columns, including the intercept.
    pub fn n_columns(&self, scheme: &FactorScheme) -> Result<usize> {
        Ok(self.resolve(scheme)?.n_columns(scheme))
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.' || c == '-')
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self
            .main_effects
            .iter()
            .cloned()
            .chain(self.interactions.iter().map(|(a, b)| format!("{a}*{b}")))
            .collect();
        if terms.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", terms.join(" + "))
        }
    }
}

/// A formula whose terms are factor indices of a particular scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedFormula {
    pub mains: Vec<usize>,
    pub interactions: Vec<(usize, usize)>,
}

impl ResolvedFormula {
    pub fn n_columns(&self, scheme: &FactorScheme) -> usize {
        let lv = |i: usize| scheme.factors[i].n_levels() - 1;
        1 + self.mains.iter().map(|&i| lv(i)).sum::<usize>()
            + self
                .interactions
                .iter()
                .map(|&(i, j)| lv(i) * lv(j))
                .sum::<usize>()
    }

    pub fn to_formula(&self, scheme: &FactorScheme) -> Formula {
        let name = |i: usize| scheme.factors[i].name.clone();
        Formula {
            main_effects: self.mains.iter().map(|&i| name(i)).collect(),
            interactions: self
                .interactions
                .iter()
                .map(|&(i, j)| (name(i), name(j)))
                .collect(),
        }
    }

    pub fn labels(&self, scheme: &FactorScheme) -> Vec<String> {
        let mut labels = vec!["(Intercept)".to_string()];
        for &i in &self.mains {
            let f = &scheme.factors[i];
            labels.extend(
                f.non_baseline_levels()
                    .map(|(_, l)| format!("{}[{}]", f.name, l)),
            );
        }
        for &(i, j) in &self.interactions {
            let (fi, fj) = (&scheme.factors[i], &scheme.factors[j]);
            for (_, li) in fi.non_baseline_levels() {
                for (_, lj) in fj.non_baseline_levels() {
                    labels.push(format!("{}[{}]:{}[{}]", fi.name, li, fj.name, lj));
                }
            }
        }
        labels
    }

    /// Dummy-coded design row for one cross-classified cell.
    pub fn row(&self, scheme: &FactorScheme, levels: &[usize]) -> Vec<f64> {
        let mut row = vec![1.0];
        for &i in &self.mains {
            let f = &scheme.factors[i];
            let mut block = vec![0.0; f.n_levels() - 1];
            if let Some(k) = f.dummy_offset(levels[i]) {
                block[k] = 1.0;
            }
            row.extend(block);
        }
        for &(i, j) in &self.interactions {
            let (fi, fj) = (&scheme.factors[i], &scheme.factors[j]);
            let width = fj.n_levels() - 1;
            let mut block = vec![0.0; (fi.n_levels() - 1) * width];
            if let (Some(a), Some(b)) = (fi.dummy_offset(levels[i]), fj.dummy_offset(levels[j])) {
                block[a * width + b] = 1.0;
            }
            row.extend(block);
        }
        row
    }

    pub fn design(&self, scheme: &FactorScheme, codes: &[Vec<usize>]) -> DesignMatrix {
        let q = self.n_columns(scheme);
        let mut m = DMatrix::zeros(codes.len(), q);
        for (r, levels) in codes.iter().enumerate() {
            for (c, v) in self.row(scheme, levels).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        DesignMatrix {
            matrix: m,
            labels: self.labels(scheme),
        }
    }
}

/// An `n × q` design matrix whose first column is the intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl DesignMatrix {
    /// Raw entry point for designs not produced by the categorical builder.
    pub fn from_matrix(matrix: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != matrix.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} columns",
                labels.len(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn has_intercept(&self) -> bool {
        self.n_cols() > 0 && self.matrix.column(0).iter().all(|&v| v == 1.0)
    }

    /// Numerical rank check through the Gram matrix.
    pub fn check_full_rank(&self) -> Result<()> {
        let gram = self.matrix.transpose() * &self.matrix;
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.min();
        if self.n_rows() < self.n_cols() || !(min > 1e-10 * max.max(1.0)) {
            let empty: Vec<&str> = (0..self.n_cols())
                .filter(|&c| self.matrix.column(c).iter().all(|&v| v == 0.0))
                .map(|c| self.labels[c].as_str())
                .collect();
            let detail = if empty.is_empty() {
                format!(
                    "{} columns, smallest Gram eigenvalue {min:e}",
                    self.n_cols()
                )
            } else {
                format!("empty columns {}", empty.join(", "))
            };
            return Err(Error::DegenerateDesign(detail));
        }
        Ok(())
    }
}

pub fn build_design(
    scheme: &FactorScheme,
    formula: &Formula,
    data: &Dataset,
) -> Result<DesignMatrix> {
    let resolved = formula.resolve(scheme)?;
    let codes = scheme.encode(data)?;
    Ok(resolved.design(scheme, &codes))
}

/// `n` observations of `p` responses with categorical labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub response_names: Vec<String>,
    pub factor_names: Vec<String>,
    /// `n × p`.
    pub responses: DMatrix<f64>,
    /// `n` rows of level labels, columns in `factor_names` order.
    pub factor_values: Vec<Vec<String>>,
}

impl Dataset {
    pub fn new(
        response_names: Vec<String>,
        factor_names: Vec<String>,
        responses: DMatrix<f64>,
        factor_values: Vec<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = responses.shape();
        if n == 0 {
            return Err(Error::ShapeMismatch("dataset has no rows".into()));
        }
        if p < 2 || response_names.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "need at least 2 named responses, got {p} columns and {} names",
                response_names.len()
            )));
        }
        if factor_values.len() != n || factor_values.iter().any(|r| r.len() != factor_names.len()) {
            return Err(Error::ShapeMismatch(
                "factor rows do not match responses".into(),
            ));
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(
                "responses contain non-finite values".into(),
            ));
        }
        Ok(Self {
            response_names,
            factor_names,
            responses,
            factor_values,
        })
    }

    /// Builds a dataset from level codes of `scheme`.
    pub fn from_codes(
        scheme: &FactorScheme,
        response_names: Vec<String>,
        responses: DMatrix<f64>,
        codes: &[Vec<usize>],
    ) -> Result<Self> {
        let factor_names = scheme.factors.iter().map(|f| f.name.clone()).collect();
        let values = codes
            .iter()
            .map(|c| {
                scheme
                    .factors
                    .iter()
                    .zip(c)
                    .map(|(f, &l)| f.levels[l].clone())
                    .collect()
            })
            .collect();
        Self::new(response_names, factor_names, responses, values)
    }

    pub fn n(&self) -> usize {
        self.responses.nrows()
    }

    pub fn p(&self) -> usize {
        self.responses.ncols()
    }

    pub fn with_responses(&self, responses: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.response_names.clone(),
            self.factor_names.clone(),
            responses,
            self.factor_values.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub levels: Vec<usize>,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Margin {
    pub levels: (usize, usize),
    pub rows: Vec<usize>,
}

/// Rows grouped by full cross-classification and by every two-way margin.
#[derive(Clone, Debug)]
pub struct GroupIndex {
    /// All potential cells in [`FactorScheme::all_cells`] order; empty
    /// cells are kept.
    pub cells: Vec<Cell>,
    pub cell_of_row: Vec<usize>,
    /// Keyed by factor pair `(i, j)`, `i < j`; margins in lexicographic
    /// level order, empty ones kept.
    pub margins: BTreeMap<(usize, usize), Vec<Margin>>,
}

impl GroupIndex {
    pub fn n_nonempty_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.rows.is_empty()).count()
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.rows.len()).collect()
    }
}

pub fn group_index(scheme: &FactorScheme, data: &Dataset) -> Result<GroupIndex> {
    Ok(group_index_from_codes(scheme, &scheme.encode(data)?))
}

pub fn group_index_from_codes(scheme: &FactorScheme, codes: &[Vec<usize>]) -> GroupIndex {
    let all = scheme.all_cells();
    let strides: Vec<usize> = {
        let mut s = vec![1; scheme.n_factors()];
        for i in (0..scheme.n_factors().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * scheme.factors[i + 1].n_levels();
        }
        s
    };
    let mut cells: Vec<Cell> = all
        .into_iter()
        .map(|levels| Cell {
            levels,
            rows: Vec::new(),
        })
        .collect();
    let mut cell_of_row = Vec::with_capacity(codes.len());
    for (r, c) in codes.iter().enumerate() {
        let idx: usize = c.iter().zip(&strides).map(|(l, s)| l * s).sum();
        cells[idx].rows.push(r);
        cell_of_row.push(idx);
    }
    let mut margins = BTreeMap::new();
    for (i, j) in scheme.factor_pairs() {
        let (li, lj) = (scheme.factors[i].n_levels(), scheme.factors[j].n_levels());
        let mut ms: Vec<Margin> = (0..li * lj)
            .map(|k| Margin {
                levels: (k / lj, k % lj),
                rows: Vec::new(),
            })
            .collect();
        for (r, c) in codes.iter().enumerate() {
            ms[c[i] * lj + c[j]].rows.push(r);
        }
        margins.insert((i, j), ms);
    }
    GroupIndex {
        cells,
        cell_of_row,
        margins,
    }
}

/// Column declarations for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub factors: Vec<FactorConfig>,
    pub responses: Vec<ResponseConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    pub name: String,
    /// CSV column; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub levels: Vec<String>,
    pub baseline: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default)]
    pub log: bool,
}

impl SchemaConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))
    }

    pub fn scheme(&self) -> Result<FactorScheme> {
        let factors = self
            .factors
            .iter()
            .map(|f| {
                let levels: Vec<&str> = f.levels.iter().map(String::as_str).collect();
                Factor::new(f.name.clone(), &levels, &f.baseline)
            })
            .collect::<Result<Vec<_>>>()?;
        FactorScheme::new(factors)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing: usize,
    pub dropped_unknown_level: usize,
    pub dropped_nonpositive: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_missing + self.dropped_unknown_level + self.dropped_nonpositive
    }
}

/// Reads a CSV with a header row. Rows with a missing or non-numeric
/// response, an unknown factor level, or a non-positive value in a
/// log-transformed column are dropped and counted.
pub fn load_csv(path: &Path, schema: &SchemaConfig) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|source| Error::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let scheme = schema.scheme()?;
    if schema.responses.len() < 2 {
        return Err(Error::SchemaMismatch(
            "at least two responses are required".into(),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |col: &str| {
        headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::SchemaMismatch(format!("missing column {col:?}")))
    };
    let factor_cols = schema
        .factors
        .iter()
        .map(|f| find(f.column.as_deref().unwrap_or(&f.name)))
        .collect::<Result<Vec<_>>>()?;
    let response_cols = schema
        .responses
        .iter()
        .map(|r| find(r.column.as_deref().unwrap_or(&r.name)))
        .collect::<Result<Vec<_>>>()?;

    let mut report = LoadReport::default();
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<Vec<String>> = Vec::new();
    'rows: for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        let mut row_labels = Vec::with_capacity(factor_cols.len());
        for (f, &c) in scheme.factors.iter().zip(&factor_cols) {
            let v = record.get(c).unwrap_or("");
            if f.level_index(v).is_none() {
                report.dropped_unknown_level += 1;
                continue 'rows;
            }
            row_labels.push(v.to_string());
        }
        let mut row = Vec::with_capacity(response_cols.len());
        for (r, &c) in schema.responses.iter().zip(&response_cols) {
            let Some(v) = record.get(c).and_then(|s| s.parse::<f64>().ok()) else {
                report.dropped_missing += 1;
                continue 'rows;
            };
            if !v.is_finite() {
                report.dropped_missing += 1;
                continue 'rows;
            }
            if r.log {
                if v <= 0.0 {
                    report.dropped_nonpositive += 1;
                    continue 'rows;
                }
                row.push(v.ln());
            } else {
                row.push(v);
            }
        }
        values.extend(row);
        labels.push(row_labels);
    }
    if labels.is_empty() {
        return Err(Error::AllRowsDropped(report.rows_read));
    }
    let p = schema.responses.len();
    let responses = DMatrix::from_row_slice(labels.len(), p, &values);
    let data = Dataset::new(
        schema.responses.iter().map(|r| r.name.clone()).collect(),
        scheme.factors.iter().map(|f| f.name.clone()).collect(),
        responses,
        labels,
    )?;
    Ok((data, report))
}

/// Mean, standard deviation (divisor `n − 1`) and count of one response
/// within one factor level. `sd` is `None` for fewer than two rows and
/// `mean` is `None` for none.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseStats {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalSummary {
    pub factor: String,
    pub level: String,
    pub n: usize,
    pub stats: Vec<ResponseStats>,
}

/// One-way marginal descriptive statistics for every level of every factor.
pub fn summarize(data: &Dataset, scheme: &FactorScheme) -> Result<Vec<MarginalSummary>> {
    let codes = scheme.encode(data)?;
    let mut out = Vec::new();
    for (fi, f) in scheme.factors.iter().enumerate() {
        for (li, label) in f.levels.iter().enumerate() {
            let rows: Vec<usize> = (0..data.n()).filter(|&r| codes[r][fi] == li).collect();
            let stats = (0..data.p())
                .map(|j| {
                    let xs: Vec<f64> = rows.iter().map(|&r| data.responses[(r, j)]).collect();
                    mean_sd(&xs)
                })
                .collect();
            out.push(MarginalSummary {
                factor: f.name.clone(),
                level: label.clone(),
                n: rows.len(),
                stats,
            });
        }
    }
    Ok(out)
}

fn mean_sd(xs: &[f64]) -> ResponseStats {
    if xs.is_empty() {
        return ResponseStats {
            mean: None,
            sd: None,
        };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    ResponseStats {
        mean: Some(mean),
        sd,
    }
}
