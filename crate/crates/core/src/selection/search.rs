use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::discrepancy::{ppc, DiscrepancyReport, PpcData};
use crate::design::{DesignMatrix, FactorScheme, Formula, GroupIndex};
use crate::error::{Error, Result};
use crate::estimation::{aic, fit_gibbs, fit_homoscedastic, ChainConfig, PosteriorDraws, Priors};
use crate::stochastics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairSummary {
    pub pair: String,
    pub observed: f64,
    pub tail_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub mean_formula: String,
    pub cov_formula: Option<String>,
    pub rank: Option<usize>,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub aic: Option<f64>,
    pub discrepancy: Vec<PairSummary>,
    pub accepted: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalModel {
    pub mean_formula: String,
    pub cov_formula: Option<String>,
    pub rank: Option<usize>,
    pub no_acceptable_model: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub stage: String,
    pub entries: Vec<TraceEntry>,
    pub final_model: FinalModel,
}

impl SelectionTrace {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Main effects of every factor plus each subset of two-way interactions,
/// ordered by subset bitmask over [`FactorScheme::factor_pairs`].
pub fn interaction_candidates(scheme: &FactorScheme) -> Vec<Formula> {
    let mains = Formula::main_effects_of(scheme);
    let pairs = scheme.factor_pairs();
    (0..1usize << pairs.len())
        .map(|mask| subset_formula(scheme, &mains.main_effects, &pairs, mask))
        .collect()
}

/// Every hierarchical formula: any subset of main effects together with
/// any subset of the interactions among the chosen factors.
pub fn hierarchical_candidates(scheme: &FactorScheme) -> Vec<Formula> {
    let k = scheme.n_factors();
    let mut out = Vec::new();
    for main_mask in 0..1usize << k {
        let chosen: Vec<usize> = (0..k).filter(|i| main_mask >> i & 1 == 1).collect();
        let names: Vec<String> = chosen
            .iter()
            .map(|&i| scheme.factors()[i].name.clone())
            .collect();
        let pairs: Vec<(usize, usize)> = scheme
            .factor_pairs()
            .into_iter()
            .filter(|(i, j)| chosen.contains(i) && chosen.contains(j))
            .collect();
        for mask in 0..1usize << pairs.len() {
            out.push(subset_formula(scheme, &names, &pairs, mask));
        }
    }
    out
}

fn subset_formula(
    scheme: &FactorScheme,
    mains: &[String],
    pairs: &[(usize, usize)],
    mask: usize,
) -> Formula {
    let name = |i: usize| scheme.factors()[i].name.clone();
    Formula {
        main_effects: mains.to_vec(),
        interactions: pairs
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &(i, j))| (name(i), name(j)))
            .collect(),
    }
}

/// AIC search over mean formulas under a homoscedastic covariance.
///
/// Entries are sorted by AIC (stable, so ties keep candidate order);
/// candidates with degenerate designs are listed last with a note.
pub fn select_mean(
    y: &DMatrix<f64>,
    scheme: &FactorScheme,
    codes: &[Vec<usize>],
    candidates: &[Formula],
) -> Result<SelectionTrace> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate mean formulas".into()));
    }
    let fits: Vec<TraceEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(step, f)| {
            let design = f.resolve(scheme)?.design(scheme, codes);
            let mut entry = TraceEntry {
                step,
                mean_formula: f.to_string(),
                cov_formula: None,
                rank: None,
                loglik: None,
                n_params: None,
                aic: None,
                discrepancy: Vec::new(),
                accepted: false,
                note: None,
            };
            match fit_homoscedastic(y, &design) {
                Ok(fit) => {
                    entry.loglik = Some(fit.loglik);
                    entry.n_params = Some(fit.n_params);
                    entry.aic = Some(aic(fit.loglik, fit.n_params));
                }
                Err(e @ Error::DegenerateDesign(_)) => entry.note = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let (mut scored, skipped): (Vec<_>, Vec<_>) = fits.into_iter().partition(|e| e.aic.is_some());
    if scored.is_empty() {
        return Err(Error::DegenerateDesign(
            "every candidate mean design is rank deficient".into(),
        ));
    }
    scored.sort_by(|a, b| a.aic.unwrap().total_cmp(&b.aic.unwrap()));
    scored[0].accepted = true;
    let final_model = FinalModel {
        mean_formula: scored[0].mean_formula.clone(),
        cov_formula: None,
        rank: None,
        no_acceptable_model: false,
    };
    scored.extend(skipped);
    Ok(SelectionTrace {
        stage: "mean".into(),
        entries: scored,
        final_model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovSelectionConfig {
    pub max_rank: usize,
    /// A pair fails when its upper tail probability is below this.
    pub threshold: f64,
    /// Lack of fit is general when at least this fraction of pairs fail.
    pub general_fraction: f64,
    pub n_reps: usize,
    pub chain: ChainConfig,
    pub priors: Priors,
}

impl Default for CovSelectionConfig {
    fn default() -> Self {
        Self {
            max_rank: 2,
            threshold: 0.025,
            general_fraction: 0.5,
            n_reps: 200,
            chain: ChainConfig::default(),
            priors: Priors::default(),
        }
    }
}

/// Result of forward covariance selection: the trace, one discrepancy
/// report per step, and the draws of the final model.
#[derive(Clone, Debug)]
pub struct CovarianceSelection {
    pub trace: SelectionTrace,
    pub reports: Vec<DiscrepancyReport>,
    pub final_draws: PosteriorDraws,
}

/// Forward selection over covariance formulas and rank.
///
/// Starts from rank 1 with all main effects. After each Gibbs fit and
/// predictive check, a model with no failing pair is accepted. If lack of
/// fit is general and the rank can grow, the rank is incremented and the
/// covariance formula reset to main effects. Otherwise the interaction of
/// the worst failing pair not yet in the formula is added; if none can be
/// added the rank grows, and at maximum rank the search stops flagged.
/// Step `t` fits on stream `2t` and checks on stream `2t + 1` of `seed`.
pub fn select_covariance(
    y: &DMatrix<f64>,
    scheme: &FactorScheme,
    codes: &[Vec<usize>],
    mean_formula: &Formula,
    config: &CovSelectionConfig,
    seed: u64,
) -> Result<CovarianceSelection> {
    let p = y.ncols();
    if config.max_rank == 0 || config.max_rank > p {
        return Err(Error::InvalidConfig(format!(
            "maximum rank {} must lie in 1..={p}",
            config.max_rank
        )));
    }
    if config.n_reps == 0 || config.n_reps > config.chain.samples {
        return Err(Error::InvalidConfig(format!(
            "replicate count {} must lie in 1..={}",
            config.n_reps, config.chain.samples
        )));
    }
    let index: GroupIndex = crate::design::group_index_from_codes(scheme, codes);
    let mean_formula = mean_formula.canonical(scheme)?;
    let design1 = mean_formula.resolve(scheme)?.design(scheme, codes);
    design1.check_full_rank()?;
    let mains = Formula::main_effects_of(scheme);
    let n_pairs = scheme.factor_pairs().len();

    let mut rank = 1;
    let mut cov = mains.clone();
    let mut entries = Vec::new();
    let mut reports = Vec::new();
    let mut step = 0;
    loop {
        let design2: DesignMatrix = cov.resolve(scheme)?.design(scheme, codes);
        let mut rng = RngStream::new(seed, 2 * step as u64);
        let mut draws = fit_gibbs(
            y,
            &design1,
            &design2,
            rank,
            &config.priors,
            &config.chain,
            &mut rng,
        )?;
        draws.mean_formula = Some(mean_formula.to_string());
        draws.cov_formula = Some(cov.to_string());
        let data = PpcData {
            scheme,
            index: &index,
            y,
            design1: &design1,
            design2: &design2,
        };
        let report = ppc(
            &draws,
            data,
            config.n_reps,
            &RngStream::new(seed, 2 * step as u64 + 1),
        )?;
        let failing = report.failing(config.threshold);
        let mut entry = TraceEntry {
            step,
            mean_formula: mean_formula.to_string(),
            cov_formula: Some(cov.to_string()),
            rank: Some(rank),
            loglik: None,
            n_params: None,
            aic: None,
            discrepancy: report
                .pairs
                .iter()
                .map(|pd| PairSummary {
                    pair: pd.label.clone(),
                    observed: pd.observed,
                    tail_probability: pd.tail_probability,
                })
                .collect(),
            accepted: failing.is_empty(),
            note: None,
        };
        let finish = |entries: Vec<TraceEntry>, reports, no_acceptable_model| {
            let last: &TraceEntry = entries.last().unwrap();
            let final_model = FinalModel {
                mean_formula: last.mean_formula.clone(),
                cov_formula: last.cov_formula.clone(),
                rank: last.rank,
                no_acceptable_model,
            };
            CovarianceSelection {
                trace: SelectionTrace {
                    stage: "covariance".into(),
                    entries,
                    final_model,
                },
                reports,
                final_draws: draws,
            }
        };
        if failing.is_empty() {
            entries.push(entry);
            reports.push(report);
            return Ok(finish(entries, reports, false));
        }
        let general = failing.len() as f64 >= config.general_fraction * n_pairs as f64;
        let mut next: Option<(usize, Formula, String)> = None;
        if general && rank < config.max_rank {
            next = Some((
                rank + 1,
                mains.clone(),
                "general lack of fit: rank increased".into(),
            ));
        } else {
            let mut ordered = failing.clone();
            ordered.sort_by(|a, b| {
                a.tail_probability
                    .total_cmp(&b.tail_probability)
                    .then(b.z_score().total_cmp(&a.z_score()))
            });
            for pd in ordered {
                let (a, b) = (
                    &scheme.factors()[pd.pair.0].name,
                    &scheme.factors()[pd.pair.1].name,
                );
                if cov.has_interaction(a, b) {
                    continue;
                }
                let candidate = cov.with_interaction(a, b)?.canonical(scheme)?;
                let d = candidate.resolve(scheme)?.design(scheme, codes);
                if d.check_full_rank().is_ok() {
                    next = Some((rank, candidate, format!("added {}", pd.label)));
                    break;
                }
            }
            if next.is_none() && rank < config.max_rank {
                next = Some((
                    rank + 1,
                    mains.clone(),
                    "no interaction to add: rank increased".into(),
                ));
            }
        }
        match next {
            Some((r, f, note)) => {
                entry.note = Some(note);
                entries.push(entry);
                reports.push(report);
                rank = r;
                cov = f;
                step += 1;
            }
            None => {
                entry.note = Some("no acceptable model".into());
                entries.push(entry);
                reports.push(report);
                return Ok(finish(entries, reports, true));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Factor;
    use crate::estimation::homoscedastic_param_count;
    use crate::stochastics::standard_normal_vector;

    fn scheme() -> FactorScheme {
        FactorScheme::new(vec![
            Factor::new("G", &["m", "f"], "m").unwrap(),
            Factor::new("A", &["a1", "a2", "a3"], "a1").unwrap(),
            Factor::new("R", &["r1", "r2", "r3"], "r1").unwrap(),
        ])
        .unwrap()
    }

    fn balanced_codes(s: &FactorScheme, per_cell: usize) -> Vec<Vec<usize>> {
        s.all_cells()
            .into_iter()
            .flat_map(|c| std::iter::repeat_n(c, per_cell))
            .collect()
    }

    fn simulate_mean(
        s: &FactorScheme,
        codes: &[Vec<usize>],
        formula: &Formula,
        seed: u64,
    ) -> DMatrix<f64> {
        let resolved = formula.resolve(s).unwrap();
        let x = resolved.design(s, codes).matrix;
        let mut rng = RngStream::new(seed, 0);
        let b = DMatrix::from_fn(3, x.ncols(), |_, _| rng.standard_normal());
        let mut y = &x * b.transpose();
        for i in 0..y.nrows() {
            let e = standard_normal_vector(3, &mut rng);
            for j in 0..3 {
                y[(i, j)] += e[j];
            }
        }
        y
    }

    #[test]
    fn candidate_counts() {
        let s = scheme();
        assert_eq!(interaction_candidates(&s).len(), 8);
        // 1 + 3 + 3·2 + 8.
        assert_eq!(hierarchical_candidates(&s).len(), 18);
        let four = FactorScheme::new(vec![
            Factor::new("GENDER", &["m", "f"], "m").unwrap(),
            Factor::new("AGE", &["1", "2", "3", "4"], "1").unwrap(),
            Factor::new("RACE", &["1", "2", "3", "4", "5"], "1").unwrap(),
            Factor::new("EDU", &["1", "2", "3", "4", "5"], "1").unwrap(),
        ])
        .unwrap();
        let cands = interaction_candidates(&four);
        assert_eq!(cands.len(), 64);
        assert_eq!(hierarchical_candidates(&four).len(), 113);
        let target = Formula::parse(
            "GENDER + AGE + RACE + EDU + GENDER*AGE + GENDER*RACE + GENDER*EDU + AGE*RACE",
        )
        .unwrap()
        .canonical(&four)
        .unwrap();
        assert!(cands.iter().any(|c| c.canonical(&four).unwrap() == target));
    }

    #[test]
    fn aic_matches_independent_formula() {
        let s = scheme();
        let codes = balanced_codes(&s, 20);
        let y = simulate_mean(&s, &codes, &Formula::parse("G + A").unwrap(), 1);
        let trace = select_mean(&y, &s, &codes, &hierarchical_candidates(&s)).unwrap();
        for e in &trace.entries {
            let f = Formula::parse(&e.mean_formula).unwrap();
            let q1 = f.n_columns(&s).unwrap();
            let fit = fit_homoscedastic(&y, &f.resolve(&s).unwrap().design(&s, &codes)).unwrap();
            let expected = -2.0 * fit.loglik + 2.0 * (3 * q1 + 6) as f64;
            assert_eq!(homoscedastic_param_count(3, q1), 3 * q1 + 6);
            assert!((e.aic.unwrap() - expected).abs() < 1e-9);
        }
        for w in trace.entries.windows(2) {
            assert!(w[0].aic.unwrap() <= w[1].aic.unwrap());
        }
        assert!(trace.entries[0].accepted);
        assert_eq!(
            trace.final_model.mean_formula,
            trace.entries[0].mean_formula
        );
        assert_eq!(trace.final_model.mean_formula, "G + A");
    }

    #[test]
    fn tie_keeps_first_listed() {
        let s = scheme();
        let codes = balanced_codes(&s, 10);
        let y = simulate_mean(&s, &codes, &Formula::parse("G").unwrap(), 2);
        let a = Formula::parse("G + A").unwrap();
        let b = Formula::parse("A + G").unwrap();
        let trace = select_mean(&y, &s, &codes, &[a, b]).unwrap();
        assert_eq!(trace.entries[0].aic, trace.entries[1].aic);
        assert_eq!(trace.entries[0].mean_formula, "G + A");
        assert_eq!(trace.final_model.mean_formula, "G + A");
    }

    #[test]
    fn degenerate_candidates_skipped() {
        let s = scheme();
        // Level r3 never observed: any formula with R is rank deficient.
        let codes: Vec<Vec<usize>> = balanced_codes(&s, 10)
            .into_iter()
            .filter(|c| c[2] != 2)
            .collect();
        let y = simulate_mean(&s, &codes, &Formula::parse("G").unwrap(), 3);
        let trace = select_mean(
            &y,
            &s,
            &codes,
            &[
                Formula::parse("G + R").unwrap(),
                Formula::parse("G").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(trace.final_model.mean_formula, "G");
        assert!(trace.entries[1].note.is_some());
        assert!(trace.entries[1].aic.is_none());
    }
}
