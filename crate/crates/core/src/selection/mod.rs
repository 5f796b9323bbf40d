//! Mean-formula search by AIC, the pairwise Wishart-kernel discrepancy,
//! posterior predictive checks and forward covariance selection.

mod discrepancy;
mod search;

pub use discrepancy::{
    lower_tail_probability, pooled_covariance, ppc, sample_covariance, t_stat, tail_probability,
    DiscrepancyReport, ExcludedMargin, PairDiscrepancy, PpcData, TStat,
};
pub use search::{
    hierarchical_candidates, interaction_candidates, select_covariance, select_mean,
    CovSelectionConfig, CovarianceSelection, FinalModel, PairSummary, SelectionTrace, TraceEntry,
};
