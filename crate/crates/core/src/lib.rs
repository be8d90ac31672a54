//! Robustness evaluation for tabular question answering.
//!
//! Tables are perturbed structurally (row/column swaps, transposes) and by
//! value (counterfactual, random, null, no table); predictions are scored
//! with EM, token-set F1, EM difference and variation percentage; and the
//! change in per-head attention entropy is rank-correlated with the change
//! in EM.

pub mod attention;
pub mod error;
pub mod metrics;
pub mod mock;
pub mod perturb;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod rng;
pub mod store;
pub mod table;

pub use attention::{
    aggregate_scatter, correlation_grid, entropy_delta, head_entropy_profile, rank_heads, row_entropy,
    spearman, AttentionTrace, CorrelationCell, CorrelationGrid, EntropyProfile, HeadGrid, RankCorrelation,
};
pub use error::{Error, Result};
pub use metrics::{
    aggregate, exact_match, f1, normalize_answer, variation_percentage, AggregateReport, ScoredPair,
};
pub use mock::{mock_predict, synth_trace, MockConfig};
pub use perturb::{
    apply_value_perturbation, column_swap, filter_instances, row_swap, transpose, transpose_col_swap,
    transpose_row_swap, PerturbationKind, PerturbedInstance, ScoringMode,
};
pub use prompt::{build_prompt, PromptSpec, TemplateRegistry};
pub use store::{fnv1a64, read_records, read_trace, write_records, write_trace, RunRecord};
pub use table::{cell_count, load_instances, parse_table, render_pipe, QaInstance, Table};
