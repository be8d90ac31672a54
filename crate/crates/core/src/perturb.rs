//! Structural and value perturbations of tables, and dataset filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{keyed_seed, non_identity_permutation};
use crate::table::{cell_count, QaInstance, Table};

/// Literal written into answer cells by the random-value perturbation.
pub const RANDOM_VALUE: &str = "r@nD0m v@1u3";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("instance {0:?}: no table cell equals a gold answer")]
    AnswerNotInTable(String),
    #[error("instance {0:?}: DVP requires a counterfactual answer")]
    MissingCounterfactual(String),
    #[error("instance {0:?}: instance has no table to perturb")]
    MissingTable(String),
    #[error("unknown perturbation kind {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "col")]
    ColumnSwap,
    #[serde(rename = "row")]
    RowSwap,
    #[serde(rename = "transpose")]
    Transpose,
    #[serde(rename = "trow")]
    TransposeRowSwap,
    #[serde(rename = "tcol")]
    TransposeColSwap,
    #[serde(rename = "nt")]
    Nt,
    #[serde(rename = "dvp")]
    Dvp,
    #[serde(rename = "rvp")]
    Rvp,
    #[serde(rename = "nvp")]
    Nvp,
}

impl PerturbationKind {
    /// Reporting order: Original, the structural kinds, then the value kinds.
    pub const ALL: [PerturbationKind; 10] = [
        PerturbationKind::Original,
        PerturbationKind::ColumnSwap,
        PerturbationKind::RowSwap,
        PerturbationKind::Transpose,
        PerturbationKind::TransposeRowSwap,
        PerturbationKind::TransposeColSwap,
        PerturbationKind::Nt,
        PerturbationKind::Dvp,
        PerturbationKind::Rvp,
        PerturbationKind::Nvp,
    ];

    pub const STRUCTURAL: [PerturbationKind; 5] = [
        PerturbationKind::RowSwap,
        PerturbationKind::ColumnSwap,
        PerturbationKind::Transpose,
        PerturbationKind::TransposeRowSwap,
        PerturbationKind::TransposeColSwap,
    ];

    /// Short name used on the command line and in files.
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Original => "original",
            PerturbationKind::ColumnSwap => "col",
            PerturbationKind::RowSwap => "row",
            PerturbationKind::Transpose => "transpose",
            PerturbationKind::TransposeRowSwap => "trow",
            PerturbationKind::TransposeColSwap => "tcol",
            PerturbationKind::Nt => "nt",
            PerturbationKind::Dvp => "dvp",
            PerturbationKind::Rvp => "rvp",
            PerturbationKind::Nvp => "nvp",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            PerturbationKind::Original => "Original",
            PerturbationKind::ColumnSwap => "Column",
            PerturbationKind::RowSwap => "Row",
            PerturbationKind::Transpose => "Transpose",
            PerturbationKind::TransposeRowSwap => "Transpose Row",
            PerturbationKind::TransposeColSwap => "Transpose Col",
            PerturbationKind::Nt => "NT",
            PerturbationKind::Dvp => "DVP",
            PerturbationKind::Rvp => "RVP",
            PerturbationKind::Nvp => "NVP",
        }
    }

    pub fn is_structural(self) -> bool {
        Self::STRUCTURAL.contains(&self)
    }

    pub fn is_value(self) -> bool {
        matches!(
            self,
            PerturbationKind::Dvp | PerturbationKind::Rvp | PerturbationKind::Nvp | PerturbationKind::Nt
        )
    }

    /// Kinds whose output depends on a seed.
    pub fn is_seeded(self) -> bool {
        matches!(
            self,
            PerturbationKind::RowSwap
                | PerturbationKind::ColumnSwap
                | PerturbationKind::TransposeRowSwap
                | PerturbationKind::TransposeColSwap
        )
    }

    fn order(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, PerturbError> {
        let k = match s.trim().to_ascii_lowercase().as_str() {
            "original" | "orig" => PerturbationKind::Original,
            "col" | "column" | "columnswap" | "column_swap" => PerturbationKind::ColumnSwap,
            "row" | "rowswap" | "row_swap" => PerturbationKind::RowSwap,
            "transpose" => PerturbationKind::Transpose,
            "trow" | "transpose_row_swap" => PerturbationKind::TransposeRowSwap,
            "tcol" | "transpose_col_swap" => PerturbationKind::TransposeColSwap,
            "nt" => PerturbationKind::Nt,
            "dvp" => PerturbationKind::Dvp,
            "rvp" => PerturbationKind::Rvp,
            "nvp" => PerturbationKind::Nvp,
            _ => return Err(PerturbError::UnknownKind(s.to_owned())),
        };
        Ok(k)
    }
}

/// Sorts kinds into reporting order.
pub fn sort_kinds(kinds: &mut [PerturbationKind]) {
    kinds.sort_by_key(|k| k.order());
}

/// Grid transpose with the header counted as row 0: the first column of the
/// input becomes the new header.
pub fn transpose(table: &Table) -> Table {
    let grid: Vec<&[String]> = table.grid().collect();
    let columns = table.num_columns();
    let transposed: Vec<Vec<String>> = (0..columns)
        .map(|j| grid.iter().map(|row| row[j].clone()).collect())
        .collect();
    Table::from_grid(transposed).expect("transpose of a rectangular grid is rectangular")
}

/// Permutes body rows with a non-identity SplitMix64/Fisher–Yates
/// permutation. The header never moves.
pub fn row_swap(table: &Table, seed: u64) -> Table {
    let perm = non_identity_permutation(table.num_rows(), seed);
    let rows = perm.iter().map(|&i| table.rows()[i].clone()).collect();
    Table::new(table.header().to_vec(), rows).expect("row permutation keeps shape")
}

/// Applies one non-identity column permutation to the header and every row.
pub fn column_swap(table: &Table, seed: u64) -> Table {
    let perm = non_identity_permutation(table.num_columns(), seed);
    let pick = |row: &[String]| perm.iter().map(|&j| row[j].clone()).collect::<Vec<_>>();
    Table::new(
        pick(table.header()),
        table.rows().iter().map(|r| pick(r)).collect(),
    )
    .expect("column permutation keeps shape")
}

pub fn transpose_row_swap(table: &Table, seed: u64) -> Table {
    row_swap(&transpose(table), seed)
}

pub fn transpose_col_swap(table: &Table, seed: u64) -> Table {
    column_swap(&transpose(table), seed)
}

/// Applies a structural kind. `Original` returns a copy; value kinds are
/// not structural and return `None`.
pub fn apply_structural(table: &Table, kind: PerturbationKind, seed: u64) -> Option<Table> {
    Some(match kind {
        PerturbationKind::Original => table.clone(),
        PerturbationKind::RowSwap => row_swap(table, seed),
        PerturbationKind::ColumnSwap => column_swap(table, seed),
        PerturbationKind::Transpose => transpose(table),
        PerturbationKind::TransposeRowSwap => transpose_row_swap(table, seed),
        PerturbationKind::TransposeColSwap => transpose_col_swap(table, seed),
        _ => return None,
    })
}

/// Which answers a value-perturbed instance is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoringMode {
    /// DVP/RVP score against the substituted value.
    #[default]
    Substituted,
    /// Every kind scores against the original gold answers.
    Original,
}

/// Answers a prediction for `kind` is scored against.
pub fn scoring_target(
    instance: &QaInstance,
    kind: PerturbationKind,
    mode: ScoringMode,
) -> Result<Vec<String>, PerturbError> {
    match (kind, mode) {
        (PerturbationKind::Dvp, ScoringMode::Substituted) => instance
            .counterfactual
            .clone()
            .map(|c| vec![c])
            .ok_or_else(|| PerturbError::MissingCounterfactual(instance.id.clone())),
        (PerturbationKind::Rvp, ScoringMode::Substituted) => Ok(vec![RANDOM_VALUE.to_owned()]),
        _ => Ok(instance.gold.clone()),
    }
}

/// A perturbed view of an instance together with what it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedInstance {
    pub base_id: String,
    pub kind: PerturbationKind,
    pub seed: Option<u64>,
    pub table: Option<Table>,
    pub question: String,
    pub scoring_target: Vec<String>,
}

impl PerturbedInstance {
    /// Identifier of the perturbed record in output datasets.
    pub fn output_id(&self) -> String {
        output_id(&self.base_id, self.kind)
    }
}

pub fn output_id(base_id: &str, kind: PerturbationKind) -> String {
    if kind == PerturbationKind::Original {
        base_id.to_owned()
    } else {
        format!("{base_id}#{}", kind.name())
    }
}

/// Value perturbations (DVP, RVP, NVP, NT). Only cells byte-equal to a gold
/// answer are rewritten.
pub fn apply_value_perturbation(
    instance: &QaInstance,
    kind: PerturbationKind,
) -> Result<PerturbedInstance, PerturbError> {
    apply_value_perturbation_with(instance, kind, ScoringMode::Substituted)
}

pub fn apply_value_perturbation_with(
    instance: &QaInstance,
    kind: PerturbationKind,
    mode: ScoringMode,
) -> Result<PerturbedInstance, PerturbError> {
    let replacement = match kind {
        PerturbationKind::Nt => None,
        PerturbationKind::Dvp => Some(
            instance
                .counterfactual
                .clone()
                .ok_or_else(|| PerturbError::MissingCounterfactual(instance.id.clone()))?,
        ),
        PerturbationKind::Rvp => Some(RANDOM_VALUE.to_owned()),
        PerturbationKind::Nvp => Some(String::new()),
        other => {
            return Err(PerturbError::UnknownKind(format!(
                "{other} is not a value perturbation"
            )))
        }
    };
    let table = match replacement {
        None => None,
        Some(value) => {
            let table = instance
                .table
                .as_ref()
                .ok_or_else(|| PerturbError::MissingTable(instance.id.clone()))?;
            if !instance.answer_in_table() {
                return Err(PerturbError::AnswerNotInTable(instance.id.clone()));
            }
            let is_gold = |c: &str| instance.gold.iter().any(|g| g == c);
            Some(table.map_cells(|c| if is_gold(c) { value.clone() } else { c.to_owned() }))
        }
    };
    Ok(PerturbedInstance {
        base_id: instance.id.clone(),
        kind,
        seed: None,
        table,
        question: instance.question.clone(),
        scoring_target: scoring_target(instance, kind, mode)?,
    })
}

/// Applies any kind. Seeded kinds draw their per-instance seed from
/// `run_seed` and the instance id, so adding instances never reshuffles
/// existing ones.
pub fn perturb_instance(
    instance: &QaInstance,
    kind: PerturbationKind,
    run_seed: u64,
    mode: ScoringMode,
) -> Result<PerturbedInstance, PerturbError> {
    if kind.is_value() {
        return apply_value_perturbation_with(instance, kind, mode);
    }
    let table = instance
        .table
        .as_ref()
        .ok_or_else(|| PerturbError::MissingTable(instance.id.clone()))?;
    let seed = kind
        .is_seeded()
        .then(|| instance_seed(run_seed, &instance.id, kind));
    let table = apply_structural(table, kind, seed.unwrap_or(0)).expect("structural kind");
    Ok(PerturbedInstance {
        base_id: instance.id.clone(),
        kind,
        seed,
        table: Some(table),
        question: instance.question.clone(),
        scoring_target: scoring_target(instance, kind, mode)?,
    })
}

/// Per-instance seed for a seeded kind.
pub fn instance_seed(run_seed: u64, instance_id: &str, kind: PerturbationKind) -> u64 {
    keyed_seed(run_seed, &format!("{instance_id}\u{0}{}", kind.name()))
}

/// Keeps instances whose table has fewer than `cap` cells and, optionally,
/// contains a gold answer verbatim. Table-less instances are dropped.
pub fn filter_instances(
    instances: &[QaInstance],
    cap: usize,
    require_answer_in_table: bool,
) -> Vec<QaInstance> {
    instances
        .iter()
        .filter(|inst| {
            inst.table.as_ref().is_some_and(|t| cell_count(t) < cap)
                && (!require_answer_in_table || inst.answer_in_table())
        })
        .cloned()
        .collect()
}
