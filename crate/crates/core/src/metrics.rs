//! Answer normalization, EM / F1 scoring, and the robustness aggregates
//! (EM difference and variation percentage).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::perturb::PerturbationKind;

/// Bumped whenever `normalize_answer` changes behaviour.
pub const NORMALIZATION_VERSION: u32 = 1;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot compute a variation percentage over zero pairs")]
    EmptyInput,
    #[error("instance id sets differ between runs: {0}")]
    IdMismatch(String),
    #[error("duplicate scored pair for instance {0:?}")]
    DuplicateId(String),
}

fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    c.is_ascii_punctuation()
        || matches!(
            get_general_category(c),
            ConnectorPunctuation
                | DashPunctuation
                | OpenPunctuation
                | ClosePunctuation
                | InitialPunctuation
                | FinalPunctuation
                | OtherPunctuation
        )
}

/// NFKC fold, lowercase, punctuation to spaces, drop the articles
/// a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let folded: String = s
        .nfkc()
        .flat_map(char::to_lowercase)
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    folded
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when the normalized prediction equals some normalized target.
pub fn exact_match(pred: &str, targets: &[String]) -> u8 {
    let pred = normalize_answer(pred);
    u8::from(targets.iter().any(|t| normalize_answer(t) == pred))
}

fn token_set(normalized: &str) -> HashSet<&str> {
    normalized.split(' ').filter(|w| !w.is_empty()).collect()
}

fn set_f1(pred: &HashSet<&str>, target: &HashSet<&str>) -> f64 {
    match (pred.is_empty(), target.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = pred.intersection(target).count() as f64;
    let precision = common / pred.len() as f64;
    let recall = common / target.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Token-set F1 between the normalized prediction and each target; the best
/// target wins. Tokens are compared as sets, so repeats count once.
pub fn f1(pred: &str, targets: &[String]) -> f64 {
    let pred = normalize_answer(pred);
    let pred_set = token_set(&pred);
    targets
        .iter()
        .map(|t| {
            let t = normalize_answer(t);
            set_f1(&pred_set, &token_set(&t))
        })
        .fold(0.0, f64::max)
}

/// `em_perturbed - em_original`.
pub fn emd(em_perturbed: f64, em_original: f64) -> f64 {
    em_perturbed - em_original
}

/// Counts of correct→wrong and wrong→correct flips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub n: usize,
    pub c2w: usize,
    pub w2c: usize,
}

impl FlipCounts {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> Self {
        pairs.iter().fold(
            FlipCounts {
                n: pairs.len(),
                ..Default::default()
            },
            |mut acc, &(orig, pert)| {
                match (orig, pert) {
                    (1, 0) => acc.c2w += 1,
                    (0, 1) => acc.w2c += 1,
                    _ => {}
                }
                acc
            },
        )
    }
}

/// `(C2W + W2C) / N` over aligned (original, perturbed) EM pairs.
pub fn variation_percentage(pairs: &[(u8, u8)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let c = FlipCounts::from_pairs(pairs);
    Ok((c.c2w + c.w2c) as f64 / c.n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub instance_id: String,
    pub kind: PerturbationKind,
    pub em: u8,
    pub f1: f64,
}

pub fn score(instance_id: &str, kind: PerturbationKind, prediction: &str, targets: &[String]) -> ScoredPair {
    ScoredPair {
        instance_id: instance_id.to_owned(),
        kind,
        em: exact_match(prediction, targets),
        f1: f1(prediction, targets),
    }
}

/// Aggregates for one perturbation kind against the original run.
/// `emd` and `vp` are absent on the Original row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub kind: PerturbationKind,
    pub n: usize,
    pub em_mean: f64,
    pub f1_mean: f64,
    pub emd: Option<f64>,
    pub vp: Option<f64>,
    pub c2w: usize,
    pub w2c: usize,
}

fn index_by_id(run: &[ScoredPair]) -> Result<BTreeMap<&str, &ScoredPair>, MetricsError> {
    let mut map = BTreeMap::new();
    for p in run {
        if map.insert(p.instance_id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateId(p.instance_id.clone()));
        }
    }
    Ok(map)
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Report for the original run alone.
pub fn original_report(original: &[ScoredPair]) -> Result<AggregateReport, MetricsError> {
    index_by_id(original)?;
    let n = original.len();
    Ok(AggregateReport {
        kind: PerturbationKind::Original,
        n,
        em_mean: mean(original.iter().map(|p| f64::from(p.em)), n),
        f1_mean: mean(original.iter().map(|p| p.f1), n),
        emd: None,
        vp: None,
        c2w: 0,
        w2c: 0,
    })
}

/// Compares a perturbed run with the original run over the same instances.
///
/// EMd is computed from the flip counts, `(W2C - C2W) / N`, which is
/// algebraically equal to the difference of the two EM means and avoids
/// cancellation error.
pub fn aggregate(original: &[ScoredPair], perturbed: &[ScoredPair]) -> Result<AggregateReport, MetricsError> {
    let orig = index_by_id(original)?;
    let pert = index_by_id(perturbed)?;
    if let Some(id) = orig
        .keys()
        .find(|k| !pert.contains_key(*k))
        .or_else(|| pert.keys().find(|k| !orig.contains_key(*k)))
    {
        return Err(MetricsError::IdMismatch(format!("{id:?} is not in both runs")));
    }
    let kind = perturbed.first().map_or(PerturbationKind::Original, |p| p.kind);
    let n = perturbed.len();
    if n == 0 {
        return Ok(AggregateReport {
            kind,
            n,
            em_mean: 0.0,
            f1_mean: 0.0,
            emd: None,
            vp: None,
            c2w: 0,
            w2c: 0,
        });
    }
    let pairs: Vec<(u8, u8)> = orig.iter().map(|(id, o)| (o.em, pert[id].em)).collect();
    let flips = FlipCounts::from_pairs(&pairs);
    Ok(AggregateReport {
        kind,
        n,
        em_mean: mean(perturbed.iter().map(|p| f64::from(p.em)), n),
        f1_mean: mean(perturbed.iter().map(|p| p.f1), n),
        emd: Some((flips.w2c as f64 - flips.c2w as f64) / n as f64),
        vp: Some(variation_percentage(&pairs)?),
        c2w: flips.c2w,
        w2c: flips.w2c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> Vec<String> {
        vec![v.to_owned()]
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("Bangkok, Thailand"), "bangkok thailand");
        assert_eq!(normalize_answer("The 42"), "42");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  An  apple—pie! "), "apple pie");
        // Full-width digits fold under NFKC.
        assert_eq!(normalize_answer("\u{FF14}\u{FF12}"), "42");
        assert_eq!(normalize_answer("«Théâtre»"), "théâtre");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Bangkok", &s("Bangkok")), 1);
        assert_eq!(exact_match("bangkok, THAILAND.", &s("Bangkok, Thailand")), 1);
        assert_eq!(exact_match("Paris", &s("Bangkok")), 0);
        assert_eq!(exact_match("x", &["y".into(), "X".into()]), 1);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1("Bangkok", &s("Bangkok, Thailand")), 2.0 / 3.0);
        assert_eq!(f1("same words here", &s("same words here")), 1.0);
        assert_eq!(f1("alpha beta", &s("gamma delta")), 0.0);
        assert_eq!(f1("", &s("")), 1.0);
        assert_eq!(f1("the", &s("")), 1.0);
        assert_eq!(f1("", &s("x")), 0.0);
        assert_eq!(f1("x", &s("")), 0.0);
    }

    #[test]
    fn f1_uses_sets() {
        // Multiset F1 would give 2/3 here.
        assert_eq!(f1("paris paris", &s("paris")), 1.0);
    }

    #[test]
    fn f1_takes_best_target() {
        assert_eq!(f1("Bangkok", &["Beijing".into(), "Bangkok".into()]), 1.0);
    }

    #[test]
    fn emd_examples() {
        assert!((emd(0.05, 0.37) - (-0.32)).abs() < 1e-12);
        assert_eq!(emd(0.4, 0.4), 0.0);
        assert_eq!(emd(1.0, 0.0), 1.0);
    }

    #[test]
    fn vp_examples() {
        assert_eq!(variation_percentage(&[(1, 0), (0, 1), (1, 1), (0, 0)]), Ok(0.5));
        assert_eq!(variation_percentage(&[(1, 1), (0, 0)]), Ok(0.0));
        assert_eq!(variation_percentage(&[(1, 0), (0, 1)]), Ok(1.0));
        assert_eq!(variation_percentage(&[]), Err(MetricsError::EmptyInput));
    }

    fn run(kind: PerturbationKind, ems: &[u8]) -> Vec<ScoredPair> {
        ems.iter()
            .enumerate()
            .map(|(i, &em)| ScoredPair {
                instance_id: format!("i{i}"),
                kind,
                em,
                f1: f64::from(em),
            })
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let orig = run(PerturbationKind::Original, &[1, 1, 0, 0]);
        let same = run(PerturbationKind::RowSwap, &[1, 1, 0, 0]);
        let r = aggregate(&orig, &same).unwrap();
        assert_eq!((r.emd, r.vp), (Some(0.0), Some(0.0)));

        let pert = run(PerturbationKind::RowSwap, &[1, 0, 0, 1]);
        let r = aggregate(&orig, &pert).unwrap();
        assert_eq!(original_report(&orig).unwrap().em_mean, 0.5);
        assert_eq!(r.em_mean, 0.5);
        assert_eq!(r.emd, Some(0.0));
        assert_eq!(r.vp, Some(0.5));
        assert_eq!((r.c2w, r.w2c), (1, 1));
    }

    #[test]
    fn aggregate_rejects_disjoint_ids() {
        let orig = run(PerturbationKind::Original, &[1, 0]);
        let mut pert = run(PerturbationKind::Nt, &[1, 0]);
        pert[1].instance_id = "other".into();
        assert!(matches!(
            aggregate(&orig, &pert),
            Err(MetricsError::IdMismatch(_))
        ));
    }
}
