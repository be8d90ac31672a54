//! Deterministic stand-ins for a model: a seeded answerer and a synthetic
//! attention-trace generator whose entropy grows with a dispersion knob.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionTrace};
use crate::perturb::{PerturbationKind, PerturbedInstance};
use crate::rng::{keyed_seed, SplitMix64};

/// What the mock model says when it gets an instance wrong.
pub const WRONG_ANSWER: &str = "no answer";

#[derive(Debug, Error, PartialEq)]
pub enum MockError {
    #[error("mock config has no {0} entry for kind {1}")]
    UnknownKind(&'static str, PerturbationKind),
    #[error("bad mock config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    BadShape(#[from] AttentionError),
}

fn default_model_id() -> String {
    "mock".to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceShape {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
}

impl Default for TraceShape {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            seq_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub seed: u64,
    pub base_accuracy: f64,
    pub severity_penalty: BTreeMap<PerturbationKind, f64>,
    pub dispersion: BTreeMap<PerturbationKind, f64>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub trace: TraceShape,
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), MockError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.base_accuracy) {
            return Err(MockError::InvalidConfig(format!(
                "base_accuracy {} outside [0, 1]",
                self.base_accuracy
            )));
        }
        if let Some((k, v)) = self.severity_penalty.iter().find(|(_, v)| !unit(**v)) {
            return Err(MockError::InvalidConfig(format!(
                "penalty {v} for {k} outside [0, 1]"
            )));
        }
        if let Some((k, v)) = self.dispersion.iter().find(|(_, v)| v.is_nan() || **v < 0.0) {
            return Err(MockError::InvalidConfig(format!(
                "dispersion {v} for {k} is negative"
            )));
        }
        Ok(())
    }

    /// Kinds covered by both maps, in reporting order.
    pub fn kinds(&self) -> Vec<PerturbationKind> {
        PerturbationKind::ALL
            .into_iter()
            .filter(|k| self.severity_penalty.contains_key(k) && self.dispersion.contains_key(k))
            .collect()
    }

    pub fn penalty(&self, kind: PerturbationKind) -> Result<f64, MockError> {
        self.severity_penalty
            .get(&kind)
            .copied()
            .ok_or(MockError::UnknownKind("severity_penalty", kind))
    }

    pub fn dispersion(&self, kind: PerturbationKind) -> Result<f64, MockError> {
        self.dispersion
            .get(&kind)
            .copied()
            .ok_or(MockError::UnknownKind("dispersion", kind))
    }
}

/// Answers with the scoring target with probability
/// `base_accuracy * (1 - penalty[kind])`.
///
/// The uniform draw is keyed by (seed, instance id) and shared by every kind
/// of the same instance, so a kind with a larger penalty is never answered
/// correctly where a kind with a smaller penalty was answered wrongly.
pub fn mock_predict(instance: &PerturbedInstance, config: &MockConfig) -> Result<String, MockError> {
    let penalty = config.penalty(instance.kind)?;
    let p_correct = config.base_accuracy * (1.0 - penalty);
    let key = format!("mock-answer\u{0}{}", instance.base_id);
    let draw = SplitMix64::new(keyed_seed(config.seed, &key)).next_f64();
    Ok(if draw < p_correct {
        instance.scoring_target[0].clone()
    } else {
        WRONG_ANSWER.to_owned()
    })
}

/// Rows are `(1 - w) * one_hot + w * uniform` with `w = d / (1 + d)`; the
/// hot key position is drawn per row from `seed`.
pub fn synth_trace(
    seq_len: usize,
    layers: usize,
    heads: usize,
    dispersion: f64,
    seed: u64,
) -> Result<AttentionTrace, MockError> {
    if dispersion.is_nan() || dispersion < 0.0 {
        return Err(AttentionError::BadShape(format!("dispersion {dispersion} must be >= 0")).into());
    }
    if seq_len == 0 || layers == 0 || heads == 0 {
        return Err(AttentionError::BadShape(format!(
            "layers={layers} heads={heads} seq_len={seq_len} must all be positive"
        ))
        .into());
    }
    let w = if dispersion.is_infinite() {
        1.0
    } else {
        dispersion / (1.0 + dispersion)
    };
    let base = (w / seq_len as f64) as f32;
    let peak = (1.0 - w + w / seq_len as f64) as f32;
    let mut rng = SplitMix64::new(seed);
    let rows = layers * heads * seq_len;
    let mut values = vec![base; rows * seq_len];
    for row in values.chunks_mut(seq_len) {
        row[rng.next_below(seq_len as u64) as usize] = peak;
    }
    Ok(AttentionTrace::new(layers, heads, seq_len, values, false)?)
}
