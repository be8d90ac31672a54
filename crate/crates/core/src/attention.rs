//! Attention entropy and its rank correlation with EM differences.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::perturb::PerturbationKind;

/// Allowed deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Largest sample size that gets an exact permutation p-value.
pub const EXACT_P_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLocation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
}

impl fmt::Display for RowLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} head {} row {}", self.layer, self.head, self.row)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("not a probability vector{}: {reason}", .location.map(|l| format!(" at {l}")).unwrap_or_default())]
    NotAProbabilityVector {
        location: Option<RowLocation>,
        reason: String,
    },
    #[error("bad trace shape: {0}")]
    BadShape(String),
    #[error("grid shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in correlation input")]
    NonFinite,
    #[error("instance sets differ: {0}")]
    IdMismatch(String),
    #[error("need {needed} defined cells, grid has {available}")]
    InsufficientDefinedCells { needed: usize, available: usize },
}

fn not_prob(location: Option<RowLocation>, reason: impl Into<String>) -> AttentionError {
    AttentionError::NotAProbabilityVector {
        location,
        reason: reason.into(),
    }
}

/// Sum and `Σ p ln p` of a row, checking entries and the sum.
fn row_moments<T: Copy + Into<f64>>(row: &[T]) -> Result<(f64, f64), String> {
    let mut sum = 0.0f64;
    let mut plogp = 0.0f64;
    for &v in row {
        let v: f64 = v.into();
        if v.is_nan() || v < 0.0 || v.is_infinite() {
            return Err(format!("entry {v} is negative or not finite"));
        }
        sum += v;
        if v > 0.0 {
            plogp += v * v.ln();
        }
    }
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok((sum, plogp))
}

/// Entropy of a row after rescaling it to sum exactly 1:
/// `ln s - (Σ p ln p) / s`, clamped to `[0, ln n]`.
fn entropy_from_moments(sum: f64, plogp: f64, len: usize) -> f64 {
    let h = sum.ln() - plogp / sum;
    h.clamp(0.0, (len as f64).ln())
}

/// Shannon entropy in nats with `0 ln 0 = 0`. Rows within 1e-4 of
/// stochastic are rescaled before the sum.
pub fn row_entropy(p: &[f64]) -> Result<f64, AttentionError> {
    if p.is_empty() {
        return Err(not_prob(None, "empty vector"));
    }
    let (sum, plogp) = row_moments(p).map_err(|r| not_prob(None, r))?;
    Ok(entropy_from_moments(sum, plogp, p.len()))
}

/// Per-layer, per-head attention matrices for one forward pass.
///
/// Values are kept exactly as supplied (so containers round-trip
/// bit-for-bit); rows are rescaled in f64 whenever entropy is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    seq_len: usize,
    causal: bool,
    prompt_len: Option<usize>,
    values: Vec<f32>,
}

impl AttentionTrace {
    /// `values` is ordered `[layer][head][query][key]`.
    pub fn new(
        layers: usize,
        heads: usize,
        seq_len: usize,
        values: Vec<f32>,
        causal: bool,
    ) -> Result<Self, AttentionError> {
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(AttentionError::BadShape(format!(
                "layers={layers} heads={heads} seq_len={seq_len} must all be positive"
            )));
        }
        let expected = layers * heads * seq_len * seq_len;
        if values.len() != expected {
            return Err(AttentionError::BadShape(format!(
                "{} values for {layers}x{heads}x{seq_len}x{seq_len}",
                values.len()
            )));
        }
        let trace = Self {
            layers,
            heads,
            seq_len,
            causal,
            prompt_len: None,
            values,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<(), AttentionError> {
        let n = self.seq_len;
        self.values
            .par_chunks(n * n)
            .enumerate()
            .try_for_each(|(m, matrix)| {
                for (row, values) in matrix.chunks(n).enumerate() {
                    let location = Some(self.location(m, row));
                    row_moments(values).map_err(|r| not_prob(location, r))?;
                    if self.causal && values[row + 1..].iter().any(|&v| v != 0.0) {
                        return Err(not_prob(
                            location,
                            "non-zero weight above the diagonal of a causal trace",
                        ));
                    }
                }
                Ok(())
            })
    }

    fn location(&self, matrix: usize, row: usize) -> RowLocation {
        RowLocation {
            layer: matrix / self.heads,
            head: matrix % self.heads,
            row,
        }
    }

    /// Marks the leading `prompt_len` query rows as the prompt.
    pub fn with_prompt_len(mut self, prompt_len: usize) -> Result<Self, AttentionError> {
        if prompt_len == 0 || prompt_len > self.seq_len {
            return Err(AttentionError::BadShape(format!(
                "prompt_len {prompt_len} outside 1..={}",
                self.seq_len
            )));
        }
        self.prompt_len = Some(prompt_len);
        Ok(self)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn is_causal(&self) -> bool {
        self.causal
    }
    pub fn prompt_len(&self) -> Option<usize> {
        self.prompt_len
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[f32] {
        let n2 = self.seq_len * self.seq_len;
        let start = (layer * self.heads + head) * n2;
        &self.values[start..start + n2]
    }
}

/// A layers × heads grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct HeadGrid {
    layers: usize,
    heads: usize,
    values: Vec<f64>,
}

impl HeadGrid {
    pub fn new(layers: usize, heads: usize, values: Vec<f64>) -> Result<Self, AttentionError> {
        if values.len() != layers * heads {
            return Err(AttentionError::BadShape(format!(
                "{} values for a {layers}x{heads} grid",
                values.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            values,
        })
    }

    pub fn filled(layers: usize, heads: usize, value: f64) -> Self {
        Self {
            layers,
            heads,
            values: vec![value; layers * heads],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers, self.heads)
    }
    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.heads.max(1))
    }
}

impl TryFrom<Vec<Vec<f64>>> for HeadGrid {
    type Error = AttentionError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, AttentionError> {
        let layers = rows.len();
        let heads = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != heads) {
            return Err(AttentionError::BadShape("ragged grid".into()));
        }
        HeadGrid::new(layers, heads, rows.into_iter().flatten().collect())
    }
}

impl From<HeadGrid> for Vec<Vec<f64>> {
    fn from(g: HeadGrid) -> Self {
        g.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Per-head mean row entropy (nats) for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileFile", into = "ProfileFile")]
pub struct EntropyProfile {
    pub seq_len: usize,
    /// Values divided by `ln seq_len`.
    pub normalized: bool,
    pub grid: HeadGrid,
}

/// On-disk profile: `{"layers", "heads", "seq_len", "normalized", "entropy"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileFile {
    layers: usize,
    heads: usize,
    seq_len: usize,
    #[serde(default)]
    normalized: bool,
    entropy: HeadGrid,
}

impl TryFrom<ProfileFile> for EntropyProfile {
    type Error = AttentionError;

    fn try_from(f: ProfileFile) -> Result<Self, AttentionError> {
        if f.entropy.shape() != (f.layers, f.heads) {
            return Err(AttentionError::ShapeMismatch {
                left: (f.layers, f.heads),
                right: f.entropy.shape(),
            });
        }
        Ok(EntropyProfile {
            seq_len: f.seq_len,
            normalized: f.normalized,
            grid: f.entropy,
        })
    }
}

impl From<EntropyProfile> for ProfileFile {
    fn from(p: EntropyProfile) -> Self {
        ProfileFile {
            layers: p.grid.layers(),
            heads: p.grid.heads(),
            seq_len: p.seq_len,
            normalized: p.normalized,
            entropy: p.grid,
        }
    }
}

impl EntropyProfile {
    pub fn layers(&self) -> usize {
        self.grid.layers()
    }
    pub fn heads(&self) -> usize {
        self.grid.heads()
    }
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.grid.get(layer, head)
    }
}

/// Which query rows contribute to a head's mean entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryPositions {
    /// The leading prompt rows (all rows when the trace has no prompt length).
    #[default]
    Prompt,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProfileOptions {
    /// Divide by `ln n` (only when `n >= 2`).
    pub normalize: bool,
    pub positions: QueryPositions,
}

pub fn head_entropy_profile(trace: &AttentionTrace) -> Result<EntropyProfile, AttentionError> {
    head_entropy_profile_with(trace, ProfileOptions::default())
}

pub fn head_entropy_profile_with(
    trace: &AttentionTrace,
    options: ProfileOptions,
) -> Result<EntropyProfile, AttentionError> {
    let n = trace.seq_len;
    let rows = match options.positions {
        QueryPositions::Prompt => trace.prompt_len.unwrap_or(n),
        QueryPositions::All => n,
    };
    let scale = if options.normalize && n >= 2 {
        (n as f64).ln()
    } else {
        1.0
    };
    let values = trace
        .values
        .par_chunks(n * n)
        .enumerate()
        .map(|(m, matrix)| {
            let mut total = 0.0;
            for (row, values) in matrix.chunks(n).take(rows).enumerate() {
                let (sum, plogp) =
                    row_moments(values).map_err(|r| not_prob(Some(trace.location(m, row)), r))?;
                total += entropy_from_moments(sum, plogp, n);
            }
            Ok(total / rows as f64 / scale)
        })
        .collect::<Result<Vec<f64>, AttentionError>>()?;
    Ok(EntropyProfile {
        seq_len: n,
        normalized: options.normalize && n >= 2,
        grid: HeadGrid::new(trace.layers, trace.heads, values)?,
    })
}

/// `pert - orig` per head. Sequence lengths may differ.
pub fn entropy_delta(orig: &EntropyProfile, pert: &EntropyProfile) -> Result<HeadGrid, AttentionError> {
    if orig.grid.shape() != pert.grid.shape() {
        return Err(AttentionError::ShapeMismatch {
            left: orig.grid.shape(),
            right: pert.grid.shape(),
        });
    }
    let values = orig
        .grid
        .values
        .iter()
        .zip(&pert.grid.values)
        .map(|(o, p)| p - o)
        .collect();
    HeadGrid::new(orig.layers(), orig.heads(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub rho: f64,
    pub p: f64,
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn centered(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// p-value: exact over all permutations of `y` for `n <= 8`, Student-t with
/// `n - 2` degrees of freedom otherwise.
///
/// Returns `Ok(None)` when `n < 3` or either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<RankCorrelation>, AttentionError> {
    if x.len() != y.len() {
        return Err(AttentionError::LengthMismatch(x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AttentionError::NonFinite);
    }
    let n = x.len();
    if n < 3 {
        return Ok(None);
    }
    let rx = centered(&average_ranks(x));
    let ry = centered(&average_ranks(y));
    let sxx = dot(&rx, &rx);
    let syy = dot(&ry, &ry);
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    let sxy = dot(&rx, &ry);
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = if n <= EXACT_P_MAX_N {
        exact_permutation_p(&rx, &ry, sxy)
    } else {
        t_approximation_p(rho, n)
    };
    Ok(Some(RankCorrelation { rho, p }))
}

/// Fraction of the n! orderings of `ry` whose |Σ rx·ry| reaches the
/// observed one. Rank sums of squares do not change under permutation, so
/// comparing the cross products is enough.
fn exact_permutation_p(rx: &[f64], ry: &[f64], observed: f64) -> f64 {
    let threshold = observed.abs() * (1.0 - 1e-12) - 1e-12;
    let mut perm = ry.to_vec();
    let n = perm.len();
    let mut hits = 0u64;
    let mut total = 0u64;
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut visit = |perm: &[f64]| {
        total += 1;
        if dot(rx, perm).abs() >= threshold {
            hits += 1;
        }
    };
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

fn t_approximation_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub n_points: usize,
}

impl CorrelationCell {
    pub fn is_defined(&self) -> bool {
        self.rho.is_some()
    }
}

/// Spearman correlation per (layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGrid {
    pub layers: usize,
    pub heads: usize,
    pub cells: Vec<CorrelationCell>,
}

impl CorrelationGrid {
    pub fn get(&self, layer: usize, head: usize) -> &CorrelationCell {
        &self.cells[layer * self.heads + head]
    }

    pub fn defined(&self) -> impl Iterator<Item = (usize, usize, &CorrelationCell)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_defined())
            .map(|(i, c)| (i / self.heads, i % self.heads, c))
    }

    pub fn rho_grid(&self) -> Vec<Vec<Option<f64>>> {
        self.cells
            .chunks(self.heads.max(1))
            .map(|r| r.iter().map(|c| c.rho).collect())
            .collect()
    }
}

/// Correlates each head's entropy delta with the EM difference across the
/// given points. Every grid must have the same shape.
pub fn correlation_grid_points(points: &[(&HeadGrid, f64)]) -> Result<CorrelationGrid, AttentionError> {
    let Some((first, _)) = points.first() else {
        return Ok(CorrelationGrid {
            layers: 0,
            heads: 0,
            cells: Vec::new(),
        });
    };
    let shape = first.shape();
    if let Some((g, _)) = points.iter().find(|(g, _)| g.shape() != shape) {
        return Err(AttentionError::ShapeMismatch {
            left: shape,
            right: g.shape(),
        });
    }
    let em: Vec<f64> = points.iter().map(|(_, e)| *e).collect();
    let cells = (0..shape.0 * shape.1)
        .into_par_iter()
        .map(|cell| {
            let deltas: Vec<f64> = points.iter().map(|(g, _)| g.values[cell]).collect();
            let r = spearman(&deltas, &em)?;
            Ok(CorrelationCell {
                rho: r.map(|r| r.rho),
                p: r.map(|r| r.p),
                n_points: points.len(),
            })
        })
        .collect::<Result<Vec<_>, AttentionError>>()?;
    Ok(CorrelationGrid {
        layers: shape.0,
        heads: shape.1,
        cells,
    })
}

/// Per-instance form of [`correlation_grid_points`]; both maps must cover
/// the same instance ids.
pub fn correlation_grid(
    deltas: &BTreeMap<String, HeadGrid>,
    em_diffs: &BTreeMap<String, f64>,
) -> Result<CorrelationGrid, AttentionError> {
    if let Some(id) = deltas
        .keys()
        .find(|k| !em_diffs.contains_key(*k))
        .or_else(|| em_diffs.keys().find(|k| !deltas.contains_key(*k)))
    {
        return Err(AttentionError::IdMismatch(format!(
            "{id:?} is not in both inputs"
        )));
    }
    let points: Vec<(&HeadGrid, f64)> = deltas.iter().map(|(id, g)| (g, em_diffs[id])).collect();
    correlation_grid_points(&points)
}

/// One perturbation kind in the aggregate entropy/EM scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub kind: PerturbationKind,
    /// Entropy delta averaged over heads and instances.
    pub mean_delta: f64,
    /// `em_original - em_perturbed` averaged over instances.
    pub mean_em_drop: f64,
}

/// Spearman over the per-kind points (delta vs EM drop).
pub fn aggregate_scatter(points: &[ScatterPoint]) -> Result<Option<RankCorrelation>, AttentionError> {
    let x: Vec<f64> = points.iter().map(|p| p.mean_delta).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_em_drop).collect();
    spearman(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    /// Highest rho first.
    pub top: Vec<RankedHead>,
    /// Lowest rho first.
    pub bottom: Vec<RankedHead>,
}

/// Most and least correlated heads; ties break on (layer, head) ascending.
pub fn rank_heads(grid: &CorrelationGrid, k: usize) -> Result<HeadRanking, AttentionError> {
    let mut heads: Vec<RankedHead> = grid
        .defined()
        .map(|(layer, head, c)| RankedHead {
            layer,
            head,
            rho: c.rho.expect("defined"),
        })
        .collect();
    if heads.len() < k {
        return Err(AttentionError::InsufficientDefinedCells {
            needed: k,
            available: heads.len(),
        });
    }
    let key = |h: &RankedHead| (h.layer, h.head);
    heads.sort_by(|a, b| b.rho.total_cmp(&a.rho).then(key(a).cmp(&key(b))));
    let top = heads[..k].to_vec();
    heads.sort_by(|a, b| a.rho.total_cmp(&b.rho).then(key(a).cmp(&key(b))));
    let bottom = heads[..k].to_vec();
    Ok(HeadRanking { top, bottom })
}
