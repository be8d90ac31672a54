//! Deterministic inputs shared by the benchmarks.

use tablequake::attention::AttentionTrace;
use tablequake::rng::SplitMix64;
use tablequake::Table;

/// A `rows x cols` table of distinct cells.
pub fn table(rows: usize, cols: usize) -> Table {
    let header = (0..cols).map(|c| format!("col{c}")).collect();
    let body = (0..rows)
        .map(|r| (0..cols).map(|c| format!("r{r}c{c}")).collect())
        .collect();
    Table::new(header, body).expect("rectangular")
}

/// Row-stochastic trace with one peaked key per row.
pub fn trace(layers: usize, heads: usize, seq_len: usize, seed: u64) -> AttentionTrace {
    let mut rng = SplitMix64::new(seed);
    let mut values = vec![0.0f32; layers * heads * seq_len * seq_len];
    for row in values.chunks_mut(seq_len) {
        row.fill(0.5 / seq_len as f32);
        row[rng.next_below(seq_len as u64) as usize] += 0.5;
    }
    AttentionTrace::new(layers, heads, seq_len, values, false).expect("valid trace")
}

/// `n` values drawn from `levels` distinct values, so ties are common.
pub fn tied_values(n: usize, levels: u64, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_below(levels) as f64).collect()
}
