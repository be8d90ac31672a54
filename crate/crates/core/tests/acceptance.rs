//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! Run with `cargo test -p tablequake-core --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use serde::Deserialize;
use tablequake::attention::{
    aggregate_scatter, correlation_grid, head_entropy_profile, spearman, AttentionTrace, HeadGrid,
};
use tablequake::metrics::{aggregate, exact_match, f1, variation_percentage, ScoredPair};
use tablequake::mock::{MockConfig, TraceShape};
use tablequake::perturb::{
    column_swap, row_swap, transpose, transpose_col_swap, transpose_row_swap, PerturbationKind,
};
use tablequake::pipeline::{simulate, SimulateOptions, STRUCTURAL_GRID_NAME};
use tablequake::report::heatmap_emit;
use tablequake::rng::{non_identity_permutation, SplitMix64};
use tablequake::store::{
    decode_trace, encode_trace, fnv1a64, read_records, read_trace, write_records, write_trace,
};
use tablequake::{QaInstance, RunRecord, Table};

const ALGEBRA_TABLES: usize = 200;
const ALGEBRA_MAX_CELLS: usize = 150;
const ALGEBRA_BUDGET: Duration = Duration::from_secs(1);

const METRIC_TOL: f64 = 1e-12;
const VP_VECTORS: usize = 1000;

const ENTROPY_TOL: f64 = 1e-9;
const BIG_TRACE: (usize, usize, usize) = (32, 32, 512);
const BIG_TRACE_BUDGET: Duration = Duration::from_secs(5);

const SPEARMAN_TOL: f64 = 1e-9;
const SPEARMAN_VECTORS: usize = 500;
const SPEARMAN_MAX_N: usize = 20;

const E2E_INSTANCES: usize = 100;
const E2E_RHO_TOL: f64 = 1e-12;
const E2E_BUDGET: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("perturbation algebra", perturbation_algebra),
        ("seeded determinism", seeded_determinism),
        ("metric oracle equivalence", metric_oracle),
        ("EM-difference arithmetic", em_difference_arithmetic),
        ("entropy", entropy),
        ("spearman oracle", spearman_oracle),
        ("end-to-end synthetic correlation", end_to_end),
        ("degenerate handling", degenerate),
        ("I/O round trips", io_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn sorted_cells(t: &Table) -> Vec<String> {
    let mut cells: Vec<String> = t.cells().map(str::to_owned).collect();
    cells.sort();
    cells
}

/// Random shape with at most `max_cells` cells counting the header row.
fn random_table(rng: &mut SplitMix64, max_cells: usize, unique: bool) -> Table {
    let cols = 1 + rng.next_below(10) as usize;
    let max_rows = max_cells / cols - 1;
    let rows = rng.next_below(max_rows.min(20) as u64 + 1) as usize;
    let mut next = 0;
    let mut cell = |rng: &mut SplitMix64| {
        next += 1;
        if unique {
            format!("u{next}")
        } else {
            ["a", "b", "c", "1", "2", ""][rng.next_below(6) as usize].to_owned()
        }
    };
    let header = (0..cols).map(|_| cell(rng)).collect();
    let body = (0..rows)
        .map(|_| (0..cols).map(|_| cell(rng)).collect())
        .collect();
    Table::new(header, body).unwrap()
}

fn perturbation_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0x0A16_EB4A);
    let mut swaps_checked = 0;
    for i in 0..ALGEBRA_TABLES {
        let seed = rng.next_u64();
        let unique = i % 2 == 1;
        let t = random_table(&mut rng, ALGEBRA_MAX_CELLS, unique);
        ensure!(
            (t.num_rows() + 1) * t.num_columns() <= ALGEBRA_MAX_CELLS,
            "generator produced an oversized table"
        );
        let cells = sorted_cells(&t);
        let tr = transpose(&t);
        let outputs = [
            ("row", row_swap(&t, seed)),
            ("col", column_swap(&t, seed)),
            ("transpose", tr.clone()),
            ("trow", transpose_row_swap(&t, seed)),
            ("tcol", transpose_col_swap(&t, seed)),
        ];
        for (name, out) in &outputs {
            ensure!(
                sorted_cells(out) == cells,
                "table {i}: {name} changed the cell multiset"
            );
        }
        ensure!(transpose(&tr) == t, "table {i}: transpose is not an involution");
        if unique {
            let [row, col, _, trow, tcol] = &outputs;
            let moved = [
                (t.num_rows() >= 2, &row.1, &t, "row"),
                (t.num_columns() >= 2, &col.1, &t, "col"),
                (tr.num_rows() >= 2, &trow.1, &tr, "trow"),
                (tr.num_columns() >= 2, &tcol.1, &tr, "tcol"),
            ];
            for (applies, out, base, name) in moved {
                if applies {
                    swaps_checked += 1;
                    ensure!(out != base, "table {i}: {name} left the table unchanged");
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(
        elapsed < ALGEBRA_BUDGET,
        "took {elapsed:?}, budget {ALGEBRA_BUDGET:?}"
    );
    Ok(format!(
        "{ALGEBRA_TABLES} tables, multiset + involution hold, {swaps_checked} swaps all non-identity, {elapsed:.2?}"
    ))
}

#[derive(Deserialize)]
struct SwapReference {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    cases: Vec<SwapCase>,
}

#[derive(Deserialize)]
struct SwapCase {
    seed: u64,
    row_permutation: Vec<usize>,
    column_permutation: Vec<usize>,
    row_swap: TableParts,
    column_swap: TableParts,
}

#[derive(Deserialize)]
struct TableParts {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn seeded_determinism() -> Outcome {
    let reference: SwapReference = serde_json::from_str(include_str!("fixtures/swap_reference.json"))
        .map_err(|e| format!("bad reference file: {e}"))?;
    let table = Table::new(reference.header.clone(), reference.rows.clone()).unwrap();
    ensure!(table.num_rows() == 5, "reference fixture must have 5 rows");
    let mut seeds = Vec::new();
    for case in &reference.cases {
        let s = case.seed;
        ensure!(
            non_identity_permutation(5, s) == case.row_permutation,
            "seed {s}: row permutation differs from reference"
        );
        ensure!(
            non_identity_permutation(table.num_columns(), s) == case.column_permutation,
            "seed {s}: column permutation differs from reference"
        );
        let rows = row_swap(&table, s);
        ensure!(
            rows.header() == case.row_swap.header && rows.rows() == case.row_swap.rows,
            "seed {s}: row_swap output differs from reference"
        );
        let cols = column_swap(&table, s);
        ensure!(
            cols.header() == case.column_swap.header && cols.rows() == case.column_swap.rows,
            "seed {s}: column_swap output differs from reference"
        );
        seeds.push(s);
    }
    ensure!(
        seeds == [0, 1, 42],
        "reference must cover seeds 0, 1, 42, has {seeds:?}"
    );
    Ok("seeds 0, 1, 42 match the reference table exactly".into())
}

/// ASCII-only normalization used by the oracle; the fixture stays in ASCII.
fn oracle_tokens(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    let mut tokens: Vec<String> = cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect();
    tokens.sort();
    tokens.dedup();
    tokens
}

fn oracle_em(pred: &str, gold: &str) -> u8 {
    let norm = |s: &str| {
        s.to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
            .collect::<String>()
            .split_whitespace()
            .filter(|t| !matches!(*t, "a" | "an" | "the"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    u8::from(norm(pred) == norm(gold))
}

fn oracle_f1(pred: &str, gold: &str) -> f64 {
    let p = oracle_tokens(pred);
    let g = oracle_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let common = p.iter().filter(|t| g.contains(t)).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

const METRIC_FIXTURE: [(&str, &str); 20] = [
    ("Bangkok", "Bangkok, Thailand"),
    ("bangkok thailand", "Bangkok, Thailand"),
    ("The Beatles", "beatles"),
    ("an apple a day", "Apple day"),
    ("1,234", "1234"),
    ("1 234", "1,234"),
    ("New York City", "new york"),
    ("", ""),
    ("", "Paris"),
    ("Paris", ""),
    ("the", ""),
    ("red green blue", "blue green red"),
    ("red red red", "red"),
    ("U.S.A.", "u s a"),
    ("  spaced   out  ", "spaced out"),
    ("Mr. Smith's car", "mr smith s car"),
    ("2019-2020", "2019 2020"),
    ("one two three four", "four five"),
    ("Totally different", "nothing shared"),
    ("A tale of two cities", "Tale of Two Cities (novel)"),
];

fn metric_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for (pred, gold) in METRIC_FIXTURE {
        let targets = [gold.to_owned()];
        let em = exact_match(pred, &targets);
        ensure!(em == oracle_em(pred, gold), "EM mismatch on {pred:?} vs {gold:?}");
        let (got, want) = (f1(pred, &targets), oracle_f1(pred, gold));
        worst = worst.max((got - want).abs());
        ensure!(
            (got - want).abs() <= METRIC_TOL,
            "F1 {got} vs oracle {want} on {pred:?} vs {gold:?}"
        );
    }
    let bangkok = f1("Bangkok", &["Bangkok, Thailand".to_owned()]);
    ensure!(
        bangkok == 2.0 / 3.0,
        "F1(Bangkok, Bangkok Thailand) = {bangkok}, want 2/3"
    );

    let mut rng = SplitMix64::new(0x5EED_0FF1);
    for v in 0..VP_VECTORS {
        let n = 1 + rng.next_below(200) as usize;
        let bias = rng.next_f64();
        let pairs: Vec<(u8, u8)> = (0..n)
            .map(|_| (u8::from(rng.next_f64() < bias), u8::from(rng.next_f64() < 0.5)))
            .collect();
        let orig: Vec<ScoredPair> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(o, _))| pair(i, PerturbationKind::Original, o))
            .collect();
        let pert: Vec<ScoredPair> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(_, p))| pair(i, PerturbationKind::RowSwap, p))
            .collect();
        let report = aggregate(&orig, &pert).map_err(|e| e.to_string())?;
        let (vp, emd) = (report.vp.unwrap(), report.emd.unwrap());
        ensure!(vp >= emd.abs(), "vector {v}: VP {vp} < |EMd| {}", emd.abs());
        ensure!(
            vp == variation_percentage(&pairs).unwrap(),
            "vector {v}: aggregate VP disagrees with variation_percentage"
        );
    }
    Ok(format!(
        "20 pairs within {METRIC_TOL:e} (max err {worst:e}), F1(Bangkok) = 2/3, VP >= |EMd| on {VP_VECTORS} vectors"
    ))
}

fn pair(i: usize, kind: PerturbationKind, em: u8) -> ScoredPair {
    ScoredPair {
        instance_id: format!("i{i:03}"),
        kind,
        em,
        f1: f64::from(em),
    }
}

fn em_difference_arithmetic() -> Outcome {
    let orig: Vec<ScoredPair> = (0..100)
        .map(|i| pair(i, PerturbationKind::Original, u8::from(i < 37)))
        .collect();
    let pert: Vec<ScoredPair> = (0..100)
        .map(|i| pair(i, PerturbationKind::Nt, u8::from(i < 5)))
        .collect();
    let original = tablequake::metrics::original_report(&orig).map_err(|e| e.to_string())?;
    let report = aggregate(&orig, &pert).map_err(|e| e.to_string())?;
    ensure!(original.em_mean == 0.37, "original EM {}", original.em_mean);
    ensure!(report.em_mean == 0.05, "perturbed EM {}", report.em_mean);
    let emd = report.emd.unwrap();
    ensure!(emd == -0.32, "EMd = {emd:?}, want exactly -0.32");
    Ok(format!("EM 0.37 -> 0.05 gives EMd = {emd}"))
}

fn single_matrix(n: usize, rows: &[Vec<f32>]) -> AttentionTrace {
    AttentionTrace::new(1, 1, n, rows.concat(), false).unwrap()
}

fn entropy() -> Outcome {
    for n in [2usize, 4, 8, 512] {
        let trace = single_matrix(n, &vec![vec![1.0 / n as f32; n]; n]);
        let h = head_entropy_profile(&trace).map_err(|e| e.to_string())?.get(0, 0);
        let want = (n as f64).ln();
        ensure!(
            (h - want).abs() <= ENTROPY_TOL,
            "uniform n={n}: {h} vs ln n = {want}"
        );
    }
    let one_hot: Vec<Vec<f32>> = (0..8)
        .map(|i| (0..8).map(|j| f32::from(i == j)).collect())
        .collect();
    let h = head_entropy_profile(&single_matrix(8, &one_hot))
        .map_err(|e| e.to_string())?
        .get(0, 0);
    ensure!(h == 0.0, "one-hot profile {h}, want 0");

    let mixed = [
        vec![0.25, 0.25, 0.25, 0.25],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.5, 0.25, 0.25, 0.0],
    ];
    let ln2 = 2f64.ln();
    // ln 4, 0, ln 2 and 1.5 ln 2
    let want = (2.0 * ln2 + 0.0 + ln2 + 1.5 * ln2) / 4.0;
    let h = head_entropy_profile(&single_matrix(4, &mixed))
        .map_err(|e| e.to_string())?
        .get(0, 0);
    ensure!((h - want).abs() <= ENTROPY_TOL, "mixed profile {h}, want {want}");

    let (layers, heads, n) = BIG_TRACE;
    let mut rng = SplitMix64::new(99);
    let mut values = vec![0.0f32; layers * heads * n * n];
    for row in values.chunks_mut(n) {
        let hot = rng.next_below(n as u64) as usize;
        row.fill(0.5 / n as f32);
        row[hot] += 0.5;
    }
    let trace = AttentionTrace::new(layers, heads, n, values, false).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let profile = head_entropy_profile(&trace).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(
        profile.grid.values().iter().all(|v| v.is_finite()),
        "non-finite entropy in big trace"
    );
    ensure!(
        elapsed < BIG_TRACE_BUDGET,
        "{layers}x{heads}x{n}x{n} profile took {elapsed:?}"
    );
    Ok(format!(
        "uniform n in {{2,4,8,512}} within {ENTROPY_TOL:e}, one-hot 0, mixed mean ok, {layers}x{heads}x{n}x{n} in {elapsed:.2?}"
    ))
}

/// Brute-force average rank: 1 + #smaller + (#equal - 1) / 2.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_rho(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Lexicographic successor; false once the last permutation is reached.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn oracle_exact_p(x: &[f64], y: &[f64]) -> f64 {
    let observed = oracle_rho(x, y).unwrap().abs();
    let mut perm: Vec<usize> = (0..y.len()).collect();
    let (mut hits, mut total) = (0u32, 0u32);
    loop {
        let shuffled: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        total += 1;
        if oracle_rho(x, &shuffled).unwrap().abs() >= observed - 1e-9 {
            hits += 1;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    assert_eq!(total, 120);
    f64::from(hits) / f64::from(total)
}

fn spearman_oracle() -> Outcome {
    let mut rng = SplitMix64::new(0x5BEA);
    let mut undefined = 0;
    for v in 0..SPEARMAN_VECTORS {
        let n = 3 + rng.next_below(SPEARMAN_MAX_N as u64 - 2) as usize;
        let levels = 1 + rng.next_below(n as u64);
        let x: Vec<f64> = (0..n).map(|_| rng.next_below(levels) as f64).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| rng.next_below(levels) as f64 * 0.5 - 1.0)
            .collect();
        let got = spearman(&x, &y).map_err(|e| e.to_string())?;
        match (got, oracle_rho(&x, &y)) {
            (Some(r), Some(want)) => ensure!(
                (r.rho - want).abs() <= SPEARMAN_TOL,
                "vector {v} (n={n}): rho {} vs oracle {want}",
                r.rho
            ),
            (None, None) => undefined += 1,
            (got, want) => return Err(format!("vector {v}: defined-ness differs: {got:?} vs {want:?}")),
        }
    }

    let mut n5_cases: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let mut perm: Vec<usize> = (0..5).collect();
    loop {
        n5_cases.push((x.clone(), perm.iter().map(|&i| i as f64).collect()));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    n5_cases.push((vec![1.0, 1.0, 2.0, 3.0, 4.0], vec![2.0, 1.0, 3.0, 3.0, 5.0]));
    n5_cases.push((vec![0.1, 0.4, 0.4, 0.4, 0.9], vec![5.0, 4.0, 4.0, 1.0, 1.0]));
    for (x, y) in &n5_cases {
        let r = spearman(x, y)
            .map_err(|e| e.to_string())?
            .ok_or("n=5 case undefined")?;
        let want = oracle_exact_p(x, y);
        ensure!(
            r.p == want,
            "n=5 p {} vs enumeration {want} for {x:?} / {y:?}",
            r.p
        );
    }

    for constant in [vec![3.0; 6], vec![0.0; 3]] {
        let other: Vec<f64> = (0..constant.len()).map(|i| i as f64).collect();
        ensure!(
            spearman(&constant, &other).map_err(|e| e.to_string())?.is_none(),
            "constant x gave a number"
        );
        ensure!(
            spearman(&other, &constant).map_err(|e| e.to_string())?.is_none(),
            "constant y gave a number"
        );
    }
    Ok(format!(
        "{SPEARMAN_VECTORS} tied vectors within {SPEARMAN_TOL:e} ({undefined} undefined on both sides), {} n=5 exact p-values, constants undefined",
        n5_cases.len()
    ))
}

fn mock_instances(count: usize) -> Vec<QaInstance> {
    let mut rng = SplitMix64::new(2024);
    (0..count)
        .map(|i| {
            let cols = 2 + rng.next_below(4) as usize;
            let rows = 2 + rng.next_below(8) as usize;
            let header = (0..cols).map(|c| format!("h{c}")).collect();
            let body: Vec<Vec<String>> = (0..rows)
                .map(|r| (0..cols).map(|c| format!("v{i}_{r}_{c}")).collect())
                .collect();
            let answer = body[rng.next_below(rows as u64) as usize][0].clone();
            QaInstance {
                id: format!("m{i:03}"),
                table: Some(Table::new(header, body).unwrap()),
                question: format!("Which value is in question {i}?"),
                gold: vec![answer],
                counterfactual: None,
                dataset_tag: "mock".into(),
            }
        })
        .collect()
}

fn monotone_config() -> MockConfig {
    use PerturbationKind::*;
    let kinds = [
        Original,
        RowSwap,
        ColumnSwap,
        Transpose,
        TransposeRowSwap,
        TransposeColSwap,
    ];
    let penalty = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];
    let dispersion = [0.0, 0.2, 0.5, 1.0, 2.0, 4.0];
    MockConfig {
        seed: 17,
        base_accuracy: 1.0,
        severity_penalty: kinds.iter().copied().zip(penalty).collect(),
        dispersion: kinds.iter().copied().zip(dispersion).collect(),
        model_id: "mock".into(),
        trace: TraceShape {
            layers: 4,
            heads: 4,
            seq_len: 16,
        },
    }
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let instances = mock_instances(E2E_INSTANCES);
    let start = Instant::now();
    let out = simulate(
        &monotone_config(),
        &instances,
        dir.path(),
        &SimulateOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let agg = out
        .correlation
        .aggregate
        .correlation
        .ok_or("aggregate scatter undefined")?;
    ensure!(
        out.correlation.aggregate.points.len() == 5,
        "expected 5 scatter points"
    );
    ensure!((agg.rho - 1.0).abs() <= E2E_RHO_TOL, "aggregate rho {}", agg.rho);
    ensure!(
        (agg.p - 2.0 / 120.0).abs() <= E2E_RHO_TOL,
        "aggregate p {}, want 2/120",
        agg.p
    );

    let pooled = out
        .correlation
        .structural
        .as_ref()
        .ok_or("no pooled structural grid")?;
    ensure!(
        pooled.name == STRUCTURAL_GRID_NAME,
        "pooled grid is named {}",
        pooled.name
    );
    let defined: Vec<f64> = pooled.grid.defined().map(|(_, _, c)| c.rho.unwrap()).collect();
    ensure!(!defined.is_empty(), "pooled structural grid has no defined cell");
    if let Some(bad) = defined.iter().find(|r| **r <= 0.0) {
        return Err(format!("pooled grid has a non-positive cell: rho = {bad}"));
    }
    for kc in &out.correlation.per_kind {
        if let Some((l, h, c)) = kc.grid.defined().find(|(_, _, c)| c.rho.unwrap() <= 0.0) {
            return Err(format!("{} grid cell ({l},{h}) has rho {:?}", kc.name, c.rho));
        }
    }
    ensure!(elapsed < E2E_BUDGET, "simulate took {elapsed:?}");
    Ok(format!(
        "rho = {:.12}, p = {:.6} (2/120), {} defined pooled cells all positive (min {:.4}), {elapsed:.2?} for {E2E_INSTANCES} instances",
        agg.rho,
        agg.p,
        defined.len(),
        defined.iter().copied().fold(f64::INFINITY, f64::min)
    ))
}

fn degenerate() -> Outcome {
    let mut rng = SplitMix64::new(5);
    let mut deltas = BTreeMap::new();
    let mut em = BTreeMap::new();
    for i in 0..12 {
        let values = (0..6).map(|_| rng.next_f64() - 0.5).collect();
        deltas.insert(format!("i{i}"), HeadGrid::new(2, 3, values).unwrap());
        em.insert(format!("i{i}"), 0.0);
    }
    let grid = correlation_grid(&deltas, &em).map_err(|e| e.to_string())?;
    ensure!(grid.cells.len() == 6, "grid has {} cells", grid.cells.len());
    ensure!(
        grid.defined().count() == 0,
        "all-zero EM differences left a defined cell"
    );
    ensure!(
        grid.cells.iter().all(|c| c.p.is_none()),
        "undefined cell carries a p-value"
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = heatmap_emit(&grid, dir.path(), "degenerate").map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(&files[0]).map_err(|e| e.to_string())?;
    ensure!(csv == ",,\n,,\n", "unexpected csv for an undefined grid: {csv:?}");
    let svg = std::fs::read_to_string(&files[1]).map_err(|e| e.to_string())?;
    ensure!(
        svg.starts_with("<svg") || svg.starts_with("<?xml"),
        "svg output is not an svg document"
    );
    let scatter = aggregate_scatter(&[]).map_err(|e| e.to_string())?;
    ensure!(scatter.is_none(), "empty scatter gave a number");
    Ok("2x3 grid all undefined, heatmap csv/svg written".into())
}

fn io_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records: Vec<RunRecord> = PerturbationKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| RunRecord {
            instance_id: format!("inst-{i} \"quoted\" ünïcode"),
            kind,
            shots: (i % 4) as u8,
            model_id: "model/a".into(),
            prompt_hash: fnv1a64(format!("prompt {i}").as_bytes()),
            prediction: if i % 3 == 0 {
                String::new()
            } else {
                format!("answer\twith tab {i}")
            },
            trace_ref: (i % 2 == 0).then(|| format!("traces/{i}.attn").into()),
        })
        .collect();
    let path = dir.path().join("run.jsonl");
    write_records(&path, &records).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = read_records(&path).map_err(|e| e.to_string())?;
    ensure!(back == records, "records changed across write/read");
    write_records(&path, &back).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&path).map_err(|e| e.to_string())? == first,
        "re-written records differ byte-wise"
    );

    let mut rng = SplitMix64::new(77);
    let mut checked = HashMap::new();
    for (causal, prompt_len) in [(false, None), (true, Some(5)), (true, None)] {
        let n = 7;
        let mut values = Vec::with_capacity(2 * 3 * n * n);
        for _ in 0..2 * 3 {
            for q in 0..n {
                let width = if causal { q + 1 } else { n };
                let raw: Vec<f32> = (0..width).map(|_| rng.next_f64() as f32 + 1e-3).collect();
                let sum: f32 = raw.iter().sum();
                values.extend(raw.iter().map(|v| v / sum));
                values.extend(std::iter::repeat_n(0.0, n - width));
            }
        }
        let mut trace = AttentionTrace::new(2, 3, n, values, causal).map_err(|e| e.to_string())?;
        if let Some(p) = prompt_len {
            trace = trace.with_prompt_len(p).map_err(|e| e.to_string())?;
        }
        let path = dir.path().join(format!("t{causal}{prompt_len:?}.attn"));
        write_trace(&path, &trace).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure!(&bytes[..8] == b"ATTNTRC1", "trace file lacks the magic");
        let back = read_trace(&path).map_err(|e| e.to_string())?;
        let same_bits = back
            .values()
            .iter()
            .zip(trace.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(
            same_bits && back.values().len() == trace.values().len(),
            "trace values changed"
        );
        ensure!(back == trace, "trace metadata changed");
        ensure!(encode_trace(&back) == bytes, "re-encoded trace differs byte-wise");
        let decoded = decode_trace(bytes.as_slice()).map_err(|e| e.to_string())?;
        ensure!(decoded == trace, "decode_trace disagrees with read_trace");
        checked.insert(path, bytes.len());
    }
    let empty = fnv1a64(b"");
    ensure!(empty == 0xcbf2_9ce4_8422_2325, "fnv1a64(\"\") = {empty:#x}");
    Ok(format!(
        "{} records and {} traces bit-exact, fnv1a64(\"\") = {empty:#018x}",
        records.len(),
        checked.len()
    ))
}
