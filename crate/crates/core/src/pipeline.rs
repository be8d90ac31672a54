//! File-level pipeline stages: perturb → prompt → score → attention deltas
//! → correlate → report, plus the mock end-to-end run.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_scatter, correlation_grid_points, entropy_delta, head_entropy_profile_with, rank_heads,
    CorrelationGrid, EntropyProfile, HeadGrid, HeadRanking, ProfileOptions, RankCorrelation, ScatterPoint,
};
use crate::error::Error;
use crate::metrics::{aggregate, original_report, score, AggregateReport, ScoredPair};
use crate::mock::{mock_predict, synth_trace, MockConfig};
use crate::perturb::{
    filter_instances, output_id, perturb_instance, scoring_target, sort_kinds, PerturbationKind,
    PerturbedInstance, ScoringMode,
};
use crate::prompt::{build_prompt, Exemplar, PromptSpec, TemplateRegistry};
use crate::report::{
    bins_csv, heatmap_emit, scatter_csv, scored_csv, size_bin_report, summary_table, ScatterRow, SizeBins,
    Summary,
};
use crate::rng::keyed_seed;
use crate::store::{
    fnv1a64, read_records, read_trace, write_atomic, write_records, write_trace, RunRecord, StoreError,
};
use crate::table::{cell_count, check_unique_ids, load_instances, InstanceFormat, QaInstance};

/// A perturbed dataset line: the instance format plus provenance fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedRecord {
    #[serde(flatten)]
    pub instance: QaInstance,
    pub base_id: String,
    pub kind: PerturbationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PerturbedRecord {
    fn new(source: &QaInstance, p: PerturbedInstance) -> Self {
        PerturbedRecord {
            instance: QaInstance {
                id: p.output_id(),
                table: p.table,
                question: p.question,
                gold: source.gold.clone(),
                counterfactual: source.counterfactual.clone(),
                dataset_tag: source.dataset_tag.clone(),
            },
            base_id: p.base_id,
            kind: p.kind,
            seed: p.seed,
        }
    }

    pub fn scoring_target(&self, mode: ScoringMode) -> Result<Vec<String>, Error> {
        Ok(scoring_target(&self.instance, self.kind, mode)?)
    }

    pub fn to_perturbed(&self, mode: ScoringMode) -> Result<PerturbedInstance, Error> {
        Ok(PerturbedInstance {
            base_id: self.base_id.clone(),
            kind: self.kind,
            seed: self.seed,
            table: self.instance.table.clone(),
            question: self.instance.question.clone(),
            scoring_target: self.scoring_target(mode)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub base_id: String,
    pub kind: PerturbationKind,
    pub seed: Option<u64>,
    pub output_id: String,
}

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub kinds: Vec<PerturbationKind>,
    pub seed: u64,
    pub cap: usize,
    /// Keep only instances whose table holds a gold answer verbatim.
    /// Forced on when DVP, RVP or NVP is requested.
    pub require_answer_in_table: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PerturbOutput {
    pub records: Vec<PerturbedRecord>,
    pub manifest: Vec<ManifestEntry>,
    /// Instances dropped by the filters, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Applies every requested kind (Original is always included) to the
/// instances that pass the filters. Each surviving instance gets every kind,
/// so all kinds share one instance set.
pub fn perturb_dataset(instances: &[QaInstance], options: &PerturbOptions) -> Result<PerturbOutput, Error> {
    if options.cap == 0 {
        return Err(Error::Validation("cap must be at least 1".into()));
    }
    check_unique_ids(instances)?;
    let mut kinds = options.kinds.clone();
    kinds.push(PerturbationKind::Original);
    sort_kinds(&mut kinds);
    kinds.dedup();

    let needs_answer = options.require_answer_in_table
        || kinds.iter().any(|k| {
            matches!(
                k,
                PerturbationKind::Dvp | PerturbationKind::Rvp | PerturbationKind::Nvp
            )
        });
    let needs_counterfactual = kinds.contains(&PerturbationKind::Dvp);

    let kept = filter_instances(instances, options.cap, needs_answer);
    let mut skipped: Vec<(String, String)> = instances
        .iter()
        .filter(|i| !kept.iter().any(|k| k.id == i.id))
        .map(|i| {
            let reason = match &i.table {
                None => "no table".to_owned(),
                Some(t) if cell_count(t) >= options.cap => {
                    format!("{} cells >= cap {}", cell_count(t), options.cap)
                }
                Some(_) => "no cell equals a gold answer".to_owned(),
            };
            (i.id.clone(), reason)
        })
        .collect();
    let kept: Vec<QaInstance> = kept
        .into_iter()
        .filter(|i| {
            let ok = !needs_counterfactual || i.counterfactual.is_some();
            if !ok {
                skipped.push((i.id.clone(), "DVP requested but no counterfactual".into()));
            }
            ok
        })
        .collect();

    let mut out = PerturbOutput {
        skipped,
        ..Default::default()
    };
    for inst in &kept {
        for &kind in &kinds {
            let p = perturb_instance(inst, kind, options.seed, ScoringMode::Substituted)?;
            out.manifest.push(ManifestEntry {
                base_id: inst.id.clone(),
                kind,
                seed: p.seed,
                output_id: output_id(&inst.id, kind),
            });
            out.records.push(PerturbedRecord::new(inst, p));
        }
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn from_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let text = fs::read_to_string(path).map_err(StoreError::io_error(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Store(StoreError::MalformedLine {
                    line: i + 1,
                    message: format!("{}: {e}", path.display()),
                })
            })
        })
        .collect()
}

pub const PERTURBED_FILE: &str = "perturbed.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_perturb_output(dir: &Path, out: &PerturbOutput) -> Result<(), Error> {
    write_atomic(&dir.join(PERTURBED_FILE), to_jsonl(&out.records).as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), to_jsonl(&out.manifest).as_bytes())?;
    Ok(())
}

pub fn read_perturbed(path: &Path) -> Result<Vec<PerturbedRecord>, Error> {
    from_jsonl(path)
}

/// One prompt ready for a model runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub instance_id: String,
    pub kind: PerturbationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub shots: u8,
    pub template_id: String,
    pub prompt: String,
    pub prompt_hash: u64,
}

#[derive(Debug, Clone)]
pub struct PromptOptions {
    pub shots: usize,
    pub template_id: String,
    pub exemplars: Vec<Exemplar>,
    /// Exemplar tables must stay under this many cells.
    pub cap: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            shots: 0,
            template_id: crate::prompt::DEFAULT_TEMPLATE_ID.to_owned(),
            exemplars: Vec::new(),
            cap: crate::report::DEFAULT_CAP,
        }
    }
}

pub fn build_prompts(
    records: &[PerturbedRecord],
    options: &PromptOptions,
    templates: &TemplateRegistry,
) -> Result<Vec<PromptRecord>, Error> {
    if let Some(ex) = options.exemplars.iter().take(options.shots).find(|e| {
        e.instance
            .table
            .as_ref()
            .is_some_and(|t| cell_count(t) >= options.cap)
    }) {
        return Err(Error::Validation(format!(
            "exemplar {:?} has a table at or above the {}-cell cap",
            ex.instance.id, options.cap
        )));
    }
    records
        .iter()
        .map(|r| {
            let spec = PromptSpec::with_exemplars(
                options.shots,
                &options.exemplars,
                r.kind != PerturbationKind::Nt,
                &options.template_id,
            )?;
            let prompt = build_prompt(&r.instance, &spec, templates)?;
            Ok(PromptRecord {
                id: r.instance.id.clone(),
                instance_id: r.base_id.clone(),
                kind: r.kind,
                seed: r.seed,
                shots: options.shots as u8,
                template_id: options.template_id.clone(),
                prompt_hash: fnv1a64(prompt.as_bytes()),
                prompt,
            })
        })
        .collect()
}

pub fn write_prompts(path: &Path, prompts: &[PromptRecord]) -> Result<(), Error> {
    Ok(write_atomic(path, to_jsonl(prompts).as_bytes())?)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>, Error> {
    from_jsonl(path)
}

pub fn read_exemplars(path: &Path) -> Result<Vec<Exemplar>, Error> {
    from_jsonl(path)
}

/// Scores of one run against the original run.
#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub scored: Vec<ScoredPair>,
    pub aggregates: Vec<AggregateReport>,
    pub summary: Summary,
}

fn single_setting(records: &[&RunRecord]) -> Result<(), Error> {
    let mut settings: Vec<(&str, u8)> = records.iter().map(|r| (r.model_id.as_str(), r.shots)).collect();
    settings.sort_unstable();
    settings.dedup();
    if settings.len() > 1 {
        return Err(Error::Validation(format!(
            "run files mix {} (model, shots) settings; score one setting at a time",
            settings.len()
        )));
    }
    Ok(())
}

/// Scores Original records from `orig` and every other kind from `pert`
/// (either file may hold all kinds). Targets come from the perturbed
/// dataset.
pub fn score_runs(
    orig: &[RunRecord],
    pert: &[RunRecord],
    dataset: &[PerturbedRecord],
    mode: ScoringMode,
) -> Result<ScoreOutput, Error> {
    let targets: HashMap<(&str, PerturbationKind), &PerturbedRecord> = dataset
        .iter()
        .map(|r| ((r.base_id.as_str(), r.kind), r))
        .collect();
    let originals: Vec<&RunRecord> = orig
        .iter()
        .filter(|r| r.kind == PerturbationKind::Original)
        .collect();
    let perturbed: Vec<&RunRecord> = pert
        .iter()
        .filter(|r| r.kind != PerturbationKind::Original)
        .collect();
    single_setting(&originals.iter().chain(&perturbed).copied().collect::<Vec<_>>())?;
    if originals.is_empty() {
        return Err(Error::Validation("no Original records to compare against".into()));
    }
    let score_one = |r: &RunRecord| -> Result<ScoredPair, Error> {
        let target = targets.get(&(r.instance_id.as_str(), r.kind)).ok_or_else(|| {
            Error::Validation(format!(
                "no perturbed dataset entry for ({}, {})",
                r.instance_id, r.kind
            ))
        })?;
        Ok(score(
            &r.instance_id,
            r.kind,
            &r.prediction,
            &target.scoring_target(mode)?,
        ))
    };
    let orig_scored = originals
        .iter()
        .map(|r| score_one(r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut by_kind: BTreeMap<PerturbationKind, Vec<ScoredPair>> = BTreeMap::new();
    for r in &perturbed {
        by_kind.entry(r.kind).or_default().push(score_one(r)?);
    }
    let mut aggregates = vec![original_report(&orig_scored)?];
    for run in by_kind.values() {
        aggregates.push(aggregate(&orig_scored, run)?);
    }
    let summary = summary_table(&aggregates)?;
    let mut scored = orig_scored;
    scored.extend(by_kind.into_values().flatten());
    Ok(ScoreOutput {
        scored,
        aggregates,
        summary,
    })
}

pub const SCORED_FILE: &str = "scored.csv";

pub fn write_score_output(dir: &Path, out: &ScoreOutput) -> Result<(), Error> {
    write_atomic(&dir.join(SCORED_FILE), scored_csv(&out.scored).as_bytes())?;
    write_atomic(&dir.join("summary.json"), out.summary.to_json().as_bytes())?;
    write_atomic(&dir.join("summary.txt"), out.summary.to_text().as_bytes())?;
    Ok(())
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredPair>, Error> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Store(StoreError::Io {
            path: path.to_owned(),
            source,
        }),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    })?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

/// Entropy change of one perturbed run relative to its original run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub instance_id: String,
    pub kind: PerturbationKind,
    pub orig_seq_len: usize,
    pub pert_seq_len: usize,
    pub delta: HeadGrid,
}

/// Loads a trace container, or a precomputed profile when the path ends in
/// `.json`.
pub fn load_profile(path: &Path, options: ProfileOptions) -> Result<EntropyProfile, Error> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(StoreError::io_error(path))?;
        let profile: EntropyProfile =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if options.normalize && !profile.normalized && profile.seq_len >= 2 {
            let scale = (profile.seq_len as f64).ln();
            let values = profile.grid.values().iter().map(|v| v / scale).collect();
            return Ok(EntropyProfile {
                normalized: true,
                grid: HeadGrid::new(profile.layers(), profile.heads(), values)?,
                ..profile
            });
        }
        return Ok(profile);
    }
    let trace = read_trace(path)?;
    Ok(head_entropy_profile_with(&trace, options)?)
}

/// Computes per-record entropy deltas against the matching Original record
/// (same instance, model and shots).
pub fn attention_deltas(
    records: &[RunRecord],
    orig_traces: &Path,
    pert_traces: &Path,
    options: ProfileOptions,
) -> Result<Vec<DeltaRecord>, Error> {
    let originals: HashMap<(&str, &str, u8), &RunRecord> = records
        .iter()
        .filter(|r| r.kind == PerturbationKind::Original)
        .map(|r| ((r.instance_id.as_str(), r.model_id.as_str(), r.shots), r))
        .collect();
    let orig_profiles: HashMap<(&str, &str, u8), EntropyProfile> = originals
        .par_iter()
        .filter_map(|(key, r)| r.trace_ref.as_ref().map(|t| (key, t)))
        .map(|(key, t)| Ok((*key, load_profile(&orig_traces.join(t), options)?)))
        .collect::<Result<_, Error>>()?;
    let pert: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.kind != PerturbationKind::Original && r.trace_ref.is_some())
        .collect();
    pert.par_iter()
        .map(|r| {
            let key = (r.instance_id.as_str(), r.model_id.as_str(), r.shots);
            let orig = orig_profiles.get(&key).ok_or_else(|| {
                Error::Validation(format!(
                    "({}, {}) has a trace but its Original record has none",
                    r.instance_id, r.kind
                ))
            })?;
            let pert = load_profile(
                &pert_traces.join(r.trace_ref.as_ref().expect("filtered")),
                options,
            )?;
            Ok(DeltaRecord {
                instance_id: r.instance_id.clone(),
                kind: r.kind,
                orig_seq_len: orig.seq_len,
                pert_seq_len: pert.seq_len,
                delta: entropy_delta(orig, &pert)?,
            })
        })
        .collect()
}

pub const DELTAS_FILE: &str = "deltas.jsonl";

pub fn write_deltas(dir: &Path, deltas: &[DeltaRecord]) -> Result<(), Error> {
    Ok(write_atomic(&dir.join(DELTAS_FILE), to_jsonl(deltas).as_bytes())?)
}

pub fn read_deltas(dir: &Path) -> Result<Vec<DeltaRecord>, Error> {
    from_jsonl(&dir.join(DELTAS_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCorrelation {
    /// Kind name, or `structural` for the pooled grid.
    pub name: String,
    pub n_points: usize,
    pub defined_cells: usize,
    pub grid: CorrelationGrid,
    #[serde(skip)]
    pub scatter: Vec<ScatterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScatter {
    pub points: Vec<ScatterPoint>,
    pub correlation: Option<RankCorrelation>,
}

/// Everything `correlate` produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOutput {
    pub per_kind: Vec<KindCorrelation>,
    /// Grid over (instance, kind) points of all structural kinds together.
    pub structural: Option<KindCorrelation>,
    pub aggregate: AggregateScatter,
    pub top_heads: Option<HeadRanking>,
}

pub const TOP_HEADS: usize = 5;

/// Correlates entropy deltas with `em_original - em_perturbed` per head.
pub fn correlate(deltas: &[DeltaRecord], scored: &[ScoredPair]) -> Result<CorrelationOutput, Error> {
    let em: HashMap<(&str, PerturbationKind), u8> = scored
        .iter()
        .map(|s| ((s.instance_id.as_str(), s.kind), s.em))
        .collect();
    let em_diff = |d: &DeltaRecord| -> Result<f64, Error> {
        let get = |kind| {
            em.get(&(d.instance_id.as_str(), kind))
                .copied()
                .ok_or_else(|| Error::Validation(format!("no score for ({}, {kind})", d.instance_id)))
        };
        Ok(f64::from(get(PerturbationKind::Original)?) - f64::from(get(d.kind)?))
    };

    let mut by_kind: BTreeMap<PerturbationKind, Vec<(&DeltaRecord, f64)>> = BTreeMap::new();
    for d in deltas {
        by_kind.entry(d.kind).or_default().push((d, em_diff(d)?));
    }
    let summarize = |name: &str, points: &[(&DeltaRecord, f64)]| -> Result<KindCorrelation, Error> {
        let grid_points: Vec<(&HeadGrid, f64)> = points.iter().map(|(d, e)| (&d.delta, *e)).collect();
        let grid = correlation_grid_points(&grid_points)?;
        Ok(KindCorrelation {
            name: name.to_owned(),
            n_points: points.len(),
            defined_cells: grid.defined().count(),
            grid,
            scatter: points
                .iter()
                .map(|(d, e)| ScatterRow {
                    instance_id: d.instance_id.clone(),
                    mean_delta: d.delta.mean(),
                    em_diff: *e,
                })
                .collect(),
        })
    };

    let mut per_kind = Vec::new();
    let mut scatter_points = Vec::new();
    for kind in PerturbationKind::ALL {
        let Some(points) = by_kind.get(&kind) else {
            continue;
        };
        let n = points.len() as f64;
        if kind.is_structural() {
            scatter_points.push(ScatterPoint {
                kind,
                mean_delta: points.iter().map(|(d, _)| d.delta.mean()).sum::<f64>() / n,
                mean_em_drop: points.iter().map(|(_, e)| e).sum::<f64>() / n,
            });
        }
        per_kind.push(summarize(kind.name(), points)?);
    }
    let pooled: Vec<(&DeltaRecord, f64)> = PerturbationKind::STRUCTURAL
        .iter()
        .filter_map(|k| by_kind.get(k))
        .flatten()
        .copied()
        .collect();
    let structural = if pooled.is_empty() {
        None
    } else {
        Some(summarize(STRUCTURAL_GRID_NAME, &pooled)?)
    };
    let top_heads = structural.as_ref().and_then(|s| {
        let k = TOP_HEADS.min(s.defined_cells);
        (k > 0).then(|| rank_heads(&s.grid, k).expect("k <= defined cells"))
    });
    Ok(CorrelationOutput {
        per_kind,
        structural,
        aggregate: AggregateScatter {
            correlation: aggregate_scatter(&scatter_points)?,
            points: scatter_points,
        },
        top_heads,
    })
}

pub const STRUCTURAL_GRID_NAME: &str = "structural";

pub fn write_correlation_output(dir: &Path, out: &CorrelationOutput) -> Result<(), Error> {
    for k in &out.per_kind {
        heatmap_emit(&k.grid, dir, &k.name)?;
        write_atomic(
            &dir.join(format!("scatter_{}.csv", k.name)),
            scatter_csv(&k.scatter).as_bytes(),
        )?;
    }
    if let Some(s) = &out.structural {
        heatmap_emit(&s.grid, dir, STRUCTURAL_GRID_NAME)?;
    }
    let mut json = serde_json::to_string_pretty(out).expect("serializable");
    json.push('\n');
    write_atomic(&dir.join("correlation.json"), json.as_bytes())?;
    Ok(())
}

/// Cell counts of every table in an instance or perturbed-dataset file.
pub fn cell_counts(instances: &[QaInstance]) -> BTreeMap<String, usize> {
    instances
        .iter()
        .filter_map(|i| i.table.as_ref().map(|t| (i.id.clone(), cell_count(t))))
        .collect()
}

pub fn write_bins_report(
    dir: &Path,
    scored: &[ScoredPair],
    counts: &BTreeMap<String, usize>,
    bins: &SizeBins,
) -> Result<(), Error> {
    let rows = size_bin_report(scored, counts, bins)?;
    Ok(write_atomic(&dir.join("bins.csv"), bins_csv(&rows).as_bytes())?)
}

fn trace_file_name(id: &str, kind: PerturbationKind) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .take(48)
        .collect();
    format!("{safe}-{}-{:016x}.attn", kind.name(), fnv1a64(id.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub cap: usize,
    pub shots: usize,
    pub exemplars: Vec<Exemplar>,
    pub template_id: String,
    pub mode: ScoringMode,
    pub bins: SizeBins,
    pub profile: ProfileOptions,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            cap: crate::report::DEFAULT_CAP,
            shots: 0,
            exemplars: Vec::new(),
            template_id: crate::prompt::DEFAULT_TEMPLATE_ID.to_owned(),
            mode: ScoringMode::Substituted,
            bins: SizeBins::default_bins(),
            profile: ProfileOptions::default(),
        }
    }
}

/// Paths of a simulate run's outputs, relative to its root.
#[derive(Debug, Clone)]
pub struct SimulateLayout {
    pub root: PathBuf,
}

impl SimulateLayout {
    pub fn perturbed(&self) -> PathBuf {
        self.root.join("perturbed")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }
    pub fn run(&self) -> PathBuf {
        self.root.join("run.jsonl")
    }
    pub fn orig_traces(&self) -> PathBuf {
        self.root.join("traces").join("orig")
    }
    pub fn pert_traces(&self) -> PathBuf {
        self.root.join("traces").join("pert")
    }
    pub fn grids(&self) -> PathBuf {
        self.root.join("grids")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub layout: SimulateLayout,
    pub score: ScoreOutput,
    pub correlation: CorrelationOutput,
    pub skipped: Vec<(String, String)>,
}

/// Full offline pipeline with the mock model. Every stage writes its files
/// and the next stage reads them back.
pub fn simulate(
    config: &MockConfig,
    instances: &[QaInstance],
    out: &Path,
    options: &SimulateOptions,
) -> Result<SimulateOutput, Error> {
    config.validate()?;
    let kinds = config.kinds();
    if !kinds.contains(&PerturbationKind::Original) {
        return Err(Error::Validation(
            "mock config must give a penalty and dispersion for \"original\"".into(),
        ));
    }
    let layout = SimulateLayout { root: out.to_owned() };

    let perturbed = perturb_dataset(
        instances,
        &PerturbOptions {
            kinds: kinds.clone(),
            seed: config.seed,
            cap: options.cap,
            require_answer_in_table: false,
        },
    )?;
    write_perturb_output(&layout.perturbed(), &perturbed)?;
    let dataset = read_perturbed(&layout.perturbed().join(PERTURBED_FILE))?;

    let templates = TemplateRegistry::default();
    let prompts = build_prompts(
        &dataset,
        &PromptOptions {
            shots: options.shots,
            template_id: options.template_id.clone(),
            exemplars: options.exemplars.clone(),
            cap: options.cap,
        },
        &templates,
    )?;
    write_prompts(&layout.prompts(), &prompts)?;

    let shape = config.trace;
    let records = dataset
        .par_iter()
        .zip(&prompts)
        .map(|(rec, prompt)| {
            let prediction = mock_predict(&rec.to_perturbed(options.mode)?, config)?;
            let dispersion = config.dispersion(rec.kind)?;
            // Keyed by kind only: synthetic entropy depends on dispersion
            // alone, and per-instance peak positions would only add summation
            // noise that a rank correlation then mistakes for signal.
            let trace_seed = keyed_seed(config.seed, &format!("trace\u{0}{}", rec.kind.name()));
            let trace = synth_trace(shape.seq_len, shape.layers, shape.heads, dispersion, trace_seed)?;
            let name = trace_file_name(&rec.base_id, rec.kind);
            let dir = if rec.kind == PerturbationKind::Original {
                layout.orig_traces()
            } else {
                layout.pert_traces()
            };
            write_trace(&dir.join(&name), &trace)?;
            Ok(RunRecord {
                instance_id: rec.base_id.clone(),
                kind: rec.kind,
                shots: prompt.shots,
                model_id: config.model_id.clone(),
                prompt_hash: prompt.prompt_hash,
                prediction,
                trace_ref: Some(PathBuf::from(name)),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_records(&layout.run(), &records)?;
    let records = read_records(&layout.run())?;

    let score = score_runs(&records, &records, &dataset, options.mode)?;
    write_score_output(&layout.reports(), &score)?;

    let deltas = attention_deltas(
        &records,
        &layout.orig_traces(),
        &layout.pert_traces(),
        options.profile,
    )?;
    write_deltas(&layout.grids(), &deltas)?;

    let scored = read_scored(&layout.reports().join(SCORED_FILE))?;
    let correlation = correlate(&read_deltas(&layout.grids())?, &scored)?;
    write_correlation_output(&layout.reports(), &correlation)?;

    let counts = cell_counts(&dataset.iter().map(|r| r.instance.clone()).collect::<Vec<_>>());
    write_bins_report(&layout.reports(), &scored, &counts, &options.bins)?;

    Ok(SimulateOutput {
        layout,
        score,
        correlation,
        skipped: perturbed.skipped,
    })
}

/// Loads instances, choosing the format from the file extension.
pub fn load_instance_file(path: &Path) -> Result<Vec<QaInstance>, Error> {
    Ok(load_instances(path, InstanceFormat::from_path(path))?)
}
