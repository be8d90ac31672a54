use std::fs;
use std::path::{Path, PathBuf};

use tablequake::attention::{ProfileOptions, QueryPositions};
use tablequake::error::{Error, Result};
use tablequake::mock::MockConfig;
use tablequake::perturb::ScoringMode;
use tablequake::pipeline::{
    attention_deltas, build_prompts, cell_counts, correlate, load_instance_file, perturb_dataset,
    read_deltas, read_exemplars, read_perturbed, read_scored, simulate, write_bins_report,
    write_correlation_output, write_deltas, write_perturb_output, write_prompts, write_score_output,
    PerturbOptions, PromptOptions, SimulateOptions, SCORED_FILE,
};
use tablequake::prompt::{Exemplar, Template, TemplateRegistry};
use tablequake::report::SizeBins;
use tablequake::store::{read_records, StoreError};

use crate::args::{Command, Positions};

fn scoring_mode(against_original: bool) -> ScoringMode {
    if against_original {
        ScoringMode::Original
    } else {
        ScoringMode::Substituted
    }
}

fn check_cap(cap: usize) -> Result<()> {
    if cap == 0 {
        return Err(Error::Validation("--cap must be at least 1".into()));
    }
    Ok(())
}

fn exemplars(path: Option<&Path>) -> Result<Vec<Exemplar>> {
    path.map_or_else(|| Ok(Vec::new()), read_exemplars)
}

/// Resolves `--template`: the built-in id, or a template file registered
/// under its path.
fn templates(template: &str) -> Result<(TemplateRegistry, String)> {
    let mut registry = TemplateRegistry::default();
    if registry.get(template).is_ok() {
        return Ok((registry, template.to_owned()));
    }
    let path = Path::new(template);
    if !path.is_file() {
        return Err(tablequake::prompt::PromptError::UnknownTemplate(template.to_owned()).into());
    }
    let body = fs::read_to_string(path).map_err(StoreError::io_error(path))?;
    registry.register(Template::new(template, body)?);
    Ok((registry, template.to_owned()))
}

fn scored_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join(SCORED_FILE)
    } else {
        p
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Perturb {
            input,
            kinds,
            seed,
            cap,
            require_answer,
            out,
        } => {
            check_cap(cap)?;
            let instances = load_instance_file(&input)?;
            let result = perturb_dataset(
                &instances,
                &PerturbOptions {
                    kinds,
                    seed,
                    cap,
                    require_answer_in_table: require_answer,
                },
            )?;
            write_perturb_output(&out, &result)?;
            for (id, reason) in &result.skipped {
                eprintln!("skipped {id}: {reason}");
            }
            println!(
                "{} perturbed records from {} of {} instances -> {}",
                result.records.len(),
                instances.len() - result.skipped.len(),
                instances.len(),
                out.display()
            );
        }
        Command::Prompt {
            input,
            shots,
            template,
            exemplars: exemplar_path,
            cap,
            out,
        } => {
            check_cap(cap)?;
            let dataset = read_perturbed(&input)?;
            let (registry, template_id) = templates(&template)?;
            let prompts = build_prompts(
                &dataset,
                &PromptOptions {
                    shots: shots.into(),
                    template_id,
                    exemplars: exemplars(exemplar_path.as_deref())?,
                    cap,
                },
                &registry,
            )?;
            write_prompts(&out, &prompts)?;
            println!("{} prompts -> {}", prompts.len(), out.display());
        }
        Command::Score {
            orig,
            pert,
            dataset,
            score_against_original,
            out,
        } => {
            let orig = read_records(&orig)?;
            let pert = read_records(&pert)?;
            let dataset = read_perturbed(&dataset)?;
            let result = tablequake::pipeline::score_runs(
                &orig,
                &pert,
                &dataset,
                scoring_mode(score_against_original),
            )?;
            write_score_output(&out, &result)?;
            print!("{}", result.summary.to_text());
        }
        Command::Attn {
            orig_traces,
            pert_traces,
            records,
            normalize_entropy,
            positions,
            out,
        } => {
            let records = read_records(&records)?;
            let options = ProfileOptions {
                normalize: normalize_entropy,
                positions: match positions {
                    Positions::Prompt => QueryPositions::Prompt,
                    Positions::All => QueryPositions::All,
                },
            };
            let deltas = attention_deltas(&records, &orig_traces, &pert_traces, options)?;
            write_deltas(&out, &deltas)?;
            println!("{} entropy deltas -> {}", deltas.len(), out.display());
        }
        Command::Correlate { grids, scored, out } => {
            let scored = read_scored(&scored_path(scored.unwrap_or_else(|| out.clone())))?;
            let result = correlate(&read_deltas(&grids)?, &scored)?;
            write_correlation_output(&out, &result)?;
            match result.aggregate.correlation {
                Some(c) => println!("aggregate scatter: rho = {:.4}, p = {:.4}", c.rho, c.p),
                None => println!("aggregate scatter: undefined"),
            }
        }
        Command::Report {
            scored,
            instances,
            bins,
            cap,
            out,
        } => {
            check_cap(cap)?;
            let bins = SizeBins::parse(&bins, cap)?;
            let scored = read_scored(&scored_path(scored))?;
            let counts = cell_counts(&load_instance_file(&instances)?);
            write_bins_report(&out, &scored, &counts, &bins)?;
            println!("bins.csv -> {}", out.display());
        }
        Command::Simulate {
            config,
            input,
            cap,
            shots,
            exemplars: exemplar_path,
            score_against_original,
            normalize_entropy,
            bins,
            out,
        } => {
            check_cap(cap)?;
            let text = fs::read_to_string(&config).map_err(StoreError::io_error(&config))?;
            let config: MockConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("{}: {e}", config.display())))?;
            let instances = load_instance_file(&input)?;
            let result = simulate(
                &config,
                &instances,
                &out,
                &SimulateOptions {
                    cap,
                    shots: shots.into(),
                    exemplars: exemplars(exemplar_path.as_deref())?,
                    mode: scoring_mode(score_against_original),
                    bins: SizeBins::parse(&bins, cap)?,
                    profile: ProfileOptions {
                        normalize: normalize_entropy,
                        positions: QueryPositions::Prompt,
                    },
                    ..SimulateOptions::default()
                },
            )?;
            print!("{}", result.score.summary.to_text());
            match result.correlation.aggregate.correlation {
                Some(c) => println!("aggregate scatter: rho = {:.4}, p = {:.4}", c.rho, c.p),
                None => println!("aggregate scatter: undefined"),
            }
        }
    }
    Ok(())
}
