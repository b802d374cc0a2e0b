//! Command-line surface of the geosocial toolkit: corpus generation,
//! ingestion, analysis, training, prediction, evaluation and ablation.
//!
//! All randomness is seeded (`--seed`, default 42); identical configuration
//! and inputs produce byte-identical outputs. Commands write only under
//! their `--out` directory and exit non-zero with a single-line
//! `error: ...` message on failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use geosocial::config::RunConfig;
use geosocial::domain::{GeoPoint, SiteRecord, TypeCatalog};
use geosocial::evaluation::{
    corpus_analysis, run_ablation, run_eval, EvalMode, EvalTarget, FamilyChoice, LambdaChoice,
    SplitPlan,
};
use geosocial::features::FamilySet;
use geosocial::ingest::{self, IngestConfig};
use geosocial::neural::EmbeddingTable;
use geosocial::pipeline::{fit_bundle, default_families, Approach, ModelBundle, ModelKind};
use geosocial::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "geosocial",
    version,
    about = "Infer site types from geotagged messages posted around them"
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one configuration key (repeatable), e.g. --set radius_m=15.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (entities.jsonl + messages.jsonl).
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Radius-join messages to entities and build a site-record corpus.
    Ingest {
        #[arg(long, value_name = "FILE")]
        messages: PathBuf,
        #[arg(long, value_name = "FILE")]
        entities: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Corpus analyses: distance bins, day periods, POS prevalence,
    /// distinctive bigrams.
    Analyze {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model on a whole corpus and persist it.
    Train {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long)]
        approach: String,
        #[arg(long)]
        model: String,
        /// Feature families, e.g. "textual+ngrams" (linear models).
        #[arg(long)]
        families: Option<String>,
        /// L2 strength for logit.
        #[arg(long)]
        lambda: Option<f64>,
        /// Pretrained embedding text file (CNN); seeded-random vectors
        /// over the corpus vocabulary are used when absent.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Classify one site from a message file and an entity point.
    Predict {
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        messages: PathBuf,
        /// Entity point as LAT,LON.
        #[arg(long, value_name = "LAT,LON")]
        entity: String,
    },
    /// Repeated-split evaluation of one model.
    Eval {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// pipeline, joint, or message (individual-message classification).
        #[arg(long)]
        approach: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        families: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        /// Parallel repetition workers (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Feature-family ablation table (message-level logit).
    Ablate {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for pair in &cli.overrides {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?}: expected KEY=VALUE"))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> anyhow::Result<(Vec<SiteRecord>, TypeCatalog)> {
    let corpus = ingest::read_corpus(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?;
    Ok((corpus.records, corpus.meta.catalog))
}

fn resolve_families(
    flag: Option<&str>,
    cfg: &RunConfig,
    approach: Approach,
) -> anyhow::Result<FamilySet> {
    let spec = flag.unwrap_or(&cfg.families);
    if spec.is_empty() {
        Ok(default_families(approach))
    } else if spec == "search" {
        bail!("family search is only available in `eval`");
    } else {
        Ok(FamilySet::parse(spec)?)
    }
}

fn load_embeddings(path: Option<&PathBuf>) -> anyhow::Result<Option<EmbeddingTable>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let (table, stats) = EmbeddingTable::load(p)?;
            if stats.duplicates > 0 {
                eprintln!(
                    "warning: {} duplicate tokens in {} (last occurrence kept)",
                    stats.duplicates,
                    p.display()
                );
            }
            Ok(Some(table))
        }
    }
}

fn eval_mode(approach: &str) -> anyhow::Result<EvalMode> {
    Ok(match approach {
        "pipeline" => EvalMode::Pipeline,
        "joint" => EvalMode::Joint,
        "message" | "message_level" => EvalMode::MessageLevel,
        other => bail!("unknown approach: {other} (expected pipeline, joint or message)"),
    })
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Synth { out } => {
            let synth_cfg = SynthConfig::from_run_config(&cfg)?;
            let result = generate(&synth_cfg, out)?;
            println!(
                "wrote {} entities, {} messages under {}",
                result.n_entities,
                result.n_messages,
                out.display()
            );
        }

        Command::Ingest {
            messages,
            entities,
            out,
        } => {
            let catalog = TypeCatalog::new(&cfg.catalog)?;
            let ingest_cfg = IngestConfig {
                radius_m: cfg.radius_m,
                min_messages: cfg.min_messages,
                subsample_to_class_mean: cfg.subsample_to_class_mean,
                seed: cfg.seed,
            };
            let corpus = ingest::ingest_corpus(messages, entities, &catalog, &ingest_cfg)?;
            ingest::write_corpus(out, &corpus)?;
            for w in &corpus.meta.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "corpus: {} records, {} messages ({} malformed message lines, {} malformed entity lines)",
                corpus.meta.n_records,
                corpus.meta.n_messages,
                corpus.meta.malformed_message_lines,
                corpus.meta.malformed_entity_lines
            );
        }

        Command::Analyze { corpus, out } => {
            let (records, catalog) = load_corpus(corpus)?;
            let report = corpus_analysis(&records, &catalog, &cfg)?;
            let files = report.write(out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} analysis files under {}", files.len(), out.display());
        }

        Command::Train {
            corpus,
            approach,
            model,
            families,
            lambda,
            embeddings,
            out,
        } => {
            let (records, catalog) = load_corpus(corpus)?;
            let approach = Approach::from_str(approach)?;
            let kind = ModelKind::from_str(model)?;
            let families = resolve_families(families.as_deref(), &cfg, approach)?;
            let table = load_embeddings(embeddings.as_ref())?;
            let bundle = fit_bundle(
                &records,
                None,
                &catalog,
                approach,
                kind,
                families,
                lambda.unwrap_or(cfg.logit_lambda),
                &cfg,
                table.as_ref(),
            )?;
            bundle.save(out)?;
            println!(
                "trained {} {} on {} records -> {}",
                bundle.approach.name(),
                kind.name(),
                records.len(),
                out.display()
            );
        }

        Command::Predict {
            model,
            messages,
            entity,
        } => {
            let bundle = ModelBundle::load(model)?;
            let (lat, lon) = entity
                .split_once(',')
                .context("--entity expects LAT,LON")?;
            let lat: f64 = lat.trim().parse().context("bad latitude")?;
            let lon: f64 = lon.trim().parse().context("bad longitude")?;
            let point = GeoPoint::new(lat, lon)?;

            let report = ingest::load_messages(messages)?;
            if !report.malformed.is_empty() {
                eprintln!("warning: {} malformed message lines skipped", report.malformed.len());
            }
            let near: Vec<_> = report
                .items
                .into_iter()
                .filter_map(|m| {
                    let d = geosocial::haversine_m(point, m.point());
                    (d <= bundle.radius_m).then_some((m, d))
                })
                .collect();
            let record = SiteRecord::new("query", lat, lon, None, near)?;

            let ranked: Vec<(String, f64)> = if record.messages.is_empty() {
                eprintln!("warning: no messages within {} m; reporting training priors", bundle.radius_m);
                bundle
                    .catalog
                    .iter()
                    .map(|t| (t.name.clone(), bundle.class_priors[t.index]))
                    .collect()
            } else {
                let got = bundle.classify(&record)?;
                bundle
                    .catalog
                    .iter()
                    .map(|t| (t.name.clone(), got.scores[t.index]))
                    .collect()
            };
            let mut ranked = ranked;
            ranked.sort_by(|(na, sa), (nb, sb)| sb.total_cmp(sa).then_with(|| na.cmp(nb)));
            println!("class,score");
            for (name, score) in ranked {
                println!("{name},{score:.6}");
            }
        }

        Command::Eval {
            corpus,
            approach,
            model,
            families,
            lambda,
            embeddings,
            jobs,
            out,
        } => {
            let (records, catalog) = load_corpus(corpus)?;
            let mut cfg = cfg.clone();
            if let Some(j) = jobs {
                cfg.jobs = *j;
            }
            let mode = eval_mode(approach)?;
            let kind = ModelKind::from_str(model)?;
            let mut target = EvalTarget::new(mode, kind, &cfg)?;
            if let Some(f) = families {
                target.families = if f == "search" {
                    FamilyChoice::Search
                } else {
                    FamilyChoice::Fixed(FamilySet::parse(f)?)
                };
            }
            if let Some(l) = lambda {
                target.lambda = LambdaChoice::Fixed(*l);
            }
            let table = load_embeddings(embeddings.as_ref())?;
            let plan = SplitPlan::new(cfg.repetitions, cfg.seed);
            let report = run_eval(&records, &catalog, &target, &plan, &cfg, table.as_ref())?;
            report.write(out, "eval")?;
            println!(
                "{}: mean accuracy {:.4}, mean macro-F1 {:.4} over {} repetitions -> {}",
                report.target,
                report.mean_accuracy,
                report.mean_macro_f1,
                plan.repetitions,
                out.display()
            );
        }

        Command::Ablate { corpus, jobs, out } => {
            let (records, catalog) = load_corpus(corpus)?;
            let mut cfg = cfg.clone();
            if let Some(j) = jobs {
                cfg.jobs = *j;
            }
            let plan = SplitPlan::new(cfg.repetitions, cfg.seed);
            let table = run_ablation(&records, &catalog, &plan, &cfg)?;
            table.write(out)?;
            println!("wrote ablation table ({} rows) under {}", table.rows.len(), out.display());
        }
    }
    Ok(())
}
