//! Temporary calibration probe. Deleted before final delivery.

use std::time::Instant;

use geosocial::config::RunConfig;
use geosocial::domain::TypeCatalog;
use geosocial::evaluation::{run_eval, EvalMode, EvalTarget, FamilyChoice, LambdaChoice, SplitPlan};
use geosocial::features::{FamilySet, FeatureFamily};
use geosocial::ingest::{self, IngestConfig};
use geosocial::pipeline::ModelKind;
use geosocial::synth::{generate, SynthConfig};

fn build_corpus(cfg: &RunConfig) -> (Vec<geosocial::SiteRecord>, TypeCatalog) {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = SynthConfig::from_run_config(cfg).unwrap();
    let t = Instant::now();
    let out = generate(&synth_cfg, dir.path()).unwrap();
    eprintln!("synth: {} messages in {:?}", out.n_messages, t.elapsed());
    let catalog = TypeCatalog::new(&cfg.catalog).unwrap();
    let t = Instant::now();
    let corpus = ingest::ingest_corpus(
        &out.messages_path,
        &out.entities_path,
        &catalog,
        &IngestConfig {
            radius_m: cfg.radius_m,
            min_messages: cfg.min_messages,
            subsample_to_class_mean: cfg.subsample_to_class_mean,
            seed: cfg.seed,
        },
    )
    .unwrap();
    eprintln!(
        "ingest: {} records {} messages in {:?}; per-class {:?}",
        corpus.meta.n_records,
        corpus.meta.n_messages,
        t.elapsed(),
        corpus.meta.records_per_class
    );
    (corpus.records, corpus.meta.catalog)
}

#[test]
#[ignore]
fn probe_baselines_and_margin() {
    let mut cfg = RunConfig::default();
    cfg.logit_max_iters = 150;
    cfg.jobs = 2;
    let (records, catalog) = build_corpus(&cfg);
    let plan = SplitPlan::new(10, cfg.seed);

    for kind in [ModelKind::Majority, ModelKind::Random] {
        let t = Instant::now();
        let target = EvalTarget::new(EvalMode::Joint, kind, &cfg).unwrap();
        let report = run_eval(&records, &catalog, &target, &plan, &cfg, None).unwrap();
        eprintln!(
            "{}: acc {:.4} f1 {:.4} in {:?}",
            kind.name(),
            report.mean_accuracy,
            report.mean_macro_f1,
            t.elapsed()
        );
    }

    let t = Instant::now();
    let joint = EvalTarget {
        mode: EvalMode::Joint,
        kind: ModelKind::Logit,
        families: FamilyChoice::Fixed(FamilySet::only(FeatureFamily::Ngrams)),
        lambda: LambdaChoice::Fixed(1.0),
    };
    let report = run_eval(&records, &catalog, &joint, &plan, &cfg, None).unwrap();
    eprintln!(
        "joint logit ngrams: acc {:.4} in {:?}",
        report.mean_accuracy,
        t.elapsed()
    );

    let pipe_families = FamilySet::only(FeatureFamily::Ngrams).with(FeatureFamily::SpatioTemporal);
    for (kind, fams) in [
        (ModelKind::Logit, pipe_families),
        (ModelKind::NaiveBayes, pipe_families),
    ] {
        let t = Instant::now();
        let target = EvalTarget {
            mode: EvalMode::Pipeline,
            kind,
            families: FamilyChoice::Fixed(fams),
            lambda: LambdaChoice::Fixed(1.0),
        };
        let report = run_eval(&records, &catalog, &target, &plan, &cfg, None).unwrap();
        eprintln!(
            "pipeline {} {}: acc {:.4} in {:?}",
            kind.name(),
            fams,
            report.mean_accuracy,
            t.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_ablation() {
    let mut cfg = RunConfig::default();
    cfg.logit_max_iters = 150;
    cfg.jobs = 2;
    let (records, catalog) = build_corpus(&cfg);
    let plan = SplitPlan::new(10, cfg.seed);
    let t = Instant::now();
    let table = geosocial::evaluation::run_ablation(&records, &catalog, &plan, &cfg).unwrap();
    eprintln!("ablation in {:?}", t.elapsed());
    for row in &table.rows {
        eprintln!("{:<24} acc {:.4} f1 {:.4}", row.label, row.mean_accuracy, row.mean_macro_f1);
    }
}
