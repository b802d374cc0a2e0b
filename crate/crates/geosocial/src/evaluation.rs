//! Experimental protocol: repeated seeded 64:16:20 splits (Monte Carlo
//! cross-validation), accuracy and per-class F1 metrics, the feature-family
//! ablation table, and the corpus analysis reports (distance bins, day
//! periods, POS prevalence, distinctive bigrams).
//!
//! Joint models resample across locations, pipeline and message-level runs
//! across messages (messages of one location may cross splits). Reports are
//! byte-identical across runs with the same seed and inputs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{SiteRecord, TypeCatalog};
use crate::features::{
    day_period_of_hour, distance_bin, local_seconds, pos_features, tokenize, FamilySet,
    FeatureFamily, DAY_PERIODS, DISTANCE_BINS, POS_TAGS,
};
use crate::langmodel::{top_k_distinguishing_bigrams, BigramLm};
use crate::neural::EmbeddingTable;
use crate::pipeline::{fit_bundle, default_families, Approach, ModelBundle, ModelKind};
use crate::util::derive_seed;
use crate::{Error, Result};

/// What a single evaluation classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Locations via the joint approach; splits across locations.
    Joint,
    /// Locations via the two-step approach; splits across messages.
    Pipeline,
    /// Individual messages (the pipeline's first step); splits across
    /// messages.
    MessageLevel,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Joint => "joint",
            EvalMode::Pipeline => "pipeline",
            EvalMode::MessageLevel => "message_level",
        }
    }

    fn approach(self) -> Approach {
        match self {
            EvalMode::Joint => Approach::Joint,
            EvalMode::Pipeline | EvalMode::MessageLevel => Approach::Pipeline,
        }
    }

    fn splits_locations(self) -> bool {
        self == EvalMode::Joint
    }
}

/// Repeated random-split plan; ratios must sum to 100.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub repetitions: usize,
    pub train_pct: u32,
    pub dev_pct: u32,
    pub test_pct: u32,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(repetitions: usize, seed: u64) -> Self {
        SplitPlan {
            repetitions,
            train_pct: 64,
            dev_pct: 16,
            test_pct: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_pct + self.dev_pct + self.test_pct != 100 {
            return Err(Error::Config(format!(
                "split ratios {}:{}:{} do not sum to 100",
                self.train_pct, self.dev_pct, self.test_pct
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Disjoint, exhaustive, deterministic per `(seed, rep)`.
    fn split(&self, n: usize, rep: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("rep-{rep}")));
        order.shuffle(&mut rng);
        let n_train = n * self.train_pct as usize / 100;
        let n_dev = n * self.dev_pct as usize / 100;
        let train = order[..n_train].to_vec();
        let dev = order[n_train..n_train + n_dev].to_vec();
        let test = order[n_train + n_dev..].to_vec();
        (train, dev, test)
    }
}

/// Per-class precision, recall and F1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Metrics derived from a confusion matrix (rows = truth, columns =
/// prediction). Undefined precision or recall (zero denominator) is
/// reported as 0 with a diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    pub diagnostics: Vec<String>,
}

pub fn metrics(confusion: &[Vec<usize>], class_names: &[String]) -> Metrics {
    let c = confusion.len();
    let mut diagnostics = Vec::new();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
    let accuracy = if total == 0 {
        diagnostics.push("empty confusion matrix".to_string());
        0.0
    } else {
        trace as f64 / total as f64
    };

    let mut per_class = Vec::with_capacity(c);
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for i in 0..c {
        let tp = confusion[i][i] as f64;
        let row_sum: usize = confusion[i].iter().sum();
        let col_sum: usize = (0..c).map(|r| confusion[r][i]).sum();
        if row_sum == 0 && col_sum == 0 {
            // Class plays no part in this evaluation; keep it out of the
            // macro average.
            diagnostics.push(format!(
                "class {}: absent from truth and predictions; excluded from macro-F1",
                class_names[i]
            ));
            per_class.push(ClassMetrics {
                name: class_names[i].clone(),
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 0,
            });
            continue;
        }
        let recall = if row_sum == 0 {
            diagnostics.push(format!("class {}: no true instances; recall = 0", class_names[i]));
            0.0
        } else {
            tp / row_sum as f64
        };
        let precision = if col_sum == 0 {
            diagnostics.push(format!(
                "class {}: never predicted; precision = 0",
                class_names[i]
            ));
            0.0
        } else {
            tp / col_sum as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        f1_classes += 1;
        per_class.push(ClassMetrics {
            name: class_names[i].clone(),
            precision,
            recall,
            f1,
            support: row_sum,
        });
    }

    Metrics {
        accuracy,
        macro_f1: f1_sum / f1_classes.max(1) as f64,
        per_class,
        confusion: confusion.to_vec(),
        diagnostics,
    }
}

/// Feature-family choice for an evaluation target.
#[derive(Debug, Clone)]
pub enum FamilyChoice {
    Fixed(FamilySet),
    /// Dev-set search over the 31 non-empty subsets.
    Search,
}

/// Regularization choice for logit targets.
#[derive(Debug, Clone)]
pub enum LambdaChoice {
    Fixed(f64),
    Grid(Vec<f64>),
}

impl LambdaChoice {
    /// The default tuning grid.
    pub fn default_grid() -> Self {
        LambdaChoice::Grid(vec![0.01, 0.1, 1.0, 10.0])
    }
}

/// One model to evaluate.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub mode: EvalMode,
    pub kind: ModelKind,
    pub families: FamilyChoice,
    pub lambda: LambdaChoice,
}

impl EvalTarget {
    /// Target with per-approach default families and a fixed lambda.
    pub fn new(mode: EvalMode, kind: ModelKind, cfg: &RunConfig) -> Result<Self> {
        let families = if cfg.families.is_empty() {
            FamilyChoice::Fixed(default_families(mode.approach()))
        } else if cfg.families == "search" {
            FamilyChoice::Search
        } else {
            FamilyChoice::Fixed(FamilySet::parse(&cfg.families)?)
        };
        let lambda = if kind == ModelKind::Logit && cfg.logit_lambda_grid {
            LambdaChoice::default_grid()
        } else {
            LambdaChoice::Fixed(cfg.logit_lambda)
        };
        Ok(EvalTarget {
            mode,
            kind,
            families,
            lambda,
        })
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.mode.name(), self.kind.name())
    }
}

/// Outcome of one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepResult {
    pub repetition: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub chosen_families: String,
    pub chosen_lambda: f64,
    pub notes: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
}

/// Aggregated evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: String,
    pub mode: String,
    pub per_rep: Vec<RepResult>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    /// Metrics over the confusion pooled across repetitions.
    pub pooled: Metrics,
    pub plan: SplitPlan,
    pub config_echo: serde_json::Value,
}

/// `(record index, message index)` instances for message-unit splitting.
fn message_instances(records: &[SiteRecord]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (r, record) in records.iter().enumerate() {
        for m in 0..record.messages.len() {
            out.push((r, m));
        }
    }
    out
}

/// Rebuilds records holding only the chosen message instances; records left
/// without messages are dropped.
fn subset_records(records: &[SiteRecord], instances: &[(usize, usize)]) -> Vec<SiteRecord> {
    let mut picked: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
    for &(r, m) in instances {
        picked[r].push(m);
    }
    let mut out = Vec::new();
    for (r, msgs) in picked.into_iter().enumerate() {
        if msgs.is_empty() {
            continue;
        }
        let src = &records[r];
        let messages: Vec<_> = msgs.into_iter().map(|m| src.messages[m].clone()).collect();
        out.push(
            SiteRecord::new(src.id.clone(), src.lat, src.lon, src.truth.clone(), messages)
                .expect("source record was valid"),
        );
    }
    out
}

/// Confusion matrix of a bundle over evaluation records.
fn score_bundle(
    bundle: &ModelBundle,
    records: &[SiteRecord],
    mode: EvalMode,
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for r in records {
        let truth = r
            .truth_index()
            .ok_or_else(|| Error::Train(format!("record {} lacks a label", r.id)))?;
        match mode {
            EvalMode::Joint | EvalMode::Pipeline => {
                let got = bundle.classify(r)?;
                confusion[truth][got.class] += 1;
            }
            EvalMode::MessageLevel => {
                for (m, d) in &r.messages {
                    let got = bundle.predict_message(m, *d)?;
                    confusion[truth][got] += 1;
                }
            }
        }
    }
    Ok(confusion)
}

fn accuracy_of(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    if total == 0 {
        return 0.0;
    }
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    trace as f64 / total as f64
}

fn candidate_families(target: &EvalTarget) -> Vec<FamilySet> {
    let raw = match &target.families {
        FamilyChoice::Fixed(set) => vec![*set],
        FamilyChoice::Search => FamilySet::power_set(),
    };
    if target.mode != EvalMode::Joint {
        return raw;
    }
    // Joint mode never emits spatio-temporal features, so subsets differing
    // only in that family are duplicates.
    let mut seen = Vec::new();
    for set in raw {
        let set = set.without(FeatureFamily::SpatioTemporal);
        if set.is_empty() || seen.contains(&set) {
            continue;
        }
        seen.push(set);
    }
    seen
}

fn candidate_lambdas(target: &EvalTarget) -> Vec<f64> {
    if target.kind != ModelKind::Logit {
        return vec![1.0];
    }
    match &target.lambda {
        LambdaChoice::Fixed(v) => vec![*v],
        LambdaChoice::Grid(vs) => vs.clone(),
    }
}

fn run_one_repetition(
    records: &[SiteRecord],
    catalog: &TypeCatalog,
    target: &EvalTarget,
    plan: &SplitPlan,
    cfg: &RunConfig,
    embeddings: Option<&EmbeddingTable>,
    rep: usize,
) -> Result<RepResult> {
    let n_classes = catalog.len();
    let mut notes = Vec::new();

    // Materialize train/dev/test record sets for the repetition.
    let (train, dev, test): (Vec<SiteRecord>, Vec<SiteRecord>, Vec<SiteRecord>) =
        if target.mode.splits_locations() {
            let (tr, de, te) = plan.split(records.len(), rep);
            let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
            (pick(tr), pick(de), pick(te))
        } else {
            let instances = message_instances(records);
            let (tr, de, te) = plan.split(instances.len(), rep);
            let pick = |idx: Vec<usize>| {
                let chosen: Vec<(usize, usize)> = idx.into_iter().map(|i| instances[i]).collect();
                subset_records(records, &chosen)
            };
            (pick(tr), pick(de), pick(te))
        };

    let mut train_class_present = vec![false; n_classes];
    for r in &train {
        if let Some(c) = r.truth_index() {
            train_class_present[c] = true;
        }
    }
    for (c, present) in train_class_present.iter().enumerate() {
        if !present {
            notes.push(format!(
                "class {} absent from the training slice",
                catalog.get(c).map(|t| t.name.as_str()).unwrap_or("?")
            ));
        }
    }
    if dev.is_empty() {
        notes.push("empty dev slice; first candidate kept".to_string());
    }

    // Dev-driven selection over the candidate grid.
    let mut best: Option<(f64, FamilySet, f64, ModelBundle)> = None;
    for families in candidate_families(target) {
        for lambda in candidate_lambdas(target) {
            let bundle = fit_bundle(
                &train,
                Some(&dev),
                catalog,
                target.mode.approach(),
                target.kind,
                families,
                lambda,
                cfg,
                embeddings,
            )?;
            let dev_acc = if dev.is_empty() {
                0.0
            } else {
                accuracy_of(&score_bundle(&bundle, &dev, target.mode, n_classes)?)
            };
            if best.as_ref().map_or(true, |(acc, ..)| dev_acc > *acc) {
                best = Some((dev_acc, families, lambda, bundle));
            }
        }
    }
    let (_, families, lambda, bundle) =
        best.ok_or_else(|| Error::Train("no candidate configuration".to_string()))?;

    let confusion = score_bundle(&bundle, &test, target.mode, n_classes)?;
    let names: Vec<String> = catalog.iter().map(|t| t.name.clone()).collect();
    let m = metrics(&confusion, &names);
    Ok(RepResult {
        repetition: rep,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        chosen_families: families.to_string(),
        chosen_lambda: lambda,
        notes,
        confusion,
    })
}

/// Runs the full protocol: for each repetition, seeded shuffle and
/// 64:16:20 slice, training on train with dev-set selection of the
/// feature-family and lambda candidates, scored on test. Repetitions run in
/// parallel (`cfg.jobs` threads; 0 = all cores) and are individually seeded,
/// so the report does not depend on scheduling.
pub fn run_eval(
    records: &[SiteRecord],
    catalog: &TypeCatalog,
    target: &EvalTarget,
    plan: &SplitPlan,
    cfg: &RunConfig,
    embeddings: Option<&EmbeddingTable>,
) -> Result<EvalReport> {
    plan.validate()?;
    if records.is_empty() {
        return Err(Error::Train("empty corpus".to_string()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Train(format!("thread pool: {e}")))?;
    let per_rep: Vec<RepResult> = pool.install(|| {
        (0..plan.repetitions)
            .into_par_iter()
            .map(|rep| run_one_repetition(records, catalog, target, plan, cfg, embeddings, rep))
            .collect::<Result<Vec<_>>>()
    })?;

    let n_classes = catalog.len();
    let mut pooled_confusion = vec![vec![0usize; n_classes]; n_classes];
    for r in &per_rep {
        for i in 0..n_classes {
            for j in 0..n_classes {
                pooled_confusion[i][j] += r.confusion[i][j];
            }
        }
    }
    let names: Vec<String> = catalog.iter().map(|t| t.name.clone()).collect();
    let pooled = metrics(&pooled_confusion, &names);
    let n = per_rep.len() as f64;
    Ok(EvalReport {
        target: target.describe(),
        mode: target.mode.name().to_string(),
        mean_accuracy: per_rep.iter().map(|r| r.accuracy).sum::<f64>() / n,
        mean_macro_f1: per_rep.iter().map(|r| r.macro_f1).sum::<f64>() / n,
        per_rep,
        pooled,
        plan: plan.clone(),
        config_echo: cfg.echo(),
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("evaluation: {}\n", self.target));
        out.push_str(&format!(
            "plan: {} repetitions, {}:{}:{} split, seed {}\n",
            self.plan.repetitions,
            self.plan.train_pct,
            self.plan.dev_pct,
            self.plan.test_pct,
            self.plan.seed
        ));
        out.push_str(&format!(
            "mean accuracy {:.4}, mean macro-F1 {:.4}\n\n",
            self.mean_accuracy, self.mean_macro_f1
        ));
        out.push_str("rep  accuracy  macro_f1  families  lambda  notes\n");
        for r in &self.per_rep {
            out.push_str(&format!(
                "{:>3}  {:.4}    {:.4}    {}  {}  {}\n",
                r.repetition,
                r.accuracy,
                r.macro_f1,
                r.chosen_families,
                r.chosen_lambda,
                r.notes.join("; ")
            ));
        }
        out.push_str("\nper-class (pooled over repetitions):\n");
        out.push_str("class  precision  recall  f1  support\n");
        for c in &self.pooled.per_class {
            out.push_str(&format!(
                "{}  {:.4}  {:.4}  {:.4}  {}\n",
                c.name, c.precision, c.recall, c.f1, c.support
            ));
        }
        if !self.pooled.diagnostics.is_empty() {
            out.push_str("\ndiagnostics:\n");
            for d in &self.pooled.diagnostics {
                out.push_str(&format!("- {d}\n"));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep,accuracy,macro_f1,families,lambda,notes\n");
        for r in &self.per_rep {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{}\n",
                r.repetition,
                r.accuracy,
                r.macro_f1,
                r.chosen_families,
                r.chosen_lambda,
                r.notes.join(" | ")
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},,,\n",
            self.mean_accuracy, self.mean_macro_f1
        ));
        out
    }

    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = self.pooled.per_class.iter().map(|c| c.name.as_str()).collect();
        let mut out = format!("truth\\pred,{}\n", names.join(","));
        for (i, row) in self.pooled.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!("{},{}\n", names[i], cells.join(",")));
        }
        out
    }

    /// Writes `<stem>.txt`, `<stem>.csv`, `<stem>_confusion.csv` and
    /// `<stem>_config.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in [
            (format!("{stem}.txt"), self.to_text()),
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}_confusion.csv"), self.confusion_csv()),
            (
                format!("{stem}_config.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "target": self.target,
                    "plan": self.plan,
                    "config": self.config_echo,
                }))
                .expect("serializable"),
            ),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// One ablation row: a family configuration and its mean scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub families: String,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

/// The 11-row ablation table: all families, each family alone, and all
/// families but one; message-level logit throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub plan: SplitPlan,
    pub config_echo: serde_json::Value,
}

pub fn run_ablation(
    records: &[SiteRecord],
    catalog: &TypeCatalog,
    plan: &SplitPlan,
    cfg: &RunConfig,
) -> Result<AblationTable> {
    let mut configs: Vec<(String, FamilySet)> = vec![("all".to_string(), FamilySet::all())];
    for f in FeatureFamily::ALL {
        configs.push((format!("single:{}", f.name()), FamilySet::only(f)));
    }
    for f in FeatureFamily::ALL {
        configs.push((format!("all_but:{}", f.name()), FamilySet::all().without(f)));
    }

    let mut rows = Vec::with_capacity(configs.len());
    for (label, families) in configs {
        let target = EvalTarget {
            mode: EvalMode::MessageLevel,
            kind: ModelKind::Logit,
            families: FamilyChoice::Fixed(families),
            lambda: LambdaChoice::Fixed(cfg.logit_lambda),
        };
        let report = run_eval(records, catalog, &target, plan, cfg, None)?;
        rows.push(AblationRow {
            label,
            families: families.to_string(),
            mean_accuracy: report.mean_accuracy,
            mean_macro_f1: report.mean_macro_f1,
        });
    }
    Ok(AblationTable {
        rows,
        plan: plan.clone(),
        config_echo: cfg.echo(),
    })
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,families,mean_accuracy,mean_macro_f1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.label, r.families, r.mean_accuracy, r.mean_macro_f1
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "family            single acc  single f1   all-but acc  all-but f1\n",
        );
        let all = self.row("all").expect("all row present");
        out.push_str(&format!(
            "all features      {:.4}      {:.4}      -            -\n",
            all.mean_accuracy, all.mean_macro_f1
        ));
        for f in FeatureFamily::ALL {
            let single = self.row(&format!("single:{}", f.name())).expect("row");
            let without = self.row(&format!("all_but:{}", f.name())).expect("row");
            out.push_str(&format!(
                "{:<17} {:.4}      {:.4}      {:.4}       {:.4}\n",
                f.name(),
                single.mean_accuracy,
                single.mean_macro_f1,
                without.mean_accuracy,
                without.mean_macro_f1
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in [
            ("ablation.csv".to_string(), self.to_csv()),
            ("ablation.txt".to_string(), self.to_text()),
            (
                "ablation_config.json".to_string(),
                serde_json::to_string_pretty(&serde_json::json!({
                    "plan": self.plan,
                    "config": self.config_echo,
                }))
                .expect("serializable"),
            ),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Corpus-level analyses: per-class distance-bin and day-period shares, POS
/// prevalence, and the top distinguishing bigrams per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub class_names: Vec<String>,
    /// Percentages per class over adjacent/near/far.
    pub distance_pct: Vec<[f64; 3]>,
    /// Percentages per class over the seven day periods.
    pub day_period_pct: Vec<[f64; 7]>,
    /// Percentages per class over the 13 POS tags.
    pub pos_pct: Vec<[f64; 13]>,
    pub overall_pos_pct: [f64; 13],
    /// Top bigrams per class with their KL contribution.
    pub top_bigrams: Vec<Vec<(String, f64)>>,
    pub unknown_pos_tags: usize,
    pub warnings: Vec<String>,
    pub config_echo: serde_json::Value,
}

pub fn corpus_analysis(
    records: &[SiteRecord],
    catalog: &TypeCatalog,
    cfg: &RunConfig,
) -> Result<AnalysisReport> {
    let n_classes = catalog.len();
    let tz = cfg.tz_offset_secs();
    let mut warnings = Vec::new();

    let mut distance_counts = vec![[0usize; 3]; n_classes];
    let mut period_counts = vec![[0usize; 7]; n_classes];
    let mut pos_counts = vec![[0.0f64; 13]; n_classes];
    let mut unknown_pos = 0usize;
    let mut class_docs: Vec<Vec<Vec<String>>> = vec![Vec::new(); n_classes];
    let mut all_docs: Vec<Vec<String>> = Vec::new();

    for r in records {
        let Some(c) = r.truth_index() else {
            return Err(Error::Train(format!("record {} lacks a label", r.id)));
        };
        for (m, d) in &r.messages {
            distance_counts[c][distance_bin(*d)] += 1;
            let hour = (local_seconds(m.ts, tz) / 3600) as u32;
            period_counts[c][day_period_of_hour(hour)] += 1;
            let (tags, unknown) = pos_features(m.pos.as_deref());
            unknown_pos += unknown;
            for (acc, v) in pos_counts[c].iter_mut().zip(tags) {
                *acc += v;
            }
            let tokens = tokenize(&m.text);
            class_docs[c].push(tokens.clone());
            all_docs.push(tokens);
        }
    }

    let to_pct = |counts: &[usize]| -> Vec<f64> {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&v| if total == 0 { 0.0 } else { 100.0 * v as f64 / total as f64 })
            .collect()
    };

    let mut distance_pct = Vec::new();
    let mut day_period_pct = Vec::new();
    let mut pos_pct = Vec::new();
    for c in 0..n_classes {
        if class_docs[c].is_empty() {
            warnings.push(format!(
                "class {} has no messages",
                catalog.get(c).map(|t| t.name.as_str()).unwrap_or("?")
            ));
        }
        let d = to_pct(&distance_counts[c]);
        distance_pct.push([d[0], d[1], d[2]]);
        let p = to_pct(&period_counts[c]);
        day_period_pct.push([p[0], p[1], p[2], p[3], p[4], p[5], p[6]]);

        let total: f64 = pos_counts[c].iter().sum();
        let mut row = [0.0; 13];
        if total > 0.0 {
            for (o, &v) in row.iter_mut().zip(&pos_counts[c]) {
                *o = 100.0 * v / total;
            }
        }
        pos_pct.push(row);
    }

    let mut overall_pos = [0.0f64; 13];
    for c in 0..n_classes {
        for (o, v) in overall_pos.iter_mut().zip(&pos_counts[c]) {
            *o += v;
        }
    }
    let overall_total: f64 = overall_pos.iter().sum();
    if overall_total > 0.0 {
        overall_pos.iter_mut().for_each(|v| *v = 100.0 * *v / overall_total);
    } else {
        warnings.push("corpus carries no POS tags; prevalence table is all zero".to_string());
    }

    // Distinctive bigrams: class bigram model against the corpus model.
    let corpus_lm = BigramLm::train(&all_docs);
    let mut top_bigrams = Vec::with_capacity(n_classes);
    for docs in &class_docs {
        if docs.is_empty() {
            top_bigrams.push(Vec::new());
            continue;
        }
        let class_lm = BigramLm::train(docs);
        let ranked = top_k_distinguishing_bigrams(&class_lm, &corpus_lm, 10);
        top_bigrams.push(
            ranked
                .into_iter()
                .map(|((a, b), score)| (format!("{a} {b}"), score))
                .collect(),
        );
    }

    Ok(AnalysisReport {
        class_names: catalog.iter().map(|t| t.name.clone()).collect(),
        distance_pct,
        day_period_pct,
        pos_pct,
        overall_pos_pct: overall_pos,
        top_bigrams,
        unknown_pos_tags: unknown_pos,
        warnings,
        config_echo: cfg.echo(),
    })
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("corpus analysis\n\ndistance from entity (%):\n");
        out.push_str(&format!("class,{}\n", DISTANCE_BINS.join(",")));
        for (name, row) in self.class_names.iter().zip(&self.distance_pct) {
            out.push_str(&format!("{name},{:.2},{:.2},{:.2}\n", row[0], row[1], row[2]));
        }
        out.push_str("\nday periods (%):\n");
        out.push_str(&format!("class,{}\n", DAY_PERIODS.join(",")));
        for (name, row) in self.class_names.iter().zip(&self.day_period_pct) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out.push_str("\nPOS prevalence (%):\n");
        out.push_str(&format!("class,{}\n", POS_TAGS.join(",")));
        let mut rows: Vec<(&str, &[f64; 13])> = vec![("all", &self.overall_pos_pct)];
        for (name, row) in self.class_names.iter().zip(&self.pos_pct) {
            rows.push((name, row));
        }
        for (name, row) in rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out.push_str("\ntop distinguishing bigrams per class:\n");
        for (name, bigrams) in self.class_names.iter().zip(&self.top_bigrams) {
            let items: Vec<String> = bigrams
                .iter()
                .map(|(b, s)| format!("{b} ({s:.5})"))
                .collect();
            out.push_str(&format!("{name}: {}\n", items.join(", ")));
        }
        if self.unknown_pos_tags > 0 {
            out.push_str(&format!("\nunknown POS tags ignored: {}\n", self.unknown_pos_tags));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();

        let mut distance = format!("class,{}\n", DISTANCE_BINS.join(","));
        for (name, row) in self.class_names.iter().zip(&self.distance_pct) {
            distance.push_str(&format!("{name},{:.4},{:.4},{:.4}\n", row[0], row[1], row[2]));
        }
        let mut period = format!("class,{}\n", DAY_PERIODS.join(","));
        for (name, row) in self.class_names.iter().zip(&self.day_period_pct) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            period.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        let mut pos = format!("class,{}\n", POS_TAGS.join(","));
        {
            let cells: Vec<String> = self.overall_pos_pct.iter().map(|v| format!("{v:.4}")).collect();
            pos.push_str(&format!("all,{}\n", cells.join(",")));
        }
        for (name, row) in self.class_names.iter().zip(&self.pos_pct) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            pos.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        let mut bigrams = String::from("class,rank,bigram,contribution\n");
        for (name, list) in self.class_names.iter().zip(&self.top_bigrams) {
            for (rank, (bigram, score)) in list.iter().enumerate() {
                bigrams.push_str(&format!("{name},{},{bigram},{score:.8}\n", rank + 1));
            }
        }

        for (file, contents) in [
            ("analysis_distance.csv", distance),
            ("analysis_day_period.csv", period),
            ("analysis_pos.csv", pos),
            ("analysis_bigrams.csv", bigrams),
            ("analysis.txt", self.to_text()),
            (
                "analysis_config.json",
                serde_json::to_string_pretty(&self.config_echo).expect("serializable"),
            ),
        ] {
            let path = dir.join(file);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GeotaggedMessage;

    fn catalog() -> TypeCatalog {
        TypeCatalog::default_six()
    }

    #[test]
    fn metrics_identity_confusion() {
        let names = vec!["a".to_string(), "b".to_string()];
        let m = metrics(&[vec![3, 0], vec![0, 2]], &names);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        for c in &m.per_class {
            assert_eq!(c.f1, 1.0);
        }
    }

    #[test]
    fn metrics_hand_two_by_two() {
        // [[3,1],[2,4]]: P0 = 3/5, R0 = 3/4, F1_0 = 2/3.
        let names = vec!["a".to_string(), "b".to_string()];
        let m = metrics(&[vec![3, 1], vec![2, 4]], &names);
        assert!((m.per_class[0].precision - 0.6).abs() < 1e-12);
        assert!((m.per_class[0].recall - 0.75).abs() < 1e-12);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!(m.macro_f1 <= m.per_class.iter().map(|c| c.f1).fold(0.0, f64::max));
    }

    #[test]
    fn metrics_zero_denominators_are_zero_with_diagnostics() {
        let names = vec!["a".to_string(), "b".to_string()];
        // Everything predicted as class 0, truth all class 1.
        let m = metrics(&[vec![0, 0], vec![3, 0]], &names);
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.per_class[0].recall, 0.0);
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[0].f1, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!(!m.diagnostics.is_empty());
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_deterministic() {
        let plan = SplitPlan::new(3, 11);
        for rep in 0..3 {
            let (a, b, c) = plan.split(103, rep);
            let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            assert_eq!(all.len(), 103);
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 103);
            assert_eq!(a.len(), 103 * 64 / 100);
            assert_eq!(b.len(), 103 * 16 / 100);

            let (a2, ..) = plan.split(103, rep);
            assert_eq!(a, a2);
        }
        let (a0, ..) = plan.split(103, 0);
        let (a1, ..) = plan.split(103, 1);
        assert_ne!(a0, a1);
    }

    fn labeled_record(id: &str, class: &str, texts: &[&str]) -> SiteRecord {
        let cat = catalog();
        let messages = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (
                    GeotaggedMessage::new(format!("{id}-m{i}"), 40.0, -73.0, i as i64, *t, None)
                        .unwrap(),
                    1.5,
                )
            })
            .collect();
        SiteRecord::new(id, 40.0, -73.0, cat.by_name(class).cloned(), messages).unwrap()
    }

    fn toy_corpus() -> Vec<SiteRecord> {
        let mut out = Vec::new();
        for i in 0..10 {
            out.push(labeled_record(
                &format!("s{i}"),
                "school",
                &["teacher class exam", "class homework", "exam teacher"],
            ));
            out.push(labeled_record(
                &format!("h{i}"),
                "health",
                &["doctor nurse clinic", "clinic visit", "nurse doctor"],
            ));
        }
        out
    }

    fn fast_cfg() -> RunConfig {
        RunConfig {
            ngram_threshold: 1,
            logit_max_iters: 80,
            repetitions: 3,
            jobs: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn oracle_target_scores_perfectly() {
        let cfg = fast_cfg();
        let records = toy_corpus();
        let target = EvalTarget::new(EvalMode::Joint, ModelKind::Oracle, &cfg).unwrap();
        let plan = SplitPlan::new(3, 5);
        let report = run_eval(&records, &catalog(), &target, &plan, &cfg, None).unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.mean_macro_f1, 1.0);
    }

    #[test]
    fn joint_logit_beats_chance_on_separable_toy() {
        let mut cfg = fast_cfg();
        cfg.families = "ngrams".to_string();
        let records = toy_corpus();
        let target = EvalTarget::new(EvalMode::Joint, ModelKind::Logit, &cfg).unwrap();
        let plan = SplitPlan::new(3, 5);
        let report = run_eval(&records, &catalog(), &target, &plan, &cfg, None).unwrap();
        assert!(report.mean_accuracy > 0.9, "accuracy {}", report.mean_accuracy);
    }

    #[test]
    fn reports_are_reproducible() {
        let mut cfg = fast_cfg();
        cfg.families = "ngrams".to_string();
        cfg.jobs = 2;
        let records = toy_corpus();
        let target = EvalTarget::new(EvalMode::Pipeline, ModelKind::NaiveBayes, &cfg).unwrap();
        let plan = SplitPlan::new(3, 5);
        let a = run_eval(&records, &catalog(), &target, &plan, &cfg, None).unwrap();
        let b = run_eval(&records, &catalog(), &target, &plan, &cfg, None).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn ablation_has_eleven_rows() {
        let mut cfg = fast_cfg();
        cfg.repetitions = 1;
        let records = toy_corpus();
        let plan = SplitPlan::new(1, 5);
        let table = run_ablation(&records, &catalog(), &plan, &cfg).unwrap();
        assert_eq!(table.rows.len(), 11);
        assert!(table.row("all").is_some());
        assert!(table.row("single:ngrams").is_some());
        assert!(table.row("all_but:spatio_temporal").is_some());
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 12, "header + 11 rows");
    }

    #[test]
    fn analysis_all_messages_adjacent() {
        let cfg = fast_cfg();
        let records = vec![
            labeled_record("s0", "school", &["a b", "c d"]),
            labeled_record("h0", "health", &["e f"]),
        ];
        let report = corpus_analysis(&records, &catalog(), &cfg).unwrap();
        let school = catalog().by_name("school").unwrap().index;
        assert_eq!(report.distance_pct[school][0], 100.0, "all at 1.5 m");
        // No POS tags anywhere.
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("no POS tags")));
        assert_eq!(report.overall_pos_pct.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn analysis_counts_unknown_tags() {
        let cfg = fast_cfg();
        let cat = catalog();
        let m = GeotaggedMessage::new("m", 40.0, -73.0, 0, "one two", Some(vec![
            "NN".to_string(),
            "XX".to_string(),
        ]))
        .unwrap();
        let rec =
            SiteRecord::new("e", 40.0, -73.0, cat.by_name("shop").cloned(), vec![(m, 3.0)])
                .unwrap();
        let report = corpus_analysis(&[rec], &cat, &cfg).unwrap();
        assert_eq!(report.unknown_pos_tags, 1);
        let shop = cat.by_name("shop").unwrap().index;
        assert_eq!(report.pos_pct[shop][5], 100.0, "NN is the only known tag");
    }
}
