//! The two learning approaches, model-agnostic over the linear classifiers
//! and the CNN.
//!
//! Pipeline: classify every message, form the observed predicted-label
//! distribution, and pick the type whose learned training profile it beats
//! by the largest positive margin. Joint: featurize the concatenated
//! multi-message (linear) or the stacked mean-embedding rows (CNN) and
//! classify once.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::{
    train_logit, train_nb, BaselineModel, Dataset, LogitConfig, LogitModel, NbModel,
};
use crate::config::RunConfig;
use crate::domain::{GeotaggedMessage, SiteRecord, TypeCatalog};
use crate::features::{tokenize, Extractor, FamilySet, FeatureFamily, FeatureRegistry};
use crate::langmodel::UnigramLm;
use crate::neural::{
    joint_input, train_cnn, CnnConfig, CnnExample, CnnModel, EmbeddingTable, MessageOrdering,
};
use crate::util::argmax;
use crate::{Error, Result};

/// One-step (joint) or two-step (pipeline) classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Pipeline,
    Joint,
}

impl Approach {
    pub fn name(self) -> &'static str {
        match self {
            Approach::Pipeline => "pipeline",
            Approach::Joint => "joint",
        }
    }
}

impl FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pipeline" => Ok(Approach::Pipeline),
            "joint" => Ok(Approach::Joint),
            other => Err(Error::Config(format!("unknown approach: {other}"))),
        }
    }
}

/// Trainable model kinds. `Oracle` reads the ground truth and exists for
/// harness sanity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logit,
    NaiveBayes,
    Cnn,
    Majority,
    Random,
    Oracle,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logit => "logit",
            ModelKind::NaiveBayes => "nb",
            ModelKind::Cnn => "cnn",
            ModelKind::Majority => "majority",
            ModelKind::Random => "random",
            ModelKind::Oracle => "oracle",
        }
    }

    /// Kinds that use the feature registry.
    pub fn is_linear(self) -> bool {
        matches!(self, ModelKind::Logit | ModelKind::NaiveBayes)
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(ModelKind::Logit),
            "nb" | "naive_bayes" | "naive-bayes" => Ok(ModelKind::NaiveBayes),
            "cnn" => Ok(ModelKind::Cnn),
            "majority" => Ok(ModelKind::Majority),
            "random" => Ok(ModelKind::Random),
            "oracle" => Ok(ModelKind::Oracle),
            other => Err(Error::Config(format!("unknown model kind: {other}"))),
        }
    }
}

/// A point on the class simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!(
                "not a distribution (sum {sum}): {values:?}"
            )));
        }
        Ok(LabelDistribution(values))
    }

    /// Fractions of each label among step-1 predictions.
    pub fn from_labels(labels: &[usize], n_classes: usize) -> Self {
        let mut counts = vec![0.0; n_classes];
        for &l in labels {
            counts[l] += 1.0;
        }
        let n = labels.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        LabelDistribution(counts)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// How step 2 compares the observed distribution to the learned profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Argmax of `observed[c] - learned[c][c]`: the type whose own-label
    /// share the observation most exceeds.
    DiagonalDifference,
    /// Nearest learned row by L1 distance.
    L1Distance,
}

impl FromStr for AggregationRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(AggregationRule::DiagonalDifference),
            "l1" => Ok(AggregationRule::L1Distance),
            other => Err(Error::Config(format!("unknown aggregation rule: {other}"))),
        }
    }
}

/// Learned per-class profile of step-1 predicted-label distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationProfile {
    /// `rows[c][l]`: mean fraction of messages of true-type-`c` training
    /// locations that step 1 predicted as `l`.
    pub rows: Vec<Vec<f64>>,
    /// Training locations per true class.
    pub class_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl AggregationProfile {
    /// Training-prior majority class, the fallback for empty message sets.
    pub fn prior_class(&self) -> usize {
        let counts: Vec<f64> = self.class_counts.iter().map(|&c| c as f64).collect();
        argmax(&counts)
    }

    pub fn priors(&self) -> Vec<f64> {
        let total: usize = self.class_counts.iter().sum();
        self.class_counts
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect()
    }
}

/// Averages per-location predicted-label fractions within each true class.
/// Classes with no training locations get a uniform row and a warning.
pub fn fit_profile(
    per_location: &[(usize, Vec<usize>)],
    n_classes: usize,
) -> AggregationProfile {
    let mut rows = vec![vec![0.0; n_classes]; n_classes];
    let mut class_counts = vec![0usize; n_classes];
    for (truth, labels) in per_location {
        let dist = LabelDistribution::from_labels(labels, n_classes);
        for (acc, v) in rows[*truth].iter_mut().zip(dist.as_slice()) {
            *acc += v;
        }
        class_counts[*truth] += 1;
    }
    let mut warnings = Vec::new();
    for c in 0..n_classes {
        if class_counts[c] == 0 {
            rows[c] = vec![1.0 / n_classes as f64; n_classes];
            warnings.push(format!("class {c} has no training locations; uniform profile row"));
        } else {
            let n = class_counts[c] as f64;
            rows[c].iter_mut().for_each(|v| *v /= n);
        }
    }
    AggregationProfile {
        rows,
        class_counts,
        warnings,
    }
}

/// Step-2 decision. Ties break toward the higher observed share, then the
/// lowest catalog index.
pub fn aggregate(
    observed: &LabelDistribution,
    profile: &AggregationProfile,
    rule: AggregationRule,
) -> usize {
    argmax_with_ties(&aggregation_scores(observed, profile, rule), observed.as_slice())
}

/// Per-class scores backing [`aggregate`]; higher is better for both rules.
pub fn aggregation_scores(
    observed: &LabelDistribution,
    profile: &AggregationProfile,
    rule: AggregationRule,
) -> Vec<f64> {
    let obs = observed.as_slice();
    match rule {
        AggregationRule::DiagonalDifference => obs
            .iter()
            .enumerate()
            .map(|(c, &o)| o - profile.rows[c][c])
            .collect(),
        AggregationRule::L1Distance => profile
            .rows
            .iter()
            .map(|row| -row.iter().zip(obs).map(|(r, o)| (r - o).abs()).sum::<f64>())
            .collect(),
    }
}

fn argmax_with_ties(scores: &[f64], observed: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best]
            || (scores[c] == scores[best] && observed[c] > observed[best])
        {
            best = c;
        }
    }
    best
}

/// The underlying predictor of a bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreModel {
    Logit(LogitModel),
    NaiveBayes(NbModel),
    Cnn {
        model: CnnModel,
        embeddings: EmbeddingTable,
    },
    Baseline(BaselineModel),
    Oracle,
}

/// Everything needed to classify new sites: approach, catalog, frozen
/// registry and language models, the core model, and the pipeline
/// aggregation profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub approach: Approach,
    pub kind: ModelKind,
    pub catalog: TypeCatalog,
    pub families: FamilySet,
    pub registry: Option<FeatureRegistry>,
    pub registry_hash: Option<u64>,
    pub class_lms: Option<Vec<UnigramLm>>,
    pub core: CoreModel,
    pub profile: Option<AggregationProfile>,
    pub aggregation_rule: AggregationRule,
    /// Training-corpus location priors, used for empty-input fallbacks.
    pub class_priors: Vec<f64>,
    pub tz_offset_secs: i64,
    pub radius_m: f64,
    /// Joint CNN row ordering (`random`, `distance` or `lm`).
    pub message_ordering: String,
    pub config_echo: serde_json::Value,
}

const BUNDLE_VERSION: u32 = 1;

/// A classification with its per-class scores: probabilities for joint and
/// baseline models, aggregation scores for pipeline models.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Per-approach default feature families: the best configurations reported
/// for each approach (joint: textual + n-grams; pipeline: n-grams +
/// spatio-temporal).
pub fn default_families(approach: Approach) -> FamilySet {
    match approach {
        Approach::Joint => FamilySet::only(FeatureFamily::Textual).with(FeatureFamily::Ngrams),
        Approach::Pipeline => {
            FamilySet::only(FeatureFamily::Ngrams).with(FeatureFamily::SpatioTemporal)
        }
    }
}

/// Trains one Dirichlet-smoothed unigram model per class on the message
/// texts of that class, against the whole-corpus Laplace background.
pub fn train_class_lms(
    records: &[SiteRecord],
    n_classes: usize,
    mu: f64,
) -> Result<Vec<UnigramLm>> {
    let mut per_class: Vec<Vec<Vec<String>>> = vec![Vec::new(); n_classes];
    let mut all_docs = Vec::new();
    for r in records {
        let Some(c) = r.truth_index() else {
            return Err(Error::Train(format!("record {} lacks a label", r.id)));
        };
        for (m, _) in &r.messages {
            let tokens = tokenize(&m.text);
            per_class[c].push(tokens.clone());
            all_docs.push(tokens);
        }
    }
    let background = UnigramLm::train_laplace(&all_docs);
    per_class
        .into_iter()
        .map(|docs| UnigramLm::train_dirichlet(&docs, mu, &background))
        .collect()
}

fn class_priors(records: &[SiteRecord], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_classes];
    for r in records {
        if let Some(c) = r.truth_index() {
            counts[c] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

fn corpus_vocabulary(records: &[SiteRecord]) -> Vec<String> {
    let mut vocab = BTreeSet::new();
    for r in records {
        for (m, _) in &r.messages {
            vocab.extend(tokenize(&m.text));
        }
    }
    vocab.into_iter().collect()
}

fn truths(records: &[SiteRecord]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            r.truth_index()
                .ok_or_else(|| Error::Train(format!("record {} lacks a label", r.id)))
        })
        .collect()
}

/// Trains a complete bundle on labeled records.
///
/// For pipeline models the step-1 classifier is trained on the individual
/// messages of `train` and the aggregation profile on its per-location
/// step-1 predictions. `dev` drives CNN epoch selection only. When the CNN
/// needs embeddings and none are supplied, a seeded-random table over the
/// training vocabulary is built (and noted in the bundle echo).
#[allow(clippy::too_many_arguments)]
pub fn fit_bundle(
    train: &[SiteRecord],
    dev: Option<&[SiteRecord]>,
    catalog: &TypeCatalog,
    approach: Approach,
    kind: ModelKind,
    families: FamilySet,
    lambda: f64,
    cfg: &RunConfig,
    embeddings: Option<&EmbeddingTable>,
) -> Result<ModelBundle> {
    if train.is_empty() {
        return Err(Error::Train("no training records".to_string()));
    }
    let n_classes = catalog.len();
    let priors = class_priors(train, n_classes);
    let tz = cfg.tz_offset_secs();

    let mut bundle = ModelBundle {
        version: BUNDLE_VERSION,
        approach,
        kind,
        catalog: catalog.clone(),
        families,
        registry: None,
        registry_hash: None,
        class_lms: None,
        core: CoreModel::Oracle,
        profile: None,
        aggregation_rule: cfg.aggregation_rule.parse()?,
        class_priors: priors,
        tz_offset_secs: tz,
        radius_m: cfg.radius_m,
        message_ordering: cfg.message_ordering.clone(),
        config_echo: cfg.echo(),
    };

    match kind {
        ModelKind::Oracle => return Ok(bundle),
        ModelKind::Majority => {
            let y = truths(train)?;
            bundle.core = CoreModel::Baseline(BaselineModel::majority(&y, n_classes));
            return Ok(bundle);
        }
        ModelKind::Random => {
            bundle.core = CoreModel::Baseline(BaselineModel::random(n_classes, cfg.seed));
            return Ok(bundle);
        }
        _ => {}
    }

    if kind.is_linear() {
        let lms = if families.contains(FeatureFamily::Lm) {
            Some(train_class_lms(train, n_classes, cfg.lm_mu)?)
        } else {
            None
        };

        let fit_texts: Vec<String> = match approach {
            Approach::Joint => train.iter().map(crate::features::joint_text).collect(),
            Approach::Pipeline => train
                .iter()
                .flat_map(|r| r.messages.iter().map(|(m, _)| m.text.clone()))
                .collect(),
        };
        let registry =
            FeatureRegistry::fit(&fit_texts, cfg.ngram_threshold, families, n_classes);
        let extractor = Extractor::new(&registry, lms.as_deref(), tz);

        let dataset = match approach {
            Approach::Joint => {
                let x = train.iter().map(|r| extractor.joint_vector(r)).collect();
                Dataset::new(x, truths(train)?, registry.width(), n_classes)?
            }
            Approach::Pipeline => {
                let mut x = Vec::new();
                let mut y = Vec::new();
                for r in train {
                    let c = r
                        .truth_index()
                        .ok_or_else(|| Error::Train(format!("record {} lacks a label", r.id)))?;
                    for (m, d) in &r.messages {
                        x.push(extractor.message_vector(m, *d));
                        y.push(c);
                    }
                }
                Dataset::new(x, y, registry.width(), n_classes)?
            }
        };

        let core = match kind {
            ModelKind::Logit => CoreModel::Logit(train_logit(
                &dataset,
                &LogitConfig {
                    l2_lambda: lambda,
                    max_iters: cfg.logit_max_iters,
                    tol: cfg.logit_tol,
                },
            )?),
            ModelKind::NaiveBayes => CoreModel::NaiveBayes(train_nb(&dataset, cfg.nb_alpha)?),
            _ => unreachable!("linear kinds only"),
        };

        bundle.registry_hash = Some(registry.content_hash());
        bundle.registry = Some(registry);
        bundle.class_lms = lms;
        bundle.core = core;
    } else {
        // CNN path.
        let table = match embeddings {
            Some(t) => t.clone(),
            None => EmbeddingTable::seeded_random(
                corpus_vocabulary(train),
                cfg.cnn_dim,
                cfg.seed,
            ),
        };
        let needs_lms = approach == Approach::Joint && cfg.message_ordering == "lm";
        let lms = if needs_lms {
            Some(train_class_lms(train, n_classes, cfg.lm_mu)?)
        } else {
            None
        };

        let cnn_cfg = CnnConfig {
            filter_widths: vec![3, 4, 5],
            filters_per_width: cfg.cnn_filters_per_width,
            dim: table.dim(),
            n_classes,
            learning_rate: cfg.cnn_learning_rate,
            batch_size: cfg.cnn_batch,
            epochs: cfg.cnn_epochs,
            seed: cfg.seed,
        };

        let to_examples = |records: &[SiteRecord]| -> Result<Vec<CnnExample>> {
            let mut out = Vec::new();
            for r in records {
                let c = r
                    .truth_index()
                    .ok_or_else(|| Error::Train(format!("record {} lacks a label", r.id)))?;
                match approach {
                    Approach::Joint => out.push(CnnExample {
                        input: joint_input(r, &table, ordering_of(cfg, lms.as_deref())?),
                        label: c,
                    }),
                    Approach::Pipeline => {
                        for (m, _) in &r.messages {
                            out.push(CnnExample {
                                input: table.message_matrix(&m.text),
                                label: c,
                            });
                        }
                    }
                }
            }
            Ok(out)
        };

        let train_examples = to_examples(train)?;
        let dev_examples = match dev {
            Some(records) => to_examples(records)?,
            None => Vec::new(),
        };
        let model = train_cnn(&cnn_cfg, &train_examples, &dev_examples)?;
        bundle.class_lms = lms;
        bundle.core = CoreModel::Cnn {
            model,
            embeddings: table,
        };
    }

    if approach == Approach::Pipeline {
        let per_location: Vec<(usize, Vec<usize>)> = train
            .iter()
            .filter(|r| !r.messages.is_empty())
            .map(|r| {
                let labels = bundle.step1_labels(r)?;
                Ok((r.truth_index().expect("labeled"), labels))
            })
            .collect::<Result<_>>()?;
        bundle.profile = Some(fit_profile(&per_location, n_classes));
    }

    Ok(bundle)
}

fn ordering_of<'a>(
    cfg: &RunConfig,
    lms: Option<&'a [UnigramLm]>,
) -> Result<MessageOrdering<'a>> {
    match cfg.message_ordering.as_str() {
        "distance" => Ok(MessageOrdering::Distance),
        "lm" => Ok(MessageOrdering::LmScore(lms.ok_or_else(|| {
            Error::Model("lm ordering needs class language models".to_string())
        })?)),
        "random" => Ok(MessageOrdering::Random { seed: cfg.seed }),
        other => Err(Error::Config(format!("unknown message ordering: {other}"))),
    }
}

impl ModelBundle {
    fn extractor(&self) -> Extractor<'_> {
        Extractor::new(
            self.registry.as_ref().expect("linear bundle has a registry"),
            self.class_lms.as_deref(),
            self.tz_offset_secs,
        )
    }

    /// Step-1 label for one message.
    pub fn predict_message(&self, message: &GeotaggedMessage, distance_m: f64) -> Result<usize> {
        match &self.core {
            CoreModel::Logit(m) => Ok(m.predict(&self.extractor().message_vector(message, distance_m))),
            CoreModel::NaiveBayes(m) => {
                Ok(m.predict(&self.extractor().message_vector(message, distance_m)))
            }
            CoreModel::Cnn { model, embeddings } => {
                Ok(model.predict(&embeddings.message_matrix(&message.text)))
            }
            CoreModel::Baseline(b) => Ok(b.predict(&message.id)),
            CoreModel::Oracle => Err(Error::Model(
               "oracle classifies locations, not messages".to_string(),
            )),
        }
    }

    /// Step-1 labels for every message of a record.
    pub fn step1_labels(&self, record: &SiteRecord) -> Result<Vec<usize>> {
        record
            .messages
            .iter()
            .map(|(m, d)| self.predict_message(m, *d))
            .collect()
    }

    /// Classifies a site record under the bundle's approach.
    pub fn classify(&self, record: &SiteRecord) -> Result<Classification> {
        match (&self.core, self.approach) {
            (CoreModel::Oracle, _) => {
                let class = record.truth_index().ok_or_else(|| {
                    Error::Model(format!("oracle needs ground truth on record {}", record.id))
                })?;
                let mut scores = vec![0.0; self.catalog.len()];
                scores[class] = 1.0;
                Ok(Classification { class, scores })
            }
            (CoreModel::Baseline(b), _) => {
                let class = b.predict(&record.id);
                let mut scores = vec![0.0; self.catalog.len()];
                scores[class] = 1.0;
                Ok(Classification { class, scores })
            }
            (_, Approach::Joint) => self.classify_joint(record),
            (_, Approach::Pipeline) => self.classify_pipeline(record),
        }
    }

    fn classify_joint(&self, record: &SiteRecord) -> Result<Classification> {
        let scores = match &self.core {
            CoreModel::Logit(m) => m.predict_proba(&self.extractor().joint_vector(record)),
            CoreModel::NaiveBayes(m) => m.predict_proba(&self.extractor().joint_vector(record)),
            CoreModel::Cnn { model, embeddings } => {
                let cfg_ordering = match self.message_ordering.as_str() {
                    "distance" => MessageOrdering::Distance,
                    "lm" => MessageOrdering::LmScore(
                        self.class_lms
                            .as_deref()
                            .ok_or_else(|| Error::Model("missing class LMs".to_string()))?,
                    ),
                    _ => MessageOrdering::Random { seed: 42 },
                };
                model.forward(&joint_input(record, embeddings, cfg_ordering))
            }
            CoreModel::Baseline(_) | CoreModel::Oracle => unreachable!("handled by classify"),
        };
        Ok(Classification {
            class: argmax(&scores),
            scores,
        })
    }

    fn classify_pipeline(&self, record: &SiteRecord) -> Result<Classification> {
        let profile = self
            .profile
            .as_ref()
            .ok_or_else(|| Error::Model("pipeline bundle lacks a profile".to_string()))?;
        if record.messages.is_empty() {
            // No evidence: fall back to the training-prior majority.
            return Ok(Classification {
                class: profile.prior_class(),
                scores: profile.priors(),
            });
        }
        let labels = self.step1_labels(record)?;
        let observed = LabelDistribution::from_labels(&labels, self.catalog.len());
        let scores = aggregation_scores(&observed, profile, self.aggregation_rule);
        let class = argmax_with_ties(&scores, observed.as_slice());
        Ok(Classification { class, scores })
    }

    /// Writes `model.json` (plus `registry.json` when present) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if let Some(reg) = &self.registry {
            let path = dir.join("registry.json");
            std::fs::write(&path, reg.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: ModelBundle =
            serde_json::from_str(&text).map_err(|e| Error::Model(format!("bundle parse: {e}")))?;
        if let (Some(reg), Some(hash)) = (&bundle.registry, bundle.registry_hash) {
            if reg.content_hash() != hash {
                return Err(Error::Model("registry hash mismatch".to_string()));
            }
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GeotaggedMessage;

    #[test]
    fn label_distribution_validates_simplex() {
        assert!(LabelDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(LabelDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(LabelDistribution::new(vec![1.5, -0.5]).is_err());
        let d = LabelDistribution::from_labels(&[0, 0, 1], 3);
        assert_eq!(d.as_slice(), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn fit_profile_perfect_step1_is_identity() {
        let data = vec![(0, vec![0, 0, 0]), (1, vec![1, 1]), (0, vec![0])];
        let profile = fit_profile(&data, 2);
        assert_eq!(profile.rows[0], vec![1.0, 0.0]);
        assert_eq!(profile.rows[1], vec![0.0, 1.0]);
        assert_eq!(profile.class_counts, vec![2, 1]);
    }

    #[test]
    fn fit_profile_constant_step1_stacks_first_column() {
        let data = vec![(0, vec![0, 0]), (1, vec![0, 0, 0]), (1, vec![0])];
        let profile = fit_profile(&data, 2);
        assert_eq!(profile.rows[0], vec![1.0, 0.0]);
        assert_eq!(profile.rows[1], vec![1.0, 0.0]);
    }

    #[test]
    fn fit_profile_hand_average() {
        // Class 0: [0,0,1] -> (2/3, 1/3) and [0,1] -> (1/2, 1/2);
        // mean row = (7/12, 5/12). Class 1: [1,1] -> (0, 1).
        let data = vec![(0, vec![0, 0, 1]), (0, vec![0, 1]), (1, vec![1, 1])];
        let profile = fit_profile(&data, 2);
        assert!((profile.rows[0][0] - 7.0 / 12.0).abs() < 1e-12);
        assert!((profile.rows[0][1] - 5.0 / 12.0).abs() < 1e-12);
        assert_eq!(profile.rows[1], vec![0.0, 1.0]);
    }

    #[test]
    fn fit_profile_missing_class_gets_uniform_row() {
        let profile = fit_profile(&[(0, vec![0])], 3);
        assert_eq!(profile.rows[1], vec![1.0 / 3.0; 3]);
        assert_eq!(profile.warnings.len(), 2);
    }

    fn two_class_profile() -> AggregationProfile {
        AggregationProfile {
            rows: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            class_counts: vec![1, 1],
            warnings: vec![],
        }
    }

    #[test]
    fn aggregate_diagonal_hand_examples() {
        let profile = two_class_profile();
        let rule = AggregationRule::DiagonalDifference;
        // observed (0.8, 0.2): score(A) = 0, score(B) = -0.5 -> A.
        let obs = LabelDistribution::new(vec![0.8, 0.2]).unwrap();
        assert_eq!(aggregate(&obs, &profile, rule), 0);
        // observed (0.3, 0.7): score(A) = -0.5, score(B) = 0 -> B.
        let obs = LabelDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(aggregate(&obs, &profile, rule), 1);
    }

    #[test]
    fn aggregate_identity_profile_returns_observed_peak() {
        let profile = AggregationProfile {
            rows: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            class_counts: vec![1, 1, 1],
            warnings: vec![],
        };
        for k in 0..3 {
            let mut v = vec![0.0; 3];
            v[k] = 1.0;
            let obs = LabelDistribution::new(v).unwrap();
            assert_eq!(aggregate(&obs, &profile, AggregationRule::DiagonalDifference), k);
        }
    }

    #[test]
    fn aggregate_ties_break_on_observed_then_index() {
        // Both classes score exactly 0; observed[1] is higher.
        let profile = AggregationProfile {
            rows: vec![vec![0.25, 0.75], vec![0.2, 0.55]],
            class_counts: vec![1, 1],
            warnings: vec![],
        };
        let obs = LabelDistribution::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(
            aggregate(&obs, &profile, AggregationRule::DiagonalDifference),
            1
        );

        // Fully symmetric tie: lowest index wins.
        let profile = AggregationProfile {
            rows: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            class_counts: vec![1, 1],
            warnings: vec![],
        };
        let obs = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(
            aggregate(&obs, &profile, AggregationRule::DiagonalDifference),
            0
        );
    }

    #[test]
    fn aggregate_l1_rule_picks_nearest_row() {
        let profile = two_class_profile();
        let obs = LabelDistribution::new(vec![0.75, 0.25]).unwrap();
        assert_eq!(aggregate(&obs, &profile, AggregationRule::L1Distance), 0);
        let obs = LabelDistribution::new(vec![0.35, 0.65]).unwrap();
        assert_eq!(aggregate(&obs, &profile, AggregationRule::L1Distance), 1);
    }

    fn msg(id: &str, ts: i64, text: &str) -> (GeotaggedMessage, f64) {
        (
            GeotaggedMessage::new(id, 40.0, -73.0, ts, text, None).unwrap(),
            2.0,
        )
    }

    fn labeled_record(id: &str, class: &str, texts: &[&str]) -> SiteRecord {
        let catalog = TypeCatalog::default_six();
        let messages = texts
            .iter()
            .enumerate()
            .map(|(i, t)| msg(&format!("{id}-{i}"), i as i64, t))
            .collect();
        SiteRecord::new(
            id,
            40.0,
            -73.0,
            catalog.by_name(class).cloned(),
            messages,
        )
        .unwrap()
    }

    fn toy_corpus() -> Vec<SiteRecord> {
        let mut records = Vec::new();
        for i in 0..6 {
            records.push(labeled_record(
                &format!("s{i}"),
                "school",
                &["teacher class exam", "homework class teacher", "exam grade class"],
            ));
            records.push(labeled_record(
                &format!("m{i}"),
                "museum",
                &["exhibit gallery art", "art sculpture gallery", "gallery tour art"],
            ));
        }
        records
    }

    fn toy_cfg() -> RunConfig {
        RunConfig {
            ngram_threshold: 1,
            logit_max_iters: 200,
            ..RunConfig::default()
        }
    }

    #[test]
    fn joint_logit_bundle_learns_toy_corpus() {
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let bundle = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Joint,
            ModelKind::Logit,
            FamilySet::only(FeatureFamily::Ngrams),
            0.01,
            &toy_cfg(),
            None,
        )
        .unwrap();
        for r in &records {
            let got = bundle.classify(r).unwrap();
            assert_eq!(got.class, r.truth_index().unwrap());
            assert!((got.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pipeline_bundle_classifies_and_falls_back_on_empty() {
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let bundle = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Pipeline,
            ModelKind::NaiveBayes,
            FamilySet::only(FeatureFamily::Ngrams),
            1.0,
            &toy_cfg(),
            None,
        )
        .unwrap();
        let correct = records
            .iter()
            .filter(|r| bundle.classify(r).unwrap().class == r.truth_index().unwrap())
            .count();
        assert!(correct >= 10, "pipeline got {correct}/12 on the toy corpus");

        let empty = SiteRecord::new("empty", 40.0, -73.0, None, vec![]).unwrap();
        let got = bundle.classify(&empty).unwrap();
        assert_eq!(got.class, bundle.profile.as_ref().unwrap().prior_class());
    }

    #[test]
    fn joint_singleton_matches_step1_without_spatio_temporal() {
        // With identical linear models and no spatio-temporal family, a
        // one-message location classifies exactly like its message.
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let families = FamilySet::only(FeatureFamily::Ngrams).with(FeatureFamily::Textual);
        let pipeline = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Pipeline,
            ModelKind::Logit,
            families,
            0.1,
            &toy_cfg(),
            None,
        )
        .unwrap();

        // Rewrap the step-1 model as a joint bundle over the same registry.
        let mut joint = pipeline.clone();
        joint.approach = Approach::Joint;
        joint.profile = None;

        for r in toy_corpus() {
            let single = SiteRecord::new(
                "one",
                r.lat,
                r.lon,
                r.truth.clone(),
                vec![r.messages[0].clone()],
            )
            .unwrap();
            let (m, d) = &single.messages[0];
            let step1 = pipeline.predict_message(m, *d).unwrap();
            let joint_class = joint.classify(&single).unwrap().class;
            assert_eq!(step1, joint_class);
        }
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let bundle = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Joint,
            ModelKind::Logit,
            FamilySet::only(FeatureFamily::Ngrams),
            0.01,
            &toy_cfg(),
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        for r in &records {
            assert_eq!(
                bundle.classify(r).unwrap(),
                loaded.classify(r).unwrap()
            );
        }
    }

    #[test]
    fn cnn_bundle_runs_with_seeded_embeddings() {
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let cfg = RunConfig {
            cnn_filters_per_width: 2,
            cnn_epochs: 2,
            cnn_dim: 8,
            ..toy_cfg()
        };
        let bundle = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Joint,
            ModelKind::Cnn,
            FamilySet::only(FeatureFamily::Ngrams),
            1.0,
            &cfg,
            None,
        )
        .unwrap();
        let got = bundle.classify(&records[0]).unwrap();
        assert!((got.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(got.class < catalog.len());
    }

    #[test]
    fn baseline_bundles() {
        let catalog = TypeCatalog::default_six();
        let records = toy_corpus();
        let cfg = toy_cfg();
        let majority = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Joint,
            ModelKind::Majority,
            FamilySet::all(),
            1.0,
            &cfg,
            None,
        )
        .unwrap();
        // Ties between school and museum (6 each) break to the lower index.
        assert_eq!(majority.classify(&records[1]).unwrap().class, 0);

        let oracle = fit_bundle(
            &records,
            None,
            &catalog,
            Approach::Joint,
            ModelKind::Oracle,
            FamilySet::all(),
            1.0,
            &cfg,
            None,
        )
        .unwrap();
        for r in &records {
            assert_eq!(oracle.classify(r).unwrap().class, r.truth_index().unwrap());
        }
    }
}
