//! Word-embedding loading and a small convolutional text classifier: parallel
//! filter banks of widths {3,4,5} over the embedding matrix, ReLU, max-pool
//! per filter, then a softmax layer. Used per message (pipeline) and over
//! per-location mean-embedding rows (joint).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::SiteRecord;
use crate::features::{tokenize, Token};
use crate::langmodel::{query_log_likelihood, UnigramLm};
use crate::util::{argmax, derive_seed};
use crate::{Error, Result};

/// Token-to-vector table. Lookups are total: out-of-vocabulary tokens
/// resolve to the all-zeros vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

/// Diagnostics from loading an embedding file.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingLoadStats {
    pub n_tokens: usize,
    /// Lines whose token was already present; the later line wins.
    pub duplicates: usize,
}

impl EmbeddingTable {
    /// Reads the common text format: one line per word, the token followed
    /// by its decimals, space-separated. The dimension is fixed by the first
    /// line; any mismatch aborts.
    pub fn load(path: &Path) -> Result<(Self, EmbeddingLoadStats)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut dim = None;
        let mut stats = EmbeddingLoadStats::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line").to_string();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| Error::Embedding {
                        path: path.display().to_string(),
                        message: format!("line {}: bad value {p:?}: {e}", i + 1),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Embedding {
                        path: path.display().to_string(),
                        message: format!(
                            "line {}: dimension {} does not match {}",
                            i + 1,
                            values.len(),
                            d
                        ),
                    });
                }
                _ => {}
            }
            if vectors.insert(token, values).is_some() {
                stats.duplicates += 1;
            }
        }
        let dim = dim.ok_or_else(|| Error::Embedding {
            path: path.display().to_string(),
            message: "empty embedding file".to_string(),
        })?;
        stats.n_tokens = vectors.len();
        Ok((EmbeddingTable { dim, vectors }, stats))
    }

    /// Deterministic random table over a vocabulary, for corpora without
    /// pretrained vectors (synthetic runs). Values are uniform in +-0.1.
    pub fn seeded_random<I, S>(vocab: I, dim: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vectors = BTreeMap::new();
        for token in vocab {
            let token: String = token.into();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &token));
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
            vectors.insert(token, v);
        }
        EmbeddingTable { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Mean of the token vectors; out-of-vocabulary tokens contribute zeros.
    /// Empty input yields the zero vector.
    pub fn mean_embedding(&self, tokens: &[Token]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        for t in tokens {
            if let Some(v) = self.get(t) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// One embedding row per token of the text (pipeline CNN input).
    pub fn message_matrix(&self, text: &str) -> Vec<Vec<f64>> {
        tokenize(text)
            .iter()
            .map(|t| {
                self.get(t)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.dim])
            })
            .collect()
    }
}

/// One training or inference instance: an `n x dim` row matrix and a label.
#[derive(Debug, Clone)]
pub struct CnnExample {
    pub input: Vec<Vec<f64>>,
    pub label: usize,
}

/// CNN hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnnConfig {
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl CnnConfig {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        CnnConfig {
            filter_widths: vec![3, 4, 5],
            filters_per_width: 100,
            dim,
            n_classes,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 42,
        }
    }
}

/// Length of the valid-convolution output for input length `n` and filter
/// width `d`.
pub fn conv_output_len(n: usize, d: usize) -> usize {
    n - d + 1
}

/// The convolutional classifier. All parameters live in one flat vector:
/// filter tensors (each `width x dim`), filter biases, softmax weights
/// (`C x K`), softmax biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    /// Width of each of the K filters.
    widths: Vec<usize>,
    dim: usize,
    n_classes: usize,
    params: Vec<f64>,
}

impl CnnModel {
    /// Fresh model with uniform +-0.05 seeded init.
    pub fn init(cfg: &CnnConfig) -> Self {
        let mut widths = Vec::new();
        for &w in &cfg.filter_widths {
            for _ in 0..cfg.filters_per_width {
                widths.push(w);
            }
        }
        let mut model = CnnModel {
            widths,
            dim: cfg.dim,
            n_classes: cfg.n_classes,
            params: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model.params = (0..model.n_params())
            .map(|_| rng.gen_range(-0.05..0.05))
            .collect();
        model
    }

    pub fn n_filters(&self) -> usize {
        self.widths.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_params(&self) -> usize {
        let k = self.n_filters();
        let filter_values: usize = self.widths.iter().map(|w| w * self.dim).sum();
        filter_values + k + self.n_classes * k + self.n_classes
    }

    fn filter_offset(&self, k: usize) -> usize {
        self.widths[..k].iter().map(|w| w * self.dim).sum()
    }

    fn filter_bias_offset(&self) -> usize {
        self.widths.iter().map(|w| w * self.dim).sum()
    }

    fn out_w_offset(&self) -> usize {
        self.filter_bias_offset() + self.n_filters()
    }

    fn out_b_offset(&self) -> usize {
        self.out_w_offset() + self.n_classes * self.n_filters()
    }

    /// Max filter width; inputs shorter than this are right-padded with
    /// zero rows so the valid convolution stays defined.
    pub fn min_rows(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    /// Per-filter max-pooled ReLU activations.
    pub fn pooled(&self, input: &[Vec<f64>]) -> Vec<f64> {
        self.pooled_with_argmax(input).0
    }

    /// Pooling plus, per filter, the window index holding the (positive)
    /// maximum, for backpropagation.
    fn pooled_with_argmax(&self, input: &[Vec<f64>]) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = input.len().max(self.min_rows());
        let k = self.n_filters();
        let mut pooled = vec![0.0; k];
        let mut arg = vec![None; k];
        for f in 0..k {
            let width = self.widths[f];
            let weights = &self.params[self.filter_offset(f)..self.filter_offset(f) + width * self.dim];
            let bias = self.params[self.filter_bias_offset() + f];
            let mut best = 0.0f64;
            let mut best_t = None;
            for t in 0..conv_output_len(n, width) {
                let mut s = bias;
                for r in 0..width {
                    if let Some(row) = input.get(t + r) {
                        let w = &weights[r * self.dim..(r + 1) * self.dim];
                        for (wi, xi) in w.iter().zip(row) {
                            s += wi * xi;
                        }
                    }
                    // Rows past the input are zero padding: no contribution.
                }
                let activated = s.max(0.0);
                if activated > best {
                    best = activated;
                    best_t = Some(t);
                }
            }
            pooled[f] = best;
            arg[f] = best_t;
        }
        (pooled, arg)
    }

    fn logits_from_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        let k = self.n_filters();
        let ow = self.out_w_offset();
        let ob = self.out_b_offset();
        (0..self.n_classes)
            .map(|c| {
                let row = &self.params[ow + c * k..ow + (c + 1) * k];
                let mut s = self.params[ob + c];
                for (w, p) in row.iter().zip(pooled) {
                    s += w * p;
                }
                s
            })
            .collect()
    }

    /// Class probability vector; sums to 1 within 1e-6.
    pub fn forward(&self, input: &[Vec<f64>]) -> Vec<f64> {
        let mut logits = self.logits_from_pooled(&self.pooled(input));
        softmax_inplace(&mut logits);
        logits
    }

    pub fn predict(&self, input: &[Vec<f64>]) -> usize {
        argmax(&self.forward(input))
    }
}

fn softmax_inplace(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Mean cross-entropy of the model over examples.
pub fn cnn_loss(model: &CnnModel, examples: &[CnnExample]) -> f64 {
    let mut total = 0.0;
    for ex in examples {
        let probs = model.forward(&ex.input);
        total -= probs[ex.label].max(1e-300).ln();
    }
    total / examples.len().max(1) as f64
}

/// Analytic gradient of [`cnn_loss`] in the flat parameter layout.
pub fn cnn_gradient(model: &CnnModel, examples: &[CnnExample]) -> Vec<f64> {
    let k = model.n_filters();
    let ow = model.out_w_offset();
    let ob = model.out_b_offset();
    let fb = model.filter_bias_offset();
    let mut grad = vec![0.0; model.params.len()];

    for ex in examples {
        let (pooled, arg) = model.pooled_with_argmax(&ex.input);
        let mut probs = model.logits_from_pooled(&pooled);
        softmax_inplace(&mut probs);

        // d loss / d logits
        let mut delta = probs;
        delta[ex.label] -= 1.0;

        // Softmax layer.
        let mut dpooled = vec![0.0; k];
        for (c, &dc) in delta.iter().enumerate() {
            for f in 0..k {
                grad[ow + c * k + f] += dc * pooled[f];
                dpooled[f] += dc * model.params[ow + c * k + f];
            }
            grad[ob + c] += dc;
        }

        // Through max-pool and ReLU into each filter.
        for f in 0..k {
            let Some(t) = arg[f] else { continue };
            let ds = dpooled[f];
            if ds == 0.0 {
                continue;
            }
            let width = model.widths[f];
            let off = model.filter_offset(f);
            for r in 0..width {
                if let Some(row) = ex.input.get(t + r) {
                    let g = &mut grad[off + r * model.dim..off + (r + 1) * model.dim];
                    for (gi, xi) in g.iter_mut().zip(row) {
                        *gi += ds * xi;
                    }
                }
            }
            grad[fb + f] += ds;
        }
    }

    let n = examples.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

/// Mini-batch SGD with seeded shuffling; returns the epoch snapshot with the
/// lowest dev loss. With an empty dev set the final model is returned.
pub fn train_cnn(cfg: &CnnConfig, train: &[CnnExample], dev: &[CnnExample]) -> Result<CnnModel> {
    if train.is_empty() {
        return Err(Error::Train("empty CNN training set".to_string()));
    }
    for ex in train.iter().chain(dev) {
        if ex.label >= cfg.n_classes {
            return Err(Error::Train(format!("label {} out of range", ex.label)));
        }
        if ex.input.iter().any(|row| row.len() != cfg.dim) {
            return Err(Error::Train("input row width != embedding dim".to_string()));
        }
    }

    let mut model = CnnModel::init(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cnn-shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, CnnModel)> = None;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let examples: Vec<CnnExample> = batch.iter().map(|&i| train[i].clone()).collect();
            let grad = cnn_gradient(&model, &examples);
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        if !dev.is_empty() {
            let dev_loss = cnn_loss(&model, dev);
            if !dev_loss.is_finite() {
                return Err(Error::Train("non-finite dev loss".to_string()));
            }
            if best.as_ref().map_or(true, |(l, _)| dev_loss < *l) {
                best = Some((dev_loss, model.clone()));
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

/// Row-ordering strategy for the joint CNN input.
#[derive(Debug, Clone, Copy)]
pub enum MessageOrdering<'a> {
    /// Nearest message first.
    Distance,
    /// Messages grouped by their best-scoring class LM (catalog order),
    /// descending score within each group.
    LmScore(&'a [UnigramLm]),
    /// Seeded permutation derived from the record id.
    Random { seed: u64 },
}

/// Joint CNN input: one row per message, each the mean of its word vectors,
/// ordered by the chosen strategy.
pub fn joint_input(
    record: &SiteRecord,
    table: &EmbeddingTable,
    ordering: MessageOrdering<'_>,
) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = record
        .messages
        .iter()
        .map(|(m, _)| table.mean_embedding(&tokenize(&m.text)))
        .collect();

    let mut order: Vec<usize> = (0..rows.len()).collect();
    match ordering {
        MessageOrdering::Distance => {
            order.sort_by(|&a, &b| {
                let (ma, da) = &record.messages[a];
                let (mb, db) = &record.messages[b];
                da.total_cmp(db).then_with(|| ma.id.cmp(&mb.id))
            });
        }
        MessageOrdering::LmScore(lms) => {
            let keyed: Vec<(usize, f64)> = record
                .messages
                .iter()
                .map(|(m, _)| {
                    let tokens = tokenize(&m.text);
                    let scores: Vec<f64> = lms
                        .iter()
                        .map(|lm| query_log_likelihood(&tokens, lm))
                        .collect();
                    let best = argmax(&scores);
                    (best, scores[best])
                })
                .collect();
            order.sort_by(|&a, &b| {
                keyed[a]
                    .0
                    .cmp(&keyed[b].0)
                    .then_with(|| keyed[b].1.total_cmp(&keyed[a].1))
                    .then_with(|| record.messages[a].0.id.cmp(&record.messages[b].0.id))
            });
        }
        MessageOrdering::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &record.id));
            order.shuffle(&mut rng);
        }
    }
    order.into_iter().map(|i| rows[i].clone()).collect()
}
