//! Linear classifiers over sparse feature vectors: multinomial logistic
//! regression trained by full-batch gradient descent with backtracking line
//! search, multinomial Naive Bayes, and the majority/random baselines.
//!
//! Training is deterministic: identical inputs and hyperparameters produce
//! bitwise-identical models. Argmax ties break toward the lowest class index
//! everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureVector;
use crate::util::{argmax, derive_seed};
use crate::{Error, Result};

/// A labeled design matrix of sparse rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<FeatureVector>,
    pub y: Vec<usize>,
    pub width: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(x: Vec<FeatureVector>, y: Vec<usize>, width: usize, n_classes: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Train(format!(
                "{} rows but {} labels",
                x.len(),
                y.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Train("need at least one class".to_string()));
        }
        for (i, label) in y.iter().enumerate() {
            if *label >= n_classes {
                return Err(Error::Train(format!("label {label} out of range at row {i}")));
            }
        }
        for (i, row) in x.iter().enumerate() {
            if let Some(&(col, _)) = row.entries().last() {
                if col as usize >= width {
                    return Err(Error::Train(format!(
                        "feature index {col} exceeds width {width} at row {i}"
                    )));
                }
            }
        }
        Ok(Dataset {
            x,
            y,
            width,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Empirical class frequencies.
    pub fn priors(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_classes];
        for &label in &self.y {
            counts[label] += 1.0;
        }
        let n = self.y.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

/// Numerically stable in-place softmax.
fn softmax(scores: &mut [f64]) {
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

/// Gradient-descent hyperparameters for [`train_logit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitConfig {
    pub l2_lambda: f64,
    pub max_iters: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub tol: f64,
}

impl Default for LogitConfig {
    fn default() -> Self {
        LogitConfig {
            l2_lambda: 1.0,
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression. Weights are a `C x (width + 1)` matrix,
/// the last column holding the per-class bias (excluded from the penalty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub n_classes: usize,
    pub width: usize,
    pub l2_lambda: f64,
    weights: Vec<f64>,
}

impl LogitModel {
    fn stride(&self) -> usize {
        self.width + 1
    }

    fn row(&self, class: usize) -> &[f64] {
        let s = self.stride();
        &self.weights[class * s..(class + 1) * s]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-class linear scores (pre-softmax).
    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let row = self.row(c);
                x.dot(row) + row[self.width]
            })
            .collect()
    }

    /// Class probabilities; sums to 1 within 1e-12.
    pub fn predict_proba(&self, x: &FeatureVector) -> Vec<f64> {
        let mut scores = self.scores(x);
        softmax(&mut scores);
        scores
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.scores(x))
    }
}

/// Mean cross-entropy plus the L2 penalty (biases excluded).
fn logit_loss(ds: &Dataset, weights: &[f64], lambda: f64) -> f64 {
    let stride = ds.width + 1;
    let n = ds.len() as f64;
    let mut nll = 0.0;
    let mut scores = vec![0.0; ds.n_classes];
    for (x, &y) in ds.x.iter().zip(&ds.y) {
        for (c, s) in scores.iter_mut().enumerate() {
            let row = &weights[c * stride..(c + 1) * stride];
            *s = x.dot(row) + row[ds.width];
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
        nll += logsum - scores[y];
    }
    let mut penalty = 0.0;
    for c in 0..ds.n_classes {
        for f in 0..ds.width {
            let w = weights[c * stride + f];
            penalty += w * w;
        }
    }
    nll / n + 0.5 * lambda * penalty
}

/// Gradient of [`logit_loss`] with respect to every parameter.
fn logit_gradient(ds: &Dataset, weights: &[f64], lambda: f64) -> Vec<f64> {
    let stride = ds.width + 1;
    let n = ds.len() as f64;
    let mut grad = vec![0.0; weights.len()];
    let mut probs = vec![0.0; ds.n_classes];
    for (x, &y) in ds.x.iter().zip(&ds.y) {
        for (c, s) in probs.iter_mut().enumerate() {
            let row = &weights[c * stride..(c + 1) * stride];
            *s = x.dot(row) + row[ds.width];
        }
        softmax(&mut probs);
        for (c, &p) in probs.iter().enumerate() {
            let coef = p - if c == y { 1.0 } else { 0.0 };
            let g = &mut grad[c * stride..(c + 1) * stride];
            for &(i, v) in x.entries() {
                g[i as usize] += coef * v;
            }
            g[ds.width] += coef;
        }
    }
    for v in grad.iter_mut() {
        *v /= n;
    }
    for c in 0..ds.n_classes {
        for f in 0..ds.width {
            grad[c * stride + f] += lambda * weights[c * stride + f];
        }
    }
    grad
}

/// Trains by full-batch gradient descent from zero init, with Armijo
/// backtracking on the step size. Stops when the gradient max-norm drops
/// below `tol` or after `max_iters` iterations.
pub fn train_logit(ds: &Dataset, cfg: &LogitConfig) -> Result<LogitModel> {
    if ds.is_empty() {
        return Err(Error::Train("empty training set".to_string()));
    }
    if cfg.l2_lambda < 0.0 {
        return Err(Error::Train("l2_lambda must be non-negative".to_string()));
    }
    let stride = ds.width + 1;
    let mut weights = vec![0.0; ds.n_classes * stride];
    let mut loss = logit_loss(ds, &weights, cfg.l2_lambda);
    let mut step: f64 = 1.0;

    for _ in 0..cfg.max_iters {
        let grad = logit_gradient(ds, &weights, cfg.l2_lambda);
        let ginf = grad.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        if ginf < cfg.tol {
            break;
        }
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();

        // Armijo backtracking along the negative gradient.
        step = (step * 2.0).min(1e4);
        let mut candidate;
        let mut new_loss;
        loop {
            candidate = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect::<Vec<f64>>();
            new_loss = logit_loss(ds, &candidate, cfg.l2_lambda);
            if !new_loss.is_finite() && !loss.is_finite() {
                return Err(Error::Train("non-finite loss during training".to_string()));
            }
            if new_loss <= loss - 1e-4 * step * gnorm2 || step < 1e-18 {
                break;
            }
            step *= 0.5;
        }
        if step < 1e-18 {
            // No descent possible at any representable step.
            break;
        }
        weights = candidate;
        loss = new_loss;
        if !loss.is_finite() {
            return Err(Error::Train("non-finite loss during training".to_string()));
        }
    }

    Ok(LogitModel {
        n_classes: ds.n_classes,
        width: ds.width,
        l2_lambda: cfg.l2_lambda,
        weights,
    })
}

/// Exposed for the finite-difference checks in tests.
pub fn logit_objective(ds: &Dataset, weights: &[f64], lambda: f64) -> f64 {
    logit_loss(ds, weights, lambda)
}

/// Exposed for the finite-difference checks in tests.
pub fn logit_objective_gradient(ds: &Dataset, weights: &[f64], lambda: f64) -> Vec<f64> {
    logit_gradient(ds, weights, lambda)
}

/// Multinomial Naive Bayes over non-negative feature values treated as
/// counts, with Laplace parameter `alpha`.
///
/// Real-valued columns that go negative in training (the LM log-likelihood
/// scores) are shifted to be non-negative by their training-set minimum; the
/// shift is stored in the model and applied at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    pub n_classes: usize,
    pub width: usize,
    pub alpha: f64,
    log_priors: Vec<f64>,
    /// `C x width` log feature probabilities, row-major.
    log_theta: Vec<f64>,
    /// Per-column shift (<= 0); non-zero only where training saw negatives.
    shift: Vec<f64>,
    /// Per-class constant absorbing the shift of absent entries.
    base: Vec<f64>,
}

pub fn train_nb(ds: &Dataset, alpha: f64) -> Result<NbModel> {
    if ds.is_empty() {
        return Err(Error::Train("empty training set".to_string()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Train("alpha must be positive".to_string()));
    }

    let mut shift = vec![0.0f64; ds.width];
    for x in &ds.x {
        for &(i, v) in x.entries() {
            let s = &mut shift[i as usize];
            if v < *s {
                *s = v;
            }
        }
    }

    let mut class_n = vec![0u64; ds.n_classes];
    let mut counts = vec![0.0f64; ds.n_classes * ds.width];
    for (x, &y) in ds.x.iter().zip(&ds.y) {
        class_n[y] += 1;
        let row = &mut counts[y * ds.width..(y + 1) * ds.width];
        for &(i, v) in x.entries() {
            row[i as usize] += v;
        }
    }
    // Shifted columns contribute -shift for every example of the class,
    // including rows where the column is absent (implicit zero).
    for c in 0..ds.n_classes {
        let n = class_n[c] as f64;
        for (f, &s) in shift.iter().enumerate() {
            if s < 0.0 {
                counts[c * ds.width + f] -= n * s;
            }
        }
    }

    let total_examples = ds.len() as f64;
    let mut log_priors = vec![0.0; ds.n_classes];
    let mut log_theta = vec![0.0; ds.n_classes * ds.width];
    for c in 0..ds.n_classes {
        log_priors[c] = ((class_n[c] as f64) / total_examples).ln();
        let row = &counts[c * ds.width..(c + 1) * ds.width];
        let total: f64 = row.iter().sum();
        let denom = total + alpha * ds.width as f64;
        for f in 0..ds.width {
            log_theta[c * ds.width + f] = ((row[f] + alpha) / denom).ln();
        }
    }

    let base = (0..ds.n_classes)
        .map(|c| {
            shift
                .iter()
                .enumerate()
                .filter(|&(_, &s)| s < 0.0)
                .map(|(f, &s)| -s * log_theta[c * ds.width + f])
                .sum()
        })
        .collect();

    Ok(NbModel {
        n_classes: ds.n_classes,
        width: ds.width,
        alpha,
        log_priors,
        log_theta,
        shift,
        base,
    })
}

impl NbModel {
    /// Per-class feature log probabilities, summing to 1 in probability
    /// space.
    pub fn theta_row(&self, class: usize) -> &[f64] {
        &self.log_theta[class * self.width..(class + 1) * self.width]
    }

    /// Unnormalized log posterior per class.
    pub fn log_posterior(&self, x: &FeatureVector) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let row = self.theta_row(c);
                let mut lp = self.log_priors[c] + self.base[c];
                for &(i, v) in x.entries() {
                    let f = i as usize;
                    // The stored base already covers -shift once per column;
                    // the sparse value contributes on top of it.
                    lp += v * row[f];
                }
                lp
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> Vec<f64> {
        let mut lp = self.log_posterior(x);
        softmax(&mut lp);
        lp
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.log_posterior(x))
    }
}

/// Baseline classifier kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Majority,
    Random,
}

/// Majority or seeded-random baseline. The random baseline derives its draw
/// from the record id, so predictions are reproducible and independent of
/// evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub majority_class: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl BaselineModel {
    pub fn majority(labels: &[usize], n_classes: usize) -> Self {
        let mut counts = vec![0.0; n_classes.max(1)];
        for &y in labels {
            counts[y] += 1.0;
        }
        BaselineModel {
            kind: BaselineKind::Majority,
            majority_class: argmax(&counts),
            n_classes,
            seed: 0,
        }
    }

    pub fn random(n_classes: usize, seed: u64) -> Self {
        BaselineModel {
            kind: BaselineKind::Random,
            majority_class: 0,
            n_classes,
            seed,
        }
    }

    pub fn predict(&self, record_id: &str) -> usize {
        match self.kind {
            BaselineKind::Majority => self.majority_class,
            BaselineKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, record_id));
                rng.gen_range(0..self.n_classes.max(1))
            }
        }
    }
}
