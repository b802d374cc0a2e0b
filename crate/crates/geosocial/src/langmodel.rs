//! Smoothed n-gram language models: Laplace unigrams/bigrams with backoff,
//! Dirichlet-smoothed unigrams for query likelihood scoring, and the
//! KL-divergence ranking of class-distinctive bigrams.
//!
//! Vocabularies are closed with a reserved `<unk>` token (training count 0)
//! so every smoothed distribution sums to exactly 1 over its declared
//! support. Natural log everywhere.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::features::Token;
use crate::{Error, Result};

/// Reserved out-of-vocabulary token.
pub const UNK: &str = "<unk>";

/// Smoothing scheme of a [`UnigramLm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Add-one: `p(t) = (count(t) + 1) / (total + |V|)`.
    Laplace,
    /// `p(t) = (count(t) + mu * p_bg(t)) / (total + mu)` against a
    /// Laplace-smoothed background over the same vocabulary.
    Dirichlet { mu: f64 },
}

#[derive(Serialize, Deserialize)]
struct UnigramDoc {
    version: u32,
    vocab: Vec<Token>,
    counts: Vec<u64>,
    total: u64,
    smoothing: Smoothing,
    background: Option<Box<UnigramDoc>>,
}

const LM_VERSION: u32 = 1;

/// Unigram language model over a closed vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "UnigramDoc", into = "UnigramDoc")]
pub struct UnigramLm {
    /// Sorted tokens; `<unk>` is always last.
    vocab: Vec<Token>,
    lookup: HashMap<Token, usize>,
    counts: Vec<u64>,
    total: u64,
    smoothing: Smoothing,
    background: Option<Box<UnigramLm>>,
}

impl From<UnigramDoc> for UnigramLm {
    fn from(doc: UnigramDoc) -> Self {
        let lookup = doc
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        UnigramLm {
            vocab: doc.vocab,
            lookup,
            counts: doc.counts,
            total: doc.total,
            smoothing: doc.smoothing,
            background: doc.background.map(|b| Box::new(UnigramLm::from(*b))),
        }
    }
}

impl From<UnigramLm> for UnigramDoc {
    fn from(lm: UnigramLm) -> Self {
        UnigramDoc {
            version: LM_VERSION,
            vocab: lm.vocab,
            counts: lm.counts,
            total: lm.total,
            smoothing: lm.smoothing,
            background: lm.background.map(|b| Box::new(UnigramDoc::from(*b))),
        }
    }
}

/// Deterministic closed vocabulary: sorted unique tokens, `<unk>` appended.
fn build_vocab(docs: &[Vec<Token>]) -> Vec<Token> {
    let mut vocab: Vec<Token> = docs
        .iter()
        .flatten()
        .filter(|t| t.as_str() != UNK)
        .cloned()
        .collect();
    vocab.sort();
    vocab.dedup();
    vocab.push(UNK.to_string());
    vocab
}

impl UnigramLm {
    /// Laplace-smoothed model; vocabulary from the training docs.
    pub fn train_laplace(docs: &[Vec<Token>]) -> Self {
        let vocab = build_vocab(docs);
        Self::with_vocab(vocab, docs, Smoothing::Laplace, None)
    }

    /// Dirichlet-smoothed model over the background's vocabulary. Training
    /// tokens outside that vocabulary count toward `<unk>`.
    pub fn train_dirichlet(docs: &[Vec<Token>], mu: f64, background: &UnigramLm) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::Config(format!("dirichlet mu must be > 0, got {mu}")));
        }
        Ok(Self::with_vocab(
            background.vocab.clone(),
            docs,
            Smoothing::Dirichlet { mu },
            Some(Box::new(background.clone())),
        ))
    }

    fn with_vocab(
        vocab: Vec<Token>,
        docs: &[Vec<Token>],
        smoothing: Smoothing,
        background: Option<Box<UnigramLm>>,
    ) -> Self {
        let lookup: HashMap<Token, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let unk_id = vocab.len() - 1;
        let mut counts = vec![0u64; vocab.len()];
        let mut total = 0u64;
        for doc in docs {
            for t in doc {
                let id = lookup.get(t).copied().unwrap_or(unk_id);
                counts[id] += 1;
                total += 1;
            }
        }
        UnigramLm {
            vocab,
            lookup,
            counts,
            total,
            smoothing,
            background,
        }
    }

    pub fn vocab(&self) -> &[Token] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn smoothing(&self) -> &Smoothing {
        &self.smoothing
    }

    fn id_of(&self, token: &str) -> usize {
        self.lookup
            .get(token)
            .copied()
            .unwrap_or(self.vocab.len() - 1)
    }

    pub(crate) fn prob_id(&self, id: usize) -> f64 {
        let c = self.counts[id] as f64;
        match &self.smoothing {
            Smoothing::Laplace => (c + 1.0) / (self.total as f64 + self.vocab.len() as f64),
            Smoothing::Dirichlet { mu } => {
                let bg = self
                    .background
                    .as_ref()
                    .expect("dirichlet model has a background");
                (c + mu * bg.prob_id(id)) / (self.total as f64 + mu)
            }
        }
    }

    /// Smoothed probability; out-of-vocabulary tokens map to `<unk>`.
    pub fn prob(&self, token: &str) -> f64 {
        self.prob_id(self.id_of(token))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&UnigramDoc::from(self.clone())).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Model(format!("unigram LM parse: {e}")))
    }
}

/// Log query likelihood of a token sequence: the sum of per-token log
/// probabilities, accumulated left to right. Empty input is 0 (the log of an
/// empty product).
pub fn query_log_likelihood(tokens: &[Token], lm: &UnigramLm) -> f64 {
    tokens.iter().fold(0.0, |acc, t| acc + lm.prob(t).ln())
}

#[derive(Serialize, Deserialize)]
struct BigramDoc {
    version: u32,
    unigram: UnigramDoc,
    context_counts: Vec<u64>,
    bigram_counts: Vec<((u32, u32), u64)>,
}

/// Bigram model with Laplace smoothing over seen contexts and backoff to the
/// Laplace unigram for unseen contexts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "BigramDoc", into = "BigramDoc")]
pub struct BigramLm {
    unigram: UnigramLm,
    context_counts: Vec<u64>,
    bigram_counts: HashMap<(u32, u32), u64>,
}

impl From<BigramDoc> for BigramLm {
    fn from(doc: BigramDoc) -> Self {
        BigramLm {
            unigram: UnigramLm::from(doc.unigram),
            context_counts: doc.context_counts,
            bigram_counts: doc.bigram_counts.into_iter().collect(),
        }
    }
}

impl From<BigramLm> for BigramDoc {
    fn from(lm: BigramLm) -> Self {
        let mut bigram_counts: Vec<((u32, u32), u64)> =
            lm.bigram_counts.into_iter().collect();
        bigram_counts.sort_by_key(|&(k, _)| k);
        BigramDoc {
            version: LM_VERSION,
            unigram: UnigramDoc::from(lm.unigram),
            context_counts: lm.context_counts,
            bigram_counts,
        }
    }
}

impl BigramLm {
    pub fn train(docs: &[Vec<Token>]) -> Self {
        let unigram = UnigramLm::train_laplace(docs);
        let mut context_counts = vec![0u64; unigram.vocab_size()];
        let mut bigram_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for doc in docs {
            for pair in doc.windows(2) {
                let a = unigram.id_of(&pair[0]) as u32;
                let b = unigram.id_of(&pair[1]) as u32;
                context_counts[a as usize] += 1;
                *bigram_counts.entry((a, b)).or_default() += 1;
            }
        }
        BigramLm {
            unigram,
            context_counts,
            bigram_counts,
        }
    }

    pub fn unigram(&self) -> &UnigramLm {
        &self.unigram
    }

    /// `p(w2 | w1)`: Laplace over the context when seen, otherwise the
    /// unigram fallback.
    pub fn cond_prob(&self, w1: &str, w2: &str) -> f64 {
        let a = self.unigram.id_of(w1);
        let b = self.unigram.id_of(w2);
        let ctx = self.context_counts[a];
        if ctx == 0 {
            return self.unigram.prob_id(b);
        }
        let c = self
            .bigram_counts
            .get(&(a as u32, b as u32))
            .copied()
            .unwrap_or(0) as f64;
        (c + 1.0) / (ctx as f64 + self.unigram.vocab_size() as f64)
    }

    /// Joint probability `p(w1) * p(w2 | w1)` under this model.
    pub fn joint_prob(&self, w1: &str, w2: &str) -> f64 {
        self.unigram.prob(w1) * self.cond_prob(w1, w2)
    }

    /// Bigram types observed in training, sorted lexicographically.
    pub fn observed_bigrams(&self) -> Vec<(Token, Token)> {
        let mut out: Vec<(Token, Token)> = self
            .bigram_counts
            .keys()
            .map(|&(a, b)| {
                (
                    self.unigram.vocab[a as usize].clone(),
                    self.unigram.vocab[b as usize].clone(),
                )
            })
            .collect();
        out.sort();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&BigramDoc::from(self.clone())).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Model(format!("bigram LM parse: {e}")))
    }
}

/// Kullback-Leibler divergence `sum p2 * ln(p2 / p1)` in nats. Both inputs
/// must be strictly positive distributions over the same support.
pub fn kl_divergence(p2: &[f64], p1: &[f64]) -> f64 {
    assert_eq!(p2.len(), p1.len(), "distributions must share support");
    p2.iter()
        .zip(p1)
        .map(|(&a, &b)| {
            debug_assert!(a > 0.0 && b > 0.0, "smoothing must keep support positive");
            a * (a / b).ln()
        })
        .sum()
}

/// Ranks bigram types by their contribution to the KL divergence between the
/// class model and the corpus model.
///
/// The event space is every bigram type observed in either training corpus;
/// each model's joint bigram probabilities are renormalized over that space
/// before the per-event contribution `P_class * ln(P_class / P_corpus)` is
/// computed. Descending by contribution, ties lexicographic.
pub fn top_k_distinguishing_bigrams(
    class_lm: &BigramLm,
    corpus_lm: &BigramLm,
    k: usize,
) -> Vec<((Token, Token), f64)> {
    let mut events = class_lm.observed_bigrams();
    events.extend(corpus_lm.observed_bigrams());
    events.sort();
    events.dedup();
    if events.is_empty() || k == 0 {
        return Vec::new();
    }

    let raw_class: Vec<f64> = events
        .iter()
        .map(|(a, b)| class_lm.joint_prob(a, b))
        .collect();
    let raw_corpus: Vec<f64> = events
        .iter()
        .map(|(a, b)| corpus_lm.joint_prob(a, b))
        .collect();
    let z_class: f64 = raw_class.iter().sum();
    let z_corpus: f64 = raw_corpus.iter().sum();

    let mut ranked: Vec<((Token, Token), f64)> = events
        .into_iter()
        .zip(raw_class.iter().zip(&raw_corpus))
        .map(|(event, (&qc, &qk))| {
            let pc = qc / z_class;
            let pk = qk / z_corpus;
            (event, pc * (pc / pk).ln())
        })
        .collect();
    ranked.sort_by(|(ea, ca), (eb, cb)| cb.total_cmp(ca).then_with(|| ea.cmp(eb)));
    ranked.truncate(k);
    ranked
}
