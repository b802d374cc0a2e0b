//! Canonical tokenizer and the hand-crafted feature families, producing
//! sparse vectors for single messages (pipeline mode) and for concatenated
//! multi-messages (joint mode).
//!
//! Column layout is owned by a fitted [`FeatureRegistry`]: enabled families
//! occupy contiguous segments in a fixed order (textual, n-grams, LM scores,
//! POS, spatio-temporal). The registry is frozen after fitting; n-grams not
//! seen at fit time map to no column.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::{GeotaggedMessage, SiteRecord};
use crate::langmodel::{query_log_likelihood, UnigramLm};
use crate::{Error, Result};

/// A canonical token: lowercased, non-empty, whitespace-free.
pub type Token = String;

/// Width of the textual family: 4 word-count bins + 4 character-count bins
/// + 24 counted symbols.
pub const TEXTUAL_WIDTH: usize = 32;
/// Width of the POS family: the 13 major tags in [`POS_TAGS`] order.
pub const POS_WIDTH: usize = 13;
/// Width of the spatio-temporal family: 2 raw signals + 3 distance bins +
/// 7 day-period bins. The raw pair is kept in the first two columns so an
/// ablation can use either form.
pub const SPATIO_TEMPORAL_WIDTH: usize = 12;

/// The fixed symbol list counted by the textual family, in column order.
pub const COUNTED_SYMBOLS: [char; 24] = [
    '!', '?', '.', ',', ';', ':', '\'', '"', '@', '#', '$', '%', '&', '*', '(', ')', '-', '_',
    '/', '\\', '+', '=', '~', '^',
];

/// The 13 major POS tags, in column order.
pub const POS_TAGS: [&str; 13] = [
    "CD", "DT", "FW", "IN", "JJ", "NN", "NNP", "NNS", "PRP", "RB", "VB", "VBG", "VBP",
];

/// Day-period names, in column order. Bins are half-open on the local clock:
/// dawn [04,07), morning [07,11), noon [11,15), afternoon [15,18),
/// evening [18,21), night [21,24), late_night [00,04).
pub const DAY_PERIODS: [&str; 7] = [
    "dawn",
    "morning",
    "noon",
    "afternoon",
    "evening",
    "night",
    "late_night",
];

/// Distance-bin names: adjacent [0,5), near [5,12), far [12,20].
pub const DISTANCE_BINS: [&str; 3] = ["adjacent", "near", "far"];

/// Seconds-of-day on the local clock after applying the timezone offset.
pub fn local_seconds(ts_utc: i64, tz_offset_secs: i64) -> i64 {
    (ts_utc + tz_offset_secs).rem_euclid(86_400)
}

/// Day-period index for a local hour in `0..24`.
pub fn day_period_of_hour(hour: u32) -> usize {
    match hour {
        4..=6 => 0,
        7..=10 => 1,
        11..=14 => 2,
        15..=17 => 3,
        18..=20 => 4,
        21..=23 => 5,
        _ => 6,
    }
}

/// Distance-bin index for a distance in meters.
pub fn distance_bin(distance_m: f64) -> usize {
    if distance_m < 5.0 {
        0
    } else if distance_m < 12.0 {
        1
    } else {
        2
    }
}

fn is_token_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Canonical tokenizer.
///
/// Lowercases, splits on Unicode whitespace, peels leading/trailing
/// punctuation into separate single-character tokens, normalizes
/// `http(s)://` chunks to `<url>` and @-mentions to `<user>`, and keeps
/// `#tag` as one token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        if chunk.starts_with("http://") || chunk.starts_with("https://") {
            // The whole chunk is the URL, internal punctuation included.
            tokens.push("<url>".to_string());
            continue;
        }
        let mut chars: Vec<char> = chunk.chars().collect();
        let mut trailing = Vec::new();
        while let Some(&c) = chars.last() {
            if is_token_punct(c) {
                trailing.push(c);
                chars.pop();
            } else {
                break;
            }
        }
        let core: String = chars.into_iter().collect();
        emit_core(&core, &mut tokens);
        for c in trailing.into_iter().rev() {
            tokens.push(c.to_string());
        }
    }
    tokens
}

fn emit_core(core: &str, tokens: &mut Vec<Token>) {
    let mut rest = core;
    loop {
        if rest.is_empty() {
            return;
        }
        if rest.starts_with('@') && rest.len() > 1 {
            tokens.push("<user>".to_string());
            return;
        }
        if rest.starts_with('#') && rest.len() > 1 {
            tokens.push(rest.to_string());
            return;
        }
        let first = rest.chars().next().expect("non-empty");
        if is_token_punct(first) {
            tokens.push(first.to_string());
            rest = &rest[first.len_utf8()..];
        } else {
            tokens.push(rest.to_string());
            return;
        }
    }
}

/// A word n-gram, n in {1, 2}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ngram {
    Uni(Token),
    Bi(Token, Token),
}

impl Ngram {
    /// Canonical text form, also the tie-break key when ordering by count.
    pub fn text(&self) -> String {
        match self {
            Ngram::Uni(w) => w.clone(),
            Ngram::Bi(a, b) => format!("{a} {b}"),
        }
    }
}

impl fmt::Display for Ngram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Unigrams and bigrams with at least `threshold` training occurrences,
/// ordered by descending count, ties broken lexicographically on the text
/// form. Bigrams come from adjacent token pairs with no boundary padding.
pub fn fit_ngrams(docs: &[Vec<Token>], threshold: usize) -> Vec<Ngram> {
    let mut counts: HashMap<Ngram, usize> = HashMap::new();
    for tokens in docs {
        for t in tokens {
            *counts.entry(Ngram::Uni(t.clone())).or_default() += 1;
        }
        for pair in tokens.windows(2) {
            *counts
                .entry(Ngram::Bi(pair[0].clone(), pair[1].clone()))
                .or_default() += 1;
        }
    }
    let mut kept: Vec<(Ngram, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= threshold)
        .collect();
    kept.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| a.text().cmp(&b.text())));
    kept.into_iter().map(|(n, _)| n).collect()
}

/// One of the five hand-crafted feature families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Textual,
    Ngrams,
    Lm,
    Pos,
    SpatioTemporal,
}

impl FeatureFamily {
    /// All families in segment-layout order.
    pub const ALL: [FeatureFamily; 5] = [
        FeatureFamily::Textual,
        FeatureFamily::Ngrams,
        FeatureFamily::Lm,
        FeatureFamily::Pos,
        FeatureFamily::SpatioTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Textual => "textual",
            FeatureFamily::Ngrams => "ngrams",
            FeatureFamily::Lm => "lm",
            FeatureFamily::Pos => "pos",
            FeatureFamily::SpatioTemporal => "spatio_temporal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        FeatureFamily::ALL.into_iter().find(|f| f.name() == name)
    }

    fn bit(self) -> u8 {
        match self {
            FeatureFamily::Textual => 1,
            FeatureFamily::Ngrams => 2,
            FeatureFamily::Lm => 4,
            FeatureFamily::Pos => 8,
            FeatureFamily::SpatioTemporal => 16,
        }
    }
}

/// Subset of enabled feature families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySet(u8);

impl FamilySet {
    pub const fn empty() -> Self {
        FamilySet(0)
    }

    pub fn all() -> Self {
        FamilySet(0b11111)
    }

    pub fn only(family: FeatureFamily) -> Self {
        FamilySet(family.bit())
    }

    #[must_use]
    pub fn with(self, family: FeatureFamily) -> Self {
        FamilySet(self.0 | family.bit())
    }

    #[must_use]
    pub fn without(self, family: FeatureFamily) -> Self {
        FamilySet(self.0 & !family.bit())
    }

    pub fn contains(self, family: FeatureFamily) -> bool {
        self.0 & family.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = FeatureFamily> {
        FeatureFamily::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    pub fn len(self) -> usize {
        self.iter().count()
    }

    /// Parses a `+`- or `,`-separated list of family names, e.g.
    /// `"textual,ngrams"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = FamilySet::empty();
        for part in spec.split(|c| c == ',' || c == '+') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let family = FeatureFamily::from_name(part)
                .ok_or_else(|| Error::Config(format!("unknown feature family: {part}")))?;
            set = set.with(family);
        }
        if set.is_empty() {
            return Err(Error::Config("empty feature family set".to_string()));
        }
        Ok(set)
    }

    /// All 31 non-empty subsets, in ascending bitmask order.
    pub fn power_set() -> Vec<FamilySet> {
        (1u8..32).map(FamilySet).collect()
    }
}

impl fmt::Display for FamilySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(|fam| fam.name()).collect();
        f.write_str(&names.join("+"))
    }
}

/// Persisted form of [`FeatureRegistry`]: version, threshold, the ordered
/// n-gram list and the segment layout.
#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    version: u32,
    threshold: usize,
    n_classes: usize,
    families: FamilySet,
    ngrams: Vec<Ngram>,
    /// Redundant layout echo so the document is self-describing.
    layout: Vec<(String, usize)>,
}

const REGISTRY_VERSION: u32 = 1;

/// Fitted, frozen feature vocabulary and column layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RegistryDoc", into = "RegistryDoc")]
pub struct FeatureRegistry {
    threshold: usize,
    n_classes: usize,
    families: FamilySet,
    ngrams: Vec<Ngram>,
    #[allow(clippy::type_complexity)]
    lookup: HashMap<Ngram, usize>,
}

impl From<RegistryDoc> for FeatureRegistry {
    fn from(doc: RegistryDoc) -> Self {
        FeatureRegistry::from_parts(doc.threshold, doc.n_classes, doc.families, doc.ngrams)
    }
}

impl From<FeatureRegistry> for RegistryDoc {
    fn from(reg: FeatureRegistry) -> Self {
        let layout = reg
            .families
            .iter()
            .map(|f| (f.name().to_string(), reg.family_width(f)))
            .collect();
        RegistryDoc {
            version: REGISTRY_VERSION,
            threshold: reg.threshold,
            n_classes: reg.n_classes,
            families: reg.families,
            ngrams: reg.ngrams,
            layout,
        }
    }
}

impl FeatureRegistry {
    /// Fits the n-gram vocabulary on training texts and freezes the layout.
    pub fn fit<S: AsRef<str>>(
        texts: &[S],
        threshold: usize,
        families: FamilySet,
        n_classes: usize,
    ) -> Self {
        let docs: Vec<Vec<Token>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
        let ngrams = if families.contains(FeatureFamily::Ngrams) {
            fit_ngrams(&docs, threshold)
        } else {
            Vec::new()
        };
        FeatureRegistry::from_parts(threshold, n_classes, families, ngrams)
    }

    fn from_parts(
        threshold: usize,
        n_classes: usize,
        families: FamilySet,
        ngrams: Vec<Ngram>,
    ) -> Self {
        let lookup = ngrams
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        FeatureRegistry {
            threshold,
            n_classes,
            families,
            ngrams,
            lookup,
        }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn families(&self) -> FamilySet {
        self.families
    }

    pub fn ngrams(&self) -> &[Ngram] {
        &self.ngrams
    }

    pub fn family_width(&self, family: FeatureFamily) -> usize {
        match family {
            FeatureFamily::Textual => TEXTUAL_WIDTH,
            FeatureFamily::Ngrams => self.ngrams.len(),
            FeatureFamily::Lm => self.n_classes,
            FeatureFamily::Pos => POS_WIDTH,
            FeatureFamily::SpatioTemporal => SPATIO_TEMPORAL_WIDTH,
        }
    }

    /// Column range of an enabled family, `None` if disabled.
    pub fn segment(&self, family: FeatureFamily) -> Option<Range<usize>> {
        let mut offset = 0;
        for f in FeatureFamily::ALL {
            if !self.families.contains(f) {
                continue;
            }
            let width = self.family_width(f);
            if f == family {
                return Some(offset..offset + width);
            }
            offset += width;
        }
        None
    }

    /// Total number of columns.
    pub fn width(&self) -> usize {
        self.families.iter().map(|f| self.family_width(f)).sum()
    }

    fn ngram_local(&self, ngram: &Ngram) -> Option<usize> {
        self.lookup.get(ngram).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RegistryDoc::from(self.clone())).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Model(format!("registry parse: {e}")))
    }

    /// Stable content hash, stored with trained models for cross-checking.
    pub fn content_hash(&self) -> u64 {
        crate::util::fnv1a64(self.to_json().as_bytes())
    }
}

/// Sparse feature vector: `(column, value)` pairs with strictly increasing
/// indices. All families except LM scores produce non-negative values; the
/// LM segment carries log query likelihoods, which are non-positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    /// Builds from unordered pairs. Zero values are dropped; duplicate
    /// indices are a programming error.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.retain(|&(_, v)| v != 0.0);
        pairs.sort_by_key(|&(i, _)| i);
        let entries: Vec<(u32, f64)> = pairs
            .into_iter()
            .map(|(i, v)| (u32::try_from(i).expect("column index fits u32"), v))
            .collect();
        for pair in entries.windows(2) {
            assert!(pair[0].0 < pair[1].0, "duplicate feature index {}", pair[1].0);
        }
        FeatureVector { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dot product against a dense weight slice.
    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(i, v)| weights[i as usize] * v)
            .sum()
    }

    pub fn value(&self, index: usize) -> f64 {
        let index = index as u32;
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    /// Entries restricted to a column range, as `(column, value)` pairs.
    pub fn slice(&self, range: Range<usize>) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter(|&&(i, _)| range.contains(&(i as usize)))
            .map(|&(i, v)| (i as usize, v))
            .collect()
    }
}

/// The 32 surface features: one-hot word-count bin over [0,10], [11,20],
/// [21,30], [31,inf); one-hot character-count bin over the same edges; then
/// per-character counts of [`COUNTED_SYMBOLS`].
pub fn textual_features(text: &str) -> [f64; TEXTUAL_WIDTH] {
    let mut out = [0.0; TEXTUAL_WIDTH];
    let words = text.split_whitespace().count();
    let chars = text.chars().count();
    out[count_bin(words)] = 1.0;
    out[4 + count_bin(chars)] = 1.0;
    for c in text.chars() {
        if let Some(i) = COUNTED_SYMBOLS.iter().position(|&s| s == c) {
            out[8 + i] += 1.0;
        }
    }
    out
}

fn count_bin(n: usize) -> usize {
    match n {
        0..=10 => 0,
        11..=20 => 1,
        21..=30 => 2,
        _ => 3,
    }
}

/// Counts of each registered n-gram in the tokens, as `(local index, count)`
/// pairs. Unregistered n-grams are ignored.
pub fn ngram_features(tokens: &[Token], registry: &FeatureRegistry) -> Vec<(usize, f64)> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for t in tokens {
        if let Some(i) = registry.ngram_local(&Ngram::Uni(t.clone())) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    for pair in tokens.windows(2) {
        if let Some(i) = registry.ngram_local(&Ngram::Bi(pair[0].clone(), pair[1].clone())) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    let mut out: Vec<(usize, f64)> = counts.into_iter().collect();
    out.sort_by_key(|&(i, _)| i);
    out
}

/// Counts of the 13 major POS tags plus the number of unknown tag symbols
/// (ignored in the vector, surfaced in diagnostics reports).
pub fn pos_features(tags: Option<&[String]>) -> ([f64; POS_WIDTH], usize) {
    let mut out = [0.0; POS_WIDTH];
    let mut unknown = 0;
    if let Some(tags) = tags {
        for tag in tags {
            match POS_TAGS.iter().position(|t| t == tag) {
                Some(i) => out[i] += 1.0,
                None => unknown += 1,
            }
        }
    }
    (out, unknown)
}

/// Raw distance and local hour, one-hot distance bin, one-hot day period.
pub fn spatio_temporal_features(
    distance_m: f64,
    ts_utc: i64,
    tz_offset_secs: i64,
) -> [f64; SPATIO_TEMPORAL_WIDTH] {
    let mut out = [0.0; SPATIO_TEMPORAL_WIDTH];
    let sod = local_seconds(ts_utc, tz_offset_secs);
    out[0] = distance_m;
    out[1] = sod as f64 / 3600.0;
    out[2 + distance_bin(distance_m)] = 1.0;
    let hour = (sod / 3600) as u32;
    out[5 + day_period_of_hour(hour)] = 1.0;
    out
}

/// Single-space concatenation of a record's message texts in the canonical
/// `(ts, id)` order.
pub fn joint_text(record: &SiteRecord) -> String {
    let texts: Vec<&str> = record
        .messages
        .iter()
        .map(|(m, _)| m.text.as_str())
        .collect();
    texts.join(" ")
}

/// Concatenated POS tags of a record's messages, `None` if no message
/// carries tags.
pub fn joint_pos_tags(record: &SiteRecord) -> Option<Vec<String>> {
    let mut tags = Vec::new();
    let mut any = false;
    for (m, _) in &record.messages {
        if let Some(t) = &m.pos {
            tags.extend(t.iter().cloned());
            any = true;
        }
    }
    any.then_some(tags)
}

/// Feature assembly over a frozen registry. Immutable and shareable; per
/// record extraction is embarrassingly parallel.
pub struct Extractor<'a> {
    registry: &'a FeatureRegistry,
    class_lms: Option<&'a [UnigramLm]>,
    tz_offset_secs: i64,
}

impl<'a> Extractor<'a> {
    /// `class_lms` must be provided when the LM family is enabled, one
    /// Dirichlet-smoothed model per class in catalog order.
    pub fn new(
        registry: &'a FeatureRegistry,
        class_lms: Option<&'a [UnigramLm]>,
        tz_offset_secs: i64,
    ) -> Self {
        if registry.families().contains(FeatureFamily::Lm) {
            let n = class_lms.map(<[UnigramLm]>::len).unwrap_or(0);
            assert!(
                n == registry.n_classes(),
                "LM family enabled: need {} class language models, got {n}",
                registry.n_classes()
            );
        }
        Extractor {
            registry,
            class_lms,
            tz_offset_secs,
        }
    }

    /// Pipeline-mode vector for one message with its distance to the entity.
    pub fn message_vector(&self, message: &GeotaggedMessage, distance_m: f64) -> FeatureVector {
        let tokens = tokenize(&message.text);
        self.assemble(
            &message.text,
            &tokens,
            message.pos.as_deref(),
            Some((distance_m, message.ts)),
        )
    }

    /// Joint-mode vector over the whole record: textual, n-gram, LM and POS
    /// features computed on the concatenated multi-message. The
    /// spatio-temporal family is never emitted in joint mode.
    pub fn joint_vector(&self, record: &SiteRecord) -> FeatureVector {
        let text = joint_text(record);
        let tokens = tokenize(&text);
        let tags = joint_pos_tags(record);
        self.assemble(&text, &tokens, tags.as_deref(), None)
    }

    fn assemble(
        &self,
        text: &str,
        tokens: &[Token],
        tags: Option<&[String]>,
        spatio: Option<(f64, i64)>,
    ) -> FeatureVector {
        let reg = self.registry;
        let mut pairs = Vec::new();
        if let Some(seg) = reg.segment(FeatureFamily::Textual) {
            for (i, v) in textual_features(text).into_iter().enumerate() {
                pairs.push((seg.start + i, v));
            }
        }
        if let Some(seg) = reg.segment(FeatureFamily::Ngrams) {
            for (i, v) in ngram_features(tokens, reg) {
                pairs.push((seg.start + i, v));
            }
        }
        if let Some(seg) = reg.segment(FeatureFamily::Lm) {
            let lms = self.class_lms.expect("checked in Extractor::new");
            for (i, lm) in lms.iter().enumerate() {
                pairs.push((seg.start + i, query_log_likelihood(tokens, lm)));
            }
        }
        if let Some(seg) = reg.segment(FeatureFamily::Pos) {
            let (values, _unknown) = pos_features(tags);
            for (i, v) in values.into_iter().enumerate() {
                pairs.push((seg.start + i, v));
            }
        }
        if let (Some(seg), Some((distance_m, ts))) =
            (reg.segment(FeatureFamily::SpatioTemporal), spatio)
        {
            let values = spatio_temporal_features(distance_m, ts, self.tz_offset_secs);
            for (i, v) in values.into_iter().enumerate() {
                pairs.push((seg.start + i, v));
            }
        }
        FeatureVector::from_pairs(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GeotaggedMessage;
    use proptest::prelude::*;

    fn toks(text: &str) -> Vec<Token> {
        tokenize(text)
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(toks("Hello, World"), ["hello", ",", "world"]);
        assert_eq!(toks("(ok)"), ["(", "ok", ")"]);
        assert_eq!(toks("don't stop"), ["don't", "stop"]);
        assert_eq!(toks("!!!"), ["!", "!", "!"]);
    }

    #[test]
    fn tokenize_normalizes_urls_mentions_hashtags() {
        assert_eq!(
            toks("see http://x.co @bob #nyc"),
            ["see", "<url>", "<user>", "#nyc"]
        );
        assert_eq!(toks("HTTPS://Example.com/a?b=1"), ["<url>"]);
        assert_eq!(toks("@bob, hi"), ["<user>", ",", "hi"]);
        assert_eq!(toks("#NYC!"), ["#nyc", "!"]);
        assert_eq!(toks("@ #"), ["@", "#"]);
    }

    #[test]
    fn textual_features_hand_example() {
        // 7 words, 30 characters, one '!'.
        let text = "one two three four five six s!";
        assert_eq!(text.split_whitespace().count(), 7);
        assert_eq!(text.chars().count(), 30);
        let f = textual_features(text);
        assert_eq!(f[0], 1.0); // word bin [0,10]
        assert_eq!(f[6], 1.0); // char bin [21,30]
        assert_eq!(f[8], 1.0); // '!' column
        assert_eq!(f.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn textual_features_empty_text() {
        let f = textual_features("");
        assert_eq!(f[0], 1.0);
        assert_eq!(f[4], 1.0);
        assert_eq!(f.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn textual_bins_have_inclusive_upper_edges() {
        let ten_words = "a a a a a a a a a a";
        let f = textual_features(ten_words);
        assert_eq!(f[0], 1.0, "exactly 10 words stays in [0,10]");
        let eleven_words = "a a a a a a a a a a a";
        let f = textual_features(eleven_words);
        assert_eq!(f[1], 1.0);
        // Character edge: 20 chars -> [11,20], 21 -> [21,30].
        let s20 = "x".repeat(20);
        assert_eq!(textual_features(&s20)[5], 1.0);
        let s21 = "x".repeat(21);
        assert_eq!(textual_features(&s21)[6], 1.0);
    }

    #[test]
    fn fit_ngrams_hand_counts() {
        let docs = vec![toks("a b a")];
        let idx = fit_ngrams(&docs, 1);
        // a:2 first, then count-1 ties lexicographically: "a b" < "b" < "b a".
        assert_eq!(idx.len(), 4);
        assert_eq!(idx[0], Ngram::Uni("a".into()));
        assert_eq!(idx[1], Ngram::Bi("a".into(), "b".into()));
        assert_eq!(idx[2], Ngram::Uni("b".into()));
        assert_eq!(idx[3], Ngram::Bi("b".into(), "a".into()));

        assert!(fit_ngrams(&docs, 3).is_empty());
        assert_eq!(fit_ngrams(&docs, 2), vec![Ngram::Uni("a".into())]);
    }

    #[test]
    fn ngram_features_counts() {
        let reg = FeatureRegistry::fit(&["a b a"], 1, FamilySet::only(FeatureFamily::Ngrams), 2);
        let counts = ngram_features(&toks("a b a a"), &reg);
        let dense: std::collections::HashMap<usize, f64> = counts.into_iter().collect();
        // Registry order: a, "a b", b, "b a".
        assert_eq!(dense[&0], 3.0); // a
        assert_eq!(dense[&1], 1.0); // a b
        assert_eq!(dense[&2], 1.0); // b
        assert_eq!(dense[&3], 1.0); // b a
        // Unseen n-grams map to no column.
        let counts = ngram_features(&toks("c c"), &reg);
        assert!(counts.is_empty());
    }

    #[test]
    fn pos_features_counts_and_unknowns() {
        let tags = vec!["NN".to_string(), "NN".to_string(), "VB".to_string()];
        let (f, unknown) = pos_features(Some(&tags));
        assert_eq!(f[5], 2.0); // NN
        assert_eq!(f[10], 1.0); // VB
        assert_eq!(unknown, 0);

        let (f, unknown) = pos_features(None);
        assert_eq!(f.iter().sum::<f64>(), 0.0);
        assert_eq!(unknown, 0);

        let tags = vec!["XX".to_string()];
        let (f, unknown) = pos_features(Some(&tags));
        assert_eq!(f.iter().sum::<f64>(), 0.0);
        assert_eq!(unknown, 1);
    }

    #[test]
    fn spatio_temporal_hand_examples() {
        // 08:30 local with a zero offset; distance 4.9 m.
        let ts = 8 * 3600 + 30 * 60;
        let f = spatio_temporal_features(4.9, ts, 0);
        assert_eq!(f[0], 4.9);
        assert!((f[1] - 8.5).abs() < 1e-12);
        assert_eq!(f[2], 1.0, "adjacent");
        assert_eq!(f[5 + 1], 1.0, "morning");

        // Distance exactly 12.0 is far under the half-open convention.
        let f = spatio_temporal_features(12.0, ts, 0);
        assert_eq!(f[4], 1.0, "far");

        // 00:30 local is late night.
        let f = spatio_temporal_features(1.0, 30 * 60, 0);
        assert_eq!(f[5 + 6], 1.0, "late_night");
    }

    #[test]
    fn day_period_and_distance_bin_edges() {
        // Every edge hour of the seven half-open periods.
        let cases = [
            (0, 6),
            (3, 6),
            (4, 0),
            (6, 0),
            (7, 1),
            (10, 1),
            (11, 2),
            (14, 2),
            (15, 3),
            (17, 3),
            (18, 4),
            (20, 4),
            (21, 5),
            (23, 5),
        ];
        for (hour, want) in cases {
            assert_eq!(day_period_of_hour(hour), want, "hour {hour}");
        }
        assert_eq!(distance_bin(0.0), 0);
        assert_eq!(distance_bin(4.999), 0);
        assert_eq!(distance_bin(5.0), 1);
        assert_eq!(distance_bin(11.999), 1);
        assert_eq!(distance_bin(12.0), 2);
        assert_eq!(distance_bin(20.0), 2);
    }

    #[test]
    fn timezone_offset_shifts_period() {
        // 13:00 UTC with a -5 h offset is 08:00 local: morning.
        let f = spatio_temporal_features(1.0, 13 * 3600, -5 * 3600);
        assert_eq!(f[5 + 1], 1.0);
    }

    #[test]
    fn registry_layout_arithmetic() {
        let texts = ["a b a b a", "a b a b"];
        // Pipeline, all families, 6 classes: 32 + |ngrams| + 6 + 13 + 12.
        let reg = FeatureRegistry::fit(&texts, 1, FamilySet::all(), 6);
        let n = reg.ngrams().len();
        assert_eq!(reg.width(), 32 + n + 6 + 13 + 12);
        assert_eq!(reg.segment(FeatureFamily::Textual).unwrap(), 0..32);
        assert_eq!(reg.segment(FeatureFamily::Ngrams).unwrap(), 32..32 + n);
        assert_eq!(
            reg.segment(FeatureFamily::SpatioTemporal).unwrap(),
            32 + n + 6 + 13..32 + n + 6 + 13 + 12
        );

        // Joint n-grams only.
        let reg = FeatureRegistry::fit(&texts, 1, FamilySet::only(FeatureFamily::Ngrams), 6);
        assert_eq!(reg.width(), reg.ngrams().len());
        assert!(reg.segment(FeatureFamily::Textual).is_none());

        // Joint textual + n-grams.
        let fams = FamilySet::only(FeatureFamily::Textual).with(FeatureFamily::Ngrams);
        let reg = FeatureRegistry::fit(&texts, 1, fams, 6);
        assert_eq!(reg.width(), 32 + reg.ngrams().len());
    }

    #[test]
    fn registry_round_trips_through_json() {
        let reg = FeatureRegistry::fit(&["a b a b a b"], 2, FamilySet::all(), 6);
        let json = reg.to_json();
        let back = FeatureRegistry::from_json(&json).unwrap();
        assert_eq!(back.width(), reg.width());
        assert_eq!(back.ngrams(), reg.ngrams());
        assert_eq!(back.content_hash(), reg.content_hash());
    }

    fn msg(id: &str, ts: i64, text: &str) -> GeotaggedMessage {
        GeotaggedMessage::new(id, 40.0, -73.0, ts, text, None).unwrap()
    }

    #[test]
    fn joint_vector_of_singleton_matches_message_vector_without_spatio() {
        let texts = ["school class teacher", "class exam", "shop sale"];
        let reg = FeatureRegistry::fit(&texts, 1, FamilySet::all().without(FeatureFamily::Lm), 2);
        let ex = Extractor::new(&reg, None, 0);
        let m = msg("m1", 100, "class exam teacher!");
        let record = crate::domain::SiteRecord::new(
            "e1",
            40.0,
            -73.0,
            None,
            vec![(m.clone(), 3.0)],
        )
        .unwrap();

        let joint = ex.joint_vector(&record);
        let pipe = ex.message_vector(&m, 3.0);
        let st = reg.segment(FeatureFamily::SpatioTemporal).unwrap();
        let pipe_non_st: Vec<(u32, f64)> = pipe
            .entries()
            .iter()
            .copied()
            .filter(|&(i, _)| !st.contains(&(i as usize)))
            .collect();
        assert_eq!(joint.entries(), pipe_non_st.as_slice());
    }

    #[test]
    fn joint_concatenation_follows_ts_then_id() {
        let rec = crate::domain::SiteRecord::new(
            "e",
            40.0,
            -73.0,
            None,
            vec![(msg("b", 2, "second"), 1.0), (msg("a", 1, "first"), 1.0)],
        )
        .unwrap();
        assert_eq!(joint_text(&rec), "first second");
    }

    proptest! {
        #[test]
        fn tokens_are_nonempty_lowercase_and_whitespace_free(s in "\\PC{0,60}") {
            for t in tokenize(&s) {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }

        #[test]
        fn one_hot_bins_sum_to_two(s in "\\PC{0,80}") {
            let f = textual_features(&s);
            let bins: f64 = f[..8].iter().sum();
            prop_assert_eq!(bins, 2.0);
        }

        #[test]
        fn ngram_counts_bounded_by_token_and_pair_counts(s in "[a-c ]{0,40}") {
            let reg = FeatureRegistry::fit(
                &[s.as_str()], 1, FamilySet::only(FeatureFamily::Ngrams), 2,
            );
            let tokens = tokenize(&s);
            let total: f64 = ngram_features(&tokens, &reg).iter().map(|&(_, v)| v).sum();
            let bound = tokens.len() + tokens.len().saturating_sub(1);
            prop_assert!(total <= bound as f64);
        }

        #[test]
        fn extraction_is_pure(s in "[a-z !?#@]{0,40}", d in 0.0f64..20.0, ts in 0i64..1_000_000) {
            let reg = FeatureRegistry::fit(
                &[s.as_str()], 1, FamilySet::all().without(FeatureFamily::Lm), 3,
            );
            let ex = Extractor::new(&reg, None, -18_000);
            let m = GeotaggedMessage::new("m", 1.0, 2.0, ts, s.clone(), None).unwrap();
            let a = ex.message_vector(&m, d);
            let b = ex.message_vector(&m, d);
            prop_assert_eq!(a, b);
        }
    }
}
