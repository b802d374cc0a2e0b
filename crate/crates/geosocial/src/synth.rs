//! Synthetic geotagged-corpus generator for desk-scale experiments.
//!
//! Location types follow the class priors by largest-remainder quota in a
//! seeded random order, so empirical priors track the configuration at any
//! corpus size. Each message is noise (Zipf-weighted tokens from a shared
//! vocabulary) with probability `noise_rate`, otherwise signal: class
//! evidence is carried by two-word collocations drawn from a class-specific
//! phrase inventory over a shared word pool, mixed 70/30 with noise tokens.
//!
//! The phrase construction keeps per-word (unigram) frequencies identical
//! across classes while the word pairings are class-exclusive, so the class
//! signal lives in adjacency: distinctive terms are bigrams, individual
//! words overlap between classes. Message distance, posting period and
//! optional POS tags follow per-class profiles. Output is exactly the
//! ingest JSONL formats plus a manifest echoing the configuration;
//! byte-identical under a fixed seed.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{TypeCatalog, EARTH_RADIUS_M};
use crate::features::{tokenize, POS_TAGS};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Zipf skew of the signal vocabularies.
const ZIPF_EXPONENT: f64 = 1.1;
/// Share of signal-message tokens drawn from the class vocabulary (the rest
/// come from the noise vocabulary).
const SIGNAL_MIX: f64 = 0.7;
/// Mean message length in tokens, truncated to [1, 30].
const LENGTH_MEAN: f64 = 9.0;
/// Probability of a trailing punctuation sprinkle on a message.
const SPRINKLE_RATE: f64 = 0.05;
/// Days in the simulated collection window.
const WINDOW_DAYS: i64 = 400;
/// Local epoch base of the window (2013-01-01T00:00).
const BASE_EPOCH: i64 = 1_356_998_400;

/// Day-period local-hour ranges, in the feature module's period order.
const PERIOD_HOURS: [(i64, i64); 7] = [
    (4, 7),
    (7, 11),
    (11, 15),
    (15, 18),
    (18, 21),
    (21, 24),
    (0, 4),
];

const DISTANCE_BIN_EDGES: [(f64, f64); 3] = [(0.0, 5.0), (5.0, 12.0), (12.0, 20.0)];

/// Generation profile of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    pub prior: f64,
    /// Poisson mean of messages per location.
    pub messages_mean: f64,
    /// Adjacent / near / far shares.
    pub distance_bins: [f64; 3],
    /// Shares per day period (dawn .. late_night).
    pub day_periods: [f64; 7],
    /// Relative weights over the 13 POS tags.
    pub pos_tags: [f64; 13],
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub catalog: TypeCatalog,
    pub classes: Vec<ClassProfile>,
    pub locations: usize,
    pub noise_rate: f64,
    /// Collocations per class; the shared word pool holds twice this many
    /// words.
    pub signal_vocab_size: usize,
    pub noise_vocab_size: usize,
    pub emit_pos: bool,
    pub seed: u64,
    pub tz_offset_secs: i64,
}

impl SynthConfig {
    /// Defaults anchored on the reference corpus: its class priors, scaled
    /// per-class message volumes, its per-class distance shares, and
    /// qualitative day-period and POS shapes.
    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        let catalog = TypeCatalog::new(&cfg.catalog)?;
        let default_six = TypeCatalog::default_six();
        let classes = if catalog == default_six {
            paper_profiles()
        } else {
            neutral_profiles(&catalog)
        };
        let out = SynthConfig {
            catalog,
            classes,
            locations: cfg.synth_locations,
            noise_rate: cfg.synth_noise_rate,
            signal_vocab_size: cfg.synth_signal_vocab,
            noise_vocab_size: cfg.synth_noise_vocab,
            emit_pos: cfg.synth_emit_pos,
            seed: cfg.seed,
            tz_offset_secs: cfg.tz_offset_secs(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.catalog.len() {
            return Err(Error::Config(format!(
                "{} class profiles for {} catalog types",
                self.classes.len(),
                self.catalog.len()
            )));
        }
        let prior_sum: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class priors sum to {prior_sum}")));
        }
        for c in &self.classes {
            for (label, dist) in [
                ("distance_bins", &c.distance_bins[..]),
                ("day_periods", &c.day_periods[..]),
            ] {
                let sum: f64 = dist.iter().sum();
                if dist.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "class {}: {label} is not a distribution (sum {sum})",
                        c.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate must be in [0,1], got {}",
                self.noise_rate
            )));
        }
        if self.signal_vocab_size == 0 || self.noise_vocab_size == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".to_string()));
        }
        Ok(())
    }
}

fn paper_profiles() -> Vec<ClassProfile> {
    // Priors and distance shares from the reference corpus tables; message
    // volumes scaled down 4x to desk size; day-period and POS shapes
    // qualitative.
    let base_pos = |nn: f64, nnp: f64, vb: f64, prp: f64| -> [f64; 13] {
        normalize([
            0.03, 0.09, 0.01, 0.13, 0.07, nn, nnp, 0.05, prp, 0.06, vb, 0.03, 0.05,
        ])
    };
    vec![
        ClassProfile {
            name: "school".into(),
            prior: 0.327,
            messages_mean: 15.0,
            distance_bins: [0.0659, 0.2799, 0.6542],
            day_periods: [0.02, 0.30, 0.30, 0.18, 0.10, 0.07, 0.03],
            pos_tags: base_pos(0.1454, 0.1438, 0.0402, 0.0557),
        },
        ClassProfile {
            name: "university".into(),
            prior: 0.08,
            messages_mean: 44.0,
            distance_bins: [0.0728, 0.2648, 0.6624],
            day_periods: [0.02, 0.25, 0.28, 0.20, 0.13, 0.08, 0.04],
            pos_tags: base_pos(0.1412, 0.1729, 0.0364, 0.0533),
        },
        ClassProfile {
            name: "church".into(),
            prior: 0.154,
            messages_mean: 104.0,
            distance_bins: [0.3155, 0.2474, 0.4371],
            day_periods: [0.03, 0.22, 0.25, 0.18, 0.18, 0.10, 0.04],
            pos_tags: base_pos(0.1407, 0.1739, 0.0351, 0.0496),
        },
        ClassProfile {
            name: "shop".into(),
            prior: 0.098,
            messages_mean: 286.0,
            distance_bins: [0.2686, 0.2430, 0.4884],
            day_periods: [0.01, 0.10, 0.20, 0.28, 0.25, 0.12, 0.04],
            pos_tags: base_pos(0.1302, 0.2034, 0.0288, 0.0470),
        },
        ClassProfile {
            name: "museum".into(),
            prior: 0.065,
            messages_mean: 319.0,
            distance_bins: [0.4932, 0.1866, 0.3202],
            day_periods: [0.01, 0.15, 0.33, 0.30, 0.12, 0.06, 0.03],
            pos_tags: base_pos(0.1229, 0.2741, 0.0208, 0.0314),
        },
        ClassProfile {
            name: "health".into(),
            prior: 0.276,
            messages_mean: 23.0,
            distance_bins: [0.0544, 0.2893, 0.6563],
            day_periods: [0.03, 0.25, 0.27, 0.20, 0.13, 0.08, 0.04],
            pos_tags: base_pos(0.1427, 0.1512, 0.0389, 0.0554),
        },
    ]
}

fn neutral_profiles(catalog: &TypeCatalog) -> Vec<ClassProfile> {
    let n = catalog.len();
    catalog
        .iter()
        .map(|t| ClassProfile {
            name: t.name.clone(),
            prior: 1.0 / n as f64,
            messages_mean: 20.0,
            distance_bins: [0.3, 0.3, 0.4],
            day_periods: [0.05, 0.2, 0.2, 0.2, 0.15, 0.12, 0.08],
            pos_tags: normalize([
                0.03, 0.09, 0.01, 0.13, 0.07, 0.14, 0.18, 0.05, 0.05, 0.06, 0.03, 0.03, 0.05,
            ]),
        })
        .collect()
}

fn normalize<const N: usize>(mut values: [f64; N]) -> [f64; N] {
    let sum: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= sum);
    values
}

/// Cumulative distribution for index sampling.
struct CumDist {
    cum: Vec<f64>,
}

impl CumDist {
    fn new(weights: &[f64]) -> Self {
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            acc += w;
            cum.push(acc);
        }
        CumDist { cum }
    }

    fn zipf(n: usize, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-exponent)).collect();
        CumDist::new(&weights)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cum.last().expect("non-empty");
        let u = rng.gen_range(0.0..total);
        self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1)
    }
}

/// Poisson sampler (Knuth's method, halving for large means so the
/// exp(-mean) factor stays representable).
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    if mean > 30.0 {
        return poisson(rng, mean / 2.0) + poisson(rng, mean - mean / 2.0);
    }
    let limit = (-mean).exp();
    let mut product = rng.gen_range(0.0..1.0f64);
    let mut count = 0;
    while product > limit {
        product *= rng.gen_range(0.0..1.0f64);
        count += 1;
    }
    count
}

/// Pronounceable gibberish word, 2..=4 syllables.
fn gibberish(rng: &mut ChaCha8Rng) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..=4);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        word.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    word
}

/// Class of each location: largest-remainder quotas over the priors, in a
/// seeded random order. Quotas keep the empirical class distribution within
/// one location of the configured priors at any corpus size.
fn class_assignments(config: &SynthConfig) -> Vec<usize> {
    let n = config.locations;
    let mut counts: Vec<usize> = config
        .classes
        .iter()
        .map(|c| (c.prior * n as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(f64, usize)> = config
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.prior * n as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|(ra, ia), (rb, ib)| rb.total_cmp(ra).then_with(|| ia.cmp(ib)));
    for k in 0..n - assigned {
        counts[remainders[k % remainders.len()].1] += 1;
    }
    let mut assignments = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        assignments.extend(std::iter::repeat(class).take(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-classes"));
    use rand::seq::SliceRandom;
    assignments.shuffle(&mut rng);
    assignments
}

/// Noise vocabulary plus the shared signal word pool, disjoint from each
/// other. The pool holds `2 * signal_vocab_size` words: first-word half and
/// second-word half of the collocations.
fn build_vocabularies(config: &SynthConfig) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-vocab"));
    let mut seen: HashSet<String> = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| loop {
        let w = gibberish(rng);
        if seen.insert(w.clone()) {
            return w;
        }
    };
    let noise: Vec<String> = (0..config.noise_vocab_size).map(|_| draw(&mut rng)).collect();
    let pool: Vec<String> = (0..2 * config.signal_vocab_size)
        .map(|_| draw(&mut rng))
        .collect();
    (noise, pool)
}

/// Smallest multiplier >= `from` that is coprime with `n`, keying a
/// class-specific permutation.
fn coprime_from(from: usize, n: usize) -> usize {
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    (from..).find(|&g| gcd(g, n) == 1).expect("some coprime exists")
}

/// Class collocations: phrase `k` pairs `pool[k]` with
/// `pool[S + (g_c * k + c) mod S]`. Every class uses each pool word equally
/// often, so unigram marginals are class-independent; the pairings are what
/// differ.
fn class_phrases(config: &SynthConfig) -> Vec<Vec<(usize, usize)>> {
    let s = config.signal_vocab_size;
    (0..config.classes.len())
        .map(|c| {
            let g = coprime_from(2 * c + 1, s);
            (0..s).map(|k| (k, s + (g * k + c) % s)).collect()
        })
        .collect()
}

#[derive(Serialize)]
struct EntityOut<'a> {
    id: &'a str,
    lat: f64,
    lon: f64,
    #[serde(rename = "type")]
    kind: &'a str,
}

#[derive(Serialize)]
struct MessageOut<'a> {
    id: &'a str,
    lat: f64,
    lon: f64,
    ts: i64,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<&'a str>>,
}

/// Paths written by [`generate`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthOutput {
    pub entities_path: PathBuf,
    pub messages_path: PathBuf,
    pub manifest_path: PathBuf,
    pub n_entities: usize,
    pub n_messages: usize,
}

/// Generates the corpus files under `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (noise_vocab, word_pool) = build_vocabularies(config);
    let phrases = class_phrases(config);
    let noise_dist = CumDist::zipf(noise_vocab.len(), ZIPF_EXPONENT);
    let assignments = class_assignments(config);
    let distance_dists: Vec<CumDist> = config
        .classes
        .iter()
        .map(|c| CumDist::new(&c.distance_bins))
        .collect();
    let period_dists: Vec<CumDist> = config
        .classes
        .iter()
        .map(|c| CumDist::new(&c.day_periods))
        .collect();
    let pos_dists: Vec<CumDist> = config
        .classes
        .iter()
        .map(|c| CumDist::new(&c.pos_tags))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-corpus"));

    // Entities on a ~100 m grid with small jitter, so neighbouring radii
    // never overlap and messages join exactly one site.
    let lat_step = 100.0 / EARTH_RADIUS_M * 180.0 / std::f64::consts::PI;
    let base_lat = 40.70;
    let base_lon = -74.02;
    let cols = (config.locations as f64).sqrt().ceil() as usize;
    let lon_step = lat_step / (base_lat as f64).to_radians().cos();

    let entities_path = out_dir.join("entities.jsonl");
    let messages_path = out_dir.join("messages.jsonl");
    let mut entities_file = BufWriter::new(
        File::create(&entities_path).map_err(|e| Error::io(&entities_path, e))?,
    );
    let mut messages_file = BufWriter::new(
        File::create(&messages_path).map_err(|e| Error::io(&messages_path, e))?,
    );

    let mut n_messages = 0usize;
    let mut message_seq = 0usize;
    for i in 0..config.locations {
        let class = assignments[i];
        let profile = &config.classes[class];
        let row = i / cols;
        let col = i % cols;
        let jitter = 10.0 / EARTH_RADIUS_M * 180.0 / std::f64::consts::PI;
        let lat = base_lat + row as f64 * lat_step + rng.gen_range(-jitter..jitter);
        let lon = base_lon + col as f64 * lon_step + rng.gen_range(-jitter..jitter);
        let entity_id = format!("e{i:05}");
        let line = serde_json::to_string(&EntityOut {
            id: &entity_id,
            lat,
            lon,
            kind: &profile.name,
        })
        .expect("serializable");
        writeln!(entities_file, "{line}").map_err(|e| Error::io(&entities_path, e))?;

        let n = poisson(&mut rng, profile.messages_mean);
        for _ in 0..n {
            let text = generate_text(
                &mut rng,
                config.noise_rate,
                &noise_vocab,
                &noise_dist,
                &word_pool,
                &phrases[class],
            );

            // Distance: class bin, then uniform inside it with a 1 cm
            // margin so coordinate rounding cannot cross a bin edge.
            let bin = distance_dists[class].sample(&mut rng);
            let (lo, hi) = DISTANCE_BIN_EDGES[bin];
            let distance = rng.gen_range(lo + 0.01..hi - 0.01);
            let bearing = rng.gen_range(0.0..std::f64::consts::TAU);
            let msg_lat = lat + distance * bearing.cos() / EARTH_RADIUS_M * 180.0
                / std::f64::consts::PI;
            let msg_lon = lon
                + distance * bearing.sin() / (EARTH_RADIUS_M * lat.to_radians().cos()) * 180.0
                    / std::f64::consts::PI;

            // Posting time: class day period, uniform within it, on a
            // uniform day of the window; stored as UTC.
            let period = period_dists[class].sample(&mut rng);
            let (h_lo, h_hi) = PERIOD_HOURS[period];
            let second = rng.gen_range(h_lo * 3600..h_hi * 3600);
            let day = rng.gen_range(0..WINDOW_DAYS);
            let local = BASE_EPOCH + day * 86_400 + second;
            let ts = local - config.tz_offset_secs;

            let pos: Option<Vec<&str>> = config.emit_pos.then(|| {
                let n_tokens = tokenize(&text).len();
                (0..n_tokens)
                    .map(|_| POS_TAGS[pos_dists[class].sample(&mut rng)])
                    .collect()
            });

            let message_id = format!("m{message_seq:07}");
            message_seq += 1;
            let line = serde_json::to_string(&MessageOut {
                id: &message_id,
                lat: msg_lat,
                lon: msg_lon,
                ts,
                text: &text,
                pos,
            })
            .expect("serializable");
            writeln!(messages_file, "{line}").map_err(|e| Error::io(&messages_path, e))?;
            n_messages += 1;
        }
    }
    entities_file.flush().map_err(|e| Error::io(&entities_path, e))?;
    messages_file.flush().map_err(|e| Error::io(&messages_path, e))?;

    let manifest_path = out_dir.join("manifest.json");
    let manifest = serde_json::json!({
        "config": config,
        "n_entities": config.locations,
        "n_messages": n_messages,
        "files": {
            "entities": "entities.jsonl",
            "messages": "messages.jsonl",
        },
    });
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    Ok(SynthOutput {
        entities_path,
        messages_path,
        manifest_path,
        n_entities: config.locations,
        n_messages,
    })
}

fn generate_text(
    rng: &mut ChaCha8Rng,
    noise_rate: f64,
    noise_vocab: &[String],
    noise_dist: &CumDist,
    word_pool: &[String],
    phrases: &[(usize, usize)],
) -> String {
    let len = poisson(rng, LENGTH_MEAN).clamp(1, 30);
    let noisy = rng.gen_range(0.0..1.0) < noise_rate;
    let mut tokens: Vec<&str> = Vec::with_capacity(len);
    while tokens.len() < len {
        let room_for_phrase = len - tokens.len() >= 2;
        let from_signal =
            !noisy && room_for_phrase && rng.gen_range(0.0..1.0) < SIGNAL_MIX;
        if from_signal {
            let (a, b) = phrases[rng.gen_range(0..phrases.len())];
            tokens.push(&word_pool[a]);
            tokens.push(&word_pool[b]);
        } else {
            tokens.push(&noise_vocab[noise_dist.sample(rng)]);
        }
    }
    let mut text = tokens.join(" ");
    if rng.gen_range(0.0..1.0) < SPRINKLE_RATE {
        let marks = [".", "!", "?"];
        text.push_str(marks[rng.gen_range(0..marks.len())]);
    }
    text
}
