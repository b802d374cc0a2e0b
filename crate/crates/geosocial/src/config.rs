//! Flat run configuration: every module's tunables with their defaults,
//! parseable from `key = value` text. Unknown keys are rejected and the
//! effective configuration is echoed into every output.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; all randomness derives from it.
    pub seed: u64,
    /// Catalog class names, in index order.
    pub catalog: Vec<String>,

    // ingest
    pub radius_m: f64,
    pub min_messages: usize,
    pub subsample_to_class_mean: bool,

    // features
    pub ngram_threshold: usize,
    /// Local-time offset from UTC in hours (default -5, the reference
    /// corpus timezone); applied to day-period features and analyses.
    pub tz_offset_hours: f64,

    // language models
    pub lm_mu: f64,

    // classifiers
    pub nb_alpha: f64,
    pub logit_lambda: f64,
    /// Tune lambda over {0.01, 0.1, 1, 10} on the dev split.
    pub logit_lambda_grid: bool,
    pub logit_max_iters: usize,
    pub logit_tol: f64,

    // neural
    pub cnn_filters_per_width: usize,
    pub cnn_learning_rate: f64,
    pub cnn_epochs: usize,
    pub cnn_batch: usize,
    /// Embedding dimension when synthesizing a seeded-random table.
    pub cnn_dim: usize,
    /// Joint CNN row ordering: `random`, `distance` or `lm`.
    pub message_ordering: String,

    // pipeline step 2
    /// `diagonal` (observed minus learned diagonal) or `l1` (nearest
    /// learned row by L1 distance).
    pub aggregation_rule: String,

    // evaluation
    pub repetitions: usize,
    /// Feature families, e.g. `"textual+ngrams"`; empty selects the
    /// per-approach default, `"search"` runs the dev-set power-set search.
    pub families: String,
    /// Worker threads for repetitions; 0 uses all cores.
    pub jobs: usize,

    // synthetic corpus generator
    pub synth_locations: usize,
    pub synth_noise_rate: f64,
    pub synth_signal_vocab: usize,
    pub synth_noise_vocab: usize,
    pub synth_emit_pos: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            catalog: ["school", "university", "church", "shop", "museum", "health"]
                .map(String::from)
                .to_vec(),
            radius_m: 20.0,
            min_messages: 5,
            subsample_to_class_mean: true,
            ngram_threshold: 5,
            tz_offset_hours: -5.0,
            lm_mu: 2000.0,
            nb_alpha: 1.0,
            logit_lambda: 1.0,
            logit_lambda_grid: false,
            logit_max_iters: 1000,
            logit_tol: 1e-6,
            cnn_filters_per_width: 100,
            cnn_learning_rate: 1e-3,
            cnn_epochs: 10,
            cnn_batch: 16,
            cnn_dim: 200,
            message_ordering: "random".to_string(),
            aggregation_rule: "diagonal".to_string(),
            repetitions: 10,
            families: String::new(),
            jobs: 0,
            synth_locations: 600,
            synth_noise_rate: 0.6,
            synth_signal_vocab: 50,
            synth_noise_vocab: 500,
            synth_emit_pos: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("key {key}: bad value {value:?}: {e}")))
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "catalog" => {
                self.catalog = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            "radius_m" => self.radius_m = parse(key, value)?,
            "min_messages" => self.min_messages = parse(key, value)?,
            "subsample_to_class_mean" => self.subsample_to_class_mean = parse(key, value)?,
            "ngram_threshold" => self.ngram_threshold = parse(key, value)?,
            "tz_offset_hours" => self.tz_offset_hours = parse(key, value)?,
            "lm_mu" => self.lm_mu = parse(key, value)?,
            "nb_alpha" => self.nb_alpha = parse(key, value)?,
            "logit_lambda" => self.logit_lambda = parse(key, value)?,
            "logit_lambda_grid" => self.logit_lambda_grid = parse(key, value)?,
            "logit_max_iters" => self.logit_max_iters = parse(key, value)?,
            "logit_tol" => self.logit_tol = parse(key, value)?,
            "cnn_filters_per_width" => self.cnn_filters_per_width = parse(key, value)?,
            "cnn_learning_rate" => self.cnn_learning_rate = parse(key, value)?,
            "cnn_epochs" => self.cnn_epochs = parse(key, value)?,
            "cnn_batch" => self.cnn_batch = parse(key, value)?,
            "cnn_dim" => self.cnn_dim = parse(key, value)?,
            "message_ordering" => self.message_ordering = value.trim().to_string(),
            "aggregation_rule" => self.aggregation_rule = value.trim().to_string(),
            "repetitions" => self.repetitions = parse(key, value)?,
            "families" => self.families = value.trim().to_string(),
            "jobs" => self.jobs = parse(key, value)?,
            "synth_locations" => self.synth_locations = parse(key, value)?,
            "synth_noise_rate" => self.synth_noise_rate = parse(key, value)?,
            "synth_signal_vocab" => self.synth_signal_vocab = parse(key, value)?,
            "synth_noise_vocab" => self.synth_noise_vocab = parse(key, value)?,
            "synth_emit_pos" => self.synth_emit_pos = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn tz_offset_secs(&self) -> i64 {
        (self.tz_offset_hours * 3600.0).round() as i64
    }

    /// Effective-config echo embedded into every report.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.catalog.len() < 2 {
            return Err(Error::Config("catalog needs at least 2 classes".to_string()));
        }
        if !(self.synth_noise_rate >= 0.0 && self.synth_noise_rate <= 1.0) {
            return Err(Error::Config(format!(
                "synth_noise_rate must be in [0,1], got {}",
                self.synth_noise_rate
            )));
        }
        match self.aggregation_rule.as_str() {
            "diagonal" | "l1" => {}
            other => {
                return Err(Error::Config(format!(
                    "aggregation_rule must be diagonal or l1, got {other:?}"
                )))
            }
        }
        match self.message_ordering.as_str() {
            "random" | "distance" | "lm" => {}
            other => {
                return Err(Error::Config(format!(
                    "message_ordering must be random, distance or lm, got {other:?}"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn set_known_keys() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "7").unwrap();
        cfg.set("radius_m", "15.5").unwrap();
        cfg.set("families", "textual+ngrams").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.radius_m, 15.5);
        assert_eq!(cfg.families, "textual+ngrams");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("radius", "20").is_err());
    }

    #[test]
    fn parses_key_value_text_with_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nseed = 9\n\nmin_messages = 3 # trailing\n")
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.min_messages, 3);
        assert!(cfg.apply_text("no equals sign").is_err());
    }

    #[test]
    fn tz_offset_converts_to_seconds() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.tz_offset_secs(), -18_000);
        cfg.set("tz_offset_hours", "5.5").unwrap();
        assert_eq!(cfg.tz_offset_secs(), 19_800);
    }

    #[test]
    fn echo_is_deterministic() {
        let cfg = RunConfig::default();
        assert_eq!(
            serde_json::to_string(&cfg.echo()).unwrap(),
            serde_json::to_string(&cfg.echo()).unwrap()
        );
    }
}
