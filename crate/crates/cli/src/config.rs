//! Experiment configuration files: one `key=value` per line, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use sf_core::config::MODEL_KEYS;
use sf_core::ModelConfig;
use sf_scene::Difficulty;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub n_train_episodes: usize,
    pub data_fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub eval_trials: usize,
    pub eval_every: usize,
    pub probe_steps: usize,
    /// Fills the `wall_ms` metrics column; off by default so that metrics
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            difficulty: Difficulty::MonoAmbiguous,
            n_train_episodes: 400,
            data_fraction: 1.0,
            iterations: 5000,
            batch_size: 8,
            lr: 1e-3,
            alpha: 0.5,
            eval_trials: 100,
            eval_every: 500,
            probe_steps: 2000,
            record_wall_time: false,
            model: ModelConfig::default(),
        }
    }
}

const RUN_KEYS: [&str; 12] = [
    "seed",
    "difficulty",
    "n_train_episodes",
    "data_fraction",
    "iterations",
    "batch_size",
    "lr",
    "alpha",
    "eval_trials",
    "eval_every",
    "probe_steps",
    "record_wall_time",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "difficulty" => {
                self.difficulty = Difficulty::parse(value)
                    .ok_or_else(|| format!("difficulty: expected two_view or mono_ambiguous, got `{value}`"))?
            }
            "n_train_episodes" => self.n_train_episodes = parse(key, value)?,
            "data_fraction" => self.data_fraction = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "eval_trials" => self.eval_trials = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "probe_steps" => self.probe_steps = parse(key, value)?,
            "record_wall_time" => self.record_wall_time = parse(key, value)?,
            _ => {
                if !self.model.set(key, value).map_err(|e| e.to_string())? {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must be in (0, 1], got {}", self.data_fraction));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        for (name, v) in [
            ("n_train_episodes", self.n_train_episodes),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("eval_trials", self.eval_trials),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.alpha > 0.0 && self.batch_size * self.model.n_visual_tokens() < 2 {
            return bad("alignment needs at least two visual tokens per batch".into());
        }
        let expected_views = 2;
        if self.model.n_views != expected_views {
            return bad(format!("the reach task renders {expected_views} views, n_views is {}", self.model.n_views));
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Line { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse_str(&text)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "difficulty={}", self.difficulty.name());
        let _ = writeln!(s, "n_train_episodes={}", self.n_train_episodes);
        let _ = writeln!(s, "data_fraction={}", self.data_fraction);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "eval_trials={}", self.eval_trials);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "probe_steps={}", self.probe_steps);
        let _ = writeln!(s, "record_wall_time={}", self.record_wall_time);
        s.push_str(&self.model.to_text());
        s
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        RUN_KEYS.into_iter().chain(MODEL_KEYS)
    }

    /// Episodes actually trained on: the first `data_fraction` share in
    /// seed order, at least one.
    pub fn used_episodes(&self) -> usize {
        ((self.n_train_episodes as f64 * self.data_fraction).round() as usize).clamp(1, self.n_train_episodes)
    }

    /// Scene seed of training episode `i`.
    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    /// Scene seed of held-out evaluation trial `j`; disjoint from every
    /// training seed range.
    pub fn eval_seed(&self, j: usize) -> u64 {
        (1u64 << 40) + self.train_seed(j)
    }
}
