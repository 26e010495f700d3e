use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mtl::{DiffMode, Framework, LossWeights, Pooling};
use crate::textdata::{parse_kv, parse_tasks, KvEntry, OovPolicy, SynthConfig, TaskSource, TaskSpec};

/// How the min–max between encoder and discriminator is optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialMode {
    /// One fused step through a gradient-reversal boundary.
    #[default]
    Reversal,
    /// A discriminator-only step followed by an encoder/head step each cycle.
    Alternating,
}

impl FromStr for AdversarialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reversal" => Ok(AdversarialMode::Reversal),
            "alternating" => Ok(AdversarialMode::Alternating),
            _ => Err(Error::Config(format!(
                "unknown adversarial mode {s:?} (expected reversal or alternating)"
            ))),
        }
    }
}

impl std::fmt::Display for AdversarialMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdversarialMode::Reversal => "reversal",
            AdversarialMode::Alternating => "alternating",
        })
    }
}

/// Everything a training run needs. Parsed from `key = value` files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub framework: Framework,
    pub pooling: Pooling,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// Pretrained vectors; random vectors in ±`embed_scale` otherwise.
    pub embeddings: Option<PathBuf>,
    pub embed_scale: f64,
    pub oov: OovPolicy,
    pub min_count: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub diff_mode: DiffMode,
    pub adversarial: AdversarialMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_divisor: f64,
    pub lr_threshold: f64,
    pub shuffle: bool,
    /// Replaces the measured dev signal: the learning rate drops exactly at the
    /// end of these epochs (1-based) and nowhere else.
    pub scripted_dev_drops: Option<Vec<usize>>,
    pub synth: SynthConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            framework: Framework::Sp,
            pooling: Pooling::Max,
            seed: 1,
            hidden: 64,
            embed_dim: 50,
            mlp_hidden: 512,
            embeddings: None,
            embed_scale: 1.0,
            oov: OovPolicy::Zeros,
            min_count: 1,
            beta: 0.0,
            gamma: 0.0,
            lambda: 1.0,
            diff_mode: DiffMode::Normalized,
            adversarial: AdversarialMode::Reversal,
            batch_size: 128,
            max_epochs: 50,
            initial_lr: 0.1,
            lr_decay: 0.99,
            lr_divisor: 5.0,
            lr_threshold: 1e-5,
            shuffle: true,
            scripted_dev_drops: None,
            synth: SynthConfig::default(),
            tasks: Vec::new(),
        }
    }
}

fn parse_value<T: FromStr>(e: &KvEntry, source: &str) -> Result<T> {
    e.value.parse().map_err(|_| {
        Error::Config(format!(
            "{source}:{}: bad value {:?} for {}",
            e.line, e.value, e.key
        ))
    })
}

fn parse_bool(e: &KvEntry, source: &str) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{source}:{}: expected a boolean for {}",
            e.line, e.key
        ))),
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        // absolute, so a resolved config written elsewhere still finds the data
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &base, &path.display().to_string())
    }

    /// Parses a config; relative data paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path, source: &str) -> Result<Self> {
        let entries = parse_kv(text, source).map_err(|e| match e {
            Error::Format { path, line, message } => Error::Config(format!("{path}:{line}: {message}")),
            other => other,
        })?;
        let (tasks, rest) = parse_tasks(&entries, base, source)?;
        let mut cfg = TrainConfig {
            tasks,
            ..TrainConfig::default()
        };
        let mut seen: Vec<&str> = Vec::new();
        for e in &rest {
            if seen.contains(&e.key.as_str()) {
                return Err(Error::Config(format!("{source}:{}: duplicate key {}", e.line, e.key)));
            }
            seen.push(&e.key);
            match e.key.as_str() {
                "framework" => cfg.framework = e.value.parse()?,
                "pooling" => cfg.pooling = e.value.parse()?,
                "seed" => cfg.seed = parse_value(e, source)?,
                "hidden" => cfg.hidden = parse_value(e, source)?,
                "embed_dim" => cfg.embed_dim = parse_value(e, source)?,
                "mlp_hidden" => cfg.mlp_hidden = parse_value(e, source)?,
                "embeddings" => cfg.embeddings = Some(base.join(&e.value)),
                "embed_scale" => cfg.embed_scale = parse_value(e, source)?,
                "oov" => {
                    cfg.oov = match e.value.as_str() {
                        "zeros" => OovPolicy::Zeros,
                        v => match v.strip_prefix("uniform:") {
                            Some(s) => OovPolicy::Uniform {
                                seed: s.parse().map_err(|_| {
                                    Error::Config(format!("{source}:{}: bad oov seed", e.line))
                                })?,
                            },
                            None => {
                                return Err(Error::Config(format!(
                                    "{source}:{}: oov must be zeros or uniform:<seed>",
                                    e.line
                                )))
                            }
                        },
                    }
                }
                "min_count" => cfg.min_count = parse_value(e, source)?,
                "beta" => cfg.beta = parse_value(e, source)?,
                "gamma" => cfg.gamma = parse_value(e, source)?,
                "lambda" => cfg.lambda = parse_value(e, source)?,
                "diff_mode" => cfg.diff_mode = e.value.parse()?,
                "adversarial" => cfg.adversarial = e.value.parse()?,
                "batch_size" => cfg.batch_size = parse_value(e, source)?,
                "max_epochs" => cfg.max_epochs = parse_value(e, source)?,
                "initial_lr" => cfg.initial_lr = parse_value(e, source)?,
                "lr_decay" => cfg.lr_decay = parse_value(e, source)?,
                "lr_divisor" => cfg.lr_divisor = parse_value(e, source)?,
                "lr_threshold" => cfg.lr_threshold = parse_value(e, source)?,
                "shuffle" => cfg.shuffle = parse_bool(e, source)?,
                "scripted_dev_drops" => {
                    let epochs = e
                        .value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Config(format!("{source}:{}: bad epoch list", e.line)))?;
                    cfg.scripted_dev_drops = Some(epochs);
                }
                "synth.fillers" => cfg.synth.fillers = parse_value(e, source)?,
                "synth.content" => cfg.synth.content = parse_value(e, source)?,
                "synth.markers" => cfg.synth.markers = parse_value(e, source)?,
                "synth.min_len" => cfg.synth.min_len = parse_value(e, source)?,
                "synth.max_len" => cfg.synth.max_len = parse_value(e, source)?,
                other => {
                    return Err(Error::Config(format!(
                        "{source}:{}: unknown config key {other:?}",
                        e.line
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            diff_mode: self.diff_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return bad("no tasks declared (use task.<name>.* keys)".into());
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.batch_size == 0 {
            return bad("hidden, embed_dim, mlp_hidden and batch_size must be positive".into());
        }
        if self.min_count == 0 {
            return bad("min_count must be at least 1".into());
        }
        for (name, v) in [
            ("initial_lr", self.initial_lr),
            ("lr_decay", self.lr_decay),
            ("lr_threshold", self.lr_threshold),
            ("embed_scale", self.embed_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor > 1.0) {
            return bad(format!("lr_divisor must exceed 1, got {}", self.lr_divisor));
        }
        if self.lr_decay > 1.0 {
            return bad(format!("lr_decay must not exceed 1, got {}", self.lr_decay));
        }
        self.loss_weights().validate()?;
        if self.framework == Framework::Asp && self.tasks.len() < 2 {
            return bad("ASP needs at least two tasks for its discriminator".into());
        }
        for t in &self.tasks {
            if let TaskSource::Synthetic { kind, train_size, dev_size } = &t.source {
                if *train_size == 0 || *dev_size == 0 {
                    return bad(format!("task {}: synthetic sizes must be positive", t.name));
                }
                if t.classes() != 2 {
                    return bad(format!("task {}: synthetic tasks are binary", t.name));
                }
                if let crate::textdata::SynthKind::PrivateMarker(k) = kind {
                    if *k >= self.synth.markers {
                        return bad(format!("task {}: marker {k} exceeds synth.markers", t.name));
                    }
                }
            }
        }
        Ok(())
    }

    /// The resolved configuration as a parseable config file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("framework", self.framework.to_string());
        kv("pooling", self.pooling.to_string());
        kv("seed", self.seed.to_string());
        kv("hidden", self.hidden.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("mlp_hidden", self.mlp_hidden.to_string());
        if let Some(p) = &self.embeddings {
            kv("embeddings", p.display().to_string());
        }
        kv("embed_scale", self.embed_scale.to_string());
        kv(
            "oov",
            match self.oov {
                OovPolicy::Zeros => "zeros".into(),
                OovPolicy::Uniform { seed } => format!("uniform:{seed}"),
            },
        );
        kv("min_count", self.min_count.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("lambda", self.lambda.to_string());
        kv("diff_mode", self.diff_mode.to_string());
        kv("adversarial", self.adversarial.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("initial_lr", self.initial_lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_divisor", self.lr_divisor.to_string());
        kv("lr_threshold", self.lr_threshold.to_string());
        kv("shuffle", self.shuffle.to_string());
        if let Some(d) = &self.scripted_dev_drops {
            kv(
                "scripted_dev_drops",
                d.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            );
        }
        kv("synth.fillers", self.synth.fillers.to_string());
        kv("synth.content", self.synth.content.to_string());
        kv("synth.markers", self.synth.markers.to_string());
        kv("synth.min_len", self.synth.min_len.to_string());
        kv("synth.max_len", self.synth.max_len.to_string());
        for t in &self.tasks {
            let n = &t.name;
            kv(&format!("task.{n}.labels"), t.labels.join(","));
            match &t.source {
                TaskSource::Files { train, dev, test } => {
                    kv(&format!("task.{n}.train"), train.display().to_string());
                    kv(&format!("task.{n}.dev"), dev.display().to_string());
                    if let Some(p) = test {
                        kv(&format!("task.{n}.test"), p.display().to_string());
                    }
                }
                TaskSource::Synthetic {
                    kind,
                    train_size,
                    dev_size,
                } => {
                    kv(&format!("task.{n}.synth"), kind.to_string());
                    kv(&format!("task.{n}.train_size"), train_size.to_string());
                    kv(&format!("task.{n}.dev_size"), dev_size.to_string());
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "\
framework = ASP
seed = 7
hidden = 8
beta = 0.01
gamma = 0.05
task.a.synth = shared-overlap
task.b.synth = private-marker:1
task.b.train_size = 40
";

    #[test]
    fn parses_and_defaults() {
        let c = TrainConfig::from_text(BASIC, Path::new("."), "cfg").unwrap();
        assert_eq!(c.framework, Framework::Asp);
        assert_eq!((c.seed, c.hidden, c.beta, c.gamma), (7, 8, 0.01, 0.05));
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.initial_lr, 0.1);
        assert_eq!(c.tasks.len(), 2);
    }

    #[test]
    fn unknown_and_bad_keys_are_rejected() {
        let e = TrainConfig::from_text("learning_rate = 0.1\ntask.a.synth = shared-overlap\n", Path::new("."), "c");
        assert!(matches!(e, Err(Error::Config(m)) if m.contains("learning_rate")));
        assert!(TrainConfig::from_text("hidden = many\ntask.a.synth = shared-overlap\n", Path::new("."), "c").is_err());
        assert!(TrainConfig::from_text("beta = -1\ntask.a.synth = shared-overlap\n", Path::new("."), "c").is_err());
        assert!(TrainConfig::from_text("lr_divisor = 1\ntask.a.synth = shared-overlap\n", Path::new("."), "c").is_err());
        assert!(TrainConfig::from_text("seed = 1\n", Path::new("."), "c").is_err());
        assert!(TrainConfig::from_text("seed = 1\nseed = 2\ntask.a.synth = shared-overlap\n", Path::new("."), "c").is_err());
        // one task cannot feed a discriminator
        assert!(TrainConfig::from_text("framework = ASP\ntask.a.synth = shared-overlap\n", Path::new("."), "c").is_err());
    }

    #[test]
    fn resolved_text_parses_back() {
        let mut c = TrainConfig::from_text(BASIC, Path::new("."), "cfg").unwrap();
        c.scripted_dev_drops = Some(vec![3]);
        let again = TrainConfig::from_text(&c.to_text(), Path::new("."), "resolved").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = TrainConfig::from_file(Path::new("/nonexistent/run.cfg")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/run.cfg"));
    }
}
