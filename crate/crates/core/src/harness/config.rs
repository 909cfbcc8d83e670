//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;

use super::HarnessError;
use crate::cells::{CellKind, NetworkSpec};
use crate::data::Preprocess;
use crate::math::ActivationKind;
use crate::optim::{AdamConfig, RegConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Next-byte prediction on a text corpus.
    Text,
    /// Sum of `k` concatenated MNIST digits.
    Combo,
    /// Single-digit recognition (the combo task with `k = 1`).
    Digit,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Text => "text",
            Task::Combo => "combo",
            Task::Digit => "digit",
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Task::Text),
            "combo" => Ok(Task::Combo),
            "digit" => Ok(Task::Digit),
            _ => Err(format!("unknown task `{s}` (text, combo, digit)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub cell: CellKind,
    pub widths: Vec<usize>,
    pub activation: ActivationKind,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub eta: f64,
    pub eta_w: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Text: sequence length of the first (pre-train) epoch; 0 skips it.
    pub pretrain_len: usize,
    /// Text: sequence length of every other epoch.
    pub main_len: usize,
    /// Text: input noise standard deviation during the pre-train epoch.
    pub pretrain_noise: f64,
    /// Combo: number of concatenated digits.
    pub k: usize,
    /// Digit tasks: training sequences per epoch.
    pub train_samples: usize,
    /// Digit tasks: size of the fixed test set.
    pub test_samples: usize,
    pub digit_noise: f64,
    pub blur: bool,
    pub seed: u64,
    pub corpus_path: Option<PathBuf>,
    /// Text: use only the first this-many bytes of the corpus.
    pub corpus_bytes: Option<usize>,
    pub mnist_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub log_every: u64,
    pub ema: f64,
    /// 0 saves only at epoch ends.
    pub checkpoint_every: u64,
    pub eval_at_start: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            task: Task::Digit,
            cell: CellKind::Lstwm,
            widths: vec![32, 32],
            activation: ActivationKind::LogAct,
            alpha: adam.alpha,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            eta: 1e-3,
            eta_w: 1e-3,
            batch_size: 32,
            epochs: 6,
            pretrain_len: 200,
            main_len: 2000,
            pretrain_noise: 0.01,
            k: 4,
            train_samples: 60_000,
            test_samples: 10_000,
            digit_noise: 1e-5,
            blur: true,
            seed: 1,
            corpus_path: None,
            corpus_bytes: None,
            mnist_dir: None,
            output_dir: PathBuf::from("runs/default"),
            log_every: 100,
            ema: 0.99,
            checkpoint_every: 0,
            eval_at_start: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::Config(format!("bad value for `{key}`: `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!("bad value for `{key}`: `{value}`"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut eta_w_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value, got `{raw}`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            eta_w_set |= key == "eta_w";
            cfg.set(key, value)?;
        }
        if !eta_w_set {
            cfg.eta_w = cfg.eta;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "task" => self.task = value.parse().map_err(HarnessError::Config)?,
            "cell" => {
                self.cell = CellKind::parse(value)
                    .ok_or_else(|| HarnessError::Config(format!("unknown cell `{value}` (lstm, lstwm)")))?
            }
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| parse_value::<usize>(key, w.trim()))
                    .collect::<Result<_, _>>()?
            }
            "activation" => {
                self.activation = match ActivationKind::parse(value) {
                    Some(a @ (ActivationKind::Tanh | ActivationKind::LogAct)) => a,
                    _ => return Err(HarnessError::Config(format!("unknown activation `{value}` (tanh, log)"))),
                }
            }
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "eta_w" => self.eta_w = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "pretrain_len" => self.pretrain_len = parse_value(key, value)?,
            "main_len" => self.main_len = parse_value(key, value)?,
            "pretrain_noise" => self.pretrain_noise = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "train_samples" => self.train_samples = parse_value(key, value)?,
            "test_samples" => self.test_samples = parse_value(key, value)?,
            "digit_noise" => self.digit_noise = parse_value(key, value)?,
            "blur" => self.blur = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "corpus_path" => self.corpus_path = optional_path(value),
            "corpus_bytes" => {
                self.corpus_bytes = if value.is_empty() {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "mnist_dir" => self.mnist_dir = optional_path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "log_every" => self.log_every = parse_value(key, value)?,
            "ema" => self.ema = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "eval_at_start" => self.eval_at_start = parse_bool(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to String");
        };
        kv("task", self.task.name().into());
        kv("cell", self.cell.name().into());
        kv("widths", widths.join(","));
        kv("activation", self.activation.name().into());
        kv("alpha", self.alpha.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_epsilon", self.adam_epsilon.to_string());
        kv("eta", self.eta.to_string());
        kv("eta_w", self.eta_w.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("pretrain_len", self.pretrain_len.to_string());
        kv("main_len", self.main_len.to_string());
        kv("pretrain_noise", self.pretrain_noise.to_string());
        kv("k", self.k.to_string());
        kv("train_samples", self.train_samples.to_string());
        kv("test_samples", self.test_samples.to_string());
        kv("digit_noise", self.digit_noise.to_string());
        kv("blur", self.blur.to_string());
        kv("seed", self.seed.to_string());
        kv("corpus_path", path(&self.corpus_path));
        kv("corpus_bytes", self.corpus_bytes.map(|b| b.to_string()).unwrap_or_default());
        kv("mnist_dir", path(&self.mnist_dir));
        kv("output_dir", self.output_dir.display().to_string());
        kv("log_every", self.log_every.to_string());
        kv("ema", self.ema.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_at_start", self.eval_at_start.to_string());
        s
    }

    /// FNV-1a digest of the canonical text.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.to_text().as_bytes());
        h.finish()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths must list at least one positive layer width");
        }
        if !(self.alpha > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("ADAM needs alpha > 0 and beta1, beta2 in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive");
        }
        if !(self.eta >= 0.0) || !(self.eta_w >= 0.0) {
            return fail("eta and eta_w must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.ema) {
            return fail("ema must be in [0, 1)");
        }
        if self.log_every == 0 {
            return fail("log_every must be positive");
        }
        match self.task {
            Task::Text => {
                if self.corpus_path.is_none() {
                    return fail("text task needs corpus_path");
                }
                if self.main_len < 2 || (self.pretrain_len != 0 && self.pretrain_len < 2) {
                    return fail("text sequence lengths must be at least 2");
                }
                if !(self.pretrain_noise >= 0.0) {
                    return fail("pretrain_noise must be non-negative");
                }
            }
            Task::Combo | Task::Digit => {
                if self.mnist_dir.is_none() {
                    return fail("digit tasks need mnist_dir");
                }
                if self.digit_count() == 0 {
                    return fail("k must be at least 1");
                }
                if self.train_samples == 0 || self.test_samples == 0 {
                    return fail("train_samples and test_samples must be positive");
                }
                if !(self.digit_noise >= 0.0) {
                    return fail("digit_noise must be non-negative");
                }
            }
        }
        Ok(())
    }

    pub fn digit_count(&self) -> usize {
        match self.task {
            Task::Digit => 1,
            _ => self.k,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig {
            eta: self.eta,
            eta_w: self.eta_w,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            noise_scale: self.digit_noise,
            blur: self.blur,
        }
    }

    pub fn network_spec(&self, input_width: usize, output_width: usize) -> NetworkSpec {
        NetworkSpec::uniform(input_width, self.cell, &self.widths, self.activation, output_width)
    }
}
