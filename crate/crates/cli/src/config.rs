//! Flat `key = value` run configuration.
//!
//! Every key has a default. A resolved config is written next to each run's
//! outputs and can be fed back with `--config` to repeat the run.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sspg_core::losses::KlVariant;
use sspg_core::qla::Connectivity;
use sspg_core::{GenSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMode {
    /// KL on exactly when QLA is on.
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub train: TrainConfig,
    pub ratio: f64,
    pub kl: KlMode,
    pub model: Role,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Held-out dataset evaluated during `train-ssl` every `eval_every` steps.
    pub eval_data: Option<PathBuf>,
    pub eval_every: u64,
    pub budget_masks: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenSpec::default(),
            train: TrainConfig::default(),
            ratio: 0.1,
            kl: KlMode::Auto,
            model: Role::Teacher,
            data: None,
            out: None,
            checkpoint: None,
            eval_data: None,
            eval_every: 0,
            budget_masks: 875_073,
        }
    }
}

/// Problem with a single config entry; `line` is set for file input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: key `{}`: {}", self.key, self.message),
            None => write!(f, "key `{}`: {}", self.key, self.message),
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Shortest string that parses back to the same f64.
fn real(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let t = &mut self.train;
        let g = &mut self.gen;
        match key {
            "seed" => {
                let s = num(v)?;
                g.seed = s;
                t.seed = s;
            }
            "count" => g.count = num(v)?,
            "height" => g.height = num(v)?,
            "width" => g.width = num(v)?,
            "max_things" => g.max_things = num(v)?,
            "stuff_bands" => g.stuff_bands = num(v)?,
            "plural_prob" => g.plural_prob = num(v)?,
            "overlap_prob" => g.overlap_prob = num(v)?,
            "embed_dim" => g.embed_dim = num(v)?,
            "ratio" => self.ratio = num(v)?,
            "burn_in_steps" => t.burn_in_steps = num(v)?,
            "ssl_steps" => t.ssl_steps = num(v)?,
            "batch_labeled" => t.batch_labeled = num(v)?,
            "batch_unlabeled" => t.batch_unlabeled = num(v)?,
            "lr" => t.adam.lr = num(v)?,
            "adam_beta1" => t.adam.beta1 = num(v)?,
            "adam_beta2" => t.adam.beta2 = num(v)?,
            "adam_eps" => t.adam.eps = num(v)?,
            "ema_alpha" => t.ema_alpha = num(v)?,
            "threshold" => t.threshold = num(v)?,
            "hidden" => t.hidden = num(v)?,
            "lambda_sup_bce" => t.weights.sup_bce = num(v)?,
            "lambda_sup_dice" => t.weights.sup_dice = num(v)?,
            "lambda_unsup_bce" => t.weights.unsup_bce = num(v)?,
            "lambda_unsup_dice" => t.weights.unsup_dice = num(v)?,
            "lambda_unsup_kl" => t.weights.unsup_kl = num(v)?,
            "lambda_unsup" => t.weights.unsup = num(v)?,
            "kl" => {
                self.kl = match v {
                    "auto" => KlMode::Auto,
                    "on" => KlMode::On,
                    "off" => KlMode::Off,
                    _ => return Err(format!("expected auto/on/off, got `{v}`")),
                }
            }
            "kl_variant" => {
                t.kl_variant = KlVariant::parse(v).ok_or_else(|| format!("unknown KL variant `{v}`"))?
            }
            "qla" => t.qla_enabled = flag(v)?,
            "qla_beta" => t.qla.beta = num(v)?,
            "qla_mu" => t.qla.mu = num(v)?,
            "qla_sigma" => t.qla.sigma = num(v)?,
            "qla_clamp" => t.qla.clamp_pixel_weights = flag(v)?,
            "connectivity" => {
                t.qla.connectivity = match v {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => return Err(format!("expected 4 or 8, got `{v}`")),
                }
            }
            "tau_init" => t.qla.tau_init = num(v)?,
            "tau_step_drop" => t.qla.tau_step_drop = num(v)?,
            "tau_interval" => t.qla.tau_interval = num(v)?,
            "tau_floor" => t.qla.tau_floor = num(v)?,
            "eds" => t.qla.eds_fraction = num(v)?,
            "aug_gaussian" => t.aug.gaussian = flag(v)?,
            "aug_flip" => t.aug.flip = flag(v)?,
            "aug_crop" => t.aug.crop = flag(v)?,
            "aug_jitter" => t.aug.jitter = flag(v)?,
            "aug_prob" => t.aug.prob = num(v)?,
            "model" => {
                self.model = match v {
                    "teacher" => Role::Teacher,
                    "student" => Role::Student,
                    _ => return Err(format!("expected teacher or student, got `{v}`")),
                }
            }
            "data" => self.data = path(v),
            "out" => self.out = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "eval_data" => self.eval_data = path(v),
            "eval_every" => self.eval_every = num(v)?,
            "budget_masks" => self.budget_masks = num(v)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let g = &self.gen;
        vec![
            ("seed", g.seed.to_string()),
            ("count", g.count.to_string()),
            ("height", g.height.to_string()),
            ("width", g.width.to_string()),
            ("max_things", g.max_things.to_string()),
            ("stuff_bands", g.stuff_bands.to_string()),
            ("plural_prob", real(g.plural_prob)),
            ("overlap_prob", real(g.overlap_prob)),
            ("embed_dim", g.embed_dim.to_string()),
            ("ratio", real(self.ratio)),
            ("burn_in_steps", t.burn_in_steps.to_string()),
            ("ssl_steps", t.ssl_steps.to_string()),
            ("batch_labeled", t.batch_labeled.to_string()),
            ("batch_unlabeled", t.batch_unlabeled.to_string()),
            ("lr", real(t.adam.lr)),
            ("adam_beta1", real(t.adam.beta1)),
            ("adam_beta2", real(t.adam.beta2)),
            ("adam_eps", real(t.adam.eps)),
            ("ema_alpha", real(t.ema_alpha)),
            ("threshold", real(t.threshold)),
            ("hidden", t.hidden.to_string()),
            ("lambda_sup_bce", real(t.weights.sup_bce)),
            ("lambda_sup_dice", real(t.weights.sup_dice)),
            ("lambda_unsup_bce", real(t.weights.unsup_bce)),
            ("lambda_unsup_dice", real(t.weights.unsup_dice)),
            ("lambda_unsup_kl", real(t.weights.unsup_kl)),
            ("lambda_unsup", real(t.weights.unsup)),
            (
                "kl",
                match self.kl {
                    KlMode::Auto => "auto",
                    KlMode::On => "on",
                    KlMode::Off => "off",
                }
                .to_string(),
            ),
            ("kl_variant", t.kl_variant.as_str().to_string()),
            ("qla", on_off(t.qla_enabled)),
            ("qla_beta", real(t.qla.beta)),
            ("qla_mu", real(t.qla.mu)),
            ("qla_sigma", real(t.qla.sigma)),
            ("qla_clamp", on_off(t.qla.clamp_pixel_weights)),
            (
                "connectivity",
                match t.qla.connectivity {
                    Connectivity::Four => "4",
                    Connectivity::Eight => "8",
                }
                .to_string(),
            ),
            ("tau_init", real(t.qla.tau_init)),
            ("tau_step_drop", real(t.qla.tau_step_drop)),
            ("tau_interval", t.qla.tau_interval.to_string()),
            ("tau_floor", real(t.qla.tau_floor)),
            ("eds", real(t.qla.eds_fraction)),
            ("aug_gaussian", on_off(t.aug.gaussian)),
            ("aug_flip", on_off(t.aug.flip)),
            ("aug_crop", on_off(t.aug.crop)),
            ("aug_jitter", on_off(t.aug.jitter)),
            ("aug_prob", real(t.aug.prob)),
            ("model", self.model.as_str().to_string()),
            ("data", show_path(&self.data)),
            ("out", show_path(&self.out)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("eval_data", show_path(&self.eval_data)),
            ("eval_every", self.eval_every.to_string()),
            ("budget_masks", self.budget_masks.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, message: String| ConfigError {
                key: key.to_string(),
                line: Some(i + 1),
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, "expected `key = value`".into()))?;
            let k = k.trim();
            self.set(k, v).map_err(|m| err(k, m))?;
        }
        Ok(())
    }

    /// Training config with derived settings resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        let kl_on = match self.kl {
            KlMode::Auto => t.qla_enabled,
            KlMode::On => true,
            KlMode::Off => false,
        };
        if !kl_on {
            t.weights.unsup_kl = 0.0;
        }
        t
    }

    pub fn gen_spec(&self) -> GenSpec {
        self.gen.clone()
    }
}
