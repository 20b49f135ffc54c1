//! Run configuration: a flat `key = value` file with `[section]` headers,
//! overridden key by key from the command line.
//!
//! ```text
//! [train]
//! pretrain_steps = 3000   # 300000 at full scale
//! finetune_steps = 1000   # 30000 at full scale
//! ```
//!
//! Every key is addressed as `section.key`; [`RunConfig::echo`] writes the
//! effective configuration back in the same format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use natr_core::autograd::AdamConfig;
use natr_core::model::{ModelConfig, ModelKind, RephraserVariant};
use natr_core::train::StepConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Padded token budget per batch (64K source words at full scale).
    pub max_tokens: usize,
    /// `vocab_size` is filled in from the data.
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Fresh optimiser moments when fine-tuning starts.
    pub reset_optim: bool,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Validate every this many steps (500 at full scale).
    pub valid_interval: u64,
    pub seed: u64,
    pub step: StepConfig,
    /// Average the parameters of the `k` best validation checkpoints.
    pub avg_best: usize,
    pub out: PathBuf,
    /// Mask-predict iteration counts reported by `eval`.
    pub eval_iterations: Vec<usize>,
    /// Mask-predict iterations used for validation and `decode`.
    pub decode_iterations: usize,
    pub length_candidates: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            max_tokens: 2000,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            reset_optim: false,
            pretrain_steps: 3000,
            finetune_steps: 1000,
            valid_interval: 100,
            seed: 1,
            step: StepConfig::default(),
            avg_best: 1,
            out: PathBuf::from("run"),
            eval_iterations: vec![1, 2, 4, 8],
            decode_iterations: 10,
            length_candidates: 5,
            eval_batch: 64,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        let bad = || ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        };
        match key {
            "data.train" => self.train_path = opt_path(v),
            "data.valid" => self.valid_path = opt_path(v),
            "data.test" => self.test_path = opt_path(v),
            "data.max_tokens" => self.max_tokens = parse(key, v)?,
            "model.kind" => self.model.model_kind = ModelKind::parse(v).map_err(|_| bad())?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "model.enc_layers" => self.model.n_enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.n_dec_layers = parse(key, v)?,
            "model.rephraser_layers" => self.model.rephraser_layers = parse(key, v)?,
            "model.rephraser_variant" => {
                self.model.rephraser_variant = RephraserVariant::parse(v).map_err(|_| bad())?
            }
            "model.ctc_upsample" => self.model.ctc_upsample = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.length_offset_range" => self.model.length_offset_range = parse(key, v)?,
            "model.position_embeddings" => self.model.position_embeddings = parse_bool(key, v)?,
            "optim.lr" => self.adam.lr = parse(key, v)?,
            "optim.beta1" => self.adam.beta1 = parse(key, v)?,
            "optim.beta2" => self.adam.beta2 = parse(key, v)?,
            "optim.eps" => self.adam.eps = parse(key, v)?,
            "optim.warmup_steps" => self.adam.warmup_steps = parse(key, v)?,
            "optim.reset" => self.reset_optim = parse_bool(key, v)?,
            "train.pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "train.finetune_steps" => self.finetune_steps = parse(key, v)?,
            "train.valid_interval" => self.valid_interval = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.rephraser" => self.step.use_rephraser = parse_bool(key, v)?,
            "train.alternate" => self.step.alternate = parse_bool(key, v)?,
            "train.finetune_rephraser_ce" => self.step.finetune_rephraser_ce = parse_bool(key, v)?,
            "train.length_loss_weight" => self.step.length_loss_weight = parse(key, v)?,
            "train.avg_best" => self.avg_best = parse(key, v)?,
            "train.out" => self.out = PathBuf::from(v),
            "reward.alpha_max" => self.step.reward.alpha_max = parse(key, v)?,
            "reward.alpha_min" => self.step.reward.alpha_min = parse(key, v)?,
            "reward.k_baseline" => self.step.reward.k_baseline = parse(key, v)?,
            "reward.empty_reward" => self.step.reward.empty_reward = parse(key, v)?,
            "reward.static_alpha" => {
                self.step.reward.static_alpha = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval.iterations" => {
                self.eval_iterations = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "eval.decode_iterations" => self.decode_iterations = parse(key, v)?,
            "eval.length_candidates" => self.length_candidates = parse(key, v)?,
            "eval.batch_size" => self.eval_batch = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// All keys with their current values, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let r = &self.step.reward;
        vec![
            ("data.train", path_or_empty(&self.train_path)),
            ("data.valid", path_or_empty(&self.valid_path)),
            ("data.test", path_or_empty(&self.test_path)),
            ("data.max_tokens", self.max_tokens.to_string()),
            ("model.kind", m.model_kind.name().into()),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.enc_layers", m.n_enc_layers.to_string()),
            ("model.dec_layers", m.n_dec_layers.to_string()),
            ("model.rephraser_layers", m.rephraser_layers.to_string()),
            ("model.rephraser_variant", m.rephraser_variant.name().into()),
            ("model.ctc_upsample", m.ctc_upsample.to_string()),
            ("model.max_len", m.max_len.to_string()),
            (
                "model.length_offset_range",
                m.length_offset_range.to_string(),
            ),
            (
                "model.position_embeddings",
                on_off(m.position_embeddings).into(),
            ),
            ("optim.lr", self.adam.lr.to_string()),
            ("optim.beta1", self.adam.beta1.to_string()),
            ("optim.beta2", self.adam.beta2.to_string()),
            ("optim.eps", self.adam.eps.to_string()),
            ("optim.warmup_steps", self.adam.warmup_steps.to_string()),
            ("optim.reset", on_off(self.reset_optim).into()),
            ("train.pretrain_steps", self.pretrain_steps.to_string()),
            ("train.finetune_steps", self.finetune_steps.to_string()),
            ("train.valid_interval", self.valid_interval.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.rephraser", on_off(self.step.use_rephraser).into()),
            ("train.alternate", on_off(self.step.alternate).into()),
            (
                "train.finetune_rephraser_ce",
                on_off(self.step.finetune_rephraser_ce).into(),
            ),
            (
                "train.length_loss_weight",
                self.step.length_loss_weight.to_string(),
            ),
            ("train.avg_best", self.avg_best.to_string()),
            ("train.out", self.out.display().to_string()),
            ("reward.alpha_max", r.alpha_max.to_string()),
            ("reward.alpha_min", r.alpha_min.to_string()),
            ("reward.k_baseline", r.k_baseline.to_string()),
            ("reward.empty_reward", r.empty_reward.to_string()),
            (
                "reward.static_alpha",
                r.static_alpha
                    .map_or_else(|| "none".into(), |a| a.to_string()),
            ),
            (
                "eval.iterations",
                self.eval_iterations
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("eval.decode_iterations", self.decode_iterations.to_string()),
            ("eval.length_candidates", self.length_candidates.to_string()),
            ("eval.batch_size", self.eval_batch.to_string()),
        ]
    }

    /// The effective configuration in file format; parsing it back gives
    /// the same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("keys are qualified");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Applies a configuration file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    reason: "unterminated section header".into(),
                })?;
                section = name.trim().to_owned();
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                reason: "expected `key = value`".into(),
            })?;
            let key = if section.is_empty() {
                k.trim().to_owned()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v.trim()).map_err(|e| ConfigError::Syntax {
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Ties the annealing horizon to the fine-tuning length and checks the
    /// parts that do not depend on the data.
    pub fn finalize(&mut self) -> Result<(), ConfigError> {
        self.step.reward.total_steps = self.finetune_steps;
        self.step
            .reward
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_tokens == 0 || self.eval_batch == 0 {
            return Err(ConfigError::Invalid(
                "max_tokens and eval.batch_size must be positive".into(),
            ));
        }
        if self.decode_iterations == 0
            || self.length_candidates == 0
            || self.eval_iterations.contains(&0)
        {
            return Err(ConfigError::Invalid(
                "mask-predict iterations and length candidates must be positive".into(),
            ));
        }
        if self.avg_best == 0 {
            return Err(ConfigError::Invalid("avg_best must be at least 1".into()));
        }
        Ok(())
    }
}
