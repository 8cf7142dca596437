//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, later lines override earlier
//! ones. Unknown keys are rejected except `task.<name>=<kind>:<dir>` entries,
//! which declare downstream task datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::noising::{NoiseConfig, NoiseKind};
use crate::train::TrainConfig;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for init, data order, noise and dropout"),
    ("corpus", "", "pretraining documents (blank-line separated)"),
    ("vocab", "", "existing vocabulary file; empty trains one"),
    ("vocab_size", "512", "BPE vocabulary size when training one"),
    ("max_len", "128", "token limit for inputs and targets, including BOS/EOS"),
    ("noise", "ti+sp", "ti | sp | ti+sp; sets both flags below"),
    ("use_text_infilling", "true", "span infilling"),
    ("use_sentence_permutation", "true", "sentence shuffling"),
    ("mask_ratio", "0.3", "fraction of tokens covered by spans"),
    ("poisson_lambda", "3", "mean span length"),
    ("d_model", "32", "hidden size"),
    ("n_heads", "2", "attention heads"),
    ("n_enc_layers", "1", "encoder layers"),
    ("n_dec_layers", "1", "decoder layers"),
    ("d_ff", "64", "feed-forward width"),
    ("max_positions", "128", "learned position table size"),
    ("dropout_rate", "0", "dropout probability"),
    ("ner_types", "4", "entity type slots in the pointer head"),
    ("total_steps", "200", "pretraining optimizer steps"),
    ("batch_size", "8", "sequences per batch"),
    ("lr_max", "0.0001", "peak learning rate"),
    ("warmup_ratio", "0.02", "fraction of steps spent warming up"),
    ("weight_decay", "0.01", "decoupled weight decay"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "0.00000001", "Adam denominator epsilon"),
    ("grad_clip_norm", "1", "global gradient norm limit"),
    ("checkpoint_interval", "50", "steps between checkpoints; 0 = end only"),
    ("finetune_epochs", "6", "fine-tuning epochs per task"),
    ("finetune_lr", "0.0001", "fine-tuning peak learning rate"),
    ("finetune_batch_size", "8", "fine-tuning sequences per batch"),
    ("beam_size", "5", "beam width for evaluation"),
    ("length_penalty", "0", "length normalisation exponent; 0 ranks by raw log-prob"),
    ("max_decode_len", "64", "generation limit including BOS"),
    ("bleu_smoothing", "false", "add-one smoothing for zero n-gram counts"),
];

const FLOAT_KEYS: &[&str] = &[
    "mask_ratio",
    "poisson_lambda",
    "dropout_rate",
    "lr_max",
    "warmup_ratio",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip_norm",
    "finetune_lr",
    "length_penalty",
];

/// Downstream task families understood by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    Dialogue,
    Summarization,
    Linking,
    Ner,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dialogue" => Self::Dialogue,
            "summarization" => Self::Summarization,
            "linking" => Self::Linking,
            "ner" => Self::Ner,
            _ => {
                return Err(Error::Config(format!(
                    "unknown task kind {s:?} (expected dialogue, summarization, linking or ner)"
                )))
            }
        })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dialogue => "dialogue",
            Self::Summarization => "summarization",
            Self::Linking => "linking",
            Self::Ner => "ner",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskEntry {
    pub kind: TaskKind,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    tasks: BTreeMap<String, TaskEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
            tasks: BTreeMap::new(),
        }
    }
}

fn key_of(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _, _)| *k).find(|k| *k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override such as a `--set` flag.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(name) = key.strip_prefix("task.") {
            if name.is_empty() {
                return Err(Error::Config("task entry needs a name".into()));
            }
            let (kind, dir) = value.split_once(':').ok_or_else(|| {
                Error::Config(format!("task.{name} must be <kind>:<dir>, got {value:?}"))
            })?;
            self.tasks.insert(
                name.to_string(),
                TaskEntry {
                    kind: kind.parse()?,
                    dir: dir.to_string(),
                },
            );
            return Ok(());
        }
        let k = key_of(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        self.check_type(k, value)?;
        if k == "noise" {
            let kind: NoiseKind = value.parse()?;
            let (ti, sp) = kind.flags();
            self.values.insert("use_text_infilling", ti.to_string());
            self.values.insert("use_sentence_permutation", sp.to_string());
        }
        let value = if k == "noise" {
            value.parse::<NoiseKind>()?.to_string()
        } else {
            value.to_string()
        };
        self.values.insert(k, value);
        if k.starts_with("use_") {
            if let Some(kind) = NoiseKind::from_flags(
                self.get_bool("use_text_infilling")?,
                self.get_bool("use_sentence_permutation")?,
            ) {
                self.values.insert("noise", kind.to_string());
            }
        }
        Ok(())
    }

    fn check_type(&self, key: &'static str, value: &str) -> Result<()> {
        let default = KEYS.iter().find(|(k, _, _)| *k == key).map(|e| e.1).unwrap();
        let bad = |what: &str| Err(Error::Config(format!("{key}: expected {what}, got {value:?}")));
        match key {
            "corpus" | "vocab" | "noise" => Ok(()),
            _ if default == "true" || default == "false" => {
                if value.parse::<bool>().is_err() {
                    return bad("true or false");
                }
                Ok(())
            }
            _ if FLOAT_KEYS.contains(&key) => match value.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(()),
                _ => bad("a number"),
            },
            _ => {
                if value.parse::<u64>().is_err() {
                    return bad("a non-negative integer");
                }
                Ok(())
            }
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        key_of(key)
            .and_then(|k| self.values.get(k))
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get_parsed(key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get_parsed(key)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get_parsed(key)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.get_parsed(key)
    }

    /// A path value, or `None` when blank.
    pub fn get_path(&self, key: &str) -> Result<Option<&str>> {
        let v = self.get(key)?;
        Ok((!v.is_empty()).then_some(v))
    }

    pub fn tasks(&self) -> &BTreeMap<String, TaskEntry> {
        &self.tasks
    }

    pub fn noise_config(&self) -> Result<NoiseConfig> {
        let cfg = NoiseConfig {
            mask_ratio: self.get_f64("mask_ratio")?,
            poisson_lambda: self.get_f64("poisson_lambda")?,
            use_text_infilling: self.get_bool("use_text_infilling")?,
            use_sentence_permutation: self.get_bool("use_sentence_permutation")?,
            seed: self.get_u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            d_model: self.get_usize("d_model")?,
            n_heads: self.get_usize("n_heads")?,
            n_enc_layers: self.get_usize("n_enc_layers")?,
            n_dec_layers: self.get_usize("n_dec_layers")?,
            d_ff: self.get_usize("d_ff")?,
            max_positions: self.get_usize("max_positions")?,
            dropout_rate: self.get_f64("dropout_rate")?,
            ner_types: self.get_usize("ner_types")?,
        };
        cfg.validate()?;
        if cfg.max_positions < self.get_usize("max_len")? {
            return Err(Error::Config(format!(
                "max_positions {} is below max_len {}",
                cfg.max_positions,
                self.get_usize("max_len")?
            )));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            total_steps: self.get_usize("total_steps")?,
            batch_size: self.get_usize("batch_size")?,
            lr_max: self.get_f64("lr_max")?,
            warmup_ratio: self.get_f64("warmup_ratio")?,
            weight_decay: self.get_f64("weight_decay")?,
            adam_beta1: self.get_f64("adam_beta1")?,
            adam_beta2: self.get_f64("adam_beta2")?,
            adam_eps: self.get_f64("adam_eps")?,
            grad_clip_norm: self.get_f64("grad_clip_norm")?,
            seed: self.get_u64("seed")?,
            epochs: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedule for fine-tuning: same optimizer settings, task-level LR,
    /// batch size and epoch count.
    pub fn finetune_config(&self) -> Result<TrainConfig> {
        let mut cfg = self.train_config()?;
        cfg.lr_max = self.get_f64("finetune_lr")?;
        cfg.batch_size = self.get_usize("finetune_batch_size")?;
        cfg.epochs = self.get_usize("finetune_epochs")?;
        if cfg.epochs == 0 {
            return Err(Error::Config("finetune_epochs must be positive".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved configuration; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(k);
            out.push('=');
            out.push_str(&self.values[k]);
            out.push('\n');
        }
        for (name, t) in &self.tasks {
            out.push_str(&format!("task.{name}={}:{}\n", t.kind, t.dir));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Resolved pairs as ordered (key, value) tuples.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _, _)| (k.to_string(), self.values[k].clone()))
            .collect()
    }
}

pub fn model_config_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    [
        ("vocab_size", cfg.vocab_size.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("n_enc_layers", cfg.n_enc_layers.to_string()),
        ("n_dec_layers", cfg.n_dec_layers.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("max_positions", cfg.max_positions.to_string()),
        ("dropout_rate", cfg.dropout_rate.to_string()),
        ("ner_types", cfg.ner_types.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Rebuilds a model config from a key lookup such as a checkpoint header.
pub fn model_config_from(get: impl Fn(&str) -> Option<String>) -> Result<ModelConfig> {
    fn field<T: FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<T> {
        let v = get(key).ok_or_else(|| Error::Config(format!("missing model key {key}")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("model key {key}: cannot parse {v:?}")))
    }
    let cfg = ModelConfig {
        vocab_size: field(&get, "vocab_size")?,
        d_model: field(&get, "d_model")?,
        n_heads: field(&get, "n_heads")?,
        n_enc_layers: field(&get, "n_enc_layers")?,
        n_dec_layers: field(&get, "n_dec_layers")?,
        d_ff: field(&get, "d_ff")?,
        max_positions: field(&get, "max_positions")?,
        dropout_rate: field(&get, "dropout_rate")?,
        ner_types: field(&get, "ner_types")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_pairs(cfg: &TrainConfig) -> Vec<(String, String)> {
    [
        ("total_steps", cfg.total_steps.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr_max", cfg.lr_max.to_string()),
        ("warmup_ratio", cfg.warmup_ratio.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("adam_beta1", cfg.adam_beta1.to_string()),
        ("adam_beta2", cfg.adam_beta2.to_string()),
        ("adam_eps", cfg.adam_eps.to_string()),
        ("grad_clip_norm", cfg.grad_clip_norm.to_string()),
        ("seed", cfg.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
