//! Flat `key = value` run configuration. Every key has a default; files and
//! `--set` overrides may only name keys from [`KEYS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anticipation_core::datagen::{DatasetManifest, GenerateConfig};
use anticipation_core::model::ModelConfig;
use anticipation_core::trainer::{OptimizerConfig, PhaseKind, PhaseSpec, TrainConfig};

use crate::error::{Error, Result};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "out", "output directory (flag and ANTICIPATION_OUT_DIR take precedence)"),
    ("data", "data", "dataset directory read by train, eval, ensemble and report"),
    ("gen.seed", "42", "dataset generator seed"),
    ("gen.train", "1200", "training clips"),
    ("gen.val", "300", "validation clips"),
    ("gen.test", "300", "test clips"),
    ("gen.verbs", "6", "verb classes V"),
    ("gen.nouns", "8", "noun classes N"),
    ("gen.actions", "12", "action classes A, at most V*N"),
    ("gen.zipf", "1.0", "action frequency exponent, 0 for balanced"),
    ("gen.action_weights", "", "explicit comma-separated action frequencies, overrides gen.zipf"),
    ("gen.frame_size", "16", "frame height and width"),
    ("gen.k_obj", "20", "object detector classes"),
    ("gen.noise", "0.5", "pixel noise standard deviation"),
    ("model.modality", "rgb", "rgb, flow, flow_snippets, obj or masked_rgb"),
    ("model.cell", "horst", "horst, mpnnel, mpnnel_tb or mpnnel_ctp"),
    ("model.order", "4", "HORST queue length S"),
    ("model.filter_kernel", "7", "spatial filter kernel size"),
    ("model.dim", "32", "MPNNEL vertex width D"),
    ("model.heads", "2", "attention heads"),
    ("model.templates", "4", "template bank size M"),
    ("model.encoder", "16,32", "encoder channel widths"),
    ("model.seed", "0", "parameter initialization seed"),
    ("train.seed", "0", "minibatch shuffling seed"),
    ("train.batch_size", "16", "clips per update"),
    ("train.gamma", "0.5", "class weight exponent in [0, 1]"),
    ("train.lr_scale", "100", "multiplier on every scheduled learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.001", "decoupled weight decay"),
    ("train.grad_clip", "5", "global gradient norm ceiling, 0 disables"),
    ("train.aux_weight", "1", "weight of the class-token losses"),
    ("warmup.epochs", "50", ""),
    ("warmup.lr_start", "1e-4", ""),
    ("warmup.lr_end", "1e-6", ""),
    ("ordinary.epochs", "50", ""),
    ("ordinary.lr_start", "1e-4", ""),
    ("ordinary.lr_end", "1e-6", ""),
    ("finetune.epochs", "20", ""),
    ("finetune.lr_start", "1e-5", ""),
    ("finetune.lr_end", "1e-7", ""),
    ("finetune_joint_val.epochs", "20", ""),
    ("finetune_joint_val.lr_start", "1e-5", ""),
    ("finetune_joint_val.lr_end", "1e-7", ""),
    ("eval.split", "val", "split scored by eval"),
    ("eval.model_id", "", "score set name, defaults to <cell>-<modality>"),
    ("ensemble.rgb_weight", "1", "fusion weight of rgb score sets relative to the rest"),
];

pub const OUT_DIR_ENV: &str = "ANTICIPATION_OUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        self.apply_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a known key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("{key} = '{raw}': {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{key} = '{raw}': {e}")))
            })
            .collect()
    }

    /// Output directory: the explicit flag, then the environment, then the
    /// `out` key.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.into();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => v.into(),
            _ => self.raw("out").into(),
        }
    }

    pub fn generate_config(&self) -> Result<GenerateConfig> {
        let weights: Vec<f64> = self.list("gen.action_weights")?;
        let cfg = GenerateConfig {
            seed: self.get("gen.seed")?,
            sizes: [self.get("gen.train")?, self.get("gen.val")?, self.get("gen.test")?],
            verbs: self.get("gen.verbs")?,
            nouns: self.get("gen.nouns")?,
            actions: self.get("gen.actions")?,
            zipf: self.get("gen.zipf")?,
            action_weights: (!weights.is_empty()).then_some(weights),
            frame_size: self.get("gen.frame_size")?,
            k_obj: self.get("gen.k_obj")?,
            noise: self.get("gen.noise")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model layout for `manifest`, whose class counts and shapes win over
    /// anything in the `gen.*` keys.
    pub fn model_config(&self, manifest: &DatasetManifest) -> Result<ModelConfig> {
        let enc: Vec<usize> = self.list("model.encoder")?;
        let encoder_channels: [usize; 2] = enc
            .try_into()
            .map_err(|_| Error::Config("model.encoder needs exactly two widths".into()))?;
        let cfg = ModelConfig {
            modality: self.get("model.modality")?,
            cell: self.get("model.cell")?,
            verbs: manifest.verbs,
            nouns: manifest.nouns,
            actions: manifest.actions,
            frame_size: manifest.frame_size,
            k_obj: manifest.k_obj,
            encoder_channels,
            order: self.get("model.order")?,
            filter_kernel: self.get("model.filter_kernel")?,
            dim: self.get("model.dim")?,
            heads: self.get("model.heads")?,
            templates: self.get("model.templates")?,
            seed: self.get("model.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip: f64 = self.get("train.grad_clip")?;
        let cfg = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            gamma: self.get("train.gamma")?,
            seed: self.get("train.seed")?,
            optimizer: OptimizerConfig {
                momentum: self.get("train.momentum")?,
                weight_decay: self.get("train.weight_decay")?,
            },
            lr_scale: self.get("train.lr_scale")?,
            grad_clip: (clip != 0.0).then_some(clip),
            aux_weight: self.get("train.aux_weight")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phase(&self, kind: PhaseKind) -> Result<PhaseSpec> {
        let name = kind.name();
        let spec = PhaseSpec::new(
            kind,
            self.get(&format!("{name}.epochs"))?,
            self.get(&format!("{name}.lr_start"))?,
            self.get(&format!("{name}.lr_end"))?,
        );
        spec.validate()?;
        Ok(spec)
    }
}

/// Renders the key table for `--help`.
pub fn describe_keys() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (key = default):\n");
    for (k, v, doc) in KEYS {
        let v = if v.is_empty() { "<unset>" } else { v };
        out.push_str(&format!("  {k:<width$} = {v:<8} {doc}\n"));
    }
    out
}
