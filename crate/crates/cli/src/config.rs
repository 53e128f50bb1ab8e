//! Flat `dotted.key = value` run configuration.

use karat_core::attention::{HeadActivation, KaratConfig, Layout, Sharing};
use karat_core::basis::{BaseActivation, BasisKind, BasisSpec};
use karat_core::tape::ProjectionGrad;
use karat_core::vit::{AttentionKind, VitConfig};
use karat_harness::data::Augment;
use karat_harness::train::TrainConfig;
use std::collections::BTreeMap;
use std::str::FromStr;

/// Every accepted key with its default; an empty default means "derived" or "unset".
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model.preset", "micro"),
    ("model.image_size", ""),
    ("model.channels", ""),
    ("model.patch", ""),
    ("model.dim", ""),
    ("model.heads", ""),
    ("model.depth", ""),
    ("model.classes", ""),
    ("model.mlp_ratio", "4"),
    ("attention.kind", "softmax"),
    ("attention.basis", "fourier"),
    ("attention.grid_size", "3"),
    ("attention.rational_num", "5"),
    ("attention.rational_den", "4"),
    ("attention.base", "zero"),
    ("attention.fourier_dc", "false"),
    ("attention.scaled_init", "false"),
    ("attention.rank", "4"),
    ("attention.layout", "phi_w"),
    ("attention.sharing", "blockwise"),
    ("attention.project", "false"),
    ("attention.project_grad", "stop"),
    ("attention.input_scale", "1"),
    ("attention.heads", ""),
    ("data.format", "synthetic"),
    ("data.train", ""),
    ("data.test", ""),
    ("data.train_size", "512"),
    ("data.test_size", "128"),
    ("data.synthetic_seed", "1"),
    ("train.batch_size", "32"),
    ("train.epochs", "20"),
    ("train.base_lr", "0.001"),
    ("train.warmup_lr", "0.000001"),
    ("train.min_lr", "0.00001"),
    ("train.warmup_epochs", "2"),
    ("train.weight_decay", "0.05"),
    ("train.grad_clip", "1"),
    ("train.label_smoothing", "0.1"),
    ("train.eval_every", "1"),
    ("train.flip", "false"),
    ("train.crop_pad", "0"),
    ("eval.checkpoint", ""),
    ("transfer.teacher", ""),
    ("transfer.teacher_config", ""),
    ("analysis.checkpoint", ""),
    ("analysis.samples", "5"),
    ("analysis.layers", ""),
    ("analysis.bins", "50"),
    ("analysis.trajectory", ""),
    ("analysis.resolution", "41"),
    ("analysis.extent", "1"),
    ("analysis.filter_normalize", "false"),
    ("analysis.eval_samples", "128"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

type Res<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Res<T> {
    Err(ConfigError(msg.into()))
}

/// Resolved key/value settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Res<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected `key = value`", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if !known(k) {
            return err(format!("line {}: unknown key `{k}`", i + 1));
        }
        if out.iter().any(|(o, _)| o == k) {
            return err(format!("line {}: duplicate key `{k}`", i + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then file entries, then overrides; geometry left blank is filled from the preset.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Res<Self> {
        let mut values: BTreeMap<String, String> = SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in file.iter().chain(overrides) {
            if !known(k) {
                return err(format!("unknown key `{k}`"));
            }
            values.insert(k.clone(), v.clone());
        }
        let mut cfg = Self { values };
        cfg.fill_preset()?;
        cfg.model()?;
        cfg.train()?;
        Ok(cfg)
    }

    fn fill_preset(&mut self) -> Res<()> {
        let preset = self.get("model.preset").to_string();
        let geometry: [(&str, usize); 7] = match preset.as_str() {
            "micro" => [("image_size", 16), ("channels", 1), ("patch", 4), ("dim", 64), ("heads", 2), ("depth", 4), ("classes", 2)],
            "mini" => [("image_size", 32), ("channels", 3), ("patch", 4), ("dim", 128), ("heads", 4), ("depth", 6), ("classes", 10)],
            "tiny" => [("image_size", 224), ("channels", 3), ("patch", 16), ("dim", 192), ("heads", 3), ("depth", 12), ("classes", 10)],
            "small" => [("image_size", 224), ("channels", 3), ("patch", 16), ("dim", 384), ("heads", 6), ("depth", 12), ("classes", 1000)],
            "base" => [("image_size", 224), ("channels", 3), ("patch", 16), ("dim", 768), ("heads", 12), ("depth", 12), ("classes", 10)],
            other => return err(format!("model.preset: unknown preset `{other}` (micro, mini, tiny, small, base)")),
        };
        for (k, v) in geometry {
            let key = format!("model.{k}");
            if self.get(&key).is_empty() {
                self.values.insert(key, v.to_string());
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Res<T> {
        let v = self.get(key);
        v.parse().map_err(|_| ConfigError(format!("{key}: cannot parse `{v}`")))
    }

    pub fn flag(&self, key: &str) -> Res<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => err(format!("{key}: expected true or false, got `{v}`")),
        }
    }

    /// Non-empty value or an error naming the key.
    pub fn required(&self, key: &str) -> Res<&str> {
        match self.get(key) {
            "" => err(format!("{key}: required but not set")),
            v => Ok(v),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn karat(&self) -> Res<KaratConfig> {
        let grid_size: usize = self.parse("attention.grid_size")?;
        let kind = match self.get("attention.basis") {
            "fourier" => BasisKind::Fourier,
            "rational" => BasisKind::Rational { num: self.parse("attention.rational_num")?, den: self.parse("attention.rational_den")? },
            "mexican_hat" => BasisKind::MexicanHat,
            "morlet" => BasisKind::Morlet,
            "dog" => BasisKind::Dog,
            "meyer" => BasisKind::Meyer,
            "shannon" => BasisKind::Shannon,
            v => return err(format!("attention.basis: unknown basis `{v}`")),
        };
        let base = match self.get("attention.base") {
            "zero" => BaseActivation::Zero,
            "identity" => BaseActivation::Identity,
            "silu" => BaseActivation::Silu,
            "gelu" => BaseActivation::Gelu,
            v => return err(format!("attention.base: unknown base activation `{v}`")),
        };
        let layout = match self.get("attention.layout") {
            "full" => Layout::FullRank,
            "phi_w" => Layout::PhiThenW,
            "w_phi" => Layout::WThenPhi,
            "phi_phi" => Layout::PhiPhi,
            v => return err(format!("attention.layout: unknown layout `{v}`")),
        };
        let sharing = match self.get("attention.sharing") {
            "blockwise" => Sharing::Blockwise,
            "universal" => Sharing::Universal,
            v => return err(format!("attention.sharing: unknown sharing `{v}`")),
        };
        let project_grad = match self.get("attention.project_grad") {
            "stop" => ProjectionGrad::Stop,
            "masked" => ProjectionGrad::Masked,
            v => return err(format!("attention.project_grad: unknown mode `{v}`")),
        };
        let head_assignment = self
            .list("attention.heads")
            .iter()
            .map(|h| match h.as_str() {
                "softmax" => Ok(HeadActivation::Softmax),
                "karat" => Ok(HeadActivation::Karat),
                v => err(format!("attention.heads: unknown head activation `{v}`")),
            })
            .collect::<Res<Vec<_>>>()?;
        let basis = BasisSpec {
            kind,
            grid_size,
            base,
            fourier_dc: self.flag("attention.fourier_dc")?,
            scaled_init: self.flag("attention.scaled_init")?,
        };
        Ok(KaratConfig {
            basis,
            rank: self.parse("attention.rank")?,
            layout,
            sharing,
            project: self.flag("attention.project")?,
            project_grad,
            input_scale: self.parse("attention.input_scale")?,
            head_assignment,
        })
    }

    pub fn model(&self) -> Res<VitConfig> {
        let mut cfg = VitConfig::new(
            self.parse("model.image_size")?,
            self.parse("model.channels")?,
            self.parse("model.patch")?,
            self.parse("model.dim")?,
            self.parse("model.heads")?,
            self.parse("model.depth")?,
            self.parse("model.classes")?,
        );
        cfg.mlp_ratio = self.parse("model.mlp_ratio")?;
        cfg.attention = match self.get("attention.kind") {
            "softmax" => AttentionKind::Softmax,
            "karat" => AttentionKind::Karat(self.karat()?),
            v => return err(format!("attention.kind: expected softmax or karat, got `{v}`")),
        };
        cfg.validate().map_err(|e| ConfigError(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Res<TrainConfig> {
        let t = TrainConfig {
            batch_size: self.parse("train.batch_size")?,
            epochs: self.parse("train.epochs")?,
            base_lr: self.parse("train.base_lr")?,
            warmup_lr: self.parse("train.warmup_lr")?,
            min_lr: self.parse("train.min_lr")?,
            warmup_epochs: self.parse("train.warmup_epochs")?,
            weight_decay: self.parse("train.weight_decay")?,
            grad_clip: self.parse("train.grad_clip")?,
            seed: self.parse("seed")?,
            label_smoothing: self.parse("train.label_smoothing")?,
            eval_every: self.parse("train.eval_every")?,
            augment: Augment { flip: self.flag("train.flip")?, crop_pad: self.parse("train.crop_pad")? },
        };
        t.validate().map_err(|e| ConfigError(format!("train: {e}")))?;
        Ok(t)
    }
}
