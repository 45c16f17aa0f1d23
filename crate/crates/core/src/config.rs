//! Run configuration, named presets and TOML loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SplitSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::probhead::{AppendedBoundary, SupportFlavor};

/// Architecture variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    #[default]
    Full,
    Sbsp,
    Sbpdp,
    Ibbpdp,
    Bspdp,
    Fourbsp,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::Sbsp,
        AblationMode::Sbpdp,
        AblationMode::Ibbpdp,
        AblationMode::Bspdp,
        AblationMode::Fourbsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::Sbsp => "sbsp",
            AblationMode::Sbpdp => "sbpdp",
            AblationMode::Ibbpdp => "ibbpdp",
            AblationMode::Bspdp => "bspdp",
            AblationMode::Fourbsp => "fourbsp",
        }
    }

    /// Loss weights after switching off the terms this mode has no branches for.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            AblationMode::Full => w,
            AblationMode::Ibbpdp => LossWeights { alpha: w.alpha, beta: 0.0, gamma: 0.0 },
            AblationMode::Bspdp => LossWeights { alpha: 0.0, beta: 0.0, gamma: w.gamma },
            AblationMode::Sbsp | AblationMode::Sbpdp | AblationMode::Fourbsp => LossWeights::zero(),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let valid: Vec<_> = AblationMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown mode {s:?}; valid modes: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Interpdn,
    Dlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    #[serde(default = "yes")]
    pub border_overlap: bool,
    /// Seasonal period for MASE; derived from `id` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasonality: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_ema_alpha")]
    pub ema_alpha: f64,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default)]
    pub backbone: BackboneKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "default_theta_shape")]
    pub theta_shape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    #[serde(default = "default_support_count")]
    pub count: usize,
    #[serde(default = "default_boundary")]
    pub boundary: f64,
    #[serde(default = "default_flavor")]
    pub flavor: SupportFlavor,
    #[serde(default)]
    pub appended_boundary: AppendedBoundary,
    #[serde(default)]
    pub merge_softmax: bool,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            count: default_support_count(),
            boundary: default_boundary(),
            flavor: default_flavor(),
            appended_boundary: AppendedBoundary::Upper,
            merge_softmax: false,
        }
    }
}

/// Complete, resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub support: SupportConfig,
}

fn yes() -> bool {
    true
}
fn default_downsample() -> usize {
    4
}
fn default_ema_alpha() -> f64 {
    0.3
}
fn default_patience() -> usize {
    10
}
fn default_theta_shape() -> f64 {
    1.0
}
fn default_support_count() -> usize {
    25
}
fn default_boundary() -> f64 {
    4.0
}
fn default_flavor() -> SupportFlavor {
    SupportFlavor::EqualProbability
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl DatasetConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::new(self.train_len, self.val_len, self.test_len)
    }

    /// Seasonal period used by MASE.
    pub fn mase_seasonality(&self) -> Option<usize> {
        if self.seasonality.is_some() {
            return self.seasonality;
        }
        let id = self.id.to_ascii_lowercase();
        let table = [
            ("etth", 24),
            ("ettm", 96),
            ("weather", 144),
            ("traffic", 24),
            ("ecl", 24),
            ("electricity", 24),
            ("exchange", 7),
            ("illness", 52),
            ("synthetic", 24),
        ];
        table
            .iter()
            .find(|(prefix, _)| id.starts_with(prefix))
            .map(|&(_, s)| s)
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            gamma: self.loss.gamma,
        }
    }

    /// Weights actually applied under the configured mode.
    pub fn effective_weights(&self) -> LossWeights {
        self.model.mode.effective_weights(self.weights())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.lookback < 2 {
            return Err(cfg_err("model.lookback", "must be at least 2"));
        }
        if m.horizon < 1 {
            return Err(cfg_err("model.horizon", "must be at least 1"));
        }
        if m.patch_len < 1 || m.patch_len > m.lookback {
            return Err(cfg_err("model.patch_len", format!("must lie in 1..={}", m.lookback)));
        }
        if m.stride < 1 {
            return Err(cfg_err("model.stride", "must be at least 1"));
        }
        if m.downsample < 2 {
            return Err(cfg_err("model.downsample", "must be at least 2"));
        }
        if !(m.ema_alpha > 0.0 && m.ema_alpha <= 1.0) {
            return Err(cfg_err("model.ema_alpha", "must lie in (0, 1]"));
        }
        let t = &self.training;
        if !(t.initial_lr > 0.0 && t.initial_lr.is_finite()) {
            return Err(cfg_err("training.initial_lr", "must be positive"));
        }
        if t.batch_size < 1 {
            return Err(cfg_err("training.batch_size", "must be at least 1"));
        }
        if t.max_epochs < 1 {
            return Err(cfg_err("training.max_epochs", "must be at least 1"));
        }
        if t.patience < 1 {
            return Err(cfg_err("training.patience", "must be at least 1"));
        }
        let l = &self.loss;
        for (key, v) in [("loss.alpha", l.alpha), ("loss.beta", l.beta), ("loss.gamma", l.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(key, "must be a nonnegative number"));
            }
        }
        if !(l.theta_shape > 0.0 && l.theta_shape.is_finite()) {
            return Err(cfg_err("loss.theta_shape", "must be positive"));
        }
        let s = &self.support;
        if s.count < 2 {
            return Err(cfg_err("support.count", "must be at least 2"));
        }
        if !(s.boundary > 0.0 && s.boundary.is_finite()) {
            return Err(cfg_err("support.boundary", "must be positive"));
        }
        if s.flavor == SupportFlavor::Interleaved {
            return Err(cfg_err(
                "support.flavor",
                "must be equal_probability or uniform; the interleaved set is derived",
            ));
        }
        let d = &self.dataset;
        let need = m.lookback + m.horizon;
        if d.train_len < need {
            return Err(cfg_err(
                "dataset.train_len",
                format!("{} rows cannot hold one window of {need}", d.train_len),
            ));
        }
        let eval_need = if d.border_overlap { m.horizon } else { need };
        for (key, len) in [("dataset.val_len", d.val_len), ("dataset.test_len", d.test_len)] {
            if len < eval_need {
                return Err(cfg_err(key, format!("{len} rows cannot hold one window")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a TOML document; a top-level `preset = "name"` fills missing keys.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match doc.remove("preset") {
            Some(toml::Value::String(name)) => {
                let p = preset(&name)?;
                toml::Table::try_from(&p).map_err(|e| Error::Config(e.to_string()))?
            }
            Some(_) => return Err(cfg_err("preset", "must be a string")),
            None => toml::Table::new(),
        };
        let merged = merge_tables(base, doc);
        let cfg: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// `over` wins; nested tables merge key by key.
fn merge_tables(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        let merged = match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => toml::Value::Table(merge_tables(b, o)),
            (_, v) => v,
        };
        base.insert(k, merged);
    }
    base
}

struct Row {
    horizon: usize,
    lookback: usize,
    lr: f64,
    batch: usize,
    ab: f64,
    gamma: f64,
    patch: usize,
    stride: usize,
    epochs: usize,
}

#[allow(clippy::too_many_arguments)]
const fn row(
    horizon: usize,
    lookback: usize,
    lr: f64,
    batch: usize,
    ab: f64,
    gamma: f64,
    patch: usize,
    stride: usize,
    epochs: usize,
) -> Row {
    Row {
        horizon,
        lookback,
        lr,
        batch,
        ab,
        gamma,
        patch,
        stride,
        epochs,
    }
}

struct Family {
    id: &'static str,
    split: (usize, usize, usize),
    rows: &'static [Row],
}

const FAMILIES: &[Family] = &[
    Family {
        id: "etth1",
        split: (8545, 2881, 2881),
        rows: &[
            row(96, 512, 1e-4, 1024, 0.05, 0.1, 16, 8, 100),
            row(192, 512, 1e-4, 1024, 0.05, 0.1, 16, 8, 100),
            row(336, 512, 1e-4, 1024, 0.05, 0.05, 16, 8, 100),
            row(720, 512, 1e-4, 1024, 0.1, 0.1, 16, 8, 100),
        ],
    },
    Family {
        id: "etth2",
        split: (8545, 2881, 2881),
        rows: &[
            row(96, 512, 1e-4, 1024, 0.02, 0.1, 16, 8, 100),
            row(192, 512, 1e-4, 1024, 0.05, 0.2, 16, 8, 100),
            row(336, 512, 1e-4, 1024, 0.02, 0.3, 16, 8, 100),
            row(720, 512, 1e-4, 1024, 0.02, 0.4, 16, 8, 100),
        ],
    },
    Family {
        id: "ettm1",
        split: (34465, 11521, 11521),
        rows: &[
            row(96, 512, 1e-4, 2048, 0.3, 0.2, 16, 8, 150),
            row(192, 512, 1e-4, 2048, 0.1, 0.2, 16, 8, 100),
            row(336, 512, 1e-4, 2048, 0.1, 0.2, 16, 8, 100),
            row(720, 512, 1e-4, 1024, 0.1, 0.1, 16, 8, 100),
        ],
    },
    Family {
        id: "ettm2",
        split: (34465, 11521, 11521),
        rows: &[
            row(96, 512, 1e-4, 2048, 0.1, 0.1, 16, 8, 100),
            row(192, 512, 1e-4, 2048, 0.1, 0.1, 16, 8, 100),
            row(336, 512, 1e-4, 1024, 0.1, 0.2, 16, 8, 100),
            row(720, 512, 1e-4, 1024, 0.1, 0.2, 16, 8, 100),
        ],
    },
    Family {
        id: "weather",
        split: (36792, 5271, 10540),
        rows: &[
            row(96, 512, 1e-4, 512, 0.1, 0.2, 16, 8, 100),
            row(192, 512, 1e-4, 1024, 0.1, 0.2, 16, 8, 100),
            row(336, 512, 1e-4, 1024, 0.1, 0.2, 16, 8, 100),
            row(720, 512, 1e-4, 1024, 0.05, 0.2, 16, 8, 100),
        ],
    },
    Family {
        id: "traffic",
        split: (12185, 1757, 3509),
        rows: &[
            row(96, 720, 5e-3, 64, 0.1, 0.2, 24, 12, 120),
            row(192, 720, 5e-3, 64, 0.1, 0.2, 24, 12, 120),
            row(336, 720, 5e-3, 64, 0.05, 0.2, 24, 12, 120),
            row(720, 720, 5e-3, 64, 0.05, 0.3, 24, 12, 120),
        ],
    },
    Family {
        id: "ecl",
        split: (18317, 2633, 5261),
        rows: &[
            row(96, 720, 1e-3, 128, 0.1, 0.2, 16, 8, 120),
            row(192, 720, 1e-3, 128, 0.1, 0.2, 16, 8, 120),
            row(336, 720, 1e-3, 128, 0.1, 0.2, 16, 8, 120),
            row(720, 720, 1e-3, 128, 0.1, 0.2, 16, 8, 120),
        ],
    },
    Family {
        id: "exchange",
        split: (5120, 665, 1422),
        rows: &[
            row(96, 96, 1e-4, 32, 0.1, 0.3, 16, 8, 100),
            row(192, 96, 1e-4, 32, 0.1, 0.3, 16, 8, 100),
            row(336, 96, 1e-4, 32, 0.1, 0.3, 16, 8, 100),
            row(720, 96, 1e-4, 32, 0.05, 0.3, 16, 8, 100),
        ],
    },
    Family {
        id: "illness",
        split: (617, 74, 170),
        rows: &[
            row(24, 36, 1e-2, 32, 0.1, 0.1, 6, 3, 100),
            row(36, 36, 1e-2, 32, 0.1, 0.3, 6, 3, 100),
            row(48, 36, 1e-2, 32, 0.1, 0.3, 6, 3, 100),
            row(60, 36, 1e-2, 32, 0.1, 0.1, 6, 3, 100),
        ],
    },
];

fn from_row(id: &str, split: (usize, usize, usize), r: &Row) -> TrainConfig {
    TrainConfig {
        dataset: DatasetConfig {
            id: id.to_string(),
            train_len: split.0,
            val_len: split.1,
            test_len: split.2,
            border_overlap: true,
            seasonality: None,
        },
        model: ModelConfig {
            lookback: r.lookback,
            horizon: r.horizon,
            patch_len: r.patch,
            stride: r.stride,
            downsample: default_downsample(),
            ema_alpha: default_ema_alpha(),
            mode: AblationMode::Full,
            backbone: BackboneKind::Interpdn,
        },
        training: TrainingConfig {
            initial_lr: r.lr,
            batch_size: r.batch,
            max_epochs: r.epochs,
            patience: default_patience(),
            seed: 0,
        },
        loss: LossConfig {
            alpha: r.ab,
            beta: r.ab,
            gamma: r.gamma,
            theta_shape: default_theta_shape(),
        },
        support: SupportConfig::default(),
    }
}

/// Small configuration for tests and the synthetic benchmark.
pub fn tiny() -> TrainConfig {
    TrainConfig {
        dataset: DatasetConfig {
            id: "synthetic".into(),
            train_len: 2800,
            val_len: 400,
            test_len: 800,
            border_overlap: true,
            seasonality: None,
        },
        model: ModelConfig {
            lookback: 16,
            horizon: 8,
            patch_len: 4,
            stride: 2,
            downsample: 2,
            ema_alpha: default_ema_alpha(),
            mode: AblationMode::Full,
            backbone: BackboneKind::Interpdn,
        },
        training: TrainingConfig {
            initial_lr: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: default_patience(),
            seed: 0,
        },
        loss: LossConfig {
            alpha: 0.05,
            beta: 0.05,
            gamma: 0.1,
            theta_shape: default_theta_shape(),
        },
        support: SupportConfig {
            count: 5,
            ..SupportConfig::default()
        },
    }
}

/// Every preset name.
pub fn preset_names() -> Vec<String> {
    let mut names = vec!["tiny".to_string()];
    for f in FAMILIES {
        for r in f.rows {
            names.push(format!("{}_{}", f.id, r.horizon));
        }
    }
    names
}

pub fn preset(name: &str) -> Result<TrainConfig> {
    let lower = name.to_ascii_lowercase();
    if lower == "tiny" {
        return Ok(tiny());
    }
    let lower = lower.replace("electricity", "ecl");
    for f in FAMILIES {
        for r in f.rows {
            if lower == format!("{}_{}", f.id, r.horizon) {
                return Ok(from_row(f.id, f.split, r));
            }
        }
    }
    Err(Error::Config(format!(
        "unknown preset {name:?}; available: {}",
        preset_names().join(", ")
    )))
}
