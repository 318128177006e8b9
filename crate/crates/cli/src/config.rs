//! Line-oriented run configuration: parsing, precedence, and the
//! resolved-config echo that makes every run reproducible from its own
//! output directory.
//!
//! Files are `key = value` lines. Blank lines and `#` comments are
//! skipped; `[section]` headers are allowed for organization but carry
//! no meaning, so every key must be unique across the whole file.

use std::fmt::Write as _;

use pvgc_core::error::{Error, Result};
use pvgc_core::model::{HeadKind, ModelConfig, StageConfig};
use pvgc_core::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Everything a run needs. One seed drives model initialization, batch
/// shuffling, augmentation, the synthetic generator, and the split.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub synthetic: bool,
    pub synthetic_per_class: usize,
    pub manifest: Option<String>,
    pub images: Option<String>,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            synthetic: true,
            synthetic_per_class: 20,
            manifest: None,
            images: None,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

/// Command-line pieces that outrank the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub synthetic: bool,
    pub epochs: Option<usize>,
}

fn bad(at: &str, what: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what} ({at})"))
}

fn parse_usize(key: &str, value: &str, at: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(at, format!("{key} expects a non-negative integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str, at: &str) -> Result<u64> {
    value.parse().map_err(|_| bad(at, format!("{key} expects a non-negative integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str, at: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(at, format!("{key} expects a number, got {value:?}")))
}

fn parse_bool(key: &str, value: &str, at: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(at, format!("{key} expects true or false, got {value:?}"))),
    }
}

/// Stage list syntax: `DIMxDEPTH` pairs joined by commas, e.g.
/// `48x2,96x2,240x2,384x2`.
fn parse_stages(value: &str, at: &str) -> Result<Vec<StageConfig>> {
    let mut stages = Vec::new();
    for part in value.split(',') {
        let (dim, depth) = part
            .split_once('x')
            .ok_or_else(|| bad(at, format!("stages expects DIMxDEPTH pairs like 48x2, got {part:?}")))?;
        stages.push(StageConfig {
            dim: dim.trim().parse().map_err(|_| bad(at, format!("bad stage dim {dim:?}")))?,
            depth: depth.trim().parse().map_err(|_| bad(at, format!("bad stage depth {depth:?}")))?,
        });
    }
    Ok(stages)
}

fn stages_text(stages: &[StageConfig]) -> String {
    stages.iter().map(|s| format!("{}x{}", s.dim, s.depth)).collect::<Vec<_>>().join(",")
}

fn apply_preset(cfg: &mut RunConfig, name: &str, at: &str) -> Result<()> {
    match name {
        "tiny" => cfg.model = ModelConfig::tiny(),
        "micro" => cfg.model = ModelConfig::micro(),
        _ => return Err(bad(at, format!("unknown preset {name:?}, expected tiny or micro"))),
    }
    Ok(())
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str, at: &str) -> Result<()> {
    match key {
        "image" => cfg.model.image = parse_usize(key, value, at)?,
        "in_channels" => cfg.model.in_channels = parse_usize(key, value, at)?,
        "stages" => cfg.model.stages = parse_stages(value, at)?,
        "ffn_ratio" => cfg.model.ffn_ratio = parse_usize(key, value, at)?,
        "k" => cfg.model.k = parse_usize(key, value, at)?,
        "heads" => cfg.model.heads = parse_usize(key, value, at)?,
        "classes" => cfg.model.classes = parse_usize(key, value, at)?,
        "head" => {
            cfg.model.head = match value {
                "capsule" => HeadKind::Capsule,
                "pooling" => HeadKind::Pooling,
                _ => return Err(bad(at, format!("head expects capsule or pooling, got {value:?}"))),
            }
        }
        "pos_embed" => cfg.model.pos_embed = parse_bool(key, value, at)?,
        "primary_caps_dim" => cfg.model.primary_caps_dim = parse_usize(key, value, at)?,
        "capsule_dim" => cfg.model.capsule_dim = parse_usize(key, value, at)?,
        "routing_iters" => cfg.model.routing_iters = parse_usize(key, value, at)?,
        "pooling_hidden" => cfg.model.pooling_hidden = parse_usize(key, value, at)?,

        "epochs" => cfg.train.epochs = parse_usize(key, value, at)?,
        "batch_size" => cfg.train.batch_size = parse_usize(key, value, at)?,
        "start_lr" => cfg.train.start_lr = parse_f64(key, value, at)?,
        "peak_lr" => cfg.train.peak_lr = parse_f64(key, value, at)?,
        "warmup_epochs" => cfg.train.warmup_epochs = parse_usize(key, value, at)?,
        "beta1" => cfg.train.opt.beta1 = parse_f64(key, value, at)?,
        "beta2" => cfg.train.opt.beta2 = parse_f64(key, value, at)?,
        "eps" => cfg.train.opt.eps = parse_f64(key, value, at)?,
        "weight_decay" => cfg.train.opt.weight_decay = parse_f64(key, value, at)?,
        "loss" => {
            cfg.train.loss = match value {
                "margin" => LossKind::Margin,
                "cross_entropy" => LossKind::CrossEntropy,
                _ => return Err(bad(at, format!("loss expects margin or cross_entropy, got {value:?}"))),
            }
        }
        "augment" => cfg.train.augment = parse_bool(key, value, at)?,

        "synthetic" => cfg.synthetic = parse_bool(key, value, at)?,
        "synthetic_per_class" => cfg.synthetic_per_class = parse_usize(key, value, at)?,
        "manifest" => cfg.manifest = Some(value.to_string()),
        "images" => cfg.images = Some(value.to_string()),
        "train_frac" => cfg.train_frac = parse_f64(key, value, at)?,
        "val_frac" => cfg.val_frac = parse_f64(key, value, at)?,
        "test_frac" => cfg.test_frac = parse_f64(key, value, at)?,

        "seed" => cfg.seed = parse_u64(key, value, at)?,
        "precision" => {
            cfg.precision = Precision::parse(value)
                .ok_or_else(|| bad(at, format!("precision expects f32 or f64, got {value:?}")))?
        }
        _ => return Err(bad(at, format!("unknown key {key:?}"))),
    }
    Ok(())
}

struct FileEntry {
    line: usize,
    key: String,
    value: String,
}

fn parse_file(text: &str, name: &str) -> Result<Vec<FileEntry>> {
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') || trimmed.len() < 3 {
                return Err(Error::Config(format!("malformed section header {trimmed:?} (line {line} of {name})")));
            }
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config(format!("expected key = value, got {trimmed:?} (line {line} of {name})")));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("duplicate key {key:?} (line {line} of {name})")));
        }
        entries.push(FileEntry { line, key, value });
    }
    Ok(entries)
}

/// Builds the final configuration. Precedence, lowest to highest:
/// built-in defaults, preset (`--preset` flag outranks a `preset` line
/// in the file), file keys, `--set` pairs, then the dedicated flags
/// (`--seed`, `--precision`, `--synthetic`, `--epochs`).
pub fn resolve(file: Option<(&str, &str)>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();

    let entries = match file {
        Some((text, name)) => parse_file(text, name).map(|e| (e, name.to_string()))?,
        None => (Vec::new(), String::new()),
    };
    let (entries, file_name) = entries;

    let file_preset = entries.iter().find(|e| e.key == "preset");
    match (&ov.preset, file_preset) {
        (Some(name), _) => apply_preset(&mut cfg, name, "--preset")?,
        (None, Some(e)) => apply_preset(&mut cfg, &e.value, &format!("line {} of {}", e.line, file_name))?,
        (None, None) => {}
    }

    for e in entries.iter().filter(|e| e.key != "preset") {
        apply_key(&mut cfg, &e.key, &e.value, &format!("line {} of {}", e.line, file_name))?;
    }

    for s in &ov.sets {
        let at = format!("--set {s}");
        let Some((key, value)) = s.split_once('=') else {
            return Err(bad(&at, "expected --set key=value"));
        };
        let key = key.trim();
        if key == "preset" {
            return Err(bad(&at, "preset must come from the file or --preset"));
        }
        apply_key(&mut cfg, key, value.trim(), &at)?;
    }

    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(p) = ov.precision {
        cfg.precision = p;
    }
    if ov.synthetic {
        cfg.synthetic = true;
    }
    if let Some(epochs) = ov.epochs {
        cfg.train.epochs = epochs;
    }

    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split_spec().validate()?;
        if self.manifest.is_none() && !self.synthetic {
            return Err(Error::Config("no data source: set synthetic = true or point manifest at a csv".to_string()));
        }
        if self.manifest.is_some() && self.images.is_none() {
            return Err(Error::Config("manifest given without images: set images to the image directory".to_string()));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> pvgc_core::data::split::SplitSpec {
        pvgc_core::data::split::SplitSpec {
            train: self.train_frac,
            val: self.val_frac,
            test: self.test_frac,
            seed: self.seed,
        }
    }

    /// Serializes every key explicitly. The output parses back to this
    /// exact configuration, so the echo written next to a run's
    /// artifacts reproduces it byte for byte.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "image = {}", self.model.image);
        let _ = writeln!(s, "in_channels = {}", self.model.in_channels);
        let _ = writeln!(s, "stages = {}", stages_text(&self.model.stages));
        let _ = writeln!(s, "ffn_ratio = {}", self.model.ffn_ratio);
        let _ = writeln!(s, "k = {}", self.model.k);
        let _ = writeln!(s, "heads = {}", self.model.heads);
        let _ = writeln!(s, "classes = {}", self.model.classes);
        let _ = writeln!(s, "head = {}", match self.model.head {
            HeadKind::Capsule => "capsule",
            HeadKind::Pooling => "pooling",
        });
        let _ = writeln!(s, "pos_embed = {}", self.model.pos_embed);
        let _ = writeln!(s, "primary_caps_dim = {}", self.model.primary_caps_dim);
        let _ = writeln!(s, "capsule_dim = {}", self.model.capsule_dim);
        let _ = writeln!(s, "routing_iters = {}", self.model.routing_iters);
        let _ = writeln!(s, "pooling_hidden = {}", self.model.pooling_hidden);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "start_lr = {}", self.train.start_lr);
        let _ = writeln!(s, "peak_lr = {}", self.train.peak_lr);
        let _ = writeln!(s, "warmup_epochs = {}", self.train.warmup_epochs);
        let _ = writeln!(s, "beta1 = {}", self.train.opt.beta1);
        let _ = writeln!(s, "beta2 = {}", self.train.opt.beta2);
        let _ = writeln!(s, "eps = {}", self.train.opt.eps);
        let _ = writeln!(s, "weight_decay = {}", self.train.opt.weight_decay);
        let _ = writeln!(s, "loss = {}", match self.train.loss {
            LossKind::Margin => "margin",
            LossKind::CrossEntropy => "cross_entropy",
        });
        let _ = writeln!(s, "augment = {}", self.train.augment);
        let _ = writeln!(s);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "synthetic = {}", self.synthetic);
        let _ = writeln!(s, "synthetic_per_class = {}", self.synthetic_per_class);
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {m}");
        }
        if let Some(d) = &self.images {
            let _ = writeln!(s, "images = {d}");
        }
        let _ = writeln!(s, "train_frac = {}", self.train_frac);
        let _ = writeln!(s, "val_frac = {}", self.val_frac);
        let _ = writeln!(s, "test_frac = {}", self.test_frac);
        let _ = writeln!(s);
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        s
    }
}
