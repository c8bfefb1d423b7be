//! Run configuration: every knob of a training run, with defaults, a flat
//! `key=value` file format and conversion into the component types.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::avg::{Scheme, DEFAULT_EMA_ALPHA, DEFAULT_K};
use crate::data::{self, Dataset};
use crate::engine::{BnMode, Loss, ModelSpec};
use crate::error::{Error, Result};
use crate::optim::{
    LrSchedule, OptimizerConfig, DEFAULT_ADAM_EPS, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_LA_ALPHA, DEFAULT_LA_K,
    DEFAULT_MOMENTUM,
};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Spirals {
        n_per_class: usize,
        classes: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
        label: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lookahead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    None,
    Uniform,
    Ema,
    Polyak,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnChoice {
    Auto,
    Recompute,
    Copy,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossChoice {
    Auto,
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    /// Seed for data generation; the run seed when unset.
    pub data_seed: Option<u64>,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub loss: LossChoice,
    pub optimizer: OptimizerKind,
    /// Inner optimizer when `optimizer` is lookahead.
    pub la_inner: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub la_alpha: f64,
    pub la_k: usize,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    pub end_lr: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scheme: SchemeKind,
    pub k: usize,
    pub alpha: f64,
    pub bn_mode: BnChoice,
    /// Save a checkpoint every this many optimizer steps instead of once per
    /// epoch.
    pub save_every_steps: Option<u64>,
    pub out: PathBuf,
    pub save_averaged: bool,
    /// When false the `wall_seconds` column is left empty, making
    /// `metrics.csv` a pure function of the configuration.
    pub wall_clock: bool,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DataSource::Spirals {
                n_per_class: 1000,
                classes: 2,
                noise: 0.2,
            },
            data_seed: None,
            hidden: vec![64, 64],
            batch_norm: false,
            loss: LossChoice::Auto,
            optimizer: OptimizerKind::Sgd,
            la_inner: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: DEFAULT_MOMENTUM,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            adam_eps: DEFAULT_ADAM_EPS,
            la_alpha: DEFAULT_LA_ALPHA,
            la_k: DEFAULT_LA_K,
            schedule: ScheduleKind::Cosine,
            warmup_steps: 0,
            end_lr: 0.0,
            power: 1.0,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            scheme: SchemeKind::Uniform,
            k: DEFAULT_K,
            alpha: DEFAULT_EMA_ALPHA,
            bn_mode: BnChoice::Auto,
            save_every_steps: None,
            out: PathBuf::from("run"),
            save_averaged: false,
            wall_clock: true,
            eval_batch_size: 256,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in `config.resolved` order.
pub const KEYS: &[&str] = &[
    "dataset",
    "n_per_class",
    "classes",
    "noise",
    "label_column",
    "data_seed",
    "hidden",
    "bn",
    "loss",
    "optimizer",
    "la_inner",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "adam_eps",
    "la_alpha",
    "la_k",
    "schedule",
    "warmup_steps",
    "end_lr",
    "power",
    "epochs",
    "batch_size",
    "seed",
    "scheme",
    "k",
    "alpha",
    "bn_mode",
    "save_every_steps",
    "out",
    "save_averaged",
    "wall_clock",
    "eval_batch_size",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_optimizer(key: &str, value: &str) -> Result<OptimizerKind> {
    match value {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        "lookahead" => Ok(OptimizerKind::Lookahead),
        _ => Err(Error::Config(format!("unknown optimizer `{value}` for `{key}`"))),
    }
}

fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
        OptimizerKind::Lookahead => "lookahead",
    }
}

impl RunConfig {
    fn spirals_mut(&mut self) -> Result<(&mut usize, &mut usize, &mut f64)> {
        match &mut self.dataset {
            DataSource::Spirals {
                n_per_class,
                classes,
                noise,
            } => Ok((n_per_class, classes, noise)),
            DataSource::Csv { .. } => Err(Error::Config("spiral parameters given for a csv dataset".into())),
        }
    }

    /// Applies one `key=value` setting. Dashes in keys are accepted as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "dataset" => {
                self.dataset = if value == "spirals" {
                    match self.dataset {
                        DataSource::Spirals { .. } => self.dataset.clone(),
                        DataSource::Csv { .. } => RunConfig::default().dataset,
                    }
                } else {
                    let label = match &self.dataset {
                        DataSource::Csv { label, .. } => label.clone(),
                        DataSource::Spirals { .. } => "label".into(),
                    };
                    DataSource::Csv {
                        path: PathBuf::from(value),
                        label,
                    }
                }
            }
            "n_per_class" => *self.spirals_mut()?.0 = parse(&key, value)?,
            "classes" => *self.spirals_mut()?.1 = parse(&key, value)?,
            "noise" => *self.spirals_mut()?.2 = parse(&key, value)?,
            "label_column" => match &mut self.dataset {
                DataSource::Csv { label, .. } => *label = value.to_owned(),
                DataSource::Spirals { .. } => {
                    return Err(Error::Config("label_column only applies to csv datasets".into()))
                }
            },
            "data_seed" => {
                self.data_seed = if value.is_empty() {
                    None
                } else {
                    Some(parse(&key, value)?)
                }
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse::<usize>(&key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "bn" => self.batch_norm = parse_bool(&key, value)?,
            "loss" => {
                self.loss = match value {
                    "auto" => LossChoice::Auto,
                    "ce" | "cross_entropy" => LossChoice::CrossEntropy,
                    "mse" => LossChoice::Mse,
                    _ => return Err(Error::Config(format!("unknown loss `{value}`"))),
                }
            }
            "optimizer" => self.optimizer = parse_optimizer(&key, value)?,
            "la_inner" => self.la_inner = parse_optimizer(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "momentum" => self.momentum = parse(&key, value)?,
            "beta1" => self.beta1 = parse(&key, value)?,
            "beta2" => self.beta2 = parse(&key, value)?,
            "adam_eps" => self.adam_eps = parse(&key, value)?,
            "la_alpha" => self.la_alpha = parse(&key, value)?,
            "la_k" => self.la_k = parse(&key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "cosine" => ScheduleKind::Cosine,
                    "poly" | "poly_warmup" => ScheduleKind::Poly,
                    _ => return Err(Error::Config(format!("unknown schedule `{value}`"))),
                }
            }
            "warmup_steps" => self.warmup_steps = parse(&key, value)?,
            "end_lr" => self.end_lr = parse(&key, value)?,
            "power" => self.power = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "scheme" => {
                self.scheme = match value {
                    "none" => SchemeKind::None,
                    "uniform" | "lawa" => SchemeKind::Uniform,
                    "ema" => SchemeKind::Ema,
                    "polyak" => SchemeKind::Polyak,
                    _ => return Err(Error::Config(format!("unknown scheme `{value}`"))),
                }
            }
            "k" => self.k = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "bn_mode" => {
                self.bn_mode = match value {
                    "auto" => BnChoice::Auto,
                    "recompute" => BnChoice::Recompute,
                    "copy" => BnChoice::Copy,
                    "off" => BnChoice::Off,
                    _ => return Err(Error::Config(format!("unknown bn mode `{value}`"))),
                }
            }
            "save_every_steps" => {
                self.save_every_steps = match value {
                    "" | "epoch" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "out" => self.out = PathBuf::from(value),
            "save_averaged" => self.save_averaged = parse_bool(&key, value)?,
            "wall_clock" => self.wall_clock = parse_bool(&key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Every effective setting as `(key, value)`, in [`KEYS`] order, skipping
    /// keys that do not apply to the chosen dataset.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for &key in KEYS {
            let value = match key {
                "dataset" => match &self.dataset {
                    DataSource::Spirals { .. } => "spirals".to_owned(),
                    DataSource::Csv { path, .. } => path.display().to_string(),
                },
                "n_per_class" | "classes" | "noise" => match &self.dataset {
                    DataSource::Spirals {
                        n_per_class,
                        classes,
                        noise,
                    } => match key {
                        "n_per_class" => n_per_class.to_string(),
                        "classes" => classes.to_string(),
                        _ => noise.to_string(),
                    },
                    DataSource::Csv { .. } => continue,
                },
                "label_column" => match &self.dataset {
                    DataSource::Csv { label, .. } => label.clone(),
                    DataSource::Spirals { .. } => continue,
                },
                "data_seed" => self.data_seed.map(|s| s.to_string()).unwrap_or_default(),
                "hidden" => self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                "bn" => self.batch_norm.to_string(),
                "loss" => match self.loss {
                    LossChoice::Auto => "auto",
                    LossChoice::CrossEntropy => "ce",
                    LossChoice::Mse => "mse",
                }
                .to_owned(),
                "optimizer" => optimizer_name(self.optimizer).to_owned(),
                "la_inner" => optimizer_name(self.la_inner).to_owned(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "adam_eps" => self.adam_eps.to_string(),
                "la_alpha" => self.la_alpha.to_string(),
                "la_k" => self.la_k.to_string(),
                "schedule" => match self.schedule {
                    ScheduleKind::Constant => "constant",
                    ScheduleKind::Cosine => "cosine",
                    ScheduleKind::Poly => "poly",
                }
                .to_owned(),
                "warmup_steps" => self.warmup_steps.to_string(),
                "end_lr" => self.end_lr.to_string(),
                "power" => self.power.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "scheme" => match self.scheme {
                    SchemeKind::None => "none",
                    SchemeKind::Uniform => "uniform",
                    SchemeKind::Ema => "ema",
                    SchemeKind::Polyak => "polyak",
                }
                .to_owned(),
                "k" => self.k.to_string(),
                "alpha" => self.alpha.to_string(),
                "bn_mode" => match self.bn_mode {
                    BnChoice::Auto => "auto",
                    BnChoice::Recompute => "recompute",
                    BnChoice::Copy => "copy",
                    BnChoice::Off => "off",
                }
                .to_owned(),
                "save_every_steps" => self
                    .save_every_steps
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "epoch".into()),
                "out" => self.out.display().to_string(),
                "save_averaged" => self.save_averaged.to_string(),
                "wall_clock" => self.wall_clock.to_string(),
                "eval_batch_size" => self.eval_batch_size.to_string(),
                _ => unreachable!("every key is handled"),
            };
            out.push((key, value));
        }
        out
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies a flat `key=value` file on top of `self`. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        // dataset first: it decides which of the dataset-specific keys apply
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        pairs.sort_by_key(|(k, _)| k != "dataset");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn scheme(&self) -> Scheme {
        match self.scheme {
            SchemeKind::None => Scheme::None,
            SchemeKind::Uniform => Scheme::Uniform { k: self.k },
            SchemeKind::Ema => Scheme::Ema { alpha: self.alpha },
            SchemeKind::Polyak => Scheme::Polyak,
        }
    }

    fn base_optimizer(&self, kind: OptimizerKind) -> OptimizerConfig {
        match kind {
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                momentum: self.momentum,
            },
            OptimizerKind::Adam => OptimizerConfig::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            OptimizerKind::Lookahead => {
                OptimizerConfig::lookahead(self.base_optimizer(self.la_inner), self.la_alpha, self.la_k)
            }
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        self.base_optimizer(self.optimizer)
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant { lr: self.lr },
            ScheduleKind::Cosine => LrSchedule::Cosine {
                base: self.lr,
                total: total_steps,
            },
            ScheduleKind::Poly => LrSchedule::PolyWarmup {
                peak: self.lr,
                total: total_steps,
                warmup: self.warmup_steps,
                end: self.end_lr,
                power: self.power,
            },
        }
    }

    pub fn bn_mode(&self, has_bn: bool) -> BnMode {
        match self.bn_mode {
            BnChoice::Auto if has_bn => BnMode::Recompute,
            BnChoice::Auto | BnChoice::Off => BnMode::Off,
            BnChoice::Recompute => BnMode::Recompute,
            BnChoice::Copy => BnMode::Copy,
        }
    }

    pub fn effective_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DataSource::Spirals {
                n_per_class,
                classes,
                noise,
            } => data::make_spirals(self.effective_data_seed(), *n_per_class, *classes, *noise),
            DataSource::Csv { path, label } => data::load_csv(path, label),
        }
    }

    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        let loss = match (self.loss, dataset.num_classes()) {
            (LossChoice::Auto, Some(_)) | (LossChoice::CrossEntropy, _) => Loss::CrossEntropy,
            (LossChoice::Auto, None) | (LossChoice::Mse, _) => Loss::Mse,
        };
        let out = match (loss, dataset.num_classes()) {
            (Loss::CrossEntropy, Some(c)) => c,
            (Loss::Mse, None) => 1,
            _ => return Err(Error::Config("loss does not match the dataset's label type".into())),
        };
        let mut widths = vec![dataset.dim()];
        widths.extend(&self.hidden);
        widths.push(out);
        ModelSpec::mlp(widths, self.batch_norm, loss, self.seed)
    }

    /// Checks everything that can be checked without data; returns
    /// warnings for settings that are legal but inadvisable.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("need at least one hidden layer of positive width".into()));
        }
        if self.save_every_steps == Some(0) {
            return Err(Error::Config("save_every_steps must be at least 1".into()));
        }
        if let DataSource::Spirals {
            n_per_class,
            classes,
            noise,
        } = self.dataset
        {
            if n_per_class == 0 || classes < 2 || noise < 0.0 || noise.is_nan() {
                return Err(Error::Config("invalid spiral parameters".into()));
            }
        }
        self.optimizer_config().validate()?;
        self.schedule(1.max(self.warmup_steps)).validate()?;
        self.scheme().validate()
    }
}
