//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional, unknown or
//! repeated keys are errors, and [`RunConfig::to_text`] writes every key in a fixed order so
//! that parsing the echo gives back the same configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{self, Dataset, Normalization, SyntheticParams, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{Architecture, PRESETS};
use crate::trainer::TrainConfig;

/// Environment variable consulted when neither a flag nor the config sets the seed.
pub const SEED_ENV: &str = "SPIKE_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic(SyntheticTask),
    /// An `IMGS` raster file.
    Raster(PathBuf),
    /// A manifest of `LABEL PATH` lines naming event text files.
    Events(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic(t) => write!(f, "synthetic:{t}"),
            Self::Raster(p) => write!(f, "raster:{}", p.display()),
            Self::Events(p) => write!(f, "events:{}", p.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("dataset must be synthetic:TASK, raster:PATH or events:PATH, got {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        match kind {
            "synthetic" => Ok(Self::Synthetic(rest.parse()?)),
            "raster" => Ok(Self::Raster(rest.into())),
            "events" => Ok(Self::Events(rest.into())),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `None` defers to the environment, then [`DEFAULT_SEED`].
    pub seed: Option<u64>,
    /// Seeds synthetic corpora independently of the run seed, so runs differing only in
    /// `seed` see the same data.
    pub data_seed: u64,
    pub out: PathBuf,
    /// A preset name or a layer string such as `8C3-2AP-64FC`.
    pub arch: String,
    /// Threshold-dependent normalization after every synapse.
    pub tdbn: bool,
    pub dataset: DataSource,
    /// Synthetic sample count.
    pub samples: usize,
    pub synthetic: SyntheticParams,
    /// Held-out fraction for evaluation.
    pub val_fraction: f64,
    pub input_norm: Normalization,
    pub event_frames: usize,
    pub event_height: usize,
    pub event_width: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data_seed: 0,
            out: PathBuf::from("runs/default"),
            arch: "mlp-64".into(),
            tdbn: true,
            dataset: DataSource::Synthetic(SyntheticTask::GaussianBlobs),
            samples: 512,
            synthetic: SyntheticParams::default(),
            val_fraction: 0.2,
            input_norm: Normalization::PerChannel,
            event_frames: 4,
            event_height: 32,
            event_width: 32,
            checkpoint_every: 0,
            train: TrainConfig::default(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("not a valid number: {v:?}")))
}

fn norm_name(n: Normalization) -> &'static str {
    match n {
        Normalization::None => "none",
        Normalization::PerChannel => "per-channel",
    }
}

pub const KEYS: [&str; 33] = [
    "seed",
    "data_seed",
    "out",
    "arch",
    "tdbn",
    "dataset",
    "samples",
    "dim",
    "classes",
    "separation",
    "sigma",
    "ring_noise",
    "val_fraction",
    "input_norm",
    "event_frames",
    "event_height",
    "event_width",
    "checkpoint_every",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "v_th",
    "tau_init",
    "timesteps",
    "adaptive_sg",
    "trainable_decay",
    "sg_family",
    "kappa",
    "width_convention",
    "detach_reset",
    "augment",
];

impl RunConfig {
    /// Sets one key; used by the file parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = Some(parse_num(value)?),
            "data_seed" => self.data_seed = parse_num(value)?,
            "out" => self.out = PathBuf::from(value),
            "arch" => self.arch = value.to_string(),
            "tdbn" => self.tdbn = parse_bool(value)?,
            "dataset" => self.dataset = value.parse()?,
            "samples" => self.samples = parse_num(value)?,
            "dim" => self.synthetic.dim = parse_num(value)?,
            "classes" => self.synthetic.classes = parse_num(value)?,
            "separation" => self.synthetic.separation = parse_num(value)?,
            "sigma" => self.synthetic.sigma = parse_num(value)?,
            "ring_noise" => self.synthetic.ring_noise = parse_num(value)?,
            "val_fraction" => self.val_fraction = parse_num(value)?,
            "input_norm" => {
                self.input_norm = match value {
                    "none" => Normalization::None,
                    "per-channel" => Normalization::PerChannel,
                    _ => return Err(Error::InvalidArgument(format!("input_norm must be none or per-channel, got {value:?}"))),
                }
            }
            "event_frames" => self.event_frames = parse_num(value)?,
            "event_height" => self.event_height = parse_num(value)?,
            "event_width" => self.event_width = parse_num(value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(value)?,
            "epochs" => t.epochs = parse_num(value)?,
            "batch_size" => t.batch_size = parse_num(value)?,
            "lr" => t.lr = parse_num(value)?,
            "momentum" => t.momentum = parse_num(value)?,
            "weight_decay" => t.weight_decay = parse_num(value)?,
            "v_th" => t.v_th = parse_num(value)?,
            "tau_init" => t.tau_init = parse_num(value)?,
            "timesteps" => t.timesteps = parse_num(value)?,
            "adaptive_sg" => t.adaptive_sg = parse_bool(value)?,
            "trainable_decay" => t.trainable_decay = parse_bool(value)?,
            "sg_family" => t.sg_family = value.parse()?,
            "kappa" => t.fixed_kappa = parse_num(value)?,
            "width_convention" => t.width_convention = value.parse()?,
            "detach_reset" => t.detach_reset = parse_bool(value)?,
            "augment" => t.augment = parse_bool(value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got {trimmed:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config { line, msg: format!("duplicate key {key:?}") });
            }
            // defaults are valid, so a failure after this key is attributable to its line
            cfg.set(key, value).and_then(|()| cfg.validate()).map_err(|e| Error::Config { line, msg: e.to_string() })?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        if self.samples == 0 || self.event_frames == 0 || self.event_height == 0 || self.event_width == 0 {
            return Err(Error::InvalidArgument("samples and event dimensions must be positive".into()));
        }
        if self.arch.trim().is_empty() {
            return Err(Error::InvalidArgument("arch must not be empty".into()));
        }
        if !PRESETS.contains(&self.arch.as_str()) {
            Architecture::parse_layers(&self.arch)?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synthetic;
        Some(match key {
            "seed" => return self.seed.map(|v| v.to_string()),
            "data_seed" => self.data_seed.to_string(),
            "out" => self.out.display().to_string(),
            "arch" => self.arch.clone(),
            "tdbn" => self.tdbn.to_string(),
            "dataset" => self.dataset.to_string(),
            "samples" => self.samples.to_string(),
            "dim" => s.dim.to_string(),
            "classes" => s.classes.to_string(),
            "separation" => s.separation.to_string(),
            "sigma" => s.sigma.to_string(),
            "ring_noise" => s.ring_noise.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "input_norm" => norm_name(self.input_norm).to_string(),
            "event_frames" => self.event_frames.to_string(),
            "event_height" => self.event_height.to_string(),
            "event_width" => self.event_width.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "v_th" => t.v_th.to_string(),
            "tau_init" => t.tau_init.to_string(),
            "timesteps" => t.timesteps.to_string(),
            "adaptive_sg" => t.adaptive_sg.to_string(),
            "trainable_decay" => t.trainable_decay.to_string(),
            "sg_family" => t.sg_family.to_string(),
            "kappa" => t.fixed_kappa.to_string(),
            "width_convention" => t.width_convention.to_string(),
            "detach_reset" => t.detach_reset.to_string(),
            "augment" => t.augment.to_string(),
            _ => return None,
        })
    }

    /// Every key in a fixed order; `seed` is omitted while unresolved.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.value_of(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// Flag, then config, then the environment value, then [`DEFAULT_SEED`].
    pub fn resolve_seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match env {
            Some(v) => v.trim().parse().map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            None => Ok(DEFAULT_SEED),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DataSource::Synthetic(task) => data::gen_synthetic(*task, self.samples, self.data_seed, &self.synthetic),
            DataSource::Raster(p) => data::load_raster(p, self.input_norm),
            DataSource::Events(manifest) => {
                let text = std::fs::read_to_string(manifest)?;
                let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
                let mut streams = Vec::new();
                for (i, raw) in text.lines().enumerate() {
                    let line = raw.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let bad = || Error::Config { line: i + 1, msg: format!("expected LABEL PATH, got {line:?}") };
                    let (label, path) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
                    let label: usize = label.parse().map_err(|_| bad())?;
                    streams.push((data::load_events(base.join(path.trim()))?, label));
                }
                let classes = streams.iter().map(|s| s.1 + 1).max().unwrap_or(0).max(2);
                data::events_to_dataset(&streams, self.event_frames, (self.event_height, self.event_width), classes)
            }
        }
    }

    pub fn architecture(&self, input: [usize; 3], classes: usize) -> Result<Architecture> {
        let mut arch = if PRESETS.contains(&self.arch.as_str()) {
            Architecture::preset(&self.arch, input, classes, self.train.timesteps)?
        } else {
            Architecture {
                input,
                layers: Architecture::parse_layers(&self.arch)?,
                timesteps: self.train.timesteps,
                classes,
                normalize: true,
            }
        };
        arch.normalize = self.tdbn;
        arch.validate()?;
        Ok(arch)
    }
}
