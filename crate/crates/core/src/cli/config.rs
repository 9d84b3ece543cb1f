//! Run configuration: `key = value` files merged with command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! preset = toy
//! inner = 8
//! kernel = 5
//! lr = 0.01
//! crop = 48x48
//! ```
//!
//! Later entries win, so callers pass file entries first and flag entries
//! after them. `preset` is applied before every other key regardless of
//! where it appears.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::{Activation, GateMode, GateWiring, ModelConfig, TrainConfig};
use crate::plg::{PlgConfig, ThermalInput};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale widths; see [`ModelConfig::toy`].
    #[default]
    Toy,
    /// Full widths; see [`ModelConfig::default`].
    Paper,
}

/// Everything a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plg: PlgConfig,
    /// Number of scenes when the dataset is synthetic.
    pub scenes: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Passes over the training set; replaces `steps` once the dataset size is known.
    pub epochs: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_preset(Preset::Toy)
    }
}

fn err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(key, format!("cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn four(key: &str, v: &str) -> Result<[usize; 4]> {
    list(key, v)?
        .try_into()
        .map_err(|_| err(key, format!("expected four comma-separated values, got {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got {v:?}"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        err(key, format!("expected one of {}, got {v:?}", names.join(", ")))
    })
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Splits a config file into (key, value) pairs.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(&format!("line {}", i + 1), format!("expected key = value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Paper => ModelConfig::default(),
        };
        let plg = PlgConfig {
            num_classes: model.num_classes,
            ..PlgConfig::default()
        };
        RunConfig {
            preset,
            model,
            train: TrainConfig::default(),
            plg,
            scenes: 8,
            checkpoint_every: 0,
            epochs: None,
            seed: 0,
        }
    }

    /// Applies `entries` in order on top of the preset they name (toy if none).
    pub fn resolve(entries: &[(String, String)]) -> Result<Self> {
        let mut preset = Preset::default();
        for (k, v) in entries.iter().filter(|(k, _)| k == "preset") {
            preset = choice(k, v, &[("toy", Preset::Toy), ("paper", Preset::Paper)])?;
        }
        let mut cfg = RunConfig::from_preset(preset);
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.plg.num_classes = cfg.model.num_classes;
        cfg.model.validate()?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Training steps for a dataset of `samples` pairs.
    pub fn steps_for(&self, samples: usize) -> usize {
        match self.epochs {
            Some(e) => e * samples.div_ceil(self.train.batch_size),
            None => self.train.steps,
        }
    }

    fn check(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(err("steps", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(err("batch_size", "must be positive"));
        }
        for (key, v) in [("lr", t.lr), ("momentum", t.momentum), ("weight_decay", t.weight_decay), ("lambda", t.lambda), ("power", t.power)] {
            if !v.is_finite() || v < 0.0 {
                return Err(err(key, format!("must be a non-negative number, got {v}")));
            }
        }
        if let Some(p) = &t.augment {
            if !(0.0..=1.0).contains(&p.flip_prob) {
                return Err(err("flip_prob", "must lie in [0, 1]"));
            }
            if p.crop.is_some_and(|(h, w)| h == 0 || w == 0) {
                return Err(err("crop", "extents must be positive"));
            }
        }
        if self.plg.scales.is_empty() || self.plg.scales.contains(&0) {
            return Err(err("scales", "need at least one positive radius"));
        }
        if self.scenes == 0 {
            return Err(err("scenes", "must be positive"));
        }
        Ok(())
    }

    fn policy(&mut self) -> &mut AugmentPolicy {
        self.train.augment.get_or_insert_with(AugmentPolicy::default)
    }

    /// Sets one key; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "rgb_widths" => m.rgb.widths = four(key, v)?,
            "rgb_blocks" => m.rgb.blocks = four(key, v)?,
            "thm_widths" => m.thm.widths = four(key, v)?,
            "thm_blocks" => m.thm.blocks = four(key, v)?,
            "reduced" => m.reduced = four(key, v)?,
            "inner" => m.inner = num(key, v)?,
            "kernel" => m.kernel = num(key, v)?,
            "recal_kernel" => m.recal_kernel = num(key, v)?,
            "decoder_width" => m.decoder_width = num(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "gates" => m.gates = choice(key, v, &[("learned", GateMode::Learned), ("frozen", GateMode::Frozen)])?,
            "wiring" => {
                m.wiring = choice(key, v, &[("counterpart", GateWiring::Counterpart), ("own", GateWiring::Own)])?
            }
            "activation" => {
                m.activation = choice(key, v, &[("sigmoid", Activation::Sigmoid), ("softmax", Activation::Softmax)])?
            }
            "fp64" => m.dtype = if boolean(key, v)? { DType::F64 } else { DType::F32 },
            "steps" => self.train.steps = num(key, v)?,
            "epochs" => {
                let e: usize = num(key, v)?;
                if e == 0 {
                    return Err(err(key, "must be positive"));
                }
                self.epochs = Some(e);
            }
            "batch_size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "lambda" => self.train.lambda = num(key, v)?,
            "power" => self.train.power = num(key, v)?,
            "augment" => {
                if boolean(key, v)? {
                    self.policy();
                } else {
                    self.train.augment = None;
                }
            }
            "flip_prob" => self.policy().flip_prob = num(key, v)?,
            "max_rotation_deg" => self.policy().max_rotation_deg = num(key, v)?,
            "crop" => {
                let crop = if v == "none" {
                    None
                } else {
                    let (h, w) = v.split_once('x').ok_or_else(|| err(key, format!("expected HxW or none, got {v:?}")))?;
                    Some((num(key, h)?, num(key, w)?))
                };
                self.policy().crop = crop;
            }
            "scales" => self.plg.scales = list(key, v)?,
            "thermal" => {
                self.plg.thermal = choice(key, v, &[("raw", ThermalInput::Raw), ("stretched", ThermalInput::Stretched)])?
            }
            "scenes" => self.scenes = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "preset" => return Err(err(key, "only valid through resolve")),
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Canonical `key = value` form; [`RunConfig::resolve`] reads it back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", match self.preset {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
        .into());
        put("rgb_widths", join_list(&m.rgb.widths));
        put("rgb_blocks", join_list(&m.rgb.blocks));
        put("thm_widths", join_list(&m.thm.widths));
        put("thm_blocks", join_list(&m.thm.blocks));
        put("reduced", join_list(&m.reduced));
        put("inner", m.inner.to_string());
        put("kernel", m.kernel.to_string());
        put("recal_kernel", m.recal_kernel.to_string());
        put("decoder_width", m.decoder_width.to_string());
        put("num_classes", m.num_classes.to_string());
        put("gates", match m.gates {
            GateMode::Learned => "learned",
            GateMode::Frozen => "frozen",
        }
        .into());
        put("wiring", match m.wiring {
            GateWiring::Counterpart => "counterpart",
            GateWiring::Own => "own",
        }
        .into());
        put("activation", match m.activation {
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
        .into());
        put("fp64", (m.dtype == DType::F64).to_string());
        put("steps", t.steps.to_string());
        if let Some(e) = self.epochs {
            put("epochs", e.to_string());
        }
        put("batch_size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("lambda", t.lambda.to_string());
        put("power", t.power.to_string());
        put("augment", t.augment.is_some().to_string());
        if let Some(p) = &t.augment {
            put("flip_prob", p.flip_prob.to_string());
            put("max_rotation_deg", p.max_rotation_deg.to_string());
            put("crop", p.crop.map_or_else(|| "none".to_string(), |(h, w)| format!("{h}x{w}")));
        }
        put("scales", join_list(&self.plg.scales));
        put("thermal", match self.plg.thermal {
            ThermalInput::Raw => "raw",
            ThermalInput::Stretched => "stretched",
        }
        .into());
        put("scenes", self.scenes.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        s
    }
}
