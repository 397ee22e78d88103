//! Line-oriented `key = value` configuration.
//!
//! Blank lines and `#` comments are skipped; keys may appear once. Every
//! setting has a default, and unknown keys are rejected so typos surface
//! as config errors rather than silently ignored settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use card_core::car::{CarConfig, MseReduction};
use card_core::model::{ModelConfig, TrainConfig, Upsampler};

use crate::dataset::{BiasSpec, Pair, ShapeKind};
use crate::error::{read_file, Error, Result};

/// Parsed key/value pairs with the line each key came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected on/off, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

/// `0-2, 1-3` style pair lists.
fn parse_pairs(key: &str, v: &str) -> Result<Vec<Pair>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::config(format!("`{key}`: expected `bg-fg`, got `{p}`")))?;
            Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_pairs(xs: &[Pair]) -> String {
    xs.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(",")
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: BiasSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub car: CarConfig,
    pub car_on: bool,
    /// Test image used by the pixel relation map.
    pub map_image: usize,
    pub map_pixel: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: BiasSpec::default(),
            model: ModelConfig::toy(4),
            train: TrainConfig {
                max_iter: 600,
                batch_size: 8,
                base_lr: 0.01,
                ..TrainConfig::default()
            },
            car: CarConfig::default(),
            car_on: true,
            map_image: 0,
            map_pixel: (32, 32),
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = RunConfig::default();
        for key in kv.keys() {
            let v = kv.get(key).unwrap_or_default();
            match key {
                "seed" => c.seed = parse_value(key, v)?,
                "car" => c.car_on = parse_bool(key, v)?,
                "upsampler" => c.model.upsampler = Upsampler::from_str(v).map_err(|e| Error::config(e.to_string()))?,
                "n_class" => c.data.n_class = parse_value(key, v)?,
                "backgrounds" => c.data.backgrounds = parse_list(key, v)?,
                "train_pairs" => c.data.train_pairs = parse_pairs(key, v)?,
                "held_out_pairs" => c.data.held_out_pairs = parse_pairs(key, v)?,
                "shapes" => c.data.shapes = parse_list::<ShapeKind>(key, v)?,
                "noise_std" => c.data.noise_std = parse_value(key, v)?,
                "stripe_amplitude" => c.data.stripe_amplitude = parse_value(key, v)?,
                "stripe_period" => c.data.stripe_period = parse_value(key, v)?,
                "image_size" => c.data.image_size = parse_value(key, v)?,
                "fg_fraction" => c.data.fg_fraction = parse_value(key, v)?,
                "ignore_border" => c.data.ignore_border = parse_bool(key, v)?,
                "n_train" => c.data.n_train = parse_value(key, v)?,
                "n_test" => c.data.n_test = parse_value(key, v)?,
                "stage_channels" => {
                    let s: Vec<usize> = parse_list(key, v)?;
                    c.model.stage_channels = s
                        .try_into()
                        .map_err(|_| Error::config("`stage_channels`: expected four values"))?;
                }
                "decoder_width" => c.model.decoder_width = parse_value(key, v)?,
                "out_channels" => c.model.out_channels = parse_value(key, v)?,
                "heads" => c.model.heads = parse_value(key, v)?,
                "iters" => c.train.max_iter = parse_value(key, v)?,
                "batch_size" => c.train.batch_size = parse_value(key, v)?,
                "lr" => c.train.base_lr = parse_value(key, v)?,
                "momentum" => c.train.momentum = parse_value(key, v)?,
                "weight_decay" => c.train.weight_decay = parse_value(key, v)?,
                "poly_power" => c.train.poly_power = parse_value(key, v)?,
                "ce_full_res" => c.train.ce_full_res = parse_bool(key, v)?,
                "eps0" => c.car.eps0 = parse_value(key, v)?,
                "eps1" => c.car.eps1 = parse_value(key, v)?,
                "w_intra" => c.car.w_intra = parse_value(key, v)?,
                "w_c2c" => c.car.w_c2c = parse_value(key, v)?,
                "w_c2p" => c.car.w_c2p = parse_value(key, v)?,
                "grad_through_centers" => c.car.grad_through_centers = parse_bool(key, v)?,
                "reduction" => {
                    c.car.reduction = match v {
                        "present" => MseReduction::Present,
                        "all" => MseReduction::All,
                        _ => return Err(Error::config(format!("`reduction`: expected present/all, got `{v}`"))),
                    }
                }
                "map_image" => c.map_image = parse_value(key, v)?,
                "map_row" => c.map_pixel.0 = parse_value(key, v)?,
                "map_col" => c.map_pixel.1 = parse_value(key, v)?,
                other => return Err(Error::config(format!("unknown key `{other}`"))),
            }
        }
        c.model.n_class = c.data.n_class;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let wrap = |e: card_core::Error| Error::config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.car.validate().map_err(wrap)?;
        if self.data.image_size % 32 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a multiple of 32",
                self.data.image_size
            )));
        }
        Ok(())
    }

    /// The loss configuration actually used for training.
    pub fn effective_car(&self) -> CarConfig {
        if self.car_on {
            self.car.clone()
        } else {
            CarConfig::disabled()
        }
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn to_kv(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let car = &self.car;
        let onoff = |b: bool| if b { "on" } else { "off" };
        let shapes: Vec<&str> = d.shapes.iter().map(|s| s.as_str()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("car", onoff(self.car_on).into());
        kv("upsampler", m.upsampler.as_str().into());
        kv("n_class", d.n_class.to_string());
        kv("backgrounds", join(&d.backgrounds));
        kv("train_pairs", join_pairs(&d.train_pairs));
        kv("held_out_pairs", join_pairs(&d.held_out_pairs));
        kv("shapes", shapes.join(","));
        kv("noise_std", d.noise_std.to_string());
        kv("stripe_amplitude", d.stripe_amplitude.to_string());
        kv("stripe_period", d.stripe_period.to_string());
        kv("image_size", d.image_size.to_string());
        kv("fg_fraction", d.fg_fraction.to_string());
        kv("ignore_border", onoff(d.ignore_border).into());
        kv("n_train", d.n_train.to_string());
        kv("n_test", d.n_test.to_string());
        kv("stage_channels", join(&m.stage_channels));
        kv("decoder_width", m.decoder_width.to_string());
        kv("out_channels", m.out_channels.to_string());
        kv("heads", m.heads.to_string());
        kv("iters", t.max_iter.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.base_lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("poly_power", t.poly_power.to_string());
        kv("ce_full_res", onoff(t.ce_full_res).into());
        kv("eps0", car.eps0.to_string());
        kv("eps1", car.eps1.to_string());
        kv("w_intra", car.w_intra.to_string());
        kv("w_c2c", car.w_c2c.to_string());
        kv("w_c2p", car.w_c2p.to_string());
        kv("grad_through_centers", onoff(car.grad_through_centers).into());
        kv(
            "reduction",
            match car.reduction {
                MseReduction::Present => "present",
                MseReduction::All => "all",
            }
            .into(),
        );
        kv("map_image", self.map_image.to_string());
        kv("map_row", self.map_pixel.0.to_string());
        kv("map_col", self.map_pixel.1.to_string());
        s
    }
}
