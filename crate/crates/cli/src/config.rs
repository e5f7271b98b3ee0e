//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unset
//! keys keep the library defaults. `network` picks a preset (default
//! `reference`) that individual width keys then override, regardless of
//! line order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csdn::data::AugmentConfig;
use csdn::loss::LossConfig;
use csdn::train::TrainConfig;
use csdn::{Error, NetworkConfig, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Dataset root; the `--data` flag wins over this.
    pub data_dir: Option<PathBuf>,
    /// Output directory; the `--out` flag wins over this.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "reference".into(),
            network: NetworkConfig::reference(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn scalar<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(line, format!("`{}` is not a valid value for {}", v, key)))
}

fn triple(line: usize, key: &str, v: &str) -> Result<[usize; 3]> {
    let parts = list::<usize>(line, key, v)?;
    parts.try_into().map_err(|_| err(line, format!("{} needs exactly three comma-separated values", key)))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| scalar(line, key, p.trim())).collect()
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("{} must be true or false, got `{}`", key, v))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{}`", content)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err(line, "missing key before `=`"));
            }
            if value.is_empty() || value.contains('=') {
                return Err(err(line, format!("malformed value for {}: `{}`", key, value)));
            }
            if let Some((prev, ..)) = entries.iter().find(|(_, k, _)| k == key) {
                return Err(err(line, format!("{} already set on line {}", key, prev)));
            }
            entries.push((line, key.to_string(), value.to_string()));
        }

        let mut cfg = RunConfig::default();
        if let Some((line, _, v)) = entries.iter().find(|(_, k, _)| k == "network") {
            cfg.network = NetworkConfig::preset(v).ok_or_else(|| err(*line, format!("unknown network preset `{}` (reference, small, tiny)", v)))?;
            cfg.preset = v.clone();
        }
        let mut augment_on = true;
        for (line, key, v) in &entries {
            let (line, v) = (*line, v.as_str());
            let n = &mut cfg.network;
            let t = &mut cfg.train;
            let a = &mut t.augment;
            let l = &mut cfg.loss;
            match key.as_str() {
                "network" => {}
                "downsample_r" => n.downsample_r = scalar(line, key, v)?,
                "shallow_channels" => n.shallow_channels = triple(line, key, v)?,
                "stem_channels" => n.stem_channels = scalar(line, key, v)?,
                "ge_stage_channels" => n.ge_stage_channels = triple(line, key, v)?,
                "ge_expansion" => n.ge_expansion = scalar(line, key, v)?,
                "ge_layers" => n.ge_layers = triple(line, key, v)?,
                "fusion_channels" => n.fusion_channels = scalar(line, key, v)?,
                "head_channels" => n.head_channels = scalar(line, key, v)?,
                "aux_channels" => n.aux_channels = scalar(line, key, v)?,
                "epochs" => t.epochs = scalar(line, key, v)?,
                "batch_size" => t.batch_size = scalar(line, key, v)?,
                "lr" => t.lr = scalar(line, key, v)?,
                "lr_step" => t.lr_step = scalar(line, key, v)?,
                "lr_factor" => t.lr_factor = scalar(line, key, v)?,
                "seed" => t.seed = scalar(line, key, v)?,
                "val_every" => t.val_every = scalar(line, key, v)?,
                "checkpoint_every" => t.checkpoint_every = scalar(line, key, v)?,
                "adam_beta1" => t.adam.beta1 = scalar(line, key, v)?,
                "adam_beta2" => t.adam.beta2 = scalar(line, key, v)?,
                "adam_eps" => t.adam.eps = scalar(line, key, v)?,
                "weight_decay" => t.adam.weight_decay = scalar(line, key, v)?,
                "decoupled_weight_decay" => t.adam.decoupled = boolean(line, key, v)?,
                "augment" => augment_on = boolean(line, key, v)?,
                "augment_translate" => a.translate = scalar(line, key, v)?,
                "augment_rotate_deg" => a.rotate_deg = scalar(line, key, v)?,
                "augment_scale_min" => a.scale_min = scalar(line, key, v)?,
                "augment_scale_max" => a.scale_max = scalar(line, key, v)?,
                "augment_shear_deg" => a.shear_deg = scalar(line, key, v)?,
                "augment_flip_lr" => a.flip_lr = scalar(line, key, v)?,
                "augment_flip_ud" => a.flip_ud = scalar(line, key, v)?,
                "augment_swap_frames" => a.swap_frames = scalar(line, key, v)?,
                "focal_gamma" => l.focal_gamma = scalar(line, key, v)?,
                "focal_alpha" => l.focal_alpha = if v == "none" { None } else { Some(list(line, key, v)?) },
                "dice_eps" => l.dice_eps = scalar(line, key, v)?,
                "aux_weight" => l.aux_weight = scalar(line, key, v)?,
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = Some(PathBuf::from(v)),
                other => return Err(err(line, format!("unknown key `{}`", other))),
            }
        }
        if !augment_on {
            cfg.train.augment = AugmentConfig::identity();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Every effective setting, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let a = &t.augment;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{} = {}", k, v);
        };
        kv("network", self.preset.clone());
        kv("downsample_r", n.downsample_r.to_string());
        kv("shallow_channels", join(&n.shallow_channels));
        kv("stem_channels", n.stem_channels.to_string());
        kv("ge_stage_channels", join(&n.ge_stage_channels));
        kv("ge_expansion", n.ge_expansion.to_string());
        kv("ge_layers", join(&n.ge_layers));
        kv("fusion_channels", n.fusion_channels.to_string());
        kv("head_channels", n.head_channels.to_string());
        kv("aux_channels", n.aux_channels.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_step", t.lr_step.to_string());
        kv("lr_factor", t.lr_factor.to_string());
        kv("seed", t.seed.to_string());
        kv("val_every", t.val_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("weight_decay", t.adam.weight_decay.to_string());
        kv("decoupled_weight_decay", t.adam.decoupled.to_string());
        kv("augment_translate", a.translate.to_string());
        kv("augment_rotate_deg", a.rotate_deg.to_string());
        kv("augment_scale_min", a.scale_min.to_string());
        kv("augment_scale_max", a.scale_max.to_string());
        kv("augment_shear_deg", a.shear_deg.to_string());
        kv("augment_flip_lr", a.flip_lr.to_string());
        kv("augment_flip_ud", a.flip_ud.to_string());
        kv("augment_swap_frames", a.swap_frames.to_string());
        kv("focal_gamma", l.focal_gamma.to_string());
        kv("focal_alpha", l.focal_alpha.as_deref().map_or_else(|| "none".to_string(), join));
        kv("dice_eps", l.dice_eps.to_string());
        kv("aux_weight", l.aux_weight.to_string());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        s
    }
}
