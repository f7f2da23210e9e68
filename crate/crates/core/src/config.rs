//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`RunConfig::default`]); unknown or repeated keys are errors.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 0 |
//! | `image_size` | 64 |
//! | `backbone.stage_channels` | 16,32,64,128 |
//! | `backbone.blocks_per_stage` | 1,1,1,1 |
//! | `backbone.norm_groups` | 8 |
//! | `pretext.tau_s` / `pretext.tau_t` | 0.1 / 0.04 |
//! | `pretext.k` / `pretext.hidden` | 256 / 512 |
//! | `pretext.head_init_std` | 0.03 |
//! | `pretext.steps` / `pretext.batch_size` / `pretext.lr` | 200 / 8 / 0.001 |
//! | `pretext.lambda_base` / `pretext.center_momentum` | 0.996 / 0.9 |
//! | `pretext.augmentations` | color_jitter,random_crop,gaussian_noise,hflip |
//! | `pretext.aug.jitter` / `pretext.aug.crop_scale` | 0.2 / 0.5..1 |
//! | `pretext.aug.noise_sigma` / `pretext.aug.hflip_prob` | 0.05 / 0.5 |
//! | `model.n_queries` / `model.c_e` / `model.c_d` | 16 / 32 / 64 |
//! | `model.heads` / `model.encoder_layers` / `model.norm_groups` | 4 / 3 / 8 |
//! | `train.steps` / `train.lr` / `train.batch_size` | see [`TrainConfig`] |
//! | `train.deep_supervision` / `train.val_every` / `train.fuse` | false / 100 / normalized |
//! | `infer.threshold` | 0.5 |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;
use crate::objective::FuseMode;
use crate::pretext::{AugmentationSpec, PretextConfig};
use crate::seghead::SegHeadConfig;
use crate::train::TrainConfig;

/// One `key=value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Split text into entries, rejecting malformed and duplicate keys.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key=value, found {s:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!("line {line}: {key} already set on line {}", prev.line)));
        }
        out.push(KvEntry { line, key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

fn parse_one<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| invalid!("cannot parse {s:?}"))
}

/// `lo..hi` or a single value `v` (meaning `v..v`).
pub fn parse_range<T: FromStr + PartialOrd + Copy>(s: &str) -> Result<(T, T)> {
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (parse_one(a)?, parse_one(b)?),
        None => {
            let v = parse_one(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(invalid!("empty range {s:?}"));
    }
    Ok((lo, hi))
}

fn parse_list4(s: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = s.split(',').map(parse_one).collect::<Result<_>>()?;
    v.try_into().map_err(|_| invalid!("expected 4 comma-separated integers, found {s:?}"))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid!("expected a boolean, found {s:?}")),
    }
}

fn parse_fuse(s: &str) -> Result<FuseMode> {
    match s {
        "normalized" => Ok(FuseMode::Normalized),
        "literal" => Ok(FuseMode::Literal),
        _ => Err(invalid!("fuse must be normalized or literal, found {s:?}")),
    }
}

/// Augmentation names accepted in `pretext.augmentations`.
pub const AUGMENTATIONS: [&str; 4] = ["color_jitter", "random_crop", "gaussian_noise", "hflip"];

fn parse_augmentations(s: &str, spec: &mut AugmentationSpec) -> Result<()> {
    let mut on = [false; 4];
    if s != "none" {
        for name in s.split(',').map(str::trim) {
            let i = AUGMENTATIONS
                .iter()
                .position(|&a| a == name)
                .ok_or_else(|| invalid!("unknown augmentation {name:?} (expected {})", AUGMENTATIONS.join(", ")))?;
            on[i] = true;
        }
    }
    [spec.color_jitter, spec.random_crop, spec.gaussian_noise, spec.hflip] = on;
    Ok(())
}

fn augmentation_list(spec: &AugmentationSpec) -> String {
    let on = [spec.color_jitter, spec.random_crop, spec.gaussian_noise, spec.hflip];
    let names: Vec<&str> = AUGMENTATIONS.iter().zip(on).filter(|(_, o)| *o).map(|(n, _)| *n).collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Expected square input extent in pixels.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub pretext: PretextConfig,
    pub head: SegHeadConfig,
    pub train: TrainConfig,
    pub infer_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 64,
            backbone: BackboneConfig::default(),
            pretext: PretextConfig::default(),
            head: SegHeadConfig::default(),
            train: TrainConfig::default(),
            infer_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for KvEntry { line, key, value } in parse_kv(text)? {
            c.set(&key, &value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => Error::Config(format!("line {line}: {key}: {other}")),
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pretext;
        let a = &mut p.augment;
        let h = &mut self.head;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_one(v)?,
            "image_size" => self.image_size = parse_one(v)?,
            "backbone.stage_channels" => self.backbone.stage_channels = parse_list4(v)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = parse_list4(v)?,
            "backbone.norm_groups" => self.backbone.norm_groups = parse_one(v)?,
            "pretext.tau_s" => p.tau_s = parse_one(v)?,
            "pretext.tau_t" => p.tau_t = parse_one(v)?,
            "pretext.k" | "pretext.K" => p.k = parse_one(v)?,
            "pretext.hidden" => p.hidden = parse_one(v)?,
            "pretext.head_init_std" => p.head_init_std = parse_one(v)?,
            "pretext.steps" => p.steps = parse_one(v)?,
            "pretext.batch_size" => p.batch_size = parse_one(v)?,
            "pretext.lr" => p.lr = parse_one(v)?,
            "pretext.lambda_base" => p.lambda_base = parse_one(v)?,
            "pretext.center_momentum" => p.center_momentum = parse_one(v)?,
            "pretext.augmentations" => parse_augmentations(v, a)?,
            "pretext.aug.jitter" => a.jitter = parse_one(v)?,
            "pretext.aug.crop_scale" => a.crop_scale = parse_range(v)?,
            "pretext.aug.noise_sigma" => a.noise_sigma = parse_one(v)?,
            "pretext.aug.hflip_prob" => a.hflip_prob = parse_one(v)?,
            "model.n_queries" => h.n_queries = parse_one(v)?,
            "model.c_e" => h.c_e = parse_one(v)?,
            "model.c_d" => h.c_d = parse_one(v)?,
            "model.heads" => h.heads = parse_one(v)?,
            "model.encoder_layers" => h.encoder_layers = parse_one(v)?,
            "model.norm_groups" => h.norm_groups = parse_one(v)?,
            "train.steps" => t.steps = parse_one(v)?,
            "train.lr" => t.lr = parse_one(v)?,
            "train.batch_size" => t.batch_size = parse_one(v)?,
            "train.deep_supervision" => t.deep_supervision = parse_bool(v)?,
            "train.val_every" => t.val_every = parse_one(v)?,
            "train.fuse" => t.fuse = parse_fuse(v)?,
            "infer.threshold" => self.infer_threshold = parse_one(v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        self.backbone.validate().map_err(wrap)?;
        self.pretext.validate().map_err(wrap)?;
        self.head.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if !(0.0..=1.0).contains(&self.infer_threshold) {
            return Err(Error::Config(format!("infer.threshold {} outside [0, 1]", self.infer_threshold)));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { backbone: self.backbone.clone(), head: self.head.clone() }
    }

    /// Every key with its current value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (b, p, a, h, t) = (&self.backbone, &self.pretext, &self.pretext.augment, &self.head, &self.train);
        let list = |v: &[usize; 4]| v.map(|x| x.to_string()).join(",");
        let fuse = match t.fuse {
            FuseMode::Normalized => "normalized",
            FuseMode::Literal => "literal",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("backbone.stage_channels", list(&b.stage_channels));
        kv("backbone.blocks_per_stage", list(&b.blocks_per_stage));
        kv("backbone.norm_groups", b.norm_groups.to_string());
        kv("pretext.tau_s", p.tau_s.to_string());
        kv("pretext.tau_t", p.tau_t.to_string());
        kv("pretext.k", p.k.to_string());
        kv("pretext.hidden", p.hidden.to_string());
        kv("pretext.head_init_std", p.head_init_std.to_string());
        kv("pretext.steps", p.steps.to_string());
        kv("pretext.batch_size", p.batch_size.to_string());
        kv("pretext.lr", p.lr.to_string());
        kv("pretext.lambda_base", p.lambda_base.to_string());
        kv("pretext.center_momentum", p.center_momentum.to_string());
        kv("pretext.augmentations", augmentation_list(a));
        kv("pretext.aug.jitter", a.jitter.to_string());
        kv("pretext.aug.crop_scale", format!("{}..{}", a.crop_scale.0, a.crop_scale.1));
        kv("pretext.aug.noise_sigma", a.noise_sigma.to_string());
        kv("pretext.aug.hflip_prob", a.hflip_prob.to_string());
        kv("model.n_queries", h.n_queries.to_string());
        kv("model.c_e", h.c_e.to_string());
        kv("model.c_d", h.c_d.to_string());
        kv("model.heads", h.heads.to_string());
        kv("model.encoder_layers", h.encoder_layers.to_string());
        kv("model.norm_groups", h.norm_groups.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.deep_supervision", t.deep_supervision.to_string());
        kv("train.val_every", t.val_every.to_string());
        kv("train.fuse", fuse.to_string());
        kv("infer.threshold", self.infer_threshold.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn rendered_defaults_parse_back() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse(
            "seed = 7\nbackbone.stage_channels=8,16,32,64\npretext.K=64\npretext.augmentations=none\n\
             train.deep_supervision=true\ntrain.fuse=literal\npretext.aug.crop_scale=0.6..0.9\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.backbone.stage_channels, [8, 16, 32, 64]);
        assert_eq!(c.pretext.k, 64);
        assert_eq!(c.pretext.augment, AugmentationSpec { crop_scale: (0.6, 0.9), ..AugmentationSpec::none() });
        assert!(c.train.deep_supervision);
        assert_eq!(c.train.fuse, FuseMode::Literal);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("seed=1\nmodel.n_querys=4\n", "line 2"),
            ("seed=1\nseed=2\n", "already set on line 1"),
            ("image_size=48\n", "multiple of 32"),
            ("seed\n", "line 1"),
            ("train.deep_supervision=maybe\n", "line 1"),
            ("pretext.augmentations=blur\n", "unknown augmentation"),
            ("backbone.stage_channels=1,2,3\n", "line 1"),
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text:?}");
            assert!(e.to_string().contains(needle), "{text:?}: {e}");
        }
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range::<usize>("2..5").unwrap(), (2, 5));
        assert_eq!(parse_range::<f64>("3.5").unwrap(), (3.5, 3.5));
        assert!(parse_range::<usize>("5..2").is_err());
        assert!(parse_range::<usize>("a..2").is_err());
    }
}
