//! Subcommand bodies. Inputs are fully validated before any output appears.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{GrayImage, Luma};
use pvseg_core::datasets::{self, generate_synthetic, load_checkpoint, save_checkpoint, StoredTensor};
use pvseg_core::metrics::{confusion, ConfusionCounts, EvalReport};
use pvseg_core::model::ARCH_TENSOR;
use pvseg_core::pretext::{self, PretextLogRow};
use pvseg_core::train::{self as fit, evaluate_model, TrainLogRow};
use pvseg_core::{
    Error, FuseMode, Manifest, ModelConfig, RunConfig, Sample, SampleRecord, Split, SyntheticSceneSpec, TrainedModel,
};

use crate::log::CsvLog;

fn read_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let spec = SyntheticSceneSpec::from_kv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

pub fn gen_data(spec_path: &Path, seed: u64, n: usize, out: &Path) -> Result<()> {
    let spec = read_spec(spec_path)?;
    spec.validate().map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()).into());
    }
    let manifest = generate_synthetic(&spec, seed, n, out)?;
    println!("{:<6} {:>7} {:>9} {:>9}", "split", "images", "positive", "negative");
    let mut totals = (0, 0);
    for split in Split::ALL {
        let (mut images, mut positive) = (0, 0);
        for r in manifest.fold(split) {
            images += 1;
            positive += is_positive(&manifest, r)? as usize;
        }
        totals.0 += images;
        totals.1 += positive;
        println!("{:<6} {images:>7} {positive:>9} {:>9}", split.as_str(), images - positive);
    }
    println!("{:<6} {:>7} {:>9} {:>9}", "total", totals.0, totals.1, totals.0 - totals.1);
    println!("wrote {}", out.join(datasets::MANIFEST_NAME).display());
    Ok(())
}

fn is_positive(manifest: &Manifest, r: &SampleRecord) -> Result<bool> {
    let Some(m) = &r.mask else { return Ok(false) };
    Ok(datasets::read_gray(&manifest.resolve(m))?.as_raw().iter().any(|&v| v > 0))
}

/// Samples of one fold, checked against the configured extent.
fn load_fold(manifest: &Manifest, split: Option<Split>, size: usize) -> Result<Vec<Sample>> {
    let samples = datasets::load_fold(manifest, split)?;
    for (s, r) in samples.iter().zip(manifest.records.iter().filter(|r| split.is_none() || r.split == split)) {
        if s.image.shape()[1..] != [size, size] {
            return Err(Error::Data(format!(
                "{}: loads as {:?}, config image_size is {size}",
                manifest.resolve(&r.image).display(),
                &s.image.shape()[1..]
            ))
            .into());
        }
    }
    Ok(samples)
}

fn default_log(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("csv"))
}

fn fold_name(split: Option<Split>) -> &'static str {
    split.map_or("all", Split::as_str)
}

pub fn pretrain(config: &Path, data: &Path, out: &Path, split: Option<Split>, log: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    let manifest = Manifest::read(data)?;
    let samples = load_fold(&manifest, split, cfg.image_size)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("fold {} of {} is empty", fold_name(split), data.display())).into());
    }
    let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
    let mut csv = CsvLog::create(&default_log(out, log), &["step", "loss", "lambda", "teacher_entropy"])?;
    let outcome = pretext::pretrain(&images, &cfg.backbone, &cfg.pretext, cfg.seed, |r: &PretextLogRow| {
        csv.row(&[r.step.to_string(), r.loss.to_string(), r.lambda.to_string(), r.teacher_entropy.to_string()])
            .map_err(|e| Error::Data(format!("log: {e}")))
    })?;
    save_checkpoint(out, &outcome.teacher.to_checkpoint(None))?;
    csv.finish()?;
    let last = outcome.log.last();
    println!(
        "pretrained {} steps on {} images; final loss {:.4}, teacher entropy {:.4}",
        outcome.log.len(),
        images.len(),
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.teacher_entropy)
    );
    Ok(())
}

pub fn train(config: &Path, data: &Path, init: Option<&Path>, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    let manifest = Manifest::read(data)?;
    let train_set = load_fold(&manifest, Some(Split::Train), cfg.image_size)?;
    let val_set = load_fold(&manifest, Some(Split::Val), cfg.image_size)?;
    let mut model = TrainedModel::new(&cfg.model(), cfg.seed)?;
    if let Some(path) = init {
        let ckpt = load_checkpoint(path)?;
        model.init_backbone(&ckpt).with_context(|| format!("initializing from {}", path.display()))?;
    }
    let mut csv = CsvLog::create(&default_log(out, log), &["step", "loss", "val_iou"])?;
    let outcome = fit::train(model, &train_set, &val_set, &cfg.train, cfg.seed, |r: &TrainLogRow| {
        let iou = r.val_iou.map_or(String::new(), |v| v.to_string());
        csv.row(&[r.step.to_string(), r.loss.to_string(), iou]).map_err(|e| Error::Data(format!("log: {e}")))
    })?;
    outcome.model.save(out)?;
    csv.finish()?;
    match outcome.final_val_iou {
        Some(iou) => println!("trained {} steps; val IoU {iou:.4}", outcome.log.len()),
        None => println!("trained {} steps; no validation fold", outcome.log.len()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    model: Option<&Path>,
    data: &Path,
    split: Option<Split>,
    fold: &str,
    out: Option<PathBuf>,
    threshold: f64,
    fuse: FuseMode,
    oracle: bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("--threshold {threshold} outside [0, 1]")).into());
    }
    let manifest = Manifest::read(data)?;
    let samples = datasets::load_fold(&manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("fold {fold} of {} is empty", data.display())).into());
    }
    let report = if oracle {
        let mut total = ConfusionCounts::default();
        for (i, s) in samples.iter().enumerate() {
            let m = s.mask.as_ref().ok_or_else(|| Error::Data(format!("{fold} sample {i} has no mask")))?;
            let bits: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
            total += confusion(&bits, &bits)?;
        }
        EvalReport::from_counts(fold, samples.len(), total)
    } else {
        let path = model.expect("clap requires --model without --oracle");
        let net = TrainedModel::load(path)?;
        evaluate_model(&net, &samples, fold, fuse, threshold)?
    };
    let out = out.unwrap_or_else(|| match model {
        Some(m) if !oracle => m.with_extension(format!("{fold}.json")),
        _ => PathBuf::from(format!("oracle.{fold}.json")),
    });
    let json = report.to_json();
    datasets::write_atomic(&out, json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn gray(width: usize, height: usize, values: impl Iterator<Item = u8>) -> GrayImage {
    let mut img = GrayImage::new(width as u32, height as u32);
    for (px, v) in img.pixels_mut().zip(values) {
        *px = Luma([v]);
    }
    img
}

pub fn infer(model: &Path, image: &Path, out: &Path, prob: Option<&Path>, threshold: f64, fuse: FuseMode) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("--threshold {threshold} outside [0, 1]")).into());
    }
    let net = TrainedModel::load(model)?;
    let root = Manifest { root: PathBuf::new(), records: vec![] };
    let sample = datasets::load_sample(&root, &SampleRecord::new(image, None))?;
    let fused = net.predict(&sample.image, fuse, threshold)?;
    let (w, h) = (fused.width, fused.height);
    let mask = gray(w, h, fused.mask.iter().map(|&m| if m { 255 } else { 0 }));
    if let Some(p) = prob {
        let map = gray(w, h, fused.prob.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        datasets::write_pgm(p, &map)?;
    }
    datasets::write_pgm(out, &mask)?;
    println!("{w}x{h}: {} foreground pixels", fused.foreground());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    println!("{}: {} tensors", path.display(), ckpt.tensors.len());
    let mut values = 0usize;
    for (name, t) in &ckpt.tensors {
        let n: usize = t.shape().iter().product();
        values += n;
        println!("{name:<48} {:<4} {:?}", format!("{:?}", t.dtype()).to_lowercase(), t.shape());
    }
    println!("{values} values");
    if let Some(StoredTensor::F64(arch)) = ckpt.get(ARCH_TENSOR) {
        let cfg = ModelConfig::from_tensor(arch)?;
        println!("architecture: {cfg:?}");
    }
    Ok(())
}
