//! Self-distillation pretraining of the backbone.
//!
//! A student (backbone plus projection head) is trained to reproduce the
//! centred, sharpened output distribution of a teacher on a second view of
//! the same image. The teacher is never trained directly; it tracks an
//! exponential moving average of the student.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PREFIX as BACKBONE_PREFIX};
use crate::datasets::{sample_rng, Checkpoint, StoredTensor};
use crate::error::{invalid, Error, Result};
use crate::layers::{Linear, Mlp};
use crate::numerics::{entropy, kernels, softmax_t, Adam, Bound, Graph, ParamStore, Scalar, Tensor, Var};

/// Parameter-name prefix of the projection head.
pub const HEAD_PREFIX: &str = "head";

/// Checkpoint tensor holding the teacher centre.
pub const CENTER_TENSOR: &str = "meta.center";

/// Floor applied to student probabilities before the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Brightness and contrast factors are drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub noise_sigma: f64,
    pub hflip_prob: f64,
    pub color_jitter: bool,
    pub random_crop: bool,
    pub gaussian_noise: bool,
    pub hflip: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            jitter: 0.2,
            crop_scale: (0.5, 1.0),
            noise_sigma: 0.05,
            hflip_prob: 0.5,
            color_jitter: true,
            random_crop: true,
            gaussian_noise: true,
            hflip: true,
        }
    }
}

impl AugmentationSpec {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        AugmentationSpec {
            color_jitter: false,
            random_crop: false,
            gaussian_noise: false,
            hflip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(invalid!("crop scale range {lo}..{hi} must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(invalid!("jitter {} outside [0, 1)", self.jitter));
        }
        if self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(invalid!("noise sigma must be >= 0 and flip probability in [0, 1]"));
        }
        Ok(())
    }
}

/// The random choices behind one augmented view, minus pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDraw {
    pub brightness: f64,
    pub contrast: f64,
    /// `(top, left, height, width)` of the crop.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub flip: bool,
}

impl ViewDraw {
    pub const IDENTITY: ViewDraw = ViewDraw { brightness: 1.0, contrast: 1.0, crop: None, flip: false };

    pub fn sample(spec: &AugmentationSpec, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut d = Self::IDENTITY;
        if spec.color_jitter && spec.jitter > 0.0 {
            d.brightness = rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter);
            d.contrast = rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter);
        }
        if spec.random_crop {
            let scale = rng.random_range(spec.crop_scale.0..=spec.crop_scale.1).sqrt();
            let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
            let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            d.crop = Some((top, left, ch, cw)).filter(|&(_, _, a, b)| (a, b) != (h, w));
        }
        if spec.hflip {
            d.flip = rng.random_bool(spec.hflip_prob);
        }
        d
    }

    /// Crop-resize, jitter and flip `image[3, H, W]` (no clamping).
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let s = image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = match self.crop {
            Some((top, left, ch, cw)) => {
                let mut crop = Vec::with_capacity(c * ch * cw);
                for plane in image.data().chunks(h * w) {
                    for y in top..top + ch {
                        crop.extend_from_slice(&plane[y * w + left..y * w + left + cw]);
                    }
                }
                kernels::bilinear_resize(&crop, c, (ch, cw), (h, w))
            }
            None => image.data().to_vec(),
        };
        if self.brightness != 1.0 || self.contrast != 1.0 {
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
            for v in &mut data {
                let b = *v as f64 * self.brightness;
                *v = ((b - mean * self.brightness) * self.contrast + mean * self.brightness) as f32;
            }
        }
        if self.flip {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        Tensor::new(vec![c, h, w], data).expect("view shape")
    }
}

/// One augmented copy of `image`, values in `[0, 1]`.
pub fn augment(image: &Tensor<f32>, spec: &AugmentationSpec, rng: &mut impl Rng) -> Tensor<f32> {
    let s = image.shape();
    let draw = ViewDraw::sample(spec, s[1], s[2], rng);
    let mut view = draw.apply(image);
    if spec.gaussian_noise && spec.noise_sigma > 0.0 {
        let n = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        view.data_mut().iter_mut().for_each(|v| *v += n.sample(rng) as f32);
    }
    view.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    view
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    /// Output dimension of the projection head.
    pub k: usize,
    pub hidden: usize,
    /// Standard deviation of the head's last-layer initial weights.
    pub head_init_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_base: f64,
    pub center_momentum: f64,
    pub augment: AugmentationSpec,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            tau_s: 0.1,
            tau_t: 0.04,
            k: 256,
            hidden: 512,
            head_init_std: 0.03,
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            lambda_base: 0.996,
            center_momentum: 0.9,
            augment: AugmentationSpec::default(),
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            return Err(invalid!("temperatures must be positive"));
        }
        if self.k == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(invalid!("k, hidden and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_base) {
            return Err(invalid!("lambda_base {} outside [0, 1]", self.lambda_base));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(invalid!("center momentum {} outside [0, 1)", self.center_momentum));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        self.augment.validate()
    }
}

/// Backbone plus a three-layer projection head on the pooled deepest map.
#[derive(Debug, Clone)]
pub struct PretextNet {
    pub backbone: Backbone,
    pub head: Mlp,
    pub k: usize,
}

impl PretextNet {
    pub fn new<T: Scalar>(
        backbone: &BackboneConfig,
        cfg: &PretextConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bb = Backbone::new(backbone, store, BACKBONE_PREFIX, rng)?;
        let c4 = backbone.stage_channels[3];
        let l0 = Linear::new(store, &format!("{HEAD_PREFIX}.0"), c4, cfg.hidden, true, rng);
        let l1 = Linear::new(store, &format!("{HEAD_PREFIX}.1"), cfg.hidden, cfg.hidden, true, rng);
        let w = Tensor::randn([cfg.hidden, cfg.k], cfg.head_init_std, rng);
        let l2 = Linear::with_weight(store, &format!("{HEAD_PREFIX}.2"), w);
        Ok(PretextNet { backbone: bb, head: Mlp { layers: vec![l0, l1, l2] }, k: cfg.k })
    }

    /// Head logits `[K]` for one image.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let f = self.backbone.forward(g, p, image)?;
        let f4 = f.f4();
        let s = g.shape(f4).to_vec();
        let flat = g.reshape(f4, &[s[0], s[1] * s[2]])?;
        let pooled = g.mean_last(flat)?;
        let x = g.reshape(pooled, &[1, s[0]])?;
        let z = self.head.forward(g, p, x)?;
        g.reshape(z, &[self.k])
    }
}

/// Student distribution `softmax(z / tau_s)` recorded on the tape.
pub fn student_dist<T: Scalar>(g: &mut Graph<T>, logits: Var, tau_s: f64) -> Result<Var> {
    g.softmax(logits, tau_s, None)
}

/// Teacher distribution `softmax((z - center) / tau_t)`; plain values, so
/// nothing flows back into the teacher.
pub fn teacher_dist<T: Scalar>(logits: &[T], center: &[T], tau_t: f64) -> Result<Vec<T>> {
    if logits.len() != center.len() {
        return Err(invalid!("{} teacher logits vs centre of {}", logits.len(), center.len()));
    }
    let centred: Vec<T> = logits.iter().zip(center).map(|(&z, &c)| z - c).collect();
    softmax_t(&centred, tau_t)
}

/// Cross-entropy `-sum_k p_t[k] ln max(p_s[k], 1e-12)` on the tape.
pub fn pretext_loss<T: Scalar>(g: &mut Graph<T>, p_t: &[T], p_s: Var) -> Result<Var> {
    let k = g.shape(p_s).to_vec();
    if k.iter().product::<usize>() != p_t.len() {
        return Err(invalid!("teacher has {} entries, student {k:?}", p_t.len()));
    }
    let log_ps = g.log(p_s, LOG_FLOOR);
    let pt = g.constant(Tensor::new(k, p_t.to_vec())?);
    let prod = g.mul(pt, log_ps)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

pub fn pretext_loss_value<T: Scalar>(p_t: &[T], p_s: &[T]) -> f64 {
    p_t.iter()
        .zip(p_s)
        .map(|(&t, &s)| -t.as_f64() * s.as_f64().max(LOG_FLOOR).ln())
        .sum()
}

/// EMA momentum: rises from `base` at step 0 to 1 at `total` along a
/// half cosine; steps past the horizon give 1.
pub fn cosine_lambda(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 || step >= total {
        return 1.0;
    }
    let t = step as f64 / total as f64;
    1.0 - (1.0 - base) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// `theta_t <- lambda theta_t + (1 - lambda) theta_s`, tensor by tensor.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, lambda: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(invalid!("teacher has {} tensors, student {}", teacher.len(), student.len()));
    }
    let (l, m) = (T::of(lambda), T::of(1.0 - lambda));
    for ((name, s), t) in student.iter().zip(teacher.tensors_mut()) {
        if s.shape() != t.shape() {
            return Err(invalid!("{name}: teacher {:?} vs student {:?}", t.shape(), s.shape()));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = l * *tv + m * sv;
        }
    }
    Ok(())
}

/// `center <- m center + (1 - m) mean(batch)`.
pub fn center_update<T: Scalar>(center: &mut [T], batch: &[Vec<T>], momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(invalid!("centre momentum {momentum} outside [0, 1)"));
    }
    if batch.is_empty() {
        return Ok(());
    }
    let inv = 1.0 / batch.len() as f64;
    for (k, c) in center.iter_mut().enumerate() {
        let mean: f64 = batch.iter().map(|z| z[k].as_f64()).sum::<f64>() * inv;
        *c = T::of(momentum * c.as_f64() + (1.0 - momentum) * mean);
    }
    Ok(())
}

/// Teacher parameters and centring state.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamStore<f32>,
    pub center: Vec<f32>,
    pub lambda_base: f64,
    pub step: usize,
    pub total_steps: usize,
}

impl TeacherState {
    /// Teacher head logits for each image.
    pub fn logits(&self, net: &PretextNet, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        images
            .iter()
            .map(|img| {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let x = g.constant(img.clone());
                let z = net.logits(&mut g, &p, x)?;
                Ok(g.value(z).data().to_vec())
            })
            .collect()
    }

    /// Teacher entropies (nats) over a probe batch.
    pub fn probe_entropy(&self, net: &PretextNet, images: &[Tensor<f32>], tau_t: f64) -> Result<ProbeEntropy> {
        let logits = self.logits(net, images)?;
        let inv = 1.0 / logits.len() as f64;
        let mut per_sample = 0.0;
        let mut mean = vec![0.0f64; self.center.len()];
        for z in &logits {
            let p = teacher_dist(z, &self.center, tau_t)?;
            per_sample += entropy(&p) * inv;
            for (m, &v) in mean.iter_mut().zip(&p) {
                *m += v as f64 * inv;
            }
        }
        Ok(ProbeEntropy { per_sample, marginal: entropy(&mean) })
    }

    /// Backbone and head tensors plus the centre.
    pub fn to_checkpoint(&self, arch: Option<Tensor<f64>>) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.params, "");
        let center = Tensor::new(vec![self.center.len()], self.center.clone()).expect("centre shape");
        ckpt.push(CENTER_TENSOR, StoredTensor::F32(center));
        if let Some(a) = arch {
            ckpt.push(crate::model::ARCH_TENSOR, StoredTensor::F64(a));
        }
        ckpt
    }
}

/// Mean per-image entropy, and entropy of the batch-mean distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeEntropy {
    pub per_sample: f64,
    pub marginal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextLogRow {
    pub step: usize,
    pub loss: f64,
    pub lambda: f64,
    /// Entropy of the mean teacher distribution over the probe images.
    pub teacher_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct PretextOutcome {
    pub net: PretextNet,
    pub student: ParamStore<f32>,
    pub teacher: TeacherState,
    pub log: Vec<PretextLogRow>,
}

/// Images used to monitor teacher entropy.
pub const PROBE_IMAGES: usize = 8;

/// Run the self-distillation loop over `images`.
///
/// The centre starts at the mean of the first teacher batch.
///
/// `on_step` sees every log row as soon as it is produced; returning an
/// error aborts the run.
pub fn pretrain(
    images: &[Tensor<f32>],
    backbone: &BackboneConfig,
    cfg: &PretextConfig,
    seed: u64,
    mut on_step: impl FnMut(&PretextLogRow) -> Result<()>,
) -> Result<PretextOutcome> {
    if images.is_empty() {
        return Err(Error::Data("pretraining needs at least one image".into()));
    }
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = ParamStore::new();
    let net = PretextNet::new(backbone, cfg, &mut student, &mut init_rng)?;
    let mut teacher = TeacherState {
        params: student.clone(),
        center: vec![0.0; cfg.k],
        lambda_base: cfg.lambda_base,
        step: 0,
        total_steps: cfg.steps,
    };
    let mut opt = Adam::new(&student, cfg.lr);
    let probe: Vec<Tensor<f32>> = images.iter().take(PROBE_IMAGES).cloned().collect();
    let mut order: Vec<usize> = Vec::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0dde);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let mut views_s = Vec::with_capacity(batch.len());
        let mut views_t = Vec::with_capacity(batch.len());
        for (b, &idx) in batch.iter().enumerate() {
            let mut rng = sample_rng(seed, (step * cfg.batch_size + b) as u64);
            views_s.push(augment(&images[idx], &cfg.augment, &mut rng));
            views_t.push(augment(&images[idx], &cfg.augment, &mut rng));
        }
        let t_logits = teacher.logits(&net, &views_t)?;
        if step == 0 {
            center_update(&mut teacher.center, &t_logits, 0.0)?;
        }

        let mut g = Graph::new();
        let p = student.bind(&mut g, true);
        let mut terms = Vec::with_capacity(batch.len());
        for (view, zt) in views_s.iter().zip(&t_logits) {
            let x = g.constant(view.clone());
            let zs = net.logits(&mut g, &p, x)?;
            let ps = student_dist(&mut g, zs, cfg.tau_s)?;
            let pt = teacher_dist(zt, &teacher.center, cfg.tau_t)?;
            terms.push(pretext_loss(&mut g, &pt, ps)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }
        let loss = g.scale(loss, 1.0 / terms.len() as f64);
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("pretext loss {loss_value} at step {step}")));
        }
        let grads = g.backward(loss)?;
        drop(g);
        opt.step(&mut student, &p, &grads);

        let lambda = cosine_lambda(step, cfg.steps, cfg.lambda_base);
        ema_update(&mut teacher.params, &student, lambda)?;
        center_update(&mut teacher.center, &t_logits, cfg.center_momentum)?;
        teacher.step = step + 1;

        let row = PretextLogRow {
            step,
            loss: loss_value,
            lambda,
            teacher_entropy: teacher.probe_entropy(&net, &probe, cfg.tau_t)?.marginal,
        };
        on_step(&row)?;
        log.push(row);
    }
    Ok(PretextOutcome { net, student, teacher, log })
}

/// Ratio of the mean loss over the last `window` steps to the mean over
/// the first `window` steps.
pub fn running_loss_ratio(log: &[PretextLogRow], window: usize) -> Option<f64> {
    if window == 0 || log.len() < window {
        return None;
    }
    let mean = |rows: &[PretextLogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some(mean(&log[log.len() - window..]) / mean(&log[..window]))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn image(seed: u64) -> Tensor<f32> {
        Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = image(1);
        let view = augment(&img, &AugmentationSpec::none(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(view, img);
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let spec = AugmentationSpec {
            jitter: 0.0,
            crop_scale: (1.0, 1.0),
            noise_sigma: 0.0,
            hflip_prob: 0.0,
            ..Default::default()
        };
        let img = image(3);
        assert_eq!(augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(4)), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(5);
        let d = ViewDraw { flip: true, ..ViewDraw::IDENTITY };
        let once = d.apply(&img);
        assert_ne!(once, img);
        assert_eq!(d.apply(&once), img);
    }

    #[test]
    fn views_stay_in_unit_range_and_are_reproducible() {
        let img = image(6);
        let spec = AugmentationSpec { noise_sigma: 0.3, ..Default::default() };
        let a = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(7));
        let b = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn closed_form_distributions() {
        let ps = softmax_t(&[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((ps[0] - 0.75).abs() < 1e-15 && (ps[1] - 0.25).abs() < 1e-15);
        let pt = teacher_dist(&[3f64.ln(), 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((pt[0] - 0.75).abs() < 1e-15);
        let z = [0.3f64, -1.2, 4.0];
        let u = teacher_dist(&z, &z, 0.04).unwrap();
        assert!(u.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn equal_student_logits_give_uniform() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::full([8], 0.7));
        let p = student_dist(&mut g, z, 0.1).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(pretext_loss_value(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);
        let u = vec![1.0 / 256.0; 256];
        assert!((pretext_loss_value(&u, &u) - 256f64.ln()).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let ps = g.constant(Tensor::new(vec![256], u.clone()).unwrap());
        let l = pretext_loss(&mut g, &u, ps).unwrap();
        assert!((g.value(l).item() - 5.545177444479562).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_anchors() {
        assert!((cosine_lambda(0, 100, 0.996) - 0.996).abs() < 1e-12);
        assert!((cosine_lambda(50, 100, 0.996) - 0.998).abs() < 1e-12);
        assert_eq!(cosine_lambda(100, 100, 0.996), 1.0);
        assert_eq!(cosine_lambda(150, 100, 0.996), 1.0);
    }

    #[test]
    fn ema_examples() {
        let store = |v: f64| {
            let mut s = ParamStore::<f64>::new();
            s.add("x", Tensor::scalar(v));
            s
        };
        let student = store(4.0);
        let mut t = store(2.0);
        ema_update(&mut t, &student, 0.5).unwrap();
        assert_eq!(t.tensors()[0].item(), 3.0);
        let mut t = store(2.0);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.tensors()[0].item(), 2.0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.tensors()[0].item(), 4.0);

        let mut wrong = ParamStore::<f64>::new();
        wrong.add("x", Tensor::zeros([2]));
        assert!(ema_update(&mut wrong, &student, 0.5).is_err());
    }

    #[test]
    fn center_examples() {
        let mut c = vec![5.0f64, -5.0];
        center_update(&mut c, &[vec![1.0, 2.0], vec![3.0, 4.0]], 0.0).unwrap();
        assert_eq!(c, vec![2.0, 3.0]);
        let mut c = vec![0.0f64];
        for n in 1..=50 {
            center_update(&mut c, &[vec![2.0]], 0.9).unwrap();
            let gap = (2.0 - c[0]).abs();
            assert!(gap <= 2.0 * 0.9f64.powi(n) + 1e-12);
        }
        assert!(center_update(&mut c, &[vec![2.0]], 1.0).is_err());
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let bcfg = BackboneConfig::default();
        let cfg = PretextConfig { k: 16, hidden: 32, ..Default::default() };
        let mut student = ParamStore::<f32>::new();
        let net = PretextNet::new(&bcfg, &cfg, &mut student, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let teacher = student.clone();
        let img = image(9);

        let mut g = Graph::new();
        let ps_bound = student.bind(&mut g, true);
        let pt_bound = teacher.bind(&mut g, false);
        let x = g.constant(img.clone());
        let zt = net.logits(&mut g, &pt_bound, x).unwrap();
        let zt_vals = g.value(zt).data().to_vec();
        let zs = net.logits(&mut g, &ps_bound, x).unwrap();
        let ps = student_dist(&mut g, zs, cfg.tau_s).unwrap();
        let pt = teacher_dist(&zt_vals, &[0.0; 16], cfg.tau_t).unwrap();
        let loss = pretext_loss(&mut g, &pt, ps).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in pt_bound.vars() {
            assert!(!g.requires_grad(v));
            assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        assert!(ps_bound.vars().iter().any(|&v| grads.get(v).is_some()));
    }

    #[test]
    fn identical_views_reduce_to_same_input_cross_entropy() {
        let bcfg = BackboneConfig::default();
        let cfg = PretextConfig { k: 16, hidden: 32, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let net = PretextNet::new(&bcfg, &cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = image(10);
        let spec = AugmentationSpec::none();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v1, v2) = (augment(&img, &spec, &mut rng), augment(&img, &spec, &mut rng));
        assert_eq!(v1, v2);
        let logits = |view: &Tensor<f32>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(view.clone());
            let z = net.logits(&mut g, &p, x).unwrap();
            g.value(z).data().to_vec()
        };
        let center = vec![0.0f32; 16];
        let pt = teacher_dist(&logits(&v2), &center, cfg.tau_t).unwrap();
        let ps = softmax_t(&logits(&v1), cfg.tau_s).unwrap();
        let direct = {
            let z = logits(&img);
            pretext_loss_value(&teacher_dist(&z, &center, cfg.tau_t).unwrap(), &softmax_t(&z, cfg.tau_s).unwrap())
        };
        assert_eq!(pretext_loss_value(&pt, &ps), direct);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let r = pretrain(&[], &BackboneConfig::default(), &PretextConfig::default(), 0, |_| Ok(()));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn short_run_is_deterministic() {
        let imgs: Vec<Tensor<f32>> = (0..4).map(image).collect();
        let cfg = PretextConfig { k: 16, hidden: 32, steps: 3, batch_size: 2, ..Default::default() };
        let run = || pretrain(&imgs, &BackboneConfig::default(), &cfg, 5, |_| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.teacher.to_checkpoint(None).encode(), b.teacher.to_checkpoint(None).encode());
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn centre_starts_at_first_teacher_batch_mean() {
        let imgs: Vec<Tensor<f32>> = (0..2).map(image).collect();
        let cfg = PretextConfig { k: 16, hidden: 32, steps: 1, batch_size: 2, augment: AugmentationSpec::none(), ..Default::default() };
        let out = pretrain(&imgs, &BackboneConfig::default(), &cfg, 8, |_| Ok(())).unwrap();
        let mut init = ParamStore::<f32>::new();
        let net = PretextNet::new(&BackboneConfig::default(), &cfg, &mut init, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let t0 = TeacherState { params: init, center: vec![0.0; 16], lambda_base: 0.996, step: 0, total_steps: 1 };
        let z = t0.logits(&net, &imgs).unwrap();
        for (k, &c) in out.teacher.center.iter().enumerate() {
            let mean = (z[0][k] as f64 + z[1][k] as f64) / 2.0;
            assert!((c as f64 - mean).abs() < 1e-6 * (1.0 + mean.abs()), "{k}: {c} vs {mean}");
        }
    }

    fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, k).prop_map(|z| softmax_t(&z, 1.0).unwrap())
    }

    proptest! {
        #[test]
        fn gibbs_inequality((pt, ps) in (2usize..12).prop_flat_map(|k| (dist(k), dist(k)))) {
            let h = entropy(&pt);
            let ce = pretext_loss_value(&pt, &ps);
            prop_assert!(ce >= h - 1e-12);
            prop_assert!((pretext_loss_value(&pt, &pt) - h).abs() < 1e-12);
        }

        #[test]
        fn ema_contracts_toward_student(
            vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            lambda in 0.0f64..=1.0,
        ) {
            let mut t = ParamStore::<f64>::new();
            let mut s = ParamStore::<f64>::new();
            let (tv, sv): (Vec<f64>, Vec<f64>) = vals.iter().copied().unzip();
            t.add("w", Tensor::new(vec![tv.len()], tv.clone()).unwrap());
            s.add("w", Tensor::new(vec![sv.len()], sv.clone()).unwrap());
            ema_update(&mut t, &s, lambda).unwrap();
            for ((&new, &old), &st) in t.tensors()[0].data().iter().zip(&tv).zip(&sv) {
                prop_assert!(((new - st).abs() - lambda * (old - st).abs()).abs() < 1e-12);
            }
        }

        #[test]
        fn schedule_is_monotone_and_bounded(a in 0usize..1000, b in 0usize..1000, total in 1usize..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            let (x, y) = (cosine_lambda(lo, total, 0.996), cosine_lambda(hi, total, 0.996));
            prop_assert!((0.996..=1.0).contains(&x) && x <= y + 1e-15);
        }
    }
}
