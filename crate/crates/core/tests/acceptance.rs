//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::Instant;

use pvseg_core::datasets::{generate_synthetic, load_fold};
use pvseg_core::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use pvseg_core::metrics::{accuracy, confusion, f1, iou, ConfusionCounts};
use pvseg_core::numerics::{entropy, softmax_t};
use pvseg_core::objective::{loss, match_query};
use pvseg_core::pretext::{
    cosine_lambda, ema_update, pretext_loss, pretext_loss_value, pretrain, running_loss_ratio, student_dist,
    teacher_dist, PretextLogRow, PretextNet,
};
use pvseg_core::seghead::SegHeadConfig;
use pvseg_core::train::{train, TrainConfig};
use pvseg_core::{
    AugmentationSpec, Backbone, BackboneConfig, Graph, ModelConfig, ParamStore, PretextConfig, Result, RunConfig,
    Sample, Segmenter, Split, SyntheticSceneSpec, Tensor, TrainedModel, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Near-zero floor so that relative error is measured almost everywhere.
const OPTS: GradCheckOptions = GradCheckOptions { step: 1e-5, abs_floor: 1e-9, max_coords: None, seed: 0 };

/// Worst relative and absolute errors, and the number of checked entries.
fn worst(reports: &[GradCheckReport]) -> (f64, f64, usize) {
    reports.iter().fold((0.0, 0.0, 0), |(r, a, n), x| (r.max(x.max_rel_err), a.max(x.max_abs_err), n + x.checked))
}

fn primitive_reports() -> Result<Vec<GradCheckReport>> {
    type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
    let mut r = rng(7);
    let mut n = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut r);
    let (a, b) = (n(&[3, 4]), n(&[3, 4]));
    let (row, ch) = (n(&[4]), n(&[3]));
    let (at, m45, m54) = (n(&[4, 3]), n(&[4, 5]), n(&[5, 4]));
    let (x6, g6, b6) = (n(&[4, 6]), n(&[6]), n(&[6]));
    let (x33, g4, b4) = (n(&[4, 3, 3]), n(&[4]), n(&[4]));
    let (img, w, bias) = (n(&[2, 7, 6]), n(&[3, 2, 3, 3]), n(&[3]));
    let (wt, bt) = (n(&[2, 3, 2, 2]), n(&[3]));
    let (r44, r35) = (n(&[4, 4]), n(&[3, 5]));
    let logits = n(&[3, 5]);
    let pos = a.map(|v| v.abs() + 0.5);
    let target = Tensor::from_f64([3, 4], &[1., 0., 1., 1., 0., 0., 1., 0., 0.3, 0.7, 1., 0.])?;
    let mask: Vec<bool> = (0..15).map(|i| [0, 2, 3, 11].contains(&i)).collect();

    let cases: Vec<(Vec<Tensor<f64>>, Op)> = vec![
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        (vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.relu(v[0])))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        (vec![pos], Box::new(|g, v| Ok(g.log(v[0], 1e-12)))),
        (vec![a.clone(), row], Box::new(|g, v| g.add_row_vec(v[0], v[1]))),
        (vec![a.clone(), ch], Box::new(|g, v| g.add_channel_vec(v[0], v[1]))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0])))),
        (vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        (vec![a.clone()], Box::new(|g, v| g.mean_last(v[0]))),
        (vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        (vec![a.clone()], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        (vec![a.clone(), m45.clone()], Box::new(|g, v| g.matmul_t(v[0], v[1], false, false))),
        (vec![at.clone(), m45], Box::new(|g, v| g.matmul_t(v[0], v[1], true, false))),
        (vec![a.clone(), m54.clone()], Box::new(|g, v| g.matmul_t(v[0], v[1], false, true))),
        (vec![at, m54], Box::new(|g, v| g.matmul_t(v[0], v[1], true, true))),
        (vec![logits.clone()], Box::new(|g, v| g.softmax(v[0], 0.7, None))),
        (vec![logits], Box::new(move |g, v| g.softmax(v[0], 1.3, Some(&mask)))),
        (vec![x6, g6, b6], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        (vec![x33, g4, b4], Box::new(|g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5))),
        (vec![img.clone(), w, bias], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))),
        (vec![img.clone(), wt, bt], Box::new(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0))),
        (vec![img.clone()], Box::new(|g, v| g.max_pool2d(v[0], 3, 2, 1))),
        (vec![img.clone()], Box::new(|g, v| g.resize_bilinear(v[0], 9, 4))),
        (vec![a.clone(), r44.clone()], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        (vec![a.clone(), r35], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        (vec![r44.clone()], Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        (vec![r44], Box::new(|g, v| g.slice_cols(v[0], 1, 2))),
        (vec![a], Box::new(move |g, v| g.bce_with_logits(v[0], &target, 1e-7))),
    ];
    cases.into_iter().map(|(inputs, f)| check_inputs(&inputs, f, OPTS)).collect()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stage_channels: [4, 8, 8, 16], ..Default::default() },
        head: SegHeadConfig { n_queries: 3, c_e: 4, c_d: 8, heads: 2, encoder_layers: 1, norm_groups: 4 },
    }
}

/// Image and every weight against the segmentation loss, for a positive
/// and a negative ground truth.
fn end_to_end_reports() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for positive in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let net = Segmenter::new(&small_model(), &mut store, &mut rng(11))?;
        store.add("input.image", Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut rng(12)));
        let mut gt = Tensor::<f64>::zeros([32, 32]);
        if positive {
            for y in 6..18 {
                for x in 10..26 {
                    gt.data_mut()[y * 32 + x] = 1.0;
                }
            }
        }
        let opts = GradCheckOptions { max_coords: Some(4), ..OPTS };
        out.push(check_params(
            &store,
            |g, p| {
                let image = *p.vars().last().expect("image bound last");
                let pred = net.forward(g, p, image)?;
                Ok(loss(g, &pred, &gt)?.total)
            },
            opts,
        )?);
    }
    Ok(out)
}

fn gradients() -> Result<Check> {
    let (prim, prim_abs, np) = worst(&primitive_reports()?);
    let (e2e, e2e_abs, ne) = worst(&end_to_end_reports()?);
    Ok((
        prim <= 1e-4 && e2e <= 1e-3,
        format!(
            "primitives max rel {prim:.2e} (<= 1e-4, abs {prim_abs:.1e}, {np} entries), end-to-end max rel {e2e:.2e} (<= 1e-3, abs {e2e_abs:.1e}, {ne} entries)"
        ),
    ))
}

fn distributions() -> Result<Check> {
    let mut r = rng(21);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let k = r.random_range(2..300);
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-20.0..20.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut g = Graph::<f64>::new();
        let zv = g.constant(Tensor::new(vec![k], z.clone())?);
        let ps = student_dist(&mut g, zv, 0.1)?;
        let pt = teacher_dist(&z, &c, 0.04)?;
        worst_sum = worst_sum.max((g.value(ps).data().iter().sum::<f64>() - 1.0).abs());
        worst_sum = worst_sum.max((pt.iter().sum::<f64>() - 1.0).abs());
    }

    let bcfg = BackboneConfig::default();
    let cfg = PretextConfig { k: 16, hidden: 32, ..Default::default() };
    let mut student = ParamStore::<f32>::new();
    let net = PretextNet::new(&bcfg, &cfg, &mut student, &mut rng(22))?;
    let teacher = student.clone();
    let mut g = Graph::new();
    let ps_bound = student.bind(&mut g, true);
    let pt_bound = teacher.bind(&mut g, false);
    let x = g.constant(Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut rng(23)));
    let zt = net.logits(&mut g, &pt_bound, x)?;
    let zt_vals = g.value(zt).data().to_vec();
    let zs = net.logits(&mut g, &ps_bound, x)?;
    let ps = student_dist(&mut g, zs, cfg.tau_s)?;
    let pt = teacher_dist(&zt_vals, &[0.0; 16], cfg.tau_t)?;
    let l = pretext_loss(&mut g, &pt, ps)?;
    let grads = g.backward(l)?;
    let teacher_grad: f64 = pt_bound
        .vars()
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|t| t.data().iter().map(|&x| (x as f64).abs()))
        .fold(0.0, |a, x| a + x);
    let teacher_zero = teacher_grad == 0.0 && pt_bound.vars().iter().all(|&v| !g.requires_grad(v));

    let mut gibbs_violations = 0;
    for _ in 0..1000 {
        let k = r.random_range(2..64);
        let a: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let (pt, ps) = (softmax_t(&a, 1.0)?, softmax_t(&b, 1.0)?);
        if pretext_loss_value(&pt, &ps) < entropy(&pt) - 1e-12 {
            gibbs_violations += 1;
        }
    }
    Ok((
        worst_sum <= 1e-6 && teacher_zero && gibbs_violations == 0,
        format!("max |sum - 1| {worst_sum:.1e}, teacher |grad| {teacher_grad}, Gibbs violations {gibbs_violations}/1000"),
    ))
}

fn schedule() -> Result<Check> {
    let t = 1000;
    let (l0, lt, lm) = (cosine_lambda(0, t, 0.996), cosine_lambda(t, t, 0.996), cosine_lambda(t / 2, t, 0.996));
    let anchors = (l0 - 0.996).abs() <= 1e-9 && (lt - 1.0).abs() <= 1e-9 && (lm - 0.998).abs() <= 1e-9;
    let mut r = rng(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..40);
        let lambda = r.random_range(0.0..=1.0);
        let s = Tensor::<f64>::randn([n], 2.0, &mut r);
        let t0 = Tensor::<f64>::randn([n], 2.0, &mut r);
        let (mut teacher, mut student) = (ParamStore::new(), ParamStore::new());
        teacher.add("w", t0.clone());
        student.add("w", s.clone());
        ema_update(&mut teacher, &student, lambda)?;
        let t1 = teacher.by_name("w").expect("w");
        for i in 0..n {
            let before = (t0.data()[i] - s.data()[i]).abs();
            let after = (t1.data()[i] - s.data()[i]).abs();
            worst = worst.max(after - lambda * before);
        }
    }
    Ok((
        anchors && worst <= 1e-12,
        format!("lambda(0) {l0}, lambda(T) {lt}, lambda(T/2) {lm}, contraction excess {worst:.1e}"),
    ))
}

fn metrics_oracle() -> Result<Check> {
    let mut r = rng(41);
    let mut mismatches = 0;
    for _ in 0..200 {
        let density = r.random_range(0.0..1.0);
        let pred: Vec<bool> = (0..256).map(|_| r.random_bool(density)).collect();
        let gt: Vec<bool> = (0..256).map(|_| r.random_bool(0.3)).collect();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                match (pred[y * 16 + x], gt[y * 16 + x]) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
        let c = confusion(&pred, &gt)?;
        let union = tp + fp + fn_;
        let want_iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        let want_f1 = if union == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let want_acc = (tp + tn) as f64 / 256.0;
        if c != (ConfusionCounts { tp, tn, fp, fn_ }) || iou(&c) != want_iou || f1(&c) != want_f1 || accuracy(&c) != want_acc
        {
            mismatches += 1;
        }
    }
    let hand_f1 = f1(&ConfusionCounts { tp: 3, tn: 0, fp: 1, fn_: 1 });
    let hand_iou = iou(&ConfusionCounts { tp: 3, tn: 0, fp: 1, fn_: 2 });
    Ok((
        mismatches == 0 && hand_f1 == 0.75 && hand_iou == 0.5,
        format!("{mismatches}/200 mismatches, F1(3,1,1) {hand_f1}, IoU(3,1,2) {hand_iou}"),
    ))
}

fn shapes() -> Result<Check> {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f32>::new();
    let net = Segmenter::new(&cfg, &mut store, &mut rng(51))?;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng(52)));
    let feats = net.backbone.forward(&mut g, &p, x)?;
    let enc = net.pixel_decoder.forward(&mut g, &p, &feats)?;
    let mut ok = true;
    let mut sides = Vec::new();
    for (i, side) in [16, 8, 4, 2].into_iter().enumerate() {
        let f = g.shape(feats.levels[i]).to_vec();
        let d = g.shape(enc.levels[i]).to_vec();
        ok &= f == [cfg.backbone.stage_channels[i], side, side] && d == [cfg.head.c_d, side, side];
        sides.push(f[1]);
    }
    let pred = net.forward(&mut g, &p, x)?;
    let n = cfg.head.n_queries;
    ok &= g.shape(pred.e_pixel) == [cfg.head.c_e, 64, 64];
    ok &= g.shape(pred.mask_logits) == [n, 64 * 64] && g.shape(pred.class_logits) == [n];
    ok &= pred.intermediate.len() == 4 && pred.intermediate.iter().all(|&m| g.shape(m) == [n, 64 * 64]);
    ok &= pred.consumed_levels == [3, 2, 1, 0];
    let mut bstore = ParamStore::<f32>::new();
    let bb = Backbone::new(&cfg.backbone, &mut bstore, "backbone", &mut rng(53))?;
    let mut g2 = Graph::new();
    let bp = bstore.bind(&mut g2, false);
    let odd = g2.constant(Tensor::zeros([3, 48, 64]));
    ok &= bb.forward(&mut g2, &bp, odd).is_err();
    Ok((ok, format!("F/D sides {sides:?}, {} decoder layers reading {:?}", pred.intermediate.len(), pred.consumed_levels)))
}

fn oracle_argmin(rows: &[Vec<f64>], classes: &[f64], gt: &[f64]) -> usize {
    let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let cost = |i: usize| {
        let bce: f64 =
            rows[i].iter().zip(gt).map(|(&m, &y)| -(y * clamp(sig(m)).ln() + (1.0 - y) * clamp(1.0 - sig(m)).ln())).sum();
        -clamp(sig(classes[i])).ln() + bce / gt.len() as f64
    };
    let costs: Vec<f64> = (0..rows.len()).map(cost).collect();
    (0..rows.len()).fold(0, |best, i| if costs[i] < costs[best] { i } else { best })
}

fn matching() -> Result<Check> {
    let mut r = rng(61);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=8);
        let hw = r.random_range(1..=64);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..hw).map(|_| r.random_range(-6.0..6.0)).collect()).collect();
        let classes: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let gt: Vec<f64> = (0..hw).map(|_| r.random_bool(0.4) as u8 as f64).collect();
        if match_query(&rows.concat(), &classes, &gt)? != oracle_argmin(&rows, &classes, &gt) {
            mismatches += 1;
        }
    }
    let gt = [1.0, 0.0, 1.0, 0.0];
    let row = [0.3, -0.2, 1.0, 0.5];
    let masks: Vec<f64> = [[2.0; 4], row, [-3.0; 4], row, row].concat();
    let classes = [-5.0, 0.2, -5.0, 0.2, 0.2];
    let picks: Vec<usize> = (0..5).map(|_| match_query(&masks, &classes, &gt)).collect::<Result<_>>()?;
    let ties = picks.iter().all(|&i| i == 1);
    Ok((mismatches == 0 && ties, format!("{mismatches}/100 mismatches, tie picks {picks:?}")))
}

fn dataset(seed: u64, n: usize, dir: &std::path::Path) -> Result<pvseg_core::Manifest> {
    generate_synthetic(&SyntheticSceneSpec::default(), seed, n, dir)
}

fn pretext_smoke() -> Result<Check> {
    let dir = tempfile::tempdir().map_err(|e| pvseg_core::Error::Data(e.to_string()))?;
    let manifest = dataset(1, 64, dir.path())?;
    let images: Vec<Tensor<f32>> = load_fold(&manifest, None)?.into_iter().map(|s| s.image).collect();
    let cfg = RunConfig::default();
    let out = pretrain(&images, &cfg.backbone, &cfg.pretext, cfg.seed, |_| Ok(()))?;
    let ratio = running_loss_ratio(&out.log, 20).unwrap_or(f64::NAN);
    let floor = 0.5 * (cfg.pretext.k as f64).ln();
    let min_entropy = out.log.iter().map(|r: &PretextLogRow| r.teacher_entropy).fold(f64::INFINITY, f64::min);
    Ok((
        out.log.len() == 200 && ratio <= 0.8 && min_entropy >= floor,
        format!(
            "{} steps on {} images, loss ratio {ratio:.4} (<= 0.8), min teacher entropy {min_entropy:.4} (>= {floor:.4})",
            out.log.len(),
            images.len()
        ),
    ))
}

struct Folds {
    train: Vec<Sample>,
    val: Vec<Sample>,
    _dir: tempfile::TempDir,
}

fn downstream_folds() -> Result<Folds> {
    let dir = tempfile::tempdir().map_err(|e| pvseg_core::Error::Data(e.to_string()))?;
    let manifest = dataset(2, 256, dir.path())?;
    Ok(Folds {
        train: load_fold(&manifest, Some(Split::Train))?,
        val: load_fold(&manifest, Some(Split::Val))?,
        _dir: dir,
    })
}

fn downstream_smoke(folds: &Folds) -> Result<Check> {
    let cfg = RunConfig::default();
    let model = TrainedModel::new(&cfg.model(), cfg.seed)?;
    let out = train(model, &folds.train, &folds.val, &cfg.train, cfg.seed, |_| Ok(()))?;
    let v = out.final_val_iou.unwrap_or(f64::NAN);
    Ok((v >= 0.70, format!("{} steps on {} train images, val IoU {v:.4} (>= 0.70)", out.log.len(), folds.train.len())))
}

fn val_iou(folds: &Folds, seed: u64, init: Option<AugmentationSpec>) -> Result<f64> {
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.train = TrainConfig { steps: 500, val_every: 0, ..cfg.train };
    let mut model = TrainedModel::new(&cfg.model(), seed)?;
    if let Some(augment) = init {
        cfg.pretext = PretextConfig { steps: 500, augment, ..cfg.pretext };
        let images: Vec<Tensor<f32>> = folds.train.iter().map(|s| s.image.clone()).collect();
        let pre = pretrain(&images, &cfg.backbone, &cfg.pretext, seed, |_| Ok(()))?;
        model.init_backbone(&pre.teacher.to_checkpoint(None))?;
    }
    Ok(train(model, &folds.train, &folds.val, &cfg.train, seed, |_| Ok(()))?.final_val_iou.unwrap_or(f64::NAN))
}

fn pretext_benefit(folds: &Folds) -> Result<Check> {
    let (mut random, mut all, mut none) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        random.push(val_iou(folds, seed, None)?);
        all.push(val_iou(folds, seed, Some(AugmentationSpec::default()))?);
        none.push(val_iou(folds, seed, Some(AugmentationSpec::none()))?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, a, n) = (mean(&random), mean(&all), mean(&none));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    Ok((
        a >= r - 0.01 && a >= n - 0.01,
        format!(
            "mean val IoU over seeds 0-2: all-augmentation pretext {a:.4} [{}], random {r:.4} [{}], no-augmentation pretext {n:.4} [{}]",
            fmt(&all),
            fmt(&random),
            fmt(&none)
        ),
    ))
}

fn determinism(folds: &Folds) -> Result<Check> {
    let cfg = RunConfig::default();
    let tcfg = TrainConfig { steps: 10, val_every: 5, ..cfg.train.clone() };
    let run_train = || -> Result<_> {
        let out = train(TrainedModel::new(&cfg.model(), 3)?, &folds.train, &folds.val, &tcfg, 3, |_| Ok(()))?;
        let bits: Vec<(u64, Option<u64>)> = out.log.iter().map(|r| (r.loss.to_bits(), r.val_iou.map(f64::to_bits))).collect();
        Ok((bits, out.model.to_checkpoint().encode()))
    };
    let pcfg = PretextConfig { steps: 10, ..cfg.pretext.clone() };
    let images: Vec<Tensor<f32>> = folds.train.iter().take(16).map(|s| s.image.clone()).collect();
    let run_pretext = || -> Result<_> {
        let out = pretrain(&images, &cfg.backbone, &pcfg, 3, |_| Ok(()))?;
        let bits: Vec<u64> = out.log.iter().map(|r| r.loss.to_bits()).collect();
        Ok((bits, out.teacher.to_checkpoint(None).encode()))
    };
    let (t1, t2) = (run_train()?, run_train()?);
    let (p1, p2) = (run_pretext()?, run_pretext()?);
    Ok((
        t1 == t2 && p1 == p2 && t1.0.len() == 10 && p1.0.len() == 10,
        format!(
            "train logs {} checkpoints {}; pretext logs {} checkpoints {}",
            if t1.0 == t2.0 { "identical" } else { "differ" },
            if t1.1 == t2.1 { "identical" } else { "differ" },
            if p1.0 == p2.0 { "identical" } else { "differ" },
            if p1.1 == p2.1 { "identical" } else { "differ" },
        ),
    ))
}

struct Gate {
    filters: Vec<String>,
    failed: usize,
}

impl Gate {
    fn selected(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<Check>) {
        if !self.selected(name) {
            return;
        }
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        self.failed += !pass as usize;
    }
}

/// Arguments not starting with `-` select criteria by substring.
fn main() {
    let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut gate = Gate { filters, failed: 0 };
    gate.run("gradient suite", gradients);
    gate.run("distribution and normalization", distributions);
    gate.run("EMA and schedule", schedule);
    gate.run("metrics oracle", metrics_oracle);
    gate.run("shape contract", shapes);
    gate.run("matching oracle", matching);
    gate.run("pretext smoke", pretext_smoke);
    let later = ["downstream smoke", "pretext benefit", "determinism"];
    if later.iter().any(|n| gate.selected(n)) {
        match downstream_folds() {
            Ok(folds) => {
                gate.run(later[0], || downstream_smoke(&folds));
                gate.run(later[1], || pretext_benefit(&folds));
                gate.run(later[2], || determinism(&folds));
            }
            Err(e) => {
                for name in later {
                    gate.run(name, || Err(pvseg_core::Error::Data(format!("dataset: {e}"))));
                }
            }
        }
    }
    if gate.failed > 0 {
        std::process::exit(1);
    }
}
