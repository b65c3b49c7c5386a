//! One function per acceptance criterion. Each returns whether it held and
//! a one-line summary of what was measured.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fapnet::bgm::edge_loss_with_grad;
use fapnet::cfpm::{gate_normalization_error, CfpmFuse, CfpmPropagate, PropagatedFeature};
use fapnet::checkpoint::load_model;
use fapnet::config::RunConfig;
use fapnet::data::{scan_dataset, toy::write_toy_dataset, Split};
use fapnet::graph::Graph;
use fapnet::losses::{detection_loss_with_grad, LossBreakdown, weighted_bce, weighted_bce_with_grad, weighted_iou, weighted_iou_with_grad};
use fapnet::metrics::{dice, e_measure, f_beta, f_measure, mae, pr_curve, s_measure, EvalPair, MetricConfig};
use fapnet::mfam::{AggregatedFeature, Mfam};
use fapnet::network::{Model, ModelConfig, Variant};
use fapnet::nn::ParamStore;
use fapnet::training::{predict_manifest, Batch, TrainConfig, Trainer};
use fapnet::Tensor;

use super::*;

pub struct Check {
    pub ok: bool,
    pub detail: String,
}

fn check(ok: bool, detail: String) -> Check {
    Check { ok, detail }
}

fn randomize(store: &mut ParamStore, prefix: &str, lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_bool(p) as u8 as f64).collect()).unwrap()
}

/// Binary mask holding one random axis-aligned rectangle.
fn blob(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (y0, x0) = (rng.gen_range(0..h - 1), rng.gen_range(0..w - 1));
    let (y1, x1) = (rng.gen_range(y0 + 1..=h), rng.gen_range(x0 + 1..=w));
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (y >= y0 && y < y1 && x >= x0 && x < x1) as u8 as f64
        })
        .collect()
}

pub fn shape_schedule() -> Check {
    let start = Instant::now();
    let model = Model::new(&ModelConfig::desk(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&model.store, false);
    let x = g.input(Tensor::uniform(&[1, 3, 352, 352], 0.0, 1.0, &mut rng));
    let out = model.net.forward(&mut g, x).unwrap();
    let levels: Vec<(usize, usize)> = out
        .pyramid
        .levels
        .iter()
        .map(|&v| {
            let (_, _, h, w) = g.value(v).dims4();
            (h, w)
        })
        .collect();
    let want = [(88, 88), (88, 88), (44, 44), (22, 22), (11, 11)];
    let full = [1, 1, 352, 352];
    let maps_ok = out.maps.iter().all(|&m| g.shape(m) == full);
    let boundary_ok = out.boundary.is_some_and(|b| g.shape(b) == full);
    let secs = start.elapsed().as_secs_f64();
    check(
        levels == want && maps_ok && boundary_ok && secs < 60.0,
        format!("levels {levels:?}, side maps/boundary 352x352: {}, {secs:.1}s", maps_ok && boundary_ok),
    )
}

pub fn gate_normalization() -> Check {
    let cl = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_hull): (f64, f64) = (0.0, 0.0);
    for module in 0..10 {
        let mut store = ParamStore::default();
        let prop = CfpmPropagate::new(&mut store, "p", cl, &mut rng);
        if module > 0 {
            randomize(&mut store, "p.gate", -4.0, 4.0, &mut rng);
        }
        for _ in 0..100 {
            let mut g = Graph::new(&store, false);
            let fused = g.input(Tensor::uniform(&[1, cl, 6, 6], -3.0, 3.0, &mut rng));
            let prev = g.input(Tensor::uniform(&[1, cl, 3, 3], -3.0, 3.0, &mut rng));
            let t = prop.forward(&mut g, fused, PropagatedFeature { value: prev, level: 3 }, 2).unwrap();
            let gates = g.value(t.gates);
            worst_sum = worst_sum.max(gate_normalization_error(gates));
            let (_, _, h, w) = gates.dims4();
            let gd = gates.data();
            for p in 0..h * w {
                worst_sum = worst_sum.max((gd[p] + gd[h * w + p] - 1.0).abs());
            }
            let (o, p1, p2) = (g.value(t.output.value).data(), g.value(t.p1).data(), g.value(t.p2).data());
            for i in 0..o.len() {
                let (lo, hi) = (p1[i].min(p2[i]), p1[i].max(p2[i]));
                worst_hull = worst_hull.max(lo - o[i]).max(o[i] - hi);
            }
        }
    }
    check(
        worst_sum <= 1e-6 && worst_hull <= 1e-6,
        format!("1000 inputs: max |w1+w2-1| = {worst_sum:.2e}, max hull excess = {worst_hull:.2e}"),
    )
}

fn mfam_oracle_error(rng: &mut ChaCha8Rng, inputs: usize) -> f64 {
    let mut store = ParamStore::default();
    let m = Mfam::new(&mut store, "m", 2, 6, 4, false, rng);
    randomize(&mut store, "m.", -0.5, 0.5, rng);
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let f = Tensor::uniform(&[1, 6, 7, 5], -1.0, 1.0, rng);
        let mut g = Graph::new(&store, false);
        let x = g.input(f.clone());
        let y = m.forward(&mut g, x).unwrap();
        worst = worst.max(max_diff(&to_fm(g.value(y.value)), &mfam(&store, &m, &to_fm(&f))));
    }
    worst
}

fn fuse_oracle_error(rng: &mut ChaCha8Rng, inputs: usize) -> f64 {
    let mut store = ParamStore::default();
    let c = CfpmFuse::new(&mut store, "c", 4, rng);
    randomize(&mut store, "c.", -0.5, 0.5, rng);
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let hi = Tensor::uniform(&[1, 4, 3, 4], -1.0, 1.0, rng);
        let lo = Tensor::uniform(&[1, 4, 6, 8], -1.0, 1.0, rng);
        let mut g = Graph::new(&store, false);
        let (h, l) = (g.input(hi.clone()), g.input(lo.clone()));
        let y = c
            .forward(&mut g, AggregatedFeature { value: h, level: 3 }, AggregatedFeature { value: l, level: 2 })
            .unwrap();
        worst = worst.max(max_diff(&to_fm(g.value(y)), &cfpm_fuse(&store, &c, &to_fm(&hi), &to_fm(&lo))));
    }
    worst
}

fn propagate_oracle_error(rng: &mut ChaCha8Rng, inputs: usize) -> f64 {
    let mut store = ParamStore::default();
    let c = CfpmPropagate::new(&mut store, "c", 4, rng);
    randomize(&mut store, "c.", -0.5, 0.5, rng);
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let fused = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, rng);
        let prev = Tensor::uniform(&[1, 4, 3, 3], -1.0, 1.0, rng);
        let mut g = Graph::new(&store, false);
        let (f, p) = (g.input(fused.clone()), g.input(prev.clone()));
        let t = c.forward(&mut g, f, PropagatedFeature { value: p, level: 3 }, 2).unwrap();
        let (want, w1, w2, _, _) = cfpm_propagate(&store, &c, &to_fm(&fused), &to_fm(&prev));
        worst = worst.max(max_diff(&to_fm(g.value(t.output.value)), &want));
        worst = worst.max(max_diff(&to_fm(g.value(t.gates)), &vec![w1, w2]));
    }
    worst
}

/// Runs `inputs` random inputs through each of the three modules, across ten weight draws.
pub fn equation_oracles(inputs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let per = inputs.div_ceil(10);
    let (mut m, mut f, mut p): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10 {
        m = m.max(mfam_oracle_error(&mut rng, per));
        f = f.max(fuse_oracle_error(&mut rng, per));
        p = p.max(propagate_oracle_error(&mut rng, per));
    }
    check(
        m <= 1e-5 && f <= 1e-5 && p <= 1e-5,
        format!("{} inputs each: max error mfam {m:.1e}, fuse {f:.1e}, propagate {p:.1e}", per * 10),
    )
}

/// Largest relative gap between `grad` and central differences of `f` at `x`.
pub fn fd_gap(x: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        let ana = grad.data()[i];
        if ana.abs() < 1e-8 && num.abs() < 1e-8 {
            continue;
        }
        worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()));
    }
    worst
}

pub fn loss_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut oracle, mut fd): (f64, f64) = (0.0, 0.0);
    for trial in 0..20 {
        let size = if trial % 4 == 3 { 40 } else { 8 };
        let x = Tensor::uniform(&[1, 1, size, size], -3.0, 3.0, &mut rng);
        let t = if trial % 2 == 0 {
            binary(&[1, 1, size, size], 0.4, &mut rng)
        } else {
            Tensor::from_vec(&[1, 1, size, size], blob(size, size, &mut rng)).unwrap()
        };
        oracle = oracle.max((weighted_bce(&x, &t).unwrap() - wbce_loop(&x, &t)).abs());
        oracle = oracle.max((weighted_iou(&x, &t).unwrap() - wiou_loop(&x, &t)).abs());
        let p = Tensor::uniform(&[1, 1, 4, 4], 0.01, 0.99, &mut rng);
        let e = binary(&[1, 1, 4, 4], 0.3, &mut rng);
        let (el, _) = edge_loss_with_grad(&p, &e).unwrap();
        oracle = oracle.max((el - edge_bce_loop(&p, &e)).abs());
        if size == 8 {
            let (_, g) = weighted_bce_with_grad(&x, &t).unwrap();
            fd = fd.max(fd_gap(&x, &g, |v| weighted_bce(v, &t).unwrap()));
            let (_, g) = weighted_iou_with_grad(&x, &t).unwrap();
            fd = fd.max(fd_gap(&x, &g, |v| weighted_iou(v, &t).unwrap()));
            let (_, g) = detection_loss_with_grad(&x, &t).unwrap();
            fd = fd.max(fd_gap(&x, &g, |v| fapnet::losses::detection_loss(v, &t).unwrap()));
            let p8 = Tensor::uniform(&[1, 1, 8, 8], 0.02, 0.98, &mut rng);
            let e8 = binary(&[1, 1, 8, 8], 0.3, &mut rng);
            let (_, g) = edge_loss_with_grad(&p8, &e8).unwrap();
            fd = fd.max(fd_gap(&p8, &g, |v| edge_loss_with_grad(v, &e8).unwrap().0));
        }
    }
    let t = binary(&[1, 1, 8, 8], 0.5, &mut rng);
    let ln2 = std::f64::consts::LN_2;
    let half_bce = weighted_bce(&Tensor::zeros(&[1, 1, 8, 8]), &t).unwrap();
    let half_edge = edge_loss_with_grad(&Tensor::full(&[1, 1, 8, 8], 0.5), &t).unwrap().0;
    let uniform = (half_bce - ln2).abs().max((half_edge - ln2).abs());
    check(
        oracle <= 1e-6 && fd <= 1e-3 && uniform <= 1e-6,
        format!("loop-oracle gap {oracle:.1e}, worst FD relative gap {fd:.1e}, |uniform-0.5 BCE - ln2| = {uniform:.1e}"),
    )
}

fn grid_of(v: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h).map(|y| v[y * w..(y + 1) * w].to_vec()).collect()
}

pub fn metric_correctness() -> Check {
    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut brute: f64 = 0.0;
    for trial in 0..50 {
        let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt = if trial % 10 == 9 { vec![0.0; 64] } else { blob(8, 8, &mut rng) };
        let pair = EvalPair::new(&Tensor::from_vec(&[8, 8], pred.clone()).unwrap(), &Tensor::from_vec(&[8, 8], gt.clone()).unwrap()).unwrap();
        brute = brute.max((mae(&pair) - mae_loop(&pred, &gt)).abs());
        let pr = pr_curve(&pair, &cfg);
        for (k, (p, r)) in pr_loop(&pred, &gt).into_iter().enumerate() {
            brute = brute.max((pr.precision[k] - p).abs()).max((pr.recall[k] - r).abs());
        }
        let f = f_measure(&pair, &cfg);
        let fl = f_loop(&pred, &gt, 0.3);
        for k in 0..256 {
            brute = brute.max((f.curve[k] - fl[k]).abs());
        }
        brute = brute.max((f.max - fl.iter().copied().fold(0.0, f64::max)).abs());
        brute = brute.max((f.mean - fl.iter().sum::<f64>() / 256.0).abs());
    }

    let mut dual: f64 = 0.0;
    for trial in 0..100 {
        let pred: Vec<f64> = match trial % 3 {
            0 => (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
            1 => (0..256).map(|_| (rng.gen_range(0.0..1.0f64) * 4.0).floor() / 4.0).collect(),
            _ => blob(16, 16, &mut rng).iter().map(|&v| (0.8 * v + rng.gen_range(0.0..0.2)).min(1.0)).collect(),
        };
        let gt = match trial {
            97 => vec![0.0; 256],
            98 => vec![1.0; 256],
            _ if trial % 2 == 0 => blob(16, 16, &mut rng),
            _ => (0..256).map(|_| rng.gen_bool(0.3) as u8 as f64).collect(),
        };
        let pair = EvalPair::new(&Tensor::from_vec(&[16, 16], pred.clone()).unwrap(), &Tensor::from_vec(&[16, 16], gt.clone()).unwrap()).unwrap();
        let s = s_measure(&pair, &cfg);
        dual = dual.max((s - s_measure_ref(&grid_of(&pred, 16, 16), &grid_of(&gt, 16, 16), 0.5)).abs());
        let e = e_measure(&pair, &cfg);
        let er = e_curve_ref(&pred, &gt);
        for k in 0..256 {
            dual = dual.max((e.curve[k] - er[k]).abs());
        }
        dual = dual.max((e.mean - er.iter().sum::<f64>() / 256.0).abs());
    }

    let gt = Tensor::from_vec(&[16, 16], blob(16, 16, &mut rng)).unwrap();
    let same = EvalPair::new(&gt, &gt).unwrap();
    let (m, fmax, s, e) = (mae(&same), f_measure(&same, &cfg).max, s_measure(&same, &cfg), e_measure(&same, &cfg).mean);
    let identity = m == 0.0 && fmax == 1.0 && s >= 0.99 && e >= 0.99;
    check(
        brute <= 1e-9 && dual <= 1e-6 && identity,
        format!("brute-force gap {brute:.1e}, dual-implementation gap {dual:.1e}, pred=gt: MAE {m}, f-max {fmax}, S {s:.4}, E {e:.4}"),
    )
}

pub fn hand_checked() -> Check {
    let f = f_beta(1.0, 0.5, 0.3);
    let w = weighted_iou(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
    let c = MetricConfig::default();
    check(
        (f - 0.8125).abs() < 1e-12 && (w - 0.4706).abs() < 5e-5 && c.alpha == 0.5 && c.beta_squared == 0.3,
        format!("F_beta(1, 0.5) = {f}, weighted IoU = {w:.6}, alpha = {}, beta^2 = {}", c.alpha, c.beta_squared),
    )
}

/// Desk profile used by the training criteria: full-batch, no augmentation.
pub fn overfit_config(seed: u64, variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.lr = 1e-3;
    c.lr_decay_every = 1000;
    c.augment = false;
    c.epochs = 200;
    c.checkpoint_every = 0;
    c.seed = seed;
    c.model.ablation = variant.config();
    c
}

pub fn toy_set(dir: &Path) -> fapnet::data::DatasetManifest {
    write_toy_dataset(dir, 4, 64, 0).unwrap();
    scan_dataset(dir, Split::Train).unwrap()
}

pub fn overfit() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_set(&dir.path().join("toy"));
    let mut trainer = Trainer::new(overfit_config(0, Variant::E), manifest.clone(), None).unwrap();
    let out = trainer.run(&dir.path().join("run")).unwrap();
    let (first, last) = (out.history[0].loss.total, out.history.last().unwrap().loss.total);
    let preds = predict_manifest(&trainer.model, &manifest, 64).unwrap();
    let dices: Vec<f64> = preds.iter().map(|(s, m)| dice(&EvalPair::new(m, &s.mask).unwrap())).collect();
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / first;
    check(
        ratio < 0.1 && mean >= 0.9 && secs <= 300.0 && out.history.len() <= 200,
        format!("{} steps: loss {first:.4} -> {last:.4} (ratio {ratio:.3}), dice {mean:.4}, {secs:.0}s", out.history.len()),
    )
}

/// Per seed `(A3, E)` training-set losses after the overfit schedule.
pub fn ablation_losses(seeds: &[u64]) -> Vec<(LossBreakdown, LossBreakdown)> {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_set(&dir.path().join("toy"));
    seeds
        .iter()
        .map(|&seed| {
            let run = |v: Variant| {
                let mut t = Trainer::new(overfit_config(seed, v), manifest.clone(), None).unwrap();
                t.run(&dir.path().join(format!("{v}_{seed}"))).unwrap();
                t.train_set_loss().unwrap()
            };
            (run(Variant::A3), run(Variant::E))
        })
        .collect()
}

pub fn ablation_ordering() -> Check {
    let losses = ablation_losses(&[0, 1, 2, 3, 4]);
    let wins = losses.iter().filter(|(a3, e)| e.total <= a3.total).count();
    let list: Vec<String> = losses
        .iter()
        .map(|(a, e)| {
            let det: f64 = e.det.iter().sum();
            format!("E {:.4} (det {det:.4} + edge {:.4}) / A3 {:.4}", e.total, e.edge, a.total)
        })
        .collect();
    check(wins >= 4, format!("E <= A3 in {wins}/5 seeds: {}", list.join(", ")))
}

pub fn parameter_count() -> Check {
    let n = Model::new(&ModelConfig::paper(), 0).unwrap().num_parameters();
    check((25_000_000..=40_000_000).contains(&n), format!("res2net50-shaped full model: {n} trainable parameters"))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn round_trips(binary: &str) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let manifest = toy_set(&root);

    let mut cfg = overfit_config(1, Variant::E);
    cfg.epochs = 2;
    let mut trainer = Trainer::new(cfg, manifest.clone(), None).unwrap();
    trainer.run(&dir.path().join("run")).unwrap();
    let ckpt = dir.path().join("run/checkpoints/final.safetensors");
    let loaded = load_model(&ckpt).unwrap();
    let batch = Batch::from_samples(&[fapnet::data::load_sample(&manifest.pairs[0], 64).unwrap()]).unwrap();
    let (a, b) = (trainer.model.forward(&batch.images).unwrap(), loaded.forward(&batch.images).unwrap());
    let ckpt_ok = a.maps.iter().zip(&b.maps).all(|(x, y)| bits(x) == bits(y))
        && bits(a.boundary.as_ref().unwrap()) == bits(b.boundary.as_ref().unwrap());

    let rescan = scan_dataset(&root, Split::Train).unwrap();
    let manifest_ok = rescan == manifest && rescan.to_tsv() == manifest.to_tsv();

    let run_cfg = RunConfig::toy(dir.path());
    let snapshot_ok = RunConfig::parse(&run_cfg.to_toml()).unwrap() == run_cfg;

    let out = Command::new(binary)
        .args(["eval", "--pred-dir"])
        .arg(root.join("GT"))
        .arg("--gt-dir")
        .arg(root.join("GT"))
        .arg("--report")
        .arg(dir.path().join("report"))
        .output()
        .unwrap();
    let last = String::from_utf8_lossy(&out.stdout).lines().last().unwrap_or_default().to_string();
    let eval_ok = out.status.success() && last.ends_with(",0.000000");
    check(
        ckpt_ok && manifest_ok && snapshot_ok && eval_ok,
        format!("checkpoint bit-identical {ckpt_ok}, manifest stable {manifest_ok}, config re-parse {snapshot_ok}, eval pred=gt `{last}`"),
    )
}
