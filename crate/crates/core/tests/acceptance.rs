//! End-to-end acceptance suite. Every criterion runs in sequence inside one test so
//! timings are not distorted by sibling tests; each prints a PASS/FAIL line.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};
use jointseg::data::{
    self, DataLoader, DatasetManifest, Entry, ManifestKind, MiningConfig, Normalization, SaliencyModel,
};
use jointseg::losses::{boundary_iou, edge_weight, structure_loss, weighted_ce, EDGE_KERNEL};
use jointseg::metrics::{self, BETA2};
use jointseg::nn::ops::{host, scalar};
use jointseg::nn::Mode;
use jointseg::similarity::latent_loss;
use jointseg::toy::{self, ToySpec};
use jointseg::trainer::{
    self, FitOptions, Manifests, Model, Scope, StepBatches, Task, TrainConfig, TrainState, UpdateKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// libtest captures print! output of passing tests; writing to the handle keeps the report visible
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

const CPU: &Device = &Device::Cpu;

// ---------------------------------------------------------------- oracles

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stride-1 box mean with replicate padding, straight from the definition.
fn oracle_edge_weight(y: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut sum = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let si = (i + di).clamp(0, h as isize - 1) as usize;
                    let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                    sum += y[si * w + sj];
                }
            }
            let idx = i as usize * w + j as usize;
            out[idx] = 1.0 + 5.0 * (sum / (k * k) as f64 - y[idx]).abs();
        }
    }
    out
}

fn oracle_weighted_ce(logits: &[f64], y: &[f64], omega: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((x, t), o) in logits.iter().zip(y).zip(omega) {
        let p = sigmoid(*x);
        let bce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        num += o * bce;
        den += o;
    }
    num / den
}

fn oracle_boundary_iou(prob: &[f64], y: &[f64], omega: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for ((p, t), o) in prob.iter().zip(y).zip(omega) {
        inter += p * t * o;
        union += (p + t) * o;
    }
    1.0 - (inter + 1.0) / (union - inter + 1.0)
}

fn oracle_structure(logits: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let omega = oracle_edge_weight(y, h, w, EDGE_KERNEL);
    let prob: Vec<f64> = logits.iter().map(|x| sigmoid(*x)).collect();
    oracle_weighted_ce(logits, y, &omega) + oracle_boundary_iou(&prob, y, &omega)
}

/// Mean F over the 255 thresholds `k/256`, recomputing precision and recall at each.
fn oracle_mean_f(pred: &[f32], gt: &[f32]) -> f64 {
    let mut total = 0.0;
    for k in 1..=255u32 {
        let t = k as f64 / 256.0;
        let mut tp = 0.0;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            let on = *p as f64 >= t;
            let fg = *g >= 0.5;
            if on {
                predicted += 1.0;
            }
            if fg {
                actual += 1.0;
            }
            if on && fg {
                tp += 1.0;
            }
        }
        let precision: f64 = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall: f64 = if actual > 0.0 { tp / actual } else { 0.0 };
        let den = BETA2 * precision + recall;
        total += if den > 0.0 {
            (1.0 + BETA2) * precision * recall / den
        } else {
            0.0
        };
    }
    total / 255.0
}

// ---------------------------------------------------------------- helpers

fn map(values: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_slice(values, (1, 1, h, w), CPU).unwrap()
}

fn value(t: &Tensor) -> f64 {
    scalar(t).unwrap()
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let logits = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let y = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    (logits, y)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn toy_config(iters: u64, batch: usize) -> TrainConfig {
    TrainConfig {
        max_iters: iters,
        batch_size: batch,
        image_size: 64,
        checkpoint_interval: 0,
        cache: true,
        ..TrainConfig::default()
    }
}

fn small_toy(root: &Path) -> toy::ToyDataset {
    let spec = ToySpec {
        sod: 8,
        cod: 8,
        connection: 4,
        held_out: 1,
        ..ToySpec::default()
    };
    toy::generate(root, &spec).unwrap()
}

fn manifests(ds: &toy::ToyDataset) -> Manifests {
    Manifests {
        sod: ds.sod.clone(),
        cod: ds.cod.clone(),
        connection: Some(ds.connection.clone()),
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) {
    say!("    {what}: {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    assert!(elapsed <= limit, "{what} took {elapsed:?}, limit {limit:?}");
}

// ---------------------------------------------------------------- criteria

fn loss_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (4, 4);
    for case in 0..20 {
        let (logits, y) = random_case(&mut rng, h * w);
        let omega_rand: Vec<f64> = (0..h * w).map(|_| rng.random_range(1.0..6.0)).collect();
        let prob: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();

        let omega = edge_weight(&map(&y, h, w), EDGE_KERNEL)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (a, b) in omega.iter().zip(oracle_edge_weight(&y, h, w, EDGE_KERNEL)) {
            assert!((a - b).abs() <= 1e-6, "edge_weight case {case}: {a} vs {b}");
        }
        let ce = value(&weighted_ce(&map(&logits, h, w), &map(&y, h, w), &map(&omega_rand, h, w)).unwrap());
        let ce_o = oracle_weighted_ce(&logits, &y, &omega_rand);
        assert!((ce - ce_o).abs() <= 1e-6, "weighted_ce case {case}: {ce} vs {ce_o}");
        let iou = value(&boundary_iou(&map(&prob, h, w), &map(&y, h, w), &map(&omega_rand, h, w)).unwrap());
        let iou_o = oracle_boundary_iou(&prob, &y, &omega_rand);
        assert!(
            (iou - iou_o).abs() <= 1e-6,
            "boundary_iou case {case}: {iou} vs {iou_o}"
        );
        let s = value(&structure_loss(&map(&logits, h, w), &map(&y, h, w)).unwrap());
        let s_o = oracle_structure(&logits, &y, h, w);
        assert!((s - s_o).abs() <= 1e-6, "structure_loss case {case}: {s} vs {s_o}");
    }

    // fixed points
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (_, y) = random_case(&mut rng, n);
    let saturated: Vec<f64> = y.iter().map(|t| if *t == 1.0 { 40.0 } else { -40.0 }).collect();
    let perfect = value(&structure_loss(&map(&saturated, 4, 4), &map(&y, 4, 4)).unwrap());
    assert!(perfect.abs() <= 1e-6, "perfect prediction gives {perfect}");
    for c in [0.0, 1.0] {
        let omega = edge_weight(&map(&[c; 16], 4, 4), EDGE_KERNEL).unwrap();
        assert!(
            host(&omega).unwrap().iter().all(|v| *v == 1.0),
            "constant mask {c} must give unit weights"
        );
    }
    let ones = map(&[1.0; 4], 2, 2);
    let zeros = map(&[0.0; 4], 2, 2);
    assert_eq!(value(&boundary_iou(&ones, &ones, &ones).unwrap()), 0.0);
    assert_eq!(value(&boundary_iou(&zeros, &ones, &ones).unwrap()), 1.0 - 1.0 / 5.0);
    let omega_y = edge_weight(&map(&y, 4, 4), EDGE_KERNEL).unwrap();
    assert_eq!(
        value(&boundary_iou(&map(&y, 4, 4), &map(&y, 4, 4), &omega_y).unwrap()),
        0.0
    );

    within(start.elapsed(), Duration::from_secs(5), "loss oracles");
}

fn gradient_checks() {
    let start = Instant::now();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;

    for _ in 0..3 {
        let (logits, y) = random_case(&mut rng, 16);
        let target = map(&y, 4, 4);
        let var = Var::from_tensor(&map(&logits, 4, 4)).unwrap();
        let loss = structure_loss(var.as_tensor(), &target).unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..16 {
            let eval = |d: f64| {
                let mut x = logits.clone();
                x[i] += d;
                value(&structure_loss(&map(&x, 4, 4), &target).unwrap())
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }

    for _ in 0..3 {
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let va = Var::from_tensor(&Tensor::from_slice(&a, (2, 8), CPU).unwrap()).unwrap();
        let vb = Var::from_tensor(&Tensor::from_slice(&b, (2, 8), CPU).unwrap()).unwrap();
        let loss = latent_loss(va.as_tensor(), vb.as_tensor()).unwrap().value;
        let grads = loss.backward().unwrap();
        for (var, base, other, first) in [(&va, &a, &b, true), (&vb, &b, &a, false)] {
            let analytic = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            for i in 0..16 {
                let eval = |d: f64| {
                    let mut x = base.clone();
                    x[i] += d;
                    let xt = Tensor::from_slice(&x, (2, 8), CPU).unwrap();
                    let ot = Tensor::from_slice(other, (2, 8), CPU).unwrap();
                    let l = if first {
                        latent_loss(&xt, &ot)
                    } else {
                        latent_loss(&ot, &xt)
                    };
                    value(&l.unwrap().value)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[i], numeric));
            }
        }
    }
    say!("    worst relative error {worst:.2e}");
    assert!(worst <= 1e-3, "relative error {worst} exceeds 1e-3");
    within(start.elapsed(), Duration::from_secs(30), "gradient checks");
}

fn shape_contracts() {
    let config = TrainConfig::default();
    let model = Model::new(&config, None).unwrap();
    let images = Tensor::zeros((1, 3, 352, 352), DType::F32, CPU).unwrap();
    let pyramid = model.sod_encoder.forward(&images, Mode::Eval).unwrap();
    let expected = [(256, 88, 88), (512, 44, 44), (1024, 22, 22), (2048, 11, 11)];
    for (i, e) in expected.iter().enumerate() {
        assert_eq!(pyramid.level_shape(i), *e, "pyramid level {}", i + 1);
    }
    let code = model.similarity.embed(&pyramid).unwrap();
    assert_eq!(code.dims(), &[1, 700]);
    let pair = model.decoder.forward(&pyramid, Mode::Eval).unwrap();
    assert_eq!(pair.init_logits.dims(), &[1, 1, 352, 352]);
    assert_eq!(pair.refined_logits.dims(), &[1, 1, 352, 352]);
    let probs = jointseg::nn::ops::sigmoid(&pair.refined_logits).unwrap();
    let conf = model.discriminator.forward(&probs, Mode::Eval).unwrap();
    assert_eq!(conf.dims(), &[1, 1, 44, 44]);
}

fn schedule_contract() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = small_toy(dir.path());
    let config = TrainConfig {
        similarity_interval: 5,
        ..toy_config(16, 2)
    };
    let mut state = TrainState::new(config.clone(), Scope::Joint, None).unwrap();
    let mut sod = DataLoader::new(ds.sod.clone(), config.loader(), 0).unwrap();
    let mut cod = DataLoader::new(ds.cod.clone(), config.loader(), 1).unwrap();
    let mut conn = DataLoader::new(ds.connection.clone(), config.loader(), 2).unwrap();

    let mut logs = Vec::new();
    for _ in 0..16 {
        let plan = state.plan();
        let batch = match plan.task {
            Task::Sod => sod.next_batch().unwrap(),
            Task::Cod => cod.next_batch().unwrap(),
        };
        let connection = plan.similarity.then(|| conn.next_batch().unwrap());
        let batches = StepBatches {
            sod: (plan.task == Task::Sod).then_some(&batch),
            cod: (plan.task == Task::Cod).then_some(&batch),
            connection: connection.as_ref(),
        };
        logs.push(state.train_step(&batches).unwrap());
    }

    let generator: Vec<_> = logs
        .iter()
        .flat_map(|l| l.events.iter())
        .filter(|e| e.kind == UpdateKind::Generator)
        .collect();
    let sod_steps = generator.iter().filter(|e| e.task == Some(Task::Sod)).count();
    let cod_steps = generator.iter().filter(|e| e.task == Some(Task::Cod)).count();
    say!("    generator updates: {sod_steps} SOD, {cod_steps} COD");
    assert_eq!((sod_steps, cod_steps), (12, 4));

    let mut similarity_iters = Vec::new();
    for log in &logs {
        let kinds: Vec<UpdateKind> = log.events.iter().map(|e| e.kind).collect();
        let tail = &kinds[kinds.len() - 2..];
        assert_eq!(
            tail,
            [UpdateKind::Generator, UpdateKind::Discriminator],
            "iteration {}",
            log.iteration
        );
        assert_eq!(log.events[kinds.len() - 1].task, Some(log.task));
        if kinds[0] == UpdateKind::Similarity {
            assert_eq!(kinds.len(), 3);
            similarity_iters.push(log.iteration);
        } else {
            assert_eq!(kinds.len(), 2);
        }
        for e in &log.events {
            match (e.kind, e.task) {
                (UpdateKind::Generator, Some(Task::Sod)) => {
                    assert_eq!(e.grad_norms["alpha_c"], 0.0, "alpha_c gradient on a SOD step");
                    assert_eq!(e.updated, ["alpha_s", "beta"]);
                }
                (UpdateKind::Generator, Some(Task::Cod)) => {
                    assert_eq!(e.grad_norms["alpha_s"], 0.0, "alpha_s gradient on a COD step");
                    assert_eq!(e.updated, ["alpha_c", "beta"]);
                }
                (UpdateKind::Discriminator, _) => {
                    for g in ["alpha_s", "alpha_c", "beta", "theta"] {
                        assert_eq!(e.grad_norms[g], 0.0, "{g} gradient in a discriminator step");
                    }
                    assert_eq!(e.updated, ["gamma"]);
                }
                (UpdateKind::Similarity, _) => {
                    assert_eq!(e.grad_norms["beta"], 0.0);
                    assert_eq!(e.grad_norms["gamma"], 0.0);
                }
                _ => unreachable!(),
            }
        }
    }
    say!("    similarity updates at {similarity_iters:?}");
    assert_eq!(similarity_iters, vec![5, 10, 15]);

    // generator sub-steps in isolation: gamma and the idle encoder stay bit-identical
    for task in [Task::Sod, Task::Cod] {
        let batch = match task {
            Task::Sod => sod.next_batch().unwrap(),
            Task::Cod => cod.next_batch().unwrap(),
        };
        let idle = match task {
            Task::Sod => "alpha_c",
            Task::Cod => "alpha_s",
        };
        let gamma = state.model.store("gamma").snapshot().unwrap();
        let idle_before = state.model.store(idle).snapshot().unwrap();
        let beta = state.model.store("beta").snapshot().unwrap();
        let out = state.generator_update(task, &batch, 1e-3).unwrap();
        assert!(
            out.event.grad_norms["gamma"] > 0.0,
            "adversarial gradient should reach gamma"
        );
        assert_eq!(
            state.model.store("gamma").snapshot().unwrap(),
            gamma,
            "gamma changed in a {task} generator step"
        );
        assert_eq!(
            state.model.store(idle).snapshot().unwrap(),
            idle_before,
            "{idle} changed in a {task} step"
        );
        assert_ne!(
            state.model.store("beta").snapshot().unwrap(),
            beta,
            "decoder did not move"
        );
    }
    within(start.elapsed(), Duration::from_secs(120), "dry run");
}

/// Learning rate and similarity interval of the toy run.
const TOY_LR: f64 = 5e-4;
const TOY_SIMILARITY_INTERVAL: u64 = 10;

fn connection_cosine(model: &Model, ds: &toy::ToyDataset) -> f64 {
    let norm = Normalization::default();
    let entries = &ds.connection.entries;
    let mut total = 0.0;
    for chunk in entries.chunks(8) {
        let samples: Vec<_> = chunk
            .iter()
            .map(|e| data::load_sample(e, (64, 64), &norm).unwrap())
            .collect();
        let batch = data::stack(&samples, (0..chunk.len()).collect()).unwrap();
        let s = model
            .similarity
            .embed(&model.sod_encoder.forward(&batch.images, Mode::Eval).unwrap())
            .unwrap();
        let c = model
            .similarity
            .embed(&model.cod_encoder.forward(&batch.images, Mode::Eval).unwrap())
            .unwrap();
        total += value(&latent_loss(&s, &c).unwrap().value) * chunk.len() as f64;
    }
    total / entries.len() as f64
}

fn held_out_mae(model: &Model, manifest: &DatasetManifest, task: Task) -> f64 {
    let norm = Normalization::default();
    let mut total = 0.0;
    for e in &manifest.entries {
        let s = data::load_sample(e, (64, 64), &norm).unwrap();
        let gt = s.mask.clone().unwrap();
        let batch = data::stack(&[s], vec![0]).unwrap();
        let p = host(&model.predict_probs(&batch.images, task).unwrap()).unwrap();
        total += metrics::mae(&p, &gt).unwrap();
    }
    total / manifest.len() as f64
}

fn toy_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy::generate(&dir.path().join("data"), &ToySpec::default()).unwrap();
    let total = ds.sod.len() + ds.cod.len() + ds.connection.len();
    assert_eq!(total, 200);
    let config = TrainConfig {
        base_lr: TOY_LR,
        decay_step: 1_000_000,
        similarity_interval: TOY_SIMILARITY_INTERVAL,
        ..toy_config(300, 4)
    };
    let initial = connection_cosine(&TrainState::new(config.clone(), Scope::Joint, None).unwrap().model, &ds);

    let start = Instant::now();
    let options = FitOptions {
        out_dir: dir.path().join("run"),
        ..FitOptions::default()
    };
    let mut runs = trainer::fit(&manifests(&ds), &config, &options).unwrap();
    let elapsed = start.elapsed();
    let run = runs.remove(0);

    let mean = |rows: &[trainer::HistoryRow]| rows.iter().map(|r| r.l_str).sum::<f64>() / rows.len() as f64;
    let first = mean(&run.history[..10]);
    let last = mean(&run.history[run.history.len() - 10..]);
    let model = &run.state.model;
    let sod_mae = held_out_mae(model, &ds.sod_test, Task::Sod);
    let cod_mae = held_out_mae(model, &ds.cod_test, Task::Cod);
    let held_out = (sod_mae * ds.sod_test.len() as f64 + cod_mae * ds.cod_test.len() as f64)
        / (ds.sod_test.len() + ds.cod_test.len()) as f64;
    let final_cos = connection_cosine(model, &ds);
    say!(
        "    L_str first-10 mean {first:.4}, last-10 mean {last:.4} ({:.1}% lower)",
        100.0 * (1.0 - last / first)
    );
    say!("    held-out MAE {held_out:.4} (SOD {sod_mae:.4}, COD {cod_mae:.4})");
    say!("    connection cosine {initial:.4} -> {final_cos:.4}");
    assert!(last <= 0.5 * first, "structure loss fell from {first} to {last}");
    assert!(held_out <= 0.15, "held-out MAE {held_out}");
    assert!(final_cos < initial, "latent cosine rose from {initial} to {final_cos}");
    within(elapsed, Duration::from_secs(15 * 60), "toy training");
}

fn write_mask(path: &Path, values: &[u8], h: u32, w: u32) {
    GrayImage::from_raw(w, h, values.to_vec()).unwrap().save(path).unwrap();
}

fn metric_fixed_points() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (pred_dir, gt_dir) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred_dir).unwrap();
    fs::create_dir_all(&gt_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (h, w) = (24u32, 32u32);
    for i in 0..6 {
        let (y0, x0) = (rng.random_range(0..12), rng.random_range(0..16));
        let (sh, sw) = (rng.random_range(3..12), rng.random_range(3..16));
        let mask: Vec<u8> = (0..h * w)
            .map(|k| {
                let (y, x) = (k / w, k % w);
                if y >= y0 && y < y0 + sh && x >= x0 && x < x0 + sw {
                    255
                } else {
                    0
                }
            })
            .collect();
        write_mask(&gt_dir.join(format!("img{i}.png")), &mask, h, w);
        write_mask(&pred_dir.join(format!("img{i}.png")), &mask, h, w);
    }
    let report = metrics::evaluate_dirs(&pred_dir, &gt_dir).unwrap();
    assert!(report.errors.is_empty());
    assert_eq!(report.records.len(), 6);
    let m = report.means;
    say!(
        "    pred = gt: MAE {} F {} E {} S {}",
        m.mae,
        m.mean_f,
        m.e_measure,
        m.s_measure
    );
    assert!(m.mae.abs() <= 1e-6);
    for v in [m.mean_f, m.e_measure, m.s_measure] {
        assert!((v - 1.0).abs() <= 1e-6, "{v} is not 1");
    }

    for case in 0..20 {
        let pred: Vec<f32> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<f32> = (0..9).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let got = metrics::mean_f(&pred, &gt, BETA2).unwrap();
        assert_eq!(got, oracle_mean_f(&pred, &gt), "mean_f case {case}");
    }

    // degenerate ground truths
    let pred: Vec<f32> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
    let mean_pred = pred.iter().map(|v| *v as f64).sum::<f64>() / 9.0;
    let fraction_at_least = |t: f64| pred.iter().filter(|p| **p as f64 >= t).count() as f64 / 9.0;
    let sweep = |f: &dyn Fn(f64) -> f64| (1..=255).map(|k| f(k as f64 / 256.0)).sum::<f64>() / 255.0;

    let empty = metrics::evaluate_pair("empty", &pred, &[0.0; 9], (3, 3)).unwrap();
    assert!((empty.s_measure - (1.0 - mean_pred)).abs() <= 1e-12);
    assert!((empty.e_measure - sweep(&|t| 1.0 - fraction_at_least(t))).abs() <= 1e-12);
    assert_eq!(empty.mean_f, 0.0);
    assert!((empty.mae - mean_pred).abs() <= 1e-12);

    let full = metrics::evaluate_pair("full", &pred, &[1.0; 9], (3, 3)).unwrap();
    assert!((full.s_measure - mean_pred).abs() <= 1e-12);
    assert!((full.e_measure - sweep(&fraction_at_least)).abs() <= 1e-12);
    assert!((full.mae - (1.0 - mean_pred)).abs() <= 1e-12);
    within(start.elapsed(), Duration::from_secs(10), "metrics");
}

/// Predicts the first (unnormalized) colour channel as the saliency probability.
struct RedChannel;

impl SaliencyModel for RedChannel {
    fn predict(&mut self, images: &Tensor) -> jointseg::Result<Tensor> {
        Ok(images.narrow(1, 0, 1)?)
    }
}

fn mining_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("img")).unwrap();
    // flat images of these intensities over empty masks: MAE = intensity / 255
    let levels: [u8; 10] = [200, 30, 90, 10, 150, 60, 30, 240, 5, 120];
    let mut cod = Vec::new();
    for (i, v) in levels.iter().enumerate() {
        let image = root.join(format!("img/cod{i}.png"));
        let mask = root.join(format!("img/cod{i}_gt.png"));
        RgbImage::from_pixel(16, 16, Rgb([*v, 0, 0])).save(&image).unwrap();
        GrayImage::from_pixel(16, 16, Luma([0])).save(&mask).unwrap();
        cod.push(Entry {
            image,
            mask: Some(mask),
        });
    }
    let mut sod = Vec::new();
    for i in 0..12 {
        let image = root.join(format!("img/sod{i}.png"));
        let mask = root.join(format!("img/sod{i}_gt.png"));
        RgbImage::from_pixel(16, 16, Rgb([255, 255, 255])).save(&image).unwrap();
        GrayImage::from_pixel(16, 16, Luma([255])).save(&mask).unwrap();
        sod.push(Entry {
            image,
            mask: Some(mask),
        });
    }
    let cod = DatasetManifest::new("cod", ManifestKind::Cod, cod).unwrap();
    let sod = DatasetManifest::new("sod", ManifestKind::Sod, sod).unwrap();
    let config = MiningConfig {
        count: 4,
        seed: 7,
        image_size: 16,
        batch_size: 3,
        normalization: Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        },
    };

    let mut by_level: Vec<usize> = (0..levels.len()).collect();
    by_level.sort_by_key(|i| levels[*i]);
    let expected: Vec<usize> = by_level[..4].to_vec();

    let run = |tag: &str| {
        let (augmented, report) = data::mine_easy_cod_samples(&cod, &sod, &mut RedChannel, &config).unwrap();
        let manifest_path = root.join(format!("aug_{tag}.txt"));
        let report_path = root.join(format!("report_{tag}.json"));
        augmented.write(&manifest_path).unwrap();
        report.write_json(&report_path).unwrap();
        (
            augmented,
            report,
            fs::read(manifest_path).unwrap(),
            fs::read(report_path).unwrap(),
        )
    };
    let (augmented, report, manifest_a, report_a) = run("a");
    let (_, _, manifest_b, report_b) = run("b");

    say!(
        "    selected {:?}, replaced {:?}",
        report.selected_ids,
        report.replaced_ids
    );
    assert_eq!(report.selected_ids, expected);
    for (id, mae) in &report.scored {
        assert!(
            (mae - levels[*id] as f64 / 255.0).abs() <= 1e-6,
            "entry {id} scored {mae}"
        );
    }
    assert_eq!(augmented.len(), sod.len());
    assert_eq!(report.replaced_ids.len(), 4);
    for (dst, src) in report.replaced_ids.iter().zip(&report.selected_ids) {
        assert_eq!(augmented.entries[*dst], cod.entries[*src]);
    }
    let untouched = (0..sod.len()).filter(|i| !report.replaced_ids.contains(i));
    for i in untouched {
        assert_eq!(augmented.entries[i], sod.entries[i]);
    }
    assert_eq!(manifest_a, manifest_b, "augmented manifest differs between runs");
    assert_eq!(report_a, report_b, "mining report differs between runs");
}

fn checkpoint_resume() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_toy(&dir.path().join("data"));
    let (k, n) = (7u64, 20u64);
    let config = TrainConfig {
        similarity_interval: 4,
        flip: true,
        ..toy_config(k + n, 2)
    };

    let straight = trainer::fit(
        &manifests(&ds),
        &config,
        &FitOptions {
            out_dir: dir.path().join("straight"),
            ..FitOptions::default()
        },
    )
    .unwrap()
    .remove(0);

    let split_dir = dir.path().join("split");
    let first = TrainConfig {
        max_iters: k,
        ..config.clone()
    };
    let options = FitOptions {
        out_dir: split_dir.clone(),
        ..FitOptions::default()
    };
    trainer::fit(&manifests(&ds), &first, &options).unwrap();
    let resumed = trainer::fit(
        &manifests(&ds),
        &config,
        &FitOptions {
            resume: Some(split_dir.join(trainer::FINAL_CHECKPOINT)),
            ..options
        },
    )
    .unwrap()
    .remove(0);

    assert_eq!(resumed.history.len(), straight.history.len());
    let bits = |r: &trainer::HistoryRow| {
        (
            r.iter,
            r.task,
            r.l_str.to_bits(),
            r.l_adv.map(f64::to_bits),
            r.l_dis.map(f64::to_bits),
            r.l_latent.map(f64::to_bits),
            r.lr.to_bits(),
        )
    };
    for (a, b) in straight.history[k as usize..]
        .iter()
        .zip(&resumed.history[k as usize..])
    {
        assert_eq!(bits(a), bits(b), "iteration {} diverged", a.iter);
    }
    for g in trainer::GROUPS {
        let a: BTreeMap<_, _> = straight.state.model.store(g).snapshot().unwrap();
        let b: BTreeMap<_, _> = resumed.state.model.store(g).snapshot().unwrap();
        assert!(a == b, "{g} parameters differ after resuming");
    }
    say!("    {n} iterations after resuming at {k} match bit for bit");
}

#[test]
fn acceptance() {
    // deterministic mode: a single worker thread for data loading and kernels
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();

    let criteria: [(&str, fn()); 8] = [
        ("loss oracles", loss_oracles),
        ("gradient checks", gradient_checks),
        ("shape contracts", shape_contracts),
        ("schedule contract", schedule_contract),
        ("toy end-to-end", toy_end_to_end),
        ("metrics fixed points", metric_fixed_points),
        ("mining determinism", mining_determinism),
        ("checkpoint round-trip", checkpoint_resume),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        say!("criterion {} ({name}) ...", i + 1);
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        say!("criterion {} ({name}): {}", i + 1, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
