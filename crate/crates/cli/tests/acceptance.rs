//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p pvnet-cli --test acceptance -- 2 5`.
//! The reference training run (criterion 6) is cached under the target tmp dir
//! and reused when its recorded configuration matches; set
//! `PVNET_ACCEPTANCE_FRESH=1` to force a new run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pvnet_core::data::{
    default_profiles, generate_dataset, generate_phantom, postprocess, preprocess, Manifest, Rvol,
    VolumeCase, Voxels,
};
use pvnet_core::gradcheck::{run_suite, SuiteOptions};
use pvnet_core::losses::{
    cross_entropy, generalized_dice_loss, kl_divergence, total_loss, LossWeights,
};
use pvnet_core::metrics::dice_score;
use pvnet_core::model::{
    forward_infer, vnet_forward, Ctx, Gaussian, InferMode, ModelConfig, ModelParams, Modulation,
};
use pvnet_core::nn::spectral::spectral_normalize_tensor;
use pvnet_core::nn::{SpectralMode, SpectralState};
use pvnet_core::train::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use pvnet_core::train::{
    adam_step, evaluate_cases, initial_params, load_checkpoint, load_run_data, lr_schedule,
    mean_kl, read_log, train, train_on, AdamState, Progress, TrainConfig,
};
use pvnet_core::{Graph, Tensor};

type Outcome = Result<String, String>;

struct Line {
    id: usize,
    name: &'static str,
    outcome: Outcome,
    /// Failure caused only by the wall-clock budget.
    budget_only: bool,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn reference_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        num_classes: 4,
        latent_dim: 64,
        base_width: 8,
    }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let budget = Duration::from_secs(300);
    let start = Instant::now();
    let report = run_suite(&SuiteOptions::tiny()).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = report
        .entries
        .iter()
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    ensure(report.passed(), || report.render())?;
    ensure(elapsed <= budget, || {
        format!("took {elapsed:.1?}, budget 5 min")
    })?;
    Ok(format!(
        "{} checks, worst rel err {worst:.2e}, {elapsed:.1?}",
        report.entries.len()
    ))
}

// ---------------------------------------------------------------- 2

fn graph_kl(qm: &[f64], ql: &[f64], pm: &[f64], pl: &[f64]) -> Result<f64, String> {
    let n = qm.len();
    let mut g = Graph::<f64>::new();
    let mut var = |v: &[f64]| -> Result<_, String> {
        Ok(g.constant(Tensor::from_vec(&[1, n], v.to_vec()).map_err(err)?))
    };
    let q = Gaussian {
        mean: var(qm)?,
        logvar: var(ql)?,
    };
    let p = Gaussian {
        mean: var(pm)?,
        logvar: var(pl)?,
    };
    let kl = kl_divergence(&mut g, &q, &p).map_err(err)?;
    g.value(kl).item().map_err(err)
}

/// `E_q[log q(z) − log p(z)]` by direct sampling.
fn monte_carlo_kl(
    qm: &[f64],
    ql: &[f64],
    pm: &[f64],
    pl: &[f64],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let log_density = |z: f64, m: f64, lv: f64| -0.5 * (lv + (z - m).powi(2) / lv.exp());
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut s = 0.0;
        for d in 0..qm.len() {
            let eps: f64 = StandardNormal.sample(rng);
            let z = qm[d] + (0.5 * ql[d]).exp() * eps;
            s += log_density(z, qm[d], ql[d]) - log_density(z, pm[d], pl[d]);
        }
        acc += s;
    }
    acc / samples as f64
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = |n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        let n = 1 + pair % 4;
        let (qm, ql) = (draw(n, -1.5, 1.5, &mut rng), draw(n, -1.0, 1.0, &mut rng));
        let (pm, pl) = (draw(n, -1.5, 1.5, &mut rng), draw(n, -1.0, 1.0, &mut rng));
        let exact = graph_kl(&qm, &ql, &pm, &pl)?;
        let mc = monte_carlo_kl(&qm, &ql, &pm, &pl, 1_000_000, &mut rng);
        let rel = (exact - mc).abs() / mc.abs().max(1e-12);
        worst = worst.max(rel);
        ensure(rel <= 0.02, || {
            format!("pair {pair}: closed form {exact:.6}, sampled {mc:.6}")
        })?;
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let (qm, ql) = (draw(n, -5.0, 5.0, &mut rng), draw(n, -8.0, 8.0, &mut rng));
        let (pm, pl) = (draw(n, -5.0, 5.0, &mut rng), draw(n, -8.0, 8.0, &mut rng));
        let kl = graph_kl(&qm, &ql, &pm, &pl)?;
        ensure(kl >= -1e-9, || format!("negative KL {kl}"))?;
        let same = graph_kl(&qm, &ql, &qm, &ql)?;
        ensure(same.abs() <= 1e-12, || format!("KL(q, q) = {same}"))?;
    }
    Ok(format!(
        "100 pairs vs 1e6 samples, worst rel err {worst:.4}"
    ))
}

// ---------------------------------------------------------------- 3

fn identity_modulation() -> Outcome {
    let cfg = reference_model();
    let mut params =
        ModelParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let image = Tensor::<f32>::uniform(&[2, 1, 32, 32, 32], 0.0, 1.0, &mut rng).map_err(err)?;
    let mut ctx = Ctx::infer(&mut params);
    let x = ctx.g.constant(image);
    let plain = vnet_forward(&mut ctx, x, None).map_err(err)?;
    let m = Modulation::identity(&mut ctx, 2).map_err(err)?;
    let modulated = vnet_forward(&mut ctx, x, Some(&m)).map_err(err)?;
    let (a, b) = (ctx.g.value(plain), ctx.g.value(modulated));
    let differing = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count();
    ensure(differing == 0, || format!("{differing} logits differ"))?;
    Ok(format!("{} logits bitwise equal", a.numel()))
}

// ---------------------------------------------------------------- 4

fn top_singular_value(t: &Tensor<f32>) -> f64 {
    let rows = t.shape()[0];
    let cols = t.numel() / rows;
    let data: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    DMatrix::from_row_slice(rows, cols, &data)
        .singular_values()
        .max()
}

fn spectral_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut range = (f64::MAX, f64::MIN);
    let mut check =
        |w: &Tensor<f32>, state: &mut SpectralState<f32>, iterations: usize, what: &str| {
            state.iterations = iterations;
            let (normed, _) =
                spectral_normalize_tensor(w, state, SpectralMode::Update).map_err(err)?;
            let s = top_singular_value(&normed);
            range = (range.0.min(s), range.1.max(s));
            checked += 1;
            ensure((0.98..=1.02).contains(&s), || {
                format!("{what}: top singular value {s:.4} after {iterations} iterations")
            })
        };
    for (rows, cols) in [(1, 7), (4, 8), (8, 27), (16, 16), (32, 64), (64, 128)] {
        for _ in 0..5 {
            let w = Tensor::<f32>::randn(&[rows, cols], 0.0, 1.0, &mut rng).map_err(err)?;
            let mut state = SpectralState::new(rows, &mut rng);
            check(&w, &mut state, 20, &format!("random {rows}x{cols}"))?;
        }
    }
    // Freshly initialised layer weights can have a narrow gap between their top two
    // singular values, so they get more iterations than the random matrices.
    let params = ModelParams::<f32>::init(reference_model(), &mut rng).map_err(err)?;
    for (name, state) in params.spectral() {
        let w = params
            .get(name)
            .ok_or_else(|| format!("no weight {name}"))?;
        check(w, &mut state.clone(), 50, name)?;
    }
    Ok(format!(
        "{checked} weights, top singular values in [{:.4}, {:.4}]",
        range.0, range.1
    ))
}

// ---------------------------------------------------------------- 5

fn loss_oracles() -> Outcome {
    let close = |a: f64, b: f64, tol: f64, what: &str| {
        ensure((a - b).abs() <= tol, || {
            format!("{what}: got {a}, expected {b}")
        })
    };
    // Uniform logits over four classes.
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 4, 2, 2, 2]).map_err(err)?);
    let mut hot = vec![0.0; 32];
    for v in 0..8 {
        hot[(v % 4) * 8 + v] = 1.0;
    }
    let onehot = g.constant(Tensor::from_vec(&[1, 4, 2, 2, 2], hot).map_err(err)?);
    let ce = cross_entropy(&mut g, logits, onehot).map_err(err)?;
    close(
        g.value(ce).item().map_err(err)?,
        4f64.ln(),
        1e-12,
        "uniform CE",
    )?;

    // Two balanced classes predicted at 0.5 everywhere.
    let mut g = Graph::<f64>::new();
    let probs = g.constant(Tensor::full(&[1, 2, 2, 2, 2], 0.5).map_err(err)?);
    let mut hot = vec![0.0; 16];
    for v in 0..8 {
        hot[if v < 4 { v } else { 8 + v }] = 1.0;
    }
    let onehot_t = Tensor::from_vec(&[1, 2, 2, 2, 2], hot).map_err(err)?;
    let onehot = g.constant(onehot_t.clone());
    let gdl = generalized_dice_loss(&mut g, probs, onehot, 1e-6).map_err(err)?;
    close(g.value(gdl).item().map_err(err)?, 0.5, 1e-5, "half GDL")?;

    let mut g = Graph::<f64>::new();
    let probs = g.constant(onehot_t.clone());
    let onehot = g.constant(onehot_t);
    let gdl = generalized_dice_loss(&mut g, probs, onehot, 1e-6).map_err(err)?;
    close(g.value(gdl).item().map_err(err)?, 0.0, 1e-6, "perfect GDL")?;

    let mut g = Graph::<f64>::new();
    let seg = g.constant(Tensor::scalar(0.3));
    let kl = g.constant(Tensor::scalar(0.02));
    let total = total_loss(&mut g, seg, kl, &LossWeights::default()).map_err(err)?;
    close(g.value(total).item().map_err(err)?, 0.5, 1e-12, "total")?;
    Ok("CE ln 4, GDL 0.5 and 0, total 0.5".into())
}

// ---------------------------------------------------------------- 6

const REFERENCE_CASES: usize = 50;
const PREFIX_STEPS: u64 = 10;

#[derive(Default)]
struct Reference {
    checkpoint: Option<PathBuf>,
    /// Failures other than the time budget.
    hard: Vec<String>,
    over_budget: Option<String>,
    notes: Vec<String>,
}

fn ensure_reference_data(dir: &Path) -> Result<(), String> {
    let wanted = |m: &Manifest| m.size == 32 && m.classes == 4 && m.seed == 0;
    if let Ok(m) = Manifest::load(dir) {
        if wanted(&m) && m.cases.len() == REFERENCE_CASES {
            return Ok(());
        }
    }
    let _ = fs::remove_dir_all(dir);
    fs::create_dir_all(dir).map_err(err)?;
    generate_dataset(dir, REFERENCE_CASES, 32, 4, 0).map_err(err)?;
    Ok(())
}

fn reference_config(data: &Path, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::new(data, out);
    cfg.model = reference_model();
    cfg.seed = 0;
    cfg
}

/// A finished run whose stored configuration matches `cfg`, with its wall-clock seconds.
fn cached_run(cfg: &TrainConfig) -> Option<f64> {
    if std::env::var_os("PVNET_ACCEPTANCE_FRESH").is_some() {
        return None;
    }
    let ckpt = load_checkpoint(&cfg.out_dir.join("final.ckpt")).ok()?;
    let stored = ckpt.train?;
    let same = TrainConfig {
        data_dir: cfg.data_dir.clone(),
        out_dir: cfg.out_dir.clone(),
        resume: None,
        ..stored
    } == *cfg;
    if !same || ckpt.progress.epoch != cfg.epochs {
        return None;
    }
    let summary = fs::read_to_string(cfg.out_dir.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&summary).ok()?;
    v["elapsed_secs"].as_f64()
}

fn reference_run() -> Reference {
    let mut r = Reference::default();
    if let Err(e) = reference_run_inner(&mut r) {
        r.hard.push(e);
    }
    r
}

fn reference_run_inner(r: &mut Reference) -> Result<(), String> {
    let root = work_dir();
    let data = root.join("data");
    ensure_reference_data(&data)?;
    let cfg = reference_config(&data, &root.join("reference"));
    let run_data = load_run_data(&cfg).map_err(err)?;

    let elapsed = match cached_run(&cfg) {
        Some(secs) => {
            r.notes.push("reused cached run".into());
            secs
        }
        None => {
            let _ = fs::remove_dir_all(&cfg.out_dir);
            println!(
                "        training reference model: {} cases, {} epochs",
                run_data.train.len(),
                cfg.epochs
            );
            let outcome = train_on(&cfg, &run_data).map_err(err)?;
            let secs = outcome.elapsed.as_secs_f64();
            let summary =
                serde_json::json!({ "elapsed_secs": secs, "steps": outcome.progress.step });
            fs::write(cfg.out_dir.join("summary.json"), summary.to_string()).map_err(err)?;
            secs
        }
    };
    let final_path = cfg.out_dir.join("final.ckpt");
    r.checkpoint = Some(final_path.clone());
    let minutes = elapsed / 60.0;
    r.notes.push(format!("{minutes:.1} min"));
    if minutes > 60.0 {
        r.over_budget = Some(format!("runtime {minutes:.1} min exceeds 60"));
    }

    let mut params = load_checkpoint(&final_path).map_err(err)?.params;
    let report = evaluate_cases(&mut params, &run_data.held_out).map_err(err)?;
    let mean = report.mean_of_means();
    let cells: Vec<String> = report
        .classes
        .iter()
        .map(|c| format!("{} {}", c.name, c.cell()))
        .collect();
    r.notes
        .push(format!("dice {mean:.1} ({})", cells.join(", ")));
    if mean < 85.0 {
        r.hard.push(format!("mean dice {mean:.1} below 85"));
    }
    for c in &report.classes {
        if c.mean < 75.0 {
            r.hard
                .push(format!("{} dice {:.1} below 75", c.name, c.mean));
        }
    }

    // Rerun a prefix from scratch and compare the loss trace bit for bit.
    let recorded = read_log(&cfg.out_dir.join("train_log.csv")).map_err(err)?;
    let mut prefix_cfg = cfg.clone();
    prefix_cfg.out_dir = root.join("prefix");
    prefix_cfg.max_steps = Some(PREFIX_STEPS);
    let _ = fs::remove_dir_all(&prefix_cfg.out_dir);
    let rerun = train_on(&prefix_cfg, &run_data).map_err(err)?;
    let bitwise = rerun.steps.len() == PREFIX_STEPS as usize
        && rerun.steps.iter().zip(&recorded).all(|(a, b)| {
            a.loss_total.to_bits() == b.loss_total.to_bits()
                && a.loss_seg.to_bits() == b.loss_seg.to_bits()
                && a.loss_kl.to_bits() == b.loss_kl.to_bits()
        });
    if bitwise {
        r.notes
            .push(format!("rerun of {PREFIX_STEPS} steps bitwise identical"));
    } else {
        r.hard
            .push("rerun loss trace differs from the recorded run".into());
    }

    let mut init = initial_params(&cfg).map_err(err)?;
    let before = mean_kl(&mut init, &run_data.train).map_err(err)?;
    let after = mean_kl(&mut params, &run_data.train).map_err(err)?;
    r.notes.push(format!("train KL {before:.4} -> {after:.4}"));
    if after >= before {
        r.hard
            .push(format!("KL did not fall ({before:.4} -> {after:.4})"));
    }
    Ok(())
}

// ---------------------------------------------------------------- 7

fn prior_sampling(checkpoint: Option<&Path>) -> Outcome {
    let (mut params, source) = match checkpoint.and_then(|p| load_checkpoint(p).ok()) {
        Some(c) => (c.params, "trained"),
        None => (
            ModelParams::<f32>::init(reference_model(), &mut ChaCha8Rng::seed_from_u64(7))
                .map_err(err)?,
            "initialised",
        ),
    };
    let case = generate_phantom(70, 32, 3, &default_profiles(3)).map_err(err)?;
    let image = preprocess(&case, 32).map_err(err)?.image;
    let a = forward_infer(&mut params, &image, InferMode::PriorSample(1)).map_err(err)?;
    let b = forward_infer(&mut params, &image, InferMode::PriorSample(2)).map_err(err)?;
    let gap = a.probs.max_abs_diff(&b.probs) as f64;
    ensure(gap > 1e-6, || format!("samples differ by only {gap:e}"))?;
    let m1 = forward_infer(&mut params, &image, InferMode::PriorMean).map_err(err)?;
    let m2 = forward_infer(&mut params, &image, InferMode::PriorMean).map_err(err)?;
    let same = m1
        .logits
        .data()
        .iter()
        .zip(m2.logits.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same && m1.labels == m2.labels, || {
        "prior-mean inference is not repeatable".into()
    })?;
    Ok(format!(
        "{source} model, samples differ by {gap:.2e}, prior mean bitwise repeatable"
    ))
}

// ---------------------------------------------------------------- 8

fn pipeline_and_formats() -> Outcome {
    let mut worst: f64 = 100.0;
    for seed in 0..20 {
        let case = generate_phantom(seed, 32, 3, &default_profiles(3)).map_err(err)?;
        let p = preprocess(&case, 32).map_err(err)?;
        let labels = p.labels.ok_or("labels missing")?;
        let back = postprocess(&labels, &p.record).map_err(err)?;
        let gt = case.labels.as_ref().ok_or("labels missing")?;
        for class in 1..=3u8 {
            let d = dice_score(&back, gt, class).map_err(err)?;
            worst = worst.min(d);
            ensure(d >= 95.0, || {
                format!("seed {seed} class {class}: dice {d:.2}")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = [5, 6, 7];
    let n = 5 * 6 * 7;
    for voxels in [
        Voxels::F32((0..n).map(|_| rng.random_range(-1000.0..1000.0)).collect()),
        Voxels::U8((0..n).map(|_| rng.random_range(0..4)).collect()),
    ] {
        let vol = Rvol {
            shape: dims,
            spacing: [0.7, 0.8, 2.5],
            case_id: "case_rt".into(),
            voxels,
        };
        let bytes = vol.to_bytes().map_err(err)?;
        let back = Rvol::from_bytes(&bytes).map_err(err)?;
        ensure(
            back == vol && back.to_bytes().map_err(err)? == bytes,
            || format!("{:?} volume changed on round trip", vol.voxels.dtype()),
        )?;
    }
    let case = VolumeCase {
        case_id: "x".into(),
        dims,
        spacing: [1.0; 3],
        image: vec![0.0; n],
        labels: None,
    };
    ensure(case.label_rvol().is_none(), || {
        "unexpected label volume".into()
    })?;

    let params = ModelParams::<f32>::init(reference_model(), &mut rng).map_err(err)?;
    let adam = AdamState::new(params.tensors()).map_err(err)?;
    let progress = Progress {
        epoch: 3,
        batch: 1,
        step: 31,
    };
    let bytes = checkpoint_bytes(&params, &adam, None, progress).map_err(err)?;
    let back = checkpoint_from_bytes(&bytes).map_err(err)?;
    let again = checkpoint_bytes(&back.params, &back.adam, None, back.progress).map_err(err)?;
    ensure(back.params == params && again == bytes, || {
        "checkpoint changed on round trip".into()
    })?;
    Ok(format!(
        "worst round-trip dice {worst:.2}, volumes and checkpoint bitwise stable"
    ))
}

// ---------------------------------------------------------------- 9

fn schedule_and_resume() -> Outcome {
    let cfg = TrainConfig::new("d", "o");
    let lrs = [0, 20, 40].map(|e| lr_schedule(e, &cfg));
    for (got, want) in lrs.iter().zip([1e-4, 9e-5, 8.1e-5]) {
        ensure((got - want).abs() <= 1e-15, || {
            format!("lr {got} expected {want}")
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ModelParams::<f32>::init(
        ModelConfig {
            input_size: 16,
            num_classes: 2,
            latent_dim: 4,
            base_width: 2,
        },
        &mut rng,
    )
    .map_err(err)?;
    let before = params.tensors().clone();
    let mut adam = AdamState::new(params.tensors()).map_err(err)?;
    let zeros = before
        .iter()
        .map(|(k, t)| Ok((k.clone(), Tensor::zeros(t.shape())?)))
        .collect::<pvnet_core::Result<_>>()
        .map_err(err)?;
    adam_step(params.tensors_mut(), &zeros, &mut adam, 1e-3, 0.0).map_err(err)?;
    ensure(*params.tensors() == before, || {
        "zero gradient moved the parameters".into()
    })?;

    let data = tempfile::tempdir().map_err(err)?;
    generate_dataset(data.path(), 5, 20, 3, 9).map_err(err)?;
    let (a, b) = (
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
    );
    let mut cfg = TrainConfig::new(data.path(), a.path());
    cfg.model = ModelConfig {
        input_size: 16,
        num_classes: 3,
        latent_dim: 4,
        base_width: 2,
    };
    cfg.batch_size = 2;
    cfg.epochs = 3;
    cfg.checkpoint_every = 1;
    cfg.seed = 9;
    let full = train(&cfg).map_err(err)?;
    cfg.out_dir = b.path().to_path_buf();
    cfg.max_steps = Some(3);
    let partial = train(&cfg).map_err(err)?;
    cfg.max_steps = None;
    cfg.resume = Some(partial.final_checkpoint.clone());
    let resumed = train(&cfg).map_err(err)?;
    let x = load_checkpoint(&full.final_checkpoint).map_err(err)?;
    let y = load_checkpoint(&resumed.final_checkpoint).map_err(err)?;
    ensure(
        x.params == y.params && x.adam.t == y.adam.t && x.progress == y.progress,
        || "resumed run diverged from the continuous run".into(),
    )?;
    let lr_match = full
        .steps
        .iter()
        .skip(3)
        .zip(&resumed.steps)
        .all(|(p, q)| p.step == q.step && p.lr == q.lr);
    ensure(lr_match, || "resumed lr or step counters differ".into())?;
    Ok(format!(
        "lr 1e-4/9e-5/8.1e-5, Adam fixed point, resume after 3 of {} steps identical",
        x.progress.step
    ))
}

// ---------------------------------------------------------------- 10

fn write_labels(dir: &Path, id: &str, labels: Vec<u8>) -> Result<(), String> {
    let n = labels.len();
    let vol = Rvol {
        shape: [1, 1, n],
        spacing: [1.0; 3],
        case_id: id.into(),
        voxels: Voxels::U8(labels),
    };
    pvnet_core::data::write_volume(&vol, dir.join(format!("{id}.rvol"))).map_err(err)
}

fn mask(n: usize, on: std::ops::Range<usize>) -> Vec<u8> {
    (0..n).map(|i| on.contains(&i) as u8).collect()
}

fn run_eval(pred: &Path, gt: &Path, out: &Path) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_pvnet"))
        .args(["eval", "--classes", "liver"])
        .arg("--pred")
        .arg(pred)
        .arg("--gt")
        .arg(gt)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(err)?;
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    ensure(output.status.success(), || {
        format!(
            "eval exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr)
        )
    })?;
    Ok(stdout)
}

fn cli_eval() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).map_err(err)?;
    fs::create_dir_all(&gt).map_err(err)?;
    write_labels(&gt, "case_000", mask(8, 0..4))?;
    write_labels(&pred, "case_000", mask(8, 2..6))?;
    let half = run_eval(&pred, &gt, &tmp.path().join("half"))?;
    ensure(half.contains("50.0"), || {
        format!("half overlap printed:\n{half}")
    })?;

    let (pred, gt) = (tmp.path().join("pred2"), tmp.path().join("gt2"));
    fs::create_dir_all(&pred).map_err(err)?;
    fs::create_dir_all(&gt).map_err(err)?;
    // |P| = |G| = 10 with overlaps of 9 and 7 give 90 and 70.
    write_labels(&gt, "case_000", mask(20, 0..10))?;
    write_labels(&pred, "case_000", mask(20, 1..11))?;
    write_labels(&gt, "case_001", mask(20, 0..10))?;
    write_labels(&pred, "case_001", mask(20, 3..13))?;
    let pair = run_eval(&pred, &gt, &tmp.path().join("pair"))?;
    ensure(pair.contains("80.0±10.0"), || {
        format!("two cases printed:\n{pair}")
    })?;
    Ok("printed 50.0 and 80.0±10.0".into())
}

// ----------------------------------------------------------------

const NAMES: [&str; 10] = [
    "gradient check suite",
    "KL closed form",
    "identity modulation",
    "spectral normalization",
    "loss oracles",
    "reference training run",
    "prior sampling",
    "pipeline and file formats",
    "schedule, optimizer, resume",
    "eval CLI",
];

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    // Libtest-style flags such as `--nocapture` are ignored; bare numbers select criteria.
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=10).contains(n))
        .collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);

    let mut lines = Vec::new();
    let mut reference_checkpoint = None;
    for id in 1..=10 {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let mut budget_only = false;
        let outcome = match id {
            1 => gradient_suite(),
            2 => kl_oracle(),
            3 => identity_modulation(),
            4 => spectral_oracle(),
            5 => loss_oracles(),
            6 => {
                let r = reference_run();
                reference_checkpoint = r.checkpoint.clone();
                let notes = r.notes.join("; ");
                match (r.hard.is_empty(), r.over_budget) {
                    (true, None) => Ok(notes),
                    (true, Some(b)) => {
                        budget_only = true;
                        Err(format!("{b}; {notes}"))
                    }
                    (false, b) => {
                        let mut all = r.hard;
                        all.extend(b);
                        Err(format!("{}; {notes}", all.join("; ")))
                    }
                }
            }
            7 => {
                let cached = reference_checkpoint
                    .clone()
                    .or_else(|| Some(work_dir().join("reference/final.ckpt")));
                prior_sampling(cached.as_deref())
            }
            8 => pipeline_and_formats(),
            9 => schedule_and_resume(),
            10 => cli_eval(),
            _ => unreachable!(),
        };
        let line = Line {
            id,
            name: NAMES[id - 1],
            outcome,
            budget_only,
        };
        let (tag, detail) = match &line.outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!(
            "{tag} {:>2} {:<28} {detail} [{:.1?}]",
            line.id,
            line.name,
            start.elapsed()
        );
        lines.push(line);
    }
    let failed: Vec<&Line> = lines.iter().filter(|l| l.outcome.is_err()).collect();
    let hard = failed.iter().filter(|l| !l.budget_only).count();
    println!(
        "acceptance: {} passed, {} failed ({} on time budget only)",
        lines.len() - failed.len(),
        failed.len(),
        failed.len() - hard
    );
    if hard == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
