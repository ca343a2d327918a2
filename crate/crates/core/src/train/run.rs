//! The optimisation loop over a prepared phantom dataset.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{load_checkpoint_for, save_checkpoint, Progress};
use super::config::{lr_schedule, TrainConfig};
use crate::data::{load_split, postprocess, Augmentation, Manifest, PreparedCase, Split};
use crate::error::{Error, Result};
use crate::losses::{kl_divergence, segmentation_loss, total_loss, LossWeights};
use crate::metrics::{aggregate_report, dice_score, DiceReport};
use crate::model::{
    encode, forward_infer, forward_train, one_hot, Ctx, Encoder, InferMode, ModelParams,
};
use crate::nn::SpectralMode;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LOG_HEADER: &str = "epoch,step,loss_seg,loss_kl,loss_total,lr";

/// Derives an independent stream seed from a base seed and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_LATENT: u64 = 4;

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss_seg: f32,
    pub loss_kl: f32,
    pub loss_total: f32,
    pub lr: f64,
}

impl StepLog {
    fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, self.loss_seg, self.loss_kl, self.loss_total, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct ValidationRecord {
    /// Number of completed epochs when the evaluation ran.
    pub epoch: usize,
    pub report: DiceReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub progress: Progress,
    pub steps: Vec<StepLog>,
    pub validation: Vec<ValidationRecord>,
    pub elapsed: Duration,
}

/// Names used for foreground classes in reports: `organ1`, `organ2`, ...
pub fn class_names(num_classes: usize) -> Vec<String> {
    (1..num_classes).map(|c| format!("organ{c}")).collect()
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub seg: f32,
    pub kl: f32,
    pub total: f32,
}

/// Forward, backward and one Adam update on a single batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    images: &Tensor<f32>,
    labels: &[u8],
    weights: &LossWeights,
    lr: f64,
    weight_decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let cfg = *params.config();
    let batch = images.shape()[0];
    let onehot = one_hot::<f32>(labels, batch, cfg.num_classes, [cfg.input_size; 3])?;
    let mut ctx = Ctx::train(params);
    let x = ctx.g.constant(images.clone());
    let y = ctx.g.constant(onehot);
    let out = forward_train(&mut ctx, x, y, rng)?;
    let seg = segmentation_loss(&mut ctx.g, out.logits, y, weights.epsilon)?;
    let kl = kl_divergence(&mut ctx.g, &out.posterior, &out.prior)?;
    let total = total_loss(&mut ctx.g, seg, kl, weights)?;
    let losses = StepLosses {
        seg: ctx.g.value(seg).item()?,
        kl: ctx.g.value(kl).item()?,
        total: ctx.g.value(total).item()?,
    };
    if !(losses.total.is_finite() && losses.seg.is_finite() && losses.kl.is_finite()) {
        return Err(Error::NonFinite(format!("loss {losses:?}")));
    }
    let grads = ctx.gradients(total)?;
    adam_step(params.tensors_mut(), &grads, adam, lr, weight_decay)?;
    Ok(losses)
}

/// Stacks the chosen cases into a `[B, 1, S, S, S]` batch, augmenting each
/// image with a stream keyed by `(seed, epoch, case index)`.
pub fn assemble_batch(
    cases: &[PreparedCase],
    indices: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let s = cfg.model.input_size;
    let vox = s * s * s;
    let mut data = Vec::with_capacity(indices.len() * vox);
    let mut labels = Vec::with_capacity(indices.len() * vox);
    for &i in indices {
        let case = &cases[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[TAG_AUGMENT, epoch as u64, i as u64],
        ));
        let aug = Augmentation::draw(&cfg.augment, &mut rng);
        data.extend(aug.apply(case.image.data(), [s; 3]));
        labels.extend_from_slice(&case.labels);
    }
    Ok((
        Tensor::from_vec(&[indices.len(), 1, s, s, s], data)?,
        labels,
    ))
}

/// Prior-mean prediction of each case, scored per foreground class at the original resolution.
pub fn evaluate_cases(params: &mut ModelParams<f32>, cases: &[PreparedCase]) -> Result<DiceReport> {
    let classes = params.config().num_classes;
    let mut scores = Vec::with_capacity(cases.len());
    for case in cases {
        let inf = forward_infer(params, &case.image, InferMode::PriorMean)?;
        let pred = postprocess(&inf.labels, &case.record)?;
        let row = (1..classes)
            .map(|c| dice_score(&pred, &case.original_labels, c as u8))
            .collect::<Result<Vec<_>>>()?;
        scores.push(row);
    }
    aggregate_report(&class_names(classes), &scores)
}

/// Mean posterior-to-prior KL over `cases`, evaluated without sampling.
pub fn mean_kl(params: &mut ModelParams<f32>, cases: &[PreparedCase]) -> Result<f64> {
    let cfg = *params.config();
    let mut total = 0.0;
    for case in cases {
        let mut ctx = Ctx::with(params, SpectralMode::Frozen, false);
        let x = ctx.g.constant(case.image.clone());
        let y = ctx.g.constant(one_hot(
            &case.labels,
            1,
            cfg.num_classes,
            [cfg.input_size; 3],
        )?);
        let p = encode(&mut ctx, Encoder::Prior, x, None)?;
        let q = encode(&mut ctx, Encoder::Posterior, x, Some(y))?;
        let kl = kl_divergence(&mut ctx.g, &q, &p)?;
        total += ctx.g.value(kl).item()? as f64;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// Fresh parameters for a run, drawn from the run seed.
pub fn initial_params(cfg: &TrainConfig) -> Result<ModelParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT]));
    ModelParams::init(cfg.model, &mut rng)
}

/// Loaded dataset of a run.
pub struct RunData {
    pub manifest: Manifest,
    pub train: Vec<PreparedCase>,
    pub held_out: Vec<PreparedCase>,
}

pub fn load_run_data(cfg: &TrainConfig) -> Result<RunData> {
    let manifest = Manifest::load(&cfg.data_dir)?;
    if manifest.classes != cfg.model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!(
                "dataset has {} classes, model has {}",
                manifest.classes, cfg.model.num_classes
            ),
        ));
    }
    let train = load_split(&cfg.data_dir, &manifest, Split::Train, cfg.model.input_size)?;
    if train.is_empty() {
        return Err(Error::config("data_dir", "dataset has no training cases"));
    }
    let held_out = load_split(&cfg.data_dir, &manifest, Split::Test, cfg.model.input_size)?;
    Ok(RunData {
        manifest,
        train,
        held_out,
    })
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Runs (or resumes) the configured training and writes logs and checkpoints under `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_run_data(cfg)?;
    train_on(cfg, &data)
}

/// [`train`] over already loaded data.
pub fn train_on(cfg: &TrainConfig, data: &RunData) -> Result<TrainOutcome> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (mut params, mut adam, mut progress) = match &cfg.resume {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, &cfg.model)?;
            (ckpt.params, ckpt.adam, ckpt.progress)
        }
        None => {
            let params = initial_params(cfg)?;
            let adam = AdamState::new(params.tensors())?;
            (params, adam, Progress::default())
        }
    };
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, cfg.resume.is_some())?;
    let val_path = cfg.out_dir.join(VALIDATION_FILE);
    let mut steps = Vec::new();
    let mut validation = Vec::new();
    let n_batches = data.train.len().div_ceil(cfg.batch_size);
    let limit_hit = |p: &Progress| cfg.max_steps.is_some_and(|m| p.step >= m);

    'epochs: while progress.epoch < cfg.epochs {
        let epoch = progress.epoch;
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[TAG_SHUFFLE, epoch as u64],
        )));
        for (b, chunk) in order
            .chunks(cfg.batch_size)
            .enumerate()
            .skip(progress.batch)
        {
            if limit_hit(&progress) {
                break 'epochs;
            }
            let (images, labels) = assemble_batch(&data.train, chunk, epoch, cfg)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_LATENT, progress.step]));
            let step_no = progress.step + 1;
            let losses = train_step(
                &mut params,
                &mut adam,
                &images,
                &labels,
                &cfg.loss,
                lr,
                cfg.weight_decay,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::Aborted { step: step_no, msg },
                other => other,
            })?;
            progress.step = step_no;
            progress.batch = b + 1;
            let row = StepLog {
                epoch,
                step: progress.step,
                loss_seg: losses.seg,
                loss_kl: losses.kl,
                loss_total: losses.total,
                lr,
            };
            writeln!(log, "{}", row.csv()).map_err(|e| Error::io(&log_path, e))?;
            steps.push(row);
        }
        if progress.batch < n_batches {
            break;
        }
        progress.epoch += 1;
        progress.batch = 0;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let done = progress.epoch;
        let last = steps.last().map(|s| s.loss_total).unwrap_or(f32::NAN);
        log::info!(
            "epoch {done}/{} step {} loss {last:.4} lr {lr:.3e} ({:.0?})",
            cfg.epochs,
            progress.step,
            started.elapsed()
        );
        if cfg.validate_every > 0 && done % cfg.validate_every == 0 && !data.held_out.is_empty() {
            let report = evaluate_cases(&mut params, &data.held_out)?;
            log::info!(
                "epoch {done} held-out mean dice {:.1}",
                report.mean_of_means()
            );
            append_validation(&val_path, done, &report)?;
            validation.push(ValidationRecord {
                epoch: done,
                report,
            });
        }
        if done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            let path = cfg.out_dir.join(format!("checkpoint_epoch{done:04}.ckpt"));
            save_checkpoint(&path, &params, &adam, Some(cfg), progress)?;
        }
        if limit_hit(&progress) {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &params, &adam, Some(cfg), progress)?;
    Ok(TrainOutcome {
        final_checkpoint,
        log_path,
        progress,
        steps,
        validation,
        elapsed: started.elapsed(),
    })
}

fn append_validation(path: &Path, epoch: usize, report: &DiceReport) -> Result<()> {
    let exists = path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if !exists {
        text.push_str("epoch,class,mean,std,n\n");
    }
    for c in &report.classes {
        text.push_str(&format!(
            "{epoch},{},{:.4},{:.4},{}\n",
            c.name,
            c.mean,
            c.std,
            c.values.len()
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a metrics log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Format {
        field: "train_log",
        msg: format!("unparsable row `{line}`"),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(StepLog {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                step: f[1].parse().map_err(|_| bad(line))?,
                loss_seg: f[2].parse().map_err(|_| bad(line))?,
                loss_kl: f[3].parse().map_err(|_| bad(line))?,
                loss_total: f[4].parse().map_err(|_| bad(line))?,
                lr: f[5].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}
