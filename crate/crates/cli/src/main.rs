//! `pvnet`: generate phantom data, train, run inference, score predictions.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when work
//! started and then failed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use pvnet_core::data::{
    generate_dataset, postprocess, preprocess, read_volume, write_volume, Rvol, VolumeCase, Voxels,
};
use pvnet_core::gradcheck::{run_suite, SuiteOptions};
use pvnet_core::metrics::{aggregate_report, dice_score};
use pvnet_core::model::{forward_infer, InferMode};
use pvnet_core::train::{load_checkpoint, train, TrainConfig};
use pvnet_core::OpKind;

#[derive(Parser)]
#[command(name = "pvnet", version, about = "Probabilistic 3D organ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom dataset with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of classes including background.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a directory that already has files in it.
        #[arg(long)]
        force: bool,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment one image or every image in a directory.
    Infer {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// An image `.rvol`, a directory of them, or a dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// Output file for a single image, otherwise a directory.
        #[arg(long)]
        output: PathBuf,
        /// Draw the latent from the prior instead of using its mean.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0, requires = "sample")]
        seed: u64,
    },
    /// Score predicted label volumes against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated foreground class names, in label order starting at 1.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        /// Where to write the CSV reports; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Tiny)]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break one backward rule to show the check catches it.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

/// Bad input detected by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<pvnet_core::Error>() {
            return if core.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            cases,
            size,
            classes,
            seed,
            force,
        } => gen_data(&out, cases, size, classes, seed, force),
        Cmd::Train { config } => run_train(&config),
        Cmd::Infer {
            model,
            input,
            output,
            sample,
            seed,
        } => {
            let mode = if sample {
                InferMode::PriorSample(seed)
            } else {
                InferMode::PriorMean
            };
            infer(&model, &input, &output, mode)
        }
        Cmd::Eval {
            pred,
            gt,
            classes,
            out,
        } => {
            let out = out.unwrap_or_else(|| pred.clone());
            eval(&pred, &gt, &classes, &out)
        }
        Cmd::Gradcheck {
            scale: Scale::Tiny,
            seed,
            corrupt,
        } => gradcheck(seed, corrupt.as_deref()),
    }
}

fn gen_data(
    out: &Path,
    cases: usize,
    size: usize,
    classes: usize,
    seed: u64,
    force: bool,
) -> anyhow::Result<()> {
    if size < 16 {
        return Err(invalid(format!("--size {size} is below the minimum of 16")));
    }
    if !force && fs::read_dir(out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(invalid(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let start = Instant::now();
    let manifest = generate_dataset(out, cases, size, classes, seed)?;
    let held_out = manifest
        .cases
        .iter()
        .filter(|c| c.split == pvnet_core::data::Split::Test)
        .count();
    println!(
        "wrote {} cases ({} train, {held_out} held out) of {size}³ to {} in {:.1?}",
        manifest.cases.len(),
        manifest.cases.len() - held_out,
        out.display(),
        start.elapsed()
    );
    Ok(())
}

fn run_train(config: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| invalid(format!("cannot read {}: {e}", config.display())))?;
    let cfg = TrainConfig::from_json(&text)?;
    if !cfg.data_dir.is_dir() {
        return Err(invalid(format!(
            "data directory {} does not exist",
            cfg.data_dir.display()
        )));
    }
    if let Some(resume) = &cfg.resume {
        if !resume.is_file() {
            return Err(invalid(format!(
                "resume checkpoint {} does not exist",
                resume.display()
            )));
        }
    }
    let outcome = train(&cfg)?;
    println!(
        "trained {} steps in {:.1?}; final checkpoint {}",
        outcome.progress.step,
        outcome.elapsed,
        outcome.final_checkpoint.display()
    );
    if let Some(last) = outcome.validation.last() {
        println!("held-out dice after epoch {}:", last.epoch);
        print!("{}", last.report.to_table());
    }
    Ok(())
}

/// Image volumes under `input`: the file itself, `input/images/*.rvol` for a
/// dataset directory, or `input/*.rvol`.
fn image_paths(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(invalid(format!("input {} does not exist", input.display())));
    }
    let images = input.join("images");
    let dir = if images.is_dir() {
        images
    } else {
        input.to_path_buf()
    };
    let mut paths = rvol_files(&dir)?;
    if paths.is_empty() {
        return Err(invalid(format!("no .rvol files in {}", dir.display())));
    }
    paths.sort();
    Ok(paths)
}

fn rvol_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "rvol") {
            out.push(path);
        }
    }
    Ok(out)
}

fn infer(model: &Path, input: &Path, output: &Path, mode: InferMode) -> anyhow::Result<()> {
    if !model.is_file() {
        return Err(invalid(format!("model {} does not exist", model.display())));
    }
    let images = image_paths(input)?;
    let single = input.is_file();
    if !single {
        fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    }
    let mut params = load_checkpoint(model)?.params;
    let size = params.config().input_size;
    let total = Instant::now();
    for path in &images {
        let start = Instant::now();
        let case = VolumeCase::load(path, None)?;
        let pre = preprocess(&case, size)?;
        let inf = forward_infer(&mut params, &pre.image, mode)?;
        let labels = postprocess(&inf.labels, &pre.record)?;
        let vol = Rvol {
            shape: case.dims,
            spacing: case.spacing,
            case_id: case.case_id.clone(),
            voxels: Voxels::U8(labels),
        };
        let dest = if single {
            output.to_path_buf()
        } else {
            output.join(format!("{}.rvol", case.case_id))
        };
        write_volume(&vol, &dest)?;
        println!(
            "{}  {:.2} s  -> {}",
            case.case_id,
            start.elapsed().as_secs_f64(),
            dest.display()
        );
    }
    let secs = total.elapsed().as_secs_f64();
    println!(
        "{} case(s) in {secs:.2} s ({:.2} s per case)",
        images.len(),
        secs / images.len() as f64
    );
    Ok(())
}

fn read_labels(path: &Path) -> anyhow::Result<(String, [usize; 3], Vec<u8>)> {
    let vol = read_volume(path)?;
    match vol.voxels {
        Voxels::U8(v) => Ok((vol.case_id, vol.shape, v)),
        Voxels::F32(_) => bail!("{} holds f32 voxels, expected u8 labels", path.display()),
    }
}

/// Label files keyed by file stem.
fn label_files(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(invalid(format!("{} is not a directory", dir.display())));
    }
    let labels = dir.join("labels");
    let dir = if labels.is_dir() {
        labels
    } else {
        dir.to_path_buf()
    };
    Ok(rvol_files(&dir)?
        .into_iter()
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect())
}

fn eval(pred: &Path, gt: &Path, names: &[String], out: &Path) -> anyhow::Result<()> {
    if names.is_empty() || names.iter().any(|n| n.trim().is_empty()) {
        return Err(invalid("--classes needs non-empty names"));
    }
    if names.len() > 255 {
        return Err(invalid("at most 255 foreground classes"));
    }
    let preds = label_files(pred)?;
    let truths = label_files(gt)?;
    for id in preds.keys().filter(|k| !truths.contains_key(*k)) {
        log::warn!("{id}: prediction has no ground truth, skipped");
    }
    for id in truths.keys().filter(|k| !preds.contains_key(*k)) {
        log::warn!("{id}: ground truth has no prediction, skipped");
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (id, p) in &preds {
        let Some(g) = truths.get(id) else { continue };
        let (_, ps, pv) = read_labels(p)?;
        let (_, gs, gv) = read_labels(g)?;
        if ps != gs {
            bail!("{id}: prediction shape {ps:?} differs from ground truth {gs:?}");
        }
        let row = (1..=names.len())
            .map(|c| dice_score(&pv, &gv, c as u8))
            .collect::<pvnet_core::Result<Vec<_>>>()?;
        ids.push(id.clone());
        scores.push(row);
    }
    if scores.is_empty() {
        return Err(invalid(format!(
            "no case ids match between {} and {}",
            pred.display(),
            gt.display()
        )));
    }
    let report = aggregate_report(names, &scores)?;
    print!("{}", report.to_table());

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let summary = out.join("dice.csv");
    fs::write(&summary, report.to_csv())
        .with_context(|| format!("writing {}", summary.display()))?;
    let mut per_case = format!("case,{}\n", names.join(","));
    for (id, row) in ids.iter().zip(&scores) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        per_case.push_str(&format!("{id},{}\n", cells.join(",")));
    }
    let per_case_path = out.join("dice_per_case.csv");
    fs::write(&per_case_path, per_case)
        .with_context(|| format!("writing {}", per_case_path.display()))?;
    println!(
        "{} case(s) scored; wrote {} and {}",
        ids.len(),
        summary.display(),
        per_case_path.display()
    );
    Ok(())
}

fn gradcheck(seed: u64, corrupt: Option<&str>) -> anyhow::Result<()> {
    let mut opts = SuiteOptions::tiny();
    opts.seed = seed;
    opts.corrupt = corrupt
        .map(|s| s.parse::<OpKind>())
        .transpose()
        .map_err(|e| invalid(e.to_string()))?;
    let start = Instant::now();
    let report = run_suite(&opts)?;
    print!("{}", report.render());
    println!("{:.1?}", start.elapsed());
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
