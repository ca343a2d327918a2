use std::path::Path;

use pvnet_core::data::generate_dataset;
use pvnet_core::model::ModelConfig;
use pvnet_core::train::{
    initial_params, load_checkpoint, load_run_data, mean_kl, read_log, train, train_on, TrainConfig,
};
use pvnet_core::Error;

fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::new(data, out);
    cfg.model = ModelConfig {
        input_size: 16,
        num_classes: 3,
        latent_dim: 8,
        base_width: 2,
    };
    cfg.batch_size = 2;
    cfg.epochs = 3;
    cfg.lr0 = 1e-3;
    cfg.checkpoint_every = 1;
    cfg.validate_every = 1;
    cfg.seed = 11;
    cfg
}

fn dataset(cases: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), cases, 20, 3, 5).unwrap();
    dir
}

#[test]
fn same_seed_gives_identical_loss_trace() {
    let data = dataset(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny_config(data.path(), a.path());
    cfg.max_steps = Some(5);
    let first = train(&cfg).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    let second = train(&cfg).unwrap();
    assert_eq!(first.steps.len(), 5);
    for (x, y) in first.steps.iter().zip(&second.steps) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        assert_eq!(x.loss_seg.to_bits(), y.loss_seg.to_bits());
        assert_eq!(x.loss_kl.to_bits(), y.loss_kl.to_bits());
    }
    let logged = read_log(&first.log_path).unwrap();
    assert_eq!(logged, first.steps);
}

#[test]
fn zero_kl_weight_leaves_only_the_segmentation_term() {
    let data = dataset(4);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.loss.lambda2 = 0.0;
    cfg.max_steps = Some(3);
    let run = train(&cfg).unwrap();
    for s in &run.steps {
        assert!(s.loss_kl > 0.0);
        assert_eq!(s.loss_total, s.loss_seg * cfg.loss.lambda1 as f32);
    }
}

#[test]
fn resumed_run_matches_continuous_run() {
    let data = dataset(5);
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config(data.path(), full.path());
    let continuous = train(&cfg).unwrap();
    assert_eq!(continuous.progress.epoch, 3);
    assert_eq!(continuous.validation.len(), 3);

    // Stop mid-way through the second epoch, then pick up from the checkpoint.
    let mut first = tiny_config(data.path(), part.path());
    first.max_steps = Some(3);
    let head = train(&first).unwrap();
    assert_eq!(
        (head.progress.epoch, head.progress.batch, head.progress.step),
        (1, 1, 3)
    );
    let mut second = tiny_config(data.path(), part.path());
    second.resume = Some(head.final_checkpoint.clone());
    let tail = train(&second).unwrap();

    let joined: Vec<_> = head.steps.iter().chain(&tail.steps).copied().collect();
    assert_eq!(joined, continuous.steps);
    assert_eq!(read_log(&tail.log_path).unwrap(), continuous.steps);
    let a = load_checkpoint(&continuous.final_checkpoint).unwrap();
    let b = load_checkpoint(&tail.final_checkpoint).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam.t, b.adam.t);
    assert_eq!(a.progress, b.progress);
}

#[test]
fn interval_checkpoints_and_logs_are_written() {
    let data = dataset(4);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.epochs = 2;
    train(&cfg).unwrap();
    for f in [
        "train_log.csv",
        "validation.csv",
        "checkpoint_epoch0001.ckpt",
        "final.ckpt",
    ] {
        assert!(out.path().join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(out.path().join("train_log.csv")).unwrap();
    assert!(header.starts_with("epoch,step,loss_seg,loss_kl,loss_total,lr\n"));
}

#[test]
fn mismatched_class_count_is_a_config_error() {
    let data = dataset(3);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.model.num_classes = 4;
    assert!(matches!(train(&cfg), Err(Error::Config { .. })));
}

#[test]
fn corrupt_case_names_the_case() {
    let data = dataset(3);
    std::fs::write(
        data.path().join("images/case_001.rvol"),
        b"RVOL1\0\0\0garbage",
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(data.path(), out.path());
    let err = train(&cfg).unwrap_err().to_string();
    assert!(err.contains("case_001"), "{err}");
}

#[test]
fn moving_average_of_loss_falls_over_200_steps() {
    let data = dataset(1);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.batch_size = 1;
    cfg.epochs = 200;
    cfg.lr0 = 1e-3;
    cfg.validate_every = 0;
    cfg.checkpoint_every = 1000;
    let run = train(&cfg).unwrap();
    let total: Vec<f64> = run.steps.iter().map(|s| s.loss_total as f64).collect();
    assert_eq!(total.len(), 200);
    let ma = |end: usize| total[end - 20..end].iter().sum::<f64>() / 20.0;
    assert!(ma(200) < ma(20), "moving average {} -> {}", ma(20), ma(200));

    let data = load_run_data(&cfg).unwrap();
    let mut init = initial_params(&cfg).unwrap();
    let mut trained = load_checkpoint(&run.final_checkpoint).unwrap().params;
    let before = mean_kl(&mut init, &data.train).unwrap();
    let after = mean_kl(&mut trained, &data.train).unwrap();
    assert!(after < before, "KL {before} -> {after}");
}

#[test]
fn loaded_data_is_reused_by_train_on() {
    let data = dataset(3);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.max_steps = Some(1);
    let loaded = load_run_data(&cfg).unwrap();
    assert_eq!(loaded.train.len() + loaded.held_out.len(), 3);
    assert_eq!(train_on(&cfg, &loaded).unwrap().steps.len(), 1);
}
