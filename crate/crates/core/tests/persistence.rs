//! Run directories, checkpoints and resumption.

use std::fs;

use coredi_core::config::Ablation;
use coredi_core::encoder::{datasets_for, Dataset};
use coredi_core::report::{emit_curves, read_loss_csv, validate_curves, RunManifest};
use coredi_core::trainer::{ablate, resume, run, run_steps, Checkpoint, TrainState};
use coredi_core::{Error, Mode, TrainConfig};

fn small(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.grid_side = 2;
    cfg.hidden = 16;
    cfg.dec_hidden = 8;
    cfg.n_train = 32;
    cfg.n_eval = 8;
    cfg.batch_size = 8;
    cfg.r_near = 2;
    cfg.r_far = 2;
    cfg.steps = 12;
    cfg.milestones = 3;
    cfg.n_gen = 16;
    cfg.sample_steps = 4;
    cfg
}

#[test]
fn run_directory_is_complete_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Mode::Latent);
    let summary = run(&cfg, dir.path()).unwrap();
    assert_eq!(summary.steps, 12);
    assert_eq!(summary.milestones.iter().map(|m| m.step).collect::<Vec<_>>(), [4, 8, 12]);
    assert!(summary.frechet_gaussian.is_finite());

    let manifest = RunManifest::load(dir.path()).unwrap();
    manifest.verify(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.config_digest, cfg.digest());
    for k in 1..=3 {
        assert!(manifest.files.iter().any(|f| f.path == format!("ckpt_{k}.crck")));
        assert!(manifest.files.iter().any(|f| f.path == format!("milestone_{k}.json")));
    }

    let rows = read_loss_csv(&dir.path().join("loss.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().map(|r| r[0] as u64).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());

    let doc = emit_curves(dir.path()).unwrap();
    validate_curves(&doc).unwrap();
    assert_eq!(doc["series"]["lds"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("curves.json").exists());
}

#[test]
fn tampered_file_fails_manifest_check() {
    let dir = tempfile::tempdir().unwrap();
    run(&small(Mode::Latent), dir.path()).unwrap();
    let manifest = RunManifest::load(dir.path()).unwrap();
    fs::write(dir.path().join("loss.csv"), "step\n").unwrap();
    assert!(matches!(manifest.verify(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_milestone_breaks_curves() {
    let dir = tempfile::tempdir().unwrap();
    run(&small(Mode::Latent), dir.path()).unwrap();
    fs::remove_file(dir.path().join("milestone_2.json")).unwrap();
    assert!(emit_curves(dir.path()).is_err());
}

#[test]
fn resumed_training_matches_unbroken_training() {
    for mode in [Mode::Latent, Mode::Pixel] {
        let cfg = small(mode);
        let (train, _) = datasets_for(&cfg).unwrap();
        let mut unbroken = TrainState::new(cfg.clone(), &train).unwrap();
        let full = run_steps(&mut unbroken, &train, 10, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.crck");
        let mut first = TrainState::new(cfg, &train).unwrap();
        run_steps(&mut first, &train, 4, None).unwrap();
        first.checkpoint().save(&path).unwrap();
        let (resumed, rest) = resume(&path, 6).unwrap();

        assert_eq!(resumed.step, 10);
        assert_eq!(&full[4..], &rest[..]);
        assert_eq!(resumed.proj, unbroken.proj);
        assert_eq!(resumed.model.params, unbroken.model.params);
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let cfg = small(Mode::Pixel);
    let (train, _) = datasets_for(&cfg).unwrap();
    let mut state = TrainState::new(cfg, &train).unwrap();
    run_steps(&mut state, &train, 3, None).unwrap();
    let ck = state.checkpoint();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice(), "mem".as_ref()).unwrap();
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(back.state.proj, state.proj);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = small(Mode::Latent);
    let (train, _) = datasets_for(&cfg).unwrap();
    let state = TrainState::new(cfg, &train).unwrap();
    let mut bytes = Vec::new();
    state.checkpoint().write_to(&mut bytes).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(Checkpoint::read_from(&mut bytes.as_slice(), "mem".as_ref()).is_err());
}

#[test]
fn datasets_are_reproducible_and_seed_dependent() {
    let cfg = small(Mode::Latent);
    let (a, _) = datasets_for(&cfg).unwrap();
    let (b, _) = datasets_for(&cfg).unwrap();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 1, ..cfg };
    assert_ne!(datasets_for(&other).unwrap().0, a);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.crds");
    a.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), a);
}

#[test]
fn corrupt_dataset_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.crds");
    fs::write(&path, b"NOPE0000000000000000000000000000").unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
}

#[test]
fn ablation_writes_both_runs() {
    let dir = tempfile::tempdir().unwrap();
    let report = ablate(&small(Mode::Latent), Ablation::RegNone, dir.path()).unwrap();
    assert_eq!(report.ablation, "reg_none");
    assert!(report.baseline.halted_at.is_none());
    for sub in ["baseline", "reg_none"] {
        let run_dir = dir.path().join(sub);
        RunManifest::load(&run_dir).unwrap().verify(&run_dir).unwrap();
    }
    assert!(dir.path().join("ablation.json").exists());
}
