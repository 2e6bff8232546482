use hssh::harness::train::metrics_jsonl;
use hssh::harness::{generate_dataset, train, RunConfig, Splits, SyntheticConfig};
use hssh::ssm::EncoderConfig;

fn small_data(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        image_size: 16,
        train_per_class: 3,
        test_per_class: 2,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_dataset(&small_data(11)).unwrap().write(d.path()).unwrap();
    }
    for name in Splits::FILES {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
    let other = generate_dataset(&small_data(12)).unwrap();
    assert_ne!(other, generate_dataset(&small_data(11)).unwrap());
}

#[test]
fn written_splits_read_back_unchanged() {
    let splits = generate_dataset(&small_data(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    splits.write(dir.path()).unwrap();
    assert_eq!(Splits::read(dir.path()).unwrap(), splits);
}

#[test]
fn training_twice_gives_identical_metrics() {
    let enc = EncoderConfig {
        image_size: 16,
        patch_size: 2,
        stage_channels: [4, 8, 16, 32],
        state_dim: 2,
        ..EncoderConfig::default()
    };
    let run = RunConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        seed: 5,
        ..RunConfig::default()
    };
    let splits = generate_dataset(&small_data(5)).unwrap();
    let a = train(&run, &enc, &splits, |_| Ok(())).unwrap();
    let b = train(&run, &enc, &splits, |_| Ok(())).unwrap();
    let (ja, jb) = (metrics_jsonl(&a.metrics), metrics_jsonl(&b.metrics));
    assert_eq!(ja.lines().count(), 2);
    assert_eq!(ja, jb);
    assert_eq!(a.model, b.model);
    let c = train(&RunConfig { seed: 6, ..run }, &enc, &splits, |_| Ok(())).unwrap();
    assert_ne!(metrics_jsonl(&c.metrics), ja);
}
