use std::fs;

use vitlora::checkpoint::{load_checkpoint, save_checkpoint};
use vitlora::config::{RunConfig, KEYS, RESOLVED_CONFIG_FILE};
use vitlora::data::{generate_pool, DatasetSpec, ManipulationFamily, Quality};
use vitlora::lora::{inject, LoraConfig};
use vitlora::model::{init_model, ViTConfig};
use vitlora::train::{evaluate, train, ModelDetector, TrainConfig};
use vitlora::Error;

/// Minimal reader for the checkpoint layout, written against the byte format only.
fn read_container(bytes: &[u8]) -> Vec<(String, u8, Vec<u64>, Vec<f32>)> {
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap()) as usize;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let count = u32_at(0);
    let mut at = 4;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16_at(at);
        at += 2;
        let name = String::from_utf8(bytes[at..at + len].to_vec()).unwrap();
        at += len;
        assert_eq!(&bytes[at..at + 4], b"TNSR");
        let dtype = bytes[at + 4];
        let ndim = bytes[at + 5] as usize;
        at += 6;
        let shape: Vec<u64> = (0..ndim).map(|k| u64_at(at + 8 * k)).collect();
        at += 8 * ndim;
        let n: u64 = shape.iter().product();
        let data = (0..n as usize)
            .map(|k| f32::from_le_bytes(bytes[at + 4 * k..at + 4 * k + 4].try_into().unwrap()))
            .collect();
        at += 4 * n as usize;
        out.push((name, dtype, shape, data));
    }
    assert_eq!(at, bytes.len(), "trailing bytes");
    out
}

#[test]
fn resolved_config_reloads_identically() {
    let mut c = RunConfig::default();
    for kv in ["train.learning_rate=0.003", "loss.lambda=0.05", "data.domains=0,2", "ablation.seeds=4,5"] {
        c.apply_override(kv).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    c.write_resolved(dir.path()).unwrap();
    let path = dir.path().join(RESOLVED_CONFIG_FILE);
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, c);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), KEYS.len());
}

#[test]
fn unknown_and_repeated_keys_are_named() {
    match RunConfig::parse("# comment\n\ntrain.steps=5\nlora.rnak=2\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("lora.rnak"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match RunConfig::parse("train.steps=5\ntrain.steps=6\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("train.steps"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match RunConfig::parse("data.families=blend,smudge\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("data.families"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn override_wins_over_file_and_validation_runs_after() {
    let mut c = RunConfig::parse("lora.rank=2\ntrain.steps=7\n").unwrap();
    c.apply_override("lora.rank=8").unwrap();
    assert_eq!(c.train.lora.rank, 8);
    assert_eq!(c.train.steps, 7);
    c.apply_override("lora.rank=0").unwrap();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn checkpoint_layout_matches_independent_reader() {
    let cfg = ViTConfig::default();
    let mut model = init_model::<f32>(&cfg).unwrap();
    let set = inject(&mut model, &LoraConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, Some(&set)).unwrap();

    let entries = read_container(&fs::read(&path).unwrap());
    let expected: Vec<_> = model
        .params()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .chain(set.named_tensors())
        .collect();
    assert_eq!(entries.len(), expected.len());
    for ((name, dtype, shape, data), (ename, t)) in entries.iter().zip(&expected) {
        assert_eq!(name, ename);
        assert_eq!(*dtype, 0);
        assert_eq!(shape.iter().map(|&d| d as usize).collect::<Vec<_>>(), t.shape());
        assert!(data.iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }
    let adapters: Vec<&str> = entries.iter().map(|e| e.0.as_str()).filter(|n| n.starts_with("lora.")).collect();
    let expected_adapters: Vec<String> = (0..2)
        .flat_map(|b| ["query", "key"].map(move |t| (b, t)))
        .flat_map(|(b, t)| ["w_down", "w_up", "scale"].map(|k| format!("lora.{b}.{t}.{k}")))
        .collect();
    assert_eq!(adapters, expected_adapters);
}

#[test]
fn trained_checkpoint_reproduces_scores() {
    let spec = DatasetSpec {
        n_real: 16,
        n_fake_per_family: 6,
        ..DatasetSpec::default()
    };
    let data = generate_pool(&spec, &[ManipulationFamily::Blend, ManipulationFamily::Warp], Quality::Hq, 0, 0).unwrap();
    let cfg = ViTConfig::default();
    let mut model = init_model::<f32>(&cfg).unwrap();
    let mut set = inject(&mut model, &LoraConfig::default()).unwrap();
    train(&mut model, Some(&mut set), &data, &TrainConfig { steps: 5, batch_size: 8, ..TrainConfig::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, Some(&set)).unwrap();
    let (m2, s2) = load_checkpoint::<f32>(&path, &cfg).unwrap();
    let a = evaluate(&ModelDetector { model: &model, adapters: Some(&set), batch_size: 50 }, &data, "x").unwrap();
    let b = evaluate(&ModelDetector { model: &m2, adapters: s2.as_ref(), batch_size: 50 }, &data, "x").unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_architecture_and_corruption_are_reported() {
    let cfg = ViTConfig::default();
    let model = init_model::<f32>(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None).unwrap();

    let deeper = ViTConfig { depth: 3, ..cfg.clone() };
    match load_checkpoint::<f32>(&path, &deeper) {
        Err(e @ Error::NameMismatch { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_checkpoint::<f64>(&path, &cfg), Err(Error::Parse { .. })));

    let mut bytes = fs::read(&path).unwrap();
    let first_magic = bytes.windows(4).position(|w| w == b"TNSR").unwrap();
    bytes[first_magic] = b'X';
    fs::write(&path, &bytes).unwrap();
    match load_checkpoint::<f32>(&path, &cfg) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, first_magic),
        other => panic!("{other:?}"),
    }

    let missing = dir.path().join("absent.ckpt");
    assert!(matches!(load_checkpoint::<f32>(&missing, &cfg), Err(Error::Io { .. })));
}
