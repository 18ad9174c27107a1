mod common;

use common::*;
use pavescan::checkpoint::{Checkpoint, CheckpointError};
use pavescan::tensor::Tensor;
use pavescan::Detector;
use std::collections::BTreeMap;

fn checkpoint(seed: u64) -> Checkpoint {
    let mut det = Detector::<f32>::new(small_config(), seed).unwrap();
    let mut r = rng(seed);
    use rand::Rng;
    for e in det.params_mut().entries_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1f32..0.1));
    }
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), "3".to_string());
    Checkpoint::from_detector(&det, pavescan::data::class_names(), meta)
}

#[test]
fn round_trip_is_byte_stable_and_prediction_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let ck = checkpoint(seed);
        let path = dir.path().join(format!("m{seed}.ckpt"));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
        assert_eq!(loaded.model_id(), ck.model_id());
        let x = Tensor::from_fn(vec![2, 3, 64, 64], |i| ((i * 7919) % 256) as f32 / 255.0);
        let a = ck.detector().unwrap().predict(&x).unwrap();
        let b = loaded.detector().unwrap().predict(&x).unwrap();
        for (p, q) in a.scales.iter().zip(&b.scales) {
            let pb: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u32> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
    }
    assert_ne!(checkpoint(0).model_id(), checkpoint(1).model_id());
}

#[test]
fn truncation_names_first_missing_array() {
    let ck = checkpoint(4);
    let bytes = ck.to_bytes();
    let last = ck.params.entries().last().unwrap();
    let cut = bytes.len() - last.value.numel() * 4 + 1;
    match Checkpoint::from_bytes(&bytes[..cut]) {
        Err(CheckpointError::Truncated { array, .. }) => assert_eq!(array, last.name),
        other => panic!("expected truncation error, got {other:?}"),
    }
    let msg = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
    assert!(msg.contains(&last.name), "{msg}");
}

#[test]
fn foreign_bytes_are_rejected() {
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    let mut bytes = checkpoint(5).to_bytes();
    bytes[20] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let v2 = String::from_utf8_lossy(&checkpoint(5).to_bytes()).replacen("pavescan-checkpoint 1", "pavescan-checkpoint 9", 1);
    assert!(matches!(Checkpoint::from_bytes(v2.as_bytes()), Err(CheckpointError::Version { .. })));
}
