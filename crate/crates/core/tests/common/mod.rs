#![allow(dead_code)]

use pavescan::params::{Builder, ParamStore};
use pavescan::tensor::{Tape, Tensor, Var};
use pavescan::NetworkConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Builds parameters with `f`, then jitters every trainable entry so batch
/// norm affine terms are not at their identity values.
pub fn build<R>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> R) -> (ParamStore<f64>, R) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let out = {
        let mut b = Builder::new(&mut store, &mut r);
        f(&mut b)
    };
    let mut j = rng(seed ^ 0x5eed);
    for e in store.entries_mut() {
        if e.trainable {
            for v in e.value.data_mut() {
                *v += j.gen_range(-0.3..0.3);
            }
        }
    }
    (store, out)
}

pub fn trainable(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.entries().iter().filter(|e| e.trainable).map(|e| e.value.clone()).collect()
}

/// One variable per store entry: trainable entries come from `inputs` in
/// order, the rest become constants.
pub fn session_vars(tape: &Tape<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Vec<Var> {
    let mut it = inputs.iter();
    store
        .entries()
        .iter()
        .map(|e| if e.trainable { *it.next().expect("enough inputs") } else { tape.constant(e.value.clone()) })
        .collect()
}

/// `Σ y·r` for a fixed random `r`.
pub fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> pavescan::Result<Var> {
    let mut r = rng(seed ^ 0xABCD);
    let w = tape.constant(rand_tensor(&mut r, &tape.shape(y), -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Two-stage, two-scale network small enough for finite differences.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 16,
        num_classes: 2,
        width_multiple: 1.0,
        depth_multiple: 1.0,
        stem_channels: 2,
        stage_channels: vec![4, 4],
        bottlenecks: 1,
        num_scales: 2,
        anchors: vec![vec![[3.0, 4.0]], vec![[7.0, 6.0]]],
        cbam_sites: vec!["backbone.0".into(), "backbone.1".into()],
        cbam_reduction: 2,
        sppf_kernel: 3,
    }
}

/// Small three-scale network at 64 px.
pub fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 64,
        stem_channels: 4,
        stage_channels: vec![8, 8, 16, 16],
        width_multiple: 1.0,
        anchors: vec![
            vec![[4.0, 5.0], [8.0, 10.0]],
            vec![[12.0, 14.0], [16.0, 24.0]],
            vec![[30.0, 28.0], [40.0, 50.0]],
        ],
        ..NetworkConfig::toy()
    }
}
