mod common;

use common::*;
use pavescan::detector::{decode, Detector, NetworkConfig, RawPrediction};
use pavescan::layers::{C3Cbam, Cbs, Sppf, C3};
use pavescan::params::{Mode, ParamStore, Session};
use pavescan::tensor::{Pool, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn eval<R>(store: &ParamStore<f64>, x: &Tensor<f64>, gate: Option<f64>, f: impl FnOnce(&mut Session<'_, f64>, Var) -> R) -> R {
    let tape = Tape::new();
    let mut s = Session::new(&tape, store, Mode::Eval, false);
    s.set_cbam_gate(gate);
    let v = tape.constant(x.clone());
    f(&mut s, v)
}

fn value(s: &Session<'_, f64>, v: Var) -> Tensor<f64> {
    s.tape.value(v).clone()
}

fn zero(store: &mut ParamStore<f64>, cbs: &Cbs) {
    store.get_mut(cbs.conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn cbs_with_zero_weights_outputs_zero() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let cbs = Cbs::build(&mut pavescan::params::Builder::new(&mut store, &mut r), "c", 3, 5, 3, 1);
    zero(&mut store, &cbs);
    let x = rand_tensor(&mut rng(1), &[2, 3, 6, 6], -1.0, 1.0);
    let y = eval(&store, &x, None, |s, v| {
        let y = cbs.forward(s, v).unwrap();
        value(s, y)
    });
    assert_eq!(y.shape(), &[2, 5, 6, 6]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cbs_stride_two_halves_extent() {
    let (store, cbs) = build(2, |b| Cbs::build(b, "c", 3, 4, 3, 2));
    for size in [4, 8, 10, 16] {
        let x = rand_tensor(&mut rng(3), &[1, 3, size, size], -1.0, 1.0);
        let y = eval(&store, &x, None, |s, v| {
            let y = cbs.forward(s, v).unwrap();
            value(s, y)
        });
        assert_eq!(y.shape(), &[1, 4, size / 2, size / 2]);
    }
}

#[test]
fn c3_with_zero_residual_path_matches_hand_chain() {
    let (mut store, c3) = build(4, |b| C3::build(b, 4, 6, 2, true));
    for m in &c3.m {
        zero(&mut store, &m.cv2);
    }
    // Batch norm shift on the zeroed path must vanish too.
    for m in &c3.m {
        store.get_mut(m.cv2.bn.beta).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(m.cv2.bn.running_mean).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = rand_tensor(&mut rng(5), &[2, 4, 5, 5], -1.0, 1.0);
    let (y, hand) = eval(&store, &x, None, |s, v| {
        let y = c3.forward(s, v).unwrap();
        let a = c3.cv1.forward(s, v).unwrap();
        let b = c3.cv2.forward(s, v).unwrap();
        let cat = s.tape.concat(&[a, b], 1).unwrap();
        let hand = c3.cv3.forward(s, cat).unwrap();
        (value(s, y), value(s, hand))
    });
    assert!(y.max_abs_diff(&hand).unwrap() < 1e-12);
}

fn zero_cbam(store: &mut ParamStore<f64>) {
    for e in store.entries_mut() {
        if e.name.contains("cbam.") {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn c3_cbam_with_zero_attention_matches_quarter_chain() {
    let (mut store, block) = build(6, |b| C3Cbam::build(b, 8, 6, 1, true, 4).unwrap());
    zero_cbam(&mut store);
    let x = rand_tensor(&mut rng(7), &[2, 8, 6, 6], -1.0, 1.0);
    let (y, hand) = eval(&store, &x, None, |s, v| {
        let y = block.forward(s, v).unwrap();
        let mut a = s.tape.scale(v, 0.25);
        for m in &block.m {
            a = m.forward(s, a).unwrap();
        }
        let b1 = block.branch1.forward(s, v).unwrap();
        let b2 = block.branch2.forward(s, v).unwrap();
        let cat = s.tape.concat(&[a, b1, b2], 1).unwrap();
        let hand = block.out.forward(s, cat).unwrap();
        (value(s, y), value(s, hand))
    });
    assert!(y.max_abs_diff(&hand).unwrap() <= 1e-6);
    let gated = eval(&store, &x, Some(0.25), |s, v| {
        let y = block.forward(s, v).unwrap();
        value(s, y)
    });
    assert!(y.max_abs_diff(&gated).unwrap() <= 1e-6);
}

#[test]
fn sppf_keeps_constant_maps_constant() {
    let (store, sppf) = build(8, |b| Sppf::build(b, 6, 5, 5));
    assert_eq!(store.get(sppf.cv2.conv.weight).shape(), &[5, 4 * 3, 1, 1]);
    let x = Tensor::from_fn(vec![1, 6, 7, 7], |i| (i / 49) as f64 * 0.3 - 0.7);
    let y = eval(&store, &x, None, |s, v| {
        let y = sppf.forward(s, v).unwrap();
        value(s, y)
    });
    for c in 0..5 {
        let plane = &y.data()[c * 49..(c + 1) * 49];
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn chained_stride_one_pools_never_decrease() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng(9), &[2, 3, 9, 9], -1.0, 1.0));
    let pool = Pool::MaxPool2d { kernel: 5, stride: 1, padding: 2 };
    let mut prev = x;
    for _ in 0..3 {
        let next = tape.pool(prev, pool).unwrap();
        let (a, b) = (tape.value(prev).clone(), tape.value(next).clone());
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| q >= p));
        prev = next;
    }
}

#[test]
fn toy_network_grids() {
    let cfg = NetworkConfig::toy();
    assert_eq!((0..3).map(|s| cfg.grid(s)).collect::<Vec<_>>(), vec![20, 10, 5]);
    let det = Detector::<f32>::new(cfg.clone(), 0).unwrap();
    let raw = det.predict(&Tensor::full(vec![1, 3, 160, 160], 0.5)).unwrap();
    let per = cfg.anchors_per_scale() * cfg.outputs_per_anchor();
    for (s, g) in [20, 10, 5].into_iter().enumerate() {
        assert_eq!(raw.scales[s].shape(), &[1, per, g, g]);
    }
}

#[test]
fn forward_is_deterministic_and_checks_input_size() {
    let det = Detector::<f64>::new(small_config(), 3).unwrap();
    let x = rand_tensor(&mut rng(10), &[2, 3, 64, 64], 0.0, 1.0);
    let a = det.predict(&x).unwrap();
    let b = det.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(Detector::<f64>::new(small_config(), 3).unwrap().predict(&x).unwrap(), a);
    for shape in [[1, 3, 32, 32], [1, 1, 64, 64], [1, 3, 64, 48]] {
        assert!(det.predict(&Tensor::zeros(shape.to_vec())).is_err());
    }
}

#[test]
fn zero_attention_network_equals_constant_gate() {
    let mut det = Detector::<f64>::new(small_config(), 11).unwrap();
    assert!(!det.cbam_blocks().is_empty());
    let mut jitter = rng(12);
    for e in det.params_mut().entries_mut() {
        if e.trainable {
            e.value.data_mut().iter_mut().for_each(|v| *v += jitter.gen_range(-0.2..0.2));
        }
    }
    zero_cbam(det.params_mut());
    let x = rand_tensor(&mut rng(13), &[1, 3, 64, 64], 0.0, 1.0);
    let plain = det.predict(&x).unwrap();
    let tape = Tape::new();
    let mut s = Session::new(&tape, det.params(), Mode::Eval, false);
    s.set_cbam_gate(Some(0.25));
    let v = tape.constant(x);
    let gated = det.forward(&mut s, v).unwrap();
    for (p, g) in plain.scales.iter().zip(gated) {
        assert!(p.max_abs_diff(&tape.value(g)).unwrap() <= 1e-6);
    }
}

fn raw_from(cfg: &NetworkConfig, n: usize, mut f: impl FnMut() -> f64) -> RawPrediction<f64> {
    RawPrediction {
        scales: (0..cfg.num_scales)
            .map(|s| {
                let g = cfg.grid(s);
                Tensor::from_fn(vec![n, cfg.anchors_per_scale() * cfg.outputs_per_anchor(), g, g], |_| f())
            })
            .collect(),
    }
}

#[test]
fn decode_threshold_one_is_empty() {
    let cfg = small_config();
    let raw = raw_from(&cfg, 2, || 30.0);
    assert!(decode(&raw, &cfg, 1.0).unwrap().iter().all(|d| d.is_empty()));
}

#[test]
fn decode_zero_offsets_give_anchor_box() {
    let cfg = small_config();
    let mut raw = raw_from(&cfg, 1, || -20.0);
    let no = cfg.outputs_per_anchor();
    let g = cfg.grid(0);
    for k in 0..4 {
        raw.scales[0].data_mut()[k * g * g] = 0.0;
    }
    raw.scales[0].data_mut()[4 * g * g] = 20.0;
    raw.scales[0].data_mut()[(no - 1) * g * g] = 20.0;
    let dets = decode(&raw, &cfg, 0.5).unwrap();
    assert_eq!(dets[0].len(), 1);
    let d = &dets[0][0];
    let stride = cfg.stride(0) as f64;
    let [aw, ah] = cfg.anchors[0][0];
    let (cx, cy) = d.bbox.center();
    assert!((cx - 0.5 * stride).abs() < 1e-9 && (cy - 0.5 * stride).abs() < 1e-9);
    assert!((d.bbox.width() - aw as f64).abs() < 1e-9);
    assert!((d.bbox.height() - ah as f64).abs() < 1e-9);
    assert_eq!(d.class_id, cfg.num_classes - 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_boxes_stay_inside_input(seed in any::<u64>(), spread in 0.1f64..12.0) {
        let cfg = small_config();
        let mut r = rng(seed);
        let raw = raw_from(&cfg, 2, || r.gen_range(-spread..spread));
        let size = cfg.input_size as f64;
        for d in decode(&raw, &cfg, 0.0).unwrap().iter().flatten() {
            prop_assert!(0.0 <= d.bbox.x1 && d.bbox.x1 < d.bbox.x2 && d.bbox.x2 <= size);
            prop_assert!(0.0 <= d.bbox.y1 && d.bbox.y1 < d.bbox.y2 && d.bbox.y2 <= size);
            prop_assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
}
