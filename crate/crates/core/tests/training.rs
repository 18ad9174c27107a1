mod common;

use common::*;
use pavescan::data::LabelRecord;
use pavescan::detector::{Detector, NetworkConfig};
use pavescan::params::{Mode, Session};
use pavescan::tensor::{Tape, Tensor, Var};
use pavescan::training::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_labels(r: &mut ChaCha8Rng, classes: usize, max: usize) -> Vec<LabelRecord> {
    (0..r.gen_range(0..=max))
        .map(|_| {
            let w = r.gen_range(0.05..0.7);
            let h = r.gen_range(0.05..0.7);
            LabelRecord {
                class_id: r.gen_range(0..classes),
                cx: r.gen_range(w / 2.0..1.0 - w / 2.0),
                cy: r.gen_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
            }
        })
        .collect()
}

fn filled_raw(net: &NetworkConfig, n: usize, f: impl Fn(usize) -> f64) -> Vec<Tensor<f64>> {
    let no = net.outputs_per_anchor();
    (0..net.num_scales)
        .map(|s| {
            let g = net.grid(s);
            Tensor::from_fn(vec![n, net.anchors_per_scale() * no, g, g], |i| f((i / (g * g)) % no))
        })
        .collect()
}

fn loss_of(raw: &[Tensor<f64>], targets: &Targets, net: &NetworkConfig, cfg: &LossConfig) -> (f64, LossBreakdown) {
    let tape = Tape::new();
    let vars: Vec<Var> = raw.iter().map(|t| tape.constant(t.clone())).collect();
    let out = compute_loss(&tape, &vars, targets, net, cfg).unwrap();
    let total = tape.value(out.total).data()[0];
    (total, out.breakdown)
}

#[test]
fn empty_ground_truth_has_no_positives() {
    let net = small_config();
    let t = assign_targets(&[vec![], vec![]], &net, ANCHOR_THRESHOLD).unwrap();
    assert_eq!(t.num_positives(), 0);
    assert_eq!(t.batch, 2);
}

#[test]
fn ground_truth_equal_to_anchor_is_positive() {
    let net = small_config();
    let size = net.input_size as f64;
    for scale in 0..net.num_scales {
        for (a, &[aw, ah]) in net.anchors[scale].iter().enumerate() {
            let r = LabelRecord {
                class_id: 1,
                cx: 0.43,
                cy: 0.58,
                w: aw as f64 / size,
                h: ah as f64 / size,
            };
            let t = assign_targets(&[vec![r]], &net, ANCHOR_THRESHOLD).unwrap();
            let g = net.grid(scale) as f64;
            let hit = t.scales[scale].positives.iter().any(|p| {
                p.site.anchor == a && p.site.gx == (0.43 * g) as usize && p.site.gy == (0.58 * g) as usize
            });
            assert!(hit, "scale {scale} anchor {a}");
        }
    }
}

#[test]
fn assignment_agrees_with_brute_force_ratio_test() {
    let net = small_config();
    let mut r = rng(1);
    for _ in 0..300 {
        let n = r.gen_range(1..4);
        let gt: Vec<Vec<LabelRecord>> = (0..n).map(|_| random_labels(&mut r, 4, 5)).collect();
        let thr = [2.0, 4.0, 8.0][r.gen_range(0..3)];
        let t = assign_targets(&gt, &net, thr).unwrap();
        for scale in 0..net.num_scales {
            let g = net.grid(scale) as f64;
            let stride = net.stride(scale) as f64;
            for (image, labels) in gt.iter().enumerate() {
                for (k, l) in labels.iter().enumerate() {
                    for (a, &[aw, ah]) in net.anchors[scale].iter().enumerate() {
                        let rw = l.w * g / (aw as f64 / stride);
                        let rh = l.h * g / (ah as f64 / stride);
                        let worst = [rw, 1.0 / rw, rh, 1.0 / rh].into_iter().fold(0.0, f64::max);
                        let sites: Vec<_> = t.scales[scale]
                            .positives
                            .iter()
                            .filter(|p| p.site.image == image && p.gt_index == k && p.site.anchor == a)
                            .collect();
                        if worst < thr {
                            let (cx, cy) = ((l.cx * g) as usize, (l.cy * g) as usize);
                            assert!(sites.iter().any(|p| p.site.gx == cx && p.site.gy == cy));
                            assert!(sites.len() <= 3);
                            for p in &sites {
                                let d = p.site.gx.abs_diff(cx) + p.site.gy.abs_diff(cy);
                                assert!(d <= 1);
                                assert_eq!(p.class_id, l.class_id);
                                assert!(p.target[0] > -0.5 && p.target[0] < 1.5);
                                assert!(p.target[1] > -0.5 && p.target[1] < 1.5);
                            }
                        } else {
                            assert!(sites.is_empty());
                        }
                    }
                }
            }
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn saturated_logits_give_tiny_losses() {
    let net = small_config();
    let mut r = rng(2);
    for _ in 0..20 {
        let labels = vec![LabelRecord {
            class_id: r.gen_range(0..4),
            cx: r.gen_range(0.3..0.7),
            cy: r.gen_range(0.3..0.7),
            w: r.gen_range(0.1..0.4),
            h: r.gen_range(0.1..0.4),
        }];
        let targets = assign_targets(&[labels], &net, ANCHOR_THRESHOLD).unwrap();
        assert!(targets.num_positives() > 0);
        let mut raw = filled_raw(&net, 1, |k| if k < 4 { 0.0 } else { -10.0 });
        for (s, st) in targets.scales.iter().enumerate() {
            for p in &st.positives {
                let d = raw[s].data_mut();
                d[p.site.index(&net, 0)] = logit((p.target[0] + 0.5) / 2.0);
                d[p.site.index(&net, 1)] = logit((p.target[1] + 0.5) / 2.0);
                d[p.site.index(&net, 2)] = logit((p.target[2] / p.anchor[0]).sqrt() / 2.0);
                d[p.site.index(&net, 3)] = logit((p.target[3] / p.anchor[1]).sqrt() / 2.0);
                d[p.site.index(&net, 4)] = 10.0;
                d[p.site.index(&net, 5 + p.class_id)] = 10.0;
            }
        }
        let (_, b) = loss_of(&raw, &targets, &net, &LossConfig::default());
        assert!(b.box_loss < 1e-3 && b.obj < 1e-3 && b.cls < 1e-3, "{b:?}");
    }
}

#[test]
fn zero_logits_without_ground_truth() {
    let net = small_config();
    let targets = assign_targets(&[vec![], vec![]], &net, ANCHOR_THRESHOLD).unwrap();
    let raw = filled_raw(&net, 2, |_| 0.0);
    let (total, b) = loss_of(&raw, &targets, &net, &LossConfig::default());
    assert!((b.obj - 0.6931).abs() < 1e-4);
    assert!((b.obj - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!((b.box_loss, b.cls), (0.0, 0.0));
    assert!((total - b.obj).abs() < 1e-12);
}

#[test]
fn identical_boxes_have_no_box_loss() {
    let tape = Tape::<f64>::new();
    let mut r = rng(3);
    let cols: Vec<Tensor<f64>> = (0..4)
        .map(|k| rand_tensor(&mut r, &[16], if k < 2 { 0.0 } else { 1.0 }, 5.0))
        .collect();
    let a: Vec<Var> = cols.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<Var> = cols.iter().map(|t| tape.constant(t.clone())).collect();
    let c = ciou(&tape, [a[0], a[1], a[2], a[3]], [b[0], b[1], b[2], b[3]]).unwrap();
    for v in tape.value(c).data() {
        assert!((1.0 - v).abs() < 1e-6);
    }
}

#[test]
fn total_is_the_weighted_component_sum() {
    let net = small_config();
    let mut r = rng(4);
    for _ in 0..20 {
        let gt: Vec<Vec<LabelRecord>> = (0..2).map(|_| random_labels(&mut r, 4, 4)).collect();
        let targets = assign_targets(&gt, &net, ANCHOR_THRESHOLD).unwrap();
        let raw: Vec<Tensor<f64>> = filled_raw(&net, 2, |_| 0.0)
            .into_iter()
            .map(|t| rand_tensor(&mut r, t.shape(), -3.0, 3.0))
            .collect();
        let cfg = LossConfig {
            box_weight: r.gen_range(0.0..1.0),
            obj_weight: r.gen_range(0.0..1.0),
            cls_weight: r.gen_range(0.0..1.0),
            ..LossConfig::default()
        };
        let (total, b) = loss_of(&raw, &targets, &net, &cfg);
        let expect = cfg.box_weight * b.box_loss + cfg.obj_weight * b.obj + cfg.cls_weight * b.cls;
        assert!((total - expect).abs() < 1e-12);
        assert!((b.total - expect).abs() < 1e-12);
        assert!(b.box_loss >= 0.0 && b.obj >= 0.0 && b.cls >= 0.0);
    }
}

fn samples(seed: u64, n: usize, size: usize) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Sample {
            image: Tensor::from_fn(vec![3, size, size], |_| r.gen_range(0.0f32..1.0)),
            labels: random_labels(&mut r, 4, 3),
        })
        .collect()
}

fn names() -> Vec<String> {
    pavescan::data::class_names()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn trainable_bits(det: &Detector<f32>) -> Vec<u32> {
    det.params()
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let train = samples(5, 8, 64);
    let mut det = Detector::<f32>::new(small_config(), 5).unwrap();
    let before = trainable_bits(&det);
    let cfg = TrainConfig {
        lr: 0.0,
        shuffle: false,
        flip_prob: 0.0,
        ..quick_config()
    };
    let report = fit(&mut det, &train, &[], &names(), &cfg, |_| {}).unwrap();
    assert_eq!(trainable_bits(&det), before);
    let hist = report.history.split("train");
    assert_eq!(hist.len(), 3);
    assert!(hist.iter().all(|l| l == &hist[0]));
}

#[test]
fn one_sgd_step_matches_hand_update() {
    let batch = samples(6, 3, 64);
    let mut det = Detector::<f32>::new(small_config(), 6).unwrap();
    let cfg = TrainConfig::default();
    let lr = 0.01;

    // Oracle: gradient of the batch-scaled objective, then w − lr·(g + λw).
    let labels: Vec<Vec<LabelRecord>> = batch.iter().map(|s| s.labels.clone()).collect();
    let targets = assign_targets(&labels, det.config(), ANCHOR_THRESHOLD).unwrap();
    let images = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let mut s = Session::new(&tape, det.params(), Mode::Train, true);
    let x = tape.constant(images);
    let raw = det.forward(&mut s, x).unwrap();
    let loss = compute_loss(&tape, &raw, &targets, det.config(), &cfg.loss).unwrap();
    let objective = tape.scale(loss.total, batch.len() as f32);
    tape.backward(objective).unwrap();
    let expected: Vec<Option<Vec<f32>>> = det
        .params()
        .entries()
        .iter()
        .zip(s.vars())
        .map(|(e, &v)| {
            e.trainable.then(|| {
                let g = tape.grad(v).unwrap();
                let decay = if e.value.rank() >= 2 { cfg.weight_decay as f32 } else { 0.0 };
                e.value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&w, &g)| w - lr as f32 * (g + decay * w))
                    .collect()
            })
        })
        .collect();
    drop(s);

    let mut opt = Optimizer::new(OptimizerKind::Sgd, cfg.momentum, cfg.weight_decay);
    let l = train_step(&mut det, &mut opt, &batch, &cfg, lr, 1, 0).unwrap();
    assert!((l.total - loss.breakdown.total).abs() < 1e-12);
    for (e, exp) in det.params().entries().iter().zip(expected) {
        if let Some(exp) = exp {
            for (a, b) in e.value.data().iter().zip(&exp) {
                assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()), "{}: {a} vs {b}", e.name);
            }
        }
    }
}

#[test]
fn seeded_fit_is_reproducible() {
    let train = samples(7, 8, 64);
    let val = samples(8, 4, 64);
    let run = || {
        let mut det = Detector::<f32>::new(small_config(), 9).unwrap();
        let r = fit(&mut det, &train, &val, &names(), &quick_config(), |_| {}).unwrap();
        (r.history.to_text(), r.best.to_bytes(), Checkpoint::from_detector(&det, names(), Default::default()).to_bytes())
    };
    assert_eq!(run(), run());
}

use pavescan::Checkpoint;

#[test]
fn training_reduces_smoothed_loss() {
    let train = samples(10, 8, 64);
    let mut det = Detector::<f32>::new(small_config(), 10).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        lr: 0.02,
        ..quick_config()
    };
    let report = fit(&mut det, &train, &[], &names(), &cfg, |_| {}).unwrap();
    let totals: Vec<f64> = report.history.split("train").iter().map(|l| l.total).collect();
    let s = smoothed(&totals, 3);
    assert!(s.last().unwrap() < s.first().unwrap(), "{totals:?}");
}

#[test]
fn learning_rate_schedule_shape() {
    let cfg = TrainConfig::default();
    let (total, per_epoch) = (300, 10);
    let lrs: Vec<f64> = (0..total).map(|i| cfg.lr_at(i, total, per_epoch)).collect();
    for w in lrs[..per_epoch].windows(2) {
        assert!(w[1] > w[0]);
    }
    for w in lrs[per_epoch..].windows(2) {
        assert!(w[1] <= w[0]);
    }
    assert!((lrs[total - 1] - cfg.lr * cfg.final_lr_fraction).abs() < 1e-15);
    assert!(lrs.iter().all(|&l| l > 0.0 && l <= cfg.lr));
}
