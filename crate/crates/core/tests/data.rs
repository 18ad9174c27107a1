mod common;

use pavescan::data::*;
use pavescan::evaluation::BoundingBox;
use proptest::prelude::*;
use std::path::Path;

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small(n: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_images: n,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn generator_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small(30, 11), a.path()).unwrap();
    generate_synthetic(&small(30, 11), b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 61);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&small(30, 12), c.path()).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn generated_manifest_loads_and_labels_are_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small(20, 3), dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.entries, m.entries);
    assert_eq!(loaded.subset(Split::Train).entries.len(), 16);
    assert_eq!(loaded.subset(Split::Val).entries.len(), 4);
    for e in &loaded.entries {
        let labels = loaded.labels(e).unwrap();
        assert!((1..=3).contains(&labels.len()));
        for l in labels {
            assert!(l.check(NUM_CLASSES).is_ok());
        }
    }
}

#[test]
fn class_counts_follow_the_weights() {
    let cfg = small(400, 7);
    let mut counts = [0usize; NUM_CLASSES];
    for i in 0..cfg.num_images {
        for l in render_image(&cfg, i).unwrap().labels {
            counts[l.class_id] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (c, &k) in counts.iter().enumerate() {
        let p = cfg.class_weights[c];
        let mean = total as f64 * p;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        assert!((k as f64 - mean).abs() <= 3.0 * sd, "class {c}: {k} of {total}");
    }
}

fn entries(n: usize) -> DatasetManifest {
    DatasetManifest {
        root: "/nonexistent".into(),
        classes: class_names(),
        entries: (0..n)
            .map(|i| ManifestEntry {
                split: Split::Unassigned,
                image: format!("images/{i}.png"),
                width: 10,
                height: 10,
                label: format!("labels/{i}.txt"),
            })
            .collect(),
    }
}

#[test]
fn split_sizes_are_exact() {
    for (n, tr, va) in [(100, 80, 20), (5, 4, 1), (500, 400, 100), (1, 1, 0)] {
        let (t, v) = split(&entries(n), 0.8, 3).unwrap();
        assert_eq!((t.entries.len(), v.entries.len()), (tr, va));
        let mut all: Vec<_> = t.entries.iter().chain(&v.entries).map(|e| e.image.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}

#[test]
fn letterbox_examples() {
    let t = LetterboxTransform::new(200, 100, 160);
    assert_eq!((t.scale_x, t.scale_y, t.pad_x, t.pad_y), (0.8, 0.8, 0.0, 40.0));
    let img = image::RgbImage::from_pixel(200, 100, image::Rgb([10, 20, 30]));
    let (boxed, _) = letterbox(&img, 160);
    assert_eq!(boxed.dimensions(), (160, 160));
    assert_eq!(boxed.get_pixel(80, 10).0, [PAD_VALUE; 3]);
    assert_eq!(boxed.get_pixel(80, 80).0, [10, 20, 30]);
}

#[test]
fn label_parsing_examples() {
    let p = Path::new("x.txt");
    let r = parse_labels("0 0.5 0.5 0.25 0.25\n\n3 0.1 0.2 0.1 0.2\n", 4, p).unwrap();
    assert_eq!(r.len(), 2);
    let b = r[0].to_box(160.0, 160.0).unwrap();
    assert_eq!((b.x1, b.y1, b.x2, b.y2), (60.0, 60.0, 100.0, 100.0));
    assert!(parse_labels("4 0.5 0.5 0.1 0.1", 4, p).is_err());
    assert!(parse_labels("0 0.5 0.5 0.1", 4, p).is_err());
    assert!(parse_labels("0 1.5 0.5 0.1 0.1", 4, p).is_err());
    assert!(parse_labels("0 0.5 0.5 0.0 0.1", 4, p).is_err());
    assert!(parse_labels("", 4, p).unwrap().is_empty());
}

proptest! {
    #[test]
    fn letterbox_box_round_trip(
        w in 16usize..1200, h in 16usize..1200, size in prop::sample::select(vec![64usize, 160, 320, 640]),
        fx1 in 0.0f64..1.0, fy1 in 0.0f64..1.0, fw in 0.01f64..1.0, fh in 0.01f64..1.0,
    ) {
        let t = LetterboxTransform::new(w, h, size);
        let (wf, hf) = (w as f64, h as f64);
        let x1 = fx1 * wf * 0.99;
        let y1 = fy1 * hf * 0.99;
        let b = BoundingBox::new(x1, y1, (x1 + fw * wf).min(wf), (y1 + fh * hf).min(hf)).unwrap();
        let net = t.forward_box(&b).unwrap();
        prop_assert!(net.x1 >= -1e-9 && net.y1 >= -1e-9);
        prop_assert!(net.x2 <= size as f64 + 1e-9 && net.y2 <= size as f64 + 1e-9);
        let back = t.inverse_box(&net).unwrap();
        for (a, b) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            prop_assert!((a - b).abs() <= 0.5);
        }
        // Against the nominal uniform scale the rounding error stays sub-pixel too.
        let s = (size as f64 / wf).min(size as f64 / hf);
        let nominal = (b.x2 * s + (size as f64 - wf * s) / 2.0 - net.x2).abs();
        prop_assert!(nominal <= 1.0 + 1e-9);
    }

    #[test]
    fn label_format_round_trips(cls in 0usize..4, cx in 0.2f64..0.8, cy in 0.2f64..0.8, w in 0.01f64..0.4, h in 0.01f64..0.4) {
        let r = LabelRecord { class_id: cls, cx, cy, w, h };
        let parsed = parse_labels(&format_labels(&[r]), 4, Path::new("p")).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        prop_assert_eq!(parsed[0].class_id, cls);
        prop_assert!((parsed[0].cx - cx).abs() <= 5e-7 && (parsed[0].w - w).abs() <= 5e-7);
    }
}
