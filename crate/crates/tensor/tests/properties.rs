use pavescan_tensor::{Pool, Tape, Tensor};
use proptest::prelude::*;

fn conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> Tensor<f32> {
    let tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    let out = tape.value(y).clone();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_shape_law(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..9, w in 1usize..9, k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = Tensor::from_fn([n, cin, h, w], |i| (i as f32 * 0.1).sin());
        let wt = Tensor::from_fn([cout, cin, k, k], |i| (i as f32 * 0.3).cos());
        let y = conv(&x, &wt, stride, pad);
        prop_assert_eq!(y.shape(), &[n, cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    #[test]
    fn pool_shape_laws(n in 1usize..3, c in 1usize..4, h in 1usize..8, w in 1usize..8) {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([n, c, h, w], |i| i as f32));
        let g = tape.pool(x, Pool::GlobalAvgSpatial).unwrap();
        let ch = tape.pool(x, Pool::MaxOverChannels).unwrap();
        let mp = tape.pool(x, Pool::MaxPool2d { kernel: 3, stride: 1, padding: 1 }).unwrap();
        prop_assert_eq!(tape.shape(g), vec![n, c, 1, 1]);
        prop_assert_eq!(tape.shape(ch), vec![n, 1, h, w]);
        prop_assert_eq!(tape.shape(mp), vec![n, c, h, w]);
    }

    #[test]
    fn conv2d_is_linear(
        a in -2.0f32..2.0, b in -2.0f32..2.0, seed in 0u32..1000,
    ) {
        let x = Tensor::from_fn([1, 2, 6, 5], |i| ((i as u32 * 31 + seed) % 17) as f32 / 17.0 - 0.5);
        let y = Tensor::from_fn([1, 2, 6, 5], |i| ((i as u32 * 13 + seed * 7) % 23) as f32 / 23.0 - 0.5);
        let w = Tensor::from_fn([3, 2, 3, 3], |i| ((i as u32 * 5 + seed) % 11) as f32 / 11.0 - 0.5);
        let mix = Tensor::new([1, 2, 6, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv(&mix, &w, 1, 1);
        let cx = conv(&x, &w, 1, 1);
        let cy = conv(&y, &w, 1, 1);
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() <= 1e-6 * (1.0 + l.abs()) * 4.0);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u32..1000) {
        let x = Tensor::from_fn([2, 3, 7, 7], |i| ((i as u32 ^ seed) % 29) as f32 / 29.0);
        let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i as u32 * 3 + seed) % 7) as f32 / 7.0 - 0.4);
        prop_assert_eq!(conv(&x, &w, 2, 1), conv(&x, &w, 2, 1));
    }
}
