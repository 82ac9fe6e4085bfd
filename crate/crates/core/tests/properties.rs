//! Property tests over the numeric invariants the kernels promise.

use proptest::prelude::*;
use svphw_core::conv::{conv2d_forward, ConvPath};
use svphw_core::latent::kl_scalar;
use svphw_core::layers::{conv_lstm_step, ConvLstmState};
use svphw_core::model::fuse;
use svphw_core::tape::Tape;
use svphw_core::tensor::Tensor;
use svphw_core::warp::{accumulated_splat_weight, backward_warp, forward_warp_average, FlowField};

fn tensor_strategy(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.to_vec(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(mq in -4.0..4.0f64, lq in -2.0..2.0f64, mp in -4.0..4.0f64, lp in -2.0..2.0f64) {
        // tiny negative slack for rounding when q ~= p
        prop_assert!(kl_scalar(mq, lq, mp, lp) >= -1e-12);
    }

    #[test]
    fn backward_warp_stays_in_source_hull(
        src in tensor_strategy(&[1, 1, 5, 5], 0.0, 1.0),
        flow in tensor_strategy(&[1, 2, 5, 5], -3.0, 3.0),
    ) {
        let out = backward_warp(&src, &FlowField::new(flow).unwrap()).unwrap();
        let (lo, hi) = src.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn splat_weight_total_matches_interior_footprints(
        flow in tensor_strategy(&[1, 2, 6, 6], -2.0, 2.0),
    ) {
        // Arbitrary fractional flows: conservation holds to rounding.
        let field = FlowField::new(flow.clone()).unwrap();
        let den = accumulated_splat_weight(&field);
        let total: f64 = den.data().iter().sum();
        let (h, w) = (6usize, 6usize);
        let mut expected = 0.0;
        for y in 0..h {
            for x in 0..w {
                let tx = x as f64 + flow.data()[y * w + x];
                let ty = y as f64 + flow.data()[h * w + y * w + x];
                let (x0, y0) = (tx.floor(), ty.floor());
                let (fx, fy) = (tx - x0, ty - y0);
                for (qx, qy, wq) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ] {
                    if qx >= 0.0 && qx < w as f64 && qy >= 0.0 && qy < h as f64 {
                        expected += wq;
                    }
                }
            }
        }
        prop_assert!((total - expected).abs() < 1e-9, "total {total} vs {expected}");
    }

    #[test]
    fn splat_holes_are_zero_valued(
        src in tensor_strategy(&[1, 1, 5, 5], 0.0, 1.0),
        flow in tensor_strategy(&[1, 2, 5, 5], -4.0, 4.0),
    ) {
        let field = FlowField::new(flow).unwrap();
        let out = forward_warp_average(&src, &field, 1e-6).unwrap();
        for (v, w) in out.warped.data().iter().zip(out.validity.data()) {
            if *w == 0.0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn fuse_masks_form_a_simplex(
        logits in tensor_strategy(&[1, 3, 4, 4], -8.0, 8.0),
        a in tensor_strategy(&[1, 1, 4, 4], 0.0, 1.0),
        b in tensor_strategy(&[1, 1, 4, 4], 0.0, 1.0),
        c in tensor_strategy(&[1, 1, 4, 4], 0.0, 1.0),
    ) {
        let mut tape = Tape::<f64>::new();
        let (av, bv, cv) = (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(c.clone()));
        let lg = tape.constant(logits);
        let (fused, masks) = fuse(&mut tape, av, bv, cv, lg).unwrap();
        let m = tape.value(masks);
        for i in 0..16 {
            let s: f64 = (0..3).map(|ch| m.data()[ch * 16 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for ch in 0..3 {
                prop_assert!(m.data()[ch * 16 + i] >= 0.0);
            }
            let (x, y, z) = (a.data()[i], b.data()[i], c.data()[i]);
            let (lo, hi) = (x.min(y).min(z), x.max(y).max(z));
            let f = tape.value(fused).data()[i];
            prop_assert!(f >= lo - 1e-6 && f <= hi + 1e-6);
        }
    }

    #[test]
    fn conv_same_padding_preserves_shape(h in 3usize..9, w in 3usize..9) {
        let x = Tensor::<f64>::zeros(&[1, 2, h, w]);
        let k = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let y = conv2d_forward(&x, &k, &b, 1, 1, ConvPath::Im2col).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
    }

    #[test]
    fn lstm_cell_growth_bounded(
        cell in tensor_strategy(&[1, 2, 3, 3], -3.0, 3.0),
        hidden in tensor_strategy(&[1, 2, 3, 3], -1.0, 1.0),
        x in tensor_strategy(&[1, 1, 3, 3], -1.0, 1.0),
        w in tensor_strategy(&[8, 3, 1, 1], -2.0, 2.0),
        b in tensor_strategy(&[8], -1.0, 1.0),
    ) {
        let mut tape = Tape::<f64>::new();
        let state = ConvLstmState { hidden: tape.constant(hidden), cell: tape.constant(cell.clone()) };
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let next = conv_lstm_step(&mut tape, xv, &state, wv, bv).unwrap();
        for (c1, c0) in tape.value(next.cell).data().iter().zip(cell.data()) {
            prop_assert!(c1.abs() <= c0.abs() + 1.0 + 1e-12);
        }
    }
}
