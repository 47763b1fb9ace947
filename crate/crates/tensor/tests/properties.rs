use cslid_tensor::{GruWeights, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn values(n: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, n)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((n, k, data) in (1usize..5, 1usize..8).prop_flat_map(|(n, k)| (Just(n), Just(k), values(n * k, 30.0)))) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(vec![n, k], data.clone()));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let mut tape32 = Tape::<f32>::new();
        let x = tape32.constant(Tensor::new(vec![n, k], data.iter().map(|&v| v as f32).collect()).unwrap());
        let y = tape32.softmax_rows(x).unwrap();
        for row in tape32.value(y).data().chunks(k) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn bi_gru_on_reversed_input_swaps_and_reverses_halves(
        (t, d, h, x, wf, wb) in (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(t, d, h)| {
            let n = d * 3 * h + h * 3 * h + 6 * h;
            (Just(t), Just(d), Just(h), values(t * d, 2.0), values(n, 1.0), values(n, 1.0))
        })
    ) {
        let mut tape = Tape::<f64>::new();
        let mut load = |w: &[f64]| {
            let (a, rest) = w.split_at(d * 3 * h);
            let (b, rest) = rest.split_at(h * 3 * h);
            let (c, e) = rest.split_at(3 * h);
            GruWeights {
                w_ih: tape.constant(tensor(vec![d, 3 * h], a.to_vec())),
                w_hh: tape.constant(tensor(vec![h, 3 * h], b.to_vec())),
                b_ih: tape.constant(tensor(vec![3 * h], c.to_vec())),
                b_hh: tape.constant(tensor(vec![3 * h], e.to_vec())),
            }
        };
        let fwd = load(&wf);
        let bwd = load(&wb);
        let reversed: Vec<f64> = x.chunks(d).rev().flatten().copied().collect();
        let xv = tape.constant(tensor(vec![t, d], x));
        let xr = tape.constant(tensor(vec![t, d], reversed));
        let y = tape.bi_gru(xv, fwd, bwd).unwrap();
        let yr = tape.bi_gru(xr, bwd, fwd).unwrap();
        let (y, yr) = (tape.value(y), tape.value(yr));
        for ti in 0..t {
            let a = y.row(ti);
            let b = yr.row(t - 1 - ti);
            for j in 0..h {
                prop_assert!((a[j] - b[h + j]).abs() < 1e-12);
                prop_assert!((a[h + j] - b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ctc_loss_is_nonnegative_for_normalized_inputs(
        (t, v, logits, target) in (1usize..7, 2usize..5).prop_flat_map(|(t, v)| {
            (Just(t), Just(v), values(t * v, 4.0), prop::collection::vec(1..v, 0..=t))
        })
    ) {
        prop_assume!(cslid_tensor::ctc_feasible(&target, t));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(vec![t, v], logits));
        let lp = tape.log_softmax_rows(x).unwrap();
        let loss = tape.ctc_loss(lp, &target).unwrap();
        prop_assert!(tape.scalar(loss) >= -1e-12);
        prop_assert!(tape.scalar(loss).is_finite());
    }

    #[test]
    fn linear_matches_naive_product(
        (n, d, k, x, w, b) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(n, d, k)| {
            (Just(n), Just(d), Just(k), values(n * d, 3.0), values(d * k, 3.0), values(k, 3.0))
        })
    ) {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(tensor(vec![n, d], x.clone()));
        let wv = tape.constant(tensor(vec![d, k], w.clone()));
        let bv = tape.constant(tensor(vec![k], b.clone()));
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..n {
            for j in 0..k {
                let naive: f64 = b[j] + (0..d).map(|c| x[i * d + c] * w[c * k + j]).sum::<f64>();
                prop_assert!((tape.value(y).at(&[i, j]) - naive).abs() < 1e-12);
            }
        }
    }
}
