use geossl::tensor::{grad_check, grad_check_many, Tape, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Entries in [-2, 2] kept at least 1e-2 away from zero.
fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.01f64..2.0, any::<bool>()), n).prop_map(|v| v.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect())
}

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    entries(shape.iter().product()).prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

/// Contracts `y` with fixed uneven weights so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var) -> geossl::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.73 + 0.2).sin()).collect())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_pass_grad_check(x in tensor(&[3, 4])) {
        let ops: [fn(&mut Tape, Var) -> geossl::Result<Var>; 8] = [
            |t, v| Ok(t.relu(v)),
            |t, v| Ok(t.gelu(v)),
            |t, v| Ok(t.tanh(v)),
            |t, v| Ok(t.sigmoid(v)),
            |t, v| Ok(t.exp(v)),
            |t, v| Ok(t.softplus(v)),
            |t, v| { let s = t.mul(v, v)?; let s = t.add_scalar(s, 0.5); t.log(s) },
            |t, v| { let s = t.mul(v, v)?; t.sqrt(s) },
        ];
        for (k, op) in ops.iter().enumerate() {
            let err = grad_check(|t, v| { let y = op(t, v)?; weighted_sum(t, y) }, &x, STEP).unwrap();
            prop_assert!(err < TOL, "op {k}: {err}");
        }
    }

    #[test]
    fn broadcast_binary_ops_pass_grad_check(a in tensor(&[3, 4]), b in tensor(&[4]), c in tensor(&[3, 1])) {
        let xs = [a, b, c];
        let err = grad_check_many(|t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[2])?;
            let d = t.sub(m, v[1])?;
            let q = t.div(d, v[2])?;
            weighted_sum(t, q)
        }, &xs, STEP, None).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_variants_pass_grad_check(a in tensor(&[2, 3, 4]), b in tensor(&[2, 4, 5]), c in tensor(&[2, 4, 5])) {
        let xs = [a, b, c];
        let err = grad_check_many(|t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let abc = t.matmul_t(ab, v[2])?;
            weighted_sum(t, abc)
        }, &xs, STEP, None).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_and_norm_pass_grad_check(x in tensor(&[2, 3, 5]), g in tensor(&[5]), b in tensor(&[5])) {
        let xs = [x, g, b];
        let err = grad_check_many(|t, v| {
            let s = t.softmax(v[0], 2)?;
            let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let p = t.mul(s, n)?;
            weighted_sum(t, p)
        }, &xs, STEP, None).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn shape_ops_pass_grad_check(x in tensor(&[2, 3, 4])) {
        let err = grad_check(|t, v| {
            let p = t.permute(v, &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let s = t.slice(r, 1, 1, 4)?;
            let c = t.concat(&[s, s], 0)?;
            let m = t.mean_axis(c, 1, true)?;
            let s2 = t.sum_axis(c, 0, false)?;
            let a = weighted_sum(t, m)?;
            let b = weighted_sum(t, s2)?;
            t.add(a, b)
        }, &x, STEP).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv_passes_grad_check(x in tensor(&[1, 2, 5, 5]), w in tensor(&[3, 2, 3, 3]), b in tensor(&[3])) {
        let xs = [x, w, b];
        let err = grad_check_many(|t, v| {
            // small weights keep tanh away from saturation, where the
            // true gradient vanishes below the difference noise
            let w = t.scale(v[1], 0.2);
            let y = t.conv2d(v[0], w, Some(v[2]), 2, 1)?;
            let y = t.tanh(y);
            weighted_sum(t, y)
        }, &xs, STEP, None).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in prop::collection::vec(-30.0f64..30.0, 12), shift in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3, 4], x.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 4], x.iter().map(|v| v + shift).collect()).unwrap());
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        for row in tape.value(sa).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic(x in tensor(&[4, 6]), w in tensor(&[6, 3])) {
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h);
            let s = tape.softmax(h, 1).unwrap();
            let l = weighted_sum(&mut tape, s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).clone(), tape.grad(xv).unwrap(), tape.grad(wv).unwrap())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn batched_gradient_is_sum_of_per_example_gradients(x in tensor(&[4, 5]), w in tensor(&[5, 2])) {
        let loss_grad = |rows: &[usize]| {
            let mut tape = Tape::new();
            let data: Vec<f64> = rows.iter().flat_map(|&r| x.data()[r * 5..(r + 1) * 5].to_vec()).collect();
            let xv = tape.constant(Tensor::new(vec![rows.len(), 5], data).unwrap());
            let wv = tape.param(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.tanh(h);
            let sq = tape.mul(h, h).unwrap();
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
            tape.grad(wv).unwrap()
        };
        let batched = loss_grad(&[0, 1, 2, 3]);
        let mut summed = vec![0.0; 10];
        for r in 0..4 {
            for (s, g) in summed.iter_mut().zip(loss_grad(&[r]).data()) {
                *s += g;
            }
        }
        for (a, b) in batched.data().iter().zip(&summed) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
