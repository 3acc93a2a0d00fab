//! Central finite-difference checks for every tape op, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvGeom, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Checks d loss / d inputs against central differences. `build` receives the
/// tape and the leaf handles and must return a scalar.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let loss = build(&mut tape, &vars);
        (tape, loss)
    };
    let (tape, loss) = eval(&inputs);
    let mut grads: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    tape.backward(loss, &mut grads);

    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data[j] += h;
            let mut minus = inputs.clone();
            minus[i].data[j] -= h;
            let (tp, lp) = eval(&plus);
            let (tm, lm) = eval(&minus);
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let analytic = grads[i].data[j];
            let err = (numeric - analytic).abs() / (1e-6 + numeric.abs().max(analytic.abs()));
            assert!(
                err < 1e-5 || (numeric - analytic).abs() < 1e-7,
                "input {i} elem {j}: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let (r, c) = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, r, c, 1.0);
    tape.dot_const(v, &w)
}

#[test]
fn linear_add_scale_relu_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        rand_tensor(&mut rng, 3, 4, 1.0),
        rand_tensor(&mut rng, 4, 5, 1.0),
        rand_tensor(&mut rng, 1, 5, 1.0),
        rand_tensor(&mut rng, 3, 5, 1.0),
    ];
    check(inputs, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]));
        let y = t.add(y, v[3]);
        let y = t.scale(y, 0.7);
        let r = t.relu(y);
        let s = t.sigmoid(y);
        let z = t.add(r, s);
        project(t, z, 9)
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        rand_tensor(&mut rng, 4, 6, 2.0),
        rand_tensor(&mut rng, 1, 6, 1.0),
        rand_tensor(&mut rng, 1, 6, 1.0),
    ];
    check(inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]);
        project(t, y, 3)
    });
}

#[test]
fn attention_with_and_without_mask() {
    for masked in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (lq, lk, d) = (5, 7, 8);
        let inputs = vec![
            rand_tensor(&mut rng, lq, d, 1.0),
            rand_tensor(&mut rng, lk, d, 1.0),
            rand_tensor(&mut rng, lk, d, 1.0),
        ];
        let mask: Vec<bool> = (0..lq * lk).map(|i| masked && i % 3 == 1).collect();
        check(inputs, |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, Some(&mask));
            project(t, y, 4)
        });
    }
}

#[test]
fn conv_transpose_gather_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let geom = ConvGeom {
        in_channels: 2,
        in_h: 6,
        in_w: 5,
        out_channels: 3,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let inputs = vec![
        rand_tensor(&mut rng, 2, 30, 1.0),
        rand_tensor(&mut rng, 3, 18, 1.0),
        rand_tensor(&mut rng, 3, 1, 1.0),
        rand_tensor(&mut rng, 2, 3, 1.0),
    ];
    check(inputs, move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geom);
        let y = t.transpose(y);
        let g = t.gather_rows(y, &[4, 0, 4, 2]);
        let c = t.concat_rows(g, v[3]);
        project(t, c, 5)
    });
}

#[test]
fn stride_one_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let geom = ConvGeom {
        in_channels: 1,
        in_h: 5,
        in_w: 5,
        out_channels: 2,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let inputs = vec![
        rand_tensor(&mut rng, 1, 25, 1.0),
        rand_tensor(&mut rng, 2, 9, 1.0),
        rand_tensor(&mut rng, 2, 1, 1.0),
    ];
    check(inputs, move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geom);
        project(t, y, 6)
    });
}

#[test]
fn cross_entropy_and_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![rand_tensor(&mut rng, 4, 3, 2.0), rand_tensor(&mut rng, 2, 2, 1.0)];
    check(inputs, |t, v| {
        let ce = t.cross_entropy(v[0], &[0, 2, 1, 2], &[1.0, 0.1, 0.5, 1.0], 2.6);
        let p = project(t, v[1], 7);
        t.weighted_sum(&[(ce, 1.5), (p, -0.3)])
    });
}

#[test]
fn box_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 6;
    let pred = Tensor::from_vec(
        n,
        4,
        (0..n)
            .flat_map(|_| {
                [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                ]
            })
            .collect(),
    );
    let targets: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
            ]
        })
        .collect();
    check(vec![pred], move |t, v| {
        let l1 = t.l1_loss(v[0], &targets, 3.0);
        let g = t.giou_loss(v[0], &targets, 3.0);
        t.weighted_sum(&[(l1, 5.0), (g, 2.0)])
    });
}

#[test]
fn giou_value_matches_geometry() {
    use crate::geometry::{giou, BoundingBox};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let a = [
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
        ];
        let b = [
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
        ];
        let (g, _) = super::tape::giou_and_grad::<f64>(&a, &b);
        let want = giou(&BoundingBox::try_from(a).unwrap(), &BoundingBox::try_from(b).unwrap());
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn gradients_accumulate_into_param_slots() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(0, Tensor::from_vec(1, 2, vec![1.0, 2.0]));
    let a = tape.dot_const(w, &Tensor::from_vec(1, 2, vec![3.0, 4.0]));
    let b = tape.dot_const(w, &Tensor::from_vec(1, 2, vec![1.0, 1.0]));
    let loss = tape.weighted_sum(&[(a, 1.0), (b, 2.0)]);
    let mut grads = vec![Tensor::zeros(1, 2)];
    tape.backward(loss, &mut grads);
    assert_eq!(grads[0].data, vec![5.0, 6.0]);
    tape.backward(loss, &mut grads);
    assert_eq!(grads[0].data, vec![10.0, 12.0]);
}

#[test]
fn fully_masked_attention_row_is_zero() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 0.0]));
    let k = tape.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let out = tape.attention(q, k, k, 1, Some(&[true, true]));
    assert_eq!(tape.value(out).data, vec![0.0, 0.0]);
}
