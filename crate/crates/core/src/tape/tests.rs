use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, GradCheckOptions};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv_same_padding_keeps_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 768, 1])).unwrap();
    let w = tape.param(Tensor::zeros(&[64, 1, 3])).unwrap();
    let b = tape.param(Tensor::zeros(&[64])).unwrap();
    let y = tape.conv1d(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 768, 64]);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (bsz, len, cin, cout) = (2, 7, 3, 4);
    let x = random(&[bsz, len, cin], &mut rng);
    let w = random(&[cout, cin, 3], &mut rng);
    let b = random(&[cout], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()).unwrap(),
        tape.constant(w.clone()).unwrap(),
        tape.constant(b.clone()).unwrap(),
    );
    let y = tape.conv1d(xv, wv, bv).unwrap();
    let got = tape.value(y).data();
    for bi in 0..bsz {
        for l in 0..len {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for j in 0..3 {
                        let src = l as isize + j as isize - 1;
                        if (0..len as isize).contains(&src) {
                            acc += w.data()[(co * cin + ci) * 3 + j]
                                * x.data()[(bi * len + src as usize) * cin + ci];
                        }
                    }
                }
                let g = got[(bi * len + l) * cout + co];
                assert!((g - acc).abs() < 1e-12, "{g} vs {acc}");
            }
        }
    }
}

#[test]
fn tanh_derivative_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0)).unwrap();
    let y = tape.tanh(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0]);
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.param(Tensor::scalar(4.0)).unwrap();
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0]);
    assert_eq!(g.get(y).unwrap(), &[3.0]);
}

#[test]
fn maxpool_ties_go_to_lower_index() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 4, 1], &[2.0, 2.0, 1.0, 5.0])).unwrap();
    let y = tape.maxpool1d(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 5.0]);
    let s = tape.sum(y, None).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn clamp_blocks_gradient_outside() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-2.0, 0.5, 3.0])).unwrap();
    let y = tape.clamp(x, -1.0, 1.0).unwrap();
    let s = tape.sum(y, None).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn backward_rejects_detached_and_non_scalar() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(1.0)).unwrap();
    let y = tape.tanh(c).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    let p = tape.param(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.5)).unwrap();
    assert!(matches!(tape.atanh(x), Err(Error::NonFinite { .. })));
    let z = tape.constant(Tensor::scalar(0.0)).unwrap();
    let one = tape.scalar(1.0).unwrap();
    assert!(matches!(tape.div(one, z), Err(Error::NonFinite { .. })));
}

#[test]
fn broadcasting_over_leading_axes() {
    let mut tape = Tape::new();
    let a = tape
        .constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        .unwrap();
    let bias = tape.constant(t(&[3], &[10.0, 20.0, 30.0])).unwrap();
    let col = tape.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
    let y = tape.add(a, bias).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let z = tape.mul(a, col).unwrap();
    assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let c = random(&[3, 1], &mut rng);
    let report = check(
        &[a, b, c],
        |tape, v| {
            let s = tape.softplus(v[0])?;
            let m = tape.mul(s, v[1])?;
            let q = tape.add_scalar(v[2], 2.5)?;
            let d = tape.div(m, q)?;
            let th = tape.tanh(d)?;
            let half = tape.scale(th, 0.5)?;
            let at = tape.atanh(half)?;
            let sq = tape.square(at)?;
            let e = tape.sub(sq, v[2])?;
            let r = tape.add_scalar(e, 1.0)?;
            let pos = tape.clamp_min(r, 1e-3)?;
            let rt = tape.sqrt(pos)?;
            tape.sum(rt, None)
        },
        &opts(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    let report = check(
        &[a, b],
        |tape, v| {
            let cat = tape.concat(&[v[0], v[1]], 1)?;
            let sl = tape.slice(cat, 1, 1, 3)?;
            let sm = tape.softmax(sl)?;
            let n = tape.l2_norm(sm)?;
            let m0 = tape.mean(sl, Some(0))?;
            let s2 = tape.sum(m0, Some(2))?;
            let r = tape.reshape(sl, &[6, 4])?;
            let tr = tape.transpose(r)?;
            let mm = tape.matmul(r, tr)?;
            let t1 = tape.sum(n, None)?;
            let t2 = tape.sum(s2, None)?;
            let t3 = tape.mean(mm, None)?;
            let u = tape.add(t1, t2)?;
            tape.add(u, t3)
        },
        &opts(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn conv_and_pool_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 8, 3], &mut rng);
    let w = random(&[5, 3, 3], &mut rng);
    let b = random(&[5], &mut rng);
    let report = check(
        &[x, w, b],
        |tape, v| {
            let y = tape.conv1d(v[0], v[1], v[2])?;
            let p = tape.maxpool1d(y)?;
            let sq = tape.square(p)?;
            tape.sum(sq, None)
        },
        &opts(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

fn mlp_loss(tape: &mut Tape, v: &[Var], x: &Tensor) -> Result<Var> {
    let x = tape.constant(x.clone())?;
    let h1 = tape.matmul(x, v[0])?;
    let h1 = tape.add(h1, v[1])?;
    let h1 = tape.tanh(h1)?;
    let h2 = tape.matmul(h1, v[2])?;
    let h2 = tape.add(h2, v[3])?;
    let h2 = tape.relu(h2)?;
    let out = tape.matmul(h2, v[4])?;
    let out = tape.add(out, v[5])?;
    let sq = tape.square(out)?;
    tape.mean(sq, None)
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[5, 6], &mut rng);
    let params = vec![
        random(&[6, 8], &mut rng),
        random(&[8], &mut rng),
        random(&[8, 7], &mut rng),
        random(&[7], &mut rng),
        random(&[7, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let report = check(&params, |tape, v| mlp_loss(tape, v, &x), &opts()).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert_eq!(report.checked, 6 * 8 + 8 + 8 * 7 + 7 + 7 * 2 + 2);
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p = random(&[4, 3], &mut rng);
    let (a, b) = (0.7, -2.3);
    let grads_of = |wa: f64, wb: f64| {
        let mut tape = Tape::new();
        let v = tape.param(p.clone()).unwrap();
        let l1 = {
            let s = tape.softplus(v).unwrap();
            tape.sum(s, None).unwrap()
        };
        let l2 = {
            let sq = tape.square(v).unwrap();
            tape.mean(sq, None).unwrap()
        };
        let s1 = tape.scale(l1, wa).unwrap();
        let s2 = tape.scale(l2, wb).unwrap();
        let l = tape.add(s1, s2).unwrap();
        tape.backward(l).unwrap().get(v).unwrap().to_vec()
    };
    let combined = grads_of(a, b);
    let g1 = grads_of(1.0, 0.0);
    let g2 = grads_of(0.0, 1.0);
    for i in 0..combined.len() {
        assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&[5, 6], &mut rng);
        let params: Vec<Tensor> = [[6, 8], [1, 8], [8, 7], [1, 7], [7, 2], [1, 2]]
            .iter()
            .map(|s| random(s, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| tape.param(p.clone()).unwrap())
            .collect();
        let loss = mlp_loss(&mut tape, &vars, &x).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut out = vec![tape.value(loss).item()];
        for v in vars {
            out.extend_from_slice(g.get(v).unwrap());
        }
        out.iter().map(|f| f.to_bits()).collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
