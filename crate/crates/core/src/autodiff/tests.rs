use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Precision, Tensor};

const ELEMENTARY_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn assert_grads<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = check_gradients(inputs, 1e-5, None, f).unwrap();
    assert!(r.passes(ELEMENTARY_TOL), "{r:?}");
}

/// Sum of the output weighted by a fixed pseudo-random pattern so every
/// output entry gets a distinct adjoint.
fn weighted(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|k| ((k * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let wt = g.constant(Tensor::new(g.shape(y), w)?);
    let p = g.mul(y, wt)?;
    Ok(g.sum(p))
}

#[test]
fn identity_matmul_is_identity() {
    let mut g = Graph::new(Precision::F64);
    let i = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y), g.value(m));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new(Precision::F64);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn gather_out_of_range_is_bounds_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.gather_rows(x, &[0, 3]), Err(Error::Bounds { index: 3, len: 3, .. })));
    let s = g.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(g.scatter_add_rows(s, &[5], 4), Err(Error::Bounds { .. })));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::full(&[1, 4], 3.0));
    let gain = g.constant(Tensor::full(&[4], 2.0));
    let y = g.layer_norm(x, gain).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn gelu_sum_gradient_matches_differences() {
    let x = Tensor::vector(vec![0.5, -0.3, 2.0]);
    let r = check_gradients(&[x], 1e-5, None, |g, v| {
        let y = g.gelu(v[0]);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn top_m_examples_and_gradient() {
    let mut g = Graph::new(Precision::F64);
    let x = g.param(Tensor::vector(vec![0.1, 0.9, 0.5]));
    let (vals, idx) = g.top_m(x, 2).unwrap();
    assert_eq!(idx, vec![1, 2]);
    assert_eq!(g.value(vals).data(), &[0.9, 0.5]);
    let s = g.sum(vals);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0]);

    let y = g.constant(Tensor::vector(vec![0.5, 0.5, 0.1]));
    assert_eq!(g.top_m(y, 1).unwrap().1, vec![0]);
    assert!(g.top_m(y, 4).is_err());
}

#[test]
fn backward_linear_map_and_accumulation() {
    let mut g = Graph::new(Precision::F64);
    let w = g.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let x = g.constant(Tensor::from_rows(&[&[7.0], &[-1.0]]));
    let y = g.matmul(w, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[7.0, -1.0, 7.0, -1.0, 7.0, -1.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[14.0, -2.0, 14.0, -2.0, 14.0, -2.0]);
    assert!(g.grad(x).is_none());
    assert!(g.backward(y).is_err());
}

#[test]
fn unreachable_parameter_keeps_zero_gradient() {
    let mut g = Graph::new(Precision::F64);
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0]));
    let l = g.sum(a);
    g.backward(l).unwrap();
    assert_eq!(g.grad(b).unwrap(), &[0.0]);
}

#[test]
fn random_three_op_graph() {
    let inputs = [randn(&[3, 4], 1), randn(&[4, 2], 2), randn(&[3, 2], 3)];
    assert_grads(&inputs, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let q = g.mul(p, v[2])?;
        let r = g.gelu(q);
        weighted(g, r)
    });
}

#[test]
fn elementary_ops_pass_gradient_checks() {
    let x = randn(&[4, 6], 11);
    assert_grads(&[x.clone()], |g, v| {
        let t = g.transpose(v[0])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.reshape(v[0], &[3, 8])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[6], 12)], |g, v| {
        let t = g.add_bias(v[0], v[1])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.scale(v[0], -1.7);
        let t = g.add_scalar(t, 0.3);
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.softmax(v[0]);
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[6], 13)], |g, v| {
        let t = g.layer_norm(v[0], v[1])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[1], 14)], |g, v| {
        let t = g.layer_norm(v[0], v[1])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[3, 6], 15)], |g, v| {
        let t = g.causal_conv(v[0], v[1], 2)?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.gather_rows(v[0], &[3, 0, 3, 1])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.scatter_add_rows(v[0], &[2, 0, 2, 4], 5)?;
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[2, 6], 16)], |g, v| {
        let s = g.slice_rows(v[0], 1, 2)?;
        let t = g.concat_rows(&[s, v[1], s])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone(), randn(&[4], 17)], |g, v| {
        let t = g.scale_rows(v[0], v[1])?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.sum_rows(v[0])?;
        let t = weighted(g, t)?;
        let m = g.mean(v[0]);
        g.add(t, m)
    });
    assert_grads(&[x.clone()], |g, v| {
        let t = g.rope(v[0], 2, 3)?;
        weighted(g, t)
    });
    assert_grads(&[x.clone()], |g, v| g.cross_entropy(v[0], &[5, 0, 2, 2]));
}

#[test]
fn top_m_gradient_off_ties() {
    let x = Tensor::vector(vec![0.1, 0.9, 0.5, -0.4, 0.7]);
    assert_grads(&[x], |g, v| {
        let (t, _) = g.top_m(v[0], 3)?;
        weighted(g, t)
    });
}

#[test]
fn attention_gradient() {
    let inputs = [randn(&[6, 4], 21), randn(&[6, 4], 22), randn(&[6, 4], 23)];
    assert_grads(&inputs, |g, v| {
        let t = g.attention(v[0], v[1], v[2], 3, 2)?;
        weighted(g, t)
    });
}

#[test]
fn attention_is_causal() {
    let mut g = Graph::new(Precision::F64);
    let q = randn(&[4, 4], 31);
    let k = randn(&[4, 4], 32);
    let mut v = randn(&[4, 4], 33);
    let run = |g: &mut Graph, v: &Tensor| {
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.attention(a, b, c, 4, 2).unwrap();
        g.value(o).clone()
    };
    let before = run(&mut g, &v);
    v.data_mut()[3 * 4] += 10.0;
    let after = run(&mut g, &v);
    assert_eq!(&before.data()[..12], &after.data()[..12]);
    assert_ne!(&before.data()[12..], &after.data()[12..]);
}

#[test]
fn causal_conv_ignores_future_inputs() {
    let mut g = Graph::new(Precision::F64);
    let k = randn(&[3, 2], 41);
    let mut x = randn(&[8, 2], 42);
    let run = |g: &mut Graph, x: &Tensor| {
        let (a, b) = (g.constant(x.clone()), g.constant(k.clone()));
        let o = g.causal_conv(a, b, 4).unwrap();
        g.value(o).clone()
    };
    let before = run(&mut g, &x);
    // Position 2 of the first sequence.
    x.data_mut()[2 * 2] += 1.0;
    let after = run(&mut g, &x);
    assert_eq!(&before.data()[..4], &after.data()[..4]);
    assert_eq!(&before.data()[8..], &after.data()[8..]);
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut g = Graph::new(Precision::F64);
    let x = g.param(Tensor::full(&[100], 1.0));
    let y = g.dropout(x, 0.5, &mut rng(5));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), g.value(y).data());
}

#[test]
fn memory_ops_pass_gradient_checks() {
    let q = randn(&[3, 4], 51);
    let keys = randn(&[5, 4], 52);
    assert_grads(&[q.clone(), keys.clone()], |g, v| {
        let t = g.rank_scores(v[0], v[1], 2)?;
        weighted(g, t)
    });
    let row = randn(&[2, 10], 53);
    let col = randn(&[2, 10], 54);
    let core = randn(&[2, 2], 55);
    let cells = [(0, 1), (4, 4), (2, 0), (3, 3)];
    assert_grads(&[row.clone(), col.clone(), core], |g, v| {
        let t = g.bilinear_cells(v[0], v[1], v[2], 2, &cells)?;
        weighted(g, t)
    });
    assert_grads(&[row, col], |g, v| {
        let t = g.additive_cells(v[0], v[1], &[(0, 9), (9, 0), (3, 3), (3, 4)])?;
        weighted(g, t)
    });
    let slots = [(0, 1), (2, 0), (2, 1), (1, 1)];
    assert_grads(&[randn(&[2, 2], 56), randn(&[2, 2], 57), randn(&[3, 4], 58)], |g, v| {
        let t = g.block_pool(&[v[0], v[1]], v[2], &slots, 2)?;
        weighted(g, t)
    });
}

#[test]
fn aux_loss_gradient_and_value() {
    let c = Tensor::from_rows(&[&[1.2, 0.4], &[-0.3, 0.8]]);
    let r = check_gradients(&[c], 1e-6, None, |g, v| g.aux_loss(v[0], 0.5, 0.1)).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let c3 = randn(&[3, 3], 61);
    let r = check_gradients(&[c3], 1e-6, None, |g, v| g.aux_loss(v[0], 0.5, 0.1)).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn injected_fault_is_detected() {
    let x = Tensor::vector(vec![0.5, -0.3, 2.0]);
    let r = check_gradients(&[x], 1e-5, Some(Fault::gelu_backward()), |g, v| {
        let y = g.gelu(v[0]);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(!r.passes(1e-4));
}

#[test]
fn f32_mode_rounds_values() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::scalar(0.1));
    assert_eq!(g.value(x).item(), 0.1f32 as f64);
}
