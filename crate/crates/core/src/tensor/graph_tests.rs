use super::*;
use crate::error::Error;

fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = values
        .iter()
        .map(|(n, t)| store.add(*n, t.clone()))
        .collect();
    (store, ids)
}

fn wavy(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64) * 0.731 + phase).sin())
}

fn assert_fd<F>(store: &ParamStore<f64>, f: F)
where
    F: Fn(&mut Graph<'_, f64>) -> crate::Result<Var>,
{
    let report = finite_diff_check(store, f, &FdOptions::default()).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn square_gradient_is_six() {
    let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    let y = g.mul(x, x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap().item(), 6.0);
}

#[test]
fn sum_gradient_is_all_ones() {
    let (store, ids) = store_with(&[("x", wavy(&[2, 3, 4], 0.0))]);
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    let y = g.sum(x);
    let grads = g.backward(y).unwrap();
    let gx = grads.get(ids[0]).unwrap();
    assert_eq!(gx.shape(), [2, 3, 4]);
    assert!(gx.data().iter().all(|&v| v == 1.0));
}

#[test]
fn shared_consumers_accumulate() {
    let (store, ids) = store_with(&[("x", Tensor::scalar(2.0))]);
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x);
    let y = g.add(a, b);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap().item(), 7.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let (store, ids) = store_with(&[("x", wavy(&[3], 0.0))]);
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_name_the_op() {
    let (store, ids) = store_with(&[("x", Tensor::scalar(f64::MAX))]);
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    let y = g.scale(x, 10.0);
    let z = g.gelu(y);
    assert_eq!(g.fault(), Some("scale"));
    match g.backward(z) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let (store, ids) = store_with(&[("w", wavy(&[3, 4], 0.2)), ("x", wavy(&[2, 3], 0.9))]);
    let loss_a = |g: &mut Graph<'_, f64>| {
        let (w, x) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.linear(x, w, None);
        let y = g.gelu(y);
        g.sum(y)
    };
    let loss_b = |g: &mut Graph<'_, f64>| {
        let x = g.param(ids[1]);
        let sq = g.mul(x, x);
        g.mean(sq)
    };
    let ga = {
        let mut g = Graph::new(&store);
        let l = loss_a(&mut g);
        g.backward(l).unwrap()
    };
    let gb = {
        let mut g = Graph::new(&store);
        let l = loss_b(&mut g);
        g.backward(l).unwrap()
    };
    let gsum = {
        let mut g = Graph::new(&store);
        let a = loss_a(&mut g);
        let b = loss_b(&mut g);
        let l = g.add(a, b);
        g.backward(l).unwrap()
    };
    for &id in &ids {
        let a = ga.get(id).map(|t| t.data().to_vec());
        let b = gb.get(id).map(|t| t.data().to_vec());
        let s = gsum.get(id).unwrap().data();
        for i in 0..s.len() {
            let want = a.as_ref().map_or(0.0, |v| v[i]) + b.as_ref().map_or(0.0, |v| v[i]);
            assert!((s[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let (mut store, ids) = store_with(&[("a", wavy(&[3], 0.0)), ("b", wavy(&[3], 1.0))]);
    store.get_mut(ids[1]).requires_grad = false;
    let mut g = Graph::new(&store);
    let a = g.param(ids[0]);
    let b = g.param(ids[1]);
    let y = g.mul(a, b);
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(ids[0]).is_some());
    assert!(grads.get(ids[1]).is_none());
}

fn softmax_row(logits: &[f64], visible: &[bool]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let n = logits.len();
    let x = g.constant(Tensor::new(vec![1, n], logits.to_vec()).unwrap());
    let mask = Mask::new(1, 1, n, visible.to_vec()).unwrap();
    let y = g.masked_softmax(x, &mask).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_single_visible_entry() {
    assert_eq!(softmax_row(&[5.0, -1.0, 2.0], &[false, true, false]), [0.0, 1.0, 0.0]);
}

#[test]
fn softmax_equal_logits() {
    let p = softmax_row(&[0.3; 6], &[true, true, false, true, false, true]);
    for (i, v) in p.iter().enumerate() {
        let want = if [2, 4].contains(&i) { 0.0 } else { 0.25 };
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_reference_values() {
    // exp(k) / (e + e^2 + e^3) for k = 1, 2, 3
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    let p = softmax_row(&[1.0, 2.0, 3.0], &[true; 3]);
    for (a, b) in p.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((p[0] - 0.0900).abs() < 1e-4);
    assert!((p[1] - 0.2447).abs() < 1e-4);
    assert!((p[2] - 0.6652).abs() < 1e-4);
}

#[test]
fn fully_masked_row_is_an_error() {
    assert!(matches!(
        Mask::new(1, 2, 2, vec![true, false, false, false]),
        Err(Error::EmptyMaskRow { row: 1 })
    ));
}

#[test]
fn softmax_rejects_mismatched_mask() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let x = g.constant(wavy(&[2, 3, 3], 0.0));
    assert!(g.masked_softmax(x, &Mask::full(3, 4)).is_err());
}

#[test]
fn softmax_fd_with_mask() {
    let (store, ids) = store_with(&[("x", wavy(&[2, 3, 3], 0.4))]);
    let mask = Mask::new(
        1,
        3,
        3,
        vec![true, false, false, true, true, false, true, true, true],
    )
    .unwrap();
    assert_fd(&store, |g| {
        let x = g.param(ids[0]);
        let p = g.masked_softmax(x, &mask)?;
        let sq = g.mul(p, p);
        Ok(g.sum(sq))
    });
}

fn ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let n = x.len();
    let xv = g.constant(Tensor::new(vec![n], x.to_vec()).unwrap());
    let gv = g.constant(Tensor::new(vec![n], gamma.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(vec![n], beta.to_vec()).unwrap());
    let y = g.layer_norm(xv, gv, bv, 1e-5);
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(ln(&[2.0; 4], &[1.0; 4], &[0.0; 4]), [0.0; 4]);
    assert_eq!(ln(&[2.0; 4], &[1.0; 4], &[5.0; 4]), [5.0; 4]);
    let y = ln(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]);
    let want = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] - want).abs() < 1e-12 && (y[1] + want).abs() < 1e-12);
    assert!((y[0] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_fd() {
    let (store, ids) = store_with(&[
        ("x", wavy(&[3, 5], 0.1)),
        ("g", wavy(&[5], 2.0)),
        ("b", wavy(&[5], 3.0)),
    ]);
    assert_fd(&store, |g| {
        let (x, ga, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.layer_norm(x, ga, b, 1e-5);
        let w = g.constant(wavy(&[3, 5], 7.0));
        let y = g.mul(y, w);
        Ok(g.sum(y))
    });
}

fn ce(logits: &[f64], v: usize, targets: &[Option<usize>], alpha: f64) -> crate::Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![logits.len() / v, v], logits.to_vec()).unwrap());
    let y = g.cross_entropy(x, targets, alpha)?;
    Ok(g.value(y).item())
}

#[test]
fn cross_entropy_examples() {
    for alpha in [0.0, 0.1, 0.5] {
        let l = ce(&[0.7; 4], 4, &[Some(2)], alpha).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
    assert!(ce(&[60.0, 0.0, 0.0], 3, &[Some(0)], 0.0).unwrap() < 1e-20);
    // q = (0.95, 0.05); -log p = (log(1 + e^-2), 2 + log(1 + e^-2))
    let lse = (-2f64).exp().ln_1p();
    let want = 0.95 * lse + 0.05 * (2.0 + lse);
    let got = ce(&[2.0, 0.0], 2, &[Some(0)], 0.1).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.2268).abs() < 1e-3);
}

#[test]
fn cross_entropy_ignores_padding_rows() {
    let a = ce(&[2.0, 0.0, 9.0, -9.0], 2, &[Some(0), None], 0.1).unwrap();
    let b = ce(&[2.0, 0.0], 2, &[Some(0)], 0.1).unwrap();
    assert_eq!(a, b);
    assert_eq!(ce(&[1.0, 2.0], 2, &[None], 0.1).unwrap(), 0.0);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    assert!(matches!(
        ce(&[1.0, 2.0], 2, &[Some(2)], 0.1),
        Err(Error::TargetOutOfRange { id: 2, vocab: 2 })
    ));
    assert!(ce(&[1.0, 2.0], 2, &[Some(0)], 1.0).is_err());
}

#[test]
fn cross_entropy_fd() {
    let (store, ids) = store_with(&[("x", wavy(&[4, 6], 0.3).cast())]);
    let targets = [Some(1), None, Some(5), Some(0)];
    assert_fd(&store, |g| {
        let x = g.param(ids[0]);
        let x = g.scale(x, 3.0);
        g.cross_entropy(x, &targets, 0.1)
    });
}

#[test]
fn conv_transpose_replicates_value() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.6]).unwrap());
    let k = g.constant(Tensor::full(vec![1, 2, 2, 1], 1.0));
    let y = g.conv_transpose_2d(x, k, None, 2).unwrap();
    assert_eq!(g.shape(y), [1, 2, 2, 1]);
    assert_eq!(g.value(y).data(), [0.6; 4]);
}

#[test]
fn conv_transpose_upsamples_patch_grid() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(vec![1, 2, 32, 8]));
    let k = g.constant(Tensor::zeros(vec![8, 16, 16, 3]));
    let y = g.conv_transpose_2d(x, k, None, 16).unwrap();
    assert_eq!(g.shape(y), [1, 32, 512, 3]);
}

#[test]
fn conv_transpose_rejects_kernel_stride_mismatch() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(vec![1, 2, 2, 1]));
    let k = g.constant(Tensor::zeros(vec![1, 3, 3, 1]));
    assert!(g.conv_transpose_2d(x, k, None, 2).is_err());
}

#[test]
fn conv_transpose_places_kernel_taps() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    // two input pixels side by side, one channel, 2x2 kernel with distinct taps
    let x = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 10.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.conv_transpose_2d(x, k, None, 2).unwrap();
    assert_eq!(
        g.value(y).data(),
        [1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]
    );
}

#[test]
fn conv_transpose_fd() {
    let (store, ids) = store_with(&[
        ("x", wavy(&[2, 2, 3, 3], 0.1)),
        ("k", wavy(&[3, 2, 2, 2], 0.5)),
        ("b", wavy(&[2], 0.9)),
    ]);
    assert_fd(&store, |g| {
        let (x, k, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.conv_transpose_2d(x, k, Some(b), 2)?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    });
}

#[test]
fn conv2d_matches_direct_sum() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let xt = wavy(&[1, 4, 5, 2], 0.0);
    let wt = wavy(&[3, 3, 2, 3], 1.0);
    let x = g.constant(xt.clone());
    let w = g.constant(wt.clone());
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), [1, 2, 3, 3]);
    let yv = g.value(y).data();
    for oy in 0..2 {
        for ox in 0..3 {
            for co in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy < 0 || iy >= 4 || ix < 0 || ix >= 5 {
                            continue;
                        }
                        for ci in 0..2 {
                            s += xt.data()[((iy as usize) * 5 + ix as usize) * 2 + ci]
                                * wt.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                        }
                    }
                }
                assert!((yv[(oy * 3 + ox) * 3 + co] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_fd() {
    let (store, ids) = store_with(&[
        ("x", wavy(&[2, 5, 4, 2], 0.1)),
        ("w", wavy(&[3, 3, 2, 3], 0.5)),
        ("b", wavy(&[3], 0.9)),
    ]);
    assert_fd(&store, |g| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        let sq = g.mul(y, y);
        Ok(g.mean(sq))
    });
}

#[test]
fn linear_and_gelu_fd() {
    let (store, ids) = store_with(&[
        ("x", wavy(&[2, 3, 4], 0.0)),
        ("w", wavy(&[4, 5], 1.0)),
        ("b", wavy(&[5], 2.0)),
    ]);
    assert_fd(&store, |g| {
        let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.linear(x, w, Some(b));
        let y = g.gelu(y);
        Ok(g.sum(y))
    });
}

#[test]
fn bmm_and_heads_fd() {
    let (store, ids) = store_with(&[("a", wavy(&[2, 3, 4], 0.0)), ("b", wavy(&[2, 5, 4], 1.0))]);
    assert_fd(&store, |g| {
        let (a, b) = (g.param(ids[0]), g.param(ids[1]));
        let ah = g.split_heads(a, 2);
        let bh = g.split_heads(b, 2);
        let s = g.bmm(ah, bh, true, 0.5);
        let p = g.masked_softmax(s, &Mask::full(3, 5))?;
        let c = g.bmm(p, bh, false, 1.0);
        let m = g.merge_heads(c, 2);
        let sq = g.mul(m, m);
        Ok(g.sum(sq))
    });
}

#[test]
fn split_then_merge_is_identity() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let t = wavy(&[2, 3, 6], 0.0);
    let x = g.constant(t.clone());
    let s = g.split_heads(x, 3);
    assert_eq!(g.shape(s), [6, 3, 2]);
    let m = g.merge_heads(s, 3);
    assert_eq!(g.value(m), &t);
}

#[test]
fn elementwise_and_reduction_fd() {
    let (store, ids) = store_with(&[
        ("a", wavy(&[2, 3], 0.0)),
        ("b", wavy(&[2, 3], 1.0)),
        ("c", wavy(&[3], 2.0)),
    ]);
    assert_fd(&store, |g| {
        let (a, b, c) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let s = g.sub(a, b);
        let p = g.mul(s, a);
        let q = g.add_broadcast(p, c);
        let r = g.reshape(q, &[3, 2])?;
        let r3 = g.reshape(r, &[1, 3, 2])?;
        let r = g.repeat_rows(r3, 2);
        let m = g.mse(a, b);
        let t = g.mean(r);
        let t = g.scale(t, 2.0);
        Ok(g.add(t, m))
    });
}

#[test]
fn embedding_fd_and_range() {
    let (store, ids) = store_with(&[("t", wavy(&[5, 3], 0.0))]);
    assert_fd(&store, |g| {
        let t = g.param(ids[0]);
        let e = g.embedding(t, &[4, 0, 4, 2], &[2, 2])?;
        let sq = g.mul(e, e);
        Ok(g.sum(sq))
    });
    let mut g = Graph::inference(&store);
    let t = g.param(ids[0]);
    assert!(matches!(
        g.embedding(t, &[5], &[1]),
        Err(Error::TargetOutOfRange { id: 5, vocab: 5 })
    ));
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let (store, ids) = store_with(&[("f", wavy(&[2, 3], 0.0))]);
    let replacement = wavy(&[2, 3], 4.0);
    let weights = wavy(&[2, 3], 9.0);
    let grad_through = {
        let mut g = Graph::new(&store);
        let f = g.param(ids[0]);
        let v = g.straight_through(f, replacement.clone());
        let w = g.constant(weights.clone());
        let y = g.mul(v, w);
        let y = g.sum(y);
        g.backward(y).unwrap().get(ids[0]).unwrap().clone()
    };
    assert_eq!(grad_through, weights);
}

#[test]
fn ctc_fd() {
    let (store, ids) = store_with(&[("x", wavy(&[2, 5, 4], 0.0))]);
    let targets = vec![vec![1, 2], vec![3, 3]];
    assert_fd(&store, |g| {
        let x = g.param(ids[0]);
        g.ctc_loss(x, &targets, &[5, 4], 0)
    });
}
