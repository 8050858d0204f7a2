//! Finite-difference cases, one per differentiable graph operation.
//!
//! `straight_through` is absent on purpose: its backward pass is the
//! identity by definition, not the derivative of its forward value.

use super::{finite_diff_check, FdOptions, FdReport, Graph, Mask, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct OpCheck {
    /// Operations exercised by the case.
    pub ops: &'static str,
    pub report: FdReport,
}

fn wavy(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64) * 0.731 + phase).sin())
}

fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = values.iter().map(|(n, t)| store.add(*n, t.clone())).collect();
    (store, ids)
}

type Case = (&'static str, Vec<(&'static str, Tensor<f64>)>, Box<dyn Fn(&mut Graph<'_, f64>, &[ParamId]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    vec![
        (
            "add, sub, mul, scale, add_broadcast, reshape, repeat_rows, mean, mse",
            vec![("a", wavy(&[2, 3], 0.0)), ("b", wavy(&[2, 3], 1.0)), ("c", wavy(&[3], 2.0))],
            Box::new(|g, ids| {
                let (a, b, c) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let s = g.sub(a, b);
                let p = g.mul(s, a);
                let q = g.add_broadcast(p, c);
                let r = g.reshape(q, &[1, 3, 2])?;
                let r = g.repeat_rows(r, 2);
                let sq = g.mul(r, r);
                let m = g.mse(a, b);
                let t = g.mean(sq);
                let t = g.scale(t, 2.0);
                Ok(g.add(t, m))
            }),
        ),
        (
            "linear, gelu, sum",
            vec![("x", wavy(&[2, 3, 4], 0.0)), ("w", wavy(&[4, 5], 1.0)), ("b", wavy(&[5], 2.0))],
            Box::new(|g, ids| {
                let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.linear(x, w, Some(b));
                let y = g.gelu(y);
                Ok(g.sum(y))
            }),
        ),
        (
            "split_heads, bmm, masked_softmax, merge_heads",
            vec![("a", wavy(&[2, 3, 4], 0.0)), ("b", wavy(&[2, 5, 4], 1.0))],
            Box::new(|g, ids| {
                let (a, b) = (g.param(ids[0]), g.param(ids[1]));
                let ah = g.split_heads(a, 2);
                let bh = g.split_heads(b, 2);
                let s = g.bmm(ah, bh, true, 0.5);
                let p = g.masked_softmax(s, &Mask::full(3, 5))?;
                let c = g.bmm(p, bh, false, 1.0);
                let m = g.merge_heads(c, 2);
                let sq = g.mul(m, m);
                Ok(g.sum(sq))
            }),
        ),
        (
            "masked_softmax (partial mask)",
            vec![("x", wavy(&[2, 3, 3], 0.4))],
            Box::new(|g, ids| {
                let mask = Mask::new(1, 3, 3, vec![true, false, false, true, true, false, true, true, true])?;
                let x = g.param(ids[0]);
                let p = g.masked_softmax(x, &mask)?;
                let sq = g.mul(p, p);
                Ok(g.sum(sq))
            }),
        ),
        (
            "layer_norm",
            vec![("x", wavy(&[3, 5], 0.1)), ("g", wavy(&[5], 2.0)), ("b", wavy(&[5], 3.0))],
            Box::new(|g, ids| {
                let (x, ga, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.layer_norm(x, ga, b, 1e-5);
                let w = g.constant(wavy(&[3, 5], 7.0));
                let y = g.mul(y, w);
                Ok(g.sum(y))
            }),
        ),
        (
            "cross_entropy (label smoothing, padding)",
            vec![("x", wavy(&[4, 6], 0.3))],
            Box::new(|g, ids| {
                let x = g.param(ids[0]);
                let x = g.scale(x, 3.0);
                g.cross_entropy(x, &[Some(1), None, Some(5), Some(0)], 0.1)
            }),
        ),
        (
            "conv_transpose_2d",
            vec![("x", wavy(&[2, 2, 3, 3], 0.1)), ("k", wavy(&[3, 2, 2, 2], 0.5)), ("b", wavy(&[2], 0.9))],
            Box::new(|g, ids| {
                let (x, k, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.conv_transpose_2d(x, k, Some(b), 2)?;
                let y = g.gelu(y);
                Ok(g.sum(y))
            }),
        ),
        (
            "conv2d",
            vec![("x", wavy(&[2, 5, 4, 2], 0.1)), ("w", wavy(&[3, 3, 2, 3], 0.5)), ("b", wavy(&[3], 0.9))],
            Box::new(|g, ids| {
                let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                let sq = g.mul(y, y);
                Ok(g.mean(sq))
            }),
        ),
        (
            "embedding",
            vec![("t", wavy(&[5, 3], 0.0))],
            Box::new(|g, ids| {
                let t = g.param(ids[0]);
                let e = g.embedding(t, &[4, 0, 4, 2], &[2, 2])?;
                let sq = g.mul(e, e);
                Ok(g.sum(sq))
            }),
        ),
        (
            "ctc_loss",
            vec![("x", wavy(&[2, 5, 4], 0.0))],
            Box::new(|g, ids| {
                let x = g.param(ids[0]);
                g.ctc_loss(x, &[vec![1, 2], vec![3, 3]], &[5, 4], 0)
            }),
        ),
    ]
}

/// Runs every case in 64-bit with all coordinates checked.
pub fn op_checks() -> Result<Vec<OpCheck>> {
    cases()
        .into_iter()
        .map(|(ops, values, f)| {
            let (store, ids) = store_with(&values);
            let report = finite_diff_check(&store, |g| f(g, &ids), &FdOptions::default())?;
            Ok(OpCheck { ops, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_case_passes() {
        for c in super::op_checks().unwrap() {
            assert!(c.report.max_rel_err <= 1e-4, "{}: {:?}", c.ops, c.report);
        }
    }
}
