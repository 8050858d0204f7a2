//! Forward-backward recursion for the CTC loss, in f64 log space.

use super::Float;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Negative log-likelihood of `target` under `frames` rows of raw logits
/// (`logits.len() == frames * v`) and its gradient with respect to those
/// logits. Returns `None` for the gradient when no alignment exists.
pub(crate) fn ctc_item<T: Float>(
    logits: &[T],
    frames: usize,
    v: usize,
    target: &[usize],
    blank: usize,
) -> (f64, Option<Vec<f64>>) {
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&c| [c, blank]))
        .collect();
    let s_len = ext.len();
    if frames == 0 {
        return (0.0, None);
    }
    let mut logp = vec![0.0f64; frames * v];
    for t in 0..frames {
        let row = &logits[t * v..(t + 1) * v];
        let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x.as_f64() - mx).exp()).sum::<f64>().ln() + mx;
        for k in 0..v {
            logp[t * v + k] = row[k].as_f64() - lse;
        }
    }
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + logp[t * v + ext[s]] };
        }
    }
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = logp[(frames - 1) * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = logp[(frames - 1) * v + ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + logp[t * v + ext[s]] };
        }
    }
    let mut ll = alpha[last + s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, alpha[last + s_len - 2]);
    }
    if ll == ninf {
        return (0.0, None);
    }
    let mut grad = vec![0.0f64; frames * v];
    for t in 0..frames {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                occ[ext[s]] = log_add(occ[ext[s]], ab);
            }
        }
        for k in 0..v {
            let p = logp[t * v + k].exp();
            let post = if occ[k] == ninf {
                0.0
            } else {
                (occ[k] - logp[t * v + k] - ll).exp()
            };
            grad[t * v + k] = p - post;
        }
    }
    (-ll, Some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force sum over every frame labelling that collapses to the target.
    fn brute_nll(logits: &[f64], frames: usize, v: usize, target: &[usize], blank: usize) -> f64 {
        let mut total = 0.0;
        let paths = v.pow(frames as u32);
        for code in 0..paths {
            let mut c = code;
            let mut labels = Vec::with_capacity(frames);
            for _ in 0..frames {
                labels.push(c % v);
                c /= v;
            }
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &l in &labels {
                if Some(l) != prev && l != blank {
                    collapsed.push(l);
                }
                prev = Some(l);
            }
            if collapsed != target {
                continue;
            }
            let mut p = 1.0;
            for (t, &l) in labels.iter().enumerate() {
                let row = &logits[t * v..(t + 1) * v];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                p *= row[l].exp() / z;
            }
            total += p;
        }
        -total.ln()
    }

    #[test]
    fn matches_path_enumeration() {
        let v = 3;
        let frames = 4;
        let logits: Vec<f64> = (0..frames * v).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.4).collect();
        for target in [vec![1], vec![1, 2], vec![1, 1], vec![2, 1, 2]] {
            let (nll, grad) = ctc_item(&logits, frames, v, &target, 0);
            assert!(grad.is_some());
            let want = brute_nll(&logits, frames, v, &target, 0);
            assert!((nll - want).abs() < 1e-10, "{target:?}: {nll} vs {want}");
        }
    }

    #[test]
    fn infeasible_alignment_has_no_gradient() {
        let logits = vec![0.0f64; 2 * 3];
        let (_, grad) = ctc_item(&logits, 2, 3, &[1, 1], 0);
        assert!(grad.is_none());
    }
}
