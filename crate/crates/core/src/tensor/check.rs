use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per parameter (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Restrict the check to these parameters; `None` checks every
    /// parameter that requires a gradient.
    pub params: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords: None,
            params: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// `(analytic, finite difference)` at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let loss = f(&mut g)?;
    g.check_finite()?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences. The relative error per coordinate is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`; the maximum is reported.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference eps {} must be > 0", opts.eps)));
    }
    let first = eval(store, &f)?;
    let second = eval(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let ids: Vec<ParamId> = match &opts.params {
        Some(ids) => ids.clone(),
        None => store.trainable_ids(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = rel_err(analytic, fd);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic, fd);
            }
        }
    }
    Ok(report)
}
