use super::{Float, ParamStore};

/// Linear warmup to `peak`, then decay proportional to `1/sqrt(step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrtSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl InverseSqrtSchedule {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup.max(1) as f64;
        if step < warmup {
            self.peak * step / warmup
        } else {
            self.peak * (warmup / step).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices and higher-rank weights only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay over the accumulated gradients of a
/// [`ParamStore`]. Parameters with `requires_grad == false` are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new<T: Float>(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update with learning rate `lr` and returns the gradient
    /// norm before clipping. Gradients are left in place.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>, lr: f64) -> f64 {
        self.step += 1;
        let norm = store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()))
            .sum::<f64>()
            .sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let decay = if p.value.rank() >= 2 { weight_decay } else { 0.0 };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64() * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + eps);
                *w = T::from_f64(x);
            }
        }
        norm
    }
}
