//! Token-grid to image heads and the fixed feature pyramid used for the
//! perceptual image distance.

use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{uniform_param, LayerNorm, Linear};
use crate::rng::{rng_for, Rng};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// `[B, N, D]` patch states to a `[B, H, W, C]` image: normalization, a
/// stride-`P` transposed convolution into hidden channels, GELU and a
/// per-pixel projection.
#[derive(Clone, Debug)]
pub struct ImageHead {
    pub norm: LayerNorm,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub out: Linear,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl ImageHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, p, ch) = (cfg.d_model, cfg.patch, cfg.head_channels);
        let kernel = uniform_param(store, format!("{name}.deconv.kernel"), vec![d, p, p, ch], 1.0 / (d as f64).sqrt(), rng);
        let bias = store.add(format!("{name}.deconv.bias"), Tensor::zeros(vec![ch]));
        let out = Linear::new(store, &format!("{name}.proj"), ch, cfg.channels, true, rng);
        if let Some(b) = out.bias {
            store.value_mut(b).data_mut().fill(T::from_f64(0.5));
        }
        ImageHead {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            kernel,
            bias,
            out,
            patch: p,
            grid: (cfg.height / p, cfg.width / p),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let (gh, gw) = self.grid;
        if shape.len() != 3 || shape[1] != gh * gw {
            return Err(Error::shape(format!("image head expects [B, {}, D], got {shape:?}", gh * gw)));
        }
        let x = self.norm.forward(g, h);
        let x = g.reshape(x, &[shape[0], gh, gw, shape[2]])?;
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let x = g.conv_transpose_2d(x, k, Some(b), self.patch)?;
        let x = g.gelu(x);
        Ok(self.out.forward(g, x))
    }
}

/// Three stride-2 3x3 convolutions with GELU, weights drawn once from a
/// seeded He-normal and never trained.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<(Tensor<f64>, Tensor<f64>)>,
    id: String,
}

impl FeaturePyramid {
    pub fn random(in_channels: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = rng_for(seed, "feature-pyramid");
        let mut levels = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for &cout in channels {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            let w = Tensor::from_fn(vec![3, 3, cin, cout], |_| dist.sample(&mut rng));
            levels.push((w, Tensor::zeros(vec![cout])));
            cin = cout;
        }
        let dims: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
        FeaturePyramid {
            levels,
            id: format!("fixed-random:{}:{seed}", dims.join("-")),
        }
    }

    /// Identifies the weights: kind, channel widths and seed.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn feature_dim(&self) -> usize {
        self.levels.iter().map(|(w, _)| w.shape()[3]).sum()
    }

    /// Feature maps of `img[B, H, W, C]` at every level.
    pub fn features<T: Float>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.levels.len());
        for (w, b) in &self.levels {
            let w = g.constant(w.cast());
            let b = g.constant(b.cast());
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.gelu(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Mean over levels of the feature-map MSE between `pred` and `target`.
    pub fn distance<T: Float>(&self, g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
        let fp = self.features(g, pred)?;
        let ft = self.features(g, target)?;
        let mut total: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(ft) {
            let b = g.detach(b);
            let m = g.mse(a, b);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("feature pyramid has no levels".into()))?;
        Ok(g.scale(total, 1.0 / self.levels.len() as f64))
    }

    /// Globally averaged features of one `[H, W, C]` image, concatenated
    /// over levels.
    pub fn embed(&self, img: &crate::image::Image) -> Result<Vec<f64>> {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let t = Tensor::new(
            vec![1, img.height(), img.width(), img.channels()],
            img.data().iter().map(|&v| v as f64).collect(),
        )?;
        let x = g.constant(t);
        let maps = self.features(&mut g, x)?;
        let mut out = Vec::with_capacity(self.feature_dim());
        for m in maps {
            let v = g.value(m);
            let c = v.last_dim();
            let n = v.numel() / c;
            let mut acc = vec![0.0; c];
            for row in v.data().chunks_exact(c) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            out.extend(acc.into_iter().map(|a| a / n as f64));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FdOptions};

    #[test]
    fn head_output_shape_and_gradients() {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, "t");
        let head = ImageHead::new(&mut store, "head", &cfg, &mut rng);
        let n = cfg.patches();
        let h = Tensor::from_fn(vec![2, n, cfg.d_model], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let target = Tensor::from_fn(vec![2, cfg.height, cfg.width, 3], |i| (i % 5) as f64 * 0.2);
        let mut g = Graph::new(&store);
        let x = g.constant(h.clone());
        let y = head.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), [2, cfg.height, cfg.width, 3]);
        let pyramid = FeaturePyramid::random(3, &cfg.perceptual_channels, 4);
        let report = finite_diff_check(
            &store,
            |g| {
                let x = g.constant(h.clone());
                let y = head.forward(g, x)?;
                let t = g.constant(target.clone());
                let pix = g.mse(y, t);
                let perc = pyramid.distance(g, y, t)?;
                let perc = g.scale(perc, 0.1);
                Ok(g.add(pix, perc))
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn pyramid_distance_vanishes_on_identical_images() {
        let pyramid = FeaturePyramid::random(3, &[2, 3, 4], 0);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let img = Tensor::from_fn(vec![1, 8, 16, 3], |i| (i % 11) as f64 / 10.0);
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let d = pyramid.distance(&mut g, a, b).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        assert_eq!(pyramid.feature_dim(), 9);
        assert!(pyramid.id().starts_with("fixed-random"));
    }
}
