use std::rc::Rc;

use super::{gemm, Float, Mask, MatView, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: T,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Rc<[usize]>,
    },
    CrossEntropy {
        logits: Var,
        /// `(softmax - smoothed target) / count`, precomputed in forward.
        dlogits: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    ConvTranspose {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    StraightThrough {
        features: Var,
    },
    RepeatRows {
        x: Var,
        factor: usize,
    },
    Ctc {
        logits: Var,
        dlogits: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::ConvTranspose { .. } => "conv_transpose_2d",
            Op::Conv2d { .. } => "conv2d",
            Op::StraightThrough { .. } => "straight_through",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Ctc { .. } => "ctc_loss",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Slot<T>,
    op: Op<T>,
    grad: bool,
}

/// Gradients of a scalar with respect to the parameters of a store.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape of executed ops. Nodes are appended in execution order, so the tape
/// is its own topological order and cannot contain cycles.
pub struct Graph<'p, T: Float> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<&'static str>,
    recording: bool,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            fault: None,
            recording: true,
        }
    }

    /// A graph that records no gradient requirements (inference).
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.recording = false;
        g
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].grad);
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node {
            value: Slot::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, &[])
    }

    /// Copy of `v`'s value cut off from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let grad = self.recording && self.store.get(id).requires_grad;
        self.nodes.push(Node {
            value: Slot::Param(id),
            op: Op::Param(id),
            grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x[.., k] * w[k, n] (+ b[n])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(ws.rank(), 2, "linear weight must be a matrix");
        let k = ws.shape()[0];
        let n = ws.shape()[1];
        assert_eq!(xs.last_dim(), k, "linear: x {:?} vs w {:?}", xs.shape(), ws.shape());
        let m = xs.numel() / k;
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bs = self.value(b).data();
            assert_eq!(bs.len(), n, "linear bias size");
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bs);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            m,
            k,
            n,
            T::one(),
            MatView::rm(xs.data(), k),
            MatView::rm(ws.data(), n),
            beta,
            &mut out,
        );
        let t = Tensor { shape, data: out };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Linear { x, w, b }, t, &inputs)
    }

    /// Batched `alpha * a[B, m, k] * b[B, k, n]`, or `b[B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rank(), 3, "bmm lhs rank");
        assert_eq!(bv.rank(), 3, "bmm rhs rank");
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs, "bmm batch");
        let n = if trans_b {
            assert_eq!(bv.shape()[2], k, "bmm inner (trans)");
            bv.shape()[1]
        } else {
            assert_eq!(bv.shape()[1], k, "bmm inner");
            bv.shape()[2]
        };
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * k * n..(i + 1) * k * n];
            let bview = if trans_b {
                MatView::rm_t(bb, k)
            } else {
                MatView::rm(bb, n)
            };
            gemm(
                m,
                k,
                n,
                alpha,
                MatView::rm(ab, k),
                bview,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor {
            shape: vec![bs, m, n],
            data: out,
        };
        self.push(
            Op::Bmm {
                a,
                b,
                trans_b,
                alpha,
            },
            t,
            &[a, b],
        )
    }

    /// `[B, n, H*dh] -> [B*H, n, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "split_heads rank");
        let (b, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(d % heads, 0, "split_heads: {d} not divisible by {heads}");
        let dh = d / heads;
        let mut out = vec![T::zero(); b * n * d];
        let src = xv.data();
        for bi in 0..b {
            for t in 0..n {
                let row = &src[(bi * n + t) * d..(bi * n + t + 1) * d];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * n + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor {
            shape: vec![b * heads, n, dh],
            data: out,
        };
        self.push(Op::SplitHeads { x, heads }, t, &[x])
    }

    /// `[B*H, n, dh] -> [B, n, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "merge_heads rank");
        let (bh, n, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(bh % heads, 0, "merge_heads batch");
        let b = bh / heads;
        let d = heads * dh;
        let out = merge_heads_data(xv.data(), b, heads, n, dh);
        let t = Tensor {
            shape: vec![b, n, d],
            data: out,
        };
        self.push(Op::MergeHeads { x, heads }, t, &[x])
    }

    /// Row softmax of `x[B', nq, nk]` restricted to the visible entries of
    /// `mask`; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("masked_softmax needs at least 2 axes"));
        }
        let nk = xv.shape()[xv.rank() - 1];
        let nq = xv.shape()[xv.rank() - 2];
        let outer = xv.numel() / (nq * nk).max(1);
        if mask.nq() != nq || mask.nk() != nk || outer % mask.batch() != 0 {
            return Err(Error::shape(format!(
                "mask [{}, {}, {}] does not fit scores {:?}",
                mask.batch(),
                mask.nq(),
                mask.nk(),
                xv.shape()
            )));
        }
        let group = outer / mask.batch();
        let mut out = vec![T::zero(); xv.numel()];
        let src = xv.data();
        for o in 0..outer {
            let mb = o / group;
            for q in 0..nq {
                let vis = mask.row(mb, q);
                let base = (o * nq + q) * nk;
                let row = &src[base..base + nk];
                let dst = &mut out[base..base + nk];
                let mut mx = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if vis[j] && v > mx {
                        mx = v;
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(Error::EmptyMaskRow { row: q });
                }
                let mut sum = T::zero();
                for j in 0..nk {
                    if vis[j] {
                        let e = (row[j] - mx).exp();
                        dst[j] = e;
                        sum += e;
                    }
                }
                let inv = T::one() / sum;
                for v in dst.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        Ok(self.push(Op::MaskedSoftmax { x }, t, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), n, "layer_norm gamma size");
        assert_eq!(bt.len(), n, "layer_norm beta size");
        let rows = xv.numel() / n;
        let eps = T::from_f64(eps);
        let inv_n = T::one() / T::from_usize(n);
        let mut out = vec![T::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, (src, dst)) in xv
            .data()
            .chunks_exact(n)
            .zip(out.chunks_exact_mut(n))
            .enumerate()
        {
            let mu = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..n {
                dst[j] = g[j] * (src[j] - mu) * rs + bt[j];
            }
            mean.push(mu);
            rstd.push(rs);
            debug_assert_eq!(mean.len(), r + 1);
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            t,
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(Op::Gelu { x }, t, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(Op::Add { a, b }, t, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let tail = bv.numel();
        assert!(
            av.shape().ends_with(bv.shape()) && tail > 0,
            "add_broadcast: {:?} + {:?}",
            av.shape(),
            bv.shape()
        );
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(tail) {
            for (d, &v) in chunk.iter_mut().zip(bv.data()) {
                *d += v;
            }
        }
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(Op::AddBroadcast { a, b }, t, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(Op::Sub { a, b }, t, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(Op::Mul { a, b }, t, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * c).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(Op::Scale { x, c }, t, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum { x }, Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shapes {:?} vs {:?}", av.shape(), bv.shape());
        let n = T::from_usize(av.numel().max(1));
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        self.push(Op::Mse { a, b }, Tensor::scalar(s), &[a, b])
    }

    /// Rows of `table[V, d]` selected by `ids`; output shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding table must be a matrix"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(format!(
                "embedding: {} ids for lead shape {lead:?}",
                ids.len()
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TargetOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let t = Tensor { shape, data: out };
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            t,
            &[table],
        ))
    }

    /// Label-smoothed cross entropy of `logits[.., V]` against `targets`
    /// (one per row, `None` = ignored), averaged over non-ignored rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if rows != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: {} rows vs {} targets",
                rows,
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Invalid(format!("label smoothing {smoothing} not in [0,1)")));
        }
        for &t in targets.iter().flatten() {
            if t >= v {
                return Err(Error::TargetOutOfRange { id: t, vocab: v });
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut dlogits = vec![T::zero(); lv.numel()];
        let mut loss = 0.0f64;
        if count > 0 {
            let alpha = T::from_f64(smoothing);
            let uniform = alpha / T::from_usize(v);
            let on = T::one() - alpha;
            let inv_count = T::one() / T::from_usize(count);
            for (r, tgt) in targets.iter().enumerate() {
                let Some(tgt) = *tgt else { continue };
                let row = lv.row(r);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
                let mut row_loss = T::zero();
                let d = &mut dlogits[r * v..(r + 1) * v];
                for j in 0..v {
                    let logp = row[j] - lse;
                    let q = if j == tgt { on + uniform } else { uniform };
                    row_loss -= q * logp;
                    d[j] = (logp.exp() - q) * inv_count;
                }
                loss += row_loss.as_f64();
            }
            loss /= count as f64;
        }
        Ok(self.push(
            Op::CrossEntropy { logits, dlogits },
            Tensor::scalar(T::from_f64(loss)),
            &[logits],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape { x }, t, &[x]))
    }

    /// Non-overlapping transposed convolution, channels-last:
    /// `x[B, h, w, Cin]`, `kernel[Cin, k, k, Cout]` with `k == stride`,
    /// output `[B, h*stride, w*stride, Cout]`.
    pub fn conv_transpose_2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        if xv.rank() != 4 || kv.rank() != 4 {
            return Err(Error::shape("conv_transpose_2d expects rank-4 input and kernel"));
        }
        let (b, h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kc, kh, kw, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        if kh != stride || kw != stride {
            return Err(Error::shape(format!(
                "conv_transpose_2d kernel {kh}x{kw} does not match stride {stride}"
            )));
        }
        if kc != cin {
            return Err(Error::shape(format!(
                "conv_transpose_2d kernel expects {kc} input channels, got {cin}"
            )));
        }
        let s = stride;
        let cols = s * s * cout;
        let m = b * h * w;
        let mut y = vec![T::zero(); m * cols];
        gemm(
            m,
            cin,
            cols,
            T::one(),
            MatView::rm(xv.data(), cin),
            MatView::rm(kv.data(), cols),
            T::zero(),
            &mut y,
        );
        let (oh, ow) = (h * s, w * s);
        let mut out = vec![T::zero(); b * oh * ow * cout];
        let bias_v = bias.map(|bv| self.value(bv).data());
        if let Some(bs) = bias_v {
            if bs.len() != cout {
                return Err(Error::shape("conv_transpose_2d bias size"));
            }
        }
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = &y[((bi * h + i) * w + j) * cols..][..cols];
                    for di in 0..s {
                        let orow = i * s + di;
                        let dst = ((bi * oh + orow) * ow + j * s) * cout;
                        let seg = &mut out[dst..dst + s * cout];
                        seg.copy_from_slice(&src[di * s * cout..(di + 1) * s * cout]);
                        if let Some(bs) = bias_v {
                            for px in seg.chunks_exact_mut(cout) {
                                for (v, &bb) in px.iter_mut().zip(bs) {
                                    *v += bb;
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![b, oh, ow, cout],
            data: out,
        };
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Op::ConvTranspose {
                x,
                kernel,
                bias,
                stride,
            },
            t,
            &inputs,
        ))
    }

    /// Channels-last convolution: `x[B, H, W, Cin]`, `w[k, k, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::shape("conv2d expects rank-4 input and kernel"));
        }
        let (b, h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (k, k2, wc, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if k != k2 || wc != cin || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let geom = ConvGeom {
            batch: b,
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let m = b * geom.ho * geom.wo;
        let kk = k * k * cin;
        let mut out = vec![T::zero(); m * cout];
        if let Some(bv) = bias {
            let bs = self.value(bv).data();
            if bs.len() != cout {
                return Err(Error::shape("conv2d bias size"));
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bs);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            m,
            kk,
            cout,
            T::one(),
            MatView::rm(&cols, kk),
            MatView::rm(wv.data(), cout),
            beta,
            &mut out,
        );
        let t = Tensor {
            shape: vec![b, geom.ho, geom.wo, cout],
            data: out,
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { x, w, bias, geom }, t, &inputs))
    }

    /// Forward value `replacement`, backward identity into `features`.
    pub fn straight_through(&mut self, features: Var, replacement: Tensor<T>) -> Var {
        assert_eq!(
            self.value(features).shape(),
            replacement.shape(),
            "straight_through shapes"
        );
        self.push(Op::StraightThrough { features }, replacement, &[features])
    }

    /// `[B, n, d] -> [B, n*factor, d]`, each row repeated `factor` times.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "repeat_rows rank");
        let (b, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Vec::with_capacity(xv.numel() * factor);
        for row in xv.data().chunks_exact(d) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let t = Tensor {
            shape: vec![b, n * factor, d],
            data: out,
        };
        self.push(Op::RepeatRows { x, factor }, t, &[x])
    }

    /// Connectionist temporal classification loss over `logits[B, T, V]`.
    /// `input_lens[b] <= T` frames of item `b` are scored against
    /// `targets[b]`; the result is the batch mean of the per-item negative
    /// log-likelihood divided by the target length. Items with no feasible
    /// alignment contribute zero.
    pub fn ctc_loss(
        &mut self,
        logits: Var,
        targets: &[Vec<usize>],
        input_lens: &[usize],
        blank: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 3 {
            return Err(Error::shape("ctc_loss expects [B, T, V] logits"));
        }
        let (b, tmax, v) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
        if targets.len() != b || input_lens.len() != b {
            return Err(Error::shape("ctc_loss batch mismatch"));
        }
        let mut dlogits = vec![T::zero(); lv.numel()];
        let mut total = 0.0;
        for bi in 0..b {
            let frames = input_lens[bi].min(tmax);
            let item = &lv.data()[bi * tmax * v..(bi * tmax + frames) * v];
            for &t in &targets[bi] {
                if t >= v || t == blank {
                    return Err(Error::TargetOutOfRange { id: t, vocab: v });
                }
            }
            let (nll, grad) = super::ctc::ctc_item(item, frames, v, &targets[bi], blank);
            if let Some(grad) = grad {
                let scale = 1.0 / (targets[bi].len().max(1) as f64 * b as f64);
                total += nll * scale;
                let dst = &mut dlogits[bi * tmax * v..(bi * tmax + frames) * v];
                for (d, g) in dst.iter_mut().zip(grad) {
                    *d = T::from_f64(g * scale);
                }
            }
        }
        Ok(self.push(
            Op::Ctc { logits, dlogits },
            Tensor::scalar(T::from_f64(total)),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss` to every parameter that requires a
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        if !self.nodes[loss.0].grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", node.op.name()),
                });
            }
            self.backward_node(node, Var(i), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn numel(&self, v: Var) -> usize {
        self.value(v).numel()
    }

    /// Accumulator slot for `v`, created as zeros on first use. `None` when
    /// `v` does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].grad {
            return None;
        }
        let n = self.numel(v);
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
        if let Some(dst) = self.slot(grads, v) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        me: Var,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.store.value(*id).shape().to_vec();
                out.grads[id.0] = Some(Tensor { shape, data: g });
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w);
                let (k, n) = (ws.shape()[0], ws.shape()[1]);
                let m = g.len() / n;
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        MatView::rm(&g, n),
                        MatView::rm_t(ws.data(), n),
                        T::one(),
                        dx,
                    );
                }
                let xs = self.value(*x).data();
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        MatView::rm_t(xs, k),
                        MatView::rm(&g, n),
                        T::one(),
                        dw,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.len() / (bs * m);
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..bs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                        // da = alpha * g * b^T  (or g * b when b was transposed)
                        let bview = if *trans_b {
                            MatView::rm(bb, k)
                        } else {
                            MatView::rm_t(bb, n)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            *alpha,
                            MatView::rm(gb, n),
                            bview,
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..bs {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[n, k] = alpha * g^T a
                            gemm(
                                n,
                                m,
                                k,
                                *alpha,
                                MatView::rm_t(gb, n),
                                MatView::rm(ab, k),
                                T::one(),
                                dst,
                            );
                        } else {
                            // db[k, n] = alpha * a^T g
                            gemm(
                                k,
                                m,
                                n,
                                *alpha,
                                MatView::rm_t(ab, k),
                                MatView::rm(gb, n),
                                T::one(),
                                dst,
                            );
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let xs = self.value(*x).shape();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let merged = merge_heads_data(&g, b, *heads, n, d / heads);
                self.acc(grads, *x, &merged);
            }
            Op::MergeHeads { x, heads } => {
                let xs = self.value(*x).shape();
                let (bh, n, dh) = (xs[0], xs[1], xs[2]);
                let b = bh / heads;
                let d = heads * dh;
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for t in 0..n {
                            let row = &g[(bi * n + t) * d..(bi * n + t + 1) * d];
                            for h in 0..*heads {
                                let dst = ((bi * heads + h) * n + t) * dh;
                                for e in 0..dh {
                                    dx[dst + e] += row[h * dh + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = self.value(me);
                let nk = y.last_dim();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks_exact(nk)
                        .zip(g.chunks_exact(nk))
                        .zip(dx.chunks_exact_mut(nk))
                    {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..nk {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let gm = self.value(*gamma).data();
                let inv_n = T::one() / T::from_usize(n);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (r, (xr, gr)) in xv.data().chunks_exact(n).zip(g.chunks_exact(n)).enumerate()
                    {
                        for j in 0..n {
                            dg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for (r, ((xr, gr), dr)) in xv
                        .data()
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(dx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            xhat[j] = (xr[j] - mean[r]) * rstd[r];
                            dxhat[j] = gr[j] * gm[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[j];
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        for j in 0..n {
                            dr[j] += rstd[r] * (dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(&g) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, &g);
                self.acc(grads, *b, &g);
            }
            Op::AddBroadcast { a, b } => {
                self.acc(grads, *a, &g);
                if let Some(db) = self.slot(grads, *b) {
                    let tail = db.len();
                    for chunk in g.chunks_exact(tail) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, &g);
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &v) in db.iter_mut().zip(&g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let bv = self.value(*b).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                let av = self.value(*a).data();
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(&g) {
                        *d += gi * *c;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = g[0] * T::from_f64(2.0) / T::from_usize(av.len().max(1));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        for (dst, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, dlogits } | Op::Ctc { logits, dlogits } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    for (d, &v) in dl.iter_mut().zip(dlogits) {
                        *d += g[0] * v;
                    }
                }
            }
            Op::Reshape { x } | Op::StraightThrough { features: x } => {
                self.acc(grads, *x, &g);
            }
            Op::ConvTranspose {
                x,
                kernel,
                bias,
                stride,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (b, h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let cout = kv.shape()[3];
                let s = *stride;
                let cols = s * s * cout;
                let (oh, ow) = (h * s, w * s);
                let m = b * h * w;
                // gather output gradient back into [(B h w), (s s Cout)]
                let mut gy = vec![T::zero(); m * cols];
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let dst = &mut gy[((bi * h + i) * w + j) * cols..][..cols];
                            for di in 0..s {
                                let src = ((bi * oh + i * s + di) * ow + j * s) * cout;
                                dst[di * s * cout..(di + 1) * s * cout]
                                    .copy_from_slice(&g[src..src + s * cout]);
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(
                        m,
                        cols,
                        cin,
                        T::one(),
                        MatView::rm(&gy, cols),
                        MatView::rm_t(kv.data(), cols),
                        T::one(),
                        dx,
                    );
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(
                        cin,
                        m,
                        cols,
                        T::one(),
                        MatView::rm_t(xv.data(), cin),
                        MatView::rm(&gy, cols),
                        T::one(),
                        dk,
                    );
                }
                if let Some(bv) = bias {
                    if let Some(db) = self.slot(grads, *bv) {
                        for px in g.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(px) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let m = geom.batch * geom.ho * geom.wo;
                let kk = geom.k * geom.k * geom.cin;
                let cout = geom.cout;
                if let Some(dw) = self.slot(grads, *w) {
                    let cols = im2col(xv.data(), geom);
                    gemm(
                        kk,
                        m,
                        cout,
                        T::one(),
                        MatView::rm_t(&cols, kk),
                        MatView::rm(&g, cout),
                        T::one(),
                        dw,
                    );
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dcols = vec![T::zero(); m * kk];
                    gemm(
                        m,
                        cout,
                        kk,
                        T::one(),
                        MatView::rm(&g, cout),
                        MatView::rm_t(wv.data(), cout),
                        T::zero(),
                        &mut dcols,
                    );
                    col2im_add(&dcols, geom, dx);
                }
                if let Some(bv) = bias {
                    if let Some(db) = self.slot(grads, *bv) {
                        for px in g.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(px) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, factor } => {
                let d = self.value(*x).last_dim();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, dst) in dx.chunks_exact_mut(d).enumerate() {
                        for f in 0..*factor {
                            let src = &g[(r * factor + f) * d..(r * factor + f + 1) * d];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn merge_heads_data<T: Float>(src: &[T], b: usize, heads: usize, n: usize, dh: usize) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); b * n * d];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..n {
                let s = ((bi * heads + h) * n + t) * dh;
                let dst = (bi * n + t) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh(u)) = sigmoid(2u)`, with `u = c (x + a x^3)`.
fn gelu_gate<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let u = c * (x + a * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu_fwd<T: Float>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let s = gelu_gate(x);
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.k * g.k * g.cin;
    let mut cols = vec![T::zero(); g.batch * g.ho * g.wo * kk];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.k + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let kk = g.k * g.k * g.cin;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.k + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}
