use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vistrans::nn::{build_mask, MaskKind};
use vistrans::tensor::{Graph, ParamStore, Tensor};
use vistrans::vq::quantize;

fn wavy(shape: &[usize], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f32) * 0.731 + phase).sin())
}

fn linear_forward_backward(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", wavy(&[64, 128], 0.0));
    let b = store.add("b", wavy(&[128], 1.0));
    let x = wavy(&[8, 256, 64], 2.0);
    c.bench_function("linear_gelu_fwd_bwd_8x256x64x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.linear(xv, wv, Some(bv));
            let y = g.gelu(y);
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn codebook_lookup(c: &mut Criterion) {
    let feats = wavy(&[512, 16], 0.3);
    let entries = wavy(&[256, 16], 0.9);
    c.bench_function("quantize_512_over_256", |bench| {
        bench.iter(|| black_box(quantize(&feats, &entries).unwrap()))
    });
}

fn masks(c: &mut Criterion) {
    c.bench_function("build_mask_sat4_64", |bench| {
        bench.iter(|| black_box(build_mask(64, MaskKind::Sat(4)).unwrap()))
    });
}

criterion_group!(benches, linear_forward_backward, codebook_lookup, masks);
criterion_main!(benches);
