//! Criterion benchmarks for the hot paths: the attention forward pass,
//! a full training step, and one embedding-training epoch.

use cma_bench as _;
use cma_core::asge::{train_asge, AsgeConfig};
use cma_core::cma::{BiasKind, CmaHead};
use cma_core::backbone::{Layout, ScaleFeat};
use cma_core::config::RunConfig;
use cma_core::label_graph::LabelGraph;
use cma_core::pipeline::ClassifierModel;
use cma_core::{Graph, Mode, NormKind, ParamStore, RngState, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn random_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn bench_attention_forward(c: &mut Criterion) {
    let (m, ch, ce, n) = (256, 16, 16, 12);
    let mut rng = RngState::new(0);
    let mut store = ParamStore::new();
    let mut head = CmaHead::new(
        &mut store,
        &mut rng,
        "b",
        n,
        ch,
        ce,
        2,
        NormKind::None,
        BiasKind::Shared,
    );
    let feat = random_tensor(&mut rng, &[m, ch]);
    let emb = random_tensor(&mut rng, &[n, ce]);
    c.bench_function("attention_forward_256x16", |b| {
        b.iter(|| {
            let mut g = Graph::new(&store);
            let x = g.input(feat.clone());
            let fm = ScaleFeat {
                var: x,
                layout: Layout::Image { h: 16, w: 16 },
                channels: ch,
                scale_id: 1,
            };
            let e = g.input(emb.clone());
            let out = head.forward(&mut g, &fm, e, Mode::Eval).unwrap();
            black_box(g.value(out.probs).data()[0]);
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let n = cfg.dims.num_labels;
    let mut rng = RngState::new(1);
    let emb = random_tensor(&mut rng, &[n, cfg.dims.embed_dim]);
    let mut store = ParamStore::new();
    let mut model = ClassifierModel::new(&mut store, &cfg, emb).unwrap();
    let x = random_tensor(&mut rng, &[cfg.dims.height, cfg.dims.width, cfg.dims.c_in]);
    let y = Tensor::full(&[n], 1.0);
    let w = Tensor::full(&[n], 1.0);
    c.bench_function("classifier_train_step", |b| {
        b.iter(|| {
            let grads = {
                let mut g = Graph::new(&store);
                let out = model.forward(&mut g, &x, Mode::Train).unwrap();
                let loss = g.weighted_bce(out.probs, &y, &w).unwrap();
                g.backward(loss).unwrap()
            };
            store.zero_grads();
            store.accumulate_grads(&grads);
            store.sgd_step(0.01, 0.9, 0.0).unwrap();
        })
    });
}

fn bench_embedding_epochs(c: &mut Criterion) {
    let n = 12;
    let mut rng = RngState::new(2);
    let mut a_sym = Tensor::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.uniform();
            a_sym.set2(i, j, v);
            a_sym.set2(j, i, v);
        }
    }
    let graph = LabelGraph {
        n,
        counts: vec![0; n * n],
        a: a_sym.clone(),
        a_sym,
        priors: vec![0.0; n],
        unobserved: Vec::new(),
    };
    let cfg = AsgeConfig {
        epochs: 10,
        ..AsgeConfig::default()
    };
    c.bench_function("embedding_train_10_epochs", |b| {
        b.iter(|| black_box(train_asge(&graph, &cfg).unwrap().embeddings.len()))
    });
}

criterion_group!(
    benches,
    bench_attention_forward,
    bench_train_step,
    bench_embedding_epochs
);
criterion_main!(benches);
