//! Adjacency-based similarity graph embedding: a small network maps each
//! label's one-hot vector to an embedding, trained so pairwise cosine
//! similarities match the symmetrized adjacency matrix, optionally with a
//! threshold gate that drops weak, already-far pairs from the objective.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::label_graph::LabelGraph;
use crate::nn::{BatchNorm, Linear, Mode, NormKind, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct AsgeConfig {
    pub hidden: (usize, usize),
    pub embed_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Relaxation threshold; `None` disables the gate.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub norm: NormKind,
}

impl Default for AsgeConfig {
    fn default() -> Self {
        Self {
            hidden: (256, 256),
            embed_dim: 256,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 2000,
            alpha: None,
            seed: 0,
            norm: NormKind::BatchNorm,
        }
    }
}

impl AsgeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("alpha must be in [0, 1), got {a}")));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// The embedding network: FC -> BN -> ReLU, FC -> BN -> ReLU, FC.
/// The output layer is linear so embeddings can cover the whole sphere.
pub struct AsgeNetwork {
    pub n: usize,
    pub embed_dim: usize,
    l1: Linear,
    bn1: Option<BatchNorm>,
    l2: Linear,
    bn2: Option<BatchNorm>,
    l3: Linear,
}

impl AsgeNetwork {
    pub fn new(store: &mut ParamStore, rng: &mut RngState, n: usize, cfg: &AsgeConfig) -> Self {
        let (h1, h2) = cfg.hidden;
        let l1 = Linear::new(store, rng, "asge.l1", n, h1);
        let l2 = Linear::new(store, rng, "asge.l2", h1, h2);
        let l3 = Linear::new(store, rng, "asge.l3", h2, cfg.embed_dim);
        let (bn1, bn2) = match cfg.norm {
            NormKind::BatchNorm => (
                Some(BatchNorm::new(store, "asge.bn1", h1)),
                Some(BatchNorm::new(store, "asge.bn2", h2)),
            ),
            NormKind::None => (None, None),
        };
        Self {
            n,
            embed_dim: cfg.embed_dim,
            l1,
            bn1,
            l2,
            bn2,
            l3,
        }
    }

    /// Embeds the full identity batch of N one-hots; row i is the
    /// embedding of label i. Batch statistics run over all N labels.
    pub fn forward_embeddings(&mut self, g: &mut Graph, mode: Mode) -> Result<Var> {
        let x = g.input(Tensor::eye(self.n));
        self.forward(g, x, mode)
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.l1.forward(g, x)?;
        if let Some(bn) = &mut self.bn1 {
            h = bn.forward(g, h, mode)?;
        }
        h = g.relu(h);
        h = self.l2.forward(g, h)?;
        if let Some(bn) = &mut self.bn2 {
            h = bn.forward(g, h, mode)?;
        }
        h = g.relu(h);
        self.l3.forward(g, h)
    }

    /// Final embedding matrix `[N, C_e]`, computed with frozen statistics.
    pub fn embeddings(&mut self, store: &ParamStore) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let e = self.forward_embeddings(&mut g, Mode::Eval)?;
        Ok(g.value(e).clone())
    }

    pub fn bn_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(bn) = &self.bn1 {
            out.extend(bn.state_tensors());
        }
        if let Some(bn) = &self.bn2 {
            out.extend(bn.state_tensors());
        }
        out
    }
}

/// Pairwise cosine-similarity matrix of the rows of `e` (plain, no tape).
pub fn cosine_matrix(e: &Tensor) -> Tensor {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            e.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(COSINE_EPS)
        })
        .collect();
    let mut c = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += e.data()[i * d + k] * e.data()[j * d + k];
            }
            c.set2(i, j, s / (norms[i] * norms[j]));
        }
    }
    c
}

/// The gate mask: entry (i,j) is 0 iff both A'_ij and cos_ij fall below
/// alpha, else 1. With `alpha = None` every entry is 1.
pub fn relaxation_mask(cos: &Tensor, a_sym: &Tensor, alpha: Option<f64>) -> Tensor {
    let mut mask = Tensor::full(a_sym.shape(), 1.0);
    if let Some(a) = alpha {
        for i in 0..mask.len() {
            if a_sym.data()[i] < a && cos.data()[i] < a {
                mask.data_mut()[i] = 0.0;
            }
        }
    }
    mask
}

/// Sum over all ordered pairs (including the diagonal) of
/// (cos(e_i, e_j) - A'_ij)^2.
pub fn asge_loss(e: &Tensor, a_sym: &Tensor) -> f64 {
    relaxed_asge_loss(e, a_sym, None)
}

/// Same sum with the indicator gate applied.
pub fn relaxed_asge_loss(e: &Tensor, a_sym: &Tensor, alpha: Option<f64>) -> f64 {
    let cos = cosine_matrix(e);
    let mask = relaxation_mask(&cos, a_sym, alpha);
    cos.data()
        .iter()
        .zip(a_sym.data())
        .zip(mask.data())
        .map(|((c, a), m)| m * (c - a) * (c - a))
        .sum()
}

/// One training epoch record.
#[derive(Debug, Clone, Copy)]
pub struct AsgeEpoch {
    pub loss: f64,
    pub relaxed_fraction: f64,
}

pub struct AsgeTrainResult {
    pub embeddings: Tensor,
    pub curve: Vec<AsgeEpoch>,
    pub network: AsgeNetwork,
    pub store: ParamStore,
}

/// Full-batch gradient descent on the (relaxed) embedding objective.
/// The gate is recomputed from current cosines each step and treated as
/// a constant within the step.
pub fn train_asge(graph: &LabelGraph, cfg: &AsgeConfig) -> Result<AsgeTrainResult> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = RngState::new(cfg.seed).fork(1);
    let mut net = AsgeNetwork::new(&mut store, &mut rng, graph.n, cfg);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n2 = (graph.n * graph.n) as f64;

    for epoch in 0..cfg.epochs {
        let mut g = Graph::new(&store);
        let e = net.forward_embeddings(&mut g, Mode::Train)?;
        let cos = g.cos_rows(e, e, COSINE_EPS)?;
        let mask = relaxation_mask(g.value(cos), &graph.a_sym, cfg.alpha);
        let relaxed = 1.0 - mask.sum() / n2;
        let loss = g.masked_sq_err(cos, &graph.a_sym, &mask)?;
        let loss_val = g.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!(
                "embedding loss became {loss_val} at epoch {epoch}"
            )));
        }
        let grads = g.backward(loss)?;
        drop(g);
        store.accumulate_grads(&grads);
        store.sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay)?;
        curve.push(AsgeEpoch {
            loss: loss_val,
            relaxed_fraction: relaxed,
        });
    }

    let embeddings = if cfg.epochs == 0 && cfg.norm == NormKind::BatchNorm {
        // no training step has populated BN statistics yet; report the
        // initialization embeddings from a train-mode pass instead
        let mut g = Graph::new(&store);
        let e = net.forward_embeddings(&mut g, Mode::Train)?;
        g.value(e).clone()
    } else {
        net.embeddings(&store)?
    };
    Ok(AsgeTrainResult {
        embeddings,
        curve,
        network: net,
        store,
    })
}

/// Per-pair fidelity diagnostics for a trained embedding set.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    /// (i, j, A'_ij, cos_ij, included, residual)
    pub pairs: Vec<(usize, usize, f64, f64, bool, f64)>,
    pub mean_residual: f64,
    pub max_residual: f64,
    pub relaxed_fraction: f64,
}

pub fn embedding_similarity_report(
    e: &Tensor,
    a_sym: &Tensor,
    alpha: Option<f64>,
) -> SimilarityReport {
    let n = a_sym.shape()[0];
    let cos = cosine_matrix(e);
    let mask = relaxation_mask(&cos, a_sym, alpha);
    let mut pairs = Vec::with_capacity(n * n);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut included = 0usize;
    for i in 0..n {
        for j in 0..n {
            let a = a_sym.at2(i, j);
            let c = cos.at2(i, j);
            let inc = mask.at2(i, j) != 0.0;
            let r = (c - a).abs();
            if inc {
                sum += r;
                max = max.max(r);
                included += 1;
            }
            pairs.push((i, j, a, c, inc, r));
        }
    }
    SimilarityReport {
        pairs,
        mean_residual: if included > 0 { sum / included as f64 } else { 0.0 },
        max_residual: max,
        relaxed_fraction: 1.0 - included as f64 / (n * n) as f64,
    }
}

pub fn write_similarity_report(report: &SimilarityReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "i,j,a_sym,cos,included,residual")?;
    for (i, j, a, c, inc, r) in &report.pairs {
        writeln!(f, "{i},{j},{a},{c},{},{r}", u8::from(*inc))?;
    }
    writeln!(f, "# mean_residual={}", report.mean_residual)?;
    writeln!(f, "# max_residual={}", report.max_residual)?;
    writeln!(f, "# relaxed_fraction={}", report.relaxed_fraction)?;
    Ok(())
}

/// Writes `embeddings.csv` (row = label) plus the binary container, and
/// `asge_loss.csv` with the loss curve.
pub fn export_embeddings(result: &AsgeTrainResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("embeddings.csv"))?);
    result.embeddings.write_csv(&mut f)?;
    result.embeddings.save_cmat(&dir.join("embeddings.cmat"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("asge_loss.csv"))?);
    writeln!(f, "epoch,loss,relaxed_fraction")?;
    for (i, ep) in result.curve.iter().enumerate() {
        writeln!(f, "{i},{},{}", ep.loss, ep.relaxed_fraction)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embed(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn loss_zero_for_perfect_fit() {
        // all rows equal, target all ones
        let e = embed(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let a = Tensor::full(&[2, 2], 1.0);
        assert!(asge_loss(&e, &a) < 1e-24);
        // orthogonal rows, identity target
        let e = embed(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let a = Tensor::eye(2);
        assert!(asge_loss(&e, &a) < 1e-24);
    }

    #[test]
    fn loss_two_for_equal_rows_identity_target() {
        let e = embed(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let a = Tensor::eye(2);
        assert!((asge_loss(&e, &a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_equals_unrelaxed() {
        let e = embed(&[&[1.0, 0.2], &[-0.3, 1.0], &[0.5, 0.5]]);
        let mut a = Tensor::eye(3);
        a.set2(0, 1, 0.4);
        a.set2(1, 0, 0.4);
        assert_eq!(
            relaxed_asge_loss(&e, &a, Some(0.0)),
            asge_loss(&e, &a)
        );
    }

    #[test]
    fn gate_branches() {
        // both below threshold -> excluded
        let cos = Tensor::new(vec![1, 1], vec![0.02]).unwrap();
        let a = Tensor::new(vec![1, 1], vec![0.05]).unwrap();
        assert_eq!(relaxation_mask(&cos, &a, Some(0.1)).data()[0], 0.0);
        // cos above threshold -> included
        let cos = Tensor::new(vec![1, 1], vec![0.30]).unwrap();
        assert_eq!(relaxation_mask(&cos, &a, Some(0.1)).data()[0], 1.0);
    }

    #[test]
    fn relaxed_loss_monotone_in_alpha() {
        let e = embed(&[&[1.0, 0.0], &[0.9, 0.1], &[-0.2, 1.0], &[0.3, -0.4]]);
        let mut a = Tensor::eye(4);
        a.set2(0, 1, 0.05);
        a.set2(1, 0, 0.05);
        a.set2(2, 3, 0.02);
        a.set2(3, 2, 0.02);
        let mut prev = f64::INFINITY;
        for alpha in [0.0, 0.05, 0.1, 0.3, 0.6] {
            let l = relaxed_asge_loss(&e, &a, Some(alpha));
            assert!(l <= prev + 1e-12, "alpha {alpha}: {l} > {prev}");
            prev = l;
        }
    }

    fn tiny_graph(n: usize) -> LabelGraph {
        let mut ann = crate::label_graph::AnnotationSet::new(n);
        for i in 0..n {
            ann.push(format!("e{i}"), [i, (i + 1) % n]).unwrap();
        }
        crate::label_graph::build_graph(&ann).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let graph = tiny_graph(4);
        let cfg = AsgeConfig {
            hidden: (8, 8),
            embed_dim: 4,
            epochs: 0,
            ..Default::default()
        };
        let r = train_asge(&graph, &cfg).unwrap();
        assert_eq!(r.embeddings.shape(), &[4, 4]);
        assert!(r.curve.is_empty());
    }

    #[test]
    fn determinism_and_row_permutation() {
        let graph = tiny_graph(5);
        let cfg = AsgeConfig {
            hidden: (8, 8),
            embed_dim: 4,
            epochs: 3,
            ..Default::default()
        };
        let a = train_asge(&graph, &cfg).unwrap();
        let b = train_asge(&graph, &cfg).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn permuting_one_hot_order_permutes_rows() {
        // forward over a permuted identity equals row-permuted embeddings
        let graph = tiny_graph(4);
        let cfg = AsgeConfig {
            hidden: (8, 8),
            embed_dim: 4,
            epochs: 2,
            norm: NormKind::None,
            ..Default::default()
        };
        let mut r = train_asge(&graph, &cfg).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut px = Tensor::zeros(&[4, 4]);
        for (row, &p) in perm.iter().enumerate() {
            px.set2(row, p, 1.0);
        }
        let mut g = Graph::new(&r.store);
        let x = g.input(px);
        let e = r.network.forward(&mut g, x, Mode::Eval).unwrap();
        let permuted = g.value(e).clone();
        for (row, &p) in perm.iter().enumerate() {
            for k in 0..4 {
                assert_eq!(permuted.at2(row, k), r.embeddings.at2(p, k));
            }
        }
    }

    #[test]
    fn report_matches_recomputation() {
        let e = embed(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let mut a = Tensor::eye(2);
        a.set2(0, 1, 0.5);
        a.set2(1, 0, 0.5);
        let rep = embedding_similarity_report(&e, &a, None);
        assert_eq!(rep.relaxed_fraction, 0.0);
        // independent recomputation of the residuals
        let cos01: f64 = 0.6;
        let expected_mean = (2.0 * (cos01 - 0.5).abs()) / 4.0;
        assert!((rep.mean_residual - expected_mean).abs() < 1e-12);
        assert!((rep.max_residual - 0.1).abs() < 1e-12);
        // perfect fit -> zero residuals
        let perfect = embedding_similarity_report(&e, &cosine_matrix(&e), None);
        assert_eq!(perfect.max_residual, 0.0);
    }

    #[test]
    fn invalid_alpha_rejected() {
        let cfg = AsgeConfig {
            alpha: Some(1.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
