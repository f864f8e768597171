//! Cross-modality attention head: project visual features into the
//! label-embedding space, score each location against each label
//! embedding by clipped cosine similarity, normalize, aggregate the
//! original visual features per category, and classify. Also hosts the
//! self-attention and uniform-attention baselines used for comparison.

use crate::asge::COSINE_EPS;
use crate::backbone::ScaleFeat;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Linear, Mode, NormKind, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Attention row sums below this threshold fall back to uniform weights.
pub const ATTENTION_EPS: f64 = 1e-12;

/// Which attention mechanism a head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Per-category cosine attention against label embeddings.
    Cma,
    /// One shared map from a learned per-location score.
    SelfAttention,
    /// Fixed uniform weights (global average pooling).
    Uniform,
}

/// Classifier bias layout: one shared scalar, or one bias per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    Shared,
    PerClass,
}

/// Per-location projection from visual space (C) into embedding space
/// (C_e): a stack of 1x1 layers, each followed by normalization and ReLU.
pub struct CmtModule {
    layers: Vec<Linear>,
    norms: Vec<Option<BatchNorm>>,
}

impl CmtModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        c_e: usize,
        depth: usize,
        norm: NormKind,
    ) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        let mut norms = Vec::with_capacity(depth);
        for l in 0..depth {
            let ci = if l == 0 { c_in } else { c_e };
            layers.push(Linear::new(store, rng, &format!("{name}.l{l}"), ci, c_e));
            norms.push(match norm {
                NormKind::BatchNorm => Some(BatchNorm::new(store, &format!("{name}.bn{l}"), c_e)),
                NormKind::None => None,
            });
        }
        Self { layers, norms }
    }

    /// Maps `[M, C]` to `[M, C_e]`; every location shares the weights.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (layer, norm) in self.layers.iter().zip(self.norms.iter_mut()) {
            h = layer.forward(g, h)?;
            if let Some(bn) = norm {
                h = bn.forward(g, h, mode)?;
            }
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn bn_state(&self) -> Vec<(String, Tensor)> {
        self.norms
            .iter()
            .flatten()
            .flat_map(|bn| bn.state_tensors())
            .collect()
    }

    pub fn load_bn_state(&mut self, get: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for bn in self.norms.iter_mut().flatten() {
            bn.load_state(get)?;
        }
        Ok(())
    }
}

/// Per-category linear classifier over aggregated visual features.
pub struct Classifier {
    pub w: crate::nn::ParamId,
    pub b: crate::nn::ParamId,
    pub bias: BiasKind,
    pub n: usize,
    pub c: usize,
}

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        n: usize,
        c: usize,
        bias: BiasKind,
    ) -> Self {
        let w = store.add(format!("{name}.w"), crate::nn::init_uniform(rng, &[n, c], c));
        let b = match bias {
            BiasKind::Shared => store.add(format!("{name}.b"), Tensor::zeros(&[1])),
            BiasKind::PerClass => store.add(format!("{name}.b"), Tensor::zeros(&[n])),
        };
        Self { w, b, bias, n, c }
    }

    /// `H [N, C]` -> probabilities `[N]`, y_k = sigmoid(w_k . h_k + b).
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let s = g.rowwise_dot(h, w)?;
        let s = match self.bias {
            BiasKind::Shared => g.add_bcast_scalar(s, b)?,
            BiasKind::PerClass => g.add(s, b)?,
        };
        Ok(g.sigmoid(s))
    }
}

/// Raw and normalized attention for one example: both `[N, M]` for the
/// category-wise head, `[1, M]` for the shared baselines.
pub struct AttentionMaps {
    pub raw: Tensor,
    pub normalized: Tensor,
}

/// Output of a single-scale head.
pub struct HeadOutput {
    /// Probabilities `[N]`.
    pub probs: Var,
    pub attention: AttentionMaps,
}

/// One CMA head: CMT projection plus classifier for a single scale.
pub struct CmaHead {
    pub cmt: CmtModule,
    pub clf: Classifier,
}

impl CmaHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        n: usize,
        c: usize,
        c_e: usize,
        cmt_depth: usize,
        norm: NormKind,
        bias: BiasKind,
    ) -> Self {
        Self {
            cmt: CmtModule::new(store, rng, &format!("{name}.cmt"), c, c_e, cmt_depth, norm),
            clf: Classifier::new(store, rng, &format!("{name}.clf"), n, c, bias),
        }
    }

    /// The full per-scale computation: project, score, normalize,
    /// aggregate the original features, classify.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        feat: &ScaleFeat,
        embeddings: Var,
        mode: Mode,
    ) -> Result<HeadOutput> {
        let projected = self.cmt.forward(g, feat.var, mode)?;
        let z = attention_scores(g, projected, embeddings)?;
        let a = g.row_norm_attention(z, ATTENTION_EPS)?;
        let h = g.matmul(a, feat.var)?; // aggregation uses the original features
        let probs = self.clf.forward(g, h)?;
        Ok(HeadOutput {
            probs,
            attention: AttentionMaps {
                raw: g.value(z).clone(),
                normalized: g.value(a).clone(),
            },
        })
    }
}

/// z_k^i = relu(cos(I_s^i, e_k)): `[M, C_e] x [N, C_e] -> [N, M]`.
pub fn attention_scores(g: &mut Graph, projected: Var, embeddings: Var) -> Result<Var> {
    let c = g.cos_rows(projected, embeddings, COSINE_EPS)?;
    Ok(g.relu(c))
}

/// Self-attention baseline head: one shared map from a learned
/// per-location score, z^i = sigmoid(score(I^i)); normalization,
/// aggregation, and classification mirror the CMA head.
pub struct SelfAttentionHead {
    score: Linear,
    pub clf: Classifier,
}

impl SelfAttentionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        n: usize,
        c: usize,
        bias: BiasKind,
    ) -> Self {
        let score = Linear::new(store, rng, &format!("{name}.score"), c, 1);
        // zero scores -> the head starts as exact uniform pooling and the
        // map only departs from it where the data supports it
        store.get_mut(score.w).value = Tensor::zeros(&[c, 1]);
        Self {
            score,
            clf: Classifier::new(store, rng, &format!("{name}.clf"), n, c, bias),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, feat: &ScaleFeat) -> Result<HeadOutput> {
        let m = feat.layout.locations();
        let s = self.score.forward(g, feat.var)?; // [M, 1]
        let s = g.reshape(s, vec![1, m])?;
        let z = g.sigmoid(s);
        let a = g.row_norm_attention(z, ATTENTION_EPS)?;
        let pooled = g.matmul(a, feat.var)?; // [1, C]
        let h = g.repeat_rows(pooled, self.clf.n)?;
        let probs = self.clf.forward(g, h)?;
        Ok(HeadOutput {
            probs,
            attention: AttentionMaps {
                raw: g.value(z).clone(),
                normalized: g.value(a).clone(),
            },
        })
    }
}

/// Uniform-attention control: fixed 1/M weights, i.e. global average
/// pooling under the same classifier.
pub struct UniformHead {
    pub clf: Classifier,
}

impl UniformHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        n: usize,
        c: usize,
        bias: BiasKind,
    ) -> Self {
        Self {
            clf: Classifier::new(store, rng, &format!("{name}.clf"), n, c, bias),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, feat: &ScaleFeat) -> Result<HeadOutput> {
        let m = feat.layout.locations();
        let a = g.input(Tensor::full(&[1, m], 1.0 / m as f64));
        let pooled = g.matmul(a, feat.var)?;
        let h = g.repeat_rows(pooled, self.clf.n)?;
        let probs = self.clf.forward(g, h)?;
        let uniform = Tensor::full(&[1, m], 1.0 / m as f64);
        Ok(HeadOutput {
            probs,
            attention: AttentionMaps {
                raw: uniform.clone(),
                normalized: uniform,
            },
        })
    }
}

/// Score fusion over scales: the average of per-scale probabilities.
/// Each scale owns an independent head instance.
pub fn fuse_scale_probs(g: &mut Graph, per_scale: &[Var]) -> Result<Var> {
    if per_scale.is_empty() {
        return Err(Error::MalformedInput("score fusion over zero scales".into()));
    }
    let mut acc = per_scale[0];
    for &p in &per_scale[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / per_scale.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Layout;

    fn feat(g: &mut Graph, rows: Vec<Vec<f64>>) -> ScaleFeat {
        let m = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let var = g.input(Tensor::new(vec![m, c], data).unwrap());
        ScaleFeat {
            var,
            layout: Layout::Video { t: m },
            channels: c,
            scale_id: 1,
        }
    }

    #[test]
    fn attention_score_extremes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g.input(Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap());
        // scaled copy, negated copy, orthogonal vector
        let p = g.input(
            Tensor::new(vec![3, 2], vec![4.0, 2.0, -2.0, -1.0, -1.0, 2.0]).unwrap(),
        );
        let z = attention_scores(&mut g, p, e).unwrap();
        let v = g.value(z).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn aggregation_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap());
        let i = g.input(Tensor::new(vec![2, 2], vec![0.0, 4.0, 4.0, 0.0]).unwrap());
        let h = g.matmul(a, i).unwrap();
        assert_eq!(g.value(h).data(), &[3.0, 1.0]);
    }

    #[test]
    fn classifier_examples() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let clf = Classifier::new(&mut store, &mut rng, "clf", 2, 2, BiasKind::Shared);
        // zero weights, zero bias -> 0.5 everywhere
        store.get_mut(clf.w).value = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new(&store);
        let h = g.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = clf.forward(&mut g, h).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        // w.h + b = ln 3 -> 0.75
        let mut store2 = ParamStore::new();
        let clf2 = Classifier::new(&mut store2, &mut rng, "clf", 1, 1, BiasKind::Shared);
        store2.get_mut(clf2.w).value = Tensor::new(vec![1, 1], vec![3f64.ln()]).unwrap();
        let mut g = Graph::new(&store2);
        let h = g.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = clf2.forward(&mut g, h).unwrap();
        assert!((g.value(y).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_location_collapses_to_direct_classification() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let mut head = CmaHead::new(
            &mut store,
            &mut rng,
            "head",
            2,
            3,
            4,
            2,
            NormKind::None,
            BiasKind::Shared,
        );
        let e_t = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.5, -0.2, 0.0, 1.0, -0.3, 0.8]).unwrap();
        let mut g = Graph::new(&store);
        let f = feat(&mut g, vec![vec![0.3, -1.2, 0.7]]);
        let e = g.input(e_t);
        let out = head.forward(&mut g, &f, e, Mode::Eval).unwrap();
        // single location: attention is 1 for every category
        assert_eq!(out.attention.normalized.data(), &[1.0, 1.0]);
        let w = store.value(head.clf.w).clone();
        let i0 = [0.3, -1.2, 0.7];
        for k in 0..2 {
            let s: f64 = (0..3).map(|j| w.at2(k, j) * i0[j]).sum();
            let expect = 1.0 / (1.0 + (-s).exp());
            assert!((g.value(out.probs).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_map_is_shared() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2);
        let mut head = SelfAttentionHead::new(&mut store, &mut rng, "sa", 3, 2, BiasKind::Shared);
        let mut g = Graph::new(&store);
        let f = feat(&mut g, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let out = head.forward(&mut g, &f).unwrap();
        assert_eq!(out.attention.normalized.shape(), &[1, 3]);
        let sum: f64 = out.attention.normalized.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_head_equals_mean_pooling() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3);
        let mut head = UniformHead::new(&mut store, &mut rng, "uni", 1, 2, BiasKind::Shared);
        let mut g = Graph::new(&store);
        let f = feat(&mut g, vec![vec![2.0, 0.0], vec![0.0, 4.0]]);
        let out = head.forward(&mut g, &f).unwrap();
        let w = store.value(head.clf.w).clone();
        let s = w.at2(0, 0) * 1.0 + w.at2(0, 1) * 2.0; // mean feature [1, 2]
        let expect = 1.0 / (1.0 + (-s).exp());
        assert!((g.value(out.probs).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn fusion_arithmetic() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::new(vec![1], vec![0.2]).unwrap());
        let b = g.input(Tensor::new(vec![1], vec![0.6]).unwrap());
        let fused = fuse_scale_probs(&mut g, &[a, b]).unwrap();
        assert!((g.value(fused).data()[0] - 0.4).abs() < 1e-15);
        // single scale is the identity
        let single = fuse_scale_probs(&mut g, &[a]).unwrap();
        assert_eq!(g.value(single).data(), g.value(a).data());
        assert!(fuse_scale_probs(&mut g, &[]).is_err());
    }

    #[test]
    fn scale_invariance_of_projected_location() {
        // scaling one projected location leaves z unchanged
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.2, -0.4, 1.0]).unwrap());
        let p1 = g.input(Tensor::new(vec![2, 2], vec![0.5, 0.1, 0.3, 0.9]).unwrap());
        let p2 = g.input(Tensor::new(vec![2, 2], vec![5.0, 1.0, 0.3, 0.9]).unwrap());
        let z1 = attention_scores(&mut g, p1, e).unwrap();
        let z2 = attention_scores(&mut g, p2, e).unwrap();
        let (v1, v2) = (g.value(z1).data().to_vec(), g.value(z2).data().to_vec());
        for (a, b) in v1.iter().zip(&v2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
