//! End-to-end classifier pipeline: model assembly (backbone + attention
//! heads + label embeddings), minibatch training with a stepped learning
//! rate, checkpointing with bitwise-reproducible resume, evaluation
//! reports, attention-map export, and run manifests.

use crate::backbone::{Layout, ScaleFeat, SNet, ToyImageBackbone};
use crate::cma::{AttentionKind, AttentionMaps, CmaHead, SelfAttentionHead, UniformHead};
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{
    class_weights, mean_average_precision, prf_metrics, video_metrics, MetricReport,
    PredictMode, PredictionBatch,
};
use crate::nn::{Mode, ParamId, ParamStore};
use crate::rng::RngState;
use crate::synth::{load_split, Dataset, Example};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

enum Backbone {
    Image(ToyImageBackbone),
    Video(SNet),
}

enum Heads {
    Cma(Vec<CmaHead>),
    SelfAttn(Vec<SelfAttentionHead>),
    Uniform(Vec<UniformHead>),
}

enum EmbedSource {
    /// Embeddings trained separately and held fixed.
    Fixed(Tensor),
    /// Embeddings registered as trainable parameters (joint mode).
    Joint(ParamId),
}

/// A full classifier: visual backbone plus one attention head per scale.
/// Parameters live in an external [`ParamStore`] so a tape can borrow the
/// store while the model itself stays mutable.
pub struct ClassifierModel {
    pub task: Task,
    pub attention: AttentionKind,
    pub num_labels: usize,
    pub scales: usize,
    backbone: Backbone,
    heads: Heads,
    embed: EmbedSource,
}

/// Attention maps of one scale, tagged with its layout.
pub struct ScaleAttention {
    pub scale_id: usize,
    pub layout: Layout,
    pub maps: AttentionMaps,
}

/// Result of one forward pass.
pub struct ForwardOut {
    /// Fused probabilities `[N]`, still on the tape.
    pub probs: Var,
    /// Per-scale probabilities before fusion.
    pub scale_probs: Vec<Var>,
    pub attention: Vec<ScaleAttention>,
}

impl ClassifierModel {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, embeddings: Tensor) -> Result<Self> {
        let n = cfg.dims.num_labels;
        if cfg.train.attention == AttentionKind::Cma
            && embeddings.shape() != [n, cfg.dims.embed_dim]
        {
            return Err(Error::ShapeMismatch(format!(
                "embeddings {:?}, expected [{n}, {}]",
                embeddings.shape(),
                cfg.dims.embed_dim
            )));
        }
        let mut rng = RngState::new(cfg.train.seed).fork(10);
        let (backbone, scales) = match cfg.task {
            Task::Image => (
                Backbone::Image(ToyImageBackbone::new(
                    store,
                    &mut rng,
                    cfg.dims.c_in,
                    cfg.dims.c_feat,
                    cfg.dims.scales,
                )),
                cfg.dims.scales,
            ),
            Task::Video => (
                Backbone::Video(SNet::new(
                    store,
                    &mut rng,
                    cfg.dims.c_in,
                    cfg.dims.c_feat,
                    cfg.train.snet_pool,
                )),
                1,
            ),
        };
        let c = cfg.dims.c_feat;
        let heads = match cfg.train.attention {
            AttentionKind::Cma => Heads::Cma(
                (0..scales)
                    .map(|s| {
                        CmaHead::new(
                            store,
                            &mut rng,
                            &format!("scale{s}"),
                            n,
                            c,
                            cfg.dims.embed_dim,
                            cfg.train.cmt_depth,
                            cfg.train.norm,
                            cfg.train.bias,
                        )
                    })
                    .collect(),
            ),
            AttentionKind::SelfAttention => Heads::SelfAttn(
                (0..scales)
                    .map(|s| {
                        SelfAttentionHead::new(
                            store,
                            &mut rng,
                            &format!("scale{s}"),
                            n,
                            c,
                            cfg.train.bias,
                        )
                    })
                    .collect(),
            ),
            AttentionKind::Uniform => Heads::Uniform(
                (0..scales)
                    .map(|s| {
                        UniformHead::new(store, &mut rng, &format!("scale{s}"), n, c, cfg.train.bias)
                    })
                    .collect(),
            ),
        };
        let embed = if cfg.train.attention == AttentionKind::Cma && cfg.train.joint {
            EmbedSource::Joint(store.add("embeddings", embeddings))
        } else {
            EmbedSource::Fixed(embeddings)
        };
        Ok(Self {
            task: cfg.task,
            attention: cfg.train.attention,
            num_labels: n,
            scales,
            backbone,
            heads,
            embed,
        })
    }

    /// The embedding matrix currently in effect.
    pub fn current_embeddings(&self, store: &ParamStore) -> Tensor {
        match &self.embed {
            EmbedSource::Fixed(t) => t.clone(),
            EmbedSource::Joint(id) => store.value(*id).clone(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, features: &Tensor, mode: Mode) -> Result<ForwardOut> {
        let x = g.input(features.clone());
        let maps: Vec<ScaleFeat> = match &self.backbone {
            Backbone::Image(bb) => bb.forward(g, x)?,
            Backbone::Video(net) => vec![net.forward(g, x)?],
        };
        let mut probs = Vec::with_capacity(maps.len());
        let mut attention = Vec::with_capacity(maps.len());
        match &mut self.heads {
            Heads::Cma(heads) => {
                let e = match &self.embed {
                    EmbedSource::Fixed(t) => g.input(t.clone()),
                    EmbedSource::Joint(id) => g.param(*id),
                };
                for (head, feat) in heads.iter_mut().zip(&maps) {
                    let out = head.forward(g, feat, e, mode)?;
                    probs.push(out.probs);
                    attention.push(ScaleAttention {
                        scale_id: feat.scale_id,
                        layout: feat.layout,
                        maps: out.attention,
                    });
                }
            }
            Heads::SelfAttn(heads) => {
                for (head, feat) in heads.iter_mut().zip(&maps) {
                    let out = head.forward(g, feat)?;
                    probs.push(out.probs);
                    attention.push(ScaleAttention {
                        scale_id: feat.scale_id,
                        layout: feat.layout,
                        maps: out.attention,
                    });
                }
            }
            Heads::Uniform(heads) => {
                for (head, feat) in heads.iter_mut().zip(&maps) {
                    let out = head.forward(g, feat)?;
                    probs.push(out.probs);
                    attention.push(ScaleAttention {
                        scale_id: feat.scale_id,
                        layout: feat.layout,
                        maps: out.attention,
                    });
                }
            }
        }
        let fused = crate::cma::fuse_scale_probs(g, &probs)?;
        Ok(ForwardOut {
            probs: fused,
            scale_probs: probs,
            attention,
        })
    }

    fn bn_state(&self) -> Vec<(String, Tensor)> {
        match &self.heads {
            Heads::Cma(heads) => heads.iter().flat_map(|h| h.cmt.bn_state()).collect(),
            _ => Vec::new(),
        }
    }

    fn load_bn_state(&mut self, get: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        if let Heads::Cma(heads) = &mut self.heads {
            for h in heads {
                h.cmt.load_bn_state(get)?;
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: f64,
}

/// Owns the parameter store, model, optimizer state, and epoch counter.
pub struct Trainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: ClassifierModel,
    /// Drives example shuffling; its counter is checkpointed so a resumed
    /// run continues the exact same stream.
    pub rng: RngState,
    pub epoch: usize,
    pub priors: Vec<f64>,
    pub log: Vec<TrainLogEntry>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, embeddings: Tensor, priors: Vec<f64>) -> Result<Self> {
        if priors.len() != cfg.dims.num_labels {
            return Err(Error::ShapeMismatch(format!(
                "{} priors for {} labels",
                priors.len(),
                cfg.dims.num_labels
            )));
        }
        let mut store = ParamStore::new();
        let model = ClassifierModel::new(&mut store, cfg, embeddings)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            rng: RngState::new(cfg.train.seed).fork(20),
            epoch: 0,
            priors,
            log: Vec::new(),
        })
    }

    /// Stepped schedule: the base rate divided by `lr_decay_factor` once
    /// per `lr_decay_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = &self.cfg.train;
        if t.lr_decay_every == 0 || t.lr_decay_factor == 1.0 {
            return t.lr;
        }
        t.lr / t.lr_decay_factor.powi((epoch / t.lr_decay_every) as i32)
    }

    fn example_loss_tensors(&self, ex: &Example) -> (Tensor, Tensor) {
        let y: Vec<f64> = ex.labels.iter().map(|&l| f64::from(l)).collect();
        let w = class_weights(&ex.labels, &self.priors, self.cfg.beta);
        (
            Tensor::from_op(vec![self.model.num_labels], y),
            Tensor::from_op(vec![self.model.num_labels], w),
        )
    }

    /// One pass over the data in shuffled minibatches; returns the mean
    /// per-example loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.examples.is_empty() {
            return Err(Error::MalformedInput("training split is empty".into()));
        }
        let lr = self.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.examples.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            self.store.zero_grads();
            for &idx in chunk {
                let ex = &data.examples[idx];
                let (y, w) = self.example_loss_tensors(ex);
                let mut g = Graph::new(&self.store);
                let out = self.model.forward(&mut g, &ex.features, Mode::Train)?;
                // The weighted loss is applied per scale and averaged rather
                // than taken on the fused score: with the loss on the fused
                // average, a scale that lags behind the others only ever sees
                // the ensemble's (small) residual and never catches up. At
                // L=1 both formulations are identical.
                let mut loss = g.weighted_bce(out.scale_probs[0], &y, &w)?;
                for &p in &out.scale_probs[1..] {
                    let l = g.weighted_bce(p, &y, &w)?;
                    loss = g.add(loss, l)?;
                }
                if out.scale_probs.len() > 1 {
                    loss = g.scale(loss, 1.0 / out.scale_probs.len() as f64);
                }
                total += g.value(loss).data()[0];
                let grads = g.backward(loss)?;
                drop(g);
                self.store.accumulate_grads(&grads);
            }
            self.store.scale_grads(1.0 / chunk.len() as f64);
            // Score fusion averages the per-scale outputs, which scales every
            // per-scale parameter's gradient by 1/L relative to the L=1 model.
            // Undo that factor so per-scale modules see the same effective
            // step size at any scale count; shared parameters (trunk,
            // embeddings) already sum contributions from all scales. At L=1
            // the factor is 1 and training is bit-identical to plain SGD.
            let levels = self.cfg.dims.scales;
            if levels > 1 {
                for id in self.store.ids() {
                    let p = self.store.get_mut(id);
                    if p.name.starts_with("scale") || p.name.starts_with("backbone.head") {
                        for v in p.grad.data_mut() {
                            *v *= levels as f64;
                        }
                    }
                }
            }
            self.store.sgd_step(lr, self.cfg.train.momentum, self.cfg.train.weight_decay)?;
        }
        self.epoch += 1;
        Ok(total / data.examples.len() as f64)
    }

    /// Trains up to the configured epoch count (resuming from the current
    /// epoch), logging train loss and validation mAP per epoch.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        while self.epoch < self.cfg.train.epochs {
            let lr = self.lr_at(self.epoch);
            let train_loss = self.train_epoch(train)?;
            let (val_map, _) = mean_average_precision(&self.predict(val)?);
            self.log.push(TrainLogEntry {
                epoch: self.epoch,
                lr,
                train_loss,
                val_map,
            });
        }
        Ok(())
    }

    /// Eval-mode scores for every example.
    pub fn predict(&mut self, data: &Dataset) -> Result<PredictionBatch> {
        let mut batch = PredictionBatch::default();
        for ex in &data.examples {
            let mut g = Graph::new(&self.store);
            let out = self.model.forward(&mut g, &ex.features, Mode::Eval)?;
            let scores = g.value(out.probs).data().to_vec();
            batch.push(ex.id.clone(), scores, ex.labels.clone())?;
        }
        Ok(batch)
    }

    /// Eval-mode forward for a single example, exposing attention maps.
    pub fn forward_eval(&mut self, ex: &Example) -> Result<(Tensor, Vec<ScaleAttention>)> {
        let mut g = Graph::new(&self.store);
        let out = self.model.forward(&mut g, &ex.features, Mode::Eval)?;
        let probs = g.value(out.probs).clone();
        Ok((probs, out.attention))
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,lr,train_loss,val_map")?;
        for e in &self.log {
            writeln!(f, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_map)?;
        }
        Ok(())
    }
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 4] = b"CMCK";
const CKPT_VERSION: u16 = 1;

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    t.write_cmat(w)?;
    Ok(())
}

fn read_entry<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
    Ok((name, Tensor::read_cmat(r)?))
}

impl Trainer {
    /// Everything needed for bitwise resume: parameters, momentum
    /// buffers, normalization running statistics, priors, the shuffle
    /// stream position, and the epoch counter.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (_, p) in self.store.iter() {
            entries.push((format!("param.{}", p.name), p.value.clone()));
            entries.push((format!("mom.{}", p.name), p.momentum_buf.clone()));
        }
        for (name, t) in self.model.bn_state() {
            entries.push((format!("bn.{name}"), t));
        }
        if let EmbedSource::Fixed(t) = &self.model.embed {
            entries.push(("embed.fixed".into(), t.clone()));
        }
        entries.push((
            "meta.priors".into(),
            Tensor::from_op(vec![self.priors.len()], self.priors.clone()),
        ));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&(self.epoch as u64).to_le_bytes())?;
        f.write_all(&self.rng.seed().to_le_bytes())?;
        f.write_all(&self.rng.counter().to_le_bytes())?;
        f.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in &entries {
            write_entry(&mut f, name, t)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b2 = [0u8; 2];
        f.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b8)?;
        let epoch = u64::from_le_bytes(b8) as usize;
        f.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        f.read_exact(&mut b8)?;
        let counter = u64::from_le_bytes(b8);
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut entries = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_entry(&mut f)?;
            entries.insert(name, t);
        }
        let take = |name: &str| -> Result<Tensor> {
            entries
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint is missing '{name}'")))
        };
        let priors = take("meta.priors")?.data().to_vec();
        let embeddings = match entries.get("embed.fixed") {
            Some(t) => t.clone(),
            // joint mode keeps embeddings among the parameters
            None => take("param.embeddings")?,
        };
        let mut trainer = Self::new(cfg, embeddings, priors)?;
        for id in trainer.store.ids() {
            let name = trainer.store.get(id).name.clone();
            let value = take(&format!("param.{name}"))?;
            let momentum = take(&format!("mom.{name}"))?;
            let p = trainer.store.get_mut(id);
            if value.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint parameter '{name}': {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            p.momentum_buf = momentum;
        }
        trainer
            .model
            .load_bn_state(&|name| entries.get(&format!("bn.{name}")).cloned())?;
        trainer.rng = RngState::from_parts(seed, counter);
        trainer.epoch = epoch;
        Ok(trainer)
    }
}

// ---- evaluation ----

/// The metric block for a scored batch: mAP plus per-class/overall
/// precision, recall, and F1 at the configured threshold and at top-K for
/// image runs; ranking metrics for video runs.
pub fn evaluate(cfg: &RunConfig, batch: &PredictionBatch) -> MetricReport {
    let mut r = MetricReport::default();
    match cfg.task {
        Task::Image => {
            let (map, excluded) = mean_average_precision(batch);
            r.set("map", map);
            r.set("classes_excluded", excluded.len() as f64);
            let blocks = [
                ("threshold", PredictMode::Threshold(cfg.eval.tau)),
                ("topk", PredictMode::TopK(cfg.eval.topk)),
            ];
            for (prefix, mode) in blocks {
                let m = prf_metrics(batch, mode);
                r.set(&format!("{prefix}.cp"), m.cp);
                r.set(&format!("{prefix}.cr"), m.cr);
                r.set(&format!("{prefix}.cf1"), m.cf1);
                r.set(&format!("{prefix}.op"), m.op);
                r.set(&format!("{prefix}.or"), m.or_);
                r.set(&format!("{prefix}.of1"), m.of1);
            }
        }
        Task::Video => {
            let v = video_metrics(batch);
            r.set("gap", v.gap);
            r.set("hit1", v.hit1);
            r.set("perr", v.perr);
            r.set("map", v.map);
        }
    }
    r
}

// ---- attention export ----

/// Reduces a full-resolution ground-truth mask row to the coarser
/// attention grid: an attention cell is inside the mask if any input
/// position it covers is.
pub fn downsample_mask(mask: &Tensor, label: usize, layout: Layout) -> Vec<f64> {
    match layout {
        Layout::Image { h, w } => {
            let (mh, mw) = (mask.shape()[1], mask.shape()[2]);
            let mut out = vec![0.0; h * w];
            for y in 0..mh {
                for x in 0..mw {
                    if mask.at3(label, y, x) != 0.0 {
                        let cy = (y * h / mh).min(h - 1);
                        let cx = (x * w / mw).min(w - 1);
                        out[cy * w + cx] = 1.0;
                    }
                }
            }
            out
        }
        Layout::Video { t } => {
            let mt = mask.shape()[1];
            let mut out = vec![0.0; t];
            for f in 0..mt {
                if mask.at2(label, f) != 0.0 {
                    out[(f * t / mt).min(t - 1)] = 1.0;
                }
            }
            out
        }
    }
}

/// Writes an ASCII PGM (P2) grayscale image, scaled so the largest value
/// maps to 255.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {h}x{w} image",
            values.len()
        )));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P2")?;
    writeln!(f, "{w} {h}")?;
    writeln!(f, "255")?;
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let v = if max > 0.0 { values[y * w + x] / max } else { 0.0 };
                format!("{}", (v * 255.0).round() as u32)
            })
            .collect();
        writeln!(f, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Per-label localization summary for one exported example:
/// `(label, scale_id, attention mass inside the mask, mask area fraction)`.
/// The mask area fraction is the mass a uniform map would place inside.
#[derive(Debug, Clone, Default)]
pub struct AttentionStats {
    pub masses: Vec<(usize, usize, f64, f64)>,
}

/// Runs one example in eval mode and writes, per scale, the normalized
/// attention as CSV plus one PGM per map row, together with a
/// `attention_stats.csv` summary of mask coverage for present labels.
pub fn export_attention(trainer: &mut Trainer, ex: &Example, dir: &Path) -> Result<AttentionStats> {
    std::fs::create_dir_all(dir)?;
    let (_, attention) = trainer.forward_eval(ex)?;
    let mut stats = AttentionStats::default();
    for scale in &attention {
        let a = &scale.maps.normalized;
        let rows = a.shape()[0];
        let m = a.shape()[1];
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("attention_scale{}.csv", scale.scale_id)),
        )?);
        a.write_csv(&mut f)?;
        let (ph, pw) = match scale.layout {
            Layout::Image { h, w } => (h, w),
            Layout::Video { t } => (1, t),
        };
        for row in 0..rows {
            let values: Vec<f64> = (0..m).map(|i| a.at2(row, i)).collect();
            let name = if rows == 1 {
                format!("attention_scale{}_shared.pgm", scale.scale_id)
            } else {
                format!("attention_scale{}_label{row:02}.pgm", scale.scale_id)
            };
            write_pgm(&dir.join(name), ph, pw, &values)?;
        }
        for (k, &present) in ex.labels.iter().enumerate() {
            if present == 0 {
                continue;
            }
            let row = if rows == 1 { 0 } else { k };
            let mask_ds = downsample_mask(&ex.mask, k, scale.layout);
            let mass: f64 = (0..m).map(|i| a.at2(row, i) * mask_ds[i]).sum();
            let area = mask_ds.iter().sum::<f64>() / m as f64;
            stats.masses.push((k, scale.scale_id, mass, area));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("attention_stats.csv"))?);
    writeln!(f, "label,scale,mass_inside,mask_fraction")?;
    for (k, s, mass, area) in &stats.masses {
        writeln!(f, "{k},{s},{mass},{area}")?;
    }
    Ok(stats)
}

// ---- manifests and high-level runs ----

/// Writes the manifest next to a run's outputs: the full configuration
/// snapshot plus metadata keys. A manifest parses back as a configuration.
pub fn write_manifest(cfg: &RunConfig, command: &str, path: &Path) -> Result<()> {
    let mut s = cfg.snapshot();
    s.push_str(&format!("manifest.command={command}\n"));
    s.push_str(&format!("manifest.seed={}\n", cfg.train.seed));
    s.push_str(&format!("manifest.version={}\n", env!("CARGO_PKG_VERSION")));
    std::fs::write(path, s)?;
    Ok(())
}

/// Loads the embedding matrix a run should use: the trained matrix for
/// cosine attention, a placeholder otherwise.
pub fn load_embeddings(cfg: &RunConfig) -> Result<Tensor> {
    if cfg.train.attention == AttentionKind::Cma {
        Tensor::load_cmat(&cfg.paths.embeddings.join("embeddings.cmat"))
    } else {
        Ok(Tensor::zeros(&[cfg.dims.num_labels, cfg.dims.embed_dim]))
    }
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = load_split(&cfg.paths.data, cfg.task, cfg.dims.num_labels, "train")?;
    let test = load_split(&cfg.paths.data, cfg.task, cfg.dims.num_labels, "test")?;
    Ok((train, test))
}

/// Full training run: loads data and embeddings, trains (or resumes from
/// `out/checkpoint.cmck` when `resume` is set), then writes the
/// checkpoint, training log, evaluation report, and manifest under
/// `paths.out`.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<(Trainer, MetricReport)> {
    let (train, test) = load_datasets(cfg)?;
    let ckpt = cfg.paths.out.join("checkpoint.cmck");
    let mut trainer = if resume && ckpt.exists() {
        Trainer::load_checkpoint(cfg, &ckpt)?
    } else {
        let priors = crate::label_graph::label_priors(&train.annotations()?)?;
        Trainer::new(cfg, load_embeddings(cfg)?, priors)?
    };
    trainer.fit(&train, &test)?;
    std::fs::create_dir_all(&cfg.paths.out)?;
    trainer.save_checkpoint(&ckpt)?;
    trainer.write_log(&cfg.paths.out.join("train_log.csv"))?;
    let report = evaluate(cfg, &trainer.predict(&test)?);
    report.write_kv(&cfg.paths.out.join("metrics.txt"))?;
    report.write_table(&cfg.paths.out.join("metrics_table.txt"))?;
    write_manifest(cfg, "train", &cfg.paths.out.join("manifest.txt"))?;
    Ok((trainer, report))
}

/// Evaluation-only run against an existing checkpoint.
pub fn run_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let (_, test) = load_datasets(cfg)?;
    let mut trainer = Trainer::load_checkpoint(cfg, &cfg.paths.out.join("checkpoint.cmck"))?;
    let report = evaluate(cfg, &trainer.predict(&test)?);
    report.write_kv(&cfg.paths.out.join("metrics_eval.txt"))?;
    write_manifest(cfg, "eval", &cfg.paths.out.join("manifest_eval.txt"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn tiny_cfg(extra: &str) -> RunConfig {
        let base = "dims.num_labels=4\ndims.c_in=2\ndims.c_feat=4\ndims.embed_dim=4\n\
                    dims.height=8\ndims.width=8\ndims.scales=1\n\
                    train.epochs=1\ntrain.batch_size=4\ntrain.lr=0.05\n\
                    synth.train_examples=8\nsynth.test_examples=4\nsynth.cell=3\n\
                    synth.groups=2\n";
        RunConfig::parse(&format!("{base}{extra}")).unwrap()
    }

    fn tiny_run(cfg: &RunConfig) -> (Trainer, Dataset, Dataset) {
        let (train, test) = generate(&cfg.synth).unwrap();
        let priors = crate::label_graph::label_priors(&train.annotations().unwrap()).unwrap();
        let mut rng = RngState::new(7);
        let mut e = Tensor::zeros(&[cfg.dims.num_labels, cfg.dims.embed_dim]);
        for v in e.data_mut() {
            *v = rng.normal();
        }
        let trainer = Trainer::new(cfg, e, priors).unwrap();
        (trainer, train, test)
    }

    #[test]
    fn one_epoch_finite_loss() {
        let cfg = tiny_cfg("");
        let (mut trainer, train, _) = tiny_run(&cfg);
        let loss = trainer.train_epoch(&train).unwrap();
        assert!(loss.is_finite() && loss > 0.0, "loss {loss}");
        assert_eq!(trainer.epoch, 1);
    }

    #[test]
    fn lr_schedule_steps() {
        let mut cfg = tiny_cfg("train.lr_decay_factor=10\ntrain.lr_decay_every=2\n");
        cfg.train.lr = 1.0;
        let (trainer, _, _) = tiny_run(&cfg);
        assert_eq!(trainer.lr_at(0), 1.0);
        assert_eq!(trainer.lr_at(1), 1.0);
        assert_eq!(trainer.lr_at(2), 0.1);
        assert_eq!(trainer.lr_at(5), 0.01);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("");
        let (mut trainer, train, _) = tiny_run(&cfg);
        trainer.train_epoch(&train).unwrap();
        let path = dir.path().join("ck.cmck");
        trainer.save_checkpoint(&path).unwrap();
        let restored = Trainer::load_checkpoint(&cfg, &path).unwrap();
        assert_eq!(restored.epoch, trainer.epoch);
        assert_eq!(restored.rng, trainer.rng);
        for (a, b) in trainer.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.1.value, b.1.value, "param {}", a.1.name);
            assert_eq!(a.1.momentum_buf, b.1.momentum_buf);
        }
        // continuing both copies yields bitwise-identical parameters
        let mut resumed = restored;
        trainer.train_epoch(&train).unwrap();
        resumed.train_epoch(&train).unwrap();
        for (a, b) in trainer.store.iter().zip(resumed.store.iter()) {
            assert_eq!(a.1.value, b.1.value, "param {}", a.1.name);
        }
    }

    #[test]
    fn evaluate_emits_expected_keys() {
        let cfg = tiny_cfg("");
        let (mut trainer, _, test) = tiny_run(&cfg);
        let report = evaluate(&cfg, &trainer.predict(&test).unwrap());
        for key in ["map", "threshold.cf1", "topk.of1"] {
            assert!(report.get(key).is_some(), "missing {key}");
        }
        let vcfg = RunConfig::parse(
            "task=video\ndims.num_labels=4\ndims.c_in=2\ndims.c_feat=4\ndims.embed_dim=4\n\
             dims.frames=32\ntrain.epochs=1\nsynth.train_examples=8\nsynth.test_examples=4\n\
             synth.cell=6\n",
        )
        .unwrap();
        let (mut vt, _, vtest) = tiny_run(&vcfg);
        let vreport = evaluate(&vcfg, &vt.predict(&vtest).unwrap());
        for key in ["gap", "hit1", "perr", "map"] {
            assert!(vreport.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn self_and_uniform_heads_train() {
        for kind in ["self", "uniform"] {
            let cfg = tiny_cfg(&format!("train.attention={kind}\n"));
            let (mut trainer, train, _) = tiny_run(&cfg);
            let loss = trainer.train_epoch(&train).unwrap();
            assert!(loss.is_finite(), "{kind} loss {loss}");
        }
    }

    #[test]
    fn joint_mode_updates_embeddings() {
        let cfg = tiny_cfg("train.joint=true\n");
        let (mut trainer, train, _) = tiny_run(&cfg);
        let before = trainer.model.current_embeddings(&trainer.store);
        trainer.train_epoch(&train).unwrap();
        let after = trainer.model.current_embeddings(&trainer.store);
        assert_ne!(before, after);
    }

    #[test]
    fn mask_downsampling_maps_blocks() {
        // 4x4 mask, single label, top-left 2x2 block set
        let mut mask = Tensor::zeros(&[1, 4, 4]);
        for y in 0..2 {
            for x in 0..2 {
                mask.data_mut()[y * 4 + x] = 1.0;
            }
        }
        let ds = downsample_mask(&mask, 0, Layout::Image { h: 2, w: 2 });
        assert_eq!(ds, vec![1.0, 0.0, 0.0, 0.0]);
        // video: frames 0..4 of 8 set, squeezed to 2 cells
        let mut vm = Tensor::zeros(&[1, 8]);
        for f in 0..4 {
            vm.data_mut()[f] = 1.0;
        }
        let ds = downsample_mask(&vm, 0, Layout::Video { t: 2 });
        assert_eq!(ds, vec![1.0, 0.0]);
    }

    #[test]
    fn attention_export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("");
        let (mut trainer, train, _) = tiny_run(&cfg);
        let ex = train
            .examples
            .iter()
            .find(|e| e.labels.iter().any(|&l| l == 1))
            .unwrap();
        let stats = export_attention(&mut trainer, ex, dir.path()).unwrap();
        assert!(!stats.masses.is_empty());
        assert!(dir.path().join("attention_scale1.csv").exists());
        assert!(dir.path().join("attention_stats.csv").exists());
        for (_, _, mass, area) in &stats.masses {
            assert!((0.0..=1.0 + 1e-9).contains(mass));
            assert!(*area > 0.0);
        }
    }

    #[test]
    fn manifest_parses_back_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("");
        let path = dir.path().join("manifest.txt");
        write_manifest(&cfg, "train", &path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.dims.num_labels, cfg.dims.num_labels);
        assert_eq!(back.snapshot(), cfg.snapshot());
    }

    #[test]
    #[ignore = "diagnostic: per-scale quality of a multi-scale run"]
    fn per_scale_map_diagnostic() {
        let cfg = RunConfig::parse("dims.scales=3\npaths.data=x\n").unwrap();
        let mut cfg = cfg;
        cfg.override_seed(0);
        let (train, test) = generate(&cfg.synth).unwrap();
        let graph = crate::label_graph::build_graph(&train.annotations().unwrap()).unwrap();
        let asge = crate::asge::train_asge(&graph, &cfg.asge).unwrap();
        let priors = graph.priors.clone();
        let mut trainer = Trainer::new(&cfg, asge.embeddings, priors).unwrap();
        trainer.fit(&train, &test).unwrap();
        for s in 0..=3 {
            let mut batch = PredictionBatch::default();
            for ex in &test.examples {
                let mut g = Graph::new(&trainer.store);
                let out = trainer.model.forward(&mut g, &ex.features, Mode::Eval).unwrap();
                let v = if s == 0 {
                    g.value(out.probs).data().to_vec()
                } else {
                    g.value(out.scale_probs[s - 1]).data().to_vec()
                };
                batch.push(ex.id.clone(), v, ex.labels.clone()).unwrap();
            }
            let (map, _) = mean_average_precision(&batch);
            let name = if s == 0 { "fused".into() } else { format!("scale{s}") };
            println!("{name}: mAP {map:.4}");
        }
    }

    #[test]
    fn write_pgm_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 1, 2, &[0.5, 1.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n2 1\n255\n128 255\n");
    }
}
