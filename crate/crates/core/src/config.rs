//! Run configuration: a flat, typed `key=value` text format with section
//! prefixes (`train.lr=0.01`). Unknown keys are rejected so manifests and
//! configs stay diff-friendly and typo-safe.

use crate::asge::AsgeConfig;
use crate::cma::{AttentionKind, BiasKind};
use crate::error::{Error, Result};
use crate::nn::NormKind;
use crate::synth::SyntheticSpec;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Image,
    Video,
}

#[derive(Debug, Clone)]
pub struct Dims {
    pub num_labels: usize,
    pub c_in: usize,
    pub c_feat: usize,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub scales: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub attention: AttentionKind,
    pub joint: bool,
    pub norm: NormKind,
    pub cmt_depth: usize,
    pub bias: BiasKind,
    pub snet_pool: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub tau: f64,
    pub topk: usize,
}

#[derive(Debug, Clone)]
pub struct Paths {
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub dims: Dims,
    pub asge: AsgeConfig,
    pub train: TrainSection,
    pub beta: f64,
    pub eval: EvalSection,
    pub paths: Paths,
    pub synth: SyntheticSpec,
}

struct Kv {
    map: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Kv {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{}'", k.trim())));
            }
        }
        Ok(Self {
            map,
            consumed: Default::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(String::as_str);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    fn get_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some("") | Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !consumed.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key(s): {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn parse_norm(v: &str) -> Result<NormKind> {
    match v {
        "bn" => Ok(NormKind::BatchNorm),
        "none" => Ok(NormKind::None),
        other => Err(Error::Config(format!("norm must be bn|none, got '{other}'"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = Kv::parse(text)?;
        // manifest metadata keys are tolerated so a manifest can stand in
        // for its config
        for key in ["manifest.seed", "manifest.version", "manifest.command"] {
            let _ = kv.raw(key);
        }

        let task = match kv.raw("task").unwrap_or("image") {
            "image" => Task::Image,
            "video" => Task::Video,
            other => return Err(Error::Config(format!("task must be image|video, got '{other}'"))),
        };
        let dims = Dims {
            num_labels: kv.get("dims.num_labels", 12usize)?,
            c_in: kv.get("dims.c_in", 4usize)?,
            c_feat: kv.get("dims.c_feat", 16usize)?,
            embed_dim: kv.get("dims.embed_dim", 16usize)?,
            height: kv.get("dims.height", 32usize)?,
            width: kv.get("dims.width", 32usize)?,
            frames: kv.get("dims.frames", 64usize)?,
            scales: kv.get("dims.scales", 1usize)?,
        };
        let asge = AsgeConfig {
            hidden: (
                kv.get("asge.hidden1", 256usize)?,
                kv.get("asge.hidden2", 256usize)?,
            ),
            embed_dim: dims.embed_dim,
            lr: kv.get("asge.lr", 0.01)?,
            momentum: kv.get("asge.momentum", 0.9)?,
            weight_decay: kv.get("asge.weight_decay", 0.0)?,
            epochs: kv.get("asge.epochs", 2000usize)?,
            alpha: kv.get_opt("asge.alpha")?,
            seed: kv.get("asge.seed", 0u64)?,
            norm: parse_norm(kv.raw("asge.norm").unwrap_or("bn"))?,
        };
        let attention = match kv.raw("train.attention").unwrap_or("cma") {
            "cma" => AttentionKind::Cma,
            "self" => AttentionKind::SelfAttention,
            "uniform" => AttentionKind::Uniform,
            other => {
                return Err(Error::Config(format!(
                    "train.attention must be cma|self|uniform, got '{other}'"
                )))
            }
        };
        let bias = match kv.raw("train.bias").unwrap_or("shared") {
            "shared" => BiasKind::Shared,
            "per_class" => BiasKind::PerClass,
            other => {
                return Err(Error::Config(format!(
                    "train.bias must be shared|per_class, got '{other}'"
                )))
            }
        };
        let train = TrainSection {
            lr: kv.get("train.lr", 0.01)?,
            momentum: kv.get("train.momentum", 0.9)?,
            weight_decay: kv.get("train.weight_decay", 1e-5)?,
            epochs: kv.get("train.epochs", 20usize)?,
            batch_size: kv.get("train.batch_size", 16usize)?,
            lr_decay_factor: kv.get("train.lr_decay_factor", 10.0)?,
            lr_decay_every: kv.get("train.lr_decay_every", 12usize)?,
            seed: kv.get("train.seed", 0u64)?,
            attention,
            joint: kv.get("train.joint", false)?,
            norm: parse_norm(kv.raw("train.norm").unwrap_or("none"))?,
            cmt_depth: kv.get("train.cmt_depth", 2usize)?,
            bias,
            snet_pool: kv.get("train.snet_pool", 2usize)?,
        };
        let beta = kv.get("loss.beta", 0.0)?;
        let eval = EvalSection {
            tau: kv.get("eval.tau", 0.5)?,
            topk: kv.get("eval.topk", 3usize)?,
        };
        let paths = Paths {
            data: PathBuf::from(kv.raw("paths.data").unwrap_or("data")),
            embeddings: PathBuf::from(kv.raw("paths.embeddings").unwrap_or("embeddings")),
            out: PathBuf::from(kv.raw("paths.out").unwrap_or("out")),
        };
        let synth = SyntheticSpec {
            task,
            num_labels: dims.num_labels,
            groups: kv.get("synth.groups", 2usize)?,
            q_in: kv.get("synth.q_in", 0.5)?,
            q_out: kv.get("synth.q_out", 0.02)?,
            noise: kv.get("synth.noise", 1.2)?,
            train_examples: kv.get("synth.train_examples", 2000usize)?,
            test_examples: kv.get("synth.test_examples", 500usize)?,
            height: dims.height,
            width: dims.width,
            frames: dims.frames,
            c_in: dims.c_in,
            cell: kv.get("synth.cell", 4usize)?,
            amplitude: kv.get("synth.amplitude", 2.0)?,
            seed: kv.get("synth.seed", 0u64)?,
        };
        kv.finish()?;
        let cfg = Self {
            task,
            dims,
            asge,
            train,
            beta,
            eval,
            paths,
            synth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.asge.validate()?;
        if self.dims.num_labels == 0 {
            return Err(Error::Config("dims.num_labels must be positive".into()));
        }
        if self.dims.scales == 0 {
            return Err(Error::Config("dims.scales must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("loss.beta must be >= 0".into()));
        }
        self.synth.validate()?;
        Ok(())
    }

    /// Overrides every per-section seed at once (CLI `--seed`).
    pub fn override_seed(&mut self, seed: u64) {
        self.asge.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Serializes the full configuration back to the flat format.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push(
            "task",
            match self.task {
                Task::Image => "image".into(),
                Task::Video => "video".into(),
            },
        );
        push("dims.num_labels", self.dims.num_labels.to_string());
        push("dims.c_in", self.dims.c_in.to_string());
        push("dims.c_feat", self.dims.c_feat.to_string());
        push("dims.embed_dim", self.dims.embed_dim.to_string());
        push("dims.height", self.dims.height.to_string());
        push("dims.width", self.dims.width.to_string());
        push("dims.frames", self.dims.frames.to_string());
        push("dims.scales", self.dims.scales.to_string());
        push("asge.hidden1", self.asge.hidden.0.to_string());
        push("asge.hidden2", self.asge.hidden.1.to_string());
        push("asge.lr", self.asge.lr.to_string());
        push("asge.momentum", self.asge.momentum.to_string());
        push("asge.weight_decay", self.asge.weight_decay.to_string());
        push("asge.epochs", self.asge.epochs.to_string());
        push(
            "asge.alpha",
            self.asge.alpha.map_or("none".into(), |a| a.to_string()),
        );
        push("asge.seed", self.asge.seed.to_string());
        push(
            "asge.norm",
            match self.asge.norm {
                NormKind::BatchNorm => "bn".into(),
                NormKind::None => "none".into(),
            },
        );
        push("train.lr", self.train.lr.to_string());
        push("train.momentum", self.train.momentum.to_string());
        push("train.weight_decay", self.train.weight_decay.to_string());
        push("train.epochs", self.train.epochs.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.lr_decay_factor", self.train.lr_decay_factor.to_string());
        push("train.lr_decay_every", self.train.lr_decay_every.to_string());
        push("train.seed", self.train.seed.to_string());
        push(
            "train.attention",
            match self.train.attention {
                AttentionKind::Cma => "cma".into(),
                AttentionKind::SelfAttention => "self".into(),
                AttentionKind::Uniform => "uniform".into(),
            },
        );
        push("train.joint", self.train.joint.to_string());
        push(
            "train.norm",
            match self.train.norm {
                NormKind::BatchNorm => "bn".into(),
                NormKind::None => "none".into(),
            },
        );
        push("train.cmt_depth", self.train.cmt_depth.to_string());
        push(
            "train.bias",
            match self.train.bias {
                BiasKind::Shared => "shared".into(),
                BiasKind::PerClass => "per_class".into(),
            },
        );
        push("train.snet_pool", self.train.snet_pool.to_string());
        push("loss.beta", self.beta.to_string());
        push("eval.tau", self.eval.tau.to_string());
        push("eval.topk", self.eval.topk.to_string());
        push("paths.data", self.paths.data.display().to_string());
        push("paths.embeddings", self.paths.embeddings.display().to_string());
        push("paths.out", self.paths.out.display().to_string());
        push("synth.groups", self.synth.groups.to_string());
        push("synth.q_in", self.synth.q_in.to_string());
        push("synth.q_out", self.synth.q_out.to_string());
        push("synth.noise", self.synth.noise.to_string());
        push("synth.train_examples", self.synth.train_examples.to_string());
        push("synth.test_examples", self.synth.test_examples.to_string());
        push("synth.cell", self.synth.cell.to_string());
        push("synth.amplitude", self.synth.amplitude.to_string());
        push("synth.seed", self.synth.seed.to_string());
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}
