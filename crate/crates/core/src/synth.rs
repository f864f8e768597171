//! Synthetic datasets with planted, per-label signals. Labels are grouped
//! so that labels within a group co-occur; each present label deposits a
//! distinct channel pattern into a random cell of the grid (or a random
//! temporal segment for video), and the deposited region is recorded as a
//! ground-truth attention mask.

use crate::config::Task;
use crate::error::{Error, Result};
use crate::label_graph::{build_graph, AnnotationSet};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub task: Task,
    pub num_labels: usize,
    pub groups: usize,
    /// Probability a label is present when its group is active.
    pub q_in: f64,
    /// Probability a label is present when its group is inactive.
    pub q_out: f64,
    /// Additive Gaussian noise level.
    pub noise: f64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub c_in: usize,
    /// Side length (or segment length for video) of the planted region.
    pub cell: usize,
    /// Magnitude of the planted pattern.
    pub amplitude: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.q_in <= self.q_out {
            return Err(Error::Config(format!(
                "synth.q_in ({}) must exceed synth.q_out ({})",
                self.q_in, self.q_out
            )));
        }
        if self.groups == 0 || self.groups > self.num_labels {
            return Err(Error::Config("synth.groups must be in 1..=num_labels".into()));
        }
        match self.task {
            Task::Image => {
                if self.cell == 0 || self.cell > self.height.min(self.width) {
                    return Err(Error::Config(format!(
                        "synth.cell ({}) must fit the {}x{} grid",
                        self.cell, self.height, self.width
                    )));
                }
            }
            Task::Video => {
                if self.cell == 0 || self.cell > self.frames {
                    return Err(Error::Config(format!(
                        "synth.cell ({}) must fit {} frames",
                        self.cell, self.frames
                    )));
                }
            }
        }
        if self.amplitude <= 0.0 {
            return Err(Error::Config("synth.amplitude must be positive".into()));
        }
        Ok(())
    }

    fn group_of(&self, label: usize) -> usize {
        label * self.groups / self.num_labels
    }

    /// The planted channel pattern of a label: a deterministic signed
    /// unit vector derived from the dataset seed, normalized in two
    /// passes (the second pass tightens the norm to within an ulp of 1).
    pub fn pattern(&self, label: usize) -> Vec<f64> {
        let mut rng = RngState::new(self.seed).fork(1000 + label as u64);
        let mut v: Vec<f64> = (0..self.c_in).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// One generated example.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    /// `[H, W, C]` for image, `[T, C]` for video.
    pub features: Tensor,
    pub labels: Vec<u8>,
    /// `[N, H, W]` or `[N, T]`: 1 inside the planted region of each
    /// present label, 0 elsewhere.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub num_labels: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn annotations(&self) -> Result<AnnotationSet> {
        let mut ann = AnnotationSet::new(self.num_labels);
        for ex in &self.examples {
            let labels = ex
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == 1)
                .map(|(k, _)| k);
            ann.push(ex.id.clone(), labels)?;
        }
        Ok(ann)
    }
}

fn gen_example(spec: &SyntheticSpec, id: String, rng: &mut RngState) -> Example {
    let n = spec.num_labels;
    // group activations drive co-occurrence
    let active: Vec<bool> = (0..spec.groups).map(|_| rng.uniform() < 0.5).collect();
    let labels: Vec<u8> = (0..n)
        .map(|k| {
            let q = if active[spec.group_of(k)] {
                spec.q_in
            } else {
                spec.q_out
            };
            u8::from(rng.uniform() < q)
        })
        .collect();
    match spec.task {
        Task::Image => {
            let (h, w, c) = (spec.height, spec.width, spec.c_in);
            let mut feat = vec![0.0; h * w * c];
            for v in &mut feat {
                *v = spec.noise * rng.normal();
            }
            let mut mask = vec![0.0; n * h * w];
            for k in 0..n {
                if labels[k] == 0 {
                    continue;
                }
                let pat = spec.pattern(k);
                // planted regions come in two sizes so coarser feature
                // maps also carry signal
                let side = (spec.cell * (1 + rng.below(2))).min(h.min(w));
                let oy = rng.below(h - side + 1);
                let ox = rng.below(w - side + 1);
                for y in oy..oy + side {
                    for x in ox..ox + side {
                        for ch in 0..c {
                            feat[(y * w + x) * c + ch] += spec.amplitude * pat[ch];
                        }
                        mask[(k * h + y) * w + x] = 1.0;
                    }
                }
            }
            Example {
                id,
                features: Tensor::from_op(vec![h, w, c], feat),
                labels,
                mask: Tensor::from_op(vec![n, h, w], mask),
            }
        }
        Task::Video => {
            let (t, c) = (spec.frames, spec.c_in);
            let mut feat = vec![0.0; t * c];
            for v in &mut feat {
                *v = spec.noise * rng.normal();
            }
            let mut mask = vec![0.0; n * t];
            for k in 0..n {
                if labels[k] == 0 {
                    continue;
                }
                let pat = spec.pattern(k);
                let len = (spec.cell * (1 + rng.below(2))).min(t);
                let ot = rng.below(t - len + 1);
                for f in ot..ot + len {
                    for ch in 0..c {
                        feat[f * c + ch] += spec.amplitude * pat[ch];
                    }
                    mask[k * t + f] = 1.0;
                }
            }
            Example {
                id,
                features: Tensor::from_op(vec![t, c], feat),
                labels,
                mask: Tensor::from_op(vec![n, t], mask),
            }
        }
    }
}

/// Generates the train and test splits in memory, deterministically.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let gen_split = |count: usize, stream: u64, prefix: &str| {
        let mut rng = RngState::new(spec.seed).fork(stream);
        Dataset {
            task: spec.task,
            num_labels: spec.num_labels,
            examples: (0..count)
                .map(|i| gen_example(spec, format!("{prefix}_{i:05}"), &mut rng))
                .collect(),
        }
    };
    Ok((
        gen_split(spec.train_examples, 1, "train"),
        gen_split(spec.test_examples, 2, "test"),
    ))
}

/// Generates both splits and writes them to `dir`:
/// `labels.txt`, `{train,test}/annotations.tsv`,
/// `{train,test}/features/<id>.cmat`, `{train,test}/masks/<id>.cmat`,
/// and `summary.txt` with empirical priors and co-occurrence counts.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    let (train, test) = generate(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("labels.txt"))?;
    for k in 0..spec.num_labels {
        writeln!(f, "label_{k:02}")?;
    }
    for (split, data) in [("train", &train), ("test", &test)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(split_dir.join("features"))?;
        std::fs::create_dir_all(split_dir.join("masks"))?;
        let mut ann = std::io::BufWriter::new(std::fs::File::create(
            split_dir.join("annotations.tsv"),
        )?);
        for ex in &data.examples {
            let labels: Vec<String> = ex
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == 1)
                .map(|(k, _)| k.to_string())
                .collect();
            writeln!(ann, "{}\t{}", ex.id, labels.join(" "))?;
            ex.features
                .save_cmat(&split_dir.join("features").join(format!("{}.cmat", ex.id)))?;
            ex.mask
                .save_cmat(&split_dir.join("masks").join(format!("{}.cmat", ex.id)))?;
        }
    }
    // empirical statistics of the train split
    let graph = build_graph(&train.annotations()?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("summary.txt"))?);
    writeln!(f, "train_examples={}", spec.train_examples)?;
    writeln!(f, "test_examples={}", spec.test_examples)?;
    for (k, p) in graph.priors.iter().enumerate() {
        writeln!(f, "prior.label_{k:02}={p}")?;
    }
    for i in 0..graph.n {
        let row: Vec<String> = (0..graph.n).map(|j| graph.count(i, j).to_string()).collect();
        writeln!(f, "cooccurrence.{i}={}", row.join(","))?;
    }
    Ok(())
}

/// Loads one split back from disk.
pub fn load_split(dir: &Path, task: Task, num_labels: usize, split: &str) -> Result<Dataset> {
    let split_dir = dir.join(split);
    let ann = AnnotationSet::load(num_labels, &split_dir.join("annotations.tsv"))?;
    let mut examples = Vec::with_capacity(ann.len());
    for (id, labels) in ann.ids().iter().zip(ann.examples()) {
        let features = Tensor::load_cmat(&split_dir.join("features").join(format!("{id}.cmat")))?;
        let mask_path = split_dir.join("masks").join(format!("{id}.cmat"));
        let mask = if mask_path.exists() {
            Tensor::load_cmat(&mask_path)?
        } else {
            match task {
                Task::Image => Tensor::zeros(&[num_labels, features.shape()[0], features.shape()[1]]),
                Task::Video => Tensor::zeros(&[num_labels, features.shape()[0]]),
            }
        };
        let mut label_vec = vec![0u8; num_labels];
        for &k in labels {
            label_vec[k] = 1;
        }
        examples.push(Example {
            id: id.clone(),
            features,
            labels: label_vec,
            mask,
        });
    }
    Ok(Dataset {
        task,
        num_labels,
        examples,
    })
}
