//! Label co-occurrence graph: counts, conditional-probability adjacency,
//! its symmetrization, and per-label priors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Multi-label annotations: each example is a set of label indices.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    num_labels: usize,
    examples: Vec<BTreeSet<usize>>,
    ids: Vec<String>,
}

impl AnnotationSet {
    pub fn new(num_labels: usize) -> Self {
        Self {
            num_labels,
            examples: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[BTreeSet<usize>] {
        &self.examples
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Adds one example; duplicate indices collapse via the set.
    pub fn push(&mut self, id: impl Into<String>, labels: impl IntoIterator<Item = usize>) -> Result<()> {
        let set: BTreeSet<usize> = labels.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&l| l >= self.num_labels) {
            return Err(Error::MalformedInput(format!(
                "label index {bad} >= num_labels {}",
                self.num_labels
            )));
        }
        self.ids.push(id.into());
        self.examples.push(set);
        Ok(())
    }

    /// Parses the annotation file format: one example per line,
    /// `example_id<TAB>space-separated label indices` (empty list allowed).
    pub fn parse(num_labels: usize, text: &str) -> Result<Self> {
        let mut ann = Self::new(num_labels);
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = match line.split_once('\t') {
                Some((id, rest)) => (id, rest),
                None => (line.trim_end(), ""),
            };
            let labels: Vec<usize> = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::MalformedInput(format!(
                            "line {}: '{tok}' is not a label index",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            ann.push(id, labels)?;
        }
        Ok(ann)
    }

    pub fn load(num_labels: usize, path: &Path) -> Result<Self> {
        Self::parse(num_labels, &std::fs::read_to_string(path)?)
    }

    /// Binary label matrix `[num_examples, N]`.
    pub fn label_matrix(&self) -> Tensor {
        let n = self.num_labels;
        let mut t = Tensor::zeros(&[self.examples.len(), n]);
        for (i, ex) in self.examples.iter().enumerate() {
            for &l in ex {
                t.data_mut()[i * n + l] = 1.0;
            }
        }
        t
    }
}

/// The label graph with all derived statistics.
#[derive(Debug, Clone)]
pub struct LabelGraph {
    pub n: usize,
    /// counts[i][j] = number of examples containing both i and j;
    /// the diagonal holds per-label counts.
    pub counts: Vec<u64>,
    /// Conditional probabilities A[i][j] = P(i | j).
    pub a: Tensor,
    /// Symmetrized adjacency (A + A^T)/2.
    pub a_sym: Tensor,
    /// Per-label priors p_k = counts[k][k] / num_examples.
    pub priors: Vec<f64>,
    /// Labels that never occur (zero row/column in A).
    pub unobserved: Vec<usize>,
}

impl LabelGraph {
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }
}

/// counts[i][j] = |{examples containing both i and j}|, diagonal = per-label counts.
pub fn count_cooccurrence(ann: &AnnotationSet) -> Vec<u64> {
    let n = ann.num_labels();
    let mut counts = vec![0u64; n * n];
    for ex in ann.examples() {
        let labels: Vec<usize> = ex.iter().copied().collect();
        for (a_idx, &i) in labels.iter().enumerate() {
            counts[i * n + i] += 1;
            for &j in &labels[a_idx + 1..] {
                counts[i * n + j] += 1;
                counts[j * n + i] += 1;
            }
        }
    }
    counts
}

/// A[i][j] = counts[i][j] / counts[j][j] when label j occurs, else 0.
/// The diagonal is 1 for observed labels and 0 for unobserved ones.
pub fn conditional_matrix(counts: &[u64], n: usize) -> Result<Tensor> {
    if counts.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "counts length {} for n={n}",
            counts.len()
        )));
    }
    let mut a = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let col = counts[j * n + j];
        if col == 0 {
            continue;
        }
        for i in 0..n {
            a.set2(i, j, counts[i * n + j] as f64 / col as f64);
        }
    }
    Ok(a)
}

/// A' = (A + A^T)/2, assigned symmetrically so the result is bitwise symmetric.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch(format!("symmetrize of {shape:?}")));
    }
    let n = shape[0];
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = (a.at2(i, j) + a.at2(j, i)) / 2.0;
            s.set2(i, j, v);
            s.set2(j, i, v);
        }
    }
    Ok(s)
}

/// p_k = counts[k][k] / num_examples.
pub fn label_priors(ann: &AnnotationSet) -> Result<Vec<f64>> {
    if ann.is_empty() {
        return Err(Error::MalformedInput(
            "label priors need at least one example".into(),
        ));
    }
    let counts = count_cooccurrence(ann);
    let n = ann.num_labels();
    let total = ann.len() as f64;
    Ok((0..n).map(|k| counts[k * n + k] as f64 / total).collect())
}

/// Builds the full graph from annotations.
pub fn build_graph(ann: &AnnotationSet) -> Result<LabelGraph> {
    if ann.num_labels() == 0 {
        return Err(Error::MalformedInput("graph needs at least one label".into()));
    }
    let n = ann.num_labels();
    let counts = count_cooccurrence(ann);
    let a = conditional_matrix(&counts, n)?;
    let a_sym = symmetrize(&a)?;
    let priors = if ann.is_empty() {
        vec![0.0; n]
    } else {
        label_priors(ann)?
    };
    let unobserved = (0..n).filter(|&k| counts[k * n + k] == 0).collect();
    Ok(LabelGraph {
        n,
        counts,
        a,
        a_sym,
        priors,
        unobserved,
    })
}

/// Reads `labels.txt` (one name per line, line number = index); missing
/// file or short file falls back to `label_<i>` names.
pub fn load_label_names(path: Option<&Path>, n: usize) -> Vec<String> {
    let mut names: Vec<String> = match path.map(std::fs::read_to_string) {
        Some(Ok(text)) => text.lines().map(|s| s.trim().to_string()).collect(),
        _ => Vec::new(),
    };
    while names.len() < n {
        names.push(format!("label_{}", names.len()));
    }
    names.truncate(n);
    names
}

/// Writes `counts.csv`, `A.csv`, `A_sym.csv` with a header row of label names,
/// plus a `graph_summary.txt` listing priors and unobserved labels.
pub fn export_graph(graph: &LabelGraph, names: &[String], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = names.join(",");
    let write_matrix = |file: &str, get: &dyn Fn(usize, usize) -> f64| -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(file))?);
        writeln!(f, "{header}")?;
        for i in 0..graph.n {
            let row: Vec<String> = (0..graph.n).map(|j| format!("{}", get(i, j))).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    };
    write_matrix("counts.csv", &|i, j| graph.count(i, j) as f64)?;
    write_matrix("A.csv", &|i, j| graph.a.at2(i, j))?;
    write_matrix("A_sym.csv", &|i, j| graph.a_sym.at2(i, j))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("graph_summary.txt"))?);
    writeln!(f, "num_labels={}", graph.n)?;
    for (k, p) in graph.priors.iter().enumerate() {
        writeln!(f, "prior.{}={p}", names[k])?;
    }
    if !graph.unobserved.is_empty() {
        let list: Vec<String> = graph.unobserved.iter().map(|k| names[*k].clone()).collect();
        writeln!(f, "unobserved={}", list.join(","))?;
    }
    Ok(())
}
