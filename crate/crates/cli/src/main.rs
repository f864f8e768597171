//! `mscma`: command-line driver for the full experiment pipeline —
//! synthetic data generation, label-graph construction, embedding
//! training, classifier training, evaluation, and attention export.

use clap::{Parser, Subcommand};
use cma_core::asge::{
    embedding_similarity_report, export_embeddings, train_asge, write_similarity_report,
};
use cma_core::config::RunConfig;
use cma_core::error::Result;
use cma_core::label_graph::{build_graph, export_graph, load_label_names, AnnotationSet};
use cma_core::pipeline::{export_attention, run_eval, run_train, write_manifest, Trainer};
use cma_core::synth::{gen_synthetic_dataset, load_split};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mscma", version, about = "Label-graph embeddings and cross-modality attention")]
struct Cli {
    /// Configuration file in key=value form (a run manifest also works)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every per-section seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory (paths.out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset under paths.data
    GenSynth,
    /// Build the label co-occurrence graph from the training annotations
    BuildGraph,
    /// Train label embeddings on the co-occurrence graph
    TrainEmbeddings,
    /// Train a classifier and evaluate it on the test split
    Train {
        /// Continue from paths.out/checkpoint.cmck if present
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate an existing checkpoint on the test split
    Eval,
    /// Export attention maps for one test example
    ExportAttention {
        /// Index of the test example to export
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn train_annotations(cfg: &RunConfig) -> Result<AnnotationSet> {
    AnnotationSet::load(
        cfg.dims.num_labels,
        &cfg.paths.data.join("train").join("annotations.tsv"),
    )
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenSynth => {
            gen_synthetic_dataset(&cfg.synth, &cfg.paths.data)?;
            write_manifest(&cfg, "gen-synth", &cfg.paths.data.join("manifest.txt"))?;
            println!(
                "wrote {} train / {} test examples to {}",
                cfg.synth.train_examples,
                cfg.synth.test_examples,
                cfg.paths.data.display()
            );
        }
        Cmd::BuildGraph => {
            let graph = build_graph(&train_annotations(&cfg)?)?;
            let names = load_label_names(
                Some(&cfg.paths.data.join("labels.txt")),
                cfg.dims.num_labels,
            );
            std::fs::create_dir_all(&cfg.paths.out)?;
            export_graph(&graph, &names, &cfg.paths.out)?;
            write_manifest(&cfg, "build-graph", &cfg.paths.out.join("manifest.txt"))?;
            println!(
                "graph over {} labels ({} unobserved) written to {}",
                graph.n,
                graph.unobserved.len(),
                cfg.paths.out.display()
            );
        }
        Cmd::TrainEmbeddings => {
            let graph = build_graph(&train_annotations(&cfg)?)?;
            let result = train_asge(&graph, &cfg.asge)?;
            std::fs::create_dir_all(&cfg.paths.embeddings)?;
            export_embeddings(&result, &cfg.paths.embeddings)?;
            let report =
                embedding_similarity_report(&result.embeddings, &graph.a_sym, cfg.asge.alpha);
            write_similarity_report(&report, &cfg.paths.embeddings.join("similarity.csv"))?;
            write_manifest(
                &cfg,
                "train-embeddings",
                &cfg.paths.embeddings.join("manifest.txt"),
            )?;
            let final_loss = result.curve.last().map_or(f64::NAN, |e| e.loss);
            println!(
                "trained {}x{} embeddings, final loss {final_loss:.6}, mean residual {:.6}",
                result.embeddings.shape()[0],
                result.embeddings.shape()[1],
                report.mean_residual
            );
        }
        Cmd::Train { resume } => {
            let (trainer, report) = run_train(&cfg, *resume)?;
            if let Some(last) = trainer.log.last() {
                println!(
                    "epoch {}: train loss {:.6}, val mAP {:.4}",
                    last.epoch, last.train_loss, last.val_map
                );
            }
            for (key, value) in &report.values {
                println!("{key}={value:.6}");
            }
        }
        Cmd::Eval => {
            let report = run_eval(&cfg)?;
            for (key, value) in &report.values {
                println!("{key}={value:.6}");
            }
        }
        Cmd::ExportAttention { index } => {
            let mut trainer =
                Trainer::load_checkpoint(&cfg, &cfg.paths.out.join("checkpoint.cmck"))?;
            let test = load_split(&cfg.paths.data, cfg.task, cfg.dims.num_labels, "test")?;
            let ex = test.examples.get(*index).ok_or_else(|| {
                cma_core::error::Error::MalformedInput(format!(
                    "test example index {index} out of range (split has {})",
                    test.examples.len()
                ))
            })?;
            let dir = cfg.paths.out.join("attention").join(&ex.id);
            let stats = export_attention(&mut trainer, ex, &dir)?;
            println!("wrote attention maps for '{}' to {}", ex.id, dir.display());
            for (label, scale, mass, area) in &stats.masses {
                println!(
                    "label {label} scale {scale}: mass inside mask {mass:.4} (uniform {area:.4})"
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap itself exits with code 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_overrides() {
        let cli = Cli::try_parse_from([
            "mscma", "train", "--resume", "--seed", "7", "--out", "elsewhere",
        ])
        .unwrap();
        assert!(matches!(cli.cmd, Cmd::Train { resume: true }));
        assert_eq!(cli.seed, Some(7));
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.asge.seed, 7);
        assert_eq!(cfg.paths.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn rejects_unknown_subcommand() {
        assert!(Cli::try_parse_from(["mscma", "frobnicate"]).is_err());
    }

    #[test]
    fn export_attention_defaults_to_first_example() {
        let cli = Cli::try_parse_from(["mscma", "export-attention"]).unwrap();
        assert!(matches!(cli.cmd, Cmd::ExportAttention { index: 0 }));
    }
}
