//! Command-line surface. Exit codes: 0 on success, 1 when inputs are invalid
//! (config, dataset, usage), 2 when a run fails past validation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmgl_core::encoder::{
    train_clip_aligned_encoder, train_structure_aware_encoder, ProjectionHeads,
};
use mmgl_core::gnn;
use mmgl_core::graph::split_nodes;
use mmgl_core::optim::Parameter;
use mmgl_core::tensor::Tensor;

use mmgl_harness::aligner::{align_nodes, ArtifactStore};
use mmgl_harness::error::HarnessError;
use mmgl_harness::experiment::{
    build_client, evaluate_predictions, gain_from_results_file, gnn_features, modality_ablation,
    predictor_features, read_predictions, render_ablation_markdown, run_experiment, ClientChoice,
    ConfigError, ExperimentConfig, Objective,
};
use mmgl_harness::formats::{load_checkpoint, load_graph, save_checkpoint};
use mmgl_harness::predictor::{export_sft_dataset, predict_nodes};

#[derive(Parser)]
#[command(
    name = "mmgl",
    version,
    about = "Multimodal graph learning workbench: encoders, GNNs, and VLM pipelines"
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Completion backend.
    #[arg(long, global = true, value_enum, default_value_t = ClientArg::Mock)]
    client: ClientArg,

    /// Cache-first response store; hits never reach the backend.
    #[arg(long, global = true, value_name = "PATH")]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClientArg {
    Mock,
    Http,
}

impl From<ClientArg> for ClientChoice {
    fn from(c: ClientArg) -> Self {
        match c {
            ClientArg::Mock => ClientChoice::Mock,
            ClientArg::Http => ClientChoice::Http,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Loads and validates the dataset, writing its counts to ingest.json.
    Ingest,
    /// Writes the seeded train/val/test assignment to split.json.
    Split,
    /// Trains projection heads and writes an encoder checkpoint.
    TrainEncoder,
    /// Trains a node classifier, optionally on encoder-projected features.
    TrainGnn {
        /// Encoder checkpoint directory whose heads project the features.
        #[arg(long, value_name = "DIR")]
        encoder: Option<PathBuf>,
    },
    /// Generates description and summary artifacts for nodes with images.
    Align {
        /// Comma-separated node ids; defaults to every node with an image.
        #[arg(long, value_name = "IDS")]
        nodes: Option<String>,
    },
    /// Writes the fine-tuning dataset for the train split to sft.jsonl.
    ExportSft,
    /// Queries the backend for the test split and scores the answers.
    Predict,
    /// Rescores a stored predictions file.
    Evaluate {
        /// Predictions file (one JSON record per line).
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        /// Class count; enables macro-F1 and the confusion matrix.
        #[arg(long, value_name = "INT")]
        classes: Option<usize>,
    },
    /// Runs the configured experiment across seeds and writes the report.
    Report,
    /// Scores each ablation model on text-only, image-only, and fused input.
    AblateModality,
    /// Best structure-aware accuracy minus best structure-agnostic accuracy.
    StructureGain {
        /// JSON list of {setting, structure_aware, accuracy} entries.
        #[arg(long, value_name = "PATH")]
        results: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli.config.as_deref().ok_or(ConfigError::Missing)?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(format!("creating {}", dir.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Pipeline(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(HarnessError::io(format!("writing {}", path.display())))
}

fn parse_node_list(raw: &str) -> Result<Vec<usize>, HarnessError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| HarnessError::Usage(format!("bad node id {s:?} in --nodes")))
        })
        .collect()
}

fn heads_from_checkpoint(dir: &Path) -> Result<ProjectionHeads, HarnessError> {
    let (manifest, mut tensors) = load_checkpoint(dir)?;
    if manifest.kind != "encoder" {
        return Err(HarnessError::Usage(format!(
            "{} holds a {:?} checkpoint, not an encoder",
            dir.display(),
            manifest.kind
        )));
    }
    let mut take = |name: &str| -> Result<Tensor, HarnessError> {
        tensors.remove(name).ok_or_else(|| {
            HarnessError::Usage(format!(
                "encoder checkpoint {} lacks the {name:?} head",
                dir.display()
            ))
        })
    };
    Ok(ProjectionHeads {
        text: Parameter::new("text", take("text")?),
        image: Parameter::new("image", take("image")?),
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Ingest => {
            let cfg = load_config(&cli)?;
            let (_, report) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            ensure_out(&cli.out)?;
            write_json(&cli.out.join("ingest.json"), &report)?;
            println!(
                "ingested {} nodes, {} edges, {} classes (dropped {} self-loops, {} duplicate edges)",
                report.nodes,
                report.edges,
                report.classes,
                report.self_loops_dropped,
                report.duplicate_edges_dropped
            );
        }
        Command::Split => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let seed = cfg.seeds[0];
            let split = split_nodes(&graph, cfg.split.ratios, seed)?;
            ensure_out(&cli.out)?;
            write_json(&cli.out.join("split.json"), &split)?;
            println!(
                "split seed {seed}: {} train / {} val / {} test",
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::TrainEncoder => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let seed = cfg.seeds[0];
            let ccfg = cfg.contrastive_config(seed);
            let (heads, report) = match cfg.encoder.objective {
                Objective::Structure => train_structure_aware_encoder(&graph, &ccfg)?,
                Objective::Clip => train_clip_aligned_encoder(&graph, &ccfg)?,
            };
            ensure_out(&cli.out)?;
            let ckpt = cli.out.join("encoder");
            save_checkpoint(
                &ckpt,
                "encoder",
                serde_json::json!({
                    "objective": cfg.encoder.objective,
                    "contrastive": ccfg,
                }),
                &[
                    ("text", heads.text.value()),
                    ("image", heads.image.value()),
                ],
            )
            .map_err(HarnessError::io(format!("writing {}", ckpt.display())))?;
            write_json(&cli.out.join("encoder_report.json"), &report)?;
            println!(
                "encoder trained: cosine {:.4} -> {:.4} ({} checkpoint)",
                report.cosine_before,
                report.cosine_after,
                ckpt.display()
            );
        }
        Command::TrainGnn { encoder } => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let seed = cfg.seeds[0];
            let heads = encoder.as_deref().map(heads_from_checkpoint).transpose()?;
            let features = gnn_features(&graph, cfg.model.kind, heads.as_ref(), cfg.model.fusion)?;
            let split = split_nodes(&graph, cfg.split.ratios, seed)?;
            let gcfg = cfg.gnn_config(seed);
            let trained = gnn::train_node_classifier(&graph, features.view(), &split, &gcfg)?;
            ensure_out(&cli.out)?;
            let ckpt = cli.out.join("gnn");
            let params = trained.params.parameters();
            let named: Vec<(&str, &Tensor)> = params
                .iter()
                .map(|p| (p.name.as_str(), p.value()))
                .collect();
            save_checkpoint(
                &ckpt,
                gcfg.model.as_str(),
                serde_json::json!({ "gnn": gcfg }),
                &named,
            )
            .map_err(HarnessError::io(format!("writing {}", ckpt.display())))?;
            write_json(
                &cli.out.join("gnn_report.json"),
                &serde_json::json!({
                    "config": gcfg,
                    "metrics": trained.metrics,
                }),
            )?;
            println!(
                "{} trained: val {:.4}, test {:.4}",
                gcfg.model.as_str(),
                trained.metrics.val_accuracy,
                trained.metrics.test_accuracy
            );
        }
        Command::Align { nodes } => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let targets = match nodes {
                Some(raw) => parse_node_list(raw)?,
                None => (0..graph.node_count())
                    .filter(|&v| graph.node(v).image_path.is_some())
                    .collect(),
            };
            if targets.is_empty() {
                return Err(HarnessError::Usage(
                    "no nodes to align: none carry an image path".to_string(),
                ));
            }
            let client = build_client(&cfg, cli.client.into(), cli.cache_dir.as_deref())?;
            ensure_out(&cli.out)?;
            let store = ArtifactStore::open(cli.out.join("artifacts"))?;
            let report = align_nodes(
                client.as_ref(),
                &graph,
                &targets,
                &cfg.align_options(cfg.seeds[0]),
                &store,
            )?;
            write_json(&cli.out.join("align_report.json"), &report)?;
            println!(
                "aligned {} nodes ({} reused, {} descriptions, {} fallbacks)",
                report.aligned, report.reused, report.descriptions, report.fallbacks
            );
        }
        Command::ExportSft => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let split = split_nodes(&graph, cfg.split.ratios, cfg.seeds[0])?;
            let features = predictor_features(&graph, &cfg)?;
            ensure_out(&cli.out)?;
            let path = cli.out.join("sft.jsonl");
            let count = export_sft_dataset(
                &graph,
                &split,
                features.as_ref(),
                &cfg.predict_options(),
                &path,
            )?;
            println!("wrote {count} examples to {}", path.display());
        }
        Command::Predict => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let split = split_nodes(&graph, cfg.split.ratios, cfg.seeds[0])?;
            let features = predictor_features(&graph, &cfg)?;
            let client = build_client(&cfg, cli.client.into(), cli.cache_dir.as_deref())?;
            let report = predict_nodes(
                client.as_ref(),
                &graph,
                &split.test,
                features.as_ref(),
                Some(&split),
                &cfg.predict_options(),
            )?;
            mmgl_harness::experiment::reject_total_failure(&report)?;
            ensure_out(&cli.out)?;
            let mut lines = String::new();
            for p in &report.predictions {
                lines.push_str(&serde_json::to_string(p).expect("prediction serializes"));
                lines.push('\n');
            }
            let path = cli.out.join("predictions.jsonl");
            fs::write(&path, lines)
                .map_err(HarnessError::io(format!("writing {}", path.display())))?;
            write_json(
                &cli.out.join("predict_report.json"),
                &serde_json::json!({
                    "accuracy": report.accuracy,
                    "parsed": report.parsed,
                    "unparseable": report.unparseable,
                    "ambiguous": report.ambiguous,
                    "failed": report.failed,
                }),
            )?;
            println!(
                "accuracy {:.4} over {} nodes ({} parsed, {} unparseable, {} ambiguous, {} failed)",
                report.accuracy,
                report.predictions.len(),
                report.parsed,
                report.unparseable,
                report.ambiguous,
                report.failed
            );
        }
        Command::Evaluate {
            predictions,
            classes,
        } => {
            let records = read_predictions(predictions)?;
            let eval = evaluate_predictions(&records, *classes)?;
            ensure_out(&cli.out)?;
            write_json(&cli.out.join("evaluation.json"), &eval)?;
            println!(
                "accuracy {:.4} over {} records ({} parsed)",
                eval.accuracy, eval.total, eval.parsed
            );
        }
        Command::Report => {
            let cfg = load_config(&cli)?;
            let client = build_client(&cfg, cli.client.into(), cli.cache_dir.as_deref())?;
            let report = run_experiment(&cfg, client.as_ref(), &cli.out)?;
            for seed in &report.per_seed {
                println!(
                    "seed {}: accuracy {:.4}, macro_f1 {:.4}",
                    seed.seed, seed.accuracy, seed.macro_f1
                );
            }
            for err in &report.errors {
                eprintln!("warning: {err}");
            }
            let std = report
                .metrics
                .accuracy
                .std
                .map(|s| format!(" ± {s:.4}"))
                .unwrap_or_default();
            println!(
                "{} ({}): accuracy {:.4}{std} over {} seed(s); report in {}",
                report.paradigm.as_str(),
                report.model,
                report.metrics.accuracy.mean,
                report.per_seed.len(),
                cli.out.display()
            );
        }
        Command::AblateModality => {
            let cfg = load_config(&cli)?;
            let (graph, _) = load_graph(&cfg.dataset_paths(), cfg.domain())?;
            let table = modality_ablation(&graph, &cfg)?;
            ensure_out(&cli.out)?;
            write_json(&cli.out.join("ablation.json"), &table)?;
            let md = render_ablation_markdown(&table);
            fs::write(cli.out.join("ablation.md"), &md)
                .map_err(HarnessError::io("writing ablation.md"))?;
            print!("{md}");
        }
        Command::StructureGain { results } => {
            let (gain, entries) = gain_from_results_file(results)?;
            ensure_out(&cli.out)?;
            write_json(
                &cli.out.join("gain.json"),
                &serde_json::json!({ "gain": gain, "entries": entries }),
            )?;
            println!("structure gain {gain:.4} over {} settings", entries.len());
        }
    }
    Ok(())
}
