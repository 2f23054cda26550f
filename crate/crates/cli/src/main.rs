use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dfr_core::datagen::{generate_dataset, GroupedDataset, Split};
use dfr_core::eval::{group_accuracies, summarize_runs, GroupMetrics};
use dfr_core::interpret::{self, classify_neurons, neurons_csv, taxonomy_contrast};
use dfr_core::io::{self, pnm, ExportMode};
use dfr_core::nn::{train_erm, TrainedModel};
use dfr_core::pipeline::{
    fit_head, panel_indices, run_pipeline, taxonomy_line, PipelineConfig, TaxonomyCounts, FAILURE_MARKER,
    PANEL_PER_GROUP,
};

/// Log filter variable, e.g. `DFR_LOG=debug`.
const LOG_ENV: &str = "DFR_LOG";

#[derive(Parser)]
#[command(name = "dfr", version, about = "Last-layer retraining workbench on synthetic spurious-correlation data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of runs.
    #[arg(long, global = true)]
    runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate,
    /// Train the ERM model.
    Train {
        /// Dataset container; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Retrain the last layer on a group-balanced validation subset.
    Dfr {
        /// ERM model container.
        #[arg(long)]
        model: PathBuf,
        /// Dataset container; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-group test accuracy of a model, optionally with a retrained head.
    Eval {
        /// ERM model container.
        #[arg(long)]
        model: PathBuf,
        /// Retrained head container; the ERM head is used when absent.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Dataset container; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Export class activation maps for test images.
    Cam {
        /// ERM model container.
        #[arg(long)]
        model: PathBuf,
        /// Retrained head container; the ERM head is used when absent.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Dataset container; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Test indices; defaults to two images per group.
        #[arg(long, value_delimiter = ',')]
        index: Vec<usize>,
    },
    /// Classify feature channels against the ground-truth masks.
    Neurons {
        /// ERM model container.
        #[arg(long)]
        model: PathBuf,
        /// Retrained head container.
        #[arg(long)]
        head: PathBuf,
        /// Dataset container; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Summarize the `run_*/metrics.json` files under `--out`.
    Report,
    /// Run every stage for each seed and write a report.
    Pipeline,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &common.config {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(runs) = common.runs {
        cfg.n_runs = runs;
    }
    cfg.output_dir = common.out.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &PipelineConfig, path: Option<&Path>) -> Result<GroupedDataset> {
    match path {
        Some(p) => io::load_dataset(p).with_context(|| format!("loading dataset {}", p.display())),
        None => Ok(generate_dataset(&cfg.dataset)?),
    }
}

fn model_with_head(model: &Path, head: Option<&Path>) -> Result<TrainedModel> {
    let mut m = io::load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    if let Some(h) = head {
        let head = io::load_head(h).with_context(|| format!("loading head {}", h.display()))?;
        if head.weights.len() != m.feature_dim() {
            bail!("head has {} weights, model has {} features", head.weights.len(), m.feature_dim());
        }
        m.head = head;
    }
    Ok(m)
}

fn print_metrics(label: &str, m: &GroupMetrics) {
    println!("{label}");
    for (g, acc) in m.per_group_accuracy.iter().enumerate() {
        println!("  group {g}: {:6.2}%  (n = {})", 100.0 * acc, m.n_per_group[g]);
    }
    println!("  average: {:6.2}%", 100.0 * m.average_accuracy);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cfg.output_dir;
    io::create_dir(out)?;
    match cli.command {
        Command::Generate => {
            let ds = generate_dataset(&cfg.dataset)?;
            let path = out.join("dataset.dfrt");
            io::save_dataset(&path, &ds)?;
            for split in [Split::Train, Split::Valid, Split::Test] {
                println!("{:<5} {:?}", split.name(), ds.group_counts(split));
            }
            println!("wrote {}", path.display());
        }
        Command::Train { dataset: ds_path } => {
            let ds = dataset(&cfg, ds_path.as_deref())?;
            let model = train_erm(&ds, &cfg.train)?;
            io::save_model(&out.join("erm_model.dfrt"), &model)?;
            io::write_json(&out.join("train_log.json"), &model.log)?;
            if let Some(last) = model.log.last() {
                println!("final epoch loss {:.5}, train accuracy {:.4}", last.mean_loss, last.accuracy);
            }
        }
        Command::Dfr { model, dataset: ds_path } => {
            let ds = dataset(&cfg, ds_path.as_deref())?;
            let model = model_with_head(&model, None)?;
            let (result, subset) = fit_head(&model, &ds.valid, &cfg.dfr)?;
            io::save_head(&out.join("dfr_head.dfrt"), &result.head)?;
            io::write_json(
                &out.join("dfr.json"),
                &serde_json::json!({
                    "zero_fraction": result.zero_fraction,
                    "converged": result.converged,
                    "iterations": result.iterations,
                    "subset_indices": subset,
                }),
            )?;
            println!(
                "zero fraction {:.4}, {} iterations, converged {}",
                result.zero_fraction, result.iterations, result.converged
            );
        }
        Command::Eval {
            model,
            head,
            dataset: ds_path,
        } => {
            let ds = dataset(&cfg, ds_path.as_deref())?;
            let m = model_with_head(&model, head.as_deref())?;
            let metrics = group_accuracies(&m, &ds.test, cfg.threshold)?;
            io::write_json(&out.join("eval.json"), &metrics)?;
            print_metrics("test accuracy", &metrics);
        }
        Command::Cam {
            model,
            head,
            dataset: ds_path,
            index,
        } => {
            let ds = dataset(&cfg, ds_path.as_deref())?;
            let m = model_with_head(&model, head.as_deref())?;
            let indices = if index.is_empty() {
                panel_indices(&ds.test, PANEL_PER_GROUP)
            } else {
                index
            };
            for i in indices {
                let s = ds
                    .test
                    .get(i)
                    .with_context(|| format!("test index {i} out of range ({} samples)", ds.test.len()))?;
                let map = interpret::cam(&m, &s.image)?;
                let stem = format!("test{i:04}_{}", s.group.name());
                io::write_bytes(&out.join(format!("{stem}_input.{}", if s.image.channels == 1 { "pgm" } else { "ppm" })), &pnm::render_image(&s.image))?;
                io::export_heatmap(&map, &out.join(format!("{stem}_cam.ppm")), ExportMode::Diverging)?;
                let degenerate = io::export_heatmap(&map, &out.join(format!("{stem}_cam.pgm")), ExportMode::Gray)?;
                if degenerate {
                    log::warn!("CAM of test image {i} is constant");
                }
            }
            println!("wrote maps to {}", out.display());
        }
        Command::Neurons {
            model,
            head,
            dataset: ds_path,
        } => {
            let ds = dataset(&cfg, ds_path.as_deref())?;
            let m = model_with_head(&model, None)?;
            let dfr_head = io::load_head(&head)?;
            let reports = classify_neurons(&m, &dfr_head, &ds.test, &cfg.taxonomy)?;
            io::write_text(&out.join("neurons.csv"), &neurons_csv(&reports))?;
            println!("{}", taxonomy_line(&TaxonomyCounts::from_reports(&reports)));
            let c = taxonomy_contrast(&reports);
            println!(
                "mean spurious score: zeroed {:?} (n = {}), retained {:?} (n = {})",
                c.zeroed_mean_spurious, c.n_zeroed, c.retained_mean_spurious, c.n_retained
            );
        }
        Command::Report => {
            let mut pairs = Vec::new();
            for r in 0.. {
                let p = out.join(format!("run_{r}")).join("metrics.json");
                if !p.exists() {
                    break;
                }
                let v: serde_json::Value = io::read_json(&p)?;
                let erm: GroupMetrics = serde_json::from_value(v["erm"].clone())?;
                let dfr: GroupMetrics = serde_json::from_value(v["dfr"].clone())?;
                pairs.push((erm, dfr));
            }
            if pairs.is_empty() {
                bail!("no run_*/metrics.json under {}", out.display());
            }
            let summary = summarize_runs(&pairs)?;
            io::write_text(&out.join("summary.txt"), &summary.table())?;
            io::write_text(&out.join("summary.csv"), &summary.csv())?;
            print!("{}", summary.table());
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg).map_err(|e| {
                anyhow::anyhow!("{e}; see {}", out.join(FAILURE_MARKER).display())
            })?;
            print!("{}", report.summary.table());
            for r in &report.runs {
                println!(
                    "run {}: zero fraction {:.3}, {}",
                    r.run,
                    r.zero_fraction,
                    taxonomy_line(&r.taxonomy_counts)
                );
            }
            info!("report written to {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
