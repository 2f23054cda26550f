//! End-to-end runs: generate, train, evaluate, retrain the head, interpret.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, DatasetSpec, GroupId, GroupedDataset, Sample};
use crate::dfr::{apply_dfr, balanced_subset_of, extract_features, retrain_head, DfrConfig, DfrResult};
use crate::error::{Error, Result};
use crate::eval::{group_accuracies, summarize_runs, GroupMetrics, RunSummary, DEFAULT_THRESHOLD};
use crate::interpret::{
    self, classify_neurons, neurons_csv, taxonomy_contrast, taxonomy_counts, Heatmap, NeuronReport, Resolution,
    Taxonomy, TaxonomyContrast, TaxonomyThresholds,
};
use crate::io::{self, pnm, ExportMode};
use crate::nn::{train_erm, Head, TrainConfig, TrainedModel};

pub const REPORT_VERSION: u32 = 1;
/// Test images per group in the exported CAM panel.
pub const PANEL_PER_GROUP: usize = 2;
/// Neurons with the largest ERM weight magnitude get their maps exported.
pub const PANEL_NEURONS: usize = 3;
/// Name of the marker written when a stage fails.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub dfr: DfrConfig,
    pub threshold: f64,
    pub taxonomy: TaxonomyThresholds,
    pub n_runs: usize,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            dfr: DfrConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            taxonomy: TaxonomyThresholds::default(),
            n_runs: 5,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.dfr.validate()?;
        self.taxonomy.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::spec("threshold", "must lie in (0, 1)"));
        }
        if self.n_runs == 0 {
            return Err(Error::spec("n_runs", "must be at least 1"));
        }
        Ok(())
    }

    /// Sets every stage seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.dfr.seed = seed;
        self
    }

    /// Copy of the config for run `run`: every seed offset by the run index.
    pub fn for_run(&self, run: usize) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.dataset.seed.wrapping_add(run as u64);
        c.train.seed = self.train.seed.wrapping_add(run as u64);
        c.dfr.seed = self.dfr.seed.wrapping_add(run as u64);
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub dataset: u64,
    pub train: u64,
    pub dfr: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub inactive: usize,
    pub core_only: usize,
    pub spurious_only: usize,
    pub mixed: usize,
}

impl TaxonomyCounts {
    pub fn from_reports(reports: &[NeuronReport]) -> Self {
        let [inactive, core_only, spurious_only, mixed] = taxonomy_counts(reports);
        Self {
            inactive,
            core_only,
            spurious_only,
            mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seeds: RunSeeds,
    pub erm: GroupMetrics,
    pub dfr: GroupMetrics,
    pub zero_fraction: f64,
    pub dfr_converged: bool,
    pub dfr_iterations: usize,
    pub taxonomy_counts: TaxonomyCounts,
    pub taxonomy_contrast: TaxonomyContrast,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
    pub config: PipelineConfig,
    pub runs: Vec<RunRecord>,
    pub summary: RunSummary,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

/// Everything one run produces in memory.
pub struct RunArtifacts {
    pub dataset: GroupedDataset,
    pub erm_model: TrainedModel,
    pub dfr_result: DfrResult,
    /// Validation indices the head was fitted on, one list per repeat.
    pub subset_indices: Vec<Vec<usize>>,
    pub erm: GroupMetrics,
    pub dfr: GroupMetrics,
    pub neurons: Vec<NeuronReport>,
}

fn stage<T>(name: &'static str, run: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        run,
        source: Box::new(e),
    })
}

/// Runs every in-memory stage of one run with `cfg`'s seeds as given.
pub fn execute_run(cfg: &PipelineConfig, run: usize) -> Result<RunArtifacts> {
    info!("run {run}: generating data");
    let dataset = stage("generate", run, generate_dataset(&cfg.dataset))?;
    info!("run {run}: training ERM model");
    let erm_model = stage("train", run, train_erm(&dataset, &cfg.train))?;
    let erm = stage("eval_erm", run, group_accuracies(&erm_model, &dataset.test, cfg.threshold))?;

    info!("run {run}: retraining last layer");
    let (dfr_result, subset_indices) = stage("dfr", run, fit_head(&erm_model, &dataset.valid, &cfg.dfr))?;
    let dfr_model = stage("apply_dfr", run, apply_dfr(&erm_model, &dfr_result))?;
    let dfr = stage("eval_dfr", run, group_accuracies(&dfr_model, &dataset.test, cfg.threshold))?;

    info!("run {run}: neuron taxonomy");
    let neurons = stage(
        "neurons",
        run,
        classify_neurons(&erm_model, &dfr_result.head, &dataset.test, &cfg.taxonomy),
    )?;
    Ok(RunArtifacts {
        dataset,
        erm_model,
        dfr_result,
        subset_indices,
        erm,
        dfr,
        neurons,
    })
}

/// Fits the retrained head on the validation split.
///
/// With a single repeat the balanced subset is drawn here; the returned
/// indices refer to `valid` in both cases.
pub fn fit_head(model: &TrainedModel, valid: &[Sample], cfg: &DfrConfig) -> Result<(DfrResult, Vec<Vec<usize>>)> {
    if cfg.n_subset_repeats == 1 {
        let subset = balanced_subset_of(valid, cfg.seed)?;
        let features = extract_features(model, subset.iter().map(|&i| &valid[i]))?;
        let result = retrain_head(&features, cfg)?;
        Ok((result, vec![subset]))
    } else {
        let features = extract_features(model, valid.iter())?;
        let result = retrain_head(&features, cfg)?;
        let indices = result.subset_indices.clone();
        Ok((result, indices))
    }
}

/// First `per_group` test indices of every group.
pub fn panel_indices(samples: &[Sample], per_group: usize) -> Vec<usize> {
    GroupId::ALL
        .iter()
        .flat_map(|&g| {
            samples
                .iter()
                .enumerate()
                .filter(move |(_, s)| s.group == g)
                .map(|(i, _)| i)
                .take(per_group)
        })
        .collect()
}

/// Neuron indices sorted by decreasing `|w|`, ties by index.
pub fn top_neurons(head: &Head, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..head.weights.len()).collect();
    idx.sort_by(|&a, &b| head.weights[b].abs().total_cmp(&head.weights[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn grid_heatmap(head: &Head) -> Result<Heatmap> {
    let d = head.weights.len();
    let grid_w = (1..=d).rev().find(|w| d % w == 0 && w * w <= d).unwrap_or(1);
    let grid = interpret::weight_heatmap(head, grid_w)?;
    Heatmap::new(grid.len(), grid_w, grid.concat(), Resolution::FeatureSpace)
}

/// Writes the per-run artifacts under `dir` and returns their paths
/// relative to `root`.
pub fn write_run(root: &Path, dir: &Path, a: &RunArtifacts) -> Result<Vec<String>> {
    let cams = dir.join("cams");
    io::create_dir(&cams)?;
    let mut files = Vec::new();

    let model_path = dir.join("erm_model.dfrt");
    io::save_model(&model_path, &a.erm_model)?;
    files.push(model_path);
    let head_path = dir.join("dfr_head.dfrt");
    io::save_head(&head_path, &a.dfr_result.head)?;
    files.push(head_path);

    let metrics_path = dir.join("metrics.json");
    io::write_json(
        &metrics_path,
        &serde_json::json!({
            "erm": a.erm,
            "dfr": a.dfr,
            "zero_fraction": a.dfr_result.zero_fraction,
            "converged": a.dfr_result.converged,
            "iterations": a.dfr_result.iterations,
            "objective_trace_tail": a.dfr_result.objective_trace.iter().rev().take(5).collect::<Vec<_>>(),
            "subset_indices": a.subset_indices,
            "train_log": a.erm_model.log,
        }),
    )?;
    files.push(metrics_path);

    let neurons_path = dir.join("neurons.csv");
    io::write_text(&neurons_path, &neurons_csv(&a.neurons))?;
    files.push(neurons_path);

    for (name, head) in [("erm", &a.erm_model.head), ("dfr", &a.dfr_result.head)] {
        let p = dir.join(format!("weights_{name}.ppm"));
        io::export_heatmap(&grid_heatmap(head)?, &p, ExportMode::Diverging)?;
        files.push(p);
    }

    let mut dfr_model = a.erm_model.clone();
    dfr_model.head = a.dfr_result.head.clone();
    let panel = panel_indices(&a.dataset.test, PANEL_PER_GROUP);
    let neurons = top_neurons(&a.erm_model.head, PANEL_NEURONS);
    for &i in &panel {
        let s = &a.dataset.test[i];
        let stem = format!("test{i:04}_{}", s.group.name());
        let p = cams.join(format!("{stem}_input.{}", if s.image.channels == 1 { "pgm" } else { "ppm" }));
        io::write_bytes(&p, &pnm::render_image(&s.image))?;
        files.push(p);
        for (name, model) in [("erm", &a.erm_model), ("dfr", &dfr_model)] {
            let map = interpret::cam(model, &s.image)?;
            let p = cams.join(format!("{stem}_cam_{name}.ppm"));
            io::export_heatmap(&map, &p, ExportMode::Diverging)?;
            files.push(p);
        }
        for &k in &neurons {
            let map = interpret::neuron_map(&a.erm_model, &s.image, k)?;
            let p = cams.join(format!("{stem}_neuron{k:02}.pgm"));
            io::export_heatmap(&map, &p, ExportMode::Gray)?;
            files.push(p);
        }
    }
    Ok(files.iter().map(|p| rel(root, p)).collect())
}

fn write_failure(root: &Path, err: &Error) {
    let text = match err {
        Error::Stage { stage, run, source } => format!("run: {run}\nstage: {stage}\nerror: {source}\n"),
        other => format!("error: {other}\n"),
    };
    // The original error is what matters; a failing marker write is ignored.
    let _ = std::fs::write(root.join(FAILURE_MARKER), text);
}

/// Runs `config.n_runs` seeded runs and writes the report under
/// `config.output_dir`. On failure a marker file names the failing stage and
/// earlier outputs are kept.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Report> {
    config.validate()?;
    let root = config.output_dir.clone();
    io::create_dir(&root)?;
    let marker = root.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = pipeline_inner(config, &root);
    if let Err(e) = &result {
        write_failure(&root, e);
    }
    result
}

fn pipeline_inner(config: &PipelineConfig, root: &Path) -> Result<Report> {
    let mut runs = Vec::new();
    for r in 0..config.n_runs {
        let cfg = config.for_run(r);
        let a = execute_run(&cfg, r)?;
        let dir = root.join(format!("run_{r}"));
        io::create_dir(&dir)?;
        let files = stage("export", r, write_run(root, &dir, &a))?;
        info!(
            "run {r}: ERM worst {:.3} avg {:.3}, DFR worst {:.3} avg {:.3}, zero fraction {:.3}",
            a.erm.per_group_accuracy.iter().copied().fold(f64::INFINITY, f64::min),
            a.erm.average_accuracy,
            a.dfr.per_group_accuracy.iter().copied().fold(f64::INFINITY, f64::min),
            a.dfr.average_accuracy,
            a.dfr_result.zero_fraction
        );
        let counts = TaxonomyCounts::from_reports(&a.neurons);
        runs.push(RunRecord {
            run: r,
            seeds: RunSeeds {
                dataset: cfg.dataset.seed,
                train: cfg.train.seed,
                dfr: cfg.dfr.seed,
            },
            erm: GroupMetrics { run: Some(r), ..a.erm },
            dfr: GroupMetrics { run: Some(r), ..a.dfr },
            zero_fraction: a.dfr_result.zero_fraction,
            dfr_converged: a.dfr_result.converged,
            dfr_iterations: a.dfr_result.iterations,
            taxonomy_counts: counts,
            taxonomy_contrast: taxonomy_contrast(&a.neurons),
            files,
        });
    }
    let pairs: Vec<(GroupMetrics, GroupMetrics)> = runs.iter().map(|r| (r.erm.clone(), r.dfr.clone())).collect();
    let summary = stage("summarize", config.n_runs, summarize_runs(&pairs))?;

    let table = root.join("summary.txt");
    io::write_text(&table, &summary.table())?;
    let csv = root.join("summary.csv");
    io::write_text(&csv, &summary.csv())?;
    let report = Report {
        report_version: REPORT_VERSION,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: config.clone(),
        runs,
        summary,
        files: vec![rel(root, &table), rel(root, &csv), "report.json".into()],
    };
    io::write_json(&root.join("report.json"), &report)?;
    Ok(report)
}

/// Counts of each taxonomy class, in [`Taxonomy::ALL`] order, for display.
pub fn taxonomy_line(counts: &TaxonomyCounts) -> String {
    let values = [counts.inactive, counts.core_only, counts.spurious_only, counts.mixed];
    Taxonomy::ALL
        .iter()
        .zip(values)
        .map(|(t, n)| format!("{}={n}", t.name()))
        .collect::<Vec<_>>()
        .join(" ")
}
