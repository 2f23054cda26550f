//! Per-group accuracy, worst-group selection and multi-run summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{GroupId, Sample};
use crate::error::{Error, Result};
use crate::nn::{dot, sigmoid, TrainedModel, Workspace};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group_accuracy: [f64; 4],
    pub n_per_group: [usize; 4],
    pub correct_per_group: [usize; 4],
    /// Total correct over total count.
    pub average_accuracy: f64,
    pub worst_group: Option<GroupId>,
    pub run: Option<usize>,
}

impl GroupMetrics {
    pub fn accuracy(&self, g: GroupId) -> f64 {
        self.per_group_accuracy[g.index()]
    }
}

/// Accuracy per group and micro-averaged, from predicted probabilities.
pub fn metrics_from_predictions(
    probs: &[f64],
    labels: &[u8],
    groups: &[GroupId],
    threshold: f64,
) -> Result<GroupMetrics> {
    if probs.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::shape(
            "predictions",
            format!("{} labels and groups", probs.len()),
            format!("{} labels, {} groups", labels.len(), groups.len()),
        ));
    }
    let mut n = [0usize; 4];
    let mut correct = [0usize; 4];
    for ((&p, &y), g) in probs.iter().zip(labels).zip(groups) {
        n[g.index()] += 1;
        if (p >= threshold) == (y == 1) {
            correct[g.index()] += 1;
        }
    }
    if let Some(empty) = n.iter().position(|&c| c == 0) {
        return Err(Error::Metric { group: empty });
    }
    let mut per_group = [0.0; 4];
    for g in 0..4 {
        per_group[g] = correct[g] as f64 / n[g] as f64;
    }
    Ok(GroupMetrics {
        per_group_accuracy: per_group,
        n_per_group: n,
        correct_per_group: correct,
        average_accuracy: correct.iter().sum::<usize>() as f64 / n.iter().sum::<usize>() as f64,
        worst_group: None,
        run: None,
    })
}

pub fn predict_probabilities(model: &TrainedModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(&model.encoder);
    samples
        .iter()
        .map(|s| {
            ws.run(&model.encoder, &s.image)?;
            Ok(sigmoid(dot(&model.head.weights, &ws.features) + model.head.bias))
        })
        .collect()
}

/// Group metrics of `model` on `split`; `worst_group` is left unset.
pub fn group_accuracies(model: &TrainedModel, split: &[Sample], threshold: f64) -> Result<GroupMetrics> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty split".into()));
    }
    let probs = predict_probabilities(model, split)?;
    let labels: Vec<u8> = split.iter().map(|s| s.label).collect();
    let groups: Vec<GroupId> = split.iter().map(|s| s.group).collect();
    metrics_from_predictions(&probs, &labels, &groups, threshold)
}

/// Lowest-accuracy group; ties go to the lowest group index.
pub fn argmin_group(accuracies: &[f64; 4]) -> GroupId {
    let mut best = 0;
    for g in 1..4 {
        if accuracies[g] < accuracies[best] {
            best = g;
        }
    }
    GroupId::ALL[best]
}

/// The worst group is always chosen from ERM accuracies; the same group is
/// then read off the DFR metrics.
pub fn worst_group(erm_metrics: &GroupMetrics) -> GroupId {
    argmin_group(&erm_metrics.per_group_accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub per_group: [Stat; 4],
    pub average: Stat,
    /// Accuracy on the summary's worst group (fixed by ERM means).
    pub worst_group_accuracy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub erm: GroupMetrics,
    pub dfr: GroupMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub single_run: bool,
    pub worst_group: GroupId,
    pub erm: StageSummary,
    pub dfr: StageSummary,
    pub per_run: Vec<RunMetrics>,
}

fn stage_summary(metrics: &[&GroupMetrics], worst: GroupId) -> StageSummary {
    let column = |f: &dyn Fn(&GroupMetrics) -> f64| -> Stat {
        mean_std(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>())
    };
    StageSummary {
        per_group: std::array::from_fn(|g| column(&|m| m.per_group_accuracy[g])),
        average: column(&|m| m.average_accuracy),
        worst_group_accuracy: column(&|m| m.accuracy(worst)),
    }
}

pub fn summarize_runs(per_run: &[(GroupMetrics, GroupMetrics)]) -> Result<RunSummary> {
    if per_run.is_empty() {
        return Err(Error::Argument("summary needs at least one run".into()));
    }
    let erm: Vec<&GroupMetrics> = per_run.iter().map(|(e, _)| e).collect();
    let dfr: Vec<&GroupMetrics> = per_run.iter().map(|(_, d)| d).collect();
    let erm_means: [f64; 4] = std::array::from_fn(|g| {
        mean_std(&erm.iter().map(|m| m.per_group_accuracy[g]).collect::<Vec<_>>()).mean
    });
    let worst = argmin_group(&erm_means);
    Ok(RunSummary {
        runs: per_run.len(),
        single_run: per_run.len() == 1,
        worst_group: worst,
        erm: stage_summary(&erm, worst),
        dfr: stage_summary(&dfr, worst),
        per_run: per_run
            .iter()
            .map(|(e, d)| RunMetrics {
                erm: e.clone(),
                dfr: d.clone(),
            })
            .collect(),
    })
}

impl RunSummary {
    /// Plain-text table: four group rows and an average row, ERM and DFR
    /// columns as `mean ± std` in percent. The worst group is starred.
    pub fn table(&self) -> String {
        let cell = |s: &Stat| format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * s.std);
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>15} {:>15}", "group", "ERM", "DFR");
        for g in GroupId::ALL {
            let name = if g == self.worst_group {
                format!("*{}", g.name())
            } else {
                g.name().to_string()
            };
            let _ = writeln!(
                out,
                "{:<18} {:>15} {:>15}",
                name,
                cell(&self.erm.per_group[g.index()]),
                cell(&self.dfr.per_group[g.index()])
            );
        }
        let _ = writeln!(
            out,
            "{:<18} {:>15} {:>15}",
            "average",
            cell(&self.erm.average),
            cell(&self.dfr.average)
        );
        out
    }

    /// Rows `run,stage,group,n,accuracy`, with an `average` row per run and stage.
    pub fn csv(&self) -> String {
        let mut out = String::from("run,stage,group,n,accuracy\n");
        for (r, m) in self.per_run.iter().enumerate() {
            let run = m.erm.run.unwrap_or(r);
            for (stage, gm) in [("erm", &m.erm), ("dfr", &m.dfr)] {
                for g in GroupId::ALL {
                    let _ = writeln!(
                        out,
                        "{run},{stage},{},{},{}",
                        g.name(),
                        gm.n_per_group[g.index()],
                        gm.accuracy(g)
                    );
                }
                let _ = writeln!(
                    out,
                    "{run},{stage},average,{},{}",
                    gm.n_per_group.iter().sum::<usize>(),
                    gm.average_accuracy
                );
            }
        }
        out
    }
}
