//! Last-layer retraining on a group-balanced subset.
//!
//! The encoder stays frozen. Its pooled features on held-out data are fed to
//! an L1-regularized logistic regression solved by proximal gradient descent
//! from zero; soft-thresholding is what produces exactly-zero head weights.

use log::debug;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datagen::{GroupId, Sample};
use crate::error::{Error, Result};
use crate::nn::{dot, sigmoid, Head, TrainedModel, Workspace};
use crate::seed::{self, stream};

/// `N × d` pooled features with the labels and groups of their samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub groups: Vec<GroupId>,
}

impl FeatureMatrix {
    pub fn new(cols: usize, values: Vec<f64>, labels: Vec<u8>, groups: Vec<GroupId>) -> Result<Self> {
        let rows = labels.len();
        if groups.len() != rows || values.len() != rows * cols {
            return Err(Error::shape(
                "feature matrix",
                format!("{rows} rows x {cols} cols with {rows} groups"),
                format!("{} values, {} groups", values.len(), groups.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            labels,
            groups,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DfrConfig {
    pub l1_lambda: f64,
    pub max_iters: usize,
    /// Initial proximal step; halved whenever the step fails to decrease the
    /// smooth part below its quadratic model.
    pub step_size: f64,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tol: f64,
    pub n_subset_repeats: usize,
    /// Standardize each feature column on the fitting subset.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for DfrConfig {
    fn default() -> Self {
        Self {
            l1_lambda: 0.05,
            max_iters: 5000,
            step_size: 0.1,
            tol: 1e-8,
            n_subset_repeats: 1,
            standardize: false,
            seed: 0,
        }
    }
}

impl DfrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_lambda.is_finite() && self.l1_lambda >= 0.0) {
            return Err(Error::spec("l1_lambda", "must be finite and nonnegative"));
        }
        if self.max_iters == 0 {
            return Err(Error::spec("max_iters", "must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::spec("step_size", "must be positive"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::spec("tol", "must be nonnegative"));
        }
        if self.n_subset_repeats == 0 {
            return Err(Error::spec("n_subset_repeats", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-column affine map applied before fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfrResult {
    /// Head acting on raw (unstandardized) features.
    pub head: Head,
    pub zero_fraction: f64,
    /// Objective after every accepted iteration of the first fit, starting
    /// with the value at zero.
    pub objective_trace: Vec<f64>,
    /// Row indices of each fitting subset.
    pub subset_indices: Vec<Vec<usize>>,
    pub converged: bool,
    pub iterations: usize,
    pub standardization: Option<Vec<Standardization>>,
}

/// Draws `m = min group size` rows from each of the four groups uniformly
/// without replacement. Output is group-major with ascending indices.
pub fn balanced_subset(groups: &[GroupId], seed: u64) -> Result<Vec<usize>> {
    let mut members: [Vec<usize>; 4] = Default::default();
    for (i, g) in groups.iter().enumerate() {
        members[g.index()].push(i);
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::Balance { group: empty });
    }
    let m = members.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(4 * m);
    for (g, pool) in members.iter().enumerate() {
        let mut rng = seed::rng(seed, &[stream::SUBSET, g as u64]);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), m)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

pub fn balanced_subset_of(samples: &[Sample], seed: u64) -> Result<Vec<usize>> {
    let groups: Vec<GroupId> = samples.iter().map(|s| s.group).collect();
    balanced_subset(&groups, seed)
}

pub fn extract_features<'a, I>(model: &TrainedModel, samples: I) -> Result<FeatureMatrix>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let d = model.feature_dim();
    let mut ws = Workspace::new(&model.encoder);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for s in samples {
        ws.run(&model.encoder, &s.image)?;
        values.extend_from_slice(&ws.features);
        labels.push(s.label);
        groups.push(s.group);
    }
    FeatureMatrix::new(d, values, labels, groups)
}

/// Proximal operator of `t·|·|`.
pub fn soft_threshold(v: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Argument(format!("threshold must be nonnegative, got {t}")));
    }
    Ok(shrink(v, t))
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean logistic loss of `(w, b)` on `x`, i.e. mean BCE of `sigmoid(w·z + b)`.
pub fn logistic_loss(x: &FeatureMatrix, w: &[f64], b: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.rows {
        let t = dot(w, x.row(i)) + b;
        acc += if x.labels[i] == 1 { softplus(-t) } else { softplus(t) };
    }
    acc / x.rows as f64
}

/// `logistic_loss + lambda * ||w||_1`; the bias is not penalized.
pub fn lasso_objective(x: &FeatureMatrix, w: &[f64], b: f64, lambda: f64) -> f64 {
    logistic_loss(x, w, b) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

fn loss_grad(x: &FeatureMatrix, w: &[f64], b: f64, gw: &mut [f64]) -> f64 {
    gw.fill(0.0);
    let mut gb = 0.0;
    let inv = 1.0 / x.rows as f64;
    for i in 0..x.rows {
        let row = x.row(i);
        let r = (sigmoid(dot(w, row) + b) - x.labels[i] as f64) * inv;
        for (g, z) in gw.iter_mut().zip(row) {
            *g += r * z;
        }
        gb += r;
    }
    gb
}

struct Fit {
    w: Vec<f64>,
    b: f64,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn fit_l1_logistic(x: &FeatureMatrix, cfg: &DfrConfig) -> Fit {
    let d = x.cols;
    let lambda = cfg.l1_lambda;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    let mut w_new = vec![0.0; d];
    let mut step = cfg.step_size;
    let mut smooth = logistic_loss(x, &w, b);
    let mut objective = smooth;
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let gb = loss_grad(x, &w, b, &mut gw);
        let (b_new, smooth_new) = loop {
            for k in 0..d {
                w_new[k] = shrink(w[k] - step * gw[k], step * lambda);
            }
            let b_new = b - step * gb;
            let smooth_new = logistic_loss(x, &w_new, b_new);
            // Sufficient decrease against the quadratic model of the smooth
            // part; this also guarantees the full objective does not rise.
            let mut lin = gb * (b_new - b);
            let mut sq = (b_new - b) * (b_new - b);
            for k in 0..d {
                let dk = w_new[k] - w[k];
                lin += gw[k] * dk;
                sq += dk * dk;
            }
            if smooth_new <= smooth + lin + sq / (2.0 * step) || step < 1e-30 {
                break (b_new, smooth_new);
            }
            step *= 0.5;
        };
        let objective_new = smooth_new + lambda * w_new.iter().map(|v| v.abs()).sum::<f64>();
        if objective_new > objective {
            // Only reachable at the floor of the step search, i.e. numerically
            // stationary.
            converged = true;
            break;
        }
        std::mem::swap(&mut w, &mut w_new);
        b = b_new;
        smooth = smooth_new;
        let decrease = objective - objective_new;
        objective = objective_new;
        trace.push(objective);
        if decrease < cfg.tol {
            converged = true;
            break;
        }
    }
    Fit {
        w,
        b,
        trace,
        converged,
        iterations,
    }
}

fn standardize(x: &FeatureMatrix) -> (FeatureMatrix, Standardization) {
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x.cols];
    for i in 0..x.rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.values[i * x.cols..(i + 1) * x.cols];
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) / s;
        }
    }
    (out, Standardization { mean, scale })
}

/// Fits the L1-regularized logistic head.
///
/// With `n_subset_repeats == 1` the fit uses every row of `features`, which
/// the caller is expected to have balanced already. With more repeats, each
/// repeat draws its own balanced subset from the rows and the resulting
/// weights and biases are averaged.
pub fn retrain_head(features: &FeatureMatrix, cfg: &DfrConfig) -> Result<DfrResult> {
    cfg.validate()?;
    if features.rows == 0 {
        return Err(Error::Argument("no feature rows to fit".into()));
    }
    let positives = features.labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == features.rows {
        return Err(Error::Label(format!(
            "retraining needs both classes, got {positives} positives out of {}",
            features.rows
        )));
    }

    let subsets: Vec<Vec<usize>> = if cfg.n_subset_repeats == 1 {
        vec![(0..features.rows).collect()]
    } else {
        (0..cfg.n_subset_repeats)
            .map(|r| balanced_subset(&features.groups, seed::derive(cfg.seed, &[r as u64])))
            .collect::<Result<_>>()?
    };

    let d = features.cols;
    let mut w_sum = vec![0.0; d];
    let mut b_sum = 0.0;
    let mut first_trace = None;
    let mut converged = true;
    let mut iterations = 0;
    let mut standardizations = Vec::new();
    for rows in &subsets {
        let subset = if cfg.n_subset_repeats == 1 {
            features.clone()
        } else {
            features.select(rows)
        };
        let (fit_x, affine) = if cfg.standardize {
            let (z, a) = standardize(&subset);
            (z, Some(a))
        } else {
            (subset, None)
        };
        let fit = fit_l1_logistic(&fit_x, cfg);
        debug!(
            "l1 logistic fit: {} iterations, converged {}, objective {:.6e}",
            fit.iterations,
            fit.converged,
            fit.trace.last().copied().unwrap_or(f64::NAN)
        );
        converged &= fit.converged;
        iterations = iterations.max(fit.iterations);
        // Map back to raw features: w/s and b - sum(w m / s). Zeros stay zero.
        let (w, b) = match &affine {
            Some(a) => {
                let w: Vec<f64> = fit.w.iter().zip(&a.scale).map(|(w, s)| w / s).collect();
                let shift: f64 = w.iter().zip(&a.mean).map(|(w, m)| w * m).sum();
                (w, fit.b - shift)
            }
            None => (fit.w, fit.b),
        };
        for (acc, v) in w_sum.iter_mut().zip(&w) {
            *acc += v;
        }
        b_sum += b;
        first_trace.get_or_insert(fit.trace);
        if let Some(a) = affine {
            standardizations.push(a);
        }
    }
    let reps = subsets.len() as f64;
    let head = if subsets.len() == 1 {
        Head {
            weights: w_sum,
            bias: b_sum,
        }
    } else {
        Head {
            weights: w_sum.iter().map(|v| v / reps).collect(),
            bias: b_sum / reps,
        }
    };
    Ok(DfrResult {
        zero_fraction: sparsity(&head),
        head,
        objective_trace: first_trace.unwrap_or_default(),
        subset_indices: subsets,
        converged,
        iterations,
        standardization: cfg.standardize.then_some(standardizations),
    })
}

/// Returns the model with its encoder untouched and the retrained head.
pub fn apply_dfr(model: &TrainedModel, result: &DfrResult) -> Result<TrainedModel> {
    if result.head.weights.len() != model.feature_dim() {
        return Err(Error::shape(
            "retrained head",
            model.feature_dim(),
            result.head.weights.len(),
        ));
    }
    let mut out = model.clone();
    out.head = result.head.clone();
    Ok(out)
}

/// Fraction of head weights that are exactly zero.
pub fn sparsity(head: &Head) -> f64 {
    if head.weights.is_empty() {
        return 0.0;
    }
    head.weights.iter().filter(|&&w| w == 0.0).count() as f64 / head.weights.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups_from_sizes(sizes: [usize; 4]) -> Vec<GroupId> {
        // Interleave so that group members are not contiguous.
        let mut out = Vec::new();
        let mut left = sizes;
        while left.iter().any(|&c| c > 0) {
            for g in 0..4 {
                if left[g] > 0 {
                    out.push(GroupId::ALL[g]);
                    left[g] -= 1;
                }
            }
        }
        out
    }

    #[test]
    fn balanced_subset_examples() {
        let cases = [([10, 10, 10, 10], 40), ([60, 60, 60, 60], 240), ([5, 9, 7, 6], 20)];
        for (sizes, total) in cases {
            let groups = groups_from_sizes(sizes);
            let idx = balanced_subset(&groups, 3).unwrap();
            assert_eq!(idx.len(), total);
            let mut per = [0; 4];
            for &i in &idx {
                per[groups[i].index()] += 1;
            }
            assert!(per.iter().all(|&c| c == total / 4));
            let mut uniq = idx.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), idx.len());
            assert_eq!(idx, balanced_subset(&groups, 3).unwrap());
        }
    }

    #[test]
    fn balanced_subset_reports_empty_group() {
        let groups = groups_from_sizes([3, 3, 0, 3]);
        assert!(matches!(balanced_subset(&groups, 0), Err(Error::Balance { group: 2 })));
    }

    #[test]
    fn soft_threshold_examples() {
        assert!((soft_threshold(0.7, 0.2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.1, 0.2).unwrap(), 0.0);
        assert_eq!(soft_threshold(-0.3, 0.2).unwrap(), -0.3 + 0.2);
        assert_eq!(soft_threshold(1.234, 0.0).unwrap(), 1.234);
        assert!(matches!(soft_threshold(1.0, -0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn sparsity_examples() {
        let head = Head {
            weights: vec![0.0, 0.0, 0.5, -0.2],
            bias: 1.0,
        };
        assert_eq!(sparsity(&head), 0.5);
        let head = Head {
            weights: vec![-0.0, 1e-300],
            bias: 0.0,
        };
        assert_eq!(sparsity(&head), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = FeatureMatrix::new(1, vec![1.0, 2.0], vec![1, 1], vec![GroupId::ALL[2]; 2]).unwrap();
        assert!(matches!(retrain_head(&x, &DfrConfig::default()), Err(Error::Label(_))));
    }

    #[test]
    fn feature_matrix_validates_shape() {
        assert!(FeatureMatrix::new(2, vec![1.0; 3], vec![0, 1], vec![GroupId::ALL[0]; 2]).is_err());
        assert!(FeatureMatrix::new(1, vec![f64::NAN], vec![0], vec![GroupId::ALL[0]]).is_err());
    }
}
