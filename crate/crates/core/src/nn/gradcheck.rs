use rand::seq::SliceRandom;

use super::train::{loss_and_grad, mean_loss};
use super::TrainedModel;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Number of parameters compared when the model has at least that many.
pub const GRAD_CHECK_MIN_PARAMS: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum over the compared parameters.
    pub max_relative_error: f64,
    /// Flat parameter index that attained the maximum.
    pub worst_param: usize,
    pub checked: usize,
    /// Parameters whose difference stencil crossed a ReLU or max-pool
    /// switch; the central difference is not a derivative estimate there.
    pub skipped_at_kinks: usize,
    /// Maximum including the skipped parameters, for diagnostics.
    pub max_relative_error_with_kinks: f64,
}

fn flat_get(model: &TrainedModel, mut i: usize) -> f64 {
    for (p, _) in model.params() {
        if i < p.len() {
            return p[i];
        }
        i -= p.len();
    }
    unreachable!("parameter index out of range")
}

fn flat_set(model: &mut TrainedModel, mut i: usize, v: f64) {
    for (p, _) in model.params_mut() {
        if i < p.len() {
            p[i] = v;
            return;
        }
        i -= p.len();
    }
    unreachable!("parameter index out of range")
}

/// Compares backprop gradients of the mean BCE over `batch` against central
/// differences with step `eps`.
///
/// Parameters are visited in a fixed pseudo-random order until
/// [`GRAD_CHECK_MIN_PARAMS`] of them have been compared (or all of them, for
/// smaller models). A parameter whose `±eps` evaluations change the network's
/// activation pattern is skipped and counted in `skipped_at_kinks`.
pub fn grad_check(model: &TrainedModel, batch: &[Sample], eps: f64) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    if batch.is_empty() {
        return Err(Error::Argument("gradient check needs a nonempty batch".into()));
    }
    let (_, grad) = loss_and_grad(model, batch)?;
    let mut base_pattern = Vec::new();
    mean_loss(model, batch, &mut base_pattern)?;

    let total = model.param_count();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seed::rng(0, &[stream::GRAD_CHECK]));

    let mut probe = model.clone();
    let mut pattern = Vec::with_capacity(base_pattern.len());
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: 0,
        checked: 0,
        skipped_at_kinks: 0,
        max_relative_error_with_kinks: 0.0,
    };
    for i in order {
        if report.checked >= GRAD_CHECK_MIN_PARAMS {
            break;
        }
        let orig = flat_get(&probe, i);
        flat_set(&mut probe, i, orig + eps);
        let plus = mean_loss(&probe, batch, &mut pattern)?;
        let mut smooth = pattern == base_pattern;
        flat_set(&mut probe, i, orig - eps);
        let minus = mean_loss(&probe, batch, &mut pattern)?;
        smooth &= pattern == base_pattern;
        flat_set(&mut probe, i, orig);

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = flat_get(&grad, i);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.max_relative_error_with_kinks = report.max_relative_error_with_kinks.max(rel);
        if !smooth {
            report.skipped_at_kinks += 1;
            continue;
        }
        report.checked += 1;
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_param = i;
        }
    }
    Ok(report)
}
