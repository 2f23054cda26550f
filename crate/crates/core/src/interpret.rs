//! Class activation maps, single-neuron maps and a mask-based neuron taxonomy.

use serde::{Deserialize, Serialize};

use crate::datagen::{Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::nn::{forward, FeatureMaps, Head, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    FeatureSpace,
    InputSpace,
}

/// Row-major `height × width` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub resolution: Resolution,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, resolution: Resolution) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "heatmap",
                format!("{} values", height * width),
                values.len(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("heatmap value {v} is not finite")));
        }
        Ok(Self {
            height,
            width,
            values,
            resolution,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Negated copy with the same resolution.
    pub fn neg(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

/// Align-corners bilinear interpolation to `out_h × out_w`.
pub fn upsample_bilinear(map: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if map.height == 0 || map.width == 0 {
        return Err(Error::Argument("cannot upsample an empty map".into()));
    }
    if out_h < map.height || out_w < map.width {
        return Err(Error::Argument(format!(
            "output {out_h}x{out_w} is smaller than input {}x{}",
            map.height, map.width
        )));
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| source_coord(y, out_h, map.height)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| source_coord(x, out_w, map.width)).collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = (1.0 - fx) * map.at(y0, x0) + fx * map.at(y0, x1);
            let bottom = (1.0 - fx) * map.at(y1, x0) + fx * map.at(y1, x1);
            values.push((1.0 - fy) * top + fy * bottom);
        }
    }
    Ok(Heatmap {
        height: out_h,
        width: out_w,
        values,
        resolution: Resolution::InputSpace,
    })
}

fn source_coord(i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, 0.0);
    }
    // Integer numerator keeps the end points exact.
    let pos = (i * (in_n - 1)) as f64 / (out_n - 1) as f64;
    let lo = (pos.floor() as usize).min(in_n - 1);
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, pos - lo as f64)
}

/// `Σ_k w_k · A_k` over the final maps, summed in channel order per pixel.
pub fn feature_cam(head: &Head, maps: &FeatureMaps) -> Result<Heatmap> {
    if head.weights.len() != maps.channels {
        return Err(Error::shape("cam", maps.channels, head.weights.len()));
    }
    let n = maps.height * maps.width;
    let mut values = vec![0.0; n];
    for (p, out) in values.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, w) in head.weights.iter().enumerate() {
            acc += w * maps.data[k * n + p];
        }
        *out = acc;
    }
    Heatmap::new(maps.height, maps.width, values, Resolution::FeatureSpace)
}

/// Map of channel `k` at feature resolution.
pub fn feature_neuron_map(maps: &FeatureMaps, k: usize) -> Result<Heatmap> {
    if k >= maps.channels {
        return Err(Error::Index {
            what: "feature channels",
            index: k,
            len: maps.channels,
        });
    }
    Heatmap::new(
        maps.height,
        maps.width,
        maps.channel(k).to_vec(),
        Resolution::FeatureSpace,
    )
}

/// Image-level class activation map at input resolution.
pub fn cam(model: &TrainedModel, image: &Image) -> Result<Heatmap> {
    let out = forward(&model.encoder, image)?;
    upsample_bilinear(&feature_cam(&model.head, &out.maps)?, image.height, image.width)
}

/// Activation map of feature channel `k` at input resolution.
pub fn neuron_map(model: &TrainedModel, image: &Image, k: usize) -> Result<Heatmap> {
    let d = model.feature_dim();
    if k >= d {
        return Err(Error::Index {
            what: "feature channels",
            index: k,
            len: d,
        });
    }
    let out = forward(&model.encoder, image)?;
    upsample_bilinear(&feature_neuron_map(&out.maps, k)?, image.height, image.width)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScore {
    pub score: f64,
    /// Set when the map has no positive mass; `score` is then 0.
    pub empty: bool,
}

/// Share of the positive mass of `map` that falls inside `mask`.
pub fn region_score(map: &Heatmap, mask: &Mask) -> Result<RegionScore> {
    if map.height != mask.height || map.width != mask.width {
        return Err(Error::shape(
            "region_score",
            format!("{}x{}", map.height, map.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let (inside, total) = masses(map, mask);
    if total <= 0.0 {
        return Ok(RegionScore {
            score: 0.0,
            empty: true,
        });
    }
    Ok(RegionScore {
        score: (inside / total).clamp(0.0, 1.0),
        empty: false,
    })
}

fn masses(map: &Heatmap, mask: &Mask) -> (f64, f64) {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (&v, &m) in map.values.iter().zip(&mask.data) {
        let r = v.max(0.0);
        total += r;
        if m {
            inside += r;
        }
    }
    (inside, total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomyThresholds {
    pub tau_hi: f64,
    pub tau_lo: f64,
    /// Mean activation mass below which a neuron counts as inactive.
    pub eps_act: f64,
}

impl Default for TaxonomyThresholds {
    fn default() -> Self {
        Self {
            tau_hi: 0.5,
            tau_lo: 0.2,
            eps_act: 1e-6,
        }
    }
}

impl TaxonomyThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_hi) {
            return Err(Error::spec("tau_hi", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau_lo) {
            return Err(Error::spec("tau_lo", "must lie in [0, 1]"));
        }
        if !(self.eps_act.is_finite() && self.eps_act >= 0.0) {
            return Err(Error::spec("eps_act", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Taxonomy {
    Inactive,
    CoreOnly,
    SpuriousOnly,
    Mixed,
}

impl Taxonomy {
    pub const ALL: [Taxonomy; 4] = [
        Taxonomy::Inactive,
        Taxonomy::CoreOnly,
        Taxonomy::SpuriousOnly,
        Taxonomy::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Taxonomy::Inactive => "Inactive",
            Taxonomy::CoreOnly => "CoreOnly",
            Taxonomy::SpuriousOnly => "SpuriousOnly",
            Taxonomy::Mixed => "Mixed",
        }
    }
}

pub fn classify_scores(core: f64, spurious: f64, mass: f64, t: &TaxonomyThresholds) -> Taxonomy {
    if mass < t.eps_act {
        Taxonomy::Inactive
    } else if core >= t.tau_hi && spurious <= t.tau_lo {
        Taxonomy::CoreOnly
    } else if spurious >= t.tau_hi && core <= t.tau_lo {
        Taxonomy::SpuriousOnly
    } else {
        Taxonomy::Mixed
    }
}

/// Scores and class of one neuron from its maps on a probe set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapScores {
    pub core_score: f64,
    pub spurious_score: f64,
    /// Mean positive mass per probe map.
    pub activation_mass: f64,
    pub taxonomy: Taxonomy,
}

/// Scores input-space maps paired with the probe samples they came from.
///
/// The core score averages over every probe, the spurious score only over
/// patch-present probes.
pub fn score_maps<'a, I>(maps: I, t: &TaxonomyThresholds) -> Result<MapScores>
where
    I: IntoIterator<Item = (&'a Heatmap, &'a Sample)>,
{
    let mut core_sum = 0.0;
    let mut spurious_sum = 0.0;
    let mut mass_sum = 0.0;
    let mut n = 0usize;
    let mut n_patch = 0usize;
    for (map, sample) in maps {
        let core = region_score(map, &sample.core_mask)?;
        core_sum += core.score;
        if sample.group.spurious() {
            spurious_sum += region_score(map, &sample.spurious_mask)?.score;
            n_patch += 1;
        }
        mass_sum += masses(map, &sample.core_mask).1;
        n += 1;
    }
    if n_patch == 0 {
        return Err(Error::Probe("probe set has no patch-present samples".into()));
    }
    let core_score = core_sum / n as f64;
    let spurious_score = spurious_sum / n_patch as f64;
    let activation_mass = mass_sum / n as f64;
    Ok(MapScores {
        core_score,
        spurious_score,
        activation_mass,
        taxonomy: classify_scores(core_score, spurious_score, activation_mass, t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub k: usize,
    pub w_erm: f64,
    pub w_dfr: f64,
    pub core_score: f64,
    pub spurious_score: f64,
    pub activation_mass: f64,
    pub taxonomy: Taxonomy,
}

/// Taxonomy of a single neuron of `model`; `dfr_head` supplies `w_dfr`.
pub fn classify_neuron(
    model: &TrainedModel,
    dfr_head: &Head,
    probe: &[Sample],
    k: usize,
    t: &TaxonomyThresholds,
) -> Result<NeuronReport> {
    let d = model.feature_dim();
    if k >= d {
        return Err(Error::Index {
            what: "feature channels",
            index: k,
            len: d,
        });
    }
    let maps = probe
        .iter()
        .map(|s| neuron_map(model, &s.image, k))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_maps(maps.iter().zip(probe), t)?;
    report(model, dfr_head, k, scores)
}

/// Reports for every neuron, in index order, sharing one forward pass per probe.
pub fn classify_neurons(
    model: &TrainedModel,
    dfr_head: &Head,
    probe: &[Sample],
    t: &TaxonomyThresholds,
) -> Result<Vec<NeuronReport>> {
    let d = model.feature_dim();
    if dfr_head.weights.len() != d {
        return Err(Error::shape("dfr head", d, dfr_head.weights.len()));
    }
    if !probe.iter().any(|s| s.group.spurious()) {
        return Err(Error::Probe("probe set has no patch-present samples".into()));
    }
    let mut per_neuron: Vec<Vec<Heatmap>> = vec![Vec::with_capacity(probe.len()); d];
    for s in probe {
        let out = forward(&model.encoder, &s.image)?;
        for (k, maps) in per_neuron.iter_mut().enumerate() {
            let m = feature_neuron_map(&out.maps, k)?;
            maps.push(upsample_bilinear(&m, s.image.height, s.image.width)?);
        }
    }
    per_neuron
        .iter()
        .enumerate()
        .map(|(k, maps)| report(model, dfr_head, k, score_maps(maps.iter().zip(probe), t)?))
        .collect()
}

fn report(model: &TrainedModel, dfr_head: &Head, k: usize, s: MapScores) -> Result<NeuronReport> {
    let w_dfr = *dfr_head.weights.get(k).ok_or(Error::Index {
        what: "dfr head weights",
        index: k,
        len: dfr_head.weights.len(),
    })?;
    Ok(NeuronReport {
        k,
        w_erm: model.head.weights[k],
        w_dfr,
        core_score: s.core_score,
        spurious_score: s.spurious_score,
        activation_mass: s.activation_mass,
        taxonomy: s.taxonomy,
    })
}

pub fn taxonomy_counts(reports: &[NeuronReport]) -> [usize; 4] {
    let mut counts = [0; 4];
    for r in reports {
        let i = Taxonomy::ALL.iter().position(|&t| t == r.taxonomy).unwrap();
        counts[i] += 1;
    }
    counts
}

/// Mean spurious score of active neurons split by whether DFR zeroed them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyContrast {
    pub n_zeroed: usize,
    pub n_retained: usize,
    pub zeroed_mean_spurious: Option<f64>,
    pub retained_mean_spurious: Option<f64>,
}

impl TaxonomyContrast {
    /// Zeroed neurons lean at least as spurious as retained ones. False when
    /// either side is empty.
    pub fn holds(&self) -> bool {
        match (self.zeroed_mean_spurious, self.retained_mean_spurious) {
            (Some(z), Some(r)) => z >= r,
            _ => false,
        }
    }
}

pub fn taxonomy_contrast(reports: &[NeuronReport]) -> TaxonomyContrast {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let active = reports.iter().filter(|r| r.taxonomy != Taxonomy::Inactive);
    let (zeroed, retained): (Vec<&NeuronReport>, Vec<&NeuronReport>) = active.partition(|r| r.w_dfr == 0.0);
    let zs: Vec<f64> = zeroed.iter().map(|r| r.spurious_score).collect();
    let rs: Vec<f64> = retained.iter().map(|r| r.spurious_score).collect();
    TaxonomyContrast {
        n_zeroed: zs.len(),
        n_retained: rs.len(),
        zeroed_mean_spurious: mean(&zs),
        retained_mean_spurious: mean(&rs),
    }
}

/// Row-major reshape of the head weights into `(d / grid_w) × grid_w`.
pub fn weight_heatmap(head: &Head, grid_w: usize) -> Result<Vec<Vec<f64>>> {
    let d = head.weights.len();
    if grid_w == 0 || d % grid_w != 0 {
        return Err(Error::Argument(format!("grid width {grid_w} does not divide {d}")));
    }
    Ok(head.weights.chunks(grid_w).map(<[f64]>::to_vec).collect())
}

pub fn neurons_csv(reports: &[NeuronReport]) -> String {
    let mut out = String::from("k,w_erm,w_dfr,core_score,spurious_score,taxonomy\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{:e},{:.6},{:.6},{}\n",
            r.k,
            r.w_erm,
            r.w_dfr,
            r.core_score,
            r.spurious_score,
            r.taxonomy.name()
        ));
    }
    out
}
