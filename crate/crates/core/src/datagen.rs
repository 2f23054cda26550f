//! Synthetic two-class image datasets with one controllable spurious patch.
//!
//! Class 0 carries a filled disk, class 1 a diagonal cross. A bright red
//! square in one of the four corners plays the spurious attribute. In the
//! training split the patch co-occurs with class 0 at `train_correlation`;
//! validation and test are balanced at 0.5 per class. Every sample carries
//! exact pixel masks of the shape and the patch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Patch rate used for both evaluation splits.
pub const EVAL_PATCH_RATE: f64 = 0.5;

/// Range of the per-image gray background level.
const BACKGROUND_RANGE: (f64, f64) = (0.15, 0.45);
/// Range of the shape intensity above background.
const CONTRAST_RANGE: (f64, f64) = (0.0, 0.6);
/// Shape extent (disk radius / cross half-length) as a fraction of the side.
const EXTENT_RANGE: (f64, f64) = (0.12, 0.2);
/// Half-thickness of each cross bar, in pixels.
const CROSS_HALF_WIDTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub channels: usize,
    pub n_train_per_class: usize,
    pub n_val_per_class: usize,
    pub n_test_per_class: usize,
    /// Fraction of class-0 training images with the patch; class 1 gets the complement.
    pub train_correlation: f64,
    pub patch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            n_train_per_class: 500,
            n_val_per_class: 100,
            n_test_per_class: 250,
            train_correlation: 0.95,
            patch_size: 6,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::spec("image_size", "must be at least 4"));
        }
        if self.channels == 0 {
            return Err(Error::spec("channels", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train_correlation) {
            return Err(Error::spec(
                "train_correlation",
                format!("{} is outside [0, 1]", self.train_correlation),
            ));
        }
        if self.patch_size == 0 || 2 * self.patch_size >= self.image_size {
            return Err(Error::spec(
                "patch_size",
                format!(
                    "{} must be positive and below image_size / 2 = {}",
                    self.patch_size,
                    self.image_size as f64 / 2.0
                ),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::spec("noise_sigma", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// One of the four (class, spurious flag) groups. `index = label * 2 + flag`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub struct GroupId(u8);

impl GroupId {
    pub const COUNT: usize = 4;
    pub const ALL: [GroupId; 4] = [GroupId(0), GroupId(1), GroupId(2), GroupId(3)];

    pub fn from_index(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(GroupId(index as u8))
        } else {
            Err(Error::Index {
                what: "groups",
                index,
                len: Self::COUNT,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> u8 {
        self.0 >> 1
    }

    pub fn spurious(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "class0_no_patch",
            1 => "class0_patch",
            2 => "class1_no_patch",
            _ => "class1_patch",
        }
    }
}

impl From<GroupId> for u8 {
    fn from(g: GroupId) -> u8 {
        g.0
    }
}

impl TryFrom<u8> for GroupId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        GroupId::from_index(v as usize)
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.0, self.name())
    }
}

pub fn group_of(label: u8, spurious_flag: u8) -> Result<GroupId> {
    if label > 1 || spurious_flag > 1 {
        return Err(Error::Argument(format!(
            "group_of expects label and flag in {{0,1}}, got ({label}, {spurious_flag})"
        )));
    }
    Ok(GroupId(label * 2 + spurious_flag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

/// Per-group sample counts for each split, indexed by `GroupId::index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; 4],
    pub valid: [usize; 4],
    pub test: [usize; 4],
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> [usize; 4] {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

fn per_class_counts(n: usize, class0_rate: f64, eval: bool) -> [usize; 4] {
    if eval {
        let patch = n / 2;
        [n - patch, patch, n - patch, patch]
    } else {
        let p0 = ((n as f64) * class0_rate).round() as usize;
        let p1 = ((n as f64) * (1.0 - class0_rate)).round() as usize;
        [n - p0.min(n), p0.min(n), n - p1.min(n), p1.min(n)]
    }
}

pub fn split_counts(spec: &DatasetSpec) -> Result<SplitCounts> {
    spec.validate()?;
    Ok(SplitCounts {
        train: per_class_counts(spec.n_train_per_class, spec.train_correlation, false),
        valid: per_class_counts(spec.n_val_per_class, EVAL_PATCH_RATE, true),
        test: per_class_counts(spec.n_test_per_class, EVAL_PATCH_RATE, true),
    })
}

/// Image stored height × width × channels, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Boolean pixel map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: u8,
    pub group: GroupId,
    pub core_mask: Mask,
    pub spurious_mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl GroupedDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn group_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for s in self.split(split) {
            counts[s.group.index()] += 1;
        }
        counts
    }
}

/// Builds all three splits. Samples within a split are ordered by group;
/// each sample comes from its own substream keyed by (seed, split, index).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<GroupedDataset> {
    let counts = split_counts(spec)?;
    let build = |split: Split| -> Vec<Sample> {
        let per_group = counts.get(split);
        let mut out = Vec::with_capacity(per_group.iter().sum());
        for group in GroupId::ALL {
            for _ in 0..per_group[group.index()] {
                let index = out.len();
                out.push(generate_sample(spec, split, index, group));
            }
        }
        out
    };
    Ok(GroupedDataset {
        spec: spec.clone(),
        train: build(Split::Train),
        valid: build(Split::Valid),
        test: build(Split::Test),
    })
}

/// Renders one sample. Pure in its arguments; `spec` is assumed valid.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize, group: GroupId) -> Sample {
    let mut rng = seed::rng(
        spec.seed,
        &[seed::stream::DATA, split.stream_id(), index as u64],
    );
    let side = spec.image_size;
    let sidef = side as f64;
    let patch = spec.patch_size;

    // All random parameters are drawn unconditionally so the stream layout
    // does not depend on the group.
    let background = rng.random_range(BACKGROUND_RANGE.0..BACKGROUND_RANGE.1);
    let contrast = rng.random_range(CONTRAST_RANGE.0..CONTRAST_RANGE.1);
    let extent_frac = rng.random_range(EXTENT_RANGE.0..EXTENT_RANGE.1);
    let jitter_x: f64 = rng.random_range(-1.0..1.0);
    let jitter_y: f64 = rng.random_range(-1.0..1.0);
    let corner = rng.random_range(0..4u8);

    // Keep the shape inside the central band that no corner patch reaches.
    let half_room = (sidef - 2.0 * patch as f64) / 2.0;
    let extent = (extent_frac * sidef).min((half_room - 0.5).max(1.5));
    let slack = (half_room - extent).max(0.0);
    let cx = sidef / 2.0 + jitter_x * slack;
    let cy = sidef / 2.0 + jitter_y * slack;

    let mut core_mask = Mask::empty(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = if group.label() == 0 {
                dx * dx + dy * dy <= extent * extent
            } else {
                dx.abs() <= extent
                    && dy.abs() <= extent
                    && ((dx - dy).abs() <= CROSS_HALF_WIDTH * std::f64::consts::SQRT_2
                        || (dx + dy).abs() <= CROSS_HALF_WIDTH * std::f64::consts::SQRT_2)
            };
            core_mask.data[y * side + x] = inside;
        }
    }
    // The center pixel is always part of the shape.
    let (ccx, ccy) = (cx.floor() as usize, cy.floor() as usize);
    core_mask.data[ccy.min(side - 1) * side + ccx.min(side - 1)] = true;

    let mut spurious_mask = Mask::empty(side, side);
    if group.spurious() {
        let (y0, x0) = match corner {
            0 => (0, 0),
            1 => (0, side - patch),
            2 => (side - patch, 0),
            _ => (side - patch, side - patch),
        };
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                spurious_mask.data[y * side + x] = true;
            }
        }
    }
    for (c, s) in core_mask.data.iter_mut().zip(&spurious_mask.data) {
        *c &= !*s;
    }

    let mut image = Image::zeros(side, side, spec.channels);
    for p in 0..side * side {
        for c in 0..spec.channels {
            let clean = if spurious_mask.data[p] {
                patch_color(c, spec.channels)
            } else if core_mask.data[p] {
                background + contrast
            } else {
                background
            };
            let noise: f64 = rng.sample(StandardNormal);
            image.data[p * spec.channels + c] = (clean + spec.noise_sigma * noise).clamp(0.0, 1.0);
        }
    }

    Sample {
        image,
        label: group.label(),
        group,
        core_mask,
        spurious_mask,
    }
}

/// Saturated red; plain white for single-channel images.
fn patch_color(channel: usize, channels: usize) -> f64 {
    if channels == 1 || channel == 0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            image_size: 16,
            n_train_per_class: 20,
            n_val_per_class: 8,
            n_test_per_class: 8,
            patch_size: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn group_index_bijection() {
        assert_eq!(group_of(0, 0).unwrap().index(), 0);
        assert_eq!(group_of(0, 1).unwrap().index(), 1);
        assert_eq!(group_of(1, 0).unwrap().index(), 2);
        assert_eq!(group_of(1, 1).unwrap().index(), 3);
        for g in GroupId::ALL {
            assert_eq!(group_of(g.label(), g.spurious() as u8).unwrap(), g);
        }
        assert!(matches!(group_of(2, 0), Err(Error::Argument(_))));
        assert!(matches!(group_of(0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn train_counts_follow_correlation() {
        let spec = DatasetSpec {
            n_train_per_class: 200,
            train_correlation: 0.95,
            ..DatasetSpec::default()
        };
        let c = split_counts(&spec).unwrap();
        assert_eq!(c.train, [10, 190, 190, 10]);
    }

    #[test]
    fn eval_counts_floor_rounding() {
        let spec = DatasetSpec {
            n_val_per_class: 120,
            n_test_per_class: 101,
            ..DatasetSpec::default()
        };
        let c = split_counts(&spec).unwrap();
        assert_eq!(c.valid, [60, 60, 60, 60]);
        assert_eq!(c.test, [51, 50, 51, 50]);
    }

    #[test]
    fn zero_train_counts() {
        let spec = DatasetSpec {
            n_train_per_class: 0,
            ..DatasetSpec::default()
        };
        assert_eq!(split_counts(&spec).unwrap().train, [0; 4]);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = DatasetSpec {
            patch_size: 16,
            ..DatasetSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Spec { field: "patch_size", .. })));
        let bad = DatasetSpec {
            train_correlation: 1.5,
            ..DatasetSpec::default()
        };
        assert!(matches!(
            generate_dataset(&bad),
            Err(Error::Spec {
                field: "train_correlation",
                ..
            })
        ));
        let bad = DatasetSpec {
            noise_sigma: -1.0,
            ..DatasetSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Spec { field: "noise_sigma", .. })));
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn masks_are_consistent() {
        let ds = generate_dataset(&small_spec()).unwrap();
        for split in Split::ALL {
            for s in ds.split(split) {
                assert!(s.core_mask.count() >= 1);
                assert_eq!(!s.spurious_mask.is_empty(), s.group.spurious());
                assert!(s
                    .core_mask
                    .data
                    .iter()
                    .zip(&s.spurious_mask.data)
                    .all(|(c, p)| !(*c && *p)));
                assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(s.label, s.group.label());
            }
        }
        let counts = split_counts(&small_spec()).unwrap();
        for split in Split::ALL {
            assert_eq!(ds.group_counts(split), counts.get(split));
        }
    }

    #[test]
    fn patch_is_a_corner_square() {
        let spec = small_spec();
        let s = generate_sample(&spec, Split::Test, 3, GroupId::ALL[1]);
        let p = spec.patch_size;
        assert_eq!(s.spurious_mask.count(), p * p);
        let side = spec.image_size;
        let corners = [(0, 0), (0, side - 1), (side - 1, 0), (side - 1, side - 1)];
        assert!(corners
            .iter()
            .any(|&(y, x)| s.spurious_mask.data[y * side + x]));
    }

    #[test]
    fn sample_does_not_depend_on_generation_order() {
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        let again = generate_sample(&spec, Split::Valid, 5, ds.valid[5].group);
        assert_eq!(again, ds.valid[5]);
    }
}
