//! File formats: tensor containers, PNM heatmaps and JSON documents.

pub mod container;
pub mod pnm;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSpec, GroupId, GroupedDataset, Image, Mask, Sample, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::nn::{ConvStage, Encoder, Head, TrainedModel};
use container::{find, Tensor};

pub use container::{load_container, save_container};
pub use pnm::{export_heatmap, ExportMode};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn dims(t: &Tensor, rank: usize) -> Result<Vec<usize>> {
    if t.dims.len() != rank {
        return Err(Error::shape("tensor rank", rank, t.dims.len()));
    }
    t.dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} too large"))))
        .collect()
}

pub fn head_tensors(prefix: &str, head: &Head) -> Vec<Tensor> {
    vec![
        Tensor::vector(format!("{prefix}.weight"), head.weights.clone()),
        Tensor::vector(format!("{prefix}.bias"), vec![head.bias]),
    ]
}

pub fn head_from_tensors(entries: &[Tensor], prefix: &str) -> Result<Head> {
    let weights = find(entries, &format!("{prefix}.weight"))?.data.clone();
    let bias = find(entries, &format!("{prefix}.bias"))?;
    if bias.data.len() != 1 {
        return Err(Error::shape("head bias", 1, bias.data.len()));
    }
    Ok(Head {
        weights,
        bias: bias.data[0],
    })
}

pub fn model_tensors(model: &TrainedModel) -> Vec<Tensor> {
    let e = &model.encoder;
    let mut out = vec![Tensor::vector(
        "encoder.input",
        vec![e.image_size as f64, e.input_channels as f64],
    )];
    for (i, s) in e.stages.iter().enumerate() {
        out.push(Tensor {
            name: format!("encoder.stage{i}.weight"),
            dims: vec![s.out_channels as u64, s.in_channels as u64, 3, 3],
            data: s.weight.clone(),
        });
        out.push(Tensor::vector(format!("encoder.stage{i}.bias"), s.bias.clone()));
    }
    out.extend(head_tensors("head", &model.head));
    out
}

pub fn model_from_tensors(entries: &[Tensor]) -> Result<TrainedModel> {
    let input = find(entries, "encoder.input")?;
    if input.data.len() != 2 {
        return Err(Error::shape("encoder.input", 2, input.data.len()));
    }
    let (image_size, input_channels) = (input.data[0] as usize, input.data[1] as usize);
    let mut stages = Vec::new();
    while let Ok(w) = find(entries, &format!("encoder.stage{}.weight", stages.len())) {
        let d = dims(w, 4)?;
        let b = find(entries, &format!("encoder.stage{}.bias", stages.len()))?;
        if b.data.len() != d[0] || d[2] != 3 || d[3] != 3 {
            return Err(Error::shape("conv stage", format!("{d:?}"), b.data.len()));
        }
        stages.push(ConvStage {
            in_channels: d[1],
            out_channels: d[0],
            weight: w.data.clone(),
            bias: b.data.clone(),
        });
    }
    let widths: Vec<usize> = stages.iter().map(|s| s.out_channels).collect();
    let mut encoder = Encoder::zeros(image_size, input_channels, &widths)?;
    for (dst, src) in encoder.stages.iter_mut().zip(stages) {
        if dst.in_channels != src.in_channels {
            return Err(Error::shape("conv stage input", dst.in_channels, src.in_channels));
        }
        *dst = src;
    }
    TrainedModel::new(encoder, head_from_tensors(entries, "head")?)
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    save_container(path, &model_tensors(model))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    model_from_tensors(&load_container(path)?)
}

pub fn save_head(path: &Path, head: &Head) -> Result<()> {
    save_container(path, &head_tensors("head", head))
}

pub fn load_head(path: &Path) -> Result<Head> {
    head_from_tensors(&load_container(path)?, "head")
}

fn split_tensors(name: &str, samples: &[Sample], out: &mut Vec<Tensor>) {
    let n = samples.len() as u64;
    let (h, w, c) = samples
        .first()
        .map_or((0, 0, 0), |s| (s.image.height, s.image.width, s.image.channels));
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let bits = |m: &Mask| m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    out.push(Tensor {
        name: format!("{name}.images"),
        dims: vec![n, h, w, c],
        data: samples.iter().flat_map(|s| s.image.data.iter().copied()).collect(),
    });
    out.push(Tensor::vector(
        format!("{name}.groups"),
        samples.iter().map(|s| s.group.index() as f64).collect(),
    ));
    out.push(Tensor {
        name: format!("{name}.core_mask"),
        dims: vec![n, h, w],
        data: samples.iter().flat_map(|s| bits(&s.core_mask)).collect(),
    });
    out.push(Tensor {
        name: format!("{name}.spurious_mask"),
        dims: vec![n, h, w],
        data: samples.iter().flat_map(|s| bits(&s.spurious_mask)).collect(),
    });
}

fn split_from_tensors(entries: &[Tensor], name: &str) -> Result<Vec<Sample>> {
    let images = find(entries, &format!("{name}.images"))?;
    let d = dims(images, 4)?;
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    let groups = find(entries, &format!("{name}.groups"))?;
    let core = find(entries, &format!("{name}.core_mask"))?;
    let spurious = find(entries, &format!("{name}.spurious_mask"))?;
    if groups.data.len() != n || core.data.len() != n * h * w || spurious.data.len() != n * h * w {
        return Err(Error::shape("dataset split", n, groups.data.len()));
    }
    let mask = |t: &Tensor, i: usize| Mask {
        height: h,
        width: w,
        data: t.data[i * h * w..(i + 1) * h * w].iter().map(|&v| v != 0.0).collect(),
    };
    (0..n)
        .map(|i| {
            let group = GroupId::from_index(groups.data[i] as usize)?;
            Ok(Sample {
                image: Image {
                    height: h,
                    width: w,
                    channels: c,
                    data: images.data[i * h * w * c..(i + 1) * h * w * c].to_vec(),
                },
                label: group.label(),
                group,
                core_mask: mask(core, i),
                spurious_mask: mask(spurious, i),
            })
        })
        .collect()
}

pub fn dataset_tensors(ds: &GroupedDataset) -> Vec<Tensor> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        split_tensors(split.name(), ds.split(split), &mut out);
    }
    out
}

/// Writes the tensors to `path` and the generating spec next to it as JSON.
/// JSON written next to a dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub group_counts: SplitCounts,
}

pub fn save_dataset(path: &Path, ds: &GroupedDataset) -> Result<()> {
    save_container(path, &dataset_tensors(ds))?;
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        group_counts: SplitCounts {
            train: ds.group_counts(Split::Train),
            valid: ds.group_counts(Split::Valid),
            test: ds.group_counts(Split::Test),
        },
    };
    write_json(&path.with_extension("json"), &manifest)
}

pub fn load_dataset(path: &Path) -> Result<GroupedDataset> {
    let entries = load_container(path)?;
    let manifest: DatasetManifest = read_json(&path.with_extension("json"))?;
    let ds = GroupedDataset {
        spec: manifest.spec,
        train: split_from_tensors(&entries, Split::Train.name())?,
        valid: split_from_tensors(&entries, Split::Valid.name())?,
        test: split_from_tensors(&entries, Split::Test.name())?,
    };
    for split in [Split::Train, Split::Valid, Split::Test] {
        if ds.group_counts(split) != manifest.group_counts.get(split) {
            return Err(Error::Argument(format!(
                "{}: manifest group counts do not match the {} split",
                path.display(),
                split.name()
            )));
        }
    }
    Ok(ds)
}
