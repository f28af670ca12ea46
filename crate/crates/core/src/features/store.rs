//! On-disk datasets: a JSON manifest next to one raw blob of little-endian
//! f32 values.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::Modality;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";
const DTYPE: &str = "f32-le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    /// 3-channel images that go through the backbone.
    Images,
    /// Feature maps used as they are.
    Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub rgb_mean: Vec<f64>,
    pub rgb_std: Vec<f64>,
    pub depth_mean: Vec<f64>,
    pub depth_std: Vec<f64>,
}

impl Normalization {
    pub fn stats(&self, modality: Modality) -> (&[f64], &[f64]) {
        match modality {
            Modality::Rgb => (&self.rgb_mean, &self.rgb_std),
            Modality::Depth => (&self.depth_mean, &self.depth_std),
        }
    }

    /// Statistics of `samples`; a zero deviation is replaced by 1.
    pub fn compute<'a>(samples: impl Iterator<Item = &'a SamplePair> + Clone) -> Option<Self> {
        let per = |m: Modality| -> Option<(Vec<f64>, Vec<f64>)> {
            let first = samples.clone().next()?.get(m);
            let c = first.shape()[0];
            let plane = first.len() / c;
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            let mut count = 0usize;
            for s in samples.clone() {
                for (ch, chunk) in s.get(m).data().chunks(plane).enumerate() {
                    sum[ch] += chunk.iter().sum::<f64>();
                    sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
                }
                count += plane;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let var = (q / count as f64 - m * m).max(0.0);
                    if var > 0.0 { var.sqrt() } else { 1.0 }
                })
                .collect();
            Some((mean, std))
        };
        let (rgb_mean, rgb_std) = per(Modality::Rgb)?;
        let (depth_mean, depth_std) = per(Modality::Depth)?;
        Some(Self { rgb_mean, rgb_std, depth_mean, depth_std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    /// Byte offsets into the blob.
    pub rgb_offset: u64,
    pub depth_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub content: Content,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub blob: String,
    pub normalization: Option<Normalization>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    /// Bytes in one modality array of one sample.
    pub fn array_bytes(&self) -> u64 {
        (self.channels * self.height * self.width * 4) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SamplePair>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset, computing normalisation from the training split.
    pub fn new(content: Content, num_classes: usize, samples: Vec<SamplePair>, splits: Vec<Split>) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("dataset"))?;
        let &[channels, height, width] = first.rgb.shape() else {
            return Err(Error::Store(format!("sample arrays must be (C,H,W), got {:?}", first.rgb.shape())));
        };
        if splits.len() != samples.len() {
            return Err(Error::Store("one split tag per sample required".into()));
        }
        for s in &samples {
            if s.rgb.shape() != first.rgb.shape() || s.depth.shape() != first.rgb.shape() {
                return Err(Error::Store(format!("sample {} has mismatched array shapes", s.id)));
            }
            if s.label >= num_classes {
                return Err(Error::Label { label: s.label, num_classes });
            }
        }
        let train = samples.iter().zip(&splits).filter(|(_, &sp)| sp == Split::Train).map(|(s, _)| s);
        let normalization = match content {
            Content::Images => Normalization::compute(train),
            Content::Features => None,
        };
        let bytes = (channels * height * width * 4) as u64;
        let entries = samples
            .iter()
            .zip(&splits)
            .enumerate()
            .map(|(i, (s, &split))| SampleEntry {
                id: s.id,
                label: s.label,
                split,
                rgb_offset: 2 * i as u64 * bytes,
                depth_offset: (2 * i as u64 + 1) * bytes,
            })
            .collect();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            dtype: DTYPE.into(),
            content,
            channels,
            height,
            width,
            num_classes,
            blob: BLOB_FILE.into(),
            normalization,
            samples: entries,
        };
        Ok(Self { manifest, samples, splits })
    }

    pub fn split(&self, split: Split) -> Vec<&SamplePair> {
        self.samples.iter().zip(&self.splits).filter(|(_, &s)| s == split).map(|(s, _)| s).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Writes `manifest.json` and `data.bin` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &data.manifest;
    let total = m.samples.iter().map(|e| e.rgb_offset.max(e.depth_offset) + m.array_bytes()).max().unwrap_or(0);
    let mut blob = vec![0u8; total as usize];
    for (entry, s) in m.samples.iter().zip(&data.samples) {
        for (offset, x) in [(entry.rgb_offset, &s.rgb), (entry.depth_offset, &s.depth)] {
            let o = offset as usize;
            for (i, v) in x.data().iter().enumerate() {
                LittleEndian::write_f32(&mut blob[o + 4 * i..o + 4 * i + 4], *v as f32);
            }
        }
    }
    fs::write(dir.join(&m.blob), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Reads a dataset directory, validating the manifest against the blob
/// before any sample is decoded.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Store(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(MANIFEST_VERSION)) {
        return Err(Error::Store(format!("unsupported manifest version {version:?}, expected {MANIFEST_VERSION}")));
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    if manifest.dtype != DTYPE {
        return Err(Error::Store(format!("unsupported element type `{}`", manifest.dtype)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let bytes = manifest.array_bytes();
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(2 * manifest.samples.len());
    for e in &manifest.samples {
        for off in [e.rgb_offset, e.depth_offset] {
            if off % 4 != 0 || off + bytes > blob.len() as u64 {
                return Err(Error::Store(format!(
                    "sample {} array at byte {off} runs past the {}-byte blob",
                    e.id,
                    blob.len()
                )));
            }
            spans.push((off, off + bytes));
        }
        if e.label >= manifest.num_classes {
            return Err(Error::Label { label: e.label, num_classes: manifest.num_classes });
        }
    }
    spans.sort_unstable();
    if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
        return Err(Error::Store(format!("blob ranges {:?} and {:?} overlap", w[0], w[1])));
    }
    let shape = [manifest.channels, manifest.height, manifest.width];
    let read = |off: u64| {
        let o = off as usize;
        let vals = blob[o..o + bytes as usize].chunks_exact(4).map(|c| f64::from(LittleEndian::read_f32(c))).collect();
        Tensor::new(shape.to_vec(), vals)
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        samples.push(SamplePair { id: e.id, label: e.label, rgb: read(e.rgb_offset)?, depth: read(e.depth_offset)? });
        splits.push(e.split);
    }
    Ok(Dataset { manifest, samples, splits })
}
