//! Inputs to the graph model: image pairs and the per-modality feature maps
//! derived from them.

mod augment;
mod backbone;
mod store;
mod synth;

pub use augment::{augment, flip_horizontal, AugmentConfig};
pub use backbone::{backbone, register_backbone, total_stride};
pub use store::{
    load_dataset, save_dataset, Content, Dataset, Manifest, Normalization, SampleEntry, Split, BLOB_FILE,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use synth::{synth_generate, Planted, PlantedCells, SynthConfig, PLANTED_FILE};

use crate::diff::Tensor;
use crate::error::{shape_err, Result};
use crate::Modality;

/// One labelled input pair. Both arrays are (C, H, W): 3-channel images, or
/// precomputed feature maps when the dataset stores features.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: usize,
    pub label: usize,
    pub rgb: Tensor,
    pub depth: Tensor,
}

impl SamplePair {
    pub fn get(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
        }
    }

    pub fn get_mut(&mut self, modality: Modality) -> &mut Tensor {
        match modality {
            Modality::Rgb => &mut self.rgb,
            Modality::Depth => &mut self.depth,
        }
    }
}

/// Stacks one modality of `samples` into (B, C, H, W), standardising each
/// channel when statistics are given.
pub fn stack(samples: &[&SamplePair], modality: Modality, norm: Option<&Normalization>) -> Result<Tensor> {
    let first = samples.first().map(|s| s.get(modality).shape().to_vec()).unwrap_or_default();
    let &[c, h, w] = first.as_slice() else {
        return Err(shape_err("stack", format!("sample shape {first:?}")));
    };
    let plane = h * w;
    let mut data = Vec::with_capacity(samples.len() * c * plane);
    for s in samples {
        let x = s.get(modality);
        if x.shape() != first {
            return Err(shape_err("stack", format!("{:?} vs {first:?}", x.shape())));
        }
        match norm {
            None => data.extend_from_slice(x.data()),
            Some(n) => {
                let (mean, std) = n.stats(modality);
                for ch in 0..c {
                    let (m, sd) = (mean[ch], std[ch]);
                    data.extend(x.data()[ch * plane..(ch + 1) * plane].iter().map(|v| (v - m) / sd));
                }
            }
        }
    }
    Tensor::new(vec![samples.len(), c, h, w], data)
}
