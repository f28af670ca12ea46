use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::diff::{Prng, Tensor};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub erase_p: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_p: 0.5, erase_p: 0.5, erase_area: (0.02, 0.2) }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip_p: 0.0, erase_p: 0.0, ..Self::default() }
    }
}

/// Mirrors a (C, H, W) array along W.
pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    let w = s[s.len() - 1];
    let src = x.data();
    Tensor::new(
        s.to_vec(),
        (0..src.len()).map(|i| src[i - i % w + (w - 1 - i % w)]).collect(),
    )
    .expect("same shape")
}

fn erase(x: &mut Tensor, top: usize, left: usize, eh: usize, ew: usize) {
    let &[c, h, w] = x.shape() else { return };
    let plane = h * w;
    for ch in 0..c {
        let data = &mut x.data_mut()[ch * plane..(ch + 1) * plane];
        let mean = data.iter().sum::<f64>() / plane as f64;
        for r in top..top + eh {
            data[r * w + left..r * w + left + ew].fill(mean);
        }
    }
}

/// Joint horizontal flip and random erasing, each with its own probability.
/// Both modalities receive the same flip decision and erase rectangle.
pub fn augment(sample: &SamplePair, rng: &mut Prng, cfg: &AugmentConfig) -> SamplePair {
    let mut out = sample.clone();
    if rng.bernoulli(cfg.flip_p) {
        for m in Modality::BOTH {
            *out.get_mut(m) = flip_horizontal(sample.get(m));
        }
    }
    if rng.bernoulli(cfg.erase_p) {
        let s = sample.rgb.shape();
        let (h, w) = (s[1], s[2]);
        let area = rng.uniform(cfg.erase_area.0, cfg.erase_area.1) * (h * w) as f64;
        let aspect = rng.uniform(0.3f64.ln(), (1.0f64 / 0.3).ln()).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        for m in Modality::BOTH {
            erase(out.get_mut(m), top, left, eh, ew);
        }
    }
    out
}
