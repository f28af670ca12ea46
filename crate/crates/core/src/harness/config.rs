use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ans::Selection;
use crate::error::{Error, Result};
use crate::features::{AugmentConfig, Content};
use crate::fusion::ReadoutMode;
use crate::gat::GatOptions;
use crate::model::{GlobalInput, ModelConfig, Variant};

/// Every knob of a run. Serialised verbatim next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    /// Expected feature-map grid.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub iterations: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub variant: Variant,
    pub literal_eq3: bool,
    pub separate_softmax: bool,
    pub shared_weights: bool,
    pub feature_distance: bool,
    pub readout: ReadoutMode,
    pub global_input: GlobalInput,
    /// Width of `W'`; defaults to `channels`.
    pub attention_dim: Option<usize>,
    /// Global feature width; defaults to `channels`.
    pub global_dim: Option<usize>,
    pub attention_kernel: usize,
    /// Defaults to `[channels / 4, channels / 2, channels]`, at least 4 wide.
    pub backbone_widths: Option<Vec<usize>>,
    pub augment: AugmentConfig,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 16,
            m: 1,
            n: 3,
            height: 8,
            width: 8,
            channels: 64,
            iterations: 2,
            num_classes: 4,
            batch: 4,
            epochs: 200,
            lr0: 1e-5,
            seed: 0,
            dataset: None,
            variant: Variant::Full,
            literal_eq3: false,
            separate_softmax: false,
            shared_weights: false,
            feature_distance: false,
            readout: ReadoutMode::Mean,
            global_input: GlobalInput::Raw,
            attention_dim: None,
            global_dim: None,
            attention_kernel: 7,
            backbone_widths: None,
            augment: AugmentConfig::default(),
            eval_every: 1,
        }
    }
}

impl RunConfig {
    /// Settings for from-scratch training on the synthetic task on one CPU
    /// core: a narrower backbone, a larger step size and a shorter schedule.
    pub fn desk() -> Self {
        Self { channels: 16, epochs: 30, lr0: 0.05, ..Self::default() }
    }

    /// `(k, m, n)` after applying a node-count sweep variant.
    pub fn selection(&self) -> Selection {
        let k = match self.variant {
            Variant::KSweep(k) => k,
            _ => self.k,
        };
        Selection::new(k, self.m, self.n)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.backbone_widths.clone().unwrap_or_else(|| {
            let c = self.channels;
            vec![(c / 4).max(4), (c / 2).max(4), c]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.selection().validate(self.height * self.width)?;
        if self.batch == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch, epochs and eval_every must be positive".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive and finite, got {}", self.lr0));
        }
        if !(1..=4).contains(&self.iterations) {
            return bad(format!("iterations must be in 1..=4, got {}", self.iterations));
        }
        if self.channels == 0 || self.num_classes < 2 {
            return bad("channels must be positive and num_classes at least 2".into());
        }
        if self.attention_kernel % 2 == 0 {
            return bad(format!("attention kernel must be odd, got {}", self.attention_kernel));
        }
        if self.widths().last() != Some(&self.channels) || self.widths().contains(&0) {
            return bad(format!("backbone widths {:?} must be positive and end at channels {}", self.widths(), self.channels));
        }
        for p in [self.augment.flip_p, self.augment.erase_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("augmentation probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn gat_options(&self) -> GatOptions {
        GatOptions {
            iterations: self.iterations,
            separate_softmax: self.separate_softmax,
            shared_weights: self.shared_weights,
            literal_eq3: self.literal_eq3,
            uniform_attention: false,
        }
    }

    pub fn model_config(&self, content: Content, in_channels: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            selection: self.selection(),
            channels: self.channels,
            num_classes: self.num_classes,
            gat: self.gat_options(),
            attention_dim: self.attention_dim.unwrap_or(self.channels),
            global_dim: self.global_dim.unwrap_or(self.channels),
            readout: self.readout,
            feature_distance: self.feature_distance,
            global_input: self.global_input,
            content,
            in_channels,
            backbone_widths: self.widths(),
            attention_kernel: self.attention_kernel,
        }
    }
}
