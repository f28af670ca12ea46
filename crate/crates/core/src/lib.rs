//! Dynamic-graph RGB-D scene classification at desk scale.
//!
//! The pipeline runs two feature maps (appearance and geometry) through
//! attention-driven node selection, builds a sparse two-level graph per
//! sample, refines node states with graph attention, and fuses pooled global
//! features with the graph readout for classification. Everything is
//! differentiated by the small reverse-mode engine in [`diff`].

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod ans;
pub mod diff;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gat;
pub mod graph;
pub mod harness;
pub mod model;
pub mod par;

pub use error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Depth,
            Modality::Depth => Modality::Rgb,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
