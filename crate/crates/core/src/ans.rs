//! Adaptive node selection.
//!
//! A CBAM-style spatial attention map scores every grid cell of a modality's
//! feature map; the map enhances the features residually, and the `k`
//! highest-scoring cells become graph nodes, grouped into three levels by
//! rank.

use serde::{Deserialize, Serialize};

use crate::diff::{ParameterStore, Prng, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::Modality;

/// Importance level of a selected node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    MainCentral,
    SubCentral,
    Leaf,
}

/// Node counts: `k` selected, the top `m` main-central, the next `n`
/// sub-central, the rest leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    pub m: usize,
    pub n: usize,
}

impl Selection {
    pub fn new(k: usize, m: usize, n: usize) -> Self {
        Self { k, m, n }
    }

    pub fn validate(&self, cells: usize) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config(format!("m and n must be >= 1 (m={}, n={})", self.m, self.n)));
        }
        if self.m + self.n > self.k {
            return Err(Error::Config(format!("m + n = {} exceeds k = {}", self.m + self.n, self.k)));
        }
        if self.k > cells {
            return Err(Error::Config(format!("k = {} exceeds the {cells} grid cells", self.k)));
        }
        Ok(())
    }

    pub fn leaves(&self) -> usize {
        self.k - self.m - self.n
    }

    /// Level of the node at zero-based rank `r`.
    pub fn level(&self, r: usize) -> Level {
        if r < self.m {
            Level::MainCentral
        } else if r < self.m + self.n {
            Level::SubCentral
        } else {
            Level::Leaf
        }
    }
}

/// Per-sample selection result, in rank order (entry 0 is rank 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLayout {
    /// Grid coordinates (row, col).
    pub positions: Vec<(usize, usize)>,
    /// Row-major cell indices.
    pub cells: Vec<usize>,
    pub attention: Vec<f64>,
    pub levels: Vec<Level>,
}

impl NodeLayout {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn count(&self, level: Level) -> usize {
        self.levels.iter().filter(|&&l| l == level).count()
    }

    /// Builds a layout from explicit positions already in rank order.
    pub fn from_positions(positions: &[(usize, usize)], width: usize, sel: Selection) -> Self {
        Self {
            positions: positions.to_vec(),
            cells: positions.iter().map(|&(r, c)| r * width + c).collect(),
            attention: (0..positions.len()).map(|i| 1.0 - i as f64 / (positions.len() as f64 + 1.0)).collect(),
            levels: (0..positions.len()).map(|i| sel.level(i)).collect(),
        }
    }
}

/// Selected nodes of one modality for a batch.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub modality: Modality,
    /// (B, k, C) node features gathered from the enhanced map.
    pub features: Var,
    pub layouts: Vec<NodeLayout>,
    pub selection: Selection,
}

pub fn conv_weight_name(modality: Modality) -> String {
    format!("ans.{}.conv.weight", modality.name())
}

pub fn conv_bias_name(modality: Modality) -> String {
    format!("ans.{}.conv.bias", modality.name())
}

/// Registers the 2 -> 1 attention convolution for one modality.
pub fn register_params(store: &mut ParameterStore, modality: Modality, kernel: usize, rng: &mut Prng) {
    let fan = kernel * kernel;
    store.insert_glorot(conv_weight_name(modality), &[1, 2, kernel, kernel], 2 * fan, fan, rng);
    store.insert_zeros(conv_bias_name(modality), &[1]);
}

/// sigmoid(conv(concat(mean_c F, max_c F))) -> (B,1,H,W)
pub fn attention_map(tape: &mut Tape, features: Var, store: &ParameterStore, modality: Modality) -> Result<Var> {
    let pooled = tape.channel_pool(features)?;
    let w = tape.param(store, &conv_weight_name(modality))?;
    let b = tape.param(store, &conv_bias_name(modality))?;
    let kernel = tape.shape(w)[2];
    let logits = tape.conv2d(pooled, w, b, (kernel - 1) / 2)?;
    tape.sigmoid(logits)
}

/// F * SA + F, with SA broadcast over channels.
pub fn enhance(tape: &mut Tape, features: Var, attention: Var) -> Result<Var> {
    let (fs, ss) = (tape.shape(features), tape.shape(attention));
    if fs.len() != 4 || ss.len() != 4 || ss[1] != 1 || fs[0] != ss[0] || fs[2..] != ss[2..] {
        return Err(shape_err("enhance", format!("features {fs:?} attention {ss:?}")));
    }
    let scaled = tape.mul(features, attention)?;
    tape.add(scaled, features)
}

/// Indices of the `k` largest values, descending, ties to the smaller index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Picks the top-`k` attention cells of every batch element and gathers
/// their rows from the enhanced map reshaped to (B, H*W, C).
pub fn select_nodes(
    tape: &mut Tape,
    enhanced: Var,
    attention: Var,
    sel: Selection,
    modality: Modality,
) -> Result<NodeSet> {
    let &[bs, c, h, w] = tape.shape(enhanced) else {
        return Err(shape_err("select_nodes", format!("{:?}", tape.shape(enhanced))));
    };
    if tape.shape(attention) != [bs, 1, h, w] {
        return Err(shape_err("select_nodes", format!("attention {:?}", tape.shape(attention))));
    }
    sel.validate(h * w)?;
    let hw = h * w;
    let sa = tape.value(attention).data().to_vec();
    let layouts: Vec<NodeLayout> = (0..bs)
        .map(|b| {
            let vals = &sa[b * hw..(b + 1) * hw];
            let cells = top_k(vals, sel.k);
            NodeLayout {
                positions: cells.iter().map(|&i| (i / w, i % w)).collect(),
                attention: cells.iter().map(|&i| vals[i]).collect(),
                levels: (0..sel.k).map(|r| sel.level(r)).collect(),
                cells,
            }
        })
        .collect();
    let flat = tape.reshape(enhanced, &[bs, c, hw])?;
    let rows = tape.permute(flat, &[0, 2, 1])?;
    let indices: Vec<Vec<usize>> = layouts.iter().map(|l| l.cells.clone()).collect();
    let features = tape.gather_rows(rows, &indices)?;
    Ok(NodeSet { modality, features, layouts, selection: sel })
}
