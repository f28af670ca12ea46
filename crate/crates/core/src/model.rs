//! Variant wiring of the full pipeline:
//! features -> node selection -> graph -> attention updates -> fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ans::{self, NodeLayout, NodeSet, Selection};
use crate::diff::{ParameterStore, Prng, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::features::{self, Content, Normalization, SamplePair};
use crate::fusion::{self, LossTerm, ReadoutMode};
use crate::gat::{self, GatOptions, GraphMasks};
use crate::graph::{DynamicGraph, Metric};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    OnlyRgb,
    OnlyDepth,
    RgbGraph,
    DepthGraph,
    SimpleFusion,
    NoGnn,
    NoAttention,
    KSweep(usize),
}

pub const SWEEP_KS: [usize; 5] = [4, 9, 16, 25, 36];

impl Variant {
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Variant::OnlyRgb | Variant::RgbGraph => &[Modality::Rgb],
            Variant::OnlyDepth | Variant::DepthGraph => &[Modality::Depth],
            _ => &Modality::BOTH,
        }
    }

    /// Whether nodes are selected at all.
    pub fn selects_nodes(self) -> bool {
        !matches!(self, Variant::OnlyRgb | Variant::OnlyDepth | Variant::SimpleFusion)
    }

    pub fn uses_graph(self) -> bool {
        self.selects_nodes() && self != Variant::NoGnn
    }

    /// Single global head without a fusion classifier.
    pub fn global_only(self) -> bool {
        matches!(self, Variant::OnlyRgb | Variant::OnlyDepth)
    }

    /// The variants of the standard ablation table.
    pub fn ablation_set() -> Vec<Variant> {
        let mut v = vec![
            Variant::Full,
            Variant::OnlyRgb,
            Variant::OnlyDepth,
            Variant::RgbGraph,
            Variant::DepthGraph,
            Variant::SimpleFusion,
            Variant::NoGnn,
            Variant::NoAttention,
        ];
        v.extend(SWEEP_KS.iter().map(|&k| Variant::KSweep(k)));
        v
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::OnlyRgb => "only-rgb",
            Variant::OnlyDepth => "only-depth",
            Variant::RgbGraph => "rgb-graph",
            Variant::DepthGraph => "depth-graph",
            Variant::SimpleFusion => "simple-fusion",
            Variant::NoGnn => "no-gnn",
            Variant::NoAttention => "no-attention",
            Variant::KSweep(k) => return write!(f, "k-sweep:{k}"),
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "only-rgb" => Variant::OnlyRgb,
            "only-depth" => Variant::OnlyDepth,
            "rgb-graph" => Variant::RgbGraph,
            "depth-graph" => Variant::DepthGraph,
            "simple-fusion" => Variant::SimpleFusion,
            "no-gnn" => Variant::NoGnn,
            "no-attention" => Variant::NoAttention,
            _ => {
                let k = s
                    .strip_prefix("k-sweep:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))?;
                Variant::KSweep(k)
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which map feeds the global heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalInput {
    #[default]
    Raw,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub selection: Selection,
    pub channels: usize,
    pub num_classes: usize,
    pub gat: GatOptions,
    pub attention_dim: usize,
    pub global_dim: usize,
    pub readout: ReadoutMode,
    pub feature_distance: bool,
    pub global_input: GlobalInput,
    pub content: Content,
    pub in_channels: usize,
    /// Backbone block widths; the last must equal `channels`.
    pub backbone_widths: Vec<usize>,
    pub attention_kernel: usize,
}

/// Everything produced by one forward pass.
pub struct Forward {
    /// Logits used for prediction.
    pub logits: Var,
    pub loss_terms: Vec<(LossTerm, Var)>,
    /// Per selected modality, one layout per batch element.
    pub layouts: Vec<(Modality, Vec<NodeLayout>)>,
    pub graphs: Vec<DynamicGraph>,
    pub alphas: Vec<(Var, Var)>,
    /// Final node states (B, N, C) when the graph runs.
    pub nodes: Option<Var>,
    /// Initial node states, for sensitivity checks.
    pub initial_nodes: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.num_classes < 2 || cfg.global_dim == 0 || cfg.attention_dim == 0 {
            return Err(Error::Config("channels, attention and global widths must be positive, classes >= 2".into()));
        }
        if cfg.content == Content::Images && cfg.backbone_widths.last() != Some(&cfg.channels) {
            return Err(Error::Config(format!(
                "last backbone width {:?} must equal channels {}",
                cfg.backbone_widths.last(),
                cfg.channels
            )));
        }
        if cfg.attention_kernel % 2 == 0 {
            return Err(Error::Config("attention kernel size must be odd".into()));
        }
        let s = cfg.selection;
        if s.m == 0 || s.n == 0 || s.m + s.n > s.k {
            return Err(Error::Config(format!("invalid selection k={} m={} n={}", s.k, s.m, s.n)));
        }
        if !(1..=4).contains(&cfg.gat.iterations) {
            return Err(Error::Config(format!("iterations must be in 1..=4, got {}", cfg.gat.iterations)));
        }
        Ok(Self { cfg })
    }

    fn slots(&self) -> usize {
        self.cfg.variant.modalities().len()
    }

    fn local_width(&self) -> usize {
        let v = self.cfg.variant;
        if v.uses_graph() {
            self.cfg.readout.width(self.cfg.channels, self.slots(), self.cfg.selection)
        } else if v.selects_nodes() {
            self.slots() * self.cfg.selection.k * self.cfg.channels
        } else {
            0
        }
    }

    /// Fresh parameters, registered in a fixed order from one seeded stream.
    pub fn init(&self, seed: u64) -> ParameterStore {
        let c = &self.cfg;
        let mut rng = Prng::new(seed);
        let mut store = ParameterStore::new();
        let mods = c.variant.modalities();
        for &m in mods {
            if c.content == Content::Images {
                features::register_backbone(&mut store, m, c.in_channels, &c.backbone_widths, &mut rng);
            }
            fusion::register_global_head(&mut store, m, c.channels, c.global_dim, c.num_classes, &mut rng);
            if c.variant.selects_nodes() {
                ans::register_params(&mut store, m, c.attention_kernel, &mut rng);
            }
        }
        if c.variant.uses_graph() {
            gat::register_params(&mut store, c.channels, c.attention_dim, mods, c.gat.shared_weights, &mut rng);
        }
        if !c.variant.global_only() {
            let width = mods.len() * c.global_dim + self.local_width();
            fusion::register_linear(&mut store, fusion::FUSE, width, c.num_classes, &mut rng);
        }
        store
    }

    fn feature_map(&self, tape: &mut Tape, store: &ParameterStore, x: Var, m: Modality) -> Result<Var> {
        let f = match self.cfg.content {
            Content::Images => features::backbone(tape, store, m, x, self.cfg.backbone_widths.len())?,
            Content::Features => x,
        };
        if tape.shape(f)[1] != self.cfg.channels {
            return Err(shape_err("feature map", format!("{:?} for {} channels", tape.shape(f), self.cfg.channels)));
        }
        Ok(f)
    }

    /// Runs the variant on a batch. `maps` may replace the backbone output
    /// per modality, which the gradient checks and sensitivity tests use.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        samples: &[&SamplePair],
        norm: Option<&Normalization>,
    ) -> Result<Forward> {
        let mut maps = Vec::new();
        for &m in self.cfg.variant.modalities() {
            let x = tape.input(features::stack(samples, m, norm)?);
            maps.push((m, self.feature_map(tape, store, x, m)?));
        }
        self.forward_maps(tape, store, &maps)
    }

    /// Runs the variant from per-modality feature maps (B, C, H, W).
    pub fn forward_maps(&self, tape: &mut Tape, store: &ParameterStore, maps: &[(Modality, Var)]) -> Result<Forward> {
        let c = &self.cfg;
        let v = c.variant;
        let mut globals = Vec::new();
        let mut terms = Vec::new();
        let mut node_sets: Vec<NodeSet> = Vec::new();
        for &(m, f) in maps {
            let mut head_input = f;
            if v.selects_nodes() {
                let sa = ans::attention_map(tape, f, store, m)?;
                let enhanced = ans::enhance(tape, f, sa)?;
                node_sets.push(ans::select_nodes(tape, enhanced, sa, c.selection, m)?);
                if c.global_input == GlobalInput::Enhanced {
                    head_input = enhanced;
                }
            }
            let (g, logits) = fusion::global_head(tape, store, m, head_input)?;
            globals.push(g);
            terms.push((if m == Modality::Rgb { LossTerm::RgbGlobal } else { LossTerm::DepthGlobal }, logits));
        }
        let layouts = node_sets.iter().map(|ns| (ns.modality, ns.layouts.clone())).collect();
        if v.global_only() {
            return Ok(Forward {
                logits: terms[0].1,
                loss_terms: terms,
                layouts,
                graphs: Vec::new(),
                alphas: Vec::new(),
                nodes: None,
                initial_nodes: None,
            });
        }
        let mut graphs = Vec::new();
        let mut alphas = Vec::new();
        let mut nodes = None;
        let mut initial_nodes = None;
        let mut parts = globals;
        if v.uses_graph() {
            graphs = self.build_graphs(tape, &node_sets)?;
            let masks = GraphMasks::new(&graphs, c.gat.shared_weights)?;
            let feats: Vec<Var> = node_sets.iter().map(|ns| ns.features).collect();
            let h0 = if feats.len() == 1 { feats[0] } else { tape.concat(&feats, 1)? };
            let mut opts = c.gat;
            opts.uniform_attention |= v == Variant::NoAttention;
            let out = gat::run(tape, store, h0, &masks, &opts)?;
            parts.push(fusion::readout(tape, out.h, node_sets.len(), c.selection, c.readout)?);
            alphas = out.alphas;
            nodes = Some(out.h);
            initial_nodes = Some(h0);
        } else if v.selects_nodes() {
            let mut flat = Vec::new();
            for ns in &node_sets {
                let bs = tape.shape(ns.features)[0];
                flat.push(tape.reshape(ns.features, &[bs, c.selection.k * c.channels])?);
            }
            parts.push(if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 1)? });
        }
        let (_, logits) = fusion::fuse(tape, store, &parts)?;
        terms.push((LossTerm::Local, logits));
        Ok(Forward { logits, loss_terms: terms, layouts, graphs, alphas, nodes, initial_nodes })
    }

    fn build_graphs(&self, tape: &Tape, node_sets: &[NodeSet]) -> Result<Vec<DynamicGraph>> {
        let sel = self.cfg.selection;
        let bs = node_sets[0].layouts.len();
        let c = self.cfg.channels;
        let values: Vec<&[f64]> = node_sets.iter().map(|ns| tape.value(ns.features).data()).collect();
        (0..bs)
            .map(|b| {
                let parts: Vec<(Modality, &NodeLayout, Metric)> = node_sets
                    .iter()
                    .zip(&values)
                    .map(|(ns, vals)| {
                        let metric = if self.cfg.feature_distance {
                            Metric::Feature { features: &vals[b * sel.k * c..(b + 1) * sel.k * c], dim: c }
                        } else {
                            Metric::Grid
                        };
                        (ns.modality, &ns.layouts[b], metric)
                    })
                    .collect();
                DynamicGraph::assemble(&parts, sel)
            })
            .collect()
    }
}
