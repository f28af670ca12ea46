//! Graph attention over the dynamic graph.
//!
//! One iteration computes, for every target node `i`,
//!
//! ```text
//! e_ij = w1 . W'h_i + w2 . W'h_j        (w = [w1; w2])
//! a_ij = softmax over j in N(i) of e_ij
//! h_i <- relu(h_i + sum_j a_ij W_kind h_j)
//! ```
//!
//! with `W_kind` chosen by the target's modality and whether the edge is
//! intra- or inter-modality. The whole batch is handled densely: node
//! states are (B, N, C) and neighbourhoods are (B, N, N) masks. Updates are
//! synchronous, so every node reads the previous iteration's states.

use serde::{Deserialize, Serialize};

use crate::diff::{ParameterStore, Prng, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph::{DynamicGraph, EdgeKind};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct GatOptions {
    pub iterations: usize,
    /// Normalise intra and inter neighbours with separate softmaxes.
    pub separate_softmax: bool,
    /// One `W` for every modality and edge kind.
    pub shared_weights: bool,
    /// Intra messages project the target's own state, weighted by the
    /// summed coefficients, instead of the neighbours' states.
    pub literal_eq3: bool,
    /// Fixed `1/|N(i)|` coefficients.
    pub uniform_attention: bool,
}

impl Default for GatOptions {
    fn default() -> Self {
        Self {
            iterations: 2,
            separate_softmax: false,
            shared_weights: false,
            literal_eq3: false,
            uniform_attention: false,
        }
    }
}

pub const PROJ: &str = "gat.attn.proj";
pub const VECTOR: &str = "gat.attn.vector";

pub fn weight_name(target: Modality, intra: bool, shared: bool) -> String {
    if shared {
        "gat.w.shared".to_string()
    } else {
        format!("gat.w.{}.{}", target.name(), if intra { "intra" } else { "inter" })
    }
}

/// Registers `W'` (C x C'), `w` (2C' x 1) and the message matrices.
pub fn register_params(
    store: &mut ParameterStore,
    channels: usize,
    attention_dim: usize,
    modalities: &[Modality],
    shared: bool,
    rng: &mut Prng,
) {
    store.insert_glorot(PROJ, &[channels, attention_dim], channels, attention_dim, rng);
    store.insert_glorot(VECTOR, &[2 * attention_dim, 1], 2 * attention_dim, 1, rng);
    for &m in modalities {
        for intra in [true, false] {
            let name = weight_name(m, intra, shared);
            if !store.contains(&name) {
                store.insert_glorot(name, &[channels, channels], channels, channels, rng);
            }
        }
    }
}

/// One message channel: edges of one class arriving at one modality's nodes.
#[derive(Clone, Debug)]
pub struct MessageKind {
    pub target: Modality,
    pub intra: bool,
    pub weight: String,
    /// (B, N, N) 0/1 mask.
    pub mask: Tensor,
}

/// Dense neighbourhood masks for a batch of graphs with equal layouts.
#[derive(Clone, Debug)]
pub struct GraphMasks {
    pub batch: usize,
    pub nodes: usize,
    pub union: Vec<bool>,
    pub intra: Vec<bool>,
    pub inter: Vec<bool>,
    pub kinds: Vec<MessageKind>,
}

impl GraphMasks {
    pub fn new(graphs: &[DynamicGraph], shared_weights: bool) -> Result<Self> {
        let first = graphs.first().ok_or(Error::Empty("graph batch"))?;
        let nodes = first.node_count();
        if graphs.iter().any(|g| g.modalities != first.modalities || g.node_count() != nodes) {
            return Err(Error::Config("graphs in a batch must share modalities and node count".into()));
        }
        let cat = |f: &dyn Fn(&DynamicGraph) -> Vec<bool>| graphs.iter().flat_map(f).collect::<Vec<bool>>();
        let union = cat(&|g| g.mask(|_| true));
        let intra = cat(&|g| g.mask(EdgeKind::is_intra));
        let inter = cat(&|g| g.mask(|k| k == EdgeKind::Inter));
        let k = first.selection.k;
        let mut kinds = Vec::new();
        for (slot, &target) in first.modalities.iter().enumerate() {
            for intra_kind in [true, false] {
                if !intra_kind && first.modalities.len() < 2 {
                    continue;
                }
                let src = if intra_kind { &intra } else { &inter };
                let data = src
                    .iter()
                    .enumerate()
                    .map(|(idx, &on)| {
                        let row = (idx / nodes) % nodes;
                        f64::from(u8::from(on && row / k == slot))
                    })
                    .collect();
                kinds.push(MessageKind {
                    target,
                    intra: intra_kind,
                    weight: weight_name(target, intra_kind, shared_weights),
                    mask: Tensor::new(vec![graphs.len(), nodes, nodes], data)?,
                });
            }
        }
        Ok(Self { batch: graphs.len(), nodes, union, intra, inter, kinds })
    }
}

/// Attention logits `e` (B, N, N) for every ordered node pair.
pub fn attention_logits(tape: &mut Tape, store: &ParameterStore, h: Var) -> Result<Var> {
    let &[bs, n, c] = tape.shape(h) else {
        return Err(shape_err("attention_logits", format!("{:?}", tape.shape(h))));
    };
    let proj = tape.param(store, PROJ)?;
    let vector = tape.param(store, VECTOR)?;
    let att = tape.shape(proj)[1];
    let flat = tape.reshape(h, &[bs * n, c])?;
    let p = tape.matmul(flat, proj)?;
    let w1 = tape.narrow(vector, 0, 0, att)?;
    let w2 = tape.narrow(vector, 0, att, att)?;
    let a = tape.matmul(p, w1)?;
    let b = tape.matmul(p, w2)?;
    let a = tape.reshape(a, &[bs, n, 1])?;
    let b = tape.reshape(b, &[bs, 1, n])?;
    tape.add(a, b)
}

fn uniform(mask: &[bool], batch: usize, n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; mask.len()];
    for (row, chunk) in data.chunks_mut(n).enumerate() {
        let m = &mask[row * n..(row + 1) * n];
        let deg = m.iter().filter(|&&x| x).count();
        for (d, &on) in chunk.iter_mut().zip(m) {
            if on {
                *d = 1.0 / deg as f64;
            }
        }
    }
    Tensor::new(vec![batch, n, n], data)
}

/// Coefficients for one iteration: `(intra, inter)` when normalised
/// separately, otherwise the same union-normalised tensor twice.
pub fn attention_coeffs(
    tape: &mut Tape,
    store: &ParameterStore,
    h: Var,
    masks: &GraphMasks,
    opts: &GatOptions,
) -> Result<(Var, Var)> {
    let (bs, n) = (masks.batch, masks.nodes);
    if opts.uniform_attention {
        if opts.separate_softmax {
            let a = tape.input(uniform(&masks.intra, bs, n)?);
            let b = tape.input(uniform(&masks.inter, bs, n)?);
            return Ok((a, b));
        }
        let a = tape.input(uniform(&masks.union, bs, n)?);
        return Ok((a, a));
    }
    let e = attention_logits(tape, store, h)?;
    if opts.separate_softmax {
        let a = tape.masked_softmax(e, &masks.intra)?;
        let b = tape.masked_softmax(e, &masks.inter)?;
        Ok((a, b))
    } else {
        let a = tape.masked_softmax(e, &masks.union)?;
        Ok((a, a))
    }
}

/// State and coefficients after one iteration.
pub struct StepOutput {
    pub h: Var,
    pub alpha_intra: Var,
    pub alpha_inter: Var,
}

pub fn step(tape: &mut Tape, store: &ParameterStore, h: Var, masks: &GraphMasks, opts: &GatOptions) -> Result<StepOutput> {
    let &[bs, n, c] = tape.shape(h) else {
        return Err(shape_err("gat step", format!("{:?}", tape.shape(h))));
    };
    if bs != masks.batch || n != masks.nodes {
        return Err(shape_err("gat step", format!("state {:?} for {} graphs of {} nodes", tape.shape(h), masks.batch, masks.nodes)));
    }
    let (alpha_intra, alpha_inter) = attention_coeffs(tape, store, h, masks, opts)?;
    let flat = tape.reshape(h, &[bs * n, c])?;
    let mut projected: Vec<(String, Var)> = Vec::new();
    let mut acc = h;
    for kind in &masks.kinds {
        let hw = match projected.iter().find(|(name, _)| *name == kind.weight) {
            Some(&(_, v)) => v,
            None => {
                let w = tape.param(store, &kind.weight)?;
                let v = tape.matmul(flat, w)?;
                let v = tape.reshape(v, &[bs, n, c])?;
                projected.push((kind.weight.clone(), v));
                v
            }
        };
        let mask = tape.input(kind.mask.clone());
        let alpha = if kind.intra { alpha_intra } else { alpha_inter };
        let weights = tape.mul(alpha, mask)?;
        let message = if kind.intra && opts.literal_eq3 {
            let total = tape.sum_axis(weights, 2)?;
            let total = tape.reshape(total, &[bs, n, 1])?;
            tape.mul(total, hw)?
        } else {
            tape.bmm(weights, hw)?
        };
        acc = tape.add(acc, message)?;
    }
    let h = tape.relu(acc)?;
    Ok(StepOutput { h, alpha_intra, alpha_inter })
}

pub struct RunOutput {
    pub h: Var,
    /// Per-iteration `(intra, inter)` coefficients.
    pub alphas: Vec<(Var, Var)>,
}

/// `iterations` synchronous steps sharing one parameter set.
pub fn run(tape: &mut Tape, store: &ParameterStore, h0: Var, masks: &GraphMasks, opts: &GatOptions) -> Result<RunOutput> {
    if opts.iterations == 0 {
        return Err(Error::Config("gat needs at least one iteration".into()));
    }
    let mut h = h0;
    let mut alphas = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        let out = step(tape, store, h, masks, opts)?;
        h = out.h;
        alphas.push((out.alpha_intra, out.alpha_inter));
    }
    Ok(RunOutput { h, alphas })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeight {
    pub node: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub iteration: usize,
    pub sample: usize,
    pub target: String,
    pub neighbors: Vec<NeighborWeight>,
}

/// Flattens per-iteration coefficients into target -> neighbour -> weight
/// records. With separate softmaxes the two parts are listed together.
pub fn alpha_records(tape: &Tape, graphs: &[DynamicGraph], alphas: &[(Var, Var)]) -> Vec<AlphaRecord> {
    let mut out = Vec::new();
    let Some(first) = graphs.first() else { return out };
    let n = first.node_count();
    for (it, &(ai, ae)) in alphas.iter().enumerate() {
        let (vi, ve) = (tape.value(ai).data(), tape.value(ae).data());
        for (b, g) in graphs.iter().enumerate() {
            for i in 0..n {
                let neighbors = g
                    .neighbors(i)
                    .iter()
                    .map(|&j| {
                        let idx = (b * n + i) * n + j;
                        let inter = g.node_ref(i).modality != g.node_ref(j).modality;
                        let weight = if ai == ae { vi[idx] } else if inter { ve[idx] } else { vi[idx] };
                        NeighborWeight { node: g.node_ref(j).to_string(), weight }
                    })
                    .collect();
                out.push(AlphaRecord { iteration: it + 1, sample: b, target: g.node_ref(i).to_string(), neighbors });
            }
        }
    }
    out
}
