//! Per-sample dynamic graph over the selected nodes of both modalities.
//!
//! Intra-modality edges form a three-level hierarchy: every sub-central node
//! links to every main-central node, and every leaf links to its nearest
//! sub-central node. Inter-modality edges pair `R_i` with `D_i` for the
//! main and sub-central ranks only. All edges are undirected.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ans::{Level, NodeLayout, Selection};
use crate::error::{Error, Result};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    IntraRgb,
    IntraDepth,
    Inter,
}

impl EdgeKind {
    pub fn intra(modality: Modality) -> Self {
        match modality {
            Modality::Rgb => EdgeKind::IntraRgb,
            Modality::Depth => EdgeKind::IntraDepth,
        }
    }

    pub fn is_intra(self) -> bool {
        self != EdgeKind::Inter
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::IntraRgb => "intra-rgb",
            EdgeKind::IntraDepth => "intra-depth",
            EdgeKind::Inter => "inter",
        }
    }
}

/// A node identified by modality and 1-based attention rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub modality: Modality,
    pub rank: usize,
}

impl NodeRef {
    pub fn new(modality: Modality, rank: usize) -> Self {
        Self { modality, rank }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.modality, self.rank)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub kind: EdgeKind,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -- {} {}", self.src, self.dst, self.kind.name())
    }
}

/// Distance used to attach leaves to sub-central nodes.
#[derive(Clone, Copy, Debug)]
pub enum Metric<'a> {
    /// Euclidean distance between grid coordinates.
    Grid,
    /// Euclidean distance between node feature vectors, stored rank-major
    /// as `k` rows of `dim` values.
    Feature { features: &'a [f64], dim: usize },
}

impl Metric<'_> {
    fn distance(&self, layout: &NodeLayout, a: usize, b: usize) -> f64 {
        match *self {
            Metric::Grid => {
                let (pa, pb) = (layout.positions[a], layout.positions[b]);
                let dr = pa.0 as f64 - pb.0 as f64;
                let dc = pa.1 as f64 - pb.1 as f64;
                (dr * dr + dc * dc).sqrt()
            }
            Metric::Feature { features, dim } => {
                let (x, y) = (&features[a * dim..(a + 1) * dim], &features[b * dim..(b + 1) * dim]);
                x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            }
        }
    }
}

/// Hierarchy edges of one modality. Leaves attach to the sub-central node at
/// the smallest distance; ties go to the better rank.
pub fn build_intra(layout: &NodeLayout, modality: Modality, metric: &Metric) -> Vec<Edge> {
    let ranks_at = |level| (0..layout.k()).filter(move |&r| layout.levels[r] == level);
    let mains: Vec<usize> = ranks_at(Level::MainCentral).collect();
    let subs: Vec<usize> = ranks_at(Level::SubCentral).collect();
    let kind = EdgeKind::intra(modality);
    let node = |r: usize| NodeRef::new(modality, r + 1);
    let mut edges = Vec::new();
    for &s in &subs {
        for &m in &mains {
            edges.push(Edge { src: node(s), dst: node(m), kind });
        }
    }
    for leaf in ranks_at(Level::Leaf) {
        let mut best: Option<(usize, f64)> = None;
        for &s in &subs {
            let d = metric.distance(layout, leaf, s);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((s, d));
            }
        }
        if let Some((s, _)) = best {
            edges.push(Edge { src: node(leaf), dst: node(s), kind });
        }
    }
    edges
}

/// Rank-paired edges `R_i -- D_i` for `i = 1..=m+n`.
pub fn build_inter(rgb: &NodeLayout, depth: &NodeLayout, m: usize, n: usize) -> Result<Vec<Edge>> {
    if rgb.k() != depth.k() || rgb.levels != depth.levels || m + n > rgb.k() {
        return Err(Error::Config(format!(
            "inter edges need matching selections (k {} vs {}, m + n = {})",
            rgb.k(),
            depth.k(),
            m + n
        )));
    }
    Ok((1..=m + n)
        .map(|r| Edge {
            src: NodeRef::new(Modality::Rgb, r),
            dst: NodeRef::new(Modality::Depth, r),
            kind: EdgeKind::Inter,
        })
        .collect())
}

/// The graph of one sample. Nodes are indexed by modality slot then rank,
/// which is also the neighbour order.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    pub selection: Selection,
    pub modalities: Vec<Modality>,
    pub edges: Vec<Edge>,
    neighbors: Vec<Vec<usize>>,
}

impl DynamicGraph {
    /// Builds intra edges for every given modality, plus inter edges when
    /// both are present.
    pub fn assemble(parts: &[(Modality, &NodeLayout, Metric)], selection: Selection) -> Result<Self> {
        if parts.is_empty() || parts.len() > 2 || (parts.len() == 2 && parts[0].0 == parts[1].0) {
            return Err(Error::Config("a graph needs one or two distinct modalities".into()));
        }
        let mut edges = Vec::new();
        for (modality, layout, metric) in parts {
            if layout.k() != selection.k {
                return Err(Error::Config(format!("layout has {} nodes, selection k = {}", layout.k(), selection.k)));
            }
            edges.extend(build_intra(layout, *modality, metric));
        }
        if let [(a, la, _), (_, lb, _)] = parts {
            let (rgb, depth) = if *a == Modality::Rgb { (la, lb) } else { (lb, la) };
            edges.extend(build_inter(rgb, depth, selection.m, selection.n)?);
        }
        let modalities: Vec<Modality> = parts.iter().map(|p| p.0).collect();
        let mut graph = Self { selection, modalities, edges, neighbors: Vec::new() };
        let mut neighbors = vec![Vec::new(); graph.node_count()];
        for e in &graph.edges {
            let (s, d) = (graph.index_of(e.src).unwrap(), graph.index_of(e.dst).unwrap());
            neighbors[s].push(d);
            neighbors[d].push(s);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        graph.neighbors = neighbors;
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.modalities.len() * self.selection.k
    }

    pub fn index_of(&self, node: NodeRef) -> Option<usize> {
        let slot = self.modalities.iter().position(|&m| m == node.modality)?;
        (node.rank >= 1 && node.rank <= self.selection.k).then(|| slot * self.selection.k + node.rank - 1)
    }

    pub fn node_ref(&self, index: usize) -> NodeRef {
        let k = self.selection.k;
        NodeRef::new(self.modalities[index / k], index % k + 1)
    }

    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.neighbors[index]
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Number of incident edges whose kind satisfies `filter`.
    pub fn degree(&self, index: usize, filter: impl Fn(EdgeKind) -> bool) -> usize {
        let node = self.node_ref(index);
        self.edges.iter().filter(|e| filter(e.kind) && (e.src == node || e.dst == node)).count()
    }

    /// Row-major N x N adjacency restricted to edge kinds accepted by `filter`.
    pub fn mask(&self, filter: impl Fn(EdgeKind) -> bool) -> Vec<bool> {
        let n = self.node_count();
        let mut mask = vec![false; n * n];
        for e in self.edges.iter().filter(|e| filter(e.kind)) {
            let (s, d) = (self.index_of(e.src).unwrap(), self.index_of(e.dst).unwrap());
            mask[s * n + d] = true;
            mask[d * n + s] = true;
        }
        mask
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.node_count()).all(|i| self.neighbors[i].iter().all(|&j| self.neighbors[j].contains(&i)))
    }

    /// Whether every selected node of `modality` is reachable from rank 1
    /// through intra edges.
    pub fn intra_connected(&self, modality: Modality) -> bool {
        let Some(start) = self.index_of(NodeRef::new(modality, 1)) else {
            return false;
        };
        let kind = EdgeKind::intra(modality);
        let mask = self.mask(|k| k == kind);
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if mask[i * n + j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let k = self.selection.k;
        let slot = start / k;
        seen[slot * k..(slot + 1) * k].iter().all(|&s| s)
    }

    /// One `modality:rank -- modality:rank kind` line per edge.
    pub fn dump(&self) -> String {
        self.edges.iter().map(|e| format!("{e}\n")).collect()
    }
}
