//! Core domain types: detections, lineage graphs, windows and association
//! matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::scalar::Scalar;

/// Globally unique detection id (unique across a whole video). `0` is
/// reserved by the file formats to mean "no parent".
pub type NodeId = u64;
pub type Frame = u32;

/// Tolerance for the positive-semidefinite check on inertia tensors.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Shallow per-object features.
///
/// The inertia tensor holds the central second moments of the region
/// normalized by area (a covariance, in px²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub area: f64,
    pub intensity: f64,
    pub ixx: f64,
    pub iyy: f64,
    pub ixy: f64,
}

impl Features {
    /// Channel order used by the tokenizer.
    pub const CHANNELS: [&'static str; 5] = ["intensity", "area", "ixx", "iyy", "ixy"];

    pub fn channels(&self) -> [f64; 5] {
        [self.intensity, self.area, self.ixx, self.iyy, self.ixy]
    }

    pub fn is_psd(&self) -> bool {
        self.ixx >= -PSD_TOLERANCE
            && self.iyy >= -PSD_TOLERANCE
            && self.ixx * self.iyy - self.ixy * self.ixy >= -PSD_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: NodeId,
    pub frame: Frame,
    /// `(x, y)` in pixels.
    pub pos: [f64; 2],
    pub features: Option<Features>,
    /// Label of the region in a labeled mask image, if any.
    pub mask_ref: Option<u32>,
}

impl Detection {
    pub fn point(id: NodeId, frame: Frame, x: f64, y: f64) -> Self {
        Detection {
            id,
            frame,
            pos: [x, y],
            features: None,
            mask_ref: None,
        }
    }

    pub fn with_features(mut self, features: Features) -> Self {
        self.features = Some(features);
        self
    }

    pub fn distance(&self, other: &Detection) -> f64 {
        let dx = self.pos[0] - other.pos[0];
        let dy = self.pos[1] - other.pos[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(TrackError::InvalidDetection {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if !self.pos.iter().all(|c| c.is_finite()) {
            return bad("non-finite position");
        }
        if let Some(f) = &self.features {
            if f.area < 0.0 {
                return bad("negative area");
            }
            if !f.is_psd() {
                return bad("inertia tensor is not positive-semidefinite");
            }
        }
        Ok(())
    }
}

/// Checks per-detection invariants and id uniqueness for a whole video.
pub fn validate_detections(dets: &[Detection]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in dets {
        d.validate()?;
        if !seen.insert(d.id) {
            return Err(TrackError::DuplicateNode(d.id));
        }
    }
    Ok(())
}

/// Map from detection id to frame index.
pub fn frame_map(dets: &[Detection]) -> HashMap<NodeId, Frame> {
    dets.iter().map(|d| (d.id, d.frame)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MultipleParents { node: NodeId, count: usize },
    TooManyChildren { node: NodeId, count: usize },
    FrameGap { parent: NodeId, child: NodeId, gap: i64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MultipleParents { node, count } => {
                write!(f, "in-degree {count} at node {node}")
            }
            Violation::TooManyChildren { node, count } => {
                write!(f, "out-degree {count} at node {node}")
            }
            Violation::FrameGap { parent, child, gap } => {
                write!(f, "edge {parent}->{child} spans {gap} frames")
            }
        }
    }
}

/// Directed forest over detections. Edges point parent -> child.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LineageGraph {
    nodes: BTreeSet<NodeId>,
    edges: BTreeMap<(NodeId, NodeId), Option<f64>>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    parents: BTreeMap<NodeId, Vec<NodeId>>,
}

impl LineageGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_nodes(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut g = Self::new();
        for n in nodes {
            g.add_node(n);
        }
        g
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.nodes.insert(id);
    }

    /// Inserts an edge, adding missing endpoints. Re-inserting an existing
    /// edge only updates its score.
    pub fn add_edge(&mut self, parent: NodeId, child: NodeId, score: Option<f64>) {
        self.nodes.insert(parent);
        self.nodes.insert(child);
        if self.edges.insert((parent, child), score).is_none() {
            insert_sorted(self.children.entry(parent).or_default(), child);
            insert_sorted(self.parents.entry(child).or_default(), parent);
        }
    }

    pub fn remove_edge(&mut self, parent: NodeId, child: NodeId) -> bool {
        if self.edges.remove(&(parent, child)).is_none() {
            return false;
        }
        if let Some(c) = self.children.get_mut(&parent) {
            c.retain(|&x| x != child);
        }
        if let Some(p) = self.parents.get_mut(&child) {
            p.retain(|&x| x != parent);
        }
        true
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn contains_edge(&self, parent: NodeId, child: NodeId) -> bool {
        self.edges.contains_key(&(parent, child))
    }

    pub fn edge_score(&self, parent: NodeId, child: NodeId) -> Option<f64> {
        self.edges.get(&(parent, child)).copied().flatten()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    /// Edges in `(parent, child)` order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, Option<f64>)> + '_ {
        self.edges.iter().map(|(&(p, c), &s)| (p, c, s))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        self.parents.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parents(id).first().copied()
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.children(id).len()
    }

    pub fn in_degree(&self, id: NodeId) -> usize {
        self.parents(id).len()
    }

    /// Lists every violation of the lineage constraints: in-degree ≤ 1,
    /// out-degree ≤ 2 and single-frame edges.
    pub fn validate(&self, frames: &HashMap<NodeId, Frame>) -> Result<Vec<Violation>> {
        for &n in &self.nodes {
            if !frames.contains_key(&n) {
                return Err(TrackError::UnknownNode(n));
            }
        }
        let mut out = Vec::new();
        for &n in &self.nodes {
            let ins = self.in_degree(n);
            if ins > 1 {
                out.push(Violation::MultipleParents { node: n, count: ins });
            }
            let outs = self.out_degree(n);
            if outs > 2 {
                out.push(Violation::TooManyChildren { node: n, count: outs });
            }
        }
        for &(p, c) in self.edges.keys() {
            let gap = frames[&c] as i64 - frames[&p] as i64;
            if gap != 1 {
                out.push(Violation::FrameGap {
                    parent: p,
                    child: c,
                    gap,
                });
            }
        }
        Ok(out)
    }

    /// Transitive ancestors and descendants of `node`, excluding itself.
    pub fn closure(&self, node: NodeId) -> Result<(BTreeSet<NodeId>, BTreeSet<NodeId>)> {
        if !self.contains_node(node) {
            return Err(TrackError::UnknownNode(node));
        }
        let ancestors = self.reach(node, |n| self.parents(n));
        let descendants = self.reach(node, |n| self.children(n));
        Ok((ancestors, descendants))
    }

    fn reach<'a>(&'a self, node: NodeId, next: impl Fn(NodeId) -> &'a [NodeId]) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = next(node).to_vec();
        while let Some(n) = stack.pop() {
            if n != node && seen.insert(n) {
                stack.extend_from_slice(next(n));
            }
        }
        seen
    }

    /// Nodes without a parent.
    pub fn roots(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied().filter(|&n| self.in_degree(n) == 0)
    }
}

fn insert_sorted(v: &mut Vec<NodeId>, x: NodeId) {
    if let Err(pos) = v.binary_search(&x) {
        v.insert(pos, x);
    }
}

/// Consecutive frames `[start, start + span)` of a video with their
/// detections in `(frame, id)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    start: Frame,
    span: u32,
    detections: Vec<Detection>,
    index: HashMap<NodeId, usize>,
}

impl Window {
    pub fn new(start: Frame, span: u32, mut detections: Vec<Detection>) -> Result<Self> {
        if span < 2 {
            return Err(TrackError::Config(format!("window span {span} < 2")));
        }
        for d in &detections {
            if d.frame < start || d.frame >= start + span {
                return Err(TrackError::InvalidDetection {
                    id: d.id,
                    reason: format!("frame {} outside window [{start}, {})", d.frame, start + span),
                });
            }
        }
        detections.sort_by_key(|d| (d.frame, d.id));
        let mut index = HashMap::with_capacity(detections.len());
        for (row, d) in detections.iter().enumerate() {
            if index.insert(d.id, row).is_some() {
                return Err(TrackError::DuplicateNode(d.id));
            }
        }
        Ok(Window {
            start,
            span,
            detections,
            index,
        })
    }

    /// Selects the detections of `[start, start + span)` from a whole video.
    pub fn from_video(video: &[Detection], start: Frame, span: u32) -> Result<Self> {
        let dets = video
            .iter()
            .filter(|d| d.frame >= start && d.frame < start + span)
            .cloned()
            .collect();
        Window::new(start, span, dets)
    }

    pub fn start(&self) -> Frame {
        self.start
    }

    pub fn span(&self) -> u32 {
        self.span
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn row_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Absolute frame index of every row.
    pub fn frames(&self) -> Vec<Frame> {
        self.detections.iter().map(|d| d.frame).collect()
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.detections
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixRole {
    Target,
    Logits,
    Probabilities,
    Weights,
    Aggregated,
}

/// Dense pairwise matrix over the rows of one [`Window`].
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix<T: Scalar> {
    pub values: Array2<T>,
    pub role: MatrixRole,
    pub frames: Vec<Frame>,
}

impl<T: Scalar> AssociationMatrix<T> {
    pub fn new(values: Array2<T>, role: MatrixRole, frames: Vec<Frame>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r != frames.len() {
            return Err(TrackError::Shape(format!(
                "{r}x{c} matrix with {} frames",
                frames.len()
            )));
        }
        let ok = match role {
            MatrixRole::Target => values.iter().all(|&v| v == T::zero() || v == T::one()),
            MatrixRole::Probabilities | MatrixRole::Aggregated => {
                values.iter().all(|&v| v >= T::zero() && v <= T::one())
            }
            MatrixRole::Weights => values.iter().all(|&v| v >= T::zero()),
            MatrixRole::Logits => true,
        };
        if !ok {
            return Err(TrackError::Shape(format!("entries violate {role:?} range")));
        }
        Ok(AssociationMatrix {
            values,
            role,
            frames,
        })
    }

    pub fn n(&self) -> usize {
        self.frames.len()
    }
}
