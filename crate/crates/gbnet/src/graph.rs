//! Heterogeneous graph data model.
//!
//! Four node kinds: scene entities (SE) and scene predicates (SP) for
//! one image, commonsense entities (CE) and commonsense predicates (CP)
//! shared across images. Edges are typed, directed and weighted, in
//! three families: fixed scene edges wiring each SP to its subject and
//! object, fixed commonsense edges between class nodes, and latent
//! bridge edges from instances to classes (and back). Graphs are
//! immutable once built; bridge weights live in a separate [`BridgeSet`]
//! so the model can refine them without touching the graph.

use std::collections::BTreeMap;

use crate::error::{GbError, Result};
use crate::tensor::Tensor;

/// Axis-aligned box, normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|&v| in_unit(v)) {
            return Err(GbError::MalformedBox(format!("{:?} outside [0,1]", self)));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(GbError::MalformedBox(format!("{:?} has non-positive extent", self)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    SE,
    SP,
    CE,
    CP,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [NodeKind::SE, NodeKind::SP, NodeKind::CE, NodeKind::CP];

    pub fn index(self) -> usize {
        match self {
            NodeKind::SE => 0,
            NodeKind::SP => 1,
            NodeKind::CE => 2,
            NodeKind::CP => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::SE => "SE",
            NodeKind::SP => "SP",
            NodeKind::CE => "CE",
            NodeKind::CP => "CP",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        match s {
            "SE" => Some(NodeKind::SE),
            "SP" => Some(NodeKind::SP),
            "CE" => Some(NodeKind::CE),
            "CP" => Some(NodeKind::CP),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeFamily {
    Scene,
    Commonsense,
    Bridge,
}

/// A declared edge type: name plus source/destination kind signature.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeType {
    pub name: String,
    pub family: EdgeFamily,
    pub src_kind: NodeKind,
    pub dst_kind: NodeKind,
}

impl EdgeType {
    pub fn new(name: &str, family: EdgeFamily, src: NodeKind, dst: NodeKind) -> Self {
        EdgeType { name: name.to_string(), family, src_kind: src, dst_kind: dst }
    }
}

/// The four scene edge types.
pub fn scene_edge_types() -> Vec<EdgeType> {
    vec![
        EdgeType::new("subjectOf", EdgeFamily::Scene, NodeKind::SE, NodeKind::SP),
        EdgeType::new("objectOf", EdgeFamily::Scene, NodeKind::SE, NodeKind::SP),
        EdgeType::new("hasSubject", EdgeFamily::Scene, NodeKind::SP, NodeKind::SE),
        EdgeType::new("hasObject", EdgeFamily::Scene, NodeKind::SP, NodeKind::SE),
    ]
}

/// The four bridge edge types (entity and predicate, each direction).
pub fn bridge_edge_types() -> Vec<EdgeType> {
    vec![
        EdgeType::new("classifiedTo", EdgeFamily::Bridge, NodeKind::SE, NodeKind::CE),
        EdgeType::new("classifiedTo", EdgeFamily::Bridge, NodeKind::SP, NodeKind::CP),
        EdgeType::new("hasInstance", EdgeFamily::Bridge, NodeKind::CE, NodeKind::SE),
        EdgeType::new("hasInstance", EdgeFamily::Bridge, NodeKind::CP, NodeKind::SP),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeTypeId(pub usize);

#[derive(Debug, Clone)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    /// SE only.
    pub bbox: Option<BBox>,
    /// SP only: subject and object SE node ids.
    pub subj_id: Option<usize>,
    pub obj_id: Option<usize>,
    /// CE/CP only.
    pub label: Option<String>,
}

impl Node {
    fn se(id: usize, bbox: BBox) -> Self {
        Node { id, kind: NodeKind::SE, bbox: Some(bbox), subj_id: None, obj_id: None, label: None }
    }

    fn sp(id: usize, subj: usize, obj: usize) -> Self {
        Node {
            id,
            kind: NodeKind::SP,
            bbox: None,
            subj_id: Some(subj),
            obj_id: Some(obj),
            label: None,
        }
    }

    pub(crate) fn class_node(id: usize, kind: NodeKind, label: &str) -> Self {
        Node { id, kind, bbox: None, subj_id: None, obj_id: None, label: Some(label.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeTypeId,
    pub weight: f64,
}

/// Typed heterogeneous graph with in-adjacency indexed by (etype, dst)
/// so message aggregation is a linear scan per node.
#[derive(Debug, Clone, Default)]
pub struct HeteroGraph {
    nodes: Vec<Node>,
    etypes: Vec<EdgeType>,
    edges: Vec<Edge>,
    /// in_adj[etype][dst] -> (src, weight)
    in_adj: Vec<Vec<Vec<(usize, f64)>>>,
}

impl HeteroGraph {
    pub fn new() -> Self {
        HeteroGraph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_types(&self) -> &[EdgeType] {
        &self.etypes
    }

    pub fn edge_type(&self, id: EdgeTypeId) -> &EdgeType {
        &self.etypes[id.0]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids_of_kind(&self, kind: NodeKind) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id).collect()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Sources and weights of in-edges of `etype` arriving at `dst`.
    pub fn in_edges(&self, etype: EdgeTypeId, dst: usize) -> &[(usize, f64)] {
        &self.in_adj[etype.0][dst]
    }

    pub(crate) fn register_etype(&mut self, et: EdgeType) -> EdgeTypeId {
        if let Some(pos) = self.etypes.iter().position(|e| e == &et) {
            return EdgeTypeId(pos);
        }
        self.etypes.push(et);
        self.in_adj.push(Vec::new());
        EdgeTypeId(self.etypes.len() - 1)
    }

    pub fn find_etype(&self, name: &str, src: NodeKind, dst: NodeKind) -> Option<EdgeTypeId> {
        self.etypes
            .iter()
            .position(|e| e.name == name && e.src_kind == src && e.dst_kind == dst)
            .map(EdgeTypeId)
    }

    pub(crate) fn push_node(&mut self, node: Node) -> usize {
        debug_assert_eq!(node.id, self.nodes.len());
        let id = node.id;
        self.nodes.push(node);
        for adj in self.in_adj.iter_mut() {
            adj.resize(self.nodes.len(), Vec::new());
        }
        id
    }

    pub(crate) fn push_edge(&mut self, src: usize, dst: usize, etype: EdgeTypeId, weight: f64) -> Result<()> {
        if src >= self.nodes.len() || dst >= self.nodes.len() {
            return Err(GbError::Input(format!("dangling edge endpoint {}->{}", src, dst)));
        }
        if !weight.is_finite() {
            return Err(GbError::Numeric(format!("edge weight {}->{} not finite", src, dst)));
        }
        let et = &self.etypes[etype.0];
        if self.nodes[src].kind != et.src_kind || self.nodes[dst].kind != et.dst_kind {
            return Err(GbError::Input(format!(
                "edge {}->{} violates {} signature {}->{}",
                src,
                dst,
                et.name,
                et.src_kind.name(),
                et.dst_kind.name()
            )));
        }
        let adj = &mut self.in_adj[etype.0];
        adj.resize(self.nodes.len().max(adj.len()), Vec::new());
        if adj[dst].iter().any(|&(s, _)| s == src) {
            return Err(GbError::Input(format!(
                "duplicate edge {}->{} of type {}",
                src, dst, et.name
            )));
        }
        adj[dst].push((src, weight));
        self.edges.push(Edge { src, dst, etype, weight });
        Ok(())
    }
}

/// Build the scene-only skeleton for `n` detections: one SE per box, one
/// SP per ordered pair of distinct entities, all four scene edge types
/// at weight 1. Self pairs are excluded.
pub fn build_scene_skeleton(boxes: &[BBox]) -> Result<HeteroGraph> {
    let mut g = HeteroGraph::new();
    build_scene_into(&mut g, boxes)?;
    Ok(g)
}

/// Append the scene skeleton to a graph that may already hold the
/// commonsense portion (which is left untouched). SE/SP ids follow any
/// existing nodes. Returns (se ids, sp ids in ordered-pair order).
pub fn build_scene_into(g: &mut HeteroGraph, boxes: &[BBox]) -> Result<(Vec<usize>, Vec<usize>)> {
    for b in boxes {
        b.validate()?;
    }
    let subject_of = g.register_etype(scene_edge_types()[0].clone());
    let object_of = g.register_etype(scene_edge_types()[1].clone());
    let has_subject = g.register_etype(scene_edge_types()[2].clone());
    let has_object = g.register_etype(scene_edge_types()[3].clone());

    let se_ids: Vec<usize> = boxes
        .iter()
        .map(|b| {
            let id = g.nodes.len();
            g.push_node(Node::se(id, *b))
        })
        .collect();

    let mut sp_ids = Vec::new();
    for (si, &s) in se_ids.iter().enumerate() {
        for (oi, &o) in se_ids.iter().enumerate() {
            if si == oi {
                continue;
            }
            let id = g.nodes.len();
            g.push_node(Node::sp(id, s, o));
            g.push_edge(s, id, subject_of, 1.0)?;
            g.push_edge(o, id, object_of, 1.0)?;
            g.push_edge(id, s, has_subject, 1.0)?;
            g.push_edge(id, o, has_object, 1.0)?;
            sp_ids.push(id);
        }
    }
    Ok((se_ids, sp_ids))
}

/// Ordered (subject, object) local index pairs for `n` entities, in SP
/// allocation order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n.saturating_mul(n.saturating_sub(1)));
    for s in 0..n {
        for o in 0..n {
            if s != o {
                out.push((s, o));
            }
        }
    }
    out
}

/// Bridge weights between scene nodes and class nodes. `entity` and
/// `predicate` hold the sparsified (top-K) weights used as outputs and
/// as message edge weights; the `_dense` twins keep the pre-sparsification
/// score rows that the loss consumes. Entity weights apply to both the
/// instance-to-class and class-to-instance directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSet {
    pub entity: Tensor,
    pub predicate: Tensor,
    pub entity_dense: Tensor,
    pub predicate_dense: Tensor,
    pub k: usize,
}

impl BridgeSet {
    /// Row indices that survive top-K sparsification of `row`, skipping
    /// exact zeros; ties break toward the lowest class index. The result
    /// is sorted ascending.
    pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] != 0.0).collect();
        idx.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite weights").then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }

    /// Sparsify each row of `dense` to its top-K entries.
    pub fn sparsify(dense: &Tensor, k: usize) -> Tensor {
        let mut out = Tensor::zeros(dense.rows(), dense.cols());
        for r in 0..dense.rows() {
            for i in Self::top_k_indices(dense.row(r), k) {
                out.set(r, i, dense.get(r, i));
            }
        }
        out
    }

    pub fn n_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn n_predicates(&self) -> usize {
        self.predicate.rows()
    }
}

/// Initialize entity bridges from detector label distributions: each SE
/// keeps its top-K classes weighted by the distribution, and the reverse
/// direction carries the same weights. Predicate bridges start empty.
pub fn init_entity_bridges(label_dists: &Tensor, k: usize) -> Result<BridgeSet> {
    if k < 1 {
        return Err(GbError::Input("bridge sparsity K must be >= 1".into()));
    }
    for r in 0..label_dists.rows() {
        let sum: f64 = label_dists.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GbError::Input(format!(
                "label distribution row {} sums to {}, expected 1",
                r, sum
            )));
        }
    }
    let k = k.min(label_dists.cols().max(1));
    let entity = BridgeSet::sparsify(label_dists, k);
    Ok(BridgeSet {
        entity,
        predicate: Tensor::zeros(0, 0),
        entity_dense: label_dists.clone(),
        predicate_dense: Tensor::zeros(0, 0),
        k,
    })
}

/// Label -> dense index maps for one kind of class node, in id order.
pub fn label_index(nodes: &[Node], kind: NodeKind) -> BTreeMap<String, usize> {
    nodes
        .iter()
        .filter(|n| n.kind == kind)
        .enumerate()
        .filter_map(|(i, n)| n.label.clone().map(|l| (l, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| {
                let x = i as f64 * 0.01;
                BBox::new(x, 0.0, x + 0.5, 0.5).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_scene_is_empty_graph() {
        let g = build_scene_skeleton(&[]).unwrap();
        assert_eq!(g.n_nodes(), 0);
        assert_eq!(g.edges().len(), 0);
    }

    #[test]
    fn single_detection_has_no_pairs() {
        let g = build_scene_skeleton(&unit_boxes(1)).unwrap();
        assert_eq!(g.count_kind(NodeKind::SE), 1);
        assert_eq!(g.count_kind(NodeKind::SP), 0);
        assert_eq!(g.edges().len(), 0);
    }

    #[test]
    fn three_detections_enumerated_by_hand() {
        // Ordered pairs of 3 entities: (0,1),(0,2),(1,0),(1,2),(2,0),(2,1).
        let g = build_scene_skeleton(&unit_boxes(3)).unwrap();
        assert_eq!(g.count_kind(NodeKind::SE), 3);
        assert_eq!(g.count_kind(NodeKind::SP), 6);
        assert_eq!(g.edges().len(), 24);
    }

    #[test]
    fn malformed_boxes_are_rejected() {
        for bad in [
            BBox { x1: -0.1, y1: 0.0, x2: 0.5, y2: 0.5 },
            BBox { x1: 0.0, y1: 0.0, x2: 1.2, y2: 0.5 },
            BBox { x1: 0.5, y1: 0.0, x2: 0.5, y2: 0.5 },
            BBox { x1: 0.0, y1: 0.6, x2: 0.5, y2: 0.4 },
        ] {
            assert!(matches!(build_scene_skeleton(&[bad]), Err(GbError::MalformedBox(_))));
        }
    }

    #[test]
    fn skeleton_edge_count_matches_closed_form() {
        for n in 0..=12 {
            let g = build_scene_skeleton(&unit_boxes(n)).unwrap();
            assert_eq!(g.edges().len(), 4 * n * n.saturating_sub(1));
        }
    }

    #[test]
    fn every_sp_has_one_subject_and_one_object_each_way() {
        let g = build_scene_skeleton(&unit_boxes(4)).unwrap();
        let has_subject = g.find_etype("hasSubject", NodeKind::SP, NodeKind::SE).unwrap();
        let has_object = g.find_etype("hasObject", NodeKind::SP, NodeKind::SE).unwrap();
        let subject_of = g.find_etype("subjectOf", NodeKind::SE, NodeKind::SP).unwrap();
        let object_of = g.find_etype("objectOf", NodeKind::SE, NodeKind::SP).unwrap();
        for sp in g.node_ids_of_kind(NodeKind::SP) {
            let node = g.node(sp);
            let (s, o) = (node.subj_id.unwrap(), node.obj_id.unwrap());
            assert_ne!(s, o);
            // Out-edges of the SP show up as in-edges at its endpoints.
            assert_eq!(g.in_edges(has_subject, s).iter().filter(|(src, _)| *src == sp).count(), 1);
            assert_eq!(g.in_edges(has_object, o).iter().filter(|(src, _)| *src == sp).count(), 1);
            assert_eq!(g.in_edges(subject_of, sp), &[(s, 1.0)]);
            assert_eq!(g.in_edges(object_of, sp), &[(o, 1.0)]);
        }
    }

    #[test]
    fn one_hot_k1_bridge() {
        let p = Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let b = init_entity_bridges(&p, 1).unwrap();
        assert_eq!(b.entity.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(b.predicate.rows(), 0);
    }

    #[test]
    fn uniform_tie_breaks_to_lowest_index() {
        let p = Tensor::from_vec(1, 4, vec![0.25; 4]).unwrap();
        let b = init_entity_bridges(&p, 2).unwrap();
        assert_eq!(b.entity.row(0), &[0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn sorted_truncation_by_hand() {
        let p = Tensor::from_vec(1, 3, vec![0.5, 0.3, 0.2]).unwrap();
        let b = init_entity_bridges(&p, 2).unwrap();
        assert_eq!(b.entity.row(0), &[0.5, 0.3, 0.0]);
    }

    #[test]
    fn k_larger_than_classes_is_clamped() {
        let p = Tensor::from_vec(1, 3, vec![0.5, 0.3, 0.2]).unwrap();
        let b = init_entity_bridges(&p, 10).unwrap();
        assert_eq!(b.entity.row(0), &[0.5, 0.3, 0.2]);
        assert_eq!(b.k, 3);
    }

    #[test]
    fn bridge_rows_keep_min_k_nonzeros() {
        // One-hot rows have a single nonzero regardless of K.
        let p = Tensor::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = init_entity_bridges(&p, 3).unwrap();
        assert_eq!(b.entity.row(0).iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(b.entity.row(1).iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn bad_distribution_is_rejected() {
        let p = Tensor::from_vec(1, 3, vec![0.5, 0.3, 0.1]).unwrap();
        assert!(matches!(init_entity_bridges(&p, 2), Err(GbError::Input(_))));
    }

    #[test]
    fn duplicate_edges_are_rejected() {
        let mut g = HeteroGraph::new();
        let (se, _) = build_scene_into(&mut g, &unit_boxes(2)).unwrap();
        let et = g.find_etype("subjectOf", NodeKind::SE, NodeKind::SP).unwrap();
        let sp = g.node_ids_of_kind(NodeKind::SP)[0];
        assert!(g.push_edge(se[0], sp, et, 1.0).is_err());
    }
}
