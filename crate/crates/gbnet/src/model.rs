//! The bridging model: state init, typed message passing, GRU updates
//! and bridge refinement, unrolled for a fixed number of rounds.
//!
//! Per round, every node emits a message through its kind's send head;
//! each node then sums incoming messages per (source kind, edge type)
//! slot — scene and commonsense edges with their fixed weights, bridge
//! edges with the current bridge weights — concatenates the slots in a
//! fixed order, applies the receive head, and updates its state with a
//! GRU. New bridge weights are then computed as row-softmaxed attention
//! scores between scene and class states and sparsified to the top
//! K_bridge entries per row. Everything runs on a [`Tape`] so training
//! can differentiate through all unrolled rounds; sparsification acts as
//! a fixed mask in the backward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commonsense::CommonsenseGraph;
use crate::error::{GbError, Result};
use crate::graph::{
    bridge_edge_types, build_scene_into, init_entity_bridges, scene_edge_types, BBox, BridgeSet,
    EdgeFamily, EdgeType, EdgeTypeId, HeteroGraph, NodeKind,
};
use crate::tape::{Tape, Var};
use crate::tensor::{MlpHead, Tensor};

/// Evaluation regime. SGCls replaces detected boxes by ground-truth
/// boxes; PredCls additionally clamps entity bridges to the ground-truth
/// labels so only predicates are inferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    SgGen,
    SgCls,
    PredCls,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::SgGen => "sggen",
            InferenceMode::SgCls => "sgcls",
            InferenceMode::PredCls => "predcls",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sggen" => Some(InferenceMode::SgGen),
            "sgcls" => Some(InferenceMode::SgCls),
            "predcls" => Some(InferenceMode::PredCls),
            _ => None,
        }
    }
}

/// Per-image inputs produced by the detector stand-in.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub boxes: Vec<BBox>,
    /// Per-entity visual feature.
    pub features: Vec<Tensor>,
    /// n_se x n_ce detector label distributions.
    pub label_dists: Tensor,
    /// Per ordered pair, in [`crate::graph::ordered_pairs`] order.
    pub union_features: Vec<Tensor>,
    /// Ground-truth entity class (CE index) per entity, for PredCls.
    pub gt_labels: Option<Vec<usize>>,
}

/// One state vector per graph node, aligned to node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub states: Vec<Tensor>,
}

impl NodeStates {
    pub fn dim(&self) -> usize {
        self.states.first().map(|t| t.rows()).unwrap_or(0)
    }
}

/// A per-image graph: the commonsense block (CE then CP) followed by the
/// scene block (SE then SP).
#[derive(Debug, Clone)]
pub struct ImageGraph {
    pub graph: HeteroGraph,
    pub n_ce: usize,
    pub n_cp: usize,
    pub n_se: usize,
    pub n_sp: usize,
}

impl ImageGraph {
    pub fn ce_global(&self, i: usize) -> usize {
        i
    }

    pub fn cp_global(&self, i: usize) -> usize {
        self.n_ce + i
    }

    pub fn se_global(&self, i: usize) -> usize {
        self.n_ce + self.n_cp + i
    }

    pub fn sp_global(&self, i: usize) -> usize {
        self.n_ce + self.n_cp + self.n_se + i
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// (subject, object) SE local indices of SP `i`, in allocation order.
    pub fn pair_of(&self, sp_local: usize) -> (usize, usize) {
        let node = self.graph.node(self.sp_global(sp_local));
        let off = self.se_global(0);
        (node.subj_id.unwrap() - off, node.obj_id.unwrap() - off)
    }
}

/// Commonsense nodes and edges plus the scene skeleton for one image.
pub fn build_image_graph(cs: &CommonsenseGraph, boxes: &[BBox]) -> Result<ImageGraph> {
    let mut graph = cs.to_hetero()?;
    let (se_ids, sp_ids) = build_scene_into(&mut graph, boxes)?;
    Ok(ImageGraph {
        graph,
        n_ce: cs.n_ce(),
        n_cp: cs.n_cp(),
        n_se: se_ids.len(),
        n_sp: sp_ids.len(),
    })
}

/// One aggregation slot: messages from `src_kind` along `name` edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotKey {
    pub src_kind: NodeKind,
    pub name: String,
    pub family: EdgeFamily,
}

/// Fixed concatenation order of aggregation slots per destination kind:
/// source kinds in SE, SP, CE, CP order, edge type names lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    pub slots: [Vec<SlotKey>; 4],
}

impl SlotLayout {
    pub fn from_edge_types<'a>(etypes: impl Iterator<Item = &'a EdgeType>) -> Self {
        let mut slots: [Vec<(usize, String, NodeKind, EdgeFamily)>; 4] = Default::default();
        for et in etypes {
            let entry =
                (et.src_kind.index(), et.name.clone(), et.src_kind, et.family);
            let dst = et.dst_kind.index();
            if !slots[dst].iter().any(|e| e.0 == entry.0 && e.1 == entry.1) {
                slots[dst].push(entry);
            }
        }
        let mut out: [Vec<SlotKey>; 4] = Default::default();
        for (dst, mut list) in slots.into_iter().enumerate() {
            list.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            out[dst] = list
                .into_iter()
                .map(|(_, name, src_kind, family)| SlotKey { src_kind, name, family })
                .collect();
        }
        SlotLayout { slots: out }
    }

    /// Layout induced by a commonsense graph: the fixed scene and bridge
    /// types plus the graph's declared commonsense types.
    pub fn for_commonsense(cs: &CommonsenseGraph) -> Self {
        let mut all = scene_edge_types();
        all.extend(bridge_edge_types());
        all.extend(cs.etypes.iter().cloned());
        Self::from_edge_types(all.iter())
    }

    pub fn counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.slots[i].len())
    }
}

/// Model shape hyperparameters. `in_dims` are the init-head input widths
/// per kind (SE: visual feature, SP: union feature, CE/CP: embedding);
/// `slot_counts` pin the receive-head widths to a slot layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub hidden: usize,
    pub t_steps: usize,
    pub k_bridge: usize,
    pub in_dims: [usize; 4],
    pub slot_counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wz: Tensor,
    pub uz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindParams {
    pub init: LinearHead,
    pub send: MlpHead,
    pub receive: MlpHead,
    pub att: MlpHead,
    pub gru: GruCell,
}

/// Tensor field names within one kind, in canonical parameter order.
pub const KIND_FIELDS: [&str; 20] = [
    "init.w", "init.b", "send.w1", "send.b1", "send.w2", "send.b2", "receive.w1", "receive.b1",
    "receive.w2", "receive.b2", "att.w1", "att.b1", "att.w2", "att.b2", "gru.wz", "gru.uz",
    "gru.wr", "gru.ur", "gru.wh", "gru.uh",
];

impl KindParams {
    pub fn field(&self, i: usize) -> &Tensor {
        match i {
            0 => &self.init.w,
            1 => &self.init.b,
            2 => &self.send.w1,
            3 => &self.send.b1,
            4 => &self.send.w2,
            5 => &self.send.b2,
            6 => &self.receive.w1,
            7 => &self.receive.b1,
            8 => &self.receive.w2,
            9 => &self.receive.b2,
            10 => &self.att.w1,
            11 => &self.att.b1,
            12 => &self.att.w2,
            13 => &self.att.b2,
            14 => &self.gru.wz,
            15 => &self.gru.uz,
            16 => &self.gru.wr,
            17 => &self.gru.ur,
            18 => &self.gru.wh,
            19 => &self.gru.uh,
            _ => panic!("field index out of range"),
        }
    }

    pub fn field_mut(&mut self, i: usize) -> &mut Tensor {
        match i {
            0 => &mut self.init.w,
            1 => &mut self.init.b,
            2 => &mut self.send.w1,
            3 => &mut self.send.b1,
            4 => &mut self.send.w2,
            5 => &mut self.send.b2,
            6 => &mut self.receive.w1,
            7 => &mut self.receive.b1,
            8 => &mut self.receive.w2,
            9 => &mut self.receive.b2,
            10 => &mut self.att.w1,
            11 => &mut self.att.b1,
            12 => &mut self.att.w2,
            13 => &mut self.att.b2,
            14 => &mut self.gru.wz,
            15 => &mut self.gru.uz,
            16 => &mut self.gru.wr,
            17 => &mut self.gru.ur,
            18 => &mut self.gru.wh,
            19 => &mut self.gru.uh,
            _ => panic!("field index out of range"),
        }
    }
}

/// All trainable heads, shared across nodes of each kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub kinds: [KindParams; 4],
}

impl ModelParams {
    pub fn n_tensors(&self) -> usize {
        4 * KIND_FIELDS.len()
    }

    pub fn tensor_name(id: usize) -> String {
        let kind = NodeKind::ALL[id / KIND_FIELDS.len()];
        let field = KIND_FIELDS[id % KIND_FIELDS.len()];
        format!("{}.{}", kind.name().to_ascii_lowercase(), field)
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        self.kinds[id / KIND_FIELDS.len()].field(id % KIND_FIELDS.len())
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        self.kinds[id / KIND_FIELDS.len()].field_mut(id % KIND_FIELDS.len())
    }

    pub fn tensor_id(name: &str) -> Option<usize> {
        (0..4 * KIND_FIELDS.len()).find(|&i| Self::tensor_name(i) == name)
    }

    pub fn kind(&self, k: NodeKind) -> &KindParams {
        &self.kinds[k.index()]
    }

    /// Xavier-uniform weights, small random biases, deterministic from
    /// the seed. Biases are non-zero so that no ReLU unit starts exactly
    /// on its kink (zero-embedding background nodes and empty slots feed
    /// exact zeros into the heads).
    pub fn init_random(dims: &ModelDims, seed: u64) -> Self {
        fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
            let data: Vec<f64> =
                (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::from_vec(rows, cols, data).expect("shape")
        }
        let rng = &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
        let mat =
            |rng: &mut ChaCha8Rng, rows: usize, cols: usize| uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt());
        let bias = |rng: &mut ChaCha8Rng, rows: usize| uniform(rng, rows, 1, 0.05);
        let d = dims.d;
        let h = dims.hidden;
        let kinds = [0, 1, 2, 3].map(|k| {
            let recv_in = d * dims.slot_counts[k];
            KindParams {
                init: LinearHead { w: mat(rng, d, dims.in_dims[k]), b: bias(rng, d) },
                send: MlpHead {
                    w1: mat(rng, h, d),
                    b1: bias(rng, h),
                    w2: mat(rng, d, h),
                    b2: bias(rng, d),
                },
                receive: MlpHead {
                    w1: mat(rng, h, recv_in),
                    b1: bias(rng, h),
                    w2: mat(rng, d, h),
                    b2: bias(rng, d),
                },
                att: MlpHead {
                    w1: mat(rng, h, d),
                    b1: bias(rng, h),
                    w2: mat(rng, d, h),
                    b2: bias(rng, d),
                },
                gru: GruCell {
                    wz: mat(rng, d, d),
                    uz: mat(rng, d, d),
                    wr: mat(rng, d, d),
                    ur: mat(rng, d, d),
                    wh: mat(rng, d, d),
                    uh: mat(rng, d, d),
                },
            }
        });
        ModelParams { dims: dims.clone(), kinds }
    }
}

// ---------------------------------------------------------------------------
// Traced building blocks
// ---------------------------------------------------------------------------

pub(crate) struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub(crate) struct GruVars {
    wz: Var,
    uz: Var,
    wr: Var,
    ur: Var,
    wh: Var,
    uh: Var,
}

pub(crate) struct KindVars {
    init_w: Var,
    init_b: Var,
    send: MlpVars,
    receive: MlpVars,
    att: MlpVars,
    gru: GruVars,
}

pub(crate) struct ParamVars {
    kinds: [KindVars; 4],
}

impl ParamVars {
    fn kind(&self, k: NodeKind) -> &KindVars {
        &self.kinds[k.index()]
    }
}

/// Register every parameter on the tape; param ids follow the canonical
/// tensor order so gradients align with [`ModelParams::tensor`].
pub(crate) fn lift_params(tape: &mut Tape, params: &ModelParams) -> Result<ParamVars> {
    let mut vars = Vec::with_capacity(params.n_tensors());
    for id in 0..params.n_tensors() {
        vars.push(tape.param(id, params.tensor(id))?);
    }
    let per = KIND_FIELDS.len();
    let mut kind_vars = Vec::new();
    for k in 0..4 {
        let v = &vars[k * per..(k + 1) * per];
        kind_vars.push(KindVars {
            init_w: v[0],
            init_b: v[1],
            send: MlpVars { w1: v[2], b1: v[3], w2: v[4], b2: v[5] },
            receive: MlpVars { w1: v[6], b1: v[7], w2: v[8], b2: v[9] },
            att: MlpVars { w1: v[10], b1: v[11], w2: v[12], b2: v[13] },
            gru: GruVars { wz: v[14], uz: v[15], wr: v[16], ur: v[17], wh: v[18], uh: v[19] },
        });
    }
    let kinds = match <[KindVars; 4]>::try_from(kind_vars) {
        Ok(k) => k,
        Err(_) => unreachable!(),
    };
    Ok(ParamVars { kinds })
}

fn traced_linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = tape.matvec(w, x)?;
    tape.add(y, b)
}

fn traced_mlp(tape: &mut Tape, mlp: &MlpVars, x: Var) -> Result<Var> {
    let h = traced_linear(tape, mlp.w1, mlp.b1, x)?;
    let h = tape.relu(h)?;
    traced_linear(tape, mlp.w2, mlp.b2, h)
}

fn traced_gru(tape: &mut Tape, gru: &GruVars, x: Var, m: Var) -> Result<Var> {
    let z = {
        let a = tape.matvec(gru.wz, m)?;
        let b = tape.matvec(gru.uz, x)?;
        let s = tape.add(a, b)?;
        tape.sigmoid(s)?
    };
    let r = {
        let a = tape.matvec(gru.wr, m)?;
        let b = tape.matvec(gru.ur, x)?;
        let s = tape.add(a, b)?;
        tape.sigmoid(s)?
    };
    let h = {
        let rx = tape.mul(r, x)?;
        let a = tape.matvec(gru.wh, m)?;
        let b = tape.matvec(gru.uh, rx)?;
        let s = tape.add(a, b)?;
        tape.tanh(s)?
    };
    // x' = (1 - z) * x + z * h
    let neg_z = tape.scale(z, -1.0)?;
    let ones = tape.constant(ones_like(tape.value(neg_z).rows()))?;
    let one_minus_z = tape.add(ones, neg_z)?;
    let keep = tape.mul(one_minus_z, x)?;
    let new = tape.mul(z, h)?;
    tape.add(keep, new)
}

fn ones_like(n: usize) -> Tensor {
    Tensor::vector(&vec![1.0; n])
}

/// A bridge row during the unrolled forward: either fixed values
/// (detector init, PredCls clamp) or a tracked dense softmax row.
#[derive(Clone)]
pub(crate) enum RowRef {
    Fixed(Vec<f64>),
    Tracked(Var),
}

#[derive(Clone, Copy)]
enum WeightRef {
    Const(f64),
    Scalar(Var),
}

/// Current bridge weights plus their top-K survivor sets.
pub(crate) struct BridgeState {
    entity_rows: Vec<RowRef>,
    entity_survivors: Vec<Vec<usize>>,
    predicate_rows: Vec<RowRef>,
    predicate_survivors: Vec<Vec<usize>>,
    k: usize,
}

impl BridgeState {
    /// Lift value-level bridges for a single message round: dense rows
    /// become fixed rows; survivors are the nonzeros of the sparsified
    /// matrices.
    pub(crate) fn from_values(bridges: &BridgeSet, ig: &ImageGraph) -> Self {
        let row_of = |dense: &Tensor, sparse: &Tensor, i: usize, cols: usize| {
            if i < dense.rows() && dense.cols() == cols {
                (
                    RowRef::Fixed(dense.row(i).to_vec()),
                    sparse.row(i).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect(),
                )
            } else {
                (RowRef::Fixed(vec![0.0; cols]), Vec::new())
            }
        };
        let mut entity_rows = Vec::new();
        let mut entity_survivors = Vec::new();
        for i in 0..ig.n_se {
            let (r, s) = row_of(&bridges.entity_dense, &bridges.entity, i, ig.n_ce);
            entity_rows.push(r);
            entity_survivors.push(s);
        }
        let mut predicate_rows = Vec::new();
        let mut predicate_survivors = Vec::new();
        for i in 0..ig.n_sp {
            let (r, s) = row_of(&bridges.predicate_dense, &bridges.predicate, i, ig.n_cp);
            predicate_rows.push(r);
            predicate_survivors.push(s);
        }
        BridgeState { entity_rows, entity_survivors, predicate_rows, predicate_survivors, k: bridges.k }
    }

    fn row_values(&self, tape: &Tape, row: &RowRef) -> Vec<f64> {
        match row {
            RowRef::Fixed(v) => v.clone(),
            RowRef::Tracked(var) => tape.value(*var).as_slice().to_vec(),
        }
    }

    /// Extract value-level bridges (dense and sparsified).
    pub(crate) fn to_bridge_set(&self, tape: &Tape, n_ce: usize, n_cp: usize) -> BridgeSet {
        let pack = |rows: &[RowRef], survivors: &[Vec<usize>], cols: usize| {
            let mut dense = Tensor::zeros(rows.len(), cols);
            let mut sparse = Tensor::zeros(rows.len(), cols);
            for (i, row) in rows.iter().enumerate() {
                let vals = self.row_values(tape, row);
                dense.row_mut(i).copy_from_slice(&vals);
                for &j in &survivors[i] {
                    sparse.set(i, j, vals[j]);
                }
            }
            (dense, sparse)
        };
        let (entity_dense, entity) = pack(&self.entity_rows, &self.entity_survivors, n_ce);
        let (predicate_dense, predicate) = pack(&self.predicate_rows, &self.predicate_survivors, n_cp);
        BridgeSet { entity, predicate, entity_dense, predicate_dense, k: self.k }
    }
}

/// Everything the trainer needs from one traced forward pass.
pub struct TracedForward {
    /// Final-round dense score rows (pre-sparsification), one per SE/SP.
    pub entity_rows: Vec<Option<Var>>,
    pub predicate_rows: Vec<Option<Var>>,
    pub bridges: BridgeSet,
    pub states: NodeStates,
    #[doc(hidden)]
    pub state_vars: Vec<Var>,
}

struct ForwardCtx<'a> {
    ig: &'a ImageGraph,
    layout: &'a SlotLayout,
    /// Per kind and slot, the graph edge-type id (scene/commonsense
    /// slots only; bridge slots aggregate from the bridge state).
    slot_etypes: [Vec<Option<EdgeTypeId>>; 4],
    zero_d: Var,
    k_bridge: usize,
}

impl<'a> ForwardCtx<'a> {
    fn new(
        tape: &mut Tape,
        ig: &'a ImageGraph,
        layout: &'a SlotLayout,
        d: usize,
        k_bridge: usize,
    ) -> Result<Self> {
        let mut slot_etypes: [Vec<Option<EdgeTypeId>>; 4] = Default::default();
        for (dst, slots) in layout.slots.iter().enumerate() {
            for slot in slots {
                let id = if slot.family == EdgeFamily::Bridge {
                    None
                } else {
                    ig.graph.find_etype(&slot.name, slot.src_kind, NodeKind::ALL[dst])
                };
                slot_etypes[dst].push(id);
            }
        }
        let zero_d = tape.constant(Tensor::zeros(d, 1))?;
        Ok(ForwardCtx { ig, layout, slot_etypes, zero_d, k_bridge })
    }
}

fn weighted_term(tape: &mut Tape, msg: Var, w: WeightRef) -> Result<Var> {
    match w {
        WeightRef::Const(c) => tape.scale(msg, c),
        WeightRef::Scalar(s) => tape.scale_by(msg, s),
    }
}

fn sum_terms(tape: &mut Tape, terms: &[Var], zero: Var) -> Result<Var> {
    match terms.split_first() {
        None => Ok(zero),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Slot aggregates for one node: one d-vector per slot of its kind, in
/// layout order. Empty slots contribute an exact zero vector.
fn traced_slot_vectors(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    bridges: &BridgeWeights,
    msgs: &[Var],
    node_id: usize,
) -> Result<Vec<Var>> {
    let ig = ctx.ig;
    let kind = ig.graph.node(node_id).kind;
    let ki = kind.index();
    let mut out = Vec::with_capacity(ctx.layout.slots[ki].len());
    for (si, slot) in ctx.layout.slots[ki].iter().enumerate() {
        let mut terms = Vec::new();
        match slot.family {
            EdgeFamily::Scene | EdgeFamily::Commonsense => {
                if let Some(etype) = ctx.slot_etypes[ki][si] {
                    for &(src, w) in ig.graph.in_edges(etype, node_id) {
                        terms.push(weighted_term(tape, msgs[src], WeightRef::Const(w))?);
                    }
                }
            }
            EdgeFamily::Bridge => match (slot.name.as_str(), slot.src_kind) {
                // CE -> SE with the entity bridge weights of this SE.
                ("hasInstance", NodeKind::CE) => {
                    let i = node_id - ig.se_global(0);
                    for &(j, w) in &bridges.entity[i] {
                        terms.push(weighted_term(tape, msgs[ig.ce_global(j)], w)?);
                    }
                }
                // SE -> CE across every SE that bridges to this class.
                ("classifiedTo", NodeKind::SE) => {
                    let j = node_id - ig.ce_global(0);
                    for (i, row) in bridges.entity.iter().enumerate() {
                        for &(jj, w) in row {
                            if jj == j {
                                terms.push(weighted_term(tape, msgs[ig.se_global(i)], w)?);
                            }
                        }
                    }
                }
                ("hasInstance", NodeKind::CP) => {
                    let i = node_id - ig.sp_global(0);
                    for &(j, w) in &bridges.predicate[i] {
                        terms.push(weighted_term(tape, msgs[ig.cp_global(j)], w)?);
                    }
                }
                ("classifiedTo", NodeKind::SP) => {
                    let j = node_id - ig.cp_global(0);
                    for (i, row) in bridges.predicate.iter().enumerate() {
                        for &(jj, w) in row {
                            if jj == j {
                                terms.push(weighted_term(tape, msgs[ig.sp_global(i)], w)?);
                            }
                        }
                    }
                }
                _ => {
                    return Err(GbError::Config(format!(
                        "unknown bridge slot {}/{}",
                        slot.name,
                        slot.src_kind.name()
                    )))
                }
            },
        }
        out.push(sum_terms(tape, &terms, ctx.zero_d)?);
    }
    Ok(out)
}

/// Surviving bridge weights per scene node: (class index, weight).
struct BridgeWeights {
    entity: Vec<Vec<(usize, WeightRef)>>,
    predicate: Vec<Vec<(usize, WeightRef)>>,
}

impl BridgeWeights {
    fn from_state(tape: &mut Tape, state: &BridgeState) -> Result<Self> {
        let lift = |tape: &mut Tape, rows: &[RowRef], survivors: &[Vec<usize>]| -> Result<Vec<Vec<(usize, WeightRef)>>> {
            let mut out = Vec::with_capacity(rows.len());
            for (row, surv) in rows.iter().zip(survivors) {
                let mut entries = Vec::with_capacity(surv.len());
                for &j in surv {
                    let w = match row {
                        RowRef::Fixed(v) => WeightRef::Const(v[j]),
                        RowRef::Tracked(var) => WeightRef::Scalar(tape.pick(*var, j)?),
                    };
                    entries.push((j, w));
                }
                out.push(entries);
            }
            Ok(out)
        };
        Ok(BridgeWeights {
            entity: lift(tape, &state.entity_rows, &state.entity_survivors)?,
            predicate: lift(tape, &state.predicate_rows, &state.predicate_survivors)?,
        })
    }
}

/// One full message round: send, aggregate, receive, GRU. All updates
/// use the pre-round states (simultaneous update).
fn traced_round(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    pv: &ParamVars,
    states: &[Var],
    bridges: &BridgeState,
) -> Result<Vec<Var>> {
    let ig = ctx.ig;
    let mut msgs = Vec::with_capacity(states.len());
    for (id, &x) in states.iter().enumerate() {
        let kind = ig.graph.node(id).kind;
        msgs.push(traced_mlp(tape, &pv.kind(kind).send, x)?);
    }
    let weights = BridgeWeights::from_state(tape, bridges)?;
    let mut next = Vec::with_capacity(states.len());
    for (id, &x) in states.iter().enumerate() {
        let kind = ig.graph.node(id).kind;
        let slots = traced_slot_vectors(tape, ctx, &weights, &msgs, id)?;
        let cat = tape.concat(&slots)?;
        let m_in = traced_mlp(tape, &pv.kind(kind).receive, cat)?;
        next.push(traced_gru(tape, &pv.kind(kind).gru, x, m_in)?);
    }
    Ok(next)
}

/// Recompute bridge rows from the current states: row-softmaxed
/// asymmetric attention scores, sparsified to the top K. In PredCls the
/// entity rows are overwritten with one-hot ground truth.
fn traced_refine(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    pv: &ParamVars,
    states: &[Var],
    mode: InferenceMode,
    gt_labels: Option<&[usize]>,
) -> Result<BridgeState> {
    let ig = ctx.ig;
    let k = ctx.k_bridge;

    let att = |tape: &mut Tape, kind: NodeKind, ids: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for id in ids {
            out.push(traced_mlp(tape, &pv.kind(kind).att, states[id])?);
        }
        Ok(out)
    };

    let mut entity_rows = Vec::with_capacity(ig.n_se);
    let mut entity_survivors = Vec::with_capacity(ig.n_se);
    if mode == InferenceMode::PredCls {
        let gt = gt_labels.ok_or_else(|| {
            GbError::Input("PredCls requires ground-truth entity labels".into())
        })?;
        if gt.len() != ig.n_se {
            return Err(GbError::Input(format!(
                "{} ground-truth labels for {} entities",
                gt.len(),
                ig.n_se
            )));
        }
        for &label in gt {
            let mut row = vec![0.0; ig.n_ce];
            row[label] = 1.0;
            entity_rows.push(RowRef::Fixed(row));
            entity_survivors.push(vec![label]);
        }
    } else {
        let att_se = att(tape, NodeKind::SE, &mut (0..ig.n_se).map(|i| ig.se_global(i)))?;
        let att_ce = att(tape, NodeKind::CE, &mut (0..ig.n_ce).map(|i| ig.ce_global(i)))?;
        for a_se in &att_se {
            let mut logits = Vec::with_capacity(ig.n_ce);
            for a_ce in &att_ce {
                logits.push(tape.dot(*a_se, *a_ce)?);
            }
            let row = tape.concat(&logits)?;
            let row = tape.softmax(row)?;
            entity_survivors.push(BridgeSet::top_k_indices(tape.value(row).as_slice(), k));
            entity_rows.push(RowRef::Tracked(row));
        }
    }

    let att_sp = att(tape, NodeKind::SP, &mut (0..ig.n_sp).map(|i| ig.sp_global(i)))?;
    let att_cp = att(tape, NodeKind::CP, &mut (0..ig.n_cp).map(|i| ig.cp_global(i)))?;
    let mut predicate_rows = Vec::with_capacity(ig.n_sp);
    let mut predicate_survivors = Vec::with_capacity(ig.n_sp);
    for a_sp in &att_sp {
        let mut logits = Vec::with_capacity(ig.n_cp);
        for a_cp in &att_cp {
            logits.push(tape.dot(*a_sp, *a_cp)?);
        }
        let row = tape.concat(&logits)?;
        let row = tape.softmax(row)?;
        predicate_survivors.push(BridgeSet::top_k_indices(tape.value(row).as_slice(), k));
        predicate_rows.push(RowRef::Tracked(row));
    }

    Ok(BridgeState { entity_rows, entity_survivors, predicate_rows, predicate_survivors, k })
}

fn traced_init(
    tape: &mut Tape,
    ig: &ImageGraph,
    cs: &CommonsenseGraph,
    inputs: &SceneInputs,
    pv: &ParamVars,
) -> Result<Vec<Var>> {
    let dims_err = |what: &str, got: usize, want: usize| {
        GbError::Input(format!("{} has dim {}, init head expects {}", what, got, want))
    };
    let mut states = vec![None; ig.n_nodes()];
    for i in 0..ig.n_ce {
        let kv = &pv.kinds[NodeKind::CE.index()];
        let e = tape.constant(cs.entity_embeddings[i].clone())?;
        states[ig.ce_global(i)] = Some(traced_linear(tape, kv.init_w, kv.init_b, e)?);
    }
    for i in 0..ig.n_cp {
        let kv = &pv.kinds[NodeKind::CP.index()];
        let e = tape.constant(cs.predicate_embeddings[i].clone())?;
        states[ig.cp_global(i)] = Some(traced_linear(tape, kv.init_w, kv.init_b, e)?);
    }
    if inputs.features.len() != ig.n_se {
        return Err(GbError::Input(format!(
            "{} features for {} entities",
            inputs.features.len(),
            ig.n_se
        )));
    }
    if inputs.union_features.len() != ig.n_sp {
        return Err(GbError::Input(format!(
            "{} union features for {} predicate nodes",
            inputs.union_features.len(),
            ig.n_sp
        )));
    }
    for (i, f) in inputs.features.iter().enumerate() {
        let kv = &pv.kinds[NodeKind::SE.index()];
        let want = tape.value(kv.init_w).cols();
        if f.rows() != want {
            return Err(dims_err("entity feature", f.rows(), want));
        }
        let x = tape.constant(f.clone())?;
        states[ig.se_global(i)] = Some(traced_linear(tape, kv.init_w, kv.init_b, x)?);
    }
    for (i, u) in inputs.union_features.iter().enumerate() {
        let kv = &pv.kinds[NodeKind::SP.index()];
        let want = tape.value(kv.init_w).cols();
        if u.rows() != want {
            return Err(dims_err("union feature", u.rows(), want));
        }
        let x = tape.constant(u.clone())?;
        states[ig.sp_global(i)] = Some(traced_linear(tape, kv.init_w, kv.init_b, x)?);
    }
    Ok(states.into_iter().map(|s| s.expect("all nodes initialized")).collect())
}

fn initial_bridge_state(
    ig: &ImageGraph,
    inputs: &SceneInputs,
    mode: InferenceMode,
    k: usize,
) -> Result<BridgeState> {
    let mut entity_rows = Vec::with_capacity(ig.n_se);
    let mut entity_survivors = Vec::with_capacity(ig.n_se);
    if mode == InferenceMode::PredCls {
        let gt = inputs
            .gt_labels
            .as_ref()
            .ok_or_else(|| GbError::Input("PredCls requires ground-truth entity labels".into()))?;
        for &label in gt {
            if label >= ig.n_ce {
                return Err(GbError::Input(format!("gt label {} out of range", label)));
            }
            let mut row = vec![0.0; ig.n_ce];
            row[label] = 1.0;
            entity_rows.push(RowRef::Fixed(row));
            entity_survivors.push(vec![label]);
        }
    } else {
        if inputs.label_dists.rows() != ig.n_se || inputs.label_dists.cols() != ig.n_ce {
            return Err(GbError::Input(format!(
                "label distributions are {}x{}, expected {}x{}",
                inputs.label_dists.rows(),
                inputs.label_dists.cols(),
                ig.n_se,
                ig.n_ce
            )));
        }
        let init = init_entity_bridges(&inputs.label_dists, k)?;
        for i in 0..ig.n_se {
            entity_rows.push(RowRef::Fixed(init.entity_dense.row(i).to_vec()));
            entity_survivors.push(
                init.entity
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, _)| j)
                    .collect(),
            );
        }
    }
    // Predicate bridges start as an empty set.
    let predicate_rows = vec![RowRef::Fixed(vec![0.0; ig.n_cp]); ig.n_sp];
    let predicate_survivors = vec![Vec::new(); ig.n_sp];
    Ok(BridgeState { entity_rows, entity_survivors, predicate_rows, predicate_survivors, k })
}

/// Check that the model was built for this commonsense graph's slot
/// layout and input dims.
fn check_layout(params: &ModelParams, layout: &SlotLayout) -> Result<()> {
    if params.dims.slot_counts != layout.counts() {
        return Err(GbError::Config(format!(
            "receive-head slot counts {:?} do not match graph slot layout {:?}",
            params.dims.slot_counts,
            layout.counts()
        )));
    }
    Ok(())
}

/// Full unrolled forward pass on an existing tape. Returns the final
/// dense rows as tape vars (for the loss) along with value-level outputs.
pub fn forward_traced(
    tape: &mut Tape,
    ig: &ImageGraph,
    inputs: &SceneInputs,
    cs: &CommonsenseGraph,
    params: &ModelParams,
    mode: InferenceMode,
) -> Result<TracedForward> {
    let layout = SlotLayout::for_commonsense(cs);
    check_layout(params, &layout)?;
    let pv = lift_params(tape, params)?;
    let ctx = ForwardCtx::new(tape, ig, &layout, params.dims.d, params.dims.k_bridge)?;

    let mut states = traced_init(tape, ig, cs, inputs, &pv)?;
    let mut bridges = initial_bridge_state(ig, inputs, mode, params.dims.k_bridge)?;

    for _ in 0..params.dims.t_steps {
        states = traced_round(tape, &ctx, &pv, &states, &bridges)?;
        bridges = traced_refine(tape, &ctx, &pv, &states, mode, inputs.gt_labels.as_deref())?;
    }

    let bridge_set = bridges.to_bridge_set(tape, ig.n_ce, ig.n_cp);
    let node_states =
        NodeStates { states: states.iter().map(|&v| tape.value(v).clone()).collect() };
    let row_var = |r: &RowRef| match r {
        RowRef::Tracked(v) => Some(*v),
        RowRef::Fixed(_) => None,
    };
    Ok(TracedForward {
        entity_rows: bridges.entity_rows.iter().map(row_var).collect(),
        predicate_rows: bridges.predicate_rows.iter().map(row_var).collect(),
        bridges: bridge_set,
        states: node_states,
        state_vars: states,
    })
}

/// Inference entry point: detector-initialized bridges, T rounds of
/// message passing and refinement; returns the final bridge weights and
/// node states.
pub fn forward(
    ig: &ImageGraph,
    inputs: &SceneInputs,
    cs: &CommonsenseGraph,
    params: &ModelParams,
    mode: InferenceMode,
) -> Result<(BridgeSet, NodeStates)> {
    let mut tape = Tape::new();
    let out = forward_traced(&mut tape, ig, inputs, cs, params, mode)?;
    Ok((out.bridges, out.states))
}

/// Initialize node states only (linear init heads).
pub fn init_states(
    ig: &ImageGraph,
    inputs: &SceneInputs,
    cs: &CommonsenseGraph,
    params: &ModelParams,
) -> Result<NodeStates> {
    let mut tape = Tape::new();
    let pv = lift_params(&mut tape, params)?;
    let states = traced_init(&mut tape, ig, cs, inputs, &pv)?;
    Ok(NodeStates { states: states.iter().map(|&v| tape.value(v).clone()).collect() })
}

/// One value-level message round (send, aggregate, receive, GRU).
pub fn message_round(
    ig: &ImageGraph,
    bridges: &BridgeSet,
    states: &NodeStates,
    params: &ModelParams,
) -> Result<NodeStates> {
    if states.states.len() != ig.n_nodes() {
        return Err(GbError::Input(format!(
            "{} states for {} nodes",
            states.states.len(),
            ig.n_nodes()
        )));
    }
    let layout = SlotLayout::from_edge_types(
        ig.graph.edge_types().iter().chain(bridge_edge_types().iter()),
    );
    check_layout(params, &layout)?;
    let mut tape = Tape::new();
    let pv = lift_params(&mut tape, params)?;
    let ctx = ForwardCtx::new(&mut tape, ig, &layout, params.dims.d, params.dims.k_bridge)?;
    let state_vars: Vec<Var> = states
        .states
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<_>>()?;
    let bridge_state = BridgeState::from_values(bridges, ig);
    let next = traced_round(&mut tape, &ctx, &pv, &state_vars, &bridge_state)?;
    Ok(NodeStates { states: next.iter().map(|&v| tape.value(v).clone()).collect() })
}

/// One GRU update for a single node.
pub fn gru_update(x: &Tensor, m: &Tensor, cell: &GruCell) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gru = GruVars {
        wz: tape.constant(cell.wz.clone())?,
        uz: tape.constant(cell.uz.clone())?,
        wr: tape.constant(cell.wr.clone())?,
        ur: tape.constant(cell.ur.clone())?,
        wh: tape.constant(cell.wh.clone())?,
        uh: tape.constant(cell.uh.clone())?,
    };
    let xv = tape.constant(x.clone())?;
    let mv = tape.constant(m.clone())?;
    let out = traced_gru(&mut tape, &gru, xv, mv)?;
    Ok(tape.value(out).clone())
}

/// Value-level bridge refinement from current states.
pub fn refine_bridges(
    ig: &ImageGraph,
    states: &NodeStates,
    params: &ModelParams,
    mode: InferenceMode,
    gt_labels: Option<&[usize]>,
) -> Result<BridgeSet> {
    let mut tape = Tape::new();
    let pv = lift_params(&mut tape, params)?;
    let layout = SlotLayout::from_edge_types(
        ig.graph.edge_types().iter().chain(bridge_edge_types().iter()),
    );
    let ctx = ForwardCtx::new(&mut tape, ig, &layout, params.dims.d, params.dims.k_bridge)?;
    let state_vars: Vec<Var> = states
        .states
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<_>>()?;
    let refined = traced_refine(&mut tape, &ctx, &pv, &state_vars, mode, gt_labels)?;
    Ok(refined.to_bridge_set(&tape, ig.n_ce, ig.n_cp))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::commonsense::{assemble, parse_ontology_edges, EmbeddingTable};
    use crate::graph::ordered_pairs;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{}{:02}", prefix, i)).collect()
    }

    /// Tiny commonsense graph: 3 entity + 2 predicate classes plus
    /// backgrounds, with one CE->CE and one CP->CP ontology edge.
    fn tiny_cs(embed_dim: usize) -> CommonsenseGraph {
        let ents = labels("ent", 3);
        let preds = labels("rel", 2);
        let mut table = EmbeddingTable::new(embed_dim);
        for (i, l) in ents.iter().chain(preds.iter()).enumerate() {
            let v: Vec<f64> = (0..embed_dim).map(|d| ((i + 1) * (d + 1)) as f64 * 0.05).collect();
            table.insert(l, v).unwrap();
        }
        let ont =
            parse_ontology_edges("ent00\tSimilarTo\tent01\t0.9\nrel00\tMannerOf\trel01\t0.6")
                .unwrap();
        assemble(&ents, &preds, &ont, &[], &table).unwrap()
    }

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| {
                let x = 0.05 + 0.01 * i as f64;
                BBox::new(x, 0.1, x + 0.4, 0.6).unwrap()
            })
            .collect()
    }

    fn dims_for(cs: &CommonsenseGraph, d: usize, t: usize, k: usize, feat: usize) -> ModelDims {
        let layout = SlotLayout::for_commonsense(cs);
        ModelDims {
            d,
            hidden: 2 * d,
            t_steps: t,
            k_bridge: k,
            in_dims: [feat, feat + 8, cs.embed_dim, cs.embed_dim],
            slot_counts: layout.counts(),
        }
    }

    fn rng_inputs(cs: &CommonsenseGraph, n: usize, feat: usize, seed: u64) -> SceneInputs {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let features =
            (0..n).map(|_| Tensor::vector(&(0..feat).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())).collect();
        let mut dists = Tensor::zeros(n, cs.n_ce());
        for i in 0..n {
            let raw: Vec<f64> = (0..cs.n_ce()).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, v) in raw.iter().enumerate() {
                dists.set(i, j, v / s);
            }
        }
        let union_features = ordered_pairs(n)
            .iter()
            .map(|_| {
                Tensor::vector(&(0..feat + 8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
            })
            .collect();
        SceneInputs {
            boxes: boxes(n),
            features,
            label_dists: dists,
            union_features,
            gt_labels: None,
        }
    }

    #[test]
    fn slot_layout_order_is_kind_then_name() {
        let cs = tiny_cs(3);
        let layout = SlotLayout::for_commonsense(&cs);
        let se_slots: Vec<(&str, NodeKind)> =
            layout.slots[NodeKind::SE.index()].iter().map(|s| (s.name.as_str(), s.src_kind)).collect();
        assert_eq!(
            se_slots,
            vec![("hasObject", NodeKind::SP), ("hasSubject", NodeKind::SP), ("hasInstance", NodeKind::CE)]
        );
        let ce_slots: Vec<(&str, NodeKind)> =
            layout.slots[NodeKind::CE.index()].iter().map(|s| (s.name.as_str(), s.src_kind)).collect();
        assert_eq!(ce_slots, vec![("classifiedTo", NodeKind::SE), ("SimilarTo", NodeKind::CE)]);
    }

    #[test]
    fn zero_features_and_zero_heads_give_zero_states() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = dims_for(&cs, 4, 1, 2, 3);
        let mut params = ModelParams::init_random(&dims, 7);
        // Zero out the init heads.
        for k in 0..4 {
            params.kinds[k].init.w = Tensor::zeros(dims.d, dims.in_dims[k]);
            params.kinds[k].init.b = Tensor::zeros(dims.d, 1);
        }
        let mut inputs = rng_inputs(&cs, 2, 3, 1);
        for f in inputs.features.iter_mut() {
            *f = Tensor::zeros(3, 1);
        }
        for u in inputs.union_features.iter_mut() {
            *u = Tensor::zeros(11, 1);
        }
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        for s in &states.states {
            assert!(s.as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_init_head_reproduces_features() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = ModelDims {
            d: 3,
            hidden: 6,
            t_steps: 1,
            k_bridge: 2,
            in_dims: [3, 3, 3, 3],
            slot_counts: SlotLayout::for_commonsense(&cs).counts(),
        };
        let mut params = ModelParams::init_random(&dims, 7);
        let mut ident = Tensor::zeros(3, 3);
        for i in 0..3 {
            ident.set(i, i, 1.0);
        }
        for k in 0..4 {
            params.kinds[k].init.w = ident.clone();
            params.kinds[k].init.b = Tensor::zeros(3, 1);
        }
        let feat = vec![Tensor::vector(&[0.1, 0.2, 0.3]), Tensor::vector(&[-0.5, 0.0, 0.9])];
        let mut inputs = rng_inputs(&cs, 2, 3, 2);
        inputs.features = feat.clone();
        inputs.union_features = vec![Tensor::vector(&[0.4, 0.5, 0.6]); 2];
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        assert_eq!(states.states[ig.se_global(0)], feat[0]);
        assert_eq!(states.states[ig.se_global(1)], feat[1]);
    }

    #[test]
    fn init_states_match_reference_matmul() {
        let cs = tiny_cs(4);
        let ig = build_image_graph(&cs, &boxes(3)).unwrap();
        let dims = dims_for(&cs, 4, 1, 2, 5);
        let params = ModelParams::init_random(&dims, 11);
        let inputs = rng_inputs(&cs, 3, 5, 3);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        // Independent plain-loop oracle.
        let refmv = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|r| {
                    let mut acc = 0.0;
                    for c in 0..w.cols() {
                        acc += w.get(r, c) * x[c];
                    }
                    acc + b.get(r, 0)
                })
                .collect()
        };
        for i in 0..3 {
            let se = &params.kinds[NodeKind::SE.index()].init;
            let want = refmv(&se.w, &se.b, inputs.features[i].as_slice());
            let got = states.states[ig.se_global(i)].as_slice();
            for (a, b) in want.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for j in 0..cs.n_ce() {
            let ce = &params.kinds[NodeKind::CE.index()].init;
            let want = refmv(&ce.w, &ce.b, cs.entity_embeddings[j].as_slice());
            let got = states.states[ig.ce_global(j)].as_slice();
            for (a, b) in want.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_origin_is_fixed_point_of_zero_cell() {
        let d = 3;
        let zero = Tensor::zeros(d, d);
        let cell = GruCell {
            wz: zero.clone(),
            uz: zero.clone(),
            wr: zero.clone(),
            ur: zero.clone(),
            wh: zero.clone(),
            uh: zero.clone(),
        };
        let x = Tensor::zeros(d, 1);
        let m = Tensor::zeros(d, 1);
        let out = gru_update(&x, &m, &cell).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_overwrites_state() {
        let d = 2;
        let mut big = Tensor::zeros(d, d);
        let mut wh = Tensor::zeros(d, d);
        for i in 0..d {
            big.set(i, i, 50.0);
            wh.set(i, i, 1.0);
        }
        let zero = Tensor::zeros(d, d);
        let cell = GruCell {
            wz: big,
            uz: zero.clone(),
            wr: zero.clone(),
            ur: zero.clone(),
            wh,
            uh: zero.clone(),
        };
        let x = Tensor::vector(&[-0.8, 0.4]);
        let m = Tensor::vector(&[0.7, 0.9]);
        let out = gru_update(&x, &m, &cell).unwrap();
        let h: Vec<f64> = m.as_slice().iter().map(|v| v.tanh()).collect();
        for (o, hv) in out.as_slice().iter().zip(&h) {
            assert!((o - hv).abs() < 1e-6, "{} vs {}", o, hv);
        }
    }

    /// Independent GRU oracle written directly from the update rule.
    fn gru_reference(x: &[f64], m: &[f64], cell: &GruCell) -> Vec<f64> {
        let d = x.len();
        let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|r| (0..d).map(|c| w.get(r, c) * v[c]).sum::<f64>())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wzm = mv(&cell.wz, m);
        let uzx = mv(&cell.uz, x);
        let wrm = mv(&cell.wr, m);
        let urx = mv(&cell.ur, x);
        let z: Vec<f64> = (0..d).map(|i| sig(wzm[i] + uzx[i])).collect();
        let r: Vec<f64> = (0..d).map(|i| sig(wrm[i] + urx[i])).collect();
        let rx: Vec<f64> = (0..d).map(|i| r[i] * x[i]).collect();
        let whm = mv(&cell.wh, m);
        let uhrx = mv(&cell.uh, &rx);
        let h: Vec<f64> = (0..d).map(|i| (whm[i] + uhrx[i]).tanh()).collect();
        (0..d).map(|i| (1.0 - z[i]) * x[i] + z[i] * h[i]).collect()
    }

    #[test]
    fn gru_matches_independent_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let d = 3;
            let mut mat = || {
                let data: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(d, d, data).unwrap()
            };
            let cell = GruCell { wz: mat(), uz: mat(), wr: mat(), ur: mat(), wh: mat(), uh: mat() };
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = gru_update(&Tensor::vector(&x), &Tensor::vector(&m), &cell).unwrap();
            let want = gru_reference(&x, &m, &cell);
            for (a, b) in got.as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_aggregates_zero_and_updates_from_receive_of_zero() {
        // Single detection: SE has no scene in-edges; bridge slot still
        // feeds it. Cut the bridge by using a zero-weight-free bridge set
        // with no survivors.
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(1)).unwrap();
        let dims = dims_for(&cs, 4, 1, 2, 3);
        let params = ModelParams::init_random(&dims, 5);
        let inputs = rng_inputs(&cs, 1, 3, 9);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        let empty = BridgeSet {
            entity: Tensor::zeros(1, cs.n_ce()),
            predicate: Tensor::zeros(0, 0),
            entity_dense: Tensor::zeros(1, cs.n_ce()),
            predicate_dense: Tensor::zeros(0, 0),
            k: 2,
        };
        let next = message_round(&ig, &empty, &states, &params).unwrap();
        // Expected: GRU(x, receive(concat of zero slots)).
        let se = ig.se_global(0);
        let kp = params.kind(NodeKind::SE);
        let zeros = Tensor::zeros(dims.d * dims.slot_counts[NodeKind::SE.index()], 1);
        let m_in = crate::tensor::evaluate_mlp_head(&kp.receive, &zeros).unwrap();
        let want = gru_update(&states.states[se], &m_in, &kp.gru).unwrap();
        assert_eq!(next.states[se], want);
    }

    #[test]
    fn slot_terms_scale_linearly_with_edge_weight() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(1)).unwrap();
        let layout = SlotLayout::for_commonsense(&cs);
        let d = 4;
        let msgs: Vec<Tensor> = (0..ig.n_nodes())
            .map(|i| Tensor::vector(&(0..d).map(|j| (i + j) as f64 * 0.1 + 0.1).collect::<Vec<f64>>()))
            .collect();
        // Entity bridge weight 2.0 from SE 0 to CE 1 (not a distribution;
        // slot aggregation takes weights as given).
        let mut entity = Tensor::zeros(1, cs.n_ce());
        entity.set(0, 1, 2.0);
        let bridges = BridgeSet {
            entity: entity.clone(),
            predicate: Tensor::zeros(0, 0),
            entity_dense: entity,
            predicate_dense: Tensor::zeros(0, 0),
            k: 1,
        };
        let slots =
            test_support::slot_vectors_for_test(&ig, &bridges, &msgs, &layout, d).unwrap();
        // SE slot order: hasObject, hasSubject, hasInstance(CE).
        let se_slots = &slots[ig.se_global(0)];
        let want: Vec<f64> = msgs[ig.ce_global(1)].as_slice().iter().map(|v| 2.0 * v).collect();
        assert_eq!(se_slots[2].as_slice(), want.as_slice());
        // CE 1 classifiedTo slot mirrors it with the same weight.
        let ce_slots = &slots[ig.ce_global(1)];
        let want2: Vec<f64> = msgs[ig.se_global(0)].as_slice().iter().map(|v| 2.0 * v).collect();
        assert_eq!(ce_slots[0].as_slice(), want2.as_slice());
    }

    #[test]
    fn deleting_one_edge_type_only_zeroes_its_slot() {
        let ents = labels("ent", 3);
        let preds = labels("rel", 2);
        let mut table = EmbeddingTable::new(2);
        for (i, l) in ents.iter().chain(preds.iter()).enumerate() {
            table.insert(l, vec![i as f64 * 0.1, 0.3]).unwrap();
        }
        // Two SimilarTo edges plus one RelatedTo edge.
        let full = parse_ontology_edges(
            "ent00\tSimilarTo\tent01\t0.9\nent01\tSimilarTo\tent02\t0.8\nent00\tRelatedTo\tent02\t0.5",
        )
        .unwrap();
        // Same declared types, SimilarTo edges dropped to keep layouts equal.
        let cs_full = assemble(&ents, &preds, &full, &[], &table).unwrap();
        let mut cs_cut = cs_full.clone();
        let similar_to = cs_cut
            .etypes
            .iter()
            .position(|e| e.name == "SimilarTo")
            .unwrap();
        cs_cut.edges.retain(|e| e.etype != similar_to);

        let ig_full = build_image_graph(&cs_full, &boxes(2)).unwrap();
        let ig_cut = build_image_graph(&cs_cut, &boxes(2)).unwrap();
        let layout = SlotLayout::for_commonsense(&cs_full);
        assert_eq!(layout, SlotLayout::for_commonsense(&cs_cut));

        let d = 3;
        let msgs: Vec<Tensor> = (0..ig_full.n_nodes())
            .map(|i| Tensor::vector(&(0..d).map(|j| ((i * 7 + j) % 5) as f64 * 0.2 + 0.1).collect::<Vec<f64>>()))
            .collect();
        let dists = {
            let mut t = Tensor::zeros(2, cs_full.n_ce());
            for i in 0..2 {
                for j in 0..cs_full.n_ce() {
                    t.set(i, j, 1.0 / cs_full.n_ce() as f64);
                }
            }
            t
        };
        let bridges = init_entity_bridges(&dists, 2).unwrap();
        let a = test_support::slot_vectors_for_test(&ig_full, &bridges, &msgs, &layout, d).unwrap();
        let b = test_support::slot_vectors_for_test(&ig_cut, &bridges, &msgs, &layout, d).unwrap();

        let ce_similar_slot = layout.slots[NodeKind::CE.index()]
            .iter()
            .position(|s| s.name == "SimilarTo")
            .unwrap();
        let mut changed = 0;
        for id in 0..ig_full.n_nodes() {
            for (si, (x, y)) in a[id].iter().zip(&b[id]).enumerate() {
                if x != y {
                    changed += 1;
                    // Only the SimilarTo slot of CE nodes may differ...
                    assert_eq!(ig_full.graph.node(id).kind, NodeKind::CE);
                    assert_eq!(si, ce_similar_slot);
                    // ...and it must now be exactly zero.
                    assert!(y.as_slice().iter().all(|v| *v == 0.0));
                }
            }
        }
        assert_eq!(changed, 2);
    }

    #[test]
    fn two_node_round_matches_plain_loop_reference() {
        // Hand-checkable closed graph: 2 entities, d = 2.
        let cs = tiny_cs(2);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = dims_for(&cs, 2, 1, 2, 2);
        let params = ModelParams::init_random(&dims, 3);
        let inputs = rng_inputs(&cs, 2, 2, 4);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        let bridges = init_entity_bridges(&inputs.label_dists, dims.k_bridge).unwrap();
        let next = message_round(&ig, &bridges, &states, &params).unwrap();

        // Reference: plain loops over the same definition.
        let layout = SlotLayout::for_commonsense(&cs);
        let msg_of = |id: usize| {
            let kind = ig.graph.node(id).kind;
            crate::tensor::evaluate_mlp_head(&params.kind(kind).send, &states.states[id]).unwrap()
        };
        for id in 0..ig.n_nodes() {
            let kind = ig.graph.node(id).kind;
            let mut cat: Vec<f64> = Vec::new();
            for slot in &layout.slots[kind.index()] {
                let mut acc = vec![0.0; dims.d];
                let mut add_from = |src: usize, w: f64| {
                    for (a, b) in acc.iter_mut().zip(msg_of(src).as_slice()) {
                        *a += w * b;
                    }
                };
                match slot.family {
                    EdgeFamily::Bridge => match (slot.name.as_str(), slot.src_kind) {
                        ("hasInstance", NodeKind::CE) => {
                            let i = id - ig.se_global(0);
                            for j in 0..cs.n_ce() {
                                let w = bridges.entity.get(i, j);
                                if w != 0.0 {
                                    add_from(ig.ce_global(j), w);
                                }
                            }
                        }
                        ("classifiedTo", NodeKind::SE) => {
                            let j = id - ig.ce_global(0);
                            for i in 0..ig.n_se {
                                let w = bridges.entity.get(i, j);
                                if w != 0.0 {
                                    add_from(ig.se_global(i), w);
                                }
                            }
                        }
                        _ => {} // predicate bridges empty at init
                    },
                    _ => {
                        if let Some(et) = ig.graph.find_etype(&slot.name, slot.src_kind, kind) {
                            for &(src, w) in ig.graph.in_edges(et, id) {
                                add_from(src, w);
                            }
                        }
                    }
                }
                cat.extend_from_slice(&acc);
            }
            let m_in = crate::tensor::evaluate_mlp_head(
                &params.kind(kind).receive,
                &Tensor::vector(&cat),
            )
            .unwrap();
            let want = gru_reference(
                states.states[id].as_slice(),
                m_in.as_slice(),
                &params.kind(kind).gru,
            );
            for (a, b) in next.states[id].as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "node {}: {} vs {}", id, a, b);
            }
        }
    }

    #[test]
    fn refine_uniform_logits_tie_break_to_lowest() {
        // Zero attention heads make every similarity 0: uniform rows.
        let cs = {
            let ents = labels("ent", 3); // -> 4 CE with background
            let preds = labels("rel", 2);
            let mut table = EmbeddingTable::new(2);
            for (i, l) in ents.iter().chain(preds.iter()).enumerate() {
                table.insert(l, vec![0.1 * i as f64, 0.2]).unwrap();
            }
            assemble(&ents, &preds, &[], &[], &table).unwrap()
        };
        assert_eq!(cs.n_ce(), 4);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = dims_for(&cs, 3, 1, 2, 2);
        let mut params = ModelParams::init_random(&dims, 1);
        for k in 0..4 {
            params.kinds[k].att = MlpHead {
                w1: Tensor::zeros(dims.hidden, dims.d),
                b1: Tensor::zeros(dims.hidden, 1),
                w2: Tensor::zeros(dims.d, dims.hidden),
                b2: Tensor::zeros(dims.d, 1),
            };
        }
        let inputs = rng_inputs(&cs, 2, 2, 6);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        let b = refine_bridges(&ig, &states, &params, InferenceMode::SgGen, None).unwrap();
        for i in 0..2 {
            assert_eq!(b.entity.row(i), &[0.25, 0.25, 0.0, 0.0]);
            let dense = b.entity_dense.row(i);
            for v in dense {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_with_k_at_least_classes_keeps_full_softmax() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = dims_for(&cs, 3, 1, 64, 3);
        let params = ModelParams::init_random(&dims, 2);
        let inputs = rng_inputs(&cs, 2, 3, 8);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        let b = refine_bridges(&ig, &states, &params, InferenceMode::SgGen, None).unwrap();
        assert_eq!(b.entity, b.entity_dense);
        assert_eq!(b.predicate, b.predicate_dense);
    }

    #[test]
    fn refine_matches_hand_softmax_on_hand_set_heads() {
        // 2 entities x 3 usable CE classes; identity-ish attention so the
        // similarity is the plain dot product of states.
        let cs = tiny_cs(2);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let d = 2;
        let dims = dims_for(&cs, d, 1, cs.n_ce(), 2);
        let mut params = ModelParams::init_random(&dims, 9);
        // att(x) = relu(x stacked with -x) recombined = x (identity for any sign).
        let mut w1 = Tensor::zeros(dims.hidden, d);
        let mut w2 = Tensor::zeros(d, dims.hidden);
        for i in 0..d {
            w1.set(i, i, 1.0);
            w1.set(d + i, i, -1.0);
            w2.set(i, i, 1.0);
            w2.set(i, d + i, -1.0);
        }
        for k in 0..4 {
            params.kinds[k].att = MlpHead {
                w1: w1.clone(),
                b1: Tensor::zeros(dims.hidden, 1),
                w2: w2.clone(),
                b2: Tensor::zeros(d, 1),
            };
        }
        let inputs = rng_inputs(&cs, 2, 2, 10);
        let states = init_states(&ig, &inputs, &cs, &params).unwrap();
        let b = refine_bridges(&ig, &states, &params, InferenceMode::SgGen, None).unwrap();
        for i in 0..2 {
            let x = states.states[ig.se_global(i)].as_slice();
            let logits: Vec<f64> = (0..cs.n_ce())
                .map(|j| {
                    let y = states.states[ig.ce_global(j)].as_slice();
                    x.iter().zip(y).map(|(a, b)| a * b).sum()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                assert!((b.entity_dense.get(i, j) - e / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predcls_without_gt_labels_is_input_error() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let dims = dims_for(&cs, 3, 1, 2, 3);
        let params = ModelParams::init_random(&dims, 2);
        let inputs = rng_inputs(&cs, 2, 3, 8);
        assert!(matches!(
            forward(&ig, &inputs, &cs, &params, InferenceMode::PredCls),
            Err(GbError::Input(_))
        ));
    }

    #[test]
    fn forward_t0_returns_detector_bridges_and_empty_predicates() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(3)).unwrap();
        let dims = dims_for(&cs, 4, 0, 2, 3);
        let params = ModelParams::init_random(&dims, 3);
        let inputs = rng_inputs(&cs, 3, 3, 12);
        let (bridges, _) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();
        let want = init_entity_bridges(&inputs.label_dists, dims.k_bridge).unwrap();
        assert_eq!(bridges.entity, want.entity);
        assert_eq!(bridges.entity_dense, want.entity_dense);
        assert!(bridges.predicate.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_t1_equals_manual_composition_bit_for_bit() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(3)).unwrap();
        let dims = dims_for(&cs, 4, 1, 2, 3);
        let params = ModelParams::init_random(&dims, 21);
        let inputs = rng_inputs(&cs, 3, 3, 13);
        let (bridges, states) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();

        let b0 = init_entity_bridges(&inputs.label_dists, dims.k_bridge).unwrap();
        let s0 = init_states(&ig, &inputs, &cs, &params).unwrap();
        let s1 = message_round(&ig, &b0, &s0, &params).unwrap();
        let b1 = refine_bridges(&ig, &s1, &params, InferenceMode::SgGen, None).unwrap();
        assert_eq!(states, s1);
        assert_eq!(bridges, b1);
    }

    #[test]
    fn forward_rows_are_stochastic_pre_sparsification() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(4)).unwrap();
        let dims = dims_for(&cs, 5, 2, 2, 3);
        let params = ModelParams::init_random(&dims, 77);
        let inputs = rng_inputs(&cs, 4, 3, 14);
        let (bridges, _) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();
        for i in 0..bridges.entity_dense.rows() {
            let s: f64 = bridges.entity_dense.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let nonzero = bridges.entity.row(i).iter().filter(|v| **v != 0.0).count();
            assert!(nonzero <= dims.k_bridge);
            assert!(bridges.entity.row(i).iter().all(|v| *v >= 0.0 && *v <= 1.0));
        }
        for i in 0..bridges.predicate_dense.rows() {
            let s: f64 = bridges.predicate_dense.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(3)).unwrap();
        let dims = dims_for(&cs, 4, 3, 2, 3);
        let params = ModelParams::init_random(&dims, 5);
        let inputs = rng_inputs(&cs, 3, 3, 15);
        let (b1, s1) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();
        let (b2, s2) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn similarity_is_asymmetric_for_distinct_heads() {
        // With distinct attention heads there are x, y with
        // <x,y> != <y,x>.
        let cs = tiny_cs(2);
        let dims = dims_for(&cs, 2, 1, 2, 2);
        let params = ModelParams::init_random(&dims, 123);
        let x = Tensor::vector(&[0.9, -0.3]);
        let y = Tensor::vector(&[-0.2, 0.7]);
        let se = |v: &Tensor| {
            crate::tensor::evaluate_mlp_head(&params.kind(NodeKind::SE).att, v).unwrap()
        };
        let ce = |v: &Tensor| {
            crate::tensor::evaluate_mlp_head(&params.kind(NodeKind::CE).att, v).unwrap()
        };
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum()
        };
        let fwd = dot(&se(&x), &ce(&y));
        let rev = dot(&se(&y), &ce(&x));
        assert!((fwd - rev).abs() > 1e-9, "{} vs {}", fwd, rev);
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cs = tiny_cs(3);
        let dims_n = 4;
        let dims = dims_for(&cs, 4, 2, 2, 3);
        let params = ModelParams::init_random(&dims, 31);
        let inputs = rng_inputs(&cs, dims_n, 3, 16);
        let ig = build_image_graph(&cs, &inputs.boxes).unwrap();
        let (b, _) = forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..dims_n).collect();
            perm.shuffle(&mut rng);
            // Permuted scene: detection i of the new scene is perm[i] of
            // the original.
            let boxes_p: Vec<BBox> = perm.iter().map(|&i| inputs.boxes[i]).collect();
            let features_p: Vec<Tensor> = perm.iter().map(|&i| inputs.features[i].clone()).collect();
            let mut dists_p = Tensor::zeros(dims_n, cs.n_ce());
            for (new_i, &old_i) in perm.iter().enumerate() {
                dists_p.row_mut(new_i).copy_from_slice(inputs.label_dists.row(old_i));
            }
            let pairs = ordered_pairs(dims_n);
            let pair_index: std::collections::HashMap<(usize, usize), usize> =
                pairs.iter().cloned().enumerate().map(|(k, p)| (p, k)).collect();
            let union_p: Vec<Tensor> = pairs
                .iter()
                .map(|&(s, o)| inputs.union_features[pair_index[&(perm[s], perm[o])]].clone())
                .collect();
            let inputs_p = SceneInputs {
                boxes: boxes_p.clone(),
                features: features_p,
                label_dists: dists_p,
                union_features: union_p,
                gt_labels: None,
            };
            let ig_p = build_image_graph(&cs, &boxes_p).unwrap();
            let (bp, _) = forward(&ig_p, &inputs_p, &cs, &params, InferenceMode::SgGen).unwrap();
            for new_i in 0..dims_n {
                for j in 0..cs.n_ce() {
                    let want = b.entity_dense.get(perm[new_i], j);
                    let got = bp.entity_dense.get(new_i, j);
                    assert!((want - got).abs() < 1e-9, "row {} class {}", new_i, j);
                }
            }
            for (k, &(s, o)) in pairs.iter().enumerate() {
                let orig_k = pair_index[&(perm[s], perm[o])];
                for j in 0..cs.n_cp() {
                    let want = b.predicate_dense.get(orig_k, j);
                    let got = bp.predicate_dense.get(k, j);
                    assert!((want - got).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mismatched_slot_counts_is_config_error() {
        let cs = tiny_cs(3);
        let ig = build_image_graph(&cs, &boxes(2)).unwrap();
        let mut dims = dims_for(&cs, 4, 1, 2, 3);
        dims.slot_counts[0] += 1;
        let params = ModelParams::init_random(&dims, 3);
        let inputs = rng_inputs(&cs, 2, 3, 17);
        assert!(matches!(
            forward(&ig, &inputs, &cs, &params, InferenceMode::SgGen),
            Err(GbError::Config(_))
        ));
    }
}
