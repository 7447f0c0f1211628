//! Compiling the fixed commonsense graph.
//!
//! Class nodes come from entity/predicate label lists (plus one
//! background node per kind). Edges come from two sources: curated
//! ontology TSVs (`src<TAB>relation<TAB>dst[<TAB>weight]`) and triplet
//! count statistics (`subj<TAB>pred<TAB>obj<TAB>count`) that are turned
//! into six conditional-probability edge families. Each conditional
//! edge runs from the conditioning class to the conditioned class and
//! is named `<dst>_given_<src>`, e.g. `subj_given_pred` carries
//! P(subject-class | predicate-class) on a CP -> CE edge.
//!
//! Node ids are dense and deterministic: CE nodes sorted by label first,
//! then CP nodes sorted by label. The graph file (`GBKG 1`) carries
//! nodes and weighted edges; embeddings stay in their own table file and
//! are joined at load time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GbError, Result};
use crate::graph::{EdgeFamily, EdgeType, HeteroGraph, Node, NodeKind};
use crate::tensor::Tensor;

/// Label used for the background node of both kinds.
pub const BACKGROUND_LABEL: &str = "__background__";

/// Relations accepted in ontology TSV files.
pub const ONTOLOGY_RELATIONS: [&str; 6] =
    ["IsA", "MannerOf", "PartOf", "RelatedTo", "SimilarTo", "UsedFor"];

/// The six conditional families compiled from triplet counts, with their
/// kind signatures (source is the conditioning class).
pub const CONDITIONAL_RELATIONS: [(&str, NodeKind, NodeKind); 6] = [
    ("obj_given_pred", NodeKind::CP, NodeKind::CE),
    ("obj_given_subj", NodeKind::CE, NodeKind::CE),
    ("pred_given_obj", NodeKind::CE, NodeKind::CP),
    ("pred_given_subj", NodeKind::CE, NodeKind::CP),
    ("subj_given_obj", NodeKind::CE, NodeKind::CE),
    ("subj_given_pred", NodeKind::CP, NodeKind::CE),
];

#[derive(Debug, Clone, PartialEq)]
pub struct OntologyEdgeRecord {
    pub src_label: String,
    pub relation: String,
    pub dst_label: String,
    pub weight: f64,
    /// 1-based line in the source file, for error reporting downstream.
    pub line: usize,
}

/// Parse an ontology TSV. `#` starts a comment; the weight column is
/// optional and defaults to 1.0.
pub fn load_ontology_edges(path: &Path) -> Result<Vec<OntologyEdgeRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_ontology_edges(&text)
}

pub fn parse_ontology_edges(text: &str) -> Result<Vec<OntologyEdgeRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(GbError::Parse {
                line: line_no,
                msg: format!("expected src<TAB>relation<TAB>dst[<TAB>weight], got {} columns", cols.len()),
            });
        }
        let relation = cols[1].trim();
        if !ONTOLOGY_RELATIONS.contains(&relation) {
            return Err(GbError::Vocabulary(format!(
                "unknown relation '{}' at line {}",
                relation, line_no
            )));
        }
        let weight = if cols.len() == 4 {
            cols[3].trim().parse::<f64>().map_err(|e| GbError::Parse {
                line: line_no,
                msg: format!("bad weight '{}': {}", cols[3], e),
            })?
        } else {
            1.0
        };
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(GbError::Parse {
                line: line_no,
                msg: format!("weight {} outside (0,1]", weight),
            });
        }
        out.push(OntologyEdgeRecord {
            src_label: cols[0].trim().to_string(),
            relation: relation.to_string(),
            dst_label: cols[2].trim().to_string(),
            weight,
            line: line_no,
        });
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(p) => line[..p].trim(),
        None => line.trim(),
    }
}

/// Counts of (subject class, predicate class, object class) triplets.
#[derive(Debug, Clone, Default)]
pub struct TripletCounts {
    counts: BTreeMap<(String, String, String), u64>,
}

impl TripletCounts {
    pub fn new() -> Self {
        TripletCounts::default()
    }

    pub fn add(&mut self, subj: &str, pred: &str, obj: &str, n: u64) {
        if n > 0 {
            *self
                .counts
                .entry((subj.to_string(), pred.to_string(), obj.to_string()))
                .or_insert(0) += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String, String), &u64)> {
        self.counts.iter()
    }

    /// Parse `subj<TAB>pred<TAB>obj<TAB>count` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = TripletCounts::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(GbError::Parse {
                    line: line_no,
                    msg: format!("expected subj<TAB>pred<TAB>obj<TAB>count, got {} columns", cols.len()),
                });
            }
            let n: u64 = cols[3].trim().parse().map_err(|e| GbError::Parse {
                line: line_no,
                msg: format!("bad count '{}': {}", cols[3], e),
            })?;
            out.add(cols[0].trim(), cols[1].trim(), cols[2].trim(), n);
        }
        Ok(out)
    }
}

/// One compiled edge, still label-addressed; `assemble` resolves labels
/// to node ids and routes each relation to its declared kind signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEdge {
    pub src_label: String,
    pub dst_label: String,
    pub relation: String,
    pub weight: f64,
}

/// Marginalize triplet counts into the six conditional families. Pairs
/// that were never observed produce no edge.
pub fn compile_conditional_edges(counts: &TripletCounts) -> Result<Vec<ConditionalEdge>> {
    if counts.is_empty() {
        return Err(GbError::Input("triplet counts are empty".into()));
    }
    // Pair marginals.
    let mut sp: BTreeMap<(String, String), u64> = BTreeMap::new(); // (subj, pred)
    let mut po: BTreeMap<(String, String), u64> = BTreeMap::new(); // (pred, obj)
    let mut so: BTreeMap<(String, String), u64> = BTreeMap::new(); // (subj, obj)
    // Singleton marginals.
    let mut n_s: BTreeMap<String, u64> = BTreeMap::new();
    let mut n_p: BTreeMap<String, u64> = BTreeMap::new();
    let mut n_o: BTreeMap<String, u64> = BTreeMap::new();
    for ((s, p, o), &n) in counts.iter() {
        *sp.entry((s.clone(), p.clone())).or_insert(0) += n;
        *po.entry((p.clone(), o.clone())).or_insert(0) += n;
        *so.entry((s.clone(), o.clone())).or_insert(0) += n;
        *n_s.entry(s.clone()).or_insert(0) += n;
        *n_p.entry(p.clone()).or_insert(0) += n;
        *n_o.entry(o.clone()).or_insert(0) += n;
    }

    let mut out = Vec::new();
    let mut emit = |src: &str, dst: &str, relation: &str, num: u64, den: u64| {
        if num > 0 {
            out.push(ConditionalEdge {
                src_label: src.to_string(),
                dst_label: dst.to_string(),
                relation: relation.to_string(),
                weight: num as f64 / den as f64,
            });
        }
    };
    for ((s, p), &n) in sp.iter() {
        emit(p, s, "subj_given_pred", n, n_p[p]);
        emit(s, p, "pred_given_subj", n, n_s[s]);
    }
    for ((p, o), &n) in po.iter() {
        emit(p, o, "obj_given_pred", n, n_p[p]);
        emit(o, p, "pred_given_obj", n, n_o[o]);
    }
    for ((s, o), &n) in so.iter() {
        emit(o, s, "subj_given_obj", n, n_o[o]);
        emit(s, o, "obj_given_subj", n, n_s[s]);
    }
    Ok(out)
}

/// Embedding table joining labels to fixed-dimension vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    map: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, map: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, label: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(GbError::Shape(format!(
                "embedding for '{}' has dim {}, expected {}",
                label,
                v.len(),
                self.dim
            )));
        }
        self.map.insert(label.to_string(), v);
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<&Vec<f64>> {
        self.map.get(label)
    }

    /// Parse `label<TAB>v1,v2,...,vd` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut dim = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (label, rest) = line.split_once('\t').ok_or_else(|| GbError::Parse {
                line: line_no,
                msg: "expected label<TAB>v1,v2,...".into(),
            })?;
            let vals: Vec<f64> = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| GbError::Parse { line: line_no, msg: format!("bad float: {}", e) })?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(GbError::Parse {
                        line: line_no,
                        msg: format!("embedding dim {} != {}", vals.len(), d),
                    });
                }
                _ => {}
            }
            map.insert(label.to_string(), vals);
        }
        Ok(EmbeddingTable { dim: dim.unwrap_or(0), map })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (label, v) in &self.map {
            let joined: Vec<String> = v.iter().map(|x| format!("{}", x)).collect();
            writeln!(s, "{}\t{}", label, joined.join(",")).unwrap();
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// An edge of the assembled commonsense graph, in global node ids
/// (CE block first, then CP block).
#[derive(Debug, Clone, PartialEq)]
pub struct CsEdge {
    pub src: usize,
    pub dst: usize,
    pub etype: usize,
    pub weight: f64,
}

/// The fixed class graph: labels, embeddings and typed weighted edges.
#[derive(Debug, Clone)]
pub struct CommonsenseGraph {
    pub entity_labels: Vec<String>,
    pub predicate_labels: Vec<String>,
    pub background_entity: usize,
    pub background_predicate: usize,
    pub entity_embeddings: Vec<Tensor>,
    pub predicate_embeddings: Vec<Tensor>,
    pub embed_dim: usize,
    /// Declared cs edge types, sorted by (name, src kind, dst kind).
    pub etypes: Vec<EdgeType>,
    /// Sorted by (etype, src, dst).
    pub edges: Vec<CsEdge>,
}

impl CommonsenseGraph {
    pub fn n_ce(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn n_cp(&self) -> usize {
        self.predicate_labels.len()
    }

    pub fn ce_global(&self, local: usize) -> usize {
        local
    }

    pub fn cp_global(&self, local: usize) -> usize {
        self.n_ce() + local
    }

    pub fn entity_index(&self, label: &str) -> Option<usize> {
        self.entity_labels.iter().position(|l| l == label)
    }

    pub fn predicate_index(&self, label: &str) -> Option<usize> {
        self.predicate_labels.iter().position(|l| l == label)
    }

    /// Edge counts per kind-signature family (CE->CE, CE->CP, CP->CE, CP->CP).
    pub fn family_counts(&self) -> BTreeMap<(NodeKind, NodeKind), usize> {
        let mut out = BTreeMap::new();
        for e in &self.edges {
            let et = &self.etypes[e.etype];
            *out.entry((et.src_kind, et.dst_kind)).or_insert(0) += 1;
        }
        out
    }

    /// Materialize CE/CP nodes and commonsense edges into a fresh graph,
    /// ready for a scene skeleton to be appended.
    pub fn to_hetero(&self) -> Result<HeteroGraph> {
        let mut g = HeteroGraph::new();
        for (i, label) in self.entity_labels.iter().enumerate() {
            g.push_node(Node::class_node(i, NodeKind::CE, label));
        }
        for (j, label) in self.predicate_labels.iter().enumerate() {
            g.push_node(Node::class_node(self.cp_global(j), NodeKind::CP, label));
        }
        let ids: Vec<_> = self.etypes.iter().map(|et| g.register_etype(et.clone())).collect();
        for e in &self.edges {
            g.push_edge(e.src, e.dst, ids[e.etype], e.weight)?;
        }
        Ok(g)
    }
}

fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || label.chars().any(|c| c.is_whitespace()) {
        return Err(GbError::Input(format!("label '{}' is empty or has whitespace", label)));
    }
    if label == BACKGROUND_LABEL {
        return Err(GbError::Input(format!(
            "label '{}' is reserved for background nodes",
            label
        )));
    }
    Ok(())
}

/// Resolve a label to (kind, local index); errors name the offending
/// label and source line.
fn resolve_label(
    label: &str,
    line: usize,
    ce: &BTreeMap<String, usize>,
    cp: &BTreeMap<String, usize>,
) -> Result<(NodeKind, usize)> {
    match (ce.get(label), cp.get(label)) {
        (Some(&i), None) => Ok((NodeKind::CE, i)),
        (None, Some(&j)) => Ok((NodeKind::CP, j)),
        (Some(_), Some(_)) => Err(GbError::Vocabulary(format!(
            "label '{}' at line {} is both an entity and a predicate class",
            label, line
        ))),
        (None, None) => Err(GbError::Vocabulary(format!(
            "unknown label '{}' at line {}",
            label, line
        ))),
    }
}

/// Assemble the commonsense graph. Adds one background node per kind
/// (zero embedding, no edges) and routes every edge to the family that
/// matches its endpoint kinds.
pub fn assemble(
    entity_labels: &[String],
    predicate_labels: &[String],
    ontology_edges: &[OntologyEdgeRecord],
    conditional_edges: &[ConditionalEdge],
    embeddings: &EmbeddingTable,
) -> Result<CommonsenseGraph> {
    for l in entity_labels.iter().chain(predicate_labels) {
        validate_label(l)?;
    }
    let mut ents: Vec<String> = entity_labels.to_vec();
    ents.push(BACKGROUND_LABEL.to_string());
    ents.sort();
    ents.dedup();
    if ents.len() != entity_labels.len() + 1 {
        return Err(GbError::Input("duplicate entity label".into()));
    }
    let mut preds: Vec<String> = predicate_labels.to_vec();
    preds.push(BACKGROUND_LABEL.to_string());
    preds.sort();
    preds.dedup();
    if preds.len() != predicate_labels.len() + 1 {
        return Err(GbError::Input("duplicate predicate label".into()));
    }

    let ce_index: BTreeMap<String, usize> =
        ents.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    let cp_index: BTreeMap<String, usize> =
        preds.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    let n_ce = ents.len();

    let dim = embeddings.dim();
    let embed_of = |label: &str| -> Result<Tensor> {
        if label == BACKGROUND_LABEL {
            return Ok(Tensor::zeros(dim, 1));
        }
        match embeddings.get(label) {
            Some(v) => Ok(Tensor::vector(v)),
            None => Err(GbError::Vocabulary(format!("missing embedding for label '{}'", label))),
        }
    };
    let entity_embeddings: Vec<Tensor> =
        ents.iter().map(|l| embed_of(l)).collect::<Result<_>>()?;
    let predicate_embeddings: Vec<Tensor> =
        preds.iter().map(|l| embed_of(l)).collect::<Result<_>>()?;

    // Collect label-resolved edges: (name, src kind, src local, dst kind, dst local, weight).
    let mut resolved: Vec<(String, NodeKind, usize, NodeKind, usize, f64)> = Vec::new();
    for rec in ontology_edges {
        let (sk, si) = resolve_label(&rec.src_label, rec.line, &ce_index, &cp_index)?;
        let (dk, di) = resolve_label(&rec.dst_label, rec.line, &ce_index, &cp_index)?;
        resolved.push((rec.relation.clone(), sk, si, dk, di, rec.weight));
    }
    for ce in conditional_edges {
        let (_, want_src, want_dst) = CONDITIONAL_RELATIONS
            .iter()
            .find(|(n, _, _)| *n == ce.relation)
            .ok_or_else(|| GbError::Vocabulary(format!("unknown conditional relation '{}'", ce.relation)))?;
        let src_local = match want_src {
            NodeKind::CE => ce_index.get(&ce.src_label),
            _ => cp_index.get(&ce.src_label),
        }
        .ok_or_else(|| GbError::Vocabulary(format!("unknown label '{}'", ce.src_label)))?;
        let dst_local = match want_dst {
            NodeKind::CE => ce_index.get(&ce.dst_label),
            _ => cp_index.get(&ce.dst_label),
        }
        .ok_or_else(|| GbError::Vocabulary(format!("unknown label '{}'", ce.dst_label)))?;
        if !(ce.weight > 0.0 && ce.weight <= 1.0) {
            return Err(GbError::Input(format!(
                "conditional weight {} outside (0,1] for {}:{}->{}",
                ce.weight, ce.relation, ce.src_label, ce.dst_label
            )));
        }
        resolved.push((ce.relation.clone(), *want_src, *src_local, *want_dst, *dst_local, ce.weight));
    }

    // Background nodes carry no commonsense edges.
    for (name, sk, si, dk, di, _) in &resolved {
        let src_is_bg = (*sk == NodeKind::CE && ents[*si] == BACKGROUND_LABEL)
            || (*sk == NodeKind::CP && preds[*si] == BACKGROUND_LABEL);
        let dst_is_bg = (*dk == NodeKind::CE && ents[*di] == BACKGROUND_LABEL)
            || (*dk == NodeKind::CP && preds[*di] == BACKGROUND_LABEL);
        if src_is_bg || dst_is_bg {
            return Err(GbError::Input(format!("edge {} touches a background node", name)));
        }
    }

    // Declared edge types, sorted; edges sorted within.
    let mut type_keys: Vec<(String, NodeKind, NodeKind)> =
        resolved.iter().map(|(n, sk, _, dk, _, _)| (n.clone(), *sk, *dk)).collect();
    type_keys.sort();
    type_keys.dedup();
    let etypes: Vec<EdgeType> = type_keys
        .iter()
        .map(|(n, sk, dk)| EdgeType::new(n, EdgeFamily::Commonsense, *sk, *dk))
        .collect();
    let type_of = |n: &str, sk: NodeKind, dk: NodeKind| {
        type_keys.iter().position(|(tn, tsk, tdk)| tn == n && *tsk == sk && *tdk == dk).unwrap()
    };

    let global = |k: NodeKind, local: usize| match k {
        NodeKind::CE => local,
        _ => n_ce + local,
    };
    let mut edges: Vec<CsEdge> = resolved
        .iter()
        .map(|(n, sk, si, dk, di, w)| CsEdge {
            src: global(*sk, *si),
            dst: global(*dk, *di),
            etype: type_of(n, *sk, *dk),
            weight: *w,
        })
        .collect();
    edges.sort_by(|a, b| (a.etype, a.src, a.dst).cmp(&(b.etype, b.src, b.dst)));
    for pair in edges.windows(2) {
        if pair[0].etype == pair[1].etype && pair[0].src == pair[1].src && pair[0].dst == pair[1].dst
        {
            let et = &etypes[pair[0].etype];
            return Err(GbError::Input(format!(
                "duplicate {} edge {}->{}",
                et.name, pair[0].src, pair[0].dst
            )));
        }
    }

    Ok(CommonsenseGraph {
        background_entity: ce_index[BACKGROUND_LABEL],
        background_predicate: cp_index[BACKGROUND_LABEL],
        entity_labels: ents,
        predicate_labels: preds,
        entity_embeddings,
        predicate_embeddings,
        embed_dim: dim,
        etypes,
        edges,
    })
}

/// Serialize to the `GBKG 1` text format.
pub fn write_gbkg(cs: &CommonsenseGraph, path: &Path) -> Result<()> {
    let mut s = String::from("GBKG 1\n");
    for (i, l) in cs.entity_labels.iter().enumerate() {
        writeln!(s, "NODE {} CE {}", i, l).unwrap();
    }
    for (j, l) in cs.predicate_labels.iter().enumerate() {
        writeln!(s, "NODE {} CP {}", cs.cp_global(j), l).unwrap();
    }
    for e in &cs.edges {
        let et = &cs.etypes[e.etype];
        writeln!(s, "EDGE {} {} {} {}", e.src, e.dst, et.name, e.weight).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Load a `GBKG 1` file, joining embeddings from the given table.
pub fn load_gbkg(path: &Path, embeddings: &EmbeddingTable) -> Result<CommonsenseGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_gbkg(&text, embeddings)
}

pub fn parse_gbkg(text: &str, embeddings: &EmbeddingTable) -> Result<CommonsenseGraph> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "GBKG 1" => {}
        _ => return Err(GbError::Format("missing GBKG 1 header".into())),
    }

    let mut nodes: Vec<(usize, NodeKind, String)> = Vec::new();
    let mut raw_edges: Vec<(usize, usize, String, f64, usize)> = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(' ').collect();
        match cols[0] {
            "NODE" if cols.len() == 4 => {
                let id = parse_num::<usize>(cols[1], line_no)?;
                let kind = NodeKind::parse(cols[2]).ok_or_else(|| GbError::Parse {
                    line: line_no,
                    msg: format!("bad node kind '{}'", cols[2]),
                })?;
                nodes.push((id, kind, cols[3].to_string()));
            }
            "EDGE" if cols.len() == 5 => {
                let src = parse_num::<usize>(cols[1], line_no)?;
                let dst = parse_num::<usize>(cols[2], line_no)?;
                let w = parse_num::<f64>(cols[4], line_no)?;
                raw_edges.push((src, dst, cols[3].to_string(), w, line_no));
            }
            _ => {
                return Err(GbError::Parse { line: line_no, msg: format!("bad line '{}'", line) });
            }
        }
    }

    // Node ids must be dense, CE block then CP block.
    let n_ce = nodes.iter().filter(|(_, k, _)| *k == NodeKind::CE).count();
    let mut entity_labels = vec![String::new(); n_ce];
    let mut predicate_labels = vec![String::new(); nodes.len() - n_ce];
    for (id, kind, label) in &nodes {
        match kind {
            NodeKind::CE if *id < n_ce => entity_labels[*id] = label.clone(),
            NodeKind::CP if *id >= n_ce && *id < nodes.len() => {
                predicate_labels[*id - n_ce] = label.clone()
            }
            _ => {
                return Err(GbError::Format(format!(
                    "node id {} out of place for kind {}",
                    id,
                    kind.name()
                )))
            }
        }
    }
    if entity_labels.iter().chain(&predicate_labels).any(|l| l.is_empty()) {
        return Err(GbError::Format("node ids are not dense".into()));
    }

    let background_entity = entity_labels
        .iter()
        .position(|l| l == BACKGROUND_LABEL)
        .ok_or_else(|| GbError::Format("missing background entity node".into()))?;
    let background_predicate = predicate_labels
        .iter()
        .position(|l| l == BACKGROUND_LABEL)
        .ok_or_else(|| GbError::Format("missing background predicate node".into()))?;

    let dim = embeddings.dim();
    let lookup = |label: &String| -> Result<Tensor> {
        if label == BACKGROUND_LABEL {
            Ok(Tensor::zeros(dim, 1))
        } else {
            embeddings
                .get(label)
                .map(|v| Tensor::vector(v))
                .ok_or_else(|| GbError::Vocabulary(format!("missing embedding for label '{}'", label)))
        }
    };
    let entity_embeddings = entity_labels.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let predicate_embeddings = predicate_labels.iter().map(lookup).collect::<Result<Vec<_>>>()?;

    let kind_of = |id: usize| if id < n_ce { NodeKind::CE } else { NodeKind::CP };
    let mut type_keys: Vec<(String, NodeKind, NodeKind)> = raw_edges
        .iter()
        .map(|(s, d, n, _, _)| (n.clone(), kind_of(*s), kind_of(*d)))
        .collect();
    type_keys.sort();
    type_keys.dedup();
    let etypes: Vec<EdgeType> = type_keys
        .iter()
        .map(|(n, sk, dk)| EdgeType::new(n, EdgeFamily::Commonsense, *sk, *dk))
        .collect();

    let mut edges = Vec::new();
    for (src, dst, name, w, line_no) in raw_edges {
        if src >= nodes.len() || dst >= nodes.len() {
            return Err(GbError::Parse { line: line_no, msg: "edge endpoint out of range".into() });
        }
        if !(w >= 0.0 && w <= 1.0) {
            return Err(GbError::Parse { line: line_no, msg: format!("weight {} outside [0,1]", w) });
        }
        let key = (name.clone(), kind_of(src), kind_of(dst));
        let etype = type_keys.iter().position(|k| *k == key).unwrap();
        edges.push(CsEdge { src, dst, etype, weight: w });
    }
    edges.sort_by(|a, b| (a.etype, a.src, a.dst).cmp(&(b.etype, b.src, b.dst)));

    Ok(CommonsenseGraph {
        entity_labels,
        predicate_labels,
        background_entity,
        background_predicate,
        entity_embeddings,
        predicate_embeddings,
        embed_dim: dim,
        etypes,
        edges,
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| GbError::Parse { line, msg: format!("bad number '{}': {}", s, e) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{}{:02}", prefix, i)).collect()
    }

    fn table_for(labels: &[Vec<String>], dim: usize) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim);
        for group in labels {
            for (i, l) in group.iter().enumerate() {
                let v: Vec<f64> = (0..dim).map(|d| (i * dim + d) as f64 * 0.1).collect();
                t.insert(l, v).unwrap();
            }
        }
        t
    }

    #[test]
    fn ontology_single_record() {
        let recs = parse_ontology_edges("hand\tPartOf\tperson\t1.0").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].src_label, "hand");
        assert_eq!(recs[0].relation, "PartOf");
        assert_eq!(recs[0].weight, 1.0);
    }

    #[test]
    fn ontology_empty_file() {
        assert!(parse_ontology_edges("").unwrap().is_empty());
        assert!(parse_ontology_edges("# only a comment\n").unwrap().is_empty());
    }

    #[test]
    fn ontology_unknown_relation() {
        assert!(matches!(
            parse_ontology_edges("a\tFoo\tb\t1.0"),
            Err(GbError::Vocabulary(_))
        ));
    }

    #[test]
    fn ontology_default_weight_and_malformed_line() {
        let recs = parse_ontology_edges("a\tIsA\tb").unwrap();
        assert_eq!(recs[0].weight, 1.0);
        let err = parse_ontology_edges("only two\tcolumns");
        assert!(matches!(err, Err(GbError::Parse { line: 1, .. })));
    }

    #[test]
    fn conditional_hand_marginalization() {
        let mut counts = TripletCounts::new();
        counts.add("A", "p", "B", 3);
        counts.add("C", "p", "B", 1);
        let edges = compile_conditional_edges(&counts).unwrap();
        let find = |rel: &str, src: &str, dst: &str| {
            edges
                .iter()
                .find(|e| e.relation == rel && e.src_label == src && e.dst_label == dst)
                .map(|e| e.weight)
        };
        assert_eq!(find("subj_given_pred", "p", "A"), Some(0.75));
        assert_eq!(find("subj_given_pred", "p", "C"), Some(0.25));
        assert_eq!(find("obj_given_pred", "p", "B"), Some(1.0));
    }

    #[test]
    fn single_triplet_all_conditionals_are_one() {
        let mut counts = TripletCounts::new();
        counts.add("A", "p", "B", 1);
        let edges = compile_conditional_edges(&counts).unwrap();
        assert_eq!(edges.len(), 6);
        assert!(edges.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn unobserved_subject_gets_no_outgoing_conditionals() {
        let mut counts = TripletCounts::new();
        counts.add("A", "p", "B", 2);
        let edges = compile_conditional_edges(&counts).unwrap();
        // B only appears as object: no pred_given_subj / obj_given_subj from B.
        assert!(!edges
            .iter()
            .any(|e| e.src_label == "B"
                && (e.relation == "pred_given_subj" || e.relation == "obj_given_subj")));
    }

    #[test]
    fn conditionals_sum_to_one_per_family() {
        let mut counts = TripletCounts::new();
        let mut x = 1u64;
        for s in ["A", "B", "C"] {
            for p in ["p", "q"] {
                for o in ["A", "C", "D"] {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    counts.add(s, p, o, 1 + (x >> 60));
                }
            }
        }
        let edges = compile_conditional_edges(&counts).unwrap();
        let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
        for e in &edges {
            *sums.entry((e.relation.clone(), e.src_label.clone())).or_insert(0.0) += e.weight;
        }
        for ((rel, src), sum) in sums {
            assert!((sum - 1.0).abs() < 1e-9, "{} from {} sums to {}", rel, src, sum);
        }
    }

    #[test]
    fn assemble_adds_backgrounds() {
        let ents = labels("ent", 150);
        let preds = labels("rel", 50);
        let table = table_for(&[ents.clone(), preds.clone()], 4);
        let cs = assemble(&ents, &preds, &[], &[], &table).unwrap();
        assert_eq!(cs.n_ce(), 151);
        assert_eq!(cs.n_cp(), 51);
        assert!(cs.edges.is_empty());
        assert_eq!(cs.entity_labels[cs.background_entity], BACKGROUND_LABEL);
        assert!(cs
            .entity_embeddings[cs.background_entity]
            .as_slice()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn isa_between_predicates_routes_to_cp_cp() {
        let ents = labels("ent", 2);
        let preds = labels("rel", 2);
        let table = table_for(&[ents.clone(), preds.clone()], 3);
        let ont = parse_ontology_edges("rel00\tIsA\trel01\t0.8").unwrap();
        let cs = assemble(&ents, &preds, &ont, &[], &table).unwrap();
        assert_eq!(cs.edges.len(), 1);
        let et = &cs.etypes[cs.edges[0].etype];
        assert_eq!((et.src_kind, et.dst_kind), (NodeKind::CP, NodeKind::CP));
        assert_eq!(et.name, "IsA");
    }

    #[test]
    fn duplicate_label_is_uniqueness_error() {
        let ents = vec!["dog".to_string(), "dog".to_string()];
        let preds = labels("rel", 1);
        let table = table_for(&[ents.clone(), preds.clone()], 2);
        assert!(matches!(assemble(&ents, &preds, &[], &[], &table), Err(GbError::Input(_))));
    }

    #[test]
    fn unknown_ontology_label_names_line() {
        let ents = labels("ent", 2);
        let preds = labels("rel", 1);
        let table = table_for(&[ents.clone(), preds.clone()], 2);
        let ont = parse_ontology_edges("\nent00\tIsA\tnope\t0.5").unwrap();
        match assemble(&ents, &preds, &ont, &[], &table) {
            Err(GbError::Vocabulary(msg)) => {
                assert!(msg.contains("nope") && msg.contains("line 2"), "{}", msg);
            }
            other => panic!("expected vocabulary error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_embedding_names_label() {
        let ents = labels("ent", 2);
        let preds = labels("rel", 1);
        let mut table = EmbeddingTable::new(2);
        table.insert("ent00", vec![0.0, 1.0]).unwrap();
        table.insert("rel00", vec![1.0, 0.0]).unwrap();
        match assemble(&ents, &preds, &[], &[], &table) {
            Err(GbError::Vocabulary(msg)) => assert!(msg.contains("ent01"), "{}", msg),
            other => panic!("expected vocabulary error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn assembly_is_idempotent_and_roundtrips_through_gbkg() {
        let ents = labels("ent", 4);
        let preds = labels("rel", 3);
        let table = table_for(&[ents.clone(), preds.clone()], 3);
        let ont = parse_ontology_edges("ent00\tSimilarTo\tent01\t0.9\nent02\tUsedFor\trel01\t0.7")
            .unwrap();
        let mut counts = TripletCounts::new();
        counts.add("ent00", "rel00", "ent01", 2);
        counts.add("ent02", "rel00", "ent01", 1);
        let cond = compile_conditional_edges(&counts).unwrap();
        let a = assemble(&ents, &preds, &ont, &cond, &table).unwrap();
        let b = assemble(&ents, &preds, &ont, &cond, &table).unwrap();
        assert_eq!(a.entity_labels, b.entity_labels);
        assert_eq!(a.edges, b.edges);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.gbkg");
        write_gbkg(&a, &path).unwrap();
        let c = load_gbkg(&path, &table).unwrap();
        assert_eq!(a.entity_labels, c.entity_labels);
        assert_eq!(a.predicate_labels, c.predicate_labels);
        assert_eq!(a.edges, c.edges);
        assert_eq!(
            a.etypes.iter().map(|e| e.name.clone()).collect::<Vec<_>>(),
            c.etypes.iter().map(|e| e.name.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn every_edge_matches_declared_signature() {
        let ents = labels("ent", 3);
        let preds = labels("rel", 2);
        let table = table_for(&[ents.clone(), preds.clone()], 2);
        let mut counts = TripletCounts::new();
        counts.add("ent00", "rel00", "ent01", 1);
        counts.add("ent01", "rel01", "ent02", 4);
        let cond = compile_conditional_edges(&counts).unwrap();
        let cs = assemble(&ents, &preds, &[], &cond, &table).unwrap();
        let n_ce = cs.n_ce();
        for e in &cs.edges {
            let et = &cs.etypes[e.etype];
            let src_kind = if e.src < n_ce { NodeKind::CE } else { NodeKind::CP };
            let dst_kind = if e.dst < n_ce { NodeKind::CE } else { NodeKind::CP };
            assert_eq!(src_kind, et.src_kind);
            assert_eq!(dst_kind, et.dst_kind);
        }
        // Conversion to a HeteroGraph re-checks the signatures.
        let g = cs.to_hetero().unwrap();
        assert_eq!(g.edges().len(), cs.edges.len());
    }
}
