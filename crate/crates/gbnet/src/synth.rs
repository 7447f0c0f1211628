//! Synthetic worlds and dataset files.
//!
//! A [`ToyWorld`] stands in for the detector pipeline: entity classes
//! are unit-sphere prototype vectors, a total rule table maps (subject
//! class, object class, spatial relation) to a predicate class, and
//! predicate classes are allocated to rule cells with Zipf-skewed
//! quotas so the class histogram is deliberately imbalanced. Scenes
//! sample noisy prototype features, simulate a detector with a softmax
//! over negative squared prototype distances, and synthesize union
//! features as mean endpoint features plus 8 box-geometry values.
//!
//! Class indices in records follow the compiled commonsense graph's
//! node order (labels sorted, `__background__` first for the lowercase
//! label sets generated here).

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::commonsense::{EmbeddingTable, OntologyEdgeRecord, TripletCounts, BACKGROUND_LABEL};
use crate::error::{GbError, Result};
use crate::graph::{ordered_pairs, BBox};
use crate::model::{InferenceMode, SceneInputs};
use crate::tensor::Tensor;

pub const N_SPATIAL: usize = 4;

/// Deterministic per-scene seed stream.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Zipf masses with exponent 1: p_k proportional to 1/(k+1).
pub fn zipf_masses(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|k| 1.0 / (k + 1) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Largest-remainder quotas summing exactly to `total`.
fn quota(masses: &[f64], total: usize) -> Vec<usize> {
    let mut base: Vec<usize> = masses.iter().map(|m| (m * total as f64).floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = masses
        .iter()
        .enumerate()
        .map(|(i, m)| (m * total as f64 - base[i] as f64, i))
        .collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = total - base.iter().sum::<usize>();
    for (_, i) in rem {
        if left == 0 {
            break;
        }
        base[i] += 1;
        left -= 1;
    }
    base
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub entity_labels: Vec<String>,
    pub predicate_labels: Vec<String>,
    /// Unit-sphere prototype per entity class.
    pub prototypes: Vec<Tensor>,
    /// Unit-sphere embedding per predicate class.
    pub predicate_embeddings: Vec<Tensor>,
    /// rules[(sc * n_entity + oc) * N_SPATIAL + spatial] -> predicate class.
    pub rules: Vec<usize>,
    pub feat_dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl ToyWorld {
    pub fn n_entity_classes(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn n_predicate_classes(&self) -> usize {
        self.predicate_labels.len()
    }

    pub fn rule(&self, sc: usize, oc: usize, spatial: usize) -> usize {
        self.rules[(sc * self.n_entity_classes() + oc) * N_SPATIAL + spatial]
    }

    /// CE node order of the commonsense graph compiled from this world
    /// (sorted labels; `__background__` sorts first for these labels).
    pub fn ce_order(&self) -> Vec<String> {
        let mut v = self.entity_labels.clone();
        v.push(BACKGROUND_LABEL.to_string());
        v.sort();
        v
    }

    pub fn cp_order(&self) -> Vec<String> {
        let mut v = self.predicate_labels.clone();
        v.push(BACKGROUND_LABEL.to_string());
        v.sort();
        v
    }

    /// CE index of entity class `c`, under `ce_order`.
    pub fn ce_of_class(&self, c: usize) -> usize {
        let order = self.ce_order();
        order.iter().position(|l| *l == self.entity_labels[c]).unwrap()
    }

    pub fn cp_of_class(&self, c: usize) -> usize {
        let order = self.cp_order();
        order.iter().position(|l| *l == self.predicate_labels[c]).unwrap()
    }

    /// Embeddings for the commonsense compiler: entity classes use their
    /// prototypes, predicate classes their unit embeddings.
    pub fn embedding_table(&self) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(self.feat_dim);
        for (l, p) in self.entity_labels.iter().zip(&self.prototypes) {
            t.insert(l, p.as_slice().to_vec()).unwrap();
        }
        for (l, e) in self.predicate_labels.iter().zip(&self.predicate_embeddings) {
            t.insert(l, e.as_slice().to_vec()).unwrap();
        }
        t
    }

    /// Small ontology: SimilarTo from each entity class to its nearest
    /// other prototype, RelatedTo chaining consecutive predicate classes.
    pub fn ontology_edges(&self) -> Vec<OntologyEdgeRecord> {
        let mut out = Vec::new();
        let n = self.n_entity_classes();
        for i in 0..n {
            let mut best = None;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let cos: f64 = self.prototypes[i]
                    .as_slice()
                    .iter()
                    .zip(self.prototypes[j].as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                if best.map(|(c, _)| cos > c).unwrap_or(true) {
                    best = Some((cos, j));
                }
            }
            if let Some((cos, j)) = best {
                out.push(OntologyEdgeRecord {
                    src_label: self.entity_labels[i].clone(),
                    relation: "SimilarTo".into(),
                    dst_label: self.entity_labels[j].clone(),
                    weight: cos.clamp(0.05, 1.0),
                    line: 0,
                });
            }
        }
        for k in 1..self.n_predicate_classes() {
            out.push(OntologyEdgeRecord {
                src_label: self.predicate_labels[k].clone(),
                relation: "RelatedTo".into(),
                dst_label: self.predicate_labels[k - 1].clone(),
                weight: 0.5,
                line: 0,
            });
        }
        out
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return Tensor::vector(&v.iter().map(|x| x / norm).collect::<Vec<f64>>());
        }
    }
}

/// Deterministic world from a seed. Rule cells are allocated to
/// predicate classes with Zipf(1) quotas in a seeded random order.
pub fn generate_world(
    seed: u64,
    n_entity_classes: usize,
    n_pred_classes: usize,
    feat_dim: usize,
    sigma: f64,
) -> Result<ToyWorld> {
    if n_entity_classes < 2 || n_pred_classes < 2 {
        return Err(GbError::Input("need at least 2 entity and 2 predicate classes".into()));
    }
    if sigma < 0.0 {
        return Err(GbError::Input("sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let entity_labels: Vec<String> =
        (0..n_entity_classes).map(|i| format!("ent{:02}", i)).collect();
    let predicate_labels: Vec<String> =
        (0..n_pred_classes).map(|i| format!("rel{:02}", i)).collect();
    let prototypes: Vec<Tensor> =
        (0..n_entity_classes).map(|_| unit_vector(&mut rng, feat_dim)).collect();
    let predicate_embeddings: Vec<Tensor> =
        (0..n_pred_classes).map(|_| unit_vector(&mut rng, feat_dim)).collect();

    // The rule table is generated with a latent group structure so the
    // mapping is learnable at desk scale: entity classes are randomly
    // partitioned into subject groups and (independently) object
    // groups, and the predicate depends only on (subject group, object
    // group, spatial relation). The expanded per-class table is what
    // gets stored; it is total over all (sc, oc, spatial) cells.
    let n_groups = match n_entity_classes {
        0..=5 => 2,
        6..=9 => 3,
        _ => 4,
    };
    let partition = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_entity_classes).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut groups = vec![0usize; n_entity_classes];
        for (pos, &class) in order.iter().enumerate() {
            groups[class] = pos % n_groups;
        }
        groups
    };
    let subj_groups = partition(&mut rng);
    let obj_groups = partition(&mut rng);
    let group_size = |groups: &[usize], g: usize| groups.iter().filter(|&&x| x == g).count();

    // Allocate predicate classes to group cells so the expanded table's
    // class masses track the Zipf target: each group cell carries weight
    // |subject group| * |object group|, and cells (visited in a seeded
    // random order) are greedily given to the class with the largest
    // remaining mass deficit.
    let masses = zipf_masses(n_pred_classes);
    let total_weight = (n_entity_classes * n_entity_classes * N_SPATIAL) as f64;
    let mut deficits: Vec<f64> = masses.iter().map(|m| m * total_weight).collect();
    let mut group_cells: Vec<(usize, usize, usize)> = (0..n_groups)
        .flat_map(|gs| (0..n_groups).flat_map(move |go| (0..N_SPATIAL).map(move |sp| (gs, go, sp))))
        .collect();
    for i in (1..group_cells.len()).rev() {
        let j = rng.random_range(0..=i);
        group_cells.swap(i, j);
    }
    let mut group_table = vec![0usize; n_groups * n_groups * N_SPATIAL];
    for (gs, go, sp) in group_cells {
        let w = (group_size(&subj_groups, gs) * group_size(&obj_groups, go)) as f64;
        let class = deficits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap();
        deficits[class] -= w;
        group_table[(gs * n_groups + go) * N_SPATIAL + sp] = class;
    }
    let n_cells = n_entity_classes * n_entity_classes * N_SPATIAL;
    let mut rules = vec![0usize; n_cells];
    for sc in 0..n_entity_classes {
        for oc in 0..n_entity_classes {
            for sp in 0..N_SPATIAL {
                let g = (subj_groups[sc] * n_groups + obj_groups[oc]) * N_SPATIAL + sp;
                rules[(sc * n_entity_classes + oc) * N_SPATIAL + sp] = group_table[g];
            }
        }
    }
    Ok(ToyWorld {
        entity_labels,
        predicate_labels,
        prototypes,
        predicate_embeddings,
        rules,
        feat_dim,
        sigma,
        seed,
    })
}

/// Spatial relation of object relative to subject, from box centers:
/// 0 right, 1 left, 2 below, 3 above (dominant axis).
pub fn spatial_relation(subj: &BBox, obj: &BBox) -> usize {
    let (sx, sy) = subj.center();
    let (ox, oy) = obj.center();
    let (dx, dy) = (ox - sx, oy - sy);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            0
        } else {
            1
        }
    } else if dy >= 0.0 {
        2
    } else {
        3
    }
}

/// One image: detections (box, feature, detector distribution), ground
/// truth (classes, boxes, triplets) and per-pair union features.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
    pub features: Vec<Tensor>,
    /// n x n_ce rows, CE node order (background included).
    pub label_dists: Tensor,
    /// CE index per entity.
    pub gt_classes: Vec<usize>,
    pub gt_boxes: Vec<BBox>,
    /// Per ordered pair, [`ordered_pairs`] order.
    pub union_features: Vec<Tensor>,
    /// (subject idx, CP predicate index, object idx).
    pub gt_triplets: Vec<(usize, usize, usize)>,
}

impl SceneRecord {
    pub fn n_entities(&self) -> usize {
        self.boxes.len()
    }

    /// Model inputs for one task. SGCls and PredCls take ground-truth
    /// boxes; PredCls also clamps entity bridges to `gt_classes`.
    pub fn to_inputs(&self, mode: InferenceMode) -> SceneInputs {
        let boxes = match mode {
            InferenceMode::SgGen => self.boxes.clone(),
            _ => self.gt_boxes.clone(),
        };
        SceneInputs {
            boxes,
            features: self.features.clone(),
            label_dists: self.label_dists.clone(),
            union_features: self.union_features.clone(),
            gt_labels: Some(self.gt_classes.clone()),
        }
    }
}

fn geometry(subj: &BBox, obj: &BBox) -> [f64; 8] {
    let (sx, sy) = subj.center();
    let (ox, oy) = obj.center();
    let (dx, dy) = (ox - sx, oy - sy);
    [
        dx,
        dy,
        dx.abs(),
        dy.abs(),
        subj.x2 - subj.x1,
        subj.y2 - subj.y1,
        obj.x2 - obj.x1,
        obj.y2 - obj.y1,
    ]
}

/// Sample one scene with `n_entities` detections. Deterministic from the
/// seed; detected boxes equal ground-truth boxes (perfect localization).
pub fn sample_scene(world: &ToyWorld, n_entities: usize, seed: u64) -> Result<SceneRecord> {
    if !(2..=20).contains(&n_entities) {
        return Err(GbError::Input(format!("n_entities {} outside 2..=20", n_entities)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nec = world.n_entity_classes();
    let ce_order = world.ce_order();
    let n_ce = ce_order.len();
    let bg_ce = ce_order.iter().position(|l| l == BACKGROUND_LABEL).unwrap();
    let ce_of: Vec<usize> = (0..nec).map(|c| world.ce_of_class(c)).collect();
    let cp_of: Vec<usize> = (0..world.n_predicate_classes()).map(|c| world.cp_of_class(c)).collect();

    let mut boxes = Vec::with_capacity(n_entities);
    let mut features = Vec::with_capacity(n_entities);
    let mut classes = Vec::with_capacity(n_entities);
    let mut label_dists = Tensor::zeros(n_entities, n_ce);
    // Detector sharpness: degrade with feature noise.
    let tau = 0.1 + world.sigma * world.sigma * world.feat_dim as f64;
    for i in 0..n_entities {
        let class = rng.random_range(0..nec);
        let x1: f64 = rng.random_range(0.0..0.65);
        let y1: f64 = rng.random_range(0.0..0.65);
        let w: f64 = rng.random_range(0.1..0.3);
        let h: f64 = rng.random_range(0.1..0.3);
        let bbox = BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0))?;
        let noise: Vec<f64> = (0..world.feat_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                world.sigma * z
            })
            .collect();
        let feat: Vec<f64> = world.prototypes[class]
            .as_slice()
            .iter()
            .zip(&noise)
            .map(|(p, n)| p + n)
            .collect();
        // Simulated detector: softmax over negative squared prototype
        // distances; background gets a fixed pseudo-distance.
        let mut logits = vec![0.0; n_ce];
        logits[bg_ce] = -2.0f64 / tau;
        for (c, proto) in world.prototypes.iter().enumerate() {
            let d2: f64 =
                proto.as_slice().iter().zip(&feat).map(|(p, f)| (p - f) * (p - f)).sum();
            logits[ce_of[c]] = -d2 / tau;
        }
        let probs = crate::tensor::softmax_slice(&logits);
        label_dists.row_mut(i).copy_from_slice(&probs);
        boxes.push(bbox);
        features.push(Tensor::vector(&feat));
        classes.push(class);
    }

    let pairs = ordered_pairs(n_entities);
    let mut union_features = Vec::with_capacity(pairs.len());
    for &(s, o) in &pairs {
        let mean: Vec<f64> = features[s]
            .as_slice()
            .iter()
            .zip(features[o].as_slice())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        let mut u = mean;
        u.extend_from_slice(&geometry(&boxes[s], &boxes[o]));
        union_features.push(Tensor::vector(&u));
    }

    // Ground-truth triplets: each ordered pair is annotated with its
    // rule-table predicate with probability 1/2; at least one pair kept.
    let mut gt_triplets = Vec::new();
    for &(s, o) in &pairs {
        if rng.random_range(0.0..1.0) < 0.5 {
            let spatial = spatial_relation(&boxes[s], &boxes[o]);
            let pred = world.rule(classes[s], classes[o], spatial);
            gt_triplets.push((s, cp_of[pred], o));
        }
    }
    if gt_triplets.is_empty() {
        let (s, o) = pairs[0];
        let spatial = spatial_relation(&boxes[s], &boxes[o]);
        let pred = world.rule(classes[s], classes[o], spatial);
        gt_triplets.push((s, cp_of[pred], o));
    }

    Ok(SceneRecord {
        image_id: seed,
        gt_classes: classes.iter().map(|&c| ce_of[c]).collect(),
        gt_boxes: boxes.clone(),
        boxes,
        features,
        label_dists,
        union_features,
        gt_triplets,
    })
}

/// Sample `n_scenes` scenes with entity counts in `n_range`, using
/// per-scene seeds derived from the global seed and image id.
pub fn generate_dataset(
    world: &ToyWorld,
    n_scenes: usize,
    n_range: (usize, usize),
    seed: u64,
) -> Result<Vec<SceneRecord>> {
    (0..n_scenes)
        .map(|i| {
            let scene_seed = splitmix64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed.wrapping_add(1));
            let n = rng.random_range(n_range.0..=n_range.1);
            let mut rec = sample_scene(world, n, scene_seed)?;
            rec.image_id = i as u64;
            Ok(rec)
        })
        .collect()
}

/// Triplet-count statistics over generated records, in world labels.
pub fn triplet_counts(world: &ToyWorld, records: &[SceneRecord]) -> TripletCounts {
    let ce_order = world.ce_order();
    let cp_order = world.cp_order();
    let mut counts = TripletCounts::new();
    for rec in records {
        for &(s, p, o) in &rec.gt_triplets {
            counts.add(&ce_order[rec.gt_classes[s]], &cp_order[p], &ce_order[rec.gt_classes[o]], 1);
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{}", x)).collect::<Vec<_>>().join(",")
}

fn fmt_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2)
}

fn parse_floats(s: &str, line: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| GbError::Parse { line, msg: format!("bad float '{}': {}", v, e) })
        })
        .collect()
}

fn parse_box(s: &str, line: usize) -> Result<BBox> {
    let v = parse_floats(s, line)?;
    if v.len() != 4 {
        return Err(GbError::Parse { line, msg: format!("box needs 4 floats, got {}", v.len()) });
    }
    BBox::new(v[0], v[1], v[2], v[3])
}

/// Write records in the line-delimited `GBDS 1` format (one image per
/// line; `;` between entities, `|` between entity fields).
pub fn write_dataset(records: &[SceneRecord], feat_dim: usize, path: &Path) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "GBDS 1 feat_dim={}", feat_dim).unwrap();
    for rec in records {
        let ents: Vec<String> = (0..rec.n_entities())
            .map(|i| {
                format!(
                    "{}|{}|{}|{}|{}",
                    fmt_box(&rec.boxes[i]),
                    fmt_floats(rec.features[i].as_slice()),
                    fmt_floats(rec.label_dists.row(i)),
                    rec.gt_classes[i],
                    fmt_box(&rec.gt_boxes[i])
                )
            })
            .collect();
        let unions: Vec<String> =
            rec.union_features.iter().map(|u| fmt_floats(u.as_slice())).collect();
        let triplets: Vec<String> =
            rec.gt_triplets.iter().map(|(a, p, b)| format!("{},{},{}", a, p, b)).collect();
        let opt = |v: Vec<String>| if v.is_empty() { "-".to_string() } else { v.join(";") };
        writeln!(s, "{}\t{}\t{}\t{}\t{}", rec.image_id, rec.n_entities(), opt(ents), opt(unions), opt(triplets))
            .unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Read a `GBDS 1` file back. Returns the records and the feature dim.
pub fn read_dataset(path: &Path) -> Result<(Vec<SceneRecord>, usize)> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<(Vec<SceneRecord>, usize)> {
    let mut lines = text.lines().enumerate();
    let feat_dim = match lines.next() {
        Some((_, h)) if h.starts_with("GBDS 1 feat_dim=") => h["GBDS 1 feat_dim=".len()..]
            .trim()
            .parse::<usize>()
            .map_err(|e| GbError::Parse { line: 1, msg: format!("bad feat_dim: {}", e) })?,
        _ => return Err(GbError::Format("missing GBDS 1 header".into())),
    };
    let mut records = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(GbError::Parse {
                line: line_no,
                msg: format!("expected 5 tab-separated fields, got {}", cols.len()),
            });
        }
        let image_id: u64 = cols[0]
            .parse()
            .map_err(|e| GbError::Parse { line: line_no, msg: format!("bad image id: {}", e) })?;
        let n: usize = cols[1]
            .parse()
            .map_err(|e| GbError::Parse { line: line_no, msg: format!("bad entity count: {}", e) })?;
        fn split_list(s: &str) -> Vec<&str> {
            if s == "-" {
                Vec::new()
            } else {
                s.split(';').collect()
            }
        }

        let ent_parts = split_list(cols[2]);
        if ent_parts.len() != n {
            return Err(GbError::Parse {
                line: line_no,
                msg: format!("{} entities declared but {} present", n, ent_parts.len()),
            });
        }
        let mut boxes = Vec::new();
        let mut features = Vec::new();
        let mut gt_classes = Vec::new();
        let mut gt_boxes = Vec::new();
        let mut dist_rows: Vec<Vec<f64>> = Vec::new();
        for e in &ent_parts {
            let f: Vec<&str> = e.split('|').collect();
            if f.len() != 5 {
                return Err(GbError::Parse {
                    line: line_no,
                    msg: format!("entity needs 5 |-fields, got {}", f.len()),
                });
            }
            boxes.push(parse_box(f[0], line_no)?);
            features.push(Tensor::vector(&parse_floats(f[1], line_no)?));
            dist_rows.push(parse_floats(f[2], line_no)?);
            gt_classes.push(f[3].parse::<usize>().map_err(|e| GbError::Parse {
                line: line_no,
                msg: format!("bad gt class: {}", e),
            })?);
            gt_boxes.push(parse_box(f[4], line_no)?);
        }
        let n_ce = dist_rows.first().map(|r| r.len()).unwrap_or(0);
        let mut label_dists = Tensor::zeros(n, n_ce);
        for (r, row) in dist_rows.iter().enumerate() {
            if row.len() != n_ce {
                return Err(GbError::Parse { line: line_no, msg: "ragged label distribution".into() });
            }
            label_dists.row_mut(r).copy_from_slice(row);
        }

        let union_parts = split_list(cols[3]);
        if union_parts.len() != n * n.saturating_sub(1) {
            return Err(GbError::Parse {
                line: line_no,
                msg: format!(
                    "expected {} union features, got {}",
                    n * n.saturating_sub(1),
                    union_parts.len()
                ),
            });
        }
        let union_features: Vec<Tensor> = union_parts
            .iter()
            .map(|u| parse_floats(u, line_no).map(|v| Tensor::vector(&v)))
            .collect::<Result<_>>()?;

        let mut gt_triplets = Vec::new();
        for t in split_list(cols[4]) {
            let v: Vec<&str> = t.split(',').collect();
            if v.len() != 3 {
                return Err(GbError::Parse { line: line_no, msg: "triplet needs 3 fields".into() });
            }
            let parse_idx = |s: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|e| GbError::Parse {
                    line: line_no,
                    msg: format!("bad triplet index: {}", e),
                })
            };
            let (s_idx, p, o_idx) = (parse_idx(v[0])?, parse_idx(v[1])?, parse_idx(v[2])?);
            if s_idx >= n || o_idx >= n {
                return Err(GbError::Parse { line: line_no, msg: "triplet index out of range".into() });
            }
            gt_triplets.push((s_idx, p, o_idx));
        }

        records.push(SceneRecord {
            image_id,
            boxes,
            features,
            label_dists,
            gt_classes,
            gt_boxes,
            union_features,
            gt_triplets,
        });
    }
    Ok((records, feat_dim))
}

/// Serialize a world (`GBWORLD 1` header, TSV body).
pub fn write_world(world: &ToyWorld, path: &Path) -> Result<()> {
    let mut s = String::from("GBWORLD 1\n");
    writeln!(
        s,
        "meta\t{}\t{}\t{}\t{}\t{}",
        world.n_entity_classes(),
        world.n_predicate_classes(),
        world.feat_dim,
        world.sigma,
        world.seed
    )
    .unwrap();
    for (l, p) in world.entity_labels.iter().zip(&world.prototypes) {
        writeln!(s, "proto\t{}\t{}", l, fmt_floats(p.as_slice())).unwrap();
    }
    for (l, e) in world.predicate_labels.iter().zip(&world.predicate_embeddings) {
        writeln!(s, "pembed\t{}\t{}", l, fmt_floats(e.as_slice())).unwrap();
    }
    let nec = world.n_entity_classes();
    for sc in 0..nec {
        for oc in 0..nec {
            for sp in 0..N_SPATIAL {
                writeln!(s, "rule\t{}\t{}\t{}\t{}", sc, oc, sp, world.rule(sc, oc, sp)).unwrap();
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<ToyWorld> {
    let text = std::fs::read_to_string(path)?;
    parse_world(&text)
}

pub fn parse_world(text: &str) -> Result<ToyWorld> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "GBWORLD 1" => {}
        _ => return Err(GbError::Format("missing GBWORLD 1 header".into())),
    }
    let mut meta: Option<(usize, usize, usize, f64, u64)> = None;
    let mut protos: Vec<(String, Vec<f64>)> = Vec::new();
    let mut pembeds: Vec<(String, Vec<f64>)> = Vec::new();
    let mut rules: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[0] {
            "meta" if cols.len() == 6 => {
                let p = |s: &str| -> Result<usize> {
                    s.parse().map_err(|e| GbError::Parse {
                        line: line_no,
                        msg: format!("bad meta: {}", e),
                    })
                };
                meta = Some((
                    p(cols[1])?,
                    p(cols[2])?,
                    p(cols[3])?,
                    cols[4].parse().map_err(|e| GbError::Parse {
                        line: line_no,
                        msg: format!("bad sigma: {}", e),
                    })?,
                    cols[5].parse().map_err(|e| GbError::Parse {
                        line: line_no,
                        msg: format!("bad seed: {}", e),
                    })?,
                ));
            }
            "proto" if cols.len() == 3 => {
                protos.push((cols[1].to_string(), parse_floats(cols[2], line_no)?))
            }
            "pembed" if cols.len() == 3 => {
                pembeds.push((cols[1].to_string(), parse_floats(cols[2], line_no)?))
            }
            "rule" if cols.len() == 5 => {
                let p = |s: &str| -> Result<usize> {
                    s.parse().map_err(|e| GbError::Parse {
                        line: line_no,
                        msg: format!("bad rule: {}", e),
                    })
                };
                rules.push((p(cols[1])?, p(cols[2])?, p(cols[3])?, p(cols[4])?));
            }
            _ => return Err(GbError::Parse { line: line_no, msg: format!("bad line '{}'", line) }),
        }
    }
    let (nec, npc, feat_dim, sigma, seed) =
        meta.ok_or_else(|| GbError::Format("world file missing meta line".into()))?;
    if protos.len() != nec || pembeds.len() != npc || rules.len() != nec * nec * N_SPATIAL {
        return Err(GbError::Format("world file sections do not match meta counts".into()));
    }
    let mut rule_vec = vec![0usize; nec * nec * N_SPATIAL];
    for (sc, oc, sp, class) in rules {
        if sc >= nec || oc >= nec || sp >= N_SPATIAL || class >= npc {
            return Err(GbError::Format("rule index out of range".into()));
        }
        rule_vec[(sc * nec + oc) * N_SPATIAL + sp] = class;
    }
    Ok(ToyWorld {
        entity_labels: protos.iter().map(|(l, _)| l.clone()).collect(),
        predicate_labels: pembeds.iter().map(|(l, _)| l.clone()).collect(),
        prototypes: protos.iter().map(|(_, v)| Tensor::vector(v)).collect(),
        predicate_embeddings: pembeds.iter().map(|(_, v)| Tensor::vector(v)).collect(),
        rules: rule_vec,
        feat_dim,
        sigma,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_worlds() {
        let a = generate_world(7, 5, 4, 8, 0.2).unwrap();
        let b = generate_world(7, 5, 4, 8, 0.2).unwrap();
        assert_eq!(a, b);
        let c = generate_world(8, 5, 4, 8, 0.2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sigma_zero_features_equal_prototypes_and_detector_is_exact() {
        let world = generate_world(3, 4, 3, 6, 0.0).unwrap();
        let rec = sample_scene(&world, 4, 99).unwrap();
        let ce_order = world.ce_order();
        for i in 0..4 {
            let class_label = &ce_order[rec.gt_classes[i]];
            let class = world.entity_labels.iter().position(|l| l == class_label).unwrap();
            assert_eq!(rec.features[i], world.prototypes[class]);
            let row = rec.label_dists.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, rec.gt_classes[i]);
        }
    }

    #[test]
    fn zipf_masses_have_harmonic_ratios() {
        let m = zipf_masses(4);
        assert!((m[0] / m[1] - 2.0).abs() < 1e-12);
        assert!((m[0] / m[2] - 3.0).abs() < 1e-12);
        assert!((m[0] / m[3] - 4.0).abs() < 1e-12);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rule_table_is_total_and_quota_matches_zipf() {
        let world = generate_world(11, 4, 4, 6, 0.1).unwrap();
        let n_cells = 4 * 4 * N_SPATIAL;
        assert_eq!(world.rules.len(), n_cells);
        let mut hist = vec![0usize; 4];
        for &r in &world.rules {
            hist[r] += 1;
        }
        // Allocation granularity is one group cell: with 4 classes in 2
        // groups of 2 that is 2*2 = 4 table cells.
        let masses = zipf_masses(4);
        for (k, &h) in hist.iter().enumerate() {
            let want = masses[k] * n_cells as f64;
            assert!((h as f64 - want).abs() <= 4.0, "class {}: {} vs {}", k, h, want);
        }
        assert_eq!(hist.iter().sum::<usize>(), n_cells);
    }

    #[test]
    fn two_entities_have_at_most_two_triplets() {
        let world = generate_world(5, 3, 3, 4, 0.1).unwrap();
        for seed in 0..20 {
            let rec = sample_scene(&world, 2, seed).unwrap();
            assert!(!rec.gt_triplets.is_empty());
            assert!(rec.gt_triplets.len() <= 2);
        }
    }

    #[test]
    fn histogram_over_many_scenes_tracks_zipf_target() {
        let world = generate_world(17, 6, 4, 6, 0.1).unwrap();
        let records = generate_dataset(&world, 1200, (3, 5), 23).unwrap();
        let cp_order = world.cp_order();
        let mut hist = vec![0usize; world.n_predicate_classes()];
        let mut total = 0usize;
        for rec in &records {
            for &(_, p, _) in &rec.gt_triplets {
                let label = &cp_order[p];
                let class = world.predicate_labels.iter().position(|l| l == label).unwrap();
                hist[class] += 1;
                total += 1;
            }
        }
        let masses = zipf_masses(world.n_predicate_classes());
        for (k, &h) in hist.iter().enumerate() {
            let got = h as f64 / total as f64;
            assert!(
                (got - masses[k]).abs() < 0.05,
                "class {}: {} vs target {}",
                k,
                got,
                masses[k]
            );
        }
    }

    #[test]
    fn scene_is_deterministic_and_roundtrips() {
        let world = generate_world(2, 4, 3, 5, 0.15).unwrap();
        let a = sample_scene(&world, 3, 77).unwrap();
        let b = sample_scene(&world, 3, 77).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gbds");
        write_dataset(&[a.clone()], world.feat_dim, &path).unwrap();
        let (read, dim) = read_dataset(&path).unwrap();
        assert_eq!(dim, world.feat_dim);
        assert_eq!(read.len(), 1);
        assert_eq!(read[0], a);
        // Serialization itself is byte-stable.
        let bytes1 = std::fs::read(&path).unwrap();
        write_dataset(&read, dim, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.gbds");
        write_dataset(&[], 4, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "GBDS 1 feat_dim=4\n");
        let (records, dim) = read_dataset(&path).unwrap();
        assert!(records.is_empty());
        assert_eq!(dim, 4);
    }

    #[test]
    fn truncated_line_is_parse_error_with_line_number() {
        let world = generate_world(2, 3, 3, 4, 0.1).unwrap();
        let recs = generate_dataset(&world, 2, (2, 3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gbds");
        write_dataset(&recs, world.feat_dim, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = lines[2].rfind('\t').unwrap();
        let truncated = &lines[2][..cut];
        lines[2] = truncated;
        match parse_dataset(&lines.join("\n")) {
            Err(GbError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn world_roundtrips_through_file() {
        let world = generate_world(13, 4, 3, 5, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gbworld");
        write_world(&world, &path).unwrap();
        let read = read_world(&path).unwrap();
        assert_eq!(world, read);
    }

    #[test]
    fn spatial_relation_covers_four_sectors() {
        let mk = |x: f64, y: f64| BBox::new(x, y, x + 0.1, y + 0.1).unwrap();
        let s = mk(0.45, 0.45);
        assert_eq!(spatial_relation(&s, &mk(0.8, 0.45)), 0); // right
        assert_eq!(spatial_relation(&s, &mk(0.1, 0.45)), 1); // left
        assert_eq!(spatial_relation(&s, &mk(0.45, 0.8)), 2); // below
        assert_eq!(spatial_relation(&s, &mk(0.45, 0.1)), 3); // above
    }

    #[test]
    fn ontology_and_embeddings_compile() {
        use crate::commonsense::{assemble, compile_conditional_edges};
        let world = generate_world(19, 4, 3, 5, 0.1).unwrap();
        let records = generate_dataset(&world, 30, (2, 4), 3).unwrap();
        let counts = triplet_counts(&world, &records);
        assert!(counts.total() > 0);
        let cond = compile_conditional_edges(&counts).unwrap();
        let cs = assemble(
            &world.entity_labels,
            &world.predicate_labels,
            &world.ontology_edges(),
            &cond,
            &world.embedding_table(),
        )
        .unwrap();
        assert_eq!(cs.n_ce(), 5);
        assert_eq!(cs.n_cp(), 4);
        assert_eq!(cs.entity_labels, world.ce_order());
        assert_eq!(cs.predicate_labels, world.cp_order());
        assert!(!cs.edges.is_empty());
    }
}
