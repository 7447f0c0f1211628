//! Recall evaluation: ranked triplet extraction, IoU matching, R@K and
//! mR@K for the three tasks.
//!
//! Triplet confidence is the product of the three element scores; the
//! entity score is the maximum bridge weight of the node and the
//! predicate score is the bridge weight of the candidate class.
//! Candidates classified as background predicate are never emitted.
//! With the graph constraint, only the single best predicate per
//! ordered entity pair survives. A ground-truth triplet is hit when a
//! top-K prediction matches all three classes and both endpoint boxes
//! with IoU >= 0.5; predictions and ground truth are consumed greedily
//! in rank order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::commonsense::CommonsenseGraph;
use crate::error::{GbError, Result};
use crate::graph::{ordered_pairs, BBox, BridgeSet};
use crate::model::{build_image_graph, forward, InferenceMode, ModelParams};
use crate::synth::SceneRecord;

/// Intersection-over-union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub subject_id: usize,
    pub subject_class: usize,
    pub subject_box: BBox,
    pub predicate_class: usize,
    pub object_id: usize,
    pub object_class: usize,
    pub object_box: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtTriplet {
    pub subject_class: usize,
    pub subject_box: BBox,
    pub predicate_class: usize,
    pub object_class: usize,
    pub object_box: BBox,
}

/// Entity classification from a bridge row: (argmax class, max weight),
/// ties toward the lowest class index.
pub fn entity_score(row: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Rank candidate triplets by descending confidence. `pairs` maps each
/// predicate row to its (subject, object) entity indices; `boxes` are
/// the entity boxes of the evaluated task.
#[allow(clippy::too_many_arguments)]
pub fn extract_topk(
    bridges: &BridgeSet,
    pairs: &[(usize, usize)],
    boxes: &[BBox],
    bg_entity: usize,
    bg_predicate: usize,
    k: usize,
    constrained: bool,
) -> Result<Vec<ScoredTriplet>> {
    if k == 0 {
        return Err(GbError::Input("top-K must be positive".into()));
    }
    if bridges.predicate.rows() != pairs.len() {
        return Err(GbError::Input(format!(
            "{} predicate rows for {} pairs",
            bridges.predicate.rows(),
            pairs.len()
        )));
    }
    let _ = bg_entity; // background entities keep their argmax score
    let ent: Vec<(usize, f64)> =
        (0..bridges.entity.rows()).map(|i| entity_score(bridges.entity.row(i))).collect();

    let mut candidates: Vec<ScoredTriplet> = Vec::new();
    for (pi, &(s, o)) in pairs.iter().enumerate() {
        let row = bridges.predicate.row(pi);
        let mut pair_best: Option<ScoredTriplet> = None;
        for (c, &w) in row.iter().enumerate() {
            if c == bg_predicate || w <= 0.0 {
                continue;
            }
            let confidence = ent[s].1 * w * ent[o].1;
            let t = ScoredTriplet {
                subject_id: s,
                subject_class: ent[s].0,
                subject_box: boxes[s],
                predicate_class: c,
                object_id: o,
                object_class: ent[o].0,
                object_box: boxes[o],
                confidence,
            };
            if constrained {
                let better = match &pair_best {
                    None => true,
                    Some(b) => {
                        confidence > b.confidence
                            || (confidence == b.confidence && c < b.predicate_class)
                    }
                };
                if better {
                    pair_best = Some(t);
                }
            } else {
                candidates.push(t);
            }
        }
        if let Some(b) = pair_best {
            candidates.push(b);
        }
    }

    candidates.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then(a.subject_id.cmp(&b.subject_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.predicate_class.cmp(&b.predicate_class))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Per-image matching outcome, pooled later for mR.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub recall: f64,
    /// predicate class -> (hits, ground-truth totals)
    pub per_class: BTreeMap<usize, (usize, usize)>,
}

/// Match top-K predictions against ground truth. Predictions are taken
/// in rank order; each consumes at most one ground-truth triplet.
pub fn match_and_recall(
    predictions: &[ScoredTriplet],
    gt: &[GtTriplet],
    k: usize,
    _task: InferenceMode,
) -> Result<ImageEval> {
    if gt.is_empty() {
        return Err(GbError::Input("ground truth for the image is empty".into()));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for g in gt {
        per_class.entry(g.predicate_class).or_insert((0, 0)).1 += 1;
    }
    let mut consumed = vec![false; gt.len()];
    let mut hits = 0usize;
    for p in predictions.iter().take(k) {
        for (gi, g) in gt.iter().enumerate() {
            if consumed[gi] {
                continue;
            }
            if p.subject_class == g.subject_class
                && p.predicate_class == g.predicate_class
                && p.object_class == g.object_class
                && iou(&p.subject_box, &g.subject_box) >= IOU_THRESHOLD
                && iou(&p.object_box, &g.object_box) >= IOU_THRESHOLD
            {
                consumed[gi] = true;
                hits += 1;
                per_class.get_mut(&g.predicate_class).unwrap().0 += 1;
                break;
            }
        }
    }
    Ok(ImageEval { recall: hits as f64 / gt.len() as f64, per_class })
}

/// Mean per-image recall plus pooled per-class recalls and their mean.
pub fn aggregate(per_image: &[ImageEval]) -> Result<(f64, Vec<(usize, usize, usize)>, f64)> {
    if per_image.is_empty() {
        return Err(GbError::Input("no images to aggregate".into()));
    }
    let recall = per_image.iter().map(|e| e.recall).sum::<f64>() / per_image.len() as f64;
    let mut pooled: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for e in per_image {
        for (&class, &(h, t)) in &e.per_class {
            let entry = pooled.entry(class).or_insert((0, 0));
            entry.0 += h;
            entry.1 += t;
        }
    }
    let per_class: Vec<(usize, usize, usize)> =
        pooled.iter().map(|(&c, &(h, t))| (c, h, t)).collect();
    let observed: Vec<f64> = per_class
        .iter()
        .filter(|(_, _, t)| *t > 0)
        .map(|(_, h, t)| *h as f64 / *t as f64)
        .collect();
    let mean_recall = if observed.is_empty() {
        0.0
    } else {
        observed.iter().sum::<f64>() / observed.len() as f64
    };
    Ok((recall, per_class, mean_recall))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub k: usize,
    pub constrained: bool,
    pub recall: f64,
    pub mean_recall: f64,
    /// (predicate class, hits, totals), pooled across images.
    pub per_class: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: InferenceMode,
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    /// Line-oriented form: `task<TAB>metric<TAB>K<TAB>constrained<TAB>value`.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let con = if e.constrained { "yes" } else { "no" };
            writeln!(s, "{}\tR\t{}\t{}\t{:.6}", self.task.name(), e.k, con, e.recall).unwrap();
            writeln!(s, "{}\tmR\t{}\t{}\t{:.6}", self.task.name(), e.k, con, e.mean_recall)
                .unwrap();
        }
        s
    }

    /// Human-readable table with per-class recalls.
    pub fn to_table(&self, cs: &CommonsenseGraph) -> String {
        let mut s = String::new();
        writeln!(s, "task: {}", self.task.name()).unwrap();
        writeln!(s, "{:>6} {:>12} {:>10} {:>10}", "K", "constrained", "R", "mR").unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{:>6} {:>12} {:>10.4} {:>10.4}",
                e.k,
                if e.constrained { "yes" } else { "no" },
                e.recall,
                e.mean_recall
            )
            .unwrap();
        }
        writeln!(s, "per-class recall (K, constrained, class, hits/totals):").unwrap();
        for e in &self.entries {
            for &(c, h, t) in &e.per_class {
                if t == 0 {
                    continue;
                }
                let label = cs
                    .predicate_labels
                    .get(c)
                    .map(|l| l.as_str())
                    .unwrap_or("?");
                writeln!(
                    s,
                    "{:>6} {:>12} {:>12} {:>3}/{:<3} = {:.4}",
                    e.k,
                    if e.constrained { "yes" } else { "no" },
                    label,
                    h,
                    t,
                    h as f64 / t as f64
                )
                .unwrap();
            }
        }
        s
    }
}

/// Ground-truth triplets of one record, in evaluator form.
pub fn gt_triplets_of(record: &SceneRecord) -> Vec<GtTriplet> {
    record
        .gt_triplets
        .iter()
        .map(|&(s, p, o)| GtTriplet {
            subject_class: record.gt_classes[s],
            subject_box: record.gt_boxes[s],
            predicate_class: p,
            object_class: record.gt_classes[o],
            object_box: record.gt_boxes[o],
        })
        .collect()
}

/// Run the model on every record and compute R/mR for each (K,
/// constrained) combination. Per-image work is data-parallel; results
/// are reduced in image order.
pub fn evaluate_scenes(
    records: &[SceneRecord],
    cs: &CommonsenseGraph,
    params: &ModelParams,
    mode: InferenceMode,
    ks: &[usize],
    constrained_modes: &[bool],
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(GbError::Input("empty evaluation dataset".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k == 0 {
        return Err(GbError::Input("no K values given".into()));
    }
    // (image, constrained) -> ranked candidates at the largest K.
    let per_image: Vec<(Vec<ScoredTriplet>, Vec<ScoredTriplet>, Vec<GtTriplet>)> = records
        .par_iter()
        .map(|rec| -> Result<_> {
            let inputs = rec.to_inputs(mode);
            let ig = build_image_graph(cs, &inputs.boxes)?;
            let (bridges, _) = forward(&ig, &inputs, cs, params, mode)?;
            let pairs = ordered_pairs(rec.n_entities());
            let con = extract_topk(
                &bridges,
                &pairs,
                &inputs.boxes,
                cs.background_entity,
                cs.background_predicate,
                max_k,
                true,
            )?;
            let unc = extract_topk(
                &bridges,
                &pairs,
                &inputs.boxes,
                cs.background_entity,
                cs.background_predicate,
                max_k,
                false,
            )?;
            Ok((con, unc, gt_triplets_of(rec)))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for &constrained in constrained_modes {
        for &k in ks {
            let evals: Vec<ImageEval> = per_image
                .iter()
                .map(|(con, unc, gt)| {
                    let preds = if constrained { con } else { unc };
                    match_and_recall(preds, gt, k, mode)
                })
                .collect::<Result<_>>()?;
            let (recall, per_class, mean_recall) = aggregate(&evals)?;
            entries.push(MetricEntry { k, constrained, recall, mean_recall, per_class });
        }
    }
    Ok(MetricReport { task: mode, entries })
}
