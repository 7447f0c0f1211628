//! Supervised training: alignment to ground truth, class-balanced
//! cross-entropy over the final bridge rows, Adam, checkpoints.
//!
//! Entities are aligned to ground truth greedily by IoU (highest first,
//! each ground-truth entity usable once); predicates inherit alignment
//! from their endpoint pair. The loss consumes the pre-sparsification
//! softmax rows, so the target class always has positive probability;
//! predicate terms are weighted by (1-beta)/(1-beta^n_j) when class
//! balancing is on. Only the final round's rows are supervised.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, validate_shapes};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::commonsense::CommonsenseGraph;
use crate::error::{GbError, Result};
use crate::eval::iou;
use crate::graph::{ordered_pairs, BBox};
use crate::model::{
    build_image_graph, forward_traced, InferenceMode, ModelParams, TracedForward,
};
use crate::synth::SceneRecord;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Per-node classification targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// CE class per entity (background when unmatched).
    pub entity_targets: Vec<usize>,
    /// Matched ground-truth entity index, if any.
    pub matched_gt: Vec<Option<usize>>,
    /// CP class per ordered pair (background when no ground-truth
    /// predicate connects the aligned endpoints).
    pub predicate_targets: Vec<usize>,
}

/// Greedy highest-IoU-first entity alignment; predicate targets are
/// induced by the aligned endpoint pair.
#[allow(clippy::too_many_arguments)]
pub fn align(
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    gt_triplets: &[(usize, usize, usize)],
    pairs: &[(usize, usize)],
    iou_threshold: f64,
    bg_entity: usize,
    bg_predicate: usize,
) -> Alignment {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, pb) in pred_boxes.iter().enumerate() {
        for (j, gb) in gt_boxes.iter().enumerate() {
            let v = iou(pb, gb);
            if v >= iou_threshold {
                cands.push((v, i, j));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite IoU").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut matched_gt = vec![None; pred_boxes.len()];
    let mut gt_used = vec![false; gt_boxes.len()];
    for (_, i, j) in cands {
        if matched_gt[i].is_none() && !gt_used[j] {
            matched_gt[i] = Some(j);
            gt_used[j] = true;
        }
    }
    let entity_targets: Vec<usize> =
        matched_gt.iter().map(|m| m.map(|j| gt_classes[j]).unwrap_or(bg_entity)).collect();
    let predicate_targets: Vec<usize> = pairs
        .iter()
        .map(|&(s, o)| match (matched_gt[s], matched_gt[o]) {
            (Some(a), Some(b)) => gt_triplets
                .iter()
                .find(|&&(gs, _, go)| gs == a && go == b)
                .map(|&(_, p, _)| p)
                .unwrap_or(bg_predicate),
            _ => bg_predicate,
        })
        .collect();
    Alignment { entity_targets, matched_gt, predicate_targets }
}

/// Effective-number class weight (1-beta)/(1-beta^n).
pub fn class_balanced_weight(n_j: u64, beta: f64) -> Result<f64> {
    if n_j == 0 {
        return Err(GbError::Input("class weight undefined for frequency 0".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(GbError::Input(format!("beta {} outside [0,1)", beta)));
    }
    if beta == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - beta) / (1.0 - beta.powi(n_j as i32)))
}

/// Per-predicate-class weights from training frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBalanceTable {
    weights: Vec<Option<f64>>,
}

impl ClassBalanceTable {
    pub fn from_counts(counts: &[u64], beta: f64) -> Result<Self> {
        let weights = counts
            .iter()
            .map(|&n| if n == 0 { Ok(None) } else { class_balanced_weight(n, beta).map(Some) })
            .collect::<Result<_>>()?;
        Ok(ClassBalanceTable { weights })
    }

    /// Frequencies from dataset annotations: ground-truth triplets per
    /// class, plus unannotated ordered pairs for the background class.
    pub fn from_dataset(
        records: &[SceneRecord],
        n_cp: usize,
        bg_predicate: usize,
        beta: f64,
    ) -> Result<Self> {
        let mut counts = vec![0u64; n_cp];
        for rec in records {
            let mut annotated = std::collections::BTreeSet::new();
            for &(s, p, o) in &rec.gt_triplets {
                if p >= n_cp {
                    return Err(GbError::Input(format!("predicate class {} out of range", p)));
                }
                counts[p] += 1;
                annotated.insert((s, o));
            }
            let n = rec.n_entities();
            counts[bg_predicate] += (n * n.saturating_sub(1) - annotated.len()) as u64;
        }
        Self::from_counts(&counts, beta)
    }

    pub fn weight(&self, class: usize) -> Result<f64> {
        self.weights
            .get(class)
            .copied()
            .flatten()
            .ok_or_else(|| GbError::Input(format!("class {} has no training frequency", class)))
    }
}

/// Cross-entropy over the dense (pre-sparsification) bridge rows:
/// entities unweighted, predicates weighted when a table is given.
/// Terms accumulate in node order (entities, then predicates).
pub fn compute_loss(
    bridges: &crate::graph::BridgeSet,
    alignment: &Alignment,
    table: Option<&ClassBalanceTable>,
) -> Result<f64> {
    if bridges.entity_dense.rows() != alignment.entity_targets.len()
        || bridges.predicate_dense.rows() != alignment.predicate_targets.len()
    {
        return Err(GbError::Shape("alignment does not match bridge rows".into()));
    }
    let mut loss = 0.0;
    for (i, &tgt) in alignment.entity_targets.iter().enumerate() {
        let p = bridges.entity_dense.get(i, tgt);
        if p <= 0.0 {
            return Err(GbError::Numeric(format!("entity {} target probability {}", i, p)));
        }
        loss += -(p.ln());
    }
    for (i, &tgt) in alignment.predicate_targets.iter().enumerate() {
        let p = bridges.predicate_dense.get(i, tgt);
        if p <= 0.0 {
            return Err(GbError::Numeric(format!("predicate {} target probability {}", i, p)));
        }
        let w = match table {
            Some(t) => t.weight(tgt)?,
            None => 1.0,
        };
        loss += -(w * p.ln());
    }
    Ok(loss)
}

/// Tape version of [`compute_loss`] over a traced forward pass, with the
/// same term order and associativity.
pub fn traced_loss(
    tape: &mut Tape,
    fwd: &TracedForward,
    alignment: &Alignment,
    table: Option<&ClassBalanceTable>,
) -> Result<Var> {
    if fwd.entity_rows.len() != alignment.entity_targets.len()
        || fwd.predicate_rows.len() != alignment.predicate_targets.len()
    {
        return Err(GbError::Shape("alignment does not match traced rows".into()));
    }
    let mut terms: Vec<Var> = Vec::new();
    let add_term = |tape: &mut Tape, row: &Option<Var>, dense: &[f64], tgt: usize, w: f64| -> Result<Var> {
        let row_var = match row {
            Some(v) => *v,
            None => tape.constant(Tensor::vector(dense))?,
        };
        let p = tape.pick(row_var, tgt)?;
        let lp = tape.log(p)?;
        tape.scale(lp, -w)
    };
    for (i, &tgt) in alignment.entity_targets.iter().enumerate() {
        let t = add_term(tape, &fwd.entity_rows[i], fwd.bridges.entity_dense.row(i), tgt, 1.0)?;
        terms.push(t);
    }
    for (i, &tgt) in alignment.predicate_targets.iter().enumerate() {
        let w = match table {
            Some(t) => t.weight(tgt)?,
            None => 1.0,
        };
        let t = add_term(tape, &fwd.predicate_rows[i], fwd.bridges.predicate_dense.row(i), tgt, w)?;
        terms.push(t);
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    for &t in terms.iter().skip(1) {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Write accumulated gradients into each parameter's grad slot.
pub fn apply_gradients(params: &mut ModelParams, grads: &Gradients) {
    for id in 0..params.n_tensors() {
        let t = params.tensor_mut(id);
        match grads.get(id) {
            Some(g) => t.set_grad(g.as_slice().to_vec()),
            None => t.set_grad(vec![0.0; t.len()]),
        }
    }
}

/// Adam optimizer state: first/second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ModelParams| -> Vec<Tensor> {
            (0..p.n_tensors()).map(|i| Tensor::zeros(p.tensor(i).rows(), p.tensor(i).cols())).collect()
        };
        AdamState { lr, beta1, beta2, eps, step: 0, m: zeros(params), v: zeros(params) }
    }
}

/// One bias-corrected Adam update. Missing gradient slots count as zero.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for id in 0..params.n_tensors() {
        let p = params.tensor_mut(id);
        let m = state.m[id].as_mut_slice();
        let v = state.v[id].as_mut_slice();
        let g_tensor = grads.get(id);
        for (k, pv) in p.as_mut_slice().iter_mut().enumerate() {
            let g = g_tensor.map(|t| t.as_slice()[k]).unwrap_or(0.0);
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Class-balance beta; 0 disables reweighting.
    pub balance_beta: f64,
    pub iou_threshold: f64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            batch: 8,
            seed: 0,
            balance_beta: 0.0,
            iou_threshold: 0.5,
            max_steps: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainResult {
    pub params: ModelParams,
    pub adam: AdamState,
    pub log: Vec<StepLog>,
}

/// Full training loop over the dataset (detected boxes, no clamping).
/// Per-image gradients within a batch are computed in parallel and
/// reduced in image order, so results do not depend on thread count.
pub fn train(
    records: &[SceneRecord],
    cs: &CommonsenseGraph,
    params: ModelParams,
    config: &TrainConfig,
) -> Result<TrainResult> {
    if records.is_empty() {
        return Err(GbError::Input("empty training dataset".into()));
    }
    let mut params = params;
    let table = if config.balance_beta > 0.0 {
        Some(ClassBalanceTable::from_dataset(
            records,
            cs.n_cp(),
            cs.background_predicate,
            config.balance_beta,
        )?)
    } else {
        None
    };
    // Boxes are fixed, so alignments can be computed once.
    let alignments: Vec<Alignment> = records
        .iter()
        .map(|rec| {
            align(
                &rec.boxes,
                &rec.gt_boxes,
                &rec.gt_classes,
                &rec.gt_triplets,
                &ordered_pairs(rec.n_entities()),
                config.iou_threshold,
                cs.background_entity,
                cs.background_predicate,
            )
        })
        .collect();

    let mut adam = AdamState::new(&params, config.lr, config.beta1, config.beta2, config.eps);
    let mut log = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut step = 0usize;

    'epochs: for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch.max(1)) {
            let results: Vec<Result<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let rec = &records[idx];
                    let inputs = rec.to_inputs(InferenceMode::SgGen);
                    let ig = build_image_graph(cs, &inputs.boxes)?;
                    let mut tape = Tape::new();
                    let fwd =
                        forward_traced(&mut tape, &ig, &inputs, cs, &params, InferenceMode::SgGen)?;
                    let loss = traced_loss(&mut tape, &fwd, &alignments[idx], table.as_ref())?;
                    let loss_val = tape.value(loss).as_slice()[0];
                    if !loss_val.is_finite() {
                        return Err(GbError::Numeric(format!(
                            "non-finite loss on image {}",
                            rec.image_id
                        )));
                    }
                    let grads = tape.backward(loss)?;
                    Ok((loss_val, grads))
                })
                .collect();

            let scale = 1.0 / chunk.len() as f64;
            let mut batch_grads = Gradients::zeros(params.n_tensors());
            let mut batch_loss = 0.0;
            for r in results {
                let (loss_val, grads) = r?;
                batch_loss += loss_val * scale;
                batch_grads.add_scaled(&grads, scale);
            }
            apply_gradients(&mut params, &batch_grads);
            adam_step(&mut params, &batch_grads, &mut adam);
            step += 1;
            log.push(StepLog { step, loss: batch_loss, lr: config.lr });
            if config.max_steps.map(|m| step >= m).unwrap_or(false) {
                break 'epochs;
            }
        }
    }

    if let Some(path) = &config.checkpoint {
        save_checkpoint(&params, &adam, path)?;
    }
    Ok(TrainResult { params, adam, log })
}
