//! Task heads over the encoded streams: entity labeling and linking for
//! fine-tuning, plus the four pre-training objectives — masked language
//! modeling, pairwise spatial relations, sentence order, and text–image
//! alignment — with their deterministic label builders.
//!
//! All label builders are pure functions of the token streams and a seed;
//! every loss reads the final full-length encoder output, so one forward
//! pass per document serves every objective at once.

use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hourglass::{encode, EncodeOptions, Encoded};
use crate::params::{Binder, ParamStore, GTR_CHANNELS};
use crate::streams::{TokenStreams, CLS_ID, MASK_ID, UNK_ID};

/// First id past the reserved specials; random replacements draw from here.
const FIRST_WORD_ID: u32 = UNK_ID + 1;

pub const MVLM_RATIO: f64 = 0.15;
pub const TIA_RATIO: f64 = 0.15;

// ---- entity features and fine-tuning heads -------------------------------

/// Fused per-entity features: the mean of each segment's text tokens, gated
/// elementwise by the segment's visual token. Rows follow reading order;
/// shape `[n_segments, d]`.
pub fn entity_features(enc: &mut Encoded, streams: &TokenStreams) -> Result<NodeId> {
    if streams.n_segments == 0 {
        return Err(Error::Contract("entity features need at least one segment".into()));
    }
    let text = enc.stream.text;
    let visual = enc.stream.visual;
    let g = &mut enc.graph;
    let mut means = Vec::with_capacity(streams.n_segments);
    for (s, &(start, end)) in streams.seg_spans.iter().enumerate() {
        if start == end {
            return Err(Error::Contract(format!("segment {s} has an empty token span")));
        }
        let rows = g.gather_rows(text, Rc::new((start..end).collect()))?;
        means.push(g.mean_rows(rows)?);
    }
    let text_part = g.concat_rows(&means)?;
    let vis_rows = g.gather_rows(visual, Rc::new((0..streams.n_segments).collect()))?;
    g.mul(text_part, vis_rows)
}

/// Per-entity category logits, `[n_segments, N_LABELS]`.
pub fn labeling_logits(enc: &mut Encoded, store: &ParamStore, zf: NodeId) -> Result<NodeId> {
    let g = &mut enc.graph;
    let w = enc.binder.bind(g, store, "head.label_w")?;
    let b = enc.binder.bind(g, store, "head.label_b")?;
    let z = g.matmul(zf, w)?;
    g.add_bias_row(z, b)
}

/// Mean cross-entropy over the labeled segments only; unlabeled segments
/// neither contribute nor block.
pub fn labeling_loss(
    enc: &mut Encoded,
    store: &ParamStore,
    zf: NodeId,
    streams: &TokenStreams,
) -> Result<NodeId> {
    let logits = labeling_logits(enc, store, zf)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, label) in streams.labels.iter().enumerate() {
        if let Some(c) = label {
            rows.push(s);
            targets.push(*c as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("no labeled segments to train on".into()));
    }
    let picked = enc.graph.gather_rows(logits, Rc::new(rows))?;
    enc.graph.ce_rows(picked, Rc::new(targets))
}

/// Host-side argmax per logit row.
pub fn labeling_predictions(g: &Graph, logits: NodeId) -> Vec<u8> {
    let t = g.value(logits);
    let c = t.shape[1];
    t.data
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Biaffine pair scorer shared by linking and order prediction:
/// X_k = W_k·z_i + b_k, X_v = W_v·z_j + b_v, logit = X_k · W_b · X_v.
/// Asymmetric in (i, j) by construction. Returns `[n_pairs, 1]` logits.
fn biaffine_logits(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    side: &str,
    zf: NodeId,
    pairs: &[[usize; 2]],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Contract(format!("{side} scoring with no candidate pairs")));
    }
    let wk = binder.bind(g, store, &format!("head.{side}_wk"))?;
    let bk = binder.bind(g, store, &format!("head.{side}_bk"))?;
    let wv = binder.bind(g, store, &format!("head.{side}_wv"))?;
    let bv = binder.bind(g, store, &format!("head.{side}_bv"))?;
    let wb = binder.bind(g, store, &format!("head.{side}_wb"))?;
    let k0 = g.matmul(zf, wk)?;
    let k = g.add_bias_row(k0, bk)?;
    let v0 = g.matmul(zf, wv)?;
    let v = g.add_bias_row(v0, bv)?;
    let kb = g.matmul(k, wb)?;
    let lhs = g.gather_rows(kb, Rc::new(pairs.iter().map(|p| p[0]).collect()))?;
    let rhs = g.gather_rows(v, Rc::new(pairs.iter().map(|p| p[1]).collect()))?;
    g.row_dot(lhs, rhs)
}

/// Linking logits for arbitrary ordered segment pairs.
pub fn linking_logits(
    enc: &mut Encoded,
    store: &ParamStore,
    zf: NodeId,
    pairs: &[[usize; 2]],
) -> Result<NodeId> {
    biaffine_logits(&mut enc.graph, &mut enc.binder, store, "link", zf, pairs)
}

/// Draws `n_wanted` entries from `pool` without replacement (partial
/// Fisher–Yates) and appends them as 0-labeled examples after the positives.
fn with_sampled_negatives(
    positives: Vec<[usize; 2]>,
    mut pool: Vec<[usize; 2]>,
    seed: u64,
) -> (Vec<[usize; 2]>, Vec<f64>) {
    let n_neg = positives.len().min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_neg {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut targets = vec![1.0; positives.len()];
    let mut pairs = positives;
    pairs.extend(pool[..n_neg].iter().copied());
    targets.extend(std::iter::repeat(0.0).take(n_neg));
    (pairs, targets)
}

/// Linking examples: every annotated link is a positive; an equal number of
/// unlinked ordered pairs is drawn without replacement under the seed.
/// Documents without links yield no examples.
pub fn linking_examples(streams: &TokenStreams, seed: u64) -> (Vec<[usize; 2]>, Vec<f64>) {
    let s = streams.n_segments;
    let positives = streams.links.clone();
    if positives.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let pool: Vec<[usize; 2]> = (0..s)
        .flat_map(|i| (0..s).map(move |j| [i, j]))
        .filter(|p| p[0] != p[1] && !positives.contains(p))
        .collect();
    with_sampled_negatives(positives, pool, seed)
}

/// Mean binary cross-entropy over the sampled linking examples. Returns the
/// loss with the logit node and targets so evaluation can reuse the pass.
pub fn linking_loss(
    enc: &mut Encoded,
    store: &ParamStore,
    zf: NodeId,
    streams: &TokenStreams,
    seed: u64,
) -> Result<(NodeId, NodeId, Vec<f64>)> {
    let (pairs, targets) = linking_examples(streams, seed);
    if pairs.is_empty() {
        return Err(Error::Contract("document has no links to train on".into()));
    }
    let logits = linking_logits(enc, store, zf, &pairs)?;
    let loss = enc.graph.bce_logits(logits, Rc::new(targets.clone()))?;
    Ok((loss, logits, targets))
}

// ---- pairwise spatial relations -------------------------------------------

/// Pairwise spatial-relation classes over ordered segment pairs, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrix {
    pub n: usize,
    pub classes: Vec<u8>,
}

impl RelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.classes[i * self.n + j]
    }
}

pub const GTR_FAR: u8 = 0;
pub const GTR_COINCIDENT: u8 = 9;

/// Class per 45° wedge counter-clockwise from +x with y growing downward:
/// right(4), bottom-right(8), bottom(2), bottom-left(7), left(3),
/// top-left(5), up(1), top-right(6).
const SECTOR_CLASS: [u8; 8] = [4, 8, 2, 7, 3, 5, 1, 6];

/// Relation class of each ordered pair (i, j): 0 when the centers are more
/// than half the larger page side apart, 9 when they (nearly) coincide, and
/// otherwise one of eight direction classes by the angle of c_j − c_i.
pub fn gtr_labels(boxes: &[[f64; 4]], page_w: f64, page_h: f64) -> RelationMatrix {
    let n = boxes.len();
    let scale = page_w.max(page_h);
    let centers: Vec<(f64, f64)> =
        boxes.iter().map(|b| (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))).collect();
    let mut classes = Vec::with_capacity(n * n);
    for &(xi, yi) in &centers {
        for &(xj, yj) in &centers {
            let (dx, dy) = (xj - xi, yj - yi);
            let dist = dx.hypot(dy);
            classes.push(if dist > 0.5 * scale {
                GTR_FAR
            } else if dist < 1e-6 * scale {
                GTR_COINCIDENT
            } else {
                let sector = (dy.atan2(dx) / std::f64::consts::FRAC_PI_4).round() as i64;
                SECTOR_CLASS[sector.rem_euclid(8) as usize]
            });
        }
    }
    RelationMatrix { n, classes }
}

/// Bilinear pairwise features over the segment-level visual tokens, a 10-way
/// classifier, and mean cross-entropy over all ordered pairs (diagonal
/// included).
pub fn gtr_loss(enc: &mut Encoded, store: &ParamStore, streams: &TokenStreams) -> Result<NodeId> {
    let s = streams.n_segments;
    if s == 0 {
        return Err(Error::Contract("relation loss needs at least one segment".into()));
    }
    let matrix = gtr_labels(&streams.visual_boxes[..s], streams.page_w, streams.page_h);
    let visual = enc.stream.visual;
    let g = &mut enc.graph;
    let binder = &mut enc.binder;
    let vis = g.gather_rows(visual, Rc::new((0..s).collect()))?;
    let mut channels = Vec::with_capacity(GTR_CHANNELS);
    for c in 0..GTR_CHANNELS {
        let w = binder.bind(g, store, &format!("head.gtr_w{c}"))?;
        let a = g.matmul(vis, w)?;
        let m = g.matmul_nt(a, vis)?;
        channels.push(g.reshape(m, &[s * s, 1])?);
    }
    let feats0 = g.concat_cols(&channels)?;
    let b = binder.bind(g, store, "head.gtr_b")?;
    let feats = g.add_bias_row(feats0, b)?;
    let wc = binder.bind(g, store, "head.gtr_cls_w")?;
    let bc = binder.bind(g, store, "head.gtr_cls_b")?;
    let z = g.matmul(feats, wc)?;
    let logits = g.add_bias_row(z, bc)?;
    let targets: Vec<usize> = matrix.classes.iter().map(|&c| c as usize).collect();
    g.ce_rows(logits, Rc::new(targets))
}

// ---- sentence order --------------------------------------------------------

/// Order-prediction examples: reading-order-adjacent pairs are positive; an
/// equal number of other ordered pairs (reversed or non-adjacent) is sampled
/// without replacement under the seed. Fewer than two segments yield none.
pub fn sop_pairs(streams: &TokenStreams, seed: u64) -> (Vec<[usize; 2]>, Vec<f64>) {
    let s = streams.n_segments;
    if s < 2 {
        return (Vec::new(), Vec::new());
    }
    let positives: Vec<[usize; 2]> = (0..s - 1).map(|t| [t, t + 1]).collect();
    let pool: Vec<[usize; 2]> = (0..s)
        .flat_map(|i| (0..s).map(move |j| [i, j]))
        .filter(|&[i, j]| i != j && j != i + 1)
        .collect();
    with_sampled_negatives(positives, pool, seed)
}

/// Mean binary cross-entropy over the order-prediction examples, scored by
/// the biaffine head's own parameters over the fused entity features.
pub fn sop_loss(
    enc: &mut Encoded,
    store: &ParamStore,
    zf: NodeId,
    streams: &TokenStreams,
    seed: u64,
) -> Result<NodeId> {
    let (pairs, targets) = sop_pairs(streams, seed);
    let logits = biaffine_logits(&mut enc.graph, &mut enc.binder, store, "sop", zf, &pairs)?;
    enc.graph.bce_logits(logits, Rc::new(targets))
}

// ---- masked language modeling ----------------------------------------------

/// One document's masking plan: the modified stream the encoder should see,
/// the masked positions with their original ids, and the segments whose text
/// was touched (excluded from the alignment task).
#[derive(Clone, Debug)]
pub struct MvlmPlan {
    pub streams: TokenStreams,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub masked_segments: Vec<usize>,
    pub skipped: bool,
}

/// Exact-count masking: floor(ratio · maskable) positions chosen by partial
/// Fisher–Yates, each then becoming [MASK] with probability 0.8, a random
/// word id with 0.1, or staying itself with 0.1. [CLS] and [PAD] are never
/// maskable. Selecting zero positions flags the plan as skipped.
pub fn mvlm_plan(
    streams: &TokenStreams,
    ratio: f64,
    seed: u64,
    vocab: usize,
) -> Result<MvlmPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut maskable: Vec<usize> = (0..streams.l_t())
        .filter(|&i| streams.text_mask[i] && streams.text_ids[i] != CLS_ID)
        .collect();
    let n_mask = (ratio * maskable.len() as f64).floor() as usize;
    let mut out = streams.clone();
    if n_mask == 0 {
        return Ok(MvlmPlan {
            streams: out,
            positions: Vec::new(),
            targets: Vec::new(),
            masked_segments: Vec::new(),
            skipped: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_mask {
        let j = rng.gen_range(i..maskable.len());
        maskable.swap(i, j);
    }
    let mut positions = maskable[..n_mask].to_vec();
    positions.sort_unstable();
    let mut targets = Vec::with_capacity(n_mask);
    for &p in &positions {
        targets.push(streams.text_ids[p]);
        let r: f64 = rng.gen();
        out.text_ids[p] = if r < 0.8 {
            MASK_ID
        } else if r < 0.9 {
            rng.gen_range(FIRST_WORD_ID..vocab as u32)
        } else {
            streams.text_ids[p]
        };
    }
    let mut masked_segments: Vec<usize> =
        positions.iter().map(|&p| streams.text_seg[p] as usize).collect();
    masked_segments.sort_unstable();
    masked_segments.dedup();
    Ok(MvlmPlan { streams: out, positions, targets, masked_segments, skipped: false })
}

/// Mean cross-entropy over the masked positions, read from the full-length
/// text output.
pub fn mvlm_loss(enc: &mut Encoded, store: &ParamStore, plan: &MvlmPlan) -> Result<NodeId> {
    if plan.positions.is_empty() {
        return Err(Error::Contract("masking plan selected no positions".into()));
    }
    let text = enc.stream.text;
    let g = &mut enc.graph;
    let rows = g.gather_rows(text, Rc::new(plan.positions.clone()))?;
    let w = enc.binder.bind(g, store, "head.mvlm_w")?;
    let b = enc.binder.bind(g, store, "head.mvlm_b")?;
    let z = g.matmul(rows, w)?;
    let logits = g.add_bias_row(z, b)?;
    let targets: Vec<usize> = plan.targets.iter().map(|&t| t as usize).collect();
    g.ce_rows(logits, Rc::new(targets))
}

// ---- text–image alignment ---------------------------------------------------

/// Zeroes the synthetic features of floor(ratio · active) visual tokens,
/// chosen by partial Fisher–Yates, before the embedding projection ever sees
/// them. Returns the zeroed token indices, sorted.
pub fn tia_apply(
    streams: &mut TokenStreams,
    ratio: f64,
    seed: u64,
    d: usize,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let mut active: Vec<usize> = (0..streams.l_v()).filter(|&v| streams.visual_mask[v]).collect();
    let n = (ratio * active.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.gen_range(i..active.len());
        active.swap(i, j);
    }
    let mut zeroed = active[..n].to_vec();
    zeroed.sort_unstable();
    for &v in &zeroed {
        streams.visual_feats[v * d..(v + 1) * d].iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(zeroed)
}

/// Active visual tokens that may contribute to the alignment loss: those
/// whose segment's text was not masked by the language-model task.
pub fn tia_eligible(streams: &TokenStreams, excluded_segments: &[usize]) -> Vec<usize> {
    (0..streams.l_v())
        .filter(|&v| {
            streams.visual_mask[v]
                && !excluded_segments.contains(&(streams.visual_seg[v] as usize))
        })
        .collect()
}

/// Per-token binary "was this zeroed" prediction over the eligible visual
/// tokens, as mean binary cross-entropy.
pub fn tia_loss(
    enc: &mut Encoded,
    store: &ParamStore,
    streams: &TokenStreams,
    zeroed: &[usize],
    excluded_segments: &[usize],
) -> Result<NodeId> {
    let eligible = tia_eligible(streams, excluded_segments);
    if eligible.is_empty() {
        return Err(Error::Contract("no visual tokens eligible for alignment loss".into()));
    }
    let targets: Vec<f64> = eligible
        .iter()
        .map(|v| if zeroed.binary_search(v).is_ok() { 1.0 } else { 0.0 })
        .collect();
    let visual = enc.stream.visual;
    let g = &mut enc.graph;
    let rows = g.gather_rows(visual, Rc::new(eligible))?;
    let w = enc.binder.bind(g, store, "head.tia_w")?;
    let b = enc.binder.bind(g, store, "head.tia_b")?;
    let z0 = g.matmul(rows, w)?;
    let z = g.add_bias_row(z0, b)?;
    g.bce_logits(z, Rc::new(targets))
}

// ---- combined pre-training step ---------------------------------------------

/// Loss nodes of one pre-training step. `total` is the unweighted sum of the
/// parts that apply to this document; a part is None when its labels are
/// empty (nothing maskable, a single segment, every segment text-masked).
pub struct PretrainParts {
    pub total: NodeId,
    pub mvlm: Option<NodeId>,
    pub gtr: NodeId,
    pub sop: Option<NodeId>,
    pub tia: Option<NodeId>,
    pub plan: MvlmPlan,
    pub zeroed_visual: Vec<usize>,
}

// Seed tags keep the three samplers decorrelated while still driven by the
// one per-step seed.
pub const TIA_SEED_TAG: u64 = 0x7469_61;
pub const SOP_SEED_TAG: u64 = 0x736f_70;

/// Builds the masked input (text masking, then visual zeroing), runs one
/// forward pass over it, and attaches all four objectives.
pub fn pretrain_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    streams: &TokenStreams,
    seed: u64,
    opts: &EncodeOptions,
) -> Result<(Encoded, PretrainParts)> {
    let plan = mvlm_plan(streams, MVLM_RATIO, seed, cfg.vocab)?;
    let mut working = plan.streams.clone();
    let zeroed = tia_apply(&mut working, TIA_RATIO, seed ^ TIA_SEED_TAG, cfg.d)?;
    let mut enc = encode(store, cfg, &working, opts)?;

    let gtr = gtr_loss(&mut enc, store, &working)?;
    let mut total = gtr;
    let mvlm = if plan.skipped {
        None
    } else {
        let l = mvlm_loss(&mut enc, store, &plan)?;
        total = enc.graph.add(total, l)?;
        Some(l)
    };
    let sop = if working.n_segments < 2 {
        None
    } else {
        let zf = entity_features(&mut enc, &working)?;
        let l = sop_loss(&mut enc, store, zf, &working, seed ^ SOP_SEED_TAG)?;
        total = enc.graph.add(total, l)?;
        Some(l)
    };
    let tia = if tia_eligible(&working, &plan.masked_segments).is_empty() {
        None
    } else {
        let l = tia_loss(&mut enc, store, &working, &zeroed, &plan.masked_segments)?;
        total = enc.graph.add(total, l)?;
        Some(l)
    };
    Ok((enc, PretrainParts { total, mvlm, gtr, sop, tia, plan, zeroed_visual: zeroed }))
}
