//! Input embeddings: token/position/layout/segment tables for the text
//! stream, and the projection of synthetic segment features (plus layout and
//! segment tables) for the visual stream. Visual tokens carry no positional
//! embedding; their identity comes from layout and segment index.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binder, ParamStore};
use crate::streams::TokenStreams;
use crate::tensor::Tensor;

/// Both embedded streams plus the bookkeeping that travels with them through
/// the encoder: per-token segment ids and padding masks.
#[derive(Clone)]
pub struct DualStream {
    pub text: NodeId,
    pub visual: NodeId,
    pub text_seg: Vec<i32>,
    pub vis_seg: Vec<i32>,
    pub text_mask: Rc<Vec<bool>>,
    pub vis_mask: Rc<Vec<bool>>,
}

const LAYOUT_TABLES: [&str; 4] = [
    "embed.layout_x0",
    "embed.layout_y0",
    "embed.layout_x1",
    "embed.layout_y1",
];

fn add_layout(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    x: NodeId,
    buckets: &[[usize; 4]],
) -> Result<NodeId> {
    let mut out = x;
    for (c, name) in LAYOUT_TABLES.iter().enumerate() {
        let table = binder.bind(g, store, name)?;
        let idx: Vec<usize> = buckets.iter().map(|b| b[c]).collect();
        let rows = g.gather_rows(table, Rc::new(idx))?;
        out = g.add(out, rows)?;
    }
    Ok(out)
}

/// Segment-table rows for a stream; index 0 is the "no segment" row used by
/// [CLS] and [PAD] (stored segment id −1).
pub fn seg_rows(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    table: &str,
    seg: &[i32],
) -> Result<NodeId> {
    let t = binder.bind(g, store, table)?;
    let idx: Vec<usize> = seg.iter().map(|&s| (s + 1) as usize).collect();
    g.gather_rows(t, Rc::new(idx))
}

pub fn embed(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    s: &TokenStreams,
    cfg: &ModelConfig,
) -> Result<DualStream> {
    if s.l_t() != cfg.l_t || s.l_v() != cfg.l_v {
        return Err(Error::Contract(format!(
            "stream lengths ({}, {}) do not match config ({}, {})",
            s.l_t(),
            s.l_v(),
            cfg.l_t,
            cfg.l_v
        )));
    }
    if s.visual_feats.len() != cfg.l_v * cfg.d {
        return Err(Error::Contract(format!(
            "visual features hold {} values, config needs {}",
            s.visual_feats.len(),
            cfg.l_v * cfg.d
        )));
    }

    let word_table = binder.bind(g, store, "embed.word")?;
    let ids: Vec<usize> = s.text_ids.iter().map(|&i| i as usize).collect();
    let mut text = g.gather_rows(word_table, Rc::new(ids))?;
    // the position table is exactly [l_t, d], so positions 0..l_t are the
    // whole table in order
    let pos_table = binder.bind(g, store, "embed.pos")?;
    text = g.add(text, pos_table)?;
    text = add_layout(g, binder, store, text, &s.text_buckets)?;
    let text_segs = seg_rows(g, binder, store, "embed.seg", &s.text_seg)?;
    text = g.add(text, text_segs)?;

    let feats = g.constant(Tensor::from_vec(&[cfg.l_v, cfg.d], s.visual_feats.clone()));
    let vis_w = binder.bind(g, store, "embed.vis_w")?;
    let vis_b = binder.bind(g, store, "embed.vis_b")?;
    let mut visual = g.matmul(feats, vis_w)?;
    visual = g.add_bias_row(visual, vis_b)?;
    visual = add_layout(g, binder, store, visual, &s.visual_buckets)?;
    let vis_segs = seg_rows(g, binder, store, "embed.seg", &s.visual_seg)?;
    visual = g.add(visual, vis_segs)?;

    Ok(DualStream {
        text,
        visual,
        text_seg: s.text_seg.clone(),
        vis_seg: s.visual_seg.clone(),
        text_mask: Rc::new(s.text_mask.clone()),
        vis_mask: Rc::new(s.visual_mask.clone()),
    })
}
