//! The hourglass encoder: merging blocks shorten both streams by a factor of
//! k under cross-modal guidance, extension blocks restore the length with
//! repeat up-sampling plus a skip connection back to the matching merge
//! stage. Stages pair LIFO — the innermost merge feeds the first extension.

use std::rc::Rc;

use crate::attention::{sa_layer, sca_layer};
use crate::config::ModelConfig;
use crate::embed::{embed, DualStream};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binder, ParamStore};
use crate::streams::TokenStreams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Values, attention weights, and backward.
    Train,
    /// Values only; attention weights are streamed and dropped.
    Inference,
    /// Shapes and MAC counts only.
    DryRun,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeOptions {
    pub mode: RunMode,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { mode: RunMode::Train }
    }
}

/// What a merge stage leaves behind for its paired extension stage: the
/// pre-merge nodes (the skip payload), the guidance weights that built each
/// merged token, and the masks/segment ids to restore. The group map is
/// implicit: token i belongs to merged token floor(i / k).
pub struct MergeTrace {
    pub k: usize,
    pub text_pre: NodeId,
    pub vis_pre: NodeId,
    pub text_len_pre: usize,
    pub vis_len_pre: usize,
    /// Normalized per-token weights, empty in dry-run mode.
    pub weights_text: Vec<f64>,
    pub weights_visual: Vec<f64>,
    pub text_seg_pre: Vec<i32>,
    pub vis_seg_pre: Vec<i32>,
    pub text_mask_pre: Rc<Vec<bool>>,
    pub vis_mask_pre: Rc<Vec<bool>>,
}

/// A finished forward pass. The graph is kept so heads can append losses and
/// callers can read values, gradients, MAC totals, and recorded attention.
pub struct Encoded {
    pub graph: Graph,
    pub binder: Binder,
    pub stream: DualStream,
    pub traces: Vec<MergeTrace>,
    /// (layer label, attention node) in forward order, e.g. `m0.sa`,
    /// `m0.sca.tv`, `m0.sca.vt`, … Weights are retained in Train mode only.
    pub attn: Vec<(String, NodeId)>,
}

#[derive(Clone, Copy)]
pub enum GuideDir {
    /// Weights for merging the text stream, predicted from visual features.
    VisualToText,
    /// Weights for merging the visual stream, predicted from text features.
    TextToVisual,
}

/// Per-token merge weights for one stream, predicted from the OTHER
/// modality's current features: each target token takes its aligned source
/// feature through a shared scalar linear, and the raw scores are normalized
/// by softmax within every group of k consecutive tokens. Returns
/// `[target_len, 1]`.
///
/// Alignment: text token j reads visual token floor(j·L_v/L_t); visual token
/// v reads the mean of its L_t/L_v aligned text tokens.
///
/// A geometric consequence worth knowing: when L_t/L_v is a multiple of k,
/// all k members of a text merge group align to the same visual token, their
/// logits tie, and the group softmax is exactly uniform — text merging then
/// degenerates to a plain mean and the v2l linear sees zero gradient. The
/// visual direction never degenerates this way because each visual token
/// pools a different text window.
pub fn guidance_weights(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    source: NodeId,
    target_len: usize,
    k: usize,
    dir: GuideDir,
) -> Result<NodeId> {
    if k == 0 || target_len % k != 0 {
        return Err(Error::Contract(format!(
            "guidance: target length {target_len} not divisible by k = {k}"
        )));
    }
    let src_len = g.shape(source)[0];
    let aligned = match dir {
        GuideDir::VisualToText => {
            let idx = text_alignment_indices(target_len, src_len);
            g.gather_rows(source, Rc::new(idx))?
        }
        GuideDir::TextToVisual => {
            if src_len % target_len != 0 {
                return Err(Error::Contract(format!(
                    "guidance: text length {src_len} is not a multiple of visual length {target_len}"
                )));
            }
            g.pool_rows_mean(source, src_len / target_len)?
        }
    };
    let (w_name, b_name) = match dir {
        GuideDir::VisualToText => ("guide.v2l_w", "guide.v2l_b"),
        GuideDir::TextToVisual => ("guide.l2v_w", "guide.l2v_b"),
    };
    let w = binder.bind(g, store, w_name)?;
    let b = binder.bind(g, store, b_name)?;
    let mut logits = g.matmul(aligned, w)?;
    logits = g.add_bias_row(logits, b)?;
    let grouped = g.reshape(logits, &[target_len / k, k])?;
    let sm = g.softmax_rows(grouped, None)?;
    g.reshape(sm, &[target_len, 1])
}

fn text_alignment_indices(l_t: usize, l_v: usize) -> Vec<usize> {
    (0..l_t).map(|j| j * l_v / l_t).collect()
}

fn merged_mask(mask: &[bool], k: usize) -> Rc<Vec<bool>> {
    Rc::new(mask.chunks(k).map(|group| group.iter().any(|&m| m)).collect())
}

/// Merged segment id = segment id of the group's highest-weight member
/// (earliest on ties). Dry-run graphs carry no weight values, so the first
/// member stands in; segment ids never affect MAC counts.
fn merged_seg_ids(seg: &[i32], weights: &[f64], k: usize, dry: bool) -> Vec<i32> {
    seg.chunks(k)
        .enumerate()
        .map(|(gi, group)| {
            if dry || k == 1 {
                return group[0];
            }
            let w = &weights[gi * k..(gi + 1) * k];
            let mut best = 0;
            for (i, &wi) in w.iter().enumerate() {
                if wi > w[best] {
                    best = i;
                }
            }
            group[best]
        })
        .collect()
}

/// Shorten both streams by k: guidance weights from the current snapshot,
/// then weighted pooling of each k-group. k = 1 is a pure pass-through — no
/// guidance is computed and node values are reused bit-for-bit.
pub fn merge_streams(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    state: &DualStream,
    k: usize,
) -> Result<(DualStream, MergeTrace)> {
    if k == 0 {
        return Err(Error::Contract("merge factor k must be positive".into()));
    }
    let lt = g.shape(state.text)[0];
    let lv = g.shape(state.visual)[0];
    let dry = g.is_dry_run();
    let trace_weights = |len: usize| if dry { Vec::new() } else { vec![1.0; len] };
    if k == 1 {
        let trace = MergeTrace {
            k,
            text_pre: state.text,
            vis_pre: state.visual,
            text_len_pre: lt,
            vis_len_pre: lv,
            weights_text: trace_weights(lt),
            weights_visual: trace_weights(lv),
            text_seg_pre: state.text_seg.clone(),
            vis_seg_pre: state.vis_seg.clone(),
            text_mask_pre: state.text_mask.clone(),
            vis_mask_pre: state.vis_mask.clone(),
        };
        return Ok((state.clone(), trace));
    }
    if lt % k != 0 || lv % k != 0 {
        return Err(Error::Contract(format!(
            "stream lengths ({lt}, {lv}) are not divisible by merge factor {k}"
        )));
    }

    let w_t = guidance_weights(g, binder, store, state.visual, lt, k, GuideDir::VisualToText)?;
    let w_v = guidance_weights(g, binder, store, state.text, lv, k, GuideDir::TextToVisual)?;
    let merged_text = g.merge_rows(state.text, w_t, k)?;
    let merged_vis = g.merge_rows(state.visual, w_v, k)?;

    let weights_text = if dry { Vec::new() } else { g.value(w_t).data.clone() };
    let weights_visual = if dry { Vec::new() } else { g.value(w_v).data.clone() };
    let merged = DualStream {
        text: merged_text,
        visual: merged_vis,
        text_seg: merged_seg_ids(&state.text_seg, &weights_text, k, dry),
        vis_seg: merged_seg_ids(&state.vis_seg, &weights_visual, k, dry),
        text_mask: merged_mask(&state.text_mask, k),
        vis_mask: merged_mask(&state.vis_mask, k),
    };
    let trace = MergeTrace {
        k,
        text_pre: state.text,
        vis_pre: state.visual,
        text_len_pre: lt,
        vis_len_pre: lv,
        weights_text,
        weights_visual,
        text_seg_pre: state.text_seg.clone(),
        vis_seg_pre: state.vis_seg.clone(),
        text_mask_pre: state.text_mask.clone(),
        vis_mask_pre: state.vis_mask.clone(),
    };
    Ok((merged, trace))
}

/// Restore a stream pair to its pre-merge length: duplicate every token k
/// times, add the recorded pre-merge snapshot (the skip connection), and
/// bring back the saved masks and segment ids.
pub fn extend_streams(g: &mut Graph, state: &DualStream, trace: &MergeTrace) -> Result<DualStream> {
    let lt = g.shape(state.text)[0];
    let lv = g.shape(state.visual)[0];
    if lt * trace.k != trace.text_len_pre || lv * trace.k != trace.vis_len_pre {
        return Err(Error::Contract(format!(
            "extension length mismatch: ({lt}, {lv}) × k = {} against recorded ({}, {})",
            trace.k, trace.text_len_pre, trace.vis_len_pre
        )));
    }
    let up_t = g.repeat_rows(state.text, trace.k)?;
    let text = g.add(up_t, trace.text_pre)?;
    let up_v = g.repeat_rows(state.visual, trace.k)?;
    let visual = g.add(up_v, trace.vis_pre)?;
    Ok(DualStream {
        text,
        visual,
        text_seg: trace.text_seg_pre.clone(),
        vis_seg: trace.vis_seg_pre.clone(),
        text_mask: trace.text_mask_pre.clone(),
        vis_mask: trace.vis_mask_pre.clone(),
    })
}

/// One SA layer followed by one SCA layer, in place.
fn block_layers(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    state: &mut DualStream,
    heads: usize,
    attn: &mut Vec<(String, NodeId)>,
) -> Result<()> {
    let (text, a_sa) = sa_layer(g, binder, store, prefix, state.text, &state.text_mask, heads)?;
    state.text = text;
    attn.push((format!("{prefix}.sa"), a_sa));
    let out = sca_layer(
        g,
        binder,
        store,
        prefix,
        state.text,
        state.visual,
        &state.text_seg,
        &state.vis_seg,
        &state.text_mask,
        &state.vis_mask,
        heads,
    )?;
    state.text = out.text;
    state.visual = out.visual;
    attn.push((format!("{prefix}.sca.tv"), out.attn_tv));
    attn.push((format!("{prefix}.sca.vt"), out.attn_vt));
    Ok(())
}

/// Merging block: shorten at entry, then run this block's SA and SCA layers
/// on the shortened streams.
pub fn merge_block(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    state: &DualStream,
    k: usize,
    heads: usize,
    attn: &mut Vec<(String, NodeId)>,
) -> Result<(DualStream, MergeTrace)> {
    let (mut merged, trace) = merge_streams(g, binder, store, state, k)?;
    block_layers(g, binder, store, prefix, &mut merged, heads, attn)?;
    Ok((merged, trace))
}

/// Extension block: restore length at entry (up-sample + skip), then run this
/// block's SA and SCA layers at the restored length.
pub fn extension_block(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    state: &DualStream,
    trace: &MergeTrace,
    heads: usize,
    attn: &mut Vec<(String, NodeId)>,
) -> Result<DualStream> {
    let mut extended = extend_streams(g, state, trace)?;
    block_layers(g, binder, store, prefix, &mut extended, heads, attn)?;
    Ok(extended)
}

fn new_graph(mode: RunMode) -> Graph {
    match mode {
        RunMode::Train => Graph::new(),
        RunMode::Inference => Graph::inference(),
        RunMode::DryRun => Graph::dry_run(),
    }
}

fn check_encodable(streams: &TokenStreams) -> Result<()> {
    if !streams.visual_mask.iter().any(|&m| m) {
        return Err(Error::Contract(
            "document has no segments; the dual-stream encoder needs at least one visual token"
                .into(),
        ));
    }
    Ok(())
}

/// Full hourglass forward pass: embed, n_stages merging blocks, n_stages
/// extension blocks. Output streams are back at the embedded lengths.
pub fn encode(
    store: &ParamStore,
    cfg: &ModelConfig,
    streams: &TokenStreams,
    opts: &EncodeOptions,
) -> Result<Encoded> {
    cfg.validate()?;
    check_encodable(streams)?;
    let mut g = new_graph(opts.mode);
    let mut binder = Binder::new();
    g.set_scope("embed");
    let mut state = embed(&mut g, &mut binder, store, streams, cfg)?;

    let mut traces = Vec::with_capacity(cfg.n_stages);
    let mut attn = Vec::new();
    for i in 0..cfg.n_stages {
        let prefix = format!("m{i}");
        g.set_scope(&prefix);
        let (next, trace) =
            merge_block(&mut g, &mut binder, store, &prefix, &state, cfg.k, cfg.heads, &mut attn)?;
        state = next;
        traces.push(trace);
    }
    for i in 0..cfg.n_stages {
        let prefix = format!("e{i}");
        g.set_scope(&prefix);
        let trace = &traces[cfg.n_stages - 1 - i];
        state =
            extension_block(&mut g, &mut binder, store, &prefix, &state, trace, cfg.heads, &mut attn)?;
    }
    debug_assert_eq!(g.shape(state.text), &[cfg.l_t, cfg.d]);
    debug_assert_eq!(g.shape(state.visual), &[cfg.l_v, cfg.d]);
    Ok(Encoded { graph: g, binder, stream: state, traces, attn })
}

/// The matched full-length baseline: the identical alternating SA/SCA block
/// stack with merging and extension removed — every layer runs at the
/// embedded lengths. Shares parameter names (and so parameters) with the
/// hourglass model.
pub fn encode_vanilla_dual(
    store: &ParamStore,
    cfg: &ModelConfig,
    streams: &TokenStreams,
    opts: &EncodeOptions,
) -> Result<Encoded> {
    cfg.validate()?;
    check_encodable(streams)?;
    let mut g = new_graph(opts.mode);
    let mut binder = Binder::new();
    g.set_scope("embed");
    let mut state = embed(&mut g, &mut binder, store, streams, cfg)?;
    let mut attn = Vec::new();
    for i in 0..2 * cfg.n_stages {
        let prefix =
            if i < cfg.n_stages { format!("m{i}") } else { format!("e{}", i - cfg.n_stages) };
        g.set_scope(&prefix);
        block_layers(&mut g, &mut binder, store, &prefix, &mut state, cfg.heads, &mut attn)?;
    }
    Ok(Encoded { graph: g, binder, stream: state, traces: Vec::new(), attn })
}

/// A plain single-stream self-attention stack with `cfg.layers()` layers at
/// length `l_t` — the shape the closed-form MAC formula describes. Block
/// parameters are cycled twice to reach the layer count; values are
/// irrelevant to its purpose (MAC cross-checks and smoke timing).
pub fn encode_plain_sa_stack(
    store: &ParamStore,
    cfg: &ModelConfig,
    l_t: usize,
    mode: RunMode,
) -> Result<(Graph, NodeId)> {
    let mut g = new_graph(mode);
    let mut binder = Binder::new();
    let mut x = g.leaf(Tensor::zeros(&[l_t, cfg.d]));
    let mask = Rc::new(vec![true; l_t]);
    for pass in 0..2 {
        for i in 0..2 * cfg.n_stages {
            let prefix =
                if i < cfg.n_stages { format!("m{i}") } else { format!("e{}", i - cfg.n_stages) };
            g.set_scope(&format!("{prefix}.pass{pass}"));
            let (next, _) = sa_layer(&mut g, &mut binder, store, &prefix, x, &mask, cfg.heads)?;
            x = next;
        }
    }
    Ok((g, x))
}
