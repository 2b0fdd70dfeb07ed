//! Token streams: reading-order tokenization, padding, coordinate
//! quantization, and the synthetic per-segment visual features that stand in
//! for a real image backbone.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::doc::DocumentSample;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Both padded modality streams of one document, plus everything the heads
/// need to find their way back to segments: spans, labels, links, boxes.
/// All segment indexing is in reading order.
#[derive(Clone, Debug)]
pub struct TokenStreams {
    pub text_ids: Vec<u32>,
    pub text_boxes: Vec<[f64; 4]>,
    /// Segment index per text token; −1 for [CLS] and [PAD].
    pub text_seg: Vec<i32>,
    pub text_mask: Vec<bool>,
    /// Quantized [x0, y0, x1, y1] buckets per text token.
    pub text_buckets: Vec<[usize; 4]>,
    /// Segment index per visual token; −1 for [PAD].
    pub visual_seg: Vec<i32>,
    pub visual_boxes: Vec<[f64; 4]>,
    pub visual_mask: Vec<bool>,
    pub visual_buckets: Vec<[usize; 4]>,
    /// Synthetic segment features, row-major `[l_v, d]`; zero rows for [PAD].
    pub visual_feats: Vec<f64>,
    /// Text-token span `[start, end)` of each segment (excludes [CLS]/[PAD]).
    pub seg_spans: Vec<(usize, usize)>,
    /// Entity labels in reading order (None when the corpus omits them).
    pub labels: Vec<Option<u8>>,
    /// Links re-indexed to reading order.
    pub links: Vec<[usize; 2]>,
    pub n_segments: usize,
    pub n_words: usize,
    pub page_w: f64,
    pub page_h: f64,
    /// Coordinates outside the page clamped during quantization.
    pub clamp_warnings: usize,
}

impl TokenStreams {
    pub fn l_t(&self) -> usize {
        self.text_ids.len()
    }

    pub fn l_v(&self) -> usize {
        self.visual_seg.len()
    }
}

/// Quantize one coordinate into `buckets` bins over `[0, page_dim]`,
/// clamping out-of-page values. Returns (bucket, clamped?).
fn quantize(coord: f64, page_dim: f64, buckets: usize) -> (usize, bool) {
    let clamped = !(0.0..=page_dim).contains(&coord) || !coord.is_finite();
    let x = if coord.is_finite() { coord.clamp(0.0, page_dim) } else { 0.0 };
    let b = ((x / page_dim) * buckets as f64) as usize;
    (b.min(buckets - 1), clamped)
}

fn bucket_box(b: &[f64; 4], w: f64, h: f64, buckets: usize, warnings: &mut usize) -> [usize; 4] {
    let dims = [w, h, w, h];
    let mut out = [0usize; 4];
    for i in 0..4 {
        let (bucket, clamped) = quantize(b[i], dims[i], buckets);
        out[i] = bucket;
        *warnings += clamped as usize;
    }
    out
}

/// Deterministic stand-in for an image backbone: a pseudo-random unit-scale
/// vector keyed by the segment's word ids and box.
fn synthetic_segment_feature(words: &[u32], bbox: &[f64; 4], d: usize, out: &mut [f64]) {
    let mut key: u64 = 0xcbf2_9ce4_8422_2325;
    for &w in words {
        key = (key ^ w as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &c in bbox {
        key = (key ^ c.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    for v in out[..d].iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

/// Lay out one document as fixed-length streams: [CLS] first, then the words
/// of every segment in reading order, then [PAD] to `l_t`; one visual token
/// per segment, [PAD] to `l_v`.
pub fn tokenize_and_pad(doc: &DocumentSample, cfg: &ModelConfig) -> Result<TokenStreams> {
    let n_words: usize = doc.segments.iter().map(|s| s.end - s.start).sum();
    if n_words + 1 > cfg.l_t {
        return Err(Error::Contract(format!(
            "text stream overflow: {} words + [CLS] exceed l_t = {}",
            n_words, cfg.l_t
        )));
    }
    if doc.segments.len() > cfg.l_v {
        return Err(Error::Contract(format!(
            "visual stream overflow: {} segments exceed l_v = {}",
            doc.segments.len(),
            cfg.l_v
        )));
    }
    for s in &doc.segments {
        if s.start > s.end || s.end > doc.words.len() {
            return Err(Error::Corpus("segment span out of range".into()));
        }
    }

    // reading order: top-to-bottom, left-to-right by segment box origin
    let mut order: Vec<usize> = (0..doc.segments.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&doc.segments[a].bbox, &doc.segments[b].bbox);
        (sa[1], sa[0], a).partial_cmp(&(sb[1], sb[0], b)).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank_of = vec![0usize; doc.segments.len()];
    for (rank, &orig) in order.iter().enumerate() {
        rank_of[orig] = rank;
    }

    let mut warnings = 0usize;
    let mut text_ids = vec![PAD_ID; cfg.l_t];
    let mut text_boxes = vec![[0.0; 4]; cfg.l_t];
    let mut text_seg = vec![-1i32; cfg.l_t];
    let mut text_mask = vec![false; cfg.l_t];
    text_ids[0] = CLS_ID;
    text_boxes[0] = [0.0, 0.0, doc.page_w, doc.page_h];
    text_mask[0] = true;

    let mut pos = 1usize;
    let mut seg_spans = Vec::with_capacity(doc.segments.len());
    let mut labels = Vec::with_capacity(doc.segments.len());
    let mut visual_seg = vec![-1i32; cfg.l_v];
    let mut visual_boxes = vec![[0.0; 4]; cfg.l_v];
    let mut visual_mask = vec![false; cfg.l_v];
    let mut visual_feats = vec![0.0; cfg.l_v * cfg.d];

    for (rank, &orig) in order.iter().enumerate() {
        let seg = &doc.segments[orig];
        let span_start = pos;
        for w in &doc.words[seg.start..seg.end] {
            if w.id as usize >= cfg.vocab {
                return Err(Error::Corpus(format!(
                    "word id {} out of range for vocab {}",
                    w.id, cfg.vocab
                )));
            }
            text_ids[pos] = w.id;
            text_boxes[pos] = w.bbox;
            text_seg[pos] = rank as i32;
            text_mask[pos] = true;
            pos += 1;
        }
        seg_spans.push((span_start, pos));
        labels.push(seg.label);
        visual_seg[rank] = rank as i32;
        visual_boxes[rank] = seg.bbox;
        visual_mask[rank] = true;
        let ids: Vec<u32> = doc.words[seg.start..seg.end].iter().map(|w| w.id).collect();
        synthetic_segment_feature(
            &ids,
            &seg.bbox,
            cfg.d,
            &mut visual_feats[rank * cfg.d..(rank + 1) * cfg.d],
        );
    }

    let text_buckets = text_boxes
        .iter()
        .map(|b| bucket_box(b, doc.page_w, doc.page_h, cfg.coord_buckets, &mut warnings))
        .collect();
    let visual_buckets = visual_boxes
        .iter()
        .map(|b| bucket_box(b, doc.page_w, doc.page_h, cfg.coord_buckets, &mut warnings))
        .collect();

    Ok(TokenStreams {
        text_ids,
        text_boxes,
        text_seg,
        text_mask,
        text_buckets,
        visual_seg,
        visual_boxes,
        visual_mask,
        visual_buckets,
        visual_feats,
        seg_spans,
        labels,
        links: doc.links.iter().map(|l| [rank_of[l[0]], rank_of[l[1]]]).collect(),
        n_segments: doc.segments.len(),
        n_words,
        page_w: doc.page_w,
        page_h: doc.page_h,
        clamp_warnings: warnings,
    })
}
