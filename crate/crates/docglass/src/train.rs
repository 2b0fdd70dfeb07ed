//! Gradient-descent training over a document corpus, with entity-level
//! evaluation for the fine-tuning tasks.
//!
//! One step = one minibatch: each document builds its own graph, gradients
//! accumulate in the store scaled by 1/batch, then a single momentum update.
//! Per-document mask and negative-sampling seeds depend on the run seed and
//! the document index only — never the epoch — so a frozen model (lr = 0)
//! sees bit-identical losses every epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::doc::{DocumentSample, N_LABELS};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::heads::{
    entity_features, labeling_loss, labeling_logits, labeling_predictions,
    linking_examples, linking_logits, linking_loss, pretrain_forward, PretrainParts,
};
use crate::hourglass::{encode, EncodeOptions, Encoded, RunMode};
use crate::params::ParamStore;
use crate::streams::{tokenize_and_pad, TokenStreams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Labeling,
    Linking,
    Pretrain,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeling" => Ok(Task::Labeling),
            "linking" => Ok(Task::Linking),
            "pretrain" => Ok(Task::Pretrain),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected labeling, linking, or pretrain"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Labeling => "labeling",
            Task::Linking => "linking",
            Task::Pretrain => "pretrain",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after the first epoch whose primary metric (labeling F1 or
    /// linking accuracy) reaches this value; ignored for pretraining.
    pub stop_at: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            lr: 0.003,
            momentum: 0.9,
            batch_size: 8,
            seed: 42,
            stop_at: None,
        }
    }
}

/// One epoch of the metrics history; only the fields of the trained task are
/// set, so a serialized log line carries no dead columns.
#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mvlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gtr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tia: Option<f64>,
}

impl EpochMetrics {
    fn new(epoch: usize, loss: f64) -> Self {
        EpochMetrics {
            epoch,
            loss,
            f1: None,
            entity_accuracy: None,
            pair_accuracy: None,
            auc: None,
            mvlm: None,
            gtr: None,
            sop: None,
            tia: None,
        }
    }
}

pub fn tokenize_corpus(
    corpus: &[DocumentSample],
    cfg: &ModelConfig,
) -> Result<Vec<TokenStreams>> {
    corpus.iter().map(|d| tokenize_and_pad(d, cfg)).collect()
}

/// Per-document seed for mask building and negative sampling — a function of
/// the run seed and document index only, never the epoch. Same key fold the
/// feature hash uses; only distinctness matters, the ChaCha stream behind it
/// does the diffusion.
pub fn doc_seed(seed: u64, doc: usize) -> u64 {
    (seed ^ (doc as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3)
}

/// A document can only contribute to a task that has targets in it.
fn usable(task: Task, s: &TokenStreams) -> bool {
    match task {
        Task::Labeling => s.labels.iter().any(Option::is_some),
        Task::Linking => !s.links.is_empty(),
        Task::Pretrain => true,
    }
}

fn task_forward(
    task: Task,
    store: &ParamStore,
    cfg: &ModelConfig,
    s: &TokenStreams,
    seed: u64,
) -> Result<(Encoded, NodeId, Option<PretrainParts>)> {
    let run = EncodeOptions { mode: RunMode::Train };
    match task {
        Task::Labeling => {
            let mut enc = encode(store, cfg, s, &run)?;
            let zf = entity_features(&mut enc, s)?;
            let loss = labeling_loss(&mut enc, store, zf, s)?;
            Ok((enc, loss, None))
        }
        Task::Linking => {
            let mut enc = encode(store, cfg, s, &run)?;
            let zf = entity_features(&mut enc, s)?;
            let (loss, _, _) = linking_loss(&mut enc, store, zf, s, seed)?;
            Ok((enc, loss, None))
        }
        Task::Pretrain => {
            let (enc, parts) = pretrain_forward(store, cfg, s, seed, &run)?;
            let total = parts.total;
            Ok((enc, total, Some(parts)))
        }
    }
}

#[derive(Default)]
struct PartMeans {
    sums: [f64; 4],
    counts: [usize; 4],
}

impl PartMeans {
    fn add(&mut self, enc: &Encoded, parts: &PretrainParts) {
        let slots = [parts.mvlm, Some(parts.gtr), parts.sop, parts.tia];
        for (i, slot) in slots.iter().enumerate() {
            if let Some(node) = slot {
                self.sums[i] += enc.graph.value(*node).data[0];
                self.counts[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// Trains in place and returns the per-epoch metrics history.
pub fn train_loop(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    corpus: &[DocumentSample],
    task: Task,
    opts: &TrainOptions,
) -> Result<Vec<EpochMetrics>> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot train on an empty corpus".into()));
    }
    if !opts.lr.is_finite() || opts.lr < 0.0 {
        return Err(Error::Contract(format!(
            "learning rate {} must be finite and non-negative",
            opts.lr
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let streams = tokenize_corpus(corpus, cfg)?;
    if !streams.iter().any(|s| usable(task, s)) {
        return Err(Error::Contract(format!(
            "no document in the corpus has targets for the {task} task"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..streams.len()).collect();
        order.shuffle(&mut rng);

        // per-doc losses keyed by document so the epoch mean is summed in a
        // fixed order, independent of the shuffle
        let mut doc_losses: Vec<(usize, f64)> = Vec::new();
        let mut parts_mean = PartMeans::default();
        for batch in order.chunks(opts.batch_size) {
            let contributing: Vec<usize> =
                batch.iter().copied().filter(|&i| usable(task, &streams[i])).collect();
            if contributing.is_empty() {
                continue;
            }
            store.zero_grads();
            let inv = 1.0 / contributing.len() as f64;
            for &i in &contributing {
                let (mut enc, loss, parts) =
                    task_forward(task, store, cfg, &streams[i], doc_seed(opts.seed, i))?;
                let val = enc.graph.value(loss).data[0];
                if !val.is_finite() {
                    return Err(Error::Diverged { epoch, last_finite_loss: last_finite });
                }
                last_finite = val;
                doc_losses.push((i, val));
                if let Some(p) = &parts {
                    parts_mean.add(&enc, p);
                }
                let scaled = enc.graph.scale(loss, inv);
                enc.graph.backward(scaled)?;
                enc.binder.store_grads(&enc.graph, store);
            }
            store.sgd_step(opts.lr, opts.momentum);
        }

        doc_losses.sort_by_key(|&(i, _)| i);
        let loss_sum: f64 = doc_losses.iter().map(|&(_, v)| v).sum();
        let mut metrics = EpochMetrics::new(epoch, loss_sum / doc_losses.len() as f64);
        match task {
            Task::Labeling => {
                let e = eval_labeling(store, cfg, &streams)?;
                metrics.f1 = Some(e.f1);
                metrics.entity_accuracy = Some(e.accuracy);
            }
            Task::Linking => {
                let e = eval_linking(store, cfg, &streams, opts.seed)?;
                metrics.pair_accuracy = Some(e.pair_accuracy);
                metrics.auc = Some(e.auc);
            }
            Task::Pretrain => {
                metrics.mvlm = parts_mean.mean(0);
                metrics.gtr = parts_mean.mean(1);
                metrics.sop = parts_mean.mean(2);
                metrics.tia = parts_mean.mean(3);
            }
        }
        let primary = match task {
            Task::Labeling => metrics.f1,
            Task::Linking => metrics.pair_accuracy,
            Task::Pretrain => None,
        };
        history.push(metrics);
        if let (Some(target), Some(value)) = (opts.stop_at, primary) {
            if value >= target {
                break;
            }
        }
    }
    Ok(history)
}

// ---- evaluation -------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LabelingEval {
    /// Micro-averaged F1 over labeled entities. Every entity gets exactly one
    /// prediction, so this coincides with accuracy; both are reported because
    /// they diverge the moment predictions can abstain.
    pub f1: f64,
    pub accuracy: f64,
    pub n_entities: usize,
}

pub fn eval_labeling(
    store: &ParamStore,
    cfg: &ModelConfig,
    streams: &[TokenStreams],
) -> Result<LabelingEval> {
    let run = EncodeOptions { mode: RunMode::Inference };
    let mut tp = [0usize; N_LABELS];
    let mut fp = [0usize; N_LABELS];
    let mut fneg = [0usize; N_LABELS];
    let mut total = 0usize;
    for s in streams {
        if !usable(Task::Labeling, s) {
            continue;
        }
        let mut enc = encode(store, cfg, s, &run)?;
        let zf = entity_features(&mut enc, s)?;
        let logits = labeling_logits(&mut enc, store, zf)?;
        let preds = labeling_predictions(&enc.graph, logits);
        for (seg, label) in s.labels.iter().enumerate() {
            let Some(gold) = *label else { continue };
            total += 1;
            let pred = preds[seg];
            if pred == gold {
                tp[gold as usize] += 1;
            } else {
                fp[pred as usize] += 1;
                fneg[gold as usize] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("no labeled segments to evaluate".into()));
    }
    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum();
    let fn_sum: usize = fneg.iter().sum();
    let f1 = 2.0 * tp_sum as f64 / (2 * tp_sum + fp_sum + fn_sum).max(1) as f64;
    Ok(LabelingEval { f1, accuracy: tp_sum as f64 / total as f64, n_entities: total })
}

#[derive(Clone, Copy, Debug)]
pub struct LinkingEval {
    /// Fraction of pairs decided correctly at 0.5 on the sigmoid score,
    /// i.e. logit ≥ 0 means linked.
    pub pair_accuracy: f64,
    pub auc: f64,
    pub n_pairs: usize,
}

pub fn eval_linking(
    store: &ParamStore,
    cfg: &ModelConfig,
    streams: &[TokenStreams],
    seed: u64,
) -> Result<LinkingEval> {
    let run = EncodeOptions { mode: RunMode::Inference };
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in streams.iter().enumerate() {
        if !usable(Task::Linking, s) {
            continue;
        }
        let mut enc = encode(store, cfg, s, &run)?;
        let zf = entity_features(&mut enc, s)?;
        let (pairs, t) = linking_examples(s, doc_seed(seed, i));
        let logits = linking_logits(&mut enc, store, zf, &pairs)?;
        scores.extend_from_slice(&enc.graph.value(logits).data);
        targets.extend(t);
    }
    if scores.is_empty() {
        return Err(Error::Contract("no linked documents to evaluate".into()));
    }
    let correct = scores
        .iter()
        .zip(&targets)
        .filter(|&(&z, &t)| (z >= 0.0) == (t == 1.0))
        .count();
    Ok(LinkingEval {
        pair_accuracy: correct as f64 / scores.len() as f64,
        auc: rank_auc(&scores, &targets)?,
        n_pairs: scores.len(),
    })
}

/// Mann–Whitney AUC; tied scores share their average rank.
fn rank_auc(scores: &[f64], targets: &[f64]) -> Result<f64> {
    let n_pos = targets.iter().filter(|&&t| t == 1.0).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract(
            "AUC needs both positive and negative pairs".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let shared = (i + 1 + j) as f64 / 2.0;
        for &p in &idx[i..j] {
            if targets[p] == 1.0 {
                pos_rank_sum += shared;
            }
        }
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::generate_synthetic_document;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.d = 16;
        cfg.heads = 2;
        cfg.d_ffn = 32;
        cfg.l_t = 32;
        cfg.l_v = 8;
        cfg.vocab = 64;
        cfg.n_stages = 2;
        cfg.coord_buckets = 8;
        cfg
    }

    fn tiny_corpus(n: usize) -> Vec<DocumentSample> {
        (0..n)
            .map(|i| generate_synthetic_document(90 + i as u64, 256, 256, 3, 64).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_and_loss() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(4);
        for task in [Task::Labeling, Task::Pretrain] {
            let mut store = ParamStore::new_model(&cfg).unwrap();
            let before: Vec<Vec<f64>> =
                store.iter().map(|(_, t)| t.data.clone()).collect();
            let opts = TrainOptions { epochs: 3, lr: 0.0, ..TrainOptions::default() };
            let history = train_loop(&mut store, &cfg, &corpus, task, &opts).unwrap();
            assert_eq!(history.len(), 3);
            for m in &history[1..] {
                assert_eq!(m.loss.to_bits(), history[0].loss.to_bits());
            }
            for ((_, t), b) in store.iter().zip(&before) {
                assert_eq!(&t.data, b);
            }
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_histories() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(3);
        let opts = TrainOptions { epochs: 3, lr: 0.05, ..TrainOptions::default() };
        let mut run = || {
            let mut store = ParamStore::new_model(&cfg).unwrap();
            let history = train_loop(&mut store, &cfg, &corpus, Task::Labeling, &opts).unwrap();
            let probe = store.get("head.label_w").unwrap().data.clone();
            (history, probe)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.f1, b.f1);
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn divergence_reports_the_epoch_and_last_finite_loss() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(2);
        let mut store = ParamStore::new_model(&cfg).unwrap();
        // pre-norm and max-shifted softmax shrug off merely huge weights, so
        // force products past f64 range: 1e200 squared overflows in one step
        let opts = TrainOptions { epochs: 10, lr: 1e200, ..TrainOptions::default() };
        let err = train_loop(&mut store, &cfg, &corpus, Task::Labeling, &opts)
            .err()
            .expect("an lr of 1e200 must blow up");
        match err {
            Error::Diverged { epoch, last_finite_loss } => {
                assert!(epoch < 10);
                assert!(last_finite_loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn linking_needs_at_least_one_linked_document() {
        let cfg = tiny_cfg();
        let mut corpus = tiny_corpus(2);
        for doc in &mut corpus {
            doc.links.clear();
        }
        let mut store = ParamStore::new_model(&cfg).unwrap();
        let opts = TrainOptions { epochs: 1, ..TrainOptions::default() };
        assert!(matches!(
            train_loop(&mut store, &cfg, &corpus, Task::Linking, &opts).err().unwrap(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn pretrain_history_carries_the_per_task_losses() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(2);
        let mut store = ParamStore::new_model(&cfg).unwrap();
        let opts = TrainOptions { epochs: 2, lr: 0.01, ..TrainOptions::default() };
        let history = train_loop(&mut store, &cfg, &corpus, Task::Pretrain, &opts).unwrap();
        for m in &history {
            assert!(m.gtr.is_some());
            assert!(m.loss.is_finite());
            assert!(m.f1.is_none());
        }
        let line = serde_json::to_string(&history[0]).unwrap();
        assert!(line.contains("\"gtr\""));
        assert!(!line.contains("\"f1\""));
    }

    #[test]
    fn single_document_labeling_overfits_within_two_hundred_epochs() {
        let cfg = ModelConfig::desk();
        let corpus = vec![generate_synthetic_document(7, 512, 512, 5, cfg.vocab).unwrap()];
        let mut store = ParamStore::new_model(&cfg).unwrap();
        let opts = TrainOptions {
            epochs: 200,
            stop_at: Some(1.0),
            batch_size: 1,
            ..TrainOptions::default()
        };
        let history = train_loop(&mut store, &cfg, &corpus, Task::Labeling, &opts).unwrap();
        let last = history.last().unwrap();
        assert_eq!(
            last.entity_accuracy,
            Some(1.0),
            "stuck at {:?} after {} epochs",
            last.entity_accuracy,
            history.len()
        );
    }

    #[test]
    fn rank_auc_matches_the_closed_forms() {
        // perfect separation, inverted separation, and all-tied scores
        let t = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(rank_auc(&[0.9, 0.8, 0.2, 0.1], &t).unwrap(), 1.0);
        assert_eq!(rank_auc(&[0.1, 0.2, 0.8, 0.9], &t).unwrap(), 0.0);
        assert_eq!(rank_auc(&[0.5, 0.5, 0.5, 0.5], &t).unwrap(), 0.5);
        // one crossing among four pairs: 3/4
        assert_eq!(rank_auc(&[0.9, 0.3, 0.5, 0.1], &t).unwrap(), 0.75);
        assert!(rank_auc(&[0.5, 0.5], &[1.0, 1.0]).is_err());
    }
}
