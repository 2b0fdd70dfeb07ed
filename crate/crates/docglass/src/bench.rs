//! Wall-clock comparison of the hourglass encoder against the matched
//! full-length dual-stream stack, plus the attention-redundancy statistic.
//!
//! Absolute throughput is machine-dependent, so everything downstream binds
//! only ratios and orderings: median-of-N single-threaded forwards, one
//! warm-up excluded, identical documents and parameters on both sides.

use std::time::Instant;

use crate::config::ModelConfig;
use crate::doc::generate_synthetic_document;
use crate::error::{Error, Result};
use crate::hourglass::{
    encode, encode_vanilla_dual, EncodeOptions, Encoded, RunMode,
};
use crate::params::ParamStore;
use crate::streams::tokenize_and_pad;

/// One measured sequence length. Times are seconds per forward pass; a
/// skipped length carries NaN times and says why in `note`.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub length: usize,
    pub vanilla_s: f64,
    pub hourglass_s: f64,
    /// vanilla/hourglass − 1; positive when merging wins.
    pub speedup: f64,
    pub note: String,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    /// Timed passes per model (after one untimed warm-up). At least 5.
    pub repeats: usize,
    /// Estimated-peak guard in bytes; lengths projected to exceed it are
    /// reported as skipped instead of thrashing the machine. None disables.
    pub memory_budget: Option<u64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { repeats: 5, memory_budget: default_memory_budget() }
    }
}

/// 80% of MemAvailable where /proc exposes it; no guard elsewhere.
pub fn default_memory_budget() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let kb: u64 = text
        .lines()
        .find(|l| l.starts_with("MemAvailable:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()?;
    Some(kb * 1024 * 4 / 5)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rough tape footprint of one timed forward pass: every node value at
/// eight bytes. Inference passes never allocate gradient buffers, so the
/// values themselves are the whole bill apart from transient per-row
/// score buffers.
fn estimate_bytes(g: &crate::graph::Graph) -> u64 {
    let mut elems: u64 = 0;
    for id in 0..g.len() {
        elems += g.shape(id).iter().product::<usize>() as u64;
    }
    elems * 8
}

/// Times the two models pass-for-pass interleaved, so machine drift lands on
/// both sides of the ratio instead of one measurement window. Keeping each
/// length's passes contiguous also keeps its cache state self-consistent;
/// scheduling whole-ladder sweeps instead was measurably worse, because every
/// pass then inherits whatever the neighbouring length evicted.
fn timed_pair(
    repeats: usize,
    mut vanilla: impl FnMut() -> Result<()>,
    mut hourglass: impl FnMut() -> Result<()>,
) -> Result<(f64, f64)> {
    // warm-up, excluded: lets allocator arenas and caches settle
    vanilla()?;
    hourglass()?;
    let mut tv = Vec::with_capacity(repeats);
    let mut th = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        vanilla()?;
        tv.push(t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        hourglass()?;
        th.push(t0.elapsed().as_secs_f64());
    }
    Ok((median(tv), median(th)))
}

/// Times both models at each length with shared parameters and input.
/// Lengths keep the configured text/visual ratio; each is (re)tokenized at
/// its own padded size.
pub fn run_benchmark(
    cfg: &ModelConfig,
    lengths: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    if opts.repeats < 5 {
        return Err(Error::Contract(format!(
            "{} repeats cannot support a median; use at least 5",
            opts.repeats
        )));
    }
    if lengths.is_empty() {
        return Err(Error::Contract("no benchmark lengths given".into()));
    }
    let mut results = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let cfg_l = cfg.with_text_len(l)?;
        // worst case is 5 words a segment, so l/8 segments always fit; the
        // masks only shape key sets, the padded lengths drive the cost
        let n_segments = (l / 8).clamp(1, 12);
        let doc = generate_synthetic_document(7, 512, 512, n_segments, cfg_l.vocab)?;
        let streams = tokenize_and_pad(&doc, &cfg_l)?;

        if let Some(budget) = opts.memory_budget {
            let probe_store = ParamStore::shape_only(&cfg_l)?;
            let dry = EncodeOptions { mode: RunMode::DryRun };
            let need = estimate_bytes(
                &encode_vanilla_dual(&probe_store, &cfg_l, &streams, &dry)?.graph,
            )
            .max(estimate_bytes(&encode(&probe_store, &cfg_l, &streams, &dry)?.graph));
            if need > budget {
                results.push(BenchResult {
                    length: l,
                    vanilla_s: f64::NAN,
                    hourglass_s: f64::NAN,
                    speedup: f64::NAN,
                    note: format!(
                        "skipped: needs ~{} MiB, budget {} MiB",
                        need >> 20,
                        budget >> 20
                    ),
                });
                continue;
            }
        }

        let store = ParamStore::new_model(&cfg_l)?;
        let run = EncodeOptions { mode: RunMode::Inference };
        let (vanilla_s, hourglass_s) = timed_pair(
            opts.repeats,
            || encode_vanilla_dual(&store, &cfg_l, &streams, &run).map(|_| ()),
            || encode(&store, &cfg_l, &streams, &run).map(|_| ()),
        )?;
        results.push(BenchResult {
            length: l,
            vanilla_s,
            hourglass_s,
            speedup: vanilla_s / hourglass_s - 1.0,
            note: "ok".into(),
        });
    }
    Ok(results)
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("length,vanilla_s,hourglass_s,speedup,note\n");
    for r in results {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{}\n",
            r.length, r.vanilla_s, r.hourglass_s, r.speedup, r.note
        ));
    }
    out
}

// ---- attention redundancy ---------------------------------------------------

/// Per-layer count of attention entries above the threshold, with the
/// running total across layers in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyStat {
    pub threshold: f64,
    pub per_layer: Vec<(String, u64)>,
    pub cumulative: Vec<u64>,
}

/// Counts attention probabilities above `threshold` in every recorded layer.
/// Requires a training-mode encode; inference and dry runs drop the weights.
pub fn attention_redundancy_stat(enc: &Encoded, threshold: f64) -> Result<RedundancyStat> {
    if enc.attn.is_empty() {
        return Err(Error::Contract("encoder recorded no attention layers".into()));
    }
    let mut per_layer = Vec::with_capacity(enc.attn.len());
    let mut cumulative = Vec::with_capacity(enc.attn.len());
    let mut running = 0u64;
    for (label, node) in &enc.attn {
        let weights = enc.graph.attn_weights(*node).ok_or_else(|| {
            Error::Contract(format!(
                "attention weights for {label} were not recorded; encode in training mode"
            ))
        })?;
        let count = weights.iter().filter(|&&p| p > threshold).count() as u64;
        running += count;
        per_layer.push((label.clone(), count));
        cumulative.push(running);
    }
    Ok(RedundancyStat { threshold, per_layer, cumulative })
}

pub fn redundancy_csv(stat: &RedundancyStat) -> String {
    let mut out = String::from("layer,count,cumulative\n");
    for ((label, count), cum) in stat.per_layer.iter().zip(&stat.cumulative) {
        out.push_str(&format!("{label},{count},{cum}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::TokenStreams;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.d = 16;
        cfg.heads = 2;
        cfg.d_ffn = 32;
        cfg.l_t = 16;
        cfg.l_v = 4;
        cfg.vocab = 64;
        cfg.n_stages = 2;
        cfg.coord_buckets = 8;
        cfg
    }

    fn setup(seed: u64, n_segments: usize) -> (ModelConfig, ParamStore, TokenStreams) {
        let cfg = tiny_cfg();
        let store = ParamStore::new_model(&cfg).unwrap();
        let doc = generate_synthetic_document(seed, 256, 256, n_segments, cfg.vocab).unwrap();
        let streams = tokenize_and_pad(&doc, &cfg).unwrap();
        (cfg, store, streams)
    }

    #[test]
    fn uniform_attention_stays_below_the_threshold() {
        // all-zero parameters give exactly uniform attention over the active
        // keys; the config keeps at least two of those in every direction at
        // every depth, so no entry can pass 0.7
        let mut cfg = tiny_cfg();
        cfg.n_stages = 1;
        cfg.l_t = 32;
        let mut store = ParamStore::new_model(&cfg).unwrap();
        for i in 0..store.len() {
            store.tensor_at_mut(i).data.fill(0.0);
        }
        let doc = generate_synthetic_document(3, 256, 256, 4, cfg.vocab).unwrap();
        let streams = tokenize_and_pad(&doc, &cfg).unwrap();
        let enc = encode(&store, &cfg, &streams, &EncodeOptions::default()).unwrap();
        let stat = attention_redundancy_stat(&enc, 0.7).unwrap();
        for (label, count) in &stat.per_layer {
            assert_eq!(*count, 0, "{label} leaked past the threshold");
        }
        assert_eq!(*stat.cumulative.last().unwrap(), 0);
    }

    #[test]
    fn single_key_rows_count_once_per_head_and_query() {
        // one segment → one active visual token → every text query (key
        // masking does not silence padded query rows) puts weight 1.0 on it
        let (cfg, store, streams) = setup(4, 1);
        let enc = encode(&store, &cfg, &streams, &EncodeOptions::default()).unwrap();
        let stat = attention_redundancy_stat(&enc, 0.7).unwrap();
        let last_tv = stat
            .per_layer
            .iter()
            .rev()
            .find(|(label, _)| label.ends_with("sca.tv"))
            .unwrap();
        assert_eq!(last_tv.1, (cfg.heads * streams.l_t()) as u64);
    }

    #[test]
    fn cumulative_counts_never_decrease() {
        let (cfg, store, streams) = setup(5, 2);
        let enc = encode(&store, &cfg, &streams, &EncodeOptions::default()).unwrap();
        let stat = attention_redundancy_stat(&enc, 0.7).unwrap();
        for w in stat.cumulative.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(stat.per_layer.len(), 6 * cfg.n_stages, "SA + two SCA directions per block");

        let csv = redundancy_csv(&stat);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,count,cumulative"));
        assert_eq!(lines.count(), stat.per_layer.len());
    }

    #[test]
    fn missing_records_are_a_contract_error() {
        let (cfg, store, streams) = setup(6, 2);
        let enc = encode(
            &store,
            &cfg,
            &streams,
            &EncodeOptions { mode: RunMode::Inference },
        )
        .unwrap();
        assert!(matches!(
            attention_redundancy_stat(&enc, 0.7).err().unwrap(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn benchmark_reports_every_length_with_consistent_fields() {
        let cfg = tiny_cfg();
        let opts = BenchOptions { repeats: 5, memory_budget: None };
        let results = run_benchmark(&cfg, &[16, 32], &opts).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.note, "ok");
            assert!(r.vanilla_s > 0.0 && r.hourglass_s > 0.0);
            let want = r.vanilla_s / r.hourglass_s - 1.0;
            assert!((r.speedup - want).abs() < 1e-12);
        }
        assert_eq!(results[0].length, 16);
        assert_eq!(results[1].length, 32);

        let csv = bench_csv(&results);
        assert!(csv.starts_with("length,vanilla_s,hourglass_s,speedup,note\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn starved_budget_marks_lengths_as_skipped() {
        let cfg = tiny_cfg();
        let opts = BenchOptions { repeats: 5, memory_budget: Some(1024) };
        let results = run_benchmark(&cfg, &[16], &opts).unwrap();
        assert!(results[0].note.starts_with("skipped"));
        assert!(results[0].vanilla_s.is_nan());
        assert!(results[0].speedup.is_nan());
    }

    #[test]
    fn too_few_repeats_are_rejected() {
        let cfg = tiny_cfg();
        let opts = BenchOptions { repeats: 4, memory_budget: None };
        assert!(run_benchmark(&cfg, &[16], &opts).is_err());
    }

    #[test]
    fn median_splits_odd_and_even_runs() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
