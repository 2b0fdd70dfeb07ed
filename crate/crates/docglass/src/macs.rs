//! MAC accounting: a closed-form vanilla-transformer baseline and a
//! graph-walk counter that prices whatever forward pass the encoder actually
//! built. The graph walk is the source of truth; the closed form exists to
//! cross-check it and to anchor the published baseline numbers.

use crate::config::ModelConfig;
use crate::doc::generate_synthetic_document;
use crate::error::Result;
use crate::hourglass::{encode, encode_vanilla_dual, EncodeOptions, RunMode};
use crate::params::ParamStore;
use crate::streams::tokenize_and_pad;

/// Analytic multiply-accumulate count of a text-only vanilla transformer:
/// per layer, the QKV and output projections (4·d²·L), both feed-forward
/// matmuls (2·d·d_ffn·L), and the two attention matmuls (2·L²·d). Norms,
/// softmax, and activations count zero, matching the graph-walk convention.
pub fn count_macs_vanilla(l: usize, d: usize, layers: usize, d_ffn: usize) -> u64 {
    let (l, d, layers, d_ffn) = (l as u64, d as u64, layers as u64, d_ffn as u64);
    layers * ((4 * d * d + 2 * d * d_ffn) * l + 2 * l * l * d)
}

/// Where the multiplies of one forward pass went, by scope, compared against
/// the closed-form vanilla baseline at the same text length and layer count.
#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub d: usize,
    pub k: usize,
    pub layers: usize,
    /// (text, visual) lengths each block's layers ran at, M-Blocks then
    /// E-Blocks.
    pub stage_lengths: Vec<(usize, usize)>,
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
    /// 1 − total/vanilla; negative when the pass costs more than the
    /// text-only baseline (the dual-stream vanilla does).
    pub reduction_vs_vanilla: f64,
}

fn finish_report(cfg: &ModelConfig, per_layer: Vec<(String, u64)>) -> Result<MacReport> {
    let total: u64 = per_layer.iter().map(|(_, m)| m).sum();
    let vanilla = count_macs_vanilla(cfg.l_t, cfg.d, cfg.layers(), cfg.d_ffn);
    Ok(MacReport {
        d: cfg.d,
        k: cfg.k,
        layers: cfg.layers(),
        stage_lengths: cfg.stage_lengths()?,
        per_layer,
        total,
        reduction_vs_vanilla: 1.0 - total as f64 / vanilla as f64,
    })
}

/// Shapes are all that matter for counting, so any well-formed document will
/// do as the probe input.
fn probe_encode(
    cfg: &ModelConfig,
    build: impl FnOnce(&ParamStore, &crate::streams::TokenStreams) -> Result<Vec<(String, u64)>>,
) -> Result<MacReport> {
    let store = ParamStore::shape_only(cfg)?;
    let doc = generate_synthetic_document(0, 256, 256, 2, cfg.vocab)?;
    let streams = tokenize_and_pad(&doc, cfg)?;
    finish_report(cfg, build(&store, &streams)?)
}

/// Dry-run the hourglass encoder and collect its per-scope MAC counts.
pub fn hourglass_mac_report(cfg: &ModelConfig) -> Result<MacReport> {
    probe_encode(cfg, |store, streams| {
        let enc = encode(store, cfg, streams, &EncodeOptions { mode: RunMode::DryRun })?;
        Ok(enc.graph.macs_by_scope())
    })
}

/// Dry-run the matched full-length dual-stream baseline (same blocks, no
/// merging) and collect its per-scope MAC counts.
pub fn vanilla_dual_mac_report(cfg: &ModelConfig) -> Result<MacReport> {
    probe_encode(cfg, |store, streams| {
        let enc =
            encode_vanilla_dual(store, cfg, streams, &EncodeOptions { mode: RunMode::DryRun })?;
        Ok(enc.graph.macs_by_scope())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hourglass::encode_plain_sa_stack;

    #[test]
    fn closed_form_hits_the_published_baseline() {
        let at_512 = count_macs_vanilla(512, 768, 12, 3072);
        assert_eq!(at_512, 48_318_382_080);
        assert!((at_512 as f64 - 48.36e9).abs() / 48.36e9 < 0.01);

        let at_8192 = count_macs_vanilla(8192, 768, 12, 3072);
        assert_eq!(at_8192, 1_932_735_283_200);
        assert!((at_8192 as f64 - 1933.49e9).abs() / 1933.49e9 < 0.01);
    }

    #[test]
    fn one_of_everything_costs_eight() {
        // (4 + 2)·1 projections and FFN plus 2·1 attention
        assert_eq!(count_macs_vanilla(1, 1, 1, 1), 8);
    }

    /// The graph-walk counter and the closed form agree exactly on a plain
    /// self-attention stack — both ignore norms, softmax, and activations —
    /// comfortably inside the 2% contract.
    #[test]
    fn plain_stack_cross_checks_the_closed_form() {
        let cfg = ModelConfig::paper();
        let store = ParamStore::shape_only(&cfg).unwrap();
        let (g, _) = encode_plain_sa_stack(&store, &cfg, cfg.l_t, RunMode::DryRun).unwrap();
        let want = count_macs_vanilla(cfg.l_t, cfg.d, cfg.layers(), cfg.d_ffn);
        assert_eq!(g.mac_total(), want);
    }

    #[test]
    fn hourglass_at_paper_preset_lands_near_the_published_count() {
        let report = hourglass_mac_report(&ModelConfig::paper()).unwrap();
        assert!((report.total as f64 - 19.91e9).abs() / 19.91e9 < 0.15);
        assert_eq!(report.total, report.per_layer.iter().map(|(_, m)| m).sum::<u64>());
        assert!(report.reduction_vs_vanilla > 0.0 && report.reduction_vs_vanilla < 1.0);
        assert_eq!(report.stage_lengths[0], (256, 64));
        assert_eq!(report.stage_lengths[5], (512, 128));
    }

    #[test]
    fn reduction_grows_with_length() {
        let mut last = f64::NEG_INFINITY;
        for l_t in [512, 1024, 2048] {
            let cfg = ModelConfig::paper().with_text_len(l_t).unwrap();
            let report = hourglass_mac_report(&cfg).unwrap();
            assert!(
                report.reduction_vs_vanilla > last,
                "reduction must strictly increase, got {} after {last} at {l_t}",
                report.reduction_vs_vanilla
            );
            last = report.reduction_vs_vanilla;
        }
    }

    #[test]
    fn doubling_d_nearly_quadruples_a_projection_dominated_model() {
        let mut small = ModelConfig::desk();
        small.l_t = 32;
        small.l_v = 8;
        small.n_stages = 2;
        let mut big = small.clone();
        big.d = small.d * 2;
        big.d_ffn = small.d_ffn * 2;
        let ratio = hourglass_mac_report(&big).unwrap().total as f64
            / hourglass_mac_report(&small).unwrap().total as f64;
        assert!((3.5..4.0).contains(&ratio), "got ratio {ratio}");
    }

    #[test]
    fn k1_hourglass_counts_equal_the_dual_baseline() {
        let mut cfg = ModelConfig::desk();
        cfg.k = 1;
        let hourglass = hourglass_mac_report(&cfg).unwrap();
        let dual = vanilla_dual_mac_report(&cfg).unwrap();
        assert_eq!(hourglass.total, dual.total);
    }

    #[test]
    fn merging_beats_the_dual_baseline_at_real_lengths() {
        let cfg = ModelConfig::desk().with_text_len(512).unwrap();
        let hourglass = hourglass_mac_report(&cfg).unwrap();
        let dual = vanilla_dual_mac_report(&cfg).unwrap();
        assert!(hourglass.total < dual.total);
        // at paper width the projections dominate, so carrying the second
        // stream costs more than the text-only baseline
        let paper_dual = vanilla_dual_mac_report(&ModelConfig::paper()).unwrap();
        assert!(paper_dual.reduction_vs_vanilla < 0.0);
    }

    #[test]
    fn counts_are_value_independent() {
        let cfg = ModelConfig::desk();
        let a = hourglass_mac_report(&cfg).unwrap();
        // different parameters and document, same shapes
        let store = ParamStore::new_model(&cfg).unwrap();
        let doc = generate_synthetic_document(99, 512, 512, 7, cfg.vocab).unwrap();
        let streams = tokenize_and_pad(&doc, &cfg).unwrap();
        let enc = encode(&store, &cfg, &streams, &EncodeOptions { mode: RunMode::DryRun })
            .unwrap();
        let per_layer = enc.graph.macs_by_scope();
        assert_eq!(a.per_layer, per_layer);
        assert_eq!(a.total, per_layer.iter().map(|(_, m)| m).sum::<u64>());
    }
}
