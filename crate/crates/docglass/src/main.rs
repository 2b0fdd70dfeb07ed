//! Command-line front end: MAC analysis, wall-clock benchmarks, training,
//! evaluation, label emission, and attention statistics. Tabular output goes
//! to stdout as CSV or JSON lines; diagnostics go to stderr.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use docglass::bench::{
    attention_redundancy_stat, bench_csv, redundancy_csv, run_benchmark, BenchOptions,
};
use docglass::config::ModelConfig;
use docglass::doc::{generate_corpus, generate_synthetic_document, load_corpus, save_corpus};
use docglass::error::{Error, Result};
use docglass::heads::{
    gtr_labels, mvlm_plan, sop_pairs, tia_apply, MVLM_RATIO, SOP_SEED_TAG, TIA_RATIO,
    TIA_SEED_TAG,
};
use docglass::hourglass::{encode, EncodeOptions, RunMode};
use docglass::macs::{count_macs_vanilla, hourglass_mac_report};
use docglass::params::ParamStore;
use docglass::streams::tokenize_and_pad;
use docglass::train::{
    doc_seed, eval_labeling, eval_linking, tokenize_corpus, train_loop, Task, TrainOptions,
};

#[derive(Parser)]
#[command(name = "docglass", version, about = "Hourglass document transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical MAC counts: hourglass vs the full-length text-only stack
    AnalyzeFlops {
        /// Model config JSON; desk preset when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text lengths to evaluate (visual length follows at 1/4)
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
        lengths: Vec<usize>,
    },
    /// Wall-clock forward passes: hourglass vs the full-length dual baseline
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        /// Timed passes per model after one warm-up (at least 5)
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Train a task head and print a JSON-lines metric log
    Train {
        /// labeling, linking, or pretrain
        #[arg(long)]
        task: Task,
        /// Corpus JSONL
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.003)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Stop once the primary metric reaches this value
        #[arg(long)]
        stop_at: Option<f64>,
        /// Write the trained parameters here as a checkpoint
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus (labeling and linking metrics)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Seed for linking negative sampling
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Emit label-builder outputs (GTR matrices, SOP pairs, MVLM/TIA masks)
    /// for external verification, one CSV per document and builder
    Labels {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Attention-redundancy statistic of one encoded document
    AttnStats {
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        /// Model parameters; fresh ones from --config when absent
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Encode this corpus document instead of a synthetic default
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Document index within --corpus
        #[arg(long, default_value_t = 0)]
        doc: usize,
    },
    /// Generate a synthetic corpus JSONL
    GenCorpus {
        #[arg(long, default_value_t = 64)]
        docs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_file(p),
        None => Ok(ModelConfig::desk()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::AnalyzeFlops { config, lengths } => {
            let cfg = load_config(&config)?;
            println!("length,vanilla_macs,hourglass_macs,reduction");
            for l in lengths {
                let cfg_l = cfg.with_text_len(l)?;
                let report = hourglass_mac_report(&cfg_l)?;
                let vanilla = count_macs_vanilla(l, cfg_l.d, cfg_l.layers(), cfg_l.d_ffn);
                println!("{l},{vanilla},{},{:.4}", report.total, report.reduction_vs_vanilla);
            }
        }
        Command::Bench { config, lengths, repeats } => {
            let cfg = load_config(&config)?;
            let opts = BenchOptions { repeats, ..BenchOptions::default() };
            let results = run_benchmark(&cfg, &lengths, &opts)?;
            print!("{}", bench_csv(&results));
        }
        Command::Train {
            task,
            corpus,
            config,
            epochs,
            lr,
            momentum,
            batch_size,
            seed,
            stop_at,
            checkpoint_out,
        } => {
            let cfg = load_config(&config)?;
            let docs = load_corpus(&corpus)?;
            let mut store = ParamStore::new_model(&cfg)?;
            let opts = TrainOptions { epochs, lr, momentum, batch_size, seed, stop_at };
            let history = train_loop(&mut store, &cfg, &docs, task, &opts)?;
            for m in &history {
                println!("{}", serde_json::to_string(m)?);
            }
            if let Some(path) = checkpoint_out {
                store.save(&cfg, &path)?;
                eprintln!("checkpoint written to {}", path.display());
            }
        }
        Command::Eval { checkpoint, corpus, seed } => {
            let (cfg, store) = ParamStore::load(&checkpoint)?;
            let docs = load_corpus(&corpus)?;
            let streams = tokenize_corpus(&docs, &cfg)?;
            let labeling = match eval_labeling(&store, &cfg, &streams) {
                Ok(e) => serde_json::json!({
                    "f1": e.f1, "accuracy": e.accuracy, "n_entities": e.n_entities,
                }),
                Err(e) => {
                    eprintln!("labeling skipped: {e}");
                    serde_json::Value::Null
                }
            };
            let linking = match eval_linking(&store, &cfg, &streams, seed) {
                Ok(e) => serde_json::json!({
                    "pair_accuracy": e.pair_accuracy, "auc": e.auc, "n_pairs": e.n_pairs,
                }),
                Err(e) => {
                    eprintln!("linking skipped: {e}");
                    serde_json::Value::Null
                }
            };
            println!(
                "{}",
                serde_json::json!({ "labeling": labeling, "linking": linking })
            );
        }
        Command::Labels { corpus, out, config, seed } => {
            let cfg = load_config(&config)?;
            let docs = load_corpus(&corpus)?;
            std::fs::create_dir_all(&out)?;
            for (i, doc) in docs.iter().enumerate() {
                let streams = tokenize_and_pad(doc, &cfg)?;
                let s = doc_seed(seed, i);
                write_doc_labels(&out, i, &cfg, &streams, s)?;
            }
            eprintln!("label files for {} documents written to {}", docs.len(), out.display());
        }
        Command::AttnStats { threshold, checkpoint, config, corpus, doc } => {
            let (cfg, store) = match checkpoint {
                Some(p) => ParamStore::load(&p)?,
                None => {
                    let cfg = load_config(&config)?;
                    let store = ParamStore::new_model(&cfg)?;
                    (cfg, store)
                }
            };
            let sample = match corpus {
                Some(p) => {
                    let docs = load_corpus(&p)?;
                    docs.into_iter().nth(doc).ok_or_else(|| {
                        Error::Contract(format!("corpus has no document {doc}"))
                    })?
                }
                None => generate_synthetic_document(cfg.seed, 512, 512, 6, cfg.vocab)?,
            };
            let streams = tokenize_and_pad(&sample, &cfg)?;
            let enc = encode(&store, &cfg, &streams, &EncodeOptions { mode: RunMode::Train })?;
            let stat = attention_redundancy_stat(&enc, threshold)?;
            print!("{}", redundancy_csv(&stat));
        }
        Command::GenCorpus { docs, seed, out, config } => {
            let cfg = load_config(&config)?;
            let corpus = generate_corpus(seed, docs, cfg.vocab)?;
            save_corpus(&out, &corpus)?;
            eprintln!("{} documents written to {}", corpus.len(), out.display());
        }
    }
    Ok(())
}

/// One CSV per label builder: the relation matrix, the SOP pair list, and the
/// MVLM/TIA mask sets, built with the same seeds a pretraining step would use.
fn write_doc_labels(
    out: &Path,
    i: usize,
    cfg: &ModelConfig,
    streams: &docglass::streams::TokenStreams,
    seed: u64,
) -> Result<()> {
    let n = streams.n_segments;
    let rel = gtr_labels(&streams.visual_boxes[..n], streams.page_w, streams.page_h);
    let mut gtr = String::new();
    for r in 0..n {
        let row: Vec<String> = (0..n).map(|c| rel.get(r, c).to_string()).collect();
        gtr.push_str(&row.join(","));
        gtr.push('\n');
    }
    std::fs::write(out.join(format!("doc{i:04}.gtr.csv")), gtr)?;

    let (pairs, targets) = sop_pairs(streams, seed ^ SOP_SEED_TAG);
    let mut sop = String::from("first,second,in_order\n");
    for (p, t) in pairs.iter().zip(&targets) {
        sop.push_str(&format!("{},{},{}\n", p[0], p[1], *t as u8));
    }
    std::fs::write(out.join(format!("doc{i:04}.sop.csv")), sop)?;

    let plan = mvlm_plan(streams, MVLM_RATIO, seed, cfg.vocab)?;
    let mut mvlm = String::from("position,original_id\n");
    for (p, t) in plan.positions.iter().zip(&plan.targets) {
        mvlm.push_str(&format!("{p},{t}\n"));
    }
    std::fs::write(out.join(format!("doc{i:04}.mvlm.csv")), mvlm)?;

    let mut working = streams.clone();
    let zeroed = tia_apply(&mut working, TIA_RATIO, seed ^ TIA_SEED_TAG, cfg.d)?;
    let mut tia = String::from("visual_row\n");
    for r in zeroed {
        tia.push_str(&format!("{r}\n"));
    }
    std::fs::write(out.join(format!("doc{i:04}.tia.csv")), tia)?;
    Ok(())
}
