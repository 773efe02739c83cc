//! `dsa`: command-line driver for the adapter workbench.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage
//! error, 3 artifact inconsistency (mismatched checkpoints).

use clap::{Parser, Subcommand, ValueEnum};
use dsa_core::alignment::{targeted_generate, LambdaPolicy};
use dsa_core::classifier::SafetyClassifier;
use dsa_core::error::Error;
use dsa_core::evalsuite::{
    eval_safety_capability, flop_count, AdapterFlopSpec, QWEN7B_BASE_FLOPS_REFERENCE,
    QWEN7B_LST_OVERHEAD_REFERENCE,
};
use dsa_core::model::{generate_greedy, ModelConfig, TokenId};
use dsa_core::pipeline::{self, RunConfig};
use dsa_core::synthbench::{read_jsonl, Vocab};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dsa", version, about = "Safety adapters on a frozen toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdapterArg {
    None,
    Plr,
    Rtb,
    Lst,
    #[value(name = "lst+")]
    LstPlus,
    Lld,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark datasets as JSONL files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base model (runs data generation first if needed).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the ladder side network from the frozen base.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the guardrail comparison (all classifier methods).
    TrainClassifier {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alignment comparison (DPO for every adapter, sweeps,
    /// targeted rows).
    TrainAlign {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the pretrained base (or a checkpoint pair) on the safety
    /// and capability sets.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lambda frontier of a trained adapter, as CSV on stdout.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Adapter checkpoint directory (defaults to the layer-duplicate
        /// adapter inside --out).
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Classifier-gated generation over a prompt file; one JSON line per
    /// prompt with the raw score and the lambda used.
    TargetedGenerate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        lambda_unsafe: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_new: usize,
    },
    /// Analytic FLOP report for a model configuration, as JSON on stdout.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AdapterArg::None)]
        adapter: AdapterArg,
        #[arg(long, default_value_t = 500)]
        seq_len: usize,
        /// Use the built-in 7B-class reference configuration and compare
        /// against its published totals.
        #[arg(long, default_value_t = false)]
        reference_7b: bool,
    },
    /// Run the full invariant suite on throwaway models.
    Verify,
}

fn load_run_config(path: &Option<PathBuf>, seed: u64) -> Result<RunConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut cfg: RunConfig = serde_json::from_str(&text)?;
            // An explicit --seed overrides the file only when given a
            // non-default value; the file's seed wins otherwise.
            if seed != 42 {
                cfg.seed = seed;
            }
            Ok(cfg)
        }
        None => Ok(RunConfig::acceptance_default(seed)),
    }
}

#[derive(Serialize, Deserialize)]
struct PromptLine {
    prompt: Vec<TokenId>,
}

#[derive(Serialize)]
struct TargetedLine {
    prompt: Vec<TokenId>,
    tokens: Vec<TokenId>,
    unsafe_score: f64,
    lambda_used: f64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::ArtifactMismatch(_) => 3,
        _ => 1,
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            std::fs::create_dir_all(&out)?;
            // Only the data stage; heavier stages stay untouched.
            let mut data_only = cfg.clone();
            data_only.pretrain.steps = 0;
            let d = generate_and_write(&data_only, &out)?;
            println!(
                "wrote {} corpus sequences and {} safety prompts under {}",
                d.0,
                d.1,
                out.display()
            );
            Ok(0)
        }
        Command::Pretrain { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Pretrain)?;
            Ok(0)
        }
        Command::Distill { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Pretrain)?;
            let base = dsa_core::checkpoint::load_model(&out.join("ckpt/base"))?;
            base.freeze();
            let data = pipeline::load_datasets(&out)?;
            let corpus = dsa_core::classifier::cache_distill_corpus(
                &base,
                &data.corpus[..(cfg.data.distill_corpus_n + cfg.data.distill_held_out_n)
                    .min(data.corpus.len())],
            );
            let (train, held) =
                corpus.split_at(corpus.len() - cfg.data.distill_held_out_n.min(corpus.len() / 2));
            let side_cfg = dsa_core::side::SideConfig::from_base(
                &base.cfg,
                cfg.guardrail.scale_hidden,
                cfg.guardrail.scale_heads,
                None,
            );
            let mut settings = cfg.guardrail.distill.clone();
            settings.seed = dsa_core::rng::derive_seed(cfg.seed, "guardrail/distill");
            let (side, report) =
                dsa_core::classifier::lst_init_distill(&base, side_cfg, train, held, &settings);
            let ck = dsa_core::checkpoint::Checkpoint::from_named(
                serde_json::to_value(&side.cfg)?,
                &side.named_params(),
            );
            ck.save(&out.join("ckpt/side_distilled"))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::TrainClassifier { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Guardrail)?;
            let report: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(out.join("guardrail_report.json"))?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::TrainAlign { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Alignment)?;
            let report: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(out.join("alignment_report.json"))?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Eval { config, seed, out } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Pretrain)?;
            let base = dsa_core::checkpoint::load_model(&out.join("ckpt/base"))?;
            base.freeze();
            let data = pipeline::load_datasets(&out)?;
            let score = eval_safety_capability(
                |p| {
                    generate_greedy(
                        &base,
                        p,
                        cfg.alignment.max_new,
                        Some(Vocab::EOS),
                        None,
                        None,
                    )
                },
                &data.unsafe_eval,
                &data.capability_eval,
            );
            println!("{}", serde_json::to_string_pretty(&score)?);
            Ok(0)
        }
        Command::Sweep {
            config,
            seed,
            out,
            adapter,
        } => {
            let cfg = load_run_config(&config, seed)?;
            run_through_stage(&cfg, &out, pipeline::StageLimit::Alignment)?;
            let base = dsa_core::checkpoint::load_model(&out.join("ckpt/base"))?;
            base.freeze();
            let data = pipeline::load_datasets(&out)?;
            let adapter_dir = adapter.unwrap_or_else(|| out.join("ckpt/align_lld"));
            let adapter = pipeline::load_adapter(&adapter_dir, &base)?;
            let rows = dsa_core::alignment::lambda_sweep(
                &base,
                &adapter,
                &data.unsafe_eval,
                &data.capability_eval,
                &cfg.alignment.lambda_grid,
                cfg.alignment.max_new,
            );
            println!("lambda,capability_accuracy,unsafe_compliance_rate,refusal_rate_on_safe");
            for r in rows {
                println!(
                    "{:.2},{:.6},{:.6},{:.6}",
                    r.lambda, r.capability_accuracy, r.unsafe_compliance_rate, r.refusal_rate_on_safe
                );
            }
            Ok(0)
        }
        Command::TargetedGenerate {
            base,
            adapter,
            classifier,
            lambda_unsafe,
            tau,
            prompt_file,
            max_new,
        } => {
            if !(0.0..=1.0).contains(&lambda_unsafe) || !(0.0..1.0).contains(&tau) || tau <= 0.0 {
                return Err(Error::Config(format!(
                    "lambda_unsafe must be in [0,1] and tau in (0,1); got {lambda_unsafe} and {tau}"
                )));
            }
            let base_model = dsa_core::checkpoint::load_model(&base)?;
            base_model.freeze();
            let adapter = pipeline::load_adapter(&adapter, &base_model)?;
            let clf = pipeline::load_lst_classifier(&classifier)?;
            if clf.side.cfg.base_d_model != base_model.cfg.d_model
                || clf.side.cfg.n_layers != base_model.cfg.n_layers
            {
                return Err(Error::ArtifactMismatch(
                    "classifier checkpoint does not fit the base configuration".to_string(),
                ));
            }
            let policy = LambdaPolicy::GatedStep {
                classifier: std::rc::Rc::new(SafetyClassifier::Lst(clf)),
                tau,
                lambda_unsafe,
            };
            let prompts: Vec<PromptLine> = read_jsonl(&prompt_file)?;
            for line in prompts {
                validate_prompt(&line.prompt, &base_model.cfg)?;
                let (tokens, record) = targeted_generate(
                    &base_model,
                    &adapter,
                    &policy,
                    &line.prompt,
                    max_new,
                    None,
                );
                let out = TargetedLine {
                    prompt: line.prompt,
                    tokens,
                    unsafe_score: record.unsafe_score.unwrap_or(f64::NAN),
                    lambda_used: record.lambda,
                };
                println!("{}", serde_json::to_string(&out)?);
            }
            Ok(0)
        }
        Command::Flops {
            config,
            adapter,
            seq_len,
            reference_7b,
        } => {
            let model_cfg = if reference_7b {
                ModelConfig::qwen7b_reference()
            } else if let Some(p) = &config {
                let run: RunConfig = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                run.model
            } else {
                ModelConfig::compact_default()
            };
            let spec = match adapter {
                AdapterArg::None => None,
                AdapterArg::Plr => Some(AdapterFlopSpec::Plr),
                AdapterArg::Rtb => Some(AdapterFlopSpec::Rtb { bottleneck: 32 }),
                AdapterArg::Lst => Some(AdapterFlopSpec::Lst {
                    scale_hidden: 16,
                    scale_heads: 2,
                }),
                AdapterArg::LstPlus => Some(AdapterFlopSpec::LstPlus {
                    scale_hidden: 16,
                    scale_heads: 2,
                    cross_rank: 8,
                }),
                AdapterArg::Lld => Some(AdapterFlopSpec::Lld {
                    n_layers: 2,
                    lora_rank: 32,
                }),
            };
            let report = flop_count(&model_cfg, spec.as_ref(), seq_len);
            let mut doc = serde_json::to_value(&report)?;
            if reference_7b {
                let base_rel = (report.base_flops as f64 - QWEN7B_BASE_FLOPS_REFERENCE as f64)
                    .abs()
                    / QWEN7B_BASE_FLOPS_REFERENCE as f64;
                doc["reference"] = serde_json::json!({
                    "base_flops_expected": QWEN7B_BASE_FLOPS_REFERENCE,
                    "base_relative_deviation": base_rel,
                    "base_within_15_percent": base_rel < 0.15,
                });
                if matches!(adapter, AdapterArg::Lst) {
                    let ok = (0.4..=1.5).contains(&report.overhead_percent);
                    doc["reference"]["lst_overhead_expected_percent"] =
                        serde_json::json!(QWEN7B_LST_OVERHEAD_REFERENCE);
                    doc["reference"]["lst_overhead_band"] = serde_json::json!([0.4, 1.5]);
                    doc["reference"]["lst_overhead_check"] =
                        serde_json::json!(if ok { "PASS" } else { "FAIL" });
                }
            }
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(0)
        }
        Command::Verify => {
            let results = dsa_core::verify::verify_all();
            let mut failed = 0usize;
            for r in &results {
                println!(
                    "{} {} ({})",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                if !r.pass {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", results.len(), failed);
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn validate_prompt(prompt: &[TokenId], cfg: &ModelConfig) -> Result<(), Error> {
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".to_string()));
    }
    if prompt.len() >= cfg.max_seq_len {
        return Err(Error::Data(format!(
            "prompt of {} tokens exceeds max_seq_len {}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    for &t in prompt {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Data(format!("token {t} out of vocabulary")));
        }
    }
    Ok(())
}

/// Runs pipeline stages up to and including the requested one; the
/// pipeline's own skipping keeps completed prefixes cheap.
fn run_through_stage(
    cfg: &RunConfig,
    out: &Path,
    stage: pipeline::StageLimit,
) -> Result<(), Error> {
    pipeline::run_until(cfg, out, stage)?;
    Ok(())
}

fn generate_and_write(cfg: &RunConfig, out: &Path) -> Result<(usize, usize), Error> {
    pipeline::run_until(cfg, out, pipeline::StageLimit::GenData)?;
    let data = pipeline::load_datasets(out)?;
    Ok((
        data.corpus.len(),
        data.safety.train.len() + data.safety.val.len() + data.safety.test.len(),
    ))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
