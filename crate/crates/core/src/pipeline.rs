//! End-to-end experiment pipeline: data generation, base pretraining,
//! the guardrail comparison, and the alignment/targeted-alignment
//! comparison, each a resumable stage under one seeded configuration.
//!
//! Every stage records input and output checksums in `manifest.json`;
//! rerunning a completed stage with unchanged inputs loads its artifacts
//! and performs zero training steps. Reports never contain wall-clock
//! values, so a rerun with the same seed reproduces them byte for byte.

use crate::alignment::{
    lambda_sweep, targeted_generate_traced, train_dpo, AlignmentAdapter, DpoSettings, FrontierRow,
    LambdaPolicy, LldAdapter, LoraAlignedModel,
};
use crate::checkpoint::{load_model, restore_named, save_model, Checkpoint};
use crate::classifier::{
    cache_distill_corpus, classifier_auc, distill_separate_model, lst_init_distill,
    match_separate_small_config, plr_train, prepare_examples, separate_large_init,
    train_classifier_generic, ClassifierKind, DistillReport, DistillSettings, LstClassifier,
    RtbClassifier, SafetyClassifier, SeparateGuardrail, TrainSettings,
};
use crate::error::{Error, Result};
use crate::evalsuite::{eval_safety_capability, flop_count, AdapterFlopSpec, SafetyCapabilityScore};
use crate::model::{freeze_checksum, generate_greedy, ModelConfig, TokenId, Transformer};
use crate::optim::{lr_schedule, Optimizer, ScheduleKind};
use crate::rng::{derive_seed, rng_for};
use crate::side::{SideConfig, SideNetwork};
use crate::synthbench::{
    gen_capability_eval, gen_corpus, gen_preference_set, gen_safety_set, gen_unsafe_eval,
    read_jsonl, write_jsonl, CapabilityExample, PreferenceRecord, Vocab,
};
use crate::tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus_n: usize,
    /// Corpus prefix cached for distillation, plus a held-out slice.
    pub distill_corpus_n: usize,
    pub distill_held_out_n: usize,
    pub safety_n: usize,
    pub safety_hardness: f64,
    pub preference_n: usize,
    pub capability_eval_n: usize,
    pub unsafe_eval_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Convergence gate: held-out perplexity must end below this multiple
    /// of the untrained model's perplexity.
    pub ppl_gate_ratio: f64,
    /// Regression gate on greedy copy-task accuracy.
    pub copy_gate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardrailConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr_grid: Vec<f64>,
    pub plr_lr_grid: Vec<f64>,
    pub plr_l2: f64,
    pub rtb_bottleneck: usize,
    pub scale_hidden: usize,
    pub scale_heads: usize,
    pub separate_large_rank: usize,
    pub seeds: usize,
    pub distill: DistillSettings,
    /// Gate calibration: target false-positive rate on validation safe
    /// prompts when picking the unsafe threshold tau.
    pub tau_target_fpr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub dpo_epochs: usize,
    pub dpo_batch: usize,
    pub dpo_beta: f64,
    pub warmup_fraction: f64,
    /// Grid searched for the layer-duplicate adapter on seed 0 and reused
    /// for the remaining seeds.
    pub lld_lr_grid: Vec<f64>,
    /// Single learning rate for the other methods.
    pub fixed_lr: f64,
    pub lld_n_layers: usize,
    pub lld_lora_rank: usize,
    pub lora_baseline_rank: usize,
    pub cross_attn_rank: usize,
    pub lst_plus_pretrain: DistillSettings,
    pub seeds: usize,
    pub lambda_grid: Vec<f64>,
    pub lambda_unsafe: f64,
    pub max_new: usize,
    /// Fraction of preference pairs held out for validation.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub guardrail: GuardrailConfig,
    pub alignment: AlignmentConfig,
}

impl RunConfig {
    /// The configuration the acceptance experiments run at.
    pub fn acceptance_default(seed: u64) -> Self {
        RunConfig {
            seed,
            model: ModelConfig::compact_default(),
            data: DataConfig {
                corpus_n: 2400,
                distill_corpus_n: 1100,
                distill_held_out_n: 100,
                safety_n: 1200,
                safety_hardness: 1.0,
                preference_n: 320,
                capability_eval_n: 150,
                unsafe_eval_n: 120,
            },
            pretrain: PretrainConfig {
                steps: 900,
                batch: 16,
                peak_lr: 1e-3,
                warmup_fraction: 0.1,
                ppl_gate_ratio: 0.8,
                copy_gate: 0.9,
            },
            guardrail: GuardrailConfig {
                epochs: 20,
                patience: 3,
                batch: 32,
                lr_grid: vec![1e-5, 5e-5, 1e-4],
                plr_lr_grid: vec![1e-5, 5e-5, 1e-4, 1e-3],
                plr_l2: 0.01,
                rtb_bottleneck: 32,
                scale_hidden: 16,
                scale_heads: 2,
                separate_large_rank: 32,
                seeds: 3,
                distill: DistillSettings {
                    steps: 900,
                    batch: 16,
                    peak_lr: 6e-4,
                    warmup_fraction: 0.1,
                    seed: 0,
                },
                tau_target_fpr: 0.01,
            },
            alignment: AlignmentConfig {
                dpo_epochs: 10,
                dpo_batch: 32,
                dpo_beta: 0.1,
                warmup_fraction: 0.1,
                lld_lr_grid: vec![5e-5, 1e-4, 5e-4],
                fixed_lr: 5e-4,
                lld_n_layers: 2,
                lld_lora_rank: 32,
                lora_baseline_rank: 16,
                cross_attn_rank: 8,
                lst_plus_pretrain: DistillSettings {
                    steps: 900,
                    batch: 16,
                    peak_lr: 6e-4,
                    warmup_fraction: 0.1,
                    seed: 0,
                },
                seeds: 3,
                lambda_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                lambda_unsafe: 0.0,
                max_new: 30,
                val_fraction: 0.1,
            },
        }
    }

    /// A drastically reduced configuration for determinism and smoke
    /// checks: every stage runs, but quality gates are widened since
    /// nothing can converge at this size.
    pub fn mini(seed: u64) -> Self {
        let mut cfg = Self::acceptance_default(seed);
        cfg.model = ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_ff: 64,
            max_seq_len: 96,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        cfg.data = DataConfig {
            corpus_n: 200,
            distill_corpus_n: 60,
            distill_held_out_n: 20,
            safety_n: 120,
            safety_hardness: 1.0,
            preference_n: 100,
            capability_eval_n: 20,
            unsafe_eval_n: 20,
        };
        cfg.pretrain = PretrainConfig {
            steps: 30,
            batch: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            ppl_gate_ratio: 1.0,
            copy_gate: 0.0,
        };
        cfg.guardrail.epochs = 2;
        cfg.guardrail.lr_grid = vec![1e-4];
        cfg.guardrail.plr_lr_grid = vec![1e-3];
        cfg.guardrail.seeds = 2;
        cfg.guardrail.distill.steps = 20;
        cfg.guardrail.scale_hidden = 4;
        cfg.guardrail.scale_heads = 1;
        cfg.alignment.dpo_epochs = 1;
        cfg.alignment.lld_lr_grid = vec![1e-4];
        cfg.alignment.seeds = 1;
        cfg.alignment.lst_plus_pretrain.steps = 20;
        cfg.alignment.cross_attn_rank = 4;
        cfg.alignment.lld_lora_rank = 8;
        cfg.alignment.lora_baseline_rank = 4;
        cfg.alignment.lambda_grid = vec![0.0, 0.5, 1.0];
        cfg.alignment.max_new = 12;
        cfg
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageRecord {
    pub status: String,
    pub skipped: bool,
    pub input_checksums: BTreeMap<String, String>,
    pub output_checksums: BTreeMap<String, String>,
    pub chosen: serde_json::Value,
    pub training_steps: u64,
    pub wall_seconds: f64,
    pub base_checksum: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> RunManifest {
        std::fs::read_to_string(dir.join("manifest.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn json_checksum<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).unwrap().as_bytes())
}

fn checksum_files(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for n in names {
        out.insert(n.to_string(), file_checksum(&dir.join(n))?);
    }
    Ok(out)
}

fn outputs_present(dir: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| dir.join(n).exists())
}

/// Runs `work` unless the manifest already holds a completed record for
/// `stage` with identical inputs and all outputs still on disk.
fn run_stage(
    dir: &Path,
    manifest: &mut RunManifest,
    stage: &str,
    inputs: BTreeMap<String, String>,
    outputs: &[&str],
    work: impl FnOnce() -> Result<(serde_json::Value, u64, Option<String>)>,
) -> Result<bool> {
    if let Some(rec) = manifest.stages.get(stage) {
        if rec.status == "completed"
            && rec.input_checksums == inputs
            && outputs_present(dir, outputs)
        {
            let stored = checksum_files(dir, outputs)?;
            if stored == rec.output_checksums {
                let mut rec = rec.clone();
                rec.skipped = true;
                rec.training_steps = 0;
                rec.wall_seconds = 0.0;
                manifest.stages.insert(stage.to_string(), rec);
                manifest.save(dir)?;
                return Ok(false);
            }
        }
    }
    let t0 = Instant::now();
    let (chosen, training_steps, base_checksum) = work()?;
    let record = StageRecord {
        status: "completed".to_string(),
        skipped: false,
        input_checksums: inputs,
        output_checksums: checksum_files(dir, outputs)?,
        chosen,
        training_steps,
        wall_seconds: t0.elapsed().as_secs_f64(),
        base_checksum,
    };
    manifest.stages.insert(stage.to_string(), record);
    manifest.save(dir)?;
    Ok(true)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(v)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub untrained_ppl: f64,
    pub held_out_ppl: f64,
    pub copy_accuracy: f64,
    pub base_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardrailRow {
    pub method: String,
    pub auc_per_seed: Vec<f64>,
    pub auc_median: f64,
    pub params: usize,
    pub overhead_percent: f64,
    pub chosen_lr: f64,
    pub chosen_layer: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardrailReport {
    pub rows: Vec<GuardrailRow>,
    pub distill: DistillReport,
    pub tau: f64,
    pub tau_val_fpr: f64,
    pub tau_val_tpr: f64,
    pub base_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodFrontier {
    pub method: String,
    pub chosen_lr: f64,
    pub initial_dpo_loss: f64,
    pub val_reward_margin: f64,
    pub frontier: Vec<FrontierRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetedRow {
    pub method: String,
    pub seed: u64,
    pub tau: f64,
    pub lambda_unsafe: f64,
    pub score: SafetyCapabilityScore,
    /// The matching always-on (fixed lambda 0) score of the same adapter.
    pub always_on: SafetyCapabilityScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub base_score: SafetyCapabilityScore,
    pub methods: Vec<MethodFrontier>,
    /// Per-seed lambda=0 scores of the layer-duplicate adapter.
    pub lld_seed_scores: Vec<SafetyCapabilityScore>,
    pub lld_median_compliance: f64,
    pub lld_median_capability: f64,
    pub targeted: Vec<TargetedRow>,
    pub base_checksum: String,
}

// ---------------------------------------------------------------------------
// Dataset bundle
// ---------------------------------------------------------------------------

pub struct Datasets {
    pub corpus: Vec<Vec<TokenId>>,
    pub safety: crate::synthbench::SafetySplits,
    pub preference: Vec<PreferenceRecord>,
    pub capability_eval: Vec<CapabilityExample>,
    pub unsafe_eval: Vec<CapabilityExample>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    tokens: Vec<TokenId>,
}

pub const DATA_FILES: [&str; 7] = [
    "data/corpus.jsonl",
    "data/safety_train.jsonl",
    "data/safety_val.jsonl",
    "data/safety_test.jsonl",
    "data/preference.jsonl",
    "data/capability_eval.jsonl",
    "data/unsafe_eval.jsonl",
];

fn generate_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let seed = cfg.seed;
    Ok(Datasets {
        corpus: gen_corpus(derive_seed(seed, "data/corpus"), cfg.data.corpus_n),
        safety: gen_safety_set(
            derive_seed(seed, "data/safety"),
            cfg.data.safety_n,
            cfg.data.safety_hardness,
        )?,
        preference: gen_preference_set(
            derive_seed(seed, "data/preference"),
            cfg.data.preference_n,
        )?,
        capability_eval: gen_capability_eval(
            derive_seed(seed, "data/capability_eval"),
            cfg.data.capability_eval_n,
        ),
        unsafe_eval: gen_unsafe_eval(derive_seed(seed, "data/unsafe_eval"), cfg.data.unsafe_eval_n),
    })
}

pub fn write_datasets(dir: &Path, d: &Datasets) -> Result<()> {
    std::fs::create_dir_all(dir.join("data"))?;
    let corpus: Vec<CorpusLine> = d
        .corpus
        .iter()
        .map(|tokens| CorpusLine {
            tokens: tokens.clone(),
        })
        .collect();
    write_jsonl(&dir.join("data/corpus.jsonl"), &corpus)?;
    write_jsonl(&dir.join("data/safety_train.jsonl"), &d.safety.train)?;
    write_jsonl(&dir.join("data/safety_val.jsonl"), &d.safety.val)?;
    write_jsonl(&dir.join("data/safety_test.jsonl"), &d.safety.test)?;
    write_jsonl(&dir.join("data/preference.jsonl"), &d.preference)?;
    write_jsonl(&dir.join("data/capability_eval.jsonl"), &d.capability_eval)?;
    write_jsonl(&dir.join("data/unsafe_eval.jsonl"), &d.unsafe_eval)?;
    Ok(())
}

pub fn load_datasets(dir: &Path) -> Result<Datasets> {
    let corpus: Vec<CorpusLine> = read_jsonl(&dir.join("data/corpus.jsonl"))?;
    Ok(Datasets {
        corpus: corpus.into_iter().map(|c| c.tokens).collect(),
        safety: crate::synthbench::SafetySplits {
            train: read_jsonl(&dir.join("data/safety_train.jsonl"))?,
            val: read_jsonl(&dir.join("data/safety_val.jsonl"))?,
            test: read_jsonl(&dir.join("data/safety_test.jsonl"))?,
        },
        preference: read_jsonl(&dir.join("data/preference.jsonl"))?,
        capability_eval: read_jsonl(&dir.join("data/capability_eval.jsonl"))?,
        unsafe_eval: read_jsonl(&dir.join("data/unsafe_eval.jsonl"))?,
    })
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

fn corpus_nll(model: &Transformer<f32>, corpus: &[Vec<TokenId>]) -> f64 {
    no_grad(|| {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus {
            if seq.len() < 2 {
                continue;
            }
            let trace = model.forward(seq, None, false);
            let targets: Vec<usize> = seq.iter().skip(1).map(|&t| t as usize).collect();
            let logits = trace.logits.slice_rows(0, targets.len());
            let loss = logits.cross_entropy(&targets, None).unwrap().item() as f64;
            total += loss * targets.len() as f64;
            count += targets.len();
        }
        total / count as f64
    })
}

fn copy_accuracy(model: &Transformer<f32>, probes: &[CapabilityExample]) -> f64 {
    let copies: Vec<&CapabilityExample> = probes
        .iter()
        .filter(|e| e.prompt[1] == Vocab::TASK_COPY)
        .collect();
    if copies.is_empty() {
        return 0.0;
    }
    let mut ok = 0usize;
    for ex in &copies {
        let out = generate_greedy(
            model,
            &ex.prompt,
            ex.target.len() + 4,
            Some(Vocab::EOS),
            None,
            None,
        );
        if out[ex.prompt.len()..] == ex.target[..] {
            ok += 1;
        }
    }
    ok as f64 / copies.len() as f64
}

/// Next-token pretraining of the base model; afterwards the base is frozen
/// for every downstream stage.
pub fn pretrain_base(
    model: &Transformer<f32>,
    corpus: &[Vec<TokenId>],
    probes: &[CapabilityExample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainReport, u64)> {
    let held_out_n = (corpus.len() / 20).clamp(20, 200).min(corpus.len() / 2);
    let (train, held_out) = corpus.split_at(corpus.len() - held_out_n);
    let untrained_ppl = corpus_nll(model, held_out).exp();
    let params = model.params();
    let mut opt = Optimizer::adam(params, cfg.peak_lr);
    let mut rng = rng_for(seed, "pretrain/order");
    for step in 0..cfg.steps {
        let lr = lr_schedule(
            ScheduleKind::Cosine,
            step,
            cfg.steps,
            cfg.warmup_fraction,
            cfg.peak_lr,
        );
        opt.set_lr(lr);
        opt.zero_grad();
        let inv = 1.0 / cfg.batch as f32;
        for _ in 0..cfg.batch {
            let i = rand::Rng::gen_range(&mut rng, 0..train.len());
            let seq = &train[i];
            if seq.len() < 2 {
                continue;
            }
            let trace = model.forward(seq, None, false);
            let targets: Vec<usize> = seq.iter().skip(1).map(|&t| t as usize).collect();
            let logits = trace.logits.slice_rows(0, targets.len());
            let loss = logits.cross_entropy(&targets, None)?.scale(inv);
            if !loss.item().is_finite() {
                return Err(Error::Diverged(format!("pretraining loss at step {step}")));
            }
            loss.backward();
        }
        opt.step();
    }
    let held_out_ppl = corpus_nll(model, held_out).exp();
    let copy_acc = copy_accuracy(model, probes);
    if held_out_ppl > cfg.ppl_gate_ratio * untrained_ppl {
        return Err(Error::Diverged(format!(
            "pretraining did not converge: held-out ppl {held_out_ppl:.3} vs untrained {untrained_ppl:.3}"
        )));
    }
    if copy_acc < cfg.copy_gate {
        return Err(Error::Diverged(format!(
            "copy accuracy {copy_acc:.3} below gate {}",
            cfg.copy_gate
        )));
    }
    model.freeze();
    let report = PretrainReport {
        untrained_ppl,
        held_out_ppl,
        copy_accuracy: copy_acc,
        base_checksum: freeze_checksum(&model.named_params()),
    };
    Ok((report, (cfg.steps * cfg.batch) as u64))
}

// ---------------------------------------------------------------------------
// Guardrail experiment
// ---------------------------------------------------------------------------

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn save_side_checkpoint(dir: &Path, side: &SideNetwork<f32>) -> Result<()> {
    let cfg = serde_json::to_value(&side.cfg)?;
    Checkpoint::from_named(cfg, &side.named_params()).save(dir)
}

fn load_side_checkpoint(dir: &Path) -> Result<SideNetwork<f32>> {
    let ckpt = Checkpoint::load(dir)?;
    let cfg: SideConfig = serde_json::from_value(ckpt.config.clone())?;
    let side = SideNetwork::init(cfg, 0);
    restore_named(&ckpt, &side.named_params())?;
    Ok(side)
}

fn lst_classifier_named(clf: &LstClassifier<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut named: Vec<(String, Tensor<f32>)> = clf
        .side
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("side.{n}"), t))
        .collect();
    named.push(("head_w".to_string(), clf.head_w.clone()));
    named.push(("head_b".to_string(), clf.head_b.clone()));
    named
}

pub fn save_lst_classifier(dir: &Path, clf: &LstClassifier<f32>) -> Result<()> {
    let cfg = serde_json::to_value(&clf.side.cfg)?;
    Checkpoint::from_named(cfg, &lst_classifier_named(clf)).save(dir)
}

pub fn load_lst_classifier(dir: &Path) -> Result<LstClassifier<f32>> {
    let ckpt = Checkpoint::load(dir)?;
    let cfg: SideConfig = serde_json::from_value(ckpt.config.clone())?;
    let clf = LstClassifier::from_side(SideNetwork::init(cfg, 0));
    restore_named(&ckpt, &lst_classifier_named(&clf))?;
    Ok(clf)
}

/// Calibrates the gating threshold: the smallest tau whose false-positive
/// rate on validation safe prompts is at or below the target.
fn calibrate_tau(safe_scores: &[f64], target_fpr: f64) -> f64 {
    let mut sorted = safe_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let allowed = (target_fpr * n as f64).floor() as usize;
    let idx = n.saturating_sub(allowed + 1);
    (sorted[idx] + 1e-6).clamp(1e-9, 1.0 - 1e-9)
}

struct GuardrailOutcome {
    report: GuardrailReport,
    steps: u64,
}

fn run_guardrail_experiment(
    dir: &Path,
    base: &Transformer<f32>,
    data: &Datasets,
    cfg: &RunConfig,
) -> Result<GuardrailOutcome> {
    let g = &cfg.guardrail;
    let before = freeze_checksum(&base.named_params());
    let mut steps_total = 0u64;

    // Cache taps once; every disentangled adapter trains on them with no
    // further base passes.
    let train = prepare_examples(base, &data.safety.train, true);
    let val = prepare_examples(base, &data.safety.val, true);
    let test = prepare_examples(base, &data.safety.test, true);

    // Distill the side network once; the alignment stage forks it.
    let distill_all = cache_distill_corpus(
        base,
        &data.corpus
            [..(cfg.data.distill_corpus_n + cfg.data.distill_held_out_n).min(data.corpus.len())],
    );
    let (distill_train, distill_held) = distill_all
        .split_at(distill_all.len() - cfg.data.distill_held_out_n.min(distill_all.len() / 2));
    let side_cfg = SideConfig::from_base(&base.cfg, g.scale_hidden, g.scale_heads, None);
    let mut distill_settings = g.distill.clone();
    distill_settings.seed = derive_seed(cfg.seed, "guardrail/distill");
    let (side, distill_report) = lst_init_distill(
        base,
        side_cfg.clone(),
        distill_train,
        distill_held,
        &distill_settings,
    );
    steps_total += g.distill.steps as u64;
    save_side_checkpoint(&dir.join("ckpt/side_distilled"), &side)?;
    let side_snapshot: Vec<Vec<f32>> = side.params().iter().map(|p| p.to_vec()).collect();
    let restore_side = |s: &SideNetwork<f32>| {
        for (p, snap) in s.params().iter().zip(&side_snapshot) {
            p.data_mut().copy_from_slice(snap);
        }
    };

    let mut rows: Vec<GuardrailRow> = Vec::new();
    let test_auc = |clf: &SafetyClassifier<f32>| classifier_auc(clf, base, &test);

    // Logistic-regression probes: per-layer sweep with the extended grid.
    {
        let mut aucs = Vec::new();
        let mut chosen_lr = 0.0;
        let mut chosen_layer = None;
        for s in 0..g.seeds {
            let settings = TrainSettings {
                epochs: g.epochs,
                patience: g.patience,
                batch: g.batch,
                lr_grid: g.plr_lr_grid.clone(),
                seed: derive_seed(cfg.seed, &format!("guardrail/plr/{s}")),
            };
            let (clf, report, layer) = plr_train(&base.cfg, &train, &val, &settings, g.plr_l2)?;
            steps_total += (g.epochs * train.len() / g.batch) as u64;
            if s == 0 {
                chosen_lr = report.chosen_lr;
                chosen_layer = Some(layer);
            }
            aucs.push(test_auc(&clf)?);
        }
        rows.push(GuardrailRow {
            method: "dsa_plr".into(),
            auc_median: median(&aucs),
            auc_per_seed: aucs,
            params: base.cfg.d_model + 1,
            overhead_percent: flop_count(&base.cfg, Some(&AdapterFlopSpec::Plr), 64)
                .overhead_percent,
            chosen_lr,
            chosen_layer,
        });
    }

    // Bottleneck bypass.
    {
        let mut aucs = Vec::new();
        let mut chosen_lr = 0.0;
        let mut params = 0usize;
        let mut lr_grid = g.lr_grid.clone();
        for s in 0..g.seeds {
            let seed = derive_seed(cfg.seed, &format!("guardrail/rtb/{s}"));
            let settings = TrainSettings {
                epochs: g.epochs,
                patience: g.patience,
                batch: g.batch,
                lr_grid: lr_grid.clone(),
                seed,
            };
            let d = base.cfg.d_model;
            let n_layers = base.cfg.n_layers;
            let bneck = g.rtb_bottleneck;
            let mut make = move |s: u64| {
                let mut rng = rng_for(s, "rtb/init");
                SafetyClassifier::Rtb(RtbClassifier::init(&mut rng, d, n_layers, bneck))
            };
            let (clf, report) =
                train_classifier_generic(&mut make, &train, &val, &settings, None)?;
            steps_total += (g.epochs * train.len() / g.batch) as u64;
            if s == 0 {
                chosen_lr = report.chosen_lr;
                // Grid searched once; later seeds reuse the winner.
                lr_grid = vec![chosen_lr];
                params = clf.params().iter().map(|p| p.numel()).sum();
            }
            aucs.push(test_auc(&clf)?);
        }
        rows.push(GuardrailRow {
            method: "dsa_rtb".into(),
            auc_median: median(&aucs),
            auc_per_seed: aucs,
            params,
            overhead_percent: flop_count(
                &base.cfg,
                Some(&AdapterFlopSpec::Rtb {
                    bottleneck: g.rtb_bottleneck,
                }),
                64,
            )
            .overhead_percent,
            chosen_lr,
            chosen_layer: None,
        });
    }

    // Ladder side network: distilled init, everything trainable.
    let mut lst_params = 0usize;
    let mut best_lst: Option<(f64, LstClassifier<f32>)> = None;
    {
        let mut aucs = Vec::new();
        let mut chosen_lr = 0.0;
        let mut lr_grid = g.lr_grid.clone();
        for s in 0..g.seeds {
            let seed = derive_seed(cfg.seed, &format!("guardrail/lst/{s}"));
            let settings = TrainSettings {
                epochs: g.epochs,
                patience: g.patience,
                batch: g.batch,
                lr_grid: lr_grid.clone(),
                seed,
            };
            let side_cfg2 = side_cfg.clone();
            let restore = &restore_side;
            let mut make = move |_s: u64| {
                let fresh = SideNetwork::init(side_cfg2.clone(), 0);
                restore(&fresh);
                SafetyClassifier::Lst(LstClassifier::from_side(fresh))
            };
            let (clf, report) =
                train_classifier_generic(&mut make, &train, &val, &settings, None)?;
            steps_total += (g.epochs * train.len() / g.batch) as u64;
            if s == 0 {
                chosen_lr = report.chosen_lr;
                lr_grid = vec![chosen_lr];
                lst_params = clf.params().iter().map(|p| p.numel()).sum();
            }
            let auc_s = test_auc(&clf)?;
            aucs.push(auc_s);
            if let SafetyClassifier::Lst(l) = clf {
                if best_lst.as_ref().map_or(true, |(a, _)| auc_s > *a) {
                    best_lst = Some((auc_s, l));
                }
            }
        }
        rows.push(GuardrailRow {
            method: "dsa_lst".into(),
            auc_median: median(&aucs),
            auc_per_seed: aucs,
            params: lst_params,
            overhead_percent: flop_count(
                &base.cfg,
                Some(&AdapterFlopSpec::Lst {
                    scale_hidden: g.scale_hidden,
                    scale_heads: g.scale_heads,
                }),
                64,
            )
            .overhead_percent,
            chosen_lr,
            chosen_layer: None,
        });
    }

    // Separate small: parameter-matched standalone model, distilled then
    // fully fine-tuned on raw tokens.
    {
        let small_cfg = match_separate_small_config(&base.cfg, lst_params)?;
        let mut dsettings = g.distill.clone();
        dsettings.seed = derive_seed(cfg.seed, "guardrail/separate_small/distill");
        let small_base =
            distill_separate_model::<f32>(small_cfg.clone(), distill_train, &dsettings);
        steps_total += g.distill.steps as u64;
        let small_snapshot: Vec<Vec<f32>> =
            small_base.params().iter().map(|p| p.to_vec()).collect();

        let small_train = prepare_examples(base, &data.safety.train, false);
        let small_val = prepare_examples(base, &data.safety.val, false);
        let small_test = prepare_examples(base, &data.safety.test, false);

        let mut aucs = Vec::new();
        let mut chosen_lr = 0.0;
        let mut params = 0usize;
        let mut lr_grid = g.lr_grid.clone();
        for s in 0..g.seeds {
            let seed = derive_seed(cfg.seed, &format!("guardrail/separate_small/{s}"));
            let settings = TrainSettings {
                epochs: g.epochs,
                patience: g.patience,
                batch: g.batch,
                lr_grid: lr_grid.clone(),
                seed,
            };
            let small_cfg2 = small_cfg.clone();
            let snap = &small_snapshot;
            let mut make = move |_s: u64| {
                let fresh: Transformer<f32> = Transformer::init(small_cfg2.clone(), 0);
                for (p, sv) in fresh.params().iter().zip(snap) {
                    p.data_mut().copy_from_slice(sv);
                }
                SafetyClassifier::Separate {
                    guard: SeparateGuardrail::from_model(fresh),
                    kind: ClassifierKind::SeparateSmall,
                }
            };
            let (clf, report) =
                train_classifier_generic(&mut make, &small_train, &small_val, &settings, None)?;
            steps_total += (g.epochs * train.len() / g.batch) as u64;
            if s == 0 {
                chosen_lr = report.chosen_lr;
                lr_grid = vec![chosen_lr];
                params = clf.params().iter().map(|p| p.numel()).sum();
            }
            aucs.push(classifier_auc(&clf, base, &small_test)?);
        }
        rows.push(GuardrailRow {
            method: "separate_small".into(),
            auc_median: median(&aucs),
            auc_per_seed: aucs,
            params,
            overhead_percent: 100.0 * flop_count(&small_cfg, None, 64).base_flops as f64
                / flop_count(&base.cfg, None, 64).base_flops as f64,
            chosen_lr,
            chosen_layer: None,
        });
    }

    // Separate large: the base cloned with low-rank deltas everywhere; a
    // full extra model pass at inference. Single seed (stable and costly).
    {
        let large_train = prepare_examples(base, &data.safety.train, false);
        let large_val = prepare_examples(base, &data.safety.val, false);
        let large_test = prepare_examples(base, &data.safety.test, false);
        let seed = derive_seed(cfg.seed, "guardrail/separate_large/0");
        let settings = TrainSettings {
            epochs: g.epochs,
            patience: g.patience,
            batch: g.batch,
            lr_grid: g.lr_grid.clone(),
            seed,
        };
        let rank = g.separate_large_rank;
        let mut make = |s: u64| SafetyClassifier::Separate {
            guard: separate_large_init(base, rank, s),
            kind: ClassifierKind::SeparateLarge,
        };
        let (clf, report) =
            train_classifier_generic(&mut make, &large_train, &large_val, &settings, None)?;
        steps_total += (g.epochs * train.len() / g.batch * g.lr_grid.len()) as u64;
        let auc_l = classifier_auc(&clf, base, &large_test)?;
        rows.push(GuardrailRow {
            method: "separate_large".into(),
            auc_median: auc_l,
            auc_per_seed: vec![auc_l],
            params: clf.params().iter().map(|p| p.numel()).sum(),
            overhead_percent: 100.0,
            chosen_lr: report.chosen_lr,
            chosen_layer: None,
        });
    }

    // Persist the strongest LST classifier and calibrate its gate.
    let (_, lst_clf) = best_lst.expect("at least one LST seed ran");
    let wrapped = SafetyClassifier::Lst(lst_clf);
    let mut safe_scores = Vec::new();
    let mut unsafe_scores = Vec::new();
    for ex in &val {
        let s = wrapped.score_taps(ex.taps.as_ref().unwrap(), None).0;
        if ex.label == 1 {
            unsafe_scores.push(s);
        } else {
            safe_scores.push(s);
        }
    }
    let tau = calibrate_tau(&safe_scores, g.tau_target_fpr);
    let tau_val_fpr =
        safe_scores.iter().filter(|&&s| s >= tau).count() as f64 / safe_scores.len() as f64;
    let tau_val_tpr =
        unsafe_scores.iter().filter(|&&s| s >= tau).count() as f64 / unsafe_scores.len() as f64;
    let SafetyClassifier::Lst(lst_clf) = wrapped else {
        unreachable!()
    };
    save_lst_classifier(&dir.join("ckpt/lst_classifier"), &lst_clf)?;

    let after = freeze_checksum(&base.named_params());
    if before != after {
        return Err(Error::ArtifactMismatch(
            "base checksum changed during guardrail training".to_string(),
        ));
    }
    Ok(GuardrailOutcome {
        report: GuardrailReport {
            rows,
            distill: distill_report,
            tau,
            tau_val_fpr,
            tau_val_tpr,
            base_checksum: after,
        },
        steps: steps_total,
    })
}

fn guardrail_csv(report: &GuardrailReport) -> String {
    let mut s = String::from("method,auc_median,params,overhead_percent,chosen_lr\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6e}\n",
            r.method, r.auc_median, r.params, r.overhead_percent, r.chosen_lr
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Alignment experiment
// ---------------------------------------------------------------------------

fn eval_adapter_fixed(
    base: &Transformer<f32>,
    adapter: &AlignmentAdapter<f32>,
    lambda: f64,
    data: &Datasets,
    max_new: usize,
) -> SafetyCapabilityScore {
    let policy = LambdaPolicy::Fixed { lambda };
    eval_safety_capability(
        |p| targeted_generate_traced(base, adapter, &policy, p, max_new, None).0,
        &data.unsafe_eval,
        &data.capability_eval,
    )
}

struct AlignmentOutcome {
    report: AlignmentReport,
    steps: u64,
}

fn run_alignment_experiment(
    dir: &Path,
    base: &Transformer<f32>,
    data: &Datasets,
    cfg: &RunConfig,
) -> Result<AlignmentOutcome> {
    let a = &cfg.alignment;
    let before = freeze_checksum(&base.named_params());
    let mut steps_total = 0u64;

    let base_score = eval_safety_capability(
        |p| generate_greedy(base, p, a.max_new, Some(Vocab::EOS), None, None),
        &data.unsafe_eval,
        &data.capability_eval,
    );

    // Split preference pairs and cache everything the frozen base
    // contributes.
    let n_val = ((data.preference.len() as f64 * a.val_fraction) as usize).max(8);
    let (train_recs, val_recs) = data.preference.split_at(data.preference.len() - n_val);
    let mut tap_train = crate::alignment::prepare_dpo_examples(base, train_recs, true);
    let mut tap_val = crate::alignment::prepare_dpo_examples(base, val_recs, true);
    let mut tok_train = crate::alignment::prepare_dpo_examples(base, train_recs, false);
    let mut tok_val = crate::alignment::prepare_dpo_examples(base, val_recs, false);

    let distilled_side = load_side_checkpoint(&dir.join("ckpt/side_distilled"))?;

    // Cross-attention side network pretrained with next-token prediction
    // at the blend it will be used at.
    let lst_plus_side = {
        let side_cfg = SideConfig::from_base(
            &base.cfg,
            cfg.guardrail.scale_hidden,
            cfg.guardrail.scale_heads,
            Some(a.cross_attn_rank),
        );
        let distill_all = cache_distill_corpus(
            base,
            &data.corpus[..(cfg.data.distill_corpus_n + cfg.data.distill_held_out_n)
                .min(data.corpus.len())],
        );
        let mut settings = a.lst_plus_pretrain.clone();
        settings.seed = derive_seed(cfg.seed, "alignment/lst_plus_pretrain");
        let side = lst_plus_pretrain(base, side_cfg, &distill_all, &settings);
        steps_total += settings.steps as u64;
        side
    };

    let mut methods: Vec<MethodFrontier> = Vec::new();
    let mut lld_seed_scores: Vec<SafetyCapabilityScore> = Vec::new();
    let mut targeted_rows: Vec<TargetedRow> = Vec::new();

    let classifier = std::rc::Rc::new(SafetyClassifier::Lst(load_lst_classifier(
        &dir.join("ckpt/lst_classifier"),
    )?));
    let guardrail_report: GuardrailReport = read_json(&dir.join("guardrail_report.json"))?;
    let tau = guardrail_report.tau;

    // Full-model low-rank baseline.
    {
        let adapter = AlignmentAdapter::LoraBaseline(LoraAlignedModel::init(
            base,
            a.lora_baseline_rank,
            derive_seed(cfg.seed, "alignment/lora/0"),
        ));
        let settings = DpoSettings {
            epochs: a.dpo_epochs,
            batch: a.dpo_batch,
            lr_grid: vec![a.fixed_lr],
            beta: a.dpo_beta,
            warmup_fraction: a.warmup_fraction,
            seed: derive_seed(cfg.seed, "alignment/lora/dpo/0"),
        };
        let report = train_dpo(&adapter, base, &mut tok_train, &mut tok_val, 0.0, &settings)?;
        steps_total += (a.dpo_epochs * tok_train.len() / a.dpo_batch) as u64;
        let frontier = lambda_sweep(
            base,
            &adapter,
            &data.unsafe_eval,
            &data.capability_eval,
            &a.lambda_grid,
            a.max_new,
        );
        methods.push(MethodFrontier {
            method: "lora_baseline".into(),
            chosen_lr: report.chosen_lr,
            initial_dpo_loss: report.initial_train_loss,
            val_reward_margin: report.val_reward_margin,
            frontier,
        });
    }

    // Plain side network, forked from the shared distilled init.
    {
        let adapter = AlignmentAdapter::LstGen {
            side: fork_side(&distilled_side),
        };
        let settings = DpoSettings {
            epochs: a.dpo_epochs,
            batch: a.dpo_batch,
            lr_grid: vec![a.fixed_lr],
            beta: a.dpo_beta,
            warmup_fraction: a.warmup_fraction,
            seed: derive_seed(cfg.seed, "alignment/lst_gen/dpo/0"),
        };
        let report = train_dpo(&adapter, base, &mut tap_train, &mut tap_val, 0.0, &settings)?;
        steps_total += (a.dpo_epochs * tap_train.len() / a.dpo_batch) as u64;
        let frontier = lambda_sweep(
            base,
            &adapter,
            &data.unsafe_eval,
            &data.capability_eval,
            &a.lambda_grid,
            a.max_new,
        );
        methods.push(MethodFrontier {
            method: "lst_gen".into(),
            chosen_lr: report.chosen_lr,
            initial_dpo_loss: report.initial_train_loss,
            val_reward_margin: report.val_reward_margin,
            frontier,
        });
    }

    // Cross-attention side network, trained at lambda 0.5; also evaluated
    // gated.
    {
        let adapter = AlignmentAdapter::LstPlus {
            side: fork_side(&lst_plus_side),
        };
        let settings = DpoSettings {
            epochs: a.dpo_epochs,
            batch: a.dpo_batch,
            lr_grid: vec![a.fixed_lr],
            beta: a.dpo_beta,
            warmup_fraction: a.warmup_fraction,
            seed: derive_seed(cfg.seed, "alignment/lst_plus/dpo/0"),
        };
        let report = train_dpo(&adapter, base, &mut tap_train, &mut tap_val, 0.5, &settings)?;
        steps_total += (a.dpo_epochs * tap_train.len() / a.dpo_batch) as u64;
        let frontier = lambda_sweep(
            base,
            &adapter,
            &data.unsafe_eval,
            &data.capability_eval,
            &a.lambda_grid,
            a.max_new,
        );
        let always_on = SafetyCapabilityScore {
            unsafe_compliance_rate: frontier[0].unsafe_compliance_rate,
            refusal_rate_on_safe: frontier[0].refusal_rate_on_safe,
            capability_accuracy: frontier[0].capability_accuracy,
        };
        methods.push(MethodFrontier {
            method: "lst_plus".into(),
            chosen_lr: report.chosen_lr,
            initial_dpo_loss: report.initial_train_loss,
            val_reward_margin: report.val_reward_margin,
            frontier,
        });

        let policy = LambdaPolicy::GatedStep {
            classifier: classifier.clone(),
            tau,
            lambda_unsafe: a.lambda_unsafe,
        };
        let score = eval_safety_capability(
            |p| targeted_generate_traced(base, &adapter, &policy, p, a.max_new, None).0,
            &data.unsafe_eval,
            &data.capability_eval,
        );
        targeted_rows.push(TargetedRow {
            method: "lst_plus_targeted".into(),
            seed: 0,
            tau,
            lambda_unsafe: a.lambda_unsafe,
            score,
            always_on,
        });
        save_adapter(&dir.join("ckpt/align_lst_plus"), &adapter, &base.cfg)?;
    }

    // Layer-duplicate adapter: multi-seed, grid-searched on seed 0.
    {
        let mut lr_grid = a.lld_lr_grid.clone();
        let mut frontier0 = Vec::new();
        let mut chosen_lr = 0.0;
        let mut init_loss = 0.0;
        let mut margin = 0.0;
        for s in 0..a.seeds {
            let adapter = AlignmentAdapter::Lld(LldAdapter::init(
                base,
                a.lld_n_layers,
                a.lld_lora_rank,
                derive_seed(cfg.seed, &format!("alignment/lld/{s}")),
            ));
            let settings = DpoSettings {
                epochs: a.dpo_epochs,
                batch: a.dpo_batch,
                lr_grid: lr_grid.clone(),
                beta: a.dpo_beta,
                warmup_fraction: a.warmup_fraction,
                seed: derive_seed(cfg.seed, &format!("alignment/lld/dpo/{s}")),
            };
            let report = train_dpo(&adapter, base, &mut tap_train, &mut tap_val, 0.0, &settings)?;
            steps_total += (a.dpo_epochs * tap_train.len() / a.dpo_batch * lr_grid.len()) as u64;
            if s == 0 {
                chosen_lr = report.chosen_lr;
                lr_grid = vec![chosen_lr];
                init_loss = report.initial_train_loss;
                margin = report.val_reward_margin;
                frontier0 = lambda_sweep(
                    base,
                    &adapter,
                    &data.unsafe_eval,
                    &data.capability_eval,
                    &a.lambda_grid,
                    a.max_new,
                );
                save_adapter(&dir.join("ckpt/align_lld"), &adapter, &base.cfg)?;
            }
            let always_on = eval_adapter_fixed(base, &adapter, 0.0, data, a.max_new);
            lld_seed_scores.push(always_on.clone());

            let policy = LambdaPolicy::GatedStep {
                classifier: classifier.clone(),
                tau,
                lambda_unsafe: a.lambda_unsafe,
            };
            let score = eval_safety_capability(
                |p| targeted_generate_traced(base, &adapter, &policy, p, a.max_new, None).0,
                &data.unsafe_eval,
                &data.capability_eval,
            );
            targeted_rows.push(TargetedRow {
                method: "lld_targeted".into(),
                seed: s as u64,
                tau,
                lambda_unsafe: a.lambda_unsafe,
                score,
                always_on,
            });
        }
        methods.push(MethodFrontier {
            method: "lld".into(),
            chosen_lr,
            initial_dpo_loss: init_loss,
            val_reward_margin: margin,
            frontier: frontier0,
        });
    }

    let lld_median_compliance = median(
        &lld_seed_scores
            .iter()
            .map(|s| s.unsafe_compliance_rate)
            .collect::<Vec<_>>(),
    );
    let lld_median_capability = median(
        &lld_seed_scores
            .iter()
            .map(|s| s.capability_accuracy)
            .collect::<Vec<_>>(),
    );

    let after = freeze_checksum(&base.named_params());
    if before != after {
        return Err(Error::ArtifactMismatch(
            "base checksum changed during alignment training".to_string(),
        ));
    }
    Ok(AlignmentOutcome {
        report: AlignmentReport {
            base_score,
            methods,
            lld_seed_scores,
            lld_median_compliance,
            lld_median_capability,
            targeted: targeted_rows,
            base_checksum: after,
        },
        steps: steps_total,
    })
}

/// Deep copy of a side network (fresh parameter buffers).
fn fork_side(side: &SideNetwork<f32>) -> SideNetwork<f32> {
    let fresh = SideNetwork::init(side.cfg.clone(), 0);
    for (p, src) in fresh.params().iter().zip(side.params()) {
        p.data_mut().copy_from_slice(&src.data());
    }
    fresh
}

/// Next-token pretraining of the cross-attention side network at the blend
/// it trains under (mean of base and side logits).
pub fn lst_plus_pretrain(
    base: &Transformer<f32>,
    side_cfg: SideConfig,
    corpus: &[crate::classifier::DistillExample<f32>],
    settings: &DistillSettings,
) -> SideNetwork<f32> {
    let side = SideNetwork::init(side_cfg, settings.seed);
    let head = base.lm_head.as_ref().unwrap_or(&base.embed).clone();
    let params = side.params();
    let mut opt = Optimizer::adam(params, settings.peak_lr);
    let mut rng = rng_for(settings.seed, "lst_plus_pretrain/order");
    for step in 0..settings.steps {
        let lr = lr_schedule(
            ScheduleKind::Cosine,
            step,
            settings.steps,
            settings.warmup_fraction,
            settings.peak_lr,
        );
        opt.set_lr(lr);
        opt.zero_grad();
        let inv = 1.0 / settings.batch as f32;
        for _ in 0..settings.batch {
            let i = rand::Rng::gen_range(&mut rng, 0..corpus.len());
            let ex = &corpus[i];
            if ex.tokens.len() < 2 {
                continue;
            }
            let z_side = side.logits(&side.forward_full(&ex.taps.full), &head);
            let z = crate::alignment::interpolate_logits(&ex.teacher_logits, &z_side, 0.5);
            let targets: Vec<usize> = ex.tokens.iter().skip(1).map(|&t| t as usize).collect();
            let logits = z.slice_rows(0, targets.len());
            let loss = logits.cross_entropy(&targets, None).unwrap().scale(inv);
            assert!(
                loss.item().is_finite(),
                "cross-attention pretraining diverged"
            );
            loss.backward();
        }
        opt.step();
    }
    side
}

fn frontier_csv(report: &AlignmentReport) -> String {
    let mut s = String::from(
        "method,lambda,capability_accuracy,unsafe_compliance_rate,refusal_rate_on_safe\n",
    );
    for m in &report.methods {
        for r in &m.frontier {
            s.push_str(&format!(
                "{},{:.2},{:.6},{:.6},{:.6}\n",
                m.method,
                r.lambda,
                r.capability_accuracy,
                r.unsafe_compliance_rate,
                r.refusal_rate_on_safe
            ));
        }
    }
    s
}


// ---------------------------------------------------------------------------
// Alignment adapter checkpoints
// ---------------------------------------------------------------------------

fn adapter_named(adapter: &AlignmentAdapter<f32>) -> Vec<(String, Tensor<f32>)> {
    match adapter {
        AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => side
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("side.{n}"), t))
            .collect(),
        AlignmentAdapter::Lld(lld) => {
            let mut out = Vec::new();
            for (i, b) in lld.blocks.iter().enumerate() {
                for (name, lin) in [
                    ("wq", &b.wq),
                    ("wk", &b.wk),
                    ("wv", &b.wv),
                    ("wo", &b.wo),
                    ("w_gate", &b.w_gate),
                    ("w_up", &b.w_up),
                    ("w_down", &b.w_down),
                ] {
                    let l = lin.lora.as_ref().expect("lld blocks carry deltas");
                    out.push((format!("blocks.{i}.{name}.lora_a"), l.a.clone()));
                    out.push((format!("blocks.{i}.{name}.lora_b"), l.b.clone()));
                }
            }
            out
        }
        AlignmentAdapter::LoraBaseline(lora) => {
            let mut out = Vec::new();
            for (i, b) in lora.model.layers.iter().enumerate() {
                for (name, lin) in [
                    ("wq", &b.wq),
                    ("wk", &b.wk),
                    ("wv", &b.wv),
                    ("wo", &b.wo),
                    ("w_gate", &b.w_gate),
                    ("w_up", &b.w_up),
                    ("w_down", &b.w_down),
                ] {
                    let l = lin.lora.as_ref().expect("baseline blocks carry deltas");
                    out.push((format!("layers.{i}.{name}.lora_a"), l.a.clone()));
                    out.push((format!("layers.{i}.{name}.lora_b"), l.b.clone()));
                }
            }
            out
        }
    }
}

/// Digest of a base model's configuration, stored inside adapter
/// checkpoints so mismatched pairings are detected at load time.
pub fn base_config_hash(base_cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(base_cfg).unwrap().as_bytes())
}

pub fn save_adapter(dir: &Path, adapter: &AlignmentAdapter<f32>, base_cfg: &ModelConfig) -> Result<()> {
    let mut config = match adapter {
        AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => {
            serde_json::json!({"kind": adapter.kind().name(), "side": serde_json::to_value(&side.cfg)?})
        }
        AlignmentAdapter::Lld(lld) => {
            let rank = lld.blocks[0].wq.lora.as_ref().unwrap().a.cols();
            serde_json::json!({"kind": "lld", "n_dup": lld.blocks.len(), "lora_rank": rank})
        }
        AlignmentAdapter::LoraBaseline(lora) => {
            let rank = lora.model.layers[0].wq.lora.as_ref().unwrap().a.cols();
            serde_json::json!({"kind": "lora_baseline", "lora_rank": rank})
        }
    };
    config["base_config_hash"] = serde_json::Value::String(base_config_hash(base_cfg));
    Checkpoint::from_named(config, &adapter_named(adapter)).save(dir)
}

pub fn load_adapter(dir: &Path, base: &Transformer<f32>) -> Result<AlignmentAdapter<f32>> {
    let ckpt = Checkpoint::load(dir)?;
    let stored_hash = ckpt.config["base_config_hash"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    if stored_hash != base_config_hash(&base.cfg) {
        return Err(Error::ArtifactMismatch(
            "adapter checkpoint was trained against a different base configuration".to_string(),
        ));
    }
    let kind = ckpt.config["kind"].as_str().unwrap_or_default().to_string();
    let adapter = match kind.as_str() {
        "lst_gen" | "lst_plus" => {
            let side_cfg: SideConfig = serde_json::from_value(ckpt.config["side"].clone())?;
            let side = SideNetwork::init(side_cfg, 0);
            if kind == "lst_gen" {
                AlignmentAdapter::LstGen { side }
            } else {
                AlignmentAdapter::LstPlus { side }
            }
        }
        "lld" => {
            let n_dup = ckpt.config["n_dup"].as_u64().unwrap_or(1) as usize;
            let rank = ckpt.config["lora_rank"].as_u64().unwrap_or(8) as usize;
            AlignmentAdapter::Lld(LldAdapter::init(base, n_dup, rank, 0))
        }
        "lora_baseline" => {
            let rank = ckpt.config["lora_rank"].as_u64().unwrap_or(8) as usize;
            AlignmentAdapter::LoraBaseline(LoraAlignedModel::init(base, rank, 0))
        }
        other => {
            return Err(Error::ArtifactMismatch(format!(
                "unknown adapter kind {other:?}"
            )))
        }
    };
    restore_named(&ckpt, &adapter_named(&adapter))?;
    Ok(adapter)
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

pub struct PipelineOutputs {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub pretrain: PretrainReport,
    pub guardrail: GuardrailReport,
    pub alignment: AlignmentReport,
}

pub const REPORT_FILES: [&str; 5] = [
    "pretrain_report.json",
    "guardrail_report.json",
    "guardrail_report.csv",
    "alignment_report.json",
    "frontier.csv",
];

/// How far into the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageLimit {
    GenData,
    Pretrain,
    Guardrail,
    Alignment,
}

pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<PipelineOutputs> {
    match run_until(cfg, dir, StageLimit::Alignment)? {
        Some(out) => Ok(out),
        None => unreachable!("full run always yields outputs"),
    }
}

/// Runs stages in order up to `limit`. Returns the full outputs only when
/// the alignment stage is included.
pub fn run_until(cfg: &RunConfig, dir: &Path, limit: StageLimit) -> Result<Option<PipelineOutputs>> {
    cfg.model.validate_for_benchmark()?;
    std::fs::create_dir_all(dir.join("ckpt"))?;
    let mut manifest = RunManifest::load(dir);

    // Stage: data generation.
    let data_inputs = BTreeMap::from([
        ("config.data".to_string(), json_checksum(&cfg.data)),
        ("config.seed".to_string(), cfg.seed.to_string()),
    ]);
    run_stage(dir, &mut manifest, "gen_data", data_inputs, &DATA_FILES, || {
        let d = generate_datasets(cfg)?;
        write_datasets(dir, &d)?;
        Ok((serde_json::json!({}), 0, None))
    })?;
    if limit == StageLimit::GenData {
        return Ok(None);
    }
    let data = load_datasets(dir)?;

    // Stage: base pretraining.
    let pretrain_inputs = BTreeMap::from([
        ("config.model".to_string(), json_checksum(&cfg.model)),
        ("config.pretrain".to_string(), json_checksum(&cfg.pretrain)),
        ("config.seed".to_string(), cfg.seed.to_string()),
        (
            "data/corpus.jsonl".to_string(),
            file_checksum(&dir.join("data/corpus.jsonl"))?,
        ),
    ]);
    let pretrain_outputs = [
        "ckpt/base/manifest.json",
        "ckpt/base/weights.bin",
        "pretrain_report.json",
    ];
    run_stage(
        dir,
        &mut manifest,
        "pretrain",
        pretrain_inputs,
        &pretrain_outputs,
        || {
            let model =
                Transformer::init(cfg.model.clone(), derive_seed(cfg.seed, "pretrain/init"));
            let (report, steps) = pretrain_base(
                &model,
                &data.corpus,
                &data.capability_eval,
                &cfg.pretrain,
                derive_seed(cfg.seed, "pretrain/train"),
            )?;
            save_model(&dir.join("ckpt/base"), &model)?;
            write_json(&dir.join("pretrain_report.json"), &report)?;
            Ok((
                serde_json::json!({"held_out_ppl": report.held_out_ppl}),
                steps,
                Some(report.base_checksum.clone()),
            ))
        },
    )?;
    let pretrain_report: PretrainReport = read_json(&dir.join("pretrain_report.json"))?;
    let base = load_model(&dir.join("ckpt/base"))?;
    base.freeze();
    let base_checksum = freeze_checksum(&base.named_params());
    if base_checksum != pretrain_report.base_checksum {
        return Err(Error::ArtifactMismatch(
            "reloaded base checksum differs from the pretraining record".to_string(),
        ));
    }
    if limit == StageLimit::Pretrain {
        return Ok(None);
    }

    // Stage: guardrail experiment.
    let guardrail_inputs = BTreeMap::from([
        (
            "config.guardrail".to_string(),
            json_checksum(&cfg.guardrail),
        ),
        ("config.data".to_string(), json_checksum(&cfg.data)),
        ("config.seed".to_string(), cfg.seed.to_string()),
        ("base".to_string(), base_checksum.clone()),
        (
            "data/safety_train.jsonl".to_string(),
            file_checksum(&dir.join("data/safety_train.jsonl"))?,
        ),
    ]);
    let guardrail_outputs = [
        "guardrail_report.json",
        "guardrail_report.csv",
        "ckpt/lst_classifier/manifest.json",
        "ckpt/lst_classifier/weights.bin",
        "ckpt/side_distilled/manifest.json",
        "ckpt/side_distilled/weights.bin",
    ];
    run_stage(
        dir,
        &mut manifest,
        "guardrail",
        guardrail_inputs,
        &guardrail_outputs,
        || {
            let outcome = run_guardrail_experiment(dir, &base, &data, cfg)?;
            write_json(&dir.join("guardrail_report.json"), &outcome.report)?;
            std::fs::write(
                dir.join("guardrail_report.csv"),
                guardrail_csv(&outcome.report),
            )?;
            Ok((
                serde_json::json!({"tau": outcome.report.tau}),
                outcome.steps,
                Some(outcome.report.base_checksum.clone()),
            ))
        },
    )?;
    let guardrail_report: GuardrailReport = read_json(&dir.join("guardrail_report.json"))?;
    if limit == StageLimit::Guardrail {
        return Ok(None);
    }

    // Stage: alignment experiment.
    let alignment_inputs = BTreeMap::from([
        (
            "config.alignment".to_string(),
            json_checksum(&cfg.alignment),
        ),
        ("config.seed".to_string(), cfg.seed.to_string()),
        ("base".to_string(), base_checksum.clone()),
        (
            "classifier".to_string(),
            file_checksum(&dir.join("ckpt/lst_classifier/weights.bin"))?,
        ),
        (
            "data/preference.jsonl".to_string(),
            file_checksum(&dir.join("data/preference.jsonl"))?,
        ),
    ]);
    let alignment_outputs = [
        "alignment_report.json",
        "frontier.csv",
        "ckpt/align_lld/manifest.json",
        "ckpt/align_lld/weights.bin",
        "ckpt/align_lst_plus/manifest.json",
        "ckpt/align_lst_plus/weights.bin",
    ];
    run_stage(
        dir,
        &mut manifest,
        "alignment",
        alignment_inputs,
        &alignment_outputs,
        || {
            let outcome = run_alignment_experiment(dir, &base, &data, cfg)?;
            write_json(&dir.join("alignment_report.json"), &outcome.report)?;
            std::fs::write(dir.join("frontier.csv"), frontier_csv(&outcome.report))?;
            Ok((
                serde_json::json!({
                    "lld_median_compliance": outcome.report.lld_median_compliance,
                }),
                outcome.steps,
                Some(outcome.report.base_checksum.clone()),
            ))
        },
    )?;
    let alignment_report: AlignmentReport = read_json(&dir.join("alignment_report.json"))?;

    Ok(Some(PipelineOutputs {
        dir: dir.to_path_buf(),
        manifest: RunManifest::load(dir),
        pretrain: pretrain_report,
        guardrail: guardrail_report,
        alignment: alignment_report,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_calibration_bounds_fpr() {
        let safe = vec![0.1, 0.2, 0.05, 0.3, 0.15, 0.6, 0.25, 0.12, 0.08, 0.4];
        let tau = calibrate_tau(&safe, 0.1);
        let fpr = safe.iter().filter(|&&s| s >= tau).count() as f64 / safe.len() as f64;
        assert!(fpr <= 0.1, "fpr {fpr} at tau {tau}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::acceptance_default(7);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }
}
