//! Safety alignment by logit interpolation: generative adapters predict
//! alternative next-token logits from the frozen base's taps, and the
//! output distribution is softmax(lambda*z_b + (1-lambda)*z_adapter).
//!
//! lambda=1 reproduces the base exactly; lambda=0 is the fully aligned
//! model; anything between trades capability against safety at inference
//! time with no retraining. A gated policy picks lambda per prompt from a
//! safety classifier reading the same taps, so safe prompts pass through
//! the base untouched.

use crate::classifier::{ExampleTaps, SafetyClassifier};
use crate::error::{Error, Result};
use crate::model::{
    argmax, bump, Block, BlockGeom, ForwardTrace, KVCache, PassCounters, TokenId, Transformer,
};
use crate::optim::{lr_schedule, Optimizer, ScheduleKind};
use crate::rng::{rng_for, shuffled_indices};
use crate::side::{SideNetwork, SideState};
use crate::synthbench::PreferenceRecord;
use crate::tensor::{no_grad, Elem, Tensor};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Interpolation and lambda policy
// ---------------------------------------------------------------------------

/// Interpolated logits lambda*z_b + (1-lambda)*z_dsa. At the endpoints the
/// result equals one side exactly for finite inputs.
pub fn interpolate_logits<E: Elem>(z_b: &Tensor<E>, z_dsa: &Tensor<E>, lambda: f64) -> Tensor<E> {
    assert!(
        (0.0..=1.0).contains(&lambda),
        "lambda {lambda} out of [0, 1]"
    );
    z_b.add_scaled(z_dsa, E::from_f64(lambda), E::from_f64(1.0 - lambda))
}

/// The output distribution softmax(lambda*z_b + (1-lambda)*z_dsa).
pub fn interpolate<E: Elem>(z_b: &Tensor<E>, z_dsa: &Tensor<E>, lambda: f64) -> Tensor<E> {
    interpolate_logits(z_b, z_dsa, lambda).softmax_rows()
}

fn last_row<E: Elem>(t: &Tensor<E>) -> Vec<E> {
    let v = t.cols();
    let r = t.rows();
    t.data()[(r - 1) * v..].to_vec()
}

fn interp_row<E: Elem>(z_b: &[E], z_dsa: &[E], lambda: f64) -> Vec<E> {
    let l = E::from_f64(lambda);
    let om = E::from_f64(1.0 - lambda);
    z_b.iter()
        .zip(z_dsa)
        .map(|(&a, &b)| l * a + om * b)
        .collect()
}

/// How the interpolation weight is chosen for a prompt.
pub enum LambdaPolicy<E: Elem> {
    Fixed { lambda: f64 },
    /// Step rule: inputs scoring at or above `tau` count as unsafe and get
    /// `lambda_unsafe`; everything else passes through at lambda = 1.
    GatedStep {
        classifier: Rc<SafetyClassifier<E>>,
        tau: f64,
        lambda_unsafe: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LambdaDecision {
    pub unsafe_score: Option<f64>,
    pub lambda: f64,
}

impl<E: Elem> LambdaPolicy<E> {
    /// Decides lambda once from the prompt trace; the decision is held for
    /// the whole response. The classifier reads the same trace, costing no
    /// extra base pass.
    pub fn eval(&self, prompt_trace: &ForwardTrace<E>, counters: Option<&PassCounters>) -> LambdaDecision {
        match self {
            LambdaPolicy::Fixed { lambda } => {
                assert!((0.0..=1.0).contains(lambda), "lambda out of range");
                LambdaDecision {
                    unsafe_score: None,
                    lambda: *lambda,
                }
            }
            LambdaPolicy::GatedStep {
                classifier,
                tau,
                lambda_unsafe,
            } => {
                let score = classifier.score_trace(prompt_trace, counters);
                let lambda = if score.0 >= *tau { *lambda_unsafe } else { 1.0 };
                LambdaDecision {
                    unsafe_score: Some(score.0),
                    lambda,
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Adapter kinds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignKind {
    LstGen,
    LstPlus,
    Lld,
    LoraBaseline,
}

impl AlignKind {
    pub fn name(self) -> &'static str {
        match self {
            AlignKind::LstGen => "lst_gen",
            AlignKind::LstPlus => "lst_plus",
            AlignKind::Lld => "lld",
            AlignKind::LoraBaseline => "lora_baseline",
        }
    }

    /// The interpolation weight each kind trains under.
    pub fn train_lambda(self) -> f64 {
        match self {
            AlignKind::LstPlus => 0.5,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentAdapterSpec {
    pub kind: AlignKind,
    pub scale_hidden: usize,
    pub scale_heads: usize,
    pub cross_attn_rank: usize,
    pub n_duplicated_layers: usize,
    pub lora_rank: usize,
    pub train_lambda: f64,
}

impl AlignmentAdapterSpec {
    pub fn lst_gen() -> Self {
        AlignmentAdapterSpec {
            kind: AlignKind::LstGen,
            scale_hidden: 16,
            scale_heads: 2,
            cross_attn_rank: 0,
            n_duplicated_layers: 0,
            lora_rank: 0,
            train_lambda: 0.0,
        }
    }

    pub fn lst_plus() -> Self {
        AlignmentAdapterSpec {
            kind: AlignKind::LstPlus,
            scale_hidden: 16,
            scale_heads: 2,
            cross_attn_rank: 8,
            n_duplicated_layers: 0,
            lora_rank: 0,
            train_lambda: 0.5,
        }
    }

    pub fn lld() -> Self {
        AlignmentAdapterSpec {
            kind: AlignKind::Lld,
            scale_hidden: 0,
            scale_heads: 0,
            cross_attn_rank: 0,
            n_duplicated_layers: 2,
            lora_rank: 32,
            train_lambda: 0.0,
        }
    }

    pub fn lora_baseline(rank: usize) -> Self {
        AlignmentAdapterSpec {
            kind: AlignKind::LoraBaseline,
            scale_hidden: 0,
            scale_heads: 0,
            cross_attn_rank: 0,
            n_duplicated_layers: 0,
            lora_rank: rank,
            train_lambda: 0.0,
        }
    }
}

/// Duplicated final base layers with trainable low-rank deltas. All base
/// computation up to the duplicated segment is reused; the shared final
/// norm and LM head stay frozen.
pub struct LldAdapter<E: Elem> {
    pub start_layer: usize,
    pub blocks: Vec<Block<E>>,
    pub final_norm: Tensor<E>,
    pub head: Tensor<E>,
    pub geom: BlockGeom,
    pub max_seq_len: usize,
}

impl<E: Elem> LldAdapter<E> {
    pub fn init(base: &Transformer<E>, n_dup: usize, lora_rank: usize, seed: u64) -> Self {
        assert!((1..=base.cfg.n_layers).contains(&n_dup));
        let start_layer = base.cfg.n_layers - n_dup;
        let mut rng = rng_for(seed, "lld/lora");
        let blocks = base.layers[start_layer..]
            .iter()
            .map(|b| b.with_lora(&mut rng, lora_rank, 2.0))
            .collect();
        LldAdapter {
            start_layer,
            blocks,
            final_norm: base.final_norm.clone(),
            head: base.lm_head.as_ref().unwrap_or(&base.embed).clone(),
            geom: base.geom(),
            max_seq_len: base.cfg.max_seq_len,
        }
    }

    pub fn logits_from_hidden(
        &self,
        hidden: &Tensor<E>,
        start_pos: usize,
        mut cache: Option<&mut KVCache<E>>,
    ) -> Tensor<E> {
        let mut x = hidden.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
            x = b.forward(&x, &self.geom, start_pos, layer_cache);
        }
        x.rms_norm(&self.final_norm, E::from_f64(self.geom.norm_eps))
            .matmul_nt(&self.head)
    }
}

/// The non-disentangled baseline: the base model cloned with low-rank
/// deltas everywhere. Produces logits from its own full pass, so pairing
/// it with the base at decode time costs two model passes per token.
pub struct LoraAlignedModel<E: Elem> {
    pub model: Transformer<E>,
}

impl<E: Elem> LoraAlignedModel<E> {
    pub fn init(base: &Transformer<E>, rank: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "lora_align/lora");
        LoraAlignedModel {
            model: Transformer {
                cfg: base.cfg.clone(),
                embed: base.embed.clone(),
                lm_head: base.lm_head.clone(),
                layers: base.layers.iter().map(|b| b.with_lora(&mut rng, rank, 2.0)).collect(),
                final_norm: base.final_norm.clone(),
            },
        }
    }
}

pub enum AlignmentAdapter<E: Elem> {
    LstGen { side: SideNetwork<E> },
    LstPlus { side: SideNetwork<E> },
    Lld(LldAdapter<E>),
    LoraBaseline(LoraAlignedModel<E>),
}

/// Per-generation adapter state for incremental decoding.
pub enum AdapterState<E: Elem> {
    Side(SideState<E>),
    Lld(KVCache<E>),
    Lora(KVCache<E>),
}

impl<E: Elem> AlignmentAdapter<E> {
    pub fn kind(&self) -> AlignKind {
        match self {
            AlignmentAdapter::LstGen { .. } => AlignKind::LstGen,
            AlignmentAdapter::LstPlus { .. } => AlignKind::LstPlus,
            AlignmentAdapter::Lld(_) => AlignKind::Lld,
            AlignmentAdapter::LoraBaseline(_) => AlignKind::LoraBaseline,
        }
    }

    pub fn new_state(&self, base: &Transformer<E>) -> AdapterState<E> {
        match self {
            AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => {
                AdapterState::Side(side.new_state())
            }
            AlignmentAdapter::Lld(lld) => AdapterState::Lld(KVCache::for_geom(
                &lld.geom,
                lld.blocks.len(),
                lld.max_seq_len,
            )),
            AlignmentAdapter::LoraBaseline(_) => AdapterState::Lora(KVCache::new(&base.cfg)),
        }
    }

    /// Adapter logits for every position of a full pass. DSA kinds consume
    /// the tapped trace; the baseline re-runs its own model over `tokens`.
    pub fn logits_full(
        &self,
        base: &Transformer<E>,
        trace: Option<&ForwardTrace<E>>,
        tokens: &[TokenId],
    ) -> Tensor<E> {
        match self {
            AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => {
                let trace = trace.expect("side adapters need a tapped trace");
                let head = base.lm_head.as_ref().unwrap_or(&base.embed);
                side.logits(&side.forward_full(&trace.hidden), head)
            }
            AlignmentAdapter::Lld(lld) => {
                let trace = trace.expect("layer-duplicate adapter needs a tapped trace");
                lld.logits_from_hidden(&trace.hidden[lld.start_layer], 0, None)
            }
            AlignmentAdapter::LoraBaseline(lora) => {
                lora.model.forward(tokens, None, false).logits
            }
        }
    }

    /// Adapter logits from cached taps (training path for DSA kinds).
    pub fn logits_from_taps(&self, base: &Transformer<E>, taps: &ExampleTaps<E>) -> Tensor<E> {
        match self {
            AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => {
                let head = base.lm_head.as_ref().unwrap_or(&base.embed);
                side.logits(&side.forward_full(&taps.full), head)
            }
            AlignmentAdapter::Lld(lld) => {
                lld.logits_from_hidden(&taps.full[lld.start_layer], 0, None)
            }
            AlignmentAdapter::LoraBaseline(_) => {
                panic!("the baseline does not consume taps; use logits_full with tokens")
            }
        }
    }

    /// Consumes a newly decoded segment (prompt prefill or one step) and
    /// returns the adapter logits of the last position.
    pub fn advance(
        &self,
        base: &Transformer<E>,
        trace: &ForwardTrace<E>,
        new_tokens: &[TokenId],
        state: &mut AdapterState<E>,
        counters: Option<&PassCounters>,
    ) -> Vec<E> {
        bump(counters, |c| c.adapter_steps.set(c.adapter_steps.get() + 1));
        match (self, state) {
            (
                AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side },
                AdapterState::Side(st),
            ) => {
                let head = base.lm_head.as_ref().unwrap_or(&base.embed);
                let hidden = side.forward_step(&trace.hidden, st);
                let logits = side.logits(&hidden, head);
                last_row(&logits)
            }
            (AlignmentAdapter::Lld(lld), AdapterState::Lld(cache)) => {
                let start = cache.len();
                let logits =
                    lld.logits_from_hidden(&trace.hidden[lld.start_layer], start, Some(cache));
                last_row(&logits)
            }
            (AlignmentAdapter::LoraBaseline(lora), AdapterState::Lora(cache)) => {
                bump(counters, |c| c.separate_passes.set(c.separate_passes.get() + 1));
                lora.model.forward(new_tokens, Some(cache), false).last_logits()
            }
            _ => panic!("adapter state does not match adapter kind"),
        }
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        match self {
            AlignmentAdapter::LstGen { side } | AlignmentAdapter::LstPlus { side } => side.params(),
            AlignmentAdapter::Lld(lld) => {
                lld.blocks.iter().flat_map(|b| b.lora_params()).collect()
            }
            AlignmentAdapter::LoraBaseline(lora) => lora
                .model
                .layers
                .iter()
                .flat_map(|b| b.lora_params())
                .collect(),
        }
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Targeted generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub unsafe_score: Option<f64>,
    pub lambda: f64,
}

/// Shared-pass targeted generation: one base forward per position feeds
/// the classifier gate (once, on the prompt) and the adapter (every step).
/// Returns the full token sequence and the per-step interpolated logits.
pub fn targeted_generate_traced<E: Elem>(
    base: &Transformer<E>,
    adapter: &AlignmentAdapter<E>,
    policy: &LambdaPolicy<E>,
    prompt: &[TokenId],
    max_new: usize,
    counters: Option<&PassCounters>,
) -> (Vec<TokenId>, Vec<Vec<E>>) {
    no_grad(|| {
        let stop = crate::synthbench::Vocab::EOS;
        let mut out = prompt.to_vec();
        let mut step_logits = Vec::new();
        if max_new == 0 {
            return (out, step_logits);
        }
        let mut cache = KVCache::new(&base.cfg);
        let trace = base.forward(prompt, Some(&mut cache), true);
        bump(counters, |c| c.base_prefills.set(c.base_prefills.get() + 1));
        let decision = policy.eval(&trace, counters);
        let mut state = adapter.new_state(base);
        let mut z_a = adapter.advance(base, &trace, prompt, &mut state, counters);
        let mut z_b = trace.last_logits();
        for i in 0..max_new {
            let z = interp_row(&z_b, &z_a, decision.lambda);
            let next = argmax(&z);
            out.push(next);
            step_logits.push(z);
            if next == stop || i + 1 == max_new || cache.len() + 1 > base.cfg.max_seq_len {
                break;
            }
            let step = base.forward(&[next], Some(&mut cache), true);
            bump(counters, |c| c.base_steps.set(c.base_steps.get() + 1));
            z_b = step.last_logits();
            z_a = adapter.advance(base, &step, &[next], &mut state, counters);
        }
        (out, step_logits)
    })
}

pub fn targeted_generate<E: Elem>(
    base: &Transformer<E>,
    adapter: &AlignmentAdapter<E>,
    policy: &LambdaPolicy<E>,
    prompt: &[TokenId],
    max_new: usize,
    counters: Option<&PassCounters>,
) -> (Vec<TokenId>, DecisionRecord) {
    let record = no_grad(|| {
        let trace = base.forward(prompt, None, true);
        let d = policy.eval(&trace, None);
        DecisionRecord {
            unsafe_score: d.unsafe_score,
            lambda: d.lambda,
        }
    });
    let (tokens, _) = targeted_generate_traced(base, adapter, policy, prompt, max_new, counters);
    (tokens, record)
}

/// Naive two-pass reference: every step re-runs the base from scratch over
/// the whole prefix and recomputes the adapter with no caching or sharing.
pub fn targeted_generate_naive<E: Elem>(
    base: &Transformer<E>,
    adapter: &AlignmentAdapter<E>,
    policy: &LambdaPolicy<E>,
    prompt: &[TokenId],
    max_new: usize,
    counters: Option<&PassCounters>,
) -> (Vec<TokenId>, Vec<Vec<E>>) {
    no_grad(|| {
        let stop = crate::synthbench::Vocab::EOS;
        let mut out = prompt.to_vec();
        let mut step_logits = Vec::new();
        if max_new == 0 {
            return (out, step_logits);
        }
        let prompt_trace = base.forward(prompt, None, true);
        bump(counters, |c| c.base_prefills.set(c.base_prefills.get() + 1));
        let decision = policy.eval(&prompt_trace, counters);
        for _ in 0..max_new {
            let trace = base.forward(&out, None, true);
            bump(counters, |c| c.base_prefills.set(c.base_prefills.get() + 1));
            let z_b = trace.last_logits();
            let za_full = adapter.logits_full(base, Some(&trace), &out);
            let v = za_full.cols();
            let z_a = za_full.data()[(za_full.rows() - 1) * v..].to_vec();
            let z = interp_row(&z_b, &z_a, decision.lambda);
            let next = argmax(&z);
            out.push(next);
            step_logits.push(z);
            if next == stop || out.len() + 1 > base.cfg.max_seq_len {
                break;
            }
        }
        (out, step_logits)
    })
}

// ---------------------------------------------------------------------------
// DPO
// ---------------------------------------------------------------------------

/// -log sigma(beta * [(pi_c - pi_r) - (ref_c - ref_r)]), stable for any
/// margin size.
pub fn dpo_loss<E: Elem>(
    policy_chosen: &Tensor<E>,
    policy_rejected: &Tensor<E>,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Tensor<E> {
    let ref_margin = Tensor::scalar(E::from_f64(ref_chosen - ref_rejected));
    let margin = policy_chosen.sub(policy_rejected).sub(&ref_margin);
    margin.scale(E::from_f64(-beta)).softplus()
}

/// Teacher-forced log-probability of the response tokens under the
/// interpolated model: rows of `logits` cover the whole sequence, and the
/// response occupies positions `prompt_len..`.
pub fn sequence_logprob<E: Elem>(
    logits: &Tensor<E>,
    tokens: &[TokenId],
    prompt_len: usize,
) -> Tensor<E> {
    assert!(prompt_len >= 1 && prompt_len <= tokens.len());
    let t = tokens.len();
    if prompt_len == t {
        return Tensor::scalar(E::ZERO);
    }
    let targets: Vec<usize> = tokens.iter().skip(1).map(|&x| x as usize).collect();
    logits.sequence_log_prob(&targets, (prompt_len - 1)..(t - 1))
}

/// One preference pair with everything the frozen base contributes cached:
/// taps, base logits, and (after initialization) reference log-probs.
pub struct DpoExample<E: Elem> {
    pub prompt_len: usize,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub chosen_taps: Option<Rc<ExampleTaps<E>>>,
    pub rejected_taps: Option<Rc<ExampleTaps<E>>>,
    pub chosen_zb: Tensor<E>,
    pub rejected_zb: Tensor<E>,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

pub fn prepare_dpo_examples<E: Elem>(
    base: &Transformer<E>,
    records: &[PreferenceRecord],
    with_taps: bool,
) -> Vec<DpoExample<E>> {
    records
        .iter()
        .map(|r| {
            let chosen: Vec<TokenId> = r.prompt.iter().chain(&r.chosen).copied().collect();
            let rejected: Vec<TokenId> = r.prompt.iter().chain(&r.rejected).copied().collect();
            let cache = |tokens: &[TokenId]| {
                no_grad(|| {
                    let trace = base.forward(tokens, None, true);
                    let taps = with_taps.then(|| {
                        Rc::new(ExampleTaps {
                            last: trace
                                .hidden
                                .iter()
                                .map(|h| h.slice_rows(h.rows() - 1, 1).detach())
                                .collect(),
                            full: trace.hidden.iter().map(|h| h.detach()).collect(),
                        })
                    });
                    (taps, trace.logits.detach())
                })
            };
            let (chosen_taps, chosen_zb) = cache(&chosen);
            let (rejected_taps, rejected_zb) = cache(&rejected);
            DpoExample {
                prompt_len: r.prompt.len(),
                chosen,
                rejected,
                chosen_taps,
                rejected_taps,
                chosen_zb,
                rejected_zb,
                ref_chosen: 0.0,
                ref_rejected: 0.0,
            }
        })
        .collect()
}

/// Interpolated-policy log-prob of one side of a pair. Builds a graph only
/// through adapter parameters.
fn policy_logprob<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    ex: &DpoExample<E>,
    chosen_side: bool,
    lambda: f64,
) -> Tensor<E> {
    let (tokens, taps, zb) = if chosen_side {
        (&ex.chosen, &ex.chosen_taps, &ex.chosen_zb)
    } else {
        (&ex.rejected, &ex.rejected_taps, &ex.rejected_zb)
    };
    let z_dsa = match adapter.kind() {
        AlignKind::LoraBaseline => adapter.logits_full(base, None, tokens),
        _ => adapter.logits_from_taps(base, taps.as_ref().expect("DSA training needs cached taps")),
    };
    let z = interpolate_logits(zb, &z_dsa, lambda);
    sequence_logprob(&z, tokens, ex.prompt_len)
}

/// Fills reference log-probs from the current (initialized, frozen-as-
/// reference) adapter state.
pub fn fill_reference_logprobs<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    examples: &mut [DpoExample<E>],
    lambda: f64,
) {
    no_grad(|| {
        for ex in examples.iter_mut() {
            ex.ref_chosen = policy_logprob(adapter, base, ex, true, lambda).item().to_f64();
            ex.ref_rejected = policy_logprob(adapter, base, ex, false, lambda)
                .item()
                .to_f64();
        }
    });
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr_grid: Vec<f64>,
    pub beta: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for DpoSettings {
    fn default() -> Self {
        DpoSettings {
            epochs: 10,
            batch: 32,
            lr_grid: vec![5e-5, 1e-4, 5e-4],
            beta: 0.1,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoReport {
    pub chosen_lr: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
    pub curve: Vec<(f64, f64)>,
    /// Mean implicit reward margin on validation pairs after training.
    pub val_reward_margin: f64,
    pub grid_val_losses: Vec<(f64, f64)>,
}

fn mean_dpo_loss<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    data: &[DpoExample<E>],
    lambda: f64,
    beta: f64,
) -> f64 {
    no_grad(|| {
        data.iter()
            .map(|ex| {
                let pc = policy_logprob(adapter, base, ex, true, lambda);
                let pr = policy_logprob(adapter, base, ex, false, lambda);
                dpo_loss(&pc, &pr, ex.ref_chosen, ex.ref_rejected, beta)
                    .item()
                    .to_f64()
            })
            .sum::<f64>()
            / data.len() as f64
    })
}

fn mean_reward_margin<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    data: &[DpoExample<E>],
    lambda: f64,
    beta: f64,
) -> f64 {
    no_grad(|| {
        data.iter()
            .map(|ex| {
                let pc = policy_logprob(adapter, base, ex, true, lambda).item().to_f64();
                let pr = policy_logprob(adapter, base, ex, false, lambda).item().to_f64();
                beta * ((pc - pr) - (ex.ref_chosen - ex.ref_rejected))
            })
            .sum::<f64>()
            / data.len() as f64
    })
}

/// Mean DPO loss of the current adapter state against stored reference
/// log-probs; at a freshly initialized reference this is ln 2 exactly.
pub fn initial_dpo_loss<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    data: &[DpoExample<E>],
    lambda: f64,
    beta: f64,
) -> f64 {
    mean_dpo_loss(adapter, base, data, lambda, beta)
}

/// Preference optimization of the adapter parameters at a fixed training
/// lambda. The reference is the frozen initialized state, so the loss
/// starts at ln 2 exactly. Model selection is by validation loss; the best
/// epoch's weights are restored at the end.
pub fn train_dpo<E: Elem>(
    adapter: &AlignmentAdapter<E>,
    base: &Transformer<E>,
    train: &mut [DpoExample<E>],
    val: &mut [DpoExample<E>],
    train_lambda: f64,
    settings: &DpoSettings,
) -> Result<DpoReport> {
    fill_reference_logprobs(adapter, base, train, train_lambda);
    fill_reference_logprobs(adapter, base, val, train_lambda);
    let params = adapter.params();
    let init_snap: Vec<Vec<E>> = params.iter().map(|p| p.to_vec()).collect();
    let initial_train_loss = mean_dpo_loss(adapter, base, train, train_lambda, settings.beta);

    let mut overall_best: Option<(Vec<Vec<E>>, DpoReport)> = None;
    let mut grid_val_losses = Vec::new();
    for &lr in &settings.lr_grid {
        for (p, s) in params.iter().zip(&init_snap) {
            p.data_mut().copy_from_slice(s);
        }
        let mut opt = Optimizer::adam(params.clone(), lr);
        let steps_per_epoch = train.len().div_ceil(settings.batch);
        let total_steps = settings.epochs * steps_per_epoch;
        let mut curve = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0usize;
        let mut best_snap: Vec<Vec<E>> = params.iter().map(|p| p.to_vec()).collect();
        let mut global_step = 0usize;
        for epoch in 0..settings.epochs {
            let mut rng = rng_for(settings.seed, &format!("dpo/shuffle/{lr}/{epoch}"));
            let order = shuffled_indices(&mut rng, train.len());
            let mut train_loss = 0.0;
            for chunk in order.chunks(settings.batch) {
                let lr_now = lr_schedule(
                    ScheduleKind::Cosine,
                    global_step,
                    total_steps,
                    settings.warmup_fraction,
                    lr,
                );
                opt.set_lr(lr_now);
                opt.zero_grad();
                let inv = E::from_f64(1.0 / chunk.len() as f64);
                for &i in chunk {
                    let ex = &train[i];
                    let pc = policy_logprob(adapter, base, ex, true, train_lambda);
                    let pr = policy_logprob(adapter, base, ex, false, train_lambda);
                    let loss = dpo_loss(&pc, &pr, ex.ref_chosen, ex.ref_rejected, settings.beta)
                        .scale(inv);
                    let lv = loss.item().to_f64();
                    if !lv.is_finite() {
                        return Err(Error::Diverged(format!(
                            "dpo loss became {lv} at lr {lr} epoch {epoch}"
                        )));
                    }
                    train_loss += lv * chunk.len() as f64 / train.len() as f64;
                    loss.backward();
                }
                opt.step();
                global_step += 1;
            }
            let val_loss = mean_dpo_loss(adapter, base, val, train_lambda, settings.beta);
            curve.push((train_loss, val_loss));
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_snap = params.iter().map(|p| p.to_vec()).collect();
            }
        }
        for (p, s) in params.iter().zip(&best_snap) {
            p.data_mut().copy_from_slice(s);
        }
        grid_val_losses.push((lr, best_val));
        if overall_best
            .as_ref()
            .map_or(true, |(_, r)| best_val < r.best_val_loss)
        {
            let margin = mean_reward_margin(adapter, base, val, train_lambda, settings.beta);
            overall_best = Some((
                best_snap,
                DpoReport {
                    chosen_lr: lr,
                    best_epoch,
                    best_val_loss: best_val,
                    initial_train_loss,
                    curve,
                    val_reward_margin: margin,
                    grid_val_losses: Vec::new(),
                },
            ));
        }
    }
    let (winner_snap, mut report) = overall_best.expect("non-empty lr grid");
    for (p, s) in params.iter().zip(&winner_snap) {
        p.data_mut().copy_from_slice(s);
    }
    report.grid_val_losses = grid_val_losses;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierRow {
    pub lambda: f64,
    pub capability_accuracy: f64,
    pub unsafe_compliance_rate: f64,
    pub refusal_rate_on_safe: f64,
}

/// Evaluates the interpolated model along a lambda grid at no additional
/// training cost.
pub fn lambda_sweep<E: Elem>(
    base: &Transformer<E>,
    adapter: &AlignmentAdapter<E>,
    unsafe_prompts: &[crate::synthbench::CapabilityExample],
    capability_prompts: &[crate::synthbench::CapabilityExample],
    grid: &[f64],
    max_new: usize,
) -> Vec<FrontierRow> {
    grid.iter()
        .map(|&lambda| {
            let policy = LambdaPolicy::Fixed { lambda };
            let score = crate::evalsuite::eval_safety_capability(
                |p| targeted_generate_traced(base, adapter, &policy, p, max_new, None).0,
                unsafe_prompts,
                capability_prompts,
            );
            FrontierRow {
                lambda,
                capability_accuracy: score.capability_accuracy,
                unsafe_compliance_rate: score.unsafe_compliance_rate,
                refusal_rate_on_safe: score.refusal_rate_on_safe,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::side::SideConfig;

    fn tiny_base() -> Transformer<f32> {
        let cfg = ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_ff: 64,
            max_seq_len: 64,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        let m = Transformer::init(cfg, 101);
        m.freeze();
        m
    }

    #[test]
    fn interpolate_symmetry_and_endpoints() {
        let zb: Tensor<f32> = Tensor::new(vec![1, 2], vec![2.0, 0.0]);
        let zd: Tensor<f32> = Tensor::new(vec![1, 2], vec![0.0, 2.0]);
        let p = interpolate(&zb, &zd, 0.5).to_vec();
        assert!((p[0] - 0.5).abs() < 1e-7 && (p[1] - 0.5).abs() < 1e-7);

        // lambda = 1 reproduces softmax(z_b) exactly.
        let p1 = interpolate(&zb, &zd, 1.0).to_vec();
        let want = zb.softmax_rows().to_vec();
        assert_eq!(p1, want);
        assert!((p1[0] - 0.8807971).abs() < 1e-5);

        // lambda = 0 reproduces softmax(z_dsa) exactly.
        let p0 = interpolate(&zb, &zd, 0.0).to_vec();
        assert_eq!(p0, zd.softmax_rows().to_vec());
    }

    #[test]
    fn interpolate_quarter_lambda() {
        // lambda=0.25 of [4,0] and [0,0] gives softmax([1,0]) = sigma(1).
        let zb: Tensor<f32> = Tensor::new(vec![1, 2], vec![4.0, 0.0]);
        let zd: Tensor<f32> = Tensor::zeros(vec![1, 2]);
        let p = interpolate(&zb, &zd, 0.25).to_vec();
        assert!((p[0] - 0.7310586).abs() < 1e-6);
        assert!((p[1] - 0.2689414).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "out of [0, 1]")]
    fn interpolate_rejects_bad_lambda() {
        let z: Tensor<f32> = Tensor::zeros(vec![1, 2]);
        let _ = interpolate(&z, &z, 1.5);
    }

    #[test]
    fn lambda_policy_step_semantics() {
        let base = tiny_base();
        // A probe with known bias so the score is sigma(b).
        let probe = crate::classifier::PlrProbe::init(base.cfg.d_model, 0);
        probe.b.data_mut()[0] = -1.3862944; // sigma = 0.2
        let clf = Rc::new(SafetyClassifier::Plr(probe));
        let trace = no_grad(|| base.forward(&[1, 40, 3], None, true));

        let policy = LambdaPolicy::GatedStep {
            classifier: clf.clone(),
            tau: 0.5,
            lambda_unsafe: 0.0,
        };
        let d = policy.eval(&trace, None);
        assert_eq!(d.lambda, 1.0, "score 0.2 under tau 0.5 gates safe");
        assert!((d.unsafe_score.unwrap() - 0.2).abs() < 1e-6);

        // score 0.8 above tau.
        if let SafetyClassifier::Plr(p) = clf.as_ref() {
            p.b.data_mut()[0] = 1.3862944;
        }
        let d = policy.eval(&trace, None);
        assert_eq!(d.lambda, 0.0);

        // score exactly tau counts as unsafe.
        if let SafetyClassifier::Plr(p) = clf.as_ref() {
            p.b.data_mut()[0] = 0.0;
        }
        let policy = LambdaPolicy::GatedStep {
            classifier: clf,
            tau: 0.5,
            lambda_unsafe: 0.25,
        };
        let d = policy.eval(&trace, None);
        assert_eq!(d.lambda, 0.25, ">= tau is unsafe by definition");
    }

    #[test]
    fn lld_zero_delta_equals_base_logits_bit_exact() {
        let base = tiny_base();
        let lld = LldAdapter::init(&base, 2, 4, 5);
        let tokens = [1u32, 50, 51, 52, 3];
        no_grad(|| {
            let trace = base.forward(&tokens, None, true);
            let z = lld.logits_from_hidden(&trace.hidden[lld.start_layer], 0, None);
            assert_eq!(z.to_vec(), trace.logits.to_vec());
        });
    }

    #[test]
    fn dpo_loss_values() {
        let pc: Tensor<f64> = Tensor::scalar(-3.0);
        let pr: Tensor<f64> = Tensor::scalar(-3.0);
        // Policy equals reference: ln 2.
        let l = dpo_loss(&pc, &pr, -3.0, -3.0, 0.1).item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // Policy margin 1, reference margin 0, beta 0.1: -ln sigma(0.1).
        let pc: Tensor<f64> = Tensor::scalar(-2.0);
        let pr: Tensor<f64> = Tensor::scalar(-3.0);
        let l = dpo_loss(&pc, &pr, 0.0, 0.0, 0.1).item();
        let want = -(1.0f64 / (1.0 + (-0.1f64).exp())).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.644397).abs() < 1e-6);

        // beta = 0 gives ln 2 regardless of margins.
        let l = dpo_loss(&pc, &pr, 5.0, -5.0, 0.0).item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_cases() {
        // Empty response contributes 0.
        let logits: Tensor<f64> = Tensor::zeros(vec![3, 8]);
        let lp = sequence_logprob(&logits, &[1, 2, 3], 3).item();
        assert_eq!(lp, 0.0);

        // Single-token response under uniform logits over 256: -ln 256.
        let logits: Tensor<f64> = Tensor::zeros(vec![4, 256]);
        let lp = sequence_logprob(&logits, &[1, 2, 3, 77], 3).item();
        assert!((lp + 256.0f64.ln()).abs() < 1e-12);
        assert!((lp + 5.5452).abs() < 1e-4);

        // Matches a per-token scalar oracle.
        let t = 5usize;
        let v = 7usize;
        let vals: Vec<f64> = (0..t * v).map(|i| ((i * 13 % 11) as f64 - 5.0) * 0.3).collect();
        let logits: Tensor<f64> = Tensor::new(vec![t, v], vals.clone());
        let tokens: Vec<u32> = vec![1, 4, 2, 6, 0];
        let prompt_len = 2;
        let lp = sequence_logprob(&logits, &tokens, prompt_len).item();
        let mut want = 0.0;
        for pos in prompt_len..t {
            let row = &vals[(pos - 1) * v..pos * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            want += row[tokens[pos] as usize] - lse;
        }
        assert!((lp - want).abs() < 1e-5);
    }

    #[test]
    fn targeted_generation_safe_prompt_matches_base_exactly() {
        let base = tiny_base();
        let lld = LldAdapter::init(&base, 1, 4, 6);
        // Make the adapter differ from the base so the test is not vacuous.
        for p in AlignmentAdapter::Lld(LldAdapter {
            start_layer: lld.start_layer,
            blocks: lld.blocks.clone(),
            final_norm: lld.final_norm.clone(),
            head: lld.head.clone(),
            geom: lld.geom,
            max_seq_len: lld.max_seq_len,
        })
        .params()
        {
            let mut d = p.data_mut();
            for v in d.iter_mut() {
                *v += 0.05;
            }
        }
        let adapter = AlignmentAdapter::Lld(lld);

        // Classifier that always scores 0 (never unsafe).
        let probe = crate::classifier::PlrProbe::init(base.cfg.d_model, 0);
        probe.b.data_mut()[0] = -30.0;
        let policy = LambdaPolicy::GatedStep {
            classifier: Rc::new(SafetyClassifier::Plr(probe)),
            tau: 0.5,
            lambda_unsafe: 0.0,
        };
        let prompt = [1u32, 40, 41, 42, 3];
        let (tokens, record) = targeted_generate(&base, &adapter, &policy, &prompt, 12, None);
        assert_eq!(record.lambda, 1.0);
        let plain = crate::model::generate_greedy(&base, &prompt, 12, Some(crate::synthbench::Vocab::EOS), None, None);
        assert_eq!(tokens, plain, "safe-gated output must equal base greedy exactly");
    }

    #[test]
    fn fixed_zero_lambda_with_zero_delta_adapter_matches_base() {
        let base = tiny_base();
        let adapter = AlignmentAdapter::Lld(LldAdapter::init(&base, 2, 4, 7));
        let policy = LambdaPolicy::Fixed { lambda: 0.0 };
        let prompt = [1u32, 60, 61, 3];
        let (tokens, _) = targeted_generate(&base, &adapter, &policy, &prompt, 10, None);
        let plain = crate::model::generate_greedy(&base, &prompt, 10, Some(crate::synthbench::Vocab::EOS), None, None);
        assert_eq!(tokens, plain, "zero-delta duplicate is the base model");
    }

    #[test]
    fn pass_counters_shared_vs_baseline() {
        let base = tiny_base();
        let adapter = AlignmentAdapter::Lld(LldAdapter::init(&base, 1, 4, 8));
        let policy = LambdaPolicy::Fixed { lambda: 0.5 };
        let prompt = [1u32, 90, 91, 92, 3];
        let c = PassCounters::new();
        let (tokens, _) = targeted_generate_traced(&base, &adapter, &policy, &prompt, 6, Some(&c));
        let gen = tokens.len() - prompt.len();
        assert_eq!(c.base_prefills.get(), 1);
        assert_eq!(c.base_steps.get() as usize, gen - 1);
        assert_eq!(c.adapter_steps.get() as usize, gen, "one adapter pass per position group");

        // The full-model baseline runs its own pass every step.
        let lora = AlignmentAdapter::LoraBaseline(LoraAlignedModel::init(&base, 4, 9));
        let c2 = PassCounters::new();
        let (tokens2, _) = targeted_generate_traced(&base, &lora, &policy, &prompt, 6, Some(&c2));
        let gen2 = tokens2.len() - prompt.len();
        assert_eq!(c2.separate_passes.get() as usize, gen2);
    }

    #[test]
    fn dpo_initial_loss_is_ln2_for_all_kinds() {
        let base = tiny_base();
        let records = crate::synthbench::gen_preference_set(33, 100).unwrap();
        let records = &records[..6];

        let side_cfg = SideConfig::from_base(&base.cfg, 4, 1, None);
        let adapters = vec![
            AlignmentAdapter::LstGen {
                side: SideNetwork::init(side_cfg.clone(), 1),
            },
            AlignmentAdapter::LstPlus {
                side: SideNetwork::init(SideConfig::from_base(&base.cfg, 4, 1, Some(4)), 2),
            },
            AlignmentAdapter::Lld(LldAdapter::init(&base, 1, 4, 3)),
            AlignmentAdapter::LoraBaseline(LoraAlignedModel::init(&base, 4, 4)),
        ];
        for adapter in adapters {
            let with_taps = adapter.kind() != AlignKind::LoraBaseline;
            let mut ex = prepare_dpo_examples(&base, records, with_taps);
            let lambda = adapter.kind().train_lambda();
            fill_reference_logprobs(&adapter, &base, &mut ex, lambda);
            let loss = mean_dpo_loss(&adapter, &base, &ex, lambda, 0.1);
            assert!(
                (loss - std::f64::consts::LN_2).abs() < 1e-6,
                "{}: initial loss {loss}",
                adapter.kind().name()
            );
        }
    }
}
