//! The frozen base model: a pre-norm decoder-only transformer with RMS
//! normalization, rotary position embeddings, a SiLU-gated feed-forward,
//! and grouped key-value heads.
//!
//! One forward pass can expose every layer-boundary hidden state through a
//! [`ForwardTrace`]. Taps are read-only: capturing them never changes the
//! computation, which is what lets adapters ride along for free.

use crate::error::{Error, Result};
use crate::rng::{linear_param, normal_param, rng_for};
use crate::tensor::{no_grad, Elem, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::Cell;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    pub tie_lm_head: bool,
}

impl ModelConfig {
    /// Desk-scale default: large enough for the synthetic tasks, small
    /// enough to train on a laptop CPU.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 256,
            n_layers: 8,
            n_heads: 8,
            n_kv_heads: 4,
            d_ff: 1024,
            max_seq_len: 256,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        }
    }

    /// Compact config used by the experiment pipeline so full training runs
    /// finish in CPU minutes. d_model stays divisible by 16 so the
    /// side-network scaling rule produces valid head shapes.
    pub fn compact_default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 512,
            max_seq_len: 96,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        }
    }

    /// The 7B-class reference configuration used only by the FLOP counter.
    pub fn qwen7b_reference() -> Self {
        ModelConfig {
            vocab_size: 152064,
            d_model: 3584,
            n_layers: 28,
            n_heads: 28,
            n_kv_heads: 4,
            d_ff: 18944,
            max_seq_len: 32768,
            norm_eps: 1e-6,
            rope_base: 1e6,
            tie_lm_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".to_string()));
        }
        Ok(())
    }

    /// Additional constraint for models that consume benchmark data: the
    /// vocabulary must cover every reserved range.
    pub fn validate_for_benchmark(&self) -> Result<()> {
        self.validate()?;
        if self.vocab_size < crate::synthbench::Vocab::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the reserved token set {}",
                self.vocab_size,
                crate::synthbench::Vocab::MIN_VOCAB
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }
}

/// A dense projection stored as [fan_in, fan_out], with an optional
/// low-rank delta `x·A·B * scale` added on top of the frozen weight.
pub struct Linear<E: Elem> {
    pub w: Tensor<E>,
    pub lora: Option<Lora<E>>,
}

pub struct Lora<E: Elem> {
    pub a: Tensor<E>,
    pub b: Tensor<E>,
    pub scale: E,
}

impl<E: Elem> Clone for Linear<E> {
    fn clone(&self) -> Self {
        Linear {
            w: self.w.clone(),
            lora: self.lora.as_ref().map(|l| Lora {
                a: l.a.clone(),
                b: l.b.clone(),
                scale: l.scale,
            }),
        }
    }
}

impl<E: Elem> Linear<E> {
    pub fn init(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: linear_param(rng, fan_in, fan_out),
            lora: None,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::param(vec![fan_in, fan_out], vec![E::ZERO; fan_in * fan_out]),
            lora: None,
        }
    }

    /// Shares the frozen weight and attaches a trainable rank-`r` delta.
    /// A is small random, B starts at zero so the delta is exactly zero.
    pub fn with_lora(&self, rng: &mut rand_chacha::ChaCha8Rng, rank: usize, scale: f64) -> Self {
        let fan_in = self.w.rows();
        let fan_out = self.w.cols();
        Linear {
            w: self.w.clone(),
            lora: Some(Lora {
                a: normal_param(rng, vec![fan_in, rank], 1.0 / (fan_in as f64).sqrt()),
                b: Tensor::param(vec![rank, fan_out], vec![E::ZERO; rank * fan_out]),
                scale: E::from_f64(scale),
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let base = x.matmul(&self.w);
        match &self.lora {
            None => base,
            Some(l) => base.add(&x.matmul(&l.a).matmul(&l.b).scale(l.scale)),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(l) = &self.lora {
            out.push((format!("{prefix}.lora_a"), l.a.clone()));
            out.push((format!("{prefix}.lora_b"), l.b.clone()));
        }
    }

    /// Only the low-rank delta parameters, if any.
    pub fn lora_params(&self) -> Vec<Tensor<E>> {
        match &self.lora {
            None => Vec::new(),
            Some(l) => vec![l.a.clone(), l.b.clone()],
        }
    }
}

/// Geometry of one attention/feed-forward block, shared by the base model
/// and the down-scaled side networks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlockGeom {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
}

impl BlockGeom {
    pub fn of(cfg: &ModelConfig) -> Self {
        BlockGeom {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_kv_heads,
            d_ff: cfg.d_ff,
            norm_eps: cfg.norm_eps,
            rope_base: cfg.rope_base,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }
}

/// Pre-norm transformer block.
pub struct Block<E: Elem> {
    pub attn_norm: Tensor<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub mlp_norm: Tensor<E>,
    pub w_gate: Linear<E>,
    pub w_up: Linear<E>,
    pub w_down: Linear<E>,
}

impl<E: Elem> Clone for Block<E> {
    fn clone(&self) -> Self {
        Block {
            attn_norm: self.attn_norm.clone(),
            wq: self.wq.clone(),
            wk: self.wk.clone(),
            wv: self.wv.clone(),
            wo: self.wo.clone(),
            mlp_norm: self.mlp_norm.clone(),
            w_gate: self.w_gate.clone(),
            w_up: self.w_up.clone(),
            w_down: self.w_down.clone(),
        }
    }
}

impl<E: Elem> Block<E> {
    pub fn init(rng: &mut rand_chacha::ChaCha8Rng, geom: &BlockGeom) -> Self {
        let d = geom.d_model;
        let kv = geom.kv_dim();
        Block {
            attn_norm: Tensor::param(vec![d], vec![E::ONE; d]),
            wq: Linear::init(rng, d, d),
            wk: Linear::init(rng, d, kv),
            wv: Linear::init(rng, d, kv),
            // Zero-init output projections keep the residual stream stable
            // at the start of training.
            wo: Linear::zeros(d, d),
            mlp_norm: Tensor::param(vec![d], vec![E::ONE; d]),
            w_gate: Linear::init(rng, d, geom.d_ff),
            w_up: Linear::init(rng, d, geom.d_ff),
            w_down: Linear::zeros(geom.d_ff, d),
        }
    }

    /// Runs the block on `x` ([T, d]). With a cache, the new keys/values are
    /// appended and attention spans everything cached so far; rows of the
    /// result are identical to an uncached full-sequence pass.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        geom: &BlockGeom,
        start_pos: usize,
        cache: Option<&mut LayerKV<E>>,
    ) -> Tensor<E> {
        let h = self.attn_part(x, geom, start_pos, cache);
        self.ffn_part(&h, geom)
    }

    /// Self-attention sublayer with residual.
    pub fn attn_part(
        &self,
        x: &Tensor<E>,
        geom: &BlockGeom,
        start_pos: usize,
        mut cache: Option<&mut LayerKV<E>>,
    ) -> Tensor<E> {
        let eps = E::from_f64(geom.norm_eps);
        let hd = geom.head_dim();
        let h = x.rms_norm(&self.attn_norm, eps);
        let q = self.wq.forward(&h).rope(geom.n_heads, hd, start_pos, geom.rope_base);
        let k = self.wk.forward(&h).rope(geom.n_kv_heads, hd, start_pos, geom.rope_base);
        let v = self.wv.forward(&h);

        let (k_all, v_all, offset) = match cache.as_deref_mut() {
            None => {
                assert_eq!(start_pos, 0, "uncached forward must start at position 0");
                (k.clone(), v.clone(), 0usize)
            }
            Some(layer) => {
                let before = layer.len();
                assert_eq!(before, start_pos, "cache cursor out of step");
                layer.append(&k.data(), &v.data(), geom.kv_dim());
                (
                    Tensor::new(vec![layer.len(), geom.kv_dim()], layer.k.clone()),
                    Tensor::new(vec![layer.len(), geom.kv_dim()], layer.v.clone()),
                    before,
                )
            }
        };

        let ctx =
            grouped_causal_attention(&q, &k_all, &v_all, geom.n_heads, geom.n_kv_heads, hd, offset);
        x.add(&self.wo.forward(&ctx))
    }

    /// Gated feed-forward sublayer with residual.
    pub fn ffn_part(&self, x: &Tensor<E>, geom: &BlockGeom) -> Tensor<E> {
        let eps = E::from_f64(geom.norm_eps);
        let h2 = x.rms_norm(&self.mlp_norm, eps);
        let ff = self
            .w_down
            .forward(&self.w_gate.forward(&h2).silu().mul(&self.w_up.forward(&h2)));
        x.add(&ff)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.attn_norm"), self.attn_norm.clone()));
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
        out.push((format!("{prefix}.mlp_norm"), self.mlp_norm.clone()));
        self.w_gate.collect_params(&format!("{prefix}.w_gate"), out);
        self.w_up.collect_params(&format!("{prefix}.w_up"), out);
        self.w_down.collect_params(&format!("{prefix}.w_down"), out);
    }

    /// Low-rank delta parameters across all projections of this block.
    pub fn lora_params(&self) -> Vec<Tensor<E>> {
        let mut out = Vec::new();
        for lin in [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down,
        ] {
            out.extend(lin.lora_params());
        }
        out
    }

    /// A copy of this block whose projections share the frozen weights and
    /// carry fresh trainable low-rank deltas.
    pub fn with_lora(&self, rng: &mut rand_chacha::ChaCha8Rng, rank: usize, scale: f64) -> Self {
        Block {
            attn_norm: self.attn_norm.clone(),
            wq: self.wq.with_lora(rng, rank, scale),
            wk: self.wk.with_lora(rng, rank, scale),
            wv: self.wv.with_lora(rng, rank, scale),
            wo: self.wo.with_lora(rng, rank, scale),
            mlp_norm: self.mlp_norm.clone(),
            w_gate: self.w_gate.with_lora(rng, rank, scale),
            w_up: self.w_up.with_lora(rng, rank, scale),
            w_down: self.w_down.with_lora(rng, rank, scale),
        }
    }
}

/// Multi-head causal attention with grouped key-value heads. `offset` is
/// the number of key positions preceding the first query row.
pub fn grouped_causal_attention<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    offset: usize,
) -> Tensor<E> {
    let group = n_heads / n_kv_heads;
    let scale = E::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * head_dim, head_dim);
        let kv_head = h / group;
        let kh = k.slice_cols(kv_head * head_dim, head_dim);
        let vh = v.slice_cols(kv_head * head_dim, head_dim);
        let probs = qh.matmul_nt(&kh).scale(scale).causal_softmax(offset);
        heads.push(probs.matmul(&vh));
    }
    Tensor::concat_cols(&heads)
}

/// Per-layer key/value storage for incremental decoding. Append-only.
pub struct LayerKV<E: Elem> {
    k: Vec<E>,
    v: Vec<E>,
    width: usize,
}

impl<E: Elem> LayerKV<E> {
    fn new(width: usize) -> Self {
        LayerKV {
            k: Vec::new(),
            v: Vec::new(),
            width,
        }
    }

    fn len(&self) -> usize {
        self.k.len() / self.width
    }

    fn append(&mut self, k_rows: &[E], v_rows: &[E], width: usize) {
        assert_eq!(width, self.width);
        self.k.extend_from_slice(k_rows);
        self.v.extend_from_slice(v_rows);
    }
}

pub struct KVCache<E: Elem> {
    pub layers: Vec<LayerKV<E>>,
    max_seq_len: usize,
}

impl<E: Elem> KVCache<E> {
    pub fn new(cfg: &ModelConfig) -> Self {
        KVCache {
            layers: (0..cfg.n_layers).map(|_| LayerKV::new(cfg.kv_dim())).collect(),
            max_seq_len: cfg.max_seq_len,
        }
    }

    pub fn for_geom(geom: &BlockGeom, n_layers: usize, max_seq_len: usize) -> Self {
        KVCache {
            layers: (0..n_layers).map(|_| LayerKV::new(geom.kv_dim())).collect(),
            max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hidden states exposed by one forward pass: the embedding output plus the
/// output of every block (pre-final-norm), the post-norm final hidden, and
/// the logits.
pub struct ForwardTrace<E: Elem> {
    pub hidden: Vec<Tensor<E>>,
    pub final_hidden: Tensor<E>,
    pub logits: Tensor<E>,
}

impl<E: Elem> ForwardTrace<E> {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    /// Logits of the last position as a plain vector.
    pub fn last_logits(&self) -> Vec<E> {
        let v = self.logits.cols();
        let t = self.logits.rows();
        self.logits.data()[(t - 1) * v..].to_vec()
    }
}

/// Counters certifying computation reuse: how many passes each component
/// performed during an instrumented run.
#[derive(Debug, Default)]
pub struct PassCounters {
    /// Full-sequence prompt passes through the base model.
    pub base_prefills: Cell<u64>,
    /// Single-position incremental base passes (one per generated token).
    pub base_steps: Cell<u64>,
    /// Adapter evaluations during decoding.
    pub adapter_steps: Cell<u64>,
    /// Safety-classifier head evaluations.
    pub classifier_evals: Cell<u64>,
    /// Full passes through a separate (non-tap-reusing) model.
    pub separate_passes: Cell<u64>,
}

impl PassCounters {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn bump(c: Option<&PassCounters>, f: impl Fn(&PassCounters)) {
    if let Some(c) = c {
        f(c);
    }
}

pub struct Transformer<E: Elem = f32> {
    pub cfg: ModelConfig,
    pub embed: Tensor<E>,
    pub lm_head: Option<Tensor<E>>,
    pub layers: Vec<Block<E>>,
    pub final_norm: Tensor<E>,
}

impl<E: Elem> Clone for Transformer<E> {
    /// Shares parameter buffers. Used to attach adapters to a frozen base;
    /// never clone a model that is still being trained.
    fn clone(&self) -> Self {
        Transformer {
            cfg: self.cfg.clone(),
            embed: self.embed.clone(),
            lm_head: self.lm_head.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
        }
    }
}

impl<E: Elem> Transformer<E> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = rng_for(seed, "model/init");
        let geom = BlockGeom::of(&cfg);
        let embed = normal_param(&mut rng, vec![cfg.vocab_size, cfg.d_model], 0.02);
        let lm_head = if cfg.tie_lm_head {
            None
        } else {
            Some(normal_param(&mut rng, vec![cfg.vocab_size, cfg.d_model], 0.02))
        };
        let layers = (0..cfg.n_layers).map(|_| Block::init(&mut rng, &geom)).collect();
        let final_norm = Tensor::param(vec![cfg.d_model], vec![E::ONE; cfg.d_model]);
        Transformer {
            cfg,
            embed,
            lm_head,
            layers,
            final_norm,
        }
    }

    pub fn geom(&self) -> BlockGeom {
        BlockGeom::of(&self.cfg)
    }

    /// Forward pass over `tokens`. With a cache the tokens extend the cached
    /// sequence; without one they must start at position 0. When `tap` is
    /// false the per-layer hidden list is left empty (the arithmetic is
    /// identical either way).
    pub fn forward(
        &self,
        tokens: &[TokenId],
        mut cache: Option<&mut KVCache<E>>,
        tap: bool,
    ) -> ForwardTrace<E> {
        assert!(!tokens.is_empty(), "forward: empty token sequence");
        let start_pos = cache.as_deref().map_or(0, |c| c.len());
        let total = start_pos + tokens.len();
        let limit = cache.as_deref().map_or(self.cfg.max_seq_len, |c| c.max_seq_len);
        assert!(
            total <= limit,
            "forward: sequence length {total} exceeds max_seq_len {limit}"
        );
        for &t in tokens {
            assert!(
                (t as usize) < self.cfg.vocab_size,
                "forward: token id {t} out of vocabulary {}",
                self.cfg.vocab_size
            );
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let geom = self.geom();
        let mut x = self.embed.embedding(&ids);
        let mut hidden = Vec::new();
        if tap {
            hidden.push(x.clone());
        }
        for (i, block) in self.layers.iter().enumerate() {
            let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
            x = block.forward(&x, &geom, start_pos, layer_cache);
            if tap {
                hidden.push(x.clone());
            }
        }
        let final_hidden = x.rms_norm(&self.final_norm, E::from_f64(self.cfg.norm_eps));
        let head = self.lm_head.as_ref().unwrap_or(&self.embed);
        let logits = final_hidden.matmul_nt(head);
        ForwardTrace {
            hidden,
            final_hidden,
            logits,
        }
    }

    /// Trainable parameter count (tied heads contribute nothing extra).
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        out.push(("embed".to_string(), self.embed.clone()));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h.clone()));
        }
        for (i, b) in self.layers.iter().enumerate() {
            b.collect_params(&format!("layers.{i}"), &mut out);
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Marks every parameter as frozen. Downstream training can no longer
    /// touch the base weights.
    pub fn freeze(&self) {
        for p in self.params() {
            p.set_requires_grad(false);
        }
    }

    pub fn unfreeze(&self) {
        for p in self.params() {
            p.set_requires_grad(true);
        }
    }
}

/// Order-stable digest over a named parameter set: names, shapes, and
/// little-endian data bytes all feed the hash.
pub fn freeze_checksum<E: Elem>(named: &[(String, Tensor<E>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &dim in t.shape() {
            h.update((dim as u64).to_le_bytes());
        }
        for &v in t.data().iter() {
            h.update(v.to_f64().to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hook through which decoding-time logic (logit interpolation, targeted
/// alignment) adjusts the next-token distribution.
pub trait LogitTransform<E: Elem> {
    /// Called once with the prompt trace before any token is generated.
    fn on_prompt(&mut self, trace: &ForwardTrace<E>);
    /// Maps the current step's trace to the logits used for the argmax.
    fn transform(&mut self, step: &ForwardTrace<E>) -> Vec<E>;
}

/// Greedy argmax with ties broken by the lowest token id.
pub fn argmax<E: Elem>(logits: &[E]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding. Returns the prompt followed by up to `max_new`
/// generated tokens, stopping after `stop_token` is emitted. The transform,
/// when present, receives the prompt trace once and then every step trace.
pub fn generate_greedy<E: Elem>(
    model: &Transformer<E>,
    prompt: &[TokenId],
    max_new: usize,
    stop_token: Option<TokenId>,
    mut transform: Option<&mut dyn LogitTransform<E>>,
    counters: Option<&PassCounters>,
) -> Vec<TokenId> {
    no_grad(|| {
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return out;
        }
        let mut cache = KVCache::new(&model.cfg);
        let trace = model.forward(prompt, Some(&mut cache), true);
        bump(counters, |c| c.base_prefills.set(c.base_prefills.get() + 1));
        if let Some(t) = transform.as_deref_mut() {
            t.on_prompt(&trace);
        }
        let mut logits = match transform.as_deref_mut() {
            Some(t) => t.transform(&trace),
            None => trace.last_logits(),
        };
        for i in 0..max_new {
            let next = argmax(&logits);
            out.push(next);
            if Some(next) == stop_token
                || i + 1 == max_new
                || cache.len() + 1 > model.cfg.max_seq_len
            {
                break;
            }
            let step = model.forward(&[next], Some(&mut cache), true);
            bump(counters, |c| c.base_steps.set(c.base_steps.get() + 1));
            logits = match transform.as_deref_mut() {
                Some(t) => t.transform(&step),
                None => step.last_logits(),
            };
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 32,
            max_seq_len: 24,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        }
    }

    #[test]
    fn tapped_and_untapped_logits_are_bit_identical() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 1);
        let tokens = [1u32, 5, 9, 3];
        let a = m.forward(&tokens, None, true);
        let b = m.forward(&tokens, None, false);
        assert_eq!(a.logits.to_vec(), b.logits.to_vec());
        assert_eq!(a.hidden.len(), m.cfg.n_layers + 1);
        assert!(b.hidden.is_empty());
    }

    #[test]
    fn single_token_logits_shape() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 1);
        let t = m.forward(&[7], None, false);
        assert_eq!(t.logits.shape(), &[1, 32]);
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 2);
        let tokens = [1u32, 4, 9, 2, 30, 11, 8];
        let full = m.forward(&tokens, None, false);
        let mut cache = KVCache::new(&m.cfg);
        let mut last = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            let step = m.forward(&[t], Some(&mut cache), false);
            assert_eq!(cache.len(), i + 1);
            last = step.last_logits();
        }
        let want = full.last_logits();
        for (a, b) in last.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "cached {a} vs full {b}");
        }
    }

    #[test]
    fn prefill_then_steps_matches_full_forward() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 12);
        let tokens = [2u32, 8, 1, 19, 22, 5];
        let full = m.forward(&tokens, None, false);
        let mut cache = KVCache::new(&m.cfg);
        let _ = m.forward(&tokens[..3], Some(&mut cache), false);
        let mut last = Vec::new();
        for &t in &tokens[3..] {
            last = m.forward(&[t], Some(&mut cache), false).last_logits();
        }
        for (a, b) in last.iter().zip(&full.last_logits()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn causality_changing_later_tokens_preserves_earlier_logits() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 3);
        let a = m.forward(&[1, 2, 3, 4, 5], None, false);
        let b = m.forward(&[1, 2, 3, 9, 9], None, false);
        let v = m.cfg.vocab_size;
        let la = a.logits.to_vec();
        let lb = b.logits.to_vec();
        assert_eq!(&la[..3 * v], &lb[..3 * v], "prefix logits must be exact");
        assert_ne!(&la[3 * v..], &lb[3 * v..]);
    }

    #[test]
    fn count_params_embedding_only_model() {
        // vocab 10, d 4, tied head, no layers: embedding is 40 params.
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 0,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 8,
            max_seq_len: 8,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        let m: Transformer<f32> = Transformer::init(cfg, 0);
        assert_eq!(m.embed.numel(), 40);
        // Plus the final norm gain.
        assert_eq!(m.count_params(), 44);
    }

    #[test]
    fn count_params_matches_hand_sum_and_grows_with_depth() {
        let cfg = tiny_cfg();
        let m: Transformer<f32> = Transformer::init(cfg.clone(), 0);
        let d = cfg.d_model;
        let kv = cfg.n_kv_heads * (d / cfg.n_heads);
        let per_layer = d // attn_norm
            + d * d // wq
            + d * kv // wk
            + d * kv // wv
            + d * d // wo
            + d // mlp_norm
            + 3 * d * cfg.d_ff; // gate, up, down
        let expect = cfg.vocab_size * d + cfg.n_layers * per_layer + d;
        assert_eq!(m.count_params(), expect);

        let mut deeper = cfg;
        deeper.n_layers *= 2;
        let m2: Transformer<f32> = Transformer::init(deeper, 0);
        assert!(m2.count_params() > m.count_params());
    }

    #[test]
    fn freeze_checksum_stability_and_sensitivity() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 5);
        let a = freeze_checksum(&m.named_params());
        let b = freeze_checksum(&m.named_params());
        assert_eq!(a, b);
        {
            let p = &m.layers[0].wq.w;
            let mut d = p.data_mut();
            d[0] += 1e-7;
        }
        let c = freeze_checksum(&m.named_params());
        assert_ne!(a, c, "one-weight perturbation must change the digest");
    }

    #[test]
    fn generate_zero_tokens_returns_prompt() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 6);
        let prompt = [1u32, 2, 3];
        let out = generate_greedy(&m, &prompt, 0, None, None, None);
        assert_eq!(out, prompt);
    }

    #[test]
    fn identity_transform_matches_no_transform() {
        struct Identity;
        impl LogitTransform<f32> for Identity {
            fn on_prompt(&mut self, _t: &ForwardTrace<f32>) {}
            fn transform(&mut self, step: &ForwardTrace<f32>) -> Vec<f32> {
                step.last_logits()
            }
        }
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 7);
        let prompt = [1u32, 9, 4];
        let plain = generate_greedy(&m, &prompt, 8, None, None, None);
        let mut id = Identity;
        let hooked = generate_greedy(&m, &prompt, 8, None, Some(&mut id), None);
        assert_eq!(plain, hooked);
    }

    #[test]
    fn forcing_transform_pins_generation() {
        struct Force(usize);
        impl LogitTransform<f32> for Force {
            fn on_prompt(&mut self, _t: &ForwardTrace<f32>) {}
            fn transform(&mut self, step: &ForwardTrace<f32>) -> Vec<f32> {
                let mut l = step.last_logits();
                l[self.0] = 1e6;
                l
            }
        }
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 8);
        let out = generate_greedy(&m, &[1, 2], 5, None, Some(&mut Force(7)), None);
        assert_eq!(&out[2..], &[7, 7, 7, 7, 7]);
    }

    #[test]
    #[should_panic(expected = "exceeds max_seq_len")]
    fn overlong_sequence_rejected() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 9);
        let tokens: Vec<u32> = (0..25).map(|i| (i % 30) as u32).collect();
        let _ = m.forward(&tokens, None, false);
    }

    #[test]
    #[should_panic(expected = "out of vocabulary")]
    fn out_of_vocab_token_rejected() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 9);
        let _ = m.forward(&[1, 200], None, false);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn zero_lora_delta_is_identity() {
        let m: Transformer<f32> = Transformer::init(tiny_cfg(), 10);
        let mut rng = crate::rng::rng_for(11, "lora");
        let adapted = Transformer {
            cfg: m.cfg.clone(),
            embed: m.embed.clone(),
            lm_head: m.lm_head.clone(),
            layers: m.layers.iter().map(|b| b.with_lora(&mut rng, 4, 2.0)).collect(),
            final_norm: m.final_norm.clone(),
        };
        let tokens = [1u32, 3, 8, 2];
        let a = m.forward(&tokens, None, false).logits.to_vec();
        let b = adapted.forward(&tokens, None, false).logits.to_vec();
        assert_eq!(a, b, "zero-init low-rank delta must not change outputs");
    }
}
