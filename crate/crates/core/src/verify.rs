//! Self-contained invariant suite: builds tiny throwaway models and checks
//! every load-bearing property of the engine and the adapter stack. The
//! CLI `verify` subcommand prints one line per check and fails the process
//! if any check fails.

use crate::alignment::{
    interpolate, AlignmentAdapter, LambdaPolicy, LldAdapter,
};
use crate::classifier::{PlrProbe, SafetyClassifier};
use crate::evalsuite::two_pass_oracle;
use crate::model::{
    freeze_checksum, generate_greedy, Block, BlockGeom, KVCache, ModelConfig, Transformer,
};
use crate::rng::rng_for;
use crate::side::{SideConfig, SideNetwork};
use crate::synthbench::Vocab;
use crate::tensor::{grad_check, no_grad, Tensor};
use rand::Rng;
use std::rc::Rc;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// The measured quantity the check thresholds on.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, value: f64, threshold: f64, pass: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            pass,
            value,
            threshold,
            detail,
        }
    }

    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self::new(
            name,
            value,
            threshold,
            value < threshold,
            format!("measured {value:.3e} < {threshold:.1e}"),
        )
    }

    fn exact_zero(name: &str, value: f64) -> Self {
        Self::new(
            name,
            value,
            0.0,
            value == 0.0,
            format!("measured {value:.3e}, required exactly 0"),
        )
    }
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
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
    }
}

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| crate::rng::normal(rng) * scale).collect();
    Tensor::new(shape, data)
}

/// Weighted-sum readout so scalar losses exercise every output element.
fn readout(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape.to_vec(), 1.0)
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Worst relative error over several random shapes for each primitive op.
pub fn gradcheck_primitives() -> Vec<(String, f64)> {
    let mut rng = rng_for(17, "verify/gradcheck");
    let h = 1e-5;
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| {
        let worst = out.iter_mut().find(|(n, _)| n == name);
        match worst {
            Some((_, e)) => {
                if err > *e {
                    *e = err;
                }
            }
            None => out.push((name.to_string(), err)),
        }
    };

    for trial in 0..10 {
        let m = 2 + trial % 3;
        let k = 3 + trial % 4;
        let n = 2 + (trial + 1) % 3;
        let x = rand_tensor(&mut rng, vec![m, k], 1.0);
        let y = rand_tensor(&mut rng, vec![k, n], 1.0);
        let w_mn = readout(&mut rng, &[m, n]);
        let w_mk = readout(&mut rng, &[m, k]);

        record(
            "matmul",
            grad_check(|t| t.matmul(&y).mul(&w_mn).sum_all(), &x, h),
        );
        let yt = rand_tensor(&mut rng, vec![n, k], 1.0);
        record(
            "matmul_nt",
            grad_check(|t| t.matmul_nt(&yt).mul(&w_mn).sum_all(), &x, h),
        );
        record(
            "softmax_rows",
            grad_check(|t| t.softmax_rows().mul(&w_mk).sum_all(), &x, h),
        );
        let w_mm = readout(&mut rng, &[m, m]);
        let keys = rand_tensor(&mut rng, vec![m, k], 1.0);
        record(
            "causal_softmax",
            grad_check(
                |t| {
                    t.matmul_nt(&keys)
                        .causal_softmax(0)
                        .mul(&w_mm)
                        .sum_all()
                },
                &x,
                h,
            ),
        );
        let gain = rand_tensor(&mut rng, vec![k], 0.5);
        record(
            "rms_norm",
            grad_check(|t| t.rms_norm(&gain, 1e-6).mul(&w_mk).sum_all(), &x, h),
        );
        record(
            "rms_norm_gain",
            grad_check(|g| x.rms_norm(g, 1e-6).mul(&w_mk).sum_all(), &gain, h),
        );
        let bias = rand_tensor(&mut rng, vec![k], 0.5);
        record(
            "layer_norm",
            grad_check(
                |t| t.layer_norm(&gain, &bias, 1e-6).mul(&w_mk).sum_all(),
                &x,
                h,
            ),
        );
        record(
            "silu",
            grad_check(|t| t.silu().mul(&w_mk).sum_all(), &x, h),
        );
        record(
            "sigmoid",
            grad_check(|t| t.sigmoid().mul(&w_mk).sum_all(), &x, h),
        );
        record(
            "softplus",
            grad_check(|t| t.softplus().mul(&w_mk).sum_all(), &x, h),
        );
        let targets: Vec<usize> = (0..m).map(|i| (i * 2 + trial) % k).collect();
        record(
            "cross_entropy",
            grad_check(|t| t.cross_entropy(&targets, None).unwrap(), &x, h),
        );
        let teacher = rand_tensor(&mut rng, vec![m, k], 1.0);
        record(
            "kl_divergence",
            grad_check(|t| t.kl_from_teacher(&teacher), &x, h),
        );
        record(
            "sequence_log_prob",
            grad_check(|t| t.sequence_log_prob(&targets, 0..m), &x, h),
        );
        let labels: Vec<f64> = (0..m * k).map(|i| (i % 2) as f64).collect();
        record(
            "bce_with_logits",
            grad_check(|t| t.bce_with_logits(&labels), &x, h),
        );
        if k % 2 == 0 {
            record(
                "rope",
                grad_check(
                    |t| t.rope(1, k, trial, 10000.0).mul(&w_mk).sum_all(),
                    &x,
                    h,
                ),
            );
        }
        record(
            "slice_concat",
            grad_check(
                |t| {
                    let a = t.slice_cols(0, k / 2 + 1);
                    let b = t.slice_cols(k / 2 + 1, k - k / 2 - 1);
                    Tensor::concat_cols(&[b, a]).mul(&w_mk).sum_all()
                },
                &x,
                h,
            ),
        );
        let gate = rand_tensor(&mut rng, vec![1], 0.3);
        record(
            "scale_by",
            grad_check(|t| t.scale_by(&gate).mul(&w_mk).sum_all(), &x, h),
        );
        record(
            "embedding",
            grad_check(
                |t| t.embedding(&[0, 1, 1, 0]).mul(&readout_like(&mut rng_for(trial as u64, "ro"), 4, k)).sum_all(),
                &x.detach(),
                h,
            ),
        );
    }
    out
}

fn readout_like(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    rand_tensor(rng, vec![rows, cols], 1.0)
}

/// Gradient checks through composite structures: a full attention block, a
/// side block with cross-attention, and a duplicated block with live
/// low-rank deltas.
pub fn gradcheck_composites() -> Vec<(String, f64)> {
    let mut rng = rng_for(23, "verify/composites");
    let h = 1e-5;
    let mut out = Vec::new();

    // Attention + feed-forward block.
    {
        let geom = BlockGeom {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 16,
            norm_eps: 1e-5,
            rope_base: 10000.0,
        };
        let block: Block<f64> = Block::init(&mut rng_for(5, "verify/block"), &geom);
        // Zero-init projections hide gradient paths; fill them in.
        for p in [&block.wo.w, &block.w_down.w] {
            let mut d = p.data_mut();
            let mut r = rng_for(6, "verify/fill");
            for v in d.iter_mut() {
                *v = crate::rng::normal(&mut r) * 0.3;
            }
        }
        let x = rand_tensor(&mut rng, vec![4, 8], 0.7);
        let w = readout(&mut rng, &[4, 8]);
        let err = grad_check(|t| block.forward(t, &geom, 0, None).mul(&w).sum_all(), &x, h);
        out.push(("attention_block".to_string(), err));
    }

    // Side block with cross-attention, checked end to end through the
    // ladder stem and both attention paths.
    {
        let base_cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 16,
            max_seq_len: 16,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        let side_cfg = SideConfig::from_base(&base_cfg, 2, 1, Some(3));
        let side: SideNetwork<f64> = SideNetwork::init(side_cfg, 7);
        for p in side.params() {
            if p.to_vec().iter().all(|&v| v == 0.0) {
                let mut d = p.data_mut();
                let mut r = rng_for(8, "verify/fill_side");
                for v in d.iter_mut() {
                    *v = crate::rng::normal(&mut r) * 0.3;
                }
            }
        }
        let t_len = 3;
        let taps: Vec<Tensor<f64>> = (0..3)
            .map(|_| rand_tensor(&mut rng, vec![t_len, 8], 0.7))
            .collect();
        let w = readout(&mut rng, &[t_len, 4]);
        let probe = taps[1].clone();
        let err = grad_check(
            |t| {
                let full = vec![taps[0].clone(), t.clone(), taps[2].clone()];
                side.forward_full(&full).mul(&w).sum_all()
            },
            &probe,
            h,
        );
        out.push(("side_block_cross_attention".to_string(), err));
    }

    // Duplicated block with non-zero low-rank deltas.
    {
        let base: Transformer<f64> = Transformer::init(tiny_cfg(), 31);
        let lld = LldAdapter::init(&base, 1, 4, 32);
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
            let mut r = rng_for(9, "verify/fill_lld");
            for v in d.iter_mut() {
                *v = crate::rng::normal(&mut r) * 0.1;
            }
        }
        let x = rand_tensor(&mut rng, vec![3, 32], 0.5);
        let w = readout(&mut rng, &[3, 256]);
        let err = grad_check(
            |t| lld.logits_from_hidden(t, 0, None).mul(&w).sum_all(),
            &x,
            h,
        );
        out.push(("duplicated_lora_block".to_string(), err));
    }
    out
}

// ---------------------------------------------------------------------------
// Identity and equivalence checks
// ---------------------------------------------------------------------------

/// Maximum deviation of the interpolation endpoints from the pure
/// distributions, over random logits. Exposed with a pluggable
/// interpolation function so a deliberately broken implementation is
/// caught (mutation testing).
pub fn endpoint_identity_deviation(
    interp: impl Fn(&Tensor<f32>, &Tensor<f32>, f64) -> Tensor<f32>,
) -> f64 {
    let mut rng = rng_for(3, "verify/endpoints");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let v = 2 + rng.gen_range(0..30);
        let zb: Tensor<f32> =
            Tensor::new(vec![1, v], (0..v).map(|_| rng.gen_range(-8.0..8.0)).collect());
        let zd: Tensor<f32> =
            Tensor::new(vec![1, v], (0..v).map(|_| rng.gen_range(-8.0..8.0)).collect());
        let top = interp(&zb, &zd, 1.0).to_vec();
        let want_top = zb.softmax_rows().to_vec();
        let bottom = interp(&zb, &zd, 0.0).to_vec();
        let want_bottom = zd.softmax_rows().to_vec();
        for (a, b) in top.iter().zip(&want_top).chain(bottom.iter().zip(&want_bottom)) {
            let dev = (*a as f64 - *b as f64).abs();
            if dev > worst {
                worst = dev;
            }
        }
    }
    worst
}

/// Shift invariance of the stable softmax plus row normalization. The
/// shifted inputs themselves must be representable, so f32 uses moderate
/// shifts and the 64-bit mode carries the large-magnitude cases; row sums
/// are checked in f32 up to magnitude 1e4.
pub fn softmax_shift_invariance_deviation() -> f64 {
    let mut rng = rng_for(4, "verify/shift");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let v = 2 + rng.gen_range(0..20);
        // f32: shifts small enough that z + c carries no input rounding
        // beyond a few ulp.
        let z: Vec<f32> = (0..v).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
        let c = rng.gen_range(-4.0f32..4.0);
        let t: Tensor<f32> = Tensor::new(vec![1, v], z.clone());
        let shifted: Tensor<f32> = Tensor::new(vec![1, v], z.iter().map(|x| x + c).collect());
        let a = t.softmax_rows().to_vec();
        let b = shifted.softmax_rows().to_vec();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((*x as f64 - *y as f64).abs());
        }
        // f64: arbitrary shifts up to 1e4.
        let z64: Vec<f64> = (0..v).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let c64: f64 = rng.gen_range(-1e4..1e4);
        let t64: Tensor<f64> = Tensor::new(vec![1, v], z64.clone());
        let shifted64: Tensor<f64> =
            Tensor::new(vec![1, v], z64.iter().map(|x| x + c64).collect());
        for (x, y) in t64
            .softmax_rows()
            .to_vec()
            .iter()
            .zip(shifted64.softmax_rows().to_vec().iter())
        {
            worst = worst.max((x - y).abs());
        }
        // Row sums stay 1 in f32 even at magnitude 1e4.
        let big: Vec<f32> = (0..v).map(|_| rng.gen_range(-1e4f32..1e4)).collect();
        let sum: f32 = Tensor::<f32>::new(vec![1, v], big).softmax_rows().to_vec().iter().sum();
        worst = worst.max((sum as f64 - 1.0).abs());
    }
    worst
}

pub fn kl_nonnegativity_min() -> f64 {
    let mut rng = rng_for(5, "verify/klnn");
    let mut min = f64::INFINITY;
    for _ in 0..1000 {
        let v = 2 + rng.gen_range(0..12);
        let a: Tensor<f64> =
            Tensor::new(vec![1, v], (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let b: Tensor<f64> =
            Tensor::new(vec![1, v], (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let kl = b.kl_from_teacher(&a).item();
        if kl < min {
            min = kl;
        }
    }
    min
}

/// Largest per-logit deviation between cached incremental decoding and full
/// recomputation over random prompts.
pub fn kv_cache_deviation(prompts: usize) -> f64 {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 77);
    let mut rng = rng_for(6, "verify/kv");
    let mut worst = 0.0f64;
    no_grad(|| {
        for _ in 0..prompts {
            let len = rng.gen_range(3..14);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256)).collect();
            let full = base.forward(&tokens, None, false).last_logits();
            let mut cache = KVCache::new(&base.cfg);
            let mut last = Vec::new();
            for &t in &tokens {
                last = base.forward(&[t], Some(&mut cache), false).last_logits();
            }
            for (a, b) in last.iter().zip(&full) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    });
    worst
}

struct OracleSetup {
    base: Transformer<f32>,
    adapters: Vec<AlignmentAdapter<f32>>,
    policies: Vec<LambdaPolicy<f32>>,
}

fn oracle_setup() -> OracleSetup {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 91);
    base.freeze();
    let side_cfg = SideConfig::from_base(&base.cfg, 4, 1, None);
    let cross_cfg = SideConfig::from_base(&base.cfg, 4, 1, Some(4));
    let mut adapters = vec![
        AlignmentAdapter::LstGen {
            side: SideNetwork::init(side_cfg, 1),
        },
        AlignmentAdapter::LstPlus {
            side: SideNetwork::init(cross_cfg, 2),
        },
        AlignmentAdapter::Lld(LldAdapter::init(&base, 1, 4, 3)),
    ];
    // Give every adapter non-trivial weights so the oracle compares real
    // computation, not zero-init shortcuts.
    for adapter in &mut adapters {
        for p in adapter.params() {
            let mut d = p.data_mut();
            let mut r = rng_for(p.numel() as u64, "verify/oracle_fill");
            for v in d.iter_mut() {
                *v += (crate::rng::normal(&mut r) as f32) * 0.05;
            }
        }
    }
    let probe: PlrProbe<f32> = PlrProbe::init(base.cfg.d_model, 1);
    {
        let mut w = probe.w.data_mut();
        let mut r = rng_for(13, "verify/probe");
        for v in w.iter_mut() {
            *v = (crate::rng::normal(&mut r) as f32) * 0.2;
        }
    }
    let classifier = Rc::new(SafetyClassifier::Plr(probe));
    let policies = vec![
        LambdaPolicy::Fixed { lambda: 0.5 },
        LambdaPolicy::GatedStep {
            classifier,
            tau: 0.5,
            lambda_unsafe: 0.0,
        },
    ];
    OracleSetup {
        base,
        adapters,
        policies,
    }
}

pub struct OracleSummary {
    pub token_mismatches: usize,
    pub max_deviation: f64,
    pub prompts: usize,
}

/// Shared-pass vs naive two-pass targeted generation across every adapter
/// kind and policy.
pub fn oracle_equivalence(prompts_per_case: usize, max_new: usize) -> OracleSummary {
    let setup = oracle_setup();
    let mut rng = rng_for(7, "verify/oracle_prompts");
    let prompts: Vec<Vec<u32>> = (0..prompts_per_case)
        .map(|_| {
            let len = rng.gen_range(3..10);
            (0..len).map(|_| rng.gen_range(0..256u32)).collect()
        })
        .collect();
    let mut mismatches = 0;
    let mut max_dev = 0.0f64;
    let mut total = 0;
    for adapter in &setup.adapters {
        for policy in &setup.policies {
            let report = two_pass_oracle(&setup.base, adapter, policy, &prompts, max_new);
            mismatches += report.token_mismatches;
            max_dev = max_dev.max(report.max_logit_deviation);
            total += report.prompts;
        }
    }
    OracleSummary {
        token_mismatches: mismatches,
        max_deviation: max_dev,
        prompts: total,
    }
}

/// Trains a probe briefly and confirms the base digest never moves.
pub fn freeze_checksum_invariance() -> bool {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 55);
    base.freeze();
    let before = freeze_checksum(&base.named_params());
    let splits = crate::synthbench::gen_safety_set(2, 100, 0.5).unwrap();
    let train = crate::classifier::prepare_examples(&base, &splits.train, true);
    let val = crate::classifier::prepare_examples(&base, &splits.val, true);
    let settings = crate::classifier::TrainSettings {
        epochs: 2,
        patience: 3,
        batch: 16,
        lr_grid: vec![1e-3],
        seed: 1,
    };
    let d = base.cfg.d_model;
    let mut make = move |_s: u64| SafetyClassifier::Plr(PlrProbe::init(d, 1));
    let _ = crate::classifier::train_classifier_generic(&mut make, &train, &val, &settings, Some(0.01))
        .unwrap();
    before == freeze_checksum(&base.named_params())
}

/// Targeted generation with a never-fires gate must equal base greedy
/// decoding token for token.
pub fn safe_passthrough_identity() -> bool {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 99);
    base.freeze();
    let lld = LldAdapter::init(&base, 1, 4, 12);
    let adapter = AlignmentAdapter::Lld(lld);
    for p in adapter.params() {
        let mut d = p.data_mut();
        for v in d.iter_mut() {
            *v += 0.07;
        }
    }
    let probe = PlrProbe::init(base.cfg.d_model, 0);
    probe.b.data_mut()[0] = -40.0;
    let policy = LambdaPolicy::GatedStep {
        classifier: Rc::new(SafetyClassifier::Plr(probe)),
        tau: 0.5,
        lambda_unsafe: 0.0,
    };
    let mut rng = rng_for(8, "verify/safe_pass");
    for _ in 0..20 {
        let len = rng.gen_range(3..10);
        let prompt: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256u32)).collect();
        let (tokens, _) =
            crate::alignment::targeted_generate(&base, &adapter, &policy, &prompt, 10, None);
        let plain = generate_greedy(&base, &prompt, 10, Some(Vocab::EOS), None, None);
        if tokens != plain {
            return false;
        }
    }
    true
}

/// Zero-delta duplicated layers must reproduce base logits under every
/// lambda.
pub fn lld_zero_init_identity() -> bool {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 45);
    let lld = LldAdapter::init(&base, 2, 4, 1);
    let mut rng = rng_for(9, "verify/lld_zero");
    no_grad(|| {
        for _ in 0..10 {
            let len = rng.gen_range(2..12);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256u32)).collect();
            let trace = base.forward(&tokens, None, true);
            let z_dsa = lld.logits_from_hidden(&trace.hidden[lld.start_layer], 0, None);
            // The duplicated path reproduces the base logits bit for bit.
            if z_dsa.to_vec() != trace.logits.to_vec() {
                return false;
            }
            // Endpoints exact; interior lambdas within rounding of one
            // combination step (lambda*z + (1-lambda)*z is a few-ulp
            // perturbation of z in float arithmetic).
            let want = trace.logits.softmax_rows().to_vec();
            for lambda in [0.0, 1.0] {
                if interpolate(&trace.logits, &z_dsa, lambda).to_vec() != want {
                    return false;
                }
            }
            for lambda in [0.3, 0.7] {
                let m = interpolate(&trace.logits, &z_dsa, lambda).to_vec();
                for (a, b) in m.iter().zip(&want) {
                    if (a - b).abs() > 1e-6 {
                        return false;
                    }
                }
            }
        }
        true
    })
}

pub fn determinism_check() -> bool {
    let run = || {
        let model: Transformer<f32> = Transformer::init(tiny_cfg(), 7);
        let params = model.params();
        let mut opt = crate::optim::Optimizer::adam(params, 1e-3);
        let mut rng = rng_for(1, "verify/determinism");
        for _ in 0..5 {
            opt.zero_grad();
            let len = rng.gen_range(3..10);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256u32)).collect();
            let trace = model.forward(&tokens, None, false);
            let targets: Vec<usize> = tokens.iter().skip(1).map(|&t| t as usize).collect();
            let loss = trace
                .logits
                .slice_rows(0, targets.len())
                .cross_entropy(&targets, None)
                .unwrap();
            loss.backward();
            opt.step();
        }
        freeze_checksum(&model.named_params())
    };
    run() == run()
}

pub fn checkpoint_roundtrip_identity() -> bool {
    let dir = std::env::temp_dir().join(format!("verify_ckpt_{}", std::process::id()));
    let model: Transformer<f32> = Transformer::init(tiny_cfg(), 21);
    let ok = (|| -> crate::error::Result<bool> {
        crate::checkpoint::save_model(&dir, &model)?;
        let m1 = std::fs::read(dir.join("manifest.json"))?;
        let w1 = std::fs::read(dir.join("weights.bin"))?;
        let ck = crate::checkpoint::Checkpoint::load(&dir)?;
        ck.save(&dir)?;
        Ok(m1 == std::fs::read(dir.join("manifest.json"))?
            && w1 == std::fs::read(dir.join("weights.bin"))?)
    })()
    .unwrap_or(false);
    std::fs::remove_dir_all(&dir).ok();
    ok
}

pub fn causality_check() -> bool {
    let base: Transformer<f32> = Transformer::init(tiny_cfg(), 63);
    let mut rng = rng_for(10, "verify/causality");
    no_grad(|| {
        for _ in 0..20 {
            let len = rng.gen_range(4..12);
            let mut a: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256u32)).collect();
            let cut = rng.gen_range(1..len);
            let la = base.forward(&a, None, false).logits.to_vec();
            a[cut as usize..].iter_mut().for_each(|t| *t = (*t + 31) % 256);
            let lb = base.forward(&a, None, false).logits.to_vec();
            let v = base.cfg.vocab_size;
            if la[..cut as usize * v] != lb[..cut as usize * v] {
                return false;
            }
        }
        true
    })
}

/// The full suite, in print order.
pub fn verify_all() -> Vec<CheckResult> {
    let mut results = Vec::new();

    for (name, err) in gradcheck_primitives() {
        results.push(CheckResult::below(&format!("gradcheck/{name}"), err, 1e-5));
    }
    for (name, err) in gradcheck_composites() {
        results.push(CheckResult::below(&format!("gradcheck/{name}"), err, 1e-5));
    }

    results.push(CheckResult::exact_zero(
        "interpolate/endpoint_identities",
        endpoint_identity_deviation(|a, b, l| interpolate(a, b, l)),
    ));
    results.push(CheckResult::below(
        "softmax/shift_invariance_and_row_sums",
        softmax_shift_invariance_deviation(),
        1e-6,
    ));
    let klmin = kl_nonnegativity_min();
    results.push(CheckResult::new(
        "kl/nonnegative",
        klmin,
        -1e-9,
        klmin >= -1e-9,
        format!("min KL over random pairs {klmin:.3e} >= -1e-9"),
    ));
    results.push(CheckResult::below(
        "kv_cache/matches_full_forward",
        kv_cache_deviation(20),
        1e-5,
    ));
    let oracle = oracle_equivalence(6, 8);
    results.push(CheckResult::new(
        "oracle/token_mismatches",
        oracle.token_mismatches as f64,
        0.0,
        oracle.token_mismatches == 0,
        format!("{} mismatches over {} prompt runs", oracle.token_mismatches, oracle.prompts),
    ));
    results.push(CheckResult::below(
        "oracle/max_logit_deviation",
        oracle.max_deviation,
        1e-6,
    ));
    let b = lld_zero_init_identity();
    results.push(CheckResult::new(
        "lld/zero_init_is_base",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "duplicated layers with zero deltas reproduce base logits exactly".to_string(),
    ));
    let b = safe_passthrough_identity();
    results.push(CheckResult::new(
        "targeted/safe_prompt_passthrough",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "safe-gated generation equals base greedy decoding".to_string(),
    ));
    let b = freeze_checksum_invariance();
    results.push(CheckResult::new(
        "base/frozen_under_training",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "base digest unchanged by adapter training".to_string(),
    ));
    let b = causality_check();
    results.push(CheckResult::new(
        "model/causality",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "prefix logits unchanged by suffix edits".to_string(),
    ));
    let b = checkpoint_roundtrip_identity();
    results.push(CheckResult::new(
        "checkpoint/roundtrip_bytes",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "load-save reproduces both files byte for byte".to_string(),
    ));
    let b = determinism_check();
    results.push(CheckResult::new(
        "determinism/seeded_training",
        if b { 0.0 } else { 1.0 },
        0.0,
        b,
        "two same-seed runs give bit-identical parameters".to_string(),
    ));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_lambda_clamp_is_caught() {
        // The endpoint-identity check must fail for an implementation that
        // quietly clamps lambda = 1 to 0.999.
        let dev = endpoint_identity_deviation(|a, b, l| {
            let l = if l == 1.0 { 0.999 } else { l };
            interpolate(a, b, l)
        });
        assert!(dev > 0.0, "mutated interpolation must break the identity");
        // And the honest implementation passes it.
        let dev = endpoint_identity_deviation(|a, b, l| interpolate(a, b, l));
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn suite_reports_every_check() {
        // Cheap subset sanity: the full suite runs in the acceptance tests;
        // here just check plumbing on a couple of fast members.
        assert!(checkpoint_roundtrip_identity());
        assert!(causality_check());
    }
}
