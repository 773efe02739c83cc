use dsa_core::model::{ModelConfig, Transformer};
use dsa_core::optim::Optimizer;
use dsa_core::rng::rng_for;
use rand::Rng;

fn main() {
    // Task: predict token[i-2] at every position i>=2 of a random sequence.
    // A single attention layer solves this by attending exactly 2 back.
    let cfg = ModelConfig {
        vocab_size: 64, d_model: 32, n_layers: 1, n_heads: 2, n_kv_heads: 1,
        d_ff: 64, max_seq_len: 32, norm_eps: 1e-5, rope_base: 10000.0, tie_lm_head: true,
    };
    let model: Transformer<f32> = Transformer::init(cfg, 1);
    let params = model.params();
    let mut opt = Optimizer::adam(params, 2e-3);
    let mut rng = rng_for(5, "attn_probe");
    for step in 0..600 {
        opt.zero_grad();
        for _ in 0..8 {
            let len = 16;
            let seq: Vec<u32> = (0..len).map(|_| rng.gen_range(0..64u32)).collect();
            let trace = model.forward(&seq, None, false);
            // logits row i predicts seq[i-1] (offset-2 retrieval as next-token shift).
            let targets: Vec<usize> = (0..len).map(|i| if i >= 1 { seq[i - 1] as usize } else { 0 }).collect();
            let mask: Vec<bool> = (0..len).map(|i| i >= 2).collect();
            let loss = trace.logits.cross_entropy(&targets, Some(&mask)).unwrap().scale(1.0 / 8.0);
            loss.backward();
        }
        opt.step();
        if (step + 1) % 100 == 0 {
            let l = dsa_core::tensor::no_grad(|| {
                let mut tot = 0.0f64;
                let mut r = rng_for(step as u64, "e");
                for _ in 0..20 {
                    let seq: Vec<u32> = (0..16).map(|_| r.gen_range(0..64u32)).collect();
                    let trace = model.forward(&seq, None, false);
                    let targets: Vec<usize> = (0..16).map(|i| if i >= 1 { seq[i - 1] as usize } else { 0 }).collect();
                    let mask: Vec<bool> = (0..16).map(|i| i >= 2).collect();
                    tot += trace.logits.cross_entropy(&targets, Some(&mask)).unwrap().item() as f64;
                }
                tot / 20.0
            });
            println!("step {}: retrieval nll {:.4} (uniform {:.3})", step + 1, l, (64f64).ln());
        }
    }
}
