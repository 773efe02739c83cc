use dsa_core::model::{generate_greedy, ModelConfig, Transformer};
use dsa_core::optim::{lr_schedule, Optimizer, ScheduleKind};
use dsa_core::rng::rng_for;
use dsa_core::synthbench::Vocab;
use dsa_core::tensor::no_grad;
use rand::Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(800);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let zero_init: bool = args.get(5).map(|s| s == "zero").unwrap_or(true);
    let cfg = ModelConfig {
        vocab_size: 256, d_model: d, n_layers: layers, n_heads: 4.min(d/16).max(2), n_kv_heads: 2.min(d/32).max(1),
        d_ff: 4*d, max_seq_len: 96, norm_eps: 1e-5, rope_base: 10000.0, tie_lm_head: true,
    };
    println!("cfg d={} L={} h={} kv={} zero_init={}", cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.n_kv_heads, zero_init);
    let model: Transformer<f32> = Transformer::init(cfg.clone(), 1);
    if !zero_init {
        // refill the zero-initialized output projections
        let mut r = rng_for(99, "refill");
        for b in &model.layers {
            for p in [&b.wo.w, &b.w_down.w] {
                let fan_in = p.rows() as f64;
                let mut dmut = p.data_mut();
                for v in dmut.iter_mut() { *v = (dsa_core::rng::normal(&mut r) / fan_in.sqrt()) as f32; }
            }
        }
    }
    // pure copy-task corpus
    let mut rng = rng_for(7, "data");
    let gen_seq = |rng: &mut rand_chacha::ChaCha8Rng| {
        let k = rng.gen_range(8..=16);
        let payload: Vec<u32> = (0..k).map(|_| rng.gen_range(32..200u32)).collect();
        let mut s = vec![Vocab::BOS, Vocab::TASK_COPY];
        s.extend(&payload);
        s.push(Vocab::SEP);
        s.extend(&payload);
        s.push(Vocab::EOS);
        s
    };
    let corpus: Vec<Vec<u32>> = (0..2000).map(|_| gen_seq(&mut rng)).collect();
    let params = model.params();
    let mut opt = Optimizer::adam(params, lr);
    let t0 = Instant::now();
    let mut order_rng = rng_for(3, "order");
    for step in 0..steps {
        opt.set_lr(lr_schedule(ScheduleKind::Cosine, step, steps, 0.1, lr));
        opt.zero_grad();
        for _ in 0..16 {
            let seq = &corpus[order_rng.gen_range(0..corpus.len())];
            let trace = model.forward(seq, None, false);
            let targets: Vec<usize> = seq.iter().skip(1).map(|&x| x as usize).collect();
            let loss = trace.logits.slice_rows(0, targets.len()).cross_entropy(&targets, None).unwrap().scale(1.0/16.0);
            loss.backward();
        }
        opt.step();
        if (step + 1) % 100 == 0 {
            let (sol_nll, acc) = no_grad(|| {
                let mut tot = 0.0; let mut cnt = 0; let mut ok = 0; let mut n = 0;
                let mut r2 = rng_for(step as u64, "eval");
                for _ in 0..30 {
                    let seq = gen_seq(&mut r2);
                    let sep = seq.iter().position(|&t| t == Vocab::SEP).unwrap();
                    let trace = model.forward(&seq, None, false);
                    let targets: Vec<usize> = seq.iter().skip(1).map(|&x| x as usize).collect();
                    // NLL on solution positions only
                    let mask: Vec<bool> = (0..targets.len()).map(|i| i >= sep).collect();
                    let l = trace.logits.slice_rows(0, targets.len()).cross_entropy(&targets, Some(&mask)).unwrap().item();
                    tot += l as f64; cnt += 1;
                    let prompt = &seq[..sep+1];
                    let target = &seq[sep+1..];
                    let out = generate_greedy(&model, prompt, target.len()+2, Some(Vocab::EOS), None, None);
                    n += 1;
                    if out[prompt.len()..] == *target { ok += 1; }
                }
                (tot / cnt as f64, ok as f64 / n as f64)
            });
            println!("step {}: {:.0}s sol_nll {:.3} copy_acc {:.2}", step+1, t0.elapsed().as_secs_f64(), sol_nll, acc);
        }
    }
}
