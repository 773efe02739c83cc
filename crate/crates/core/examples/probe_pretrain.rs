use dsa_core::model::{ModelConfig, Transformer};
use dsa_core::optim::{lr_schedule, Optimizer, ScheduleKind};
use dsa_core::rng::{derive_seed, rng_for};
use dsa_core::synthbench::{gen_capability_eval, gen_corpus, Vocab};
use dsa_core::tensor::no_grad;
use rand::Rng;
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(900);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let corpus = gen_corpus(derive_seed(42, "data/corpus"), 2400);
    let probes = gen_capability_eval(derive_seed(42, "data/capability_eval"), 40);
    let held = &corpus[corpus.len() - 60..];
    let train = &corpus[..corpus.len() - 60];
    let model: Transformer<f32> = Transformer::init(ModelConfig::compact_default(), derive_seed(42, "pretrain/init"));

    let eval = |model: &Transformer<f32>| -> (f64, f64) {
        no_grad(|| {
            let mut tot = 0.0;
            let mut cnt = 0;
            for seq in held {
                let t = model.forward(seq, None, false);
                let targets: Vec<usize> = seq.iter().skip(1).map(|&x| x as usize).collect();
                let l = t.logits.slice_rows(0, targets.len()).cross_entropy(&targets, None).unwrap().item();
                tot += l as f64 * targets.len() as f64;
                cnt += targets.len();
            }
            let ppl = (tot / cnt as f64).exp();
            let mut ok = 0;
            let mut n = 0;
            for ex in &probes {
                if ex.prompt[1] != Vocab::TASK_COPY { continue; }
                n += 1;
                let out = dsa_core::model::generate_greedy(model, &ex.prompt, ex.target.len() + 4, Some(Vocab::EOS), None, None);
                if out[ex.prompt.len()..] == ex.target[..] { ok += 1; }
            }
            (ppl, ok as f64 / n as f64)
        })
    };

    let params = model.params();
    let mut opt = Optimizer::adam(params, lr);
    let mut rng = rng_for(derive_seed(42, "pretrain/train"), "pretrain/order");
    let t0 = Instant::now();
    for step in 0..steps {
        opt.set_lr(lr_schedule(ScheduleKind::Cosine, step, steps, 0.1, lr));
        opt.zero_grad();
        let inv = 1.0 / batch as f32;
        for _ in 0..batch {
            let i = rng.gen_range(0..train.len());
            let seq = &train[i];
            let trace = model.forward(seq, None, false);
            let targets: Vec<usize> = seq.iter().skip(1).map(|&x| x as usize).collect();
            let loss = trace.logits.slice_rows(0, targets.len()).cross_entropy(&targets, None).unwrap().scale(inv);
            loss.backward();
        }
        opt.step();
        if (step + 1) % 150 == 0 {
            let (ppl, copy) = eval(&model);
            println!("step {}: {:.0}s ppl {:.2} copy {:.2}", step + 1, t0.elapsed().as_secs_f64(), ppl, copy);
        }
    }
}
