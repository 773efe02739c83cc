use std::path::PathBuf;

fn main() {
    let t0 = std::time::Instant::now();
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or("/tmp/dsa_mini".into()));
    let cfg = dsa_core::pipeline::RunConfig::mini(42);
    match dsa_core::pipeline::run_all(&cfg, &dir) {
        Ok(out) => {
            println!("ok in {:.1}s", t0.elapsed().as_secs_f64());
            println!("pretrain: ppl {:.3} (untrained {:.3}), copy {:.2}", out.pretrain.held_out_ppl, out.pretrain.untrained_ppl, out.pretrain.copy_accuracy);
            for r in &out.guardrail.rows {
                println!("guardrail {}: auc {:.3} params {} overhead {:.3}%", r.method, r.auc_median, r.params, r.overhead_percent);
            }
            println!("tau {:.3} fpr {:.3} tpr {:.3}", out.guardrail.tau, out.guardrail.tau_val_fpr, out.guardrail.tau_val_tpr);
            println!("base: compliance {:.2} capability {:.2}", out.alignment.base_score.unsafe_compliance_rate, out.alignment.base_score.capability_accuracy);
            for m in &out.alignment.methods {
                println!("align {}: init_loss {:.4} margin {:.3}", m.method, m.initial_dpo_loss, m.val_reward_margin);
            }
            for (name, rec) in &out.manifest.stages {
                println!("stage {name}: skipped={} steps={} wall={:.1}s", rec.skipped, rec.training_steps, rec.wall_seconds);
            }
        }
        Err(e) => {
            println!("FAILED after {:.1}s: {e}", t0.elapsed().as_secs_f64());
            std::process::exit(1);
        }
    }
}
