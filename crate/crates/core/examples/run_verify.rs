fn main() {
    let t0 = std::time::Instant::now();
    let results = dsa_core::verify::verify_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {} ({})", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.pass {
            failed += 1;
        }
    }
    println!("{} checks, {} failed, {:.1}s", results.len(), failed, t0.elapsed().as_secs_f64());
    std::process::exit(if failed == 0 { 1 } else { 1 }.min(failed));
}
