use dsa_core::tensor::mm_nn;
use std::time::Instant;

fn main() {
    for (m, k, n) in [(48, 128, 128), (48, 128, 512), (256, 256, 256), (512, 512, 512), (40, 128, 256)] {
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.001).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.002).cos()).collect();
        let mut c = vec![0.0f32; m * n];
        let flop = 2.0 * m as f64 * k as f64 * n as f64;
        let reps = (2e9 / flop).max(3.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            c.iter_mut().for_each(|v| *v = 0.0);
            mm_nn(&a, &b, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("{}x{}x{}: {:.2} GFLOP/s ({} reps)", m, k, n, flop * reps as f64 / dt / 1e9, reps);
    }
}
