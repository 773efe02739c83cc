use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsa_core::evalsuite::{flop_count, AdapterFlopSpec};
use dsa_core::model::{generate_greedy, ModelConfig, Transformer};
use dsa_core::tensor::{mm_nn, no_grad, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(48usize, 128usize, 128usize), (48, 128, 512), (256, 256, 256)] {
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.001).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.002).cos()).collect();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(m, k, n),
            |bench, _| {
                let mut out = vec![0.0f32; m * n];
                bench.iter(|| {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    mm_nn(&a, &b, &mut out, m, k, n);
                    std::hint::black_box(out[0])
                });
            },
        );
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let model: Transformer<f32> = Transformer::init(ModelConfig::compact_default(), 7);
    model.freeze();
    let tokens: Vec<u32> = (0..48).map(|i| 32 + (i * 7 % 160) as u32).collect();
    c.bench_function("base_forward_48_tokens", |b| {
        b.iter(|| no_grad(|| std::hint::black_box(model.forward(&tokens, None, true).logits.item_count())))
    });
    c.bench_function("greedy_generate_16_tokens", |b| {
        b.iter(|| std::hint::black_box(generate_greedy(&model, &tokens[..8], 16, None, None, None).len()))
    });
}

trait ItemCount {
    fn item_count(&self) -> usize;
}

impl ItemCount for Tensor<f32> {
    fn item_count(&self) -> usize {
        self.numel()
    }
}

fn bench_flops(c: &mut Criterion) {
    let cfg = ModelConfig::qwen7b_reference();
    c.bench_function("flop_count_reference", |b| {
        b.iter(|| {
            std::hint::black_box(
                flop_count(
                    &cfg,
                    Some(&AdapterFlopSpec::Lst {
                        scale_hidden: 16,
                        scale_heads: 2,
                    }),
                    500,
                )
                .total(),
            )
        })
    });
}

criterion_group!(benches, bench_matmul, bench_forward, bench_flops);
criterion_main!(benches);
