use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tailgen_core::backends::clock::SimulatedClock;
use tailgen_core::backends::ratelimit::{RateLimit, SlidingWindowLimiter};
use tailgen_core::dataset::synthetic_manifest;
use tailgen_core::imaging::FloatImage;
use tailgen_core::mix::{draw_lambda, mix, BalancedSampler};
use tailgen_core::templating::{parse_template1, render_template1, Origin};

fn templates(c: &mut Criterion) {
    let features: Vec<String> = ["thick white fur", "short rounded ears", "a bushy tail"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let text = render_template1("arctic fox", &features, "a windswept snowfield").unwrap();
    c.bench_function("template1 render", |b| {
        b.iter(|| {
            render_template1(
                black_box("arctic fox"),
                black_box(&features),
                "a windswept snowfield",
            )
        })
    });
    c.bench_function("template1 parse", |b| {
        b.iter(|| parse_template1(black_box(&text), 3, "arctic fox", Origin::Expanded))
    });
}

fn mixing(c: &mut Criterion) {
    let side = 224u32;
    let n = (side * side * 3) as usize;
    let a = FloatImage {
        width: side,
        height: side,
        data: (0..n).map(|i| (i % 256) as f64).collect(),
    };
    let b = FloatImage {
        width: side,
        height: side,
        data: (0..n).map(|i| ((i * 7) % 256) as f64).collect(),
    };
    c.bench_function("mix 224x224", |bench| {
        bench.iter(|| mix(black_box(&a), 1, black_box(&b), 7, 0.3, 1000))
    });
    c.bench_function("mix quantize 224x224", |bench| {
        let m = mix(&a, 1, &b, 7, 0.3, 1000).unwrap();
        bench.iter(|| black_box(&m.pixels).quantize())
    });
}

fn sampling(c: &mut Criterion) {
    let counts: Vec<usize> = (0..1000).map(|i| 1 + 1000 / (i + 1)).collect();
    let manifest = synthetic_manifest("bench", &counts);
    let sampler = BalancedSampler::new(&manifest).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("balanced sample, 1000 classes", |b| {
        b.iter(|| sampler.sample(&mut rng).1)
    });
    c.bench_function("lambda draw", |b| b.iter(|| draw_lambda(&mut rng, 1.0)));
}

fn rate_limiter(c: &mut Criterion) {
    c.bench_function("limiter: 1000 admissions at 50/min (simulated)", |b| {
        b.iter_batched(
            || {
                (
                    SlidingWindowLimiter::new(RateLimit::per_minute(50)).unwrap(),
                    SimulatedClock::new(),
                )
            },
            |(limiter, clock)| {
                for _ in 0..1000 {
                    limiter.acquire(&clock);
                }
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("limiter try_acquire, open window", |b| {
        // 1 ms steps keep at most 60000 entries live, under the capacity
        let limiter = SlidingWindowLimiter::new(RateLimit::per_minute(100_000)).unwrap();
        let mut t = Duration::ZERO;
        b.iter(|| {
            t += Duration::from_millis(1);
            limiter.try_acquire(t)
        })
    });
}

criterion_group!(benches, templates, mixing, sampling, rate_limiter);
criterion_main!(benches);
