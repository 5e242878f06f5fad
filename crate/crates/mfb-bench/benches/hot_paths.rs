//! Criterion benchmarks for the solver's hot paths: payoff evaluation,
//! copula sampling, one Adam training step, and a small exact-LP solve.

use criterion::{criterion_group, criterion_main, Criterion};
use mfb_core::{
    discretize, e1_market, product_price, sample_copula, solve_primal, BoundProblem, Direction,
    MarketSpec, PayoffExpr, PriceConstraint, Trainer, TrainerConfig, DEFAULT_CELL_CAP,
};

fn bench_payoff_eval(c: &mut Criterion) {
    let spec = e1_market();
    let batch = sample_copula(&spec, 4096, 1).unwrap();
    let payoff = PayoffExpr::parse("(max(x1, x2, x3) - 6)^+", 3).unwrap();
    c.bench_function("payoff_eval_4096_rows_d3", |b| {
        b.iter(|| payoff.eval_batch(&batch.data.view()).unwrap())
    });
}

fn bench_copula_sampling(c: &mut Criterion) {
    let spec = e1_market();
    let mut seed = 0u64;
    c.bench_function("copula_sample_4096_rows_d3", |b| {
        b.iter(|| {
            seed = seed.wrapping_add(1);
            sample_copula(&spec, 4096, seed).unwrap()
        })
    });
}

fn bench_training_step(c: &mut Criterion) {
    let spec = e1_market();
    let target = PayoffExpr::parse("(max(x1, x2, x3) - 6)^+", 3).unwrap();
    let problem = BoundProblem {
        spec,
        target,
        constraints: vec![],
        direction: Direction::Upper,
    };
    // A huge nominal budget keeps the learning-rate schedule flat while the
    // benchmark drives individual steps.
    let config = TrainerConfig {
        iterations: usize::MAX / 2,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(&problem, &config).unwrap();
    c.bench_function("train_step_d3_batch128", |b| {
        b.iter(|| trainer.step().unwrap())
    });
}

fn bench_small_lp(c: &mut Criterion) {
    let spec = MarketSpec::new(
        vec![10.0, 10.0],
        vec![0.3, 0.4],
        vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        1.5,
    )
    .unwrap();
    let instance = discretize(&spec, &[20, 20]).unwrap();
    let target = PayoffExpr::parse("(max(x1, x2) - 10)^+", 2).unwrap();
    let basket = PayoffExpr::parse("(avg(x1, x2) - 10)^+", 2).unwrap();
    let constraints = vec![PriceConstraint::exact(
        basket.clone(),
        product_price(&instance, &basket).unwrap(),
    )];
    let mut group = c.benchmark_group("lp");
    group.sample_size(20);
    group.bench_function("solve_20x20_one_constraint", |b| {
        b.iter(|| {
            solve_primal(
                &instance,
                &target,
                Direction::Upper,
                &constraints,
                DEFAULT_CELL_CAP,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_payoff_eval,
    bench_copula_sampling,
    bench_training_step,
    bench_small_lp
);
criterion_main!(benches);
