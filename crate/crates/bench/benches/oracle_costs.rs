//! Per-call costs of the building blocks: the tridiagonal solve behind the
//! sizing constants, one full oracle reply, one hypergradient evaluation,
//! and an end-to-end greedy-prober chain run.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bilevel_hardness::{
    build_laplacian, derive_params, deterministic_query, hyper_eval, run_algorithm, thomas_solve,
    Algorithm, BilevelPoint, DerivedInstanceParams, FunctionClassParams, Mode, RunConfig,
};

fn instance(l_g: f64, eps: f64) -> DerivedInstanceParams {
    derive_params(
        FunctionClassParams {
            l_f: 1.0,
            l_g,
            mu: 1.0,
            delta: 10.0,
            eps,
            sigma: 0.0,
        },
        Mode::Deterministic,
    )
    .unwrap()
}

fn bench_thomas_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("thomas_solve");
    for n in [16usize, 128, 1024] {
        let a = build_laplacian(n);
        let shift = 1.0 / (n as f64 * n as f64);
        let mut b = vec![0.0; n];
        b[n - 1] = 1.0;
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| thomas_solve(&a, shift, &b).unwrap())
        });
    }
    group.finish();
}

fn bench_oracle_reply(c: &mut Criterion) {
    let mut group = c.benchmark_group("deterministic_query");
    for (label, p) in [
        ("n4_T24", instance(100.0, 0.1)),
        ("n6_T216", instance(145.0, 0.1)),
    ] {
        let mut pt = BilevelPoint::origin(&p);
        for v in pt.y.iter_mut() {
            *v = p.lambda / p.c_l;
        }
        for v in pt.x.iter_mut() {
            *v = p.x_threshold();
        }
        group.bench_function(label, |bench| {
            bench.iter(|| deterministic_query(&p, &pt).unwrap())
        });
    }
    group.finish();
}

fn bench_hyper_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("hyper_eval");
    for (label, p) in [
        ("T24", instance(100.0, 0.1)),
        ("T216", instance(145.0, 0.1)),
    ] {
        let x = vec![p.x_threshold(); p.dim_x()];
        group.bench_function(label, |bench| bench.iter(|| hyper_eval(&p, &x).unwrap()));
    }
    group.finish();
}

fn bench_chain_run(c: &mut Criterion) {
    let p = instance(100.0, 0.2);
    let cfg = RunConfig {
        budget: 4 * p.t_len * p.n + 1000,
        measure_every: usize::MAX,
        seed: 0,
        keep_events: false,
    };
    c.bench_function("greedy_prober_full_chain_n4_T2", |bench| {
        bench.iter(|| run_algorithm(Algorithm::GreedyProber, &p, cfg).unwrap())
    });
}

criterion_group!(
    benches,
    bench_thomas_solve,
    bench_oracle_reply,
    bench_hyper_eval,
    bench_chain_run
);
criterion_main!(benches);
