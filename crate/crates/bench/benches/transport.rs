use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use qfpat_bench::Fixture;
use qfpat_core::rte::Sense;
use qfpat_core::{solve_forward, solve_rte, SolverOptions};

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    for n in [16, 32] {
        let f = Fixture::new(n, 64);
        let st = f.medium.sigma_t_x();
        let iso = vec![1.0; f.disc.n_cells()];
        group.bench_with_input(BenchmarkId::from_parameter(f.disc.n_cells()), &n, |b, _| {
            b.iter(|| f.disc.sweep(black_box(st.values()), Some(&iso), None, Some(&f.sources[0]), Sense::Forward))
        });
    }
    group.finish();
}

fn solve(c: &mut Criterion) {
    let f = Fixture::new(32, 64);
    let p = f.excitation();
    let mut group = c.benchmark_group("solve_32x32_64");
    group.sample_size(10);
    for (name, opts) in [("source_iteration", SolverOptions::source_iteration(1e-10)), ("krylov", SolverOptions::krylov(1e-10))] {
        group.bench_function(name, |b| b.iter(|| solve_rte(&f.disc, black_box(&p), &opts).unwrap()));
    }
    group.bench_function("coupled_forward", |b| {
        b.iter(|| solve_forward(&f.disc, &f.medium, &f.sources[0], &SolverOptions::krylov(1e-10)).unwrap())
    });
    group.finish();
}

fn apply_pi(c: &mut Criterion) {
    let f = Fixture::new(16, 16);
    let op = f.block_operator(SolverOptions::krylov(1e-10));
    let x = f.perturbation();
    let r = op.apply_pi(&x).unwrap();
    let mut group = c.benchmark_group("block_operator_16x16_16");
    group.sample_size(10);
    group.bench_function("apply_pi", |b| b.iter(|| op.apply_pi(black_box(&x)).unwrap()));
    group.bench_function("apply_pi_adjoint", |b| b.iter(|| op.apply_pi_adjoint(black_box(&r)).unwrap()));
    group.finish();
}

criterion_group!(benches, sweep, solve, apply_pi);
criterion_main!(benches);
