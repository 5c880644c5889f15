use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use flcm::par::Execution;
use flcm::sim::{run_study, SimConfig};
use flcm::solver::PenaltyFamily;

fn config(execution: Execution) -> SimConfig {
    let mut cfg = SimConfig {
        n: 60,
        p: 10,
        replicates: 4,
        methods: vec![PenaltyFamily::GroupScad],
        ..Default::default()
    };
    cfg.fit.execution = execution;
    cfg
}

fn replicates(c: &mut Criterion) {
    let mut group = c.benchmark_group("study");
    group.sample_size(10);
    for (label, execution) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        let cfg = config(execution);
        group.bench_with_input(BenchmarkId::new("replicates", label), &cfg, |b, cfg| {
            b.iter(|| run_study(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicates);
criterion_main!(benches);
