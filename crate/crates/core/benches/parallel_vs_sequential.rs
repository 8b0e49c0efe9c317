use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use unlearn_core::datagen::ConditionId;
use unlearn_core::epsnet::{Arch, EpsilonNet, SamplerConfig};
use unlearn_core::exec::Exec;
use unlearn_core::sampler::generate_conditions;
use unlearn_core::schedule::NoiseSchedule;

fn sampling(c: &mut Criterion) {
    let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let net = EpsilonNet::init(Arch::default(), sched.steps(), 0).unwrap();
    let cfg = SamplerConfig { cfg_scale: 1.0, seed: 0 };
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for n in [128usize, 512] {
        let conds: Vec<ConditionId> = (0..n).map(|i| ConditionId((i % 3) as u32)).collect();
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, n), &conds, |b, conds| {
                b.iter(|| generate_conditions(&net, 2, 3, conds, &sched, &cfg, "bench", exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
