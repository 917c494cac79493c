use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use esmc_core::data::{split_and_calibrate, InteractionSample};
use esmc_core::model::{Model, Variant};
use esmc_core::objective::Objective;
use esmc_core::simulator::{Simulator, SimulatorConfig};
use esmc_core::train::TrainConfig;
use esmc_core::{auc, evaluate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sim(users: usize) -> Simulator {
    Simulator::new(SimulatorConfig {
        n_users: users,
        ..SimulatorConfig::reference().with_rho(0.5)
    })
    .unwrap()
}

fn calibrated(users: usize) -> (Simulator, Vec<InteractionSample>) {
    let sim = small_sim(users);
    let raw = sim.samples(&sim.simulate());
    let (split, _) = split_and_calibrate(&raw, 8).unwrap();
    (sim, split.train)
}

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(s * 0.2)).collect();
    c.bench_function("auc_100k", |b| b.iter(|| auc(&scores, &labels).unwrap()));
}

fn bench_step(c: &mut Criterion) {
    let (sim, samples) = calibrated(50);
    let batch = &samples[..1024];
    let mut group = c.benchmark_group("forward_backward_1024");
    for variant in [Variant::Esmm2, Variant::Esmc, Variant::Mmoe] {
        let cfg = TrainConfig::for_variant(variant);
        let model = Model::new(cfg.model.clone(), sim.schema()).unwrap();
        let obj = Objective::new(variant, cfg.weights.clone(), cfg.kl_mode).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(variant.name()), &model, |b, m| {
            b.iter_batched_ref(
                || m.zero_grads(),
                |g| obj.value_and_grad(m, batch, g).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (sim, samples) = calibrated(50);
    let model = Model::new(TrainConfig::for_variant(Variant::Esmc).model, sim.schema()).unwrap();
    c.bench_function("evaluate_esmc_20k", |b| b.iter(|| evaluate(&model, &samples[..20_000]).unwrap()));
}

fn bench_simulate(c: &mut Criterion) {
    let sim = small_sim(100);
    c.bench_function("simulate_50k_exposures", |b| b.iter(|| sim.samples(&sim.simulate())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_auc, bench_step, bench_predict, bench_simulate
}
criterion_main!(benches);
