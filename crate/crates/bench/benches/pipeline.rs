use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array4;
use pixplan::discrete::LatentConfig;
use pixplan::domains::{Domain, DomainSpec};
use pixplan::models::{CubeSpace, NetworkConfig, TrainedModel};
use pixplan::strips::{astar, Heuristic, SearchLimits};
use pixplan_bench::lights_problem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn search(c: &mut Criterion) {
    let problem = lights_problem(3, &[0, 4, 8, 2]);
    c.bench_function("astar_blind_lights3", |b| {
        b.iter(|| astar(&problem, Heuristic::Blind, SearchLimits::default()))
    });
    c.bench_function("astar_goal_count_lights3", |b| {
        b.iter(|| astar(&problem, Heuristic::GoalCount, SearchLimits::default()))
    });
}

fn encode(c: &mut Criterion) {
    let net =
        NetworkConfig { image_shape: (1, 15, 15), conv_channels: 8, kernel: 5, action_hidden: 64 };
    let lat = LatentConfig::new(36, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = TrainedModel::CubeSpace(CubeSpace::new(net, lat, true, &mut rng));
    let mut x = Array4::zeros((32, 1, 15, 15));
    x.mapv_inplace(|_| rng.gen::<f64>());
    c.bench_function("encode_batch32_15x15", |b| b.iter(|| model.encode_bits(&x)));
}

fn render(c: &mut Criterion) {
    let domain = Domain::new(DomainSpec::twisted_lights_out(4));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = domain.sample_state(&mut rng);
    c.bench_function("render_twisted_lights4", |b| b.iter(|| domain.render(&state)));
}

criterion_group!(benches, search, encode, render);
criterion_main!(benches);
