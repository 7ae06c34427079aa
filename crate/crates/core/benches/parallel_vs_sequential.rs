use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fitvid_core::data::generate_pusher_dataset_at;
use fitvid_core::planner::{cem_plan, scripted_tasks, CemConfig, History, OracleDynamics};
use fitvid_core::pusher::goal_image;
use fitvid_core::rollout::{sample_future_batch, RolloutRequest};
use fitvid_core::tensor::par;
use fitvid_core::train::{slice_frames, train_step, AdamState};
use fitvid_core::{FitVid, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn training_step(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 0).unwrap();
    let ds = generate_pusher_dataset_at(4, 6, 0, 32).unwrap();
    let (x, a) = (ds.videos, ds.actions.unwrap());
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            let mut p = params.clone();
            let mut opt = AdamState::new(&p);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| train_step(&model, &mut p, &mut opt, &x, Some(&a), &mut rng).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn best_of_k_sampling(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 0).unwrap();
    let ds = generate_pusher_dataset_at(2, 6, 1, 32).unwrap();
    let req = RolloutRequest::new(slice_frames(&ds.videos, 0, 2), ds.actions.clone(), 4, 16, 3);
    let mut group = c.benchmark_group("sample_future_batch_k16");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            b.iter(|| sample_future_batch(&model, &params, &req).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn oracle_cem(c: &mut Criterion) {
    let task = scripted_tasks(1, 0)[0];
    let hist = History::new(task, 32);
    let goal = goal_image(&task, 32);
    let cfg = CemConfig::default();
    let mut group = c.benchmark_group("oracle_cem_plan");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            b.iter(|| cem_plan(&OracleDynamics, &hist, &goal, &cfg, &mut rng).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, training_step, best_of_k_sampling, oracle_cem);
criterion_main!(benches);
