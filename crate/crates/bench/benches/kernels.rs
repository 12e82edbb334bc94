use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use drpo_core::driver::{collect_online_reset, run_drpo, DrpoConfig, Mode, ResetAction, RunInputs};
use drpo_core::mdp::exact_value;
use drpo_core::mdp::families::{chain, random, reference_policy};
use drpo_core::mirror_descent::{npg_update, NpgParams};
use drpo_core::preference::{gen_preference_dataset, gen_unlabeled_dataset, LinkFunction};
use drpo_core::reward::{mle_tabular, MleOptions};
use drpo_core::{ActionTable, SeedStream, TabularPolicy};

fn mirror_step(c: &mut Criterion) {
    let mdp = random(8, 16, 8, 0.2, 1);
    let mut rng = SeedStream::new(1).rng();
    let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
    let pi = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
    let q = ActionTable::from_fn(mdp.layout(), |s, a| (s.index + a) as f64 * 0.01);
    let params = NpgParams::new(0.5, 0.1).unwrap();
    c.bench_function("npg_update 8x16x8", |b| b.iter(|| npg_update(black_box(&pi), &q, &sft, &params).unwrap()));
}

fn exact_evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_value");
    for len in [8usize, 32] {
        let mdp = chain(len, 0.1);
        let pi = reference_policy(&mdp, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| exact_value(&mdp, black_box(&pi), mdp.true_reward()).value())
        });
    }
    group.finish();
}

fn reward_fit(c: &mut Criterion) {
    let mdp = chain(4, 0.1);
    let sft = reference_policy(&mdp, 0.4);
    let data =
        gen_preference_dataset(&mdp, &sft, mdp.true_reward(), &LinkFunction::Sigmoid, 2000, &SeedStream::new(2)).unwrap();
    c.bench_function("mle_tabular chain4 M=2000", |b| {
        b.iter(|| mle_tabular(&mdp, black_box(&data), &LinkFunction::Sigmoid, &MleOptions::default()).unwrap())
    });
}

fn reset_collection(c: &mut Criterion) {
    let mdp = chain(8, 0.1);
    let sft = reference_policy(&mdp, 0.4);
    let pi = reference_policy(&mdp, 0.7);
    let unl = gen_unlabeled_dataset(&mdp, &sft, 500, &SeedStream::new(3)).unwrap().trajectories;
    c.bench_function("collect_online_reset chain8 N=1000", |b| {
        b.iter(|| {
            collect_online_reset(&mdp, &pi, &sft, &unl, 1.0, ResetAction::Mixture, 1000, mdp.true_reward(), &SeedStream::new(4))
                .unwrap()
        })
    });
}

fn full_run(c: &mut Criterion) {
    let mdp = chain(8, 0.0);
    let sft = reference_policy(&mdp, 0.4);
    let root = SeedStream::new(0);
    let prefs =
        gen_preference_dataset(&mdp, &sft, mdp.true_reward(), &LinkFunction::Sigmoid, 2000, &root.child("prefs")).unwrap();
    let unl = gen_unlabeled_dataset(&mdp, &sft, 500, &root.child("unlabeled")).unwrap().trajectories;
    let inputs = RunInputs { mdp: &mdp, pi_sft: &sft, preferences: &prefs, unlabeled: &unl };
    let mut config = DrpoConfig::new(Mode::PracticalNpg, 30, 0);
    config.eta = Some(1.0);
    config.lambda = 0.02;
    let mut group = c.benchmark_group("run_drpo");
    group.sample_size(10);
    group.bench_function("practical chain8 T=30", |b| b.iter(|| run_drpo(&inputs, &config).unwrap()));
    group.finish();
}

criterion_group!(benches, mirror_step, exact_evaluation, reward_fit, reset_collection, full_run);
criterion_main!(benches);
