use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fewiter::autodiff::{Scalar, Tape, Tensor};
use fewiter::data::{sample_episode, Episode, Split};
use fewiter::desk;
use fewiter::eval::evaluate;
use fewiter::exec::Execution;
use fewiter::learner::{episode_tensors, run_inner, InitKind, InnerConfig, LearnerFlags};
use fewiter::meta::{batch_gradient, Grads, Model};
use fewiter::objective::{Psi, PsiLeaves, PsiMask, TranMode};

fn full_flags() -> LearnerFlags {
    LearnerFlags {
        init: InitKind::Support,
        dense: true,
        transductive: true,
        tran_mode: TranMode::Fused,
    }
}

fn desk_model() -> Model {
    Model::new(desk::embedding(), full_flags(), PsiMask::ALL, Psi::baseline(desk::LOCATIONS), 0).unwrap()
}

fn desk_episodes(n: u64) -> Vec<Episode> {
    let family = desk::family().unwrap();
    (0..n)
        .map(|i| sample_episode(&family, Split::Train, 5, 1, 15, 1, i).unwrap())
        .collect()
}

fn execution(c: &mut Criterion) {
    let model = desk_model();
    let episodes = desk_episodes(16);
    let family = desk::family().unwrap();
    let mut protocol = desk::eval_protocol();
    protocol.episodes = 64;
    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(BenchmarkId::new("meta_batch_gradient", format!("{exec:?}")), |b| {
            b.iter(|| batch_gradient(&model, &episodes, 10, Grads::PsiAndEmbedding, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("evaluate_64_episodes", format!("{exec:?}")), |b| {
            b.iter(|| evaluate(&model, &family, Split::Test, protocol, 2, exec).unwrap())
        });
    }
    group.finish();
}

/// Forward-only inner loop on pre-embedded features.
fn inner<S: Scalar>(support: &Tensor<f64>, labels: &[usize], query: &Tensor<f64>, psi: &Psi) -> f64 {
    let tape = Tape::<S>::new();
    let pv = PsiLeaves::new(&tape, psi, false).values(true).unwrap();
    let s = tape.constant(support.cast());
    let q = tape.constant(query.cast());
    let et = episode_tensors(s, labels, q, &pv, 5, full_flags()).unwrap();
    let cfg = InnerConfig {
        iterations: 15,
        init: InitKind::Support,
    };
    *run_inner(&et, &pv, cfg).unwrap().1.losses.last().unwrap()
}

fn precision(c: &mut Criterion) {
    let model = desk_model();
    let ep = desk_episodes(1).remove(0);
    let tape = Tape::<f64>::new();
    let params: Vec<_> = model.embed_params.iter().map(|p| tape.constant(p.clone())).collect();
    let support = model.embedding.embed(&params, tape.constant(ep.support_x.clone())).unwrap().value();
    let query = model.embedding.embed(&params, tape.constant(ep.query_x.clone())).unwrap().value();
    let mut group = c.benchmark_group("inner_loop_15_steps");
    group.bench_function("f64", |b| b.iter(|| inner::<f64>(&support, &ep.support_y, &query, &model.psi)));
    group.bench_function("f32", |b| b.iter(|| inner::<f32>(&support, &ep.support_y, &query, &model.psi)));
    group.finish();
}

criterion_group!(benches, execution, precision);
criterion_main!(benches);
