use fewiter::data::{derive_seed, generate_family, FamilySpec, Split, TaskFamily};
use fewiter::desk;
use fewiter::embedding::{EmbeddingConfig, EmbeddingKind};
use fewiter::error::ErrorKind;
use fewiter::eval::{
    confidence_csv, confidence_report, crossval_psi, evaluate, ladder, mean_ci95, sweep_eval_side, EvalProtocol,
    LadderKind, Variant,
};
use fewiter::exec::Execution;
use fewiter::learner::{init_theta, episode_tensors, fuse_logits, predict, InitKind, LearnerFlags};
use fewiter::meta::{train, Checkpoint, MetaConfig, Model};
use fewiter::objective::{Psi, PsiLeaves, PsiMask};
use fewiter::verify::ridge_classifier_accuracy;
use fewiter::{autodiff::Tape, data::sample_episode};
use proptest::prelude::*;

const EXEC: Execution = Execution::Parallel;

fn protocol(episodes: usize, iterations: usize) -> EvalProtocol {
    EvalProtocol {
        ways: 5,
        shots: 1,
        query_per_class: 15,
        episodes,
        iterations,
    }
}

fn desk_model(flags: LearnerFlags) -> Model {
    Model::new(desk::embedding(), flags, PsiMask::NONE, Psi::baseline(desk::LOCATIONS), 0).unwrap()
}

fn full_flags() -> LearnerFlags {
    LearnerFlags {
        init: InitKind::Support,
        dense: true,
        transductive: true,
        ..LearnerFlags::default()
    }
}

#[test]
fn untrained_zero_head_is_at_chance() {
    let family = desk::family().unwrap();
    let mut model = desk_model(LearnerFlags::default());
    model.flags.init = InitKind::Zero;
    let r = evaluate(&model, &family, Split::Test, protocol(500, 0), 1, EXEC).unwrap();
    let sigma = r.ci95 / 1.96;
    assert!((r.accuracy - 20.0).abs() <= 3.0 * sigma + 1e-9, "{}", r.summary());
}

#[test]
fn separable_family_is_classified_perfectly() {
    let mut spec = FamilySpec::gaussian(30, 32, [10, 10, 10]);
    spec.mean_std = 5.0;
    spec.within_std = 1e-3;
    let family = generate_family(&spec, 2).unwrap();
    let embedding = EmbeddingConfig {
        kind: EmbeddingKind::Linear,
        input_dim: 32,
        features: 16,
        locations: 4,
        hidden: 1,
    };
    let model = Model::new(embedding, LearnerFlags::default(), PsiMask::NONE, Psi::baseline(4), 3).unwrap();
    let r = evaluate(&model, &family, Split::Test, protocol(50, 15), 4, EXEC).unwrap();
    assert_eq!(r.summary(), "100.00±0.00");
}

#[test]
fn evaluation_is_a_pure_function_of_its_inputs() {
    let family = desk::family().unwrap();
    let model = desk_model(full_flags());
    let a = evaluate(&model, &family, Split::Test, protocol(40, 5), 5, Execution::Sequential).unwrap();
    let b = evaluate(&model, &family, Split::Test, protocol(40, 5), 5, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&model, &family, Split::Test, protocol(1, 5), 5, EXEC).is_err());
}

#[test]
fn zero_iterations_score_the_bare_initializer() {
    let family = desk::family().unwrap();
    let model = desk_model(full_flags());
    let p = protocol(30, 0);
    let seed = 6;
    let report = evaluate(&model, &family, Split::Test, p, seed, EXEC).unwrap();
    let accs: Vec<f64> = (0..p.episodes as u64)
        .map(|i| {
            let ep = sample_episode(&family, Split::Test, 5, 1, 15, seed, i).unwrap();
            let tape = Tape::new();
            let pv = PsiLeaves::new(&tape, &model.psi, false).values(true).unwrap();
            let ps: Vec<_> = model.embed_params.iter().map(|t| tape.constant(t.clone())).collect();
            let s = model.embedding.embed(&ps, tape.constant(ep.support_x.clone())).unwrap();
            let q = model.embedding.embed(&ps, tape.constant(ep.query_x.clone())).unwrap();
            let et = episode_tensors(s, &ep.support_y, q, &pv, 5, model.flags).unwrap();
            let theta = init_theta(&et, &pv, InitKind::Support).unwrap();
            let pred = predict(&fuse_logits(theta, &et).unwrap().value());
            pred.labels.iter().zip(&ep.query_y).filter(|(a, b)| a == b).count() as f64 / ep.query_len() as f64
        })
        .collect();
    assert_eq!(report.per_episode, accs);
}

#[test]
fn baseline_path_matches_closed_form_ridge() {
    let family = desk::family().unwrap();
    let model = desk_model(LearnerFlags::default());
    let p = protocol(600, 15);
    let pipeline = evaluate(&model, &family, Split::Test, p, 7, EXEC).unwrap();
    let oracle = ridge_classifier_accuracy(&model, &family, Split::Test, p, 7, EXEC).unwrap();
    assert!(
        (pipeline.accuracy - oracle.accuracy).abs() < 0.5,
        "pipeline {} vs ridge {}",
        pipeline.summary(),
        oracle.summary()
    );
    assert!(ridge_classifier_accuracy(&desk_model(full_flags()), &family, Split::Test, p, 7, EXEC).is_err());
}

#[test]
fn crossval_identity_and_errors() {
    let family = desk::family().unwrap();
    let model = desk_model(full_flags());
    let cv = crossval_psi(&model, &model, &family, protocol(20, 5), 8, EXEC).unwrap();
    assert_eq!(cv.delta, 0.0);
    assert_eq!(cv.native, cv.transferred);

    let other = Model::new(
        EmbeddingConfig {
            input_dim: 64,
            ..desk::embedding()
        },
        full_flags(),
        PsiMask::NONE,
        Psi::baseline(desk::LOCATIONS),
        0,
    )
    .unwrap();
    let err = crossval_psi(&model, &other, &family, protocol(20, 5), 8, EXEC).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    let mut short = model.clone();
    short.psi = Psi::baseline(2);
    assert!(crossval_psi(&short, &model, &family, protocol(20, 5), 8, EXEC).is_err());
}

fn trained_full_model(family: &TaskFamily) -> Model {
    let exp = desk::experiment();
    let rung = ladder(LadderKind::Main).pop().unwrap();
    exp.train_rung(family, &rung, 1, EXEC).unwrap().best
}

#[test]
fn learned_psi_transfers_between_sibling_families() {
    let a = desk::family().unwrap();
    let b = generate_family(&desk::family_spec(), 1).unwrap();
    let model_a = trained_full_model(&a);
    let model_b = trained_full_model(&b);
    let exp = desk::experiment();
    let cv = crossval_psi(&model_a, &model_b, &b, exp.eval, derive_seed(0, "crossval"), EXEC).unwrap();
    assert!(cv.delta.abs() < 3.0, "native {} transferred {}", cv.native.summary(), cv.transferred.summary());
}

#[test]
fn confidence_tables() {
    let family = desk::family().unwrap();
    let mut model = desk_model(full_flags());
    let p = protocol(50, 15);
    let report = confidence_report(&model, &family, Split::Test, p, 9, EXEC).unwrap();
    assert_eq!(report.rows.len(), 2 * 50 * 75);
    for row in &report.rows {
        assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&report.episode_max_transductive) >= median(&report.episode_max_inductive));
    let csv = confidence_csv(&report);
    assert_eq!(csv.lines().next().unwrap(), "episode_id,query_id,true_class,p_0,p_1,p_2,p_3,p_4,variant");
    assert_eq!(csv.lines().count(), 1 + report.rows.len());

    model.flags.transductive = false;
    let off = confidence_report(&model, &family, Split::Test, p, 9, EXEC).unwrap();
    let (tran, ind): (Vec<_>, Vec<_>) = off.rows.iter().partition(|r| r.variant == Variant::Transductive);
    assert_eq!(tran.len(), ind.len());
    for (a, b) in tran.iter().zip(&ind) {
        assert_eq!((a.episode, a.query, &a.probs), (b.episode, b.query, &b.probs));
    }
}

#[test]
fn baseline_rung_keeps_psi_constant() {
    let family = generate_family(&FamilySpec::gaussian(20, 16, [10, 5, 5]), 3).unwrap();
    let rung = &ladder(LadderKind::Main)[0];
    let embedding = EmbeddingConfig {
        kind: EmbeddingKind::Mlp2,
        input_dim: 16,
        features: 4,
        locations: 2,
        hidden: 6,
    };
    let psi = rung.initial_psi(2);
    let model = Model::new(embedding, rung.flags, rung.mask, psi.clone(), 1).unwrap();
    let cfg = MetaConfig {
        epochs: 2,
        batches_per_epoch: 3,
        tasks_per_batch: 4,
        ways: 3,
        query_per_class: 3,
        val_episodes: 4,
        ..MetaConfig::default()
    };
    let (ckpt, _) = train(&family, Checkpoint::fresh(model.clone(), cfg, 1), EXEC).unwrap();
    assert_eq!(ckpt.current.psi, psi);
    assert_ne!(ckpt.current.embed_params, model.embed_params);
}

#[test]
fn eval_sweep_rows_follow_the_grid() {
    let family = desk::family().unwrap();
    let exp = fewiter::eval::Experiment {
        eval: protocol(20, 15),
        ..desk::experiment()
    };
    let rows = sweep_eval_side(&family, &desk_model(full_flags()), &[0, 3, 6], 1, &exp, EXEC).unwrap();
    assert_eq!(rows.iter().map(|r| r.iterations).collect::<Vec<_>>(), [0, 3, 6]);
    assert!(sweep_eval_side(&family, &desk_model(full_flags()), &[], 1, &exp, EXEC).is_err());
}

proptest! {
    #[test]
    fn ci_is_nonnegative_and_matches_two_value_formula(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (mean, ci) = mean_ci95(&[a, b]);
        prop_assert!(ci >= 0.0);
        prop_assert!((mean - (a + b) / 2.0).abs() < 1e-15);
        // Two values: s = |a − b|/√2, so 1.96·s/√2 = 0.98·|a − b|.
        prop_assert!((ci - 0.98 * (a - b).abs()).abs() < 1e-12);
    }
}
