//! The fixed-seed synthetic benchmark used for trend checks and as the
//! default experiment of the command-line tool.
//!
//! Every location of a sample carries the same class evidence, but half of
//! each location's channels are pure nuisance and the four locations have
//! increasing noise levels. A learned embedding can drop the nuisance
//! channels and learned fusion weights can down-weight the noisy locations;
//! queries form tight clusters in the informative subspace, which the
//! entropy term can exploit.

use crate::data::{generate_family, FamilySpec, TaskFamily};
use crate::embedding::{EmbeddingConfig, EmbeddingKind};
use crate::error::Result;
use crate::eval::{
    ladder, run_ablation, sweep_eval_side, sweep_train_side, AblationRow, EvalProtocol, Experiment, LadderKind,
    SweepRow,
};
use crate::exec::Execution;
use crate::meta::{finetune_psi, Checkpoint, MetaConfig};

pub const SEED: u64 = 0;
pub const LOCATIONS: usize = 4;
pub const INPUT_DIM: usize = 128;
pub const SHOTS: [usize; 2] = [1, 5];
pub const EVAL_SWEEP_GRID: [usize; 9] = [0, 3, 6, 9, 12, 15, 18, 21, 24];
pub const TRAIN_SWEEP_GRID: [usize; 6] = [0, 1, 3, 5, 10, 15];

pub fn family_spec() -> FamilySpec {
    let mut spec = FamilySpec::gaussian(64, INPUT_DIM, [40, 12, 12]);
    spec.mean_std = 0.5;
    spec.within_std = 1.0;
    spec.tied_cells = LOCATIONS;
    // 16 blocks of 8 channels, alternating informative / nuisance.
    spec.cell_signal = (0..16).map(|b| if b % 2 == 0 { 1.0 } else { 0.0 }).collect();
    spec.cell_noise = vec![0.7, 1.0, 1.3, 1.6];
    spec
}

pub fn family() -> Result<TaskFamily> {
    Ok(generate_family(&family_spec(), SEED)?)
}

pub fn embedding() -> EmbeddingConfig {
    EmbeddingConfig {
        kind: EmbeddingKind::Linear,
        input_dim: INPUT_DIM,
        features: 16,
        locations: LOCATIONS,
        hidden: 16,
    }
}

pub fn meta_config() -> MetaConfig {
    MetaConfig {
        epochs: 5,
        batches_per_epoch: 50,
        tasks_per_batch: 16,
        lr: 0.01,
        psi_lr: Some(0.1),
        val_episodes: 100,
        ..MetaConfig::default()
    }
}

pub fn eval_protocol() -> EvalProtocol {
    EvalProtocol {
        ways: 5,
        shots: 1,
        query_per_class: 15,
        episodes: 600,
        iterations: 15,
    }
}

pub fn experiment() -> Experiment {
    Experiment {
        embedding: embedding(),
        meta: meta_config(),
        eval: eval_protocol(),
        seed: SEED,
    }
}

/// Everything the trend checks look at.
#[derive(Debug, Clone)]
pub struct Trends {
    /// Main ladder, rung-major, one row per shot count in [`SHOTS`].
    pub ablation: Vec<AblationRow>,
    /// Eval-side sweep of the 1-shot full model.
    pub eval_sweep: Vec<SweepRow>,
    /// Train-side sweep of the full model at 1 shot.
    pub train_sweep: Vec<SweepRow>,
    /// `(shots, λ_tran)` after fine-tuning the 1-shot full model.
    pub finetuned_lambda_tran: Vec<(usize, f64)>,
}

/// Runs the whole benchmark: ablation, both sweeps and shot-specific
/// fine-tuning.
pub fn run_trends(exec: Execution) -> Result<Trends> {
    let family = family()?;
    let exp = experiment();
    let rungs = ladder(LadderKind::Main);
    let full = rungs.last().expect("ladder is non-empty").clone();
    let ablation = run_ablation(&family, &rungs, &SHOTS, &exp, exec)?;
    let full_model = ablation
        .iter()
        .find(|r| r.config == full.name && r.shots == 1)
        .expect("1-shot full model is part of the ablation")
        .model
        .clone();
    let eval_sweep = sweep_eval_side(&family, &full_model, &EVAL_SWEEP_GRID, 1, &exp, exec)?;
    let train_sweep = sweep_train_side(&family, &full, &TRAIN_SWEEP_GRID, 1, &exp, exec)?;
    let mut base_cfg = exp.meta.clone();
    base_cfg.shots = 1;
    let base = Checkpoint::fresh(full_model, base_cfg, exp.seed);
    let finetuned_lambda_tran = SHOTS
        .iter()
        .map(|&n| Ok((n, finetune_psi(&base, &family, n, exec)?.0.best.psi.lambda_tran())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trends {
        ablation,
        eval_sweep,
        train_sweep,
        finetuned_lambda_tran,
    })
}

/// Accuracies of the ablation rows at `shots`, in rung order.
pub fn column(rows: &[AblationRow], shots: usize) -> Vec<f64> {
    rows.iter().filter(|r| r.shots == shots).map(|r| r.report.accuracy).collect()
}

/// Number of adjacent pairs in `xs` that strictly improve, and the number of
/// pairs.
pub fn improving_pairs(xs: &[f64]) -> (usize, usize) {
    let pairs = xs.len().saturating_sub(1);
    (xs.windows(2).filter(|w| w[1] > w[0]).count(), pairs)
}

/// Gain of the last rung over the one before it.
pub fn last_gain(xs: &[f64]) -> Option<f64> {
    match xs {
        [.., a, b] => Some(b - a),
        _ => None,
    }
}

/// True when the curve climbs to its (first) maximum with no step down
/// larger than `dip`, that maximum is above the starting value, and the
/// final value is at most `drop` below it.
pub fn rises_then_saturates(curve: &[f64], dip: f64, drop: f64) -> bool {
    let Some((peak, &max)) = curve.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))) else {
        return false;
    };
    let rising = curve[..=peak].windows(2).all(|w| w[0] - w[1] <= dip);
    let last = *curve.last().expect("non-empty");
    rising && max > curve[0] && max - last <= drop
}
