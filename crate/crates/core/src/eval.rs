//! Evaluation protocol and the experiments built on it: ablation ladders,
//! iteration sweeps, ψ cross-validation and confidence reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, sample_episode, Split, TaskFamily};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::learner::{predict, InitKind, LearnerFlags};
use crate::meta::{run_episode, train, Checkpoint, Grads, MetaConfig, Model};
use crate::objective::{Psi, PsiMask};

/// z-score of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub ways: usize,
    pub shots: usize,
    pub query_per_class: usize,
    pub episodes: usize,
    pub iterations: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            query_per_class: crate::data::DEFAULT_QUERY_PER_CLASS,
            episodes: 600,
            iterations: 15,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.episodes < 2 {
            return Err(Error::Config("evaluation needs at least 2 episodes".into()));
        }
        if self.ways == 0 || self.shots == 0 || self.query_per_class == 0 {
            return Err(Error::Config("ways, shots and query_per_class must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub episodes: usize,
    /// Mean accuracy in percent.
    pub accuracy: f64,
    /// Half-width of the 95% interval in percent.
    pub ci95: f64,
    /// Per-episode accuracies as fractions.
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(label: impl Into<String>, per_episode: Vec<f64>) -> Self {
        let (mean, ci) = mean_ci95(&per_episode);
        Self {
            label: label.into(),
            episodes: per_episode.len(),
            accuracy: 100.0 * mean,
            ci95: 100.0 * ci,
            per_episode,
        }
    }

    /// `NN.NN±N.NN`.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", self.accuracy, self.ci95)
    }
}

/// Mean and `1.96·s/√n` with the sample standard deviation `s`.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * var.sqrt() / (n as f64).sqrt())
}

/// Accuracy over `protocol.episodes` episodes of `split`, episode `i` drawn
/// from the stream `(seed, i)`.
pub fn evaluate(
    model: &Model,
    family: &TaskFamily,
    split: Split,
    protocol: EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    protocol.validate()?;
    let accs = map_indexed(exec, protocol.episodes, |i| -> Result<f64> {
        let ep = sample_episode(
            family,
            split,
            protocol.ways,
            protocol.shots,
            protocol.query_per_class,
            seed,
            i as u64,
        )?;
        let run = run_episode(model, &ep, protocol.iterations, Grads::None)?;
        Ok(run.correct as f64 / run.queries as f64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies("", accs))
}

/// One configuration of an ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    pub flags: LearnerFlags,
    pub mask: PsiMask,
}

impl Rung {
    /// Starting ψ of every rung: the ridge-regression constants with
    /// uniform fusion weights.
    pub fn initial_psi(&self, locations: usize) -> Psi {
        Psi::baseline(locations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LadderKind {
    /// Baseline, +Initializer, +DenseFeatures, +LearnLoss, +Transductive.
    Main,
    /// Baseline, +Initializer, +LearnLoss, +Transductive, +Dense.
    DenseFree,
}

const LOSS_FIELDS: PsiMask = PsiMask {
    l_pos: true,
    l_neg: true,
    a_pos: true,
    a_neg: true,
    o_pos: true,
    o_neg: true,
    lambda_reg: true,
    lambda_tran: false,
    beta: false,
    v: false,
};

pub fn ladder(kind: LadderKind) -> Vec<Rung> {
    let rung = |name: &str, init, dense, transductive, mask| Rung {
        name: name.to_string(),
        flags: LearnerFlags {
            init,
            dense,
            transductive,
            ..LearnerFlags::default()
        },
        mask,
    };
    let with = |mut m: PsiMask, v: bool, tran: bool| {
        m.v = v;
        m.lambda_tran = tran;
        m.beta = tran;
        m
    };
    let (z, s) = (InitKind::Zero, InitKind::Support);
    match kind {
        LadderKind::Main => vec![
            rung("Baseline", z, false, false, PsiMask::NONE),
            rung("+Initializer", s, false, false, PsiMask::NONE),
            rung("+DenseFeatures", s, true, false, PsiMask::NONE),
            rung("+LearnLoss", s, true, false, with(LOSS_FIELDS, true, false)),
            rung("+Transductive", s, true, true, with(LOSS_FIELDS, true, true)),
        ],
        LadderKind::DenseFree => vec![
            rung("Baseline", z, false, false, PsiMask::NONE),
            rung("+Initializer", s, false, false, PsiMask::NONE),
            rung("+LearnLoss", s, false, false, with(LOSS_FIELDS, false, false)),
            rung("+Transductive", s, false, true, with(LOSS_FIELDS, false, true)),
            rung("+Dense", s, true, true, with(LOSS_FIELDS, true, true)),
        ],
    }
}

/// Shared setup for experiments that train models from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub embedding: EmbeddingConfig,
    pub meta: MetaConfig,
    /// Test-time protocol; `shots` is overridden per run.
    pub eval: EvalProtocol,
    pub seed: u64,
}

impl Experiment {
    fn test_seed(&self) -> u64 {
        derive_seed(self.seed, "test-episodes")
    }

    /// Trains `rung` at `shots` from the shared seed and returns the
    /// checkpoint.
    pub fn train_rung(&self, family: &TaskFamily, rung: &Rung, shots: usize, exec: Execution) -> Result<Checkpoint> {
        self.train_with(family, rung, shots, self.meta.iters_train, exec)
    }

    fn train_with(
        &self,
        family: &TaskFamily,
        rung: &Rung,
        shots: usize,
        iters_train: usize,
        exec: Execution,
    ) -> Result<Checkpoint> {
        let model = Model::new(
            self.embedding.clone(),
            rung.flags,
            rung.mask,
            rung.initial_psi(self.embedding.locations),
            self.seed,
        )?;
        let mut cfg = self.meta.clone();
        cfg.shots = shots;
        cfg.iters_train = iters_train;
        Ok(train(family, Checkpoint::fresh(model, cfg, self.seed), exec)?.0)
    }

    /// Test-split evaluation at `shots` with the shared episode stream.
    pub fn test(&self, family: &TaskFamily, model: &Model, shots: usize, iterations: usize, exec: Execution) -> Result<EvalReport> {
        let protocol = EvalProtocol {
            shots,
            iterations,
            ..self.eval
        };
        evaluate(model, family, Split::Test, protocol, self.test_seed(), exec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub shots: usize,
    pub report: EvalReport,
    /// The model selected on the validation split.
    pub model: Model,
}

/// Trains and tests every rung at every shot count, in rung-major order.
pub fn run_ablation(
    family: &TaskFamily,
    rungs: &[Rung],
    shots: &[usize],
    exp: &Experiment,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(rungs.len() * shots.len());
    for rung in rungs {
        for &n in shots {
            let ckpt = exp.train_rung(family, rung, n, exec)?;
            let mut report = exp.test(family, &ckpt.best, n, exp.eval.iterations, exec)?;
            report.label = rung.name.clone();
            rows.push(AblationRow {
                config: rung.name.clone(),
                shots: n,
                report,
                model: ckpt.best,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Fixed model, vary test-time iterations.
    EvalSide,
    /// Retrain per grid value, test at the protocol's iteration count.
    TrainSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub iterations: usize,
    pub report: EvalReport,
}

pub fn sweep_eval_side(
    family: &TaskFamily,
    model: &Model,
    grid: &[usize],
    shots: usize,
    exp: &Experiment,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&d| {
            Ok(SweepRow {
                iterations: d,
                report: exp.test(family, model, shots, d, exec)?,
            })
        })
        .collect()
}

pub fn sweep_train_side(
    family: &TaskFamily,
    rung: &Rung,
    grid: &[usize],
    shots: usize,
    exp: &Experiment,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&d| {
            let ckpt = exp.train_with(family, rung, shots, d, exec)?;
            Ok(SweepRow {
                iterations: d,
                report: exp.test(family, &ckpt.best, shots, exp.eval.iterations, exec)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub native: EvalReport,
    pub transferred: EvalReport,
    /// `transferred − native` in accuracy points.
    pub delta: f64,
}

/// Evaluates `target`'s model on `family` with its own ψ and with ψ taken
/// from `source`.
pub fn crossval_psi(
    source: &Model,
    target: &Model,
    family: &TaskFamily,
    protocol: EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<CrossValidation> {
    if source.psi.v.len() != target.psi.v.len() {
        return Err(Error::Config(format!(
            "ψ has {} fusion weights, target model has {} locations",
            source.psi.v.len(),
            target.psi.v.len()
        )));
    }
    if target.embedding.input_dim != family.input_dim() {
        return Err(Error::Config(format!(
            "model expects {}-dim inputs, family has {}",
            target.embedding.input_dim,
            family.input_dim()
        )));
    }
    let mut swapped = target.clone();
    swapped.psi = source.psi.clone();
    let native = evaluate(target, family, Split::Test, protocol, seed, exec)?;
    let transferred = evaluate(&swapped, family, Split::Test, protocol, seed, exec)?;
    Ok(CrossValidation {
        delta: transferred.accuracy - native.accuracy,
        native,
        transferred,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// λ_tran as learned.
    Transductive,
    /// λ_tran forced to 0.
    Inductive,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Transductive => "transductive",
            Variant::Inductive => "inductive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRow {
    pub episode: usize,
    pub query: usize,
    pub true_class: usize,
    pub probs: Vec<f64>,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    pub ways: usize,
    pub rows: Vec<ConfidenceRow>,
    /// Mean over queries of the largest class probability, per variant.
    pub mean_max_transductive: f64,
    pub mean_max_inductive: f64,
    /// Per-episode mean max-probability, per variant.
    pub episode_max_transductive: Vec<f64>,
    pub episode_max_inductive: Vec<f64>,
}

/// Softmax confidences for every query of `protocol.episodes` episodes,
/// once with the learned transductive term and once with it disabled.
pub fn confidence_report(
    model: &Model,
    family: &TaskFamily,
    split: Split,
    protocol: EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<ConfidenceReport> {
    let mut inductive = model.clone();
    inductive.flags.transductive = false;
    let per_episode = map_indexed(exec, protocol.episodes, |i| -> Result<[Vec<ConfidenceRow>; 2]> {
        let ep = sample_episode(
            family,
            split,
            protocol.ways,
            protocol.shots,
            protocol.query_per_class,
            seed,
            i as u64,
        )?;
        let rows = |m: &Model, variant| -> Result<Vec<ConfidenceRow>> {
            let run = run_episode(m, &ep, protocol.iterations, Grads::None)?;
            let pred = predict(&run.logits);
            Ok((0..ep.query_len())
                .map(|j| ConfidenceRow {
                    episode: i,
                    query: j,
                    true_class: ep.query_y[j],
                    probs: pred.probs.row(j).to_vec(),
                    variant,
                })
                .collect())
        };
        Ok([rows(model, Variant::Transductive)?, rows(&inductive, Variant::Inductive)?])
    });
    let mut report = ConfidenceReport {
        ways: protocol.ways,
        rows: Vec::new(),
        mean_max_transductive: 0.0,
        mean_max_inductive: 0.0,
        episode_max_transductive: Vec::new(),
        episode_max_inductive: Vec::new(),
    };
    let max_mean = |rows: &[ConfidenceRow]| {
        rows.iter()
            .map(|r| r.probs.iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / rows.len().max(1) as f64
    };
    for ep in per_episode {
        let [tran, ind] = ep?;
        report.episode_max_transductive.push(max_mean(&tran));
        report.episode_max_inductive.push(max_mean(&ind));
        report.rows.extend(tran);
        report.rows.extend(ind);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    report.mean_max_transductive = mean(&report.episode_max_transductive);
    report.mean_max_inductive = mean(&report.episode_max_inductive);
    Ok(report)
}

/// `config,shot,episodes,accuracy,ci95`, one row per report.
pub fn reports_csv(rows: &[(String, usize, &EvalReport)]) -> String {
    let mut out = String::from("config,shot,episodes,accuracy,ci95\n");
    for (config, shot, r) in rows {
        let _ = writeln!(out, "{config},{shot},{},{:.4},{:.4}", r.episodes, r.accuracy, r.ci95);
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let view: Vec<_> = rows.iter().map(|r| (r.config.clone(), r.shots, &r.report)).collect();
    reports_csv(&view)
}

/// `iters,accuracy,ci95`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("iters,accuracy,ci95\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4}", r.iterations, r.report.accuracy, r.report.ci95);
    }
    out
}

/// `episode_id,query_id,true_class,p_0..p_{k-1},variant`.
pub fn confidence_csv(report: &ConfidenceReport) -> String {
    let mut out = String::from("episode_id,query_id,true_class");
    for c in 0..report.ways {
        let _ = write!(out, ",p_{c}");
    }
    out.push_str(",variant\n");
    for r in &report.rows {
        let _ = write!(out, "{},{},{}", r.episode, r.query, r.true_class);
        for p in &r.probs {
            let _ = write!(out, ",{p:.12}");
        }
        let _ = writeln!(out, ",{}", r.variant.name());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_hand_computation() {
        let r = EvalReport::from_accuracies("x", vec![0.6, 0.8]);
        assert!((r.accuracy - 70.0).abs() < 1e-12);
        let expected = 1.96 * (0.02f64).sqrt() / 2f64.sqrt() * 100.0;
        assert!((r.ci95 - expected).abs() < 1e-12);
        assert!((r.ci95 - 19.6).abs() < 1e-9);
        assert_eq!(r.summary(), "70.00±19.60");
    }

    #[test]
    fn constant_accuracies_have_zero_width() {
        let r = EvalReport::from_accuracies("x", vec![1.0; 10]);
        assert_eq!((r.accuracy, r.ci95), (100.0, 0.0));
    }

    #[test]
    fn ladders_have_five_rungs_in_order() {
        let main = ladder(LadderKind::Main);
        let names: Vec<_> = main.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["Baseline", "+Initializer", "+DenseFeatures", "+LearnLoss", "+Transductive"]);
        assert!(!main[0].mask.any() && main[0].flags == LearnerFlags::default());
        assert!(!main[3].mask.lambda_tran && main[4].mask.lambda_tran && main[4].mask.beta);
        let free = ladder(LadderKind::DenseFree);
        assert!(free[..4].iter().all(|r| !r.flags.dense && !r.mask.v));
        assert!(free[4].flags.dense && free[4].mask.v);
    }

    #[test]
    fn csv_layouts() {
        let r = EvalReport::from_accuracies("x", vec![0.5, 1.0]);
        let csv = reports_csv(&[("Baseline".into(), 1, &r)]);
        assert_eq!(csv.lines().next().unwrap(), "config,shot,episodes,accuracy,ci95");
        assert!(csv.lines().nth(1).unwrap().starts_with("Baseline,1,2,75.0000,"));
        let sweep = sweep_csv(&[SweepRow { iterations: 3, report: r }]);
        assert_eq!(sweep.lines().count(), 2);
    }
}
