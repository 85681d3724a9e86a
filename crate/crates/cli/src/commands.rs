use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fewiter::data::{derive_seed, save_dataset, Split, TaskFamily};
use fewiter::eval::{
    ablation_csv, confidence_csv, confidence_report, evaluate, ladder, reports_csv, run_ablation, sweep_csv,
    sweep_eval_side, sweep_train_side, EvalProtocol, SweepMode,
};
use fewiter::exec::{with_threads, Execution};
use fewiter::meta::{finetune_psi, train, Checkpoint, LogRow, Model};
use fewiter::verify;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, ConfidenceArgs, DatagenArgs, EvalArgs, SplitArg, SweepArgs, SweepModeArg, TrainArgs};

const EXEC: Execution = Execution::Parallel;

pub const CHECKPOINT_FILE: &str = "checkpoint.fiml";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let threads = cfg.threads;
    with_threads(threads, move || dispatch(cli.command, cfg))
}

fn dispatch(command: Command, cfg: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Gradcheck => gradcheck(),
        command => {
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
            match command {
                Command::Train(a) => cmd_train(&cfg, a),
                Command::Eval(a) => cmd_eval(&cfg, a),
                Command::Ablate => cmd_ablate(&cfg),
                Command::Sweep(a) => cmd_sweep(&cfg, a),
                Command::Confidence(a) => cmd_confidence(&cfg, a),
                Command::Datagen(a) => cmd_datagen(&cfg, a),
                Command::Gradcheck => unreachable!("handled above"),
            }
        }
    }
}

fn write(cfg: &RunConfig, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = cfg.output_dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn fresh_model(cfg: &RunConfig) -> Result<Model, CliError> {
    Ok(Model::new(
        cfg.embedding.clone(),
        cfg.learner,
        cfg.learn,
        cfg.initial_psi()?,
        cfg.seed,
    )?)
}

fn train_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,meta_loss,val_accuracy,ci95\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.10},{:.4},{:.4}", r.epoch, r.meta_loss, r.val_accuracy, r.val_ci95);
    }
    out
}

/// Model from `--checkpoint`, or a fresh one trained from the config.
fn model_for(cfg: &RunConfig, family: &TaskFamily, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?.best),
        None => {
            eprintln!("no checkpoint given; training one from the config");
            let ckpt = Checkpoint::fresh(fresh_model(cfg)?, cfg.meta.clone(), cfg.seed);
            Ok(train(family, ckpt, EXEC)?.0.best)
        }
    }
}

fn cmd_train(cfg: &RunConfig, args: TrainArgs) -> Result<(), CliError> {
    let family = cfg.family()?;
    let (ckpt, log) = if let Some(base) = &args.finetune {
        let mut base = load_checkpoint(base)?;
        base.config.finetune = cfg.meta.finetune;
        finetune_psi(&base, &family, cfg.meta.shots, EXEC)?
    } else {
        let start = match &args.resume {
            Some(p) => {
                let mut c = load_checkpoint(p)?;
                c.config.epochs = cfg.meta.epochs;
                c
            }
            None => Checkpoint::fresh(fresh_model(cfg)?, cfg.meta.clone(), cfg.seed),
        };
        train(&family, start, EXEC)?
    };
    let path = cfg.output_dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    write(cfg, "train_log.csv", &train_log_csv(&log))?;
    for r in &log {
        println!(
            "epoch {:>3}  meta-loss {:.4}  val {:.2}±{:.2}",
            r.epoch, r.meta_loss, r.val_accuracy, r.val_ci95
        );
    }
    println!("best validation accuracy {:.2}; checkpoint {}", ckpt.best_val_accuracy, path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?.best;
    let family = cfg.family()?;
    let protocol = EvalProtocol {
        ways: a.ways.unwrap_or(cfg.eval.ways),
        shots: a.shots.unwrap_or(cfg.eval.shots),
        query_per_class: cfg.eval.query_per_class,
        episodes: a.episodes.unwrap_or(cfg.eval.episodes),
        iterations: a.iters.unwrap_or(cfg.eval.iterations),
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let seed = a.seed.unwrap_or_else(|| derive_seed(cfg.seed, "test-episodes"));
    let report = evaluate(&model, &family, split, protocol, seed, EXEC)?;
    write(cfg, "eval.csv", &reports_csv(&[("checkpoint".into(), protocol.shots, &report)]))?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let family = cfg.family()?;
    let rows = run_ablation(&family, &ladder(cfg.ablation.ladder), &cfg.ablation.shots, &cfg.experiment(), EXEC)?;
    write(cfg, "ablation.csv", &ablation_csv(&rows))?;
    for r in &rows {
        println!("{:<16} {}-shot  {}", r.config, r.shots, r.report.summary());
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<(), CliError> {
    let family = cfg.family()?;
    let mode = match a.mode {
        Some(SweepModeArg::Eval) => SweepMode::EvalSide,
        Some(SweepModeArg::Train) => SweepMode::TrainSide,
        None => cfg.sweep.mode,
    };
    let mut section = cfg.sweep.clone();
    section.mode = mode;
    if a.grid.is_some() {
        section.grid = a.grid;
    }
    let grid = section.grid_or_default();
    let shots = a.shots.unwrap_or(section.shots);
    let exp = cfg.experiment();
    let (rows, name) = match mode {
        SweepMode::EvalSide => {
            let model = model_for(cfg, &family, a.checkpoint.as_deref())?;
            (sweep_eval_side(&family, &model, &grid, shots, &exp, EXEC)?, "sweep-eval.csv")
        }
        SweepMode::TrainSide => (sweep_train_side(&family, &cfg.rung(), &grid, shots, &exp, EXEC)?, "sweep-train.csv"),
    };
    write(cfg, name, &sweep_csv(&rows))?;
    for r in &rows {
        println!("{:>3} iterations  {}", r.iterations, r.report.summary());
    }
    Ok(())
}

fn cmd_confidence(cfg: &RunConfig, a: ConfidenceArgs) -> Result<(), CliError> {
    let family = cfg.family()?;
    let model = model_for(cfg, &family, a.checkpoint.as_deref())?;
    let protocol = EvalProtocol {
        shots: a.shots.unwrap_or(cfg.eval.shots),
        episodes: a.episodes.unwrap_or(50),
        ..cfg.eval
    };
    let seed = derive_seed(cfg.seed, "confidence-episodes");
    let report = confidence_report(&model, &family, Split::Test, protocol, seed, EXEC)?;
    write(cfg, "confidence.csv", &confidence_csv(&report))?;
    println!(
        "mean max-probability: transductive {:.4}, inductive {:.4}",
        report.mean_max_transductive, report.mean_max_inductive
    );
    Ok(())
}

fn cmd_datagen(cfg: &RunConfig, a: DatagenArgs) -> Result<(), CliError> {
    let family = cfg.family()?;
    let finite = if family.is_generator() {
        family.materialize(a.per_class, derive_seed(cfg.seed, "datagen"))?
    } else {
        family
    };
    save_dataset(&finite, &a.path)?;
    println!(
        "wrote {} classes of {}-dim inputs to {}",
        finite.classes(),
        finite.input_dim(),
        a.path.display()
    );
    Ok(())
}

fn gradcheck() -> Result<(), CliError> {
    let checks = verify::run_all(EXEC);
    let total: f64 = checks.iter().map(|c| c.seconds).sum();
    for c in &checks {
        println!("{}", c.line());
    }
    println!("total {total:.1}s");
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.id.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(format!("checks failed: {}", failed.join(", "))))
    }
}
