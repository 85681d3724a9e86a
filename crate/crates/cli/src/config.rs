//! The run configuration file. Every key is optional; absent keys take the
//! values of the fixed desk benchmark. See `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fewiter::data::{generate_family, load_dataset, FamilySpec, TaskFamily};
use fewiter::desk;
use fewiter::embedding::EmbeddingConfig;
use fewiter::eval::{EvalProtocol, Experiment, LadderKind, Rung, SweepMode};
use fewiter::learner::{InitKind, LearnerFlags};
use fewiter::meta::MetaConfig;
use fewiter::objective::{Psi, PsiMask, TranMode};

use crate::CliError;

pub const SEED_ENV: &str = "FIML_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// FSDT dataset file. When set, `[family]` is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub family: FamilySpec,
    pub embedding: EmbeddingConfig,
    pub learner: LearnerFlags,
    pub psi: PsiInit,
    pub learn: PsiMask,
    pub meta: MetaConfig,
    pub eval: EvalProtocol,
    pub ablation: AblationSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: desk::SEED,
            output_dir: PathBuf::from("runs"),
            threads: 0,
            dataset: None,
            family: desk::family_spec(),
            embedding: desk::embedding(),
            learner: LearnerFlags {
                init: InitKind::Support,
                dense: true,
                transductive: true,
                tran_mode: TranMode::Fused,
            },
            psi: PsiInit::default(),
            learn: PsiMask::ALL,
            meta: desk::meta_config(),
            eval: desk::eval_protocol(),
            ablation: AblationSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Initial ψ on its natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiInit {
    pub l_pos: f64,
    pub l_neg: f64,
    pub a_pos: f64,
    pub a_neg: f64,
    pub o_pos: f64,
    pub o_neg: f64,
    pub lambda_reg: f64,
    pub lambda_tran: f64,
    pub beta: f64,
    /// Fusion weights; uniform `1/L` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
}

impl Default for PsiInit {
    fn default() -> Self {
        Self {
            l_pos: 1.0,
            l_neg: -1.0,
            a_pos: 1.0,
            a_neg: 1.0,
            o_pos: 1.0,
            o_neg: 1.0,
            lambda_reg: 0.01,
            lambda_tran: 0.1,
            beta: 1.0,
            v: None,
        }
    }
}

impl PsiInit {
    pub fn to_psi(&self, locations: usize) -> Result<Psi, CliError> {
        for (name, x) in [
            ("a_pos", self.a_pos),
            ("a_neg", self.a_neg),
            ("lambda_reg", self.lambda_reg),
            ("lambda_tran", self.lambda_tran),
            ("beta", self.beta),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(CliError::Config(format!("psi.{name} must be positive and finite, got {x}")));
            }
        }
        let v = match &self.v {
            Some(v) if v.len() != locations => {
                return Err(CliError::Config(format!(
                    "psi.v has {} entries but the embedding has {locations} locations",
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => vec![1.0 / locations as f64; locations],
        };
        Ok(Psi {
            l_pos: self.l_pos,
            l_neg: self.l_neg,
            log_a_pos: self.a_pos.ln(),
            log_a_neg: self.a_neg.ln(),
            o_pos: self.o_pos,
            o_neg: self.o_neg,
            log_lambda_reg: self.lambda_reg.ln(),
            log_lambda_tran: self.lambda_tran.ln(),
            log_beta: self.beta.ln(),
            v,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub ladder: LadderKind,
    pub shots: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            ladder: LadderKind::Main,
            shots: desk::SHOTS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub mode: SweepMode,
    /// Iteration grid; the mode's standard grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    pub shots: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mode: SweepMode::EvalSide,
            grid: None,
            shots: 1,
        }
    }
}

impl SweepSection {
    pub fn grid_or_default(&self) -> Vec<usize> {
        match (&self.grid, self.mode) {
            (Some(g), _) => g.clone(),
            (None, SweepMode::EvalSide) => desk::EVAL_SWEEP_GRID.to_vec(),
            (None, SweepMode::TrainSide) => desk::TRAIN_SWEEP_GRID.to_vec(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`) and applies the seed
    /// override from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.embedding.validate()?;
        self.meta.validate()?;
        self.eval.validate()?;
        self.psi.to_psi(self.embedding.locations)?;
        if self.ablation.shots.is_empty() {
            return Err(CliError::Config("ablation.shots is empty".into()));
        }
        if self.sweep.grid_or_default().is_empty() {
            return Err(CliError::Config("sweep.grid is empty".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Result<TaskFamily, CliError> {
        let family = match &self.dataset {
            Some(path) => load_dataset(path)?,
            None => generate_family(&self.family, self.seed)?,
        };
        if family.input_dim() != self.embedding.input_dim {
            return Err(CliError::Config(format!(
                "embedding.input_dim is {} but the family has {}-dim inputs",
                self.embedding.input_dim,
                family.input_dim()
            )));
        }
        Ok(family)
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            embedding: self.embedding.clone(),
            meta: self.meta.clone(),
            eval: self.eval,
            seed: self.seed,
        }
    }

    /// The learner configured by `[learner]` and `[learn]` as a ladder rung.
    pub fn rung(&self) -> Rung {
        Rung {
            name: "config".into(),
            flags: self.learner,
            mask: self.learn,
        }
    }

    pub fn initial_psi(&self) -> Result<Psi, CliError> {
        self.psi.to_psi(self.embedding.locations)
    }
}
