//! Per-episode base learner: initialize the linear head, run a fixed number
//! of steepest-descent steps with closed-form step lengths, classify queries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp_row, AutodiffError, Scalar, Tensor, Var};
use crate::embedding::spatial_mean;
use crate::error::{Error, Result};
use crate::objective::{step_length, EpisodeTensors, Linearization, PsiVars, Theta, TranMode};

/// Added to the mean squared feature norm before dividing, so an all-zero
/// support set yields `W = 0` instead of a division by zero.
const INIT_NORM_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Zero,
    /// Contrastive class-mean prototypes `w_c = (o₊μ_c − o₋μ_¬c) / mean‖m_i‖²`.
    Support,
}

/// Structural switches that decide which parts of the learner exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerFlags {
    pub init: InitKind,
    /// Per-location support rows and learned fusion weights; otherwise
    /// features are spatially averaged first.
    pub dense: bool,
    /// Include the query-entropy term.
    pub transductive: bool,
    #[serde(default)]
    pub tran_mode: TranMode,
}

impl Default for LearnerFlags {
    fn default() -> Self {
        Self {
            init: InitKind::Zero,
            dense: false,
            transductive: false,
            tran_mode: TranMode::Fused,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub iterations: usize,
    pub init: InitKind,
}

/// Values observed along the inner loop, detached from the tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InnerTrace {
    /// Base loss at every iterate, `iterations + 1` entries.
    pub losses: Vec<f64>,
    pub step_lengths: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl InnerTrace {
    /// True when no iterate raises the loss by more than `tol` (relative).
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.losses
            .windows(2)
            .all(|w| w[1] <= w[0] + tol * w[0].abs().max(1.0))
    }
}

/// Lays out embedded blocks for the objective, pooling spatially when the
/// learner is not dense. `v` is only used in dense mode.
pub fn episode_tensors<'t, S: Scalar>(
    support: Var<'t, S>,
    labels: &[usize],
    query: Var<'t, S>,
    psi: &PsiVars<'t, S>,
    ways: usize,
    flags: LearnerFlags,
) -> Result<EpisodeTensors<'t, S>> {
    if flags.dense {
        return EpisodeTensors::new(support, labels, query, psi.v, ways, flags.tran_mode);
    }
    let pool = |block: Var<'t, S>| -> Result<Var<'t, S>> {
        let (b, f) = (block.shape()[0], block.shape()[2]);
        Ok(spatial_mean(block)?.reshape(&[b, 1, f])?)
    };
    let one = support.tape().constant(Tensor::ones(&[1]));
    EpisodeTensors::new(pool(support)?, labels, pool(query)?, one, ways, flags.tran_mode)
}

pub fn init_theta<'t, S: Scalar>(
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
    kind: InitKind,
) -> Result<Theta<'t, S>> {
    let tape = et.phi.tape();
    let (f, k) = (et.features, et.ways);
    match kind {
        InitKind::Zero => Ok(Theta {
            w: tape.constant(Tensor::zeros(&[f, k])),
        }),
        InitKind::Support => {
            let n = et.labels.len();
            let mut counts = vec![0usize; k];
            for &y in &et.labels {
                counts[y] += 1;
            }
            // Averaging operators over own-class and other-class samples.
            let mut own = Tensor::<S>::zeros(&[k, n]);
            let mut other = Tensor::<S>::zeros(&[k, n]);
            for c in 0..k {
                for (i, &y) in et.labels.iter().enumerate() {
                    if y == c {
                        own.data_mut()[c * n + i] = S::from_f64(1.0 / counts[c] as f64);
                    } else {
                        other.data_mut()[c * n + i] = S::from_f64(1.0 / (n - counts[c]) as f64);
                    }
                }
            }
            let m = et.support_mean;
            let mu = tape.constant(own).matmul(m)?.mul(psi.o_pos)?;
            let mu_not = tape.constant(other).matmul(m)?.mul(psi.o_neg)?;
            let norm = m.square()?.sum()?.scale(1.0 / n as f64)?.add_const(INIT_NORM_FLOOR)?;
            Ok(Theta {
                w: mu.sub(mu_not)?.t()?.div(norm)?,
            })
        }
    }
}

fn non_finite_at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::LogDomain) => {
            Error::NonFiniteInner { iteration }
        }
        other => other,
    }
}

/// Runs `cfg.iterations` steps from `init_theta`, keeping every step on the
/// tape so the result stays differentiable in ψ and the features.
pub fn run_inner<'t, S: Scalar>(
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
    cfg: InnerConfig,
) -> Result<(Theta<'t, S>, InnerTrace)> {
    let mut theta = init_theta(et, psi, cfg.init).map_err(non_finite_at(0))?;
    let mut trace = InnerTrace::default();
    for it in 0..=cfg.iterations {
        let step = |theta: Theta<'t, S>| -> Result<(f64, Option<(Theta<'t, S>, f64, f64)>)> {
            let lin = Linearization::new(theta, et, psi)?;
            let loss = lin.base_loss()?.item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteInner { iteration: it });
            }
            if it == cfg.iterations {
                return Ok((loss, None));
            }
            let g = lin.gradient()?;
            let alpha = step_length(g, lin.quad_lsq(g)?, lin.quad_tran(g)?, lin.lambda_tran())?;
            let next = Theta {
                w: theta.w.sub(g.mul(alpha)?)?,
            };
            let gnorm = g.value().norm_sq().as_f64().sqrt();
            Ok((loss, Some((next, alpha.item().as_f64(), gnorm))))
        };
        let (loss, next) = step(theta).map_err(non_finite_at(it))?;
        trace.losses.push(loss);
        if let Some((next, alpha, gnorm)) = next {
            trace.step_lengths.push(alpha);
            trace.grad_norms.push(gnorm);
            theta = next;
        }
    }
    Ok((theta, trace))
}

/// Fused query logits `s̃_j = Σ_l v_l Wᵀφ̃_{j,l}`, shape `[Ñ, k]`.
pub fn fuse_logits<'t, S: Scalar>(theta: Theta<'t, S>, et: &EpisodeTensors<'t, S>) -> Result<Var<'t, S>> {
    Ok(et.psi_q.matmul(theta.w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Argmax class per query; ties go to the lowest index.
    pub labels: Vec<usize>,
    /// Row-wise softmax `[Ñ, k]`.
    pub probs: Tensor<f64>,
}

pub fn predict<S: Scalar>(logits: &Tensor<S>) -> Prediction {
    let (n, k) = (logits.rows(), logits.cols());
    let mut labels = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * k);
    for j in 0..n {
        let row: Vec<f64> = logits.row(j).iter().map(|x| x.as_f64()).collect();
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.push(best);
        let lse = logsumexp_row(&row);
        probs.extend(row.iter().map(|x| (x - lse).exp()));
    }
    Prediction {
        labels,
        probs: Tensor::new(vec![n, k], probs).expect("sized"),
    }
}
