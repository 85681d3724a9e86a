//! Base-learner objective with closed-form gradient and quadratic terms.
//!
//! Everything here is expressed as tape operations so the meta-learner can
//! differentiate the whole inner optimization with respect to ψ and the
//! embedding.
//!
//! Notation used below: `Φ` holds support features with one row per
//! (sample, location), `W: [F, k]` is the linear head, `S = ΦW` the support
//! scores, `A` the per-entry residual weights (`a₊` on the true class, `a₋`
//! elsewhere) and `T` the matching targets (`l₊` / `l₋`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step-length denominators below this produce no step.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

/// Meta-learned base-learner parameters in raw (unconstrained) storage.
///
/// `a±`, `λ_reg`, `λ_tran` and `β` live in log-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub l_pos: f64,
    pub l_neg: f64,
    pub log_a_pos: f64,
    pub log_a_neg: f64,
    pub o_pos: f64,
    pub o_neg: f64,
    pub log_lambda_reg: f64,
    pub log_lambda_tran: f64,
    pub log_beta: f64,
    /// Spatial fusion weights, one per location.
    pub v: Vec<f64>,
}

impl Psi {
    /// Ridge-regression constants: targets ±1, unit residual weights,
    /// `λ_reg = 0.01`, `o± = 1`, uniform fusion.
    pub fn baseline(locations: usize) -> Self {
        Self {
            l_pos: 1.0,
            l_neg: -1.0,
            log_a_pos: 0.0,
            log_a_neg: 0.0,
            o_pos: 1.0,
            o_neg: 1.0,
            log_lambda_reg: 0.01f64.ln(),
            log_lambda_tran: 0.1f64.ln(),
            log_beta: 0.0,
            v: vec![1.0 / locations as f64; locations],
        }
    }

    pub fn a_pos(&self) -> f64 {
        self.log_a_pos.exp()
    }
    pub fn a_neg(&self) -> f64 {
        self.log_a_neg.exp()
    }
    pub fn lambda_reg(&self) -> f64 {
        self.log_lambda_reg.exp()
    }
    pub fn lambda_tran(&self) -> f64 {
        self.log_lambda_tran.exp()
    }
    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    /// Raw values as tensors, in [`PsiField::ALL`] order.
    pub fn to_tensors(&self) -> Vec<Tensor<f64>> {
        PsiField::ALL
            .iter()
            .map(|f| match f {
                PsiField::V => Tensor::vector(self.v.clone()),
                _ => Tensor::scalar(self.scalar(*f)),
            })
            .collect()
    }

    pub fn from_tensors(ts: &[Tensor<f64>]) -> Result<Self> {
        if ts.len() != PsiField::ALL.len() {
            return Err(Error::Config(format!("expected {} ψ tensors", PsiField::ALL.len())));
        }
        let mut psi = Psi::baseline(ts[9].len());
        for (f, t) in PsiField::ALL.iter().zip(ts) {
            match f {
                PsiField::V => psi.v = t.data().to_vec(),
                _ => *psi.scalar_mut(*f) = t.item(),
            }
        }
        Ok(psi)
    }

    /// Raw value of a scalar field.
    pub fn scalar(&self, field: PsiField) -> f64 {
        match field {
            PsiField::LPos => self.l_pos,
            PsiField::LNeg => self.l_neg,
            PsiField::APos => self.log_a_pos,
            PsiField::ANeg => self.log_a_neg,
            PsiField::OPos => self.o_pos,
            PsiField::ONeg => self.o_neg,
            PsiField::LambdaReg => self.log_lambda_reg,
            PsiField::LambdaTran => self.log_lambda_tran,
            PsiField::Beta => self.log_beta,
            PsiField::V => panic!("v is not a scalar field"),
        }
    }

    pub fn scalar_mut(&mut self, field: PsiField) -> &mut f64 {
        match field {
            PsiField::LPos => &mut self.l_pos,
            PsiField::LNeg => &mut self.l_neg,
            PsiField::APos => &mut self.log_a_pos,
            PsiField::ANeg => &mut self.log_a_neg,
            PsiField::OPos => &mut self.o_pos,
            PsiField::ONeg => &mut self.o_neg,
            PsiField::LambdaReg => &mut self.log_lambda_reg,
            PsiField::LambdaTran => &mut self.log_lambda_tran,
            PsiField::Beta => &mut self.log_beta,
            PsiField::V => panic!("v is not a scalar field"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiField {
    LPos,
    LNeg,
    APos,
    ANeg,
    OPos,
    ONeg,
    LambdaReg,
    LambdaTran,
    Beta,
    V,
}

impl PsiField {
    pub const ALL: [PsiField; 10] = [
        PsiField::LPos,
        PsiField::LNeg,
        PsiField::APos,
        PsiField::ANeg,
        PsiField::OPos,
        PsiField::ONeg,
        PsiField::LambdaReg,
        PsiField::LambdaTran,
        PsiField::Beta,
        PsiField::V,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PsiField::LPos => "l_pos",
            PsiField::LNeg => "l_neg",
            PsiField::APos => "a_pos",
            PsiField::ANeg => "a_neg",
            PsiField::OPos => "o_pos",
            PsiField::ONeg => "o_neg",
            PsiField::LambdaReg => "lambda_reg",
            PsiField::LambdaTran => "lambda_tran",
            PsiField::Beta => "beta",
            PsiField::V => "v",
        }
    }
}

/// Which query logits the entropy term acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranMode {
    /// Fused logits `Σ_l v_l Wᵀφ̃_l`, the prediction pathway.
    #[default]
    Fused,
    /// Every location's logits, averaged over locations.
    PerLocation,
}

/// Which ψ fields the meta-learner may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiMask {
    pub l_pos: bool,
    pub l_neg: bool,
    pub a_pos: bool,
    pub a_neg: bool,
    pub o_pos: bool,
    pub o_neg: bool,
    pub lambda_reg: bool,
    pub lambda_tran: bool,
    pub beta: bool,
    pub v: bool,
}

impl PsiMask {
    pub const NONE: PsiMask = PsiMask {
        l_pos: false,
        l_neg: false,
        a_pos: false,
        a_neg: false,
        o_pos: false,
        o_neg: false,
        lambda_reg: false,
        lambda_tran: false,
        beta: false,
        v: false,
    };

    pub const ALL: PsiMask = PsiMask {
        l_pos: true,
        l_neg: true,
        a_pos: true,
        a_neg: true,
        o_pos: true,
        o_neg: true,
        lambda_reg: true,
        lambda_tran: true,
        beta: true,
        v: true,
    };

    pub fn get(&self, field: PsiField) -> bool {
        match field {
            PsiField::LPos => self.l_pos,
            PsiField::LNeg => self.l_neg,
            PsiField::APos => self.a_pos,
            PsiField::ANeg => self.a_neg,
            PsiField::OPos => self.o_pos,
            PsiField::ONeg => self.o_neg,
            PsiField::LambdaReg => self.lambda_reg,
            PsiField::LambdaTran => self.lambda_tran,
            PsiField::Beta => self.beta,
            PsiField::V => self.v,
        }
    }

    pub fn any(&self) -> bool {
        PsiField::ALL.iter().any(|&f| self.get(f))
    }
}

/// Raw ψ registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PsiLeaves<'t, S> {
    pub raw: [Var<'t, S>; 10],
}

impl<'t, S: Scalar> PsiLeaves<'t, S> {
    /// Leaves that receive gradients when `trainable`, constants otherwise.
    pub fn new(tape: &'t Tape<S>, psi: &Psi, trainable: bool) -> Self {
        Self::with_mask(tape, psi, if trainable { PsiMask::ALL } else { PsiMask::NONE })
    }

    /// Leaves for the fields set in `mask`, constants for the rest.
    pub fn with_mask(tape: &'t Tape<S>, psi: &Psi, mask: PsiMask) -> Self {
        let ts = psi.to_tensors();
        let raw = std::array::from_fn(|i| {
            let t = ts[i].cast::<S>();
            if mask.get(PsiField::ALL[i]) {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        });
        Self { raw }
    }

    /// Positive-constrained values; `λ_tran` is dropped when the
    /// transductive term is disabled.
    pub fn values(&self, transductive: bool) -> Result<PsiVars<'t, S>> {
        let [l_pos, l_neg, la_pos, la_neg, o_pos, o_neg, l_reg, l_tran, l_beta, v] = self.raw;
        Ok(PsiVars {
            l_pos,
            l_neg,
            a_pos: la_pos.exp()?,
            a_neg: la_neg.exp()?,
            o_pos,
            o_neg,
            lambda_reg: l_reg.exp()?,
            lambda_tran: if transductive { Some(l_tran.exp()?) } else { None },
            beta: l_beta.exp()?,
            v,
        })
    }

    /// Gradient in raw coordinates, shaped like ψ.
    pub fn grads(&self, grads: &Gradients<S>) -> Psi {
        let ts: Vec<Tensor<f64>> = self.raw.iter().map(|&r| grads.wrt(r).cast()).collect();
        Psi::from_tensors(&ts).expect("ten tensors")
    }
}

/// ψ in constrained form, ready for the objective.
#[derive(Debug, Clone, Copy)]
pub struct PsiVars<'t, S> {
    pub l_pos: Var<'t, S>,
    pub l_neg: Var<'t, S>,
    pub a_pos: Var<'t, S>,
    pub a_neg: Var<'t, S>,
    pub o_pos: Var<'t, S>,
    pub o_neg: Var<'t, S>,
    pub lambda_reg: Var<'t, S>,
    /// `None` forces `λ_tran = 0` exactly.
    pub lambda_tran: Option<Var<'t, S>>,
    pub beta: Var<'t, S>,
    pub v: Var<'t, S>,
}

/// Linear head `W: [F, k]`, no bias.
#[derive(Debug, Clone, Copy)]
pub struct Theta<'t, S> {
    pub w: Var<'t, S>,
}

/// Per-episode features laid out for the objective.
#[derive(Debug, Clone)]
pub struct EpisodeTensors<'t, S: Scalar> {
    /// `[N·L, F]`, row `i·L + l` is location `l` of support sample `i`.
    pub phi: Var<'t, S>,
    /// Class of each row of `phi`.
    pub row_labels: Vec<usize>,
    /// Class of each support sample.
    pub labels: Vec<usize>,
    /// Spatial-mean support features `[N, F]`.
    pub support_mean: Var<'t, S>,
    /// Query block `[Ñ, L, F]`.
    pub phi_q: Var<'t, S>,
    /// Fused query features `[Ñ, F] = Σ_l v_l · phi_q[:, l, :]`.
    pub psi_q: Var<'t, S>,
    pub ways: usize,
    pub locations: usize,
    pub features: usize,
    pub tran_mode: TranMode,
    pos_mask: Var<'t, S>,
    neg_mask: Var<'t, S>,
}

impl<'t, S: Scalar> EpisodeTensors<'t, S> {
    /// `support: [N, L, F]`, `query: [Ñ, L, F]`, `v: [L]`.
    pub fn new(
        support: Var<'t, S>,
        labels: &[usize],
        query: Var<'t, S>,
        v: Var<'t, S>,
        ways: usize,
        tran_mode: TranMode,
    ) -> Result<Self> {
        let ss = support.shape();
        let qs = query.shape();
        if ss.len() != 3 || qs.len() != 3 || ss[1..] != qs[1..] || ss[0] != labels.len() {
            return Err(Error::Config(format!(
                "inconsistent episode blocks: support {ss:?}, query {qs:?}, {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y >= ways) {
            return Err(Error::Config("support label out of range".into()));
        }
        let (n, l, f) = (ss[0], ss[1], ss[2]);
        let tape = support.tape();
        let row_labels: Vec<usize> = labels
            .iter()
            .flat_map(|&y| std::iter::repeat_n(y, l))
            .collect();
        let onehot = Tensor::<S>::one_hot(&row_labels, ways);
        let neg = onehot.map(|x| S::one() - x);
        let mean_w = tape.constant(Tensor::full(&[l], S::from_f64(1.0 / l as f64)));
        Ok(Self {
            phi: support.reshape(&[n * l, f])?,
            row_labels,
            labels: labels.to_vec(),
            support_mean: support.weighted_pool(mean_w)?,
            phi_q: query,
            psi_q: query.weighted_pool(v)?,
            ways,
            locations: l,
            features: f,
            tran_mode,
            pos_mask: tape.constant(onehot),
            neg_mask: tape.constant(neg),
        })
    }

    pub fn query_len(&self) -> usize {
        self.phi_q.shape()[0]
    }

    /// Rows the entropy term sees and their weight.
    fn tran_rows(&self) -> Result<(Var<'t, S>, f64)> {
        Ok(match self.tran_mode {
            TranMode::Fused => (self.psi_q, 1.0),
            TranMode::PerLocation => {
                let nq = self.query_len();
                (
                    self.phi_q.reshape(&[nq * self.locations, self.features])?,
                    1.0 / self.locations as f64,
                )
            }
        })
    }

    /// Residual weights `A = a₊·Y + a₋·(1 − Y)`.
    fn residual_weights(&self, psi: &PsiVars<'t, S>) -> Result<Var<'t, S>> {
        Ok(self
            .pos_mask
            .mul(psi.a_pos)?
            .add(self.neg_mask.mul(psi.a_neg)?)?)
    }

    fn targets(&self, psi: &PsiVars<'t, S>) -> Result<Var<'t, S>> {
        Ok(self
            .pos_mask
            .mul(psi.l_pos)?
            .add(self.neg_mask.mul(psi.l_neg)?)?)
    }
}

/// `R[j,c] = a₊(S[j,c] − l₊)` on the true class, `a₋(S[j,c] − l₋)` elsewhere.
pub fn residual_map<'t, S: Scalar>(
    scores: Var<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    Ok(scores.sub(et.targets(psi)?)?.mul(et.residual_weights(psi)?)?)
}

/// Per-row Shannon entropy of `softmax(s)` written as
/// `logsumexp(s) − Σ_c s_c softmax(s)_c`; `s: [rows, k]`.
pub fn entropy_rows<'t, S: Scalar>(s: Var<'t, S>) -> Result<Var<'t, S>> {
    let p = s.softmax()?;
    let last = s.shape().len() - 1;
    Ok(s.logsumexp()?.sub(p.mul(s)?.sum_axis(last)?)?)
}

/// Entropy loss of one logit vector `[k]` (or summed over rows of `[n, k]`).
pub fn entropy_loss<'t, S: Scalar>(s: Var<'t, S>) -> Result<Var<'t, S>> {
    Ok(entropy_rows(s)?.sum()?)
}

/// Everything that depends on the current `W`, computed once per iterate.
pub struct Linearization<'t, 'e, S: Scalar> {
    et: &'e EpisodeTensors<'t, S>,
    psi: &'e PsiVars<'t, S>,
    w: Var<'t, S>,
    weights: Var<'t, S>,
    residual: Var<'t, S>,
    /// Transductive rows, their weight, logits `β X W` and softmax.
    tran: Option<TranTerms<'t, S>>,
}

struct TranTerms<'t, S> {
    lambda: Var<'t, S>,
    rows: Var<'t, S>,
    weight: f64,
    logits: Var<'t, S>,
    probs: Var<'t, S>,
}

impl<'t, 'e, S: Scalar> Linearization<'t, 'e, S> {
    pub fn new(theta: Theta<'t, S>, et: &'e EpisodeTensors<'t, S>, psi: &'e PsiVars<'t, S>) -> Result<Self> {
        let w = theta.w;
        let weights = et.residual_weights(psi)?;
        let residual = et.phi.matmul(w)?.sub(et.targets(psi)?)?.mul(weights)?;
        let tran = match psi.lambda_tran {
            Some(lambda) if et.query_len() > 0 => {
                let (rows, weight) = et.tran_rows()?;
                let logits = rows.matmul(w)?.mul(psi.beta)?;
                let probs = logits.softmax()?;
                Some(TranTerms {
                    lambda,
                    rows,
                    weight,
                    logits,
                    probs,
                })
            }
            _ => None,
        };
        Ok(Self {
            et,
            psi,
            w,
            weights,
            residual,
            tran,
        })
    }

    pub fn residual(&self) -> Var<'t, S> {
        self.residual
    }

    pub fn inductive_loss(&self) -> Result<Var<'t, S>> {
        Ok(self
            .residual
            .square()?
            .sum()?
            .scale(1.0 / self.et.locations as f64)?)
    }

    /// Unweighted transductive loss; `None` when disabled or `Ñ = 0`.
    pub fn transductive_loss(&self) -> Result<Option<Var<'t, S>>> {
        match &self.tran {
            None => Ok(None),
            Some(t) => {
                let s = t.logits;
                let ent = s.logsumexp()?.sub(t.probs.mul(s)?.sum_axis(1)?)?;
                Ok(Some(ent.sum()?.scale(t.weight)?))
            }
        }
    }

    pub fn base_loss(&self) -> Result<Var<'t, S>> {
        let mut loss = self
            .inductive_loss()?
            .add(self.w.square()?.sum()?.mul(self.psi.lambda_reg)?)?;
        if let (Some(t), Some(tran)) = (&self.tran, self.transductive_loss()?) {
            loss = loss.add(tran.mul(t.lambda)?)?;
        }
        Ok(loss)
    }

    /// `G = (2/L)Φᵀ(A⊙R) + 2λ_reg W + λ_tran β Xᵀ E` with
    /// `E_j = p_j ⊙ (s̄_j − s̃_j)`, `s̄_j = Σ_c p_jc s̃_jc`.
    pub fn gradient(&self) -> Result<Var<'t, S>> {
        let et = self.et;
        let mut g = et
            .phi
            .t()?
            .matmul(self.residual.mul(self.weights)?)?
            .scale(2.0 / et.locations as f64)?
            .add(self.w.mul(self.psi.lambda_reg)?.scale(2.0)?)?;
        if let Some(t) = &self.tran {
            let k = et.ways;
            let mean_logit = t.probs.mul(t.logits)?.sum_axis(1)?.expand_cols(k)?;
            let e = t.probs.mul(mean_logit.sub(t.logits)?)?;
            let coef = t.lambda.mul(self.psi.beta)?.scale(t.weight)?;
            g = g.add(t.rows.t()?.matmul(e)?.mul(coef)?)?;
        }
        Ok(g)
    }

    /// `GᵀH_lsq G = (2/L)‖A ⊙ (ΦG)‖² + 2λ_reg‖G‖²`.
    pub fn quad_lsq(&self, g: Var<'t, S>) -> Result<Var<'t, S>> {
        let et = self.et;
        let jg = et.phi.matmul(g)?.mul(self.weights)?;
        Ok(jg
            .square()?
            .sum()?
            .scale(2.0 / et.locations as f64)?
            .add(g.square()?.sum()?.mul(self.psi.lambda_reg)?.scale(2.0)?)?)
    }

    /// `Σ_j u_jᵀ(diag p_j − p_j p_jᵀ)u_j` with `u_j = β Gᵀx_j`, evaluated as
    /// a softmax-weighted variance. Zero when the term is disabled.
    pub fn quad_tran(&self, g: Var<'t, S>) -> Result<Var<'t, S>> {
        let Some(t) = &self.tran else {
            return Ok(g.tape().scalar(S::zero()));
        };
        let u = t.rows.matmul(g)?.mul(self.psi.beta)?;
        let pu = t.probs.mul(u)?;
        let second = pu.mul(u)?.sum()?;
        let first = pu.sum_axis(1)?.square()?.sum()?;
        Ok(second.sub(first)?.scale(t.weight)?)
    }

    /// `λ_tran` as used in the step-length denominator.
    pub fn lambda_tran(&self) -> Option<Var<'t, S>> {
        self.tran.as_ref().map(|t| t.lambda)
    }

    /// Softmax of the transductive logits, if active.
    pub fn tran_probs(&self) -> Option<Var<'t, S>> {
        self.tran.as_ref().map(|t| t.probs)
    }
}

pub fn inductive_loss<'t, S: Scalar>(
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    Linearization::new(theta, et, psi)?.inductive_loss()
}

/// `Σ_j H(softmax(β Wᵀψ̃_j))`; zero when `Ñ = 0`. Evaluated even when
/// `λ_tran` is disabled.
pub fn transductive_loss<'t, S: Scalar>(
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    if et.query_len() == 0 {
        return Ok(theta.w.tape().scalar(S::zero()));
    }
    let (rows, weight) = et.tran_rows()?;
    let s = rows.matmul(theta.w)?.mul(psi.beta)?;
    Ok(entropy_loss(s)?.scale(weight)?)
}

pub fn base_loss<'t, S: Scalar>(
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    Linearization::new(theta, et, psi)?.base_loss()
}

pub fn grad_base<'t, S: Scalar>(
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    Linearization::new(theta, et, psi)?.gradient()
}

pub fn quad_lsq<'t, S: Scalar>(
    g: Var<'t, S>,
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    Linearization::new(theta, et, psi)?.quad_lsq(g)
}

/// Unweighted `Q_tran`; the softmax is taken at `theta`.
pub fn quad_tran<'t, S: Scalar>(
    g: Var<'t, S>,
    theta: Theta<'t, S>,
    et: &EpisodeTensors<'t, S>,
    psi: &PsiVars<'t, S>,
) -> Result<Var<'t, S>> {
    if et.query_len() == 0 {
        return Ok(g.tape().scalar(S::zero()));
    }
    let forced = PsiVars {
        lambda_tran: Some(psi.lambda_tran.unwrap_or(psi.beta)),
        ..*psi
    };
    Linearization::new(theta, et, &forced)?.quad_tran(g)
}

/// `α = ‖G‖² / (Q_lsq + λ_tran Q_tran)`, or a constant 0 when the
/// denominator falls below [`DENOMINATOR_GUARD`].
pub fn step_length<'t, S: Scalar>(
    g: Var<'t, S>,
    q_lsq: Var<'t, S>,
    q_tran: Var<'t, S>,
    lambda_tran: Option<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let den = match lambda_tran {
        Some(l) => q_lsq.add(q_tran.mul(l)?)?,
        None => q_lsq,
    };
    if den.item().as_f64() < DENOMINATOR_GUARD {
        return Ok(g.tape().scalar(S::zero()));
    }
    Ok(g.square()?.sum()?.div(den)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::{central_difference, rel_error, rel_error_scalar};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        support: Tensor<f64>,
        labels: Vec<usize>,
        query: Tensor<f64>,
        w: Tensor<f64>,
        ways: usize,
    }

    fn instance(seed: u64, n_per: usize, ways: usize, l: usize, f: usize, nq: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let n = n_per * ways;
        Instance {
            support: Tensor::new(vec![n, l, f], r(n * l * f)).unwrap(),
            labels: (0..n).map(|i| i % ways).collect(),
            query: Tensor::new(vec![nq, l, f], r(nq * l * f)).unwrap(),
            w: Tensor::new(vec![f, ways], r(f * ways)).unwrap(),
            ways,
        }
    }

    fn random_psi(seed: u64, l: usize) -> Psi {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut u = |a: f64, b: f64| rng.random_range(a..b);
        Psi {
            l_pos: u(0.5, 1.5),
            l_neg: u(-1.5, -0.2),
            log_a_pos: u(-0.5, 0.5),
            log_a_neg: u(-0.5, 0.5),
            o_pos: u(0.5, 1.5),
            o_neg: u(-0.5, 0.5),
            log_lambda_reg: u(-4.0, 0.0),
            log_lambda_tran: u(-2.0, 0.5),
            log_beta: u(-0.5, 0.5),
            v: (0..l).map(|_| u(0.1, 1.0)).collect(),
        }
    }

    fn with_episode<R>(
        inst: &Instance,
        psi: &Psi,
        transductive: bool,
        mode: TranMode,
        f: impl for<'t> FnOnce(&'t Tape<f64>, &EpisodeTensors<'t, f64>, &PsiVars<'t, f64>, Theta<'t, f64>) -> R,
    ) -> R {
        let tape = Tape::new();
        let leaves = PsiLeaves::new(&tape, psi, false);
        let pv = leaves.values(transductive).unwrap();
        let et = EpisodeTensors::new(
            tape.constant(inst.support.clone()),
            &inst.labels,
            tape.constant(inst.query.clone()),
            pv.v,
            inst.ways,
            mode,
        )
        .unwrap();
        let w = Theta {
            w: tape.constant(inst.w.clone()),
        };
        f(&tape, &et, &pv, w)
    }

    fn base_loss_at(inst: &Instance, psi: &Psi, tran: bool, mode: TranMode, w: &Tensor<f64>) -> f64 {
        let inst2 = Instance {
            w: w.clone(),
            support: inst.support.clone(),
            labels: inst.labels.clone(),
            query: inst.query.clone(),
            ways: inst.ways,
        };
        with_episode(&inst2, psi, tran, mode, |_, et, pv, th| base_loss(th, et, pv).unwrap().item())
    }

    #[test]
    fn residual_baseline_cases() {
        let tape = Tape::<f64>::new();
        let psi = Psi::baseline(1);
        let pv = PsiLeaves::new(&tape, &psi, false).values(false).unwrap();
        let support = tape.constant(Tensor::zeros(&[2, 1, 3]));
        let query = tape.constant(Tensor::zeros(&[0, 1, 3]));
        let et = EpisodeTensors::new(support, &[0, 1], query, pv.v, 2, TranMode::Fused).unwrap();

        let t = tape.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap());
        let r = residual_map(t, &et, &pv).unwrap().value();
        assert!(r.data().iter().all(|&x| x.abs() < 1e-15));

        let s0 = tape.constant(Tensor::zeros(&[2, 2]));
        let r = residual_map(s0, &et, &pv).unwrap().value();
        assert_eq!(r.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn residual_weighted_case() {
        let tape = Tape::<f64>::new();
        let mut psi = Psi::baseline(1);
        psi.log_a_pos = 2f64.ln();
        psi.log_a_neg = 0.5f64.ln();
        let pv = PsiLeaves::new(&tape, &psi, false).values(false).unwrap();
        let et = EpisodeTensors::new(
            tape.constant(Tensor::zeros(&[1, 1, 1])),
            &[0],
            tape.constant(Tensor::zeros(&[0, 1, 1])),
            pv.v,
            2,
            TranMode::Fused,
        )
        .unwrap();
        let r = residual_map(tape.constant(Tensor::zeros(&[1, 2])), &et, &pv).unwrap().value();
        // a₊(0 − 1) = −2, a₋(0 − (−1)) = 0.5
        assert!((r.data()[0] + 2.0).abs() < 1e-14);
        assert!((r.data()[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn inductive_loss_cases() {
        // single sample, L=1, k=2, W=0 → R=(−1,1) → 2
        let inst = Instance {
            support: Tensor::new(vec![1, 1, 2], vec![0.3, -0.2]).unwrap(),
            labels: vec![0],
            query: Tensor::zeros(&[0, 1, 2]),
            w: Tensor::zeros(&[2, 2]),
            ways: 2,
        };
        let v = with_episode(&inst, &Psi::baseline(1), false, TranMode::Fused, |_, et, pv, th| {
            inductive_loss(th, et, pv).unwrap().item()
        });
        assert!((v - 2.0).abs() < 1e-15);

        // random instance vs naive loops
        let inst = instance(4, 2, 3, 2, 4, 5);
        let psi = random_psi(4, 2);
        let got = with_episode(&inst, &psi, false, TranMode::Fused, |_, et, pv, th| {
            inductive_loss(th, et, pv).unwrap().item()
        });
        let (l, f, k) = (2, 4, 3);
        let mut oracle = 0.0;
        for i in 0..inst.labels.len() {
            for loc in 0..l {
                for c in 0..k {
                    let mut s = 0.0;
                    for ff in 0..f {
                        s += inst.support.data()[(i * l + loc) * f + ff] * inst.w.data()[ff * k + c];
                    }
                    let r = if c == inst.labels[i] {
                        psi.a_pos() * (s - psi.l_pos)
                    } else {
                        psi.a_neg() * (s - psi.l_neg)
                    };
                    oracle += r * r;
                }
            }
        }
        oracle /= l as f64;
        assert!((got - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    fn entropy_oracle(s: &[f64]) -> f64 {
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        -s.iter()
            .map(|x| {
                let p = (x - m).exp() / z;
                if p > 0.0 {
                    p * p.ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    }

    #[test]
    fn entropy_cases() {
        let tape = Tape::<f64>::new();
        for k in 1..6 {
            let h = entropy_loss(tape.constant(Tensor::zeros(&[k]))).unwrap().item();
            assert!((h - (k as f64).ln()).abs() < 1e-14);
        }
        let h = entropy_loss(tape.constant(Tensor::vector(vec![20.0, 0.0]))).unwrap().item();
        assert!(h < 1e-3);
        let h = entropy_loss(tape.constant(Tensor::vector(vec![1.0, -1.0]))).unwrap().item();
        assert!((h - entropy_oracle(&[1.0, -1.0])).abs() < 1e-14);
    }

    #[test]
    fn transductive_loss_cases() {
        let mut inst = instance(1, 1, 3, 2, 3, 0);
        let psi = Psi::baseline(2);
        let v = with_episode(&inst, &psi, true, TranMode::Fused, |_, et, pv, th| {
            transductive_loss(th, et, pv).unwrap().item()
        });
        assert_eq!(v, 0.0);

        inst = instance(1, 1, 3, 2, 3, 7);
        inst.w = Tensor::zeros(&[3, 3]);
        let v = with_episode(&inst, &psi, true, TranMode::Fused, |_, et, pv, th| {
            transductive_loss(th, et, pv).unwrap().item()
        });
        assert!((v - 7.0 * 3f64.ln()).abs() < 1e-12);

        let inst = instance(2, 1, 3, 2, 3, 6);
        let psi = random_psi(2, 2);
        let got = with_episode(&inst, &psi, true, TranMode::Fused, |_, et, pv, th| {
            transductive_loss(th, et, pv).unwrap().item()
        });
        let mut oracle = 0.0;
        for j in 0..6 {
            let mut s = vec![0.0; 3];
            for (c, sc) in s.iter_mut().enumerate() {
                for loc in 0..2 {
                    for ff in 0..3 {
                        *sc += psi.v[loc] * inst.query.data()[(j * 2 + loc) * 3 + ff] * inst.w.data()[ff * 3 + c];
                    }
                }
                *sc *= psi.beta();
            }
            oracle += entropy_oracle(&s);
        }
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn base_loss_is_sum_of_parts() {
        let inst = instance(3, 2, 3, 2, 4, 5);
        let psi = random_psi(3, 2);
        let (total, ind, tran) = with_episode(&inst, &psi, true, TranMode::Fused, |_, et, pv, th| {
            (
                base_loss(th, et, pv).unwrap().item(),
                inductive_loss(th, et, pv).unwrap().item(),
                transductive_loss(th, et, pv).unwrap().item(),
            )
        });
        let reg = psi.lambda_reg() * inst.w.norm_sq();
        assert!((total - (ind + psi.lambda_tran() * tran + reg)).abs() < 1e-12);

        let mut zero = inst;
        zero.w = Tensor::zeros(&[4, 3]);
        let (total, ind) = with_episode(&zero, &Psi::baseline(2), false, TranMode::Fused, |_, et, pv, th| {
            (base_loss(th, et, pv).unwrap().item(), inductive_loss(th, et, pv).unwrap().item())
        });
        assert_eq!(total, ind);
    }

    #[test]
    fn gradient_matches_finite_differences_in_all_regimes() {
        for seed in 0..12 {
            let inst = instance(seed, 2, 3, 2, 3, 4);
            let mut psi = random_psi(seed, 2);
            for (tran, mode, inductive_off) in [
                (false, TranMode::Fused, false),
                (true, TranMode::Fused, false),
                (true, TranMode::PerLocation, false),
                (true, TranMode::Fused, true),
            ] {
                if inductive_off {
                    // transductive-dominated: tiny residual weights
                    psi.log_a_pos = -8.0;
                    psi.log_a_neg = -8.0;
                }
                let g = with_episode(&inst, &psi, tran, mode, |_, et, pv, th| {
                    grad_base(th, et, pv).unwrap().value()
                });
                let fd = central_difference(&inst.w, 1e-5, |w| base_loss_at(&inst, &psi, tran, mode, w));
                let err = rel_error(&g, &fd);
                assert!(err < 1e-6, "seed {seed} tran {tran} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn uniform_query_logits_give_zero_transductive_gradient() {
        let mut inst = instance(5, 1, 3, 1, 2, 4);
        inst.w = Tensor::zeros(&[2, 3]);
        let (with, without) = (
            with_episode(&inst, &Psi::baseline(1), true, TranMode::Fused, |_, et, pv, th| {
                grad_base(th, et, pv).unwrap().value()
            }),
            with_episode(&inst, &Psi::baseline(1), false, TranMode::Fused, |_, et, pv, th| {
                grad_base(th, et, pv).unwrap().value()
            }),
        );
        assert_eq!(with, without);
    }

    #[test]
    fn quad_lsq_cases() {
        // Φ = I, A = 1, L = 1, λ_reg → 0: 2‖G‖²
        let f = 3;
        let inst = Instance {
            support: Tensor::eye(f).reshaped(vec![f, 1, f]).unwrap(),
            labels: vec![0, 1, 2],
            query: Tensor::zeros(&[0, 1, f]),
            w: Tensor::zeros(&[f, 3]),
            ways: 3,
        };
        let mut psi = Psi::baseline(1);
        psi.log_lambda_reg = -80.0;
        let g = Tensor::new(vec![f, 3], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap();
        let q = with_episode(&inst, &psi, false, TranMode::Fused, |tape, et, pv, th| {
            quad_lsq(tape.constant(g.clone()), th, et, pv).unwrap().item()
        });
        assert!((q - 2.0 * g.norm_sq()).abs() < 1e-10);

        let q0 = with_episode(&inst, &psi, false, TranMode::Fused, |tape, et, pv, th| {
            quad_lsq(tape.constant(Tensor::zeros(&[f, 3])), th, et, pv).unwrap().item()
        });
        assert_eq!(q0, 0.0);
    }

    #[test]
    fn quad_tran_cases() {
        // p uniform (W = 0, k = 2) and u = (1, −1) → 1
        let inst = Instance {
            support: Tensor::zeros(&[2, 1, 1]),
            labels: vec![0, 1],
            query: Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            w: Tensor::zeros(&[1, 2]),
            ways: 2,
        };
        let psi = Psi::baseline(1);
        let q = with_episode(&inst, &psi, true, TranMode::Fused, |tape, et, pv, th| {
            let g = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
            quad_tran(g, th, et, pv).unwrap().item()
        });
        assert!((q - 1.0).abs() < 1e-15);

        // u constant across classes → 0
        let inst = instance(6, 1, 3, 2, 3, 5);
        let q = with_episode(&inst, &random_psi(6, 2), true, TranMode::Fused, |tape, et, pv, th| {
            let g = tape.constant(Tensor::new(vec![3, 3], vec![0.4, 0.4, 0.4, -1.0, -1.0, -1.0, 2.0, 2.0, 2.0]).unwrap());
            quad_tran(g, th, et, pv).unwrap().item()
        });
        assert!(q.abs() < 1e-12);
    }

    #[test]
    fn isotropic_quadratic_converges_in_one_step() {
        // Φ = 0 makes L_ind constant; λ_reg = 1 gives L = c + ‖W‖².
        let inst = Instance {
            support: Tensor::zeros(&[2, 1, 3]),
            labels: vec![0, 1],
            query: Tensor::zeros(&[0, 1, 3]),
            w: Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap(),
            ways: 2,
        };
        let mut psi = Psi::baseline(1);
        psi.log_lambda_reg = 0.0;
        with_episode(&inst, &psi, false, TranMode::Fused, |_, et, pv, th| {
            let lin = Linearization::new(th, et, pv).unwrap();
            let g = lin.gradient().unwrap();
            let alpha = step_length(g, lin.quad_lsq(g).unwrap(), lin.quad_tran(g).unwrap(), None).unwrap();
            assert!((alpha.item() - 0.5).abs() < 1e-15);
            let next = th.w.sub(g.mul(alpha).unwrap()).unwrap().value();
            assert!(next.data().iter().all(|x| x.abs() < 1e-15));
        });
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::zeros(&[2, 2]));
        let q = tape.scalar(0.0);
        assert_eq!(step_length(g, q, q, Some(tape.scalar(1.0))).unwrap().item(), 0.0);
    }

    #[test]
    fn psi_gradients_match_finite_differences() {
        let inst = instance(8, 2, 3, 2, 3, 4);
        let psi = random_psi(8, 2);
        let loss_of = |p: &Psi| base_loss_at(&inst, p, true, TranMode::Fused, &inst.w);
        let tape = Tape::new();
        let leaves = PsiLeaves::new(&tape, &psi, true);
        let pv = leaves.values(true).unwrap();
        let et = EpisodeTensors::new(
            tape.constant(inst.support.clone()),
            &inst.labels,
            tape.constant(inst.query.clone()),
            pv.v,
            3,
            TranMode::Fused,
        )
        .unwrap();
        let loss = base_loss(Theta { w: tape.constant(inst.w.clone()) }, &et, &pv).unwrap();
        let grads = leaves.grads(&tape.backward(loss).unwrap());
        for field in PsiField::ALL {
            if field == PsiField::V {
                let fd = central_difference(&Tensor::vector(psi.v.clone()), 1e-5, |t| {
                    let mut p = psi.clone();
                    p.v = t.data().to_vec();
                    loss_of(&p)
                });
                assert!(rel_error(&Tensor::vector(grads.v.clone()), &fd) < 1e-6);
                continue;
            }
            let h = 1e-5;
            let mut plus = psi.clone();
            *plus.scalar_mut(field) += h;
            let mut minus = psi.clone();
            *minus.scalar_mut(field) -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads.scalar(field);
            // o± do not enter the objective at fixed W
            if matches!(field, PsiField::OPos | PsiField::ONeg) {
                assert_eq!(an, 0.0);
                assert!(fd.abs() < 1e-9);
            } else {
                assert!(rel_error_scalar(an, fd) < 1e-6, "{}: {an} vs {fd}", field.name());
            }
        }
    }

    proptest! {
        #[test]
        fn entropy_equals_shannon(s in prop::collection::vec(-8.0f64..8.0, 1..7)) {
            let tape = Tape::<f64>::new();
            let h = entropy_loss(tape.constant(Tensor::vector(s.clone()))).unwrap().item();
            prop_assert!((h - entropy_oracle(&s)).abs() < 1e-10);
        }

        #[test]
        fn entropy_shift_invariant(s in prop::collection::vec(-8.0f64..8.0, 1..7), c in -50.0f64..50.0) {
            let tape = Tape::<f64>::new();
            let a = entropy_loss(tape.constant(Tensor::vector(s.clone()))).unwrap().item();
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let b = entropy_loss(tape.constant(Tensor::vector(shifted))).unwrap().item();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn quad_tran_non_negative(seed in 0u64..10_000) {
            let inst = instance(seed, 1, 4, 2, 3, 3);
            let psi = random_psi(seed, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = with_episode(&inst, &psi, true, TranMode::Fused, |tape, et, pv, th| {
                quad_tran(tape.constant(Tensor::new(vec![3, 4], g.clone()).unwrap()), th, et, pv).unwrap().item()
            });
            prop_assert!(q >= -1e-12);
        }
    }
}
