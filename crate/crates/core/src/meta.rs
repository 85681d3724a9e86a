//! Outer loop: episodic meta-loss, Nesterov SGD over the embedding and ψ,
//! validation-based model selection, ψ fine-tuning and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::codec::{FormatError, Reader, Writer};
use crate::data::{derive_seed, sample_episode, Episode, Split, TaskFamily};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol};
use crate::exec::{map_indexed, Execution};
use crate::learner::{episode_tensors, fuse_logits, predict, run_inner, InnerConfig, LearnerFlags};
use crate::objective::{Psi, PsiLeaves, PsiMask};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FIML";
const CHECKPOINT_VERSION: u8 = 1;

/// Everything needed to classify an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embedding: EmbeddingConfig,
    pub flags: LearnerFlags,
    /// ψ fields the meta-learner updates.
    pub mask: PsiMask,
    pub psi: Psi,
    pub embed_params: Vec<Tensor<f64>>,
}

impl Model {
    /// Fresh model with seeded embedding parameters.
    pub fn new(embedding: EmbeddingConfig, flags: LearnerFlags, mask: PsiMask, psi: Psi, seed: u64) -> Result<Self> {
        embedding.validate()?;
        if psi.v.len() != embedding.locations {
            return Err(Error::Config(format!(
                "psi.v has {} entries, embedding has {} locations",
                psi.v.len(),
                embedding.locations
            )));
        }
        let embed_params = embedding.init_params(derive_seed(seed, "embedding-init"))?;
        Ok(Self {
            embedding,
            flags,
            mask,
            psi,
            embed_params,
        })
    }

    fn structure(&self) -> ModelStructure {
        ModelStructure {
            embedding: self.embedding.clone(),
            flags: self.flags,
            mask: self.mask,
        }
    }

    fn same_structure(&self, other: &Model) -> bool {
        self.embedding == other.embedding
            && self.embed_params.len() == other.embed_params.len()
            && self
                .embed_params
                .iter()
                .zip(&other.embed_params)
                .all(|(a, b)| a.shape() == b.shape())
            && self.psi.v.len() == other.psi.v.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelStructure {
    embedding: EmbeddingConfig,
    flags: LearnerFlags,
    mask: PsiMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Keep the embedding fixed and update ψ only.
    pub freeze_embedding: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 10,
            lr: 1e-3,
            freeze_embedding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub tasks_per_batch: usize,
    pub lr: f64,
    /// Learning rate for ψ; `lr` when absent.
    pub psi_lr: Option<f64>,
    pub momentum: f64,
    /// Applied to embedding parameters only.
    pub weight_decay: f64,
    /// Multiply both learning rates by `lr_decay_factor` every this many
    /// epochs; 0 keeps them constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub ways: usize,
    /// Shot count used for meta-training and validation.
    pub shots: usize,
    pub query_per_class: usize,
    pub iters_train: usize,
    pub iters_eval: usize,
    pub val_episodes: usize,
    pub finetune: FinetuneConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batches_per_epoch: 50,
            tasks_per_batch: 16,
            lr: 0.01,
            psi_lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            ways: 5,
            shots: 1,
            query_per_class: crate::data::DEFAULT_QUERY_PER_CLASS,
            iters_train: 10,
            iters_eval: 15,
            val_episodes: 100,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || self.psi_lr.is_some_and(|l| !(l >= 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.tasks_per_batch == 0 {
            return bad("tasks_per_batch must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be ≥ 0");
        }
        if self.ways == 0 || self.shots == 0 || self.query_per_class == 0 {
            return bad("ways, shots and query_per_class must be ≥ 1");
        }
        if self.val_episodes < 2 {
            return bad("val_episodes must be ≥ 2");
        }
        if !(self.finetune.lr > 0.0) {
            return bad("finetune.lr must be positive");
        }
        Ok(())
    }
}

/// Loss, accuracy and (optionally) gradients for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub loss: f64,
    pub correct: usize,
    pub queries: usize,
    /// Fused query logits `[Ñ, k]`.
    pub logits: Tensor<f64>,
    pub psi_grad: Option<Psi>,
    pub embed_grads: Vec<Tensor<f64>>,
}

/// What to differentiate in [`run_episode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grads {
    None,
    Psi,
    PsiAndEmbedding,
}

/// Embeds the episode, runs the inner loop for `iterations` steps and
/// scores the queries with mean cross-entropy of the fused logits.
pub fn run_episode(model: &Model, ep: &Episode, iterations: usize, grads: Grads) -> Result<EpisodeRun> {
    if ep.query_len() == 0 {
        return Err(Error::Config("episode has no query samples".into()));
    }
    let tape = Tape::<f64>::new();
    let mask = if grads == Grads::None { PsiMask::NONE } else { model.mask };
    let leaves = PsiLeaves::with_mask(&tape, &model.psi, mask);
    let pv = leaves.values(model.flags.transductive)?;
    let params: Vec<_> = model
        .embed_params
        .iter()
        .map(|p| match grads {
            Grads::PsiAndEmbedding => tape.leaf(p.clone()),
            _ => tape.constant(p.clone()),
        })
        .collect();
    let support = model.embedding.embed(&params, tape.constant(ep.support_x.clone()))?;
    let query = model.embedding.embed(&params, tape.constant(ep.query_x.clone()))?;
    let et = episode_tensors(support, &ep.support_y, query, &pv, ep.ways, model.flags)?;
    let cfg = InnerConfig {
        iterations,
        init: model.flags.init,
    };
    let (theta, _) = run_inner(&et, &pv, cfg)?;
    let logits = fuse_logits(theta, &et)?;
    let n = ep.query_len();
    let onehot = tape.constant(Tensor::one_hot(&ep.query_y, ep.ways));
    let loss = logits
        .logsumexp()?
        .sum()?
        .sub(logits.mul(onehot)?.sum()?)?
        .scale(1.0 / n as f64)?;
    let logits_value = logits.value();
    let pred = predict(&logits_value);
    let correct = pred.labels.iter().zip(&ep.query_y).filter(|(a, b)| a == b).count();

    let (psi_grad, embed_grads) = if grads == Grads::None {
        (None, Vec::new())
    } else {
        let g = tape.backward(loss)?;
        let embed = if grads == Grads::PsiAndEmbedding {
            params.iter().map(|&p| g.wrt(p)).collect()
        } else {
            Vec::new()
        };
        (Some(leaves.grads(&g)), embed)
    };
    Ok(EpisodeRun {
        loss: loss.item(),
        correct,
        queries: n,
        logits: logits_value,
        psi_grad,
        embed_grads,
    })
}

/// Mean over tasks of the per-task mean query cross-entropy.
pub fn meta_loss(model: &Model, episodes: &[Episode], iterations: usize, exec: Execution) -> Result<f64> {
    Ok(batch_gradient(model, episodes, iterations, Grads::None, exec)?.loss)
}

/// Batch-averaged loss and gradients.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub accuracy: f64,
    pub psi: Psi,
    pub embed: Vec<Tensor<f64>>,
}

pub fn batch_gradient(
    model: &Model,
    episodes: &[Episode],
    iterations: usize,
    grads: Grads,
    exec: Execution,
) -> Result<BatchGradient> {
    if episodes.is_empty() {
        return Err(Error::Config("empty meta-batch".into()));
    }
    let runs = map_indexed(exec, episodes.len(), |i| run_episode(model, &episodes[i], iterations, grads));
    let scale = 1.0 / episodes.len() as f64;
    let mut psi = zero_like(&model.psi);
    let mut embed: Vec<Tensor<f64>> = if grads == Grads::PsiAndEmbedding {
        model.embed_params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    } else {
        Vec::new()
    };
    let (mut loss, mut accuracy) = (0.0, 0.0);
    for run in runs {
        let run = run?;
        loss += run.loss * scale;
        accuracy += run.correct as f64 / run.queries as f64 * scale;
        if let Some(g) = &run.psi_grad {
            add_scaled_psi(&mut psi, g, scale);
        }
        for (acc, g) in embed.iter_mut().zip(&run.embed_grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
    Ok(BatchGradient {
        loss,
        accuracy,
        psi,
        embed,
    })
}

fn zero_like(psi: &Psi) -> Psi {
    let ts: Vec<_> = psi.to_tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    Psi::from_tensors(&ts).expect("ten tensors")
}

fn add_scaled_psi(acc: &mut Psi, g: &Psi, scale: f64) {
    let mut ts = acc.to_tensors();
    for (a, b) in ts.iter_mut().zip(g.to_tensors()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += scale * y;
        }
    }
    *acc = Psi::from_tensors(&ts).expect("ten tensors");
}

/// Nesterov SGD: `g' = g + wd·p` (embedding only), `v ← μv − lr·g'`,
/// `p ← p + μv − lr·g'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nesterov {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Nesterov {
    /// Updates one parameter tensor and its velocity in place.
    pub fn step_tensor(&self, p: &mut Tensor<f64>, v: &mut Tensor<f64>, g: &Tensor<f64>, lr: f64, decay: bool) -> Result<()> {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Config(format!(
                "optimizer shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let g = g + wd * *p;
            *v = self.momentum * *v - lr * g;
            *p += self.momentum * *v - lr * g;
        }
        Ok(())
    }

    /// One outer step on `model`; `velocity` holds ψ tensors followed by the
    /// embedding tensors.
    pub fn step(
        &self,
        model: &mut Model,
        velocity: &mut [Tensor<f64>],
        grad: &BatchGradient,
        lr: f64,
        psi_lr: f64,
        train_embedding: bool,
    ) -> Result<()> {
        let n_psi = crate::objective::PsiField::ALL.len();
        if velocity.len() != n_psi + model.embed_params.len() {
            return Err(Error::Config("optimizer state does not match model".into()));
        }
        let mut psi = model.psi.to_tensors();
        for ((p, v), g) in psi.iter_mut().zip(velocity.iter_mut()).zip(grad.psi.to_tensors()) {
            self.step_tensor(p, v, &g, psi_lr, false)?;
        }
        model.psi = Psi::from_tensors(&psi)?;
        if train_embedding {
            for ((p, v), g) in model
                .embed_params
                .iter_mut()
                .zip(velocity[n_psi..].iter_mut())
                .zip(&grad.embed)
            {
                self.step_tensor(p, v, g, lr, true)?;
            }
        }
        Ok(())
    }
}

fn zero_velocity(model: &Model) -> Vec<Tensor<f64>> {
    model
        .psi
        .to_tensors()
        .iter()
        .chain(&model.embed_params)
        .map(|t| Tensor::zeros(t.shape()))
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub meta_loss: f64,
    pub val_accuracy: f64,
    pub val_ci95: f64,
}

/// Training state: the best model so far plus everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MetaConfig,
    pub seed: u64,
    pub best: Model,
    /// `-inf` until the first validation.
    pub best_val_accuracy: f64,
    pub current: Model,
    pub velocity: Vec<Tensor<f64>>,
    pub epochs_done: usize,
    /// Training episodes consumed from the seeded stream.
    pub episodes_drawn: u64,
}

impl Checkpoint {
    pub fn fresh(model: Model, config: MetaConfig, seed: u64) -> Self {
        Self {
            velocity: zero_velocity(&model),
            best: model.clone(),
            current: model,
            config,
            seed,
            best_val_accuracy: f64::NEG_INFINITY,
            epochs_done: 0,
            episodes_drawn: 0,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            structure: self.best.structure(),
            config: self.config.clone(),
            seed: self.seed,
            epochs_done: self.epochs_done,
            episodes_drawn: self.episodes_drawn,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.len_prefixed(&json);
        w.f64(self.best_val_accuracy);
        for model in [&self.best, &self.current] {
            write_tensors(&mut w, &model.psi.to_tensors());
            write_tensors(&mut w, &model.embed_params);
        }
        write_tensors(&mut w, &self.velocity);
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header: CheckpointHeader = serde_json::from_slice(r.len_prefixed()?)
            .map_err(|e| FormatError::Invalid(format!("checkpoint header: {e}")))?;
        let best_val_accuracy = r.f64()?;
        let mut models = Vec::with_capacity(2);
        for _ in 0..2 {
            let psi = Psi::from_tensors(&read_tensors(&mut r)?)
                .map_err(|_| FormatError::Invalid("malformed psi block".into()))?;
            let embed_params = read_tensors(&mut r)?;
            let s = &header.structure;
            models.push(Model {
                embedding: s.embedding.clone(),
                flags: s.flags,
                mask: s.mask,
                psi,
                embed_params,
            });
        }
        let velocity = read_tensors(&mut r)?;
        r.expect_end()?;
        let current = models.pop().expect("two models");
        let best = models.pop().expect("two models");
        let expected = header.structure.embedding.param_shapes();
        let shapes = |ts: &[Tensor<f64>]| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let velocity_ok = shapes(&velocity) == shapes(&zero_velocity(&current));
        if shapes(&best.embed_params) != expected || !best.same_structure(&current) || !velocity_ok {
            return Err(FormatError::Invalid("checkpoint tensors do not match their structure".into()).into());
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            best,
            best_val_accuracy,
            current,
            velocity,
            epochs_done: header.epochs_done,
            episodes_drawn: header.episodes_drawn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    structure: ModelStructure,
    config: MetaConfig,
    seed: u64,
    epochs_done: usize,
    episodes_drawn: u64,
}

fn write_tensors(w: &mut Writer, ts: &[Tensor<f64>]) {
    w.u32(ts.len() as u32);
    for t in ts {
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &x in t.data() {
            w.f64(x);
        }
    }
}

fn read_tensors(r: &mut Reader) -> Result<Vec<Tensor<f64>>, FormatError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(FormatError::Invalid(format!("tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        if len > r.remaining() / 8 {
            return Err(FormatError::Truncated {
                offset: 0,
                needed: len * 8 - r.remaining(),
            });
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        out.push(Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    Ok(out)
}

/// What a training run optimizes and on which episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Schedule {
    shots: usize,
    epochs: usize,
    batches_per_epoch: usize,
    lr: f64,
    psi_lr: f64,
    train_embedding: bool,
    episode_seed: u64,
    val_seed: u64,
}

fn lr_factor(cfg: &MetaConfig, epoch: usize) -> f64 {
    if cfg.lr_decay_every == 0 {
        1.0
    } else {
        cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
    }
}

/// Meta-trains until `ckpt.epochs_done == ckpt.config.epochs`, validating
/// after every epoch and keeping the best model. Passing a loaded checkpoint
/// continues exactly where it stopped.
pub fn train(family: &TaskFamily, ckpt: Checkpoint, exec: Execution) -> Result<(Checkpoint, Vec<LogRow>)> {
    ckpt.config.validate()?;
    let cfg = &ckpt.config;
    let schedule = Schedule {
        shots: cfg.shots,
        epochs: cfg.epochs,
        batches_per_epoch: cfg.batches_per_epoch,
        lr: cfg.lr,
        psi_lr: cfg.psi_lr.unwrap_or(cfg.lr),
        train_embedding: true,
        episode_seed: derive_seed(ckpt.seed, "train-episodes"),
        val_seed: derive_seed(ckpt.seed, "val-episodes"),
    };
    fit(family, ckpt, schedule, exec)
}

/// Adapts ψ of `base.best` to `shots`-shot episodes with the embedding
/// frozen (unless the fine-tune config says otherwise).
pub fn finetune_psi(
    base: &Checkpoint,
    family: &TaskFamily,
    shots: usize,
    exec: Execution,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    let ft = base.config.finetune;
    let mut config = base.config.clone();
    config.shots = shots;
    config.epochs = ft.epochs;
    config.batches_per_epoch = ft.batches_per_epoch;
    config.lr = ft.lr;
    config.psi_lr = Some(ft.lr);
    config.validate()?;
    let seed = derive_seed(base.seed, &format!("finetune-{shots}"));
    let ckpt = Checkpoint::fresh(base.best.clone(), config, seed);
    let schedule = Schedule {
        shots,
        epochs: ft.epochs,
        batches_per_epoch: ft.batches_per_epoch,
        lr: ft.lr,
        psi_lr: ft.lr,
        train_embedding: !ft.freeze_embedding,
        episode_seed: derive_seed(seed, "train-episodes"),
        val_seed: derive_seed(base.seed, "val-episodes"),
    };
    fit(family, ckpt, schedule, exec)
}

fn fit(family: &TaskFamily, mut ckpt: Checkpoint, s: Schedule, exec: Execution) -> Result<(Checkpoint, Vec<LogRow>)> {
    let cfg = ckpt.config.clone();
    let opt = Nesterov {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let grads = if s.train_embedding { Grads::PsiAndEmbedding } else { Grads::Psi };
    let val_protocol = EvalProtocol {
        ways: cfg.ways,
        shots: s.shots,
        query_per_class: cfg.query_per_class,
        episodes: cfg.val_episodes,
        iterations: cfg.iters_eval,
    };
    if s.epochs == 0 && ckpt.epochs_done == 0 {
        ckpt.best = ckpt.current.clone();
        return Ok((ckpt, Vec::new()));
    }
    let mut log = Vec::new();
    while ckpt.epochs_done < s.epochs {
        let epoch = ckpt.epochs_done;
        let factor = lr_factor(&cfg, epoch);
        let mut epoch_loss = 0.0;
        for batch in 0..s.batches_per_epoch {
            let start = ckpt.episodes_drawn;
            let episodes = (0..cfg.tasks_per_batch as u64)
                .map(|i| {
                    sample_episode(
                        family,
                        Split::Train,
                        cfg.ways,
                        s.shots,
                        cfg.query_per_class,
                        s.episode_seed,
                        start + i,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            ckpt.episodes_drawn += cfg.tasks_per_batch as u64;
            let context = |e: Error| match e.kind() {
                crate::error::ErrorKind::Numeric => Error::NonFiniteMeta {
                    epoch,
                    batch,
                    source: Box::new(e),
                },
                _ => e,
            };
            let g = batch_gradient(&ckpt.current, &episodes, cfg.iters_train, grads, exec).map_err(context)?;
            if !g.loss.is_finite() {
                return Err(context(Error::NonFiniteInner { iteration: cfg.iters_train }));
            }
            opt.step(
                &mut ckpt.current,
                &mut ckpt.velocity,
                &g,
                s.lr * factor,
                s.psi_lr * factor,
                s.train_embedding,
            )?;
            epoch_loss += g.loss / s.batches_per_epoch as f64;
        }
        ckpt.epochs_done += 1;
        let report = evaluate(&ckpt.current, family, Split::Val, val_protocol, s.val_seed, exec)?;
        if report.accuracy > ckpt.best_val_accuracy {
            ckpt.best_val_accuracy = report.accuracy;
            ckpt.best = ckpt.current.clone();
        }
        log.push(LogRow {
            epoch: ckpt.epochs_done,
            meta_loss: epoch_loss,
            val_accuracy: report.accuracy,
            val_ci95: report.ci95,
        });
    }
    Ok((ckpt, log))
}
