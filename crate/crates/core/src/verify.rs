//! Numerical verification suite run by `fewiter gradcheck`: finite-difference
//! gradient checks, closed-form and explicitly assembled oracles, and inner
//! loop properties. Every check is seeded and deterministic.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::fd::{central_difference, rel_error, rel_error_scalar};
use crate::autodiff::{Tape, Tensor};
use crate::data::{derive_seed, generate_family, sample_episode, Episode, FamilySpec, Split, TaskFamily};
use crate::desk;
use crate::embedding::{EmbeddingConfig, EmbeddingKind};
use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, EvalReport};
use crate::exec::{map_indexed, Execution};
use crate::learner::{episode_tensors, run_inner, InitKind, InnerConfig, InnerTrace, LearnerFlags};
use crate::meta::{batch_gradient, meta_loss, Grads, Model};
use crate::objective::{
    base_loss, entropy_loss, grad_base, quad_lsq, quad_tran, step_length, EpisodeTensors, Linearization, Psi,
    PsiField, PsiLeaves, PsiMask, PsiVars, Theta, TranMode,
};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} [{}] {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: u8, name: &'static str, limit: Option<f64>, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let outcome = f();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if let Some(limit) = limit {
        if seconds >= limit {
            passed = false;
            detail.push_str(&format!("; over the {limit:.0}s budget"));
        }
    }
    Check {
        id,
        name,
        passed,
        detail,
        seconds,
    }
}

/// Runs every check in order.
pub fn run_all(exec: Execution) -> Vec<Check> {
    vec![
        gradient_suite(),
        meta_gradient_suite(),
        ridge_oracle(),
        step_optimality(),
        entropy_identities(),
        hessian_oracles(),
        monotone_inner_loop(exec),
    ]
}

/// A random episode block with a random head and ψ.
struct Draw {
    support: Tensor<f64>,
    labels: Vec<usize>,
    query: Tensor<f64>,
    w: Tensor<f64>,
    ways: usize,
    psi: Psi,
    transductive: bool,
    mode: TranMode,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn random_psi(rng: &mut ChaCha8Rng, locations: usize) -> Psi {
    Psi {
        l_pos: rng.random_range(0.5..1.5),
        l_neg: rng.random_range(-1.5..-0.2),
        log_a_pos: rng.random_range(-0.5..0.5),
        log_a_neg: rng.random_range(-0.5..0.5),
        o_pos: rng.random_range(0.5..1.5),
        o_neg: rng.random_range(-0.5..1.0),
        log_lambda_reg: rng.random_range(-4.0..0.0),
        log_lambda_tran: rng.random_range(-3.0..0.0),
        log_beta: rng.random_range(-0.5..0.5),
        v: (0..locations).map(|_| rng.random_range(0.1..1.0)).collect(),
    }
}

/// `max_fk` bounds `F·k` so explicit Hessians stay small.
fn draw(rng: &mut ChaCha8Rng, max_fk: usize) -> Draw {
    let ways = rng.random_range(2..=5);
    let features = rng.random_range(2..=(max_fk / ways).clamp(2, 6));
    let shots = rng.random_range(1..=3);
    let locations = rng.random_range(1..=3);
    let nq = rng.random_range(0..=6);
    let n = ways * shots;
    Draw {
        support: uniform(rng, &[n, locations, features], -1.0, 1.0),
        labels: (0..n).map(|i| i % ways).collect(),
        query: uniform(rng, &[nq, locations, features], -1.0, 1.0),
        w: uniform(rng, &[features, ways], -1.0, 1.0),
        ways,
        psi: random_psi(rng, locations),
        transductive: rng.random_bool(0.75),
        mode: if rng.random_bool(0.5) {
            TranMode::Fused
        } else {
            TranMode::PerLocation
        },
    }
}

fn with_draw<R>(
    d: &Draw,
    psi: &Psi,
    w: &Tensor<f64>,
    f: impl for<'t> FnOnce(&'t Tape<f64>, &EpisodeTensors<'t, f64>, &PsiVars<'t, f64>, Theta<'t, f64>) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let pv = PsiLeaves::new(&tape, psi, false).values(d.transductive)?;
    let et = EpisodeTensors::new(
        tape.constant(d.support.clone()),
        &d.labels,
        tape.constant(d.query.clone()),
        pv.v,
        d.ways,
        d.mode,
    )?;
    let theta = Theta {
        w: tape.constant(w.clone()),
    };
    f(&tape, &et, &pv, theta)
}

fn loss_at(d: &Draw, w: &Tensor<f64>) -> f64 {
    with_draw(d, &d.psi, w, |_, et, pv, th| Ok(base_loss(th, et, pv)?.item())).unwrap_or(f64::NAN)
}

/// Analytic `grad_base` against central differences of `base_loss`.
pub fn gradient_suite() -> Check {
    timed(1, "grad_base vs finite differences", Some(60.0), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1001);
        let draws = 64;
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let d = draw(&mut rng, 30);
            let g = with_draw(&d, &d.psi, &d.w, |_, et, pv, th| Ok(grad_base(th, et, pv)?.value()))?;
            let fd = central_difference(&d.w, 1e-5, |w| loss_at(&d, w));
            worst = worst.max(rel_error(&g, &fd));
        }
        Ok((worst < 1e-6, format!("{draws} draws, max rel. error {worst:.2e} (< 1e-6)")))
    })
}

fn meta_fixture(kind: EmbeddingKind) -> Result<(Model, Vec<Episode>)> {
    let family = generate_family(&FamilySpec::gaussian(8, 12, [4, 2, 2]), 7)?;
    let episodes = (0..2)
        .map(|i| sample_episode(&family, Split::Train, 3, 2, 2, 11, i))
        .collect::<Result<Vec<_>, _>>()?;
    let embedding = EmbeddingConfig {
        kind,
        input_dim: 12,
        features: 3,
        locations: 3,
        hidden: 4,
    };
    let mut psi = Psi::baseline(3);
    psi.l_pos = 0.9;
    psi.l_neg = -0.8;
    psi.log_a_pos = 0.2;
    psi.log_a_neg = -0.3;
    psi.o_pos = 1.1;
    psi.o_neg = 0.4;
    psi.log_lambda_reg = -1.5;
    psi.log_lambda_tran = -1.0;
    psi.log_beta = 0.3;
    psi.v = vec![0.5, 0.3, 0.2];
    let flags = LearnerFlags {
        init: InitKind::Support,
        dense: true,
        transductive: true,
        tran_mode: TranMode::Fused,
    };
    Ok((Model::new(embedding, flags, PsiMask::ALL, psi, 5)?, episodes))
}

/// Tape gradient of the meta loss through three unrolled steps against
/// central differences, for every ψ field and every embedding parameter.
pub fn meta_gradient_suite() -> Check {
    timed(2, "meta-gradient through 3 unrolled steps", Some(120.0), || {
        const ITERS: usize = 3;
        const H: f64 = 1e-6;
        let exec = Execution::Sequential;
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        for kind in [EmbeddingKind::Linear, EmbeddingKind::Mlp2] {
            let (model, episodes) = meta_fixture(kind)?;
            let grad = batch_gradient(&model, &episodes, ITERS, Grads::PsiAndEmbedding, exec)?;
            let loss = |m: &Model| meta_loss(m, &episodes, ITERS, exec).unwrap_or(f64::NAN);
            let mut record = |an: f64, fd: f64| {
                checked += 1;
                if (an - fd).abs() > 1e-10 {
                    worst = worst.max(rel_error_scalar(an, fd));
                }
            };
            for field in PsiField::ALL {
                if field == PsiField::V {
                    let fd = central_difference(&Tensor::vector(model.psi.v.clone()), H, |t| {
                        let mut m = model.clone();
                        m.psi.v = t.data().to_vec();
                        loss(&m)
                    });
                    for (an, fd) in grad.psi.v.iter().zip(fd.data()) {
                        record(*an, *fd);
                    }
                    continue;
                }
                let at = |delta: f64| {
                    let mut m = model.clone();
                    *m.psi.scalar_mut(field) += delta;
                    loss(&m)
                };
                record(grad.psi.scalar(field), (at(H) - at(-H)) / (2.0 * H));
            }
            for (i, p) in model.embed_params.iter().enumerate() {
                let fd = central_difference(p, H, |t| {
                    let mut m = model.clone();
                    m.embed_params[i] = t.clone();
                    loss(&m)
                });
                let err = rel_error(&grad.embed[i], &fd);
                checked += p.len();
                worst = worst.max(err);
            }
        }
        Ok((
            worst < 1e-4,
            format!("{checked} partials (ψ and linear/mlp embeddings), max rel. error {worst:.2e} (< 1e-4)"),
        ))
    })
}

/// Baseline ψ, no transduction, 30 steps on desk episodes against the
/// normal-equation solution.
pub fn ridge_oracle() -> Check {
    timed(3, "ridge oracle after 30 steps", None, || {
        let family = desk::family()?;
        let embedding = desk::embedding();
        let params = embedding.init_params(derive_seed(desk::SEED, "embedding-init"))?;
        let psi = Psi::baseline(embedding.locations);
        let seed = derive_seed(desk::SEED, "ridge-oracle");
        let protocol = desk::eval_protocol();
        let (mut worst_loss, mut worst_w, mut worst_kappa): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let episodes = 20;
        for i in 0..episodes {
            let ep = sample_episode(&family, Split::Train, protocol.ways, protocol.shots, 1, seed, i)?;
            let tape = Tape::new();
            let pv = PsiLeaves::new(&tape, &psi, false).values(false)?;
            let ps: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
            let support = embedding.embed(&ps, tape.constant(ep.support_x.clone()))?;
            let query = embedding.embed(&ps, tape.constant(ep.query_x.clone()))?;
            let et = episode_tensors(support, &ep.support_y, query, &pv, ep.ways, LearnerFlags::default())?;
            let cfg = InnerConfig {
                iterations: 30,
                init: InitKind::Zero,
            };
            let (theta, trace) = run_inner(&et, &pv, cfg)?;
            let phi = et.phi.value();
            let (n, f, k) = (phi.rows(), phi.cols(), ep.ways);
            let phi = DMatrix::from_row_slice(n, f, phi.data());
            let t = DMatrix::from_fn(n, k, |r, c| if ep.support_y[r] == c { 1.0 } else { -1.0 });
            let lhs = phi.transpose() * &phi + DMatrix::identity(f, f) * psi.lambda_reg();
            // Iterates stay in the row space of Φ, so the relevant spectrum
            // is that of the smaller Gram matrix.
            let gram = if n <= f { &phi * phi.transpose() } else { phi.transpose() * &phi };
            let eig = gram.symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
            worst_kappa = worst_kappa.max((hi + psi.lambda_reg()) / (lo.max(0.0) + psi.lambda_reg()));
            let w_star = lhs
                .lu()
                .solve(&(phi.transpose() * &t))
                .ok_or_else(|| Error::Config("singular ridge system".into()))?;
            let l_star = (&phi * &w_star - &t).norm_squared() + psi.lambda_reg() * w_star.norm_squared();
            let l_d = *trace.losses.last().expect("30 steps");
            let w_d = DMatrix::from_row_slice(f, k, theta.w.value().data());
            worst_loss = worst_loss.max((l_d - l_star).abs() / l_star);
            worst_w = worst_w.max((w_d - &w_star).norm() / w_star.norm());
        }
        Ok((
            worst_loss < 1e-8 && worst_w < 1e-4,
            format!(
                "{episodes} desk episodes, max rel. loss gap {worst_loss:.2e} (< 1e-8), max rel. ‖W−W*‖ {worst_w:.2e} (< 1e-4), \
                 worst condition number {worst_kappa:.1}"
            ),
        ))
    })
}

/// The returned step zeroes the directional derivative on quadratic
/// instances, and an isotropic quadratic is solved in one step.
pub fn step_optimality() -> Check {
    timed(4, "exact step length", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4004);
        let draws = 100;
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let mut d = draw(&mut rng, 30);
            d.transductive = false;
            let ratio = with_draw(&d, &d.psi, &d.w, |_, et, pv, th| {
                let lin = Linearization::new(th, et, pv)?;
                let g = lin.gradient()?;
                let alpha = step_length(g, lin.quad_lsq(g)?, lin.quad_tran(g)?, None)?;
                let next = Theta {
                    w: th.w.sub(g.mul(alpha)?)?,
                };
                let g_next = grad_base(next, et, pv)?.value();
                let g = g.value();
                let slope: f64 = g_next.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                Ok(slope.abs() / g.norm_sq())
            })?;
            worst = worst.max(ratio);
        }
        // Φ = 0 and λ_reg = 1 leave L = const + ‖W‖².
        let mut iso_worst: f64 = 0.0;
        for _ in 0..20 {
            let mut d = draw(&mut rng, 30);
            d.transductive = false;
            d.support = Tensor::zeros(d.support.shape());
            d.psi.log_lambda_reg = 0.0;
            let next = with_draw(&d, &d.psi, &d.w, |_, et, pv, th| {
                let lin = Linearization::new(th, et, pv)?;
                let g = lin.gradient()?;
                let alpha = step_length(g, lin.quad_lsq(g)?, lin.quad_tran(g)?, None)?;
                Ok(th.w.sub(g.mul(alpha)?)?.value())
            })?;
            iso_worst = iso_worst.max(next.norm_sq().sqrt() / d.w.norm_sq().sqrt());
        }
        Ok((
            worst < 1e-8 && iso_worst < 1e-12,
            format!(
                "{draws} quadratic instances, max |φ′(α*)|/‖G‖² {worst:.2e} (< 1e-8); isotropic one-step residual {iso_worst:.2e}"
            ),
        ))
    })
}

fn shannon(s: &[f64]) -> f64 {
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

/// Entropy value, uniform-logit and stationarity identities, and the sign
/// structure of `Q_tran`.
pub fn entropy_identities() -> Check {
    timed(5, "entropy identities", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5005);
        let draws = 100;
        let tape = Tape::<f64>::new();
        let (mut value_err, mut uniform_err, mut stationary): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let k = rng.random_range(1..=8);
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
            let h = entropy_loss(tape.constant(Tensor::vector(s.clone())))?.item();
            value_err = value_err.max((h - shannon(&s)).abs());

            let c = rng.random_range(-5.0..5.0);
            let leaf = tape.leaf(Tensor::full(&[k], c));
            let h = entropy_loss(leaf)?;
            uniform_err = uniform_err.max((h.item() - (k as f64).ln()).abs());
            let g = tape.backward(h)?.wrt(leaf);
            stationary = stationary.max(g.data().iter().fold(0.0, |m, x| m.max(x.abs())));
        }

        // At W = 0 every query row is uniform; the transductive part of G
        // must vanish bit for bit.
        let mut exact_zero = 0usize;
        let mut q_negative = 0usize;
        let mut q_positive = 0usize;
        let mut q_const: f64 = 0.0;
        for _ in 0..draws {
            let mut d = draw(&mut rng, 30);
            d.transductive = true;
            if d.query.shape()[0] == 0 {
                d.query = uniform(&mut rng, &[3, d.support.shape()[1], d.support.shape()[2]], -1.0, 1.0);
            }
            let zero = Tensor::zeros(d.w.shape());
            let with = with_draw(&d, &d.psi, &zero, |_, et, pv, th| Ok(grad_base(th, et, pv)?.value()))?;
            let ind = Draw {
                transductive: false,
                support: d.support.clone(),
                labels: d.labels.clone(),
                query: d.query.clone(),
                w: d.w.clone(),
                psi: d.psi.clone(),
                ..d
            };
            let without = with_draw(&ind, &d.psi, &zero, |_, et, pv, th| Ok(grad_base(th, et, pv)?.value()))?;
            exact_zero += usize::from(with == without);

            let (f, k) = (d.w.rows(), d.w.cols());
            let g = uniform(&mut rng, &[f, k], -2.0, 2.0);
            let q = with_draw(&d, &d.psi, &d.w, |tape, et, pv, th| Ok(quad_tran(tape.constant(g.clone()), th, et, pv)?.item()))?;
            if q < 0.0 {
                q_negative += 1;
            }
            if q > 0.0 {
                q_positive += 1;
            }
            // identical columns make u constant across classes for every query
            let col: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gc = Tensor::new(vec![f, k], (0..f * k).map(|i| col[i / k]).collect()).expect("sized");
            let qc = with_draw(&d, &d.psi, &d.w, |tape, et, pv, th| Ok(quad_tran(tape.constant(gc.clone()), th, et, pv)?.item()))?;
            q_const = q_const.max(qc.abs() / gc.norm_sq().max(1.0));
        }
        let passed = value_err < 1e-10
            && uniform_err < 1e-10
            && stationary < 1e-12
            && exact_zero == draws
            && q_negative == 0
            && q_positive == draws
            && q_const < 1e-12;
        Ok((
            passed,
            format!(
                "{draws} draws each: |H − (−Σp log p)| ≤ {value_err:.1e}, |H(uniform) − log k| ≤ {uniform_err:.1e}, \
                 ‖∇H(uniform)‖∞ ≤ {stationary:.1e}, transductive G exactly 0 at W=0 in {exact_zero}/{draws}, \
                 Q_tran > 0 in {q_positive}/{draws} and < 0 in {q_negative}, constant-u Q_tran ≤ {q_const:.1e}"
            ),
        ))
    })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `H_lsq = (2/L)JᵀJ + 2λ_reg I` and `H_tran = w Σ_j K_jᵀ(diag p_j − p_j p_jᵀ)K_j`
/// assembled entry by entry over `vec(W)` (row-major `[F, k]`).
fn explicit_hessians(d: &Draw) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = d.support.shape();
    let (n, l, f) = (s[0], s[1], s[2]);
    let k = d.ways;
    let dim = f * k;
    let psi = &d.psi;
    let mut j = DMatrix::zeros(n * l * k, dim);
    for i in 0..n {
        for loc in 0..l {
            let row = i * l + loc;
            for c in 0..k {
                let a = if d.labels[i] == c { psi.a_pos() } else { psi.a_neg() };
                for ff in 0..f {
                    j[(row * k + c, ff * k + c)] = a * d.support.data()[row * f + ff];
                }
            }
        }
    }
    let h_lsq = j.transpose() * &j * (2.0 / l as f64) + DMatrix::identity(dim, dim) * (2.0 * psi.lambda_reg());

    let nq = d.query.shape()[0];
    let (rows, weight): (Vec<Vec<f64>>, f64) = match d.mode {
        TranMode::Fused => (
            (0..nq)
                .map(|q| {
                    (0..f)
                        .map(|ff| (0..l).map(|loc| psi.v[loc] * d.query.data()[(q * l + loc) * f + ff]).sum())
                        .collect()
                })
                .collect(),
            1.0,
        ),
        TranMode::PerLocation => (
            (0..nq * l).map(|r| d.query.data()[r * f..(r + 1) * f].to_vec()).collect(),
            1.0 / l as f64,
        ),
    };
    let beta = psi.beta();
    let mut h_tran = DMatrix::zeros(dim, dim);
    for x in &rows {
        let logits: Vec<f64> = (0..k)
            .map(|c| beta * (0..f).map(|ff| x[ff] * d.w.data()[ff * k + c]).sum::<f64>())
            .collect();
        let p = DVector::from_vec(softmax(&logits));
        let curvature = DMatrix::from_diagonal(&p) - &p * p.transpose();
        let mut kj = DMatrix::zeros(k, dim);
        for c in 0..k {
            for ff in 0..f {
                kj[(c, ff * k + c)] = beta * x[ff];
            }
        }
        h_tran += kj.transpose() * curvature * kj * weight;
    }
    (h_lsq, h_tran)
}

/// `quad_lsq` and `quad_tran` against `gᵀHg` with explicitly assembled
/// Gauss-Newton and softmax-curvature matrices.
pub fn hessian_oracles() -> Check {
    timed(6, "Hessian oracles", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6006);
        let draws = 100;
        let mut worst: f64 = 0.0;
        let mut max_fk = 0;
        for _ in 0..draws {
            let mut d = draw(&mut rng, 40);
            d.transductive = true;
            if d.query.shape()[0] == 0 {
                d.query = uniform(&mut rng, &[2, d.support.shape()[1], d.support.shape()[2]], -1.0, 1.0);
            }
            let (f, k) = (d.w.rows(), d.w.cols());
            max_fk = max_fk.max(f * k);
            let g = uniform(&mut rng, &[f, k], -1.0, 1.0);
            let (ql, qt) = with_draw(&d, &d.psi, &d.w, |tape, et, pv, th| {
                let gv = tape.constant(g.clone());
                Ok((quad_lsq(gv, th, et, pv)?.item(), quad_tran(gv, th, et, pv)?.item()))
            })?;
            let (h_lsq, h_tran) = explicit_hessians(&d);
            let gv = DVector::from_row_slice(g.data());
            let ol = (gv.transpose() * &h_lsq * &gv)[(0, 0)];
            let ot = (gv.transpose() * &h_tran * &gv)[(0, 0)];
            worst = worst.max((ql - ol).abs() / ol.abs().max(1.0));
            worst = worst.max((qt - ot).abs() / ot.abs().max(1.0));
        }
        Ok((
            worst < 1e-9 && max_fk <= 40,
            format!("{draws} instances (F·k ≤ {max_fk}), max deviation {worst:.2e} (< 1e-9)"),
        ))
    })
}

fn desk_trace(episode: &Episode, psi: &Psi, flags: LearnerFlags, params: &[Tensor<f64>]) -> Result<InnerTrace> {
    let embedding = desk::embedding();
    let tape = Tape::new();
    let pv = PsiLeaves::new(&tape, psi, false).values(flags.transductive)?;
    let ps: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let support = embedding.embed(&ps, tape.constant(episode.support_x.clone()))?;
    let query = embedding.embed(&ps, tape.constant(episode.query_x.clone()))?;
    let et = episode_tensors(support, &episode.support_y, query, &pv, episode.ways, flags)?;
    let cfg = InnerConfig {
        iterations: 15,
        init: flags.init,
    };
    Ok(run_inner(&et, &pv, cfg)?.1)
}

/// Relative slack for "non-increasing": one part in 10¹² absorbs rounding
/// once the loop has converged.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// Base-loss traces over 500 desk episodes with random ψ and structure.
pub fn monotone_inner_loop(exec: Execution) -> Check {
    timed(7, "monotone inner loop", None, || {
        const EPISODES: usize = 500;
        let family = desk::family()?;
        let params = desk::embedding().init_params(derive_seed(desk::SEED, "embedding-init"))?;
        let seed = derive_seed(desk::SEED, "monotone");
        let outcomes = map_indexed(exec, EPISODES, |i| -> Result<(bool, bool)> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("psi-{i}")));
            let shots = if i % 2 == 0 { 1 } else { 5 };
            let ep = sample_episode(&family, Split::Train, 5, shots, 15, seed, i as u64)?;
            let psi = random_psi(&mut rng, desk::LOCATIONS);
            let flags = LearnerFlags {
                init: if rng.random_bool(0.5) { InitKind::Support } else { InitKind::Zero },
                dense: rng.random_bool(0.5),
                transductive: false,
                tran_mode: TranMode::Fused,
            };
            let inductive = desk_trace(&ep, &psi, flags, &params)?.is_non_increasing(MONOTONE_SLACK);
            let tran_flags = LearnerFlags {
                transductive: true,
                ..flags
            };
            let transductive = desk_trace(&ep, &psi, tran_flags, &params)?.is_non_increasing(MONOTONE_SLACK);
            Ok((inductive, transductive))
        });
        let (mut ind, mut tran) = (0usize, 0usize);
        for o in outcomes {
            let (a, b) = o?;
            ind += usize::from(a);
            tran += usize::from(b);
        }
        Ok((
            ind == EPISODES && tran * 100 >= EPISODES * 95,
            format!(
                "λ_tran = 0: {ind}/{EPISODES} non-increasing (need all); λ_tran > 0: {tran}/{EPISODES} (need ≥ 95%)"
            ),
        ))
    })
}

/// Closed-form ridge classifier on the pooled embedding of `model`: solves
/// `(ΦᵀΦ + λ_reg I)W = ΦᵀT` per episode and takes the argmax of the query
/// scores. Only meaningful for models on the Baseline path.
pub fn ridge_classifier_accuracy(
    model: &Model,
    family: &TaskFamily,
    split: Split,
    protocol: EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    let flags = model.flags;
    if flags.dense || flags.transductive || flags.init != InitKind::Zero {
        return Err(Error::Config("ridge oracle needs a pooled, inductive, zero-initialized model".into()));
    }
    protocol.validate()?;
    let lambda = model.psi.lambda_reg();
    let accs = map_indexed(exec, protocol.episodes, |i| -> Result<f64> {
        let ep = sample_episode(family, split, protocol.ways, protocol.shots, protocol.query_per_class, seed, i as u64)?;
        let pooled = |x: &Tensor<f64>| -> Result<DMatrix<f64>> {
            let tape = Tape::new();
            let ps: Vec<_> = model.embed_params.iter().map(|p| tape.constant(p.clone())).collect();
            let e = model.embedding.embed(&ps, tape.constant(x.clone()))?.value();
            let (n, l, f) = (e.shape()[0], e.shape()[1], e.shape()[2]);
            Ok(DMatrix::from_fn(n, f, |r, c| {
                (0..l).map(|loc| e.data()[(r * l + loc) * f + c]).sum::<f64>() / l as f64
            }))
        };
        let phi = pooled(&ep.support_x)?;
        let psi_q = pooled(&ep.query_x)?;
        let k = ep.ways;
        let t = DMatrix::from_fn(phi.nrows(), k, |r, c| if ep.support_y[r] == c { 1.0 } else { -1.0 });
        let f = phi.ncols();
        let w = (phi.transpose() * &phi + DMatrix::identity(f, f) * lambda)
            .cholesky()
            .ok_or_else(|| Error::Config("ridge system is not positive definite".into()))?
            .solve(&(phi.transpose() * t));
        let scores = psi_q * w;
        let correct = (0..scores.nrows())
            .filter(|&j| {
                let row = scores.row(j);
                let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == ep.query_y[j]
            })
            .count();
        Ok(correct as f64 / scores.nrows() as f64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies("ridge-oracle", accs))
}
