//! Adversarial-example attacks sharing one result contract.
//!
//! Every method returns an [`AttackResult`] whose `x_adv` lies in `[0,1]`
//! exactly and whose `r` satisfies `x_adv = clamp(x + r, 0, 1)`. Methods are
//! deterministic given (model, image, config); wall-clock `seconds` is the
//! only field that varies between identical runs.

use std::time::Instant;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::nn::{adam_step, lbfgs_minimize, mse_onehot_loss, softmax_cross_entropy, AdamParams, AdamState};
use crate::tensor::{Tape, Tensor};

/// Outcome of one attack on one image.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// The adversarial image, always in `[0,1]`.
    pub x_adv: Tensor,
    /// Perturbation `x_adv - x` (elementwise, after the box clamp).
    pub r: Tensor,
    /// Targeted methods: the model now predicts the requested class
    /// (for the margin-based method, with the requested confidence).
    /// Untargeted methods: the prediction moved off the supplied label.
    pub success: bool,
    /// Model prediction on `x_adv`.
    pub predicted: usize,
    /// Requested class for targeted methods, `None` for untargeted ones.
    pub target: Option<usize>,
    /// Method-specific work count (gradient steps, inner iterations, ...).
    pub iterations: usize,
    /// Euclidean norm of `r`, accumulated in f64.
    pub l2: f64,
    /// Max-abs norm of `r`.
    pub linf: f64,
    /// Wall-clock time for the attack. Excluded from serialized reports so
    /// artifacts stay byte-deterministic.
    pub seconds: f64,
    /// Machine-readable note for non-error early exits (for example
    /// "zero-gradient" or "no-admissible-pair").
    pub reason: Option<&'static str>,
}

/// Direction of the gradient-ascent objective for the sign-step methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    /// Targeted: push the softmax output toward this class.
    Toward(usize),
    /// Untargeted: push the softmax output away from this (true) label.
    AwayFrom(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgsmMode {
    Single,
    Iterative,
    Momentum,
}

/// Configuration for the sign-step family. `alpha` is derived as
/// `eps / steps` for the multi-step modes.
#[derive(Debug, Clone, Copy)]
pub struct FgsmConfig {
    pub eps: f32,
    pub steps: usize,
    pub momentum: f32,
    pub mode: FgsmMode,
}

impl Default for FgsmConfig {
    fn default() -> FgsmConfig {
        FgsmConfig { eps: 0.1, steps: 10, momentum: 1.0, mode: FgsmMode::Single }
    }
}

impl FgsmConfig {
    pub fn single(eps: f32) -> FgsmConfig {
        FgsmConfig { eps, mode: FgsmMode::Single, ..FgsmConfig::default() }
    }

    pub fn iterative(eps: f32, steps: usize) -> FgsmConfig {
        FgsmConfig { eps, steps, mode: FgsmMode::Iterative, ..FgsmConfig::default() }
    }

    pub fn momentum(eps: f32, steps: usize, momentum: f32) -> FgsmConfig {
        FgsmConfig { eps, steps, momentum, mode: FgsmMode::Momentum }
    }

    /// Per-step magnitude: the full budget for single-step mode, `eps/steps`
    /// otherwise.
    pub fn alpha(&self) -> f32 {
        match self.mode {
            FgsmMode::Single => self.eps,
            _ => self.eps / self.steps as f32,
        }
    }
}

/// Configuration for the margin-based tanh-space attack.
#[derive(Debug, Clone, Copy)]
pub struct CwConfig {
    /// Required logit margin of the target class over the runner-up.
    pub kappa: f32,
    /// Outer binary-search steps over the trade-off weight `d`.
    pub binary_steps: usize,
    pub d_lo: f64,
    pub d_hi: f64,
    /// Adam iterations per binary-search step.
    pub inner_iters: usize,
    pub lr: f32,
}

impl Default for CwConfig {
    fn default() -> CwConfig {
        CwConfig { kappa: 0.0, binary_steps: 9, d_lo: 1e-3, d_hi: 1e3, inner_iters: 200, lr: 0.05 }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

pub(crate) enum SuccessRule {
    /// Prediction must equal the class.
    Targeted(usize),
    /// Prediction must differ from the supplied label.
    Untargeted(usize),
    /// Target logit must beat every other logit by at least `kappa`.
    LogitMargin { class: usize, kappa: f32 },
}

pub(crate) fn require_trained(op: &'static str, f: &ClassifierModel) -> Result<()> {
    if f.is_trained() {
        Ok(())
    } else {
        Err(Error::contract(op, "classifier has not been trained"))
    }
}

pub(crate) fn require_class(op: &'static str, f: &ClassifierModel, class: usize) -> Result<()> {
    if class < f.class_count() {
        Ok(())
    } else {
        Err(Error::param(op, format!("class {class} out of range 0..{}", f.class_count())))
    }
}

fn sign32(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign64(v: f64) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_tensors(op: &'static str, a: &Tensor, b: &[f32]) -> Result<Tensor> {
    if a.data().len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} elements", a.data().len(), b.len())));
    }
    Tensor::from_vec(a.shape().to_vec(), a.data().iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Clamp the proposed image into the box, derive `r`, classify, and fill the
/// shared result fields.
pub(crate) fn assemble(
    f: &ClassifierModel,
    x: &Tensor,
    proposed: &Tensor,
    rule: SuccessRule,
    iterations: usize,
    reason: Option<&'static str>,
    started: Instant,
) -> Result<AttackResult> {
    let x_adv = Tensor::from_vec(
        proposed.shape().to_vec(),
        proposed.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;
    let r = Tensor::from_vec(
        x.shape().to_vec(),
        x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect(),
    )?;
    let (predicted, _, logits) = f.classify(&x_adv)?;
    let (success, target) = match rule {
        SuccessRule::Targeted(c) => (predicted == c, Some(c)),
        SuccessRule::Untargeted(label) => (predicted != label, None),
        SuccessRule::LogitMargin { class, kappa } => {
            let z = logits.data();
            let runner_up = z
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != class)
                .map(|(_, &v)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            ((z[class] - runner_up) >= kappa, Some(class))
        }
    };
    let l2 = r.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    let linf = r.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    Ok(AttackResult {
        x_adv,
        r,
        success,
        predicted,
        target,
        iterations,
        l2,
        linf,
        seconds: started.elapsed().as_secs_f64(),
        reason,
    })
}

/// Value and image-gradient of the ascent objective used by the sign-step
/// family: MSE between the softmax output and a one-hot vector, negated for
/// the targeted direction so that ascent always moves where the caller wants.
fn objective_gradient(f: &ClassifierModel, at: &Tensor, target: LossTarget) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(at.clone().requires_grad(true));
    let probs = f.logits_on_tape(&xv)?.softmax()?;
    let j = match target {
        LossTarget::Toward(c) => mse_onehot_loss(&probs, c, true)?,
        LossTarget::AwayFrom(y) => mse_onehot_loss(&probs, y, false)?,
    };
    let value = j.scalar()? as f64;
    j.backward()?;
    let grad = xv
        .grad()
        .ok_or_else(|| Error::state("objective_gradient", "input gradient missing after backward"))?;
    Ok((value, grad))
}

/// Smallest midpoint in `[lo, hi]` accepted by `succeeds`, probing geometric
/// midpoints for `steps` rounds. Assumes the predicate is monotone in `d`;
/// returns `None` when every probed point fails.
pub(crate) fn bisect_smallest(
    mut lo: f64,
    mut hi: f64,
    steps: usize,
    mut succeeds: impl FnMut(f64) -> Result<bool>,
) -> Result<Option<f64>> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::param("bisect_smallest", format!("invalid range [{lo}, {hi}]")));
    }
    let mut found = None;
    for _ in 0..steps {
        let mid = (lo * hi).sqrt();
        if succeeds(mid)? {
            found = Some(mid);
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(found)
}

// ---------------------------------------------------------------------------
// Sign-step family
// ---------------------------------------------------------------------------

/// Shared core for the three sign-step modes; dispatches on `cfg.mode`.
pub fn fgsm_family(
    f: &ClassifierModel,
    x: &Tensor,
    target: LossTarget,
    cfg: &FgsmConfig,
) -> Result<AttackResult> {
    require_trained("fgsm", f)?;
    if !(cfg.eps > 0.0) {
        return Err(Error::param("fgsm", format!("eps {} must be > 0", cfg.eps)));
    }
    if cfg.steps == 0 {
        return Err(Error::param("fgsm", "steps must be >= 1"));
    }
    if !(cfg.momentum >= 0.0) {
        return Err(Error::param("fgsm", format!("momentum {} must be >= 0", cfg.momentum)));
    }
    let class = match target {
        LossTarget::Toward(c) | LossTarget::AwayFrom(c) => c,
    };
    require_class("fgsm", f, class)?;

    let started = Instant::now();
    let steps = match cfg.mode {
        FgsmMode::Single => 1,
        _ => cfg.steps,
    };
    let alpha = cfg.alpha();
    let n = x.data().len();
    let mut r = vec![0.0f32; n];
    let mut velocity = vec![0.0f64; n];
    for _ in 0..steps {
        let shifted = add_tensors("fgsm", x, &r)?;
        let (_, grad) = objective_gradient(f, &shifted, target)?;
        let g = grad.data();
        match cfg.mode {
            FgsmMode::Single | FgsmMode::Iterative => {
                for (ri, &gi) in r.iter_mut().zip(g) {
                    *ri += alpha * sign32(gi);
                }
            }
            FgsmMode::Momentum => {
                let l1: f64 = g.iter().map(|&v| (v as f64).abs()).sum();
                if l1 > 0.0 {
                    for (vi, &gi) in velocity.iter_mut().zip(g) {
                        *vi = cfg.momentum as f64 * *vi + gi as f64 / l1;
                    }
                }
                for (ri, &vi) in r.iter_mut().zip(&velocity) {
                    *ri += alpha * sign64(vi);
                }
            }
        }
    }
    let proposed = add_tensors("fgsm", x, &r)?;
    let reason = if r.iter().all(|&v| v == 0.0) { Some("zero-gradient") } else { None };
    let rule = match target {
        LossTarget::Toward(c) => SuccessRule::Targeted(c),
        LossTarget::AwayFrom(y) => SuccessRule::Untargeted(y),
    };
    assemble(f, x, &proposed, rule, steps, reason, started)
}

fn expect_mode(op: &'static str, cfg: &FgsmConfig, mode: FgsmMode) -> Result<()> {
    if cfg.mode == mode {
        Ok(())
    } else {
        Err(Error::param(op, format!("config mode {:?} does not match this entry point", cfg.mode)))
    }
}

/// One full-budget sign step: `r = eps * sign(grad)`.
pub fn fgsm(f: &ClassifierModel, x: &Tensor, y: LossTarget, cfg: &FgsmConfig) -> Result<AttackResult> {
    expect_mode("fgsm", cfg, FgsmMode::Single)?;
    fgsm_family(f, x, y, cfg)
}

/// `steps` sign steps of size `eps/steps`, re-evaluating the gradient at the
/// shifted image each step; the accumulated `r` telescopes to at most `eps`
/// in max-norm (up to rounding).
pub fn fgsm_iterative(
    f: &ClassifierModel,
    x: &Tensor,
    y: LossTarget,
    cfg: &FgsmConfig,
) -> Result<AttackResult> {
    expect_mode("fgsm_iterative", cfg, FgsmMode::Iterative)?;
    fgsm_family(f, x, y, cfg)
}

/// Iterative sign steps over an L1-normalized gradient accumulator:
/// `g <- momentum * g + grad/|grad|_1`, stepping `alpha * sign(g)`.
/// A zero-gradient step leaves the accumulator untouched.
pub fn momentum_iterative(
    f: &ClassifierModel,
    x: &Tensor,
    y: LossTarget,
    cfg: &FgsmConfig,
) -> Result<AttackResult> {
    expect_mode("momentum_iterative", cfg, FgsmMode::Momentum)?;
    fgsm_family(f, x, y, cfg)
}

/// Smallest effective sign-step budget: double from 1/255 until the attack
/// succeeds (capped at 0.1), then 8 bisection steps between the last failing
/// and first succeeding budget. Returns the budget and the result produced
/// with it; if even the cap fails, returns the failing result at the cap.
pub fn smallest_eps_attack(
    f: &ClassifierModel,
    x: &Tensor,
    target: LossTarget,
    base: &FgsmConfig,
) -> Result<(f32, AttackResult)> {
    const EPS_FLOOR: f32 = 1.0 / 255.0;
    const EPS_CAP: f32 = 0.1;
    const REFINE_STEPS: usize = 8;
    let run = |eps: f32| -> Result<AttackResult> {
        let cfg = FgsmConfig { eps, ..*base };
        fgsm_family(f, x, target, &cfg)
    };

    let mut lo = EPS_FLOOR;
    let first = run(lo)?;
    if first.success {
        return Ok((lo, first));
    }
    let mut hi = lo;
    let mut at_hi;
    loop {
        hi = (hi * 2.0).min(EPS_CAP);
        at_hi = run(hi)?;
        if at_hi.success {
            break;
        }
        if hi >= EPS_CAP {
            return Ok((EPS_CAP, at_hi));
        }
        lo = hi;
    }
    let mut best = (hi, at_hi);
    for _ in 0..REFINE_STEPS {
        let mid = 0.5 * (lo + hi);
        let res = run(mid)?;
        if res.success {
            hi = mid;
            best = (mid, res);
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Penalty-weighted quasi-Newton attack
// ---------------------------------------------------------------------------

/// Targeted minimum-norm attack: for a trade-off weight `d`, minimize
/// `|r|_2 + d * xent(f(clamp(x+r)), c)` with the quasi-Newton solver, and
/// search the smallest `d` in `[1e-3, 1e3]` (12 geometric bisection steps)
/// whose solution actually flips the prediction to `c`.
pub fn lbfgs_attack(f: &ClassifierModel, x: &Tensor, c: usize) -> Result<AttackResult> {
    require_trained("lbfgs_attack", f)?;
    require_class("lbfgs_attack", f, c)?;
    let started = Instant::now();
    let (pred, _, _) = f.classify(x)?;
    if pred == c {
        return Err(Error::param(
            "lbfgs_attack",
            format!("target class {c} is already the model's prediction"),
        ));
    }

    let zero = Tensor::zeros(x.shape().to_vec());
    let solve = |d: f64| -> Result<(bool, Tensor, usize)> {
        let objective = |r: &Tensor| -> Result<(f64, Tensor)> {
            let tape = Tape::new();
            let rv = tape.leaf(r.clone().requires_grad(true));
            let xv = tape.constant(x.clone());
            let adv = xv.add(&rv)?.clamp01();
            let logits = f.logits_on_tape(&adv)?;
            let ce = softmax_cross_entropy(&logits, c)?;
            let total = rv.l2_norm().add(&ce.mul_scalar(d as f32))?;
            let value = total.scalar()? as f64;
            total.backward()?;
            let grad = rv
                .grad()
                .ok_or_else(|| Error::state("lbfgs_attack", "missing perturbation gradient"))?;
            Ok((value, grad))
        };
        let sol = lbfgs_minimize(objective, &zero, 10, 60, 1e-6)?;
        let candidate = add_tensors("lbfgs_attack", x, sol.x.data())?;
        let clamped = Tensor::from_vec(
            candidate.shape().to_vec(),
            candidate.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )?;
        let (hit, _, _) = f.classify(&clamped)?;
        Ok((hit == c, sol.x, sol.iterations))
    };

    let mut total_inner = 0usize;
    let mut best: Option<Tensor> = None;
    let mut fallback: Option<Tensor> = None;
    bisect_smallest(1e-3, 1e3, 12, |d| {
        let (hit, r, iters) = solve(d)?;
        total_inner += iters;
        if hit {
            best = Some(r);
        } else if best.is_none() {
            fallback = Some(r);
        }
        Ok(hit)
    })?;

    let (r, reason) = match best {
        Some(r) => (r, None),
        None => (
            fallback.ok_or_else(|| Error::state("lbfgs_attack", "no solve was attempted"))?,
            Some("no-feasible-weight"),
        ),
    };
    let proposed = add_tensors("lbfgs_attack", x, r.data())?;
    assemble(f, x, &proposed, SuccessRule::Targeted(c), total_inner, reason, started)
}

// ---------------------------------------------------------------------------
// Margin-based tanh-space attack
// ---------------------------------------------------------------------------

/// Targeted attack in tanh space: optimize `w` with Adam so that
/// `h(w) = (tanh(w)+1)/2` stays close to `x` while the target logit beats the
/// runner-up by `kappa`; binary-search the penalty weight `d` (geometric
/// midpoints starting at 1) for the smallest feasible value.
pub fn cw_attack(f: &ClassifierModel, x: &Tensor, c: usize, cfg: &CwConfig) -> Result<AttackResult> {
    require_trained("cw_attack", f)?;
    require_class("cw_attack", f, c)?;
    if !(cfg.kappa >= 0.0) {
        return Err(Error::param("cw_attack", format!("kappa {} must be >= 0", cfg.kappa)));
    }
    if cfg.binary_steps == 0 || cfg.inner_iters == 0 {
        return Err(Error::param("cw_attack", "binary_steps and inner_iters must be >= 1"));
    }
    if !(cfg.d_lo > 0.0 && cfg.d_hi > cfg.d_lo) {
        return Err(Error::param("cw_attack", format!("invalid d range [{}, {}]", cfg.d_lo, cfg.d_hi)));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::param("cw_attack", format!("lr {} must be > 0", cfg.lr)));
    }
    let started = Instant::now();
    let (pred, _, _) = f.classify(x)?;
    if pred == c {
        return Err(Error::param(
            "cw_attack",
            format!("target class {c} is already the model's prediction"),
        ));
    }

    const SQUEEZE: f32 = 1e-6;
    let w0 = Tensor::from_vec(
        x.shape().to_vec(),
        x.data().iter().map(|&v| (2.0 * v.clamp(SQUEEZE, 1.0 - SQUEEZE) - 1.0).atanh()).collect(),
    )?;
    let classes = f.class_count();

    // Margin of the target class over the runner-up, from raw logits.
    let margin_of = |z: &[f32]| -> f32 {
        let runner_up = z
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c)
            .map(|(_, &v)| v)
            .fold(f32::NEG_INFINITY, f32::max);
        z[c] - runner_up
    };

    // One Adam run at fixed d; returns the closest iterate that met the
    // margin, if any.
    let solve = |d: f64| -> Result<Option<Tensor>> {
        let mut w = w0.clone();
        let mut state = AdamState::new();
        let opts = AdamParams { lr: cfg.lr, ..AdamParams::default() };
        let mut best: Option<(f64, Tensor)> = None;
        let mut consider = |recon: f64, margin: f32, image: &Tensor| {
            if margin >= cfg.kappa && best.as_ref().is_none_or(|(b, _)| recon < *b) {
                best = Some((recon, image.clone()));
            }
        };
        for _ in 0..cfg.inner_iters {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone().requires_grad(true));
            let adv = wv.tanh().add_scalar(1.0).mul_scalar(0.5);
            let xv = tape.constant(x.clone());
            let diff = adv.sub(&xv)?;
            let recon = diff.mul(&diff)?.sum();
            let logits = f.logits_on_tape(&adv)?.reshape(vec![classes])?;
            let z = logits.value();
            consider(recon.scalar()? as f64, margin_of(z.data()), &adv.value());

            // Subgradient of max(runner_up - z_c, -kappa): active only while
            // the margin is still short of kappa.
            let (j_star, _) = z
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != c)
                .fold((usize::MAX, f32::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                });
            let gap = z.data()[j_star] - z.data()[c];
            let loss = if gap > -cfg.kappa {
                let adv_term = logits.index(j_star)?.sub(&logits.index(c)?)?.mul_scalar(d as f32);
                recon.add(&adv_term)?
            } else {
                recon
            };
            loss.backward()?;
            let grad = wv
                .grad()
                .ok_or_else(|| Error::state("cw_attack", "missing tanh-space gradient"))?;
            adam_step(std::slice::from_mut(&mut w), &[grad], &mut state, &opts)?;
        }
        // The final iterate is also a candidate.
        let image = Tensor::from_vec(
            w.shape().to_vec(),
            w.data().iter().map(|&v| 0.5 * (v.tanh() + 1.0)).collect(),
        )?;
        let z = f.logits_batch(&image)?;
        let recon: f64 = image
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) as f64 * (a - b) as f64)
            .sum();
        consider(recon, margin_of(z.data()), &image);
        Ok(best.map(|(_, img)| img))
    };

    let mut iterations = 0usize;
    let mut best: Option<Tensor> = None;
    let mut fallback: Option<Tensor> = None;
    bisect_smallest(cfg.d_lo, cfg.d_hi, cfg.binary_steps, |d| {
        iterations += cfg.inner_iters;
        match solve(d)? {
            Some(img) => {
                best = Some(img);
                Ok(true)
            }
            None => {
                if best.is_none() {
                    fallback = Some(solve_final_image(&w0));
                }
                Ok(false)
            }
        }
    })?;

    let (proposed, reason) = match best {
        Some(img) => (img, None),
        None => (
            fallback.ok_or_else(|| Error::state("cw_attack", "no solve was attempted"))?,
            Some("no-feasible-weight"),
        ),
    };
    assemble(
        f,
        x,
        &proposed,
        SuccessRule::LogitMargin { class: c, kappa: cfg.kappa },
        iterations,
        reason,
        started,
    )
}

/// Image corresponding to a tanh-space point (used for failure reporting).
fn solve_final_image(w: &Tensor) -> Tensor {
    Tensor::from_vec(
        w.shape().to_vec(),
        w.data().iter().map(|&v| 0.5 * (v.tanh() + 1.0)).collect(),
    )
    .expect("shape preserved")
}

// ---------------------------------------------------------------------------
// Saliency pair attack
// ---------------------------------------------------------------------------

/// Gradient of one class score (`others = false`) or of the sum of all other
/// class scores (`others = true`) with respect to the image, over softmax
/// outputs or raw logits.
fn class_gradient(
    f: &ClassifierModel,
    at: &Tensor,
    class: usize,
    use_logits: bool,
    others: bool,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(at.clone().requires_grad(true));
    let logits = f.logits_on_tape(&xv)?;
    let classes = logits.len();
    let scores = if use_logits { logits.reshape(vec![classes])? } else { logits.softmax()?.reshape(vec![classes])? };
    let objective = if others {
        scores.sum().sub(&scores.index(class)?)?
    } else {
        scores.index(class)?
    };
    objective.backward()?;
    xv.grad().ok_or_else(|| Error::state("smm_attack", "missing saliency gradient"))
}

/// Pairwise saliency attack: at each step, among the top-64 pixels by target
/// saliency, pick the admissible pair (joint target derivative positive,
/// joint other-classes derivative negative) with the largest product score,
/// step both pixels toward raising the target score, and clamp. Pixels that
/// saturate at the box bounds become ineligible.
pub fn smm_attack(
    f: &ClassifierModel,
    x: &Tensor,
    t: usize,
    step: f32,
    max_pixels: usize,
    use_logits: bool,
) -> Result<AttackResult> {
    require_trained("smm_attack", f)?;
    require_class("smm_attack", f, t)?;
    if !(step > 0.0) {
        return Err(Error::param("smm_attack", format!("step {step} must be > 0")));
    }
    const TOP_K: usize = 64;
    let started = Instant::now();
    let n = x.data().len();
    let mut cur = x.clone();
    let mut exhausted = vec![false; n];
    let mut perturbed = vec![false; n];
    let mut perturbed_count = 0usize;
    let mut iterations = 0usize;
    let mut reason = None;

    let (mut predicted, _, _) = f.classify(&cur)?;
    while predicted != t {
        if perturbed_count >= max_pixels {
            reason = Some("pixel-budget-exhausted");
            break;
        }
        let toward = class_gradient(f, &cur, t, use_logits, false)?;
        let away = class_gradient(f, &cur, t, use_logits, true)?;
        let a = toward.data();
        let b = away.data();

        let mut candidates: Vec<usize> = (0..n).filter(|&i| !exhausted[i]).collect();
        candidates.sort_by(|&i, &j| {
            a[j].abs().partial_cmp(&a[i].abs()).expect("finite saliency").then(i.cmp(&j))
        });
        candidates.truncate(TOP_K);

        let mut best: Option<(f64, usize, usize)> = None;
        for (ii, &p1) in candidates.iter().enumerate() {
            for &p2 in &candidates[ii + 1..] {
                let alpha = a[p1] as f64 + a[p2] as f64;
                let beta = b[p1] as f64 + b[p2] as f64;
                if alpha > 0.0 && beta < 0.0 {
                    let score = alpha * -beta;
                    if best.map_or(true, |(s, _, _)| score > s) {
                        best = Some((score, p1, p2));
                    }
                }
            }
        }
        let Some((_, p1, p2)) = best else {
            reason = Some("no-admissible-pair");
            break;
        };
        for p in [p1, p2] {
            let dir = if a[p] >= 0.0 { 1.0 } else { -1.0 };
            let v = (cur.data()[p] + dir * step).clamp(0.0, 1.0);
            cur.data_mut()[p] = v;
            if v == 0.0 || v == 1.0 {
                exhausted[p] = true;
            }
            if !perturbed[p] {
                perturbed[p] = true;
                perturbed_count += 1;
            }
        }
        iterations += 1;
        predicted = f.classify(&cur)?.0;
    }

    assemble(f, x, &cur, SuccessRule::Targeted(t), iterations, reason, started)
}

// ---------------------------------------------------------------------------
// Iterative linearization attack (untargeted)
// ---------------------------------------------------------------------------

/// Gradient of `score[i] - score[orig]` with respect to the image.
fn difference_gradient(
    f: &ClassifierModel,
    at: &Tensor,
    i: usize,
    orig: usize,
    use_logits: bool,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(at.clone().requires_grad(true));
    let logits = f.logits_on_tape(&xv)?;
    let classes = logits.len();
    let scores = if use_logits { logits.reshape(vec![classes])? } else { logits.softmax()?.reshape(vec![classes])? };
    let diff = scores.index(i)?.sub(&scores.index(orig)?)?;
    diff.backward()?;
    xv.grad().ok_or_else(|| Error::state("deepfool", "missing linearization gradient"))
}

/// Untargeted minimal-step attack by iterative linearization: at each
/// iterate, project onto the nearest approximated decision boundary among the
/// top-10 most probable other classes and step exactly onto it; stop once the
/// prediction leaves `label`.
pub fn deepfool(
    f: &ClassifierModel,
    x: &Tensor,
    label: usize,
    max_iters: usize,
    use_logits: bool,
) -> Result<AttackResult> {
    require_trained("deepfool", f)?;
    require_class("deepfool", f, label)?;
    if max_iters == 0 {
        return Err(Error::param("deepfool", "max_iters must be >= 1"));
    }
    const CANDIDATES: usize = 10;
    let started = Instant::now();
    let (pred, _, _) = f.classify(x)?;
    if pred != label {
        return assemble(
            f,
            x,
            x,
            SuccessRule::Untargeted(label),
            0,
            Some("already-misclassified"),
            started,
        );
    }

    let mut cur = x.clone();
    let mut iterations = 0usize;
    for _ in 0..max_iters {
        let (now, probs, logits) = f.classify(&cur)?;
        if now != label {
            break;
        }
        let scores = if use_logits { logits } else { probs.clone() };
        let mut order: Vec<usize> = (0..f.class_count()).filter(|&i| i != label).collect();
        order.sort_by(|&i, &j| {
            probs.data()[j].partial_cmp(&probs.data()[i]).expect("finite probabilities").then(i.cmp(&j))
        });
        order.truncate(CANDIDATES);

        let mut best: Option<(f64, f64, f64, Tensor)> = None; // ratio, |v|, |w|, w
        for &i in &order {
            let w = difference_gradient(f, &cur, i, label, use_logits)?;
            let v = (scores.data()[i] - scores.data()[label]) as f64;
            let norm = w.data().iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
            let ratio = if norm > 0.0 { v.abs() / norm } else { f64::INFINITY };
            if best.as_ref().is_none_or(|(r, ..)| ratio < *r) {
                best = Some((ratio, v.abs(), norm, w));
            }
        }
        let (ratio, v_abs, norm, w) =
            best.ok_or_else(|| Error::state("deepfool", "no candidate classes"))?;
        if !ratio.is_finite() {
            return Err(Error::numeric(
                "deepfool",
                "degenerate linearization: zero gradient difference for every candidate",
            ));
        }
        let scale = v_abs / (norm * norm);
        for (c, &g) in cur.data_mut().iter_mut().zip(w.data()) {
            *c = (*c as f64 + scale * g as f64) as f32;
        }
        iterations += 1;
    }

    assemble(f, x, &cur, SuccessRule::Untargeted(label), iterations, None, started)
}
