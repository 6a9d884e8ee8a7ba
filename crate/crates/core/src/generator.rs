//! Per-image generator network and its three training procedures.
//!
//! The model is a strided-convolution encoder / nearest-upsample decoder with
//! per-level 1x1-convolution skip links and a sigmoid output head. It is
//! trained from scratch against a single image (or a mini-batched image set
//! for patches) in three modes:
//!
//! * [`dip_reconstruct`] — plain reconstruction: minimize the summed squared
//!   error between the rendered image and the target.
//! * [`dip_adversarial`] — dual objective: a targeted misclassification term
//!   on a frozen classifier plus `lambda` times the reconstruction term, so
//!   the render stays close to the original while crossing the decision
//!   boundary.
//! * [`dip_patch_train`] — classification term only, rendered as a small
//!   patch composited onto training images at (optionally random) offsets.
//!
//! The network input is a fixed uniform noise map sampled once per run; the
//! optimizer reshapes only the parameters, never the noise.

use std::path::Path;
use std::time::Instant;

use crate::attacks::{assemble, require_class, require_trained, AttackResult, SuccessRule};
use crate::classifier::{read_ppm, write_ppm, ClassifierModel, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, init_params_unchecked, load_advm, mse_onehot_loss, save_advm, AdamParams,
    AdamState, LayerSpec,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Default Adam learning rate for generator fitting. Calibrated on the
/// default architecture: 0.005 already diverges on 64x64 targets (sigmoid
/// saturation pins the output), while 0.002 converges on every size tested
/// (constant 32x32: 88 dB in 500 iterations; textured 64x64: 30 dB in 300).
pub const DIP_LR: f32 = 0.002;

/// Negative-side slope of every internal activation.
const LEAKY_SLOPE: f32 = 0.1;

/// Upper bound (exclusive) of the uniform noise amplitude.
const NOISE_AMPLITUDE: f32 = 0.1;

/// Smallest supported noise side length; reflection padding up to the next
/// size multiple is only well defined when the pad never exceeds the source.
const MIN_NOISE_SIDE: usize = 16;

/// Substream labels for deriving independent RNG streams from one run seed.
const STREAM_NOISE: u64 = 0x6e6f_6973;
const STREAM_INIT: u64 = 0x696e_6974;
const STREAM_BATCH: u64 = 0x6261_7463;

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Structural hyperparameters of [`GeneratorModel`]. The default is the
/// full-size network (five levels, 128 channels); smaller settings exist so
/// tests can exercise identical code paths cheaply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Number of stride-2 encoder levels (and matching decoder levels).
    pub levels: usize,
    /// Channel width of every encoder/decoder convolution.
    pub width: usize,
    /// Channel width of each 1x1 skip projection.
    pub skip_channels: usize,
    /// Channel count of the noise input.
    pub noise_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { levels: 5, width: 128, skip_channels: 4, noise_channels: 32 }
    }
}

impl GeneratorConfig {
    /// Spatial sizes fed to the network must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 5 {
            return Err(Error::param(
                "GeneratorConfig",
                format!("levels {} outside 1..=5", self.levels),
            ));
        }
        if self.width == 0 || self.skip_channels == 0 || self.noise_channels == 0 {
            return Err(Error::param("GeneratorConfig", "channel counts must be positive"));
        }
        Ok(())
    }

    /// Flat convolution list in parameter order: `levels` encoder convs
    /// (3x3, stride 2), `levels` skip projections (1x1), `levels` decoder
    /// convs (3x3 on width+skip channels), and the 1x1 output head.
    fn layer_records(&self) -> Vec<LayerSpec> {
        let conv = |in_ch, out_ch, kernel, stride, padding| LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        };
        let mut records = Vec::with_capacity(3 * self.levels + 1);
        for i in 0..self.levels {
            let in_ch = if i == 0 { self.noise_channels } else { self.width };
            records.push(conv(in_ch, self.width, 3, 2, 1));
        }
        for i in 0..self.levels {
            let in_ch = if i == 0 { self.noise_channels } else { self.width };
            records.push(conv(in_ch, self.skip_channels, 1, 1, 0));
        }
        for _ in 0..self.levels {
            records.push(conv(self.width + self.skip_channels, self.width, 3, 1, 1));
        }
        records.push(conv(self.width, 3, 1, 1, 0));
        records
    }

    /// Recover the configuration that produced `records`, or a format error
    /// if the list does not describe a generator of this family.
    fn from_records(records: &[LayerSpec]) -> Result<GeneratorConfig> {
        let bad = || Error::format("GeneratorModel", "file does not describe a generator network");
        if records.len() < 4 || (records.len() - 1) % 3 != 0 {
            return Err(bad());
        }
        let levels = (records.len() - 1) / 3;
        let (noise_channels, width) = match records[0] {
            LayerSpec::Conv { in_ch, out_ch, .. } => (in_ch, out_ch),
            _ => return Err(bad()),
        };
        let skip_channels = match records[levels] {
            LayerSpec::Conv { out_ch, .. } => out_ch,
            _ => return Err(bad()),
        };
        let config = GeneratorConfig { levels, width, skip_channels, noise_channels };
        config.validate().map_err(|_| bad())?;
        if config.layer_records() != records {
            return Err(bad());
        }
        Ok(config)
    }
}

/// Encoder-decoder image generator. Output spatial size always equals the
/// input noise spatial size, and every output value lies strictly inside
/// (0,1) thanks to the sigmoid head.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: Vec<Tensor>,
}

impl GeneratorModel {
    /// Freshly initialized network (Glorot-uniform weights, zero biases);
    /// identical seeds give identical parameters.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<GeneratorModel> {
        config.validate()?;
        let params = init_params_unchecked(&config.layer_records(), seed)?;
        Ok(GeneratorModel { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn params(&self) -> &[Tensor] {
        &self.params
    }

    #[cfg(test)]
    pub fn params_for_test(&self) -> &[Tensor] {
        &self.params
    }

    /// Run the network over `noise` (1,C,Hp,Wp) using `params` as the on-tape
    /// parameter list (leaves for training, constants for inference).
    /// Hp and Wp must be multiples of [`GeneratorConfig::size_multiple`].
    pub fn forward(&self, noise: &Var, params: &[Var]) -> Result<Var> {
        let l = self.config.levels;
        let shape = noise.shape();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != self.config.noise_channels {
            return Err(Error::shape(
                "GeneratorModel::forward",
                format!("noise must be (1,{},H,W), got {shape:?}", self.config.noise_channels),
            ));
        }
        let m = self.config.size_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(
                "GeneratorModel::forward",
                format!("noise sides {}x{} not multiples of {m}", shape[2], shape[3]),
            ));
        }
        if params.len() != 2 * (3 * l + 1) {
            return Err(Error::contract(
                "GeneratorModel::forward",
                format!("expected {} parameter tensors, got {}", 2 * (3 * l + 1), params.len()),
            ));
        }
        let enc = |i: usize| (&params[2 * i], &params[2 * i + 1]);
        let skip = |i: usize| (&params[2 * l + 2 * i], &params[2 * l + 2 * i + 1]);
        let dec = |i: usize| (&params[4 * l + 2 * i], &params[4 * l + 2 * i + 1]);
        let head = (&params[6 * l], &params[6 * l + 1]);

        let mut skips = Vec::with_capacity(l);
        let (s0w, s0b) = skip(0);
        skips.push(noise.conv2d(s0w, s0b, 1, 0)?.leaky_relu(LEAKY_SLOPE));
        let mut h = noise.clone();
        for i in 0..l {
            let (w, b) = enc(i);
            h = h.conv2d(w, b, 2, 1)?.leaky_relu(LEAKY_SLOPE);
            if i + 1 < l {
                let (sw, sb) = skip(i + 1);
                skips.push(h.conv2d(sw, sb, 1, 0)?.leaky_relu(LEAKY_SLOPE));
            }
        }
        for s in 0..l {
            h = h.upsample_nearest(2)?;
            h = h.concat_channels(&skips[l - 1 - s])?;
            let (w, b) = dec(s);
            h = h.conv2d(w, b, 1, 1)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(h.conv2d(head.0, head.1, 1, 0)?.sigmoid())
    }

    /// Inference: render the image for an unpadded (C,H,W) noise map. The
    /// noise is reflection-padded internally and the output cropped back, so
    /// the result is (3,H,W).
    pub fn render(&self, noise: &Tensor) -> Result<Tensor> {
        let shape = noise.shape();
        if shape.len() != 3 || shape[0] != self.config.noise_channels {
            return Err(Error::shape(
                "GeneratorModel::render",
                format!("noise must be ({},H,W), got {shape:?}", self.config.noise_channels),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        let m = self.config.size_multiple();
        let padded = reflect_pad(noise, h.div_ceil(m) * m, w.div_ceil(m) * m)?;
        let noise4 =
            padded.reshape(vec![1, self.config.noise_channels, h.div_ceil(m) * m, w.div_ceil(m) * m])?;
        self.render_from_padded(&noise4, h, w)
    }

    /// No-grad forward over already-padded rank-4 noise, cropped to (3,h,w).
    fn render_from_padded(&self, noise4: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let pvars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let nv = tape.constant(noise4.clone());
        let out = self.forward(&nv, &pvars)?;
        out.crop(0, 0, h, w)?.value().reshape(vec![3, h, w])
    }

    /// Serialize the parameter list with its convolution records.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_advm(path, &self.config.layer_records(), &self.params)
    }

    /// Load a generator, validating that the stored records and tensor shapes
    /// describe exactly one configuration of this family.
    pub fn load(path: impl AsRef<Path>) -> Result<GeneratorModel> {
        let (records, params) = load_advm(path)?;
        let config = GeneratorConfig::from_records(&records)?;
        let mut at = 0;
        for rec in &records {
            if let LayerSpec::Conv { in_ch, out_ch, kernel, .. } = rec {
                let want_w = vec![*out_ch, *in_ch, *kernel, *kernel];
                if params[at].shape() != want_w.as_slice() || params[at + 1].shape() != [*out_ch] {
                    return Err(Error::format(
                        "GeneratorModel",
                        format!("parameter shape {:?} does not match {rec:?}", params[at].shape()),
                    ));
                }
                at += 2;
            }
        }
        Ok(GeneratorModel { config, params })
    }
}

// ---------------------------------------------------------------------------
// Noise input and padding
// ---------------------------------------------------------------------------

/// Fixed network input: uniform values in [0, 0.1), deterministic per seed.
/// Both sides must be at least 16 so the later reflection padding is valid.
pub fn noise_map(height: usize, width: usize, channels: usize, seed: u64) -> Result<Tensor> {
    if height < MIN_NOISE_SIDE || width < MIN_NOISE_SIDE {
        return Err(Error::param(
            "noise_map",
            format!("sides {height}x{width} below minimum {MIN_NOISE_SIDE}"),
        ));
    }
    if channels == 0 {
        return Err(Error::param("noise_map", "channels must be positive"));
    }
    let mut rng = Rng::new(seed);
    let data: Vec<f32> =
        (0..channels * height * width).map(|_| rng.uniform(0.0, NOISE_AMPLITUDE)).collect();
    Tensor::from_vec(vec![channels, height, width], data)
}

/// Pad a (C,H,W) tensor on the bottom/right to (C,hp,wp) by symmetric
/// reflection (edge row/column included), keeping the source in the top-left
/// corner. The pad on each axis must not exceed the source extent.
fn reflect_pad(t: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::shape("reflect_pad", format!("rank {} != 3", shape.len())));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if hp < h || wp < w {
        return Err(Error::param("reflect_pad", format!("target {hp}x{wp} smaller than {h}x{w}")));
    }
    if hp - h > h || wp - w > w {
        return Err(Error::param(
            "reflect_pad",
            format!("pad to {hp}x{wp} exceeds reflection range of {h}x{w}"),
        ));
    }
    if hp == h && wp == w {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * hp * wp);
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..hp {
            let sr = mirror(r, h);
            for cc in 0..wp {
                out.push(plane[sr * w + mirror(cc, w)]);
            }
        }
    }
    Tensor::from_vec(vec![c, hp, wp], out)
}

// ---------------------------------------------------------------------------
// Reconstruction quality
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB between two equal-shape tensors with unit
/// value range: `10·log10(1/MSE)`. Identical inputs give +infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("shape {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::param("psnr", "empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

// ---------------------------------------------------------------------------
// Shared optimization plumbing
// ---------------------------------------------------------------------------

/// Validated inputs for one generator fit: the fresh model, the padded rank-4
/// noise, and the target image as (1,3,H,W).
fn dip_setup(
    config: GeneratorConfig,
    x: &Tensor,
    seed: u64,
) -> Result<(GeneratorModel, Tensor, Tensor)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("dip_setup", format!("image must be (3,H,W), got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h < MIN_NOISE_SIDE || w < MIN_NOISE_SIDE {
        return Err(Error::param(
            "dip_setup",
            format!("image sides {h}x{w} below minimum {MIN_NOISE_SIDE}"),
        ));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param("dip_setup", "image values outside [0,1]"));
    }
    let m = config.size_multiple();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let root = Rng::new(seed);
    let noise =
        noise_map(h, w, config.noise_channels, root.fork(STREAM_NOISE).next_u64())?;
    let noise4 = reflect_pad(&noise, hp, wp)?.reshape(vec![1, config.noise_channels, hp, wp])?;
    let model = GeneratorModel::new(config, root.fork(STREAM_INIT).next_u64())?;
    let x4 = x.clone().reshape(vec![1, 3, h, w])?;
    Ok((model, noise4, x4))
}

/// One training forward pass: parameters as gradient leaves, render cropped
/// to the target size. Returns the leaves (for gradient readout) and the
/// cropped render.
fn dip_forward(model: &GeneratorModel, noise4: &Tensor, h: usize, w: usize) -> Result<(Vec<Var>, Var)> {
    let tape = Tape::new();
    let pvars: Vec<Var> =
        model.params.iter().map(|p| tape.leaf(p.clone().requires_grad(true))).collect();
    let nv = tape.constant(noise4.clone());
    let out = model.forward(&nv, &pvars)?;
    let rendered = out.crop(0, 0, h, w)?;
    Ok((pvars, rendered))
}

/// Backpropagate `loss` and apply one Adam update to the model parameters.
/// A non-finite loss value aborts with a numeric error naming the iteration.
fn dip_step(
    op: &'static str,
    model: &mut GeneratorModel,
    pvars: &[Var],
    loss: &Var,
    state: &mut AdamState,
    opts: &AdamParams,
    iteration: usize,
) -> Result<()> {
    let value = loss.scalar()?;
    if !value.is_finite() {
        return Err(Error::numeric(op, format!("non-finite loss at iteration {iteration}")));
    }
    loss.backward()?;
    let grads: Vec<Tensor> = pvars
        .iter()
        .map(|v| v.grad().ok_or_else(|| Error::contract(op, "missing parameter gradient")))
        .collect::<Result<_>>()?;
    adam_step(&mut model.params, &grads, state, opts)
}

/// Summed squared difference between the render and the target constant.
fn reconstruction_term(rendered: &Var, x4: &Tensor) -> Result<Var> {
    let xv = rendered.tape().constant(x4.clone());
    let diff = rendered.sub(&xv)?;
    Ok(diff.mul(&diff)?.sum())
}

fn validate_lr(op: &'static str, lr: f32) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(op, format!("learning rate {lr} must be positive and finite")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Fit the default generator to one image by minimizing the summed squared
/// reconstruction error with Adam. Returns the final render and the PSNR
/// measured after every 100th iteration.
pub fn dip_reconstruct(x: &Tensor, iters: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    dip_reconstruct_with(GeneratorConfig::default(), x, iters, seed, DIP_LR)
}

/// [`dip_reconstruct`] with explicit architecture and learning rate.
pub fn dip_reconstruct_with(
    config: GeneratorConfig,
    x: &Tensor,
    iters: usize,
    seed: u64,
    lr: f32,
) -> Result<(Tensor, Vec<f64>)> {
    validate_lr("dip_reconstruct", lr)?;
    let (mut model, noise4, x4) = dip_setup(config, x, seed)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut state = AdamState::new();
    let opts = AdamParams { lr, ..AdamParams::default() };
    let mut trace = Vec::new();
    for it in 1..=iters {
        let (pvars, rendered) = dip_forward(&model, &noise4, h, w)?;
        let loss = reconstruction_term(&rendered, &x4)?;
        dip_step("dip_reconstruct", &mut model, &pvars, &loss, &mut state, &opts, it)?;
        if it % 100 == 0 {
            trace.push(psnr(&model.render_from_padded(&noise4, h, w)?, x)?);
        }
    }
    Ok((model.render_from_padded(&noise4, h, w)?, trace))
}

// ---------------------------------------------------------------------------
// Adversarial reconstruction
// ---------------------------------------------------------------------------

/// Settings for [`dip_adversarial`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipAttackConfig {
    /// Class the render should be classified as.
    pub target_class: usize,
    /// Ground-truth label of `x`; the attack requires the classifier to agree
    /// with it before starting.
    pub true_label: usize,
    /// Weight of the reconstruction term relative to the classification term.
    pub lambda: f32,
    /// Hard iteration cap.
    pub max_iters: usize,
    /// Early-stop threshold on the classifier's target-class probability.
    pub stop_prob: f32,
    /// Early-stop threshold on the render's PSNR against `x`, in dB.
    pub stop_psnr: f64,
    pub seed: u64,
    /// Generator architecture (full-size by default).
    pub generator: GeneratorConfig,
    pub lr: f32,
}

impl DipAttackConfig {
    pub fn new(target_class: usize, true_label: usize, seed: u64) -> DipAttackConfig {
        DipAttackConfig {
            target_class,
            true_label,
            lambda: 1e-5,
            max_iters: 5000,
            stop_prob: 0.9,
            stop_psnr: 30.0,
            seed,
            generator: GeneratorConfig::default(),
            lr: DIP_LR,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(
                "DipAttackConfig",
                format!("lambda {} must be non-negative and finite", self.lambda),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::param("DipAttackConfig", "max_iters must be at least 1"));
        }
        if !(self.stop_prob > 0.0 && self.stop_prob <= 1.0) {
            return Err(Error::param(
                "DipAttackConfig",
                format!("stop_prob {} outside (0,1]", self.stop_prob),
            ));
        }
        if !self.stop_psnr.is_finite() {
            return Err(Error::param("DipAttackConfig", "stop_psnr must be finite"));
        }
        validate_lr("DipAttackConfig", self.lr)
    }
}

/// Synthesize an adversarial image by fitting a fresh generator under the
/// dual loss: targeted squared error between the classifier's probabilities
/// and the target one-hot vector, plus `lambda` times the summed squared
/// reconstruction error. Stops early once the target probability and the
/// PSNR both clear their thresholds (read from the current forward pass);
/// otherwise runs to the iteration cap and reports `reason:
/// "iteration-cap"`. The result's `x_adv` is the raw render.
pub fn dip_adversarial(
    x: &Tensor,
    f: &ClassifierModel,
    cfg: &DipAttackConfig,
) -> Result<AttackResult> {
    let started = Instant::now();
    require_trained("dip_adversarial", f)?;
    cfg.validate()?;
    require_class("dip_adversarial", f, cfg.target_class)?;
    require_class("dip_adversarial", f, cfg.true_label)?;
    let (pred, _, _) = f.classify(x)?;
    if pred != cfg.true_label {
        return Err(Error::contract(
            "dip_adversarial",
            format!("image must be correctly classified first (predicted {pred}, label {})", cfg.true_label),
        ));
    }
    if cfg.target_class == pred {
        return Err(Error::param("dip_adversarial", "target class equals the current prediction"));
    }

    let (mut model, noise4, x4) = dip_setup(cfg.generator, x, cfg.seed)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut state = AdamState::new();
    let opts = AdamParams { lr: cfg.lr, ..AdamParams::default() };
    let mut steps = 0;
    let mut stopped: Option<Tensor> = None;
    for it in 1..=cfg.max_iters {
        let (pvars, rendered) = dip_forward(&model, &noise4, h, w)?;
        let logits = f.logits_on_tape(&rendered)?;
        let probs = logits.softmax()?;
        let p_target = probs.value().data()[cfg.target_class];
        let render_now = rendered.value().reshape(vec![3, h, w])?;
        if p_target >= cfg.stop_prob && psnr(&render_now, x)? >= cfg.stop_psnr {
            stopped = Some(render_now);
            break;
        }
        let adv = mse_onehot_loss(&probs, cfg.target_class, false)?;
        let recon = reconstruction_term(&rendered, &x4)?;
        let loss = adv.add(&recon.mul_scalar(cfg.lambda))?;
        dip_step("dip_adversarial", &mut model, &pvars, &loss, &mut state, &opts, it)?;
        steps = it;
    }
    let (proposed, reason) = match stopped {
        Some(render) => (render, None),
        None => (model.render_from_padded(&noise4, h, w)?, Some("iteration-cap")),
    };
    assemble(f, x, &proposed, SuccessRule::Targeted(cfg.target_class), steps, reason, started)
}

// ---------------------------------------------------------------------------
// Mask compositing
// ---------------------------------------------------------------------------

fn validate_mask(op: &'static str, mask: &Tensor, ph: usize, pw: usize) -> Result<()> {
    if mask.shape() != [ph, pw] {
        return Err(Error::shape(
            op,
            format!("mask shape {:?} must match patch {ph}x{pw}", mask.shape()),
        ));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(op, "mask entries must be exactly 0 or 1"));
    }
    Ok(())
}

/// Binary-mask blend: the patch replaces image pixels where the mask is 1 and
/// leaves them bit-identical where it is 0, with the mask window translated
/// to `offset` (row, column).
pub fn composite(
    x: &Tensor,
    patch_render: &Tensor,
    mask: &Tensor,
    offset: (usize, usize),
) -> Result<Tensor> {
    let xs = x.shape();
    let ps = patch_render.shape();
    if xs.len() != 3 || xs[0] != 3 {
        return Err(Error::shape("composite", format!("image must be (3,H,W), got {xs:?}")));
    }
    if ps.len() != 3 || ps[0] != 3 {
        return Err(Error::shape("composite", format!("patch must be (3,h,w), got {ps:?}")));
    }
    let (h, w, ph, pw) = (xs[1], xs[2], ps[1], ps[2]);
    validate_mask("composite", mask, ph, pw)?;
    let (r0, c0) = offset;
    if r0 + ph > h || c0 + pw > w {
        return Err(Error::placement(
            "composite",
            format!("patch {ph}x{pw}@({r0},{c0}) outside {h}x{w}"),
        ));
    }
    let mut out = x.data().to_vec();
    let m = mask.data();
    let p = patch_render.data();
    for ch in 0..3 {
        for r in 0..ph {
            for cc in 0..pw {
                if m[r * pw + cc] == 1.0 {
                    out[ch * h * w + (r0 + r) * w + (c0 + cc)] = p[ch * ph * pw + r * pw + cc];
                }
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// On-tape version of [`composite`] for patch training: gradients flow to the
/// patch only through mask-1 pixels. `patch` is a rank-4 (1,3,ph,pw) tape
/// value, `x` the host image as (1,3,H,W) plain tensor.
fn composite_on_tape(
    patch: &Var,
    x: &Tensor,
    mask: &Tensor,
    offset: (usize, usize),
) -> Result<Var> {
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let ps = patch.shape();
    let (ph, pw) = (ps[2], ps[3]);
    let (r0, c0) = offset;
    let placed = patch.place(r0, c0, h, w)?;
    let m = mask.data();
    let mut mask_full = vec![0.0f32; h * w];
    for r in 0..ph {
        for cc in 0..pw {
            mask_full[(r0 + r) * w + (c0 + cc)] = m[r * pw + cc];
        }
    }
    let mut mask3 = Vec::with_capacity(3 * h * w);
    let mut keep = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        for i in 0..h * w {
            mask3.push(mask_full[i]);
            keep.push(x.data()[ch * h * w + i] * (1.0 - mask_full[i]));
        }
    }
    let tape = patch.tape();
    let mv = tape.constant(Tensor::from_vec(vec![1, 3, h, w], mask3)?);
    let kv = tape.constant(Tensor::from_vec(vec![1, 3, h, w], keep)?);
    placed.mul(&mv)?.add(&kv)
}

// ---------------------------------------------------------------------------
// Patch synthesis
// ---------------------------------------------------------------------------

/// Where a patch lands on each host image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchPlacement {
    /// Always at this (row, column) offset.
    Fixed(usize, usize),
    /// Uniformly random valid offset, redrawn per training sample.
    Random,
}

/// A binary patch mask plus its placement rule.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    /// (ph,pw) tensor with entries exactly 0 or 1.
    pub mask: Tensor,
    pub placement: PatchPlacement,
}

impl PatchSpec {
    /// All-ones rectangular mask.
    pub fn rectangle(ph: usize, pw: usize, placement: PatchPlacement) -> Result<PatchSpec> {
        if ph == 0 || pw == 0 {
            return Err(Error::param("PatchSpec", "patch sides must be positive"));
        }
        Ok(PatchSpec { mask: Tensor::full(vec![ph, pw], 1.0), placement })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.mask.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape("PatchSpec", format!("mask must be (h,w), got {s:?}")));
        }
        validate_mask("PatchSpec", &self.mask, s[0], s[1])?;
        if self.mask.data().iter().all(|&v| v == 0.0) {
            return Err(Error::param("PatchSpec", "mask selects no pixels"));
        }
        Ok(())
    }

    /// Patch height/width.
    pub fn dims(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    /// Fraction of an (image_h, image_w) image the mask covers; equals the
    /// mean of [`PatchSpec::effective_mask`] by construction.
    pub fn area_fraction(&self, image_h: usize, image_w: usize) -> Result<f64> {
        if image_h == 0 || image_w == 0 {
            return Err(Error::param("PatchSpec", "image dims must be positive"));
        }
        let ones = self.mask.data().iter().filter(|&&v| v == 1.0).count();
        Ok(ones as f64 / (image_h as f64 * image_w as f64))
    }

    /// The image-shaped binary mask: this mask translated to `offset` on a
    /// zero (image_h, image_w) canvas.
    pub fn effective_mask(
        &self,
        image_h: usize,
        image_w: usize,
        offset: (usize, usize),
    ) -> Result<Tensor> {
        let (ph, pw) = self.dims();
        let (r0, c0) = offset;
        if r0 + ph > image_h || c0 + pw > image_w {
            return Err(Error::placement(
                "PatchSpec",
                format!("mask {ph}x{pw}@({r0},{c0}) outside {image_h}x{image_w}"),
            ));
        }
        let mut out = vec![0.0f32; image_h * image_w];
        for r in 0..ph {
            for cc in 0..pw {
                out[(r0 + r) * image_w + (c0 + cc)] = self.mask.data()[r * pw + cc];
            }
        }
        Tensor::from_vec(vec![image_h, image_w], out)
    }
}

/// Output of [`dip_patch_train`]: the rendered patch, the generator that
/// produced it, and the fixed noise it was rendered from.
#[derive(Debug, Clone)]
pub struct TrainedPatch {
    /// (3,ph,pw) render, values in (0,1).
    pub render: Tensor,
    pub model: GeneratorModel,
    /// Unpadded (C,nh,nw) noise input (patch-sized, floored at the minimum
    /// noise side).
    pub noise: Tensor,
}

/// Train a patch against a frozen classifier: minimize the targeted one-hot
/// squared error of composited training images, mini-batched, with the patch
/// placed per `spec.placement` on every sample. No reconstruction term.
pub fn dip_patch_train(
    train: &Dataset,
    f: &ClassifierModel,
    attack_class: usize,
    spec: &PatchSpec,
    iters: usize,
    batch: usize,
    seed: u64,
) -> Result<TrainedPatch> {
    dip_patch_train_with(GeneratorConfig::default(), DIP_LR, train, f, attack_class, spec, iters, batch, seed)
}

/// [`dip_patch_train`] with explicit architecture and learning rate.
#[allow(clippy::too_many_arguments)]
pub fn dip_patch_train_with(
    config: GeneratorConfig,
    lr: f32,
    train: &Dataset,
    f: &ClassifierModel,
    attack_class: usize,
    spec: &PatchSpec,
    iters: usize,
    batch: usize,
    seed: u64,
) -> Result<TrainedPatch> {
    require_trained("dip_patch_train", f)?;
    require_class("dip_patch_train", f, attack_class)?;
    validate_lr("dip_patch_train", lr)?;
    config.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::param("dip_patch_train", "empty dataset"));
    }
    if batch == 0 {
        return Err(Error::param("dip_patch_train", "batch size 0"));
    }
    if train.labels.iter().any(|&y| y == attack_class) {
        return Err(Error::param(
            "dip_patch_train",
            format!("attack class {attack_class} present in the training set"),
        ));
    }
    let (h, w) = (train.images.shape()[2], train.images.shape()[3]);
    let (ph, pw) = spec.dims();
    if ph > h || pw > w {
        return Err(Error::placement(
            "dip_patch_train",
            format!("patch {ph}x{pw} larger than image {h}x{w}"),
        ));
    }
    if let PatchPlacement::Fixed(r0, c0) = spec.placement {
        if r0 + ph > h || c0 + pw > w {
            return Err(Error::placement(
                "dip_patch_train",
                format!("fixed offset ({r0},{c0}) puts {ph}x{pw} outside {h}x{w}"),
            ));
        }
    }

    // Patches smaller than the minimum noise side render as the top-left crop
    // of a minimum-size generation.
    let (nh, nw) = (ph.max(MIN_NOISE_SIDE), pw.max(MIN_NOISE_SIDE));
    let m = config.size_multiple();
    let (hp, wp) = (nh.div_ceil(m) * m, nw.div_ceil(m) * m);
    let root = Rng::new(seed);
    let noise = noise_map(nh, nw, config.noise_channels, root.fork(STREAM_NOISE).next_u64())?;
    let noise4 = reflect_pad(&noise, hp, wp)?.reshape(vec![1, config.noise_channels, hp, wp])?;
    let mut model = GeneratorModel::new(config, root.fork(STREAM_INIT).next_u64())?;
    let batches = root.fork(STREAM_BATCH);
    let mut state = AdamState::new();
    let opts = AdamParams { lr, ..AdamParams::default() };
    let stride = 3 * h * w;
    for it in 1..=iters {
        let (pvars, out) = dip_forward(&model, &noise4, ph, pw)?;
        let mut rng = batches.fork(it as u64);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let idx = rng.below(train.len());
            let offset = match spec.placement {
                PatchPlacement::Fixed(r0, c0) => (r0, c0),
                PatchPlacement::Random => (rng.below(h - ph + 1), rng.below(w - pw + 1)),
            };
            let xi = Tensor::from_vec(
                vec![1, 3, h, w],
                train.images.data()[idx * stride..(idx + 1) * stride].to_vec(),
            )?;
            let xhat = composite_on_tape(&out, &xi, &spec.mask, offset)?;
            let logits = f.logits_on_tape(&xhat)?;
            let term = mse_onehot_loss(&logits.softmax()?, attack_class, false)?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        let loss = total
            .ok_or_else(|| Error::contract("dip_patch_train", "empty batch"))?
            .mul_scalar(1.0 / batch as f32);
        dip_step("dip_patch_train", &mut model, &pvars, &loss, &mut state, &opts, it)?;
    }
    let render = model.render_from_padded(&noise4, ph, pw)?;
    Ok(TrainedPatch { render, model, noise })
}

// ---------------------------------------------------------------------------
// Patch artifacts
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to a saved patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMeta {
    pub attack_class: usize,
    pub area_fraction: f64,
    pub seed: u64,
    pub iters: usize,
}

/// Write a trained patch into `dir` as three files: `patch.advm` (generator
/// parameters), `patch.ppm` (8-bit render), and `patch.txt` (key=value
/// metadata).
pub fn save_patch(dir: impl AsRef<Path>, patch: &TrainedPatch, meta: &PatchMeta) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))?;
    patch.model.save(dir.join("patch.advm"))?;
    write_ppm(dir.join("patch.ppm"), &patch.render)?;
    let text = format!(
        "attack_class={}\narea_fraction={}\nseed={}\niters={}\n",
        meta.attack_class, meta.area_fraction, meta.seed, meta.iters
    );
    let path = dir.join("patch.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), &e))
}

/// Load a patch directory written by [`save_patch`]. The render comes back
/// 8-bit quantized (from the PPM), which is the form the patch is applied in.
pub fn load_patch(dir: impl AsRef<Path>) -> Result<(GeneratorModel, Tensor, PatchMeta)> {
    let dir = dir.as_ref();
    let model = GeneratorModel::load(dir.join("patch.advm"))?;
    let render = read_ppm(dir.join("patch.ppm"))?;
    let path = dir.join("patch.txt");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut attack_class = None;
    let mut area_fraction = None;
    let mut seed = None;
    let mut iters = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format("load_patch", format!("bad metadata line: {line}")))?;
        match key {
            "attack_class" => attack_class = Some(parse_meta(value, "attack_class")?),
            "area_fraction" => {
                area_fraction = Some(value.parse::<f64>().map_err(|_| {
                    Error::format("load_patch", format!("bad area_fraction: {value}"))
                })?)
            }
            "seed" => seed = Some(parse_meta(value, "seed")?),
            "iters" => iters = Some(parse_meta(value, "iters")? as usize),
            other => {
                return Err(Error::format("load_patch", format!("unknown metadata key: {other}")))
            }
        }
    }
    let missing = || Error::format("load_patch", "missing metadata key");
    Ok((
        model,
        render,
        PatchMeta {
            attack_class: attack_class.ok_or_else(missing)? as usize,
            area_fraction: area_fraction.ok_or_else(missing)?,
            seed: seed.ok_or_else(missing)?,
            iters: iters.ok_or_else(missing)?,
        },
    ))
}

fn parse_meta(value: &str, key: &'static str) -> Result<u64> {
    value.parse::<u64>().map_err(|_| Error::format("load_patch", format!("bad {key}: {value}")))
}
