//! Layer specifications, parameter initialization, losses, optimizers, and the
//! ADVM model serialization format.

mod adam;
mod lbfgs;
mod losses;

pub use adam::{adam_step, AdamParams, AdamState};
pub use lbfgs::{lbfgs_minimize, LbfgsResult};
pub use losses::{mse_onehot_loss, softmax_cross_entropy};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};
#[cfg(test)]
use crate::tensor::Tape;
use std::io::{Read, Write};
use std::path::Path;

const ADVM_MAGIC: &[u8; 4] = b"ADVM";
const ADVM_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
}

/// One layer of a feed-forward stack. `SkipConcat` is a structural marker for
/// branch merge points (it owns no parameters); sequential forward rejects it.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    Upsample { factor: usize },
    Activation { act: Activation },
    Linear { in_dim: usize, out_dim: usize },
    SkipConcat { channels: usize },
}

impl LayerSpec {
    /// Number of parameter tensors this layer owns.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => 2,
            _ => 0,
        }
    }
}

/// Check structural consistency: odd kernels, positive dims, and channel
/// agreement between consecutive convolution layers.
pub fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    let mut channels: Option<usize> = None;
    for (i, layer) in spec.iter().enumerate() {
        match layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, .. } => {
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::param(
                        "validate_spec",
                        format!("layer {i}: kernel {kernel} must be odd"),
                    ));
                }
                if *stride < 1 || *in_ch == 0 || *out_ch == 0 {
                    return Err(Error::param("validate_spec", format!("layer {i}: bad conv dims")));
                }
                if let Some(c) = channels {
                    if c != *in_ch {
                        return Err(Error::param(
                            "validate_spec",
                            format!("layer {i}: expects {in_ch} channels, previous produces {c}"),
                        ));
                    }
                }
                channels = Some(*out_ch);
            }
            LayerSpec::Upsample { factor } => {
                if *factor < 1 {
                    return Err(Error::param("validate_spec", format!("layer {i}: factor 0")));
                }
            }
            LayerSpec::Activation { .. } => {}
            LayerSpec::Linear { in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::param("validate_spec", format!("layer {i}: bad linear dims")));
                }
                channels = None;
            }
            LayerSpec::SkipConcat { channels: add } => {
                if let Some(c) = channels.as_mut() {
                    *c += add;
                }
            }
        }
    }
    Ok(())
}

/// Glorot-uniform initialization: weights uniform in [-b, b) with
/// b = sqrt(6 / (fan_in + fan_out)); conv fans include the receptive field
/// (fan_in = in_ch * k^2, fan_out = out_ch * k^2). Biases start at zero.
/// Each layer draws from its own seed substream, so identical seeds give
/// identical parameters regardless of surrounding layers.
pub fn init_params(spec: &[LayerSpec], seed: u64) -> Result<Vec<Tensor>> {
    validate_spec(spec)?;
    init_params_unchecked(spec, seed)
}

/// [`init_params`] without the sequential-stack validation, for layer lists
/// that describe branching topologies (validated by their owner instead).
pub(crate) fn init_params_unchecked(spec: &[LayerSpec], seed: u64) -> Result<Vec<Tensor>> {
    let root = Rng::new(seed);
    let mut params = Vec::new();
    for (i, layer) in spec.iter().enumerate() {
        let mut rng = root.fork(i as u64);
        match layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                let fan_out = out_ch * kernel * kernel;
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let n = out_ch * in_ch * kernel * kernel;
                let data: Vec<f32> = (0..n).map(|_| rng.uniform(-b, b)).collect();
                params.push(Tensor::from_vec(vec![*out_ch, *in_ch, *kernel, *kernel], data)?);
                params.push(Tensor::zeros(vec![*out_ch]));
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                let b = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
                let data: Vec<f32> = (0..in_dim * out_dim).map(|_| rng.uniform(-b, b)).collect();
                params.push(Tensor::from_vec(vec![*in_dim, *out_dim], data)?);
                params.push(Tensor::zeros(vec![*out_dim]));
            }
            _ => {}
        }
    }
    Ok(params)
}

/// Run a sequential layer stack. `params` holds the flat tensor list in
/// [`init_params`] order, already placed on the input's tape. Linear layers
/// flatten rank-4 input.
pub fn forward_layers(input: &Var, spec: &[LayerSpec], params: &[Var]) -> Result<Var> {
    let mut x = input.clone();
    let mut p = 0usize;
    for layer in spec {
        match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                x = x.conv2d(&params[p], &params[p + 1], *stride, *padding)?;
                p += 2;
            }
            LayerSpec::Upsample { factor } => {
                x = x.upsample_nearest(*factor)?;
            }
            LayerSpec::Activation { act } => {
                x = match act {
                    Activation::Relu => x.relu(),
                    Activation::LeakyRelu(s) => x.leaky_relu(*s),
                    Activation::Sigmoid => x.sigmoid(),
                    Activation::Tanh => x.tanh(),
                };
            }
            LayerSpec::Linear { in_dim, out_dim: _ } => {
                let shape = x.shape();
                if shape.len() != 2 {
                    let rows = shape[0];
                    let cols: usize = shape[1..].iter().product();
                    x = x.reshape(vec![rows, cols])?;
                }
                if x.shape()[1] != *in_dim {
                    return Err(Error::shape(
                        "forward_layers",
                        format!("linear expects {in_dim} inputs, got {}", x.shape()[1]),
                    ));
                }
                x = x.matmul(&params[p])?.add_row(&params[p + 1])?;
                p += 2;
            }
            LayerSpec::SkipConcat { .. } => {
                return Err(Error::contract(
                    "forward_layers",
                    "skip-concat markers require a branching forward, not the sequential one",
                ));
            }
        }
    }
    Ok(x)
}

fn kind_byte(layer: &LayerSpec) -> u8 {
    match layer {
        LayerSpec::Conv { .. } => 0,
        LayerSpec::Upsample { .. } => 1,
        LayerSpec::Activation { .. } => 2,
        LayerSpec::Linear { .. } => 3,
        LayerSpec::SkipConcat { .. } => 4,
    }
}

fn hyperparams(layer: &LayerSpec) -> Vec<u32> {
    match layer {
        LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding } => {
            vec![*in_ch as u32, *out_ch as u32, *kernel as u32, *stride as u32, *padding as u32]
        }
        LayerSpec::Upsample { factor } => vec![*factor as u32],
        LayerSpec::Activation { act } => match act {
            Activation::Relu => vec![0, 0],
            Activation::LeakyRelu(s) => vec![1, s.to_bits()],
            Activation::Sigmoid => vec![2, 0],
            Activation::Tanh => vec![3, 0],
        },
        LayerSpec::Linear { in_dim, out_dim } => vec![*in_dim as u32, *out_dim as u32],
        LayerSpec::SkipConcat { channels } => vec![*channels as u32],
    }
}

fn layer_from_record(kind: u8, hp: &[u32]) -> Result<LayerSpec> {
    let need = |n: usize| {
        if hp.len() != n {
            Err(Error::format("ADVM", format!("kind {kind} expects {n} hyperparams, got {}", hp.len())))
        } else {
            Ok(())
        }
    };
    Ok(match kind {
        0 => {
            need(5)?;
            LayerSpec::Conv {
                in_ch: hp[0] as usize,
                out_ch: hp[1] as usize,
                kernel: hp[2] as usize,
                stride: hp[3] as usize,
                padding: hp[4] as usize,
            }
        }
        1 => {
            need(1)?;
            LayerSpec::Upsample { factor: hp[0] as usize }
        }
        2 => {
            need(2)?;
            LayerSpec::Activation {
                act: match hp[0] {
                    0 => Activation::Relu,
                    1 => Activation::LeakyRelu(f32::from_bits(hp[1])),
                    2 => Activation::Sigmoid,
                    3 => Activation::Tanh,
                    other => {
                        return Err(Error::format("ADVM", format!("unknown activation code {other}")))
                    }
                },
            }
        }
        3 => {
            need(2)?;
            LayerSpec::Linear { in_dim: hp[0] as usize, out_dim: hp[1] as usize }
        }
        4 => {
            need(1)?;
            LayerSpec::SkipConcat { channels: hp[0] as usize }
        }
        other => return Err(Error::format("ADVM", format!("unknown layer kind {other}"))),
    })
}

/// Serialize a layer stack and its parameters: magic `ADVM`, u16 LE version,
/// u16 LE layer count, then per layer: kind u8, u8 hyperparam count, u32 LE
/// hyperparams, u8 tensor count, ATSR blocks. Bit-exact round trip.
pub fn write_advm(w: &mut impl Write, spec: &[LayerSpec], params: &[Tensor]) -> Result<()> {
    let expected: usize = spec.iter().map(|l| l.param_count()).sum();
    if expected != params.len() {
        return Err(Error::contract(
            "write_advm",
            format!("spec owns {expected} tensors, got {}", params.len()),
        ));
    }
    let io = |e: std::io::Error| Error::format("ADVM", format!("write failed: {e}"));
    w.write_all(ADVM_MAGIC).map_err(io)?;
    w.write_all(&ADVM_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(spec.len() as u16).to_le_bytes()).map_err(io)?;
    let mut p = 0usize;
    for layer in spec {
        w.write_all(&[kind_byte(layer)]).map_err(io)?;
        let hp = hyperparams(layer);
        w.write_all(&[hp.len() as u8]).map_err(io)?;
        for v in hp {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let count = layer.param_count();
        w.write_all(&[count as u8]).map_err(io)?;
        for t in &params[p..p + count] {
            t.write_atsr(w).map_err(io)?;
        }
        p += count;
    }
    Ok(())
}

pub fn read_advm(r: &mut impl Read) -> Result<(Vec<LayerSpec>, Vec<Tensor>)> {
    let fail = |d: String| Error::format("ADVM", d);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fail(format!("truncated magic: {e}")))?;
    if &magic != ADVM_MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|e| fail(format!("truncated version: {e}")))?;
    if u16::from_le_bytes(b2) != ADVM_VERSION {
        return Err(fail(format!("unsupported version {}", u16::from_le_bytes(b2))));
    }
    r.read_exact(&mut b2).map_err(|e| fail(format!("truncated layer count: {e}")))?;
    let layers = u16::from_le_bytes(b2) as usize;
    let mut spec = Vec::with_capacity(layers);
    let mut params = Vec::new();
    let mut b1 = [0u8; 1];
    let mut b4 = [0u8; 4];
    for i in 0..layers {
        r.read_exact(&mut b1).map_err(|e| fail(format!("layer {i}: truncated kind: {e}")))?;
        let kind = b1[0];
        r.read_exact(&mut b1).map_err(|e| fail(format!("layer {i}: truncated hyper count: {e}")))?;
        let nh = b1[0] as usize;
        let mut hp = Vec::with_capacity(nh);
        for _ in 0..nh {
            r.read_exact(&mut b4).map_err(|e| fail(format!("layer {i}: truncated hyperparams: {e}")))?;
            hp.push(u32::from_le_bytes(b4));
        }
        let layer = layer_from_record(kind, &hp)?;
        r.read_exact(&mut b1).map_err(|e| fail(format!("layer {i}: truncated tensor count: {e}")))?;
        let nt = b1[0] as usize;
        if nt != layer.param_count() {
            return Err(fail(format!(
                "layer {i}: {nt} tensors recorded, kind owns {}",
                layer.param_count()
            )));
        }
        for _ in 0..nt {
            params.push(Tensor::read_atsr(r)?);
        }
        spec.push(layer);
    }
    Ok((spec, params))
}

pub fn save_advm(path: impl AsRef<Path>, spec: &[LayerSpec], params: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_advm(&mut buf, spec, params)?;
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), &e))
}

pub fn load_advm(path: impl AsRef<Path>) -> Result<(Vec<LayerSpec>, Vec<Tensor>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    read_advm(&mut bytes.as_slice())
}
