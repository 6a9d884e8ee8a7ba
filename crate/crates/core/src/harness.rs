//! Measurement harness: image transforms (rotation, scaling, JPEG round
//! trip), the attack-by-transform robustness grid, perceptibility metrics,
//! patch evaluation curves, and deterministic CSV/SVG report emission.
//!
//! Transform evaluation follows a save/load realism rule: any genuinely
//! resampled image is re-quantized to the 8-bit grid before re-classification,
//! while identity transforms (kind `none`, rotation by 0, scale factor 1)
//! return their input bit-for-bit so identity columns match the baseline
//! exactly.

use crate::attacks::{
    cw_attack, deepfool, fgsm, fgsm_iterative, lbfgs_attack, momentum_iterative, smm_attack,
    AttackResult, CwConfig, FgsmConfig, LossTarget,
};
use crate::classifier::{synth_dataset, ClassifierModel, Dataset};
use crate::error::{Error, Result};
use crate::generator::{composite, dip_adversarial, psnr, DipAttackConfig, GeneratorConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Rng stream labels so that target draws, trial magnitudes, and per-image
/// attack seeds never collide.
const STREAM_TARGETS: u64 = 0x7461_7267;
const STREAM_TRIALS: u64 = 0x7472_6c73;
const STREAM_ATTACKS: u64 = 0x6174_746b;
const STREAM_OFFSETS: u64 = 0x6f66_6673;

// ---------------------------------------------------------------------------
// Bilinear sampling helpers
// ---------------------------------------------------------------------------

/// Bilinear sample of channel plane `plane` (h x w) at fractional position
/// (`sy`, `sx`), clamping out-of-bounds coordinates to the nearest edge.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let clamp = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64);
    let (sy, sx) = (clamp(sy, h), clamp(sx, w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
    let at = |r: usize, c: usize| plane[r * w + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn require_chw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(op, format!("expected (3,H,W), got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Warp `x` by the inverse map `src(out_row, out_col) -> (sy, sx)` with
/// bilinear interpolation and clamp-to-edge sampling.
fn warp(x: &Tensor, src: impl Fn(usize, usize) -> (f64, f64)) -> Result<Tensor> {
    let s = x.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let data = x.data();
    let mut out = vec![0.0f32; data.len()];
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = src(r, c);
            for k in 0..ch {
                out[k * plane + r * w + c] =
                    sample_bilinear(&data[k * plane..(k + 1) * plane], h, w, sy, sx);
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Rotation and scaling
// ---------------------------------------------------------------------------

/// Rotate about the image center by `degrees` with bilinear interpolation and
/// clamp-to-edge sampling. A positive angle maps output offset (dx, dy) to
/// source offset (dx·cosθ + dy·sinθ, −dx·sinθ + dy·cosθ) in (column, row)
/// coordinates. `degrees == 0` returns the input bit-for-bit.
pub fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    let (_, h, w) = require_chw("rotate", x)?;
    if !(degrees.abs() <= 180.0) {
        return Err(Error::param("rotate", format!("|{degrees}| exceeds 180 degrees")));
    }
    if degrees == 0.0 {
        return Ok(x.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(x, |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        (cy - dx * sin + dy * cos, cx + dx * cos + dy * sin)
    })
}

/// Center-anchored rescale by `factor` (bilinear, clamp-to-edge), output at
/// the original shape: factors above 1 enlarge content (edges crop away),
/// factors below 1 shrink it (edge pixels replicate outward).
/// `factor == 1` returns the input bit-for-bit.
pub fn scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    let (_, h, w) = require_chw("scale", x)?;
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::param("scale", format!("factor {factor} outside [0.5, 2]")));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    warp(x, |r, c| (cy + (r as f64 - cy) / factor, cx + (c as f64 - cx) / factor))
}

/// Resize to an explicit target shape (bilinear, half-pixel-centered grid,
/// clamp-to-edge); used for rescaling patch renders to area fractions.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (ch, h, w) = require_chw("resize_bilinear", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::param("resize_bilinear", format!("target {oh}x{ow} is empty")));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let (ry, rx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let plane_in = h * w;
    let plane_out = oh * ow;
    let data = x.data();
    let mut out = vec![0.0f32; ch * plane_out];
    for r in 0..oh {
        for c in 0..ow {
            let sy = (r as f64 + 0.5) * ry - 0.5;
            let sx = (c as f64 + 0.5) * rx - 0.5;
            for k in 0..ch {
                out[k * plane_out + r * ow + c] =
                    sample_bilinear(&data[k * plane_in..(k + 1) * plane_in], h, w, sy, sx);
            }
        }
    }
    Tensor::from_vec(vec![ch, oh, ow], out)
}

// ---------------------------------------------------------------------------
// JPEG round trip
// ---------------------------------------------------------------------------

/// Baseline luminance quantization table (Annex K), row major.
const Q_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Baseline chrominance quantization table (Annex K), row major.
const Q_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Conventional quality scaling: the base table entries are multiplied by
/// `5000/q` below 50 and `200 − 2q` above, then floored into [1, 255].
fn scaled_table(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let s = if quality < 50 { 5000 / quality } else { 200 - 2 * quality } as u64;
    let mut out = [0.0f64; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u64 * s + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// 8x8 type-II DCT basis: `COS[u][x] = cos((2x+1)uπ/16)` with the orthonormal
/// scale folded in separately via `dct_c`.
fn dct_cos() -> &'static [[f64; 8]; 8] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        t
    })
}

fn dct_c(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// Forward 8x8 DCT-II of one block (row-major, level-shifted input).
fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let cos = dct_cos();
    let mut out = [0.0f64; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for (x, crow) in cos[u].iter().enumerate() {
                for (y, c) in cos[v].iter().enumerate() {
                    acc += block[x * 8 + y] * crow * c;
                }
            }
            out[u * 8 + v] = 0.25 * dct_c(u) * dct_c(v) * acc;
        }
    }
    out
}

/// Inverse 8x8 DCT (exact inverse of [`dct8`]).
fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let cos = dct_cos();
    let mut out = [0.0f64; 64];
    for x in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    acc += dct_c(u) * dct_c(v) * coef[u * 8 + v] * cos[u][x] * cos[v][y];
                }
            }
            out[x * 8 + y] = 0.25 * acc;
        }
    }
    out
}

/// Quantize-round-dequantize every 8x8 block of an edge-padded plane
/// (values already level-shifted by −128).
fn lossy_plane(plane: &mut [f64], ph: usize, pw: usize, table: &[f64; 64]) {
    for br in (0..ph).step_by(8) {
        for bc in (0..pw).step_by(8) {
            let mut block = [0.0f64; 64];
            for r in 0..8 {
                for c in 0..8 {
                    block[r * 8 + c] = plane[(br + r) * pw + (bc + c)];
                }
            }
            let mut coef = dct8(&block);
            for (f, q) in coef.iter_mut().zip(table) {
                *f = (*f / q).round() * q;
            }
            let rec = idct8(&coef);
            for r in 0..8 {
                for c in 0..8 {
                    plane[(br + r) * pw + (bc + c)] = rec[r * 8 + c];
                }
            }
        }
    }
}

/// In-memory JPEG-style lossy round trip: RGB→YCbCr (full range, no chroma
/// subsampling), 8x8 block DCT, Annex-K tables scaled by the conventional
/// quality mapping, quantize-round-dequantize, inverse DCT, YCbCr→RGB, clamp.
/// No bitstream is produced.
pub fn jpeg_roundtrip(x: &Tensor, quality: u32) -> Result<Tensor> {
    let (_, h, w) = require_chw("jpeg_roundtrip", x)?;
    if !(1..=100).contains(&quality) {
        return Err(Error::param("jpeg_roundtrip", format!("quality {quality} outside [1,100]")));
    }
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let plane = h * w;
    let data = x.data();
    // Edge-replicated padded Y/Cb/Cr planes in the 0..255 domain, shifted.
    let mut planes = vec![vec![0.0f64; ph * pw]; 3];
    for r in 0..ph {
        for c in 0..pw {
            let (sr, sc) = (r.min(h - 1), c.min(w - 1));
            let red = data[sr * w + sc] as f64 * 255.0;
            let green = data[plane + sr * w + sc] as f64 * 255.0;
            let blue = data[2 * plane + sr * w + sc] as f64 * 255.0;
            let y = 0.299 * red + 0.587 * green + 0.114 * blue;
            let cb = 128.0 - 0.168736 * red - 0.331264 * green + 0.5 * blue;
            let cr = 128.0 + 0.5 * red - 0.418688 * green - 0.081312 * blue;
            planes[0][r * pw + c] = y - 128.0;
            planes[1][r * pw + c] = cb - 128.0;
            planes[2][r * pw + c] = cr - 128.0;
        }
    }
    let luma = scaled_table(&Q_LUMA, quality);
    let chroma = scaled_table(&Q_CHROMA, quality);
    lossy_plane(&mut planes[0], ph, pw, &luma);
    lossy_plane(&mut planes[1], ph, pw, &chroma);
    lossy_plane(&mut planes[2], ph, pw, &chroma);
    let mut out = vec![0.0f32; 3 * plane];
    for r in 0..h {
        for c in 0..w {
            let y = planes[0][r * pw + c] + 128.0;
            let cb = planes[1][r * pw + c];
            let cr = planes[2][r * pw + c];
            let red = y + 1.402 * cr;
            let green = y - 0.344136 * cb - 0.714136 * cr;
            let blue = y + 1.772 * cb;
            out[r * w + c] = (red / 255.0).clamp(0.0, 1.0) as f32;
            out[plane + r * w + c] = (green / 255.0).clamp(0.0, 1.0) as f32;
            out[2 * plane + r * w + c] = (blue / 255.0).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Snap every value to the 8-bit grid (`round(v·255)/255`, clamped), modeling
/// one save/load cycle of a transformed image.
pub fn requantize_8bit(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape unchanged")
}

// ---------------------------------------------------------------------------
// Transform specifications
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    None,
    Rotate,
    Scale,
    Jpeg,
}

/// How a trial magnitude is drawn: the fixed value itself, or uniformly from
/// `magnitude ± range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Fixed,
    Uniform { range: f64 },
}

/// One transform column of the robustness grid: a kind, a center magnitude
/// (degrees / scale factor / quality percent), and a sampling rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub magnitude: f64,
    pub sampling: Sampling,
}

impl TransformSpec {
    pub fn none() -> TransformSpec {
        TransformSpec { kind: TransformKind::None, magnitude: 0.0, sampling: Sampling::Fixed }
    }

    /// Fixed rotation by `degrees`.
    pub fn rotate(degrees: f64) -> TransformSpec {
        TransformSpec { kind: TransformKind::Rotate, magnitude: degrees, sampling: Sampling::Fixed }
    }

    /// Rotation drawn uniformly from ±`range` degrees.
    pub fn rotate_pm(range: f64) -> TransformSpec {
        TransformSpec {
            kind: TransformKind::Rotate,
            magnitude: 0.0,
            sampling: Sampling::Uniform { range },
        }
    }

    /// Fixed rescale by `factor`.
    pub fn scale(factor: f64) -> TransformSpec {
        TransformSpec { kind: TransformKind::Scale, magnitude: factor, sampling: Sampling::Fixed }
    }

    /// Rescale drawn uniformly from 1 ± `range`.
    pub fn scale_pm(range: f64) -> TransformSpec {
        TransformSpec {
            kind: TransformKind::Scale,
            magnitude: 1.0,
            sampling: Sampling::Uniform { range },
        }
    }

    /// Fixed-quality JPEG round trip.
    pub fn jpeg(quality: u32) -> TransformSpec {
        TransformSpec {
            kind: TransformKind::Jpeg,
            magnitude: quality as f64,
            sampling: Sampling::Fixed,
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match self.sampling {
            Sampling::Fixed => (self.magnitude, self.magnitude),
            Sampling::Uniform { range } => (self.magnitude - range, self.magnitude + range),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds();
        if let Sampling::Uniform { range } = self.sampling {
            if !(range >= 0.0) {
                return Err(Error::param("TransformSpec", format!("range {range} must be >= 0")));
            }
        }
        match self.kind {
            TransformKind::None => Ok(()),
            TransformKind::Rotate if lo.abs() <= 180.0 && hi.abs() <= 180.0 => Ok(()),
            TransformKind::Rotate => Err(Error::param(
                "TransformSpec",
                format!("rotation range [{lo}, {hi}] exceeds ±180 degrees"),
            )),
            TransformKind::Scale if lo >= 0.5 && hi <= 2.0 => Ok(()),
            TransformKind::Scale => Err(Error::param(
                "TransformSpec",
                format!("scale range [{lo}, {hi}] outside [0.5, 2]"),
            )),
            TransformKind::Jpeg if lo >= 1.0 && hi <= 100.0 => Ok(()),
            TransformKind::Jpeg => Err(Error::param(
                "TransformSpec",
                format!("quality range [{lo}, {hi}] outside [1, 100]"),
            )),
        }
    }

    /// Draw one trial magnitude.
    pub fn sample_magnitude(&self, rng: &mut Rng) -> f64 {
        match self.sampling {
            Sampling::Fixed => self.magnitude,
            Sampling::Uniform { range } => {
                rng.uniform_f64(self.magnitude - range, self.magnitude + range)
            }
        }
    }

    /// Apply the transform at a sampled magnitude. Genuine resampling is
    /// followed by 8-bit re-quantization; identity cases (kind `none`,
    /// rotation 0, scale 1) return the input bit-for-bit.
    pub fn apply(&self, x: &Tensor, magnitude: f64) -> Result<Tensor> {
        match self.kind {
            TransformKind::None => Ok(x.clone()),
            TransformKind::Rotate if magnitude == 0.0 => Ok(x.clone()),
            TransformKind::Rotate => Ok(requantize_8bit(&rotate(x, magnitude)?)),
            TransformKind::Scale if magnitude == 1.0 => Ok(x.clone()),
            TransformKind::Scale => Ok(requantize_8bit(&scale(x, magnitude)?)),
            TransformKind::Jpeg => {
                Ok(requantize_8bit(&jpeg_roundtrip(x, magnitude.round() as u32)?))
            }
        }
    }

    /// Parse the textual form used on command lines; the grammar is the
    /// inverse of [`TransformSpec::label`]: `none`, `rotate2`, `rotate_pm2`,
    /// `rotate1_pm2`, `scale1.02`, `scale_pm0.02`, `jpeg80`, `jpeg80_pm10`.
    /// The result is validated.
    pub fn parse(text: &str) -> Result<TransformSpec> {
        fn split(rest: &str, center_default: f64) -> Result<(f64, Sampling)> {
            let (mag_text, range_text) = match rest.split_once("_pm") {
                Some((m, r)) => (m, Some(r)),
                None => (rest, None),
            };
            let magnitude = if mag_text.is_empty() {
                if range_text.is_some() {
                    center_default
                } else {
                    return Err(Error::param("TransformSpec::parse", "missing magnitude"));
                }
            } else {
                mag_text.parse::<f64>().map_err(|e| {
                    Error::param("TransformSpec::parse", format!("bad magnitude {mag_text:?}: {e}"))
                })?
            };
            let sampling = match range_text {
                None => Sampling::Fixed,
                Some(r) => Sampling::Uniform {
                    range: r.parse::<f64>().map_err(|e| {
                        Error::param("TransformSpec::parse", format!("bad range {r:?}: {e}"))
                    })?,
                },
            };
            Ok((magnitude, sampling))
        }
        let spec = if text == "none" {
            TransformSpec::none()
        } else if let Some(rest) = text.strip_prefix("rotate") {
            let (magnitude, sampling) = split(rest, 0.0)?;
            TransformSpec { kind: TransformKind::Rotate, magnitude, sampling }
        } else if let Some(rest) = text.strip_prefix("scale") {
            let (magnitude, sampling) = split(rest, 1.0)?;
            TransformSpec { kind: TransformKind::Scale, magnitude, sampling }
        } else if let Some(rest) = text.strip_prefix("jpeg") {
            let (magnitude, sampling) = split(rest, 0.0)?;
            if matches!(sampling, Sampling::Uniform { .. }) && rest.starts_with("_pm") {
                return Err(Error::param("TransformSpec::parse", "jpeg needs a center quality"));
            }
            TransformSpec { kind: TransformKind::Jpeg, magnitude, sampling }
        } else {
            return Err(Error::param(
                "TransformSpec::parse",
                format!("unknown transform {text:?}; expected none/rotate/scale/jpeg forms"),
            ));
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Column label used in reports, e.g. `none`, `rotate_pm2.00`, `jpeg80`.
    pub fn label(&self) -> String {
        match (self.kind, self.sampling) {
            (TransformKind::None, _) => "none".into(),
            (TransformKind::Rotate, Sampling::Fixed) => format!("rotate{:.2}", self.magnitude),
            (TransformKind::Rotate, Sampling::Uniform { range }) if self.magnitude == 0.0 => {
                format!("rotate_pm{range:.2}")
            }
            (TransformKind::Rotate, Sampling::Uniform { range }) => {
                format!("rotate{:.2}_pm{range:.2}", self.magnitude)
            }
            (TransformKind::Scale, Sampling::Fixed) => format!("scale{:.3}", self.magnitude),
            (TransformKind::Scale, Sampling::Uniform { range }) if self.magnitude == 1.0 => {
                format!("scale_pm{range:.3}")
            }
            (TransformKind::Scale, Sampling::Uniform { range }) => {
                format!("scale{:.3}_pm{range:.3}", self.magnitude)
            }
            (TransformKind::Jpeg, Sampling::Fixed) => format!("jpeg{:.0}", self.magnitude),
            (TransformKind::Jpeg, Sampling::Uniform { range }) => {
                format!("jpeg{:.0}_pm{range:.0}", self.magnitude)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Perceptibility
// ---------------------------------------------------------------------------

/// (L2, L∞, PSNR) of the difference `x_adv − x`; identical images report
/// PSNR = +∞.
pub fn perceptibility_metrics(x: &Tensor, x_adv: &Tensor) -> Result<(f64, f64, f64)> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape(
            "perceptibility_metrics",
            format!("shape {:?} vs {:?}", x.shape(), x_adv.shape()),
        ));
    }
    let mut l2 = 0.0f64;
    let mut linf = 0.0f64;
    for (&a, &b) in x.data().iter().zip(x_adv.data()) {
        let d = (b as f64 - a as f64).abs();
        l2 += d * d;
        linf = linf.max(d);
    }
    Ok((l2.sqrt(), linf, psnr(x, x_adv)?))
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// The eight attack methods the harness can drive uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fgsm,
    FgsmIter,
    Mifgsm,
    Lbfgs,
    Cw,
    Smm,
    Deepfool,
    Dip,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Fgsm,
        Method::FgsmIter,
        Method::Mifgsm,
        Method::Lbfgs,
        Method::Cw,
        Method::Smm,
        Method::Deepfool,
        Method::Dip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::FgsmIter => "fgsm-iter",
            Method::Mifgsm => "mifgsm",
            Method::Lbfgs => "lbfgs",
            Method::Cw => "cw",
            Method::Smm => "smm",
            Method::Deepfool => "deepfool",
            Method::Dip => "dip",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == name).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::param("method", format!("unknown method {name:?}, expected one of {valid:?}"))
        })
    }

    /// Whether the method aims at a specific class (all but the untargeted
    /// linearization attack).
    pub fn is_targeted(self) -> bool {
        !matches!(self, Method::Deepfool)
    }

    /// Run this method on one image. `label` is the model's (correct)
    /// prediction on `x`, `target` the desired class for targeted methods,
    /// and `seed` feeds the stochastic methods.
    pub fn run(
        self,
        f: &ClassifierModel,
        x: &Tensor,
        label: usize,
        target: usize,
        seed: u64,
        cfg: &MethodConfig,
    ) -> Result<AttackResult> {
        match self {
            Method::Fgsm => fgsm(f, x, LossTarget::Toward(target), &FgsmConfig::single(cfg.fgsm_eps)),
            Method::FgsmIter => fgsm_iterative(
                f,
                x,
                LossTarget::Toward(target),
                &FgsmConfig::iterative(cfg.fgsm_eps, cfg.fgsm_steps),
            ),
            Method::Mifgsm => momentum_iterative(
                f,
                x,
                LossTarget::Toward(target),
                &FgsmConfig::momentum(cfg.fgsm_eps, cfg.fgsm_steps, cfg.fgsm_momentum),
            ),
            Method::Lbfgs => lbfgs_attack(f, x, target),
            Method::Cw => cw_attack(f, x, target, &cfg.cw),
            Method::Smm => smm_attack(f, x, target, cfg.smm_step, cfg.smm_max_pixels, cfg.smm_use_logits),
            Method::Deepfool => deepfool(f, x, label, cfg.deepfool_max_iters, cfg.deepfool_use_logits),
            Method::Dip => dip_adversarial(
                x,
                f,
                &DipAttackConfig { target_class: target, true_label: label, seed, ..cfg.dip },
            ),
        }
    }
}

/// Per-method hyperparameters used by the evaluation grid. The generator
/// variant defaults to a width-32 net: identical architecture to the
/// full-width default, sized for 32x32 corpus throughput.
#[derive(Debug, Clone, Copy)]
pub struct MethodConfig {
    pub fgsm_eps: f32,
    pub fgsm_steps: usize,
    pub fgsm_momentum: f32,
    pub cw: CwConfig,
    pub smm_step: f32,
    pub smm_max_pixels: usize,
    pub smm_use_logits: bool,
    pub deepfool_max_iters: usize,
    pub deepfool_use_logits: bool,
    /// Template for the generator-based attack; `target_class`, `true_label`
    /// and `seed` are overridden per image.
    pub dip: DipAttackConfig,
}

impl Default for MethodConfig {
    fn default() -> MethodConfig {
        let mut dip = DipAttackConfig::new(0, 0, 0);
        dip.generator = GeneratorConfig { levels: 5, width: 32, skip_channels: 4, noise_channels: 32 };
        dip.max_iters = 1200;
        MethodConfig {
            fgsm_eps: 0.05,
            fgsm_steps: 10,
            fgsm_momentum: 1.0,
            cw: CwConfig::default(),
            smm_step: 0.25,
            smm_max_pixels: 300,
            smm_use_logits: false,
            deepfool_max_iters: 50,
            deepfool_use_logits: true,
            dip,
        }
    }
}

// ---------------------------------------------------------------------------
// Robustness grid
// ---------------------------------------------------------------------------

/// One (method, transform) cell: success rate over images × trials plus the
/// perceptibility of the untransformed adversarial images of that row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessCell {
    pub success_rate: f64,
    pub n: usize,
    pub l2_mean: f64,
    pub linf_mean: f64,
    pub psnr_mean: f64,
}

/// The full grid: `cells[row][col]` pairs `methods[row]` with
/// `transforms[col]`. Perceptibility columns repeat along a row because they
/// describe the attack, not the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub methods: Vec<String>,
    pub transforms: Vec<String>,
    pub cells: Vec<Vec<RobustnessCell>>,
    /// Mean attack wall-clock seconds per method row (not emitted to CSV).
    pub method_seconds: Vec<f64>,
    /// Images dropped because the classifier got them wrong before any attack.
    pub excluded: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Mean of the finite values, or +∞ when none are (all-identical images).
fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Run every method over every correctly-classified image (once, targeted at
/// a per-image random incorrect class shared across methods), then measure
/// how often each adversarial image survives each transform over `trials`
/// magnitude draws. Deterministic for a fixed seed regardless of thread
/// count.
pub fn evaluate_robustness(
    f: &ClassifierModel,
    methods: &[Method],
    images: &Dataset,
    transforms: &[TransformSpec],
    trials: usize,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<RobustnessReport> {
    if trials == 0 {
        return Err(Error::param("evaluate_robustness", "trials must be >= 1"));
    }
    if f.class_count() < 2 {
        return Err(Error::contract("evaluate_robustness", "need at least 2 classes"));
    }
    for t in transforms {
        t.validate()?;
    }
    let root = Rng::new(seed);

    // Keep only images the classifier already gets right.
    let mut kept: Vec<(Tensor, usize)> = Vec::new();
    let mut excluded = 0usize;
    for i in 0..images.len() {
        let x = images.image(i)?;
        let (pred, _, _) = f.classify(&x)?;
        if pred == images.labels[i] {
            kept.push((x, images.labels[i]));
        } else {
            excluded += 1;
        }
    }

    // Per-image random incorrect target, drawn once and shared across methods.
    let targets: Vec<usize> = kept
        .iter()
        .enumerate()
        .map(|(i, &(_, label))| {
            let mut rng = root.fork(STREAM_TARGETS).fork(i as u64);
            let t = rng.below(f.class_count() - 1);
            if t >= label {
                t + 1
            } else {
                t
            }
        })
        .collect();

    // Attack generation: the expensive, embarrassingly parallel part.
    let jobs: Vec<(usize, usize)> =
        (0..methods.len()).flat_map(|m| (0..kept.len()).map(move |i| (m, i))).collect();
    let results: Vec<AttackResult> = jobs
        .par_iter()
        .map(|&(m, i)| {
            let (x, label) = &kept[i];
            let atk_seed = root.fork(STREAM_ATTACKS).fork(i as u64).next_u64();
            methods[m].run(f, x, *label, targets[i], atk_seed, cfg)
        })
        .collect::<Result<_>>()?;
    let psnrs: Vec<f64> = results
        .iter()
        .enumerate()
        .map(|(j, r)| psnr(&kept[j % kept.len()].0, &r.x_adv))
        .collect::<Result<_>>()?;

    // Transform grid: classify every transformed adversarial image.
    let cell_indices: Vec<(usize, usize)> =
        (0..methods.len()).flat_map(|m| (0..transforms.len()).map(move |t| (m, t))).collect();
    let cells_flat: Vec<RobustnessCell> = cell_indices
        .par_iter()
        .map(|&(m, t)| {
            let spec = &transforms[t];
            let mut successes = 0usize;
            for i in 0..kept.len() {
                let res = &results[m * kept.len() + i];
                let (_, label) = kept[i];
                for k in 0..trials {
                    let mut rng =
                        root.fork(STREAM_TRIALS).fork(t as u64).fork(i as u64).fork(k as u64);
                    let magnitude = spec.sample_magnitude(&mut rng);
                    let transformed = spec.apply(&res.x_adv, magnitude)?;
                    let (pred, _, _) = f.classify(&transformed)?;
                    let ok = match res.target {
                        Some(target) => pred == target,
                        None => pred != label,
                    };
                    if ok {
                        successes += 1;
                    }
                }
            }
            let row = &results[m * kept.len()..(m + 1) * kept.len()];
            let n = kept.len() * trials;
            Ok(RobustnessCell {
                success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
                n,
                l2_mean: finite_mean(row.iter().map(|r| r.l2)),
                linf_mean: finite_mean(row.iter().map(|r| r.linf)),
                psnr_mean: finite_mean(
                    psnrs[m * kept.len()..(m + 1) * kept.len()].iter().copied(),
                ),
            })
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(methods.len());
    for m in 0..methods.len() {
        cells.push(cells_flat[m * transforms.len()..(m + 1) * transforms.len()].to_vec());
    }
    let method_seconds = (0..methods.len())
        .map(|m| {
            finite_mean(results[m * kept.len()..(m + 1) * kept.len()].iter().map(|r| r.seconds))
        })
        .collect();
    Ok(RobustnessReport {
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        transforms: transforms.iter().map(|t| t.label()).collect(),
        cells,
        method_seconds,
        excluded,
        trials,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Patch evaluation
// ---------------------------------------------------------------------------

/// Success of one pasted patch (trained or control) per area fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCurve {
    pub attack_class: usize,
    pub areas: Vec<f64>,
    pub trained: Vec<RobustnessCell>,
    pub control: Vec<RobustnessCell>,
    /// Images evaluated per cell (attack-class images are excluded).
    pub n: usize,
    pub seed: u64,
}

/// Rescale a patch render to cover `area` of an `h`x`w` image, preserving the
/// patch aspect ratio and clamping to the image bounds.
fn area_dims(area: f64, ph: usize, pw: usize, h: usize, w: usize) -> (usize, usize) {
    let s = (area * (h * w) as f64 / (ph * pw) as f64).sqrt();
    let th = ((ph as f64 * s).round() as usize).clamp(1, h);
    let tw = ((pw as f64 * s).round() as usize).clamp(1, w);
    (th, tw)
}

/// Paste `render` (masked by the all-ones rectangle of its own shape) at a
/// random location on every non-attack-class image, at each area fraction,
/// and record how often the classifier flips to `attack_class`. The control
/// row repeats the protocol with a rendered exemplar of the attack class at
/// identical paste locations.
pub fn patch_success_curve(
    render: &Tensor,
    attack_class: usize,
    f: &ClassifierModel,
    test: &Dataset,
    areas: &[f64],
    seed: u64,
) -> Result<PatchCurve> {
    let (_, ph, pw) = require_chw("patch_success_curve", render)?;
    if attack_class >= f.class_count() {
        return Err(Error::param(
            "patch_success_curve",
            format!("attack class {attack_class} >= {} classes", f.class_count()),
        ));
    }
    for &a in areas {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::param("patch_success_curve", format!("area {a} outside (0, 1]")));
        }
    }
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] != attack_class).collect();
    if keep.is_empty() {
        return Err(Error::contract("patch_success_curve", "no non-attack-class test images"));
    }
    let side = test.side();
    // One deterministic exemplar of the attack class, rendered at test-image
    // resolution and rescaled per area exactly like the trained patch.
    let exemplar = synth_dataset(f.class_count().min(10), 1, side.max(16), seed)?
        .image(attack_class)?;
    let root = Rng::new(seed);

    let mut curve = PatchCurve {
        attack_class,
        areas: areas.to_vec(),
        trained: Vec::with_capacity(areas.len()),
        control: Vec::with_capacity(areas.len()),
        n: keep.len(),
        seed,
    };
    for (ai, &area) in areas.iter().enumerate() {
        let (th, tw) = area_dims(area, ph, pw, side, side);
        let patch_scaled = resize_bilinear(render, th, tw)?;
        let exemplar_scaled = resize_bilinear(&exemplar, th, tw)?;
        let ones = Tensor::from_vec(vec![th, tw], vec![1.0; th * tw])?;
        let run = |paste: &Tensor| -> Result<RobustnessCell> {
            let mut successes = 0usize;
            let mut l2s = Vec::with_capacity(keep.len());
            let mut linfs = Vec::with_capacity(keep.len());
            let mut psnrs = Vec::with_capacity(keep.len());
            for (j, &i) in keep.iter().enumerate() {
                let x = test.image(i)?;
                let mut rng = root.fork(STREAM_OFFSETS).fork(ai as u64).fork(j as u64);
                let offset = (rng.below(side - th + 1), rng.below(side - tw + 1));
                let patched = composite(&x, paste, &ones, offset)?;
                if f.classify(&patched)?.0 == attack_class {
                    successes += 1;
                }
                let (l2, linf, p) = perceptibility_metrics(&x, &patched)?;
                l2s.push(l2);
                linfs.push(linf);
                psnrs.push(p);
            }
            Ok(RobustnessCell {
                success_rate: successes as f64 / keep.len() as f64,
                n: keep.len(),
                l2_mean: finite_mean(l2s.into_iter()),
                linf_mean: finite_mean(linfs.into_iter()),
                psnr_mean: finite_mean(psnrs.into_iter()),
            })
        };
        curve.trained.push(run(&patch_scaled)?);
        curve.control.push(run(&exemplar_scaled)?);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

const CSV_HEADER: &str = "method,transform,success_rate,n,l2_mean,linf_mean,psnr_mean";

fn csv_row(out: &mut String, method: &str, transform: &str, cell: &RobustnessCell) {
    let _ = writeln!(
        out,
        "{method},{transform},{:.4},{},{:.6},{:.6},{:.4}",
        cell.success_rate, cell.n, cell.l2_mean, cell.linf_mean, cell.psnr_mean
    );
}

/// CSV rendering of the robustness grid, one row per (method, transform).
pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (m, method) in report.methods.iter().enumerate() {
        for (t, transform) in report.transforms.iter().enumerate() {
            csv_row(&mut out, method, transform, &report.cells[m][t]);
        }
    }
    out
}

/// CSV rendering of a patch curve: rows `patch,<area>` then `control,<area>`.
pub fn patch_curve_csv(curve: &PatchCurve) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (rows, name) in [(&curve.trained, "patch"), (&curve.control, "control")] {
        for (ai, cell) in rows.iter().enumerate() {
            csv_row(&mut out, name, &format!("area{:.2}", curve.areas[ai]), cell);
        }
    }
    out
}

/// Parse a CSV produced by [`robustness_csv`] back into a report (method and
/// transform order as first seen). Fields that the CSV does not carry
/// (excluded count, trials, seed, timing) come back zeroed; re-emission of
/// CSV and SVG is byte-faithful.
pub fn parse_robustness_csv(text: &str) -> Result<RobustnessReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::format(
                "parse_robustness_csv",
                format!("expected header {CSV_HEADER:?}, got {other:?}"),
            ));
        }
    }
    let mut methods: Vec<String> = Vec::new();
    let mut transforms: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, usize, RobustnessCell)> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::format(
                "parse_robustness_csv",
                format!("row {}: expected 7 fields, got {}", ln + 2, fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                Error::format("parse_robustness_csv", format!("row {}: {s:?}: {e}", ln + 2))
            })
        };
        let m = match methods.iter().position(|m| m == fields[0]) {
            Some(i) => i,
            None => {
                methods.push(fields[0].to_string());
                methods.len() - 1
            }
        };
        let t = match transforms.iter().position(|t| t == fields[1]) {
            Some(i) => i,
            None => {
                transforms.push(fields[1].to_string());
                transforms.len() - 1
            }
        };
        let cell = RobustnessCell {
            success_rate: num(fields[2])?,
            n: num(fields[3])? as usize,
            l2_mean: num(fields[4])?,
            linf_mean: num(fields[5])?,
            psnr_mean: num(fields[6])?,
        };
        rows.push((m, t, cell));
    }
    let empty = RobustnessCell { success_rate: 0.0, n: 0, l2_mean: 0.0, linf_mean: 0.0, psnr_mean: 0.0 };
    let mut cells = vec![vec![empty; transforms.len()]; methods.len()];
    for (m, t, cell) in rows {
        cells[m][t] = cell;
    }
    Ok(RobustnessReport {
        method_seconds: vec![0.0; methods.len()],
        methods,
        transforms,
        cells,
        excluded: 0,
        trials: 0,
        seed: 0,
    })
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

struct SvgFrame {
    body: String,
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

/// Shared chart scaffolding: white canvas, axes, y ticks every 0.25 in [0,1].
fn svg_frame(x_label: &str) -> SvgFrame {
    let (left, top, width, height) = (60.0, 20.0, 400.0, 330.0);
    let mut body = String::new();
    let _ = writeln!(
        body,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="410" viewBox="0 0 640 410" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(body, r#"<rect x="0" y="0" width="640" height="410" fill="white"/>"#);
    let _ = writeln!(
        body,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + height
    );
    let _ = writeln!(
        body,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + height,
        left + width,
        top + height
    );
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let y = top + height * (1.0 - v);
        let _ = writeln!(
            body,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/>"#,
            left - 4.0
        );
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        body,
        r#"<text x="{:.1}" y="400" text-anchor="middle">{x_label}</text>"#,
        left + width / 2.0
    );
    let _ = writeln!(
        body,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">success rate</text>"#,
        top + height / 2.0,
        top + height / 2.0
    );
    SvgFrame { body, left, top, width, height }
}

fn svg_polyline(frame: &mut SvgFrame, points: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = points
        .iter()
        .map(|&(fx, rate)| {
            format!(
                "{:.1},{:.1}",
                frame.left + frame.width * fx,
                frame.top + frame.height * (1.0 - rate.clamp(0.0, 1.0))
            )
        })
        .collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        frame.body,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
        coords.join(" ")
    );
    for c in &coords {
        let (px, py) = c.split_once(',').expect("formatted above");
        let _ = writeln!(frame.body, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
    }
}

fn svg_legend(frame: &mut SvgFrame, names: &[(String, &str, bool)]) {
    for (i, (name, color, dashed)) in names.iter().enumerate() {
        let y = frame.top + 10.0 + i as f64 * 18.0;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            frame.body,
            r#"<line x1="480" y1="{y:.1}" x2="508" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/>"#
        );
        let _ = writeln!(frame.body, r#"<text x="514" y="{:.1}">{name}</text>"#, y + 4.0);
    }
}

fn svg_finish(mut frame: SvgFrame) -> String {
    frame.body.push_str("</svg>\n");
    frame.body
}

/// Hand-emitted SVG line chart: one polyline per method across the transform
/// columns.
pub fn robustness_svg(report: &RobustnessReport) -> String {
    let mut frame = svg_frame("transform");
    let cols = report.transforms.len();
    for (t, label) in report.transforms.iter().enumerate() {
        let x = frame.left + frame.width * col_x(t, cols);
        let _ = writeln!(
            frame.body,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            frame.top + frame.height + 16.0
        );
    }
    let mut legend = Vec::new();
    for (m, name) in report.methods.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        let points: Vec<(f64, f64)> = report.cells[m]
            .iter()
            .enumerate()
            .map(|(t, cell)| (col_x(t, cols), cell.success_rate))
            .collect();
        svg_polyline(&mut frame, &points, color, false);
        legend.push((name.clone(), color, false));
    }
    svg_legend(&mut frame, &legend);
    svg_finish(frame)
}

fn col_x(t: usize, cols: usize) -> f64 {
    if cols <= 1 {
        0.5
    } else {
        t as f64 / (cols - 1) as f64
    }
}

/// Hand-emitted SVG of a patch curve: trained patch (solid) vs. exemplar
/// control (dashed) across area fractions.
pub fn patch_curve_svg(curve: &PatchCurve) -> String {
    let mut frame = svg_frame("patch area fraction");
    let (lo, hi) = curve.areas.iter().fold((f64::MAX, f64::MIN), |(l, h), &a| (l.min(a), h.max(a)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &a in &curve.areas {
        let x = frame.left + frame.width * ((a - lo) / span);
        let _ = writeln!(
            frame.body,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{a:.2}</text>"#,
            frame.top + frame.height + 16.0
        );
    }
    let series = |cells: &[RobustnessCell]| -> Vec<(f64, f64)> {
        curve
            .areas
            .iter()
            .zip(cells)
            .map(|(&a, cell)| ((a - lo) / span, cell.success_rate))
            .collect()
    };
    svg_polyline(&mut frame, &series(&curve.trained), PALETTE[0], false);
    svg_polyline(&mut frame, &series(&curve.control), PALETTE[1], true);
    svg_legend(
        &mut frame,
        &[("patch".to_string(), PALETTE[0], false), ("control".to_string(), PALETTE[1], true)],
    );
    svg_finish(frame)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), &e))
}

/// Write the grid report as CSV + SVG. Byte output is a pure function of the
/// report contents.
pub fn emit_robustness(
    report: &RobustnessReport,
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
) -> Result<()> {
    write_text(csv_path.as_ref(), &robustness_csv(report))?;
    write_text(svg_path.as_ref(), &robustness_svg(report))
}

/// Write a patch curve as CSV + SVG. Byte output is a pure function of the
/// curve contents.
pub fn emit_patch_curve(
    curve: &PatchCurve,
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
) -> Result<()> {
    write_text(csv_path.as_ref(), &patch_curve_csv(curve))?;
    write_text(svg_path.as_ref(), &patch_curve_svg(curve))
}

// ---------------------------------------------------------------------------
// Parallelism cap
// ---------------------------------------------------------------------------

/// Run `f` under the thread cap in `ADVDIP_THREADS` (unset or unparsable
/// values fall back to the default global pool).
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("ADVDIP_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(n) if n >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool construction cannot fail for n >= 1")
            .install(f),
        _ => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{synth_landscape, train_classifier};
    use crate::nn::{Activation, LayerSpec};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn ramp_image(side: usize) -> Tensor {
        let n = 3 * side * side;
        let data: Vec<f32> = (0..n).map(|i| i as f32 / (n - 1) as f32).collect();
        Tensor::from_vec(vec![3, side, side], data).unwrap()
    }

    fn mae(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.len() as f64
    }

    /// MAE restricted to the central half of the image (away from
    /// clamp-to-edge contamination).
    fn central_mae(a: &Tensor, b: &Tensor) -> f64 {
        let s = a.shape();
        let (h, w) = (s[1], s[2]);
        let (h0, h1, w0, w1) = (h / 4, 3 * h / 4, w / 4, 3 * w / 4);
        let plane = h * w;
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..3 {
            for r in h0..h1 {
                for c in w0..w1 {
                    let i = k * plane + r * w + c;
                    sum += (a.data()[i] as f64 - b.data()[i] as f64).abs();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    // -- rotation ----------------------------------------------------------

    #[test]
    fn rotate_zero_is_bitwise_identity() {
        let x = ramp_image(9);
        let y = rotate(&x, 0.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rotate_quarter_turn_maps_pixels_exactly() {
        // 5x5 with a single bright pixel: at ±90° the sampling positions are
        // integral, so bilinear interpolation degenerates to a permutation
        // (up to the ~1e-17 residue of representing π/2 in binary).
        let side = 5;
        let mut data = vec![0.0f32; 3 * side * side];
        data[1 * side + 3] = 1.0; // channel 0, row 1, col 3
        let x = Tensor::from_vec(vec![3, side, side], data).unwrap();
        let y = rotate(&x, 90.0).unwrap();
        // Inverse map at 90°: src = (4 - col, row). The bright source (1,3)
        // therefore appears exactly at output (row 3, col 3).
        let plane = side * side;
        for r in 0..side {
            for c in 0..side {
                let expect = if (r, c) == (3, 3) { 1.0f32 } else { 0.0 };
                let got = y.data()[r * side + c];
                assert!((got - expect).abs() < 1e-9, "at ({r},{c}): {got} vs {expect}");
                assert!(y.data()[plane + r * side + c].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotate_round_trip_recovers_center() {
        let x = synth_landscape(32, 4).unwrap();
        let back = rotate(&rotate(&x, 90.0).unwrap(), -90.0).unwrap();
        assert!(central_mae(&x, &back) <= 2.0 / 255.0, "mae {}", central_mae(&x, &back));
    }

    #[test]
    fn rotate_rejects_out_of_range_angles() {
        let x = ramp_image(8);
        assert!(matches!(rotate(&x, 180.5), Err(Error::Param { .. })));
        assert!(matches!(rotate(&x, f64::NAN), Err(Error::Param { .. })));
        let flat = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(rotate(&flat, 1.0), Err(Error::Shape { .. })));
    }

    // -- scaling -----------------------------------------------------------

    #[test]
    fn scale_identity_is_bitwise() {
        let x = ramp_image(7);
        assert_eq!(scale(&x, 1.0).unwrap().data(), x.data());
    }

    #[test]
    fn scale_round_trip_recovers_center() {
        let x = synth_landscape(32, 8).unwrap();
        let back = scale(&scale(&x, 2.0).unwrap(), 0.5).unwrap();
        assert!(central_mae(&x, &back) <= 2.0 / 255.0, "mae {}", central_mae(&x, &back));
    }

    #[test]
    fn scale_rejects_out_of_range_factors() {
        let x = ramp_image(8);
        assert!(matches!(scale(&x, 0.49), Err(Error::Param { .. })));
        assert!(matches!(scale(&x, 2.01), Err(Error::Param { .. })));
    }

    #[test]
    fn resize_recovers_identity_and_dims() {
        let x = ramp_image(8);
        assert_eq!(resize_bilinear(&x, 8, 8).unwrap().data(), x.data());
        let up = resize_bilinear(&x, 12, 20).unwrap();
        assert_eq!(up.shape(), [3, 12, 20]);
        assert!(matches!(resize_bilinear(&x, 0, 4), Err(Error::Param { .. })));
    }

    // -- jpeg --------------------------------------------------------------

    #[test]
    fn jpeg_constant_gray_reproduces_hand_quantized_dc() {
        // Gray 127.5/255: Y plane is constant −0.5 after the level shift, so
        // the DC coefficient is 0.25·(1/2)·(−0.5·64) = −4. At quality 80 the
        // scaled luminance quantizer for DC is floor((16·40+50)/100) = 6,
        // round(−4/6)·6 = −6, and the reconstruction is a constant
        // 0.25·(1/2)·(−6) = −0.75, i.e. 127.25 after the shift back. The
        // chroma planes are exactly zero and stay zero.
        let x = Tensor::from_vec(vec![3, 16, 16], vec![0.5; 3 * 256]).unwrap();
        let y = jpeg_roundtrip(&x, 80).unwrap();
        for &v in y.data() {
            assert!((v as f64 - 127.25 / 255.0).abs() < 1e-6, "pixel {v}");
        }
    }

    #[test]
    fn jpeg_constant_image_error_bounded_by_dc_quantizer() {
        // For a constant gray image every AC coefficient is zero, the chroma
        // planes are exactly zero, and the only error source is rounding the
        // luminance DC coefficient (8·shifted-gray) to a multiple of the
        // scaled DC quantizer. The reconstruction error is therefore at most
        // (quantizer/2)/8 gray levels — within one 8-bit level whenever the
        // scaled DC quantizer is ≤ 16, i.e. for every quality ≥ 50. The bound
        // is re-derived here from the published base value (16) and the
        // conventional scaling, independent of the implementation's tables.
        for q in [1u32, 10, 35, 50, 80, 100] {
            let s = if q < 50 { 5000 / q as u64 } else { 200 - 2 * q as u64 };
            let dc_quant = ((16 * s + 50) / 100).clamp(1, 255) as f64;
            let bound = dc_quant / 16.0 / 255.0 + 1e-9;
            for gray in [0.43f32, 0.5, 0.77] {
                let x = Tensor::from_vec(vec![3, 8, 8], vec![gray; 192]).unwrap();
                let y = jpeg_roundtrip(&x, q).unwrap();
                let worst = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst <= bound, "q={q} gray={gray} worst {worst} bound {bound}");
                if q >= 50 {
                    assert!(worst <= 1.0 / 255.0, "q={q} gray={gray} worst {worst}");
                }
            }
        }
    }

    #[test]
    fn jpeg_quality_100_nearly_lossless_on_texture() {
        let x = synth_landscape(32, 5).unwrap();
        let y = jpeg_roundtrip(&x, 100).unwrap();
        assert!(mae(&x, &y) < 2.0 / 255.0, "mae {}", mae(&x, &y));
    }

    #[test]
    fn jpeg_is_idempotent_within_one_level() {
        let x = synth_landscape(32, 6).unwrap();
        let once = jpeg_roundtrip(&x, 80).unwrap();
        let twice = jpeg_roundtrip(&once, 80).unwrap();
        assert!(mae(&once, &twice) <= 1.0 / 255.0, "mae {}", mae(&once, &twice));
    }

    #[test]
    fn jpeg_low_quality_is_genuinely_lossy() {
        let x = synth_landscape(32, 7).unwrap();
        let y = jpeg_roundtrip(&x, 10).unwrap();
        assert!(mae(&x, &y) > 1.0 / 255.0, "mae {}", mae(&x, &y));
    }

    #[test]
    fn jpeg_rejects_out_of_range_quality() {
        let x = ramp_image(8);
        assert!(matches!(jpeg_roundtrip(&x, 0), Err(Error::Param { .. })));
        assert!(matches!(jpeg_roundtrip(&x, 101), Err(Error::Param { .. })));
    }

    #[test]
    fn quality_scaling_matches_convention() {
        // q=50 leaves the base table unchanged; q=100 floors everything to 1.
        assert_eq!(scaled_table(&Q_LUMA, 50)[0], 16.0);
        assert!(scaled_table(&Q_LUMA, 100).iter().all(|&v| v == 1.0));
        // q=10 scales by 500%: 16 -> floor((16*500+50)/100) = 80.
        assert_eq!(scaled_table(&Q_LUMA, 10)[0], 80.0);
    }

    #[test]
    fn dct_round_trips_random_blocks() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..4 {
            let mut block = [0.0f64; 64];
            for v in block.iter_mut() {
                *v = rng.uniform_f64(-128.0, 127.0);
            }
            let rec = idct8(&dct8(&block));
            for (a, b) in block.iter().zip(&rec) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    // -- requantization ----------------------------------------------------

    #[test]
    fn requantize_snaps_to_grid_and_is_idempotent() {
        let x = Tensor::from_vec(vec![1, 1, 4], vec![0.5, 0.0, 1.0, 0.123]).unwrap();
        let q = requantize_8bit(&x);
        assert_eq!(q.data()[0], 128.0 / 255.0);
        assert_eq!(q.data()[1], 0.0);
        assert_eq!(q.data()[2], 1.0);
        for &v in q.data() {
            let scaled = v * 255.0;
            assert_eq!(scaled, scaled.round());
        }
        assert_eq!(requantize_8bit(&q).data(), q.data());
    }

    // -- transform specs ----------------------------------------------------

    #[test]
    fn spec_validation_enforces_ranges() {
        assert!(TransformSpec::none().validate().is_ok());
        assert!(TransformSpec::rotate_pm(2.0).validate().is_ok());
        assert!(TransformSpec::rotate(181.0).validate().is_err());
        assert!(TransformSpec::scale_pm(0.02).validate().is_ok());
        assert!(TransformSpec::scale_pm(0.6).validate().is_err());
        assert!(TransformSpec::scale(0.0).validate().is_err());
        assert!(TransformSpec::jpeg(80).validate().is_ok());
        assert!(TransformSpec::jpeg(0).validate().is_err());
        assert!(TransformSpec::jpeg(101).validate().is_err());
        let neg = TransformSpec {
            kind: TransformKind::Rotate,
            magnitude: 0.0,
            sampling: Sampling::Uniform { range: -1.0 },
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn spec_sampling_is_deterministic_and_bounded() {
        let spec = TransformSpec::rotate_pm(2.0);
        let mut a = crate::rng::Rng::new(7);
        let mut b = crate::rng::Rng::new(7);
        for _ in 0..32 {
            let m = spec.sample_magnitude(&mut a);
            assert_eq!(m, spec.sample_magnitude(&mut b));
            assert!((-2.0..2.0).contains(&m));
        }
        let fixed = TransformSpec::jpeg(80);
        assert_eq!(fixed.sample_magnitude(&mut a), 80.0);
    }

    #[test]
    fn spec_apply_identity_cases_are_bitwise() {
        let x = ramp_image(8); // not 8-bit aligned, so requantization would show
        for spec in [TransformSpec::none(), TransformSpec::rotate(0.0), TransformSpec::scale(1.0)] {
            let m = spec.magnitude;
            assert_eq!(spec.apply(&x, m).unwrap().data(), x.data(), "{:?}", spec.kind);
        }
    }

    #[test]
    fn spec_apply_requantizes_genuine_transforms() {
        let x = synth_landscape(16, 2).unwrap();
        for (spec, m) in [
            (TransformSpec::rotate(5.0), 5.0),
            (TransformSpec::scale(1.1), 1.1),
            (TransformSpec::jpeg(80), 80.0),
        ] {
            let y = spec.apply(&x, m).unwrap();
            for &v in y.data() {
                let scaled = v * 255.0;
                assert_eq!(scaled, scaled.round(), "{:?} not on the 8-bit grid", spec.kind);
            }
        }
    }

    #[test]
    fn spec_labels_are_stable() {
        assert_eq!(TransformSpec::none().label(), "none");
        assert_eq!(TransformSpec::rotate_pm(2.0).label(), "rotate_pm2.00");
        assert_eq!(TransformSpec::rotate(1.5).label(), "rotate1.50");
        assert_eq!(TransformSpec::scale_pm(0.02).label(), "scale_pm0.020");
        assert_eq!(TransformSpec::jpeg(80).label(), "jpeg80");
    }

    #[test]
    fn spec_parse_accepts_label_grammar() {
        for (text, expect) in [
            ("none", TransformSpec::none()),
            ("rotate2", TransformSpec::rotate(2.0)),
            ("rotate_pm2", TransformSpec::rotate_pm(2.0)),
            ("scale1.02", TransformSpec::scale(1.02)),
            ("scale_pm0.02", TransformSpec::scale_pm(0.02)),
            ("jpeg80", TransformSpec::jpeg(80)),
        ] {
            assert_eq!(TransformSpec::parse(text).unwrap(), expect, "{text}");
        }
        let mixed = TransformSpec::parse("rotate1_pm0.5").unwrap();
        assert_eq!(mixed.magnitude, 1.0);
        assert_eq!(mixed.sampling, Sampling::Uniform { range: 0.5 });
        let jpeg_range = TransformSpec::parse("jpeg80_pm10").unwrap();
        assert_eq!(jpeg_range.magnitude, 80.0);
        for bad in ["blur3", "rotate", "rotate999", "jpeg_pm5", "jpeg0", "scale-1", "scalex"] {
            assert!(TransformSpec::parse(bad).is_err(), "{bad} should fail");
        }
    }

    #[test]
    fn csv_round_trips_through_parser() {
        let report = fixed_report();
        let csv = robustness_csv(&report);
        let parsed = parse_robustness_csv(&csv).unwrap();
        assert_eq!(parsed.methods, report.methods);
        assert_eq!(parsed.transforms, report.transforms);
        assert_eq!(robustness_csv(&parsed), csv);
        assert_eq!(robustness_svg(&parsed), robustness_svg(&report));
        assert!(matches!(parse_robustness_csv("bogus\n"), Err(Error::Format { .. })));
        assert!(matches!(
            parse_robustness_csv("method,transform,success_rate,n,l2_mean,linf_mean,psnr_mean\na,b,c\n"),
            Err(Error::Format { .. })
        ));
    }

    // -- perceptibility ------------------------------------------------------

    #[test]
    fn perceptibility_trivial_cases() {
        let x = ramp_image(8);
        let (l2, linf, p) = perceptibility_metrics(&x, &x).unwrap();
        assert_eq!((l2, linf), (0.0, 0.0));
        assert!(p.is_infinite() && p > 0.0);

        let mut y = x.clone();
        y.data_mut()[10] += 0.5;
        let (l2, linf, _) = perceptibility_metrics(&x, &y).unwrap();
        assert!((l2 - 0.5).abs() < 1e-6);
        assert!((linf - 0.5).abs() < 1e-6);

        let other = ramp_image(9);
        assert!(matches!(perceptibility_metrics(&x, &other), Err(Error::Shape { .. })));
    }

    #[test]
    fn psnr_forty_db_is_mse_ten_to_minus_four() {
        // Uniform difference of 0.01 gives MSE 1e-4 exactly.
        let side = 8;
        let x = Tensor::from_vec(vec![3, side, side], vec![0.3; 192]).unwrap();
        let y = Tensor::from_vec(vec![3, side, side], vec![0.31; 192]).unwrap();
        let (_, _, p) = perceptibility_metrics(&x, &y).unwrap();
        assert!((p - 40.0).abs() < 1e-3, "psnr {p}");
    }

    // -- methods -------------------------------------------------------------

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(matches!(Method::parse("pgd"), Err(Error::Param { .. })));
        assert!(Method::Deepfool.is_targeted() == false);
        assert!(Method::Dip.is_targeted());
    }

    // -- robustness grid -----------------------------------------------------

    /// 16x16 red-vs-blue circles and a tiny trained stack, built once.
    fn grid_fixture() -> &'static (ClassifierModel, Dataset) {
        static FIX: OnceLock<(ClassifierModel, Dataset)> = OnceLock::new();
        FIX.get_or_init(|| {
            let ten = synth_dataset(10, 24, 16, 808).unwrap();
            let keep: Vec<usize> =
                (0..ten.len()).filter(|&i| ten.labels[i] == 0 || ten.labels[i] == 5).collect();
            let mut data = ten.select(&keep).unwrap();
            for y in data.labels.iter_mut() {
                *y = usize::from(*y == 5);
            }
            data.class_names = vec!["circle-red".into(), "circle-blue".into()];
            let spec = vec![
                LayerSpec::Conv { in_ch: 3, out_ch: 8, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Activation { act: Activation::LeakyRelu(0.1) },
                LayerSpec::Conv { in_ch: 8, out_ch: 16, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Activation { act: Activation::LeakyRelu(0.1) },
                LayerSpec::Linear { in_dim: 16 * 4 * 4, out_dim: 2 },
            ];
            let (model, acc) = train_classifier(spec, &data, 12, 10, 7).unwrap();
            assert!(*acc.last().unwrap() >= 0.9, "fixture classifier too weak: {acc:?}");
            (model, data)
        })
    }

    #[test]
    fn grid_identity_columns_match_baseline_and_runs_are_deterministic() {
        let (f, data) = grid_fixture();
        let subset = data.select(&(0..10).collect::<Vec<_>>()).unwrap();
        let methods = [Method::Fgsm, Method::FgsmIter, Method::Deepfool];
        let transforms =
            [TransformSpec::none(), TransformSpec::rotate(0.0), TransformSpec::jpeg(80)];
        let cfg = MethodConfig::default();
        let report =
            evaluate_robustness(f, &methods, &subset, &transforms, 2, 99, &cfg).unwrap();

        assert_eq!(report.methods, vec!["fgsm", "fgsm-iter", "deepfool"]);
        assert_eq!(report.transforms, vec!["none", "rotate0.00", "jpeg80"]);
        let kept = subset.len() - report.excluded;
        for row in &report.cells {
            for cell in row {
                assert_eq!(cell.n, kept * 2);
                assert!((0.0..=1.0).contains(&cell.success_rate));
            }
            // rotate-by-zero column must match the none column bitwise.
            assert_eq!(row[0].success_rate.to_bits(), row[1].success_rate.to_bits());
        }
        assert_eq!(report.method_seconds.len(), 3);

        let again = evaluate_robustness(f, &methods, &subset, &transforms, 2, 99, &cfg).unwrap();
        assert_eq!(robustness_csv(&report), robustness_csv(&again));
        assert_eq!(robustness_svg(&report), robustness_svg(&again));
    }

    #[test]
    fn grid_excludes_misclassified_images_and_counts_them() {
        let (f, data) = grid_fixture();
        let expected: usize = (0..data.len())
            .filter(|&i| f.classify(&data.image(i).unwrap()).unwrap().0 != data.labels[i])
            .count();
        let report = evaluate_robustness(
            f,
            &[Method::Fgsm],
            data,
            &[TransformSpec::none()],
            1,
            3,
            &MethodConfig::default(),
        )
        .unwrap();
        assert_eq!(report.excluded, expected);
        assert_eq!(report.cells[0][0].n, data.len() - expected);
    }

    #[test]
    fn grid_rejects_zero_trials_and_bad_transforms() {
        let (f, data) = grid_fixture();
        let sub = data.select(&[0, 1]).unwrap();
        assert!(matches!(
            evaluate_robustness(
                f,
                &[Method::Fgsm],
                &sub,
                &[TransformSpec::none()],
                0,
                1,
                &MethodConfig::default()
            ),
            Err(Error::Param { .. })
        ));
        assert!(matches!(
            evaluate_robustness(
                f,
                &[Method::Fgsm],
                &sub,
                &[TransformSpec::jpeg(0)],
                1,
                1,
                &MethodConfig::default()
            ),
            Err(Error::Param { .. })
        ));
    }

    // -- patch curve ---------------------------------------------------------

    #[test]
    fn patch_curve_full_area_equals_direct_classification() {
        let (f, data) = grid_fixture();
        let test = data.select(&(0..12).collect::<Vec<_>>()).unwrap();
        // Use the attack-class exemplar itself as the "trained" patch: the
        // trained and control rows must then agree bitwise (same renders,
        // same offsets).
        let attack_class = 1usize;
        let exemplar = synth_dataset(2, 1, 16, 5).unwrap().image(attack_class).unwrap();
        let curve =
            patch_success_curve(&exemplar, attack_class, f, &test, &[0.25, 1.0], 5).unwrap();
        assert_eq!(curve.trained.len(), 2);
        for (tr, ct) in curve.trained.iter().zip(&curve.control) {
            assert_eq!(tr, ct, "identical renders must produce identical rows");
        }
        // At area 1.0 the paste covers the whole image, so success is the
        // same for every image: whether the resized exemplar classifies as
        // the attack class.
        let full = resize_bilinear(&exemplar, 16, 16).unwrap();
        let expect = if f.classify(&full).unwrap().0 == attack_class { 1.0 } else { 0.0 };
        assert_eq!(curve.trained[1].success_rate, expect);
        let non_attack = test.labels.iter().filter(|&&y| y != attack_class).count();
        assert_eq!(curve.n, non_attack);
    }

    #[test]
    fn patch_curve_validates_inputs() {
        let (f, data) = grid_fixture();
        let patch = ramp_image(8);
        let test = data.select(&[0, 1, 2]).unwrap();
        assert!(matches!(
            patch_success_curve(&patch, 9, f, &test, &[0.25], 1),
            Err(Error::Param { .. })
        ));
        assert!(matches!(
            patch_success_curve(&patch, 0, f, &test, &[0.0], 1),
            Err(Error::Param { .. })
        ));
        let only_attack =
            data.select(&(0..data.len()).filter(|&i| data.labels[i] == 1).collect::<Vec<_>>())
                .unwrap();
        assert!(matches!(
            patch_success_curve(&patch, 1, f, &only_attack, &[0.25], 1),
            Err(Error::Contract { .. })
        ));
    }

    // -- emission ------------------------------------------------------------

    fn fixed_report() -> RobustnessReport {
        let cell = |rate: f64| RobustnessCell {
            success_rate: rate,
            n: 20,
            l2_mean: 1.25,
            linf_mean: 0.05,
            psnr_mean: 33.3333,
        };
        RobustnessReport {
            methods: vec!["fgsm".into(), "dip".into()],
            transforms: vec!["none".into(), "jpeg80".into(), "rotate_pm2.00".into()],
            cells: vec![
                vec![cell(1.0), cell(0.25), cell(0.5)],
                vec![cell(0.9), cell(0.85), cell(0.8)],
            ],
            method_seconds: vec![0.1, 2.0],
            excluded: 1,
            trials: 2,
            seed: 42,
        }
    }

    #[test]
    fn csv_matches_golden_bytes() {
        let golden = "method,transform,success_rate,n,l2_mean,linf_mean,psnr_mean\n\
                      fgsm,none,1.0000,20,1.250000,0.050000,33.3333\n\
                      fgsm,jpeg80,0.2500,20,1.250000,0.050000,33.3333\n\
                      fgsm,rotate_pm2.00,0.5000,20,1.250000,0.050000,33.3333\n\
                      dip,none,0.9000,20,1.250000,0.050000,33.3333\n\
                      dip,jpeg80,0.8500,20,1.250000,0.050000,33.3333\n\
                      dip,rotate_pm2.00,0.8000,20,1.250000,0.050000,33.3333\n";
        assert_eq!(robustness_csv(&fixed_report()), golden);
    }

    #[test]
    fn csv_handles_empty_and_infinite_values() {
        let mut report = fixed_report();
        report.methods.clear();
        report.cells.clear();
        assert_eq!(robustness_csv(&report), "method,transform,success_rate,n,l2_mean,linf_mean,psnr_mean\n");

        let mut inf = fixed_report();
        inf.cells[0][0].psnr_mean = f64::INFINITY;
        assert!(robustness_csv(&inf).lines().nth(1).unwrap().ends_with(",inf"));
    }

    #[test]
    fn svg_structure_and_determinism() {
        let report = fixed_report();
        let svg = robustness_svg(&report);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("rotate_pm2.00"));
        assert_eq!(svg, robustness_svg(&report));

        let curve = PatchCurve {
            attack_class: 3,
            areas: vec![0.1, 0.25, 0.4],
            trained: fixed_report().cells.remove(0),
            control: fixed_report().cells.remove(1),
            n: 20,
            seed: 9,
        };
        let csv = patch_curve_csv(&curve);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("patch,area0.10,"));
        assert!(csv.contains("control,area0.40,"));
        let svg = patch_curve_svg(&curve);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn emit_writes_files_and_maps_io_errors() {
        let dir = std::env::temp_dir().join(format!("advdip_harness_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let report = fixed_report();
        emit_robustness(&report, dir.join("r.csv"), dir.join("r.svg")).unwrap();
        let csv = std::fs::read_to_string(dir.join("r.csv")).unwrap();
        assert_eq!(csv, robustness_csv(&report));
        assert!(std::fs::read_to_string(dir.join("r.svg")).unwrap().starts_with("<svg"));
        let missing = dir.join("no-such-dir").join("x.csv");
        assert!(matches!(
            emit_robustness(&report, &missing, dir.join("y.svg")),
            Err(Error::Io { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn thread_cap_runs_closures() {
        std::env::set_var("ADVDIP_THREADS", "1");
        let n: usize = with_thread_cap(|| (0..8usize).into_par_iter().map(|i| i).sum());
        assert_eq!(n, 28);
        std::env::remove_var("ADVDIP_THREADS");
        assert_eq!(with_thread_cap(|| 5), 5);
    }

    // -- properties ----------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn transforms_preserve_shape_and_range(
            seed in 0u64..1000,
            deg in -30.0f64..30.0,
            factor in 0.5f64..2.0,
            q in 1u32..=100,
        ) {
            let x = synth_landscape(16, seed).unwrap();
            for y in [rotate(&x, deg).unwrap(), scale(&x, factor).unwrap(), jpeg_roundtrip(&x, q).unwrap()] {
                prop_assert_eq!(y.shape(), x.shape());
                prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn sampled_magnitudes_stay_in_declared_bounds(seed in 0u64..500) {
            let spec = TransformSpec::scale_pm(0.02);
            let mut rng = crate::rng::Rng::new(seed);
            let m = spec.sample_magnitude(&mut rng);
            prop_assert!((0.98..1.02).contains(&m));
            prop_assert!(spec.apply(&ramp_image(8), m).is_ok());
        }
    }
}
