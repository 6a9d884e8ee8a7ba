//! Shape-classification CNN: dataset synthesis, training, inference, and
//! PPM/CSV dataset interchange.

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, forward_layers, init_params, load_advm, save_advm, validate_spec, Activation,
    AdamParams, AdamState, LayerSpec,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use std::path::Path;

/// Adam learning rate for classifier training (constant; no schedule).
const TRAIN_LR: f32 = 3e-3;

const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];
const HUE_NAMES: [&str; 2] = ["red", "blue"];

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A labeled image set: `images` is (N,3,H,W) with values in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Dataset> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "Dataset",
                format!("images must be (N,3,H,W), got {shape:?}"),
            ));
        }
        if shape[0] != labels.len() {
            return Err(Error::contract(
                "Dataset",
                format!("{} images but {} labels", shape[0], labels.len()),
            ));
        }
        let l = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::contract("Dataset", format!("label {bad} >= {l} classes")));
        }
        Ok(Dataset { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Spatial side length (images are square in this toolkit).
    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copy image `i` out as a standalone (3,H,W) tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        let shape = self.images.shape().to_vec();
        if i >= shape[0] {
            return Err(Error::param("Dataset::image", format!("index {i} >= {}", shape[0])));
        }
        let stride = shape[1] * shape[2] * shape[3];
        let data = self.images.data()[i * stride..(i + 1) * stride].to_vec();
        Tensor::from_vec(vec![shape[1], shape[2], shape[3]], data)
    }

    /// New dataset containing the listed rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::param("Dataset::select", "empty selection"));
        }
        let shape = self.images.shape().to_vec();
        let stride = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= shape[0] {
                return Err(Error::param("Dataset::select", format!("index {i} >= {}", shape[0])));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::from_vec(vec![indices.len(), shape[1], shape[2], shape[3]], data)?,
            labels,
            class_names: self.class_names.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

fn shape_distance(shape: usize, px: f32, py: f32) -> f32 {
    let box_dist = |px: f32, py: f32, bx: f32, by: f32| (px.abs() - bx).max(py.abs() - by);
    match shape {
        // circle
        0 => (px * px + py * py).sqrt() - 0.5,
        // square
        1 => box_dist(px, py, 0.42, 0.42),
        // equilateral triangle (circumradius 0.55), via its three edge planes
        2 => {
            let r = 0.55f32;
            let mut d = f32::NEG_INFINITY;
            for k in 0..3 {
                let ang = std::f32::consts::FRAC_PI_2 + k as f32 * 2.0 * std::f32::consts::PI / 3.0;
                // Edge normal points away from the vertex at `ang`.
                d = d.max(-(px * ang.cos() + py * ang.sin()) - r * 0.5);
            }
            d
        }
        // plus-shaped cross: union of two bars
        3 => box_dist(px, py, 0.5, 0.17).min(box_dist(px, py, 0.17, 0.5)),
        // ring
        4 => ((px * px + py * py).sqrt() - 0.38).abs() - 0.14,
        _ => unreachable!("shape index bounded by archetype count"),
    }
}

/// Render `num_classes * per_class` images of the 10 shape/color archetypes
/// (circle, square, triangle, cross, ring; each in red and blue), with
/// per-image random position (±0.25 of half-extent), scale (±20%), rotation,
/// and noisy gray background. Classes are balanced and interleaved
/// (label of image i = i mod num_classes); every pixel lies in [0,1].
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 10 {
        return Err(Error::param(
            "synth_dataset",
            format!("{num_classes} classes requested, archetype list has 10"),
        ));
    }
    if side < 16 {
        return Err(Error::param("synth_dataset", format!("side {side} < 16")));
    }
    let n = num_classes * per_class;
    let root = Rng::new(seed);
    let mut data = vec![0.0f32; n * 3 * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let shape = label % 5;
        let hue = label / 5;
        let mut rng = root.fork(i as u64);
        let base_gray = rng.uniform(0.35, 0.65);
        let dominant = rng.uniform(0.75, 0.85);
        let secondary = rng.uniform(0.12, 0.22);
        let scale = rng.uniform(0.8, 1.2);
        let angle = rng.uniform(0.0, 2.0 * std::f32::consts::PI);
        let cx = rng.uniform(-0.25, 0.25);
        let cy = rng.uniform(-0.25, 0.25);
        let color = if hue == 0 {
            [dominant, secondary, secondary]
        } else {
            [secondary, secondary, dominant]
        };
        let (sin, cos) = angle.sin_cos();
        let aa = 3.0 / side as f32;
        let plane = side * side;
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for r in 0..side {
            for c in 0..side {
                let u = (c as f32 + 0.5) / side as f32 * 2.0 - 1.0 - cx;
                let v = (r as f32 + 0.5) / side as f32 * 2.0 - 1.0 - cy;
                // Rotate into the shape's local frame, then unscale.
                let px = (u * cos + v * sin) / scale;
                let py = (-u * sin + v * cos) / scale;
                let d = shape_distance(shape, px, py) * scale;
                let cov = (0.5 - d / aa).clamp(0.0, 1.0);
                for (ch, &col) in color.iter().enumerate() {
                    let bg = base_gray + 0.12 * (rng.next_f32() - 0.5);
                    img[ch * plane + r * side + c] = bg + cov * (col - bg);
                }
            }
        }
        labels.push(label);
    }
    let class_names = (0..num_classes)
        .map(|l| format!("{}-{}", SHAPE_NAMES[l % 5], HUE_NAMES[l / 5]))
        .collect();
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, 3, side, side], data)?,
        labels,
        class_names,
    })
}

/// Procedural "natural image" fixture: a smooth landscape (sky gradient, sun,
/// two sinusoidal ridge lines, textured foreground). Piecewise-smooth with a
/// few sharp contours, values in [0,1], deterministic per seed.
pub fn synth_landscape(side: usize, seed: u64) -> Result<Tensor> {
    if side < 16 {
        return Err(Error::param("synth_landscape", format!("side {side} < 16")));
    }
    let mut rng = Rng::new(seed).fork(0x6c616e64);
    let sun_x = rng.uniform(0.2, 0.8);
    let sun_y = rng.uniform(0.1, 0.3);
    let ridge_phase = rng.uniform(0.0, std::f32::consts::PI);
    let ridge2_phase = rng.uniform(0.0, std::f32::consts::PI);
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for r in 0..side {
        for c in 0..side {
            let x = (c as f32 + 0.5) / side as f32;
            let y = (r as f32 + 0.5) / side as f32;
            // Sky: blue fading toward a warm horizon.
            let mut rgb = [
                0.35 + 0.35 * y,
                0.45 + 0.30 * y,
                0.85 - 0.25 * y,
            ];
            // Sun disk with a soft halo.
            let sd = ((x - sun_x).powi(2) + (y - sun_y).powi(2)).sqrt();
            let sun = (1.0 - sd / 0.12).clamp(0.0, 1.0).powi(2);
            rgb[0] += 0.9 * sun;
            rgb[1] += 0.8 * sun;
            rgb[2] += 0.4 * sun;
            // Far ridge.
            let h1 = 0.55 + 0.06 * (ridge_phase + x * 7.3).sin() + 0.03 * (x * 17.1).sin();
            if y > h1 {
                let depth = (y - h1) * 2.0;
                rgb = [
                    0.30 - 0.10 * depth,
                    0.42 - 0.12 * depth,
                    0.38 - 0.10 * depth,
                ];
            }
            // Near ridge with textured ground.
            let h2 = 0.75 + 0.05 * (ridge2_phase + x * 4.1).sin() + 0.02 * (x * 23.0).sin();
            if y > h2 {
                let tex = 0.04 * ((x * 31.0).sin() * (y * 29.0).sin());
                rgb = [0.22 + tex, 0.30 + 1.5 * tex, 0.16 + tex];
            }
            for (ch, &v) in rgb.iter().enumerate() {
                data[ch * plane + r * side + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, side, side], data)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// CNN classifier: a validated layer stack ending in a linear head whose
/// width is the class count.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    spec: Vec<LayerSpec>,
    params: Vec<Tensor>,
    class_count: usize,
    trained: bool,
}

/// The reference stack: three stride-2 3×3 conv blocks (3→16→32→64, leaky
/// ReLU 0.1) and a linear head, for 32×32 inputs.
pub fn reference_classifier_spec(classes: usize) -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv { in_ch: i, out_ch: o, kernel: 3, stride: 2, padding: 1 };
    let act = LayerSpec::Activation { act: Activation::LeakyRelu(0.1) };
    vec![
        conv(3, 16),
        act.clone(),
        conv(16, 32),
        act.clone(),
        conv(32, 64),
        act,
        LayerSpec::Linear { in_dim: 64 * 4 * 4, out_dim: classes },
    ]
}

fn head_width(spec: &[LayerSpec]) -> Result<usize> {
    match spec.last() {
        Some(LayerSpec::Linear { out_dim, .. }) => Ok(*out_dim),
        other => Err(Error::param(
            "ClassifierModel",
            format!("stack must end in a linear head, found {other:?}"),
        )),
    }
}

impl ClassifierModel {
    /// Fresh (untrained) model with deterministic initialization.
    pub fn new(spec: Vec<LayerSpec>, seed: u64) -> Result<ClassifierModel> {
        validate_spec(&spec)?;
        let class_count = head_width(&spec)?;
        let params = init_params(&spec, seed)?;
        Ok(ClassifierModel { spec, params, class_count, trained: false })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Record the forward pass on `x`'s tape with the parameters attached as
    /// constants, so gradients flow to the image (and not the weights).
    /// Accepts (3,H,W) or (B,3,H,W); returns (B, classes) logits.
    pub fn logits_on_tape(&self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let x4 = match shape.len() {
            3 => x.reshape(vec![1, shape[0], shape[1], shape[2]])?,
            4 => x.clone(),
            r => return Err(Error::shape("logits_on_tape", format!("rank {r} input"))),
        };
        let tape = x.tape();
        let pvars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        forward_layers(&x4, &self.spec, &pvars)
    }

    /// Value-only logits for a (B,3,H,W) batch.
    pub fn logits_batch(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        Ok(self.logits_on_tape(&x)?.value())
    }

    /// Classify one (3,H,W) image: (argmax label, probabilities, logits).
    /// Pure: identical inputs give identical outputs.
    pub fn classify(&self, x: &Tensor) -> Result<(usize, Tensor, Tensor)> {
        if !self.trained {
            return Err(Error::contract("classify", "model has not been trained"));
        }
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::shape("classify", format!("expected (3,H,W), got {shape:?}")));
        }
        let z = self
            .logits_batch(&x.clone().reshape(vec![1, shape[0], shape[1], shape[2]])?)?
            .reshape(vec![self.class_count])?;
        let p = softmax_stable(z.data());
        let label = argmax(z.data());
        Ok((label, Tensor::from_vec(vec![self.class_count], p)?, z))
    }

    /// Fraction of the dataset classified correctly (batched forward).
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::param("accuracy", "empty dataset"));
        }
        let mut correct = 0usize;
        for start in (0..data.len()).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
            let batch = data.select(&idx)?;
            let z = self.logits_batch(&batch.images)?;
            for (row, &y) in z.data().chunks(self.class_count).zip(&batch.labels) {
                if argmax(row) == y {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if !self.trained {
            return Err(Error::contract("save_model", "refusing to save an untrained model"));
        }
        save_advm(path, &self.spec, &self.params)
    }

    /// Load a trained model. The file stores the stack and weights; the
    /// trained flag is implied (only trained models are saved).
    pub fn load(path: impl AsRef<Path>) -> Result<ClassifierModel> {
        let (spec, params) = load_advm(path)?;
        validate_spec(&spec)?;
        let class_count = head_width(&spec)?;
        Ok(ClassifierModel { spec, params, class_count, trained: true })
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-stabilized softmax computed in f64.
pub(crate) fn softmax_stable(z: &[f32]) -> Vec<f32> {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = z.iter().map(|&v| ((v as f64) - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / denom) as f32).collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train a classifier with Adam on softmax cross-entropy. Returns the model
/// (marked trained even for epochs=0) and the post-epoch training accuracy
/// history. Deterministic per seed.
pub fn train_classifier(
    spec: Vec<LayerSpec>,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::param("train_classifier", "empty dataset"));
    }
    if batch == 0 {
        return Err(Error::param("train_classifier", "batch size 0"));
    }
    let mut model = ClassifierModel::new(spec, Rng::new(seed).fork(0x696e6974).next_u64())?;
    if data.class_count() > model.class_count {
        return Err(Error::contract(
            "train_classifier",
            format!(
                "dataset has {} classes, head width {}",
                data.class_count(),
                model.class_count
            ),
        ));
    }
    let root = Rng::new(seed);
    let mut state = AdamState::new();
    let opts = AdamParams { lr: TRAIN_LR, ..AdamParams::default() };
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = root.fork(epoch as u64);
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let minibatch = data.select(chunk)?;
            let tape = Tape::new();
            let x = tape.constant(minibatch.images.clone());
            let pvars: Vec<Var> =
                model.params.iter().map(|p| tape.leaf(p.clone().requires_grad(true))).collect();
            let logits = forward_layers(&x, &model.spec, &pvars)?;
            let loss = logits.softmax_cross_entropy(&minibatch.labels)?;
            let value = loss.scalar()?;
            if !value.is_finite() {
                return Err(Error::numeric(
                    "train_classifier",
                    format!("loss {value} at epoch {epoch}"),
                ));
            }
            loss.backward()?;
            let grads: Vec<Tensor> = pvars
                .iter()
                .map(|p| {
                    p.grad().ok_or_else(|| {
                        Error::state("train_classifier", "parameter missing its gradient")
                    })
                })
                .collect::<Result<_>>()?;
            adam_step(&mut model.params, &grads, &mut state, &opts)?;
        }
        model.trained = true; // accuracy() below requires the flag
        history.push(model.accuracy(data)?);
    }
    model.trained = true;
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// PPM + labels.csv interchange
// ---------------------------------------------------------------------------

/// Write a (3,H,W) unit-range image as binary PPM (P6, maxval 255).
/// Values are mapped round(v·255) and clamped.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected (3,H,W), got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((data[ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), &e))
}

/// Read a binary PPM (P6, maxval 255) into a (3,H,W) tensor with v/255.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let fail = |d: String| Error::format("PPM", format!("{}: {d}", path.display()));

    // Header: three whitespace/comment-separated tokens after the magic,
    // then exactly one whitespace byte before the pixel data.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PPM", "truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(fail("not a P6 file".into()));
    }
    let w: usize = token(&bytes)?.parse().map_err(|e| fail(format!("bad width: {e}")))?;
    let h: usize = token(&bytes)?.parse().map_err(|e| fail(format!("bad height: {e}")))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|e| fail(format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(fail(format!("maxval {maxval} unsupported (only 255)")));
    }
    pos += 1; // the single whitespace byte after maxval
    let plane = h * w;
    if bytes.len() < pos + 3 * plane {
        return Err(fail(format!(
            "pixel payload truncated: need {} bytes, have {}",
            3 * plane,
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = bytes[pos + 3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Write every image as `img_NNNNN.ppm` plus a `labels.csv` manifest
/// (`filename,label`, LF line endings).
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))?;
    let mut csv = String::from("filename,label\n");
    for i in 0..data.len() {
        let name = format!("img_{i:05}.ppm");
        write_ppm(dir.join(&name), &data.image(i)?)?;
        csv.push_str(&format!("{name},{}\n", data.labels[i]));
    }
    let manifest = dir.join("labels.csv");
    std::fs::write(&manifest, csv).map_err(|e| Error::io(manifest.display().to_string(), &e))
}

/// Load a dataset saved by [`save_dataset`] (or any folder of same-size PPMs
/// with a `labels.csv` manifest). Class names are synthesized as `class_K`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = dir.join("labels.csv");
    let csv = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::io(manifest.display().to_string(), &e))?;
    let mut lines = csv.lines();
    match lines.next() {
        Some("filename,label") => {}
        other => {
            return Err(Error::format(
                "labels.csv",
                format!("expected header 'filename,label', got {other:?}"),
            ))
        }
    }
    let mut images: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| {
            Error::format("labels.csv", format!("row {}: missing comma: {line:?}", ln + 2))
        })?;
        let label: usize = label.trim().parse().map_err(|e| {
            Error::format("labels.csv", format!("row {}: bad label: {e}", ln + 2))
        })?;
        let img = read_ppm(dir.join(name.trim()))?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(Error::shape(
                    "load_dataset",
                    format!("{name}: shape {:?} differs from {:?}", img.shape(), first.shape()),
                ));
            }
        }
        images.push(img);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::format("labels.csv", "no data rows".to_string()));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in &images {
        data.extend_from_slice(img.data());
    }
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(
        Tensor::from_vec(vec![images.len(), shape[0], shape[1], shape[2]], data)?,
        labels,
        (0..classes).map(|k| format!("class_{k}")).collect(),
    )
}
