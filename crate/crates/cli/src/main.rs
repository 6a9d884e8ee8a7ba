//! `advdip` — command-line front end for the adversarial-image toolkit:
//! train a classifier, run single attacks, sweep the attack-by-transform
//! robustness grid, train/evaluate adversarial patches, and re-render saved
//! reports. All file outputs (ADVM models, ATSR tensors, PPM images, CSV,
//! SVG) are byte-deterministic for a fixed seed and configuration.

use advdip_core::classifier::{
    load_dataset, read_ppm, reference_classifier_spec, save_dataset, synth_dataset,
    train_classifier, write_ppm, ClassifierModel, Dataset,
};
use advdip_core::generator::{
    dip_patch_train_with, load_patch, save_patch, GeneratorConfig, PatchMeta, PatchPlacement,
    PatchSpec, DIP_LR,
};
use advdip_core::harness::{
    emit_patch_curve, emit_robustness, evaluate_robustness, parse_robustness_csv,
    patch_success_curve, perceptibility_metrics, with_thread_cap, Method, MethodConfig,
    TransformSpec,
};
use advdip_core::rng::Rng;
use advdip_core::tensor::Tensor;
use advdip_core::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "advdip",
    version,
    about = "Adversarial image toolkit: generator-based synthesis, six baseline attacks, \
             and transform-robustness measurement against a self-trained classifier"
)]
struct Cli {
    /// Trained classifier file (ADVM format)
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Root random seed; every file output is a pure function of seed + config
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file overriding attack hyperparameters (see `ConfigFile` fields)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference classifier on the procedural shapes corpus
    Train {
        /// Where to write the trained model (ADVM)
        #[arg(long)]
        out: PathBuf,
        /// Load a saved dataset directory instead of synthesizing one
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Training images per class when synthesizing
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Also export the training corpus (PPM files + labels.csv)
        #[arg(long)]
        save_data: Option<PathBuf>,
    },
    /// Run one attack method against one image
    Attack {
        /// One of: fgsm, fgsm-iter, mifgsm, lbfgs, cw, smm, deepfool, dip
        #[arg(long)]
        method: String,
        /// Input image (.ppm or .atsr)
        #[arg(long)]
        image: PathBuf,
        /// Desired class (required for every method except deepfool)
        #[arg(long)]
        target_class: Option<usize>,
        /// Output adversarial image (.ppm or .atsr)
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack-by-transform robustness grid over a held-out image set
    Robustness {
        /// Comma-separated method names
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Comma-separated transforms, e.g. none,rotate_pm2,jpeg80,scale_pm0.02
        #[arg(long, value_delimiter = ',', required = true)]
        transforms: Vec<String>,
        /// Number of evaluation images
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Transform magnitude draws per image
        #[arg(long, default_value_t = 2)]
        trials: usize,
        /// Directory for report.csv and report.svg
        #[arg(long)]
        report_dir: PathBuf,
        /// Load a saved dataset directory instead of synthesizing one
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        side: usize,
    },
    /// Train an adversarial patch against the classifier
    Patch {
        /// Class the patch should force
        #[arg(long)]
        attack_class: usize,
        /// Patch area as a fraction of the image
        #[arg(long, default_value_t = 0.25)]
        area: f64,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        /// Output directory (patch.advm + patch.ppm + patch.txt)
        #[arg(long)]
        out: PathBuf,
        /// Load a saved dataset directory instead of synthesizing one
        #[arg(long)]
        data: Option<PathBuf>,
        /// Host images per class when synthesizing
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Evaluate a saved patch across area fractions (with exemplar control)
    PatchEval {
        /// Patch directory written by `patch`
        #[arg(long)]
        patch: PathBuf,
        /// Comma-separated area fractions
        #[arg(long, value_delimiter = ',', required = true)]
        areas: Vec<f64>,
        /// Directory for curve.csv and curve.svg
        #[arg(long)]
        report_dir: PathBuf,
        /// Load a saved dataset directory instead of synthesizing one
        #[arg(long)]
        data: Option<PathBuf>,
        /// Test images per class when synthesizing
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
    },
    /// Re-render a saved robustness CSV into fresh CSV + SVG files
    Report {
        /// Input CSV (as produced by `robustness`)
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
}

/// Optional hyperparameter overrides, loaded from `--config <file.json>`.
/// Unknown keys are rejected so typos fail loudly.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    fgsm_eps: Option<f32>,
    fgsm_steps: Option<usize>,
    fgsm_momentum: Option<f32>,
    cw_kappa: Option<f32>,
    cw_binary_steps: Option<usize>,
    cw_inner_iters: Option<usize>,
    cw_lr: Option<f32>,
    smm_step: Option<f32>,
    smm_max_pixels: Option<usize>,
    smm_use_logits: Option<bool>,
    deepfool_max_iters: Option<usize>,
    deepfool_use_logits: Option<bool>,
    dip_lambda: Option<f32>,
    dip_max_iters: Option<usize>,
    dip_stop_prob: Option<f32>,
    dip_stop_psnr: Option<f64>,
    dip_lr: Option<f32>,
    dip_levels: Option<usize>,
    dip_width: Option<usize>,
    dip_skip_channels: Option<usize>,
    dip_noise_channels: Option<usize>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else { return Ok(ConfigFile::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), &e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format("config", format!("{}: {e}", path.display())))
    }

    fn method_config(&self) -> MethodConfig {
        let mut cfg = MethodConfig::default();
        macro_rules! set {
            ($($field:ident => $slot:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $slot = v; })*
            };
        }
        set! {
            fgsm_eps => cfg.fgsm_eps,
            fgsm_steps => cfg.fgsm_steps,
            fgsm_momentum => cfg.fgsm_momentum,
            cw_kappa => cfg.cw.kappa,
            cw_binary_steps => cfg.cw.binary_steps,
            cw_inner_iters => cfg.cw.inner_iters,
            cw_lr => cfg.cw.lr,
            smm_step => cfg.smm_step,
            smm_max_pixels => cfg.smm_max_pixels,
            smm_use_logits => cfg.smm_use_logits,
            deepfool_max_iters => cfg.deepfool_max_iters,
            deepfool_use_logits => cfg.deepfool_use_logits,
            dip_lambda => cfg.dip.lambda,
            dip_max_iters => cfg.dip.max_iters,
            dip_stop_prob => cfg.dip.stop_prob,
            dip_stop_psnr => cfg.dip.stop_psnr,
            dip_lr => cfg.dip.lr,
            dip_levels => cfg.dip.generator.levels,
            dip_width => cfg.dip.generator.width,
            dip_skip_channels => cfg.dip.generator.skip_channels,
            dip_noise_channels => cfg.dip.generator.noise_channels,
        }
        cfg
    }
}

fn main() {
    let cli = Cli::parse();
    match with_thread_cap(|| run(cli)) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric { .. } => 3,
                Error::Io { .. } => 4,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?.method_config();
    match cli.command {
        Command::Train { out, data, classes, per_class, side, epochs, batch, save_data } => {
            cmd_train(
                &out,
                data.as_deref(),
                classes,
                per_class,
                side,
                epochs,
                batch,
                save_data.as_deref(),
                cli.seed,
            )
        }
        Command::Attack { method, image, target_class, out } => {
            cmd_attack(require_model(&cli.model)?, &method, &image, target_class, &out, cli.seed, &cfg)
        }
        Command::Robustness { methods, transforms, n, trials, report_dir, data, side } => {
            cmd_robustness(
                require_model(&cli.model)?,
                &methods,
                &transforms,
                n,
                trials,
                &report_dir,
                data.as_deref(),
                side,
                cli.seed,
                &cfg,
            )
        }
        Command::Patch { attack_class, area, iters, out, data, per_class, side, batch } => {
            cmd_patch(
                require_model(&cli.model)?,
                attack_class,
                area,
                iters,
                &out,
                data.as_deref(),
                per_class,
                side,
                batch,
                cli.seed,
                &cfg,
            )
        }
        Command::PatchEval { patch, areas, report_dir, data, per_class, side } => cmd_patch_eval(
            require_model(&cli.model)?,
            &patch,
            &areas,
            &report_dir,
            data.as_deref(),
            per_class,
            side,
            cli.seed,
        ),
        Command::Report { input, csv, svg } => cmd_report(&input, &csv, &svg),
    }
}

fn require_model(path: &Option<PathBuf>) -> Result<ClassifierModel> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::param("--model", "this command needs a trained classifier file"))?;
    ClassifierModel::load(path)
}

/// Load `--data` if given, otherwise synthesize a labeled shapes corpus from
/// the seed (stream-separated from attack and trial randomness).
fn eval_dataset(
    data: Option<&Path>,
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset(dir),
        None => synth_dataset(classes, per_class, side, Rng::new(seed).fork(0x64617461).next_u64()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    out: &Path,
    data: Option<&Path>,
    classes: usize,
    per_class: usize,
    side: usize,
    epochs: usize,
    batch: usize,
    save_data: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let train = eval_dataset(data, classes, per_class, side, seed)?;
    if let Some(dir) = save_data {
        save_dataset(dir, &train)?;
        println!("corpus exported to {}", dir.display());
    }
    println!(
        "training on {} images ({} classes, {}x{}), {} epochs",
        train.len(),
        train.class_count(),
        side,
        side,
        epochs
    );
    let spec = reference_classifier_spec(train.class_count());
    let (model, history) = train_classifier(spec, &train, epochs, batch, seed)?;
    for (e, acc) in history.iter().enumerate() {
        println!("epoch {:>3}: train accuracy {:.4}", e + 1, acc);
    }
    let held_out = synth_dataset(
        train.class_count(),
        (per_class / 5).max(1),
        side,
        Rng::new(seed).fork(0x68656c64).next_u64(),
    )?;
    println!("held-out accuracy: {:.4}", model.accuracy(&held_out)?);
    model.save(out)?;
    println!("model written to {}", out.display());
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("atsr") => Tensor::load_atsr(path),
        _ => Err(Error::param("--image", format!("{}: expected .ppm or .atsr", path.display()))),
    }
}

fn store_image(path: &Path, image: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, image),
        Some("atsr") => image.save_atsr(path),
        _ => Err(Error::param("--out", format!("{}: expected .ppm or .atsr", path.display()))),
    }
}

fn cmd_attack(
    f: ClassifierModel,
    method: &str,
    image: &Path,
    target_class: Option<usize>,
    out: &Path,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<()> {
    let method = Method::parse(method)?;
    let x = load_image(image)?;
    let (label, probs, _) = f.classify(&x)?;
    println!("input classified as {label} (p = {:.4})", probs.data()[label]);
    let target = match (method.is_targeted(), target_class) {
        (true, Some(t)) => t,
        (true, None) => {
            return Err(Error::param(
                "--target-class",
                format!("{} is a targeted method", method.name()),
            ));
        }
        // Untargeted: the value is unused; keep it distinct from the label.
        (false, _) => (label + 1) % f.class_count(),
    };
    let res = method.run(&f, &x, label, target, Rng::new(seed).fork(0x6174746b).next_u64(), cfg)?;
    let (l2, linf, psnr) = perceptibility_metrics(&x, &res.x_adv)?;
    store_image(out, &res.x_adv)?;
    println!(
        "method {}: success {} (predicted {}), {} iterations, {:.2}s",
        method.name(),
        res.success,
        res.predicted,
        res.iterations,
        res.seconds
    );
    println!("perturbation: L2 {l2:.6}  Linf {linf:.6}  PSNR {psnr:.2} dB");
    if let Some(reason) = res.reason {
        println!("stopped early: {reason}");
    }
    println!("adversarial image written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_robustness(
    f: ClassifierModel,
    methods: &[String],
    transforms: &[String],
    n: usize,
    trials: usize,
    report_dir: &Path,
    data: Option<&Path>,
    side: usize,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<()> {
    let methods: Vec<Method> = methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    let transforms: Vec<TransformSpec> =
        transforms.iter().map(|t| TransformSpec::parse(t)).collect::<Result<_>>()?;
    let per_class = n.div_ceil(f.class_count()).max(1);
    let pool = eval_dataset(data, f.class_count(), per_class, side, seed)?;
    let take: Vec<usize> = (0..n.min(pool.len())).collect();
    let images = pool.select(&take)?;
    let report = evaluate_robustness(&f, &methods, &images, &transforms, trials, seed, cfg)?;
    std::fs::create_dir_all(report_dir)
        .map_err(|e| Error::io(report_dir.display().to_string(), &e))?;
    let csv_path = report_dir.join("report.csv");
    let svg_path = report_dir.join("report.svg");
    emit_robustness(&report, &csv_path, &svg_path)?;
    println!(
        "evaluated {} images ({} excluded as misclassified), {} trials per transform",
        images.len() - report.excluded,
        report.excluded,
        report.trials
    );
    for (m, name) in report.methods.iter().enumerate() {
        let cells: Vec<String> = report
            .transforms
            .iter()
            .zip(&report.cells[m])
            .map(|(t, c)| format!("{t} {:.2}", c.success_rate))
            .collect();
        println!("{name:>9}: {}", cells.join("  "));
    }
    println!("report written to {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_patch(
    f: ClassifierModel,
    attack_class: usize,
    area: f64,
    iters: usize,
    out: &Path,
    data: Option<&Path>,
    per_class: usize,
    side: usize,
    batch: usize,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<()> {
    if !(area > 0.0 && area <= 1.0) {
        return Err(Error::param("--area", format!("{area} outside (0, 1]")));
    }
    let corpus = eval_dataset(data, f.class_count(), per_class, side, seed)?;
    let hosts_idx: Vec<usize> =
        (0..corpus.len()).filter(|&i| corpus.labels[i] != attack_class).collect();
    if hosts_idx.is_empty() {
        return Err(Error::param("--data", "no host images outside the attack class"));
    }
    let hosts = corpus.select(&hosts_idx)?;
    let patch_side = ((side as f64) * area.sqrt()).round().max(1.0) as usize;
    let spec = PatchSpec::rectangle(patch_side, patch_side, PatchPlacement::Random)?;
    println!(
        "training {patch_side}x{patch_side} patch (area {:.3}) toward class {attack_class} on {} hosts",
        spec.area_fraction(side, side)?,
        hosts.len()
    );
    let patch =
        dip_patch_train_with(cfg.dip.generator, DIP_LR, &hosts, &f, attack_class, &spec, iters, batch, seed)?;
    let meta = PatchMeta {
        attack_class,
        area_fraction: spec.area_fraction(side, side)?,
        seed,
        iters,
    };
    save_patch(out, &patch, &meta)?;
    println!("patch artifacts written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_patch_eval(
    f: ClassifierModel,
    patch_dir: &Path,
    areas: &[f64],
    report_dir: &Path,
    data: Option<&Path>,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<()> {
    let (_, render, meta) = load_patch(patch_dir)?;
    let test = eval_dataset(data, f.class_count(), per_class, side, seed)?;
    let curve = patch_success_curve(&render, meta.attack_class, &f, &test, areas, seed)?;
    std::fs::create_dir_all(report_dir)
        .map_err(|e| Error::io(report_dir.display().to_string(), &e))?;
    let csv_path = report_dir.join("curve.csv");
    let svg_path = report_dir.join("curve.svg");
    emit_patch_curve(&curve, &csv_path, &svg_path)?;
    println!("patch toward class {} over {} non-target images:", meta.attack_class, curve.n);
    for (i, &a) in curve.areas.iter().enumerate() {
        println!(
            "area {a:.2}: patch {:.3}  control {:.3}",
            curve.trained[i].success_rate, curve.control[i].success_rate
        );
    }
    println!("curve written to {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn cmd_report(input: &Path, csv: &Path, svg: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::io(input.display().to_string(), &e))?;
    let report = parse_robustness_csv(&text)?;
    emit_robustness(&report, csv, svg)?;
    println!(
        "re-rendered {} methods x {} transforms to {} and {}",
        report.methods.len(),
        report.transforms.len(),
        csv.display(),
        svg.display()
    );
    Ok(())
}
