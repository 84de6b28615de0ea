//! Command-line surface: corpus synthesis, pyramid inspection, training,
//! evaluation, inference, parameter/FLOP reporting, and comparison grids.
//!
//! Precedence for training settings: config-file values override built-in
//! defaults, and command-line flags override the config file. Every run
//! prints its resolved configuration; artifact-producing commands also write
//! it next to their outputs as a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lapgsr::data::{self, GuideMode};
use lapgsr::metrics;
use lapgsr::model::{count_params, estimate_flops, Checkpoint, Generator, GeneratorConfig};
use lapgsr::pyramid;
use lapgsr::train::{self, GanVariant, TrainConfig};
use lapgsr::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "lapgsr",
    about = "Guided thermal super-resolution (4x) toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic RGB/thermal corpus.
    Synth(SynthArgs),
    /// Decompose an image into pyramid level visualizations.
    Pyramid(PyramidArgs),
    /// Train a generator (and discriminator) on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the bicubic baseline on a split.
    Eval(EvalArgs),
    /// Super-resolve one thermal image with an RGB guide.
    Infer(InferArgs),
    /// Print parameter count and GFLOPs for a generator configuration.
    Report(ReportArgs),
    /// Write RGB | ground truth | prediction | bicubic comparison strips.
    Grid(GridArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    /// Base RNG seed; identical seeds reproduce identical bytes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus root directory (split subdirectories are created inside).
    #[arg(long)]
    out: PathBuf,
    /// High-resolution width in pixels (divisible by 4).
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// High-resolution height in pixels (divisible by 4).
    #[arg(long, default_value_t = 240)]
    height: usize,
}

#[derive(Args, Serialize)]
struct PyramidArgs {
    /// Guide image (RGB or grayscale PNG); converted to grayscale first.
    #[arg(long)]
    image: PathBuf,
    /// Low-resolution thermal PNG at exactly 1/4 the guide extents; adds the
    /// modified-pyramid panels.
    #[arg(long)]
    thermal: Option<PathBuf>,
    /// Output directory for the panel PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Training config JSON; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root (as produced by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override: MSE weight in the combined loss.
    #[arg(long)]
    lambda: Option<f32>,
    /// Override: generator learning rate.
    #[arg(long)]
    lr_g: Option<f32>,
    /// Override: discriminator learning rate.
    #[arg(long)]
    lr_d: Option<f32>,
    /// Override: patches per optimization step.
    #[arg(long)]
    batch: Option<usize>,
    /// Override: number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override: run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: per-axis flip probability.
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Override: guide misalignment fraction in [0, 0.5).
    #[arg(long)]
    shift_limit: Option<f64>,
    /// Override: low-resolution patch width.
    #[arg(long)]
    patch_width: Option<usize>,
    /// Override: low-resolution patch height.
    #[arg(long)]
    patch_height: Option<usize>,
    /// Override: adversarial loss variant (lsgan|vanilla|wgan|hinge).
    #[arg(long)]
    gan_variant: Option<GanVariant>,
    /// Override: epochs between cadence checkpoints.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "baseline_bicubic", conflicts_with = "baseline_bicubic")]
    ckpt: Option<PathBuf>,
    /// Evaluate plain bicubic 4x upsampling instead of a model.
    #[arg(long)]
    baseline_bicubic: bool,
    /// Corpus root.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional directory for report.csv / report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    /// Checkpoint with generator weights.
    #[arg(long)]
    ckpt: PathBuf,
    /// High-resolution guide PNG.
    #[arg(long)]
    rgb: PathBuf,
    /// Low-resolution thermal PNG.
    #[arg(long)]
    thermal: PathBuf,
    /// Output PNG path (extents = 4x thermal input).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Generator config JSON; defaults describe the reference model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// High-resolution width for the FLOP estimate.
    #[arg(long, default_value_t = 320)]
    hr_width: usize,
    /// High-resolution height for the FLOP estimate.
    #[arg(long, default_value_t = 240)]
    hr_height: usize,
}

#[derive(Args, Serialize)]
struct GridArgs {
    /// Checkpoint with generator weights.
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus root.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample ids (searched across all splits).
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Output directory for the strips.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pyramid(a) => cmd_pyramid(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Grid(a) => cmd_grid(&a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Print the resolved settings and, when `sidecar` names a file, record them
/// there too.
fn announce<T: Serialize>(command: &str, resolved: &T, sidecar: Option<&Path>) -> Result<()> {
    let body = serde_json::to_string_pretty(resolved).expect("flag structs serialize");
    println!("[{command}] resolved configuration:\n{body}");
    if let Some(path) = sidecar {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        let mut text = serde_json::to_string_pretty(&serde_json::json!({
            "command": command,
            "config": serde_json::to_value(resolved).expect("flag structs serialize"),
        }))
        .expect("json value serializes");
        text.push('\n');
        fs::write(path, text).map_err(Error::io(path))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    announce("synth", a, Some(&a.out.join("run_config.json")))?;
    let manifest = data::synth_generate(a.n, a.seed, &a.out, a.width, a.height)?;
    println!("wrote {} samples; manifest at {}", a.n, manifest.display());
    Ok(())
}

/// Affine map from the observed [min, max] to [0, 1] for band visualization.
fn to_panel(t: &Tensor) -> Tensor {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &t.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = t.data.iter().map(|&v| (v - lo) / span).collect();
    Tensor::new(t.shape, data).expect("same extents")
}

fn cmd_pyramid(a: &PyramidArgs) -> Result<()> {
    announce("pyramid", a, Some(&a.out.join("run_config.json")))?;
    let guide = pyramid::grayscale(&data::decode_png(&a.image)?)?;
    let pyr = pyramid::decompose(&guide)?;
    let mut panels = vec![
        ("l3.png", &pyr.high),
        ("l2.png", &pyr.mid),
        ("residual.png", &pyr.low),
    ];
    let modified;
    if let Some(thermal_path) = &a.thermal {
        let thermal = data::decode_png(thermal_path)?;
        modified = pyramid::build_modified(&guide, &thermal)?;
        panels.push(("modified_l3.png", &modified.high));
        panels.push(("modified_l2.png", &modified.mid));
        panels.push(("modified_l1.png", &modified.low));
    }
    for (name, tensor) in &panels {
        let path = a.out.join(name);
        data::encode_png(&path, &to_panel(tensor))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Config-file values override defaults; command-line flags override both.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => TrainConfig::default(),
    };
    macro_rules! override_flag {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field {
                cfg.$field = v;
            })*
        };
    }
    override_flag!(
        lambda,
        lr_g,
        lr_d,
        batch,
        epochs,
        seed,
        flip_prob,
        shift_limit,
        gan_variant,
        checkpoint_every
    );
    if let Some(w) = a.patch_width {
        cfg.lr_patch[0] = w;
    }
    if let Some(h) = a.patch_height {
        cfg.lr_patch[1] = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    announce("train", &cfg, Some(&a.out.join("run_config.json")))?;
    let mode = GuideMode::for_channels(cfg.generator.channels);
    let dataset = data::load_dataset(&a.data, mode)?;
    println!(
        "dataset: {} train / {} val / {} test samples ({mode} guides)",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    let outcome = train::train_loop(&dataset, &cfg, &a.out, a.resume.as_deref())?;
    println!("log: {}", outcome.log_path.display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if let (Some(best), Some(psnr)) = (&outcome.best_checkpoint, outcome.best_val_psnr) {
        println!("best checkpoint: {} (val PSNR {psnr:.3} dB)", best.display());
    }
    Ok(())
}

fn split_of<'d>(dataset: &'d data::DatasetSplit, name: &str) -> Result<&'d [data::SamplePair]> {
    match name {
        "train" => Ok(&dataset.train),
        "val" => Ok(&dataset.val),
        "test" => Ok(&dataset.test),
        other => Err(Error::Config {
            why: format!("unknown split {other:?} (train|val|test)"),
        }),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let sidecar = a.out.as_ref().map(|d| d.join("run_config.json"));
    announce("eval", a, sidecar.as_deref())?;
    let report = if a.baseline_bicubic {
        let dataset = data::load_dataset(&a.data, GuideMode::Grayscale)?;
        metrics::evaluate(split_of(&dataset, &a.split)?, metrics::bicubic_baseline, "bicubic-4x")?
    } else {
        let ckpt_path = a.ckpt.as_ref().expect("clap enforces ckpt xor baseline");
        let gen = Generator::from_checkpoint(&Checkpoint::load(ckpt_path)?)?;
        let mode = GuideMode::for_channels(gen.config().channels);
        let dataset = data::load_dataset(&a.data, mode)?;
        metrics::evaluate(
            split_of(&dataset, &a.split)?,
            |s| gen.infer(&s.guide, &s.thermal_lr),
            &gen.config().fingerprint(),
        )?
    };
    println!(
        "{} on {} ({} samples): mean PSNR {} dB ({} finite), mean SSIM {:.4}",
        report.fingerprint,
        a.split,
        report.rows.len(),
        report
            .mean_psnr
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
        report.finite_psnr,
        report.mean_ssim
    );
    if let Some(dir) = &a.out {
        let csv = dir.join("report.csv");
        let json = dir.join("report.json");
        report.write_csv(&csv)?;
        report.write_json(&json)?;
        println!("wrote {} and {}", csv.display(), json.display());
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let sidecar = a.out.with_extension("run_config.json");
    announce("infer", a, Some(&sidecar))?;
    let gen = Generator::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let mut guide = data::decode_png(&a.rgb)?;
    if gen.config().channels == 1 {
        guide = pyramid::grayscale(&guide)?;
    }
    let thermal = data::decode_png(&a.thermal)?;
    let sr = gen.infer(&guide, &thermal)?;
    data::encode_png(&a.out, &sr)?;
    println!(
        "wrote {} ({}x{} from {}x{} thermal input)",
        a.out.display(),
        sr.shape.w,
        sr.shape.h,
        thermal.shape.w,
        thermal.shape.h
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let cfg: GeneratorConfig = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => GeneratorConfig::default(),
    };
    cfg.validate()?;
    announce("report", &cfg, None)?;
    let params = count_params(&cfg)?;
    let gflops = estimate_flops(&cfg, a.hr_width, a.hr_height)?;
    println!("generator {}", cfg.fingerprint());
    println!("parameters: {params}");
    println!(
        "estimated compute at {}x{}: {gflops:.2} GFLOPs",
        a.hr_width, a.hr_height
    );
    Ok(())
}

/// Side-by-side strip: guide | ground truth | prediction | bicubic baseline,
/// separated by 2px white gutters, all panels rendered as RGB.
fn comparison_strip(panels: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = (panels[0].shape.h, panels[0].shape.w);
    let gutter = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * gutter;
    let shape = lapgsr::Shape::new(1, 3, h, total_w);
    let mut out = vec![1.0f32; shape.numel()];
    for (i, panel) in panels.iter().enumerate() {
        let s = panel.shape;
        if s.h != h || s.w != w {
            return Err(Error::ShapeMismatch {
                op: "comparison_strip",
                a: panels[0].shape,
                b: s,
            });
        }
        let x_off = i * (w + gutter);
        for c in 0..3 {
            let src_c = if s.c == 3 { c } else { 0 };
            for y in 0..h {
                for x in 0..w {
                    out[shape.index(0, c, y, x_off + x)] = panel.data[s.index(0, src_c, y, x)];
                }
            }
        }
    }
    Tensor::new(shape, out)
}

fn cmd_grid(a: &GridArgs) -> Result<()> {
    announce("grid", a, Some(&a.out.join("run_config.json")))?;
    let gen = Generator::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let mode = GuideMode::for_channels(gen.config().channels);
    let dataset = data::load_dataset(&a.data, mode)?;
    if a.ids.is_empty() {
        return Err(Error::Config {
            why: "no ids given".into(),
        });
    }
    for id in &a.ids {
        let sample = dataset
            .train
            .iter()
            .chain(&dataset.val)
            .chain(&dataset.test)
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Dataset {
                why: format!("id {id:?} not found in any split"),
            })?;
        let prediction = gen.infer(&sample.guide, &sample.thermal_lr)?;
        let baseline = metrics::bicubic_baseline(sample)?;
        let strip = comparison_strip(&[&sample.guide, &sample.thermal_hr, &prediction, &baseline])?;
        let path = a.out.join(format!("grid_{id}.png"));
        data::encode_png(&path, &strip)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
