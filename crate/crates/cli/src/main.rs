mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cvmh_core::checkpoint;
use cvmh_core::complexity::network_cost;
use cvmh_core::data::synth::{synth_generate, SynthConfig, PALETTE};
use cvmh_core::data::{emit_prediction, load_image, DatasetManifest};
use cvmh_core::gradcheck::{negative_control, suite};
use cvmh_core::network::{Cvmh, NetworkConfig};
use cvmh_core::scan::ScanMode;
use cvmh_core::train::{evaluate, predict_image, Trainer};
use cvmh_core::{Error, ParamStore, Session, Tensor};
use log::info;
use rand::SeedableRng;
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cvmh", version, about = "Cross-scan Mamba U-Net for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named in a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the dataset and print a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segment one image and write the class map as a palette PPM.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile side; multiple of 32.
        #[arg(long, default_value_t = 256)]
        tile: usize,
    },
    /// Parameter and FLOP counts plus a timed forward pass per scan mode.
    Bench {
        #[arg(long, value_enum, default_value_t = ScanArg::Both)]
        scan: ScanArg,
        #[arg(long, default_value_t = 96)]
        embed_dim: usize,
        /// Side of the timed input.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Finite-difference check of every backward kernel.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Print the resolved model configuration and its cost.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScanArg {
    Ss2d,
    Cs2d,
    Both,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CVMH_THREADS") else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("CVMH_THREADS={v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Io { .. } | Error::Format { .. }) => 4,
        Some(_) => 2,
        None => 1,
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { config, seed, steps, out, resume } => train(&config, seed, steps, out, resume.as_deref())?,
        Command::Eval { config, checkpoint } => eval(&config, checkpoint)?,
        Command::Predict { checkpoint, image, out, tile } => predict(&checkpoint, &image, &out, tile)?,
        Command::Bench { scan, embed_dim, size, repeats } => bench(scan, embed_dim, size, repeats)?,
        Command::Gradcheck { seeds } => return gradcheck(&seeds),
        Command::Inspect { config } => inspect(config.as_deref())?,
        Command::Synth { out, seed, images, size, classes } => {
            let m = synth_generate(&out, &SynthConfig { seed, images, size, classes })?;
            info!("wrote {} pairs to {}", m.pairs.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<cvmh_core::data::Sample>)> {
    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    let samples = manifest.load_samples()?;
    if samples.is_empty() {
        return Err(Error::Config("dataset has no image pairs".into()).into());
    }
    Ok((manifest, samples))
}

fn train(path: &Path, seed: Option<u64>, steps: Option<u64>, out: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if steps.is_some() {
        cfg.train.steps = steps;
    }
    let out = out.unwrap_or(cfg.output_dir.clone());
    let (manifest, samples) = load_dataset(&cfg)?;
    if cfg.train.loss.ignore_index.is_none() {
        cfg.train.loss.ignore_index = manifest.ignore_index;
    }
    if cfg.model.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {}",
            cfg.model.num_classes, manifest.num_classes
        ))
        .into());
    }
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone(), &samples)?,
        None => {
            let mut t = Trainer::new(cfg.model.clone(), cfg.train.clone(), &samples, manifest.normalization())?;
            t.palette = manifest.palette[..manifest.num_classes].to_vec();
            t
        }
    };
    let total = trainer.total_steps();
    info!(
        "training {} tiles for {} steps (starting at {}), writing to {}",
        trainer.num_tiles(),
        total,
        trainer.step_count(),
        out.display()
    );
    let every = (total / 20).max(1);
    let t0 = Instant::now();
    let summary = trainer.fit(Some(&out), |l| {
        if l.step % every == 0 || l.step == total {
            info!("step {}/{total}: loss {:.4} (ce {:.4}, dice {:.4})", l.step, l.total, l.ce, l.dice);
        }
    })?;
    print_json(&json!({
        "steps_run": summary.steps_run,
        "final_step": trainer.step_count(),
        "last_loss": summary.last.map(|l| l.total),
        "best_loss": summary.best.map(|l| l.total),
        "seconds": t0.elapsed().as_secs_f64(),
        "output_dir": out,
    }))
}

fn eval(path: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
    let (manifest, samples) = load_dataset(&cfg)?;
    let mut loaded = checkpoint::load(&ckpt)?;
    let ignore = loaded.meta.ignore_index.or(manifest.ignore_index);
    let cm = evaluate(&loaded.model, &mut loaded.store, &samples, &loaded.meta.normalization, cfg.train.tile, ignore)?;
    let report = cm.report(ignore)?;
    info!("OA {:.4}, mIoU {:.4}, mF1 {:.4}", report.oa, report.miou, report.mf1);
    print_json(&json!({
        "checkpoint": ckpt,
        "step": loaded.meta.step,
        "images": samples.len(),
        "class_names": manifest.class_names,
        "metrics": report,
    }))
}

fn predict(ckpt: &Path, image: &Path, out: &Path, tile: usize) -> Result<()> {
    let mut loaded = checkpoint::load(ckpt)?;
    let img = load_image(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let spec = cvmh_core::data::TileSpec { size: tile, stride: tile };
    let classes = predict_image(&loaded.model, &mut loaded.store, &img, &loaded.meta.normalization, spec)?;
    let palette = if loaded.meta.palette.is_empty() { PALETTE.to_vec() } else { loaded.meta.palette.clone() };
    emit_prediction(out, &classes, h, w, &palette)?;
    info!("wrote {h}x{w} class map to {}", out.display());
    Ok(())
}

fn bench(scan: ScanArg, embed_dim: usize, size: usize, repeats: usize) -> Result<()> {
    let modes: &[ScanMode] = match scan {
        ScanArg::Ss2d => &[ScanMode::Ss2d],
        ScanArg::Cs2d => &[ScanMode::Cs2d],
        ScanArg::Both => &[ScanMode::Ss2d, ScanMode::Cs2d],
    };
    let mut rows = Vec::new();
    for &mode in modes {
        let cfg = NetworkConfig { embed_dim, scan_mode: mode, ..NetworkConfig::default() };
        cfg.validate()?;
        let reference = network_cost(&cfg, cfg.input_size[0], cfg.input_size[1]);
        let timed = network_cost(&cfg, size, size);
        let mut store = ParamStore::<f32>::new();
        let model = Cvmh::new(&mut store, cfg.clone(), 0)?;
        let x = Tensor::randn([1, cfg.in_channels, size, size], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let mut s = Session::inference(&mut store);
            let xv = s.constant(x.clone());
            model.forward(&mut s, &xv)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        rows.push(json!({
            "scan": mode,
            "params": reference.params,
            "flops": reference.macs,
            "reference_input": cfg.input_size,
            "timed_input": [size, size],
            "timed_flops": timed.macs,
            "forward_ms_median": times[times.len() / 2],
        }));
    }
    if rows.len() == 2 && (rows[0]["params"] != rows[1]["params"] || rows[0]["flops"] != rows[1]["flops"]) {
        bail!("scan modes disagree on cost: {} vs {}", rows[0], rows[1]);
    }
    print_json(&rows)
}

fn gradcheck(seeds: &[u64]) -> Result<ExitCode> {
    let reports = suite::run_suite(seeds)?;
    let control = negative_control(seeds.first().copied().unwrap_or(0))?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{}[{}]", r.name, r.seed)).collect();
    let control_caught = !control.passed();
    print_json(&json!({
        "checks": reports,
        "negative_control": control,
        "failed": failed,
    }))?;
    if !control_caught {
        log::error!("the corrupted kernel passed; the checker is broken");
    }
    if !failed.is_empty() {
        log::error!("{} checks failed: {}", failed.len(), failed.join(", "));
    }
    Ok(if failed.is_empty() && control_caught { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn inspect(path: Option<&Path>) -> Result<()> {
    let model = match path {
        Some(p) => RunConfig::load(p)?.model,
        None => NetworkConfig::default(),
    };
    model.validate()?;
    let [h, w] = model.input_size;
    let cost = network_cost(&model, h, w);
    let stages: Vec<_> = model
        .stage_plan(h, w)
        .iter()
        .map(|&(c, sh, sw)| json!({ "channels": c, "height": sh, "width": sw }))
        .collect();
    print_json(&json!({
        "model": model,
        "params": cost.params,
        "flops": cost.macs,
        "encoder_stages": stages,
    }))
}
