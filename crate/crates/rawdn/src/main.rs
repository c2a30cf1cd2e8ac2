//! `rawdn`: command-line front end for the raw-video denoising pipeline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rawdn::denoise_net::{
    count_macs, count_params, denoise_sequence, load_weights, save_weights,
};
use rawdn::error::{Error, Result};
use rawdn::metrics::{evaluate, EvalPair};
use rawdn::noise_model::{add_noise, calibrate, NoiseParams};
use rawdn::raw_data::{read_sequence, write_sequence};
use rawdn::train_engine::{gradcheck, sample_crops, synth_scene, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "rawdn", version, about = "Multi-scale recursive raw-video denoiser")]
struct Cli {
    /// Cap the worker thread count; 1 guarantees bit-reproducibility.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate clean/noisy synthetic scene pairs plus a manifest.
    Simulate {
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Raw-domain dimensions as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Maximum per-frame shift in packed pixels.
        #[arg(long, default_value_t = 2)]
        motion: usize,
        #[arg(long = "noise-a", default_value_t = 0.01)]
        noise_a: f64,
        #[arg(long = "noise-b", default_value_t = 0.0004)]
        noise_b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate noise parameters from flat-field stacks (*.rvds in a dir).
    Calibrate {
        #[arg(long)]
        flats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a simulate-produced directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        /// JSON file overriding the preset; CLI flags override both.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long = "seq-len")]
        seq_len: Option<usize>,
        #[arg(long = "crops-per-scene")]
        crops_per_scene: Option<usize>,
        #[arg(long)]
        scales: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise one RVDS sequence with a trained checkpoint.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "noise-a")]
        noise_a: f64,
        #[arg(long = "noise-b")]
        noise_b: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint over a simulate-produced directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print checkpoint tensors and resource counts.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Raw-domain dimensions as HxW for the MAC count.
        #[arg(long, default_value = "1920x1080")]
        size: String,
        #[arg(long, default_value_t = 25)]
        frames: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestScene {
    id: usize,
    clean: String,
    noisy: String,
    scene_seed: u64,
    noise_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    frames: usize,
    raw_height: usize,
    raw_width: usize,
    motion: usize,
    noise_a: f64,
    noise_b: f64,
    scenes: Vec<ManifestScene>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size must be HxW, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad size component {v:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let f = File::open(&path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    scenes: usize,
    frames: usize,
    size: &str,
    motion: usize,
    noise_a: f64,
    noise_b: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (raw_h, raw_w) = parse_size(size)?;
    let params = NoiseParams::new(noise_a, noise_b)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest {
        seed,
        frames,
        raw_height: raw_h,
        raw_width: raw_w,
        motion,
        noise_a,
        noise_b,
        scenes: Vec::new(),
    };
    for i in 0..scenes {
        let scene_seed = seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let clean = synth_scene(scene_seed, frames, raw_h, raw_w, motion)?;
        let noise_seed = scene_seed ^ 0x5555_5555_5555_5555;
        let noisy = add_noise(&clean, &params, noise_seed)?;
        let clean_name = format!("scene_{i:03}_clean.rvds");
        let noisy_name = format!("scene_{i:03}_noisy.rvds");
        write_sequence(&clean, out.join(&clean_name))?;
        write_sequence(&noisy, out.join(&noisy_name))?;
        manifest.scenes.push(ManifestScene {
            id: i,
            clean: clean_name,
            noisy: noisy_name,
            scene_seed,
            noise_seed,
        });
    }
    write_json(&manifest, &out.join("manifest.json"))?;
    println!("wrote {scenes} scene pairs to {}", out.display());
    Ok(())
}

fn cmd_calibrate(flats: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(flats)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rvds"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no .rvds files in {}", flats.display())));
    }
    let stacks: Vec<_> = paths.iter().map(read_sequence).collect::<Result<_>>()?;
    let result = calibrate(&stacks)?;
    write_json(&result, out)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn build_train_config(preset: &str, config: Option<&Path>) -> Result<TrainConfig> {
    let base = match preset {
        "full" => TrainConfig::full(),
        "desk" => TrainConfig::desk(),
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    if let Some(path) = config {
        let f = File::open(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    } else {
        Ok(base)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    preset: &str,
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
    lr: Option<f64>,
    crop: Option<usize>,
    seq_len: Option<usize>,
    crops_per_scene: Option<usize>,
    scales: Option<usize>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let mut cfg = build_train_config(preset, config)?;
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = batch {
        cfg.batch_size = v;
    }
    if let Some(v) = lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = crop {
        cfg.crop = v;
    }
    if let Some(v) = seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = crops_per_scene {
        cfg.crops_per_scene = v;
    }
    if let Some(v) = scales {
        cfg.scales = v;
    }
    cfg.validate()?;
    log::info!("resolved train config: {}", serde_json::to_string(&cfg)?);

    let manifest = read_manifest(data)?;
    let params = NoiseParams::new(manifest.noise_a, manifest.noise_b)?;
    if manifest.scenes.len() < 2 {
        return Err(Error::Config("need at least 2 scenes (last is held out)".into()));
    }
    // Last scene is held out for validation.
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (idx, scene) in manifest.scenes.iter().enumerate() {
        let clean = read_sequence(data.join(&scene.clean))?;
        let crops = sample_crops(&clean, &cfg, &params, cfg.seed.wrapping_add(scene.id as u64))?;
        if idx + 1 == manifest.scenes.len() {
            val_set.extend(crops);
        } else {
            train_set.extend(crops);
        }
    }
    let (weights, log) = train(&cfg, &train_set, &val_set)?;
    save_weights(&weights, out)?;
    if let Some(path) = log_path {
        let mut f = BufWriter::new(File::create(path)?);
        for record in &log {
            serde_json::to_writer(&mut f, record)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    let last = log.last().expect("nonempty log");
    println!("{}", serde_json::to_string(last)?);
    Ok(())
}

fn cmd_denoise(ckpt: &Path, input: &Path, noise_a: f64, noise_b: f64, out: &Path) -> Result<()> {
    let w = load_weights(ckpt)?;
    let params = NoiseParams::new(noise_a, noise_b)?;
    let seq = read_sequence(input)?;
    let denoised = denoise_sequence(&seq, &params, &w)?;
    write_sequence(&denoised, out)?;
    println!("denoised {} frames to {}", denoised.len(), out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let w = load_weights(ckpt)?;
    let manifest = read_manifest(data)?;
    let params = NoiseParams::new(manifest.noise_a, manifest.noise_b)?;
    let pairs: Vec<EvalPair> = manifest
        .scenes
        .iter()
        .map(|s| {
            Ok(EvalPair {
                noisy: read_sequence(data.join(&s.noisy))?,
                clean: read_sequence(data.join(&s.clean))?,
                params: params.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let report = evaluate(&w, &pairs)?;
    write_json(&report, report_path)?;
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "noisy_psnr": report.mean.noisy.mean_psnr,
            "model_psnr": report.mean.model.mean_psnr,
            "noisy_ssim": report.mean.noisy.mean_ssim,
            "model_ssim": report.mean.model.mean_ssim,
        }))?
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = gradcheck(seed)?;
    println!("{}", serde_json::to_string(&report)?);
    if report.max_rel_err >= 1e-4 {
        return Err(Error::NonFinite { iter: 0, tensor: format!(
            "gradient check failed: max relative error {:.3e} at {}",
            report.max_rel_err, report.worst_tensor
        )});
    }
    Ok(())
}

fn cmd_inspect(ckpt: &Path, size: &str, frames: usize) -> Result<()> {
    let w = load_weights(ckpt)?;
    let (raw_h, raw_w) = parse_size(size)?;
    let tensors: Vec<serde_json::Value> = w
        .to_named()
        .iter()
        .map(|(name, t)| serde_json::json!({ "name": name, "shape": t.shape() }))
        .collect();
    let info = serde_json::json!({
        "tensors": tensors,
        "config": w.config,
        "params": count_params(&w),
        "macs": count_macs(&w, raw_h, raw_w, frames),
        "size": format!("{raw_h}x{raw_w}"),
        "frames": frames,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::NonFinite { .. }
        | Error::Singular(_)
        | Error::DegenerateNoiseParams
        | Error::RankDeficient(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    log::info!("resolved command: {:?}", cli.command);
    match &cli.command {
        Command::Simulate { scenes, frames, size, motion, noise_a, noise_b, seed, out } => {
            cmd_simulate(*scenes, *frames, size, *motion, *noise_a, *noise_b, *seed, out)
        }
        Command::Calibrate { flats, out } => cmd_calibrate(flats, out),
        Command::Train {
            data,
            preset,
            config,
            epochs,
            seed,
            batch,
            lr,
            crop,
            seq_len,
            crops_per_scene,
            scales,
            out,
            log,
        } => cmd_train(
            data,
            preset,
            config.as_deref(),
            *epochs,
            *seed,
            *batch,
            *lr,
            *crop,
            *seq_len,
            *crops_per_scene,
            *scales,
            out,
            log.as_deref(),
        ),
        Command::Denoise { ckpt, input, noise_a, noise_b, out } => {
            cmd_denoise(ckpt, input, *noise_a, *noise_b, out)
        }
        Command::Eval { ckpt, data, report } => cmd_eval(ckpt, data, report),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::Inspect { ckpt, size, frames } => cmd_inspect(ckpt, size, *frames),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RAWDN_LOG")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "code": 2 }));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "code": code }));
            ExitCode::from(code)
        }
    }
}
