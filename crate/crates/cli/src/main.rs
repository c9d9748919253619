//! Command-line harness: data generation, two-stage training, sampling,
//! evaluation sweeps, ablations, benchmarking, and plot emission.

mod viz;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use paircast::checkpoint::{self, CheckpointMeta};
use paircast::config::{CodecKind, ExperimentConfig, Variant};
use paircast::metrics::{psnr, ssim, EvalReport};
use paircast::train::{
    bench_attention, build_codecs, build_dataset, eval_noise_robustness, evaluate_bundle,
    rescale_sigma_to_toy, rollout_bundle, run_ablation, run_stage1_branch, run_two_stage,
    stage_checkpoint_exists, EvalOptions, ModelBundle,
};
use paircast::video::{Modality, Role};
use paircast::{Error, Result};

#[derive(Parser)]
#[command(name = "paircast", version, about = "Synchronized two-modality video prediction")]
struct Cli {
    /// TOML experiment configuration (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// override the configured experiment seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// output directory for checkpoints, reports, and plots
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// experiment variant, e.g. joint_stca or single_A
    #[arg(long, global = true)]
    variant: Option<String>,

    /// resume from stage checkpoints in the output directory
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired-modality dataset and preview images
    GenData,
    /// Train the per-modality latent codecs and report reconstruction quality
    TrainCodec,
    /// Stage 1: train one single-modality branch (select with --variant)
    TrainSingle,
    /// Stage 2: joint fine-tuning on top of stage-1 checkpoints
    TrainJoint,
    /// Sample an autoregressive rollout from a trained bundle
    Sample {
        /// number of future frames to predict
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Evaluate a trained bundle on the held-out test split
    Evaluate {
        /// zero out the modality-A conditioning
        #[arg(long)]
        mask_a: bool,
        /// zero out the modality-B conditioning
        #[arg(long)]
        mask_b: bool,
        /// Gaussian pixel noise on the modality-B conditioning
        #[arg(long, default_value_t = 0.0)]
        sigma_b: f64,
    },
    /// Train and evaluate ablation variants under an identical budget
    Ablate,
    /// Exact attention cost model plus measured wall clock per geometry
    BenchAttention {
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Metric table over increasing conditioning noise on modality B
    NoiseSweep,
    /// Render PNG charts from the CSV reports in the output directory
    Plot,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    });
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidGeometry(_)
        | Error::InvalidSchedule(_)
        | Error::Domain(_)
        | Error::IncompatibleCheckpoint(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.variant {
        cfg.variant = Some(Variant::from_name(name)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::GenData => gen_data(&cfg, &cli.out),
        Cmd::TrainCodec => train_codec_cmd(&cfg, &cli.out),
        Cmd::TrainSingle => train_single_cmd(&cfg, &cli.out, cli.resume),
        Cmd::TrainJoint => train_joint_cmd(&cfg, &cli.out, cli.resume),
        Cmd::Sample { frames } => sample_cmd(&cfg, &cli.out, *frames),
        Cmd::Evaluate { mask_a, mask_b, sigma_b } => {
            evaluate_cmd(&cfg, &cli.out, *mask_a, *mask_b, *sigma_b)
        }
        Cmd::Ablate => ablate_cmd(&cfg, &cli.out, cli.resume),
        Cmd::BenchAttention { reps } => bench_cmd(&cfg, &cli.out, *reps),
        Cmd::NoiseSweep => noise_sweep_cmd(&cfg, &cli.out),
        Cmd::Plot => plot_cmd(&cli.out),
    }
}

// ---------------------------------------------------------------------------
// file helpers

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("iter,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    fs::write(path, text)?;
    Ok(())
}

const EVAL_HEADER: &str = "label,ssim_a,ssim_b,psnr_a,psnr_b,l2x100_a,l2x100_b,alignment,k\n";

fn eval_csv_row(label: &str, r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        label, r.ssim_a, r.ssim_b, r.psnr_a, r.psnr_b, r.l2x100_a, r.l2x100_b, r.alignment_score,
        r.k
    )
}

fn bundle_path(out: &Path) -> PathBuf {
    out.join("bundle.json")
}

fn load_bundle(cfg: &ExperimentConfig, out: &Path) -> Result<ModelBundle> {
    let path = bundle_path(out);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no trained bundle at {}; run train-joint first",
            path.display()
        )));
    }
    let bundle = ModelBundle::load(&path)?;
    bundle.verify_config(cfg)?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// subcommands

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dataset = build_dataset(cfg)?;
    write_json(&out.join("manifest.json"), &dataset.manifest)?;
    for (i, clip) in dataset.train.iter().take(4).enumerate() {
        viz::save_preview(&out.join(format!("preview_train_{}.png", i)), &[&clip.clip_a, &clip.clip_b])?;
    }
    println!(
        "generated {} train / {} val / {} test clips ({} frames of {}x{})",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        cfg.world.t + cfg.train.cond_frames,
        cfg.world.h,
        cfg.world.w
    );
    Ok(())
}

fn train_codec_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.codec.kind = CodecKind::Trained;
    let dataset = build_dataset(&cfg)?;
    let (codec_a, codec_b) = build_codecs(&cfg, &dataset.train)?;
    let meta = |label: &str| CheckpointMeta {
        kind: "codec".into(),
        config_hash: cfg.hash(),
        arch_fingerprint: label.into(),
        seed: cfg.seed,
        step: cfg.codec.iterations as u64,
    };
    checkpoint::save(&out.join("codec_A.ckpt.json"), meta("codec_A"), &codec_a)?;
    checkpoint::save(&out.join("codec_B.ckpt.json"), meta("codec_B"), &codec_b)?;

    let recon = |codec: &paircast::codec::Codec, modality: Modality| -> Result<(f64, f64)> {
        let (mut s, mut p) = (0.0, 0.0);
        for clip in &dataset.val {
            let src = if modality == Modality::A { &clip.clip_a } else { &clip.clip_b };
            let target = src.window(cfg.train.cond_frames, cfg.world.t, Role::Target)?;
            let rec = codec.decode(&codec.encode(&target)?)?;
            s += ssim(&rec, &target)?;
            p += psnr(&rec, &target)?;
        }
        let n = dataset.val.len() as f64;
        Ok((s / n, p / n))
    };
    let (ssim_a, psnr_a) = recon(&codec_a, Modality::A)?;
    let (ssim_b, psnr_b) = recon(&codec_b, Modality::B)?;
    write_json(
        &out.join("codec_report.json"),
        &serde_json::json!({
            "val_ssim_a": ssim_a, "val_psnr_a": psnr_a,
            "val_ssim_b": ssim_b, "val_psnr_b": psnr_b,
            "iterations": cfg.codec.iterations,
        }),
    )?;
    println!(
        "codec recon (val): A ssim={:.4} psnr={:.2}dB, B ssim={:.4} psnr={:.2}dB",
        ssim_a, psnr_a, ssim_b, psnr_b
    );
    Ok(())
}

fn train_single_cmd(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let modality = match cfg.variant {
        None | Some(Variant::SingleA) => Modality::A,
        Some(Variant::SingleB) => Modality::B,
        Some(v) => {
            return Err(Error::Config(format!(
                "train-single expects single_A or single_B, got {}",
                v
            )))
        }
    };
    let label = if modality == Modality::A { "stage1_A" } else { "stage1_B" };
    let losses = run_stage1_branch(cfg, modality, Some(out), resume)?;
    write_loss_csv(&out.join(format!("losses_{}.csv", label)), &losses)?;
    println!(
        "{}: {} iterations, final loss {:.4}",
        label,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_joint_cmd(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let mut cfg = cfg.clone();
    let variant = cfg.variant.unwrap_or(Variant::JointStca);
    cfg.variant = Some(variant);
    if variant.is_single() {
        return Err(Error::Config("train-joint expects a joint variant".into()));
    }
    if variant.pretrain()
        && !(stage_checkpoint_exists(out, "stage1_A") && stage_checkpoint_exists(out, "stage1_B"))
    {
        return Err(Error::Config(
            "stage-1 checkpoints missing; run train-single for both modalities first".into(),
        ));
    }
    // joint training always resumes the stage-1 checkpoints it builds on
    let resume = resume || variant.pretrain();
    let result = run_two_stage(&cfg, Some(out), resume)?;
    result.bundle.save(&bundle_path(out), cfg.seed)?;
    if !result.stage2_losses.is_empty() {
        write_loss_csv(
            &out.join(format!("losses_stage2_{}.csv", variant.name())),
            &result.stage2_losses,
        )?;
    }
    println!(
        "{}: trained to step {}, final joint loss {:.4}",
        variant,
        result.bundle.step,
        result.stage2_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sample_cmd(cfg: &ExperimentConfig, out: &Path, frames: Option<usize>) -> Result<()> {
    let bundle = load_bundle(cfg, out)?;
    let dataset = build_dataset(cfg)?;
    let clip = dataset
        .test
        .first()
        .ok_or_else(|| Error::Config("test split is empty".into()))?;
    let cond = cfg.train.cond_frames;
    let p_total = frames.unwrap_or(cfg.world.t);
    let past_a = clip.clip_a.window(0, cond, Role::Condition)?;
    let past_b = clip.clip_b.window(0, cond, Role::Condition)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5a5a);
    let (pred_a, pred_b) =
        rollout_bundle(&bundle, &past_a, &past_b, p_total, cfg.sample.steps, cfg.sample.eta, &mut rng)?;
    viz::save_preview(&out.join("sample_pred.png"), &[&pred_a, &pred_b])?;
    let gt_len = p_total.min(clip.clip_a.t - cond);
    if gt_len > 0 {
        let gt_a = clip.clip_a.window(cond, gt_len, Role::Target)?;
        let gt_b = clip.clip_b.window(cond, gt_len, Role::Target)?;
        viz::save_preview(&out.join("sample_gt.png"), &[&gt_a, &gt_b])?;
    }
    println!("sampled {} future frames into {}", p_total, out.display());
    Ok(())
}

fn evaluate_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    mask_a: bool,
    mask_b: bool,
    sigma_b: f64,
) -> Result<()> {
    let bundle = load_bundle(cfg, out)?;
    let dataset = build_dataset(cfg)?;
    let opts = EvalOptions {
        mask_a,
        mask_b,
        sigma_b,
        k: cfg.sample.k,
        steps: cfg.sample.steps,
        eta: cfg.sample.eta,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let report = evaluate_bundle(&bundle, cfg, &dataset.test, &opts, &mut rng)?;
    write_json(&out.join("eval.json"), &report)?;
    fs::write(
        out.join("eval.csv"),
        format!("{}{}", EVAL_HEADER, eval_csv_row(bundle.variant.name(), &report)),
    )?;
    println!(
        "{}: ssim A/B {:.4}/{:.4}, psnr {:.2}/{:.2}, l2x100 {:.3}/{:.3}, alignment {:.4}",
        bundle.variant,
        report.ssim_a,
        report.ssim_b,
        report.psnr_a,
        report.psnr_b,
        report.l2x100_a,
        report.l2x100_b,
        report.alignment_score
    );
    Ok(())
}

fn ablate_cmd(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let variants: Vec<Variant> = match cfg.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut csv = String::from(EVAL_HEADER);
    let mut reports = Vec::new();
    for variant in variants {
        let vdir = out.join(variant.name());
        fs::create_dir_all(&vdir)?;
        let report = run_ablation(variant, cfg, Some(&vdir), resume)?;
        println!(
            "{}: final loss {:.4}, ssim A/B {:.4}/{:.4}, alignment {:.4}",
            variant,
            report.final_loss,
            report.eval.ssim_a,
            report.eval.ssim_b,
            report.eval.alignment_score
        );
        csv.push_str(&eval_csv_row(variant.name(), &report.eval));
        reports.push(report);
    }
    fs::write(out.join("ablations.csv"), csv)?;
    write_json(&out.join("ablations.json"), &reports)?;
    Ok(())
}

fn bench_cmd(cfg: &ExperimentConfig, out: &Path, reps: usize) -> Result<()> {
    let geometries = [(8, 64, 64, 4), (8, 128, 128, 4)];
    let rows = bench_attention(&geometries, cfg.model.width, cfg.model.heads, reps)?;
    let mut csv = String::from("t,h,w,patch,stca_flops,ca_flops,ratio,stca_ms,ca_ms\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t, r.h, r.w, r.patch, r.stca_flops, r.ca_flops, r.ratio, r.stca_ms, r.ca_ms
        ));
        println!(
            "T={} {}x{} P={}: cost ratio {:.4}, wall {:.2}ms vs {:.2}ms",
            r.t, r.h, r.w, r.patch, r.ratio, r.stca_ms, r.ca_ms
        );
    }
    fs::write(out.join("bench_attention.csv"), csv)?;
    Ok(())
}

fn noise_sweep_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bundle = load_bundle(cfg, out)?;
    let dataset = build_dataset(cfg)?;
    let sigmas: Vec<f64> = [0.0, 2.5, 5.0].iter().map(|&s| rescale_sigma_to_toy(s)).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x50ee);
    let table = eval_noise_robustness(&bundle, cfg, &dataset.test, &sigmas, &mut rng)?;
    let mut csv = String::from("sigma,ssim_a,ssim_b,psnr_a,psnr_b,l2x100_a,l2x100_b,alignment\n");
    for (sigma, r) in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            sigma, r.ssim_a, r.ssim_b, r.psnr_a, r.psnr_b, r.l2x100_a, r.l2x100_b,
            r.alignment_score
        ));
        println!("sigma {:.4}: ssim A/B {:.4}/{:.4}, alignment {:.4}", sigma, r.ssim_a, r.ssim_b, r.alignment_score);
    }
    fs::write(out.join("noise_sweep.csv"), csv)?;
    plot_noise_sweep(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// plotting

fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for line in lines {
        for (i, field) in line.split(',').enumerate() {
            if i < cols.len() {
                cols[i].push(field.parse().unwrap_or(f64::NAN));
            }
        }
    }
    Ok((header, cols))
}

fn plot_noise_sweep(out: &Path) -> Result<()> {
    let path = out.join("noise_sweep.csv");
    if !path.exists() {
        return Ok(());
    }
    let (header, cols) = read_csv_columns(&path)?;
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    let series: Vec<viz::Series> = header
        .iter()
        .zip(cols.iter())
        .skip(1)
        .filter(|(name, _)| name.starts_with("ssim") || *name == "alignment")
        .map(|(_, col)| viz::Series { x: cols[0].clone(), y: col.clone() })
        .collect();
    viz::line_chart(&plots.join("noise_sweep.png"), &series)
}

fn plot_cmd(out: &Path) -> Result<()> {
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    let mut made = 0;
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        if name.starts_with("losses_") && name.ends_with(".csv") {
            let (_, cols) = read_csv_columns(&path)?;
            if cols.len() < 2 || cols[1].is_empty() {
                continue;
            }
            let series = viz::Series { x: cols[0].clone(), y: cols[1].clone() };
            let png = plots.join(format!("{}.png", name.trim_end_matches(".csv")));
            viz::line_chart(&png, &[series])?;
            made += 1;
        }
    }
    if out.join("noise_sweep.csv").exists() {
        plot_noise_sweep(out)?;
        made += 1;
    }
    println!("rendered {} chart(s) into {}", made, plots.display());
    Ok(())
}
