use paircast::config::{CodecKind, ExperimentConfig, Variant};
use paircast::diffusion::ScheduleKind;
use paircast::train::{build_dataset, evaluate_bundle, final_loss, run_two_stage, EvalOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(24000);
    let s2: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let dir = args.get(3).cloned().unwrap_or_else(|| "/tmp/probeS".into());
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let variant = match args.get(5).map(|s| s.as_str()) {
        Some("vanilla") => Variant::JointVanillaCa,
        Some("noguid") => Variant::JointNoGuidance,
        Some("indep") => Variant::JointIndependentNoise,
        Some("singleb") => Variant::SingleB,
        _ => Variant::JointStca,
    };

    let mut c = ExperimentConfig::default();
    c.world.t = 8;
    c.world.h = 32;
    c.world.w = 32;
    c.seed = 101;
    c.model.width = 64;
    c.codec.kind = CodecKind::Trained;
    c.codec.iterations = 1500;
    c.codec.lr = 2e-3;
    c.schedule.t_diff = 100;
    c.schedule.shape = ScheduleKind::Linear { beta_start: 1e-3, beta_end: 0.05 };
    c.train.lr = lr;
    c.train.stage2_lr = args.get(6).and_then(|s| s.parse().ok());
    c.train.stage1_iters = s1;
    c.train.stage2_iters = s2;
    c.train.batch = 4;
    c.train.n_train = 24;
    c.train.n_val = 2;
    c.train.n_test = 6;
    c.train.ckpt_every = 2000;
    c.variant = Some(variant);

    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir).unwrap();
    let t0 = Instant::now();
    let res = run_two_stage(&c, Some(dir), true).unwrap();
    println!(
        "{:?} train {:.0}s  s1A {:.4} s1B {:.4} s2 {:.4} (per-elem)",
        variant,
        t0.elapsed().as_secs_f64(),
        final_loss(&res.stage1_losses_a) / 768.0,
        final_loss(&res.stage1_losses_b) / 768.0,
        final_loss(&res.stage2_losses) / 768.0
    );

    let d = build_dataset(&c).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let clean =
        evaluate_bundle(&res.bundle, &c, &d.test, &EvalOptions::clean(1, 25), &mut rng).unwrap();
    println!(
        "clean@25: ssimA {:.3} l2A {:.2} l2B {:.2} align {:.3}",
        clean.ssim_a, clean.l2x100_a, clean.l2x100_b, clean.alignment_score
    );
    for steps in [25usize, 100] {
        let mut mo = EvalOptions::clean(1, steps);
        mo.mask_b = true;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let masked = evaluate_bundle(&res.bundle, &c, &d.test, &mo, &mut rng).unwrap();
        println!(
            "maskedB@{}: l2A {:.2} l2B {:.2} align {:.3}",
            steps, masked.l2x100_a, masked.l2x100_b, masked.alignment_score
        );
    }
}
