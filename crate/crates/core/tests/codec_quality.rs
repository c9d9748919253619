//! Reconstruction quality of the trained codec on held-out clips of the
//! synthetic world at 32x32, T=4.

use paircast::codec::{train_codec, Codec, TrainableCodec};
use paircast::metrics::{psnr, ssim};
use paircast::toyworld::{generate_clip, WorldConfig};
use paircast::video::{Modality, VideoClip};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn world() -> WorldConfig {
    WorldConfig { t: 4, h: 32, w: 32, ..WorldConfig::default() }
}

fn clips(range: std::ops::Range<u64>, modality: Modality) -> Vec<VideoClip> {
    let cfg = world();
    range
        .map(|s| {
            let pair = generate_clip(s, &cfg).unwrap();
            if modality == Modality::A {
                pair.clip_a
            } else {
                pair.clip_b
            }
        })
        .collect()
}

#[test]
fn trained_codec_reconstructs_heldout_clips() {
    let train = clips(100..148, Modality::A);
    let held = clips(900..908, Modality::A);
    let mut codec = TrainableCodec::new(4, 32, 32, 1, 4, 24, 96, 7).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let losses = train_codec(&mut codec, &train, 4000, 8, 2e-3, &mut rng).unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    let codec = Codec::Trained(codec);
    let (mut mean_ssim, mut mean_psnr) = (0.0, 0.0);
    for clip in &held {
        let rec = codec.decode(&codec.encode(clip).unwrap()).unwrap();
        mean_ssim += ssim(&rec, clip).unwrap();
        mean_psnr += psnr(&rec, clip).unwrap();
    }
    mean_ssim /= held.len() as f64;
    mean_psnr /= held.len() as f64;
    println!("held-out recon: ssim {:.4}, psnr {:.2} dB", mean_ssim, mean_psnr);
    assert!(mean_ssim >= 0.9, "held-out SSIM {:.4} below 0.9", mean_ssim);
    assert!(mean_psnr >= 28.0, "held-out PSNR {:.2} dB below 28", mean_psnr);
}
