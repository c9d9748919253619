//! Frame-level and clip-level evaluation: SSIM, PSNR, scaled L2, and the
//! best-of-K trajectory protocol.
//!
//! Pixel values live in [-1, 1], so the dynamic range used by SSIM and PSNR
//! is 2. "L2 x 100" is per-pixel MSE scaled by 100.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::{alignment_score, AlignmentConfig};
use crate::video::VideoClip;

const RANGE: f64 = 2.0;
const SSIM_WINDOW: usize = 7;

fn check_geometry(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if (a.t, a.h, a.w, a.c) != (b.t, b.h, b.w, b.c) {
        return Err(Error::ShapeMismatch(format!(
            "clip geometry ({},{},{},{}) vs ({},{},{},{})",
            a.t, a.h, a.w, a.c, b.t, b.h, b.w, b.c
        )));
    }
    Ok(())
}

/// Mean over frames and channels of windowed SSIM with the standard
/// stabilizers C1 = (0.01 L)^2, C2 = (0.03 L)^2 for dynamic range L = 2.
/// Uniform windows of side 7 at every valid position; if a frame is smaller
/// than the window, one window covering the whole frame is used.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_geometry(a, b)?;
    let c1 = (0.01 * RANGE).powi(2);
    let c2 = (0.03 * RANGE).powi(2);
    let win_h = SSIM_WINDOW.min(a.h);
    let win_w = SSIM_WINDOW.min(a.w);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..a.t {
        for ch in 0..a.c {
            for y0 in 0..=(a.h - win_h) {
                for x0 in 0..=(a.w - win_w) {
                    let n = (win_h * win_w) as f64;
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y0 + win_h {
                        for x in x0..x0 + win_w {
                            let va = a.get(t, y, x, ch);
                            let vb = b.get(t, y, x, ch);
                            sx += va;
                            sy += vb;
                            sxx += va * va;
                            syy += vb * vb;
                            sxy += va * vb;
                        }
                    }
                    let mx = sx / n;
                    let my = sy / n;
                    let vx = (sxx / n - mx * mx).max(0.0);
                    let vy = (syy / n - my * my).max(0.0);
                    let cov = sxy / n - mx * my;
                    let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB for range-2 signals: 10 log10(4 / MSE).
/// Identical clips give infinity.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_geometry(a, b)?;
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (RANGE * RANGE / mse).log10())
}

/// Per-pixel mean squared error scaled by 100.
pub fn l2x100(pred: &VideoClip, gt: &VideoClip) -> Result<f64> {
    check_geometry(pred, gt)?;
    Ok(100.0 * pred.mse(gt)?)
}

/// All scores of one sampled trajectory pair against ground truth.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectoryScores {
    pub ssim_a: f64,
    pub ssim_b: f64,
    pub psnr_a: f64,
    pub psnr_b: f64,
    pub l2x100_a: f64,
    pub l2x100_b: f64,
    pub alignment: f64,
}

pub fn score_trajectory(
    pred_a: &VideoClip,
    pred_b: &VideoClip,
    gt_a: &VideoClip,
    gt_b: &VideoClip,
    align_cfg: &AlignmentConfig,
) -> Result<TrajectoryScores> {
    Ok(TrajectoryScores {
        ssim_a: ssim(pred_a, gt_a)?,
        ssim_b: ssim(pred_b, gt_b)?,
        psnr_a: psnr(pred_a, gt_a)?,
        psnr_b: psnr(pred_b, gt_b)?,
        l2x100_a: l2x100(pred_a, gt_a)?,
        l2x100_b: l2x100(pred_b, gt_b)?,
        alignment: alignment_score(pred_a, pred_b, align_cfg)?.score,
    })
}

/// Best-of-K report. Selection is per metric: each field holds the best
/// value that metric achieved over the K trajectories.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim_a: f64,
    pub ssim_b: f64,
    pub psnr_a: f64,
    pub psnr_b: f64,
    pub l2x100_a: f64,
    pub l2x100_b: f64,
    pub alignment_score: f64,
    pub k: usize,
}

pub fn best_of_k(trajectories: &[TrajectoryScores]) -> Result<EvalReport> {
    if trajectories.is_empty() {
        return Err(Error::Domain("best-of-K requires K >= 1 trajectories".into()));
    }
    let max = |f: fn(&TrajectoryScores) -> f64| {
        trajectories.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
    };
    let min =
        |f: fn(&TrajectoryScores) -> f64| trajectories.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        ssim_a: max(|s| s.ssim_a),
        ssim_b: max(|s| s.ssim_b),
        psnr_a: max(|s| s.psnr_a),
        psnr_b: max(|s| s.psnr_b),
        l2x100_a: min(|s| s.l2x100_a),
        l2x100_b: min(|s| s.l2x100_b),
        alignment_score: max(|s| s.alignment),
        k: trajectories.len(),
    })
}

/// Element-wise mean of several reports (all must share K).
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Domain("cannot average zero reports".into()));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        ssim_a: avg(|r| r.ssim_a),
        ssim_b: avg(|r| r.ssim_b),
        psnr_a: avg(|r| r.psnr_a),
        psnr_b: avg(|r| r.psnr_b),
        l2x100_a: avg(|r| r.l2x100_a),
        l2x100_b: avg(|r| r.l2x100_b),
        alignment_score: avg(|r| r.alignment_score),
        k: reports[0].k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{Modality, Role};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_clip(seed: u64) -> VideoClip {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut c = VideoClip::zeros(2, 16, 16, 1, Modality::A, Role::Target);
        for v in c.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        c
    }

    #[test]
    fn ssim_identity_and_ordering() {
        let x = random_clip(1);
        let mut neg = x.clone();
        for v in neg.data.iter_mut() {
            *v = -*v;
        }
        let same = ssim(&x, &x).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &neg).unwrap() < same);
    }

    #[test]
    fn ssim_constant_clips_match_closed_form_and_naive_oracle() {
        let mut a = VideoClip::zeros(1, 16, 16, 1, Modality::A, Role::Target);
        a.data.fill(0.0);
        let mut b = a.clone();
        b.data.fill(0.5);
        let got = ssim(&a, &b).unwrap();
        // closed form: means 0 and 0.5, zero variances ->
        // C1 / (0.25 + C1) with C1 = (0.01 * 2)^2
        let c1 = 0.0004;
        let expect = c1 / (0.25 + c1);
        assert!((got - expect).abs() < 1e-12, "got {} expected {}", got, expect);

        // independent naive oracle over one whole-frame window
        let n = 256.0;
        let mx = a.data.iter().sum::<f64>() / n;
        let my = b.data.iter().sum::<f64>() / n;
        let vx = a.data.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = b.data.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov =
            a.data.iter().zip(&b.data).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let c2 = 0.0036;
        let oracle = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn ssim_bounds() {
        for seed in 0..5 {
            let x = random_clip(seed);
            let y = random_clip(seed + 100);
            let s = ssim(&x, &y).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {} out of range", s);
        }
    }

    #[test]
    fn l2x100_examples() {
        let x = random_clip(2);
        assert_eq!(l2x100(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        for v in y.data.iter_mut() {
            *v += 0.1;
        }
        let got = l2x100(&x, &y).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "delta 0.1 gives {}", got);
        assert_eq!(l2x100(&x, &y).unwrap(), l2x100(&y, &x).unwrap());
    }

    #[test]
    fn psnr_known_value() {
        let x = random_clip(3);
        let mut y = x.clone();
        for v in y.data.iter_mut() {
            *v += 0.2;
        }
        // MSE = 0.04, PSNR = 10 log10(4 / 0.04) = 20 dB
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &x).unwrap().is_infinite());
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let x = random_clip(4);
        let y = VideoClip::zeros(2, 8, 8, 1, Modality::A, Role::Target);
        assert!(ssim(&x, &y).is_err());
        assert!(psnr(&x, &y).is_err());
        assert!(l2x100(&x, &y).is_err());
    }

    fn stub_scores(ssim_v: f64, l2: f64) -> TrajectoryScores {
        TrajectoryScores {
            ssim_a: ssim_v,
            ssim_b: ssim_v,
            psnr_a: 10.0 + ssim_v,
            psnr_b: 10.0 + ssim_v,
            l2x100_a: l2,
            l2x100_b: l2,
            alignment: ssim_v,
        }
    }

    #[test]
    fn best_of_k_protocol() {
        assert!(best_of_k(&[]).is_err());

        let one = [stub_scores(0.5, 2.0)];
        let r1 = best_of_k(&one).unwrap();
        assert_eq!(r1.k, 1);
        assert_eq!(r1.ssim_a, 0.5);
        assert_eq!(r1.l2x100_a, 2.0);

        let mut ten: Vec<_> = (0..9).map(|i| stub_scores(0.1 * i as f64, 5.0 - 0.2 * i as f64)).collect();
        ten.push(stub_scores(1.0, 0.0));
        let r10 = best_of_k(&ten).unwrap();
        assert_eq!(r10.k, 10);
        // one perfect trajectory among K dominates
        assert_eq!(r10.ssim_a, 1.0);
        assert_eq!(r10.l2x100_a, 0.0);
        // max dominance over the K=1 prefix
        assert!(r10.ssim_a >= best_of_k(&ten[..1]).unwrap().ssim_a);
        assert!(r10.l2x100_a <= best_of_k(&ten[..1]).unwrap().l2x100_a);

        // invariant under permutation
        ten.reverse();
        let rrev = best_of_k(&ten).unwrap();
        assert_eq!(r10.ssim_a, rrev.ssim_a);
        assert_eq!(r10.l2x100_b, rrev.l2x100_b);
    }

    #[test]
    fn mean_report_averages() {
        let a = best_of_k(&[stub_scores(0.2, 4.0)]).unwrap();
        let b = best_of_k(&[stub_scores(0.6, 2.0)]).unwrap();
        let m = mean_report(&[a, b]).unwrap();
        assert!((m.ssim_a - 0.4).abs() < 1e-12);
        assert!((m.l2x100_a - 3.0).abs() < 1e-12);
    }
}
