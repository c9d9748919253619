//! Noise schedules, the shared-noise forward process, diffusion losses, and
//! DDIM reverse sampling with autoregressive rollout.
//!
//! The forward process is z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. In
//! joint training one eps draw is shared by both modality branches.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_diff: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alpha up to step t; abar(0) = 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_diff {
            return Err(Error::Domain(format!(
                "diffusion step {} outside [1, {}]",
                t, self.t_diff
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(t_diff: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_diff < 1 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear { beta_start, beta_end } => (0..t_diff)
            .map(|i| {
                if t_diff == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_diff - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / t_diff as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (1..=t_diff)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999))
                .collect()
        }
    };
    if beta.iter().any(|&b| b <= 0.0 || b >= 1.0) {
        return Err(Error::InvalidSchedule("beta values must lie in (0, 1)".into()));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_diff);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sched = NoiseSchedule { t_diff, beta, alpha, alpha_bar };
    // invariant audit: range, monotonicity, recomputation equality
    let mut prev = 1.0;
    let mut check = 1.0;
    for t in 1..=t_diff {
        let ab = sched.alpha_bar(t);
        check *= sched.alpha(t);
        if !(0.0 < ab && ab < 1.0 && ab < prev) {
            return Err(Error::InvalidSchedule(format!("alpha_bar not strictly decreasing at t={}", t)));
        }
        if (ab - check).abs() > 1e-12 * check.max(1e-300) {
            return Err(Error::InvalidSchedule("alpha_bar product recomputation mismatch".into()));
        }
        prev = ab;
    }
    Ok(sched)
}

/// One standard-normal draw, reused for both branches of a joint step.
pub fn sample_shared_noise(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Mat {
    Mat::randn(rows, cols, 1.0, rng)
}

/// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps for an explicit abar value.
pub fn forward_diffuse_with(z0: &Mat, eps: &Mat, alpha_bar: f64) -> Result<Mat> {
    if (z0.rows, z0.cols) != (eps.rows, eps.cols) {
        return Err(Error::ShapeMismatch("noise shape does not match latent".into()));
    }
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    Ok(z0.zip(eps, |z, e| sa * z + sn * e))
}

pub fn forward_diffuse(z0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    forward_diffuse_with(z0, eps, sched.alpha_bar(t))
}

/// Mean over the batch of the summed squared error between predicted and
/// actual noise. A non-finite value aborts with a numerical error.
pub fn single_loss(preds: &[Mat], targets: &[Mat]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch("loss needs equal non-empty batches".into()));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if (p.rows, p.cols) != (t.rows, t.cols) {
            return Err(Error::ShapeMismatch("prediction shape mismatch in batch".into()));
        }
        total += p.zip(t, |a, b| a - b).sq_norm();
    }
    let loss = total / preds.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite diffusion loss".into()));
    }
    Ok(loss)
}

/// Sum of the two branch losses.
pub fn joint_loss(
    preds_a: &[Mat],
    targets_a: &[Mat],
    preds_b: &[Mat],
    targets_b: &[Mat],
) -> Result<f64> {
    Ok(single_loss(preds_a, targets_a)? + single_loss(preds_b, targets_b)?)
}

/// Joint noise predictor: both branches evaluated in lockstep at one step.
pub trait JointEps {
    fn eps_pair(
        &self,
        z_a: &Mat,
        z_b: &Mat,
        c_a: &Mat,
        c_b: &Mat,
        t: usize,
    ) -> Result<(Mat, Mat)>;
}

/// Uniform-stride DDIM step subset over [1, T_diff], descending.
pub fn ddim_steps(t_diff: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_diff {
        return Err(Error::Domain(format!(
            "DDIM steps {} outside [1, T_diff={}]",
            steps, t_diff
        )));
    }
    let mut ts: Vec<usize> = (1..=steps).map(|i| i * t_diff / steps).rev().collect();
    ts.dedup();
    Ok(ts)
}

fn ddim_update(z: &Mat, eps: &Mat, ab_t: f64, ab_prev: f64, eta: f64, noise: Option<&Mat>) -> Mat {
    let x0 = z.zip(eps, |zt, e| (zt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt());
    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt()
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.zip(eps, |x, e| ab_prev.sqrt() * x + dir * e);
    if sigma > 0.0 {
        if let Some(n) = noise {
            out = out.zip(n, |o, w| o + sigma * w);
        }
    }
    out
}

/// DDIM reverse sampling of both modality latents in lockstep. Deterministic
/// given the RNG seed when eta = 0 (the only randomness is the initial noise).
pub fn ddim_sample(
    model: &dyn JointEps,
    sched: &NoiseSchedule,
    c_a: &Mat,
    c_b: &Mat,
    steps: usize,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Mat, Mat)> {
    let ts = ddim_steps(sched.t_diff, steps)?;
    let (rows, cols) = (c_a.rows, c_a.cols);
    if (c_b.rows, c_b.cols) != (rows, cols) {
        return Err(Error::ShapeMismatch("conditioning latents disagree in shape".into()));
    }
    let mut z_a = Mat::randn(rows, cols, 1.0, rng);
    let mut z_b = Mat::randn(rows, cols, 1.0, rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let (eps_a, eps_b) = model.eps_pair(&z_a, &z_b, c_a, c_b, t)?;
        let noise = if eta > 0.0 && t_prev > 0 {
            Some((Mat::randn(rows, cols, 1.0, rng), Mat::randn(rows, cols, 1.0, rng)))
        } else {
            None
        };
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        z_a = ddim_update(&z_a, &eps_a, ab_t, ab_prev, eta, noise.as_ref().map(|n| &n.0));
        z_b = ddim_update(&z_b, &eps_b, ab_t, ab_prev, eta, noise.as_ref().map(|n| &n.1));
        if z_a.has_nan() || z_b.has_nan() {
            return Err(Error::Numerical(format!("non-finite sampler state at step {}", t)));
        }
    }
    Ok((z_a, z_b))
}

/// Noise predictor over a single latent (single-modality or fused models).
pub trait SingleEps {
    fn eps(&self, z: &Mat, c: &Mat, t: usize) -> Result<Mat>;
}

/// DDIM reverse sampling of one latent.
pub fn ddim_sample_single(
    model: &dyn SingleEps,
    sched: &NoiseSchedule,
    cond: &Mat,
    steps: usize,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Mat> {
    let ts = ddim_steps(sched.t_diff, steps)?;
    let mut z = Mat::randn(cond.rows, cond.cols, 1.0, rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps = model.eps(&z, cond, t)?;
        let noise = if eta > 0.0 && t_prev > 0 {
            Some(Mat::randn(z.rows, z.cols, 1.0, rng))
        } else {
            None
        };
        z = ddim_update(&z, &eps, sched.alpha_bar(t), sched.alpha_bar(t_prev), eta, noise.as_ref());
        if z.has_nan() {
            return Err(Error::Numerical(format!("non-finite sampler state at step {}", t)));
        }
    }
    Ok(z)
}

/// One autoregressive pass: predict `pass_len()` future frames for both
/// modalities, given synchronized conditioning clips of `cond_len()` frames.
pub trait PairSampler {
    fn cond_len(&self) -> usize;
    fn pass_len(&self) -> usize;
    fn sample_pass(
        &self,
        cond_a: &VideoClip,
        cond_b: &VideoClip,
        rng: &mut ChaCha12Rng,
    ) -> Result<(VideoClip, VideoClip)>;
}

/// Autoregressive rollout: repeated passes, each conditioned on the most
/// recent `cond_len` available frames, until exactly `p_total` future frames
/// exist per modality (the final pass is truncated).
pub fn predict_rollout(
    model: &dyn PairSampler,
    past_a: &VideoClip,
    past_b: &VideoClip,
    p_total: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(VideoClip, VideoClip)> {
    let c = model.cond_len();
    if past_a.t < c || past_b.t < c {
        return Err(Error::Domain(format!(
            "rollout needs at least {} past frames, got {}/{}",
            c, past_a.t, past_b.t
        )));
    }
    if past_a.t != past_b.t {
        return Err(Error::Domain("modalities must provide the same number of past frames".into()));
    }
    if p_total < 1 {
        return Err(Error::Domain("rollout length must be at least 1".into()));
    }
    let mut hist_a = past_a.clone();
    let mut hist_b = past_b.clone();
    let mut out_a: Option<VideoClip> = None;
    let mut out_b: Option<VideoClip> = None;
    let mut produced = 0;
    while produced < p_total {
        let cond_a = hist_a.window(hist_a.t - c, c, crate::video::Role::Condition)?;
        let cond_b = hist_b.window(hist_b.t - c, c, crate::video::Role::Condition)?;
        let (mut gen_a, mut gen_b) = model.sample_pass(&cond_a, &cond_b, rng)?;
        if gen_a.t != model.pass_len() || gen_b.t != model.pass_len() {
            return Err(Error::ShapeMismatch("pass produced unexpected frame count".into()));
        }
        let keep = model.pass_len().min(p_total - produced);
        hist_a = gen_a.clone();
        hist_b = gen_b.clone();
        if keep < gen_a.t {
            gen_a = gen_a.window(0, keep, crate::video::Role::Target)?;
            gen_b = gen_b.window(0, keep, crate::video::Role::Target)?;
        }
        match (&mut out_a, &mut out_b) {
            (Some(oa), Some(ob)) => {
                oa.append_frames(&gen_a)?;
                ob.append_frames(&gen_b)?;
            }
            _ => {
                out_a = Some(gen_a);
                out_b = Some(gen_b);
            }
        }
        produced += keep;
    }
    Ok((out_a.unwrap(), out_b.unwrap()))
}
