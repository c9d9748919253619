//! Deterministic synthetic paired-modality videos.
//!
//! Modality A renders shaded discs (intensity peaks at the object center),
//! modality B is the closed-form normalized distance-to-nearest-center field.
//! Because B is an exact function of the scene state, cross-modal consistency
//! of predictions can be scored without any learned feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Modality, Role, VideoClip};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_objects: usize,
    /// disc radius range in pixels
    pub radius_min: f64,
    pub radius_max: f64,
    /// speed range in pixels/frame
    pub speed_min: f64,
    pub speed_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            t: 8,
            h: 32,
            w: 32,
            n_objects: 2,
            radius_min: 4.0,
            radius_max: 6.0,
            speed_min: 0.5,
            speed_max: 1.5,
            intensity_min: 0.7,
            intensity_max: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObjectState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneState {
    pub h: usize,
    pub w: usize,
    pub objects: Vec<ObjectState>,
}

impl SceneState {
    pub fn sample(cfg: &WorldConfig, rng: &mut ChaCha12Rng) -> SceneState {
        let objects = (0..cfg.n_objects)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
                ObjectState {
                    x: rng.gen_range(0.2 * cfg.w as f64..0.8 * cfg.w as f64),
                    y: rng.gen_range(0.2 * cfg.h as f64..0.8 * cfg.h as f64),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                    radius: rng.gen_range(cfg.radius_min..=cfg.radius_max),
                    intensity: rng.gen_range(cfg.intensity_min..=cfg.intensity_max),
                }
            })
            .collect();
        SceneState { h: cfg.h, w: cfg.w, objects }
    }

    /// Advance one frame with elastic reflection at the walls.
    pub fn step(&mut self) {
        let (w, h) = (self.w as f64, self.h as f64);
        for o in self.objects.iter_mut() {
            o.x += o.vx;
            o.y += o.vy;
            if o.x < 0.0 {
                o.x = -o.x;
                o.vx = -o.vx;
            }
            if o.x > w - 1.0 {
                o.x = 2.0 * (w - 1.0) - o.x;
                o.vx = -o.vx;
            }
            if o.y < 0.0 {
                o.y = -o.y;
                o.vy = -o.vy;
            }
            if o.y > h - 1.0 {
                o.y = 2.0 * (h - 1.0) - o.y;
                o.vy = -o.vy;
            }
        }
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        self.objects.iter().map(|o| (o.x, o.y)).collect()
    }
}

/// Render modality A: shaded discs, background -1, peak -1 + 2*intensity.
pub fn render_a(state: &SceneState, frame: &mut [f64]) {
    let w = state.w;
    for y in 0..state.h {
        for x in 0..w {
            let mut shade: f64 = 0.0;
            for o in &state.objects {
                let dx = x as f64 - o.x;
                let dy = y as f64 - o.y;
                let d2 = dx * dx + dy * dy;
                let r2 = o.radius * o.radius;
                if d2 < r2 {
                    shade = shade.max(o.intensity * (1.0 - d2 / r2));
                }
            }
            frame[y * w + x] = -1.0 + 2.0 * shade;
        }
    }
}

/// The exact modality-B renderer G: normalized distance to the nearest
/// object center, mapped into [-1, 1] (1 at a center, -1 beyond the cutoff).
pub fn render_b(h: usize, w: usize, centers: &[(f64, f64)], frame: &mut [f64]) {
    let cutoff = ((h * h + w * w) as f64).sqrt() / 2.0;
    for y in 0..h {
        for x in 0..w {
            let d = centers
                .iter()
                .map(|&(cx, cy)| {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let v = if d.is_finite() { 1.0 - 2.0 * (d / cutoff).min(1.0) } else { -1.0 };
            frame[y * w + x] = v;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedClip {
    pub clip_a: VideoClip,
    pub clip_b: VideoClip,
    /// per-frame ground-truth object centers
    pub centers: Vec<Vec<(f64, f64)>>,
}

/// Deterministic generation: same seed, same clips bitwise.
pub fn generate_clip(seed: u64, cfg: &WorldConfig) -> Result<PairedClip> {
    if cfg.n_objects < 1 {
        return Err(Error::Config("n_objects must be >= 1".into()));
    }
    if cfg.t < 1 || cfg.h < 1 || cfg.w < 1 {
        return Err(Error::InvalidGeometry("world geometry must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = SceneState::sample(cfg, &mut rng);
    let mut clip_a = VideoClip::zeros(cfg.t, cfg.h, cfg.w, 1, Modality::A, Role::Target);
    let mut clip_b = VideoClip::zeros(cfg.t, cfg.h, cfg.w, 1, Modality::B, Role::Target);
    let stride = cfg.h * cfg.w;
    let mut centers = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        if t > 0 {
            state.step();
        }
        render_a(&state, &mut clip_a.data[t * stride..(t + 1) * stride]);
        render_b(cfg.h, cfg.w, &state.centers(), &mut clip_b.data[t * stride..(t + 1) * stride]);
        centers.push(state.centers());
    }
    Ok(PairedClip { clip_a, clip_b, centers })
}

/// Peak detection settings for [`alignment_score`].
#[derive(Clone, Copy, Debug)]
pub struct AlignmentConfig {
    /// minimum peak value in A (background is -1)
    pub peak_threshold: f64,
    /// suppression / centroid window radius in pixels
    pub window_radius: f64,
    /// maximum number of peaks to extract per frame
    pub max_peaks: usize,
    /// MSE that maps to score 0
    pub mse_floor: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { peak_threshold: -0.2, window_radius: 5.0, max_peaks: 8, mse_floor: 0.25 }
    }
}

#[derive(Clone, Debug)]
pub struct AlignmentReport {
    pub score: f64,
    /// true when some frame had no detectable object
    pub degenerate: bool,
}

fn detect_centers(frame: &[f64], h: usize, w: usize, cfg: &AlignmentConfig) -> Vec<(f64, f64)> {
    let mut work = frame.to_vec();
    let mut centers = Vec::new();
    let r = cfg.window_radius;
    let ri = r.ceil() as isize;
    while centers.len() < cfg.max_peaks {
        let (mut best, mut bx, mut by) = (f64::NEG_INFINITY, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = work[y * w + x];
                if v > best {
                    best = v;
                    bx = x;
                    by = y;
                }
            }
        }
        if best < cfg.peak_threshold {
            break;
        }
        // intensity-weighted centroid over a tight window so that nearby
        // objects do not bias the estimate
        let cr = (r * 0.6).max(2.0);
        let cri = cr.ceil() as isize;
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for dy in -cri..=cri {
            for dx in -cri..=cri {
                let y = by as isize + dy;
                let x = bx as isize + dx;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                if (dx * dx + dy * dy) as f64 > cr * cr {
                    continue;
                }
                let wgt = (frame[y as usize * w + x as usize] + 1.0).max(0.0);
                sx += wgt * x as f64;
                sy += wgt * y as f64;
                sw += wgt;
            }
        }
        if sw > 0.0 {
            centers.push((sx / sw, sy / sw));
        } else {
            centers.push((bx as f64, by as f64));
        }
        // suppress the detected disc without erasing close neighbours
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let y = by as isize + dy;
                let x = bx as isize + dx;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                if (dx * dx + dy * dy) as f64 <= r * r {
                    work[y as usize * w + x as usize] = -1.0;
                }
            }
        }
    }
    centers
}

/// Cross-modal consistency oracle: detect object centers in the predicted
/// A-clip, synthesize the expected B-field via the exact renderer, and score
/// 1 - normalized L2 against the predicted B-clip. Blank frames yield a
/// degenerate report with score 0.
pub fn alignment_score(
    pred_a: &VideoClip,
    pred_b: &VideoClip,
    cfg: &AlignmentConfig,
) -> Result<AlignmentReport> {
    if pred_a.t != pred_b.t || pred_a.h != pred_b.h || pred_a.w != pred_b.w {
        return Err(Error::ShapeMismatch("alignment_score geometry".into()));
    }
    let (h, w) = (pred_a.h, pred_a.w);
    let stride = h * w;
    let mut mse_acc = 0.0;
    let mut degenerate = false;
    let mut synth = vec![0.0; stride];
    for t in 0..pred_a.t {
        let fa = &pred_a.data[t * stride..(t + 1) * stride];
        let fb = &pred_b.data[t * stride..(t + 1) * stride];
        let centers = detect_centers(fa, h, w, cfg);
        if centers.is_empty() {
            degenerate = true;
            mse_acc += cfg.mse_floor;
            continue;
        }
        render_b(h, w, &centers, &mut synth);
        let mse: f64 =
            synth.iter().zip(fb.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / stride as f64;
        mse_acc += mse;
    }
    let mean_mse = mse_acc / pred_a.t as f64;
    let score = (1.0 - mean_mse / cfg.mse_floor).clamp(0.0, 1.0);
    Ok(AlignmentReport { score, degenerate })
}

/// Dataset split by disjoint seed ranges.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldConfig,
    pub train_seeds: (u64, u64),
    pub val_seeds: (u64, u64),
    pub test_seeds: (u64, u64),
    pub config_hash: String,
}

impl DatasetManifest {
    pub fn new(world: WorldConfig, base: u64, n_train: u64, n_val: u64, n_test: u64) -> Self {
        let train = (base, base + n_train);
        let val = (train.1, train.1 + n_val);
        let test = (val.1, val.1 + n_test);
        let hash = crate::checkpoint::hash_json(&world);
        DatasetManifest { world, train_seeds: train, val_seeds: val, test_seeds: test, config_hash: hash }
    }

    pub fn assert_disjoint(&self) {
        assert!(self.train_seeds.1 <= self.val_seeds.0);
        assert!(self.val_seeds.1 <= self.test_seeds.0);
    }

    pub fn seeds(range: (u64, u64)) -> impl Iterator<Item = u64> {
        range.0..range.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        let cfg = WorldConfig::default();
        let a = generate_clip(42, &cfg).unwrap();
        let b = generate_clip(42, &cfg).unwrap();
        assert_eq!(a.clip_a, b.clip_a);
        assert_eq!(a.clip_b, b.clip_b);
        let c = generate_clip(43, &cfg).unwrap();
        assert_ne!(a.clip_a.data, c.clip_a.data);
    }

    #[test]
    fn values_in_range() {
        let cfg = WorldConfig::default();
        for seed in 0..5 {
            let p = generate_clip(seed, &cfg).unwrap();
            p.clip_a.validate(4).unwrap();
            p.clip_b.validate(4).unwrap();
        }
    }

    #[test]
    fn rejects_empty_world() {
        let cfg = WorldConfig { n_objects: 0, ..Default::default() };
        assert!(matches!(generate_clip(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn static_object_radial_field_constant_over_time() {
        let cfg = WorldConfig { t: 4, n_objects: 1, ..Default::default() };
        let mut state = SceneState {
            h: cfg.h,
            w: cfg.w,
            objects: vec![ObjectState {
                x: 16.0,
                y: 16.0,
                vx: 0.0,
                vy: 0.0,
                radius: 5.0,
                intensity: 0.9,
            }],
        };
        let stride = cfg.h * cfg.w;
        let mut frames = vec![0.0; cfg.t * stride];
        for t in 0..cfg.t {
            state.step();
            render_b(cfg.h, cfg.w, &state.centers(), &mut frames[t * stride..(t + 1) * stride]);
        }
        for t in 1..cfg.t {
            assert_eq!(frames[..stride], frames[t * stride..(t + 1) * stride]);
        }
        // radial symmetry around the center
        let f = &frames[..stride];
        for d in 1..8usize {
            let l = f[16 * cfg.w + (16 - d)];
            let r = f[16 * cfg.w + (16 + d)];
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn moving_object_field_shifts() {
        let cfg = WorldConfig { t: 3, h: 32, w: 32, n_objects: 1, ..Default::default() };
        let mut state = SceneState {
            h: cfg.h,
            w: cfg.w,
            objects: vec![ObjectState {
                x: 10.0,
                y: 16.0,
                vx: 1.0,
                vy: 0.0,
                radius: 5.0,
                intensity: 0.9,
            }],
        };
        let stride = cfg.h * cfg.w;
        let mut f0 = vec![0.0; stride];
        render_b(cfg.h, cfg.w, &state.centers(), &mut f0);
        state.step();
        let mut f1 = vec![0.0; stride];
        render_b(cfg.h, cfg.w, &state.centers(), &mut f1);
        // frame 1 equals frame 0 shifted by one pixel in x, away from borders
        let mut max_err: f64 = 0.0;
        for y in 4..28 {
            for x in 5..27 {
                max_err = max_err.max((f1[y * cfg.w + x] - f0[y * cfg.w + x - 1]).abs());
            }
        }
        assert!(max_err < 1e-9, "shift mismatch {}", max_err);
    }

    #[test]
    fn alignment_ground_truth_near_one() {
        let cfg = WorldConfig::default();
        let acfg = AlignmentConfig::default();
        for seed in 0..5 {
            let p = generate_clip(seed, &cfg).unwrap();
            let rep = alignment_score(&p.clip_a, &p.clip_b, &acfg).unwrap();
            assert!(rep.score >= 0.99, "seed {} score {}", seed, rep.score);
            assert!(!rep.degenerate);
        }
    }

    #[test]
    fn alignment_mismatched_pair_scores_lower() {
        let cfg = WorldConfig::default();
        let acfg = AlignmentConfig::default();
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let p = generate_clip(seed, &cfg).unwrap();
            let q = generate_clip(seed + 100, &cfg).unwrap();
            let matched = alignment_score(&p.clip_a, &p.clip_b, &acfg).unwrap().score;
            let mismatched = alignment_score(&p.clip_a, &q.clip_b, &acfg).unwrap().score;
            gaps.push(matched - mismatched);
        }
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(mean_gap > 0.3, "mean gap {}", mean_gap);
    }

    #[test]
    fn alignment_blank_frames_degenerate() {
        let mut a = VideoClip::zeros(2, 16, 16, 1, Modality::A, Role::Target);
        a.data.fill(-1.0);
        let b = VideoClip::zeros(2, 16, 16, 1, Modality::B, Role::Target);
        let rep = alignment_score(&a, &b, &AlignmentConfig::default()).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.score, 0.0);
    }

    #[test]
    fn alignment_flip_equivariant() {
        let cfg = WorldConfig::default();
        let acfg = AlignmentConfig::default();
        for seed in [11u64, 12, 13] {
            let p = generate_clip(seed, &cfg).unwrap();
            let flip = |clip: &VideoClip| {
                let mut out = clip.clone();
                for t in 0..clip.t {
                    for y in 0..clip.h {
                        for x in 0..clip.w {
                            out.set(t, y, x, 0, clip.get(t, y, clip.w - 1 - x, 0));
                        }
                    }
                }
                out
            };
            let s1 = alignment_score(&p.clip_a, &p.clip_b, &acfg).unwrap().score;
            let s2 = alignment_score(&flip(&p.clip_a), &flip(&p.clip_b), &acfg).unwrap().score;
            assert!((s1 - s2).abs() < 0.02, "flip scores {} vs {}", s1, s2);
        }
    }

    #[test]
    fn manifest_splits_disjoint() {
        let m = DatasetManifest::new(WorldConfig::default(), 0, 100, 20, 20);
        m.assert_disjoint();
        assert_eq!(DatasetManifest::seeds(m.test_seeds).count(), 20);
    }
}
