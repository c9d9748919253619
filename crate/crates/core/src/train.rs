//! Training and evaluation orchestration: dataset assembly, the two-stage
//! pipeline, ablation variants, noise-robustness sweeps, attention
//! benchmarking, and resumable stage checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::codec::{Codec, TestCodec, TrainableCodec, TriplaneLatent};
use crate::config::{CodecKind, ExperimentConfig, Variant};
use crate::denoiser::{
    denoise_joint, denoise_single, CrossParams, DenoiserConfig, DenoiserParams,
};
use crate::diffusion::{
    ddim_sample, ddim_sample_single, forward_diffuse, joint_loss, make_schedule,
    predict_rollout, sample_shared_noise, single_loss, JointEps, NoiseSchedule, PairSampler,
    SingleEps,
};
use crate::error::{Error, Result};
use crate::guidance::{sample_mask, ConditioningMask, GuidanceProbs};
use crate::metrics::{best_of_k, mean_report, score_trajectory, EvalReport, TrajectoryScores};
use crate::opt::Adam;
use crate::stca::{attention_cost, stca_forward, vanilla_ca_forward, PlaneSplit, StcaParams};
use crate::tensor::{Graph, Mat};
use crate::toyworld::{generate_clip, AlignmentConfig, DatasetManifest, PairedClip};
use crate::video::{Modality, Role, VideoClip};

// ---------------------------------------------------------------------------
// dataset

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<PairedClip>,
    pub val: Vec<PairedClip>,
    pub test: Vec<PairedClip>,
}

/// Clips are `cond_frames + t` frames long; splits use disjoint seed ranges
/// shifted by the experiment seed.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut world = cfg.world;
    world.t = cfg.world.t + cfg.train.cond_frames;
    let base = cfg.seed.wrapping_mul(1_000_003);
    let manifest =
        DatasetManifest::new(world, base, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
    manifest.assert_disjoint();
    let gen = |range| -> Result<Vec<PairedClip>> {
        DatasetManifest::seeds(range).map(|s| generate_clip(s, &world)).collect()
    };
    Ok(Dataset {
        train: gen(manifest.train_seeds)?,
        val: gen(manifest.val_seeds)?,
        test: gen(manifest.test_seeds)?,
        manifest,
    })
}

/// Channel-stack two synchronized single-channel clips (A = channel 0).
pub fn stack_channels(a: &VideoClip, b: &VideoClip) -> Result<VideoClip> {
    if a.t != b.t || a.h != b.h || a.w != b.w || a.c != 1 || b.c != 1 {
        return Err(Error::ShapeMismatch("channel stacking needs matching 1-channel clips".into()));
    }
    let mut out = VideoClip::zeros(a.t, a.h, a.w, 2, Modality::A, a.role);
    for t in 0..a.t {
        for y in 0..a.h {
            for x in 0..a.w {
                out.set(t, y, x, 0, a.get(t, y, x, 0));
                out.set(t, y, x, 1, b.get(t, y, x, 0));
            }
        }
    }
    Ok(out)
}

pub fn split_channels(ab: &VideoClip) -> Result<(VideoClip, VideoClip)> {
    if ab.c != 2 {
        return Err(Error::ShapeMismatch("expected a 2-channel clip".into()));
    }
    let mut a = VideoClip::zeros(ab.t, ab.h, ab.w, 1, Modality::A, ab.role);
    let mut b = VideoClip::zeros(ab.t, ab.h, ab.w, 1, Modality::B, ab.role);
    for t in 0..ab.t {
        for y in 0..ab.h {
            for x in 0..ab.w {
                a.set(t, y, x, 0, ab.get(t, y, x, 0));
                b.set(t, y, x, 0, ab.get(t, y, x, 1));
            }
        }
    }
    Ok((a, b))
}

fn vstack(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Mat::from_vec(a.rows + b.rows, a.cols, data)
}

fn vsplit(m: &Mat, top_rows: usize) -> (Mat, Mat) {
    let split = top_rows * m.cols;
    (
        Mat::from_vec(top_rows, m.cols, m.data[..split].to_vec()),
        Mat::from_vec(m.rows - top_rows, m.cols, m.data[split..].to_vec()),
    )
}

// ---------------------------------------------------------------------------
// codecs and latent samples

fn stage_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Fit one trained codec on the target windows of a clip list.
fn fit_trained_codec(
    cfg: &ExperimentConfig,
    clips: &[VideoClip],
    channels: usize,
    seed_label: &str,
) -> Result<Codec> {
    let mut codec = TrainableCodec::new(
        cfg.world.t,
        cfg.world.h,
        cfg.world.w,
        channels,
        cfg.codec.patch,
        cfg.codec.c_prime,
        cfg.codec.hidden,
        stage_seed(cfg.seed, seed_label),
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, seed_label) ^ 1);
    crate::codec::train_codec(
        &mut codec,
        clips,
        cfg.codec.iterations,
        cfg.codec.batch,
        cfg.codec.lr,
        &mut rng,
    )?;
    Ok(Codec::Trained(codec))
}

fn target_windows(
    cfg: &ExperimentConfig,
    train_clips: &[PairedClip],
    modality: Modality,
) -> Result<Vec<VideoClip>> {
    train_clips
        .iter()
        .map(|pc| {
            let src = if modality == Modality::A { &pc.clip_a } else { &pc.clip_b };
            src.window(pc.clip_a.t - cfg.world.t, cfg.world.t, Role::Target)
        })
        .collect()
}

fn build_one_codec(
    cfg: &ExperimentConfig,
    train_clips: &[PairedClip],
    modality: Modality,
) -> Result<Codec> {
    let (t, h, w, p) = (cfg.world.t, cfg.world.h, cfg.world.w, cfg.codec.patch);
    let label = if modality == Modality::A { "codec_a" } else { "codec_b" };
    match cfg.codec.kind {
        CodecKind::Test => {
            Ok(Codec::Test(TestCodec::new(t, h, w, 1, p, stage_seed(cfg.seed, label))?))
        }
        CodecKind::Trained => {
            fit_trained_codec(cfg, &target_windows(cfg, train_clips, modality)?, 1, label)
        }
    }
}

/// Build (and for the trained kind, fit) the per-modality codecs.
pub fn build_codecs(cfg: &ExperimentConfig, train_clips: &[PairedClip]) -> Result<(Codec, Codec)> {
    Ok((
        build_one_codec(cfg, train_clips, Modality::A)?,
        build_one_codec(cfg, train_clips, Modality::B)?,
    ))
}

/// Load a fitted codec from the stage directory, or fit it and cache it.
/// Fixed codecs are rebuilt deterministically instead of cached.
fn cached_codec<F>(label: &str, ctl: &StageCtl, cfg: &ExperimentConfig, fit: F) -> Result<Codec>
where
    F: FnOnce() -> Result<Codec>,
{
    let dir = match ctl.dir {
        Some(d) if cfg.codec.kind == CodecKind::Trained => d,
        _ => return fit(),
    };
    let path = stage_path(dir, label);
    if ctl.resume && path.exists() {
        let ckpt = checkpoint::load::<Codec>(&path)?;
        if ckpt.meta.config_hash != cfg.stage_hash() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "codec checkpoint {} belongs to a different config",
                path.display()
            )));
        }
        return Ok(ckpt.payload);
    }
    let codec = fit()?;
    let meta = CheckpointMeta {
        kind: "codec".into(),
        config_hash: cfg.stage_hash(),
        arch_fingerprint: label.to_string(),
        seed: cfg.seed,
        step: cfg.codec.iterations as u64,
    };
    checkpoint::save(&path, meta, &codec)?;
    Ok(codec)
}

/// `build_codecs` with per-modality caching under the stage directory, so
/// variants that share a seed and out-dir fit each codec only once.
fn build_codecs_cached(
    cfg: &ExperimentConfig,
    train_clips: &[PairedClip],
    ctl: &StageCtl,
) -> Result<(Codec, Codec)> {
    if ctl.dir.is_none() || cfg.codec.kind != CodecKind::Trained {
        return build_codecs(cfg, train_clips);
    }
    let a = cached_codec("codec_A", ctl, cfg, || build_one_codec(cfg, train_clips, Modality::A))?;
    let b = cached_codec("codec_B", ctl, cfg, || build_one_codec(cfg, train_clips, Modality::B))?;
    Ok((a, b))
}

/// One training example in latent space.
#[derive(Clone)]
pub struct SamplePair {
    pub cond_a: Mat,
    pub cond_b: Mat,
    pub tgt_a: Mat,
    pub tgt_b: Mat,
}

fn encode_cond(clip: &VideoClip, cond: usize, t: usize, codec: &Codec) -> Result<Mat> {
    let w = clip.window(0, cond, Role::Condition)?.pad_to_length(t);
    Ok(codec.encode(&w)?.flat())
}

fn encode_tgt(clip: &VideoClip, cond: usize, t: usize, codec: &Codec) -> Result<Mat> {
    Ok(codec.encode(&clip.window(cond, t, Role::Target)?)?.flat())
}

pub fn encode_pair_samples(
    clips: &[PairedClip],
    cond: usize,
    t: usize,
    codec_a: &Codec,
    codec_b: &Codec,
) -> Result<Vec<SamplePair>> {
    clips
        .iter()
        .map(|p| {
            Ok(SamplePair {
                cond_a: encode_cond(&p.clip_a, cond, t, codec_a)?,
                cond_b: encode_cond(&p.clip_b, cond, t, codec_b)?,
                tgt_a: encode_tgt(&p.clip_a, cond, t, codec_a)?,
                tgt_b: encode_tgt(&p.clip_b, cond, t, codec_b)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// model bundle

#[derive(Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub variant: Variant,
    pub codec_a: Codec,
    pub codec_b: Option<Codec>,
    pub den_a: DenoiserParams,
    pub den_b: Option<DenoiserParams>,
    pub cross: Option<CrossParams>,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub config_hash: String,
}

impl ModelBundle {
    pub fn split(&self) -> PlaneSplit {
        let lay = self.codec_a.layout();
        PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w }
    }

    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.variant.name(), self.den_a.fingerprint())
    }

    /// A config with no explicit variant matches a bundle of any variant;
    /// everything else must hash identically.
    pub fn verify_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut cfg = cfg.clone();
        if cfg.variant.is_none() {
            cfg.variant = Some(self.variant);
        }
        if self.config_hash != cfg.hash() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "bundle config hash {} does not match requested config {}",
                self.config_hash,
                cfg.hash()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "bundle".into(),
            config_hash: self.config_hash.clone(),
            arch_fingerprint: self.fingerprint(),
            seed,
            step: self.step,
        };
        checkpoint::save(path, meta, self)
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        Ok(checkpoint::load::<ModelBundle>(path)?.payload)
    }
}

/// Stage-2 initialization from stage-1 checkpoints: branch weights are
/// copied, cross projections start with zeroed output maps so step-0 joint
/// outputs equal the pretrained single-branch outputs.
pub fn init_joint_from_pretrained(
    den_a: &DenoiserParams,
    den_b: &DenoiserParams,
    variant: Variant,
    rng: &mut ChaCha12Rng,
) -> Result<JointNets> {
    if den_a.config != den_b.config {
        return Err(Error::IncompatibleCheckpoint(
            "stage-1 branches disagree on denoiser geometry".into(),
        ));
    }
    let wiring = variant
        .wiring()
        .ok_or_else(|| Error::Config(format!("variant {} has no cross wiring", variant)))?;
    let cross = CrossParams::init(
        den_a.config.width,
        den_a.config.heads,
        wiring,
        true,
        variant.stca_all_layers(),
        rng,
    )?;
    Ok(JointNets { den_a: den_a.clone(), den_b: den_b.clone(), cross })
}

#[derive(Clone, Serialize, Deserialize)]
pub struct JointNets {
    pub den_a: DenoiserParams,
    pub den_b: DenoiserParams,
    pub cross: CrossParams,
}

impl JointNets {
    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.den_a.params_mut();
        v.extend(self.den_b.params_mut());
        v.extend(self.cross.params_mut());
        v
    }

    pub fn snapshot(&self) -> Vec<Mat> {
        let mut v: Vec<Mat> = self.den_a.params().into_iter().cloned().collect();
        v.extend(self.den_b.params().into_iter().cloned());
        v.extend(self.cross.params().into_iter().cloned());
        v
    }
}

// ---------------------------------------------------------------------------
// inference adapters

pub struct PairModel<'a> {
    pub den_a: &'a DenoiserParams,
    pub den_b: &'a DenoiserParams,
    pub cross: Option<&'a CrossParams>,
    pub split: PlaneSplit,
}

impl JointEps for PairModel<'_> {
    fn eps_pair(&self, z_a: &Mat, z_b: &Mat, c_a: &Mat, c_b: &Mat, t: usize) -> Result<(Mat, Mat)> {
        let mut g = Graph::new(false);
        let (zi_a, ci_a) = (g.input(z_a.clone()), g.input(c_a.clone()));
        let (zi_b, ci_b) = (g.input(z_b.clone()), g.input(c_b.clone()));
        let ids_a = self.den_a.insert(&mut g);
        let ids_b = self.den_b.insert(&mut g);
        let (ea, eb) = match self.cross {
            Some(cross) => {
                let cids = cross.insert(&mut g);
                denoise_joint(
                    &mut g, self.den_a, &ids_a, self.den_b, &ids_b, zi_a, ci_a, zi_b, ci_b, t,
                    self.split, cross, &cids, None,
                )?
            }
            None => (
                denoise_single(&mut g, self.den_a, &ids_a, zi_a, ci_a, t, self.split)?,
                denoise_single(&mut g, self.den_b, &ids_b, zi_b, ci_b, t, self.split)?,
            ),
        };
        Ok((g.value(ea).clone(), g.value(eb).clone()))
    }
}

pub struct SingleModel<'a> {
    pub den: &'a DenoiserParams,
    pub split: PlaneSplit,
}

impl SingleEps for SingleModel<'_> {
    fn eps(&self, z: &Mat, c: &Mat, t: usize) -> Result<Mat> {
        let mut g = Graph::new(false);
        let (zi, ci) = (g.input(z.clone()), g.input(c.clone()));
        let ids = self.den.insert(&mut g);
        let out = denoise_single(&mut g, self.den, &ids, zi, ci, t, self.split)?;
        Ok(g.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// training loops

fn grads_for(g: &Graph, ids: &[crate::tensor::Id], grads: &[Option<Mat>]) -> Vec<Mat> {
    ids.iter()
        .map(|&id| {
            grads[id].clone().unwrap_or_else(|| {
                let v = g.value(id);
                Mat::zeros(v.rows, v.cols)
            })
        })
        .collect()
}

/// Single-branch diffusion training for `iters` iterations (one chunk).
/// `samples` holds (conditioning, target) latent pairs.
pub fn train_single_chunk(
    den: &mut DenoiserParams,
    opt: &mut Adam,
    samples: &[(Mat, Mat)],
    split: PlaneSplit,
    sched: &NoiseSchedule,
    iters: usize,
    batch: usize,
    rng: &mut ChaCha12Rng,
    losses: &mut Vec<f64>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    for _ in 0..iters {
        let mut g = Graph::new(true);
        let ids = den.insert(&mut g);
        let mut acc = None;
        let mut eps_preds = Vec::with_capacity(batch);
        let mut eps_targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            // per-element step draw keeps the gradient scale stable across iterations
            let t = rng.gen_range(1..=sched.t_diff);
            let (cond, tgt) = &samples[rng.gen_range(0..samples.len())];
            let eps = sample_shared_noise(tgt.rows, tgt.cols, rng);
            let z_t = forward_diffuse(tgt, t, &eps, sched)?;
            let zi = g.input(z_t);
            let ci = g.input(cond.clone());
            let ei = g.input(eps.clone());
            let pred = denoise_single(&mut g, den, &ids, zi, ci, t, split)?;
            eps_preds.push(g.value(pred).clone());
            eps_targets.push(eps);
            let d = g.sub(pred, ei);
            let sq = g.mul(d, d);
            let s = g.sum_all(sq);
            acc = Some(match acc {
                Some(prev) => g.add(prev, s),
                None => s,
            });
        }
        let loss = g.scale(acc.unwrap(), 1.0 / batch as f64);
        // the graph loss must agree with the reference loss definition
        losses.push(single_loss(&eps_preds, &eps_targets)?);
        let lv = g.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("single-branch loss diverged: {}", lv)));
        }
        let grads = g.backward(loss);
        let gv = grads_for(&g, &ids, &grads);
        let mut prefs = den.params_mut();
        opt.step(&mut prefs, &gv);
    }
    Ok(())
}

/// Joint two-branch training chunk. One conditioning mask per batch; with
/// `shared_noise` both branches diffuse with the same draw.
#[allow(clippy::too_many_arguments)]
pub fn train_joint_chunk(
    nets: &mut JointNets,
    opt: &mut Adam,
    samples: &[SamplePair],
    split: PlaneSplit,
    sched: &NoiseSchedule,
    iters: usize,
    batch: usize,
    shared_noise: bool,
    guidance: Option<&GuidanceProbs>,
    rng: &mut ChaCha12Rng,
    losses: &mut Vec<f64>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    for _ in 0..iters {
        let mut g = Graph::new(true);
        let ids_a = nets.den_a.insert(&mut g);
        let ids_b = nets.den_b.insert(&mut g);
        let cids = nets.cross.insert(&mut g);
        let mut all_ids = ids_a.clone();
        all_ids.extend(ids_b.iter().copied());
        all_ids.extend(cids.flat_ids());
        let mask = match guidance {
            Some(p) => sample_mask(p, rng),
            None => ConditioningMask::BOTH,
        };
        let mut acc = None;
        let (mut pa, mut ta, mut pb, mut tb) = (vec![], vec![], vec![], vec![]);
        for _ in 0..batch {
            let t = rng.gen_range(1..=sched.t_diff);
            let s = &samples[rng.gen_range(0..samples.len())];
            let eps_a = sample_shared_noise(s.tgt_a.rows, s.tgt_a.cols, rng);
            let eps_b = if shared_noise { eps_a.clone() } else { sample_shared_noise(s.tgt_b.rows, s.tgt_b.cols, rng) };
            let z_ta = forward_diffuse(&s.tgt_a, t, &eps_a, sched)?;
            let z_tb = forward_diffuse(&s.tgt_b, t, &eps_b, sched)?;
            let cond_a = if mask.use_a { s.cond_a.clone() } else { Mat::zeros(s.cond_a.rows, s.cond_a.cols) };
            let cond_b = if mask.use_b { s.cond_b.clone() } else { Mat::zeros(s.cond_b.rows, s.cond_b.cols) };
            let zi_a = g.input(z_ta);
            let ci_a = g.input(cond_a);
            let ei_a = g.input(eps_a.clone());
            let zi_b = g.input(z_tb);
            let ci_b = g.input(cond_b);
            let ei_b = g.input(eps_b.clone());
            let (pred_a, pred_b) = denoise_joint(
                &mut g, &nets.den_a, &ids_a, &nets.den_b, &ids_b, zi_a, ci_a, zi_b, ci_b, t,
                split, &nets.cross, &cids, None,
            )?;
            pa.push(g.value(pred_a).clone());
            ta.push(eps_a);
            pb.push(g.value(pred_b).clone());
            tb.push(eps_b);
            let da = g.sub(pred_a, ei_a);
            let sa = g.mul(da, da);
            let la = g.sum_all(sa);
            let db = g.sub(pred_b, ei_b);
            let sb = g.mul(db, db);
            let lb = g.sum_all(sb);
            let l = g.add(la, lb);
            acc = Some(match acc {
                Some(prev) => g.add(prev, l),
                None => l,
            });
        }
        let loss = g.scale(acc.unwrap(), 1.0 / batch as f64);
        losses.push(joint_loss(&pa, &ta, &pb, &tb)?);
        let lv = g.value(loss).data[0];
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("joint loss diverged: {}", lv)));
        }
        let grads = g.backward(loss);
        let gv = grads_for(&g, &all_ids, &grads);
        let mut prefs = nets.params_mut();
        opt.step(&mut prefs, &gv);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// resumable stage execution

#[derive(Serialize, Deserialize)]
pub struct StageState {
    pub label: String,
    pub iter: usize,
    pub params: Vec<Mat>,
    pub adam: Adam,
    pub rng_word_pos: u128,
    pub losses: Vec<f64>,
}

fn stage_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{}.stage.json", label))
}

fn save_stage(
    dir: &Path,
    cfg: &ExperimentConfig,
    label: &str,
    iter: usize,
    params: Vec<Mat>,
    adam: &Adam,
    rng: &ChaCha12Rng,
    losses: &[f64],
) -> Result<()> {
    let state = StageState {
        label: label.to_string(),
        iter,
        params,
        adam: adam.clone(),
        rng_word_pos: rng.get_word_pos(),
        losses: losses.to_vec(),
    };
    let meta = CheckpointMeta {
        kind: "stage".into(),
        config_hash: cfg.stage_hash(),
        arch_fingerprint: label.to_string(),
        seed: cfg.seed,
        step: iter as u64,
    };
    checkpoint::save(&stage_path(dir, label), meta, &state)
}

fn load_stage(dir: &Path, cfg: &ExperimentConfig, label: &str) -> Result<Option<StageState>> {
    let path = stage_path(dir, label);
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = checkpoint::load::<StageState>(&path)?;
    if ckpt.meta.config_hash != cfg.stage_hash() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "stage checkpoint {} belongs to a different config",
            path.display()
        )));
    }
    Ok(Some(ckpt.payload))
}

fn restore_params(target: Vec<&mut Mat>, saved: &[Mat]) -> Result<()> {
    if target.len() != saved.len() {
        return Err(Error::IncompatibleCheckpoint("parameter count mismatch".into()));
    }
    for (dst, src) in target.into_iter().zip(saved) {
        if !dst.same_shape(src) {
            return Err(Error::IncompatibleCheckpoint("parameter shape mismatch".into()));
        }
        *dst = src.clone();
    }
    Ok(())
}

struct StageCtl<'a> {
    dir: Option<&'a Path>,
    resume: bool,
}

/// Run a single-branch stage with periodic checkpoints. Returns the loss series.
#[allow(clippy::too_many_arguments)]
fn run_stage_single(
    cfg: &ExperimentConfig,
    label: &str,
    den: &mut DenoiserParams,
    samples: &[(Mat, Mat)],
    split: PlaneSplit,
    sched: &NoiseSchedule,
    total_iters: usize,
    ctl: &StageCtl,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, label));
    let mut opt = Adam::new(cfg.train.lr);
    let mut losses = Vec::new();
    let mut done = 0usize;
    if ctl.resume {
        if let Some(dir) = ctl.dir {
            if let Some(state) = load_stage(dir, cfg, label)? {
                restore_params(den.params_mut(), &state.params)?;
                opt = state.adam;
                rng.set_word_pos(state.rng_word_pos);
                losses = state.losses;
                done = state.iter;
            }
        }
    }
    while done < total_iters {
        let chunk = cfg.train.ckpt_every.max(1).min(total_iters - done);
        train_single_chunk(den, opt_ref(&mut opt), samples, split, sched, chunk, cfg.train.batch, &mut rng, &mut losses)?;
        done += chunk;
        if let Some(dir) = ctl.dir {
            let snap: Vec<Mat> = den.params().into_iter().cloned().collect();
            save_stage(dir, cfg, label, done, snap, &opt, &rng, &losses)?;
        }
    }
    Ok(losses)
}

fn opt_ref(o: &mut Adam) -> &mut Adam {
    o
}

/// Run a joint stage with periodic checkpoints. Returns the loss series.
#[allow(clippy::too_many_arguments)]
fn run_stage_joint(
    cfg: &ExperimentConfig,
    label: &str,
    nets: &mut JointNets,
    samples: &[SamplePair],
    split: PlaneSplit,
    sched: &NoiseSchedule,
    total_iters: usize,
    shared_noise: bool,
    guidance: Option<&GuidanceProbs>,
    lr: f64,
    ctl: &StageCtl,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, label));
    let mut opt = Adam::new(lr);
    let mut losses = Vec::new();
    let mut done = 0usize;
    if ctl.resume {
        if let Some(dir) = ctl.dir {
            if let Some(state) = load_stage(dir, cfg, label)? {
                restore_params(nets.params_mut(), &state.params)?;
                opt = state.adam;
                rng.set_word_pos(state.rng_word_pos);
                losses = state.losses;
                done = state.iter;
            }
        }
    }
    // sanity probe: fresh draws must obey the configured noise regime
    {
        let mut probe = rng.clone();
        let e1 = sample_shared_noise(2, 2, &mut probe);
        let e2 = if shared_noise { e1.clone() } else { sample_shared_noise(2, 2, &mut probe) };
        if shared_noise != (e1.data == e2.data) {
            return Err(Error::Numerical("noise-sharing regime violated at stage start".into()));
        }
    }
    while done < total_iters {
        let chunk = cfg.train.ckpt_every.max(1).min(total_iters - done);
        train_joint_chunk(
            nets,
            &mut opt,
            samples,
            split,
            sched,
            chunk,
            cfg.train.batch,
            shared_noise,
            guidance,
            &mut rng,
            &mut losses,
        )?;
        done += chunk;
        if let Some(dir) = ctl.dir {
            save_stage(dir, cfg, label, done, nets.snapshot(), &opt, &rng, &losses)?;
        }
    }
    Ok(losses)
}

/// Whether a stage checkpoint file for `label` exists under `dir`.
pub fn stage_checkpoint_exists(dir: &Path, label: &str) -> bool {
    stage_path(dir, label).exists()
}

/// Train one stage-1 branch in isolation, checkpointing under the same
/// labels the joint pipeline resumes from ("stage1_A" / "stage1_B").
pub fn run_stage1_branch(
    cfg: &ExperimentConfig,
    modality: Modality,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let ctl = StageCtl { dir: out_dir, resume };
    let (codec_a, codec_b) = build_codecs_cached(cfg, &dataset.train, &ctl)?;
    let lay = codec_a.layout();
    let split = PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w };
    let samples =
        encode_pair_samples(&dataset.train, cfg.train.cond_frames, cfg.world.t, &codec_a, &codec_b)?;
    let sched = make_schedule(cfg.schedule.t_diff, cfg.schedule.shape)?;
    let (label, init_label) =
        if modality == Modality::A { ("stage1_A", "init_A") } else { ("stage1_B", "init_B") };
    let mut den = DenoiserParams::init(
        denoiser_config(cfg, lay.c_prime),
        &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, init_label)),
    )?;
    let pairs: Vec<(Mat, Mat)> = samples
        .iter()
        .map(|s| {
            if modality == Modality::A {
                (s.cond_a.clone(), s.tgt_a.clone())
            } else {
                (s.cond_b.clone(), s.tgt_b.clone())
            }
        })
        .collect();
    run_stage_single(cfg, label, &mut den, &pairs, split, &sched, cfg.train.stage1_iters, &ctl)
}

// ---------------------------------------------------------------------------
// two-stage pipeline

pub struct TwoStageResult {
    pub bundle: ModelBundle,
    pub stage1_losses_a: Vec<f64>,
    pub stage1_losses_b: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

fn denoiser_config(cfg: &ExperimentConfig, c_in: usize) -> DenoiserConfig {
    DenoiserConfig { c_in, width: cfg.model.width, heads: cfg.model.heads }
}

/// Full training pipeline for any variant. Single variants run one branch;
/// joint-pair variants run stage-1 pretraining (unless scratch) followed by
/// joint fine-tuning; fused variants train one denoiser over a merged
/// representation for the same total budget.
pub fn run_two_stage(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TwoStageResult> {
    cfg.validate()?;
    let variant = cfg.variant.unwrap_or(Variant::JointStca);
    // the bundle hash always records an explicit variant
    let cfg = &{
        let mut c = cfg.clone();
        c.variant = Some(variant);
        c
    };
    let dataset = build_dataset(cfg)?;
    let ctl = StageCtl { dir: out_dir, resume };
    let sched = make_schedule(cfg.schedule.t_diff, cfg.schedule.shape)?;
    let total = cfg.train.stage1_iters + cfg.train.stage2_iters;
    let (t, cond) = (cfg.world.t, cfg.train.cond_frames);

    if variant.is_fused() {
        return run_fused(cfg, variant, &dataset, &sched, total, &ctl);
    }

    let (codec_a, codec_b) = build_codecs_cached(cfg, &dataset.train, &ctl)?;
    let lay = codec_a.layout();
    let split = PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w };
    let samples = encode_pair_samples(&dataset.train, cond, t, &codec_a, &codec_b)?;

    if variant.is_single() {
        let label = if variant == Variant::SingleA { "single_A" } else { "single_B" };
        let mut den = DenoiserParams::init(
            denoiser_config(cfg, lay.c_prime),
            &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, "init_single")),
        )?;
        let pairs: Vec<(Mat, Mat)> = samples
            .iter()
            .map(|s| {
                if variant == Variant::SingleA {
                    (s.cond_a.clone(), s.tgt_a.clone())
                } else {
                    (s.cond_b.clone(), s.tgt_b.clone())
                }
            })
            .collect();
        let losses = run_stage_single(cfg, label, &mut den, &pairs, split, &sched, total, &ctl)?;
        let bundle = ModelBundle {
            variant,
            codec_a,
            codec_b: Some(codec_b),
            den_a: den,
            den_b: None,
            cross: None,
            schedule: sched,
            step: total as u64,
            config_hash: cfg.hash(),
        };
        let (la, lb) = if variant == Variant::SingleA { (losses, vec![]) } else { (vec![], losses) };
        return Ok(TwoStageResult {
            bundle,
            stage1_losses_a: la,
            stage1_losses_b: lb,
            stage2_losses: vec![],
        });
    }

    // joint pair variants
    let init_rng_seed = stage_seed(cfg.seed, "init_joint");
    let (mut nets, s1a, s1b) = if variant.pretrain() {
        let mut den_a = DenoiserParams::init(
            denoiser_config(cfg, lay.c_prime),
            &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, "init_A")),
        )?;
        let mut den_b = DenoiserParams::init(
            denoiser_config(cfg, lay.c_prime),
            &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, "init_B")),
        )?;
        let pairs_a: Vec<(Mat, Mat)> =
            samples.iter().map(|s| (s.cond_a.clone(), s.tgt_a.clone())).collect();
        let pairs_b: Vec<(Mat, Mat)> =
            samples.iter().map(|s| (s.cond_b.clone(), s.tgt_b.clone())).collect();
        let la = run_stage_single(
            cfg, "stage1_A", &mut den_a, &pairs_a, split, &sched, cfg.train.stage1_iters, &ctl,
        )?;
        let lb = run_stage_single(
            cfg, "stage1_B", &mut den_b, &pairs_b, split, &sched, cfg.train.stage1_iters, &ctl,
        )?;
        let nets = init_joint_from_pretrained(
            &den_a,
            &den_b,
            variant,
            &mut ChaCha12Rng::seed_from_u64(init_rng_seed),
        )?;
        (nets, la, lb)
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(init_rng_seed);
        let den_a = DenoiserParams::init(denoiser_config(cfg, lay.c_prime), &mut rng)?;
        let den_b = DenoiserParams::init(denoiser_config(cfg, lay.c_prime), &mut rng)?;
        let nets = init_joint_from_pretrained(&den_a, &den_b, variant, &mut rng)?;
        (nets, vec![], vec![])
    };

    let stage2_iters =
        if variant.pretrain() { cfg.train.stage2_iters } else { total };
    // fine-tuning a pretrained pair restarts the optimizer, so it gets the
    // gentler stage-2 rate; scratch variants do all their training here
    let stage2_lr = if variant.pretrain() {
        cfg.train.stage2_lr.unwrap_or(cfg.train.lr)
    } else {
        cfg.train.lr
    };
    let guidance = if variant.guidance() { Some(&cfg.guidance) } else { None };
    let s2 = run_stage_joint(
        cfg,
        &format!("stage2_{}", variant.name()),
        &mut nets,
        &samples,
        split,
        &sched,
        stage2_iters,
        variant.shared_noise(),
        guidance,
        stage2_lr,
        &ctl,
    )?;

    let bundle = ModelBundle {
        variant,
        codec_a,
        codec_b: Some(codec_b),
        den_a: nets.den_a,
        den_b: Some(nets.den_b),
        cross: Some(nets.cross),
        schedule: sched,
        step: total as u64,
        config_hash: cfg.hash(),
    };
    Ok(TwoStageResult { bundle, stage1_losses_a: s1a, stage1_losses_b: s1b, stage2_losses: s2 })
}

fn run_fused(
    cfg: &ExperimentConfig,
    variant: Variant,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    total: usize,
    ctl: &StageCtl,
) -> Result<TwoStageResult> {
    let (t, cond) = (cfg.world.t, cfg.train.cond_frames);
    match variant {
        Variant::JointConcatChannels => {
            let codec = cached_codec("codec_AB", ctl, cfg, || match cfg.codec.kind {
                CodecKind::Test => Ok(Codec::Test(TestCodec::new(
                    t,
                    cfg.world.h,
                    cfg.world.w,
                    2,
                    cfg.codec.patch,
                    stage_seed(cfg.seed, "codec_ab"),
                )?)),
                CodecKind::Trained => {
                    let clips: Vec<VideoClip> = dataset
                        .train
                        .iter()
                        .map(|p| {
                            stack_channels(&p.clip_a, &p.clip_b)?
                                .window(p.clip_a.t - t, t, Role::Target)
                        })
                        .collect::<Result<_>>()?;
                    fit_trained_codec(cfg, &clips, 2, "codec_ab")
                }
            })?;
            let lay = codec.layout();
            let split = PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w };
            let pairs: Vec<(Mat, Mat)> = dataset
                .train
                .iter()
                .map(|p| {
                    let stacked = stack_channels(&p.clip_a, &p.clip_b)?;
                    Ok((
                        encode_cond(&stacked, cond, t, &codec)?,
                        encode_tgt(&stacked, cond, t, &codec)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let mut den = DenoiserParams::init(
                denoiser_config(cfg, lay.c_prime),
                &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, "init_fused")),
            )?;
            let losses =
                run_stage_single(cfg, &format!("fused_{}", variant.name()), &mut den, &pairs, split, sched, total, ctl)?;
            Ok(TwoStageResult {
                bundle: ModelBundle {
                    variant,
                    codec_a: codec,
                    codec_b: None,
                    den_a: den,
                    den_b: None,
                    cross: None,
                    schedule: sched.clone(),
                    step: total as u64,
                    config_hash: cfg.hash(),
                },
                stage1_losses_a: vec![],
                stage1_losses_b: vec![],
                stage2_losses: losses,
            })
        }
        Variant::JointFusedLatents => {
            let (codec_a, codec_b) = build_codecs_cached(cfg, &dataset.train, ctl)?;
            let lay = codec_a.layout();
            let split = PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w };
            let samples = encode_pair_samples(&dataset.train, cond, t, &codec_a, &codec_b)?;
            let pairs: Vec<(Mat, Mat)> = samples
                .iter()
                .map(|s| (vstack(&s.cond_a, &s.cond_b), vstack(&s.tgt_a, &s.tgt_b)))
                .collect();
            let mut den = DenoiserParams::init(
                denoiser_config(cfg, 2 * lay.c_prime),
                &mut ChaCha12Rng::seed_from_u64(stage_seed(cfg.seed, "init_fused")),
            )?;
            let losses =
                run_stage_single(cfg, &format!("fused_{}", variant.name()), &mut den, &pairs, split, sched, total, ctl)?;
            Ok(TwoStageResult {
                bundle: ModelBundle {
                    variant,
                    codec_a,
                    codec_b: Some(codec_b),
                    den_a: den,
                    den_b: None,
                    cross: None,
                    schedule: sched.clone(),
                    step: total as u64,
                    config_hash: cfg.hash(),
                },
                stage1_losses_a: vec![],
                stage1_losses_b: vec![],
                stage2_losses: losses,
            })
        }
        _ => Err(Error::Config(format!("variant {} is not fused", variant))),
    }
}

// ---------------------------------------------------------------------------
// sampling and evaluation

fn clamp_clip(mut clip: VideoClip, modality: Modality) -> VideoClip {
    for v in clip.data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    clip.modality = modality;
    clip
}

/// Sample one synchronized pair of target clips from conditioning latents.
pub fn sample_pair_clips(
    bundle: &ModelBundle,
    cond_a_lat: &Mat,
    cond_b_lat: &Mat,
    steps: usize,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(VideoClip, VideoClip)> {
    let split = bundle.split();
    match bundle.variant {
        v if v.is_single() => Err(Error::Domain(
            "single-modality bundle cannot produce a synchronized pair".into(),
        )),
        Variant::JointConcatChannels => {
            let model = SingleModel { den: &bundle.den_a, split };
            let z = ddim_sample_single(&model, &bundle.schedule, cond_a_lat, steps, eta, rng)?;
            let lat = TriplaneLatent::from_flat(bundle.codec_a.layout(), &z)?;
            let clip = bundle.codec_a.decode(&lat)?;
            let (a, b) = split_channels(&clip)?;
            Ok((clamp_clip(a, Modality::A), clamp_clip(b, Modality::B)))
        }
        Variant::JointFusedLatents => {
            let fused_cond = vstack(cond_a_lat, cond_b_lat);
            let model = SingleModel { den: &bundle.den_a, split };
            let z = ddim_sample_single(&model, &bundle.schedule, &fused_cond, steps, eta, rng)?;
            let c_prime = bundle.codec_a.layout().c_prime;
            let (za, zb) = vsplit(&z, c_prime);
            let codec_b = bundle.codec_b.as_ref().ok_or_else(|| {
                Error::IncompatibleCheckpoint("fused bundle missing second codec".into())
            })?;
            let lat_a = TriplaneLatent::from_flat(bundle.codec_a.layout(), &za)?;
            let lat_b = TriplaneLatent::from_flat(codec_b.layout(), &zb)?;
            Ok((
                clamp_clip(bundle.codec_a.decode(&lat_a)?, Modality::A),
                clamp_clip(codec_b.decode(&lat_b)?, Modality::B),
            ))
        }
        _ => {
            let den_b = bundle.den_b.as_ref().ok_or_else(|| {
                Error::IncompatibleCheckpoint("joint bundle missing second branch".into())
            })?;
            let codec_b = bundle.codec_b.as_ref().ok_or_else(|| {
                Error::IncompatibleCheckpoint("joint bundle missing second codec".into())
            })?;
            let model = PairModel {
                den_a: &bundle.den_a,
                den_b,
                cross: bundle.cross.as_ref(),
                split,
            };
            let (za, zb) =
                ddim_sample(&model, &bundle.schedule, cond_a_lat, cond_b_lat, steps, eta, rng)?;
            let lat_a = TriplaneLatent::from_flat(bundle.codec_a.layout(), &za)?;
            let lat_b = TriplaneLatent::from_flat(codec_b.layout(), &zb)?;
            Ok((
                clamp_clip(bundle.codec_a.decode(&lat_a)?, Modality::A),
                clamp_clip(codec_b.decode(&lat_b)?, Modality::B),
            ))
        }
    }
}

/// Autoregressive pair sampler over a trained bundle.
pub struct BundleSampler<'a> {
    pub bundle: &'a ModelBundle,
    pub cond_frames: usize,
    pub steps: usize,
    pub eta: f64,
}

impl PairSampler for BundleSampler<'_> {
    fn cond_len(&self) -> usize {
        self.cond_frames
    }

    fn pass_len(&self) -> usize {
        self.bundle.codec_a.layout().t
    }

    fn sample_pass(
        &self,
        cond_a: &VideoClip,
        cond_b: &VideoClip,
        rng: &mut ChaCha12Rng,
    ) -> Result<(VideoClip, VideoClip)> {
        let t = self.pass_len();
        let (ca, cb) = match self.bundle.variant {
            Variant::JointConcatChannels => {
                let stacked = stack_channels(cond_a, cond_b)?.pad_to_length(t);
                let lat = self.bundle.codec_a.encode(&stacked)?.flat();
                (lat.clone(), lat)
            }
            _ => {
                let codec_b = self.bundle.codec_b.as_ref().ok_or_else(|| {
                    Error::IncompatibleCheckpoint("bundle missing second codec".into())
                })?;
                (
                    self.bundle.codec_a.encode(&cond_a.pad_to_length(t))?.flat(),
                    codec_b.encode(&cond_b.pad_to_length(t))?.flat(),
                )
            }
        };
        sample_pair_clips(self.bundle, &ca, &cb, self.steps, self.eta, rng)
    }
}

/// Full rollout convenience wrapper: predict `p_total` future frames.
pub fn rollout_bundle(
    bundle: &ModelBundle,
    past_a: &VideoClip,
    past_b: &VideoClip,
    p_total: usize,
    steps: usize,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(VideoClip, VideoClip)> {
    let sampler = BundleSampler { bundle, cond_frames: past_a.t, steps, eta };
    predict_rollout(&sampler, past_a, past_b, p_total, rng)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mask_a: bool,
    pub mask_b: bool,
    /// std-dev of Gaussian pixel noise added to the modality-B conditioning
    pub sigma_b: f64,
    pub k: usize,
    pub steps: usize,
    pub eta: f64,
}

impl EvalOptions {
    pub fn clean(k: usize, steps: usize) -> Self {
        EvalOptions { mask_a: false, mask_b: false, sigma_b: 0.0, k, steps, eta: 0.0 }
    }
}

fn corrupt_clip(clip: &VideoClip, sigma: f64, rng: &mut ChaCha12Rng) -> VideoClip {
    if sigma == 0.0 {
        return clip.clone();
    }
    let mut out = clip.clone();
    let noise = Mat::randn(1, out.data.len(), sigma, rng);
    for (v, n) in out.data.iter_mut().zip(noise.data.iter()) {
        *v = (*v + n).clamp(-1.0, 1.0);
    }
    out
}

/// Evaluate a bundle on held-out clips: best-of-K single-pass prediction
/// against ground truth. Missing-modality entries of single-branch bundles
/// are reported as NaN.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    cfg: &ExperimentConfig,
    clips: &[PairedClip],
    opts: &EvalOptions,
    rng: &mut ChaCha12Rng,
) -> Result<EvalReport> {
    bundle.verify_config(cfg)?;
    if opts.sigma_b < 0.0 {
        return Err(Error::Domain("noise sigma must be non-negative".into()));
    }
    if opts.k < 1 {
        return Err(Error::Domain("best-of-K needs K >= 1".into()));
    }
    if clips.is_empty() {
        return Err(Error::Domain("evaluation needs at least one clip".into()));
    }
    let (t, cond) = (cfg.world.t, cfg.train.cond_frames);
    let align_cfg = AlignmentConfig::default();
    let mut reports = Vec::with_capacity(clips.len());
    for clip in clips {
        let gt_a = clip.clip_a.window(cond, t, Role::Target)?;
        let gt_b = clip.clip_b.window(cond, t, Role::Target)?;
        let cond_a_clip = clip.clip_a.window(0, cond, Role::Condition)?;
        let cond_b_clip = corrupt_clip(
            &clip.clip_b.window(0, cond, Role::Condition)?,
            opts.sigma_b,
            rng,
        );
        if bundle.variant.is_single() {
            reports.push(evaluate_single_clip(
                bundle, cfg, &cond_a_clip, &cond_b_clip, &gt_a, &gt_b, opts, rng,
            )?);
            continue;
        }
        let mut trajectories = Vec::with_capacity(opts.k);
        for _ in 0..opts.k {
            let (ca, cb) = encode_eval_conds(bundle, &cond_a_clip, &cond_b_clip, t, opts)?;
            let (pred_a, pred_b) =
                sample_pair_clips(bundle, &ca, &cb, opts.steps, opts.eta, rng)?;
            trajectories.push(score_trajectory(&pred_a, &pred_b, &gt_a, &gt_b, &align_cfg)?);
        }
        reports.push(best_of_k(&trajectories)?);
    }
    mean_report(&reports)
}

fn encode_eval_conds(
    bundle: &ModelBundle,
    cond_a_clip: &VideoClip,
    cond_b_clip: &VideoClip,
    t: usize,
    opts: &EvalOptions,
) -> Result<(Mat, Mat)> {
    match bundle.variant {
        Variant::JointConcatChannels => {
            // masking a modality zeroes its channel before encoding
            let mut a = cond_a_clip.clone();
            let mut b = cond_b_clip.clone();
            if opts.mask_a {
                a.data.fill(0.0);
            }
            if opts.mask_b {
                b.data.fill(0.0);
            }
            let lat = bundle.codec_a.encode(&stack_channels(&a, &b)?.pad_to_length(t))?.flat();
            Ok((lat.clone(), lat))
        }
        _ => {
            let codec_b = bundle
                .codec_b
                .as_ref()
                .ok_or_else(|| Error::IncompatibleCheckpoint("bundle missing codec".into()))?;
            let lay = bundle.codec_a.layout();
            let ca = if opts.mask_a {
                Mat::zeros(lay.c_prime, lay.l)
            } else {
                bundle.codec_a.encode(&cond_a_clip.pad_to_length(t))?.flat()
            };
            let cb = if opts.mask_b {
                Mat::zeros(codec_b.layout().c_prime, codec_b.layout().l)
            } else {
                codec_b.encode(&cond_b_clip.pad_to_length(t))?.flat()
            };
            Ok((ca, cb))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_single_clip(
    bundle: &ModelBundle,
    cfg: &ExperimentConfig,
    cond_a_clip: &VideoClip,
    cond_b_clip: &VideoClip,
    gt_a: &VideoClip,
    gt_b: &VideoClip,
    opts: &EvalOptions,
    rng: &mut ChaCha12Rng,
) -> Result<EvalReport> {
    let t = cfg.world.t;
    let split = bundle.split();
    let is_a = bundle.variant == Variant::SingleA;
    let (own_cond_clip, own_codec, own_mask, gt) = if is_a {
        (cond_a_clip, &bundle.codec_a, opts.mask_a, gt_a)
    } else {
        let codec_b = bundle
            .codec_b
            .as_ref()
            .ok_or_else(|| Error::IncompatibleCheckpoint("bundle missing codec".into()))?;
        (cond_b_clip, codec_b, opts.mask_b, gt_b)
    };
    let lay = own_codec.layout();
    let cond = if own_mask {
        Mat::zeros(lay.c_prime, lay.l)
    } else {
        own_codec.encode(&own_cond_clip.pad_to_length(t))?.flat()
    };
    let model = SingleModel { den: &bundle.den_a, split };
    let mut trajectories = Vec::with_capacity(opts.k);
    for _ in 0..opts.k {
        let z = ddim_sample_single(&model, &bundle.schedule, &cond, opts.steps, opts.eta, rng)?;
        let pred = clamp_clip(
            own_codec.decode(&TriplaneLatent::from_flat(lay, &z)?)?,
            if is_a { Modality::A } else { Modality::B },
        );
        let (ssim_v, psnr_v, l2_v) = (
            crate::metrics::ssim(&pred, gt)?,
            crate::metrics::psnr(&pred, gt)?,
            crate::metrics::l2x100(&pred, gt)?,
        );
        let nan = f64::NAN;
        trajectories.push(if is_a {
            TrajectoryScores {
                ssim_a: ssim_v,
                ssim_b: nan,
                psnr_a: psnr_v,
                psnr_b: nan,
                l2x100_a: l2_v,
                l2x100_b: nan,
                alignment: nan,
            }
        } else {
            TrajectoryScores {
                ssim_a: nan,
                ssim_b: ssim_v,
                psnr_a: nan,
                psnr_b: psnr_v,
                l2x100_a: nan,
                l2x100_b: l2_v,
                alignment: nan,
            }
        });
    }
    let pick = |sel: fn(&TrajectoryScores) -> f64, minimize: bool| {
        let vals: Vec<f64> = trajectories.iter().map(sel).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else if minimize {
            vals.into_iter().fold(f64::INFINITY, f64::min)
        } else {
            vals.into_iter().fold(f64::NEG_INFINITY, f64::max)
        }
    };
    Ok(EvalReport {
        ssim_a: pick(|s| s.ssim_a, false),
        ssim_b: pick(|s| s.ssim_b, false),
        psnr_a: pick(|s| s.psnr_a, false),
        psnr_b: pick(|s| s.psnr_b, false),
        l2x100_a: pick(|s| s.l2x100_a, true),
        l2x100_b: pick(|s| s.l2x100_b, true),
        alignment_score: pick(|s| s.alignment, false),
        k: opts.k,
    })
}

// ---------------------------------------------------------------------------
// ablations, sweeps, benchmarks

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub seed: u64,
    pub total_iters: usize,
    pub batch: usize,
    pub final_loss: f64,
    pub eval: EvalReport,
}

/// Mean of the final tenth of the loss series.
pub fn final_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let tail = (losses.len() / 10).max(1);
    losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64
}

/// Train and evaluate one variant under the shared budget.
pub fn run_ablation(
    variant: Variant,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<AblationReport> {
    let mut vcfg = cfg.clone();
    vcfg.variant = Some(variant);
    let result = run_two_stage(&vcfg, out_dir, resume)?;
    let dataset = build_dataset(&vcfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(vcfg.seed, "eval"));
    let eval = evaluate_bundle(
        &result.bundle,
        &vcfg,
        &dataset.test,
        &EvalOptions::clean(vcfg.sample.k, vcfg.sample.steps),
        &mut rng,
    )?;
    let losses = if result.stage2_losses.is_empty() {
        [&result.stage1_losses_a[..], &result.stage1_losses_b[..]].concat()
    } else {
        result.stage2_losses.clone()
    };
    Ok(AblationReport {
        variant,
        seed: vcfg.seed,
        total_iters: vcfg.train.stage1_iters + vcfg.train.stage2_iters,
        batch: vcfg.train.batch,
        final_loss: final_loss(&losses),
        eval,
    })
}

/// Metric table over increasing conditioning noise on modality B.
pub fn eval_noise_robustness(
    bundle: &ModelBundle,
    cfg: &ExperimentConfig,
    clips: &[PairedClip],
    sigmas: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(f64, EvalReport)>> {
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(Error::Domain("noise sigma must be non-negative".into()));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let mut opts = EvalOptions::clean(cfg.sample.k, cfg.sample.steps);
            opts.sigma_b = sigma;
            Ok((sigma, evaluate_bundle(bundle, cfg, clips, &opts, rng)?))
        })
        .collect()
}

/// The paper's noise grid lives in 8-bit pixel units; the toy world spans
/// [-1, 1], so sigma is rescaled by 2/255.
pub fn rescale_sigma_to_toy(sigma_8bit: f64) -> f64 {
    sigma_8bit * 2.0 / 255.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub stca_flops: u64,
    pub ca_flops: u64,
    pub ratio: f64,
    pub stca_ms: f64,
    pub ca_ms: f64,
}

/// Exact cost-model numbers plus measured wall clock for both attention
/// wirings on random features.
pub fn bench_attention(
    geometries: &[(usize, usize, usize, usize)],
    dim: usize,
    heads: usize,
    reps: usize,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xbe9c);
    let params = StcaParams::init(dim, heads, true, &mut rng)?;
    let mut rows = Vec::with_capacity(geometries.len());
    for &(t, h, w, patch) in geometries {
        let cost = attention_cost(t, h, w, patch)?;
        let lay = crate::codec::latent_layout(t, h, w, patch, 1)?;
        let split = PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w };
        let z_r = Mat::randn(dim, split.total(), 1.0, &mut rng);
        let z_d = Mat::randn(dim, split.total(), 1.0, &mut rng);
        let time = |vanilla: bool| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..reps {
                let mut g = Graph::new(false);
                let zr = g.input(z_r.clone());
                let zd = g.input(z_d.clone());
                let ids = params.insert(&mut g);
                let start = Instant::now();
                if vanilla {
                    vanilla_ca_forward(&mut g, zr, zd, split, &params, &ids, None)?;
                } else {
                    stca_forward(&mut g, zr, zd, split, &params, &ids, None)?;
                }
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(best)
        };
        rows.push(BenchRow {
            t,
            h,
            w,
            patch,
            stca_flops: cost.stca_flops,
            ca_flops: cost.ca_flops,
            ratio: cost.ratio_f64(),
            stca_ms: time(false)?,
            ca_ms: time(true)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.t = 4;
        cfg.world.h = 16;
        cfg.world.w = 16;
        cfg.world.radius_min = 2.5;
        cfg.world.radius_max = 3.5;
        cfg.model.width = 8;
        cfg.schedule.t_diff = 50;
        cfg.train.stage1_iters = 3;
        cfg.train.stage2_iters = 3;
        cfg.train.batch = 2;
        cfg.train.n_train = 4;
        cfg.train.n_val = 2;
        cfg.train.n_test = 2;
        cfg.train.ckpt_every = 2;
        cfg.sample.steps = 5;
        cfg.sample.k = 1;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn dataset_splits_are_disjoint_and_sized() {
        let cfg = tiny_config();
        let d = build_dataset(&cfg).unwrap();
        assert_eq!(d.train.len(), 4);
        assert_eq!(d.val.len(), 2);
        assert_eq!(d.test.len(), 2);
        // clips carry conditioning frames in front
        assert_eq!(d.train[0].clip_a.t, cfg.world.t + cfg.train.cond_frames);
        d.manifest.assert_disjoint();
    }

    #[test]
    fn stack_split_roundtrip() {
        let cfg = tiny_config();
        let p = &build_dataset(&cfg).unwrap().train[0];
        let stacked = stack_channels(&p.clip_a, &p.clip_b).unwrap();
        let (a, b) = split_channels(&stacked).unwrap();
        assert_eq!(a.data, p.clip_a.data);
        assert_eq!(b.data, p.clip_b.data);
    }

    #[test]
    fn vstack_vsplit_roundtrip() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let a = Mat::randn(3, 5, 1.0, &mut r);
        let b = Mat::randn(2, 5, 1.0, &mut r);
        let (a2, b2) = vsplit(&vstack(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn two_stage_produces_coupled_bundle() {
        let cfg = tiny_config();
        let res = run_two_stage(&cfg, None, false).unwrap();
        assert_eq!(res.bundle.variant, Variant::JointStca);
        assert!(res.bundle.den_b.is_some());
        assert!(res.bundle.cross.is_some());
        assert_eq!(res.stage1_losses_a.len(), 3);
        assert_eq!(res.stage2_losses.len(), 3);
        assert!(res.stage2_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn warm_start_preserves_single_outputs() {
        let cfg = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let den_a = DenoiserParams::init(denoiser_config(&cfg, 5), &mut rng).unwrap();
        let den_b = DenoiserParams::init(denoiser_config(&cfg, 5), &mut rng).unwrap();
        let nets =
            init_joint_from_pretrained(&den_a, &den_b, Variant::JointStca, &mut rng).unwrap();
        assert!(nets.cross.zero_outputs());
        assert_eq!(nets.den_a.params().len(), den_a.params().len());
    }

    #[test]
    fn scratch_variant_skips_pretraining() {
        let mut cfg = tiny_config();
        cfg.variant = Some(Variant::JointScratch);
        let res = run_two_stage(&cfg, None, false).unwrap();
        assert!(res.stage1_losses_a.is_empty());
        assert_eq!(res.stage2_losses.len(), 6);
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        // uninterrupted run
        let full = run_two_stage(&cfg, None, false).unwrap();
        // interrupted: first chunk only (ckpt_every=2 < 3 iters), then resume
        let mut short = cfg.clone();
        short.train.stage1_iters = 2;
        short.train.stage2_iters = 0;
        run_two_stage(&short, Some(dir.path()), false).unwrap();
        let resumed = run_two_stage(&cfg, Some(dir.path()), true).unwrap();
        for (a, b) in full.stage2_losses.iter().zip(resumed.stage2_losses.iter()) {
            let denom = a.abs().max(1e-9);
            assert!((a - b).abs() / denom < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn evaluate_refuses_mismatched_config() {
        let cfg = tiny_config();
        let res = run_two_stage(&cfg, None, false).unwrap();
        let mut other = cfg.clone();
        other.seed = 999;
        let d = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let err = evaluate_bundle(
            &res.bundle,
            &other,
            &d.test,
            &EvalOptions::clean(1, 5),
            &mut rng,
        );
        assert!(matches!(err, Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn evaluate_emits_full_report() {
        let cfg = tiny_config();
        let res = run_two_stage(&cfg, None, false).unwrap();
        let d = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let rep = evaluate_bundle(
            &res.bundle,
            &cfg,
            &d.test,
            &EvalOptions::clean(1, 5),
            &mut rng,
        )
        .unwrap();
        assert!(rep.ssim_a.is_finite());
        assert!(rep.l2x100_b >= 0.0);
        assert!((0.0..=1.0).contains(&rep.alignment_score));
        assert_eq!(rep.k, 1);
    }

    #[test]
    fn single_variant_reports_own_modality_only() {
        let mut cfg = tiny_config();
        cfg.variant = Some(Variant::SingleB);
        let res = run_two_stage(&cfg, None, false).unwrap();
        assert!(res.bundle.den_b.is_none());
        let d = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let rep = evaluate_bundle(
            &res.bundle,
            &cfg,
            &d.test,
            &EvalOptions::clean(1, 5),
            &mut rng,
        )
        .unwrap();
        assert!(rep.ssim_b.is_finite());
        assert!(rep.ssim_a.is_nan());
        assert!(rep.alignment_score.is_nan());
    }

    #[test]
    fn fused_variants_train_and_sample() {
        for variant in [Variant::JointConcatChannels, Variant::JointFusedLatents] {
            let mut cfg = tiny_config();
            cfg.variant = Some(variant);
            let res = run_two_stage(&cfg, None, false).unwrap();
            let d = build_dataset(&cfg).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            let rep = evaluate_bundle(
                &res.bundle,
                &cfg,
                &d.test,
                &EvalOptions::clean(1, 5),
                &mut rng,
            )
            .unwrap();
            assert!(rep.ssim_a.is_finite(), "variant {}", variant);
            assert!(rep.ssim_b.is_finite(), "variant {}", variant);
        }
    }

    #[test]
    fn rollout_emits_exact_frame_count() {
        let cfg = tiny_config();
        let res = run_two_stage(&cfg, None, false).unwrap();
        let d = build_dataset(&cfg).unwrap();
        let past_a = d.test[0].clip_a.window(0, 2, Role::Condition).unwrap();
        let past_b = d.test[0].clip_b.window(0, 2, Role::Condition).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (a, b) = rollout_bundle(&res.bundle, &past_a, &past_b, 10, 5, 0.0, &mut rng).unwrap();
        // 4-frame passes: ceil(10/4) = 3 passes, last truncated
        assert_eq!(a.t, 10);
        assert_eq!(b.t, 10);
    }

    #[test]
    fn noise_sweep_rows() {
        let cfg = tiny_config();
        let res = run_two_stage(&cfg, None, false).unwrap();
        let d = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let sigmas = [0.0, rescale_sigma_to_toy(2.5), rescale_sigma_to_toy(5.0)];
        let rows =
            eval_noise_robustness(&res.bundle, &cfg, &d.test, &sigmas, &mut rng).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].0, 0.0);
        assert!(
            eval_noise_robustness(&res.bundle, &cfg, &d.test, &[-1.0], &mut rng).is_err()
        );
    }

    #[test]
    fn bench_attention_reports_exact_ratios() {
        let rows = bench_attention(&[(2, 8, 8, 4), (8, 64, 64, 4)], 8, 2, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].ratio - 1.0 / 3.0).abs() < 1e-12);
        assert!((rows[1].ratio - 0.375).abs() < 1e-15);
        assert!(rows[1].stca_ms > 0.0 && rows[1].ca_ms > 0.0);
    }

    #[test]
    fn unknown_fused_variant_rejected() {
        let cfg = tiny_config();
        let d = build_dataset(&cfg).unwrap();
        let sched = make_schedule(50, cfg.schedule.shape).unwrap();
        let ctl = StageCtl { dir: None, resume: false };
        assert!(run_fused(&cfg, Variant::JointStca, &d, &sched, 1, &ctl).is_err());
    }
}
