//! Per-modality denoising network over the flattened triplane latent.
//!
//! Two resolution levels over the token axis: the length is reduced by a
//! factor of 4 exactly once (per plane, so resampling never mixes tokens
//! across plane boundaries) and channels are doubled at the reduction. The
//! cross-modality attention hook sits at the deepest level, right after its
//! self-attention block; an optional config flag also inserts it after the
//! first-level self-attention for the corresponding ablation.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stca::{
    nonshared_stca_forward, stca_forward, vanilla_ca_forward, AttnStats, PlaneSplit, StcaIds,
    StcaParams,
};
use crate::tensor::{Graph, Id, Mat};

pub const DOWN_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// latent channels C'
    pub c_in: usize,
    /// base width at the full token resolution
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    emb_w: Mat,
    emb_b: Mat,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

impl ResBlock {
    fn init(width: usize, emb_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let hidden = 2 * width;
        let s = |f: usize| 1.0 / (f as f64).sqrt();
        ResBlock {
            emb_w: Mat::randn(width, emb_dim, s(emb_dim), rng),
            emb_b: Mat::zeros(width, 1),
            w1: Mat::randn(hidden, width, s(width), rng),
            b1: Mat::zeros(hidden, 1),
            w2: Mat::randn(width, hidden, s(hidden), rng),
            b2: Mat::zeros(width, 1),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        vec![&self.emb_w, &self.emb_b, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.emb_w, &mut self.emb_b, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttn {
    w_q: Mat,
    w_k: Mat,
    w_v: Mat,
    w_o: Mat,
}

impl SelfAttn {
    fn init(width: usize, rng: &mut ChaCha12Rng) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        SelfAttn {
            w_q: Mat::randn(width, width, s, rng),
            w_k: Mat::randn(width, width, s, rng),
            w_v: Mat::randn(width, width, s, rng),
            w_o: Mat::randn(width, width, 0.1 * s, rng),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    in_w: Mat,
    in_b: Mat,
    res1: ResBlock,
    attn1: SelfAttn,
    down_w: Mat,
    down_b: Mat,
    res2: ResBlock,
    attn2: SelfAttn,
    up_w: Mat,
    up_b: Mat,
    res3: ResBlock,
    out_w: Mat,
    out_b: Mat,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        let w = config.width;
        if w % config.heads != 0 {
            return Err(Error::Config("width must be divisible by heads".into()));
        }
        let s = |f: usize| 1.0 / (f as f64).sqrt();
        Ok(DenoiserParams {
            config,
            in_w: Mat::randn(w, 2 * config.c_in, s(2 * config.c_in), rng),
            in_b: Mat::zeros(w, 1),
            res1: ResBlock::init(w, w, rng),
            attn1: SelfAttn::init(w, rng),
            down_w: Mat::randn(2 * w, DOWN_FACTOR * w, s(DOWN_FACTOR * w), rng),
            down_b: Mat::zeros(2 * w, 1),
            res2: ResBlock::init(2 * w, w, rng),
            attn2: SelfAttn::init(2 * w, rng),
            up_w: Mat::randn(DOWN_FACTOR * w, 2 * w, s(2 * w), rng),
            up_b: Mat::zeros(DOWN_FACTOR * w, 1),
            res3: ResBlock::init(w, w, rng),
            out_w: Mat::randn(config.c_in, w, 0.1 * s(w), rng),
            out_b: Mat::zeros(config.c_in, 1),
        })
    }

    /// Architecture fingerprint for checkpoint compatibility checks.
    pub fn fingerprint(&self) -> String {
        format!("denoiser-v1:c{}w{}h{}", self.config.c_in, self.config.width, self.config.heads)
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut v = vec![&self.in_w, &self.in_b];
        v.extend(self.res1.params());
        v.extend(self.attn1.params());
        v.push(&self.down_w);
        v.push(&self.down_b);
        v.extend(self.res2.params());
        v.extend(self.attn2.params());
        v.push(&self.up_w);
        v.push(&self.up_b);
        v.extend(self.res3.params());
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![&mut self.in_w, &mut self.in_b];
        v.extend(self.res1.params_mut());
        v.extend(self.attn1.params_mut());
        v.push(&mut self.down_w);
        v.push(&mut self.down_b);
        v.extend(self.res2.params_mut());
        v.extend(self.attn2.params_mut());
        v.push(&mut self.up_w);
        v.push(&mut self.up_b);
        v.extend(self.res3.params_mut());
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    pub fn insert(&self, g: &mut Graph) -> Vec<Id> {
        self.params().into_iter().map(|m| g.input(m.clone())).collect()
    }
}

/// Sinusoidal embedding of the diffusion step, dimension = base width.
pub fn step_embedding(t: usize, dim: usize) -> Mat {
    let mut emb = Mat::zeros(dim, 1);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let x = t as f64 * freq;
        emb.data[2 * i] = x.sin();
        emb.data[2 * i + 1] = x.cos();
    }
    emb
}

/// Channel concatenation of the noisy latent with the conditioning latent.
pub fn condition_inject(g: &mut Graph, z_t: Id, cond: Id) -> Result<Id> {
    let (a, b) = (g.value(z_t), g.value(cond));
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "condition layout {}x{} does not match target {}x{}",
            b.rows, b.cols, a.rows, a.cols
        )));
    }
    Ok(g.concat_rows(&[z_t, cond]))
}

fn res_block(g: &mut Graph, ids: &[Id], h: Id, emb: Id) -> Id {
    // ids: emb_w, emb_b, w1, b1, w2, b2
    let e = g.matmul(ids[0], emb);
    let e = g.add(e, ids[1]);
    let u = g.add_bias(h, e);
    let x = g.matmul(ids[2], u);
    let x = g.add_bias(x, ids[3]);
    let x = g.silu(x);
    let x = g.matmul(ids[4], x);
    let x = g.add_bias(x, ids[5]);
    g.add(h, x)
}

fn self_attn(g: &mut Graph, ids: &[Id], h: Id, heads: usize) -> Id {
    // ids: w_q, w_k, w_v, w_o
    let width = g.value(h).rows;
    let dk = width / heads;
    let q = g.matmul(ids[0], h);
    let k = g.matmul(ids[1], h);
    let v = g.matmul(ids[2], h);
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_rows(q, hd * dk, dk);
        let kh = g.slice_rows(k, hd * dk, dk);
        let vh = g.slice_rows(v, hd * dk, dk);
        let qt = g.transpose(qh);
        let a = g.matmul(qt, kh);
        let a = g.scale(a, 1.0 / (dk as f64).sqrt());
        let sm = g.softmax_rows(a);
        let smt = g.transpose(sm);
        outs.push(g.matmul(vh, smt));
    }
    let cat = g.concat_rows(&outs);
    let o = g.matmul(ids[3], cat);
    g.add(h, o)
}

/// Per-plane token folding: each plane's columns grouped by DOWN_FACTOR.
fn fold_planes(g: &mut Graph, h: Id, split: PlaneSplit) -> Result<Id> {
    split.downsample(DOWN_FACTOR)?;
    let mut parts = Vec::with_capacity(3);
    for (start, len) in split.ranges() {
        if len == 0 {
            continue;
        }
        let s = g.slice_cols(h, start, len);
        parts.push(g.fold_cols(s, DOWN_FACTOR));
    }
    Ok(g.concat_cols(&parts))
}

fn unfold_planes(g: &mut Graph, h: Id, split_down: PlaneSplit) -> Id {
    let mut parts = Vec::with_capacity(3);
    for (start, len) in split_down.ranges() {
        if len == 0 {
            continue;
        }
        let s = g.slice_cols(h, start, len);
        parts.push(g.unfold_cols(s, DOWN_FACTOR));
    }
    g.concat_cols(&parts)
}

/// Parameter id offsets into the flat id vector produced by `insert`.
/// Layout: in(2) res1(6) attn1(4) down(2) res2(6) attn2(4) up(2) res3(6) out(2).
struct Off;
impl Off {
    const IN: std::ops::Range<usize> = 0..2;
    const RES1: std::ops::Range<usize> = 2..8;
    const ATTN1: std::ops::Range<usize> = 8..12;
    const DOWN: std::ops::Range<usize> = 12..14;
    const RES2: std::ops::Range<usize> = 14..20;
    const ATTN2: std::ops::Range<usize> = 20..24;
    const UP: std::ops::Range<usize> = 24..26;
    const RES3: std::ops::Range<usize> = 26..32;
    const OUT: std::ops::Range<usize> = 32..34;
}

pub struct BranchState {
    /// level-1 feature after self-attention (width x L)
    pub h1: Id,
    emb: Id,
}

impl DenoiserParams {
    fn check_input(&self, g: &Graph, z_t: Id, cond: Id, split: PlaneSplit) -> Result<()> {
        let z = g.value(z_t);
        let c = g.value(cond);
        if z.rows != self.config.c_in || c.rows != self.config.c_in {
            return Err(Error::ShapeMismatch(format!(
                "latent channels {} do not match denoiser c_in {}",
                z.rows, self.config.c_in
            )));
        }
        if z.cols != split.total() || c.cols != split.total() {
            return Err(Error::ShapeMismatch("token count does not match plane split".into()));
        }
        Ok(())
    }

    /// Input projection, level-1 residual block and self-attention.
    pub fn front(
        &self,
        g: &mut Graph,
        ids: &[Id],
        z_t: Id,
        cond: Id,
        t: usize,
        split: PlaneSplit,
    ) -> Result<BranchState> {
        self.check_input(g, z_t, cond, split)?;
        let x = condition_inject(g, z_t, cond)?;
        let h = g.matmul(ids[Off::IN.start], x);
        let h = g.add_bias(h, ids[Off::IN.start + 1]);
        let emb = g.input(step_embedding(t, self.config.width));
        let h = res_block(g, &ids[Off::RES1], h, emb);
        let h1 = self_attn(g, &ids[Off::ATTN1], h, self.config.heads);
        Ok(BranchState { h1, emb })
    }

    /// Downsample and run the deepest residual + self-attention blocks.
    pub fn mid(&self, g: &mut Graph, ids: &[Id], st: &BranchState, split: PlaneSplit) -> Result<Id> {
        let folded = fold_planes(g, st.h1, split)?;
        let h = g.matmul(ids[Off::DOWN.start], folded);
        let h = g.add_bias(h, ids[Off::DOWN.start + 1]);
        let h = res_block(g, &ids[Off::RES2], h, st.emb);
        Ok(self_attn(g, &ids[Off::ATTN2], h, self.config.heads))
    }

    /// Upsample, skip-connect the level-1 feature and project to epsilon.
    pub fn back(
        &self,
        g: &mut Graph,
        ids: &[Id],
        h2: Id,
        st: &BranchState,
        split: PlaneSplit,
    ) -> Result<Id> {
        let u = g.matmul(ids[Off::UP.start], h2);
        let u = g.add_bias(u, ids[Off::UP.start + 1]);
        let up = unfold_planes(g, u, split.downsample(DOWN_FACTOR)?);
        let h = g.add(up, st.h1);
        let h = res_block(g, &ids[Off::RES3], h, st.emb);
        let e = g.matmul(ids[Off::OUT.start], h);
        Ok(g.add_bias(e, ids[Off::OUT.start + 1]))
    }
}

/// Single-branch epsilon prediction (no cross-modality exchange).
pub fn denoise_single(
    g: &mut Graph,
    params: &DenoiserParams,
    ids: &[Id],
    z_t: Id,
    cond: Id,
    t: usize,
    split: PlaneSplit,
) -> Result<Id> {
    let st = params.front(g, ids, z_t, cond, t, split)?;
    let h2 = params.mid(g, ids, &st, split)?;
    params.back(g, ids, h2, &st, split)
}

/// How the two branches of a joint forward exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossWiring {
    /// split spatio-temporal cross-attention, one shared matrix per pair
    Stca,
    /// vanilla cross-attention over the full token concatenation
    VanillaCa,
    /// split cross-attention with separate matrices per direction
    NonSharedStca,
}

/// Cross-attention parameter set for a joint model. `deep` operates at the
/// downsampled width (2w); `level1` exists only for the all-layers ablation;
/// the `*_rev` sets exist only for the non-shared wiring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossParams {
    pub wiring: CrossWiring,
    pub deep: StcaParams,
    pub deep_rev: Option<StcaParams>,
    pub level1: Option<StcaParams>,
    pub level1_rev: Option<StcaParams>,
}

impl CrossParams {
    pub fn init(
        width: usize,
        heads: usize,
        wiring: CrossWiring,
        shared: bool,
        all_layers: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let rev = wiring == CrossWiring::NonSharedStca;
        Ok(CrossParams {
            wiring,
            deep: StcaParams::init(2 * width, heads, shared, rng)?,
            deep_rev: if rev { Some(StcaParams::init(2 * width, heads, shared, rng)?) } else { None },
            level1: if all_layers { Some(StcaParams::init(width, heads, shared, rng)?) } else { None },
            level1_rev: if all_layers && rev {
                Some(StcaParams::init(width, heads, shared, rng)?)
            } else {
                None
            },
        })
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut v = self.deep.params();
        for p in [&self.deep_rev, &self.level1, &self.level1_rev].into_iter().flatten() {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.deep.params_mut();
        for p in
            [&mut self.deep_rev, &mut self.level1, &mut self.level1_rev].into_iter().flatten()
        {
            v.extend(p.params_mut());
        }
        v
    }

    /// True while every output projection is still zero (warm-start state).
    pub fn zero_outputs(&self) -> bool {
        self.deep.zero_outputs()
            && [&self.deep_rev, &self.level1, &self.level1_rev]
                .into_iter()
                .flatten()
                .all(|p| p.zero_outputs())
    }
}

pub struct CrossIds {
    pub deep: StcaIds,
    pub deep_rev: Option<StcaIds>,
    pub level1: Option<StcaIds>,
    pub level1_rev: Option<StcaIds>,
}

impl CrossIds {
    /// Graph ids in the same order as [`CrossParams::params`].
    pub fn flat_ids(&self) -> Vec<Id> {
        let mut v = self.deep.flat_ids();
        for ids in [&self.deep_rev, &self.level1, &self.level1_rev].into_iter().flatten() {
            v.extend(ids.flat_ids());
        }
        v
    }
}

impl CrossParams {
    pub fn insert(&self, g: &mut Graph) -> CrossIds {
        CrossIds {
            deep: self.deep.insert(g),
            deep_rev: self.deep_rev.as_ref().map(|p| p.insert(g)),
            level1: self.level1.as_ref().map(|p| p.insert(g)),
            level1_rev: self.level1_rev.as_ref().map(|p| p.insert(g)),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cross_apply(
    g: &mut Graph,
    wiring: CrossWiring,
    params: &StcaParams,
    ids: &StcaIds,
    ids_rev: Option<&StcaIds>,
    h_r: Id,
    h_d: Id,
    split: PlaneSplit,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    match wiring {
        CrossWiring::Stca => stca_forward(g, h_r, h_d, split, params, ids, stats),
        CrossWiring::VanillaCa => vanilla_ca_forward(g, h_r, h_d, split, params, ids, stats),
        CrossWiring::NonSharedStca => {
            let rev = ids_rev
                .ok_or_else(|| Error::Config("non-shared wiring needs reverse projections".into()))?;
            nonshared_stca_forward(g, h_r, h_d, split, params, ids, rev, stats)
        }
    }
}

/// Joint epsilon prediction: both branches evaluated in lockstep, exchanging
/// features through the cross module at the deepest layer (and optionally at
/// level 1). Returns (eps_r, eps_d).
#[allow(clippy::too_many_arguments)]
pub fn denoise_joint(
    g: &mut Graph,
    params_r: &DenoiserParams,
    ids_r: &[Id],
    params_d: &DenoiserParams,
    ids_d: &[Id],
    z_t_r: Id,
    cond_r: Id,
    z_t_d: Id,
    cond_d: Id,
    t: usize,
    split: PlaneSplit,
    cross: &CrossParams,
    cross_ids: &CrossIds,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    let mut st_r = params_r.front(g, ids_r, z_t_r, cond_r, t, split)?;
    let mut st_d = params_d.front(g, ids_d, z_t_d, cond_d, t, split)?;
    if let (Some(l1), Some(l1_ids)) = (&cross.level1, &cross_ids.level1) {
        let (hr, hd) = cross_apply(
            g,
            cross.wiring,
            l1,
            l1_ids,
            cross_ids.level1_rev.as_ref(),
            st_r.h1,
            st_d.h1,
            split,
            stats,
        )?;
        st_r.h1 = hr;
        st_d.h1 = hd;
    }
    let h2_r = params_r.mid(g, ids_r, &st_r, split)?;
    let h2_d = params_d.mid(g, ids_d, &st_d, split)?;
    let split_down = split.downsample(DOWN_FACTOR)?;
    let (h2_r, h2_d) = cross_apply(
        g,
        cross.wiring,
        &cross.deep,
        &cross_ids.deep,
        cross_ids.deep_rev.as_ref(),
        h2_r,
        h2_d,
        split_down,
        stats,
    )?;
    let eps_r = params_r.back(g, ids_r, h2_r, &st_r, split)?;
    let eps_d = params_d.back(g, ids_d, h2_d, &st_d, split)?;
    Ok((eps_r, eps_d))
}

/// Convenience non-graph wrapper: single-branch prediction on plain matrices.
pub fn predict_eps(
    params: &DenoiserParams,
    z_t: &Mat,
    cond: &Mat,
    t: usize,
    split: PlaneSplit,
) -> Result<Mat> {
    let mut g = Graph::new(false);
    let z = g.input(z_t.clone());
    let c = g.input(cond.clone());
    let ids = params.insert(&mut g);
    let out = denoise_single(&mut g, params, &ids, z, c, t, split)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn micro_split() -> PlaneSplit {
        PlaneSplit { n_s: 4, n_h: 8, n_w: 4 }
    }

    fn micro_params(seed: u64) -> DenoiserParams {
        DenoiserParams::init(DenoiserConfig { c_in: 3, width: 8, heads: 2 }, &mut rng(seed)).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let p = micro_params(1);
        let split = micro_split();
        let mut r = rng(2);
        let z = Mat::randn(3, split.total(), 1.0, &mut r);
        let c = Mat::randn(3, split.total(), 1.0, &mut r);
        let out = predict_eps(&p, &z, &c, 5, split).unwrap();
        assert_eq!((out.rows, out.cols), (3, split.total()));
    }

    #[test]
    fn deterministic_given_inputs() {
        let p = micro_params(1);
        let split = micro_split();
        let mut r = rng(3);
        let z = Mat::randn(3, split.total(), 1.0, &mut r);
        let c = Mat::randn(3, split.total(), 1.0, &mut r);
        let a = predict_eps(&p, &z, &c, 7, split).unwrap();
        let b = predict_eps(&p, &z, &c, 7, split).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_inject_contract() {
        let mut g = Graph::new(false);
        let mut r = rng(4);
        let z = g.input(Mat::randn(3, 16, 1.0, &mut r));
        let c = g.input(Mat::zeros(3, 16));
        let out = condition_inject(&mut g, z, c).unwrap();
        assert_eq!(g.value(out).rows, 6);
        assert!(!g.value(out).has_nan());
        let bad = g.input(Mat::zeros(3, 8));
        assert!(condition_inject(&mut g, z, bad).is_err());
    }

    #[test]
    fn step_embedding_distinguishes_steps() {
        let p = micro_params(1);
        let split = micro_split();
        let mut r = rng(5);
        let z = Mat::randn(3, split.total(), 1.0, &mut r);
        let c = Mat::randn(3, split.total(), 1.0, &mut r);
        let a = predict_eps(&p, &z, &c, 1, split).unwrap();
        let b = predict_eps(&p, &z, &c, 500, split).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn condition_sensitivity() {
        let p = micro_params(1);
        let split = micro_split();
        let mut r = rng(6);
        let z = Mat::randn(3, split.total(), 1.0, &mut r);
        let c1 = Mat::randn(3, split.total(), 1.0, &mut r);
        let c2 = Mat::randn(3, split.total(), 1.0, &mut r);
        let a = predict_eps(&p, &z, &c1, 5, split).unwrap();
        let b = predict_eps(&p, &z, &c2, 5, split).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn joint_with_zero_cross_outputs_equals_single() {
        let pr = micro_params(10);
        let pd = micro_params(11);
        let split = micro_split();
        let mut r = rng(12);
        let cross =
            CrossParams::init(8, 2, CrossWiring::Stca, true, false, &mut r).unwrap();
        assert!(cross.deep.zero_outputs());
        let z_r = Mat::randn(3, split.total(), 1.0, &mut r);
        let c_r = Mat::randn(3, split.total(), 1.0, &mut r);
        let z_d = Mat::randn(3, split.total(), 1.0, &mut r);
        let c_d = Mat::randn(3, split.total(), 1.0, &mut r);
        let mut g = Graph::new(false);
        let (zr, cr, zd, cd) = (
            g.input(z_r.clone()),
            g.input(c_r.clone()),
            g.input(z_d.clone()),
            g.input(c_d.clone()),
        );
        let ids_r = pr.insert(&mut g);
        let ids_d = pd.insert(&mut g);
        let cross_ids = cross.insert(&mut g);
        let (er, ed) = denoise_joint(
            &mut g, &pr, &ids_r, &pd, &ids_d, zr, cr, zd, cd, 3, split, &cross, &cross_ids, None,
        )
        .unwrap();
        let single_r = predict_eps(&pr, &z_r, &c_r, 3, split).unwrap();
        let single_d = predict_eps(&pd, &z_d, &c_d, 3, split).unwrap();
        assert!(g.value(er).max_abs_diff(&single_r) < 1e-12);
        assert!(g.value(ed).max_abs_diff(&single_d) < 1e-12);
    }

    #[test]
    fn rejects_out_of_layout_inputs() {
        let p = micro_params(1);
        let split = micro_split();
        let mut r = rng(7);
        let z = Mat::randn(2, split.total(), 1.0, &mut r);
        let c = Mat::randn(2, split.total(), 1.0, &mut r);
        assert!(predict_eps(&p, &z, &c, 5, split).is_err());
    }

    #[test]
    fn rejects_non_divisible_planes() {
        let p = micro_params(1);
        let split = PlaneSplit { n_s: 3, n_h: 8, n_w: 5 };
        let mut r = rng(8);
        let z = Mat::randn(3, split.total(), 1.0, &mut r);
        let c = Mat::randn(3, split.total(), 1.0, &mut r);
        assert!(matches!(predict_eps(&p, &z, &c, 5, split), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn full_gradient_check_micro_config() {
        let p = micro_params(20);
        let split = micro_split();
        let mut r = rng(21);
        let z = Mat::randn(3, split.total(), 0.5, &mut r);
        let c = Mat::randn(3, split.total(), 0.5, &mut r);
        let loss_of = |z_m: &Mat| {
            let mut g = Graph::new(false);
            let zi = g.input(z_m.clone());
            let ci = g.input(c.clone());
            let ids = p.insert(&mut g);
            let out = denoise_single(&mut g, &p, &ids, zi, ci, 5, split).unwrap();
            let sq = g.mul(out, out);
            g.value(sq).sum()
        };
        let mut g = Graph::new(true);
        let zi = g.input(z.clone());
        let ci = g.input(c.clone());
        let ids = p.insert(&mut g);
        let out = denoise_single(&mut g, &p, &ids, zi, ci, 5, split).unwrap();
        let sq = g.mul(out, out);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let analytic = grads[zi].as_ref().unwrap();
        let eps = 1e-5;
        let mut numeric = Mat::zeros(z.rows, z.cols);
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += eps;
            let mut zm = z.clone();
            zm.data[i] -= eps;
            numeric.data[i] = (loss_of(&zp) - loss_of(&zm)) / (2.0 * eps);
        }
        let denom = numeric.sq_norm().sqrt().max(1e-10);
        let diff = analytic.zip(&numeric, |a, b| a - b).sq_norm().sqrt();
        assert!(diff / denom < 1e-6, "grad rel err {}", diff / denom);
    }

    #[test]
    fn zero_sized_emb_half_guard() {
        // width 8 embedding fills all entries
        let e = step_embedding(3, 8);
        assert!(e.data.iter().any(|&v| v != 0.0));
    }
}
