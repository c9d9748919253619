//! Split spatio-temporal cross-attention.
//!
//! Two token sets (one per modality) are coupled per matching triplane pair
//! with a single shared attention matrix per head: A = Q_R^T Q_D / sqrt(d_k),
//! Softmax(A) routes depth values to the rgb-like branch and Softmax(A^T)
//! routes rgb values to the depth-like branch. Tokens are columns throughout
//! (features are dim x tokens).
//!
//! `attention_cost` implements the quadratic-term cost model comparing STCA
//! against vanilla cross-attention over the full token concatenation.

use std::cell::Cell;

use num_rational::Ratio;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentLayout;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Id, Mat};

/// Counts attention-matrix constructions, one per plane pair per head.
#[derive(Default)]
pub struct AttnStats {
    pub attention_matrices: Cell<u64>,
}

/// Projections for one plane pair (or shared across all three).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StcaPairParams {
    pub w_qr: Mat,
    pub w_qd: Mat,
    pub w_vr: Mat,
    pub w_vd: Mat,
    pub w_or: Mat,
    pub w_od: Mat,
}

impl StcaPairParams {
    /// Output projections start at zero so a coupled model initially equals
    /// its uncoupled branches.
    pub fn init(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        StcaPairParams {
            w_qr: Mat::randn(dim, dim, s, rng),
            w_qd: Mat::randn(dim, dim, s, rng),
            w_vr: Mat::randn(dim, dim, s, rng),
            w_vd: Mat::randn(dim, dim, s, rng),
            w_or: Mat::zeros(dim, dim),
            w_od: Mat::zeros(dim, dim),
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        vec![&self.w_qr, &self.w_qd, &self.w_vr, &self.w_vd, &self.w_or, &self.w_od]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.w_qr, &mut self.w_qd, &mut self.w_vr, &mut self.w_vd, &mut self.w_or,
            &mut self.w_od,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StcaParams {
    pub dim: usize,
    pub heads: usize,
    /// one parameter set for all three plane pairs, or one per pair
    pub shared: bool,
    pub pairs: Vec<StcaPairParams>,
}

impl StcaParams {
    pub fn init(dim: usize, heads: usize, shared: bool, rng: &mut ChaCha12Rng) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", dim, heads)));
        }
        let n = if shared { 1 } else { 3 };
        let pairs = (0..n).map(|_| StcaPairParams::init(dim, rng)).collect();
        Ok(StcaParams { dim, heads, shared, pairs })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn pair(&self, plane: usize) -> &StcaPairParams {
        if self.shared {
            &self.pairs[0]
        } else {
            &self.pairs[plane]
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.pairs.iter().flat_map(|p| p.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.pairs.iter_mut().flat_map(|p| p.params_mut()).collect()
    }

    pub fn zero_outputs(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.w_or.data.iter().all(|&v| v == 0.0) && p.w_od.data.iter().all(|&v| v == 0.0))
    }
}

/// Ids of one pair's projections inside a graph.
#[derive(Clone, Copy)]
pub struct StcaPairIds {
    pub w_qr: Id,
    pub w_qd: Id,
    pub w_vr: Id,
    pub w_vd: Id,
    pub w_or: Id,
    pub w_od: Id,
}

pub struct StcaIds {
    pub pairs: Vec<StcaPairIds>,
}

impl StcaParams {
    pub fn insert(&self, g: &mut Graph) -> StcaIds {
        let pairs = self
            .pairs
            .iter()
            .map(|p| StcaPairIds {
                w_qr: g.input(p.w_qr.clone()),
                w_qd: g.input(p.w_qd.clone()),
                w_vr: g.input(p.w_vr.clone()),
                w_vd: g.input(p.w_vd.clone()),
                w_or: g.input(p.w_or.clone()),
                w_od: g.input(p.w_od.clone()),
            })
            .collect();
        StcaIds { pairs }
    }
}

impl StcaIds {
    pub fn pair(&self, shared: bool, plane: usize) -> StcaPairIds {
        if shared {
            self.pairs[0]
        } else {
            self.pairs[plane]
        }
    }

    pub fn flat_ids(&self) -> Vec<Id> {
        self.pairs
            .iter()
            .flat_map(|p| vec![p.w_qr, p.w_qd, p.w_vr, p.w_vd, p.w_or, p.w_od])
            .collect()
    }
}

/// Dual-way attention for one token-pair with a single A per head.
pub fn shared_attention(
    g: &mut Graph,
    z_r: Id,
    z_d: Id,
    ids: StcaPairIds,
    heads: usize,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    let dim = g.value(z_r).rows;
    if g.value(z_d).rows != dim {
        return Err(Error::ShapeMismatch("token widths differ between modalities".into()));
    }
    if g.value(ids.w_qr).cols != dim {
        return Err(Error::ShapeMismatch(format!(
            "projection width {} does not match token width {}",
            g.value(ids.w_qr).cols,
            dim
        )));
    }
    if g.value(z_r).cols == 0 || g.value(z_d).cols == 0 {
        return Err(Error::ShapeMismatch("token counts must be >= 1".into()));
    }
    let dk = dim / heads;
    let q_r = g.matmul(ids.w_qr, z_r);
    let q_d = g.matmul(ids.w_qd, z_d);
    let v_r = g.matmul(ids.w_vr, z_r);
    let v_d = g.matmul(ids.w_vd, z_d);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads_r = Vec::with_capacity(heads);
    let mut heads_d = Vec::with_capacity(heads);
    for h in 0..heads {
        let qr_h = g.slice_rows(q_r, h * dk, dk);
        let qd_h = g.slice_rows(q_d, h * dk, dk);
        let vr_h = g.slice_rows(v_r, h * dk, dk);
        let vd_h = g.slice_rows(v_d, h * dk, dk);
        let qr_t = g.transpose(qr_h);
        let a_raw = g.matmul(qr_t, qd_h);
        let a = g.scale(a_raw, scale);
        if let Some(s) = stats {
            s.attention_matrices.set(s.attention_matrices.get() + 1);
        }
        // rgb side: Softmax(A) V_D, tokens as columns -> V_D Softmax(A)^T
        let sm = g.softmax_rows(a);
        let sm_t = g.transpose(sm);
        heads_r.push(g.matmul(vd_h, sm_t));
        // depth side: Softmax(A^T) V_R
        let a_t = g.transpose(a);
        let sm2 = g.softmax_rows(a_t);
        let sm2_t = g.transpose(sm2);
        heads_d.push(g.matmul(vr_h, sm2_t));
    }
    let cat_r = g.concat_rows(&heads_r);
    let cat_d = g.concat_rows(&heads_d);
    let out_r = g.matmul(ids.w_or, cat_r);
    let out_d = g.matmul(ids.w_od, cat_d);
    let z_r_out = g.add(z_r, out_r);
    let z_d_out = g.add(z_d, out_d);
    Ok((z_r_out, z_d_out))
}

/// Ablation baseline without the shared attention matrix: each direction
/// computes its own attention from its own projection set, doubling the
/// number of attention matrices.
pub fn nonshared_attention(
    g: &mut Graph,
    z_r: Id,
    z_d: Id,
    ids_fwd: StcaPairIds,
    ids_rev: StcaPairIds,
    heads: usize,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    let (out_r, _) = shared_attention(g, z_r, z_d, ids_fwd, heads, stats)?;
    let (_, out_d) = shared_attention(g, z_r, z_d, ids_rev, heads, stats)?;
    Ok((out_r, out_d))
}

/// Non-shared variant of [`stca_forward`]: per plane pair, two independent
/// attention computations instead of one shared matrix.
#[allow(clippy::too_many_arguments)]
pub fn nonshared_stca_forward(
    g: &mut Graph,
    z_r_flat: Id,
    z_d_flat: Id,
    split: PlaneSplit,
    params: &StcaParams,
    ids_fwd: &StcaIds,
    ids_rev: &StcaIds,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    if g.value(z_r_flat).cols != split.total() || g.value(z_d_flat).cols != split.total() {
        return Err(Error::ShapeMismatch("flattened token count does not match plane split".into()));
    }
    let mut outs_r = Vec::with_capacity(3);
    let mut outs_d = Vec::with_capacity(3);
    for (plane, (start, len)) in split.ranges().into_iter().enumerate() {
        if len == 0 {
            continue;
        }
        let zr = g.slice_cols(z_r_flat, start, len);
        let zd = g.slice_cols(z_d_flat, start, len);
        let (or, od) = nonshared_attention(
            g,
            zr,
            zd,
            ids_fwd.pair(params.shared, plane),
            ids_rev.pair(params.shared, plane),
            params.heads,
            stats,
        )?;
        outs_r.push(or);
        outs_d.push(od);
    }
    Ok((g.concat_cols(&outs_r), g.concat_cols(&outs_d)))
}

/// Plane boundaries of a flattened token axis (possibly after downsampling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneSplit {
    pub n_s: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl PlaneSplit {
    pub fn from_layout(lay: &LatentLayout) -> Self {
        PlaneSplit { n_s: lay.n_s, n_h: lay.n_h, n_w: lay.n_w }
    }

    pub fn total(&self) -> usize {
        self.n_s + self.n_h + self.n_w
    }

    pub fn downsample(&self, factor: usize) -> Result<PlaneSplit> {
        if self.n_s % factor != 0 || self.n_h % factor != 0 || self.n_w % factor != 0 {
            return Err(Error::InvalidGeometry(format!(
                "plane token counts ({}, {}, {}) not divisible by {}",
                self.n_s, self.n_h, self.n_w, factor
            )));
        }
        Ok(PlaneSplit { n_s: self.n_s / factor, n_h: self.n_h / factor, n_w: self.n_w / factor })
    }

    pub fn ranges(&self) -> [(usize, usize); 3] {
        [(0, self.n_s), (self.n_s, self.n_h), (self.n_s + self.n_h, self.n_w)]
    }
}

/// STCA over all three plane pairs of two flattened feature maps.
pub fn stca_forward(
    g: &mut Graph,
    z_r_flat: Id,
    z_d_flat: Id,
    split: PlaneSplit,
    params: &StcaParams,
    ids: &StcaIds,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    if g.value(z_r_flat).cols != split.total() || g.value(z_d_flat).cols != split.total() {
        return Err(Error::ShapeMismatch("flattened token count does not match plane split".into()));
    }
    let mut outs_r = Vec::with_capacity(3);
    let mut outs_d = Vec::with_capacity(3);
    for (plane, (start, len)) in split.ranges().into_iter().enumerate() {
        if len == 0 {
            continue;
        }
        let zr = g.slice_cols(z_r_flat, start, len);
        let zd = g.slice_cols(z_d_flat, start, len);
        let (or, od) =
            shared_attention(g, zr, zd, ids.pair(params.shared, plane), params.heads, stats)?;
        outs_r.push(or);
        outs_d.push(od);
    }
    Ok((g.concat_cols(&outs_r), g.concat_cols(&outs_d)))
}

/// Ablation baseline: the same dual-way attention computed once over the
/// full concatenation of all three planes' tokens.
pub fn vanilla_ca_forward(
    g: &mut Graph,
    z_r_flat: Id,
    z_d_flat: Id,
    split: PlaneSplit,
    params: &StcaParams,
    ids: &StcaIds,
    stats: Option<&AttnStats>,
) -> Result<(Id, Id)> {
    if g.value(z_r_flat).cols != split.total() || g.value(z_d_flat).cols != split.total() {
        return Err(Error::ShapeMismatch("flattened token count does not match plane split".into()));
    }
    shared_attention(g, z_r_flat, z_d_flat, ids.pair(true, 0), params.heads, stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCostReport {
    pub stca_flops: u64,
    pub ca_flops: u64,
    pub ratio_num: u64,
    pub ratio_den: u64,
}

impl AttentionCostReport {
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.ratio_num, self.ratio_den)
    }

    pub fn ratio_f64(&self) -> f64 {
        self.ratio_num as f64 / self.ratio_den as f64
    }
}

/// Quadratic-term cost model: sum of squared per-plane token counts vs the
/// square of the summed token counts. Exact integer arithmetic.
pub fn attention_cost(t: usize, h: usize, w: usize, patch: usize) -> Result<AttentionCostReport> {
    let lay = crate::codec::latent_layout(t, h, w, patch, 1)?;
    let (n_s, n_h, n_w) = (lay.n_s as u64, lay.n_h as u64, lay.n_w as u64);
    let stca = n_s * n_s + n_h * n_h + n_w * n_w;
    let ca = (n_s + n_h + n_w) * (n_s + n_h + n_w);
    let r = Ratio::new(stca, ca);
    Ok(AttentionCostReport {
        stca_flops: stca,
        ca_flops: ca,
        ratio_num: *r.numer(),
        ratio_den: *r.denom(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn randomized_params(dim: usize, heads: usize, shared: bool, seed: u64) -> StcaParams {
        let mut r = rng(seed);
        let mut p = StcaParams::init(dim, heads, shared, &mut r).unwrap();
        for pair in p.pairs.iter_mut() {
            pair.w_or = Mat::randn(dim, dim, 0.3, &mut r);
            pair.w_od = Mat::randn(dim, dim, 0.3, &mut r);
        }
        p
    }

    #[test]
    fn cost_matches_reported_ratios() {
        let r = attention_cost(8, 64, 64, 4).unwrap();
        assert_eq!((r.stca_flops, r.ca_flops), (98304, 262144));
        assert_eq!(r.ratio(), Ratio::new(3u64, 8u64));
        assert_eq!(r.ratio_f64(), 0.375);
        let r = attention_cost(8, 128, 128, 4).unwrap();
        assert_eq!(r.ratio(), Ratio::new(1u64, 2u64));
    }

    #[test]
    fn cost_hand_arithmetic() {
        let r = attention_cost(2, 8, 8, 4).unwrap();
        assert_eq!((r.stca_flops, r.ca_flops), (48, 144));
        assert_eq!(r.ratio(), Ratio::new(1u64, 3u64));
    }

    proptest! {
        #[test]
        fn cost_ratio_below_one(t in 1usize..12, hp in 1usize..10, wp in 1usize..10) {
            let p = 4;
            let r = attention_cost(t, hp * p, wp * p, p).unwrap();
            prop_assert!(r.ratio() < Ratio::new(1u64, 1u64));
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut r = rng(1);
        let params = StcaParams::init(8, 2, true, &mut r).unwrap();
        assert!(params.zero_outputs());
        let mut g = Graph::new(false);
        let zr = g.input(Mat::randn(8, 5, 1.0, &mut r));
        let zd = g.input(Mat::randn(8, 7, 1.0, &mut r));
        let ids = params.insert(&mut g);
        let (or, od) =
            shared_attention(&mut g, zr, zd, ids.pair(true, 0), params.heads, None).unwrap();
        assert_eq!(g.value(or), g.value(zr));
        assert_eq!(g.value(od), g.value(zd));
    }

    #[test]
    fn hand_computed_single_token() {
        // single token, single head, d_k = 1, all projections scalar 1:
        // z_r = 2, z_d = 3 -> A = 6, softmax over one element = 1,
        // z_r' = 2 + 3 = 5, z_d' = 3 + 2 = 5
        let one = Mat::from_vec(1, 1, vec![1.0]);
        let pair = StcaPairParams {
            w_qr: one.clone(),
            w_qd: one.clone(),
            w_vr: one.clone(),
            w_vd: one.clone(),
            w_or: one.clone(),
            w_od: one.clone(),
        };
        let params = StcaParams { dim: 1, heads: 1, shared: true, pairs: vec![pair] };
        let mut g = Graph::new(false);
        let zr = g.input(Mat::from_vec(1, 1, vec![2.0]));
        let zd = g.input(Mat::from_vec(1, 1, vec![3.0]));
        let ids = params.insert(&mut g);
        let (or, od) = shared_attention(&mut g, zr, zd, ids.pair(true, 0), 1, None).unwrap();
        assert_eq!(g.value(or).data, vec![5.0]);
        assert_eq!(g.value(od).data, vec![5.0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut r = rng(2);
        let params = StcaParams::init(8, 2, true, &mut r).unwrap();
        let mut g = Graph::new(false);
        let zr = g.input(Mat::randn(8, 4, 1.0, &mut r));
        let zd = g.input(Mat::randn(6, 4, 1.0, &mut r));
        let ids = params.insert(&mut g);
        assert!(shared_attention(&mut g, zr, zd, ids.pair(true, 0), 2, None).is_err());
    }

    #[test]
    fn single_a_per_pair_per_head() {
        let params = randomized_params(8, 2, true, 3);
        let split = PlaneSplit { n_s: 4, n_h: 6, n_w: 2 };
        let mut g = Graph::new(false);
        let mut r = rng(4);
        let zr = g.input(Mat::randn(8, split.total(), 1.0, &mut r));
        let zd = g.input(Mat::randn(8, split.total(), 1.0, &mut r));
        let ids = params.insert(&mut g);
        let stats = AttnStats::default();
        stca_forward(&mut g, zr, zd, split, &params, &ids, Some(&stats)).unwrap();
        assert_eq!(stats.attention_matrices.get(), 3 * 2);
        let stats = AttnStats::default();
        vanilla_ca_forward(&mut g, zr, zd, split, &params, &ids, Some(&stats)).unwrap();
        assert_eq!(stats.attention_matrices.get(), 2);
    }

    #[test]
    fn swap_symmetry() {
        // swapping modality inputs together with (R, D) parameter roles
        // swaps the outputs exactly
        let params = randomized_params(6, 2, true, 5);
        let swapped = {
            let p = &params.pairs[0];
            StcaParams {
                dim: 6,
                heads: 2,
                shared: true,
                pairs: vec![StcaPairParams {
                    w_qr: p.w_qd.clone(),
                    w_qd: p.w_qr.clone(),
                    w_vr: p.w_vd.clone(),
                    w_vd: p.w_vr.clone(),
                    w_or: p.w_od.clone(),
                    w_od: p.w_or.clone(),
                }],
            }
        };
        let mut r = rng(6);
        let zr_m = Mat::randn(6, 5, 1.0, &mut r);
        let zd_m = Mat::randn(6, 4, 1.0, &mut r);
        let mut g = Graph::new(false);
        let zr = g.input(zr_m.clone());
        let zd = g.input(zd_m.clone());
        let ids = params.insert(&mut g);
        let (or, od) = shared_attention(&mut g, zr, zd, ids.pair(true, 0), 2, None).unwrap();
        let (or_v, od_v) = (g.value(or).clone(), g.value(od).clone());
        let mut g2 = Graph::new(false);
        let zd2 = g2.input(zd_m);
        let zr2 = g2.input(zr_m);
        let ids2 = swapped.insert(&mut g2);
        let (od2, or2) = shared_attention(&mut g2, zd2, zr2, ids2.pair(true, 0), 2, None).unwrap();
        assert!(g2.value(od2).max_abs_diff(&od_v) < 1e-12);
        assert!(g2.value(or2).max_abs_diff(&or_v) < 1e-12);
    }

    #[test]
    fn plane_isolation() {
        // perturbing only z_R^s leaves the depth outputs on the h and w
        // planes unchanged
        let params = randomized_params(6, 2, true, 7);
        let split = PlaneSplit { n_s: 3, n_h: 4, n_w: 5 };
        let mut r = rng(8);
        let zr_m = Mat::randn(6, split.total(), 1.0, &mut r);
        let zd_m = Mat::randn(6, split.total(), 1.0, &mut r);
        let run = |zr_m: &Mat| {
            let mut g = Graph::new(false);
            let zr = g.input(zr_m.clone());
            let zd = g.input(zd_m.clone());
            let ids = params.insert(&mut g);
            let (_, od) = stca_forward(&mut g, zr, zd, split, &params, &ids, None).unwrap();
            g.value(od).clone()
        };
        let base = run(&zr_m);
        let mut perturbed = zr_m.clone();
        for i in 0..6 {
            for j in 0..split.n_s {
                perturbed.set(i, j, perturbed.get(i, j) + 0.5);
            }
        }
        let out = run(&perturbed);
        // s-plane depth tokens may change, h and w plane tokens must not
        for i in 0..6 {
            for j in split.n_s..split.total() {
                assert_eq!(base.get(i, j), out.get(i, j));
            }
        }
    }

    #[test]
    fn row_stochastic_softmax_both_directions() {
        let params = randomized_params(8, 2, true, 9);
        let mut r = rng(10);
        let mut g = Graph::new(false);
        let zr = g.input(Mat::randn(8, 6, 2.0, &mut r));
        let zd = g.input(Mat::randn(8, 9, 2.0, &mut r));
        let ids = params.insert(&mut g);
        shared_attention(&mut g, zr, zd, ids.pair(true, 0), 2, None).unwrap();
        // all-positive attention-shaped nodes are softmax outputs or their
        // transposes: each must be row- or column-stochastic, and both
        // directions (6x9 and 9x6) must appear row-stochastic per head
        let mut row_stochastic = [0usize; 2];
        for id in 0..g.len() {
            let v = g.value(id);
            let shape = if v.rows == 6 && v.cols == 9 {
                0
            } else if v.rows == 9 && v.cols == 6 {
                1
            } else {
                continue;
            };
            if !v.data.iter().all(|&x| x > 0.0) {
                continue;
            }
            let rows_ok = (0..v.rows)
                .all(|i| ((0..v.cols).map(|j| v.get(i, j)).sum::<f64>() - 1.0).abs() < 1e-6);
            let cols_ok = (0..v.cols)
                .all(|j| ((0..v.rows).map(|i| v.get(i, j)).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(rows_ok || cols_ok, "attention node {} is not stochastic", id);
            if rows_ok {
                row_stochastic[shape] += 1;
            }
        }
        assert!(row_stochastic[0] >= 2 && row_stochastic[1] >= 2, "{:?}", row_stochastic);
    }

    #[test]
    fn vanilla_matches_stca_on_single_plane() {
        // degenerate instance where only z^s exists
        let params = randomized_params(6, 2, true, 11);
        let split = PlaneSplit { n_s: 7, n_h: 0, n_w: 0 };
        let mut r = rng(12);
        let zr_m = Mat::randn(6, 7, 1.0, &mut r);
        let zd_m = Mat::randn(6, 7, 1.0, &mut r);
        let mut g = Graph::new(false);
        let zr = g.input(zr_m.clone());
        let zd = g.input(zd_m.clone());
        let ids = params.insert(&mut g);
        let (a_r, a_d) = stca_forward(&mut g, zr, zd, split, &params, &ids, None).unwrap();
        let (b_r, b_d) = vanilla_ca_forward(&mut g, zr, zd, split, &params, &ids, None).unwrap();
        assert!(g.value(a_r).max_abs_diff(g.value(b_r)) < 1e-12);
        assert!(g.value(a_d).max_abs_diff(g.value(b_d)) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = randomized_params(4, 2, true, 13);
        let split = PlaneSplit { n_s: 2, n_h: 3, n_w: 1 };
        let mut r = rng(14);
        let zr_m = Mat::randn(4, split.total(), 1.0, &mut r);
        let zd_m = Mat::randn(4, split.total(), 1.0, &mut r);
        let loss_of = |zr_m: &Mat, zd_m: &Mat, params: &StcaParams| {
            let mut g = Graph::new(false);
            let zr = g.input(zr_m.clone());
            let zd = g.input(zd_m.clone());
            let ids = params.insert(&mut g);
            let (or, od) = stca_forward(&mut g, zr, zd, split, params, &ids, None).unwrap();
            let o2r = g.mul(or, or);
            let o2d = g.mul(od, od);
            g.value(o2r).sum() + 2.0 * g.value(o2d).sum()
        };
        // analytic
        let mut g = Graph::new(true);
        let zr = g.input(zr_m.clone());
        let zd = g.input(zd_m.clone());
        let ids = params.insert(&mut g);
        let (or, od) = stca_forward(&mut g, zr, zd, split, &params, &ids, None).unwrap();
        let o2r = g.mul(or, or);
        let o2d = g.mul(od, od);
        let sr = g.sum_all(o2r);
        let sd0 = g.sum_all(o2d);
        let sd = g.scale(sd0, 2.0);
        let loss = g.add(sr, sd);
        let grads = g.backward(loss);
        // finite differences on inputs and every parameter
        let eps = 1e-5;
        let check = |analytic: &Mat, numeric: &Mat| {
            let denom = numeric.sq_norm().sqrt().max(1e-10);
            let diff = analytic.zip(numeric, |a, b| a - b).sq_norm().sqrt();
            assert!(diff / denom < 1e-6, "grad rel err {}", diff / denom);
        };
        for (mat, id) in [(&zr_m, zr), (&zd_m, zd)] {
            let mut numeric = Mat::zeros(mat.rows, mat.cols);
            for i in 0..mat.data.len() {
                let mut p = mat.clone();
                p.data[i] += eps;
                let mut m = mat.clone();
                m.data[i] -= eps;
                let (fp, fm) = if id == zr {
                    (loss_of(&p, &zd_m, &params), loss_of(&m, &zd_m, &params))
                } else {
                    (loss_of(&zr_m, &p, &params), loss_of(&zr_m, &m, &params))
                };
                numeric.data[i] = (fp - fm) / (2.0 * eps);
            }
            check(grads[id].as_ref().unwrap(), &numeric);
        }
        let flat = ids.flat_ids();
        for (pi, &pid) in flat.iter().enumerate() {
            let base = params.pairs[0].params()[pi].clone();
            let mut numeric = Mat::zeros(base.rows, base.cols);
            for i in 0..base.data.len() {
                let mut pp = params.clone();
                pp.pairs[0].params_mut()[pi].data[i] += eps;
                let mut pm = params.clone();
                pm.pairs[0].params_mut()[pi].data[i] -= eps;
                numeric.data[i] =
                    (loss_of(&zr_m, &zd_m, &pp) - loss_of(&zr_m, &zd_m, &pm)) / (2.0 * eps);
            }
            check(grads[pid].as_ref().unwrap(), &numeric);
        }
    }
}
