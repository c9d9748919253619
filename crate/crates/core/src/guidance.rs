//! Cross-modality guidance: random masking of conditioning modalities during
//! training. The masked slot becomes the all-zero null latent, so the joint
//! model also learns the partially conditioned distributions.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TriplaneLatent;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningMask {
    pub use_a: bool,
    pub use_b: bool,
}

impl ConditioningMask {
    pub const BOTH: ConditioningMask = ConditioningMask { use_a: true, use_b: true };
    pub const A_ONLY: ConditioningMask = ConditioningMask { use_a: true, use_b: false };
    pub const B_ONLY: ConditioningMask = ConditioningMask { use_a: false, use_b: true };
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceProbs {
    pub p_both: f64,
    pub p_a_only: f64,
    pub p_b_only: f64,
}

impl Default for GuidanceProbs {
    fn default() -> Self {
        GuidanceProbs { p_both: 0.5, p_a_only: 0.25, p_b_only: 0.25 }
    }
}

impl GuidanceProbs {
    pub fn validate(&self) -> Result<()> {
        let s = self.p_both + self.p_a_only + self.p_b_only;
        if (s - 1.0).abs() > 1e-9 || self.p_both < 0.0 || self.p_a_only < 0.0 || self.p_b_only < 0.0
        {
            return Err(Error::Config(format!("guidance probabilities must sum to 1, got {}", s)));
        }
        Ok(())
    }
}

/// Draws one of (both, A only, B only). The all-null case is never sampled.
pub fn sample_mask(probs: &GuidanceProbs, rng: &mut ChaCha12Rng) -> ConditioningMask {
    let u: f64 = rng.gen();
    if u < probs.p_both {
        ConditioningMask::BOTH
    } else if u < probs.p_both + probs.p_a_only {
        ConditioningMask::A_ONLY
    } else {
        ConditioningMask::B_ONLY
    }
}

/// Masked slot is replaced by the zero latent; unmasked pass through.
pub fn apply_mask(
    c_a: &TriplaneLatent,
    c_b: &TriplaneLatent,
    mask: ConditioningMask,
) -> (TriplaneLatent, TriplaneLatent) {
    let out_a = if mask.use_a { c_a.clone() } else { TriplaneLatent::zeros(c_a.layout) };
    let out_b = if mask.use_b { c_b.clone() } else { TriplaneLatent::zeros(c_b.layout) };
    (out_a, out_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::latent_layout;
    use crate::tensor::Mat;
    use rand::SeedableRng;

    #[test]
    fn frequencies_match_half_quarter_quarter() {
        let probs = GuidanceProbs::default();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_mask(&probs, &mut rng) {
                ConditioningMask::BOTH => counts[0] += 1,
                ConditioningMask::A_ONLY => counts[1] += 1,
                ConditioningMask::B_ONLY => counts[2] += 1,
                m => panic!("unexpected mask {:?}", m),
            }
        }
        let f = |c: usize| c as f64 / n as f64;
        assert!((f(counts[0]) - 0.50).abs() < 0.02);
        assert!((f(counts[1]) - 0.25).abs() < 0.02);
        assert!((f(counts[2]) - 0.25).abs() < 0.02);
        // chi-square at significance 0.01 (2 dof, critical value 9.21)
        let exp = [0.5 * n as f64, 0.25 * n as f64, 0.25 * n as f64];
        let chi2: f64 =
            counts.iter().zip(exp.iter()).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 9.21, "chi-square {}", chi2);
    }

    #[test]
    fn all_null_never_sampled_and_reproducible() {
        let probs = GuidanceProbs::default();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let seq1: Vec<_> = (0..1000).map(|_| sample_mask(&probs, &mut rng)).collect();
        assert!(seq1.iter().all(|m| m.use_a || m.use_b));
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let seq2: Vec<_> = (0..1000).map(|_| sample_mask(&probs, &mut rng)).collect();
        assert_eq!(seq1, seq2);
    }

    #[test]
    fn apply_mask_behaviour() {
        let lay = latent_layout(2, 8, 8, 4, 3).unwrap();
        let mut a = TriplaneLatent::zeros(lay);
        a.z_s = Mat::from_fn(3, lay.n_s, |i, j| (i + j) as f64);
        let b = a.clone();
        let (oa, ob) = apply_mask(&a, &b, ConditioningMask::BOTH);
        assert_eq!((oa.clone(), ob), (a.clone(), b.clone()));
        let (oa, ob) = apply_mask(&a, &b, ConditioningMask::A_ONLY);
        assert_eq!(oa, a);
        assert_eq!(ob, TriplaneLatent::zeros(lay));
        // idempotent
        let (oa2, ob2) = apply_mask(&oa, &ob, ConditioningMask::A_ONLY);
        assert_eq!((oa2, ob2), (oa, ob));
    }

    #[test]
    fn invalid_probs_rejected() {
        let p = GuidanceProbs { p_both: 0.5, p_a_only: 0.5, p_b_only: 0.5 };
        assert!(p.validate().is_err());
    }
}
