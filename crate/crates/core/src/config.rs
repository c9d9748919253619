//! Experiment configuration: TOML-loadable settings for the full pipeline
//! plus the ablation variant vocabulary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::hash_json;
use crate::denoiser::CrossWiring;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::guidance::GuidanceProbs;
use crate::toyworld::WorldConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleA,
    SingleB,
    JointStca,
    JointVanillaCa,
    JointConcatChannels,
    JointFusedLatents,
    JointIndependentNoise,
    JointNoGuidance,
    JointScratch,
    JointStcaAllLayers,
    JointNonsharedStca,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::SingleA,
        Variant::SingleB,
        Variant::JointStca,
        Variant::JointVanillaCa,
        Variant::JointConcatChannels,
        Variant::JointFusedLatents,
        Variant::JointIndependentNoise,
        Variant::JointNoGuidance,
        Variant::JointScratch,
        Variant::JointStcaAllLayers,
        Variant::JointNonsharedStca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleA => "single_A",
            Variant::SingleB => "single_B",
            Variant::JointStca => "joint_stca",
            Variant::JointVanillaCa => "joint_vanilla_ca",
            Variant::JointConcatChannels => "joint_concat_channels",
            Variant::JointFusedLatents => "joint_fused_latents",
            Variant::JointIndependentNoise => "joint_independent_noise",
            Variant::JointNoGuidance => "joint_no_guidance",
            Variant::JointScratch => "joint_scratch",
            Variant::JointStcaAllLayers => "joint_stca_all_layers",
            Variant::JointNonsharedStca => "joint_nonshared_stca",
        }
    }

    pub fn from_name(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{}'", s)))
    }

    /// Single-modality baseline (one branch, one modality).
    pub fn is_single(self) -> bool {
        matches!(self, Variant::SingleA | Variant::SingleB)
    }

    /// One denoiser over a merged representation of both modalities.
    pub fn is_fused(self) -> bool {
        matches!(self, Variant::JointConcatChannels | Variant::JointFusedLatents)
    }

    /// Two coupled branches trained jointly.
    pub fn is_joint_pair(self) -> bool {
        !self.is_single() && !self.is_fused()
    }

    /// Whether both branches see the same forward-process noise draw.
    pub fn shared_noise(self) -> bool {
        self != Variant::JointIndependentNoise
    }

    /// Whether conditioning-mask guidance is applied during joint training.
    pub fn guidance(self) -> bool {
        self.is_joint_pair() && self != Variant::JointNoGuidance
    }

    /// Whether stage-1 single-branch pretraining precedes joint training.
    pub fn pretrain(self) -> bool {
        self.is_joint_pair() && self != Variant::JointScratch
    }

    pub fn wiring(self) -> Option<CrossWiring> {
        match self {
            Variant::JointVanillaCa => Some(CrossWiring::VanillaCa),
            Variant::JointNonsharedStca => Some(CrossWiring::NonSharedStca),
            v if v.is_joint_pair() => Some(CrossWiring::Stca),
            _ => None,
        }
    }

    pub fn stca_all_layers(self) -> bool {
        self == Variant::JointStcaAllLayers
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// fixed invertible codec (no training needed)
    Test,
    /// learned triplane autoencoder
    Trained,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSettings {
    pub kind: CodecKind,
    pub patch: usize,
    /// latent channels for the trained codec (the test codec derives its own)
    pub c_prime: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CodecSettings {
    fn default() -> Self {
        CodecSettings {
            kind: CodecKind::Test,
            patch: 4,
            c_prime: 24,
            hidden: 96,
            iterations: 1500,
            batch: 8,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub width: usize,
    pub heads: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { width: 32, heads: 2 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSettings {
    pub t_diff: usize,
    /// noise-schedule shape, e.g. `[schedule.shape] kind = "cosine"`
    pub shape: ScheduleKind,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings { t_diff: 1000, shape: ScheduleKind::default() }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// separate learning rate for stage-2 joint fine-tuning; defaults to `lr`.
    /// A fresh optimizer at the full stage-1 rate destroys pretrained weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_lr: Option<f64>,
    /// conditioning window length in frames
    pub cond_frames: usize,
    pub n_train: u64,
    pub n_val: u64,
    pub n_test: u64,
    pub ckpt_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            stage1_iters: 5000,
            stage2_iters: 5000,
            batch: 4,
            lr: 1e-3,
            stage2_lr: None,
            cond_frames: 2,
            n_train: 64,
            n_val: 8,
            n_test: 8,
            ckpt_every: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSettings {
    pub steps: usize,
    pub eta: f64,
    /// trajectories per test sample (best-of-K)
    pub k: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings { steps: 100, eta: 0.0, k: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub codec: CodecSettings,
    pub model: ModelSettings,
    pub schedule: ScheduleSettings,
    pub guidance: GuidanceProbs,
    pub variant: Option<Variant>,
    pub seed: u64,
    pub train: TrainSettings,
    pub sample: SampleSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.world.h % self.codec.patch != 0 || self.world.w % self.codec.patch != 0 {
            return Err(Error::Config("world geometry not divisible by patch size".into()));
        }
        if self.train.cond_frames < 1 || self.train.cond_frames > self.world.t {
            return Err(Error::Config("cond_frames must lie in [1, t]".into()));
        }
        if self.model.width % self.model.heads != 0 {
            return Err(Error::Config("model width must be divisible by heads".into()));
        }
        if self.train.batch < 1 || self.train.n_train < 1 {
            return Err(Error::Config("training needs batch >= 1 and n_train >= 1".into()));
        }
        if self.sample.steps < 1 || self.sample.steps > self.schedule.t_diff {
            return Err(Error::Config("sample steps must lie in [1, t_diff]".into()));
        }
        if self.sample.k < 1 {
            return Err(Error::Config("best-of-K needs k >= 1".into()));
        }
        Ok(())
    }

    /// Stable identity of everything that affects trained artifacts.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Identity used by stage checkpoints. Iteration budgets and checkpoint
    /// cadence are excluded so a run can resume under a larger budget; the
    /// variant is excluded so joint stages can reuse stage-1 checkpoints
    /// (the variant is baked into the stage label instead).
    pub fn stage_hash(&self) -> String {
        let mut c = self.clone();
        c.train.stage1_iters = 0;
        c.train.stage2_iters = 0;
        c.train.ckpt_every = 0;
        c.train.stage2_lr = None;
        c.variant = None;
        hash_json(&c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(matches!(Variant::from_name("motion_loss"), Err(Error::Config(_))));
    }

    #[test]
    fn variant_properties() {
        assert!(Variant::SingleA.is_single());
        assert!(Variant::JointConcatChannels.is_fused());
        assert!(Variant::JointStca.is_joint_pair());
        assert!(!Variant::JointIndependentNoise.shared_noise());
        assert!(Variant::JointStca.shared_noise());
        assert!(!Variant::JointNoGuidance.guidance());
        assert!(Variant::JointStca.guidance());
        assert!(!Variant::JointScratch.pretrain());
        assert!(Variant::JointStca.pretrain());
        assert_eq!(Variant::JointVanillaCa.wiring(), Some(CrossWiring::VanillaCa));
        assert_eq!(Variant::JointNonsharedStca.wiring(), Some(CrossWiring::NonSharedStca));
        assert_eq!(Variant::SingleB.wiring(), None);
        assert!(Variant::JointStcaAllLayers.stca_all_layers());
    }

    #[test]
    fn toml_roundtrip_and_hash_stability() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());

        let mut other = ExperimentConfig::default();
        other.seed = 7;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("[train]\nstage1_iters = 10\n[world]\nt = 4\n").unwrap();
        assert_eq!(cfg.train.stage1_iters, 10);
        assert_eq!(cfg.world.t, 4);
        assert_eq!(cfg.model.width, ModelSettings::default().width);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.cond_frames = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.world.h = 30;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.sample.steps = 2000;
        assert!(cfg.validate().is_err());
    }
}
