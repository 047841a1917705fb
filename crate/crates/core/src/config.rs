//! Run configuration: one JSON document drives every subcommand.
//!
//! Unknown keys are rejected everywhere (a silent typo in "epochs" is a
//! reproducibility hazard, not a feature request). Every field has a
//! default, so `{}` is a valid config. The SHA-256 of the canonical JSON
//! serialization travels inside checkpoints so a sample can always be
//! traced back to the exact configuration that produced it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CAPTION_LEN;
use crate::error::{Error, Result};
use crate::mmlc::TemperatureConfig;

/// Guidance variants: `cfg` (text axis only, modality tokens pinned to
/// the empty set on both branches), `mnull-cfg` (negative branch drops
/// the modalities), `m-cfg` (both branches keep them).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    #[serde(rename = "cfg")]
    Cfg,
    #[serde(rename = "mnull-cfg", alias = "m∅-cfg")]
    MnullCfg,
    #[serde(rename = "m-cfg")]
    MCfg,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 3] = [GuidanceMode::Cfg, GuidanceMode::MnullCfg, GuidanceMode::MCfg];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::MnullCfg => "mnull-cfg",
            GuidanceMode::MCfg => "m-cfg",
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg" => Ok(GuidanceMode::Cfg),
            "mnull-cfg" | "m∅-cfg" => Ok(GuidanceMode::MnullCfg),
            "m-cfg" => Ok(GuidanceMode::MCfg),
            other => Err(Error::contract(format!(
                "unknown guidance mode {other:?} (expected cfg, mnull-cfg, or m-cfg)"
            ))),
        }
    }
}

fn d_n() -> usize {
    4096
}
fn d_seed() -> u64 {
    0
}
fn d_hr_res() -> usize {
    32
}
fn d_scale() -> usize {
    4
}

/// Dataset section: the dataset is a pure function of these four values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub hr_res: usize,
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: d_n(), seed: d_seed(), hr_res: d_hr_res(), scale: d_scale() }
    }
}

fn d_k() -> usize {
    64
}
fn d_d_tok() -> usize {
    16
}
fn d_g() -> usize {
    8
}
fn d_vq_epochs() -> usize {
    12
}
fn d_vq_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub d_tok: usize,
    pub g: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { k: d_k(), d_tok: d_d_tok(), g: d_g(), epochs: d_vq_epochs(), lr: d_vq_lr() }
    }
}

fn d_d_model() -> usize {
    64
}
fn d_n_latents() -> usize {
    32
}
fn d_self_blocks() -> usize {
    2
}
fn d_denoiser_blocks() -> usize {
    4
}
fn d_heads() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_latents: usize,
    pub mmlc_self_blocks: usize,
    pub denoiser_blocks: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: d_d_model(),
            n_latents: d_n_latents(),
            mmlc_self_blocks: d_self_blocks(),
            denoiser_blocks: d_denoiser_blocks(),
            heads: d_heads(),
        }
    }
}

fn d_steps() -> usize {
    50_000
}
fn d_batch() -> usize {
    32
}
fn d_train_lr() -> f64 {
    1e-4
}
fn d_drop_p() -> f64 {
    0.1
}
fn d_joint_drop_p() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_p: f64,
    pub joint_drop_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: d_steps(),
            batch: d_batch(),
            lr: d_train_lr(),
            drop_p: d_drop_p(),
            joint_drop_p: d_joint_drop_p(),
            seed: 0,
        }
    }
}

fn d_mode() -> GuidanceMode {
    GuidanceMode::MCfg
}
fn d_w() -> f64 {
    4.0
}
fn d_sample_steps() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub mode: GuidanceMode,
    pub w: f64,
    pub steps: usize,
    pub temps: TemperatureConfig,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            mode: d_mode(),
            w: d_w(),
            steps: d_sample_steps(),
            temps: TemperatureConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vq: VqConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::from_json_str(&text)
    }

    /// Caption token count fed to the model (fixed by the data format).
    pub fn l_text(&self) -> usize {
        CAPTION_LEN
    }

    /// Assembled multimodal sequence length M = 3g² + L_text.
    pub fn seq_len(&self) -> usize {
        3 * self.vq.g * self.vq.g + self.l_text()
    }

    pub fn lr_res(&self) -> usize {
        self.data.hr_res / self.data.scale
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::contract(msg)) };
        c(self.data.n >= 1, "data.n must be >= 1")?;
        c(self.data.scale == 4, "data.scale: only 4x degradation is implemented")?;
        c(
            self.data.hr_res >= 8 && self.data.hr_res % 4 == 0,
            "data.hr_res must be >= 8 and divisible by 4",
        )?;
        c(self.vq.k >= 2, "vq.K must be >= 2")?;
        c(self.vq.d_tok >= 1, "vq.d_tok must be >= 1")?;
        c(self.vq.d_tok <= self.model.d_model, "vq.d_tok must not exceed model.d_model")?;
        if self.vq.g != self.data.hr_res / 4 {
            return Err(Error::contract(format!(
                "vq.g = {} must equal hr_res/4 = {} (4x4 patch grid over the HR map)",
                self.vq.g,
                self.data.hr_res / 4
            )));
        }
        c(self.vq.epochs >= 1, "vq.epochs must be >= 1")?;
        c(self.vq.lr > 0.0, "vq.lr must be > 0")?;
        c(self.model.heads >= 1, "model.heads must be >= 1")?;
        c(
            self.model.d_model % self.model.heads == 0,
            "model.heads must divide model.d_model",
        )?;
        c(self.model.mmlc_self_blocks >= 1, "model.mmlc_self_blocks must be >= 1")?;
        c(self.model.denoiser_blocks >= 1, "model.denoiser_blocks must be >= 1")?;
        if self.model.n_latents == 0 || self.model.n_latents >= self.seq_len() {
            return Err(Error::contract(format!(
                "model.n_latents = {} must satisfy 0 < N < M (M = {})",
                self.model.n_latents,
                self.seq_len()
            )));
        }
        c(self.train.steps >= 1, "train.steps must be >= 1")?;
        c(self.train.batch >= 1, "train.batch must be >= 1")?;
        c(self.train.lr > 0.0, "train.lr must be > 0")?;
        c((0.0..=1.0).contains(&self.train.drop_p), "train.drop_p must be in [0, 1]")?;
        c(
            (0.0..=1.0).contains(&self.train.joint_drop_p),
            "train.joint_drop_p must be in [0, 1]",
        )?;
        c(self.sample.w >= 0.0, "sample.w must be >= 0")?;
        c(self.sample.steps >= 1, "sample.steps must be >= 1")?;
        self.sample.temps.validate()?;
        Ok(())
    }

    /// Canonical JSON: fixed field order, no whitespace variance.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("RunConfig serializes infallibly")
    }

    /// SHA-256 hex digest of the canonical JSON.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_json().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_cited_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg.data.n, 4096);
        assert_eq!(cfg.data.hr_res, 32);
        assert_eq!(cfg.vq.k, 64);
        assert_eq!(cfg.vq.d_tok, 16);
        assert_eq!(cfg.vq.g, 8);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.n_latents, 32);
        assert_eq!(cfg.train.steps, 50_000);
        assert_eq!(cfg.train.batch, 32);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.drop_p, 0.1);
        assert_eq!(cfg.train.joint_drop_p, 0.05);
        assert_eq!(cfg.sample.mode, GuidanceMode::MCfg);
        assert_eq!(cfg.sample.w, 4.0);
        assert_eq!(cfg.sample.steps, 50);
        assert_eq!(cfg.sample.temps, TemperatureConfig::default());
        assert_eq!(cfg.seq_len(), 208);
        assert_eq!(cfg.lr_res(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for bad in [
            r#"{"typo": 1}"#,
            r#"{"data": {"N": 4}}"#,
            r#"{"vq": {"k": 4}}"#,
            r#"{"sample": {"temps": {"depht": 1.0}}}"#,
        ] {
            let err = RunConfig::from_json_str(bad).unwrap_err();
            assert!(matches!(err, Error::Json(_)), "{bad} -> {err:?}");
        }
    }

    #[test]
    fn codebook_size_key_is_uppercase_k() {
        let cfg = RunConfig::from_json_str(r#"{"vq": {"K": 128}}"#).unwrap();
        assert_eq!(cfg.vq.k, 128);
        assert!(cfg.to_canonical_json().contains("\"K\":128"));
    }

    #[test]
    fn guidance_mode_names_round_trip() {
        for (s, m) in [
            ("cfg", GuidanceMode::Cfg),
            ("mnull-cfg", GuidanceMode::MnullCfg),
            ("m∅-cfg", GuidanceMode::MnullCfg),
            ("m-cfg", GuidanceMode::MCfg),
        ] {
            assert_eq!(s.parse::<GuidanceMode>().unwrap(), m);
        }
        let cfg = RunConfig::from_json_str(r#"{"sample": {"mode": "mnull-cfg"}}"#).unwrap();
        assert_eq!(cfg.sample.mode, GuidanceMode::MnullCfg);
        assert!("xcfg".parse::<GuidanceMode>().is_err());
    }

    #[test]
    fn structural_constraints_are_enforced() {
        for bad in [
            r#"{"data": {"scale": 2}}"#,
            r#"{"vq": {"g": 7}}"#,
            r#"{"model": {"heads": 3}}"#,
            r#"{"model": {"n_latents": 208}}"#,
            r#"{"vq": {"d_tok": 65}}"#,
            r#"{"sample": {"temps": {"edge": 0.1}}}"#,
            r#"{"sample": {"w": -1.0}}"#,
            r#"{"train": {"lr": 0.0}}"#,
        ] {
            let err = RunConfig::from_json_str(bad).unwrap_err();
            assert!(
                matches!(err, Error::Contract(_) | Error::Domain(_)),
                "{bad} -> {err:?}"
            );
        }
    }

    #[test]
    fn hash_is_stable_across_round_trips_and_sensitive_to_values() {
        let a = RunConfig::from_json_str("{}").unwrap();
        let b = RunConfig::from_json_str(&a.to_canonical_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_json_str(r#"{"train": {"seed": 1}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
