//! Checkpoint directories: `manifest.json` plus one MMT1 file per tensor
//! under `tensors/` (parameter names like "mmlc/cross/q_w" map straight
//! to subdirectories).
//!
//! Loading re-registers the architecture described by the manifest with
//! throwaway initialization, then overwrites every tensor from disk, so
//! a loaded store is value-identical to the saved one. The manifest's
//! tensor list must match the re-registered parameter set exactly; a
//! mismatch means the manifest and weights disagree about the
//! architecture and loading fails rather than guessing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::CAPTION_LEN;
use crate::diffusion::{CondPath, DenoiserParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::mmt1;
use crate::mmlc::MmlcParams;
use crate::tensor::ParamStore;
use crate::vq::VqParams;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";

/// Stage-1 manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqManifest {
    pub version: u32,
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D_tok")]
    pub d_tok: usize,
    pub g: usize,
    /// Width the downstream model pads these tokens to.
    #[serde(rename = "D_model")]
    pub d_model: usize,
    pub config_hash: String,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Stage-2 manifest. Carries the full run config so sampling needs no
/// side channel, plus the conditioning architecture the weights were
/// trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionManifest {
    pub version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub cond_path: String,
    pub schedule: ScheduleSpec,
    pub tensors: Vec<String>,
}

/// FNV-1a over the canonical JSON encoding. Struct field order is fixed
/// at compile time, so the digest is stable across runs and platforms.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    let mut p = dir.join(TENSOR_DIR);
    for part in name.split('/') {
        p.push(part);
    }
    p.set_extension("mmt1");
    p
}

fn save_tensors(dir: &Path, store: &ParamStore) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let path = tensor_path(dir, &name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        mmt1::write_tensor_file(&path, store.value(id))?;
        names.push(name);
    }
    names.sort_unstable();
    Ok(names)
}

fn load_tensors(dir: &Path, store: &mut ParamStore, manifest_names: &[String]) -> Result<()> {
    let mut registered: Vec<String> =
        store.ids().map(|id| store.name(id).to_string()).collect();
    registered.sort_unstable();
    let mut listed = manifest_names.to_vec();
    listed.sort_unstable();
    if registered != listed {
        return Err(Error::format(format!(
            "manifest lists {} tensors but the architecture has {}; first difference: {:?}",
            listed.len(),
            registered.len(),
            listed
                .iter()
                .zip(registered.iter())
                .find(|(a, b)| a != b)
                .map(|(a, b)| (a.clone(), b.clone()))
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let path = tensor_path(dir, store.name(id));
        let t = mmt1::read_tensor_file(&path)?.into_f32()?;
        store.set_value(id, t)?;
    }
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::format(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

fn check_kind(found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::format(format!(
            "checkpoint kind is \"{found}\", expected \"{want}\""
        )));
    }
    Ok(())
}

fn cond_path_name(path: CondPath) -> &'static str {
    match path {
        CondPath::Latent => "latent",
        CondPath::Raw => "raw",
    }
}

fn cond_path_from(name: &str) -> Result<CondPath> {
    match name {
        "latent" => Ok(CondPath::Latent),
        "raw" => Ok(CondPath::Raw),
        other => Err(Error::format(format!("unknown cond_path \"{other}\""))),
    }
}

// ---- stage 1 ---------------------------------------------------------------------

pub fn save_vq(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    vq: &VqParams,
    config: &RunConfig,
) -> Result<VqManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let tensors = save_tensors(dir, store)?;
    let manifest = VqManifest {
        version: CHECKPOINT_VERSION,
        kind: "vq".to_string(),
        k: vq.codebook_size(),
        d_tok: vq.d_tok(),
        g: vq.grid_side(),
        d_model: config.model.d_model,
        config_hash: config_hash(config)?,
        tensors,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_vq(dir: impl AsRef<Path>) -> Result<(ParamStore, VqParams, VqManifest)> {
    let dir = dir.as_ref();
    let manifest: VqManifest = read_manifest(dir)?;
    check_kind(&manifest.kind, "vq")?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vq = VqParams::register(&mut store, manifest.k, manifest.d_tok, manifest.g, &mut rng)?;
    load_tensors(dir, &mut store, &manifest.tensors)?;
    Ok((store, vq, manifest))
}

// ---- stage 2 ---------------------------------------------------------------------

pub struct DiffusionCheckpoint {
    pub store: ParamStore,
    pub mm: MmlcParams,
    pub dn: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub cond_path: CondPath,
    pub config: RunConfig,
}

/// Register the stage-2 parameter set an unpacked `RunConfig` describes.
/// Save and load both route through this, so the two sides cannot drift.
pub fn register_stage2(
    store: &mut ParamStore,
    config: &RunConfig,
    rng: &mut impl rand::Rng,
) -> Result<(MmlcParams, DenoiserParams)> {
    let m = &config.model;
    let mm = MmlcParams::register(
        store,
        m.d_model,
        m.heads,
        m.n_latents,
        m.mmlc_self_blocks,
        config.vq.g,
        CAPTION_LEN,
        rng,
    )?;
    let dn = DenoiserParams::register(store, m.d_model, m.heads, m.denoiser_blocks, rng)?;
    Ok((mm, dn))
}

pub fn save_diffusion(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    config: &RunConfig,
    schedule: &NoiseSchedule,
    cond_path: CondPath,
) -> Result<DiffusionManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let tensors = save_tensors(dir, store)?;
    let manifest = DiffusionManifest {
        version: CHECKPOINT_VERSION,
        kind: "diffusion".to_string(),
        config: config.clone(),
        config_hash: config_hash(config)?,
        cond_path: cond_path_name(cond_path).to_string(),
        schedule: ScheduleSpec {
            t_max: schedule.t_max(),
            beta_start: schedule.beta(1)?,
            beta_end: schedule.beta(schedule.t_max())?,
        },
        tensors,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_diffusion(dir: impl AsRef<Path>) -> Result<DiffusionCheckpoint> {
    let dir = dir.as_ref();
    let manifest: DiffusionManifest = read_manifest(dir)?;
    check_kind(&manifest.kind, "diffusion")?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mm, dn) = register_stage2(&mut store, &manifest.config, &mut rng)?;
    load_tensors(dir, &mut store, &manifest.tensors)?;
    Ok(DiffusionCheckpoint {
        store,
        mm,
        dn,
        schedule: manifest.schedule.build()?,
        cond_path: cond_path_from(&manifest.cond_path)?,
        config: manifest.config,
    })
}
