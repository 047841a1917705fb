//! Multimodal-conditioned diffusion super-resolution on procedural scenes.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff tensor library (f32 for
//!   training, f64 for gradient checking) plus Adam and a MAC counter.
//! - [`io`]: tensor/image/dataset file formats and checkpoint layout.
//! - [`data`]: procedural scene generation, rendering, modality maps,
//!   captions, and the degradation pipeline that produces LR inputs.
//! - [`vq`]: a shared vector-quantizing tokenizer for modality maps.
//! - [`mmlc`]: the multimodal latent connector that compresses the
//!   assembled token sequence into a fixed number of latent tokens.
//! - [`diffusion`]: noise schedule, denoiser, and stage-2 training.
//! - [`sampler`]: guided DDIM sampling with three guidance modes and
//!   per-modality attention temperatures.
//! - [`eval`]: image metrics, an exact discrete information oracle, and
//!   the attention complexity benchmark.
//! - [`pipeline`]: checkpoint bundles gluing the model pieces together.

mod blocks;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod mmlc;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod vq;

pub use config::RunConfig;
pub use data::{CaptionTokens, ModalityKind, ModalityMap, SamplePair, Scene};
pub use diffusion::{DenoiserParams, NoiseSchedule, TrainExample};
pub use error::{Error, Result};
pub use mmlc::{AssembledSequence, TemperatureConfig};
pub use sampler::{ConditionBundle, GuidanceConfig, ModalitySet, ModelRefs};
pub use vq::{Codebook, TokenSequence, VqParams};
pub use tensor::{GradTape, NodeId, ParamStore, Tensor};
