//! File formats: tensors (MMT1), images (PPM/PGM), and checkpoints.

pub mod checkpoint;
pub mod image;
pub mod mmt1;
