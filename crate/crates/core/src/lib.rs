//! From-scratch conditional implicit occupancy reconstruction of teeth.
//!
//! The crate is organized as a pipeline: [`synth`] generates a procedural
//! corpus of tooth shapes (voxel grids, occupancy point samples, rendered
//! patches); [`numerics`] provides the reverse-mode autodiff tensor core and
//! Adam; [`conditioning`] turns a (class, patch) pair into a condition
//! vector; [`occupancy`] defines and trains the conditional occupancy
//! network; [`meshing`] extracts triangle meshes from probability fields;
//! [`metrics`] scores reconstructions against ground truth; [`assembly`]
//! places per-tooth meshes along a dental arch curve; [`checkpoint`]
//! persists trained parameters.

pub mod assembly;
pub mod checkpoint;
pub mod conditioning;
pub mod meshing;
pub mod metrics;
pub mod numerics;
pub mod occupancy;
pub(crate) mod par;
pub mod synth;
