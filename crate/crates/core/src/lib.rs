//! Cycle-accurate simulator and compilation toolchain for the Nexus
//! Machine: a mesh of processing elements executing sparse-tensor kernels
//! by routing instruction-carrying active messages, opportunistically
//! executing them on idle ALUs en route.
//!
//! The crate splits along the toolchain:
//!
//! - [`am`]: the 70-bit active-message and 10-bit config-entry codecs.
//! - [`tensor`]: CSR tensors, partitioners, placement, metadata scanner.
//! - [`compiler`]: kernel lowering and static-AM generation.
//! - [`fabric`]: one PE's units and state.
//! - [`noc`]: the west-first mesh router.
//! - [`engine`]: the cycle loop, modes, tiling and metrics.
//! - [`workloads`]: kernel builders plus independent oracles.

pub mod am;
pub mod compiler;
pub mod engine;
pub mod fabric;
pub mod noc;
pub mod tensor;
pub mod workloads;
