//! Data movement for model-parallel deep learning, expressed as linear
//! operators with hand-written adjoints.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major storage and deterministic inner products.
//! - [`memory_ops`]: allocate, clear, add, copy and move as forward/adjoint
//!   pairs, plus the adjoint-test harness that certifies any [`LinearOp`].
//! - [`partition`]: cartesian worker grids and balanced decompositions.
//! - [`comm`]: an in-process SPMD runtime and the parallel primitives
//!   (send-receive, scatter, gather, broadcast, sum-reduce, all-reduce,
//!   repartition).
//! - [`halo`]: unbalanced halo geometry and the nested halo exchange.
//! - [`layers`]: local kernels, distributed pooling/convolution/affine layers
//!   and a reverse-mode tape.
//! - [`network`]: sequential and distributed Lenet-5, equivalence checks and
//!   the training loop.
//! - [`catalog`]: named operators for the adjoint-test suite.

pub mod catalog;
pub mod comm;
mod error;
pub mod halo;
pub mod layers;
pub mod memory_ops;
pub mod network;
pub mod partition;
mod scalar;
pub mod tensor;

pub use comm::{spawn, spawn_with, Comm, GroupConfig};
pub use error::{Error, Result};
pub use halo::{HaloExchange, HaloSpec, KernelDim, KernelSpec};
pub use memory_ops::{adjoint_test, AdjointReport, LinearOp};
pub use partition::{broadcast_map, decompose, overlap, BroadcastMap, Grid, Partition, PartitionMap};
pub use scalar::Real;
pub use tensor::{inner_product, IndexRange, Tensor};
