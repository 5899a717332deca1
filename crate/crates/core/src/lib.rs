//! Weight-space symmetry groups and quasi-equivariant metanetworks.

pub mod equivlayers;
pub mod error;
pub mod metanet;
pub mod netmodels;
pub mod numcore;
pub mod propverify;
pub mod quasilayers;
pub mod statfeat;
pub mod symmetry;
pub mod zoogen;

pub use error::{Error, Result};
pub use netmodels::{Arch, NetParams};
pub use numcore::Tensor;
