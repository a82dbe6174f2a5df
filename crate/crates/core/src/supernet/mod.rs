//! Detection supernet: search-space presets, architecture parameters, the
//! weight-sharing network, derived networks and search-space counting.

pub mod arch;
pub mod count;
pub mod derived;
pub mod genotype;
pub mod net;
pub mod spec;

pub use arch::{ArchParams, Choices};
pub use count::{count_search_space, SearchSpaceSize};
pub use derived::DerivedNet;
pub use genotype::Genotype;
pub use net::{fuse_node, ForwardMode, ForwardOutput, FuseEdge, GradTargets, Mixing, SuperNet};
pub use spec::{Level, SearchSpaceSpec};

use crate::error::Result;
use crate::tensor::Real;

/// The argmax architecture of `arch` as a genotype.
pub fn derive<T: Real>(arch: &ArchParams<T>, spec: &SearchSpaceSpec) -> Result<Genotype> {
    Genotype::from_choices(&Choices::argmax(arch), spec)
}
