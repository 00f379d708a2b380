//! Data-movement analysis and layout optimization for training dataflow graphs.
//!
//! The passes follow one recipe: build a dataflow graph, count flop and
//! moved words per operator, fuse operators whose iteration spaces agree,
//! enumerate data layouts for what remains, and pick one configuration per
//! operator with a shortest-path search. A scalar fp64 executor checks that
//! fusion and backward operators compute what they claim.

pub mod analysis;
pub mod costsel;
pub mod fusion;
pub mod graphir;
pub mod layout;
pub mod refexec;
