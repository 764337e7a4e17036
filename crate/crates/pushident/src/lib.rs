//! Identification of per-cell mass and friction maps of a pushed planar
//! object, and robust push planning on top of the identified model ensemble.
//!
//! The crate is organized around a grid decomposition of a rigid object
//! ([`object::GridObject`]): every cell carries its own mass and Coulomb
//! friction coefficient ([`object::ParamMap`]). A regularized quasi-static
//! velocity model ([`dynamics`]) predicts the object's motion under fingertip
//! pushes and is differentiable with respect to every per-cell parameter
//! ([`identify::loss_gradient`]). Because mass and friction cannot be
//! disentangled from quasi-static data alone, [`identify::infer_models`]
//! returns a whole ensemble of locally optimal maps with softmax
//! probabilities, which [`plan`] consumes to pick stable table-edge goals and
//! push sequences that are robust to the remaining uncertainty.
//!
//! No module here touches the filesystem; serialization types live in
//! [`scene`] and all file IO is done by the CLI crate.

pub mod dynamics;
pub mod error;
pub mod explore;
pub mod identify;
pub mod object;
pub mod plan;
pub mod scene;

mod sensitivity;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
