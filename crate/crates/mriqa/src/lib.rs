//! Mask-reference image quality assessment.
//!
//! The pipeline scores a distorted image against its pristine reference by
//! splicing a small set of reference patches into the distorted image and
//! scoring only the reconstructed result: grid crop/sample preprocessing
//! ([`agcs`]), difference-driven patch masking ([`maskgen`]), a hierarchical
//! windowed-attention backbone with feature masking ([`backbone`], [`head`]),
//! and training plus rank-correlation evaluation ([`trainer`]).

pub mod agcs;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod head;
pub mod imaging;
pub mod maskgen;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
