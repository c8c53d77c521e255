//! Fork-join multi-expert restorer for blended image distortions, with an
//! expandable branch for new degradation factors and generative replay to
//! keep old-task competence when the old training data is gone.

pub mod autograd;
pub mod blocks;
pub mod distortion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod patch;

pub use error::{RestoreError, Result};
pub use patch::ImagePatch;
