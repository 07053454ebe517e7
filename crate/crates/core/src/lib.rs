//! Learned multi-attribute latent-space editing over a frozen generator.
//!
//! A direction module `T` maps a latent `z` and a per-attribute shift `δ` to
//! `z' = z + Σ δ_i d_i(z)`. `T` is trained against a frozen model bundle
//! (generator, attribute regressor, discriminator, feature extractor) so that
//! the regressor reads the requested attribute change on `G(z')` while the
//! image keeps its identity and stays realistic.
//!
//! The [`toyworld`] module provides an analytic bundle with closed-form
//! oracle directions, which is what the test suites train and evaluate on.

pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod losses;
pub mod models;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod session;
pub mod toyworld;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use evaluation::{BinSpec, EvalReport, ProbeReport};
pub use image::{FeatureMap, Features, Image};
pub use inversion::{invert, invert_then_edit, InversionConfig, InversionResult};
pub use latent::{apply_edit, sample_epsilon, AttributeVector, EditDelta, LatentEditor, LatentVector};
pub use losses::{LossBreakdown, LossWeights, RegMode};
pub use models::ModelBundle;
pub use persist::{Checkpoint, LoadedEditor, RunConfig};
pub use rng::SeededRng;
pub use session::{EditMode, EditOutcome, EditSession};
pub use toyworld::{OracleEditor, ToyConfig, ToyWorld};
pub use trainer::{train, train_single_mode, PerAttributeEditor, SamplingMode, TrainConfig, TrainRecord, Trainer};
pub use transforms::{Directions, TransformKind, TransformModule};
