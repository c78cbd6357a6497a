//! Touch-conditioned visual localization.
//!
//! A tactile frame and a visual frame are embedded into a shared space by two
//! small encoders. The tactile feature map is averaged into a single
//! descriptor, the descriptor is scored against every spatial location of the
//! visual feature map, and the maximum over locations is the pair score. A
//! symmetric contrastive loss over a batch of pair scores trains the encoders;
//! at inference the per-location score map, upsampled to image resolution,
//! is the tactile saliency map used for localization and segmentation.
//!
//! Module map:
//! - [`numeric`]: tensors, a reverse-mode graph, AdamW, finite-difference checks
//! - [`encoders`]: patch embedding, feature maps, the `.vtft` feature-file format
//! - [`alignment`]: descriptor aggregation, similarity maps/scores, contrastive loss
//! - [`corpus`]: sample manifests, touch-instance extraction, splits, dedup, prompts, masks
//! - [`pairing`]: pair sampling strategies, curriculum schedule, tactile prototypes
//! - [`evaluation`]: saliency maps, AP/IoU metrics, baselines, robustness reports
//! - [`driver`]: run configuration, synthetic corpus generation, training, checkpoints
//!
//! The math core is generic over [`numeric::Scalar`]; the pipeline runs in
//! f64 (the aliases below), with f32 appearing only inside feature files.

pub mod alignment;
pub mod corpus;
pub mod driver;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numeric;
pub mod pairing;
pub mod raster;
pub mod rng;

/// Scalar type used by the pipeline.
pub type Real = f64;
/// Dense tensor over [`Real`].
pub type Tensor = numeric::Tensor<Real>;
/// Reverse-mode graph over [`Real`].
pub type Graph = numeric::Graph<Real>;
/// Named parameter set over [`Real`].
pub type ParamSet = numeric::ParamSet<Real>;
/// Spatial feature map over [`Real`].
pub type FeatureMap = encoders::FeatureMap<Real>;
/// Pooled tactile descriptor over [`Real`].
pub type TactileDescriptor = alignment::TactileDescriptor<Real>;

pub use error::{Error, Result};
