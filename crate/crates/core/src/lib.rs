//! Contrastive explanations for image classifiers.
//!
//! Given a differentiable classifier, a decoder onto the data manifold and a
//! set of monotonic attribute functions, this crate computes
//!
//! * **pertinent negatives** ([`pn`]): a nearby decoded image of a different
//!   class reached only by *adding* interpretable concepts, and
//! * **pertinent positives** ([`pp`]): a small set of superpixels that on
//!   their own keep the original prediction,
//!
//! and scores explanations with the metrics in [`metrics`].

pub mod bundle;
pub mod error;
pub mod fixture;
pub mod graph;
pub mod image;
pub mod kv;
pub mod metrics;
pub mod network;
pub mod pn;
pub mod pp;
pub mod segmentation;
pub mod tensor;
pub mod toy;
pub mod weights;

pub use bundle::{argmax, Attribute, ModelBundle};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Op};
pub use image::Image;
pub use network::{Activation, DenseNet};
pub use pn::{solve_pn, PnHyperParams, PnOutcome, PnResult};
pub use pp::{solve_pp, PpHyperParams, PpOutcome, PpResult};
pub use segmentation::{apply_mask, grid_segment, MaskVector, SuperpixelPartition};
pub use tensor::Tensor;
