//! Tracking of dividing objects by learned pairwise association.
//!
//! Detections inside short temporal windows are scored by a small
//! encoder–decoder transformer whose output is normalized per candidate
//! parent block. Window scores are averaged over a video, pruned into a
//! lineage forest by a greedy, two-step LAP or exact ILP linker, and
//! evaluated with the AOGM/TRA family of metrics.

pub mod aggregator;
pub mod assignment;
pub mod error;
pub mod gt_target;
pub mod lineage;
pub mod linkers;
pub mod mask;
pub mod metrics;
pub mod scalar;
pub mod sim;
pub mod tokenizer;
pub mod transformer;

pub use error::{Result, TrackError};
pub use lineage::{AssociationMatrix, Detection, Features, Frame, LineageGraph, NodeId, Window};
pub use scalar::Scalar;

pub type Model32 = transformer::Model<f32>;
pub type Model64 = transformer::Model<f64>;
pub type AssociationMatrix32 = AssociationMatrix<f32>;
pub type AssociationMatrix64 = AssociationMatrix<f64>;
