pub mod elliptic;
pub mod error;
pub mod fiber;
pub mod geometry;
pub mod homogenize;
pub mod linalg;
pub mod nets;
pub mod oscillate;
pub mod partition;
pub mod study;

pub use error::{HomogError, Result};
pub use geometry::{ManifoldModel, MetricKind, ModelConfig, Point, TangentVector};
pub use linalg::{Mat, Vector};
