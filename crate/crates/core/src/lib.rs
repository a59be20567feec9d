//! Streaming object-detection learners that fight forgetting by replaying
//! product-quantized feature maps, plus the evaluation protocol used to
//! compare them against an offline reference.

pub mod buffer;
pub mod datagen;
pub mod driver;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod io;
pub mod kmeans;
pub mod pq;
pub mod slda;
pub mod targets;
pub mod types;

pub use error::{Error, Result};
pub use geometry::{clip_box, iou, BoundingBox};
pub use types::{ClassId, ClassSchedule, Detection, FeatureMap, ImageAnnotation, ImageId, LabeledBox};
