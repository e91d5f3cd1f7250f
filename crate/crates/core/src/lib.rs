#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod category;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod posefit;
pub mod sampling;
pub mod synth;
pub mod tps;
pub mod train;

pub use category::{BinCodec, CategoryTemplate, LabelSpace};
pub use error::{Error, Result};
pub use geom::{AnisoSimilarity, KeypointSet, Mat3, OrientedBox, Point3, PointCloud, RigidTransform, Vec3};
pub use metrics::{EvalRecord, MetricsReport};
pub use model::{Model, ModelConfig};
pub use posefit::{CorrespondenceSet, FitResult};
pub use tps::TpsWarp;
