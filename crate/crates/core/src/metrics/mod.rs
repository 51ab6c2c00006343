//! Training objective and evaluation metrics for depth and normal maps.

mod depth;
mod loss;
mod mask;
mod normal;
mod report;

pub use depth::{depth_metrics, DepthEvalReport, DELTA_EXPONENTS};
pub use loss::{cosine_loss_node, si_log_loss, si_log_node, SI_ALPHA, SI_LAMBDA};
pub use mask::{Crop, EvalMask, CAP_DRIVING, CAP_INDOOR, CAP_KITTI};
pub use normal::{angular_errors, normal_metrics, NormalEvalReport, INLIER_DEGREES, UNIT_TOLERANCE};
pub use report::{depth_record, fmt_sig, normal_record, parse_depth_record};
