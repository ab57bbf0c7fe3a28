//! Detection and image-quality metrics.

pub mod ap;
pub mod mtf;
pub mod od50;

pub use ap::{ap_by_distance, coco_ap, iou, APCurve, ApPoint, GroundTruthSet, COCO_THRESHOLDS};
pub use mtf::{measure_mtf50, measure_mtf50_with, Mtf50Result, MtfMode, MtfOptions};
pub use od50::{bootstrap_od50, od50, BootstrapResult, OD50Result, Od50Method};
