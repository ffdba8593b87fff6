//! Accuracy, Grad-CAM attribution and box localization.

mod cam;
mod localize;
mod metrics;

pub use cam::{grad_cam, localize_set, quadrant_mass, CamMap, CamModel, Localization};
pub use localize::{cam_to_box, gt_known_loc, iou, BBox, DEFAULT_CAM_THRESHOLD};
pub use metrics::{argmax, top1_accuracy};
