//! Birds-eye-view 3D object detection on Lidar point clouds: BEV encoding, a
//! forward-only CNN, oriented-box decoding, the training loss, rotated-box
//! geometry, KITTI file formats and evaluation.

pub mod bev;
pub mod class;
pub mod erpn;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod loss;
pub mod network;
pub mod synth;

pub use bev::{encode, encode_with, DensityNorm, GridSpec, Point, PointCloud, RgbMap};
pub use class::{ObjectClass, NUM_CLASSES};
pub use erpn::{default_anchors, AnchorPrior, ClassStats, Detection, ErpnHead, RawPrediction};
pub use geometry::{nms, rotated_iou, OrientedBox};
pub use network::{build_complex_yolo, LayerSpec, Network, Tensor3, Weights};
