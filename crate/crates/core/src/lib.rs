//! Camera and 4D radar cube 3D object detection.
//!
//! The radar cube is reduced to range-azimuth and azimuth-elevation statistic
//! maps, each sensor gets its own convolutional feature pyramid, and a set of
//! polar query points gathers features from every pyramid with deformable
//! attention before a box head predicts oriented 3D boxes. The same fused
//! queries are refined over several cycles.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below name the common instantiations.

pub mod autodiff;
pub mod backbone;
pub mod camera;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod iou;
pub mod linalg;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod radar;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Box3D32 = geometry::Box3D<f32>;
pub type Box3D64 = geometry::Box3D<f64>;
pub type RadarCube32 = radar::RadarCube<f32>;
pub type CameraFrame32 = camera::CameraFrame<f32>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Checkpoint32 = training::Checkpoint<f32>;
