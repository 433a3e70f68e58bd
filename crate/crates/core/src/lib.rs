pub mod evaluation;
pub mod geometry;
pub mod hypothesis;
pub mod io;
pub mod pipeline;
pub mod refinement;
pub mod rng;
pub mod segmentation;
pub mod scalar;
pub mod scene;

use nalgebra::Vector2;

pub use scalar::Real;

pub type Point2 = Vector2<f64>;
pub type Homography = geometry::HomographyMatrix<f64>;
pub type Homography32 = geometry::HomographyMatrix<f32>;
pub type Attributes = geometry::HomographyAttributes<f64>;
pub type Attributes32 = geometry::HomographyAttributes<f32>;
pub type Quad = geometry::CornerQuad<f64>;
pub type Intrinsics = geometry::CameraIntrinsics<f64>;
pub type Pose = geometry::CameraPose<f64>;
pub type Plane = geometry::Plane3D<f64>;
