//! Neural view-distribution fields over labelled 3D urban scenes.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geom;
pub mod net;
pub mod percept;
pub mod query;
pub mod raster;
pub mod scene;
pub mod train;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{Error, Result};
pub use field::{Normalizer, Parametrization, ThematicDistribution, Viewpoint};
pub use geom::{Aabb, Vec3};
