//! Moving-mesh generation by gradient flow of a metric-based mesh functional.

pub mod experiment;
pub mod flow;
pub mod functional;
pub mod gradient;
pub mod interp;
pub mod linalg;
pub mod mesh;
pub mod metric;
pub mod quality;
pub mod solver;
pub mod vtk;

pub use mesh::{BoundaryTag, BoxDomain, CoordView, Mesh2, MeshError, SimplicialMesh};
pub use metric::{MetricError, MetricField};
