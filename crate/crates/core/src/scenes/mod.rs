//! Synthetic shape scenes, edge conditions, control masks and raster I/O.

pub mod dataset;
mod edges;
pub mod io;
mod raster;
mod spec;

pub use dataset::{example, scene_seed, DatasetManifest, Example};
pub use edges::{
    edge_condition, edge_condition_from_image, mask_from_instance, morphological_gradient,
    ConditionImage,
};
pub use raster::{BinaryMask, GrayImage};
pub use spec::{
    generate_scene, RenderedScene, SceneDistribution, SceneSpec, ShapeInstance, ShapeKind,
};
