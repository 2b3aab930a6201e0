//! Road-graph generation toolkit.
//!
//! A road network is a spatial graph over image coordinates. This crate
//! covers the full loop: synthesizing aerial-style scenes, extracting
//! keypoints from road masks, scoring predicted graphs against ground
//! truth with topology-aware metrics, and generating graphs sequentially
//! with a learned model driven by tree search.

pub mod env;
pub mod error;
pub mod geom;
pub mod graph;
pub mod mcts;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod skeleton;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use geom::Point;
pub use graph::{RoadSegment, SpatialGraph};
pub use raster::{GrayImage, Mask};
