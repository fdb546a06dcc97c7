//! Egocentric, instance-aware semantic occupancy mapping for dynamic scenes.
//!
//! The map represents the environment with weighted particles carrying an
//! instance ID, stored in an egocentric ring-buffer voxel grid. A sequential
//! Monte Carlo filter over the particle intensity jointly estimates per-voxel
//! occupancy, semantic label and instance ID while tolerating depth noise and
//! segmentation/tracking errors. A template memory conjectures the occluded
//! portion of previously observed object categories.
//!
//! The companion simulator renders depth + instance-ID frames from analytic
//! scenes so that every filter behavior is testable without sensors or neural
//! preprocessing, and the evaluation module scores maps against ground truth.

pub mod config;
pub mod evaluation;
pub mod filter;
pub mod frame;
pub mod geometry;
pub mod grid;
pub mod memory;
pub mod pipeline;
pub mod replay;
pub mod rng;
pub mod sim;
pub mod visibility;
