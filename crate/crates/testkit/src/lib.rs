//! Test support shared by the workspace's integration tests: an in-process
//! mock of the diffusion service and deterministic synthetic datasets.

pub mod dataset;
pub mod mock;

pub use dataset::{synthetic_image, write_dataset, DatasetEntry};
pub use mock::{Behavior, MockServer};
