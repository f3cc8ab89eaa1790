//! Volumetric nuclei segmentation and lineage tracking.
//!
//! Frames are segmented by a seeded watershed on a nuclei probability map,
//! then each SLIC supervoxel is reassigned to the watershed nucleus it overlaps
//! most. Nuclei are linked across frames by features of a per-frame adjacency
//! graph whose edge weights are dilation distances.

pub mod config;
pub mod correction;
pub mod ctc;
pub mod detection;
pub mod error;
pub mod graph;
pub mod lineage;
pub mod metrics;
pub mod morphology;
pub mod pipeline;
pub mod slic;
pub mod synth;
pub mod tracking;
pub mod volume;
pub mod watershed;

pub use config::PipelineConfig;
pub use error::{Error, ErrorCategory, Result};
pub use lineage::{LineageTable, Track};
pub use volume::{Connectivity, Dims, Grid, LabelVolume, Spacing, Volume};
