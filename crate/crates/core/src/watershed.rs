//! Seeded priority-flood watershed on a nuclei probability map.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::detection::SeedSet;
use crate::error::{Error, Result};
use crate::volume::{Connectivity, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedConfig {
    pub connectivity: Connectivity,
    /// Number of flooding levels the probability range is bucketed into.
    pub level_quantization: u32,
    /// Voxels with probability below this are background.
    pub mask_threshold: f32,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Face6,
            level_quantization: 256,
            mask_threshold: 0.5,
        }
    }
}

impl WatershedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_quantization < 2 {
            return Err(Error::Config(
                "watershed.level_quantization must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config(
                "watershed.mask_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn level(&self, p: f32) -> u32 {
        let l = (self.level_quantization - 1) as f32;
        (p.clamp(0.0, 1.0) * l).round() as u32
    }
}

/// Floods the foreground (`prob >= mask_threshold`) from the seeds, highest
/// probability first. Seed `k` of the kept seeds gets label `k + 1`.
///
/// Seeds in the background, or on a voxel already claimed by an earlier seed,
/// are dropped with a warning. Foreground components that contain no kept
/// seed stay background.
pub fn watershed(prob: &Volume, seeds: &SeedSet, cfg: &WatershedConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    let dims = prob.dims();
    let p = prob.data();
    for s in seeds.seeds() {
        let [x, y, z] = s.coords;
        if x >= dims.nx || y >= dims.ny || z >= dims.nz {
            return Err(Error::InvalidParameter(format!(
                "seed {:?} outside volume {dims:?}",
                s.coords
            )));
        }
    }
    let fg: Vec<bool> = p.iter().map(|&v| v >= cfg.mask_threshold).collect();
    let mut labels = vec![0u32; dims.len()];

    // max-heap on (level, earliest insertion)
    let mut heap: BinaryHeap<(u32, Reverse<u64>, usize)> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut next_label = 0u32;
    for s in seeds.seeds() {
        let i = dims.index(s.coords[0], s.coords[1], s.coords[2]);
        if !fg[i] {
            log::warn!(
                "dropping seed {:?}: probability {} below mask threshold {}",
                s.coords,
                p[i],
                cfg.mask_threshold
            );
            continue;
        }
        if labels[i] != 0 {
            log::warn!("dropping duplicate seed {:?}", s.coords);
            continue;
        }
        next_label += 1;
        labels[i] = next_label;
        heap.push((cfg.level(p[i]), Reverse(seq), i));
        seq += 1;
    }
    if next_label == 0 {
        return Err(Error::NoNuclei(seeds.len()));
    }

    let offsets = cfg.connectivity.offsets();
    while let Some((_, _, i)) = heap.pop() {
        let label = labels[i];
        let c = dims.coords(i);
        for &off in &offsets {
            if let Some(n) = dims.offset(c, off) {
                if fg[n] && labels[n] == 0 {
                    labels[n] = label;
                    heap.push((cfg.level(p[n]), Reverse(seq), n));
                    seq += 1;
                }
            }
        }
    }
    prob.with_data(labels)
}
