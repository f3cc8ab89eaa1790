//! Nuclei probability maps and seed points for the watershed stage.
//!
//! The probability map either comes from an external detector (a TIFF stack) or
//! from a multiscale Laplacian-of-Gaussian blob response computed here.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub coords: [usize; 3],
    pub score: f32,
}

/// Seeds sorted by descending score (ties by raster index).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    seeds: Vec<Seed>,
}

impl SeedSet {
    /// Sorts the given seeds into canonical order.
    pub fn new(mut seeds: Vec<Seed>, dims: Dims) -> Result<Self> {
        for s in &seeds {
            let [x, y, z] = s.coords;
            if x >= dims.nx || y >= dims.ny || z >= dims.nz {
                return Err(Error::InvalidParameter(format!(
                    "seed {:?} outside volume {dims:?}",
                    s.coords
                )));
            }
            if !(0.0..=1.0).contains(&s.score) {
                return Err(Error::ProbabilityRange(s.score));
            }
        }
        seeds.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                let ia = dims.index(a.coords[0], a.coords[1], a.coords[2]);
                let ib = dims.index(b.coords[0], b.coords[1], b.coords[2]);
                ia.cmp(&ib)
            })
        });
        Ok(Self { seeds })
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// Reads an externally computed probability stack, rescaled by bit depth to [0, 1].
pub fn load_probability_map(path: &Path, spacing: Spacing) -> Result<Volume> {
    ctc::read_volume(path, spacing)
}

/// Separable Gaussian smoothing with per-axis sigma in physical units.
///
/// Borders replicate the edge voxel. A sigma below 1e-6 skips that axis.
pub fn gaussian_smooth(vol: &Volume, sigma: [f64; 3]) -> Volume {
    let dims = vol.dims();
    let spacing = vol.spacing().as_array();
    let mut data = vol.data().to_vec();
    for axis in 0..3 {
        let s = sigma[axis] / spacing[axis];
        if s < 1e-6 {
            continue;
        }
        data = convolve_axis(&data, dims, axis, &gaussian_kernel(s));
    }
    vol.with_data(data).expect("same geometry")
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

fn convolve_axis(data: &[f32], dims: Dims, axis: usize, kernel: &[f32]) -> Vec<f32> {
    let n = dims.as_array()[axis];
    let stride = match axis {
        0 => 1,
        1 => dims.nx,
        _ => dims.nx * dims.ny,
    };
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0f32; data.len()];
    let lines: Vec<usize> = (0..dims.len())
        .filter(|&i| dims.coords(i)[axis] == 0)
        .collect();
    let results: Vec<(usize, Vec<f32>)> = lines
        .par_iter()
        .map(|&start| {
            let line: Vec<f32> = (0..n).map(|k| data[start + k * stride]).collect();
            let conv = (0..n as i64)
                .map(|i| {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(t, &w)| {
                            let j = (i + t as i64 - radius).clamp(0, n as i64 - 1) as usize;
                            w * line[j]
                        })
                        .sum()
                })
                .collect();
            (start, conv)
        })
        .collect();
    for (start, conv) in results {
        for (k, v) in conv.into_iter().enumerate() {
            out[start + k * stride] = v;
        }
    }
    out
}

/// Scale-normalized negative Laplacian of the Gaussian-smoothed volume at one
/// physical sigma, clamped at zero (bright blobs respond positively).
fn log_response(intensity: &Volume, sigma: f64) -> Vec<f32> {
    let smooth = gaussian_smooth(intensity, [sigma; 3]);
    let dims = intensity.dims();
    let sp = intensity.spacing().as_array();
    let f = smooth.data();
    let norm = (sigma * sigma) as f32;
    let inv2: [f32; 3] = [
        (1.0 / (sp[0] * sp[0])) as f32,
        (1.0 / (sp[1] * sp[1])) as f32,
        (1.0 / (sp[2] * sp[2])) as f32,
    ];
    (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let c = dims.coords(i);
            let mut lap = 0f32;
            for axis in 0..3 {
                let mut lo = [0i32; 3];
                lo[axis] = -1;
                let mut hi = [0i32; 3];
                hi[axis] = 1;
                let a = dims.offset(c, lo).map_or(f[i], |j| f[j]);
                let b = dims.offset(c, hi).map_or(f[i], |j| f[j]);
                lap += (a - 2.0 * f[i] + b) * inv2[axis];
            }
            (-norm * lap).max(0.0)
        })
        .collect()
}

/// Per-voxel maximum of the normalized LoG response over `scales`
/// (expected nucleus radii in microns), rescaled to [0, 1].
///
/// A volume with no blob response (e.g. constant input) maps to all zeros.
pub fn blob_probability_map(intensity: &Volume, scales: &[f64]) -> Result<Volume> {
    if scales.is_empty() || scales.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
        return Err(Error::InvalidParameter(
            "blob scales must be a nonempty list of positive radii".into(),
        ));
    }
    let best = scales
        .par_iter()
        .map(|&r| log_response(intensity, r / 3f64.sqrt()))
        .reduce(
            || vec![0f32; intensity.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = x.max(y));
                a
            },
        );
    let peak = best.iter().copied().fold(0f32, f32::max);
    if peak <= 1e-12 {
        log::warn!("blob detector found no response; probability map is all zero");
        return intensity.with_data(vec![0f32; intensity.len()]);
    }
    Volume::probability_map(
        intensity.dims(),
        intensity.spacing(),
        best.into_iter().map(|v| (v / peak).clamp(0.0, 1.0)).collect(),
    )
}

/// Local maxima (26-neighborhood) strictly above `min_score`, greedily
/// suppressed in descending score order so no two kept seeds are closer than
/// `min_separation` microns.
pub fn extract_seeds(prob: &Volume, min_score: f32, min_separation: f64) -> Result<SeedSet> {
    if !(0.0..=1.0).contains(&min_score) {
        return Err(Error::InvalidParameter(format!(
            "min_score {min_score} outside [0, 1]"
        )));
    }
    if !(min_separation >= 0.0) {
        return Err(Error::InvalidParameter(
            "min_separation must be nonnegative".into(),
        ));
    }
    let dims = prob.dims();
    let data = prob.data();
    let offsets = crate::volume::Connectivity::Full26.offsets();
    let mut candidates: Vec<Seed> = (0..dims.len())
        .into_par_iter()
        .filter_map(|i| {
            let v = data[i];
            if v <= min_score {
                return None;
            }
            let c = dims.coords(i);
            let is_max = offsets
                .iter()
                .all(|&o| dims.offset(c, o).is_none_or(|j| data[j] <= v));
            is_max.then(|| Seed {
                coords: c,
                score: v.clamp(0.0, 1.0),
            })
        })
        .collect();
    // par_iter collect preserves raster order; canonical sort is stable.
    candidates = SeedSet::new(candidates, dims)?.seeds;

    let mut kept = Vec::new();
    if min_separation == 0.0 {
        kept = candidates;
    } else {
        let cell = min_separation;
        let mut grid: HashMap<[i64; 3], Vec<[f64; 3]>> = HashMap::new();
        let r2 = min_separation * min_separation;
        for s in candidates {
            let p = prob.position(s.coords);
            let key = p.map(|v| (v / cell).floor() as i64);
            let mut clear = true;
            'search: for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let k = [key[0] + dx, key[1] + dy, key[2] + dz];
                        if let Some(pts) = grid.get(&k) {
                            for q in pts {
                                let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                                if d2 < r2 {
                                    clear = false;
                                    break 'search;
                                }
                            }
                        }
                    }
                }
            }
            if clear {
                grid.entry(key).or_default().push(p);
                kept.push(s);
            }
        }
    }
    Ok(SeedSet { seeds: kept })
}
