//! SLIC supervoxels: localized k-means over (intensity, physical position).
//!
//! The distance between a voxel and a center is
//! `D = sqrt(dI^2 + (dS / S)^2 * m^2)` with `dI` the difference of normalized
//! intensities, `dS` the physical (anisotropy-aware) distance, `S` the expected
//! supervoxel pitch and `m` the compactness.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Connectivity, Dims, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicConfig {
    /// Target number of supervoxels.
    pub k: usize,
    /// Weight of the spatial term relative to intensity.
    pub compactness: f64,
    pub max_iters: usize,
    pub enforce_connectivity: bool,
    /// Stop once no center moves more than this fraction of the pitch.
    pub tolerance: f64,
    /// Fragments smaller than this fraction of the mean supervoxel size are
    /// merged into a neighbor during connectivity enforcement.
    pub min_fragment_fraction: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 2000,
            compactness: 0.2,
            max_iters: 10,
            enforce_connectivity: true,
            tolerance: 0.01,
            min_fragment_fraction: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("slic.k must be >= 1".into()));
        }
        if !(self.compactness >= 0.0) {
            return Err(Error::Config("slic.compactness must be >= 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("slic.max_iters must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) || !(self.min_fragment_fraction >= 0.0) {
            return Err(Error::Config(
                "slic.tolerance and slic.min_fragment_fraction must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervoxelCenter {
    /// Physical coordinates in microns.
    pub position: [f64; 3],
    pub mean_intensity: f64,
}

/// Grid counts per axis, at most `k` cells in total.
fn grid_counts(dims: Dims, extent: [f64; 3], k: usize) -> ([usize; 3], f64) {
    let pitch = (extent[0] * extent[1] * extent[2] / k as f64).cbrt();
    let n = dims.as_array();
    let mut counts = [0usize; 3];
    for a in 0..3 {
        counts[a] = ((extent[a] / pitch).round() as usize).clamp(1, n[a]);
    }
    while counts.iter().product::<usize>() > k {
        // coarsen the axis with the finest current pitch
        let a = (0..3)
            .filter(|&a| counts[a] > 1)
            .min_by(|&a, &b| {
                (extent[a] / counts[a] as f64).total_cmp(&(extent[b] / counts[b] as f64))
            })
            .expect("product > k >= 1 implies some count > 1");
        counts[a] -= 1;
    }
    (counts, pitch)
}

fn normalized(intensity: &Volume) -> Vec<f64> {
    let (lo, hi) = intensity.min_max();
    let range = (hi - lo) as f64;
    intensity
        .data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (v - lo) as f64 / range
            } else {
                0.0
            }
        })
        .collect()
}

/// Initial centers on a regular physical grid, each nudged to the lowest
/// gradient voxel of its 3x3x3 neighborhood.
fn initial_centers(dims: Dims, spacing: [f64; 3], img: &[f64], counts: [usize; 3]) -> Vec<SupervoxelCenter> {
    let n = dims.as_array();
    let grad2 = |c: [usize; 3]| -> f64 {
        (0..3)
            .map(|a| {
                let mut lo = [0i32; 3];
                lo[a] = -1;
                let mut hi = [0i32; 3];
                hi[a] = 1;
                let i = dims.index(c[0], c[1], c[2]);
                let fl = dims.offset(c, lo).map_or(img[i], |j| img[j]);
                let fh = dims.offset(c, hi).map_or(img[i], |j| img[j]);
                ((fh - fl) / (2.0 * spacing[a])).powi(2)
            })
            .sum()
    };
    let mut centers = Vec::with_capacity(counts.iter().product());
    for gz in 0..counts[2] {
        for gy in 0..counts[1] {
            for gx in 0..counts[0] {
                let g = [gx, gy, gz];
                let mut c = [0usize; 3];
                for a in 0..3 {
                    c[a] = (((g[a] as f64 + 0.5) * n[a] as f64 / counts[a] as f64) as usize).min(n[a] - 1);
                }
                let mut best = c;
                let mut best_g = grad2(c);
                for off in Connectivity::Full26.offsets() {
                    if let Some(j) = dims.offset(c, off) {
                        let q = dims.coords(j);
                        let gq = grad2(q);
                        if gq < best_g {
                            best_g = gq;
                            best = q;
                        }
                    }
                }
                let i = dims.index(best[0], best[1], best[2]);
                centers.push(SupervoxelCenter {
                    position: [
                        best[0] as f64 * spacing[0],
                        best[1] as f64 * spacing[1],
                        best[2] as f64 * spacing[2],
                    ],
                    mean_intensity: img[i],
                });
            }
        }
    }
    centers
}

struct Assigner<'a> {
    dims: Dims,
    spacing: [f64; 3],
    img: &'a [f64],
    /// m^2 / S^2
    spatial_weight: f64,
    /// Half window per axis, in voxels.
    half: [i64; 3],
}

impl Assigner<'_> {
    #[inline]
    fn dist2(&self, c: &SupervoxelCenter, v: [usize; 3], intensity: f64) -> f64 {
        let di = intensity - c.mean_intensity;
        let ds2: f64 = (0..3)
            .map(|a| (v[a] as f64 * self.spacing[a] - c.position[a]).powi(2))
            .sum();
        di * di + ds2 * self.spatial_weight
    }

    fn voxel_window(&self, c: &SupervoxelCenter) -> [(usize, usize); 3] {
        let n = self.dims.as_array();
        let mut w = [(0, 0); 3];
        for a in 0..3 {
            let mid = (c.position[a] / self.spacing[a]).round() as i64;
            let lo = (mid - self.half[a]).max(0);
            let hi = (mid + self.half[a]).min(n[a] as i64 - 1);
            w[a] = (lo as usize, hi.max(lo) as usize);
        }
        w
    }

    /// Labels are center indices. Each voxel takes the nearest center whose
    /// window covers it; lower index wins ties. Voxels covered by no window
    /// fall back to the globally nearest center.
    fn assign(&self, centers: &[SupervoxelCenter]) -> Vec<u32> {
        let dims = self.dims;
        let plane = dims.nx * dims.ny;
        let windows: Vec<_> = centers.iter().map(|c| self.voxel_window(c)).collect();
        let mut labels = vec![u32::MAX; dims.len()];
        labels
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(z, slab)| {
                let mut dist = vec![f64::INFINITY; plane];
                for (k, (c, w)) in centers.iter().zip(&windows).enumerate() {
                    if z < w[2].0 || z > w[2].1 {
                        continue;
                    }
                    for y in w[1].0..=w[1].1 {
                        for x in w[0].0..=w[0].1 {
                            let j = x + dims.nx * y;
                            let d = self.dist2(c, [x, y, z], self.img[j + z * plane]);
                            if d < dist[j] {
                                dist[j] = d;
                                slab[j] = k as u32;
                            }
                        }
                    }
                }
                for j in 0..plane {
                    if slab[j] == u32::MAX {
                        let v = [j % dims.nx, j / dims.nx, z];
                        let mut best = f64::INFINITY;
                        for (k, c) in centers.iter().enumerate() {
                            let d = self.dist2(c, v, self.img[j + z * plane]);
                            if d < best {
                                best = d;
                                slab[j] = k as u32;
                            }
                        }
                    }
                }
            });
        labels
    }
}

/// Per-center sums: (count, position sum, intensity sum).
type Tally = Vec<(u64, [f64; 3], f64)>;

fn update_centers(
    dims: Dims,
    spacing: [f64; 3],
    img: &[f64],
    labels: &[u32],
    centers: &mut [SupervoxelCenter],
) -> f64 {
    let k = centers.len();
    let plane = dims.nx * dims.ny;
    // per-slab partial sums reduced in slab order, so the result does not
    // depend on thread scheduling
    let partials: Vec<Tally> = (0..dims.nz)
        .into_par_iter()
        .map(|z| {
            let mut t: Tally = vec![(0, [0.0; 3], 0.0); k];
            for j in 0..plane {
                let i = j + z * plane;
                let e = &mut t[labels[i] as usize];
                e.0 += 1;
                e.1[0] += (j % dims.nx) as f64 * spacing[0];
                e.1[1] += (j / dims.nx) as f64 * spacing[1];
                e.1[2] += z as f64 * spacing[2];
                e.2 += img[i];
            }
            t
        })
        .collect();
    let mut total: Tally = vec![(0, [0.0; 3], 0.0); k];
    for p in partials {
        for (acc, e) in total.iter_mut().zip(p) {
            acc.0 += e.0;
            for a in 0..3 {
                acc.1[a] += e.1[a];
            }
            acc.2 += e.2;
        }
    }
    let mut moved = 0f64;
    for (c, (n, pos, int)) in centers.iter_mut().zip(total) {
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        let new_pos = [pos[0] / nf, pos[1] / nf, pos[2] / nf];
        let d: f64 = (0..3)
            .map(|a| (new_pos[a] - c.position[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        moved = moved.max(d);
        c.position = new_pos;
        c.mean_intensity = int / nf;
    }
    moved
}

/// SLIC supervoxels of `intensity`; every voxel gets a label in 1..=k' with k' <= k.
pub fn slic(intensity: &Volume, cfg: &SlicConfig) -> Result<LabelVolume> {
    Ok(slic_with_centers(intensity, cfg)?.0)
}

/// As [`slic`], also returning the final centers (indexed before relabeling).
pub fn slic_with_centers(
    intensity: &Volume,
    cfg: &SlicConfig,
) -> Result<(LabelVolume, Vec<SupervoxelCenter>)> {
    cfg.validate()?;
    let dims = intensity.dims();
    if cfg.k > dims.len() {
        return Err(Error::InvalidParameter(format!(
            "slic.k = {} exceeds voxel count {}",
            cfg.k,
            dims.len()
        )));
    }
    let spacing = intensity.spacing().as_array();
    let n = dims.as_array();
    let extent = [
        n[0] as f64 * spacing[0],
        n[1] as f64 * spacing[1],
        n[2] as f64 * spacing[2],
    ];
    let img = normalized(intensity);
    let (counts, pitch) = grid_counts(dims, extent, cfg.k);
    let mut centers = initial_centers(dims, spacing, &img, counts);

    let mut half = [0i64; 3];
    for a in 0..3 {
        let cell = extent[a] / counts[a] as f64;
        half[a] = (pitch.max(cell) / spacing[a]).ceil() as i64;
    }
    let assigner = Assigner {
        dims,
        spacing,
        img: &img,
        spatial_weight: cfg.compactness * cfg.compactness / (pitch * pitch),
        half,
    };

    let mut labels = assigner.assign(&centers);
    for _ in 0..cfg.max_iters {
        let moved = update_centers(dims, spacing, &img, &labels, &mut centers);
        labels = assigner.assign(&centers);
        if moved <= cfg.tolerance * pitch {
            break;
        }
    }

    let raw = intensity.with_data(labels.into_iter().map(|l| l + 1).collect())?;
    let (mut out, count) = raw.relabel_sequential();
    if cfg.enforce_connectivity {
        let mean = dims.len() as f64 / count.max(1) as f64;
        let floor = (cfg.min_fragment_fraction * mean).floor() as usize;
        out = enforce_connectivity(&out, floor.max(1))?;
    }
    Ok((out, centers))
}

/// Makes every label a single face-connected region.
///
/// For each label the largest component keeps the label. Other components
/// smaller than `min_fragment` voxels merge into the largest face-adjacent
/// region; larger ones become new labels. Output labels are renumbered 1..n
/// in raster first-encounter order; label 0 is treated like any other label.
pub fn enforce_connectivity(labels: &LabelVolume, min_fragment: usize) -> Result<LabelVolume> {
    let dims = labels.dims();
    let data = labels.data();
    let offsets = Connectivity::Face6.offsets();

    // components of equal-label regions
    let mut comp = vec![u32::MAX; data.len()];
    let mut comp_label = Vec::new();
    let mut comp_size: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = comp_label.len() as u32;
        let l = data[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = dims.coords(i);
            for &o in &offsets {
                if let Some(j) = dims.offset(c, o) {
                    if comp[j] == u32::MAX && data[j] == l {
                        comp[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp_label.push(l);
        comp_size.push(size);
    }
    let ncomp = comp_label.len();

    let mut largest: HashMap<u32, usize> = HashMap::new();
    for c in 0..ncomp {
        let e = largest.entry(comp_label[c]).or_insert(c);
        if comp_size[c] > comp_size[*e] {
            *e = c;
        }
    }
    let kept: Vec<bool> = (0..ncomp).map(|c| largest[&comp_label[c]] == c).collect();
    let orphan: Vec<bool> = (0..ncomp)
        .map(|c| !kept[c] && comp_size[c] < min_fragment)
        .collect();

    if orphan.iter().any(|&o| o) {
        let mut adjacent: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..data.len() {
            let a = comp[i] as usize;
            let c = dims.coords(i);
            for o in [[1, 0, 0], [0, 1, 0], [0, 0, 1]] {
                if let Some(j) = dims.offset(c, o) {
                    let b = comp[j] as usize;
                    if a != b {
                        if orphan[a] {
                            adjacent.entry(a).or_default().push(b);
                        }
                        if orphan[b] {
                            adjacent.entry(b).or_default().push(a);
                        }
                    }
                }
            }
        }
        let mut parent: Vec<usize> = (0..ncomp).collect();
        let mut group_size = comp_size.clone();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for c in (0..ncomp).filter(|&c| orphan[c]) {
            let own = find(&mut parent, c);
            let mut best: Option<usize> = None;
            for &nb in adjacent.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
                let r = find(&mut parent, nb);
                if r == own {
                    continue;
                }
                best = match best {
                    Some(b) if group_size[b] > group_size[r] || (group_size[b] == group_size[r] && b < r) => Some(b),
                    _ => Some(r),
                };
            }
            if let Some(target) = best {
                parent[own] = target;
                group_size[target] += group_size[own];
            }
        }
        let roots: Vec<usize> = (0..ncomp).map(|c| find(&mut parent, c)).collect();
        for v in comp.iter_mut() {
            *v = roots[*v as usize] as u32;
        }
    }

    // kept components carry their label; every other surviving group gets a
    // fresh one above the current maximum
    let max_label = comp_label.iter().copied().max().unwrap_or(0);
    let mut fresh: HashMap<u32, u32> = HashMap::new();
    let mut next = max_label;
    let out: Vec<u32> = comp
        .iter()
        .map(|&g| {
            let g = g as usize;
            if kept[g] {
                comp_label[g]
            } else {
                *fresh.entry(g as u32).or_insert_with(|| {
                    next += 1;
                    next
                })
            }
        })
        .collect();
    // labels may be 0 in generic input; shift so relabeling treats 0 as a region
    let shifted = labels.with_data(out.into_iter().map(|l| l + 1).collect())?;
    Ok(shifted.relabel_sequential().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::connected_components;
    use crate::volume::Spacing;

    fn cfg(k: usize, m: f64) -> SlicConfig {
        SlicConfig {
            k,
            compactness: m,
            ..Default::default()
        }
    }

    #[test]
    fn k_one_is_whole_volume() {
        let v = Volume::filled(Dims::new(6, 5, 4), Spacing::default(), 0.3).unwrap();
        let s = slic(&v, &cfg(1, 0.2)).unwrap();
        assert!(s.data().iter().all(|&l| l == 1));
    }

    #[test]
    fn k_above_voxel_count_rejected() {
        let v = Volume::filled(Dims::new(2, 2, 2), Spacing::isotropic(), 0.3).unwrap();
        assert!(matches!(slic(&v, &cfg(9, 0.2)), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn constant_volume_tiles_regularly() {
        let v = Volume::filled(Dims::new(30, 30, 12), Spacing::new(0.5, 0.5, 1.0).unwrap(), 0.5)
            .unwrap();
        let s = slic(&v, &cfg(64, 0.5)).unwrap();
        let sizes = s.label_sizes();
        assert!(sizes.len() <= 64 && sizes.len() > 16);
        let mean = v.len() as f64 / sizes.len() as f64;
        for &n in sizes.values() {
            assert!((n as f64) <= 3.0 * mean && (n as f64) >= mean / 3.0, "{n} vs {mean}");
        }
    }

    #[test]
    fn step_plane_recovered_exactly() {
        let d = Dims::new(8, 4, 4);
        let mut v = Volume::filled(d, Spacing::isotropic(), 0.1).unwrap();
        for i in 0..d.len() {
            if d.coords(i)[0] >= 3 {
                v.data_mut()[i] = 0.9;
            }
        }
        let s = slic(&v, &cfg(2, 0.01)).unwrap();
        for i in 0..d.len() {
            let expect = if d.coords(i)[0] >= 3 { 2 } else { 1 };
            assert_eq!(s.data()[i], expect);
        }
    }

    #[test]
    fn partition_and_connectivity_on_noise() {
        let d = Dims::new(20, 18, 6);
        let mut v = Volume::filled(d, Spacing::new(0.5, 0.5, 1.0).unwrap(), 0.0).unwrap();
        for i in 0..d.len() {
            v.data_mut()[i] = ((i * 7919) % 101) as f32 / 100.0;
        }
        let s = slic(&v, &cfg(40, 0.1)).unwrap();
        assert!(s.data().iter().all(|&l| l != 0));
        let n = s.labels().len() as u32;
        assert_eq!(*s.labels().last().unwrap(), n);
        for l in 1..=n {
            let (_, c) = connected_components(&s.binary_mask(l), Connectivity::Face6).unwrap();
            assert_eq!(c, 1, "label {l}");
        }
    }

    #[test]
    fn enforce_connectivity_identity_on_connected() {
        let d = Dims::new(4, 2, 1);
        let l = LabelVolume::new(d, Spacing::isotropic(), vec![1, 1, 2, 2, 1, 1, 2, 2]).unwrap();
        assert_eq!(enforce_connectivity(&l, 3).unwrap(), l);
    }

    #[test]
    fn one_voxel_fragment_absorbed() {
        // label 1 has a large part on the left and a stray voxel inside label 2
        let d = Dims::new(6, 1, 1);
        let l = LabelVolume::new(d, Spacing::isotropic(), vec![1, 1, 2, 2, 1, 2]).unwrap();
        let e = enforce_connectivity(&l, 2).unwrap();
        assert_eq!(e.data(), &[1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn large_fragment_becomes_new_label() {
        let d = Dims::new(7, 1, 1);
        let l = LabelVolume::new(d, Spacing::isotropic(), vec![1, 1, 1, 2, 1, 1, 3]).unwrap();
        let e = enforce_connectivity(&l, 2).unwrap();
        assert_eq!(e.data(), &[1, 1, 1, 2, 3, 3, 4]);
    }

    #[test]
    fn parallel_matches_single_thread() {
        let d = Dims::new(24, 20, 8);
        let mut v = Volume::filled(d, Spacing::new(0.5, 0.5, 1.0).unwrap(), 0.0).unwrap();
        for i in 0..d.len() {
            v.data_mut()[i] = ((i * 31337) % 97) as f32 / 96.0;
        }
        let c = cfg(50, 0.3);
        let multi = slic(&v, &c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| slic(&v, &c).unwrap());
        assert_eq!(multi, single);
    }
}
