//! Dense 3D voxel grids with anisotropic physical spacing.
//!
//! Memory layout is x fastest, then y, then z (z = TIFF page index).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.nx;
        let yz = idx / self.nx;
        [x, yz % self.ny, yz / self.ny]
    }

    /// Index of `coords + offset`, or `None` when it falls outside the grid.
    #[inline]
    pub fn offset(&self, coords: [usize; 3], off: [i32; 3]) -> Option<usize> {
        let x = coords[0] as i64 + off[0] as i64;
        let y = coords[1] as i64 + off[1] as i64;
        let z = coords[2] as i64 + off[2] as i64;
        if x < 0
            || y < 0
            || z < 0
            || x >= self.nx as i64
            || y >= self.ny as i64
            || z >= self.nz as i64
        {
            return None;
        }
        Some(self.index(x as usize, y as usize, z as usize))
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Physical voxel size in microns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Self { sx, sy, sz };
        s.validate()?;
        Ok(s)
    }

    pub const fn isotropic() -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            sz: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.sx) && ok(self.sy) && ok(self.sz) {
            Ok(())
        } else {
            Err(Error::InvalidSpacing(self.sx, self.sy, self.sz))
        }
    }

    /// Cubic microns per voxel.
    pub fn voxel_volume(&self) -> f64 {
        self.sx * self.sy * self.sz
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }

    pub fn min(&self) -> f64 {
        self.sx.min(self.sy).min(self.sz)
    }
}

impl Default for Spacing {
    /// Voxel size of the N3DH-CE embryo recordings.
    fn default() -> Self {
        Self {
            sx: 0.09,
            sy: 0.09,
            sz: 1.0,
        }
    }
}

/// Neighborhood used for component analysis and as dilation structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    #[default]
    #[serde(alias = "6", alias = "face6")]
    Face6,
    #[serde(alias = "18", alias = "face-edge18")]
    FaceEdge18,
    #[serde(alias = "26", alias = "full26")]
    Full26,
}

impl Connectivity {
    /// Neighbor offsets, origin excluded, in a fixed order.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let n = (dx as i32).abs() + (dy as i32).abs() + (dz as i32).abs();
                    let keep = match self {
                        Connectivity::Face6 => n == 1,
                        Connectivity::FaceEdge18 => n == 1 || n == 2,
                        Connectivity::Full26 => n >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Face6 => "face-6",
            Connectivity::FaceEdge18 => "face-edge-18",
            Connectivity::Full26 => "full-26",
        }
    }
}

/// A dense voxel grid carrying its physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// Scalar intensities or probabilities.
pub type Volume = Grid<f32>;
/// Integer labels, 0 = background.
pub type LabelVolume = Grid<u32>;

impl<T: Copy> Grid<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyDims(dims));
        }
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DataLength {
                len: data.len(),
                dims,
            });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    /// Same geometry, new payload.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Grid<U>> {
        Grid::new(self.dims, self.spacing, data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    /// Copy of the axis-aligned box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<Grid<T>> {
        let end = [origin[0] + size.nx, origin[1] + size.ny, origin[2] + size.nz];
        if end[0] > self.dims.nx || end[1] > self.dims.ny || end[2] > self.dims.nz {
            return Err(Error::InvalidParameter(format!(
                "crop box {origin:?}+{size:?} exceeds {:?}",
                self.dims
            )));
        }
        let mut data = Vec::with_capacity(size.len());
        for z in origin[2]..end[2] {
            for y in origin[1]..end[1] {
                let row = self.dims.index(origin[0], y, z);
                data.extend_from_slice(&self.data[row..row + size.nx]);
            }
        }
        Grid::new(size, self.spacing, data)
    }

    /// Physical center of voxel `(x, y, z)`, with voxel 0 centered at the origin.
    pub fn position(&self, coords: [usize; 3]) -> [f64; 3] {
        let s = self.spacing.as_array();
        [
            coords[0] as f64 * s[0],
            coords[1] as f64 * s[1],
            coords[2] as f64 * s[2],
        ]
    }
}

impl Volume {
    /// Validates that every value lies in [0, 1].
    pub fn probability_map(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ProbabilityRange(bad));
        }
        Self::new(dims, spacing, data)
    }

    pub fn is_probability_map(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl LabelVolume {
    /// Voxel count per nonzero label, ascending by label.
    pub fn label_sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for &l in &self.data {
            if l != 0 {
                *sizes.entry(l).or_insert(0) += 1;
            }
        }
        sizes
    }

    /// Sorted nonzero labels present.
    pub fn labels(&self) -> Vec<u32> {
        self.label_sizes().into_keys().collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// `|C_label|`, failing when the label is absent.
    pub fn region_voxel_count(&self, label: u32) -> Result<usize> {
        if label == 0 {
            return Err(Error::UnknownLabel(0));
        }
        match self.data.iter().filter(|&&l| l == label).count() {
            0 => Err(Error::UnknownLabel(label)),
            n => Ok(n),
        }
    }

    /// Binary mask (labels in {0, 1}) of a single label.
    pub fn binary_mask(&self, label: u32) -> LabelVolume {
        self.map(|l| u32::from(l == label && l != 0))
    }

    /// Inclusive bounding box `(min, max)` per label.
    pub fn bounding_boxes(&self) -> BTreeMap<u32, ([usize; 3], [usize; 3])> {
        let mut boxes: BTreeMap<u32, ([usize; 3], [usize; 3])> = BTreeMap::new();
        for (i, &l) in self.data.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let c = self.dims.coords(i);
            boxes
                .entry(l)
                .and_modify(|(lo, hi)| {
                    for a in 0..3 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                })
                .or_insert((c, c));
        }
        boxes
    }

    /// Renumbers nonzero labels to 1..n in raster first-encounter order.
    pub fn relabel_sequential(&self) -> (LabelVolume, u32) {
        let mut map: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
        let mut next = 0u32;
        let data = self
            .data
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    *map.entry(l).or_insert_with(|| {
                        next += 1;
                        next
                    })
                }
            })
            .collect();
        (
            Grid {
                dims: self.dims,
                spacing: self.spacing,
                data,
            },
            next,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
        assert_eq!(d.offset([0, 0, 0], [-1, 0, 0]), None);
        assert_eq!(d.offset([2, 3, 4], [0, 0, 1]), None);
        assert_eq!(d.offset([1, 1, 1], [1, -1, 0]), Some(d.index(2, 0, 1)));
    }

    #[test]
    fn connectivity_sizes() {
        assert_eq!(Connectivity::Face6.offsets().len(), 6);
        assert_eq!(Connectivity::FaceEdge18.offsets().len(), 18);
        assert_eq!(Connectivity::Full26.offsets().len(), 26);
    }

    #[test]
    fn rejects_bad_geometry() {
        let d = Dims::new(2, 2, 2);
        assert!(matches!(
            Volume::new(d, Spacing::isotropic(), vec![0.0; 7]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            Spacing::new(0.1, 0.0, 1.0),
            Err(Error::InvalidSpacing(..))
        ));
        assert!(matches!(
            Volume::probability_map(d, Spacing::isotropic(), vec![1.5; 8]),
            Err(Error::ProbabilityRange(_))
        ));
    }

    #[test]
    fn region_count_of_cube() {
        let d = Dims::new(4, 4, 4);
        let mut v = LabelVolume::filled(d, Spacing::isotropic(), 0).unwrap();
        for z in 1..3 {
            for y in 1..3 {
                for x in 1..3 {
                    v.set(x, y, z, 3);
                }
            }
        }
        assert_eq!(v.region_voxel_count(3).unwrap(), 8);
        assert!(matches!(v.region_voxel_count(5), Err(Error::UnknownLabel(5))));
    }

    #[test]
    fn crop_extracts_box() {
        let d = Dims::new(4, 3, 2);
        let data: Vec<u32> = (0..24).collect();
        let v = LabelVolume::new(d, Spacing::isotropic(), data).unwrap();
        let c = v.crop([1, 1, 1], Dims::new(2, 2, 1)).unwrap();
        assert_eq!(c.data(), &[17, 18, 21, 22]);
    }

    #[test]
    fn relabel_first_encounter() {
        let d = Dims::new(5, 1, 1);
        let v = LabelVolume::new(d, Spacing::isotropic(), vec![9, 0, 4, 9, 7]).unwrap();
        let (r, n) = v.relabel_sequential();
        assert_eq!(n, 3);
        assert_eq!(r.data(), &[1, 0, 2, 1, 3]);
    }
}
