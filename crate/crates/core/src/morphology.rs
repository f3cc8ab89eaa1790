//! Connected components and binary dilation on voxel grids.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::{Connectivity, Dims, LabelVolume};

/// Labels the maximal connected regions of a binary mask.
///
/// Labels are assigned 1..count in raster-scan first-encounter order.
pub fn connected_components(mask: &LabelVolume, conn: Connectivity) -> Result<(LabelVolume, u32)> {
    if let Some(&bad) = mask.data().iter().find(|&&v| v > 1) {
        return Err(Error::NotBinary(bad));
    }
    let fg: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let (labels, count) = label_components(&fg, mask.dims(), conn);
    Ok((mask.with_data(labels)?, count))
}

/// Dilates a binary mask `iterations` times with the structuring element implied by `element`.
pub fn dilate_binary(
    mask: &LabelVolume,
    element: Connectivity,
    iterations: usize,
) -> Result<LabelVolume> {
    if iterations == 0 {
        return Err(Error::InvalidParameter(
            "dilation iterations must be >= 1".into(),
        ));
    }
    if let Some(&bad) = mask.data().iter().find(|&&v| v > 1) {
        return Err(Error::NotBinary(bad));
    }
    let mut fg: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let mut dil = Dilation::new(&fg, mask.dims(), element);
    for _ in 0..iterations {
        if !dil.step(&mut fg) {
            break;
        }
    }
    mask.with_data(fg.into_iter().map(u32::from).collect())
}

/// Component labeling on a boolean mask. Returns labels and component count.
pub fn label_components(fg: &[bool], dims: Dims, conn: Connectivity) -> (Vec<u32>, u32) {
    let offsets = conn.offsets();
    let mut labels = vec![0u32; fg.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let c = dims.coords(i);
            for &off in &offsets {
                if let Some(n) = dims.offset(c, off) {
                    if fg[n] && labels[n] == 0 {
                        labels[n] = count;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Number of connected components without materializing labels beyond need.
pub fn count_components(fg: &[bool], dims: Dims, conn: Connectivity) -> u32 {
    label_components(fg, dims, conn).1
}

/// Incremental dilation that only expands from the most recently added shell.
pub(crate) struct Dilation {
    dims: Dims,
    offsets: Vec<[i32; 3]>,
    frontier: Vec<usize>,
}

impl Dilation {
    pub(crate) fn new(fg: &[bool], dims: Dims, element: Connectivity) -> Self {
        Self {
            dims,
            offsets: element.offsets(),
            frontier: fg
                .iter()
                .enumerate()
                .filter_map(|(i, &f)| f.then_some(i))
                .collect(),
        }
    }

    /// One dilation step. Returns false once the mask has stopped growing.
    pub(crate) fn step(&mut self, fg: &mut [bool]) -> bool {
        let mut next = Vec::new();
        for &i in &self.frontier {
            let c = self.dims.coords(i);
            for &off in &self.offsets {
                if let Some(n) = self.dims.offset(c, off) {
                    if !fg[n] {
                        fg[n] = true;
                        next.push(n);
                    }
                }
            }
        }
        self.frontier = next;
        !self.frontier.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use proptest::prelude::*;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> LabelVolume {
        let mut m = LabelVolume::filled(dims, Spacing::isotropic(), 0).unwrap();
        for &[x, y, z] in on {
            m.set(x, y, z, 1);
        }
        m
    }

    #[test]
    fn diagonal_pair_depends_on_connectivity() {
        let m = mask(Dims::new(3, 3, 1), &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(connected_components(&m, Connectivity::Face6).unwrap().1, 2);
        assert_eq!(connected_components(&m, Connectivity::FaceEdge18).unwrap().1, 1);
        assert_eq!(connected_components(&m, Connectivity::Full26).unwrap().1, 1);
    }

    #[test]
    fn corner_pair_needs_full26() {
        let m = mask(Dims::new(2, 2, 2), &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::FaceEdge18).unwrap().1, 2);
        assert_eq!(connected_components(&m, Connectivity::Full26).unwrap().1, 1);
    }

    #[test]
    fn solid_cube_is_one_component() {
        let d = Dims::new(3, 3, 3);
        let m = LabelVolume::filled(d, Spacing::isotropic(), 1).unwrap();
        let (labels, n) = connected_components(&m, Connectivity::Face6).unwrap();
        assert_eq!(n, 1);
        assert!(labels.data().iter().all(|&l| l == 1));
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = mask(Dims::new(4, 4, 4), &[]);
        let (labels, n) = connected_components(&m, Connectivity::Full26).unwrap();
        assert_eq!(n, 0);
        assert!(labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn non_binary_rejected() {
        let mut m = mask(Dims::new(2, 1, 1), &[]);
        m.set(0, 0, 0, 2);
        assert!(matches!(
            connected_components(&m, Connectivity::Face6),
            Err(Error::NotBinary(2))
        ));
    }

    #[test]
    fn labels_follow_raster_order() {
        let m = mask(Dims::new(5, 1, 1), &[[4, 0, 0], [0, 0, 0], [2, 0, 0]]);
        let (labels, n) = connected_components(&m, Connectivity::Face6).unwrap();
        assert_eq!(n, 3);
        assert_eq!(labels.data(), &[1, 0, 2, 0, 3]);
    }

    #[test]
    fn single_voxel_dilates_to_cross() {
        let m = mask(Dims::new(5, 5, 5), &[[2, 2, 2]]);
        let d = dilate_binary(&m, Connectivity::Face6, 1).unwrap();
        assert_eq!(d.foreground_count(), 7);
        let d = dilate_binary(&m, Connectivity::Full26, 1).unwrap();
        assert_eq!(d.foreground_count(), 27);
    }

    #[test]
    fn full_mask_saturates() {
        let m = LabelVolume::filled(Dims::new(3, 4, 2), Spacing::isotropic(), 1).unwrap();
        assert_eq!(dilate_binary(&m, Connectivity::Face6, 5).unwrap(), m);
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = mask(Dims::new(2, 2, 2), &[[0, 0, 0]]);
        assert!(dilate_binary(&m, Connectivity::Face6, 0).is_err());
    }

    #[test]
    fn four_step_gap_merges_after_two_dilations() {
        // voxels at x=0 and x=4: gap cells 1,2,3 close from both sides
        let m = mask(Dims::new(5, 1, 1), &[[0, 0, 0], [4, 0, 0]]);
        let d1 = dilate_binary(&m, Connectivity::Face6, 1).unwrap();
        assert_eq!(d1.data(), &[1, 1, 0, 1, 1]);
        assert_eq!(connected_components(&d1, Connectivity::Face6).unwrap().1, 2);
        let d2 = dilate_binary(&m, Connectivity::Face6, 2).unwrap();
        assert_eq!(connected_components(&d2, Connectivity::Face6).unwrap().1, 1);
    }

    /// Direct definition: a voxel is set iff some foreground voxel lies within
    /// `k` structuring-element steps (L1 for face-6, Chebyshev for full-26).
    fn dilate_oracle(m: &LabelVolume, conn: Connectivity, k: usize) -> Vec<u32> {
        let d = m.dims();
        let fg: Vec<[usize; 3]> = (0..d.len())
            .filter(|&i| m.data()[i] == 1)
            .map(|i| d.coords(i))
            .collect();
        (0..d.len())
            .map(|i| {
                let c = d.coords(i);
                let hit = fg.iter().any(|f| {
                    let dx = c[0].abs_diff(f[0]);
                    let dy = c[1].abs_diff(f[1]);
                    let dz = c[2].abs_diff(f[2]);
                    match conn {
                        Connectivity::Face6 => dx + dy + dz <= k,
                        Connectivity::Full26 => dx.max(dy).max(dz) <= k,
                        Connectivity::FaceEdge18 => unreachable!(),
                    }
                });
                u32::from(hit)
            })
            .collect()
    }

    fn arb_mask() -> impl Strategy<Value = LabelVolume> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
            proptest::collection::vec(prop::bool::weighted(0.15), nx * ny * nz).prop_map(
                move |bits| {
                    LabelVolume::new(
                        Dims::new(nx, ny, nz),
                        Spacing::isotropic(),
                        bits.into_iter().map(u32::from).collect(),
                    )
                    .unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn dilation_matches_distance_oracle(m in arb_mask(), k in 1usize..4, full in any::<bool>()) {
            let conn = if full { Connectivity::Full26 } else { Connectivity::Face6 };
            let d = dilate_binary(&m, conn, k).unwrap();
            let expected = dilate_oracle(&m, conn, k);
            prop_assert_eq!(d.data(), expected.as_slice());
        }

        #[test]
        fn dilation_monotone_and_additive(m in arb_mask(), a in 1usize..3, b in 1usize..3) {
            let conn = Connectivity::Face6;
            let da = dilate_binary(&m, conn, a).unwrap();
            for (x, y) in m.data().iter().zip(da.data()) {
                prop_assert!(x <= y);
            }
            let dab = dilate_binary(&da, conn, b).unwrap();
            prop_assert_eq!(dab, dilate_binary(&m, conn, a + b).unwrap());
        }

        #[test]
        fn components_partition_foreground(m in arb_mask(), full in any::<bool>()) {
            let conn = if full { Connectivity::Full26 } else { Connectivity::Face6 };
            let (labels, n) = connected_components(&m, conn).unwrap();
            for (&f, &l) in m.data().iter().zip(labels.data()) {
                prop_assert_eq!(f == 1, l != 0);
                prop_assert!(l <= n);
            }
            let sizes = labels.label_sizes();
            prop_assert_eq!(sizes.len() as u32, n);
            prop_assert_eq!(sizes.values().sum::<usize>(), m.foreground_count());
            // each label is itself a single component
            for l in 1..=n {
                let (_, k) = connected_components(&labels.binary_mask(l), conn).unwrap();
                prop_assert_eq!(k, 1);
            }
        }

        #[test]
        fn region_counts_match_scan(data in proptest::collection::vec(0u32..5, 27)) {
            let v = LabelVolume::new(Dims::new(3, 3, 3), Spacing::isotropic(), data.clone()).unwrap();
            let mut total = 0;
            for l in 1..5u32 {
                let scan = data.iter().filter(|&&x| x == l).count();
                match v.region_voxel_count(l) {
                    Ok(n) => { prop_assert_eq!(n, scan); total += n; }
                    Err(_) => prop_assert_eq!(scan, 0),
                }
            }
            prop_assert_eq!(total, v.foreground_count());
        }
    }
}
