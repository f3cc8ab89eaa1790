//! Supervoxel-based boundary correction of a watershed segmentation.
//!
//! Every supervoxel is moved wholesale to the watershed region (or background)
//! it overlaps most, so the corrected nuclei inherit supervoxel boundaries.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Sparse overlap counts `K[i][j] = |supervoxel i ∩ watershed region j|`,
/// with `j = 0` standing for background. Zero entries are not stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrelationTable {
    rows: BTreeMap<u32, BTreeMap<u32, u64>>,
}

impl CorrelationTable {
    pub fn get(&self, supervoxel: u32, region: u32) -> u64 {
        self.rows
            .get(&supervoxel)
            .and_then(|r| r.get(&region))
            .copied()
            .unwrap_or(0)
    }

    pub fn row(&self, supervoxel: u32) -> Option<&BTreeMap<u32, u64>> {
        self.rows.get(&supervoxel)
    }

    pub fn supervoxels(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    /// All nonzero entries as `(i, j, K_ij)`, ascending.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, u64)> + '_ {
        self.rows
            .iter()
            .flat_map(|(&i, r)| r.iter().map(move |(&j, &k)| (i, j, k)))
    }

    /// Size of supervoxel `i` (row sum).
    pub fn supervoxel_size(&self, supervoxel: u32) -> u64 {
        self.rows
            .get(&supervoxel)
            .map_or(0, |r| r.values().sum())
    }

    /// Winning region per supervoxel. Background wins any tie it is part of;
    /// otherwise the lower watershed label wins.
    pub fn assignment(&self) -> BTreeMap<u32, u32> {
        self.rows
            .iter()
            .map(|(&i, row)| {
                // rows iterate ascending by j, so background (0) is seen first
                // and strict > keeps the earliest (lowest) label among ties
                let mut best = (0u32, 0u64);
                let mut first = true;
                for (&j, &k) in row {
                    if first || k > best.1 {
                        best = (j, k);
                        first = false;
                    }
                }
                (i, best.0)
            })
            .collect()
    }

    fn merge(mut self, other: Self) -> Self {
        for (i, row) in other.rows {
            let dst = self.rows.entry(i).or_default();
            for (j, k) in row {
                *dst.entry(j).or_insert(0) += k;
            }
        }
        self
    }

    /// Plain-text dump, one `supervoxel region count` triple per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# supervoxel region count\n");
        for (i, j, k) in self.entries() {
            s.push_str(&format!("{i} {j} {k}\n"));
        }
        s
    }
}

const CHUNK: usize = 1 << 16;

/// Exact overlap tally between supervoxels `sv` and watershed regions `ws`.
pub fn cluster_correlation(sv: &LabelVolume, ws: &LabelVolume) -> Result<CorrelationTable> {
    sv.check_same_dims(ws)?;
    let table = sv
        .data()
        .par_chunks(CHUNK)
        .zip(ws.data().par_chunks(CHUNK))
        .map(|(a, b)| {
            let mut t = CorrelationTable::default();
            for (&i, &j) in a.iter().zip(b) {
                *t.rows.entry(i).or_default().entry(j).or_insert(0) += 1;
            }
            t
        })
        .reduce(CorrelationTable::default, CorrelationTable::merge);
    Ok(table)
}

/// Relabels each supervoxel of `sv` to its argmax watershed region from `table`.
///
/// Watershed ids are kept. Nuclei that win no supervoxel disappear and are
/// logged.
pub fn correct_boundaries(
    sv: &LabelVolume,
    ws: &LabelVolume,
    table: &CorrelationTable,
) -> Result<LabelVolume> {
    sv.check_same_dims(ws)?;
    let assignment = table.assignment();
    let out: Vec<u32> = sv
        .data()
        .par_iter()
        .map(|i| {
            assignment
                .get(i)
                .copied()
                .ok_or(Error::MissingSupervoxel(*i))
        })
        .collect::<Result<_>>()?;
    let corrected = sv.with_data(out)?;

    let before: BTreeSet<u32> = ws.labels().into_iter().collect();
    let after: BTreeSet<u32> = assignment.values().copied().filter(|&l| l != 0).collect();
    for lost in before.difference(&after) {
        log::info!("nucleus {lost} won no supervoxel and was dropped");
    }
    Ok(corrected)
}

/// Watershed nuclei absent from the corrected segmentation.
pub fn dropped_nuclei(ws: &LabelVolume, corrected: &LabelVolume) -> Vec<u32> {
    let after: BTreeSet<u32> = corrected.labels().into_iter().collect();
    ws.labels()
        .into_iter()
        .filter(|l| !after.contains(l))
        .collect()
}
