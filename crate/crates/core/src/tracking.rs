//! Frame-to-frame nuclei linking from adjacency-graph features.
//!
//! Each nucleus is described by its physical volume, its graph degree and its
//! weighted degree. Consecutive frames are linked greedily by ascending
//! similarity score; unmatched nuclei start or end tracks, and new tracks that
//! appear inside a vanished nucleus' neighborhood become its daughters.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, NucleiGraph};
use crate::lineage::{LineageTable, Track};
use crate::morphology::Dilation;
use crate::volume::{Dims, LabelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFeature {
    pub label: u32,
    /// Cubic microns.
    pub volume: f64,
    pub degree: usize,
    pub weighted_degree: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Links are admitted only with similarity strictly below this.
    pub threshold: f64,
    /// Dilation radius (voxel steps) of the parent region searched for
    /// daughters. Defaults to the graph's `max_radius`.
    pub division_radius: Option<usize>,
    /// Treat a linked nucleus as dividing when its link target and at least one
    /// unlinked newcomer both lie inside its dilated region.
    pub split_linked_divisions: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            division_radius: None,
            split_linked_divisions: true,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config("tracking.threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Features for every nucleus of `seg`, ascending by label.
pub fn compute_features(seg: &LabelVolume, graph: &NucleiGraph) -> Vec<TrackFeature> {
    let voxel = seg.spacing().voxel_volume();
    seg.label_sizes()
        .into_iter()
        .map(|(label, n)| TrackFeature {
            label,
            volume: n as f64 * voxel,
            degree: graph.degree(label),
            weighted_degree: graph.weighted_degree(label),
        })
        .collect()
}

/// Relative change against a reference; a zero reference scores 0 when the
/// other value is also zero and 1 otherwise.
fn relative_change(reference: f64, other: f64) -> f64 {
    if reference == 0.0 {
        if other == 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        (reference - other).abs() / reference
    }
}

/// Dissimilarity of `b` (frame t+1) from reference `a` (frame t). Not symmetric.
pub fn similarity(a: &TrackFeature, b: &TrackFeature) -> f64 {
    relative_change(a.volume, b.volume)
        + relative_change(a.degree as f64, b.degree as f64)
        + relative_change(a.weighted_degree, b.weighted_degree)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: u32,
    pub to: u32,
    pub sim: f64,
}

/// Greedy one-to-one matching: all pairs with `sim < threshold` are taken in
/// ascending `(sim, from, to)` order, skipping nuclei already matched.
/// Links are returned in acceptance order.
pub fn link_frames(prev: &[TrackFeature], next: &[TrackFeature], threshold: f64) -> Result<Vec<Link>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "link threshold must be > 0, got {threshold}"
        )));
    }
    let mut pairs: Vec<Link> = prev
        .par_iter()
        .flat_map_iter(|a| {
            next.iter().filter_map(move |b| {
                let sim = similarity(a, b);
                (sim < threshold).then_some(Link {
                    from: a.label,
                    to: b.label,
                    sim,
                })
            })
        })
        .collect();
    pairs.par_sort_unstable_by(|x, y| {
        x.sim
            .total_cmp(&y.sim)
            .then(x.from.cmp(&y.from))
            .then(x.to.cmp(&y.to))
    });
    let mut used_from = BTreeSet::new();
    let mut used_to = BTreeSet::new();
    let mut links = Vec::new();
    for p in pairs {
        if used_from.contains(&p.from) || used_to.contains(&p.to) {
            continue;
        }
        used_from.insert(p.from);
        used_to.insert(p.to);
        links.push(p);
    }
    Ok(links)
}

/// Tracking output: the lineage plus, per frame, the track id of every label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub lineage: LineageTable,
    pub assignments: Vec<BTreeMap<u32, u32>>,
}

impl TrackingResult {
    /// Masks relabeled so each nucleus carries its track id.
    pub fn relabel(&self, frames: &[LabelVolume]) -> Result<Vec<LabelVolume>> {
        frames
            .iter()
            .zip(&self.assignments)
            .map(|(f, map)| {
                let data = f
                    .data()
                    .iter()
                    .map(|&l| if l == 0 { 0 } else { map[&l] })
                    .collect();
                f.with_data(data)
            })
            .collect()
    }
}

/// `|q ∩ dilate(p, radius)|` for every label `q` of `next`, per label `p` of `prev`.
fn neighborhood_overlaps(
    prev: &LabelVolume,
    next: &LabelVolume,
    radius: usize,
    graph_cfg: &GraphConfig,
) -> Result<BTreeMap<u32, BTreeMap<u32, usize>>> {
    let dims = prev.dims();
    let boxes: Vec<_> = prev.bounding_boxes().into_iter().collect();
    boxes
        .par_iter()
        .map(|&(p, (lo, hi))| {
            let n = dims.as_array();
            let mut origin = [0; 3];
            let mut size = [0; 3];
            for a in 0..3 {
                origin[a] = lo[a].saturating_sub(radius);
                size[a] = (hi[a] + radius).min(n[a] - 1) - origin[a] + 1;
            }
            let size = Dims::new(size[0], size[1], size[2]);
            let crop = prev.crop(origin, size)?;
            let mut mask: Vec<bool> = crop.data().iter().map(|&l| l == p).collect();
            if radius > 0 {
                let mut dil = Dilation::new(&mask, size, graph_cfg.connectivity);
                for _ in 0..radius {
                    if !dil.step(&mut mask) {
                        break;
                    }
                }
            }
            let other = next.crop(origin, size)?;
            let mut counts = BTreeMap::new();
            for (&m, &q) in mask.iter().zip(other.data()) {
                if m && q != 0 {
                    *counts.entry(q).or_insert(0) += 1;
                }
            }
            Ok((p, counts))
        })
        .collect()
}

/// Builds the lineage of a segmented sequence.
pub fn track_sequence(
    frames: &[LabelVolume],
    cfg: &TrackingConfig,
    graph_cfg: &GraphConfig,
) -> Result<TrackingResult> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidParameter(
            "tracking needs at least one frame".into(),
        ));
    }
    for f in &frames[1..] {
        frames[0].check_same_dims(f)?;
    }
    let radius = cfg.division_radius.unwrap_or(graph_cfg.max_radius);

    let features: Vec<Vec<TrackFeature>> = frames
        .par_iter()
        .enumerate()
        .map(|(t, seg)| {
            let g = build_graph(seg, graph_cfg).map_err(|e| e.in_frame(t))?;
            Ok(compute_features(seg, &g))
        })
        .collect::<Result<_>>()?;

    let mut tracks: BTreeMap<u32, Track> = BTreeMap::new();
    let mut next_id = 1u32;
    let mut assignments: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(frames.len());

    let mut first = BTreeMap::new();
    for f in &features[0] {
        tracks.insert(next_id, Track::new(next_id, 0, 0, 0));
        first.insert(f.label, next_id);
        next_id += 1;
    }
    assignments.push(first);

    for t in 0..frames.len() - 1 {
        let links = link_frames(&features[t], &features[t + 1], cfg.threshold)?;
        let mut linked: BTreeMap<u32, u32> = links.iter().map(|l| (l.from, l.to)).collect();
        let linked_to: BTreeSet<u32> = links.iter().map(|l| l.to).collect();

        let overlaps = neighborhood_overlaps(&frames[t], &frames[t + 1], radius, graph_cfg)
            .map_err(|e| e.in_frame(t))?;

        // best parent candidate for every unlinked newcomer
        let newcomers: Vec<u32> = features[t + 1]
            .iter()
            .map(|f| f.label)
            .filter(|q| !linked_to.contains(q))
            .collect();
        let mut kids: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &q in &newcomers {
            let best = overlaps
                .iter()
                .filter_map(|(&p, m)| m.get(&q).map(|&n| (n, p)))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((_, p)) = best {
                kids.entry(p).or_default().push(q);
            }
        }

        let mut parent_of: BTreeMap<u32, u32> = BTreeMap::new();
        for (&p, qs) in &kids {
            let parent_track = assignments[t][&p];
            match linked.get(&p).copied() {
                None if qs.len() >= 2 => {
                    for &q in qs {
                        parent_of.insert(q, parent_track);
                    }
                }
                Some(q0)
                    if cfg.split_linked_divisions
                        && overlaps[&p].get(&q0).copied().unwrap_or(0) > 0 =>
                {
                    linked.remove(&p);
                    parent_of.insert(q0, parent_track);
                    for &q in qs {
                        parent_of.insert(q, parent_track);
                    }
                }
                _ => {}
            }
        }

        let mut current = BTreeMap::new();
        for (&p, &q) in &linked {
            let id = assignments[t][&p];
            tracks.get_mut(&id).expect("open track").end = t + 1;
            current.insert(q, id);
        }
        for f in &features[t + 1] {
            if current.contains_key(&f.label) {
                continue;
            }
            let parent = parent_of.get(&f.label).copied().unwrap_or(0);
            tracks.insert(next_id, Track::new(next_id, t + 1, t + 1, parent));
            current.insert(f.label, next_id);
            next_id += 1;
        }
        assignments.push(current);
    }

    Ok(TrackingResult {
        lineage: LineageTable::new(tracks.into_values())?,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn feat(label: u32, volume: f64, degree: usize, weighted_degree: f64) -> TrackFeature {
        TrackFeature {
            label,
            volume,
            degree,
            weighted_degree,
        }
    }

    #[test]
    fn volume_uses_voxel_resolution() {
        let d = Dims::new(10, 10, 2);
        let mut seg = LabelVolume::filled(d, Spacing::new(0.09, 0.09, 1.0).unwrap(), 0).unwrap();
        for i in 0..100 {
            seg.data_mut()[i] = 1;
        }
        let g = NucleiGraph::new([1], 10);
        let f = compute_features(&seg, &g);
        assert!((f[0].volume - 0.81).abs() < 1e-12);
        assert_eq!(f[0].degree, 0);
        assert_eq!(f[0].weighted_degree, 0.0);
    }

    #[test]
    fn weighted_degree_is_mean_weight() {
        let d = Dims::new(3, 1, 1);
        let seg = LabelVolume::new(d, Spacing::isotropic(), vec![1, 2, 3]).unwrap();
        let mut g = NucleiGraph::new([1, 2, 3], 10);
        g.add_edge(1, 2, 2).unwrap();
        g.add_edge(1, 3, 4).unwrap();
        let f = compute_features(&seg, &g);
        assert_eq!(f[0].degree, 2);
        assert_eq!(f[0].weighted_degree, 3.0);
    }

    #[test]
    fn similarity_arithmetic() {
        let a = feat(1, 10.0, 2, 3.0);
        assert_eq!(similarity(&a, &a), 0.0);
        let b = feat(2, 20.0, 2, 3.0);
        assert_eq!(similarity(&a, &b), 1.0);
        // reference is frame t: not symmetric
        assert_eq!(similarity(&b, &a), 0.5);
        let iso = feat(3, 10.0, 0, 0.0);
        assert_eq!(similarity(&iso, &iso), 0.0);
        assert_eq!(similarity(&iso, &feat(4, 10.0, 1, 2.0)), 2.0);
    }

    #[test]
    fn identical_frames_match_perfectly() {
        let f: Vec<_> = (1..=5).map(|i| feat(i, 10.0 * i as f64, 1, 2.0)).collect();
        let links = link_frames(&f, &f, 1.0).unwrap();
        assert_eq!(links.len(), 5);
        assert!(links.iter().all(|l| l.from == l.to && l.sim == 0.0));
    }

    #[test]
    fn empty_next_frame_no_links() {
        let f = vec![feat(1, 5.0, 0, 0.0)];
        assert!(link_frames(&f, &[], 1.0).unwrap().is_empty());
        assert!(link_frames(&f, &f, 0.0).is_err());
    }

    #[test]
    fn permutation_recovered() {
        let a: Vec<_> = (1..=6).map(|i| feat(i, 10.0 * 1.3f64.powi(i as i32), 0, 0.0)).collect();
        let perm = [4u32, 6, 1, 3, 2, 5];
        let b: Vec<_> = a
            .iter()
            .zip(perm)
            .map(|(f, p)| feat(p, f.volume, f.degree, f.weighted_degree))
            .collect();
        let links = link_frames(&a, &b, 1.0).unwrap();
        let map: BTreeMap<u32, u32> = links.iter().map(|l| (l.from, l.to)).collect();
        for (i, p) in perm.iter().enumerate() {
            assert_eq!(map[&(i as u32 + 1)], *p);
        }
    }

    #[test]
    fn greedy_takes_smallest_first() {
        let a = vec![feat(1, 10.0, 0, 0.0), feat(2, 12.0, 0, 0.0)];
        let b = vec![feat(7, 11.9, 0, 0.0)];
        let links = link_frames(&a, &b, 1.0).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].from, 2);
    }

    fn cube(seg: &mut LabelVolume, lo: [usize; 3], n: usize, l: u32) {
        for z in lo[2]..lo[2] + n {
            for y in lo[1]..lo[1] + n {
                for x in lo[0]..lo[0] + n {
                    seg.set(x, y, z, l);
                }
            }
        }
    }

    #[test]
    fn static_nucleus_single_track() {
        let d = Dims::new(8, 8, 8);
        let mut seg = LabelVolume::filled(d, Spacing::isotropic(), 0).unwrap();
        cube(&mut seg, [2, 2, 2], 3, 5);
        let frames = vec![seg; 5];
        let r = track_sequence(&frames, &TrackingConfig::default(), &GraphConfig::default()).unwrap();
        assert_eq!(r.lineage.to_text(), "1 0 4 0\n");
        let relabeled = r.relabel(&frames).unwrap();
        assert!(relabeled.iter().all(|f| f.labels() == vec![1]));
    }

    #[test]
    fn division_gets_parent() {
        // nucleus 2 vanishes at t = 3 and two daughters appear inside its neighborhood
        let d = Dims::new(30, 12, 12);
        let sp = Spacing::isotropic();
        let mut before = LabelVolume::filled(d, sp, 0).unwrap();
        cube(&mut before, [1, 3, 3], 5, 1);
        cube(&mut before, [18, 2, 2], 8, 2);
        let mut after = LabelVolume::filled(d, sp, 0).unwrap();
        cube(&mut after, [1, 3, 3], 5, 1);
        cube(&mut after, [16, 3, 3], 5, 3);
        cube(&mut after, [23, 3, 3], 5, 4);
        let frames = vec![before.clone(), before.clone(), before, after.clone(), after];
        let cfg = TrackingConfig {
            threshold: 0.3,
            ..Default::default()
        };
        let r = track_sequence(&frames, &cfg, &GraphConfig { max_radius: 4, ..Default::default() }).unwrap();
        let text = r.lineage.to_text();
        assert_eq!(text, "1 0 4 0\n2 0 2 0\n3 3 4 2\n4 3 4 2\n");
    }

    #[test]
    fn empty_frame_breaks_tracks() {
        let d = Dims::new(8, 8, 8);
        let mut seg = LabelVolume::filled(d, Spacing::isotropic(), 0).unwrap();
        cube(&mut seg, [2, 2, 2], 3, 1);
        let empty = LabelVolume::filled(d, Spacing::isotropic(), 0).unwrap();
        let frames = vec![seg.clone(), seg.clone(), empty, seg];
        let r = track_sequence(&frames, &TrackingConfig::default(), &GraphConfig::default()).unwrap();
        assert_eq!(r.lineage.to_text(), "1 0 1 0\n2 3 3 0\n");
    }
}
