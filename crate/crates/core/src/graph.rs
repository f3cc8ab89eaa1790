//! Nuclei adjacency graph with dilation-distance edge weights.
//!
//! The weight of edge `(i, j)` is the smallest number of joint dilations after
//! which nuclei `i` and `j` form one connected component. Nuclei that already
//! touch get weight 1. Pairs that do not merge within `max_radius` dilations
//! are not connected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{count_components, Dilation};
use crate::volume::{Connectivity, Dims, LabelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Dilation cap R, in voxel steps.
    pub max_radius: usize,
    /// Structuring element for dilation and component test.
    pub connectivity: Connectivity,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_radius: 10,
            connectivity: Connectivity::Face6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NucleiGraph {
    vertices: BTreeSet<u32>,
    /// Keyed by `(min, max)` label.
    edges: BTreeMap<(u32, u32), u32>,
    max_radius: usize,
}

fn key(i: u32, j: u32) -> (u32, u32) {
    (i.min(j), i.max(j))
}

impl NucleiGraph {
    pub fn new(vertices: impl IntoIterator<Item = u32>, max_radius: usize) -> Self {
        Self {
            vertices: vertices.into_iter().collect(),
            edges: BTreeMap::new(),
            max_radius,
        }
    }

    pub fn add_edge(&mut self, i: u32, j: u32, weight: u32) -> Result<()> {
        if i == j {
            return Err(Error::InvalidParameter(format!("self edge on {i}")));
        }
        if !self.vertices.contains(&i) {
            return Err(Error::UnknownLabel(i));
        }
        if !self.vertices.contains(&j) {
            return Err(Error::UnknownLabel(j));
        }
        if weight == 0 || weight as usize > self.max_radius {
            return Err(Error::InvalidParameter(format!(
                "edge weight {weight} outside [1, {}]",
                self.max_radius
            )));
        }
        self.edges.insert(key(i, j), weight);
        Ok(())
    }

    pub fn vertices(&self) -> impl Iterator<Item = u32> + '_ {
        self.vertices.iter().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn contains(&self, v: u32) -> bool {
        self.vertices.contains(&v)
    }

    /// Edges as `(i, j, w)` with `i < j`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, i: u32, j: u32) -> Option<u32> {
        self.edges.get(&key(i, j)).copied()
    }

    pub fn max_radius(&self) -> usize {
        self.max_radius
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().filter_map(move |(&(i, j), &w)| {
            if i == v {
                Some((j, w))
            } else if j == v {
                Some((i, w))
            } else {
                None
            }
        })
    }

    pub fn degree(&self, v: u32) -> usize {
        self.neighbors(v).count()
    }

    /// Mean incident edge weight; 0 for an isolated vertex.
    pub fn weighted_degree(&self, v: u32) -> f64 {
        let (n, sum) = self
            .neighbors(v)
            .fold((0usize, 0u64), |(n, s), (_, w)| (n + 1, s + w as u64));
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }

    /// Text dump: a `vertices ...` header, a `max_radius R` line, then `i j w` per edge.
    pub fn to_text(&self) -> String {
        let mut s = String::from("vertices");
        for v in &self.vertices {
            let _ = write!(s, " {v}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "max_radius {}", self.max_radius);
        for (i, j, w) in self.edges() {
            let _ = writeln!(s, "{i} {j} {w}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (n, header) = lines.next().ok_or_else(|| perr(1, "empty graph file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("vertices") {
            return Err(perr(n + 1, "expected 'vertices' header".into()));
        }
        let vertices = parts
            .map(|p| p.parse::<u32>().map_err(|e| perr(n + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let (n, radius) = lines.next().ok_or_else(|| perr(2, "missing max_radius".into()))?;
        let radius = radius
            .strip_prefix("max_radius")
            .and_then(|r| r.trim().parse::<usize>().ok())
            .ok_or_else(|| perr(n + 1, "expected 'max_radius R'".into()))?;
        let mut g = NucleiGraph::new(vertices, radius);
        for (n, line) in lines {
            let f: Vec<u32> = line
                .split_whitespace()
                .map(|p| p.parse::<u32>().map_err(|e| perr(n + 1, e.to_string())))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(perr(n + 1, "expected 'i j w'".into()));
            }
            g.add_edge(f[0], f[1], f[2]).map_err(|e| perr(n + 1, e.to_string()))?;
        }
        Ok(g)
    }
}

/// Inclusive box grown by `margin` and clamped to the volume; returns origin and size.
fn grown_box(lo: [usize; 3], hi: [usize; 3], margin: usize, dims: Dims) -> ([usize; 3], Dims) {
    let n = dims.as_array();
    let mut o = [0; 3];
    let mut e = [0; 3];
    for a in 0..3 {
        o[a] = lo[a].saturating_sub(margin);
        e[a] = (hi[a] + margin).min(n[a] - 1) - o[a] + 1;
    }
    (o, Dims::new(e[0], e[1], e[2]))
}

/// Smallest `d` in `1..=max_radius` for which dilating the union of nuclei `i`
/// and `j` `d` times yields a single connected component.
pub fn min_dilation_distance(
    seg: &LabelVolume,
    i: u32,
    j: u32,
    max_radius: usize,
    conn: Connectivity,
) -> Result<Option<u32>> {
    if i == j {
        return Err(Error::InvalidParameter(format!(
            "dilation distance needs two distinct nuclei, got {i} twice"
        )));
    }
    let boxes = seg.bounding_boxes();
    if max_radius == 0 {
        return if boxes.contains_key(&i) && boxes.contains_key(&j) {
            Ok(None)
        } else {
            Err(Error::UnknownLabel(if boxes.contains_key(&i) { j } else { i }))
        };
    }
    let bi = boxes.get(&i).ok_or(Error::UnknownLabel(i))?;
    let bj = boxes.get(&j).ok_or(Error::UnknownLabel(j))?;
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = bi.0[a].min(bj.0[a]);
        hi[a] = bi.1[a].max(bj.1[a]);
    }
    let (origin, size) = grown_box(lo, hi, max_radius, seg.dims());
    let crop = seg.crop(origin, size)?;
    let mut fg: Vec<bool> = crop.data().iter().map(|&l| l == i || l == j).collect();
    if count_components(&fg, size, conn) == 1 {
        return Ok(Some(1));
    }
    let mut dil = Dilation::new(&fg, size, conn);
    for d in 1..=max_radius {
        dil.step(&mut fg);
        if count_components(&fg, size, conn) == 1 {
            return Ok(Some(d as u32));
        }
    }
    Ok(None)
}

/// Per-nucleus dilation state in a local box.
struct Local {
    label: u32,
    origin: [usize; 3],
    size: Dims,
    mask: Vec<bool>,
    dil: Dilation,
    connected: bool,
}

impl Local {
    #[inline]
    fn has(&self, g: [i64; 3]) -> bool {
        let n = self.size.as_array();
        let mut l = [0usize; 3];
        for a in 0..3 {
            let v = g[a] - self.origin[a] as i64;
            if v < 0 || v >= n[a] as i64 {
                return false;
            }
            l[a] = v as usize;
        }
        self.mask[self.size.index(l[0], l[1], l[2])]
    }

    fn end(&self) -> [usize; 3] {
        let n = self.size.as_array();
        [
            self.origin[0] + n[0],
            self.origin[1] + n[1],
            self.origin[2] + n[2],
        ]
    }
}

/// True when the current masks of `a` and `b` overlap or are `conn`-adjacent.
fn touching(a: &Local, b: &Local, offsets: &[[i32; 3]]) -> bool {
    let (ae, be) = (a.end(), b.end());
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        lo[ax] = a.origin[ax].max(b.origin[ax].saturating_sub(1));
        hi[ax] = ae[ax].min(be[ax] + 1);
        if lo[ax] >= hi[ax] {
            return false;
        }
    }
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let g = [x as i64, y as i64, z as i64];
                if !a.has(g) {
                    continue;
                }
                if b.has(g) {
                    return true;
                }
                for o in offsets {
                    if b.has([g[0] + o[0] as i64, g[1] + o[1] as i64, g[2] + o[2] as i64]) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Builds the adjacency graph of all nuclei in `seg`.
///
/// Each nucleus is dilated once per radius step in its own box and pairs are
/// tested for contact, which for connected nuclei is equivalent to the union
/// becoming one component. Pairs involving a nucleus that is itself split into
/// several components fall back to [`min_dilation_distance`].
pub fn build_graph(seg: &LabelVolume, cfg: &GraphConfig) -> Result<NucleiGraph> {
    let dims = seg.dims();
    let r = cfg.max_radius;
    let boxes = seg.bounding_boxes();
    let mut graph = NucleiGraph::new(boxes.keys().copied(), r);
    if boxes.len() < 2 || r == 0 {
        return Ok(graph);
    }

    let mut locals: Vec<Local> = boxes
        .par_iter()
        .map(|(&label, &(lo, hi))| -> Result<Local> {
            let (origin, size) = grown_box(lo, hi, r + 1, dims);
            let crop = seg.crop(origin, size)?;
            let mask: Vec<bool> = crop.data().iter().map(|&l| l == label).collect();
            let connected = count_components(&mask, size, cfg.connectivity) == 1;
            let dil = Dilation::new(&mask, size, cfg.connectivity);
            Ok(Local {
                label,
                origin,
                size,
                mask,
                dil,
                connected,
            })
        })
        .collect::<Result<_>>()?;

    // candidate pairs: boxes that can meet within r steps
    let reach = |l: &Local, m: &Local| {
        (0..3).all(|a| {
            let (le, me) = (l.end(), m.end());
            l.origin[a] <= me[a] && m.origin[a] <= le[a]
        })
    };
    let mut pending: Vec<(usize, usize)> = Vec::new();
    let mut fallback: Vec<(usize, usize)> = Vec::new();
    for a in 0..locals.len() {
        for b in a + 1..locals.len() {
            if !reach(&locals[a], &locals[b]) {
                continue;
            }
            if locals[a].connected && locals[b].connected {
                pending.push((a, b));
            } else {
                fallback.push((a, b));
            }
        }
    }

    let offsets = cfg.connectivity.offsets();
    let mut found: Vec<(u32, u32, u32)> = Vec::new();
    for d in 1..=r {
        if pending.is_empty() {
            break;
        }
        locals.par_iter_mut().for_each(|l| {
            l.dil.step(&mut l.mask);
        });
        let hits: Vec<bool> = pending
            .par_iter()
            .map(|&(a, b)| touching(&locals[a], &locals[b], &offsets))
            .collect();
        let mut rest = Vec::with_capacity(pending.len());
        for (&(a, b), hit) in pending.iter().zip(hits) {
            if hit {
                found.push((locals[a].label, locals[b].label, d as u32));
            } else {
                rest.push((a, b));
            }
        }
        pending = rest;
    }

    let slow: Vec<Option<(u32, u32, u32)>> = fallback
        .par_iter()
        .map(|&(a, b)| {
            let (i, j) = (locals[a].label, locals[b].label);
            Ok(min_dilation_distance(seg, i, j, r, cfg.connectivity)?.map(|w| (i, j, w)))
        })
        .collect::<Result<_>>()?;
    found.extend(slow.into_iter().flatten());

    for (i, j, w) in found {
        graph.add_edge(i, j, w)?;
    }
    Ok(graph)
}
