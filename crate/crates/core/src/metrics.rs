//! SEG, DET and TRA scores against ground truth, plus the overall benchmarks.
//!
//! Result and truth nodes are matched per frame: a truth region `R` is matched
//! by the result region `S` covering strictly more than half of `R`. DET and TRA
//! are normalized acyclic oriented graph matching (AOGM) costs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineage::LineageTable;
use crate::volume::LabelVolume;

/// Per-operation AOGM weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AogmCosts {
    /// Node split.
    pub ns: f64,
    /// False negative node.
    #[serde(rename = "fn")]
    pub fn_: f64,
    /// False positive node.
    pub fp: f64,
    /// Edge to delete.
    pub ed: f64,
    /// Edge to add.
    pub ea: f64,
    /// Edge with wrong semantics.
    pub ec: f64,
}

impl Default for AogmCosts {
    fn default() -> Self {
        Self {
            ns: 5.0,
            fn_: 10.0,
            fp: 1.0,
            ed: 1.0,
            ea: 1.5,
            ec: 1.0,
        }
    }
}

impl AogmCosts {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ns, self.fn_, self.fp, self.ed, self.ea, self.ec];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("AOGM weights must be finite and >= 0".into()));
        }
        if self.fn_ == 0.0 {
            return Err(Error::Config(
                "AOGM false-negative weight must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Node matching of one frame.
#[derive(Debug, Clone, Default)]
struct FrameMatch {
    truth_size: BTreeMap<u32, u64>,
    result_size: BTreeMap<u32, u64>,
    /// truth label -> (result label, overlap)
    matched: BTreeMap<u32, (u32, u64)>,
}

impl FrameMatch {
    fn new(result: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        result.check_same_dims(truth)?;
        let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        let mut truth_size = BTreeMap::new();
        let mut result_size = BTreeMap::new();
        for (&r, &t) in result.data().iter().zip(truth.data()) {
            if t != 0 {
                *truth_size.entry(t).or_insert(0) += 1;
                if r != 0 {
                    *overlap.entry((t, r)).or_insert(0) += 1;
                }
            }
            if r != 0 {
                *result_size.entry(r).or_insert(0) += 1;
            }
        }
        let mut matched = BTreeMap::new();
        for (&(t, r), &n) in &overlap {
            if 2 * n > truth_size[&t] {
                let prev = matched.insert(t, (r, n));
                assert!(prev.is_none(), "strict majority admits one match per truth region");
            }
        }
        Ok(Self {
            truth_size,
            result_size,
            matched,
        })
    }

    /// truth labels matched by each result label
    fn result_to_truth(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut m: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&t, &(r, _)) in &self.matched {
            m.entry(r).or_default().push(t);
        }
        m
    }
}

fn match_frames(result: &[LabelVolume], truth: &[LabelVolume]) -> Result<Vec<FrameMatch>> {
    if result.len() != truth.len() {
        return Err(Error::InvalidParameter(format!(
            "result has {} frames, truth has {}",
            result.len(),
            truth.len()
        )));
    }
    result
        .par_iter()
        .zip(truth)
        .enumerate()
        .map(|(t, (r, g))| FrameMatch::new(r, g).map_err(|e| e.in_frame(t)))
        .collect()
}

/// Mean Jaccard index over all truth regions of all frames; unmatched regions score 0.
pub fn seg_score(result: &[LabelVolume], truth: &[LabelVolume]) -> Result<f64> {
    let matches = match_frames(result, truth)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in &matches {
        for (t, &size) in &m.truth_size {
            count += 1;
            if let Some(&(r, inter)) = m.matched.get(t) {
                let union = size + m.result_size[&r] - inter;
                total += inter as f64 / union as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyTruth);
    }
    Ok(total / count as f64)
}

/// Detection error counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub truth_nodes: usize,
    pub splits: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
}

impl DetectionCounts {
    fn aogm(&self, w: &AogmCosts) -> f64 {
        w.ns * self.splits as f64 + w.fn_ * self.false_negatives as f64 + w.fp * self.false_positives as f64
    }
}

fn detection_counts(matches: &[FrameMatch]) -> DetectionCounts {
    let mut c = DetectionCounts::default();
    for m in matches {
        c.truth_nodes += m.truth_size.len();
        c.false_negatives += m.truth_size.len() - m.matched.len();
        let r2t = m.result_to_truth();
        for (r, _) in &m.result_size {
            match r2t.get(r) {
                None => c.false_positives += 1,
                Some(ts) => c.splits += ts.len() - 1,
            }
        }
    }
    c
}

fn normalized(cost: f64, empty_cost: f64) -> f64 {
    1.0 - cost.min(empty_cost) / empty_cost
}

pub fn detection_errors(result: &[LabelVolume], truth: &[LabelVolume]) -> Result<DetectionCounts> {
    Ok(detection_counts(&match_frames(result, truth)?))
}

/// `1 - min(AOGM-D, AOGM-D_0) / AOGM-D_0`.
pub fn det_score(result: &[LabelVolume], truth: &[LabelVolume], w: &AogmCosts) -> Result<f64> {
    w.validate()?;
    let c = detection_errors(result, truth)?;
    if c.truth_nodes == 0 {
        return Err(Error::EmptyTruth);
    }
    let empty = w.fn_ * c.truth_nodes as f64;
    Ok(normalized(c.aogm(w), empty))
}

/// Masks whose labels are track ids, plus the lineage describing those tracks.
#[derive(Debug, Clone, Copy)]
pub struct TrackedSequence<'a> {
    pub masks: &'a [LabelVolume],
    pub lineage: &'a LineageTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EdgeKind {
    Continuation,
    Division,
}

type Node = (usize, u32);

/// Directed temporal edges of a tracked sequence.
fn tracking_edges(seq: &TrackedSequence<'_>) -> Result<BTreeMap<(Node, Node), EdgeKind>> {
    let present: Vec<BTreeSet<u32>> = seq
        .masks
        .par_iter()
        .map(|m| m.labels().into_iter().collect())
        .collect();
    for (t, labels) in present.iter().enumerate() {
        for &l in labels {
            match seq.lineage.get(l) {
                Some(tr) if tr.is_active(t) => {}
                _ => {
                    return Err(Error::Lineage(format!(
                        "label {l} in frame {t} has no active track"
                    )))
                }
            }
        }
    }
    let frames_of = |id: u32, begin: usize, end: usize| -> Vec<usize> {
        (begin..=end.min(present.len().saturating_sub(1)))
            .filter(|&t| present[t].contains(&id))
            .collect()
    };
    let mut edges = BTreeMap::new();
    for tr in seq.lineage.tracks() {
        let fs = frames_of(tr.id, tr.begin, tr.end);
        for w in fs.windows(2) {
            edges.insert(((w[0], tr.id), (w[1], tr.id)), EdgeKind::Continuation);
        }
        if tr.parent != 0 {
            let p = seq.lineage.get(tr.parent).expect("validated lineage");
            let pf = frames_of(p.id, p.begin, p.end);
            if let (Some(&last), Some(&first)) = (pf.last(), fs.first()) {
                edges.insert(((last, p.id), (first, tr.id)), EdgeKind::Division);
            }
        }
    }
    Ok(edges)
}

/// Full AOGM error counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingCounts {
    pub detection: DetectionCounts,
    pub truth_edges: usize,
    pub edges_to_delete: usize,
    pub edges_to_add: usize,
    pub edges_wrong_semantics: usize,
}

pub fn tracking_errors(result: &TrackedSequence<'_>, truth: &TrackedSequence<'_>) -> Result<TrackingCounts> {
    let matches = match_frames(result.masks, truth.masks)?;
    let detection = detection_counts(&matches);
    let truth_edges = tracking_edges(truth)?;
    let result_edges = tracking_edges(result)?;

    // result node -> matched truth labels (same frame)
    let r2t: Vec<BTreeMap<u32, Vec<u32>>> = matches.iter().map(FrameMatch::result_to_truth).collect();
    let mut used: BTreeSet<(Node, Node)> = BTreeSet::new();
    let mut ed = 0;
    let mut ec = 0;
    for (&((ta, a), (tb, b)), &kind) in &result_edges {
        let from = r2t[ta].get(&a).map(Vec::as_slice).unwrap_or(&[]);
        let to = r2t[tb].get(&b).map(Vec::as_slice).unwrap_or(&[]);
        let mut hit = None;
        'search: for &x in from {
            for &y in to {
                let e = ((ta, x), (tb, y));
                if !used.contains(&e) {
                    if let Some(&k) = truth_edges.get(&e) {
                        hit = Some((e, k));
                        break 'search;
                    }
                }
            }
        }
        match hit {
            Some((e, k)) => {
                used.insert(e);
                if k != kind {
                    ec += 1;
                }
            }
            None => ed += 1,
        }
    }
    Ok(TrackingCounts {
        detection,
        truth_edges: truth_edges.len(),
        edges_to_delete: ed,
        edges_to_add: truth_edges.len() - used.len(),
        edges_wrong_semantics: ec,
    })
}

/// `1 - min(AOGM, AOGM_0) / AOGM_0`, with `AOGM_0` the cost of building the
/// truth graph from nothing.
pub fn tra_score(result: &TrackedSequence<'_>, truth: &TrackedSequence<'_>, w: &AogmCosts) -> Result<f64> {
    w.validate()?;
    let c = tracking_errors(result, truth)?;
    if c.detection.truth_nodes == 0 {
        return Err(Error::EmptyTruth);
    }
    let aogm = c.detection.aogm(w)
        + w.ed * c.edges_to_delete as f64
        + w.ea * c.edges_to_add as f64
        + w.ec * c.edges_wrong_semantics as f64;
    let empty = w.fn_ * c.detection.truth_nodes as f64 + w.ea * c.truth_edges as f64;
    Ok(normalized(aogm, empty))
}

pub fn op_csb(det: f64, seg: f64) -> f64 {
    (det + seg) / 2.0
}

pub fn op_ctb(seg: f64, tra: f64) -> f64 {
    (seg + tra) / 2.0
}

/// `(OP_CSB, OP_CTB)`.
pub fn op_scores(det: f64, seg: f64, tra: f64) -> (f64, f64) {
    (op_csb(det, seg), op_ctb(seg, tra))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub det: f64,
    pub seg: f64,
    pub tra: f64,
    pub op_csb: f64,
    pub op_ctb: f64,
    pub weights: AogmCosts,
}

impl ScoreReport {
    pub fn new(det: f64, seg: f64, tra: f64, weights: AogmCosts) -> Self {
        let (op_csb, op_ctb) = op_scores(det, seg, tra);
        Self {
            det,
            seg,
            tra,
            op_csb,
            op_ctb,
            weights,
        }
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        for (k, v) in [
            ("DET", self.det),
            ("SEG", self.seg),
            ("TRA", self.tra),
            ("OP_CSB", self.op_csb),
            ("OP_CTB", self.op_ctb),
            ("weight.ns", w.ns),
            ("weight.fn", w.fn_),
            ("weight.fp", w.fp),
            ("weight.ed", w.ed),
            ("weight.ea", w.ea),
            ("weight.ec", w.ec),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numeric struct")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineage::Track;
    use crate::volume::{Dims, Spacing};

    fn vol(data: Vec<u32>) -> LabelVolume {
        LabelVolume::new(Dims::new(data.len(), 1, 1), Spacing::isotropic(), data).unwrap()
    }

    fn cube_frame(n: usize, fill: &[([usize; 3], [usize; 3], u32)]) -> LabelVolume {
        let mut v = LabelVolume::filled(Dims::new(n, n, n), Spacing::isotropic(), 0).unwrap();
        for &(lo, hi, l) in fill {
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        v.set(x, y, z, l);
                    }
                }
            }
        }
        v
    }

    #[test]
    fn perfect_segmentation_scores_one() {
        let t = vec![vol(vec![0, 1, 1, 2, 2, 0, 3])];
        assert_eq!(seg_score(&t, &t).unwrap(), 1.0);
        assert_eq!(det_score(&t, &t, &AogmCosts::default()).unwrap(), 1.0);
    }

    #[test]
    fn half_cover_is_not_a_match() {
        let truth = vec![cube_frame(4, &[([0, 0, 0], [2, 2, 2], 1)])];
        let result = vec![cube_frame(4, &[([0, 0, 0], [2, 2, 1], 5)])];
        assert_eq!(seg_score(&result, &truth).unwrap(), 0.0);
    }

    #[test]
    fn oversized_result_jaccard() {
        let truth = vec![cube_frame(4, &[([0, 0, 0], [2, 2, 2], 1)])];
        let result = vec![cube_frame(4, &[([0, 0, 0], [2, 2, 3], 9)])];
        let s = seg_score(&result, &truth).unwrap();
        assert!((s - 8.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn empty_result_scores_zero() {
        let truth = vec![vol(vec![1, 1, 0, 2])];
        let empty = vec![vol(vec![0, 0, 0, 0])];
        assert_eq!(seg_score(&empty, &truth).unwrap(), 0.0);
        assert_eq!(det_score(&empty, &truth, &AogmCosts::default()).unwrap(), 0.0);
    }

    #[test]
    fn split_and_false_positive_counted() {
        // result 7 covers truth 1 and 2 entirely, result 8 hits nothing
        let truth = vec![vol(vec![1, 1, 2, 2, 0, 0])];
        let result = vec![vol(vec![7, 7, 7, 7, 0, 8])];
        let c = detection_errors(&result, &truth).unwrap();
        assert_eq!(
            c,
            DetectionCounts {
                truth_nodes: 2,
                splits: 1,
                false_negatives: 0,
                false_positives: 1
            }
        );
        let w = AogmCosts::default();
        let det = det_score(&result, &truth, &w).unwrap();
        assert!((det - (1.0 - 6.0 / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn dims_mismatch_is_error() {
        let a = vec![vol(vec![1, 1])];
        let b = vec![vol(vec![1, 1, 1])];
        assert!(seg_score(&a, &b).is_err());
        assert!(seg_score(&a, &[]).is_err());
    }

    #[test]
    fn empty_truth_is_error() {
        let z = vec![vol(vec![0, 0])];
        assert!(matches!(seg_score(&z, &z), Err(Error::EmptyTruth)));
    }

    #[test]
    fn op_arithmetic() {
        assert_eq!(op_scores(1.0, 1.0, 1.0), (1.0, 1.0));
        let (csb, ctb) = op_scores(0.5, 0.25, 0.75);
        assert_eq!(csb, 0.375);
        assert_eq!(ctb, 0.5);
    }

    #[test]
    fn wrong_edge_semantics_counted() {
        // truth: one track over two frames; result: parent/child split instead
        let m = vec![vol(vec![1, 1, 0]), vol(vec![1, 1, 0])];
        let truth_lin = LineageTable::new([Track::new(1, 0, 1, 0)]).unwrap();
        let rm = vec![vol(vec![1, 1, 0]), vol(vec![2, 2, 0])];
        let res_lin = LineageTable::new([Track::new(1, 0, 0, 0), Track::new(2, 1, 1, 1)]).unwrap();
        let truth = TrackedSequence { masks: &m, lineage: &truth_lin };
        let result = TrackedSequence { masks: &rm, lineage: &res_lin };
        let c = tracking_errors(&result, &truth).unwrap();
        assert_eq!(c.edges_wrong_semantics, 1);
        assert_eq!(c.edges_to_add, 0);
        assert_eq!(c.edges_to_delete, 0);
        let w = AogmCosts::default();
        let tra = tra_score(&result, &truth, &w).unwrap();
        assert!((tra - (1.0 - 1.0 / 21.5)).abs() < 1e-12);
    }

    #[test]
    fn lineage_mask_mismatch_is_error() {
        let m = vec![vol(vec![1, 0, 3])];
        let lin = LineageTable::new([Track::new(1, 0, 0, 0)]).unwrap();
        let s = TrackedSequence { masks: &m, lineage: &lin };
        assert!(matches!(tra_score(&s, &s, &AogmCosts::default()), Err(Error::Lineage(_))));
    }

    #[test]
    fn report_formats() {
        let r = ScoreReport::new(0.927, 0.705, 0.895, AogmCosts::default());
        let kv = r.to_key_value();
        assert!(kv.contains("OP_CSB=0.816000"));
        assert!(kv.contains("OP_CTB=0.800000"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["weights"]["fn"], 10.0);
    }
}
