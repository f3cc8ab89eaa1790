//! End-to-end stages: segmentation, tracking, evaluation and synthesis over
//! CTC directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{PipelineConfig, ProbabilitySource};
use crate::correction::{cluster_correlation, correct_boundaries, dropped_nuclei, CorrelationTable};
use crate::ctc::{self, SequenceLayout};
use crate::detection::{blob_probability_map, extract_seeds, SeedSet};
use crate::error::{Error, Result};
use crate::lineage::LineageTable;
use crate::metrics::{det_score, seg_score, tra_score, ScoreReport, TrackedSequence};
use crate::slic::slic;
use crate::synth::{generate_sequence, Script, SyntheticSequence};
use crate::tracking::{track_sequence, TrackingResult};
use crate::volume::{LabelVolume, Volume};
use crate::watershed::watershed;

/// Every stage product of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSegmentation {
    pub probability: Volume,
    pub seeds: SeedSet,
    pub watershed: LabelVolume,
    /// Absent when correction is disabled or the frame has no nuclei.
    pub supervoxels: Option<LabelVolume>,
    pub correlation: Option<CorrelationTable>,
    pub segmentation: LabelVolume,
}

pub fn probability_map(intensity: &Volume, cfg: &PipelineConfig) -> Result<Volume> {
    blob_probability_map(intensity, &cfg.detection.scales)
}

/// Supervoxels with more labels than `regions`, raising `k` as needed.
fn oversegment(intensity: &Volume, regions: usize, cfg: &PipelineConfig) -> Result<LabelVolume> {
    let mut slic_cfg = cfg.slic;
    slic_cfg.k = slic_cfg.k.min(intensity.len());
    loop {
        let sv = slic(intensity, &slic_cfg)?;
        let count = sv.labels().len();
        if count > regions || slic_cfg.k >= intensity.len() {
            if count <= regions {
                log::warn!("only {count} supervoxels for {regions} nuclei even at k = {}", slic_cfg.k);
            }
            return Ok(sv);
        }
        let k = (2 * slic_cfg.k).max(2 * regions + 1).min(intensity.len());
        log::info!("{count} supervoxels for {regions} nuclei; raising k from {} to {k}", slic_cfg.k);
        slic_cfg.k = k;
    }
}

/// Detection, watershed, supervoxels and boundary correction on one frame.
///
/// A frame without any foreground seed yields an empty segmentation.
pub fn segment_frame(
    intensity: &Volume,
    probability: Volume,
    cfg: &PipelineConfig,
) -> Result<FrameSegmentation> {
    intensity.check_same_dims(&probability)?;
    let t0 = Instant::now();
    let det = &cfg.detection;
    let seeds = extract_seeds(&probability, det.min_score, det.min_separation)?;
    let t1 = Instant::now();
    let ws = match watershed(&probability, &seeds, &cfg.watershed) {
        Ok(ws) => ws,
        Err(Error::NoNuclei(n)) => {
            log::warn!("no nuclei detected ({n} seeds, none in foreground)");
            let empty = intensity.with_data(vec![0u32; intensity.len()])?;
            return Ok(FrameSegmentation {
                probability,
                seeds,
                watershed: empty.clone(),
                supervoxels: None,
                correlation: None,
                segmentation: empty,
            });
        }
        Err(e) => return Err(e),
    };
    let t2 = Instant::now();
    let regions = ws.labels().len();
    let (supervoxels, correlation, segmentation) = if cfg.correction.enabled {
        let sv = oversegment(intensity, regions, cfg)?;
        let table = cluster_correlation(&sv, &ws)?;
        let seg = correct_boundaries(&sv, &ws, &table)?;
        (Some(sv), Some(table), seg)
    } else {
        (None, None, ws.clone())
    };
    let t3 = Instant::now();
    log::info!(
        "{} seeds, {regions} watershed nuclei, {} final nuclei ({} dropped); detection {:.2?}, watershed {:.2?}, correction {:.2?}",
        seeds.len(),
        segmentation.labels().len(),
        dropped_nuclei(&ws, &segmentation).len(),
        t1 - t0,
        t2 - t1,
        t3 - t2,
    );
    Ok(FrameSegmentation {
        probability,
        seeds,
        watershed: ws,
        supervoxels,
        correlation,
        segmentation,
    })
}

/// Segments every frame; `probability` supplies external maps when present.
pub fn segment_sequence(
    intensity: &[Volume],
    probability: Option<Vec<Volume>>,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameSegmentation>> {
    cfg.validate()?;
    let maps: Vec<Option<Volume>> = match probability {
        Some(p) if p.len() != intensity.len() => {
            return Err(Error::InvalidParameter(format!(
                "{} probability maps for {} frames",
                p.len(),
                intensity.len()
            )))
        }
        Some(p) => p.into_iter().map(Some).collect(),
        None => vec![None; intensity.len()],
    };
    intensity
        .par_iter()
        .zip(maps)
        .enumerate()
        .map(|(t, (img, prob))| {
            let prob = match prob {
                Some(p) => p,
                None => probability_map(img, cfg)?,
            };
            segment_frame(img, prob, cfg)
        }
        .map_err(|e| e.in_frame(t)))
        .collect()
}

fn write_intermediates(dir: &Path, frames: &[FrameSegmentation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames.par_iter().enumerate().try_for_each(|(t, f)| {
        ctc::write_volume(&dir.join(format!("prob{t:03}.tif")), &f.probability)?;
        ctc::write_labels(&dir.join(format!("ws{t:03}.tif")), &f.watershed)?;
        if let Some(sv) = &f.supervoxels {
            ctc::write_labels(&dir.join(format!("sv{t:03}.tif")), sv)?;
        }
        if let Some(k) = &f.correlation {
            let p = dir.join(format!("corr{t:03}.txt"));
            std::fs::write(&p, k.to_text()).map_err(|e| Error::io(&p, e))?;
        }
        let mut seeds = String::from("# x y z score\n");
        for s in f.seeds.seeds() {
            let [x, y, z] = s.coords;
            seeds.push_str(&format!("{x} {y} {z} {}\n", s.score));
        }
        let p = dir.join(format!("seeds{t:03}.txt"));
        std::fs::write(&p, seeds).map_err(|e| Error::io(&p, e))
    })
}

/// Segments `tNNN.tif` frames from `input`, writing `maskNNN.tif` to `output`.
///
/// With `keep_intermediates`, stage products go to `output/intermediate`.
pub fn run_segment(
    input: &Path,
    output: &Path,
    cfg: &PipelineConfig,
    keep_intermediates: bool,
) -> Result<Vec<LabelVolume>> {
    cfg.validate()?;
    let spacing = cfg.spacing()?;
    let intensity = SequenceLayout::input(input).read_volumes(spacing)?;
    let probability = match cfg.detection.source {
        ProbabilitySource::Blob => None,
        ProbabilitySource::File => {
            let layout = SequenceLayout::new(input, &cfg.detection.probability_prefix, "");
            let maps = layout.read_volumes(spacing)?;
            for (t, m) in maps.iter().enumerate() {
                if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::ProbabilityRange(*v).in_frame(t));
                }
            }
            Some(maps)
        }
    };
    let frames = segment_sequence(&intensity, probability, cfg)?;
    let masks: Vec<LabelVolume> = frames.iter().map(|f| f.segmentation.clone()).collect();
    SequenceLayout::result(output).write_labels(&masks)?;
    if keep_intermediates {
        write_intermediates(&output.join("intermediate"), &frames)?;
    }
    cfg.write_resolved(output)?;
    Ok(masks)
}

/// Tracks segmented masks in memory.
pub fn track(masks: &[LabelVolume], cfg: &PipelineConfig) -> Result<TrackingResult> {
    cfg.validate()?;
    track_sequence(masks, &cfg.tracking, &cfg.graph)
}

/// Tracks `maskNNN.tif` in `input`, writing relabeled masks and `res_track.txt` to `output`.
pub fn run_track(input: &Path, output: &Path, cfg: &PipelineConfig) -> Result<LineageTable> {
    cfg.validate()?;
    let masks = SequenceLayout::result(input).read_labels(cfg.spacing()?)?;
    let result = track(&masks, cfg)?;
    let relabeled = result.relabel(&masks)?;
    let out = SequenceLayout::result(output);
    out.write_labels(&relabeled)?;
    out.write_lineage(&result.lineage)?;
    cfg.write_resolved(output)?;
    Ok(result.lineage)
}

/// Scores a result directory (`maskNNN.tif`, `res_track.txt`) against a truth
/// directory holding `TRA/` and optionally `SEG/`.
///
/// SEG uses the annotated `SEG/` frames when present, the `TRA/` masks otherwise.
pub fn evaluate(result: &Path, truth: &Path, cfg: &PipelineConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let spacing = cfg.spacing()?;
    let res = SequenceLayout::result(result);
    let tra = SequenceLayout::truth_track(truth.join("TRA"));
    let res_masks = res.read_labels(spacing)?;
    let res_lineage = res.read_lineage()?;
    let tra_masks = tra.read_labels(spacing)?;
    let tra_lineage = tra.read_lineage()?;
    if res_masks.len() != tra_masks.len() {
        return Err(Error::InvalidParameter(format!(
            "result has {} frames, truth has {}",
            res_masks.len(),
            tra_masks.len()
        )));
    }

    let seg_dir = truth.join("SEG");
    let seg = if seg_dir.is_dir() {
        let annotated = SequenceLayout::truth_seg(&seg_dir).read_labels_sparse(spacing)?;
        let mut picked = Vec::with_capacity(annotated.len());
        let mut truth_frames = Vec::with_capacity(annotated.len());
        for (t, v) in annotated {
            let r = res_masks.get(t).ok_or(Error::MissingFrame {
                dir: result.to_path_buf(),
                index: t,
            })?;
            picked.push(r.clone());
            truth_frames.push(v);
        }
        seg_score(&picked, &truth_frames)?
    } else {
        seg_score(&res_masks, &tra_masks)?
    };
    let det = det_score(&res_masks, &tra_masks, &cfg.metrics)?;
    let tra = tra_score(
        &TrackedSequence {
            masks: &res_masks,
            lineage: &res_lineage,
        },
        &TrackedSequence {
            masks: &tra_masks,
            lineage: &tra_lineage,
        },
        &cfg.metrics,
    )?;
    Ok(ScoreReport::new(det, seg, tra, cfg.metrics))
}

/// Writes `scores.txt` and `scores.json` into `dir`.
pub fn write_report(report: &ScoreReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("scores.txt", report.to_key_value()), ("scores.json", report.to_json())] {
        let p: PathBuf = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Generates the scripted sequence and writes it as a CTC tree under `output`.
pub fn run_synth(script: &Script, output: &Path) -> Result<SyntheticSequence> {
    let seq = generate_sequence(script)?;
    seq.write_ctc(script, output)?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_script, RandomScriptOptions, INPUT_DIR, TRUTH_DIR};

    fn small_cfg() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.spacing = [1.0, 1.0, 2.0];
        c.slic.k = 400;
        c.graph.max_radius = 4;
        c
    }

    fn script(frames: usize) -> Script {
        let mut s = random_script(
            1,
            &RandomScriptOptions {
                frames,
                nuclei: 5..=6,
                divisions: 0,
                apoptoses: 0,
                noise: 0.02,
            },
        );
        s.seed = 9;
        s
    }

    #[test]
    fn bypass_returns_watershed_labels() {
        let seq = generate_sequence(&script(1)).unwrap();
        let mut cfg = small_cfg();
        cfg.correction.enabled = false;
        let out = segment_sequence(&seq.intensity, None, &cfg).unwrap();
        assert_eq!(out[0].segmentation, out[0].watershed);
        assert!(out[0].supervoxels.is_none());
    }

    #[test]
    fn corrected_output_is_union_of_supervoxels() {
        let seq = generate_sequence(&script(1)).unwrap();
        let out = segment_sequence(&seq.intensity, None, &small_cfg()).unwrap();
        let f = &out[0];
        let sv = f.supervoxels.as_ref().unwrap();
        assert!(sv.labels().len() > f.watershed.labels().len());
        let mut owner = std::collections::BTreeMap::new();
        for (&s, &l) in sv.data().iter().zip(f.segmentation.data()) {
            assert_eq!(*owner.entry(s).or_insert(l), l);
        }
    }

    #[test]
    fn empty_frame_segments_to_background() {
        let v = Volume::filled(crate::volume::Dims::new(8, 8, 4), crate::volume::Spacing::isotropic(), 0.2)
            .unwrap();
        let out = segment_sequence(std::slice::from_ref(&v), None, &small_cfg()).unwrap();
        assert_eq!(out[0].segmentation.foreground_count(), 0);
    }

    #[test]
    fn segment_track_evaluate_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = script(3);
        run_synth(&s, dir.path()).unwrap();
        let cfg = small_cfg();
        let seg_out = dir.path().join("seg");
        let masks = run_segment(&dir.path().join(INPUT_DIR), &seg_out, &cfg, true).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(seg_out.join("config.resolved.toml").is_file());
        assert!(seg_out.join("intermediate").join("ws000.tif").is_file());
        assert!(seg_out.join("intermediate").join("corr002.txt").is_file());

        let res = dir.path().join("res");
        run_track(&seg_out, &res, &cfg).unwrap();
        let report = evaluate(&res, &dir.path().join(TRUTH_DIR), &cfg).unwrap();
        for v in [report.det, report.seg, report.tra] {
            assert!((0.0..=1.0).contains(&v));
        }

        // truth against itself
        let truth = dir.path().join(TRUTH_DIR);
        let self_res = dir.path().join("self");
        let tra = SequenceLayout::truth_track(truth.join("TRA"));
        let out = SequenceLayout::result(&self_res);
        out.write_labels(&tra.read_labels(cfg.spacing().unwrap()).unwrap()).unwrap();
        out.write_lineage(&tra.read_lineage().unwrap()).unwrap();
        let r = evaluate(&self_res, &truth, &cfg).unwrap();
        assert_eq!((r.det, r.seg, r.tra), (1.0, 1.0, 1.0));
    }
}
