//! Scripted synthetic sequences of ellipsoidal nuclei with exact ground truth.
//!
//! Track ids are allocated in script order: initial nuclei get `1..=n`, then
//! each division (sorted by frame, then listing order) allocates two ids for its
//! children. Events may refer to any id allocated by an earlier event.
//!
//! Positions, radii, offsets and velocities are in microns. A nucleus occupies
//! the voxels whose physical position `p` satisfies `Σ((p - c) / r)² ≤ 1`, and
//! adds `intensity · (1 - ρ²/2)` on top of the background there.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::SequenceLayout;
use crate::error::{Error, Result};
use crate::lineage::{LineageTable, Track};
use crate::volume::{Dims, Grid, LabelVolume, Spacing, Volume};

/// Directory of raw frames inside a generated CTC tree.
pub const INPUT_DIR: &str = "01";
/// Directory of ground truth inside a generated CTC tree.
pub const TRUTH_DIR: &str = "01_GT";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleusSpec {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f32,
    #[serde(default)]
    pub velocity: [f64; 3],
}

/// Parent present up to `frame - 1`, children from `frame` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivisionSpec {
    pub frame: usize,
    pub parent: u32,
    /// Child centers relative to where the parent would be at `frame`.
    pub offsets: [[f64; 3]; 2],
    /// Child radii; defaults to the parent radii over the cube root of 2.
    #[serde(default)]
    pub radii: Option<[[f64; 3]; 2]>,
}

/// Nucleus present up to `frame - 1` and gone afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApoptosisSpec {
    pub frame: usize,
    pub nucleus: u32,
}

fn default_spacing() -> [f64; 3] {
    Spacing::default().as_array()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub seed: u64,
    pub frames: usize,
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub background: f32,
    /// Standard deviation (Gaussian) or half-width (uniform) of additive noise.
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    /// Global displacement per frame, added to every nucleus.
    #[serde(default)]
    pub drift: [f64; 3],
    pub nuclei: Vec<NucleusSpec>,
    #[serde(default)]
    pub divisions: Vec<DivisionSpec>,
    #[serde(default)]
    pub apoptosis: Vec<ApoptosisSpec>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Script(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub intensity: Vec<Volume>,
    /// Labels equal track ids.
    pub truth: Vec<LabelVolume>,
    pub lineage: LineageTable,
}

#[derive(Debug, Clone)]
struct Plan {
    track: Track,
    /// Position at `track.begin`, without drift.
    origin: [f64; 3],
    radii: [f64; 3],
    intensity: f32,
    velocity: [f64; 3],
}

impl Plan {
    fn center(&self, t: usize, drift: [f64; 3]) -> [f64; 3] {
        let dt = t as f64 - self.track.begin as f64;
        std::array::from_fn(|a| self.origin[a] + self.velocity[a] * dt + drift[a] * t as f64)
    }
}

fn validate(script: &Script) -> Result<(Dims, Spacing)> {
    let bad = |m: String| Err(Error::Script(m));
    if script.frames == 0 {
        return bad("frames must be >= 1".into());
    }
    let [nx, ny, nz] = script.dims;
    let dims = Dims::new(nx, ny, nz);
    if dims.len() == 0 {
        return bad(format!("dims must be positive, got {:?}", script.dims));
    }
    let [sx, sy, sz] = script.spacing;
    let spacing = Spacing::new(sx, sy, sz).map_err(|e| Error::Script(e.to_string()))?;
    if !(script.noise >= 0.0 && script.noise.is_finite()) {
        return bad("noise must be finite and >= 0".into());
    }
    if !(0.0..=1.0).contains(&script.background) {
        return bad("background must lie in [0, 1]".into());
    }
    for (i, n) in script.nuclei.iter().enumerate() {
        if n.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad(format!("nucleus {} has non-positive radii", i + 1));
        }
        if !(n.intensity > 0.0 && n.intensity <= 1.0) {
            return bad(format!("nucleus {} intensity must lie in (0, 1]", i + 1));
        }
    }
    Ok((dims, spacing))
}

#[derive(Debug, Clone, Copy)]
enum Event<'a> {
    Division(&'a DivisionSpec),
    Apoptosis(&'a ApoptosisSpec),
}

fn plan_tracks(script: &Script) -> Result<BTreeMap<u32, Plan>> {
    let last = script.frames - 1;
    let mut plans: BTreeMap<u32, Plan> = BTreeMap::new();
    for (i, n) in script.nuclei.iter().enumerate() {
        let id = i as u32 + 1;
        plans.insert(
            id,
            Plan {
                track: Track::new(id, 0, last, 0),
                origin: n.center,
                radii: n.radii,
                intensity: n.intensity,
                velocity: n.velocity,
            },
        );
    }
    let mut events: Vec<(usize, usize, usize, Event)> = Vec::new();
    for (i, d) in script.divisions.iter().enumerate() {
        events.push((d.frame, 0, i, Event::Division(d)));
    }
    for (i, a) in script.apoptosis.iter().enumerate() {
        events.push((a.frame, 1, i, Event::Apoptosis(a)));
    }
    events.sort_by_key(|&(f, k, i, _)| (f, k, i));

    let mut next_id = script.nuclei.len() as u32 + 1;
    let mut ended: Vec<u32> = Vec::new();
    for (frame, _, _, ev) in events {
        let (id, what) = match ev {
            Event::Division(d) => (d.parent, "division"),
            Event::Apoptosis(a) => (a.nucleus, "apoptosis"),
        };
        if frame == 0 || frame > last {
            return Err(Error::Script(format!(
                "{what} of nucleus {id} at frame {frame} outside 1..={last}"
            )));
        }
        let plan = plans
            .get_mut(&id)
            .ok_or_else(|| Error::Script(format!("{what} refers to unknown nucleus {id}")))?;
        if ended.contains(&id) {
            return Err(Error::Script(format!("{what} of nucleus {id} after it already ended")));
        }
        if frame <= plan.track.begin {
            return Err(Error::Script(format!(
                "{what} of nucleus {id} at frame {frame} before it appears"
            )));
        }
        plan.track.end = frame - 1;
        ended.push(id);
        if let Event::Division(d) = ev {
            let parent = plan.clone();
            let base: [f64; 3] = std::array::from_fn(|a| {
                parent.origin[a] + parent.velocity[a] * (frame - parent.track.begin) as f64
            });
            let default = parent.radii.map(|r| r / 2f64.cbrt());
            let radii = d.radii.unwrap_or([default, default]);
            for c in 0..2 {
                plans.insert(
                    next_id,
                    Plan {
                        track: Track::new(next_id, frame, last, id),
                        origin: std::array::from_fn(|a| base[a] + d.offsets[c][a]),
                        radii: radii[c],
                        intensity: parent.intensity,
                        velocity: parent.velocity,
                    },
                );
                next_id += 1;
            }
        }
    }
    Ok(plans)
}

fn render_frame(
    t: usize,
    script: &Script,
    plans: &BTreeMap<u32, Plan>,
    dims: Dims,
    spacing: Spacing,
) -> Result<(Volume, LabelVolume)> {
    let mut labels = vec![0u32; dims.len()];
    let mut values = vec![script.background; dims.len()];
    let s = spacing.as_array();
    let n = dims.as_array();
    for plan in plans.values().filter(|p| p.track.is_active(t)) {
        let c = plan.center(t, script.drift);
        let r = plan.radii;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let l = ((c[a] - r[a]) / s[a]).ceil().max(0.0);
            let h = ((c[a] + r[a]) / s[a]).floor().min(n[a] as f64 - 1.0);
            if h < l {
                empty = true;
            }
            lo[a] = l as usize;
            hi[a] = h.max(0.0) as usize;
        }
        let mut covered = 0usize;
        if !empty {
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let p = [x, y, z];
                        let rho2: f64 = (0..3)
                            .map(|a| ((p[a] as f64 * s[a] - c[a]) / r[a]).powi(2))
                            .sum();
                        if rho2 > 1.0 {
                            continue;
                        }
                        let i = dims.index(x, y, z);
                        if labels[i] != 0 {
                            return Err(Error::Script(format!(
                                "nuclei {} and {} overlap in frame {t}",
                                labels[i], plan.track.id
                            )));
                        }
                        labels[i] = plan.track.id;
                        values[i] += plan.intensity * (1.0 - 0.5 * rho2 as f32);
                        covered += 1;
                    }
                }
            }
        }
        if covered == 0 {
            return Err(Error::Script(format!(
                "nucleus {} covers no voxel in frame {t}",
                plan.track.id
            )));
        }
    }

    if script.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
        rng.set_stream(t as u64);
        match script.noise_kind {
            NoiseKind::Gaussian => {
                let normal = Normal::new(0.0f32, script.noise)
                    .map_err(|e| Error::Script(e.to_string()))?;
                for v in &mut values {
                    *v += normal.sample(&mut rng);
                }
            }
            NoiseKind::Uniform => {
                for v in &mut values {
                    *v += rng.random_range(-script.noise..=script.noise);
                }
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((
        Grid::new(dims, spacing, values)?,
        Grid::new(dims, spacing, labels)?,
    ))
}

/// Renders the script into intensity frames, truth masks and the truth lineage.
pub fn generate_sequence(script: &Script) -> Result<SyntheticSequence> {
    let (dims, spacing) = validate(script)?;
    let plans = plan_tracks(script)?;
    let lineage = LineageTable::new(plans.values().map(|p| p.track))?;
    let (intensity, truth) = (0..script.frames)
        .into_par_iter()
        .map(|t| render_frame(t, script, &plans, dims, spacing))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(SyntheticSequence {
        intensity,
        truth,
        lineage,
    })
}

impl SyntheticSequence {
    /// Writes `01/tNNN.tif`, `01_GT/TRA/man_trackNNN.tif` with `man_track.txt`,
    /// `01_GT/SEG/man_segNNN.tif`, and the script as `synth.toml`.
    pub fn write_ctc(&self, script: &Script, root: &Path) -> Result<()> {
        SequenceLayout::input(root.join(INPUT_DIR)).write_volumes(&self.intensity)?;
        let tra = SequenceLayout::truth_track(root.join(TRUTH_DIR).join("TRA"));
        tra.write_labels(&self.truth)?;
        tra.write_lineage(&self.lineage)?;
        SequenceLayout::truth_seg(root.join(TRUTH_DIR).join("SEG")).write_labels(&self.truth)?;
        let meta = root.join("synth.toml");
        std::fs::write(&meta, script.to_toml()).map_err(|e| Error::io(&meta, e))
    }
}

/// Knobs for [`random_script`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomScriptOptions {
    pub frames: usize,
    pub nuclei: std::ops::RangeInclusive<usize>,
    pub divisions: usize,
    pub apoptoses: usize,
    pub noise: f32,
}

impl Default for RandomScriptOptions {
    fn default() -> Self {
        Self {
            frames: 5,
            nuclei: 5..=20,
            divisions: 1,
            apoptoses: 1,
            noise: 0.0,
        }
    }
}

const CELL: f64 = 24.0;
const GRID: [usize; 2] = [5, 4];
const RANDOM_SPACING: [f64; 3] = [1.0, 1.0, 2.0];

/// A valid random script: static nuclei on a jittered grid, no two with the
/// same voxel count in any frame.
pub fn random_script(seed: u64, opts: &RandomScriptOptions) -> Script {
    assert!(*opts.nuclei.end() <= GRID[0] * GRID[1], "at most 20 nuclei");
    assert!(opts.frames >= 2 || opts.divisions + opts.apoptoses == 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let script = random_candidate(&mut rng, seed, opts);
        let Ok(seq) = generate_sequence(&script) else { continue };
        let distinct = seq.truth.iter().all(|f| {
            let mut sizes: Vec<usize> = f.label_sizes().into_values().collect();
            let n = sizes.len();
            sizes.sort_unstable();
            sizes.dedup();
            sizes.len() == n
        });
        if distinct {
            return script;
        }
    }
}

fn random_candidate(rng: &mut ChaCha8Rng, seed: u64, opts: &RandomScriptOptions) -> Script {
    let n = rng.random_range(opts.nuclei.clone());
    let mut cells: Vec<usize> = (0..GRID[0] * GRID[1]).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let nz = 12;
    let zc = nz as f64 * RANDOM_SPACING[2] / 2.0;
    let nuclei: Vec<NucleusSpec> = cells[..n]
        .iter()
        .map(|&cell| {
            let (cx, cy) = ((cell % GRID[0]) as f64, (cell / GRID[0]) as f64);
            let r = rng.random_range(3.0..5.0);
            NucleusSpec {
                center: [
                    (cx + 0.5) * CELL + rng.random_range(-1.0..1.0),
                    (cy + 0.5) * CELL + rng.random_range(-1.0..1.0),
                    zc + rng.random_range(-1.0..1.0),
                ],
                radii: [r, r * rng.random_range(0.8..1.2), rng.random_range(5.0..8.0)],
                intensity: rng.random_range(0.6..0.9),
                velocity: [0.0; 3],
            }
        })
        .collect();

    let mut ids: Vec<u32> = (1..=n as u32).collect();
    let mut divisions = Vec::new();
    for _ in 0..opts.divisions.min(ids.len()) {
        let parent = ids.remove(rng.random_range(0..ids.len()));
        let p = &nuclei[parent as usize - 1];
        let r1 = p.radii.map(|r| r * 0.85);
        let r2 = p.radii.map(|r| r * 0.7);
        let d = 0.5 * (r1[0] + r2[0]) + 1.5;
        divisions.push(DivisionSpec {
            frame: rng.random_range(1..opts.frames),
            parent,
            offsets: [[-d, 0.0, 0.0], [d, 0.0, 0.0]],
            radii: Some([r1, r2]),
        });
    }
    let mut apoptosis = Vec::new();
    for _ in 0..opts.apoptoses.min(ids.len()) {
        let nucleus = ids.remove(rng.random_range(0..ids.len()));
        apoptosis.push(ApoptosisSpec {
            frame: rng.random_range(1..opts.frames),
            nucleus,
        });
    }
    Script {
        seed,
        frames: opts.frames,
        dims: [
            (GRID[0] as f64 * CELL) as usize,
            (GRID[1] as f64 * CELL) as usize,
            nz,
        ],
        spacing: RANDOM_SPACING,
        background: 0.05,
        noise: opts.noise,
        noise_kind: NoiseKind::Gaussian,
        drift: [0.0; 3],
        nuclei,
        divisions,
        apoptosis,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{det_score, seg_score, tra_score, AogmCosts, TrackedSequence};

    fn one_nucleus(frames: usize) -> Script {
        Script::from_toml(&format!(
            r#"
            frames = {frames}
            dims = [16, 16, 8]
            spacing = [1.0, 1.0, 1.0]
            [[nuclei]]
            center = [8.0, 8.0, 4.0]
            radii = [4.0, 4.0, 2.5]
            intensity = 0.8
            "#
        ))
        .unwrap()
    }

    #[test]
    fn static_nucleus_single_track() {
        let seq = generate_sequence(&one_nucleus(3)).unwrap();
        assert_eq!(seq.lineage.to_text(), "1 0 2 0\n");
        assert_eq!(seq.truth[0], seq.truth[2]);
        assert!(seq.truth[0].data()[seq.truth[0].dims().index(8, 8, 4)] == 1);
        // zero noise: center voxel is background + full amplitude
        let c = seq.intensity[1].get(8, 8, 4);
        assert!((c - 0.8).abs() < 1e-6);
    }

    #[test]
    fn scripted_division_children() {
        let mut s = one_nucleus(4);
        s.divisions.push(DivisionSpec {
            frame: 2,
            parent: 1,
            offsets: [[-4.0, 0.0, 0.0], [4.0, 0.0, 0.0]],
            radii: Some([[2.5, 2.5, 2.0], [2.0, 2.0, 2.0]]),
        });
        let seq = generate_sequence(&s).unwrap();
        assert_eq!(seq.lineage.to_text(), "1 0 1 0\n2 2 3 1\n3 2 3 1\n");
        assert_eq!(seq.truth[2].labels(), vec![2, 3]);
    }

    #[test]
    fn apoptosis_ends_track() {
        let mut s = one_nucleus(4);
        s.apoptosis.push(ApoptosisSpec { frame: 3, nucleus: 1 });
        let seq = generate_sequence(&s).unwrap();
        assert_eq!(seq.lineage.to_text(), "1 0 2 0\n");
        assert_eq!(seq.truth[3].foreground_count(), 0);
    }

    #[test]
    fn overlap_rejected() {
        let mut s = one_nucleus(2);
        let mut other = s.nuclei[0].clone();
        other.center[0] += 2.0;
        s.nuclei.push(other);
        assert!(matches!(generate_sequence(&s), Err(Error::Script(_))));
    }

    #[test]
    fn bad_events_rejected() {
        let mut s = one_nucleus(3);
        s.apoptosis.push(ApoptosisSpec { frame: 0, nucleus: 1 });
        assert!(generate_sequence(&s).is_err());
        let mut s = one_nucleus(3);
        s.apoptosis.push(ApoptosisSpec { frame: 1, nucleus: 9 });
        assert!(generate_sequence(&s).is_err());
        let mut s = one_nucleus(3);
        s.apoptosis.push(ApoptosisSpec { frame: 1, nucleus: 1 });
        s.apoptosis.push(ApoptosisSpec { frame: 2, nucleus: 1 });
        assert!(generate_sequence(&s).is_err());
    }

    #[test]
    fn nucleus_outside_volume_rejected() {
        let mut s = one_nucleus(2);
        s.nuclei[0].velocity = [50.0, 0.0, 0.0];
        assert!(matches!(generate_sequence(&s), Err(Error::Script(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let mut s = one_nucleus(2);
        s.noise = 0.1;
        s.seed = 3;
        let a = generate_sequence(&s).unwrap();
        assert_eq!(a, generate_sequence(&s).unwrap());
        s.seed = 4;
        assert_ne!(a.intensity, generate_sequence(&s).unwrap().intensity);
        s.noise_kind = NoiseKind::Uniform;
        let u = generate_sequence(&s).unwrap();
        assert!(u.intensity[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn drift_moves_everything() {
        let mut s = one_nucleus(2);
        s.drift = [2.0, 0.0, 0.0];
        let seq = generate_sequence(&s).unwrap();
        assert_eq!(seq.truth[1].get(10, 8, 4), 1);
        assert_eq!(seq.truth[1].get(4, 8, 4), 0);
    }

    #[test]
    fn truth_scores_perfectly_against_itself() {
        let s = random_script(11, &RandomScriptOptions::default());
        let seq = generate_sequence(&s).unwrap();
        let w = AogmCosts::default();
        assert_eq!(seg_score(&seq.truth, &seq.truth).unwrap(), 1.0);
        assert_eq!(det_score(&seq.truth, &seq.truth, &w).unwrap(), 1.0);
        let t = TrackedSequence {
            masks: &seq.truth,
            lineage: &seq.lineage,
        };
        assert_eq!(tra_score(&t, &t, &w).unwrap(), 1.0);
    }

    #[test]
    fn random_script_is_deterministic_and_eventful() {
        let o = RandomScriptOptions::default();
        let a = random_script(5, &o);
        assert_eq!(a, random_script(5, &o));
        assert_eq!(a.divisions.len(), 1);
        assert_eq!(a.apoptosis.len(), 1);
        assert!((5..=20).contains(&a.nuclei.len()));
    }

    #[test]
    fn script_toml_round_trip() {
        let s = random_script(2, &RandomScriptOptions::default());
        assert_eq!(Script::from_toml(&s.to_toml()).unwrap(), s);
        assert!(Script::from_toml("frames = 1\nbogus = 2").is_err());
    }

    #[test]
    fn write_ctc_tree() {
        let dir = tempfile::tempdir().unwrap();
        let s = one_nucleus(2);
        let seq = generate_sequence(&s).unwrap();
        seq.write_ctc(&s, dir.path()).unwrap();
        let tra = SequenceLayout::truth_track(dir.path().join(TRUTH_DIR).join("TRA"));
        assert_eq!(tra.read_lineage().unwrap(), seq.lineage);
        assert_eq!(tra.read_labels(Spacing::isotropic()).unwrap().len(), 2);
        assert_eq!(
            SequenceLayout::input(dir.path().join(INPUT_DIR)).frame_count().unwrap(),
            2
        );
    }
}
