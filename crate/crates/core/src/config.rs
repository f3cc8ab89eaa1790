//! Pipeline configuration: every tunable of every stage, read from TOML.
//!
//! Missing keys take their defaults, unknown keys are rejected. The resolved
//! configuration is written next to every run's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::metrics::AogmCosts;
use crate::slic::SlicConfig;
use crate::tracking::TrackingConfig;
use crate::volume::Spacing;
use crate::watershed::WatershedConfig;

/// Where the nuclei probability map comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilitySource {
    /// Multiscale blob response of the intensity frame.
    #[default]
    Blob,
    /// Precomputed stacks next to the input frames.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub source: ProbabilitySource,
    /// File name prefix of precomputed maps, e.g. `prob000.tif`.
    pub probability_prefix: String,
    /// Expected nucleus radii in microns.
    pub scales: Vec<f64>,
    pub min_score: f32,
    /// Minimum physical distance between seeds, in microns.
    pub min_separation: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            source: ProbabilitySource::Blob,
            probability_prefix: "prob".into(),
            scales: vec![2.0, 3.0, 4.0],
            min_score: 0.1,
            min_separation: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// When false the watershed labels are the final segmentation.
    pub enabled: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Voxel size in microns, x y z.
    pub spacing: [f64; 3],
    /// Recorded with outputs and passed to the synthetic generator.
    pub seed: u64,
    pub detection: DetectionConfig,
    pub watershed: WatershedConfig,
    pub slic: SlicConfig,
    pub correction: CorrectionConfig,
    pub graph: GraphConfig,
    pub tracking: TrackingConfig,
    pub metrics: AogmCosts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            spacing: Spacing::default().as_array(),
            seed: 0,
            detection: DetectionConfig::default(),
            watershed: WatershedConfig::default(),
            slic: SlicConfig::default(),
            correction: CorrectionConfig::default(),
            graph: GraphConfig::default(),
            tracking: TrackingConfig::default(),
            metrics: AogmCosts::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn spacing(&self) -> Result<Spacing> {
        let [x, y, z] = self.spacing;
        Spacing::new(x, y, z).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.spacing()?;
        let d = &self.detection;
        if d.scales.is_empty() || d.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "detection.scales must be a nonempty list of positive radii".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.min_score) {
            return Err(Error::Config("detection.min_score must lie in [0, 1]".into()));
        }
        if !(d.min_separation >= 0.0) {
            return Err(Error::Config("detection.min_separation must be >= 0".into()));
        }
        self.watershed.validate()?;
        self.slic.validate()?;
        self.tracking.validate()?;
        self.metrics.validate()?;
        if self.graph.max_radius == 0 {
            return Err(Error::Config("graph.max_radius must be >= 1".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.resolved.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Connectivity;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = PipelineConfig::default();
        c.slic.k = 50;
        c.tracking.division_radius = Some(3);
        c.graph.connectivity = Connectivity::Full26;
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_and_overrides() {
        let c = PipelineConfig::from_toml(
            "spacing = [1.0, 1.0, 2.0]\n[slic]\nk = 300\n[metrics]\nfn = 20.0\n[watershed]\nconnectivity = \"full26\"\n",
        )
        .unwrap();
        assert_eq!(c.slic.k, 300);
        assert_eq!(c.slic.compactness, SlicConfig::default().compactness);
        assert_eq!(c.metrics.fn_, 20.0);
        assert_eq!(c.watershed.connectivity, Connectivity::Full26);
        assert_eq!(c.spacing().unwrap().sz, 2.0);
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "[slic]\nk = 0",
            "[watershed]\nlevel_quantization = 1",
            "[detection]\nscales = []",
            "spacing = [0.0, 1.0, 1.0]",
            "[graph]\nmax_radius = 0",
            "[tracking]\nthreshold = 0.0",
            "[metrics]\nns = -1.0",
            "unknown = 3",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
