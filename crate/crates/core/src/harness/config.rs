//! One JSON document holding every tunable default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BiasConfig, FidelityConfig, LogicConfig, SensitivityConfig};
use crate::concepts::DiscoverConfig;
use crate::error::{Error, Result};
use crate::grn::{DistillConfig, GrnConfig};
use crate::scg::DetectConfig;
use crate::vdi::ContributionScale;
use crate::world::{TeacherTrainConfig, WorldSpec};

/// Overrides `--out` when set.
pub const OUT_DIR_ENV: &str = "REASONGRAPH_OUT";

/// Layer widths of the graph network; the input width comes from the
/// teacher and the node count from the concept banks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrnLayout {
    pub node_dims: Vec<usize>,
    pub edge_dims: Vec<usize>,
    pub edge_concat: bool,
    pub e_init: f64,
}

impl Default for GrnLayout {
    fn default() -> Self {
        Self {
            node_dims: vec![64, 32, 32],
            edge_dims: vec![4, 5, 5, 5],
            edge_concat: true,
            e_init: 1.0,
        }
    }
}

impl GrnLayout {
    pub fn config(&self, n_classes: usize, n_concepts: usize, feature_dim: usize) -> GrnConfig {
        let mut node_dims = vec![feature_dim];
        node_dims.extend(&self.node_dims);
        GrnConfig {
            n_classes,
            n_concepts,
            node_dims,
            edge_dims: self.edge_dims.clone(),
            edge_concat: self.edge_concat,
            e_init: self.e_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub world: WorldSpec,
    pub train_per_class: usize,
    /// Held-out images per class.
    pub test_per_class: usize,
    pub teacher: TeacherTrainConfig,
    /// Training images per class handed to concept discovery.
    pub discovery_images_per_class: usize,
    pub discover: DiscoverConfig,
    pub detect: DetectConfig,
    pub grn: GrnLayout,
    pub distill: DistillConfig,
    pub scale: ContributionScale,
    pub fidelity: FidelityConfig,
    pub logic: LogicConfig,
    pub sensitivity: SensitivityConfig,
    pub bias: BiasConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::three_class(),
            train_per_class: 400,
            test_per_class: 900,
            teacher: TeacherTrainConfig::default(),
            discovery_images_per_class: 100,
            discover: DiscoverConfig::default(),
            detect: DetectConfig::default(),
            grn: GrnLayout::default(),
            distill: DistillConfig::default(),
            scale: ContributionScale::default(),
            fidelity: FidelityConfig::default(),
            logic: LogicConfig::default(),
            sensitivity: SensitivityConfig::default(),
            bias: BiasConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("train and test sizes must be ≥ 1".into()));
        }
        if self.discovery_images_per_class > self.train_per_class {
            return Err(Error::InvalidArgument(
                "discovery images per class exceed the training images per class".into(),
            ));
        }
        self.grn.config(self.world.n_classes(), self.discover.n_concepts, 1).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_files_fill_in() {
        let c = HarnessConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<HarnessConfig>(&json).unwrap(), c);
        let partial: HarnessConfig = serde_json::from_str(r#"{"train_per_class": 7}"#).unwrap();
        assert_eq!(partial.train_per_class, 7);
        assert_eq!(partial.test_per_class, 900);
    }

    #[test]
    fn default_layout_gives_188_dims() {
        assert_eq!(GrnLayout::default().config(3, 4, 64).embed_dim(), 188);
    }
}
