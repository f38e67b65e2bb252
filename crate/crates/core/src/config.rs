//! One structured configuration for the whole pipeline, with a section per
//! stage.

use serde::{Deserialize, Serialize};

use crate::acmt::AcmtConfig;
use crate::error::{invalid, Result};
use crate::eval::{BaselineConfig, DistanceMode, WILCOXON_EXACT_MAX_N};
use crate::phantom::PhantomSpec;
use crate::plan_search::SearchConfig;
use crate::tensor_net::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Divides every feature width of the full-size network.
    pub width_div: usize,
    /// Divides every level's point count of the full-size network.
    pub point_div: usize,
    pub layers_per_block: usize,
    /// Single-layer θ and φ instead of two layers each.
    pub single_layer_heads: bool,
    pub standardize_transfer: bool,
    pub cranium_context: bool,
    pub movement_scale: f64,
    /// Initial weights seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_div: 1,
            point_div: 1,
            layers_per_block: 2,
            single_layer_heads: false,
            standardize_transfer: false,
            cranium_context: true,
            movement_scale: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn acmt(&self) -> AcmtConfig {
        let mut c = AcmtConfig::scaled(self.width_div, self.point_div);
        c.tower.layers_per_block = self.layers_per_block;
        c.standardize_transfer = self.standardize_transfer;
        c.cranium_context = self.cranium_context;
        c.movement_scale = self.movement_scale;
        if self.single_layer_heads {
            c = c.single_layer_heads();
        }
        c
    }

    pub fn baseline(&self) -> BaselineConfig {
        let mut c = BaselineConfig::scaled(self.width_div, self.point_div);
        c.tower.layers_per_block = self.layers_per_block;
        c.movement_scale = self.movement_scale;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Largest reduced sample size tested with the exact signed-rank
    /// distribution.
    pub exact_max_n: usize,
    pub include_identity: bool,
    pub distance: DistanceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            exact_max_n: WILCOXON_EXACT_MAX_N,
            include_identity: true,
            distance: DistanceMode::Corresponded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub phantom: PhantomSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Small clouds and narrow networks that train in minutes on a laptop.
    pub fn desk() -> Self {
        Self {
            phantom: PhantomSpec::desk(),
            model: ModelConfig {
                width_div: 8,
                point_div: 16,
                layers_per_block: 1,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.acmt().validate()?;
        if self.model.width_div == 0 || self.model.point_div == 0 || self.model.layers_per_block == 0 {
            return Err(invalid("model divisors and layers per block must be at least 1"));
        }
        if self.train.batch_size == 0 || !(self.train.lr >= 0.0) {
            return Err(invalid("batch size must be positive and learning rate non-negative"));
        }
        if self.search.candidates == 0 {
            return Err(invalid("plan search needs at least one candidate"));
        }
        Ok(())
    }
}
