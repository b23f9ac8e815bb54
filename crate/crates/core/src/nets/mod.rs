//! The coarse generator, refiner, discriminator and feature extractor.

mod contextual;
mod discriminator;
mod features;
mod layers;
mod mlnet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub use contextual::ContextualNet;
pub use discriminator::Discriminator;
pub use features::{FeatureExtractor, FeatureStage};
pub use layers::{
    BatchNorm3d, Binding, Conv3d, ConvTranspose3d, Dense, Forward, Grads, ParamKind, Params,
    BN_EPS, BN_MOMENTUM,
};
pub use mlnet::{MlNet, MlNetOutput};

/// Slope of every LeakyReLU in the generator encoder and the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture hyperparameters shared by all networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 encoder (and decoder) blocks. Only 5 is supported.
    pub encoder_depth: usize,
    /// Number of dose-reduction classes predicted by the classification head.
    pub num_classes: usize,
    /// Hidden width of the classification perceptron.
    pub class_hidden: usize,
    /// Residual blocks in the refiner. Only 2 is supported.
    pub refiner_blocks: usize,
    pub refiner_channels: usize,
    pub disc_layers: usize,
    pub volume_extent: usize,
    pub feature_stages: Vec<FeatureStage>,
    /// Indices into `feature_stages` whose activations enter the
    /// perceptual loss.
    pub feature_layers: Vec<usize>,
    pub feature_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_channels: 1,
            base_channels: 16,
            encoder_depth: 5,
            num_classes: 5,
            class_hidden: 64,
            refiner_blocks: 2,
            refiner_channels: 8,
            disc_layers: 3,
            volume_extent: 32,
            feature_stages: vec![
                FeatureStage::conv(8, 3, 1),
                FeatureStage::conv(16, 3, 2),
                FeatureStage::conv(32, 3, 2),
            ],
            feature_layers: vec![0, 1, 2],
            feature_seed: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.input_channels != 1 {
            return fail(format!(
                "input_channels must be 1 (single-channel volumes), got {}",
                self.input_channels
            ));
        }
        if self.base_channels == 0 || self.refiner_channels == 0 || self.class_hidden == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.encoder_depth != 5 {
            return fail(format!(
                "encoder_depth is fixed at 5, got {}",
                self.encoder_depth
            ));
        }
        if self.refiner_blocks != 2 {
            return fail(format!(
                "refiner_blocks is fixed at 2, got {}",
                self.refiner_blocks
            ));
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.volume_extent == 0 || !self.volume_extent.is_multiple_of(32) {
            return fail(format!(
                "volume_extent must be a positive multiple of 32, got {}",
                self.volume_extent
            ));
        }
        if self.disc_layers == 0 || self.volume_extent >> self.disc_layers == 0 {
            return fail(format!(
                "disc_layers {} is incompatible with extent {}",
                self.disc_layers, self.volume_extent
            ));
        }
        if self.feature_stages.is_empty() {
            return fail("feature_stages must not be empty".into());
        }
        if self.feature_layers.is_empty() {
            return fail("feature_layers must not be empty".into());
        }
        if self.feature_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail("feature_layers must be strictly increasing".into());
        }
        if let Some(&i) = self.feature_layers.last() {
            if i >= self.feature_stages.len() {
                return fail(format!(
                    "feature layer {i} exceeds the {} extractor stages",
                    self.feature_stages.len()
                ));
            }
        }
        for s in &self.feature_stages {
            if s.channels == 0 || s.kernel % 2 == 0 || s.stride == 0 {
                return fail(format!("invalid feature stage {s:?}"));
            }
        }
        Ok(())
    }

    /// Output channels of encoder level `level`: `base·2^level`, capped at
    /// `base·16`.
    pub fn encoder_width(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(4))
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.encoder_depth)
            .map(|l| self.encoder_width(l))
            .collect()
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.volume_extent >> self.encoder_depth
    }

    pub fn score_extent(&self) -> usize {
        self.volume_extent >> self.disc_layers
    }
}

/// All parameter sets of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub mlnet: MlNet,
    pub contextual: ContextualNet,
    pub discriminator: Discriminator,
    pub features: FeatureExtractor,
}

pub const MLNET: &str = "mlnet";
pub const CONTEXTUAL: &str = "contextual";
pub const DISCRIMINATOR: &str = "disc";
pub const FEATURES: &str = "features";

/// Initializes every network from `rng`.
///
/// Each network draws from its own split stream, so changing one network's
/// shape leaves the others' weights untouched. The feature extractor uses
/// `config.feature_seed` alone and is identical for every training seed.
pub fn init_params(config: &NetConfig, rng: &Rng) -> Result<Networks> {
    config.validate()?;
    Ok(Networks {
        mlnet: MlNet::new(config, &mut rng.split(1)),
        contextual: ContextualNet::new(config, &mut rng.split(2)),
        discriminator: Discriminator::new(config, &mut rng.split(3)),
        features: FeatureExtractor::new(
            &config.feature_stages,
            config.feature_layers.clone(),
            &mut Rng::new(config.feature_seed),
        )?,
    })
}

impl Params for Networks {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::Tensor, ParamKind)) {
        self.mlnet.visit(&layers::join(prefix, MLNET), f);
        self.contextual.visit(&layers::join(prefix, CONTEXTUAL), f);
        self.discriminator
            .visit(&layers::join(prefix, DISCRIMINATOR), f);
        self.features.visit(&layers::join(prefix, FEATURES), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::Tensor, ParamKind)) {
        self.mlnet.visit_mut(&layers::join(prefix, MLNET), f);
        self.contextual
            .visit_mut(&layers::join(prefix, CONTEXTUAL), f);
        self.discriminator
            .visit_mut(&layers::join(prefix, DISCRIMINATOR), f);
        self.features.visit_mut(&layers::join(prefix, FEATURES), f);
    }
}
