//! Optimization: Adam, the plateau schedule, alternating GAN updates,
//! checkpoints and the ablation harness.

mod ablation;
mod adam;
mod checkpoint;
mod fit;
mod schedule;
mod step;

pub use ablation::{run_ablation, AblationEntry, AblationReport, ABLATION_DRF};
pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use fit::{fit, fit_with, EpochLog};
pub use schedule::Plateau;
pub use step::{train_step, validate, Prediction, Validation};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{init_params, NetConfig, Networks, ParamKind, Params, CONTEXTUAL, DISCRIMINATOR, MLNET};
use crate::tensor::Rng;

/// Which parts of the model are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// ML-Net reconstruction branch only.
    Baseline,
    /// Adds the classification head.
    Cg,
    /// Adds the discriminator on the coarse output.
    CgGan,
    /// Refiner and discriminator on the refined output.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Cg, Variant::CgGan, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cg => "cg",
            Variant::CgGan => "cg-gan",
            Variant::Full => "full",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Cg => "Baseline + CG",
            Variant::CgGan => "CG-3DGAN",
            Variant::Full => "CG-3DSRGAN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}; expected baseline, cg, cg-gan or full")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    #[default]
    EndToEnd,
    /// ML-Net first, then the refiner and discriminator with ML-Net frozen.
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_initial: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_stop_threshold: f64,
    pub weights: LossWeights,
    pub stage_mode: StageMode,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_epochs: 100,
            lr_initial: 2e-4,
            lr_factor: 0.1,
            lr_patience: 5,
            lr_stop_threshold: 2e-6,
            weights: LossWeights::default(),
            stage_mode: StageMode::EndToEnd,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return fail(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return fail(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if self.lr_patience == 0 {
            return fail("lr_patience must be at least 1".into());
        }
        if !(self.lr_stop_threshold > 0.0 && self.lr_stop_threshold.is_finite()) {
            return fail(format!("lr_stop_threshold must be positive, got {}", self.lr_stop_threshold));
        }
        if self.seed > i64::MAX as u64 {
            return fail("seed must fit in 63 bits".into());
        }
        if self.stage_mode == StageMode::TwoStage && self.variant != Variant::Full {
            return fail(format!("two_stage training needs the full variant, not {}", self.variant));
        }
        self.weights.validate()
    }

    /// Epoch budget of each stage.
    pub fn stage_epochs(&self) -> Vec<usize> {
        match self.stage_mode {
            StageMode::EndToEnd => vec![self.max_epochs],
            StageMode::TwoStage => {
                let first = self.max_epochs.div_ceil(2);
                vec![first, self.max_epochs - first]
            }
        }
    }
}

/// What one training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub train_mlnet: bool,
    pub classify: bool,
    pub refine: bool,
    pub adversarial: bool,
}

impl Phase {
    pub fn of(variant: Variant, mode: StageMode, stage: usize) -> Phase {
        let p = |train_mlnet, classify, refine, adversarial| Phase {
            train_mlnet,
            classify,
            refine,
            adversarial,
        };
        match (variant, mode, stage) {
            (Variant::Baseline, ..) => p(true, false, false, false),
            (Variant::Cg, ..) => p(true, true, false, false),
            (Variant::CgGan, ..) => p(true, true, false, true),
            (Variant::Full, StageMode::TwoStage, 0) => p(true, true, false, false),
            (Variant::Full, StageMode::TwoStage, _) => p(false, true, true, true),
            (Variant::Full, StageMode::EndToEnd, _) => p(true, true, true, true),
        }
    }

    /// Generator-side parameters updated in this phase.
    pub fn generator_params(&self, nets: &Networks) -> Vec<String> {
        let head = format!("{MLNET}.head.");
        let mut out = Vec::new();
        nets.visit("", &mut |name, _, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let mlnet = self.train_mlnet
                && name.starts_with(&format!("{MLNET}."))
                && (self.classify || !name.starts_with(&head));
            let ctx = self.refine && name.starts_with(&format!("{CONTEXTUAL}."));
            if mlnet || ctx {
                out.push(name.to_string());
            }
        });
        out
    }

    pub fn discriminator_params(&self, nets: &Networks) -> Vec<String> {
        let mut out = Vec::new();
        if self.adversarial {
            nets.visit("", &mut |name, _, kind| {
                if kind == ParamKind::Trainable && name.starts_with(&format!("{DISCRIMINATOR}.")) {
                    out.push(name.to_string());
                }
            });
        }
        out
    }
}

/// Scheduling and bookkeeping carried across epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// Completed epochs over all stages.
    pub epoch: usize,
    pub stage: usize,
    /// Completed epochs in the current stage.
    pub stage_epoch: usize,
    pub plateau: Plateau,
    pub finished: bool,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub nets: Networks,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub progress: Progress,
    /// Stream for shuffling and dose-level sampling.
    pub rng: Rng,
}

impl TrainState {
    pub fn new(net: NetConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let root = Rng::new(train.seed);
        let nets = init_params(&net, &root)?;
        Ok(TrainState {
            progress: Progress {
                epoch: 0,
                stage: 0,
                stage_epoch: 0,
                plateau: Plateau::new(train.lr_initial),
                finished: false,
            },
            rng: root.split(100),
            adam_g: AdamState::default(),
            adam_d: AdamState::default(),
            nets,
            train,
            net,
        })
    }

    pub fn phase(&self) -> Phase {
        Phase::of(self.train.variant, self.train.stage_mode, self.progress.stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig { lr_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr_stop_threshold: 0.0, ..TrainConfig::default() },
            TrainConfig {
                stage_mode: StageMode::TwoStage,
                variant: Variant::Cg,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("gan").is_err());
    }

    #[test]
    fn two_stage_budget() {
        let c = TrainConfig {
            stage_mode: StageMode::TwoStage,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(c.stage_epochs(), vec![3, 2]);
    }
}
