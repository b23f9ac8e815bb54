use std::fmt::Write as _;

use crate::dosesim::{Dataset, Split};
use crate::error::Result;
use crate::metrics::{evaluate, MetricsReport, MetricsRow};
use crate::nets::NetConfig;

use super::fit::{fit_with, EpochLog};
use super::{StageMode, TrainConfig, TrainState, Variant};

/// Dose level the ablation table reports.
pub const ABLATION_DRF: u32 = 100;

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub variant: Variant,
    pub logs: Vec<EpochLog>,
    /// Test-split report at [`ABLATION_DRF`]; absent when training failed.
    pub report: Option<MetricsReport>,
    pub failure: Option<String>,
}

impl AblationEntry {
    /// The variant's own row.
    pub fn row(&self) -> Option<&MetricsRow> {
        self.report.as_ref()?.row(self.variant.label(), ABLATION_DRF)
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seed: u64,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn failed(&self) -> bool {
        self.entries.iter().any(|e| e.failure.is_some())
    }

    /// One row per variant with PSNR, SSIM and NRMSE columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {} | DRF {ABLATION_DRF} | test split", self.seed);
        let _ = writeln!(s, "{:<14} {:>9} {:>7} {:>8}", "Method", "PSNR", "SSIM", "NRMSE%");
        for e in &self.entries {
            match (e.row(), &e.failure) {
                (Some(r), _) => {
                    let _ = writeln!(
                        s,
                        "{:<14} {:>9.3} {:>7.4} {:>8.3}",
                        e.variant.label(),
                        r.scores.psnr,
                        r.scores.ssim,
                        r.scores.nrmse
                    );
                }
                (None, failure) => {
                    let why = failure.as_deref().unwrap_or("not run");
                    let _ = writeln!(s, "{:<14} FAILED: {why}", e.variant.label());
                }
            }
        }
        s
    }
}

/// Trains and scores the four variants with identical seeds and data.
/// A variant that fails is recorded with its error and the rest still run.
pub fn run_ablation(
    dataset: &Dataset,
    net: &NetConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(Variant, &TrainState, &EpochLog) -> Result<()>,
) -> Result<AblationReport> {
    train.validate()?;
    let mut entries = Vec::new();
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            stage_mode: if variant == Variant::Full { train.stage_mode } else { StageMode::EndToEnd },
            ..train.clone()
        };
        let state = TrainState::new(net.clone(), cfg)?;
        let outcome = fit_with(state, dataset, |s, log| on_epoch(variant, s, log)).and_then(|(mut state, logs)| {
            let report = evaluate(dataset, Split::Test, &[ABLATION_DRF], variant.label(), |x, _| {
                Ok(state.predict(x)?.refined)
            })?;
            Ok((logs, report))
        });
        entries.push(match outcome {
            Ok((logs, report)) => AblationEntry {
                variant,
                logs,
                report: Some(report),
                failure: None,
            },
            Err(e) => AblationEntry {
                variant,
                logs: Vec::new(),
                report: None,
                failure: Some(e.to_string()),
            },
        });
    }
    Ok(AblationReport {
        seed: train.seed,
        entries,
    })
}
