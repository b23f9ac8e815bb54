use serde::{Deserialize, Serialize};

use crate::dosesim::{Dataset, Split, VolumePair};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::nets::NetConfig;

use super::step::{train_step, validate};
use super::{TrainConfig, TrainState};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, counted over all stages.
    pub epoch: usize,
    pub stage: usize,
    /// Mean over the epoch's training batches.
    pub train: LossBreakdown,
    pub val_total: f64,
    pub val_accuracy: f64,
    /// Rate after this epoch's schedule update.
    pub lr: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

fn abort(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericalAbort {
            term: op.to_string(),
            epoch,
            batch,
        },
        other => other,
    }
}

/// Trains from scratch. See [`fit_with`].
pub fn fit(dataset: &Dataset, net: NetConfig, train: TrainConfig) -> Result<(TrainState, Vec<EpochLog>)> {
    fit_with(TrainState::new(net, train)?, dataset, |_, _| Ok(()))
}

/// Runs epochs until the budget is spent or the rate falls below the stop
/// threshold, calling `on_epoch` after each. Every epoch visits each
/// training volume once, in shuffled order, at one randomly drawn dose
/// level; validation pairs cycle through the dose levels and stay fixed.
pub fn fit_with(
    mut state: TrainState,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    state.train.validate()?;
    if dataset.manifest.extent != state.net.volume_extent {
        return Err(Error::Incompatible(format!(
            "dataset extent {} does not match the network extent {}",
            dataset.manifest.extent, state.net.volume_extent
        )));
    }
    let train_ids = dataset.manifest.split(Split::Train);
    let val_ids = dataset.manifest.split(Split::Val);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    let levels = |v: usize| -> Vec<u32> { dataset.manifest.volumes[v].low_dose.iter().map(|l| l.drf).collect() };
    let val_pairs: Vec<VolumePair> = val_ids
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let drfs = levels(v);
            dataset.normalized_pair(v, drfs[i % drfs.len()])
        })
        .collect::<Result<_>>()?;
    let budgets = state.train.stage_epochs();
    let mut logs = Vec::new();

    while !state.progress.finished {
        let p = &mut state.progress;
        if p.stage_epoch >= budgets[p.stage] {
            advance_stage(&mut state, &budgets);
            continue;
        }
        let epoch = state.progress.epoch + 1;
        let mut order = train_ids.clone();
        state.rng.shuffle(&mut order);
        let mut pairs = Vec::with_capacity(order.len());
        for &v in &order {
            let drfs = levels(v);
            let drf = drfs[state.rng.below(drfs.len())];
            pairs.push(dataset.normalized_pair(v, drf)?);
        }
        let batches: Vec<&[VolumePair]> = pairs.chunks(state.train.batch_size).collect();
        let mut losses = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            losses.push(train_step(&mut state, batch).map_err(|e| abort(e, epoch, b + 1))?);
        }
        let weights = state.train.weights;
        let train = LossBreakdown::mean(&losses, &weights)?;
        let val = validate(&mut state, &val_pairs).map_err(|e| abort(e, epoch, batches.len()))?;
        let t = &state.train;
        let (lr, stop) = state
            .progress
            .plateau
            .step(val.losses.l_total, t.lr_factor, t.lr_patience, t.lr_stop_threshold)
            .map_err(|e| abort(e, epoch, batches.len()))?;
        state.progress.epoch = epoch;
        state.progress.stage_epoch += 1;
        let log = EpochLog {
            epoch,
            stage: state.progress.stage,
            train,
            val_total: val.losses.l_total,
            val_accuracy: val.accuracy,
            lr,
        };
        if stop || state.progress.stage_epoch >= budgets[state.progress.stage] {
            advance_stage(&mut state, &budgets);
        }
        on_epoch(&state, &log)?;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Moves to the next stage, keeping the rate, or finishes.
fn advance_stage(state: &mut TrainState, budgets: &[usize]) {
    let p = &mut state.progress;
    if p.stage + 1 < budgets.len() {
        p.stage += 1;
        p.stage_epoch = 0;
        p.plateau.reset_best();
    } else {
        p.finished = true;
    }
}
