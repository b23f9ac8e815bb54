use crate::dosesim::VolumePair;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, discriminator_loss, generator_adversarial_loss, perceptual_loss,
    reconstruction_loss, total_loss, weighted_total, LossBreakdown, LossParts,
};
use crate::nets::{Binding, Forward, Grads, Networks, CONTEXTUAL, DISCRIMINATOR, MLNET};
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

use super::adam::{adam_step, AdamState};
use super::{Phase, TrainState, Variant};

fn stack(batch: &[VolumePair]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let xs: Vec<Tensor> = batch.iter().map(|p| p.x.clone()).collect();
    let ys: Vec<Tensor> = batch.iter().map(|p| p.y_s.clone()).collect();
    Ok((
        Tensor::stack_batch(&xs)?,
        Tensor::stack_batch(&ys)?,
        batch.iter().map(|p| p.y_c).collect(),
    ))
}

fn scalar(g: &Graph<f32>, v: Var, term: &'static str) -> Result<f64> {
    let x = g.value(v).item()? as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { op: term })
    }
}

/// Discriminator update on its own graph; the candidate enters as data.
fn discriminator_update(
    nets: &mut Networks,
    adam: &mut AdamState,
    active: &[String],
    x: &Tensor,
    y: &Tensor,
    candidate: Tensor,
    lr: f64,
) -> Result<f64> {
    let mut graph = Graph::new();
    let mut ctx = Forward::new(&mut graph, BatchNormMode::Train, Binding::Trainable);
    let xv = ctx.graph.constant(x.clone());
    let yv = ctx.graph.constant(y.clone());
    let cv = ctx.graph.constant(candidate);
    let real = nets.discriminator.forward(&mut ctx, DISCRIMINATOR, xv, yv)?;
    let fake = nets.discriminator.forward(&mut ctx, DISCRIMINATOR, xv, cv)?;
    let loss = discriminator_loss(ctx.graph, real, fake)?;
    let bound = ctx.into_bound();
    let value = scalar(&graph, loss, "l_dis_d")?;
    graph.backward(loss)?;
    let grads = Grads::collect(&graph, &bound);
    adam_step(nets, active, &grads, adam, lr)?;
    Ok(value)
}

/// One optimization step: generator forward, a discriminator update with
/// the generator output held fixed, then a generator update against the
/// updated discriminator. Returns the losses measured during the step.
pub fn train_step(state: &mut TrainState, batch: &[VolumePair]) -> Result<LossBreakdown> {
    let phase = state.phase();
    let lr = state.progress.plateau.lr;
    let weights = state.train.weights;
    let (xt, yt, labels) = stack(batch)?;
    let g_active = phase.generator_params(&state.nets);
    let d_active = phase.discriminator_params(&state.nets);
    let TrainState {
        nets, adam_g, adam_d, ..
    } = state;

    let mut graph = Graph::new();
    let mut ctx = Forward::new(&mut graph, BatchNormMode::Train, Binding::Trainable);
    let x = ctx.graph.constant(xt.clone());
    let y = ctx.graph.constant(yt.clone());
    if !phase.train_mlnet {
        ctx.mode = BatchNormMode::Eval;
        ctx.set_binding(Binding::Constant);
    }
    let out = nets.mlnet.forward(&mut ctx, MLNET, x)?;
    ctx.mode = BatchNormMode::Train;
    ctx.set_binding(Binding::Trainable);
    let refined = if phase.refine {
        Some(nets.contextual.forward(&mut ctx, CONTEXTUAL, out.coarse)?)
    } else {
        None
    };
    let candidate = refined.unwrap_or(out.coarse);

    let mut parts = LossParts::default();
    let l_re = reconstruction_loss(ctx.graph, out.coarse, y)?;
    parts.l_re = scalar(ctx.graph, l_re, "l_re")?;
    let l_class = if phase.classify {
        let v = classification_loss(ctx.graph, out.logits, &labels)?;
        parts.l_class = scalar(ctx.graph, v, "l_class")?;
        Some(v)
    } else {
        None
    };
    let l_refine = match refined {
        Some(r) => {
            let v = perceptual_loss(ctx.graph, &nets.features, r, y)?;
            parts.l_refine = scalar(ctx.graph, v, "l_refine")?;
            Some(v)
        }
        None => None,
    };
    let l_dis_g = if phase.adversarial {
        let fixed = ctx.graph.value(candidate).clone();
        parts.l_dis_d = discriminator_update(nets, adam_d, &d_active, &xt, &yt, fixed, lr)?;
        ctx.set_binding(Binding::Constant);
        let fake = nets.discriminator.forward(&mut ctx, DISCRIMINATOR, x, candidate)?;
        ctx.set_binding(Binding::Trainable);
        let v = generator_adversarial_loss(ctx.graph, fake)?;
        parts.l_dis_g = scalar(ctx.graph, v, "l_dis_g")?;
        Some(v)
    } else {
        None
    };
    let total = weighted_total(ctx.graph, &weights, l_re, l_class, l_refine, l_dis_g)?;
    let bound = ctx.into_bound();
    graph.backward(total)?;
    let grads = Grads::collect(&graph, &bound);
    adam_step(nets, &g_active, &grads, adam_g, lr)?;
    total_loss(&weights, parts)
}

/// Network outputs for one input batch, in normalized units.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub coarse: Tensor,
    /// The refiner output; equal to `coarse` for variants without one.
    pub refined: Tensor,
    pub logits: Tensor,
}

struct EvalPass {
    graph: Graph<f32>,
    x: Var,
    coarse: Var,
    refined: Option<Var>,
    logits: Var,
}

fn eval_forward(nets: &mut Networks, x: &Tensor, refine: bool) -> Result<EvalPass> {
    let mut graph = Graph::new();
    let mut ctx = Forward::new(&mut graph, BatchNormMode::Eval, Binding::Constant);
    let xv = ctx.graph.constant(x.clone());
    let out = nets.mlnet.forward(&mut ctx, MLNET, xv)?;
    let refined = if refine {
        Some(nets.contextual.forward(&mut ctx, CONTEXTUAL, out.coarse)?)
    } else {
        None
    };
    Ok(EvalPass {
        x: xv,
        coarse: out.coarse,
        refined,
        logits: out.logits,
        graph,
    })
}

impl TrainState {
    /// Inference on normalized low-dose volumes `[N, 1, E, E, E]`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Prediction> {
        let refine = self.train.variant == Variant::Full;
        let pass = eval_forward(&mut self.nets, x, refine)?;
        let g = &pass.graph;
        let coarse = g.value(pass.coarse).clone();
        Ok(Prediction {
            refined: pass.refined.map_or_else(|| coarse.clone(), |r| g.value(r).clone()),
            coarse,
            logits: g.value(pass.logits).clone(),
        })
    }
}

/// Held-out losses and dose-level accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub losses: LossBreakdown,
    pub accuracy: f64,
    pub count: usize,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates the current phase's losses in inference mode, in batches of
/// the configured size; losses are averaged per pair.
pub fn validate(state: &mut TrainState, pairs: &[VolumePair]) -> Result<Validation> {
    if pairs.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let phase: Phase = state.phase();
    let weights = state.train.weights;
    let mut sums = [0f64; 5];
    let mut correct = 0usize;
    for batch in pairs.chunks(state.train.batch_size) {
        let (xt, yt, labels) = stack(batch)?;
        let mut pass = eval_forward(&mut state.nets, &xt, phase.refine)?;
        let g = &mut pass.graph;
        let y = g.constant(yt);
        let n = batch.len() as f64;
        let mut parts = [0f64; 5];
        let l_re = reconstruction_loss(g, pass.coarse, y)?;
        parts[0] = scalar(g, l_re, "l_re")?;
        if phase.classify {
            let v = classification_loss(g, pass.logits, &labels)?;
            parts[1] = scalar(g, v, "l_class")?;
        }
        if let Some(r) = pass.refined {
            let v = perceptual_loss(g, &state.nets.features, r, y)?;
            parts[2] = scalar(g, v, "l_refine")?;
        }
        if phase.adversarial {
            let candidate = pass.refined.unwrap_or(pass.coarse);
            let mut ctx = Forward::new(g, BatchNormMode::Eval, Binding::Constant);
            let real = state.nets.discriminator.forward(&mut ctx, DISCRIMINATOR, pass.x, y)?;
            let fake = state.nets.discriminator.forward(&mut ctx, DISCRIMINATOR, pass.x, candidate)?;
            let v = generator_adversarial_loss(g, fake)?;
            parts[3] = scalar(g, v, "l_dis_g")?;
            let v = discriminator_loss(g, real, fake)?;
            parts[4] = scalar(g, v, "l_dis_d")?;
        }
        for (s, p) in sums.iter_mut().zip(parts) {
            *s += p * n;
        }
        let logits = g.value(pass.logits);
        let k = logits.shape()[1];
        correct += labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
            .count();
    }
    let n = pairs.len() as f64;
    let losses = total_loss(
        &weights,
        LossParts {
            l_re: sums[0] / n,
            l_class: sums[1] / n,
            l_refine: sums[2] / n,
            l_dis_g: sums[3] / n,
            l_dis_d: sums[4] / n,
        },
    )?;
    Ok(Validation {
        losses,
        accuracy: correct as f64 / n,
        count: pairs.len(),
    })
}
