//! Finite-difference checks of every differentiable primitive and of the
//! training losses through small 64-bit networks.

use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, discriminator_loss, generator_adversarial_loss, perceptual_loss,
    reconstruction_loss,
};
use crate::nets::{FeatureExtractor, FeatureStage};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::{BatchNormMode, BnState, CustomOp, Graph, Rng, Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Seeded inputs per operation.
pub const SEEDS: u64 = 5;

pub const OPS: &[&str] = &[
    "conv3d",
    "conv3d_strided",
    "conv3d_transpose",
    "batch_norm3d_train",
    "batch_norm3d_eval",
    "leaky_relu",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "concat_channels",
    "reshape",
    "linear",
    "sum",
    "mean",
    "mean_abs",
    "mean_sq",
    "softmax_cross_entropy",
    "loss_reconstruction",
    "loss_classification",
    "loss_perceptual",
    "loss_discriminator",
    "loss_generator_adversarial",
];

/// Name of the deliberately wrong operation added by `inject_fault`.
pub const FAULTY_OP: &str = "faulty_custom";

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub op: &'static str,
    pub seeds: u64,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Program = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn uniform(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `Σ y ⊙ r` with a fixed random `r`, so every output coordinate matters.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(Tensor::normal(shape, 1.0, &mut Rng::new(0x5eed)));
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Doubles its input but reports the gradient of the identity.
struct Faulty;

impl CustomOp<f64> for Faulty {
    fn name(&self) -> &'static str {
        FAULTY_OP
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].map(|v| 2.0 * v))
    }

    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad_output: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![grad_output.clone()])
    }
}

/// Toy generator: one padded 3³ convolution and a LeakyReLU.
fn toy_generator(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.conv3d(x, w, b, 1, 1)?;
    g.leaky_relu(h, 0.2)
}

/// Toy conditional discriminator: one strided convolution on `[x, c]`.
fn toy_discriminator(g: &mut Graph<f64>, x: Var, c: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.concat_channels(x, c)?;
    g.conv3d(h, w, b, 2, 1)
}

fn build(op: &str, seed: u64) -> Result<(Vec<Tensor<f64>>, Program)> {
    let mut rng = Rng::new(seed).split(op.len() as u64);
    let r = &mut rng;
    let vol = |n, c, e| vec![n, c, e, e, e];
    // Constant data for the loss cases, regenerated identically per call.
    let data = move |label: u64| -> (Tensor<f64>, Tensor<f64>) {
        let mut d = Rng::new(seed).split(1000 + label);
        (
            Tensor::uniform(vec![2, 1, 4, 4, 4], 0.0, 1.0, &mut d),
            Tensor::uniform(vec![2, 1, 4, 4, 4], 0.0, 1.0, &mut d),
        )
    };
    let gen_params = |r: &mut Rng| vec![Tensor::uniform(vol(1, 1, 3), -0.3, 0.3, r), uniform(vec![1], r)];
    let out: (Vec<Tensor<f64>>, Program) = match op {
        "conv3d" => (
            vec![uniform(vol(2, 2, 5), r), uniform(vec![3, 2, 3, 3, 3], r), uniform(vec![3], r)],
            Box::new(|g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 1, 1)?;
                readout(g, y)
            }),
        ),
        "conv3d_strided" => (
            vec![uniform(vol(2, 2, 6), r), uniform(vec![3, 2, 3, 3, 3], r), uniform(vec![3], r)],
            Box::new(|g, v| {
                let y = g.conv3d(v[0], v[1], v[2], 2, 1)?;
                readout(g, y)
            }),
        ),
        "conv3d_transpose" => (
            vec![uniform(vol(2, 3, 3), r), uniform(vec![3, 2, 3, 3, 3], r), uniform(vec![2], r)],
            Box::new(|g, v| {
                let y = g.conv3d_transpose(v[0], v[1], v[2], 2, 1, 1)?;
                readout(g, y)
            }),
        ),
        "batch_norm3d_train" => (
            vec![uniform(vol(3, 2, 3), r), uniform(vec![2], r), uniform(vec![2], r)],
            Box::new(|g, v| {
                let mut state = BnState::new(2);
                let y = g.batch_norm3d(v[0], v[1], v[2], &mut state, BatchNormMode::Train, 0.1, 1e-5)?;
                readout(g, y)
            }),
        ),
        "batch_norm3d_eval" => {
            let mean = uniform(vec![2], r);
            let var = Tensor::uniform(vec![2], 0.5, 2.0, r);
            (
                vec![uniform(vol(3, 2, 3), r), uniform(vec![2], r), uniform(vec![2], r)],
                Box::new(move |g, v| {
                    let mut state = BnState {
                        running_mean: mean.clone(),
                        running_var: var.clone(),
                    };
                    let y = g.batch_norm3d(v[0], v[1], v[2], &mut state, BatchNormMode::Eval, 0.1, 1e-5)?;
                    readout(g, y)
                }),
            )
        }
        "leaky_relu" | "relu" => {
            let leaky = op == "leaky_relu";
            (
                vec![uniform(vec![4, 6], r)],
                Box::new(move |g, v| {
                    let y = if leaky { g.leaky_relu(v[0], 0.2)? } else { g.relu(v[0])? };
                    readout(g, y)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let which = op.to_string();
            (
                vec![uniform(vec![4, 5], r), uniform(vec![4, 5], r)],
                Box::new(move |g, v| {
                    let y = match which.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    readout(g, y)
                }),
            )
        }
        "scale" | "shift" => {
            let scale = op == "scale";
            (
                vec![uniform(vec![3, 4], r)],
                Box::new(move |g, v| {
                    let y = if scale { g.scale(v[0], -1.7)? } else { g.shift(v[0], 0.3)? };
                    let y = g.mul(y, y)?;
                    readout(g, y)
                }),
            )
        }
        "concat_channels" => (
            vec![uniform(vol(2, 1, 3), r), uniform(vol(2, 2, 3), r)],
            Box::new(|g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                readout(g, y)
            }),
        ),
        "reshape" => (
            vec![uniform(vol(2, 2, 2), r)],
            Box::new(|g, v| {
                let y = g.flatten(v[0])?;
                let y = g.reshape(y, vec![4, 8])?;
                let y = g.mul(y, y)?;
                readout(g, y)
            }),
        ),
        "linear" => (
            vec![uniform(vec![3, 4], r), uniform(vec![5, 4], r), uniform(vec![5], r)],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                readout(g, y)
            }),
        ),
        "sum" | "mean" | "mean_abs" | "mean_sq" => {
            let which = op.to_string();
            (
                vec![uniform(vec![3, 7], r)],
                Box::new(move |g, v| {
                    let w = g.constant(Tensor::normal(vec![3, 7], 1.0, &mut Rng::new(0x5eed)));
                    let x = g.mul(v[0], w)?;
                    match which.as_str() {
                        "sum" => g.sum(x),
                        "mean" => g.mean(x),
                        "mean_abs" => g.mean_abs(x),
                        _ => g.mean_sq(x),
                    }
                }),
            )
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| r.below(5)).collect();
            (
                vec![Tensor::uniform(vec![4, 5], -2.0, 2.0, r)],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "loss_reconstruction" => (
            gen_params(r),
            Box::new(move |g, v| {
                let (x, y) = data(0);
                let (x, y) = (g.constant(x), g.constant(y));
                let p = toy_generator(g, x, v[0], v[1])?;
                reconstruction_loss(g, p, y)
            }),
        ),
        "loss_classification" => {
            let labels = vec![r.below(5), r.below(5)];
            let mut params = gen_params(r);
            params.push(Tensor::uniform(vec![5, 64], -0.1, 0.1, r));
            params.push(uniform(vec![5], r));
            (
                params,
                Box::new(move |g, v| {
                    // No activation: a smooth path admits a wide step.
                    let x = g.constant(data(1).0);
                    let h = g.conv3d(x, v[0], v[1], 1, 1)?;
                    let h = g.flatten(h)?;
                    let logits = g.linear(h, v[2], v[3])?;
                    classification_loss(g, logits, &labels)
                }),
            )
        }
        "loss_perceptual" => {
            let specs = [FeatureStage::conv(2, 3, 1), FeatureStage::conv(3, 3, 2)];
            let phi = FeatureExtractor::new(&specs, vec![0, 1], &mut Rng::new(seed).split(7))?;
            (
                gen_params(r),
                Box::new(move |g, v| {
                    let (x, y) = data(2);
                    let (x, y) = (g.constant(x), g.constant(y));
                    let p = toy_generator(g, x, v[0], v[1])?;
                    perceptual_loss(g, &phi, p, y)
                }),
            )
        }
        "loss_discriminator" | "loss_generator_adversarial" => {
            let disc = op == "loss_discriminator";
            let mut params = gen_params(r);
            params.push(Tensor::uniform(vec![1, 2, 3, 3, 3], -0.3, 0.3, r));
            params.push(uniform(vec![1], r));
            (
                params,
                Box::new(move |g, v| {
                    let (x, y) = data(3);
                    let (x, y) = (g.constant(x), g.constant(y));
                    let p = toy_generator(g, x, v[0], v[1])?;
                    let fake = toy_discriminator(g, x, p, v[2], v[3])?;
                    if disc {
                        let real = toy_discriminator(g, x, y, v[2], v[3])?;
                        discriminator_loss(g, real, fake)
                    } else {
                        generator_adversarial_loss(g, fake)
                    }
                }),
            )
        }
        FAULTY_OP => (
            vec![uniform(vec![6], r)],
            Box::new(|g, v| {
                let y = g.custom(Box::new(Faulty), &[v[0]])?;
                readout(g, y)
            }),
        ),
        other => return Err(Error::invalid(format!("unknown operation {other:?}"))),
    };
    Ok(out)
}

/// Runs the suite, or the single operation named by `only`. With
/// `inject_fault` an operation with a wrong adjoint is appended.
pub fn run_suite(only: Option<&str>, inject_fault: bool) -> Result<Vec<SuiteRow>> {
    let mut ops: Vec<&'static str> = match only {
        None => OPS.to_vec(),
        Some(name) => vec![*OPS
            .iter()
            .find(|o| **o == name)
            .ok_or_else(|| Error::invalid(format!("unknown operation {name:?}")))?],
    };
    if inject_fault {
        ops.push(FAULTY_OP);
    }
    ops.into_iter().map(|op| check_op(op, SEEDS)).collect()
}

/// Central-difference step. Smooth operations tolerate a wide step, which
/// keeps roundoff small; piecewise-linear ones need a narrow step so that
/// perturbations rarely straddle a kink.
fn step(op: &str) -> f64 {
    let kinked = op.starts_with("loss_") && op != "loss_classification"
        || matches!(op, "relu" | "leaky_relu" | "mean_abs");
    if kinked {
        1e-6
    } else {
        1e-3
    }
}

pub fn check_op(op: &'static str, seeds: u64) -> Result<SuiteRow> {
    let mut row = SuiteRow {
        op,
        seeds,
        coords: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..seeds {
        let (inputs, program) = build(op, seed)?;
        let opts = GradCheckOptions {
            seed,
            step: step(op),
            ..GradCheckOptions::default()
        };
        let report = grad_check(|g, v| program(g, v), &inputs, opts)?;
        row.coords += report.coords_checked;
        row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
    }
    Ok(row)
}
