//! Central finite-difference verification of the engine's adjoints.

use super::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares the analytic gradient of a scalar program with central
/// differences `(f(x+h) − f(x−h)) / 2h`.
///
/// `program` receives one leaf per entry of `inputs` and must return a
/// scalar. It is re-run for every perturbed coordinate, so it must be a pure
/// function of its inputs.
pub fn grad_check<F>(
    program: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = program(&mut g, &vars)?;
        let value = g.value(out);
        if !value.is_scalar() {
            return Err(Error::invalid(format!(
                "gradient check needs a scalar program, got shape {:?}",
                value.shape()
            )));
        }
        value.item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = program(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar program, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if coords.len() > opts.max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(opts.max_coords);
            coords.sort_unstable();
        }
        for &c in &coords {
            let orig = input.data()[c];
            perturbed[i].data_mut()[c] = orig + opts.step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[c] = orig - opts.step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_program_passes() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 12);
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(vec![200], -1.0, 1.0, &mut rng);
        let report = grad_check(|g, v| g.mean_sq(v[0]), &[x], GradCheckOptions::default()).unwrap();
        assert_eq!(report.coords_checked, 64);
    }

    #[test]
    fn non_scalar_program_is_rejected() {
        let x = Tensor::<f64>::ones(vec![3]);
        let err = grad_check(|g, v| g.scale(v[0], 2.0), &[x], GradCheckOptions::default());
        assert!(err.is_err());
    }
}
