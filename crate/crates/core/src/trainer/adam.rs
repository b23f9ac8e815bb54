use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::nets::{Grads, ParamKind, Params};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of the trainable tensors named in
/// `active`. Every active tensor needs a finite, shape-matched gradient;
/// nothing is modified when any check fails.
pub fn adam_step(
    params: &mut dyn Params,
    active: &[String],
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    params.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            shapes.insert(name.to_string(), t.shape().to_vec());
        }
    });
    for name in active {
        let shape = shapes
            .get(name)
            .ok_or_else(|| Error::invalid(format!("{name} is not a trainable parameter")))?;
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for {name}")))?;
        if g.shape() != &shape[..] {
            return Err(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                shape
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let set: HashSet<&str> = active.iter().map(String::as_str).collect();
    params.visit_mut("", &mut |name, p, kind| {
        if kind != ParamKind::Trainable || !set.contains(name) {
            return;
        }
        let g = grads.get(name).expect("checked above");
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
    });
    Ok(())
}
