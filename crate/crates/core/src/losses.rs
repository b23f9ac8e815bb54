//! Training objectives.
//!
//! Every loss is recorded on a [`Graph`] so it can be differentiated; the
//! generic forms run in `f64` for gradient checks. [`LossBreakdown`] carries
//! the scalar values of one step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, FeatureExtractor, Forward, Binding};
use crate::tensor::{Graph, Real, Var};

/// Weights of the four generator terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Reconstruction (L1).
    pub lambda1: f64,
    /// Dose-level classification.
    pub lambda2: f64,
    /// Perceptual refinement.
    pub lambda3: f64,
    /// Adversarial.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::PAPER
    }
}

impl LossWeights {
    pub const PAPER: LossWeights = LossWeights {
        lambda1: 300.0,
        lambda2: 10.0,
        lambda3: 10.0,
        lambda4: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ]
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_re: f64,
    pub l_class: f64,
    pub l_refine: f64,
    pub l_dis_g: f64,
    pub l_dis_d: f64,
}

/// Loss values plus the weighted generator total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_re: f64,
    pub l_class: f64,
    pub l_refine: f64,
    pub l_dis_g: f64,
    pub l_dis_d: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            l_re: self.l_re,
            l_class: self.l_class,
            l_refine: self.l_refine,
            l_dis_g: self.l_dis_g,
            l_dis_d: self.l_dis_d,
        }
    }

    /// Term-wise mean; the total is recomputed from the averaged parts.
    pub fn mean(items: &[LossBreakdown], weights: &LossWeights) -> Result<LossBreakdown> {
        if items.is_empty() {
            return Ok(LossBreakdown::default());
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        total_loss(
            weights,
            LossParts {
                l_re: avg(|b| b.l_re),
                l_class: avg(|b| b.l_class),
                l_refine: avg(|b| b.l_refine),
                l_dis_g: avg(|b| b.l_dis_g),
                l_dis_d: avg(|b| b.l_dis_d),
            },
        )
    }
}

/// `λ1·l_re + λ2·l_class + λ3·l_refine + λ4·l_dis_g`.
pub fn total_loss(weights: &LossWeights, parts: LossParts) -> Result<LossBreakdown> {
    let named = [
        ("l_re", parts.l_re),
        ("l_class", parts.l_class),
        ("l_refine", parts.l_refine),
        ("l_dis_g", parts.l_dis_g),
        ("l_dis_d", parts.l_dis_d),
    ];
    if let Some((term, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { op: term });
    }
    let l_total = weights.lambda1 * parts.l_re
        + weights.lambda2 * parts.l_class
        + weights.lambda3 * parts.l_refine
        + weights.lambda4 * parts.l_dis_g;
    Ok(LossBreakdown {
        l_re: parts.l_re,
        l_class: parts.l_class,
        l_refine: parts.l_refine,
        l_dis_g: parts.l_dis_g,
        l_dis_d: parts.l_dis_d,
        l_total,
    })
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!("{what}: shapes differ, {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Voxel-mean absolute difference.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "reconstruction loss")?;
    let d = g.sub(pred, target)?;
    g.mean_abs(d)
}

/// Batch-mean cross-entropy of dose-level logits `[N, K]`.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Sum over the extractor's layers of the mean squared feature difference.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor,
    pred: Var,
    target: Var,
) -> Result<Var> {
    same_shape(g, pred, target, "perceptual loss")?;
    let fp = extractor.apply(g, pred, extractor.layers())?;
    let ft = extractor.apply(g, target, extractor.layers())?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let d = g.sub(a, b)?;
        let term = g.mean_sq(d)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("feature extractor selects no layers"))
}

/// Least-squares discriminator objective on raw score maps.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.shift(real, -1.0)?;
    let r = g.mean_sq(r)?;
    let f = g.mean_sq(fake)?;
    g.add(r, f)
}

/// Least-squares generator objective: pushes fake scores towards 1.
pub fn generator_adversarial_loss<T: Real>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let f = g.shift(fake, -1.0)?;
    g.mean_sq(f)
}

/// Both adversarial terms on one graph.
///
/// The discriminator objective sees the candidate detached and the
/// discriminator bound trainable; the generator objective sees the
/// discriminator bound as constants. The caller's binding is restored.
pub fn adversarial_losses(
    ctx: &mut Forward,
    disc: &mut Discriminator,
    prefix: &str,
    x: Var,
    target: Var,
    refined: Var,
) -> Result<(Var, Var)> {
    let saved = ctx.binding();
    ctx.set_binding(Binding::Trainable);
    let fixed = ctx.graph.detach(refined);
    let real = disc.forward(ctx, prefix, x, target)?;
    let fake = disc.forward(ctx, prefix, x, fixed)?;
    let l_d = discriminator_loss(ctx.graph, real, fake)?;
    ctx.set_binding(Binding::Constant);
    let fake = disc.forward(ctx, prefix, x, refined)?;
    let l_g = generator_adversarial_loss(ctx.graph, fake)?;
    ctx.set_binding(saved);
    Ok((l_d, l_g))
}

/// Weighted generator objective on the graph. Absent terms are skipped;
/// present terms are added even when their weight is zero.
pub fn weighted_total<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    l_re: Var,
    l_class: Option<Var>,
    l_refine: Option<Var>,
    l_dis_g: Option<Var>,
) -> Result<Var> {
    let mut total = g.scale(l_re, weights.lambda1)?;
    for (term, w) in [
        (l_class, weights.lambda2),
        (l_refine, weights.lambda3),
        (l_dis_g, weights.lambda4),
    ] {
        if let Some(t) = term {
            let s = g.scale(t, w)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}
