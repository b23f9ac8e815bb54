use serde::{Deserialize, Serialize};

use super::layers::{join, Forward, ParamKind, Params};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

/// One conv stage of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

impl FeatureStage {
    pub fn conv(channels: usize, kernel: usize, stride: usize) -> Self {
        FeatureStage {
            channels,
            kernel,
            stride,
            relu: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    spec: FeatureStage,
    weight: Tensor,
    bias: Tensor,
}

/// Fixed random 3D conv stack used as the perceptual feature map.
///
/// Weights are drawn once from the given seed (He-uniform, zero bias) and are
/// never bound as trainable: gradients flow through the extractor to its
/// input but never into it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    layers: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(specs: &[FeatureStage], layers: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        if layers.is_empty() || layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "feature layers must be non-empty and strictly increasing",
            ));
        }
        if let Some(&last) = layers.last() {
            if last >= specs.len() {
                return Err(Error::config(format!(
                    "feature layer {last} beyond the {} stages",
                    specs.len()
                )));
            }
        }
        let mut cin = 1;
        let mut stages = Vec::with_capacity(specs.len());
        for &spec in specs {
            let k = spec.kernel;
            let fan_in = cin * k.pow(3);
            let bound = (6.0 / fan_in as f64).sqrt();
            stages.push(Stage {
                spec,
                weight: Tensor::uniform(vec![spec.channels, cin, k, k, k], -bound, bound, rng),
                bias: Tensor::zeros(vec![spec.channels]),
            });
            cin = spec.channels;
        }
        Ok(FeatureExtractor { stages, layers })
    }

    /// Single 1×1×1 identity stage without activation; `φ₀(v) = v`.
    pub fn identity() -> Self {
        FeatureExtractor {
            stages: vec![Stage {
                spec: FeatureStage {
                    channels: 1,
                    kernel: 1,
                    stride: 1,
                    relu: false,
                },
                weight: Tensor::ones(vec![1, 1, 1, 1, 1]),
                bias: Tensor::zeros(vec![1]),
            }],
            layers: vec![0],
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// `(C, D, H, W)` of every stage for a cubic input of `extent`.
    pub fn stage_dims(&self, extent: usize) -> Result<Vec<[usize; 4]>> {
        let mut e = extent;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let geom =
                crate::tensor::ConvGeometry::new(s.spec.kernel, s.spec.stride, s.spec.kernel / 2);
            e = crate::tensor::conv_out_extent(e, geom)?;
            out.push([s.spec.channels, e, e, e]);
        }
        Ok(out)
    }

    /// Activations at the configured layer indices, in order.
    pub fn forward(&self, ctx: &mut Forward, v: Var) -> Result<Vec<Var>> {
        self.forward_layers(ctx, v, &self.layers)
    }

    pub fn forward_layers(&self, ctx: &mut Forward, v: Var, layers: &[usize]) -> Result<Vec<Var>> {
        self.apply(ctx.graph, v, layers)
    }

    /// Records the extractor on any graph; weights enter as constants.
    pub fn apply<T: Real>(&self, graph: &mut Graph<T>, v: Var, layers: &[usize]) -> Result<Vec<Var>> {
        if let Some(&bad) = layers.iter().find(|&&i| i >= self.stages.len()) {
            return Err(Error::invalid(format!(
                "feature layer {bad} beyond extractor depth {}",
                self.stages.len()
            )));
        }
        let channels = graph.value(v).dims5()?[1];
        if channels != 1 {
            return Err(Error::shape(format!(
                "feature extractor expects single-channel volumes, got {channels}"
            )));
        }
        let last = layers.iter().copied().max().unwrap_or(0);
        let mut out = Vec::with_capacity(layers.len());
        let mut h = v;
        for (i, s) in self.stages.iter().enumerate().take(last + 1) {
            let w = graph.constant(s.weight.cast());
            let b = graph.constant(s.bias.cast());
            h = graph.conv3d(h, w, b, s.spec.stride, s.spec.kernel / 2)?;
            if s.spec.relu {
                h = graph.relu(h)?;
            }
            if layers.contains(&i) {
                out.push(h);
            }
        }
        Ok(out)
    }
}

impl Params for FeatureExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            f(&join(&p, "weight"), &s.weight, ParamKind::Frozen);
            f(&join(&p, "bias"), &s.bias, ParamKind::Frozen);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            f(&join(&p, "weight"), &mut s.weight, ParamKind::Frozen);
            f(&join(&p, "bias"), &mut s.bias, ParamKind::Frozen);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Binding, NetConfig};
    use crate::tensor::BatchNormMode;

    fn run(fx: &FeatureExtractor, input: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(input.clone());
        let mut ctx = Forward::new(&mut g, BatchNormMode::Eval, Binding::Trainable);
        let feats = fx.forward(&mut ctx, v).unwrap();
        assert!(ctx.bound().is_empty());
        feats.iter().map(|&f| g.value(f).clone()).collect()
    }

    #[test]
    fn identity_extractor_returns_input() {
        let input = Tensor::uniform(vec![1, 1, 4, 4, 4], -1.0, 1.0, &mut Rng::new(0));
        let feats = run(&FeatureExtractor::identity(), &input);
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0], input);
    }

    #[test]
    fn same_seed_same_features() {
        let cfg = NetConfig::default();
        let a =
            FeatureExtractor::new(&cfg.feature_stages, vec![0, 1, 2], &mut Rng::new(16)).unwrap();
        let b =
            FeatureExtractor::new(&cfg.feature_stages, vec![0, 1, 2], &mut Rng::new(16)).unwrap();
        let input = Tensor::uniform(vec![1, 1, 32, 32, 32], 0.0, 1.0, &mut Rng::new(1));
        assert_eq!(run(&a, &input), run(&b, &input));
    }

    #[test]
    fn declared_stage_shapes() {
        let cfg = NetConfig::default();
        let fx =
            FeatureExtractor::new(&cfg.feature_stages, vec![0, 1, 2], &mut Rng::new(16)).unwrap();
        let dims = fx.stage_dims(32).unwrap();
        assert_eq!(dims, vec![[8, 32, 32, 32], [16, 16, 16, 16], [32, 8, 8, 8]]);
        let input = Tensor::uniform(vec![1, 1, 32, 32, 32], 0.0, 1.0, &mut Rng::new(1));
        for (f, d) in run(&fx, &input).iter().zip(&dims) {
            assert_eq!(&f.shape()[1..], &d[..]);
        }
    }

    #[test]
    fn rejects_out_of_range_layer() {
        let fx = FeatureExtractor::identity();
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(vec![1, 1, 4, 4, 4]));
        let mut ctx = Forward::new(&mut g, BatchNormMode::Eval, Binding::Constant);
        assert!(fx.forward_layers(&mut ctx, v, &[1]).is_err());
        assert!(
            FeatureExtractor::new(&[FeatureStage::conv(4, 3, 1)], vec![1], &mut Rng::new(0))
                .is_err()
        );
    }
}
