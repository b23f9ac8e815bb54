use super::layers::{expect_volume, join, Conv3d, Forward, ParamKind, Params};
use super::NetConfig;
use crate::error::Result;
use crate::tensor::{Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    conv1: Conv3d,
    conv2: Conv3d,
}

/// Residual refiner applied to the coarse reconstruction.
///
/// Layout is head conv, two residual blocks (`v + conv(relu(conv(v)))`),
/// then two tail convs with a ReLU between them. All convolutions are 3³
/// with stride 1 so extents are preserved, and the input volume is added
/// back at the end: with all weights zero the refiner is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualNet {
    head: Conv3d,
    blocks: Vec<ResidualBlock>,
    tail1: Conv3d,
    tail2: Conv3d,
}

impl ContextualNet {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Self {
        let c = config.refiner_channels;
        ContextualNet {
            head: Conv3d::new(1, c, 3, 1, rng),
            blocks: (0..config.refiner_blocks)
                .map(|_| ResidualBlock {
                    conv1: Conv3d::new(c, c, 3, 1, rng),
                    conv2: Conv3d::new(c, c, 3, 1, rng),
                })
                .collect(),
            tail1: Conv3d::new(c, c, 3, 1, rng),
            tail2: Conv3d::new(c, 1, 3, 1, rng),
        }
    }

    /// Zeroes every weight and bias.
    pub fn zero(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.data_mut().fill(0.0));
    }

    pub fn forward(&self, ctx: &mut Forward, prefix: &str, coarse: Var) -> Result<Var> {
        let extent = ctx.graph.value(coarse).dims5()?[2];
        expect_volume(ctx.graph, coarse, 1, extent, "Contextual-Net")?;
        let mut h = self.head.forward(ctx, &join(prefix, "head"), coarse)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("rb{i}"));
            let r = block.conv1.forward(ctx, &join(&p, "conv1"), h)?;
            let r = ctx.graph.relu(r)?;
            let r = block.conv2.forward(ctx, &join(&p, "conv2"), r)?;
            h = ctx.graph.add(h, r)?;
        }
        let t = self.tail1.forward(ctx, &join(prefix, "tail1"), h)?;
        let t = ctx.graph.relu(t)?;
        let t = self.tail2.forward(ctx, &join(prefix, "tail2"), t)?;
        ctx.graph.add(t, coarse)
    }
}

impl Params for ContextualNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.head.visit(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("rb{i}"));
            b.conv1.visit(&join(&p, "conv1"), f);
            b.conv2.visit(&join(&p, "conv2"), f);
        }
        self.tail1.visit(&join(prefix, "tail1"), f);
        self.tail2.visit(&join(prefix, "tail2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("rb{i}"));
            b.conv1.visit_mut(&join(&p, "conv1"), f);
            b.conv2.visit_mut(&join(&p, "conv2"), f);
        }
        self.tail1.visit_mut(&join(prefix, "tail1"), f);
        self.tail2.visit_mut(&join(prefix, "tail2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Binding;
    use crate::tensor::{BatchNormMode, Graph};

    #[test]
    fn zero_weights_give_identity() {
        let mut net = ContextualNet::new(&NetConfig::default(), &mut Rng::new(0));
        net.zero();
        let input = Tensor::uniform(vec![1, 1, 32, 32, 32], -1.0, 1.0, &mut Rng::new(2));
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut ctx = Forward::new(&mut g, BatchNormMode::Eval, Binding::Constant);
        let y = net.forward(&mut ctx, "contextual", x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn preserves_shape() {
        let net = ContextualNet::new(&NetConfig::default(), &mut Rng::new(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 32, 32, 32]));
        let mut ctx = Forward::new(&mut g, BatchNormMode::Eval, Binding::Constant);
        let y = net.forward(&mut ctx, "contextual", x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 32, 32, 32]);

        let bad = g.constant(Tensor::zeros(vec![1, 2, 32, 32, 32]));
        let mut ctx = Forward::new(&mut g, BatchNormMode::Eval, Binding::Constant);
        assert!(net.forward(&mut ctx, "contextual", bad).is_err());
    }
}
