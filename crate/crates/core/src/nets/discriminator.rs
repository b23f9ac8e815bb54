use super::layers::{join, BatchNorm3d, Conv3d, Forward, ParamKind, Params};
use super::{NetConfig, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
struct DiscBlock {
    conv: Conv3d,
    bn: Option<BatchNorm3d>,
}

/// Conditional patch discriminator.
///
/// Scores the channel concatenation of the low-dose input and a candidate
/// standard-dose volume. Each block is a stride-2 conv, BN (all but the
/// first block) and LeakyReLU; a final stride-1 conv emits one raw score per
/// patch. There is no sigmoid: the least-squares objective works on raw
/// scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    blocks: Vec<DiscBlock>,
    score: Conv3d,
}

impl Discriminator {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(config.disc_layers);
        let mut cin = 2 * config.input_channels;
        for i in 0..config.disc_layers {
            let cout = config.base_channels * (1 << i.min(3));
            blocks.push(DiscBlock {
                conv: Conv3d::new(cin, cout, 3, 2, rng),
                bn: (i > 0).then(|| BatchNorm3d::new(cout)),
            });
            cin = cout;
        }
        Discriminator {
            blocks,
            score: Conv3d::new(cin, 1, 3, 1, rng),
        }
    }

    pub fn forward(
        &mut self,
        ctx: &mut Forward,
        prefix: &str,
        x: Var,
        candidate: Var,
    ) -> Result<Var> {
        let (sx, sc) = (
            ctx.graph.value(x).shape(),
            ctx.graph.value(candidate).shape(),
        );
        if sx != sc {
            return Err(Error::shape(format!(
                "discriminator inputs differ: {sx:?} vs {sc:?}"
            )));
        }
        let mut h = ctx.graph.concat_channels(x, candidate)?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            h = block.conv.forward(ctx, &join(&p, "conv"), h)?;
            if let Some(bn) = &mut block.bn {
                h = bn.forward(ctx, &join(&p, "bn"), h)?;
            }
            h = ctx.graph.leaky_relu(h, LEAKY_SLOPE)?;
        }
        self.score.forward(ctx, &join(prefix, "score"), h)
    }
}

impl Params for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv.visit(&join(&p, "conv"), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(&p, "bn"), f);
            }
        }
        self.score.visit(&join(prefix, "score"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv.visit_mut(&join(&p, "conv"), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(&p, "bn"), f);
            }
        }
        self.score.visit_mut(&join(prefix, "score"), f);
    }
}
