use super::layers::{
    expect_volume, join, BatchNorm3d, Conv3d, ConvTranspose3d, Dense, Forward, ParamKind, Params,
};
use super::{NetConfig, LEAKY_SLOPE};
use crate::error::Result;
use crate::tensor::{Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
struct EncoderBlock {
    conv: Conv3d,
    bn: Option<BatchNorm3d>,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderBlock {
    up: ConvTranspose3d,
    bn: BatchNorm3d,
}

/// Multi-task coarse generator: a 3D U-Net reconstruction branch and a
/// dose-level classification head sharing its encoder.
///
/// Encoder blocks are LeakyReLU → stride-2 conv → BN and halve the extent;
/// the innermost block has no BN so a 1³ bottleneck stays well-defined at any
/// batch size. Decoder blocks are ReLU → stride-2 transposed conv → BN, and
/// every block after the first consumes its predecessor concatenated with
/// the encoder output at the same resolution. A final ReLU → 3³ conv maps to
/// one linear output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MlNet {
    extent: usize,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Conv3d,
    head_hidden: Dense,
    head_out: Dense,
}

/// Coarse reconstruction and class logits.
#[derive(Clone, Copy, Debug)]
pub struct MlNetOutput {
    pub coarse: Var,
    pub logits: Var,
    /// Innermost encoder output, shared by both branches.
    pub bottleneck: Var,
}

impl MlNet {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Self {
        let depth = config.encoder_depth;
        let widths = config.encoder_widths();
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = config.input_channels;
        for (level, &w) in widths.iter().enumerate() {
            let innermost = level + 1 == depth;
            encoder.push(EncoderBlock {
                conv: Conv3d::new(cin, w, 3, 2, rng),
                bn: (!innermost).then(|| BatchNorm3d::new(w)),
            });
            cin = w;
        }
        let mut decoder = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 {
                widths[depth - 1]
            } else {
                2 * widths[depth - 1 - i]
            };
            let cout = if i + 1 < depth {
                widths[depth - 2 - i]
            } else {
                config.base_channels
            };
            decoder.push(DecoderBlock {
                up: ConvTranspose3d::new(cin, cout, rng),
                bn: BatchNorm3d::new(cout),
            });
        }
        let output = Conv3d::new(config.base_channels, 1, 3, 1, rng);
        let bottleneck = widths[depth - 1] * config.bottleneck_extent().pow(3);
        MlNet {
            extent: config.volume_extent,
            encoder,
            decoder,
            output,
            head_hidden: Dense::new(bottleneck, config.class_hidden, rng),
            head_out: Dense::new(config.class_hidden, config.num_classes, rng),
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder.iter().map(|b| b.conv.out_channels()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.head_out.bias.len()
    }

    /// Runs both branches on `x: [N, 1, E, E, E]`.
    pub fn forward(&mut self, ctx: &mut Forward, prefix: &str, x: Var) -> Result<MlNetOutput> {
        expect_volume(ctx.graph, x, 1, self.extent, "ML-Net")?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, block) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("enc{i}"));
            h = ctx.graph.leaky_relu(h, LEAKY_SLOPE)?;
            h = block.conv.forward(ctx, &join(&p, "conv"), h)?;
            if let Some(bn) = &mut block.bn {
                h = bn.forward(ctx, &join(&p, "bn"), h)?;
            }
            skips.push(h);
        }
        let bottleneck = h;

        let flat = ctx.graph.flatten(bottleneck)?;
        let z = ctx.graph.leaky_relu(flat, LEAKY_SLOPE)?;
        let z = self
            .head_hidden
            .forward(ctx, &join(prefix, "head.hidden"), z)?;
        let z = ctx.graph.leaky_relu(z, LEAKY_SLOPE)?;
        let logits = self.head_out.forward(ctx, &join(prefix, "head.out"), z)?;

        let depth = self.decoder.len();
        let mut d = bottleneck;
        for (i, block) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("dec{i}"));
            if i > 0 {
                d = ctx.graph.concat_channels(d, skips[depth - 1 - i])?;
            }
            d = ctx.graph.relu(d)?;
            d = block.up.forward(ctx, &join(&p, "up"), d)?;
            d = block.bn.forward(ctx, &join(&p, "bn"), d)?;
        }
        let d = ctx.graph.relu(d)?;
        let coarse = self.output.forward(ctx, &join(prefix, "out"), d)?;
        Ok(MlNetOutput {
            coarse,
            logits,
            bottleneck,
        })
    }
}

impl Params for MlNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, b) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("enc{i}"));
            b.conv.visit(&join(&p, "conv"), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(&p, "bn"), f);
            }
        }
        self.head_hidden.visit(&join(prefix, "head.hidden"), f);
        self.head_out.visit(&join(prefix, "head.out"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("dec{i}"));
            b.up.visit(&join(&p, "up"), f);
            b.bn.visit(&join(&p, "bn"), f);
        }
        self.output.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("enc{i}"));
            b.conv.visit_mut(&join(&p, "conv"), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(&p, "bn"), f);
            }
        }
        self.head_hidden.visit_mut(&join(prefix, "head.hidden"), f);
        self.head_out.visit_mut(&join(prefix, "head.out"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("dec{i}"));
            b.up.visit_mut(&join(&p, "up"), f);
            b.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}
