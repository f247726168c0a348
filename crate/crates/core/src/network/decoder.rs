//! Task decoders: cascaded bilinear upsampling with UNet-style skip
//! concatenation and conv–BN–ReLU blocks.

use tch::nn::{self, ModuleT};
use tch::Tensor;

use super::encoder::ConvBn;
use super::{FeaturePyramid, NetworkConfig};

/// Output side of each decoder block for a 224 input: the first block
/// resizes the 4×4 stage output to 7×7, the rest double.
pub const DECODER_RESOLUTIONS: [i64; 6] = [7, 14, 28, 56, 112, 224];

/// Channel count of the skip features concatenated at each decoder block.
pub(crate) fn skip_channels(cfg: &NetworkConfig) -> [i64; 6] {
    [
        cfg.stage_dims[1],
        cfg.stage_dims[0] + cfg.stem_channels[3],
        cfg.stem_channels[2],
        cfg.stem_channels[1],
        cfg.stem_channels[0],
        0,
    ]
}

/// Skip tensors for block `i`.
pub(crate) fn skips(pyramid: &FeaturePyramid, i: usize) -> Vec<&Tensor> {
    match i {
        0 => vec![&pyramid.stages[1]],
        1 => vec![&pyramid.stages[0], &pyramid.stem[3]],
        2 => vec![&pyramid.stem[2]],
        3 => vec![&pyramid.stem[1]],
        4 => vec![&pyramid.stem[0]],
        _ => vec![],
    }
}

#[derive(Debug)]
pub struct DecoderBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    out_res: i64,
}

impl DecoderBlock {
    fn new(vs: &nn::Path, c_in: i64, c_out: i64, out_res: i64) -> Self {
        Self {
            conv1: ConvBn::new(&(vs / "conv1"), c_in, c_out, 1),
            conv2: ConvBn::new(&(vs / "conv2"), c_out, c_out, 1),
            out_res,
        }
    }

    pub fn forward_t(&self, x: &Tensor, skips: &[&Tensor], train: bool) -> Tensor {
        let up = x.upsample_bilinear2d([self.out_res, self.out_res], false, None, None);
        let mut parts: Vec<&Tensor> = Vec::with_capacity(1 + skips.len());
        parts.push(&up);
        parts.extend_from_slice(skips);
        let x = Tensor::cat(&parts, 1);
        let x = self.conv1.forward_t(&x, train).relu();
        self.conv2.forward_t(&x, train).relu()
    }
}

/// One task branch: six blocks and a 1×1 logit head.
#[derive(Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub head: nn::Conv2D,
}

impl Decoder {
    pub fn new(vs: &nn::Path, cfg: &NetworkConfig) -> Self {
        let skip = skip_channels(cfg);
        let mut prev = cfg.stage_dims[2];
        let blocks = (0..6)
            .map(|i| {
                let c = cfg.decoder_channels[i];
                let blk = DecoderBlock::new(&(vs / "blocks" / i), prev + skip[i], c, DECODER_RESOLUTIONS[i]);
                prev = c;
                blk
            })
            .collect();
        let head = nn::conv2d(vs / "head", prev, 1, 1, Default::default());
        Self { blocks, head }
    }

    /// Logits of this branch alone, without any cross-task exchange.
    pub fn forward_t(&self, pyramid: &FeaturePyramid, train: bool) -> Tensor {
        let mut x = pyramid.stages[2].shallow_clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward_t(&x, &skips(pyramid, i), train);
        }
        x.apply(&self.head)
    }
}
