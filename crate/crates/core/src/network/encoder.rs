//! Shared encoder: a stride-2 convolution stem followed by three LeViT-style
//! transformer stages (or, for the Joint-UNet comparison, plain conv stages
//! with the same output geometry).

use tch::nn::{self, Module, ModuleT};
use tch::Tensor;

use super::{EncoderKind, FeaturePyramid, NetworkConfig};

/// 3×3 convolution (no bias) followed by batch normalisation.
#[derive(Debug)]
pub(crate) struct ConvBn {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBn {
    pub(crate) fn new(vs: &nn::Path, c_in: i64, c_out: i64, stride: i64) -> Self {
        let cfg = nn::ConvConfig {
            stride,
            padding: 1,
            bias: false,
            ..Default::default()
        };
        Self {
            conv: nn::conv2d(vs / "conv", c_in, c_out, 3, cfg),
            bn: nn::batch_norm2d(vs / "bn", c_out, Default::default()),
        }
    }
}

impl ModuleT for ConvBn {
    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.bn.forward_t(&self.conv.forward(x), train)
    }
}

/// Linear map without bias followed by batch normalisation over features;
/// accepts `[B, N, C]` token tensors.
#[derive(Debug)]
struct LinearNorm {
    linear: nn::Linear,
    bn: nn::BatchNorm,
}

impl LinearNorm {
    fn new(vs: &nn::Path, c_in: i64, c_out: i64) -> Self {
        let cfg = nn::LinearConfig {
            bias: false,
            ..Default::default()
        };
        Self {
            linear: nn::linear(vs / "linear", c_in, c_out, cfg),
            bn: nn::batch_norm1d(vs / "bn", c_out, Default::default()),
        }
    }
}

impl ModuleT for LinearNorm {
    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let size = x.size();
        let y = self.linear.forward(x);
        let c = *y.size().last().unwrap();
        self.bn
            .forward_t(&y.reshape([-1, c]), train)
            .reshape([size[0], size[1], c])
    }
}

/// Index tensor mapping each (query, key) pair to its learned attention
/// bias, keyed on the absolute row/column offset between the two grid
/// points. Queries sit on a grid of side `q_res` with spacing `stride` over
/// the key grid of side `k_res`.
fn attention_bias_index(q_res: i64, k_res: i64, stride: i64) -> (Tensor, i64) {
    let mut offsets: Vec<(i64, i64)> = Vec::new();
    let mut idx = Vec::with_capacity((q_res * q_res * k_res * k_res) as usize);
    for qy in 0..q_res {
        for qx in 0..q_res {
            for ky in 0..k_res {
                for kx in 0..k_res {
                    let off = ((qy * stride - ky).abs(), (qx * stride - kx).abs());
                    let id = match offsets.iter().position(|o| *o == off) {
                        Some(p) => p,
                        None => {
                            offsets.push(off);
                            offsets.len() - 1
                        }
                    };
                    idx.push(id as i64);
                }
            }
        }
    }
    (Tensor::from_slice(&idx), offsets.len() as i64)
}

/// Multi-head attention with a learned per-head positional bias. With
/// `stride == 2` the queries are taken from every other token in each grid
/// direction, shrinking the token grid (`ceil(res / 2)`).
#[derive(Debug)]
struct LevitAttention {
    q: LinearNorm,
    kv: LinearNorm,
    proj: LinearNorm,
    biases: Tensor,
    bias_idx: Tensor,
    heads: i64,
    key_dim: i64,
    value_dim: i64,
    res: i64,
    q_res: i64,
    stride: i64,
}

impl LevitAttention {
    #[allow(clippy::too_many_arguments)]
    fn new(
        vs: &nn::Path,
        dim_in: i64,
        dim_out: i64,
        key_dim: i64,
        heads: i64,
        attn_ratio: i64,
        res: i64,
        stride: i64,
    ) -> Self {
        let value_dim = attn_ratio * key_dim;
        let q_res = (res - 1) / stride + 1;
        let (bias_idx, n_offsets) = attention_bias_index(q_res, res, stride);
        Self {
            q: LinearNorm::new(&(vs / "q"), dim_in, heads * key_dim),
            kv: LinearNorm::new(&(vs / "kv"), dim_in, heads * (key_dim + value_dim)),
            proj: LinearNorm::new(&(vs / "proj"), heads * value_dim, dim_out),
            biases: vs.zeros("attention_biases", &[heads, n_offsets]),
            bias_idx,
            heads,
            key_dim,
            value_dim,
            res,
            q_res,
            stride,
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let (b, n, c) = x.size3().unwrap();
        let (h, kd, vd) = (self.heads, self.key_dim, self.value_dim);
        let kv = self.kv.forward_t(x, train).view([b, n, h, kd + vd]);
        let k = kv.narrow(3, 0, kd).permute([0, 2, 1, 3]);
        let v = kv.narrow(3, kd, vd).permute([0, 2, 1, 3]);
        let q_tokens = if self.stride == 1 {
            x.shallow_clone()
        } else {
            x.view([b, self.res, self.res, c])
                .slice(1, 0, self.res, self.stride)
                .slice(2, 0, self.res, self.stride)
                .reshape([b, self.q_res * self.q_res, c])
        };
        let nq = self.q_res * self.q_res;
        let q = self
            .q
            .forward_t(&q_tokens, train)
            .view([b, nq, h, kd])
            .permute([0, 2, 1, 3]);
        let bias = self
            .biases
            .index_select(1, &self.bias_idx)
            .view([h, nq, n]);
        let kind = q.kind();
        let attn = (q.matmul(&k.transpose(-2, -1)) * (kd as f64).powf(-0.5) + bias).softmax(-1, kind);
        let out = attn
            .matmul(&v)
            .permute([0, 2, 1, 3])
            .reshape([b, nq, h * vd])
            .hardswish();
        self.proj.forward_t(&out, train)
    }
}

#[derive(Debug)]
struct Mlp {
    up: LinearNorm,
    down: LinearNorm,
}

impl Mlp {
    fn new(vs: &nn::Path, dim: i64, ratio: i64) -> Self {
        Self {
            up: LinearNorm::new(&(vs / "up"), dim, dim * ratio),
            down: LinearNorm::new(&(vs / "down"), dim * ratio, dim),
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.down.forward_t(&self.up.forward_t(x, train).hardswish(), train)
    }
}

#[derive(Debug)]
struct TransformerBlock {
    attn: LevitAttention,
    mlp: Mlp,
}

/// One transformer stage: optional shrinking attention (no residual, it
/// changes width and grid) with its MLP, then `depth` residual blocks.
#[derive(Debug)]
struct LevitStage {
    shrink: Option<(LevitAttention, Mlp)>,
    blocks: Vec<TransformerBlock>,
    res: i64,
}

impl LevitStage {
    fn forward_t(&self, tokens: &Tensor, train: bool) -> Tensor {
        let mut x = tokens.shallow_clone();
        if let Some((attn, mlp)) = &self.shrink {
            x = attn.forward_t(&x, train);
            x = &x + mlp.forward_t(&x, train);
        }
        for blk in &self.blocks {
            x = &x + blk.attn.forward_t(&x, train);
            x = &x + blk.mlp.forward_t(&x, train);
        }
        x
    }
}

/// Plain convolutional stage for the Joint-UNet encoder.
#[derive(Debug)]
struct ConvStage {
    down: Option<ConvBn>,
    convs: Vec<ConvBn>,
}

impl ConvStage {
    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let mut x = match &self.down {
            Some(d) => d.forward_t(x, train).relu(),
            None => x.shallow_clone(),
        };
        for c in &self.convs {
            x = c.forward_t(&x, train).relu();
        }
        x
    }
}

#[derive(Debug)]
enum Stages {
    Levit(Vec<LevitStage>),
    Conv(Vec<ConvStage>),
}

/// Stem plus three stages producing the [`FeaturePyramid`].
#[derive(Debug)]
pub struct Encoder {
    stem: Vec<ConvBn>,
    stages: Stages,
}

/// Token-grid side after each stage for a 14×14 stem output.
pub(crate) fn stage_resolutions(stem_res: i64) -> [i64; 3] {
    let r1 = stem_res;
    let r2 = (r1 - 1) / 2 + 1;
    let r3 = (r2 - 1) / 2 + 1;
    [r1, r2, r3]
}

impl Encoder {
    pub fn new(vs: &nn::Path, cfg: &NetworkConfig) -> Self {
        let mut stem = Vec::with_capacity(4);
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.stem_channels.iter().enumerate() {
            stem.push(ConvBn::new(&(vs / "stem" / i), c_in, c, 2));
            c_in = c;
        }
        let res = stage_resolutions(cfg.input_size / 16);
        let stages = match cfg.encoder {
            EncoderKind::Levit => {
                let mut stages = Vec::with_capacity(3);
                let mut dim_in = cfg.stem_channels[3];
                for i in 0..3 {
                    let sp = vs / "stages" / i;
                    let dim = cfg.stage_dims[i];
                    let heads = cfg.stage_heads[i];
                    // The first stage keeps the stem grid; a width change there
                    // is absorbed by a non-shrinking projection.
                    let shrink = if i == 0 {
                        (dim_in != dim).then(|| {
                            (
                                LevitAttention::new(&(&sp / "shrink"), dim_in, dim, cfg.key_dim, heads, 2, res[0], 1),
                                Mlp::new(&(&sp / "shrink_mlp"), dim, cfg.mlp_ratio),
                            )
                        })
                    } else {
                        let shrink_heads = (dim_in / cfg.key_dim).max(1);
                        Some((
                            LevitAttention::new(&(&sp / "shrink"), dim_in, dim, cfg.key_dim, shrink_heads, 4, res[i - 1], 2),
                            Mlp::new(&(&sp / "shrink_mlp"), dim, cfg.mlp_ratio),
                        ))
                    };
                    let blocks = (0..cfg.stage_depths[i])
                        .map(|j| {
                            let bp = &sp / "blocks" / j;
                            TransformerBlock {
                                attn: LevitAttention::new(&(&bp / "attn"), dim, dim, cfg.key_dim, heads, 2, res[i], 1),
                                mlp: Mlp::new(&(&bp / "mlp"), dim, cfg.mlp_ratio),
                            }
                        })
                        .collect();
                    stages.push(LevitStage { shrink, blocks, res: res[i] });
                    dim_in = dim;
                }
                Stages::Levit(stages)
            }
            EncoderKind::Conv => {
                let mut stages = Vec::with_capacity(3);
                let mut c_in = cfg.stem_channels[3];
                for i in 0..3 {
                    let sp = vs / "stages" / i;
                    let dim = cfg.stage_dims[i];
                    let down = (i > 0).then(|| ConvBn::new(&(&sp / "down"), c_in, dim, 2));
                    let first_in = if i == 0 { c_in } else { dim };
                    let convs = (0..cfg.stage_depths[i].max(1))
                        .map(|j| ConvBn::new(&(&sp / "convs" / j), if j == 0 { first_in } else { dim }, dim, 1))
                        .collect();
                    stages.push(ConvStage { down, convs });
                    c_in = dim;
                }
                Stages::Conv(stages)
            }
        };
        Self { stem, stages }
    }

    /// Input `[B, 4, 224, 224]`; shape validation is the caller's job.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> FeaturePyramid {
        let mut stem_out: Vec<Tensor> = Vec::with_capacity(4);
        let mut h = x.shallow_clone();
        for (i, layer) in self.stem.iter().enumerate() {
            h = layer.forward_t(&h, train);
            if i < 3 {
                h = h.hardswish();
            }
            stem_out.push(h.shallow_clone());
        }
        let stage_out: Vec<Tensor> = match &self.stages {
            Stages::Levit(stages) => {
                let (b, c, r, _) = h.size4().unwrap();
                let mut tokens = h.flatten(2, 3).transpose(1, 2);
                debug_assert_eq!(tokens.size(), [b, r * r, c]);
                stages
                    .iter()
                    .map(|s| {
                        tokens = s.forward_t(&tokens, train);
                        let d = tokens.size()[2];
                        tokens.transpose(1, 2).reshape([b, d, s.res, s.res])
                    })
                    .collect()
            }
            Stages::Conv(stages) => stages
                .iter()
                .map(|s| {
                    h = s.forward_t(&h, train);
                    h.shallow_clone()
                })
                .collect(),
        };
        let mut stem_it = stem_out.into_iter();
        let mut stage_it = stage_out.into_iter();
        FeaturePyramid {
            stem: std::array::from_fn(|_| stem_it.next().unwrap()),
            stages: std::array::from_fn(|_| stage_it.next().unwrap()),
        }
    }
}
