//! SSNet: a shared conv+transformer encoder feeding two task decoders that
//! exchange features through cross task feature transfer (CTFT) blocks.

mod ctft;
mod decoder;
mod encoder;

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

pub use ctft::{Ctft, CtftFeatures, SqueezeExcite};
pub use decoder::{Decoder, DecoderBlock, DECODER_RESOLUTIONS};
pub use encoder::Encoder;

use crate::{Error, Result};

/// Network input side; frames are resized to this before the forward pass.
pub const INPUT_SIZE: i64 = 224;

/// Spatial sides of the four stem outputs for a 224 input.
pub const STEM_RESOLUTIONS: [i64; 4] = [112, 56, 28, 14];

/// Spatial sides of the three transformer stage outputs.
pub const STAGE_RESOLUTIONS: [i64; 3] = [14, 7, 4];

/// Probabilities are kept this far inside (0,1) so that the logistic output
/// stays in the open interval even in single precision.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// LeViT-style attention stages (SSNet).
    Levit,
    /// Plain strided conv stages (Joint-UNet baseline).
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub ctft_enabled: bool,
    pub tcc_enabled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ctft_enabled: true,
            tcc_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: i64,
    pub input_size: i64,
    pub encoder: EncoderKind,
    /// Output widths of the four stride-2 stem convolutions, ascending.
    pub stem_channels: [i64; 4],
    pub stage_dims: [i64; 3],
    pub stage_depths: [i64; 3],
    pub stage_heads: [i64; 3],
    /// Query/key width per attention head.
    pub key_dim: i64,
    pub mlp_ratio: i64,
    /// Output width of each decoder block (resolutions 7 … 224).
    pub decoder_channels: [i64; 6],
    pub se_reduction: i64,
    /// Decoder block indices after which CTFT exchanges features.
    pub ctft_sites: Vec<usize>,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    /// Small LeViT-style configuration.
    fn default() -> Self {
        Self {
            in_channels: 4,
            input_size: INPUT_SIZE,
            encoder: EncoderKind::Levit,
            stem_channels: [16, 32, 64, 128],
            stage_dims: [128, 256, 384],
            stage_depths: [2, 3, 4],
            stage_heads: [4, 6, 8],
            key_dim: 16,
            mlp_ratio: 2,
            decoder_channels: [192, 128, 64, 32, 16, 16],
            se_reduction: 8,
            ctft_sites: vec![1, 2, 3],
            ablation: Ablation::default(),
        }
    }
}

impl NetworkConfig {
    /// Narrow configuration sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            stem_channels: [8, 16, 24, 32],
            stage_dims: [32, 48, 64],
            stage_depths: [1, 1, 1],
            stage_heads: [2, 3, 4],
            decoder_channels: [48, 32, 24, 16, 8, 8],
            se_reduction: 4,
            ..Self::default()
        }
    }

    /// The Joint-UNet variant of this configuration.
    pub fn with_conv_encoder(mut self) -> Self {
        self.encoder = EncoderKind::Conv;
        self
    }

    pub fn with_ablation(mut self, ctft_enabled: bool, tcc_enabled: bool) -> Self {
        self.ablation = Ablation {
            ctft_enabled,
            tcc_enabled,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 {
            return Err(Error::Config(format!(
                "in_channels must be 4 (bmode, lpt, lp, bse), got {}",
                self.in_channels
            )));
        }
        if self.input_size != INPUT_SIZE {
            return Err(Error::Config(format!(
                "input_size must be {INPUT_SIZE}, got {}",
                self.input_size
            )));
        }
        let positive = |name: &str, v: &[i64]| {
            if v.iter().any(|&x| x < 1) {
                Err(Error::Config(format!("{name} entries must be positive, got {v:?}")))
            } else {
                Ok(())
            }
        };
        positive("stem_channels", &self.stem_channels)?;
        positive("stage_dims", &self.stage_dims)?;
        positive("stage_heads", &self.stage_heads)?;
        positive("decoder_channels", &self.decoder_channels)?;
        if self.stage_depths.iter().any(|&d| d < 0) {
            return Err(Error::Config("stage_depths must be non-negative".into()));
        }
        if self.stem_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stem_channels must be ascending, got {:?}",
                self.stem_channels
            )));
        }
        if self.key_dim < 1 || self.mlp_ratio < 1 {
            return Err(Error::Config("key_dim and mlp_ratio must be positive".into()));
        }
        if self.se_reduction < 1 {
            return Err(Error::Config("se_reduction must be at least 1".into()));
        }
        for &site in &self.ctft_sites {
            let Some(&c) = self.decoder_channels.get(site) else {
                return Err(Error::Config(format!(
                    "ctft site {site} is not a decoder block index (0..6)"
                )));
            };
            if c % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "se_reduction {} does not divide the {c} channels at ctft site {site}",
                    self.se_reduction
                )));
            }
        }
        Ok(())
    }
}

/// Encoder outputs: four stem levels (112, 56, 28, 14) and three stage
/// levels (14, 7, 4), each `[B, C, S, S]`.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub stem: [Tensor; 4],
    pub stages: [Tensor; 3],
}

impl FeaturePyramid {
    /// `(stem sides, stage sides)`.
    pub fn resolutions(&self) -> ([i64; 4], [i64; 3]) {
        (
            std::array::from_fn(|i| self.stem[i].size()[2]),
            std::array::from_fn(|i| self.stages[i].size()[2]),
        )
    }
}

/// Dual-decoder output. Logits are kept for inspection; the soft masks are
/// the logistic of the logits held strictly inside (0,1).
#[derive(Debug)]
pub struct PredictionPair {
    pub surface_logits: Tensor,
    pub shadow_logits: Tensor,
    pub y1_hat: Tensor,
    pub y2_hat: Tensor,
}

impl PredictionPair {
    pub fn from_logits(surface_logits: Tensor, shadow_logits: Tensor) -> Self {
        let squash = |t: &Tensor| t.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
        Self {
            y1_hat: squash(&surface_logits),
            y2_hat: squash(&shadow_logits),
            surface_logits,
            shadow_logits,
        }
    }
}

/// The two-branch network.
#[derive(Debug)]
pub struct SsNet {
    pub config: NetworkConfig,
    pub encoder: Encoder,
    pub surface: Decoder,
    pub shadow: Decoder,
    /// One transfer block per configured site, present only when CTFT is
    /// enabled.
    pub ctft: Vec<(usize, Ctft)>,
}

impl SsNet {
    pub fn new(vs: &nn::Path, config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let ctft = if config.ablation.ctft_enabled {
            let mut sites = config.ctft_sites.clone();
            sites.sort_unstable();
            sites.dedup();
            sites
                .into_iter()
                .map(|s| {
                    (
                        s,
                        Ctft::new(&(vs / "ctft" / s), config.decoder_channels[s], config.se_reduction),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(&(vs / "encoder"), config),
            surface: Decoder::new(&(vs / "surface"), config),
            shadow: Decoder::new(&(vs / "shadow"), config),
            ctft,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != n || s[3] != n {
            return Err(Error::Contract(format!(
                "network input must be [B, {}, {n}, {n}], got {s:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        self.check_input(x)?;
        Ok(self.encoder.forward_t(x, train))
    }

    /// Runs both decoders, applying CTFT after the configured blocks.
    pub fn decode_dual(&self, pyramid: &FeaturePyramid, train: bool) -> Result<PredictionPair> {
        let (stem_res, stage_res) = pyramid.resolutions();
        let expect_stem: [i64; 4] = std::array::from_fn(|i| self.config.input_size >> (i + 1));
        if stem_res != expect_stem || pyramid.stages[2].size()[1] != self.config.stage_dims[2] {
            return Err(Error::Contract(format!(
                "pyramid with stem sides {stem_res:?} / stage sides {stage_res:?} does not match the decoder config"
            )));
        }
        let mut fs = pyramid.stages[2].shallow_clone();
        let mut fsh = pyramid.stages[2].shallow_clone();
        for i in 0..self.surface.blocks.len() {
            let skips = decoder::skips(pyramid, i);
            fs = self.surface.blocks[i].forward_t(&fs, &skips, train);
            fsh = self.shadow.blocks[i].forward_t(&fsh, &skips, train);
            if let Some((_, block)) = self.ctft.iter().find(|(s, _)| *s == i) {
                (fs, fsh) = block.forward(&fs, &fsh, self.config.ablation.ctft_enabled)?;
            }
        }
        Ok(PredictionPair::from_logits(
            self.surface.head.forward(&fs),
            self.shadow.head.forward(&fsh),
        ))
    }

    /// `[B, 4, 224, 224]` → two `[B, 1, 224, 224]` soft masks.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<PredictionPair> {
        let pyramid = self.encode(x, train)?;
        self.decode_dual(&pyramid, train)
    }
}

/// A network together with the variable store that owns its weights.
pub struct Model {
    pub vs: nn::VarStore,
    pub net: SsNet,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.net.config)
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Fresh weights drawn from the global torch RNG seeded with `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_kind(config, seed, Kind::Float)
    }

    pub fn with_kind(config: &NetworkConfig, seed: u64, kind: Kind) -> Result<Self> {
        tch::manual_seed(seed as i64);
        let mut vs = nn::VarStore::new(Device::Cpu);
        let net = SsNet::new(&vs.root(), config)?;
        if kind != Kind::Float {
            vs.set_kind(kind);
        }
        Ok(Self { vs, net })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.config
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<PredictionPair> {
        self.net.forward(x, train)
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<PredictionPair> {
        tch::no_grad(|| self.net.forward(x, false))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.vs.save(path)?)
    }

    pub fn load(config: &NetworkConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.vs.load(path)?;
        Ok(model)
    }

    pub fn parameter_count(&self) -> i64 {
        self.vs.trainable_variables().iter().map(Tensor::numel).sum::<usize>() as i64
    }

    /// Trainable variables under a name prefix such as `"shadow.blocks.1"`.
    pub fn variables_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut vars: Vec<(String, Tensor)> = self
            .vs
            .variables()
            .into_iter()
            .filter(|(name, t)| name.starts_with(prefix) && t.requires_grad())
            .collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }
}

/// Number of trainable parameters of a freshly built network.
pub fn count_parameters(config: &NetworkConfig) -> Result<i64> {
    let vs = nn::VarStore::new(Device::Cpu);
    let _net = SsNet::new(&vs.root(), config)?;
    Ok(vs.trainable_variables().iter().map(Tensor::numel).sum::<usize>() as i64)
}
