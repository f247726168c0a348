//! Cascaded baseline: a separate network maps one task's predicted mask to
//! the other task, instead of predicting both jointly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, OptimizerConfig};
use tch::{Device, Kind, Tensor};

use super::{evaluate_predictions, Checkpoint, Dataset, EvalReport};
use crate::io::{self, tensor_to_mask};
use crate::losses::{bce, dice};
use crate::network::{Decoder, Encoder, EncoderKind, NetworkConfig, PROB_EPS};
use crate::{Error, Mask, Result};

pub const CASCADE_TAG: &str = "cascaded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Widths of the translator networks (input channels are forced to 1 and
    /// the encoder to plain convolutions).
    pub network: NetworkConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk(),
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Single-input, single-output encoder–decoder over binary masks.
pub struct MaskTranslator {
    pub vs: nn::VarStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl std::fmt::Debug for MaskTranslator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskTranslator").finish_non_exhaustive()
    }
}

impl MaskTranslator {
    pub fn new(network: &NetworkConfig, seed: u64) -> Self {
        let mut cfg = network.clone();
        cfg.in_channels = 1;
        cfg.encoder = EncoderKind::Conv;
        tch::manual_seed(seed as i64);
        let vs = nn::VarStore::new(Device::Cpu);
        let encoder = Encoder::new(&(vs.root() / "encoder"), &cfg);
        let decoder = Decoder::new(&(vs.root() / "decoder"), &cfg);
        Self { vs, encoder, decoder }
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Tensor {
        self.decoder.forward_t(&self.encoder.forward_t(x, train), train)
    }

    pub fn probabilities(&self, x: &Tensor, train: bool) -> Tensor {
        self.logits(x, train).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Fits `input → target` with BCE and Adam.
    pub fn fit(&mut self, input: &Tensor, target: &Tensor, cfg: &CascadeConfig) -> Result<Vec<f64>> {
        let n = input.size()[0] as usize;
        let mut opt = nn::Adam::default().build(&self.vs, cfg.learning_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut idx = Vec::with_capacity(cfg.batch_size);
            while idx.len() < cfg.batch_size {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor] as i64);
                cursor += 1;
            }
            let idx = Tensor::from_slice(&idx);
            let x = input.index_select(0, &idx);
            let y = target.index_select(0, &idx);
            let loss = bce(&y, &self.probabilities(&x, true))?;
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    phase: 0,
                    snapshot: std::env::temp_dir(),
                });
            }
            opt.backward_step(&loss);
            losses.push(v);
        }
        Ok(losses)
    }

    /// Thresholded predictions, one mask per row.
    pub fn predict_masks(&self, input: &Tensor) -> Vec<Mask> {
        let n = input.size()[0];
        let mut out = Vec::with_capacity(n as usize);
        tch::no_grad(|| {
            for start in (0..n).step_by(8) {
                let len = 8.min(n - start);
                let p = self.probabilities(&input.narrow(0, start, len), false);
                for i in 0..len {
                    out.push(tensor_to_mask(&p.get(i).get(0)));
                }
            }
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    /// Composed pipeline: shadow from the predicted surface and surface from
    /// the predicted shadow. Tagged `"cascaded"`.
    pub report: EvalReport,
    /// Second stage fed ground-truth masks instead of predictions.
    pub gt_fed_dice_shadow: f64,
    pub gt_fed_dice_surface: f64,
    pub upstream_config_hash: String,
    pub config: CascadeConfig,
}

/// Thresholded upstream predictions as float tensors `[N, 1, 224, 224]`.
fn upstream_masks(ck: &Checkpoint, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = inputs.size()[0];
    let (mut s, mut sh) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(8) {
        let len = 8.min(n - start);
        let p = ck.model.predict(&inputs.narrow(0, start, len))?;
        s.push(p.y1_hat.ge(0.5).to_kind(Kind::Float));
        sh.push(p.y2_hat.ge(0.5).to_kind(Kind::Float));
    }
    Ok((Tensor::cat(&s, 0), Tensor::cat(&sh, 0)))
}

fn mean_dice(pred: &[Mask], target: &Tensor) -> Result<f64> {
    let mut sum = 0.0;
    for (i, p) in pred.iter().enumerate() {
        sum += dice(p, &tensor_to_mask(&target.get(i as i64).get(0)))?;
    }
    Ok(sum / pred.len() as f64)
}

/// Trains the two translators on the upstream model's train-set predictions
/// and scores the composed pipeline on `test`.
pub fn run_cascaded_baseline(
    config: &CascadeConfig,
    upstream: &Path,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<CascadeReport> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Config("cascade steps and batch_size must be positive".into()));
    }
    let ck = Checkpoint::load(upstream).map_err(|e| match e {
        Error::Io { path, source } => Error::Io {
            path,
            source: std::io::Error::new(
                source.kind(),
                format!("upstream checkpoint unavailable: {source}"),
            ),
        },
        other => other,
    })?;
    let (s_train, sh_train) = upstream_masks(&ck, &train.inputs)?;
    let (s_test, sh_test) = upstream_masks(&ck, &test.inputs)?;

    let mut to_shadow = MaskTranslator::new(&config.network, config.seed);
    to_shadow.fit(&s_train, &train.y2, config)?;
    let mut to_surface = MaskTranslator::new(&config.network, config.seed.wrapping_add(1));
    to_surface.fit(&sh_train, &train.y1, config)?;

    let shadow_from_pred = to_shadow.predict_masks(&s_test);
    let surface_from_pred = to_surface.predict_masks(&sh_test);
    let composed: Vec<(Mask, Mask)> = surface_from_pred.into_iter().zip(shadow_from_pred).collect();
    let mut report = evaluate_predictions(&composed, test, 1)?;
    report.tag = Some(CASCADE_TAG.to_string());
    report.config_hash = Some(ck.manifest.config_hash.clone());

    let gt_fed_dice_shadow = mean_dice(&to_shadow.predict_masks(&test.y1), &test.y2)?;
    let gt_fed_dice_surface = mean_dice(&to_surface.predict_masks(&test.y2), &test.y1)?;
    let out = CascadeReport {
        report,
        gt_fed_dice_shadow,
        gt_fed_dice_surface,
        upstream_config_hash: ck.manifest.config_hash.clone(),
        config: config.clone(),
    };
    if let Some(dir) = out_dir {
        io::create_dir(dir)?;
        io::write_json_atomic(&dir.join("cascade.json"), &out)?;
        out.report.save(dir, "Cascaded")?;
    }
    Ok(out)
}
