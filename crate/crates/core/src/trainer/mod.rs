//! Two-phase training, evaluation, ablations, the cascaded baseline and
//! inference.

mod ablation;
mod cascade;
mod checkpoint;
mod data;
mod eval;
mod infer;
mod plot;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, OptimizerConfig};
use tch::Tensor;

pub use ablation::{run_ablation, AblationRow, AblationRun, AblationTable, Variant};
pub use cascade::{run_cascaded_baseline, CascadeConfig, CascadeReport, MaskTranslator, CASCADE_TAG};
pub use checkpoint::{Checkpoint, CheckpointManifest, MANIFEST_NAME, WEIGHTS_NAME};
pub use data::{resize_nearest, resize_to_input, split_by_subject, stack_to_tensor, Dataset, Split};
pub use eval::{
    evaluate, evaluate_predictions, fold_ranges, predict_masks, EvalReport, FoldResult, MeanStd,
    SampleDice,
};
pub use infer::{infer, MaskPair};
pub use plot::{write_loss_csv, write_loss_png};

use crate::io;
use crate::losses::{loss_terms, LossBreakdown, MappingParams};
use crate::network::{Model, NetworkConfig};
use crate::phase_filters::FilterParams;
use crate::{Error, Result};

/// Which objective each phase optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Phase 1: both BCE terms. Phase 2: full total loss.
    PerLoss,
    /// Phase 1: surface BCE only. Phase 2: shadow BCE plus TCC.
    PerBranch,
}

impl Schedule {
    pub fn describe(self) -> &'static str {
        match self {
            Schedule::PerLoss => "phase 1 = bce_surface + bce_shadow; phase 2 = bce_surface + bce_shadow + tcc (tcc when enabled)",
            Schedule::PerBranch => "phase 1 = bce_surface; phase 2 = bce_shadow + tcc (tcc when enabled)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub filters: FilterParams,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub seed: u64,
    pub band_thickness: usize,
    pub schedule: Schedule,
    /// Ends a phase early once the smoothed loss has not improved for this
    /// many steps.
    pub patience: Option<usize>,
    pub folds: usize,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            filters: FilterParams::default(),
            batch_size: 8,
            learning_rate: 1e-4,
            phase1_steps: 1500,
            phase2_steps: 500,
            seed: 0,
            band_thickness: 8,
            schedule: Schedule::PerLoss,
            patience: None,
            folds: 5,
            dataset: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the single-core network configuration.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.filters.validate()?;
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.band_thickness < 1 {
            return Err(Error::Config("band_thickness must be at least 1".into()));
        }
        if self.folds < 1 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive when set".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn mapping(&self) -> MappingParams {
        MappingParams {
            band_thickness: self.band_thickness as i64,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }

    /// Phase (1 or 2) of a zero-based step.
    pub fn phase_of(&self, step: usize) -> u8 {
        if step < self.phase1_steps {
            1
        } else {
            2
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: u8,
    pub bce_surface: f64,
    pub bce_shadow: f64,
    pub tcc: f64,
    pub total: f64,
}

impl LogRow {
    fn new(step: usize, phase: u8, b: LossBreakdown) -> Self {
        Self {
            step,
            phase,
            bce_surface: b.bce_surface,
            bce_shadow: b.bce_shadow,
            tcc: b.tcc,
            total: b.total,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct TrainOptions {
    /// Where the checkpoint, log and loss plots go. Nothing is written when
    /// unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same
    /// configuration. Optimiser moments restart from zero.
    pub resume: Option<PathBuf>,
    /// Free-form provenance tag stored in the manifest.
    pub tag: Option<String>,
    /// Stop (and checkpoint) once this many steps are done, so a long run
    /// can be split across invocations with `resume`.
    pub stop_at: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LogRow>,
    pub wall_seconds: f64,
}

/// Exponential moving average used for the plateau check and for reporting.
#[derive(Debug, Clone, Copy)]
struct Smoother {
    value: Option<f64>,
    weight: f64,
}

impl Smoother {
    fn push(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(v) => self.weight * v + (1.0 - self.weight) * x,
        };
        self.value = Some(v);
        v
    }
}

/// Smoothed series of `total` (EMA with weight 0.9).
pub fn smoothed_totals(history: &[LogRow]) -> Vec<f64> {
    let mut s = Smoother {
        value: None,
        weight: 0.9,
    };
    history.iter().map(|r| s.push(r.total)).collect()
}

fn snapshot_dir(opts: &TrainOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .unwrap_or_else(std::env::temp_dir)
        .join("nonfinite_snapshot")
}

fn write_snapshot(model: &Model, row: &LogRow, dir: &Path) -> Result<()> {
    io::create_dir(dir)?;
    model.save(&dir.join(WEIGHTS_NAME))?;
    io::write_json_atomic(&dir.join("snapshot.json"), row)
}

/// Trains a fresh network (or resumes one) on `data`.
pub fn train(config: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if data.band_thickness != config.band_thickness {
        return Err(Error::Config(format!(
            "config band_thickness {} does not match the data ({})",
            config.band_thickness, data.band_thickness
        )));
    }
    let started = Instant::now();
    let mapping = config.mapping();
    let tcc_enabled = config.network.ablation.tcc_enabled;

    let (model, start_step, mut history) = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.manifest.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    dir.display()
                )));
            }
            let history = ck.manifest.loss_tail.clone();
            let step = ck.manifest.training_step;
            (ck.model, step, history)
        }
        None => (Model::new(&config.network, config.seed)?, 0, Vec::new()),
    };
    tch::manual_seed(config.seed as i64 ^ start_step as i64);
    let mut opt = nn::Adam::default().build(&model.vs, config.learning_rate)?;

    let mut log = match &opts.out_dir {
        Some(dir) => {
            io::create_dir(dir)?;
            let path = dir.join("train_log.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(start_step as u64));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut next_batch = |rng: &mut ChaCha8Rng| {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        idx
    };

    let total = match opts.stop_at {
        Some(n) => n.min(config.total_steps()),
        None => config.total_steps(),
    };
    let mut step = start_step;
    let mut phase_guard = (0u8, Smoother { value: None, weight: 0.9 }, f64::INFINITY, 0usize);
    while step < total {
        let phase = config.phase_of(step);
        if phase_guard.0 != phase {
            phase_guard = (phase, Smoother { value: None, weight: 0.9 }, f64::INFINITY, 0);
        }
        let idx = next_batch(&mut rng);
        let (x, y1, y2) = data.batch(&idx);
        let pred = model.forward(&x, true)?;
        let tcc_on = tcc_enabled && phase == 2;
        let terms = loss_terms(&y1, &y2, &pred.y1_hat, &pred.y2_hat, &mapping, tcc_on)?;
        let objective: Tensor = match (config.schedule, phase) {
            (Schedule::PerLoss, _) => terms.total.shallow_clone(),
            (Schedule::PerBranch, 1) => terms.bce_surface.shallow_clone(),
            (Schedule::PerBranch, _) => &terms.bce_shadow + &terms.tcc,
        };
        let row = LogRow::new(step, phase, terms.breakdown());
        if !row.total.is_finite() || !objective.double_value(&[]).is_finite() {
            let dir = snapshot_dir(opts);
            write_snapshot(&model, &row, &dir)?;
            return Err(Error::NonFinite {
                step,
                phase,
                snapshot: dir,
            });
        }
        opt.backward_step(&objective);
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(row);
        step += 1;
        if step % 50 == 0 {
            log::info!(
                "step {step}/{total} phase {phase} total {:.4} (bce {:.4}/{:.4}, tcc {:.4})",
                row.total,
                row.bce_surface,
                row.bce_shadow,
                row.tcc
            );
        }

        if let Some(patience) = config.patience {
            let smoothed = phase_guard.1.push(row.total);
            if smoothed < phase_guard.2 * (1.0 - 1e-4) {
                phase_guard.2 = smoothed;
                phase_guard.3 = 0;
            } else {
                phase_guard.3 += 1;
            }
            if phase_guard.3 >= patience {
                log::info!("phase {phase} plateaued at step {step}");
                step = if phase == 1 { config.phase1_steps.min(total) } else { total };
            }
        }
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }

    let final_phase = history.last().map_or(config.phase_of(0), |r| r.phase);
    let manifest = CheckpointManifest::new(config, &model, step, final_phase, &data.hash, &history, opts.tag.clone());
    let checkpoint = Checkpoint { model, manifest };
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(dir)?;
        write_loss_csv(&dir.join("loss.csv"), &history)?;
        write_loss_png(&dir.join("loss.png"), &history)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
