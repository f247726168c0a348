use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::{Checkpoint, Dataset};
use crate::io::{self, tensor_to_mask};
use crate::losses::dice;
use crate::network::Model;
use crate::{Error, Mask, Result};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// `"87.03 ± 0.21"` with values shown as percentages.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub samples: usize,
    pub dice_surface: f64,
    pub dice_shadow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: String,
    pub fold: usize,
    pub dice_surface: f64,
    pub dice_shadow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: Option<String>,
    pub folds: Vec<FoldResult>,
    /// Mean and spread over fold means.
    pub dice_surface: MeanStd,
    pub dice_shadow: MeanStd,
    pub samples: Vec<SampleDice>,
    pub dataset_hash: String,
    pub config_hash: Option<String>,
}

/// `k` contiguous, disjoint folds covering `0..n`; sizes differ by at most 1.
pub fn fold_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Param(format!("cannot split {n} samples into {k} folds")));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Thresholded `(surface, shadow)` masks for every row of `inputs`.
pub fn predict_masks(model: &Model, inputs: &Tensor) -> Result<Vec<(Mask, Mask)>> {
    let n = inputs.size()[0];
    let mut out = Vec::with_capacity(n as usize);
    let mut start = 0;
    while start < n {
        let len = (EVAL_CHUNK as i64).min(n - start);
        let pred = model.predict(&inputs.narrow(0, start, len))?;
        for i in 0..len {
            out.push((
                tensor_to_mask(&pred.y1_hat.get(i).get(0)),
                tensor_to_mask(&pred.y2_hat.get(i).get(0)),
            ));
        }
        start += len;
    }
    Ok(out)
}

/// Scores precomputed masks against the dataset targets.
pub fn evaluate_predictions(preds: &[(Mask, Mask)], data: &Dataset, k: usize) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            data.len()
        )));
    }
    let folds = fold_ranges(data.len(), k)?;
    let mut samples = Vec::with_capacity(data.len());
    let mut fold_results = Vec::with_capacity(k);
    for (f, range) in folds.into_iter().enumerate() {
        let (mut ds, mut dsh) = (Vec::new(), Vec::new());
        for i in range.clone() {
            let y1 = tensor_to_mask(&data.y1.get(i as i64).get(0));
            let y2 = tensor_to_mask(&data.y2.get(i as i64).get(0));
            let s = dice(&preds[i].0, &y1)?;
            let sh = dice(&preds[i].1, &y2)?;
            ds.push(s);
            dsh.push(sh);
            samples.push(SampleDice {
                id: data.ids[i].clone(),
                fold: f,
                dice_surface: s,
                dice_shadow: sh,
            });
        }
        fold_results.push(FoldResult {
            fold: f,
            samples: range.len(),
            dice_surface: MeanStd::of(&ds).mean,
            dice_shadow: MeanStd::of(&dsh).mean,
        });
    }
    let fs: Vec<f64> = fold_results.iter().map(|f| f.dice_surface).collect();
    let fsh: Vec<f64> = fold_results.iter().map(|f| f.dice_shadow).collect();
    Ok(EvalReport {
        tag: None,
        dice_surface: MeanStd::of(&fs),
        dice_shadow: MeanStd::of(&fsh),
        folds: fold_results,
        samples,
        dataset_hash: data.hash.clone(),
        config_hash: None,
    })
}

/// Predicts every sample with the checkpoint and scores it over `k` folds.
pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset, k: usize) -> Result<EvalReport> {
    let m = &checkpoint.manifest;
    m.validate()?;
    if m.config.network != checkpoint.model.net.config {
        return Err(Error::Config(
            "checkpoint manifest does not describe the loaded network".into(),
        ));
    }
    if m.config.band_thickness != data.band_thickness {
        return Err(Error::Config(format!(
            "checkpoint trained with band thickness {} but data has {}",
            m.config.band_thickness, data.band_thickness
        )));
    }
    let preds = predict_masks(&checkpoint.model, &data.inputs)?;
    let mut report = evaluate_predictions(&preds, data, k)?;
    report.config_hash = Some(m.config_hash.clone());
    report.tag = m.tag.clone();
    Ok(report)
}

impl EvalReport {
    /// Fold-by-fold dice followed by the aggregate row, in percent.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = String::new();
        let width = method.len().max(8);
        let _ = writeln!(s, "{:<width$} | {:^15} | {:^15}", "Method", "Bone surface", "Bone shadow");
        let _ = writeln!(s, "{:-<width$}-+-{:-<15}-+-{:-<15}", "", "", "");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<width$} | {:>15.2} | {:>15.2}",
                format!("fold {}", f.fold + 1),
                100.0 * f.dice_surface,
                100.0 * f.dice_shadow
            );
        }
        let _ = writeln!(
            s,
            "{:<width$} | {:>15} | {:>15}",
            method,
            self.dice_surface.percent(),
            self.dice_shadow.percent()
        );
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path, method: &str) -> Result<()> {
        io::create_dir(dir)?;
        io::write_json_atomic(&dir.join("report.json"), self)?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_table(method)).map_err(|e| Error::io(&txt, e))
    }
}
