use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, Dataset, MeanStd, Split, TrainConfig, TrainOptions, MANIFEST_NAME};
use crate::io;
use crate::network::EncoderKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "ctft")]
    Ctft,
    #[serde(rename = "ctft+tcc")]
    CtftTcc,
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "unet+ctft")]
    UnetCtft,
}

impl Variant {
    pub const SSNET: [Variant; 3] = [Variant::Base, Variant::Ctft, Variant::CtftTcc];
    pub const JOINT_UNET: [Variant; 2] = [Variant::Unet, Variant::UnetCtft];
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Ctft,
        Variant::CtftTcc,
        Variant::Unet,
        Variant::UnetCtft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Ctft => "ctft",
            Variant::CtftTcc => "ctft+tcc",
            Variant::Unet => "unet",
            Variant::UnetCtft => "unet+ctft",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "SSNet (Base)",
            Variant::Ctft => "SSNet + CTFT",
            Variant::CtftTcc => "SSNet + CTFT + TCC",
            Variant::Unet => "Joint-UNet",
            Variant::UnetCtft => "Joint-UNet + CTFT",
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Ctft => "ctft",
            Variant::CtftTcc => "ctft_tcc",
            Variant::Unet => "unet",
            Variant::UnetCtft => "unet_ctft",
        }
    }

    pub fn is_joint_unet(self) -> bool {
        matches!(self, Variant::Unet | Variant::UnetCtft)
    }

    /// Published SonixTouch dice (surface, shadow) in percent, for
    /// qualitative comparison only.
    pub fn reference(self) -> (f64, f64) {
        match self {
            Variant::Base => (82.95, 93.34),
            Variant::Ctft => (84.03, 94.88),
            Variant::CtftTcc => (87.03, 96.18),
            Variant::Unet => (76.45, 86.06),
            Variant::UnetCtft => (77.19, 89.01),
        }
    }

    /// The base configuration with this variant's encoder and ablation flags.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (encoder, ctft, tcc) = match self {
            Variant::Base => (EncoderKind::Levit, false, false),
            Variant::Ctft => (EncoderKind::Levit, true, false),
            Variant::CtftTcc => (EncoderKind::Levit, true, true),
            Variant::Unet => (EncoderKind::Conv, false, false),
            Variant::UnetCtft => (EncoderKind::Conv, true, false),
        };
        cfg.network.encoder = encoder;
        cfg.network.ablation.ctft_enabled = ctft;
        cfg.network.ablation.tcc_enabled = tcc;
        cfg
    }

    /// Parses a comma-separated list such as `"base,ctft,ctft+tcc"`.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        let v: Vec<Variant> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Variant::from_str)
            .collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::Config("no ablation variants given".into()));
        }
        Ok(v)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected one of base, ctft, ctft+tcc, unet, unet+ctft)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub dice_surface: f64,
    pub dice_shadow: f64,
    pub manifest: PathBuf,
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub dice_surface: MeanStd,
    pub dice_shadow: MeanStd,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub dataset_hash: String,
}

/// Trains every variant for every seed on `split.train` and scores it on
/// `split.test`. Each run gets its own checkpoint directory under `out_dir`.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    split: &Split,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationTable> {
    base.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let train_data = data.subset(&split.train)?;
    let test_data = data.subset(&split.test)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let dir = out_dir.join(variant.dir_name()).join(format!("seed{seed}"));
            log::info!("ablation: {} seed {seed}", variant.name());
            let outcome = train(
                &cfg,
                &train_data,
                &TrainOptions {
                    out_dir: Some(dir.clone()),
                    resume: None,
                    tag: Some(format!("ablation:{}", variant.name())),
                    ..Default::default()
                },
            )?;
            let report = evaluate(&outcome.checkpoint, &test_data, 1)?;
            runs.push(AblationRun {
                seed,
                dice_surface: report.dice_surface.mean,
                dice_shadow: report.dice_shadow.mean,
                manifest: dir.join(MANIFEST_NAME),
                config_hash: outcome.checkpoint.manifest.config_hash.clone(),
                dataset_hash: outcome.checkpoint.manifest.dataset_hash.clone(),
            });
        }
        let s: Vec<f64> = runs.iter().map(|r| r.dice_surface).collect();
        let sh: Vec<f64> = runs.iter().map(|r| r.dice_shadow).collect();
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            dice_surface: MeanStd::of(&s),
            dice_shadow: MeanStd::of(&sh),
            runs,
        });
    }
    let table = AblationTable {
        rows,
        seeds: seeds.to_vec(),
        dataset_hash: train_data.hash.clone(),
    };
    if !table.shares_dataset_hash() {
        return Err(Error::Contract("ablation runs saw different datasets".into()));
    }
    for line in table.trend_lines() {
        log::info!("{line}");
    }
    io::create_dir(out_dir)?;
    io::write_json_atomic(&out_dir.join("ablation.json"), &table)?;
    let txt = out_dir.join("ablation.txt");
    std::fs::write(&txt, table.render()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}

impl AblationTable {
    pub fn shares_dataset_hash(&self) -> bool {
        self.rows
            .iter()
            .flat_map(|r| &r.runs)
            .all(|r| r.dataset_hash == self.dataset_hash)
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    fn render_block(&self, title: &str, variants: &[Variant]) -> Option<String> {
        let rows: Vec<&AblationRow> = variants.iter().filter_map(|&v| self.row(v)).collect();
        if rows.is_empty() {
            return None;
        }
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<22} | {:^15} | {:^15}", "Method", "Surface (%)", "Shadow (%)");
        let _ = writeln!(s, "{:-<22}-+-{:-<15}-+-{:-<15}", "", "", "");
        for r in rows {
            let _ = writeln!(
                s,
                "{:<22} | {:>15} | {:>15}",
                r.label,
                r.dice_surface.percent(),
                r.dice_shadow.percent()
            );
        }
        Some(s)
    }

    /// SSNet rows, then Joint-UNet rows, then the trend comparison.
    pub fn render(&self) -> String {
        let n = self.seeds.len();
        let mut parts = Vec::new();
        parts.extend(self.render_block(&format!("SSNet ablation (mean ± std over {n} seeds)"), &Variant::SSNET));
        parts.extend(self.render_block(&format!("Joint-UNet ablation (mean ± std over {n} seeds)"), &Variant::JOINT_UNET));
        let mut out = parts.join("\n");
        out.push('\n');
        for line in self.trend_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// For each block, the measured ordering next to the published one. This
    /// is a report, not a check.
    pub fn trend_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for block in [&Variant::SSNET[..], &Variant::JOINT_UNET[..]] {
            let rows: Vec<&AblationRow> = block.iter().filter_map(|&v| self.row(v)).collect();
            if rows.len() < 2 {
                continue;
            }
            for (task, pick) in [("surface", 0usize), ("shadow", 1)] {
                let measured: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        let m = if pick == 0 { r.dice_surface.mean } else { r.dice_shadow.mean };
                        format!("{:.2}", 100.0 * m)
                    })
                    .collect();
                let published: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        let (s, sh) = r.variant.reference();
                        format!("{:.2}", if pick == 0 { s } else { sh })
                    })
                    .collect();
                let increasing = rows.windows(2).all(|w| {
                    let (a, b) = if pick == 0 {
                        (w[0].dice_surface.mean, w[1].dice_surface.mean)
                    } else {
                        (w[0].dice_shadow.mean, w[1].dice_shadow.mean)
                    };
                    b >= a
                });
                lines.push(format!(
                    "trend {task}: measured {} vs published {} ({})",
                    measured.join(" -> "),
                    published.join(" -> "),
                    if increasing { "same direction" } else { "differs" }
                ));
            }
        }
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse_and_round_trip() {
        let v = Variant::parse_list("base, ctft,ctft+tcc").unwrap();
        assert_eq!(v, Variant::SSNET.to_vec());
        assert!(Variant::parse_list("base,bogus").is_err());
        assert!(Variant::parse_list("").is_err());
        for v in Variant::ALL {
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(j, format!("\"{}\"", v.name()));
        }
    }

    #[test]
    fn apply_sets_flags() {
        let base = TrainConfig::desk();
        let c = Variant::CtftTcc.apply(&base);
        assert!(c.network.ablation.ctft_enabled && c.network.ablation.tcc_enabled);
        let u = Variant::Unet.apply(&base);
        assert_eq!(u.network.encoder, EncoderKind::Conv);
        assert!(!u.network.ablation.ctft_enabled);
        assert_ne!(Variant::Base.apply(&base).hash(), Variant::Ctft.apply(&base).hash());
    }
}
