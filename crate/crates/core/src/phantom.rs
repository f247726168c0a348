//! Seeded synthetic B-mode phantoms with exactly consistent surface and
//! shadow masks.
//!
//! Every bone-bearing column carries a surface band of exactly
//! `band_thickness` rows starting at a smooth random depth `r(x)`; the shadow
//! mask is the column-wise running maximum of the surface mask, so it starts
//! at the top of the band and runs to the bottom of the frame.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::phase_filters::UltrasoundFrame;
use crate::{io, Error, Mask, Result};

const MAX_GEOMETRY_ATTEMPTS: usize = 100;

/// Rows above the band used when comparing tissue and shadow brightness.
pub const ABOVE_BAND_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Rows of the surface band in every bone-bearing column.
    pub band_thickness: usize,
    /// Range of the cubic deviation amplitude of the surface curve, pixels.
    pub surface_curvature: [f64; 2],
    /// Range of the band depth, as fractions of the height.
    pub surface_depth: [f64; 2],
    /// Range of the bone-bearing column span, as fractions of the width.
    pub bone_extent: [f64; 2],
    pub speckle_strength: f64,
    /// Exponential intensity decay per frame height of depth.
    pub depth_attenuation: f64,
    /// Base seed for datasets; individual samples derive their own seeds.
    pub seed: u64,
    /// Consecutive samples sharing tissue characteristics (a "subject").
    pub samples_per_group: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            band_thickness: 8,
            surface_curvature: [0.0, 24.0],
            surface_depth: [0.3, 0.7],
            bone_extent: [0.4, 0.9],
            speckle_strength: 0.25,
            depth_attenuation: 0.8,
            seed: 0,
            samples_per_group: 8,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Param(format!(
                "phantom must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.band_thickness < 1 || self.band_thickness >= self.height {
            return Err(Error::Param(format!(
                "band_thickness must be in [1, height), got {}",
                self.band_thickness
            )));
        }
        let fraction_range = |name: &str, r: [f64; 2]| {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                Err(Error::Param(format!("{name} must be an ordered range within [0,1], got {r:?}")))
            } else {
                Ok(())
            }
        };
        fraction_range("surface_depth", self.surface_depth)?;
        fraction_range("bone_extent", self.bone_extent)?;
        let c = self.surface_curvature;
        if !(c[0] >= 0.0 && c[0] <= c[1] && c[1].is_finite()) {
            return Err(Error::Param(format!(
                "surface_curvature must be an ordered non-negative range, got {c:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return Err(Error::Param("speckle_strength must lie in [0,1]".into()));
        }
        if !(self.depth_attenuation > 0.0) {
            return Err(Error::Param("depth_attenuation must be positive".into()));
        }
        if self.samples_per_group == 0 {
            return Err(Error::Param("samples_per_group must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of the `index`-th dataset sample.
    pub fn sample_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }

    pub fn group_of(&self, index: usize) -> u64 {
        (index / self.samples_per_group) as u64
    }

    fn group_seed(&self, group: u64) -> u64 {
        splitmix64(self.seed.wrapping_add(0x5851_f42d_4c95_7f2d) ^ splitmix64(group))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Geometry and provenance of one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub group: u64,
    pub band_thickness: usize,
    /// First and one-past-last bone-bearing column; equal when there is no bone.
    pub bone_columns: [usize; 2],
    /// Cubic coefficients of the surface depth over `s ∈ [−1, 1]`.
    pub curve: [f64; 4],
    pub tissue_gain: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub frame: UltrasoundFrame,
    pub y1: Mask,
    pub y2: Mask,
    pub meta: SampleMeta,
}

/// Column-wise running maximum from the top row down.
pub fn column_cummax(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    for mut col in out.columns_mut() {
        let mut seen = 0u8;
        for v in col.iter_mut() {
            seen = seen.max(*v);
            *v = seen;
        }
    }
    out
}

/// Generates the phantom for `seed` in subject group 0.
pub fn generate_sample(spec: &PhantomSpec, seed: u64) -> Result<Sample> {
    generate_in_group(spec, seed, 0)
}

/// Generates a phantom whose tissue gain is shared by every sample of
/// `group`.
pub fn generate_in_group(spec: &PhantomSpec, seed: u64, group: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w, t) = (spec.height, spec.width, spec.band_thickness);
    let mut group_rng = ChaCha8Rng::seed_from_u64(spec.group_seed(group));
    let tissue_gain = group_rng.random_range(0.8..1.2);
    let stripe_period = group_rng.random_range(6.0..14.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = if spec.bone_extent[1] > spec.bone_extent[0] {
        rng.random_range(spec.bone_extent[0]..=spec.bone_extent[1])
    } else {
        spec.bone_extent[0]
    };
    let n_bone = ((extent * w as f64).round() as usize).min(w);

    let mut y1 = Mask::zeros((h, w));
    let mut bone_columns = [0, 0];
    let mut curve = [0.0; 4];
    if n_bone > 0 {
        let depth_lo = spec.surface_depth[0] * h as f64;
        let depth_hi = (spec.surface_depth[1] * h as f64).min((h - t) as f64);
        if depth_hi < depth_lo {
            return Err(Error::Geometry {
                attempts: 0,
                reason: format!(
                    "depth range {:?} leaves no room for a {t}-row band in {h} rows",
                    spec.surface_depth
                ),
            });
        }
        let mut placed = None;
        for _ in 0..MAX_GEOMETRY_ATTEMPTS {
            let start = rng.random_range(0..=w - n_bone);
            let base = rng.random_range(depth_lo..=depth_hi);
            let amp = if spec.surface_curvature[1] > spec.surface_curvature[0] {
                rng.random_range(spec.surface_curvature[0]..=spec.surface_curvature[1])
            } else {
                spec.surface_curvature[0]
            };
            // Mostly-quadratic bowing with smaller linear and cubic terms.
            let c2 = amp * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let c1 = amp * rng.random_range(-0.5..0.5);
            let c3 = amp * rng.random_range(-0.3..0.3);
            let coeffs = [base, c1, c2, c3];
            let rows: Vec<isize> = (0..n_bone)
                .map(|i| {
                    let s = if n_bone > 1 {
                        2.0 * i as f64 / (n_bone - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    let r = coeffs[0] + coeffs[1] * s + coeffs[2] * (s * s - 0.5) + coeffs[3] * s * s * s;
                    r.round() as isize
                })
                .collect();
            let fits = rows
                .iter()
                .all(|&r| r >= depth_lo.floor() as isize && r >= 0 && r as usize + t <= h);
            if fits {
                placed = Some((start, coeffs, rows));
                break;
            }
        }
        let (start, coeffs, rows) = placed.ok_or_else(|| Error::Geometry {
            attempts: MAX_GEOMETRY_ATTEMPTS,
            reason: "surface band kept leaving the depth range".into(),
        })?;
        for (i, &r) in rows.iter().enumerate() {
            let x = start + i;
            for y in r as usize..r as usize + t {
                y1[[y, x]] = 1;
            }
        }
        bone_columns = [start, start + n_bone];
        curve = coeffs;
    }
    let y2 = column_cummax(&y1);

    let speckle = Normal::new(0.0, 1.0).expect("unit normal");
    let stripe_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pixels = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let depth = y as f64 / h as f64;
        let stripe = 0.12 * (std::f64::consts::TAU * y as f64 / stripe_period + stripe_phase).sin();
        let tissue = tissue_gain * (0.42 + stripe) * (-spec.depth_attenuation * depth).exp();
        for x in 0..w {
            let base = if y1[[y, x]] == 1 {
                // Brightest at the top of the band, fading through it.
                let top = (0..=y).rev().take_while(|&yy| y1[[yy, x]] == 1).count() - 1;
                0.98 - 0.25 * top as f64 / t as f64
            } else if y2[[y, x]] == 1 {
                0.04
            } else {
                tissue
            };
            let n: f64 = speckle.sample(&mut rng);
            pixels[[y, x]] = (base * (1.0 + spec.speckle_strength * n)).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        frame: UltrasoundFrame::new(pixels)?,
        y1,
        y2,
        meta: SampleMeta {
            seed,
            group,
            band_thickness: t,
            bone_columns,
            curve,
            tissue_gain,
        },
    })
}

/// True iff `y2` is exactly the column-wise running maximum of `y1` and every
/// column holding surface pixels holds one contiguous band of exactly
/// `band_thickness` rows.
pub fn verify_consistency(sample: &Sample) -> bool {
    verify_masks(&sample.y1, &sample.y2, sample.meta.band_thickness)
}

pub fn verify_masks(y1: &Mask, y2: &Mask, band_thickness: usize) -> bool {
    if y1.dim() != y2.dim() || y1.iter().chain(y2.iter()).any(|&v| v > 1) {
        return false;
    }
    if column_cummax(y1) != *y2 {
        return false;
    }
    y1.columns().into_iter().all(|col| {
        let rows: Vec<usize> = col
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect();
        rows.is_empty()
            || (rows.len() == band_thickness && rows[rows.len() - 1] - rows[0] + 1 == band_thickness)
    })
}

// ---------------------------------------------------------------------------
// datasets on disk

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub group: u64,
    pub frame: String,
    pub y1: String,
    pub y2: String,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub n: usize,
    pub samples: Vec<ManifestEntry>,
    /// SHA-256 over every written file, in sample order.
    pub content_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n` samples (frame PNG, two mask PNGs, meta JSON) and a manifest.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Param("dataset size n must be at least 1".into()));
    }
    io::create_dir(out_dir)?;
    let mut samples = Vec::with_capacity(n);
    let mut files: Vec<PathBuf> = Vec::with_capacity(4 * n);
    for index in 0..n {
        let seed = spec.sample_seed(index);
        let group = spec.group_of(index);
        let sample = generate_in_group(spec, seed, group)?;
        let entry = ManifestEntry {
            index,
            seed,
            group,
            frame: format!("{index:05}_frame.png"),
            y1: format!("{index:05}_surface.png"),
            y2: format!("{index:05}_shadow.png"),
            meta: format!("{index:05}_meta.json"),
        };
        let paths = [&entry.frame, &entry.y1, &entry.y2, &entry.meta].map(|f| out_dir.join(f));
        io::write_gray16(&paths[0], sample.frame.pixels())?;
        io::write_mask(&paths[1], &sample.y1)?;
        io::write_mask(&paths[2], &sample.y2)?;
        io::write_json_atomic(&paths[3], &sample.meta)?;
        files.extend(paths);
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        n,
        samples,
        content_hash: io::hash_files(&files)?,
    };
    io::write_json_atomic(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

/// Loads a dataset directory, re-hashing the files against the manifest.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    let mut files = Vec::with_capacity(4 * manifest.samples.len());
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let paths = [&e.frame, &e.y1, &e.y2, &e.meta].map(|f| dir.join(f));
        let frame = UltrasoundFrame::from_png(&paths[0])?;
        let y1 = io::read_mask(&paths[1])?;
        let y2 = io::read_mask(&paths[2])?;
        let meta: SampleMeta = io::read_json(&paths[3])?;
        files.extend(paths);
        samples.push(Sample { frame, y1, y2, meta });
    }
    let hash = io::hash_files(&files)?;
    if hash != manifest.content_hash {
        return Err(Error::Contract(format!(
            "dataset {} content hash {hash} does not match manifest {}",
            dir.display(),
            manifest.content_hash
        )));
    }
    Ok(LoadedDataset { manifest, samples })
}
