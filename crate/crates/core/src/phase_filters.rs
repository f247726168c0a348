//! Local-phase bone features and shadow enhancement.
//!
//! A B-mode frame is turned into the 4-channel network input
//! `(bmode, lpt, lp, bse)`:
//!
//! - `lpt`: local phase tensor magnitude built from scale-normalised
//!   Laplacian-of-Gaussian (even) and Gaussian-gradient (odd) responses.
//! - `lp`: the pointwise product `lpt × lpe × lwpa`, where local phase energy
//!   and weighted mean phase angle come from a multi-scale monogenic signal
//!   (log-Gabor band-pass plus Riesz transform).
//! - `bse`: `[(CM − ρ) / max(US_A, ε)^δ] + ρ` with a column-wise attenuation
//!   confidence map `CM` driven by `lp` and a local-maximum image `US_A`.
//!
//! Rows are depth: row 0 is closest to the transducer.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{io, Error, Result};

/// Bandwidth of the log-Gabor filters (ratio of the Gaussian width on a log
/// frequency axis to the centre frequency); 0.55 gives roughly two octaves.
pub const LOG_GABOR_SIGMA_ON_F: f64 = 0.55;

/// Channel order of a [`FilterStack`].
pub const STACK_CHANNELS: [&str; 4] = ["bmode", "lpt", "lp", "bse"];

/// Smallest accepted frame side.
pub const MIN_FRAME_SIDE: usize = 8;

/// A single-channel B-mode frame with intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundFrame {
    pixels: Array2<f64>,
    mm_per_pixel: Option<f64>,
}

impl UltrasoundFrame {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
            return Err(Error::Param(format!(
                "frame is {h}x{w}; both sides must be at least {MIN_FRAME_SIDE}"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!(
                "frame intensity {bad} outside [0,1]"
            )));
        }
        Ok(Self {
            pixels,
            mm_per_pixel: None,
        })
    }

    pub fn with_spacing(mut self, mm_per_pixel: f64) -> Result<Self> {
        if !(mm_per_pixel > 0.0 && mm_per_pixel.is_finite()) {
            return Err(Error::Param(format!(
                "pixel spacing must be positive, got {mm_per_pixel}"
            )));
        }
        self.mm_per_pixel = Some(mm_per_pixel);
        Ok(self)
    }

    /// Loads an 8- or 16-bit grayscale PNG.
    pub fn from_png(path: &Path) -> Result<Self> {
        Self::new(io::read_gray(path)?)
    }

    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn mm_per_pixel(&self) -> Option<f64> {
        self.mm_per_pixel
    }

    /// `(height, width)`; height runs along depth.
    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Filter constants. Loading from JSON requires every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterParams {
    /// Log-Gabor centre wavelengths in pixels, strictly increasing.
    pub scales: Vec<f64>,
    /// Gaussian scale for the local phase tensor, in pixels.
    pub gaussian_sigma: f64,
    /// Decay rate of the confidence map per unit of accumulated `lp`.
    pub attenuation_alpha: f64,
    /// Tissue attenuation coefficient δ.
    pub delta: f64,
    /// Echogenicity constant ρ.
    pub rho: f64,
    /// Division floor ε.
    pub epsilon: f64,
    /// Side of the square local-maximum window for `US_A`; odd.
    pub usa_window: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 32.0, 64.0],
            gaussian_sigma: 2.0,
            attenuation_alpha: 2.0,
            delta: 1.0,
            rho: 0.1,
            epsilon: 0.01,
            usa_window: 7,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Param("scales must not be empty".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Param(format!(
                "scales must be positive, got {:?}",
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Param(format!(
                "scales must be strictly increasing, got {:?}",
                self.scales
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Param("gaussian_sigma must be positive".into()));
        }
        if !(self.attenuation_alpha > 0.0) {
            return Err(Error::Param("attenuation_alpha must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Param("delta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Param(format!("rho must lie in [0,1), got {}", self.rho)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param("epsilon must be positive".into()));
        }
        if self.usa_window == 0 || self.usa_window % 2 == 0 {
            return Err(Error::Param(format!(
                "usa_window must be an odd integer >= 1, got {}",
                self.usa_window
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        params.validate()?;
        Ok(params)
    }
}

/// Even and odd (Riesz) responses of one band-pass scale.
#[derive(Debug, Clone)]
pub struct ScaleResponse {
    pub wavelength: f64,
    pub even: Array2<f64>,
    pub odd1: Array2<f64>,
    pub odd2: Array2<f64>,
}

/// Monogenic responses for every configured scale.
#[derive(Debug, Clone)]
pub struct MonogenicResponses {
    pub scales: Vec<ScaleResponse>,
}

impl MonogenicResponses {
    pub fn dim(&self) -> (usize, usize) {
        self.scales
            .first()
            .map(|s| s.even.dim())
            .unwrap_or((0, 0))
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.scales.is_empty() {
            return Err(Error::Contract("monogenic responses hold no scales".into()));
        }
        for s in &self.scales {
            if s.even.dim() != dim || s.odd1.dim() != dim || s.odd2.dim() != dim {
                return Err(Error::Contract(format!(
                    "response grids at wavelength {} do not share shape {dim:?}",
                    s.wavelength
                )));
            }
        }
        Ok(())
    }
}

/// The network input: four aligned channels, each in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStack {
    pub bmode: Array2<f64>,
    pub lpt: Array2<f64>,
    pub lp: Array2<f64>,
    pub bse: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackSidecar {
    shape: [usize; 3],
    channels: Vec<String>,
    params: FilterParams,
}

impl FilterStack {
    pub fn dim(&self) -> (usize, usize) {
        self.bmode.dim()
    }

    pub fn channels(&self) -> [&Array2<f64>; 4] {
        [&self.bmode, &self.lpt, &self.lp, &self.bse]
    }

    /// Writes `<stem>.bin` (little-endian f32, channel-major) and
    /// `<stem>.json`. Returns both paths.
    pub fn save(&self, stem: &Path, params: &FilterParams) -> Result<(PathBuf, PathBuf)> {
        let (h, w) = self.dim();
        let mut bytes = Vec::with_capacity(4 * h * w * 4);
        for ch in self.channels() {
            for &v in ch.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let sidecar = StackSidecar {
            shape: [4, h, w],
            channels: STACK_CHANNELS.iter().map(|s| s.to_string()).collect(),
            params: params.clone(),
        };
        io::write_json_atomic(&json, &sidecar)?;
        Ok((bin, json))
    }

    /// Reads a stack written by [`FilterStack::save`], returning it with the
    /// parameters recorded in the sidecar.
    pub fn load(stem: &Path) -> Result<(Self, FilterParams)> {
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let sidecar: StackSidecar = io::read_json(&json)?;
        if sidecar.shape[0] != 4 || sidecar.channels != STACK_CHANNELS {
            return Err(Error::Contract(format!(
                "{} does not describe a bmode/lpt/lp/bse stack",
                json.display()
            )));
        }
        let [_, h, w] = sidecar.shape;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != 4 * h * w * 4 {
            return Err(Error::Contract(format!(
                "{} holds {} bytes, expected {}",
                bin.display(),
                bytes.len(),
                4 * h * w * 4
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let channel = |i: usize| {
            Array2::from_shape_vec((h, w), values[i * h * w..(i + 1) * h * w].to_vec())
                .expect("channel length")
        };
        Ok((
            Self {
                bmode: channel(0),
                lpt: channel(1),
                lp: channel(2),
                bse: channel(3),
            },
            sidecar.params,
        ))
    }
}

// ---------------------------------------------------------------------------
// normalisation helpers

/// Divides by the grid maximum; a non-positive maximum leaves the grid scaled
/// by 1 (so an all-zero grid stays zero).
pub fn normalize_by_max(grid: &Array2<f64>) -> Array2<f64> {
    let z = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = if z > 0.0 { z } else { 1.0 };
    grid.mapv(|v| (v / z).clamp(0.0, 1.0))
}

/// Min-max rescaling to [0,1]; a constant grid maps to zeros.
pub fn normalize_min_max(grid: &Array2<f64>) -> Array2<f64> {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > f64::EPSILON * hi.abs().max(1.0)) {
        return Array2::zeros(grid.dim());
    }
    grid.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

fn ensure_same_shape(name: &str, grids: &[&Array2<f64>]) -> Result<()> {
    let dim = grids[0].dim();
    if let Some(g) = grids.iter().find(|g| g.dim() != dim) {
        return Err(Error::Contract(format!(
            "{name}: grid shapes differ ({dim:?} vs {:?})",
            g.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// monogenic signal

fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in data.rows_mut() {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut col in data.columns_mut() {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
    if inverse {
        let n = (h * w) as f64;
        data.mapv_inplace(|v| v / n);
    }
}

/// Signed FFT frequency (cycles per sample) of bin `k` out of `n`.
fn fft_freq(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k < (n_f / 2.0).ceil() {
        k / n_f
    } else {
        (k - n_f) / n_f
    }
}

/// Log-Gabor band-pass plus Riesz transform at every configured wavelength.
///
/// `even` is the band-passed frame; `(odd1, odd2)` are its Riesz components
/// along columns (x) and rows (y).
pub fn bandpass_monogenic(
    frame: &UltrasoundFrame,
    params: &FilterParams,
) -> Result<MonogenicResponses> {
    params.validate()?;
    let (h, w) = frame.dim();
    let limit = h.min(w) as f64 / 2.0;
    if let Some(bad) = params.scales.iter().find(|&&s| s > limit) {
        return Err(Error::Param(format!(
            "scale {bad} px exceeds half the smaller frame side ({limit} px for a {h}x{w} frame)"
        )));
    }

    let mut spectrum = frame.pixels().mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut spectrum, false);

    let log_sigma_sq = 2.0 * LOG_GABOR_SIGMA_ON_F.ln().powi(2);
    let mut scales = Vec::with_capacity(params.scales.len());
    for &wavelength in &params.scales {
        let f0 = 1.0 / wavelength;
        let mut even_f = Array2::<Complex64>::zeros((h, w));
        let mut odd1_f = Array2::<Complex64>::zeros((h, w));
        let mut odd2_f = Array2::<Complex64>::zeros((h, w));
        for y in 0..h {
            let v = fft_freq(y, h);
            for x in 0..w {
                let u = fft_freq(x, w);
                let radius = (u * u + v * v).sqrt();
                if radius == 0.0 {
                    continue;
                }
                let gain = (-(radius / f0).ln().powi(2) / log_sigma_sq).exp();
                let band = spectrum[[y, x]] * gain;
                even_f[[y, x]] = band;
                // Riesz kernels i·u/|ω| and i·v/|ω|.
                odd1_f[[y, x]] = band * Complex64::new(0.0, u / radius);
                odd2_f[[y, x]] = band * Complex64::new(0.0, v / radius);
            }
        }
        fft2(&mut even_f, true);
        fft2(&mut odd1_f, true);
        fft2(&mut odd2_f, true);
        scales.push(ScaleResponse {
            wavelength,
            even: even_f.mapv(|c| c.re),
            odd1: odd1_f.mapv(|c| c.re),
            odd2: odd2_f.mapv(|c| c.re),
        });
    }
    Ok(MonogenicResponses { scales })
}

/// Local phase energy `max(0, Σ_s |even_s| − |odd_s|)`, divided by its
/// maximum.
pub fn compute_lpe(m: &MonogenicResponses) -> Result<Array2<f64>> {
    m.validate()?;
    let mut acc = Array2::<f64>::zeros(m.dim());
    for s in &m.scales {
        Zip::from(&mut acc)
            .and(&s.even)
            .and(&s.odd1)
            .and(&s.odd2)
            .for_each(|a, &e, &o1, &o2| *a += e.abs() - (o1 * o1 + o2 * o2).sqrt());
    }
    acc.mapv_inplace(|v| v.max(0.0));
    Ok(normalize_by_max(&acc))
}

/// Weighted mean phase angle `atan2(Σ even, |Σ odd|)` mapped from
/// [−π/2, π/2] to [0,1].
pub fn compute_lwpa(m: &MonogenicResponses) -> Result<Array2<f64>> {
    m.validate()?;
    let dim = m.dim();
    let mut even = Array2::<f64>::zeros(dim);
    let mut odd1 = Array2::<f64>::zeros(dim);
    let mut odd2 = Array2::<f64>::zeros(dim);
    for s in &m.scales {
        even += &s.even;
        odd1 += &s.odd1;
        odd2 += &s.odd2;
    }
    let mut out = Array2::<f64>::zeros(dim);
    Zip::from(&mut out)
        .and(&even)
        .and(&odd1)
        .and(&odd2)
        .for_each(|o, &e, &a, &b| {
            let angle = e.atan2((a * a + b * b).sqrt());
            *o = ((angle + PI / 2.0) / PI).clamp(0.0, 1.0);
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// local phase tensor

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with replicate borders.
fn gaussian_blur(img: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[[y, clamp(x as isize + i as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[[clamp(y as isize + i as isize - r, h), x]])
                .sum();
        }
    }
    out
}

/// Local phase tensor magnitude.
///
/// Even response: `σ²·|∇²(G_σ * I)|`; odd response: `σ·‖∇(G_σ * I)‖`. The
/// scale normalisation makes a thin ridge peak on its centre line rather
/// than on its flanks. The magnitude `√(even² + odd²)` is divided by its
/// maximum.
pub fn compute_lpt(frame: &UltrasoundFrame, params: &FilterParams) -> Result<Array2<f64>> {
    params.validate()?;
    let sigma = params.gaussian_sigma;
    let smooth = gaussian_blur(frame.pixels(), sigma);
    let (h, w) = smooth.dim();
    let at = |y: isize, x: isize| {
        smooth[[
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        ]]
    };
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(y, x);
            let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * c;
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let even = sigma * sigma * lap.abs();
            let odd = sigma * (gx * gx + gy * gy).sqrt();
            out[[y as usize, x as usize]] = (even * even + odd * odd).sqrt();
        }
    }
    Ok(normalize_by_max(&out))
}

/// Pointwise `lpt × lpe × lwpa` before normalisation.
pub fn lp_product(
    lpt: &Array2<f64>,
    lpe: &Array2<f64>,
    lwpa: &Array2<f64>,
) -> Result<Array2<f64>> {
    ensure_same_shape("compute_lp", &[lpt, lpe, lwpa])?;
    let mut out = Array2::<f64>::zeros(lpt.dim());
    Zip::from(&mut out)
        .and(lpt)
        .and(lpe)
        .and(lwpa)
        .for_each(|o, &a, &b, &c| *o = a * b * c);
    Ok(out)
}

/// Local phase bone image: the triple product divided by its maximum.
pub fn compute_lp(
    lpt: &Array2<f64>,
    lpe: &Array2<f64>,
    lwpa: &Array2<f64>,
) -> Result<Array2<f64>> {
    Ok(normalize_by_max(&lp_product(lpt, lpe, lwpa)?))
}

// ---------------------------------------------------------------------------
// shadow enhancement

/// Column-wise attenuation map `exp(−α · Σ_{y' ≤ y} lp(x, y'))`.
pub fn compute_confidence_map(lp: &Array2<f64>, params: &FilterParams) -> Result<Array2<f64>> {
    params.validate()?;
    let mut out = Array2::<f64>::zeros(lp.dim());
    for (src, mut dst) in lp.columns().into_iter().zip(out.columns_mut()) {
        let mut cumulative = 0.0;
        for (v, d) in src.iter().zip(dst.iter_mut()) {
            cumulative += v.max(0.0);
            *d = (-params.attenuation_alpha * cumulative).exp();
        }
    }
    Ok(out)
}

/// Sliding-window maximum of the B-mode frame over a `usa_window` square
/// (window clipped at the borders, equivalent to replicate padding).
pub fn compute_us_a(frame: &UltrasoundFrame, params: &FilterParams) -> Result<Array2<f64>> {
    params.validate()?;
    let (h, w) = frame.dim();
    let win = params.usa_window;
    if win > h.min(w) {
        return Err(Error::Param(format!(
            "usa_window {win} exceeds the smaller frame side of a {h}x{w} frame"
        )));
    }
    let r = win / 2;
    let px = frame.pixels();
    // Separable max: rows then columns.
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            tmp[[y, x]] = (lo..=hi).map(|i| px[[y, i]]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[[y, x]] = (lo..=hi).map(|i| tmp[[i, x]]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(out)
}

/// `[(CM − ρ) / max(US_A, ε)^δ] + ρ`, evaluated pointwise without any
/// normalisation.
pub fn bse_raw(cm: &Array2<f64>, us_a: &Array2<f64>, params: &FilterParams) -> Result<Array2<f64>> {
    params.validate()?;
    ensure_same_shape("compute_bse", &[cm, us_a])?;
    let mut out = Array2::<f64>::zeros(cm.dim());
    Zip::from(&mut out)
        .and(cm)
        .and(us_a)
        .for_each(|o, &c, &u| {
            *o = (c - params.rho) / u.max(params.epsilon).powf(params.delta) + params.rho
        });
    Ok(out)
}

/// Bone shadow enhanced image, min-max normalised for use as a stack channel.
pub fn compute_bse(cm: &Array2<f64>, us_a: &Array2<f64>, params: &FilterParams) -> Result<Array2<f64>> {
    Ok(normalize_min_max(&bse_raw(cm, us_a, params)?))
}

/// Intermediate images of the filter pipeline, for previews and inspection.
#[derive(Debug, Clone)]
pub struct FilterIntermediates {
    pub lpe: Array2<f64>,
    pub lwpa: Array2<f64>,
    pub confidence: Array2<f64>,
    pub us_a: Array2<f64>,
    pub bse_raw: Array2<f64>,
}

/// Runs the full pipeline and keeps the intermediate images.
pub fn build_stack_detailed(
    frame: &UltrasoundFrame,
    params: &FilterParams,
) -> Result<(FilterStack, FilterIntermediates)> {
    params.validate()?;
    let mono = bandpass_monogenic(frame, params)?;
    let lpe = compute_lpe(&mono)?;
    let lwpa = compute_lwpa(&mono)?;
    let lpt = compute_lpt(frame, params)?;
    let lp = compute_lp(&lpt, &lpe, &lwpa)?;
    let confidence = compute_confidence_map(&lp, params)?;
    let us_a = compute_us_a(frame, params)?;
    let raw = bse_raw(&confidence, &us_a, params)?;
    let stack = FilterStack {
        bmode: normalize_min_max(&frame.pixels().to_owned()),
        lpt,
        lp,
        bse: normalize_min_max(&raw),
    };
    Ok((
        stack,
        FilterIntermediates {
            lpe,
            lwpa,
            confidence,
            us_a,
            bse_raw: raw,
        },
    ))
}

/// Builds the `(bmode, lpt, lp, bse)` network input for one frame.
pub fn build_stack(frame: &UltrasoundFrame, params: &FilterParams) -> Result<FilterStack> {
    build_stack_detailed(frame, params).map(|(stack, _)| stack)
}
