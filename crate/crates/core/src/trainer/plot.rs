//! Loss-curve export: CSV and a plain line plot rendered straight to PNG.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::LogRow;
use crate::{Error, Result};

pub fn write_loss_csv(path: &Path, history: &[LogRow]) -> Result<()> {
    let mut s = String::from("step,phase,bce_surface,bce_shadow,tcc,total\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.phase, r.bce_surface, r.bce_shadow, r.tcc, r.total
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 30;

const SERIES: [(fn(&LogRow) -> f64, Rgb<u8>); 4] = [
    (|r| r.total, Rgb([0, 0, 0])),
    (|r| r.bce_surface, Rgb([214, 39, 40])),
    (|r| r.bce_shadow, Rgb([31, 119, 180])),
    (|r| r.tcc, Rgb([44, 160, 44])),
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Total (black), surface BCE (red), shadow BCE (blue) and TCC (green)
/// against step, with a grey line at the phase boundary.
pub fn write_loss_png(path: &Path, history: &[LogRow]) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x_lo, x_hi) = (MARGIN as i64, (W - MARGIN) as i64);
    let (y_lo, y_hi) = (MARGIN as i64, (H - MARGIN) as i64);
    let axis = Rgb([120, 120, 120]);
    line(&mut img, (x_lo, y_hi), (x_hi, y_hi), axis);
    line(&mut img, (x_lo, y_lo), (x_lo, y_hi), axis);
    if !history.is_empty() {
        let first = history[0].step as f64;
        let span = (history.last().unwrap().step as f64 - first).max(1.0);
        let top = history
            .iter()
            .flat_map(|r| SERIES.iter().map(move |(f, _)| f(r)))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let px = |step: usize| x_lo + ((step as f64 - first) / span * (x_hi - x_lo) as f64).round() as i64;
        let py = |v: f64| y_hi - (v.clamp(0.0, top) / top * (y_hi - y_lo) as f64).round() as i64;
        if let Some(b) = history.iter().find(|r| r.phase == 2).filter(|r| r.step as f64 > first) {
            let x = px(b.step);
            for y in (y_lo..y_hi).step_by(4) {
                line(&mut img, (x, y), (x, y + 1), Rgb([180, 180, 180]));
            }
        }
        for (f, colour) in SERIES {
            for w in history.windows(2) {
                line(&mut img, (px(w[0].step), py(f(&w[0]))), (px(w[1].step), py(f(&w[1]))), colour);
            }
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}
