//! Segmentation losses, the surface/shadow correspondence mappings and dice.
//!
//! Loss functions operate on tensors of shape `[..., H, W]` of any floating
//! kind so that the same code serves training (f32) and gradient checks (f64).

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::{Error, Mask, Result};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before any log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingParams {
    /// Surface band thickness in pixels; must match the data for the
    /// mappings to be exact inverses.
    pub band_thickness: i64,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self { band_thickness: 8 }
    }
}

impl MappingParams {
    pub fn new(band_thickness: i64) -> Result<Self> {
        let p = Self { band_thickness };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_thickness < 1 {
            return Err(Error::Param(format!(
                "band_thickness must be >= 1, got {}",
                self.band_thickness
            )));
        }
        Ok(())
    }
}

/// Scalar loss components. `total` is always the sum of the other three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_surface: f64,
    pub bce_shadow: f64,
    pub tcc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce_surface: f64, bce_shadow: f64, tcc: f64) -> Self {
        Self {
            bce_surface,
            bce_shadow,
            tcc,
            total: bce_surface + bce_shadow + tcc,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.bce_surface, self.bce_shadow, self.tcc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable loss terms as scalar tensors.
#[derive(Debug)]
pub struct LossTerms {
    pub bce_surface: Tensor,
    pub bce_shadow: Tensor,
    pub tcc: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::new(
            self.bce_surface.double_value(&[]),
            self.bce_shadow.double_value(&[]),
            self.tcc.double_value(&[]),
        )
    }
}

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

fn check_2d(what: &str, t: &Tensor) -> Result<()> {
    if t.dim() < 2 {
        return Err(Error::Contract(format!(
            "{what}: expected [..., H, W], got {:?}",
            t.size()
        )));
    }
    Ok(())
}

/// Mean binary cross entropy of prediction `p_hat` against target `p`.
pub fn bce(p: &Tensor, p_hat: &Tensor) -> Result<Tensor> {
    check_same("bce", p, p_hat)?;
    let q = p_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let p = p.to_kind(q.kind());
    let ll = &p * q.log() + (-&p + 1.0) * (-&q + 1.0).log();
    Ok(-ll.mean(q.kind()))
}

/// F1: per-column running maximum from the top row down.
pub fn map_surface_to_shadow(y1_hat: &Tensor, _params: &MappingParams) -> Result<Tensor> {
    check_2d("map_surface_to_shadow", y1_hat)?;
    Ok(y1_hat.cummax(-2).0)
}

/// Shifts rows down by `k`, filling the top with zeros.
fn shift_down(x: &Tensor, k: i64) -> Tensor {
    let h = x.size()[x.dim() - 2];
    let k = k.min(h);
    let mut pad_shape = x.size();
    let n = pad_shape.len();
    pad_shape[n - 2] = k;
    let zeros = Tensor::zeros(pad_shape.as_slice(), (x.kind(), x.device()));
    Tensor::cat(&[zeros, x.narrow(-2, 0, h - k)], -2)
}

/// F2: top-edge extraction followed by a downward dilation of `t` rows.
pub fn map_shadow_to_surface(y2_hat: &Tensor, params: &MappingParams) -> Result<Tensor> {
    check_2d("map_shadow_to_surface", y2_hat)?;
    params.validate()?;
    let edge = (y2_hat - shift_down(y2_hat, 1)).relu();
    let h = y2_hat.size()[y2_hat.dim() - 2];
    let mut out = edge.shallow_clone();
    for k in 1..params.band_thickness.min(h) {
        out = out.maximum(&shift_down(&edge, k));
    }
    Ok(out)
}

/// Correspondence loss: each task's target against the other branch's mapped
/// prediction.
pub fn tcc_loss(
    y1: &Tensor,
    y2: &Tensor,
    y1_hat: &Tensor,
    y2_hat: &Tensor,
    params: &MappingParams,
) -> Result<Tensor> {
    check_same("tcc_loss", y1, y2)?;
    check_same("tcc_loss", y1, y1_hat)?;
    check_same("tcc_loss", y1, y2_hat)?;
    let to_surface = map_shadow_to_surface(y2_hat, params)?;
    let to_shadow = map_surface_to_shadow(y1_hat, params)?;
    Ok(bce(y1, &to_surface)? + bce(y2, &to_shadow)?)
}

/// All loss terms as tensors; the tcc term is an exact zero when disabled.
pub fn loss_terms(
    y1: &Tensor,
    y2: &Tensor,
    y1_hat: &Tensor,
    y2_hat: &Tensor,
    params: &MappingParams,
    tcc_enabled: bool,
) -> Result<LossTerms> {
    let bce_surface = bce(y1, y1_hat)?;
    let bce_shadow = bce(y2, y2_hat)?;
    let tcc = if tcc_enabled {
        tcc_loss(y1, y2, y1_hat, y2_hat, params)?
    } else {
        check_same("total_loss", y1, y2)?;
        Tensor::zeros([], (bce_surface.kind(), bce_surface.device()))
    };
    let total = &bce_surface + &bce_shadow + &tcc;
    Ok(LossTerms {
        bce_surface,
        bce_shadow,
        tcc,
        total,
    })
}

pub fn total_loss(
    y1: &Tensor,
    y2: &Tensor,
    y1_hat: &Tensor,
    y2_hat: &Tensor,
    params: &MappingParams,
    tcc_enabled: bool,
) -> Result<LossBreakdown> {
    Ok(loss_terms(y1, y2, y1_hat, y2_hat, params, tcc_enabled)?.breakdown())
}

/// Dice overlap of two binary masks; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "dice: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x != 0, y != 0);
        na += x as u64;
        nb += y as u64;
        inter += (x && y) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Thresholds a soft map at 0.5 (inclusive).
pub fn threshold(t: &Tensor) -> Tensor {
    t.ge(0.5).to_kind(Kind::Uint8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_slice(v).view([v.len() as i64, 1]).to_kind(Kind::Double)
    }

    fn values(t: &Tensor) -> Vec<f64> {
        Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).unwrap()
    }

    #[test]
    fn bce_examples() {
        let ones = Tensor::ones([4, 4], (Kind::Double, tch::Device::Cpu));
        let half = Tensor::full([4, 4], 0.5, (Kind::Double, tch::Device::Cpu));
        let ln2 = std::f64::consts::LN_2;
        assert!((bce(&ones, &half).unwrap().double_value(&[]) - ln2).abs() < 1e-12);
        assert!((bce(&half, &half).unwrap().double_value(&[]) - ln2).abs() < 1e-12);
        let p = Tensor::from_slice(&[0.0, 1.0, 1.0, 0.0]).view([2, 2]);
        assert!(bce(&p, &p).unwrap().double_value(&[]) < 2e-6);
    }

    #[test]
    fn bce_shape_mismatch() {
        let a = Tensor::zeros([2, 2], (Kind::Float, tch::Device::Cpu));
        let b = Tensor::zeros([2, 3], (Kind::Float, tch::Device::Cpu));
        assert!(matches!(bce(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn f1_examples() {
        let p = MappingParams::default();
        let out = map_surface_to_shadow(&col(&[0.0, 1.0, 0.0, 0.0]), &p).unwrap();
        assert_eq!(values(&out), vec![0.0, 1.0, 1.0, 1.0]);
        let z = map_surface_to_shadow(&col(&[0.0; 4]), &p).unwrap();
        assert_eq!(values(&z), vec![0.0; 4]);
    }

    #[test]
    fn f2_examples() {
        let y = col(&[0.0, 1.0, 1.0, 1.0]);
        let t1 = map_shadow_to_surface(&y, &MappingParams::new(1).unwrap()).unwrap();
        assert_eq!(values(&t1), vec![0.0, 1.0, 0.0, 0.0]);
        let t2 = map_shadow_to_surface(&y, &MappingParams::new(2).unwrap()).unwrap();
        assert_eq!(values(&t2), vec![0.0, 1.0, 1.0, 0.0]);
        // dilation wider than the image is truncated
        let t9 = map_shadow_to_surface(&y, &MappingParams::new(9).unwrap()).unwrap();
        assert_eq!(values(&t9), vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mapping_params_reject_zero() {
        assert!(MappingParams::new(0).is_err());
    }

    #[test]
    fn tcc_disabled_is_exact_zero() {
        let y = Tensor::rand([2, 1, 8, 8], (Kind::Double, tch::Device::Cpu)).ge(0.5).to_kind(Kind::Double);
        let yh = Tensor::rand([2, 1, 8, 8], (Kind::Double, tch::Device::Cpu));
        let b = total_loss(&y, &y, &yh, &yh, &MappingParams::default(), false).unwrap();
        assert_eq!(b.tcc, 0.0);
        assert_eq!(b.total, b.bce_surface + b.bce_shadow);
    }

    #[test]
    fn dice_examples() {
        let a: Array2<u8> = array![[1, 1, 0], [1, 1, 0]];
        let b: Array2<u8> = array![[0, 1, 1], [0, 1, 1]];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&b, &a).unwrap(), 0.5);
        let c: Array2<u8> = array![[0, 0, 1], [0, 0, 1]];
        let d: Array2<u8> = array![[1, 0, 0], [0, 0, 0]];
        assert_eq!(dice(&c, &d).unwrap(), 0.0);
        let e = Array2::<u8>::zeros((2, 3));
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&e, &Array2::zeros((3, 2))).is_err());
    }
}
