//! Squeeze-and-excitation gating and the cross task feature transfer block.

use tch::nn::{self, Module};
use tch::Tensor;

use crate::{Error, Result};

/// Channel gate `s = σ(W2·relu(W1·avgpool(F)))`, output `s ⊙ F`.
#[derive(Debug)]
pub struct SqueezeExcite {
    pub reduce: nn::Linear,
    pub expand: nn::Linear,
}

impl SqueezeExcite {
    /// `channels` must be divisible by `reduction`; the caller validates.
    pub fn new(vs: &nn::Path, channels: i64, reduction: i64) -> Self {
        let hidden = channels / reduction;
        Self {
            reduce: nn::linear(vs / "reduce", channels, hidden, Default::default()),
            expand: nn::linear(vs / "expand", hidden, channels, Default::default()),
        }
    }

    /// Per-sample, per-channel gate values of shape `[B, C]`.
    pub fn gates(&self, x: &Tensor) -> Tensor {
        let pooled = x.mean_dim(&[2i64, 3][..], false, None);
        self.expand.forward(&self.reduce.forward(&pooled).relu()).sigmoid()
    }
}

impl Module for SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (b, c) = (x.size()[0], x.size()[1]);
        x * self.gates(x).view([b, c, 1, 1])
    }
}

/// All six feature blocks of one transfer.
#[derive(Debug)]
pub struct CtftFeatures {
    pub f_surface: Tensor,
    pub f_shadow: Tensor,
    /// `SE_a(F_surface)`, added to the shadow path.
    pub r_surface: Tensor,
    /// `SE_b(F_shadow)`, added to the surface path.
    pub r_shadow: Tensor,
    pub f_hat_surface: Tensor,
    pub f_hat_shadow: Tensor,
}

/// Exchanges gated residuals between the surface and shadow decoders:
///
/// ```text
/// F̂_shadow  = F_shadow  + SE_a(F_surface)
/// F̂_surface = F_surface + SE_b(F_shadow)
/// ```
#[derive(Debug)]
pub struct Ctft {
    pub se_surface: SqueezeExcite,
    pub se_shadow: SqueezeExcite,
}

impl Ctft {
    pub fn new(vs: &nn::Path, channels: i64, reduction: i64) -> Self {
        Self {
            se_surface: SqueezeExcite::new(&(vs / "se_surface"), channels, reduction),
            se_shadow: SqueezeExcite::new(&(vs / "se_shadow"), channels, reduction),
        }
    }

    pub fn transfer(&self, f_surface: &Tensor, f_shadow: &Tensor) -> CtftFeatures {
        let r_surface = self.se_surface.forward(f_surface);
        let r_shadow = self.se_shadow.forward(f_shadow);
        CtftFeatures {
            f_hat_surface: f_surface + &r_shadow,
            f_hat_shadow: f_shadow + &r_surface,
            f_surface: f_surface.shallow_clone(),
            f_shadow: f_shadow.shallow_clone(),
            r_surface,
            r_shadow,
        }
    }

    /// Returns `(F̂_surface, F̂_shadow)`; with `enabled == false` the inputs
    /// pass through untouched.
    pub fn forward(&self, f_surface: &Tensor, f_shadow: &Tensor, enabled: bool) -> Result<(Tensor, Tensor)> {
        if f_surface.size() != f_shadow.size() {
            return Err(Error::Contract(format!(
                "ctft inputs differ in shape: {:?} vs {:?}",
                f_surface.size(),
                f_shadow.size()
            )));
        }
        if !enabled {
            return Ok((f_surface.shallow_clone(), f_shadow.shallow_clone()));
        }
        let t = self.transfer(f_surface, f_shadow);
        Ok((t.f_hat_surface, t.f_hat_shadow))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    fn zero_expand(se: &SqueezeExcite) {
        tch::no_grad(|| {
            let _ = se.expand.ws.shallow_clone().zero_();
            if let Some(b) = &se.expand.bs {
                let _ = b.shallow_clone().zero_();
            }
        });
    }

    #[test]
    fn se_of_zero_is_zero_and_shape_preserved() {
        tch::manual_seed(0);
        let vs = nn::VarStore::new(Device::Cpu);
        let se = SqueezeExcite::new(&vs.root(), 8, 4);
        let z = Tensor::zeros([2, 8, 5, 5], (Kind::Float, Device::Cpu));
        assert_eq!(f64::try_from(se.forward(&z).abs().max()).unwrap(), 0.0);
        let x = Tensor::randn([3, 8, 6, 7], (Kind::Float, Device::Cpu));
        assert_eq!(se.forward(&x).size(), x.size());
    }

    #[test]
    fn zeroed_expand_gives_half_gate() {
        tch::manual_seed(1);
        let vs = nn::VarStore::new(Device::Cpu);
        let se = SqueezeExcite::new(&vs.root(), 8, 2);
        zero_expand(&se);
        let x = Tensor::randn([2, 8, 4, 4], (Kind::Float, Device::Cpu));
        let diff = (se.forward(&x) - &x * 0.5).abs().max();
        assert_eq!(f64::try_from(diff).unwrap(), 0.0);
    }

    #[test]
    fn ctft_examples() {
        tch::manual_seed(2);
        let vs = nn::VarStore::new(Device::Cpu);
        let ctft = Ctft::new(&vs.root(), 8, 4);
        let opts = (Kind::Float, Device::Cpu);
        let f_shadow = Tensor::randn([2, 8, 6, 6], opts);
        let zero = Tensor::zeros([2, 8, 6, 6], opts);

        let (_, shadow_hat) = ctft.forward(&zero, &f_shadow, true).unwrap();
        assert!(shadow_hat.equal(&f_shadow));

        let f_surface = Tensor::randn([2, 8, 6, 6], opts);
        let (a, b) = ctft.forward(&f_surface, &f_shadow, false).unwrap();
        assert!(a.equal(&f_surface) && b.equal(&f_shadow));

        zero_expand(&ctft.se_surface);
        let t = ctft.transfer(&f_surface, &f_shadow);
        let diff = (&t.f_hat_shadow - &f_shadow - &f_surface * 0.5).abs().max();
        assert!(f64::try_from(diff).unwrap() < 1e-6);
        for block in [&t.f_surface, &t.r_surface, &t.r_shadow, &t.f_hat_surface, &t.f_hat_shadow] {
            assert_eq!(block.size(), f_shadow.size());
        }
        let small = Tensor::zeros([2, 8, 3, 3], opts);
        assert!(matches!(ctft.forward(&small, &f_shadow, true), Err(Error::Contract(_))));
    }
}
