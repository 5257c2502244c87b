//! Surrogate derivative of the spike step function.
//!
//! The step `s = H(u - theta)` has no useful derivative, so the backward pass
//! uses `rho(u) = (1/alpha) * exp(-k * |u - theta|)`, which peaks at
//! `1/alpha` on the threshold. `k` is `1/beta` ([`BetaMode::Divide`], the
//! SLAYER parameterization where `beta` is a width in membrane units) or
//! `beta` ([`BetaMode::Multiply`], a rate). [`smoothed_step`] is the antiderivative of
//! `rho`; swapping it in for the step gives a fully differentiable network
//! whose exact gradient equals the surrogate gradient, which is what the
//! finite-difference audits check.

use multiversion::multiversion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AnalogTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// `exp(-|u - theta| / beta)`.
    #[default]
    Divide,
    /// `exp(-beta * |u - theta|)`.
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub beta_mode: BetaMode,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 10.0, beta_mode: BetaMode::Divide }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Param(format!(
                "surrogate alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Decay rate of `rho` per unit of `|u - theta|`.
    #[inline]
    pub fn rate(&self) -> f64 {
        match self.beta_mode {
            BetaMode::Divide => 1.0 / self.beta,
            BetaMode::Multiply => self.beta,
        }
    }

    #[inline]
    pub fn rho(&self, u: f64, theta: f64) -> f64 {
        exp_nonpositive(-self.rate() * (u - theta).abs()) / self.alpha
    }

    /// `grad[i] *= rho(membrane[i])`.
    pub fn scale_by_rho(&self, grad: &mut [f64], membrane: &[f64], theta: f64) {
        scale_by_rho(grad, membrane, theta, self.rate(), 1.0 / self.alpha);
    }
}

#[multiversion(targets("x86_64+avx512f", "x86_64+avx2"))]
fn scale_by_rho(grad: &mut [f64], membrane: &[f64], theta: f64, k: f64, inv_alpha: f64) {
    for (g, &u) in grad.iter_mut().zip(membrane) {
        *g *= exp_nonpositive(-k * (u - theta).abs()) * inv_alpha;
    }
}

/// `exp(x)` for `x <= 0`, within a few ulp of `f64::exp`, written without
/// calls or branches so loops over it vectorize. Inputs below `-708` are
/// clamped there, keeping the result normal.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-708.0);
    let shifted = x * std::f64::consts::LOG2_E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to r^12 on |r| <= ln(2)/2.
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = (shifted.to_bits() as i64).wrapping_add(1023) << 52;
    p * f64::from_bits(bits as u64)
}

/// Elementwise surrogate derivative `rho(u)`.
pub fn surrogate_derivative(u: &AnalogTensor, theta: f64, cfg: &SurrogateConfig) -> AnalogTensor {
    u.map(|v| cfg.rho(v, theta))
}

/// Antiderivative of `rho` with `smoothed_step(-inf) = 0`.
#[inline]
pub fn smoothed_step(u: f64, theta: f64, cfg: &SurrogateConfig) -> f64 {
    let d = u - theta;
    let k = cfg.rate();
    let scale = 1.0 / (cfg.alpha * k);
    if d < 0.0 {
        scale * exp_nonpositive(k * d)
    } else {
        scale * (2.0 - exp_nonpositive(-k * d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;

    #[test]
    fn peak_at_threshold() {
        let cfg = SurrogateConfig::default();
        assert!((cfg.rho(10.0, 10.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn one_unit_away() {
        let cfg = SurrogateConfig { beta_mode: BetaMode::Multiply, ..SurrogateConfig::default() };
        let v = cfg.rho(11.0, 10.0);
        assert!((v - 0.1 * (-10.0f64).exp()).abs() < 1e-18);
        assert!((v - 4.54e-6).abs() < 1e-8);

        let v = SurrogateConfig::default().rho(11.0, 10.0);
        assert!((v - 0.1 * (-0.1f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn symmetric_about_threshold() {
        let cfg = SurrogateConfig { alpha: 3.0, beta: 0.7, beta_mode: BetaMode::Multiply };
        for i in 0..100 {
            let d = i as f64 * 0.125;
            assert_eq!(cfg.rho(5.0 + d, 5.0), cfg.rho(5.0 - d, 5.0));
        }
    }

    #[test]
    fn tensor_version_bounded() {
        let cfg = SurrogateConfig::default();
        let s = Shape5::new(1, 1, 1, 1, 50).unwrap();
        let u = AnalogTensor::from_vec(s, (0..50).map(|i| i as f64 * 0.4).collect()).unwrap();
        let r = surrogate_derivative(&u, 10.0, &cfg);
        assert!(r.data().iter().all(|&v| v > 0.0 && v <= 0.1));
    }

    #[test]
    fn smoothed_step_derivative_is_rho() {
        let h = 1e-6;
        for mode in [BetaMode::Divide, BetaMode::Multiply] {
            let cfg = SurrogateConfig { beta_mode: mode, ..SurrogateConfig::default() };
            for i in -40..40 {
                let u = 10.0 + i as f64 * 0.05 + 0.013;
                let fd = (smoothed_step(u + h, 10.0, &cfg) - smoothed_step(u - h, 10.0, &cfg)) / (2.0 * h);
                assert!((fd - cfg.rho(u, 10.0)).abs() < 1e-7, "u = {u}");
            }
        }
        let cfg = SurrogateConfig::default();
        // Continuous at the threshold.
        let eps = 1e-12;
        assert!((smoothed_step(10.0 - eps, 10.0, &cfg) - smoothed_step(10.0, 10.0, &cfg)).abs() < 1e-10);
    }

    #[test]
    fn fast_exp_matches_std() {
        for i in 0..200_000 {
            let x = -(i as f64) * 0.0035 - 1e-7 * (i % 7) as f64;
            let (a, b) = (exp_nonpositive(x), x.exp());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "x = {x}: {a} vs {b}");
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-1e9) < 1e-307);
    }

    #[test]
    fn invalid_config() {
        assert!(SurrogateConfig { alpha: 0.0, beta: 1.0, ..SurrogateConfig::default() }.validate().is_err());
    }
}
