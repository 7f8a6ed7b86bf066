//! Stochastic interpolants between coupled noise and target states.
//!
//! x_t = (t/T)(xT + γ) + (1 − t/T)·x0 + α·sqrt(t(T−t)/T)·ε
//!
//! with γ ∼ N(0, σγ² I) jitter on the target and ε ∼ N(0, I) bridge noise.
//! The regression target for flow matching is the straight-line velocity
//! (xT − x0)/T. Both noise draws always consume the stream, so changing σγ
//! or α never shifts downstream randomness.

use rand::Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Interpolant parameters shared by training and sampling.
#[derive(Debug, Clone, Copy)]
pub struct InterpolantConfig {
    /// Terminal time T.
    pub horizon: f64,
    /// Std of the target jitter γ.
    pub sigma_gamma: f64,
    /// Constant weight of the Brownian-bridge noise term. 0 gives the
    /// deterministic straight-line interpolant.
    pub alpha: f64,
    /// Std of the initial noise x0.
    pub sigma_0: f64,
}

impl Default for InterpolantConfig {
    fn default() -> Self {
        InterpolantConfig {
            horizon: 1.0,
            sigma_gamma: 0.001,
            alpha: 0.0,
            sigma_0: 0.1,
        }
    }
}

impl InterpolantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Domain(format!(
                "interpolant: horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.sigma_gamma < 0.0 || self.alpha < 0.0 {
            return Err(Error::Domain(
                "interpolant: sigma_gamma and alpha must be nonnegative".to_string(),
            ));
        }
        if !(self.sigma_0 > 0.0) {
            return Err(Error::Domain(format!(
                "interpolant: sigma_0 must be positive, got {}",
                self.sigma_0
            )));
        }
        Ok(())
    }
}

/// One training sample: time, interpolated state, regression target velocity.
#[derive(Debug, Clone)]
pub struct InterpolantSample {
    pub t: f64,
    pub x_t: Tensor,
    pub u_target: Tensor,
}

/// t ∼ uniform(0, T).
pub fn sample_time<R: Rng + ?Sized>(cfg: &InterpolantConfig, rng: &mut R) -> f64 {
    rng.gen_range(0.0..cfg.horizon)
}

/// Interpolated state at time t between a coupled (x0, xT) pair.
pub fn interpolate<R: Rng + ?Sized>(
    x0: &Tensor,
    xt: &Tensor,
    t: f64,
    cfg: &InterpolantConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if x0.shape() != xt.shape() {
        return Err(Error::Shape(format!(
            "interpolate: endpoint shapes {:?} and {:?} differ",
            x0.shape(),
            xt.shape()
        )));
    }
    let big_t = cfg.horizon;
    if !(0.0..=big_t).contains(&t) {
        return Err(Error::Domain(format!(
            "interpolate: t = {t} outside [0, {big_t}]"
        )));
    }
    let gamma = Tensor::randn(x0.shape(), 1.0, rng);
    let eps = Tensor::randn(x0.shape(), 1.0, rng);

    let w_target = t / big_t;
    let w_source = 1.0 - t / big_t;
    let w_bridge = cfg.alpha * (t * (big_t - t) / big_t).sqrt();

    // xT + σγ·γ, then the convex combination plus bridge noise. All
    // coefficients vanish exactly at the boundaries, so t = 0 returns x0
    // bit-for-bit (and t = T returns xT when σγ = 0).
    let jittered = xt.add_scaled(&gamma, cfg.sigma_gamma)?;
    let mut out = x0.scale(w_source)?;
    out = out.add_scaled(&jittered, w_target)?;
    out = out.add_scaled(&eps, w_bridge)?;
    Ok(out)
}

/// Straight-line target velocity (xT − x0)/T.
pub fn target_velocity(x0: &Tensor, xt: &Tensor, cfg: &InterpolantConfig) -> Result<Tensor> {
    xt.sub(x0)?.scale(1.0 / cfg.horizon)
}
