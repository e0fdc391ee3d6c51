//! Continuum covariance `R = phi * phi` for the power-law mollifier in three
//! dimensions, evaluated by radial quadrature.
//!
//! With `phi(s) = A (1 + s^2)^(-p)`, `p = (d + kappa)/4`, the angular average of
//! `phi(|y + x|)` over the sphere `|y| = s` is `A [G(rho+s) - G(rho-s)] / (2 rho s)`
//! where `G(u) = (1 + u^2)^(1-p) / (2(1-p))`, leaving a single smooth integral
//! over `s`. The approach to `|x|^-kappa` is slow: the relative correction is
//! of order `|x|^-(d-kappa)/2`.

use std::f64::consts::PI;

use statrs::function::gamma::gamma;

use crate::error::{LabError, Result};
use crate::quad::{geometric_points, Rule};

/// Closed form of `int |z|^-a |e - z|^-a dz` over R^d with `a = (d + kappa)/2`.
pub fn riesz_closed_form(kappa: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let a = (d + kappa) / 2.0;
    PI.powf(d / 2.0) * gamma((d - a) / 2.0).powi(2) * gamma((2.0 * a - d) / 2.0)
        / (gamma(a / 2.0).powi(2) * gamma(d - a))
}

pub fn check_kappa(kappa: f64, dim: usize) -> Result<()> {
    if !(kappa > 2.0 && kappa < dim as f64) {
        return Err(LabError::Config(format!("kappa = {kappa} violates κ ∈ (2, d) with d = {dim}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ContinuumCovariance {
    pub kappa: f64,
    pub amplitude: f64,
    p: f64,
    rule: Rule,
}

impl ContinuumCovariance {
    pub fn new(kappa: f64, amplitude: f64) -> Result<Self> {
        check_kappa(kappa, 3)?;
        Ok(Self { kappa, amplitude, p: (3.0 + kappa) / 4.0, rule: Rule::new(24) })
    }

    /// Model with the tail constant normalised to one.
    pub fn calibrated(kappa: f64) -> Result<Self> {
        check_kappa(kappa, 3)?;
        Self::new(kappa, riesz_closed_form(kappa, 3).powf(-0.5))
    }

    pub fn phi(&self, r: f64) -> f64 {
        self.amplitude * (1.0 + r * r).powf(-self.p)
    }

    /// `lim |x|^kappa R(x)`.
    pub fn tail_constant(&self) -> f64 {
        self.amplitude * self.amplitude * riesz_closed_form(self.kappa, 3)
    }

    pub fn at_zero(&self) -> f64 {
        let p2 = 2.0 * self.p;
        let f = |s: f64| 4.0 * PI * s * s * (1.0 + s * s).powf(-p2);
        let head = self.rule.composite(0.0, 4.0, 8, f);
        let tail = self.rule.tail(4.0, 4, f);
        self.amplitude * self.amplitude * (head + tail)
    }

    /// `G(rho + s) - G(|rho - s|)`, computed without cancellation.
    fn g_diff(&self, rho: f64, s: f64) -> f64 {
        let q = 1.0 - self.p;
        let base = 1.0 + (rho - s) * (rho - s);
        let ratio = (4.0 * rho * s / base).ln_1p();
        base.powf(q) * (q * ratio).exp_m1() / (2.0 * q)
    }

    pub fn value(&self, rho: f64) -> f64 {
        let rho = rho.abs();
        if rho < 1e-6 {
            return self.at_zero();
        }
        let f = |s: f64| s * (1.0 + s * s).powf(-self.p) * self.g_diff(rho, s);
        // Features live at s ~ 1 (core of phi) and s ~ rho (core of the shell).
        let h = 0.5f64.min(rho / 4.0);
        let mut pts = vec![0.0];
        pts.extend(geometric_points(h, rho / 2.0, 2.0));
        pts.extend(geometric_points(h, rho / 2.0, 2.0).iter().rev().map(|g| rho - g));
        pts.push(rho);
        pts.extend(geometric_points(h, 2.0 * rho + 4.0, 2.0).iter().map(|g| rho + g));
        pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * rho);
        let head = self.rule.segments(&pts, 1, f);
        let tail = self.rule.tail(*pts.last().unwrap(), 3, f);
        2.0 * PI * self.amplitude * self.amplitude / rho * (head + tail)
    }

    pub fn table(&self) -> RadialTable {
        RadialTable::build(self)
    }
}

/// Interpolating table of the continuum covariance out to `1e9`.
#[derive(Debug, Clone)]
pub struct RadialTable {
    pub kappa: f64,
    step: f64,
    near: Vec<f64>,
    log_lo: f64,
    log_step: f64,
    far: Vec<f64>,
}

const NEAR_MAX: f64 = 8.0;
const FAR_MAX: f64 = 1e9;

impl RadialTable {
    fn build(model: &ContinuumCovariance) -> Self {
        let step = 0.01;
        let nn = (NEAR_MAX / step).round() as usize;
        let near: Vec<f64> = (0..=nn).map(|i| model.value(i as f64 * step)).collect();
        let log_lo = NEAR_MAX.ln();
        let nf = 1200;
        let log_step = (FAR_MAX.ln() - log_lo) / nf as f64;
        let far: Vec<f64> = (0..=nf).map(|i| model.value((log_lo + i as f64 * log_step).exp()).ln()).collect();
        Self { kappa: model.kappa, step, near, log_lo, log_step, far }
    }

    pub fn eval(&self, rho: f64) -> f64 {
        let rho = rho.abs();
        if rho < NEAR_MAX {
            let x = rho / self.step;
            let i = (x.floor() as usize).min(self.near.len() - 2);
            let w = x - i as f64;
            return self.near[i] * (1.0 - w) + self.near[i + 1] * w;
        }
        let lx = (rho.ln() - self.log_lo) / self.log_step;
        if lx >= (self.far.len() - 1) as f64 {
            let last = *self.far.last().unwrap();
            return (last - self.kappa * (rho / FAR_MAX).ln()).exp();
        }
        let i = (lx.floor() as usize).min(self.far.len() - 2);
        let w = lx - i as f64;
        (self.far[i] * (1.0 - w) + self.far[i + 1] * w).exp()
    }
}
