//! Periodic lattice geometry and the heat semigroup.
//!
//! The semigroup multiplies Fourier modes by `exp(-t * lambda_k / 2)` where
//! `lambda_k` is the symbol of the standard second-order Laplacian stencil.
//! That makes the discrete kernel the transition density of a continuous-time
//! random walk, so it is a true probability kernel: positive and mass one.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fft::{FftNd, FftScratch};

/// Multiplier on the explicit-scheme bound `dx^2/(2d)`. The noise enters in
/// Euler fashion between exact semigroup steps, so the bound is kept, but with
/// some slack so that the desk defaults (dx = 0.5, dt = 0.05, d = 3) are legal.
pub const STABILITY_SAFETY: f64 = 2.0;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n_per_side: usize,
    pub box_length: f64,
    pub dt: f64,
}

impl GridSpec {
    pub fn new(dim: usize, n_per_side: usize, box_length: f64, dt: f64) -> Result<Self> {
        let g = Self { dim, n_per_side, box_length, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(LabError::Config(format!("dimension {} outside 1..={MAX_DIM}", self.dim)));
        }
        if self.n_per_side < 2 || !self.n_per_side.is_power_of_two() {
            return Err(LabError::Config(format!("n_per_side = {} is not a power of two >= 2", self.n_per_side)));
        }
        if !(self.box_length.is_finite() && self.box_length > 0.0) {
            return Err(LabError::Config(format!("box length {} must be positive", self.box_length)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(LabError::Config(format!("dt = {} must be positive", self.dt)));
        }
        let bound = self.stability_bound();
        if self.dt > bound {
            return Err(LabError::Config(format!(
                "dt = {} exceeds the stability bound dx^2/(2d) * {STABILITY_SAFETY} = {bound:.6}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn stability_bound(&self) -> f64 {
        self.dx() * self.dx() / (2.0 * self.dim as f64) * STABILITY_SAFETY
    }

    pub fn dx(&self) -> f64 {
        self.box_length / self.n_per_side as f64
    }

    /// Volume of one lattice cell, `dx^d`.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.n_per_side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same lattice with a different time step.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        Self::new(self.dim, self.n_per_side, self.box_length, dt)
    }

    /// Lattice coordinates of a flat index; the last axis varies fastest.
    pub fn coords(&self, mut index: usize) -> [usize; MAX_DIM] {
        let n = self.n_per_side;
        let mut c = [0usize; MAX_DIM];
        for a in (0..self.dim).rev() {
            c[a] = index % n;
            index /= n;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        coords.iter().fold(0, |acc, &c| acc * self.n_per_side + c % self.n_per_side)
    }

    /// Flat index of `site` shifted by an integer lattice vector (periodic).
    pub fn shifted(&self, site: usize, shift: &[i64]) -> usize {
        let n = self.n_per_side as i64;
        let c = self.coords(site);
        let mut out = 0usize;
        for (a, &ca) in c[..self.dim].iter().enumerate() {
            let v = (ca as i64 + shift.get(a).copied().unwrap_or(0)).rem_euclid(n);
            out = out * self.n_per_side + v as usize;
        }
        out
    }

    /// Minimum-image physical displacement of a site from the origin.
    pub fn displacement(&self, index: usize) -> [f64; MAX_DIM] {
        let n = self.n_per_side as i64;
        let dx = self.dx();
        let c = self.coords(index);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let mut k = c[a] as i64;
            if k > n / 2 {
                k -= n;
            }
            x[a] = k as f64 * dx;
        }
        x
    }

    /// Minimum-image distance between two sites.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let n = self.n_per_side as i64;
        let (ca, cb) = (self.coords(a), self.coords(b));
        let mut s = 0.0;
        for i in 0..self.dim {
            let mut k = (ca[i] as i64 - cb[i] as i64).rem_euclid(n);
            if k > n / 2 {
                k -= n;
            }
            s += (k as f64 * self.dx()).powi(2);
        }
        s.sqrt()
    }

    /// Site nearest to a physical point, coordinates taken modulo the box.
    pub fn site_at(&self, x: &[f64]) -> usize {
        let n = self.n_per_side as i64;
        let c: Vec<usize> = x.iter().map(|v| ((v / self.dx()).round() as i64).rem_euclid(n) as usize).collect();
        self.index(&c)
    }

    /// Symbol of the negative discrete Laplacian at every Fourier mode.
    pub fn laplacian_symbol(&self) -> Vec<f64> {
        let n = self.n_per_side;
        let scale = 2.0 / (self.dx() * self.dx());
        let per_axis: Vec<f64> = (0..n).map(|k| scale * (1.0 - (2.0 * PI * k as f64 / n as f64).cos())).collect();
        (0..self.len())
            .map(|i| {
                let c = self.coords(i);
                (0..self.dim).map(|a| per_axis[c[a]]).sum()
            })
            .collect()
    }
}

/// One real field on the lattice at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFrame {
    pub grid: GridSpec,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldFrame {
    pub fn new(grid: GridSpec, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::Contract(format!("frame has {} values, grid needs {}", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Domain(format!("non-finite value at site {i}")));
        }
        Ok(Self { grid, time, values })
    }

    pub fn constant(grid: GridSpec, time: f64, c: f64) -> Self {
        Self { grid, time, values: vec![c; grid.len()] }
    }

    /// Lattice delta of unit mass at `site`.
    pub fn delta(grid: GridSpec, time: f64, site: usize) -> Self {
        let mut values = vec![0.0; grid.len()];
        values[site] = 1.0 / grid.cell_volume();
        Self { grid, time, values }
    }

    /// `dx^d * sum(values)`.
    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Continuum heat kernel with generator `Δ/2`.
pub fn heat_kernel(t: f64, x: &[f64]) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(LabError::Domain(format!("heat kernel needs t > 0, got {t}")));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((2.0 * PI * t).powf(-(x.len() as f64) / 2.0) * (-r2 / (2.0 * t)).exp())
}

/// Density at `(r, z)` of the Brownian bridge from `y` at time `s` to `x` at time `t`.
pub fn bridge_kernel(s: f64, t: f64, x: &[f64], y: &[f64], r: f64, z: &[f64]) -> Result<f64> {
    if !(s < r && r < t) {
        return Err(LabError::Domain(format!("bridge time r = {r} not inside ({s}, {t})")));
    }
    if x.len() != y.len() || x.len() != z.len() {
        return Err(LabError::Contract("bridge points of different dimension".into()));
    }
    let frac = (r - s) / (t - s);
    let var = (r - s) * (t - r) / (t - s);
    let disp: Vec<f64> = (0..z.len()).map(|i| z[i] - y[i] - frac * (x[i] - y[i])).collect();
    heat_kernel(var, &disp)
}

/// Cached plan and symbol for applying the discrete heat semigroup on one grid.
#[derive(Debug, Clone)]
pub struct HeatSemigroup {
    grid: GridSpec,
    fft: Arc<FftNd>,
    symbol: Arc<Vec<f64>>,
}

impl HeatSemigroup {
    pub fn new(grid: GridSpec) -> Self {
        Self { grid, fft: Arc::new(FftNd::new(grid.n_per_side, grid.dim)), symbol: Arc::new(grid.laplacian_symbol()) }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn fft(&self) -> &Arc<FftNd> {
        &self.fft
    }

    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }

    /// Fourier multiplier for `duration`. The zero mode is exactly 1.
    pub fn multiplier(&self, duration: f64) -> Vec<f64> {
        self.symbol.iter().map(|l| (-0.5 * duration * l).exp()).collect()
    }

    pub fn apply(&self, frame: &FieldFrame, duration: f64) -> Result<FieldFrame> {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(LabError::Domain(format!("semigroup duration {duration} must be >= 0")));
        }
        if frame.grid != self.grid {
            return Err(LabError::Contract("frame grid differs from semigroup grid".into()));
        }
        if duration == 0.0 {
            return Ok(frame.clone());
        }
        let mult = self.multiplier(duration);
        let mut values = frame.values.clone();
        let mut buf = Vec::new();
        self.apply_multiplier(&mut values, None, &mult, &mut buf, &mut FftScratch::default());
        FieldFrame::new(self.grid, frame.time + duration, values)
    }

    /// Filters one or two real fields through a real, even multiplier using a
    /// single complex transform (the second field rides in the imaginary part).
    pub fn apply_multiplier(
        &self,
        a: &mut [f64],
        b: Option<&mut [f64]>,
        mult: &[f64],
        buf: &mut Vec<Complex64>,
        scratch: &mut FftScratch,
    ) {
        buf.clear();
        match &b {
            Some(b) => buf.extend(a.iter().zip(b.iter()).map(|(&x, &y)| Complex64::new(x, y))),
            None => buf.extend(a.iter().map(|&x| Complex64::new(x, 0.0))),
        }
        self.fft.forward(buf, scratch);
        for (v, m) in buf.iter_mut().zip(mult) {
            *v *= *m;
        }
        self.fft.inverse(buf, scratch);
        for (x, v) in a.iter_mut().zip(buf.iter()) {
            *x = v.re;
        }
        if let Some(b) = b {
            for (y, v) in b.iter_mut().zip(buf.iter()) {
                *y = v.im;
            }
        }
    }
}

/// One-shot form of [`HeatSemigroup::apply`].
pub fn semigroup_apply(frame: &FieldFrame, duration: f64) -> Result<FieldFrame> {
    if duration == 0.0 {
        return Ok(frame.clone());
    }
    HeatSemigroup::new(frame.grid).apply(frame, duration)
}
