//! Mollifier, lattice covariance, and coupled noise synthesis.
//!
//! The rescaled mollifier `eps^{-(d+kappa)/2} phi(x/eps)` is tabulated as
//! lattice cell averages. One white-noise field `eta_k` per time step (variance
//! `dt/dx^d` per site) is convolved with that table, so every `eps` sees the
//! same `eta_k`. The exact covariance of the synthesized slices is
//! `dt * Rbar_eps(v)` with `Rbar_eps(v) = dx^d sum_y phibar(y) phibar(y+v)`.
//!
//! Consecutive steps `2m, 2m+1` share one complex FFT: `eta_2m` rides in the
//! real part and `eta_2m+1` in the imaginary part. The multiplier is real and
//! even, so the two slices separate exactly after the inverse transform.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::{check_kappa, riesz_closed_form, ContinuumCovariance};
use crate::error::{LabError, Result};
use crate::fft::{FftNd, FftScratch};
use crate::grid::{FieldFrame, GridSpec};
use crate::quad::Rule;
use crate::rng::{stream, tag};
use crate::stats::Moments;

/// Calibration diagnostic threshold on `max |R_lattice / R_continuum - 1|`
/// over the window `[L/8, L/4]`.
pub const WINDOW_TOLERANCE: f64 = 5e-2;

/// `A (1 + |x|^2)^{-(d+kappa)/4}`.
pub fn mollifier(x: &[f64], kappa: f64, dim: usize, amplitude: f64) -> Result<f64> {
    check_kappa(kappa, dim)?;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok(amplitude * (1.0 + r2).powf(-(dim as f64 + kappa) / 4.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub grid: GridSpec,
    pub kappa: f64,
    pub dim: usize,
    pub amplitude: f64,
    /// Cell-averaged `phi` on the lattice (eps = 1).
    pub profile: Vec<f64>,
    /// Lattice covariance `Rbar_1`, indexed like the grid (origin at index 0).
    pub covariance_table: Vec<f64>,
    pub r_zero: f64,
    /// `lim |x|^kappa R(x)`, exactly `A^2 I_riesz`.
    pub tail_constant: f64,
    /// `max |R_lattice / R_continuum - 1|` over sites with `|x|` in `[L/8, L/4]`.
    pub window_residual: f64,
}

/// Lattice cell averages of `eps^{-(d+kappa)/2} phi(x/eps)` at every site.
pub fn cell_average_profile(grid: &GridSpec, kappa: f64, amplitude: f64, eps: f64) -> Result<Vec<f64>> {
    check_kappa(kappa, grid.dim)?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LabError::Domain(format!("epsilon = {eps} outside (0, 1]")));
    }
    let d = grid.dim;
    let h = grid.dx();
    let n = grid.n_per_side as i64;
    let pw = (d as f64 + kappa) / 4.0;
    let scale = amplitude * eps.powf(-2.0 * pw);
    let f = |r2: f64| scale * (1.0 + r2 / (eps * eps)).powf(-pw);
    let nodes = Rule::new(4).unit_nodes();
    // The average depends only on the sorted absolute minimum-image coordinates.
    let mut cache = std::collections::HashMap::<[i64; 3], f64>::new();
    let mut out = vec![0.0; grid.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = grid.coords(i);
        let mut key = [0i64; 3];
        for a in 0..d {
            let mut k = c[a] as i64;
            if k > n / 2 {
                k -= n;
            }
            key[a] = k.abs();
        }
        key[..d].sort_unstable();
        if let Some(v) = cache.get(&key) {
            *o = *v;
            continue;
        }
        let centre: Vec<f64> = key[..d].iter().map(|&k| k as f64 * h).collect();
        let nearest2: f64 = centre.iter().map(|&x| (x - 0.5 * h).max(0.0).powi(2)).sum();
        let s = ((2.0 * h / nearest2.sqrt().max(eps)).ceil() as usize).clamp(1, 64);
        let sub = h / s as f64;
        let mut total = 0.0;
        let mut idx = vec![0usize; d];
        loop {
            // one sub-cell, tensor Gauss-Legendre
            let lo: Vec<f64> = (0..d).map(|a| centre[a] - 0.5 * h + idx[a] as f64 * sub).collect();
            let mut q = vec![0usize; d];
            loop {
                let mut r2 = 0.0;
                let mut w = 1.0;
                for a in 0..d {
                    let (x, wx) = nodes[q[a]];
                    let y = lo[a] + x * sub;
                    r2 += y * y;
                    w *= wx;
                }
                total += w * f(r2);
                if !advance(&mut q, nodes.len()) {
                    break;
                }
            }
            if !advance(&mut idx, s) {
                break;
            }
        }
        // weights sum to one per axis on [0,1], so total/s^d is the average
        let v = total / (s as f64).powi(d as i32);
        cache.insert(key, v);
        *o = v;
    }
    Ok(out)
}

fn advance(idx: &mut [usize], base: usize) -> bool {
    for v in idx.iter_mut().rev() {
        *v += 1;
        if *v < base {
            return true;
        }
        *v = 0;
    }
    false
}

/// Forward transform of a real even table, returned as exact real even values.
fn even_spectrum(grid: &GridSpec, fft: &FftNd, table: &[f64], scale: f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = table.iter().map(|&v| Complex64::new(v * scale, 0.0)).collect();
    fft.forward(&mut buf, &mut FftScratch::default());
    symmetrize(grid, buf.iter().map(|c| c.re).collect())
}

/// Averages each entry with its mirror image so `t[v] == t[-v]` bit for bit.
fn symmetrize(grid: &GridSpec, mut t: Vec<f64>) -> Vec<f64> {
    for i in 0..t.len() {
        let c = grid.coords(i);
        let mut j = 0usize;
        for &ca in &c[..grid.dim] {
            j = j * grid.n_per_side + (grid.n_per_side - ca) % grid.n_per_side;
        }
        if j > i {
            let m = 0.5 * (t[i] + t[j]);
            t[i] = m;
            t[j] = m;
        }
    }
    t
}

/// `Rbar = dx^d * phibar (star) phibar` via FFT.
fn lattice_covariance(grid: &GridSpec, fft: &FftNd, profile: &[f64]) -> Vec<f64> {
    let vol = grid.cell_volume();
    let spec = even_spectrum(grid, fft, profile, 1.0);
    let mut buf: Vec<Complex64> = spec.iter().map(|&s| Complex64::new(vol * s * s, 0.0)).collect();
    fft.inverse(&mut buf, &mut FftScratch::default());
    symmetrize(grid, buf.iter().map(|c| c.re).collect())
}

pub fn build_covariance(grid: &GridSpec, kappa: f64, amplitude: f64) -> Result<CovarianceModel> {
    grid.validate()?;
    check_kappa(kappa, grid.dim)?;
    if !(amplitude > 0.0) {
        return Err(LabError::Config(format!("amplitude {amplitude} must be positive")));
    }
    let (lo, hi) = (grid.box_length / 8.0, grid.box_length / 4.0);
    let window: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let r = grid.distance(i, 0);
            r >= lo && r <= hi
        })
        .collect();
    if window.is_empty() {
        return Err(LabError::Config(format!("no lattice sites with |x| in [{lo}, {hi}]; grid too small")));
    }
    let fft = FftNd::new(grid.n_per_side, grid.dim);
    let profile = cell_average_profile(grid, kappa, amplitude, 1.0)?;
    let covariance_table = lattice_covariance(grid, &fft, &profile);
    let r_zero = covariance_table[0];
    let continuum = ContinuumCovariance::new(kappa, amplitude)?;
    let mut residual: f64 = 0.0;
    let mut seen = std::collections::HashMap::<u64, f64>::new();
    for &i in &window {
        let r = grid.distance(i, 0);
        let c = *seen.entry(r.to_bits()).or_insert_with(|| continuum.value(r));
        residual = residual.max((covariance_table[i] / c - 1.0).abs());
    }
    Ok(CovarianceModel {
        grid: *grid,
        kappa,
        dim: grid.dim,
        amplitude,
        profile,
        covariance_table,
        r_zero,
        tail_constant: amplitude * amplitude * riesz_closed_form(kappa, grid.dim),
        window_residual: residual,
    })
}

/// Model with `A = I_riesz^{-1/2}`, so the limiting tail constant is one.
pub fn calibrate_amplitude(grid: &GridSpec, kappa: f64) -> Result<CovarianceModel> {
    check_kappa(kappa, grid.dim)?;
    let a = riesz_closed_form(kappa, grid.dim).powf(-0.5);
    let model = build_covariance(grid, kappa, a)?;
    if (model.tail_constant - 1.0).abs() >= 1e-2 || model.window_residual > WINDOW_TOLERANCE {
        return Err(LabError::Calibration(format!(
            "tail constant {:.6}, window residual {:.4} (tolerance {WINDOW_TOLERANCE}) on |x| in [{}, {}]",
            model.tail_constant,
            model.window_residual,
            grid.box_length / 8.0,
            grid.box_length / 4.0
        )));
    }
    Ok(model)
}

const SIDECAR_MAGIC: &[u8; 8] = b"KPZCOV01";

impl CovarianceModel {
    /// Binary sidecar: magic, header (dim, N, L, dt, kappa, A, c_star), then the R table.
    pub fn write_sidecar(&self, mut w: impl Write) -> Result<()> {
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_per_side as u32).to_le_bytes())?;
        for v in [self.grid.box_length, self.grid.dt, self.kappa, self.amplitude, self.tail_constant] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.covariance_table {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a sidecar, rebuilds the model from its header and checks the payload.
    pub fn read_sidecar(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SIDECAR_MAGIC {
            return Err(LabError::Format("not a covariance sidecar".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut head = [0.0; 5];
        for v in head.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let grid = GridSpec::new(dim, n, head[0], head[1])?;
        let model = build_covariance(&grid, head[2], head[3])?;
        if model.tail_constant.to_bits() != head[4].to_bits() {
            return Err(LabError::Format("sidecar tail constant does not match its header".into()));
        }
        for (i, expect) in model.covariance_table.iter().enumerate() {
            r.read_exact(&mut b8).map_err(|_| LabError::Format(format!("sidecar payload truncated at {i}")))?;
            let got = f64::from_le_bytes(b8);
            if (got - expect).abs() > 1e-12 * model.r_zero {
                return Err(LabError::Format(format!("sidecar covariance differs at index {i}")));
            }
        }
        Ok(model)
    }
}

/// Per-eps synthesis data.
#[derive(Debug, Clone)]
pub struct SlicePlan {
    pub epsilon: f64,
    /// `dx^d * FFT(phibar_eps)`, real and even.
    pub multiplier: Vec<f64>,
    /// Exact slice covariance divided by `dt`.
    pub covariance: Vec<f64>,
}

impl SlicePlan {
    pub fn r_zero(&self) -> f64 {
        self.covariance[0]
    }
}

/// Seed record for one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub master_seed: u64,
    pub replica: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSlice {
    /// Time-integrated noise over one step.
    pub frame: FieldFrame,
    pub epsilon: f64,
    pub step_index: i64,
    pub lineage: Lineage,
}

/// Coupled noise for a fixed set of eps values on one grid.
#[derive(Debug, Clone)]
pub struct NoiseField {
    grid: GridSpec,
    fft: Arc<FftNd>,
    plans: Vec<SlicePlan>,
}

impl NoiseField {
    pub fn new(model: &CovarianceModel, epsilons: &[f64]) -> Result<Self> {
        let grid = model.grid;
        let fft = Arc::new(FftNd::new(grid.n_per_side, grid.dim));
        let mut plans = Vec::with_capacity(epsilons.len());
        for &eps in epsilons {
            let profile = if eps == 1.0 {
                model.profile.clone()
            } else {
                cell_average_profile(&grid, model.kappa, model.amplitude, eps)?
            };
            let multiplier = even_spectrum(&grid, &fft, &profile, grid.cell_volume());
            let covariance =
                if eps == 1.0 { model.covariance_table.clone() } else { lattice_covariance(&grid, &fft, &profile) };
            plans.push(SlicePlan { epsilon: eps, multiplier, covariance });
        }
        Ok(Self { grid, fft, plans })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn plans(&self) -> &[SlicePlan] {
        &self.plans
    }

    pub fn plan(&self, eps_index: usize) -> &SlicePlan {
        &self.plans[eps_index]
    }

    pub fn fft(&self) -> &Arc<FftNd> {
        &self.fft
    }

    /// White-noise increment for one step, before convolution.
    pub fn white(&self, lineage: Lineage, step: i64, out: &mut [f64]) {
        let sd = (self.grid.dt / self.grid.cell_volume()).sqrt();
        let mut rng = stream(lineage.master_seed, lineage.replica, tag::NOISE, step);
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sd * z;
        }
    }

    /// `FFT(eta_2m + i eta_2m+1)` for the pair containing `step`.
    pub fn pair_spectrum(&self, lineage: Lineage, pair: i64, buf: &mut Vec<Complex64>, scratch: &mut FftScratch) {
        let len = self.grid.len();
        let mut a = vec![0.0; len];
        let mut b = vec![0.0; len];
        self.white(lineage, 2 * pair, &mut a);
        self.white(lineage, 2 * pair + 1, &mut b);
        buf.clear();
        buf.extend(a.iter().zip(&b).map(|(&x, &y)| Complex64::new(x, y)));
        self.fft.forward(buf, scratch);
    }

    /// Slices for both steps of a pair at one eps, from its pair spectrum.
    pub fn pair_slices(
        &self,
        eps_index: usize,
        spectrum: &[Complex64],
        even: &mut [f64],
        odd: &mut [f64],
        buf: &mut Vec<Complex64>,
        scratch: &mut FftScratch,
    ) {
        let m = &self.plans[eps_index].multiplier;
        buf.clear();
        buf.extend(spectrum.iter().zip(m).map(|(z, &w)| z * w));
        self.fft.inverse(buf, scratch);
        for ((e, o), z) in even.iter_mut().zip(odd.iter_mut()).zip(buf.iter()) {
            *e = z.re;
            *o = z.im;
        }
    }

    pub fn slice(&self, eps_index: usize, lineage: Lineage, step: i64) -> NoiseSlice {
        let pair = step.div_euclid(2);
        let mut spec = Vec::new();
        let mut buf = Vec::new();
        let mut scratch = FftScratch::default();
        self.pair_spectrum(lineage, pair, &mut spec, &mut scratch);
        let len = self.grid.len();
        let (mut even, mut odd) = (vec![0.0; len], vec![0.0; len]);
        self.pair_slices(eps_index, &spec, &mut even, &mut odd, &mut buf, &mut scratch);
        let values = if step.rem_euclid(2) == 0 { even } else { odd };
        NoiseSlice {
            frame: FieldFrame { grid: self.grid, time: step as f64 * self.grid.dt, values },
            epsilon: self.plans[eps_index].epsilon,
            step_index: step,
            lineage,
        }
    }
}

/// One-off slice for `(seed, replica, step)` at `epsilon`.
pub fn sample_slice(
    model: &CovarianceModel,
    grid: &GridSpec,
    epsilon: f64,
    master_seed: u64,
    replica: u64,
    step: i64,
) -> Result<NoiseSlice> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(LabError::Domain(format!("epsilon = {epsilon} outside (0, 1]")));
    }
    if *grid != model.grid {
        return Err(LabError::Contract("grid differs from the covariance model grid".into()));
    }
    let field = NoiseField::new(model, &[epsilon])?;
    Ok(field.slice(0, Lineage { master_seed, replica }, step))
}

/// Empirical spatial covariance of slices at one lattice lag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagEstimate {
    pub epsilon: f64,
    pub lag: [i64; 3],
    /// Macroscopic length of the lag.
    pub distance: f64,
    /// Site-averaged `xi(x) xi(x+v) / dt`, averaged over slices.
    pub empirical: f64,
    pub se: f64,
    /// Exact lattice covariance `Rbar_eps(v)`.
    pub target: f64,
}

impl LagEstimate {
    /// Distance from the target in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.empirical - self.target) / self.se
    }
}

/// Correlation of site-averaged products between slices `lag` steps apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalEstimate {
    pub lag_steps: i64,
    pub correlation: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub slices: u64,
    pub lags: Vec<LagEstimate>,
    pub temporal: Vec<TemporalEstimate>,
}

fn shift_table(grid: &GridSpec, lag: [i64; 3]) -> Vec<usize> {
    (0..grid.len()).map(|i| grid.shifted(i, &lag[..grid.dim])).collect()
}

fn lagged_mean(a: &[f64], b: &[f64], shift: &[usize]) -> f64 {
    a.iter().zip(shift).map(|(x, &j)| x * b[j]).sum::<f64>() / a.len() as f64
}

/// Estimates the slice covariance at each lag for every eps plan from
/// `slices` consecutive steps of replica 0, plus the lag-1 and lag-2
/// temporal correlation at the first plan.
pub fn noise_check(noise: &NoiseField, lags: &[[i64; 3]], slices: u64, master_seed: u64) -> Result<NoiseCheck> {
    if slices < 8 || !slices.is_multiple_of(4) {
        return Err(LabError::Contract("noise check needs a positive multiple of 4 slices, at least 8".into()));
    }
    let grid = *noise.grid();
    let dt = grid.dt;
    let shifts: Vec<Vec<usize>> = lags.iter().map(|&l| shift_table(&grid, l)).collect();
    let lineage = Lineage { master_seed, replica: 0 };
    let n_eps = noise.plans().len();
    // per pair of steps: products for every (eps, lag) and both slices, plus temporal products
    let rows: Vec<(Vec<f64>, [f64; 2])> = (0..slices as i64 / 4)
        .into_par_iter()
        .map(|q| {
            let len = grid.len();
            let mut scratch = FftScratch::default();
            let (mut spec, mut buf) = (Vec::new(), Vec::new());
            let mut out = Vec::with_capacity(4 * n_eps * lags.len());
            let mut first = Vec::new();
            for p in [2 * q, 2 * q + 1] {
                noise.pair_spectrum(lineage, p, &mut spec, &mut scratch);
                for e in 0..n_eps {
                    let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
                    noise.pair_slices(e, &spec, &mut a, &mut b, &mut buf, &mut scratch);
                    for f in [&a, &b] {
                        out.extend(shifts.iter().map(|sh| lagged_mean(f, f, sh) / dt));
                    }
                    if e == 0 {
                        first.push(a);
                        first.push(b);
                    }
                }
            }
            let r0 = noise.plan(0).r_zero() * dt;
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / (len as f64 * r0);
            (out, [dot(&first[0], &first[1]), dot(&first[1], &first[3])])
        })
        .collect();
    let mut estimates = Vec::new();
    for e in 0..n_eps {
        let plan = noise.plan(e);
        for (k, &lag) in lags.iter().enumerate() {
            let mut m = Moments::default();
            for (row, _) in &rows {
                for half in 0..2 {
                    for slot in 0..2 {
                        m.push(row[((half * n_eps + e) * 2 + slot) * lags.len() + k]);
                    }
                }
            }
            let site = shifts[k][0];
            let d = grid.displacement(site);
            estimates.push(LagEstimate {
                epsilon: plan.epsilon,
                lag,
                distance: d.iter().map(|v| v * v).sum::<f64>().sqrt(),
                empirical: m.mean,
                se: m.se(),
                target: plan.covariance[site],
            });
        }
    }
    let temporal = [1, 2]
        .iter()
        .enumerate()
        .map(|(i, &lag_steps)| {
            let m = Moments::from_slice(&rows.iter().map(|r| r.1[i]).collect::<Vec<_>>());
            TemporalEstimate { lag_steps, correlation: m.mean, se: m.se() }
        })
        .collect();
    Ok(NoiseCheck { slices, lags: estimates, temporal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk() -> GridSpec {
        GridSpec::new(3, 32, 16.0, 0.05).unwrap()
    }

    #[test]
    fn mollifier_values() {
        assert_eq!(mollifier(&[0.0, 0.0, 0.0], 2.5, 3, 1.0).unwrap(), 1.0);
        assert_relative_eq!(mollifier(&[1.0, 0.0, 0.0], 2.5, 3, 1.0).unwrap(), 2f64.powf(-1.375), epsilon = 1e-15);
        assert_relative_eq!(mollifier(&[1.0, 0.0, 0.0], 2.5, 3, 1.0).unwrap(), 0.3855527064, epsilon = 1e-10);
        assert!(mollifier(&[0.0; 3], 3.5, 3, 1.0).is_err());
        // |x|^{(d+kappa)/2} phi(x) = A (1 + |x|^-2)^{-(d+kappa)/4}
        let ratio = |r: f64| r.powf(2.75) * mollifier(&[r, 0.0, 0.0], 2.5, 3, 1.0).unwrap();
        for r in [10.0, 20.0, 40.0] {
            assert_relative_eq!(ratio(r), (1.0 + r.powi(-2)).powf(-1.375), max_relative = 1e-12);
        }
        assert!((ratio(40.0) / ratio(20.0) - 1.0).abs() < 0.01);
        assert!(ratio(10.0) < ratio(20.0) && ratio(20.0) < ratio(40.0) && ratio(40.0) < 1.0);
    }

    #[test]
    fn covariance_table_invariants() {
        let g = desk();
        let m = build_covariance(&g, 2.5, 1.0).unwrap();
        let direct = g.cell_volume() * m.profile.iter().map(|p| p * p).sum::<f64>();
        assert_relative_eq!(m.r_zero, direct, max_relative = 1e-10);
        assert!(m.covariance_table.iter().all(|&r| r <= m.r_zero));
        for i in [1, 77, 1000, 20000] {
            let c = g.coords(i);
            let j = g.index(&[(32 - c[0]) % 32, (32 - c[1]) % 32, (32 - c[2]) % 32]);
            assert_eq!(m.covariance_table[i].to_bits(), m.covariance_table[j].to_bits());
        }
        let m2 = build_covariance(&g, 2.5, 2.0).unwrap();
        for (a, b) in m.covariance_table.iter().zip(&m2.covariance_table) {
            assert_relative_eq!(4.0 * a, *b, max_relative = 1e-10);
        }
    }

    #[test]
    fn calibration_fixes_tail_constant() {
        let g = desk();
        let m = calibrate_amplitude(&g, 2.5).unwrap();
        assert!((m.tail_constant - 1.0).abs() < 1e-2);
        assert!(m.window_residual < WINDOW_TOLERANCE, "{}", m.window_residual);
        assert_relative_eq!(m.amplitude, riesz_closed_form(2.5, 3).powf(-0.5), max_relative = 1e-12);
        // pre-asymptotic: |x|^kappa R(x) at |x| = L/8 is far below its limit
        let site = g.index(&[4, 0, 0]);
        let v = 2f64.powf(2.5) * m.covariance_table[site];
        assert!(v > 0.08 && v < 0.11, "{v}");
    }

    #[test]
    fn tiny_grid_has_empty_window() {
        let g = GridSpec::new(3, 2, 1.0, 0.05).unwrap();
        assert!(matches!(build_covariance(&g, 2.5, 1.0), Err(LabError::Config(_))));
    }

    #[test]
    fn cell_average_preserves_mass_for_small_eps() {
        // total mass of phibar_eps over the torus: compare eps = 1/4 with eps = 1/8
        let g = desk();
        let a = cell_average_profile(&g, 2.5, 1.0, 0.25).unwrap();
        let b = cell_average_profile(&g, 2.5, 1.0, 0.125).unwrap();
        // away from the centre both approach A|x|^{-(d+kappa)/2}
        let far = g.index(&[6, 0, 0]);
        let r: f64 = 3.0;
        assert_relative_eq!(a[far], r.powf(-2.75), max_relative = 0.02);
        assert_relative_eq!(b[far], r.powf(-2.75), max_relative = 0.01);
        assert!(a.iter().all(|v| *v > 0.0) && b.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn slices_are_deterministic_and_paired() {
        let g = GridSpec::new(3, 8, 4.0, 0.02).unwrap();
        let m = build_covariance(&g, 2.5, 1.0).unwrap();
        let a = sample_slice(&m, &g, 0.5, 7, 3, -3).unwrap();
        let b = sample_slice(&m, &g, 0.5, 7, 3, -3).unwrap();
        assert_eq!(a, b);
        let field = NoiseField::new(&m, &[0.5]).unwrap();
        let lineage = Lineage { master_seed: 7, replica: 3 };
        let mut spec = Vec::new();
        let mut scratch = FftScratch::default();
        field.pair_spectrum(lineage, -2, &mut spec, &mut scratch);
        let (mut e, mut o) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        field.pair_slices(0, &spec, &mut e, &mut o, &mut Vec::new(), &mut scratch);
        assert_eq!(o, a.frame.values);
        assert!(sample_slice(&m, &g, 0.0, 7, 3, 0).is_err());
        assert!(sample_slice(&m, &g, 1.5, 7, 3, 0).is_err());
    }

    #[test]
    fn noise_check_matches_exact_covariance() {
        let g = GridSpec::new(3, 8, 4.0, 0.02).unwrap();
        let m = build_covariance(&g, 2.5, 1.0).unwrap();
        let field = NoiseField::new(&m, &[1.0, 0.5]).unwrap();
        let lags = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]];
        let c = noise_check(&field, &lags, 400, 11).unwrap();
        assert_eq!(c.lags.len(), 8);
        for l in &c.lags {
            assert!(l.z_score().abs() < 4.0, "{l:?}");
        }
        assert_eq!(c.lags[0].target, m.r_zero);
        for t in &c.temporal {
            assert!((t.correlation / t.se).abs() < 4.0, "{t:?}");
        }
        assert!(noise_check(&field, &lags, 6, 11).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let g = GridSpec::new(3, 8, 4.0, 0.02).unwrap();
        let m = build_covariance(&g, 2.5, 0.3).unwrap();
        let mut bytes = Vec::new();
        m.write_sidecar(&mut bytes).unwrap();
        let back = CovarianceModel::read_sidecar(bytes.as_slice()).unwrap();
        assert_eq!(back.covariance_table, m.covariance_table);
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x40;
        assert!(CovarianceModel::read_sidecar(bad.as_slice()).is_err());
        assert!(CovarianceModel::read_sidecar(&bytes[..bytes.len() - 8]).is_err());
    }
}
