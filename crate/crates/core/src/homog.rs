//! Homogenisation defect of the Green's function and the deterministic
//! bridge-kernel functional that controls its rate.
//!
//! For a source `y` released at time `s` and read at `t`,
//! `rho = w(t, x) / P_{t-s}(x - y) - C(t) Z(t, x)`, where `w` is the Green's
//! function, `C` its mass and `Z` the stationary field. `Z` is proxied by a
//! solution started from ones far in the past on the same noise, and `P` is the
//! lattice heat kernel computed by the same driver at zero coupling, so that
//! zero coupling gives `rho = 0` exactly.

use std::io::Write;
use std::sync::Arc;

use libm::erfc;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::{check_kappa, ContinuumCovariance, RadialTable};
use crate::error::{LabError, Result};
use crate::fft::{FftNd, FftScratch};
use crate::noise::{Lineage, NoiseField};
use crate::oracle::{cube_mass, digest, OracleResult};
use crate::quad::Rule;
use crate::she::{effective_coupling, time_index, Driver, TrackSpec};
use crate::stats::{loglog_fit, mean_se, LineFit};

/// Smallest lattice heat kernel value accepted in the ratio `w / P`.
pub const P_FLOOR: f64 = 1e-300;

/// `mu = 1/2 - 1/kappa`.
pub fn mu(kappa: f64) -> f64 {
    0.5 - 1.0 / kappa
}

/// `mu~ = 1 - 2/kappa`.
pub fn mu_tilde(kappa: f64) -> f64 {
    1.0 - 2.0 / kappa
}

/// `(1 + lag)^-mu (1 + (1 + lag)^-1/2 |x - y|)`.
pub fn weight(kappa: f64, lag: f64, distance: f64) -> f64 {
    (1.0 + lag).powf(-mu(kappa)) * (1.0 + distance / (1.0 + lag).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HomogSample {
    pub s: f64,
    pub t: f64,
    pub y: usize,
    pub x: usize,
    /// Lattice steps from `y` to `x` along the first axis.
    pub offset: usize,
    pub replica: u64,
    pub ratio: f64,
    pub c_val: f64,
    pub z_val: f64,
    pub rho: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct HomogConfig {
    /// Lags `t - s`, multiples of dt.
    pub lags: Vec<f64>,
    /// Offsets `x - y` in lattice steps along the first axis.
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub replicas: u64,
    pub beta: f64,
    pub kappa: f64,
    pub eps_index: usize,
    /// The proxy for `Z` starts `(1 + proxy_factor) * max lag` before `t`,
    /// so every lag sees `s - s0 >= proxy_factor * (t - s)`.
    pub proxy_factor: f64,
    pub master_seed: u64,
}

/// A (lag, offset) cell left out, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkippedCell {
    pub lag: f64,
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogEnsemble {
    pub kappa: f64,
    pub beta: f64,
    pub dx: f64,
    pub samples: Vec<HomogSample>,
    pub skipped: Vec<SkippedCell>,
}

/// Validated defect ensemble: the lattice heat kernels, the kept cells and
/// the coupled tracks, simulated one replica at a time.
pub struct HomogPlan {
    cfg: HomogConfig,
    driver: Driver,
    steps: Vec<i64>,
    cells: Vec<Vec<usize>>,
    skipped: Vec<SkippedCell>,
    heat: Vec<Vec<f64>>,
    heat_mass: Vec<f64>,
    tracks: Vec<TrackSpec>,
}

impl HomogPlan {
    pub fn new(noise: Arc<NoiseField>, cfg: &HomogConfig) -> Result<Self> {
        check_kappa(cfg.kappa, 3)?;
        let grid = *noise.grid();
        if cfg.lags.is_empty() || cfg.lags.iter().any(|&l| !(l > 0.0)) {
            return Err(LabError::Contract("lags must be positive".into()));
        }
        if cfg.sources.is_empty() || cfg.sources.iter().any(|&y| y >= grid.len()) {
            return Err(LabError::Contract("sources must be grid sites".into()));
        }
        if !(cfg.proxy_factor > 0.0) {
            return Err(LabError::Contract("proxy factor must be positive".into()));
        }
        let dx = grid.dx();
        let n = grid.n_per_side as i64;
        let steps: Vec<i64> = cfg.lags.iter().map(|&l| time_index(l, grid.dt)).collect::<Result<_>>()?;
        let max_lag = cfg.lags.iter().cloned().fold(0.0, f64::max);
        let proxy_start = -time_index(((1.0 + cfg.proxy_factor) * max_lag / grid.dt).ceil() * grid.dt, grid.dt)?;

        let mut skipped = Vec::new();
        let mut cells: Vec<Vec<usize>> = Vec::new();
        let driver = Driver::new(noise.clone());
        let len = grid.len();
        let vol = grid.cell_volume();
        let delta_tracks = |coupling: f64| -> Vec<TrackSpec> {
            let mut v = Vec::new();
            for &y in &cfg.sources {
                for &s in &steps {
                    let mut init = vec![0.0; len];
                    init[y] = 1.0 / vol;
                    v.push(TrackSpec::multiplicative(cfg.eps_index, coupling, -s, init));
                }
            }
            v
        };
        // discrete heat kernel: the same tracks at zero coupling
        let mut heat: Vec<Vec<f64>> = Vec::new();
        let mut heat_mass: Vec<f64> = Vec::new();
        driver.run(Lineage { master_seed: cfg.master_seed, replica: 0 }, &delta_tracks(0.0), 0, |j, view| {
            if j == 0 {
                for k in 0..cfg.sources.len() * steps.len() {
                    let f = view.field(k).expect("active at 0").to_vec();
                    heat_mass.push(f.iter().sum::<f64>() * vol);
                    heat.push(f);
                }
            }
            Ok(())
        })?;
        for (li, &lag) in cfg.lags.iter().enumerate() {
            let mut keep = Vec::new();
            for &k in &cfg.offsets {
                let reach = 3.0 * lag.sqrt();
                if k as f64 * dx > reach + 1e-12 {
                    skipped.push(SkippedCell {
                        lag,
                        offset: k,
                        reason: format!("offset beyond 3 sqrt(lag) = {reach:.3}"),
                    });
                    continue;
                }
                let low = cfg.sources.iter().enumerate().find_map(|(si, &y)| {
                    let x = grid.shifted(y, &[k as i64 % n, 0, 0]);
                    let p = heat[si * steps.len() + li][x];
                    (!(p >= P_FLOOR)).then_some(p)
                });
                if let Some(p) = low {
                    skipped.push(SkippedCell {
                        lag,
                        offset: k,
                        reason: format!("heat kernel {p:e} below {P_FLOOR:e}"),
                    });
                    continue;
                }
                keep.push(k);
            }
            cells.push(keep);
        }

        let eps = noise.plan(cfg.eps_index).epsilon;
        let coupling = effective_coupling(cfg.beta, eps, cfg.kappa);
        let mut tracks = delta_tracks(coupling);
        tracks.push(TrackSpec::multiplicative(cfg.eps_index, coupling, proxy_start, vec![1.0; len]));
        Ok(Self { cfg: cfg.clone(), driver, steps, cells, skipped, heat, heat_mass, tracks })
    }

    /// Cells left out, with reasons.
    pub fn skipped(&self) -> &[SkippedCell] {
        &self.skipped
    }

    /// Defect samples of replica `r` at every kept cell and source.
    pub fn replica(&self, r: u64) -> Result<Vec<HomogSample>> {
        let cfg = &self.cfg;
        let grid = *self.driver.grid();
        let (dx, n, vol) = (grid.dx(), grid.n_per_side as i64, grid.cell_volume());
        let proxy = self.tracks.len() - 1;
        let mut out = Vec::new();
        self.driver.run(Lineage { master_seed: cfg.master_seed, replica: r }, &self.tracks, 0, |j, view| {
            if j != 0 {
                return Ok(());
            }
            let z = view.field(proxy).expect("proxy active");
            for (si, &y) in cfg.sources.iter().enumerate() {
                for (li, &lag) in cfg.lags.iter().enumerate() {
                    let k = si * self.steps.len() + li;
                    let w = view.field(k).expect("delta active");
                    let c_val = (w.iter().sum::<f64>() * vol) / self.heat_mass[k];
                    for &off in &self.cells[li] {
                        let x = grid.shifted(y, &[off as i64 % n, 0, 0]);
                        let ratio = w[x] / self.heat[k][x];
                        let z_val = z[x];
                        out.push(HomogSample {
                            s: -lag,
                            t: 0.0,
                            y,
                            x,
                            offset: off,
                            replica: r,
                            ratio,
                            c_val,
                            z_val,
                            rho: ratio - c_val * z_val,
                            weight: weight(cfg.kappa, lag, off as f64 * dx),
                        });
                    }
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Ensemble from per-replica samples in replica order.
    pub fn assemble(&self, rows: Vec<Vec<HomogSample>>) -> HomogEnsemble {
        HomogEnsemble {
            kappa: self.cfg.kappa,
            beta: self.cfg.beta,
            dx: self.driver.grid().dx(),
            samples: rows.into_iter().flatten().collect(),
            skipped: self.skipped.clone(),
        }
    }
}

/// Simulates the defect at every (lag, offset, source) for each replica, with
/// `t = 0` and `s = -lag`.
pub fn rho_samples(noise: Arc<NoiseField>, cfg: &HomogConfig) -> Result<HomogEnsemble> {
    let plan = HomogPlan::new(noise, cfg)?;
    let rows: Vec<Vec<HomogSample>> =
        (0..cfg.replicas).into_par_iter().map(|r| plan.replica(r)).collect::<Result<_>>()?;
    Ok(plan.assemble(rows))
}

/// `||rho||_2` in one cell, with sources averaged within each replica.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellNorm {
    pub lag: f64,
    pub offset: usize,
    pub norm: f64,
    pub se: f64,
    pub mean_rho: f64,
    pub mean_rho_se: f64,
    pub weight: f64,
    pub replicas: usize,
}

impl HomogEnsemble {
    pub fn cell_norms(&self) -> Vec<CellNorm> {
        let mut keys: Vec<(f64, usize)> = Vec::new();
        for s in &self.samples {
            let key = (-s.s, s.offset);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keys.into_iter()
            .map(|(lag, offset)| {
                let mut by_rep: Vec<(u64, f64, f64, usize)> = Vec::new();
                let mut w = 0.0;
                for s in self.samples.iter().filter(|s| -s.s == lag && s.offset == offset) {
                    w = s.weight;
                    match by_rep.iter_mut().find(|e| e.0 == s.replica) {
                        Some(e) => {
                            e.1 += s.rho * s.rho;
                            e.2 += s.rho;
                            e.3 += 1;
                        }
                        None => by_rep.push((s.replica, s.rho * s.rho, s.rho, 1)),
                    }
                }
                let sq: Vec<f64> = by_rep.iter().map(|e| e.1 / e.3 as f64).collect();
                let lin: Vec<f64> = by_rep.iter().map(|e| e.2 / e.3 as f64).collect();
                let (m2, se2) = mean_se(&sq);
                let (m1, se1) = mean_se(&lin);
                let norm = m2.sqrt();
                let se = if norm > 0.0 { se2 / (2.0 * norm) } else { 0.0 };
                CellNorm { lag, offset, norm, se, mean_rho: m1, mean_rho_se: se1, weight: w, replicas: by_rep.len() }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogReport {
    pub kappa: f64,
    pub mu_target: f64,
    pub slope_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// `sup ||rho||_2 / m` over cells.
    pub weighted_sup: f64,
    pub cells: Vec<CellNorm>,
    pub warning: Option<String>,
}

/// Log-log decay fit of `||rho||_2` at zero offset against the lag, and the
/// weighted supremum over all cells.
pub fn homog_report(ens: &HomogEnsemble) -> Result<HomogReport> {
    let cells = ens.cell_norms();
    let zero: Vec<&CellNorm> = cells.iter().filter(|c| c.offset == 0).collect();
    if zero.len() < 3 {
        return Err(LabError::Refused(format!("rate fit needs >= 3 lags at zero offset, got {}", zero.len())));
    }
    let lags: Vec<f64> = zero.iter().map(|c| c.lag).collect();
    let norms: Vec<f64> = zero.iter().map(|c| c.norm).collect();
    let span = lags.last().unwrap() / lags[0];
    let warning = (span < 10.0).then(|| format!("lags span a factor {span} (< one decade)"));
    let fit: LineFit = loglog_fit(&lags, &norms)?;
    let weighted_sup = cells.iter().map(|c| c.norm / c.weight).fold(0.0, f64::max);
    Ok(HomogReport {
        kappa: ens.kappa,
        mu_target: mu(ens.kappa),
        slope_hat: fit.slope,
        ci_lo: fit.ci_lo,
        ci_hi: fit.ci_hi,
        weighted_sup,
        cells,
        warning,
    })
}

/// Exponent of `||rho||_2` in `beta` from norms measured at several couplings.
pub fn beta_exponent(betas: &[f64], norms: &[f64]) -> Result<LineFit> {
    if betas.len() < 2 {
        return Err(LabError::Refused("beta exponent needs >= 2 couplings".into()));
    }
    loglog_fit(betas, norms)
}

/// CSV rows `lag, offset, replica, rho`; several sources give several rows per replica.
pub fn write_rho_csv(ens: &HomogEnsemble, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lag", "offset", "replica", "rho"])?;
    for s in &ens.samples {
        out.write_record([
            (-s.s).to_string(),
            (s.offset as f64 * ens.dx).to_string(),
            s.replica.to_string(),
            s.rho.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Quadrature resolution for [`kernel_j_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JResolution {
    /// Lattice cells across the support box (even).
    pub cells: usize,
    /// Midpoint nodes in time.
    pub r_nodes: usize,
}

impl JResolution {
    pub const DEFAULT: JResolution = JResolution { cells: 64, r_nodes: 32 };

    fn halved(self) -> Self {
        Self { cells: self.cells / 2, r_nodes: self.r_nodes / 2 }
    }
}

/// Half-width of the Gaussian support, in units of `sqrt t`.
const SUPPORT_SD: f64 = 5.0;

/// Mass of `N(0, 1)` on `[lo, hi]`, without cancellation in the tails.
fn normal_mass(lo: f64, hi: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if lo >= 0.0 {
        0.5 * (erfc(lo * s) - erfc(hi * s))
    } else if hi <= 0.0 {
        0.5 * (erfc(-hi * s) - erfc(-lo * s))
    } else {
        1.0 - 0.5 * erfc(hi * s) - 0.5 * erfc(-lo * s)
    }
}

/// One evaluation of `J` on a fixed lattice, in coordinates scaled by `sqrt t`.
fn j_on_lattice(t: f64, x: [f64; 3], table: &RadialTable, res: JResolution) -> f64 {
    let st = t.sqrt();
    let xs = x.map(|v| v / st);
    let m = res.cells;
    let side = xs.iter().map(|v| v.abs()).fold(0.0, f64::max) + 2.0 * SUPPORT_SD;
    let h = side / m as f64;
    // support box origin per axis; Gaussians sit at 0, -r x and -x
    let origin: Vec<f64> = (0..3).map(|a| 0.5 * (-xs[a]) - side / 2.0).collect();
    let p = 2 * m;
    let len = p * p * p;
    let fft = FftNd::new(p, 3);

    // kernel R(sqrt t d) averaged over lattice cells, minimum image
    let rule = Rule::new(3).unit_nodes();
    let near = cube_mass(h / 2.0, &|r: f64| table.eval(st * r)) / (h * h * h);
    let signed = |i: usize| if i < p / 2 { i as f64 } else { i as f64 - p as f64 };
    let mut khat: Vec<Complex64> = (0..len)
        .into_par_iter()
        .map(|i| {
            let c = [signed(i / (p * p)), signed((i / p) % p), signed(i % p)];
            if c == [0.0; 3] {
                return Complex64::new(near, 0.0);
            }
            let mut acc = 0.0;
            for &(u, wu) in &rule {
                for &(v, wv) in &rule {
                    for &(w, ww) in &rule {
                        let d = [(c[0] + (u - 0.5)) * h, (c[1] + (v - 0.5)) * h, (c[2] + (w - 0.5)) * h];
                        acc += wu * wv * ww * table.eval(st * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
                    }
                }
            }
            Complex64::new(acc, 0.0)
        })
        .collect();
    let mut scratch = FftScratch::default();
    fft.forward(&mut khat, &mut scratch);

    // |H| by exact cell averages of each Gaussian, one axis at a time
    let cell_avg = |var: f64, centre: f64, a: usize| -> Vec<f64> {
        let sd = var.sqrt();
        (0..m)
            .map(|i| {
                let lo = origin[a] + i as f64 * h - centre;
                normal_mass(lo / sd, (lo + h) / sd) / h
            })
            .collect()
    };
    let abs_h = |r: f64| -> Vec<f64> {
        let g = |var: f64, shift: f64| -> [Vec<f64>; 3] {
            [cell_avg(var, shift * xs[0], 0), cell_avg(var, shift * xs[1], 1), cell_avg(var, shift * xs[2], 2)]
        };
        let bridge = g(r * (1.0 - r), -r);
        let start = g(r, 0.0);
        let end = g(1.0 - r, -1.0);
        let mut f = vec![0.0; len];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let v = bridge[0][i] * bridge[1][j] * bridge[2][k]
                        - start[0][i] * start[1][j] * start[2][k]
                        - end[0][i] * end[1][j] * end[2][k];
                    f[(i * p + j) * p + k] = v.abs();
                }
            }
        }
        f
    };
    let mirror = |i: usize| {
        let (a, b, c) = (i / (p * p), (i / p) % p, i % p);
        ((p - a) % p * p + (p - b) % p) * p + (p - c) % p
    };
    // midpoint in u with r = (1 - cos(pi u)) / 2, two nodes per transform
    let nodes: Vec<(f64, f64)> = (0..res.r_nodes)
        .map(|j| {
            let u = (j as f64 + 0.5) / res.r_nodes as f64;
            let r = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            let dr = 0.5 * std::f64::consts::PI * (std::f64::consts::PI * u).sin() / res.r_nodes as f64;
            (r, dr)
        })
        .collect();
    let h6 = h.powi(6);
    let partial: Vec<f64> = nodes
        .par_chunks(2)
        .map(|pair| {
            let mut scratch = FftScratch::default();
            let a = abs_h(pair[0].0);
            let b = if pair.len() == 2 { abs_h(pair[1].0) } else { vec![0.0; len] };
            let mut z: Vec<Complex64> = a.iter().zip(&b).map(|(&u, &v)| Complex64::new(u, v)).collect();
            fft.forward(&mut z, &mut scratch);
            let (mut qa, mut qb) = (0.0, 0.0);
            for i in 0..len {
                let zm = z[mirror(i)].conj();
                let fa = (z[i] + zm) * 0.5;
                let fb = (z[i] - zm) * Complex64::new(0.0, -0.5);
                qa += fa.norm_sqr() * khat[i].re;
                qb += fb.norm_sqr() * khat[i].re;
            }
            let scale = h6 / len as f64;
            pair[0].1 * qa * scale + pair.get(1).map_or(0.0, |n| n.1 * qb * scale)
        })
        .collect();
    t * partial.iter().sum::<f64>()
}

/// `J_t(x) = int_0^t int int |H(r, z1)| |H(r, z2)| R(z1 - z2) dz dr` with
/// `H(r, z) = P_{r(t-r)/t}(z + r x / t) - P_r(z) - P_{t-r}(z + x)` and `R` the
/// calibrated covariance averaged over the cells of the quadrature lattice.
///
/// The error estimate is the change from half the resolution; above 10% of
/// the value the call is refused with a suggested resolution.
pub fn kernel_j_quadrature(t: f64, x: [f64; 3], kappa: f64, res: JResolution) -> Result<OracleResult> {
    check_kappa(kappa, 3)?;
    if !(t > 0.0 && t.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Domain(format!("need t > 0 and finite x, got t = {t}")));
    }
    if res.cells < 8 || !res.cells.is_multiple_of(4) || res.r_nodes < 4 || !res.r_nodes.is_multiple_of(2) {
        return Err(LabError::Contract("J resolution needs cells >= 8 divisible by 4 and even r_nodes >= 4".into()));
    }
    let table = ContinuumCovariance::calibrated(kappa)?.table();
    let fine = j_on_lattice(t, x, &table, res);
    let coarse = j_on_lattice(t, x, &table, res.halved());
    let err = (fine - coarse).abs();
    if err > 0.1 * fine.abs() {
        return Err(LabError::Refused(format!(
            "J resolution {res:?} self-error {:.3} exceeds 10%; try cells = {}, r_nodes = {}",
            err / fine.abs(),
            2 * res.cells,
            2 * res.r_nodes
        )));
    }
    let inputs =
        digest(&serde_json::json!({"t": t, "x": x, "kappa": kappa, "cells": res.cells, "r_nodes": res.r_nodes}));
    Ok(OracleResult {
        name: "kernel_j".into(),
        value: fine,
        error_estimate: err.max(f64::EPSILON * fine.abs()),
        inputs,
        warning: None,
    })
}
