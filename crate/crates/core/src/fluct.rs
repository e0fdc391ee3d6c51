//! Large-scale fluctuations: pairings of `Phi(u_eps)` and of the coupled
//! additive field with a test function, their comparison, Gaussianity
//! statistics and the height-function limit.
//!
//! All fields live on the macroscopic grid. With
//! `Y = eps^{1 - kappa/2} int (Phi(u_eps) - E Phi(u_eps)) g` and `U` the pairing
//! of the additive solution driven by the same noise, `Y ~ nu_Phi U` for small
//! eps.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::check_kappa;
use crate::error::{LabError, Result};
use crate::fft::FftScratch;
use crate::grid::{FieldFrame, GridSpec};
use crate::noise::{Lineage, NoiseField};
use crate::oracle::BumpSpec;
use crate::she::{effective_coupling, time_index, Driver, SheRun, TrackKind, TrackSpec};
use crate::stationary::TransformSpec;
use crate::stats::{correlation, loglog_fit, normality, ols, LineFit, NormalityStats};

/// Default macroscopic start of the height-function window.
pub const T0: f64 = 1.0;

/// Fewest replicas accepted by [`gaussianity_report`].
pub const MIN_GAUSSIAN_SAMPLES: usize = 300;

/// Tabulated `g_z^lambda(y) = lambda^-d g((y - z)/lambda)` with
/// `g(x) = prod (1 - (2 x_i / w)^2)^3` on `|x_i| < w/2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestFunction {
    pub grid: GridSpec,
    pub width: f64,
    pub center: [f64; 3],
    pub scale: f64,
    pub values: Vec<f64>,
    /// `dx^d sum g`.
    pub integral: f64,
}

impl TestFunction {
    /// The default bump of width `L/4`.
    pub fn bump(grid: GridSpec, center: [f64; 3], scale: f64) -> Result<Self> {
        Self::with_width(grid, grid.box_length / 4.0, center, scale)
    }

    pub fn with_width(grid: GridSpec, width: f64, center: [f64; 3], scale: f64) -> Result<Self> {
        if grid.dim != 3 {
            return Err(LabError::Contract("test functions are three-dimensional".into()));
        }
        if !(width > 0.0 && scale > 0.0) || width * scale >= grid.box_length {
            return Err(LabError::Domain(format!(
                "support {} must lie strictly inside the torus of side {}",
                width * scale,
                grid.box_length
            )));
        }
        let l = grid.box_length;
        let dx = grid.dx();
        let half = width * scale / 2.0;
        let values: Vec<f64> = (0..grid.len())
            .map(|i| {
                let c = grid.coords(i);
                let mut v = scale.powi(-3);
                for a in 0..3 {
                    // periodic displacement from the centre
                    let d = (c[a] as f64 * dx - center[a]).rem_euclid(l);
                    let d = if d > l / 2.0 { d - l } else { d };
                    let y = d / half;
                    v *= if y.abs() < 1.0 { (1.0 - y * y).powi(3) } else { 0.0 };
                }
                v
            })
            .collect();
        let integral = grid.cell_volume() * values.iter().sum::<f64>();
        Ok(Self { grid, width, center, scale, values, integral })
    }

    /// The same profile for the quadrature oracles.
    pub fn spec(&self) -> BumpSpec {
        BumpSpec { width: self.width * self.scale, amplitude: self.scale.powi(-3) }
    }

    /// Unnormalised DFT of the tabulated values.
    pub fn spectrum(&self, driver: &Driver) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = self.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        driver.noise().fft().forward(&mut v, &mut FftScratch::default());
        v
    }

    /// `dx^d sum f g`.
    pub fn pair(&self, field: &[f64]) -> f64 {
        self.grid.cell_volume() * field.iter().zip(&self.values).map(|(f, g)| f * g).sum::<f64>()
    }
}

/// One replica's pairings at one `(eps, t)`.
///
/// `x` is always `None`: the linear-SHE intermediate is not simulated, since
/// the comparison targets `Y` against `U` directly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairingRecord {
    pub epsilon: f64,
    pub t: f64,
    pub replica: u64,
    pub y: f64,
    pub x: Option<f64>,
    pub u: f64,
    /// Uncentred `<Phi(u_eps), g>`.
    pub u_phi_pairing: f64,
}

/// `eps^{1 - kappa/2} (<Phi(u), g> - mean_phi int g)` at time `t` of a run,
/// where `mean_phi` estimates `E Phi(u_eps)` from the other replicas.
pub fn pair_y(run: &SheRun, transform: &TransformSpec, g: &TestFunction, t: f64, mean_phi: f64) -> Result<f64> {
    let frame = snapshot(run, t)?;
    if frame.grid != g.grid {
        return Err(LabError::Contract("run and test function grids differ".into()));
    }
    let phi: Vec<f64> = frame.values.iter().map(|&u| transform.phi(u)).collect();
    Ok(run.epsilon.powf(1.0 - run.model.kappa / 2.0) * (g.pair(&phi) - mean_phi * g.integral))
}

fn snapshot(run: &SheRun, t: f64) -> Result<&FieldFrame> {
    let j = time_index(t, run.grid.dt)?;
    run.trajectory
        .iter()
        .find(|(s, _)| time_index(*s, run.grid.dt).ok() == Some(j))
        .map(|(_, f)| f)
        .ok_or_else(|| LabError::Contract(format!("no snapshot at t = {t}")))
}

/// `<V_t, g>` for `dV = (1/2) Lap V + beta xi^eps` from `V = 0` at the paired
/// run's start, driven by the paired run's noise slices.
pub fn pair_u(
    noise: Arc<NoiseField>,
    g: &TestFunction,
    t: f64,
    beta: f64,
    lineage: Lineage,
    paired: &SheRun,
) -> Result<f64> {
    if paired.lineage != lineage {
        return Err(LabError::Contract(format!(
            "lineage {lineage:?} differs from the paired run's {:?}",
            paired.lineage
        )));
    }
    let eps_index = noise
        .plans()
        .iter()
        .position(|p| p.epsilon == paired.epsilon)
        .ok_or_else(|| LabError::Contract(format!("no noise plan for eps = {}", paired.epsilon)))?;
    let grid = *noise.grid();
    let start = time_index(paired.start_time, grid.dt)?;
    let end = time_index(t, grid.dt)?;
    if end < start {
        return Err(LabError::Contract("pairing time precedes the run start".into()));
    }
    let driver = Driver::new(noise);
    let ghat = g.spectrum(&driver);
    let track = TrackSpec::additive(eps_index, beta, start, grid.len());
    let mut out = 0.0;
    driver.run(lineage, &[track], end, |j, view| {
        if j == end {
            out = view.pairing(0, &ghat).expect("active");
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FluctConfig {
    pub kappa: f64,
    pub beta: f64,
    /// Noise plans to simulate, usually decreasing eps.
    pub eps_indices: Vec<usize>,
    /// Macroscopic observation times; the runs start from ones at 0.
    pub times: Vec<f64>,
    pub transforms: Vec<TransformSpec>,
    pub replicas: u64,
    pub master_seed: u64,
}

/// Raw pairings of one replica at one `(eps, t)`, per transform.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FluctCell {
    pub phi_pair: Vec<f64>,
    /// Site average of `Phi(u)`.
    pub phi_mean: Vec<f64>,
    pub u_pair: f64,
}

/// One replica, indexed `[eps][time]` with times in step order.
pub type FluctReplica = Vec<Vec<FluctCell>>;

/// Per-replica pairings for every (eps, t, transform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctEnsemble {
    pub kappa: f64,
    pub beta: f64,
    pub epsilons: Vec<f64>,
    pub times: Vec<f64>,
    pub transforms: Vec<String>,
    pub integral: f64,
    /// Indexed `[replica][eps][time]`.
    raw: Vec<FluctReplica>,
}

/// Validated pairing ensemble, simulated one replica at a time.
pub struct FluctPlan {
    cfg: FluctConfig,
    driver: Driver,
    ghat: Vec<Complex64>,
    g: TestFunction,
    steps: Vec<i64>,
    epsilons: Vec<f64>,
    tracks: Vec<TrackSpec>,
}

impl FluctPlan {
    pub fn new(noise: Arc<NoiseField>, g: &TestFunction, cfg: &FluctConfig) -> Result<Self> {
        check_kappa(cfg.kappa, 3)?;
        let grid = *noise.grid();
        if g.grid != grid {
            return Err(LabError::Contract("test function grid differs from the noise grid".into()));
        }
        if cfg.eps_indices.is_empty() || cfg.times.is_empty() || cfg.transforms.is_empty() {
            return Err(LabError::Contract("need at least one eps, time and transform".into()));
        }
        let steps: Vec<i64> = cfg.times.iter().map(|&t| time_index(t, grid.dt)).collect::<Result<_>>()?;
        let epsilons: Vec<f64> = cfg.eps_indices.iter().map(|&i| noise.plan(i).epsilon).collect();
        let len = grid.len();
        let mut tracks = Vec::new();
        for (&ei, &eps) in cfg.eps_indices.iter().zip(&epsilons) {
            tracks.push(TrackSpec::multiplicative(ei, effective_coupling(cfg.beta, eps, cfg.kappa), 0, vec![1.0; len]));
            tracks.push(TrackSpec::additive(ei, cfg.beta, 0, len));
        }
        let driver = Driver::new(noise);
        let ghat = g.spectrum(&driver);
        Ok(Self { cfg: cfg.clone(), driver, ghat, g: g.clone(), steps, epsilons, tracks })
    }

    /// One multiplicative track from ones and one additive track from zero
    /// per eps, all on the lineage of replica `r`.
    pub fn replica(&self, r: u64) -> Result<FluctReplica> {
        let cfg = &self.cfg;
        let grid = *self.driver.grid();
        let len = grid.len();
        let end = *self.steps.iter().max().expect("non-empty");
        let mut out: FluctReplica = vec![Vec::new(); self.epsilons.len()];
        self.driver.run(Lineage { master_seed: cfg.master_seed, replica: r }, &self.tracks, end, |j, view| {
            if !self.steps.contains(&j) {
                return Ok(());
            }
            for (e, row) in out.iter_mut().enumerate() {
                let u = view.field(2 * e).expect("active");
                let mut phi_pair = Vec::new();
                let mut phi_mean = Vec::new();
                for tr in &cfg.transforms {
                    let phi: Vec<f64> = u.iter().map(|&v| tr.phi(v)).collect();
                    phi_pair.push(self.g.pair(&phi));
                    phi_mean.push(phi.iter().sum::<f64>() / len as f64);
                }
                row.push(FluctCell {
                    phi_pair,
                    phi_mean,
                    u_pair: view.pairing(2 * e + 1, &self.ghat).expect("active"),
                });
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Ensemble from replicas in replica order.
    pub fn assemble(&self, raw: Vec<FluctReplica>) -> FluctEnsemble {
        let cfg = &self.cfg;
        // the observer saw times in step order; store them in that order
        let mut order: Vec<usize> = (0..self.steps.len()).collect();
        order.sort_by_key(|&i| self.steps[i]);
        FluctEnsemble {
            kappa: cfg.kappa,
            beta: cfg.beta,
            epsilons: self.epsilons.clone(),
            times: order.iter().map(|&i| cfg.times[i]).collect(),
            transforms: cfg.transforms.iter().map(|t| t.label()).collect(),
            integral: self.g.integral,
            raw,
        }
    }
}

/// Runs, per replica, one multiplicative track from ones and one additive
/// track from zero for each eps, all on the replica's lineage.
pub fn simulate_pairings(noise: Arc<NoiseField>, g: &TestFunction, cfg: &FluctConfig) -> Result<FluctEnsemble> {
    let plan = FluctPlan::new(noise, g, cfg)?;
    let raw: Vec<FluctReplica> = (0..cfg.replicas).into_par_iter().map(|r| plan.replica(r)).collect::<Result<_>>()?;
    Ok(plan.assemble(raw))
}

impl FluctEnsemble {
    pub fn replicas(&self) -> usize {
        self.raw.len()
    }

    /// Records for one transform, with `E Phi` replaced by the leave-one-out
    /// mean of the site-averaged `Phi(u)`.
    pub fn records(&self, transform: usize) -> Vec<PairingRecord> {
        let n = self.raw.len();
        let mut out = Vec::new();
        for (e, &eps) in self.epsilons.iter().enumerate() {
            let scale = eps.powf(1.0 - self.kappa / 2.0);
            for (k, &t) in self.times.iter().enumerate() {
                let total: f64 = self.raw.iter().map(|r| r[e][k].phi_mean[transform]).sum();
                for (rep, r) in self.raw.iter().enumerate() {
                    let cell = &r[e][k];
                    let loo = if n > 1 {
                        let rest = total - cell.phi_mean[transform];
                        // exact when all replicas agree
                        if self.raw.iter().all(|o| o[e][k].phi_mean[transform] == cell.phi_mean[transform]) {
                            cell.phi_mean[transform]
                        } else {
                            rest / (n - 1) as f64
                        }
                    } else {
                        cell.phi_mean[transform]
                    };
                    out.push(PairingRecord {
                        epsilon: eps,
                        t,
                        replica: rep as u64,
                        y: scale * (cell.phi_pair[transform] - loo * self.integral),
                        x: None,
                        u: cell.u_pair,
                        u_phi_pairing: cell.phi_pair[transform],
                    });
                }
            }
        }
        out
    }
}

/// CSV rows `epsilon, t, replica, Y, U, transform`.
pub fn write_pairing_csv(ens: &FluctEnsemble, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epsilon", "t", "replica", "Y", "U", "transform"])?;
    for (ti, label) in ens.transforms.iter().enumerate() {
        for r in ens.records(ti) {
            out.write_record([
                r.epsilon.to_string(),
                r.t.to_string(),
                r.replica.to_string(),
                r.y.to_string(),
                r.u.to_string(),
                label.clone(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-eps comparison of `Y` with `nu U`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsComparison {
    pub epsilon: f64,
    pub rms_diff: f64,
    pub sd_u: f64,
    pub sd_y: f64,
    pub correlation: f64,
    /// OLS slope of `Y` on `U` across replicas.
    pub regression: LineFit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub nu_hat: f64,
    pub per_eps: Vec<EpsComparison>,
    /// Log-log slope of the RMS difference against eps (positive means decay).
    pub rate: LineFit,
    pub monotone: bool,
}

/// Compares `Y` with `nu_hat U` at each eps of a single-time record set.
pub fn compare_y_nu_u(records: &[PairingRecord], nu_hat: f64) -> Result<ConvergenceReport> {
    let mut eps: Vec<f64> = Vec::new();
    for r in records {
        if !eps.contains(&r.epsilon) {
            eps.push(r.epsilon);
        }
    }
    if eps.len() < 3 {
        return Err(LabError::Refused(format!("convergence report needs >= 3 eps values, got {}", eps.len())));
    }
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut per_eps = Vec::new();
    for &e in &eps {
        let sel: Vec<&PairingRecord> = records.iter().filter(|r| r.epsilon == e).collect();
        let y: Vec<f64> = sel.iter().map(|r| r.y).collect();
        let u: Vec<f64> = sel.iter().map(|r| r.u).collect();
        let n = y.len() as f64;
        let rms_diff = (y.iter().zip(&u).map(|(a, b)| (a - nu_hat * b).powi(2)).sum::<f64>() / n).sqrt();
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        per_eps.push(EpsComparison {
            epsilon: e,
            rms_diff,
            sd_u: sd(&u),
            sd_y: sd(&y),
            correlation: correlation(&u, &y),
            regression: ols(&u, &y)?,
        });
    }
    let rate = loglog_fit(&eps, &per_eps.iter().map(|c| c.rms_diff).collect::<Vec<_>>())?;
    let monotone = per_eps.windows(2).all(|w| w[1].rms_diff < w[0].rms_diff);
    Ok(ConvergenceReport { nu_hat, per_eps, rate, monotone })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub stats: NormalityStats,
    /// Skewness and excess kurtosis within 3 standard errors.
    pub moments_pass: bool,
    /// Anderson-Darling p-value above 1%.
    pub ad_pass: bool,
}

pub fn gaussianity_report(samples: &[f64]) -> Result<GaussianityReport> {
    if samples.len() < MIN_GAUSSIAN_SAMPLES {
        return Err(LabError::Refused(format!(
            "gaussianity report needs {MIN_GAUSSIAN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let stats = normality(samples)?;
    Ok(GaussianityReport { moments_pass: stats.moments_pass(3.0), ad_pass: stats.ad_p_value > 0.01, stats })
}

#[derive(Debug, Clone)]
pub struct KpzConfig {
    pub kappa: f64,
    pub beta: f64,
    pub eps_indices: Vec<usize>,
    pub t: f64,
    /// Initial height on the macroscopic grid.
    pub h0: Vec<f64>,
    pub replicas: u64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KpzEps {
    pub epsilon: f64,
    pub c_hat: f64,
    /// RMS over sites and replicas of `h - eps^{1-kappa/2} c_hat - (P_t h0 + U)`,
    /// relative to the RMS of `P_t h0`.
    pub rel_rms_diff: f64,
    /// RMS over replicas of `int (Z - 1) (P_t h0) g`, with `Z` a solution from ones.
    pub lln_remainder: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KpzReport {
    pub t: f64,
    pub per_eps: Vec<KpzEps>,
    pub monotone: bool,
    /// Log-log slope of the remainder against eps.
    pub lln_rate: Option<LineFit>,
}

/// Sufficient statistics of one replica at one eps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct KpzCell {
    /// Sum and sum of squares over sites of `h / a - V`, with `a = eps^{kappa/2-1}`.
    pub sum_d: f64,
    pub sum_d2: f64,
    /// Site average of `log Z` for the solution from ones.
    pub mean_log_z: f64,
    /// `int (Z - 1) (P_t h0) g`.
    pub remainder: f64,
}

/// Validated height-function comparison, simulated one replica at a time.
pub struct KpzPlan {
    cfg: KpzConfig,
    driver: Driver,
    end: i64,
    norm: f64,
    weight: Vec<f64>,
    tracks: Vec<TrackSpec>,
    scales: Vec<f64>,
    epsilons: Vec<f64>,
}

impl KpzPlan {
    pub fn new(noise: Arc<NoiseField>, g: &TestFunction, cfg: &KpzConfig) -> Result<Self> {
        check_kappa(cfg.kappa, 3)?;
        if cfg.t < T0 {
            return Err(LabError::Refused(format!("t = {} is below T0 = {T0}", cfg.t)));
        }
        let grid = *noise.grid();
        if cfg.h0.len() != grid.len() || cfg.h0.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Contract("h0 must be a finite field on the grid".into()));
        }
        if cfg.eps_indices.is_empty() {
            return Err(LabError::Contract("need at least one eps".into()));
        }
        let end = time_index(cfg.t, grid.dt)?;
        let len = grid.len();
        let driver = Driver::new(noise.clone());
        // P_t h0 through the same lattice flow as the additive track
        let mut heat_h0 = Vec::new();
        let flow = TrackSpec {
            kind: TrackKind::Additive,
            eps_index: cfg.eps_indices[0],
            coupling: 0.0,
            start_step: 0,
            init: cfg.h0.clone(),
        };
        driver.run(Lineage { master_seed: cfg.master_seed, replica: 0 }, &[flow], end, |j, view| {
            if j == end {
                heat_h0 = view.additive_field(0).expect("active");
            }
            Ok(())
        })?;
        let norm = (heat_h0.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let weight: Vec<f64> = heat_h0.iter().zip(&g.values).map(|(a, b)| a * b).collect();
        let mut tracks = Vec::new();
        let mut scales = Vec::new();
        let mut epsilons = Vec::new();
        for &ei in &cfg.eps_indices {
            let eps = noise.plan(ei).epsilon;
            let a = eps.powf(cfg.kappa / 2.0 - 1.0);
            let coupling = effective_coupling(cfg.beta, eps, cfg.kappa);
            tracks.push(TrackSpec::multiplicative(ei, coupling, 0, cfg.h0.iter().map(|h| (a * h).exp()).collect()));
            tracks.push(TrackSpec::multiplicative(ei, coupling, 0, vec![1.0; len]));
            tracks.push(TrackSpec {
                kind: TrackKind::Additive,
                eps_index: ei,
                coupling: cfg.beta,
                start_step: 0,
                init: cfg.h0.clone(),
            });
            scales.push(a);
            epsilons.push(eps);
        }
        Ok(Self { cfg: cfg.clone(), driver, end, norm, weight, tracks, scales, epsilons })
    }

    /// Per-eps statistics of replica `r` at time `t`.
    pub fn replica(&self, r: u64) -> Result<Vec<KpzCell>> {
        let grid = *self.driver.grid();
        let len = grid.len();
        let mut out = Vec::new();
        self.driver.run(
            Lineage { master_seed: self.cfg.master_seed, replica: r },
            &self.tracks,
            self.end,
            |j, view| {
                if j != self.end {
                    return Ok(());
                }
                for (e, &a) in self.scales.iter().enumerate() {
                    let u = view.field(3 * e).expect("active");
                    let z = view.field(3 * e + 1).expect("active");
                    let v = view.additive_field(3 * e + 2).expect("active");
                    let (mut sum_d, mut sum_d2) = (0.0, 0.0);
                    for (u, v) in u.iter().zip(&v) {
                        let d = u.ln() / a - v;
                        sum_d += d;
                        sum_d2 += d * d;
                    }
                    let mean_log_z = z.iter().map(|z| z.ln()).sum::<f64>() / len as f64;
                    let remainder =
                        grid.cell_volume() * z.iter().zip(&self.weight).map(|(z, w)| (z - 1.0) * w).sum::<f64>();
                    out.push(KpzCell { sum_d, sum_d2, mean_log_z, remainder });
                }
                Ok(())
            },
        )?;
        Ok(out)
    }

    /// Report from replicas in replica order.
    pub fn assemble(&self, rows: &[Vec<KpzCell>]) -> Result<KpzReport> {
        if rows.is_empty() {
            return Err(LabError::Refused("no replicas".into()));
        }
        let len = self.driver.grid().len() as f64;
        let n = rows.len() as f64;
        let mut per_eps = Vec::new();
        for (e, (&eps, &a)) in self.epsilons.iter().zip(&self.scales).enumerate() {
            let c_hat = rows.iter().map(|r| r[e].mean_log_z).sum::<f64>() / n;
            let shift = c_hat / a;
            let sq: f64 = rows.iter().map(|r| r[e].sum_d2 - 2.0 * shift * r[e].sum_d + len * shift * shift).sum();
            let rel_rms_diff = (sq.max(0.0) / (len * n)).sqrt() / self.norm;
            let lln_remainder = (rows.iter().map(|r| r[e].remainder.powi(2)).sum::<f64>() / n).sqrt();
            per_eps.push(KpzEps { epsilon: eps, c_hat, rel_rms_diff, lln_remainder });
        }
        let monotone = per_eps.windows(2).all(|w| w[1].rel_rms_diff < w[0].rel_rms_diff);
        let lln_rate = if per_eps.len() >= 2 && per_eps.iter().all(|p| p.lln_remainder > 0.0) {
            let e: Vec<f64> = per_eps.iter().map(|p| p.epsilon).collect();
            let r: Vec<f64> = per_eps.iter().map(|p| p.lln_remainder).collect();
            Some(loglog_fit(&e, &r)?)
        } else {
            None
        };
        Ok(KpzReport { t: self.cfg.t, per_eps, monotone, lln_rate })
    }
}

/// Height function `eps^{1-kappa/2} log u` from `u(0) = exp(eps^{kappa/2-1} h0)`
/// against the additive solution from `h0`, both on the same noise.
pub fn kpz_limit_check(noise: Arc<NoiseField>, g: &TestFunction, cfg: &KpzConfig) -> Result<KpzReport> {
    let plan = KpzPlan::new(noise, g, cfg)?;
    let rows: Vec<Vec<KpzCell>> = (0..cfg.replicas).into_par_iter().map(|r| plan.replica(r)).collect::<Result<_>>()?;
    plan.assemble(&rows)
}
