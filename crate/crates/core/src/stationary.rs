//! Forward stationary field from long-lookback runs, the constants
//! `c = E log Z` and `nu = E[Z Phi'(Z)]`, and the distributional check of the
//! mass-process duality.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::noise::{Lineage, NoiseField};
use crate::she::{effective_coupling, time_index, Driver, TrackSpec};
use crate::stats::{jackknife_mean, ks_two_sample, mean_se, Moments};

/// Test range on which transform envelopes are checked.
pub const ENVELOPE_RANGE: (f64, f64) = (1e-6, 1e6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformName {
    Log,
    Identity,
    Power(f64),
    /// Tabulated `(z, Phi, Phi')` rows with increasing `z`, interpolated linearly in `log z`.
    Table(Vec<(f64, f64, f64)>),
}

/// A transform `Phi` with its derivative and a recorded growth envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: TransformName,
    /// `|Phi| + |Phi'| + |Phi''| <= m (z^-q + z^q)` on the test range.
    pub envelope_m: f64,
    pub envelope_q: f64,
}

impl TransformSpec {
    pub fn log() -> Self {
        // |log z| + 1/z + 1/z^2 <= 3 (z^-2 + z^2)
        Self { name: TransformName::Log, envelope_m: 3.0, envelope_q: 2.0 }
    }

    pub fn identity() -> Self {
        Self { name: TransformName::Identity, envelope_m: 2.0, envelope_q: 1.0 }
    }

    pub fn power(q: f64) -> Result<Self> {
        if !q.is_finite() || q == 0.0 {
            return Err(LabError::Config(format!("power transform needs a finite nonzero exponent, got {q}")));
        }
        let m = 1.0 + q.abs() + (q * (q - 1.0)).abs();
        Ok(Self { name: TransformName::Power(q), envelope_m: m, envelope_q: q.abs().max(2.0) })
    }

    pub fn table(rows: Vec<(f64, f64, f64)>, envelope_m: f64, envelope_q: f64) -> Result<Self> {
        if rows.len() < 2 || rows.windows(2).any(|w| !(w[0].0 > 0.0 && w[1].0 > w[0].0)) {
            return Err(LabError::Config("transform table needs >= 2 rows with increasing positive z".into()));
        }
        Ok(Self { name: TransformName::Table(rows), envelope_m, envelope_q })
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "log" => Ok(Self::log()),
            "identity" => Ok(Self::identity()),
            other => match other.strip_prefix("power(").and_then(|s| s.strip_suffix(')')) {
                Some(q) => {
                    Self::power(q.trim().parse().map_err(|_| LabError::Config(format!("bad exponent in {other}")))?)
                }
                None => Err(LabError::Config(format!("unknown transform {other:?}; use log, identity or power(q)"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match &self.name {
            TransformName::Log => "log".into(),
            TransformName::Identity => "identity".into(),
            TransformName::Power(q) => format!("power({q})"),
            TransformName::Table(_) => "table".into(),
        }
    }

    fn table_eval(rows: &[(f64, f64, f64)], z: f64) -> (f64, f64) {
        let lz = z.ln();
        let i = rows.partition_point(|r| r.0 <= z).clamp(1, rows.len() - 1);
        let (a, b) = (rows[i - 1], rows[i]);
        let w = (lz - a.0.ln()) / (b.0.ln() - a.0.ln());
        (a.1 + w * (b.1 - a.1), a.2 + w * (b.2 - a.2))
    }

    pub fn phi(&self, z: f64) -> f64 {
        match &self.name {
            TransformName::Log => z.ln(),
            TransformName::Identity => z,
            TransformName::Power(q) => z.powf(*q),
            TransformName::Table(rows) => Self::table_eval(rows, z).0,
        }
    }

    pub fn dphi(&self, z: f64) -> f64 {
        match &self.name {
            TransformName::Log => 1.0 / z,
            TransformName::Identity => 1.0,
            TransformName::Power(q) => q * z.powf(q - 1.0),
            TransformName::Table(rows) => Self::table_eval(rows, z).1,
        }
    }

    /// `z Phi'(z)`, simplified analytically where possible.
    pub fn z_dphi(&self, z: f64) -> f64 {
        match &self.name {
            TransformName::Log => 1.0,
            TransformName::Identity => z,
            TransformName::Power(q) => q * z.powf(*q),
            TransformName::Table(_) => z * self.dphi(z),
        }
    }

    fn d2phi(&self, z: f64) -> f64 {
        match &self.name {
            TransformName::Log => -1.0 / (z * z),
            TransformName::Identity => 0.0,
            TransformName::Power(q) => q * (q - 1.0) * z.powf(q - 2.0),
            TransformName::Table(_) => 0.0,
        }
    }

    /// Checks the envelope on a log grid over `[lo, hi]`.
    pub fn check_envelope(&self, lo: f64, hi: f64) -> Result<()> {
        let n = 400;
        for i in 0..=n {
            let z = lo * (hi / lo).powf(i as f64 / n as f64);
            let lhs = self.phi(z).abs() + self.dphi(z).abs() + self.d2phi(z).abs();
            let rhs = self.envelope_m * (z.powf(-self.envelope_q) + z.powf(self.envelope_q));
            if !(lhs <= rhs * (1.0 + 1e-12)) {
                return Err(LabError::Contract(format!(
                    "transform {} exceeds its growth envelope at z = {z:.3e}",
                    self.label()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryEstimate {
    pub lookback: f64,
    /// Probe values ordered by replica, then probe.
    pub samples: Vec<f64>,
    pub probes: Vec<usize>,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub c_hat: f64,
    pub c_se: f64,
}

impl StationaryEstimate {
    pub fn from_samples(lookback: f64, probes: Vec<usize>, samples: Vec<f64>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|&&z| !(z > 0.0)) {
            return Err(LabError::Contract(format!("non-positive stationary sample {bad}")));
        }
        let m = Moments::from_slice(&samples);
        let logs: Vec<f64> = samples.iter().map(|z| z.ln()).collect();
        let (c_hat, c_se) = mean_se(&logs);
        Ok(Self { lookback, samples, probes, mean: m.mean, mean_se: m.se(), variance: m.variance(), c_hat, c_se })
    }
}

/// Long-lookback ensemble configuration.
#[derive(Debug, Clone)]
pub struct ZConfig {
    /// Increasing lookbacks `t - s`, each a multiple of dt.
    pub lookbacks: Vec<f64>,
    pub probes: Vec<usize>,
    pub replicas: u64,
    /// Coupling applied to the chosen noise plan; see [`effective_coupling`].
    pub coupling: f64,
    pub eps_index: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZEnsemble {
    pub estimates: Vec<StationaryEstimate>,
    /// For each lookback `s` with `2s` also present: `(s, per-replica site mean of (u_s - u_2s)^2)`.
    pub doubling_sq_diff: Vec<(f64, Vec<f64>)>,
    /// The same with each difference field's spatial mean removed first.
    pub doubling_sq_diff_centred: Vec<(f64, Vec<f64>)>,
}

impl ZEnsemble {
    /// `(s, ||u_s - u_2s||_2, standard error)` from the site-averaged squared differences.
    pub fn doubling_norms(&self) -> Vec<(f64, f64, f64)> {
        norms(&self.doubling_sq_diff)
    }

    /// As [`Self::doubling_norms`] without the spatially constant mode.
    pub fn doubling_norms_centred(&self) -> Vec<(f64, f64, f64)> {
        norms(&self.doubling_sq_diff_centred)
    }
}

fn norms(rows: &[(f64, Vec<f64>)]) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .map(|(s, v)| {
            let (m, se) = mean_se(v);
            let norm = m.sqrt();
            (*s, norm, if norm > 0.0 { se / (2.0 * norm) } else { 0.0 })
        })
        .collect()
}

/// One replica of [`estimate_z`]: probe values per lookback and the
/// site-averaged squared doubling differences.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZReplica {
    pub probes: Vec<Vec<f64>>,
    pub sq_diff: Vec<f64>,
    pub sq_diff_centred: Vec<f64>,
}

/// Validated lookback ensemble, simulated one replica at a time.
pub struct ZPlan {
    driver: Driver,
    cfg: ZConfig,
    starts: Vec<i64>,
    pairs: Vec<(usize, usize)>,
}

impl ZPlan {
    pub fn new(noise: Arc<NoiseField>, cfg: &ZConfig) -> Result<Self> {
        if cfg.lookbacks.is_empty() || cfg.lookbacks.windows(2).any(|w| w[1] <= w[0]) || cfg.lookbacks[0] < 0.0 {
            return Err(LabError::Contract("lookbacks must be non-negative and increasing".into()));
        }
        let grid = *noise.grid();
        if let Some(&p) = cfg.probes.iter().find(|&&p| p >= grid.len()) {
            return Err(LabError::Contract(format!("probe {p} outside the grid")));
        }
        let starts = cfg.lookbacks.iter().map(|&l| time_index(l, grid.dt).map(|j| -j)).collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for (i, &l) in cfg.lookbacks.iter().enumerate() {
            if let Some(k) = cfg.lookbacks.iter().position(|&m| (m - 2.0 * l).abs() < 1e-9 * m.max(1.0)) {
                pairs.push((i, k));
            }
        }
        Ok(Self { driver: Driver::new(noise), cfg: cfg.clone(), starts, pairs })
    }

    /// Every lookback track on the lineage of replica `r`, read at time 0.
    pub fn replica(&self, r: u64) -> Result<ZReplica> {
        let (cfg, pairs) = (&self.cfg, &self.pairs);
        let len = self.driver.grid().len();
        let tracks: Vec<TrackSpec> = self
            .starts
            .iter()
            .map(|&s| TrackSpec::multiplicative(cfg.eps_index, cfg.coupling, s, vec![1.0; len]))
            .collect();
        let lineage = Lineage { master_seed: cfg.master_seed, replica: r };
        let mut out = ZReplica {
            probes: vec![Vec::new(); self.starts.len()],
            sq_diff: vec![0.0; pairs.len()],
            sq_diff_centred: vec![0.0; pairs.len()],
        };
        self.driver.run(lineage, &tracks, 0, |j, view| {
            if j == 0 {
                for (i, p) in out.probes.iter_mut().enumerate() {
                    let f = view.field(i).expect("all tracks active at 0");
                    *p = cfg.probes.iter().map(|&x| f[x]).collect();
                }
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    let (fa, fb) = (view.field(a).unwrap(), view.field(b).unwrap());
                    let sq = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / len as f64;
                    let mean = fa.iter().zip(fb).map(|(x, y)| x - y).sum::<f64>() / len as f64;
                    out.sq_diff[k] = sq;
                    out.sq_diff_centred[k] = sq - mean * mean;
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Ensemble from replicas in replica order.
    pub fn assemble(&self, rows: &[ZReplica]) -> Result<ZEnsemble> {
        let cfg = &self.cfg;
        let mut estimates = Vec::new();
        for (i, &l) in cfg.lookbacks.iter().enumerate() {
            let samples: Vec<f64> = rows.iter().flat_map(|r| r.probes[i].iter().copied()).collect();
            estimates.push(StationaryEstimate::from_samples(l, cfg.probes.clone(), samples)?);
        }
        let column = |f: &dyn Fn(&ZReplica, usize) -> f64| -> Vec<(f64, Vec<f64>)> {
            self.pairs
                .iter()
                .enumerate()
                .map(|(k, &(a, _))| (cfg.lookbacks[a], rows.iter().map(|r| f(r, k)).collect()))
                .collect()
        };
        Ok(ZEnsemble {
            estimates,
            doubling_sq_diff: column(&|r, k| r.sq_diff[k]),
            doubling_sq_diff_centred: column(&|r, k| r.sq_diff_centred[k]),
        })
    }
}

/// Runs `u^{(s)}` from ones at `s = -lookback` for every lookback on a shared
/// lineage per replica, and reads the probes at time 0.
pub fn estimate_z(noise: Arc<NoiseField>, cfg: &ZConfig) -> Result<ZEnsemble> {
    let plan = ZPlan::new(noise, cfg)?;
    let rows: Vec<ZReplica> = (0..cfg.replicas).into_par_iter().map(|r| plan.replica(r)).collect::<Result<_>>()?;
    plan.assemble(&rows)
}

/// `nu_hat = mean(Z Phi'(Z))` with a jackknife standard error.
pub fn estimate_nu(transform: &TransformSpec, est: &StationaryEstimate) -> Result<(f64, f64)> {
    if let Some(bad) = est.samples.iter().find(|&&z| !(z > 0.0)) {
        return Err(LabError::Contract(format!("non-positive sample {bad}")));
    }
    let (lo, hi) = est.samples.iter().fold((f64::MAX, f64::MIN), |(a, b), &z| (a.min(z), b.max(z)));
    transform.check_envelope(lo.max(ENVELOPE_RANGE.0), hi.min(ENVELOPE_RANGE.1).max(lo))?;
    let v: Vec<f64> = est.samples.iter().map(|&z| transform.z_dphi(z)).collect();
    Ok(jackknife_mean(&v))
}

/// CSV rows `lookback, probe, replica, sample, log_sample, z_phiprime`.
pub fn write_z_csv(ens: &ZEnsemble, transform: &TransformSpec, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lookback", "probe", "replica", "sample", "log_sample", "z_phiprime"])?;
    for est in &ens.estimates {
        let np = est.probes.len().max(1);
        for (i, &z) in est.samples.iter().enumerate() {
            out.write_record([
                est.lookback.to_string(),
                est.probes[i % np].to_string(),
                (i / np).to_string(),
                z.to_string(),
                z.ln().to_string(),
                transform.z_dphi(z).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub const MIN_DUALITY_SAMPLES: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityReport {
    pub lag: f64,
    pub mass_mean: f64,
    pub mass_se: f64,
    pub forward_mean: f64,
    pub forward_se: f64,
    pub mass_variance: f64,
    pub forward_variance: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

/// Compares mass-process samples with forward `Z_{lag}` samples in law.
pub fn backward_field_check(lag: f64, mass: &[f64], forward: &[f64]) -> Result<DualityReport> {
    let need = MIN_DUALITY_SAMPLES;
    if mass.len() < need || forward.len() < need {
        return Err(LabError::Refused(format!(
            "duality check needs {need} samples per side, got {} and {}",
            mass.len(),
            forward.len()
        )));
    }
    let (a, b) = (Moments::from_slice(mass), Moments::from_slice(forward));
    let ks = ks_two_sample(mass, forward)?;
    Ok(DualityReport {
        lag,
        mass_mean: a.mean,
        mass_se: a.se(),
        forward_mean: b.mean,
        forward_se: b.se(),
        mass_variance: a.variance(),
        forward_variance: b.variance(),
        ks_statistic: ks.statistic,
        ks_p_value: ks.p_value,
    })
}

/// Replica offset separating the forward lineages from the mass lineages.
const FORWARD_OFFSET: u64 = 1 << 40;

/// Simulates both sides of the duality: `C_{s,y}(s + lag)` from delta runs and
/// `u^{(-lag)}(0, y)` from ones, on disjoint lineages, then compares per lag.
#[allow(clippy::too_many_arguments)]
pub fn simulate_duality(
    noise: Arc<NoiseField>,
    kappa: f64,
    beta: f64,
    eps_index: usize,
    y: usize,
    lags: &[f64],
    replicas: u64,
    master_seed: u64,
) -> Result<Vec<DualityReport>> {
    let grid = *noise.grid();
    if y >= grid.len() {
        return Err(LabError::Contract(format!("site {y} outside the grid")));
    }
    let eps = noise.plan(eps_index).epsilon;
    let coupling = effective_coupling(beta, eps, kappa);
    let steps: Vec<i64> = lags.iter().map(|&l| time_index(l, grid.dt)).collect::<Result<_>>()?;
    let max = *steps.iter().max().ok_or_else(|| LabError::Contract("no lags".into()))?;
    let driver = Driver::new(noise);
    let len = grid.len();
    let vol = grid.cell_volume();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut delta = vec![0.0; len];
            delta[y] = 1.0 / vol;
            let mass_track = [TrackSpec::multiplicative(eps_index, coupling, 0, delta)];
            let mut masses = vec![0.0; steps.len()];
            driver.run(Lineage { master_seed, replica: r }, &mass_track, max, |j, v| {
                for (k, &s) in steps.iter().enumerate() {
                    if s == j {
                        masses[k] = v.field(0).unwrap().iter().sum::<f64>() * vol;
                    }
                }
                Ok(())
            })?;
            let fwd: Vec<TrackSpec> =
                steps.iter().map(|&s| TrackSpec::multiplicative(eps_index, coupling, -s, vec![1.0; len])).collect();
            let mut z = vec![0.0; steps.len()];
            driver.run(Lineage { master_seed, replica: FORWARD_OFFSET + r }, &fwd, 0, |j, v| {
                if j == 0 {
                    for (k, zk) in z.iter_mut().enumerate() {
                        *zk = v.field(k).unwrap()[y];
                    }
                }
                Ok(())
            })?;
            Ok((masses, z))
        })
        .collect::<Result<_>>()?;
    lags.iter()
        .enumerate()
        .map(|(k, &lag)| {
            let mass: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
            let fwd: Vec<f64> = rows.iter().map(|r| r.1[k]).collect();
            backward_field_check(lag, &mass, &fwd)
        })
        .collect()
}
