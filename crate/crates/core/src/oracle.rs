//! Solver-free reference values.
//!
//! Nothing here touches the lattice integrator: the Feynman-Kac estimator
//! walks Brownian paths through an interpolated covariance, and the
//! deterministic targets are radial or Fourier quadratures of continuum
//! kernels. Agreement with the solver is therefore evidence, not identity.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::gamma;

use crate::continuum::{check_kappa, riesz_closed_form, ContinuumCovariance, RadialTable};
use crate::error::{LabError, Result};
use crate::fft::{FftNd, FftScratch};
use crate::noise::CovarianceModel;
use crate::quad::{geometric_points, Rule};
use crate::rng::{stream, tag};
use crate::stats::{loglog_fit, LineFit, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub value: f64,
    /// Standard error for Monte Carlo, resolution difference for quadrature.
    pub error_estimate: f64,
    /// SHA-256 of the canonical JSON of the inputs.
    pub inputs: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl OracleResult {
    fn new(name: &str, value: f64, error: f64, inputs: serde_json::Value) -> Self {
        // never report less than the rounding floor
        let floor = f64::EPSILON * value.abs().max(f64::MIN_POSITIVE);
        Self {
            name: name.to_string(),
            value,
            error_estimate: error.abs().max(floor),
            inputs: digest(&inputs),
            warning: None,
        }
    }

    pub fn relative_error(&self) -> f64 {
        self.error_estimate / self.value.abs()
    }
}

/// Digest of a JSON value; `serde_json` maps keep keys sorted.
pub fn digest(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Periodic trilinear interpolation of a lattice table.
#[derive(Debug, Clone)]
pub struct LatticeInterpolant {
    n: usize,
    h: f64,
    values: Vec<f64>,
}

impl LatticeInterpolant {
    pub fn new(model: &CovarianceModel) -> Result<Self> {
        if model.grid.dim != 3 {
            return Err(LabError::Contract("interpolant needs a three-dimensional table".into()));
        }
        Ok(Self { n: model.grid.n_per_side, h: model.grid.dx(), values: model.covariance_table.clone() })
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let n = self.n as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] / self.h).rem_euclid(n);
            let f = u.floor();
            base[a] = (f as usize) % self.n;
            frac[a] = u - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * self.n + (base[a] + bit) % self.n;
            }
            acc += w * self.values[idx];
        }
        acc
    }
}

/// Covariance seen by the Feynman-Kac paths.
#[derive(Debug, Clone)]
pub enum PathKernel {
    /// Lattice covariance of the synthesized noise, periodic.
    Lattice(LatticeInterpolant),
    /// Continuum covariance in free space.
    Continuum(RadialTable),
}

impl PathKernel {
    fn eval(&self, d: [f64; 3]) -> f64 {
        match self {
            PathKernel::Lattice(t) => t.eval(d),
            PathKernel::Continuum(t) => t.eval((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()),
        }
    }
}

/// Per-path exponents `dt sum_j R(B1_j - B2_j)`, `j = 1..n`, for a chunk of paths.
fn fk_exponents(kernel: &PathKernel, n_steps: usize, dt: f64, seed: u64, chunk: u64, count: usize) -> Vec<f64> {
    let mut rng = stream(seed, chunk, tag::FEYNMAN_KAC, 0);
    let sd = dt.sqrt();
    (0..count)
        .map(|_| {
            let mut b1 = [0.0; 3];
            let mut b2 = [0.0; 3];
            let mut s = 0.0;
            for _ in 0..n_steps {
                for a in 0..3 {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    b1[a] += sd * z1;
                    b2[a] += sd * z2;
                }
                s += kernel.eval([b1[0] - b2[0], b1[1] - b2[1], b1[2] - b2[2]]);
            }
            s * dt
        })
        .collect()
}

const FK_CHUNK: usize = 500;

/// Raw Feynman-Kac exponents for `paths` path pairs; deterministic in `seed`.
pub fn fk_path_exponents(kernel: &PathKernel, t: f64, dt: f64, paths: usize, seed: u64) -> Result<Vec<f64>> {
    if !(t > 0.0 && dt > 0.0) {
        return Err(LabError::Domain(format!("need t > 0 and dt > 0, got t = {t}, dt = {dt}")));
    }
    let n_steps = (t / dt).round() as usize;
    if ((n_steps as f64) * dt - t).abs() > 1e-9 * t {
        return Err(LabError::Contract(format!("t = {t} is not a multiple of dt = {dt}")));
    }
    let chunks: Vec<(u64, usize)> =
        (0..paths.div_ceil(FK_CHUNK)).map(|c| (c as u64, FK_CHUNK.min(paths - c * FK_CHUNK))).collect();
    let parts: Vec<Vec<f64>> = chunks.par_iter().map(|&(c, k)| fk_exponents(kernel, n_steps, dt, seed, c, k)).collect();
    Ok(parts.concat())
}

/// `E[u(t,0)^2] = E exp(beta^2 int_0^t R(B1 - B2))` by Monte Carlo.
pub fn fk_second_moment_with(
    kernel: &PathKernel,
    t: f64,
    dt: f64,
    beta: f64,
    paths: usize,
    seed: u64,
) -> Result<OracleResult> {
    if paths < 1000 {
        return Err(LabError::Refused(format!("Feynman-Kac oracle needs at least 1000 paths, got {paths}")));
    }
    let exps = fk_path_exponents(kernel, t, dt, paths, seed)?;
    let w: Vec<f64> = exps.iter().map(|s| (beta * beta * s).exp()).collect();
    let all = Moments::from_slice(&w);
    let first = Moments::from_slice(&w[..w.len() / 2]);
    let inputs = serde_json::json!({
        "t": t, "dt": dt, "beta": beta, "paths": paths, "seed": seed,
        "kernel": match kernel { PathKernel::Lattice(_) => "lattice", PathKernel::Continuum(_) => "continuum" },
    });
    let mut res = OracleResult::new("fk_second_moment", all.mean, all.se(), inputs);
    if first.variance() > 0.0 && all.variance() > 4.0 * first.variance() {
        res.warning = Some(format!(
            "weak-disorder violation suspected: sample variance {:.3e} vs {:.3e} on the first half",
            all.variance(),
            first.variance()
        ));
    }
    Ok(res)
}

/// Feynman-Kac second moment with the lattice covariance of `model` (eps = 1).
pub fn fk_second_moment(t: f64, beta: f64, model: &CovarianceModel, paths: usize, seed: u64) -> Result<OracleResult> {
    let kernel = PathKernel::Lattice(LatticeInterpolant::new(model)?);
    fk_second_moment_with(&kernel, t, model.grid.dt, beta, paths, seed)
}

/// Left-hand sides of the three covariance integral bounds, in free space.
#[derive(Debug, Clone)]
pub struct CovIntegrals {
    table: RadialTable,
    rule: Rule,
    fine: Rule,
}

impl CovIntegrals {
    pub fn new(kappa: f64) -> Result<Self> {
        let model = ContinuumCovariance::calibrated(kappa)?;
        Ok(Self { table: model.table(), rule: Rule::new(10), fine: Rule::new(20) })
    }

    pub fn covariance(&self) -> &RadialTable {
        &self.table
    }

    fn both(&self, f: impl Fn(&Rule) -> f64) -> (f64, f64) {
        let coarse = f(&self.rule);
        let fine = f(&self.fine);
        (fine, (fine - coarse).abs())
    }

    /// `int P_t(x - z) R(z) dz` at `|x| = rho`, with a resolution error.
    pub fn time_decay(&self, t: f64, rho: f64) -> (f64, f64) {
        let sd = t.sqrt();
        let norm = 4.0 * PI * (2.0 * PI * t).powf(-1.5);
        let f = |r: f64| {
            let shell = if rho * r < 1e-12 * t {
                (-(r * r) / (2.0 * t)).exp()
            } else {
                let q = 2.0 * rho * r / t;
                (-(r - rho) * (r - rho) / (2.0 * t)).exp() * -(-q).exp_m1() / q
            };
            norm * r * r * self.table.eval(r) * shell
        };
        let hi = rho + 14.0 * sd + 8.0;
        let mut pts = vec![0.0];
        pts.extend(geometric_points(0.25, hi, 1.5));
        for k in -6..=6 {
            let p = rho + k as f64 * sd;
            if p > 0.0 && p < hi {
                pts.push(p);
            }
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        self.both(|rule| rule.segments(&pts, 1, f))
    }

    /// `int_0^inf int P_r(z - x) R(z) dz dr = 2 int r^2 R(r) / max(r, rho) dr`.
    pub fn space(&self, rho: f64) -> (f64, f64) {
        let f = |r: f64| 2.0 * r * r * self.table.eval(r) / r.max(rho);
        let mut pts = vec![0.0];
        let far = 1e3 * rho.max(1.0);
        pts.extend(geometric_points(0.25, far, 1.5));
        if rho > 0.25 {
            pts.push(rho);
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        self.both(|rule| rule.segments(&pts, 1, f) + rule.tail(far, 3, f))
    }

    /// `int_0^t int int P_r(z1 - x) P_{t-r}(z2) R(z1 - z2)` by midpoint in `r` and
    /// aperiodic lattice convolution at spacing `h` on `m^3` points (zero-padded).
    pub fn cumulative_fft(&self, t: f64, x: [f64; 3], h: f64, m: usize, r_nodes: usize) -> Result<f64> {
        let p = 2 * m;
        let half = m as f64 * h / 2.0;
        let reach = x.iter().map(|v| v.abs()).fold(0.0, f64::max) + 5.0 * t.sqrt();
        if reach > half {
            return Err(LabError::Refused(format!("box half-width {half} below Gaussian reach {reach}")));
        }
        let fft = FftNd::new(p, 3);
        let mut scratch = FftScratch::default();
        let coord = |i: usize| {
            let c = if i < p / 2 { i as f64 } else { i as f64 - p as f64 };
            c * h
        };
        let len = p * p * p;
        let pos = |i: usize| [coord(i / (p * p)), coord((i / p) % p), coord(i % p)];
        let mut rhat: Vec<Complex64> = (0..len)
            .map(|i| {
                let z = pos(i);
                Complex64::new(self.table.eval((z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt()), 0.0)
            })
            .collect();
        fft.forward(&mut rhat, &mut scratch);
        let mirror = |i: usize| {
            let (a, b, c) = (i / (p * p), (i / p) % p, i % p);
            ((p - a) % p * p + (p - b) % p) * p + (p - c) % p
        };
        let gauss = |r: f64, shift: [f64; 3]| -> Vec<f64> {
            let mut v: Vec<f64> = (0..len)
                .map(|i| {
                    let z = pos(i);
                    let d2: f64 = (0..3).map(|a| (z[a] - shift[a]).powi(2)).sum();
                    (-d2 / (2.0 * r)).exp()
                })
                .collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|w| *w /= s);
            v
        };
        let mut acc = 0.0;
        for j in 0..r_nodes {
            let r = t * (j as f64 + 0.5) / r_nodes as f64;
            let a = gauss(r, x);
            let c = gauss(t - r, [0.0; 3]);
            let mut z: Vec<Complex64> = a.iter().zip(&c).map(|(&u, &v)| Complex64::new(u, v)).collect();
            fft.forward(&mut z, &mut scratch);
            let mut s = 0.0;
            for i in 0..len {
                let zm = z[mirror(i)].conj();
                let ah = (z[i] + zm) * 0.5;
                let ch = (z[i] - zm) * Complex64::new(0.0, -0.5);
                s += (ah.conj() * rhat[i] * ch).re;
            }
            acc += s / len as f64;
        }
        Ok(t * acc / r_nodes as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentCheck {
    pub name: String,
    pub target: f64,
    pub fit: LineFit,
    /// Largest relative quadrature error over the fitted points.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovIntegralReport {
    pub kappa: f64,
    /// Slope of the time-decay integral at `x = 0` against `1 + sqrt t`.
    pub time_decay: ExponentCheck,
    /// Slope of the space integral against `|x|`.
    pub space: ExponentCheck,
    /// `|F3 / (t F1) - 1|` at the identity check point.
    pub identity_rel_error: f64,
    /// `F3(t, x) / (t (1 + |x| + sqrt t)^{-kappa})` over the identity points.
    pub prefactor_ratios: Vec<f64>,
    pub results: Vec<OracleResult>,
}

/// Quadrature of the three covariance integrals and their exponent fits.
pub fn cov_integral_checks(kappa: f64, t_grid: &[f64], x_grid: &[f64]) -> Result<CovIntegralReport> {
    if t_grid.len() < 2 || x_grid.len() < 2 {
        return Err(LabError::Contract("exponent fits need at least two grid points".into()));
    }
    let ci = CovIntegrals::new(kappa)?;
    let mut results = Vec::new();
    let mut gate = |name: &str, v: (f64, f64), inputs: serde_json::Value| -> Result<f64> {
        let r = OracleResult::new(name, v.0, v.1, inputs);
        if r.relative_error() > 0.05 {
            return Err(LabError::Refused(format!(
                "{name}: quadrature self-error {:.2e} above 5%",
                r.relative_error()
            )));
        }
        results.push(r);
        Ok(v.0)
    };
    let mut tv = Vec::new();
    let mut t_err: f64 = 0.0;
    for &t in t_grid {
        let v = ci.time_decay(t, 0.0);
        t_err = t_err.max(v.1 / v.0);
        tv.push(gate("time_decay", v, serde_json::json!({"kappa": kappa, "t": t, "x": 0.0}))?);
    }
    let mut xv = Vec::new();
    let mut x_err: f64 = 0.0;
    for &x in x_grid {
        let v = ci.space(x);
        x_err = x_err.max(v.1 / v.0);
        xv.push(gate("space", v, serde_json::json!({"kappa": kappa, "x": x}))?);
    }
    let st: Vec<f64> = t_grid.iter().map(|t| 1.0 + t.sqrt()).collect();
    let time_decay =
        ExponentCheck { name: "time_decay".into(), target: -kappa, fit: loglog_fit(&st, &tv)?, max_rel_error: t_err };
    let space = ExponentCheck {
        name: "space".into(),
        target: 2.0 - kappa,
        fit: loglog_fit(x_grid, &xv)?,
        max_rel_error: x_err,
    };

    let mut prefactor_ratios = Vec::new();
    let mut identity_rel_error: f64 = 0.0;
    for (t, x) in [(2.0, [1.5f64, 0.0, 0.0]), (1.0, [0.0, 0.0, 0.0])] {
        let rho = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let f3 = ci.cumulative_fft(t, x, 0.375, 48, 12)?;
        let f3_fine = ci.cumulative_fft(t, x, 0.25, 72, 12)?;
        let f1 = ci.time_decay(t, rho).0;
        identity_rel_error = identity_rel_error.max((f3_fine / (t * f1) - 1.0).abs());
        prefactor_ratios.push(f3_fine / (t * (1.0 + rho + t.sqrt()).powf(-kappa)));
        gate(
            "cumulative",
            (f3_fine, (f3_fine - f3).abs()),
            serde_json::json!({"kappa": kappa, "t": t, "x": x.to_vec()}),
        )?;
    }
    Ok(CovIntegralReport { kappa, time_decay, space, identity_rel_error, prefactor_ratios, results })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RieszReport {
    pub result: OracleResult,
    /// Integral over `{|z| < |e - z|}`.
    pub near_half: f64,
    /// Integral over the complementary half space.
    pub far_half: f64,
    pub closed_form: f64,
}

fn riesz_halves(kappa: f64, degree: usize) -> (f64, f64) {
    let a = (3.0 + kappa) / 2.0;
    let b = 2.0 - a;
    let rule = Rule::new(degree);
    let c = 2.0 * PI / b;
    // endpoint singularities behave like x^b; u^m makes them u^(m(1+b)-1)
    let m = (3.0 / (1.0 + b)).ceil() as i32;
    // near half: full shells for r <= 1/2, capped shells beyond
    // differences of powers via exp_m1, exact down to tiny r
    let inner = |r: f64| c * r.powf(1.0 - a) * (1.0 - r).powf(b) * (2.0 * b * r.atanh()).exp_m1();
    let capped = |r: f64| c * r.powf(1.0 - a) * r.powf(b) * (b * (1.0 / r).ln_1p()).exp_m1();
    let mut pts = vec![0.5];
    pts.extend(geometric_points(1.0, 1e3, 2.0));
    let near = rule.singular_left(0.0, 0.5, m, inner) + rule.segments(&pts, 1, capped) + rule.tail(1e3, 4, capped);
    // far half, written in s = |1 - r| on either side of the singular point
    let below = |s: f64| {
        let r = 1.0 - s;
        c * r.powf(1.0 - a) * (r.powf(b) - s.powf(b))
    };
    let above = |s: f64| {
        let r = 1.0 + s;
        c * r.powf(1.0 - a) * (r.powf(b) - s.powf(b))
    };
    let mut far_pts = vec![1.0];
    far_pts.extend(geometric_points(2.0, 1e3, 2.0));
    let far = rule.singular_left(0.0, 0.5, m, below)
        + rule.singular_left(0.0, 1.0, m, above)
        + rule.segments(&far_pts, 1, above)
        + rule.tail(1e3, 4, above);
    (near, far)
}

/// `int |z|^-a |e - z|^-a dz`, `a = (3 + kappa)/2`, by shell quadrature on the two
/// half spaces split by the bisecting plane of `0` and `e`.
pub fn riesz_constant(kappa: f64, dim: usize, resolution: usize) -> Result<RieszReport> {
    if dim != 3 {
        return Err(LabError::Contract(format!("Riesz quadrature is three-dimensional, got d = {dim}")));
    }
    check_kappa(kappa, dim)?;
    if resolution < 4 {
        return Err(LabError::Refused(format!("resolution {resolution} too coarse; use at least 16")));
    }
    let (n1, f1) = riesz_halves(kappa, resolution);
    let (n2, f2) = riesz_halves(kappa, 2 * resolution);
    let value = n2 + f2;
    let err = (value - (n1 + f1)).abs();
    if err > 1e-2 * value {
        return Err(LabError::Refused(format!(
            "resolution {resolution} changes the value by {:.2e}; try {}",
            err / value,
            4 * resolution
        )));
    }
    let inputs = serde_json::json!({"kappa": kappa, "dim": dim, "resolution": resolution});
    Ok(RieszReport {
        result: OracleResult::new("riesz_constant", value, err, inputs),
        near_half: n2,
        far_half: f2,
        closed_form: riesz_closed_form(kappa, dim),
    })
}

/// Modified Bessel function `K_nu(z)` for `z > 0` from its cosh integral.
pub fn bessel_k(nu: f64, z: f64) -> f64 {
    assert!(z > 0.0, "bessel_k needs z > 0");
    let rule = Rule::new(16);
    // integrand is negligible once z cosh u exceeds ~ 700
    let top = (2.0 * 750.0 / z).ln().max(1.0) + 1.0;
    let pts: Vec<f64> = (0..=(4.0 * top).ceil() as usize).map(|i| i as f64 * top / (4.0 * top).ceil()).collect();
    rule.segments(&pts, 1, |u| (-z * u.cosh()).exp() * (nu * u).cosh())
}

/// Fourier transform of `|x|^-alpha` in three dimensions: coefficient of `|k|^{alpha-3}`.
pub fn power_law_ft(alpha: f64) -> f64 {
    PI.powf(1.5) * 2f64.powf(3.0 - alpha) * gamma((3.0 - alpha) / 2.0) / gamma(alpha / 2.0)
}

/// Fourier transform of `A (1 + |x|^2)^{-p}` in three dimensions at `|k| > 0`.
pub fn mollifier_ft(amplitude: f64, p: f64, k: f64) -> f64 {
    let nu = 1.5 - p;
    amplitude * (2.0 * PI).powf(1.5) * 2f64.powf(1.0 - p) / gamma(p) * k.powf(-nu) * bessel_k(nu.abs(), k)
}

/// Tensor bump `amp * prod (1 - (2 x_i / w)^2)^3` on `|x_i| < w/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub width: f64,
    pub amplitude: f64,
}

impl BumpSpec {
    /// One-dimensional factor of the Fourier transform (real, the bump is even).
    pub fn ft_1d(&self, k: f64) -> f64 {
        let hw = self.width / 2.0;
        let q = (k * hw).abs();
        // int_{-1}^{1} (1 - y^2)^3 cos(q y) dy
        let unit = if q < 2.0 {
            // the closed form cancels badly here; the rule is exact to rounding
            Rule::new(24).integrate(-1.0, 1.0, |y| (1.0 - y * y).powi(3) * (q * y).cos())
        } else {
            let (c, s) = (q.cos(), q.sin());
            96.0 * c / q.powi(4) - 576.0 * s / q.powi(5) - 1440.0 * c / q.powi(6) + 1440.0 * s / q.powi(7)
        };
        hw * unit
    }

    pub fn ft(&self, k: [f64; 3]) -> f64 {
        self.amplitude * self.ft_1d(k[0]) * self.ft_1d(k[1]) * self.ft_1d(k[2])
    }
}

/// Kernel of the additive-noise variance target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ItoKernel {
    /// `eps^{-kappa} R(./eps)` with mollifier amplitude `amplitude`.
    Mollified { epsilon: f64, kappa: f64, amplitude: f64 },
    /// `|x|^{-kappa}` with unit constant.
    PowerLaw { kappa: f64 },
}

impl ItoKernel {
    fn spectrum(&self, k: f64) -> f64 {
        match *self {
            ItoKernel::Mollified { epsilon, kappa, amplitude } => {
                let p = (3.0 + kappa) / 4.0;
                epsilon.powf(3.0 - kappa) * mollifier_ft(amplitude, p, epsilon * k).powi(2)
            }
            ItoKernel::PowerLaw { kappa } => power_law_ft(kappa) * k.powf(kappa - 3.0),
        }
    }

    /// Zero mode on the torus of side `l`: the square of the truncated mollifier mass.
    fn zero_mode(&self, l: f64) -> f64 {
        let radial: Box<dyn Fn(f64) -> f64> = match *self {
            ItoKernel::Mollified { epsilon, kappa, amplitude } => {
                let p = (3.0 + kappa) / 4.0;
                let s = epsilon.powf(-(3.0 + kappa) / 2.0);
                Box::new(move |r: f64| s * amplitude * (1.0 + (r / epsilon).powi(2)).powf(-p))
            }
            ItoKernel::PowerLaw { kappa } => {
                let amp = riesz_closed_form(kappa, 3).powf(-0.5);
                Box::new(move |r: f64| amp * r.powf(-(3.0 + kappa) / 2.0))
            }
        };
        cube_mass(l / 2.0, &radial).powi(2)
    }
}

/// `int over [-c, c]^3 of f(|x|) dx` in spherical coordinates (f may have an
/// integrable singularity at the origin).
pub(crate) fn cube_mass(c: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    let rule = Rule::new(24);
    let radial = |rmax: f64| {
        let pts: Vec<f64> = {
            let mut v = vec![0.0];
            v.extend(geometric_points(1e-3f64.min(rmax / 2.0), rmax, 2.0));
            v
        };
        rule.singular_left(0.0, pts[1], 4, |r| f(r) * r * r) + rule.segments(&pts[1..], 1, |r| f(r) * r * r)
    };
    // the octant splits into three congruent pieces by the largest coordinate;
    // integrate the piece where z is largest: polar angle from the z axis
    let ang = Rule::new(24);
    let piece = ang.composite(0.0, PI / 4.0, 4, |phi| {
        // theta from 0 to where x = z cos phi... boundary tan(theta) cos(phi) = 1
        let theta_max = (1.0 / phi.cos()).atan();
        ang.composite(0.0, theta_max, 4, |theta| {
            let rmax = c / theta.cos();
            theta.sin() * radial(rmax)
        })
    });
    // piece covers 1/6 of the octant with z largest, over phi in [0, pi/4]
    48.0 * piece
}

/// Variance of `<V_t, g>` for `dV = (1/2) Lap V dt + beta dW_K` from `V = 0` on
/// the torus of side `l`, with `g` a tensor bump and `K` the noise covariance.
pub fn ito_variance_target(
    bump: BumpSpec,
    t: f64,
    beta: f64,
    kernel: ItoKernel,
    l: f64,
    n_max: usize,
) -> Result<OracleResult> {
    if !(t > 0.0 && l > 0.0) {
        return Err(LabError::Domain("need t > 0 and a positive period".into()));
    }
    let inputs = serde_json::json!({"bump": bump, "t": t, "beta": beta, "kernel": kernel, "period": l, "n_max": n_max});
    if beta == 0.0 {
        return Ok(OracleResult::new("ito_variance_target", 0.0, 0.0, inputs));
    }
    let full = ito_sum(bump, t, kernel, l, n_max);
    let half = ito_sum(bump, t, kernel, l, n_max / 2);
    let value = beta * beta * full;
    let err = beta * beta * (full - half).abs();
    if err > 0.02 * value {
        return Err(LabError::Refused(format!(
            "truncation error {:.2e} above 2%; raise n_max beyond {n_max}",
            err / value
        )));
    }
    Ok(OracleResult::new("ito_variance_target", value, err, inputs))
}

fn ito_sum(bump: BumpSpec, t: f64, kernel: ItoKernel, l: f64, n_max: usize) -> f64 {
    let dk = 2.0 * PI / l;
    let g1: Vec<f64> = (0..=n_max).map(|n| bump.ft_1d(n as f64 * dk)).collect();
    let mut cache = std::collections::HashMap::<usize, f64>::new();
    let n = n_max as i64;
    let mut acc = 0.0;
    for a in -n..=n {
        for b in -n..=n {
            for c in -n..=n {
                let n2 = (a * a + b * b + c * c) as usize;
                let g = bump.amplitude
                    * g1[a.unsigned_abs() as usize]
                    * g1[b.unsigned_abs() as usize]
                    * g1[c.unsigned_abs() as usize];
                if n2 == 0 {
                    acc += g * g * t * kernel.zero_mode(l);
                    continue;
                }
                let w = *cache.entry(n2).or_insert_with(|| {
                    let k2 = n2 as f64 * dk * dk;
                    kernel.spectrum(k2.sqrt()) * -(-t * k2).exp_m1() / k2
                });
                acc += g * g * w;
            }
        }
    }
    acc / l.powi(3)
}

/// `J_{kappa,delta}(g)` for a non-negative tensor bump, in Fourier form
/// `(2 pi)^-3 int |g^(k)|^2 c_delta^2 |k|^{-2 delta} c_kappa |k|^{kappa-3} dk`.
pub fn j_functional(bump: BumpSpec, kappa: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < kappa / 2.0) {
        return Err(LabError::Domain(format!("delta = {delta} outside (0, kappa/2)")));
    }
    let c_delta = power_law_ft(3.0 - delta);
    let c_kappa = power_law_ft(kappa);
    let ang = Rule::new(20);
    // octant average of |g^(k w)|^2 over the unit sphere
    let sphere = |k: f64| {
        8.0 * ang.integrate(0.0, 1.0, |u| {
            let s = (1.0 - u * u).sqrt();
            ang.integrate(0.0, PI / 2.0, |phi| bump.ft([k * s * phi.cos(), k * s * phi.sin(), k * u]).powi(2))
        })
    };
    let expo = kappa - 1.0 - 2.0 * delta;
    let rule = Rule::new(20);
    let scale = 1.0 / bump.width;
    let f = |k: f64| k.powf(expo) * sphere(k);
    let pts = geometric_points(scale, 60.0 * scale, 1.5);
    let total = rule.singular_left(0.0, scale, 4, f) + rule.segments(&pts, 1, f) + rule.tail(60.0 * scale, 2, f);
    Ok(c_delta * c_delta * c_kappa * total / (2.0 * PI).powi(3))
}

/// First-chaos prediction for `u^{(-s)}(0, x) - u^{(-2s)}(0, x)` on the torus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstChaosDoubling {
    pub lookbacks: Vec<f64>,
    /// RMS of the first-order difference.
    pub total: Vec<OracleResult>,
    /// The same without the spatially constant mode, which never decays on a torus.
    pub without_zero_mode: Vec<f64>,
    pub total_fit: LineFit,
    pub nonzero_fit: LineFit,
}

/// To first order in the coupling `c`, the difference between starts `-s` and
/// `-2s` is the noise of `[-2s, -s)` carried to time 0 by the heat flow:
/// `Var = c^2 dt N^-d sum_{j = n+1}^{2n} sum_q exp(-j dt lambda_q) C^(q)` with
/// `n = s / dt`, `C^` the transform of the slice covariance per unit time and
/// `lambda_q` the five-point symbol.
pub fn doubling_first_chaos(model: &CovarianceModel, coupling: f64, lookbacks: &[f64]) -> Result<FirstChaosDoubling> {
    let g = model.grid;
    if g.dim != 3 || model.covariance_table.len() != g.len() {
        return Err(LabError::Contract("first-chaos oracle needs a three-dimensional model table".into()));
    }
    if lookbacks.len() < 2 || lookbacks.iter().any(|&s| !(s > 0.0)) {
        return Err(LabError::Contract("need >= 2 positive lookbacks".into()));
    }
    let n = g.n_per_side;
    let fft = FftNd::new(n, 3);
    let mut chat: Vec<Complex64> = model.covariance_table.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    fft.forward(&mut chat, &mut FftScratch::default());
    let dx = g.dx();
    let lam = |i: usize| {
        let q = 2.0 * PI * i as f64 / (n as f64 * dx);
        2.0 * (1.0 - (q * dx).cos()) / (dx * dx)
    };
    let per_axis: Vec<f64> = (0..n).map(lam).collect();
    let symbol: Vec<f64> =
        (0..g.len()).map(|i| per_axis[i / (n * n)] + per_axis[(i / n) % n] + per_axis[i % n]).collect();
    let scale = coupling * coupling * g.dt / g.len() as f64;
    let mut total = Vec::new();
    let mut nonzero = Vec::new();
    for &s in lookbacks {
        let steps = (s / g.dt).round() as i64;
        if ((steps as f64) * g.dt - s).abs() > 1e-9 * s.max(1.0) {
            return Err(LabError::Contract(format!("lookback {s} is not a multiple of dt")));
        }
        let mut var = 0.0;
        let mut zero = 0.0;
        for (q, (&l, c)) in symbol.iter().zip(&chat).enumerate() {
            // geometric sum of exp(-j dt l) over j in (n, 2n]
            let a = (-g.dt * l).exp();
            let sum = if q == 0 || a == 1.0 {
                steps as f64
            } else {
                a.powi(steps as i32 + 1) * (1.0 - a.powi(steps as i32)) / (1.0 - a)
            };
            let term = scale * sum * c.re;
            if q == 0 {
                zero = term;
            }
            var += term;
        }
        let inputs = serde_json::json!({"kappa": model.kappa, "amplitude": model.amplitude, "grid": [n, g.box_length, g.dt], "coupling": coupling, "s": s});
        total.push(OracleResult::new("doubling_first_chaos", var.sqrt(), 0.0, inputs));
        nonzero.push((var - zero).max(0.0).sqrt());
    }
    let total_fit = loglog_fit(lookbacks, &total.iter().map(|r| r.value).collect::<Vec<_>>())?;
    let nonzero_fit = loglog_fit(lookbacks, &nonzero)?;
    Ok(FirstChaosDoubling { lookbacks: lookbacks.to_vec(), total, without_zero_mode: nonzero, total_fit, nonzero_fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::noise::build_covariance;
    use approx::assert_relative_eq;

    #[test]
    fn riesz_matches_closed_form_and_halves_agree() {
        let r = riesz_constant(2.5, 3, 24).unwrap();
        assert_relative_eq!(r.result.value, r.closed_form, max_relative = 1e-3);
        assert_relative_eq!(r.near_half, r.far_half, max_relative = 2e-3);
        assert!(r.result.relative_error() < 1e-2);
        // value increases with kappa: the integrand's singularities sharpen toward d
        let v: Vec<f64> = [2.2, 2.5, 2.8].iter().map(|&k| riesz_constant(k, 3, 24).unwrap().result.value).collect();
        assert!(v[0] < v[1] && v[1] < v[2], "{v:?}");
        assert!(riesz_constant(3.2, 3, 24).is_err());
        assert!(matches!(riesz_constant(2.5, 3, 2), Err(LabError::Refused(_))));
    }

    #[test]
    fn riesz_is_bit_reproducible() {
        let a = riesz_constant(2.5, 3, 16).unwrap();
        let b = riesz_constant(2.5, 3, 16).unwrap();
        assert_eq!(a.result.value.to_bits(), b.result.value.to_bits());
        assert_eq!(a.result.inputs, b.result.inputs);
    }

    #[test]
    fn bessel_and_fourier_transforms() {
        // K_{1/2}(z) = sqrt(pi / 2z) e^{-z}
        for z in [0.05, 0.7, 3.0, 20.0] {
            assert_relative_eq!(bessel_k(0.5, z), (PI / (2.0 * z)).sqrt() * (-z).exp(), max_relative = 1e-10);
        }
        // radial transform 4 pi int r^2 phi(r) sin(kr)/(kr) dr, direct
        let (p, k) = (1.375, 1.3);
        let rule = Rule::new(30);
        let f = |r: f64| 4.0 * PI * r * r * (1.0 + r * r).powf(-p) * (k * r).sin() / (k * r);
        let mut pts = vec![0.0];
        pts.extend((1..=4000).map(|i| i as f64 * PI / k));
        // alternating tail: average two consecutive partial sums
        let s1 = rule.segments(&pts, 1, f);
        let s2 = s1 - rule.integrate(pts[pts.len() - 2], pts[pts.len() - 1], f);
        assert_relative_eq!(mollifier_ft(1.0, p, k), 0.5 * (s1 + s2), max_relative = 1e-4);
        // power-law transform constant: |x|^-2 in 3d has transform 2 pi^2 / |k|
        assert_relative_eq!(power_law_ft(2.0), 2.0 * PI * PI, max_relative = 1e-12);
    }

    #[test]
    fn bump_transform_matches_mass() {
        let b = BumpSpec { width: 4.0, amplitude: 1.0 };
        // int (1 - y^2)^3 over (-1, 1) is 32/35
        assert_relative_eq!(b.ft_1d(0.0), 2.0 * 32.0 / 35.0, max_relative = 1e-12);
        assert!(b.ft_1d(40.0).abs() < 1e-4);
        // closed form against direct quadrature on both sides of the switch
        let rule = Rule::new(40);
        for k in [0.9, 1.1, 3.7, 12.0] {
            let direct = rule.composite(-2.0, 2.0, 16, |x| (1.0 - (x / 2.0).powi(2)).powi(3) * (k * x).cos());
            assert_relative_eq!(b.ft_1d(k), direct, max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    #[test]
    fn cube_mass_of_constant() {
        assert_relative_eq!(cube_mass(1.5, &|_| 1.0), 27.0, max_relative = 1e-10);
    }

    #[test]
    fn fk_zero_coupling_and_monotonicity() {
        let g = GridSpec::new(3, 16, 8.0, 0.05).unwrap();
        let m = build_covariance(&g, 2.5, 0.1).unwrap();
        let r0 = fk_second_moment(1.0, 0.0, &m, 1000, 3).unwrap();
        assert_eq!(r0.value, 1.0);
        assert!(r0.error_estimate > 0.0);
        let a = fk_second_moment(1.0, 0.5, &m, 2000, 3).unwrap();
        let b = fk_second_moment(2.0, 0.5, &m, 2000, 3).unwrap();
        let c = fk_second_moment(2.0, 1.0, &m, 2000, 3).unwrap();
        assert!(1.0 < a.value && a.value < b.value && b.value < c.value);
        assert!(fk_second_moment(1.0, 0.5, &m, 10, 3).is_err());
        let again = fk_second_moment(1.0, 0.5, &m, 2000, 3).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn fk_small_beta_coefficient_matches_quadrature() {
        let ci = CovIntegrals::new(2.5).unwrap();
        let kernel = PathKernel::Continuum(ci.covariance().clone());
        let (t, dt) = (2.0, 0.05);
        let lo = fk_second_moment_with(&kernel, t, dt, 0.025, 20000, 9).unwrap();
        let hi = fk_second_moment_with(&kernel, t, dt, 0.05, 20000, 9).unwrap();
        // Richardson in beta^2 removes the beta^4 term
        let c_lo = (lo.value - 1.0) / 0.025f64.powi(2);
        let c_hi = (hi.value - 1.0) / 0.05f64.powi(2);
        let coeff = (4.0 * c_lo - c_hi) / 3.0;
        // E R(B1_s - B2_s) = time-decay integral at time 2s
        let n = (t / dt).round() as usize;
        let quad: f64 = (1..=n).map(|j| dt * ci.time_decay(2.0 * j as f64 * dt, 0.0).0).sum();
        assert_relative_eq!(coeff, quad, max_relative = 0.05);
    }

    #[test]
    fn lattice_interpolant_hits_nodes_and_wraps() {
        let g = GridSpec::new(3, 8, 4.0, 0.02).unwrap();
        let m = build_covariance(&g, 2.5, 0.1).unwrap();
        let li = LatticeInterpolant::new(&m).unwrap();
        let h = g.dx();
        let idx = g.index(&[1, 2, 3]);
        assert_relative_eq!(li.eval([h, 2.0 * h, 3.0 * h]), m.covariance_table[idx], max_relative = 1e-12);
        assert_relative_eq!(li.eval([h - 4.0, 2.0 * h, 3.0 * h]), m.covariance_table[idx], max_relative = 1e-12);
    }

    #[test]
    fn covariance_integral_identity_and_fits() {
        let rep = cov_integral_checks(2.5, &[4.0, 16.0, 64.0], &[4.0, 16.0, 64.0]).unwrap();
        assert!(rep.identity_rel_error < 1e-2, "{}", rep.identity_rel_error);
        assert!(rep.results.iter().all(|r| r.error_estimate > 0.0));
        // desk windows are pre-asymptotic: decay present but shallower than the bound
        assert!(rep.time_decay.fit.slope < -1.0 && rep.time_decay.fit.slope > -2.5);
        assert!(rep.space.fit.slope < -0.2 && rep.space.fit.slope > -0.5);
    }

    #[test]
    fn space_integral_small_x_bounded() {
        let ci = CovIntegrals::new(2.5).unwrap();
        let (a, _) = ci.space(0.0);
        let (b, _) = ci.space(0.5);
        assert!(a.is_finite() && b <= a);
    }

    #[test]
    fn ito_target_basics() {
        let bump = BumpSpec { width: 4.0, amplitude: 1.0 };
        let k = ItoKernel::Mollified { epsilon: 0.5, kappa: 2.5, amplitude: riesz_closed_form(2.5, 3).powf(-0.5) };
        assert_eq!(ito_variance_target(bump, 1.0, 0.0, k, 16.0, 16).unwrap().value, 0.0);
        let v1 = ito_variance_target(bump, 1.0, 0.1, k, 16.0, 24).unwrap();
        let v2 = ito_variance_target(bump, 1.0, 0.2, k, 16.0, 24).unwrap();
        assert_relative_eq!(v2.value, 4.0 * v1.value, max_relative = 1e-12);
        // eps targets approach the power-law target as eps decreases
        let lim = ito_variance_target(bump, 1.0, 0.1, ItoKernel::PowerLaw { kappa: 2.5 }, 16.0, 24).unwrap().value;
        let gaps: Vec<f64> = [1.0, 0.5, 0.25]
            .iter()
            .map(|&e| {
                let k =
                    ItoKernel::Mollified { epsilon: e, kappa: 2.5, amplitude: riesz_closed_form(2.5, 3).powf(-0.5) };
                (ito_variance_target(bump, 1.0, 0.1, k, 16.0, 24).unwrap().value / lim - 1.0).abs()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn j_functional_scaling() {
        let g = BumpSpec { width: 1.0, amplitude: 1.0 };
        let (kappa, delta) = (2.5, 0.5);
        let j = j_functional(g, kappa, delta).unwrap();
        for lam in [0.5, 0.25] {
            // g_lambda = lambda^-3 g(./lambda)
            let gl = BumpSpec { width: lam, amplitude: lam.powi(-3) };
            let jl = j_functional(gl, kappa, delta).unwrap();
            assert_relative_eq!(jl / j, lam.powf(2.0 * delta - kappa), max_relative = 0.02);
        }
        assert!(j_functional(g, kappa, 1.5).is_err());
    }
}
