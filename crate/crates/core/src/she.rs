//! Multiplicative and additive stochastic heat equations on the lattice.
//!
//! One step of the multiplicative equation is
//! `u <- P_dt [ u * exp(c s - c^2 dt Rbar(0) / 2) ]`, where `s` is the noise
//! slice and `c` the coupling. The exponential has mean exactly one against
//! the slice law, so `E u` is preserved exactly and positivity is automatic.
//! The additive equation is stepped as `V <- P_dt [ V + c s ]`.
//!
//! A [`Driver`] advances many tracks on one noise lineage at once. Tracks may
//! start at different global steps, use different eps, and be multiplicative
//! or additive; they all see the same white noise, which is what makes
//! pathwise comparisons meaningful. Additive tracks live in Fourier space,
//! since they only ever need pairings with test functions.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fft::FftScratch;
use crate::grid::{FieldFrame, GridSpec, HeatSemigroup};
use crate::noise::{CovarianceModel, Lineage, NoiseField, NoiseSlice, SlicePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackKind {
    Multiplicative,
    Additive,
}

/// One field advanced by a [`Driver`].
#[derive(Debug, Clone)]
pub struct TrackSpec {
    pub kind: TrackKind,
    /// Index into the driver's noise plans.
    pub eps_index: usize,
    pub coupling: f64,
    /// Global step index at which `init` is the state.
    pub start_step: i64,
    pub init: Vec<f64>,
}

impl TrackSpec {
    pub fn multiplicative(eps_index: usize, coupling: f64, start_step: i64, init: Vec<f64>) -> Self {
        Self { kind: TrackKind::Multiplicative, eps_index, coupling, start_step, init }
    }

    pub fn additive(eps_index: usize, coupling: f64, start_step: i64, len: usize) -> Self {
        Self { kind: TrackKind::Additive, eps_index, coupling, start_step, init: vec![0.0; len] }
    }
}

#[derive(Debug, Clone)]
enum TrackState {
    Pending,
    Real(Vec<f64>),
    Spectral(Vec<Complex64>),
}

/// Read access to all tracks at one time index.
#[derive(Debug)]
pub struct TrackView<'a> {
    grid: &'a GridSpec,
    states: &'a [TrackState],
    fft: &'a crate::fft::FftNd,
}

impl TrackView<'_> {
    pub fn is_active(&self, track: usize) -> bool {
        !matches!(self.states[track], TrackState::Pending)
    }

    /// Real-space values of an active multiplicative track.
    pub fn field(&self, track: usize) -> Option<&[f64]> {
        match &self.states[track] {
            TrackState::Real(v) => Some(v),
            _ => None,
        }
    }

    /// `dx^d sum_x V(x) g(x)` for an additive track, given `ghat = FFT(g)`.
    pub fn pairing(&self, track: usize, ghat: &[Complex64]) -> Option<f64> {
        match &self.states[track] {
            TrackState::Spectral(v) => {
                let s: f64 = v.iter().zip(ghat).map(|(a, b)| (a * b.conj()).re).sum();
                Some(s * self.grid.cell_volume() / self.grid.len() as f64)
            }
            TrackState::Real(v) => {
                let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                self.fft.forward(&mut buf, &mut FftScratch::default());
                let s: f64 = buf.iter().zip(ghat).map(|(a, b)| (a * b.conj()).re).sum();
                Some(s * self.grid.cell_volume() / self.grid.len() as f64)
            }
            TrackState::Pending => None,
        }
    }

    /// Real-space values of an additive track (one inverse transform).
    pub fn additive_field(&self, track: usize) -> Option<Vec<f64>> {
        match &self.states[track] {
            TrackState::Spectral(v) => {
                let mut buf = v.clone();
                self.fft.inverse(&mut buf, &mut FftScratch::default());
                Some(buf.iter().map(|c| c.re).collect())
            }
            TrackState::Real(v) => Some(v.clone()),
            TrackState::Pending => None,
        }
    }
}

/// Advances coupled tracks on a shared noise lineage.
#[derive(Debug, Clone)]
pub struct Driver {
    noise: Arc<NoiseField>,
    semigroup: HeatSemigroup,
    step_multiplier: Vec<f64>,
    mirror: Vec<usize>,
}

impl Driver {
    pub fn new(noise: Arc<NoiseField>) -> Self {
        let grid = *noise.grid();
        let semigroup = HeatSemigroup::new(grid);
        let step_multiplier = semigroup.multiplier(grid.dt);
        let n = grid.n_per_side;
        let mirror = (0..grid.len())
            .map(|i| {
                let c = grid.coords(i);
                (0..grid.dim).fold(0, |acc, a| acc * n + (n - c[a]) % n)
            })
            .collect();
        Self { noise, semigroup, step_multiplier, mirror }
    }

    pub fn noise(&self) -> &Arc<NoiseField> {
        &self.noise
    }

    pub fn grid(&self) -> &GridSpec {
        self.noise.grid()
    }

    pub fn semigroup(&self) -> &HeatSemigroup {
        &self.semigroup
    }

    /// Runs every track up to global time index `end_step`, calling
    /// `observer(j, view)` at each time index `j` from the earliest start on.
    pub fn run(
        &self,
        lineage: Lineage,
        tracks: &[TrackSpec],
        end_step: i64,
        mut observer: impl FnMut(i64, &TrackView<'_>) -> Result<()>,
    ) -> Result<()> {
        let grid = *self.grid();
        let len = grid.len();
        for (i, t) in tracks.iter().enumerate() {
            if t.init.len() != len {
                return Err(LabError::Contract(format!("track {i}: init has {} values, grid has {len}", t.init.len())));
            }
            if t.eps_index >= self.noise.plans().len() {
                return Err(LabError::Contract(format!("track {i}: no noise plan {}", t.eps_index)));
            }
            if t.start_step > end_step {
                return Err(LabError::Contract(format!("track {i} starts after the end step")));
            }
        }
        let Some(first) = tracks.iter().map(|t| t.start_step).min() else {
            return Ok(());
        };
        let fft = self.noise.fft().clone();
        let mut states = vec![TrackState::Pending; tracks.len()];
        let mut scratch = FftScratch::default();
        let mut buf = Vec::new();
        let mut spectrum = Vec::new();
        let n_eps = self.noise.plans().len();
        let mut real_slices: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n_eps];
        let mut white_hat: Option<(Vec<Complex64>, Vec<Complex64>)> = None;
        let mut cached_pair = i64::MIN;
        let need_spectral = tracks.iter().any(|t| t.kind == TrackKind::Additive);

        let activate = |j: i64, states: &mut Vec<TrackState>, scratch: &mut FftScratch| {
            for (t, s) in tracks.iter().zip(states.iter_mut()) {
                if t.start_step == j {
                    *s = match t.kind {
                        TrackKind::Multiplicative => TrackState::Real(t.init.clone()),
                        TrackKind::Additive => {
                            let mut v: Vec<Complex64> = t.init.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                            fft.forward(&mut v, scratch);
                            TrackState::Spectral(v)
                        }
                    };
                }
            }
        };

        activate(first, &mut states, &mut scratch);
        observer(first, &TrackView { grid: &grid, states: &states, fft: &fft })?;
        let dt = grid.dt;
        for k in first..end_step {
            let pair = k.div_euclid(2);
            let odd = k.rem_euclid(2) == 1;
            if pair != cached_pair {
                self.noise.pair_spectrum(lineage, pair, &mut spectrum, &mut scratch);
                real_slices.iter_mut().for_each(|s| *s = None);
                white_hat = None;
                cached_pair = pair;
            }
            if need_spectral && white_hat.is_none() {
                white_hat = Some(self.split_pair(&spectrum));
            }
            // noise multiplication / injection
            let mut pending_heat: Vec<usize> = Vec::new();
            for (ti, t) in tracks.iter().enumerate() {
                match &mut states[ti] {
                    TrackState::Pending => {}
                    TrackState::Real(u) => {
                        let plan = self.noise.plan(t.eps_index);
                        if t.coupling != 0.0 {
                            if real_slices[t.eps_index].is_none() {
                                let (mut e, mut o) = (vec![0.0; len], vec![0.0; len]);
                                self.noise.pair_slices(t.eps_index, &spectrum, &mut e, &mut o, &mut buf, &mut scratch);
                                real_slices[t.eps_index] = Some((e, o));
                            }
                            let (e, o) = real_slices[t.eps_index].as_ref().unwrap();
                            let s = if odd { o } else { e };
                            let c = t.coupling;
                            let comp = 0.5 * c * c * dt * plan.r_zero();
                            for (x, &sv) in u.iter_mut().zip(s) {
                                *x *= (c * sv - comp).exp();
                            }
                            if let Some(detail) = breakdown(u) {
                                return Err(LabError::Diverged { step: k, detail: format!("track {ti}: {detail}") });
                            }
                        }
                        // constant fields are fixed by the heat flow
                        let first_v = u[0];
                        if u.iter().any(|&v| v != first_v) {
                            pending_heat.push(ti);
                        }
                    }
                    TrackState::Spectral(v) => {
                        let plan = self.noise.plan(t.eps_index);
                        if t.coupling != 0.0 {
                            let (he, ho) = white_hat.as_ref().unwrap();
                            let w = if odd { ho } else { he };
                            let c = t.coupling;
                            for ((x, &m), z) in v.iter_mut().zip(&plan.multiplier).zip(w) {
                                *x += z * (c * m);
                            }
                        }
                        for (x, &m) in v.iter_mut().zip(&self.step_multiplier) {
                            *x *= m;
                        }
                    }
                }
            }
            // heat flow, two real tracks per complex transform
            for chunk in pending_heat.chunks(2) {
                if chunk.len() == 2 {
                    let (lo, hi) = states.split_at_mut(chunk[1]);
                    let (TrackState::Real(a), TrackState::Real(b)) = (&mut lo[chunk[0]], &mut hi[0]) else {
                        unreachable!("pending heat tracks are real")
                    };
                    self.semigroup.apply_multiplier(a, Some(b), &self.step_multiplier, &mut buf, &mut scratch);
                } else if let TrackState::Real(a) = &mut states[chunk[0]] {
                    self.semigroup.apply_multiplier(a, None, &self.step_multiplier, &mut buf, &mut scratch);
                }
            }
            let j = k + 1;
            activate(j, &mut states, &mut scratch);
            observer(j, &TrackView { grid: &grid, states: &states, fft: &fft })?;
        }
        Ok(())
    }

    /// Separates `FFT(a + i b)` into `FFT(a)` and `FFT(b)` for real `a`, `b`.
    fn split_pair(&self, z: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let half = Complex64::new(0.5, 0.0);
        let mut a = Vec::with_capacity(z.len());
        let mut b = Vec::with_capacity(z.len());
        for (i, zi) in z.iter().enumerate() {
            let zm = z[self.mirror[i]].conj();
            a.push((zi + zm) * half);
            b.push((zi - zm) * Complex64::new(0.0, -0.5));
        }
        (a, b)
    }
}

/// Non-finite values, or a field that underflowed to nothing.
fn breakdown(u: &[f64]) -> Option<String> {
    if let Some(bad) = u.iter().position(|v| !v.is_finite()) {
        return Some(format!("non-finite value at site {bad}"));
    }
    if u.iter().all(|&v| v <= 0.0) {
        return Some("field collapsed to zero".into());
    }
    None
}

/// One step of the multiplicative equation for a single frame.
pub fn step(
    frame: &FieldFrame,
    slice: &NoiseSlice,
    coupling: f64,
    plan: &SlicePlan,
    semigroup: &HeatSemigroup,
) -> Result<FieldFrame> {
    if frame.grid != slice.frame.grid || frame.grid != *semigroup.grid() {
        return Err(LabError::Contract("frame, slice and semigroup grids differ".into()));
    }
    if slice.epsilon != plan.epsilon {
        return Err(LabError::Contract(format!("slice eps {} but plan eps {}", slice.epsilon, plan.epsilon)));
    }
    let dt = frame.grid.dt;
    let comp = 0.5 * coupling * coupling * dt * plan.r_zero();
    let mut values: Vec<f64> =
        frame.values.iter().zip(&slice.frame.values).map(|(u, s)| u * (coupling * s - comp).exp()).collect();
    if let Some(detail) = breakdown(&values) {
        return Err(LabError::Diverged { step: slice.step_index, detail });
    }
    let first = values[0];
    if values.iter().any(|&v| v != first) {
        let mult = semigroup.multiplier(dt);
        semigroup.apply_multiplier(&mut values, None, &mult, &mut Vec::new(), &mut FftScratch::default());
    }
    Ok(FieldFrame { grid: frame.grid, time: frame.time + dt, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitKind {
    Ones,
    Delta(usize),
    /// Initial height profile `h0`; the field starts at `exp(eps^{kappa/2-1} h0)`.
    ExpHeight(Vec<f64>),
    Field(Vec<f64>),
}

impl InitKind {
    pub fn materialize(&self, grid: &GridSpec, epsilon: f64, kappa: f64) -> Result<Vec<f64>> {
        let len = grid.len();
        match self {
            InitKind::Ones => Ok(vec![1.0; len]),
            InitKind::Delta(site) => {
                if *site >= len {
                    return Err(LabError::Contract(format!("delta site {site} outside grid")));
                }
                Ok(FieldFrame::delta(*grid, 0.0, *site).values)
            }
            InitKind::ExpHeight(h0) | InitKind::Field(h0) if h0.len() != len => {
                Err(LabError::Contract(format!("initial data has {} values, grid has {len}", h0.len())))
            }
            InitKind::ExpHeight(h0) => {
                let a = epsilon.powf(kappa / 2.0 - 1.0);
                Ok(h0.iter().map(|h| (a * h).exp()).collect())
            }
            InitKind::Field(v) => Ok(v.clone()),
        }
    }
}

/// Everything that determines a single-field run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Arc<CovarianceModel>,
    pub noise: Arc<NoiseField>,
    /// Which noise plan (eps) to use.
    pub eps_index: usize,
    pub beta: f64,
    pub start_time: f64,
    pub init: InitKind,
    pub lineage: Lineage,
    pub snapshot_times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SheRun {
    pub grid: GridSpec,
    pub model: Arc<CovarianceModel>,
    pub beta: f64,
    pub epsilon: f64,
    pub start_time: f64,
    pub init_kind: InitKind,
    pub lineage: Lineage,
    pub trajectory: Vec<(f64, FieldFrame)>,
}

/// Global step index of a time on the `dt` lattice.
pub fn time_index(t: f64, dt: f64) -> Result<i64> {
    let j = (t / dt).round();
    if (j * dt - t).abs() > 1e-9 * dt.max(t.abs()) {
        return Err(LabError::Contract(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(j as i64)
}

/// Effective coupling of the rescaled equation, `beta eps^{kappa/2 - 1}`.
pub fn effective_coupling(beta: f64, epsilon: f64, kappa: f64) -> f64 {
    beta * epsilon.powf(kappa / 2.0 - 1.0)
}

pub fn solve(cfg: &RunConfig) -> Result<SheRun> {
    let grid = cfg.model.grid;
    if *cfg.noise.grid() != grid {
        return Err(LabError::Contract("noise field grid differs from model grid".into()));
    }
    let plan = cfg.noise.plan(cfg.eps_index);
    let eps = plan.epsilon;
    let start = time_index(cfg.start_time, grid.dt)?;
    let mut snaps = Vec::new();
    for &t in &cfg.snapshot_times {
        let j = time_index(t, grid.dt)?;
        if j < start {
            return Err(LabError::Contract(format!("snapshot time {t} precedes start {}", cfg.start_time)));
        }
        snaps.push(j);
    }
    let end = snaps.iter().copied().max().unwrap_or(start);
    let init = cfg.init.materialize(&grid, eps, cfg.model.kappa)?;
    let track =
        TrackSpec::multiplicative(cfg.eps_index, effective_coupling(cfg.beta, eps, cfg.model.kappa), start, init);
    let driver = Driver::new(cfg.noise.clone());
    let mut trajectory = Vec::new();
    driver.run(cfg.lineage, std::slice::from_ref(&track), end, |j, view| {
        for _ in snaps.iter().filter(|&&s| s == j) {
            let t = j as f64 * grid.dt;
            let values = view.field(0).expect("single track is active").to_vec();
            trajectory.push((t, FieldFrame { grid, time: t, values }));
        }
        Ok(())
    })?;
    trajectory.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(SheRun {
        grid,
        model: cfg.model.clone(),
        beta: cfg.beta,
        epsilon: eps,
        start_time: cfg.start_time,
        init_kind: cfg.init.clone(),
        lineage: cfg.lineage,
        trajectory,
    })
}

/// Delta-initial run `w_{s,y}` on the given lineage.
#[allow(clippy::too_many_arguments)]
pub fn green_function(
    model: Arc<CovarianceModel>,
    noise: Arc<NoiseField>,
    eps_index: usize,
    beta: f64,
    s: f64,
    y: usize,
    t_list: &[f64],
    lineage: Lineage,
) -> Result<SheRun> {
    if t_list.iter().any(|&t| t < s) {
        return Err(LabError::Contract("green function times must be >= s".into()));
    }
    solve(&RunConfig {
        model,
        noise,
        eps_index,
        beta,
        start_time: s,
        init: InitKind::Delta(y),
        lineage,
        snapshot_times: t_list.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassSeries {
    pub source: (f64, usize),
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// `C_{s,y}(t) = dx^d sum_x w_{s,y}(t, x)` at every snapshot.
pub fn mass_process(run: &SheRun) -> Result<MassSeries> {
    let InitKind::Delta(y) = run.init_kind else {
        return Err(LabError::Contract("mass process needs a delta-initial run".into()));
    };
    Ok(MassSeries {
        source: (run.start_time, y),
        times: run.trajectory.iter().map(|(t, _)| *t).collect(),
        values: run.trajectory.iter().map(|(_, f)| f.mass()).collect(),
    })
}

/// `h = eps^{1-kappa/2} log u` for every snapshot.
pub fn cole_hopf_height(run: &SheRun) -> Result<Vec<FieldFrame>> {
    if matches!(run.init_kind, InitKind::Delta(_)) {
        return Err(LabError::Contract("Cole-Hopf needs a positive initial field".into()));
    }
    let scale = run.epsilon.powf(1.0 - run.model.kappa / 2.0);
    run.trajectory
        .iter()
        .map(|(t, f)| {
            if let Some(i) = f.values.iter().position(|&v| !(v > 0.0)) {
                return Err(LabError::Domain(format!("non-positive value at site {i}, t = {t}")));
            }
            Ok(FieldFrame { grid: f.grid, time: *t, values: f.values.iter().map(|v| scale * v.ln()).collect() })
        })
        .collect()
}

/// Per-site bookkeeping constant removed by the compensated update, in the
/// rescaled equation: `(t - s) beta^2 eps^{-kappa} Rbar(0) eps^{kappa-2} / 2`.
pub fn renormalisation_constant(run: &SheRun, plan: &SlicePlan, t: f64) -> f64 {
    let c = effective_coupling(run.beta, run.epsilon, run.model.kappa);
    0.5 * c * c * plan.r_zero() * (t - run.start_time)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeRecord {
    replica: u64,
    time: f64,
    probe_site: usize,
    value: f64,
}

/// NDJSON records `{replica, time, probe_site, value}` for every snapshot.
pub fn write_probe_ndjson(run: &SheRun, probes: &[usize], mut w: impl Write) -> Result<()> {
    for (t, f) in &run.trajectory {
        for &p in probes {
            let rec = ProbeRecord { replica: run.lineage.replica, time: *t, probe_site: p, value: f.values[p] };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

const FRAME_MAGIC: &[u8; 8] = b"KPZFRM01";

/// Raw frame blob: magic, `N` (u32), `d` (u32), time (f64), then the values.
pub fn write_frame(frame: &FieldFrame, mut w: impl Write) -> Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&(frame.grid.n_per_side as u32).to_le_bytes())?;
    w.write_all(&(frame.grid.dim as u32).to_le_bytes())?;
    w.write_all(&frame.time.to_le_bytes())?;
    for v in &frame.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_frame(grid: GridSpec, mut r: impl std::io::Read) -> Result<FieldFrame> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FRAME_MAGIC {
        return Err(LabError::Format("not a frame blob".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    if n != grid.n_per_side || d != grid.dim {
        return Err(LabError::Format(format!("frame is {n}^{d}, grid is {}^{}", grid.n_per_side, grid.dim)));
    }
    r.read_exact(&mut b8)?;
    let time = f64::from_le_bytes(b8);
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    FieldFrame::new(grid, time, values)
}
