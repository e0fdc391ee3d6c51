//! Experiment orchestration: per-replica tasks on a worker pool, atomic
//! outputs, resumable replica rows and a checksummed manifest.
//!
//! Layout of an output directory:
//!
//! ```text
//! run.json             config and digest, written first
//! replicas/r000017.json  one row per finished replica
//! <outputs>            CSV, NDJSON and JSON products of the experiment
//! manifest.json        written last
//! ```
//!
//! A rerun into the same directory with the same config digest reuses every
//! finished replica row; a different digest is refused.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Kind};
use crate::error::{LabError, Result};
use crate::fluct::{
    compare_y_nu_u, gaussianity_report, write_pairing_csv, FluctConfig, FluctPlan, FluctReplica, KpzCell, KpzConfig,
    KpzPlan, TestFunction, MIN_GAUSSIAN_SAMPLES,
};
use crate::homog::{homog_report, write_rho_csv, HomogConfig, HomogPlan, HomogSample};
use crate::noise::{calibrate_amplitude, noise_check, CovarianceModel, Lineage, NoiseCheck, NoiseField};
use crate::oracle::{fk_second_moment, OracleResult};
use crate::she::{effective_coupling, green_function, solve, InitKind, RunConfig};
use crate::stationary::{estimate_nu, write_z_csv, ZConfig, ZPlan, ZReplica};
use crate::stats::{loglog_fit, Moments};

/// Fraction of failed replicas above which a run is an acceptance-relevant failure.
pub const MAX_FAILED_FRACTION: f64 = 0.05;

/// Probe lags of the noise check, in lattice steps.
pub const NOISE_LAGS: [[i64; 3]; 6] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1], [2, 0, 0], [4, 0, 0]];

/// Settings outside the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl RunOptions {
    /// Reads `THREADS`.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var("THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&t| t > 0)
                    .ok_or_else(|| LabError::Config(format!("THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        };
        Ok(Self { threads })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub replica: u64,
    pub master_seed: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replica: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub kind: Kind,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedEntry>,
    pub files: Vec<FileEntry>,
    pub failures: Vec<Failure>,
    /// Set when the products could not be assembled.
    pub finish_error: Option<String>,
}

impl RunManifest {
    /// True when every product was written and at least 95% of replicas succeeded.
    pub fn succeeded(&self) -> bool {
        let total = self.seeds.len().max(1) as f64;
        self.finish_error.is_none() && (self.failures.len() as f64) <= MAX_FAILED_FRACTION * total
    }

    pub fn exit_code(&self) -> i32 {
        if self.succeeded() {
            0
        } else {
            1
        }
    }

    pub fn file(&self, name: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == name)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| LabError::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Product files of one experiment, written atomically into the output directory.
struct Sink {
    dir: PathBuf,
    files: Vec<String>,
}

impl Sink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }
}

/// An experiment as independent tasks plus a reduction.
trait Pipeline: Sync {
    fn tasks(&self) -> u64;
    fn task(&self, r: u64) -> Result<Value>;
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()>;
}

fn rows_of<T: for<'de> Deserialize<'de>>(rows: &[(u64, Value)]) -> Result<Vec<T>> {
    rows.iter().map(|(_, v)| Ok(serde_json::from_value(v.clone())?)).collect()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| LabError::Format(e.to_string()))
}

struct Setup {
    cfg: ExperimentConfig,
    model: Arc<CovarianceModel>,
    noise: Arc<NoiseField>,
    probes: Vec<usize>,
}

struct NoisePipe(Setup);

impl Pipeline for NoisePipe {
    fn tasks(&self) -> u64 {
        1
    }
    fn task(&self, _: u64) -> Result<Value> {
        Ok(serde_json::to_value(noise_check(&self.0.noise, &NOISE_LAGS, self.0.cfg.slices, self.0.cfg.seed)?)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let check: NoiseCheck = serde_json::from_value(rows[0].1.clone())?;
        let kappa = self.0.cfg.kappa;
        let power = |d: f64| (d > 0.0).then(|| d.powf(-kappa));
        let csv = csv_bytes(
            &["epsilon", "lag_x", "lag_y", "lag_z", "distance", "empirical", "se", "target", "power_law"],
            check.lags.iter().map(|l| {
                vec![
                    l.epsilon.to_string(),
                    l.lag[0].to_string(),
                    l.lag[1].to_string(),
                    l.lag[2].to_string(),
                    l.distance.to_string(),
                    l.empirical.to_string(),
                    l.se.to_string(),
                    l.target.to_string(),
                    power(l.distance).map(|p| p.to_string()).unwrap_or_default(),
                ]
            }),
        )?;
        sink.put("noise_covariance.csv", &csv)?;
        sink.json("noise_check.json", &check)
    }
}

struct ShePipe(Setup);

impl Pipeline for ShePipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        let s = &self.0;
        let run = solve(&RunConfig {
            model: s.model.clone(),
            noise: s.noise.clone(),
            eps_index: 0,
            beta: s.cfg.beta,
            start_time: 0.0,
            init: InitKind::Ones,
            lineage: Lineage { master_seed: s.cfg.seed, replica: r },
            snapshot_times: s.cfg.times.clone(),
        })?;
        let values: Vec<Vec<f64>> =
            run.trajectory.iter().map(|(_, f)| s.probes.iter().map(|&p| f.values[p]).collect()).collect();
        Ok(serde_json::to_value(values)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let s = &self.0;
        let vals: Vec<Vec<Vec<f64>>> = rows_of(rows)?;
        let mut times = s.cfg.times.clone();
        times.sort_by(f64::total_cmp);
        let mut nd = String::new();
        for ((r, _), v) in rows.iter().zip(&vals) {
            for (ti, t) in times.iter().enumerate() {
                for (pi, p) in s.probes.iter().enumerate() {
                    nd.push_str(&json!({"replica": r, "time": t, "probe_site": p, "value": v[ti][pi]}).to_string());
                    nd.push('\n');
                }
            }
        }
        sink.put("snapshots.ndjson", nd.as_bytes())?;
        let mut summary = Vec::new();
        for (ti, t) in times.iter().enumerate() {
            for (pi, p) in s.probes.iter().enumerate() {
                let m = Moments::from_slice(&vals.iter().map(|v| v[ti][pi]).collect::<Vec<_>>());
                let m2 = Moments::from_slice(&vals.iter().map(|v| v[ti][pi].powi(2)).collect::<Vec<_>>());
                summary.push(json!({"time": t, "probe_site": p, "mean": m.mean, "mean_se": m.se(),
                    "second_moment": m2.mean, "second_moment_se": m2.se()}));
            }
        }
        sink.json("she_summary.json", &summary)
    }
}

struct GreenPipe(Setup);

impl Pipeline for GreenPipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        let s = &self.0;
        let lineage = Lineage { master_seed: s.cfg.seed, replica: r };
        let run =
            green_function(s.model.clone(), s.noise.clone(), 0, s.cfg.beta, 0.0, s.probes[0], &s.cfg.times, lineage)?;
        let mass: Vec<f64> = run.trajectory.iter().map(|(_, f)| f.mass()).collect();
        let probes: Vec<Vec<f64>> =
            run.trajectory.iter().map(|(_, f)| s.probes.iter().map(|&p| f.values[p]).collect()).collect();
        Ok(json!({"mass": mass, "probes": probes}))
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        #[derive(Deserialize)]
        struct Row {
            mass: Vec<f64>,
            probes: Vec<Vec<f64>>,
        }
        let s = &self.0;
        let data: Vec<Row> = rows_of(rows)?;
        let mut times = s.cfg.times.clone();
        times.sort_by(f64::total_cmp);
        let csv = csv_bytes(
            &["replica", "time", "mass"],
            rows.iter().zip(&data).flat_map(|((r, _), d)| {
                times.iter().zip(&d.mass).map(move |(t, m)| vec![r.to_string(), t.to_string(), m.to_string()])
            }),
        )?;
        sink.put("mass.csv", &csv)?;
        let summary: Vec<Value> = times
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let m = Moments::from_slice(&data.iter().map(|d| d.mass[ti]).collect::<Vec<_>>());
                let w: Vec<Value> = s
                    .probes
                    .iter()
                    .enumerate()
                    .map(|(pi, p)| {
                        let w = Moments::from_slice(&data.iter().map(|d| d.probes[ti][pi]).collect::<Vec<_>>());
                        json!({"probe_site": p, "mean": w.mean, "se": w.se()})
                    })
                    .collect();
                json!({"time": t, "mass_mean": m.mean, "mass_se": m.se(), "mass_variance": m.variance(), "w": w})
            })
            .collect();
        sink.json("green_summary.json", &json!({"source": s.probes[0], "times": summary}))
    }
}

struct StationaryPipe(Setup, ZPlan);

impl Pipeline for StationaryPipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        Ok(serde_json::to_value(self.1.replica(r)?)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let data: Vec<ZReplica> = rows_of(rows)?;
        let ens = self.1.assemble(&data)?;
        let transforms = self.0.cfg.transform_specs()?;
        let mut csv = Vec::new();
        write_z_csv(&ens, &transforms[0], &mut csv)?;
        sink.put("stationary.csv", &csv)?;
        let estimates: Vec<Value> = ens
            .estimates
            .iter()
            .map(|e| {
                let nu: Vec<Value> = transforms
                    .iter()
                    .map(|t| match estimate_nu(t, e) {
                        Ok((v, se)) => json!({"transform": t.label(), "nu_hat": v, "se": se}),
                        Err(err) => json!({"transform": t.label(), "error": err.to_string()}),
                    })
                    .collect();
                json!({"lookback": e.lookback, "mean": e.mean, "mean_se": e.mean_se, "variance": e.variance,
                    "c_hat": e.c_hat, "c_se": e.c_se, "nu": nu})
            })
            .collect();
        let fit = |rows: &[(f64, f64, f64)]| {
            let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.1 > 0.0).map(|r| (r.0, r.1)).unzip();
            if x.len() >= 2 {
                loglog_fit(&x, &y).ok()
            } else {
                None
            }
        };
        let (full, centred) = (ens.doubling_norms(), ens.doubling_norms_centred());
        sink.json(
            "stationary_report.json",
            &json!({
                "kappa": self.0.cfg.kappa,
                "target_slope": (2.0 - self.0.cfg.kappa) / 4.0,
                "estimates": estimates,
                "doubling": full.iter().map(|r| json!({"lookback": r.0, "norm": r.1, "se": r.2})).collect::<Vec<_>>(),
                "doubling_fit": fit(&full),
                "doubling_centred": centred.iter().map(|r| json!({"lookback": r.0, "norm": r.1, "se": r.2})).collect::<Vec<_>>(),
                "doubling_centred_fit": fit(&centred),
            }),
        )
    }
}

struct HomogPipe(Setup, HomogPlan);

impl Pipeline for HomogPipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        Ok(serde_json::to_value(self.1.replica(r)?)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let data: Vec<Vec<HomogSample>> = rows_of(rows)?;
        let ens = self.1.assemble(data);
        let mut csv = Vec::new();
        write_rho_csv(&ens, &mut csv)?;
        sink.put("rho.csv", &csv)?;
        let report = homog_report(&ens)?;
        sink.json("homog_report.json", &json!({"report": report, "skipped": ens.skipped}))
    }
}

struct FluctPipe(Setup, FluctPlan);

impl Pipeline for FluctPipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        Ok(serde_json::to_value(self.1.replica(r)?)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let data: Vec<FluctReplica> = rows_of(rows)?;
        let ens = self.1.assemble(data);
        let mut csv = Vec::new();
        write_pairing_csv(&ens, &mut csv)?;
        sink.put("pairings.csv", &csv)?;
        let t_last = *ens.times.last().expect("times");
        let eps_min = ens.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut per = Vec::new();
        for (ti, label) in ens.transforms.iter().enumerate() {
            let recs: Vec<_> = ens.records(ti).into_iter().filter(|r| r.t == t_last).collect();
            let conv = compare_y_nu_u(&recs, 1.0).map_err(|e| e.to_string());
            let at_min = |f: fn(&crate::fluct::PairingRecord) -> f64| -> Vec<f64> {
                recs.iter().filter(|r| r.epsilon == eps_min).map(f).collect()
            };
            let gauss = |v: Vec<f64>| match v.len() >= MIN_GAUSSIAN_SAMPLES {
                true => gaussianity_report(&v).map_err(|e| e.to_string()),
                false => Err(format!("needs {MIN_GAUSSIAN_SAMPLES} replicas, have {}", v.len())),
            };
            per.push(json!({
                "transform": label,
                "t": t_last,
                "convergence": conv.as_ref().ok(),
                "convergence_error": conv.as_ref().err(),
                "gaussianity_y": gauss(at_min(|r| r.y)).ok(),
                "gaussianity_u": gauss(at_min(|r| r.u)).ok(),
            }));
        }
        sink.json("fluct_report.json", &json!({"epsilon_min": eps_min, "transforms": per}))
    }
}

struct KpzPipe(Setup, KpzPlan);

impl Pipeline for KpzPipe {
    fn tasks(&self) -> u64 {
        self.0.cfg.replicas
    }
    fn task(&self, r: u64) -> Result<Value> {
        Ok(serde_json::to_value(self.1.replica(r)?)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let data: Vec<Vec<KpzCell>> = rows_of(rows)?;
        let eps = &self.0.cfg.epsilons;
        let csv = csv_bytes(
            &["epsilon", "replica", "mean_log_z", "remainder", "sum_d", "sum_d2"],
            rows.iter().zip(&data).flat_map(|((r, _), cells)| {
                eps.iter().zip(cells).map(move |(e, c)| {
                    vec![
                        e.to_string(),
                        r.to_string(),
                        c.mean_log_z.to_string(),
                        c.remainder.to_string(),
                        c.sum_d.to_string(),
                        c.sum_d2.to_string(),
                    ]
                })
            }),
        )?;
        sink.put("kpz.csv", &csv)?;
        sink.json("kpz_report.json", &self.1.assemble(&data)?)
    }
}

struct OraclePipe(Setup);

impl Pipeline for OraclePipe {
    fn tasks(&self) -> u64 {
        1
    }
    fn task(&self, _: u64) -> Result<Value> {
        let s = &self.0;
        let res: Vec<OracleResult> = s
            .cfg
            .times
            .iter()
            .map(|&t| fk_second_moment(t, s.cfg.beta, &s.model, s.cfg.paths, s.cfg.seed))
            .collect::<Result<_>>()?;
        Ok(serde_json::to_value(res)?)
    }
    fn finish(&self, rows: &[(u64, Value)], sink: &mut Sink) -> Result<()> {
        let res: Vec<OracleResult> = serde_json::from_value(rows[0].1.clone())?;
        for (t, r) in self.0.cfg.times.iter().zip(&res) {
            sink.json(&format!("fk_second_moment_t{t}.json"), r)?;
        }
        Ok(())
    }
}

fn pipeline(cfg: &ExperimentConfig) -> Result<Box<dyn Pipeline>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let model = Arc::new(calibrate_amplitude(&grid, cfg.kappa)?);
    let noise = Arc::new(NoiseField::new(&model, &cfg.epsilons)?);
    let probes = cfg.probe_sites()?;
    let setup = Setup { cfg: cfg.clone(), model, noise: noise.clone(), probes: probes.clone() };
    let eps0 = cfg.epsilons[0];
    Ok(match cfg.kind {
        Kind::NoiseCheck => Box::new(NoisePipe(setup)),
        Kind::She => Box::new(ShePipe(setup)),
        Kind::Green => Box::new(GreenPipe(setup)),
        Kind::Stationary => {
            let z = ZConfig {
                lookbacks: cfg.lookbacks.clone(),
                probes,
                replicas: cfg.replicas,
                coupling: effective_coupling(cfg.beta, eps0, cfg.kappa),
                eps_index: 0,
                master_seed: cfg.seed,
            };
            let plan = ZPlan::new(noise, &z)?;
            Box::new(StationaryPipe(setup, plan))
        }
        Kind::Homog => {
            let h = HomogConfig {
                lags: cfg.lags.clone(),
                offsets: cfg.offsets.clone(),
                sources: probes,
                replicas: cfg.replicas,
                beta: cfg.beta,
                kappa: cfg.kappa,
                eps_index: 0,
                proxy_factor: cfg.proxy_factor,
                master_seed: cfg.seed,
            };
            let plan = HomogPlan::new(noise, &h)?;
            Box::new(HomogPipe(setup, plan))
        }
        Kind::Fluct => {
            let g = default_test_function(cfg)?;
            let f = FluctConfig {
                kappa: cfg.kappa,
                beta: cfg.beta,
                eps_indices: (0..cfg.epsilons.len()).collect(),
                times: cfg.times.clone(),
                transforms: cfg.transform_specs()?,
                replicas: cfg.replicas,
                master_seed: cfg.seed,
            };
            let plan = FluctPlan::new(noise, &g, &f)?;
            Box::new(FluctPipe(setup, plan))
        }
        Kind::Kpz => {
            let g = default_test_function(cfg)?;
            let h0 = (0..grid.len())
                .map(|i| {
                    let x = grid.coords(i)[0] as f64 * grid.dx();
                    cfg.h0_amplitude * (2.0 * std::f64::consts::PI * x / grid.box_length).cos()
                })
                .collect();
            let k = KpzConfig {
                kappa: cfg.kappa,
                beta: cfg.beta,
                eps_indices: (0..cfg.epsilons.len()).collect(),
                t: cfg.times.iter().cloned().fold(0.0, f64::max),
                h0,
                replicas: cfg.replicas,
                master_seed: cfg.seed,
            };
            let plan = KpzPlan::new(noise, &g, &k)?;
            Box::new(KpzPipe(setup, plan))
        }
        Kind::Oracle => Box::new(OraclePipe(setup)),
    })
}

/// Bump of width `L/4` centred in the box.
pub fn default_test_function(cfg: &ExperimentConfig) -> Result<TestFunction> {
    TestFunction::bump(cfg.grid()?, [cfg.l / 2.0; 3], 1.0)
}

fn row_path(dir: &Path, r: u64) -> PathBuf {
    dir.join("replicas").join(format!("r{r:06}.json"))
}

/// Runs an experiment into `cfg.output_dir` and returns its manifest.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join("replicas"))?;
    let digest = cfg.digest();
    let marker = dir.join("run.json");
    if marker.exists() {
        let old: Value = serde_json::from_slice(&fs::read(&marker)?)?;
        if old["config_digest"] != json!(digest) {
            return Err(LabError::Config(format!(
                "{} holds a run with config digest {}, this config has {digest}",
                dir.display(),
                old["config_digest"]
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(&json!({"config_digest": digest, "config": cfg}))?;
        write_atomic(&marker, text.as_bytes())?;
    }
    let work = || -> Result<RunManifest> {
        let pipe = pipeline(cfg)?;
        let pending: Vec<u64> = (0..pipe.tasks()).filter(|&r| !row_path(&dir, r).exists()).collect();
        let failures: Vec<Failure> = pending
            .par_iter()
            .filter_map(|&r| {
                let out =
                    pipe.task(r).and_then(|v| write_atomic(&row_path(&dir, r), serde_json::to_string(&v)?.as_bytes()));
                out.err().map(|e| Failure { replica: r, error: e.to_string() })
            })
            .collect();
        let mut rows = Vec::new();
        for r in 0..pipe.tasks() {
            if failures.iter().all(|f| f.replica != r) {
                rows.push((r, serde_json::from_slice::<Value>(&fs::read(row_path(&dir, r))?)?));
            }
        }
        let mut sink = Sink { dir: dir.clone(), files: Vec::new() };
        let finish_error = if rows.is_empty() {
            Some("no replica succeeded".to_string())
        } else {
            pipe.finish(&rows, &mut sink).err().map(|e| e.to_string())
        };
        let files = sink
            .files
            .iter()
            .map(|name| {
                let p = dir.join(name);
                Ok(FileEntry { path: name.clone(), sha256: sha256_file(&p)?, bytes: fs::metadata(&p)?.len() })
            })
            .collect::<Result<_>>()?;
        let seeds = (0..pipe.tasks())
            .map(|r| SeedEntry { replica: r, master_seed: cfg.seed, ok: failures.iter().all(|f| f.replica != r) })
            .collect();
        Ok(RunManifest {
            config_digest: digest.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: cfg.kind,
            config: cfg.clone(),
            seeds,
            files,
            failures,
            finish_error,
        })
    };
    let manifest = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Files whose checksum no longer matches, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Recomputes every checksum listed in a manifest.
pub fn verify(manifest_path: &Path) -> Result<VerifyReport> {
    let m = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut rep = VerifyReport { checked: 0, mismatched: Vec::new(), missing: Vec::new() };
    for f in &m.files {
        let p = dir.join(&f.path);
        if !p.exists() {
            rep.missing.push(f.path.clone());
            continue;
        }
        rep.checked += 1;
        if sha256_file(&p)? != f.sha256 {
            rep.mismatched.push(f.path.clone());
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Desk grid, few replicas, short times.
    fn small(kind: Kind, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.replicas = 6;
        c.times = vec![0.2];
        c.probes = vec![[0, 0, 0], [16, 0, 0]];
        c.lags = vec![0.1, 0.2, 0.4];
        c.offsets = vec![0, 1];
        c.lookbacks = vec![0.1, 0.2, 0.4];
        c.slices = 16;
        c.paths = 1000;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 1);
    }

    #[test]
    fn oracle_at_zero_coupling_writes_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Kind::Oracle, dir.path());
        c.beta = 0.0;
        let m = run(&c, &RunOptions::default()).unwrap();
        assert!(m.succeeded());
        let v: Value =
            serde_json::from_slice(&fs::read(dir.path().join("fk_second_moment_t0.2.json")).unwrap()).unwrap();
        assert_eq!(v["value"], json!(1.0));
        assert!(verify(&dir.path().join("manifest.json")).unwrap().ok());
    }

    #[test]
    fn every_kind_runs_with_few_replicas() {
        for kind in Kind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut c = small(kind, dir.path());
            if kind == Kind::Kpz {
                c.times = vec![1.0];
            }
            let m = run(&c, &RunOptions::default()).unwrap();
            assert!(m.succeeded(), "{kind:?}: {m:?}");
            assert!(!m.files.is_empty());
        }
    }

    #[test]
    fn resume_reuses_rows_and_refuses_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(Kind::She, dir.path());
        let first = run(&c, &RunOptions::default()).unwrap();
        // a lost replica row is recomputed, the others are reused
        fs::remove_file(row_path(dir.path(), 3)).unwrap();
        fs::remove_file(dir.path().join("manifest.json")).unwrap();
        let second = run(&c, &RunOptions::default()).unwrap();
        assert_eq!(first, second);
        let mut other = c.clone();
        other.seed = 99;
        assert!(matches!(run(&other, &RunOptions::default()), Err(LabError::Config(_))));
    }

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(Kind::Green, dir.path());
        run(&c, &RunOptions::default()).unwrap();
        let mp = dir.path().join("manifest.json");
        assert!(verify(&mp).unwrap().ok());
        fs::write(dir.path().join("mass.csv"), "tampered").unwrap();
        let rep = verify(&mp).unwrap();
        assert_eq!(rep.mismatched, vec!["mass.csv".to_string()]);
        fs::remove_file(dir.path().join("green_summary.json")).unwrap();
        assert_eq!(verify(&mp).unwrap().missing, vec!["green_summary.json".to_string()]);
    }

    #[test]
    fn failed_replicas_are_recorded() {
        let m = RunManifest {
            config_digest: String::new(),
            code_version: String::new(),
            kind: Kind::She,
            config: ExperimentConfig::new(Kind::She),
            seeds: (0..20).map(|r| SeedEntry { replica: r, master_seed: 1, ok: r != 0 }).collect(),
            files: Vec::new(),
            failures: vec![Failure { replica: 0, error: "diverged".into() }],
            finish_error: None,
        };
        assert_eq!(m.exit_code(), 0);
        let mut worse = m.clone();
        worse.failures.push(Failure { replica: 1, error: "diverged".into() });
        assert_eq!(worse.exit_code(), 1);
    }
}
