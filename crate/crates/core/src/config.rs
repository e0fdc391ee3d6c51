//! Experiment configuration files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment                     ignored, as are blank lines
//! [section]                     one of experiment, grid, model, schedule
//! key = value                   lists are comma separated
//! ```
//!
//! Keys before the first section header may be any known key; keys inside a
//! section must belong to it. Probe sites are written `i:j:k`.
//!
//! | section    | key          | default                              |
//! |------------|--------------|--------------------------------------|
//! | experiment | kind         | required                             |
//! | experiment | replicas     | 200                                  |
//! | experiment | seed         | 1                                    |
//! | experiment | output_dir   | `out`                                |
//! | grid       | d, n, l, dt  | 3, 32, 16, 0.05                      |
//! | model      | kappa, beta  | 2.5, 0.1                             |
//! | model      | epsilons     | 1                                    |
//! | model      | transforms   | log, identity                        |
//! | schedule   | times        | 1                                    |
//! | schedule   | probes       | origin and the three half-box shifts |
//! | schedule   | lookbacks    | 1, 2, 4, 8, 16                       |
//! | schedule   | lags         | 2, 4, 8, 16                          |
//! | schedule   | offsets      | 0, 2, 4                              |
//! | schedule   | proxy_factor | 8                                    |
//! | schedule   | slices       | 2000                                 |
//! | schedule   | paths        | 4000                                 |
//! | schedule   | h0_amplitude | 1                                    |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::GridSpec;
use crate::oracle::digest;
use crate::stationary::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    NoiseCheck,
    She,
    Green,
    Stationary,
    Homog,
    Fluct,
    Kpz,
    Oracle,
}

impl Kind {
    pub const ALL: [Kind; 8] =
        [Kind::NoiseCheck, Kind::She, Kind::Green, Kind::Stationary, Kind::Homog, Kind::Fluct, Kind::Kpz, Kind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Kind::NoiseCheck => "noise-check",
            Kind::She => "she",
            Kind::Green => "green",
            Kind::Stationary => "stationary",
            Kind::Homog => "homog",
            Kind::Fluct => "fluct",
            Kind::Kpz => "kpz",
            Kind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
            LabError::Config(format!("unknown experiment kind '{s}', expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub d: usize,
    pub n: usize,
    pub l: f64,
    pub dt: f64,
    pub kappa: f64,
    pub beta: f64,
    pub epsilons: Vec<f64>,
    pub transforms: Vec<String>,
    pub replicas: u64,
    pub seed: u64,
    pub times: Vec<f64>,
    pub probes: Vec<[usize; 3]>,
    pub lookbacks: Vec<f64>,
    pub lags: Vec<f64>,
    pub offsets: Vec<usize>,
    pub proxy_factor: f64,
    pub slices: u64,
    pub paths: usize,
    pub h0_amplitude: f64,
    /// Not part of the digest: moving a run does not change it.
    #[serde(skip)]
    pub output_dir: PathBuf,
}

const SECTIONS: [(&str, &[&str]); 4] = [
    ("experiment", &["kind", "replicas", "seed", "output_dir"]),
    ("grid", &["d", "n", "l", "dt"]),
    ("model", &["kappa", "beta", "epsilons", "transforms"]),
    (
        "schedule",
        &["times", "probes", "lookbacks", "lags", "offsets", "proxy_factor", "slices", "paths", "h0_amplitude"],
    ),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            d: 3,
            n: 32,
            l: 16.0,
            dt: 0.05,
            kappa: 2.5,
            beta: 0.1,
            epsilons: vec![1.0],
            transforms: vec!["log".into(), "identity".into()],
            replicas: 200,
            seed: 1,
            times: vec![1.0],
            probes: vec![[0, 0, 0], [16, 0, 0], [0, 16, 0], [0, 0, 16]],
            lookbacks: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            lags: vec![2.0, 4.0, 8.0, 16.0],
            offsets: vec![0, 2, 4],
            proxy_factor: 8.0,
            slices: 2000,
            paths: 4000,
            h0_amplitude: 1.0,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.d, self.n, self.l, self.dt)
    }

    /// Flat index of each probe site.
    pub fn probe_sites(&self) -> Result<Vec<usize>> {
        let grid = self.grid()?;
        Ok(self.probes.iter().map(|p| grid.index(&p[..grid.dim])).collect())
    }

    pub fn transform_specs(&self) -> Result<Vec<TransformSpec>> {
        self.transforms.iter().map(|t| TransformSpec::parse(t)).collect()
    }

    /// SHA-256 over the canonical JSON of every field except the output directory.
    pub fn digest(&self) -> String {
        digest(&serde_json::to_value(self).expect("config serialises"))
    }

    /// Checks every range constraint, naming the one violated.
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(LabError::Config(format!("d ≥ 3 is required for physics experiments, got d = {}", self.d)));
        }
        if self.d > 3 {
            return Err(LabError::Config(format!("dimensions above 3 are not supported, got d = {}", self.d)));
        }
        if !(self.kappa > 2.0 && self.kappa < self.d as f64) {
            return Err(LabError::Config(format!("κ ∈ (2, d) violated: kappa = {}, d = {}", self.kappa, self.d)));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(LabError::Config(format!("ε ∈ (0, 1] violated: epsilons = {:?}", self.epsilons)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LabError::Config(format!("β ≥ 0 violated: beta = {}", self.beta)));
        }
        if self.replicas == 0 {
            return Err(LabError::Config("replicas must be at least 1".into()));
        }
        let grid = self.grid()?;
        if self.times.is_empty() || self.times.iter().any(|&t| !(t > 0.0)) {
            return Err(LabError::Config("times must be positive".into()));
        }
        for &t in &self.times {
            crate::she::time_index(t, grid.dt).map_err(|e| LabError::Config(e.to_string()))?;
        }
        if self.probes.is_empty() || self.probes.iter().any(|p| p.iter().any(|&c| c >= self.n)) {
            return Err(LabError::Config(format!("probes must be sites of the {}^3 lattice", self.n)));
        }
        self.transform_specs()?;
        if !(self.proxy_factor > 0.0) {
            return Err(LabError::Config("proxy_factor must be positive".into()));
        }
        Ok(())
    }

    /// Parses the text of a configuration file, fills defaults and validates.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut section: Option<&str> = None;
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        let mut unknown = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .map(|(s, _)| *s)
                        .find(|s| *s == name)
                        .ok_or_else(|| LabError::Config(format!("line {}: unknown section [{name}]", no + 1)))?,
                );
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match (section_of(key), section) {
                (None, _) => unknown.push(key.to_string()),
                (Some(home), Some(cur)) if home != cur => {
                    return Err(LabError::Config(format!(
                        "line {}: key '{key}' belongs in [{home}], not [{cur}]",
                        no + 1
                    )))
                }
                _ => {
                    if values.insert(key.to_string(), value.to_string()).is_some() {
                        return Err(LabError::Config(format!("line {}: duplicate key '{key}'", no + 1)));
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(LabError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let kind = Kind::parse(values.get("kind").ok_or_else(|| LabError::Config("missing key 'kind'".into()))?)?;
        let mut cfg = Self::new(kind);
        for (key, v) in &values {
            let bad = |what: &str| LabError::Config(format!("key '{key}': cannot parse '{v}' as {what}"));
            let real = || v.parse::<f64>().map_err(|_| bad("a number"));
            let int = || v.parse::<u64>().map_err(|_| bad("a non-negative integer"));
            let reals = || {
                list(v)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("numbers"))
            };
            match key.as_str() {
                "kind" => {}
                "replicas" => cfg.replicas = int()?,
                "seed" => cfg.seed = int()?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "d" => cfg.d = int()? as usize,
                "n" => cfg.n = int()? as usize,
                "l" => cfg.l = real()?,
                "dt" => cfg.dt = real()?,
                "kappa" => cfg.kappa = real()?,
                "beta" => cfg.beta = real()?,
                "epsilons" => cfg.epsilons = reals()?,
                "transforms" => cfg.transforms = list(v).map(str::to_string).collect(),
                "times" => cfg.times = reals()?,
                "lookbacks" => cfg.lookbacks = reals()?,
                "lags" => cfg.lags = reals()?,
                "offsets" => {
                    cfg.offsets = list(v)
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("lattice steps"))?
                }
                "probes" => {
                    cfg.probes = list(v)
                        .map(|s| {
                            let c: Vec<usize> = s
                                .split(':')
                                .map(|c| c.trim().parse::<usize>())
                                .collect::<std::result::Result<_, _>>()
                                .ok()?;
                            (c.len() == 3).then(|| [c[0], c[1], c[2]])
                        })
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad("sites i:j:k"))?
                }
                "proxy_factor" => cfg.proxy_factor = real()?,
                "slices" => cfg.slices = int()?,
                "paths" => cfg.paths = int()? as usize,
                "h0_amplitude" => cfg.h0_amplitude = real()?,
                _ => unreachable!("key validated above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::parse_str(&text)
}
