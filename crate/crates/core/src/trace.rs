//! Run traces and their on-disk form.
//!
//! A trace is a CSV file with the columns of [`COLUMNS`], in that order, one
//! row per logged iteration. Flags are written as `0`/`1`; optional values are
//! left empty. Next to it sits a JSON sidecar ([`RunManifest`]) holding
//! everything needed to rerun the experiment.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpSpec;
use crate::optim::Algorithm;
use crate::policy::PolicyParams;
use crate::run::LogSpacing;
use crate::schedule::StepSchedule;

pub const COLUMNS: [&str; 19] = [
    "t",
    "eta",
    "v_mu",
    "v_rho",
    "v_omega_rho",
    "v_next_rho",
    "gap_rho",
    "gap_mu",
    "restart_active",
    "restart_count",
    "grad_norm",
    "mom_improve",
    "grad_improve",
    "min_theta_gap",
    "feasible_domain",
    "cond_i",
    "cond_ii",
    "cond_iii",
    "cond_iv",
];

/// One logged iteration. Values are for `theta(t)` unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    /// Step size of the update that produced `theta(t)`; zero at `t = 0`.
    pub eta: f64,
    pub v_mu: f64,
    pub v_rho: f64,
    /// `V^{omega(t)}(rho)`.
    pub v_omega_rho: f64,
    /// `V^{theta(t+1)}(rho)`, present when `t + 1` was also computed.
    pub v_next_rho: Option<f64>,
    pub gap_rho: f64,
    pub gap_mu: f64,
    pub restart_active: u8,
    pub restart_count: u64,
    /// `||grad V(mu)||` at `omega(t)`.
    pub grad_norm: f64,
    /// `V^{omega(t)}(rho) - V^{theta(t)}(rho)`.
    pub mom_improve: f64,
    /// `V^{theta(t+1)}(rho) - V^{omega(t)}(rho)`.
    pub grad_improve: Option<f64>,
    pub min_theta_gap: f64,
    /// `theta(t) - theta(t-1)` lies in the feasible update domain.
    pub feasible_domain: u8,
    pub cond_i: u8,
    pub cond_ii: u8,
    pub cond_iii: u8,
    pub cond_iv: u8,
}

impl TraceRecord {
    pub fn all_conditions(&self) -> bool {
        self.cond_i == 1 && self.cond_ii == 1 && self.cond_iii == 1 && self.cond_iv == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The evaluation gap fell below the convergence floor.
    Converged { t: u64 },
    /// The normalized schedule met a zero gradient.
    VanishingGradient { t: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Every iteration at which the restart test fired, logged or not.
    pub restart_iters: Vec<u64>,
    pub termination: Termination,
}

impl RunTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace holds at least the initial record")
    }

    pub fn final_gap(&self) -> f64 {
        self.last().gap_rho
    }

    /// `(t, gap_rho)` pairs.
    pub fn gap_points(&self) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (r.t as f64, r.gap_rho)).collect()
    }

    /// First logged `t` whose gap is below `level`.
    pub fn first_below(&self, level: f64) -> Option<u64> {
        self.records.iter().find(|r| r.gap_rho < level).map(|r| r.t)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Parses trace CSV text. Column order is free but every column of
/// [`COLUMNS`] must be present, and `t` must increase strictly.
pub fn read_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    for col in COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn(col));
        }
    }
    let mut records: Vec<TraceRecord> = Vec::new();
    for row in reader.deserialize() {
        let r: TraceRecord = row?;
        if let Some(prev) = records.last() {
            if r.t <= prev.t {
                return Err(Error::Config(format!("trace iterations not increasing: {} after {}", r.t, prev.t)));
            }
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Config("trace has no records".into()));
    }
    Ok(records)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    read_trace_csv(&std::fs::read_to_string(path)?)
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub final_t: u64,
    pub final_gap_rho: f64,
    pub restart_count: u64,
    pub restart_iters: Vec<u64>,
    pub termination: Termination,
}

impl RunSummary {
    pub fn of(trace: &RunTrace) -> Self {
        let last = trace.last();
        RunSummary {
            final_t: last.t,
            final_gap_rho: last.gap_rho,
            restart_count: last.restart_count,
            restart_iters: trace.restart_iters.clone(),
            termination: trace.termination.clone(),
        }
    }
}

/// JSON sidecar of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    /// Preset name or the file the environment was read from.
    pub env: String,
    pub env_sha256: String,
    pub mdp: MdpSpec,
    pub init_theta: PolicyParams,
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub n_iters: u64,
    pub seed: u64,
    pub log: LogSpacing,
    pub condition_m: f64,
    pub v_star_rho: f64,
    pub summary: RunSummary,
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_str(text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Config(format!("unsupported sidecar version {}", m.version)));
    }
    Ok(m)
}

pub fn read_manifest_file(path: &Path) -> Result<RunManifest> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

/// `trace.csv` -> `trace.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let candidate = csv_path.with_extension("json");
    if candidate == csv_path {
        csv_path.with_extension("meta.json")
    } else {
        candidate
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temporary files are created 0600; give the result ordinary permissions.
        let mode = std::fs::metadata(path).map_or(0o644, |m| m.permissions().mode());
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(mode))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes the CSV to `csv_path` and the sidecar next to it; returns the sidecar path.
pub fn write_run(csv_path: &Path, trace: &RunTrace, manifest: &RunManifest) -> Result<PathBuf> {
    write_atomic(csv_path, trace.to_csv_string()?.as_bytes())?;
    let side = sidecar_path(csv_path);
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    write_atomic(&side, &json)?;
    Ok(side)
}
