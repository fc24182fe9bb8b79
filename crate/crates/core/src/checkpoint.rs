//! Checkpoints: one CSV row per visited site plus a JSON sidecar with the
//! run parameters.
//!
//! Values are written with 17 significant digits, so an `f64` state
//! round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{SandpileState, Schedule, ScheduleKind, StabilizeOutcome};
use crate::error::{Result, SandpileError};
use crate::lattice::Site;
use crate::scalar::Real;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub site: Vec<i64>,
    pub mass: f64,
}

/// Run parameters stored next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema: u32,
    pub d: usize,
    pub n: f64,
    pub m: f64,
    pub kappa: f64,
    pub eps_stop: f64,
    pub schedule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub sweeps: u64,
    #[serde(default)]
    pub topplings: u64,
    pub residual_excess: f64,
    pub sources: Vec<SourceRecord>,
}

impl Sidecar {
    pub fn new<T: Real>(s: &SandpileState<T>, schedule: Schedule, eps_stop: T, outcome: &StabilizeOutcome<T>) -> Self {
        Sidecar {
            schema: SCHEMA_VERSION,
            d: s.dim(),
            n: s.n().as_f64(),
            m: s.m().as_f64(),
            kappa: s.kappa().as_f64(),
            eps_stop: eps_stop.as_f64(),
            schedule: schedule.kind.name().to_string(),
            seed: (schedule.kind == ScheduleKind::RandomInfinitive).then_some(schedule.seed),
            sweeps: outcome.sweeps,
            topplings: outcome.topplings,
            residual_excess: outcome.residual_excess.as_f64(),
            sources: s
                .sources()
                .iter()
                .map(|(x, w)| SourceRecord { site: x.coords().to_vec(), mass: w.as_f64() })
                .collect(),
        }
    }

    pub fn sources(&self) -> Vec<(Site, f64)> {
        self.sources.iter().map(|r| (Site::new(r.site.clone()), r.mass)).collect()
    }
}

/// `prefix.csv` and `prefix.json`.
pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    (with(".csv"), with(".json"))
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> SandpileError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SandpileError::io(path, io),
        other => SandpileError::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the header `x1,...,xd,u,mu` and one row per visited site.
pub fn write_csv_to<T: Real, W: Write>(s: &SandpileState<T>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = s.dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("u".into());
    header.push("mu".into());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(d + 2);
    for (x, u, mu) in s.visited_sites() {
        row.clear();
        row.extend(x.coords().iter().map(|c| c.to_string()));
        row.push(fmt17(u.as_f64()));
        row.push(fmt17(mu.as_f64()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Real>(s: &SandpileState<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SandpileError::io(path, e))?;
    write_csv_to(s, BufWriter::new(file)).map_err(|e| csv_error(path, e))
}

/// Parses rows written by [`write_csv_to`] and returns the dimension and the
/// `(site, u, mu)` triples.
pub fn read_csv_from<R: Read>(input: R) -> Result<(usize, Vec<(Site, f64, f64)>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| SandpileError::Parse(e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let d = cols.len().checked_sub(2).filter(|&d| d >= 2).ok_or_else(|| {
        SandpileError::Parse(format!("expected header x1,...,xd,u,mu, got {}", cols.join(",")))
    })?;
    let expected: Vec<String> = (1..=d).map(|k| format!("x{k}")).chain(["u".into(), "mu".into()]).collect();
    if cols != expected {
        return Err(SandpileError::Parse(format!("expected header {}, got {}", expected.join(","), cols.join(","))));
    }
    let mut sites = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| SandpileError::Parse(e.to_string()))?;
        let bad = |what: &str| SandpileError::Parse(format!("row {}: malformed {what}", line + 2));
        let coords = (0..d)
            .map(|k| rec.get(k).and_then(|v| v.trim().parse::<i64>().ok()).ok_or_else(|| bad("coordinate")))
            .collect::<Result<Vec<_>>>()?;
        let num = |k: usize, what: &str| {
            rec.get(k).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()).ok_or_else(|| bad(what))
        };
        sites.push((Site::new(coords), num(d, "u")?, num(d + 1, "mu")?));
    }
    Ok((d, sites))
}

pub fn read_csv(path: &Path) -> Result<(usize, Vec<(Site, f64, f64)>)> {
    let file = File::open(path).map_err(|e| SandpileError::io(path, e))?;
    read_csv_from(BufReader::new(file)).map_err(|e| match e {
        SandpileError::Parse(msg) => SandpileError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_sidecar(meta: &Sidecar, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| SandpileError::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| SandpileError::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| SandpileError::io(path, e))?;
    let meta: Sidecar =
        serde_json::from_str(&text).map_err(|e| SandpileError::Parse(format!("{}: {e}", path.display())))?;
    if meta.schema != SCHEMA_VERSION {
        return Err(SandpileError::Parse(format!(
            "{}: unsupported schema {}, expected {SCHEMA_VERSION}",
            path.display(),
            meta.schema
        )));
    }
    Ok(meta)
}

/// Rebuilds the state stored under `prefix`.
pub fn load(prefix: &Path) -> Result<(Sidecar, SandpileState<f64>)> {
    let (csv_path, json_path) = checkpoint_paths(prefix);
    let meta = read_sidecar(&json_path)?;
    let (d, sites) = read_csv(&csv_path)?;
    if d != meta.d {
        return Err(SandpileError::Parse(format!(
            "{} has {d} coordinates per row, sidecar says d = {}",
            csv_path.display(),
            meta.d
        )));
    }
    let state = SandpileState::from_sites(d, &meta.sources(), meta.m, &sites)?;
    Ok((meta, state))
}

/// Writes `prefix.csv` and `prefix.json`.
pub fn save<T: Real>(s: &SandpileState<T>, meta: &Sidecar, prefix: &Path) -> Result<()> {
    let (csv_path, json_path) = checkpoint_paths(prefix);
    write_csv(s, &csv_path)?;
    write_sidecar(meta, &json_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{stabilize, StabilizeOptions};

    fn stabilized() -> (SandpileState<f64>, Sidecar) {
        let mut s = SandpileState::new(2, &[(Site::origin(2), 700.0), (Site::from([4, -1]), 0.3)], 3.0).unwrap();
        let opts = StabilizeOptions::default();
        let out = stabilize(&mut s, Schedule::random(5), &opts).unwrap();
        let meta = Sidecar::new(&s, Schedule::random(5), opts.resolved_eps(s.n()), &out);
        (s, meta)
    }

    #[test]
    fn header_and_precision() {
        let s = SandpileState::new(3, &[(Site::origin(3), 1.0 / 3.0)], 1.0).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x1,x2,x3,u,mu\n0,0,0,0.0000000000000000e0,3.3333333333333331e-1\n");
    }

    #[test]
    fn round_trip_is_exact() {
        let (s, meta) = stabilized();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("run");
        save(&s, &meta, &prefix).unwrap();
        let (meta2, t) = load(&prefix).unwrap();
        assert_eq!(meta, meta2);
        let a = s.visited_sites();
        let b = t.visited_sites();
        assert_eq!(a.len(), b.len());
        for ((x, u, mu), (y, v, nu)) in a.iter().zip(&b) {
            assert_eq!(x, y);
            assert_eq!(u, v);
            assert_eq!(mu, nu);
        }
        assert_eq!(t.mu0().get(&Site::from([4, -1])), 0.3);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(read_csv_from("x1,u,mu\n".as_bytes()), Err(SandpileError::Parse(_))));
        assert!(matches!(read_csv_from("x1,x2,u,mu\n0,zero,1,1\n".as_bytes()), Err(SandpileError::Parse(_))));
        assert!(matches!(read_csv_from("x1,x2,u,mu\n0,0,1\n".as_bytes()), Err(SandpileError::Parse(_))));
        assert!(matches!(read_csv_from("a,b,c,d\n".as_bytes()), Err(SandpileError::Parse(_))));
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(load(&missing), Err(SandpileError::Io { .. })));
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"schema": 2}"#).unwrap();
        assert!(matches!(read_sidecar(&bad), Err(SandpileError::Parse(_))));
    }
}
