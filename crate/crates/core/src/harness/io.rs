//! On-disk formats shared by every pipeline: environment snapshots (a
//! small binary format holding the raw conductance array), CSV tables,
//! and the JSON run manifest that records what produced which file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environment::{ConductanceLaw, StaticEnvironment};
use crate::lattice::Window;

/// Snapshot header: magic, format version, window side length. The payload
/// is the raw row-major (east, north) conductance array as little-endian
/// f64, so a snapshot restores the environment bit for bit.
const SNAPSHOT_MAGIC: &[u8; 8] = b"RCM2ENV\0";
const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot(path: &Path, env: &StaticEnvironment) -> Result<(), SnapshotError> {
    let side = 2 * env.window().half_width() as u64 + 1;
    let mut w = BufWriter::new(File::create(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })?);
    let io_err = |source| SnapshotError::Io { path: path.to_path_buf(), source };
    w.write_all(SNAPSHOT_MAGIC).map_err(io_err)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(side as u32).to_le_bytes()).map_err(io_err)?;
    for &v in env.raw() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Restores the conductance array from a snapshot. Only the values are
/// stored: the law and seed of the returned environment are placeholders
/// (unit law, seed 0) and must not be used to draw fresh randomness.
pub fn read_snapshot(path: &Path) -> Result<StaticEnvironment, SnapshotError> {
    let mut r = BufReader::new(File::open(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })?);
    let io_err = |source| SnapshotError::Io { path: path.to_path_buf(), source };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(SnapshotError::Format {
            path: path.to_path_buf(),
            message: "not an environment snapshot (bad magic)".into(),
        });
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Format {
            path: path.to_path_buf(),
            message: format!("snapshot version {version} not supported"),
        });
    }
    r.read_exact(&mut word).map_err(io_err)?;
    let side = u32::from_le_bytes(word) as i64;
    if side < 3 || side % 2 == 0 {
        return Err(SnapshotError::Format {
            path: path.to_path_buf(),
            message: format!("side {side} is not an odd number >= 3"),
        });
    }
    let half_width = ((side - 1) / 2) as i32;
    let window = Window::new(half_width);
    let want = 2 * window.num_sites();
    let mut data = Vec::with_capacity(want);
    let mut buf = [0u8; 8];
    for _ in 0..want {
        r.read_exact(&mut buf).map_err(io_err)?;
        data.push(f64::from_le_bytes(buf));
    }
    // A longer payload means the header lied about the geometry.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(SnapshotError::Format {
                path: path.to_path_buf(),
                message: "trailing bytes after the conductance array".into(),
            })
        }
        Err(source) => return Err(io_err(source)),
    }
    StaticEnvironment::from_raw(window, ConductanceLaw::homogeneous(), 0, data).map_err(|e| {
        SnapshotError::Format { path: path.to_path_buf(), message: e.to_string() }
    })
}

#[derive(thiserror::Error, Debug)]
pub enum SnapshotError {
    #[error("snapshot {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Shortest decimal that round-trips back to the same f64.
pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// Writes a CSV table. Values are pre-rendered strings so callers control
/// the formatting; fields here never need quoting (no commas in headers or
/// numeric cells). When a stamp `(config_hash, seed)` is given it goes in
/// a `#` comment line above the header, so every table names the run that
/// produced it while staying loadable by comment-aware readers.
pub fn write_csv(
    path: &Path,
    stamp: Option<(&str, u64)>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), std::io::Error> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some((hash, seed)) = stamp {
        writeln!(w, "# config_hash={hash} seed={seed}")?;
    }
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// A named scalar with its one-sigma uncertainty (zero when exact).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// What a run wrote and how it was produced: enough to reproduce the run
/// (config hash, seed, code version) and to judge it (estimates, verdict).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub experiment: String,
    pub config_path: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    /// Wall-clock seconds per phase.
    pub wall_seconds: BTreeMap<String, f64>,
    /// Headline numbers of the run.
    pub estimates: BTreeMap<String, Estimate>,
    /// Files written, relative to the manifest's directory.
    pub outputs: Vec<String>,
    /// Verdict of the run's own checks; absent for pure measurement runs.
    pub pass: Option<bool>,
}

impl RunManifest {
    pub fn new(pipeline: &str, experiment: &str) -> RunManifest {
        RunManifest {
            pipeline: pipeline.to_string(),
            experiment: experiment.to_string(),
            config_path: String::new(),
            config_hash: String::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: 0,
            threads: 1,
            wall_seconds: BTreeMap::new(),
            estimates: BTreeMap::new(),
            outputs: Vec::new(),
            pass: None,
        }
    }

    pub fn record(&mut self, name: &str, value: f64, std_error: f64) {
        self.estimates.insert(name.to_string(), Estimate { value, std_error });
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{ConductanceLaw, PositiveLaw};

    #[test]
    fn snapshot_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let law = ConductanceLaw::new(0.8, PositiveLaw::Uniform { lo: 0.5, hi: 2.0 }).unwrap();
        let env = StaticEnvironment::sample(law, Window::new(9), 42);
        let path = dir.path().join("env.rcm2");
        write_snapshot(&path, &env).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.window().half_width(), 9);
        assert_eq!(back.raw(), env.raw());
    }

    #[test]
    fn snapshot_rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.rcm2");
        std::fs::write(&bad, b"not a snapshot at all").unwrap();
        assert!(matches!(read_snapshot(&bad), Err(SnapshotError::Format { .. })));

        let env = StaticEnvironment::sample(ConductanceLaw::homogeneous(), Window::new(3), 1);
        let path = dir.path().join("short.rcm2");
        write_snapshot(&path, &env).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_snapshot(&path).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(read_snapshot(&path), Err(SnapshotError::Format { .. })));
    }

    #[test]
    fn floats_round_trip_through_the_formatter() {
        for v in [0.1, 1.0 / 3.0, 2.5e-17, -7.25, 1e300, 0.0] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_serializes_and_parses() {
        let mut m = RunManifest::new("green", "unit");
        m.record("gbar_hat", 0.159, 0.002);
        m.outputs.push("green.csv".into());
        m.pass = Some(true);
        let text = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.pipeline, "green");
        assert_eq!(back.estimates["gbar_hat"].value, 0.159);
        assert_eq!(back.pass, Some(true));
    }
}
