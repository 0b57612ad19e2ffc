//! Artifact formats: observables CSV, binary state dumps with a JSON header
//! line, jump logs and the checksummed manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ensemble::ObservableRow;
use crate::error::{Error, Result};
use crate::lattice::{DensityMatrix, Lattice};
use crate::pdp::{JumpEvent, JumpLabel};

pub const OBSERVABLES_HEADER: &str =
    "t,norm_mean,x_mean,x_se,p_mean,p_se,p2_mean,p2_se,coherence_s0,coherence_s0_se,jump_count_mean";

pub fn observables_csv(rows: &[ObservableRow]) -> String {
    let mut s = String::from(OBSERVABLES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.norm_mean,
            r.x_mean,
            r.x_se,
            r.p_mean,
            r.p_se,
            r.p2_mean,
            r.p2_se,
            r.coherence_s0,
            r.coherence_s0_se,
            r.jump_count_mean
        );
    }
    s
}

/// Parse a file written by [`observables_csv`] back into rows of numbers.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::NonFinite("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::NonFinite(format!("bad CSV value `{v}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

pub fn jumps_csv(jumps: &[(usize, JumpEvent)]) -> String {
    let mut s = String::from("trajectory_id,t,kind,index,pre_norm\n");
    for (i, e) in jumps {
        let (kind, idx) = match e.label {
            JumpLabel::Mode(j) => ("k", j),
            JumpLabel::Site(x) => ("s", x),
        };
        let _ = writeln!(s, "{i},{},{kind},{idx},{}", e.time, e.pre_norm);
    }
    s
}

fn lattice_json(lat: &Lattice) -> Value {
    json!({
        "spatial_dim": lat.spatial_dim(),
        "particles": lat.particles(),
        "points_per_axis": lat.points(),
        "length": lat.length(),
    })
}

/// Prefix `payload` with a JSON header line that records its own length as
/// `offset`.
fn with_header(mut header: serde_json::Map<String, Value>, payload: &[u8]) -> Vec<u8> {
    let mut offset = 0usize;
    let line = loop {
        header.insert("offset".into(), json!(offset));
        let line = format!("{}\n", Value::Object(header.clone()));
        if line.len() == offset {
            break line;
        }
        offset = line.len();
    };
    let mut out = line.into_bytes();
    out.extend_from_slice(payload);
    out
}

fn complex_bytes<'a>(values: impl Iterator<Item = &'a Complex64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

/// Density matrix as little-endian complex128, row-major, after a JSON
/// header line. Entries are in the continuum normalization of
/// [`DensityMatrix`].
pub fn density_bytes(rho: &DensityMatrix) -> Vec<u8> {
    let n = rho.entries.nrows();
    let rows: Vec<Complex64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| rho.entries[(i, j)])
        .collect();
    let Value::Object(mut header) = json!({ "kind": "density_matrix", "lattice": lattice_json(&rho.lattice) }) else {
        unreachable!()
    };
    header.insert("dim".into(), json!(n));
    with_header(header, &complex_bytes(rows.iter()))
}

/// Wave-function amplitudes in the same container format.
pub fn state_bytes(lattice: &Lattice, amplitudes: &[Complex64]) -> Vec<u8> {
    let Value::Object(mut header) = json!({ "kind": "wave_function", "lattice": lattice_json(lattice) }) else {
        unreachable!()
    };
    header.insert("dim".into(), json!(amplitudes.len()));
    with_header(header, &complex_bytes(amplitudes.iter()))
}

fn split_header(bytes: &[u8]) -> Result<(Value, &[u8])> {
    let end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::NonFinite("missing header line".into()))?;
    let header: Value = serde_json::from_slice(&bytes[..end])?;
    Ok((header, &bytes[end + 1..]))
}

fn decode_complex(payload: &[u8], count: usize) -> Result<Vec<Complex64>> {
    if payload.len() != 16 * count {
        return Err(Error::LatticeMismatch(format!(
            "expected {} bytes of complex128 data, found {}",
            16 * count,
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect())
}

fn check_header(header: &Value, lattice: &Lattice, kind: &str) -> Result<()> {
    if header["kind"] != kind {
        return Err(Error::LatticeMismatch(format!("file does not hold a {kind}")));
    }
    if header["lattice"] != lattice_json(lattice) {
        return Err(Error::LatticeMismatch(format!(
            "file lattice {} differs from the run lattice {}",
            header["lattice"],
            lattice_json(lattice)
        )));
    }
    Ok(())
}

pub fn read_state(path: &Path, lattice: &Lattice) -> Result<Vec<Complex64>> {
    let bytes = fs::read(path)?;
    let (header, payload) = split_header(&bytes)?;
    check_header(&header, lattice, "wave_function")?;
    decode_complex(payload, lattice.len())
}

pub fn read_density(path: &Path, lattice: &Lattice) -> Result<DensityMatrix> {
    let bytes = fs::read(path)?;
    let (header, payload) = split_header(&bytes)?;
    check_header(&header, lattice, "density_matrix")?;
    let n = lattice.len();
    let v = decode_complex(payload, n * n)?;
    Ok(DensityMatrix {
        lattice: *lattice,
        entries: DMatrix::from_row_slice(n, n, &v),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Files written into one output directory. Dropping an unfinished set
/// removes everything it created.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<(String, String)>,
    finished: bool,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            finished: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        // record first so a failed write is still cleaned up
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), String::new()));
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        self.files.last_mut().expect("just pushed").1 = sha256_hex(bytes);
        Ok(path)
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Write `manifest.json` listing every file with its checksum and keep
    /// the artifacts.
    pub fn finish(mut self, mut manifest: serde_json::Map<String, Value>) -> Result<Vec<PathBuf>> {
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(n, h)| json!({ "name": n, "sha256": h }))
            .collect();
        manifest.insert("files".into(), Value::Array(files));
        let text = serde_json::to_string_pretty(&Value::Object(manifest))? + "\n";
        self.write("manifest.json", text.as_bytes())?;
        self.finished = true;
        Ok(self.files.iter().map(|(n, _)| self.dir.join(n)).collect())
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.finished {
            return;
        }
        for (n, _) in &self.files {
            let _ = fs::remove_file(self.dir.join(n));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_offset_is_self_consistent() {
        let lat = Lattice::new(1, 1, 4, 2.0).unwrap();
        let amps: Vec<Complex64> = (0..4).map(|i| Complex64::new(i as f64, -0.5)).collect();
        let bytes = state_bytes(&lat, &amps);
        let (header, payload) = split_header(&bytes).unwrap();
        assert_eq!(header["offset"].as_u64().unwrap() as usize, bytes.len() - payload.len());
        assert_eq!(decode_complex(payload, 4).unwrap(), amps);
    }

    #[test]
    fn density_round_trip_is_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let lat = Lattice::new(1, 1, 4, 2.0).unwrap();
        let rho = DensityMatrix {
            lattice: lat,
            entries: DMatrix::from_fn(4, 4, |i, j| Complex64::new(i as f64, j as f64)),
        };
        let bytes = density_bytes(&rho);
        let (_, payload) = split_header(&bytes).unwrap();
        // second stored value is entry (0, 1)
        assert_eq!(decode_complex(&payload[16..32], 1).unwrap()[0], Complex64::new(0.0, 1.0));
        let path = dir.path().join("rho.bin");
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_density(&path, &lat).unwrap(), rho);
        let other = Lattice::new(1, 1, 4, 3.0).unwrap();
        assert!(read_density(&path, &other).is_err());
    }

    #[test]
    fn unfinished_artifacts_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        {
            let mut a = Artifacts::create(&dir).unwrap();
            a.write("a.csv", b"x").unwrap();
            assert!(dir.join("a.csv").exists());
        }
        assert!(!dir.exists());
        let mut a = Artifacts::create(&dir).unwrap();
        a.write("a.csv", b"x").unwrap();
        let files = a.finish(serde_json::Map::new()).unwrap();
        assert_eq!(files.len(), 2);
        let manifest: Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["files"][0]["sha256"], sha256_hex(b"x"));
    }
}
