//! Artifact I/O: atomic writes, content hashes, CSV tables with a JSON
//! provenance comment line, and DN records (CSV values plus JSON metadata).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::IndexRange;
use crate::linearize::{DNData, DnProvenance};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the canonical JSON serialization of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::from(e)
    })
}

/// Pretty JSON, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// CSV with an optional `# {json}` first line, a header row and numeric rows.
/// Floats use the shortest round-trip representation.
pub fn write_csv(
    path: &Path,
    provenance: Option<&Value>,
    header: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str("# ");
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape {
                expected: header.len(),
                got: row.len(),
            });
        }
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&body));
    atomic_write(path, out.as_bytes())
}

/// Header and numeric rows of a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// JSON sidecar of a DN record: layout and provenance without the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnMeta {
    pub n_times: usize,
    pub v_set: IndexRange,
    pub spacing: f64,
    pub dt: f64,
    /// Lattice coordinates of the V columns.
    pub x: Vec<f64>,
    pub provenance: DnProvenance,
}

fn dn_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.csv")),
        dir.join(format!("{stem}.json")),
    )
}

/// `<dir>/<stem>.csv` (time rows × V columns) and `<dir>/<stem>.json`.
/// `x_of` maps a lattice index to its coordinate.
pub fn write_dn(
    dir: &Path,
    stem: &str,
    data: &DNData,
    x_of: impl Fn(usize) -> f64,
    extra: Option<&Value>,
) -> Result<()> {
    let (csv_path, json_path) = dn_paths(dir, stem);
    let x: Vec<f64> = data.v_set.iter().map(&x_of).collect();
    let mut header = vec!["t".to_string()];
    header.extend(x.iter().map(|x| format!("x={x:?}")));
    let rows: Vec<Vec<f64>> = (0..data.n_times)
        .map(|k| {
            let mut r = vec![k as f64 * data.dt];
            r.extend_from_slice(data.row(k));
            r
        })
        .collect();
    let meta = DnMeta {
        n_times: data.n_times,
        v_set: data.v_set,
        spacing: data.spacing,
        dt: data.dt,
        x,
        provenance: data.provenance.clone(),
    };
    write_csv(&csv_path, extra, &header, &rows)?;
    write_json(&json_path, &meta)
}

pub fn read_dn(dir: &Path, stem: &str) -> Result<DNData> {
    let (csv_path, json_path) = dn_paths(dir, stem);
    let meta: DnMeta = read_json(&json_path)?;
    let (header, rows) = read_csv(&csv_path)?;
    let m = meta.v_set.len();
    if header.len() != m + 1 || rows.len() != meta.n_times {
        return Err(Error::Format(format!(
            "{}: expected {} rows of {} columns",
            csv_path.display(),
            meta.n_times,
            m + 1
        )));
    }
    let mut values = Vec::with_capacity(meta.n_times * m);
    for row in &rows {
        if row.len() != m + 1 {
            return Err(Error::Shape {
                expected: m + 1,
                got: row.len(),
            });
        }
        values.extend_from_slice(&row[1..]);
    }
    Ok(DNData {
        n_times: meta.n_times,
        v_set: meta.v_set,
        spacing: meta.spacing,
        dt: meta.dt,
        values,
        provenance: meta.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_hex() {
        let h = sha256_hex(b"abc");
        assert_eq!(
            h,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dn_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("fraclab-io-{}", std::process::id()));
        let v = IndexRange { start: 3, end: 6 };
        let mut d = DNData::zeros(4, v, 0.1, 0.25);
        for (i, x) in d.values.iter_mut().enumerate() {
            *x = (i as f64 + 0.1).sin() / 3.0;
        }
        d.provenance.epsilon = Some(0.05);
        write_dn(
            &dir,
            "rec",
            &d,
            |i| i as f64 * 0.1,
            Some(&serde_json::json!({"seed": 7})),
        )
        .unwrap();
        let back = read_dn(&dir, "rec").unwrap();
        assert_eq!(back, d);
        fs::remove_dir_all(&dir).unwrap();
    }
}
