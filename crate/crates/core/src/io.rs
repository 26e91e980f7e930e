//! Artifact directories: guarded creation, tracked files, SHA-256 manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bumped whenever the layout or meaning of an output file changes.
pub const ARTIFACT_VERSION: &str = concat!("shelab-", env!("CARGO_PKG_VERSION"), "/artifacts-1");

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.ndjson";
pub const SUMMARY: &str = "summary.txt";
pub const TABLES: &str = "tables";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub kind: String,
    /// The fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of every other artifact, keyed by relative path.
    pub files: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub workers: usize,
    /// Criterion verdicts rendered by the run (empty when none apply).
    #[serde(default)]
    pub verdicts: Vec<crate::experiment::Verdict>,
}

impl Manifest {
    /// Checksums of the result files only; these must not depend on the
    /// worker count.
    pub fn result_checksums(&self) -> &BTreeMap<String, String> {
        &self.files
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let f = File::open(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(f)?)
}

/// An output directory being filled by one run.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    /// The directory must be absent or empty unless `force`, in which case
    /// the artifacts of an earlier run are removed first.
    pub fn prepare(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            if !root.is_dir() {
                return Err(Error::Config {
                    field: "out".into(),
                    reason: format!("{} is not a directory", root.display()),
                });
            }
            let occupied = fs::read_dir(root)?.next().is_some();
            if occupied {
                if !force {
                    return Err(Error::Config {
                        field: "out".into(),
                        reason: format!("{} is not empty (use --force to overwrite)", root.display()),
                    });
                }
                for name in [MANIFEST, RESULTS, SUMMARY] {
                    let p = root.join(name);
                    if p.exists() {
                        fs::remove_file(p)?;
                    }
                }
                let t = root.join(TABLES);
                if t.exists() {
                    fs::remove_dir_all(t)?;
                }
                let s = root.join("snapshots");
                if s.exists() {
                    fs::remove_dir_all(s)?;
                }
            }
        }
        fs::create_dir_all(root.join(TABLES))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Create a tracked file at `rel` (parents are created).
    pub fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    pub fn write_string(&mut self, rel: &str, s: &str) -> Result<()> {
        let mut w = self.create(rel)?;
        w.write_all(s.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Write `rows` as a CSV table under `tables/`.
    pub fn write_table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let w = self.create(&format!("{TABLES}/{name}.csv"))?;
        let mut wr = csv::Writer::from_writer(w);
        for r in rows {
            wr.serialize(r).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Checksum every tracked file and write `manifest.json`.
    pub fn finish(
        self,
        kind: &str,
        config: serde_json::Value,
        wall_clock_seconds: f64,
        workers: usize,
        verdicts: Vec<crate::experiment::Verdict>,
    ) -> Result<Manifest> {
        let mut files = BTreeMap::new();
        for rel in &self.files {
            files.insert(rel.clone(), sha256_file(&self.root.join(rel))?);
        }
        let m = Manifest {
            artifact_version: ARTIFACT_VERSION.into(),
            kind: kind.into(),
            config,
            files,
            wall_clock_seconds,
            workers,
            verdicts,
        };
        let mut w = BufWriter::new(File::create(self.root.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, &m)?;
        writeln!(w)?;
        w.flush()?;
        Ok(m)
    }
}

/// Read a CSV table written by [`OutputDir::write_table`].
pub fn read_table<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let path = dir.join(TABLES).join(format!("{name}.csv"));
    let f = File::open(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let mut rd = csv::Reader::from_reader(f);
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_occupied_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), "x").unwrap();
        assert!(OutputDir::prepare(dir.path(), false).is_err());
        assert!(OutputDir::prepare(dir.path(), true).is_ok());
    }

    #[test]
    fn manifest_lists_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::prepare(&dir.path().join("run"), false).unwrap();
        out.write_string(SUMMARY, "hello\n").unwrap();
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Row {
            a: f64,
            b: String,
        }
        out.write_table("t", &[Row { a: 1.5, b: "x".into() }]).unwrap();
        let m = out.finish("flow", serde_json::json!({"k": 1}), 0.1, 2, vec![]).unwrap();
        // sha256("hello\n")
        assert_eq!(m.files[SUMMARY], "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03");
        let back = read_manifest(&dir.path().join("run")).unwrap();
        assert_eq!(back, m);
        let rows: Vec<Row> = read_table(&dir.path().join("run"), "t").unwrap();
        assert_eq!(rows, vec![Row { a: 1.5, b: "x".into() }]);
    }
}
