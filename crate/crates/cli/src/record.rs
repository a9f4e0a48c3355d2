//! Run records, output-directory locks and input hashing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Tree-style digest: every input file hashed, then the sorted
/// `sha256  name` lines hashed together.
#[derive(Debug, Clone, Default, Serialize)]
pub struct InputSet {
    pub files: Vec<InputDigest>,
    pub tree_sha256: String,
}

impl InputSet {
    pub fn hash(paths: &[PathBuf]) -> CliResult<Self> {
        let mut files = paths
            .iter()
            .map(|p| Ok(InputDigest { path: p.to_string_lossy().into_owned(), sha256: file_sha256(p)? }))
            .collect::<CliResult<Vec<_>>>()?;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let listing: String = files
            .iter()
            .map(|f| {
                let name = Path::new(&f.path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{}  {}\n", f.sha256, name)
            })
            .collect();
        Ok(Self { tree_sha256: sha256_hex(listing.as_bytes()), files })
    }
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    /// Labelled child seeds actually used.
    pub derived_seeds: Vec<(String, u64)>,
    pub config: Vec<(String, String)>,
    pub inputs: InputSet,
    pub extra: serde_json::Value,
}

impl<'a> RunRecord<'a> {
    pub fn new(command: &'a str, cfg: &PipelineConfig, inputs: InputSet) -> Self {
        let config = cfg
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            derived_seeds: Vec::new(),
            config,
            inputs,
            extra: serde_json::Value::Null,
        }
    }

    pub fn seed(&mut self, label: &str, root: u64) -> u64 {
        let s = radiosynth_core::rng::derive_seed(root, label);
        self.derived_seeds.push((label.to_string(), s));
        s
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let body = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&out_dir.join("run.json"), body.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp-write");
    let io = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub const LOCK_NAME: &str = ".radiosynth.lock";

/// Held for the lifetime of a command; removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "{} is locked by another command (remove {} if stale)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Data(format!("cannot lock {}: {e}", out_dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Sorted regular files directly inside `dir` with one of `exts`
/// (case-insensitive); an empty `exts` accepts every file.
pub fn list_files(dir: &Path, exts: &[&str]) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .filter(|p| {
            exts.is_empty() || p.extension().is_some_and(|x| exts.iter().any(|e| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn require_dir(dir: &Path, what: &str) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} directory {} does not exist", dir.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Data(_))));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn tree_hash_depends_on_content_not_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::write(d.join("x.png"), b"one").unwrap();
            fs::write(d.join("y.png"), b"two").unwrap();
        }
        let ha = InputSet::hash(&list_files(a.path(), &["png"]).unwrap()).unwrap();
        let hb = InputSet::hash(&list_files(b.path(), &["png"]).unwrap()).unwrap();
        assert_eq!(ha.tree_sha256, hb.tree_sha256);
        fs::write(b.path().join("y.png"), b"changed").unwrap();
        let hc = InputSet::hash(&list_files(b.path(), &["png"]).unwrap()).unwrap();
        assert_ne!(ha.tree_sha256, hc.tree_sha256);
        assert_eq!(ha.files[0].sha256, sha256_hex(b"one"));
    }
}
