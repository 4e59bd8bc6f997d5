//! Run directories, file digests and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const HOME_VAR: &str = "CAMO_FORGE_HOME";

pub fn home() -> PathBuf {
    std::env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("camoforge-home"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Every regular file below `dir`, relative and sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).map_err(|e| CliError::io(dir, e))?;
    out.sort();
    Ok(out)
}

fn rel_key(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Digest of a file, or of a directory as the digest of its sorted
/// `path digest` listing.
pub fn path_digest(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut listing = String::new();
        for rel in list_files(path)? {
            if rel.file_name().is_some_and(|n| n == RUN_MANIFEST) {
                continue;
            }
            listing.push_str(&format!("{} {}\n", rel_key(&rel), file_digest(&path.join(&rel))?));
        }
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        file_digest(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_digest: String,
    /// Resolved settings the run used.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

impl RunManifest {
    /// Checks that each recorded output exists with its digest.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for (rel, digest) in &self.outputs {
            let actual = file_digest(&dir.join(rel))?;
            if &actual != digest {
                return Err(CliError::Runtime(format!("{rel}: digest {actual} does not match manifest {digest}")));
            }
        }
        Ok(())
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// One command invocation writing into its own directory.
pub struct Run {
    pub command: String,
    pub dir: PathBuf,
    pub run_id: String,
    config: serde_json::Value,
    config_digest: String,
    seed: u64,
    started: u64,
    inputs: BTreeMap<String, String>,
}

impl Run {
    /// `out` or `$CAMO_FORGE_HOME/<command>/<command>-<digest prefix>`.
    pub fn start(command: &str, config: serde_json::Value, seed: u64, out: Option<&Path>) -> Result<Self, CliError> {
        let canonical = serde_json::to_string(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
        let config_digest = sha256_hex(canonical.as_bytes());
        let run_id = format!("{command}-{}", &config_digest[..12]);
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => home().join(command).join(&run_id),
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            command: command.into(),
            dir,
            run_id,
            config,
            config_digest,
            seed,
            started: now_unix(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let d = path_digest(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Digests everything in the run directory and writes the manifest.
    pub fn finish(self) -> Result<RunManifest, CliError> {
        let mut outputs = BTreeMap::new();
        for rel in list_files(&self.dir)? {
            let key = rel_key(&rel);
            if key == RUN_MANIFEST {
                continue;
            }
            outputs.insert(key, file_digest(&self.dir.join(&rel))?);
        }
        let m = RunManifest {
            run_id: self.run_id,
            command: self.command,
            config_digest: self.config_digest,
            config: self.config,
            inputs: self.inputs,
            outputs,
            seed: self.seed,
            started_unix: self.started,
            finished_unix: now_unix(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        let p = self.dir.join(RUN_MANIFEST);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        m.verify(&self.dir)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_records_and_verifies_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let run = Run::start("demo", serde_json::json!({"a": 1}), 3, Some(tmp.path())).unwrap();
        run.write("x/y.txt", "hello").unwrap();
        let m = run.finish().unwrap();
        assert_eq!(m.outputs["x/y.txt"], sha256_hex(b"hello"));
        let text = fs::read_to_string(tmp.path().join(RUN_MANIFEST)).unwrap();
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
        fs::write(tmp.path().join("x/y.txt"), "changed").unwrap();
        assert!(m.verify(tmp.path()).is_err());
    }

    #[test]
    fn directory_digest_ignores_the_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("a"), "1").unwrap();
        let before = path_digest(tmp.path()).unwrap();
        fs::write(tmp.path().join(RUN_MANIFEST), "{}").unwrap();
        assert_eq!(path_digest(tmp.path()).unwrap(), before);
    }
}
