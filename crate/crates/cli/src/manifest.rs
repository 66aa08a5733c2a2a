//! Run manifests: what was run, with which resolved config, and the SHA-256
//! of every emitted artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zenith_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// The config after seed and step overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Artifact file name (relative to `out_dir`) to lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    path: PathBuf,
}

impl RunManifest {
    /// Writes the initial manifest (no artifacts yet) to `out_dir/file_name`.
    pub fn begin(
        command: &str,
        config_path: Option<&Path>,
        config: &impl Serialize,
        seed: Option<u64>,
        out_dir: &Path,
        file_name: &str,
    ) -> Result<Self> {
        let manifest = Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: serde_json::to_value(config)?,
            seed,
            out_dir: out_dir.to_path_buf(),
            artifacts: BTreeMap::new(),
            path: out_dir.join(file_name),
        };
        manifest.write()?;
        Ok(manifest)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes `bytes` to `out_dir/name` and records its checksum.
    pub fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records the checksum of a file already written inside `out_dir`.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let name = path
            .strip_prefix(&self.out_dir)
            .ok()
            .or_else(|| path.file_name().map(Path::new))
            .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
        let hash = sha256_file(path)?;
        self.artifacts.insert(name.to_string_lossy().into_owned(), hash);
        Ok(())
    }

    /// Rewrites the manifest with the recorded checksums.
    pub fn finish(&self) -> Result<()> {
        self.write()
    }

    /// Artifacts whose current checksum differs from the recorded one.
    pub fn stale_artifacts(&self) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (name, hash) in &self.artifacts {
            let path = self.out_dir.join(name);
            if !path.exists() || sha256_file(&path)? != *hash {
                stale.push(name.clone());
            }
        }
        Ok(stale)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.path = path.to_path_buf();
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        write_atomic(&self.path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn checksums_track_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin("test", None, &serde_json::json!({"a": 1}), Some(3), dir.path(), "manifest.json").unwrap();
        assert!(RunManifest::read(m.path()).unwrap().artifacts.is_empty());
        let p = m.emit("x.csv", b"1,2\n").unwrap();
        let q = dir.path().join("y.bin");
        fs::write(&q, [0u8, 1]).unwrap();
        m.record(&q).unwrap();
        m.finish().unwrap();
        let back = RunManifest::read(m.path()).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_artifacts().unwrap().is_empty());
        fs::write(&p, b"changed").unwrap();
        assert_eq!(back.stale_artifacts().unwrap(), vec!["x.csv".to_string()]);
    }
}
