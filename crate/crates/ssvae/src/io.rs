//! Artifact writing. Every file carries the config hash and master seed, and
//! each run refreshes `manifest.json` with the checksum of every artifact.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the effective config, serialized with sorted keys.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(sha256_hex(&serde_json::to_vec(&value)?))
}

/// Output directory plus the provenance stamped into every artifact.
pub struct Artifacts {
    pub dir: PathBuf,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, T: Serialize> {
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    config: &'a C,
    result: &'a T,
}

impl Artifacts {
    pub fn new<C: Serialize>(dir: &Path, command: &str, config: &C, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            config_sha256: config_hash(config)?,
            seed,
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// JSON document `{command, config_sha256, seed, config, result}`.
    pub fn json<C: Serialize, T: Serialize>(
        &self,
        name: &str,
        config: &C,
        result: &T,
    ) -> Result<PathBuf> {
        let doc = Envelope {
            command: &self.command,
            config_sha256: &self.config_sha256,
            seed: self.seed,
            config,
            result,
        };
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// CSV whose first line is a `#` comment with the provenance.
    pub fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<PathBuf> {
        let mut out = format!(
            "# config_sha256={} seed={}\n",
            self.config_sha256, self.seed
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        self.write(name, &out)
    }

    /// SVG with the provenance in a leading comment.
    pub fn svg(&self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!(
            "<!-- config_sha256={} seed={} -->\n{body}",
            self.config_sha256, self.seed
        );
        self.write(name, text.as_bytes())
    }

    /// Rewrite the manifest from every file currently in the directory.
    pub fn manifest(&self) -> Result<PathBuf> {
        write_manifest(&self.dir)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn write_manifest(dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::new();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        entries.push(ManifestEntry {
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            path: name,
        });
    }
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_vec_pretty(&serde_json::json!({ "artifacts": entries }))?;
    text.push(b'\n');
    fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn artifacts_carry_provenance_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"b": 1, "a": 2});
        let a = Artifacts::new(dir.path(), "t", &cfg, 9).unwrap();
        #[derive(Serialize)]
        struct Row {
            x: usize,
            y: f64,
        }
        a.csv("r.csv", &[Row { x: 1, y: 0.5 }]).unwrap();
        a.json("r.json", &cfg, &3).unwrap();
        let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(csv.starts_with(&format!("# config_sha256={} seed=9\nx,y\n1,0.5\n", a.config_sha256)));
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(json["seed"], 9);
        assert_eq!(json["config_sha256"], a.config_sha256.as_str());
        a.manifest().unwrap();
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        let paths: Vec<&str> = m["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["path"].as_str().unwrap())
            .collect();
        assert_eq!(paths, ["r.csv", "r.json"]);
    }
}
