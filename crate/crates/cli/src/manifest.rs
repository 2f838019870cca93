//! Reproducibility manifest written next to every command's artifacts.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const BUILD_ID: &str =
    concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"), " git:", env!("SEPSIS_GIT_REV"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub build: String,
    /// Relative path → sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

/// sha256 of a file, or of every file below a directory in path order.
pub fn checksum(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f)?);
        }
    } else {
        let mut file = std::fs::File::open(path)?;
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> CliResult<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            seed: config.seed,
            config_sha256: config.sha256(),
            build: BUILD_ID.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn input(&mut self, root: &Path, rel: &str) -> CliResult<()> {
        self.inputs.insert(rel.into(), checksum(&root.join(rel))?);
        Ok(())
    }

    pub fn output(&mut self, root: &Path, rel: &str) -> CliResult<()> {
        self.outputs.insert(rel.into(), checksum(&root.join(rel))?);
        Ok(())
    }

    /// Writes `manifests/<command>.json` under `root`.
    pub fn write(&self, root: &Path) -> CliResult<()> {
        let dir = root.join("manifests");
        std::fs::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(self).map_err(sepsis_core::Error::from)?;
        std::fs::write(dir.join(format!("{}.json", self.command)), json)?;
        Ok(())
    }

    pub fn read(root: &Path, command: &str) -> CliResult<Self> {
        let text = std::fs::read_to_string(root.join("manifests").join(format!("{command}.json")))?;
        Ok(serde_json::from_str(&text).map_err(sepsis_core::Error::from)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksums_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"abc").unwrap();
        assert_eq!(
            checksum(&dir.path().join("a")).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        std::fs::create_dir(dir.path().join("d")).unwrap();
        std::fs::write(dir.path().join("d/x"), b"1").unwrap();
        let before = checksum(&dir.path().join("d")).unwrap();
        std::fs::write(dir.path().join("d/x"), b"2").unwrap();
        assert_ne!(before, checksum(&dir.path().join("d")).unwrap());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("in.txt"), b"x").unwrap();
        let mut m = Manifest::new("simulate", &ExperimentConfig::default());
        m.input(dir.path(), "in.txt").unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path(), "simulate").unwrap(), m);
    }
}
