use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// Input path → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    /// Seconds since the Unix epoch when the run started.
    pub started: u64,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h)?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seed: u64) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { command: command.into(), config, inputs: BTreeMap::new(), seed, artifacts: Vec::new(), started }
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let digest = sha256_file(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// `explicit`, else `<first artifact>.manifest.json`; `None` when the
    /// run produces nothing but standard output.
    pub fn path(&self, explicit: Option<&Path>) -> Option<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.artifacts.first().map(|a| PathBuf::from(format!("{a}.manifest.json"))))
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()
    }
}
