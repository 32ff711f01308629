//! The record each command writes before its outputs.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    /// Input files with their SHA-256.
    pub inputs: Vec<(PathBuf, String)>,
    pub started: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs.iter().map(|p| Ok((p.clone(), file_sha256(p)?))).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            command: command.to_string(),
            config: config.clone(),
            inputs,
            started: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("manifest-{command}.txt"))
    }

    /// Comment lines for provenance, then the full configuration, so the
    /// file itself can be passed back as `--config`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# command: {}", self.command).expect("write to string");
        writeln!(s, "# tool: collabqa {}", env!("CARGO_PKG_VERSION")).expect("write to string");
        writeln!(s, "# started: {}", self.started).expect("write to string");
        for (p, h) in &self.inputs {
            writeln!(s, "# input: {} sha256={h}", p.display()).expect("write to string");
        }
        s.push_str(&self.config.render());
        s
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = Self::path(out, &self.command);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Appends the completion time once every output is written.
    pub fn finish(path: &Path) -> Result<()> {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
        let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        writeln!(f, "# finished: {now}")?;
        Ok(())
    }
}
