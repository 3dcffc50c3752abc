//! Run manifests: enough to replay a subcommand byte-for-byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ceai_core::{Error, Result};

pub const TOOL: &str = "ceai";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Arguments after the program name, exactly as given.
    pub argv: Vec<String>,
    pub seed: u64,
    /// Contents of the `--config` file, if one was passed.
    pub config: Option<String>,
    /// Files this run wrote, relative to the output directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn file_name(subcommand: &str) -> String {
        format!("{subcommand}.manifest.json")
    }

    pub fn path_in(out_dir: &Path, subcommand: &str) -> PathBuf {
        out_dir.join(Self::file_name(subcommand))
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = Self::path_in(out_dir, &self.subcommand);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.tool != TOOL {
            return Err(Error::Validation(format!(
                "{} is not a {TOOL} manifest",
                path.display()
            )));
        }
        if m.subcommand == "rerun" {
            return Err(Error::Validation("a rerun manifest cannot itself be replayed".into()));
        }
        Ok(m)
    }
}
