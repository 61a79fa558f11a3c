use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{io_err, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// What was run, with which settings and inputs. The file is itself a valid
/// config file, so `--config manifest.txt` repeats the run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<PathBuf>, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            inputs,
            output_dir: output_dir.to_path_buf(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn to_text(&self) -> String {
        let inputs: Vec<String> = self.inputs.iter().map(|p| p.display().to_string()).collect();
        format!(
            "# run manifest\ncommand = {}\ntimestamp = {}\nconfig_hash = {}\ninputs = {}\n{}",
            self.command,
            self.timestamp,
            self.config.hash(),
            inputs.join(","),
            self.config.to_text()
        )
    }

    /// Creates the output directory and writes the manifest into it.
    pub fn write(&self) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| io_err(&self.output_dir, e))?;
        let path = self.output_dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
