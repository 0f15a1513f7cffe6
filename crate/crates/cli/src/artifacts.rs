//! On-disk layout `runs/<name>/<stage>/` and hash-stamped artifacts.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// JSON artifact envelope.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub stage: String,
    pub data: T,
}

pub struct Run {
    pub root: PathBuf,
    pub hash: String,
    pub config: RunConfig,
}

impl Run {
    pub fn new(runs_dir: &Path, config: RunConfig) -> Self {
        Run {
            root: runs_dir.join(&config.name),
            hash: drcf::util::config_hash(&config),
            config,
        }
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.root.join(stage).join(file)
    }

    /// Creates the stage directory and writes the resolved config into it.
    pub fn begin(&self, stage: &str) -> anyhow::Result<PathBuf> {
        let dir = self.root.join(stage);
        std::fs::create_dir_all(&dir)?;
        let mut text = serde_json::to_string_pretty(&self.config)?;
        text.push('\n');
        drcf::util::write_atomic(&dir.join("config.json"), text.as_bytes())?;
        Ok(dir)
    }

    pub fn write_json<T: Serialize>(&self, stage: &str, file: &str, data: &T) -> anyhow::Result<()> {
        let env = Stamped { config_hash: self.hash.clone(), stage: stage.to_string(), data };
        let bytes = serde_json::to_vec(&env)?;
        drcf::util::write_atomic(&self.path(stage, file), &bytes)?;
        Ok(())
    }

    /// CSV body produced by `body`, preceded by a `# config_hash=` comment.
    pub fn write_csv(&self, stage: &str, file: &str, body: impl FnOnce(&mut Vec<u8>) -> drcf::Result<()>) -> anyhow::Result<()> {
        let mut buf = format!("# config_hash={}\n", self.hash).into_bytes();
        body(&mut buf)?;
        drcf::util::write_atomic(&self.path(stage, file), &buf)?;
        Ok(())
    }

    /// Reads an upstream artifact; `producer` names the subcommand that
    /// writes it. Artifacts from a different configuration are accepted with
    /// a warning; `report` checks hashes strictly.
    pub fn read_json<T: DeserializeOwned>(&self, stage: &str, file: &str, producer: &str) -> anyhow::Result<Stamped<T>> {
        let path = self.path(stage, file);
        let bytes = std::fs::read(&path).map_err(|_| CliError::Missing { path: path.clone(), producer: producer.into() })?;
        let env: Stamped<T> = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Data(format!("{}: unreadable artifact: {e}", path.display())))?;
        if env.config_hash != self.hash {
            log::warn!(
                "{} was produced under config {} (current {}); re-run `drcf {producer}` to refresh it",
                path.display(),
                env.config_hash,
                self.hash
            );
        }
        Ok(env)
    }
}
