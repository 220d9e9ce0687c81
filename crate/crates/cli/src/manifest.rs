use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".rbhomog.lock";

/// Provenance of an output directory. Contains no timestamps, so reruns
/// produce identical manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub mesh_hash: Option<String>,
    pub data_hash: Option<String>,
    pub training_hash: Option<String>,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest, CliError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Manifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                ..Manifest::default()
            });
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST), text + "\n")
            .map_err(|e| CliError::Config(format!("writing manifest: {e}")))
    }

    /// Records the current contents of `name`.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let bytes =
            std::fs::read(dir.join(name)).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        self.files.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Fails if `name` is missing, unrecorded or changed since it was
    /// recorded.
    pub fn verify(&self, dir: &Path, name: &str) -> Result<(), CliError> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::Config(format!("missing input {}: {e}", path.display())))?;
        match self.files.get(name) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(()),
            Some(_) => Err(CliError::Config(format!(
                "{name} was modified after it was recorded in the manifest"
            ))),
            None => Err(CliError::Config(format!(
                "{name} is not recorded in the manifest"
            ))),
        }
    }

    /// Compares a recorded hash with the current configuration.
    pub fn check(recorded: &Option<String>, current: &str, what: &str) -> Result<(), CliError> {
        match recorded {
            Some(h) if h == current => Ok(()),
            Some(_) => Err(CliError::Config(format!(
                "the {what} in the output directory was produced with a different configuration (use --force to override)"
            ))),
            None => Err(CliError::Config(format!("no {what} recorded in the manifest; run the earlier commands first"))),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CliError::Config(format!(
                    "output directory {} is in use ({e}); remove {} if no other run is active",
                    dir.display(),
                    path.display()
                ))
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Files written by a command, removed again unless the command commits.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
    committed: bool,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            committed: false,
        }
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.into());
        self.dir.join(name)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for name in &self.written {
                let _ = std::fs::remove_file(self.dir.join(name));
            }
        }
    }
}
