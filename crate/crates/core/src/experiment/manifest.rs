//! The output-directory manifest.
//!
//! One small TOML file at the root of the output directory records which
//! configuration produced the artifacts, which dataset cache they belong to
//! and which units of work (folds, attacks, sweep points) have completed.
//! Every command checks it before touching the directory, which gives two
//! guarantees: interrupted runs resume at the first incomplete unit, and
//! artifacts from different configurations or seeds can never be mixed into
//! one report.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    /// Hex fingerprint of the configuration that owns this directory.
    config: String,
    /// Hex fingerprint of the preprocessed dataset, once it exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    /// Completed unit names, sorted.
    completed: BTreeSet<String>,
}

/// Live handle on the manifest of one output directory.
#[derive(Clone, Debug)]
pub struct Manifest {
    path: PathBuf,
    file: ManifestFile,
}

impl Manifest {
    /// Open the output directory's manifest, creating directory and file on
    /// first use. An existing manifest must carry the same configuration
    /// fingerprint; anything else is a hard error, not a silent overwrite.
    pub fn open(out: &Path, config_fingerprint: u64) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(MANIFEST_FILE);
        let config = fp_hex(config_fingerprint);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: ManifestFile = toml::from_str(&text)
                .map_err(|e| Error::Checkpoint(format!("manifest {}: {e}", path.display())))?;
            if file.version != MANIFEST_VERSION {
                return Err(Error::Checkpoint(format!(
                    "manifest version {} != {MANIFEST_VERSION}",
                    file.version
                )));
            }
            if file.config != config {
                return Err(Error::Config(format!(
                    "output directory {} belongs to configuration {}, current is {config}; \
                     results from different configurations or seeds must not mix — \
                     use a fresh --out or delete the directory",
                    out.display(),
                    file.config
                )));
            }
            return Ok(Manifest { path, file });
        }
        let manifest = Manifest {
            path,
            file: ManifestFile {
                version: MANIFEST_VERSION,
                config,
                dataset: None,
                completed: BTreeSet::new(),
            },
        };
        manifest.save()?;
        Ok(manifest)
    }

    /// Record the dataset fingerprint, or verify it if already recorded.
    pub fn bind_dataset(&mut self, fingerprint: u64) -> Result<()> {
        let hex = fp_hex(fingerprint);
        match &self.file.dataset {
            Some(existing) if *existing != hex => Err(Error::Checkpoint(format!(
                "dataset fingerprint {hex} does not match the cached {existing}; \
                 the cache in this output directory was built from different data"
            ))),
            Some(_) => Ok(()),
            None => {
                self.file.dataset = Some(hex);
                self.save()
            }
        }
    }

    pub fn dataset_fingerprint(&self) -> Option<&str> {
        self.file.dataset.as_deref()
    }

    pub fn is_done(&self, unit: &str) -> bool {
        self.file.completed.contains(unit)
    }

    /// Mark a unit complete and persist immediately, so an interruption
    /// right after never repeats finished work.
    pub fn mark_done(&mut self, unit: &str) -> Result<()> {
        if self.file.completed.insert(unit.to_string()) {
            self.save()?;
        }
        Ok(())
    }

    fn save(&self) -> Result<()> {
        let text = toml::to_string(&self.file)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
        let tmp = self.path.with_extension("toml.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

fn fp_hex(fp: u64) -> String {
    format!("{fp:016x}")
}
