//! Output directory bookkeeping: every written artifact is recorded and
//! checked before the run reports success.

use std::path::{Path, PathBuf};

use cbm_align::concept_model::{load_model, save_model, ConceptModel};
use cbm_align::corpus::{load_bundle, save_bundle, EmbeddingBundle};
use cbm_align::intervention::{
    load_candidates, load_head, save_candidates, save_head, CandidateConcepts, InterventionHead,
};
use cbm_align::io;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMING: &str = "timing.json";
pub const ERROR_FILE: &str = "error.json";

pub struct Outputs {
    root: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(root: &Path) -> CliResult<Self> {
        io::ensure_dir(root)?;
        // a stale error file from an earlier failed run would be misleading
        io::remove_if_present(&root.join(ERROR_FILE))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            io::ensure_dir(parent)?;
        }
        io::write_json(&p, value)?;
        self.record(name);
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> CliResult<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            io::ensure_dir(parent)?;
        }
        io::write_atomic(&p, data)?;
        self.record(name);
        Ok(())
    }

    pub fn f32s(&mut self, name: &str, data: &[f32]) -> CliResult<()> {
        io::write_f32(&self.path(name), data)?;
        self.record(name);
        Ok(())
    }

    pub fn bundle(&mut self, name: &str, bundle: &EmbeddingBundle) -> CliResult<()> {
        let p = self.path(name);
        save_bundle(bundle, &p)?;
        if !load_bundle(&p)?.bit_identical(bundle) {
            return Err(CliError::Output(format!(
                "{name} did not read back bitwise"
            )));
        }
        self.record(name);
        Ok(())
    }

    pub fn model(&mut self, name: &str, model: &ConceptModel) -> CliResult<()> {
        let p = self.path(name);
        save_model(model, &p)?;
        if !load_model(&p)?.bit_identical(model) {
            return Err(CliError::Output(format!(
                "{name} did not read back bitwise"
            )));
        }
        self.record(name);
        Ok(())
    }

    pub fn candidates(&mut self, name: &str, c: &CandidateConcepts) -> CliResult<()> {
        let p = self.path(name);
        save_candidates(c, &p)?;
        if load_candidates(&p)? != *c {
            return Err(CliError::Output(format!("{name} did not read back")));
        }
        self.record(name);
        Ok(())
    }

    pub fn head(&mut self, name: &str, head: &InterventionHead) -> CliResult<()> {
        let p = self.path(name);
        save_head(head, &p)?;
        if load_head(&p)? != *head {
            return Err(CliError::Output(format!("{name} did not read back")));
        }
        self.record(name);
        Ok(())
    }

    /// Writes the run manifest and checks every recorded output exists.
    pub fn finish(mut self, manifest: serde_json::Value) -> CliResult<Vec<String>> {
        let mut listed = self.written.clone();
        listed.push(RUN_MANIFEST.to_string());
        listed.sort();
        listed.dedup();
        let mut manifest = manifest;
        manifest["outputs"] = serde_json::json!(listed);
        self.json(RUN_MANIFEST, &manifest)?;
        for name in &listed {
            if !self.path(name).exists() {
                return Err(CliError::Output(format!("{name} missing after write")));
            }
        }
        Ok(listed)
    }
}
