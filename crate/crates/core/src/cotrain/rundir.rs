//! On-disk record of a co-training run.
//!
//! ```text
//! <root>/config.snapshot
//! <root>/iter_<k>/report.json
//! <root>/iter_<k>/simplifier.ckpt
//! <root>/iter_<k>/rewriter.ckpt
//! <root>/pseudo/iter_<k>.jsonl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::IterationReport;
use crate::domain::PseudoExample;
use crate::error::Result;
use crate::genmodel::GeneratorModel;

/// Single-writer handle on a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn iteration_dir(&self, k: usize) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    pub fn report_path(&self, k: usize) -> PathBuf {
        self.iteration_dir(k).join("report.json")
    }

    pub fn simplifier_path(&self, k: usize) -> PathBuf {
        self.iteration_dir(k).join("simplifier.ckpt")
    }

    pub fn rewriter_path(&self, k: usize) -> PathBuf {
        self.iteration_dir(k).join("rewriter.ckpt")
    }

    pub fn pseudo_path(&self, k: usize) -> PathBuf {
        self.root.join("pseudo").join(format!("iter_{k}.jsonl"))
    }

    pub fn write_config(&self, snapshot: &str) -> Result<()> {
        let mut text = snapshot.to_owned();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        fs::write(self.root.join("config.snapshot"), text)?;
        Ok(())
    }

    /// Report, both checkpoints and the kept pseudo examples of iteration `k`.
    pub fn write_iteration<M: GeneratorModel>(
        &self,
        report: &IterationReport,
        simplifier: &M,
        rewriter: &M,
        pseudo: &[PseudoExample],
    ) -> Result<()> {
        let k = report.iteration;
        fs::create_dir_all(self.iteration_dir(k))?;
        let mut json = serde_json::to_string_pretty(report)?;
        json.push('\n');
        fs::write(self.report_path(k), json)?;
        simplifier.save_checkpoint(&self.simplifier_path(k))?;
        rewriter.save_checkpoint(&self.rewriter_path(k))?;
        fs::create_dir_all(self.root.join("pseudo"))?;
        let mut lines = String::new();
        for p in pseudo {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        fs::write(self.pseudo_path(k), lines)?;
        Ok(())
    }

    pub fn read_report(&self, k: usize) -> Result<IterationReport> {
        let text = fs::read_to_string(self.report_path(k))?;
        Ok(serde_json::from_str(&text)?)
    }
}
