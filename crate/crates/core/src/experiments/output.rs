use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;

pub const PIPELINE_SUMMARY_HEADER: [&str; 13] = [
    "mechanism",
    "epsilon",
    "priv_size",
    "infer_size",
    "runs",
    "sidp_mean",
    "sidp_std",
    "acc_priv_mean",
    "acc_priv_std",
    "acc_val_mean",
    "acc_val_std",
    "p_value",
    "master_seed",
];

pub const CALIBRATION_SUMMARY_HEADER: [&str; 6] =
    ["epsilon", "sidp_acc", "band_low", "band_high", "band_position", "master_seed"];

pub const LATENT_SUMMARY_HEADER: [&str; 5] = [
    "triplets_with_dr_gt_1",
    "total_triplets",
    "frequency",
    "degenerate",
    "master_seed",
];

pub const RENDER_SUMMARY_HEADER: [&str; 5] = ["epsilon", "file", "rows", "columns", "master_seed"];

pub const TREND_PLOT_HEADER: [&str; 6] = ["epsilon", "sidp_acc", "acc_priv", "acc_val", "gap", "runs"];

pub const RUN_PLOT_HEADER: [&str; 8] = [
    "mechanism",
    "epsilon",
    "priv_size",
    "infer_size",
    "repetition",
    "sidp_acc",
    "acc_priv",
    "acc_val",
];

/// JSON envelope: every artifact carries the config and master seed that
/// produced it.
#[derive(Debug, Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub command: &'a str,
    pub master_seed: u64,
    pub config: &'a ExperimentConfig,
    pub data: T,
}

/// `out/`, `out/runs/` and `out/plots/`.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        for dir in [root.to_path_buf(), root.join("runs"), root.join("plots")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(rel);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_csv<H: AsRef<str>>(&self, rel: &str, header: &[H], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.path(rel);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header.iter().map(|h| h.as_ref()))?;
        for r in rows {
            if r.len() != header.len() {
                return Err(Error::Validation(format!(
                    "{rel}: row has {} fields, header has {}",
                    r.len(),
                    header.len()
                )));
            }
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Fixed-precision float cell, so reruns produce byte-identical files.
pub fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// Compact epsilon label for file names, e.g. `0.5` -> `0p5`.
pub fn eps_tag(eps: f64) -> String {
    let s = format!("{eps}");
    s.replace('.', "p").replace('-', "m")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_created() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(&dir.path().join("o")).unwrap();
        assert!(out.path("runs").is_dir());
        assert!(out.path("plots").is_dir());
    }

    #[test]
    fn csv_rows_must_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path()).unwrap();
        assert!(out.write_csv("a.csv", &["x", "y"], &[vec!["1".into()]]).is_err());
        out.write_csv("b.csv", &["x", "y"], &[vec!["1".into(), "2".into()]])
            .unwrap();
        assert_eq!(fs::read_to_string(out.path("b.csv")).unwrap(), "x,y\n1,2\n");
    }

    #[test]
    fn epsilon_tags() {
        assert_eq!(eps_tag(0.5), "0p5");
        assert_eq!(eps_tag(2.0), "2");
        assert_eq!(num(1.0 / 3.0), "0.333333");
    }
}
