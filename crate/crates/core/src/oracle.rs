//! The simulated remote model. It is trained on its own split and answers
//! hard-label queries on protected images only.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams, TrainConfig};
use crate::noise::ProtectedImage;

/// Anything that labels protected images. The in-process [`RemoteOracle`]
/// implements it; a network client could too.
pub trait LabelOracle: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Hard labels for `batch`, one per image.
    fn query(&self, batch: &[ProtectedImage]) -> Result<Vec<usize>>;
    /// Total number of images labeled so far.
    fn query_count(&self) -> u64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 15,
                batch_size: 32,
                seed: 0,
            },
        }
    }
}

/// One audited query: its position in the global query stream, the pixels
/// that were sent, and the label returned.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub index: u64,
    pub pixels: Vec<f64>,
    pub label: usize,
}

pub struct RemoteOracle {
    model: ModelParams,
    queries: AtomicU64,
    audit: Option<Mutex<Vec<AuditRecord>>>,
    clean_acc_priv: Option<f64>,
    clean_acc_val: Option<f64>,
}

impl std::fmt::Debug for RemoteOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteOracle")
            .field("query_count", &self.query_count())
            .field("clean_acc_priv", &self.clean_acc_priv)
            .field("clean_acc_val", &self.clean_acc_val)
            .finish_non_exhaustive()
    }
}

/// Trains the remote classifier `[D, hidden.., C]` on `remote_train`.
pub fn fit_remote(remote_train: &LabeledDataset, cfg: &RemoteConfig) -> Result<RemoteOracle> {
    if remote_train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dims = vec![remote_train.input_dim()];
    dims.extend(&cfg.hidden);
    dims.push(remote_train.num_classes());
    let init = nn::init_model(&dims, cfg.train.seed)?;
    let (model, _) = nn::train(&init, remote_train.images(), remote_train.labels(), &cfg.train)?;
    Ok(RemoteOracle::from_model(model))
}

impl RemoteOracle {
    pub fn from_model(model: ModelParams) -> Self {
        Self {
            model,
            queries: AtomicU64::new(0),
            audit: None,
            clean_acc_priv: None,
            clean_acc_val: None,
        }
    }

    /// Starts recording every queried tensor.
    pub fn enable_audit(&mut self) {
        self.audit = Some(Mutex::new(Vec::new()));
    }

    /// Audited queries so far, or `None` if auditing is off.
    pub fn audit_records(&self) -> Option<Vec<AuditRecord>> {
        self.audit
            .as_ref()
            .map(|a| a.lock().expect("audit lock poisoned").clone())
    }

    /// Removes and returns the audited queries recorded so far.
    pub fn drain_audit_records(&self) -> Option<Vec<AuditRecord>> {
        self.audit
            .as_ref()
            .map(|a| std::mem::take(&mut *a.lock().expect("audit lock poisoned")))
    }

    /// Writes the audit log as one `{"index":..,"label":..}` object per line.
    pub fn write_query_log(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            index: u64,
            label: usize,
        }
        let records = self
            .audit_records()
            .ok_or_else(|| Error::State("query auditing is not enabled".into()))?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut w, &Line {
                index: r.index,
                label: r.label,
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Provider-side reference accuracy on clean data. Not a query: it
    /// neither counts nor is audited.
    pub fn record_clean_accuracy(&mut self, d_priv: &LabeledDataset, d_val: &LabeledDataset) -> Result<()> {
        self.clean_acc_priv = Some(nn::accuracy(&self.model, d_priv.images(), d_priv.labels())?);
        self.clean_acc_val = Some(nn::accuracy(&self.model, d_val.images(), d_val.labels())?);
        Ok(())
    }

    pub fn clean_acc_priv(&self) -> Option<f64> {
        self.clean_acc_priv
    }

    pub fn clean_acc_val(&self) -> Option<f64> {
        self.clean_acc_val
    }
}

impl LabelOracle for RemoteOracle {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model.output_dim()
    }

    fn query(&self, batch: &[ProtectedImage]) -> Result<Vec<usize>> {
        if batch.is_empty() {
            return Err(Error::Size("query batch is empty".into()));
        }
        let labels = self.model.predict(batch)?;
        let start = self.queries.fetch_add(batch.len() as u64, Ordering::SeqCst);
        if let Some(audit) = &self.audit {
            let mut log = audit.lock().expect("audit lock poisoned");
            log.extend(batch.iter().zip(&labels).enumerate().map(|(k, (p, &label))| {
                AuditRecord {
                    index: start + k as u64,
                    pixels: p.pixels().pixels().to_vec(),
                    label,
                }
            }));
        }
        Ok(labels)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }
}

/// Fraction of oracle labels on `d_protected` that match the private labels.
pub fn sidp_accuracy(
    oracle: &dyn LabelOracle,
    d_protected: &[ProtectedImage],
    true_labels: &[usize],
) -> Result<f64> {
    if d_protected.len() != true_labels.len() {
        return Err(Error::CountMismatch {
            images: d_protected.len(),
            labels: true_labels.len(),
        });
    }
    let labels = oracle.query(d_protected)?;
    let hits = labels.iter().zip(true_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / true_labels.len() as f64)
}
