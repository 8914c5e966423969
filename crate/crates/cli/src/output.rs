//! Output files: CSV tables and JSON documents, each carrying one JSON
//! metadata line so that every number can be traced back to its config and
//! chain seeds.

use std::path::PathBuf;
use std::sync::Mutex;

use anyhow::{Context, Result};
use isingfield::io::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Seeds and settings of one chain, as recorded in output metadata.
#[derive(Clone, Debug, Serialize)]
pub struct ChainRecord {
    pub key: String,
    pub seed: u64,
    pub stream: u64,
    pub n_samples: usize,
    pub thermalization_sweeps: usize,
    pub decorrelation_sweeps: usize,
    pub torus_side: usize,
}

/// Run-wide context shared by all experiments.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub dump_raw: bool,
    chains: Mutex<Vec<ChainRecord>>,
}

pub fn config_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

impl RunContext {
    pub fn new(config: ExperimentConfig, config_text: String, out_dir: PathBuf, resume: bool, dump_raw: bool) -> Self {
        let config_hash = config_hash(&config_text);
        Self { config, config_text, config_hash, out_dir, resume, dump_raw, chains: Mutex::new(Vec::new()) }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.out_dir.join("raw")
    }

    pub fn register_chain(&self, record: ChainRecord) {
        let mut chains = self.chains.lock().expect("chain registry poisoned");
        if !chains.iter().any(|c| c.key == record.key) {
            chains.push(record);
        }
    }

    /// Chains whose key is in `keys`, in key order.
    fn chains_for(&self, keys: &[String]) -> Vec<ChainRecord> {
        let chains = self.chains.lock().expect("chain registry poisoned");
        let mut out: Vec<ChainRecord> = chains.iter().filter(|c| keys.contains(&c.key)).cloned().collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    fn metadata(&self, chain_keys: &[String], extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "experiment": self.config.experiment.tag(),
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": self.config_hash,
            "master_seed": self.config.seed,
            "config": self.config_text,
            "chains": self.chains_for(chain_keys),
            "details": extra,
        })
    }

    /// Writes `rows` as CSV under the output directory, preceded by the
    /// metadata line. `chains` lists the keys of the chains the rows came
    /// from.
    pub fn write_csv<R: Serialize>(
        &self,
        name: &str,
        chains: &[String],
        extra: serde_json::Value,
        rows: impl IntoIterator<Item = R>,
    ) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec(&self.metadata(chains, extra))?;
        bytes.push(b'\n');
        let mut w = csv::Writer::from_writer(bytes);
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().context("flushing csv")?;
        self.write_file(name, &bytes)
    }

    /// Writes a JSON document: the metadata line, then the body on one line.
    pub fn write_json(&self, name: &str, chains: &[String], extra: serde_json::Value, body: &impl Serialize) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec(&self.metadata(chains, extra))?;
        bytes.push(b'\n');
        serde_json::to_writer(&mut bytes, body)?;
        bytes.push(b'\n');
        self.write_file(name, &bytes)
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
