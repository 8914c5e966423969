//! Runs one chain to completion, turning each retained state into a fixed
//! number of recorded values. Records and chain state are checkpointed
//! every [`CHECKPOINT_EVERY`] samples, so an interrupted run resumes
//! bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use isingfield::io::{write_atomic, RawHeader, RawWriter};
use isingfield::lattice::LatticeGeometry;
use isingfield::sampler::{sample_ensemble, BondConfiguration, ChainCheckpoint, ChainConfig, Ensemble, ModelParams, SpinConfiguration};
use serde::{Deserialize, Serialize};

use crate::output::{ChainRecord, RunContext};

pub const CHECKPOINT_EVERY: usize = 1000;

pub struct ChainSpec<'g> {
    /// Unique within a run; names checkpoint and raw files.
    pub key: String,
    pub geom: &'g LatticeGeometry,
    pub params: ModelParams,
    pub chain: ChainConfig,
    /// Values recorded per sample.
    pub width: usize,
}

/// Per-sample values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Records {
    pub width: usize,
    pub data: Vec<f64>,
}

impl Records {
    pub fn len(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    width: usize,
    n_records: usize,
    chain: ChainCheckpoint,
}

fn checkpoint_paths(ctx: &RunContext, key: &str) -> (PathBuf, PathBuf) {
    let dir = ctx.checkpoint_dir();
    (dir.join(format!("{key}.json")), dir.join(format!("{key}.bin")))
}

fn load_checkpoint(ctx: &RunContext, spec: &ChainSpec) -> Result<Option<(CheckpointMeta, Vec<f64>)>> {
    let (meta_path, data_path) = checkpoint_paths(ctx, &spec.key);
    if !ctx.resume || !meta_path.exists() {
        return Ok(None);
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .with_context(|| format!("reading {}", meta_path.display()))?;
    if meta.config_hash != ctx.config_hash {
        bail!("checkpoint {} was written for a different config", meta_path.display());
    }
    if meta.width != spec.width {
        bail!("checkpoint {} records {} values per sample, expected {}", meta_path.display(), meta.width, spec.width);
    }
    let bytes = fs::read(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let want = meta.n_records * meta.width;
    if bytes.len() < 8 * want {
        bail!("checkpoint data {} is truncated", data_path.display());
    }
    let data = bytes[..8 * want]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Some((meta, data)))
}

fn save_checkpoint(ctx: &RunContext, spec: &ChainSpec, ens: &Ensemble, data: &[f64]) -> Result<()> {
    let (meta_path, data_path) = checkpoint_paths(ctx, &spec.key);
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    // Data first: the metadata names how many records are valid.
    write_atomic(&data_path, &bytes)?;
    let meta = CheckpointMeta {
        config_hash: ctx.config_hash.clone(),
        width: spec.width,
        n_records: data.len() / spec.width.max(1),
        chain: ens.checkpoint(),
    };
    write_atomic(&meta_path, &serde_json::to_vec(&meta)?)?;
    Ok(())
}

fn raw_header(spec: &ChainSpec) -> RawHeader {
    let g = spec.geom;
    RawHeader {
        n_bonds: g.n_bonds(),
        n_ghost: if spec.params.has_ghost() { g.n_sites() } else { 0 },
        description: serde_json::json!({
            "key": spec.key,
            "width": g.width(),
            "height": g.height(),
            "boundary": g.boundary(),
            "spacing": g.spacing(),
            "params": spec.params,
            "chain": spec.chain,
        }),
    }
}

fn raw_writer(ctx: &RunContext, spec: &ChainSpec, resumed_at: usize) -> Result<Option<RawWriter<std::io::BufWriter<fs::File>>>> {
    if !ctx.dump_raw {
        return Ok(None);
    }
    let path: PathBuf = ctx.raw_dir().join(format!("{}.fkrw", spec.key));
    let header = raw_header(spec);
    let w = if resumed_at > 0 && Path::new(&path).exists() {
        RawWriter::resume(&path, header, resumed_at)?
    } else if resumed_at > 0 {
        bail!("--dump-raw on resume needs the raw stream {} of the interrupted run", path.display());
    } else {
        RawWriter::create(&path, header)?
    };
    Ok(Some(w))
}

/// Runs the chain, calling `observe(sample_index, bonds, spins, out)` for
/// every retained state; `out` has `spec.width` slots.
pub fn run_chain(
    ctx: &RunContext,
    spec: &ChainSpec,
    mut observe: impl FnMut(usize, &BondConfiguration, &SpinConfiguration, &mut [f64]) -> Result<()>,
) -> Result<Records> {
    let c = &spec.chain;
    ctx.register_chain(ChainRecord {
        key: spec.key.clone(),
        seed: c.seed,
        stream: c.stream,
        n_samples: c.n_samples,
        thermalization_sweeps: c.thermalization_sweeps,
        decorrelation_sweeps: c.decorrelation_sweeps,
        torus_side: spec.geom.width(),
    });
    let (mut ens, mut data) = match load_checkpoint(ctx, spec)? {
        Some((meta, data)) => {
            eprintln!("[{}] resuming at sample {}", spec.key, meta.n_records);
            (Ensemble::resume(spec.geom, &spec.params, c, &meta.chain)?, data)
        }
        None => (sample_ensemble(spec.geom, &spec.params, c)?, Vec::with_capacity(c.n_samples * spec.width)),
    };
    let mut raw = raw_writer(ctx, spec, ens.emitted())?;
    let mut out = vec![0.0; spec.width];
    loop {
        let Some((index, bonds, spins)) = ens.next_state() else { break };
        out.fill(0.0);
        observe(index, bonds, spins, &mut out)?;
        data.extend_from_slice(&out);
        if let Some(w) = raw.as_mut() {
            w.write(c.stream as u32, index as u64, bonds)?;
        }
        let done = index + 1;
        if done % CHECKPOINT_EVERY == 0 && done < c.n_samples {
            if let Some(w) = raw.as_mut() {
                w.flush()?;
            }
            save_checkpoint(ctx, spec, &ens, &data)?;
            eprintln!("[{}] {done}/{}", spec.key, c.n_samples);
        }
    }
    if let Some(w) = raw {
        w.finish()?;
    }
    eprintln!("[{}] done, {} samples", spec.key, c.n_samples);
    Ok(Records { width: spec.width, data })
}
