//! Checkpoint archives: named 32-bit tensors (model parameters and
//! optimizer moments) plus the metadata needed for exact resumption —
//! iteration counter, optimizer step, RNG position, and the resolved
//! training configuration as text.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DRCK";
const VERSION: u32 = 1;

/// Complete position of a counter-based RNG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything beyond the tensors themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Iterations completed when the checkpoint was written.
    pub iteration: u64,
    /// Optimizer steps taken (bias-correction clock).
    pub optimizer_step: u64,
    /// Training RNG position at save time.
    pub rng: RngState,
    /// The resolved training configuration, `key = value` per line.
    pub config: String,
}

/// A named-tensor archive. Parameter tensors use their store names;
/// optimizer moments append `@m` / `@v`.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Name of the first-moment tensor for a parameter.
pub fn moment_m_name(param: &str) -> String {
    format!("{param}@m")
}

/// Name of the second-moment tensor for a parameter.
pub fn moment_v_name(param: &str) -> String {
    format!("{param}@v")
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.meta.iteration.to_le_bytes()).map_err(io)?;
        w.write_all(&self.meta.optimizer_step.to_le_bytes())
            .map_err(io)?;
        w.write_all(&self.meta.rng.seed).map_err(io)?;
        w.write_all(&self.meta.rng.stream.to_le_bytes()).map_err(io)?;
        w.write_all(&self.meta.rng.word_pos.to_le_bytes())
            .map_err(io)?;
        let config = self.meta.config.as_bytes();
        w.write_all(&(config.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(config).map_err(io)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())
            .map_err(io)?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            w.write_all(&[t.rank() as u8]).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let bad = |what: &str| {
            Error::Checkpoint(format!("{}: {what}", path.display()))
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io)?;
        let iteration = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf).map_err(io)?;
        let optimizer_step = u64::from_le_bytes(u64buf);
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(io)?;
        r.read_exact(&mut u64buf).map_err(io)?;
        let stream = u64::from_le_bytes(u64buf);
        let mut u128buf = [0u8; 16];
        r.read_exact(&mut u128buf).map_err(io)?;
        let word_pos = u128::from_le_bytes(u128buf);

        r.read_exact(&mut u64buf).map_err(io)?;
        let config_len = u64::from_le_bytes(u64buf) as usize;
        if config_len > (1 << 24) {
            return Err(bad("implausible config length"));
        }
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes).map_err(io)?;
        let config = String::from_utf8(config_bytes)
            .map_err(|_| bad("config is not valid UTF-8"))?;

        r.read_exact(&mut u64buf).map_err(io)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count > 1 << 20 {
            return Err(bad("implausible tensor count"));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf).map_err(io)?;
            let name_len = u64::from_le_bytes(u64buf) as usize;
            if name_len > 4096 {
                return Err(bad("implausible tensor name length"));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad("tensor name is not valid UTF-8"))?;
            let mut rank_buf = [0u8; 1];
            r.read_exact(&mut rank_buf).map_err(io)?;
            let rank = rank_buf[0] as usize;
            if rank > 8 {
                return Err(bad("implausible tensor rank"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u64buf).map_err(io)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 30 {
                return Err(bad("implausible tensor size"));
            }
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                iteration,
                optimizer_step,
                rng: RngState {
                    seed,
                    stream,
                    word_pos,
                },
                config,
            },
            tensors,
        })
    }

    /// Restores every parameter of `store` from same-named tensors. Missing
    /// parameters and shape mismatches are errors; extra archive tensors
    /// (e.g. optimizer moments) are ignored here.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor(&name).ok_or_else(|| {
                Error::Checkpoint(format!("archive has no tensor named '{name}'"))
            })?;
            store.load_value(&name, t.clone())?;
        }
        Ok(())
    }
}

/// Collects a store's parameters as named tensors (insertion order).
pub fn params_to_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store
        .iter()
        .map(|(n, _, t)| (n.to_string(), t.clone()))
        .collect()
}
