//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "EDUN", u32 version = 1,
//!   u32 config length + UTF-8 JSON config snapshot,
//!   model tensor table: u32 count, then per tensor
//!     u32 name length + UTF-8 name, u8 rank, u64 per dim, f32 payload,
//!   state tensor table in the same encoding (optimizer moments, step,
//!   epoch, rng state as byte-valued tensors).

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::EDUNetConfig;
use crate::optim::AdamState;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"EDUN";
const VERSION: u32 = 1;

pub type TensorTable = Vec<(String, Vec<usize>, Vec<f32>)>;

pub struct Checkpoint {
    pub config: EDUNetConfig,
    /// Trainable params ("param.<name>") and norm buffers ("buffer.<name>").
    pub tensors: TensorTable,
    /// Optimizer moments, step counter, epoch, rng state.
    pub state: TensorTable,
}

impl Checkpoint {
    pub fn capture(
        config: &EDUNetConfig,
        store: &ParamStore<f32>,
        opt: &AdamState,
        epoch: usize,
        rng: &ChaCha8Rng,
    ) -> Self {
        let mut tensors: TensorTable = Vec::new();
        for (name, t) in store.params() {
            tensors.push((format!("param.{name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        for (name, t) in store.buffers() {
            tensors.push((format!("buffer.{name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        let mut state: TensorTable = Vec::new();
        state.push(("epoch".into(), vec![1], vec![epoch as f32]));
        state.push(("opt.step".into(), vec![1], vec![opt.step as f32]));
        for (name, m) in &opt.m {
            // moments are f64; split into high/low f32 parts so the
            // round-trip is exact (m = hi + lo with lo the residual)
            let (hi, lo) = split_f64(m);
            state.push((format!("opt.m_hi.{name}"), vec![m.len()], hi));
            state.push((format!("opt.m_lo.{name}"), vec![m.len()], lo));
        }
        for (name, v) in &opt.v {
            let (hi, lo) = split_f64(v);
            state.push((format!("opt.v_hi.{name}"), vec![v.len()], hi));
            state.push((format!("opt.v_lo.{name}"), vec![v.len()], lo));
        }
        let seed = rng.get_seed();
        state.push((
            "rng.seed".into(),
            vec![seed.len()],
            seed.iter().map(|b| *b as f32).collect(),
        ));
        let pos = rng.get_word_pos().to_le_bytes();
        state.push((
            "rng.word_pos".into(),
            vec![pos.len()],
            pos.iter().map(|b| *b as f32).collect(),
        ));
        Checkpoint {
            config: config.clone(),
            tensors,
            state,
        }
    }

    /// Load the model tensor table into a freshly initialized store,
    /// validating names and shapes.
    pub fn restore_model(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut seen = 0usize;
        for (name, shape, data) in &self.tensors {
            if let Some(plain) = name.strip_prefix("param.") {
                let old = store.get(plain).map_err(|_| {
                    Error::Checkpoint(format!("checkpoint parameter `{plain}` not in model"))
                })?;
                if old.shape() != &shape[..] {
                    return Err(Error::Checkpoint(format!(
                        "`{plain}`: checkpoint shape {shape:?} vs model {:?}",
                        old.shape()
                    )));
                }
                store.set_param(plain, data.clone())?;
                seen += 1;
            } else if let Some(plain) = name.strip_prefix("buffer.") {
                let old = store.get_buffer(plain).map_err(|_| {
                    Error::Checkpoint(format!("checkpoint buffer `{plain}` not in model"))
                })?;
                if old.shape() != &shape[..] {
                    return Err(Error::Checkpoint(format!(
                        "`{plain}`: checkpoint shape {shape:?} vs model {:?}",
                        old.shape()
                    )));
                }
                store.set_buffer(plain, data.clone())?;
                seen += 1;
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor kind `{name}`")));
            }
        }
        let expected = store.params().count() + store.buffers().count();
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} tensors, model expects {expected}"
            )));
        }
        Ok(())
    }

    pub fn epoch(&self) -> Result<usize> {
        let t = self.state_entry("epoch")?;
        Ok(t.2[0] as usize)
    }

    pub fn restore_optimizer(&self) -> Result<AdamState> {
        let mut opt = AdamState::new();
        opt.step = self.state_entry("opt.step")?.2[0] as u64;
        for (name, _, data) in &self.state {
            if let Some(plain) = name.strip_prefix("opt.m_hi.") {
                let lo = &self.state_entry(&format!("opt.m_lo.{plain}"))?.2;
                opt.m.insert(plain.to_string(), join_f64(data, lo));
            } else if let Some(plain) = name.strip_prefix("opt.v_hi.") {
                let lo = &self.state_entry(&format!("opt.v_lo.{plain}"))?.2;
                opt.v.insert(plain.to_string(), join_f64(data, lo));
            }
        }
        Ok(opt)
    }

    pub fn restore_rng(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed_f = &self.state_entry("rng.seed")?.2;
        let pos_f = &self.state_entry("rng.word_pos")?.2;
        if seed_f.len() != 32 || pos_f.len() != 16 {
            return Err(Error::Checkpoint("malformed rng state".into()));
        }
        let mut seed = [0u8; 32];
        for (b, f) in seed.iter_mut().zip(seed_f) {
            *b = *f as u8;
        }
        let mut pos = [0u8; 16];
        for (b, f) in pos.iter_mut().zip(pos_f) {
            *b = *f as u8;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos));
        Ok(rng)
    }

    fn state_entry(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f32>)> {
        self.state
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing state entry `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        write_table(&mut w, &self.tensors)?;
        write_table(&mut w, &self.state)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)
            .map_err(|_| Error::Checkpoint("truncated config".into()))?;
        let config: EDUNetConfig = serde_json::from_slice(&cfg_bytes)?;
        let tensors = read_table(&mut r)?;
        let state = read_table(&mut r)?;
        Ok(Checkpoint {
            config,
            tensors,
            state,
        })
    }
}

/// Pack each f64 bit pattern into two f32 slots (upper/lower 32 bits), so
/// the round trip through the f32 table format is exact.
fn split_f64(xs: &[f64]) -> (Vec<f32>, Vec<f32>) {
    let mut hi = Vec::with_capacity(xs.len());
    let mut lo = Vec::with_capacity(xs.len());
    for x in xs {
        let bits = x.to_bits();
        hi.push(f32::from_bits((bits >> 32) as u32));
        lo.push(f32::from_bits(bits as u32));
    }
    (hi, lo)
}

fn join_f64(hi: &[f32], lo: &[f32]) -> Vec<f64> {
    hi.iter()
        .zip(lo)
        .map(|(h, l)| f64::from_bits(((h.to_bits() as u64) << 32) | l.to_bits() as u64))
        .collect()
}

fn write_table<W: Write>(w: &mut W, table: &TensorTable) -> Result<()> {
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, shape, data) in table {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Checkpoint(format!(
                "`{name}`: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for d in shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_table<R: Read>(r: &mut R) -> Result<TensorTable> {
    let count = read_u32(r)? as usize;
    let mut table = Vec::with_capacity(count);
    let mut seen = IndexMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| Error::Checkpoint("truncated tensor rank".into()))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            r.read_exact(&mut d)
                .map_err(|_| Error::Checkpoint("truncated tensor dims".into()))?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated tensor payload".into()))?;
            data.push(f32::from_le_bytes(buf));
        }
        table.push((name, shape, data));
    }
    Ok(table)
}
