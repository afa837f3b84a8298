//! Binary checkpoint format.
//!
//! Layout, all integers little-endian, reals as f64 bit patterns:
//!   magic "CTXG" | version u32 | global_step u64
//!   | param count u64, then per parameter:
//!       name len u64, name bytes, rank u64, dims u64..., values f64...
//!   | optimizer count u64, then per optimizer group:
//!       name len u64, name bytes, adam step u64, param count u64,
//!       then per parameter: store index u64, len u64, m f64..., v f64...
//!   | config text (len u64, UTF-8) | vocabulary text (len u64, UTF-8)
//!   | fnv1a64 checksum over every preceding byte, u64
//!
//! The encoding is canonical (parameters in store order, derived value
//! counts), so encode(read(encode(x))) is byte-identical to encode(x).

use crate::rng::fnv1a64;
use crate::{io_err, Error, Result};
use autodiff::{OptimizerState, ParamStore};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CTXG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// One optimizer group: per-parameter first and second moments keyed by the
/// parameter's index in the store, plus the shared Adam step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptEntry {
    pub name: String,
    pub step: u64,
    pub params: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub version: u32,
    pub global_step: u64,
    pub params: Vec<ParamEntry>,
    pub opts: Vec<OptEntry>,
    pub config_text: String,
    pub vocab_text: String,
}

impl CheckpointData {
    pub fn from_state(
        store: &ParamStore,
        opts: &[(&str, &OptimizerState)],
        global_step: u64,
        config_text: &str,
        vocab_text: &str,
    ) -> CheckpointData {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                ParamEntry {
                    name: store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                }
            })
            .collect();
        let opts = opts
            .iter()
            .map(|(name, state)| {
                let (ids, m, v, step) = state.raw();
                let params = ids
                    .iter()
                    .zip(m.iter().zip(v))
                    .map(|(id, (m, v))| (id.index(), m.clone(), v.clone()))
                    .collect();
                OptEntry { name: name.to_string(), step, params }
            })
            .collect();
        CheckpointData {
            version: VERSION,
            global_step,
            params,
            opts,
            config_text: config_text.to_string(),
            vocab_text: vocab_text.to_string(),
        }
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&data.version.to_le_bytes());
    put_u64(&mut buf, data.global_step);
    put_u64(&mut buf, data.params.len() as u64);
    for p in &data.params {
        put_str(&mut buf, &p.name);
        put_u64(&mut buf, p.shape.len() as u64);
        for &d in &p.shape {
            put_u64(&mut buf, d as u64);
        }
        debug_assert_eq!(p.values.len(), p.shape.iter().product::<usize>());
        put_f64s(&mut buf, &p.values);
    }
    put_u64(&mut buf, data.opts.len() as u64);
    for o in &data.opts {
        put_str(&mut buf, &o.name);
        put_u64(&mut buf, o.step);
        put_u64(&mut buf, o.params.len() as u64);
        for (idx, m, v) in &o.params {
            put_u64(&mut buf, *idx as u64);
            put_u64(&mut buf, m.len() as u64);
            put_f64s(&mut buf, m);
            debug_assert_eq!(m.len(), v.len());
            put_f64s(&mut buf, v);
        }
    }
    put_str(&mut buf, &data.config_text);
    put_str(&mut buf, &data.vocab_text);
    let sum = fnv1a64(&buf);
    put_u64(&mut buf, sum);
    buf
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length field; bounded by the bytes that remain, so a corrupt count
    /// cannot force an absurd allocation.
    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(ck(format!("{what} count {n} exceeds remaining bytes")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count("string")?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ck("string block is not UTF-8".to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    if bytes.len() < 4 + 4 + 8 + 8 {
        return Err(ck("file too short to be a checkpoint"));
    }
    if bytes[..4] != MAGIC {
        return Err(ck("bad magic bytes; not a checkpoint file"));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(ck(format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}")));
    }
    let mut rd = Rd { buf: body, pos: 4 };
    let version = u32::from_le_bytes(rd.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let global_step = rd.u64()?;
    let n_params = rd.count("parameter")?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = rd.str()?;
        let rank = rd.count("dimension")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let values = rd.f64s(len)?;
        params.push(ParamEntry { name, shape, values });
    }
    let n_opts = rd.count("optimizer")?;
    let mut opts = Vec::with_capacity(n_opts);
    for _ in 0..n_opts {
        let name = rd.str()?;
        let step = rd.u64()?;
        let n = rd.count("optimizer parameter")?;
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = rd.u64()? as usize;
            let len = rd.count("moment")?;
            let m = rd.f64s(len)?;
            let v = rd.f64s(len)?;
            group.push((idx, m, v));
        }
        opts.push(OptEntry { name, step, params: group });
    }
    let config_text = rd.str()?;
    let vocab_text = rd.str()?;
    if rd.pos != body.len() {
        return Err(ck(format!("{} trailing bytes after vocabulary block", body.len() - rd.pos)));
    }
    Ok(CheckpointData { version, global_step, params, opts, config_text, vocab_text })
}

/// Write via a temporary file and rename, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let bytes = encode(data);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}
