//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DAFKIT1" | u8 version
//! u32 header_len | header JSON {schedule, net, config}
//! u32 n_params   | n_params x (u32 name_len, name, u8 ndim, ndim x u32, f32 data)
//! u8 granularity | u32 dim | u32 n_entries | n_entries x (u32 key_len, key, u8 trainable, dim x f32)
//! ```

use serde::{Deserialize, Serialize};

use super::{ConceptKey, ConceptTable, EpsilonNet, Granularity, NetConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::schedule::{make_linear_schedule, NoiseSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DAFKIT1";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleParams,
    pub net: EpsilonNet,
    pub table: ConceptTable,
    /// Configuration the checkpoint was produced with, stored verbatim.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schedule: ScheduleParams,
    net: NetConfig,
    config: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serializes a checkpoint. Parameters and embeddings are stored as 32-bit floats.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    let header = serde_json::to_vec(&Header {
        schedule: ckpt.schedule,
        net: ckpt.net.config.clone(),
        config: ckpt.config.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);

    let params = &ckpt.net.params;
    put_u32(&mut out, params.entries.len());
    for e in &params.entries {
        put_str(&mut out, &e.name);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, &params.values[e.range()]);
    }

    let table = &ckpt.table;
    out.push(match table.granularity {
        Granularity::Pooled => 0,
        Granularity::Specific => 1,
    });
    put_u32(&mut out, table.dim);
    put_u32(&mut out, table.entries.len());
    for (key, entry) in &table.entries {
        put_str(&mut out, &key.to_string());
        out.push(entry.trainable as u8);
        put_f32s(&mut out, &entry.vector);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite value".into()));
        }
        Ok(values)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("missing DAFKIT1 magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut params = ParamSet::default();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = r.f32s(shape.iter().product())?;
        params.push(name, shape, values);
    }
    let net = EpsilonNet::from_params(header.net, params).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let granularity = match r.u8()? {
        0 => Granularity::Pooled,
        1 => Granularity::Specific,
        g => return Err(Error::Checkpoint(format!("unknown granularity tag {g}"))),
    };
    let dim = r.u32()?;
    if dim != net.config.cond_dim {
        return Err(Error::Checkpoint("concept width does not match the network".into()));
    }
    let mut table = ConceptTable {
        dim,
        granularity,
        entries: Default::default(),
    };
    for _ in 0..r.u32()? {
        let key: ConceptKey = r.string()?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let trainable = r.u8()? != 0;
        let vector = r.f32s(dim)?;
        table.insert(key, vector, trainable)?;
    }
    if !table.contains(ConceptKey::Null) {
        return Err(Error::Checkpoint("concept table lacks the null embedding".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        schedule: header.schedule,
        net,
        table,
        config: header.config,
    })
}
