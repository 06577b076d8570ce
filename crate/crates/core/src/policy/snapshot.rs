//! Binary parameter snapshots.
//!
//! Layout (little endian): 8-byte magic `VPDPARAM`, `u32` format version,
//! vocabulary descriptor (`u32` ordinary size, `u32` reserved count, then per
//! reserved token a `u8` role code and `u32` argument), `u8` emission code,
//! `u8` kind, then the payload. Tabular payload: `u64` entry count, then per
//! entry a `u32` key length, the key tokens as `u32`, and `vocab_total` logits
//! as raw `f64` bits. Linear payload: `u32` max length, `u64` weight count,
//! weights as raw `f64` bits. Floats are stored bit-for-bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::params::{FeatureSpec, GradientRecord, PolicyParams, Table};
use super::vocab::{Emission, Special, Vocabulary};

pub const MAGIC: &[u8; 8] = b"VPDPARAM";
pub const VERSION: u32 = 1;

const KIND_TABULAR: u8 = 0;
const KIND_LINEAR: u8 = 1;

fn write_table<W: Write>(w: &mut W, params: &PolicyParams, table: &Table) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let vocab = params.vocab();
    w.write_u32::<LE>(vocab.size())?;
    w.write_u32::<LE>(vocab.reserved().len() as u32)?;
    for role in vocab.reserved() {
        let (code, arg) = role.code();
        w.write_u8(code)?;
        w.write_u32::<LE>(arg)?;
    }
    w.write_u8(params.emission().code())?;
    match table {
        Table::Tabular(t) => {
            w.write_u8(KIND_TABULAR)?;
            w.write_u64::<LE>(t.len() as u64)?;
            for (k, logits) in t {
                w.write_u32::<LE>(k.len() as u32)?;
                for &tok in k {
                    w.write_u32::<LE>(tok)?;
                }
                for &x in logits {
                    w.write_u64::<LE>(x.to_bits())?;
                }
            }
        }
        Table::Linear(weights) => {
            w.write_u8(KIND_LINEAR)?;
            let spec = params.feature_spec().expect("linear policy without feature spec");
            w.write_u32::<LE>(spec.max_len as u32)?;
            w.write_u64::<LE>(weights.len() as u64)?;
            for &x in weights {
                w.write_u64::<LE>(x.to_bits())?;
            }
        }
    }
    Ok(())
}

fn read_table<R: Read>(r: &mut R) -> Result<PolicyParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic header".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let size = r.read_u32::<LE>()?;
    let n_reserved = r.read_u32::<LE>()?;
    let mut reserved = Vec::with_capacity(n_reserved as usize);
    for _ in 0..n_reserved {
        let code = r.read_u8()?;
        let arg = r.read_u32::<LE>()?;
        reserved.push(Special::from_code(code, arg)?);
    }
    let vocab = Vocabulary::with_reserved(size, reserved)
        .map_err(|e| Error::Format(format!("invalid vocabulary descriptor: {e}")))?;
    let emission = Emission::from_code(r.read_u8()?)?;
    let vt = vocab.total();
    match r.read_u8()? {
        KIND_TABULAR => {
            let n = r.read_u64::<LE>()?;
            let mut t = BTreeMap::new();
            for _ in 0..n {
                let klen = r.read_u32::<LE>()? as usize;
                let key = (0..klen).map(|_| r.read_u32::<LE>()).collect::<std::io::Result<Vec<_>>>()?;
                let logits = (0..vt)
                    .map(|_| r.read_u64::<LE>().map(f64::from_bits))
                    .collect::<std::io::Result<Vec<_>>>()?;
                t.insert(key, logits);
            }
            Ok(PolicyParams::from_parts(vocab, emission, None, Table::Tabular(t)))
        }
        KIND_LINEAR => {
            let max_len = r.read_u32::<LE>()? as usize;
            let n = r.read_u64::<LE>()? as usize;
            let spec = FeatureSpec { vocab_total: vt, max_len };
            if n != spec.len() * vt {
                return Err(Error::Format(format!(
                    "linear payload has {n} weights, feature map needs {}",
                    spec.len() * vt
                )));
            }
            let w = (0..n)
                .map(|_| r.read_u64::<LE>().map(f64::from_bits))
                .collect::<std::io::Result<Vec<_>>>()?;
            Ok(PolicyParams::from_parts(vocab, emission, Some(spec), Table::Linear(w)))
        }
        other => Err(Error::Format(format!("unknown policy kind {other}"))),
    }
}

impl PolicyParams {
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        write_table(w, self, &self.table)
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        read_table(r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let p = read_table(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(p)
    }
}

impl GradientRecord {
    /// Encode with the layout of `shape`'s snapshots (used for optimizer state).
    pub fn to_bytes(&self, shape: &PolicyParams) -> Vec<u8> {
        let mut buf = Vec::new();
        write_table(&mut buf, shape, &self.table).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(GradientRecord {
            table: PolicyParams::from_bytes(bytes)?.table,
        })
    }
}
