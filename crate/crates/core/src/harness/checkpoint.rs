//! Binary container for tickets, parameter sets and masks.
//!
//! Layout (little-endian): `"COLT"`, version `u16`, object kind `u8`, record
//! count `u32`, then per record: name length `u16`, UTF-8 name, kind tag `u8`,
//! rank `u8`, `rank` dims as `u64`, payload. The file ends with the CRC32 of
//! every preceding byte.

use std::path::Path;

use thiserror::Error;

use crate::models::{ModelSpec, Param, ParamKind, ParameterSet};
use crate::pruning::{BitField, Mask, MaskEntry, PruneError};
use crate::tensor::Tensor;
use crate::tickets::{Provenance, Ticket, TicketError};

pub const MAGIC: &[u8; 4] = b"COLT";
pub const VERSION: u16 = 1;

const KIND_TICKET: u8 = 1;
const KIND_PARAMS: u8 = 2;
const KIND_MASK: u8 = 3;

const TAG_CONV: u8 = 0x01;
const TAG_LINEAR: u8 = 0x02;
const TAG_BIAS: u8 = 0x03;
const TAG_NORM: u8 = 0x04;
/// Or-ed into a tensor tag for output-layer tensors.
const TAG_HEAD: u8 = 0x10;
/// Or-ed into a tensor tag for θ₀ snapshot records.
const TAG_INITIAL: u8 = 0x40;
const TAG_MASK_ELIGIBLE: u8 = 0x20;
const TAG_MASK_FROZEN: u8 = 0x21;
/// UTF-8 `key=value` lines.
const TAG_META: u8 = 0x30;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {0:02X?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u16 },
    #[error("checksum mismatch: stored {stored:08X}, computed {computed:08X}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated checkpoint: needed {needed} bytes, {have} available")]
    Truncated { needed: usize, have: usize },
    #[error("expected a {expected} checkpoint, found a {found} checkpoint")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ticket(#[from] TicketError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Ticket(Ticket),
    Params(ParameterSet),
    Mask(Mask),
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_TICKET => "ticket",
        KIND_PARAMS => "params",
        KIND_MASK => "mask",
        _ => "unknown",
    }
}

struct Record {
    name: String,
    tag: u8,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

fn param_tag(p: &Param) -> u8 {
    let base = match p.kind {
        ParamKind::Conv => TAG_CONV,
        ParamKind::Linear => TAG_LINEAR,
        ParamKind::Bias => TAG_BIAS,
        ParamKind::Norm => TAG_NORM,
    };
    if p.head {
        base | TAG_HEAD
    } else {
        base
    }
}

fn tensor_record(name: &str, tag: u8, t: &Tensor) -> Record {
    Record {
        name: name.to_string(),
        tag,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        payload: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn mask_record(e: &MaskEntry) -> Record {
    Record {
        name: e.name().to_string(),
        tag: if e.eligible() { TAG_MASK_ELIGIBLE } else { TAG_MASK_FROZEN },
        dims: vec![e.len() as u64],
        payload: e.bits().to_bytes(),
    }
}

fn meta_record(name: &str, pairs: &[(String, String)]) -> Record {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    Record {
        name: name.to_string(),
        tag: TAG_META,
        dims: vec![text.len() as u64],
        payload: text.into_bytes(),
    }
}

fn param_records(params: &ParameterSet, with_initial: bool) -> Vec<Record> {
    let mut out: Vec<Record> = params.iter().map(|p| tensor_record(&p.name, param_tag(p), &p.value)).collect();
    if let (true, Some(init)) = (with_initial, params.initial()) {
        for (p, t) in params.iter().zip(init) {
            out.push(tensor_record(&p.name, param_tag(p) | TAG_INITIAL, t));
        }
    }
    out
}

fn spec_pairs(spec: &ModelSpec) -> Vec<(String, String)> {
    [
        ("arch", spec.arch.as_str().to_string()),
        (
            "widths",
            spec.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        ),
        ("num_classes", spec.num_classes.to_string()),
        (
            "input",
            spec.input.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
        ),
        ("norm", spec.norm.as_str().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn spec_from_pairs(pairs: &[(String, String)]) -> Result<ModelSpec> {
    let get = |key: &str| {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| malformed(format!("model spec lacks `{key}`")))
    };
    let nums = |key: &str, sep: char| -> Result<Vec<usize>> {
        get(key)?
            .split(sep)
            .map(|s| s.parse().map_err(|_| malformed(format!("bad `{key}` in model spec"))))
            .collect()
    };
    let input = nums("input", 'x')?;
    let spec = ModelSpec {
        arch: get("arch")?.parse().map_err(|e| malformed(format!("{e}")))?,
        widths: nums("widths", ',')?,
        num_classes: get("num_classes")?
            .parse()
            .map_err(|_| malformed("bad `num_classes` in model spec"))?,
        input: input
            .try_into()
            .map_err(|_| malformed("model input must have three dimensions"))?,
        norm: get("norm")?.parse().map_err(|e| malformed(format!("{e}")))?,
    };
    spec.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(spec)
}

impl Checkpoint {
    fn kind(&self) -> u8 {
        match self {
            Checkpoint::Ticket(_) => KIND_TICKET,
            Checkpoint::Params(_) => KIND_PARAMS,
            Checkpoint::Mask(_) => KIND_MASK,
        }
    }

    fn records(&self) -> Vec<Record> {
        match self {
            Checkpoint::Ticket(t) => {
                let mut out = vec![
                    meta_record("spec", &spec_pairs(&t.spec)),
                    meta_record("provenance", &t.provenance.to_pairs()),
                ];
                out.extend(param_records(&t.init, false));
                out.extend(t.mask.entries().iter().map(mask_record));
                out
            }
            Checkpoint::Params(p) => param_records(p, true),
            Checkpoint::Mask(m) => m.entries().iter().map(mask_record).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for r in &records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.tag);
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 2 + 1 + 4;
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated {
                needed: header + 4,
                have: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        if bytes.len() < header + 4 {
            return Err(CheckpointError::Truncated {
                needed: header + 4,
                have: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let kind = body[6];
        let count = u32::from_le_bytes(body[7..11].try_into().expect("4 bytes")) as usize;
        let mut r = Reader { bytes: body, pos: header };
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            records.push(r.record()?);
        }
        if r.pos != body.len() {
            return Err(malformed(format!("{} trailing bytes after the last record", body.len() - r.pos)));
        }
        match kind {
            KIND_TICKET => decode_ticket(records).map(Checkpoint::Ticket),
            KIND_PARAMS => decode_params(records).map(Checkpoint::Params),
            KIND_MASK => decode_mask(records).map(Checkpoint::Mask),
            other => Err(malformed(format!("unknown object kind {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn found(&self) -> &'static str {
        kind_name(self.kind())
    }

    pub fn into_ticket(self) -> Result<Ticket> {
        match self {
            Checkpoint::Ticket(t) => Ok(t),
            other => Err(CheckpointError::WrongKind {
                expected: "ticket",
                found: other.found(),
            }),
        }
    }

    pub fn into_params(self) -> Result<ParameterSet> {
        match self {
            Checkpoint::Params(p) => Ok(p),
            other => Err(CheckpointError::WrongKind {
                expected: "params",
                found: other.found(),
            }),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Checkpoint::Mask(m) => Ok(m),
            other => Err(CheckpointError::WrongKind {
                expected: "mask",
                found: other.found(),
            }),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            CheckpointError::Truncated {
                needed: self.pos.saturating_add(n) + 4,
                have: self.bytes.len() + 4,
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn record(&mut self) -> Result<Record> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| malformed("record name is not UTF-8"))?;
        let tag = self.take(1)?[0];
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")));
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| malformed(format!("`{name}`: dimensions overflow")))?;
        let payload_len = match tag {
            TAG_MASK_ELIGIBLE | TAG_MASK_FROZEN => numel.div_ceil(8),
            TAG_META => numel,
            t if (t & !(TAG_HEAD | TAG_INITIAL)) <= TAG_NORM && (t & 0x0F) != 0 => numel
                .checked_mul(4)
                .ok_or_else(|| malformed(format!("`{name}`: dimensions overflow")))?,
            other => return Err(malformed(format!("`{name}`: unknown record tag 0x{other:02X}"))),
        };
        let payload = self.take(payload_len)?.to_vec();
        Ok(Record {
            name,
            tag,
            dims,
            payload,
        })
    }
}

fn is_tensor(tag: u8) -> bool {
    !matches!(tag, TAG_MASK_ELIGIBLE | TAG_MASK_FROZEN | TAG_META)
}

fn decode_tensor(r: &Record) -> Result<(Param, bool)> {
    let base = r.tag & !(TAG_HEAD | TAG_INITIAL);
    let kind = match base {
        TAG_CONV => ParamKind::Conv,
        TAG_LINEAR => ParamKind::Linear,
        TAG_BIAS => ParamKind::Bias,
        TAG_NORM => ParamKind::Norm,
        other => return Err(malformed(format!("`{}`: unknown tensor kind 0x{other:02X}", r.name))),
    };
    let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
    let data = r
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let value = Tensor::new(&shape, data).map_err(|e| malformed(format!("`{}`: {e}", r.name)))?;
    Ok((
        Param {
            name: r.name.clone(),
            kind,
            head: r.tag & TAG_HEAD != 0,
            value,
        },
        r.tag & TAG_INITIAL != 0,
    ))
}

fn decode_mask_entry(r: &Record) -> Result<MaskEntry> {
    let n = r.dims.first().copied().unwrap_or(0) as usize;
    if r.dims.len() != 1 {
        return Err(malformed(format!("mask `{}` must have rank 1", r.name)));
    }
    let bits = BitField::from_bytes(n, &r.payload)
        .ok_or_else(|| malformed(format!("mask `{}`: padding bits must be zero", r.name)))?;
    MaskEntry::new(r.name.clone(), bits, r.tag == TAG_MASK_ELIGIBLE).map_err(|e: PruneError| malformed(e.to_string()))
}

fn decode_meta(r: &Record) -> Result<Vec<(String, String)>> {
    let text = std::str::from_utf8(&r.payload).map_err(|_| malformed(format!("`{}` is not UTF-8", r.name)))?;
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| malformed(format!("`{}`: bad line `{l}`", r.name)))
        })
        .collect()
}

fn decode_params(records: Vec<Record>) -> Result<ParameterSet> {
    let mut params = Vec::new();
    let mut initial = Vec::new();
    for r in &records {
        if !is_tensor(r.tag) {
            return Err(malformed(format!("unexpected record `{}` in a params checkpoint", r.name)));
        }
        let (p, is_initial) = decode_tensor(r)?;
        if is_initial {
            initial.push(p);
        } else {
            if !initial.is_empty() {
                return Err(malformed("snapshot records must follow all parameter records"));
            }
            params.push(p);
        }
    }
    let initial = if initial.is_empty() {
        None
    } else {
        let aligned = initial.len() == params.len() && initial.iter().zip(&params).all(|(a, b)| a.name == b.name);
        if !aligned {
            return Err(malformed("snapshot records do not match the parameters"));
        }
        Some(initial.into_iter().map(|p| p.value).collect())
    };
    let mut set = ParameterSet::from_parts(params, initial).map_err(|e| malformed(e.to_string()))?;
    set.set_requires_grad(true);
    Ok(set)
}

fn decode_mask(records: Vec<Record>) -> Result<Mask> {
    records
        .iter()
        .map(|r| {
            if is_tensor(r.tag) || r.tag == TAG_META {
                Err(malformed(format!("unexpected record `{}` in a mask checkpoint", r.name)))
            } else {
                decode_mask_entry(r)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Mask::new)
}

fn decode_ticket(records: Vec<Record>) -> Result<Ticket> {
    let (mut spec, mut provenance) = (None, None);
    let (mut params, mut entries) = (Vec::new(), Vec::new());
    for r in &records {
        match r.tag {
            TAG_META if r.name == "spec" => spec = Some(spec_from_pairs(&decode_meta(r)?)?),
            TAG_META if r.name == "provenance" => provenance = Some(Provenance::from_pairs(&decode_meta(r)?)?),
            TAG_META => return Err(malformed(format!("unknown metadata record `{}`", r.name))),
            TAG_MASK_ELIGIBLE | TAG_MASK_FROZEN => entries.push(decode_mask_entry(r)?),
            _ => {
                let (p, is_initial) = decode_tensor(r)?;
                if is_initial {
                    return Err(malformed("ticket tensors are θ₀ already; snapshot records are not allowed"));
                }
                params.push(p);
            }
        }
    }
    let mut init = ParameterSet::new(params).with_snapshot();
    init.set_requires_grad(true);
    let ticket = Ticket {
        spec: spec.ok_or_else(|| malformed("ticket lacks a model spec"))?,
        mask: Mask::new(entries),
        init,
        provenance: provenance.ok_or_else(|| malformed("ticket lacks provenance"))?,
    };
    ticket.validate()?;
    Ok(ticket)
}
