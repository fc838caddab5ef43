//! The DBSM tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DBSM" | u32 version = 1 | u32 count
//! count × ( u16 name_len | name (UTF-8) | u8 role | u8 ndim | ndim × u32 extent | numel × f32 )
//! ```
//!
//! The role byte is 0 for trainable, 1 for frozen and 2 for buffer tensors.
//! Values are stored as `f32`; [`ParamStore`] values are already exactly
//! representable, so checkpoints round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dbsam_core::{ParamRole, ParamStore, Tensor};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DBSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: &str, role: ParamRole, tensor: Tensor) -> Self {
        Record {
            name: name.into(),
            role,
            tensor,
        }
    }
}

pub fn role_flag(role: ParamRole) -> u8 {
    match role {
        ParamRole::Trainable => 0,
        ParamRole::Frozen => 1,
        ParamRole::Buffer => 2,
    }
}

pub fn flag_role(flag: u8) -> Option<ParamRole> {
    match flag {
        0 => Some(ParamRole::Trainable),
        1 => Some(ParamRole::Frozen),
        2 => Some(ParamRole::Buffer),
        _ => None,
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_records(w: &mut impl Write, records: &[Record]) -> Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| format_err("too many tensors"))?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {}", r.name)))?;
        let ndim = u8::try_from(r.tensor.ndim()).map_err(|_| format_err(format!("{}: too many dimensions", r.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[role_flag(r.role), ndim])?;
        for &e in r.tensor.shape() {
            let e = u32::try_from(e).map_err(|_| format_err(format!("{}: extent {e} too large", r.name)))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * r.tensor.numel());
        for &v in r.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("truncated file"),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn take_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(format_err("truncated file"));
    }
    Ok(b)
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<Record>> {
    let magic = take::<4>(r)?;
    if magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected \"DBSM\"")));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let name = String::from_utf8(take_vec(r, len)?).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let [flag, ndim] = take::<2>(r)?;
        let role = flag_role(flag).ok_or_else(|| format_err(format!("{name}: unknown role flag {flag}")))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(r)?) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| format_err(format!("{name}: extents overflow")))?;
        let bytes = take_vec(r, 4 * numel)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| format_err(format!("{name}: {e}")))?;
        out.push(Record { name, role, tensor });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(format_err("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn to_bytes(records: &[Record]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    Ok(buf)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::at(path, e))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, records).map_err(|e| e.in_file(path))?;
    w.flush().map_err(|e| Error::at(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::at(path, e))?;
    read_records(&mut BufReader::new(f)).map_err(|e| e.in_file(path))
}

/// Every tensor of `store`, in registration order.
pub fn store_records(store: &ParamStore) -> Vec<Record> {
    store.iter().map(|(_, p)| Record::new(&p.name, p.role, p.value.clone())).collect()
}

/// The single tensor called `name` in a file.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| format_err(format!("missing tensor {name}")))
}
