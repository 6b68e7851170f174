//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFLW" | version u32 | count u32 |
//!   count x ( name_len u32 | name utf-8 | rank u32 | extents u64[rank] | f64[numel] )
//! ```
//!
//! Tensors are written in sorted name order, so identical contents always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFLW";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(sorted.len() as u32)?;
    for (name, t) in sorted {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &e in t.shape() {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(format!("checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(fmt)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(fmt)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("tensor name is not utf-8: {e}")))?;
        let rank = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(fmt)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(fmt)?;
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensors(&mut w, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataMissing(format!("{}", path.display())),
        _ => Error::io(path, e),
    })?;
    read_tensors(&mut BufReader::new(f))
}
