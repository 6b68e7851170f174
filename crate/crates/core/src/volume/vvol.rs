//! `.vvol`: one JSON header line followed by the raw little-endian f64
//! payload in row-major (D, H, W) order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    format: String,
    extents: [usize; 3],
    spacing: [f64; 3],
    intensity_range: [f64; 2],
}

const FORMAT_TAG: &str = "vvol/1";

pub fn write_vvol<W: Write>(v: &Volume, w: &mut W) -> std::io::Result<()> {
    let (lo, hi) = v.intensity_range();
    let header = Header {
        format: FORMAT_TAG.into(),
        extents: v.extents(),
        spacing: v.spacing(),
        intensity_range: [lo, hi],
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for &x in v.data() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_vvol<R: BufRead>(r: &mut R) -> Result<Volume> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::Format(format!("vvol header: {e}")))?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::BadMagic(format!("vvol header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::BadMagic(format!("vvol format tag {:?}", header.format)));
    }
    let n: usize = header.extents.iter().product();
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|e| Error::Format(format!("vvol payload: {e}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after vvol payload".into()));
    }
    let [lo, hi] = header.intensity_range;
    Ok(Volume::new(header.extents, header.spacing, data)?.with_intensity_range(lo, hi))
}

pub fn save_vvol(v: &Volume, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_vvol(v, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vvol(path: &Path) -> Result<Volume> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataMissing(format!("{}", path.display())),
        _ => Error::io(path, e),
    })?;
    read_vvol(&mut BufReader::new(f))
}
