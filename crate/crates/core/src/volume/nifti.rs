//! Minimal single-file little-endian NIfTI-1 (`.nii`) reader and writer.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{OrientationMeta, Volume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// On-disk sample type for [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDtype {
    F32,
    F64,
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataMissing(format!("{}", path.display())),
        _ => Error::io(path, e),
    })?;
    parse_nifti(&bytes)
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::BadMagic(format!(
            "file holds {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let h = &bytes[..HEADER_SIZE];
    let sizeof_hdr = LittleEndian::read_i32(&h[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::UnsupportedDatatype(
                "big-endian NIfTI files are not supported".into(),
            ));
        }
        return Err(Error::BadMagic(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &h[344..348] != b"n+1\0" {
        return Err(Error::BadMagic(format!(
            "magic {:?}, expected single-file \"n+1\\0\"",
            &h[344..348]
        )));
    }
    let mut dim = [0i16; 8];
    LittleEndian::read_i16_into(&h[40..56], &mut dim);
    if dim[0] != 3 {
        return Err(Error::UnsupportedDims(dim[0]));
    }
    let datatype = LittleEndian::read_i16(&h[70..72]);
    let mut pixdim = [0f32; 8];
    LittleEndian::read_f32_into(&h[76..108], &mut pixdim);
    let vox_offset = LittleEndian::read_f32(&h[108..112]) as usize;
    let slope = LittleEndian::read_f32(&h[112..116]) as f64;
    let inter = LittleEndian::read_f32(&h[116..120]) as f64;

    let extents = [dim[1], dim[2], dim[3]].map(|d| d.max(0) as usize);
    let n: usize = extents.iter().product();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::UnsupportedDatatype(format!("NIfTI datatype code {other}")))
        }
    };
    if vox_offset < VOX_OFFSET || bytes.len() < vox_offset + n * width {
        return Err(Error::Format(format!(
            "voxel payload truncated: offset {vox_offset}, need {} bytes",
            n * width
        )));
    }
    let payload = &bytes[vox_offset..vox_offset + n * width];
    let mut raw = vec![0.0f64; n];
    let mut cur = Cursor::new(payload);
    let io = |e: std::io::Error| Error::Format(e.to_string());
    for v in raw.iter_mut() {
        *v = match datatype {
            DT_UINT8 => cur.read_u8().map_err(io)? as f64,
            DT_INT16 => cur.read_i16::<LittleEndian>().map_err(io)? as f64,
            DT_INT32 => cur.read_i32::<LittleEndian>().map_err(io)? as f64,
            DT_FLOAT32 => cur.read_f32::<LittleEndian>().map_err(io)? as f64,
            _ => cur.read_f64::<LittleEndian>().map_err(io)?,
        };
    }
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        raw.iter_mut().for_each(|v| *v = slope * *v + inter);
    }
    // disk order has dim[1] fastest; ours has the last extent fastest
    let [d1, d2, d3] = extents;
    let mut data = vec![0.0; n];
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                data[(i * d2 + j) * d3 + k] = raw[i + d1 * (j + d2 * k)];
            }
        }
    }
    let spacing = [pixdim[1], pixdim[2], pixdim[3]].map(|s| {
        let s = s.abs() as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let mut vol = Volume::new(extents, spacing, data)?;
    let mut quatern = [0f32; 6];
    LittleEndian::read_f32_into(&h[256..280], &mut quatern);
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        LittleEndian::read_f32_into(&h[280 + 16 * r..296 + 16 * r], row);
    }
    vol.orientation = Some(OrientationMeta {
        qform_code: LittleEndian::read_i16(&h[252..254]),
        sform_code: LittleEndian::read_i16(&h[254..256]),
        quatern,
        srow,
    });
    Ok(vol)
}

pub fn encode_nifti(v: &Volume, dtype: NiftiDtype) -> Result<Vec<u8>> {
    let ext = v.extents();
    if ext.iter().any(|&e| e > i16::MAX as usize) {
        return Err(Error::Format(format!("extents {ext:?} exceed NIfTI-1 limits")));
    }
    let (code, bitpix) = match dtype {
        NiftiDtype::F32 => (DT_FLOAT32, 32i16),
        NiftiDtype::F64 => (DT_FLOAT64, 64i16),
    };
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [3, ext[0] as i16, ext[1] as i16, ext[2] as i16, 1, 1, 1, 1];
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..72], code);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    let sp = v.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // mm
    let (lo, hi) = v.intensity_range();
    if lo.is_finite() && hi.is_finite() {
        LittleEndian::write_f32(&mut h[124..128], hi as f32);
        LittleEndian::write_f32(&mut h[128..132], lo as f32);
    }
    let descrip = b"latflow";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    let meta = v.orientation.unwrap_or_else(|| OrientationMeta {
        sform_code: 1,
        srow: [
            [sp[0] as f32, 0.0, 0.0, 0.0],
            [0.0, sp[1] as f32, 0.0, 0.0],
            [0.0, 0.0, sp[2] as f32, 0.0],
        ],
        ..Default::default()
    });
    LittleEndian::write_i16(&mut h[252..254], meta.qform_code);
    LittleEndian::write_i16(&mut h[254..256], meta.sform_code);
    LittleEndian::write_f32_into(&meta.quatern, &mut h[256..280]);
    for (r, row) in meta.srow.iter().enumerate() {
        LittleEndian::write_f32_into(row, &mut h[280 + 16 * r..296 + 16 * r]);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let [d1, d2, d3] = ext;
    let width = if dtype == NiftiDtype::F32 { 4 } else { 8 };
    h.reserve(v.len() * width);
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                let x = v.data()[(i * d2 + j) * d3 + k];
                match dtype {
                    NiftiDtype::F32 => h.write_f32::<LittleEndian>(x as f32),
                    NiftiDtype::F64 => h.write_f64::<LittleEndian>(x),
                }
                .expect("writing to a Vec cannot fail");
            }
        }
    }
    Ok(h)
}

pub fn write_nifti(v: &Volume, path: &Path, dtype: NiftiDtype) -> Result<()> {
    let bytes = encode_nifti(v, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
