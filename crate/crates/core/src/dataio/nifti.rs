//! Minimal NIfTI-1 reader: single-file, uncompressed, little-endian, f32 or i16.
//! Anything else is reported as an error.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn, ShapeBuilder};
use thiserror::Error;

const HEADER_SIZE: usize = 348;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported NIfTI feature: {0}")]
    Unsupported(String),
    #[error("malformed NIfTI file: {0}")]
    Malformed(String),
}

/// Image data (axes in file order, x fastest) and per-axis spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub data: ArrayD<f32>,
    pub spacing: Vec<f64>,
}

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(NiftiError::Unsupported("gzip-compressed file".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Malformed(format!("{} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(NiftiError::Unsupported("big-endian file".into()));
        }
        return Err(NiftiError::Malformed(format!("sizeof_hdr {sizeof_hdr}")));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::Unsupported("two-file (.hdr/.img) layout".into())),
        m => return Err(NiftiError::Malformed(format!("magic {m:?}"))),
    }
    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::Malformed(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let dims: Vec<usize> = (1..=ndim)
        .map(|i| {
            let d = i16_at(bytes, 40 + 2 * i);
            if d < 1 {
                Err(NiftiError::Malformed(format!("dim[{i}] = {d}")))
            } else {
                Ok(d as usize)
            }
        })
        .collect::<Result<_, _>>()?;
    let spacing: Vec<f64> = (1..=ndim).map(|i| f32_at(bytes, 76 + 4 * i).abs() as f64).collect();
    let datatype = i16_at(bytes, 70);
    let vox_offset = f32_at(bytes, 108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(NiftiError::Malformed(format!("vox_offset {vox_offset}")));
    }
    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);
    let n: usize = dims.iter().product();
    let start = vox_offset as usize;
    let (elem, conv): (usize, fn(&[u8]) -> f32) = match datatype {
        16 => (4, |c| f32::from_le_bytes(c.try_into().unwrap())),
        4 => (2, |c| i16::from_le_bytes(c.try_into().unwrap()) as f32),
        other => return Err(NiftiError::Unsupported(format!("datatype code {other}"))),
    };
    let end = start + n * elem;
    if bytes.len() < end {
        return Err(NiftiError::Malformed(format!("data needs {end} bytes, file has {}", bytes.len())));
    }
    let mut vals: Vec<f32> = bytes[start..end].chunks_exact(elem).map(conv).collect();
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        vals.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let data = ArrayD::from_shape_vec(IxDyn(&dims).f(), vals)
        .map_err(|e| NiftiError::Malformed(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok(NiftiImage { data, spacing })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage, NiftiError> {
    parse_nifti(&fs::read(path)?)
}
