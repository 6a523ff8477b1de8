//! CMRC container: magic `CMRC`, `u32` LE version, `u64` LE header length,
//! a UTF-8 JSON header and a payload of contiguous little-endian arrays.
//!
//! Each header entry records name, dtype, shape, payload offset, byte size
//! and the CRC32 of the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CMRC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container: need {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("arrays {0:?} and {1:?} overlap in the payload")]
    Overlap(String, String),
    #[error("checksum mismatch in array {0:?}")]
    ChecksumMismatch(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("array {0:?} not found")]
    Missing(String),
    #[error("array {name:?} has dtype {actual}, expected {expected}")]
    WrongDtype { name: String, expected: &'static str, actual: &'static str },
}

/// Array of one of the supported element types.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
    I64(ArrayD<i64>),
}

macro_rules! accessor {
    ($fn:ident, $variant:ident, $t:ty) => {
        pub fn $fn(&self) -> Option<&ArrayD<$t>> {
            match self {
                ArrayData::$variant(a) => Some(a),
                _ => None,
            }
        }
    };
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
            ArrayData::I64(_) => "i64",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
            ArrayData::I64(a) => a.shape(),
        }
    }

    accessor!(as_f32, F32, f32);
    accessor!(as_f64, F64, f64);
    accessor!(as_u8, U8, u8);
    accessor!(as_i64, I64, i64);

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ArrayData::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ArrayData::U8(a) => a.iter().copied().collect(),
            ArrayData::I64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: &str, shape: &[usize], bytes: &[u8]) -> Result<Self, ContainerError> {
        let bad = |e: ndarray::ShapeError| ContainerError::BadHeader(e.to_string());
        let shape = IxDyn(shape);
        Ok(match dtype {
            "f32" => ArrayData::F32(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(bad)?,
            ),
            "f64" => ArrayData::F64(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(bad)?,
            ),
            "u8" => ArrayData::U8(ArrayD::from_shape_vec(shape, bytes.to_vec()).map_err(bad)?),
            "i64" => ArrayData::I64(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(bad)?,
            ),
            other => return Err(ContainerError::BadHeader(format!("unsupported dtype {other:?}"))),
        })
    }
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" | "i64" => Some(8),
        "u8" => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arrays: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: BTreeMap<String, ArrayData>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Self { arrays: BTreeMap::new(), meta: serde_json::Value::Null }
    }

    pub fn insert(&mut self, name: impl Into<String>, a: ArrayData) {
        self.arrays.insert(name.into(), a);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayData, ContainerError> {
        self.arrays.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>, ContainerError> {
        let a = self.get(name)?;
        a.as_f32().ok_or(ContainerError::WrongDtype { name: name.into(), expected: "f32", actual: a.dtype() })
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>, ContainerError> {
        let a = self.get(name)?;
        a.as_f64().ok_or(ContainerError::WrongDtype { name: name.into(), expected: "f64", actual: a.dtype() })
    }

    pub fn u8(&self, name: &str) -> Result<&ArrayD<u8>, ContainerError> {
        let a = self.get(name)?;
        a.as_u8().ok_or(ContainerError::WrongDtype { name: name.into(), expected: "u8", actual: a.dtype() })
    }

    pub fn i64(&self, name: &str) -> Result<&ArrayD<i64>, ContainerError> {
        let a = self.get(name)?;
        a.as_i64().ok_or(ContainerError::WrongDtype { name: name.into(), expected: "i64", actual: a.dtype() })
    }
}

/// Serialise to bytes.
pub fn encode(c: &Container) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, a) in &c.arrays {
        let bytes = a.to_le_bytes();
        entries.push(Entry {
            name: name.clone(),
            dtype: a.dtype().to_string(),
            shape: a.shape().to_vec(),
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&Header { arrays: entries, meta: c.meta.clone() }).expect("header serialises");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Result of a structural parse, with arrays whose checksum did not match.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub container: Container,
    pub checksum_failures: Vec<String>,
}

/// Parse bytes, validating structure but reporting checksum failures instead of erroring.
pub fn inspect(bytes: &[u8]) -> Result<Inspection, ContainerError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(ContainerError::Truncated { needed: PREAMBLE as u64, actual });
    }
    if &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic(bytes[..4].to_vec()));
    }
    if bytes.len() < PREAMBLE {
        return Err(ContainerError::Truncated { needed: PREAMBLE as u64, actual });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = (PREAMBLE as u64).checked_add(header_len).ok_or_else(|| ContainerError::BadHeader("header length overflow".into()))?;
    if payload_start > actual {
        return Err(ContainerError::Truncated { needed: payload_start, actual });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start as usize])
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let payload = &bytes[payload_start as usize..];

    let mut declared = 0u64;
    for e in &header.arrays {
        let size = dtype_size(&e.dtype).ok_or_else(|| ContainerError::BadHeader(format!("unsupported dtype {:?}", e.dtype)))?;
        let expect = e.shape.iter().product::<usize>() as u64 * size as u64;
        if expect != e.nbytes {
            return Err(ContainerError::BadHeader(format!("{}: nbytes {} does not match shape", e.name, e.nbytes)));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| ContainerError::BadHeader("offset overflow".into()))?;
        if end > payload.len() as u64 {
            return Err(ContainerError::Truncated { needed: payload_start + end, actual });
        }
        declared += e.nbytes;
    }
    let mut order: Vec<&Entry> = header.arrays.iter().collect();
    order.sort_by_key(|e| e.offset);
    for w in order.windows(2) {
        if w[0].offset + w[0].nbytes > w[1].offset {
            return Err(ContainerError::Overlap(w[0].name.clone(), w[1].name.clone()));
        }
    }
    if declared != payload.len() as u64 {
        return Err(ContainerError::BadHeader(format!("payload has {} bytes, arrays declare {declared}", payload.len())));
    }

    let mut container = Container { arrays: BTreeMap::new(), meta: header.meta };
    let mut checksum_failures = Vec::new();
    for e in &header.arrays {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        if crc32fast::hash(raw) != e.crc32 {
            checksum_failures.push(e.name.clone());
        }
        if container.arrays.insert(e.name.clone(), ArrayData::from_le_bytes(&e.dtype, &e.shape, raw)?).is_some() {
            return Err(ContainerError::BadHeader(format!("duplicate array name {:?}", e.name)));
        }
    }
    Ok(Inspection { container, checksum_failures })
}

pub fn decode(bytes: &[u8]) -> Result<Container, ContainerError> {
    let ins = inspect(bytes)?;
    match ins.checksum_failures.into_iter().next() {
        Some(name) => Err(ContainerError::ChecksumMismatch(name)),
        None => Ok(ins.container),
    }
}

/// Write atomically: a temp file in the target directory renamed into place.
pub fn write_container(c: &Container, path: &Path) -> Result<(), ContainerError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode(c))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ContainerError::Io(e.error))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bitwise CRC32 (IEEE, reflected) used as an independent reference.
    fn crc32_reference(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in data {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            }
        }
        !crc
    }

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a", ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, f32::MIN, 0.0, 7.0]).unwrap()));
        c.insert("b", ArrayData::U8(ArrayD::from_shape_vec(IxDyn(&[4]), vec![0, 1, 2, 255]).unwrap()));
        c.insert("c", ArrayData::I64(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![i64::MIN, 42]).unwrap()));
        c.meta = serde_json::json!({"id": "x"});
        c
    }

    fn payload_start(bytes: &[u8]) -> usize {
        PREAMBLE + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
    }

    #[test]
    fn crc_matches_reference() {
        assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
        let bytes = encode(&sample());
        let h: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start(&bytes)]).unwrap();
        let p = &bytes[payload_start(&bytes)..];
        for e in h.arrays {
            assert_eq!(e.crc32, crc32_reference(&p[e.offset as usize..(e.offset + e.nbytes) as usize]));
        }
    }

    #[test]
    fn file_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cmrc");
        write_container(&sample(), &p).unwrap();
        assert_eq!(read_container(&p).unwrap(), sample());
        let empty = Container::new();
        write_container(&empty, &p).unwrap();
        assert!(read_container(&p).unwrap().arrays.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "no temp files left behind");
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ContainerError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(ContainerError::UnsupportedVersion(9))));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(ContainerError::Truncated { .. })));
        assert!(matches!(decode(&good[..10]), Err(ContainerError::Truncated { .. })));

        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        let ins = inspect(&bad).unwrap();
        assert_eq!(ins.checksum_failures, vec!["c".to_string()]);
        assert!(matches!(decode(&bad), Err(ContainerError::ChecksumMismatch(n)) if n == "c"));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let good = encode(&sample());
        let start = payload_start(&good);
        let mut h: Header = serde_json::from_slice(&good[PREAMBLE..start]).unwrap();
        h.arrays[1].offset = 0;
        let header = serde_json::to_vec(&h).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&good[start..]);
        assert!(matches!(decode(&bytes), Err(ContainerError::Overlap(..))));
    }

    proptest! {
        #[test]
        fn round_trip_every_dtype(
            f in proptest::collection::vec(any::<f32>(), 0..40),
            d in proptest::collection::vec(any::<f64>(), 0..40),
            u in proptest::collection::vec(any::<u8>(), 0..40),
            i in proptest::collection::vec(any::<i64>(), 0..40),
        ) {
            let mut c = Container::new();
            c.insert("f", ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&[f.len()]), f).unwrap()));
            c.insert("d", ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&[d.len(), 1]), d).unwrap()));
            c.insert("u", ArrayData::U8(ArrayD::from_shape_vec(IxDyn(&[u.len()]), u).unwrap()));
            c.insert("i", ArrayData::I64(ArrayD::from_shape_vec(IxDyn(&[1, i.len()]), i).unwrap()));
            let back = decode(&encode(&c)).unwrap();
            // compare bit patterns so NaNs round-trip too
            let bits = |a: &ArrayData| encode(&{ let mut x = Container::new(); x.insert("k", a.clone()); x });
            for (k, v) in &c.arrays {
                prop_assert_eq!(bits(v), bits(&back.arrays[k]));
            }
        }
    }
}
