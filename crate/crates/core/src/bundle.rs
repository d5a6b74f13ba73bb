//! `.trgb` tensor bundle container.
//!
//! Layout of a bundle file:
//!
//! ```text
//! offset 0   "TRGB"                 magic
//! offset 4   u16 LE                 format version (1)
//! offset 6   u32 LE                 header length H (bytes of JSON)
//! offset 10  H bytes                JSON header {"name","dtype","shape"}
//!            zero padding
//!            u32 LE                 CRC-32 of every preceding byte of the block
//! offset B   payload                row-major, little-endian elements
//! ```
//!
//! The header block length `B` is the smallest multiple of 64 that holds the
//! preamble, the JSON header and the 4-byte checksum trailer, so payloads
//! always start at a 64-byte aligned offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TRGB";
pub const FORMAT_VERSION: u16 = 1;
pub const BLOCK_ALIGN: usize = 64;
pub const MAX_NAME_LEN: usize = 64;
pub const MAX_RANK: usize = 4;

const PREAMBLE_LEN: usize = 10;
const CRC_LEN: usize = 4;
/// Upper bound on the JSON header, far above anything a valid bundle produces.
const MAX_HEADER_LEN: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad magic: expected \"TRGB\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    HeaderChecksum { stored: u32, computed: u32 },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
        }
    }
}

/// Element buffer of a bundle.
///
/// Equality is bitwise, so NaN payloads compare equal to themselves.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

/// A named, typed tensor of rank 1 to 4. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

impl TensorBundle {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self, BundleError> {
        let bundle = Self {
            name: name.into(),
            shape,
            data,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BundleError> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn from_i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Result<Self, BundleError> {
        Self::new(name, shape, TensorData::I64(data))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I64(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Byte length of the payload section.
    pub fn payload_len(&self) -> usize {
        self.data.len() * self.dtype().width()
    }

    fn validate(&self) -> Result<(), BundleError> {
        validate_name(&self.name).map_err(BundleError::Invalid)?;
        let count = element_count(&self.shape).map_err(BundleError::Invalid)?;
        if count != self.data.len() {
            return Err(BundleError::Invalid(format!(
                "shape {:?} holds {} elements but data has {}",
                self.shape,
                count,
                self.data.len()
            )));
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<(), String> {
    if !name.is_ascii() {
        return Err(format!("name {name:?} is not ASCII"));
    }
    if name.len() > MAX_NAME_LEN {
        return Err(format!("name is {} bytes, limit {MAX_NAME_LEN}", name.len()));
    }
    Ok(())
}

fn element_count(shape: &[usize]) -> Result<usize, String> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(format!("rank {} outside 1..={MAX_RANK}", shape.len()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format!("shape {shape:?} overflows"))
}

fn block_len(header_len: usize) -> usize {
    (PREAMBLE_LEN + header_len + CRC_LEN).div_ceil(BLOCK_ALIGN) * BLOCK_ALIGN
}

/// Serializes `bundle` into `sink`, returning the number of bytes written.
pub fn write_bundle<W: Write>(bundle: &TensorBundle, mut sink: W) -> Result<u64, BundleError> {
    bundle.validate()?;
    let header = serde_json::to_vec(&Header {
        name: bundle.name.clone(),
        dtype: bundle.dtype(),
        shape: bundle.shape.clone(),
    })
    .map_err(|e| BundleError::Invalid(e.to_string()))?;

    let block = block_len(header.len());
    let mut head = Vec::with_capacity(block);
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    head.extend_from_slice(&(header.len() as u32).to_le_bytes());
    head.extend_from_slice(&header);
    head.resize(block - CRC_LEN, 0);
    let crc = crc32fast::hash(&head);
    head.extend_from_slice(&crc.to_le_bytes());

    let mut payload = Vec::with_capacity(bundle.payload_len());
    match &bundle.data {
        TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::I64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
    }

    sink.write_all(&head)?;
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok((head.len() + payload.len()) as u64)
}

/// Parses and validates one bundle, consuming `source` to its end.
pub fn read_bundle<R: Read>(mut source: R) -> Result<TensorBundle, BundleError> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    read_header_bytes(&mut source, &mut preamble)?;

    let magic: [u8; 4] = preamble[0..4].try_into().expect("4-byte slice");
    if &magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([preamble[4], preamble[5]]);
    if version != FORMAT_VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(preamble[6..10].try_into().expect("4-byte slice")) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(BundleError::MalformedHeader(format!(
            "header length {header_len} exceeds {MAX_HEADER_LEN}"
        )));
    }

    let block = block_len(header_len);
    let mut rest = vec![0u8; block - PREAMBLE_LEN];
    read_header_bytes(&mut source, &mut rest)?;
    let (json, tail) = rest.split_at(header_len);
    let (padding, crc_bytes) = tail.split_at(tail.len() - CRC_LEN);

    let header: Header = serde_json::from_slice(json).map_err(|e| BundleError::MalformedHeader(e.to_string()))?;
    validate_name(&header.name).map_err(BundleError::MalformedHeader)?;
    let count = element_count(&header.shape).map_err(BundleError::MalformedHeader)?;
    if padding.iter().any(|&b| b != 0) {
        return Err(BundleError::MalformedHeader("nonzero header padding".into()));
    }

    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4-byte slice"));
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&preamble);
    hasher.update(&rest[..rest.len() - CRC_LEN]);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(BundleError::HeaderChecksum { stored, computed });
    }

    let expected = count
        .checked_mul(header.dtype.width())
        .ok_or_else(|| BundleError::MalformedHeader("payload size overflows".into()))?;
    let mut payload = Vec::with_capacity(expected);
    source.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(BundleError::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }

    let data = match header.dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        ),
        DType::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
    };
    Ok(TensorBundle {
        name: header.name,
        shape: header.shape,
        data,
    })
}

fn read_header_bytes<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), BundleError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => BundleError::MalformedHeader("stream ends inside the header block".into()),
        _ => BundleError::Io(e),
    })
}

pub fn write_bundle_file(bundle: &TensorBundle, path: &Path) -> Result<u64, BundleError> {
    let file = File::create(path)?;
    write_bundle(bundle, BufWriter::new(file))
}

pub fn read_bundle_file(path: &Path) -> Result<TensorBundle, BundleError> {
    let file = File::open(path)?;
    read_bundle(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(bundle: &TensorBundle) -> Vec<u8> {
        let mut buf = Vec::new();
        let n = write_bundle(bundle, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        buf
    }

    /// Hand-assembles a file with a correct checksum around arbitrary header text.
    fn assemble(json: &str, payload: &[u8]) -> Vec<u8> {
        let block = block_len(json.len());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.resize(block - CRC_LEN, 0);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn two_element_f32_layout() {
        let b = TensorBundle::from_f32("q", vec![2], vec![0.0, 1.0]).unwrap();
        let bytes = encode(&b);
        assert_eq!(bytes.len(), 64 + 8);
        assert_eq!(&bytes[..4], b"TRGB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        let json = br#"{"name":"q","dtype":"f32","shape":[2]}"#;
        assert_eq!(&bytes[6..10], &(json.len() as u32).to_le_bytes());
        assert_eq!(&bytes[10..10 + json.len()], json);
        assert_eq!(&bytes[64..], &[0, 0, 0, 0, 0, 0, 0x80, 0x3F]);
    }

    #[test]
    fn empty_tensor() {
        let b = TensorBundle::from_f32("e", vec![0], vec![]).unwrap();
        let bytes = encode(&b);
        assert_eq!(bytes.len(), 64);
        let back = read_bundle(bytes.as_slice()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.payload_len(), 0);
    }

    #[test]
    fn i64_round_trip() {
        let b = TensorBundle::from_i64("idx", vec![2, 2], vec![-1, 0, i64::MAX, 7]).unwrap();
        assert_eq!(read_bundle(encode(&b).as_slice()).unwrap(), b);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&TensorBundle::from_f32("q", vec![1], vec![1.0]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_bundle(bytes.as_slice()), Err(BundleError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode(&TensorBundle::from_f32("q", vec![1], vec![1.0]).unwrap());
        bytes[4] = 2;
        assert!(matches!(
            read_bundle(bytes.as_slice()),
            Err(BundleError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = assemble(r#"{"name":"t","dtype":"f32","shape":[10]}"#, &[0u8; 36]);
        assert!(matches!(
            read_bundle(bytes.as_slice()),
            Err(BundleError::LengthMismatch {
                expected: 40,
                actual: 36
            })
        ));
    }

    #[test]
    fn oversized_payload() {
        let bytes = assemble(r#"{"name":"t","dtype":"i64","shape":[1]}"#, &[0u8; 9]);
        assert!(matches!(
            read_bundle(bytes.as_slice()),
            Err(BundleError::LengthMismatch { expected: 8, actual: 9 })
        ));
    }

    #[test]
    fn malformed_headers() {
        for json in [
            r#"{"name":"t","dtype":"f32","shape":[1]"#,
            r#"{"name":"t","dtype":"f16","shape":[1]}"#,
            r#"{"name":"t","dtype":"f32","shape":[]}"#,
            r#"{"name":"t","dtype":"f32","shape":[1,1,1,1,1]}"#,
            r#"{"name":"t","dtype":"f32"}"#,
            r#"{"name":"t","dtype":"f32","shape":[1],"extra":0}"#,
        ] {
            let bytes = assemble(json, &[0u8; 4]);
            assert!(
                matches!(read_bundle(bytes.as_slice()), Err(BundleError::MalformedHeader(_))),
                "{json}"
            );
        }
    }

    #[test]
    fn stream_ending_in_header() {
        let bytes = encode(&TensorBundle::from_f32("q", vec![1], vec![1.0]).unwrap());
        assert!(matches!(
            read_bundle(&bytes[..30]),
            Err(BundleError::MalformedHeader(_))
        ));
    }

    #[test]
    fn construction_rejects_invariant_violations() {
        assert!(TensorBundle::from_f32("x", vec![3], vec![1.0]).is_err());
        assert!(TensorBundle::from_f32("x", vec![], vec![]).is_err());
        assert!(TensorBundle::from_f32("x", vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(TensorBundle::from_f32("x".repeat(65), vec![1], vec![1.0]).is_err());
        assert!(TensorBundle::from_f32("é", vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn every_header_byte_corruption_is_detected() {
        let b = TensorBundle::from_f32("frame_embeddings", vec![0, 5], vec![]).unwrap();
        let bytes = encode(&b);
        for pos in 0..bytes.len() {
            for flip in [0x01u8, 0x20, 0x80, 0xFF] {
                let mut corrupt = bytes.clone();
                corrupt[pos] ^= flip;
                assert!(read_bundle(corrupt.as_slice()).is_err(), "byte {pos} ^ {flip:#x}");
            }
        }
    }
}
