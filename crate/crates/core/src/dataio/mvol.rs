//! MVOL container: 8-byte magic `MVOL\0001`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian voxel payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelMap, Volume};
use crate::error::{Error, MvolError, Result};

pub const MAGIC: &[u8; 8] = b"MVOL\x00001";

/// Upper bound on the JSON header size accepted when reading.
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    extents: [usize; 3],
    spacing: [f64; 3],
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_labels: Option<usize>,
}

/// Decoded content of an MVOL file.
#[derive(Debug, Clone, PartialEq)]
pub enum Mvol {
    Image(Volume),
    Labels(LabelMap),
}

fn bad_header(detail: impl Into<String>) -> MvolError {
    MvolError::BadHeader { detail: detail.into() }
}

fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = Header {
        dtype: "f32".into(),
        extents: v.extents(),
        spacing: v.spacing(),
        kind: "image".into(),
        num_labels: None,
    };
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    encode(&header, &payload)
}

pub fn encode_labels(m: &LabelMap) -> Vec<u8> {
    let header = Header {
        dtype: "u8".into(),
        extents: m.extents(),
        spacing: m.spacing(),
        kind: "labels".into(),
        num_labels: Some(m.num_labels()),
    };
    encode(&header, m.labels())
}

pub fn decode(bytes: &[u8]) -> Result<Mvol, MvolError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MvolError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(MvolError::TruncatedHeader);
    }
    let len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    if len > MAX_HEADER {
        return Err(bad_header(format!("header length {len} exceeds {MAX_HEADER}")));
    }
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(MvolError::TruncatedHeader);
    }
    let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| bad_header(e.to_string()))?;
    let payload = &rest[len..];

    if header.extents.contains(&0) {
        return Err(bad_header(format!("zero extent in {:?}", header.extents)));
    }
    if header.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(bad_header(format!("spacing {:?} must be positive", header.spacing)));
    }
    let voxels = header
        .extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| bad_header("extent product overflows"))?;
    match (header.kind.as_str(), header.dtype.as_str()) {
        ("image", "f32") => {
            let expected = voxels * 4;
            if payload.len() != expected {
                return Err(MvolError::PayloadSizeMismatch {
                    expected,
                    found: payload.len(),
                });
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Mvol::Image(
                Volume::new(header.extents, header.spacing, data).map_err(|e| bad_header(e.to_string()))?,
            ))
        }
        ("labels", "u8") => {
            let num_labels = header
                .num_labels
                .ok_or_else(|| bad_header("label file without num_labels"))?;
            if !(1..=256).contains(&num_labels) {
                return Err(bad_header(format!("num_labels {num_labels} outside 1..=256")));
            }
            if payload.len() != voxels {
                return Err(MvolError::PayloadSizeMismatch {
                    expected: voxels,
                    found: payload.len(),
                });
            }
            if let Some(&value) = payload.iter().find(|&&v| v as usize >= num_labels) {
                return Err(MvolError::LabelOutOfRange { value, num_labels });
            }
            Ok(Mvol::Labels(LabelMap {
                extents: header.extents,
                spacing: header.spacing,
                labels: payload.to_vec(),
                num_labels,
            }))
        }
        (kind, dtype) => Err(bad_header(format!("unsupported kind/dtype pair {kind}/{dtype}"))),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::Io(e),
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match decode(&read_file(path.as_ref())?)? {
        Mvol::Image(v) => Ok(v),
        Mvol::Labels(_) => Err(MvolError::WrongKind {
            expected: "image",
            found: "labels".into(),
        }
        .into()),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match decode(&read_file(path.as_ref())?)? {
        Mvol::Labels(m) => Ok(m),
        Mvol::Image(_) => Err(MvolError::WrongKind {
            expected: "labels",
            found: "image".into(),
        }
        .into()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

pub fn write_labels(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(m))
}
