//! IWV1 on-disk volume format: a JSON header sidecar plus a raw
//! little-endian payload, z-outermost row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Grid, ScalarVolume, SoftMask, VolumeGeometry};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "IWV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Mask,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl VolumeKind {
    pub fn dtype(self) -> Dtype {
        match self {
            VolumeKind::Scalar | VolumeKind::Soft => Dtype::F32,
            VolumeKind::Mask => Dtype::U8,
        }
    }
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iwv1Header {
    pub format: String,
    pub kind: VolumeKind,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: Dtype,
}

impl Iwv1Header {
    pub fn new(kind: VolumeKind, geometry: &VolumeGeometry) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            kind,
            dims: geometry.dims,
            spacing_mm: geometry.spacing_mm,
            origin_mm: geometry.origin_mm,
            dtype: kind.dtype(),
        }
    }

    pub fn geometry(&self) -> Result<VolumeGeometry> {
        VolumeGeometry::new(self.dims, self.spacing_mm, self.origin_mm)
    }

    /// Check the tag, the kind/dtype pairing and the geometry.
    pub fn validate(&self) -> Result<VolumeGeometry> {
        if self.format != FORMAT_TAG {
            return Err(Error::Version(self.format.clone()));
        }
        if self.kind.dtype() != self.dtype {
            return Err(Error::Header(format!(
                "kind {:?} requires dtype {:?}",
                self.kind,
                self.kind.dtype()
            )));
        }
        self.geometry()
    }

    /// Byte length of the raw payload this header describes.
    pub fn payload_len(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(self.dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Header("payload size overflows".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Soft(SoftMask),
    Mask(BinaryMask),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Scalar(_) => VolumeKind::Scalar,
            Volume::Soft(_) => VolumeKind::Soft,
            Volume::Mask(_) => VolumeKind::Mask,
        }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        match self {
            Volume::Scalar(g) | Volume::Soft(g) => &g.geometry,
            Volume::Mask(g) => &g.geometry,
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(g) => Ok(g),
            other => Err(Error::Header(format!("expected scalar, got {:?}", other.kind()))),
        }
    }

    pub fn into_soft(self) -> Result<SoftMask> {
        match self {
            Volume::Soft(g) => Ok(g),
            other => Err(Error::Header(format!("expected soft, got {:?}", other.kind()))),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        match self {
            Volume::Mask(g) => Ok(g),
            other => Err(Error::Header(format!("expected mask, got {:?}", other.kind()))),
        }
    }

    /// Raw payload bytes.
    pub fn payload(&self) -> Vec<u8> {
        match self {
            Volume::Scalar(g) | Volume::Soft(g) => {
                g.values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }
            Volume::Mask(g) => g.values.clone(),
        }
    }
}

/// Header JSON and raw payload for `volume`.
pub fn encode_iwv1(volume: &Volume) -> (Vec<u8>, Vec<u8>) {
    let header = Iwv1Header::new(volume.kind(), volume.geometry());
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    (json, volume.payload())
}

/// Decode a payload against an already parsed header.
pub fn decode_payload(header: &Iwv1Header, raw: &[u8]) -> Result<Volume> {
    let geometry = header.validate()?;
    let expected = header.payload_len()?;
    if raw.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: raw.len(),
        });
    }
    Ok(match header.kind {
        VolumeKind::Mask => {
            if let Some(v) = raw.iter().find(|&&v| v > 1) {
                return Err(Error::Payload(format!("mask value {v} is not binary")));
            }
            Volume::Mask(Grid::new(geometry, raw.to_vec())?)
        }
        kind => {
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if kind == VolumeKind::Soft {
                if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Payload(format!("soft value {v} outside [0, 1]")));
                }
                Volume::Soft(Grid::new(geometry, values)?)
            } else {
                Volume::Scalar(Grid::new(geometry, values)?)
            }
        }
    })
}

/// Parse an IWV1 header and its payload.
pub fn decode_iwv1(header_json: &[u8], raw: &[u8]) -> Result<Volume> {
    let header: Iwv1Header =
        serde_json::from_slice(header_json).map_err(|e| Error::Header(e.to_string()))?;
    decode_payload(&header, raw)
}

/// `<stem>.json` and `<stem>.raw` for a path given with or without either
/// extension.
pub fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let (json_path, raw_path) = stem_paths(path);
    let (json, raw) = encode_iwv1(volume);
    fs::write(json_path, json)?;
    fs::write(raw_path, raw)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (json_path, raw_path) = stem_paths(path);
    let json = fs::read(json_path)?;
    let raw = fs::read(raw_path)?;
    decode_iwv1(&json, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometry(dims: [usize; 3]) -> VolumeGeometry {
        VolumeGeometry::new(dims, [0.7, 1.0, 1.25], [-3.5, 0.0, 12.0]).unwrap()
    }

    #[test]
    fn file_round_trip_8_cubed() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry([8, 8, 8]);
        let vals = (0..g.len()).map(|i| (i as f32 * 0.37).sin() * 700.0).collect();
        let vol = Volume::Scalar(Grid::new(g, vals).unwrap());
        let path = dir.path().join("v");
        save_volume(&path, &vol).unwrap();
        assert_eq!(load_volume(&path).unwrap(), vol);
        assert_eq!(load_volume(&dir.path().join("v.json")).unwrap(), vol);
    }

    #[test]
    fn truncated_payload() {
        let vol = Volume::Mask(Grid::filled(geometry([2, 3, 4]), 1u8));
        let (h, mut raw) = encode_iwv1(&vol);
        raw.pop();
        assert!(matches!(
            decode_iwv1(&h, &raw),
            Err(Error::PayloadLength { expected: 24, found: 23 })
        ));
    }

    #[test]
    fn zero_dim_header_rejected() {
        let json = br#"{"format":"IWV1","kind":"mask","dims":[0,4,4],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"u8"}"#;
        assert!(matches!(decode_iwv1(json, &[]), Err(Error::Geometry(_))));
    }

    #[test]
    fn version_and_dtype_checked() {
        let v2 = br#"{"format":"IWV2","kind":"mask","dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"u8"}"#;
        assert!(matches!(decode_iwv1(v2, &[1]), Err(Error::Version(_))));
        let bad = br#"{"format":"IWV1","kind":"mask","dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32"}"#;
        assert!(matches!(decode_iwv1(bad, &[0; 4]), Err(Error::Header(_))));
        assert!(matches!(decode_iwv1(b"{", &[]), Err(Error::Header(_))));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let vol = Volume::Mask(Grid::filled(geometry([1, 1, 2]), 0u8));
        let (h, _) = encode_iwv1(&vol);
        assert!(matches!(decode_iwv1(&h, &[0, 2]), Err(Error::Payload(_))));
    }

    #[test]
    fn payload_bytes_are_little_endian() {
        let g = geometry([1, 1, 2]);
        let vol = Volume::Soft(Grid::new(g, vec![1.0, 0.5]).unwrap());
        assert_eq!(vol.payload(), vec![0, 0, 0x80, 0x3f, 0, 0, 0, 0x3f]);
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (
            1usize..5,
            1usize..5,
            1usize..5,
            0u8..3,
            prop::array::uniform3(0.01f64..10.0),
            prop::array::uniform3(-1e3f64..1e3),
            any::<u64>(),
        )
            .prop_map(|(nz, ny, nx, kind, sp, org, seed)| {
                let g = VolumeGeometry::new([nz, ny, nx], sp, org).unwrap();
                let mut s = seed;
                let mut next = || {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 33) as u32
                };
                match kind {
                    0 => Volume::Scalar(
                        Grid::new(g.clone(), (0..g.len()).map(|_| f32::from_bits(next() & 0x7f7f_ffff)).collect()).unwrap(),
                    ),
                    1 => Volume::Soft(
                        Grid::new(g.clone(), (0..g.len()).map(|_| (next() % 1001) as f32 / 1000.0).collect()).unwrap(),
                    ),
                    _ => Volume::Mask(
                        Grid::new(g.clone(), (0..g.len()).map(|_| (next() & 1) as u8).collect()).unwrap(),
                    ),
                }
            })
    }

    proptest! {
        #[test]
        fn encode_decode_identity(v in arb_volume()) {
            let (h, raw) = encode_iwv1(&v);
            let back = decode_iwv1(&h, &raw).unwrap();
            prop_assert_eq!(back.payload(), v.payload());
            prop_assert_eq!(back, v);
        }
    }
}
