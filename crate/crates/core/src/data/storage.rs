//! Per-patch binary files.
//!
//! Layout, little-endian: magic `HSPC`, version `u16`, bands `u16`, height
//! `u16`, width `u16`, dtype `u8` (1 = fp16), metadata length `u32`, UTF-8
//! metadata, then the band-major payload.

use std::path::Path;

use half::f16;
use numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::synth::HsiCube;
use crate::sensor::{Level, SensorSpec};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSPC";
pub const VERSION: u16 = 1;
pub const DTYPE_F16: u8 = 1;
const FIXED_HEADER: usize = 4 + 2 + 2 + 2 + 2 + 1 + 4;

/// A stored patch: cube plus optional scene label.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub cube: HsiCube,
    pub label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    level: Level,
    wavelengths_um: Vec<f64>,
    fwhm_um: Vec<f64>,
    valid_fraction: f64,
    label: Option<usize>,
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds the format limit")))
}

pub fn encode_patch(p: &Patch) -> Result<Vec<u8>> {
    let cube = &p.cube;
    let s = cube.data.shape();
    if s.len() != 3 || s[0] != cube.sensor.band_count() {
        return Err(Error::Geometry(format!(
            "cube {s:?} does not match {} bands",
            cube.sensor.band_count()
        )));
    }
    if !cube.data.is_finite() {
        return Err(Error::NonFinite("patch payload".into()));
    }
    let meta = serde_json::to_string(&Meta {
        name: cube.sensor.name.clone(),
        level: cube.sensor.level,
        wavelengths_um: cube.sensor.wavelengths_um.clone(),
        fwhm_um: cube.sensor.fwhm_um.clone(),
        valid_fraction: cube.valid_fraction,
        label: p.label,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(FIXED_HEADER + meta.len() + 2 * cube.data.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [(s[0], "band count"), (s[1], "height"), (s[2], "width")] {
        out.extend_from_slice(&dim_u16(v, what)?.to_le_bytes());
    }
    out.push(DTYPE_F16);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for &v in cube.data.data() {
        out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
    }
    Ok(out)
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::Truncated { expected, found }
}

pub fn decode_patch(bytes: &[u8]) -> Result<Patch> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < FIXED_HEADER {
        return Err(truncated(FIXED_HEADER, bytes.len()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version.into()));
    }
    let (c, h, w) = (u16_at(6) as usize, u16_at(8) as usize, u16_at(10) as usize);
    let dtype = bytes[12];
    if dtype != DTYPE_F16 {
        return Err(Error::Config(format!("unsupported dtype code {dtype}")));
    }
    let meta_len = u32::from_le_bytes([bytes[13], bytes[14], bytes[15], bytes[16]]) as usize;
    let payload_start = FIXED_HEADER + meta_len;
    let expected = payload_start + 2 * c * h * w;
    if bytes.len() < expected {
        return Err(truncated(expected, bytes.len()));
    }
    let meta: Meta = std::str::from_utf8(&bytes[FIXED_HEADER..payload_start])
        .map_err(|e| Error::Config(format!("patch metadata: {e}")))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Config(format!("patch metadata: {e}"))))?;
    let sensor = SensorSpec {
        name: meta.name,
        level: meta.level,
        wavelengths_um: meta.wavelengths_um,
        fwhm_um: meta.fwhm_um,
    };
    if sensor.band_count() != c {
        return Err(Error::Config(format!(
            "metadata lists {} bands, header {c}",
            sensor.band_count()
        )));
    }
    let data = bytes[payload_start..expected]
        .chunks_exact(2)
        .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
        .collect();
    Ok(Patch {
        cube: HsiCube {
            sensor,
            data: Tensor::new([c, h, w], data)?,
            valid_fraction: meta.valid_fraction,
        },
        label: meta.label,
    })
}

pub fn write_patch(path: &Path, p: &Patch) -> Result<()> {
    std::fs::write(path, encode_patch(p)?)?;
    Ok(())
}

pub fn read_patch(path: &Path) -> Result<Patch> {
    decode_patch(&std::fs::read(path)?)
}

/// Rounds every value to the nearest fp16, as storage does.
pub fn quantize_f16(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| f16::from_f32(v).to_f32())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::builtin;

    fn patch() -> Patch {
        let spec = crate::sensor::subset(
            &builtin("AVIRIS-NG", Level::L1Radiance).unwrap(),
            crate::sensor::BandSelection::new(10, 3),
        )
        .unwrap();
        Patch {
            cube: HsiCube {
                sensor: spec,
                data: Tensor::from_fn([3, 2, 4], |i| i as f32 * 0.37 - 1.0),
                valid_fraction: 0.9,
            },
            label: Some(2),
        }
    }

    #[test]
    fn header_echoes_metadata() {
        let p = patch();
        let bytes = encode_patch(&p).unwrap();
        assert_eq!(&bytes[..4], b"HSPC");
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 3);
        let back = decode_patch(&bytes).unwrap();
        assert_eq!(back.cube.sensor, p.cube.sensor);
        assert_eq!(back.label, Some(2));
        assert_eq!(back.cube.data, quantize_f16(&p.cube.data));
    }

    #[test]
    fn corruption_is_typed() {
        let mut bytes = encode_patch(&patch()).unwrap();
        let len = bytes.len();
        assert!(matches!(decode_patch(&bytes[..len - 1]), Err(Error::Truncated { .. })));
        bytes[4] = 9;
        assert!(matches!(decode_patch(&bytes), Err(Error::UnsupportedVersion(9))));
        bytes[0] = b'X';
        let err = decode_patch(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }
}
