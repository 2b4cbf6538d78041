//! Sensor metadata: band centers, band widths and processing level.
//!
//! Wavelengths and FWHM are kept in micrometers; nanometer inputs are
//! converted when a description file is loaded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    /// Calibrated at-sensor radiance.
    #[serde(rename = "L1")]
    L1Radiance,
    /// Atmospherically corrected surface reflectance.
    #[serde(rename = "L2")]
    L2Reflectance,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1Radiance => "L1",
            Level::L2Reflectance => "L2",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" | "l1_radiance" | "radiance" => Ok(Level::L1Radiance),
            "l2" | "l2_reflectance" | "reflectance" => Ok(Level::L2Reflectance),
            other => Err(Error::Sensor(format!("unknown processing level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub name: String,
    pub level: Level,
    pub wavelengths_um: Vec<f64>,
    pub fwhm_um: Vec<f64>,
}

/// Lower and upper bounds (µm, exclusive) for a plausible band center.
pub const WAVELENGTH_BOUNDS_UM: (f64, f64) = (0.2, 3.0);

impl SensorSpec {
    /// Uniform grid from `start_um` to `end_um` inclusive with constant FWHM.
    pub fn uniform(name: &str, level: Level, start_um: f64, end_um: f64, bands: usize, fwhm_um: f64) -> Self {
        let step = if bands > 1 {
            (end_um - start_um) / (bands - 1) as f64
        } else {
            0.0
        };
        Self {
            name: name.to_string(),
            level,
            wavelengths_um: (0..bands).map(|i| start_um + step * i as f64).collect(),
            fwhm_um: vec![fwhm_um; bands],
        }
    }

    pub fn band_count(&self) -> usize {
        self.wavelengths_um.len()
    }

    /// Identifier used for per-sensor statistics, e.g. `AVIRIS-NG/L1`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.name, self.level)
    }

    /// Sensor name plus the band range, so band views of one sensor are
    /// distinguishable.
    pub fn describe(&self) -> String {
        match (self.wavelengths_um.first(), self.wavelengths_um.last()) {
            (Some(a), Some(b)) => format!("{} ({} bands, {:.3}-{:.3} um)", self.key(), self.band_count(), a, b),
            _ => format!("{} (no bands)", self.key()),
        }
    }

    /// Loads a description file with keys `name`, `level`, `wavelengths_nm`
    /// and `fwhm_nm`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Sensor(reason) => Error::Malformed {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            name: String,
            level: String,
            wavelengths_nm: Vec<f64>,
            fwhm_nm: Vec<f64>,
        }
        let f: File = toml::from_str(text).map_err(|e| Error::Sensor(e.to_string()))?;
        let spec = Self {
            name: f.name,
            level: f.level.parse()?,
            wavelengths_um: f.wavelengths_nm.iter().map(|v| v / 1000.0).collect(),
            fwhm_um: f.fwhm_nm.iter().map(|v| v / 1000.0).collect(),
        };
        let violations = validate(&spec);
        if !violations.is_empty() {
            return Err(Error::Sensor(violations.join("; ")));
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        let nm = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{:.4}", x * 1000.0))
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "name = \"{}\"\nlevel = \"{}\"\nwavelengths_nm = [{}]\nfwhm_nm = [{}]\n",
            self.name,
            self.level,
            nm(&self.wavelengths_um),
            nm(&self.fwhm_um)
        )
    }
}

/// The three AVIRIS generations at both processing levels, on uniform band
/// grids spanning each instrument's spectral range.
pub fn builtin_sensors() -> Vec<SensorSpec> {
    let instruments = [
        ("AVIRIS-Classic", 0.380, 2.500, 224, 0.010),
        ("AVIRIS-NG", 0.380, 2.510, 425, 0.005),
        ("AVIRIS-3", 0.390, 2.500, 284, 0.0074),
    ];
    instruments
        .iter()
        .flat_map(|&(name, lo, hi, bands, fwhm)| {
            [Level::L1Radiance, Level::L2Reflectance].map(|level| SensorSpec::uniform(name, level, lo, hi, bands, fwhm))
        })
        .collect()
}

pub fn builtin(name: &str, level: Level) -> Option<SensorSpec> {
    builtin_sensors()
        .into_iter()
        .find(|s| s.name == name && s.level == level)
}

/// Every invariant violation of `spec`; empty when valid.
pub fn validate(spec: &SensorSpec) -> Vec<String> {
    let mut out = Vec::new();
    if spec.name.trim().is_empty() {
        out.push("name must not be empty".to_string());
    }
    if spec.wavelengths_um.is_empty() {
        out.push("sensor has no bands".to_string());
    }
    if spec.wavelengths_um.len() != spec.fwhm_um.len() {
        out.push(format!(
            "{} wavelengths but {} fwhm values",
            spec.wavelengths_um.len(),
            spec.fwhm_um.len()
        ));
    }
    let (lo, hi) = WAVELENGTH_BOUNDS_UM;
    for (i, &w) in spec.wavelengths_um.iter().enumerate() {
        if !(w > lo && w < hi) {
            out.push(format!("wavelength {w} um out of range at {i}"));
        }
        if i > 0 && w <= spec.wavelengths_um[i - 1] {
            out.push(format!("non-increasing at {i}"));
        }
    }
    for (i, &f) in spec.fwhm_um.iter().enumerate() {
        if !(f > 0.0) {
            out.push(format!("fwhm must be positive (band {i})"));
        }
    }
    out
}

/// Contiguous run of bands `[start, start + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSelection {
    pub start: usize,
    pub length: usize,
}

impl BandSelection {
    pub fn new(start: usize, length: usize) -> Self {
        Self { start, length }
    }

    pub fn full(band_count: usize) -> Self {
        Self::new(0, band_count)
    }

    pub fn indices(&self) -> Vec<usize> {
        (self.start..self.start + self.length).collect()
    }

    pub fn check(&self, band_count: usize) -> Result<()> {
        if self.length == 0 || self.start + self.length > band_count {
            return Err(Error::Selection {
                start: self.start,
                length: self.length,
                band_count,
            });
        }
        Ok(())
    }

    /// Selection equivalent to applying `self`, then `inner` to the result.
    pub fn then(&self, inner: BandSelection) -> BandSelection {
        BandSelection::new(self.start + inner.start, inner.length)
    }
}

pub fn subset(spec: &SensorSpec, sel: BandSelection) -> Result<SensorSpec> {
    sel.check(spec.band_count())?;
    let r = sel.start..sel.start + sel.length;
    Ok(SensorSpec {
        name: spec.name.clone(),
        level: spec.level,
        wavelengths_um: spec.wavelengths_um[r.clone()].to_vec(),
        fwhm_um: spec.fwhm_um[r].to_vec(),
    })
}
