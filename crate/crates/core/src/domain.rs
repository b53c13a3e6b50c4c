//! Domain vocabulary shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Full-field digital mammography.
    F,
    /// Contrast-enhanced spectral mammography.
    C,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::F, Modality::C];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::F => "F",
            Modality::C => "C",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Modality::F),
            "C" => Ok(Modality::C),
            _ => Err(Error::InvalidEnum {
                field: "modality".into(),
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

impl View {
    pub const ALL: [View; 2] = [View::CC, View::MLO];

    pub fn as_str(self) -> &'static str {
        match self {
            View::CC => "CC",
            View::MLO => "MLO",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            View::CC => 0,
            View::MLO => 1,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CC" => Ok(View::CC),
            "MLO" => Ok(View::MLO),
            _ => Err(Error::InvalidEnum {
                field: "view".into(),
                value: s.into(),
            }),
        }
    }
}

/// One (modality, view) image stream, e.g. `F_CC`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Channel {
    pub modality: Modality,
    pub view: View,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::new(Modality::F, View::CC),
        Channel::new(Modality::F, View::MLO),
        Channel::new(Modality::C, View::CC),
        Channel::new(Modality::C, View::MLO),
    ];

    pub const fn new(modality: Modality, view: View) -> Self {
        Channel { modality, view }
    }

    pub fn index(self) -> usize {
        let m = match self.modality {
            Modality::F => 0,
            Modality::C => 2,
        };
        m + self.view.index() as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.modality, self.view)
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidEnum {
            field: "channel".into(),
            value: s.into(),
        };
        let (m, v) = s.split_once('_').ok_or_else(invalid)?;
        Ok(Channel::new(
            m.parse().map_err(|_| invalid())?,
            v.parse().map_err(|_| invalid())?,
        ))
    }
}

impl TryFrom<String> for Channel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Channel> for String {
    fn from(c: Channel) -> String {
        c.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn code(self) -> &'static str {
        match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Laterality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Laterality::Left),
            "R" => Ok(Laterality::Right),
            _ => Err(Error::InvalidEnum {
                field: "laterality".into(),
                value: s.into(),
            }),
        }
    }
}

impl Serialize for Laterality {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Laterality {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiopsyLabel {
    Malignant,
    Benign,
}

impl BiopsyLabel {
    /// Malignant is the positive class.
    pub fn is_positive(self) -> bool {
        matches!(self, BiopsyLabel::Malignant)
    }

    pub fn class_index(self) -> u8 {
        match self {
            BiopsyLabel::Malignant => 1,
            BiopsyLabel::Benign => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiopsyLabel::Malignant => "malignant",
            BiopsyLabel::Benign => "benign",
        }
    }
}

impl FromStr for BiopsyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "malignant" => Ok(BiopsyLabel::Malignant),
            "benign" => Ok(BiopsyLabel::Benign),
            _ => Err(Error::InvalidEnum {
                field: "label".into(),
                value: s.into(),
            }),
        }
    }
}

/// Breast-density grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AcrCategory {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "d")]
    D,
    NotReported,
}

impl AcrCategory {
    pub const REPORTED: [AcrCategory; 4] =
        [AcrCategory::A, AcrCategory::B, AcrCategory::C, AcrCategory::D];

    pub fn code(self) -> Option<&'static str> {
        match self {
            AcrCategory::A => Some("a"),
            AcrCategory::B => Some("b"),
            AcrCategory::C => Some("c"),
            AcrCategory::D => Some("d"),
            AcrCategory::NotReported => None,
        }
    }

    pub fn from_code(code: Option<&str>) -> Result<Self> {
        match code {
            None => Ok(AcrCategory::NotReported),
            Some("a") => Ok(AcrCategory::A),
            Some("b") => Ok(AcrCategory::B),
            Some("c") => Ok(AcrCategory::C),
            Some("d") => Ok(AcrCategory::D),
            Some(other) => Err(Error::InvalidEnum {
                field: "acr".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Late,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Phase::Early),
            "late" => Ok(Phase::Late),
            _ => Err(Error::InvalidEnum {
                field: "phase".into(),
                value: s.into(),
            }),
        }
    }
}

/// Identity of one breast: a patient plus a side.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub patient_id: String,
    pub laterality: Laterality,
}

impl RecordKey {
    pub fn new(patient_id: impl Into<String>, laterality: Laterality) -> Self {
        RecordKey {
            patient_id: patient_id.into(),
            laterality,
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.patient_id, self.laterality)
    }
}

/// One breast with a biopsy-confirmed lesion and its images.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub patient_id: String,
    pub laterality: Laterality,
    pub label: BiopsyLabel,
    pub acr: AcrCategory,
    pub phase: Phase,
    /// Image paths relative to the manifest root. FFDM entries are always present.
    pub images: BTreeMap<Channel, PathBuf>,
}

impl StudyRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.patient_id.clone(), self.laterality)
    }

    pub fn image(&self, channel: Channel) -> Option<&PathBuf> {
        self.images.get(&channel)
    }

    pub fn has_cesm(&self) -> bool {
        View::ALL
            .iter()
            .all(|&v| self.images.contains_key(&Channel::new(Modality::C, v)))
    }

    /// Late acquisitions are kept for generation experiments but excluded from classification.
    pub fn is_biopsy_eligible(&self) -> bool {
        self.phase == Phase::Early
    }
}

/// 2-D grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    normalized: bool,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::build(width, height, pixels, false)
    }

    /// Builds an image flagged as normalized; every pixel must lie in [0, 1].
    pub fn new_normalized(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::build(width, height, pixels, true)
    }

    fn build(width: usize, height: usize, pixels: Vec<f64>, normalized: bool) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel {bad}")));
        }
        if normalized && pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidImage(
                "normalized image has pixels outside [0, 1]".into(),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
            normalized,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.width, self.height)
    }

    /// Re-wraps pixels with this image's shape, keeping the given normalization flag.
    pub(crate) fn with_pixels(&self, pixels: Vec<f64>, normalized: bool) -> Result<GrayImage> {
        Self::build(self.width, self.height, pixels, normalized)
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        normalized: bool,
    ) -> GrayImage {
        debug_assert_eq!(pixels.len(), width * height);
        GrayImage {
            width,
            height,
            pixels,
            normalized,
        }
    }
}
