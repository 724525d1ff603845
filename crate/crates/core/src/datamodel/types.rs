use std::collections::BTreeMap;
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of measurement positions on the face.
pub const NUM_POSITIONS: usize = 37;
/// Number of points in a landmark set.
pub const NUM_LANDMARKS: usize = 68;

/// Facial measurement position, 1..=37.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PositionId(u8);

impl PositionId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_POSITIONS as u8).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::invalid(format!(
                "position id {id} outside 1..={NUM_POSITIONS}"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index, used for one-hot encodings and tables.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Result<Self> {
        u8::try_from(index + 1)
            .map_err(|_| Error::invalid(format!("position index {index} out of range")))
            .and_then(Self::new)
    }

    pub fn all() -> impl Iterator<Item = PositionId> {
        (1..=NUM_POSITIONS as u8).map(PositionId)
    }
}

impl TryFrom<u8> for PositionId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PositionId> for u8 {
    fn from(p: PositionId) -> u8 {
        p.0
    }
}

impl fmt::Display for PositionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Selfie,
    Visia,
}

impl Modality {
    /// Half side length of a skin patch, in pixels.
    pub fn patch_radius(self) -> u32 {
        match self {
            Modality::Selfie => 70,
            Modality::Visia => 170,
        }
    }

    pub fn patch_side(self) -> u32 {
        2 * self.patch_radius()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Natural,
    White,
    Yellow,
    Standard2,
    Crosspolar,
}

impl Lighting {
    pub const ALL: [Lighting; 5] = [
        Lighting::Natural,
        Lighting::White,
        Lighting::Yellow,
        Lighting::Standard2,
        Lighting::Crosspolar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Lighting::Natural => "natural",
            Lighting::White => "white",
            Lighting::Yellow => "yellow",
            Lighting::Standard2 => "standard2",
            Lighting::Crosspolar => "crosspolar",
        }
    }
}

impl fmt::Display for Lighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Angle {
    Left,
    Front,
    Right,
}

/// Pixel coordinate in (row, col) order, origin at the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Coord {
    pub row: f64,
    pub col: f64,
}

impl Coord {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(self, other: Coord) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }

    pub fn is_finite(self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }
}

/// A captured face image together with its acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FacialImage {
    pub pixels: RgbImage,
    pub modality: Modality,
    pub lighting: Lighting,
    pub angle: Angle,
    pub panelist_id: String,
}

impl FacialImage {
    pub fn new(
        pixels: RgbImage,
        modality: Modality,
        lighting: Lighting,
        angle: Angle,
        panelist_id: impl Into<String>,
    ) -> Result<Self> {
        let side = modality.patch_side();
        if pixels.width() < side || pixels.height() < side {
            return Err(Error::invalid(format!(
                "{}x{} image is smaller than one {:?} patch ({side}px)",
                pixels.width(),
                pixels.height(),
                modality
            )));
        }
        Ok(Self {
            pixels,
            modality,
            lighting,
            angle,
            panelist_id: panelist_id.into(),
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// 68 ordered facial landmarks in image pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Coord>", into = "Vec<Coord>")]
pub struct LandmarkSet {
    points: Vec<Coord>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Coord>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::invalid(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Coord] {
        &self.points
    }

    pub fn map(&self, f: impl Fn(Coord) -> Coord) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

impl TryFrom<Vec<Coord>> for LandmarkSet {
    type Error = Error;
    fn try_from(points: Vec<Coord>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<LandmarkSet> for Vec<Coord> {
    fn from(l: LandmarkSet) -> Self {
        l.points
    }
}

/// Anchor coordinates keyed by position id. A per-image subset is allowed.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorSet {
    entries: BTreeMap<PositionId, Coord>,
}

impl AnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (PositionId, Coord)>) -> Result<Self> {
        let mut set = Self::new();
        for (id, c) in entries {
            set.insert(id, c)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: PositionId, coord: Coord) -> Result<()> {
        if !coord.is_finite() {
            return Err(Error::invalid(format!("anchor {id} is not finite")));
        }
        if self.entries.insert(id, coord).is_some() {
            return Err(Error::invalid(format!("duplicate anchor {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: PositionId) -> Option<Coord> {
        self.entries.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PositionId, Coord)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every anchor lies inside the image extended by `radius` on each side.
    pub fn check_bounds(&self, width: u32, height: u32, radius: u32) -> Result<()> {
        let r = radius as f64;
        for (id, c) in self.iter() {
            let inside = c.row >= -r
                && c.col >= -r
                && c.row <= height as f64 + r
                && c.col <= width as f64 + r;
            if !inside {
                return Err(Error::OutOfBounds {
                    anchor: id,
                    row: c.row,
                    col: c.col,
                    radius,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    /// Skin hydration, arbitrary units.
    Sh,
    /// Trans-epidermal water loss, g/m^2/h.
    Tewl,
}

impl MeasureKind {
    pub fn unit(self) -> &'static str {
        match self {
            MeasureKind::Sh => "AU",
            MeasureKind::Tewl => "g/m^2/h",
        }
    }

    /// Display and label-scaling range.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            MeasureKind::Sh => (0.0, 90.0),
            MeasureKind::Tewl => (0.0, 30.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::Sh => "sh",
            MeasureKind::Tewl => "tewl",
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sh" => Ok(MeasureKind::Sh),
            "tewl" => Ok(MeasureKind::Tewl),
            other => Err(Error::invalid(format!("unknown measurement kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasureKind,
    pub value: f64,
}

impl Measurement {
    pub fn new(kind: MeasureKind, value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!(
                "{kind} measurement must be finite and nonnegative, got {value}"
            )));
        }
        Ok(Self { kind, value })
    }
}

/// Square skin crop around one anchor; the model's training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinPatch {
    pub pixels: RgbImage,
    pub position: PositionId,
    pub label: Measurement,
    pub panelist_id: String,
    pub lighting: Lighting,
    pub angle: Angle,
    pub modality: Modality,
}

impl SkinPatch {
    pub fn side(&self) -> u32 {
        self.pixels.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_bounds() {
        assert!(PositionId::new(0).is_err());
        assert!(PositionId::new(38).is_err());
        assert_eq!(PositionId::new(37).unwrap().index(), 36);
        assert_eq!(PositionId::all().count(), NUM_POSITIONS);
    }

    #[test]
    fn patch_sides() {
        assert_eq!(Modality::Selfie.patch_side(), 140);
        assert_eq!(Modality::Visia.patch_side(), 340);
    }

    #[test]
    fn measurement_rejects_negative_and_nan() {
        assert!(Measurement::new(MeasureKind::Sh, -1.0).is_err());
        assert!(Measurement::new(MeasureKind::Tewl, f64::NAN).is_err());
        assert!(Measurement::new(MeasureKind::Tewl, 0.0).is_ok());
    }

    #[test]
    fn landmark_count_enforced() {
        assert!(LandmarkSet::new(vec![Coord::default(); 67]).is_err());
        let mut pts = vec![Coord::default(); 68];
        pts[3].row = f64::INFINITY;
        assert!(LandmarkSet::new(pts).is_err());
    }

    #[test]
    fn anchor_duplicates_rejected() {
        let d = PositionId::new(4).unwrap();
        let mut set = AnchorSet::new();
        set.insert(d, Coord::new(1.0, 2.0)).unwrap();
        assert!(set.insert(d, Coord::new(3.0, 4.0)).is_err());
    }

    #[test]
    fn anchor_bounds_padded_by_radius() {
        let set =
            AnchorSet::from_entries([(PositionId::new(1).unwrap(), Coord::new(-10.0, 5.0))])
                .unwrap();
        assert!(set.check_bounds(100, 100, 70).is_ok());
        assert!(set.check_bounds(100, 100, 5).is_err());
    }
}
