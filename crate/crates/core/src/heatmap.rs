//! Full-face heatmaps from per-anchor predictions.
//!
//! Values are spread over the image by linear interpolation on a Delaunay
//! triangulation of the anchors, colored with a fixed five-stop diverging
//! ramp and blended over the photo.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation};

use crate::datamodel::{Coord, LandmarkSet, MeasureKind};
use crate::{Error, Result};

/// Blue-white-red ramp, low to high. Stops sit at 0, 1/4, 1/2, 3/4 and 1 of
/// the domain.
pub const RAMP: [[u8; 3]; 5] = [
    [0, 0, 77],
    [0, 0, 255],
    [255, 255, 255],
    [255, 0, 0],
    [128, 0, 0],
];

pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub kind: MeasureKind,
    pub lo: f64,
    pub hi: f64,
    /// Stop colors ordered from `lo` to `hi`.
    pub stops: [[u8; 3]; 5],
}

impl ColorScale {
    /// TEWL runs blue to red over [0, 30]; SH is inverted (dry = red) over [0, 90].
    pub fn for_kind(kind: MeasureKind) -> Self {
        match kind {
            MeasureKind::Tewl => Self {
                kind,
                lo: 0.0,
                hi: 30.0,
                stops: RAMP,
            },
            MeasureKind::Sh => {
                let mut stops = RAMP;
                stops.reverse();
                Self {
                    kind,
                    lo: 0.0,
                    hi: 90.0,
                    stops,
                }
            }
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn stop_values(&self) -> [f64; 5] {
        let step = (self.hi - self.lo) / 4.0;
        std::array::from_fn(|i| self.lo + step * i as f64)
    }
}

/// Maps `v` to a color. Values are clamped to the domain; NaN maps to the midpoint.
pub fn value_to_color(v: f64, scale: &ColorScale) -> Rgb<u8> {
    let v = if v.is_nan() { scale.mid() } else { v.clamp(scale.lo, scale.hi) };
    let t = (v - scale.lo) / (scale.hi - scale.lo) * 4.0;
    let seg = (t.floor() as usize).min(3);
    let f = t - seg as f64;
    let (a, b) = (scale.stops[seg], scale.stops[seg + 1]);
    Rgb(std::array::from_fn(|c| {
        let x = a[c] as f64 + (b[c] as f64 - a[c] as f64) * f;
        x.round().clamp(0.0, 255.0) as u8
    }))
}

/// Region of the image where the heatmap is drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum FaceMask {
    Full,
    /// Convex polygon, vertices in order.
    Polygon(Vec<Coord>),
}

impl FaceMask {
    /// Convex hull of the landmarks.
    pub fn from_landmarks(landmarks: &LandmarkSet) -> Result<Self> {
        Ok(FaceMask::Polygon(convex_hull(landmarks.points())?))
    }

    pub fn contains(&self, c: Coord) -> bool {
        match self {
            FaceMask::Full => true,
            FaceMask::Polygon(poly) => {
                let n = poly.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (a, b) = (poly[i], poly[(i + 1) % n]);
                    let cross = (b.col - a.col) * (c.row - a.row) - (b.row - a.row) * (c.col - a.col);
                    if cross.abs() <= 1e-9 {
                        continue;
                    }
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Convex hull vertices in order. Needs three non-collinear points.
pub fn convex_hull(points: &[Coord]) -> Result<Vec<Coord>> {
    let t = triangulate(points, &vec![0.0; points.len()])?;
    Ok(t.convex_hull()
        .map(|e| {
            let p = e.from().position();
            Coord::new(p.y, p.x)
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct Site {
    pos: Point2<f64>,
    value: f64,
}

impl HasPosition for Site {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

fn triangulate(anchors: &[Coord], values: &[f64]) -> Result<DelaunayTriangulation<Site>> {
    if anchors.len() != values.len() {
        return Err(Error::Shape {
            expected: format!("{} values", anchors.len()),
            actual: values.len().to_string(),
        });
    }
    if anchors.len() < 3 {
        return Err(Error::Degenerate(format!(
            "interpolation needs at least 3 anchors, got {}",
            anchors.len()
        )));
    }
    if let Some(i) = (0..anchors.len()).find(|&i| !anchors[i].is_finite() || !values[i].is_finite()) {
        return Err(Error::invalid(format!("anchor {i} has a non-finite coordinate or value")));
    }
    let sites: Vec<Site> = anchors
        .iter()
        .zip(values)
        .map(|(c, &value)| Site {
            pos: Point2::new(c.col, c.row),
            value,
        })
        .collect();
    let t = DelaunayTriangulation::<Site>::bulk_load_stable(sites)
        .map_err(|e| Error::invalid(format!("triangulation failed: {e:?}")))?;
    if t.num_vertices() != anchors.len() {
        return Err(Error::Degenerate("duplicate anchor positions".into()));
    }
    if t.all_vertices_on_line() {
        return Err(Error::Degenerate("anchors are collinear".into()));
    }
    Ok(t)
}

/// Piecewise-linear interpolant over a set of anchors.
pub struct Interpolant {
    tri: DelaunayTriangulation<Site>,
    hull: Vec<(Site, Site)>,
}

impl std::fmt::Debug for Interpolant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Interpolant")
            .field("anchors", &self.tri.num_vertices())
            .field("hull_edges", &self.hull.len())
            .finish()
    }
}

impl Interpolant {
    pub fn new(anchors: &[Coord], values: &[f64]) -> Result<Self> {
        let tri = triangulate(anchors, values)?;
        let hull = tri
            .convex_hull()
            .map(|e| (*e.from().data(), *e.to().data()))
            .collect();
        Ok(Self { tri, hull })
    }

    /// Barycentric value inside the hull, value at the nearest hull point outside.
    pub fn value_at(&self, c: Coord) -> f64 {
        let p = Point2::new(c.col, c.row);
        if let Some(v) = self.tri.barycentric().interpolate(|v| v.data().value, p) {
            return v;
        }
        let mut best = (f64::INFINITY, 0.0);
        for (a, b) in &self.hull {
            let (dx, dy) = (b.pos.x - a.pos.x, b.pos.y - a.pos.y);
            let len2 = dx * dx + dy * dy;
            let t = (((p.x - a.pos.x) * dx + (p.y - a.pos.y) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.pos.x + t * dx, a.pos.y + t * dy);
            let d2 = (p.x - qx).powi(2) + (p.y - qy).powi(2);
            if d2 < best.0 {
                best = (d2, a.value + t * (b.value - a.value));
            }
        }
        best.1
    }

    /// Samples every pixel center inside `mask`.
    pub fn rasterize(&self, width: u32, height: u32, mask: &FaceMask) -> ScalarField {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for row in 0..height {
            for col in 0..width {
                let c = Coord::new(row as f64, col as f64);
                values.push(mask.contains(c).then(|| self.value_at(c)));
            }
        }
        ScalarField {
            width,
            height,
            values,
        }
    }
}

/// Per-pixel values; `None` where the heatmap is not drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub width: u32,
    pub height: u32,
    pub values: Vec<Option<f64>>,
}

impl ScalarField {
    pub fn get(&self, row: u32, col: u32) -> Option<f64> {
        if row >= self.height || col >= self.width {
            return None;
        }
        self.values[(row * self.width + col) as usize]
    }

    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

pub fn interpolate_field(
    anchors: &[Coord],
    values: &[f64],
    width: u32,
    height: u32,
    mask: &FaceMask,
) -> Result<ScalarField> {
    Ok(Interpolant::new(anchors, values)?.rasterize(width, height, mask))
}

/// Blends `alpha * color + (1 - alpha) * pixel` wherever the field is defined.
pub fn render_overlay(
    image: &RgbImage,
    field: &ScalarField,
    scale: &ColorScale,
    alpha: f64,
) -> Result<RgbImage> {
    if (image.width(), image.height()) != (field.width, field.height) {
        return Err(Error::Shape {
            expected: format!("{}x{} field", image.width(), image.height()),
            actual: format!("{}x{}", field.width, field.height),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        if let Some(v) = field.values[i] {
            let c = value_to_color(v, scale);
            for k in 0..3 {
                let x = alpha * c.0[k] as f64 + (1.0 - alpha) * px.0[k] as f64;
                px.0[k] = x.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Horizontal color bar spanning the scale's domain left to right.
pub fn legend_strip(scale: &ColorScale, width: u32, height: u32) -> RgbImage {
    let span = (width.max(2) - 1) as f64;
    RgbImage::from_fn(width, height, |x, _| {
        value_to_color(scale.lo + (scale.hi - scale.lo) * x as f64 / span, scale)
    })
}

/// Returns `image` with a legend strip of `strip_height` rows appended below.
pub fn with_legend(image: &RgbImage, scale: &ColorScale, strip_height: u32) -> RgbImage {
    let strip = legend_strip(scale, image.width(), strip_height);
    let mut out = RgbImage::new(image.width(), image.height() + strip_height);
    image::imageops::replace(&mut out, image, 0, 0);
    image::imageops::replace(&mut out, &strip, 0, image.height() as i64);
    out
}

/// sha256 over width, height and raw RGB bytes.
pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri3() -> (Vec<Coord>, Vec<f64>) {
        (
            vec![Coord::new(10.0, 10.0), Coord::new(10.0, 50.0), Coord::new(40.0, 30.0)],
            vec![3.0, 9.0, 21.0],
        )
    }

    #[test]
    fn midpoints_are_white() {
        let white = Rgb([255, 255, 255]);
        assert_eq!(value_to_color(15.0, &ColorScale::for_kind(MeasureKind::Tewl)), white);
        assert_eq!(value_to_color(45.0, &ColorScale::for_kind(MeasureKind::Sh)), white);
    }

    #[test]
    fn endpoints_and_clamping() {
        let t = ColorScale::for_kind(MeasureKind::Tewl);
        assert_eq!(value_to_color(0.0, &t).0, RAMP[0]);
        assert_eq!(value_to_color(30.0, &t).0, RAMP[4]);
        assert_eq!(value_to_color(-5.0, &t).0, RAMP[0]);
        assert_eq!(value_to_color(99.0, &t).0, RAMP[4]);
        let s = ColorScale::for_kind(MeasureKind::Sh);
        assert_eq!(value_to_color(0.0, &s).0, RAMP[4]);
        assert_eq!(value_to_color(90.0, &s).0, RAMP[0]);
    }

    #[test]
    fn quarter_stop_between_blue_and_white() {
        // 11.25 is halfway between the 7.5 and 15 stops.
        let t = ColorScale::for_kind(MeasureKind::Tewl);
        assert_eq!(value_to_color(11.25, &t).0, [128, 128, 255]);
    }

    #[test]
    fn vertex_and_centroid() {
        let (a, v) = tri3();
        let it = Interpolant::new(&a, &v).unwrap();
        for (c, x) in a.iter().zip(&v) {
            assert!((it.value_at(*c) - x).abs() < 1e-12);
        }
        let g = Coord::new(20.0, 30.0);
        assert!((it.value_at(g) - 11.0).abs() < 1e-9);
    }

    #[test]
    fn outside_hull_takes_nearest_edge_value() {
        let (a, v) = tri3();
        let it = Interpolant::new(&a, &v).unwrap();
        // straight above the midpoint of the top edge
        assert!((it.value_at(Coord::new(0.0, 30.0)) - 6.0).abs() < 1e-12);
        // beyond a corner
        assert!((it.value_at(Coord::new(0.0, 0.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_or_collinear() {
        let two = [Coord::new(0.0, 0.0), Coord::new(1.0, 1.0)];
        assert!(matches!(Interpolant::new(&two, &[1.0, 2.0]), Err(Error::Degenerate(_))));
        let line = [Coord::new(0.0, 0.0), Coord::new(1.0, 1.0), Coord::new(2.0, 2.0)];
        assert!(matches!(Interpolant::new(&line, &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        let dup = [Coord::new(0.0, 0.0), Coord::new(0.0, 0.0), Coord::new(2.0, 5.0)];
        assert!(Interpolant::new(&dup, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn mask_leaves_pixels_undefined() {
        let (a, v) = tri3();
        let mask = FaceMask::Polygon(vec![
            Coord::new(5.0, 5.0),
            Coord::new(5.0, 55.0),
            Coord::new(45.0, 55.0),
            Coord::new(45.0, 5.0),
        ]);
        let f = interpolate_field(&a, &v, 60, 50, &mask).unwrap();
        assert!(f.get(0, 0).is_none());
        assert!(f.get(20, 30).is_some());
        assert!(f.get(45, 55).is_some());
        assert!(f.get(46, 30).is_none());
    }

    #[test]
    fn convex_hull_of_square_with_center() {
        let pts = [
            Coord::new(0.0, 0.0),
            Coord::new(0.0, 4.0),
            Coord::new(4.0, 4.0),
            Coord::new(4.0, 0.0),
            Coord::new(2.0, 2.0),
        ];
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.len(), 4);
        let m = FaceMask::Polygon(h);
        assert!(m.contains(Coord::new(1.0, 3.0)));
        assert!(m.contains(Coord::new(0.0, 2.0)));
        assert!(!m.contains(Coord::new(5.0, 2.0)));
    }

    #[test]
    fn overlay_blend_oracle() {
        let img = RgbImage::from_pixel(2, 1, Rgb([100, 50, 200]));
        let field = ScalarField {
            width: 2,
            height: 1,
            values: vec![Some(30.0), None],
        };
        let s = ColorScale::for_kind(MeasureKind::Tewl);
        let out = render_overlay(&img, &field, &s, 0.5).unwrap();
        // 0.5 * (128, 0, 0) + 0.5 * (100, 50, 200)
        assert_eq!(out.get_pixel(0, 0).0, [114, 25, 100]);
        assert_eq!(out.get_pixel(1, 0).0, [100, 50, 200]);
        assert_eq!(render_overlay(&img, &field, &s, 0.0).unwrap(), img);
        assert!(render_overlay(&img, &field, &s, 1.5).is_err());
        let small = RgbImage::new(1, 1);
        assert!(matches!(render_overlay(&small, &field, &s, 0.5), Err(Error::Shape { .. })));
    }

    #[test]
    fn legend_spans_the_ramp() {
        let s = ColorScale::for_kind(MeasureKind::Tewl);
        let l = legend_strip(&s, 121, 4);
        assert_eq!(l.get_pixel(0, 0).0, RAMP[0]);
        assert_eq!(l.get_pixel(60, 3).0, [255, 255, 255]);
        assert_eq!(l.get_pixel(120, 1).0, RAMP[4]);
        let img = RgbImage::new(121, 10);
        assert_eq!(with_legend(&img, &s, 4).dimensions(), (121, 14));
    }
}
