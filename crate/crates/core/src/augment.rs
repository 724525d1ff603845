//! Lighting augmentation (degrade-and-blend) and the geometric augmentation suite.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightingKind {
    Saturation,
    Contrast,
    Brightness,
    Sharpness,
}

impl LightingKind {
    pub const ALL: [LightingKind; 4] = [
        LightingKind::Saturation,
        LightingKind::Contrast,
        LightingKind::Brightness,
        LightingKind::Sharpness,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingOp {
    pub kind: LightingKind,
    pub magnitude: f64,
}

impl LightingOp {
    pub fn new(kind: LightingKind, magnitude: f64) -> Result<Self> {
        check_magnitude(magnitude)?;
        Ok(Self { kind, magnitude })
    }

    pub fn apply(&self, x: &RgbImage) -> Result<RgbImage> {
        blend(&degrade(x, self.kind), x, self.magnitude)
    }
}

fn check_magnitude(m: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&m) {
        return Err(Error::invalid(format!("magnitude {m} outside [0, 2]")));
    }
    Ok(())
}

/// ITU-R 601 luma with the same fixed-point rounding as common imaging libraries.
fn luma(p: &Rgb<u8>) -> u8 {
    let [r, g, b] = p.0;
    ((r as u32 * 19595 + g as u32 * 38470 + b as u32 * 7471 + 0x8000) >> 16) as u8
}

/// The fully degraded endpoint of each lighting operation.
pub fn degrade(x: &RgbImage, kind: LightingKind) -> RgbImage {
    let (w, h) = x.dimensions();
    match kind {
        LightingKind::Saturation => RgbImage::from_fn(w, h, |c, r| {
            let l = luma(x.get_pixel(c, r));
            Rgb([l, l, l])
        }),
        LightingKind::Contrast => {
            let n = x.as_raw().len().max(1) as f64;
            let mean = x.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n;
            let m = mean.round().clamp(0.0, 255.0) as u8;
            RgbImage::from_pixel(w, h, Rgb([m, m, m]))
        }
        LightingKind::Brightness => RgbImage::new(w, h),
        LightingKind::Sharpness => box_blur3(x),
    }
}

/// 3x3 mean filter with edge replication.
fn box_blur3(x: &RgbImage) -> RgbImage {
    let (w, h) = x.dimensions();
    let (wi, hi) = (w as i64, h as i64);
    RgbImage::from_fn(w, h, |c, r| {
        let mut acc = [0u32; 3];
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let rr = (r as i64 + dr).clamp(0, hi - 1) as u32;
                let cc = (c as i64 + dc).clamp(0, wi - 1) as u32;
                let p = x.get_pixel(cc, rr);
                for k in 0..3 {
                    acc[k] += p.0[k] as u32;
                }
            }
        }
        Rgb(acc.map(|a| ((a as f64) / 9.0).round() as u8))
    })
}

/// `clip((1 - m)·deg + m·ori, 0, 255)`, computed in floating point and rounded once.
pub fn blend(x_deg: &RgbImage, x_ori: &RgbImage, m: f64) -> Result<RgbImage> {
    check_magnitude(m)?;
    if x_deg.dimensions() != x_ori.dimensions() {
        return Err(Error::Shape {
            expected: format!("{:?}", x_ori.dimensions()),
            actual: format!("{:?}", x_deg.dimensions()),
        });
    }
    let data = x_deg
        .as_raw()
        .iter()
        .zip(x_ori.as_raw())
        .map(|(&d, &o)| ((1.0 - m) * d as f64 + m * o as f64).clamp(0.0, 255.0).round() as u8)
        .collect();
    let (w, h) = x_ori.dimensions();
    Ok(RgbImage::from_raw(w, h, data).expect("same buffer size"))
}

pub fn sample_lighting_op<R: Rng + ?Sized>(rng: &mut R) -> LightingOp {
    let kind = LightingKind::ALL[rng.random_range(0..4)];
    let magnitude = rng.random_range(0.0..=2.0);
    LightingOp { kind, magnitude }
}

/// One lighting op chosen uniformly, magnitude uniform on `[0, 2]`.
pub fn random_lighting<R: Rng + ?Sized>(x: &RgbImage, rng: &mut R) -> (RgbImage, LightingOp) {
    let op = sample_lighting_op(rng);
    let out = op.apply(x).expect("sampled magnitude is in range");
    (out, op)
}

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_ERASE_FRACTION: f64 = 0.25;
pub const MIN_ERASE_FRACTION: f64 = 0.02;
pub const CROP_FRACTION: f64 = 0.875;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeometricOp {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate { degrees: f64 },
    Erase { row: u32, col: u32, height: u32, width: u32 },
    Crop { row: u32, col: u32, side: u32 },
}

impl GeometricOp {
    pub fn apply(&self, x: &RgbImage) -> RgbImage {
        match *self {
            GeometricOp::Identity => x.clone(),
            GeometricOp::FlipHorizontal => imageops::flip_horizontal(x),
            GeometricOp::FlipVertical => imageops::flip_vertical(x),
            GeometricOp::Rotate { degrees } => rotate_reflect(x, degrees),
            GeometricOp::Erase {
                row,
                col,
                height,
                width,
            } => {
                let fill = mean_color(x);
                let mut out = x.clone();
                for r in row..(row + height).min(x.height()) {
                    for c in col..(col + width).min(x.width()) {
                        out.put_pixel(c, r, fill);
                    }
                }
                out
            }
            GeometricOp::Crop { row, col, side } => {
                let (w, h) = x.dimensions();
                let view = imageops::crop_imm(x, col, row, side, side).to_image();
                imageops::resize(&view, w, h, imageops::FilterType::Triangle)
            }
        }
    }
}

fn mean_color(x: &RgbImage) -> Rgb<u8> {
    let n = (x.width() * x.height()).max(1) as f64;
    let mut acc = [0f64; 3];
    for p in x.pixels() {
        for k in 0..3 {
            acc[k] += p.0[k] as f64;
        }
    }
    Rgb(acc.map(|a| (a / n).round() as u8))
}

fn reflect(i: f64, n: u32) -> f64 {
    let n = n as f64;
    let period = 2.0 * n;
    let mut v = i.rem_euclid(period);
    if v >= n {
        v = period - v - 1.0;
    }
    v.clamp(0.0, n - 1.0)
}

/// Rotation about the image center with bilinear sampling; samples that fall
/// outside the image are mirrored back in so texture statistics are kept.
fn rotate_reflect(x: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = x.dimensions();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    RgbImage::from_fn(w, h, |col, row| {
        let (dx, dy) = (col as f64 - cx, row as f64 - cy);
        let sx = reflect(c * dx + s * dy + cx, w);
        let sy = reflect(-s * dx + c * dy + cy, h);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as u32, y0 as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let p = |xx, yy| x.get_pixel(xx, yy).0;
        let (a, b, cc, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
        let mut out = [0u8; 3];
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
            let bot = cc[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
            out[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Draws one geometric transform for an image of the given size. With
/// probability 0.5 the identity is returned.
pub fn sample_geometric_op<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> GeometricOp {
    if rng.random_bool(0.5) {
        return GeometricOp::Identity;
    }
    sample_non_identity_op(rng, width, height)
}

pub fn sample_non_identity_op<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> GeometricOp {
    match rng.random_range(0..5) {
        0 => GeometricOp::FlipHorizontal,
        1 => GeometricOp::FlipVertical,
        2 => GeometricOp::Rotate {
            degrees: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        },
        3 => {
            let area = (width * height) as f64
                * rng.random_range(MIN_ERASE_FRACTION..=MAX_ERASE_FRACTION);
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let eh = ((area * aspect).sqrt().floor() as u32).clamp(1, height);
            let ew = ((area / eh as f64).floor() as u32).clamp(1, width);
            GeometricOp::Erase {
                row: rng.random_range(0..=height - eh),
                col: rng.random_range(0..=width - ew),
                height: eh,
                width: ew,
            }
        }
        _ => {
            let side = ((width.min(height) as f64) * CROP_FRACTION).round() as u32;
            GeometricOp::Crop {
                row: rng.random_range(0..=height - side),
                col: rng.random_range(0..=width - side),
                side,
            }
        }
    }
}

/// With probability 0.5 applies one uniformly chosen geometric transform.
pub fn random_geometric<R: Rng + ?Sized>(x: &RgbImage, rng: &mut R) -> (RgbImage, GeometricOp) {
    let op = sample_geometric_op(rng, x.width(), x.height());
    (op.apply(x), op)
}
