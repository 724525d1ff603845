use image::{imageops, RgbImage};

use crate::datamodel::{Coord, PositionId};
use crate::error::{Error, Result};

/// Top-left corner of the `2r x 2r` window centered on `c` (rounded to the
/// nearest pixel), or an error naming the anchor when it leaves the image.
pub fn patch_window(
    id: PositionId,
    c: Coord,
    radius: u32,
    width: u32,
    height: u32,
) -> Result<(u32, u32)> {
    let oob = || Error::OutOfBounds {
        anchor: id,
        row: c.row,
        col: c.col,
        radius,
        width,
        height,
    };
    if !c.is_finite() {
        return Err(oob());
    }
    let r = radius as i64;
    let (row0, col0) = (c.row.round() as i64 - r, c.col.round() as i64 - r);
    if row0 < 0 || col0 < 0 || row0 + 2 * r > height as i64 || col0 + 2 * r > width as i64 {
        return Err(oob());
    }
    Ok((row0 as u32, col0 as u32))
}

/// Exact pixel slice `[c0 - r, c0 + r) x [c1 - r, c1 + r)`.
pub fn crop_patch(img: &RgbImage, id: PositionId, c: Coord, radius: u32) -> Result<RgbImage> {
    let (row0, col0) = patch_window(id, c, radius, img.width(), img.height())?;
    Ok(imageops::crop_imm(img, col0, row0, 2 * radius, 2 * radius).to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Modality;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn crop_is_exact_subgrid() {
        let img = gradient(400, 300);
        let id = PositionId::new(3).unwrap();
        let p = crop_patch(&img, id, Coord::new(150.0, 200.0), 70).unwrap();
        assert_eq!(p.dimensions(), (140, 140));
        for (x, y, px) in p.enumerate_pixels() {
            assert_eq!(px, img.get_pixel(x + 130, y + 80));
        }
    }

    #[test]
    fn modality_sides() {
        let img = gradient(800, 800);
        let id = PositionId::new(1).unwrap();
        for (m, side) in [(Modality::Selfie, 140), (Modality::Visia, 340)] {
            let p = crop_patch(&img, id, Coord::new(400.0, 400.0), m.patch_radius()).unwrap();
            assert_eq!(p.width(), side);
            assert_eq!(p.height(), side);
        }
    }

    #[test]
    fn corner_anchor_is_out_of_bounds() {
        let img = gradient(200, 200);
        let id = PositionId::new(9).unwrap();
        match crop_patch(&img, id, Coord::new(10.0, 10.0), 70) {
            Err(Error::OutOfBounds { anchor, .. }) => assert_eq!(anchor, id),
            other => panic!("expected out-of-bounds, got {other:?}"),
        }
        // A window touching the far edges exactly is fine.
        assert!(crop_patch(&img, id, Coord::new(130.0, 130.0), 70).is_ok());
        assert!(crop_patch(&img, id, Coord::new(131.0, 130.0), 70).is_err());
    }
}
