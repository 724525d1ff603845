//! Sticker centroid extraction by hue/saturation thresholding and connected components.

use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datamodel::Coord;

/// Accepted sticker color band. Defaults to a saturated green.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorSpec {
    /// Hue window in degrees; wraps through 0 when `hue_min > hue_max`.
    pub hue_min: f64,
    pub hue_max: f64,
    pub min_saturation: f64,
    pub min_value: f64,
    /// Components with fewer pixels are dropped.
    pub min_area: usize,
    /// Expected sticker count; a mismatch produces a warning.
    pub expected: Option<usize>,
}

impl Default for ColorSpec {
    fn default() -> Self {
        Self {
            hue_min: 90.0,
            hue_max: 150.0,
            min_saturation: 0.5,
            min_value: 0.3,
            min_area: 12,
            expected: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sticker {
    pub centroid: Coord,
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StickerDetection {
    pub stickers: Vec<Sticker>,
    pub warnings: Vec<String>,
}

impl StickerDetection {
    pub fn centroids(&self) -> Vec<Coord> {
        self.stickers.iter().map(|s| s.centroid).collect()
    }
}

/// Hue in degrees, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

impl ColorSpec {
    pub fn matches(&self, px: [u8; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(px);
        let hue_ok = if self.hue_min <= self.hue_max {
            h >= self.hue_min && h <= self.hue_max
        } else {
            h >= self.hue_min || h <= self.hue_max
        };
        hue_ok && s >= self.min_saturation && v >= self.min_value
    }
}

/// Centroids of 8-connected in-band components, in row-major discovery order.
pub fn sticker_centroids(image: &RgbImage, spec: &ColorSpec) -> StickerDetection {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mask: Vec<bool> = image.pixels().map(|p| spec.matches(p.0)).collect();
    let mut seen = vec![false; w * h];
    let mut out = StickerDetection::default();
    let mut queue = VecDeque::new();
    let mut dropped = 0usize;

    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut sum_r, mut sum_c, mut area) = (0.0, 0.0, 0usize);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            sum_r += r as f64;
            sum_c += c as f64;
            area += 1;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if area < spec.min_area {
            dropped += 1;
            continue;
        }
        out.stickers.push(Sticker {
            centroid: Coord::new(sum_r / area as f64, sum_c / area as f64),
            area,
        });
    }

    if out.stickers.is_empty() {
        out.warnings.push("no sticker-colored components found".into());
    }
    if dropped > 0 {
        out.warnings
            .push(format!("{dropped} components below {} px dropped", spec.min_area));
    }
    if let Some(n) = spec.expected {
        if n != out.stickers.len() {
            out.warnings.push(format!(
                "expected {n} stickers, found {}",
                out.stickers.len()
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn paint_disc(img: &mut RgbImage, row: f64, col: f64, radius: f64) {
        for (x, y, p) in img.enumerate_pixels_mut() {
            if (y as f64 - row).powi(2) + (x as f64 - col).powi(2) <= radius * radius {
                *p = Rgb([20, 210, 40]);
            }
        }
    }

    fn canvas() -> RgbImage {
        RgbImage::from_pixel(200, 160, Rgb([205, 160, 140]))
    }

    #[test]
    fn three_discs_three_centroids() {
        let mut img = canvas();
        let centers = [(30.0, 40.0), (80.25, 120.5), (130.0, 60.7)];
        for &(r, c) in &centers {
            paint_disc(&mut img, r, c, 9.0);
        }
        let det = sticker_centroids(&img, &ColorSpec { expected: Some(3), ..Default::default() });
        assert_eq!(det.stickers.len(), 3);
        assert!(det.warnings.is_empty(), "{:?}", det.warnings);
        for &(r, c) in &centers {
            let best = det
                .centroids()
                .iter()
                .map(|p| p.distance(Coord::new(r, c)))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "{best}");
        }
    }

    #[test]
    fn no_stickers_warns() {
        let det = sticker_centroids(&canvas(), &ColorSpec::default());
        assert!(det.stickers.is_empty());
        assert!(!det.warnings.is_empty());
    }

    #[test]
    fn touching_discs_merge() {
        let mut img = canvas();
        paint_disc(&mut img, 80.0, 80.0, 10.0);
        paint_disc(&mut img, 80.0, 100.0, 10.0);
        let det = sticker_centroids(&img, &ColorSpec { expected: Some(2), ..Default::default() });
        assert_eq!(det.stickers.len(), 1);
        let c = det.stickers[0].centroid;
        assert!((c.row - 80.0).abs() < 1e-9 && (c.col - 90.0).abs() < 1e-9);
        assert!(det.warnings.iter().any(|w| w.contains("expected 2")));
    }

    #[test]
    fn specks_are_dropped() {
        let mut img = canvas();
        img.put_pixel(5, 5, Rgb([0, 255, 0]));
        let det = sticker_centroids(&img, &ColorSpec::default());
        assert!(det.stickers.is_empty());
    }

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv([0, 255, 0]);
        assert_eq!((h, s, v), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([10, 10, 10]).1, 0.0);
    }
}
