//! Fixtures shared by the benchmarks in `benches/`.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skinmap_core::datamodel::{Coord, NUM_POSITIONS};
use skinmap_core::synthgen::template_anchors;

pub fn noise_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(width, height, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Template anchors centered on a `width` x `height` image with one value each.
pub fn anchor_field(width: u32, height: u32, seed: u64) -> (Vec<Coord>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cr, cc) = (height as f64 / 2.0, width as f64 / 2.0);
    let anchors: Vec<Coord> = template_anchors()
        .into_iter()
        .map(|a| Coord::new(a.row * 2.0 + cr, a.col * 2.0 + cc))
        .collect();
    let values = (0..NUM_POSITIONS).map(|_| rng.random_range(0.0..30.0)).collect();
    (anchors, values)
}
