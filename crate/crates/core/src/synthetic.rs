//! Synthetic bright-square images with known answers, for smoke training and
//! heatmap localization checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Label;
use crate::preprocess::{PreprocessConfig, RasterImage};
use crate::train::InMemorySource;

/// Image quadrant, row-major: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub type Quadrant = usize;

#[derive(Debug, Clone)]
pub struct SquareSample {
    pub image: RasterImage,
    pub label: Label,
    pub quadrant: Quadrant,
    /// Square bounds `(x0, y0, side)` in pixels.
    pub square: (usize, usize, usize),
}

/// Flat dim background with one bright square fully inside `quadrant`.
pub fn square_image<R: Rng + ?Sized>(rng: &mut R, size: usize, quadrant: Quadrant) -> (RasterImage, (usize, usize, usize)) {
    let half = size / 2;
    let side = (size / 4).max(2);
    let margin = half - side;
    let x0 = (quadrant % 2) * half + rng.random_range(0..=margin);
    let y0 = (quadrant / 2) * half + rng.random_range(0..=margin);
    let bg = rng.random_range(20.0..70.0);
    let fg = rng.random_range(200.0..240.0);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
            let base = if inside { fg } else { bg };
            for _ in 0..3 {
                data.push(base);
            }
        }
    }
    (RasterImage::new(size, size, 3, data).expect("consistent buffer"), (x0, y0, side))
}

/// Two-class set: COVID-19 images carry the square top-left, normal images bottom-right.
/// Classes alternate so any prefix is balanced.
pub fn two_class_squares(n: usize, size: usize, seed: u64) -> Vec<SquareSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (label, quadrant) = if i % 2 == 0 { (Label::Covid19, 0) } else { (Label::Normal, 3) };
            let (image, square) = square_image(&mut rng, size, quadrant);
            SquareSample { image, label, quadrant, square }
        })
        .collect()
}

/// Training source over synthetic samples.
pub fn source(samples: &[SquareSample], config: PreprocessConfig) -> InMemorySource {
    InMemorySource::new(
        samples.iter().map(|s| s.image.clone()).collect(),
        samples.iter().map(|s| s.label).collect(),
        config,
    )
}

/// Preprocessing for synthetic sets: no augmentation, square target.
pub fn preprocess_config(size: usize) -> PreprocessConfig {
    PreprocessConfig { augment_enabled: false, ..Default::default() }.with_target(size, size)
}

/// Bounds `(x0, x1, y0, y1)` of a quadrant.
pub fn quadrant_bounds(q: Quadrant, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (hw, hh) = (width / 2, height / 2);
    let (x0, y0) = ((q % 2) * hw, (q / 2) * hh);
    (x0, if q % 2 == 0 { hw } else { width }, y0, if q / 2 == 0 { hh } else { height })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_lies_in_its_quadrant() {
        for s in two_class_squares(40, 64, 1) {
            let (x0, x1, y0, y1) = quadrant_bounds(s.quadrant, 64, 64);
            let (sx, sy, side) = s.square;
            assert!(sx >= x0 && sx + side <= x1 && sy >= y0 && sy + side <= y1);
            assert!(s.image.get(sx, sy, 0) >= 200.0);
        }
    }
}
