use crate::datamodel::Coord;
use crate::error::{Error, Result};

/// Distance between the sticker centroid and the predicted anchor, in units
/// of the sticker radius. Values below 1 fall inside the sticker.
pub fn anchor_error_rate(sticker: Coord, predicted: Coord, radius: f64) -> Result<f64> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    Ok(sticker.distance(predicted) / radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cases() {
        let o = Coord::new(0.0, 0.0);
        assert_eq!(anchor_error_rate(o, o, 3.0).unwrap(), 0.0);
        assert_eq!(anchor_error_rate(o, Coord::new(0.0, 7.0), 7.0).unwrap(), 1.0);
        assert_eq!(anchor_error_rate(o, Coord::new(3.0, 4.0), 10.0).unwrap(), 0.5);
        assert!(anchor_error_rate(o, o, 0.0).is_err());
        assert!(anchor_error_rate(o, o, -1.0).is_err());
    }

    #[test]
    fn symmetric_and_inverse_in_radius() {
        let a = Coord::new(1.5, -2.0);
        let b = Coord::new(-4.0, 3.25);
        let e = anchor_error_rate(a, b, 2.0).unwrap();
        assert_eq!(e, anchor_error_rate(b, a, 2.0).unwrap());
        assert!((anchor_error_rate(a, b, 4.0).unwrap() - e / 2.0).abs() < 1e-15);
    }
}
