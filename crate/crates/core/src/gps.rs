//! Great-circle distances between claimed locations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// One mile, the default floor between a query and a negative reference.
pub const DEFAULT_MIN_KM: f64 = 1.609;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!(
                "coordinates ({}, {}) out of range",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// Haversine distance in kilometres.
pub fn gps_distance(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_distances() {
        let o = GeoPoint::new(0.0, 0.0).unwrap();
        assert_eq!(gps_distance(o, o).unwrap(), 0.0);
        let antipode = GeoPoint::new(0.0, 180.0).unwrap();
        let d = gps_distance(o, antipode).unwrap();
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-9);
        assert!((d - 20015.1).abs() < 0.1);
    }

    #[test]
    fn distance_is_symmetric() {
        let a = GeoPoint::new(35.66, 139.70).unwrap();
        let b = GeoPoint::new(-33.86, 151.21).unwrap();
        assert_eq!(gps_distance(a, b).unwrap(), gps_distance(b, a).unwrap());
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        let bad = GeoPoint {
            lat: 0.0,
            lon: 181.0,
        };
        assert!(gps_distance(bad, GeoPoint { lat: 0.0, lon: 0.0 }).is_err());
    }
}
