//! Geographic points and the local tangent-plane projection used everywhere
//! a domain needs planar meters.
//!
//! The projection is deliberately simple: longitude differences scale with
//! the cosine of the center latitude, latitude differences with a constant.
//! Domains span a few kilometers at most, where this is accurate to well
//! under a meter and, crucially, exactly invertible around the same center.

/// Meters per degree of longitude at the equator.
pub const M_PER_DEG_LON: f64 = 111_320.0;
/// Meters per degree of latitude.
pub const M_PER_DEG_LAT: f64 = 110_540.0;

/// WGS-84 longitude/latitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        GeoPoint { lon, lat }
    }
}

/// Planar offset in meters from a domain center; x grows east, y north.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePos {
    pub x: f64,
    pub y: f64,
}

impl RelativePos {
    pub fn new(x: f64, y: f64) -> Self {
        RelativePos { x, y }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dist(self, other: RelativePos) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Projects `p` into the tangent plane centered at `center`.
///
/// Centers must stay below |lat| = 85 degrees; nearer the poles the
/// cos(lat) scale collapses and the projection stops being invertible.
pub fn geo_to_local(center: GeoPoint, p: GeoPoint) -> RelativePos {
    debug_assert!(center.lat.abs() < 85.0, "projection center too close to a pole");
    let x = (p.lon - center.lon) * center.lat.to_radians().cos() * M_PER_DEG_LON;
    let y = (p.lat - center.lat) * M_PER_DEG_LAT;
    RelativePos { x, y }
}

/// Inverse of [`geo_to_local`] around the same center.
pub fn local_to_geo(center: GeoPoint, p: RelativePos) -> GeoPoint {
    debug_assert!(center.lat.abs() < 85.0, "projection center too close to a pole");
    let lon = center.lon + p.x / (center.lat.to_radians().cos() * M_PER_DEG_LON);
    let lat = center.lat + p.y / M_PER_DEG_LAT;
    GeoPoint { lon, lat }
}
