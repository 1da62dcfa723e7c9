//! WGS-84 geodetic primitives: ECEF projection, great-circle distance,
//! threshold accuracy and uniform global galleries.
//!
//! Everything here is double precision. Angles are degrees at the API
//! boundary and radians internally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("distance thresholds must be positive and strictly increasing")]
    InvalidThresholds,
    #[error("predictions ({predictions}) and truths ({truths}) differ in length")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no coordinate pairs to evaluate")]
    Empty,
    #[error("gallery size must be at least 1")]
    EmptyGallery,
}

/// WGS-84 ellipsoid parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wgs84Constants {
    pub semi_major_a: f64,
    pub eccentricity_sq: f64,
}

pub const WGS84: Wgs84Constants = Wgs84Constants {
    semi_major_a: 6_378_137.0,
    eccentricity_sq: 6.694_379_990_14e-3,
};

impl Wgs84Constants {
    /// Semi-minor axis `a·√(1−ε²)`.
    pub fn semi_minor_b(&self) -> f64 {
        self.semi_major_a * (1.0 - self.eccentricity_sq).sqrt()
    }

    /// Prime vertical radius of curvature at geodetic latitude `lat_rad`.
    pub fn prime_vertical_radius(&self, lat_rad: f64) -> f64 {
        let s = lat_rad.sin();
        self.semi_major_a / (1.0 - self.eccentricity_sq * s * s).sqrt()
    }
}

/// Mean Earth radius in km used for great-circle distances.
pub const MEAN_EARTH_RADIUS_KM: f64 = 6371.0088;

/// Geodetic position in degrees. Latitude is in `[-90, 90]`, longitude in `(-180, 180]`.
/// Serialized as `{"lat": .., "lon": ..}`; deserialization validates like [`GpsCoordinate::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatLon", into = "LatLon")]
pub struct GpsCoordinate {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatLon {
    lat: f64,
    lon: f64,
}

impl TryFrom<LatLon> for GpsCoordinate {
    type Error = GeoError;
    fn try_from(v: LatLon) -> Result<Self, GeoError> {
        Self::new(v.lat, v.lon)
    }
}

impl From<GpsCoordinate> for LatLon {
    fn from(c: GpsCoordinate) -> Self {
        Self {
            lat: c.lat_deg,
            lon: c.lon_deg,
        }
    }
}

impl GpsCoordinate {
    /// Validates latitude and wraps any finite longitude into `(-180, 180]`.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::LatitudeOutOfRange(lat_deg));
        }
        Ok(Self {
            lat_deg,
            lon_deg: normalize_longitude(lon_deg),
        })
    }

    /// Like [`GpsCoordinate::new`] but rejects longitudes outside `[-180, 180]`
    /// instead of wrapping them. Used for coordinates received from external services.
    pub fn strict(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if lon_deg.is_finite() && !(-180.0..=180.0).contains(&lon_deg) {
            return Err(GeoError::LongitudeOutOfRange(lon_deg));
        }
        Self::new(lat_deg, lon_deg)
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat_deg
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon_deg
    }
}

impl std::fmt::Display for GpsCoordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6}, {:.6}", self.lat_deg, self.lon_deg)
    }
}

/// Wraps a longitude into `(-180, 180]`. Values already in range are returned untouched.
fn normalize_longitude(lon: f64) -> f64 {
    if lon > -180.0 && lon <= 180.0 {
        return lon;
    }
    // fmod is exact, so lon ± 360k maps back to lon whenever the shifted value was exact
    let mut r = lon % 360.0;
    if r > 180.0 {
        r -= 360.0;
    } else if r <= -180.0 {
        r += 360.0;
    }
    r
}

/// Earth-centered, earth-fixed position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefVector {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Projects a geodetic coordinate at `altitude_m` above the ellipsoid into ECEF.
// a single out-of-line body keeps libm call selection (sin/cos vs sincos) identical for every caller
#[inline(never)]
pub fn ecef_project(coord: GpsCoordinate, altitude_m: f64) -> EcefVector {
    let phi = coord.lat_deg.to_radians();
    let lambda = coord.lon_deg.to_radians();
    let n = WGS84.prime_vertical_radius(phi);
    let (sin_phi, cos_phi) = phi.sin_cos();
    let (sin_lambda, cos_lambda) = lambda.sin_cos();
    EcefVector {
        x: (n + altitude_m) * cos_phi * cos_lambda,
        y: (n + altitude_m) * cos_phi * sin_lambda,
        z: ((1.0 - WGS84.eccentricity_sq) * n + altitude_m) * sin_phi,
    }
}

/// Great-circle distance in km (haversine on a sphere of mean radius).
pub fn geodesic_distance(c1: GpsCoordinate, c2: GpsCoordinate) -> f64 {
    let phi1 = c1.lat_deg.to_radians();
    let phi2 = c2.lat_deg.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (c2.lon_deg - c1.lon_deg).to_radians();
    let s_phi = (dphi * 0.5).sin();
    let s_lambda = (dlambda * 0.5).sin();
    let h = s_phi * s_phi + phi1.cos() * phi2.cos() * s_lambda * s_lambda;
    2.0 * MEAN_EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Strictly increasing positive distance thresholds in km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DistanceThresholds(Vec<f64>);

impl DistanceThresholds {
    pub fn new(km: Vec<f64>) -> Result<Self, GeoError> {
        let ok = !km.is_empty()
            && km.iter().all(|&t| t.is_finite() && t > 0.0)
            && km.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(km))
        } else {
            Err(GeoError::InvalidThresholds)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Which thresholds a prediction with error `km` satisfies.
    pub fn hits(&self, km: f64) -> Vec<bool> {
        self.0.iter().map(|&t| km <= t).collect()
    }
}

impl Default for DistanceThresholds {
    /// Street, city, region, country, continent: 1/25/200/750/2500 km.
    fn default() -> Self {
        Self(vec![1.0, 25.0, 200.0, 750.0, 2500.0])
    }
}

impl TryFrom<Vec<f64>> for DistanceThresholds {
    type Error = GeoError;
    fn try_from(v: Vec<f64>) -> Result<Self, GeoError> {
        Self::new(v)
    }
}

impl From<DistanceThresholds> for Vec<f64> {
    fn from(t: DistanceThresholds) -> Self {
        t.0
    }
}

/// Fraction of prediction/truth pairs whose distance is within each threshold.
pub fn accuracy_at_thresholds(
    predictions: &[GpsCoordinate],
    truths: &[GpsCoordinate],
    thresholds: &DistanceThresholds,
) -> Result<Vec<f64>, GeoError> {
    if predictions.len() != truths.len() {
        return Err(GeoError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(GeoError::Empty);
    }
    let distances: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .map(|(&p, &t)| geodesic_distance(p, t))
        .collect();
    Ok(accuracy_from_distances(&distances, thresholds))
}

/// Threshold accuracies from precomputed distances (km). Empty input yields zeros.
pub fn accuracy_from_distances(distances_km: &[f64], thresholds: &DistanceThresholds) -> Vec<f64> {
    let n = distances_km.len().max(1) as f64;
    thresholds
        .as_slice()
        .iter()
        .map(|&t| distances_km.iter().filter(|&&d| d <= t).count() as f64 / n)
        .collect()
}

/// Area-uniform global gallery: a Fibonacci lattice on the sphere under a
/// seeded random rotation. Deterministic for a given `(count, seed)`.
pub fn generate_uniform_gallery(count: usize, seed: u64) -> Result<Vec<GpsCoordinate>, GeoError> {
    if count == 0 {
        return Err(GeoError::EmptyGallery);
    }
    let rot = seeded_rotation(seed);
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = count as f64;
    let points = (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden_angle * i as f64;
            let p = [r * theta.cos(), r * theta.sin(), z];
            let q = [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2],
            ];
            let lat = q[2].clamp(-1.0, 1.0).asin().to_degrees();
            let lon = q[1].atan2(q[0]).to_degrees();
            GpsCoordinate::new(lat, lon).expect("lattice point is a valid coordinate")
        })
        .collect();
    Ok(points)
}

/// Uniformly random rotation from a seeded unit quaternion (Shoemake's method).
fn seeded_rotation(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Destination point `distance_km` away from `origin` along `bearing_deg` on the mean sphere.
pub fn destination(origin: GpsCoordinate, bearing_deg: f64, distance_km: f64) -> GpsCoordinate {
    let delta = distance_km / MEAN_EARTH_RADIUS_KM;
    let theta = bearing_deg.to_radians();
    let phi1 = origin.lat_deg.to_radians();
    let lambda1 = origin.lon_deg.to_radians();
    let sin_phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).clamp(-1.0, 1.0);
    let phi2 = sin_phi2.asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    GpsCoordinate::new(phi2.to_degrees().clamp(-90.0, 90.0), lambda2.to_degrees())
        .expect("destination is finite")
}
