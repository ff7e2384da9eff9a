//! Base-32 geohash encoding used to coarsen GPS points into ~150 m cells.

use thiserror::Error;

const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Cell length used for stored GPS points and heatmap tiles.
pub const CELL_PRECISION: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeohashError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("invalid geohash character {0:?}")]
    Character(char),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.min_lat + self.max_lat) / 2.0, (self.min_lon + self.max_lon) / 2.0)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.min_lat < other.max_lat
            && other.min_lat < self.max_lat
            && self.min_lon < other.max_lon
            && other.min_lon < self.max_lon
    }
}

pub fn check_coordinates(lat: f64, lon: f64) -> Result<(), GeohashError> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(GeohashError::Latitude(lat));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(GeohashError::Longitude(lon));
    }
    Ok(())
}

pub fn encode(lat: f64, lon: f64, precision: usize) -> Result<String, GeohashError> {
    check_coordinates(lat, lon)?;
    let (mut lat_lo, mut lat_hi) = (-90.0, 90.0);
    let (mut lon_lo, mut lon_hi) = (-180.0, 180.0);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    let mut bits = 0u8;
    let mut nbits = 0;
    while out.len() < precision {
        let (lo, hi, v) = if even {
            (&mut lon_lo, &mut lon_hi, lon)
        } else {
            (&mut lat_lo, &mut lat_hi, lat)
        };
        let mid = (*lo + *hi) / 2.0;
        bits <<= 1;
        if v >= mid {
            bits |= 1;
            *lo = mid;
        } else {
            *hi = mid;
        }
        even = !even;
        nbits += 1;
        if nbits == 5 {
            out.push(BASE32[bits as usize] as char);
            bits = 0;
            nbits = 0;
        }
    }
    Ok(out)
}

pub fn decode_bbox(hash: &str) -> Result<BoundingBox, GeohashError> {
    let (mut lat_lo, mut lat_hi) = (-90.0, 90.0);
    let (mut lon_lo, mut lon_hi) = (-180.0, 180.0);
    let mut even = true;
    for c in hash.chars() {
        let idx = BASE32
            .iter()
            .position(|&b| b as char == c.to_ascii_lowercase())
            .ok_or(GeohashError::Character(c))?;
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1 == 1;
            let (lo, hi) = if even {
                (&mut lon_lo, &mut lon_hi)
            } else {
                (&mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            if bit {
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
    }
    Ok(BoundingBox {
        min_lat: lat_lo,
        max_lat: lat_hi,
        min_lon: lon_lo,
        max_lon: lon_hi,
    })
}

/// Cell size in degrees `(lat, lon)` for a given precision.
pub fn cell_size(precision: usize) -> (f64, f64) {
    let bits = 5 * precision;
    let lon_bits = bits.div_ceil(2);
    let lat_bits = bits / 2;
    (180.0 / (1u64 << lat_bits) as f64, 360.0 / (1u64 << lon_bits) as f64)
}

/// Every cell of the given precision that intersects `area`, sorted.
pub fn cells_covering(area: &BoundingBox, precision: usize) -> Vec<String> {
    let (dlat, dlon) = cell_size(precision);
    let lat0 = ((area.min_lat + 90.0) / dlat).floor() as i64;
    let lat1 = ((area.max_lat + 90.0) / dlat).ceil() as i64;
    let lon0 = ((area.min_lon + 180.0) / dlon).floor() as i64;
    let lon1 = ((area.max_lon + 180.0) / dlon).ceil() as i64;
    let mut out = Vec::new();
    for i in lat0..lat1 {
        for j in lon0..lon1 {
            let lat = -90.0 + (i as f64 + 0.5) * dlat;
            let lon = -180.0 + (j as f64 + 0.5) * dlon;
            if let Ok(cell) = encode(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0), precision) {
                if decode_bbox(&cell).is_ok_and(|b| b.intersects(area)) {
                    out.push(cell);
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

const METERS_PER_DEGREE_LAT: f64 = 111_320.0;

/// A square of side `side_m` meters centred on a point.
pub fn square_around(lat: f64, lon: f64, side_m: f64) -> BoundingBox {
    let half_lat = side_m / 2.0 / METERS_PER_DEGREE_LAT;
    let half_lon = side_m / 2.0 / (METERS_PER_DEGREE_LAT * lat.to_radians().cos().max(1e-6));
    BoundingBox {
        min_lat: (lat - half_lat).max(-90.0),
        max_lat: (lat + half_lat).min(90.0),
        min_lon: (lon - half_lon).max(-180.0),
        max_lon: (lon + half_lon).min(180.0),
    }
}

/// Offsets a reference point by planar meters (x east, y north).
pub fn offset_meters(lat: f64, lon: f64, x_m: f64, y_m: f64) -> (f64, f64) {
    let dlat = y_m / METERS_PER_DEGREE_LAT;
    let dlon = x_m / (METERS_PER_DEGREE_LAT * lat.to_radians().cos().max(1e-6));
    (lat + dlat, lon + dlon)
}
