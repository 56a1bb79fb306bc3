//! Pixel lattice geometry: embedding of synoptic-map pixels into 3D, latitude
//! bands and uniform reference grids.
//!
//! Rows run North to South, columns run in longitude. Every coordinate uses the
//! pixel-center convention, so no pixel lies exactly on a pole or on the seam.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::PolarityMap;

/// Latitude above which a row belongs to a polar band, in degrees.
pub const POLAR_BAND_DEG: f64 = 80.0;
/// Half-width of the low-latitude band used for band-restricted errors, in degrees.
pub const EQUATOR_BAND_DEG: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LatitudeMode {
    /// Rows are equally spaced in latitude.
    #[default]
    EqualAngle,
    /// Rows are equally spaced in sin(latitude) (equal-area maps).
    SineLatitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Embedding {
    #[default]
    Cylinder,
    Sphere,
    Plane,
}

impl FromStr for LatitudeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-angle" => Ok(LatitudeMode::EqualAngle),
            "sine-latitude" => Ok(LatitudeMode::SineLatitude),
            other => Err(Error::Config(format!("unknown latitude mode '{other}'"))),
        }
    }
}

impl fmt::Display for LatitudeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatitudeMode::EqualAngle => "equal-angle",
            LatitudeMode::SineLatitude => "sine-latitude",
        })
    }
}

impl FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cylinder" => Ok(Embedding::Cylinder),
            "sphere" => Ok(Embedding::Sphere),
            "plane" => Ok(Embedding::Plane),
            other => Err(Error::Config(format!("unknown embedding '{other}'"))),
        }
    }
}

impl fmt::Display for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Embedding::Cylinder => "cylinder",
            Embedding::Sphere => "sphere",
            Embedding::Plane => "plane",
        })
    }
}

/// Raster geometry of a synoptic map plus the parameters of its 3D embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Extra pixel columns of empty angle between the right and left edges of
    /// the cylindrical fold-out.
    pub gap_px: usize,
    pub latitude_mode: LatitudeMode,
    pub embedding: Embedding,
    pub z_half_height: f64,
}

impl GridSpec {
    /// Cylinder embedding with the default gap of `width / 64` pixels.
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let spec = GridSpec {
            height,
            width,
            gap_px: width / 64,
            latitude_mode: LatitudeMode::EqualAngle,
            embedding: Embedding::Cylinder,
            z_half_height: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_gap(mut self, gap_px: usize) -> Self {
        self.gap_px = gap_px;
        self
    }

    pub fn with_latitude_mode(mut self, mode: LatitudeMode) -> Self {
        self.latitude_mode = mode;
        self
    }

    pub fn with_embedding(mut self, embedding: Embedding) -> Self {
        self.embedding = embedding;
        self
    }

    pub fn with_z_half_height(mut self, z_half_height: f64) -> Self {
        self.z_half_height = z_half_height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.z_half_height.is_finite() && self.z_half_height > 0.0) {
            return Err(Error::Config(format!(
                "cylinder half-height must be positive, got {}",
                self.z_half_height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn check(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfRange {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    /// Longitude angle of a column on the cylinder, in radians.
    fn azimuth(&self, col: usize) -> f64 {
        2.0 * PI * (col as f64 + 0.5) / (self.width + self.gap_px) as f64
    }

    /// Latitude of the pixel center of `row`, in degrees. Row 0 is northernmost.
    pub fn latitude_of_row(&self, row: usize) -> Result<f64> {
        self.check(row, 0)?;
        Ok(self.latitude_unchecked(row))
    }

    fn latitude_unchecked(&self, row: usize) -> f64 {
        let s = 1.0 - (2 * row + 1) as f64 / self.height as f64;
        match self.latitude_mode {
            LatitudeMode::EqualAngle => 90.0 * s,
            LatitudeMode::SineLatitude => s.asin().to_degrees(),
        }
    }

    /// Embedded coordinates of a pixel center.
    pub fn embed_pixel(&self, row: usize, col: usize) -> Result<[f64; 3]> {
        self.check(row, col)?;
        Ok(self.embed_unchecked(row, col))
    }

    fn embed_unchecked(&self, row: usize, col: usize) -> [f64; 3] {
        match self.embedding {
            Embedding::Cylinder => {
                let phi = self.azimuth(col);
                let z = self.z_half_height * (1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64);
                [phi.cos(), phi.sin(), z]
            }
            Embedding::Sphere => {
                let phi = self.azimuth(col);
                let theta = self.latitude_unchecked(row).to_radians();
                [
                    theta.cos() * phi.cos(),
                    theta.cos() * phi.sin(),
                    theta.sin(),
                ]
            }
            Embedding::Plane => [
                (col as f64 + 0.5) / self.width as f64,
                (row as f64 + 0.5) / self.height as f64,
                0.0,
            ],
        }
    }

    /// Embedded coordinates for every pixel in row-major order.
    pub fn embed_all(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.pixel_count());
        for row in 0..self.height {
            for col in 0..self.width {
                out.push(self.embed_unchecked(row, col));
            }
        }
        out
    }

    /// Row-constant latitude bands.
    pub fn band_masks(&self) -> BandMasks {
        let lats: Vec<f64> = (0..self.height)
            .map(|r| self.latitude_unchecked(r))
            .collect();
        BandMasks {
            width: self.width,
            north_rows: lats.iter().map(|&t| t > POLAR_BAND_DEG).collect(),
            south_rows: lats.iter().map(|&t| t < -POLAR_BAND_DEG).collect(),
            equator_rows: lats.iter().map(|&t| t.abs() <= EQUATOR_BAND_DEG).collect(),
        }
    }
}

/// Latitude bands stored per row; pixel lookups broadcast across columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMasks {
    width: usize,
    pub north_rows: Vec<bool>,
    pub south_rows: Vec<bool>,
    pub equator_rows: Vec<bool>,
}

impl BandMasks {
    pub fn is_north(&self, pixel: usize) -> bool {
        self.north_rows[pixel / self.width]
    }

    pub fn is_south(&self, pixel: usize) -> bool {
        self.south_rows[pixel / self.width]
    }

    pub fn is_equator(&self, pixel: usize) -> bool {
        self.equator_rows[pixel / self.width]
    }

    fn pixels(&self, rows: &[bool]) -> Vec<usize> {
        rows.iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .flat_map(|(r, _)| r * self.width..(r + 1) * self.width)
            .collect()
    }

    pub fn north_pixels(&self) -> Vec<usize> {
        self.pixels(&self.north_rows)
    }

    pub fn south_pixels(&self) -> Vec<usize> {
        self.pixels(&self.south_rows)
    }

    pub fn equator_pixels(&self) -> Vec<usize> {
        self.pixels(&self.equator_rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Grid,
    User,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReferencePoint {
    pub row: usize,
    pub col: usize,
    /// Always +1 or -1.
    pub polarity: i8,
}

/// Pixels with known polarity, unique by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferencePointSet {
    points: Vec<ReferencePoint>,
    pub provenance: Provenance,
}

impl ReferencePointSet {
    pub fn empty(provenance: Provenance) -> Self {
        ReferencePointSet {
            points: Vec::new(),
            provenance,
        }
    }

    /// Validates bounds, polarity and uniqueness against `spec`.
    pub fn new(
        points: Vec<ReferencePoint>,
        provenance: Provenance,
        spec: &GridSpec,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            spec.check(p.row, p.col)?;
            if p.polarity != 1 && p.polarity != -1 {
                return Err(Error::Domain(format!(
                    "reference point ({}, {}) has polarity {}, expected +1 or -1",
                    p.row, p.col, p.polarity
                )));
            }
            if !seen.insert((p.row, p.col)) {
                return Err(Error::Domain(format!(
                    "duplicate reference point ({}, {})",
                    p.row, p.col
                )));
            }
        }
        Ok(ReferencePointSet { points, provenance })
    }

    pub fn points(&self) -> &[ReferencePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform grid of reference points with polarity read from `target`.
///
/// Nodes sit at `step / 2 + k * step` in both directions; nodes where the
/// target is 0 (PIL or unknown) are dropped.
pub fn reference_grid(
    spec: &GridSpec,
    step: usize,
    target: &PolarityMap,
) -> Result<ReferencePointSet> {
    if step == 0 {
        return Err(Error::Config("grid step must be at least 1".into()));
    }
    if target.height() != spec.height || target.width() != spec.width {
        return Err(Error::Size(format!(
            "target is {}x{}, grid is {}x{}",
            target.height(),
            target.width(),
            spec.height,
            spec.width
        )));
    }
    if step > spec.height.min(spec.width) {
        log::warn!(
            "grid step {step} exceeds the smaller raster dimension {}; no reference points",
            spec.height.min(spec.width)
        );
        return Ok(ReferencePointSet::empty(Provenance::Grid));
    }
    let offset = step / 2;
    let mut points = Vec::new();
    for row in (offset..spec.height).step_by(step) {
        for col in (offset..spec.width).step_by(step) {
            let polarity = target.get(row, col);
            if polarity != 0 {
                points.push(ReferencePoint { row, col, polarity });
            }
        }
    }
    Ok(ReferencePointSet {
        points,
        provenance: Provenance::Grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cylinder_quarter_turn() {
        let spec = GridSpec::new(2, 2).unwrap().with_gap(0);
        let [x, y, z] = spec.embed_pixel(0, 0).unwrap();
        assert_close(x, 0.0, 1e-15);
        assert_close(y, 1.0, 1e-15);
        assert_close(z, 0.5, 1e-15);
    }

    #[test]
    fn plane_pixel_centers() {
        let spec = GridSpec::new(2, 2)
            .unwrap()
            .with_gap(0)
            .with_embedding(Embedding::Plane);
        assert_eq!(spec.embed_pixel(1, 1).unwrap(), [0.75, 0.75, 0.0]);
    }

    #[test]
    fn seam_gap_exceeds_one_step() {
        let spec = GridSpec::new(256, 512).unwrap().with_gap(8);
        let step = 2.0 * PI / 520.0;
        let sep = spec.azimuth(511) - spec.azimuth(0);
        assert_close(sep, 2.0 * PI * 511.0 / 520.0, 1e-12);
        let gap = 2.0 * PI - sep;
        assert_close(gap, 2.0 * PI * 9.0 / 520.0, 1e-12);
        assert!(gap > step);
    }

    #[test]
    fn default_gap_is_width_over_64() {
        assert_eq!(GridSpec::new(256, 512).unwrap().gap_px, 8);
    }

    #[test]
    fn out_of_bounds_is_range_error() {
        let spec = GridSpec::new(4, 4).unwrap();
        assert!(matches!(
            spec.embed_pixel(4, 0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            spec.latitude_of_row(9),
            Err(Error::OutOfRange { .. })
        ));
        assert!(GridSpec::new(1, 4).is_err());
    }

    #[test]
    fn equal_angle_latitudes() {
        let spec = GridSpec::new(180, 360).unwrap();
        assert_close(spec.latitude_of_row(0).unwrap(), 89.5, 1e-12);
        assert_close(spec.latitude_of_row(89).unwrap(), 0.5, 1e-12);
        assert_close(spec.latitude_of_row(90).unwrap(), -0.5, 1e-12);
    }

    #[test]
    fn sine_latitude_closed_form() {
        let spec = GridSpec::new(2, 2)
            .unwrap()
            .with_latitude_mode(LatitudeMode::SineLatitude);
        assert_close(spec.latitude_of_row(0).unwrap(), 30.0, 1e-12);
    }

    #[test]
    fn bands_h18() {
        let b = GridSpec::new(18, 36).unwrap().band_masks();
        let north: Vec<usize> = (0..18).filter(|&r| b.north_rows[r]).collect();
        let south: Vec<usize> = (0..18).filter(|&r| b.south_rows[r]).collect();
        let eq: Vec<usize> = (0..18).filter(|&r| b.equator_rows[r]).collect();
        assert_eq!(north, vec![0]);
        assert_eq!(south, vec![17]);
        assert_eq!(eq, (5..=12).collect::<Vec<_>>());
    }

    #[test]
    fn bands_h256() {
        let spec = GridSpec::new(256, 512).unwrap();
        // Oracle: enumerate the formula directly.
        let north: Vec<usize> = (0..256)
            .filter(|&r| 90.0 * (1.0 - (2 * r + 1) as f64 / 256.0) > 80.0)
            .collect();
        assert_eq!(north, (0..=13).collect::<Vec<_>>());
        let b = spec.band_masks();
        assert_eq!(
            (0..256).filter(|&r| b.north_rows[r]).collect::<Vec<_>>(),
            north
        );
        assert_eq!(b.north_pixels().len(), 14 * 512);
        assert!(b.is_north(13 * 512 + 7));
        assert!(!b.is_north(14 * 512));
    }

    #[test]
    fn bands_are_disjoint() {
        for h in [2, 7, 18, 64, 255, 256] {
            for mode in [LatitudeMode::EqualAngle, LatitudeMode::SineLatitude] {
                let b = GridSpec::new(h, 4)
                    .unwrap()
                    .with_latitude_mode(mode)
                    .band_masks();
                for r in 0..h {
                    assert!(!(b.north_rows[r] && b.equator_rows[r]));
                    assert!(!(b.south_rows[r] && b.equator_rows[r]));
                    assert!(!(b.north_rows[r] && b.south_rows[r]));
                }
            }
        }
    }

    fn all_positive(h: usize, w: usize) -> PolarityMap {
        PolarityMap::new(h, w, vec![1; h * w]).unwrap()
    }

    #[test]
    fn grid_counts() {
        let spec = GridSpec::new(256, 512).unwrap();
        let target = all_positive(256, 512);
        assert_eq!(reference_grid(&spec, 64, &target).unwrap().len(), 32);
        assert_eq!(reference_grid(&spec, 32, &target).unwrap().len(), 128);
        assert_eq!(reference_grid(&spec, 1, &target).unwrap().len(), 256 * 512);
    }

    #[test]
    fn grid_drops_unknown_nodes() {
        let spec = GridSpec::new(256, 512).unwrap();
        let mut target = all_positive(256, 512);
        target.set(16 + 32, 16 + 64, 0);
        let refs = reference_grid(&spec, 32, &target).unwrap();
        assert_eq!(refs.len(), 127);
        assert_eq!(refs.provenance, Provenance::Grid);
    }

    #[test]
    fn oversized_step_is_empty() {
        let spec = GridSpec::new(8, 16).unwrap();
        let refs = reference_grid(&spec, 9, &all_positive(8, 16)).unwrap();
        assert!(refs.is_empty());
        assert!(reference_grid(&spec, 0, &all_positive(8, 16)).is_err());
        assert!(reference_grid(&spec, 2, &all_positive(8, 8)).is_err());
    }

    #[test]
    fn reference_set_validation() {
        let spec = GridSpec::new(4, 4).unwrap();
        let p = |row, col, polarity| ReferencePoint { row, col, polarity };
        assert!(
            ReferencePointSet::new(vec![p(0, 0, 1), p(3, 3, -1)], Provenance::User, &spec).is_ok()
        );
        assert!(ReferencePointSet::new(vec![p(0, 0, 0)], Provenance::User, &spec).is_err());
        assert!(ReferencePointSet::new(vec![p(4, 0, 1)], Provenance::User, &spec).is_err());
        assert!(
            ReferencePointSet::new(vec![p(1, 1, 1), p(1, 1, -1)], Provenance::User, &spec).is_err()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cylinder_points_have_unit_radius(h in 2usize..64, w in 2usize..64, gap in 0usize..8) {
                let spec = GridSpec::new(h, w).unwrap().with_gap(gap);
                for [x, y, _] in spec.embed_all() {
                    prop_assert!((x * x + y * y - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn embedding_is_injective(h in 2usize..24, w in 2usize..24, gap in 0usize..4, e in 0usize..3) {
                let embedding = [Embedding::Cylinder, Embedding::Sphere, Embedding::Plane][e];
                let spec = GridSpec::new(h, w).unwrap().with_gap(gap).with_embedding(embedding);
                let pts = spec.embed_all();
                let mut keys: Vec<[i64; 3]> = pts
                    .iter()
                    .map(|p| p.map(|v| (v * 1e9).round() as i64))
                    .collect();
                keys.sort();
                keys.dedup();
                prop_assert_eq!(keys.len(), h * w);
            }

            #[test]
            fn z_strictly_decreasing(h in 2usize..64) {
                let spec = GridSpec::new(h, 4).unwrap();
                for r in 1..h {
                    prop_assert!(spec.embed_pixel(r, 0).unwrap()[2] < spec.embed_pixel(r - 1, 0).unwrap()[2]);
                }
            }
        }
    }
}
