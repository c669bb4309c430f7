//! Image plane to bird's-eye mapping and the midline measures derived from it.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Endpoints;

pub type Point = (f64, f64);

/// Capture resolution the default matrix was calibrated at.
pub const REFERENCE_WIDTH: f64 = 4032.0;
pub const REFERENCE_HEIGHT: f64 = 3024.0;

/// Default image-to-ground matrix, calibrated on a frame taken square to the
/// crossing from its centre at 1.4 m.
pub const DEFAULT_MATRIX: [[f64; 3]; 3] = [
    [-1.17079727e-1, -1.56391162e0, 2.25203273e3],
    [0.0, -2.59783431e0, 3.71606050e3],
    [0.0, -7.75749810e-4, 1.00000000e0],
];

/// Image points and their ground-plane images used for the default matrix.
pub const CALIBRATION: [(Point, Point); 4] = [
    ((1671.0, 1440.0), (1671.0, 212.0)),
    ((2361.0, 1440.0), (2361.0, 212.0)),
    ((4032.0, 2171.0), (2361.0, 2812.0)),
    ((0.0, 2171.0), (1671.0, 2812.0)),
];

const MIN_DETERMINANT: f64 = 1e-12;
const MIN_W: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Default for Homography {
    fn default() -> Self {
        Self::new(DEFAULT_MATRIX).expect("default matrix is invertible")
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}

impl Homography {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography entries must be finite"));
        }
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        let det = m.determinant();
        if det.abs() <= MIN_DETERMINANT {
            return Err(Error::SingularHomography(det));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(Error::SingularHomography(self.determinant()))?;
        Ok(Self { m: inv })
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        apply_homography(self, p)
    }

    /// Nine numbers, row-major, separated by whitespace and/or commas.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(format!("homography entry {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 9 {
            return Err(Error::invalid(format!("homography needs 9 numbers, found {}", values.len())));
        }
        Self::new(std::array::from_fn(|r| std::array::from_fn(|c| values[3 * r + c])))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn apply_homography(h: &Homography, (x, y): Point) -> Result<Point> {
    let v = h.m * Vector3::new(x, y, 1.0);
    if v.z.abs() < MIN_W || !v.z.is_finite() {
        return Err(Error::PointAtHorizon { w: v.z });
    }
    Ok((v.x / v.z, v.y / v.z))
}

/// Signed angle in degrees between `start → end` and straight ahead (up the
/// image, towards smaller y), in (−180, 180]. Positive tilts right.
pub fn direction_angle(start: Point, end: Point) -> Result<f64> {
    let (dx, dy) = (end.0 - start.0, end.1 - start.1);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::ZeroLengthDirection);
    }
    let a = dx.atan2(-dy).to_degrees();
    Ok(if a == -180.0 { 180.0 } else { a })
}

/// Direction angle of a pixel-space midline after mapping both ends through `h`.
pub fn birdseye_angle(start: Point, end: Point, h: &Homography) -> Result<f64> {
    direction_angle(h.apply(start)?, h.apply(end)?)
}

/// Where the line through `p1` and `p2` crosses `y = 0`.
pub fn x_intercept((x1, y1): Point, (x2, y2): Point) -> Result<f64> {
    if y1 == y2 {
        return Err(Error::HorizontalLine);
    }
    Ok((x1 * y2 - x2 * y1) / (y2 - y1))
}

/// Pixel frame that normalized endpoints are scaled into before mapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: f64,
    pub height: f64,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            width: REFERENCE_WIDTH,
            height: REFERENCE_HEIGHT,
        }
    }
}

impl Resolution {
    /// Start and end of normalized endpoints in pixels.
    pub fn to_pixels(&self, e: &Endpoints) -> (Point, Point) {
        (
            (e.x1 * self.width, e.y1 * self.height),
            (e.x2 * self.width, e.y2 * self.height),
        )
    }
}

/// Midline measured in the bird's-eye frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Midline {
    pub start: Point,
    pub end: Point,
    /// Degrees, see [`direction_angle`].
    pub dtheta: f64,
    /// Pixels in the bird's-eye frame.
    pub x_int: f64,
}

/// Maps normalized endpoints into the bird's-eye frame and measures the
/// direction angle and x-intercept there.
pub fn measure_midline(e: &Endpoints, resolution: &Resolution, h: &Homography) -> Result<Midline> {
    let (s, t) = resolution.to_pixels(e);
    let (start, end) = (h.apply(s)?, h.apply(t)?);
    Ok(Midline {
        start,
        end,
        dtheta: direction_angle(start, end)?,
        x_int: x_intercept(start, end)?,
    })
}
