use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::Detection;

/// Metric ground-plane position relative to the ego vehicle: `+y` forward,
/// `+x` right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

impl GroundPoint {
    pub fn new(x: f64, y: f64) -> Self {
        GroundPoint { x, y }
    }

    pub fn distance(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Image-to-ground homography plus the depth band in which projections are
/// trusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevCalibration {
    /// Row-major 3x3, mapping homogeneous `(u, v, 1)` to ground `(X, Y, W)`.
    pub homography: [f64; 9],
    /// `(min, max)` forward depth in meters.
    pub valid_depth: (f64, f64),
    /// `(width, height)` in pixels.
    pub image_size: (f64, f64),
}

impl Default for BevCalibration {
    /// Forward pinhole camera 1.5 m above the road, focal length 400 px,
    /// 1280x720 image with the principal point at its center.
    fn default() -> Self {
        BevCalibration::pinhole(400.0, 1.5, (1280.0, 720.0))
    }
}

impl BevCalibration {
    /// Ground-plane homography of a level forward camera at `height` meters.
    pub fn pinhole(focal_px: f64, height: f64, image_size: (f64, f64)) -> Self {
        let (cx, cy) = (image_size.0 / 2.0, image_size.1 / 2.0);
        BevCalibration {
            homography: [height, 0.0, -height * cx, 0.0, 0.0, focal_px * height, 0.0, 1.0, -cy],
            valid_depth: (0.5, 60.0),
            image_size,
        }
    }

    pub fn determinant(&self) -> f64 {
        let h = &self.homography;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    pub fn validate(&self) -> Result<()> {
        if self.homography.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("homography has non-finite entries".into()));
        }
        let det = self.determinant();
        if det.abs() <= 1e-9 {
            return Err(Error::Config(format!("homography is singular (det = {det:e})")));
        }
        let (lo, hi) = self.valid_depth;
        if !(lo >= 0.0 && lo < hi) {
            return Err(Error::Config(format!("invalid depth band ({lo}, {hi})")));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    /// Apply the homography to an image point.
    pub fn apply(&self, u: f64, v: f64) -> Option<GroundPoint> {
        let h = &self.homography;
        let x = h[0] * u + h[1] * v + h[2];
        let y = h[3] * u + h[4] * v + h[5];
        let w = h[6] * u + h[7] * v + h[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(GroundPoint::new(x / w, y / w))
    }

    /// Image point of a ground point, via the inverse homography.
    pub fn ground_to_image(&self, p: GroundPoint) -> Option<(f64, f64)> {
        let inv = invert3(&self.homography)?;
        let u = inv[0] * p.x + inv[1] * p.y + inv[2];
        let v = inv[3] * p.x + inv[4] * p.y + inv[5];
        let w = inv[6] * p.x + inv[7] * p.y + inv[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((u / w, v / w))
    }

    /// Ground position of a detection's bottom-center, or `None` when the
    /// projection falls outside the valid depth band (the object is dropped).
    pub fn project(&self, d: &Detection) -> Option<GroundPoint> {
        let (u, v) = d.ground_contact();
        let p = self.apply(u, v)?;
        let (lo, hi) = self.valid_depth;
        (p.x.is_finite() && p.y >= lo && p.y <= hi).then_some(p)
    }
}

fn invert3(h: &[f64; 9]) -> Option<[f64; 9]> {
    let cof = [
        h[4] * h[8] - h[5] * h[7],
        h[2] * h[7] - h[1] * h[8],
        h[1] * h[5] - h[2] * h[4],
        h[5] * h[6] - h[3] * h[8],
        h[0] * h[8] - h[2] * h[6],
        h[2] * h[3] - h[0] * h[5],
        h[3] * h[7] - h[4] * h[6],
        h[1] * h[6] - h[0] * h[7],
        h[0] * h[4] - h[1] * h[3],
    ];
    let det = h[0] * cof[0] + h[1] * cof[3] + h[2] * cof[6];
    if det.abs() < 1e-15 {
        return None;
    }
    Some(cof.map(|c| c / det))
}
