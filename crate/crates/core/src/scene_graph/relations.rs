use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::{GroundPoint, Lane, Relation};

/// Upper bounds (meters, inclusive) of the four distance categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityThresholds {
    pub near_coll_max: f64,
    pub very_near_max: f64,
    pub near_max: f64,
    pub visible_max: f64,
}

impl Default for ProximityThresholds {
    fn default() -> Self {
        ProximityThresholds {
            near_coll_max: 4.0,
            very_near_max: 7.0,
            near_max: 16.0,
            visible_max: 25.0,
        }
    }
}

impl ProximityThresholds {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, d] => {
                let th = ProximityThresholds {
                    near_coll_max: *a,
                    very_near_max: *b,
                    near_max: *c,
                    visible_max: *d,
                };
                th.validate()?;
                Ok(th)
            }
            _ => Err(Error::Config(format!("expected 4 proximity thresholds, got {}", v.len()))),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.near_coll_max, self.very_near_max, self.near_max, self.visible_max]
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.as_array();
        if b[0] > 0.0 && b.windows(2).all(|w| w[0] < w[1]) && b.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "proximity thresholds must be positive and strictly increasing, got {b:?}"
            )))
        }
    }
}

/// Closest category whose upper bound is at least `dist_m`; `None` beyond
/// `visible_max`.
pub fn classify_distance(dist_m: f64, th: &ProximityThresholds) -> Result<Option<Relation>> {
    if !(dist_m >= 0.0) {
        return Err(Error::Contract(format!("distance must be non-negative, got {dist_m}")));
    }
    let categories = [Relation::NearColl, Relation::VeryNear, Relation::Near, Relation::Visible];
    Ok(categories
        .into_iter()
        .zip(th.as_array())
        .find(|(_, max)| dist_m <= *max)
        .map(|(r, _)| r))
}

/// Forward and backward sectors are closed (the diagonals belong to them).
pub fn classify_orientation(p: GroundPoint) -> Relation {
    if p.y >= p.x.abs() {
        Relation::InFrontOf
    } else if p.y <= -p.x.abs() {
        Relation::Behind
    } else if p.x < 0.0 {
        Relation::LeftOf
    } else {
        Relation::RightOf
    }
}

/// The middle lane includes its boundaries.
pub fn assign_lane(p: GroundPoint, lane_half_width_m: f64) -> Lane {
    if p.x.abs() <= lane_half_width_m {
        Lane::Middle
    } else if p.x < -lane_half_width_m {
        Lane::Left
    } else {
        Lane::Right
    }
}
