//! Traffic scene graphs from per-frame object detections.
//!
//! Detections are projected onto the ground plane through a bird's-eye-view
//! homography, then connected to the ego vehicle with one distance-category
//! edge and one orientation edge each, and mapped to one of three lanes.

mod bev;
mod build;
mod relations;

pub use bev::{BevCalibration, GroundPoint};
pub use build::{
    build_scene_graph, build_sequence, sample_frames, FrameStats, GraphDump, SceneGraphBuilder, SceneGraphConfig,
};
pub use relations::{assign_lane, classify_distance, classify_orientation, ProximityThresholds};

use serde::{Deserialize, Serialize};

use crate::data::AccidentClass;

/// Detector classes kept by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    Motorcycle,
    Bicycle,
    Person,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Motorcycle,
        ObjectClass::Bicycle,
        ObjectClass::Person,
    ];
}

/// One detected object. `bbox` is `[x_min, y_min, x_max, y_max]` in pixels
/// with y pointing down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ObjectClass,
    pub bbox: [f64; 4],
    #[serde(rename = "conf")]
    pub confidence: f64,
}

impl Detection {
    /// Bottom-center of the box, the object's ground contact point.
    pub fn ground_contact(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, self.bbox[3])
    }

    /// Box ordering, confidence range and (optionally) frame bounds.
    pub fn is_valid(&self, image_size: Option<(f64, f64)>) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        let finite = self.bbox.iter().all(|v| v.is_finite());
        let ordered = x0 < x1 && y0 < y1;
        let conf = (0.0..=1.0).contains(&self.confidence);
        let inside = match image_size {
            Some((w, h)) => x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h,
            None => true,
        };
        finite && ordered && conf && inside
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Left,
    Middle,
    Right,
}

impl Lane {
    pub const ALL: [Lane; 3] = [Lane::Left, Lane::Middle, Lane::Right];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum NodeKind {
    Ego,
    Object(ObjectClass),
    Lane(Lane),
}

/// Number of one-hot node-kind slots: ego, five object classes, three lanes.
pub const NODE_KIND_SLOTS: usize = 9;
/// One-hot kind followed by scaled `(x, y, distance)`.
pub const NODE_FEATURE_DIM: usize = NODE_KIND_SLOTS + 3;

impl NodeKind {
    pub fn slot(self) -> usize {
        match self {
            NodeKind::Ego => 0,
            NodeKind::Object(c) => 1 + c as usize,
            NodeKind::Lane(l) => 6 + l as usize,
        }
    }
}

/// Edge labels: four distance categories, four orientations, lane membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    NearColl,
    VeryNear,
    Near,
    Visible,
    InFrontOf,
    Behind,
    LeftOf,
    RightOf,
    IsIn,
}

impl Relation {
    pub const VOCABULARY: [Relation; 9] = [
        Relation::NearColl,
        Relation::VeryNear,
        Relation::Near,
        Relation::Visible,
        Relation::InFrontOf,
        Relation::Behind,
        Relation::LeftOf,
        Relation::RightOf,
        Relation::IsIn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::NearColl => "near_coll",
            Relation::VeryNear => "very_near",
            Relation::Near => "near",
            Relation::Visible => "visible",
            Relation::InFrontOf => "in_front_of",
            Relation::Behind => "behind",
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::IsIn => "is_in",
        }
    }

    pub fn is_distance(self) -> bool {
        self.index() < 4
    }

    pub fn is_orientation(self) -> bool {
        (4..8).contains(&self.index())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

/// Scene graph of one frame. Node order: ego, lanes left/middle/right, then
/// objects in detection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

pub const EGO_NODE: usize = 0;

impl SceneGraph {
    pub fn lane_node(lane: Lane) -> usize {
        1 + lane as usize
    }

    pub fn object_count(&self) -> usize {
        self.nodes.len() - 4
    }
}

/// Scene graphs of the sampled frames of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalGraphSequence {
    pub clip_id: String,
    pub graphs: Vec<SceneGraph>,
    pub label: AccidentClass,
}
