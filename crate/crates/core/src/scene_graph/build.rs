use serde::{Deserialize, Serialize};

use crate::data::{AccidentClass, DetectionClip};
use crate::error::{Error, Result};
use crate::scene_graph::{
    assign_lane, classify_distance, classify_orientation, BevCalibration, Detection, GraphEdge, GraphNode, Lane,
    NodeKind, ProximityThresholds, Relation, SceneGraph, TemporalGraphSequence, EGO_NODE, NODE_FEATURE_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGraphConfig {
    /// Row-major 3x3 image-to-ground homography.
    pub homography: [f64; 9],
    pub valid_depth: [f64; 2],
    pub image_size: [f64; 2],
    /// near_coll / very_near / near / visible upper bounds in meters.
    pub thresholds: [f64; 4],
    pub lane_half_width: f64,
    /// Frames sampled per clip.
    pub sample_count: usize,
}

impl Default for SceneGraphConfig {
    fn default() -> Self {
        let cal = BevCalibration::default();
        SceneGraphConfig {
            homography: cal.homography,
            valid_depth: [cal.valid_depth.0, cal.valid_depth.1],
            image_size: [cal.image_size.0, cal.image_size.1],
            thresholds: ProximityThresholds::default().as_array(),
            lane_half_width: 1.85,
            sample_count: 5,
        }
    }
}

impl SceneGraphConfig {
    pub fn calibration(&self) -> BevCalibration {
        BevCalibration {
            homography: self.homography,
            valid_depth: (self.valid_depth[0], self.valid_depth[1]),
            image_size: (self.image_size[0], self.image_size[1]),
        }
    }

    pub fn proximity(&self) -> Result<ProximityThresholds> {
        ProximityThresholds::from_slice(&self.thresholds)
    }
}

/// Per-frame bookkeeping of detections that did not become nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStats {
    pub detections: usize,
    pub invalid: usize,
    pub out_of_range: usize,
    pub beyond_visible: usize,
}

impl std::ops::AddAssign for FrameStats {
    fn add_assign(&mut self, o: Self) {
        self.detections += o.detections;
        self.invalid += o.invalid;
        self.out_of_range += o.out_of_range;
        self.beyond_visible += o.beyond_visible;
    }
}

/// Validated calibration, thresholds and lane width.
#[derive(Debug, Clone)]
pub struct SceneGraphBuilder {
    calibration: BevCalibration,
    thresholds: ProximityThresholds,
    lane_half_width: f64,
    sample_count: usize,
}

impl SceneGraphBuilder {
    pub fn new(cfg: &SceneGraphConfig) -> Result<Self> {
        let calibration = cfg.calibration();
        calibration.validate()?;
        let thresholds = cfg.proximity()?;
        if !(cfg.lane_half_width > 0.0) {
            return Err(Error::Config(format!(
                "lane half-width must be positive, got {}",
                cfg.lane_half_width
            )));
        }
        if cfg.sample_count == 0 {
            return Err(Error::Config("sample_count must be at least 1".into()));
        }
        Ok(SceneGraphBuilder {
            calibration,
            thresholds,
            lane_half_width: cfg.lane_half_width,
            sample_count: cfg.sample_count,
        })
    }

    pub fn calibration(&self) -> &BevCalibration {
        &self.calibration
    }

    pub fn thresholds(&self) -> &ProximityThresholds {
        &self.thresholds
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn build(&self, detections: &[Detection]) -> (SceneGraph, FrameStats) {
        let mut stats = FrameStats {
            detections: detections.len(),
            ..FrameStats::default()
        };
        let mut nodes = Vec::with_capacity(4 + detections.len());
        nodes.push(node(EGO_NODE, NodeKind::Ego, None, 1.0));
        for lane in Lane::ALL {
            nodes.push(node(SceneGraph::lane_node(lane), NodeKind::Lane(lane), None, 1.0));
        }
        let mut edges = vec![GraphEdge {
            src: EGO_NODE,
            dst: SceneGraph::lane_node(Lane::Middle),
            relation: Relation::IsIn,
        }];

        let scale = 1.0 / self.thresholds.visible_max;
        for d in detections {
            if !d.is_valid(Some(self.calibration.image_size)) {
                stats.invalid += 1;
                continue;
            }
            let Some(p) = self.calibration.project(d) else {
                stats.out_of_range += 1;
                continue;
            };
            let dist = p.distance();
            let Some(category) = classify_distance(dist, &self.thresholds).expect("distance is non-negative") else {
                stats.beyond_visible += 1;
                continue;
            };
            let id = nodes.len();
            nodes.push(node(id, NodeKind::Object(d.label), Some((p.x, p.y, dist)), scale));
            edges.push(GraphEdge {
                src: EGO_NODE,
                dst: id,
                relation: category,
            });
            edges.push(GraphEdge {
                src: EGO_NODE,
                dst: id,
                relation: classify_orientation(p),
            });
            edges.push(GraphEdge {
                src: id,
                dst: SceneGraph::lane_node(assign_lane(p, self.lane_half_width)),
                relation: Relation::IsIn,
            });
        }
        (SceneGraph { nodes, edges }, stats)
    }
}

fn node(id: usize, kind: NodeKind, geometry: Option<(f64, f64, f64)>, scale: f64) -> GraphNode {
    let mut features = vec![0.0; NODE_FEATURE_DIM];
    features[kind.slot()] = 1.0;
    if let Some((x, y, d)) = geometry {
        let n = NODE_FEATURE_DIM;
        features[n - 3] = x * scale;
        features[n - 2] = y * scale;
        features[n - 1] = d * scale;
    }
    GraphNode { id, kind, features }
}

/// Build one frame's scene graph.
pub fn build_scene_graph(
    detections: &[Detection],
    calibration: &BevCalibration,
    thresholds: &ProximityThresholds,
    lane_half_width: f64,
) -> Result<SceneGraph> {
    let cfg = SceneGraphConfig {
        homography: calibration.homography,
        valid_depth: [calibration.valid_depth.0, calibration.valid_depth.1],
        image_size: [calibration.image_size.0, calibration.image_size.1],
        thresholds: thresholds.as_array(),
        lane_half_width,
        sample_count: 1,
    };
    Ok(SceneGraphBuilder::new(&cfg)?.build(detections).0)
}

/// Evenly spaced frame indices `floor(k (T-1) / (n-1))`, `k = 0..n`.
pub fn sample_frames(frame_count: usize, n: usize) -> Result<Vec<usize>> {
    if frame_count == 0 || n == 0 {
        return Err(Error::Contract(format!(
            "sample_frames needs T >= 1 and n >= 1, got T={frame_count}, n={n}"
        )));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|k| k * (frame_count - 1) / (n - 1)).collect())
}

/// Sample frames of a clip and build a scene graph for each.
pub fn build_sequence(clip: &DetectionClip, builder: &SceneGraphBuilder) -> Result<(TemporalGraphSequence, FrameStats)> {
    let indices = sample_frames(clip.frames.len(), builder.sample_count)?;
    let mut total = FrameStats::default();
    let graphs = indices
        .into_iter()
        .map(|i| {
            let (g, s) = builder.build(&clip.frames[i].detections);
            total += s;
            g
        })
        .collect();
    Ok((
        TemporalGraphSequence {
            clip_id: clip.clip_id.clone(),
            graphs,
            label: clip.class_label,
        },
        total,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpNode {
    pub id: usize,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpFrame {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<DumpEdge>,
}

/// Human-readable listing of a clip's graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDump {
    pub clip_id: String,
    pub label: AccidentClass,
    pub frames: Vec<DumpFrame>,
    pub stats: FrameStats,
}

impl GraphDump {
    pub fn new(seq: &TemporalGraphSequence, stats: FrameStats) -> Self {
        GraphDump {
            clip_id: seq.clip_id.clone(),
            label: seq.label,
            frames: seq
                .graphs
                .iter()
                .map(|g| DumpFrame {
                    nodes: g.nodes.iter().map(|n| DumpNode { id: n.id, kind: n.kind }).collect(),
                    edges: g
                        .edges
                        .iter()
                        .map(|e| DumpEdge {
                            src: e.src,
                            dst: e.dst,
                            relation: e.relation.name().to_string(),
                        })
                        .collect(),
                })
                .collect(),
            stats,
        }
    }
}
