//! Vehicles on a straight two-lane road partitioned into equal segments.
//!
//! The mobility model is a bounded random walk on speed with wrap-around
//! respawn: a vehicle leaving the road re-enters at the opposite end of its
//! lane, so the population stays constant.

use serde::Serialize;
use thiserror::Error;

use crate::engine::{RngStreams, Seconds, StreamId};

/// Hard speed cap, m/s (0 - 108 km/h).
pub const MAX_SPEED_MPS: f64 = 30.0;

/// Vehicle / sensor-node identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type SegmentId = u32;
pub type Position = (f64, f64);

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("road length {length} is not a whole multiple of segment length {segment}")]
    UnevenSegments { length: f64, segment: f64 },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
}

/// Straight road with equal segments and a base station at the x = 0 end.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoadGeometry {
    pub length_m: f64,
    pub width_m: f64,
    pub lanes: u32,
    pub segment_length_m: f64,
    pub segment_count: u32,
    pub base_station: Position,
}

impl RoadGeometry {
    pub fn new(
        length_m: f64,
        width_m: f64,
        lanes: u32,
        segment_length_m: f64,
    ) -> Result<Self, GeometryError> {
        if length_m <= 0.0 {
            return Err(GeometryError::NonPositive { field: "road length" });
        }
        if width_m <= 0.0 {
            return Err(GeometryError::NonPositive { field: "road width" });
        }
        if lanes == 0 {
            return Err(GeometryError::NonPositive { field: "lane count" });
        }
        if segment_length_m <= 0.0 {
            return Err(GeometryError::NonPositive { field: "segment length" });
        }
        let ratio = length_m / segment_length_m;
        let count = ratio.round();
        if (ratio - count).abs() > 1e-9 || count < 1.0 {
            return Err(GeometryError::UnevenSegments {
                length: length_m,
                segment: segment_length_m,
            });
        }
        Ok(Self {
            length_m,
            width_m,
            lanes,
            segment_length_m,
            segment_count: count as u32,
            base_station: (0.0, width_m / 2.0),
        })
    }

    /// 1.8 km road, 15 m wide, two lanes, 18 segments of 100 m.
    pub fn default_road() -> Self {
        Self::new(1800.0, 15.0, 2, 100.0).expect("default road geometry is valid")
    }

    /// Lateral offset of a lane's center line.
    pub fn lane_y(&self, lane: u32) -> f64 {
        (lane as f64 + 0.5) * self.width_m / self.lanes as f64
    }

    /// Even lanes travel toward +x, odd lanes toward -x.
    pub fn direction_of_lane(lane: u32) -> i8 {
        if lane % 2 == 0 {
            1
        } else {
            -1
        }
    }

    /// Longest straight-line span of the road rectangle, used to normalize
    /// base-station distances to [0, 1].
    pub fn road_diagonal(&self) -> f64 {
        (self.length_m * self.length_m + self.width_m * self.width_m).sqrt()
    }

    /// Segment containing `x`. The far boundary `x == length` clamps into
    /// the last segment. Positions off the road are rejected.
    pub fn segment_of(&self, x: f64) -> SegmentId {
        assert!(
            (0.0..=self.length_m).contains(&x),
            "x={x} is outside the road [0, {}]",
            self.length_m
        );
        let seg = (x / self.segment_length_m).floor() as u32;
        seg.min(self.segment_count - 1)
    }
}

/// Protocol role of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeState {
    Sensing,
    ClusterHead,
}

/// One mobile sensor node.
#[derive(Clone, Debug)]
pub struct VehicleNode {
    pub id: NodeId,
    /// Longitudinal position along the road, meters.
    pub x: f64,
    pub lane: u32,
    /// +1 toward increasing x, -1 toward decreasing x; fixed per lane.
    pub direction: i8,
    pub speed_mps: f64,
    /// Normalized [0, 1]; vehicles are not energy constrained by default.
    pub residual_energy: f64,
    pub state: NodeState,
    /// Speed sample frozen at the start of the current gathering cycle.
    pub current_reading_mps: f64,
    /// Last weight this node computed for itself, advertised in hellos.
    pub last_weight: f64,
}

impl VehicleNode {
    pub fn position(&self, geometry: &RoadGeometry) -> Position {
        (self.x, geometry.lane_y(self.lane))
    }

    pub fn segment(&self, geometry: &RoadGeometry) -> SegmentId {
        geometry.segment_of(self.x)
    }
}

/// Places `n` vehicles uniformly on the road with uniform speeds in
/// `[0, MAX_SPEED_MPS]`, full energy, and sensing state.
pub fn init_vehicles(geometry: &RoadGeometry, n: u32, rng: &mut RngStreams) -> Vec<VehicleNode> {
    assert!(n >= 1, "vehicle count must be at least 1");
    (0..n)
        .map(|i| {
            let x = rng.next_f64(StreamId::Mobility) * geometry.length_m;
            let lane = (rng.next_f64(StreamId::Mobility) * geometry.lanes as f64) as u32;
            let lane = lane.min(geometry.lanes - 1);
            let speed = rng.next_f64(StreamId::Mobility) * MAX_SPEED_MPS;
            VehicleNode {
                id: NodeId(i),
                x,
                lane,
                direction: RoadGeometry::direction_of_lane(lane),
                speed_mps: speed,
                residual_energy: 1.0,
                state: NodeState::Sensing,
                current_reading_mps: speed,
                last_weight: 0.0,
            }
        })
        .collect()
}

/// Advances every vehicle by `dt`: move with the current speed, wrap around
/// the road ends, then perturb the speed by a uniform draw in
/// `[-jitter, jitter]` clamped to the legal range.
pub fn step_mobility(
    vehicles: &mut [VehicleNode],
    geometry: &RoadGeometry,
    dt: Seconds,
    jitter_mps: f64,
    rng: &mut RngStreams,
) {
    assert!(dt > 0.0, "mobility step must be positive");
    for v in vehicles.iter_mut() {
        let moved = v.x + v.direction as f64 * v.speed_mps * dt;
        v.x = moved.rem_euclid(geometry.length_m);
        let delta = (rng.next_f64(StreamId::Mobility) * 2.0 - 1.0) * jitter_mps;
        v.speed_mps = (v.speed_mps + delta).clamp(0.0, MAX_SPEED_MPS);
    }
}
