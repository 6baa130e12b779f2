//! Cluster lifecycle: recursive network splitting, centroid-based initial
//! head selection, power-based joining, TDMA slot assignment, neighbor-table
//! maintenance, and weight-based head rotation.
//!
//! Two formation modes exist. `split` bisects the whole network from the
//! base station until the requested cluster count is reached; `segment`
//! forms one cluster per road segment and travel direction. All tie-breaks
//! go to the lower node id so elections are deterministic.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::Seconds;
use crate::mobility::{NodeId, NodeState, Position, RoadGeometry, SegmentId, VehicleNode};
use crate::radio::{distance, HelloInfo};

/// Coefficients of the head-election weight; must be nonnegative and sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightParams {
    pub w_energy: f64,
    pub w_center: f64,
    pub w_bs: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            w_energy: 0.5,
            w_center: 0.3,
            w_bs: 0.2,
        }
    }
}

impl WeightParams {
    pub fn is_valid(&self) -> bool {
        self.w_energy >= 0.0
            && self.w_center >= 0.0
            && self.w_bs >= 0.0
            && (self.w_energy + self.w_center + self.w_bs - 1.0).abs() <= 1e-9
    }
}

/// One row of a node's neighbor table.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborEntry {
    pub neighbor_id: NodeId,
    pub residual_energy: f64,
    /// Distance from the table owner to the advertised position.
    pub distance_m: f64,
    pub distance_to_bs_m: f64,
    pub state: NodeState,
    /// Weight the neighbor advertised for itself.
    pub weight: f64,
}

/// Per-node view of recently heard neighbors. Entries expire after one full
/// cycle without a refresh.
#[derive(Clone, Debug, Default)]
pub struct NeighborTable {
    rows: BTreeMap<NodeId, (NeighborEntry, Seconds)>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&NeighborEntry> {
        self.rows.get(&id).map(|(e, _)| e)
    }

    pub fn entries(&self) -> impl Iterator<Item = &NeighborEntry> {
        self.rows.values().map(|(e, _)| e)
    }

    /// Upserts the row for the hello's sender, keyed by node id.
    pub fn update(
        &mut self,
        owner_pos: Position,
        hello: &HelloInfo,
        heard_at: Seconds,
        geometry: &RoadGeometry,
    ) {
        let entry = NeighborEntry {
            neighbor_id: hello.node,
            residual_energy: hello.residual_energy,
            distance_m: distance(owner_pos, hello.position),
            distance_to_bs_m: distance(hello.position, geometry.base_station),
            state: hello.state,
            weight: hello.weight,
        };
        self.rows.insert(hello.node, (entry, heard_at));
    }

    /// Maintenance tick: drops every entry older than `window`.
    pub fn evict_stale(&mut self, now: Seconds, window: Seconds) {
        self.rows.retain(|_, (_, heard_at)| now - *heard_at <= window);
    }
}

/// Spatial extent of a cluster.
#[derive(Clone, Debug, PartialEq)]
pub enum ClusterBounds {
    /// One road segment in one travel direction.
    Segment { segment: SegmentId, direction: i8 },
    /// Rectangle produced by recursive splitting.
    Rect { min: Position, max: Position },
}

/// A set of member nodes with an elected head and a TDMA schedule.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub id: u32,
    /// Sorted ascending by node id.
    pub members: Vec<NodeId>,
    pub head: Option<NodeId>,
    pub bounds: ClusterBounds,
    pub slot_schedule: Vec<SlotAssignment>,
}

impl Cluster {
    pub fn contains(&self, id: NodeId) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

/// One TDMA slot: `node` transmits in slot `index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotAssignment {
    pub node: NodeId,
    pub index: u32,
}

/// Recursively bisects the node set until exactly `target` clusters exist.
///
/// Each step splits the currently largest cluster at the median of its
/// longer spatial axis, so membership stays balanced. The result is a
/// partition of the input.
pub fn split_network(nodes: &[(NodeId, Position)], target: usize) -> Vec<Cluster> {
    assert!(!nodes.is_empty(), "cannot split an empty network");
    assert!(target >= 1, "target cluster count must be at least 1");
    assert!(
        target <= nodes.len(),
        "cannot form {target} clusters from {} nodes",
        nodes.len()
    );

    let mut groups: Vec<Vec<(NodeId, Position)>> = vec![nodes.to_vec()];
    while groups.len() < target {
        let (largest_idx, _) = groups
            .iter()
            .enumerate()
            .max_by(|(ai, a), (bi, b)| a.len().cmp(&b.len()).then(bi.cmp(ai)))
            .expect("at least one group");
        let mut group = groups.swap_remove(largest_idx);

        let (min_x, max_x, min_y, max_y) = spatial_extent(&group);
        let split_on_x = (max_x - min_x) >= (max_y - min_y);
        group.sort_by(|a, b| {
            let (ka, kb) = if split_on_x {
                (a.1 .0, b.1 .0)
            } else {
                (a.1 .1, b.1 .1)
            };
            ka.total_cmp(&kb).then(a.0.cmp(&b.0))
        });
        let right = group.split_off(group.len() / 2);
        groups.push(group);
        groups.push(right);
    }

    // Deterministic ordering: sort groups by their lowest member id.
    groups.sort_by_key(|g| g.iter().map(|(id, _)| *id).min());
    groups
        .into_iter()
        .enumerate()
        .map(|(i, mut group)| {
            group.sort_by_key(|(id, _)| *id);
            let (min_x, max_x, min_y, max_y) = spatial_extent(&group);
            Cluster {
                id: i as u32,
                members: group.iter().map(|(id, _)| *id).collect(),
                head: None,
                bounds: ClusterBounds::Rect {
                    min: (min_x, min_y),
                    max: (max_x, max_y),
                },
                slot_schedule: Vec::new(),
            }
        })
        .collect()
}

fn spatial_extent(group: &[(NodeId, Position)]) -> (f64, f64, f64, f64) {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (_, (x, y)) in group {
        min_x = min_x.min(*x);
        max_x = max_x.max(*x);
        min_y = min_y.min(*y);
        max_y = max_y.max(*y);
    }
    (min_x, max_x, min_y, max_y)
}

/// Picks the member closest to the cluster centroid; ties go to the lower id.
pub fn select_initial_head(members: &[(NodeId, Position)]) -> NodeId {
    assert!(!members.is_empty(), "cannot elect a head in an empty cluster");
    let ctx = WeightContext::for_members(members);
    members
        .iter()
        .min_by(|a, b| {
            distance(a.1, ctx.centroid)
                .total_cmp(&distance(b.1, ctx.centroid))
                .then(a.0.cmp(&b.0))
        })
        .map(|(id, _)| *id)
        .expect("nonempty members")
}

/// Precomputed per-cluster geometry for weight evaluation.
#[derive(Clone, Copy, Debug)]
pub struct WeightContext {
    pub centroid: Position,
    pub max_center_distance: f64,
}

impl WeightContext {
    pub fn for_members(members: &[(NodeId, Position)]) -> Self {
        assert!(!members.is_empty(), "weight context needs members");
        let n = members.len() as f64;
        let centroid = (
            members.iter().map(|(_, p)| p.0).sum::<f64>() / n,
            members.iter().map(|(_, p)| p.1).sum::<f64>() / n,
        );
        let max_center_distance = members
            .iter()
            .map(|(_, p)| distance(*p, centroid))
            .fold(0.0, f64::max);
        Self {
            centroid,
            max_center_distance,
        }
    }

    /// Convex combination of residual energy, closeness to the cluster
    /// center, and closeness to the base station; always in [0, 1].
    pub fn weight_of(
        &self,
        pos: Position,
        residual_energy: f64,
        geometry: &RoadGeometry,
        params: &WeightParams,
    ) -> f64 {
        let center_term = if self.max_center_distance > 0.0 {
            1.0 - distance(pos, self.centroid) / self.max_center_distance
        } else {
            1.0
        };
        let bs_term = 1.0 - distance(pos, geometry.base_station) / geometry.road_diagonal();
        params.w_energy * residual_energy + params.w_center * center_term + params.w_bs * bs_term
    }
}

/// Weight of one node within its cluster. `cluster_members` must include
/// the node itself.
pub fn compute_weight(
    pos: Position,
    residual_energy: f64,
    cluster_members: &[(NodeId, Position)],
    geometry: &RoadGeometry,
    params: &WeightParams,
) -> f64 {
    WeightContext::for_members(cluster_members).weight_of(pos, residual_energy, geometry, params)
}

/// Chooses the head to join from the announcements a node heard: maximal
/// received power, ties to the lower head id. `None` means the node heard
/// nothing and stays unclustered this cycle.
pub fn join_cluster(heard: &[(NodeId, f64)]) -> Option<NodeId> {
    heard
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| *id)
}

/// Assigns consecutive TDMA slots to the non-head members in ascending id
/// order. Returns the schedule and the slot duration
/// `gat_duration / max(member_count - 1, 1)`.
pub fn assign_slots(
    members: &[NodeId],
    head: NodeId,
    gat_duration: Seconds,
) -> (Vec<SlotAssignment>, Seconds) {
    let mut others: Vec<NodeId> = members.iter().copied().filter(|id| *id != head).collect();
    others.sort();
    let slots: Vec<SlotAssignment> = others
        .into_iter()
        .enumerate()
        .map(|(i, node)| SlotAssignment {
            node,
            index: i as u32,
        })
        .collect();
    let duration = gat_duration / (slots.len().max(1)) as f64;
    (slots, duration)
}

/// Weight-based rotation: the best member (maximal weight, ties to the
/// lower id) takes over unless the incumbent's weight is strictly greater.
/// An empty member list keeps the incumbent.
pub fn rotate_head(head: (NodeId, f64), members: &[(NodeId, f64)]) -> NodeId {
    let best = members
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    match best {
        Some(&(id, weight)) if head.1 <= weight => id,
        _ => head.0,
    }
}

/// One cluster per occupied (segment, direction) pair; empty pairs are
/// omitted. Members are the vehicles currently inside the segment traveling
/// that direction.
pub fn geographic_clusters(vehicles: &[VehicleNode], geometry: &RoadGeometry) -> Vec<Cluster> {
    let mut buckets: BTreeMap<(SegmentId, i8), Vec<NodeId>> = BTreeMap::new();
    for v in vehicles {
        buckets
            .entry((v.segment(geometry), v.direction))
            .or_default()
            .push(v.id);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, ((segment, direction), mut members))| {
            members.sort();
            Cluster {
                id: i as u32,
                members,
                head: None,
                bounds: ClusterBounds::Segment { segment, direction },
                slot_schedule: Vec::new(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{RngStreams, StreamId};
    use crate::mobility::init_vehicles;

    fn at(id: u32, x: f64) -> (NodeId, Position) {
        (NodeId(id), (x, 0.0))
    }

    /// Brute-force oracle: best 2-partition by total within-cluster x-spread.
    fn min_spread_two_partition(nodes: &[(NodeId, Position)]) -> Vec<Vec<NodeId>> {
        let n = nodes.len();
        let mut best: Option<(f64, Vec<Vec<NodeId>>)> = None;
        for mask in 1..(1u32 << n) - 1 {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, node) in nodes.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(*node);
                } else {
                    b.push(*node);
                }
            }
            let spread = |g: &[(NodeId, Position)]| {
                let xs: Vec<f64> = g.iter().map(|(_, p)| p.0).collect();
                xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - xs.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            let cost = spread(&a) + spread(&b);
            let mut part: Vec<Vec<NodeId>> = vec![
                a.iter().map(|(id, _)| *id).collect(),
                b.iter().map(|(id, _)| *id).collect(),
            ];
            for p in &mut part {
                p.sort();
            }
            part.sort();
            if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                best = Some((cost, part));
            }
        }
        best.expect("n >= 2").1
    }

    #[test]
    fn split_agrees_with_min_spread_oracle() {
        let nodes = vec![at(0, 0.0), at(1, 10.0), at(2, 1000.0), at(3, 1010.0)];
        let clusters = split_network(&nodes, 2);
        let mut got: Vec<Vec<NodeId>> = clusters.iter().map(|c| c.members.clone()).collect();
        got.sort();
        assert_eq!(got, min_spread_two_partition(&nodes));
        assert_eq!(got[0], vec![NodeId(0), NodeId(1)]);
        assert_eq!(got[1], vec![NodeId(2), NodeId(3)]);
    }

    #[test]
    fn split_degenerate_targets() {
        let nodes = vec![at(0, 5.0), at(1, 7.0), at(2, 9.0)];
        let single = split_network(&nodes, 1);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].members.len(), 3);

        let singletons = split_network(&nodes, 3);
        assert_eq!(singletons.len(), 3);
        assert!(singletons.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    #[should_panic(expected = "cannot form")]
    fn split_rejects_more_clusters_than_nodes() {
        split_network(&[at(0, 1.0)], 2);
    }

    #[test]
    fn split_is_always_a_partition() {
        let mut rng = RngStreams::new(3, &[StreamId::Mobility]);
        for target in 1..=16usize {
            let n = 16 + (target * 7) % 50;
            let nodes: Vec<(NodeId, Position)> = (0..n)
                .map(|i| {
                    (
                        NodeId(i as u32),
                        (
                            rng.next_f64(StreamId::Mobility) * 1800.0,
                            rng.next_f64(StreamId::Mobility) * 15.0,
                        ),
                    )
                })
                .collect();
            let clusters = split_network(&nodes, target);
            assert_eq!(clusters.len(), target);
            let mut seen: Vec<NodeId> = clusters.iter().flat_map(|c| c.members.clone()).collect();
            seen.sort();
            let mut expected: Vec<NodeId> = nodes.iter().map(|(id, _)| *id).collect();
            expected.sort();
            assert_eq!(seen, expected);
        }
    }

    #[test]
    fn initial_head_sits_at_the_center() {
        let members = vec![at(0, 0.0), at(1, 100.0), at(2, 200.0)];
        assert_eq!(select_initial_head(&members), NodeId(1));
        assert_eq!(select_initial_head(&[at(7, 3.0)]), NodeId(7));
    }

    #[test]
    fn initial_head_tie_breaks_to_lower_id() {
        // Both nodes are 50 m from the centroid; lower id wins.
        let members = vec![at(0, 0.0), at(1, 100.0)];
        assert_eq!(select_initial_head(&members), NodeId(0));
    }

    #[test]
    fn weight_is_one_when_every_term_is_maximal() {
        let geo = RoadGeometry::default_road();
        let members = vec![(NodeId(0), geo.base_station)];
        let w = compute_weight(
            geo.base_station,
            1.0,
            &members,
            &geo,
            &WeightParams::default(),
        );
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_nodes_share_a_weight() {
        let geo = RoadGeometry::default_road();
        let members = vec![at(0, 400.0), at(1, 400.0)];
        let params = WeightParams::default();
        let w0 = compute_weight((400.0, 0.0), 0.8, &members, &geo, &params);
        let w1 = compute_weight((400.0, 0.0), 0.8, &members, &geo, &params);
        assert_eq!(w0, w1);
    }

    #[test]
    fn energy_difference_shifts_weight_by_its_coefficient() {
        let geo = RoadGeometry::default_road();
        let members = vec![at(0, 100.0), at(1, 300.0)];
        let params = WeightParams::default();
        let full = compute_weight((100.0, 0.0), 1.0, &members, &geo, &params);
        let half = compute_weight((100.0, 0.0), 0.5, &members, &geo, &params);
        // Independent recomputation: only the energy term changes, so the
        // difference is w_energy * (1.0 - 0.5).
        assert!((full - half - 0.25).abs() < 1e-12);
    }

    #[test]
    fn join_prefers_the_strongest_power() {
        // Heads at 50 m and 150 m: closer head wins by power monotonicity.
        let heard = vec![(NodeId(9), 1.0 / 2500.0), (NodeId(4), 1.0 / 22500.0)];
        assert_eq!(join_cluster(&heard), Some(NodeId(9)));
        assert_eq!(join_cluster(&heard[..1]), Some(NodeId(9)));
        assert_eq!(join_cluster(&[]), None);
    }

    #[test]
    fn join_tie_breaks_to_lower_head_id() {
        let p = 1.0 / 10_000.0;
        assert_eq!(join_cluster(&[(NodeId(7), p), (NodeId(3), p)]), Some(NodeId(3)));
    }

    #[test]
    fn slots_cover_non_head_members_in_id_order() {
        let members = vec![NodeId(1), NodeId(2), NodeId(3)];
        let (slots, _) = assign_slots(&members, NodeId(2), 3.0);
        assert_eq!(
            slots,
            vec![
                SlotAssignment { node: NodeId(1), index: 0 },
                SlotAssignment { node: NodeId(3), index: 1 },
            ]
        );
    }

    #[test]
    fn slot_duration_divides_the_gathering_window() {
        let members = vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)];
        let (slots, duration) = assign_slots(&members, NodeId(0), 3.0);
        assert_eq!(slots.len(), 3);
        assert_eq!(duration, 1.0);

        let (empty, lone_duration) = assign_slots(&[NodeId(5)], NodeId(5), 3.0);
        assert!(empty.is_empty());
        assert_eq!(lone_duration, 3.0);
    }

    #[test]
    fn rotation_keeps_a_strictly_better_incumbent() {
        let head = (NodeId(0), 0.9);
        let members = vec![(NodeId(1), 0.5), (NodeId(2), 0.4)];
        assert_eq!(rotate_head(head, &members), NodeId(0));
    }

    #[test]
    fn rotation_hands_over_to_a_better_member() {
        let head = (NodeId(0), 0.4);
        let members = vec![(NodeId(1), 0.6), (NodeId(2), 0.5)];
        assert_eq!(rotate_head(head, &members), NodeId(1));
    }

    #[test]
    fn rotation_hands_over_on_exact_ties() {
        // The incumbent survives only a strictly greater weight.
        let head = (NodeId(0), 0.5);
        assert_eq!(rotate_head(head, &[(NodeId(3), 0.5)]), NodeId(3));
        assert_eq!(rotate_head(head, &[]), NodeId(0));
    }

    #[test]
    fn rotation_is_scale_invariant() {
        let head = (NodeId(0), 0.3);
        let members = vec![(NodeId(1), 0.2), (NodeId(2), 0.6), (NodeId(3), 0.1)];
        let picked = rotate_head(head, &members);
        for scale in [0.5, 2.0, 100.0] {
            let scaled_head = (head.0, head.1 * scale);
            let scaled: Vec<(NodeId, f64)> =
                members.iter().map(|(id, w)| (*id, w * scale)).collect();
            assert_eq!(rotate_head(scaled_head, &scaled), picked);
        }
    }

    fn hello_from(id: u32, pos: Position, energy: f64) -> HelloInfo {
        HelloInfo {
            node: NodeId(id),
            position: pos,
            residual_energy: energy,
            state: NodeState::Sensing,
            weight: 0.25,
        }
    }

    #[test]
    fn neighbor_table_upserts_by_sender() {
        let geo = RoadGeometry::default_road();
        let mut table = NeighborTable::default();
        table.update((0.0, 0.0), &hello_from(5, (30.0, 0.0), 1.0), 0.2, &geo);
        assert_eq!(table.len(), 1);
        assert_eq!(table.get(NodeId(5)).unwrap().distance_m, 30.0);

        table.update((0.0, 0.0), &hello_from(5, (40.0, 0.0), 0.9), 5.2, &geo);
        assert_eq!(table.len(), 1);
        let row = table.get(NodeId(5)).unwrap();
        assert_eq!(row.distance_m, 40.0);
        assert_eq!(row.residual_energy, 0.9);
    }

    #[test]
    fn neighbor_table_evicts_stale_rows() {
        let geo = RoadGeometry::default_road();
        let mut table = NeighborTable::default();
        table.update((0.0, 0.0), &hello_from(1, (10.0, 0.0), 1.0), 0.0, &geo);
        table.update((0.0, 0.0), &hello_from(2, (20.0, 0.0), 1.0), 3.0, &geo);
        // FULL_DURATION window of 5 s: the entry aged 6 s goes away.
        table.evict_stale(6.0, 5.0);
        assert!(table.get(NodeId(1)).is_none());
        assert!(table.get(NodeId(2)).is_some());
    }

    #[test]
    fn neighbor_weight_column_is_recomputable() {
        let geo = RoadGeometry::default_road();
        let params = WeightParams::default();
        let members = vec![at(0, 100.0), at(1, 140.0)];
        let advertised = compute_weight((140.0, 0.0), 1.0, &members, &geo, &params);
        let mut hello = hello_from(1, (140.0, 0.0), 1.0);
        hello.weight = advertised;
        let mut table = NeighborTable::default();
        table.update((100.0, 0.0), &hello, 0.2, &geo);
        let row = table.get(NodeId(1)).unwrap();
        assert_eq!(
            row.weight,
            compute_weight((140.0, 0.0), row.residual_energy, &members, &geo, &params)
        );
    }

    #[test]
    fn geographic_clusters_bucket_by_segment_and_direction() {
        let geo = RoadGeometry::default_road();
        let mut rng = RngStreams::new(11, &[StreamId::Mobility]);
        let vehicles = init_vehicles(&geo, 300, &mut rng);
        let clusters = geographic_clusters(&vehicles, &geo);
        assert!(clusters.len() <= 36); // 18 segments x 2 directions
        let total: usize = clusters.iter().map(|c| c.members.len()).sum();
        assert_eq!(total, 300);
        for c in &clusters {
            let ClusterBounds::Segment { segment, direction } = c.bounds else {
                panic!("geographic clusters must have segment bounds");
            };
            for id in &c.members {
                let v = &vehicles[id.0 as usize];
                assert_eq!(v.segment(&geo), segment);
                assert_eq!(v.direction, direction);
            }
        }
    }

    #[test]
    fn geographic_clusters_of_empty_road() {
        let geo = RoadGeometry::default_road();
        assert!(geographic_clusters(&[], &geo).is_empty());
    }

    #[test]
    fn all_vehicles_in_one_segment_form_one_cluster() {
        let geo = RoadGeometry::default_road();
        let vehicles: Vec<VehicleNode> = (0..5)
            .map(|i| VehicleNode {
                id: NodeId(i),
                x: 10.0 + i as f64,
                lane: 0,
                direction: 1,
                speed_mps: 10.0,
                residual_energy: 1.0,
                state: NodeState::Sensing,
                current_reading_mps: 10.0,
                last_weight: 0.0,
            })
            .collect();
        let clusters = geographic_clusters(&vehicles, &geo);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 5);
    }
}
