//! Per-cycle gathering: minimum-spanning-tree construction over a cluster's
//! in-range graph, timestamp/area/direction filtering, leaf-to-root
//! fuse-and-forward, and the provider-side roll-up.
//!
//! A cycle of `FULL_DURATION` splits into head designation (CHD), gathering
//! (GAT, with the head's aggregation squeezed into its final `AGG` slice),
//! and dissemination (DIS). Tip nodes transmit first in their TDMA slots;
//! interior nodes forward one fused frame each once every child's frame has
//! arrived.

use std::collections::{BinaryHeap, BTreeMap};

use serde::Serialize;

use crate::engine::Seconds;
use crate::mobility::{NodeId, Position, SegmentId};
use crate::radio::{in_range, RadioConfig};

/// Phase durations of one gathering cycle, seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CycleTimers {
    pub full_s: Seconds,
    pub chd_s: Seconds,
    pub gat_s: Seconds,
    pub agg_s: Seconds,
    pub dis_s: Seconds,
    /// Maximum message age before the timestamp filter drops it.
    pub validity_window_s: Seconds,
}

impl Default for CycleTimers {
    fn default() -> Self {
        Self {
            full_s: 5.0,
            chd_s: 1.0,
            gat_s: 3.0,
            agg_s: 0.1,
            dis_s: 1.0,
            validity_window_s: 5.0,
        }
    }
}

impl CycleTimers {
    pub fn is_valid(&self) -> bool {
        self.full_s > 0.0
            && self.chd_s > 0.0
            && self.gat_s > 0.0
            && self.agg_s > 0.0
            && self.dis_s > 0.0
            && self.validity_window_s > 0.0
            && self.chd_s + self.gat_s + self.dis_s <= self.full_s + 1e-9
            && self.agg_s <= self.gat_s
    }

    /// Gathering starts when head designation ends.
    pub fn gat_start(&self, cycle_start: Seconds) -> Seconds {
        cycle_start + self.chd_s
    }

    /// Instant the head fuses what has arrived: the aggregation slice sits
    /// at the tail of the gathering phase.
    pub fn agg_close(&self, cycle_start: Seconds) -> Seconds {
        cycle_start + self.chd_s + self.gat_s - self.agg_s
    }

    pub fn dis_start(&self, cycle_start: Seconds) -> Seconds {
        cycle_start + self.chd_s + self.gat_s
    }

    pub fn cycle_end(&self, cycle_start: Seconds) -> Seconds {
        cycle_start + self.full_s
    }
}

/// Parent-link tree rooted at the cluster head.
#[derive(Clone, Debug)]
pub struct SpanningTree {
    pub root: NodeId,
    parent_of: BTreeMap<NodeId, NodeId>,
    children_of: BTreeMap<NodeId, Vec<NodeId>>,
}

impl SpanningTree {
    pub fn new(root: NodeId) -> Self {
        Self {
            root,
            parent_of: BTreeMap::new(),
            children_of: BTreeMap::new(),
        }
    }

    pub fn add_edge(&mut self, parent: NodeId, child: NodeId) {
        assert!(child != self.root, "the root has no parent");
        assert!(
            !self.parent_of.contains_key(&child),
            "node {child} already has a parent"
        );
        self.parent_of.insert(child, parent);
        self.children_of.entry(parent).or_default().push(child);
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent_of.get(&node).copied()
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        self.children_of.get(&node).map_or(&[], |v| v.as_slice())
    }

    /// Node count including the root.
    pub fn size(&self) -> usize {
        self.parent_of.len() + 1
    }

    pub fn edge_count(&self) -> usize {
        self.parent_of.len()
    }

    pub fn members(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.parent_of.keys().copied().collect();
        ids.push(self.root);
        ids.sort();
        ids
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node == self.root || self.parent_of.contains_key(&node)
    }
}

/// Squared Euclidean distance, the transmission-energy proxy used as the
/// MST edge weight.
pub fn edge_weight(a: Position, b: Position) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

#[derive(Debug)]
struct FrontierEdge {
    weight: f64,
    to: NodeId,
    from: NodeId,
}

impl PartialEq for FrontierEdge {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for FrontierEdge {}

impl Ord for FrontierEdge {
    // Reversed (min-heap): smallest weight first, ties by lower endpoint id.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .weight
            .total_cmp(&self.weight)
            .then_with(|| other.to.cmp(&self.to))
            .then_with(|| other.from.cmp(&self.from))
    }
}

impl PartialOrd for FrontierEdge {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Prim's algorithm seeded at `head` over the in-range graph of `members`.
///
/// Members with no in-range path to the head are excluded and returned
/// separately. A head-only cluster yields a root-only tree.
pub fn build_mst(
    head: NodeId,
    members: &[(NodeId, Position)],
    cfg: &RadioConfig,
) -> (SpanningTree, Vec<NodeId>) {
    let positions: BTreeMap<NodeId, Position> = members.iter().copied().collect();
    assert!(positions.contains_key(&head), "head must be a member");

    let mut tree = SpanningTree::new(head);
    let mut frontier = BinaryHeap::new();
    let push_edges = |from: NodeId, tree: &SpanningTree, frontier: &mut BinaryHeap<FrontierEdge>| {
        let from_pos = positions[&from];
        for (&to, &to_pos) in &positions {
            if to != from && !tree.contains(to) && in_range(from_pos, to_pos, cfg) {
                frontier.push(FrontierEdge {
                    weight: edge_weight(from_pos, to_pos),
                    to,
                    from,
                });
            }
        }
    };

    push_edges(head, &tree, &mut frontier);
    while let Some(edge) = frontier.pop() {
        if tree.contains(edge.to) {
            continue;
        }
        tree.add_edge(edge.from, edge.to);
        push_edges(edge.to, &tree, &mut frontier);
    }

    let unreachable: Vec<NodeId> = positions
        .keys()
        .copied()
        .filter(|id| !tree.contains(*id))
        .collect();
    (tree, unreachable)
}

/// Star topology: every member reports directly to the head. Used by the
/// per-cluster-head scenario, which gathers in one hop without a tree.
pub fn star_tree(head: NodeId, members: &[NodeId]) -> SpanningTree {
    let mut tree = SpanningTree::new(head);
    for &m in members {
        if m != head {
            tree.add_edge(head, m);
        }
    }
    tree
}

/// One sensed sample, tagged with where and when it was taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reading {
    pub node: NodeId,
    pub speed_mps: f64,
    pub segment: SegmentId,
    pub direction: i8,
    pub generated_at: Seconds,
}

/// Provenance of one reading folded into an aggregate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub node: NodeId,
    pub segment: SegmentId,
    pub direction: i8,
    pub generated_at: Seconds,
}

/// Fused per-area data: count plus speed statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRecord {
    pub segment: SegmentId,
    pub direction: i8,
    pub cycle: u32,
    pub node_count: u32,
    pub sum_speed: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Vintage of the oldest constituent reading.
    pub generated_at: Seconds,
}

impl AggregateRecord {
    pub fn empty(segment: SegmentId, direction: i8, cycle: u32, now: Seconds) -> Self {
        Self {
            segment,
            direction,
            cycle,
            node_count: 0,
            sum_speed: 0.0,
            min_speed: f64::INFINITY,
            max_speed: f64::NEG_INFINITY,
            generated_at: now,
        }
    }

    pub fn from_readings<'a>(
        readings: impl IntoIterator<Item = &'a Reading>,
        segment: SegmentId,
        direction: i8,
        cycle: u32,
        now: Seconds,
    ) -> Self {
        let mut record = Self::empty(segment, direction, cycle, now);
        for r in readings {
            record.node_count += 1;
            record.sum_speed += r.speed_mps;
            record.min_speed = record.min_speed.min(r.speed_mps);
            record.max_speed = record.max_speed.max(r.speed_mps);
            record.generated_at = record.generated_at.min(r.generated_at);
        }
        record
    }

    pub fn mean_speed(&self) -> f64 {
        assert!(self.node_count > 0, "mean of an empty record is undefined");
        self.sum_speed / self.node_count as f64
    }
}

/// An aggregate in flight up the tree, with the provenance of every fused
/// reading (the provenance never leaves the simulator; it backs the filter
/// soundness checks).
#[derive(Clone, Debug, PartialEq)]
pub struct TreeData {
    pub record: AggregateRecord,
    pub contributors: Vec<Contribution>,
}

/// The timestamp/area/direction filter: drop anything stale, from another
/// segment, or from the other travel direction.
pub fn should_drop(
    sent_at: Seconds,
    record: &AggregateRecord,
    segment: SegmentId,
    direction: i8,
    now: Seconds,
    timers: &CycleTimers,
) -> bool {
    now - sent_at > timers.validity_window_s
        || record.segment != segment
        || record.direction != direction
}

/// Fuses a node's own reading (if it passes the area filter) with the
/// already-filtered frames received from its children.
pub fn fuse(
    own: Option<&Reading>,
    children: &[TreeData],
    segment: SegmentId,
    direction: i8,
    cycle: u32,
    now: Seconds,
) -> TreeData {
    let mut record = AggregateRecord::empty(segment, direction, cycle, now);
    let mut contributors = Vec::new();
    if let Some(r) = own {
        record.node_count = 1;
        record.sum_speed = r.speed_mps;
        record.min_speed = r.speed_mps;
        record.max_speed = r.speed_mps;
        record.generated_at = r.generated_at;
        contributors.push(Contribution {
            node: r.node,
            segment: r.segment,
            direction: r.direction,
            generated_at: r.generated_at,
        });
    }
    for child in children {
        record.node_count += child.record.node_count;
        record.sum_speed += child.record.sum_speed;
        record.min_speed = record.min_speed.min(child.record.min_speed);
        record.max_speed = record.max_speed.max(child.record.max_speed);
        record.generated_at = record.generated_at.min(child.record.generated_at);
        contributors.extend_from_slice(&child.contributors);
    }
    contributors.sort_by_key(|c| c.node);
    TreeData {
        record,
        contributors,
    }
}

/// Computes each non-root node's transmission instant: no earlier than its
/// own TDMA slot, and only after every child's frame has arrived
/// (`child transmission + hop_delay`). Returned in dispatch order
/// (time, then node id).
pub fn plan_transmissions(
    tree: &SpanningTree,
    slot_index: &BTreeMap<NodeId, u32>,
    gat_start: Seconds,
    slot_duration: Seconds,
    hop_delay: Seconds,
) -> Vec<(NodeId, Seconds)> {
    let mut tx_time: BTreeMap<NodeId, Seconds> = BTreeMap::new();
    // Post-order walk so children are timed before their parents.
    let mut stack = vec![(tree.root, false)];
    while let Some((node, children_done)) = stack.pop() {
        if !children_done {
            stack.push((node, true));
            for &child in tree.children(node) {
                stack.push((child, false));
            }
            continue;
        }
        if node == tree.root {
            continue;
        }
        let slot_start = gat_start + slot_index[&node] as f64 * slot_duration;
        let children_ready = tree
            .children(node)
            .iter()
            .map(|c| tx_time[c] + hop_delay)
            .fold(slot_start, f64::max);
        tx_time.insert(node, children_ready);
    }

    let mut plan: Vec<(NodeId, Seconds)> = tx_time.into_iter().map(|(n, t)| (n, t)).collect();
    plan.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    plan
}

/// Reference execution of one gathering round over a static cluster with an
/// ideal medium: every non-root member transmits exactly once, in plan
/// order, and the head folds the rest at close. Returns the head's frame
/// and the number of tree messages sent.
pub fn run_gather_cycle(
    tree: &SpanningTree,
    slot_index: &BTreeMap<NodeId, u32>,
    readings: &BTreeMap<NodeId, Reading>,
    segment: SegmentId,
    direction: i8,
    cycle: u32,
    timers: &CycleTimers,
    gat_start: Seconds,
    slot_duration: Seconds,
    hop_delay: Seconds,
) -> (TreeData, u64) {
    let plan = plan_transmissions(tree, slot_index, gat_start, slot_duration, hop_delay);
    let mut inbox: BTreeMap<NodeId, Vec<TreeData>> = BTreeMap::new();
    let mut messages = 0u64;
    for (node, tx_at) in plan {
        let received = inbox.remove(&node).unwrap_or_default();
        let kept: Vec<TreeData> = received
            .into_iter()
            .filter(|d| !should_drop(d.record.generated_at, &d.record, segment, direction, tx_at, timers))
            .collect();
        let own = readings
            .get(&node)
            .filter(|r| r.segment == segment && r.direction == direction);
        let frame = fuse(own, &kept, segment, direction, cycle, tx_at);
        let parent = tree.parent(node).expect("non-root nodes have parents");
        inbox.entry(parent).or_default().push(frame);
        messages += 1;
    }
    let head_inbox = inbox.remove(&tree.root).unwrap_or_default();
    let own = readings
        .get(&tree.root)
        .filter(|r| r.segment == segment && r.direction == direction);
    let head_frame = fuse(
        own,
        &head_inbox,
        segment,
        direction,
        cycle,
        timers.agg_close(gat_start - timers.chd_s),
    );
    (head_frame, messages)
}

/// Per-segment and road-wide roll-up of one cycle's records, weighted by
/// node count.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadSummary {
    pub cycle: u32,
    pub per_segment: Vec<(SegmentId, i8, u32, f64)>,
    pub total_count: u32,
    pub road_mean_speed: Option<f64>,
}

/// Provider-side aggregation of the records collected in one cycle.
pub fn provider_aggregate(cycle: u32, records: &[AggregateRecord]) -> RoadSummary {
    let mut buckets: BTreeMap<(SegmentId, i8), (u32, f64)> = BTreeMap::new();
    let mut total_count = 0u32;
    let mut total_sum = 0.0;
    for r in records {
        let slot = buckets.entry((r.segment, r.direction)).or_insert((0, 0.0));
        slot.0 += r.node_count;
        slot.1 += r.sum_speed;
        total_count += r.node_count;
        total_sum += r.sum_speed;
    }
    RoadSummary {
        cycle,
        per_segment: buckets
            .into_iter()
            .map(|((seg, dir), (count, sum))| (seg, dir, count, sum / count.max(1) as f64))
            .collect(),
        total_count,
        road_mean_speed: (total_count > 0).then(|| total_sum / total_count as f64),
    }
}
