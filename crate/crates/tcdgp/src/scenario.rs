//! Scenario orchestration on top of the event engine.
//!
//! Three dissemination strategies share one road and one mobility model:
//!
//! 1. per node: every vehicle uplinks its own readings each report period;
//! 2. per cluster head: per-segment clusters gather in one hop (star) and
//!    only the head uplinks;
//! 3. full protocol: head designation (hello, election or rotation, join,
//!    slot assignment), tree gathering along a minimum spanning tree,
//!    aggregation at the head, then one uplink per cluster per cycle.
//!
//! Cluster membership, the gathering tree, and all readings freeze at the
//! end of head designation; the ground-truth oracle samples the same
//! instant, so a lossless cycle reproduces the true segment mean exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::clustering::{
    assign_slots, geographic_clusters, join_cluster, rotate_head, select_initial_head,
    split_network, Cluster, ClusterBounds, NeighborTable, WeightContext,
};
use crate::config::{ClusterMode, Scenario, SimConfig};
use crate::engine::{AggregateError, Engine, Metrics, Seconds, StreamId};
use crate::gathering::{
    build_mst, fuse, plan_transmissions, provider_aggregate, should_drop, star_tree,
    AggregateRecord, Reading, SpanningTree, TreeData,
};
use crate::mobility::{
    init_vehicles, step_mobility, NodeId, NodeState, Position, RoadGeometry, SegmentId,
    VehicleNode,
};
use crate::radio::{
    broadcast, received_power, send, send_to_base_station, Destination, HelloInfo, Message,
    MessageKind, MessagePayload,
};
use crate::report::{ClusterCycleStats, CycleRow, RunReport};

/// Gap between the last hello delivery and the election decision.
const ELECTION_EPSILON_S: Seconds = 0.05;

/// True mean speed over the vehicles currently in a segment/direction;
/// `None` marks an empty segment.
pub fn ground_truth_mean(
    vehicles: &[VehicleNode],
    geometry: &RoadGeometry,
    segment: SegmentId,
    direction: i8,
) -> Option<f64> {
    let speeds: Vec<f64> = vehicles
        .iter()
        .filter(|v| v.direction == direction && v.segment(geometry) == segment)
        .map(|v| v.speed_mps)
        .collect();
    (!speeds.is_empty()).then(|| speeds.iter().sum::<f64>() / speeds.len() as f64)
}

/// Identifies one gathering cluster within a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ClusterKey {
    Segment { segment: SegmentId, direction: i8 },
    Split { index: u32 },
}

#[derive(Debug)]
enum Ev {
    MobilityStep,
    CycleStart { cycle: u32 },
    HelloRound { cycle: u32 },
    HelloDeliveries { batch: Vec<(HelloInfo, Vec<NodeId>)> },
    Election { cycle: u32 },
    JoinRound { cycle: u32 },
    SlotRound { cycle: u32 },
    Freeze { cycle: u32 },
    TreeTx { key: ClusterKey, node: NodeId },
    TreeDeliver {
        key: ClusterKey,
        to: NodeId,
        sent_at: Seconds,
        frame: TreeData,
    },
    AggClose { key: ClusterKey },
    Disseminate { key: ClusterKey },
    BsReceive { key: ClusterKey, frame: TreeData },
    ReportRound { period: u32 },
}

struct HeardNotify {
    head: NodeId,
    power: f64,
    key: ClusterKey,
}

struct PendingCluster {
    head: NodeId,
    members: Vec<NodeId>,
}

/// Frozen per-cluster state of the cycle in flight.
struct LiveCluster {
    cycle: u32,
    segment: SegmentId,
    direction: i8,
    head: NodeId,
    member_count: u32,
    readings: BTreeMap<NodeId, Reading>,
    tree: SpanningTree,
    inbox: BTreeMap<NodeId, Vec<TreeData>>,
    closed: bool,
    final_frame: Option<TreeData>,
    tree_messages: u64,
    last_tree_delivery: Seconds,
    gat_start: Seconds,
    dis_start: Seconds,
}

struct Runner {
    config: SimConfig,
    vehicles: Vec<VehicleNode>,
    tables: Vec<NeighborTable>,
    prev_heads: BTreeMap<ClusterKey, NodeId>,
    pending: BTreeMap<ClusterKey, PendingCluster>,
    heard: BTreeMap<NodeId, Vec<HeardNotify>>,
    silent: BTreeSet<NodeId>,
    split_clusters: Option<Vec<Cluster>>,
    live: BTreeMap<ClusterKey, LiveCluster>,
    bs_store: BTreeMap<(u32, SegmentId, i8), AggregateRecord>,
    truth: BTreeMap<(u32, SegmentId, i8), (f64, u32)>,
    occupied_per_cycle: Vec<u32>,
    rows: Vec<CycleRow>,
    cluster_stats: Vec<ClusterCycleStats>,
    delivered_frames: Vec<TreeData>,
    records_by_cycle: BTreeMap<u32, Vec<AggregateRecord>>,
}

/// Executes one scenario to completion and assembles its report.
pub fn run_scenario(config: &SimConfig) -> RunReport {
    config.validate().expect("configuration must be valid");
    let started = Instant::now();

    let mut engine: Engine<Ev> = Engine::new(
        config.duration_s,
        config.seed,
        &[StreamId::Mobility, StreamId::Protocol],
    );
    let mut runner = Runner::new(config.clone(), &mut engine);

    // Mobility steps are scheduled ahead of all protocol events so that a
    // shared timestamp always resolves to "move first, then act".
    let steps = (config.duration_s / config.mobility_step_s).floor() as u64;
    for k in 1..=steps {
        engine.schedule(k as f64 * config.mobility_step_s, Ev::MobilityStep);
    }
    match config.scenario {
        Scenario::PerNode => {
            let periods = (config.duration_s / config.report_period_s).floor() as u32;
            for k in 1..=periods {
                engine.schedule(k as f64 * config.report_period_s, Ev::ReportRound { period: k });
            }
        }
        Scenario::PerClusterHead | Scenario::FullTcdgp => {
            for cycle in 0..config.cycle_count() {
                engine.schedule(
                    cycle as f64 * config.timers.full_s,
                    Ev::CycleStart { cycle },
                );
            }
        }
    }

    let metrics = engine.run_until(config.duration_s, |eng, ev| runner.handle(eng, ev));
    runner.finish(metrics, started.elapsed().as_secs_f64())
}

impl Runner {
    fn new(config: SimConfig, engine: &mut Engine<Ev>) -> Self {
        let vehicles = init_vehicles(&config.geometry, config.node_count, engine.rng_mut());
        let tables = vec![NeighborTable::default(); vehicles.len()];
        Self {
            config,
            vehicles,
            tables,
            prev_heads: BTreeMap::new(),
            pending: BTreeMap::new(),
            heard: BTreeMap::new(),
            silent: BTreeSet::new(),
            split_clusters: None,
            live: BTreeMap::new(),
            bs_store: BTreeMap::new(),
            truth: BTreeMap::new(),
            occupied_per_cycle: Vec::new(),
            rows: Vec::new(),
            cluster_stats: Vec::new(),
            delivered_frames: Vec::new(),
            records_by_cycle: BTreeMap::new(),
        }
    }

    fn handle(&mut self, engine: &mut Engine<Ev>, ev: Ev) {
        match ev {
            Ev::MobilityStep => self.on_mobility(engine),
            Ev::CycleStart { cycle } => self.on_cycle_start(engine, cycle),
            Ev::HelloRound { cycle } => self.on_hello_round(engine, cycle),
            Ev::HelloDeliveries { batch } => self.on_hello_deliveries(engine, batch),
            Ev::Election { cycle } => self.on_election(engine, cycle),
            Ev::JoinRound { cycle } => self.on_join_round(engine, cycle),
            Ev::SlotRound { cycle } => self.on_slot_round(engine, cycle),
            Ev::Freeze { cycle } => self.on_freeze(engine, cycle),
            Ev::TreeTx { key, node } => self.on_tree_tx(engine, key, node),
            Ev::TreeDeliver {
                key,
                to,
                sent_at,
                frame,
            } => self.on_tree_deliver(engine, key, to, sent_at, frame),
            Ev::AggClose { key } => self.on_agg_close(engine, key),
            Ev::Disseminate { key } => self.on_disseminate(engine, key),
            Ev::BsReceive { key, frame } => self.on_bs_receive(engine, key, frame),
            Ev::ReportRound { period } => self.on_report_round(engine, period),
        }
    }

    fn positions(&self) -> Vec<(NodeId, Position)> {
        self.vehicles
            .iter()
            .map(|v| (v.id, v.position(&self.config.geometry)))
            .collect()
    }

    fn position_of(&self, id: NodeId) -> Position {
        self.vehicles[id.0 as usize].position(&self.config.geometry)
    }

    fn apply_decay(&mut self, id: NodeId) {
        let decay = self.config.energy_decay_per_tx;
        if decay > 0.0 {
            let v = &mut self.vehicles[id.0 as usize];
            v.residual_energy = (v.residual_energy - decay).max(0.0);
        }
    }

    fn on_mobility(&mut self, engine: &mut Engine<Ev>) {
        step_mobility(
            &mut self.vehicles,
            &self.config.geometry,
            self.config.mobility_step_s,
            self.config.speed_jitter_mps,
            engine.rng_mut(),
        );
    }

    fn on_cycle_start(&mut self, engine: &mut Engine<Ev>, cycle: u32) {
        let t0 = engine.now();
        let radio = &self.config.radio;
        let hello_at = t0 + radio.initial_setup_s;
        let election_at = hello_at + radio.hello_processing_s + ELECTION_EPSILON_S;
        let join_at = election_at + radio.packet_processing_s;
        let slot_at = join_at + radio.packet_processing_s;
        engine.schedule(hello_at, Ev::HelloRound { cycle });
        engine.schedule(election_at, Ev::Election { cycle });
        engine.schedule(join_at, Ev::JoinRound { cycle });
        engine.schedule(slot_at, Ev::SlotRound { cycle });
        engine.schedule(t0 + self.config.timers.chd_s, Ev::Freeze { cycle });
    }

    /// Every node announces itself; one batch event applies all receptions
    /// at the common hello delivery instant.
    fn on_hello_round(&mut self, engine: &mut Engine<Ev>, _cycle: u32) {
        let now = engine.now();
        let positions = self.positions();
        let mut batch = Vec::with_capacity(self.vehicles.len());
        for idx in 0..self.vehicles.len() {
            let v = &self.vehicles[idx];
            let info = HelloInfo {
                node: v.id,
                position: positions[idx].1,
                residual_energy: v.residual_energy,
                state: v.state,
                weight: v.last_weight,
            };
            let msg = Message::new(
                MessageKind::Hello,
                v.id,
                Destination::Broadcast,
                now,
                MessagePayload::Hello(info.clone()),
            );
            let deliveries = broadcast(
                &msg,
                positions[idx].1,
                &positions,
                &self.config.radio,
                engine.metrics_mut(),
            );
            batch.push((info, deliveries.iter().map(|d| d.to).collect()));
            self.apply_decay(NodeId(idx as u32));
        }
        engine.schedule(
            now + self.config.radio.hello_processing_s,
            Ev::HelloDeliveries { batch },
        );
    }

    fn on_hello_deliveries(&mut self, engine: &mut Engine<Ev>, batch: Vec<(HelloInfo, Vec<NodeId>)>) {
        let now = engine.now();
        let geometry = self.config.geometry.clone();
        for (info, receivers) in &batch {
            for r in receivers {
                let owner_pos = self.position_of(*r);
                self.tables[r.0 as usize].update(owner_pos, info, now, &geometry);
            }
        }
        // Maintenance tick: age out anything not refreshed within a cycle.
        for table in &mut self.tables {
            table.evict_stale(now, self.config.timers.full_s);
        }
    }

    /// Current clusters for this cycle's election, by formation mode.
    fn election_clusters(&mut self) -> Vec<(ClusterKey, Vec<NodeId>)> {
        match self.config.cluster_mode {
            ClusterMode::Segment => geographic_clusters(&self.vehicles, &self.config.geometry)
                .into_iter()
                .map(|c| {
                    let ClusterBounds::Segment { segment, direction } = c.bounds else {
                        unreachable!("segment mode produces segment bounds");
                    };
                    (ClusterKey::Segment { segment, direction }, c.members)
                })
                .collect(),
            ClusterMode::Split => {
                if self.split_clusters.is_none() {
                    // Primal clusters form once and keep their membership.
                    let positions = self.positions();
                    self.split_clusters =
                        Some(split_network(&positions, self.config.target_clusters as usize));
                }
                self.split_clusters
                    .as_ref()
                    .expect("primal clusters exist")
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (ClusterKey::Split { index: i as u32 }, c.members.clone()))
                    .collect()
            }
        }
    }

    /// Weight-based election or rotation per cluster; the winner announces
    /// itself and members record the announcement's received power.
    fn on_election(&mut self, engine: &mut Engine<Ev>, _cycle: u32) {
        let now = engine.now();
        let clusters = self.election_clusters();
        let positions = self.positions();
        let geometry = self.config.geometry.clone();
        let params = self.config.weights;

        for (key, members) in clusters {
            let member_positions: Vec<(NodeId, Position)> = members
                .iter()
                .map(|id| (*id, positions[id.0 as usize].1))
                .collect();
            let ctx = WeightContext::for_members(&member_positions);
            let weights: Vec<(NodeId, f64)> = member_positions
                .iter()
                .map(|(id, pos)| {
                    let w = ctx.weight_of(
                        *pos,
                        self.vehicles[id.0 as usize].residual_energy,
                        &geometry,
                        &params,
                    );
                    (*id, w)
                })
                .collect();
            for (id, w) in &weights {
                self.vehicles[id.0 as usize].last_weight = *w;
            }

            let incumbent = self
                .prev_heads
                .get(&key)
                .copied()
                .filter(|h| members.contains(h));
            let winner = match incumbent {
                Some(h) => {
                    let head_weight = weights
                        .iter()
                        .find(|(id, _)| *id == h)
                        .map(|(_, w)| *w)
                        .expect("incumbent is a member");
                    let others: Vec<(NodeId, f64)> =
                        weights.iter().copied().filter(|(id, _)| *id != h).collect();
                    rotate_head((h, head_weight), &others)
                }
                None => select_initial_head(&member_positions),
            };

            for id in &members {
                self.vehicles[id.0 as usize].state = if *id == winner {
                    NodeState::ClusterHead
                } else {
                    NodeState::Sensing
                };
            }

            let winner_pos = positions[winner.0 as usize].1;
            let (segment, direction) = self.cluster_tag(key, winner);
            let msg = Message::new(
                MessageKind::ClusterHeadNotify,
                winner,
                Destination::Broadcast,
                now,
                MessagePayload::ClusterHeadNotify {
                    head: winner,
                    segment,
                    direction,
                },
            );
            let deliveries = broadcast(
                &msg,
                winner_pos,
                &positions,
                &self.config.radio,
                engine.metrics_mut(),
            );
            for d in &deliveries {
                let power =
                    received_power(winner_pos, positions[d.to.0 as usize].1, &self.config.radio);
                self.heard.entry(d.to).or_default().push(HeardNotify {
                    head: winner,
                    power,
                    key,
                });
            }
            self.apply_decay(winner);
            self.pending.insert(key, PendingCluster { head: winner, members });
        }
    }

    /// Members answer the announcement they heard for their own cluster; a
    /// node that heard nothing stays silent for the cycle.
    fn on_join_round(&mut self, engine: &mut Engine<Ev>, _cycle: u32) {
        let now = engine.now();
        let keys: Vec<ClusterKey> = self.pending.keys().copied().collect();
        for key in keys {
            let (head, members) = {
                let p = &self.pending[&key];
                (p.head, p.members.clone())
            };
            for member in members {
                if member == head {
                    continue;
                }
                let heard: Vec<(NodeId, f64)> = self
                    .heard
                    .get(&member)
                    .map(|list| {
                        list.iter()
                            .filter(|h| h.key == key)
                            .map(|h| (h.head, h.power))
                            .collect()
                    })
                    .unwrap_or_default();
                match join_cluster(&heard) {
                    Some(chosen) => {
                        let msg = Message::new(
                            MessageKind::Join,
                            member,
                            Destination::Node(chosen),
                            now,
                            MessagePayload::Join { member, head: chosen },
                        );
                        send(
                            &msg,
                            self.position_of(member),
                            self.position_of(chosen),
                            &self.config.radio,
                            engine.metrics_mut(),
                        );
                        self.apply_decay(member);
                    }
                    None => {
                        engine.metrics_mut().unclustered_node_cycles += 1;
                        self.silent.insert(member);
                    }
                }
            }
        }
        self.heard.clear();
    }

    /// Heads publish the TDMA schedule for the members that joined.
    fn on_slot_round(&mut self, engine: &mut Engine<Ev>, _cycle: u32) {
        let now = engine.now();
        let positions = self.positions();
        let keys: Vec<ClusterKey> = self.pending.keys().copied().collect();
        for key in keys {
            let (head, members) = {
                let p = &self.pending[&key];
                (p.head, p.members.clone())
            };
            let (slots, _) = assign_slots(&members, head, self.config.timers.gat_s);
            let msg = Message::new(
                MessageKind::SlotAssign,
                head,
                Destination::Broadcast,
                now,
                MessagePayload::SlotAssign { head, slots },
            );
            broadcast(
                &msg,
                positions[head.0 as usize].1,
                &positions,
                &self.config.radio,
                engine.metrics_mut(),
            );
            self.apply_decay(head);
        }
    }

    fn cluster_tag(&self, key: ClusterKey, head: NodeId) -> (SegmentId, i8) {
        match key {
            ClusterKey::Segment { segment, direction } => (segment, direction),
            ClusterKey::Split { .. } => {
                let v = &self.vehicles[head.0 as usize];
                (v.segment(&self.config.geometry), v.direction)
            }
        }
    }

    /// End of head designation: membership, readings, trees, and schedules
    /// freeze; ground truth samples the same instant.
    fn on_freeze(&mut self, engine: &mut Engine<Ev>, cycle: u32) {
        let now = engine.now();
        let timers = self.config.timers;
        let t0 = now - timers.chd_s;
        let geometry = self.config.geometry.clone();

        self.live.clear();

        // Readings freeze for every vehicle.
        for v in &mut self.vehicles {
            v.current_reading_mps = v.speed_mps;
        }

        // Ground truth for every occupied segment/direction at this instant.
        let mut occupancy: BTreeSet<(SegmentId, i8)> = BTreeSet::new();
        for v in &self.vehicles {
            occupancy.insert((v.segment(&geometry), v.direction));
        }
        for (segment, direction) in &occupancy {
            let mean = ground_truth_mean(&self.vehicles, &geometry, *segment, *direction)
                .expect("occupied segment has a mean");
            let count = self
                .vehicles
                .iter()
                .filter(|v| v.direction == *direction && v.segment(&geometry) == *segment)
                .count() as u32;
            self.truth.insert((cycle, *segment, *direction), (mean, count));
        }

        let clusters: Vec<(ClusterKey, Vec<NodeId>)> = match self.config.cluster_mode {
            ClusterMode::Segment => geographic_clusters(&self.vehicles, &geometry)
                .into_iter()
                .map(|c| {
                    let ClusterBounds::Segment { segment, direction } = c.bounds else {
                        unreachable!("segment mode produces segment bounds");
                    };
                    (ClusterKey::Segment { segment, direction }, c.members)
                })
                .collect(),
            ClusterMode::Split => self
                .split_clusters
                .as_ref()
                .expect("election ran before freeze")
                .iter()
                .enumerate()
                .map(|(i, c)| (ClusterKey::Split { index: i as u32 }, c.members.clone()))
                .collect(),
        };
        self.occupied_per_cycle.push(clusters.len() as u32);

        for (key, members) in clusters {
            let member_positions: Vec<(NodeId, Position)> = members
                .iter()
                .map(|id| (*id, self.position_of(*id)))
                .collect();

            let head = match self.pending.get(&key) {
                Some(p) if members.contains(&p.head) => p.head,
                _ => {
                    engine.metrics_mut().head_fallbacks += 1;
                    let h = select_initial_head(&member_positions);
                    self.vehicles[h.0 as usize].state = NodeState::ClusterHead;
                    h
                }
            };
            self.prev_heads.insert(key, head);
            let (segment, direction) = self.cluster_tag(key, head);

            let readings: BTreeMap<NodeId, Reading> = members
                .iter()
                .map(|id| {
                    let v = &self.vehicles[id.0 as usize];
                    (
                        *id,
                        Reading {
                            node: *id,
                            speed_mps: v.current_reading_mps,
                            segment: v.segment(&geometry),
                            direction: v.direction,
                            generated_at: now,
                        },
                    )
                })
                .collect();

            // Silent members stay out of the gathering tree; the head always
            // participates.
            let participants: Vec<(NodeId, Position)> = member_positions
                .iter()
                .copied()
                .filter(|(id, _)| *id == head || !self.silent.contains(id))
                .collect();

            let tree = match self.config.scenario {
                Scenario::PerClusterHead => {
                    let ids: Vec<NodeId> = participants.iter().map(|(id, _)| *id).collect();
                    star_tree(head, &ids)
                }
                Scenario::FullTcdgp => {
                    let (tree, unreachable) =
                        build_mst(head, &participants, &self.config.radio);
                    engine.metrics_mut().unreachable_members += unreachable.len() as u64;
                    tree
                }
                Scenario::PerNode => unreachable!("per-node scenario has no cycles"),
            };

            let (slots, slot_duration) =
                assign_slots(&tree.members(), head, self.config.timers.gat_s);
            let slot_index: BTreeMap<NodeId, u32> =
                slots.iter().map(|s| (s.node, s.index)).collect();
            let gat_start = timers.gat_start(t0);
            let plan = plan_transmissions(
                &tree,
                &slot_index,
                gat_start,
                slot_duration,
                self.config.radio.packet_processing_s,
            );
            for (node, tx_at) in &plan {
                engine.schedule(*tx_at, Ev::TreeTx { key, node: *node });
            }
            engine.schedule(timers.agg_close(t0), Ev::AggClose { key });
            engine.schedule(timers.dis_start(t0), Ev::Disseminate { key });

            self.live.insert(
                key,
                LiveCluster {
                    cycle,
                    segment,
                    direction,
                    head,
                    member_count: members.len() as u32,
                    readings,
                    tree,
                    inbox: BTreeMap::new(),
                    closed: false,
                    final_frame: None,
                    tree_messages: 0,
                    last_tree_delivery: gat_start,
                    gat_start,
                    dis_start: timers.dis_start(t0),
                },
            );
        }

        self.pending.clear();
        self.silent.clear();
    }

    /// One member transmits its fused frame to its tree parent.
    fn on_tree_tx(&mut self, engine: &mut Engine<Ev>, key: ClusterKey, node: NodeId) {
        let now = engine.now();
        let timers = self.config.timers;
        let (frame, parent, filtered_own) = {
            let lc = self.live.get_mut(&key).expect("live cluster for tree tx");
            let received = lc.inbox.remove(&node).unwrap_or_default();
            let own = lc.readings.get(&node).copied();
            let own_matches = own
                .map(|r| r.segment == lc.segment && r.direction == lc.direction)
                .unwrap_or(false);
            let frame = fuse(
                if own_matches { own.as_ref() } else { None },
                &received,
                lc.segment,
                lc.direction,
                lc.cycle,
                now,
            );
            lc.tree_messages += 1;
            let parent = lc.tree.parent(node).expect("non-root node has a parent");
            (frame, parent, own.is_some() && !own_matches)
        };
        if filtered_own {
            // The node's own reading belongs to another area: it relays its
            // children's data but contributes nothing itself.
            engine.metrics_mut().filter_drops += 1;
        }

        let msg = Message::new(
            MessageKind::TreeData,
            node,
            Destination::Node(parent),
            now,
            MessagePayload::TreeData(frame.clone()),
        );
        let delivery = send(
            &msg,
            self.position_of(node),
            self.position_of(parent),
            &self.config.radio,
            engine.metrics_mut(),
        );
        match delivery {
            Some(at) => engine.schedule(
                at,
                Ev::TreeDeliver {
                    key,
                    to: parent,
                    sent_at: now,
                    frame,
                },
            ),
            None => engine.metrics_mut().link_drops += 1,
        }
        self.apply_decay(node);
        let _ = timers;
    }

    fn on_tree_deliver(
        &mut self,
        engine: &mut Engine<Ev>,
        key: ClusterKey,
        to: NodeId,
        sent_at: Seconds,
        frame: TreeData,
    ) {
        let now = engine.now();
        let timers = self.config.timers;
        let lc = self.live.get_mut(&key).expect("live cluster for delivery");
        lc.last_tree_delivery = lc.last_tree_delivery.max(now);
        if now > lc.dis_start {
            engine.metrics_mut().phase_overruns += 1;
        }
        if lc.closed {
            engine.metrics_mut().late_drops += 1;
            return;
        }
        if should_drop(sent_at, &frame.record, lc.segment, lc.direction, now, &timers) {
            engine.metrics_mut().filter_drops += 1;
            return;
        }
        lc.inbox.entry(to).or_default().push(frame);
    }

    /// The head's aggregation slice at the tail of the gathering phase:
    /// fuse everything that arrived and close the cycle for this cluster.
    fn on_agg_close(&mut self, engine: &mut Engine<Ev>, key: ClusterKey) {
        let now = engine.now();
        let lc = self.live.get_mut(&key).expect("live cluster at close");
        lc.closed = true;
        let received = lc.inbox.remove(&lc.head).unwrap_or_default();
        let own = lc.readings.get(&lc.head).copied();
        lc.final_frame = Some(fuse(
            own.as_ref(),
            &received,
            lc.segment,
            lc.direction,
            lc.cycle,
            now,
        ));
    }

    fn on_disseminate(&mut self, engine: &mut Engine<Ev>, key: ClusterKey) {
        let now = engine.now();
        let (head, frame) = {
            let lc = self.live.get(&key).expect("live cluster at dissemination");
            (lc.head, lc.final_frame.clone().expect("closed before dissemination"))
        };
        let msg = Message::new(
            MessageKind::V2iAggregate,
            head,
            Destination::BaseStation,
            now,
            MessagePayload::V2iAggregate(frame.record.clone()),
        );
        let at = send_to_base_station(&msg, &self.config.radio, engine.metrics_mut());
        self.apply_decay(head);
        engine.schedule(at, Ev::BsReceive { key, frame });
    }

    fn on_bs_receive(&mut self, engine: &mut Engine<Ev>, key: ClusterKey, frame: TreeData) {
        let now = engine.now();
        engine.metrics_mut().delivered_aggregates += 1;
        let record = frame.record.clone();
        debug_assert!(
            frame
                .contributors
                .iter()
                .all(|c| c.segment == record.segment && c.direction == record.direction),
            "a fused record may only contain same-area, same-direction readings"
        );

        let lc = self.live.get(&key).expect("live cluster at reception");
        let (truth_mean, _) = self.truth[&(record.cycle, record.segment, record.direction)];
        let mean = record.mean_speed();
        let row = CycleRow {
            cycle: record.cycle,
            segment: record.segment,
            direction: record.direction,
            count: record.node_count,
            mean_speed: mean,
            truth_mean,
            abs_err: (mean - truth_mean).abs(),
        };
        engine.metrics_mut().aggregate_errors.push(AggregateError {
            cycle: row.cycle,
            segment: row.segment,
            direction: row.direction,
            abs_error: row.abs_err,
        });
        self.cluster_stats.push(ClusterCycleStats {
            cycle: record.cycle,
            segment: record.segment,
            direction: record.direction,
            head: lc.head,
            member_count: lc.member_count,
            tree_size: lc.tree.size() as u32,
            tree_messages: lc.tree_messages,
            missing_readings: lc.member_count - record.node_count,
            last_tree_delivery_offset: lc.last_tree_delivery - lc.gat_start,
            uplink_delivery_offset: now - lc.dis_start,
        });
        self.rows.push(row);
        self.records_by_cycle
            .entry(record.cycle)
            .or_default()
            .push(record.clone());
        self.bs_store
            .insert((record.cycle, record.segment, record.direction), record);
        self.delivered_frames.push(frame);
    }

    /// Per-node scenario: every vehicle uplinks one report; the provider
    /// aggregates them per segment at reception.
    fn on_report_round(&mut self, engine: &mut Engine<Ev>, period: u32) {
        let now = engine.now();
        let geometry = self.config.geometry.clone();
        let mut groups: BTreeMap<(SegmentId, i8), Vec<Reading>> = BTreeMap::new();
        for idx in 0..self.vehicles.len() {
            let (id, speed, x, segment, direction) = {
                let v = &self.vehicles[idx];
                (v.id, v.speed_mps, v.x, v.segment(&geometry), v.direction)
            };
            let msg = Message::new(
                MessageKind::NodeReport,
                id,
                Destination::BaseStation,
                now,
                MessagePayload::NodeReport {
                    speed_mps: speed,
                    x,
                    segment,
                    direction,
                },
            );
            send_to_base_station(&msg, &self.config.radio, engine.metrics_mut());
            self.apply_decay(id);
            groups.entry((segment, direction)).or_default().push(Reading {
                node: id,
                speed_mps: speed,
                segment,
                direction,
                generated_at: now,
            });
        }

        for ((segment, direction), readings) in groups {
            let truth = ground_truth_mean(&self.vehicles, &geometry, segment, direction)
                .expect("reported segment is occupied");
            self.truth
                .insert((period, segment, direction), (truth, readings.len() as u32));
            let record =
                AggregateRecord::from_readings(readings.iter(), segment, direction, period, now);
            let mean = record.mean_speed();
            let row = CycleRow {
                cycle: period,
                segment,
                direction,
                count: record.node_count,
                mean_speed: mean,
                truth_mean: truth,
                abs_err: (mean - truth).abs(),
            };
            engine.metrics_mut().aggregate_errors.push(AggregateError {
                cycle: period,
                segment,
                direction,
                abs_error: row.abs_err,
            });
            self.rows.push(row);
            self.records_by_cycle.entry(period).or_default().push(record.clone());
            self.bs_store.insert((period, segment, direction), record);
        }
    }

    fn finish(self, metrics: Metrics, runtime_seconds: f64) -> RunReport {
        let road_summaries = self
            .records_by_cycle
            .iter()
            .map(|(cycle, records)| provider_aggregate(*cycle, records))
            .collect();
        let mut report = RunReport::new(self.config, metrics, self.rows);
        report.runtime_seconds = runtime_seconds;
        report.cluster_stats = self.cluster_stats;
        report.road_summaries = road_summaries;
        report
    }
}

/// Per-cycle cluster count (the dissemination oracle used by tests): one
/// uplink is due per live cluster per cycle.
pub fn occupied_clusters_per_cycle(report: &RunReport) -> Vec<u32> {
    let mut per_cycle: BTreeMap<u32, u32> = BTreeMap::new();
    for s in &report.cluster_stats {
        *per_cycle.entry(s.cycle).or_insert(0) += 1;
    }
    per_cycle.into_values().collect()
}
