//! Idealized wireless medium: unit-disk connectivity, inverse-square power
//! ordering, fixed per-kind processing delays, and strict V2V/V2I accounting.
//!
//! There is no loss model: every in-range receiver gets every broadcast, and
//! the base station covers the whole road. What the medium does enforce is
//! the cost split between the free ad-hoc channel and the operator uplink.

use serde::Serialize;

use crate::clustering::SlotAssignment;
use crate::engine::{Metrics, Seconds};
use crate::gathering::{AggregateRecord, TreeData};
use crate::mobility::{NodeId, NodeState, Position, SegmentId};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadioConfig {
    pub transmission_range_m: f64,
    /// Hello processing delay (HL_PT).
    pub hello_processing_s: Seconds,
    /// Generic packet processing delay (PK_PT).
    pub packet_processing_s: Seconds,
    /// One-time setup delay before a node enters cluster setup (IS_PT).
    pub initial_setup_s: Seconds,
    /// Recorded channel capacity; never enforced as a rate limit.
    pub capacity_mbps: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            transmission_range_m: 266.0,
            hello_processing_s: 0.1,
            packet_processing_s: 0.2,
            initial_setup_s: 0.1,
            capacity_mbps: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Medium {
    V2V,
    V2I,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    Hello,
    ClusterHeadNotify,
    Join,
    SlotAssign,
    TreeData,
    V2iAggregate,
    NodeReport,
}

impl MessageKind {
    /// Aggregates and individual node reports ride the operator uplink;
    /// everything else stays on the free ad-hoc medium.
    pub fn medium(self) -> Medium {
        match self {
            MessageKind::V2iAggregate | MessageKind::NodeReport => Medium::V2I,
            _ => Medium::V2V,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Hello => "hello",
            MessageKind::ClusterHeadNotify => "cluster_head_notify",
            MessageKind::Join => "join",
            MessageKind::SlotAssign => "slot_assign",
            MessageKind::TreeData => "tree_data",
            MessageKind::V2iAggregate => "v2i_aggregate",
            MessageKind::NodeReport => "node_report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    Node(NodeId),
    Broadcast,
    BaseStation,
}

/// Fields a node advertises in its periodic hello.
#[derive(Clone, Debug)]
pub struct HelloInfo {
    pub node: NodeId,
    pub position: Position,
    pub residual_energy: f64,
    pub state: NodeState,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub enum MessagePayload {
    Hello(HelloInfo),
    ClusterHeadNotify {
        head: NodeId,
        segment: SegmentId,
        direction: i8,
    },
    Join {
        member: NodeId,
        head: NodeId,
    },
    SlotAssign {
        head: NodeId,
        slots: Vec<SlotAssignment>,
    },
    TreeData(TreeData),
    V2iAggregate(AggregateRecord),
    NodeReport {
        speed_mps: f64,
        x: f64,
        segment: SegmentId,
        direction: i8,
    },
}

/// A typed protocol frame. The medium is derived from the kind, so the
/// V2V/V2I invariant holds by construction.
#[derive(Clone, Debug)]
pub struct Message {
    pub kind: MessageKind,
    pub src: NodeId,
    pub dst: Destination,
    pub medium: Medium,
    pub sent_at: Seconds,
    pub payload: MessagePayload,
}

impl Message {
    pub fn new(
        kind: MessageKind,
        src: NodeId,
        dst: Destination,
        sent_at: Seconds,
        payload: MessagePayload,
    ) -> Self {
        Self {
            kind,
            src,
            dst,
            medium: kind.medium(),
            sent_at,
            payload,
        }
    }
}

/// A scheduled reception.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delivery {
    pub to: NodeId,
    pub at: Seconds,
}

pub fn distance(a: Position, b: Position) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// Unit-disk connectivity; the boundary is inclusive.
pub fn in_range(a: Position, b: Position, cfg: &RadioConfig) -> bool {
    distance(a, b) <= cfg.transmission_range_m
}

/// Relative received power `1 / max(d^2, 1)`. Only the ordering is
/// meaningful; co-located nodes clamp to 1.
pub fn received_power(src: Position, dst: Position, cfg: &RadioConfig) -> f64 {
    assert!(
        in_range(src, dst, cfg),
        "received power is only defined for in-range pairs"
    );
    let d = distance(src, dst);
    1.0 / (d * d).max(1.0)
}

/// Processing delay between send and reception for a message kind.
pub fn delivery_delay(kind: MessageKind, cfg: &RadioConfig) -> Seconds {
    match kind {
        MessageKind::Hello => cfg.hello_processing_s,
        _ => cfg.packet_processing_s,
    }
}

/// Broadcasts `msg` from `src_pos`: every *other* node within range receives
/// it after the kind's processing delay. Counts one V2V transmission no
/// matter how many receivers there are (zero receivers is valid).
pub fn broadcast(
    msg: &Message,
    src_pos: Position,
    nodes: &[(NodeId, Position)],
    cfg: &RadioConfig,
    metrics: &mut Metrics,
) -> Vec<Delivery> {
    assert_eq!(msg.medium, Medium::V2V, "broadcast is a V2V operation");
    metrics.count_v2v(msg.kind.name());
    let at = msg.sent_at + delivery_delay(msg.kind, cfg);
    nodes
        .iter()
        .filter(|(id, pos)| *id != msg.src && in_range(src_pos, *pos, cfg))
        .map(|(id, _)| Delivery { to: *id, at })
        .collect()
}

/// Sends `msg` from `src_pos` to a single receiver at `dst_pos`. The
/// transmission is always counted; delivery happens only if the receiver is
/// in range at send time.
pub fn send(
    msg: &Message,
    src_pos: Position,
    dst_pos: Position,
    cfg: &RadioConfig,
    metrics: &mut Metrics,
) -> Option<Seconds> {
    assert_eq!(msg.medium, Medium::V2V, "send is a V2V operation");
    metrics.count_v2v(msg.kind.name());
    if in_range(src_pos, dst_pos, cfg) {
        Some(msg.sent_at + delivery_delay(msg.kind, cfg))
    } else {
        None
    }
}

/// Uplink to the base station, which covers the entire road: always
/// delivered, after the packet processing delay.
pub fn send_to_base_station(msg: &Message, cfg: &RadioConfig, metrics: &mut Metrics) -> Seconds {
    assert_eq!(msg.medium, Medium::V2I, "uplink requires a V2I message");
    metrics.count_v2i(msg.kind.name());
    msg.sent_at + cfg.packet_processing_s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RadioConfig {
        RadioConfig::default()
    }

    #[test]
    fn range_boundary_is_inclusive() {
        let c = cfg();
        assert!(in_range((0.0, 0.0), (0.0, 0.0), &c));
        assert!(in_range((0.0, 0.0), (266.0, 0.0), &c));
        assert!(!in_range((0.0, 0.0), (266.0 + 1e-9, 0.0), &c));
        assert!(!in_range((0.0, 0.0), (300.0, 0.0), &c));
    }

    #[test]
    fn range_is_symmetric() {
        let c = cfg();
        let pairs = [((0.0, 0.0), (100.0, 5.0)), ((1.0, 2.0), (400.0, 0.0))];
        for (a, b) in pairs {
            assert_eq!(in_range(a, b, &c), in_range(b, a, &c));
        }
    }

    #[test]
    fn power_normalization_and_clamp() {
        let c = cfg();
        assert_eq!(received_power((0.0, 0.0), (1.0, 0.0), &c), 1.0);
        assert_eq!(received_power((0.0, 0.0), (0.0, 0.0), &c), 1.0);
    }

    #[test]
    fn power_decays_with_distance() {
        let c = cfg();
        let near = received_power((0.0, 0.0), (10.0, 0.0), &c);
        let far = received_power((0.0, 0.0), (100.0, 0.0), &c);
        assert!(near > far);
    }

    #[test]
    #[should_panic(expected = "in-range")]
    fn power_rejects_out_of_range_pairs() {
        received_power((0.0, 0.0), (500.0, 0.0), &cfg());
    }

    #[test]
    fn medium_follows_kind() {
        assert_eq!(MessageKind::V2iAggregate.medium(), Medium::V2I);
        assert_eq!(MessageKind::NodeReport.medium(), Medium::V2I);
        for kind in [
            MessageKind::Hello,
            MessageKind::ClusterHeadNotify,
            MessageKind::Join,
            MessageKind::SlotAssign,
            MessageKind::TreeData,
        ] {
            assert_eq!(kind.medium(), Medium::V2V);
        }
    }

    fn hello(src: NodeId, sent_at: Seconds) -> Message {
        Message::new(
            MessageKind::Hello,
            src,
            Destination::Broadcast,
            sent_at,
            MessagePayload::Hello(HelloInfo {
                node: src,
                position: (0.0, 0.0),
                residual_energy: 1.0,
                state: NodeState::Sensing,
                weight: 0.0,
            }),
        )
    }

    #[test]
    fn isolated_broadcast_counts_one_transmission() {
        let c = cfg();
        let mut m = Metrics::default();
        let msg = hello(NodeId(0), 1.0);
        let deliveries = broadcast(&msg, (0.0, 0.0), &[(NodeId(0), (0.0, 0.0))], &c, &mut m);
        assert!(deliveries.is_empty());
        assert_eq!(m.v2v_messages, 1);
        assert_eq!(m.v2i_messages, 0);
    }

    #[test]
    fn broadcast_reaches_all_in_range_receivers() {
        let c = cfg();
        let mut m = Metrics::default();
        let mut msg = hello(NodeId(0), 5.0);
        msg.kind = MessageKind::ClusterHeadNotify;
        msg.payload = MessagePayload::ClusterHeadNotify {
            head: NodeId(0),
            segment: 0,
            direction: 1,
        };
        let nodes = [
            (NodeId(0), (0.0, 0.0)),
            (NodeId(1), (50.0, 0.0)),
            (NodeId(2), (100.0, 0.0)),
            (NodeId(3), (200.0, 0.0)),
            (NodeId(4), (500.0, 0.0)),
        ];
        let deliveries = broadcast(&msg, (0.0, 0.0), &nodes, &c, &mut m);
        assert_eq!(deliveries.len(), 3);
        for d in &deliveries {
            assert_eq!(d.at, 5.2); // PK_PT = 0.2 s
        }
        assert_eq!(m.v2v_messages, 1);
    }

    #[test]
    fn hello_uses_the_shorter_processing_delay() {
        let c = cfg();
        let mut m = Metrics::default();
        let msg = hello(NodeId(0), 5.0);
        let nodes = [(NodeId(1), (10.0, 0.0))];
        let deliveries = broadcast(&msg, (0.0, 0.0), &nodes, &c, &mut m);
        assert_eq!(deliveries, vec![Delivery { to: NodeId(1), at: 5.1 }]);
    }

    #[test]
    fn uplink_always_delivers_and_counts_v2i() {
        let c = cfg();
        let mut m = Metrics::default();
        for i in 0..100u32 {
            let msg = Message::new(
                MessageKind::NodeReport,
                NodeId(i),
                Destination::BaseStation,
                7.0,
                MessagePayload::NodeReport {
                    speed_mps: 10.0,
                    x: 1800.0,
                    segment: 17,
                    direction: 1,
                },
            );
            let at = send_to_base_station(&msg, &c, &mut m);
            assert_eq!(at, 7.2);
        }
        assert_eq!(m.v2i_messages, 100);
        assert_eq!(m.v2v_messages, 0);
    }

    #[test]
    fn direct_send_fails_cleanly_out_of_range() {
        let c = cfg();
        let mut m = Metrics::default();
        let mut msg = hello(NodeId(0), 2.0);
        msg.kind = MessageKind::Join;
        msg.dst = Destination::Node(NodeId(1));
        msg.payload = MessagePayload::Join {
            member: NodeId(0),
            head: NodeId(1),
        };
        assert_eq!(send(&msg, (0.0, 0.0), (100.0, 0.0), &c, &mut m), Some(2.2));
        assert_eq!(send(&msg, (0.0, 0.0), (400.0, 0.0), &c, &mut m), None);
        // Both attempts are transmissions.
        assert_eq!(m.v2v_messages, 2);
    }
}
