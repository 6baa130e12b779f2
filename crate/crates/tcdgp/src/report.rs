//! Run reports: the per-cycle aggregate table plus counters, emitted as CSV
//! or JSON. Output is a pure function of (config, seed), so identical runs
//! produce byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::{OutputFormat, SimConfig};
use crate::engine::{Metrics, Seconds};
use crate::gathering::RoadSummary;
use crate::mobility::{NodeId, SegmentId};

/// One emitted aggregate, joined with its ground-truth row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRow {
    pub cycle: u32,
    pub segment: SegmentId,
    pub direction: i8,
    pub count: u32,
    pub mean_speed: f64,
    pub truth_mean: f64,
    pub abs_err: f64,
}

/// Per-cluster per-cycle diagnostics kept for verification; not part of the
/// emitted report files.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCycleStats {
    pub cycle: u32,
    pub segment: SegmentId,
    pub direction: i8,
    pub head: NodeId,
    /// Vehicles in the cluster at the freeze instant.
    pub member_count: u32,
    /// Participants wired into the gathering tree (including the head).
    pub tree_size: u32,
    pub tree_messages: u64,
    /// Readings missing from the head's record relative to the membership.
    pub missing_readings: u32,
    /// Latest tree-frame delivery, relative to the gathering window start.
    pub last_tree_delivery_offset: Seconds,
    /// Uplink delivery instant, relative to the dissemination window start.
    pub uplink_delivery_offset: Seconds,
}

const CSV_HEADER: &str = "cycle,segment,direction,count,mean_speed,truth_mean,abs_err";

/// Complete result of one run.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: SimConfig,
    pub metrics: Metrics,
    pub cycles: Vec<CycleRow>,
    /// Wall-clock runtime; reported on stderr only, never serialized, so
    /// report files stay deterministic.
    #[serde(skip)]
    pub runtime_seconds: f64,
    #[serde(skip)]
    pub cluster_stats: Vec<ClusterCycleStats>,
    #[serde(skip)]
    pub road_summaries: Vec<RoadSummary>,
}

impl RunReport {
    pub fn new(config: SimConfig, metrics: Metrics, cycles: Vec<CycleRow>) -> Self {
        Self {
            schema_version: 1,
            config,
            metrics,
            cycles,
            runtime_seconds: 0.0,
            cluster_stats: Vec::new(),
            road_summaries: Vec::new(),
        }
    }

    /// Cycle ids whose clusters lost no reading anywhere.
    pub fn zero_drop_cycles(&self) -> Vec<u32> {
        let mut cycles: Vec<u32> = Vec::new();
        let mut dropped: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
        for s in &self.cluster_stats {
            if s.missing_readings > 0 {
                dropped.insert(s.cycle);
            }
        }
        for s in &self.cluster_stats {
            if !dropped.contains(&s.cycle) && !cycles.contains(&s.cycle) {
                cycles.push(s.cycle);
            }
        }
        cycles
    }

    /// Config echo and counters as `#`-prefixed lines, then the fixed
    /// header and one row per emitted aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# scenario={} nodes={} duration={} seed={} cluster_mode={:?} format=csv\n",
            self.config.scenario.number(),
            self.config.node_count,
            self.config.duration_s,
            self.config.seed,
            self.config.cluster_mode,
        ));
        out.push_str(&format!(
            "# v2i_messages={} v2v_messages={} delivered_aggregates={} drop_events={} max_abs_error={}\n",
            self.metrics.v2i_messages,
            self.metrics.v2v_messages,
            self.metrics.delivered_aggregates,
            self.metrics.drop_events(),
            self.metrics.max_abs_error(),
        ));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.cycles {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.cycle,
                row.segment,
                row.direction,
                row.count,
                row.mean_speed,
                row.truth_mean,
                row.abs_err
            ));
        }
        out
    }

    /// Top-level keys: `schema_version`, `config`, `metrics`, `cycles`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    /// Writes to `path`, or to stdout when no path is given.
    pub fn emit(&self, path: Option<&Path>, format: OutputFormat) -> std::io::Result<()> {
        let body = self.render(format);
        match path {
            Some(path) => std::fs::write(path, body),
            None => std::io::stdout().write_all(body.as_bytes()),
        }
    }

    /// One-line result summary for the terminal.
    pub fn summary_line(&self) -> String {
        format!(
            "seed={} scenario={} nodes={} v2i={} v2v={} aggregates={} drops={} max_abs_err={:.3e}",
            self.config.seed,
            self.config.scenario.number(),
            self.config.node_count,
            self.metrics.v2i_messages,
            self.metrics.v2v_messages,
            self.metrics.delivered_aggregates,
            self.metrics.drop_events(),
            self.metrics.max_abs_error(),
        )
    }
}
