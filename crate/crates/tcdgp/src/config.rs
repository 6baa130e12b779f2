//! Run configuration: defaults from the standard simulation setup, an
//! optional flat key-value config file, and command-line flags. Precedence
//! is flags over file over defaults; unknown keys are rejected.

use std::fmt;
use std::path::PathBuf;

use clap::Parser;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::WeightParams;
use crate::gathering::CycleTimers;
use crate::mobility::RoadGeometry;
use crate::radio::RadioConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// Every node uplinks its own readings periodically.
    PerNode,
    /// Per-segment clusters gather in one hop; only heads uplink.
    PerClusterHead,
    /// The full protocol: election, tree gathering, then dissemination.
    FullTcdgp,
}

impl Scenario {
    pub fn number(self) -> u8 {
        match self {
            Scenario::PerNode => 1,
            Scenario::PerClusterHead => 2,
            Scenario::FullTcdgp => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Scenario::PerNode),
            2 => Some(Scenario::PerClusterHead),
            3 => Some(Scenario::FullTcdgp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    /// Base-station recursive bisection into a fixed cluster count.
    Split,
    /// One cluster per road segment per travel direction.
    Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputFormat::Csv => write!(f, "csv"),
            OutputFormat::Json => write!(f, "json"),
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, Serialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub node_count: u32,
    pub duration_s: f64,
    pub seed: u64,
    pub geometry: RoadGeometry,
    pub radio: RadioConfig,
    pub timers: CycleTimers,
    pub weights: WeightParams,
    pub cluster_mode: ClusterMode,
    /// Per-node uplink period of the per-node scenario.
    pub report_period_s: f64,
    /// Cluster count for split-mode formation.
    pub target_clusters: u32,
    pub mobility_step_s: f64,
    pub speed_jitter_mps: f64,
    /// Residual-energy cost per transmission; 0 disables energy decay.
    pub energy_decay_per_tx: f64,
    #[serde(skip)]
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::FullTcdgp,
            node_count: 100,
            duration_s: 600.0,
            seed: 1,
            geometry: RoadGeometry::default_road(),
            radio: RadioConfig::default(),
            timers: CycleTimers::default(),
            weights: WeightParams::default(),
            cluster_mode: ClusterMode::Segment,
            report_period_s: 5.0,
            target_clusters: 18,
            mobility_step_s: 0.5,
            speed_jitter_mps: 1.0,
            energy_decay_per_tx: 0.0,
            output_path: None,
            output_format: OutputFormat::Csv,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::InvalidValue {
                    field,
                    reason: format!("{v} is not positive"),
                })
            }
        }

        if self.node_count == 0 {
            return Err(ConfigError::InvalidValue {
                field: "nodes",
                reason: "node count must be at least 1".into(),
            });
        }
        positive("duration", self.duration_s)?;
        positive("report_period", self.report_period_s)?;
        positive("mobility_step", self.mobility_step_s)?;
        positive("transmission_range", self.radio.transmission_range_m)?;
        if self.speed_jitter_mps < 0.0 {
            return Err(ConfigError::InvalidValue {
                field: "speed_jitter",
                reason: "speed jitter must be nonnegative".into(),
            });
        }
        if self.energy_decay_per_tx < 0.0 {
            return Err(ConfigError::InvalidValue {
                field: "energy_decay",
                reason: "energy decay must be nonnegative".into(),
            });
        }
        if self.radio.hello_processing_s < 0.0
            || self.radio.packet_processing_s < 0.0
            || self.radio.initial_setup_s < 0.0
        {
            return Err(ConfigError::InvalidValue {
                field: "processing delays",
                reason: "delays must be nonnegative".into(),
            });
        }
        if !self.timers.is_valid() {
            return Err(ConfigError::InvalidValue {
                field: "timers",
                reason: "phase durations must be positive and fit the cycle".into(),
            });
        }
        if !self.weights.is_valid() {
            return Err(ConfigError::InvalidValue {
                field: "weights",
                reason: "coefficients must be nonnegative and sum to 1".into(),
            });
        }
        if self.cluster_mode == ClusterMode::Split {
            if self.target_clusters == 0 {
                return Err(ConfigError::InvalidValue {
                    field: "target_clusters",
                    reason: "split mode needs at least one cluster".into(),
                });
            }
            if self.target_clusters > self.node_count {
                return Err(ConfigError::InvalidValue {
                    field: "target_clusters",
                    reason: format!(
                        "cannot form {} clusters from {} nodes",
                        self.target_clusters, self.node_count
                    ),
                });
            }
        }
        Ok(())
    }

    /// Number of whole gathering cycles in the run.
    pub fn cycle_count(&self) -> u32 {
        (self.duration_s / self.timers.full_s).floor() as u32
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Cli(#[from] clap::Error),
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: &'static str, reason: String },
    #[error("invalid geometry: {0}")]
    Geometry(#[from] crate::mobility::GeometryError),
    #[error("invalid --seeds range {0:?}: expected A..B with A <= B")]
    SeedRange(String),
}

/// Command-line interface of the simulator.
#[derive(Debug, Parser)]
#[command(
    name = "tcdgp",
    about = "Simulates V2I traffic of per-node, per-cluster-head, and tree-clustered data gathering on a segmented road"
)]
pub struct CliArgs {
    /// Scenario to run: 1 = per node, 2 = per cluster head, 3 = full protocol
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub scenario: Option<u8>,

    /// Number of vehicles on the road
    #[arg(long)]
    pub nodes: Option<u32>,

    /// Simulated time in seconds
    #[arg(long)]
    pub duration: Option<f64>,

    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,

    /// Inclusive seed sweep "A..B"; one isolated run per seed
    #[arg(long, conflicts_with = "seed")]
    pub seeds: Option<String>,

    /// Config file (flat key = value pairs)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Report file path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Report format
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,

    /// Cluster formation mode
    #[arg(long = "cluster-mode", value_enum)]
    pub cluster_mode: Option<ClusterMode>,
}

/// Flat config-file schema; every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: Option<u8>,
    nodes: Option<u32>,
    duration: Option<f64>,
    seed: Option<u64>,
    road_length: Option<f64>,
    road_width: Option<f64>,
    lanes: Option<u32>,
    segment_length: Option<f64>,
    transmission_range: Option<f64>,
    hello_processing: Option<f64>,
    packet_processing: Option<f64>,
    initial_setup: Option<f64>,
    capacity_mbps: Option<f64>,
    full_duration: Option<f64>,
    chd_duration: Option<f64>,
    gat_duration: Option<f64>,
    agg_duration: Option<f64>,
    dis_duration: Option<f64>,
    validity_window: Option<f64>,
    w_energy: Option<f64>,
    w_center: Option<f64>,
    w_bs: Option<f64>,
    cluster_mode: Option<ClusterMode>,
    report_period: Option<f64>,
    target_clusters: Option<u32>,
    mobility_step: Option<f64>,
    speed_jitter: Option<f64>,
    energy_decay: Option<f64>,
    out: Option<PathBuf>,
    format: Option<OutputFormat>,
}

/// Inclusive seed range of a sweep.
pub type SeedRange = (u64, u64);

/// Parses command-line arguments (the first item is the program name) into
/// a validated configuration, an optional seed sweep, and notices about
/// ignored scenario-irrelevant settings.
pub fn parse_config<I, S>(args: I) -> Result<(SimConfig, Option<SeedRange>, Vec<String>), ConfigError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = CliArgs::try_parse_from(args)?;
    build_config(cli)
}

/// Merges defaults, the optional config file, and CLI flags, then validates.
pub fn build_config(
    cli: CliArgs,
) -> Result<(SimConfig, Option<SeedRange>, Vec<String>), ConfigError> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            toml::from_str::<FileConfig>(&text).map_err(|source| ConfigError::Parse {
                path: path.clone(),
                source: Box::new(source),
            })?
        }
        None => FileConfig::default(),
    };

    let mut config = SimConfig::default();
    let mut touched: Vec<&'static str> = Vec::new();
    macro_rules! apply {
        ($field:expr, $value:expr, $name:literal) => {
            if let Some(v) = $value {
                $field = v;
                touched.push($name);
            }
        };
    }

    // File layer.
    if let Some(n) = file.scenario {
        config.scenario = Scenario::from_number(n).ok_or(ConfigError::InvalidValue {
            field: "scenario",
            reason: format!("{n} is not one of 1, 2, 3"),
        })?;
        touched.push("scenario");
    }
    apply!(config.node_count, file.nodes, "nodes");
    apply!(config.duration_s, file.duration, "duration");
    apply!(config.seed, file.seed, "seed");
    let geom_touched = file.road_length.is_some()
        || file.road_width.is_some()
        || file.lanes.is_some()
        || file.segment_length.is_some();
    if geom_touched {
        config.geometry = RoadGeometry::new(
            file.road_length.unwrap_or(config.geometry.length_m),
            file.road_width.unwrap_or(config.geometry.width_m),
            file.lanes.unwrap_or(config.geometry.lanes),
            file.segment_length.unwrap_or(config.geometry.segment_length_m),
        )?;
    }
    apply!(config.radio.transmission_range_m, file.transmission_range, "transmission_range");
    apply!(config.radio.hello_processing_s, file.hello_processing, "hello_processing");
    apply!(config.radio.packet_processing_s, file.packet_processing, "packet_processing");
    apply!(config.radio.initial_setup_s, file.initial_setup, "initial_setup");
    apply!(config.radio.capacity_mbps, file.capacity_mbps, "capacity_mbps");
    apply!(config.timers.full_s, file.full_duration, "full_duration");
    apply!(config.timers.chd_s, file.chd_duration, "chd_duration");
    apply!(config.timers.gat_s, file.gat_duration, "gat_duration");
    apply!(config.timers.agg_s, file.agg_duration, "agg_duration");
    apply!(config.timers.dis_s, file.dis_duration, "dis_duration");
    apply!(config.timers.validity_window_s, file.validity_window, "validity_window");
    apply!(config.weights.w_energy, file.w_energy, "weights");
    apply!(config.weights.w_center, file.w_center, "weights");
    apply!(config.weights.w_bs, file.w_bs, "weights");
    apply!(config.cluster_mode, file.cluster_mode, "cluster_mode");
    apply!(config.report_period_s, file.report_period, "report_period");
    apply!(config.target_clusters, file.target_clusters, "target_clusters");
    apply!(config.mobility_step_s, file.mobility_step, "mobility_step");
    apply!(config.speed_jitter_mps, file.speed_jitter, "speed_jitter");
    apply!(config.energy_decay_per_tx, file.energy_decay, "energy_decay");
    if let Some(out) = file.out {
        config.output_path = Some(out);
    }
    apply!(config.output_format, file.format, "format");

    // CLI layer wins over the file.
    if let Some(n) = cli.scenario {
        config.scenario = Scenario::from_number(n).expect("clap range-checked");
        touched.push("scenario");
    }
    apply!(config.node_count, cli.nodes, "nodes");
    apply!(config.duration_s, cli.duration, "duration");
    apply!(config.seed, cli.seed, "seed");
    apply!(config.cluster_mode, cli.cluster_mode, "cluster_mode");
    apply!(config.output_format, cli.format, "format");
    if let Some(out) = cli.out {
        config.output_path = Some(out);
    }

    let seeds = match &cli.seeds {
        Some(spec) => Some(parse_seed_range(spec)?),
        None => None,
    };

    config.validate()?;
    let notices = relevance_notices(&config, &touched);
    Ok((config, seeds, notices))
}

fn parse_seed_range(spec: &str) -> Result<SeedRange, ConfigError> {
    let err = || ConfigError::SeedRange(spec.to_string());
    let (a, b) = spec.split_once("..").ok_or_else(err)?;
    let a: u64 = a.trim().parse().map_err(|_| err())?;
    let b: u64 = b.trim().parse().map_err(|_| err())?;
    if a > b {
        return Err(err());
    }
    Ok((a, b))
}

/// Fields the selected scenario never reads produce a notice, not an error.
fn relevance_notices(config: &SimConfig, touched: &[&'static str]) -> Vec<String> {
    let mut notices = Vec::new();
    let mut note = |field: &str| {
        notices.push(format!(
            "{field} is ignored by scenario {}",
            config.scenario.number()
        ));
    };
    match config.scenario {
        Scenario::PerNode => {
            for field in ["cluster_mode", "weights", "target_clusters", "validity_window"] {
                if touched.contains(&field) {
                    note(field);
                }
            }
        }
        Scenario::PerClusterHead | Scenario::FullTcdgp => {
            if touched.contains(&"report_period") {
                note("report_period");
            }
            if config.cluster_mode == ClusterMode::Segment && touched.contains(&"target_clusters")
            {
                note("target_clusters");
            }
        }
    }
    notices
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<(SimConfig, Option<SeedRange>, Vec<String>), ConfigError> {
        parse_config(std::iter::once("tcdgp").chain(args.iter().copied()))
    }

    #[test]
    fn defaults_match_the_standard_setup() {
        let (config, seeds, _) = parse(&[]).unwrap();
        assert_eq!(config.scenario, Scenario::FullTcdgp);
        assert_eq!(config.duration_s, 600.0);
        assert_eq!(config.geometry.segment_count, 18);
        assert_eq!(config.radio.transmission_range_m, 266.0);
        assert_eq!(config.timers.full_s, 5.0);
        assert_eq!(config.cycle_count(), 120);
        assert!(seeds.is_none());
    }

    #[test]
    fn cli_overrides_defaults() {
        let (config, _, _) = parse(&["--nodes", "1000", "--scenario", "1"]).unwrap();
        assert_eq!(config.node_count, 1000);
        assert_eq!(config.scenario, Scenario::PerNode);
    }

    #[test]
    fn zero_nodes_is_rejected_naming_the_field() {
        let err = parse(&["--nodes", "0"]).unwrap_err();
        assert!(err.to_string().contains("nodes"));
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(parse(&["--bogus", "1"]).is_err());
    }

    #[test]
    fn seed_sweep_parses_inclusive_ranges() {
        let (_, seeds, _) = parse(&["--seeds", "3..7"]).unwrap();
        assert_eq!(seeds, Some((3, 7)));
        assert!(parse(&["--seeds", "9..2"]).is_err());
        assert!(parse(&["--seeds", "abc"]).is_err());
    }

    #[test]
    fn config_file_layers_between_defaults_and_flags() {
        let dir = std::env::temp_dir().join(format!("tcdgp-config-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "nodes = 77\nduration = 50.0\nseed = 9\n").unwrap();
        let (config, _, _) = parse(&[
            "--config",
            path.to_str().unwrap(),
            "--nodes",
            "88",
        ])
        .unwrap();
        assert_eq!(config.node_count, 88); // flag wins
        assert_eq!(config.duration_s, 50.0); // file wins over default
        assert_eq!(config.seed, 9);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_config_file_keys_are_rejected() {
        let dir = std::env::temp_dir().join(format!("tcdgp-config-unknown-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "nodez = 5\n").unwrap();
        let err = parse(&["--config", path.to_str().unwrap()]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn irrelevant_fields_produce_notices() {
        let (_, _, notices) = parse(&["--scenario", "1", "--cluster-mode", "split"]).unwrap();
        assert!(notices.iter().any(|n| n.contains("cluster_mode")));
        let (_, _, none) = parse(&["--scenario", "3"]).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let dir = std::env::temp_dir().join(format!("tcdgp-config-weights-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.toml");
        std::fs::write(&path, "w_energy = 0.9\nw_center = 0.9\nw_bs = 0.9\n").unwrap();
        let err = parse(&["--config", path.to_str().unwrap()]).unwrap_err();
        assert!(err.to_string().contains("weights"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_mode_cannot_ask_for_more_clusters_than_nodes() {
        // Default target of 18 clusters exceeds a 10-node network.
        let err = parse(&["--cluster-mode", "split", "--nodes", "10"]).unwrap_err();
        assert!(err.to_string().contains("target_clusters"));
    }
}
