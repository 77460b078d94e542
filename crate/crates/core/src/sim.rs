//! Closed-loop experiments: channel draw, precoding from CSIT, allocation,
//! link evaluation on the true channel, queue update and learning, frame by
//! frame, for every scheme of a comparison in lockstep.
//!
//! All schemes of one replication see the same channel and arrival draws.
//! Replications and sweep points run on a small worker pool; results are
//! sorted back into a fixed order, so output does not depend on scheduling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::allocator::{ConstraintConfig, Controller, LearningConfig, ValueMode};
use crate::channel::{draw_channel, ClusterConfig, CsitQuality};
use crate::error::{Error, Result};
use crate::hcomp::{evaluate_link, BasisCache, PrecoderSet, StreamSplit};
use crate::queueing::{draw_packets, whole_bits, PacketTracker, QueueState, TrafficConfig};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "QAH-CoMP")]
    Qah,
    #[serde(rename = "CAH-CoMP")]
    Cah,
    #[serde(rename = "JP-CoMP")]
    Jp,
    #[serde(rename = "CB-CoMP")]
    Cb,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Qah, Scheme::Cah, Scheme::Jp, Scheme::Cb];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Qah => "QAH-CoMP",
            Scheme::Cah => "CAH-CoMP",
            Scheme::Jp => "JP-CoMP",
            Scheme::Cb => "CB-CoMP",
        }
    }

    /// Stream split of the scheme; the hybrid schemes use `hybrid`.
    pub fn split(self, cluster: &ClusterConfig, hybrid: &StreamSplit) -> StreamSplit {
        match self {
            Scheme::Qah | Scheme::Cah => hybrid.clone(),
            Scheme::Jp => StreamSplit::joint(cluster),
            Scheme::Cb => StreamSplit::coordinated(cluster),
        }
    }

    /// Only QAH-CoMP learns values; the baselines are queue-blind
    /// throughput maximizers.
    pub fn value_mode(self, baseline_horizon_frames: f64) -> ValueMode {
        match self {
            Scheme::Qah => ValueMode::Learned,
            _ => ValueMode::FrozenLinear { horizon_frames: baseline_horizon_frames },
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        match key.as_str() {
            "qah" | "qahcomp" => Ok(Scheme::Qah),
            "cah" | "cahcomp" => Ok(Scheme::Cah),
            "jp" | "jpcomp" => Ok(Scheme::Jp),
            "cb" | "cbcomp" => Ok(Scheme::Cb),
            _ => Err(Error::InvalidConfig(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Packets per second, applied to every UE.
    ArrivalRate,
    /// Per-RRH average power limit in dBm.
    MaxPowerDbm,
    /// Per-RRH fronthaul limit in Mbit/s.
    MaxFronthaulMbps,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::ArrivalRate => "arrival_rate",
            SweepParameter::MaxPowerDbm => "max_power_dbm",
            SweepParameter::MaxFronthaulMbps => "max_fronthaul_mbps",
        }
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "arrival_rate" | "lambda" => Ok(SweepParameter::ArrivalRate),
            "max_power_dbm" | "p_max" => Ok(SweepParameter::MaxPowerDbm),
            "max_fronthaul_mbps" | "r_max" => Ok(SweepParameter::MaxFronthaulMbps),
            _ => Err(Error::InvalidConfig(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub cluster: ClusterConfig,
    pub traffic: TrafficConfig,
    pub constraints: ConstraintConfig,
    pub learning: LearningConfig,
    pub schemes: Vec<Scheme>,
    /// Stream split of the hybrid schemes.
    pub split: Option<StreamSplit>,
    /// CSIT error standard deviation for every link.
    pub sigma: f64,
    pub frames: u64,
    /// Frames excluded from averages; `None` means the first 20%.
    pub warmup: Option<u64>,
    pub seed: u64,
    pub replications: usize,
    /// Slope of the baselines' frozen linear value, in frames of delay.
    pub baseline_horizon_frames: f64,
    pub sweep: Option<Sweep>,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cluster = ClusterConfig { link_gain_db: -20.0, ..ClusterConfig::default() };
        let m = cluster.rrhs;
        Self {
            cluster,
            traffic: TrafficConfig::default(),
            constraints: ConstraintConfig::uniform(m, crate::dbm_to_watts(10.0), 20e6),
            learning: LearningConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            split: None,
            sigma: 0.05,
            frames: 20_000,
            warmup: None,
            seed: 1,
            replications: 20,
            baseline_horizon_frames: 20.0,
            sweep: None,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn warmup_frames(&self) -> u64 {
        self.warmup.unwrap_or(self.frames / 5)
    }

    pub fn hybrid_split(&self) -> StreamSplit {
        self.split.clone().unwrap_or_else(|| StreamSplit::hybrid(&self.cluster))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.cluster.rrhs;
        self.cluster.validate()?;
        self.traffic.validate(m)?;
        self.constraints.validate(m)?;
        self.learning.validate()?;
        self.hybrid_split().validate(&self.cluster)?;
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("no schemes selected".into()));
        }
        if self.frames == 0 || self.warmup_frames() >= self.frames {
            return Err(Error::InvalidConfig(format!(
                "warmup {} must be below frame count {}",
                self.warmup_frames(),
                self.frames
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("at least one replication required".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma <= 1.0) {
            return Err(Error::InvalidConfig(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if !(self.baseline_horizon_frames > 0.0 && self.baseline_horizon_frames.is_finite()) {
            return Err(Error::InvalidConfig("baseline_horizon_frames must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::InvalidConfig("sweep grid is empty".into()));
            }
            for &v in &s.values {
                self.at_point(s.parameter, v).validate_point()?;
            }
        }
        Ok(())
    }

    fn validate_point(&self) -> Result<()> {
        self.traffic.validate(self.cluster.rrhs)?;
        self.constraints.validate(self.cluster.rrhs)
    }

    /// Copy of the configuration with one sweep parameter set.
    pub fn at_point(&self, parameter: SweepParameter, value: f64) -> Self {
        let mut c = self.clone();
        let m = c.cluster.rrhs;
        match parameter {
            SweepParameter::ArrivalRate => c.traffic.arrival_rate = vec![value; m],
            SweepParameter::MaxPowerDbm => c.constraints.max_power_w = vec![crate::dbm_to_watts(value); m],
            SweepParameter::MaxFronthaulMbps => c.constraints.max_fronthaul_bps = vec![value * 1e6; m],
        }
        c.sweep = None;
        c
    }

    /// The sweep grid, or the single point of an unswept run.
    pub fn points(&self) -> Vec<(Option<SweepParameter>, f64)> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| (Some(s.parameter), v)).collect(),
            None => vec![(None, 0.0)],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { path: "<toml>".into(), message: e.to_string() })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format { path: "<json>".into(), message: e.to_string() })
    }

    /// Loads a TOML or JSON file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| match e {
            Error::Format { message, .. } => Error::Format { path: path.to_path_buf(), message },
            other => other,
        })
    }
}

/// Metrics of one scheme in one replication at one sweep point. This is one
/// CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub parameter: String,
    pub value: f64,
    pub replication: usize,
    pub frames: u64,
    pub warmup: u64,
    /// Little's law with the accepted (non-dropped) arrival rate.
    pub delay_s: f64,
    /// Little's law with the offered load.
    pub delay_offered_s: f64,
    /// Mean sojourn of served bits from FIFO tags.
    pub delay_tagged_s: f64,
    pub backlog_bits: f64,
    pub power_w: f64,
    pub max_power_ratio: f64,
    pub fronthaul_bps: f64,
    pub max_fronthaul_ratio: f64,
    pub drop_rate: f64,
    pub shared_failure_rate: f64,
    pub private_failure_rate: f64,
    pub arrived_bits: u64,
    pub delivered_bits: u64,
    pub dropped_bits: u64,
    pub final_backlog_bits: u64,
    pub min_multiplier: f64,
}

impl RunMetrics {
    pub const COLUMNS: [&'static str; 22] = [
        "scheme",
        "parameter",
        "value",
        "replication",
        "frames",
        "warmup",
        "delay_s",
        "delay_offered_s",
        "delay_tagged_s",
        "backlog_bits",
        "power_w",
        "max_power_ratio",
        "fronthaul_bps",
        "max_fronthaul_ratio",
        "drop_rate",
        "shared_failure_rate",
        "private_failure_rate",
        "arrived_bits",
        "delivered_bits",
        "dropped_bits",
        "final_backlog_bits",
        "min_multiplier",
    ];

    /// Every arrived bit was delivered, dropped or is still queued.
    pub fn conserved(&self) -> bool {
        u128::from(self.arrived_bits)
            == u128::from(self.delivered_bits) + u128::from(self.dropped_bits) + u128::from(self.final_backlog_bits)
    }
}

/// Running sums of one scheme's loop.
struct Tally {
    measured: u64,
    backlog: Vec<f64>,
    power: Vec<f64>,
    fronthaul: Vec<f64>,
    accepted: Vec<u64>,
    arrived_measured: u64,
    dropped_measured: u64,
    streams: [u64; 2],
    failures: [u64; 2],
    arrived: u64,
    delivered: u64,
    dropped: u64,
    min_multiplier: f64,
}

impl Tally {
    fn new(m: usize) -> Self {
        Self {
            measured: 0,
            backlog: vec![0.0; m],
            power: vec![0.0; m],
            fronthaul: vec![0.0; m],
            accepted: vec![0; m],
            arrived_measured: 0,
            dropped_measured: 0,
            streams: [0; 2],
            failures: [0; 2],
            arrived: 0,
            delivered: 0,
            dropped: 0,
            min_multiplier: f64::INFINITY,
        }
    }
}

/// Per-scheme loop state of one replication.
struct Lane {
    scheme: Scheme,
    controller: Controller,
    queue: QueueState,
    tracker: PacketTracker,
    tally: Tally,
}

/// Optional hooks observed once per frame after learning.
pub trait FrameObserver {
    fn frame(&mut self, _frame: u64, _scheme: Scheme, _controller: &Controller) {}
}

impl FrameObserver for () {}

/// Runs every selected scheme of `cfg` (one point, no sweep) for one
/// replication. Deterministic in `(cfg.seed, replication)`.
pub fn run_replication(
    cfg: &ExperimentConfig,
    replication: usize,
    parameter: Option<SweepParameter>,
    value: f64,
    observer: &mut dyn FrameObserver,
) -> Result<Vec<RunMetrics>> {
    let m = cfg.cluster.rrhs;
    let tau = cfg.cluster.frame_duration_s;
    let buffer = cfg.traffic.buffer_bits;
    let warmup = cfg.warmup_frames();
    let hybrid = cfg.hybrid_split();
    let quality = CsitQuality::uniform(m, cfg.sigma);
    let mut channel_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    channel_rng.set_stream(2 * replication as u64);
    let mut arrival_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    arrival_rng.set_stream(2 * replication as u64 + 1);

    let mut lanes = cfg
        .schemes
        .iter()
        .map(|&scheme| {
            let controller = Controller::new(
                cfg.cluster.clone(),
                cfg.traffic.clone(),
                cfg.constraints.clone(),
                cfg.learning.clone(),
                scheme.split(&cfg.cluster, &hybrid),
                scheme.value_mode(cfg.baseline_horizon_frames),
            )?;
            Ok(Lane {
                scheme,
                controller,
                queue: QueueState::empty(m),
                tracker: PacketTracker::new(m),
                tally: Tally::new(m),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for frame in 0..cfg.frames {
        let step = |e: Error| e.at_frame(frame);
        let channel = draw_channel(&cfg.cluster, &quality, &mut channel_rng).map_err(step)?;
        let cache = BasisCache::compute(&channel).map_err(step)?;
        let packets = draw_packets(&cfg.traffic, tau, &mut arrival_rng);
        let arrivals: Vec<u64> = packets.iter().map(|p| p.iter().sum()).collect();
        let measured = frame >= warmup;
        for lane in &mut lanes {
            let ctl = &mut lane.controller;
            let pre = PrecoderSet::build_with(&cfg.cluster, &channel, &ctl.split, &cache).map_err(step)?;
            let decision = ctl.decide(&lane.queue, &pre);
            let out = evaluate_link(&channel, &pre, &decision.action, &cfg.cluster).map_err(step)?;
            let delivered: Vec<u64> = out.ues.iter().map(|u| whole_bits(u.delivered_bits)).collect();
            let before = lane.queue.backlog.clone();
            let result = lane.queue.advance(&delivered, &arrivals, buffer);
            let t = &mut lane.tally;
            for i in 0..m {
                lane.tracker.serve(i, result.served[i], frame, measured);
                let room = buffer - lane.queue.post[i];
                lane.tracker.admit(i, &packets[i], frame, room);
                t.arrived += arrivals[i];
                t.delivered += result.served[i];
                t.dropped += result.dropped[i];
                if measured {
                    t.backlog[i] += before[i] as f64;
                    t.power[i] += out.rrh_power_w[i];
                    t.fronthaul[i] += out.rrh_fronthaul_bps[i];
                    t.accepted[i] += arrivals[i] - result.dropped[i];
                    t.arrived_measured += arrivals[i];
                    t.dropped_measured += result.dropped[i];
                    let a = &decision.action.ues[i];
                    for (k, (rate, ok)) in
                        [(a.shared_rate, out.ues[i].shared_ok), (a.private_rate, out.ues[i].private_ok)].into_iter().enumerate()
                    {
                        if rate > 0.0 {
                            t.streams[k] += 1;
                            t.failures[k] += u64::from(!ok);
                        }
                    }
                }
            }
            if measured {
                t.measured += 1;
            }
            ctl.observe(&decision, &pre, &out, &lane.queue);
            let lowest = ctl.state.gamma_p.iter().chain(&ctl.state.gamma_r).copied().fold(f64::INFINITY, f64::min);
            t.min_multiplier = t.min_multiplier.min(lowest);
            observer.frame(frame, lane.scheme, ctl);
        }
    }

    Ok(lanes.into_iter().map(|lane| finish(cfg, lane, replication, parameter, value)).collect())
}

fn finish(cfg: &ExperimentConfig, lane: Lane, replication: usize, parameter: Option<SweepParameter>, value: f64) -> RunMetrics {
    let t = &lane.tally;
    let m = cfg.cluster.rrhs;
    let tau = cfg.cluster.frame_duration_s;
    let n = t.measured.max(1) as f64;
    let horizon = t.measured as f64 * tau;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let backlog: Vec<f64> = t.backlog.iter().map(|b| b / n).collect();
    let little = |rate: &dyn Fn(usize) -> f64| {
        let per_ue: Vec<f64> =
            (0..m).filter(|&i| rate(i) > 0.0).map(|i| backlog[i] / rate(i)).collect();
        if per_ue.is_empty() {
            0.0
        } else {
            mean(&per_ue)
        }
    };
    let accepted = |i: usize| if horizon > 0.0 { t.accepted[i] as f64 / horizon } else { 0.0 };
    let offered = |i: usize| cfg.traffic.offered_bits_per_s(i);
    let bits_served: u64 = lane.tracker.bits_served.iter().sum();
    let bit_frames: u128 = lane.tracker.bit_frames.iter().sum();
    let tagged = if bits_served > 0 { bit_frames as f64 / bits_served as f64 * tau } else { 0.0 };
    let power: Vec<f64> = t.power.iter().map(|p| p / n).collect();
    let fronthaul: Vec<f64> = t.fronthaul.iter().map(|r| r / n).collect();
    let ratio = |v: &[f64], lim: &[f64]| v.iter().zip(lim).map(|(a, b)| a / b).fold(0.0, f64::max);
    let rate = |k: usize| if t.streams[k] > 0 { t.failures[k] as f64 / t.streams[k] as f64 } else { 0.0 };
    RunMetrics {
        scheme: lane.scheme,
        parameter: parameter.map_or("none", SweepParameter::name).to_string(),
        value,
        replication,
        frames: cfg.frames,
        warmup: cfg.warmup_frames(),
        delay_s: little(&accepted),
        delay_offered_s: little(&offered),
        delay_tagged_s: tagged,
        backlog_bits: mean(&backlog),
        power_w: mean(&power),
        max_power_ratio: ratio(&power, &cfg.constraints.max_power_w),
        fronthaul_bps: mean(&fronthaul),
        max_fronthaul_ratio: ratio(&fronthaul, &cfg.constraints.max_fronthaul_bps),
        drop_rate: if t.arrived_measured > 0 { t.dropped_measured as f64 / t.arrived_measured as f64 } else { 0.0 },
        shared_failure_rate: rate(0),
        private_failure_rate: rate(1),
        arrived_bits: t.arrived,
        delivered_bits: t.delivered,
        dropped_bits: t.dropped,
        final_backlog_bits: lane.queue.backlog.iter().sum(),
        min_multiplier: t.min_multiplier,
    }
}

/// Runs every sweep point and replication. Rows come back ordered by sweep
/// point, replication and scheme.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let points = cfg.points();
    let jobs: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|p| (0..cfg.replications).map(move |r| (p, r))).collect();
    let threads = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len());
    let next = AtomicUsize::new(0);
    let sink: Mutex<Vec<(usize, Result<Vec<RunMetrics>>)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(p, rep)) = jobs.get(k) else { break };
                let (parameter, value) = points[p];
                let point = parameter.map_or_else(|| cfg.clone(), |par| cfg.at_point(par, value));
                let rows = run_replication(&point, rep, parameter, value, &mut ());
                sink.lock().expect("metrics sink poisoned").push((k, rows));
            });
        }
    });
    let mut done = sink.into_inner().expect("metrics sink poisoned");
    done.sort_by_key(|(k, _)| *k);
    let mut rows = Vec::new();
    for (_, r) in done {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean and 95% Student-t half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn of(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: 0.0, half_width: 0.0 };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, half_width: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom").inverse_cdf(0.975);
        Self { mean, half_width: t * (var / n as f64).sqrt() }
    }

    pub fn low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn high(&self) -> f64 {
        self.mean + self.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub scheme: Scheme,
    pub parameter: String,
    pub value: f64,
    pub replications: usize,
    pub delay_s: Estimate,
    pub delay_tagged_s: Estimate,
    pub power_w: Estimate,
    pub fronthaul_bps: Estimate,
    pub drop_rate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub points: Vec<PointSummary>,
}

/// Groups rows by (sweep value, scheme), keeping first-seen order.
pub fn summarize(cfg: &ExperimentConfig, rows: &[RunMetrics]) -> Summary {
    let mut keys: Vec<(String, u64, Scheme)> = Vec::new();
    for r in rows {
        let key = (r.parameter.clone(), r.value.to_bits(), r.scheme);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let points = keys
        .into_iter()
        .map(|(parameter, bits, scheme)| {
            let group: Vec<&RunMetrics> =
                rows.iter().filter(|r| r.parameter == parameter && r.value.to_bits() == bits && r.scheme == scheme).collect();
            let est = |f: fn(&RunMetrics) -> f64| Estimate::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            PointSummary {
                scheme,
                parameter,
                value: f64::from_bits(bits),
                replications: group.len(),
                delay_s: est(|r| r.delay_s),
                delay_tagged_s: est(|r| r.delay_tagged_s),
                power_w: est(|r| r.power_w),
                fronthaul_bps: est(|r| r.fronthaul_bps),
                drop_rate: est(|r| r.drop_rate),
            }
        })
        .collect();
    Summary { schema_version: METRICS_SCHEMA_VERSION, seed: cfg.seed, config: cfg.clone(), points }
}

impl Summary {
    pub fn point(&self, scheme: Scheme, value: f64) -> Option<&PointSummary> {
        self.points.iter().find(|p| p.scheme == scheme && p.value == value)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format { path: "<summary>".into(), message: e.to_string() })
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

/// Writes rows as CSV with a fixed header; an empty slice gives a
/// header-only file.
pub fn write_csv(rows: &[RunMetrics], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(RunMetrics::COLUMNS).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<RunMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes `metrics.csv` and `summary.json` into `dir`, creating it.
pub fn export_metrics(cfg: &ExperimentConfig, rows: &[RunMetrics], dir: &Path) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(rows, &dir.join("metrics.csv"))?;
    let summary = summarize(cfg, rows);
    write_summary(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

/// Relative value table of one UE sampled during a QAH-CoMP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTrace {
    pub ue: usize,
    pub frames: Vec<u64>,
    pub values: Vec<Vec<f64>>,
}

impl ValueTrace {
    /// Largest change between consecutive snapshots taken at or after
    /// `after`, divided by the span of the final snapshot.
    pub fn max_change_after(&self, after: u64) -> f64 {
        let Some(last) = self.values.last() else { return 0.0 };
        let (lo, hi) = last.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        self.frames
            .windows(2)
            .zip(self.values.windows(2))
            .filter(|(f, _)| f[0] >= after)
            .map(|(_, v)| v[0].iter().zip(&v[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / span)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let regions = self.values.first().map_or(0, Vec::len);
        let mut header = vec!["frame".to_string()];
        header.extend((0..regions).map(|k| format!("region_{k}")));
        w.write_record(&header).map_err(csv_err(path))?;
        for (f, v) in self.frames.iter().zip(&self.values) {
            let mut rec = vec![f.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

struct TraceRecorder {
    ue: usize,
    every: u64,
    trace: ValueTrace,
}

impl FrameObserver for TraceRecorder {
    fn frame(&mut self, frame: u64, scheme: Scheme, ctl: &Controller) {
        if scheme == Scheme::Qah && (frame + 1) % self.every == 0 {
            self.trace.frames.push(frame + 1);
            self.trace.values.push(ctl.state.values[self.ue].relative());
        }
    }
}

/// Runs QAH-CoMP alone for replication 0 and samples UE `ue`'s relative
/// value table every `every` frames.
pub fn convergence_trace(cfg: &ExperimentConfig, ue: usize, every: u64) -> Result<ValueTrace> {
    let mut cfg = cfg.clone();
    cfg.schemes = vec![Scheme::Qah];
    cfg.sweep = None;
    cfg.validate()?;
    if ue >= cfg.cluster.rrhs || every == 0 {
        return Err(Error::InvalidConfig(format!("trace needs ue < {} and a positive interval", cfg.cluster.rrhs)));
    }
    let mut rec = TraceRecorder { ue, every, trace: ValueTrace { ue, frames: Vec::new(), values: Vec::new() } };
    run_replication(&cfg, 0, None, 0.0, &mut rec)?;
    Ok(rec.trace)
}
