//! Queue-aware power and rate control.
//!
//! Per frame the controller applies the action iterate kept for the UE's
//! current queue level, observes ACK/NACK feedback, takes one projected
//! stochastic-gradient step on that iterate, updates the per-queue
//! post-decision value table on the fast timescale and the Lagrange
//! multipliers on the slow one.
//!
//! Internally powers are measured in units of the serving RRH's `P_max`
//! and rates in units of its `R_max`; multipliers are the matching
//! dimensionless prices. [`LearnerState::power_price`] and
//! [`LearnerState::fronthaul_price`] convert back to SI.

use serde::{Deserialize, Serialize};

use crate::channel::ClusterConfig;
use crate::error::{Error, Result};
use crate::hcomp::{csit_stream_capacity, AllocationAction, LinkOutcome, PrecoderSet, StreamSplit, UeAction};
use crate::oracle::TinyMdp;
use crate::queueing::{delay_term, QueueState, TrafficConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Average power limit of each RRH (W).
    pub max_power_w: Vec<f64>,
    /// Average fronthaul limit of each RRH (bit/s).
    pub max_fronthaul_bps: Vec<f64>,
}

impl ConstraintConfig {
    pub fn uniform(m: usize, max_power_w: f64, max_fronthaul_bps: f64) -> Self {
        Self { max_power_w: vec![max_power_w; m], max_fronthaul_bps: vec![max_fronthaul_bps; m] }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.max_power_w.len() != m || self.max_fronthaul_bps.len() != m {
            return Err(Error::InvalidConfig(format!("constraints must cover all {m} RRHs")));
        }
        if self.max_power_w.iter().chain(&self.max_fronthaul_bps).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("power and fronthaul limits must be positive".into()));
        }
        Ok(())
    }
}

/// Step size `scale * n^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub scale: f64,
    pub exponent: f64,
}

impl Schedule {
    pub const fn new(scale: f64, exponent: f64) -> Self {
        Self { scale, exponent }
    }

    pub fn at(&self, n: u64) -> f64 {
        self.scale * (n.max(1) as f64).powf(-self.exponent)
    }

    /// `sum = inf` and `sum of squares < inf` hold exactly for exponents in
    /// `(1/2, 1]`.
    pub fn is_robbins_monro(&self) -> bool {
        self.scale > 0.0 && self.exponent > 0.5 && self.exponent <= 1.0
    }
}

/// Checks the two-timescale conditions on the value, multiplier and action
/// schedules: each is Robbins-Monro and `zeta_gamma / zeta_u -> 0`, which
/// for power laws means a strictly larger multiplier exponent.
pub fn check_schedules(value: &Schedule, multiplier: &Schedule, action: &Schedule) -> Result<()> {
    for (name, s) in [("value", value), ("multiplier", multiplier), ("action", action)] {
        if !s.is_robbins_monro() {
            return Err(Error::InvalidConfig(format!(
                "{name} step {}*n^-{} is not square-summable with divergent sum",
                s.scale, s.exponent
            )));
        }
    }
    if multiplier.exponent <= value.exponent {
        return Err(Error::InvalidConfig("multiplier steps must decay faster than value steps".into()));
    }
    Ok(())
}

/// How the power rows of the gradient see the value of a successful
/// transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerGradient {
    /// Indicators are held at their fed-back values. Power only earns value
    /// through the capacity cap on the applied rate.
    Feedback,
    /// Adds the derivative of a sigmoid success model
    /// `sigmoid((C_hat - R) / kappa)`, `kappa = 0.05 R`.
    SmoothedMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValueMode {
    /// Per-queue post-decision values learned online.
    Learned,
    /// Queue-blind value `U(q) = slope * q` with `slope` equal to
    /// `horizon_frames * beta / lambda_bar` seconds per bit. Never updated;
    /// actions come from closed-form water-filling instead of the iterates.
    FrozenLinear { horizon_frames: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub value_step: Schedule,
    /// Index fed to `value_step` when a region is updated.
    pub value_clock: StepClock,
    pub multiplier_step: Schedule,
    pub action_step: Schedule,
    pub initial_multiplier: f64,
    /// Iterate caps, in units of `P_max` per stream and `R_max` per UE.
    pub power_cap: f64,
    pub rate_cap: f64,
    /// Width of the queue levels that own separate action iterates (bits).
    /// Level 0 is the empty queue.
    pub action_level_bits: f64,
    /// Value-table regions; `None` uses buffer size / mean packet size.
    pub value_regions: Option<usize>,
    /// Initial fraction of the CSIT capacity the applied rate may reach.
    pub csit_rate_backoff: f64,
    /// Feedback-driven adjustment of that fraction; `None` keeps it fixed.
    pub link_adaptation: Option<LinkAdaptation>,
    /// Starting point of learned value tables; `None` starts from zero.
    pub value_prior: Option<ValuePrior>,
    pub power_gradient: PowerGradient,
    pub initial_power: f64,
    pub initial_rate: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            value_step: Schedule::new(1.0, 0.8),
            value_clock: StepClock::RegionVisits,
            multiplier_step: Schedule::new(5.0, 0.9),
            action_step: Schedule::new(1.0, 0.7),
            initial_multiplier: 0.01,
            power_cap: 4.0,
            rate_cap: 4.0,
            action_level_bits: 1e6,
            value_regions: None,
            csit_rate_backoff: 0.85,
            link_adaptation: Some(LinkAdaptation::default()),
            value_prior: Some(ValuePrior::default()),
            power_gradient: PowerGradient::Feedback,
            initial_power: 0.5,
            initial_rate: 0.5,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedules(&self.value_step, &self.multiplier_step, &self.action_step)?;
        let positive = [
            ("initial_multiplier", self.initial_multiplier),
            ("power_cap", self.power_cap),
            ("rate_cap", self.rate_cap),
            ("action_level_bits", self.action_level_bits),
            ("csit_rate_backoff", self.csit_rate_backoff),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(la) = &self.link_adaptation {
            la.validate()?;
        }
        if let Some(p) = &self.value_prior {
            if !(p.horizon_frames >= 0.0 && p.horizon_frames.is_finite()) {
                return Err(Error::InvalidConfig("value prior horizon must be finite and >= 0".into()));
            }
        }
        if self.value_regions == Some(0) {
            return Err(Error::InvalidConfig("value table needs at least one region".into()));
        }
        if !(0.0..=self.power_cap).contains(&self.initial_power) || !(0.0..=self.rate_cap).contains(&self.initial_rate) {
            return Err(Error::InvalidConfig("initial action outside the caps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepClock {
    /// Global frame counter.
    Frame,
    /// Updates so far of the region being updated (prior visits included).
    RegionVisits,
}

/// Linear starting value `horizon_frames * beta / lambda_bar * q`, worth
/// `visits` updates: each region's value step starts at index `visits + 1`.
/// Without it the first excursion into a high-backlog region overwrites a
/// guessed value with a single noisy sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuePrior {
    pub horizon_frames: f64,
    pub visits: u64,
}

impl Default for ValuePrior {
    fn default() -> Self {
        Self { horizon_frames: 40.0, visits: 300 }
    }
}

/// Outer-loop link adaptation: after each transmission the capacity fraction
/// of that stream type moves up by `step * target_failure` on ACK and down by
/// `step * (1 - target_failure)` on NACK, so it settles where the failure
/// rate equals the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAdaptation {
    pub step: f64,
    pub target_failure: f64,
    pub min_backoff: f64,
    pub max_backoff: f64,
}

impl Default for LinkAdaptation {
    fn default() -> Self {
        Self { step: 0.01, target_failure: 0.1, min_backoff: 0.05, max_backoff: 1.0 }
    }
}

impl LinkAdaptation {
    fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && self.target_failure > 0.0
            && self.target_failure < 1.0
            && self.min_backoff > 0.0
            && self.min_backoff <= self.max_backoff;
        if !ok {
            return Err(Error::InvalidConfig("link adaptation needs step > 0, target in (0, 1), min <= max".into()));
        }
        Ok(())
    }

    pub fn update(&self, backoff: f64, ok: bool) -> f64 {
        let delta = if ok { self.step * self.target_failure } else { -self.step * (1.0 - self.target_failure) };
        (backoff + delta).clamp(self.min_backoff, self.max_backoff)
    }
}

/// Per-queue post-decision value function on `N` equal regions of the
/// buffer. Anchors sit at region midpoints; lookups interpolate linearly
/// and extrapolate linearly past the outer anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub region_bits: f64,
    pub anchors: Vec<f64>,
    pub visits: Vec<u64>,
    /// Anchors with unvisited regions filled in from visited neighbours.
    #[serde(skip)]
    effective: Vec<f64>,
}

impl ValueTable {
    pub fn new(regions: usize, region_bits: f64) -> Self {
        Self { region_bits, anchors: vec![0.0; regions], visits: vec![0; regions], effective: vec![0.0; regions] }
    }

    pub fn regions(&self) -> usize {
        self.anchors.len()
    }

    pub fn span_bits(&self) -> f64 {
        self.region_bits * self.regions() as f64
    }

    pub fn region_of(&self, q: f64) -> usize {
        ((q / self.region_bits).floor().max(0.0) as usize).min(self.regions() - 1)
    }

    /// Value of anchor `k` as seen by lookups.
    pub fn anchor_value(&self, k: usize) -> f64 {
        self.effective_anchors()[k]
    }

    fn effective_anchors(&self) -> &[f64] {
        if self.effective.len() == self.anchors.len() {
            &self.effective
        } else {
            &self.anchors
        }
    }

    /// Rebuilds the filled-in view after anchors or visits change. Gaps
    /// between visited regions are interpolated; regions beyond the visited
    /// range are extrapolated with a non-negative slope.
    fn refresh(&mut self) {
        let visited: Vec<usize> = (0..self.regions()).filter(|&k| self.visits[k] > 0).collect();
        let mut eff = self.anchors.clone();
        if let (Some(&lo), Some(&hi)) = (visited.first(), visited.last()) {
            let slope = |a: usize, b: usize| if a == b { 0.0 } else { (self.anchors[b] - self.anchors[a]) / (b - a) as f64 };
            for w in visited.windows(2) {
                let (a, b) = (w[0], w[1]);
                for k in a + 1..b {
                    eff[k] = self.anchors[a] + slope(a, b) * (k - a) as f64;
                }
            }
            let low_slope = visited.get(1).map_or(0.0, |&b| slope(lo, b).max(0.0));
            for k in 0..lo {
                eff[k] = self.anchors[lo] - low_slope * (lo - k) as f64;
            }
            let high_slope = if visited.len() >= 2 { slope(visited[visited.len() - 2], hi).max(0.0) } else { 0.0 };
            for k in hi + 1..self.regions() {
                eff[k] = self.anchors[hi] + high_slope * (k - hi) as f64;
            }
        }
        self.effective = eff;
    }

    /// Interpolated value at backlog `q` bits, with `q` anywhere on the real
    /// line (no range check).
    fn value_unchecked(&self, q: f64) -> f64 {
        let a = self.effective_anchors();
        let n = a.len();
        if n == 1 {
            return a[0];
        }
        let x = q / self.region_bits - 0.5;
        let k = (x.floor().max(0.0) as usize).min(n - 2);
        let frac = x - k as f64;
        a[k] + (a[k + 1] - a[k]) * frac
    }

    /// Value at `q` bits; rejects `q` outside `[0, N * region_bits]`.
    pub fn value(&self, q: f64) -> Result<f64> {
        self.check_range(q)?;
        Ok(self.value_unchecked(q))
    }

    /// Backward differential per bit, `(U(q) - U(q - d)) / d` with
    /// `d = min(region_bits, q)`. Zero at and below the empty queue.
    pub fn differential(&self, q: f64) -> Result<f64> {
        self.check_range(q)?;
        Ok(self.differential_unchecked(q))
    }

    fn differential_unchecked(&self, q: f64) -> f64 {
        if q <= 0.0 {
            return 0.0;
        }
        let d = self.region_bits.min(q);
        (self.value_unchecked(q) - self.value_unchecked(q - d)) / d
    }

    fn check_range(&self, q: f64) -> Result<()> {
        if !(q >= 0.0 && q <= self.span_bits()) {
            return Err(Error::OutOfRange { value: q, max: self.span_bits() });
        }
        Ok(())
    }

    /// Temporal-difference update of the region anchor holding the previous
    /// post-decision state. Callers index the step by that region's own
    /// visit count:
    /// `U(prev) += step * (cost + U(next) - U(reference) - U(prev))`,
    /// with region 0 as the reference.
    pub fn learn(&mut self, prev_region: usize, next_region: usize, cost: f64, step: f64) {
        self.learn_toward(prev_region, cost + self.anchor_value(next_region), step);
    }

    /// Moves anchor `region` toward `estimate - reference()`, where
    /// `estimate` is a sample or expectation of stage cost plus next value.
    pub fn learn_toward(&mut self, region: usize, estimate: f64, step: f64) {
        let target = estimate - self.reference();
        let current = self.anchors[region];
        self.anchors[region] = current + step * (target - current);
        self.visits[region] += 1;
        self.refresh();
    }

    /// Offset subtracted in every update: the value of region 0. At the
    /// fixed point it equals the average cost per frame.
    pub fn reference(&self) -> f64 {
        self.anchor_value(0)
    }

    /// Installs the frozen linear value `slope * q` at every anchor.
    pub fn set_linear(&mut self, slope: f64) {
        for k in 0..self.regions() {
            self.anchors[k] = slope * (k as f64 + 0.5) * self.region_bits;
            self.visits[k] = 1;
        }
        self.refresh();
    }

    /// Values relative to region 0.
    pub fn relative(&self) -> Vec<f64> {
        let base = self.anchor_value(0);
        (0..self.regions()).map(|k| self.anchor_value(k) - base).collect()
    }
}

/// Normalized power/rate iterate of one UE at one queue level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionIterate {
    pub shared_power: Vec<f64>,
    pub private_power: Vec<f64>,
    pub shared_rate: f64,
    pub private_rate: f64,
    pub visits: u64,
}

impl ActionIterate {
    fn initial(split: &StreamSplit, ue: usize, cfg: &LearningConfig, empty_level: bool) -> Self {
        let rate = if empty_level { 0.0 } else { cfg.initial_rate };
        Self {
            shared_power: vec![cfg.initial_power; split.shared[ue]],
            private_power: vec![cfg.initial_power; split.private[ue]],
            shared_rate: if split.shared[ue] > 0 { rate } else { 0.0 },
            private_rate: if split.private[ue] > 0 { rate } else { 0.0 },
            visits: 0,
        }
    }
}

/// Gradient of the per-stage Lagrangian in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeGradient {
    pub shared_power: Vec<f64>,
    pub private_power: Vec<f64>,
    pub shared_rate: f64,
    pub private_rate: f64,
}

/// Projected descent step, clipped to `[0, cap]` per entry.
pub fn gradient_step(it: &ActionIterate, g: &UeGradient, step: f64, power_cap: f64, rate_cap: f64) -> ActionIterate {
    let proj = |x: f64, d: f64, cap: f64| (x - step * d).clamp(0.0, cap);
    ActionIterate {
        shared_power: it.shared_power.iter().zip(&g.shared_power).map(|(x, d)| proj(*x, *d, power_cap)).collect(),
        private_power: it.private_power.iter().zip(&g.private_power).map(|(x, d)| proj(*x, *d, power_cap)).collect(),
        shared_rate: proj(it.shared_rate, g.shared_rate, rate_cap),
        private_rate: proj(it.private_rate, g.private_rate, rate_cap),
        visits: it.visits,
    }
}

/// Everything the gradient of one UE depends on, in SI units.
#[derive(Debug, Clone)]
pub struct GradientInput<'a> {
    pub ue: usize,
    pub backlog_bits: f64,
    pub action: &'a UeAction,
    pub shared_ok: bool,
    pub private_ok: bool,
    /// Whether the applied rate sat on the CSIT capacity cap.
    pub shared_capped: bool,
    pub private_capped: bool,
    /// Capacity fractions of the cap, shared then private.
    pub backoff: [f64; 2],
    /// Effective CSIT gains and sharing factors from the precoders.
    pub shared_gain: &'a [f64],
    pub private_gain: &'a [f64],
    pub rho: &'a [Vec<f64>],
}

/// Post-decision backlog after serving `bits`, in the table's coordinates.
fn served(q: f64, bits: f64) -> f64 {
    q - bits
}

/// Per-stage stochastic gradient with respect to the UE's normalized stream
/// powers and rates: multiplier prices plus the value differentials of the
/// indicator-weighted objective.
pub fn per_stage_gradient(
    input: &GradientInput<'_>,
    table: &ValueTable,
    learner: &LearnerState,
    cluster: &ClusterConfig,
    cons: &ConstraintConfig,
    cfg: &LearningConfig,
) -> UeGradient {
    let i = input.ue;
    let m = learner.gamma_p.len();
    let tau = cluster.frame_duration_s;
    let (p_max, r_max) = (cons.max_power_w[i], cons.max_fronthaul_bps[i]);
    let a = input.action;
    let (rs, rp) = (a.shared_rate, a.private_rate);
    let (s, p) = (f64::from(u8::from(input.shared_ok)), f64::from(u8::from(input.private_ok)));
    let q = input.backlog_bits;
    // Backlog never lowers future cost, so a negative differential is
    // estimation noise and is read as zero.
    let du = |x: f64| if x <= 0.0 { 0.0 } else { table.differential_unchecked(x.min(table.span_bits())).max(0.0) };
    let u = |x: f64| table.value_unchecked(x.max(0.0).min(table.span_bits()));

    // d h / d R in s/bit-per-s: the indicator-weighted value differentials.
    let dh_rs = -tau * (s * (1.0 - p) * du(served(q, tau * rs)) + s * p * du(served(q, tau * (rs + rp))));
    let dh_rp = -tau * (p * (1.0 - s) * du(served(q, tau * rp)) + s * p * du(served(q, tau * (rs + rp))));
    let price_rs: f64 = learner.gamma_r.iter().enumerate().map(|(j, g)| g / cons.max_fronthaul_bps[j]).sum();
    let price_rp = learner.gamma_r[i] / r_max;
    let mut d_rs = price_rs + dh_rs;
    let mut d_rp = price_rp + dh_rp;

    let snr = cluster.snr_per_watt();
    let bw = cluster.bandwidth_hz;
    let dcap = |g: f64, pw: f64| bw * g * snr / ((1.0 + g * pw * snr) * std::f64::consts::LN_2);
    let [c_s, c_p] = input.backoff;

    let mut g_ps: Vec<f64> = (0..a.shared_power.len())
        .map(|k| (0..m).map(|j| learner.gamma_p[j] * input.rho[k][j] / cons.max_power_w[j]).sum())
        .collect();
    let mut g_pp: Vec<f64> = vec![learner.gamma_p[i] / p_max; a.private_power.len()];

    if cfg.power_gradient == PowerGradient::SmoothedMargin {
        let margin = |gains: &[f64], powers: &[f64], r: f64| {
            let cap: f64 = gains.iter().zip(powers).map(|(g, pw)| csit_stream_capacity(cluster, *g, *pw)).sum();
            let kappa = 0.05 * r.max(1e-3 * r_max);
            let sig = 1.0 / (1.0 + (-(cap - r) / kappa).exp());
            (sig * (1.0 - sig) / kappa, kappa)
        };
        let (ds, _) = margin(input.shared_gain, &a.shared_power, rs);
        let (dp, _) = margin(input.private_gain, &a.private_power, rp);
        let du_s = u(served(q, tau * rs)) - u(q);
        let du_p = u(served(q, tau * rp)) - u(q);
        for (k, g) in g_ps.iter_mut().enumerate() {
            *g += ds * dcap(input.shared_gain[k], a.shared_power[k]) * du_s;
        }
        for (k, g) in g_pp.iter_mut().enumerate() {
            *g += dp * dcap(input.private_gain[k], a.private_power[k]) * du_p;
        }
        d_rs -= ds * du_s;
        d_rp -= dp * du_p;
    }

    // On the cap the applied rate moves with the power.
    if input.shared_capped {
        for (k, g) in g_ps.iter_mut().enumerate() {
            *g += d_rs * c_s * dcap(input.shared_gain[k], a.shared_power[k]);
        }
    }
    if input.private_capped {
        for (k, g) in g_pp.iter_mut().enumerate() {
            *g += d_rp * c_p * dcap(input.private_gain[k], a.private_power[k]);
        }
    }
    if a.shared_power.is_empty() {
        d_rs = 0.0;
    }
    if a.private_power.is_empty() {
        d_rp = 0.0;
    }
    UeGradient {
        shared_power: g_ps.into_iter().map(|g| g * p_max).collect(),
        private_power: g_pp.into_iter().map(|g| g * p_max).collect(),
        shared_rate: d_rs * r_max,
        private_rate: d_rp * r_max,
    }
}

/// Projected dual ascent on normalized excesses:
/// `gamma <- [gamma + step (P_i / P_max - 1)]^+`, likewise for fronthaul.
pub fn update_multipliers(
    learner: &mut LearnerState,
    rrh_power_w: &[f64],
    rrh_fronthaul_bps: &[f64],
    cons: &ConstraintConfig,
    step: f64,
) {
    for i in 0..learner.gamma_p.len() {
        learner.gamma_p[i] = (learner.gamma_p[i] + step * (rrh_power_w[i] / cons.max_power_w[i] - 1.0)).max(0.0);
        learner.gamma_r[i] =
            (learner.gamma_r[i] + step * (rrh_fronthaul_bps[i] / cons.max_fronthaul_bps[i] - 1.0)).max(0.0);
    }
}

/// Learned quantities of one control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub values: Vec<ValueTable>,
    pub gamma_p: Vec<f64>,
    pub gamma_r: Vec<f64>,
    /// Running mean of each queue's per-stage cost.
    pub theta: Vec<f64>,
    /// Frames processed so far.
    pub t: u64,
    /// `iterates[ue][level]`.
    pub iterates: Vec<Vec<ActionIterate>>,
    /// Post-decision backlog of the previous frame.
    pub last_post: Option<Vec<u64>>,
    /// Capacity fraction per UE for its shared and private streams.
    pub backoff: Vec<[f64; 2]>,
}

impl LearnerState {
    pub fn power_price(&self, rrh: usize, cons: &ConstraintConfig) -> f64 {
        self.gamma_p[rrh] / cons.max_power_w[rrh]
    }

    pub fn fronthaul_price(&self, rrh: usize, cons: &ConstraintConfig) -> f64 {
        self.gamma_r[rrh] / cons.max_fronthaul_bps[rrh]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub state: LearnerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format { path: "<checkpoint>".into(), message: e.to_string() })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cp: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format { path: "<checkpoint>".into(), message: e.to_string() })?;
        if cp.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                message: format!("unsupported checkpoint schema {}", cp.schema_version),
            });
        }
        cp.state.values.iter_mut().for_each(ValueTable::refresh);
        Ok(cp)
    }
}

/// The action applied in one frame, with the bookkeeping the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: AllocationAction,
    pub levels: Vec<usize>,
    pub backlog: Vec<u64>,
    pub shared_capped: Vec<bool>,
    pub private_capped: Vec<bool>,
}

/// Per-frame diagnostics from [`Controller::observe`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub stage_cost: Vec<f64>,
}

/// One control loop: iterates, value tables and multipliers of a scheme.
#[derive(Debug, Clone)]
pub struct Controller {
    pub cluster: ClusterConfig,
    pub traffic: TrafficConfig,
    pub constraints: ConstraintConfig,
    pub learning: LearningConfig,
    pub split: StreamSplit,
    pub mode: ValueMode,
    /// Whether iterates are kept per queue level (queue-aware) or shared.
    pub queue_levels: bool,
    pub state: LearnerState,
}

impl Controller {
    pub fn new(
        cluster: ClusterConfig,
        traffic: TrafficConfig,
        constraints: ConstraintConfig,
        learning: LearningConfig,
        split: StreamSplit,
        mode: ValueMode,
    ) -> Result<Self> {
        cluster.validate()?;
        let m = cluster.rrhs;
        traffic.validate(m)?;
        constraints.validate(m)?;
        learning.validate()?;
        split.validate(&cluster)?;
        let regions = learning
            .value_regions
            .unwrap_or_else(|| ((traffic.buffer_bits as f64 / traffic.mean_packet_bits).round() as usize).max(1));
        let region_bits = traffic.buffer_bits as f64 / regions as f64;
        let queue_levels = matches!(mode, ValueMode::Learned);
        let levels = if queue_levels {
            (traffic.buffer_bits as f64 / learning.action_level_bits).ceil() as usize + 1
        } else {
            1
        };
        let values = (0..m)
            .map(|i| {
                let mut t = ValueTable::new(regions, region_bits);
                let slope = |h: f64| h * traffic.delay_weight[i] / traffic.offered_bits_per_s(i).max(1.0);
                match (mode, learning.value_prior) {
                    (ValueMode::FrozenLinear { horizon_frames }, _) => t.set_linear(slope(horizon_frames)),
                    (ValueMode::Learned, Some(p)) => {
                        t.set_linear(slope(p.horizon_frames));
                        t.visits.iter_mut().for_each(|v| *v = p.visits);
                        t.refresh();
                    }
                    (ValueMode::Learned, None) => t.refresh(),
                }
                t
            })
            .collect();
        let iterates = (0..m)
            .map(|i| {
                (0..levels)
                    .map(|l| ActionIterate::initial(&split, i, &learning, queue_levels && l == 0))
                    .collect()
            })
            .collect();
        let g0 = learning.initial_multiplier;
        let state = LearnerState {
            values,
            gamma_p: vec![g0; m],
            gamma_r: vec![g0; m],
            theta: vec![0.0; m],
            t: 0,
            iterates,
            last_post: None,
            backoff: vec![[learning.csit_rate_backoff; 2]; m],
        };
        Ok(Self { cluster, traffic, constraints, learning, split, mode, queue_levels, state })
    }

    fn level_of(&self, backlog: u64) -> usize {
        if !self.queue_levels {
            return 0;
        }
        if backlog == 0 {
            return 0;
        }
        let top = self.state.iterates[0].len() - 1;
        ((backlog as f64 / self.learning.action_level_bits).ceil() as usize).clamp(1, top)
    }

    /// The iterate of a level, or for a level never visited the one of the
    /// nearest visited level below it.
    fn iterate_for(&self, ue: usize, level: usize) -> &ActionIterate {
        let its = &self.state.iterates[ue];
        if its[level].visits > 0 || level <= 1 {
            return &its[level];
        }
        (1..level).rev().map(|l| &its[l]).find(|it| it.visits > 0).unwrap_or(&its[level])
    }

    /// Applies the iterate of each UE's current level, capping rates at the
    /// backed-off CSIT capacity of the chosen powers.
    pub fn decide(&self, q: &QueueState, pre: &PrecoderSet) -> Decision {
        if let ValueMode::FrozenLinear { .. } = self.mode {
            return self.water_fill(q, pre);
        }
        let m = self.cluster.rrhs;
        let mut action = AllocationAction::zeros(&self.split);
        let mut levels = vec![0; m];
        let mut shared_capped = vec![false; m];
        let mut private_capped = vec![false; m];
        for i in 0..m {
            let [c_s, c_p] = self.state.backoff[i];
            let level = self.level_of(q.backlog[i]);
            levels[i] = level;
            let it = self.iterate_for(i, level);
            let (p_max, r_max) = (self.constraints.max_power_w[i], self.constraints.max_fronthaul_bps[i]);
            let a = &mut action.ues[i];
            a.shared_power = it.shared_power.iter().map(|x| x * p_max).collect();
            a.private_power = it.private_power.iter().map(|x| x * p_max).collect();
            let cap = |gains: &[f64], powers: &[f64]| -> f64 {
                gains.iter().zip(powers).map(|(g, p)| csit_stream_capacity(&self.cluster, *g, *p)).sum::<f64>()
            };
            let cap_s = c_s * cap(&pre.ues[i].shared_gain, &a.shared_power);
            let cap_p = c_p * cap(&pre.ues[i].private_gain, &a.private_power);
            let (want_s, want_p) = (it.shared_rate * r_max, it.private_rate * r_max);
            shared_capped[i] = want_s > cap_s;
            private_capped[i] = want_p > cap_p;
            a.shared_rate = want_s.min(cap_s);
            a.private_rate = want_p.min(cap_p);
            // Nothing to send on a stream type means nothing to radiate.
            if a.shared_rate == 0.0 {
                a.shared_power.iter_mut().for_each(|p| *p = 0.0);
            }
            if a.private_rate == 0.0 {
                a.private_power.iter_mut().for_each(|p| *p = 0.0);
            }
        }
        Decision { action, levels, backlog: q.backlog.clone(), shared_capped, private_capped }
    }

    /// Queue-blind throughput maximization. Each stream first takes the
    /// water-filling power of `max v c B log2(1 + g P snr) - price_P P`, `v`
    /// being the frozen per-bit value net of the fronthaul price, which caps
    /// its rate at the backed-off CSIT capacity. Rates are then packed into
    /// each RRH's fronthaul limit, private streams first and the leftover
    /// shared by progressive filling, and powers trimmed to what the packed
    /// rates need.
    fn water_fill(&self, q: &QueueState, pre: &PrecoderSet) -> Decision {
        let m = self.cluster.rrhs;
        let st = &self.state;
        let cons = &self.constraints;
        let tau = self.cluster.frame_duration_s;
        let snr = self.cluster.snr_per_watt();
        let bw = self.cluster.bandwidth_hz;
        let mut action = AllocationAction::zeros(&self.split);
        let shared_price: f64 = (0..m).map(|j| st.gamma_r[j] / cons.max_fronthaul_bps[j]).sum();
        let capacity = |gains: &[f64], powers: &[f64], c: f64| -> f64 {
            c * gains.iter().zip(powers).map(|(g, p)| csit_stream_capacity(&self.cluster, *g, *p)).sum::<f64>()
        };
        let mut shared_room = vec![0.0; m];
        for i in 0..m {
            let slope = st.values[i].differential_unchecked(st.values[i].span_bits());
            let p_cap = self.learning.power_cap * cons.max_power_w[i];
            let r_cap = self.learning.rate_cap * cons.max_fronthaul_bps[i];
            let [c_s, c_p] = st.backoff[i];
            let level = |gain: f64, value: f64, price: f64, c: f64| -> f64 {
                if value <= 0.0 || gain <= 0.0 {
                    return 0.0;
                }
                if price <= 0.0 {
                    return p_cap;
                }
                (value * c * bw / (std::f64::consts::LN_2 * price) - 1.0 / (gain * snr)).clamp(0.0, p_cap)
            };
            let up = &pre.ues[i];
            let a = &mut action.ues[i];
            let v_p = tau * slope - st.gamma_r[i] / cons.max_fronthaul_bps[i];
            let v_s = tau * slope - shared_price;
            for (k, p) in a.private_power.iter_mut().enumerate() {
                *p = level(up.private_gain[k], v_p, st.gamma_p[i] / cons.max_power_w[i], c_p);
            }
            for (k, p) in a.shared_power.iter_mut().enumerate() {
                let price: f64 = (0..m).map(|j| st.gamma_p[j] * up.rho[k][j] / cons.max_power_w[j]).sum();
                *p = level(up.shared_gain[k], v_s, price, c_s);
            }
            a.private_rate = capacity(&up.private_gain, &a.private_power, c_p).min(r_cap).min(cons.max_fronthaul_bps[i]);
            shared_room[i] = capacity(&up.shared_gain, &a.shared_power, c_s).min(r_cap);
        }
        let budget = (0..m)
            .map(|i| cons.max_fronthaul_bps[i] - action.ues[i].private_rate)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let shared = progressive_fill(&shared_room, budget);
        for i in 0..m {
            let up = &pre.ues[i];
            let [c_s, c_p] = st.backoff[i];
            let a = &mut action.ues[i];
            a.shared_rate = shared[i];
            trim_power(&mut a.private_power, &up.private_gain, a.private_rate, |p| capacity(&up.private_gain, p, c_p));
            trim_power(&mut a.shared_power, &up.shared_gain, a.shared_rate, |p| capacity(&up.shared_gain, p, c_s));
        }
        Decision {
            action,
            levels: vec![0; m],
            backlog: q.backlog.clone(),
            shared_capped: vec![true; m],
            private_capped: vec![true; m],
        }
    }

    /// Per-queue stage cost: weighted delay plus the UE's share of the
    /// multiplier-priced power and fronthaul.
    pub fn stage_cost(&self, ue: usize, backlog: u64, a: &UeAction, pre: &PrecoderSet) -> f64 {
        let st = &self.state;
        let m = self.cluster.rrhs;
        let cons = &self.constraints;
        let mut cost = delay_term(backlog, &self.traffic, ue);
        cost += st.gamma_p[ue] * a.private_power.iter().sum::<f64>() / cons.max_power_w[ue];
        for (k, ps) in a.shared_power.iter().enumerate() {
            for j in 0..m {
                cost += st.gamma_p[j] * ps * pre.ues[ue].rho[k][j] / cons.max_power_w[j];
            }
        }
        cost += st.gamma_r[ue] * a.private_rate / cons.max_fronthaul_bps[ue];
        for j in 0..m {
            cost += st.gamma_r[j] * a.shared_rate / cons.max_fronthaul_bps[j];
        }
        cost
    }

    /// Consumes the frame's feedback: one gradient step per UE on the
    /// iterate that produced the action, a value-table update (learned mode)
    /// and a multiplier update. `after` must hold the post-decision backlog
    /// of this frame in its `post` field.
    pub fn observe(&mut self, d: &Decision, pre: &PrecoderSet, out: &LinkOutcome, after: &QueueState) -> StepReport {
        let m = self.cluster.rrhs;
        self.state.t += 1;
        let t = self.state.t;
        let mut report = StepReport { stage_cost: vec![0.0; m] };
        let learning = matches!(self.mode, ValueMode::Learned);
        for i in 0..m {
            if !learning {
                report.stage_cost[i] = self.stage_cost(i, d.backlog[i], &d.action.ues[i], pre);
                let zeta = self.learning.value_step.at(t);
                self.state.theta[i] += zeta.min(1.0) * (report.stage_cost[i] - self.state.theta[i]);
                continue;
            }
            let input = GradientInput {
                ue: i,
                backlog_bits: d.backlog[i] as f64,
                action: &d.action.ues[i],
                shared_ok: out.ues[i].shared_ok,
                private_ok: out.ues[i].private_ok,
                shared_capped: d.shared_capped[i],
                private_capped: d.private_capped[i],
                backoff: self.state.backoff[i],
                shared_gain: &pre.ues[i].shared_gain,
                private_gain: &pre.ues[i].private_gain,
                rho: &pre.ues[i].rho,
            };
            let grad = per_stage_gradient(
                &input,
                &self.state.values[i],
                &self.state,
                &self.cluster,
                &self.constraints,
                &self.learning,
            );
            let it = self.iterate_for(i, d.levels[i]);
            let step = self.learning.action_step.at(it.visits + 1);
            let mut next = gradient_step(it, &grad, step, self.learning.power_cap, self.learning.rate_cap);
            next.visits = self.state.iterates[i][d.levels[i]].visits + 1;
            self.state.iterates[i][d.levels[i]] = next;

            let cost = self.stage_cost(i, d.backlog[i], &d.action.ues[i], pre);
            report.stage_cost[i] = cost;
            let zeta = self.learning.value_step.at(t);
            self.state.theta[i] += zeta.min(1.0) * (cost - self.state.theta[i]);
        }
        if learning {
            if let Some(prev) = &self.state.last_post {
                for i in 0..m {
                    let table = &mut self.state.values[i];
                    let (r0, r1) = (table.region_of(prev[i] as f64), table.region_of(after.post[i] as f64));
                    let n = match self.learning.value_clock {
                        StepClock::Frame => t,
                        StepClock::RegionVisits => table.visits[r0] + 1,
                    };
                    let zeta = self.learning.value_step.at(n);
                    table.learn(r0, r1, report.stage_cost[i], zeta);
                }
            }
        }
        if let Some(la) = self.learning.link_adaptation {
            for i in 0..m {
                let a = &d.action.ues[i];
                let b = &mut self.state.backoff[i];
                if a.shared_rate > 0.0 {
                    b[0] = la.update(b[0], out.ues[i].shared_ok);
                }
                if a.private_rate > 0.0 {
                    b[1] = la.update(b[1], out.ues[i].private_ok);
                }
            }
        }
        self.state.last_post = Some(after.post.clone());
        let step = self.learning.multiplier_step.at(t);
        update_multipliers(&mut self.state, &out.rrh_power_w, &out.rrh_fronthaul_bps, &self.constraints, step);
        report
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { schema_version: CHECKPOINT_SCHEMA_VERSION, state: self.state.clone() }
    }

    pub fn restore(&mut self, cp: Checkpoint) -> Result<()> {
        let st = &cp.state;
        let m = self.cluster.rrhs;
        if st.values.len() != m || st.gamma_p.len() != m || st.gamma_r.len() != m || st.iterates.len() != m {
            return Err(Error::Shape("checkpoint does not match the cluster size".into()));
        }
        self.state = cp.state;
        Ok(())
    }
}

/// Max-min fair split of `budget` among demands capped at `room`.
fn progressive_fill(room: &[f64], budget: f64) -> Vec<f64> {
    let mut out = vec![0.0; room.len()];
    let mut order: Vec<usize> = (0..room.len()).collect();
    order.sort_by(|a, b| room[*a].total_cmp(&room[*b]));
    let mut left = budget;
    for (n, &i) in order.iter().enumerate() {
        let share = left / (room.len() - n) as f64;
        out[i] = room[i].min(share);
        left -= out[i];
    }
    out
}

/// Scales `powers` down by the smallest common factor that still carries
/// `rate`; all zero when `rate` is zero.
fn trim_power(powers: &mut [f64], gains: &[f64], rate: f64, capacity: impl Fn(&[f64]) -> f64) {
    if rate <= 0.0 {
        powers.iter_mut().for_each(|p| *p = 0.0);
        return;
    }
    if gains.is_empty() || capacity(powers) <= rate {
        return;
    }
    let full = powers.to_vec();
    let scaled = |f: f64| full.iter().map(|p| p * f).collect::<Vec<_>>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if capacity(&scaled(mid)) >= rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    powers.copy_from_slice(&scaled(hi));
}

/// Result of running the value learner on a known tiny chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLearning {
    pub table: ValueTable,
    /// Learned values relative to state 0.
    pub relative: Vec<f64>,
    /// Learned average cost per frame (the table's reference offset).
    pub theta: f64,
    /// Relative-value snapshots taken at the requested frames.
    pub snapshots: Vec<(u64, Vec<f64>)>,
}

/// Runs the online post-decision value update on `mdp`, one region per
/// state. Arrivals are only sampled. Each update moves the visited anchor
/// toward the minimum over actions of stage cost plus expected next value,
/// using the known service kernel. The trajectory takes that minimizing
/// action except with probability `explore`, when it picks uniformly, so
/// that regions the current policy avoids still get corrected.
pub fn learn_on_mdp<R: rand::Rng + ?Sized>(
    mdp: &TinyMdp,
    frames: u64,
    schedule: Schedule,
    explore: f64,
    snapshot_at: &[u64],
    rng: &mut R,
) -> TinyLearning {
    let n = mdp.states();
    let mut table = ValueTable::new(n, 1.0);
    table.refresh();
    let sample = |k: &[(usize, f64)], rng: &mut R| -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(j, p) in k {
            acc += p;
            if u < acc {
                return j;
            }
        }
        k.last().map(|e| e.0).unwrap_or(0)
    };
    let mut post = 0usize;
    let mut snapshots = Vec::new();
    let mut values: Vec<f64> = vec![0.0; n];
    for t in 1..=frames {
        let x = sample(&mdp.arrival[post], rng);
        let (best, greedy) = mdp.best_action(x, &values);
        let step = schedule.at(table.visits[post] + 1);
        table.learn_toward(post, best, step);
        for (k, v) in values.iter_mut().enumerate() {
            *v = table.anchor_value(k);
        }
        let actions = mdp.cost[x].len();
        let a = if rng.random::<f64>() < explore { rng.random_range(0..actions) } else { greedy };
        post = sample(&mdp.service[x][a], rng);
        if snapshot_at.contains(&t) {
            snapshots.push((t, table.relative()));
        }
    }
    let relative = table.relative();
    let theta = table.reference();
    TinyLearning { table, relative, theta, snapshots }
}

/// `max |a - b| / span(b)` for two value tables anchored at the same state.
pub fn span_relative_error(learned: &[f64], reference: &[f64]) -> f64 {
    let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    learned.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / span
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, CsitQuality};
    use crate::hcomp::evaluate_link;
    use crate::oracle::{solve_per_queue, QueueModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cluster() -> ClusterConfig {
        ClusterConfig { link_gain_db: -20.0, ..ClusterConfig::default() }
    }

    fn controller(mode: ValueMode) -> Controller {
        let c = cluster();
        Controller::new(
            c.clone(),
            TrafficConfig::default(),
            ConstraintConfig::uniform(3, 1.0, 60e6),
            LearningConfig::default(),
            StreamSplit::hybrid(&c),
            mode,
        )
        .unwrap()
    }

    fn precoders(c: &Controller, seed: u64) -> (crate::channel::ChannelState, PrecoderSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = draw_channel(&c.cluster, &CsitQuality::perfect(3), &mut rng).unwrap();
        let pre = PrecoderSet::build(&c.cluster, &ch, &c.split).unwrap();
        (ch, pre)
    }

    fn linear_table(slope: f64) -> ValueTable {
        let mut t = ValueTable::new(8, 4e6);
        t.set_linear(slope);
        t
    }

    #[test]
    fn lookup_hits_anchors_and_is_linear_between() {
        let mut t = ValueTable::new(4, 10.0);
        t.anchors = vec![1.0, 3.0, 4.0, 8.0];
        t.visits = vec![1; 4];
        t.refresh();
        assert_eq!(t.value(15.0).unwrap(), 3.0);
        assert_relative_eq!(t.value(20.0).unwrap(), 3.5);
        assert_relative_eq!(t.value(0.0).unwrap(), 0.0);
        assert_relative_eq!(t.value(40.0).unwrap(), 10.0);
        assert!(matches!(t.value(40.5), Err(Error::OutOfRange { .. })));
        assert!(t.differential(-1.0).is_err());
    }

    #[test]
    fn linear_value_has_constant_differential() {
        let t = linear_table(2e-7);
        assert_eq!(t.differential(0.0).unwrap(), 0.0);
        for q in [1.0, 1e5, 3.9e6, 4e6, 1.7e7, 3.2e7] {
            assert_relative_eq!(t.differential(q).unwrap(), 2e-7, max_relative = 1e-9);
        }
    }

    #[test]
    fn unvisited_regions_are_filled_from_visited_ones() {
        let mut t = ValueTable::new(5, 1.0);
        t.learn(1, 1, 2.0, 1.0);
        t.learn(3, 1, 4.0, 1.0);
        // U1 = 2; region 0 then reads as 2, so U3 = 4 + 2 - 2 = 4.
        let eff: Vec<f64> = (0..5).map(|k| t.anchor_value(k)).collect();
        assert_eq!(eff, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn td_fixed_point_leaves_table_unchanged() {
        let mut t = ValueTable::new(3, 1.0);
        t.anchors = vec![0.0, 1.0, 3.0];
        t.visits = vec![1; 3];
        t.refresh();
        t.learn(1, 2, -2.0, 0.5);
        assert_eq!(t.anchors, vec![0.0, 1.0, 3.0]);
    }

    #[test]
    fn single_region_is_stationary_under_constant_cost() {
        // With one region next, reference and current coincide: the update
        // reduces to U += zeta * (g - U) and settles at g.
        let mut t = ValueTable::new(1, 1.0);
        for n in 1..=2000 {
            t.learn(0, 0, 3.0, Schedule::new(1.0, 0.6).at(n));
        }
        assert_relative_eq!(t.anchors[0], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn only_the_visited_anchor_moves() {
        let mut t = ValueTable::new(4, 1.0);
        t.learn(2, 3, 1.0, 0.1);
        assert_eq!(t.anchors, vec![0.0, 0.0, 0.1, 0.0]);
    }

    #[test]
    fn two_region_chain_matches_oracle() {
        let model = QueueModel::three_action(2, vec![0.6, 0.4], 1, 0.3);
        let mdp = model.build().unwrap();
        let exact = solve_per_queue(&mdp, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let got = learn_on_mdp(&mdp, 100_000, Schedule::new(1.0, 0.7), 0.2, &[], &mut rng);
        let err = span_relative_error(&got.relative, &exact.values);
        assert!(err < 0.05, "relative error {err}");
        assert_relative_eq!(got.theta, exact.theta, max_relative = 0.05);
    }

    #[test]
    fn bellman_residual_falls_across_decades() {
        let model = QueueModel::three_action(8, vec![0.3, 0.2, 0.2, 0.3], 2, 0.5);
        let mdp = model.build().unwrap();
        let exact = solve_per_queue(&mdp, 1e-12).unwrap();
        let marks = [1_000, 10_000, 100_000];
        // Max-norm residuals are noisy per run; average a few seeds.
        let mut mean = [0.0; 3];
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = learn_on_mdp(&mdp, 100_000, Schedule::new(1.0, 0.7), 0.2, &marks, &mut rng);
            for (m, (_, v)) in mean.iter_mut().zip(&got.snapshots) {
                *m += mdp.bellman_residual(v, exact.theta) / 4.0;
            }
        }
        assert!(mean.windows(2).all(|w| w[1] < w[0]), "{mean:?}");
    }

    #[test]
    fn default_schedules_satisfy_two_timescale_conditions() {
        let l = LearningConfig::default();
        check_schedules(&l.value_step, &l.multiplier_step, &l.action_step).unwrap();
        // zeta_gamma / zeta_u = 5 t^-(0.9 - 0.8) -> 0
        let ratio = |t: u64| l.multiplier_step.at(t) / l.value_step.at(t);
        assert!(ratio(1_000_000) < ratio(1_000) * 0.51);
        assert!(check_schedules(&l.value_step, &Schedule::new(1.0, 0.5), &l.action_step).is_err());
        assert!(check_schedules(&Schedule::new(1.0, 0.9), &Schedule::new(1.0, 0.8), &l.action_step).is_err());
        assert!(check_schedules(&l.value_step, &l.multiplier_step, &Schedule::new(1.0, 1.2)).is_err());
    }

    fn gradient_case<'a>(
        a: &'a UeAction,
        pre: &'a PrecoderSet,
        ue: usize,
        q: f64,
        ok: (bool, bool),
    ) -> GradientInput<'a> {
        GradientInput {
            ue,
            backlog_bits: q,
            action: a,
            shared_ok: ok.0,
            private_ok: ok.1,
            shared_capped: false,
            private_capped: false,
            backoff: [0.85; 2],
            shared_gain: &pre.ues[ue].shared_gain,
            private_gain: &pre.ues[ue].private_gain,
            rho: &pre.ues[ue].rho,
        }
    }

    #[test]
    fn failures_with_zero_prices_give_zero_rate_gradient() {
        let mut c = controller(ValueMode::FrozenLinear { horizon_frames: 20.0 });
        c.state.gamma_p = vec![0.0; 3];
        c.state.gamma_r = vec![0.0; 3];
        let (_, pre) = precoders(&c, 1);
        let a = UeAction { shared_power: vec![0.5], private_power: vec![0.5], shared_rate: 1e7, private_rate: 1e7 };
        let g = per_stage_gradient(
            &gradient_case(&a, &pre, 0, 8e6, (false, false)),
            &c.state.values[0],
            &c.state,
            &c.cluster,
            &c.constraints,
            &c.learning,
        );
        assert_eq!((g.shared_rate, g.private_rate), (0.0, 0.0));
        assert!(g.shared_power.iter().chain(&g.private_power).all(|x| *x == 0.0));
    }

    #[test]
    fn fronthaul_price_alone_pushes_private_rate_down() {
        let mut c = controller(ValueMode::FrozenLinear { horizon_frames: 0.0 });
        c.state.gamma_r = vec![0.3, 0.2, 0.1];
        let (_, pre) = precoders(&c, 2);
        let a = UeAction { shared_power: vec![0.5], private_power: vec![0.5], shared_rate: 1e7, private_rate: 1e7 };
        let g = per_stage_gradient(
            &gradient_case(&a, &pre, 1, 8e6, (true, true)),
            &c.state.values[1],
            &c.state,
            &c.cluster,
            &c.constraints,
            &c.learning,
        );
        assert_relative_eq!(g.private_rate, 0.2);
        assert_relative_eq!(g.shared_rate, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn value_differential_pulls_rates_up() {
        let c = controller(ValueMode::FrozenLinear { horizon_frames: 20.0 });
        let (_, pre) = precoders(&c, 3);
        let a = UeAction { shared_power: vec![0.5], private_power: vec![0.5], shared_rate: 1e7, private_rate: 1e7 };
        let slope = 20.0 / c.traffic.offered_bits_per_s(0);
        let g = per_stage_gradient(
            &gradient_case(&a, &pre, 0, 8e6, (true, false)),
            &c.state.values[0],
            &c.state,
            &c.cluster,
            &c.constraints,
            &c.learning,
        );
        let price: f64 = 3.0 * 0.01;
        assert_relative_eq!(g.shared_rate, price - 0.01 * slope * 60e6, max_relative = 1e-9);
        assert_relative_eq!(g.private_rate, 0.01);
    }

    #[test]
    fn symmetric_two_ue_instance_gives_symmetric_gradients() {
        let c2 = ClusterConfig { rrhs: 2, tx_antennas: 3, rx_antennas: 2, link_gain_db: -20.0, ..ClusterConfig::default() };
        let split = StreamSplit::hybrid(&c2);
        let ctl = Controller::new(
            c2.clone(),
            TrafficConfig::uniform(2, 2.5, 4e6, 32_000_000),
            ConstraintConfig::uniform(2, 1.0, 60e6),
            LearningConfig { power_gradient: PowerGradient::SmoothedMargin, ..LearningConfig::default() },
            split,
            ValueMode::FrozenLinear { horizon_frames: 20.0 },
        )
        .unwrap();
        let mut st = ctl.state.clone();
        st.gamma_p = vec![0.2, 0.2];
        st.gamma_r = vec![0.1, 0.1];
        let a = UeAction { shared_power: vec![0.4], private_power: vec![0.6], shared_rate: 2e7, private_rate: 1e7 };
        let rho = vec![vec![0.5, 0.5]];
        let grad = |ue: usize| {
            let input = GradientInput {
                ue,
                backlog_bits: 6e6,
                action: &a,
                shared_ok: true,
                private_ok: true,
                shared_capped: true,
                private_capped: false,
                backoff: [0.8, 0.9],
                shared_gain: &[3.0],
                private_gain: &[1.5],
                rho: &rho,
            };
            per_stage_gradient(&input, &st.values[ue], &st, &ctl.cluster, &ctl.constraints, &ctl.learning)
        };
        assert_eq!(grad(0), grad(1));
    }

    #[test]
    fn projected_step_clips_at_zero_and_cap() {
        let it = ActionIterate { shared_power: vec![1.0], private_power: vec![4.0], shared_rate: 0.0, private_rate: 1.0, visits: 0 };
        let g = UeGradient { shared_power: vec![10.0], private_power: vec![-1.0], shared_rate: 0.0, private_rate: 0.0 };
        let next = gradient_step(&it, &g, 0.2, 4.0, 4.0);
        assert_eq!(next.shared_power, vec![0.0]);
        assert_eq!(next.private_power, vec![4.0]);
        assert_eq!((next.shared_rate, next.private_rate), (0.0, 1.0));
        let zero = UeGradient { shared_power: vec![0.0], private_power: vec![0.0], shared_rate: 0.0, private_rate: 0.0 };
        assert_eq!(gradient_step(&it, &zero, 0.2, 4.0, 4.0), it);
    }

    #[test]
    fn multiplier_updates_project_and_follow_the_harmonic_sum() {
        let c = controller(ValueMode::Learned);
        let mut st = c.state.clone();
        update_multipliers(&mut st, &[1.0, 0.5, 1.0], &[60e6, 60e6, 70e6], &c.constraints, 0.5);
        assert_relative_eq!(st.gamma_p[0], 0.01);
        assert_eq!(st.gamma_p[1], 0.0);
        assert_relative_eq!(st.gamma_r[2], 0.01 + 0.5 / 6.0, epsilon = 1e-12);

        let mut st = c.state.clone();
        st.gamma_p = vec![0.0; 3];
        let mut harmonic = 0.0;
        for t in 1..=10_000u64 {
            update_multipliers(&mut st, &[1.1; 3], &[60e6; 3], &c.constraints, 1.0 / t as f64);
            harmonic += 1.0 / t as f64;
        }
        // Normalized multipliers grow by 0.1 * sum(1/t).
        assert_relative_eq!(st.gamma_p[0], 0.1 * harmonic, max_relative = 1e-9);
        assert!(st.gamma_p.iter().chain(&st.gamma_r).all(|g| *g >= 0.0));
    }

    fn run_frames(c: &mut Controller, frames: u64, q: &QueueState, seed: u64) -> Decision {
        let (ch, pre) = precoders(c, seed);
        let mut last = None;
        for _ in 0..frames {
            let d = c.decide(q, &pre);
            let out = evaluate_link(&ch, &pre, &d.action, &c.cluster).unwrap();
            c.observe(&d, &pre, &out, q);
            last = Some(d);
        }
        last.unwrap()
    }

    #[test]
    fn empty_queues_get_no_rate() {
        let mut c = controller(ValueMode::Learned);
        let q = QueueState::empty(3);
        let d = run_frames(&mut c, 100, &q, 4);
        for a in &d.action.ues {
            assert_eq!((a.shared_rate, a.private_rate), (0.0, 0.0));
        }
    }

    #[test]
    fn queue_blind_control_ignores_backlog() {
        let c = controller(ValueMode::FrozenLinear { horizon_frames: 20.0 });
        let (_, pre) = precoders(&c, 6);
        let short = QueueState { backlog: vec![0, 1, 2], post: vec![0; 3] };
        let long = QueueState { backlog: vec![30_000_000, 8_000_000, 2], post: vec![0; 3] };
        let (a, b) = (c.decide(&short, &pre), c.decide(&long, &pre));
        assert_eq!(a.action, b.action);
    }

    #[test]
    fn unconstrained_rate_climbs_to_the_capacity_cap_without_failing() {
        let mut c = controller(ValueMode::Learned);
        let slope = 20.0 / c.traffic.offered_bits_per_s(0);
        c.state.values.iter_mut().for_each(|t| t.set_linear(slope));
        c.learning.value_step = Schedule::new(1e-12, 0.6);
        c.learning.multiplier_step = Schedule::new(1e-12, 0.9);
        c.learning.action_step = Schedule::new(0.5, 0.7);
        c.state.gamma_p = vec![0.0; 3];
        c.state.gamma_r = vec![0.0; 3];
        let q = QueueState { backlog: vec![30_000_000; 3], post: vec![30_000_000; 3] };
        let (ch, pre) = precoders(&c, 7);
        let mut prev = 0.0;
        for _ in 0..400 {
            let d = c.decide(&q, &pre);
            let out = evaluate_link(&ch, &pre, &d.action, &c.cluster).unwrap();
            assert!(out.ues[0].private_ok && out.ues[0].shared_ok);
            let r = d.action.ues[0].private_rate;
            assert!(r >= prev - 1e-6);
            prev = r;
            c.observe(&d, &pre, &out, &q);
        }
        let d = c.decide(&q, &pre);
        assert!(d.private_capped[0]);
    }

    #[test]
    fn water_filling_shuts_streams_whose_value_is_below_the_price() {
        let mut c = controller(ValueMode::FrozenLinear { horizon_frames: 20.0 });
        let (_, pre) = precoders(&c, 12);
        let q = QueueState::empty(3);
        // tau * slope = 2e-8 s per bit/s. The shared price 3 * 0.5 / 60e6
        // exceeds it, the private price 0.5 / 60e6 does not.
        c.state.gamma_r = vec![0.5; 3];
        c.state.gamma_p = vec![0.05; 3];
        let d = c.decide(&q, &pre);
        for a in &d.action.ues {
            assert_eq!(a.shared_power, vec![0.0]);
            assert_eq!(a.shared_rate, 0.0);
            assert!(a.private_power[0] > 0.0 && a.private_rate > 0.0);
        }
        // Free power: private streams fill the fronthaul on their own and
        // their power is trimmed to what that rate needs.
        c.state.gamma_p = vec![0.0; 3];
        c.state.gamma_r = vec![0.0; 3];
        let d = c.decide(&q, &pre);
        for a in &d.action.ues {
            assert_relative_eq!(a.private_rate, c.constraints.max_fronthaul_bps[0], max_relative = 1e-12);
            assert!(a.private_power[0] > 0.0 && a.private_power[0] <= 4.0 * c.constraints.max_power_w[0]);
            assert_eq!(a.shared_rate, 0.0);
            assert_eq!(a.shared_power, vec![0.0]);
        }
    }

    #[test]
    fn identical_inputs_give_identical_actions() {
        let q = QueueState { backlog: vec![5_000_000, 0, 12_000_000], post: vec![4_000_000, 0, 11_000_000] };
        let mut a = controller(ValueMode::Learned);
        let mut b = controller(ValueMode::Learned);
        assert_eq!(run_frames(&mut a, 50, &q, 8), run_frames(&mut b, 50, &q, 8));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn checkpoint_round_trips_and_checks_schema() {
        let mut c = controller(ValueMode::Learned);
        let q = QueueState { backlog: vec![5_000_000, 1_000, 12_000_000], post: vec![4_000_000, 0, 11_000_000] };
        run_frames(&mut c, 20, &q, 9);
        let text = c.checkpoint().to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        let mut fresh = controller(ValueMode::Learned);
        fresh.restore(back).unwrap();
        assert_eq!(fresh.state.values[0].value(6e6).unwrap(), c.state.values[0].value(6e6).unwrap());
        assert_eq!(fresh.state.gamma_r, c.state.gamma_r);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(Checkpoint::from_json(&bumped).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ConstraintConfig::uniform(3, 0.0, 1.0).validate(3).is_err());
        assert!(ConstraintConfig::uniform(2, 1.0, 1.0).validate(3).is_err());
        let bad = LearningConfig { multiplier_step: Schedule::new(1.0, 0.5), ..LearningConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn multipliers_and_values_stay_finite_and_nonnegative(seed in 0u64..1000, load in 0.5f64..6.0) {
            let c0 = cluster();
            let mut c = Controller::new(
                c0.clone(),
                TrafficConfig::uniform(3, load, 4e6, 32_000_000),
                ConstraintConfig::uniform(3, 1.0, 30e6),
                LearningConfig::default(),
                StreamSplit::hybrid(&c0),
                ValueMode::Learned,
            ).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut q = QueueState::empty(3);
            for _ in 0..150 {
                let ch = draw_channel(&c.cluster, &CsitQuality::uniform(3, 0.1), &mut rng).unwrap();
                let pre = PrecoderSet::build(&c.cluster, &ch, &c.split).unwrap();
                let d = c.decide(&q, &pre);
                let out = evaluate_link(&ch, &pre, &d.action, &c.cluster).unwrap();
                let delivered: Vec<u64> = out.ues.iter().map(|u| crate::queueing::whole_bits(u.delivered_bits)).collect();
                let arrivals = crate::queueing::draw_arrivals(&c.traffic, c.cluster.frame_duration_s, &mut rng);
                q.advance(&delivered, &arrivals, c.traffic.buffer_bits);
                c.observe(&d, &pre, &out, &q);
            }
            prop_assert!(c.state.gamma_p.iter().chain(&c.state.gamma_r).all(|g| *g >= 0.0 && g.is_finite()));
            prop_assert!(c.state.values.iter().all(|t| t.anchors.iter().all(|v| v.is_finite())));
        }
    }
}
