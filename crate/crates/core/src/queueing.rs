//! Per-UE traffic queues. Backlogs are whole bits so that arrivals,
//! deliveries, drops and backlog balance exactly over any run.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    /// Mean packet arrival rate of each UE (packets/s).
    pub arrival_rate: Vec<f64>,
    pub mean_packet_bits: f64,
    /// Buffer size `N_Q` (bits).
    pub buffer_bits: u64,
    /// Delay weight `beta` of each UE.
    pub delay_weight: Vec<f64>,
}

impl TrafficConfig {
    pub fn uniform(m: usize, arrival_rate: f64, mean_packet_bits: f64, buffer_bits: u64) -> Self {
        Self {
            arrival_rate: vec![arrival_rate; m],
            mean_packet_bits,
            buffer_bits,
            delay_weight: vec![1.0; m],
        }
    }

    pub fn ues(&self) -> usize {
        self.arrival_rate.len()
    }

    /// Mean offered load of `ue` in bits/s.
    pub fn offered_bits_per_s(&self, ue: usize) -> f64 {
        self.arrival_rate[ue] * self.mean_packet_bits
    }

    /// Zero arrival rates are accepted so that idle-cluster runs are
    /// expressible; everything else must be strictly positive.
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.arrival_rate.len() != m || self.delay_weight.len() != m {
            return Err(Error::InvalidConfig(format!(
                "traffic config covers {}/{} UEs, cluster has {m}",
                self.arrival_rate.len(),
                self.delay_weight.len()
            )));
        }
        if self.arrival_rate.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("arrival rates must be finite and >= 0".into()));
        }
        if self.delay_weight.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidConfig("delay weights must be positive".into()));
        }
        if !(self.mean_packet_bits >= 1.0 && self.mean_packet_bits.is_finite()) {
            return Err(Error::InvalidConfig("mean packet size must be at least one bit".into()));
        }
        if self.buffer_bits == 0 {
            return Err(Error::InvalidConfig("buffer size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self::uniform(3, 2.5, 4e6, 32_000_000)
    }
}

/// Packet sizes (bits) arriving at each UE during one frame. Counts are
/// Poisson with mean `lambda * tau`; sizes are exponential, rounded up to a
/// whole bit.
pub fn draw_packets<R: Rng + ?Sized>(cfg: &TrafficConfig, tau: f64, rng: &mut R) -> Vec<Vec<u64>> {
    let size = Exp::new(1.0 / cfg.mean_packet_bits).expect("validated mean packet size");
    cfg.arrival_rate
        .iter()
        .map(|&lambda| {
            let mean = lambda * tau;
            if mean <= 0.0 {
                return Vec::new();
            }
            let count = Poisson::new(mean).expect("positive Poisson mean").sample(rng) as usize;
            (0..count).map(|_| (size.sample(rng) as f64).ceil().max(1.0) as u64).collect()
        })
        .collect()
}

/// Total arrival bits per UE for one frame.
pub fn draw_arrivals<R: Rng + ?Sized>(cfg: &TrafficConfig, tau: f64, rng: &mut R) -> Vec<u64> {
    draw_packets(cfg, tau, rng).iter().map(|p| p.iter().sum()).collect()
}

/// One application of the buffer recursion. Returns
/// `(post_decision, next, served, dropped)`.
pub fn advance_queue(q: u64, delivered: u64, arrivals: u64, buffer: u64) -> (u64, u64, u64, u64) {
    let served = delivered.min(q);
    let post = q - served;
    let offered = post + arrivals;
    let next = offered.min(buffer);
    (post, next, served, offered - next)
}

/// Bits a link outcome can remove from a queue: the delivered amount,
/// truncated to whole bits.
pub fn whole_bits(delivered: f64) -> u64 {
    if delivered.is_finite() && delivered > 0.0 {
        delivered.floor() as u64
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState {
    /// Backlog `Q` at the start of the frame (bits).
    pub backlog: Vec<u64>,
    /// Post-decision backlog `Q~` of the last update (bits).
    pub post: Vec<u64>,
}

/// Per-UE totals of an update cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueueStep {
    pub served: Vec<u64>,
    pub dropped: Vec<u64>,
}

impl QueueState {
    pub fn empty(m: usize) -> Self {
        Self { backlog: vec![0; m], post: vec![0; m] }
    }

    pub fn advance(&mut self, delivered: &[u64], arrivals: &[u64], buffer: u64) -> QueueStep {
        let m = self.backlog.len();
        let mut step = QueueStep { served: vec![0; m], dropped: vec![0; m] };
        for i in 0..m {
            let (post, next, served, dropped) = advance_queue(self.backlog[i], delivered[i], arrivals[i], buffer);
            self.post[i] = post;
            self.backlog[i] = next;
            step.served[i] = served;
            step.dropped[i] = dropped;
        }
        step
    }
}

/// Weighted delay cost `sum_i beta_i Q_i / lambda_bar_i` (seconds), with
/// `lambda_bar` the offered load in bits/s. A UE with no offered load
/// contributes nothing.
pub fn delay_cost(q: &QueueState, cfg: &TrafficConfig) -> f64 {
    (0..q.backlog.len()).map(|i| delay_term(q.backlog[i], cfg, i)).sum()
}

pub fn delay_term(backlog: u64, cfg: &TrafficConfig, ue: usize) -> f64 {
    let load = cfg.offered_bits_per_s(ue);
    if load > 0.0 {
        cfg.delay_weight[ue] * backlog as f64 / load
    } else {
        0.0
    }
}

/// FIFO packet tags for the Little's-law cross-check. Each queued chunk
/// remembers its arrival frame; served bits are charged their sojourn.
#[derive(Debug, Clone, Default)]
pub struct PacketTracker {
    queues: Vec<VecDeque<(u64, u64)>>,
    /// Sum over served bits of frames spent in the buffer.
    pub bit_frames: Vec<u128>,
    pub bits_served: Vec<u64>,
    /// Packets whose last bit left the buffer, and their total sojourn.
    pub packets_done: Vec<u64>,
    pub packet_frames: Vec<u64>,
}

impl PacketTracker {
    pub fn new(m: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); m],
            bit_frames: vec![0; m],
            bits_served: vec![0; m],
            packets_done: vec![0; m],
            packet_frames: vec![0; m],
        }
    }

    /// Removes `served` bits from the head of UE `ue`'s buffer at `frame`.
    /// Statistics are accumulated only when `record` is set.
    pub fn serve(&mut self, ue: usize, mut served: u64, frame: u64, record: bool) {
        let q = &mut self.queues[ue];
        while served > 0 {
            let Some(head) = q.front_mut() else { break };
            let take = head.1.min(served);
            if record {
                self.bit_frames[ue] += u128::from(take) * u128::from(frame - head.0);
                self.bits_served[ue] += take;
            }
            head.1 -= take;
            served -= take;
            if head.1 == 0 {
                if record {
                    self.packets_done[ue] += 1;
                    self.packet_frames[ue] += frame - head.0;
                }
                q.pop_front();
            }
        }
    }

    /// Enqueues the accepted portion of this frame's packets, tail-dropping
    /// whatever does not fit in `room` bits.
    pub fn admit(&mut self, ue: usize, packets: &[u64], frame: u64, mut room: u64) {
        for &p in packets {
            let take = p.min(room);
            if take == 0 {
                break;
            }
            self.queues[ue].push_back((frame, take));
            room -= take;
        }
    }

    pub fn queued_bits(&self, ue: usize) -> u64 {
        self.queues[ue].iter().map(|c| c.1).sum()
    }

    /// Mean sojourn of a served bit (seconds).
    pub fn bit_delay(&self, ue: usize, tau: f64) -> Option<f64> {
        (self.bits_served[ue] > 0).then(|| self.bit_frames[ue] as f64 / self.bits_served[ue] as f64 * tau)
    }

    /// Mean sojourn of a completed packet (seconds).
    pub fn packet_delay(&self, ue: usize, tau: f64) -> Option<f64> {
        (self.packets_done[ue] > 0).then(|| self.packet_frames[ue] as f64 / self.packets_done[ue] as f64 * tau)
    }
}
