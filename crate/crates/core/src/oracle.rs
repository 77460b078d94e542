//! Exact relative value iteration on tiny queue MDPs, written in the
//! post-decision form the online learner uses:
//!
//! `V(s) + theta = sum_x Pr[x | s] min_a ( c(x, a) + sum_s' Pr[s' | x, a] V(s') )`
//!
//! where `s` is a post-decision state, `x` the pre-decision state after
//! arrivals, and `s'` the next post-decision state after service.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse distribution over state indices.
pub type Kernel = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMdp {
    /// `arrival[s]`: pre-decision states reachable from post-decision `s`.
    pub arrival: Vec<Kernel>,
    /// `service[x][a]`: post-decision states reachable from `x` under `a`.
    pub service: Vec<Vec<Kernel>>,
    /// `cost[x][a]`: per-stage cost.
    pub cost: Vec<Vec<f64>>,
}

pub const MAX_JOINT_STATES: usize = 4096;
pub const MAX_SWEEPS: usize = 1_000_000;
pub const DEFAULT_TOL: f64 = 1e-9;
/// Self-loop weight of the aperiodicity transform.
const DAMPING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub theta: f64,
    /// Relative values anchored at state 0.
    pub values: Vec<f64>,
    pub sweeps: usize,
}

impl TinyMdp {
    pub fn new(arrival: Vec<Kernel>, service: Vec<Vec<Kernel>>, cost: Vec<Vec<f64>>) -> Result<Self> {
        let mdp = Self { arrival, service, cost };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn states(&self) -> usize {
        self.arrival.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states();
        if n == 0 || self.service.len() != n || self.cost.len() != n {
            return Err(Error::Shape("arrival, service and cost tables must cover every state".into()));
        }
        let check = |k: &Kernel, what: &str| -> Result<()> {
            let total: f64 = k.iter().map(|e| e.1).sum();
            if k.iter().any(|&(j, p)| j >= n || !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Shape(format!("{what} row is not a distribution over states (sum {total})")));
            }
            Ok(())
        };
        for (s, k) in self.arrival.iter().enumerate() {
            check(k, &format!("arrival[{s}]"))?;
        }
        for x in 0..n {
            if self.service[x].is_empty() || self.service[x].len() != self.cost[x].len() {
                return Err(Error::Shape(format!("state {x}: action tables missing or mismatched")));
            }
            for (a, k) in self.service[x].iter().enumerate() {
                check(k, &format!("service[{x}][{a}]"))?;
            }
            if self.cost[x].iter().any(|c| !c.is_finite()) {
                return Err(Error::Shape(format!("state {x}: non-finite cost")));
            }
        }
        Ok(())
    }

    /// `min_a c(x,a) + E[V(s')]` and the minimizing action for every `x`.
    fn decide(&self, values: &[f64]) -> Vec<(f64, usize)> {
        (0..self.states()).map(|x| self.best_action(x, values)).collect()
    }

    /// Minimum of `c(x, a) + E[V(next)]` at pre-decision state `x`, with the
    /// minimizing action.
    pub fn best_action(&self, x: usize, values: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (a, (c, k)) in self.cost[x].iter().zip(&self.service[x]).enumerate() {
            let q = c + k.iter().map(|&(j, p)| p * values[j]).sum::<f64>();
            // Keep the lowest index among numerical ties.
            if a == 0 || q < best.0 - 1e-12 * best.0.abs().max(1.0) {
                best = (q, a);
            }
        }
        best
    }

    /// `(T V)(s~) = E_A[min_a c(x, a) + E[V(next)]]` over the arrival kernel.
    pub fn bellman(&self, values: &[f64]) -> Vec<f64> {
        let inner = self.decide(values);
        self.arrival.iter().map(|k| k.iter().map(|&(x, p)| p * inner[x].0).sum()).collect()
    }

    /// Greedy action at every pre-decision state.
    pub fn greedy(&self, values: &[f64]) -> Vec<usize> {
        self.decide(values).into_iter().map(|d| d.1).collect()
    }

    /// `max_s |T V(s) - V(s) - theta|`.
    pub fn bellman_residual(&self, values: &[f64], theta: f64) -> f64 {
        self.bellman(values)
            .iter()
            .zip(values)
            .map(|(t, v)| (t - v - theta).abs())
            .fold(0.0, f64::max)
    }

    /// Product chain of two independent queues. Joint state `(s1, s2)` has
    /// index `s1 * n2 + s2`; joint action `(a1, a2)` has index `a1 * k2 + a2`.
    pub fn product(a: &TinyMdp, b: &TinyMdp) -> Result<Self> {
        Self::product_filtered(a, b, |_, _, _, _| true)
    }

    /// Product chain restricted to the joint actions `allow(x1, a1, x2, a2)`
    /// admits. Restricting the action set couples the queues.
    pub fn product_filtered(
        a: &TinyMdp,
        b: &TinyMdp,
        allow: impl Fn(usize, usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let (na, nb) = (a.states(), b.states());
        if na * nb > MAX_JOINT_STATES {
            return Err(Error::OutOfRange { value: (na * nb) as f64, max: MAX_JOINT_STATES as f64 });
        }
        let idx = |s1: usize, s2: usize| s1 * nb + s2;
        let cross = |k1: &Kernel, k2: &Kernel| -> Kernel {
            k1.iter().flat_map(|&(i, p)| k2.iter().map(move |&(j, q)| (idx(i, j), p * q))).collect()
        };
        let mut arrival = Vec::with_capacity(na * nb);
        let mut service = Vec::with_capacity(na * nb);
        let mut cost = Vec::with_capacity(na * nb);
        for s1 in 0..na {
            for s2 in 0..nb {
                arrival.push(cross(&a.arrival[s1], &b.arrival[s2]));
                let mut ks = Vec::new();
                let mut cs = Vec::new();
                for a1 in 0..a.cost[s1].len() {
                    for a2 in 0..b.cost[s2].len() {
                        if allow(s1, a1, s2, a2) {
                            ks.push(cross(&a.service[s1][a1], &b.service[s2][a2]));
                            cs.push(a.cost[s1][a1] + b.cost[s2][a2]);
                        }
                    }
                }
                service.push(ks);
                cost.push(cs);
            }
        }
        Self::new(arrival, service, cost)
    }
}

/// Relative value iteration for a single queue's post-decision chain.
pub fn solve_per_queue(mdp: &TinyMdp, tol: f64) -> Result<Solution> {
    relative_value_iteration(mdp, tol)
}

/// Same contract on a joint chain; limited to `MAX_JOINT_STATES` states.
pub fn solve_joint(mdp: &TinyMdp, tol: f64) -> Result<Solution> {
    if mdp.states() > MAX_JOINT_STATES {
        return Err(Error::OutOfRange { value: mdp.states() as f64, max: MAX_JOINT_STATES as f64 });
    }
    relative_value_iteration(mdp, tol)
}

fn relative_value_iteration(mdp: &TinyMdp, tol: f64) -> Result<Solution> {
    mdp.validate()?;
    let n = mdp.states();
    let mut v = vec![0.0; n];
    let mut span = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        let t = mdp.bellman(&v);
        let (lo, hi) = t.iter().zip(&v).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            (lo.min(a - b), hi.max(a - b))
        });
        span = hi - lo;
        if span < tol {
            let theta = t[0] - v[0];
            let anchor = v[0];
            return Ok(Solution { theta, values: v.iter().map(|x| x - anchor).collect(), sweeps: sweep });
        }
        // Damped step on the aperiodic transform, re-anchored at state 0.
        let next: Vec<f64> = t.iter().zip(&v).map(|(a, b)| DAMPING * a + (1.0 - DAMPING) * b).collect();
        let anchor = next[0];
        v = next.into_iter().map(|x| x - anchor).collect();
    }
    Err(Error::NotConverged { sweeps: MAX_SWEEPS, span })
}

/// Parameters of a synthetic single-queue model on integer levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueModel {
    pub levels: usize,
    /// `arrival_pmf[k]`: probability that `k` levels arrive in a frame.
    pub arrival_pmf: Vec<f64>,
    pub actions: Vec<ServiceAction>,
    /// Cost per backlog level.
    pub delay_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceAction {
    /// Levels removed when the transmission succeeds.
    pub rate: usize,
    pub success: f64,
    /// Resource price paid whenever the action is used.
    pub price: f64,
}

impl QueueModel {
    /// Three-point grid: idle, half quantum at half power, full quantum at
    /// full power. Higher power buys a higher success probability.
    pub fn three_action(levels: usize, arrival_pmf: Vec<f64>, quantum: usize, power_price: f64) -> Self {
        Self {
            levels,
            arrival_pmf,
            actions: vec![
                ServiceAction { rate: 0, success: 1.0, price: 0.0 },
                ServiceAction { rate: quantum / 2, success: 0.8, price: 0.5 * power_price },
                ServiceAction { rate: quantum, success: 0.9, price: power_price },
            ],
            delay_weight: 1.0,
        }
    }

    pub fn build(&self) -> Result<TinyMdp> {
        let n = self.levels;
        let cap = n - 1;
        let arrival = (0..n)
            .map(|s| merge(self.arrival_pmf.iter().enumerate().map(|(k, &p)| ((s + k).min(cap), p))))
            .collect();
        let mut service = Vec::with_capacity(n);
        let mut cost = Vec::with_capacity(n);
        for x in 0..n {
            service.push(
                self.actions
                    .iter()
                    .map(|a| merge([(x.saturating_sub(a.rate), a.success), (x, 1.0 - a.success)].into_iter()))
                    .collect(),
            );
            cost.push(self.actions.iter().map(|a| self.delay_weight * x as f64 + a.price).collect());
        }
        TinyMdp::new(arrival, service, cost)
    }
}

fn merge(entries: impl Iterator<Item = (usize, f64)>) -> Kernel {
    let mut out: Kernel = Vec::new();
    for (j, p) in entries {
        if p == 0.0 {
            continue;
        }
        match out.iter_mut().find(|e| e.0 == j) {
            Some(e) => e.1 += p,
            None => out.push((j, p)),
        }
    }
    out
}

/// Largest deviation of a joint value table from the sum of per-queue
/// tables, after both are anchored at state 0.
pub fn decomposition_gap(joint: &[f64], first: &[f64], second: &[f64]) -> f64 {
    let nb = second.len();
    let base = joint[0] - first[0] - second[0];
    joint
        .iter()
        .enumerate()
        .map(|(k, v)| (v - first[k / nb] - second[k % nb] - base).abs())
        .fold(0.0, f64::max)
}
