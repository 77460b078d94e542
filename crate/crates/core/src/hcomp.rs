//! Hybrid CoMP: shared (jointly transmitted) and private (coordinated)
//! streams, their zero-forcing precoders and decorrelators, and the link
//! evaluation that turns an allocation into delivered bits.
//!
//! Column/row layout follows the zero-insertion convention: for UE `i` with
//! `Ls` shared and `Lp` private streams, shared streams occupy positions
//! `0..Ls` and private streams occupy `Ls..Ls+Lp` in both the precoder
//! columns and the decorrelator rows. Inactive positions are zero.

use std::ops::RangeInclusive;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelState, ClusterConfig, View};
use crate::error::{Error, Result};
use crate::linalg::{fro, nullspace, rank, right_singular_pairs, CMatrix, CVector};

/// Number of shared and private streams per UE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSplit {
    pub shared: Vec<usize>,
    pub private: Vec<usize>,
}

impl StreamSplit {
    pub fn new(shared: Vec<usize>, private: Vec<usize>) -> Self {
        Self { shared, private }
    }

    /// Private streams at the zero-forcing limit, the remaining receive
    /// dimensions shared. Maximum DoF at minimum fronthaul.
    pub fn hybrid(cfg: &ClusterConfig) -> Self {
        let lp = cfg.private_stream_limit().min(cfg.rx_antennas);
        Self::new(vec![cfg.rx_antennas - lp; cfg.rrhs], vec![lp; cfg.rrhs])
    }

    /// Coordinated beamforming only: every UE gets private streams.
    pub fn coordinated(cfg: &ClusterConfig) -> Self {
        let lp = cfg.private_stream_limit().min(cfg.rx_antennas);
        Self::new(vec![0; cfg.rrhs], vec![lp; cfg.rrhs])
    }

    /// Joint processing only: every UE gets `Nr` shared streams.
    pub fn joint(cfg: &ClusterConfig) -> Self {
        Self::new(vec![cfg.rx_antennas; cfg.rrhs], vec![0; cfg.rrhs])
    }

    /// The stream pattern behind the CB row of the DoF comparison:
    /// `M-1` UEs at the private limit and one UE served on all `Nr`
    /// receive dimensions.
    pub fn coordinated_dof_pattern(cfg: &ClusterConfig) -> Self {
        let mut split = Self::coordinated(cfg);
        let last = cfg.rrhs - 1;
        split.shared[last] = cfg.rx_antennas - split.private[last];
        split
    }

    pub fn ues(&self) -> usize {
        self.shared.len()
    }

    pub fn streams(&self, ue: usize) -> usize {
        self.shared[ue] + self.private[ue]
    }

    pub fn total_streams(&self) -> usize {
        (0..self.ues()).map(|i| self.streams(i)).sum()
    }

    pub fn validate(&self, cfg: &ClusterConfig) -> Result<()> {
        if self.shared.len() != cfg.rrhs || self.private.len() != cfg.rrhs {
            return Err(Error::InvalidSplit(format!(
                "split covers {}/{} UEs, cluster has {}",
                self.shared.len(),
                self.private.len(),
                cfg.rrhs
            )));
        }
        let limit = cfg.private_stream_limit();
        for ue in 0..cfg.rrhs {
            if self.private[ue] > limit {
                return Err(Error::InvalidSplit(format!(
                    "ue {ue}: {} private streams exceed zero-forcing limit {limit}",
                    self.private[ue]
                )));
            }
            if self.streams(ue) > cfg.rx_antennas {
                return Err(Error::InvalidSplit(format!(
                    "ue {ue}: {} streams exceed {} receive antennas",
                    self.streams(ue),
                    cfg.rx_antennas
                )));
            }
        }
        Ok(())
    }
}

/// Achievable DoF of a split: total number of interference-free streams.
pub fn dof_table(cfg: &ClusterConfig, split: &StreamSplit) -> Result<usize> {
    split.validate(cfg)?;
    Ok(split.total_streams())
}

/// Closed-form DoF of the three transmission schemes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeDof {
    pub coordinated: usize,
    pub joint: usize,
    pub hybrid: RangeInclusive<usize>,
}

pub fn scheme_dof(cfg: &ClusterConfig) -> SchemeDof {
    let cb = (cfg.rrhs - 1) * cfg.private_stream_limit() + cfg.rx_antennas;
    let jp = cfg.rrhs * cfg.rx_antennas;
    SchemeDof { coordinated: cb, joint: jp, hybrid: cb..=jp }
}

/// Precoders, decorrelators and power split of one UE's streams.
#[derive(Debug, Clone, PartialEq)]
pub struct UePrecoder {
    /// `M Nt x (Ls+Lp)`, active columns `0..Ls`.
    pub shared_w: CMatrix,
    /// `Nt x (Ls+Lp)`, active columns `Ls..Ls+Lp`.
    pub private_w: CMatrix,
    /// `(Ls+Lp) x Nr`, active rows `0..Ls`.
    pub shared_u: CMatrix,
    /// `(Ls+Lp) x Nr`, active rows `Ls..Ls+Lp`.
    pub private_u: CMatrix,
    /// Effective gain `|u Ĥ w|^2` of each shared stream on the CSIT.
    pub shared_gain: Vec<f64>,
    pub private_gain: Vec<f64>,
    /// `rho[a][rrh]`: share of shared stream `a`'s power radiated by `rrh`.
    pub rho: Vec<Vec<f64>>,
    /// Dimension of the cooperative nullspace before own-stream refinement.
    pub cooperative_dim: usize,
}

impl UePrecoder {
    pub fn shared_streams(&self) -> usize {
        self.shared_gain.len()
    }

    pub fn private_streams(&self) -> usize {
        self.private_gain.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub ues: Vec<UePrecoder>,
    pub split: StreamSplit,
    tx_antennas: usize,
}

/// Private precoder of one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatePrecoder {
    pub w: CMatrix,
    pub u: CMatrix,
    pub gain: Vec<f64>,
}

/// Shared precoder of one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPrecoder {
    pub w: CMatrix,
    pub u: CMatrix,
    pub gain: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub cooperative_dim: usize,
}

/// Orthonormal basis of `nullspace([Ĥ_1; ...; Ĥ_{i-1}; Ĥ_{i+1}; ...; Ĥ_M])`
/// over the aggregate CSIT, `M Nt x (M Nt - (M-1) Nr)`.
pub fn cooperative_basis(csit: &ChannelState, ue: usize) -> Result<CMatrix> {
    let m = csit.size();
    let blocks: Vec<&CMatrix> = (0..m)
        .filter(|&j| j != ue)
        .map(|j| csit.aggregate(View::Csit, j))
        .collect();
    nullspace(&stack_rows(&blocks))
}

/// Orthonormal basis of `nullspace([Ĥ_{1,i}; ...; Ĥ_{M,i}])` without row
/// `Ĥ_{i,i}`, `Nt x (Nt - (M-1) Nr)`.
pub fn coordinated_basis(csit: &ChannelState, ue: usize) -> Result<CMatrix> {
    let m = csit.size();
    let blocks: Vec<&CMatrix> = (0..m)
        .filter(|&j| j != ue)
        .map(|j| csit.link(View::Csit, j, ue))
        .collect();
    nullspace(&stack_rows(&blocks))
}

fn stack_rows(blocks: &[&CMatrix]) -> CMatrix {
    let cols = blocks[0].ncols();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Nullspace bases of every UE for one frame, shared across splits.
#[derive(Debug, Clone)]
pub struct BasisCache {
    pub cooperative: Vec<CMatrix>,
    pub coordinated: Vec<CMatrix>,
}

impl BasisCache {
    pub fn compute(csit: &ChannelState) -> Result<Self> {
        let m = csit.size();
        Ok(Self {
            cooperative: (0..m).map(|i| cooperative_basis(csit, i)).collect::<Result<_>>()?,
            coordinated: (0..m).map(|i| coordinated_basis(csit, i)).collect::<Result<_>>()?,
        })
    }
}

/// Takes the top `count` singular directions of `b = Ĥ F` and maps them
/// back through `basis`. Returns `(gains, precoder columns, decorrelator rows)`.
fn principal_streams(
    b: &CMatrix,
    basis: &CMatrix,
    count: usize,
    ue: usize,
) -> Result<(Vec<f64>, Vec<CVector>, Vec<CVector>)> {
    if count == 0 {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    }
    let available = basis.ncols();
    if available < count {
        return Err(Error::NullspaceTooSmall { ue, available, required: count });
    }
    let pairs = right_singular_pairs(b)?;
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let mut gains = Vec::with_capacity(count);
    let mut ws = Vec::with_capacity(count);
    let mut us = Vec::with_capacity(count);
    for (s, v) in pairs.into_iter().take(count) {
        if !(s > crate::linalg::NULLSPACE_REL_TOL * top) {
            return Err(Error::NullspaceTooSmall { ue, available: ws.len(), required: count });
        }
        let u = (b * &v) / Complex64::from(s);
        ws.push(basis * &v);
        us.push(u);
        gains.push(s * s);
    }
    if gains.len() < count {
        return Err(Error::NullspaceTooSmall { ue, available: gains.len(), required: count });
    }
    Ok((gains, ws, us))
}

fn build_private_with(
    csit: &ChannelState,
    split: &StreamSplit,
    ue: usize,
    basis: &CMatrix,
    limit: usize,
) -> Result<PrivatePrecoder> {
    let (ls, lp) = (split.shared[ue], split.private[ue]);
    if lp > limit {
        return Err(Error::InvalidSplit(format!(
            "ue {ue}: {lp} private streams exceed zero-forcing limit {limit}"
        )));
    }
    let h_ii = csit.link(View::Csit, ue, ue);
    let (nr, nt) = h_ii.shape();
    let mut w = CMatrix::zeros(nt, ls + lp);
    let mut u = CMatrix::zeros(ls + lp, nr);
    let b = h_ii * basis;
    let (gain, ws, us) = principal_streams(&b, basis, lp, ue)?;
    for k in 0..lp {
        w.set_column(ls + k, &ws[k]);
        u.set_row(ls + k, &us[k].adjoint());
    }
    Ok(PrivatePrecoder { w, u, gain })
}

fn build_shared_with(
    csit: &ChannelState,
    split: &StreamSplit,
    ue: usize,
    basis: &CMatrix,
    private_u: &CMatrix,
) -> Result<SharedPrecoder> {
    let (ls, lp) = (split.shared[ue], split.private[ue]);
    let h_i = csit.aggregate(View::Csit, ue);
    let (nr, mnt) = h_i.shape();
    let m = csit.size();
    let nt = mnt / m;
    let mut w = CMatrix::zeros(mnt, ls + lp);
    let mut u = CMatrix::zeros(ls + lp, nr);
    let mut rho = Vec::with_capacity(ls);
    if ls == 0 {
        return Ok(SharedPrecoder { w, u, gain: Vec::new(), rho, cooperative_dim: basis.ncols() });
    }
    // Keep the shared beams orthogonal to the own private decorrelator so the
    // two stream types of one UE do not interfere.
    let refined = if lp > 0 {
        let rows = private_u.rows(ls, lp) * h_i;
        let inner = nullspace(&(rows * basis))?;
        basis * inner
    } else {
        basis.clone()
    };
    let b = h_i * &refined;
    let (gain, ws, us) = principal_streams(&b, &refined, ls, ue)?;
    for k in 0..ls {
        w.set_column(k, &ws[k]);
        u.set_row(k, &us[k].adjoint());
        rho.push(
            (0..m)
                .map(|rrh| (0..nt).map(|x| ws[k][rrh * nt + x].norm_sqr()).sum())
                .collect(),
        );
    }
    Ok(SharedPrecoder { w, u, gain, rho, cooperative_dim: basis.ncols() })
}

/// Private precoder and decorrelator of `ue` from the CSIT.
pub fn build_private_precoder(
    csit: &ChannelState,
    split: &StreamSplit,
    ue: usize,
) -> Result<PrivatePrecoder> {
    let basis = coordinated_basis(csit, ue)?;
    let limit = basis.ncols();
    build_private_with(csit, split, ue, &basis, limit)
}

/// Shared precoder and decorrelator of `ue` from the CSIT.
pub fn build_shared_precoder(
    csit: &ChannelState,
    split: &StreamSplit,
    ue: usize,
) -> Result<SharedPrecoder> {
    let private = build_private_precoder(csit, split, ue)?;
    let basis = cooperative_basis(csit, ue)?;
    build_shared_with(csit, split, ue, &basis, &private.u)
}

impl PrecoderSet {
    pub fn build(cfg: &ClusterConfig, csit: &ChannelState, split: &StreamSplit) -> Result<Self> {
        let cache = BasisCache::compute(csit)?;
        Self::build_with(cfg, csit, split, &cache)
    }

    pub fn build_with(
        cfg: &ClusterConfig,
        csit: &ChannelState,
        split: &StreamSplit,
        cache: &BasisCache,
    ) -> Result<Self> {
        split.validate(cfg)?;
        let limit = cfg.private_stream_limit();
        let ues = (0..cfg.rrhs)
            .map(|ue| {
                let p = build_private_with(csit, split, ue, &cache.coordinated[ue], limit)?;
                let s = build_shared_with(csit, split, ue, &cache.cooperative[ue], &p.u)?;
                Ok(UePrecoder {
                    shared_w: s.w,
                    private_w: p.w,
                    shared_u: s.u,
                    private_u: p.u,
                    shared_gain: s.gain,
                    private_gain: p.gain,
                    rho: s.rho,
                    cooperative_dim: s.cooperative_dim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ues, split: split.clone(), tx_antennas: cfg.tx_antennas })
    }

    /// Every active stream of the cluster as an aggregate `M Nt` column.
    fn stream_columns(&self) -> Vec<StreamRef> {
        let m = self.ues.len();
        let nt = self.tx_antennas;
        let mut out = Vec::new();
        for (j, p) in self.ues.iter().enumerate() {
            let ls = p.shared_streams();
            for a in 0..ls {
                out.push(StreamRef { ue: j, kind: StreamKind::Shared, index: a, column: p.shared_w.column(a).into_owned() });
            }
            for b in 0..p.private_streams() {
                let mut col = CVector::zeros(m * nt);
                col.rows_mut(j * nt, nt).copy_from(&p.private_w.column(ls + b));
                out.push(StreamRef { ue: j, kind: StreamKind::Private, index: b, column: col });
            }
        }
        out
    }

    fn decorrelator_row(&self, s: &StreamRef) -> CMatrix {
        let p = &self.ues[s.ue];
        match s.kind {
            StreamKind::Shared => p.shared_u.rows(s.index, 1).into_owned(),
            StreamKind::Private => p.private_u.rows(p.shared_streams() + s.index, 1).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamKind {
    Shared,
    Private,
}

struct StreamRef {
    ue: usize,
    kind: StreamKind,
    index: usize,
    column: CVector,
}

/// Largest relative zero-forcing leakage `‖H_j W_i‖ / (‖H_j‖ ‖W_i‖)` towards
/// any other UE `j != i`, over shared and private precoders.
pub fn zero_forcing_residual(pre: &PrecoderSet, channel: &ChannelState, view: View) -> f64 {
    let m = pre.ues.len();
    let mut worst: f64 = 0.0;
    for (i, p) in pre.ues.iter().enumerate() {
        for j in (0..m).filter(|&j| j != i) {
            if p.shared_streams() > 0 {
                let h = channel.aggregate(view, j);
                let r = fro(&(h * &p.shared_w)) / (fro(h) * fro(&p.shared_w));
                worst = worst.max(r);
            }
            if p.private_streams() > 0 {
                let h = channel.link(view, j, i);
                let r = fro(&(h * &p.private_w)) / (fro(h) * fro(&p.private_w));
                worst = worst.max(r);
            }
        }
    }
    worst
}

/// Largest relative leakage between one UE's shared and private streams
/// after decorrelation: `|u_s H_ii w_p|` and `|u_p H_i w_s|`, scaled by
/// `‖H_i‖`. Precoder columns and decorrelator rows have unit norm.
pub fn cross_nulling_check(pre: &PrecoderSet, channel: &ChannelState, view: View) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, p) in pre.ues.iter().enumerate() {
        let (ls, lp) = (p.shared_streams(), p.private_streams());
        if ls == 0 || lp == 0 {
            continue;
        }
        let h_i = channel.aggregate(view, i);
        let h_ii = channel.link(view, i, i);
        let scale = fro(h_i);
        let into_shared = p.shared_u.rows(0, ls) * h_ii * p.private_w.columns(ls, lp);
        let into_private = p.private_u.rows(ls, lp) * h_i * p.shared_w.columns(0, ls);
        for z in into_shared.iter().chain(into_private.iter()) {
            worst = worst.max(z.norm() / scale);
        }
    }
    worst
}

/// Rank of the full effective channel: decorrelator rows of every UE
/// against every active stream. Equals the DoF when interference is nulled.
pub fn effective_rank(pre: &PrecoderSet, channel: &ChannelState, view: View) -> Result<usize> {
    let streams = pre.stream_columns();
    if streams.is_empty() {
        return Ok(0);
    }
    let n = streams.len();
    let mut eff = CMatrix::zeros(n, n);
    for (r, s) in streams.iter().enumerate() {
        let row = pre.decorrelator_row(s) * channel.aggregate(view, s.ue);
        for (c, t) in streams.iter().enumerate() {
            eff[(r, c)] = (&row * &t.column)[(0, 0)];
        }
    }
    rank(&eff)
}

/// Powers and rates of one UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeAction {
    pub shared_power: Vec<f64>,
    pub private_power: Vec<f64>,
    pub shared_rate: f64,
    pub private_rate: f64,
}

/// Per-stream transmit powers (W) and per-UE rates (bit/s) for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationAction {
    pub ues: Vec<UeAction>,
}

impl AllocationAction {
    pub fn zeros(split: &StreamSplit) -> Self {
        Self {
            ues: (0..split.ues())
                .map(|i| UeAction {
                    shared_power: vec![0.0; split.shared[i]],
                    private_power: vec![0.0; split.private[i]],
                    shared_rate: 0.0,
                    private_rate: 0.0,
                })
                .collect(),
        }
    }

    pub fn validate(&self, split: &StreamSplit) -> Result<()> {
        if self.ues.len() != split.ues() {
            return Err(Error::Shape(format!("action covers {} UEs, split {}", self.ues.len(), split.ues())));
        }
        for (i, a) in self.ues.iter().enumerate() {
            if a.shared_power.len() != split.shared[i] || a.private_power.len() != split.private[i] {
                return Err(Error::Shape(format!("ue {i}: power vector lengths do not match split")));
            }
            let all = a.shared_power.iter().chain(&a.private_power).chain([&a.shared_rate, &a.private_rate]);
            if all.into_iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Shape(format!("ue {i}: negative or non-finite action entry")));
            }
        }
        Ok(())
    }

    /// Power radiated by each RRH.
    pub fn rrh_power(&self, pre: &PrecoderSet) -> Vec<f64> {
        let m = self.ues.len();
        let mut p = vec![0.0; m];
        for (j, a) in self.ues.iter().enumerate() {
            p[j] += a.private_power.iter().sum::<f64>();
            for (k, &ps) in a.shared_power.iter().enumerate() {
                for (rrh, share) in pre.ues[j].rho[k].iter().enumerate() {
                    p[rrh] += ps * share;
                }
            }
        }
        p
    }

    /// Fronthaul load of each RRH: its own private rate plus every shared rate.
    pub fn rrh_fronthaul(&self) -> Vec<f64> {
        let shared: f64 = self.ues.iter().map(|a| a.shared_rate).sum();
        self.ues.iter().map(|a| a.private_rate + shared).collect()
    }
}

/// What UE `i` experienced in one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UeOutcome {
    pub shared_capacity: f64,
    pub private_capacity: f64,
    pub shared_ok: bool,
    pub private_ok: bool,
    pub delivered_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkOutcome {
    pub ues: Vec<UeOutcome>,
    pub rrh_power_w: Vec<f64>,
    pub rrh_fronthaul_bps: Vec<f64>,
}

/// Capacity the BBU pool predicts for one stream from its CSIT, treating
/// zero-forcing as exact.
pub fn csit_stream_capacity(cfg: &ClusterConfig, gain: f64, power_w: f64) -> f64 {
    cfg.bandwidth_hz * (1.0 + gain * power_w * cfg.snr_per_watt()).log2()
}

/// Evaluates an allocation on the true channel. Residual interference from
/// every other active stream is treated as noise.
pub fn evaluate_link(
    truth: &ChannelState,
    pre: &PrecoderSet,
    act: &AllocationAction,
    cfg: &ClusterConfig,
) -> Result<LinkOutcome> {
    act.validate(&pre.split)?;
    let streams = pre.stream_columns();
    let power_of = |s: &StreamRef| match s.kind {
        StreamKind::Shared => act.ues[s.ue].shared_power[s.index],
        StreamKind::Private => act.ues[s.ue].private_power[s.index],
    };
    let powers: Vec<f64> = streams.iter().map(power_of).collect();
    let snr = cfg.snr_per_watt();
    let m = pre.ues.len();
    let mut shared_cap = vec![0.0; m];
    let mut private_cap = vec![0.0; m];
    for (k, s) in streams.iter().enumerate() {
        let row = pre.decorrelator_row(s) * truth.aggregate(View::True, s.ue);
        let mut desired = 0.0;
        let mut interference = 0.0;
        for (c, t) in streams.iter().enumerate() {
            let g = (&row * &t.column)[(0, 0)].norm_sqr();
            if c == k {
                desired = g;
            } else {
                interference += g * powers[c];
            }
        }
        let sinr = desired * powers[k] * snr / (1.0 + interference * snr);
        let c = cfg.bandwidth_hz * (1.0 + sinr).log2();
        match s.kind {
            StreamKind::Shared => shared_cap[s.ue] += c,
            StreamKind::Private => private_cap[s.ue] += c,
        }
    }
    let tau = cfg.frame_duration_s;
    let ues = act
        .ues
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let shared_ok = a.shared_rate <= shared_cap[i];
            let private_ok = a.private_rate <= private_cap[i];
            let delivered = (a.shared_rate * f64::from(u8::from(shared_ok))
                + a.private_rate * f64::from(u8::from(private_ok)))
                * tau;
            UeOutcome {
                shared_capacity: shared_cap[i],
                private_capacity: private_cap[i],
                shared_ok,
                private_ok,
                delivered_bits: delivered,
            }
        })
        .collect();
    Ok(LinkOutcome { ues, rrh_power_w: act.rrh_power(pre), rrh_fronthaul_bps: act.rrh_fronthaul() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, CsitQuality};
    use crate::linalg::singular_values;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ClusterConfig {
        ClusterConfig::default()
    }

    fn unit_snr(mut c: ClusterConfig) -> ClusterConfig {
        c.noise_power_w = 1.0;
        c.link_gain_db = 0.0;
        c
    }

    fn toy() -> ClusterConfig {
        ClusterConfig { rrhs: 2, tx_antennas: 3, rx_antennas: 2, ..ClusterConfig::default() }
    }

    fn perfect(c: &ClusterConfig, seed: u64) -> ChannelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_channel(c, &CsitQuality::perfect(c.rrhs), &mut rng).unwrap()
    }

    fn uniform_action(split: &StreamSplit, p: f64, r: f64) -> AllocationAction {
        let mut act = AllocationAction::zeros(split);
        for a in &mut act.ues {
            a.shared_power.iter_mut().for_each(|x| *x = p);
            a.private_power.iter_mut().for_each(|x| *x = p);
            a.shared_rate = r;
            a.private_rate = r;
        }
        act
    }

    #[test]
    fn splits_respect_limits() {
        let c = cfg();
        assert_eq!(c.private_stream_limit(), 1);
        let h = StreamSplit::hybrid(&c);
        assert_eq!((h.shared.clone(), h.private.clone()), (vec![1; 3], vec![1; 3]));
        assert!(StreamSplit::new(vec![0; 3], vec![2; 3]).validate(&c).is_err());
        assert!(StreamSplit::new(vec![2; 3], vec![1; 3]).validate(&c).is_err());
        assert!(StreamSplit::new(vec![1; 2], vec![1; 2]).validate(&c).is_err());
    }

    #[test]
    fn dof_matches_closed_forms() {
        let c = cfg();
        let dof = scheme_dof(&c);
        assert_eq!(dof.coordinated, 4);
        assert_eq!(dof.joint, 6);
        assert_eq!(dof_table(&c, &StreamSplit::coordinated_dof_pattern(&c)).unwrap(), 4);
        assert_eq!(dof_table(&c, &StreamSplit::joint(&c)).unwrap(), 6);
        assert_eq!(dof_table(&c, &StreamSplit::hybrid(&c)).unwrap(), 6);
        assert_eq!(dof_table(&c, &StreamSplit::coordinated(&c)).unwrap(), 3);
        assert!(dof_table(&c, &StreamSplit::new(vec![3; 3], vec![0; 3])).is_err());
    }

    #[test]
    fn shared_nullspace_has_expected_dimension() {
        let c = cfg();
        let ch = perfect(&c, 3);
        let set = PrecoderSet::build(&c, &ch, &StreamSplit::hybrid(&c)).unwrap();
        for p in &set.ues {
            assert_eq!(p.cooperative_dim, 11);
        }
        assert!(zero_forcing_residual(&set, &ch, View::True) < 1e-9);
    }

    #[test]
    fn zero_shared_streams_leave_zero_blocks() {
        let c = cfg();
        let ch = perfect(&c, 4);
        let set = PrecoderSet::build(&c, &ch, &StreamSplit::coordinated(&c)).unwrap();
        for p in &set.ues {
            assert!(p.shared_w.iter().all(|z| *z == Complex64::from(0.0)));
            assert!(p.shared_u.iter().all(|z| *z == Complex64::from(0.0)));
            assert!(p.rho.is_empty());
        }
    }

    #[test]
    fn toy_shared_gain_is_top_singular_value() {
        let c = toy();
        let ch = perfect(&c, 5);
        let split = StreamSplit::new(vec![1, 1], vec![0, 0]);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        for i in 0..2 {
            let f = cooperative_basis(&ch, i).unwrap();
            let sv = singular_values(&(ch.aggregate(View::Csit, i) * &f)).unwrap();
            let w = set.ues[i].shared_w.column(0).into_owned();
            let u = set.ues[i].shared_u.rows(0, 1).into_owned();
            let phi = (u * ch.aggregate(View::True, i) * w)[(0, 0)].norm_sqr();
            assert!((phi - sv[0] * sv[0]).abs() < 1e-9 * sv[0] * sv[0]);
            assert!((set.ues[i].shared_gain[0] - phi).abs() < 1e-9 * phi);
        }
    }

    #[test]
    fn toy_private_effective_channel_is_diagonal() {
        let c = toy();
        assert_eq!(c.private_stream_limit(), 1);
        let ch = perfect(&c, 6);
        let split = StreamSplit::new(vec![0, 1], vec![1, 1]);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        for (i, p) in set.ues.iter().enumerate() {
            let eff = &p.private_u * ch.link(View::True, i, i) * &p.private_w;
            let ls = p.shared_streams();
            for r in 0..eff.nrows() {
                for col in 0..eff.ncols() {
                    if r != col || r < ls {
                        assert!(eff[(r, col)].norm() < 1e-12, "ue {i} entry ({r},{col})");
                    }
                }
            }
            assert!(eff[(ls, ls)].re > 0.0);
        }
    }

    #[test]
    fn private_streams_rejected_past_limit() {
        let c = cfg();
        let ch = perfect(&c, 7);
        let split = StreamSplit::new(vec![0; 3], vec![2; 3]);
        assert!(build_private_precoder(&ch, &split, 0).is_err());
        assert!(PrecoderSet::build(&c, &ch, &split).is_err());
    }

    #[test]
    fn public_builders_match_set() {
        let c = cfg();
        let ch = perfect(&c, 8);
        let split = StreamSplit::hybrid(&c);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        for i in 0..3 {
            let s = build_shared_precoder(&ch, &split, i).unwrap();
            let p = build_private_precoder(&ch, &split, i).unwrap();
            assert_eq!(s.w, set.ues[i].shared_w);
            assert_eq!(p.u, set.ues[i].private_u);
        }
    }

    #[test]
    fn imperfect_csit_leaves_cross_residual() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch = draw_channel(&c, &CsitQuality::uniform(3, 0.05), &mut rng).unwrap();
        let set = PrecoderSet::build(&c, &ch, &StreamSplit::hybrid(&c)).unwrap();
        assert!(cross_nulling_check(&set, &ch, View::Csit) < 1e-9);
        assert!(cross_nulling_check(&set, &ch, View::True) > 0.0);
        assert!(zero_forcing_residual(&set, &ch, View::True) > 1e-6);
    }

    #[test]
    fn no_private_streams_gives_exact_zero_cross_residual() {
        let c = cfg();
        let ch = perfect(&c, 10);
        let set = PrecoderSet::build(&c, &ch, &StreamSplit::joint(&c)).unwrap();
        assert_eq!(cross_nulling_check(&set, &ch, View::True), 0.0);
    }

    #[test]
    fn perfect_csit_delivers_requested_rates() {
        let c = unit_snr(cfg());
        let ch = perfect(&c, 11);
        let split = StreamSplit::hybrid(&c);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        let act = uniform_action(&split, 1.0, 1e6);
        let out = evaluate_link(&ch, &set, &act, &c).unwrap();
        for (i, u) in out.ues.iter().enumerate() {
            assert!(u.shared_ok && u.private_ok);
            assert_eq!(u.delivered_bits, 2e6 * c.frame_duration_s);
            let expected = c.bandwidth_hz * (1.0 + set.ues[i].shared_gain[0]).log2();
            assert!((u.shared_capacity - expected).abs() < 1e-6 * expected, "{} vs {}", u.shared_capacity, expected);
        }
    }

    #[test]
    fn zero_power_means_zero_capacity() {
        let c = cfg();
        let ch = perfect(&c, 12);
        let split = StreamSplit::hybrid(&c);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        let out = evaluate_link(&ch, &set, &uniform_action(&split, 0.0, 1.0), &c).unwrap();
        for u in &out.ues {
            assert_eq!(u.shared_capacity + u.private_capacity, 0.0);
            assert_eq!(u.delivered_bits, 0.0);
        }
        let out = evaluate_link(&ch, &set, &uniform_action(&split, 0.0, 0.0), &c).unwrap();
        assert!(out.ues.iter().all(|u| u.shared_ok && u.private_ok));
    }

    #[test]
    fn fronthaul_counts_every_shared_rate() {
        let c = cfg();
        let ch = perfect(&c, 13);
        let split = StreamSplit::hybrid(&c);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        let mut act = uniform_action(&split, 0.1, 0.0);
        for (i, a) in act.ues.iter_mut().enumerate() {
            a.shared_rate = (i + 1) as f64;
            a.private_rate = 10.0 * (i + 1) as f64;
        }
        let out = evaluate_link(&ch, &set, &act, &c).unwrap();
        assert_eq!(out.rrh_fronthaul_bps, vec![16.0, 26.0, 36.0]);
    }

    #[test]
    fn malformed_action_rejected() {
        let c = cfg();
        let ch = perfect(&c, 14);
        let split = StreamSplit::hybrid(&c);
        let set = PrecoderSet::build(&c, &ch, &split).unwrap();
        let mut act = uniform_action(&split, 0.1, 0.0);
        act.ues[1].private_power.push(0.0);
        assert!(evaluate_link(&ch, &set, &act, &c).is_err());
        let mut act = uniform_action(&split, 0.1, 0.0);
        act.ues[0].shared_rate = -1.0;
        assert!(evaluate_link(&ch, &set, &act, &c).is_err());
    }

    fn split_strategy() -> impl Strategy<Value = StreamSplit> {
        proptest::collection::vec((0usize..=2, 0usize..=1), 3).prop_filter_map("fits Nr", |v| {
            if v.iter().all(|(s, p)| s + p <= 2) {
                Some(StreamSplit::new(v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect()))
            } else {
                None
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn zero_forcing_and_cross_nulling_hold(seed in any::<u64>(), split in split_strategy()) {
            let c = cfg();
            let ch = perfect(&c, seed);
            let set = PrecoderSet::build(&c, &ch, &split).unwrap();
            prop_assert!(zero_forcing_residual(&set, &ch, View::True) < 1e-9);
            prop_assert!(cross_nulling_check(&set, &ch, View::True) < 1e-9);
            prop_assert_eq!(effective_rank(&set, &ch, View::True).unwrap(), dof_table(&c, &split).unwrap());
        }

        #[test]
        fn columns_unit_norm_and_rho_rows_sum_to_one(seed in any::<u64>(), split in split_strategy()) {
            let c = cfg();
            let ch = perfect(&c, seed);
            let set = PrecoderSet::build(&c, &ch, &split).unwrap();
            for p in &set.ues {
                let ls = p.shared_streams();
                for a in 0..ls {
                    prop_assert!((p.shared_w.column(a).norm() - 1.0).abs() < 1e-12);
                    prop_assert!((p.rho[a].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                for b in 0..p.private_streams() {
                    prop_assert!((p.private_w.column(ls + b).norm() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rrh_power_accounts_for_all_streams(
            seed in any::<u64>(),
            split in split_strategy(),
            powers in proptest::collection::vec(0.0f64..2.0, 6),
        ) {
            let c = cfg();
            let ch = perfect(&c, seed);
            let set = PrecoderSet::build(&c, &ch, &split).unwrap();
            let mut act = AllocationAction::zeros(&split);
            let mut total = 0.0;
            for (i, a) in act.ues.iter_mut().enumerate() {
                for x in a.shared_power.iter_mut() { *x = powers[2 * i]; total += *x; }
                for x in a.private_power.iter_mut() { *x = powers[2 * i + 1]; total += *x; }
            }
            let sum: f64 = act.rrh_power(&set).iter().sum();
            prop_assert!((sum - total).abs() <= 1e-12 * total.max(1.0));
        }

        #[test]
        fn shared_capacity_monotone_in_shared_power(seed in any::<u64>(), p in 0.0f64..1.0, dp in 0.0f64..1.0) {
            let c = cfg();
            let ch = perfect(&c, seed);
            let split = StreamSplit::hybrid(&c);
            let set = PrecoderSet::build(&c, &ch, &split).unwrap();
            let mut act = uniform_action(&split, 0.5, 0.0);
            act.ues[0].shared_power[0] = p;
            let lo = evaluate_link(&ch, &set, &act, &c).unwrap();
            act.ues[0].shared_power[0] = p + dp;
            let hi = evaluate_link(&ch, &set, &act, &c).unwrap();
            prop_assert!(hi.ues[0].shared_capacity >= lo.ues[0].shared_capacity);
            for i in 1..3 {
                let d = (hi.ues[i].shared_capacity - lo.ues[i].shared_capacity).abs();
                prop_assert!(d <= 1e-6 * lo.ues[i].shared_capacity.max(1.0));
            }
        }

        #[test]
        fn delivered_bits_follow_indicators(seed in any::<u64>(), r_s in 0.0f64..2e8, r_p in 0.0f64..2e8) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ch = draw_channel(&c, &CsitQuality::uniform(3, 0.05), &mut rng).unwrap();
            let split = StreamSplit::hybrid(&c);
            let set = PrecoderSet::build(&c, &ch, &split).unwrap();
            let mut act = uniform_action(&split, 0.01, 0.0);
            for a in &mut act.ues { a.shared_rate = r_s; a.private_rate = r_p; }
            let out = evaluate_link(&ch, &set, &act, &c).unwrap();
            for u in &out.ues {
                prop_assert_eq!(u.shared_ok, r_s <= u.shared_capacity);
                prop_assert_eq!(u.private_ok, r_p <= u.private_capacity);
                let g = (r_s * f64::from(u8::from(u.shared_ok)) + r_p * f64::from(u8::from(u.private_ok))) * c.frame_duration_s;
                prop_assert_eq!(u.delivered_bits, g);
            }
        }
    }
}
