//! Per-frame channel generation: true CSI seen by the UEs and the imperfect
//! CSIT held by the BBU pool.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, rank, CMatrix};

const MAX_RANK_RETRIES: usize = 100;

/// Antenna and link-budget parameters of one CoMP cluster.
///
/// The cluster has `rrhs` radio heads and the same number of UEs; UE `i` is
/// served by RRH `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub rrhs: usize,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub bandwidth_hz: f64,
    pub frame_duration_s: f64,
    pub noise_power_w: f64,
    /// Large-scale gain applied uniformly to every RRH-UE link, in dB.
    #[serde(default)]
    pub link_gain_db: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            rrhs: 3,
            tx_antennas: 5,
            rx_antennas: 2,
            bandwidth_hz: 20e6,
            frame_duration_s: 0.01,
            noise_power_w: crate::dbm_to_watts(-15.0),
            link_gain_db: 0.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let (m, nt, nr) = (self.rrhs, self.tx_antennas, self.rx_antennas);
        if m < 2 {
            return Err(Error::InvalidConfig(format!("cluster size {m} < 2")));
        }
        if nt == 0 || nr == 0 {
            return Err(Error::InvalidConfig("antenna counts must be positive".into()));
        }
        if !(m * nr >= nt && nt > (m - 1) * nr) {
            return Err(Error::InvalidConfig(format!(
                "antenna regime requires M*Nr >= Nt > (M-1)*Nr, got M={m} Nt={nt} Nr={nr}"
            )));
        }
        for (name, v) in [
            ("bandwidth_hz", self.bandwidth_hz),
            ("frame_duration_s", self.frame_duration_s),
            ("noise_power_w", self.noise_power_w),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.link_gain_db.is_finite() {
            return Err(Error::InvalidConfig("link_gain_db must be finite".into()));
        }
        Ok(())
    }

    /// Number of private streams RRH `i` can zero-force towards every other
    /// UE, `Nt - (M-1) Nr`.
    pub fn private_stream_limit(&self) -> usize {
        self.tx_antennas - (self.rrhs - 1) * self.rx_antennas
    }

    /// Dimension of the cooperative nullspace used by shared streams,
    /// `M Nt - (M-1) Nr`.
    pub fn shared_nullspace_dim(&self) -> usize {
        self.rrhs * self.tx_antennas - (self.rrhs - 1) * self.rx_antennas
    }

    /// Received SNR per Watt of transmit power once the unit-variance noise
    /// normalization is undone.
    pub fn snr_per_watt(&self) -> f64 {
        10f64.powf(self.link_gain_db / 10.0) / self.noise_power_w
    }
}

/// CSIT quality `sigma` for every (UE, RRH) pair, row-major by UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsitQuality {
    m: usize,
    sigma: Vec<f64>,
}

impl CsitQuality {
    pub fn uniform(m: usize, sigma: f64) -> Self {
        Self { m, sigma: vec![sigma; m * m] }
    }

    pub fn perfect(m: usize) -> Self {
        Self::uniform(m, 0.0)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("CSIT quality must be an M x M table".into()));
        }
        Ok(Self { m, sigma: rows.into_iter().flatten().collect() })
    }

    pub fn get(&self, ue: usize, rrh: usize) -> f64 {
        self.sigma[ue * self.m + rrh]
    }

    pub fn size(&self) -> usize {
        self.m
    }

    fn validate(&self) -> Result<()> {
        for ue in 0..self.m {
            for rrh in 0..self.m {
                let value = self.get(ue, rrh);
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::InvalidCsitQuality { ue, rrh, value });
                }
            }
        }
        Ok(())
    }
}

/// True CSI and CSIT for one scheduling frame. Immutable once drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    m: usize,
    truth: Vec<CMatrix>,
    csit: Vec<CMatrix>,
    quality: CsitQuality,
    truth_aggregate: Vec<CMatrix>,
    csit_aggregate: Vec<CMatrix>,
}

/// Which of the two channel views to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    True,
    Csit,
}

impl ChannelState {
    /// Builds a state from explicit link matrices indexed `[ue][rrh]`.
    pub fn from_links(
        truth: Vec<Vec<CMatrix>>,
        csit: Vec<Vec<CMatrix>>,
        quality: CsitQuality,
    ) -> Result<Self> {
        let m = truth.len();
        if csit.len() != m || truth.iter().chain(csit.iter()).any(|r| r.len() != m) {
            return Err(Error::Shape("link tables must be M x M".into()));
        }
        let flat_t: Vec<CMatrix> = truth.into_iter().flatten().collect();
        let flat_c: Vec<CMatrix> = csit.into_iter().flatten().collect();
        let shape = flat_t[0].shape();
        if flat_t.iter().chain(flat_c.iter()).any(|h| h.shape() != shape) {
            return Err(Error::Shape("all link matrices must share one shape".into()));
        }
        Ok(Self::assemble(m, flat_t, flat_c, quality))
    }

    fn assemble(m: usize, truth: Vec<CMatrix>, csit: Vec<CMatrix>, quality: CsitQuality) -> Self {
        let aggregate = |links: &[CMatrix], ue: usize| {
            let (nr, nt) = links[0].shape();
            let mut agg = CMatrix::zeros(nr, m * nt);
            for rrh in 0..m {
                agg.view_mut((0, rrh * nt), (nr, nt)).copy_from(&links[ue * m + rrh]);
            }
            agg
        };
        let truth_aggregate = (0..m).map(|ue| aggregate(&truth, ue)).collect();
        let csit_aggregate = (0..m).map(|ue| aggregate(&csit, ue)).collect();
        Self { m, truth, csit, quality, truth_aggregate, csit_aggregate }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    /// `H_{ue,rrh}` or its CSIT counterpart, `Nr x Nt`.
    pub fn link(&self, view: View, ue: usize, rrh: usize) -> &CMatrix {
        match view {
            View::True => &self.truth[ue * self.m + rrh],
            View::Csit => &self.csit[ue * self.m + rrh],
        }
    }

    /// Aggregate channel `[H_{ue,1} ... H_{ue,M}]`, `Nr x M Nt`.
    pub fn aggregate(&self, view: View, ue: usize) -> &CMatrix {
        match view {
            View::True => &self.truth_aggregate[ue],
            View::Csit => &self.csit_aggregate[ue],
        }
    }

    pub fn quality(&self) -> &CsitQuality {
        &self.quality
    }

    /// Copy of this state in which the CSIT is replaced by the true CSI.
    pub fn with_perfect_csit(&self) -> Self {
        Self::assemble(self.m, self.truth.clone(), self.truth.clone(), CsitQuality::perfect(self.m))
    }
}

/// Draws one frame of i.i.d. Rayleigh CSI and the matching imperfect CSIT
/// `Ĥ = sqrt(1-σ) H + sqrt(σ) E`.
pub fn draw_channel<R: Rng + ?Sized>(
    config: &ClusterConfig,
    quality: &CsitQuality,
    rng: &mut R,
) -> Result<ChannelState> {
    config.validate()?;
    quality.validate()?;
    let m = config.rrhs;
    if quality.size() != m {
        return Err(Error::Shape(format!(
            "CSIT quality table is {}x{}, cluster has {m} RRHs",
            quality.size(),
            quality.size()
        )));
    }
    let (nr, nt) = (config.rx_antennas, config.tx_antennas);
    let full = nr.min(nt);
    let mut truth = Vec::with_capacity(m * m);
    let mut csit = Vec::with_capacity(m * m);
    for ue in 0..m {
        for rrh in 0..m {
            let sigma = quality.get(ue, rrh);
            let h = draw_full_rank(nr, nt, full, rng, ue, rrh, |g| g)?;
            let h_hat = if sigma == 0.0 {
                // Keep the random stream aligned with the imperfect case.
                let _ = gaussian_matrix(nr, nt, rng);
                h.clone()
            } else {
                let (a, b) = (Complex64::from((1.0 - sigma).sqrt()), Complex64::from(sigma.sqrt()));
                draw_full_rank(nr, nt, full, rng, ue, rrh, |e| &h * a + e * b)?
            };
            truth.push(h);
            csit.push(h_hat);
        }
    }
    Ok(ChannelState::assemble(m, truth, csit, quality.clone()))
}

fn draw_full_rank<R: Rng + ?Sized>(
    nr: usize,
    nt: usize,
    full: usize,
    rng: &mut R,
    ue: usize,
    rrh: usize,
    map: impl Fn(CMatrix) -> CMatrix,
) -> Result<CMatrix> {
    for _ in 0..=MAX_RANK_RETRIES {
        let candidate = map(gaussian_matrix(nr, nt, rng));
        if rank(&candidate)? == full {
            return Ok(candidate);
        }
    }
    Err(Error::RankDeficient { ue, rrh, retries: MAX_RANK_RETRIES })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ClusterConfig {
        ClusterConfig::default()
    }

    #[test]
    fn shapes_match_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = draw_channel(&cfg(), &CsitQuality::uniform(3, 0.05), &mut rng).unwrap();
        let mut count = 0;
        for ue in 0..3 {
            for rrh in 0..3 {
                assert_eq!(ch.link(View::True, ue, rrh).shape(), (2, 5));
                assert_eq!(ch.link(View::Csit, ue, rrh).shape(), (2, 5));
                count += 1;
            }
            assert_eq!(ch.aggregate(View::True, ue).shape(), (2, 15));
        }
        assert_eq!(count, 9);
    }

    #[test]
    fn zero_sigma_gives_exact_csit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = draw_channel(&cfg(), &CsitQuality::perfect(3), &mut rng).unwrap();
        for ue in 0..3 {
            for rrh in 0..3 {
                assert_eq!(ch.link(View::True, ue, rrh), ch.link(View::Csit, ue, rrh));
            }
        }
    }

    #[test]
    fn rejects_quality_outside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = CsitQuality::uniform(3, 1.5);
        match draw_channel(&cfg(), &q, &mut rng) {
            Err(Error::InvalidCsitQuality { value, .. }) => assert_eq!(value, 1.5),
            other => panic!("expected quality error, got {other:?}"),
        }
        let q = CsitQuality::uniform(3, -0.1);
        assert!(draw_channel(&cfg(), &q, &mut rng).is_err());
    }

    #[test]
    fn rejects_antenna_regime_violation() {
        let bad = ClusterConfig { tx_antennas: 4, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = ClusterConfig { tx_antennas: 7, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = ClusterConfig { rrhs: 1, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identical_seeds_are_bitwise_identical() {
        let q = CsitQuality::uniform(3, 0.05);
        let a = draw_channel(&cfg(), &q, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = draw_channel(&cfg(), &q, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        let c = draw_channel(&cfg(), &q, &mut ChaCha8Rng::seed_from_u64(78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perfect_copy_replaces_csit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = draw_channel(&cfg(), &CsitQuality::uniform(3, 0.2), &mut rng).unwrap();
        let p = ch.with_perfect_csit();
        assert_eq!(p.link(View::Csit, 1, 2), ch.link(View::True, 1, 2));
        assert_eq!(p.aggregate(View::Csit, 0), ch.aggregate(View::True, 0));
    }
}
