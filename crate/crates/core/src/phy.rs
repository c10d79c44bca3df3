//! Downlink physical layer: per-antenna power scaling, ZF and MRT
//! precoders, SINR, sum rate, transmit power and energy efficiency.
//!
//! Notation: `h` is the M×K channel whose column k is user k's channel
//! `h_k`, `p` holds the diagonal of the power matrix `P`, and symbols carry
//! `E[s s^H] = I / K`. All quantities are linear (no dB).

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CMatrix, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyError {
    #[error("power vector has {got} entries, channel has {expected} antennas")]
    PowerLength { expected: usize, got: usize },
    #[error("invalid power level {value} at antenna {antenna}")]
    InvalidPower { antenna: usize, value: f64 },
    #[error("zero-forcing needs at least {k_users} active antennas, only {active} are powered")]
    TooFewActive { active: usize, k_users: usize },
    #[error("H^H P H is singular (rank-deficient channel on the active antennas): {0}")]
    Singular(LinalgError),
    #[error("user {0} receives zero effective channel power under this allocation")]
    DegenerateUser(usize),
    #[error("expected a {expected} precoder, got {got}")]
    KindMismatch {
        expected: PrecoderKind,
        got: PrecoderKind,
    },
    #[error("precoder is {got:?}, expected {expected:?}")]
    PrecoderShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("total power must be positive, got {0}")]
    NonPositivePower(f64),
}

pub type Result<T> = std::result::Result<T, PhyError>;

/// Diagonal of the per-antenna power matrix `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVector(Vec<f64>);

impl PowerVector {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if let Some((antenna, &value)) = levels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(PhyError::InvalidPower { antenna, value });
        }
        Ok(Self(levels))
    }

    pub fn uniform(m: usize, level: f64) -> Result<Self> {
        Self::new(vec![level; m])
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// tr(P).
    pub fn trace(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn sqrt(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.sqrt()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecoderKind {
    Zf,
    Mrt,
}

impl fmt::Display for PrecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecoderKind::Zf => write!(f, "ZF"),
            PrecoderKind::Mrt => write!(f, "MRT"),
        }
    }
}

/// M×K precoder with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Precoder {
    pub matrix: CMatrix,
    pub kind: PrecoderKind,
}

impl Precoder {
    pub fn build(kind: PrecoderKind, h: &CMatrix, p: &PowerVector) -> Result<Self> {
        match kind {
            PrecoderKind::Zf => zf_precoder(h, p),
            PrecoderKind::Mrt => mrt_precoder(h, p),
        }
    }
}

fn check_power_len(h: &CMatrix, p: &PowerVector) -> Result<()> {
    if p.len() != h.rows() {
        return Err(PhyError::PowerLength {
            expected: h.rows(),
            got: p.len(),
        });
    }
    Ok(())
}

fn check_precoder(h: &CMatrix, v: &Precoder) -> Result<()> {
    if v.matrix.shape() != h.shape() {
        return Err(PhyError::PrecoderShape {
            expected: h.shape(),
            got: v.matrix.shape(),
        });
    }
    Ok(())
}

/// Zero-forcing: unit-normalized columns of `P^{1/2} H (H^H P H)^{-1}`.
pub fn zf_precoder(h: &CMatrix, p: &PowerVector) -> Result<Precoder> {
    check_power_len(h, p)?;
    let k = h.cols();
    let active = p.active_count();
    if active < k {
        return Err(PhyError::TooFewActive { active, k_users: k });
    }
    let sqrt_p = p.sqrt();
    let ph = h.scale_rows(&sqrt_p).expect("length checked");
    // H^H P H = (P^{1/2} H)^H (P^{1/2} H)
    let gram = ph.hermitian().matmul(&ph).expect("conformable");
    let gram_inv = gram.inverse_small().map_err(PhyError::Singular)?;
    let mut v = ph.matmul(&gram_inv).expect("conformable");
    for c in 0..k {
        let n = v.column_norm(c);
        if !(n > 0.0 && n.is_finite()) {
            return Err(PhyError::Singular(LinalgError::NonFinite("zf column norm")));
        }
        for r in 0..v.rows() {
            v[(r, c)] /= n;
        }
    }
    Ok(Precoder {
        matrix: v,
        kind: PrecoderKind::Zf,
    })
}

/// `h_k^H P h_j`.
fn weighted_inner(h: &CMatrix, p: &PowerVector, k: usize, j: usize) -> Complex64 {
    (0..h.rows())
        .map(|m| h[(m, k)].conj() * p.levels()[m] * h[(m, j)])
        .sum()
}

/// Maximal ratio transmission: `v_k = P^{1/2} h_k / sqrt(h_k^H P h_k)`.
pub fn mrt_precoder(h: &CMatrix, p: &PowerVector) -> Result<Precoder> {
    check_power_len(h, p)?;
    let sqrt_p = p.sqrt();
    let mut v = h.scale_rows(&sqrt_p).expect("length checked");
    for k in 0..h.cols() {
        let gain = weighted_inner(h, p, k, k).re;
        if !(gain > f64::MIN_POSITIVE) {
            return Err(PhyError::DegenerateUser(k));
        }
        let inv = 1.0 / gain.sqrt();
        for m in 0..v.rows() {
            v[(m, k)] *= inv;
        }
    }
    Ok(Precoder {
        matrix: v,
        kind: PrecoderKind::Mrt,
    })
}

/// K×K matrix `G[k][j] = h_k^H P^{1/2} v_j`.
pub fn effective_gains(h: &CMatrix, p: &PowerVector, v: &Precoder) -> Result<CMatrix> {
    check_power_len(h, p)?;
    check_precoder(h, v)?;
    let pv = v.matrix.scale_rows(&p.sqrt()).expect("length checked");
    Ok(h.hermitian().matmul(&pv).expect("conformable"))
}

fn sinr_from_gains(g: &CMatrix, noise_var: f64, k: usize) -> f64 {
    let kf = g.rows() as f64;
    let signal = g[(k, k)].norm_sqr() / kf;
    let interference: f64 = (0..g.cols())
        .filter(|&j| j != k)
        .map(|j| g[(k, j)].norm_sqr())
        .sum::<f64>()
        / kf;
    signal / (interference + noise_var)
}

/// SINR of user `k`, with the interference trace written as
/// `||V_{-k}^H P^{1/2} h_k||^2` and both terms carrying the 1/K symbol power.
pub fn sinr(h: &CMatrix, p: &PowerVector, v: &Precoder, noise_var: f64, k: usize) -> Result<f64> {
    let g = effective_gains(h, p, v)?;
    Ok(sinr_from_gains(&g, noise_var, k))
}

/// SINR of every user.
pub fn sinrs(h: &CMatrix, p: &PowerVector, v: &Precoder, noise_var: f64) -> Result<Vec<f64>> {
    let g = effective_gains(h, p, v)?;
    Ok((0..h.cols()).map(|k| sinr_from_gains(&g, noise_var, k)).collect())
}

pub fn rate_from_sinrs(sinrs: &[f64]) -> f64 {
    sinrs.iter().map(|x| (1.0 + x).log2()).sum()
}

/// Generic sum rate from the SINR definition.
pub fn sum_rate(h: &CMatrix, p: &PowerVector, v: &Precoder, noise_var: f64) -> Result<f64> {
    Ok(rate_from_sinrs(&sinrs(h, p, v, noise_var)?))
}

/// Interference-free closed form valid for a ZF precoder.
pub fn zf_sum_rate(h: &CMatrix, p: &PowerVector, v_zf: &Precoder, noise_var: f64) -> Result<f64> {
    if v_zf.kind != PrecoderKind::Zf {
        return Err(PhyError::KindMismatch {
            expected: PrecoderKind::Zf,
            got: v_zf.kind,
        });
    }
    let g = effective_gains(h, p, v_zf)?;
    let k = h.cols() as f64;
    Ok((0..h.cols())
        .map(|i| (1.0 + g[(i, i)].norm_sqr() / (noise_var * k)).log2())
        .sum())
}

/// MRT closed form in terms of the weighted inner products `h_k^H P h_j`.
pub fn mrt_sum_rate(h: &CMatrix, p: &PowerVector, noise_var: f64) -> Result<f64> {
    check_power_len(h, p)?;
    let k = h.cols();
    let gram = CMatrix::from_fn(k, k, |i, j| weighted_inner(h, p, i, j));
    for j in 0..k {
        if !(gram[(j, j)].re > f64::MIN_POSITIVE) {
            return Err(PhyError::DegenerateUser(j));
        }
    }
    Ok((0..k)
        .map(|i| {
            let interference: f64 = (0..k)
                .filter(|&j| j != i)
                .map(|j| gram[(i, j)].norm_sqr() / gram[(j, j)].re)
                .sum();
            (1.0 + gram[(i, i)].re / (interference + k as f64 * noise_var)).log2()
        })
        .sum())
}

/// `(1/K) tr(P V V^H)`, evaluated as `(1/K) sum_m p_m ||row_m(V)||^2`.
pub fn total_power(p: &PowerVector, v: &Precoder, k_users: usize) -> f64 {
    (0..p.len())
        .map(|m| per_antenna_power(p, v, k_users, m))
        .sum()
}

/// `(p_m / K) [V V^H]_{m,m}`.
pub fn per_antenna_power(p: &PowerVector, v: &Precoder, k_users: usize, m: usize) -> f64 {
    let row_energy: f64 = v.matrix.row(m).iter().map(|z| z.norm_sqr()).sum();
    p.levels()[m] * row_energy / k_users as f64
}

pub fn energy_efficiency(rate: f64, total_pow: f64) -> Result<f64> {
    if !(total_pow > 0.0) {
        return Err(PhyError::NonPositivePower(total_pow));
    }
    Ok(rate / total_pow)
}

/// Large-array SINR approximation `1 / ((K-1) + K M sigma^2 / tr(P))`.
pub fn approx_sinr(p: &PowerVector, k_users: usize, m_antennas: usize, noise_var: f64) -> f64 {
    let k = k_users as f64;
    1.0 / ((k - 1.0) + k * m_antennas as f64 * noise_var / p.trace())
}

/// Interference-free (ZF) variant: `tr(P) / (K M sigma^2)`.
pub fn approx_sinr_zf(p: &PowerVector, k_users: usize, m_antennas: usize, noise_var: f64) -> f64 {
    p.trace() / (k_users as f64 * m_antennas as f64 * noise_var)
}

/// Everything observable about one (channel, allocation) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkMetrics {
    pub sinr_per_user: Vec<f64>,
    pub sum_rate: f64,
    pub total_power: f64,
    pub per_antenna_power: Vec<f64>,
    /// `sum_rate / total_power`, or 0 when no power is radiated.
    pub energy_efficiency: f64,
}

impl LinkMetrics {
    pub fn evaluate(h: &CMatrix, p: &PowerVector, v: &Precoder, noise_var: f64) -> Result<Self> {
        let k = h.cols();
        let sinr_per_user = sinrs(h, p, v, noise_var)?;
        let sum_rate = rate_from_sinrs(&sinr_per_user);
        let per_antenna_power: Vec<f64> =
            (0..p.len()).map(|m| per_antenna_power(p, v, k, m)).collect();
        let total_power: f64 = per_antenna_power.iter().sum();
        let energy_efficiency = energy_efficiency(sum_rate, total_power).unwrap_or(0.0);
        Ok(Self {
            sinr_per_user,
            sum_rate,
            total_power,
            per_antenna_power,
            energy_efficiency,
        })
    }
}
