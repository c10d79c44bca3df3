//! Discrete per-antenna power levels and the reduced action space.
//!
//! An action is one level per antenna. The reduced space keeps the vectors
//! whose trace lies in `[p_min, M * P_T]` and that power at least K
//! antennas, enumerated depth-first in lexicographic order of level indices.

use std::fmt;

use thiserror::Error;

use crate::phy::{per_antenna_power, PowerVector, Precoder};

/// Relative slack when comparing a per-antenna power against its limit.
pub const PER_ANTENNA_RTOL: f64 = 1e-12;

/// Default ceiling on the number of enumerated actions.
pub const DEFAULT_MAX_ACTIONS: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("a power level set needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("maximum per-antenna power must be positive and finite, got {0}")]
    BadMaxPower(f64),
    #[error("power levels must start at 0 and be strictly increasing: {0:?}")]
    BadLevels(Vec<f64>),
    #[error("infeasible action space: {0}")]
    Infeasible(Infeasibility),
    #[error("reduced action space exceeds {limit} actions; use fewer antennas or levels")]
    TooLarge { limit: usize },
}

/// Which bound emptied the action space.
#[derive(Debug, Clone, PartialEq)]
pub enum Infeasibility {
    /// `p_min` is above the trace cap `M * P_T`.
    MinAboveCap { p_min: f64, trace_cap: f64 },
    /// Even full power on every antenna stays below `p_min`.
    MinUnreachable { p_min: f64, max_trace: f64 },
    /// Fewer antennas than users.
    Support { m_antennas: usize, k_users: usize },
    /// Bounds are consistent but no level combination lands inside them.
    NoLatticePoint { p_min: f64, trace_cap: f64 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MinAboveCap { p_min, trace_cap } => {
                write!(f, "p_min = {p_min} exceeds the trace cap M*P_T = {trace_cap}")
            }
            Self::MinUnreachable { p_min, max_trace } => write!(
                f,
                "p_min = {p_min} exceeds the largest achievable trace {max_trace}"
            ),
            Self::Support { m_antennas, k_users } => write!(
                f,
                "{k_users} users need at least {k_users} active antennas, only {m_antennas} exist"
            ),
            Self::NoLatticePoint { p_min, trace_cap } => write!(
                f,
                "no combination of levels has trace within [{p_min}, {trace_cap}]"
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, ActionError>;

/// Sorted power levels, first 0 and last the per-antenna maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLevelSet {
    levels: Vec<f64>,
}

impl PowerLevelSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(ActionError::TooFewLevels(levels.len()));
        }
        let ok = levels[0] == 0.0
            && levels.iter().all(|x| x.is_finite())
            && levels.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(ActionError::BadLevels(levels));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.levels.last().expect("at least two levels")
    }

    /// Smallest strictly positive level.
    pub fn min_positive(&self) -> f64 {
        self.levels[1]
    }
}

/// Uniformly spaced levels `{0, P/(n-1), ..., P}`.
pub fn make_level_set(p_per_max: f64, cardinality: usize) -> Result<PowerLevelSet> {
    if cardinality < 2 {
        return Err(ActionError::TooFewLevels(cardinality));
    }
    if !(p_per_max > 0.0 && p_per_max.is_finite()) {
        return Err(ActionError::BadMaxPower(p_per_max));
    }
    let step = p_per_max / (cardinality - 1) as f64;
    let mut levels: Vec<f64> = (0..cardinality).map(|i| i as f64 * step).collect();
    levels[cardinality - 1] = p_per_max;
    PowerLevelSet::new(levels)
}

/// Trace lower bound `K M sigma^2 xi` from the large-array ZF approximation.
pub fn min_power_bound(k_users: usize, m_antennas: usize, noise_var: f64, sinr_target: f64) -> f64 {
    k_users as f64 * m_antennas as f64 * noise_var * sinr_target
}

/// The reduced action space. Actions are stored as level indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    m_antennas: usize,
    k_users: usize,
    level_set: PowerLevelSet,
    /// Row-major `len × m_antennas` level indices.
    indices: Vec<u8>,
    p_min: f64,
    trace_cap: f64,
    nodes_visited: u64,
}

impl ActionSpace {
    pub fn len(&self) -> usize {
        self.indices.len() / self.m_antennas
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn m_antennas(&self) -> usize {
        self.m_antennas
    }

    pub fn k_users(&self) -> usize {
        self.k_users
    }

    pub fn level_set(&self) -> &PowerLevelSet {
        &self.level_set
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn trace_cap(&self) -> f64 {
        self.trace_cap
    }

    /// Search-tree nodes entered while enumerating.
    pub fn nodes_visited(&self) -> u64 {
        self.nodes_visited
    }

    pub fn level_indices(&self, action: usize) -> &[u8] {
        &self.indices[action * self.m_antennas..(action + 1) * self.m_antennas]
    }

    pub fn powers(&self, action: usize) -> Vec<f64> {
        self.level_indices(action)
            .iter()
            .map(|&i| self.level_set.levels[i as usize])
            .collect()
    }

    pub fn power_vector(&self, action: usize) -> PowerVector {
        PowerVector::new(self.powers(action)).expect("levels are non-negative")
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.indices.chunks_exact(self.m_antennas)
    }
}

/// Enumerates the reduced action space with the default size ceiling.
pub fn enumerate_reduced(
    level_set: &PowerLevelSet,
    m_antennas: usize,
    k_users: usize,
    p_min: f64,
    p_t_total: f64,
) -> Result<ActionSpace> {
    enumerate_reduced_capped(level_set, m_antennas, k_users, p_min, p_t_total, DEFAULT_MAX_ACTIONS)
}

/// Depth-first enumeration of `{a in levels^M : p_min <= sum(a) <= M*P_T,
/// at least K entries > 0}` with sum and support pruning. Fails with
/// [`ActionError::TooLarge`] once more than `max_actions` are found.
pub fn enumerate_reduced_capped(
    level_set: &PowerLevelSet,
    m_antennas: usize,
    k_users: usize,
    p_min: f64,
    p_t_total: f64,
    max_actions: usize,
) -> Result<ActionSpace> {
    let trace_cap = m_antennas as f64 * p_t_total;
    let max_trace = m_antennas as f64 * level_set.max();
    if k_users > m_antennas {
        return Err(ActionError::Infeasible(Infeasibility::Support { m_antennas, k_users }));
    }
    if p_min > trace_cap {
        return Err(ActionError::Infeasible(Infeasibility::MinAboveCap { p_min, trace_cap }));
    }
    if p_min > max_trace {
        return Err(ActionError::Infeasible(Infeasibility::MinUnreachable { p_min, max_trace }));
    }
    assert!(level_set.len() <= u8::MAX as usize + 1, "level indices are stored as u8");

    let mut search = Search {
        levels: level_set.levels(),
        m: m_antennas,
        k: k_users,
        p_min,
        trace_cap,
        // the remaining-max bound is computed differently from the leaf sum
        slack: 1e-9 * p_min.abs().max(1.0),
        max_actions,
        prefix: Vec::with_capacity(m_antennas),
        out: Vec::new(),
        nodes: 0,
        overflow: false,
    };
    search.descend(0.0, 0);
    if search.overflow {
        return Err(ActionError::TooLarge { limit: max_actions });
    }
    if search.out.is_empty() {
        return Err(ActionError::Infeasible(Infeasibility::NoLatticePoint { p_min, trace_cap }));
    }
    Ok(ActionSpace {
        m_antennas,
        k_users,
        level_set: level_set.clone(),
        indices: search.out,
        p_min,
        trace_cap,
        nodes_visited: search.nodes,
    })
}

struct Search<'a> {
    levels: &'a [f64],
    m: usize,
    k: usize,
    p_min: f64,
    trace_cap: f64,
    slack: f64,
    max_actions: usize,
    prefix: Vec<u8>,
    out: Vec<u8>,
    nodes: u64,
    overflow: bool,
}

impl Search<'_> {
    fn descend(&mut self, sum: f64, active: usize) {
        let depth = self.prefix.len();
        if depth == self.m {
            if sum >= self.p_min && sum <= self.trace_cap && active >= self.k {
                if self.out.len() / self.m >= self.max_actions {
                    self.overflow = true;
                    return;
                }
                self.out.extend_from_slice(&self.prefix);
            }
            return;
        }
        let remaining = (self.m - depth - 1) as f64;
        let top = *self.levels.last().unwrap();
        for (idx, &level) in self.levels.iter().enumerate() {
            let next = sum + level;
            // partial sums only grow, and levels ascend
            if next > self.trace_cap {
                break;
            }
            if next + remaining * top < self.p_min - self.slack {
                continue;
            }
            let next_active = active + usize::from(level > 0.0);
            if next_active + (self.m - depth - 1) < self.k {
                continue;
            }
            self.nodes += 1;
            self.prefix.push(idx as u8);
            self.descend(next, next_active);
            self.prefix.pop();
            if self.overflow {
                return;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AntennaViolation {
    pub antenna: usize,
    pub power: f64,
    /// `limit - power`; negative for a violation.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerAntennaReport {
    pub satisfied: bool,
    pub violations: Vec<AntennaViolation>,
}

/// Checks `(p_m / K) [V V^H]_{m,m} <= P_per` for every antenna.
pub fn check_per_antenna(
    action: &PowerVector,
    v: &Precoder,
    k_users: usize,
    p_per_max: f64,
) -> PerAntennaReport {
    let limit = p_per_max * (1.0 + PER_ANTENNA_RTOL);
    let violations: Vec<AntennaViolation> = (0..action.len())
        .filter_map(|m| {
            let power = per_antenna_power(action, v, k_users, m);
            (power > limit).then_some(AntennaViolation {
                antenna: m,
                power,
                margin: p_per_max - power,
            })
        })
        .collect();
    PerAntennaReport {
        satisfied: violations.is_empty(),
        violations,
    }
}
