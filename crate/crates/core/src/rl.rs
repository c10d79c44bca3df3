//! Tabular Q-learning over channel states and reduced power actions, plus
//! an exact value-iteration oracle that reads the hidden transition matrix.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{check_per_antenna, ActionSpace};
use crate::channel::{ChannelStateSet, MarkovChannel, ROW_SUM_TOL};
use crate::linalg::CMatrix;
use crate::phy::{LinkMetrics, PowerVector, Precoder, PrecoderKind};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("transition row {row} is not a probability vector (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("table shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("discount must lie in [0, 1), got {0}")]
    BadGamma(f64),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("value iteration did not converge within {0} sweeps")]
    NotConverged(usize),
    #[error("q-table was trained under config {found}, active config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("q-table file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;

/// Action values and visit counts, `|H| x |A|` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(RlError::Shape {
                expected: (n_states, n_actions),
                got: (values.len(), 1),
            });
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
            visits: vec![0; n_states * n_actions],
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visits
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.n_actions + a]
    }

    pub fn state_visits(&self, s: usize) -> u64 {
        self.visits[s * self.n_actions..(s + 1) * self.n_actions].iter().sum()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Smallest-index maximizer of row `s`.
    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn policy(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| self.greedy(s)).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// First index of the maximum (ties resolve to the smallest index).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QTableFile {
    config_hash: String,
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visit_counts: Vec<u64>,
}

impl QTable {
    pub fn to_json(&self, config_hash: &str) -> Result<String> {
        Ok(serde_json::to_string(&QTableFile {
            config_hash: config_hash.to_owned(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.clone(),
            visit_counts: self.visits.clone(),
        })?)
    }

    /// Parses a table, refusing one whose config hash differs from `expected_hash`.
    pub fn from_json(text: &str, expected_hash: &str) -> Result<Self> {
        let file: QTableFile = serde_json::from_str(text)?;
        if file.config_hash != expected_hash {
            return Err(RlError::ConfigMismatch {
                expected: expected_hash.to_owned(),
                found: file.config_hash,
            });
        }
        let cells = file.n_states * file.n_actions;
        if file.values.len() != cells || file.visit_counts.len() != cells {
            return Err(RlError::Format(format!(
                "{}x{} table with {} values and {} counts",
                file.n_states,
                file.n_actions,
                file.values.len(),
                file.visit_counts.len()
            )));
        }
        Ok(Self {
            n_states: file.n_states,
            n_actions: file.n_actions,
            values: file.values,
            visits: file.visit_counts,
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, expected_hash)
    }
}

/// Learning-rate schedule, evaluated on the visit count of (s, a) before
/// the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// `1 / (1 + n)`
    VisitInverse,
    /// `1 / (1 + n)^omega`
    VisitPower(f64),
    Constant(f64),
}

impl BetaMode {
    pub fn beta(&self, visits: u64) -> f64 {
        let n = visits as f64;
        match *self {
            BetaMode::VisitInverse => 1.0 / (1.0 + n),
            BetaMode::VisitPower(omega) => (1.0 + n).powf(-omega),
            BetaMode::Constant(c) => c,
        }
    }
}

impl Default for BetaMode {
    fn default() -> Self {
        BetaMode::VisitPower(0.8)
    }
}

/// How `epsilon_decay` is applied at each episode boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonDecayMode {
    /// `eps <- eps * (1 - decay)`
    #[default]
    Multiplicative,
    /// `eps <- eps * decay`
    Scale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedules {
    pub gamma: f64,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    pub decay_mode: EpsilonDecayMode,
    pub epsilon_floor: f64,
    pub beta_mode: BetaMode,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            epsilon0: 1.0,
            epsilon_decay: 0.1,
            decay_mode: EpsilonDecayMode::Multiplicative,
            epsilon_floor: 0.01,
            beta_mode: BetaMode::default(),
        }
    }
}

impl Schedules {
    /// Fixed exploration rate and learning-rate mode.
    pub fn constant_epsilon(gamma: f64, epsilon: f64, beta_mode: BetaMode) -> Self {
        Self {
            gamma,
            epsilon0: epsilon,
            epsilon_decay: 0.0,
            decay_mode: EpsilonDecayMode::Multiplicative,
            epsilon_floor: epsilon,
            beta_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(RlError::BadGamma(self.gamma));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon0) || !unit.contains(&self.epsilon_floor) {
            return Err(RlError::BadSchedule("epsilon values must lie in [0, 1]".into()));
        }
        if self.epsilon_floor > self.epsilon0 {
            return Err(RlError::BadSchedule(format!(
                "epsilon_floor {} exceeds epsilon0 {}",
                self.epsilon_floor, self.epsilon0
            )));
        }
        if !unit.contains(&self.epsilon_decay) {
            return Err(RlError::BadSchedule("epsilon_decay must lie in [0, 1]".into()));
        }
        match self.beta_mode {
            BetaMode::VisitPower(w) if !(w > 0.0 && w <= 1.0) => Err(RlError::BadSchedule(format!(
                "visit_power exponent must lie in (0, 1], got {w}"
            ))),
            BetaMode::Constant(c) if !(c > 0.0 && c <= 1.0) => Err(RlError::BadSchedule(format!(
                "constant beta must lie in (0, 1], got {c}"
            ))),
            _ => Ok(()),
        }
    }

    /// One episode-boundary decay step, floored.
    pub fn decay(&self, epsilon: f64) -> f64 {
        let factor = match self.decay_mode {
            EpsilonDecayMode::Multiplicative => 1.0 - self.epsilon_decay,
            EpsilonDecayMode::Scale => self.epsilon_decay,
        };
        (epsilon * factor).max(self.epsilon_floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardParams {
    /// Linear SINR targets, one per user.
    pub sinr_targets: Vec<f64>,
    pub noise_var: f64,
    pub denom_floor: f64,
}

impl RewardParams {
    pub const DEFAULT_DENOM_FLOOR: f64 = 1e-6;

    /// `1 / (max(sum_k |xi_k - target_k|, floor) * T_tot)`.
    pub fn reward(&self, sinrs: &[f64], total_power: f64) -> f64 {
        let deviation: f64 = sinrs
            .iter()
            .zip(&self.sinr_targets)
            .map(|(x, t)| (x - t).abs())
            .sum();
        1.0 / (deviation.max(self.denom_floor) * total_power)
    }
}

/// Everything computed for one (state, action) evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub sinr: Vec<f64>,
    pub sum_rate: f64,
    pub total_power: f64,
    pub energy_efficiency: f64,
    pub per_antenna_violation: bool,
    /// The precoder could not be formed; reward is 0.
    pub infeasible: bool,
}

/// Builds the precoder for `(h, action)` and scores it. A singular precoder
/// yields reward 0 with `infeasible` set, never an error.
pub fn evaluate_action(
    h: &CMatrix,
    action: &PowerVector,
    kind: PrecoderKind,
    params: &RewardParams,
    p_per_max: f64,
) -> StepOutcome {
    let k = h.cols();
    let link = Precoder::build(kind, h, action).and_then(|v| {
        let m = LinkMetrics::evaluate(h, action, &v, params.noise_var)?;
        Ok((v, m))
    });
    match link {
        Ok((v, m)) if m.total_power > 0.0 => StepOutcome {
            reward: params.reward(&m.sinr_per_user, m.total_power),
            per_antenna_violation: !check_per_antenna(action, &v, k, p_per_max).satisfied,
            sinr: m.sinr_per_user,
            sum_rate: m.sum_rate,
            total_power: m.total_power,
            energy_efficiency: m.energy_efficiency,
            infeasible: false,
        },
        _ => StepOutcome {
            reward: 0.0,
            sinr: vec![0.0; k],
            sum_rate: 0.0,
            total_power: 0.0,
            energy_efficiency: 0.0,
            per_antenna_violation: false,
            infeasible: true,
        },
    }
}

/// Shaped reward of playing `action` on channel `h`.
pub fn reward(h: &CMatrix, action: &PowerVector, kind: PrecoderKind, params: &RewardParams) -> f64 {
    evaluate_action(h, action, kind, params, f64::INFINITY).reward
}

/// The learner's world: the channel plus everything needed to score actions.
#[derive(Clone, Debug)]
pub struct Environment {
    pub channel: MarkovChannel,
    pub actions: ActionSpace,
    pub precoder: PrecoderKind,
    pub reward: RewardParams,
    pub p_per_max: f64,
}

impl Environment {
    pub fn evaluate(&self, state: usize, action: usize) -> StepOutcome {
        let h = self
            .channel
            .state_matrix(state)
            .expect("state index comes from the channel");
        evaluate_action(
            h,
            &self.actions.power_vector(action),
            self.precoder,
            &self.reward,
            self.p_per_max,
        )
    }

    /// Upper bound on any reward: the deviation floor with the smallest
    /// possible radiated power (one positive level spread over unit columns).
    pub fn reward_upper_bound(&self) -> f64 {
        1.0 / (self.reward.denom_floor * self.actions.level_set().min_positive())
    }
}

/// ε-greedy choice: one uniform draw decides the branch, a second picks the
/// random action when exploring.
pub fn select_action(q: &QTable, state: usize, n_actions: usize, epsilon: f64, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    if u < epsilon {
        rng.random_range(0..n_actions)
    } else {
        q.greedy(state)
    }
}

/// `Q(s,a) <- (1-b) Q(s,a) + b (r + gamma max_a' Q(s',a'))`, with `b` taken
/// from the visit count before it is incremented. Returns the new value.
pub fn q_update(q: &mut QTable, s: usize, a: usize, r: f64, s_next: usize, schedules: &Schedules) -> f64 {
    let idx = s * q.n_actions + a;
    let beta = schedules.beta_mode.beta(q.visits[idx]);
    let target = r + schedules.gamma * q.max_value(s_next);
    let updated = (1.0 - beta) * q.values[idx] + beta * target;
    q.values[idx] = updated;
    q.visits[idx] += 1;
    updated
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub episode: usize,
    pub iteration: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub energy_efficiency: f64,
    pub sum_rate: f64,
    /// Linear SINR per user.
    pub sinr: Vec<f64>,
    pub total_power: f64,
    pub per_antenna_violation: bool,
    pub infeasible: bool,
    pub epsilon: f64,
}

impl MetricsRecord {
    fn from_outcome(episode: usize, iteration: usize, state: usize, action: usize, epsilon: f64, o: StepOutcome) -> Self {
        Self {
            episode,
            iteration,
            state,
            action,
            reward: o.reward,
            energy_efficiency: o.energy_efficiency,
            sum_rate: o.sum_rate,
            sinr: o.sinr,
            total_power: o.total_power,
            per_antenna_violation: o.per_antenna_violation,
            infeasible: o.infeasible,
            epsilon,
        }
    }

    pub fn sinr_db(&self) -> Vec<f64> {
        self.sinr.iter().map(|&x| 10.0 * x.log10()).collect()
    }

    /// Arithmetic mean of the per-user SINRs in dB.
    pub fn mean_sinr_db(&self) -> f64 {
        let db = self.sinr_db();
        db.iter().sum::<f64>() / db.len() as f64
    }
}

/// Runs ε-greedy Q-learning for `episodes × iters_per_episode` steps.
///
/// Each step observes `s`, picks `a`, scores `(s, a)`, advances the channel
/// to `s'` and updates with `(s, a, r, s')`. Exploration decays at episode
/// boundaries. Every step is reported to `sink`.
pub fn train(
    env: &mut Environment,
    schedules: &Schedules,
    episodes: usize,
    iters_per_episode: usize,
    seed: u64,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<QTable> {
    schedules.validate()?;
    let n_actions = env.actions.len();
    let mut q = QTable::new(env.channel.num_states(), n_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_bound = env.reward_upper_bound() / (1.0 - schedules.gamma);
    let mut epsilon = schedules.epsilon0;
    for episode in 0..episodes {
        for iteration in 0..iters_per_episode {
            let s = env.channel.current_state();
            let a = select_action(&q, s, n_actions, epsilon, &mut rng);
            let outcome = env.evaluate(s, a);
            let r = outcome.reward;
            let s_next = env.channel.step();
            let value = q_update(&mut q, s, a, r, s_next, schedules);
            debug_assert!(value.is_finite() && value <= q_bound * (1.0 + 1e-9));
            sink(&MetricsRecord::from_outcome(episode, iteration, s, a, epsilon, outcome));
        }
        epsilon = schedules.decay(epsilon);
    }
    Ok(q)
}

/// Plays `policy` for `steps` slots after reseeding the channel with `seed`.
pub fn rollout(
    env: &mut Environment,
    steps: usize,
    seed: u64,
    mut policy: impl FnMut(usize, &mut ChaCha8Rng) -> usize,
    mut sink: impl FnMut(&MetricsRecord),
) {
    env.channel.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_e7a1);
    for step in 0..steps {
        let s = env.channel.current_state();
        let a = policy(s, &mut rng);
        let outcome = env.evaluate(s, a);
        env.channel.step();
        sink(&MetricsRecord::from_outcome(0, step, s, a, 0.0, outcome));
    }
}

/// Greedy (ε = 0) rollout of a learned table.
pub fn evaluate_policy(
    q: &QTable,
    env: &mut Environment,
    steps: usize,
    seed: u64,
    sink: impl FnMut(&MetricsRecord),
) {
    let n = q.n_actions();
    rollout(env, steps, seed, |s, rng| select_action(q, s, n, 0.0, rng), sink);
}

/// Rewards of every (state, action) pair, `|H| x |A|` row-major.
pub fn reward_table(
    states: &ChannelStateSet,
    actions: &ActionSpace,
    kind: PrecoderKind,
    params: &RewardParams,
) -> Vec<f64> {
    let powers: Vec<PowerVector> = (0..actions.len()).map(|a| actions.power_vector(a)).collect();
    let hs: Vec<&CMatrix> = states.iter().collect();
    hs.par_iter()
        .flat_map_iter(|h| powers.iter().map(move |p| reward(h, p, kind, params)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub v: Vec<f64>,
    pub q: QTable,
    pub policy: Vec<usize>,
    pub sweeps: usize,
    /// Sup-norm change of each sweep.
    pub deltas: Vec<f64>,
}

const MAX_SWEEPS: usize = 1_000_000;

/// Synchronous value iteration
/// `Q(s,a) <- r(s,a) + gamma sum_s' P(s,s') max_a' Q(s',a')` until the
/// sup-norm change drops below `tol`.
pub fn value_iteration(
    transitions: &[Vec<f64>],
    rewards: &[f64],
    n_actions: usize,
    gamma: f64,
    tol: f64,
) -> Result<OracleSolution> {
    let n_states = transitions.len();
    for (row, p) in transitions.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != n_states || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(RlError::NotStochastic { row, sum });
        }
    }
    if rewards.len() != n_states * n_actions {
        return Err(RlError::Shape {
            expected: (n_states, n_actions),
            got: (rewards.len() / n_actions.max(1), n_actions),
        });
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(RlError::BadGamma(gamma));
    }

    let mut q = vec![0.0; n_states * n_actions];
    let mut deltas = Vec::new();
    for sweep in 1..=MAX_SWEEPS {
        let v: Vec<f64> = q
            .chunks_exact(n_actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let next: Vec<f64> = (0..n_states)
            .into_par_iter()
            .flat_map_iter(|s| {
                let expected: f64 = transitions[s].iter().zip(&v).map(|(p, x)| p * x).sum();
                let r = &rewards[s * n_actions..(s + 1) * n_actions];
                r.iter().map(move |r| r + gamma * expected)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&q)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        deltas.push(delta);
        if delta < tol {
            let q = QTable::from_values(n_states, n_actions, q)?;
            let policy = q.policy();
            let v = (0..n_states).map(|s| q.max_value(s)).collect();
            return Ok(OracleSolution {
                v,
                q,
                policy,
                sweeps: sweep,
                deltas,
            });
        }
    }
    Err(RlError::NotConverged(MAX_SWEEPS))
}

/// Gap between a learned table and a reference (typically the oracle).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableComparison {
    pub sup_norm_gap: f64,
    /// `sup_norm_gap / ||reference||_inf`.
    pub relative_gap: f64,
    /// Fraction of states whose greedy actions agree.
    pub policy_agreement: f64,
    pub disagreeing_states: Vec<usize>,
}

pub fn compare_tables(learned: &QTable, reference: &QTable) -> Result<TableComparison> {
    if (learned.n_states, learned.n_actions) != (reference.n_states, reference.n_actions) {
        return Err(RlError::Shape {
            expected: (reference.n_states, reference.n_actions),
            got: (learned.n_states, learned.n_actions),
        });
    }
    let gap = learned
        .values
        .iter()
        .zip(&reference.values)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.sup_norm();
    let disagreeing: Vec<usize> = (0..reference.n_states)
        .filter(|&s| learned.greedy(s) != reference.greedy(s))
        .collect();
    Ok(TableComparison {
        sup_norm_gap: gap,
        relative_gap: if scale > 0.0 { gap / scale } else { gap },
        policy_agreement: 1.0 - disagreeing.len() as f64 / reference.n_states.max(1) as f64,
        disagreeing_states: disagreeing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{enumerate_reduced, make_level_set};
    use crate::channel::{generate_state_set, generate_transition_matrix, TransitionMatrix};
    use crate::phy::{per_antenna_power, sinrs, zf_precoder};
    use num_complex::Complex64;

    fn tiny_env(transitions: TransitionMatrix, seed: u64) -> Environment {
        let states = generate_state_set(4, 2, transitions.len(), seed).unwrap();
        let levels = make_level_set(1.0, 2).unwrap();
        Environment {
            channel: MarkovChannel::new(states, transitions, seed + 1).unwrap(),
            actions: enumerate_reduced(&levels, 4, 2, 0.8, 1.0).unwrap(),
            precoder: PrecoderKind::Zf,
            reward: RewardParams {
                sinr_targets: vec![10.0, 10.0],
                noise_var: 0.01,
                denom_floor: RewardParams::DEFAULT_DENOM_FLOOR,
            },
            p_per_max: 1.0,
        }
    }

    #[test]
    fn reward_direct_substitution() {
        let params = RewardParams { sinr_targets: vec![3.0, 5.0], noise_var: 1.0, denom_floor: 1e-6 };
        assert!((params.reward(&[4.0, 4.0], 5.0) - 0.1).abs() < 1e-15);
        // exact QoS hits the floor
        assert_eq!(params.reward(&[3.0, 5.0], 2.0), 1.0 / (1e-6 * 2.0));
    }

    #[test]
    fn reward_matches_scalar_loop_evaluation() {
        let h = generate_state_set(4, 2, 1, 42).unwrap().get(0).unwrap().clone();
        let p = PowerVector::new(vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let params = RewardParams { sinr_targets: vec![10.0, 10.0], noise_var: 0.1, denom_floor: 1e-6 };
        let got = reward(&h, &p, PrecoderKind::Zf, &params);

        let v = zf_precoder(&h, &p).unwrap().matrix;
        let (m_ant, k) = (4, 2);
        let gain = |kk: usize, j: usize| {
            let mut g = Complex64::new(0.0, 0.0);
            for m in 0..m_ant {
                g += h[(m, kk)].conj() * p.levels()[m].sqrt() * v[(m, j)];
            }
            g
        };
        let mut deviation = 0.0;
        for kk in 0..k {
            let mut interference = 0.0;
            for j in 0..k {
                if j != kk {
                    interference += gain(kk, j).norm_sqr() / k as f64;
                }
            }
            let xi = (gain(kk, kk).norm_sqr() / k as f64) / (interference + 0.1);
            deviation += (xi - 10.0).abs();
        }
        let mut t_tot = 0.0;
        for m in 0..m_ant {
            for j in 0..k {
                t_tot += p.levels()[m] * v[(m, j)].norm_sqr() / k as f64;
            }
        }
        let want = 1.0 / (deviation * t_tot);
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }

    #[test]
    fn singular_precoder_scores_zero() {
        let h = CMatrix::from_fn(3, 2, |r, _| Complex64::new(r as f64 + 1.0, 0.0));
        let p = PowerVector::uniform(3, 1.0).unwrap();
        let params = RewardParams { sinr_targets: vec![1.0, 1.0], noise_var: 1.0, denom_floor: 1e-6 };
        let o = evaluate_action(&h, &p, PrecoderKind::Zf, &params, 1.0);
        assert!(o.infeasible);
        assert_eq!(o.reward, 0.0);
    }

    #[test]
    fn greedy_selection_and_ties() {
        let q = QTable::from_values(1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_action(&q, 0, 3, 0.0, &mut rng), 1);
        let tied = QTable::from_values(1, 4, vec![0.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(tied.greedy(0), 1);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let q = QTable::new(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0f64; 10];
        let n = 10_000;
        for _ in 0..n {
            counts[select_action(&q, 0, 10, 1.0, &mut rng)] += 1.0;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square critical value, 9 dof, p = 0.01
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn half_exploration_mixture_frequency() {
        let mut values = vec![0.0; 10];
        values[7] = 1.0;
        let q = QTable::from_values(1, 10, values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let hits = (0..n).filter(|_| select_action(&q, 0, 10, 0.5, &mut rng) == 7).count();
        let p = 0.5 + 0.05;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() <= 3.0 * sigma);
    }

    #[test]
    fn q_update_cases() {
        let mut q = QTable::from_values(2, 2, vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let s = Schedules::constant_epsilon(0.9, 0.0, BetaMode::Constant(0.5));
        assert!((q_update(&mut q, 0, 0, 2.0, 1, &s) - 2.85).abs() < 1e-12);
        assert_eq!(q.visits(0, 0), 1);
        assert_eq!(q.get(1, 0), 3.0);

        let mut q = QTable::from_values(1, 1, vec![4.0]).unwrap();
        let myopic = Schedules::constant_epsilon(0.0, 0.0, BetaMode::Constant(1.0));
        assert_eq!(q_update(&mut q, 0, 0, 7.0, 0, &myopic), 7.0);

        let mut q = QTable::from_values(1, 1, vec![4.0]).unwrap();
        let frozen = Schedules::constant_epsilon(0.5, 0.0, BetaMode::Constant(0.0));
        assert_eq!(q_update(&mut q, 0, 0, 9.0, 0, &frozen), 4.0);
        assert_eq!(q.visits(0, 0), 1);
    }

    #[test]
    fn beta_schedules() {
        assert_eq!(BetaMode::VisitInverse.beta(0), 1.0);
        assert_eq!(BetaMode::VisitInverse.beta(3), 0.25);
        assert!((BetaMode::VisitPower(0.8).beta(9) - 10f64.powf(-0.8)).abs() < 1e-15);
        assert_eq!(BetaMode::Constant(0.3).beta(100), 0.3);
    }

    #[test]
    fn epsilon_stays_in_range() {
        let s = Schedules::default();
        let mut eps = s.epsilon0;
        for _ in 0..500 {
            eps = s.decay(eps);
            assert!(eps >= s.epsilon_floor && eps <= s.epsilon0);
        }
        assert_eq!(eps, 0.01);
        assert!((Schedules::default().decay(1.0) - 0.9).abs() < 1e-15);
        let scale = Schedules { decay_mode: EpsilonDecayMode::Scale, ..Schedules::default() };
        assert!((scale.decay(1.0) - 0.1).abs() < 1e-15);
        let bad = Schedules { epsilon_floor: 0.5, epsilon0: 0.1, ..Schedules::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_episodes_leave_table_empty() {
        let mut env = tiny_env(generate_transition_matrix(4, 0.5, 1).unwrap(), 5);
        let mut rows = 0;
        let q = train(&mut env, &Schedules::default(), 0, 100, 1, |_| rows += 1).unwrap();
        assert_eq!(rows, 0);
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_converges_to_fixed_point() {
        // 1/n step sizes shrink the initial bias like n^-(1-gamma), so the
        // 1% check after 1e4 updates needs gamma <= 0.5
        let gamma = 0.5;
        let s = Schedules::constant_epsilon(gamma, 0.0, BetaMode::VisitInverse);
        let mut q = QTable::new(1, 1);
        for _ in 0..10_000 {
            q_update(&mut q, 0, 0, 2.0, 0, &s);
        }
        let target = 2.0 / (1.0 - gamma);
        assert!((q.get(0, 0) - target).abs() <= 0.01 * target);
    }

    #[test]
    fn value_iteration_closed_forms() {
        let one = value_iteration(&[vec![1.0]], &[2.0], 1, 0.9, 1e-12).unwrap();
        assert!((one.v[0] - 20.0).abs() < 1e-9);

        let rewards = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2];
        let rows = vec![vec![0.5, 0.5], vec![0.2, 0.8]];
        let myopic = value_iteration(&rows, &rewards, 3, 0.0, 1e-12).unwrap();
        assert_eq!(myopic.policy, vec![1, 1]);

        let absorbing = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sol = value_iteration(&absorbing, &[1.0, 0.0, 0.0, 1.0], 2, 0.8, 1e-13).unwrap();
        assert_eq!(sol.policy, vec![0, 1]);
        for v in &sol.v {
            assert!((v - 5.0).abs() < 1e-9);
        }
        assert!(value_iteration(&[vec![0.5, 0.4], vec![0.5, 0.5]], &[0.0; 2], 1, 0.5, 1e-9).is_err());
    }

    #[test]
    fn bellman_sweeps_contract_at_rate_gamma() {
        let env = tiny_env(generate_transition_matrix(4, 0.5, 7).unwrap(), 7);
        let r = reward_table(env.channel.state_set(), &env.actions, env.precoder, &env.reward);
        let sol = value_iteration(env.channel.transitions().rows(), &r, env.actions.len(), 0.9, 1e-14).unwrap();
        // each delta carries a few ulps of |Q| of rounding
        let rounding = 16.0 * f64::EPSILON * sol.q.sup_norm();
        for w in sol.deltas.windows(2) {
            assert!(w[1] <= (0.9 + 1e-9) * w[0] + rounding, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn scaling_rewards_scales_values_only() {
        let env = tiny_env(generate_transition_matrix(4, 0.5, 8).unwrap(), 8);
        let r = reward_table(env.channel.state_set(), &env.actions, env.precoder, &env.reward);
        let rows = env.channel.transitions().rows();
        let n = env.actions.len();
        let base = value_iteration(rows, &r, n, 0.9, 1e-13).unwrap();
        let scaled_r: Vec<f64> = r.iter().map(|x| 3.5 * x).collect();
        let scaled = value_iteration(rows, &scaled_r, n, 0.9, 1e-13).unwrap();
        assert_eq!(base.policy, scaled.policy);
        for (a, b) in base.q.values().iter().zip(scaled.q.values()) {
            assert!((3.5 * a - b).abs() <= 1e-9 * b.abs());
        }
    }

    #[test]
    fn learned_policy_matches_oracle_on_tiny_mdp() {
        let mut env = tiny_env(generate_transition_matrix(4, 0.5, 9).unwrap(), 9);
        let r = reward_table(env.channel.state_set(), &env.actions, env.precoder, &env.reward);
        let oracle = value_iteration(env.channel.transitions().rows(), &r, env.actions.len(), 0.9, 1e-12).unwrap();
        let schedules = Schedules::constant_epsilon(0.9, 0.2, BetaMode::VisitPower(0.6));
        let q = train(&mut env, &schedules, 1, 200_000, 11, |_| {}).unwrap();
        let cmp = compare_tables(&q, &oracle.q).unwrap();
        assert_eq!(cmp.policy_agreement, 1.0, "{cmp:?}");
        assert!(cmp.relative_gap <= 0.05, "{cmp:?}");
        // values never exceed r_max / (1 - gamma)
        let bound = env.reward_upper_bound() / 0.1;
        assert!(q.values().iter().all(|&v| v <= bound));
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut env = tiny_env(generate_transition_matrix(4, 0.5, 10).unwrap(), 10);
            let mut log = Vec::new();
            let q = train(&mut env, &Schedules::default(), 5, 300, 99, |m| log.push(m.clone())).unwrap();
            (q, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.windows(2).all(|w| (w[0].episode, w[0].iteration) < (w[1].episode, w[1].iteration)));
    }

    #[test]
    fn greedy_rollout_beats_random_policy() {
        let mut env = tiny_env(generate_transition_matrix(4, 0.5, 12).unwrap(), 12);
        let schedules = Schedules::constant_epsilon(0.9, 0.3, BetaMode::VisitPower(0.6));
        let q = train(&mut env, &schedules, 1, 50_000, 3, |_| {}).unwrap();
        let mut greedy = 0.0;
        evaluate_policy(&q, &mut env, 5000, 4, |m| greedy += m.reward);
        let n = env.actions.len();
        let mut random = 0.0;
        rollout(&mut env, 5000, 4, |_, rng| rng.random_range(0..n), |m| random += m.reward);
        assert!(greedy >= random, "{greedy} < {random}");
    }

    #[test]
    fn rollouts_are_deterministic_and_stationary_under_identity() {
        let mut env = tiny_env(TransitionMatrix::identity(4).unwrap(), 13);
        let q = train(&mut env, &Schedules::default(), 3, 200, 5, |_| {}).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        evaluate_policy(&q, &mut env, 300, 6, |m| a.push(m.clone()));
        evaluate_policy(&q, &mut env, 300, 6, |m| b.push(m.clone()));
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.action == a[0].action));
    }

    #[test]
    fn step_outcome_consistency() {
        let env = tiny_env(generate_transition_matrix(4, 0.5, 14).unwrap(), 14);
        for a in 0..env.actions.len() {
            let o = env.evaluate(0, a);
            let h = env.channel.state_matrix(0).unwrap();
            let p = env.actions.power_vector(a);
            let v = zf_precoder(h, &p).unwrap();
            let xi = sinrs(h, &p, &v, env.reward.noise_var).unwrap();
            assert_eq!(o.sinr, xi);
            let t: f64 = (0..4).map(|m| per_antenna_power(&p, &v, 2, m)).sum();
            assert!((o.total_power - t).abs() <= 1e-12);
            assert!((o.energy_efficiency - o.sum_rate / o.total_power).abs() <= 1e-9);
        }
    }

    #[test]
    fn qtable_persistence_checks_config_hash() {
        let mut q = QTable::new(2, 3);
        let s = Schedules::constant_epsilon(0.9, 0.0, BetaMode::VisitInverse);
        q_update(&mut q, 1, 2, 0.123456789, 0, &s);
        let text = q.to_json("abc").unwrap();
        assert_eq!(QTable::from_json(&text, "abc").unwrap(), q);
        assert!(matches!(
            QTable::from_json(&text, "xyz"),
            Err(RlError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn comparison_against_itself() {
        let q = QTable::from_values(2, 2, vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let cmp = compare_tables(&q, &q).unwrap();
        assert_eq!(cmp.sup_norm_gap, 0.0);
        assert_eq!(cmp.policy_agreement, 1.0);
    }
}
