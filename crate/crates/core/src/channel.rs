//! Finite-state Markov channel: a fixed pool of M×K channel matrices and a
//! row-stochastic transition matrix that is never exposed to the learner.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::linalg::CMatrix;

/// Row-sum tolerance for a [`TransitionMatrix`].
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("need m_antennas >= k_users >= 1, got M={m}, K={k}")]
    BadDimensions { m: usize, k: usize },
    #[error("channel cardinality must be at least 1")]
    EmptyStateSet,
    #[error("self_bias must lie in [0, 1], got {0}")]
    BadSelfBias(f64),
    #[error("transition row {row} is not a probability vector (sum {sum}, min {min})")]
    NotStochastic { row: usize, sum: f64, min: f64 },
    #[error("transition matrix is {rows}x{cols} but there are {states} states")]
    SizeMismatch {
        rows: usize,
        cols: usize,
        states: usize,
    },
    #[error("state index {index} out of range for {len} states")]
    StateOutOfRange { index: usize, len: usize },
    #[error("state {index} has shape {got:?}, expected {expected:?}")]
    InconsistentState {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("channel file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// The Markov states: |H| channel matrices of identical shape M×K.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStateSet {
    m_antennas: usize,
    k_users: usize,
    states: Vec<CMatrix>,
}

impl ChannelStateSet {
    pub fn new(states: Vec<CMatrix>) -> Result<Self> {
        let first = states.first().ok_or(ChannelError::EmptyStateSet)?;
        let (m, k) = first.shape();
        if k == 0 || m < k {
            return Err(ChannelError::BadDimensions { m, k });
        }
        for (index, s) in states.iter().enumerate() {
            if s.shape() != (m, k) {
                return Err(ChannelError::InconsistentState {
                    index,
                    got: s.shape(),
                    expected: (m, k),
                });
            }
            if !s.is_finite() {
                return Err(ChannelError::Format(format!("state {index} has non-finite entries")));
            }
        }
        Ok(Self {
            m_antennas: m,
            k_users: k,
            states,
        })
    }

    pub fn m_antennas(&self) -> usize {
        self.m_antennas
    }

    pub fn k_users(&self) -> usize {
        self.k_users
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, idx: usize) -> Result<&CMatrix> {
        self.states.get(idx).ok_or(ChannelError::StateOutOfRange {
            index: idx,
            len: self.states.len(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &CMatrix> {
        self.states.iter()
    }
}

/// Draws `cardinality` matrices with i.i.d. CN(0, 1) entries.
pub fn generate_state_set(
    m: usize,
    k: usize,
    cardinality: usize,
    seed: u64,
) -> Result<ChannelStateSet> {
    if k == 0 || m < k {
        return Err(ChannelError::BadDimensions { m, k });
    }
    if cardinality == 0 {
        return Err(ChannelError::EmptyStateSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let states = (0..cardinality)
        .map(|_| {
            CMatrix::from_fn(m, k, |_, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * scale, im * scale)
            })
        })
        .collect();
    ChannelStateSet::new(states)
}

/// Row-stochastic |H|×|H| matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Validates that every row is a probability vector.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(ChannelError::EmptyStateSet);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ChannelError::SizeMismatch {
                    rows: n,
                    cols: row.len(),
                    states: n,
                });
            }
            let sum: f64 = row.iter().sum();
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            if !(min >= 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ChannelError::NotStochastic { row: i, sum, min });
            }
        }
        Ok(Self { rows })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_rows(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Inverse-CDF sample from row `from` given one uniform draw in [0, 1).
    pub fn sample_next(&self, from: usize, u: f64) -> usize {
        let row = &self.rows[from];
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(from)
    }

    /// Stationary distribution by power iteration from the uniform vector.
    pub fn stationary_distribution(&self, max_iters: usize, tol: f64) -> Vec<f64> {
        let n = self.len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..max_iters {
            let mut next = vec![0.0; n];
            for (i, row) in self.rows.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < tol {
                break;
            }
        }
        pi
    }
}

/// Biased-diagonal random stochastic matrix: each row keeps `self_bias` on
/// the diagonal and spreads the rest over the other states in proportion to
/// positive uniform weights.
pub fn generate_transition_matrix(
    cardinality: usize,
    self_bias: f64,
    seed: u64,
) -> Result<TransitionMatrix> {
    if cardinality == 0 {
        return Err(ChannelError::EmptyStateSet);
    }
    if !(0.0..=1.0).contains(&self_bias) {
        return Err(ChannelError::BadSelfBias(self_bias));
    }
    if cardinality == 1 {
        return TransitionMatrix::from_rows(vec![vec![1.0]]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..cardinality)
        .map(|i| {
            // weights in (0, 1]
            let weights: Vec<f64> = (0..cardinality)
                .map(|j| if j == i { 0.0 } else { 1.0 - rng.random::<f64>() })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut row: Vec<f64> = weights
                .iter()
                .map(|w| (1.0 - self_bias) * w / total)
                .collect();
            row[i] = self_bias;
            row
        })
        .collect();
    TransitionMatrix::from_rows(rows)
}

/// A running chain. Owns its RNG, so it is single-owner mutable state.
#[derive(Clone, Debug)]
pub struct MarkovChannel {
    state_set: ChannelStateSet,
    transitions: TransitionMatrix,
    current: usize,
    rng: ChaCha8Rng,
}

impl MarkovChannel {
    /// Starts the chain in a uniformly random state drawn from `seed`.
    pub fn new(
        state_set: ChannelStateSet,
        transitions: TransitionMatrix,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..state_set.len().max(1));
        Self::with_initial_state(state_set, transitions, start, rng)
    }

    pub fn with_initial_state(
        state_set: ChannelStateSet,
        transitions: TransitionMatrix,
        start: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if transitions.len() != state_set.len() {
            return Err(ChannelError::SizeMismatch {
                rows: transitions.len(),
                cols: transitions.len(),
                states: state_set.len(),
            });
        }
        if start >= state_set.len() {
            return Err(ChannelError::StateOutOfRange {
                index: start,
                len: state_set.len(),
            });
        }
        Ok(Self {
            state_set,
            transitions,
            current: start,
            rng,
        })
    }

    pub fn current_state(&self) -> usize {
        self.current
    }

    /// Restarts the RNG from `seed` and redraws the initial state, exactly
    /// as [`MarkovChannel::new`] would.
    pub fn reseed(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.current = rng.random_range(0..self.state_set.len());
        self.rng = rng;
    }

    pub fn num_states(&self) -> usize {
        self.state_set.len()
    }

    pub fn state_set(&self) -> &ChannelStateSet {
        &self.state_set
    }

    /// The hidden dynamics. Only oracles and diagnostics should read this.
    pub fn transitions(&self) -> &TransitionMatrix {
        &self.transitions
    }

    /// Advances one slot using exactly one uniform draw.
    pub fn step(&mut self) -> usize {
        let u: f64 = self.rng.random();
        self.current = self.transitions.sample_next(self.current, u);
        self.current
    }

    pub fn state_matrix(&self, idx: usize) -> Result<&CMatrix> {
        self.state_set.get(idx)
    }

    pub fn current_matrix(&self) -> &CMatrix {
        &self.state_set.states[self.current]
    }
}

/// On-disk form of a channel: shapes, provenance, states and transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRecord {
    pub seed: u64,
    pub self_bias: f64,
    pub state_set: ChannelStateSet,
    pub transitions: TransitionMatrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelFile<N> {
    m_antennas: usize,
    k_users: usize,
    cardinality: usize,
    seed: u64,
    self_bias: f64,
    /// states[s][row][col] = [re, im]
    states: Vec<Vec<Vec<[N; 2]>>>,
    transitions: Vec<Vec<N>>,
}

/// 17 significant digits, enough to round-trip any f64.
fn num17(x: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{x:.16e}")).expect("formatted float is valid JSON")
}

impl ChannelRecord {
    pub fn to_json(&self) -> Result<String> {
        let set = &self.state_set;
        let file = ChannelFile {
            m_antennas: set.m_antennas(),
            k_users: set.k_users(),
            cardinality: set.len(),
            seed: self.seed,
            self_bias: self.self_bias,
            states: set
                .iter()
                .map(|h| {
                    (0..h.rows())
                        .map(|r| {
                            h.row(r)
                                .iter()
                                .map(|z| [num17(z.re), num17(z.im)])
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            transitions: self
                .transitions
                .rows()
                .iter()
                .map(|row| row.iter().map(|&p| num17(p)).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ChannelFile<f64> = serde_json::from_str(text)?;
        if file.states.len() != file.cardinality {
            return Err(ChannelError::Format(format!(
                "cardinality {} but {} states",
                file.cardinality,
                file.states.len()
            )));
        }
        let states = file
            .states
            .iter()
            .map(|rows| {
                if rows.len() != file.m_antennas || rows.iter().any(|r| r.len() != file.k_users) {
                    return Err(ChannelError::Format("state shape does not match M x K".into()));
                }
                let data = rows
                    .iter()
                    .flatten()
                    .map(|[re, im]| Complex64::new(*re, *im))
                    .collect();
                CMatrix::from_vec(file.m_antennas, file.k_users, data)
                    .map_err(|e| ChannelError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let state_set = ChannelStateSet::new(states)?;
        let transitions = TransitionMatrix::from_rows(file.transitions)?;
        if transitions.len() != state_set.len() {
            return Err(ChannelError::SizeMismatch {
                rows: transitions.len(),
                cols: transitions.len(),
                states: state_set.len(),
            });
        }
        Ok(Self {
            seed: file.seed,
            self_bias: file.self_bias,
            state_set,
            transitions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
