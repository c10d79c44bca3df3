//! Config loading, experiment orchestration and the on-disk artifacts:
//! metrics.csv, summary.json, qtable.json, channel.json, oracle output and
//! plotting curves.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actions::{
    enumerate_reduced_capped, make_level_set, min_power_bound, ActionError, ActionSpace,
    DEFAULT_MAX_ACTIONS,
};
use crate::channel::{
    generate_state_set, generate_transition_matrix, ChannelError, ChannelRecord, ChannelStateSet,
    MarkovChannel, TransitionMatrix,
};
use crate::phy::PrecoderKind;
use crate::rl::{
    compare_tables, evaluate_policy, reward_table, train, value_iteration, BetaMode,
    EpsilonDecayMode, Environment, MetricsRecord, QTable, RewardParams, RlError, Schedules,
    TableComparison,
};

pub const DEFAULT_ORACLE_CELL_CAP: usize = 1_000_000;
pub const ORACLE_TOL: f64 = 1e-12;
/// Fraction of the run, counted from the end, that the summary describes.
pub const TAIL_FRACTION: f64 = 0.1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const QTABLE_FILE: &str = "qtable.json";
pub const CHANNEL_FILE: &str = "channel.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const ORACLE_QTABLE_FILE: &str = "q_star.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const ACTIONS_FILE: &str = "actions.csv";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("infeasible bounds: p_min = {p_min} exceeds M*P_T = {trace_cap}")]
    InfeasibleBounds { p_min: f64, trace_cap: f64 },
    #[error(
        "oracle needs {cells} table cells, above the cap of {cap}; use a desk-scale config \
         (fewer channel states or power levels) or raise oracle_cell_cap"
    )]
    OracleTooLarge { cells: usize, cap: usize },
    #[error("metrics file {0} has no data rows")]
    EmptyMetrics(PathBuf),
    #[error("metrics file: {0}")]
    MetricsFormat(String),
    #[error("window must be at least 1")]
    BadWindow,
    #[error(transparent)]
    Actions(#[from] ActionError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn field_err(field: &str, message: impl Into<String>) -> RunnerError {
    RunnerError::Field {
        field: field.to_owned(),
        message: message.into(),
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn default_self_bias() -> f64 {
    0.5
}

fn default_gamma() -> f64 {
    0.9
}

fn default_epsilon0() -> f64 {
    1.0
}

fn default_epsilon_decay() -> f64 {
    0.1
}

fn default_epsilon_floor() -> f64 {
    0.01
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Experiment configuration as stored on disk. Power quantities are in dB;
/// [`SimConfig::linear`] holds their linear values once the config has been
/// validated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub m_antennas: usize,
    pub k_users: usize,
    pub level_count: usize,
    pub p_per_max_db: f64,
    pub p_total_db: f64,
    /// One target per user.
    pub sinr_target_db: Vec<f64>,
    pub noise_var: f64,
    pub channel_cardinality: usize,
    #[serde(default = "default_self_bias")]
    pub self_bias: f64,
    pub precoder_kind: PrecoderKind,
    pub episodes: usize,
    pub iters_per_episode: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default = "default_epsilon_decay")]
    pub epsilon_decay: f64,
    #[serde(default)]
    pub epsilon_decay_mode: EpsilonDecayMode,
    #[serde(default = "default_epsilon_floor")]
    pub epsilon_floor: f64,
    #[serde(default)]
    pub beta_mode: BetaMode,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denom_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_actions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_cell_cap: Option<usize>,
    #[serde(skip)]
    pub linear: LinearParams,
}

/// Linear-scale values derived from the dB fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearParams {
    pub p_per_max: f64,
    pub p_total: f64,
    pub sinr_targets: Vec<f64>,
    /// `K M sigma^2 max_k xi_k`
    pub p_min: f64,
    /// `M P_T`
    pub trace_cap: f64,
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

/// Parses and validates a config document. Errors name the offending field.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<document>".to_owned() } else { path };
        field_err(&field, e.into_inner().to_string())
    })?;
    config.validated()
}

impl SimConfig {
    /// Checks every field and fills in [`SimConfig::linear`].
    pub fn validated(mut self) -> Result<Self> {
        let (m, k) = (self.m_antennas, self.k_users);
        if k == 0 {
            return Err(field_err("k_users", "must be at least 1"));
        }
        if m < k {
            return Err(field_err(
                "k_users",
                format!("{k} users exceed {m} antennas; zero-forcing needs M >= K"),
            ));
        }
        if self.level_count < 2 || self.level_count > u8::MAX as usize {
            return Err(field_err("level_count", format!("{} is outside 2..=255", self.level_count)));
        }
        for (name, v) in [("p_per_max_db", self.p_per_max_db), ("p_total_db", self.p_total_db)] {
            if !v.is_finite() {
                return Err(field_err(name, "must be finite"));
            }
        }
        if self.sinr_target_db.len() != k {
            return Err(field_err(
                "sinr_target_db",
                format!("expected {k} entries, found {}", self.sinr_target_db.len()),
            ));
        }
        if self.sinr_target_db.iter().any(|x| !x.is_finite()) {
            return Err(field_err("sinr_target_db", "entries must be finite"));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(field_err("noise_var", "must be positive"));
        }
        if self.channel_cardinality == 0 {
            return Err(field_err("channel_cardinality", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.self_bias) {
            return Err(field_err("self_bias", "must lie in [0, 1]"));
        }
        if let Some(f) = self.denom_floor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(field_err("denom_floor", "must be positive"));
            }
        }
        if self.max_actions == Some(0) {
            return Err(field_err("max_actions", "must be at least 1"));
        }
        self.schedules().validate().map_err(|e| {
            let field = match &e {
                RlError::BadGamma(_) => "gamma",
                RlError::BadSchedule(msg) if msg.contains("floor") => "epsilon_floor",
                RlError::BadSchedule(msg) if msg.contains("decay") => "epsilon_decay",
                RlError::BadSchedule(msg) if msg.contains("beta") || msg.contains("visit_power") => "beta_mode",
                _ => "epsilon0",
            };
            field_err(field, e.to_string())
        })?;

        let sinr_targets: Vec<f64> = self.sinr_target_db.iter().map(|&x| db_to_linear(x)).collect();
        let p_total = db_to_linear(self.p_total_db);
        let worst_target = sinr_targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p_min = min_power_bound(k, m, self.noise_var, worst_target);
        let trace_cap = m as f64 * p_total;
        if p_min > trace_cap {
            return Err(RunnerError::InfeasibleBounds { p_min, trace_cap });
        }
        self.linear = LinearParams {
            p_per_max: db_to_linear(self.p_per_max_db),
            p_total,
            sinr_targets,
            p_min,
            trace_cap,
        };
        Ok(self)
    }

    pub fn schedules(&self) -> Schedules {
        Schedules {
            gamma: self.gamma,
            epsilon0: self.epsilon0,
            epsilon_decay: self.epsilon_decay,
            decay_mode: self.epsilon_decay_mode,
            epsilon_floor: self.epsilon_floor,
            beta_mode: self.beta_mode,
        }
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            sinr_targets: self.linear.sinr_targets.clone(),
            noise_var: self.noise_var,
            denom_floor: self.denom_floor.unwrap_or(RewardParams::DEFAULT_DENOM_FLOOR),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.iters_per_episode
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        // serde_json maps are key-sorted, so this text is canonical
        let text = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Independent RNG streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    States = 1,
    Transitions = 2,
    Channel = 3,
    Agent = 4,
    Evaluation = 5,
}

/// splitmix64 finalizer over `seed` and the stream tag.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a run needs that is fixed by the config: the channel model and
/// the reduced action space.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: SimConfig,
    pub config_hash: String,
    pub states: ChannelStateSet,
    pub transitions: TransitionMatrix,
    pub actions: ActionSpace,
}

impl Experiment {
    pub fn build(config: SimConfig) -> Result<Self> {
        let c = &config;
        let levels = make_level_set(c.linear.p_per_max, c.level_count)?;
        let actions = enumerate_reduced_capped(
            &levels,
            c.m_antennas,
            c.k_users,
            c.linear.p_min,
            c.linear.p_total,
            c.max_actions.unwrap_or(DEFAULT_MAX_ACTIONS),
        )?;
        let states = generate_state_set(
            c.m_antennas,
            c.k_users,
            c.channel_cardinality,
            derive_seed(c.seed, Stream::States),
        )?;
        let transitions = generate_transition_matrix(
            c.channel_cardinality,
            c.self_bias,
            derive_seed(c.seed, Stream::Transitions),
        )?;
        Ok(Self {
            config_hash: config.config_hash(),
            config,
            states,
            transitions,
            actions,
        })
    }

    pub fn environment(&self) -> Result<Environment> {
        let channel = MarkovChannel::new(
            self.states.clone(),
            self.transitions.clone(),
            derive_seed(self.config.seed, Stream::Channel),
        )?;
        Ok(Environment {
            channel,
            actions: self.actions.clone(),
            precoder: self.config.precoder_kind,
            reward: self.config.reward_params(),
            p_per_max: self.config.linear.p_per_max,
        })
    }

    pub fn channel_record(&self) -> ChannelRecord {
        ChannelRecord {
            seed: self.config.seed,
            self_bias: self.config.self_bias,
            state_set: self.states.clone(),
            transitions: self.transitions.clone(),
        }
    }

    /// `tr(P) / M` of every action, the hardened estimate of transmit power.
    pub fn mean_action_powers(&self) -> Vec<f64> {
        let m = self.config.m_antennas as f64;
        (0..self.actions.len())
            .map(|a| self.actions.powers(a).iter().sum::<f64>() / m)
            .collect()
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }
}

pub fn metrics_header(k_users: usize) -> Vec<String> {
    let mut h: Vec<String> = ["episode", "iteration", "state", "action", "reward", "ee"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=k_users).map(|k| format!("sinr_db_user{k}")));
    h.extend(
        ["total_power", "per_antenna_violation", "epsilon"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Streams [`MetricsRecord`]s to CSV, keeping every `thin`-th row.
pub struct MetricsWriter {
    writer: csv::Writer<BufWriter<File>>,
    thin: usize,
    seen: usize,
    error: Option<csv::Error>,
}

impl MetricsWriter {
    pub fn create(path: &Path, k_users: usize, thin: usize) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(metrics_header(k_users))?;
        Ok(Self {
            writer,
            thin: thin.max(1),
            seen: 0,
            error: None,
        })
    }

    pub fn push(&mut self, r: &MetricsRecord) {
        let keep = self.seen.is_multiple_of(self.thin);
        self.seen += 1;
        if !keep || self.error.is_some() {
            return;
        }
        let mut row = vec![
            r.episode.to_string(),
            r.iteration.to_string(),
            r.state.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.energy_efficiency.to_string(),
        ];
        row.extend(r.sinr_db().iter().map(|x| x.to_string()));
        row.push(r.total_power.to_string());
        row.push(u8::from(r.per_antenna_violation).to_string());
        row.push(r.epsilon.to_string());
        if let Err(e) = self.writer.write_record(&row) {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.writer.flush().map_err(|e| RunnerError::Csv(e.into()))?;
        Ok(())
    }
}

/// Running statistics over the final [`TAIL_FRACTION`] of a run.
#[derive(Clone, Debug)]
pub struct TailStats {
    start: usize,
    seen: usize,
    count: usize,
    reward_sum: f64,
    qos_ok: usize,
    power_ok: usize,
    trace_power_ok: usize,
    mean_target_db: f64,
    p_total: f64,
}

impl TailStats {
    pub fn new(total_steps: usize, config: &SimConfig) -> Self {
        let tail = ((total_steps as f64 * TAIL_FRACTION).ceil() as usize).min(total_steps);
        let k = config.sinr_target_db.len() as f64;
        Self {
            start: total_steps - tail,
            seen: 0,
            count: 0,
            reward_sum: 0.0,
            qos_ok: 0,
            power_ok: 0,
            trace_power_ok: 0,
            mean_target_db: config.sinr_target_db.iter().sum::<f64>() / k,
            p_total: config.linear.p_total,
        }
    }

    pub fn push(&mut self, r: &MetricsRecord, mean_action_power: f64) {
        let idx = self.seen;
        self.seen += 1;
        if idx < self.start {
            return;
        }
        self.count += 1;
        self.reward_sum += r.reward;
        if !r.infeasible && r.mean_sinr_db() >= self.mean_target_db {
            self.qos_ok += 1;
        }
        if r.total_power <= self.p_total {
            self.power_ok += 1;
        }
        if mean_action_power <= self.p_total {
            self.trace_power_ok += 1;
        }
    }

    fn rate(&self, n: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            n as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub action_space_size: usize,
    /// Mean reward over the final tail of the run.
    pub final_avg_reward: f64,
    /// Fraction of tail steps whose mean per-user SINR (dB) meets the mean target.
    pub qos_satisfaction_rate: f64,
    /// Fraction of tail steps whose exact transmit power is within P_T.
    pub power_satisfaction_rate: f64,
    /// Fraction of tail steps with `tr(P)/M <= P_T`.
    pub trace_power_satisfaction_rate: f64,
    pub steps: usize,
    pub tail_steps: usize,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_s: f64,
}

impl Summary {
    fn from_tail(exp: &Experiment, steps: usize, tail: &TailStats, wall_time_s: f64) -> Self {
        Self {
            action_space_size: exp.actions.len(),
            final_avg_reward: if tail.count == 0 {
                0.0
            } else {
                tail.reward_sum / tail.count as f64
            },
            qos_satisfaction_rate: tail.rate(tail.qos_ok),
            power_satisfaction_rate: tail.rate(tail.power_ok),
            trace_power_satisfaction_rate: tail.rate(tail.trace_power_ok),
            steps,
            tail_steps: tail.count,
            seed: exp.config.seed,
            config_hash: exp.config_hash.clone(),
            wall_time_s,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every `thin`-th metrics row.
    pub thin: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { thin: 1 }
    }
}

/// Trains on `config` and writes metrics.csv, summary.json, qtable.json and
/// channel.json into `config.output_dir`.
pub fn run_train(config: &SimConfig, opts: RunOptions) -> Result<Summary> {
    let started = Instant::now();
    let exp = Experiment::build(config.clone())?;
    let dir = exp.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    exp.channel_record().save(&dir.join(CHANNEL_FILE))?;

    let mut env = exp.environment()?;
    let powers = exp.mean_action_powers();
    let steps = config.total_steps();
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE), config.k_users, opts.thin)?;
    let mut tail = TailStats::new(steps, config);
    let q = train(
        &mut env,
        &config.schedules(),
        config.episodes,
        config.iters_per_episode,
        derive_seed(config.seed, Stream::Agent),
        |r| {
            writer.push(r);
            tail.push(r, powers[r.action]);
        },
    )?;
    writer.finish()?;
    q.save(&dir.join(QTABLE_FILE), &exp.config_hash)?;

    let summary = Summary::from_tail(&exp, steps, &tail, started.elapsed().as_secs_f64());
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Greedy rollout of a saved table for `steps` slots. Writes metrics.csv and
/// summary.json into `config.output_dir`.
pub fn run_evaluate(config: &SimConfig, qtable: &Path, steps: usize, opts: RunOptions) -> Result<Summary> {
    let started = Instant::now();
    let exp = Experiment::build(config.clone())?;
    let q = QTable::load(qtable, &exp.config_hash)?;
    let dir = exp.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut env = exp.environment()?;
    let powers = exp.mean_action_powers();
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE), config.k_users, opts.thin)?;
    let mut tail = TailStats::new(steps, config);
    evaluate_policy(&q, &mut env, steps, derive_seed(config.seed, Stream::Evaluation), |r| {
        writer.push(r);
        tail.push(r, powers[r.action]);
    });
    writer.finish()?;

    let summary = Summary::from_tail(&exp, steps, &tail, started.elapsed().as_secs_f64());
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub config_hash: String,
    pub gamma: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub sweeps: usize,
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<TableComparison>,
}

/// Solves the Bellman optimality equations on the known chain. Writes
/// oracle.json (V*, pi*), q_star.json (Q*) and, when `qtable` is given,
/// comparison.json.
pub fn run_oracle(config: &SimConfig, qtable: Option<&Path>) -> Result<OracleReport> {
    let exp = Experiment::build(config.clone())?;
    let cells = exp.states.len() * exp.actions.len();
    let cap = config.oracle_cell_cap.unwrap_or(DEFAULT_ORACLE_CELL_CAP);
    if cells > cap {
        return Err(RunnerError::OracleTooLarge { cells, cap });
    }
    let learned = qtable
        .map(|p| QTable::load(p, &exp.config_hash))
        .transpose()?;

    let rewards = reward_table(&exp.states, &exp.actions, config.precoder_kind, &config.reward_params());
    let sol = value_iteration(exp.transitions.rows(), &rewards, exp.actions.len(), config.gamma, ORACLE_TOL)?;
    let comparison = learned.map(|q| compare_tables(&q, &sol.q)).transpose()?;

    let dir = exp.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    sol.q.save(&dir.join(ORACLE_QTABLE_FILE), &exp.config_hash)?;
    if let Some(c) = &comparison {
        write_json(&dir.join(COMPARISON_FILE), c)?;
    }
    let report = OracleReport {
        config_hash: exp.config_hash.clone(),
        gamma: config.gamma,
        n_states: exp.states.len(),
        n_actions: exp.actions.len(),
        sweeps: sol.sweeps,
        v: sol.v,
        policy: sol.policy,
        comparison,
    };
    write_json(&dir.join(ORACLE_FILE), &report)?;
    Ok(report)
}

/// Dumps the reduced action space as `action_index,p_1..p_M` (linear power).
pub fn write_actions(actions: &ActionSpace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["action_index".to_owned()];
    header.extend((1..=actions.m_antennas()).map(|m| format!("p_{m}")));
    w.write_record(&header)?;
    for a in 0..actions.len() {
        let mut row = vec![a.to_string()];
        row.extend(actions.powers(a).iter().map(|p| p.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn run_enumerate_actions(config: &SimConfig) -> Result<usize> {
    let exp = Experiment::build(config.clone())?;
    let dir = exp.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_actions(&exp.actions, &dir.join(ACTIONS_FILE))?;
    Ok(exp.actions.len())
}

/// Trailing moving average; the first `window - 1` points average what is
/// available so far.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            series[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Columns of a metrics file needed for the curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsSeries {
    pub reward: Vec<f64>,
    pub mean_sinr_db: Vec<f64>,
    pub total_power: Vec<f64>,
    pub k_users: usize,
}

pub fn read_metrics_series(path: &Path) -> Result<MetricsSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RunnerError::MetricsFormat(format!("missing column {name}")))
    };
    let reward = col("reward")?;
    let power = col("total_power")?;
    let sinr_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("sinr_db_user"))
        .map(|(i, _)| i)
        .collect();
    if sinr_cols.is_empty() {
        return Err(RunnerError::MetricsFormat("no sinr_db_user columns".into()));
    }
    let parse = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i]
            .parse::<f64>()
            .map_err(|e| RunnerError::MetricsFormat(format!("column {}: {e}", &headers[i])))
    };
    let mut out = MetricsSeries {
        k_users: sinr_cols.len(),
        ..Default::default()
    };
    for rec in rdr.records() {
        let rec = rec?;
        out.reward.push(parse(&rec, reward)?);
        out.total_power.push(parse(&rec, power)?);
        let mut s = 0.0;
        for &c in &sinr_cols {
            s += parse(&rec, c)?;
        }
        out.mean_sinr_db.push(s / sinr_cols.len() as f64);
    }
    if out.reward.is_empty() {
        return Err(RunnerError::EmptyMetrics(path.to_path_buf()));
    }
    Ok(out)
}

/// Moving averages of reward, mean SINR (dB) and total power (averaged in
/// linear scale, reported in dB), with the per-user SINR targets and P_T as
/// constant reference columns.
pub fn aggregate_curves(
    metrics_path: &Path,
    window: usize,
    sinr_target_db: &[f64],
    p_total_db: f64,
    out_path: &Path,
) -> Result<usize> {
    if window == 0 {
        return Err(RunnerError::BadWindow);
    }
    let series = read_metrics_series(metrics_path)?;
    if sinr_target_db.len() != series.k_users {
        return Err(RunnerError::MetricsFormat(format!(
            "{} sinr columns but {} targets",
            series.k_users,
            sinr_target_db.len()
        )));
    }
    let reward = moving_average(&series.reward, window);
    let sinr = moving_average(&series.mean_sinr_db, window);
    let power = moving_average(&series.total_power, window);

    let file = File::create(out_path).map_err(io_err(out_path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = ["step", "reward_avg", "sinr_db_avg", "total_power_db_avg"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=series.k_users).map(|k| format!("sinr_target_db_user{k}")));
    header.push("p_total_db".into());
    w.write_record(&header)?;
    for i in 0..reward.len() {
        let mut row = vec![
            i.to_string(),
            reward[i].to_string(),
            sinr[i].to_string(),
            linear_to_db(power[i]).to_string(),
        ];
        row.extend(sinr_target_db.iter().map(|x| x.to_string()));
        row.push(p_total_db.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(out_path))?;
    Ok(reward.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub runs: Vec<Summary>,
    pub mean_final_avg_reward: f64,
    pub mean_qos_satisfaction_rate: f64,
    pub mean_power_satisfaction_rate: f64,
}

/// Trains `runs` independent seeds (`seed`, `seed + 1`, ...) in parallel, each
/// into `<output_dir>/run_<i>`, then writes runs_summary.json.
pub fn run_train_many(config: &SimConfig, runs: usize, opts: RunOptions) -> Result<RunsSummary> {
    let base = config.output_dir.clone();
    let summaries = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i as u64);
            c.output_dir = base.join(format!("run_{i}"));
            run_train(&c, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = summaries.len().max(1) as f64;
    let mean = |f: fn(&Summary) -> f64| summaries.iter().map(f).sum::<f64>() / n;
    let all = RunsSummary {
        mean_final_avg_reward: mean(|s| s.final_avg_reward),
        mean_qos_satisfaction_rate: mean(|s| s.qos_satisfaction_rate),
        mean_power_satisfaction_rate: mean(|s| s.power_satisfaction_rate),
        runs: summaries,
    };
    std::fs::create_dir_all(&base).map_err(io_err(&base))?;
    write_json(&base.join("runs_summary.json"), &all)?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "m_antennas": 4,
            "k_users": 2,
            "level_count": 2,
            "p_per_max_db": 0.0,
            "p_total_db": 0.0,
            "sinr_target_db": [10.0, 10.0],
            "noise_var": 0.01,
            "channel_cardinality": 4,
            "precoder_kind": "zf",
            "episodes": 2,
            "iters_per_episode": 5,
            "seed": 7
        })
    }

    #[test]
    fn db_conversion() {
        assert_eq!(db_to_linear(30.0), 1000.0);
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(28.0) - 630.957_344_480_193_2).abs() < 1e-9);
        assert!((linear_to_db(db_to_linear(17.5)) - 17.5).abs() < 1e-12);
    }

    #[test]
    fn minimal_config_gets_defaults_and_linear_values() {
        let c = parse_config(&base_json().to_string()).unwrap();
        assert_eq!(c.gamma, 0.9);
        assert_eq!(c.epsilon0, 1.0);
        assert_eq!(c.self_bias, 0.5);
        assert_eq!(c.beta_mode, BetaMode::VisitPower(0.8));
        assert_eq!(c.linear.sinr_targets, vec![10.0, 10.0]);
        assert!((c.linear.p_min - 0.8).abs() < 1e-12);
        assert_eq!(c.linear.trace_cap, 4.0);
    }

    #[test]
    fn errors_name_the_field() {
        let mut v = base_json();
        v["k_users"] = serde_json::json!(5);
        v["sinr_target_db"] = serde_json::json!([1.0, 1.0, 1.0, 1.0, 1.0]);
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("k_users"), "{e}");

        let mut v = base_json();
        v["noise_var"] = serde_json::json!("loud");
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("noise_var"), "{e}");

        let mut v = base_json();
        v.as_object_mut().unwrap().remove("seed");
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");

        let mut v = base_json();
        v["colour"] = serde_json::json!("blue");
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");

        let mut v = base_json();
        v["sinr_target_db"] = serde_json::json!([10.0]);
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("sinr_target_db"), "{e}");

        let mut v = base_json();
        v["gamma"] = serde_json::json!(1.0);
        let e = parse_config(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("gamma"), "{e}");
    }

    #[test]
    fn infeasible_bounds_cite_both_values() {
        let mut v = base_json();
        v["sinr_target_db"] = serde_json::json!([30.0, 20.0]);
        match parse_config(&v.to_string()) {
            Err(RunnerError::InfeasibleBounds { p_min, trace_cap }) => {
                // 2 * 4 * 0.01 * 1000
                assert!((p_min - 80.0).abs() < 1e-9);
                assert_eq!(trace_cap, 4.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = parse_config(&base_json().to_string()).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn streams_are_distinct() {
        let streams = [
            Stream::States,
            Stream::Transitions,
            Stream::Channel,
            Stream::Agent,
            Stream::Evaluation,
        ];
        let seeds: std::collections::BTreeSet<u64> =
            streams.iter().map(|&s| derive_seed(42, s)).collect();
        assert_eq!(seeds.len(), streams.len());
        assert_ne!(derive_seed(42, Stream::Agent), derive_seed(43, Stream::Agent));
    }

    #[test]
    fn moving_average_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&x, 1), x.to_vec());
        assert_eq!(moving_average(&x, 2), vec![1.0, 1.5, 2.5, 3.5]);
        for y in moving_average(&[0.3; 200], 7) {
            assert!((y - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn metrics_header_layout() {
        assert_eq!(
            metrics_header(2).join(","),
            "episode,iteration,state,action,reward,ee,sinr_db_user1,sinr_db_user2,total_power,per_antenna_violation,epsilon"
        );
    }
}
