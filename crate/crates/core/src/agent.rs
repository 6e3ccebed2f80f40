//! Background rider application.
//!
//! The agent reacts only to three things: advertisements heard over the
//! radio, the passage of time, and answers from the server or a turnstile.
//! There is no entry point for a rider gesture; everything after
//! registration is driven by [`AgentInput`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GeoPoint, ServiceKind, SessionId, StationId, Timestamp, UserId};
use crate::station::{Advertisement, GateCommand, GateDecision, StationMode};

pub const DEFAULT_RSSI_THRESHOLD_DBM: f64 = -75.0;
pub const DEFAULT_SAMPLE_PERIOD_S: i64 = 5;
pub const DEFAULT_LOSS_TIMEOUT_S: i64 = 30;
pub const DEFAULT_GATE_COOLDOWN_S: i64 = 60;
/// Below this distance the log-distance model is not meaningful.
pub const MIN_DISTANCE_M: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid proximity config: {0}")]
    Config(&'static str),
    #[error("invalid path-loss model: {0}")]
    Model(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityConfig {
    pub rssi_threshold_dbm: f64,
    pub sample_period_s: i64,
    pub loss_timeout_s: i64,
    /// Advertisements from a gate just passed are ignored for this long.
    #[serde(default = "default_cooldown")]
    pub gate_cooldown_s: i64,
}

fn default_cooldown() -> i64 {
    DEFAULT_GATE_COOLDOWN_S
}

impl Default for ProximityConfig {
    fn default() -> Self {
        Self {
            rssi_threshold_dbm: DEFAULT_RSSI_THRESHOLD_DBM,
            sample_period_s: DEFAULT_SAMPLE_PERIOD_S,
            loss_timeout_s: DEFAULT_LOSS_TIMEOUT_S,
            gate_cooldown_s: DEFAULT_GATE_COOLDOWN_S,
        }
    }
}

impl ProximityConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.sample_period_s <= 0 {
            return Err(AgentError::Config("sample_period must be positive"));
        }
        if self.loss_timeout_s <= self.sample_period_s {
            return Err(AgentError::Config("loss_timeout must exceed sample_period"));
        }
        if !self.rssi_threshold_dbm.is_finite() {
            return Err(AgentError::Config("threshold must be finite"));
        }
        if self.gate_cooldown_s < 0 {
            return Err(AgentError::Config("gate cooldown must be non-negative"));
        }
        Ok(())
    }
}

/// Log-distance path loss with optional Gaussian shadowing:
/// `rssi = tx_power - 10 n log10(d) + noise`.
#[derive(Debug, Clone)]
pub struct PathLossModel {
    pub tx_power_dbm: f64,
    pub exponent: f64,
    pub noise_sigma_dbm: f64,
    pub seed: u64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl PathLossModel {
    pub fn new(tx_power_dbm: f64, exponent: f64, noise_sigma_dbm: f64, seed: u64) -> Result<Self, AgentError> {
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(AgentError::Model("exponent must be positive"));
        }
        if !(noise_sigma_dbm >= 0.0 && noise_sigma_dbm.is_finite()) {
            return Err(AgentError::Model("noise sigma must be non-negative"));
        }
        let noise = if noise_sigma_dbm > 0.0 {
            Some(Normal::new(0.0, noise_sigma_dbm).map_err(|_| AgentError::Model("bad sigma"))?)
        } else {
            None
        };
        Ok(Self {
            tx_power_dbm,
            exponent,
            noise_sigma_dbm,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
        })
    }

    pub fn rssi_from_distance(&mut self, distance_m: f64) -> f64 {
        self.rssi_with_tx(self.tx_power_dbm, distance_m)
    }

    /// Same as [`rssi_from_distance`](Self::rssi_from_distance) but with the
    /// reference power announced by the transmitter.
    pub fn rssi_with_tx(&mut self, tx_power_dbm: f64, distance_m: f64) -> f64 {
        let d = distance_m.max(MIN_DISTANCE_M);
        let mean = tx_power_dbm - 10.0 * self.exponent * d.log10();
        match &self.noise {
            Some(n) => mean + n.sample(&mut self.rng),
            None => mean,
        }
    }

    /// Distance at which the noiseless signal equals `threshold_dbm`.
    pub fn range_m(&self, tx_power_dbm: f64, threshold_dbm: f64) -> f64 {
        10f64.powf((tx_power_dbm - threshold_dbm) / (10.0 * self.exponent))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssiSample {
    pub station_id: StationId,
    pub rssi_dbm: f64,
    pub at: Timestamp,
    pub advertisement: Advertisement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proximity {
    InRange,
    OutOfRange,
}

pub fn classify(sample: &RssiSample, config: &ProximityConfig) -> Proximity {
    if sample.rssi_dbm >= config.rssi_threshold_dbm {
        Proximity::InRange
    } else {
        Proximity::OutOfRange
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDirection {
    Entry,
    Exit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSession {
    /// Unknown until the server acknowledges the start.
    pub session_id: Option<SessionId>,
    pub station_id: StationId,
    pub kind: ServiceKind,
    pub started_at: Timestamp,
    pub last_in_range_at: Timestamp,
    pub last_report_at: Timestamp,
    /// Index of the next window to report; window `k` closes at
    /// `started_at + k * sample_period`.
    pub next_window: u32,
    pub missed_windows: u32,
    pending: Option<RssiSample>,
}

impl ActiveSession {
    fn window_due(&self, window: u32, period: i64) -> Timestamp {
        self.started_at.plus(window as i64 * period)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    Idle,
    InSession(ActiveSession),
    AwaitingTurnstile {
        direction: GateDirection,
        station_id: StationId,
        session: Option<ActiveSession>,
    },
}

/// Requests the agent wants sent. Session-scoped actions carry the id the
/// server assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ProtocolAction {
    StartSession {
        station_id: StationId,
        advertisement: Advertisement,
        rssi_dbm: f64,
        at: Timestamp,
        sample_period_s: i64,
    },
    UpdateSession {
        session_id: Option<SessionId>,
        window_index: u32,
        rssi_dbm: f64,
        location: GeoPoint,
        at: Timestamp,
    },
    MissingData {
        session_id: Option<SessionId>,
        window_index: u32,
        missed_windows: u32,
        at: Timestamp,
    },
    EndSession {
        session_id: Option<SessionId>,
        at: Timestamp,
    },
    OpenRequest {
        station_id: StationId,
        direction: GateDirection,
        session_id: Option<SessionId>,
        at: Timestamp,
    },
}

impl ProtocolAction {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolAction::StartSession { .. } => "start_session",
            ProtocolAction::UpdateSession { .. } => "update_session",
            ProtocolAction::MissingData { .. } => "missing_data",
            ProtocolAction::EndSession { .. } => "end_session",
            ProtocolAction::OpenRequest { .. } => "open_request",
        }
    }
}

/// Where an agent input comes from. There is deliberately no variant for
/// the rider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputOrigin {
    Radio,
    Clock,
    Server,
    Station,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentInput {
    Heard(RssiSample),
    Clock(Timestamp),
    SessionStarted {
        session_id: SessionId,
        kind: ServiceKind,
    },
    SessionStartFailed,
    Gate(GateCommand, Timestamp),
}

impl AgentInput {
    pub fn origin(&self) -> InputOrigin {
        match self {
            AgentInput::Heard(_) => InputOrigin::Radio,
            AgentInput::Clock(_) => InputOrigin::Clock,
            AgentInput::SessionStarted { .. } | AgentInput::SessionStartFailed => InputOrigin::Server,
            AgentInput::Gate(..) => InputOrigin::Station,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub user_id: UserId,
    pub phase: Phase,
    pub config: ProximityConfig,
    last_gate: Option<(StationId, Timestamp)>,
}

impl AgentState {
    pub fn new(user_id: UserId, config: ProximityConfig) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self {
            user_id,
            phase: Phase::Idle,
            config,
            last_gate: None,
        })
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.phase, Phase::Idle)
    }

    pub fn handle(&mut self, input: AgentInput) -> Vec<ProtocolAction> {
        match input {
            AgentInput::Heard(sample) => {
                if sample.advertisement.mode == StationMode::Turnstile {
                    if classify(&sample, &self.config) == Proximity::InRange {
                        let now = sample.at;
                        self.turnstile_flow(&sample, now)
                    } else {
                        Vec::new()
                    }
                } else {
                    self.observe(&sample).into_iter().collect()
                }
            }
            AgentInput::Clock(now) => self.tick(now).into_iter().collect(),
            AgentInput::SessionStarted { session_id, kind } => {
                self.session_started(session_id, kind);
                Vec::new()
            }
            AgentInput::SessionStartFailed => {
                self.session_start_failed();
                Vec::new()
            }
            AgentInput::Gate(cmd, at) => {
                self.gate_result(&cmd, at);
                Vec::new()
            }
        }
    }

    /// Processes one on-board advertisement.
    pub fn observe(&mut self, sample: &RssiSample) -> Option<ProtocolAction> {
        if sample.advertisement.mode == StationMode::Turnstile {
            return None;
        }
        let in_range = classify(sample, &self.config) == Proximity::InRange;
        let period = self.config.sample_period_s;
        match &mut self.phase {
            Phase::Idle if in_range => {
                let at = sample.at;
                self.phase = Phase::InSession(ActiveSession {
                    session_id: None,
                    station_id: sample.station_id.clone(),
                    kind: ServiceKind::OnBoard,
                    started_at: at,
                    last_in_range_at: at,
                    last_report_at: at,
                    next_window: 1,
                    missed_windows: 0,
                    pending: None,
                });
                Some(ProtocolAction::StartSession {
                    station_id: sample.station_id.clone(),
                    advertisement: sample.advertisement.clone(),
                    rssi_dbm: sample.rssi_dbm,
                    at,
                    sample_period_s: period,
                })
            }
            Phase::InSession(s) if in_range && s.station_id == sample.station_id && s.kind == ServiceKind::OnBoard => {
                s.last_in_range_at = sample.at;
                s.pending = Some(sample.clone());
                if sample.at >= s.window_due(s.next_window, period) {
                    Some(report_pending(s, period, sample.at))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// Advances the clock for an on-board session: reports closed windows
    /// and ends the session once the station has been out of range for
    /// `loss_timeout`.
    pub fn tick(&mut self, now: Timestamp) -> Option<ProtocolAction> {
        let period = self.config.sample_period_s;
        let timeout = self.config.loss_timeout_s;
        let Phase::InSession(s) = &mut self.phase else {
            return None;
        };
        if s.kind != ServiceKind::OnBoard {
            return None;
        }
        if now.since(s.last_in_range_at) >= timeout {
            let session_id = s.session_id.clone();
            self.phase = Phase::Idle;
            return Some(ProtocolAction::EndSession { session_id, at: now });
        }
        if now < s.window_due(s.next_window, period) {
            return None;
        }
        if s.pending.is_some() {
            return Some(report_pending(s, period, now));
        }
        // every window closed by `now` with nothing heard in it
        let latest = (now.since(s.started_at) / period) as u32;
        let skipped = latest - s.next_window + 1;
        s.missed_windows += skipped;
        s.next_window = latest + 1;
        s.last_report_at = now;
        Some(ProtocolAction::MissingData {
            session_id: s.session_id.clone(),
            window_index: latest,
            missed_windows: s.missed_windows,
            at: now,
        })
    }

    /// Gate interaction when a turnstile station is in range.
    pub fn turnstile_flow(&mut self, sample: &RssiSample, now: Timestamp) -> Vec<ProtocolAction> {
        let station = &sample.advertisement.station_id;
        if let Some((last, at)) = &self.last_gate {
            if last == station && now.since(*at) < self.config.gate_cooldown_s {
                return Vec::new();
            }
        }
        match &self.phase {
            Phase::Idle => {
                let session = ActiveSession {
                    session_id: None,
                    station_id: station.clone(),
                    kind: ServiceKind::Turnstile,
                    started_at: now,
                    last_in_range_at: now,
                    last_report_at: now,
                    next_window: 1,
                    missed_windows: 0,
                    pending: None,
                };
                self.phase = Phase::AwaitingTurnstile {
                    direction: GateDirection::Entry,
                    station_id: station.clone(),
                    session: Some(session),
                };
                vec![
                    ProtocolAction::StartSession {
                        station_id: station.clone(),
                        advertisement: sample.advertisement.clone(),
                        rssi_dbm: sample.rssi_dbm,
                        at: now,
                        sample_period_s: self.config.sample_period_s,
                    },
                    ProtocolAction::OpenRequest {
                        station_id: station.clone(),
                        direction: GateDirection::Entry,
                        session_id: None,
                        at: now,
                    },
                ]
            }
            Phase::InSession(s) if s.kind == ServiceKind::Turnstile => {
                let period = self.config.sample_period_s;
                let session_id = s.session_id.clone();
                let window_index = ((now.since(s.started_at) / period) as u32).max(1);
                let actions = vec![
                    ProtocolAction::UpdateSession {
                        session_id: session_id.clone(),
                        window_index,
                        rssi_dbm: sample.rssi_dbm,
                        location: sample.advertisement.location,
                        at: now,
                    },
                    ProtocolAction::EndSession {
                        session_id: session_id.clone(),
                        at: now,
                    },
                    ProtocolAction::OpenRequest {
                        station_id: station.clone(),
                        direction: GateDirection::Exit,
                        session_id,
                        at: now,
                    },
                ];
                self.phase = Phase::AwaitingTurnstile {
                    direction: GateDirection::Exit,
                    station_id: station.clone(),
                    session: None,
                };
                actions
            }
            _ => Vec::new(),
        }
    }

    fn session_started(&mut self, session_id: SessionId, kind: ServiceKind) {
        match &mut self.phase {
            Phase::InSession(s) => {
                s.session_id = Some(session_id);
                s.kind = kind;
            }
            Phase::AwaitingTurnstile {
                session: Some(s), ..
            } => {
                s.session_id = Some(session_id);
                s.kind = kind;
            }
            _ => {}
        }
    }

    fn session_start_failed(&mut self) {
        match &mut self.phase {
            Phase::InSession(_) => self.phase = Phase::Idle,
            Phase::AwaitingTurnstile { session, .. } => *session = None,
            Phase::Idle => {}
        }
    }

    fn gate_result(&mut self, cmd: &GateCommand, at: Timestamp) {
        let Phase::AwaitingTurnstile {
            direction,
            station_id,
            session,
        } = &mut self.phase
        else {
            return;
        };
        self.last_gate = Some((station_id.clone(), at));
        let next = match (direction, cmd.decision, session.take()) {
            (GateDirection::Entry, GateDecision::Open, Some(s)) if s.session_id.is_some() => Phase::InSession(s),
            _ => Phase::Idle,
        };
        self.phase = next;
    }
}

fn report_pending(s: &mut ActiveSession, period: i64, now: Timestamp) -> ProtocolAction {
    let sample = s.pending.take().expect("caller checked pending");
    let window_index = ((now.since(s.started_at) / period) as u32).max(s.next_window);
    s.next_window = window_index + 1;
    s.missed_windows = 0;
    s.last_report_at = now;
    ProtocolAction::UpdateSession {
        session_id: s.session_id.clone(),
        window_index,
        rssi_dbm: sample.rssi_dbm,
        location: sample.advertisement.location,
        at: now,
    }
}
