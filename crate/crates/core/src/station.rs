//! Emulated station devices: on-board beacons that follow a vehicle's GPS
//! position, and turnstile beacons that also gate passage on server
//! authorization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, GeoPoint, ServiceKind, StationId, Timestamp};

pub const DEFAULT_ADVERTISING_INTERVAL_S: i64 = 1;
pub const DEFAULT_TX_POWER_DBM: f64 = -59.0;
pub const DEFAULT_STALENESS_WINDOW_S: i64 = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StationError {
    #[error("advertisement requested at {now}, next slot is {next_at}")]
    TooEarly { now: Timestamp, next_at: Timestamp },
    #[error("station {0} is not a turnstile")]
    NotTurnstile(StationId),
    #[error(transparent)]
    InvalidFix(#[from] DomainError),
    #[error("advertising interval must be positive")]
    BadInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationMode {
    OnBoard,
    Turnstile,
}

impl From<StationMode> for ServiceKind {
    fn from(m: StationMode) -> Self {
        match m {
            StationMode::OnBoard => ServiceKind::OnBoard,
            StationMode::Turnstile => ServiceKind::Turnstile,
        }
    }
}

/// What a station broadcasts once per advertising interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advertisement {
    pub station_id: StationId,
    pub mode: StationMode,
    pub location: GeoPoint,
    pub seq: u64,
    pub emitted_at: Timestamp,
    pub tx_power_dbm: f64,
    pub stale: bool,
}

/// Station configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub station_id: StationId,
    pub mode: StationMode,
    #[serde(default = "default_interval")]
    pub interval: i64,
    #[serde(default = "default_tx_power")]
    pub tx_power: f64,
    pub initial_fix: GeoPoint,
}

fn default_interval() -> i64 {
    DEFAULT_ADVERTISING_INTERVAL_S
}

fn default_tx_power() -> f64 {
    DEFAULT_TX_POWER_DBM
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationState {
    pub station_id: StationId,
    pub mode: StationMode,
    pub last_fix: GeoPoint,
    pub last_fix_at: Timestamp,
    pub advertising_interval_s: i64,
    pub staleness_window_s: i64,
    pub seq: u64,
    pub tx_power_dbm: f64,
    last_emitted_at: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authorization {
    Granted,
    Denied,
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Open,
    KeepClosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCommand {
    pub decision: GateDecision,
    pub reason: String,
}

impl StationState {
    pub fn from_config(cfg: &StationConfig, at: Timestamp) -> Result<Self, StationError> {
        if cfg.interval <= 0 {
            return Err(StationError::BadInterval);
        }
        cfg.initial_fix.validate()?;
        Ok(Self {
            station_id: cfg.station_id.clone(),
            mode: cfg.mode,
            last_fix: cfg.initial_fix,
            last_fix_at: at,
            advertising_interval_s: cfg.interval,
            staleness_window_s: DEFAULT_STALENESS_WINDOW_S,
            seq: 0,
            tx_power_dbm: cfg.tx_power,
            last_emitted_at: None,
        })
    }

    pub fn next_slot(&self) -> Option<Timestamp> {
        self.last_emitted_at
            .map(|t| t.plus(self.advertising_interval_s))
    }

    pub fn next_advertisement(&mut self, now: Timestamp) -> Result<Advertisement, StationError> {
        if let Some(next_at) = self.next_slot() {
            if now < next_at {
                return Err(StationError::TooEarly { now, next_at });
            }
        }
        self.seq += 1;
        self.last_emitted_at = Some(now);
        Ok(Advertisement {
            station_id: self.station_id.clone(),
            mode: self.mode,
            location: self.last_fix,
            seq: self.seq,
            emitted_at: now,
            tx_power_dbm: self.tx_power_dbm,
            stale: now.since(self.last_fix_at) > self.staleness_window_s,
        })
    }

    /// Applies a GPS fix. Fixes older than the current one are ignored.
    pub fn update_location(&mut self, fix: GeoPoint, at: Timestamp) -> Result<(), StationError> {
        fix.validate()?;
        if at < self.last_fix_at {
            return Ok(());
        }
        self.last_fix = fix;
        self.last_fix_at = at;
        Ok(())
    }

    /// Maps the server's answer to a gate action. Anything but an explicit
    /// grant keeps the gate closed.
    pub fn handle_open_request(&self, authorization: Authorization) -> Result<GateCommand, StationError> {
        if self.mode != StationMode::Turnstile {
            return Err(StationError::NotTurnstile(self.station_id.clone()));
        }
        let (decision, reason) = match authorization {
            Authorization::Granted => (GateDecision::Open, "granted"),
            Authorization::Denied => (GateDecision::KeepClosed, "denied"),
            Authorization::Unreachable => (GateDecision::KeepClosed, "fail-closed"),
        };
        Ok(GateCommand {
            decision,
            reason: reason.to_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StationEvent {
    Tick(Timestamp),
    GpsFix(GeoPoint, Timestamp),
    OpenRequest(Authorization),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StationOutput {
    Advertise(Advertisement),
    Gate(GateCommand),
}

/// Single-threaded event loop around a [`StationState`].
#[derive(Debug, Clone)]
pub struct Station {
    state: StationState,
}

impl Station {
    pub fn new(state: StationState) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &StationState {
        &self.state
    }

    pub fn id(&self) -> &StationId {
        &self.state.station_id
    }

    pub fn handle(&mut self, event: StationEvent) -> Result<Option<StationOutput>, StationError> {
        match event {
            StationEvent::Tick(now) => match self.state.next_slot() {
                Some(next) if now < next => Ok(None),
                _ => self.state.next_advertisement(now).map(|a| Some(StationOutput::Advertise(a))),
            },
            StationEvent::GpsFix(fix, at) => {
                self.state.update_location(fix, at)?;
                Ok(None)
            }
            StationEvent::OpenRequest(auth) => self
                .state
                .handle_open_request(auth)
                .map(|g| Some(StationOutput::Gate(g))),
        }
    }
}
