//! Per-service session handling: ongoing sessions in memory, post-ride
//! skimming, fares, and archival of validated rides.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    haversine_distance, BeaconLogEntry, FarePlan, GeoPoint, Money, ServiceKind, SessionId, SessionPayment,
    SessionState, StationId, Timestamp, TransportService, User, UserId, UserSession,
};
use crate::privacy::envelope::random_key_suffix;
use crate::privacy::{generalize, AnonymizedSessionRecord, EnvelopeError, PrivacyError, SealedKv};

pub const DEFAULT_MIN_COVERAGE: f64 = 0.6;
pub const DEFAULT_MAX_GAP_WINDOWS: u32 = 6;
pub const DEFAULT_MIN_DURATION_S: i64 = 60;

#[derive(Debug, Error)]
pub enum TransitError {
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("session {id} is {state:?}")]
    Conflict { id: SessionId, state: SessionState },
    #[error("window {got} does not follow window {last}")]
    OutOfOrder { last: u32, got: u32 },
    #[error("session {0} must be validated first")]
    NotValidated(SessionId),
    #[error("invalid session data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Storage(#[from] EnvelopeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkimmingConfig {
    pub min_coverage: f64,
    pub max_gap_windows: u32,
    pub min_duration_s: i64,
}

impl Default for SkimmingConfig {
    fn default() -> Self {
        Self {
            min_coverage: DEFAULT_MIN_COVERAGE,
            max_gap_windows: DEFAULT_MAX_GAP_WINDOWS,
            min_duration_s: DEFAULT_MIN_DURATION_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoSignal,
    Coverage,
    Gap,
    Duration,
    /// Turnstile session without a reading at the exit gate.
    NoExit,
    /// Entry gate refused after the session was opened.
    Cancelled,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NoSignal => "no-signal",
            RejectReason::Coverage => "coverage",
            RejectReason::Gap => "gap",
            RejectReason::Duration => "duration",
            RejectReason::NoExit => "no-exit",
            RejectReason::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SkimOutcome {
    Validated { coverage: f64 },
    Rejected { reason: RejectReason, coverage: f64 },
}

impl SkimOutcome {
    pub fn is_validated(&self) -> bool {
        matches!(self, SkimOutcome::Validated { .. })
    }
}

/// Number of sampling windows a session spans: window `k` closes at
/// `start + k * period`, and every window up to the end instant counts,
/// reported or not.
pub fn window_count(session: &UserSession) -> u32 {
    let period = session.sample_period_s.max(1);
    let duration = session.duration_s().unwrap_or(0).max(0);
    let by_time = (duration + period - 1) / period;
    let by_log = session
        .beacon_log
        .iter()
        .map(|e| e.window_index as i64 + 1)
        .max()
        .unwrap_or(0);
    by_time.max(by_log).max(1) as u32
}

/// Decides whether an ended session corresponds to a real ride.
///
/// On-board sessions need enough windows with signal, no long silent run,
/// and a minimum duration; the first failing check names the rejection.
/// Turnstile sessions are judged on the entry and exit gate readings.
pub fn skim_validate(session: &UserSession, config: &SkimmingConfig) -> Result<SkimOutcome, TransitError> {
    if session.state != SessionState::Ended {
        return Err(TransitError::Conflict {
            id: session.session_id.clone(),
            state: session.state,
        });
    }
    let duration = session.duration_s().unwrap_or(0);
    match session.service_kind {
        ServiceKind::OnBoard => Ok(skim_on_board(session, config, duration)),
        ServiceKind::Turnstile => Ok(skim_turnstile(session, config, duration)),
    }
}

fn skim_on_board(session: &UserSession, config: &SkimmingConfig, duration: i64) -> SkimOutcome {
    let total = window_count(session) as usize;
    let mut present = vec![false; total];
    for e in session.beacon_log.iter().filter(|e| e.present) {
        present[e.window_index as usize] = true;
    }
    let present_count = present.iter().filter(|p| **p).count();
    let coverage = present_count as f64 / total as f64;
    if present_count == 0 {
        return SkimOutcome::Rejected {
            reason: RejectReason::NoSignal,
            coverage,
        };
    }
    let mut longest = 0u32;
    let mut run = 0u32;
    for p in &present {
        run = if *p { 0 } else { run + 1 };
        longest = longest.max(run);
    }
    let reason = if coverage < config.min_coverage {
        Some(RejectReason::Coverage)
    } else if longest > config.max_gap_windows {
        Some(RejectReason::Gap)
    } else if duration < config.min_duration_s {
        Some(RejectReason::Duration)
    } else {
        None
    };
    match reason {
        Some(reason) => SkimOutcome::Rejected { reason, coverage },
        None => SkimOutcome::Validated { coverage },
    }
}

fn skim_turnstile(session: &UserSession, config: &SkimmingConfig, duration: i64) -> SkimOutcome {
    let reads = session.beacon_log.iter().filter(|e| e.present).count();
    let coverage = reads.min(2) as f64 / 2.0;
    let reason = if reads == 0 {
        Some(RejectReason::NoSignal)
    } else if reads < 2 || !session.beacon_log.last().is_some_and(|e| e.present) {
        Some(RejectReason::NoExit)
    } else if duration < config.min_duration_s {
        Some(RejectReason::Duration)
    } else {
        None
    };
    match reason {
        Some(reason) => SkimOutcome::Rejected { reason, coverage },
        None => SkimOutcome::Validated { coverage },
    }
}

/// Real-valued fare in cents before rounding and clamping.
pub fn raw_distance_fare(base: Money, per_km: Money, km: f64) -> f64 {
    base.cents as f64 + per_km.cents as f64 * km
}

pub fn session_fare(plan: &FarePlan, session: &UserSession) -> Result<SessionPayment, TransitError> {
    if session.state != SessionState::Validated {
        return Err(TransitError::NotValidated(session.session_id.clone()));
    }
    let amount = match plan {
        FarePlan::Flat { price } => *price,
        FarePlan::Distance {
            base,
            per_km,
            min,
            max,
        } => {
            let end = session.end_pos.unwrap_or(session.start_pos);
            let km = haversine_distance(session.start_pos, end);
            Money::from_real_cents(raw_distance_fare(*base, *per_km, km), base.currency)
                .max(*min)
                .min(*max)
        }
    };
    Ok(SessionPayment {
        session_id: session.session_id.clone(),
        service_id: session.service_id.clone(),
        amount,
        plan_snapshot: plan.clone(),
    })
}

#[derive(Debug)]
struct OngoingEntry {
    session: UserSession,
    last_activity: Timestamp,
}

/// Sessions in progress. Memory only; nothing here is ever written to
/// durable storage.
#[derive(Debug, Default)]
pub struct OngoingSessionStore {
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<OngoingEntry>>>>,
    by_user: Mutex<HashMap<UserId, SessionId>>,
}

impl OngoingSessionStore {
    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &SessionId) -> Option<UserSession> {
        let entry = self.sessions.read().unwrap().get(id).cloned()?;
        let guard = entry.lock().unwrap();
        Some(guard.session.clone())
    }

    pub fn session_of(&self, user: &UserId) -> Option<SessionId> {
        self.by_user.lock().unwrap().get(user).cloned()
    }

    fn entry(&self, id: &SessionId) -> Option<Arc<Mutex<OngoingEntry>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    fn remove(&self, id: &SessionId) -> Option<Arc<Mutex<OngoingEntry>>> {
        let entry = self.sessions.write().unwrap().remove(id)?;
        let mut by_user = self.by_user.lock().unwrap();
        let user = entry.lock().unwrap().session.user_id.clone();
        if by_user.get(&user) == Some(id) {
            by_user.remove(&user);
        }
        Some(entry)
    }

    fn ids(&self) -> Vec<SessionId> {
        let mut ids: Vec<_> = self.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartedSession {
    pub session_id: SessionId,
    pub kind: ServiceKind,
    /// False when an existing ongoing session was returned.
    pub created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrphanTimeouts {
    pub on_board_s: i64,
    pub turnstile_s: i64,
}

impl Default for OrphanTimeouts {
    fn default() -> Self {
        Self {
            on_board_s: 5 * crate::agent::DEFAULT_LOSS_TIMEOUT_S,
            turnstile_s: 4 * 3600,
        }
    }
}

/// Encrypted, identifier-free archive of one service's validated rides.
#[derive(Clone)]
pub struct CompletedSessionStore {
    sealed: SealedKv,
    prefix: String,
}

impl CompletedSessionStore {
    pub fn new(sealed: SealedKv, service: &crate::domain::ServiceId) -> Self {
        Self {
            sealed,
            prefix: format!("completed/{service}/"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn put(&self, record: &AnonymizedSessionRecord) -> Result<String, TransitError> {
        let key = format!("{}{}", self.prefix, random_key_suffix());
        self.sealed.put_json(&key, record)?;
        Ok(key)
    }

    pub fn records(&self) -> Result<Vec<AnonymizedSessionRecord>, TransitError> {
        Ok(self
            .sealed
            .scan_json(&self.prefix)?
            .into_iter()
            .map(|(_, r)| r)
            .collect())
    }

    pub fn len(&self) -> Result<usize, TransitError> {
        Ok(self.sealed.keys_with_prefix(&self.prefix)?.len())
    }

    pub fn is_empty(&self) -> Result<bool, TransitError> {
        Ok(self.len()? == 0)
    }
}

/// Counters kept for auditing; rejected sessions leave no other trace.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitCounters {
    pub started: u64,
    pub validated: u64,
    pub rejected: u64,
    pub archived: u64,
}

/// One instance per transport service.
pub struct TransitService {
    service: TransportService,
    ongoing: OngoingSessionStore,
    completed: CompletedSessionStore,
    skimming: SkimmingConfig,
    next_id: AtomicU64,
    started: AtomicU64,
    validated: AtomicU64,
    rejected: AtomicU64,
    archived: AtomicU64,
}

impl TransitService {
    pub fn new(service: TransportService, sealed: SealedKv, skimming: SkimmingConfig) -> Self {
        let completed = CompletedSessionStore::new(sealed, &service.service_id);
        Self {
            service,
            ongoing: OngoingSessionStore::default(),
            completed,
            skimming,
            next_id: AtomicU64::new(1),
            started: AtomicU64::new(0),
            validated: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            archived: AtomicU64::new(0),
        }
    }

    pub fn service(&self) -> &TransportService {
        &self.service
    }

    pub fn ongoing(&self) -> &OngoingSessionStore {
        &self.ongoing
    }

    pub fn completed(&self) -> &CompletedSessionStore {
        &self.completed
    }

    pub fn skimming(&self) -> &SkimmingConfig {
        &self.skimming
    }

    pub fn counters(&self) -> TransitCounters {
        TransitCounters {
            started: self.started.load(Ordering::Relaxed),
            validated: self.validated.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            archived: self.archived.load(Ordering::Relaxed),
        }
    }

    /// Opens a session for `user`. A user already riding this service gets
    /// their current session back.
    pub fn start_session(
        &self,
        user: &UserId,
        station: &StationId,
        first: BeaconLogEntry,
        sample_period_s: i64,
        now: Timestamp,
    ) -> Result<StartedSession, TransitError> {
        if sample_period_s <= 0 {
            return Err(TransitError::Invalid("sample period must be positive".into()));
        }
        let start_pos = first
            .location
            .filter(|_| first.present)
            .ok_or_else(|| TransitError::Invalid("first sample must carry a location".into()))?;
        start_pos
            .validate()
            .map_err(|e| TransitError::Invalid(e.to_string()))?;

        let mut by_user = self.ongoing.by_user.lock().unwrap();
        if let Some(existing) = by_user.get(user) {
            return Ok(StartedSession {
                session_id: existing.clone(),
                kind: self.service.kind,
                created: false,
            });
        }
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let session_id = SessionId::new(format!("{}-{}-{n:06}", self.service.service_id, station));
        let session = UserSession {
            session_id: session_id.clone(),
            user_id: user.clone(),
            service_id: self.service.service_id.clone(),
            service_kind: self.service.kind,
            state: SessionState::Ongoing,
            start_pos,
            end_pos: None,
            start_ts: now,
            end_ts: None,
            sample_period_s,
            beacon_log: vec![BeaconLogEntry {
                window_index: 0,
                at: now,
                ..first
            }],
        };
        self.ongoing.sessions.write().unwrap().insert(
            session_id.clone(),
            Arc::new(Mutex::new(OngoingEntry {
                session,
                last_activity: now,
            })),
        );
        by_user.insert(user.clone(), session_id.clone());
        self.started.fetch_add(1, Ordering::Relaxed);
        Ok(StartedSession {
            session_id,
            kind: self.service.kind,
            created: true,
        })
    }

    /// Appends one window report; returns the log length.
    pub fn update_session(&self, id: &SessionId, entry: BeaconLogEntry) -> Result<usize, TransitError> {
        let cell = self.ongoing.entry(id).ok_or_else(|| TransitError::NotFound(id.clone()))?;
        let mut guard = cell.lock().unwrap();
        let s = &mut guard.session;
        if s.state != SessionState::Ongoing {
            return Err(TransitError::Conflict {
                id: id.clone(),
                state: s.state,
            });
        }
        if let Some(loc) = entry.location {
            loc.validate().map_err(|e| TransitError::Invalid(e.to_string()))?;
        }
        if entry.present && entry.location.is_none() {
            return Err(TransitError::Invalid("present entry without location".into()));
        }
        let last = s.beacon_log.last().map(|e| e.window_index).unwrap_or(0);
        if entry.window_index <= last {
            return Err(TransitError::OutOfOrder {
                last,
                got: entry.window_index,
            });
        }
        let at = entry.at;
        s.beacon_log.push(entry);
        let len = s.beacon_log.len();
        guard.last_activity = guard.last_activity.max(at);
        Ok(len)
    }

    /// Closes an ongoing session and hands it back for skimming.
    pub fn end_session(&self, id: &SessionId, now: Timestamp) -> Result<UserSession, TransitError> {
        let cell = self.ongoing.remove(id).ok_or_else(|| TransitError::NotFound(id.clone()))?;
        let mut guard = cell.lock().unwrap();
        let s = &mut guard.session;
        s.transition(SessionState::Ended)
            .map_err(|_| TransitError::Conflict {
                id: id.clone(),
                state: s.state,
            })?;
        s.end_ts = Some(now.max(s.start_ts));
        s.end_pos = Some(s.last_present_location().unwrap_or(s.start_pos));
        Ok(s.clone())
    }

    /// Force-ends sessions with no traffic for longer than their timeout.
    /// The end time is the last activity seen.
    pub fn expire_orphans(&self, now: Timestamp, timeouts: OrphanTimeouts) -> Vec<UserSession> {
        let limit = match self.service.kind {
            ServiceKind::OnBoard => timeouts.on_board_s,
            ServiceKind::Turnstile => timeouts.turnstile_s,
        };
        let mut out = Vec::new();
        for id in self.ongoing.ids() {
            let Some(cell) = self.ongoing.entry(&id) else { continue };
            let last = cell.lock().unwrap().last_activity;
            if now.since(last) > limit {
                if let Ok(s) = self.end_session(&id, last) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Skims an ended session and records the verdict.
    pub fn finalize(&self, mut session: UserSession) -> Result<(UserSession, SkimOutcome), TransitError> {
        let outcome = skim_validate(&session, &self.skimming)?;
        let next = if outcome.is_validated() {
            self.validated.fetch_add(1, Ordering::Relaxed);
            SessionState::Validated
        } else {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            SessionState::Rejected
        };
        session
            .transition(next)
            .map_err(|e| TransitError::Invalid(e.to_string()))?;
        Ok((session, outcome))
    }

    /// Rejects an ended session without skimming (entry gate refused).
    pub fn cancel(&self, mut session: UserSession) -> Result<UserSession, TransitError> {
        session
            .transition(SessionState::Rejected)
            .map_err(|e| TransitError::Invalid(e.to_string()))?;
        self.rejected.fetch_add(1, Ordering::Relaxed);
        Ok(session)
    }

    pub fn fare(&self, session: &UserSession) -> Result<SessionPayment, TransitError> {
        session_fare(&self.service.fare_plan, session)
    }

    /// Stores the generalized projection of a validated session. The raw
    /// session, beacon log included, is consumed.
    pub fn archive_completed(&self, session: UserSession, user: &User, now: Timestamp) -> Result<AnonymizedSessionRecord, TransitError> {
        if session.state != SessionState::Validated {
            return Err(TransitError::NotValidated(session.session_id));
        }
        let record = generalize(user, &session, now)?;
        self.completed.put(&record)?;
        self.archived.fetch_add(1, Ordering::Relaxed);
        Ok(record)
    }
}

/// Convenience for tests and the simulator: the position a session ended at.
pub fn end_position(session: &UserSession) -> GeoPoint {
    session.end_pos.unwrap_or(session.start_pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CustomerId, Gender, ServiceId};
    use crate::privacy::KeyService;
    use crate::store::MemoryKv;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    const P0: GeoPoint = GeoPoint { lat: 44.35, lon: 11.71 };

    fn service(kind: ServiceKind, plan: FarePlan) -> TransportService {
        TransportService {
            service_id: ServiceId::new("bus-1"),
            customer_id: CustomerId::new("tper"),
            kind,
            fare_plan: plan,
        }
    }

    fn transit_with(kv: Arc<MemoryKv>) -> TransitService {
        let sealed = SealedKv::new(kv, Arc::new(KeyService::ephemeral()));
        TransitService::new(
            service(ServiceKind::OnBoard, FarePlan::Flat { price: Money::eur(150) }),
            sealed,
            SkimmingConfig::default(),
        )
    }

    fn transit() -> TransitService {
        transit_with(Arc::new(MemoryKv::new()))
    }

    fn first(at: i64) -> BeaconLogEntry {
        BeaconLogEntry::present(0, -60.0, P0, Timestamp(at))
    }

    fn user() -> User {
        User {
            user_id: "u1".into(),
            gender: Gender::Male,
            birth_date: NaiveDate::from_ymd_opt(1984, 5, 1).unwrap(),
            registered_at: Timestamp(0),
        }
    }

    /// Ended session with the given presence pattern, one entry per window.
    fn ended(pattern: &[bool], period: i64, duration: i64) -> UserSession {
        UserSession {
            session_id: "s".into(),
            user_id: "u".into(),
            service_id: "bus-1".into(),
            service_kind: ServiceKind::OnBoard,
            state: SessionState::Ended,
            start_pos: P0,
            end_pos: Some(P0),
            start_ts: Timestamp(0),
            end_ts: Some(Timestamp(duration)),
            sample_period_s: period,
            beacon_log: pattern
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let at = Timestamp(i as i64 * period);
                    if *p {
                        BeaconLogEntry::present(i as u32, -60.0, P0, at)
                    } else {
                        BeaconLogEntry::missing(i as u32, at)
                    }
                })
                .collect(),
        }
    }

    /// Brute-force skimming: walks every window index and scans the whole
    /// log for it, builds the presence string and measures runs by
    /// splitting on present windows.
    fn skim_oracle(s: &UserSession, c: &SkimmingConfig) -> (bool, Option<&'static str>, f64) {
        let duration = s.end_ts.unwrap().0 - s.start_ts.0;
        let mut n = 0i64;
        while n * s.sample_period_s < duration {
            n += 1;
        }
        for e in &s.beacon_log {
            n = n.max(e.window_index as i64 + 1);
        }
        let n = n.max(1);
        let mut marks = String::new();
        for w in 0..n {
            let hit = s
                .beacon_log
                .iter()
                .any(|e| e.present && e.window_index as i64 == w);
            marks.push(if hit { 'P' } else { '.' });
        }
        let present = marks.matches('P').count();
        let coverage = present as f64 / n as f64;
        let longest = marks.split('P').map(str::len).max().unwrap_or(0);
        let reason = if present == 0 {
            Some("no-signal")
        } else if coverage < c.min_coverage {
            Some("coverage")
        } else if longest > c.max_gap_windows as usize {
            Some("gap")
        } else if duration < c.min_duration_s {
            Some("duration")
        } else {
            None
        };
        (reason.is_none(), reason, coverage)
    }

    fn outcome_parts(o: SkimOutcome) -> (bool, Option<&'static str>, f64) {
        match o {
            SkimOutcome::Validated { coverage } => (true, None, coverage),
            SkimOutcome::Rejected { reason, coverage } => (false, Some(reason.as_str()), coverage),
        }
    }

    #[test]
    fn start_is_idempotent_per_user() {
        let t = transit();
        let a = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap();
        assert!(a.created);
        assert_eq!(a.kind, ServiceKind::OnBoard);
        let b = t.start_session(&"u1".into(), &"st".into(), first(3), 5, Timestamp(3)).unwrap();
        assert_eq!(a.session_id, b.session_id);
        assert!(!b.created);
        let c = t.start_session(&"u2".into(), &"st".into(), first(3), 5, Timestamp(3)).unwrap();
        assert_ne!(a.session_id, c.session_id);
    }

    #[test]
    fn update_and_end() {
        let t = transit();
        let id = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
        let p7 = GeoPoint { lat: 44.36, lon: 11.72 };
        assert_eq!(t.update_session(&id, BeaconLogEntry::present(7, -61.0, p7, Timestamp(35))).unwrap(), 2);
        assert_eq!(t.update_session(&id, BeaconLogEntry::missing(8, Timestamp(40))).unwrap(), 3);
        assert!(matches!(
            t.update_session(&id, BeaconLogEntry::missing(8, Timestamp(41))),
            Err(TransitError::OutOfOrder { .. })
        ));
        let s = t.end_session(&id, Timestamp(45)).unwrap();
        assert_eq!(s.state, SessionState::Ended);
        assert_eq!(s.end_pos, Some(p7));
        assert_eq!(s.end_ts, Some(Timestamp(45)));
        assert!(t.ongoing().is_empty());
        assert!(matches!(
            t.update_session(&id, BeaconLogEntry::missing(9, Timestamp(50))),
            Err(TransitError::NotFound(_))
        ));
        assert!(matches!(t.end_session(&id, Timestamp(50)), Err(TransitError::NotFound(_))));
    }

    #[test]
    fn session_without_later_signal_falls_back_and_is_rejected() {
        let t = transit();
        let id = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
        for w in 1..=20 {
            t.update_session(&id, BeaconLogEntry::missing(w, Timestamp(w as i64 * 5))).unwrap();
        }
        let s = t.end_session(&id, Timestamp(100)).unwrap();
        assert_eq!(s.end_pos, Some(P0));
        let (s, out) = t.finalize(s).unwrap();
        assert_eq!(s.state, SessionState::Rejected);
        assert!(matches!(out, SkimOutcome::Rejected { reason: RejectReason::Coverage, .. }));

        let mut empty = ended(&[], 5, 100);
        empty.beacon_log.clear();
        assert!(matches!(
            skim_validate(&empty, &SkimmingConfig::default()).unwrap(),
            SkimOutcome::Rejected { reason: RejectReason::NoSignal, .. }
        ));
    }

    #[test]
    fn skim_examples() {
        let c = SkimmingConfig::default();
        let all = ended(&[true; 24], 25, 600);
        assert_eq!(
            skim_validate(&all, &c).unwrap(),
            SkimOutcome::Validated { coverage: 1.0 }
        );

        let none = ended(&[false; 24], 25, 600);
        assert!(matches!(
            skim_validate(&none, &c).unwrap(),
            SkimOutcome::Rejected { reason: RejectReason::NoSignal, .. }
        ));

        let half: Vec<bool> = (0..24).map(|i| i % 2 == 0).collect();
        let s = ended(&half, 25, 600);
        let out = skim_validate(&s, &c).unwrap();
        assert_eq!(outcome_parts(out), skim_oracle(&s, &c));
        assert_eq!(
            out,
            SkimOutcome::Rejected {
                reason: RejectReason::Coverage,
                coverage: 0.5
            }
        );
    }

    #[test]
    fn skim_requires_ended() {
        let mut s = ended(&[true; 4], 5, 20);
        s.state = SessionState::Ongoing;
        assert!(skim_validate(&s, &SkimmingConfig::default()).is_err());
    }

    #[test]
    fn turnstile_skimming() {
        let c = SkimmingConfig::default();
        let mut s = ended(&[true], 5, 900);
        s.service_kind = ServiceKind::Turnstile;
        assert!(matches!(
            skim_validate(&s, &c).unwrap(),
            SkimOutcome::Rejected { reason: RejectReason::NoExit, .. }
        ));
        s.beacon_log.push(BeaconLogEntry::present(180, -60.0, P0, Timestamp(900)));
        assert_eq!(skim_validate(&s, &c).unwrap(), SkimOutcome::Validated { coverage: 1.0 });
    }

    #[test]
    fn flat_and_clamped_fares() {
        let mut s = ended(&[true; 4], 5, 20);
        s.state = SessionState::Validated;
        let p = session_fare(&FarePlan::Flat { price: Money::eur(150) }, &s).unwrap();
        assert_eq!(p.amount.cents, 150);

        let plan = FarePlan::Distance {
            base: Money::eur(100),
            per_km: Money::eur(10),
            min: Money::eur(150),
            max: Money::eur(500),
        };
        assert_eq!(session_fare(&plan, &s).unwrap().amount.cents, 150);

        // 12.4 km due north along a meridian: arc length is R * dlat exactly
        let dlat = (12.4f64 / 6371.0).to_degrees();
        s.end_pos = Some(GeoPoint { lat: P0.lat + dlat, lon: P0.lon });
        let plan = FarePlan::Distance {
            base: Money::eur(100),
            per_km: Money::eur(10),
            min: Money::eur(0),
            max: Money::eur(1000),
        };
        assert_eq!(session_fare(&plan, &s).unwrap().amount.cents, 224);

        s.state = SessionState::Rejected;
        assert!(matches!(session_fare(&plan, &s), Err(TransitError::NotValidated(_))));
    }

    #[test]
    fn archive_writes_only_generalized_record() {
        let kv = Arc::new(MemoryKv::new());
        let t = transit_with(kv.clone());
        let id = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
        for w in 1..=24u32 {
            t.update_session(&id, BeaconLogEntry::present(w, -60.0, P0, Timestamp(w as i64 * 5))).unwrap();
        }
        assert!(kv.is_empty(), "ongoing sessions must not reach durable storage");
        let s = t.end_session(&id, Timestamp(125)).unwrap();
        let (s, out) = t.finalize(s).unwrap();
        assert!(out.is_validated());
        let rec = t.archive_completed(s, &user(), Timestamp(1_620_000_000)).unwrap();
        assert_eq!(kv.len(), 1);
        assert_eq!(t.completed().records().unwrap(), vec![rec]);
        let raw = String::from_utf8_lossy(&kv.raw_bytes()).into_owned();
        for key in AnonymizedSessionRecord::JSON_KEYS {
            assert!(!raw.contains(key), "plaintext key {key} in store");
        }
    }

    #[test]
    fn rejected_sessions_are_not_archived() {
        let kv = Arc::new(MemoryKv::new());
        let t = transit_with(kv.clone());
        let id = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
        let s = t.end_session(&id, Timestamp(10)).unwrap();
        let (s, _) = t.finalize(s).unwrap();
        assert!(t.archive_completed(s, &user(), Timestamp(20)).is_err());
        assert!(kv.is_empty());
        assert_eq!(t.counters().rejected, 1);
    }

    #[test]
    fn orphans_expire_by_kind() {
        let t = transit();
        let id = t.start_session(&"u1".into(), &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
        t.update_session(&id, BeaconLogEntry::present(1, -60.0, P0, Timestamp(5))).unwrap();
        assert!(t.expire_orphans(Timestamp(100), OrphanTimeouts::default()).is_empty());
        let gone = t.expire_orphans(Timestamp(200), OrphanTimeouts::default());
        assert_eq!(gone.len(), 1);
        assert_eq!(gone[0].end_ts, Some(Timestamp(5)));
        assert!(t.ongoing().is_empty());
    }

    #[test]
    fn concurrent_sessions() {
        let t = Arc::new(transit());
        let handles: Vec<_> = (0..8)
            .map(|u| {
                let t = t.clone();
                std::thread::spawn(move || {
                    let user = UserId::new(format!("u{u}"));
                    let id = t.start_session(&user, &"st".into(), first(0), 5, Timestamp(0)).unwrap().session_id;
                    for w in 1..50u32 {
                        t.update_session(&id, BeaconLogEntry::present(w, -60.0, P0, Timestamp(w as i64 * 5)))
                            .unwrap();
                    }
                    t.end_session(&id, Timestamp(250)).unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap().beacon_log.len(), 50);
        }
        assert_eq!(t.counters().started, 8);
    }

    fn arb_log() -> impl Strategy<Value = (Vec<(bool, bool)>, i64, i64)> {
        (proptest::collection::vec((any::<bool>(), any::<bool>()), 0..60), 1i64..10, 0i64..700)
    }

    proptest! {
        #[test]
        fn skim_matches_oracle((marks, period, duration) in arb_log()) {
            // (reported?, present?) per window; unreported windows are gaps
            let mut s = ended(&[], period, duration);
            for (i, (reported, present)) in marks.iter().enumerate() {
                if !*reported { continue; }
                let at = Timestamp(i as i64 * period);
                s.beacon_log.push(if *present {
                    BeaconLogEntry::present(i as u32, -60.0, P0, at)
                } else {
                    BeaconLogEntry::missing(i as u32, at)
                });
            }
            let c = SkimmingConfig { min_coverage: 0.6, max_gap_windows: 3, min_duration_s: 60 };
            let got = outcome_parts(skim_validate(&s, &c).unwrap());
            let want = skim_oracle(&s, &c);
            prop_assert_eq!(got.0, want.0);
            prop_assert_eq!(got.1, want.1);
            prop_assert!((got.2 - want.2).abs() < 1e-12);
        }

        #[test]
        fn distance_fare_monotone_and_clamped(d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
            let (base, per_km, min, max) = (Money::eur(100), Money::eur(12), Money::eur(150), Money::eur(600));
            let plan = FarePlan::Distance { base, per_km, min, max };
            let fare = |km: f64| {
                let mut s = ended(&[true], 5, 100);
                s.state = SessionState::Validated;
                s.end_pos = Some(GeoPoint { lat: P0.lat + (km / 6371.0).to_degrees(), lon: P0.lon });
                session_fare(&plan, &s).unwrap().amount.cents
            };
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(raw_distance_fare(base, per_km, lo) <= raw_distance_fare(base, per_km, hi));
            prop_assert!(fare(lo) <= fare(hi));
            prop_assert!((150..=600).contains(&fare(d1)));
        }
    }
}
