//! Request/response front end over the transit and account services.
//!
//! Requests are plain values so the simulator can call the gateway
//! in-process. Skimming, archival and route closing run from
//! [`Gateway::run_background`], never on the request path.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Mutex, RwLock};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::GateDirection;
use crate::domain::{
    AutoCharge, BeaconLogEntry, CustomerId, Gender, GeoPoint, Money, ServiceId, SessionId, StationId, Timestamp,
    TransportService, UserId, UserSession, VehicleId,
};
use crate::privacy::{AgeRange, AnonymizedSessionRecord, KAnonymityReport, PrivacyError, SealedKv};
use crate::quickin::{AuthDecision, PricedSession, Quickin, QuickinConfig, QuickinError};
use crate::transit::{OrphanTimeouts, RejectReason, SkimOutcome, SkimmingConfig, TransitError, TransitService};

pub const DEFAULT_K_THRESHOLD: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: Method,
    /// Path with optional query string.
    pub path: String,
    pub token: Option<String>,
    pub body: Value,
}

impl ApiRequest {
    fn new(method: Method, path: impl Into<String>, body: Value) -> Self {
        Self {
            method,
            path: path.into(),
            token: None,
            body,
        }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::new(Method::Get, path, Value::Null)
    }

    pub fn post(path: impl Into<String>, body: Value) -> Self {
        Self::new(Method::Post, path, body)
    }

    pub fn patch(path: impl Into<String>, body: Value) -> Self {
        Self::new(Method::Patch, path, body)
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: Value) -> Self {
        Self { status, body }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.body.get(name).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub skimming: SkimmingConfig,
    pub quickin: QuickinConfig,
    pub orphans: OrphanTimeouts,
    pub k_threshold: u64,
    pub token_seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            skimming: SkimmingConfig::default(),
            quickin: QuickinConfig::default(),
            orphans: OrphanTimeouts::default(),
            k_threshold: DEFAULT_K_THRESHOLD,
            token_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Principal {
    Rider(UserId),
    Dashboard(CustomerId),
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    service_id: ServiceId,
    session: UserSession,
    cancelled: bool,
}

/// What happened to one ended session in a background pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Processed {
    pub service_id: ServiceId,
    pub session_id: SessionId,
    pub outcome: SkimOutcome,
    pub fare: Option<Money>,
    pub orphan: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BackgroundReport {
    pub processed: Vec<Processed>,
    pub routes_closed: usize,
}

#[derive(Debug, Deserialize)]
struct RegisterBody {
    identity_key: String,
    gender: Gender,
    birth_date: NaiveDate,
    payment_method_ref: String,
    #[serde(default)]
    autocharge: Option<AutoCharge>,
}

#[derive(Debug, Deserialize)]
struct StartBody {
    station_id: StationId,
    sample_period_s: i64,
    rssi_dbm: f64,
    location: GeoPoint,
}

#[derive(Debug, Deserialize)]
struct UpdateBody {
    window_index: u32,
    #[serde(default)]
    rssi_dbm: Option<f64>,
    #[serde(default)]
    location: Option<GeoPoint>,
}

#[derive(Debug, Deserialize)]
struct AuthorizeBody {
    station_id: StationId,
    direction: GateDirection,
    #[serde(default)]
    session_id: Option<SessionId>,
}

pub struct Gateway {
    config: GatewayConfig,
    quickin: Quickin,
    sealed: SealedKv,
    transit: BTreeMap<ServiceId, TransitService>,
    tokens: RwLock<HashMap<String, Principal>>,
    token_rng: Mutex<ChaCha8Rng>,
    pending: Mutex<VecDeque<Pending>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, sealed: SealedKv) -> Result<Self, QuickinError> {
        let quickin = Quickin::new(config.quickin.clone(), sealed.clone())?;
        Ok(Self {
            token_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.token_seed)),
            config,
            quickin,
            sealed,
            transit: BTreeMap::new(),
            tokens: RwLock::default(),
            pending: Mutex::default(),
        })
    }

    pub fn add_service(&mut self, service: TransportService) -> Result<(), QuickinError> {
        self.quickin.register_service(service.clone())?;
        self.transit.insert(
            service.service_id.clone(),
            TransitService::new(service, self.sealed.clone(), self.config.skimming.clone()),
        );
        Ok(())
    }

    pub fn map_station(&self, station: StationId, vehicle: VehicleId, service: ServiceId) -> Result<(), QuickinError> {
        self.quickin.map_station(station, vehicle, service)
    }

    /// Issues a statistics/settlement token for a customer.
    pub fn dashboard_token(&self, customer: &CustomerId) -> Result<String, QuickinError> {
        if !self.quickin.customer_exists(customer) {
            return Err(QuickinError::UnknownCustomer(customer.clone()));
        }
        Ok(self.issue_token(Principal::Dashboard(customer.clone())))
    }

    pub fn quickin(&self) -> &Quickin {
        &self.quickin
    }

    pub fn transit(&self, service: &ServiceId) -> Option<&TransitService> {
        self.transit.get(service)
    }

    pub fn services(&self) -> impl Iterator<Item = &TransitService> {
        self.transit.values()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().unwrap().len()
    }

    pub fn ongoing_len(&self) -> usize {
        self.transit.values().map(|t| t.ongoing().len()).sum()
    }

    fn issue_token(&self, who: Principal) -> String {
        let bytes: [u8; 16] = self.token_rng.lock().unwrap().gen();
        let token = hex::encode(bytes);
        self.tokens.write().unwrap().insert(token.clone(), who);
        token
    }

    fn principal(&self, req: &ApiRequest) -> Option<Principal> {
        let t = req.token.as_deref()?;
        self.tokens.read().unwrap().get(t).cloned()
    }

    fn rider(&self, req: &ApiRequest) -> Result<UserId, ApiResponse> {
        match self.principal(req) {
            Some(Principal::Rider(u)) => Ok(u),
            Some(_) => Err(ApiResponse::error(403, "rider token required")),
            None => Err(ApiResponse::error(401, "missing or unknown token")),
        }
    }

    pub fn handle(&self, req: &ApiRequest, now: Timestamp) -> ApiResponse {
        let (path, query) = split_query(&req.path);
        let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
        let r = match (req.method, segs.as_slice()) {
            (Method::Post, ["v1", "users"]) => self.register(req, now),
            (Method::Post, ["v1", "sessions"]) => self.start(req, now),
            (Method::Patch, ["v1", "sessions", id]) => self.update(req, id, now),
            (Method::Post, ["v1", "sessions", id, "end"]) => self.end(req, id, now),
            (Method::Post, ["v1", "turnstile", "authorize"]) => self.authorize(req, now),
            (Method::Get, ["v1", "wallet"]) => self.wallet(req),
            (Method::Get, ["v1", "routes"]) => self.routes(req, &query),
            (Method::Get, ["v1", "stats", service]) => self.stats(req, service, &query),
            (Method::Get, ["v1", "settlement", customer]) => self.settlement(req, customer, &query),
            _ => Err(ApiResponse::error(404, "no such endpoint")),
        };
        r.unwrap_or_else(|e| e)
    }

    fn register(&self, req: &ApiRequest, now: Timestamp) -> Result<ApiResponse, ApiResponse> {
        let b: RegisterBody = parse_body(req)?;
        let (user, wallet) = self
            .quickin
            .register_user(&b.identity_key, b.gender, b.birth_date, &b.payment_method_ref, b.autocharge, now)
            .map_err(quickin_error)?;
        let token = self.issue_token(Principal::Rider(user.user_id.clone()));
        Ok(ApiResponse::ok(
            201,
            json!({ "user_id": user.user_id, "wallet_id": wallet.wallet_id, "token": token }),
        ))
    }

    fn start(&self, req: &ApiRequest, now: Timestamp) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        let b: StartBody = parse_body(req)?;
        let (_, service_id) = self.quickin.resolve_station(&b.station_id).map_err(quickin_error)?;
        if let AuthDecision::Denied(reason) = self.quickin.authorize(&user) {
            return Err(ApiResponse::error(403, reason));
        }
        let transit = self.transit_for(&service_id)?;
        let first = BeaconLogEntry::present(0, b.rssi_dbm, b.location, now);
        let started = transit
            .start_session(&user, &b.station_id, first, b.sample_period_s, now)
            .map_err(transit_error)?;
        Ok(ApiResponse::ok(
            if started.created { 201 } else { 200 },
            json!({ "session_id": started.session_id, "kind": started.kind, "service_id": service_id }),
        ))
    }

    fn transit_for(&self, id: &ServiceId) -> Result<&TransitService, ApiResponse> {
        self.transit
            .get(id)
            .ok_or_else(|| ApiResponse::error(404, format!("unknown service {id}")))
    }

    /// Finds the service holding an ongoing session owned by `user`.
    fn owned_session(&self, user: &UserId, id: &str) -> Result<&TransitService, ApiResponse> {
        let id = SessionId::new(id);
        for t in self.transit.values() {
            if let Some(s) = t.ongoing().get(&id) {
                if &s.user_id != user {
                    return Err(ApiResponse::error(403, "not your session"));
                }
                return Ok(t);
            }
        }
        Err(ApiResponse::error(404, format!("session {id} not found")))
    }

    fn update(&self, req: &ApiRequest, id: &str, now: Timestamp) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        let b: UpdateBody = parse_body(req)?;
        let transit = self.owned_session(&user, id)?;
        let entry = match (b.rssi_dbm, b.location) {
            (Some(rssi), Some(loc)) => BeaconLogEntry::present(b.window_index, rssi, loc, now),
            (None, None) => BeaconLogEntry::missing(b.window_index, now),
            _ => return Err(ApiResponse::error(400, "rssi_dbm and location go together")),
        };
        let len = transit.update_session(&id.into(), entry).map_err(transit_error)?;
        Ok(ApiResponse::ok(200, json!({ "log_len": len })))
    }

    fn end(&self, req: &ApiRequest, id: &str, now: Timestamp) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        let transit = self.owned_session(&user, id)?;
        let session = transit.end_session(&id.into(), now).map_err(transit_error)?;
        self.enqueue(transit.service().service_id.clone(), session, false);
        Ok(ApiResponse::ok(202, json!({ "session_id": id, "state": "ended" })))
    }

    fn enqueue(&self, service_id: ServiceId, session: UserSession, cancelled: bool) {
        self.pending.lock().unwrap().push_back(Pending {
            service_id,
            session,
            cancelled,
        });
    }

    fn authorize(&self, req: &ApiRequest, now: Timestamp) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        let b: AuthorizeBody = parse_body(req)?;
        let (_, service_id) = self.quickin.resolve_station(&b.station_id).map_err(quickin_error)?;
        let decision = match b.direction {
            // a rider already inside is always let out
            GateDirection::Exit => AuthDecision::Granted,
            GateDirection::Entry => self.quickin.authorize(&user),
        };
        if !decision.is_granted() && b.direction == GateDirection::Entry {
            let transit = self.transit_for(&service_id)?;
            let ongoing = b
                .session_id
                .clone()
                .or_else(|| transit.ongoing().session_of(&user));
            if let Some(sid) = ongoing {
                if transit.ongoing().get(&sid).is_some_and(|s| s.user_id == user) {
                    if let Ok(s) = transit.end_session(&sid, now) {
                        self.enqueue(service_id.clone(), s, true);
                    }
                }
            }
        }
        let body = match &decision {
            AuthDecision::Granted => json!({ "decision": "granted" }),
            AuthDecision::Denied(r) => json!({ "decision": "denied", "reason": r }),
        };
        Ok(ApiResponse::ok(200, body))
    }

    fn wallet(&self, req: &ApiRequest) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        let w = self.quickin.wallet(&user).map_err(quickin_error)?;
        Ok(ApiResponse::ok(
            200,
            json!({
                "wallet_id": w.wallet_id,
                "balance_cents": w.balance.cents,
                "floor_cents": w.floor.cents,
                "blocked": w.blocked,
                "total_debits_cents": w.total_debits().cents,
                "ledger": w.ledger,
            }),
        ))
    }

    fn routes(&self, req: &ApiRequest, query: &HashMap<String, String>) -> Result<ApiResponse, ApiResponse> {
        let user = self.rider(req)?;
        if let Some(asked) = query.get("user") {
            if asked != user.as_str() {
                return Err(ApiResponse::error(403, "route history is visible to its owner only"));
            }
        }
        let routes = self.quickin.routes_of(&user).map_err(quickin_error)?;
        Ok(ApiResponse::ok(200, json!({ "routes": routes })))
    }

    fn dashboard(&self, req: &ApiRequest, customer: &CustomerId) -> Result<(), ApiResponse> {
        match self.principal(req) {
            Some(Principal::Dashboard(c)) if &c == customer => Ok(()),
            Some(_) => Err(ApiResponse::error(403, "not authorized for this customer")),
            None => Err(ApiResponse::error(401, "missing or unknown token")),
        }
    }

    fn stats(&self, req: &ApiRequest, service: &str, query: &HashMap<String, String>) -> Result<ApiResponse, ApiResponse> {
        let transit = self.transit_for(&ServiceId::new(service))?;
        self.dashboard(req, &transit.service().customer_id)?;
        let (from, to) = period(query)?;
        let records = transit
            .completed()
            .records()
            .map_err(|e| ApiResponse::error(500, e.to_string()))?;
        match export_stats(&records, from, to, self.config.k_threshold) {
            Ok(csv) => Ok(ApiResponse::ok(200, json!({ "csv": csv }))),
            Err(PrivacyError::BelowThreshold { k_min, threshold, .. }) => Err(ApiResponse::ok(
                422,
                json!({ "error": "k-anonymity threshold not met", "k_min": k_min, "threshold": threshold }),
            )),
            Err(e) => Err(ApiResponse::error(500, e.to_string())),
        }
    }

    fn settlement(&self, req: &ApiRequest, customer: &str, query: &HashMap<String, String>) -> Result<ApiResponse, ApiResponse> {
        let customer = CustomerId::new(customer);
        if !self.quickin.customer_exists(&customer) {
            return Err(ApiResponse::error(404, format!("unknown customer {customer}")));
        }
        self.dashboard(req, &customer)?;
        let (from, to) = period(query)?;
        let rep = self
            .quickin
            .settle_customer(&customer, from, to)
            .map_err(quickin_error)?;
        Ok(ApiResponse::ok(200, serde_json::to_value(rep).unwrap()))
    }

    /// Drains ended sessions, sweeps orphans and closes idle routes.
    pub fn run_background(&self, now: Timestamp) -> Result<BackgroundReport, QuickinError> {
        let mut report = BackgroundReport::default();
        let mut work: Vec<(Pending, bool)> = self.pending.lock().unwrap().drain(..).map(|p| (p, false)).collect();
        for (id, t) in &self.transit {
            for s in t.expire_orphans(now, self.config.orphans) {
                work.push((
                    Pending {
                        service_id: id.clone(),
                        session: s,
                        cancelled: false,
                    },
                    true,
                ));
            }
        }
        for (p, orphan) in work {
            report.processed.push(self.process(p, orphan, now)?);
        }
        report.routes_closed = self.quickin.close_expired_routes(now)?.len();
        Ok(report)
    }

    fn process(&self, p: Pending, orphan: bool, now: Timestamp) -> Result<Processed, QuickinError> {
        let transit = &self.transit[&p.service_id];
        let session_id = p.session.session_id.clone();
        let user_id = p.session.user_id.clone();
        if p.cancelled {
            let coverage = 0.0;
            transit.cancel(p.session).map_err(storage)?;
            return Ok(Processed {
                service_id: p.service_id,
                session_id,
                outcome: SkimOutcome::Rejected {
                    reason: RejectReason::Cancelled,
                    coverage,
                },
                fare: None,
                orphan,
            });
        }
        let (session, outcome) = transit.finalize(p.session).map_err(storage)?;
        let mut fare = None;
        if outcome.is_validated() {
            let payment = transit.fare(&session).map_err(storage)?;
            let user = self.quickin.user(&user_id)?;
            let priced = PricedSession {
                session_id: session_id.clone(),
                service_id: p.service_id.clone(),
                start_ts: session.start_ts,
                end_ts: session.end_ts.unwrap_or(session.start_ts),
                payment: payment.clone(),
            };
            transit.archive_completed(session, &user, now).map_err(storage)?;
            self.quickin.assemble_route(&user_id, priced, now)?;
            fare = Some(payment.amount);
        }
        Ok(Processed {
            service_id: p.service_id,
            session_id,
            outcome,
            fare,
            orphan,
        })
    }

    /// Closes every open route; used at the end of a run.
    pub fn flush_routes(&self, now: Timestamp) -> Result<usize, QuickinError> {
        Ok(self.quickin.close_all_routes(now)?.len())
    }
}

fn storage(e: TransitError) -> QuickinError {
    match e {
        TransitError::Storage(e) => QuickinError::Storage(e),
        other => QuickinError::Invalid(other.to_string()),
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(req: &ApiRequest) -> Result<T, ApiResponse> {
    serde_json::from_value(req.body.clone()).map_err(|e| ApiResponse::error(400, format!("bad request body: {e}")))
}

fn quickin_error(e: QuickinError) -> ApiResponse {
    let status = match &e {
        QuickinError::DuplicateIdentity => 409,
        QuickinError::Invalid(_) => 400,
        QuickinError::UnknownUser(_)
        | QuickinError::UnknownStation(_)
        | QuickinError::UnknownService(_)
        | QuickinError::UnknownCustomer(_) => 404,
        QuickinError::Storage(_) | QuickinError::Store(_) => 500,
    };
    ApiResponse::error(status, e.to_string())
}

fn transit_error(e: TransitError) -> ApiResponse {
    let status = match &e {
        TransitError::NotFound(_) => 404,
        TransitError::Conflict { .. } | TransitError::OutOfOrder { .. } | TransitError::NotValidated(_) => 409,
        TransitError::Invalid(_) | TransitError::Privacy(_) => 400,
        TransitError::Storage(_) => 500,
    };
    ApiResponse::error(status, e.to_string())
}

fn split_query(path: &str) -> (&str, HashMap<String, String>) {
    let Some((p, q)) = path.split_once('?') else {
        return (path, HashMap::new());
    };
    let map = q
        .split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => (kv.to_owned(), String::new()),
        })
        .collect();
    (p, map)
}

/// Accepts unix seconds or RFC3339.
pub fn parse_time(s: &str) -> Option<Timestamp> {
    s.parse::<i64>()
        .ok()
        .map(Timestamp)
        .or_else(|| Timestamp::parse_rfc3339(s).ok())
}

fn period(query: &HashMap<String, String>) -> Result<(Timestamp, Timestamp), ApiResponse> {
    let get = |k: &str| {
        query
            .get(k)
            .and_then(|v| parse_time(v))
            .ok_or_else(|| ApiResponse::error(400, format!("query parameter `{k}` missing or malformed")))
    };
    let (from, to) = (get("from")?, get("to")?);
    if to < from {
        return Err(ApiResponse::error(400, "`to` precedes `from`"));
    }
    Ok((from, to))
}

/// Per-day, per-age-range ride counts for rides starting in `[from, to)`,
/// built from anonymized records only. Refused when the smallest group is
/// below `k_threshold`; an empty period yields just the header.
pub fn export_stats(
    records: &[AnonymizedSessionRecord],
    from: Timestamp,
    to: Timestamp,
    k_threshold: u64,
) -> Result<String, PrivacyError> {
    let mut groups: BTreeMap<(NaiveDate, AgeRange), u64> = BTreeMap::new();
    for r in records.iter().filter(|r| from <= r.start_ts && r.start_ts < to) {
        *groups.entry((r.start_ts.date(), r.age_range)).or_insert(0) += 1;
    }
    let mut out = String::from("day,age_range,count,k_min,k_avg,k_max\n");
    if groups.is_empty() {
        return Ok(out);
    }
    let report = KAnonymityReport::from_counts(groups.iter().map(|((d, a), c)| (format!("{d}|{a}"), *c)))?
        .check_threshold(k_threshold)?;
    for ((day, age), count) in &groups {
        out.push_str(&format!("{day},{age},{count},,,\n"));
    }
    out.push_str(&format!(
        "summary,,{},{},{},{}\n",
        report.total(),
        report.k_min,
        report.k_avg_rounded(),
        report.k_max
    ));
    Ok(out)
}
