//! Discrete-time simulation of vehicles, gates and riders talking to an
//! in-process [`Gateway`].

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{AgentError, AgentInput, AgentState, PathLossModel, ProtocolAction, ProximityConfig, RssiSample};
use crate::domain::{
    haversine_distance, AutoCharge, FarePlan, Gender, GeoPoint, Money, ServiceId, ServiceKind, SessionId, StationId,
    Timestamp, TransportService, UserId, VehicleId,
};
use crate::gateway::{ApiRequest, ApiResponse, BackgroundReport, Gateway, GatewayConfig};
use crate::privacy::SealedKv;
use crate::quickin::QuickinError;
use crate::station::{
    Authorization, Station, StationConfig, StationError, StationEvent, StationMode, StationOutput, StationState,
    DEFAULT_TX_POWER_DBM,
};

/// Seconds a rider stands within reach of a gate.
pub const GATE_DWELL_S: i64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Quickin(#[from] QuickinError),
    #[error(transparent)]
    Station(#[from] StationError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("request failed during setup: {0:?}")]
    Setup(ApiResponse),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLossParams {
    pub exponent: f64,
    pub noise_sigma_dbm: f64,
    /// Samples below this level are never delivered to the agent.
    pub sensitivity_dbm: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self {
            exponent: 2.0,
            noise_sigma_dbm: 4.0,
            sensitivity_dbm: -100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub vehicle_id: VehicleId,
    pub station_id: StationId,
    pub service_id: ServiceId,
    /// Driven back and forth for the whole run.
    pub path: Vec<GeoPoint>,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub station_id: StationId,
    pub service_id: ServiceId,
    pub line_id: VehicleId,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripSpec {
    OnBoard {
        vehicle_id: VehicleId,
        board_at_s: i64,
        ride_s: i64,
    },
    Turnstile {
        entry: StationId,
        exit: StationId,
        enter_at_s: i64,
        travel_s: i64,
    },
}

impl TripSpec {
    fn span(&self) -> (i64, i64) {
        match self {
            TripSpec::OnBoard { board_at_s, ride_s, .. } => (*board_at_s, board_at_s + ride_s),
            TripSpec::Turnstile {
                enter_at_s, travel_s, ..
            } => (*enter_at_s, enter_at_s + travel_s + GATE_DWELL_S),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiderSpec {
    pub identity_key: String,
    pub gender: Gender,
    pub birth_date: NaiveDate,
    pub payment_method_ref: String,
    #[serde(default)]
    pub autocharge: Option<AutoCharge>,
    pub trips: Vec<TripSpec>,
}

fn default_tick() -> i64 {
    1
}

fn default_background() -> i64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub start: Timestamp,
    pub duration_s: i64,
    #[serde(default = "default_tick")]
    pub tick_s: i64,
    #[serde(default = "default_background")]
    pub background_every_s: i64,
    /// Probability that a session update is lost in transit.
    #[serde(default)]
    pub update_loss_probability: f64,
    #[serde(default)]
    pub path_loss: PathLossParams,
    #[serde(default)]
    pub proximity: ProximityConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    pub services: Vec<TransportService>,
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub gates: Vec<GateSpec>,
    pub riders: Vec<RiderSpec>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.duration_s <= 0 || self.tick_s <= 0 || self.background_every_s <= 0 {
            return bad("duration, tick and background interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.update_loss_probability) {
            return bad("update loss probability outside [0, 1]".into());
        }
        self.proximity.validate()?;
        let services: BTreeMap<_, _> = self.services.iter().map(|s| (&s.service_id, s.kind)).collect();
        let mut stations = BTreeMap::new();
        for v in &self.vehicles {
            if services.get(&v.service_id) != Some(&ServiceKind::OnBoard) {
                return bad(format!("vehicle {} needs an on-board service", v.vehicle_id));
            }
            if v.path.len() < 2 || v.speed_mps < 0.0 {
                return bad(format!("vehicle {} needs two waypoints and a speed", v.vehicle_id));
            }
            if stations.insert(&v.station_id, &v.service_id).is_some() {
                return bad(format!("station {} defined twice", v.station_id));
            }
        }
        for g in &self.gates {
            if services.get(&g.service_id) != Some(&ServiceKind::Turnstile) {
                return bad(format!("gate {} needs a turnstile service", g.station_id));
            }
            if stations.insert(&g.station_id, &g.service_id).is_some() {
                return bad(format!("station {} defined twice", g.station_id));
            }
        }
        for r in &self.riders {
            for t in &r.trips {
                match t {
                    TripSpec::OnBoard { vehicle_id, ride_s, .. } => {
                        if !self.vehicles.iter().any(|v| &v.vehicle_id == vehicle_id) || *ride_s <= 0 {
                            return bad(format!("{}: bad trip on {vehicle_id}", r.identity_key));
                        }
                    }
                    TripSpec::Turnstile { entry, exit, travel_s, .. } => {
                        let line = |s| self.gates.iter().find(|g| &g.station_id == s).map(|g| &g.service_id);
                        if line(entry).is_none() || line(entry) != line(exit) || entry == exit || *travel_s <= GATE_DWELL_S {
                            return bad(format!("{}: bad gate trip {entry} -> {exit}", r.identity_key));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Deterministic summary of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub seed: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub riders: u64,
    pub vehicles: u64,
    pub gates: u64,
    pub trips_planned: u64,
    pub advertisements: u64,
    pub requests: BTreeMap<String, u64>,
    pub responses: BTreeMap<String, u64>,
    pub updates_dropped: u64,
    pub sessions_validated: u64,
    pub sessions_rejected: u64,
    pub reject_reasons: BTreeMap<String, u64>,
    pub orphans_swept: u64,
    pub records_archived: u64,
    pub gate_opened: u64,
    pub gate_kept_closed: u64,
    pub routes_closed: u64,
    pub wallet_charges: u64,
    pub wallet_debits_cents: i64,
    pub route_payments_cents: i64,
    pub settlement_cents: i64,
    pub settlement_by_customer: BTreeMap<String, i64>,
    pub blocked_riders: u64,
}

impl SimMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub struct SimRun {
    pub metrics: SimMetrics,
    pub gateway: Gateway,
    pub users: Vec<UserId>,
}

struct Rider {
    token: String,
    agent: AgentState,
    radio: PathLossModel,
    trips: Vec<TripSpec>,
    next_trip: usize,
    last_started: Option<SessionId>,
}

struct World<'a> {
    start: Timestamp,
    vehicles: BTreeMap<&'a VehicleId, &'a VehicleSpec>,
    gates: BTreeMap<&'a StationId, &'a GateSpec>,
}

impl World<'_> {
    fn rider_position(&self, rider: &mut Rider, now: Timestamp) -> Option<GeoPoint> {
        let t = now.since(self.start);
        while rider.next_trip < rider.trips.len() && rider.trips[rider.next_trip].span().1 <= t {
            rider.next_trip += 1;
        }
        let trip = rider.trips.get(rider.next_trip)?;
        match trip {
            TripSpec::OnBoard {
                vehicle_id, board_at_s, ..
            } if t >= *board_at_s => {
                let v = self.vehicles[vehicle_id];
                Some(vehicle_position(v, t).offset_m(1.0, 1.0))
            }
            TripSpec::Turnstile {
                entry,
                exit,
                enter_at_s,
                travel_s,
            } => {
                if (*enter_at_s..enter_at_s + GATE_DWELL_S).contains(&t) {
                    Some(self.gates[entry].location.offset_m(0.5, 0.5))
                } else if t >= enter_at_s + travel_s {
                    Some(self.gates[exit].location.offset_m(0.5, 0.5))
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

/// Position along a ping-pong route `t` seconds into the run.
pub fn vehicle_position(v: &VehicleSpec, t: i64) -> GeoPoint {
    let legs: Vec<f64> = v
        .path
        .windows(2)
        .map(|w| haversine_distance(w[0], w[1]) * 1000.0)
        .collect();
    let total: f64 = legs.iter().sum();
    if total <= 0.0 {
        return v.path[0];
    }
    let mut s = (v.speed_mps * t.max(0) as f64) % (2.0 * total);
    if s > total {
        s = 2.0 * total - s;
    }
    for (i, len) in legs.iter().enumerate() {
        if s <= *len || i == legs.len() - 1 {
            let f = if *len > 0.0 { (s / len).min(1.0) } else { 0.0 };
            let (a, b) = (v.path[i], v.path[i + 1]);
            return GeoPoint {
                lat: a.lat + (b.lat - a.lat) * f,
                lon: a.lon + (b.lon - a.lon) * f,
            };
        }
        s -= len;
    }
    v.path[v.path.len() - 1]
}

struct Driver<'a> {
    gateway: &'a Gateway,
    stations: BTreeMap<StationId, Station>,
    metrics: SimMetrics,
    loss_rng: ChaCha8Rng,
    loss_p: f64,
}

impl Driver<'_> {
    fn call(&mut self, kind: &str, req: ApiRequest, now: Timestamp) -> ApiResponse {
        *self.metrics.requests.entry(kind.to_owned()).or_insert(0) += 1;
        let r = self.gateway.handle(&req, now);
        *self.metrics.responses.entry(r.status.to_string()).or_insert(0) += 1;
        r
    }

    fn dispatch(&mut self, rider: &mut Rider, actions: Vec<ProtocolAction>, now: Timestamp) {
        for action in actions {
            let kind = action.kind();
            match action {
                ProtocolAction::StartSession {
                    station_id,
                    advertisement,
                    rssi_dbm,
                    sample_period_s,
                    ..
                } => {
                    let body = json!({
                        "station_id": station_id,
                        "sample_period_s": sample_period_s,
                        "rssi_dbm": rssi_dbm,
                        "location": advertisement.location,
                    });
                    let r = self.call(kind, ApiRequest::post("/v1/sessions", body).with_token(&rider.token), now);
                    let started = r.is_success().then(|| {
                        let id = SessionId::new(r.field("session_id").unwrap_or_default());
                        let kind = serde_json::from_value(r.body["kind"].clone()).unwrap_or(ServiceKind::OnBoard);
                        (id, kind)
                    });
                    match started {
                        Some((session_id, kind)) => {
                            rider.last_started = Some(session_id.clone());
                            rider.agent.handle(AgentInput::SessionStarted { session_id, kind });
                        }
                        None => {
                            rider.last_started = None;
                            rider.agent.handle(AgentInput::SessionStartFailed);
                        }
                    }
                }
                ProtocolAction::UpdateSession {
                    session_id,
                    window_index,
                    rssi_dbm,
                    location,
                    ..
                } => {
                    let body = json!({ "window_index": window_index, "rssi_dbm": rssi_dbm, "location": location });
                    self.patch(rider, kind, session_id, body, now);
                }
                ProtocolAction::MissingData {
                    session_id,
                    window_index,
                    ..
                } => {
                    self.patch(rider, kind, session_id, json!({ "window_index": window_index }), now);
                }
                ProtocolAction::EndSession { session_id, .. } => {
                    if let Some(id) = session_id {
                        let req = ApiRequest::post(format!("/v1/sessions/{id}/end"), json!(null)).with_token(&rider.token);
                        self.call(kind, req, now);
                    }
                }
                ProtocolAction::OpenRequest {
                    station_id,
                    direction,
                    session_id,
                    ..
                } => {
                    let session_id = session_id.or_else(|| rider.last_started.clone());
                    let body = json!({ "station_id": station_id, "direction": direction, "session_id": session_id });
                    let r = self.call(kind, ApiRequest::post("/v1/turnstile/authorize", body).with_token(&rider.token), now);
                    let auth = match (r.is_success(), r.field("decision")) {
                        (true, Some("granted")) => Authorization::Granted,
                        (true, _) => Authorization::Denied,
                        (false, _) => Authorization::Unreachable,
                    };
                    let Some(station) = self.stations.get_mut(&station_id) else { continue };
                    if let Ok(Some(StationOutput::Gate(cmd))) = station.handle(StationEvent::OpenRequest(auth)) {
                        match cmd.decision {
                            crate::station::GateDecision::Open => self.metrics.gate_opened += 1,
                            crate::station::GateDecision::KeepClosed => self.metrics.gate_kept_closed += 1,
                        }
                        rider.agent.handle(AgentInput::Gate(cmd, now));
                    }
                }
            }
        }
    }

    fn patch(&mut self, rider: &Rider, kind: &str, session_id: Option<SessionId>, body: serde_json::Value, now: Timestamp) {
        let Some(id) = session_id else { return };
        if self.loss_rng.gen::<f64>() < self.loss_p {
            self.metrics.updates_dropped += 1;
            return;
        }
        let req = ApiRequest::patch(format!("/v1/sessions/{id}"), body).with_token(&rider.token);
        self.call(kind, req, now);
    }

    fn record(&mut self, rep: BackgroundReport) {
        for p in rep.processed {
            if p.orphan {
                self.metrics.orphans_swept += 1;
            }
            match p.outcome {
                crate::transit::SkimOutcome::Validated { .. } => {
                    self.metrics.sessions_validated += 1;
                    self.metrics.records_archived += 1;
                }
                crate::transit::SkimOutcome::Rejected { reason, .. } => {
                    self.metrics.sessions_rejected += 1;
                    *self
                        .metrics
                        .reject_reasons
                        .entry(reason.as_str().to_owned())
                        .or_insert(0) += 1;
                }
            }
        }
    }
}

fn rider_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64 + 1)
}

/// Runs a scenario to completion. Storage goes through `sealed`; the
/// returned gateway can be inspected afterwards.
pub fn run_scenario(config: &ScenarioConfig, sealed: SealedKv) -> Result<SimRun, SimError> {
    config.validate()?;
    let start = config.start;
    let end = start.plus(config.duration_s);
    let mut gw_config = config.gateway.clone();
    gw_config.token_seed = config.seed;
    let mut gateway = Gateway::new(gw_config, sealed)?;
    for s in &config.services {
        gateway.add_service(s.clone())?;
    }
    let mut stations = BTreeMap::new();
    for v in &config.vehicles {
        gateway.map_station(v.station_id.clone(), v.vehicle_id.clone(), v.service_id.clone())?;
        let cfg = StationConfig {
            station_id: v.station_id.clone(),
            mode: StationMode::OnBoard,
            interval: 1,
            tx_power: DEFAULT_TX_POWER_DBM,
            initial_fix: vehicle_position(v, 0),
        };
        stations.insert(v.station_id.clone(), Station::new(StationState::from_config(&cfg, start)?));
    }
    for g in &config.gates {
        gateway.map_station(g.station_id.clone(), g.line_id.clone(), g.service_id.clone())?;
        let cfg = StationConfig {
            station_id: g.station_id.clone(),
            mode: StationMode::Turnstile,
            interval: 1,
            tx_power: DEFAULT_TX_POWER_DBM,
            initial_fix: g.location,
        };
        stations.insert(g.station_id.clone(), Station::new(StationState::from_config(&cfg, start)?));
    }
    let world = World {
        start,
        vehicles: config.vehicles.iter().map(|v| (&v.vehicle_id, v)).collect(),
        gates: config.gates.iter().map(|g| (&g.station_id, g)).collect(),
    };

    let mut riders = Vec::with_capacity(config.riders.len());
    for (i, spec) in config.riders.iter().enumerate() {
        let body = json!({
            "identity_key": spec.identity_key,
            "gender": spec.gender,
            "birth_date": spec.birth_date,
            "payment_method_ref": spec.payment_method_ref,
            "autocharge": spec.autocharge,
        });
        let r = gateway.handle(&ApiRequest::post("/v1/users", body), start);
        if r.status != 201 {
            return Err(SimError::Setup(r));
        }
        let user_id = UserId::new(r.field("user_id").unwrap_or_default());
        let mut trips = spec.trips.clone();
        trips.sort_by_key(|t| t.span().0);
        riders.push(Rider {
            agent: AgentState::new(user_id.clone(), config.proximity.clone())?,
            radio: PathLossModel::new(
                DEFAULT_TX_POWER_DBM,
                config.path_loss.exponent,
                config.path_loss.noise_sigma_dbm,
                rider_seed(config.seed, i),
            )?,
            token: r.field("token").unwrap_or_default().to_owned(),
            trips,
            next_trip: 0,
            last_started: None,
        });
    }

    let mut driver = Driver {
        gateway: &gateway,
        stations,
        metrics: SimMetrics {
            seed: config.seed,
            start,
            end,
            riders: riders.len() as u64,
            vehicles: config.vehicles.len() as u64,
            gates: config.gates.len() as u64,
            trips_planned: config.riders.iter().map(|r| r.trips.len() as u64).sum(),
            ..SimMetrics::default()
        },
        loss_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x1055),
        loss_p: config.update_loss_probability,
    };
    let pl = &config.path_loss;
    let mut now = start;
    while now <= end {
        let t = now.since(start);
        let mut ads = Vec::new();
        for (id, st) in driver.stations.iter_mut() {
            let fix = match world.vehicles.values().find(|v| &v.station_id == id) {
                Some(v) => vehicle_position(v, t),
                None => world.gates[id].location,
            };
            st.handle(StationEvent::GpsFix(fix, now))?;
            if let Some(StationOutput::Advertise(a)) = st.handle(StationEvent::Tick(now))? {
                ads.push(a);
            }
        }
        driver.metrics.advertisements += ads.len() as u64;
        for rider in riders.iter_mut() {
            if let Some(pos) = world.rider_position(rider, now) {
                for a in &ads {
                    // beyond this distance even a +4 sigma draw stays under the sensitivity floor
                    let reach = 10f64.powf((a.tx_power_dbm - pl.sensitivity_dbm + 4.0 * pl.noise_sigma_dbm) / (10.0 * pl.exponent));
                    let d = haversine_distance(pos, a.location) * 1000.0;
                    if d > reach {
                        continue;
                    }
                    let rssi = rider.radio.rssi_with_tx(a.tx_power_dbm, d);
                    if rssi < pl.sensitivity_dbm {
                        continue;
                    }
                    let sample = RssiSample {
                        station_id: a.station_id.clone(),
                        rssi_dbm: rssi,
                        at: now,
                        advertisement: a.clone(),
                    };
                    let actions = rider.agent.handle(AgentInput::Heard(sample));
                    driver.dispatch(rider, actions, now);
                }
            }
            if !rider.agent.is_idle() {
                let actions = rider.agent.handle(AgentInput::Clock(now));
                driver.dispatch(rider, actions, now);
            }
        }
        if t % config.background_every_s == 0 {
            let rep = gateway.run_background(now)?;
            driver.record(rep);
        }
        now = now.plus(config.tick_s);
    }

    // wind down: let agents notice the loss of signal, then sweep and close
    let settle = end.plus(config.proximity.loss_timeout_s + config.proximity.sample_period_s);
    for rider in riders.iter_mut() {
        let actions = rider.agent.handle(AgentInput::Clock(settle));
        driver.dispatch(rider, actions, settle);
    }
    let rep = gateway.run_background(settle)?;
    driver.record(rep);
    let last = settle.plus(config.gateway.orphans.on_board_s.max(config.gateway.orphans.turnstile_s) + 1);
    let rep = gateway.run_background(last)?;
    driver.record(rep);
    gateway.flush_routes(last)?;

    let mut metrics = driver.metrics;
    let q = gateway.quickin();
    let users = q.user_ids();
    for u in &users {
        let w = q.wallet(u)?;
        metrics.wallet_debits_cents += w.total_debits().cents;
        metrics.wallet_charges += w.ledger.iter().filter(|e| e.reference.starts_with("route:")).count() as u64;
        metrics.blocked_riders += w.blocked as u64;
        for r in q.routes_of(u)? {
            metrics.routes_closed += 1;
            metrics.route_payments_cents += r.payment.amount.cents;
        }
    }
    let mut customers: Vec<_> = config.services.iter().map(|s| s.customer_id.clone()).collect();
    customers.sort();
    customers.dedup();
    for c in customers {
        let rep = q.settle_customer(&c, start, last.plus(1))?;
        metrics.settlement_cents += rep.total.cents;
        metrics.settlement_by_customer.insert(c.to_string(), rep.total.cents);
    }
    Ok(SimRun {
        metrics,
        gateway,
        users,
    })
}

/// A one-day scenario around Bologna: `buses` vehicles on two on-board
/// services, `lines` turnstile lines with three gates each, and `riders`
/// riders taking two to four trips.
pub fn synthetic_day(seed: u64, riders: usize, buses: usize, lines: usize) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = GeoPoint { lat: 44.4940, lon: 11.3430 };
    let eur = Money::eur;
    let mut services = vec![
        TransportService {
            service_id: "bus-urban".into(),
            customer_id: "tper".into(),
            kind: ServiceKind::OnBoard,
            fare_plan: FarePlan::Flat { price: eur(150) },
        },
        TransportService {
            service_id: "bus-suburban".into(),
            customer_id: "tper".into(),
            kind: ServiceKind::OnBoard,
            fare_plan: FarePlan::Distance {
                base: eur(100),
                per_km: eur(20),
                min: eur(150),
                max: eur(500),
            },
        },
    ];
    let vehicles: Vec<VehicleSpec> = (0..buses)
        .map(|i| {
            let theta = TAU * i as f64 / buses.max(1) as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let reach = 4000.0 + 500.0 * (i % 3) as f64;
            VehicleSpec {
                vehicle_id: VehicleId::new(format!("bus-{i:02}")),
                station_id: StationId::new(format!("st-bus-{i:02}")),
                service_id: if i < buses.div_ceil(2) { "bus-urban" } else { "bus-suburban" }.into(),
                path: vec![
                    center.offset_m(-reach * dx, -reach * dy),
                    center.offset_m(-60.0 * dy, 60.0 * dx),
                    center.offset_m(reach * dx, reach * dy),
                ],
                speed_mps: rng.gen_range(6.0..10.0),
            }
        })
        .collect();
    let mut gates = Vec::new();
    for j in 0..lines {
        let service_id = ServiceId::new(format!("metro-{j}"));
        services.push(TransportService {
            service_id: service_id.clone(),
            customer_id: "metro-co".into(),
            kind: ServiceKind::Turnstile,
            fare_plan: if j % 2 == 0 {
                FarePlan::Flat { price: eur(200) }
            } else {
                FarePlan::Distance {
                    base: eur(120),
                    per_km: eur(30),
                    min: eur(150),
                    max: eur(400),
                }
            },
        });
        for k in 0..3 {
            gates.push(GateSpec {
                station_id: StationId::new(format!("gate-{j}-{k}")),
                service_id: service_id.clone(),
                line_id: VehicleId::new(format!("line-{j}")),
                location: center.offset_m(1500.0 * k as f64 - 1500.0, 2500.0 * j as f64 - 1200.0),
            });
        }
    }
    let day = 86_400;
    let riders = (0..riders)
        .map(|i| {
            let gender = match rng.gen_range(0..20) {
                0 => Gender::Unspecified,
                x if x % 2 == 0 => Gender::Female,
                _ => Gender::Male,
            };
            let birth_date = NaiveDate::from_ymd_opt(rng.gen_range(1938..2012), rng.gen_range(1..=12), rng.gen_range(1..=28))
                .expect("valid date");
            let mut trips = Vec::new();
            let mut t: i64 = 6 * 3600 + rng.gen_range(0..3 * 3600);
            let n = rng.gen_range(2..=4);
            while trips.len() < n && t < 22 * 3600 && (buses > 0 || lines > 0) {
                let trip = if buses > 0 && (lines == 0 || rng.gen_bool(0.7)) {
                    TripSpec::OnBoard {
                        vehicle_id: vehicles[rng.gen_range(0..vehicles.len())].vehicle_id.clone(),
                        board_at_s: t,
                        ride_s: rng.gen_range(300..2400),
                    }
                } else {
                    let line = rng.gen_range(0..lines);
                    let a = rng.gen_range(0..3);
                    let b = (a + rng.gen_range(1..3)) % 3;
                    TripSpec::Turnstile {
                        entry: StationId::new(format!("gate-{line}-{a}")),
                        exit: StationId::new(format!("gate-{line}-{b}")),
                        enter_at_s: t,
                        travel_s: rng.gen_range(240..1500),
                    }
                };
                t = trip.span().1
                    + if rng.gen_bool(0.5) {
                        rng.gen_range(300..2400)
                    } else {
                        rng.gen_range(3700..4 * 3600)
                    };
                trips.push(trip);
            }
            RiderSpec {
                identity_key: format!("rider-{i:03}"),
                gender,
                birth_date,
                payment_method_ref: format!("card-{i:03}"),
                autocharge: Some(AutoCharge {
                    threshold: eur(0),
                    amount: eur(2000),
                }),
                trips,
            }
        })
        .collect();
    ScenarioConfig {
        seed,
        start: Timestamp::parse_rfc3339("2020-03-02T00:00:00Z").expect("valid start"),
        duration_s: day,
        tick_s: 1,
        background_every_s: 60,
        update_loss_probability: 0.0,
        path_loss: PathLossParams::default(),
        proximity: ProximityConfig::default(),
        gateway: GatewayConfig::default(),
        services,
        vehicles,
        gates,
        riders,
    }
}
