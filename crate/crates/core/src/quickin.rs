//! Account-side services: users and wallets, the station registry, route
//! assembly and pricing, customer settlement, and route retention.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    AutoCharge, CustomerId, Gender, Money, PaymentLine, RouteId, RoutePayment, ServiceId, SessionId,
    SessionPayment, StationId, Timestamp, TransportService, User, UserId, UserRoute, VehicleAccessIdentifier,
    VehicleId, Wallet, WalletId,
};
use crate::privacy::envelope::random_key_suffix;
use crate::privacy::{EnvelopeError, SealedKv};
use crate::store::{KvStore, StoreError};

pub const DEFAULT_TRANSFER_WINDOW_S: i64 = 3600;
pub const DEFAULT_TRANSFER_DISCOUNT: f64 = 0.5;
pub const DEFAULT_RETENTION_DAYS: i64 = 30;
pub const DEFAULT_WALLET_FLOOR_CENTS: i64 = -500;
pub const ROUTE_PREFIX: &str = "routes/";
const DAY_S: i64 = 86_400;

#[derive(Debug, Error)]
pub enum QuickinError {
    #[error("a user with this identity is already registered")]
    DuplicateIdentity,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown station {0}")]
    UnknownStation(StationId),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("unknown customer {0}")]
    UnknownCustomer(CustomerId),
    #[error(transparent)]
    Storage(#[from] EnvelopeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteAssemblyConfig {
    pub transfer_window_s: i64,
}

impl Default for RouteAssemblyConfig {
    fn default() -> Self {
        Self {
            transfer_window_s: DEFAULT_TRANSFER_WINDOW_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub user_id: UserId,
    pub service_id: ServiceId,
    pub valid_from: Timestamp,
    pub valid_to: Timestamp,
}

impl Subscription {
    pub fn covers(&self, user: &UserId, service: &ServiceId, at: Timestamp) -> bool {
        &self.user_id == user && &self.service_id == service && self.valid_from <= at && at < self.valid_to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountPolicy {
    /// Fraction taken off every session after the first one in a route.
    pub transfer_discount: f64,
    #[serde(default)]
    pub subscriptions: Vec<Subscription>,
}

impl Default for DiscountPolicy {
    fn default() -> Self {
        Self {
            transfer_discount: DEFAULT_TRANSFER_DISCOUNT,
            subscriptions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub max_age_days: i64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            max_age_days: DEFAULT_RETENTION_DAYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuickinConfig {
    pub wallet_floor: Money,
    pub route: RouteAssemblyConfig,
    pub discounts: DiscountPolicy,
    pub retention: RetentionConfig,
}

impl Default for QuickinConfig {
    fn default() -> Self {
        Self {
            wallet_floor: Money::eur(DEFAULT_WALLET_FLOOR_CENTS),
            route: RouteAssemblyConfig::default(),
            discounts: DiscountPolicy::default(),
            retention: RetentionConfig::default(),
        }
    }
}

impl QuickinConfig {
    pub fn validate(&self) -> Result<(), QuickinError> {
        if self.route.transfer_window_s <= 0 {
            return Err(QuickinError::Invalid("transfer window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.discounts.transfer_discount) {
            return Err(QuickinError::Invalid("transfer discount outside [0, 1]".into()));
        }
        if self.retention.max_age_days <= 0 {
            return Err(QuickinError::Invalid("retention must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub customer_id: CustomerId,
    pub from: Timestamp,
    pub to: Timestamp,
    pub total: Money,
    pub session_count: u64,
}

/// A validated session with its fare, ready for route assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricedSession {
    pub session_id: SessionId,
    pub service_id: ServiceId,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub payment: SessionPayment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum AuthDecision {
    Granted,
    Denied(String),
}

impl AuthDecision {
    pub fn is_granted(&self) -> bool {
        matches!(self, AuthDecision::Granted)
    }
}

/// Prices a route: subscribed sessions are free, the first remaining
/// session pays full fare, and each later one gets the transfer discount.
pub fn route_payment(route: &UserRoute, sessions: &[PricedSession], policy: &DiscountPolicy) -> RoutePayment {
    let mut breakdown = Vec::with_capacity(sessions.len());
    let mut paid_before = false;
    for s in sessions {
        let gross = s.payment.amount;
        let subscribed = policy
            .subscriptions
            .iter()
            .any(|sub| sub.covers(&route.user_id, &s.service_id, s.start_ts));
        let discount = if subscribed {
            gross
        } else if paid_before {
            gross.scale(policy.transfer_discount).min(gross)
        } else {
            Money::zero(gross.currency)
        };
        if !subscribed {
            paid_before = true;
        }
        breakdown.push(PaymentLine {
            session_id: s.session_id.clone(),
            gross,
            discount,
        });
    }
    let currency = sessions
        .first()
        .map(|s| s.payment.amount.currency)
        .unwrap_or_default();
    let amount = breakdown
        .iter()
        .fold(Money::zero(currency), |acc, l| acc + l.gross - l.discount);
    RoutePayment {
        route_id: route.route_id.clone(),
        amount,
        breakdown,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeOutcome {
    pub balance: Money,
    pub blocked: bool,
    pub topped_up: Option<Money>,
}

/// Debits a route payment. Charging never fails: a wallet pushed below its
/// floor is blocked from new rides instead.
pub fn charge_wallet(wallet: &mut Wallet, payment: &RoutePayment, at: Timestamp) -> ChargeOutcome {
    wallet.post(at, -payment.amount, format!("route:{}", payment.route_id));
    let mut topped_up = None;
    if let Some(AutoCharge { threshold, amount }) = wallet.autocharge.clone() {
        if wallet.balance.cents < threshold.cents {
            wallet.post(at, amount, format!("autocharge:{}", wallet.payment_method_ref));
            topped_up = Some(amount);
        }
    }
    wallet.blocked = wallet.balance.cents < wallet.floor.cents;
    ChargeOutcome {
        balance: wallet.balance,
        blocked: wallet.blocked,
        topped_up,
    }
}

/// Route history entry as persisted (encrypted) in the route store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub route: UserRoute,
    pub payment: RoutePayment,
    pub closed_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedRoute {
    pub record: RouteRecord,
    pub charge: ChargeOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouteAssembly {
    Extended(UserRoute),
    Opened {
        route: UserRoute,
        closed: Option<ClosedRoute>,
    },
}

impl RouteAssembly {
    pub fn route(&self) -> &UserRoute {
        match self {
            RouteAssembly::Extended(r) => r,
            RouteAssembly::Opened { route, .. } => route,
        }
    }
}

#[derive(Debug)]
struct OpenRoute {
    route: UserRoute,
    sessions: Vec<PricedSession>,
    last_end: Timestamp,
}

#[derive(Debug)]
struct Account {
    user: User,
    wallet: Wallet,
    open_route: Option<OpenRoute>,
}

#[derive(Debug, Clone)]
struct SettlementEntry {
    customer_id: CustomerId,
    end_ts: Timestamp,
    amount: Money,
}

/// Deletes route records whose creation time is at least `max_age_days`
/// before `now`. Works on keys alone, so no record is decrypted.
pub fn retention_sweep(store: &dyn KvStore, now: Timestamp, config: &RetentionConfig) -> Result<Vec<String>, StoreError> {
    let cutoff = now.secs() - config.max_age_days * DAY_S;
    let mut deleted = Vec::new();
    for key in store.keys_with_prefix(ROUTE_PREFIX)? {
        let Some(created) = route_key_created_at(&key) else { continue };
        if created.secs() <= cutoff {
            store.delete(&key)?;
            deleted.push(key);
        }
    }
    Ok(deleted)
}

fn route_key(created_at: Timestamp) -> String {
    format!("{ROUTE_PREFIX}{:012}/{}", created_at.secs().max(0), random_key_suffix())
}

pub fn route_key_created_at(key: &str) -> Option<Timestamp> {
    let rest = key.strip_prefix(ROUTE_PREFIX)?;
    let (secs, _) = rest.split_once('/')?;
    secs.parse().ok().map(Timestamp)
}

fn identity_digest(identity_key: &str) -> String {
    hex::encode(Sha256::digest(identity_key.trim().to_lowercase().as_bytes()))
}

pub struct Quickin {
    config: QuickinConfig,
    accounts: RwLock<HashMap<UserId, Arc<Mutex<Account>>>>,
    identities: Mutex<HashSet<String>>,
    registry: RwLock<HashMap<StationId, VehicleAccessIdentifier>>,
    services: RwLock<HashMap<ServiceId, TransportService>>,
    settlement: Mutex<Vec<SettlementEntry>>,
    routes: SealedKv,
    route_index: Mutex<HashMap<UserId, Vec<String>>>,
    next_user: AtomicU64,
    next_route: AtomicU64,
}

impl Quickin {
    pub fn new(config: QuickinConfig, routes: SealedKv) -> Result<Self, QuickinError> {
        config.validate()?;
        Ok(Self {
            config,
            accounts: RwLock::default(),
            identities: Mutex::default(),
            registry: RwLock::default(),
            services: RwLock::default(),
            settlement: Mutex::default(),
            routes,
            route_index: Mutex::default(),
            next_user: AtomicU64::new(1),
            next_route: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &QuickinConfig {
        &self.config
    }

    pub fn register_service(&self, service: TransportService) -> Result<(), QuickinError> {
        service.fare_plan.validate().map_err(QuickinError::Invalid)?;
        self.services
            .write()
            .unwrap()
            .insert(service.service_id.clone(), service);
        Ok(())
    }

    pub fn service(&self, id: &ServiceId) -> Result<TransportService, QuickinError> {
        self.services
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| QuickinError::UnknownService(id.clone()))
    }

    /// Points a station at a vehicle and service. Re-mapping a station is a
    /// registry update only.
    pub fn map_station(&self, station: StationId, vehicle: VehicleId, service: ServiceId) -> Result<(), QuickinError> {
        self.service(&service)?;
        self.registry.write().unwrap().insert(
            station.clone(),
            VehicleAccessIdentifier {
                station_id: station,
                vehicle_id: vehicle,
                service_id: service,
            },
        );
        Ok(())
    }

    pub fn resolve_station(&self, station: &StationId) -> Result<(VehicleId, ServiceId), QuickinError> {
        self.registry
            .read()
            .unwrap()
            .get(station)
            .map(|v| (v.vehicle_id.clone(), v.service_id.clone()))
            .ok_or_else(|| QuickinError::UnknownStation(station.clone()))
    }

    pub fn register_user(
        &self,
        identity_key: &str,
        gender: Gender,
        birth_date: NaiveDate,
        payment_method_ref: &str,
        autocharge: Option<AutoCharge>,
        now: Timestamp,
    ) -> Result<(User, Wallet), QuickinError> {
        if identity_key.trim().is_empty() {
            return Err(QuickinError::Invalid("identity key required".into()));
        }
        if birth_date > now.date() {
            return Err(QuickinError::Invalid("birth date in the future".into()));
        }
        if let Some(ac) = &autocharge {
            if ac.amount.cents <= 0 || ac.amount.currency != self.config.wallet_floor.currency {
                return Err(QuickinError::Invalid("autocharge amount must be positive".into()));
            }
        }
        let digest = identity_digest(identity_key);
        if !self.identities.lock().unwrap().insert(digest) {
            return Err(QuickinError::DuplicateIdentity);
        }
        let n = self.next_user.fetch_add(1, Ordering::Relaxed);
        let user = User {
            user_id: UserId::new(format!("u-{n:06}")),
            gender,
            birth_date,
            registered_at: now,
        };
        let mut wallet = Wallet::new(
            WalletId::new(format!("w-{n:06}")),
            user.user_id.clone(),
            self.config.wallet_floor,
            payment_method_ref.to_owned(),
        );
        wallet.autocharge = autocharge;
        self.accounts.write().unwrap().insert(
            user.user_id.clone(),
            Arc::new(Mutex::new(Account {
                user: user.clone(),
                wallet: wallet.clone(),
                open_route: None,
            })),
        );
        Ok((user, wallet))
    }

    fn account(&self, user: &UserId) -> Result<Arc<Mutex<Account>>, QuickinError> {
        self.accounts
            .read()
            .unwrap()
            .get(user)
            .cloned()
            .ok_or_else(|| QuickinError::UnknownUser(user.clone()))
    }

    pub fn user(&self, id: &UserId) -> Result<User, QuickinError> {
        Ok(self.account(id)?.lock().unwrap().user.clone())
    }

    pub fn wallet(&self, id: &UserId) -> Result<Wallet, QuickinError> {
        Ok(self.account(id)?.lock().unwrap().wallet.clone())
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        let mut ids: Vec<_> = self.accounts.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn authorize(&self, user: &UserId) -> AuthDecision {
        match self.account(user) {
            Err(_) => AuthDecision::Denied("unknown-user".into()),
            Ok(acc) if acc.lock().unwrap().wallet.blocked => AuthDecision::Denied("blocked".into()),
            Ok(_) => AuthDecision::Granted,
        }
    }

    /// Adds a validated session to the user's open route, closing the
    /// previous route first when the transfer window has passed.
    pub fn assemble_route(&self, user: &UserId, session: PricedSession, now: Timestamp) -> Result<RouteAssembly, QuickinError> {
        let acc = self.account(user)?;
        let mut acc = acc.lock().unwrap();
        let window = self.config.route.transfer_window_s;
        if let Some(open) = acc.open_route.as_mut() {
            if session.start_ts.since(open.last_end) <= window {
                open.route.session_ids.push(session.session_id.clone());
                open.last_end = open.last_end.max(session.end_ts);
                open.sessions.push(session);
                return Ok(RouteAssembly::Extended(open.route.clone()));
            }
        }
        let closed = self.close_open_route(&mut acc, now)?;
        let n = self.next_route.fetch_add(1, Ordering::Relaxed);
        let route = UserRoute {
            route_id: RouteId::new(format!("r-{n:06}")),
            user_id: user.clone(),
            session_ids: vec![session.session_id.clone()],
            created_at: now,
        };
        acc.open_route = Some(OpenRoute {
            route: route.clone(),
            last_end: session.end_ts,
            sessions: vec![session],
        });
        Ok(RouteAssembly::Opened { route, closed })
    }

    fn close_open_route(&self, acc: &mut Account, now: Timestamp) -> Result<Option<ClosedRoute>, QuickinError> {
        let Some(open) = acc.open_route.take() else {
            return Ok(None);
        };
        let payment = route_payment(&open.route, &open.sessions, &self.config.discounts);
        let charge = charge_wallet(&mut acc.wallet, &payment, now);
        {
            let services = self.services.read().unwrap();
            let mut ledger = self.settlement.lock().unwrap();
            for (line, s) in payment.breakdown.iter().zip(&open.sessions) {
                let Some(svc) = services.get(&s.service_id) else { continue };
                ledger.push(SettlementEntry {
                    customer_id: svc.customer_id.clone(),
                    end_ts: s.end_ts,
                    amount: line.gross - line.discount,
                });
            }
        }
        let record = RouteRecord {
            route: open.route,
            payment,
            closed_at: now,
        };
        let key = route_key(record.route.created_at);
        self.routes.put_json(&key, &record)?;
        self.route_index
            .lock()
            .unwrap()
            .entry(record.route.user_id.clone())
            .or_default()
            .push(key);
        Ok(Some(ClosedRoute { record, charge }))
    }

    /// Closes every open route whose last session ended more than the
    /// transfer window before `now`.
    pub fn close_expired_routes(&self, now: Timestamp) -> Result<Vec<ClosedRoute>, QuickinError> {
        self.close_routes_where(now, |last_end| now.since(last_end) > self.config.route.transfer_window_s)
    }

    /// Closes every open route regardless of age.
    pub fn close_all_routes(&self, now: Timestamp) -> Result<Vec<ClosedRoute>, QuickinError> {
        self.close_routes_where(now, |_| true)
    }

    fn close_routes_where(&self, now: Timestamp, due: impl Fn(Timestamp) -> bool) -> Result<Vec<ClosedRoute>, QuickinError> {
        let mut out = Vec::new();
        for id in self.user_ids() {
            let acc = self.account(&id)?;
            let mut acc = acc.lock().unwrap();
            if acc.open_route.as_ref().is_some_and(|r| due(r.last_end)) {
                out.extend(self.close_open_route(&mut acc, now)?);
            }
        }
        Ok(out)
    }

    pub fn has_open_route(&self, user: &UserId) -> bool {
        self.account(user)
            .map(|a| a.lock().unwrap().open_route.is_some())
            .unwrap_or(false)
    }

    /// Route history of one user, oldest first.
    pub fn routes_of(&self, user: &UserId) -> Result<Vec<RouteRecord>, QuickinError> {
        self.account(user)?;
        let keys = self.route_index.lock().unwrap().get(user).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for key in keys {
            if let Some(r) = self.routes.get_json::<RouteRecord>(&key)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn retention_sweep(&self, now: Timestamp) -> Result<usize, QuickinError> {
        let deleted: HashSet<String> = retention_sweep(self.routes.kv().as_ref(), now, &self.config.retention)?
            .into_iter()
            .collect();
        if !deleted.is_empty() {
            for keys in self.route_index.lock().unwrap().values_mut() {
                keys.retain(|k| !deleted.contains(k));
            }
        }
        Ok(deleted.len())
    }

    pub fn customer_exists(&self, customer: &CustomerId) -> bool {
        self.services
            .read()
            .unwrap()
            .values()
            .any(|s| &s.customer_id == customer)
    }

    /// Amount owed to a customer for rides ending in `[from, to)`. Only
    /// charged (closed-route) sessions count, at their net price.
    pub fn settle_customer(&self, customer: &CustomerId, from: Timestamp, to: Timestamp) -> Result<SettlementReport, QuickinError> {
        if !self.customer_exists(customer) {
            return Err(QuickinError::UnknownCustomer(customer.clone()));
        }
        let ledger = self.settlement.lock().unwrap();
        let mut total = Money::zero(self.config.wallet_floor.currency);
        let mut session_count = 0;
        for e in ledger
            .iter()
            .filter(|e| &e.customer_id == customer && from <= e.end_ts && e.end_ts < to)
        {
            total = total + e.amount;
            session_count += 1;
        }
        Ok(SettlementReport {
            customer_id: customer.clone(),
            from,
            to,
            total,
            session_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FarePlan, ServiceKind};
    use crate::privacy::KeyService;
    use crate::store::MemoryKv;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn quickin_with(kv: Arc<MemoryKv>) -> Quickin {
        let q = Quickin::new(QuickinConfig::default(), SealedKv::new(kv, Arc::new(KeyService::ephemeral()))).unwrap();
        for (svc, cust) in [("bus-1", "tper"), ("bus-2", "tper"), ("metro", "metro-co")] {
            q.register_service(TransportService {
                service_id: svc.into(),
                customer_id: cust.into(),
                kind: ServiceKind::OnBoard,
                fare_plan: FarePlan::Flat { price: Money::eur(150) },
            })
            .unwrap();
        }
        q
    }

    fn quickin() -> Quickin {
        quickin_with(Arc::new(MemoryKv::new()))
    }

    fn register(q: &Quickin, key: &str) -> UserId {
        q.register_user(key, Gender::Female, d("1990-01-01"), "card-1", None, Timestamp(1_600_000_000))
            .unwrap()
            .0
            .user_id
    }

    fn priced(id: &str, service: &str, start: i64, end: i64, cents: i64) -> PricedSession {
        PricedSession {
            session_id: id.into(),
            service_id: service.into(),
            start_ts: Timestamp(start),
            end_ts: Timestamp(end),
            payment: SessionPayment {
                session_id: id.into(),
                service_id: service.into(),
                amount: Money::eur(cents),
                plan_snapshot: FarePlan::Flat { price: Money::eur(cents) },
            },
        }
    }

    fn route(user: &str) -> UserRoute {
        UserRoute {
            route_id: "r".into(),
            user_id: user.into(),
            session_ids: vec![],
            created_at: Timestamp(0),
        }
    }

    #[test]
    fn registration() {
        let q = quickin();
        let (u, w) = q
            .register_user("ID-1", Gender::Unspecified, d("1980-02-02"), "card", None, Timestamp(1_600_000_000))
            .unwrap();
        assert_eq!(w.balance, Money::eur(0));
        assert_eq!(w.user_id, u.user_id);
        assert!(matches!(
            q.register_user(" id-1 ", Gender::Male, d("1970-01-01"), "card2", None, Timestamp(1_600_000_000)),
            Err(QuickinError::DuplicateIdentity)
        ));
        assert!(matches!(
            q.register_user("ID-2", Gender::Male, d("2090-01-01"), "card", None, Timestamp(1_600_000_000)),
            Err(QuickinError::Invalid(_))
        ));
    }

    #[test]
    fn route_pricing() {
        let r = route("u");
        let p = route_payment(&r, &[priced("a", "bus-1", 0, 600, 150)], &DiscountPolicy::default());
        assert_eq!(p.amount.cents, 150);

        let two = [priced("a", "bus-1", 0, 600, 150), priced("b", "bus-2", 1800, 2400, 150)];
        let p = route_payment(&r, &two, &DiscountPolicy::default());
        assert_eq!(p.amount.cents, 225);
        assert_eq!(p.breakdown[1].discount.cents, 75);

        let policy = DiscountPolicy {
            transfer_discount: 0.5,
            subscriptions: vec![Subscription {
                user_id: "u".into(),
                service_id: "bus-1".into(),
                valid_from: Timestamp(0),
                valid_to: Timestamp(10_000),
            }],
        };
        let p = route_payment(&r, &two, &policy);
        // subscribed first leg is free; the second leg becomes the full-fare one
        assert_eq!(p.breakdown[0].discount.cents, 150);
        assert_eq!(p.amount.cents, 150);
    }

    #[test]
    fn wallet_charging() {
        let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "card".into());
        let pay = |c| RoutePayment {
            route_id: "r".into(),
            amount: Money::eur(c),
            breakdown: vec![],
        };
        w.post(Timestamp(0), Money::eur(1000), "seed");
        assert_eq!(charge_wallet(&mut w, &pay(225), Timestamp(1)).balance.cents, 775);

        let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "card".into());
        w.post(Timestamp(0), Money::eur(100), "seed");
        let out = charge_wallet(&mut w, &pay(225), Timestamp(1));
        assert_eq!((out.balance.cents, out.blocked), (-125, false));

        let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "card".into());
        w.post(Timestamp(0), Money::eur(-400), "seed");
        let out = charge_wallet(&mut w, &pay(225), Timestamp(1));
        assert_eq!((out.balance.cents, out.blocked), (-625, true));
        assert!(w.ledger_consistent());

        let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "card".into());
        w.autocharge = Some(AutoCharge {
            threshold: Money::eur(0),
            amount: Money::eur(2000),
        });
        let out = charge_wallet(&mut w, &pay(225), Timestamp(1));
        assert_eq!(out.balance.cents, 1775);
        assert_eq!(out.topped_up, Some(Money::eur(2000)));
        assert_eq!(w.total_debits().cents, 225);
    }

    #[test]
    fn authorization() {
        let q = quickin();
        let u = register(&q, "a");
        assert_eq!(q.authorize(&u), AuthDecision::Granted);
        assert_eq!(q.authorize(&"nobody".into()), AuthDecision::Denied("unknown-user".into()));
        q.account(&u).unwrap().lock().unwrap().wallet.blocked = true;
        assert_eq!(q.authorize(&u), AuthDecision::Denied("blocked".into()));
    }

    #[test]
    fn station_registry() {
        let q = quickin();
        q.map_station("st-1".into(), "bus-42".into(), "bus-1".into()).unwrap();
        assert_eq!(q.resolve_station(&"st-1".into()).unwrap(), ("bus-42".into(), "bus-1".into()));
        q.map_station("st-1".into(), "bus-43".into(), "bus-2".into()).unwrap();
        assert_eq!(q.resolve_station(&"st-1".into()).unwrap(), ("bus-43".into(), "bus-2".into()));
        assert!(matches!(q.resolve_station(&"zz".into()), Err(QuickinError::UnknownStation(_))));
        assert!(q.map_station("st-2".into(), "v".into(), "nope".into()).is_err());
    }

    #[test]
    fn route_assembly_by_transfer_window() {
        let q = quickin();
        let u = register(&q, "a");
        // sessions 20 minutes apart: one route
        let a = q.assemble_route(&u, priced("s1", "bus-1", 0, 600, 150), Timestamp(700)).unwrap();
        assert!(matches!(a, RouteAssembly::Opened { closed: None, .. }));
        let b = q.assemble_route(&u, priced("s2", "bus-2", 1800, 2400, 150), Timestamp(2500)).unwrap();
        assert!(matches!(&b, RouteAssembly::Extended(r) if r.session_ids.len() == 2));
        // 90 minutes later: new route, previous one closed and charged
        let c = q.assemble_route(&u, priced("s3", "bus-1", 2400 + 5400, 8400, 150), Timestamp(8500)).unwrap();
        let RouteAssembly::Opened { closed: Some(closed), .. } = c else {
            panic!("expected closed route")
        };
        assert_eq!(closed.record.payment.amount.cents, 225);
        assert_eq!(q.wallet(&u).unwrap().balance.cents, -225);
        // single session then timeout
        assert!(q.close_expired_routes(Timestamp(8400 + 3600)).unwrap().is_empty());
        let closed = q.close_expired_routes(Timestamp(8400 + 3601)).unwrap();
        assert_eq!(closed.len(), 1);
        assert_eq!(closed[0].record.route.session_ids.len(), 1);
        assert_eq!(q.routes_of(&u).unwrap().len(), 2);
    }

    #[test]
    fn settlement_sums_net_session_amounts() {
        let q = quickin();
        let u = register(&q, "a");
        let v = register(&q, "b");
        q.assemble_route(&u, priced("s1", "bus-1", 0, 600, 150), Timestamp(600)).unwrap();
        q.assemble_route(&v, priced("s2", "bus-2", 100, 700, 224), Timestamp(700)).unwrap();
        q.assemble_route(&v, priced("s3", "metro", 200, 800, 300), Timestamp(800)).unwrap();
        q.close_all_routes(Timestamp(10_000)).unwrap();
        let rep = q.settle_customer(&"tper".into(), Timestamp(0), Timestamp(1000)).unwrap();
        assert_eq!((rep.total.cents, rep.session_count), (374, 2));
        let rep = q.settle_customer(&"tper".into(), Timestamp(650), Timestamp(1000)).unwrap();
        assert_eq!((rep.total.cents, rep.session_count), (224, 1));
        let rep = q.settle_customer(&"tper".into(), Timestamp(5000), Timestamp(6000)).unwrap();
        assert_eq!((rep.total.cents, rep.session_count), (0, 0));
        // the metro leg rode as a transfer at half price
        let rep = q.settle_customer(&"metro-co".into(), Timestamp(0), Timestamp(1000)).unwrap();
        assert_eq!(rep.total.cents, 150);
        assert!(matches!(
            q.settle_customer(&"ghost".into(), Timestamp(0), Timestamp(1)),
            Err(QuickinError::UnknownCustomer(_))
        ));
    }

    #[test]
    fn retention_boundaries() {
        let kv = MemoryKv::new();
        let now = Timestamp(100 * DAY_S);
        for (age_days, tag) in [(31, "a"), (29, "b"), (30, "c")] {
            let key = format!("{ROUTE_PREFIX}{:012}/{tag}", now.secs() - age_days * DAY_S);
            kv.put(&key, b"x").unwrap();
        }
        kv.put("completed/bus-1/zzz", b"y").unwrap();
        let deleted = retention_sweep(&kv, now, &RetentionConfig::default()).unwrap();
        assert_eq!(deleted.len(), 2);
        let left = kv.keys_with_prefix(ROUTE_PREFIX).unwrap();
        assert_eq!(left.len(), 1);
        assert!(left[0].ends_with("/b"));
        assert!(kv.get("completed/bus-1/zzz").unwrap().is_some());
    }

    #[test]
    fn quickin_sweep_updates_history() {
        let kv = Arc::new(MemoryKv::new());
        let q = quickin_with(kv.clone());
        let u = register(&q, "a");
        q.assemble_route(&u, priced("s1", "bus-1", 0, 600, 150), Timestamp(600)).unwrap();
        q.close_all_routes(Timestamp(700)).unwrap();
        assert_eq!(q.routes_of(&u).unwrap().len(), 1);
        assert_eq!(q.retention_sweep(Timestamp(600 + 30 * DAY_S)).unwrap(), 1);
        assert!(q.routes_of(&u).unwrap().is_empty());
        assert!(kv.is_empty());
    }

    proptest! {
        #[test]
        fn discounts_never_raise_price(
            fares in proptest::collection::vec(0i64..1000, 1..8),
            ratio in 0.0f64..=1.0,
        ) {
            let sessions: Vec<_> = fares
                .iter()
                .enumerate()
                .map(|(i, c)| priced(&format!("s{i}"), "bus-1", i as i64 * 100, i as i64 * 100 + 50, *c))
                .collect();
            let policy = DiscountPolicy { transfer_discount: ratio, subscriptions: vec![] };
            let p = route_payment(&route("u"), &sessions, &policy);
            prop_assert!(p.amount.cents <= fares.iter().sum::<i64>());
            prop_assert!(p.amount.cents >= 0);
            let recomputed: i64 = p.breakdown.iter().map(|l| l.gross.cents - l.discount.cents).sum();
            prop_assert_eq!(recomputed, p.amount.cents);
        }

        /// Every session lands in exactly one route and routes of a user are
        /// disjoint in time.
        #[test]
        fn routes_partition_sessions(gaps in proptest::collection::vec(0i64..8000, 1..15)) {
            let q = quickin();
            let u = register(&q, "p");
            let mut t = 0;
            for (i, g) in gaps.iter().enumerate() {
                t += g;
                q.assemble_route(&u, priced(&format!("s{i}"), "bus-1", t, t + 300, 100), Timestamp(t + 300)).unwrap();
                t += 300;
            }
            q.close_all_routes(Timestamp(t + 1)).unwrap();
            let routes = q.routes_of(&u).unwrap();
            let all: Vec<_> = routes.iter().flat_map(|r| r.route.session_ids.clone()).collect();
            prop_assert_eq!(all.len(), gaps.len());
            let unique: HashSet<_> = all.iter().collect();
            prop_assert_eq!(unique.len(), gaps.len());
            let debits = q.wallet(&u).unwrap().total_debits().cents;
            let paid: i64 = routes.iter().map(|r| r.payment.amount.cents).sum();
            prop_assert_eq!(debits, paid);
        }
    }
}
