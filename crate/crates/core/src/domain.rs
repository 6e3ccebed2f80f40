//! Entity types shared by every subsystem, plus the geometric and calendar
//! helpers they need.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Mean earth radius used for every great-circle computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("latitude/longitude out of range: ({lat}, {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("birth date {birth} is after {at}")]
    BirthInFuture { birth: NaiveDate, at: NaiveDate },
    #[error("currency mismatch: {0} vs {1}")]
    CurrencyMismatch(Currency, Currency),
    #[error("invalid session transition {from:?} -> {to:?}")]
    InvalidTransition { from: SessionState, to: SessionState },
    #[error("invalid timestamp: {0}")]
    InvalidTimestamp(String),
}

macro_rules! id_type {
    ($($(#[$m:meta])* $name:ident),* $(,)?) => {$(
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    )*};
}

id_type!(
    UserId,
    SessionId,
    RouteId,
    WalletId,
    ServiceId,
    CustomerId,
    StationId,
    VehicleId,
);

/// Seconds since the Unix epoch on the (virtual) system clock.
///
/// Serialized as an RFC-3339 UTC string with second precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_secs(secs: i64) -> Self {
        Self(secs)
    }

    pub fn secs(self) -> i64 {
        self.0
    }

    pub fn plus(self, secs: i64) -> Self {
        Self(self.0 + secs)
    }

    /// Signed number of seconds from `earlier` to `self`.
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.0, 0)
            .single()
            .unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    pub fn date(self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    /// Drops the seconds component.
    pub fn truncate_to_minute(self) -> Self {
        Self(self.0.div_euclid(60) * 60)
    }

    pub fn parse_rfc3339(s: &str) -> Result<Self, DomainError> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Self(dt.timestamp()))
            .map_err(|e| DomainError::InvalidTimestamp(format!("{s}: {e}")))
    }

    pub fn to_rfc3339(self) -> String {
        self.to_datetime()
            .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unspecified,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Unspecified => "unspecified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DomainError> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(DomainError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }

    /// Moves the point by a local east/north offset in meters (flat-earth
    /// approximation, fine for offsets of a few kilometers).
    pub fn offset_m(&self, east_m: f64, north_m: f64) -> GeoPoint {
        let dlat = north_m / 1000.0 / EARTH_RADIUS_KM;
        let dlon = east_m / 1000.0 / (EARTH_RADIUS_KM * self.lat.to_radians().cos());
        GeoPoint {
            lat: self.lat + dlat.to_degrees(),
            lon: self.lon + dlon.to_degrees(),
        }
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Completed calendar years between `birth` and `at`.
///
/// A 29 February birthday completes on 1 March in non-leap years.
pub fn age_of(birth: NaiveDate, at: NaiveDate) -> Result<u32, DomainError> {
    if birth > at {
        return Err(DomainError::BirthInFuture { birth, at });
    }
    let mut years = at.year() - birth.year();
    if (at.month(), at.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    Ok(years as u32)
}

/// ISO-4217 alphabetic code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Currency([u8; 3]);

impl Currency {
    pub const EUR: Currency = Currency(*b"EUR");

    pub fn parse(code: &str) -> Option<Self> {
        let b = code.as_bytes();
        if b.len() == 3 && b.iter().all(u8::is_ascii_uppercase) {
            Some(Currency([b[0], b[1], b[2]]))
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ascii by construction")
    }
}

impl Default for Currency {
    fn default() -> Self {
        Currency::EUR
    }
}

impl fmt::Display for Currency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Currency {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Currency {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Currency::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad currency {s:?}")))
    }
}

/// Integer minor units (cents) in a single currency.
///
/// The operator impls panic on mixed currencies; a deployment runs in one
/// currency and every amount is created through the same configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Money {
    pub cents: i64,
    #[serde(default)]
    pub currency: Currency,
}

impl Money {
    pub const fn eur(cents: i64) -> Self {
        Self {
            cents,
            currency: Currency::EUR,
        }
    }

    pub const fn zero(currency: Currency) -> Self {
        Self { cents: 0, currency }
    }

    /// Converts a real-valued amount of cents, rounding half up.
    pub fn from_real_cents(cents: f64, currency: Currency) -> Self {
        Self {
            cents: (cents + 0.5).floor() as i64,
            currency,
        }
    }

    pub fn checked_add(self, other: Money) -> Result<Money, DomainError> {
        if self.currency != other.currency {
            return Err(DomainError::CurrencyMismatch(self.currency, other.currency));
        }
        Ok(Money {
            cents: self.cents + other.cents,
            currency: self.currency,
        })
    }

    pub fn is_negative(&self) -> bool {
        self.cents < 0
    }

    pub fn min(self, other: Money) -> Money {
        if other.cents < self.cents {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: Money) -> Money {
        if other.cents > self.cents {
            other
        } else {
            self
        }
    }

    /// Scales by a ratio, rounding half up.
    pub fn scale(self, ratio: f64) -> Money {
        Money::from_real_cents(self.cents as f64 * ratio, self.currency)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        self.checked_add(rhs).expect("money currency mismatch")
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        self.checked_add(-rhs).expect("money currency mismatch")
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money {
            cents: -self.cents,
            currency: self.currency,
        }
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.cents < 0 { "-" } else { "" };
        let abs = self.cents.unsigned_abs();
        write!(f, "{sign}{}.{:02} {}", abs / 100, abs % 100, self.currency)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: UserId,
    pub gender: Gender,
    pub birth_date: NaiveDate,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    OnBoard,
    Turnstile,
}

impl ServiceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::OnBoard => "on_board",
            ServiceKind::Turnstile => "turnstile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FarePlan {
    Flat {
        price: Money,
    },
    Distance {
        base: Money,
        per_km: Money,
        min: Money,
        max: Money,
    },
}

impl FarePlan {
    pub fn currency(&self) -> Currency {
        match self {
            FarePlan::Flat { price } => price.currency,
            FarePlan::Distance { base, .. } => base.currency,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            FarePlan::Flat { price } if price.is_negative() => Err("negative flat price".into()),
            FarePlan::Flat { .. } => Ok(()),
            FarePlan::Distance {
                base,
                per_km,
                min,
                max,
            } => {
                if [base, per_km, min, max].iter().any(|m| m.is_negative()) {
                    return Err("negative fare component".into());
                }
                if min.cents > max.cents {
                    return Err("fare min exceeds max".into());
                }
                let c = base.currency;
                if [per_km, min, max].iter().any(|m| m.currency != c) {
                    return Err("mixed currencies in fare plan".into());
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportService {
    pub service_id: ServiceId,
    pub customer_id: CustomerId,
    pub kind: ServiceKind,
    pub fare_plan: FarePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Ongoing,
    Ended,
    Validated,
    Rejected,
}

impl SessionState {
    pub fn can_transition_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Ongoing, Ended) | (Ended, Validated) | (Ended, Rejected)
        )
    }
}

/// One sampling window as reported by the rider's application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconLogEntry {
    pub window_index: u32,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub at: Timestamp,
}

impl BeaconLogEntry {
    pub fn present(window_index: u32, rssi_dbm: f64, location: GeoPoint, at: Timestamp) -> Self {
        Self {
            window_index,
            present: true,
            rssi_dbm: Some(rssi_dbm),
            location: Some(location),
            at,
        }
    }

    pub fn missing(window_index: u32, at: Timestamp) -> Self {
        Self {
            window_index,
            present: false,
            rssi_dbm: None,
            location: None,
            at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSession {
    pub session_id: SessionId,
    pub user_id: UserId,
    pub service_id: ServiceId,
    pub service_kind: ServiceKind,
    pub state: SessionState,
    pub start_pos: GeoPoint,
    pub end_pos: Option<GeoPoint>,
    pub start_ts: Timestamp,
    pub end_ts: Option<Timestamp>,
    /// Sampling window length the agent announced at session start.
    pub sample_period_s: i64,
    pub beacon_log: Vec<BeaconLogEntry>,
}

impl UserSession {
    pub fn transition(&mut self, next: SessionState) -> Result<(), DomainError> {
        if !self.state.can_transition_to(next) {
            return Err(DomainError::InvalidTransition {
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        Ok(())
    }

    pub fn duration_s(&self) -> Option<i64> {
        self.end_ts.map(|end| end.since(self.start_ts))
    }

    /// Location of the most recent present entry.
    pub fn last_present_location(&self) -> Option<GeoPoint> {
        self.beacon_log
            .iter()
            .rev()
            .find(|e| e.present)
            .and_then(|e| e.location)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRoute {
    pub route_id: RouteId,
    pub user_id: UserId,
    pub session_ids: Vec<SessionId>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub at: Timestamp,
    pub delta: Money,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoCharge {
    /// Top up whenever the balance drops below this.
    pub threshold: Money,
    pub amount: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wallet {
    pub wallet_id: WalletId,
    pub user_id: UserId,
    pub balance: Money,
    pub floor: Money,
    pub blocked: bool,
    pub autocharge: Option<AutoCharge>,
    pub payment_method_ref: String,
    pub ledger: Vec<LedgerEntry>,
}

impl Wallet {
    pub fn new(wallet_id: WalletId, user_id: UserId, floor: Money, payment_method_ref: String) -> Self {
        Self {
            wallet_id,
            user_id,
            balance: Money::zero(floor.currency),
            floor,
            blocked: false,
            autocharge: None,
            payment_method_ref,
            ledger: Vec::new(),
        }
    }

    pub fn post(&mut self, at: Timestamp, delta: Money, reference: impl Into<String>) {
        self.balance = self.balance + delta;
        self.ledger.push(LedgerEntry {
            at,
            delta,
            reference: reference.into(),
        });
        debug_assert!(self.ledger_consistent());
    }

    pub fn ledger_sum(&self) -> Money {
        self.ledger
            .iter()
            .fold(Money::zero(self.balance.currency), |acc, e| acc + e.delta)
    }

    pub fn ledger_consistent(&self) -> bool {
        self.ledger_sum() == self.balance
    }

    /// Sum of negative ledger deltas, as a positive amount.
    pub fn total_debits(&self) -> Money {
        self.ledger
            .iter()
            .filter(|e| e.delta.is_negative())
            .fold(Money::zero(self.balance.currency), |acc, e| acc - e.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPayment {
    pub session_id: SessionId,
    pub service_id: ServiceId,
    pub amount: Money,
    pub plan_snapshot: FarePlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentLine {
    pub session_id: SessionId,
    pub gross: Money,
    pub discount: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutePayment {
    pub route_id: RouteId,
    pub amount: Money,
    pub breakdown: Vec<PaymentLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VehicleAccessIdentifier {
    pub station_id: StationId,
    pub vehicle_id: VehicleId,
    pub service_id: ServiceId,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Independent spherical-law-of-cosines distance, in kilometers.
    fn cosine_law_km(a: GeoPoint, b: GeoPoint) -> f64 {
        let (x1, y1) = (a.lat.to_radians(), a.lon.to_radians());
        let (x2, y2) = (b.lat.to_radians(), b.lon.to_radians());
        let c = x1.sin() * x2.sin() + x1.cos() * x2.cos() * (y2 - y1).cos();
        6371.0 * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn haversine_identity_is_zero() {
        assert_eq!(haversine_distance(p(44.5, 11.3), p(44.5, 11.3)), 0.0);
    }

    #[test]
    fn haversine_half_circumference() {
        let d = haversine_distance(p(0.0, 0.0), p(0.0, 180.0));
        assert!((d - 20015.087).abs() < 1e-3, "{d}");
        assert!((d - std::f64::consts::PI * 6371.0).abs() < 1e-9);
    }

    #[test]
    fn haversine_bologna_imola() {
        let (a, b) = (p(44.4949, 11.3426), p(44.3534, 11.7147));
        let d = haversine_distance(a, b);
        let oracle = cosine_law_km(a, b);
        assert!(((d - oracle) / oracle).abs() < 1e-6, "{d} vs {oracle}");
        assert!((d - 33.477_369_535).abs() < 1e-6, "{d}");
    }

    #[test]
    fn age_examples() {
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert_eq!(age_of(d("1984-05-01"), d("2021-04-30")).unwrap(), 36);
        assert_eq!(age_of(d("1984-05-01"), d("2021-05-01")).unwrap(), 37);
        assert_eq!(age_of(d("2000-02-29"), d("2021-02-28")).unwrap(), 20);
        assert_eq!(age_of(d("2000-02-29"), d("2021-03-01")).unwrap(), 21);
        assert_eq!(age_of(d("2000-02-29"), d("2024-02-29")).unwrap(), 24);
        assert!(matches!(
            age_of(d("2030-01-01"), d("2021-01-01")),
            Err(DomainError::BirthInFuture { .. })
        ));
    }

    #[test]
    fn money_rounding_half_up() {
        assert_eq!(Money::from_real_cents(223.5, Currency::EUR).cents, 224);
        assert_eq!(Money::from_real_cents(223.49, Currency::EUR).cents, 223);
        assert_eq!(Money::eur(150).to_string(), "1.50 EUR");
        assert_eq!(Money::eur(-625).to_string(), "-6.25 EUR");
        let usd = Money {
            cents: 1,
            currency: Currency::parse("USD").unwrap(),
        };
        assert!(Money::eur(1).checked_add(usd).is_err());
    }

    #[test]
    fn timestamp_roundtrip_and_truncation() {
        let t = Timestamp::parse_rfc3339("2021-05-01T08:17:42Z").unwrap();
        assert_eq!(t.truncate_to_minute().to_rfc3339(), "2021-05-01T08:17:00Z");
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, "\"2021-05-01T08:17:42Z\"");
        assert_eq!(serde_json::from_str::<Timestamp>(&json).unwrap(), t);
    }

    #[test]
    fn geopoint_range() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(-90.0, 180.0).is_ok());
    }

    #[test]
    fn wallet_ledger_tracks_balance() {
        let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "pm".into());
        w.post(Timestamp(1), Money::eur(1000), "topup");
        w.post(Timestamp(2), Money::eur(-225), "route r1");
        assert_eq!(w.balance, Money::eur(775));
        assert!(w.ledger_consistent());
        assert_eq!(w.total_debits(), Money::eur(225));
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    fn arb_state() -> impl Strategy<Value = SessionState> {
        prop_oneof![
            Just(SessionState::Ongoing),
            Just(SessionState::Ended),
            Just(SessionState::Validated),
            Just(SessionState::Rejected),
        ]
    }

    proptest! {
        #[test]
        fn haversine_symmetric(a in arb_point(), b in arb_point()) {
            let d1 = haversine_distance(a, b);
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, haversine_distance(b, a));
        }

        #[test]
        fn haversine_triangle(a in arb_point(), b in arb_point(), c in arb_point()) {
            let ab = haversine_distance(a, b);
            let bc = haversine_distance(b, c);
            let ac = haversine_distance(a, c);
            prop_assert!(ac <= ab + bc + 1e-9, "{} > {} + {}", ac, ab, bc);
        }

        #[test]
        fn session_state_machine_closed(events in proptest::collection::vec(arb_state(), 0..20)) {
            let mut s = SessionState::Ongoing;
            for next in events {
                let allowed = matches!(
                    (s, next),
                    (SessionState::Ongoing, SessionState::Ended)
                        | (SessionState::Ended, SessionState::Validated)
                        | (SessionState::Ended, SessionState::Rejected)
                );
                prop_assert_eq!(s.can_transition_to(next), allowed);
                if allowed {
                    s = next;
                }
            }
        }

        #[test]
        fn wallet_balance_equals_ledger(deltas in proptest::collection::vec(-10_000i64..10_000, 0..50)) {
            let mut w = Wallet::new("w".into(), "u".into(), Money::eur(-500), "pm".into());
            for (i, d) in deltas.into_iter().enumerate() {
                w.post(Timestamp(i as i64), Money::eur(d), "x");
                prop_assert!(w.ledger_consistent());
            }
        }
    }
}
