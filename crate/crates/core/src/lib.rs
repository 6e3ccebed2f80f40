//! Zero-interaction public transport ticketing.
//!
//! Stations broadcast their identifier and position; rider agents detect
//! them by signal strength and drive sessions without any rider action; the
//! server validates rides, prices them, charges wallets, and keeps only
//! generalized, encrypted session records.

pub mod agent;
pub mod domain;
pub mod gateway;
pub mod privacy;
pub mod quickin;
pub mod sim;
pub mod station;
pub mod store;
pub mod transit;

pub use domain::{
    age_of, haversine_distance, BeaconLogEntry, CustomerId, FarePlan, Gender, GeoPoint, Money,
    RouteId, RoutePayment, ServiceId, ServiceKind, SessionId, SessionPayment, SessionState,
    StationId, Timestamp, TransportService, User, UserId, UserRoute, UserSession, VehicleId,
    Wallet,
};
