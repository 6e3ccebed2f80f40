//! Privacy layer for completed sessions: generalization to the six-field
//! archive schema, k-anonymity auditing, and encryption at rest.

pub mod envelope;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{age_of, DomainError, Gender, GeoPoint, SessionState, Timestamp, User, UserSession};

pub use envelope::{envelope_decrypt, envelope_encrypt, EnvelopeCiphertext, EnvelopeError, KeyService, MasterKey, SealedKv};

/// Share of residents who ride the bus, used to size anonymity groups.
pub const BUS_USAGE_RATE: f64 = 0.1030;

/// Inhabitants per age range, Metropolitan City of Bologna, 2019.
pub const BOLOGNA_METRO_2019: [(AgeRange, u64); 6] = [
    (AgeRange::From15To24, 87_247),
    (AgeRange::From25To34, 105_143),
    (AgeRange::From35To49, 98_989),
    (AgeRange::From50To64, 220_554),
    (AgeRange::From65To79, 163_279),
    (AgeRange::From80, 85_897),
];

/// Decimal places kept on archived coordinates (about 111 m).
pub const COORD_DECIMALS: i32 = 3;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("age must be non-negative, got {0}")]
    NegativeAge(i64),
    #[error("session is {0:?}, only validated sessions are archived")]
    NotValidated(SessionState),
    #[error("k-anonymity report over an empty record set is undefined")]
    EmptyReport,
    #[error("usage rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("export refused: k_min {k_min} below threshold {threshold}")]
    BelowThreshold { k_min: u64, threshold: u64, report: KAnonymityReport },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgeRange {
    From0To14,
    From15To24,
    From25To34,
    From35To49,
    From50To64,
    From65To79,
    From80,
}

impl AgeRange {
    pub const ALL: [AgeRange; 7] = [
        AgeRange::From0To14,
        AgeRange::From15To24,
        AgeRange::From25To34,
        AgeRange::From35To49,
        AgeRange::From50To64,
        AgeRange::From65To79,
        AgeRange::From80,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgeRange::From0To14 => "0-14",
            AgeRange::From15To24 => "15-24",
            AgeRange::From25To34 => "25-34",
            AgeRange::From35To49 => "35-49",
            AgeRange::From50To64 => "50-64",
            AgeRange::From65To79 => "65-79",
            AgeRange::From80 => "80+",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == s)
    }

    /// Inclusive lower bound and optional inclusive upper bound.
    pub fn bounds(self) -> (u32, Option<u32>) {
        match self {
            AgeRange::From0To14 => (0, Some(14)),
            AgeRange::From15To24 => (15, Some(24)),
            AgeRange::From25To34 => (25, Some(34)),
            AgeRange::From35To49 => (35, Some(49)),
            AgeRange::From50To64 => (50, Some(64)),
            AgeRange::From65To79 => (65, Some(79)),
            AgeRange::From80 => (80, None),
        }
    }
}

impl fmt::Display for AgeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for AgeRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for AgeRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AgeRange::from_label(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown age range {s:?}")))
    }
}

pub fn age_to_range(age: i64) -> Result<AgeRange, PrivacyError> {
    match age {
        a if a < 0 => Err(PrivacyError::NegativeAge(a)),
        0..=14 => Ok(AgeRange::From0To14),
        15..=24 => Ok(AgeRange::From15To24),
        25..=34 => Ok(AgeRange::From25To34),
        35..=49 => Ok(AgeRange::From35To49),
        50..=64 => Ok(AgeRange::From50To64),
        65..=79 => Ok(AgeRange::From65To79),
        _ => Ok(AgeRange::From80),
    }
}

/// The archived projection of a completed session. Nothing else survives
/// archival.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedSessionRecord {
    pub gender: Gender,
    pub age_range: AgeRange,
    pub start_pos: GeoPoint,
    pub end_pos: GeoPoint,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
}

impl AnonymizedSessionRecord {
    /// Logical fields of the archive schema.
    pub const FIELDS: [&'static str; 6] = [
        "gender",
        "age_range",
        "start_pos",
        "end_pos",
        "start_ts",
        "end_ts",
    ];
    /// Keys of the serialized form; positions are split into lat/lon.
    pub const JSON_KEYS: [&'static str; 8] = [
        "gender",
        "age_range",
        "start_lat",
        "start_lon",
        "end_lat",
        "end_lon",
        "start_ts",
        "end_ts",
    ];
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    gender: Gender,
    age_range: AgeRange,
    start_lat: f64,
    start_lon: f64,
    end_lat: f64,
    end_lon: f64,
    start_ts: Timestamp,
    end_ts: Timestamp,
}

impl Serialize for AnonymizedSessionRecord {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RecordWire {
            gender: self.gender,
            age_range: self.age_range,
            start_lat: self.start_pos.lat,
            start_lon: self.start_pos.lon,
            end_lat: self.end_pos.lat,
            end_lon: self.end_pos.lon,
            start_ts: self.start_ts,
            end_ts: self.end_ts,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AnonymizedSessionRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = RecordWire::deserialize(d)?;
        Ok(Self {
            gender: w.gender,
            age_range: w.age_range,
            start_pos: GeoPoint {
                lat: w.start_lat,
                lon: w.start_lon,
            },
            end_pos: GeoPoint {
                lat: w.end_lat,
                lon: w.end_lon,
            },
            start_ts: w.start_ts,
            end_ts: w.end_ts,
        })
    }
}

pub fn round_coord(x: f64) -> f64 {
    let scale = 10f64.powi(COORD_DECIMALS);
    (x * scale).round() / scale
}

pub fn coarsen(p: GeoPoint) -> GeoPoint {
    GeoPoint {
        lat: round_coord(p.lat),
        lon: round_coord(p.lon),
    }
}

pub fn generalize(user: &User, session: &UserSession, now: Timestamp) -> Result<AnonymizedSessionRecord, PrivacyError> {
    if session.state != SessionState::Validated {
        return Err(PrivacyError::NotValidated(session.state));
    }
    let age = age_of(user.birth_date, now.date())?;
    let end_ts = session.end_ts.unwrap_or(session.start_ts);
    Ok(AnonymizedSessionRecord {
        gender: user.gender,
        age_range: age_to_range(age as i64)?,
        start_pos: coarsen(session.start_pos),
        end_pos: coarsen(session.end_pos.unwrap_or(session.start_pos)),
        start_ts: session.start_ts.truncate_to_minute(),
        end_ts: end_ts.truncate_to_minute(),
    })
}

/// Expected riders in a population: `inhabitants * usage_rate`, rounded
/// half up.
pub fn estimate_bus_users(inhabitants: u64, usage_rate: f64) -> Result<u64, PrivacyError> {
    if !(0.0..=1.0).contains(&usage_rate) {
        return Err(PrivacyError::BadRate(usage_rate));
    }
    Ok((inhabitants as f64 * usage_rate + 0.5).floor() as u64)
}

/// Record attributes that can be combined into a quasi-identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuasiField {
    AgeRange,
    Gender,
    StartPos,
    EndPos,
}

impl QuasiField {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "age_range" => Some(QuasiField::AgeRange),
            "gender" => Some(QuasiField::Gender),
            "start_pos" => Some(QuasiField::StartPos),
            "end_pos" => Some(QuasiField::EndPos),
            _ => None,
        }
    }

    fn value(self, r: &AnonymizedSessionRecord) -> String {
        match self {
            QuasiField::AgeRange => r.age_range.label().to_owned(),
            QuasiField::Gender => r.gender.as_str().to_owned(),
            QuasiField::StartPos => format!("{:.3}:{:.3}", r.start_pos.lat, r.start_pos.lon),
            QuasiField::EndPos => format!("{:.3}:{:.3}", r.end_pos.lat, r.end_pos.lon),
        }
    }
}

pub fn quasi_key(r: &AnonymizedSessionRecord, quasi: &[QuasiField]) -> String {
    quasi.iter().map(|q| q.value(r)).collect::<Vec<_>>().join("|")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAnonymityReport {
    pub group_counts: BTreeMap<String, u64>,
    pub k_min: u64,
    pub k_max: u64,
    pub k_avg: f64,
}

impl KAnonymityReport {
    pub fn from_counts<I, K>(counts: I) -> Result<Self, PrivacyError>
    where
        I: IntoIterator<Item = (K, u64)>,
        K: Into<String>,
    {
        let mut group_counts = BTreeMap::new();
        for (k, c) in counts {
            *group_counts.entry(k.into()).or_insert(0) += c;
        }
        group_counts.retain(|_, c| *c > 0);
        if group_counts.is_empty() {
            return Err(PrivacyError::EmptyReport);
        }
        let k_min = *group_counts.values().min().unwrap();
        let k_max = *group_counts.values().max().unwrap();
        let total: u64 = group_counts.values().sum();
        let k_avg = total as f64 / group_counts.len() as f64;
        Ok(Self {
            group_counts,
            k_min,
            k_max,
            k_avg,
        })
    }

    pub fn k_avg_rounded(&self) -> u64 {
        (self.k_avg + 0.5).floor() as u64
    }

    pub fn total(&self) -> u64 {
        self.group_counts.values().sum()
    }

    /// `group,count,k_min,k_avg,k_max`; one row per group, then a summary
    /// row carrying the k values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count,k_min,k_avg,k_max\n");
        for (g, c) in &self.group_counts {
            out.push_str(&format!("{g},{c},,,\n"));
        }
        out.push_str(&format!(
            "summary,{},{},{},{}\n",
            self.total(),
            self.k_min,
            self.k_avg_rounded(),
            self.k_max
        ));
        out
    }

    pub fn check_threshold(self, threshold: u64) -> Result<Self, PrivacyError> {
        if self.k_min < threshold {
            Err(PrivacyError::BelowThreshold {
                k_min: self.k_min,
                threshold,
                report: self,
            })
        } else {
            Ok(self)
        }
    }
}

pub fn k_report(records: &[AnonymizedSessionRecord], quasi: &[QuasiField]) -> Result<KAnonymityReport, PrivacyError> {
    KAnonymityReport::from_counts(records.iter().map(|r| (quasi_key(r, quasi), 1)))
}
