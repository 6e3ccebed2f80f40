use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use zeroride::privacy::{envelope_decrypt, envelope_encrypt, generalize, KeyService, MasterKey, SealedKv};
use zeroride::sim::{run_scenario, synthetic_day};
use zeroride::store::MemoryKv;
use zeroride::transit::{session_fare, skim_validate, SkimmingConfig};
use zeroride::{
    BeaconLogEntry, FarePlan, Gender, GeoPoint, Money, ServiceKind, SessionState, Timestamp, User, UserSession,
};

fn hour_long_session() -> UserSession {
    let start = Timestamp(1_583_136_000);
    let here = GeoPoint { lat: 44.494, lon: 11.343 };
    let log = (0..720u32)
        .map(|w| {
            let at = start.plus(5 * w as i64);
            if w % 7 == 3 {
                BeaconLogEntry::missing(w, at)
            } else {
                BeaconLogEntry::present(w, -62.0, here.offset_m(w as f64 * 4.0, 0.0), at)
            }
        })
        .collect();
    UserSession {
        session_id: "bus-st-000001".into(),
        user_id: "u-000001".into(),
        service_id: "bus".into(),
        service_kind: ServiceKind::OnBoard,
        state: SessionState::Ended,
        start_pos: here,
        end_pos: Some(here.offset_m(2880.0, 0.0)),
        start_ts: start,
        end_ts: Some(start.plus(3600)),
        sample_period_s: 5,
        beacon_log: log,
    }
}

fn session_benches(c: &mut Criterion) {
    let session = hour_long_session();
    let cfg = SkimmingConfig::default();
    c.bench_function("skim_validate/720 windows", |b| b.iter(|| skim_validate(black_box(&session), &cfg)));

    let mut validated = session.clone();
    validated.state = SessionState::Validated;
    let plan = FarePlan::Distance {
        base: Money::eur(100),
        per_km: Money::eur(20),
        min: Money::eur(150),
        max: Money::eur(500),
    };
    c.bench_function("session_fare/distance", |b| b.iter(|| session_fare(black_box(&plan), &validated)));

    let user = User {
        user_id: "u-000001".into(),
        gender: Gender::Female,
        birth_date: "1984-05-17".parse().unwrap(),
        registered_at: Timestamp(0),
    };
    let record = generalize(&user, &validated, Timestamp(1_583_200_000)).unwrap();
    let plain = serde_json::to_vec(&record).unwrap();
    let master = MasterKey::generate("bench");
    c.bench_function("envelope/encrypt record", |b| b.iter(|| envelope_encrypt(black_box(&plain), &master)));
    let sealed = envelope_encrypt(&plain, &master);
    c.bench_function("envelope/decrypt record", |b| b.iter(|| envelope_decrypt(black_box(&sealed), &master)));
}

fn scenario_benches(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario");
    group.sample_size(10);
    let day = synthetic_day(1, 100, 10, 2);
    group.bench_function("day/100 riders", |b| {
        b.iter_batched(
            || SealedKv::new(Arc::new(MemoryKv::new()), Arc::new(KeyService::ephemeral())),
            |store| run_scenario(&day, store).unwrap().metrics,
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, session_benches, scenario_benches);
criterion_main!(benches);
