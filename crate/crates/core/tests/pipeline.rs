use std::sync::Arc;
use std::thread;

use proptest::prelude::*;
use serde_json::json;
use zeroride::gateway::{ApiRequest, Gateway, GatewayConfig};
use zeroride::privacy::{EnvelopeError, KeyService, SealedKv};
use zeroride::sim::{run_scenario, synthetic_day};
use zeroride::store::{DirKv, MemoryKv};
use zeroride::transit::CompletedSessionStore;
use zeroride::{FarePlan, GeoPoint, Money, ServiceKind, Timestamp, TransportService};

const T0: i64 = 1_583_136_000;

#[test]
fn archive_survives_reopen_and_needs_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let key_file = dir.path().join("keys/master.json");
    let mut cfg = synthetic_day(11, 12, 2, 1);
    cfg.path_loss.noise_sigma_dbm = 0.0;
    let archived = {
        let keys = Arc::new(KeyService::open_or_create(&key_file).unwrap());
        let sealed = SealedKv::new(Arc::new(DirKv::open(dir.path().join("data")).unwrap()), keys);
        run_scenario(&cfg, sealed).unwrap().metrics.records_archived
    };
    assert!(archived > 0);

    let reopened = SealedKv::new(
        Arc::new(DirKv::open(dir.path().join("data")).unwrap()),
        Arc::new(KeyService::open_or_create(&key_file).unwrap()),
    );
    let total: usize = cfg
        .services
        .iter()
        .map(|s| CompletedSessionStore::new(reopened.clone(), &s.service_id).records().unwrap().len())
        .sum();
    assert_eq!(total as u64, archived);

    let stranger = SealedKv::new(
        Arc::new(DirKv::open(dir.path().join("data")).unwrap()),
        Arc::new(KeyService::ephemeral()),
    );
    let store = CompletedSessionStore::new(stranger, &"bus-urban".into());
    let err = store.records().unwrap_err();
    assert!(matches!(err, zeroride::transit::TransitError::Storage(EnvelopeError::UnknownKey(_))), "{err:?}");
}

#[test]
fn concurrent_riders_each_get_one_session() {
    let sealed = SealedKv::new(Arc::new(MemoryKv::new()), Arc::new(KeyService::ephemeral()));
    let mut g = Gateway::new(GatewayConfig::default(), sealed).unwrap();
    g.add_service(TransportService {
        service_id: "bus".into(),
        customer_id: "c".into(),
        kind: ServiceKind::OnBoard,
        fare_plan: FarePlan::Flat { price: Money::eur(150) },
    })
    .unwrap();
    g.map_station("st".into(), "v".into(), "bus".into()).unwrap();
    let g = Arc::new(g);
    let here = GeoPoint { lat: 44.494, lon: 11.343 };
    let tokens: Vec<String> = (0..16)
        .map(|i| {
            let r = g.handle(
                &ApiRequest::post(
                    "/v1/users",
                    json!({"identity_key": format!("k{i}"), "gender": "male", "birth_date": "1970-01-01", "payment_method_ref": "c"}),
                ),
                Timestamp(T0),
            );
            r.field("token").unwrap().to_owned()
        })
        .collect();
    let handles: Vec<_> = tokens
        .into_iter()
        .map(|tok| {
            let g = g.clone();
            thread::spawn(move || {
                let start = || {
                    g.handle(
                        &ApiRequest::post(
                            "/v1/sessions",
                            json!({"station_id": "st", "sample_period_s": 5, "rssi_dbm": -60.0, "location": here}),
                        )
                        .with_token(&tok),
                        Timestamp(T0),
                    )
                };
                let first = start();
                let again = start();
                assert_eq!(first.field("session_id"), again.field("session_id"));
                let sid = first.field("session_id").unwrap().to_owned();
                for w in 1..=20u32 {
                    let r = g.handle(
                        &ApiRequest::patch(
                            format!("/v1/sessions/{sid}"),
                            json!({"window_index": w, "rssi_dbm": -61.0, "location": here}),
                        )
                        .with_token(&tok),
                        Timestamp(T0 + 5 * w as i64),
                    );
                    assert_eq!(r.status, 200);
                }
                let r = g.handle(
                    &ApiRequest::post(format!("/v1/sessions/{sid}/end"), json!(null)).with_token(&tok),
                    Timestamp(T0 + 100),
                );
                assert_eq!(r.status, 202);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let rep = g.run_background(Timestamp(T0 + 200)).unwrap();
    assert_eq!(rep.processed.len(), 16);
    assert!(rep.processed.iter().all(|p| p.outcome.is_validated()));
    let t = g.transit(&"bus".into()).unwrap();
    assert_eq!(t.counters().started, 16);
    assert_eq!(t.completed().len().unwrap(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn money_is_conserved_in_random_scenarios(
        seed in 0u64..1000,
        loss in 0.0f64..0.4,
        sigma in 0.0f64..6.0,
        discount in 0.0f64..=1.0,
    ) {
        let mut cfg = synthetic_day(seed, 15, 3, 1);
        cfg.update_loss_probability = loss;
        cfg.path_loss.noise_sigma_dbm = sigma;
        cfg.gateway.quickin.discounts.transfer_discount = discount;
        for r in cfg.riders.iter_mut().step_by(2) {
            r.autocharge = None;
        }
        let sealed = SealedKv::new(Arc::new(MemoryKv::new()), Arc::new(KeyService::ephemeral()));
        let m = run_scenario(&cfg, sealed).unwrap().metrics;
        prop_assert_eq!(m.wallet_debits_cents, m.route_payments_cents);
        prop_assert_eq!(m.route_payments_cents, m.settlement_cents);
        prop_assert_eq!(m.wallet_charges, m.routes_closed);
        prop_assert_eq!(m.records_archived, m.sessions_validated);
    }
}
