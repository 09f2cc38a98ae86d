use std::collections::BTreeSet;
use std::time::Duration;

use sieve_core::config::Config;
use sieve_core::coordinator::{Coordinator, SessionStatus, SubmitOptions};
use sieve_core::device::DeviceState;
use sieve_core::energy::{EnergyModel, NetworkProfile};
use sieve_core::fleet::{Fleet, PushDelay};
use sieve_core::photo::Photo;
use sieve_core::predicates::{names, PredicateRegistry};
use sieve_core::query::{PredicateSpec, QuerySpec};

fn fleet(devices: usize, photos: usize) -> Fleet {
    let wifi = NetworkProfile::wifi();
    let states = (0..devices)
        .map(|d| {
            let photos = (0..photos).map(|i| Photo::uniform(format!("p{i:03}"), 8, 6, [(i * 37 % 256) as u8, 40, 200])).collect();
            DeviceState::new(format!("d{d:02}"), photos, wifi.clone(), EnergyModel::for_profile(&wifi))
        })
        .collect();
    Fleet::new(states)
}

fn coordinator() -> Coordinator {
    Coordinator::new(PredicateRegistry::builtin(), Config::default())
}

fn half_query(id: u64) -> String {
    QuerySpec::conjunction(
        id,
        vec![
            PredicateSpec::new(names::SYNTHETIC).with_params([0.7, 4.0, 1.0]),
            PredicateSpec::new(names::SYNTHETIC).with_params([0.6, 1.0, 2.0]),
        ],
    )
    .to_xml()
}

#[test]
fn session_ledger_is_exact_and_within_budget() {
    let c = coordinator();
    let mut f = fleet(8, 40);
    f.register_all(&c);
    let view = c.submit(&half_query(11), SubmitOptions::new(400, 3)).unwrap();
    assert_eq!(view.allocation.devices, 8);
    f.run_session(&c, &view.session).unwrap();
    let done = c.wait_complete(&view.session, Duration::ZERO).unwrap().expect("complete");
    let ch = done.charges;
    assert_eq!(ch.total, ch.devices + ch.photos + 10 * ch.results);
    assert!(ch.total <= 400);
    assert_eq!(done.results, ch.results);
    let page = c.results(&view.session, 0, usize::MAX, None).unwrap();
    assert_eq!(page.status, SessionStatus::Complete);
    assert!(page.records.windows(2).all(|w| w[0].virtual_time_ms <= w[1].virtual_time_ms));
    assert!(page.records.iter().enumerate().all(|(i, r)| r.arrival_index == i as u64));
    assert!(page.completion.is_some());
}

#[test]
fn first_result_streams_early() {
    let c = coordinator();
    let mut f = fleet(1, 120);
    f.push_delay = PushDelay::none();
    f.register_all(&c);
    let q = QuerySpec::conjunction(1, vec![PredicateSpec::new(names::ALL_ACCEPT)]).to_xml();
    let view = c.submit(&q, SubmitOptions::new(120 * 11 + 1, 0)).unwrap();
    let mut seen_at = None;
    f.run_session_observed(&c, &view.session, &mut |e| {
        if seen_at.is_none() && !c.results(&view.session, 0, 1, None).unwrap().records.is_empty() {
            seen_at = Some(e.photos_evaluated);
        }
    })
    .unwrap();
    let done = c.wait_complete(&view.session, Duration::ZERO).unwrap().unwrap();
    assert_eq!(done.photos_searched, 120);
    let seen_at = seen_at.expect("a result was streamed");
    assert!(seen_at * 5 < 120, "first result visible only after {seen_at} photos");
}

#[test]
fn resubmissions_never_rework_a_photo() {
    let c = coordinator();
    let mut f = fleet(4, 30);
    f.register_all(&c);
    let mut log: Vec<(String, String)> = Vec::new();
    for seed in 0..6 {
        let view = c.submit(&half_query(21), SubmitOptions::new(150, seed)).unwrap();
        for t in &view.devices {
            log.extend(t.cache_photo_ids.iter().map(|p| (t.device_id.clone(), p.clone())));
        }
        for run in f.run_session(&c, &view.session).unwrap() {
            let s = run.summary.unwrap();
            log.extend(s.evaluated.iter().map(|p| (s.device_id.clone(), p.clone())));
        }
    }
    let unique: BTreeSet<_> = log.iter().collect();
    assert_eq!(unique.len(), log.len());
    assert!(log.len() > 60);
}

#[test]
fn device_state_survives_restart() {
    let corpus = tempfile::tempdir().unwrap();
    let state = tempfile::tempdir().unwrap();
    for d in 0..2 {
        let dir = corpus.path().join(format!("d{d}"));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..20 {
            Photo::uniform(format!("p{i:02}"), 4, 4, [10, 20, 30]).save(&dir).unwrap();
        }
    }
    let wifi = NetworkProfile::wifi();
    let hw = EnergyModel::for_profile(&wifi);
    let q = QuerySpec::conjunction(77, vec![PredicateSpec::new(names::SYNTHETIC).with_params([0.0, 1.0])]).to_xml();
    let mut first = Vec::new();
    for round in 0..2 {
        // a fresh server and fresh device processes each round
        let c = coordinator();
        let mut f = Fleet::from_dirs(corpus.path(), Some(state.path()), &wifi, hw).unwrap();
        f.register_all(&c);
        let view = c.submit(&q, SubmitOptions::new(50, round)).unwrap();
        let runs = f.run_session(&c, &view.session).unwrap();
        let evaluated: Vec<(String, String)> = runs
            .iter()
            .flat_map(|r| r.summary.as_ref().unwrap().evaluated.iter().map(|p| (r.device_id.clone(), p.clone())))
            .collect();
        if round == 0 {
            assert!(!evaluated.is_empty());
            first = evaluated;
        } else {
            assert!(!evaluated.is_empty());
            assert!(evaluated.iter().all(|e| !first.contains(e)));
        }
    }
    assert!(state.path().join("d0").join("77.searched").exists());
}
