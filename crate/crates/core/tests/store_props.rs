//! Random operation sequences against a file-backed store, checked against
//! a shadow model and against a reopened copy.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use burstq_core::clock::{Clock, ManualClock, Timestamp};
use burstq_core::model::{
    route, transition, Backend, DatasetProfile, JobEvent, JobId, JobKind, JobRecord, JobSpec,
    JobState, RoutingConfig, VmRecord, VmState,
};
use burstq_core::store::{load_dir, replay, Actor, Store, StoreOptions};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Enqueue(usize),
    Event(usize, usize),
    Launch,
    SetVm(usize, usize),
    Note,
    Advance(u64),
}

const VM_STATES: [VmState; 6] = [
    VmState::Booting,
    VmState::Idle,
    VmState::Busy,
    VmState::Lost,
    VmState::Terminating,
    VmState::Terminated,
];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0usize..3).prop_map(Op::Enqueue),
        6 => (any::<prop::sample::Index>(), 0usize..JobEvent::ALL.len())
            .prop_map(|(i, e)| Op::Event(i.index(usize::MAX), e)),
        1 => Just(Op::Launch),
        2 => (any::<prop::sample::Index>(), 0usize..6).prop_map(|(i, s)| Op::SetVm(i.index(usize::MAX), s)),
        1 => Just(Op::Note),
        2 => (1u64..600).prop_map(Op::Advance),
    ]
}

fn job(backend: Backend, now: Timestamp) -> JobRecord {
    let spec = JobSpec {
        kind: JobKind::Sleep,
        params: BTreeMap::new(),
        inputs: vec![],
        profile: DatasetProfile::new(50, 10, 0).unwrap(),
        backend_override: Some(backend),
        derive_from: None,
        owner: "prop".into(),
    };
    let routing = route(&spec.profile, Some(backend), &RoutingConfig::default());
    JobRecord::new(spec, routing, now)
}

fn options(compact_every: u64) -> StoreOptions {
    StoreOptions {
        sync: false,
        compact_every,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_matches_model_and_survives_reopen(
        ops in prop::collection::vec(op(), 1..80),
        compact_every in prop_oneof![Just(0u64), 1u64..12],
    ) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(10_000)));
        let store = Store::open(dir.path(), options(compact_every), clock.clone()).unwrap();

        let mut jobs: Vec<(JobId, JobState)> = Vec::new();
        let mut vms: Vec<(burstq_core::model::VmId, VmState)> = Vec::new();
        let mut commits = 0u64;

        for op in ops {
            let now = clock.now();
            match op {
                Op::Enqueue(b) => {
                    let id = store.enqueue(job(Backend::ALL[b], now)).unwrap();
                    if let Some(last) = jobs.last() {
                        prop_assert!(id > last.0);
                    }
                    jobs.push((id, JobState::Queued));
                    commits += 1;
                }
                Op::Event(i, e) if !jobs.is_empty() => {
                    let slot = i % jobs.len();
                    let (id, state) = jobs[slot];
                    let event = JobEvent::ALL[e];
                    let before = store.revision();
                    match (transition(state, event), store.apply_event(id, Actor::QueueManager, event, now)) {
                        (Ok(next), Ok(rec)) => {
                            prop_assert_eq!(rec.state, next);
                            jobs[slot].1 = next;
                            commits += 1;
                        }
                        (Err(_), Err(_)) => prop_assert_eq!(store.revision(), before),
                        (want, got) => prop_assert!(false, "model {:?} vs store {:?}", want, got.map(|r| r.state)),
                    }
                }
                Op::Event(..) => {}
                Op::Launch => {
                    let rec = store.insert_vm(VmRecord::new(format!("h{}", vms.len()), "t".into(), now)).unwrap();
                    vms.push((rec.id, VmState::Booting));
                    commits += 1;
                }
                Op::SetVm(i, s) if !vms.is_empty() => {
                    let slot = i % vms.len();
                    let state = VM_STATES[s];
                    store.update_vm(vms[slot].0, Actor::VmManager, "set", |v| {
                        v.state = state;
                        Ok(())
                    }).unwrap();
                    vms[slot].1 = state;
                    commits += 1;
                }
                Op::SetVm(..) => {}
                Op::Note => {
                    store.note(Actor::Scheduler, "note").unwrap();
                    commits += 1;
                }
                Op::Advance(s) => {
                    clock.advance(Duration::from_secs(s));
                }
            }
        }

        // One revision per successful commit, no gaps.
        prop_assert_eq!(store.revision(), commits);
        let audit = store.audit();
        let revs: Vec<u64> = audit.iter().map(|a| a.revision).collect();
        prop_assert_eq!(revs, (1..=commits).collect::<Vec<_>>());
        prop_assert!(audit.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

        let snap = store.snapshot();
        for (id, state) in &jobs {
            prop_assert_eq!(snap.jobs[id].state, *state);
            let rec = &snap.jobs[id];
            prop_assert!(rec.state != JobState::Running || rec.started_at.is_some());
            prop_assert_eq!(rec.state.is_terminal(), rec.finished_at.is_some());
            prop_assert_eq!(rec.history.last().map(|h| h.state), Some(*state));
        }
        for (id, state) in &vms {
            prop_assert_eq!(snap.vms[id].state, *state);
        }

        let (base, entries) = store.history();
        prop_assert_eq!(&replay(&base, &entries), &snap);

        drop(store);
        let loaded = load_dir(dir.path()).unwrap();
        prop_assert_eq!(&loaded.snapshot(), &snap);
        prop_assert_eq!(&loaded.audit(), &audit);

        let reopened = Store::open(dir.path(), options(compact_every), clock.clone()).unwrap();
        prop_assert_eq!(&reopened.snapshot(), &snap);
        prop_assert_eq!(&reopened.audit(), &audit);
        // Fresh ids continue past the recovered ones.
        let next = reopened.enqueue(job(Backend::Local, clock.now())).unwrap();
        prop_assert!(jobs.iter().all(|(id, _)| *id < next));
        prop_assert_eq!(reopened.revision(), commits + 1);
    }
}
