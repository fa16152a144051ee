//! Engine and simulator behavior tests beyond the acceptance gate: blocking
//! semantics, deadlock detection, and model equivalences.

use std::collections::BTreeMap;

use teshu::engine::{execute, Scheduler};
use teshu::manager::InProcessManager;
use teshu::simulator::{reduced_map, ShuffleSpec, Simulator};
use teshu::workload::{generate_all, WorkloadSpec};
use teshu_core::message::{Message, MessageBuffer};
use teshu_core::plan::{Plan, PlanOp, SlotRef};
use teshu_core::registry::FnRegistry;
use teshu_core::sampling::SamplingConfig;
use teshu_core::topology::{CostModel, Topology, WorkerId};
use teshu_core::Error;

fn small_topo() -> Topology {
    Topology::new(1, 1, 2, 1.0, 1.25e9, 4).unwrap()
}

/// A hand-built single-phase plan for blocking-semantics tests.
fn raw_plan(worker: WorkerId, ops: Vec<PlanOp>) -> Plan {
    let registry = FnRegistry::with_defaults();
    let mut ops = ops;
    ops.push(PlanOp::PhaseEnd);
    Plan {
        worker,
        template_id: "raw".into(),
        shuffle_id: 0,
        ops,
        part: registry.partitioner("default").unwrap().clone(),
        comb: None,
        runs_sender: true,
        runs_receiver: false,
        total_phases: 1,
        phase_offset: 0,
    }
}

fn buf(keys: &[&str]) -> MessageBuffer {
    keys.iter().map(|k| Message::counted(k.as_bytes().to_vec(), 1).unwrap()).collect()
}

#[test]
fn cyclic_recv_is_reported_as_deadlock() {
    let topo = small_topo();
    let cm = CostModel::defaults_for(&topo);
    let (a, b) = (WorkerId(0), WorkerId(1));
    // Both receive before either sends: a classic cycle.
    let plans = vec![
        raw_plan(a, vec![
            PlanOp::Recv { src: b, out: SlotRef::Var("in".into()) },
            PlanOp::Send { dst: b, buf: SlotRef::Var("bufs".into()), sampling: false },
        ]),
        raw_plan(b, vec![
            PlanOp::Recv { src: a, out: SlotRef::Var("in".into()) },
            PlanOp::Send { dst: a, buf: SlotRef::Var("bufs".into()), sampling: false },
        ]),
    ];
    let inputs: BTreeMap<WorkerId, MessageBuffer> =
        [(a, buf(&["x"])), (b, buf(&["y"]))].into_iter().collect();
    let err = execute(&plans, &topo, &cm, inputs, Scheduler::Deterministic).unwrap_err();
    match err {
        Error::Deadlock(desc) => {
            assert!(desc.contains("waits on"), "deadlock report names the waiters: {desc}");
        }
        other => panic!("expected a deadlock, got {other}"),
    }
}

#[test]
fn channels_are_fifo_per_pair() {
    let topo = small_topo();
    let cm = CostModel::defaults_for(&topo);
    let (a, b) = (WorkerId(0), WorkerId(1));
    // a's first parcel is an (undefined, hence empty) buffer, the second is
    // its real input. b receives into "got1" then "out": only FIFO order
    // leaves the non-empty parcel in "out".
    let plans = vec![
        raw_plan(a, vec![
            PlanOp::Send { dst: b, buf: SlotRef::Var("empty".into()), sampling: false },
            PlanOp::Send { dst: b, buf: SlotRef::Var("bufs".into()), sampling: false },
        ]),
        {
            let mut p = raw_plan(b, vec![
                PlanOp::Recv { src: a, out: SlotRef::Var("got1".into()) },
                PlanOp::Recv { src: a, out: SlotRef::Var("out".into()) },
            ]);
            p.runs_receiver = true;
            p
        },
    ];
    let inputs: BTreeMap<WorkerId, MessageBuffer> =
        [(a, buf(&["late"])), (b, MessageBuffer::new())].into_iter().collect();
    let out = execute(&plans, &topo, &cm, inputs, Scheduler::Deterministic).unwrap();
    let delivered = &out.delivered[&b];
    assert_eq!(delivered.len(), 1);
    assert_eq!(delivered.iter().next().unwrap().key(), b"late");
}

#[test]
fn push_pull_and_coordinated_deliver_identically() {
    let topo = Topology::new(2, 2, 2, 4.0, 1.25e9, 4).unwrap();
    let workers = topo.all_workers();
    let spec: WorkloadSpec = "zipf:keys=40,s=1.2,n=300".parse().unwrap();
    let inputs = generate_all(&spec.with_seed(5), &workers).unwrap();
    let registry = FnRegistry::with_defaults();
    let mut reference: Option<BTreeMap<WorkerId, BTreeMap<Vec<u8>, Vec<u8>>>> = None;
    for template in ["vanilla_push", "vanilla_pull", "coordinated"] {
        let mut sim = Simulator::new(
            topo.clone(),
            InProcessManager::with_builtins(),
            SamplingConfig::new(0.25, 1).unwrap(),
        );
        let out = sim
            .run_shuffle(&ShuffleSpec::new(template, workers.clone(), workers.clone()), inputs.clone())
            .unwrap();
        let reduced: BTreeMap<WorkerId, BTreeMap<Vec<u8>, Vec<u8>>> = out
            .exec.delivered
            .iter()
            .map(|(&w, b)| (w, reduced_map(b, &registry, "sum").unwrap()))
            .collect();
        match &reference {
            None => reference = Some(reduced),
            Some(r) => assert_eq!(&reduced, r, "{template} deviates from vanilla_push"),
        }
    }
}

#[test]
fn forced_and_sampled_guards_deliver_the_same_data() {
    use teshu_core::plan::ForcedGuards;
    let topo = Topology::new(2, 2, 2, 10.0, 1.25e9, 4).unwrap();
    let workers = topo.all_workers();
    let spec: WorkloadSpec = "uniform:keys=200,n=400".parse().unwrap();
    let inputs = generate_all(&spec, &workers).unwrap();
    let shuffle =
        ShuffleSpec::new("network_aware", workers.clone(), workers.clone()).with_combiner("sum");
    let registry = FnRegistry::with_defaults();
    let mut sim = Simulator::new(
        topo,
        InProcessManager::with_builtins(),
        SamplingConfig::new(0.25, 9).unwrap(),
    );
    let sampled = sim.run_shuffle(&shuffle, inputs.clone()).unwrap();
    let forced = sim
        .run_forced(&shuffle, inputs, ForcedGuards { server: true, rack: true })
        .unwrap();
    let reduce = |o: &teshu::simulator::ShuffleOutcome| -> BTreeMap<_, _> {
        o.exec.delivered
            .iter()
            .map(|(&w, b)| (w, reduced_map(b, &registry, "sum").unwrap()))
            .collect()
    };
    assert_eq!(reduce(&sampled), reduce(&forced));
    // Forced runs ship no samples or guards.
    assert_eq!(forced.exec.sampling_bytes, 0);
    assert!(sampled.exec.sampling_bytes > 0);
}

#[test]
fn threaded_scheduler_matches_deterministic_across_templates() {
    let topo = Topology::new(2, 2, 2, 4.0, 1.25e9, 4).unwrap();
    let workers = topo.all_workers();
    let spec: WorkloadSpec = "letters:n=500".parse().unwrap();
    let inputs = generate_all(&spec.with_seed(13), &workers).unwrap();
    for template in ["vanilla_push", "vanilla_pull", "coordinated", "bruck", "two_level", "network_aware"] {
        let mut shuffle = ShuffleSpec::new(template, workers.clone(), workers.clone());
        if teshu_core::algorithms::builtin(template).unwrap().requires_combiner() {
            shuffle = shuffle.with_combiner("sum");
        }
        let run = |sched| {
            let mut sim = Simulator::new(
                topo.clone(),
                InProcessManager::with_builtins(),
                SamplingConfig::new(0.25, 21).unwrap(),
            );
            sim.scheduler = sched;
            sim.run_shuffle(&shuffle, inputs.clone()).unwrap()
        };
        let det = run(Scheduler::Deterministic);
        let thr = run(Scheduler::Threads);
        assert_eq!(det.exec.delivered, thr.exec.delivered, "{template}: delivered differ");
        assert_eq!(
            det.exec.modeled_time.to_bits(),
            thr.exec.modeled_time.to_bits(),
            "{template}: modeled time differs between schedulers"
        );
        assert_eq!(det.exec.bytes_by_level, thr.exec.bytes_by_level, "{template}");
    }
}
