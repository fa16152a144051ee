//! Plan execution over a simulated network.
//!
//! Every participating worker runs its specialized plan against a shared
//! network state: per-pair FIFO channels for SEND/RECV, per-publisher maps
//! for FETCH. Channel content depends only on each sender's program order,
//! so the deterministic cooperative scheduler and the threaded scheduler
//! produce bit-identical outcomes; the tests assert it.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use teshu_core::message::MessageBuffer;
use teshu_core::plan::{Plan, PlanOp, SlotRef};
use teshu_core::registry::{combine_buffer, partition_buffer};
use teshu_core::sampling::{compute_eff_cost, estimate_reduction, extract_group};
use teshu_core::topology::{CostModel, Level, Topology, WorkerId};
use teshu_core::{Error, Result};

/// Bytes on the wire for a sample parcel's byte-count metadata.
const SAMPLE_META_BYTES: u64 = 8;
/// Bytes on the wire for one broadcast guard frame.
const GUARD_FRAME_BYTES: u64 = 24;

/// How long a threaded worker waits on an empty channel before declaring
/// the run deadlocked.
const THREAD_DEADLOCK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardValue {
    pub level: Level,
    pub eff: f64,
    pub cost: f64,
    pub take: bool,
}

#[derive(Debug, Clone)]
enum Parcel {
    Data(MessageBuffer),
    Sample { buf: MessageBuffer, local_bytes: u64 },
    Guard(GuardValue),
}

impl Parcel {
    fn wire_bytes(&self) -> u64 {
        match self {
            Parcel::Data(b) => b.total_bytes(),
            Parcel::Sample { buf, .. } => buf.total_bytes() + SAMPLE_META_BYTES,
            Parcel::Guard(_) => GUARD_FRAME_BYTES,
        }
    }

    fn is_sampling(&self) -> bool {
        !matches!(self, Parcel::Data(_))
    }
}

/// One guard evaluation or application, for the decision trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub worker: WorkerId,
    pub guard: String,
    /// The sampling server whose estimate this record reflects.
    pub server: WorkerId,
    pub level: Level,
    /// Sampled reduction ratio; present only where it was computed.
    pub r_hat: Option<f64>,
    pub eff: f64,
    pub cost: f64,
    pub take: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheduler {
    /// Cooperative run-to-block, lowest worker id first, with wait-graph
    /// deadlock detection.
    Deterministic,
    /// One OS thread per worker over a shared mutex-guarded network.
    Threads,
}

/// Everything a finished execution reports.
#[derive(Debug, Clone, Default)]
pub struct ExecOutcome {
    /// Receiver `out` buffers, one per destination worker.
    pub delivered: BTreeMap<WorkerId, MessageBuffer>,
    /// Wire bytes by topology level; the Worker level counts self-sends.
    pub bytes_by_level: BTreeMap<Level, u64>,
    pub total_bytes: u64,
    pub self_bytes: u64,
    /// Bytes spent on sample parcels and guard frames (subset of the total).
    pub sampling_bytes: u64,
    /// Per-phase maxima over workers; their sum is the modeled time.
    pub phase_times: Vec<f64>,
    pub modeled_time: f64,
    pub decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Default)]
struct NetState {
    channels: BTreeMap<(WorkerId, WorkerId), VecDeque<Parcel>>,
    published: BTreeMap<WorkerId, BTreeMap<WorkerId, MessageBuffer>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Progress,
    /// Waiting for the given worker to send or publish.
    Blocked(WorkerId),
    Done,
}

struct SampleRun {
    scope_len: usize,
    sample: MessageBuffer,
    scope_bytes: u64,
}

struct WorkerExec<'a> {
    plan: &'a Plan,
    topo: &'a Topology,
    cm: &'a CostModel,
    pc: usize,
    bufs: BTreeMap<String, MessageBuffer>,
    maps: BTreeMap<String, BTreeMap<WorkerId, MessageBuffer>>,
    guards: BTreeMap<String, GuardValue>,
    runs: BTreeMap<String, SampleRun>,
    phase_time: f64,
    phases_done: usize,
    phase_times: Vec<f64>,
    bytes_by_level: BTreeMap<Level, u64>,
    total_bytes: u64,
    self_bytes: u64,
    sampling_bytes: u64,
    decisions: Vec<DecisionRecord>,
}

impl<'a> WorkerExec<'a> {
    fn new(plan: &'a Plan, topo: &'a Topology, cm: &'a CostModel, input: MessageBuffer) -> Self {
        let mut bufs = BTreeMap::new();
        bufs.insert("bufs".to_string(), input);
        Self {
            plan,
            topo,
            cm,
            pc: 0,
            bufs,
            maps: BTreeMap::new(),
            guards: BTreeMap::new(),
            runs: BTreeMap::new(),
            phase_time: 0.0,
            phases_done: 0,
            phase_times: vec![0.0; plan.total_phases],
            bytes_by_level: BTreeMap::new(),
            total_bytes: 0,
            self_bytes: 0,
            sampling_bytes: 0,
            decisions: Vec::new(),
        }
    }

    fn me(&self) -> WorkerId {
        self.plan.worker
    }

    fn take_slot(&mut self, slot: &SlotRef) -> MessageBuffer {
        match slot {
            SlotRef::Var(v) => self.bufs.remove(v).unwrap_or_default(),
            SlotRef::MapEntry(map, w) => self
                .maps
                .get_mut(map)
                .and_then(|m| m.remove(w))
                .unwrap_or_default(),
        }
    }

    fn extend_slot(&mut self, slot: &SlotRef, buf: MessageBuffer) {
        match slot {
            SlotRef::Var(v) => self.bufs.entry(v.clone()).or_default().extend_from(buf),
            SlotRef::MapEntry(map, w) => self
                .maps
                .entry(map.clone())
                .or_default()
                .entry(*w)
                .or_default()
                .extend_from(buf),
        }
    }

    fn take_map(&mut self, map: &str) -> BTreeMap<WorkerId, MessageBuffer> {
        self.maps.remove(map).unwrap_or_default()
    }

    /// Charge one parcel leaving (or being fetched by) this worker.
    fn account_transfer(&mut self, peer: WorkerId, parcel: &Parcel) -> Result<()> {
        let level = self.topo.level_of(self.me(), peer)?;
        let bytes = parcel.wire_bytes();
        self.phase_time += self.cm.transfer_time(bytes as f64, level, self.topo);
        *self.bytes_by_level.entry(level).or_insert(0) += bytes;
        self.total_bytes += bytes;
        if peer == self.me() {
            self.self_bytes += bytes;
        }
        if parcel.is_sampling() {
            self.sampling_bytes += bytes;
        }
        Ok(())
    }

    fn send(&mut self, net: &mut NetState, dst: WorkerId, parcel: Parcel) -> Result<()> {
        self.account_transfer(dst, &parcel)?;
        net.channels.entry((self.me(), dst)).or_default().push_back(parcel);
        Ok(())
    }

    fn pop_from(&mut self, net: &mut NetState, src: WorkerId) -> Option<Parcel> {
        net.channels.get_mut(&(src, self.me())).and_then(VecDeque::pop_front)
    }

    fn combine_charge(&mut self, bytes: u64) {
        self.phase_time += self.cm.combine_time(bytes as f64);
    }

    fn err(&self, what: impl std::fmt::Display) -> Error {
        Error::PlanExecution(format!("worker {}: {what}", self.me()))
    }

    /// Execute the op at `pc`; returns whether it progressed, blocked, or the
    /// plan is finished. Blocked ops leave all state untouched.
    fn step(&mut self, net: &mut NetState) -> Result<Step> {
        let Some(op) = self.plan.ops.get(self.pc) else {
            return Ok(Step::Done);
        };
        let op = op.clone();
        match op {
            PlanOp::Part { buf, dsts, out } => {
                let input = self.bufs.remove(&buf).unwrap_or_default();
                let parts = partition_buffer(&input, dsts.len(), &self.plan.part)?;
                self.maps.insert(out, dsts.into_iter().zip(parts).collect());
            }
            PlanOp::Comb { buf } => {
                let comb = self.plan.comb.as_ref().ok_or_else(|| self.err("comb without combiner"))?;
                let input = self.bufs.remove(&buf).unwrap_or_default();
                self.combine_charge(input.total_bytes());
                self.bufs.insert(buf, combine_buffer(&input, comb));
            }
            PlanOp::CombMap { map, out } => {
                let comb = self.plan.comb.as_ref().ok_or_else(|| self.err("comb-map without combiner"))?;
                let mut concat = MessageBuffer::new();
                for (_, b) in self.take_map(&map) {
                    concat.extend_from(b);
                }
                self.combine_charge(concat.total_bytes());
                self.bufs.insert(out, combine_buffer(&concat, comb));
            }
            PlanOp::Gather { map, out } => {
                let mut concat = MessageBuffer::new();
                for (_, b) in self.take_map(&map) {
                    concat.extend_from(b);
                }
                self.bufs.insert(out, concat);
            }
            PlanOp::Copy { from, to } => {
                let b = self.take_slot(&from);
                self.extend_slot(&to, b);
            }
            PlanOp::EnsureSlots { map, keys } => {
                let m = self.maps.entry(map).or_default();
                for k in keys {
                    m.entry(k).or_default();
                }
            }
            PlanOp::Send { dst, buf, .. } => {
                let b = self.take_slot(&buf);
                self.send(net, dst, Parcel::Data(b))?;
            }
            PlanOp::Recv { src, out } => match self.pop_from(net, src) {
                Some(Parcel::Data(b)) => self.extend_slot(&out, b),
                Some(_) => return Err(self.err(format!("non-data parcel at RECV from {src}"))),
                None => return Ok(Step::Blocked(src)),
            },
            PlanOp::Fetch { src, out } => {
                let Some(shelf) = net.published.get_mut(&src) else {
                    return Ok(Step::Blocked(src));
                };
                let b = shelf.remove(&self.me()).unwrap_or_default();
                let parcel = Parcel::Data(b);
                self.account_transfer(src, &parcel)?;
                let Parcel::Data(b) = parcel else { unreachable!() };
                self.extend_slot(&out, b);
            }
            PlanOp::Publish { map, dsts } => {
                let mut m = self.take_map(&map);
                for d in dsts {
                    m.entry(d).or_default();
                }
                net.published.insert(self.me(), m);
            }
            PlanOp::SampExtract { buf, group, groups, domain, out } => {
                let src = self.bufs.get(&buf).cloned().unwrap_or_default();
                let extracted = extract_group(&src, domain, &self.plan.part, groups, group);
                self.bufs.insert(out, extracted);
            }
            PlanOp::SampleSend { server, sample, bytes_of } => {
                let local_bytes = self.bufs.get(&bytes_of).map_or(0, MessageBuffer::total_bytes);
                let buf = self.bufs.remove(&sample).unwrap_or_default();
                self.send(net, server, Parcel::Sample { buf, local_bytes })?;
            }
            PlanOp::SampleInit { run, scope, .. } => {
                self.runs.insert(
                    run,
                    SampleRun { scope_len: scope.len(), sample: MessageBuffer::new(), scope_bytes: 0 },
                );
            }
            PlanOp::SampleRecv { run, src } => match self.pop_from(net, src) {
                Some(Parcel::Sample { buf, local_bytes }) => {
                    let r = self
                        .runs
                        .get_mut(&run)
                        .ok_or_else(|| Error::PlanExecution(format!("sample run '{run}' not open")))?;
                    r.sample.extend_from(buf);
                    r.scope_bytes += local_bytes;
                }
                Some(_) => return Err(self.err(format!("non-sample parcel from {src}"))),
                None => return Ok(Step::Blocked(src)),
            },
            PlanOp::EffCostCompute { run, level, out } => {
                let comb = self.plan.comb.as_ref().ok_or_else(|| self.err("eff-cost without combiner"))?;
                let r = self
                    .runs
                    .remove(&run)
                    .ok_or_else(|| Error::PlanExecution(format!("sample run '{run}' not open")))?;
                self.combine_charge(r.sample.total_bytes());
                let r_hat = estimate_reduction(&r.sample, comb);
                let ec = compute_eff_cost(r.scope_bytes, r.scope_len, r_hat, level, self.topo, self.cm);
                let guard = GuardValue { level, eff: ec.eff, cost: ec.cost, take: ec.worth_it() };
                self.decisions.push(DecisionRecord {
                    worker: self.me(),
                    guard: out.clone(),
                    server: self.me(),
                    level,
                    r_hat: Some(r_hat),
                    eff: guard.eff,
                    cost: guard.cost,
                    take: guard.take,
                });
                self.guards.insert(out, guard);
            }
            PlanOp::GuardSend { dst, guard } => {
                let g = *self
                    .guards
                    .get(&guard)
                    .ok_or_else(|| Error::PlanExecution(format!("guard '{guard}' not set")))?;
                self.send(net, dst, Parcel::Guard(g))?;
            }
            PlanOp::GuardRecv { src, out } => match self.pop_from(net, src) {
                Some(Parcel::Guard(g)) => {
                    self.decisions.push(DecisionRecord {
                        worker: self.me(),
                        guard: out.clone(),
                        server: src,
                        level: g.level,
                        r_hat: None,
                        eff: g.eff,
                        cost: g.cost,
                        take: g.take,
                    });
                    self.guards.insert(out, g);
                }
                Some(_) => return Err(self.err(format!("non-guard parcel from {src}"))),
                None => return Ok(Step::Blocked(src)),
            },
            PlanOp::GuardConst { out, level, server, take } => {
                let g = GuardValue { level, eff: 0.0, cost: 0.0, take };
                self.decisions.push(DecisionRecord {
                    worker: self.me(),
                    guard: out.clone(),
                    server,
                    level,
                    r_hat: None,
                    eff: 0.0,
                    cost: 0.0,
                    take,
                });
                self.guards.insert(out, g);
            }
            PlanOp::JumpIfNot { guard, target } => {
                let g = self
                    .guards
                    .get(&guard)
                    .ok_or_else(|| Error::PlanExecution(format!("guard '{guard}' not set")))?;
                if !g.take {
                    self.pc = target;
                    return Ok(Step::Progress);
                }
            }
            PlanOp::BruckSelect { parts, my_index, bit, dsts, out } => {
                let n = dsts.len();
                let m = self.maps.entry(parts).or_default();
                let mut selected = MessageBuffer::new();
                for (idx, d) in dsts.iter().enumerate() {
                    let rel = (idx + n - my_index % n) % n;
                    if rel >> bit & 1 == 1 {
                        if let Some(b) = m.remove(d) {
                            selected.extend_from(b);
                        }
                    }
                }
                self.bufs.insert(out, selected);
            }
            PlanOp::BruckMerge { parts, incoming, dsts } => {
                let inc = self.bufs.remove(&incoming).unwrap_or_default();
                let m = self.maps.entry(parts).or_default();
                for msg in inc.into_messages() {
                    let idx = self.plan.part.eval(msg.key(), dsts.len());
                    let d = *dsts
                        .get(idx)
                        .ok_or_else(|| Error::PlanExecution(format!("partition index {idx} out of range")))?;
                    m.entry(d).or_default().push(msg);
                }
            }
            PlanOp::SliceTake { parts, keys, out } => {
                let m = self.maps.entry(parts).or_default();
                let mut concat = MessageBuffer::new();
                for k in keys {
                    if let Some(b) = m.remove(&k) {
                        concat.extend_from(b);
                    }
                }
                self.bufs.insert(out, concat);
            }
            PlanOp::MergeByDest { incoming, out, dsts } => {
                let inc = self.bufs.remove(&incoming).unwrap_or_default();
                for msg in inc.into_messages() {
                    let idx = self.plan.part.eval(msg.key(), dsts.len());
                    let d = dsts
                        .get(idx)
                        .copied()
                        .ok_or_else(|| Error::PlanExecution(format!("partition index {idx} out of range")))?;
                    let w = self.plan.worker;
                    let slot = self
                        .maps
                        .get_mut(&out)
                        .and_then(|m| m.get_mut(&d))
                        .ok_or_else(|| {
                            Error::PlanExecution(format!(
                                "{w}: message for {d} outside this worker's slice"
                            ))
                        })?;
                    slot.push(msg);
                }
            }
            PlanOp::CombMapValues { map } => {
                if let Some(comb) = self.plan.comb.clone() {
                    let m = self.take_map(&map);
                    let mut combined = BTreeMap::new();
                    for (k, b) in m {
                        self.combine_charge(b.total_bytes());
                        combined.insert(k, combine_buffer(&b, &comb));
                    }
                    self.maps.insert(map, combined);
                }
            }
            PlanOp::PhaseEnd => {
                let idx = self.plan.phase_offset + self.phases_done;
                let slot = self
                    .phase_times
                    .get_mut(idx)
                    .ok_or_else(|| Error::PlanExecution("phase index out of range".into()))?;
                *slot += self.phase_time;
                self.phase_time = 0.0;
                self.phases_done += 1;
            }
        }
        self.pc += 1;
        Ok(Step::Progress)
    }
}

/// Execute one shuffle's plans to completion.
pub fn execute(
    plans: &[Plan],
    topo: &Topology,
    cm: &CostModel,
    inputs: BTreeMap<WorkerId, MessageBuffer>,
    scheduler: Scheduler,
) -> Result<ExecOutcome> {
    if plans.is_empty() {
        return Err(Error::InvalidArgument("no plans to execute".into()));
    }
    let phases = plans[0].total_phases;
    let mut seen = std::collections::BTreeSet::new();
    for p in plans {
        if p.total_phases != phases {
            return Err(Error::InvalidArgument("plans disagree on phase structure".into()));
        }
        if !seen.insert(p.worker) {
            return Err(Error::InvalidArgument(format!("duplicate plan for worker {}", p.worker)));
        }
    }
    let mut inputs = inputs;
    let mut execs: Vec<WorkerExec> = plans
        .iter()
        .map(|p| WorkerExec::new(p, topo, cm, inputs.remove(&p.worker).unwrap_or_default()))
        .collect();
    execs.sort_by_key(|e| e.plan.worker);

    match scheduler {
        Scheduler::Deterministic => run_deterministic(&mut execs)?,
        Scheduler::Threads => run_threads(&mut execs)?,
    }
    Ok(collect(execs))
}

fn run_deterministic(execs: &mut [WorkerExec]) -> Result<()> {
    let mut net = NetState::default();
    loop {
        let mut progressed = false;
        let mut all_done = true;
        let mut waits: Vec<(WorkerId, WorkerId)> = Vec::new();
        for e in execs.iter_mut() {
            loop {
                match e.step(&mut net)? {
                    Step::Progress => progressed = true,
                    Step::Blocked(on) => {
                        all_done = false;
                        waits.push((e.me(), on));
                        break;
                    }
                    Step::Done => break,
                }
            }
        }
        if all_done {
            return Ok(());
        }
        if !progressed {
            let desc: Vec<String> =
                waits.iter().map(|(w, on)| format!("{w} waits on {on}")).collect();
            return Err(Error::Deadlock(desc.join(", ")));
        }
    }
}

fn run_threads(execs: &mut [WorkerExec]) -> Result<()> {
    let net = Mutex::new(NetState::default());
    let cond = Condvar::new();
    let result: Mutex<Result<()>> = Mutex::new(Ok(()));
    std::thread::scope(|s| {
        for e in execs.iter_mut() {
            let net = &net;
            let cond = &cond;
            let result = &result;
            s.spawn(move || {
                let run = (|| -> Result<()> {
                    let mut guard = net.lock().expect("net lock");
                    loop {
                        match e.step(&mut *guard)? {
                            Step::Progress => {
                                cond.notify_all();
                            }
                            Step::Done => return Ok(()),
                            Step::Blocked(on) => {
                                let (g, timeout) = cond
                                    .wait_timeout(guard, THREAD_DEADLOCK_TIMEOUT)
                                    .expect("net lock");
                                guard = g;
                                if timeout.timed_out() {
                                    return Err(Error::Deadlock(format!(
                                        "{} timed out waiting on {on}",
                                        e.me()
                                    )));
                                }
                            }
                        }
                    }
                })();
                if run.is_err() {
                    let mut r = result.lock().expect("result lock");
                    if r.is_ok() {
                        *r = run;
                    }
                    cond.notify_all();
                }
            });
        }
    });
    result.into_inner().expect("result lock")
}

fn collect(mut execs: Vec<WorkerExec>) -> ExecOutcome {
    let mut out = ExecOutcome::default();
    let phases = execs.first().map_or(0, |e| e.phase_times.len());
    out.phase_times = vec![0.0; phases];
    for e in &mut execs {
        if e.plan.runs_receiver {
            out.delivered.insert(e.me(), e.bufs.remove("out").unwrap_or_default());
        }
        for (lvl, b) in &e.bytes_by_level {
            *out.bytes_by_level.entry(*lvl).or_insert(0) += b;
        }
        out.total_bytes += e.total_bytes;
        out.self_bytes += e.self_bytes;
        out.sampling_bytes += e.sampling_bytes;
        for (i, t) in e.phase_times.iter().enumerate() {
            if *t > out.phase_times[i] {
                out.phase_times[i] = *t;
            }
        }
        out.decisions.append(&mut e.decisions);
    }
    out.decisions.sort_by(|a, b| {
        (&a.guard, a.server, a.worker).cmp(&(&b.guard, b.server, b.worker))
    });
    out.modeled_time = out.phase_times.iter().sum();
    out
}

/// Every member of a sampling scope must have applied the same branch
/// decision as the scope's server.
pub fn check_scope_consistency(decisions: &[DecisionRecord]) -> Result<()> {
    let mut by_scope: BTreeMap<(&str, WorkerId), bool> = BTreeMap::new();
    for d in decisions {
        match by_scope.get(&(d.guard.as_str(), d.server)) {
            Some(&take) if take != d.take => {
                return Err(Error::PlanExecution(format!(
                    "guard '{}' of scope {} disagrees at worker {}",
                    d.guard, d.server, d.worker
                )));
            }
            Some(_) => {}
            None => {
                by_scope.insert((d.guard.as_str(), d.server), d.take);
            }
        }
    }
    Ok(())
}
