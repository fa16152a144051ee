//! Instantiation: specializing a template for one worker of one shuffle
//! invocation into a flat, fully resolved plan.
//!
//! All `$`-parameters are bound here — neighbor sets from the topology,
//! the sampling rate and group choice from the sampling config, schedules
//! from the schedule helpers — and loops over known worker sets are
//! unrolled, so the executor only ever sees concrete worker ids and jump
//! targets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::message::MessageBuffer;
use crate::registry::{Combiner, FnRegistry, Partitioner, DEFAULT_PARTITION_ID};
use crate::sampling::{sample_group_index, SamplingConfig};
use crate::schedule::{auto_group_size, bruck_schedule};
use crate::template::{BufRef, Instr, IterOrder, NbrLevel, SetRef, Template, WorkerRef};
use crate::topology::{neighbors_same_rack, neighbors_same_server, CostModel, Level, Topology, WorkerId};

/// One worker's invocation of a shuffle collective.
#[derive(Debug, Clone)]
pub struct ShuffleCall {
    pub worker: WorkerId,
    pub template_id: String,
    pub shuffle_id: u64,
    pub srcs: Vec<WorkerId>,
    pub dsts: Vec<WorkerId>,
    pub bufs: MessageBuffer,
    pub part_fn: String,
    pub comb_fn: Option<String>,
}

impl ShuffleCall {
    pub fn new(
        worker: WorkerId,
        template_id: impl Into<String>,
        shuffle_id: u64,
        srcs: Vec<WorkerId>,
        dsts: Vec<WorkerId>,
        bufs: MessageBuffer,
    ) -> Self {
        Self {
            worker,
            template_id: template_id.into(),
            shuffle_id,
            srcs,
            dsts,
            bufs,
            part_fn: DEFAULT_PARTITION_ID.into(),
            comb_fn: None,
        }
    }

    pub fn with_combiner(mut self, comb_fn: impl Into<String>) -> Self {
        self.comb_fn = Some(comb_fn.into());
        self
    }

    pub fn with_partitioner(mut self, part_fn: impl Into<String>) -> Self {
        self.part_fn = part_fn.into();
        self
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        for (name, list) in [("srcs", &self.srcs), ("dsts", &self.dsts)] {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} must be non-empty")));
            }
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::InvalidArgument(format!("{name} contains duplicates")));
            }
            for &w in list {
                topo.level_of(w, w)?;
            }
        }
        if !self.srcs.contains(&self.worker) && !self.dsts.contains(&self.worker) {
            return Err(Error::InvalidArgument(format!(
                "worker {} participates in neither srcs nor dsts",
                self.worker
            )));
        }
        Ok(())
    }
}

/// Guard values forced by the exhaustive planner, bypassing SAMP entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForcedGuards {
    pub server: bool,
    pub rack: bool,
}

/// Everything instantiation needs besides the call itself.
pub struct PlanParams<'a> {
    pub topo: &'a Topology,
    pub cm: &'a CostModel,
    pub registry: &'a FnRegistry,
    pub sampling: SamplingConfig,
    /// Two-level exchange group size; `None` picks `ceil(sqrt(|srcs|))`.
    pub group_size: Option<usize>,
    pub forced_guards: Option<ForcedGuards>,
}

/// A buffer location in the executor's environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotRef {
    Var(String),
    MapEntry(String, WorkerId),
}

/// Fully resolved executor instructions.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanOp {
    Part { buf: String, dsts: Vec<WorkerId>, out: String },
    Comb { buf: String },
    CombMap { map: String, out: String },
    Gather { map: String, out: String },
    Copy { from: SlotRef, to: SlotRef },
    /// Pre-fill map entries with empty buffers so later merges and sends
    /// have a slot for every destination.
    EnsureSlots { map: String, keys: Vec<WorkerId> },
    Send { dst: WorkerId, buf: SlotRef, sampling: bool },
    Recv { src: WorkerId, out: SlotRef },
    Fetch { src: WorkerId, out: SlotRef },
    Publish { map: String, dsts: Vec<WorkerId> },
    /// Copy this worker's group-`group` messages out of `buf`.
    SampExtract { buf: String, group: u64, groups: u64, domain: usize, out: String },
    /// Ship the extracted sample plus this worker's buffer byte count to the
    /// sampling server.
    SampleSend { server: WorkerId, sample: String, bytes_of: String },
    SampleInit { run: String, scope: Vec<WorkerId>, group: u64, groups: u64 },
    SampleRecv { run: String, src: WorkerId },
    /// At the sampling server: estimate the reduction ratio and form the
    /// (EFF, COST) guard.
    EffCostCompute { run: String, level: Level, out: String },
    GuardSend { dst: WorkerId, guard: String },
    GuardRecv { src: WorkerId, out: String },
    GuardConst { out: String, level: Level, server: WorkerId, take: bool },
    JumpIfNot { guard: String, target: usize },
    BruckSelect { parts: String, my_index: usize, bit: u32, dsts: Vec<WorkerId>, out: String },
    BruckMerge { parts: String, incoming: String, dsts: Vec<WorkerId> },
    /// Drain the listed destinations' buffers out of a map, concatenated.
    SliceTake { parts: String, keys: Vec<WorkerId>, out: String },
    /// Re-bin incoming messages by the partition function and merge them
    /// into an existing destination map.
    MergeByDest { incoming: String, out: String, dsts: Vec<WorkerId> },
    /// Combine each buffer of a map in place, when a combiner is available.
    CombMapValues { map: String },
    PhaseEnd,
}

/// A specialized, executable plan for one worker.
#[derive(Debug, Clone)]
pub struct Plan {
    pub worker: WorkerId,
    pub template_id: String,
    pub shuffle_id: u64,
    pub ops: Vec<PlanOp>,
    pub part: Partitioner,
    pub comb: Option<Combiner>,
    pub runs_sender: bool,
    pub runs_receiver: bool,
    /// Phase slots this template defines (sender then receiver); every
    /// participant reports into the same global phase vector.
    pub total_phases: usize,
    /// Index of the first phase this worker's ops report into.
    pub phase_offset: usize,
}

pub fn instantiate(template: &Template, call: &ShuffleCall, params: &PlanParams) -> Result<Plan> {
    call.validate(params.topo)?;
    let part = params.registry.partitioner(&call.part_fn)?.clone();
    let comb = match &call.comb_fn {
        Some(id) => Some(params.registry.combiner(id)?.clone()),
        None => None,
    };
    if template.requires_combiner() && comb.is_none() {
        return Err(Error::Instantiation(format!(
            "template '{}' requires a combiner but the call provides none",
            template.id
        )));
    }

    let runs_sender = call.srcs.contains(&call.worker);
    let runs_receiver = call.dsts.contains(&call.worker);

    let mut lowerer = Lowerer {
        call,
        params,
        ops: Vec::new(),
        sets: BTreeMap::new(),
        bindings: BTreeMap::new(),
        samp_scopes: BTreeMap::new(),
        samp_stage: 0,
        tmp_counter: 0,
    };

    if runs_sender {
        lowerer.lower_program(&template.sender)?;
    }
    if runs_receiver {
        lowerer.lower_program(&template.receiver)?;
    }

    let phase_offset = if runs_sender { 0 } else { template.sender.len() };
    Ok(Plan {
        worker: call.worker,
        template_id: template.id.clone(),
        shuffle_id: call.shuffle_id,
        ops: lowerer.ops,
        part,
        comb,
        runs_sender,
        runs_receiver,
        total_phases: template.sender.len() + template.receiver.len(),
        phase_offset,
    })
}

struct Lowerer<'a> {
    call: &'a ShuffleCall,
    params: &'a PlanParams<'a>,
    ops: Vec<PlanOp>,
    sets: BTreeMap<String, Vec<WorkerId>>,
    bindings: BTreeMap<String, WorkerId>,
    /// Scope of the SAMP run bound to each run variable.
    samp_scopes: BTreeMap<String, (Vec<WorkerId>, Level)>,
    samp_stage: u64,
    tmp_counter: u32,
}

impl<'a> Lowerer<'a> {
    fn lower_program(&mut self, instrs: &[Instr]) -> Result<()> {
        for instr in instrs {
            self.lower(instr)?;
            self.ops.push(PlanOp::PhaseEnd);
        }
        Ok(())
    }

    fn tmp(&mut self, tag: &str) -> String {
        self.tmp_counter += 1;
        format!("#{tag}{}", self.tmp_counter)
    }

    fn me(&self) -> WorkerId {
        self.call.worker
    }

    fn resolve_set(&self, set: &SetRef) -> Result<Vec<WorkerId>> {
        match set {
            SetRef::Srcs => Ok(self.call.srcs.clone()),
            SetRef::Dsts => Ok(self.call.dsts.clone()),
            SetRef::Var(name) => self
                .sets
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Instantiation(format!("worker set '{name}' is not bound"))),
        }
    }

    fn resolve_worker(&self, w: &WorkerRef) -> Result<WorkerId> {
        match w {
            WorkerRef::Myself => Ok(self.me()),
            WorkerRef::Var(name) => self
                .bindings
                .get(name)
                .copied()
                .ok_or_else(|| Error::Instantiation(format!("loop variable '{name}' is not bound"))),
        }
    }

    fn resolve_bufref(&self, b: &BufRef) -> Result<SlotRef> {
        Ok(match b {
            BufRef::Var(v) => SlotRef::Var(v.clone()),
            BufRef::MapEntry { map, key } => SlotRef::MapEntry(map.clone(), self.resolve_worker(key)?),
        })
    }

    fn my_dst_index(&self) -> Result<usize> {
        self.call
            .dsts
            .iter()
            .position(|&d| d == self.me())
            .ok_or_else(|| Error::Instantiation("worker is not a destination".into()))
    }

    fn my_src_index(&self) -> Result<usize> {
        self.call
            .srcs
            .iter()
            .position(|&s| s == self.me())
            .ok_or_else(|| Error::Instantiation("worker is not a source".into()))
    }

    /// The source groups of the two-level exchange: consecutive chunks of
    /// `srcs` of the configured (or auto) size.
    fn source_groups(&self) -> Vec<Vec<WorkerId>> {
        let n = self.call.srcs.len();
        let g = self.params.group_size.unwrap_or_else(|| auto_group_size(n)).clamp(1, n);
        self.call.srcs.chunks(g).map(|c| c.to_vec()).collect()
    }

    /// The slice of destinations owned by position `pos` of a group with
    /// `glen` members: destination indices congruent to `pos` mod `glen`.
    fn slice_of(&self, pos: usize, glen: usize) -> Vec<WorkerId> {
        self.call
            .dsts
            .iter()
            .enumerate()
            .filter(|(i, _)| i % glen == pos)
            .map(|(_, &d)| d)
            .collect()
    }

    fn my_group(&self) -> Result<(Vec<WorkerId>, usize)> {
        let groups = self.source_groups();
        for group in groups {
            if let Some(pos) = group.iter().position(|&w| w == self.me()) {
                return Ok((group, pos));
            }
        }
        Err(Error::Instantiation("worker is not a source, no exchange group".into()))
    }

    fn lower(&mut self, instr: &Instr) -> Result<()> {
        match instr {
            Instr::Comb { buf } => self.ops.push(PlanOp::Comb { buf: buf.clone() }),
            Instr::CombMap { map, out } => {
                self.ops.push(PlanOp::CombMap { map: map.clone(), out: out.clone() })
            }
            Instr::Gather { map, out } => {
                self.ops.push(PlanOp::Gather { map: map.clone(), out: out.clone() })
            }
            Instr::FindNbrs { level, out } => {
                let nbrs = match level {
                    NbrLevel::Server => {
                        neighbors_same_server(self.me(), &self.call.srcs, self.params.topo)?
                    }
                    NbrLevel::Rack => neighbors_same_rack(self.me(), &self.call.srcs, self.params.topo)?,
                };
                self.sets.insert(out.clone(), nbrs);
            }
            Instr::Samp { buf, scope, out } => {
                let scope = self.resolve_set(scope)?;
                let stage = self.samp_stage;
                self.samp_stage += 1;
                self.samp_scopes.insert(out.clone(), (scope.clone(), Level::Worker));
                if self.params.forced_guards.is_some() {
                    return Ok(()); // bypassed, the guard will be forced
                }
                let groups = self.params.sampling.group_count();
                let j = sample_group_index(&self.params.sampling, self.call.shuffle_id, stage, groups);
                let server = *scope.iter().min().expect("scope is non-empty");
                let extracted = self.tmp("samp");
                self.ops.push(PlanOp::SampExtract {
                    buf: buf.clone(),
                    group: j,
                    groups,
                    domain: crate::sampling::SAMPLING_DOMAIN,
                    out: extracted.clone(),
                });
                if self.me() == server {
                    self.ops.push(PlanOp::SampleInit {
                        run: out.clone(),
                        scope: scope.clone(),
                        group: j,
                        groups,
                    });
                }
                self.ops.push(PlanOp::SampleSend {
                    server,
                    sample: extracted,
                    bytes_of: buf.clone(),
                });
                if self.me() == server {
                    for &q in &scope {
                        self.ops.push(PlanOp::SampleRecv { run: out.clone(), src: q });
                    }
                }
            }
            Instr::EffCost { run, level, out } => {
                let (scope, _) = self
                    .samp_scopes
                    .get(run)
                    .cloned()
                    .ok_or_else(|| Error::Instantiation(format!("'{run}' is not a sample run")))?;
                let lvl = match level {
                    NbrLevel::Server => Level::Server,
                    NbrLevel::Rack => Level::Rack,
                };
                let server = *scope.iter().min().expect("scope is non-empty");
                if let Some(forced) = self.params.forced_guards {
                    let take = match lvl {
                        Level::Server => forced.server,
                        _ => forced.rack,
                    };
                    self.ops.push(PlanOp::GuardConst { out: out.clone(), level: lvl, server, take });
                } else if self.me() == server {
                    self.ops.push(PlanOp::EffCostCompute {
                        run: run.clone(),
                        level: lvl,
                        out: out.clone(),
                    });
                    for &q in &scope {
                        if q != server {
                            self.ops.push(PlanOp::GuardSend { dst: q, guard: out.clone() });
                        }
                    }
                } else {
                    self.ops.push(PlanOp::GuardRecv { src: server, out: out.clone() });
                }
            }
            Instr::If { cond, body } => {
                let jump_at = self.ops.len();
                self.ops.push(PlanOp::JumpIfNot { guard: cond.clone(), target: usize::MAX });
                for b in body {
                    self.lower(b)?;
                }
                let target = self.ops.len();
                if let PlanOp::JumpIfNot { target: t, .. } = &mut self.ops[jump_at] {
                    *t = target;
                }
            }
            Instr::Part { buf, dsts, out } => {
                let dsts = self.resolve_set(dsts)?;
                self.ops.push(PlanOp::Part { buf: buf.clone(), dsts, out: out.clone() });
            }
            Instr::ForEach { var, set, order, body } => {
                let list = self.resolve_set(set)?;
                let ordered: Vec<WorkerId> = match order {
                    IterOrder::Ascending => list,
                    IterOrder::Ring => {
                        // Step t pairs sender index s with receiver
                        // (s + t) mod m; from this receiver's position that
                        // is source index (p - t) mod m.
                        let m = list.len();
                        let p = self.my_dst_index()? % m;
                        (0..m).map(|t| list[(p + m - t % m) % m]).collect()
                    }
                };
                for w in ordered {
                    let shadowed = self.bindings.insert(var.clone(), w);
                    for b in body {
                        self.lower(b)?;
                    }
                    match shadowed {
                        Some(prev) => {
                            self.bindings.insert(var.clone(), prev);
                        }
                        None => {
                            self.bindings.remove(var);
                        }
                    }
                }
            }
            Instr::Send { dst, buf } => {
                let dst = self.resolve_worker(dst)?;
                let buf = self.resolve_bufref(buf)?;
                self.ops.push(PlanOp::Send { dst, buf, sampling: false });
            }
            Instr::Recv { src, out } => {
                let src = self.resolve_worker(src)?;
                let out = self.resolve_bufref(out)?;
                self.ops.push(PlanOp::Recv { src, out });
            }
            Instr::Fetch { src, out } => {
                let src = self.resolve_worker(src)?;
                let out = self.resolve_bufref(out)?;
                self.ops.push(PlanOp::Fetch { src, out });
            }
            Instr::Publish { map } => {
                self.ops.push(PlanOp::Publish { map: map.clone(), dsts: self.call.dsts.clone() });
            }
            Instr::Copy { from, to } => {
                let from = self.resolve_bufref(from)?;
                let to = self.resolve_bufref(to)?;
                self.ops.push(PlanOp::Copy { from, to });
            }
            Instr::GroupExchange { parts, out } => {
                let (group, my_pos) = self.my_group()?;
                let glen = group.len();
                let my_slice = self.slice_of(my_pos, glen);
                self.ops.push(PlanOp::EnsureSlots { map: out.clone(), keys: my_slice });
                for (pos, &mate) in group.iter().enumerate() {
                    let tmp = self.tmp("slice");
                    self.ops.push(PlanOp::SliceTake {
                        parts: parts.clone(),
                        keys: self.slice_of(pos, glen),
                        out: tmp.clone(),
                    });
                    self.ops.push(PlanOp::Send { dst: mate, buf: SlotRef::Var(tmp), sampling: false });
                }
                for &mate in &group {
                    let tmp = self.tmp("gx");
                    self.ops.push(PlanOp::Recv { src: mate, out: SlotRef::Var(tmp.clone()) });
                    self.ops.push(PlanOp::MergeByDest {
                        incoming: tmp,
                        out: out.clone(),
                        dsts: self.call.dsts.clone(),
                    });
                }
                self.ops.push(PlanOp::CombMapValues { map: out.clone() });
            }
            Instr::MySlice { out } => {
                let (group, my_pos) = self.my_group()?;
                let slice = self.slice_of(my_pos, group.len());
                self.sets.insert(out.clone(), slice);
            }
            Instr::SliceOwners { out } => {
                let r = self.my_dst_index()?;
                let owners: Vec<WorkerId> =
                    self.source_groups().iter().map(|g| g[r % g.len()]).collect();
                self.sets.insert(out.clone(), owners);
            }
            Instr::BruckExchange { parts } => {
                let mut srcs = self.call.srcs.clone();
                let mut dsts = self.call.dsts.clone();
                srcs.sort();
                dsts.sort();
                if srcs != dsts {
                    return Err(Error::Instantiation(
                        "bruck exchange requires srcs and dsts to be the same worker set".into(),
                    ));
                }
                let order = self.call.dsts.clone();
                let n = order.len();
                let i = self.my_dst_index()?;
                let _ = self.my_src_index()?;
                for round in bruck_schedule(n) {
                    let peer_to = order[(i + round.peer_offset) % n];
                    let peer_from = order[(i + n - round.peer_offset % n) % n];
                    let selected = self.tmp("bk");
                    self.ops.push(PlanOp::BruckSelect {
                        parts: parts.clone(),
                        my_index: i,
                        bit: round.bit,
                        dsts: order.clone(),
                        out: selected.clone(),
                    });
                    self.ops.push(PlanOp::Send {
                        dst: peer_to,
                        buf: SlotRef::Var(selected),
                        sampling: false,
                    });
                    let incoming = self.tmp("bkin");
                    self.ops.push(PlanOp::Recv { src: peer_from, out: SlotRef::Var(incoming.clone()) });
                    self.ops.push(PlanOp::BruckMerge {
                        parts: parts.clone(),
                        incoming,
                        dsts: order.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms;

    fn topo() -> Topology {
        Topology::new(2, 2, 2, 4.0, 1.25e9, 4).unwrap()
    }

    fn params<'a>(
        topo: &'a Topology,
        cm: &'a CostModel,
        registry: &'a FnRegistry,
    ) -> PlanParams<'a> {
        PlanParams {
            topo,
            cm,
            registry,
            sampling: SamplingConfig::new(0.25, 7).unwrap(),
            group_size: None,
            forced_guards: None,
        }
    }

    fn workers(ids: &[u32]) -> Vec<WorkerId> {
        ids.iter().copied().map(WorkerId).collect()
    }

    #[test]
    fn vanilla_has_no_dollar_params() {
        let t = algorithms::vanilla_push();
        assert!(t.params().is_empty());
        let topo = topo();
        let cm = CostModel::defaults_for(&topo);
        let reg = FnRegistry::with_defaults();
        let call = ShuffleCall::new(
            WorkerId(0),
            "vanilla_push",
            1,
            workers(&[0, 1]),
            workers(&[2, 3]),
            MessageBuffer::new(),
        );
        let plan = instantiate(&t, &call, &params(&topo, &cm, &reg)).unwrap();
        assert!(plan.runs_sender && !plan.runs_receiver);
        assert_eq!(plan.phase_offset, 0);
    }

    #[test]
    fn network_aware_carries_sampling_rate() {
        let t = algorithms::network_aware();
        assert!(t.params().contains("$RATE"));
        let topo = topo();
        let cm = CostModel::defaults_for(&topo);
        let reg = FnRegistry::with_defaults();
        let call = ShuffleCall::new(
            WorkerId(0),
            "network_aware",
            1,
            workers(&[0, 1, 2, 3]),
            workers(&[0, 1, 2, 3]),
            MessageBuffer::new(),
        )
        .with_combiner("sum");
        let plan = instantiate(&t, &call, &params(&topo, &cm, &reg)).unwrap();
        // The plan is fully resolved: group counts baked into extraction ops.
        let expected_groups = SamplingConfig::new(0.25, 7).unwrap().group_count();
        assert!(plan.ops.iter().any(
            |op| matches!(op, PlanOp::SampExtract { groups, .. } if *groups == expected_groups)
        ));
    }

    #[test]
    fn network_aware_without_combiner_fails() {
        let t = algorithms::network_aware();
        let topo = topo();
        let cm = CostModel::defaults_for(&topo);
        let reg = FnRegistry::with_defaults();
        let call = ShuffleCall::new(
            WorkerId(0),
            "network_aware",
            1,
            workers(&[0, 1]),
            workers(&[0, 1]),
            MessageBuffer::new(),
        );
        assert!(matches!(
            instantiate(&t, &call, &params(&topo, &cm, &reg)),
            Err(Error::Instantiation(_))
        ));
    }

    #[test]
    fn unknown_function_id_rejected() {
        let t = algorithms::vanilla_push();
        let topo = topo();
        let cm = CostModel::defaults_for(&topo);
        let reg = FnRegistry::with_defaults();
        let call = ShuffleCall::new(
            WorkerId(0),
            "vanilla_push",
            1,
            workers(&[0, 1]),
            workers(&[2]),
            MessageBuffer::new(),
        )
        .with_partitioner("nope");
        assert!(matches!(
            instantiate(&t, &call, &params(&topo, &cm, &reg)),
            Err(Error::UnknownFunction(_))
        ));
    }

    #[test]
    fn bruck_requires_symmetric_participants() {
        let t = algorithms::bruck();
        let topo = topo();
        let cm = CostModel::defaults_for(&topo);
        let reg = FnRegistry::with_defaults();
        let call = ShuffleCall::new(
            WorkerId(0),
            "bruck",
            1,
            workers(&[0, 1]),
            workers(&[2, 3]),
            MessageBuffer::new(),
        );
        assert!(instantiate(&t, &call, &params(&topo, &cm, &reg)).is_err());
    }

    #[test]
    fn call_validation() {
        let topo = topo();
        let bad_dup = ShuffleCall::new(
            WorkerId(0),
            "t",
            1,
            workers(&[0, 0]),
            workers(&[1]),
            MessageBuffer::new(),
        );
        assert!(bad_dup.validate(&topo).is_err());
        let not_member = ShuffleCall::new(
            WorkerId(5),
            "t",
            1,
            workers(&[0]),
            workers(&[1]),
            MessageBuffer::new(),
        );
        assert!(not_member.validate(&topo).is_err());
    }
}
