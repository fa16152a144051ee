//! Shuffle runs end to end: template fetch (with per-worker caching and
//! manager records), plan instantiation, execution, and outcome metrics.

use std::collections::{BTreeMap, BTreeSet};

use teshu_core::hash::{mix_seed, SplitMix64};
use teshu_core::message::MessageBuffer;
use teshu_core::plan::{instantiate, ForcedGuards, Plan, PlanParams, ShuffleCall};
use teshu_core::registry::{combine_buffer, FnRegistry};
use teshu_core::sampling::SamplingConfig;
use teshu_core::template::Template;
use teshu_core::topology::{CostModel, Level, Topology, WorkerId};
use teshu_core::{Error, Result};

use crate::engine::{check_scope_consistency, execute, ExecOutcome, Scheduler};
use crate::manager::ManagerClient;

/// What to shuffle; the simulator assigns the shuffle id.
#[derive(Debug, Clone)]
pub struct ShuffleSpec {
    pub template_id: String,
    pub srcs: Vec<WorkerId>,
    pub dsts: Vec<WorkerId>,
    pub part_fn: String,
    pub comb_fn: Option<String>,
}

impl ShuffleSpec {
    pub fn new(template_id: impl Into<String>, srcs: Vec<WorkerId>, dsts: Vec<WorkerId>) -> Self {
        Self {
            template_id: template_id.into(),
            srcs,
            dsts,
            part_fn: "default".into(),
            comb_fn: None,
        }
    }

    pub fn with_combiner(mut self, comb: impl Into<String>) -> Self {
        self.comb_fn = Some(comb.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct ShuffleOutcome {
    pub shuffle_id: u64,
    pub exec: ExecOutcome,
    /// Hierarchy levels that actually executed, e.g. "S,R,G"; non-adaptive
    /// templates report "G".
    pub trace: String,
}

pub struct Simulator<C: ManagerClient> {
    pub topo: Topology,
    pub cm: CostModel,
    pub registry: FnRegistry,
    pub sampling: SamplingConfig,
    pub scheduler: Scheduler,
    pub group_size: Option<usize>,
    manager: C,
    cache: BTreeMap<(WorkerId, String), Template>,
    next_shuffle_id: u64,
}

impl<C: ManagerClient> Simulator<C> {
    pub fn new(topo: Topology, manager: C, sampling: SamplingConfig) -> Self {
        let cm = CostModel::defaults_for(&topo);
        Self {
            topo,
            cm,
            registry: FnRegistry::with_defaults(),
            sampling,
            scheduler: Scheduler::Deterministic,
            group_size: None,
            manager,
            cache: BTreeMap::new(),
            next_shuffle_id: 0,
        }
    }

    pub fn manager(&mut self) -> &mut C {
        &mut self.manager
    }

    /// Replace the topology (e.g. after failure injection), keeping caches.
    pub fn set_topology(&mut self, topo: Topology) {
        self.cm = CostModel::defaults_for(&topo);
        self.topo = topo;
    }

    fn participants(spec: &ShuffleSpec) -> Vec<WorkerId> {
        let set: BTreeSet<WorkerId> = spec.srcs.iter().chain(&spec.dsts).copied().collect();
        set.into_iter().collect()
    }

    /// Cached template lookup with the manager protocol: first use per
    /// (worker, template) fetches and implicitly records the start; later
    /// uses notify the start fire-and-forget.
    fn template_for(&mut self, w: WorkerId, template_id: &str, shuffle_id: u64) -> Result<Template> {
        let key = (w, template_id.to_string());
        if let Some(t) = self.cache.get(&key) {
            // Fire-and-forget: a lost start notification never fails a run.
            let _ = self.manager.record_start(w, shuffle_id, template_id);
            return Ok(t.clone());
        }
        let body = self.manager.get_template(w, shuffle_id, template_id)?;
        let t = Template::parse(&body)?;
        if t.id != template_id {
            return Err(Error::InvalidArgument(format!(
                "manager served template '{}' for id '{template_id}'",
                t.id
            )));
        }
        self.cache.insert(key, t.clone());
        Ok(t)
    }

    pub fn run_shuffle(
        &mut self,
        spec: &ShuffleSpec,
        inputs: BTreeMap<WorkerId, MessageBuffer>,
    ) -> Result<ShuffleOutcome> {
        self.run_internal(spec, inputs, None)
    }

    /// Run with the SAMP guards forced, bypassing sampling entirely.
    pub fn run_forced(
        &mut self,
        spec: &ShuffleSpec,
        inputs: BTreeMap<WorkerId, MessageBuffer>,
        forced: ForcedGuards,
    ) -> Result<ShuffleOutcome> {
        self.run_internal(spec, inputs, Some(forced))
    }

    fn run_internal(
        &mut self,
        spec: &ShuffleSpec,
        inputs: BTreeMap<WorkerId, MessageBuffer>,
        forced: Option<ForcedGuards>,
    ) -> Result<ShuffleOutcome> {
        let shuffle_id = self.next_shuffle_id;
        self.next_shuffle_id += 1;
        let workers = Self::participants(spec);
        let mut plans: Vec<Plan> = Vec::with_capacity(workers.len());
        for &w in &workers {
            let template = self.template_for(w, &spec.template_id, shuffle_id)?;
            let mut call = ShuffleCall::new(
                w,
                spec.template_id.clone(),
                shuffle_id,
                spec.srcs.clone(),
                spec.dsts.clone(),
                MessageBuffer::new(),
            )
            .with_partitioner(spec.part_fn.clone());
            if let Some(c) = &spec.comb_fn {
                call = call.with_combiner(c.clone());
            }
            let params = PlanParams {
                topo: &self.topo,
                cm: &self.cm,
                registry: &self.registry,
                sampling: self.sampling,
                group_size: self.group_size,
                forced_guards: forced,
            };
            plans.push(instantiate(&template, &call, &params)?);
        }
        let exec = execute(&plans, &self.topo, &self.cm, inputs, self.scheduler)?;
        check_scope_consistency(&exec.decisions)?;
        for p in &plans {
            self.manager.record_end(p.worker, shuffle_id)?;
        }
        let trace = trace_of(&exec);
        Ok(ShuffleOutcome { shuffle_id, exec, trace })
    }
}

/// The executed-level trace: S and R appear when any scope's guard fired;
/// the global level always runs.
pub fn trace_of(exec: &ExecOutcome) -> String {
    let mut parts = Vec::new();
    if exec.decisions.iter().any(|d| d.level == Level::Server && d.take) {
        parts.push("S");
    }
    if exec.decisions.iter().any(|d| d.level == Level::Rack && d.take) {
        parts.push("R");
    }
    parts.push("G");
    parts.join(",")
}

/// Pick `k` failed spine links uniformly (seeded, without replacement),
/// rejecting draws that would disconnect a rack.
pub fn inject_spine_failures(topo: &Topology, k: usize, seed: u64) -> Result<Topology> {
    let all: Vec<(u32, u32)> = (0..topo.racks)
        .flat_map(|r| (0..topo.spine_links_per_rack).map(move |l| (r, l)))
        .collect();
    if k >= all.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot fail {k} of {} spine links",
            all.len()
        )));
    }
    let mut rng = SplitMix64::new(mix_seed(&[seed, 0x6661696c]));
    for _attempt in 0..1000 {
        let mut pool = all.clone();
        let mut chosen = BTreeSet::new();
        for _ in 0..k {
            let i = rng.next_below(pool.len() as u64) as usize;
            chosen.insert(pool.swap_remove(i));
        }
        if let Ok(t) = topo.with_failed_links(chosen) {
            return Ok(t);
        }
    }
    Err(Error::InvalidArgument(
        "no valid failure pattern found (a rack would disconnect)".into(),
    ))
}

/// All four forced hierarchy variants with their modeled times.
pub fn forced_variants() -> [(ForcedGuards, &'static str); 4] {
    [
        (ForcedGuards { server: false, rack: false }, "G"),
        (ForcedGuards { server: true, rack: false }, "S,G"),
        (ForcedGuards { server: false, rack: true }, "R,G"),
        (ForcedGuards { server: true, rack: true }, "S,R,G"),
    ]
}

/// Exhaustive planner: run every hierarchy variant and return the argmin by
/// modeled time, plus every variant's (trace, modeled_time, outcome).
pub fn exhaustive_best_plan<C: ManagerClient>(
    sim: &mut Simulator<C>,
    spec: &ShuffleSpec,
    inputs: &BTreeMap<WorkerId, MessageBuffer>,
) -> Result<(String, f64, Vec<(String, ShuffleOutcome)>)> {
    let mut results = Vec::new();
    for (forced, trace) in forced_variants() {
        let outcome = sim.run_forced(spec, inputs.clone(), forced)?;
        results.push((trace.to_string(), outcome));
    }
    let (best_trace, best_time) = results
        .iter()
        .map(|(t, o)| (t.clone(), o.exec.modeled_time))
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite times"))
        .expect("four variants");
    Ok((best_trace, best_time, results))
}

/// Single-node brute-force oracle: what each destination must end up
/// holding, as a key → combined-value map.
pub fn oracle_delivery(
    inputs: &BTreeMap<WorkerId, MessageBuffer>,
    dsts: &[WorkerId],
    registry: &FnRegistry,
    part_fn: &str,
    comb_fn: &str,
) -> Result<BTreeMap<WorkerId, BTreeMap<Vec<u8>, Vec<u8>>>> {
    let part = registry.partitioner(part_fn)?;
    registry.combiner(comb_fn)?;
    let mut per_dst: BTreeMap<WorkerId, MessageBuffer> =
        dsts.iter().map(|&d| (d, MessageBuffer::new())).collect();
    for buf in inputs.values() {
        for m in buf {
            let d = dsts[part.eval(m.key(), dsts.len())];
            per_dst.get_mut(&d).expect("dst present").push(m.clone());
        }
    }
    per_dst
        .into_iter()
        .map(|(d, buf)| Ok((d, reduced_map(&buf, registry, comb_fn)?)))
        .collect()
}

/// Fold a delivered buffer down to key → value with the given combiner, for
/// comparing templates that do or do not combine in flight.
pub fn reduced_map(
    buf: &MessageBuffer,
    registry: &FnRegistry,
    comb_fn: &str,
) -> Result<BTreeMap<Vec<u8>, Vec<u8>>> {
    let comb = registry.combiner(comb_fn)?;
    Ok(combine_buffer(buf, comb)
        .into_messages()
        .into_iter()
        .map(|m| (m.key().to_vec(), m.value().to_vec()))
        .collect())
}
