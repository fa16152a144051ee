//! The experiment suites behind the CLI subcommands: estimator sweeps, the
//! adaptive-decision matrix, and failure scenarios. All outputs are
//! deterministic for a fixed seed.

use std::collections::BTreeMap;

use serde::Serialize;
use teshu_core::message::MessageBuffer;
use teshu_core::registry::{combine_buffer, FnRegistry, SUM_COMBINER_ID};
use teshu_core::sampling::{
    estimate_reduction, extract_group, samp_random, sample_group_index, SamplingConfig,
    SAMPLING_DOMAIN,
};
use teshu_core::topology::{CostModel, Level, Topology, WorkerId};
use teshu_core::Result;

use crate::engine::Scheduler;
use crate::manager::InProcessManager;
use crate::simulator::{exhaustive_best_plan, inject_spine_failures, ShuffleSpec, Simulator};
use crate::workload::{generate_all, WorkloadSpec};

/// Default reference topology for experiments: 2 racks x 5 servers x 2
/// workers, 10 Gbps NICs, 4 spine links per rack.
pub fn reference_topology(oversubscription: f64) -> Topology {
    Topology::new(2, 5, 2, oversubscription, 1.25e9, 4).expect("valid reference topology")
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// sampling sweep

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub workload: String,
    pub method: String,
    pub rate: f64,
    pub r_hat_median: f64,
    pub true_ratio: f64,
    pub relative_error: f64,
    pub sampling_bytes_fraction: f64,
    pub modeled_overhead_fraction: f64,
}

/// Estimator accuracy sweep over seeds: the whole workload pooled into one
/// population, the two sampling methods applied standalone.
pub fn sampling_sweep(
    spec: &WorkloadSpec,
    rates: &[f64],
    n_seeds: u64,
    base_seed: u64,
    oversubscription: f64,
) -> Result<Vec<SweepRow>> {
    let registry = FnRegistry::with_defaults();
    let part = registry.partitioner("default")?.clone();
    let comb = registry.combiner(SUM_COMBINER_ID)?.clone();
    let topo = reference_topology(oversubscription);
    let cm = CostModel::defaults_for(&topo);

    // Pool a ten-source workload into one population buffer.
    let srcs: Vec<WorkerId> = (0..10).map(WorkerId).collect();
    let mut population = MessageBuffer::new();
    for (_, buf) in generate_all(spec, &srcs)? {
        population.extend_from(buf);
    }
    let true_ratio =
        combine_buffer(&population, &comb).total_bytes() as f64 / population.total_bytes() as f64;
    let base_time = cm.transfer_time(population.total_bytes() as f64, Level::Global, &topo);

    let mut rows = Vec::new();
    for &rate in rates {
        for method in ["partition_aware", "random"] {
            let mut r_hats = Vec::new();
            let mut fractions = Vec::new();
            let mut overheads = Vec::new();
            for s in 0..n_seeds {
                let cfg = SamplingConfig::new(rate, base_seed + s)?;
                let sample = match method {
                    "partition_aware" => {
                        let groups = cfg.group_count();
                        let j = sample_group_index(&cfg, 0, 0, groups);
                        extract_group(&population, SAMPLING_DOMAIN, &part, groups, j)
                    }
                    _ => samp_random(&population, rate, cfg.seed)?,
                };
                r_hats.push(estimate_reduction(&sample, &comb));
                fractions.push(sample.total_bytes() as f64 / population.total_bytes() as f64);
                // Overhead of shipping the sample one rack hop, relative to
                // the population crossing the global level once.
                overheads.push(
                    cm.transfer_time(sample.total_bytes() as f64, Level::Rack, &topo) / base_time,
                );
            }
            let r_hat_median = median(&mut r_hats);
            rows.push(SweepRow {
                workload: spec.to_string(),
                method: method.to_string(),
                rate,
                r_hat_median,
                true_ratio,
                relative_error: (r_hat_median - true_ratio).abs() / true_ratio,
                sampling_bytes_fraction: median(&mut fractions),
                modeled_overhead_fraction: median(&mut overheads),
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// decision matrix

#[derive(Debug, Clone, Serialize)]
pub struct DecisionRow {
    pub oversubscription: f64,
    pub workload: String,
    pub trace: String,
    pub best_trace: String,
    pub bytes_saved_fraction: f64,
    pub modeled_speedup: f64,
}

/// The standard duplicate-heavy workload for decision experiments: the key
/// space is half the per-worker message count, so every worker holds the
/// whole key set twice and combining pays at every hierarchy level.
pub fn duplicate_heavy(messages_per_worker: u64) -> WorkloadSpec {
    let key_space = (messages_per_worker / 2).max(1);
    format!("uniform:keys={key_space},n={messages_per_worker}")
        .parse()
        .expect("valid spec")
}

/// Sampling rate for in-engine adaptive runs; coarse so a sampled group of
/// the small decision key spaces is essentially never empty.
pub const DECISION_RATE: f64 = 0.25;

fn decision_sim(topo: Topology, seed: u64) -> Simulator<InProcessManager> {
    let mut sim = Simulator::new(
        topo,
        InProcessManager::with_builtins(),
        SamplingConfig::new(DECISION_RATE, seed).expect("valid rate"),
    );
    sim.scheduler = Scheduler::Deterministic;
    sim
}

/// Run one workload at one oversubscription: adaptive trace, exhaustive best
/// trace, cross-rack saving and modeled speedup versus vanilla push.
pub fn decision_cell(
    oversubscription: f64,
    spec: &WorkloadSpec,
    seed: u64,
) -> Result<DecisionRow> {
    let topo = reference_topology(oversubscription);
    let workers = topo.all_workers();
    let mut sim = decision_sim(topo, seed);
    let inputs = generate_all(&spec.clone().with_seed(seed), &workers)?;

    let adaptive = ShuffleSpec::new("network_aware", workers.clone(), workers.clone())
        .with_combiner(SUM_COMBINER_ID);
    let vanilla = ShuffleSpec::new("vanilla_push", workers.clone(), workers.clone());

    let na = sim.run_shuffle(&adaptive, inputs.clone())?;
    let van = sim.run_shuffle(&vanilla, inputs.clone())?;
    let (best_trace, _, _) = exhaustive_best_plan(&mut sim, &adaptive, &inputs)?;

    let cross = |o: &crate::simulator::ShuffleOutcome| {
        *o.exec.bytes_by_level.get(&Level::Global).unwrap_or(&0) as f64
    };
    let van_cross = cross(&van).max(1.0);
    let na_cross = cross(&na);
    let speedup = van.exec.modeled_time / na.exec.modeled_time;
    Ok(DecisionRow {
        oversubscription,
        workload: spec.to_string(),
        trace: na.trace,
        best_trace,
        bytes_saved_fraction: 1.0 - na_cross / van_cross,
        modeled_speedup: speedup,
    })
}

pub fn decision_matrix(
    oversubscriptions: &[f64],
    specs: &[WorkloadSpec],
    seed: u64,
) -> Result<Vec<DecisionRow>> {
    let mut rows = Vec::new();
    for &os in oversubscriptions {
        for spec in specs {
            rows.push(decision_cell(os, spec, seed)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementRow {
    pub oversubscription: f64,
    pub duplication: u64,
    pub seed: u64,
    pub trace: String,
    pub best_trace: String,
    /// Modeled-time regret of the adaptive trace against the exhaustive
    /// best, as a fraction of the best time.
    pub regret: f64,
}

/// Adaptive trace vs exhaustive argmin over seeded configurations spanning
/// oversubscription {1, 4, 10} and duplication factor {1, 4, 16}. All 20
/// workers send; rack 1's workers receive, so most final-phase bytes face
/// the oversubscribed core.
pub fn agreement_study(configs: u64, n_base: u64, base_seed: u64) -> Result<Vec<AgreementRow>> {
    let oversubs = [1.0, 4.0, 10.0];
    let dups = [1u64, 4, 16];
    let mut rows = Vec::new();
    for i in 0..configs {
        let os = oversubs[(i % 3) as usize];
        let dup = dups[((i / 3) % 3) as usize];
        let seed = base_seed + i;
        // Message counts vary across seeds so configurations differ in
        // content, not just in sampling seed.
        let n = n_base + (i % 7) * (n_base / 50).max(1);
        let topo = reference_topology(os);
        let workers = topo.all_workers();
        let dsts: Vec<WorkerId> = workers.iter().copied().filter(|w| w.0 >= 10).collect();
        let key_space = (workers.len() as u64 * n / dup).max(1);
        let spec: WorkloadSpec =
            format!("uniform:keys={key_space},n={n}").parse().expect("valid spec");
        let inputs = generate_all(&spec.with_seed(seed), &workers)?;
        let shuffle = ShuffleSpec::new("network_aware", workers.clone(), dsts)
            .with_combiner(SUM_COMBINER_ID);
        let mut sim = decision_sim(topo, seed);
        let na = sim.run_shuffle(&shuffle, inputs.clone())?;
        let (best_trace, best_time, variants) = exhaustive_best_plan(&mut sim, &shuffle, &inputs)?;
        let chosen_time = variants
            .iter()
            .find(|(t, _)| *t == na.trace)
            .map(|(_, o)| o.exec.modeled_time)
            .expect("every trace is a forced variant");
        rows.push(AgreementRow {
            oversubscription: os,
            duplication: dup,
            seed,
            trace: na.trace,
            best_trace,
            regret: chosen_time / best_time - 1.0,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// failure scenarios

#[derive(Debug, Clone, Serialize)]
pub struct FailureRow {
    pub seed: u64,
    pub vanilla_time: f64,
    pub network_aware_time: f64,
    pub network_aware_nofail_time: f64,
    pub trace: String,
}

/// Seeded spine-failure scenarios at the given oversubscription: vanilla vs
/// the adaptive template under failure, plus the adaptive no-failure
/// baseline for the same workload.
pub fn failure_sweep(
    k: usize,
    scenarios: u64,
    oversubscription: f64,
    spec: &WorkloadSpec,
    base_seed: u64,
) -> Result<Vec<FailureRow>> {
    let base = reference_topology(oversubscription);
    let workers = base.all_workers();
    let adaptive = ShuffleSpec::new("network_aware", workers.clone(), workers.clone())
        .with_combiner(SUM_COMBINER_ID);
    let vanilla = ShuffleSpec::new("vanilla_push", workers.clone(), workers.clone());
    let mut rows = Vec::new();
    for s in 0..scenarios {
        let seed = base_seed + s;
        let inputs = generate_all(&spec.clone().with_seed(seed), &workers)?;
        let mut sim = decision_sim(base.clone(), seed);
        let nofail = sim.run_shuffle(&adaptive, inputs.clone())?;
        let failed = inject_spine_failures(&base, k, seed)?;
        sim.set_topology(failed);
        let na = sim.run_shuffle(&adaptive, inputs.clone())?;
        let van = sim.run_shuffle(&vanilla, inputs)?;
        rows.push(FailureRow {
            seed,
            vanilla_time: van.exec.modeled_time,
            network_aware_time: na.exec.modeled_time,
            network_aware_nofail_time: nofail.exec.modeled_time,
            trace: na.trace,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// single run

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub template: String,
    pub workload: String,
    pub trace: String,
    pub modeled_time: f64,
    pub total_bytes: u64,
    pub self_bytes: u64,
    pub sampling_bytes: u64,
    pub bytes_by_level: BTreeMap<String, u64>,
    pub delivered_messages: u64,
    pub decisions: Vec<String>,
}

pub fn single_run(
    topo: Topology,
    template_id: &str,
    spec: &WorkloadSpec,
    rate: f64,
    seed: u64,
    scheduler: Scheduler,
) -> Result<RunReport> {
    let workers = topo.all_workers();
    let mut sim = Simulator::new(
        topo,
        InProcessManager::with_builtins(),
        SamplingConfig::new(rate, seed)?,
    );
    sim.scheduler = scheduler;
    let mut shuffle = ShuffleSpec::new(template_id, workers.clone(), workers.clone());
    if teshu_core::algorithms::builtin(template_id)
        .map(|t| t.requires_combiner())
        .unwrap_or(false)
    {
        shuffle = shuffle.with_combiner(SUM_COMBINER_ID);
    }
    let inputs = generate_all(&spec.clone().with_seed(seed), &workers)?;
    let out = sim.run_shuffle(&shuffle, inputs)?;
    Ok(RunReport {
        template: template_id.to_string(),
        workload: spec.to_string(),
        trace: out.trace,
        modeled_time: out.exec.modeled_time,
        total_bytes: out.exec.total_bytes,
        self_bytes: out.exec.self_bytes,
        sampling_bytes: out.exec.sampling_bytes,
        bytes_by_level: out
            .exec
            .bytes_by_level
            .iter()
            .map(|(l, b)| (format!("{l:?}"), *b))
            .collect(),
        delivered_messages: out.exec.delivered.values().map(|b| b.len() as u64).sum(),
        decisions: out
            .exec
            .decisions
            .iter()
            .map(|d| {
                format!(
                    "{}@{}: eff={:.3e} cost={:.3e} take={}",
                    d.guard, d.worker, d.eff, d.cost, d.take
                )
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// CSV emission

/// Serialize flat `Serialize` rows to CSV: header from the first row's keys.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    let mut header_done = false;
    for row in rows {
        let v = serde_json::to_value(row)
            .map_err(|e| teshu_core::Error::Parse(format!("row serialization: {e}")))?;
        let obj = v.as_object().ok_or_else(|| {
            teshu_core::Error::Parse("CSV rows must serialize to objects".into())
        })?;
        if !header_done {
            out.push_str(&obj.keys().cloned().collect::<Vec<_>>().join(","));
            out.push('\n');
            header_done = true;
        }
        let cells: Vec<String> = obj
            .values()
            .map(|c| match c {
                serde_json::Value::String(s) => s.replace(',', ";"),
                other => other.to_string(),
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}
