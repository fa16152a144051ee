use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use teshu::config::load_topology;
use teshu::engine::Scheduler;
use teshu::experiments::{
    decision_matrix, duplicate_heavy, failure_sweep, reference_topology, sampling_sweep,
    single_run, to_csv,
};
use teshu::manager::{
    with_builtin_templates, ManagerClient, ManagerServer, ManagerState, TcpManagerClient,
};
use teshu::workload::WorkloadSpec;

#[derive(Parser)]
#[command(name = "teshu", version, about = "Templated shuffle experiments and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON topology config; defaults to the 2x5x2 reference topology.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Workload: `uniform:keys=N,n=M` | `zipf:keys=N,s=F,n=M` | `letters:n=M`
    /// | path to a `key<TAB>integer` file.
    #[arg(long)]
    workload: Option<String>,
    /// Sampling rate in (0, 1].
    #[arg(long, default_value_t = 0.01)]
    rate: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Core-to-spine oversubscription (ignored when --topology is given).
    #[arg(long, default_value_t = 4.0)]
    oversub: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn topology(&self) -> anyhow::Result<teshu_core::topology::Topology> {
        match &self.topology {
            Some(path) => load_topology(path),
            None => Ok(reference_topology(self.oversub)),
        }
    }

    fn workload(&self, default: WorkloadSpec) -> anyhow::Result<WorkloadSpec> {
        match &self.workload {
            Some(s) => Ok(s.parse::<WorkloadSpec>()?.with_seed(self.seed)),
            None => Ok(default.with_seed(self.seed)),
        }
    }

    fn emit(&self, text: &str) -> anyhow::Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text)
                .with_context(|| format!("writing {}", path.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimator accuracy sweep over seeds and rates.
    ///
    /// CSV columns: workload, method, rate, r_hat_median, true_ratio,
    /// relative_error, sampling_bytes_fraction, modeled_overhead_fraction.
    SamplingSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sampling rates to sweep (repeatable); overrides --rate.
        #[arg(long = "sweep-rate")]
        sweep_rates: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        seeds: u64,
    },
    /// Adaptive decision vs exhaustive best plan across oversubscriptions.
    ///
    /// CSV columns: oversubscription, workload, trace, best_trace,
    /// bytes_saved_fraction, modeled_speedup.
    DecisionMatrix {
        #[command(flatten)]
        common: CommonArgs,
        /// Oversubscriptions to sweep (repeatable); overrides --oversub.
        #[arg(long = "sweep-oversub")]
        sweep_oversubs: Vec<f64>,
    },
    /// Seeded spine-link failure scenarios.
    ///
    /// CSV columns: seed, vanilla_time, network_aware_time,
    /// network_aware_nofail_time, trace.
    Failures {
        #[command(flatten)]
        common: CommonArgs,
        /// Failed spine links per scenario.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        scenarios: u64,
    },
    /// One shuffle end to end; prints a JSON report.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Template id (a builtin such as network_aware).
        #[arg(long, default_value = "network_aware")]
        template: String,
        /// Use the threaded scheduler instead of the deterministic one.
        #[arg(long)]
        threaded: bool,
    },
    /// Serve the manager over TCP until interrupted.
    ServeManager {
        #[arg(long, default_value = "127.0.0.1:7450")]
        bind: String,
        /// Directory of template files to preload (*.tshu); builtins are
        /// always installed.
        #[arg(long)]
        templates_dir: Option<PathBuf>,
        /// Append records as JSON lines to this file.
        #[arg(long)]
        spill: Option<PathBuf>,
    },
    /// Install a template file into a running manager.
    InstallTemplate {
        #[arg(long, default_value = "127.0.0.1:7450")]
        addr: String,
        /// Template file in s-expression form.
        file: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SamplingSweep { common, sweep_rates, seeds } => {
            let rates = if sweep_rates.is_empty() { vec![common.rate] } else { sweep_rates };
            let spec = common.workload("uniform:keys=50000,n=25000".parse()?)?;
            let rows = sampling_sweep(&spec, &rates, seeds, common.seed, common.oversub)?;
            common.emit(&to_csv(&rows)?)
        }
        Command::DecisionMatrix { common, sweep_oversubs } => {
            let oversubs =
                if sweep_oversubs.is_empty() { vec![common.oversub] } else { sweep_oversubs };
            let spec = common.workload(duplicate_heavy(8000))?;
            let rows = decision_matrix(&oversubs, &[spec], common.seed)?;
            common.emit(&to_csv(&rows)?)
        }
        Command::Failures { common, k, scenarios } => {
            let spec = common.workload(duplicate_heavy(8000))?;
            let rows = failure_sweep(k, scenarios, common.oversub, &spec, common.seed)?;
            common.emit(&to_csv(&rows)?)
        }
        Command::Run { common, template, threaded } => {
            let topo = common.topology()?;
            let spec = common.workload("letters:n=1000".parse()?)?;
            let scheduler = if threaded { Scheduler::Threads } else { Scheduler::Deterministic };
            let report =
                single_run(topo, &template, &spec, common.rate, common.seed, scheduler)?;
            common.emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))
        }
        Command::ServeManager { bind, templates_dir, spill } => {
            let mut state = with_builtin_templates(ManagerState::new());
            if let Some(spill) = spill {
                state = state.with_spill(spill);
            }
            if let Some(dir) = templates_dir {
                for entry in std::fs::read_dir(&dir)
                    .with_context(|| format!("reading {}", dir.display()))?
                {
                    let path = entry?.path();
                    if path.extension().and_then(|e| e.to_str()) == Some("tshu") {
                        let body = std::fs::read_to_string(&path)?;
                        let id = state
                            .install_template(&body)
                            .with_context(|| format!("installing {}", path.display()))?;
                        eprintln!("installed template '{id}' from {}", path.display());
                    }
                }
            }
            let server = ManagerServer::spawn(state, &bind)?;
            eprintln!("manager listening on {}", server.addr);
            loop {
                std::thread::park();
            }
        }
        Command::InstallTemplate { addr, file } => {
            let body = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let mut client = TcpManagerClient::connect(&addr)
                .with_context(|| format!("connecting to manager at {addr}"))?;
            match client.install_template(&body) {
                Ok(id) => {
                    println!("installed template '{id}'");
                    Ok(())
                }
                Err(e) => bail!("install failed: {e}"),
            }
        }
    }
}
