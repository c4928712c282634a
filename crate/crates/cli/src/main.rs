//! Experiment harness CLI: scheduling benchmarks, message-size sweeps,
//! distributed query runs with oracle verification, the closed-form analysis
//! tables, and micro-scale data generation. All commands emit CSV.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use qshuffle_core::engine::datagen::{generate, DataSpec};
use qshuffle_core::engine::plan::PlanNode;
use qshuffle_core::engine::table::TableSet;
use qshuffle_core::harness::{
    analyze, bench_msgsize, bench_schedule, run_query_experiment, sim_transport, write_output,
    AnalyzeSpec, BenchMsgSizeSpec, BenchScheduleSpec, QueryExperimentSpec,
    DEFAULT_MESSAGES_PER_NODE, DEFAULT_MESSAGE_SIZE,
};
use qshuffle_core::schedule::{round_robin_schedule, SyncPolicy};
use qshuffle_core::transport::sim::{sim_run, SimOptions, TieBreak, Workload};
use qshuffle_core::transport::TransportKind;

#[derive(Parser)]
#[command(
    name = "qshuffle",
    about = "Distributed query-shuffle engine experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// RNG seed (simulator send order, data generation).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SimFlags {
    /// Link bandwidth in bytes per second.
    #[arg(long, default_value_t = 4e9)]
    bandwidth: f64,
    /// Barrier synchronization latency in nanoseconds.
    #[arg(long, default_value_t = 1_000)]
    sync_latency_ns: u64,
    /// Messages sent to one target between synchronizations.
    #[arg(long, default_value_t = 8)]
    messages_per_step: u32,
    /// Receiver credits per sender.
    #[arg(long, default_value_t = 4)]
    credits: u32,
}

impl SimFlags {
    fn policy(&self) -> SyncPolicy {
        SyncPolicy {
            messages_per_step: self.messages_per_step,
            sync_latency: Duration::from_nanos(self.sync_latency_ns),
            ..SyncPolicy::default()
        }
    }

    fn transport(&self) -> qshuffle_core::transport::TransportConfig {
        let mut cfg = sim_transport();
        cfg.link_bandwidth = self.bandwidth;
        cfg.receiver_credit_limit = self.credits;
        cfg
    }
}

/// Server sweep: "2..8" for a range or "2,4,8" for a list.
#[derive(Debug, Clone)]
struct ServerSweep(Vec<usize>);

impl std::str::FromStr for ServerSweep {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        if let Some((lo, hi)) = text.split_once("..") {
            let lo: usize = lo.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
            let hi: usize = hi.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
            if lo > hi {
                return Err("empty server range".into());
            }
            return Ok(ServerSweep((lo..=hi).collect()));
        }
        text.split(',')
            .map(|s| s.trim().parse().map_err(|e| format!("bad server count: {e}")))
            .collect::<Result<_, _>>()
            .map(ServerSweep)
    }
}

#[derive(Subcommand)]
enum Command {
    /// All-to-all shuffle throughput with and without the round-robin
    /// schedule, across a server sweep (simulated transport).
    BenchSchedule {
        /// Server counts: "2..8" or "2,4,8".
        #[arg(long, default_value = "2..8")]
        servers: ServerSweep,
        /// Messages transmitted per server.
        #[arg(long, default_value_t = DEFAULT_MESSAGES_PER_NODE)]
        messages_per_node: u64,
        #[arg(long, default_value_t = DEFAULT_MESSAGE_SIZE)]
        message_size: u64,
        #[command(flatten)]
        sim: SimFlags,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Scheduled throughput across a message-size sweep, against the
    /// closed-form amortization prediction (simulated transport).
    BenchMsgsize {
        #[arg(long, default_value_t = 6)]
        servers: usize,
        #[arg(long, default_value_t = 1024)]
        min_size: u64,
        #[arg(long, default_value_t = 64 * 1024 * 1024)]
        max_size: u64,
        #[command(flatten)]
        sim: SimFlags,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run a plan file over a server sweep and verify each run against the
    /// single-threaded reference evaluator.
    Query {
        /// Plan description file (JSON operator tree).
        #[arg(long)]
        plan: PathBuf,
        /// Directory of <table>.tbl + <table>.schema.json files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1,2,4")]
        servers: ServerSweep,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        regions: usize,
        /// Transport: sim | inprocess | socket.
        #[arg(long, default_value = "inprocess")]
        transport: TransportKind,
        /// Drive sends through the phase schedule: on | off.
        #[arg(long, default_value = "off")]
        schedule: String,
        #[arg(long, default_value_t = 512 * 1024)]
        message_size: usize,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Connection/buffer/broadcast-threshold formulas and the Zipf
    /// partition-load model.
    Analyze {
        #[arg(long, default_value_t = 6)]
        n: u64,
        #[arg(long, default_value_t = 40)]
        t: u64,
        /// Zipf exponents to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "0,0.4,0.84,1.2")]
        zipf: Vec<f64>,
        /// Key domain sizes to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "1000000")]
        key_domains: Vec<u64>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Replay a workload description file through the contention simulator
    /// and report throughput (optionally the full event trace).
    SimRun {
        /// Workload file: one "sender,receiver,message_count,message_size"
        /// entry per line.
        #[arg(long)]
        workload: PathBuf,
        /// Reorder sends into conflict-free phases: on | off.
        #[arg(long, default_value = "on")]
        schedule: String,
        /// Also write the event trace CSV here.
        #[arg(long)]
        events_out: Option<PathBuf>,
        #[command(flatten)]
        sim: SimFlags,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Generate deterministic micro-scale tables in dbgen format.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2_000)]
        parts: usize,
        #[arg(long, default_value_t = 5_000)]
        orders: usize,
        #[arg(long, default_value_t = 20_000)]
        lineitems: usize,
        #[arg(long, default_value_t = 3_000)]
        events: usize,
        /// Zipf exponent for lineitem foreign keys (0 = uniform).
        #[arg(long, default_value_t = 0.0)]
        zipf: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::BenchSchedule { servers, messages_per_node, message_size, sim, common } => {
            let spec = BenchScheduleSpec {
                servers: servers.0,
                messages_per_node,
                message_size,
                seed: common.seed,
                transport: sim.transport(),
                policy: sim.policy(),
            };
            let (csv, _) = bench_schedule(&spec)?;
            write_output(common.out.as_deref(), &csv).map_err(|e| e.to_string())
        }
        Command::BenchMsgsize { servers, min_size, max_size, sim, common } => {
            let spec = BenchMsgSizeSpec {
                n: servers,
                min_size,
                max_size,
                seed: common.seed,
                transport: sim.transport(),
                policy: sim.policy(),
            };
            let (csv, _) = bench_msgsize(&spec)?;
            write_output(common.out.as_deref(), &csv).map_err(|e| e.to_string())
        }
        Command::Query {
            plan,
            data,
            servers,
            workers,
            regions,
            transport,
            schedule,
            message_size,
            common,
        } => {
            let schedule = match schedule.as_str() {
                "on" => true,
                "off" => false,
                other => return Err(format!("--schedule must be on or off, got {other}")),
            };
            let text = std::fs::read_to_string(&plan)
                .map_err(|e| format!("{}: {e}", plan.display()))?;
            let plan_node = PlanNode::from_json(&text).map_err(|e| e.to_string())?;
            let tables = TableSet::load_dir(&data).map_err(|e| e.to_string())?;
            let name = plan
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("plan")
                .to_string();
            let spec = QueryExperimentSpec {
                name,
                servers: servers.0,
                workers,
                regions,
                transport,
                schedule,
                seed: common.seed,
                message_capacity: message_size,
            };
            let (csv, _) = run_query_experiment(&plan_node, &tables, &spec)
                .map_err(|e| e.to_string())?;
            write_output(common.out.as_deref(), &csv).map_err(|e| e.to_string())
        }
        Command::Analyze { n, t, zipf, key_domains, common } => {
            let csv = analyze(&AnalyzeSpec { n, t, zipf_zs: zipf, key_domains });
            write_output(common.out.as_deref(), &csv).map_err(|e| e.to_string())
        }
        Command::SimRun { workload, schedule, events_out, sim, common } => {
            let workload = Workload::load(&workload)?;
            let n = workload.node_count();
            let schedule = match schedule.as_str() {
                "on" => Some(
                    round_robin_schedule(n.max(2)).map_err(|e| e.to_string())?,
                ),
                "off" => None,
                other => return Err(format!("--schedule must be on or off, got {other}")),
            };
            let options = SimOptions {
                seed: common.seed,
                policy: sim.policy(),
                record_trace: events_out.is_some(),
                tie_break: TieBreak::Fifo,
            };
            let report = sim_run(&workload, schedule.as_ref(), &sim.transport(), &options);
            let mut csv = String::from(
                "n,total_bytes,makespan_ns,aggregate_gbps,sync_rounds,sharing_instants,credit_stalls,trace_hash
",
            );
            use std::fmt::Write as _;
            let _ = writeln!(
                csv,
                "{n},{},{:.3},{:.6},{},{},{},{:016x}",
                report.total_bytes,
                report.makespan_ns,
                report.aggregate_throughput / 1e9,
                report.sync_count,
                report.sharing_instants,
                report.credit_stalls,
                report.trace_hash,
            );
            for (node, (egress, throughput)) in report
                .per_node_egress
                .iter()
                .zip(&report.per_node_throughput)
                .enumerate()
            {
                let _ = writeln!(csv, "# node {node}: {egress} bytes egress, {throughput:.0} B/s");
            }
            if let Some(path) = events_out {
                write_output(Some(&path), &report.events_csv()).map_err(|e| e.to_string())?;
            }
            write_output(common.out.as_deref(), &csv).map_err(|e| e.to_string())
        }
        Command::GenData { out, parts, orders, lineitems, events, zipf, seed } => {
            let spec = DataSpec { parts, orders, lineitems, events, zipf_z: zipf, seed };
            let tables = generate(&spec);
            tables.save_dir(&out).map_err(|e| e.to_string())?;
            eprintln!(
                "wrote part ({parts}), orders ({orders}), lineitem ({lineitems}), events ({events}) to {}",
                out.display()
            );
            Ok(())
        }
    }
}
