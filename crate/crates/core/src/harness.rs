//! Experiment harness: scheduling benchmarks, message-size sweeps, query
//! correctness runs, and the closed-form analysis tables. Each experiment
//! returns CSV text with a header row; every data row carries the full
//! parameter tuple so files are self-describing.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{
    broadcast_threshold, buffers_per_operator, connection_count, default_key_hash,
    zipf_partition_load, ModelKind, ParallelModel, SkewSpec,
};
use crate::codec::Datum;
use crate::engine::plan::PlanNode;
use crate::engine::reference;
use crate::engine::table::TableSet;
use crate::engine::{diff_multisets, run_query, ClusterConfig, EngineError, QueryMetrics};
use crate::schedule::{amortization_curve, round_robin_schedule, SyncPolicy};
use crate::transport::sim::{sim_run, SimOptions, SimReport, TieBreak, Workload};
use crate::transport::{TransportConfig, TransportKind};

/// Default per-node message count for the scheduling benchmark.
pub const DEFAULT_MESSAGES_PER_NODE: u64 = 1_680;
/// Default message size for the scheduling benchmark.
pub const DEFAULT_MESSAGE_SIZE: u64 = 512 * 1024;

#[derive(Debug, Clone)]
pub struct BenchScheduleSpec {
    pub servers: Vec<usize>,
    pub messages_per_node: u64,
    pub message_size: u64,
    pub seed: u64,
    pub transport: TransportConfig,
    pub policy: SyncPolicy,
}

impl Default for BenchScheduleSpec {
    fn default() -> Self {
        BenchScheduleSpec {
            servers: (2..=8).collect(),
            messages_per_node: DEFAULT_MESSAGES_PER_NODE,
            message_size: DEFAULT_MESSAGE_SIZE,
            seed: 0,
            transport: sim_transport(),
            policy: SyncPolicy::default(),
        }
    }
}

pub fn sim_transport() -> TransportConfig {
    TransportConfig { kind: TransportKind::Simulated, ..TransportConfig::default() }
}

#[derive(Debug, Clone)]
pub struct SchedulePoint {
    pub n: usize,
    pub scheduled: SimReport,
    pub unscheduled: SimReport,
}

impl SchedulePoint {
    pub fn ratio(&self) -> f64 {
        self.scheduled.aggregate_throughput / self.unscheduled.aggregate_throughput
    }
}

/// All-to-all shuffle with and without the round-robin schedule across the
/// server sweep.
pub fn bench_schedule(spec: &BenchScheduleSpec) -> Result<(String, Vec<SchedulePoint>), String> {
    let mut csv = String::from(
        "n,messages_per_node,message_size,seed,sync_latency_ns,bandwidth,\
         scheduled_gbps,unscheduled_gbps,ratio,sharing_instants_scheduled,\
         sharing_instants_unscheduled,credit_stalls_unscheduled,sync_rounds\n",
    );
    let mut points = Vec::new();
    for &n in &spec.servers {
        if n < 2 {
            return Err(format!("scheduling benchmark needs n >= 2, got {n}"));
        }
        let per_pair = (spec.messages_per_node / (n as u64 - 1)).max(1);
        let workload = Workload::all_to_all(n, per_pair, spec.message_size);
        let schedule = round_robin_schedule(n).map_err(|e| e.to_string())?;
        let options = SimOptions {
            seed: spec.seed,
            policy: spec.policy.clone(),
            record_trace: false,
            tie_break: TieBreak::Fifo,
        };
        let scheduled = sim_run(&workload, Some(&schedule), &spec.transport, &options);
        let unscheduled = sim_run(&workload, None, &spec.transport, &options);
        let _ = writeln!(
            csv,
            "{n},{},{},{},{},{},{:.6},{:.6},{:.4},{},{},{},{}",
            spec.messages_per_node,
            spec.message_size,
            spec.seed,
            spec.policy.sync_latency.as_nanos(),
            spec.transport.link_bandwidth,
            scheduled.aggregate_throughput / 1e9,
            unscheduled.aggregate_throughput / 1e9,
            scheduled.aggregate_throughput / unscheduled.aggregate_throughput,
            scheduled.sharing_instants,
            unscheduled.sharing_instants,
            unscheduled.credit_stalls,
            scheduled.sync_count,
        );
        points.push(SchedulePoint { n, scheduled, unscheduled });
    }
    Ok((csv, points))
}

#[derive(Debug, Clone)]
pub struct BenchMsgSizeSpec {
    pub n: usize,
    pub min_size: u64,
    pub max_size: u64,
    pub seed: u64,
    pub transport: TransportConfig,
    pub policy: SyncPolicy,
}

impl Default for BenchMsgSizeSpec {
    fn default() -> Self {
        BenchMsgSizeSpec {
            n: 6,
            min_size: 1024,
            max_size: 64 * 1024 * 1024,
            seed: 0,
            transport: sim_transport(),
            policy: SyncPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MsgSizePoint {
    pub size: u64,
    pub per_pair: u64,
    pub measured: f64,
    pub predicted: f64,
}

/// Per-pair message count for one sweep point: enough messages to reach a
/// steady state, aligned to whole sync steps.
fn sweep_count(size: u64, step: u64) -> u64 {
    let target_bytes: u64 = 16 * 1024 * 1024;
    let raw = (target_bytes / size).clamp(step, 256 * step);
    raw / step * step
}

/// Scheduled all-to-all sweep over message sizes, reporting simulated
/// throughput next to the closed-form amortization prediction.
pub fn bench_msgsize(spec: &BenchMsgSizeSpec) -> Result<(String, Vec<MsgSizePoint>), String> {
    if spec.n < 2 {
        return Err("message-size benchmark needs n >= 2".into());
    }
    let schedule = round_robin_schedule(spec.n).map_err(|e| e.to_string())?;
    let mut csv = String::from(
        "n,message_size,messages_per_pair,seed,sync_latency_ns,bandwidth,\
         measured_gbps,predicted_gbps,measured_over_predicted,link_fraction\n",
    );
    let mut points = Vec::new();
    let mut size = spec.min_size;
    while size <= spec.max_size {
        let per_pair = sweep_count(size, spec.policy.messages_per_step as u64);
        let workload = Workload::all_to_all(spec.n, per_pair, size);
        let options = SimOptions {
            seed: spec.seed,
            policy: spec.policy.clone(),
            record_trace: false,
            tie_break: TieBreak::Fifo,
        };
        let report = sim_run(&workload, Some(&schedule), &spec.transport, &options);
        let measured = report.aggregate_throughput / spec.n as f64;
        let predicted = amortization_curve(
            size,
            spec.policy.sync_latency,
            spec.transport.link_bandwidth,
            spec.policy.messages_per_step,
        );
        let _ = writeln!(
            csv,
            "{},{size},{per_pair},{},{},{},{:.6},{:.6},{:.4},{:.4}",
            spec.n,
            spec.seed,
            spec.policy.sync_latency.as_nanos(),
            spec.transport.link_bandwidth,
            measured / 1e9,
            predicted / 1e9,
            measured / predicted,
            measured / spec.transport.link_bandwidth,
        );
        points.push(MsgSizePoint { size, per_pair, measured, predicted });
        size *= 2;
    }
    Ok((csv, points))
}

#[derive(Debug, Clone)]
pub struct AnalyzeSpec {
    pub n: u64,
    pub t: u64,
    pub zipf_zs: Vec<f64>,
    pub key_domains: Vec<u64>,
}

impl Default for AnalyzeSpec {
    fn default() -> Self {
        AnalyzeSpec {
            n: 6,
            t: 40,
            zipf_zs: vec![0.0, 0.4, 0.84, 1.2],
            key_domains: vec![1_000_000],
        }
    }
}

/// Connection/buffer/threshold counts plus the Zipf overload factor for both
/// parallelism models.
pub fn analyze(spec: &AnalyzeSpec) -> String {
    let mut csv = String::from(
        "model,n,t,connections,buffers,threshold,zipf_z,key_domain,partitions,overload_factor\n",
    );
    for kind in [ModelKind::ClassicExchange, ModelKind::Hybrid] {
        let model = ParallelModel { kind, n: spec.n, t: spec.t };
        let label = match kind {
            ModelKind::ClassicExchange => "classic",
            ModelKind::Hybrid => "hybrid",
        };
        let partitions = match kind {
            ModelKind::ClassicExchange => (spec.n * spec.t) as usize,
            ModelKind::Hybrid => spec.n as usize,
        };
        for &z in &spec.zipf_zs {
            for &key_domain in &spec.key_domains {
                let report = if partitions == 0 {
                    None
                } else {
                    Some(zipf_partition_load(
                        &SkewSpec { zipf_z: z, key_domain, partitions },
                        default_key_hash,
                    ))
                };
                let _ = writeln!(
                    csv,
                    "{label},{},{},{},{},{},{z},{key_domain},{partitions},{}",
                    spec.n,
                    spec.t,
                    connection_count(model),
                    buffers_per_operator(model),
                    broadcast_threshold(model),
                    report.map_or_else(|| "0".into(), |r| format!("{:.6}", r.overload_factor)),
                );
            }
        }
    }
    csv
}

#[derive(Debug, Clone)]
pub struct QueryExperimentSpec {
    pub name: String,
    pub servers: Vec<usize>,
    pub workers: usize,
    pub regions: usize,
    pub transport: TransportKind,
    pub schedule: bool,
    pub seed: u64,
    pub message_capacity: usize,
}

impl Default for QueryExperimentSpec {
    fn default() -> Self {
        QueryExperimentSpec {
            name: "query".into(),
            servers: vec![1, 2, 4],
            workers: 2,
            regions: 1,
            transport: TransportKind::InProcess,
            schedule: false,
            seed: 0,
            message_capacity: 512 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryRunRow {
    pub n: usize,
    pub rows: usize,
    pub result_hash: u64,
    pub metrics: QueryMetrics,
}

/// Run a plan over the server sweep, verify each run against the reference
/// evaluator, and emit one CSV row per run. An oracle mismatch is an error
/// carrying a diff sample.
pub fn run_query_experiment(
    plan: &PlanNode,
    tables: &TableSet,
    spec: &QueryExperimentSpec,
) -> Result<(String, Vec<QueryRunRow>), EngineError> {
    let (_, expected) = reference::evaluate(plan, tables)?;
    let mut csv = String::from(
        "plan,transport,schedule,n,workers,regions,seed,rows,result_hash,\
         bytes_shuffled,messages_sent,steal_count,sim_time_ns,wall_ms,oracle\n",
    );
    let mut rows = Vec::new();
    for &n in &spec.servers {
        let cluster = ClusterConfig {
            nodes: n,
            workers: spec.workers,
            regions: spec.regions,
            message_capacity: spec.message_capacity,
            schedule: spec.schedule,
            ..ClusterConfig::default()
        };
        let transport = TransportConfig { kind: spec.transport, ..TransportConfig::default() };
        let out = run_query(plan, tables, &cluster, &transport)?;
        diff_multisets(out.rows.clone(), expected.clone())
            .map_err(|diff| EngineError::Plan(format!("oracle mismatch at n={n}: {diff}")))?;
        let hash = result_hash(&out.rows);
        let _ = writeln!(
            csv,
            "{},{:?},{},{n},{},{},{},{},{hash:016x},{},{},{},{},{:.3},ok",
            spec.name,
            spec.transport,
            if spec.schedule { "on" } else { "off" },
            spec.workers,
            spec.regions,
            spec.seed,
            out.rows.len(),
            out.metrics.bytes_shuffled,
            out.metrics.messages_sent,
            out.metrics.steal_count,
            out.metrics
                .sim_time_ns
                .map_or_else(|| "-".into(), |v| format!("{v:.0}")),
            out.metrics.wall_ms,
        );
        rows.push(QueryRunRow { n, rows: out.rows.len(), result_hash: hash, metrics: out.metrics });
    }
    Ok((csv, rows))
}

/// Order-independent hash of a result multiset.
pub fn result_hash(rows: &[Vec<Datum>]) -> u64 {
    let mut sorted: Vec<Vec<Datum>> = rows.to_vec();
    crate::engine::canonicalize(&mut sorted);
    let mut hash = 0xcbf29ce484222325u64;
    for row in &sorted {
        for datum in row {
            for byte in format!("{datum}\x1f").bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash ^= 0x1e;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn write_output(path: Option<&Path>, csv: &str) -> std::io::Result<()> {
    match path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, csv)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
