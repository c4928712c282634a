//! Morsel-driven distributed query execution.
//!
//! Every simulated node runs `t` worker threads plus one multiplexer thread.
//! Workers execute the plan's pipelines in order, pulling constant-size
//! morsels from a shared cursor (scans), taking received messages from their
//! NUMA region's queue and stealing from other regions when it runs dry
//! (exchange inputs), or draining aggregation state (breakers). A barrier
//! separates pipelines; its leader seals breakers and emits the exchange
//! end-of-stream flags. Nothing crosses node boundaries except through the
//! multiplexer's transport.

pub mod datagen;
pub mod expr;
pub mod multiplexer;
pub mod operators;
pub mod plan;
pub mod reference;
pub mod table;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{deserialize_all, CodecError, Datum, Schema, TupleBatch};
use crate::exchange::{
    finish_exchange, ExchangeKind, ExchangeWriter, LogicalExchange, MessagePool,
    GATHER_OPERATOR_ID,
};
use crate::schedule::{round_robin_schedule, PhaseRunner, SyncPolicy};
use crate::transport::sim::{sim_run, SimOptions, TieBreak};
use crate::transport::{open_mesh, TransportConfig};

use self::expr::{eval, truthy};
use self::multiplexer::{
    ExchangeInbox, InboxSet, MuxCommand, MuxHandle, Multiplexer, NodeStats, PopOutcome,
};
use self::operators::{BuildTable, FrozenTable, GroupTable};
use self::plan::{compile, BoundAgg, PipelineSpec, PlanNode, Program, Sink, Source, StepOp};
use self::table::TableSet;

/// Modeled per-node processing rate used for the simulated completion time
/// of a query run: scan tuples at this rate, then shuffle per the recorded
/// workload.
pub const SIM_PROCESS_RATE_TUPLES_PER_SEC: f64 = 20e6;

#[derive(Debug, Error, Clone)]
pub enum EngineError {
    #[error("plan error: {0}")]
    Plan(String),
    #[error("table error: {0}")]
    Table(String),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error("exchange error: {0}")]
    Exchange(String),
    #[error("shuffle stalled: {0}")]
    ShuffleStall(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("arithmetic overflow in {0}")]
    Overflow(String),
    #[error("cluster config error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Cluster shape and engine tunables.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    /// Node count n.
    pub nodes: usize,
    /// Workers per node t.
    pub workers: usize,
    /// Simulated NUMA regions per node; workers are assigned round-robin.
    pub regions: usize,
    /// Tuples per morsel.
    pub morsel_size: usize,
    /// Message buffer capacity in bytes.
    pub message_capacity: usize,
    /// Maximum pooled buffers per region.
    pub pool_max_messages: usize,
    /// How long a pool acquire may wait before a shuffle-stall error.
    pub pool_timeout: Duration,
    /// Drive sends through the round-robin phase schedule.
    pub schedule: bool,
    pub sync_policy: SyncPolicy,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: 1,
            workers: 1,
            regions: 1,
            morsel_size: 16_384,
            message_capacity: 512 * 1024,
            pool_max_messages: 4096,
            pool_timeout: Duration::from_secs(5),
            schedule: false,
            sync_policy: SyncPolicy::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.nodes < 1 || self.workers < 1 || self.regions < 1 {
            return Err(EngineError::Config("nodes, workers, regions must be >= 1".into()));
        }
        if self.morsel_size < 1 || self.message_capacity < 32 {
            return Err(EngineError::Config("morsel and message sizes too small".into()));
        }
        self.sync_policy.validate().map_err(EngineError::Config)
    }
}

#[derive(Debug, Clone, Default)]
pub struct QueryMetrics {
    /// Payload bytes of transmitted (remote) messages.
    pub bytes_shuffled: u64,
    /// Remote data and last-flag messages posted to the transport.
    pub messages_sent: u64,
    pub sync_messages_sent: u64,
    /// Receiver-side conservation counters.
    pub bytes_delivered: u64,
    pub messages_delivered: u64,
    /// Messages enqueued to inboxes (transport plus local loopback).
    pub messages_inboxed: u64,
    /// Messages taken from inboxes and deserialized by workers.
    pub messages_processed: u64,
    pub steal_count: u64,
    /// [node][worker] tuples deserialized from received messages.
    pub tuples_received_per_worker: Vec<Vec<u64>>,
    /// [node][pipeline] wall milliseconds.
    pub pipeline_wall_ms: Vec<Vec<f64>>,
    /// [node] tuples scanned from base tables.
    pub tuples_scanned_per_node: Vec<u64>,
    /// Directed transport connections the mesh opened.
    pub connections: usize,
    pub pool_allocated: usize,
    pub pool_free: usize,
    pub pools_balanced: bool,
    /// Simulated completion time (recording transport only).
    pub sim_time_ns: Option<f64>,
    pub wall_ms: f64,
    pub result_rows: usize,
}

#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub schema: Arc<Schema>,
    pub rows: Vec<Vec<Datum>>,
    pub metrics: QueryMetrics,
}

/// Everything one node's workers share.
struct NodeCtx<'a> {
    node: usize,
    cfg: &'a ClusterConfig,
    program: &'a Program,
    chunks: HashMap<String, TupleBatch>,
    inboxes: Arc<InboxSet>,
    pools: Arc<Vec<Arc<MessagePool>>>,
    build_tables: Vec<BuildTable>,
    preagg: Vec<Vec<Mutex<GroupTable>>>,
    preagg_aggs: Vec<Arc<Vec<BoundAgg>>>,
    finalagg: Vec<Mutex<GroupTable>>,
    frozen_final: Vec<Mutex<Option<Arc<Vec<Vec<Datum>>>>>>,
    morsel_cursors: Vec<AtomicUsize>,
    drain_cursors: Vec<AtomicUsize>,
    barrier: Barrier,
    mux: MuxHandle,
    stats: Arc<NodeStats>,
    results: Mutex<Vec<Vec<Datum>>>,
    logical_ex: Vec<Option<Arc<LogicalExchange>>>,
    fail: Mutex<Option<EngineError>>,
}

impl<'a> NodeCtx<'a> {
    fn new(
        node: usize,
        cfg: &'a ClusterConfig,
        program: &'a Program,
        tables: &TableSet,
        mux: MuxHandle,
        inboxes: Arc<InboxSet>,
        pools: Arc<Vec<Arc<MessagePool>>>,
        stats: Arc<NodeStats>,
    ) -> Result<Self, EngineError> {
        let mut chunks = HashMap::new();
        for name in &program.scans {
            if !chunks.contains_key(name) {
                let table = tables.get(name)?;
                chunks.insert(name.clone(), table.chunk(node, cfg.nodes));
            }
        }
        let mut preagg_aggs = vec![Arc::new(Vec::new()); program.preagg_count];
        let mut logical_ex = Vec::with_capacity(program.pipelines.len());
        for spec in &program.pipelines {
            logical_ex.push(match &spec.sink {
                Sink::ExchangeSend { operator_id, .. } => {
                    Some(LogicalExchange::new(*operator_id))
                }
                Sink::GatherSend { .. } => Some(LogicalExchange::new(GATHER_OPERATOR_ID)),
                _ => None,
            });
            if let Sink::PreAggregate { id, aggs, .. } = &spec.sink {
                preagg_aggs[*id] = aggs.clone();
            }
        }
        Ok(NodeCtx {
            node,
            cfg,
            program,
            chunks,
            inboxes,
            pools,
            build_tables: (0..program.build_table_count).map(|_| BuildTable::new()).collect(),
            preagg: (0..program.preagg_count)
                .map(|_| (0..cfg.workers).map(|_| Mutex::new(GroupTable::new())).collect())
                .collect(),
            preagg_aggs,
            finalagg: (0..program.finalagg_count).map(|_| Mutex::new(GroupTable::new())).collect(),
            frozen_final: (0..program.finalagg_count).map(|_| Mutex::new(None)).collect(),
            morsel_cursors: (0..program.pipelines.len()).map(|_| AtomicUsize::new(0)).collect(),
            drain_cursors: (0..program.finalagg_count).map(|_| AtomicUsize::new(0)).collect(),
            barrier: Barrier::new(cfg.workers),
            mux,
            stats,
            results: Mutex::new(Vec::new()),
            logical_ex,
            fail: Mutex::new(None),
        })
    }

    fn failed(&self) -> bool {
        self.fail.lock().unwrap().is_some()
    }

    fn set_fail(&self, err: EngineError) {
        let mut slot = self.fail.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
    }
}

/// Per-worker sink bindings for one pipeline.
enum SinkState<'a, 'ctx> {
    Writer(ExchangeWriter<'ctx, MuxHandle>),
    Build { table: &'a BuildTable, keys: &'a [usize] },
    PreAgg { table: &'a Mutex<GroupTable>, group: &'a [usize], aggs: &'a [BoundAgg] },
    FinalAgg {
        table: &'a Mutex<GroupTable>,
        group: &'a [usize],
        aggs: &'a [BoundAgg],
        from_partials: bool,
    },
    Collect,
}

fn worker_loop(ctx: &NodeCtx<'_>, worker: usize) -> Result<(), EngineError> {
    let region = worker % ctx.cfg.regions;
    for (p_idx, spec) in ctx.program.pipelines.iter().enumerate() {
        let start = Instant::now();
        let skip = spec.only_node.is_some_and(|n| n != ctx.node) || ctx.failed();
        if !skip {
            if let Err(e) = run_pipeline(ctx, worker, region, p_idx, spec) {
                ctx.set_fail(e);
            }
        }
        let leader = ctx.barrier.wait().is_leader();
        if leader {
            if let Err(e) = finish_pipeline(ctx, p_idx, spec) {
                ctx.set_fail(e);
            }
            ctx.stats.pipeline_wall_ns[p_idx]
                .store(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        }
        ctx.barrier.wait();
    }
    match ctx.fail.lock().unwrap().clone() {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

/// Leader duties after each pipeline's local barrier: seal breakers, emit
/// end-of-stream markers, signal local completion to the inbox.
fn finish_pipeline(ctx: &NodeCtx<'_>, p_idx: usize, spec: &PipelineSpec) -> Result<(), EngineError> {
    match &spec.sink {
        Sink::ExchangeSend { operator_id, kind, .. } => {
            let op = ctx.logical_ex[p_idx].as_ref().expect("exchange sink state");
            finish_exchange(op, kind, ctx.node, ctx.cfg.nodes, &ctx.pools[0], &ctx.mux)?;
            ctx.mux.send(MuxCommand::LocalDone { operator_id: *operator_id });
        }
        Sink::GatherSend { .. } => {
            let op = ctx.logical_ex[p_idx].as_ref().expect("gather sink state");
            let kind = ExchangeKind::Gather { target: 0 };
            finish_exchange(op, &kind, ctx.node, ctx.cfg.nodes, &ctx.pools[0], &ctx.mux)?;
            ctx.mux.send(MuxCommand::LocalDone { operator_id: GATHER_OPERATOR_ID });
        }
        Sink::BuildTable { id, .. } => ctx.build_tables[*id].freeze(),
        Sink::FinalAggregate { id, aggs, .. } => {
            let rows = ctx.finalagg[*id].lock().unwrap().drain_final_rows(aggs);
            *ctx.frozen_final[*id].lock().unwrap() = Some(Arc::new(rows));
        }
        Sink::PreAggregate { .. } | Sink::Collect => {}
    }
    Ok(())
}

fn run_pipeline(
    ctx: &NodeCtx<'_>,
    worker: usize,
    region: usize,
    p_idx: usize,
    spec: &PipelineSpec,
) -> Result<(), EngineError> {
    // frozen probe views for this worker
    let probe_views: Vec<Option<FrozenTable>> = spec
        .ops
        .iter()
        .map(|op| match op {
            StepOp::Probe { table, .. } => Some(ctx.build_tables[*table].probe_view()),
            _ => None,
        })
        .collect();

    let mut sink = make_sink(ctx, p_idx, spec, worker, region);

    match &spec.source {
        Source::Scan { table, .. } => {
            let chunk = &ctx.chunks[table];
            let rows = chunk.row_count;
            loop {
                let start = ctx.morsel_cursors[p_idx].fetch_add(ctx.cfg.morsel_size, Ordering::Relaxed);
                if start >= rows {
                    break;
                }
                let end = (start + ctx.cfg.morsel_size).min(rows);
                let batch = chunk.slice(start..end);
                ctx.stats
                    .tuples_scanned
                    .fetch_add(batch.row_count as u64, Ordering::Relaxed);
                push_batch(ctx, spec, &probe_views, &mut sink, batch)?;
            }
        }
        Source::ExchangeRecv { operator_id, schema, layout } => {
            let inbox = ctx.inboxes.get(*operator_id);
            loop {
                match inbox.pop(region) {
                    PopOutcome::Msg { msg, stolen } => {
                        if stolen {
                            ctx.stats.steal_count.fetch_add(1, Ordering::Relaxed);
                        }
                        let batch = deserialize_all(msg.buf.payload(), layout, schema)?;
                        ctx.stats.messages_processed.fetch_add(1, Ordering::Relaxed);
                        ctx.stats.tuples_received_per_worker[worker]
                            .fetch_add(batch.row_count as u64, Ordering::Relaxed);
                        ctx.pools[msg.buf.region()].release(msg.buf);
                        push_batch(ctx, spec, &probe_views, &mut sink, batch)?;
                    }
                    PopOutcome::Pending => {
                        if ctx.failed() {
                            break;
                        }
                        inbox.wait_briefly();
                    }
                    PopOutcome::Complete => break,
                }
            }
        }
        Source::DrainPreAgg { id, schema } => {
            let rows = ctx.preagg[*id][worker]
                .lock()
                .unwrap()
                .drain_partial_rows(&ctx.preagg_aggs[*id]);
            if !rows.is_empty() {
                let batch = TupleBatch::from_rows(schema.clone(), &rows)?;
                push_batch(ctx, spec, &probe_views, &mut sink, batch)?;
            }
        }
        Source::DrainFinalAgg { id, schema } => {
            let rows = ctx.frozen_final[*id]
                .lock()
                .unwrap()
                .clone()
                .expect("final aggregate sealed before drain");
            let total = rows.len();
            loop {
                let start = ctx.drain_cursors[*id].fetch_add(ctx.cfg.morsel_size, Ordering::Relaxed);
                if start >= total {
                    break;
                }
                let end = (start + ctx.cfg.morsel_size).min(total);
                let batch = TupleBatch::from_rows(schema.clone(), &rows[start..end])?;
                push_batch(ctx, spec, &probe_views, &mut sink, batch)?;
            }
        }
    }

    if let SinkState::Writer(writer) = &mut sink {
        writer.flush()?;
    }
    Ok(())
}

fn make_sink<'a, 'ctx>(
    ctx: &'ctx NodeCtx<'a>,
    p_idx: usize,
    spec: &'ctx PipelineSpec,
    worker: usize,
    region: usize,
) -> SinkState<'ctx, 'ctx> {
    match &spec.sink {
        Sink::ExchangeSend { kind, layout, .. } => SinkState::Writer(ExchangeWriter::new(
            ctx.logical_ex[p_idx].as_ref().expect("exchange state").clone(),
            kind.clone(),
            layout.as_ref().clone(),
            ctx.cfg.nodes,
            ctx.pools[region].clone(),
            &ctx.mux,
        )),
        Sink::GatherSend { layout, .. } => SinkState::Writer(ExchangeWriter::new(
            ctx.logical_ex[p_idx].as_ref().expect("gather state").clone(),
            ExchangeKind::Gather { target: 0 },
            layout.as_ref().clone(),
            ctx.cfg.nodes,
            ctx.pools[region].clone(),
            &ctx.mux,
        )),
        Sink::BuildTable { id, keys } => {
            SinkState::Build { table: &ctx.build_tables[*id], keys }
        }
        Sink::PreAggregate { id, group, aggs, .. } => SinkState::PreAgg {
            table: &ctx.preagg[*id][worker],
            group,
            aggs,
        },
        Sink::FinalAggregate { id, group, aggs, from_partials, .. } => SinkState::FinalAgg {
            table: &ctx.finalagg[*id],
            group,
            aggs,
            from_partials: *from_partials,
        },
        Sink::Collect => SinkState::Collect,
    }
}

fn push_batch(
    ctx: &NodeCtx<'_>,
    spec: &PipelineSpec,
    probe_views: &[Option<FrozenTable>],
    sink: &mut SinkState<'_, '_>,
    batch: TupleBatch,
) -> Result<(), EngineError> {
    let block = apply_ops(&spec.ops, probe_views, batch)?;
    if block.row_count == 0 {
        return Ok(());
    }
    match sink {
        SinkState::Writer(writer) => writer.consume(&block)?,
        SinkState::Build { table, keys } => {
            for r in 0..block.row_count {
                let row = block.row(r);
                let key: Vec<Datum> = keys.iter().map(|&k| row[k].clone()).collect();
                table.insert(key, row);
            }
        }
        SinkState::PreAgg { table, group, aggs } => {
            let mut table = table.lock().unwrap();
            aggregate_block(&mut table, &block, group, aggs, AggMode::Raw)?;
        }
        SinkState::FinalAgg { table, group, aggs, from_partials } => {
            let mode = if *from_partials { AggMode::Merge } else { AggMode::Raw };
            let mut table = table.lock().unwrap();
            aggregate_block(&mut table, &block, group, aggs, mode)?;
        }
        SinkState::Collect => {
            let mut results = ctx.results.lock().unwrap();
            for r in 0..block.row_count {
                results.push(block.row(r));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum AggMode {
    Raw,
    Merge,
}

fn aggregate_block(
    table: &mut GroupTable,
    block: &TupleBatch,
    group: &[usize],
    aggs: &[BoundAgg],
    mode: AggMode,
) -> Result<(), EngineError> {
    for r in 0..block.row_count {
        let row = block.row(r);
        let key: Vec<Datum> = group.iter().map(|&g| row[g].clone()).collect();
        let states = table.states_mut(key, aggs);
        for (state, agg) in states.iter_mut().zip(aggs) {
            match mode {
                AggMode::Raw => state.update(agg.input.map(|i| &row[i]))?,
                AggMode::Merge => match agg.avg_partial {
                    Some((s, c)) => state.merge(&[&row[s], &row[c]])?,
                    None => {
                        let idx = agg.input.expect("merge aggregate input");
                        state.merge(&[&row[idx]])?;
                    }
                },
            }
        }
    }
    Ok(())
}

/// Run the op chain over a batch, row-wise.
fn apply_ops(
    ops: &[StepOp],
    probe_views: &[Option<FrozenTable>],
    batch: TupleBatch,
) -> Result<TupleBatch, EngineError> {
    if ops.is_empty() {
        return Ok(batch);
    }
    let mut schema = batch.schema.clone();
    let mut rows: Vec<Vec<Datum>> = (0..batch.row_count).map(|r| batch.row(r)).collect();
    for (op_idx, op) in ops.iter().enumerate() {
        match op {
            StepOp::Filter(pred) => {
                let mut kept = Vec::with_capacity(rows.len());
                for row in rows {
                    if truthy(&eval(pred, &row)?) {
                        kept.push(row);
                    }
                }
                rows = kept;
            }
            StepOp::Map { exprs, schema: out } => {
                for row in &mut rows {
                    for e in exprs {
                        let v = eval(e, row)?;
                        row.push(v);
                    }
                }
                schema = out.clone();
            }
            StepOp::Project { indices, schema: out } => {
                rows = rows
                    .into_iter()
                    .map(|row| indices.iter().map(|&i| row[i].clone()).collect())
                    .collect();
                schema = out.clone();
            }
            StepOp::Probe { probe_keys, schema: out, .. } => {
                let view = probe_views[op_idx].as_ref().expect("probe view");
                let mut joined = Vec::new();
                for row in rows {
                    let key: Vec<Datum> = probe_keys.iter().map(|&k| row[k].clone()).collect();
                    if key.iter().any(Datum::is_null) {
                        continue;
                    }
                    if let Some(matches) = view.lookup(&key) {
                        for build_row in matches {
                            let mut out_row = row.clone();
                            out_row.extend(build_row.iter().cloned());
                            joined.push(out_row);
                        }
                    }
                }
                rows = joined;
                schema = out.clone();
            }
        }
    }
    TupleBatch::from_rows(schema, &rows).map_err(EngineError::from)
}

/// Execute a plan across the simulated cluster and gather the result,
/// verifying nothing: callers compare against [`reference::evaluate`].
pub fn run_query(
    plan: &PlanNode,
    tables: &TableSet,
    cluster: &ClusterConfig,
    transport: &TransportConfig,
) -> Result<QueryOutput, EngineError> {
    cluster.validate()?;
    transport.validate().map_err(EngineError::Config)?;
    let program = compile(plan, tables)?;
    let n = cluster.nodes;
    let workers = cluster.workers;

    let mesh = open_mesh(n, transport).map_err(|e| EngineError::Transport(e.to_string()))?;
    let recorder = mesh.recorder.clone();
    let connections = mesh.directed_connections();

    // per-node plumbing
    let mut commands = Vec::new();
    let mut muxes = Vec::new();
    let mut ctxs = Vec::new();
    let mut all_pools = Vec::new();
    let mut all_stats = Vec::new();
    for (node, endpoint) in mesh.endpoints.into_iter().enumerate() {
        let (tx, rx) = crossbeam_channel::unbounded();
        let handle = MuxHandle::new(tx.clone());
        let pools: Arc<Vec<Arc<MessagePool>>> = Arc::new(
            (0..cluster.regions)
                .map(|region| {
                    MessagePool::new(
                        region,
                        cluster.message_capacity,
                        cluster.pool_max_messages,
                        cluster.pool_timeout,
                    )
                })
                .collect(),
        );
        let inboxes = InboxSet::new(
            program
                .exchange_inputs
                .iter()
                .map(|(op, _)| (*op, ExchangeInbox::new(*op, cluster.regions, n - 1)))
                .collect(),
        );
        let stats = NodeStats::new(workers, program.pipelines.len());
        let runner = if cluster.schedule && n >= 2 {
            let sched = round_robin_schedule(n).map_err(|e| EngineError::Config(e.to_string()))?;
            Some(PhaseRunner::new(sched, node, cluster.sync_policy.clone()))
        } else {
            None
        };
        muxes.push(Multiplexer::new(
            node,
            n,
            cluster.regions,
            endpoint,
            rx,
            inboxes.clone(),
            pools.clone(),
            stats.clone(),
            runner,
        ));
        ctxs.push(NodeCtx::new(
            node,
            cluster,
            &program,
            tables,
            handle,
            inboxes,
            pools.clone(),
            stats.clone(),
        )?);
        commands.push(tx);
        all_pools.push(pools);
        all_stats.push(stats);
    }

    let wall = Instant::now();
    let mut first_error: Option<EngineError> = None;
    std::thread::scope(|scope| {
        let mux_handles: Vec<_> = muxes
            .into_iter()
            .map(|mux| scope.spawn(move || mux.run()))
            .collect();
        let worker_handles: Vec<_> = ctxs
            .iter()
            .flat_map(|ctx| {
                (0..workers).map(move |w| scope.spawn(move || worker_loop(ctx, w)))
            })
            .collect();
        for handle in worker_handles {
            match handle.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(_) => {
                    first_error.get_or_insert(EngineError::Internal("worker panicked".into()));
                }
            }
        }
        for tx in &commands {
            let _ = tx.send(MuxCommand::NoMoreSends);
            let _ = tx.send(MuxCommand::Shutdown);
        }
        for handle in mux_handles {
            match handle.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(_) => {
                    first_error.get_or_insert(EngineError::Internal("multiplexer panicked".into()));
                }
            }
        }
    });
    if let Some(err) = first_error {
        return Err(err);
    }
    let wall_ms = wall.elapsed().as_secs_f64() * 1e3;

    // metrics assembly and lifecycle accounting
    let mut metrics = QueryMetrics {
        connections,
        wall_ms,
        pools_balanced: true,
        ..QueryMetrics::default()
    };
    for (node, stats) in all_stats.iter().enumerate() {
        metrics.bytes_shuffled += stats.bytes_shuffled.load(Ordering::Relaxed);
        metrics.messages_sent += stats.messages_sent.load(Ordering::Relaxed);
        metrics.sync_messages_sent += stats.sync_messages_sent.load(Ordering::Relaxed);
        metrics.bytes_delivered += stats.bytes_delivered.load(Ordering::Relaxed);
        metrics.messages_delivered += stats.messages_delivered.load(Ordering::Relaxed);
        metrics.messages_processed += stats.messages_processed.load(Ordering::Relaxed);
        metrics.steal_count += stats.steal_count.load(Ordering::Relaxed);
        metrics.messages_inboxed += ctxs[node].inboxes.total_delivered();
        metrics
            .tuples_scanned_per_node
            .push(stats.tuples_scanned.load(Ordering::Relaxed));
        metrics.tuples_received_per_worker.push(
            stats
                .tuples_received_per_worker
                .iter()
                .map(|c| c.load(Ordering::Relaxed))
                .collect(),
        );
        metrics.pipeline_wall_ms.push(
            stats
                .pipeline_wall_ns
                .iter()
                .map(|c| c.load(Ordering::Relaxed) as f64 / 1e6)
                .collect(),
        );
    }
    for pools in &all_pools {
        for pool in pools.iter() {
            let stats = pool.stats();
            metrics.pool_allocated += stats.allocated;
            metrics.pool_free += stats.free;
            if stats.allocated != stats.free {
                metrics.pools_balanced = false;
            }
        }
    }

    if let Some(recorder) = recorder {
        let workload = recorder.to_workload(cluster.message_capacity as u64);
        let schedule = if cluster.schedule && n >= 2 {
            Some(round_robin_schedule(n).expect("n >= 2"))
        } else {
            None
        };
        let options = SimOptions {
            seed: 0,
            policy: cluster.sync_policy.clone(),
            record_trace: false,
            tie_break: TieBreak::Fifo,
        };
        let report = sim_run(&workload, schedule.as_ref(), transport, &options);
        let compute_ns = metrics
            .tuples_scanned_per_node
            .iter()
            .map(|&t| t as f64 / SIM_PROCESS_RATE_TUPLES_PER_SEC * 1e9)
            .fold(0.0, f64::max);
        metrics.sim_time_ns = Some(compute_ns + report.makespan_ns);
    }

    let rows = std::mem::take(&mut *ctxs[0].results.lock().unwrap());
    metrics.result_rows = rows.len();
    Ok(QueryOutput { schema: program.result_schema.clone(), rows, metrics })
}

/// Sort rows into a canonical order for multiset comparison.
pub fn canonicalize(rows: &mut [Vec<Datum>]) {
    rows.sort_unstable_by(|a, b| a.partial_cmp(b).expect("total order on datums"));
}

/// Compare two result multisets; on mismatch, report a sample difference.
pub fn diff_multisets(
    mut actual: Vec<Vec<Datum>>,
    mut expected: Vec<Vec<Datum>>,
) -> Result<(), String> {
    canonicalize(&mut actual);
    canonicalize(&mut expected);
    if actual == expected {
        return Ok(());
    }
    let mut sample = String::new();
    let mut shown = 0;
    let mut i = 0;
    let mut j = 0;
    while shown < 5 && (i < actual.len() || j < expected.len()) {
        match (actual.get(i), expected.get(j)) {
            (Some(a), Some(e)) if a == e => {
                i += 1;
                j += 1;
                continue;
            }
            (Some(a), Some(e)) if a < e => {
                sample.push_str(&format!("  unexpected row: {a:?}\n"));
                i += 1;
            }
            (Some(_), Some(e)) => {
                sample.push_str(&format!("  missing row:    {e:?}\n"));
                j += 1;
            }
            (Some(a), None) => {
                sample.push_str(&format!("  unexpected row: {a:?}\n"));
                i += 1;
            }
            (None, Some(e)) => {
                sample.push_str(&format!("  missing row:    {e:?}\n"));
                j += 1;
            }
            (None, None) => break,
        }
        shown += 1;
    }
    Err(format!(
        "result mismatch: {} rows vs {} expected; first differences:\n{sample}",
        actual.len(),
        expected.len()
    ))
}
