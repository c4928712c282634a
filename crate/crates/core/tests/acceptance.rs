//! Acceptance suite: one test per release gate, each printing a PASS/FAIL
//! line with the measured values next to its pinned tolerance.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qshuffle_core::analysis::{
    broadcast_threshold, buffers_per_operator, connection_count, default_key_hash,
    zipf_partition_load, ParallelModel, SkewSpec,
};
use qshuffle_core::codec::{
    deserialize_tuple, layout_for, serialize_tuple, ColumnKind, ColumnType, Datum, Schema,
    TupleBatch,
};
use qshuffle_core::engine::datagen::{generate, DataSpec};
use qshuffle_core::engine::plan::PlanNode;
use qshuffle_core::engine::reference;
use qshuffle_core::engine::table::TableSet;
use qshuffle_core::engine::{diff_multisets, run_query, ClusterConfig};
use qshuffle_core::harness::{
    bench_msgsize, bench_schedule, BenchMsgSizeSpec, BenchScheduleSpec, QueryExperimentSpec,
    run_query_experiment,
};
use qshuffle_core::schedule::round_robin_schedule;
use qshuffle_core::transport::TransportKind;

/// Scheduled/unscheduled aggregate-throughput ratio of the 8-node benchmark,
/// pinned from the first measurement of this simulator.
const PINNED_SCHEDULING_GAIN_8_NODES: f64 = 1.1217;

fn pass(name: &str, detail: &str) {
    println!("[PASS] {name}: {detail}");
}

fn fail(name: &str, detail: &str) -> ! {
    println!("[FAIL] {name}: {detail}");
    panic!("{name}: {detail}");
}

fn plans_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../plans")
}

fn load_plan(name: &str) -> PlanNode {
    let path = plans_dir().join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    PlanNode::from_json(&text).expect("plan parses")
}

fn grid_tables() -> TableSet {
    generate(&DataSpec {
        parts: 1_000,
        orders: 2_500,
        lineitems: 10_000,
        events: 1_500,
        zipf_z: 0.0,
        seed: 42,
    })
}

#[test]
fn structural_formulas_exact() {
    let name = "structural formulas (n=6, t=40)";
    let classic = ParallelModel::classic(6, 40);
    let hybrid = ParallelModel::hybrid(6, 40);
    let got = (
        connection_count(classic),
        buffers_per_operator(classic),
        broadcast_threshold(classic),
        connection_count(hybrid),
        buffers_per_operator(hybrid),
        broadcast_threshold(hybrid),
    );
    let want = (57_560, 239, 239, 30, 5, 5);
    if got != want {
        fail(name, &format!("got {got:?}, want {want:?}"));
    }
    // the analyze command emits exactly these numbers
    let csv = qshuffle_core::harness::analyze(&qshuffle_core::harness::AnalyzeSpec {
        key_domains: vec![100_000],
        ..Default::default()
    });
    if !csv.contains("classic,6,40,57560,239,239") || !csv.contains("hybrid,6,40,30,5,5") {
        fail(name, "analyze CSV missing reference rows");
    }
    pass(name, "57,560/239/239 classic and 30/5/5 hybrid, exact");
}

#[test]
fn phase_schedule_validity() {
    let name = "schedule validity (n in [2,64])";
    for n in 2..=64 {
        let schedule = round_robin_schedule(n).expect("constructible");
        if let Err(e) = schedule.validate() {
            fail(name, &format!("n={n}: {e}"));
        }
    }
    let four = round_robin_schedule(4).unwrap();
    if four.phase_count() != 3 {
        fail(name, &format!("4 nodes gave {} phases, want 3", four.phase_count()));
    }
    let first: Vec<(usize, usize)> = four.phase(0).assignments().collect();
    if first != vec![(0, 1), (1, 2), (2, 3), (3, 0)] {
        fail(name, &format!("4-node phase 1 is {first:?}"));
    }
    pass(name, "conflict-free, pair-complete for every n; 3 phases at n=4");
}

#[test]
fn scheduling_gain_mechanism() {
    let name = "scheduling gain (8-node all-to-all, 1680 x 512 KiB)";
    let spec = BenchScheduleSpec { servers: vec![8], ..BenchScheduleSpec::default() };
    let (_, points) = bench_schedule(&spec).expect("bench runs");
    let p = &points[0];
    if p.scheduled.aggregate_throughput <= p.unscheduled.aggregate_throughput {
        fail(
            name,
            &format!(
                "scheduled {:.3} GB/s not above unscheduled {:.3} GB/s",
                p.scheduled.aggregate_throughput / 1e9,
                p.unscheduled.aggregate_throughput / 1e9
            ),
        );
    }
    if p.scheduled.sharing_instants != 0 {
        fail(name, &format!("{} receiver-sharing instants in the scheduled trace", p.scheduled.sharing_instants));
    }
    if p.unscheduled.sharing_instants == 0 {
        fail(name, "uncoordinated run shows no contention; model broken");
    }
    let ratio = p.ratio();
    if (ratio - PINNED_SCHEDULING_GAIN_8_NODES).abs() > 0.01 {
        fail(
            name,
            &format!("gain ratio {ratio:.4} drifted from pinned {PINNED_SCHEDULING_GAIN_8_NODES}"),
        );
    }
    pass(
        name,
        &format!(
            "scheduled {:.2} GB/s vs unscheduled {:.2} GB/s (ratio {:.4}, pinned {:.4}); zero port sharing",
            p.scheduled.aggregate_throughput / 1e9,
            p.unscheduled.aggregate_throughput / 1e9,
            ratio,
            PINNED_SCHEDULING_GAIN_8_NODES
        ),
    );
}

#[test]
fn amortization_curve_saturation() {
    let name = "amortization curve (1 KiB - 64 MiB, n=6)";
    let spec = BenchMsgSizeSpec::default();
    let (_, points) = bench_msgsize(&spec).expect("bench runs");
    let link = spec.transport.link_bandwidth;
    let mut prev = 0.0;
    for p in &points {
        let agreement = p.measured / p.predicted;
        if (agreement - 1.0).abs() > 0.05 {
            fail(
                name,
                &format!("size {}: measured/predicted = {agreement:.4} (outside 5%)", p.size),
            );
        }
        if p.measured < prev * 0.999 {
            fail(name, &format!("throughput not monotone at size {}", p.size));
        }
        prev = p.measured;
        if p.size >= 512 * 1024 && p.measured / link < 0.99 {
            fail(
                name,
                &format!("size {}: {:.4} of link capacity, want >= 0.99", p.size, p.measured / link),
            );
        }
    }
    let saturated = points.iter().find(|p| p.size == 512 * 1024).expect("sweep hits 512 KiB");
    pass(
        name,
        &format!(
            "512 KiB reaches {:.3} of link rate; all {} sweep points within 5% of the model",
            saturated.measured / link,
            points.len()
        ),
    );
}

#[test]
fn query_grid_matches_reference_on_all_transports() {
    let name = "query grid vs reference";
    let tables = grid_tables();
    let plan_names =
        ["filter_scan", "agg_only", "hash_join", "broadcast_join", "two_join", "events_nullable"];
    let mut runs = 0;
    for plan_name in plan_names {
        let plan = load_plan(plan_name);
        let (_, expected) = reference::evaluate(&plan, &tables).expect("oracle evaluates");
        for transport in
            [TransportKind::InProcess, TransportKind::Socket, TransportKind::Simulated]
        {
            for nodes in [1usize, 2, 4] {
                for workers in [1usize, 2, 4] {
                    for regions in [1usize, 2] {
                        let cluster = ClusterConfig {
                            nodes,
                            workers,
                            regions,
                            morsel_size: 1024,
                            message_capacity: 16 * 1024,
                            ..ClusterConfig::default()
                        };
                        let tcfg = qshuffle_core::transport::TransportConfig {
                            kind: transport,
                            ..Default::default()
                        };
                        let out = match run_query(&plan, &tables, &cluster, &tcfg) {
                            Ok(out) => out,
                            Err(e) => fail(
                                name,
                                &format!(
                                    "{plan_name} on {transport:?} n={nodes} t={workers} r={regions}: {e}"
                                ),
                            ),
                        };
                        if let Err(diff) = diff_multisets(out.rows, expected.clone()) {
                            fail(
                                name,
                                &format!(
                                    "{plan_name} on {transport:?} n={nodes} t={workers} r={regions}: {diff}"
                                ),
                            );
                        }
                        runs += 1;
                    }
                }
            }
        }
    }
    pass(
        name,
        &format!(
            "{} plans x 18 cluster shapes x 3 transports = {runs} runs, all exactly equal to the oracle",
            plan_names.len()
        ),
    );
}

#[test]
fn codec_round_trip_randomized() {
    let name = "codec round-trip (10^4 randomized cases)";
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    let kinds = [
        ColumnKind::Int64,
        ColumnKind::Decimal64 { scale: 2 },
        ColumnKind::Decimal64 { scale: 7 },
        ColumnKind::Date32,
        ColumnKind::Varchar,
    ];
    let mut cases = 0;
    while cases < 10_000 {
        let columns: Vec<(String, ColumnType)> = (0..rng.gen_range(1..=8))
            .map(|i| {
                let kind = kinds[rng.gen_range(0..kinds.len())];
                (format!("c{i}"), ColumnType { kind, nullable: rng.gen_bool(0.4) })
            })
            .collect();
        let schema = Arc::new(Schema::new(columns).unwrap());
        let layout = layout_for(&schema);
        let rows_in_batch = rng.gen_range(1..=4usize);
        let rows: Vec<Vec<Datum>> = (0..rows_in_batch)
            .map(|_| {
                schema
                    .columns()
                    .iter()
                    .map(|(_, ty)| {
                        if ty.nullable && rng.gen_bool(0.25) {
                            return Datum::Null;
                        }
                        match ty.kind {
                            ColumnKind::Int64 => Datum::Int(rng.gen()),
                            ColumnKind::Decimal64 { .. } => Datum::Dec(rng.gen()),
                            ColumnKind::Date32 => Datum::Date(rng.gen()),
                            ColumnKind::Varchar => {
                                let len = rng.gen_range(0..40);
                                Datum::Str(
                                    (0..len)
                                        .map(|_| rng.gen_range(b' '..=b'~') as char)
                                        .collect(),
                                )
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let batch = TupleBatch::from_rows(schema.clone(), &rows).unwrap();
        let mut bytes = Vec::new();
        let mut offsets = Vec::new();
        for r in 0..batch.row_count {
            let written = serialize_tuple(&batch, r, &layout, &mut bytes).unwrap();
            offsets.push(written);
        }
        let mut pos = 0;
        for (r, &written) in offsets.iter().enumerate() {
            let (values, consumed) = match deserialize_tuple(&bytes[pos..], &layout, &schema) {
                Ok(v) => v,
                Err(e) => fail(name, &format!("case {cases}: decode error {e}")),
            };
            if consumed != written {
                fail(name, &format!("case {cases}: wrote {written} bytes, consumed {consumed}"));
            }
            if values != rows[r] {
                fail(name, &format!("case {cases}: value mismatch {values:?} vs {:?}", rows[r]));
            }
            pos += consumed;
            cases += 1;
        }
    }
    // partsupp keeps the three-part structure
    let partsupp = Schema::new(vec![
        ("ps_partkey".into(), ColumnType::not_null(ColumnKind::Int64)),
        ("ps_suppkey".into(), ColumnType::not_null(ColumnKind::Int64)),
        ("ps_availqty".into(), ColumnType::not_null(ColumnKind::Int64)),
        ("ps_supplycost".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
        ("ps_comment".into(), ColumnType::not_null(ColumnKind::Varchar)),
    ])
    .unwrap();
    let layout = layout_for(&partsupp);
    if layout.part1 != vec![0, 1, 2, 3] || !layout.part2.is_empty() || layout.part3 != vec![4] {
        fail(name, &format!("partsupp layout wrong: {layout:?}"));
    }
    pass(name, &format!("{cases} randomized rows round-tripped exactly; partsupp layout three-part"));
}

#[test]
fn skew_overload_bounds() {
    let name = "skew overload bounds (z=0.84)";
    let domains: [u64; 4] = [10_000, 100_000, 1_000_000, 10_000_000];
    let mut curve = String::from("key_domain,partitions,overload_factor\n");
    let mut min_at_6 = f64::INFINITY;
    let mut min_domain = 0;
    for &domain in &domains {
        let at_240 = zipf_partition_load(
            &SkewSpec { zipf_z: 0.84, key_domain: domain, partitions: 240 },
            default_key_hash,
        );
        let at_6 = zipf_partition_load(
            &SkewSpec { zipf_z: 0.84, key_domain: domain, partitions: 6 },
            default_key_hash,
        );
        curve.push_str(&format!("{domain},240,{:.6}\n", at_240.overload_factor));
        curve.push_str(&format!("{domain},6,{:.6}\n", at_6.overload_factor));
        if at_240.overload_factor <= 2.0 {
            fail(
                name,
                &format!("domain {domain}: overload at 240 partitions is {:.4}, want > 2", at_240.overload_factor),
            );
        }
        if at_6.overload_factor < min_at_6 {
            min_at_6 = at_6.overload_factor;
            min_domain = domain;
        }
    }
    let out = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/skew_sensitivity.csv");
    let _ = std::fs::write(&out, &curve);
    println!("sensitivity curve ({} points) written to {}", domains.len() * 2, out.display());
    print!("{curve}");
    if min_at_6 > 1.04 {
        fail(
            name,
            &format!(
                "no key_domain in [10^4, 10^7] reaches overload <= 1.04 at 6 partitions; \
                 minimum is {min_at_6:.4} at domain {min_domain}. The >2-at-240 half holds \
                 everywhere; the 6-partition bound needs a key domain near 10^8.5 under this \
                 model (p(k) ∝ 1/k^0.84, CRC32-C of 8-byte LE keys, hash mod 6)."
            ),
        );
    }
    pass(
        name,
        &format!(">2 at 240 partitions everywhere; {min_at_6:.4} <= 1.04 at 6 partitions (domain {min_domain})"),
    );
}

#[test]
fn scalability_smoke_completion_time() {
    let name = "scalability smoke (fixed data, n = 1, 2, 4)";
    let tables = grid_tables();
    let plan = load_plan("hash_join");
    let spec = QueryExperimentSpec {
        name: "hash_join".into(),
        servers: vec![1, 2, 4],
        workers: 2,
        regions: 1,
        transport: TransportKind::Simulated,
        schedule: false,
        seed: 0,
        message_capacity: 64 * 1024,
    };
    let (_, rows) = match run_query_experiment(&plan, &tables, &spec) {
        Ok(v) => v,
        Err(e) => fail(name, &format!("experiment failed: {e}")),
    };
    let times: Vec<f64> = rows
        .iter()
        .map(|r| r.metrics.sim_time_ns.expect("simulated transport reports time"))
        .collect();
    for pair in times.windows(2) {
        if pair[1] >= pair[0] {
            fail(
                name,
                &format!("simulated completion times not decreasing: {times:?} ns for n=1,2,4"),
            );
        }
    }
    pass(
        name,
        &format!(
            "simulated completion {:.0} -> {:.0} -> {:.0} us for n=1,2,4",
            times[0] / 1e3,
            times[1] / 1e3,
            times[2] / 1e3
        ),
    );
}

#[test]
fn lifecycle_accounting() {
    let name = "lifecycle accounting (pools, retain counts, exactly-once)";
    let tables = grid_tables();
    let mut checked = 0;
    for plan_name in ["hash_join", "broadcast_join"] {
        let plan = load_plan(plan_name);
        let (_, expected) = reference::evaluate(&plan, &tables).expect("oracle evaluates");
        for (nodes, workers, regions) in [(2, 2, 2), (4, 4, 2), (1, 1, 1)] {
            let cluster = ClusterConfig {
                nodes,
                workers,
                regions,
                morsel_size: 512,
                message_capacity: 8 * 1024,
                ..ClusterConfig::default()
            };
            let tcfg = qshuffle_core::transport::TransportConfig::default();
            let out = run_query(&plan, &tables, &cluster, &tcfg).expect("query runs");
            diff_multisets(out.rows, expected.clone()).expect("matches oracle");
            if !out.metrics.pools_balanced {
                fail(
                    name,
                    &format!(
                        "{plan_name} n={nodes}: pools unbalanced ({} allocated, {} free)",
                        out.metrics.pool_allocated, out.metrics.pool_free
                    ),
                );
            }
            if out.metrics.messages_inboxed != out.metrics.messages_processed {
                fail(
                    name,
                    &format!(
                        "{plan_name} n={nodes}: {} inboxed vs {} processed",
                        out.metrics.messages_inboxed, out.metrics.messages_processed
                    ),
                );
            }
            if out.metrics.bytes_delivered != out.metrics.bytes_shuffled {
                fail(
                    name,
                    &format!(
                        "{plan_name} n={nodes}: {} bytes sent vs {} delivered",
                        out.metrics.bytes_shuffled, out.metrics.bytes_delivered
                    ),
                );
            }
            checked += 1;
        }
    }
    // broadcast retain counters reaching zero and buffers returning untouched
    // are asserted inside the message lifecycle itself (a violated retain or
    // generation check aborts the run), so the runs above also prove them
    pass(
        name,
        &format!("{checked} instrumented runs: allocated == free, inboxed == processed, sent == delivered"),
    );
}
