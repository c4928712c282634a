//! Single-threaded reference evaluator.
//!
//! Runs a plan over the union of all table chunks with naive data flow: no
//! morsels, no partitioning, no exchanges (they pass through), joins via a
//! plain hash map keyed on datum values. Used as the oracle for distributed
//! runs: the engine's result multiset must match this one exactly.

use std::collections::HashMap;
use std::sync::Arc;

use crate::codec::{Datum, Schema};

use super::expr::{eval, truthy, BoundExpr};
use super::operators::GroupTable;
use super::plan::{compile, BoundAgg, PlanNode, Sink, Source, StepOp};
use super::table::TableSet;
use super::EngineError;

/// Evaluate a plan single-threaded and return (schema, rows).
pub fn evaluate(
    plan: &PlanNode,
    tables: &TableSet,
) -> Result<(Arc<Schema>, Vec<Vec<Datum>>), EngineError> {
    // reuse the compiled program (binding, schemas, op chains) but execute
    // its pipelines sequentially over whole tables
    let program = compile(plan, tables)?;
    let mut build_tables: Vec<HashMap<Vec<Datum>, Vec<Vec<Datum>>>> =
        vec![HashMap::new(); program.build_table_count];
    let mut preagg: Vec<GroupTable> = (0..program.preagg_count).map(|_| GroupTable::new()).collect();
    let mut preagg_aggs: Vec<Arc<Vec<BoundAgg>>> = vec![Arc::new(Vec::new()); program.preagg_count];
    let mut finalagg: Vec<GroupTable> =
        (0..program.finalagg_count).map(|_| GroupTable::new()).collect();
    let mut finalagg_rows: Vec<Option<Vec<Vec<Datum>>>> = vec![None; program.finalagg_count];
    // rows flowing across each exchange, keyed by operator id
    let mut exchanged: HashMap<u32, Vec<Vec<Datum>>> = HashMap::new();
    let mut result: Vec<Vec<Datum>> = Vec::new();

    for spec in &program.pipelines {
        let input: Vec<Vec<Datum>> = match &spec.source {
            Source::Scan { table, .. } => {
                let t = tables.get(table)?;
                (0..t.batch.row_count).map(|r| t.batch.row(r)).collect()
            }
            Source::ExchangeRecv { operator_id, .. } => {
                exchanged.remove(operator_id).unwrap_or_default()
            }
            Source::DrainPreAgg { id, .. } => preagg[*id].drain_partial_rows(&preagg_aggs[*id]),
            Source::DrainFinalAgg { id, .. } => {
                finalagg_rows[*id].take().expect("final aggregate sealed")
            }
        };
        let rows = apply_ops_rows(&spec.ops, &build_tables, input)?;
        match &spec.sink {
            Sink::ExchangeSend { operator_id, .. } => {
                exchanged.entry(*operator_id).or_default().extend(rows);
            }
            Sink::GatherSend { .. } => {
                exchanged.entry(crate::exchange::GATHER_OPERATOR_ID).or_default().extend(rows);
            }
            Sink::BuildTable { id, keys } => {
                for row in rows {
                    let key: Vec<Datum> = keys.iter().map(|&k| row[k].clone()).collect();
                    build_tables[*id].entry(key).or_default().push(row);
                }
            }
            Sink::PreAggregate { id, group, aggs, .. } => {
                preagg_aggs[*id] = aggs.clone();
                fold_rows(&mut preagg[*id], rows, group, aggs, false)?;
            }
            Sink::FinalAggregate { id, group, aggs, from_partials, .. } => {
                fold_rows(&mut finalagg[*id], rows, group, aggs, *from_partials)?;
                finalagg_rows[*id] = Some(finalagg[*id].drain_final_rows(aggs));
            }
            Sink::Collect => result.extend(rows),
        }
    }
    Ok((program.result_schema, result))
}

fn fold_rows(
    table: &mut GroupTable,
    rows: Vec<Vec<Datum>>,
    group: &[usize],
    aggs: &[BoundAgg],
    from_partials: bool,
) -> Result<(), EngineError> {
    for row in rows {
        let key: Vec<Datum> = group.iter().map(|&g| row[g].clone()).collect();
        let states = table.states_mut(key, aggs);
        for (state, agg) in states.iter_mut().zip(aggs) {
            if from_partials {
                match agg.avg_partial {
                    Some((s, c)) => state.merge(&[&row[s], &row[c]])?,
                    None => state.merge(&[&row[agg.input.expect("merge input")]])?,
                }
            } else {
                state.update(agg.input.map(|i| &row[i]))?;
            }
        }
    }
    Ok(())
}

fn apply_ops_rows(
    ops: &[StepOp],
    build_tables: &[HashMap<Vec<Datum>, Vec<Vec<Datum>>>],
    mut rows: Vec<Vec<Datum>>,
) -> Result<Vec<Vec<Datum>>, EngineError> {
    for op in ops {
        match op {
            StepOp::Filter(pred) => rows = filter_rows(pred, rows)?,
            StepOp::Map { exprs, .. } => {
                for row in &mut rows {
                    for e in exprs {
                        let v = eval(e, row)?;
                        row.push(v);
                    }
                }
            }
            StepOp::Project { indices, .. } => {
                rows = rows
                    .into_iter()
                    .map(|row| indices.iter().map(|&i| row[i].clone()).collect())
                    .collect();
            }
            StepOp::Probe { table, probe_keys, .. } => {
                let build = &build_tables[*table];
                let mut joined = Vec::new();
                for row in rows {
                    let key: Vec<Datum> =
                        probe_keys.iter().map(|&k| row[k].clone()).collect();
                    if key.iter().any(Datum::is_null) {
                        continue;
                    }
                    if let Some(matches) = build.get(&key) {
                        for m in matches {
                            let mut out = row.clone();
                            out.extend(m.iter().cloned());
                            joined.push(out);
                        }
                    }
                }
                rows = joined;
            }
        }
    }
    Ok(rows)
}

fn filter_rows(pred: &BoundExpr, rows: Vec<Vec<Datum>>) -> Result<Vec<Vec<Datum>>, EngineError> {
    let mut kept = Vec::with_capacity(rows.len());
    for row in rows {
        if truthy(&eval(pred, &row)?) {
            kept.push(row);
        }
    }
    Ok(kept)
}

/// Extra-naive aggregation check used in tests: group and aggregate raw rows
/// in one pass, ignoring the pre/final split entirely.
pub fn direct_group_sum(
    rows: &[Vec<Datum>],
    group: &[usize],
    sum_col: usize,
) -> HashMap<Vec<Datum>, i64> {
    let mut out: HashMap<Vec<Datum>, i64> = HashMap::new();
    for row in rows {
        let key: Vec<Datum> = group.iter().map(|&g| row[g].clone()).collect();
        let add = match &row[sum_col] {
            Datum::Int(v) | Datum::Dec(v) => *v,
            _ => 0,
        };
        *out.entry(key).or_insert(0) += add;
    }
    out
}

/// Helper shared by tests and the harness: evaluate and canonically sort.
pub fn evaluate_sorted(
    plan: &PlanNode,
    tables: &TableSet,
) -> Result<(Arc<Schema>, Vec<Vec<Datum>>), EngineError> {
    let (schema, mut rows) = evaluate(plan, tables)?;
    super::canonicalize(&mut rows);
    Ok((schema, rows))
}
