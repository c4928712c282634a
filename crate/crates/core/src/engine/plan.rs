//! Query plans: the serializable operator tree, name/type binding, and
//! lowering into per-node pipeline programs.
//!
//! Plans are given, not optimized here. Lowering cuts the tree at pipeline
//! breakers (hash-join build sides, aggregations) and exchange boundaries;
//! every node of the cluster runs the same pipeline sequence, synchronized
//! locally by a worker barrier per pipeline and globally by exchange
//! last-flags. The root result is gathered at node 0 through an implicit
//! exchange with a reserved operator id.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{layout_for, ColumnKind, ColumnType, Schema, WireLayout};
use crate::exchange::{ExchangeKind, GATHER_OPERATOR_ID};

use super::expr::{bind_expr, BoundExpr, Expr, ValueType};
use super::table::TableSet;
use super::EngineError;

/// Highest operator id plans may use; everything above is reserved.
pub const MAX_PLAN_OPERATOR_ID: u32 = 0xFFFF_FF00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeSpec {
    /// Partition rows by CRC32 of the named key columns.
    Hash { keys: Vec<String> },
    /// Replicate rows to every node.
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFunc {
    Sum,
    Count,
    Min,
    Max,
    Avg,
    /// Exact distinct count. Not decomposable: allowed only in a final
    /// aggregate over raw (non-partial) input.
    CountDistinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggSpec {
    pub func: AggFunc,
    /// Input column name, or "*" for count.
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub output: String,
    pub expr: Expr,
}

/// The plan operator tree as written in plan files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum PlanNode {
    Scan { table: String },
    Filter { input: Box<PlanNode>, predicate: Expr },
    /// Appends computed columns to the input schema.
    Map { input: Box<PlanNode>, exprs: Vec<MapSpec> },
    /// Column pruning: keeps exactly the named columns.
    Project { input: Box<PlanNode>, columns: Vec<String> },
    HashJoin {
        build: Box<PlanNode>,
        probe: Box<PlanNode>,
        build_keys: Vec<String>,
        probe_keys: Vec<String>,
    },
    PreAggregate { input: Box<PlanNode>, group_by: Vec<String>, aggs: Vec<AggSpec> },
    Aggregate {
        input: Box<PlanNode>,
        group_by: Vec<String>,
        aggs: Vec<AggSpec>,
        #[serde(default)]
        from_partials: bool,
    },
    Exchange { input: Box<PlanNode>, kind: ExchangeSpec },
}

impl PlanNode {
    pub fn from_json(text: &str) -> Result<PlanNode, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::Plan(format!("plan parse: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization")
    }
}

/// One aggregate bound to input column indices.
#[derive(Debug, Clone)]
pub struct BoundAgg {
    pub func: AggFunc,
    /// Input column; None for count(*).
    pub input: Option<usize>,
    /// For merging avg partials: (sum column, count column).
    pub avg_partial: Option<(usize, usize)>,
    pub input_type: Option<ValueType>,
    pub output: String,
}

/// Pipeline-breaker state id (index into the per-node breaker arrays).
pub type BreakerId = usize;

#[derive(Debug, Clone)]
pub enum Source {
    Scan { table: String, schema: Arc<Schema> },
    ExchangeRecv { operator_id: u32, schema: Arc<Schema>, layout: Arc<WireLayout> },
    DrainPreAgg { id: BreakerId, schema: Arc<Schema> },
    DrainFinalAgg { id: BreakerId, schema: Arc<Schema> },
}

#[derive(Debug, Clone)]
pub enum StepOp {
    Filter(BoundExpr),
    Map { exprs: Vec<BoundExpr>, schema: Arc<Schema> },
    Project { indices: Vec<usize>, schema: Arc<Schema> },
    Probe {
        table: BreakerId,
        probe_keys: Vec<usize>,
        schema: Arc<Schema>,
    },
}

#[derive(Debug, Clone)]
pub enum Sink {
    ExchangeSend {
        operator_id: u32,
        kind: ExchangeKind,
        layout: Arc<WireLayout>,
        schema: Arc<Schema>,
    },
    BuildTable { id: BreakerId, keys: Vec<usize> },
    PreAggregate {
        id: BreakerId,
        group: Vec<usize>,
        aggs: Arc<Vec<BoundAgg>>,
        schema: Arc<Schema>,
    },
    FinalAggregate {
        id: BreakerId,
        group: Vec<usize>,
        aggs: Arc<Vec<BoundAgg>>,
        from_partials: bool,
        schema: Arc<Schema>,
    },
    GatherSend { layout: Arc<WireLayout>, schema: Arc<Schema> },
    /// Node 0 result collection.
    Collect,
}

#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub source: Source,
    pub ops: Vec<StepOp>,
    pub sink: Sink,
    /// Pipeline runs only on this node (others just pass the barrier).
    pub only_node: Option<usize>,
}

/// A bound, lowered plan shared by every node.
#[derive(Debug, Clone)]
pub struct Program {
    pub pipelines: Vec<PipelineSpec>,
    /// Every exchange input a node must track: (operator id, schema).
    /// Includes the implicit gather.
    pub exchange_inputs: Vec<(u32, Arc<Schema>)>,
    pub build_table_count: usize,
    pub preagg_count: usize,
    pub finalagg_count: usize,
    pub result_schema: Arc<Schema>,
    /// Tables the program scans, with per-scan-pipeline association.
    pub scans: Vec<String>,
}

struct Lowering<'a> {
    tables: &'a TableSet,
    pipelines: Vec<PipelineSpec>,
    exchange_inputs: Vec<(u32, Arc<Schema>)>,
    next_operator: u32,
    build_tables: usize,
    preaggs: usize,
    finalaggs: usize,
    scans: Vec<String>,
}

/// Bind names and types, then lower to the pipeline program.
pub fn compile(plan: &PlanNode, tables: &TableSet) -> Result<Program, EngineError> {
    let mut lowering = Lowering {
        tables,
        pipelines: Vec::new(),
        exchange_inputs: Vec::new(),
        next_operator: 1,
        build_tables: 0,
        preaggs: 0,
        finalaggs: 0,
        scans: Vec::new(),
    };
    let (source, ops, schema) = lowering.recurse(plan)?;
    let layout = Arc::new(layout_for(&schema));
    lowering.pipelines.push(PipelineSpec {
        source,
        ops,
        sink: Sink::GatherSend { layout: layout.clone(), schema: schema.clone() },
        only_node: None,
    });
    lowering.pipelines.push(PipelineSpec {
        source: Source::ExchangeRecv {
            operator_id: GATHER_OPERATOR_ID,
            schema: schema.clone(),
            layout,
        },
        ops: Vec::new(),
        sink: Sink::Collect,
        only_node: Some(0),
    });
    lowering.exchange_inputs.push((GATHER_OPERATOR_ID, schema.clone()));
    Ok(Program {
        pipelines: lowering.pipelines,
        exchange_inputs: lowering.exchange_inputs,
        build_table_count: lowering.build_tables,
        preagg_count: lowering.preaggs,
        finalagg_count: lowering.finalaggs,
        result_schema: schema,
        scans: lowering.scans,
    })
}

impl<'a> Lowering<'a> {
    fn recurse(
        &mut self,
        node: &PlanNode,
    ) -> Result<(Source, Vec<StepOp>, Arc<Schema>), EngineError> {
        match node {
            PlanNode::Scan { table } => {
                let t = self.tables.get(table)?;
                self.scans.push(table.clone());
                Ok((
                    Source::Scan { table: table.clone(), schema: t.schema.clone() },
                    Vec::new(),
                    t.schema.clone(),
                ))
            }
            PlanNode::Filter { input, predicate } => {
                let (source, mut ops, schema) = self.recurse(input)?;
                let bound = bind_expr(predicate, &schema)?;
                if bound.value_type() != ValueType::Bool {
                    return Err(EngineError::Plan("filter predicate must be boolean".into()));
                }
                ops.push(StepOp::Filter(bound));
                Ok((source, ops, schema))
            }
            PlanNode::Map { input, exprs } => {
                let (source, mut ops, schema) = self.recurse(input)?;
                let mut bound = Vec::new();
                let mut columns = schema.columns().to_vec();
                for spec in exprs {
                    let e = bind_expr(&spec.expr, &schema)?;
                    let kind = e.value_type().column_kind().ok_or_else(|| {
                        EngineError::Plan(format!("map column {} is boolean", spec.output))
                    })?;
                    columns.push((spec.output.clone(), ColumnType { kind, nullable: e.nullable() }));
                    bound.push(e);
                }
                let out = Arc::new(Schema::new(columns).map_err(|e| EngineError::Plan(e.to_string()))?);
                ops.push(StepOp::Map { exprs: bound, schema: out.clone() });
                Ok((source, ops, out))
            }
            PlanNode::Project { input, columns } => {
                let (source, mut ops, schema) = self.recurse(input)?;
                let names: Vec<&str> = columns.iter().map(String::as_str).collect();
                let (pruned, indices) =
                    schema.prune(&names).map_err(|e| EngineError::Plan(e.to_string()))?;
                let out = Arc::new(pruned);
                ops.push(StepOp::Project { indices, schema: out.clone() });
                Ok((source, ops, out))
            }
            PlanNode::HashJoin { build, probe, build_keys, probe_keys } => {
                if build_keys.len() != probe_keys.len() || build_keys.is_empty() {
                    return Err(EngineError::Plan("join key lists must match and be non-empty".into()));
                }
                let (bsource, bops, bschema) = self.recurse(build)?;
                let bkeys = resolve_columns(&bschema, build_keys)?;
                let id = self.build_tables;
                self.build_tables += 1;
                self.pipelines.push(PipelineSpec {
                    source: bsource,
                    ops: bops,
                    sink: Sink::BuildTable { id, keys: bkeys.clone() },
                    only_node: None,
                });
                let (psource, mut pops, pschema) = self.recurse(probe)?;
                let pkeys = resolve_columns(&pschema, probe_keys)?;
                for (b, p) in bkeys.iter().zip(&pkeys) {
                    let bt = ValueType::of_column(bschema.column(*b).1.kind);
                    let pt = ValueType::of_column(pschema.column(*p).1.kind);
                    let compatible = match (bt, pt) {
                        (ValueType::Dec { .. }, ValueType::Dec { .. }) => bt == pt,
                        _ => bt == pt,
                    };
                    if !compatible {
                        return Err(EngineError::Plan(format!(
                            "join key type mismatch: {bt:?} vs {pt:?}"
                        )));
                    }
                }
                // output: probe columns then build columns
                let mut columns = pschema.columns().to_vec();
                columns.extend(bschema.columns().iter().cloned());
                let out = Arc::new(
                    Schema::new(columns)
                        .map_err(|e| EngineError::Plan(format!("join output: {e}")))?,
                );
                pops.push(StepOp::Probe { table: id, probe_keys: pkeys, schema: out.clone() });
                Ok((psource, pops, out))
            }
            PlanNode::PreAggregate { input, group_by, aggs } => {
                let (source, ops, schema) = self.recurse(input)?;
                let group = resolve_columns(&schema, group_by)?;
                let bound = bind_aggs(aggs, &schema, AggPosition::Partial)?;
                let out = Arc::new(partial_schema(&schema, &group, &bound)?);
                let id = self.preaggs;
                self.preaggs += 1;
                self.pipelines.push(PipelineSpec {
                    source,
                    ops,
                    sink: Sink::PreAggregate {
                        id,
                        group,
                        aggs: Arc::new(bound),
                        schema: out.clone(),
                    },
                    only_node: None,
                });
                Ok((Source::DrainPreAgg { id, schema: out.clone() }, Vec::new(), out))
            }
            PlanNode::Aggregate { input, group_by, aggs, from_partials } => {
                let (source, ops, schema) = self.recurse(input)?;
                let group = resolve_columns(&schema, group_by)?;
                let position = if *from_partials { AggPosition::Merge } else { AggPosition::Direct };
                let bound = bind_aggs(aggs, &schema, position)?;
                let out = Arc::new(final_schema(&schema, &group, &bound)?);
                let id = self.finalaggs;
                self.finalaggs += 1;
                self.pipelines.push(PipelineSpec {
                    source,
                    ops,
                    sink: Sink::FinalAggregate {
                        id,
                        group,
                        aggs: Arc::new(bound),
                        from_partials: *from_partials,
                        schema: out.clone(),
                    },
                    only_node: None,
                });
                Ok((Source::DrainFinalAgg { id, schema: out.clone() }, Vec::new(), out))
            }
            PlanNode::Exchange { input, kind } => {
                let (source, ops, schema) = self.recurse(input)?;
                let operator_id = self.next_operator;
                if operator_id >= MAX_PLAN_OPERATOR_ID {
                    return Err(EngineError::Plan("too many exchange operators".into()));
                }
                self.next_operator += 1;
                let bound_kind = match kind {
                    ExchangeSpec::Hash { keys } => {
                        ExchangeKind::HashPartition { key_columns: resolve_columns(&schema, keys)? }
                    }
                    ExchangeSpec::Broadcast => ExchangeKind::Broadcast,
                };
                let layout = Arc::new(layout_for(&schema));
                self.pipelines.push(PipelineSpec {
                    source,
                    ops,
                    sink: Sink::ExchangeSend {
                        operator_id,
                        kind: bound_kind,
                        layout: layout.clone(),
                        schema: schema.clone(),
                    },
                    only_node: None,
                });
                self.exchange_inputs.push((operator_id, schema.clone()));
                Ok((
                    Source::ExchangeRecv { operator_id, schema: schema.clone(), layout },
                    Vec::new(),
                    schema,
                ))
            }
        }
    }
}

fn resolve_columns(schema: &Schema, names: &[String]) -> Result<Vec<usize>, EngineError> {
    names
        .iter()
        .map(|n| {
            schema
                .index_of(n)
                .ok_or_else(|| EngineError::Plan(format!("unknown column {n}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AggPosition {
    /// Pre-aggregation: emits partial states, must be decomposable.
    Partial,
    /// Final aggregate over partial columns.
    Merge,
    /// Final aggregate over raw rows.
    Direct,
}

fn bind_aggs(
    specs: &[AggSpec],
    schema: &Schema,
    position: AggPosition,
) -> Result<Vec<BoundAgg>, EngineError> {
    let mut out = Vec::new();
    for spec in specs {
        if spec.func == AggFunc::CountDistinct && position != AggPosition::Direct {
            return Err(EngineError::Plan(format!(
                "{}: count_distinct is not decomposable and cannot be pre-aggregated or merged",
                spec.output
            )));
        }
        let agg = match (position, spec.func) {
            (AggPosition::Merge, AggFunc::Avg) => {
                let sum = schema.index_of(&format!("{}__sum", spec.input)).ok_or_else(|| {
                    EngineError::Plan(format!("missing partial column {}__sum", spec.input))
                })?;
                let cnt = schema.index_of(&format!("{}__cnt", spec.input)).ok_or_else(|| {
                    EngineError::Plan(format!("missing partial column {}__cnt", spec.input))
                })?;
                BoundAgg {
                    func: AggFunc::Avg,
                    input: None,
                    avg_partial: Some((sum, cnt)),
                    input_type: Some(ValueType::of_column(schema.column(sum).1.kind)),
                    output: spec.output.clone(),
                }
            }
            (_, func) => {
                let input = if spec.input == "*" {
                    if func != AggFunc::Count {
                        return Err(EngineError::Plan(format!(
                            "{}: only count may aggregate \"*\"",
                            spec.output
                        )));
                    }
                    if position == AggPosition::Merge {
                        return Err(EngineError::Plan(format!(
                            "{}: merging aggregate must name its partial column, not \"*\"",
                            spec.output
                        )));
                    }
                    None
                } else {
                    Some(schema.index_of(&spec.input).ok_or_else(|| {
                        EngineError::Plan(format!("unknown column {}", spec.input))
                    })?)
                };
                let input_type =
                    input.map(|idx| ValueType::of_column(schema.column(idx).1.kind));
                if let (Some(t), AggFunc::Sum | AggFunc::Avg) = (input_type, func) {
                    if !matches!(t, ValueType::Int | ValueType::Dec { .. }) {
                        return Err(EngineError::Plan(format!(
                            "{}: sum/avg needs a numeric column",
                            spec.output
                        )));
                    }
                }
                BoundAgg {
                    func,
                    input,
                    avg_partial: None,
                    input_type,
                    output: spec.output.clone(),
                }
            }
        };
        out.push(agg);
    }
    Ok(out)
}

fn group_columns(schema: &Schema, group: &[usize]) -> Vec<(String, ColumnType)> {
    group
        .iter()
        .map(|&idx| {
            let (name, ty) = schema.column(idx);
            (name.to_string(), ty)
        })
        .collect()
}

/// Output schema of a pre-aggregation: group columns then partial columns.
fn partial_schema(
    schema: &Schema,
    group: &[usize],
    aggs: &[BoundAgg],
) -> Result<Schema, EngineError> {
    let mut columns = group_columns(schema, group);
    for agg in aggs {
        let input_ty = agg.input.map(|idx| schema.column(idx).1);
        match agg.func {
            AggFunc::Sum => {
                let ty = input_ty.expect("sum input");
                columns.push((agg.output.clone(), ColumnType { kind: ty.kind, nullable: true }));
            }
            AggFunc::Count => {
                columns.push((agg.output.clone(), ColumnType::not_null(ColumnKind::Int64)));
            }
            AggFunc::Min | AggFunc::Max => {
                let ty = input_ty.expect("min/max input");
                columns.push((agg.output.clone(), ColumnType { kind: ty.kind, nullable: true }));
            }
            AggFunc::Avg => {
                let ty = input_ty.expect("avg input");
                columns.push((
                    format!("{}__sum", agg.output),
                    ColumnType { kind: ty.kind, nullable: true },
                ));
                columns.push((
                    format!("{}__cnt", agg.output),
                    ColumnType::not_null(ColumnKind::Int64),
                ));
            }
            AggFunc::CountDistinct => unreachable!("rejected during binding"),
        }
    }
    Schema::new(columns).map_err(|e| EngineError::Plan(e.to_string()))
}

/// Output schema of a final aggregate: group columns then one column per
/// aggregate.
fn final_schema(
    schema: &Schema,
    group: &[usize],
    aggs: &[BoundAgg],
) -> Result<Schema, EngineError> {
    let mut columns = group_columns(schema, group);
    for agg in aggs {
        let kind = match agg.func {
            AggFunc::Count | AggFunc::CountDistinct => ColumnKind::Int64,
            AggFunc::Avg => match agg.input_type.expect("avg type") {
                ValueType::Int => ColumnKind::Int64,
                ValueType::Dec { scale } => ColumnKind::Decimal64 { scale },
                other => {
                    return Err(EngineError::Plan(format!("avg over non-numeric {other:?}")))
                }
            },
            AggFunc::Sum | AggFunc::Min | AggFunc::Max => {
                let idx = agg
                    .input
                    .or(agg.avg_partial.map(|(s, _)| s))
                    .expect("agg input column");
                schema.column(idx).1.kind
            }
        };
        let nullable = !matches!(agg.func, AggFunc::Count | AggFunc::CountDistinct);
        columns.push((agg.output.clone(), ColumnType { kind, nullable }));
    }
    Schema::new(columns).map_err(|e| EngineError::Plan(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::expr::Expr;
    use crate::engine::table::parse_tbl;

    fn tiny_tables() -> TableSet {
        let part_schema = Arc::new(
            Schema::new(vec![
                ("p_partkey".into(), ColumnType::not_null(ColumnKind::Int64)),
                ("p_brand".into(), ColumnType::not_null(ColumnKind::Varchar)),
            ])
            .unwrap(),
        );
        let li_schema = Arc::new(
            Schema::new(vec![
                ("l_partkey".into(), ColumnType::not_null(ColumnKind::Int64)),
                ("l_quantity".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
            ])
            .unwrap(),
        );
        let mut tables = TableSet::new();
        tables.insert(parse_tbl("part", part_schema, "1|Brand#13|\n2|Brand#42|\n").unwrap());
        tables.insert(
            parse_tbl("lineitem", li_schema, "1|5.00|\n2|7.50|\n1|1.25|\n").unwrap(),
        );
        tables
    }

    fn join_plan() -> PlanNode {
        PlanNode::HashJoin {
            build: Box::new(PlanNode::Exchange {
                input: Box::new(PlanNode::Scan { table: "part".into() }),
                kind: ExchangeSpec::Broadcast,
            }),
            probe: Box::new(PlanNode::Scan { table: "lineitem".into() }),
            build_keys: vec!["p_partkey".into()],
            probe_keys: vec!["l_partkey".into()],
        }
    }

    #[test]
    fn lowering_cuts_at_breakers_and_exchanges() {
        let tables = tiny_tables();
        let program = compile(&join_plan(), &tables).unwrap();
        // pipelines: part scan -> exchange send; exchange recv -> build;
        // lineitem scan -> probe -> gather send; gather recv -> collect
        assert_eq!(program.pipelines.len(), 4);
        assert!(matches!(program.pipelines[0].sink, Sink::ExchangeSend { .. }));
        assert!(matches!(program.pipelines[1].sink, Sink::BuildTable { .. }));
        assert!(matches!(program.pipelines[2].sink, Sink::GatherSend { .. }));
        assert!(matches!(program.pipelines[3].sink, Sink::Collect));
        assert_eq!(program.pipelines[3].only_node, Some(0));
        assert_eq!(program.build_table_count, 1);
        // join output: probe columns then build columns
        let cols: Vec<&str> = program
            .result_schema
            .columns()
            .iter()
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(cols, vec!["l_partkey", "l_quantity", "p_partkey", "p_brand"]);
        // the gather plus the explicit exchange
        assert_eq!(program.exchange_inputs.len(), 2);
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = PlanNode::Filter {
            input: Box::new(PlanNode::Scan { table: "lineitem".into() }),
            predicate: Expr::Cmp(
                crate::engine::expr::CmpOp::Lt,
                Box::new(Expr::Col("l_quantity".into())),
                Box::new(Expr::Dec("3.0".into())),
            ),
        };
        let text = plan.to_json();
        let parsed = PlanNode::from_json(&text).unwrap();
        assert_eq!(parsed, plan);
    }

    #[test]
    fn count_distinct_rejected_in_preaggregation() {
        let tables = tiny_tables();
        let plan = PlanNode::PreAggregate {
            input: Box::new(PlanNode::Scan { table: "lineitem".into() }),
            group_by: vec!["l_partkey".into()],
            aggs: vec![AggSpec {
                func: AggFunc::CountDistinct,
                input: "l_quantity".into(),
                output: "d".into(),
            }],
        };
        let err = compile(&plan, &tables).unwrap_err();
        assert!(matches!(err, EngineError::Plan(msg) if msg.contains("decomposable")));
    }

    #[test]
    fn merge_aggregate_requires_partial_columns() {
        let tables = tiny_tables();
        let plan = PlanNode::Aggregate {
            input: Box::new(PlanNode::Scan { table: "lineitem".into() }),
            group_by: vec!["l_partkey".into()],
            aggs: vec![AggSpec { func: AggFunc::Avg, input: "nope".into(), output: "a".into() }],
            from_partials: true,
        };
        assert!(compile(&plan, &tables).is_err());
    }

    #[test]
    fn unknown_table_and_column_errors() {
        let tables = tiny_tables();
        assert!(compile(&PlanNode::Scan { table: "nope".into() }, &tables).is_err());
        let plan = PlanNode::Project {
            input: Box::new(PlanNode::Scan { table: "part".into() }),
            columns: vec!["ghost".into()],
        };
        assert!(compile(&plan, &tables).is_err());
    }

    #[test]
    fn duplicate_join_output_names_rejected() {
        let tables = tiny_tables();
        let plan = PlanNode::HashJoin {
            build: Box::new(PlanNode::Scan { table: "part".into() }),
            probe: Box::new(PlanNode::Scan { table: "part".into() }),
            build_keys: vec!["p_partkey".into()],
            probe_keys: vec!["p_partkey".into()],
        };
        assert!(compile(&plan, &tables).is_err());
    }

    #[test]
    fn exchange_partial_flow_schemas() {
        let tables = tiny_tables();
        let plan = PlanNode::Aggregate {
            input: Box::new(PlanNode::Exchange {
                input: Box::new(PlanNode::PreAggregate {
                    input: Box::new(PlanNode::Scan { table: "lineitem".into() }),
                    group_by: vec!["l_partkey".into()],
                    aggs: vec![
                        AggSpec { func: AggFunc::Sum, input: "l_quantity".into(), output: "s".into() },
                        AggSpec { func: AggFunc::Avg, input: "l_quantity".into(), output: "a".into() },
                        AggSpec { func: AggFunc::Count, input: "*".into(), output: "c".into() },
                    ],
                }),
                kind: ExchangeSpec::Hash { keys: vec!["l_partkey".into()] },
            }),
            group_by: vec!["l_partkey".into()],
            aggs: vec![
                AggSpec { func: AggFunc::Sum, input: "s".into(), output: "s".into() },
                AggSpec { func: AggFunc::Avg, input: "a".into(), output: "a".into() },
                AggSpec { func: AggFunc::Count, input: "c".into(), output: "c".into() },
            ],
            from_partials: true,
        };
        let program = compile(&plan, &tables).unwrap();
        let names: Vec<&str> = program
            .result_schema
            .columns()
            .iter()
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(names, vec!["l_partkey", "s", "a", "c"]);
        // partial schema carried over the exchange: avg splits into two columns
        let (_, partial) = &program.exchange_inputs[0];
        let partial_names: Vec<&str> =
            partial.columns().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(partial_names, vec!["l_partkey", "s", "a__sum", "a__cnt", "c"]);
    }
}
