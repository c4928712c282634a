//! Aggregation states and join hash tables.
//!
//! Build-side tables are filled with sharded inserts while the build
//! pipeline runs, then frozen into immutable shards for lock-free probing.
//! Pre-aggregation tables are worker-private. All aggregate arithmetic is
//! exact (i64 with overflow checks); avg is sum plus count with a truncating
//! final division.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use crate::codec::Datum;

use super::plan::{AggFunc, BoundAgg};
use super::EngineError;

pub const JOIN_SHARDS: usize = 64;

fn shard_of(key: &[Datum]) -> usize {
    let mut hasher = DefaultHasher::new();
    key.hash(&mut hasher);
    (hasher.finish() as usize) % JOIN_SHARDS
}

/// Join build table: insert phase behind shard locks, probe phase frozen.
#[derive(Debug)]
pub struct BuildTable {
    shards: Vec<Mutex<HashMap<Vec<Datum>, Vec<Vec<Datum>>>>>,
    frozen: Mutex<Option<Vec<HashMap<Vec<Datum>, Vec<Vec<Datum>>>>>>,
}

impl BuildTable {
    pub fn new() -> Self {
        BuildTable {
            shards: (0..JOIN_SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            frozen: Mutex::new(None),
        }
    }

    pub fn insert(&self, key: Vec<Datum>, row: Vec<Datum>) {
        let shard = shard_of(&key);
        self.shards[shard].lock().unwrap().entry(key).or_default().push(row);
    }

    /// Seal the table; called once by the build pipeline's barrier leader.
    pub fn freeze(&self) {
        let shards: Vec<_> = self
            .shards
            .iter()
            .map(|s| std::mem::take(&mut *s.lock().unwrap()))
            .collect();
        *self.frozen.lock().unwrap() = Some(shards);
    }

    /// Immutable view for probing. Panics if the build phase has not sealed
    /// the table yet; pipeline ordering guarantees it has.
    pub fn probe_view(&self) -> FrozenTable {
        let guard = self.frozen.lock().unwrap();
        FrozenTable {
            shards: guard.as_ref().expect("probe before freeze").clone(),
        }
    }
}

impl Default for BuildTable {
    fn default() -> Self {
        Self::new()
    }
}

/// Cloned-out immutable shards. Cloning the maps once per worker keeps the
/// probe loop free of locks; build sides are small by broadcast-threshold
/// design.
#[derive(Debug, Clone)]
pub struct FrozenTable {
    shards: Vec<HashMap<Vec<Datum>, Vec<Vec<Datum>>>>,
}

impl FrozenTable {
    pub fn lookup(&self, key: &[Datum]) -> Option<&[Vec<Datum>]> {
        self.shards[shard_of(key)].get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Running state of one aggregate for one group.
#[derive(Debug, Clone)]
pub enum AggState {
    Sum(Option<i64>),
    Count(i64),
    Min(Option<Datum>),
    Max(Option<Datum>),
    Avg { sum: i64, count: i64 },
    Distinct(HashSet<Datum>),
}

impl AggState {
    pub fn new(func: AggFunc) -> AggState {
        match func {
            AggFunc::Sum => AggState::Sum(None),
            AggFunc::Count => AggState::Count(0),
            AggFunc::Min => AggState::Min(None),
            AggFunc::Max => AggState::Max(None),
            AggFunc::Avg => AggState::Avg { sum: 0, count: 0 },
            AggFunc::CountDistinct => AggState::Distinct(HashSet::new()),
        }
    }

    fn numeric(datum: &Datum) -> Result<i64, EngineError> {
        match datum {
            Datum::Int(v) | Datum::Dec(v) => Ok(*v),
            other => Err(EngineError::Internal(format!("non-numeric aggregate input {other}"))),
        }
    }

    /// Fold one raw input row's value into the state.
    pub fn update(&mut self, value: Option<&Datum>) -> Result<(), EngineError> {
        let overflow = || EngineError::Overflow("aggregate sum".into());
        match self {
            AggState::Count(n) => {
                match value {
                    Some(Datum::Null) => {}
                    _ => *n += 1,
                }
                Ok(())
            }
            AggState::Sum(acc) => {
                let v = value.expect("sum input");
                if v.is_null() {
                    return Ok(());
                }
                let add = Self::numeric(v)?;
                *acc = Some(acc.unwrap_or(0).checked_add(add).ok_or_else(overflow)?);
                Ok(())
            }
            AggState::Min(acc) => {
                let v = value.expect("min input");
                if !v.is_null() && acc.as_ref().is_none_or(|cur| v < cur) {
                    *acc = Some(v.clone());
                }
                Ok(())
            }
            AggState::Max(acc) => {
                let v = value.expect("max input");
                if !v.is_null() && acc.as_ref().is_none_or(|cur| v > cur) {
                    *acc = Some(v.clone());
                }
                Ok(())
            }
            AggState::Avg { sum, count } => {
                let v = value.expect("avg input");
                if v.is_null() {
                    return Ok(());
                }
                *sum = sum.checked_add(Self::numeric(v)?).ok_or_else(overflow)?;
                *count += 1;
                Ok(())
            }
            AggState::Distinct(set) => {
                let v = value.expect("count_distinct input");
                if !v.is_null() {
                    set.insert(v.clone());
                }
                Ok(())
            }
        }
    }

    /// Fold a partial value (or avg partial pair) into the state.
    pub fn merge(&mut self, partial: &[&Datum]) -> Result<(), EngineError> {
        let overflow = || EngineError::Overflow("aggregate merge".into());
        match self {
            AggState::Sum(acc) => {
                let v = partial[0];
                if !v.is_null() {
                    *acc = Some(
                        acc.unwrap_or(0)
                            .checked_add(Self::numeric(v)?)
                            .ok_or_else(overflow)?,
                    );
                }
                Ok(())
            }
            AggState::Count(n) => {
                let v = partial[0];
                if !v.is_null() {
                    *n = n.checked_add(Self::numeric(v)?).ok_or_else(overflow)?;
                }
                Ok(())
            }
            AggState::Min(acc) => {
                let v = partial[0];
                if !v.is_null() && acc.as_ref().is_none_or(|cur| *v < *cur) {
                    *acc = Some(v.clone());
                }
                Ok(())
            }
            AggState::Max(acc) => {
                let v = partial[0];
                if !v.is_null() && acc.as_ref().is_none_or(|cur| *v > *cur) {
                    *acc = Some(v.clone());
                }
                Ok(())
            }
            AggState::Avg { sum, count } => {
                let (s, c) = (partial[0], partial[1]);
                if !s.is_null() {
                    *sum = sum.checked_add(Self::numeric(s)?).ok_or_else(overflow)?;
                }
                *count = count.checked_add(Self::numeric(c)?).ok_or_else(overflow)?;
                Ok(())
            }
            AggState::Distinct(_) => {
                Err(EngineError::Internal("count_distinct cannot merge partials".into()))
            }
        }
    }

    /// Partial columns this state emits (pre-aggregation output).
    pub fn emit_partial(&self, agg: &BoundAgg, out: &mut Vec<Datum>) {
        match self {
            AggState::Sum(acc) => out.push(acc.map_or(Datum::Null, wrap_numeric(agg))),
            AggState::Count(n) => out.push(Datum::Int(*n)),
            AggState::Min(acc) | AggState::Max(acc) => {
                out.push(acc.clone().unwrap_or(Datum::Null))
            }
            AggState::Avg { sum, count } => {
                if *count == 0 {
                    out.push(Datum::Null);
                } else {
                    out.push(wrap_numeric(agg)(*sum));
                }
                out.push(Datum::Int(*count));
            }
            AggState::Distinct(_) => unreachable!("rejected during binding"),
        }
    }

    /// Final value of this aggregate.
    pub fn finalize(&self, agg: &BoundAgg) -> Datum {
        match self {
            AggState::Sum(acc) => acc.map_or(Datum::Null, wrap_numeric(agg)),
            AggState::Count(n) => Datum::Int(*n),
            AggState::Min(acc) | AggState::Max(acc) => acc.clone().unwrap_or(Datum::Null),
            AggState::Avg { sum, count } => {
                if *count == 0 {
                    Datum::Null
                } else {
                    wrap_numeric(agg)(*sum / *count)
                }
            }
            AggState::Distinct(set) => Datum::Int(set.len() as i64),
        }
    }
}

/// Sum/avg results keep their input's representation: Dec stays Dec.
fn wrap_numeric(agg: &BoundAgg) -> impl Fn(i64) -> Datum {
    let is_dec = matches!(
        agg.input_type,
        Some(super::expr::ValueType::Dec { .. })
    );
    move |v| if is_dec { Datum::Dec(v) } else { Datum::Int(v) }
}

/// Grouped aggregation table: group key -> one state per aggregate.
#[derive(Debug, Default)]
pub struct GroupTable {
    pub groups: HashMap<Vec<Datum>, Vec<AggState>>,
}

impl GroupTable {
    pub fn new() -> Self {
        GroupTable { groups: HashMap::new() }
    }

    pub fn states_mut(&mut self, key: Vec<Datum>, aggs: &[BoundAgg]) -> &mut Vec<AggState> {
        self.groups
            .entry(key)
            .or_insert_with(|| aggs.iter().map(|a| AggState::new(a.func)).collect())
    }

    /// Emit one partial row per group: group key columns then partials.
    pub fn drain_partial_rows(&self, aggs: &[BoundAgg]) -> Vec<Vec<Datum>> {
        let mut rows = Vec::with_capacity(self.groups.len());
        for (key, states) in &self.groups {
            let mut row = key.clone();
            for (state, agg) in states.iter().zip(aggs) {
                state.emit_partial(agg, &mut row);
            }
            rows.push(row);
        }
        rows
    }

    /// Emit one final row per group.
    pub fn drain_final_rows(&self, aggs: &[BoundAgg]) -> Vec<Vec<Datum>> {
        let mut rows = Vec::with_capacity(self.groups.len());
        for (key, states) in &self.groups {
            let mut row = key.clone();
            for (state, agg) in states.iter().zip(aggs) {
                row.push(state.finalize(agg));
            }
            rows.push(row);
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::expr::ValueType;

    fn agg(func: AggFunc, ty: Option<ValueType>) -> BoundAgg {
        BoundAgg { func, input: Some(0), avg_partial: None, input_type: ty, output: "o".into() }
    }

    #[test]
    fn sum_skips_nulls_and_tracks_type() {
        let spec = agg(AggFunc::Sum, Some(ValueType::Dec { scale: 2 }));
        let mut state = AggState::new(AggFunc::Sum);
        state.update(Some(&Datum::Dec(150))).unwrap();
        state.update(Some(&Datum::Null)).unwrap();
        state.update(Some(&Datum::Dec(-50))).unwrap();
        assert_eq!(state.finalize(&spec), Datum::Dec(100));
    }

    #[test]
    fn count_star_counts_rows_count_col_skips_nulls() {
        let mut star = AggState::new(AggFunc::Count);
        star.update(None).unwrap();
        star.update(None).unwrap();
        let mut col = AggState::new(AggFunc::Count);
        col.update(Some(&Datum::Int(1))).unwrap();
        col.update(Some(&Datum::Null)).unwrap();
        let spec = agg(AggFunc::Count, None);
        assert_eq!(star.finalize(&spec), Datum::Int(2));
        assert_eq!(col.finalize(&spec), Datum::Int(1));
    }

    #[test]
    fn avg_truncates_exactly() {
        let spec = agg(AggFunc::Avg, Some(ValueType::Int));
        let mut state = AggState::new(AggFunc::Avg);
        for v in [1, 2, 2] {
            state.update(Some(&Datum::Int(v))).unwrap();
        }
        assert_eq!(state.finalize(&spec), Datum::Int(1)); // 5/3 truncated
    }

    #[test]
    fn partial_then_merge_equals_direct() {
        let spec = agg(AggFunc::Avg, Some(ValueType::Dec { scale: 2 }));
        // two workers build partials over disjoint rows
        let mut w1 = AggState::new(AggFunc::Avg);
        let mut w2 = AggState::new(AggFunc::Avg);
        let values = [100, 200, 300, 400, 500];
        for (i, v) in values.iter().enumerate() {
            let target = if i % 2 == 0 { &mut w1 } else { &mut w2 };
            target.update(Some(&Datum::Dec(*v))).unwrap();
        }
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        w1.emit_partial(&spec, &mut p1);
        w2.emit_partial(&spec, &mut p2);
        let mut merged = AggState::new(AggFunc::Avg);
        merged.merge(&[&p1[0], &p1[1]]).unwrap();
        merged.merge(&[&p2[0], &p2[1]]).unwrap();
        let mut direct = AggState::new(AggFunc::Avg);
        for v in values {
            direct.update(Some(&Datum::Dec(v))).unwrap();
        }
        assert_eq!(merged.finalize(&spec), direct.finalize(&spec));
    }

    #[test]
    fn min_max_on_strings() {
        let spec = agg(AggFunc::Min, Some(ValueType::Str));
        let mut lo = AggState::new(AggFunc::Min);
        let mut hi = AggState::new(AggFunc::Max);
        for s in ["pear", "apple", "quince"] {
            lo.update(Some(&Datum::Str(s.into()))).unwrap();
            hi.update(Some(&Datum::Str(s.into()))).unwrap();
        }
        assert_eq!(lo.finalize(&spec), Datum::Str("apple".into()));
        assert_eq!(hi.finalize(&spec), Datum::Str("quince".into()));
    }

    #[test]
    fn distinct_counts_unique_values() {
        let spec = agg(AggFunc::CountDistinct, Some(ValueType::Int));
        let mut state = AggState::new(AggFunc::CountDistinct);
        for v in [1, 2, 2, 3, 1] {
            state.update(Some(&Datum::Int(v))).unwrap();
        }
        assert_eq!(state.finalize(&spec), Datum::Int(3));
    }

    #[test]
    fn build_table_freeze_and_probe() {
        let table = BuildTable::new();
        table.insert(vec![Datum::Int(1)], vec![Datum::Int(1), Datum::Str("a".into())]);
        table.insert(vec![Datum::Int(1)], vec![Datum::Int(1), Datum::Str("b".into())]);
        table.insert(vec![Datum::Int(2)], vec![Datum::Int(2), Datum::Str("c".into())]);
        table.freeze();
        let view = table.probe_view();
        assert_eq!(view.lookup(&[Datum::Int(1)]).unwrap().len(), 2);
        assert_eq!(view.lookup(&[Datum::Int(2)]).unwrap().len(), 1);
        assert!(view.lookup(&[Datum::Int(9)]).is_none());
        assert_eq!(view.len(), 2);
    }
}
