//! Deterministic micro-scale test data in dbgen-style schemas.
//!
//! Four tables: `part`, `orders`, `lineitem` (TPC-H-flavored columns at tiny
//! row counts) and `events` (exercises nullable fixed-size and varchar
//! columns). Join keys can be drawn uniformly or Zipf-skewed; everything is
//! reproducible from the seed.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ColumnKind, ColumnType, Datum, Schema, TupleBatch};

use super::table::{Table, TableSet};

#[derive(Debug, Clone)]
pub struct DataSpec {
    pub parts: usize,
    pub orders: usize,
    pub lineitems: usize,
    pub events: usize,
    /// Zipf exponent for lineitem foreign keys; 0 draws uniformly.
    pub zipf_z: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { parts: 2_000, orders: 5_000, lineitems: 20_000, events: 3_000, zipf_z: 0.0, seed: 7 }
    }
}

pub fn part_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ("p_partkey".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("p_brand".into(), ColumnType::not_null(ColumnKind::Varchar)),
            ("p_container".into(), ColumnType::not_null(ColumnKind::Varchar)),
            ("p_retailprice".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
        ])
        .unwrap(),
    )
}

pub fn orders_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ("o_orderkey".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("o_custkey".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("o_orderdate".into(), ColumnType::not_null(ColumnKind::Date32)),
            ("o_totalprice".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
        ])
        .unwrap(),
    )
}

pub fn lineitem_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ("l_orderkey".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("l_partkey".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("l_quantity".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
            ("l_extendedprice".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
            ("l_shipdate".into(), ColumnType::not_null(ColumnKind::Date32)),
            ("l_returnflag".into(), ColumnType::not_null(ColumnKind::Varchar)),
            ("l_linestatus".into(), ColumnType::not_null(ColumnKind::Varchar)),
        ])
        .unwrap(),
    )
}

pub fn events_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ("e_id".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("e_kind".into(), ColumnType::not_null(ColumnKind::Varchar)),
            ("e_score".into(), ColumnType::nullable(ColumnKind::Decimal64 { scale: 2 })),
            ("e_day".into(), ColumnType::nullable(ColumnKind::Date32)),
            ("e_note".into(), ColumnType::nullable(ColumnKind::Varchar)),
        ])
        .unwrap(),
    )
}

/// Draw keys 1..=domain with probability ∝ 1/rank^z via inverse CDF.
pub struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(domain: usize, z: f64) -> Self {
        let mut cumulative = Vec::with_capacity(domain);
        let mut total = 0.0;
        for k in 1..=domain {
            total += 1.0 / (k as f64).powf(z);
            cumulative.push(total);
        }
        for c in &mut cumulative {
            *c /= total;
        }
        ZipfSampler { cumulative }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).expect("finite"))
        {
            Ok(idx) | Err(idx) => idx.min(self.cumulative.len() - 1) + 1,
        }
    }
}

const BRANDS: [&str; 5] = ["Brand#11", "Brand#13", "Brand#23", "Brand#42", "Brand#55"];
const CONTAINERS: [&str; 4] = ["SM CASE", "MED BOX", "LG DRUM", "WRAP PKG"];
const FLAGS: [&str; 3] = ["A", "N", "R"];
const STATUS: [&str; 2] = ["O", "F"];
const KINDS: [&str; 4] = ["click", "view", "buy", "hold"];

pub fn generate(spec: &DataSpec) -> TableSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tables = TableSet::new();

    let mut part_cols: Vec<Vec<Datum>> = vec![Vec::new(); 4];
    for k in 1..=spec.parts as i64 {
        part_cols[0].push(Datum::Int(k));
        part_cols[1].push(Datum::Str(BRANDS[rng.gen_range(0..BRANDS.len())].into()));
        part_cols[2].push(Datum::Str(CONTAINERS[rng.gen_range(0..CONTAINERS.len())].into()));
        part_cols[3].push(Datum::Dec(rng.gen_range(100..100_000)));
    }
    tables.insert(Table::new(
        "part",
        part_schema(),
        TupleBatch::from_columns(part_schema(), part_cols).unwrap(),
    ));

    let date_range = Uniform::new(8_000, 12_000); // mid-1991 .. late-2002
    let mut orders_cols: Vec<Vec<Datum>> = vec![Vec::new(); 4];
    for k in 1..=spec.orders as i64 {
        orders_cols[0].push(Datum::Int(k));
        orders_cols[1].push(Datum::Int(rng.gen_range(1..=(spec.orders as i64 / 10).max(1))));
        orders_cols[2].push(Datum::Date(date_range.sample(&mut rng)));
        orders_cols[3].push(Datum::Dec(rng.gen_range(1_000..10_000_000)));
    }
    tables.insert(Table::new(
        "orders",
        orders_schema(),
        TupleBatch::from_columns(orders_schema(), orders_cols).unwrap(),
    ));

    let part_sampler =
        (spec.zipf_z > 0.0).then(|| ZipfSampler::new(spec.parts.max(1), spec.zipf_z));
    let order_sampler =
        (spec.zipf_z > 0.0).then(|| ZipfSampler::new(spec.orders.max(1), spec.zipf_z));
    let mut li_cols: Vec<Vec<Datum>> = vec![Vec::new(); 7];
    for _ in 0..spec.lineitems {
        let orderkey = match &order_sampler {
            Some(s) => s.sample(&mut rng) as i64,
            None => rng.gen_range(1..=spec.orders.max(1) as i64),
        };
        let partkey = match &part_sampler {
            Some(s) => s.sample(&mut rng) as i64,
            None => rng.gen_range(1..=spec.parts.max(1) as i64),
        };
        li_cols[0].push(Datum::Int(orderkey));
        li_cols[1].push(Datum::Int(partkey));
        li_cols[2].push(Datum::Dec(rng.gen_range(100..5_000)));
        li_cols[3].push(Datum::Dec(rng.gen_range(1_000..1_000_000)));
        li_cols[4].push(Datum::Date(date_range.sample(&mut rng)));
        li_cols[5].push(Datum::Str(FLAGS[rng.gen_range(0..FLAGS.len())].into()));
        li_cols[6].push(Datum::Str(STATUS[rng.gen_range(0..STATUS.len())].into()));
    }
    tables.insert(Table::new(
        "lineitem",
        lineitem_schema(),
        TupleBatch::from_columns(lineitem_schema(), li_cols).unwrap(),
    ));

    let mut ev_cols: Vec<Vec<Datum>> = vec![Vec::new(); 5];
    for k in 1..=spec.events as i64 {
        ev_cols[0].push(Datum::Int(k));
        ev_cols[1].push(Datum::Str(KINDS[rng.gen_range(0..KINDS.len())].into()));
        ev_cols[2].push(if rng.gen_bool(0.25) {
            Datum::Null
        } else {
            Datum::Dec(rng.gen_range(-5_000..5_000))
        });
        ev_cols[3].push(if rng.gen_bool(0.1) {
            Datum::Null
        } else {
            Datum::Date(date_range.sample(&mut rng))
        });
        ev_cols[4].push(if rng.gen_bool(0.4) {
            Datum::Null
        } else {
            Datum::Str(format!("note-{}", rng.gen_range(0..50)))
        });
    }
    tables.insert(Table::new(
        "events",
        events_schema(),
        TupleBatch::from_columns(events_schema(), ev_cols).unwrap(),
    ));

    tables
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = DataSpec { parts: 50, orders: 100, lineitems: 200, events: 30, ..DataSpec::default() };
        let a = generate(&spec);
        let b = generate(&spec);
        for name in ["part", "orders", "lineitem", "events"] {
            assert_eq!(a.get(name).unwrap().batch, b.get(name).unwrap().batch, "{name}");
        }
        assert_eq!(a.get("lineitem").unwrap().row_count(), 200);
    }

    #[test]
    fn zipf_sampler_prefers_low_ranks() {
        let sampler = ZipfSampler::new(1000, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = 0;
        let total = 10_000;
        for _ in 0..total {
            if sampler.sample(&mut rng) <= 10 {
                head += 1;
            }
        }
        // top-10 of 1000 ranks carries far more than 1% of the mass
        assert!(head as f64 / total as f64 > 0.3, "head share {head}");
    }

    #[test]
    fn events_contain_nulls() {
        let spec = DataSpec { events: 500, ..DataSpec::default() };
        let tables = generate(&spec);
        let events = tables.get("events").unwrap();
        let nulls = events.batch.columns[2].iter().filter(|d| d.is_null()).count();
        assert!(nulls > 0);
    }
}
