//! Named tables, dbgen-style delimited text loading, and chunk placement.
//!
//! Data files are '|'-delimited with a trailing '|' per line, as produced by
//! dbgen. A directory holds `<table>.tbl` plus `<table>.schema.json` (the
//! serialized schema). Chunks are assigned to nodes as generated: node `i`
//! of `n` owns the `i`-th contiguous slice of the file, with no initial
//! redistribution.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::codec::{ColumnKind, Datum, Schema, TupleBatch};

use super::expr::{parse_date, parse_decimal};
use super::EngineError;

/// Marker for a null field in delimited text (empty varchar stays a value).
pub const NULL_FIELD: &str = "\\N";

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub schema: Arc<Schema>,
    pub batch: TupleBatch,
}

impl Table {
    pub fn new(name: impl Into<String>, schema: Arc<Schema>, batch: TupleBatch) -> Self {
        Table { name: name.into(), schema, batch }
    }

    pub fn row_count(&self) -> usize {
        self.batch.row_count
    }

    /// Contiguous chunk of this table owned by `node` out of `n`.
    pub fn chunk(&self, node: usize, n: usize) -> TupleBatch {
        let rows = self.batch.row_count;
        let start = node * rows / n;
        let end = (node + 1) * rows / n;
        self.batch.slice(start..end)
    }
}

/// The tables a query can scan, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct TableSet {
    tables: BTreeMap<String, Table>,
}

impl TableSet {
    pub fn new() -> Self {
        TableSet::default()
    }

    pub fn insert(&mut self, table: Table) {
        self.tables.insert(table.name.clone(), table);
    }

    pub fn get(&self, name: &str) -> Result<&Table, EngineError> {
        self.tables
            .get(name)
            .ok_or_else(|| EngineError::Table(format!("unknown table {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// Load every `<name>.tbl` + `<name>.schema.json` pair in a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, EngineError> {
        let mut set = TableSet::new();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| EngineError::Table(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| EngineError::Table(e.to_string()))?;
            let path = entry.path();
            if path.extension().is_none_or(|e| e != "tbl") {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| EngineError::Table(format!("bad table file {}", path.display())))?
                .to_string();
            let schema_path = dir.join(format!("{name}.schema.json"));
            let schema_text = std::fs::read_to_string(&schema_path)
                .map_err(|e| EngineError::Table(format!("{}: {e}", schema_path.display())))?;
            let schema: Schema = serde_json::from_str(&schema_text)
                .map_err(|e| EngineError::Table(format!("{}: {e}", schema_path.display())))?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| EngineError::Table(format!("{}: {e}", path.display())))?;
            let table = parse_tbl(&name, Arc::new(schema), &text)?;
            set.insert(table);
        }
        Ok(set)
    }

    /// Write every table as a `<name>.tbl` + `<name>.schema.json` pair.
    pub fn save_dir(&self, dir: &Path) -> Result<(), EngineError> {
        std::fs::create_dir_all(dir).map_err(|e| EngineError::Table(e.to_string()))?;
        for table in self.tables.values() {
            let schema_json = serde_json::to_string_pretty(table.schema.as_ref())
                .map_err(|e| EngineError::Table(e.to_string()))?;
            std::fs::write(dir.join(format!("{}.schema.json", table.name)), schema_json)
                .map_err(|e| EngineError::Table(e.to_string()))?;
            std::fs::write(dir.join(format!("{}.tbl", table.name)), to_tbl(&table.batch))
                .map_err(|e| EngineError::Table(e.to_string()))?;
        }
        Ok(())
    }
}

/// Parse dbgen-delimited text into a batch.
pub fn parse_tbl(name: &str, schema: Arc<Schema>, text: &str) -> Result<Table, EngineError> {
    let mut columns: Vec<Vec<Datum>> = vec![Vec::new(); schema.len()];
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let line = line.strip_suffix('|').unwrap_or(line);
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != schema.len() {
            return Err(EngineError::Table(format!(
                "{name}:{}: {} fields, schema has {} columns",
                lineno + 1,
                fields.len(),
                schema.len()
            )));
        }
        for (idx, field) in fields.iter().enumerate() {
            let (col_name, ty) = schema.column(idx);
            let datum = parse_field(field, ty.kind, ty.nullable).map_err(|e| {
                EngineError::Table(format!("{name}:{}: column {col_name}: {e}", lineno + 1))
            })?;
            columns[idx].push(datum);
        }
    }
    let batch = TupleBatch::from_columns(schema.clone(), columns)?;
    Ok(Table::new(name, schema, batch))
}

fn parse_field(field: &str, kind: ColumnKind, nullable: bool) -> Result<Datum, String> {
    if field == NULL_FIELD {
        if !nullable {
            return Err("null in NOT NULL column".into());
        }
        return Ok(Datum::Null);
    }
    Ok(match kind {
        ColumnKind::Int64 => Datum::Int(field.parse().map_err(|e| format!("bad int: {e}"))?),
        ColumnKind::Decimal64 { scale } => {
            let (unscaled, written_scale) =
                parse_decimal(field).map_err(|e| format!("bad decimal: {e}"))?;
            if written_scale > scale {
                return Err(format!("decimal {field:?} has more than {scale} fraction digits"));
            }
            let mut v = unscaled;
            for _ in written_scale..scale {
                v = v.checked_mul(10).ok_or("decimal overflow")?;
            }
            Datum::Dec(v)
        }
        ColumnKind::Date32 => Datum::Date(parse_date(field).map_err(|e| format!("{e}"))?),
        ColumnKind::Varchar => Datum::Str(field.to_string()),
    })
}

/// Render a batch in dbgen-delimited form.
pub fn to_tbl(batch: &TupleBatch) -> String {
    let mut out = String::new();
    for row in 0..batch.row_count {
        for (idx, col) in batch.columns.iter().enumerate() {
            let (_, ty) = batch.schema.column(idx);
            match &col[row] {
                Datum::Null => out.push_str(NULL_FIELD),
                Datum::Int(v) => out.push_str(&v.to_string()),
                Datum::Dec(v) => out.push_str(&format_decimal(*v, ty.kind)),
                Datum::Date(v) => out.push_str(&format_date(*v)),
                Datum::Str(s) => out.push_str(s),
            }
            out.push('|');
        }
        out.push('\n');
    }
    out
}

fn format_decimal(unscaled: i64, kind: ColumnKind) -> String {
    let ColumnKind::Decimal64 { scale } = kind else {
        return unscaled.to_string();
    };
    if scale == 0 {
        return unscaled.to_string();
    }
    let sign = if unscaled < 0 { "-" } else { "" };
    let abs = unscaled.unsigned_abs();
    let pow = 10u64.pow(scale as u32);
    format!("{sign}{}.{:0width$}", abs / pow, abs % pow, width = scale as usize)
}

/// Days since 1970-01-01 back to "YYYY-MM-DD" (civil-from-days).
pub fn format_date(days: i32) -> String {
    let z = days as i64 + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

impl TupleBatch {
    /// Copy of a row range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TupleBatch {
        TupleBatch {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
            row_count: range.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ColumnType;

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(vec![
                ("id".into(), ColumnType::not_null(ColumnKind::Int64)),
                ("price".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
                ("day".into(), ColumnType::not_null(ColumnKind::Date32)),
                ("note".into(), ColumnType::nullable(ColumnKind::Varchar)),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn parse_and_render_round_trip() {
        let text = "1|12.34|1995-06-17|hello|\n2|0.50|1970-01-01|\\N|\n3|7|1969-12-31||\n";
        let table = parse_tbl("t", schema(), text).unwrap();
        assert_eq!(table.row_count(), 3);
        assert_eq!(table.batch.columns[0][0], Datum::Int(1));
        assert_eq!(table.batch.columns[1][0], Datum::Dec(1234));
        assert_eq!(table.batch.columns[1][2], Datum::Dec(700));
        assert_eq!(table.batch.columns[2][0], Datum::Date(9298));
        assert_eq!(table.batch.columns[3][1], Datum::Null);
        assert_eq!(table.batch.columns[3][2], Datum::Str(String::new()));
        let rendered = to_tbl(&table.batch);
        let reparsed = parse_tbl("t", schema(), &rendered).unwrap();
        assert_eq!(reparsed.batch, table.batch);
    }

    #[test]
    fn date_formatting_round_trip() {
        for days in [-1000, -1, 0, 1, 9298, 11017, 20000] {
            let text = format_date(days);
            assert_eq!(parse_date(&text).unwrap(), days, "{text}");
        }
    }

    #[test]
    fn field_count_mismatch_is_an_error() {
        assert!(parse_tbl("t", schema(), "1|2.0|\n").is_err());
    }

    #[test]
    fn null_rejected_in_not_null_column() {
        assert!(parse_tbl("t", schema(), "\\N|1.00|1970-01-01|x|\n").is_err());
    }

    #[test]
    fn chunks_partition_the_table() {
        let text: String = (0..10).map(|i| format!("{i}|1.00|1970-01-01|x|\n")).collect();
        let table = parse_tbl("t", schema(), &text).unwrap();
        let n = 3;
        let mut total = 0;
        let mut seen = Vec::new();
        for node in 0..n {
            let chunk = table.chunk(node, n);
            total += chunk.row_count;
            for r in 0..chunk.row_count {
                seen.push(chunk.columns[0][r].clone());
            }
        }
        assert_eq!(total, 10);
        assert_eq!(seen, (0..10).map(Datum::Int).collect::<Vec<_>>());
    }

    #[test]
    fn save_and_load_directory() {
        let dir = tempfile::tempdir().unwrap();
        let text = "1|12.34|1995-06-17|hello|\n";
        let table = parse_tbl("demo", schema(), text).unwrap();
        let mut set = TableSet::new();
        set.insert(table);
        set.save_dir(dir.path()).unwrap();
        let loaded = TableSet::load_dir(dir.path()).unwrap();
        let demo = loaded.get("demo").unwrap();
        assert_eq!(demo.batch, set.get("demo").unwrap().batch);
        assert!(loaded.get("absent").is_err());
    }
}
