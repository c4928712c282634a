//! Schema-driven tuple serialization into the densely-packed binary wire format.
//!
//! A serialized tuple has three parts:
//! 1. values of all NOT NULL fixed-size columns, little-endian, ordered by
//!    descending byte width and then schema position;
//! 2. a null bitmap over the nullable fixed-size columns (LSB-first, one bit
//!    per column, ceil(k/8) bytes) followed by the values of the non-null ones
//!    in the same order;
//! 3. variable-length columns in schema order, each as a u32 LE byte length
//!    plus raw bytes; a null varchar is the length sentinel 0xFFFFFFFF.
//!
//! Everything here is a pure function over caller-owned buffers; the encoded
//! bytes are the wire contract shared with the exchange layer and must be
//! identical on every node.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length sentinel marking a null variable-length value.
pub const VARCHAR_NULL_SENTINEL: u32 = 0xFFFF_FFFF;

/// Logical column type. Fixed-size kinds have a defined wire width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Int64,
    /// Scaled 64-bit integer; `scale` decimal digits after the point.
    Decimal64 { scale: u8 },
    /// Days since 1970-01-01.
    Date32,
    /// Byte-length-prefixed string data.
    Varchar,
}

impl ColumnKind {
    /// Wire width in bytes for fixed-size kinds, `None` for varchar.
    pub fn fixed_width(&self) -> Option<usize> {
        match self {
            ColumnKind::Int64 | ColumnKind::Decimal64 { .. } => Some(8),
            ColumnKind::Date32 => Some(4),
            ColumnKind::Varchar => None,
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed_width().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnType {
    pub kind: ColumnKind,
    pub nullable: bool,
}

impl ColumnType {
    pub fn new(kind: ColumnKind, nullable: bool) -> Result<Self, CodecError> {
        if let ColumnKind::Decimal64 { scale } = kind {
            if scale > 18 {
                return Err(CodecError::InvalidSchema(format!(
                    "decimal scale {scale} out of range [0, 18]"
                )));
            }
        }
        Ok(ColumnType { kind, nullable })
    }

    pub fn not_null(kind: ColumnKind) -> Self {
        ColumnType { kind, nullable: false }
    }

    pub fn nullable(kind: ColumnKind) -> Self {
        ColumnType { kind, nullable: true }
    }
}

/// Ordered list of named, typed columns. Column names are unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<(String, ColumnType)>,
}

impl Schema {
    pub fn new(columns: Vec<(String, ColumnType)>) -> Result<Self, CodecError> {
        for (i, (name, ty)) in columns.iter().enumerate() {
            if let ColumnKind::Decimal64 { scale } = ty.kind {
                if scale > 18 {
                    return Err(CodecError::InvalidSchema(format!(
                        "column {name}: decimal scale {scale} out of range"
                    )));
                }
            }
            if columns[..i].iter().any(|(n, _)| n == name) {
                return Err(CodecError::InvalidSchema(format!(
                    "duplicate column name {name}"
                )));
            }
        }
        Ok(Schema { columns })
    }

    pub fn empty() -> Self {
        Schema { columns: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[(String, ColumnType)] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> (&str, ColumnType) {
        let (name, ty) = &self.columns[idx];
        (name, *ty)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    /// New schema with exactly the `required` columns in original relative
    /// order, plus the projection map from new index to old index.
    pub fn prune(&self, required: &[&str]) -> Result<(Schema, Vec<usize>), CodecError> {
        for name in required {
            if self.index_of(name).is_none() {
                return Err(CodecError::UnknownColumn((*name).to_string()));
            }
        }
        let mut cols = Vec::new();
        let mut map = Vec::new();
        for (old_idx, (name, ty)) in self.columns.iter().enumerate() {
            if required.iter().any(|r| r == name) {
                cols.push((name.clone(), *ty));
                map.push(old_idx);
            }
        }
        Ok((Schema { columns: cols }, map))
    }
}

/// One value. `Null` doubles as the per-value null mark.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Datum {
    Int(i64),
    /// Unscaled decimal value; the scale lives in the column type.
    Dec(i64),
    Date(i32),
    Str(String),
    Null,
}

impl Datum {
    pub fn is_null(&self) -> bool {
        matches!(self, Datum::Null)
    }

    /// Canonical bytes used for hashing: fixed-size values little-endian,
    /// varchar raw bytes, null contributes nothing.
    pub fn write_key_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Datum::Int(v) | Datum::Dec(v) => out.extend_from_slice(&v.to_le_bytes()),
            Datum::Date(v) => out.extend_from_slice(&v.to_le_bytes()),
            Datum::Str(s) => out.extend_from_slice(s.as_bytes()),
            Datum::Null => {}
        }
    }

    fn matches_kind(&self, kind: ColumnKind) -> bool {
        matches!(
            (self, kind),
            (Datum::Int(_), ColumnKind::Int64)
                | (Datum::Dec(_), ColumnKind::Decimal64 { .. })
                | (Datum::Date(_), ColumnKind::Date32)
                | (Datum::Str(_), ColumnKind::Varchar)
        )
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::Int(v) => write!(f, "{v}"),
            Datum::Dec(v) => write!(f, "{v}"),
            Datum::Date(v) => write!(f, "{v}"),
            Datum::Str(s) => write!(f, "{s}"),
            Datum::Null => write!(f, "NULL"),
        }
    }
}

/// Column-major container for a batch of tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleBatch {
    pub schema: Arc<Schema>,
    pub columns: Vec<Vec<Datum>>,
    pub row_count: usize,
}

impl TupleBatch {
    pub fn empty(schema: Arc<Schema>) -> Self {
        let columns = vec![Vec::new(); schema.len()];
        TupleBatch { schema, columns, row_count: 0 }
    }

    pub fn from_columns(schema: Arc<Schema>, columns: Vec<Vec<Datum>>) -> Result<Self, CodecError> {
        let row_count = columns.first().map_or(0, Vec::len);
        let batch = TupleBatch { schema, columns, row_count };
        batch.validate()?;
        Ok(batch)
    }

    pub fn from_rows(schema: Arc<Schema>, rows: &[Vec<Datum>]) -> Result<Self, CodecError> {
        let mut columns = vec![Vec::with_capacity(rows.len()); schema.len()];
        for row in rows {
            if row.len() != schema.len() {
                return Err(CodecError::InvalidSchema(format!(
                    "row arity {} does not match schema arity {}",
                    row.len(),
                    schema.len()
                )));
            }
            for (col, v) in columns.iter_mut().zip(row.iter()) {
                col.push(v.clone());
            }
        }
        Self::from_columns(schema, columns)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.columns.len() != self.schema.len() {
            return Err(CodecError::InvalidSchema(format!(
                "batch has {} columns, schema has {}",
                self.columns.len(),
                self.schema.len()
            )));
        }
        for (idx, col) in self.columns.iter().enumerate() {
            let (name, ty) = self.schema.column(idx);
            if col.len() != self.row_count {
                return Err(CodecError::InvalidSchema(format!(
                    "column {name} has {} values, batch row count is {}",
                    col.len(),
                    self.row_count
                )));
            }
            for v in col {
                if v.is_null() {
                    if !ty.nullable {
                        return Err(CodecError::NullInNotNullColumn(name.to_string()));
                    }
                } else if !v.matches_kind(ty.kind) {
                    return Err(CodecError::TypeMismatch {
                        column: name.to_string(),
                        value: v.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, idx: usize) -> Vec<Datum> {
        self.columns.iter().map(|c| c[idx].clone()).collect()
    }

    pub fn push_row(&mut self, row: Vec<Datum>) {
        debug_assert_eq!(row.len(), self.schema.len());
        for (col, v) in self.columns.iter_mut().zip(row) {
            col.push(v);
        }
        self.row_count += 1;
    }
}

/// Deterministic wire ordering of a schema's columns.
///
/// `part1`/`part2`/`part3` hold schema column indices for the not-null fixed,
/// nullable fixed, and varchar sections respectively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireLayout {
    pub part1: Vec<usize>,
    pub part2: Vec<usize>,
    pub part3: Vec<usize>,
}

impl WireLayout {
    pub fn null_bitmap_bytes(&self) -> usize {
        self.part2.len().div_ceil(8)
    }
}

/// Compute the wire layout for a schema. Pure function of the schema.
pub fn layout_for(schema: &Schema) -> WireLayout {
    let mut part1 = Vec::new();
    let mut part2 = Vec::new();
    let mut part3 = Vec::new();
    for (idx, (_, ty)) in schema.columns().iter().enumerate() {
        match (ty.kind.is_fixed(), ty.nullable) {
            (true, false) => part1.push(idx),
            (true, true) => part2.push(idx),
            (false, _) => part3.push(idx),
        }
    }
    // Wider values first, ties by schema position. Sorting is stable, so the
    // schema-position tiebreak falls out of the original order.
    let width = |idx: &usize| {
        schema.columns()[*idx]
            .1
            .kind
            .fixed_width()
            .expect("fixed part")
    };
    part1.sort_by_key(|idx| std::cmp::Reverse(width(idx)));
    part2.sort_by_key(|idx| std::cmp::Reverse(width(idx)));
    WireLayout { part1, part2, part3 }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("null value in NOT NULL column {0}")]
    NullInNotNullColumn(String),
    #[error("value {value} does not match declared type of column {column}")]
    TypeMismatch { column: String, value: String },
    #[error("varchar value of {0} bytes overflows the 32-bit length prefix")]
    VarcharOverflow(usize),
    #[error("truncated input: needed {needed} bytes, {remaining} remaining")]
    Truncated { needed: usize, remaining: usize },
    #[error("varchar length {len} exceeds remaining {remaining} bytes")]
    BadVarcharLength { len: u32, remaining: usize },
}

fn write_fixed(out: &mut Vec<u8>, kind: ColumnKind, datum: &Datum) {
    match (kind, datum) {
        (ColumnKind::Int64, Datum::Int(v)) | (ColumnKind::Decimal64 { .. }, Datum::Dec(v)) => {
            out.extend_from_slice(&v.to_le_bytes())
        }
        (ColumnKind::Date32, Datum::Date(v)) => out.extend_from_slice(&v.to_le_bytes()),
        _ => unreachable!("type-checked before serialization"),
    }
}

/// Append the encoding of row `row` of `batch` to `out`. Returns the number
/// of bytes written.
pub fn serialize_tuple(
    batch: &TupleBatch,
    row: usize,
    layout: &WireLayout,
    out: &mut Vec<u8>,
) -> Result<usize, CodecError> {
    let start = out.len();
    let schema = &batch.schema;
    for &idx in &layout.part1 {
        let (name, ty) = schema.column(idx);
        let v = &batch.columns[idx][row];
        if v.is_null() {
            return Err(CodecError::NullInNotNullColumn(name.to_string()));
        }
        if !v.matches_kind(ty.kind) {
            return Err(CodecError::TypeMismatch { column: name.to_string(), value: v.to_string() });
        }
        write_fixed(out, ty.kind, v);
    }
    if !layout.part2.is_empty() {
        let bitmap_at = out.len();
        out.resize(bitmap_at + layout.null_bitmap_bytes(), 0);
        for (bit, &idx) in layout.part2.iter().enumerate() {
            let (name, ty) = schema.column(idx);
            let v = &batch.columns[idx][row];
            if v.is_null() {
                out[bitmap_at + bit / 8] |= 1 << (bit % 8);
            } else {
                if !v.matches_kind(ty.kind) {
                    return Err(CodecError::TypeMismatch {
                        column: name.to_string(),
                        value: v.to_string(),
                    });
                }
                write_fixed(out, ty.kind, v);
            }
        }
    }
    for &idx in &layout.part3 {
        let (name, ty) = schema.column(idx);
        let v = &batch.columns[idx][row];
        match v {
            Datum::Null => {
                if !ty.nullable {
                    return Err(CodecError::NullInNotNullColumn(name.to_string()));
                }
                out.extend_from_slice(&VARCHAR_NULL_SENTINEL.to_le_bytes());
            }
            Datum::Str(s) => {
                if s.len() as u64 >= VARCHAR_NULL_SENTINEL as u64 {
                    return Err(CodecError::VarcharOverflow(s.len()));
                }
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            other => {
                return Err(CodecError::TypeMismatch {
                    column: name.to_string(),
                    value: other.to_string(),
                });
            }
        }
    }
    Ok(out.len() - start)
}

/// Encoded size of row `row` without writing it.
pub fn serialized_size(batch: &TupleBatch, row: usize, layout: &WireLayout) -> usize {
    let schema = &batch.schema;
    let mut size = 0;
    for &idx in &layout.part1 {
        size += schema.column(idx).1.kind.fixed_width().unwrap();
    }
    size += layout.null_bitmap_bytes();
    for &idx in &layout.part2 {
        if !batch.columns[idx][row].is_null() {
            size += schema.column(idx).1.kind.fixed_width().unwrap();
        }
    }
    for &idx in &layout.part3 {
        size += 4;
        if let Datum::Str(s) = &batch.columns[idx][row] {
            size += s.len();
        }
    }
    size
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(CodecError::Truncated { needed: n, remaining });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_fixed(reader: &mut Reader<'_>, kind: ColumnKind) -> Result<Datum, CodecError> {
    Ok(match kind {
        ColumnKind::Int64 => Datum::Int(i64::from_le_bytes(reader.take(8)?.try_into().unwrap())),
        ColumnKind::Decimal64 { .. } => {
            Datum::Dec(i64::from_le_bytes(reader.take(8)?.try_into().unwrap()))
        }
        ColumnKind::Date32 => Datum::Date(i32::from_le_bytes(reader.take(4)?.try_into().unwrap())),
        ColumnKind::Varchar => unreachable!("varchar is not fixed-size"),
    })
}

/// Decode one tuple starting at `bytes[0]`. Returns the values in schema
/// order and the number of bytes consumed.
pub fn deserialize_tuple(
    bytes: &[u8],
    layout: &WireLayout,
    schema: &Schema,
) -> Result<(Vec<Datum>, usize), CodecError> {
    let mut reader = Reader { bytes, pos: 0 };
    let mut values = vec![Datum::Null; schema.len()];
    for &idx in &layout.part1 {
        values[idx] = read_fixed(&mut reader, schema.column(idx).1.kind)?;
    }
    if !layout.part2.is_empty() {
        let bitmap = reader.take(layout.null_bitmap_bytes())?.to_vec();
        for (bit, &idx) in layout.part2.iter().enumerate() {
            let is_null = bitmap[bit / 8] & (1 << (bit % 8)) != 0;
            if !is_null {
                values[idx] = read_fixed(&mut reader, schema.column(idx).1.kind)?;
            }
        }
    }
    for &idx in &layout.part3 {
        let len = reader.read_u32()?;
        if len == VARCHAR_NULL_SENTINEL {
            continue;
        }
        let remaining = bytes.len() - reader.pos;
        if len as usize > remaining {
            return Err(CodecError::BadVarcharLength { len, remaining });
        }
        let raw = reader.take(len as usize)?;
        let s = String::from_utf8(raw.to_vec())
            .map_err(|_| CodecError::BadVarcharLength { len, remaining })?;
        values[idx] = Datum::Str(s);
    }
    Ok((values, reader.pos))
}

/// Decode every tuple in `bytes` (must contain whole tuples only).
pub fn deserialize_all(
    bytes: &[u8],
    layout: &WireLayout,
    schema: &Arc<Schema>,
) -> Result<TupleBatch, CodecError> {
    let mut batch = TupleBatch::empty(schema.clone());
    let mut pos = 0;
    while pos < bytes.len() {
        let (row, consumed) = deserialize_tuple(&bytes[pos..], layout, schema)?;
        batch.push_row(row);
        pos += consumed;
    }
    Ok(batch)
}
