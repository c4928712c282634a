//! Row expressions for filters and computed columns.
//!
//! Plans carry column references by name; binding resolves them to indices
//! against the input schema and type-checks the tree. All arithmetic is
//! exact: decimals are scaled i64 with automatic scale alignment on
//! comparison/addition, and overflow is an error rather than a wrap.

use serde::{Deserialize, Serialize};

use crate::codec::{ColumnKind, Datum, Schema};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Unbound expression as written in plan files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Col(String),
    Int(i64),
    /// Decimal literal, e.g. "0.20"; the scale is the number of fraction
    /// digits written.
    Dec(String),
    Str(String),
    /// Date literal "YYYY-MM-DD".
    Date(String),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    IsNull(Box<Expr>),
}

/// Value type of a bound expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Int,
    Dec { scale: u8 },
    Date,
    Str,
    Bool,
}

impl ValueType {
    pub fn of_column(kind: ColumnKind) -> ValueType {
        match kind {
            ColumnKind::Int64 => ValueType::Int,
            ColumnKind::Decimal64 { scale } => ValueType::Dec { scale },
            ColumnKind::Date32 => ValueType::Date,
            ColumnKind::Varchar => ValueType::Str,
        }
    }

    pub fn column_kind(&self) -> Option<ColumnKind> {
        match self {
            ValueType::Int => Some(ColumnKind::Int64),
            ValueType::Dec { scale } => Some(ColumnKind::Decimal64 { scale: *scale }),
            ValueType::Date => Some(ColumnKind::Date32),
            ValueType::Str => Some(ColumnKind::Varchar),
            ValueType::Bool => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
pub enum BoundExpr {
    Col { index: usize, ty: ValueType, nullable: bool },
    LitInt(i64),
    LitDec { unscaled: i64, scale: u8 },
    LitDate(i32),
    LitStr(String),
    Cmp { op: CmpOp, lhs: Box<BoundExpr>, rhs: Box<BoundExpr> },
    And(Vec<BoundExpr>),
    Or(Vec<BoundExpr>),
    Not(Box<BoundExpr>),
    Arith { op: ArithOp, ty: ValueType, lhs: Box<BoundExpr>, rhs: Box<BoundExpr> },
    IsNull(Box<BoundExpr>),
}

impl BoundExpr {
    pub fn value_type(&self) -> ValueType {
        match self {
            BoundExpr::Col { ty, .. } => *ty,
            BoundExpr::LitInt(_) => ValueType::Int,
            BoundExpr::LitDec { scale, .. } => ValueType::Dec { scale: *scale },
            BoundExpr::LitDate(_) => ValueType::Date,
            BoundExpr::LitStr(_) => ValueType::Str,
            BoundExpr::Cmp { .. } | BoundExpr::And(_) | BoundExpr::Or(_) | BoundExpr::Not(_) => {
                ValueType::Bool
            }
            BoundExpr::Arith { ty, .. } => *ty,
            BoundExpr::IsNull(_) => ValueType::Bool,
        }
    }

    pub fn nullable(&self) -> bool {
        match self {
            BoundExpr::Col { nullable, .. } => *nullable,
            BoundExpr::LitInt(_)
            | BoundExpr::LitDec { .. }
            | BoundExpr::LitDate(_)
            | BoundExpr::LitStr(_)
            | BoundExpr::IsNull(_) => false,
            BoundExpr::Cmp { lhs, rhs, .. } => lhs.nullable() || rhs.nullable(),
            BoundExpr::And(children) | BoundExpr::Or(children) => {
                children.iter().any(BoundExpr::nullable)
            }
            BoundExpr::Not(child) => child.nullable(),
            BoundExpr::Arith { lhs, rhs, .. } => lhs.nullable() || rhs.nullable(),
        }
    }
}

/// Parse a decimal literal; the scale is the digit count after the point.
pub fn parse_decimal(text: &str) -> Result<(i64, u8), EngineError> {
    let bad = || EngineError::Plan(format!("bad decimal literal {text:?}"));
    let (sign, digits) = match text.strip_prefix('-') {
        Some(rest) => (-1i64, rest),
        None => (1i64, text),
    };
    let (whole, frac) = match digits.split_once('.') {
        Some((w, f)) => (w, f),
        None => (digits, ""),
    };
    if whole.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if frac.len() > 18 {
        return Err(bad());
    }
    let mut unscaled: i64 = 0;
    for c in whole.chars().chain(frac.chars()) {
        let d = c.to_digit(10).ok_or_else(bad)? as i64;
        unscaled = unscaled
            .checked_mul(10)
            .and_then(|v| v.checked_add(d))
            .ok_or_else(bad)?;
    }
    Ok((sign * unscaled, frac.len() as u8))
}

/// Parse "YYYY-MM-DD" into days since 1970-01-01.
pub fn parse_date(text: &str) -> Result<i32, EngineError> {
    let bad = || EngineError::Plan(format!("bad date literal {text:?}"));
    let mut parts = text.split('-');
    let year: i64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let month: i64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let day: i64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if parts.next().is_some() || !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(bad());
    }
    // days-from-civil, Gregorian calendar
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (month + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Ok((era * 146_097 + doe - 719_468) as i32)
}

fn rescale(unscaled: i64, from: u8, to: u8) -> Result<i64, EngineError> {
    debug_assert!(to >= from);
    let mut v = unscaled;
    for _ in from..to {
        v = v
            .checked_mul(10)
            .ok_or_else(|| EngineError::Overflow("decimal rescale".into()))?;
    }
    Ok(v)
}

/// Bind a plan expression against an input schema.
pub fn bind_expr(expr: &Expr, schema: &Schema) -> Result<BoundExpr, EngineError> {
    Ok(match expr {
        Expr::Col(name) => {
            let index = schema
                .index_of(name)
                .ok_or_else(|| EngineError::Plan(format!("unknown column {name}")))?;
            let (_, ty) = schema.column(index);
            BoundExpr::Col {
                index,
                ty: ValueType::of_column(ty.kind),
                nullable: ty.nullable,
            }
        }
        Expr::Int(v) => BoundExpr::LitInt(*v),
        Expr::Dec(text) => {
            let (unscaled, scale) = parse_decimal(text)?;
            BoundExpr::LitDec { unscaled, scale }
        }
        Expr::Str(s) => BoundExpr::LitStr(s.clone()),
        Expr::Date(text) => BoundExpr::LitDate(parse_date(text)?),
        Expr::Cmp(op, lhs, rhs) => {
            let lhs = bind_expr(lhs, schema)?;
            let rhs = bind_expr(rhs, schema)?;
            check_comparable(&lhs, &rhs)?;
            BoundExpr::Cmp { op: *op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
        }
        Expr::And(children) => BoundExpr::And(bind_all(children, schema)?),
        Expr::Or(children) => BoundExpr::Or(bind_all(children, schema)?),
        Expr::Not(child) => {
            let child = bind_expr(child, schema)?;
            expect_bool(&child)?;
            BoundExpr::Not(Box::new(child))
        }
        Expr::Add(l, r) => bind_arith(ArithOp::Add, l, r, schema)?,
        Expr::Sub(l, r) => bind_arith(ArithOp::Sub, l, r, schema)?,
        Expr::Mul(l, r) => bind_arith(ArithOp::Mul, l, r, schema)?,
        Expr::Div(l, r) => bind_arith(ArithOp::Div, l, r, schema)?,
        Expr::IsNull(child) => BoundExpr::IsNull(Box::new(bind_expr(child, schema)?)),
    })
}

fn bind_all(exprs: &[Expr], schema: &Schema) -> Result<Vec<BoundExpr>, EngineError> {
    let bound: Vec<BoundExpr> = exprs
        .iter()
        .map(|e| bind_expr(e, schema))
        .collect::<Result<_, _>>()?;
    for b in &bound {
        expect_bool(b)?;
    }
    Ok(bound)
}

fn expect_bool(expr: &BoundExpr) -> Result<(), EngineError> {
    if expr.value_type() != ValueType::Bool {
        return Err(EngineError::Plan("expected a boolean expression".into()));
    }
    Ok(())
}

fn check_comparable(lhs: &BoundExpr, rhs: &BoundExpr) -> Result<(), EngineError> {
    match (lhs.value_type(), rhs.value_type()) {
        (ValueType::Int, ValueType::Int)
        | (ValueType::Date, ValueType::Date)
        | (ValueType::Str, ValueType::Str)
        | (ValueType::Dec { .. }, ValueType::Dec { .. }) => Ok(()),
        (l, r) => Err(EngineError::Plan(format!("cannot compare {l:?} with {r:?}"))),
    }
}

fn bind_arith(op: ArithOp, l: &Expr, r: &Expr, schema: &Schema) -> Result<BoundExpr, EngineError> {
    let lhs = bind_expr(l, schema)?;
    let rhs = bind_expr(r, schema)?;
    let ty = match (op, lhs.value_type(), rhs.value_type()) {
        (_, ValueType::Int, ValueType::Int) => ValueType::Int,
        (ArithOp::Add | ArithOp::Sub, ValueType::Dec { scale: a }, ValueType::Dec { scale: b }) => {
            ValueType::Dec { scale: a.max(b) }
        }
        (ArithOp::Mul, ValueType::Dec { scale: a }, ValueType::Dec { scale: b }) => {
            let scale = a + b;
            if scale > 18 {
                return Err(EngineError::Plan(format!("product scale {scale} too large")));
            }
            ValueType::Dec { scale }
        }
        (ArithOp::Mul, ValueType::Dec { scale }, ValueType::Int)
        | (ArithOp::Mul, ValueType::Int, ValueType::Dec { scale })
        | (ArithOp::Div, ValueType::Dec { scale }, ValueType::Int) => ValueType::Dec { scale },
        (op, l, r) => {
            return Err(EngineError::Plan(format!("unsupported arithmetic {op:?} over {l:?}, {r:?}")))
        }
    };
    Ok(BoundExpr::Arith { op, ty, lhs: Box::new(lhs), rhs: Box::new(rhs) })
}

/// Evaluate a bound expression over one row.
pub fn eval(expr: &BoundExpr, row: &[Datum]) -> Result<Datum, EngineError> {
    Ok(match expr {
        BoundExpr::Col { index, .. } => row[*index].clone(),
        BoundExpr::LitInt(v) => Datum::Int(*v),
        BoundExpr::LitDec { unscaled, .. } => Datum::Dec(*unscaled),
        BoundExpr::LitDate(v) => Datum::Date(*v),
        BoundExpr::LitStr(s) => Datum::Str(s.clone()),
        BoundExpr::Cmp { op, lhs, rhs } => {
            let l = eval(lhs, row)?;
            let r = eval(rhs, row)?;
            if l.is_null() || r.is_null() {
                // SQL-style: comparisons against null do not match
                return Ok(Datum::Int(0));
            }
            let ordering = compare(&l, lhs.value_type(), &r, rhs.value_type())?;
            let hit = match op {
                CmpOp::Eq => ordering.is_eq(),
                CmpOp::Ne => !ordering.is_eq(),
                CmpOp::Lt => ordering.is_lt(),
                CmpOp::Le => ordering.is_le(),
                CmpOp::Gt => ordering.is_gt(),
                CmpOp::Ge => ordering.is_ge(),
            };
            Datum::Int(hit as i64)
        }
        BoundExpr::And(children) => {
            for c in children {
                if !truthy(&eval(c, row)?) {
                    return Ok(Datum::Int(0));
                }
            }
            Datum::Int(1)
        }
        BoundExpr::Or(children) => {
            for c in children {
                if truthy(&eval(c, row)?) {
                    return Ok(Datum::Int(1));
                }
            }
            Datum::Int(0)
        }
        BoundExpr::Not(child) => Datum::Int(!truthy(&eval(child, row)?) as i64),
        BoundExpr::Arith { op, ty: _, lhs, rhs } => {
            let l = eval(lhs, row)?;
            let r = eval(rhs, row)?;
            if l.is_null() || r.is_null() {
                return Ok(Datum::Null);
            }
            arith(*op, &l, lhs.value_type(), &r, rhs.value_type())?
        }
        BoundExpr::IsNull(child) => Datum::Int(eval(child, row)?.is_null() as i64),
    })
}

pub fn truthy(datum: &Datum) -> bool {
    matches!(datum, Datum::Int(v) if *v != 0)
}

fn compare(
    l: &Datum,
    lt: ValueType,
    r: &Datum,
    rt: ValueType,
) -> Result<std::cmp::Ordering, EngineError> {
    Ok(match (l, r) {
        (Datum::Int(a), Datum::Int(b)) => a.cmp(b),
        (Datum::Date(a), Datum::Date(b)) => a.cmp(b),
        (Datum::Str(a), Datum::Str(b)) => a.cmp(b),
        (Datum::Dec(a), Datum::Dec(b)) => {
            let (ValueType::Dec { scale: sa }, ValueType::Dec { scale: sb }) = (lt, rt) else {
                return Err(EngineError::Internal("decimal without scale".into()));
            };
            let target = sa.max(sb);
            rescale(*a, sa, target)?.cmp(&rescale(*b, sb, target)?)
        }
        _ => return Err(EngineError::Internal("mismatched comparison".into())),
    })
}

fn arith(
    op: ArithOp,
    l: &Datum,
    lt: ValueType,
    r: &Datum,
    rt: ValueType,
) -> Result<Datum, EngineError> {
    let overflow = || EngineError::Overflow("arithmetic".into());
    match (l, r) {
        (Datum::Int(a), Datum::Int(b)) => {
            let v = match op {
                ArithOp::Add => a.checked_add(*b),
                ArithOp::Sub => a.checked_sub(*b),
                ArithOp::Mul => a.checked_mul(*b),
                ArithOp::Div => {
                    if *b == 0 {
                        return Err(EngineError::Overflow("division by zero".into()));
                    }
                    a.checked_div(*b)
                }
            }
            .ok_or_else(overflow)?;
            Ok(Datum::Int(v))
        }
        (Datum::Dec(a), Datum::Dec(b)) => {
            let (ValueType::Dec { scale: sa }, ValueType::Dec { scale: sb }) = (lt, rt) else {
                return Err(EngineError::Internal("decimal without scale".into()));
            };
            let v = match op {
                ArithOp::Add | ArithOp::Sub => {
                    let target = sa.max(sb);
                    let a = rescale(*a, sa, target)?;
                    let b = rescale(*b, sb, target)?;
                    if op == ArithOp::Add {
                        a.checked_add(b)
                    } else {
                        a.checked_sub(b)
                    }
                }
                ArithOp::Mul => a.checked_mul(*b),
                ArithOp::Div => return Err(EngineError::Plan("decimal/decimal division unsupported".into())),
            }
            .ok_or_else(overflow)?;
            Ok(Datum::Dec(v))
        }
        (Datum::Dec(a), Datum::Int(b)) => match op {
            ArithOp::Mul => Ok(Datum::Dec(a.checked_mul(*b).ok_or_else(overflow)?)),
            ArithOp::Div => {
                if *b == 0 {
                    return Err(EngineError::Overflow("division by zero".into()));
                }
                Ok(Datum::Dec(a / b))
            }
            _ => Err(EngineError::Plan("unsupported decimal/int arithmetic".into())),
        },
        (Datum::Int(a), Datum::Dec(b)) if op == ArithOp::Mul => {
            Ok(Datum::Dec(a.checked_mul(*b).ok_or_else(overflow)?))
        }
        _ => Err(EngineError::Internal("mismatched arithmetic operands".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ColumnType;

    fn schema() -> Schema {
        Schema::new(vec![
            ("k".into(), ColumnType::not_null(ColumnKind::Int64)),
            ("price".into(), ColumnType::not_null(ColumnKind::Decimal64 { scale: 2 })),
            ("day".into(), ColumnType::not_null(ColumnKind::Date32)),
            ("tag".into(), ColumnType::nullable(ColumnKind::Varchar)),
        ])
        .unwrap()
    }

    fn row() -> Vec<Datum> {
        vec![Datum::Int(5), Datum::Dec(1250), Datum::Date(9000), Datum::Null]
    }

    #[test]
    fn decimal_literals_carry_written_scale() {
        assert_eq!(parse_decimal("0.20").unwrap(), (20, 2));
        assert_eq!(parse_decimal("12").unwrap(), (12, 0));
        assert_eq!(parse_decimal("-3.5").unwrap(), (-35, 1));
        assert!(parse_decimal("x").is_err());
    }

    #[test]
    fn date_parsing_matches_epoch() {
        assert_eq!(parse_date("1970-01-01").unwrap(), 0);
        assert_eq!(parse_date("1970-01-02").unwrap(), 1);
        assert_eq!(parse_date("1969-12-31").unwrap(), -1);
        assert_eq!(parse_date("2000-03-01").unwrap(), 11017);
        assert_eq!(parse_date("1995-06-17").unwrap(), 9298);
    }

    #[test]
    fn decimal_compare_aligns_scales() {
        let s = schema();
        // price (scale 2) = 12.50 compared against literal 12.5 (scale 1)
        let e = Expr::Cmp(
            CmpOp::Eq,
            Box::new(Expr::Col("price".into())),
            Box::new(Expr::Dec("12.5".into())),
        );
        let b = bind_expr(&e, &s).unwrap();
        assert!(truthy(&eval(&b, &row()).unwrap()));
    }

    #[test]
    fn null_comparisons_do_not_match() {
        let s = schema();
        let e = Expr::Cmp(
            CmpOp::Eq,
            Box::new(Expr::Col("tag".into())),
            Box::new(Expr::Str("x".into())),
        );
        let b = bind_expr(&e, &s).unwrap();
        assert!(!truthy(&eval(&b, &row()).unwrap()));
        let isnull = bind_expr(&Expr::IsNull(Box::new(Expr::Col("tag".into()))), &s).unwrap();
        assert!(truthy(&eval(&isnull, &row()).unwrap()));
    }

    #[test]
    fn arithmetic_scales() {
        let s = schema();
        // 0.2 * price: scale 1 × scale 2 → scale 3
        let e = Expr::Mul(Box::new(Expr::Dec("0.2".into())), Box::new(Expr::Col("price".into())));
        let b = bind_expr(&e, &s).unwrap();
        assert_eq!(b.value_type(), ValueType::Dec { scale: 3 });
        assert_eq!(eval(&b, &row()).unwrap(), Datum::Dec(2 * 1250));
        // price / 5 keeps scale 2
        let d = Expr::Div(Box::new(Expr::Col("price".into())), Box::new(Expr::Int(5)));
        let bd = bind_expr(&d, &s).unwrap();
        assert_eq!(eval(&bd, &row()).unwrap(), Datum::Dec(250));
    }

    #[test]
    fn type_errors_are_plan_errors() {
        let s = schema();
        let e = Expr::Cmp(
            CmpOp::Lt,
            Box::new(Expr::Col("k".into())),
            Box::new(Expr::Str("5".into())),
        );
        assert!(matches!(bind_expr(&e, &s), Err(EngineError::Plan(_))));
        assert!(bind_expr(&Expr::Col("missing".into()), &s).is_err());
    }
}
