//! Property tests for the wire codec: round-trip fidelity, byte-count
//! agreement, and determinism over randomized schemas and values.

use std::sync::Arc;

use proptest::collection::vec;
use proptest::prelude::*;

use qshuffle_core::codec::{
    deserialize_tuple, layout_for, serialize_tuple, serialized_size, ColumnKind, ColumnType,
    Datum, Schema, TupleBatch,
};

fn kind_strategy() -> impl Strategy<Value = ColumnKind> {
    prop_oneof![
        Just(ColumnKind::Int64),
        (0u8..=18).prop_map(|scale| ColumnKind::Decimal64 { scale }),
        Just(ColumnKind::Date32),
        Just(ColumnKind::Varchar),
    ]
}

fn schema_strategy() -> impl Strategy<Value = Schema> {
    vec((kind_strategy(), any::<bool>()), 1..=10).prop_map(|cols| {
        Schema::new(
            cols.into_iter()
                .enumerate()
                .map(|(i, (kind, nullable))| (format!("c{i}"), ColumnType { kind, nullable }))
                .collect(),
        )
        .expect("generated names unique")
    })
}

fn datum_strategy(ty: ColumnType) -> BoxedStrategy<Datum> {
    let base: BoxedStrategy<Datum> = match ty.kind {
        ColumnKind::Int64 => any::<i64>().prop_map(Datum::Int).boxed(),
        ColumnKind::Decimal64 { .. } => any::<i64>().prop_map(Datum::Dec).boxed(),
        ColumnKind::Date32 => any::<i32>().prop_map(Datum::Date).boxed(),
        ColumnKind::Varchar => "[ -~]{0,64}".prop_map(Datum::Str).boxed(),
    };
    if ty.nullable {
        prop_oneof![3 => base, 1 => Just(Datum::Null)].boxed()
    } else {
        base
    }
}

fn row_strategy(schema: &Schema) -> impl Strategy<Value = Vec<Datum>> {
    schema
        .columns()
        .iter()
        .map(|(_, ty)| datum_strategy(*ty))
        .collect::<Vec<_>>()
}

proptest! {
    #[test]
    fn round_trip_preserves_values_and_byte_count(
        (schema, row) in schema_strategy().prop_flat_map(|s| {
            let rows = row_strategy(&s);
            (Just(s), rows)
        })
    ) {
        let schema = Arc::new(schema);
        let layout = layout_for(&schema);
        let batch = TupleBatch::from_rows(schema.clone(), &[row.clone()]).unwrap();
        prop_assert_eq!(serialized_size(&batch, 0, &layout), {
            let mut out = Vec::new();
            serialize_tuple(&batch, 0, &layout, &mut out).unwrap()
        });
        let mut bytes = Vec::new();
        let written = serialize_tuple(&batch, 0, &layout, &mut bytes).unwrap();
        let (values, consumed) = deserialize_tuple(&bytes, &layout, &schema).unwrap();
        prop_assert_eq!(consumed, written);
        prop_assert_eq!(values, row);
    }

    #[test]
    fn serialization_is_deterministic(
        (schema, row) in schema_strategy().prop_flat_map(|s| {
            let rows = row_strategy(&s);
            (Just(s), rows)
        })
    ) {
        let schema = Arc::new(schema);
        let layout_a = layout_for(&schema);
        let layout_b = layout_for(&schema);
        prop_assert_eq!(&layout_a, &layout_b);
        let batch = TupleBatch::from_rows(schema.clone(), &[row]).unwrap();
        let mut first = Vec::new();
        let mut second = Vec::new();
        serialize_tuple(&batch, 0, &layout_a, &mut first).unwrap();
        serialize_tuple(&batch, 0, &layout_b, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn layout_partitions_schema_columns(schema in schema_strategy()) {
        let layout = layout_for(&schema);
        let mut seen: Vec<usize> = layout
            .part1
            .iter()
            .chain(&layout.part2)
            .chain(&layout.part3)
            .copied()
            .collect();
        seen.sort_unstable();
        let expected: Vec<usize> = (0..schema.len()).collect();
        prop_assert_eq!(seen, expected);
        // widths descend within fixed parts
        for part in [&layout.part1, &layout.part2] {
            let widths: Vec<usize> = part
                .iter()
                .map(|&i| schema.columns()[i].1.kind.fixed_width().unwrap())
                .collect();
            prop_assert!(widths.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
