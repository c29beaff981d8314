#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use tabsynth::table::{Cell, Column, ColumnKind, Row, Schema, Table, Task};

/// Category values chosen to stress quoting and splitting.
pub const TRICKY: [&str; 14] = [
    "a",
    "HS-grad",
    "≤ 50K",
    "x, y",
    ", ",
    "say \"hi\"",
    "\"",
    " padded ",
    "",
    "is",
    "a is b",
    "12",
    "trailing,",
    "Ünïcödé",
];

pub fn random_number_text<R: Rng>(r: &mut R) -> String {
    let sign = ["", "-", "+"].choose(r).unwrap();
    let int: u32 = r.random_range(0..100_000);
    match r.random_range(0..5) {
        0 => format!("{sign}{int}"),
        1 => format!("{sign}{int}.{:0w$}", r.random_range(0..1000), w = r.random_range(1..4)),
        2 => format!("{sign}.{}", r.random_range(0..100)),
        3 => format!("{sign}{int}e{}", r.random_range(-5..6)),
        _ => format!("{sign}0{int}"),
    }
}

pub fn random_category<R: Rng>(r: &mut R) -> String {
    if r.random_bool(0.5) {
        TRICKY.choose(r).unwrap().to_string()
    } else {
        let n = r.random_range(1..6);
        (0..n)
            .map(|_| *['a', 'b', ' ', ',', '"', 'z', '-', '.'].choose(r).unwrap())
            .collect()
    }
}

/// A random schema of `1..=max_cols` columns; the last column is a
/// classification label when `labeled`.
pub fn random_schema<R: Rng>(r: &mut R, max_cols: usize, labeled: bool) -> Schema {
    let m = r.random_range(1..=max_cols);
    let columns: Vec<Column> = (0..m)
        .map(|i| {
            let kind = if r.random_bool(0.5) {
                ColumnKind::Numerical
            } else {
                ColumnKind::Categorical
            };
            // names share prefixes on purpose: "f1" vs "f1 x"
            let name = if i > 0 && r.random_bool(0.2) {
                format!("f{} x", i - 1)
            } else {
                format!("f{i}")
            };
            Column::new(name, kind)
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let columns: Vec<Column> = columns
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if seen.insert(c.name.clone()) {
                c
            } else {
                Column::new(format!("g{i}"), c.kind)
            }
        })
        .collect();
    if labeled && m >= 2 {
        let label = columns[m - 1].name.clone();
        Schema::labeled(columns, &label, Task::Classification, None).unwrap()
    } else {
        Schema::features(columns).unwrap()
    }
}

pub fn random_row<R: Rng>(r: &mut R, schema: &Schema, missing: f64) -> Row {
    Row::new(
        schema
            .columns()
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if !schema.is_label(j) && r.random_bool(missing) {
                    return Cell::Missing;
                }
                match c.kind {
                    ColumnKind::Numerical => Cell::number(&random_number_text(r)).unwrap(),
                    ColumnKind::Categorical => Cell::category(random_category(r)),
                }
            })
            .collect(),
    )
}

pub fn random_table<R: Rng>(r: &mut R, schema: &Schema, rows: usize, missing: f64) -> Table {
    let rows = (0..rows).map(|_| random_row(r, schema, missing)).collect();
    Table::new(schema.clone(), rows, "random").unwrap()
}

/// A small mixed table for metric checks: `n` rows over two numbers and one
/// category, values on a coarse grid so ties occur.
pub fn metric_table<R: Rng>(r: &mut R, schema: &Schema, n: usize) -> Table {
    let rows = (0..n)
        .map(|_| {
            Row::new(
                schema
                    .columns()
                    .iter()
                    .map(|c| {
                        if r.random_bool(0.05) {
                            return Cell::Missing;
                        }
                        match c.kind {
                            ColumnKind::Numerical => {
                                Cell::number(&format!("{}", r.random_range(-20..20) as f64 / 4.0)).unwrap()
                            }
                            ColumnKind::Categorical => {
                                Cell::category(*["u", "v", "w"].choose(r).unwrap())
                            }
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    Table::new(schema.clone(), rows, "metric").unwrap()
}

pub fn metric_schema() -> Schema {
    Schema::features(vec![
        Column::new("x", ColumnKind::Numerical),
        Column::new("y", ColumnKind::Numerical),
        Column::new("c", ColumnKind::Categorical),
    ])
    .unwrap()
}

/// Brute-force mixed distance, written independently of the library.
pub fn oracle_distance(reference: &Table, a: &Row, b: &Row) -> f64 {
    let mut d = 0.0;
    for (j, col) in reference.schema.columns().iter().enumerate() {
        if reference.schema.is_label(j) {
            continue;
        }
        let term = match (&a[j], &b[j]) {
            (Cell::Missing, Cell::Missing) => 0.0,
            (Cell::Missing, _) | (_, Cell::Missing) => 1.0,
            (x, y) => match col.kind {
                ColumnKind::Categorical => {
                    if x.text() == y.text() {
                        0.0
                    } else {
                        1.0
                    }
                }
                ColumnKind::Numerical => {
                    let vals: Vec<f64> = reference.rows.iter().filter_map(|r| r[j].as_f64()).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let range = if hi > lo { hi - lo } else { 1.0 };
                    (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() / range
                }
            },
        };
        d += term;
    }
    d
}

pub fn oracle_dcr(synth: &Table, train: &Table) -> Vec<f64> {
    synth
        .rows
        .iter()
        .map(|s| {
            train
                .rows
                .iter()
                .map(|t| oracle_distance(train, s, t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn oracle_coverage(real: &Table, synth: &Table, k: usize) -> f64 {
    let n = real.len();
    let mut covered = 0;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| oracle_distance(real, &real.rows[i], &real.rows[j]))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let radius = d[k - 1];
        if synth
            .rows
            .iter()
            .any(|s| oracle_distance(real, &real.rows[i], s) <= radius)
        {
            covered += 1;
        }
    }
    covered as f64 / n as f64
}

/// AUC by enumerating every positive/negative pair.
pub fn oracle_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in positive.iter().enumerate() {
        if !p {
            continue;
        }
        for (j, &q) in positive.iter().enumerate() {
            if q {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
