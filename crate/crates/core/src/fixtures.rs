//! Synthetic "desk" datasets from a known generating process, used for
//! pre-training corpora, examples, and end-to-end checks.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::lm::{BackendConfig, NgramConfig};
use crate::rng;
use crate::scenarios::PipelineConfig;
use crate::table::{read_csv, SchemaHint, Table, Task};

pub const DESK_LABEL: &str = "churn";

const REGIONS: [(&str, f64); 4] = [("north", 0.5), ("south", -0.5), ("east", 0.2), ("west", -0.2)];
const PLANS: [(&str, f64); 3] = [("basic", -0.6), ("plus", 0.0), ("premium", 0.6)];

/// `rows` customers: `age`, `income`, `hours` (numerical), `region`, `plan`
/// (categorical), and a binary `churn` label from a noisy linear rule.
pub fn desk_table(rows: usize, seed: u64) -> Result<Table> {
    let mut r = rng::seeded(seed);
    let income = Normal::new(55.0, 15.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let mut csv = String::from("age,income,hours,region,plan,churn\n");
    for _ in 0..rows {
        let age: i64 = r.random_range(18..=79);
        let inc = (income.sample(&mut r) as f64).clamp(10.0, 150.0);
        let inc = (inc * 10.0).round() / 10.0;
        let hours: i64 = r.random_range(10..=60);
        let (region, re) = REGIONS[r.random_range(0..REGIONS.len())];
        let (plan, pe) = PLANS[r.random_range(0..PLANS.len())];
        let z = 0.06 * (age as f64 - 48.0) + 0.05 * (inc - 55.0) - 0.04 * (hours as f64 - 35.0)
            + re
            + pe
            + noise.sample(&mut r);
        let churn = if z > 0.0 { "yes" } else { "no" };
        writeln!(csv, "{age},{inc:.1},{hours},{region},{plan},{churn}").expect("string write");
    }
    read_csv(
        csv.as_bytes(),
        &format!("desk-{seed}"),
        &SchemaHint::labeled(DESK_LABEL, Task::Classification),
    )
}

/// `count` tables from the same process with seeds disjoint from `seed`
/// itself, for use as a pre-training corpus.
pub fn desk_siblings(count: usize, rows: usize, seed: u64) -> Result<Vec<Table>> {
    let base = rng::derive(seed, 0x5151);
    (0..count)
        .map(|k| desk_table(rows, rng::derive(base, k as u64)))
        .collect()
}

/// Pipeline settings for desk-sized tables: an n-gram long enough to see a
/// whole serialized row, with light smoothing so rows stay well-formed.
pub fn desk_pipeline() -> PipelineConfig {
    PipelineConfig {
        backend: BackendConfig {
            ngram: NgramConfig {
                order: 24,
                add_k: 1e-4,
                ..NgramConfig::default()
            },
            ..BackendConfig::default()
        },
        ..PipelineConfig::default()
    }
}
