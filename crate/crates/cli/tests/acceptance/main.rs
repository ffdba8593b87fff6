//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `cargo test -p s3l-cli --test acceptance` runs everything; pass criterion
//! numbers (`-- 1 3`) to run a subset. Exits non-zero if any criterion fails.

mod common;
mod cost;
mod curriculum;
mod desk;
mod determinism;
mod grads;
mod losses;
mod mechanics;
mod ssl_state;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// `Ok(detail)` on success, `Err(detail)` on failure.
pub type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    /// Wall-clock budget in seconds, if the criterion states one.
    budget: Option<f64>,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "cost model vs reference MACs", budget: None, run: cost::run },
    Criterion { id: 2, name: "finite-difference gradient suite", budget: Some(60.0), run: grads::run },
    Criterion { id: 3, name: "loss oracles and closed forms", budget: None, run: losses::run },
    Criterion { id: 4, name: "desk-scale pretraining direction", budget: Some(1800.0), run: desk::run },
    Criterion { id: 5, name: "warmup freeze mechanics", budget: Some(120.0), run: mechanics::run },
    Criterion { id: 6, name: "SSL state invariants", budget: Some(60.0), run: ssl_state::run },
    Criterion { id: 7, name: "determinism and exact resume", budget: Some(300.0), run: determinism::run },
    Criterion { id: 8, name: "localization protocol", budget: None, run: desk::localization },
    Criterion { id: 9, name: "curriculum handoff and weighted cost", budget: None, run: curriculum::run },
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match (outcome, c.budget) {
            (Ok(d), Some(b)) if secs > b => Err(format!("{d}; took {secs:.1}s, budget {b:.0}s")),
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {}: {detail} ({secs:.1}s)", c.id, c.name);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
