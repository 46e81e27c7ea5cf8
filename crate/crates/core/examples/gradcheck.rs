//! Runs the autodiff gradcheck suite and prints the worst relative error
//! per op.
//!
//! `cargo run --release --example gradcheck [instances]`

use emoguide::autodiff::{gradcheck_suite, SUITE_OPS};

fn main() -> anyhow::Result<()> {
    let instances: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(20);
    let cases = gradcheck_suite(instances, 0, 1e-5)?;
    for op in SUITE_OPS {
        let worst = cases
            .iter()
            .filter(|c| c.op == op)
            .map(|c| c.report.max_rel_error())
            .fold(0.0, f64::max);
        println!("{op:<22} max rel error {worst:.2e}");
    }
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_error())
        .fold(0.0, f64::max);
    println!(
        "{} cases, overall max {worst:.2e} ({})",
        cases.len(),
        if worst < 1e-4 { "pass" } else { "FAIL" }
    );
    Ok(())
}
