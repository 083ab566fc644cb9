//! Central-difference gradient check of every autograd op and the GBD layers.
//!
//! cargo run --release --example gradcheck -- [seeds]

use gbdnet::suite::{gradient_suite, SUITE_TOLERANCE};

fn main() -> gbdnet::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cases = gradient_suite(seeds)?;
    for c in &cases {
        println!("{:<30} {:.2e}  ({} coordinates, {} skipped at kinks)", c.name, c.max_rel_error, c.checked, c.skipped);
    }
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("worst {worst:.2e}, tolerance {SUITE_TOLERANCE:.0e}");
    Ok(())
}
