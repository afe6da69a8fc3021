//! Finite-difference gradient checks for every layer and loss.
//!
//! cargo run --release --example gradcheck -- [first_seed] [seeds]

use demix::gradcheck::run_suite;

fn main() -> demix::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let first = args.next().flatten().unwrap_or(0);
    let seeds = args.next().flatten().unwrap_or(3);
    let results = run_suite(first, seeds)?;
    for r in &results {
        println!(
            "{:<40} seed {} max rel err {:.2e} / {:.0e} {}",
            r.name,
            r.seed,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
