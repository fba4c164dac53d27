//! Finite-difference checks of every loss and the encoder backward pass.
//!
//! cargo run --release --example gradient_check [-- instances]

use epl::gradcheck::{run_suite, GradCheckConfig};

fn main() -> epl::Result<()> {
    let instances = std::env::args().nth(1).map_or(20, |s| s.parse().expect("instance count"));
    let report = run_suite(&GradCheckConfig { instances, ..GradCheckConfig::default() })?;
    print!("{}", report.to_text());
    println!("all passed: {}", report.passed());
    Ok(())
}
