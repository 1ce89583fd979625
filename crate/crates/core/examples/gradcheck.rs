//! Finite-difference verification of every differentiable operation, loss
//! and both network variants.

use ptycho::gradsuite::{all_passed, report_text, run_suite, SuiteConfig};

fn main() -> ptycho::Result<()> {
    let cases = run_suite(&SuiteConfig::default())?;
    print!("{}", report_text(&cases));
    println!("{} cases, all within tolerance: {}", cases.len(), all_passed(&cases));
    Ok(())
}
