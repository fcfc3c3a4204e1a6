//! The built-in verification suites: analytic gradients against finite
//! differences, and library results against direct re-computations.

use cluda::verify::{grad_check, oracle_check};

fn main() -> cluda::Result<()> {
    let grads = grad_check(0, 3)?;
    let oracles = oracle_check(0, 10)?;
    for r in grads.iter().chain(&oracles) {
        println!("{r}");
    }
    let failed = grads.iter().chain(&oracles).filter(|r| !r.pass()).count();
    println!("{} checks, {failed} failed", grads.len() + oracles.len());
    Ok(())
}
