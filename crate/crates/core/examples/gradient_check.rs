//! Finite-difference checks of the three losses on random instances.

use cpfs3d::checks::run_grad_suite;

fn main() -> cpfs3d::Result<()> {
    let report = run_grad_suite(7, 20)?;
    for (name, c) in [
        ("semantic", &report.semcl),
        ("primitive", &report.primcl),
        ("detection", &report.det),
    ] {
        println!(
            "{name:<10} {} instances, {} entries, max rel err {:.2e}",
            c.instances, c.entries, c.max_rel_error
        );
    }
    println!("bank gradient max {:e}", report.bank_grad_max);
    println!("passed: {}", report.passed());
    Ok(())
}
