//! Acceptance criteria 1-13, one printed pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines show up in plain
//! `cargo test` output.

use roughcouple::verify;

fn main() {
    let checks = verify::run_all(20_241_014, 1);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<u32> = checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", checks.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
