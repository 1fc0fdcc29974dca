//! Central finite differences against every analytic loss gradient.

use panu::gradcheck::run_gradcheck;

fn main() {
    let report = run_gradcheck(0, 100, 1e-4);
    println!("{report}");
    std::process::exit(if report.passed() { 0 } else { 1 });
}
