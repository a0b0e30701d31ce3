//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use pcapsim_core::verify;

fn main() {
    let results = verify::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
