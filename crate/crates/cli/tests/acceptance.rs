//! Runs every acceptance criterion at the pinned tolerances and prints one
//! PASS/FAIL line each. `BDL_ACCEPT=1,2,3` restricts the set.

use bdl_cli::acceptance::{run_selected, AcceptOptions, ALL};

fn main() {
    let ids: Vec<u8> = match std::env::var("BDL_ACCEPT") {
        Ok(s) if !s.trim().is_empty() => s.split(',').map(|v| v.trim().parse().expect("criterion id")).collect(),
        _ => ALL.to_vec(),
    };
    let work = tempfile::tempdir().expect("scratch dir");
    println!("running {} acceptance criteria", ids.len());
    let results = run_selected(&ids, &AcceptOptions::default(), work.path(), |r| println!("{}", r.line()));
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
