//! The eleven acceptance criteria, one pass/fail line each.

use rib_core::instrument::CountingAllocator;
use rib_core::verify::{run_check, VerifyOptions, CHECK_NAMES};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let opts = VerifyOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..VerifyOptions::default()
    };
    let mut failed = Vec::new();
    for id in 1..=CHECK_NAMES.len() {
        let r = run_check(id, &opts);
        println!("{r}");
        if !r.passed {
            failed.push(id);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("offset_table.csv")).unwrap();
    assert!(csv.starts_with("dy,dx,mean_bias\n"));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn broken_identity_is_caught() {
    let opts = VerifyOptions {
        break_identity: true,
        ..VerifyOptions::default()
    };
    let r = run_check(1, &opts);
    println!("{r}");
    assert!(!r.passed);
}
