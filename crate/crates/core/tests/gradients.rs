use std::time::Instant;

use lowdose::gradsuite::{run_suite, OPS, SEEDS, TOLERANCE};

#[test]
fn every_operation_passes_central_differences() {
    let start = Instant::now();
    let rows = run_suite(None, false).unwrap();
    assert_eq!(rows.len(), OPS.len());
    for row in &rows {
        println!("{:<28} {:>5} coords  max rel {:.3e}", row.op, row.coords, row.max_rel_error);
    }
    for row in &rows {
        assert_eq!(row.seeds, SEEDS);
        assert!(row.max_rel_error < TOLERANCE, "{row:?}");
    }
    assert!(start.elapsed().as_secs() < 120);
}
