use dpanet::gradsuite::run_suite;

#[test]
fn every_row_passes() {
    let rows = run_suite(0x5eed).unwrap();
    for row in &rows {
        println!("{row}");
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    assert!(failed.is_empty(), "failed rows: {failed:?}");
}
