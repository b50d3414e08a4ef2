use styleblend::selfcheck::{run_all, Mutation};

#[test]
fn every_check_passes() {
    let results = run_all(Mutation::None, |r| {
        println!("{:<20} {:>12.3e} (< {:e}) {}", r.name, r.value, r.tolerance, if r.passed { "ok" } else { "FAIL" });
    })
    .unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
