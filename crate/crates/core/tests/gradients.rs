use std::time::Instant;

use maskground::gradcheck::{run, GradcheckOptions};

#[test]
fn finite_differences_agree_on_twenty_instances() {
    let t = Instant::now();
    let report = run(&GradcheckOptions::default()).unwrap();
    for c in &report.checks {
        println!("{:<26} instances {:>3} coords {:>6} max rel err {:.3e}", c.name, c.instances, c.coordinates, c.max_rel_error);
        assert!(c.instances >= 20);
    }
    assert!(report.passed(), "{report:?}");
    assert!(t.elapsed().as_secs() < 120);
}

#[test]
fn different_seeds_also_pass() {
    for seed in 1..3 {
        let o = GradcheckOptions { seed, instances: 5, model_coordinates: 8, ..Default::default() };
        assert!(run(&o).unwrap().passed());
    }
}
