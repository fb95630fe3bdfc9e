//! Desk forgetting experiment: mean FR per variant over a range of seeds.
//!
//! cargo run --release --example ablation -- [seeds]

use sonar_core::experiment::{desk_config, desk_scenario, run_ablation, ScenarioShape};
use sonar_core::trainer::Variant;

fn main() {
    let seeds: u64 = std::env::args().nth(1).map_or(10, |s| s.parse().expect("seed count"));
    let mut sums = [0.0; Variant::ALL.len()];
    let mut wins = 0;
    for s in 0..seeds {
        let sc = desk_scenario(&ScenarioShape::default(), s).expect("scenario");
        let run = run_ablation(&sc, &desk_config(s), &Variant::ALL).expect("ablation");
        print!("seed {s:>2}  base mAP {:6.2}", run.baseline.retention_map);
        for (sum, r) in sums.iter_mut().zip(&run.results) {
            *sum += r.report.forgetting_rate;
            print!("  {} {:6.2}", r.variant.name(), r.report.forgetting_rate);
        }
        println!();
        if run.fr(Variant::Full) < run.fr(Variant::Dcpt) {
            wins += 1;
        }
    }
    println!("full < dcpt in {wins}/{seeds} seeds");
    for (v, sum) in Variant::ALL.iter().zip(sums) {
        println!("{:>12}  mean FR {:6.2}", v.name(), sum / seeds as f64);
    }
}
