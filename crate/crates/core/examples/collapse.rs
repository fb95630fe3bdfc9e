//! Epoch perplexity of the codebook across a regime shift, with and without
//! reinit + contrastive.
//!
//! cargo run --release --example collapse -- [seeds]

use sonar_core::experiment::{collapse_config, collapse_run, desk_scenario, ScenarioShape};

fn main() {
    let seeds: u64 = std::env::args().nth(1).map_or(10, |s| s.parse().expect("seed count"));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:5.1}")).collect::<Vec<_>>().join(" ");
    for s in 0..seeds {
        let sc = desk_scenario(&ScenarioShape::default(), s).expect("scenario");
        let on = collapse_run(&sc, &collapse_config(s, true)).expect("run");
        let off = collapse_run(&sc, &collapse_config(s, false)).expect("run");
        println!("seed {s}\n  on  {}\n  off {}", fmt(&on), fmt(&off));
    }
}
