//! Out-of-sample check: fit on records before 2017, score those after.
//!
//! cargo run --release --example holdout_validation [cutoff]

use ipsb::posterior::ModelOptions;
use ipsb::sampler::SamplerConfig;
use ipsb::synthetic::{generate, ScenarioConfig};
use ipsb::validation::{fit_and_score, holdout_split, kfold_split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cutoff: f64 = std::env::args().nth(1).map_or(Ok(2017.0), |s| s.parse())?;
    let scenario = ScenarioConfig {
        seed: 21,
        observations_per_place: [8, 12],
        ..ScenarioConfig::default()
    };
    let (inputs, _) = generate(&scenario)?;
    let config = SamplerConfig {
        chains: 2,
        warmup: 1000,
        samples: 400,
        ..SamplerConfig::default()
    };

    let split = holdout_split(&inputs, cutoff)?;
    println!("holdout at {cutoff}: {} train, {} test", split.train.observations.len(), split.test.len());
    let (report, _) = fit_and_score(&[split], &ModelOptions::default(), &config, 1)?;
    print!("{}", report.to_csv());

    let folds = kfold_split(&inputs, 5, 1)?;
    let (report, points) = fit_and_score(&folds, &ModelOptions::default(), &config, 1)?;
    println!("\n5-fold: {} scored points", points.len());
    print!("{}", report.to_csv());
    Ok(())
}
