//! Simulate the default scenario, fit it with 4 chains of 1000 + 1000
//! iterations and compare a few posterior summaries with the truth.
//!
//! cargo run --release --example fit_synthetic [seed]

use std::time::Instant;

use ipsb::math::quantiles;
use ipsb::posterior::{Model, ModelOptions};
use ipsb::sampler::{fit_model, SamplerConfig};
use ipsb::synthetic::{generate, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    let scenario = ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    };
    let (inputs, truth) = generate(&scenario)?;
    println!(
        "{} observations, {} places, {} countries, {} aux records",
        inputs.observations.len(),
        inputs.hierarchy.places.len(),
        inputs.hierarchy.countries.len(),
        inputs.aux.len()
    );

    let model = Model::new(inputs, ModelOptions::default())?;
    println!("{} parameters", model.dim());
    let start = Instant::now();
    let draws = fit_model(&model, &SamplerConfig::default())?;
    println!("sampled in {:.1}s", start.elapsed().as_secs_f64());

    let rhat = draws.rhat.as_ref().expect("multi-chain run");
    let (worst, r) = rhat
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .unwrap();
    println!("max R-hat {:.4} ({})", r.value, draws.names[worst]);
    println!("divergences {}", draws.total_divergences());
    let depth: f64 = draws.stats.iter().flatten().map(|s| s.depth as f64).sum::<f64>() / draws.len() as f64;
    println!("mean tree depth {depth:.2}, step sizes {:?}", draws.step_sizes);

    let natural: Vec<_> = draws.iter().map(|t| model.natural(t)).collect();
    let report = |name: &str, truth: f64, values: Vec<f64>| {
        let q = quantiles(&values, &[0.05, 0.5, 0.95]);
        println!("{name:16} truth {truth:7.3}  posterior {:7.3} [{:7.3}, {:7.3}]", q[1], q[0], q[2]);
    };
    report("beta0", truth.params.beta0, natural.iter().map(|n| n.beta0).collect());
    report("beta_nmr", truth.params.beta_nmr, natural.iter().map(|n| n.beta_nmr).collect());
    report(
        "gamma_early_hic",
        truth.params.gamma_early_hic,
        natural.iter().map(|n| n.gamma_early[0]).collect(),
    );
    report(
        "gamma_early_lmic",
        truth.gamma_early_lmic,
        natural.iter().map(|n| n.gamma_early[1]).collect(),
    );
    Ok(())
}
