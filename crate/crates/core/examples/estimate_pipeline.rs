//! Fit a small synthetic dataset, then produce country, regional and global
//! estimates and compare countries with their true proportion.
//!
//! cargo run --release --example estimate_pipeline [year]

use ipsb::aggregation::{aggregate_all, combine_regions};
use ipsb::estimation::{compute_weights, Predictor};
use ipsb::math::{inv_logit, quantiles};
use ipsb::posterior::{Model, ModelOptions};
use ipsb::sampler::{fit_model, SamplerConfig};
use ipsb::synthetic::{generate, ScenarioConfig};

fn summary(values: &[f64]) -> String {
    let q = quantiles(values, &[0.05, 0.5, 0.95]);
    format!("{:.3} [{:.3}, {:.3}]", q[1], q[0], q[2])
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let year: i32 = std::env::args().nth(1).map_or(Ok(2015), |s| s.parse())?;
    let scenario = ScenarioConfig {
        seed: 7,
        countries_per_region: 3,
        countries_without_data: 1,
        ..ScenarioConfig::default()
    };
    let (inputs, truth) = generate(&scenario)?;
    let model = Model::new(inputs.clone(), ModelOptions::default())?;
    let config = SamplerConfig {
        chains: 2,
        warmup: 1000,
        samples: 500,
        ..SamplerConfig::default()
    };
    let draws = fit_model(&model, &config)?;
    println!("max R-hat {:.3}", draws.max_rhat().unwrap_or(f64::NAN));

    let predictor = Predictor::new(&model, &draws)?;
    let weights = compute_weights(&inputs, &inputs.covariates)?;
    let countries = predictor.predict_all(&weights, 1)?;

    println!("\n{year}: country, coverage weight, estimate, mean place truth");
    for (c, w) in countries.iter().zip(&weights) {
        let places: Vec<f64> = inputs
            .hierarchy
            .places
            .iter()
            .filter(|p| inputs.hierarchy.countries[p.country].id == c.country)
            .filter_map(|p| truth.place_logit(&inputs, &p.id, year))
            .map(inv_logit)
            .collect();
        let truth_note = if places.is_empty() {
            "no data".to_string()
        } else {
            format!("{:.3}", places.iter().sum::<f64>() / places.len() as f64)
        };
        println!(
            "{:<8} {:.2}  {}  {}",
            c.country,
            w.mean_total(),
            summary(c.series.year(year).unwrap()),
            truth_note
        );
    }

    let region_map = inputs.hierarchy.region_map();
    let mut regions = aggregate_all(&countries, &inputs.covariates, &region_map)?;
    regions.push(combine_regions("Global", &regions)?);
    println!("\n{year}: regional estimates");
    for r in &regions {
        println!("{:<8} {}", r.region, summary(r.series.year(year).unwrap()));
    }
    Ok(())
}
