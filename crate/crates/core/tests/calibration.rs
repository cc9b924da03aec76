//! Calibration checks that need many fits: simulation-based calibration of
//! the sampler, error against data volume, and interval widths against
//! coverage. Slow in debug builds; run with `--release` when iterating.

use std::collections::BTreeMap;
use std::sync::Arc;

use ipsb::data::{
    CovariateTables, Definition, IncomeGroup, ModelInputs, Observation, SourceType, UndefinedPolicy, Window,
};
use ipsb::estimation::{compute_weights, predict_country, CountryWeights, PlaceWeight, Predictor};
use ipsb::math::{inv_logit, quantiles, std_normal};
use ipsb::posterior::{InterceptPrior, Model, ModelOptions, Scale};
use ipsb::sampler::{fit_model, SamplerConfig};
use ipsb::synthetic::{generate, ScenarioConfig};
use ipsb::validation::score_points;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SBC_REPLICATES: usize = 200;
const SBC_BINS: usize = 10;
/// Posterior draws kept per replicate after thinning; ranks take
/// `SBC_DRAWS + 1` values, split evenly across the bins.
const SBC_DRAWS: usize = 99;

fn sbc_options() -> ModelOptions {
    ModelOptions {
        country_effects: true,
        ..ModelOptions::intercept_only(InterceptPrior::Normal { mean: 0.0, sd: 1.0 })
    }
}

/// Draw intercept, country scale and country effects from the prior, then
/// binomial counts for three records per country.
fn sbc_replicate(seed: u64) -> (ModelInputs, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = Window::default();
    let beta0 = std_normal(&mut rng);
    let sigma = std_normal(&mut rng).abs();
    let countries: Vec<String> = (0..6).map(|c| format!("C{c}")).collect();
    let mut observations = Vec::new();
    for (c, country) in countries.iter().enumerate() {
        let p = inv_logit(beta0 + sigma * std_normal(&mut rng));
        for k in 0..3u64 {
            let n = 40;
            let y = Binomial::new(n, p).unwrap().sample(&mut rng);
            observations.push(Observation {
                id: c as u64 * 10 + k,
                country: country.clone(),
                place: format!("{country}-1"),
                region: "R".into(),
                year_start: 2005.0 + k as f64,
                year_end: 2006.0 + k as f64,
                y,
                z: n - y,
                source_type: SourceType::Crvs,
                definition: Definition::Late,
                income_group: IncomeGroup::Hic,
            });
        }
    }
    let refs: Vec<&str> = countries.iter().map(String::as_str).collect();
    let cov = CovariateTables::constant(&refs, window, 12.0, 100.0, 2);
    let inputs = ModelInputs::new(
        observations,
        Vec::new(),
        Arc::new(cov),
        &BTreeMap::new(),
        window,
        UndefinedPolicy::TreatAsLate,
    )
    .unwrap();
    (inputs, beta0, sigma)
}

fn chi_square_stat(ranks: &[usize]) -> f64 {
    let mut counts = [0usize; SBC_BINS];
    for &r in ranks {
        counts[r * SBC_BINS / (SBC_DRAWS + 1)] += 1;
    }
    let expected = ranks.len() as f64 / SBC_BINS as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn sbc_ranks_are_uniform() {
    let ranks: Vec<(usize, usize)> = (0..SBC_REPLICATES)
        .into_par_iter()
        .map(|r| {
            let (inputs, beta0, sigma) = sbc_replicate(9000 + r as u64);
            let model = Model::new(inputs, sbc_options()).unwrap();
            let config = SamplerConfig {
                chains: 1,
                warmup: 300,
                samples: 4 * SBC_DRAWS,
                seed: r as u64,
                ..SamplerConfig::default()
            };
            let draws = fit_model(&model, &config).unwrap();
            let (mut below_b, mut below_s) = (0, 0);
            for i in 0..SBC_DRAWS {
                let nat = model.natural(draws.draw(0, 4 * i + 3));
                below_b += usize::from(nat.beta0 < beta0);
                below_s += usize::from(nat.sigma(Scale::BetaCountry) < sigma);
            }
            (below_b, below_s)
        })
        .collect();
    let critical = ChiSquared::new((SBC_BINS - 1) as f64).unwrap().inverse_cdf(0.99);
    let b: Vec<usize> = ranks.iter().map(|r| r.0).collect();
    let s: Vec<usize> = ranks.iter().map(|r| r.1).collect();
    let (xb, xs) = (chi_square_stat(&b), chi_square_stat(&s));
    assert!(xb < critical, "intercept ranks: chi-square {xb:.2} >= {critical:.2}");
    assert!(xs < critical, "country scale ranks: chi-square {xs:.2} >= {critical:.2}");
}

fn volume_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        regions: 2,
        countries_per_region: 3,
        places_per_country: [2, 2],
        observations_per_place: [21, 21],
        multi_year_share: 0.0,
        ..ScenarioConfig::default()
    }
}

fn small_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 2,
        warmup: 1000,
        samples: 400,
        seed,
        target_accept: 0.9,
        ..SamplerConfig::default()
    }
}

/// Hold out one record per place; train on `keep` of the rest.
fn mae_with(inputs: &ModelInputs, keep: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_place: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in &inputs.observations {
        by_place.entry(o.place.as_str()).or_default().push(o);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for list in by_place.values_mut() {
        list.shuffle(&mut rng);
        test.push(list[0].clone());
        train.extend(list[1..=keep].iter().map(|o| (*o).clone()));
    }
    let model = Model::new(inputs.with_observations(train).unwrap(), ModelOptions::default()).unwrap();
    let draws = fit_model(&model, &small_sampler(seed)).unwrap();
    let points = score_points(&test, &model, &draws, seed).unwrap();
    points.iter().map(|p| p.abs_error()).sum::<f64>() / points.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    quantiles(&xs, &[0.5])[0]
}

#[test]
fn error_shrinks_with_more_records_per_place() {
    let (rich, poor): (Vec<f64>, Vec<f64>) = (0..6u64)
        .into_par_iter()
        .map(|s| {
            let (inputs, _) = generate(&volume_scenario(700 + s)).unwrap();
            // the same held-out records in both fits
            (mae_with(&inputs, 20, s), mae_with(&inputs, 2, s))
        })
        .unzip();
    let (m20, m2) = (median(rich), median(poor));
    assert!(m20 < m2, "median MAE with 20 records {m20:.4} not below 2 records {m2:.4}");
}

#[test]
fn intervals_widen_as_coverage_falls() {
    let config = ScenarioConfig {
        seed: 31,
        regions: 2,
        countries_per_region: 2,
        places_per_country: [1, 1],
        ..ScenarioConfig::default()
    };
    let (inputs, _) = generate(&config).unwrap();
    let model = Model::new(inputs.clone(), ModelOptions::default()).unwrap();
    let draws = fit_model(&model, &small_sampler(3)).unwrap();
    let predictor = Predictor::new(&model, &draws).unwrap();
    let weights = compute_weights(&inputs, &inputs.covariates).unwrap();
    for w in &weights {
        let place = predictor.predict_place(&w.places[0].place).unwrap();
        let unobserved = predictor.predict_unobserved(&w.country, 5).unwrap();
        let with = |share: f64| {
            let j = w.total.len();
            let fixed = CountryWeights {
                country: w.country.clone(),
                places: vec![PlaceWeight {
                    place: w.places[0].place.clone(),
                    samples: vec![share; j],
                }],
                total: vec![share; j],
                downscaled: vec![false; j],
            };
            predict_country(&fixed, std::slice::from_ref(&place), &unobserved).unwrap()
        };
        let (partial, full) = (with(0.3), with(1.0));
        for (k, year) in full.series.years.iter().enumerate() {
            let width = |v: &[f64]| {
                let q = quantiles(v, &[0.05, 0.95]);
                q[1] - q[0]
            };
            let (wp, wf) = (width(&partial.series.samples[k]), width(&full.series.samples[k]));
            assert!(wp >= wf, "{} {year}: width {wp:.4} at 0.3 below {wf:.4} at 1", w.country);
        }
    }
}
