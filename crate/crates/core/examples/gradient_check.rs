//! Compare the analytic gradient of the log posterior with finite
//! differences, for the full model and with each component switched off.
//!
//! cargo run --release --example gradient_check [points]

use ipsb::posterior::{check_gradients, Model, ModelOptions, GRADIENT_FD_STEP, GRADIENT_TOLERANCE};
use ipsb::synthetic::{generate, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let points: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    let (inputs, _) = generate(&ScenarioConfig::default())?;
    let full = ModelOptions::default();
    let variants = [
        ("full model", full.clone()),
        ("no region effects", ModelOptions { region_effects: false, ..full.clone() }),
        ("no NMR covariate", ModelOptions { nmr_covariate: false, ..full.clone() }),
        ("no spline trend", ModelOptions { spline_trend: false, ..full.clone() }),
        ("no source error", ModelOptions { source_error: false, ..full.clone() }),
        ("no definition adjustment", ModelOptions { definition_adjustment: false, ..full }),
    ];
    for (name, options) in variants {
        let model = Model::new(inputs.clone(), options)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = check_gradients(&model, points, GRADIENT_FD_STEP, 0.5, GRADIENT_TOLERANCE, &mut rng)?;
        println!(
            "{name:<26} {:>4} coords  max error {:.2e} at {:<28} {}",
            model.dim(),
            report.max_error,
            model.layout.names()[report.worst_coordinate],
            if report.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
