//! Generate a synthetic dataset and write it in the input file format.
//!
//! cargo run --example simulate_scenario [out-dir] [seed]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ipsb::synthetic::{generate, write_scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("ipsb-scenario"), PathBuf::from);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let scenario = ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    };
    let (inputs, truth) = generate(&scenario)?;
    std::fs::create_dir_all(&out)?;
    write_scenario(&out, &inputs, &truth)?;

    let mut by_source: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &inputs.observations {
        *by_source.entry(o.source_type.token()).or_default() += 1;
    }
    println!(
        "{} regions, {} countries, {} places, {} records, {} aux records",
        inputs.hierarchy.regions.len(),
        inputs.hierarchy.countries.len(),
        inputs.hierarchy.places.len(),
        inputs.observations.len(),
        inputs.aux.len()
    );
    for (source, n) in by_source {
        println!("  {source:<18} {n}");
    }
    println!("true beta0 {:.2}, beta_nmr {:.2}", truth.params.beta0, truth.params.beta_nmr);
    println!("written to {}", out.display());
    Ok(())
}
