//! Small hand-built datasets for unit tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::{
    AuxObservation, CovariateTables, Definition, IncomeGroup, ModelInputs, Observation, SourceType, UndefinedPolicy,
    Window,
};

pub fn obs(id: u64, region: &str, country: &str, place: &str, year: i32, y: u64, z: u64) -> Observation {
    Observation {
        id,
        country: country.into(),
        place: place.into(),
        region: region.into(),
        year_start: year as f64,
        year_end: year as f64 + 1.0,
        y,
        z,
        source_type: SourceType::Crvs,
        definition: Definition::Late,
        income_group: IncomeGroup::Hic,
    }
}

pub fn aux(country: &str, definition: Definition, y: u64, z: u64, income: IncomeGroup) -> AuxObservation {
    AuxObservation {
        aux_country: country.into(),
        definition,
        y,
        z,
        income_group: income,
    }
}

/// Inputs over the default window with NMR 12 and SBR 15 everywhere and
/// `samples` covariate draws.
pub fn inputs_with(observations: Vec<Observation>, aux: Vec<AuxObservation>, samples: usize) -> ModelInputs {
    let mut countries: Vec<&str> = observations.iter().map(|o| o.country.as_str()).collect();
    countries.sort();
    countries.dedup();
    let window = Window::default();
    let cov = CovariateTables::constant(&countries, window, 12.0, 15.0, samples);
    ModelInputs::new(
        observations,
        aux,
        Arc::new(cov),
        &BTreeMap::new(),
        window,
        UndefinedPolicy::TreatAsLate,
    )
    .expect("valid toy inputs")
}

pub fn inputs(observations: Vec<Observation>) -> ModelInputs {
    inputs_with(observations, Vec::new(), 4)
}

/// Two regions, three countries (one with a single place), five places,
/// mixed sources and definitions, plus two aux countries.
pub fn mixed_inputs() -> ModelInputs {
    let mut list = Vec::new();
    let places = [
        ("R1", "A", "A1"),
        ("R1", "A", "A2"),
        ("R1", "B", "B1"),
        ("R2", "C", "C1"),
        ("R2", "C", "C2"),
    ];
    let sources = [
        SourceType::Crvs,
        SourceType::HealthFacility,
        SourceType::Hmis,
        SourceType::PopulationStudy,
    ];
    let mut id = 0;
    for (k, (r, c, p)) in places.iter().enumerate() {
        for j in 0..4 {
            id += 1;
            let mut o = obs(id, r, c, p, 2001 + 5 * j as i32 + k as i32, 10 + 3 * j as u64, 30 + 7 * k as u64);
            o.source_type = sources[(j + k) % 4];
            o.definition = if (j + k) % 3 == 0 { Definition::Early } else { Definition::Late };
            o.income_group = if *r == "R1" { IncomeGroup::Hic } else { IncomeGroup::Lmic };
            list.push(o);
        }
    }
    let aux = vec![
        aux("X", Definition::Late, 120, 300, IncomeGroup::Hic),
        aux("X", Definition::Early, 140, 420, IncomeGroup::Hic),
        aux("Y", Definition::Late, 200, 100, IncomeGroup::Lmic),
        aux("Y", Definition::Early, 260, 150, IncomeGroup::Lmic),
    ];
    inputs_with(list, aux, 4)
}
