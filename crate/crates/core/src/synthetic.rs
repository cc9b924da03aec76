//! Forward simulation of the model: hierarchy, effects, spline trends,
//! source errors, definition shifts and binomial counts, plus covariate
//! "posterior sample" tables with known truth behind them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    write_inputs, AuxObservation, CovariateTables, DataError, Definition, IncomeGroup, InputPaths, ModelInputs,
    Observation, SourceType, UndefinedPolicy, Window,
};
use crate::math::{inv_logit, std_normal};
use crate::splines::{build_basis, SplineError};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Mixes may be rounded table rows; they are renormalized after this check.
const MIX_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("cannot read scenario {path}: {reason}")]
    Read { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shares of observations by source type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceMix {
    pub crvs: f64,
    pub health_facility: f64,
    pub population_study: f64,
    pub hmis: f64,
}

impl SourceMix {
    fn weights(&self) -> [(SourceType, f64); 4] {
        [
            (SourceType::Crvs, self.crvs),
            (SourceType::HealthFacility, self.health_facility),
            (SourceType::PopulationStudy, self.population_study),
            (SourceType::Hmis, self.hmis),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefinitionMix {
    pub early: f64,
    pub late: f64,
    pub undefined: f64,
}

impl DefinitionMix {
    fn weights(&self) -> [(Definition, f64); 3] {
        [
            (Definition::Early, self.early),
            (Definition::Late, self.late),
            (Definition::Undefined, self.undefined),
        ]
    }
}

/// Region archetype; region `r` uses template `r mod len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTemplate {
    pub name: String,
    pub income: IncomeGroup,
    /// Range of country NMR levels at the start of the window.
    pub nmr: [f64; 2],
    pub source_mix: SourceMix,
    pub definition_mix: DefinitionMix,
}

/// True values of every model parameter that is not drawn per entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueParameters {
    pub beta0: f64,
    pub beta_nmr: f64,
    pub sigma_region: f64,
    pub sigma_country: f64,
    pub sigma_place: f64,
    pub sigma_delta: f64,
    pub gamma_early_hic: f64,
    pub sigma_gamma: f64,
    pub sigma_eps_health_facility: f64,
    pub sigma_eps_hmis: f64,
    pub sigma_eps_population_study: f64,
    /// Aux-country level `ν ~ N(nu_mean, nu_sd²)`.
    pub nu_mean: f64,
    pub nu_sd: f64,
}

impl Default for TrueParameters {
    fn default() -> Self {
        Self {
            // kept well inside the N(0, 1) intercept prior: at -3 the prior
            // pulls the intercept up and β_NMR down with it on small datasets
            beta0: -0.5,
            beta_nmr: 0.8,
            sigma_region: 0.3,
            sigma_country: 0.3,
            sigma_place: 0.2,
            sigma_delta: 0.05,
            gamma_early_hic: 0.31,
            sigma_gamma: 0.1,
            sigma_eps_health_facility: 0.3,
            sigma_eps_hmis: 0.4,
            sigma_eps_population_study: 0.25,
            nu_mean: -1.0,
            nu_sd: 0.7,
        }
    }
}

impl TrueParameters {
    fn sigma_eps(&self, source: SourceType) -> f64 {
        match source {
            SourceType::Crvs => 0.0,
            SourceType::HealthFacility => self.sigma_eps_health_facility,
            SourceType::Hmis => self.sigma_eps_hmis,
            SourceType::PopulationStudy => self.sigma_eps_population_study,
        }
    }

    fn scales(&self) -> [(&'static str, f64); 9] {
        [
            ("sigma_region", self.sigma_region),
            ("sigma_country", self.sigma_country),
            ("sigma_place", self.sigma_place),
            ("sigma_delta", self.sigma_delta),
            ("sigma_gamma", self.sigma_gamma),
            ("sigma_eps_health_facility", self.sigma_eps_health_facility),
            ("sigma_eps_hmis", self.sigma_eps_hmis),
            ("sigma_eps_population_study", self.sigma_eps_population_study),
            ("nu_sd", self.nu_sd),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub year_start: i32,
    pub year_end: i32,
    pub regions: usize,
    pub countries_per_region: usize,
    /// Extra countries per region with covariates but no observations.
    pub countries_without_data: usize,
    /// Inclusive integer range.
    pub places_per_country: [usize; 2],
    /// Inclusive integer range; capped at the number of window years.
    pub observations_per_place: [usize; 2],
    /// Range of a place's yearly stillbirth count (log-uniform).
    pub counts: [f64; 2],
    /// Range of the share of a country's stillbirths its places cover.
    pub coverage: [f64; 2],
    /// Share of observations reporting over two calendar years.
    pub multi_year_share: f64,
    /// Covariate samples per country-year.
    pub samples: usize,
    /// Log-scale jitter of the NMR and SBR samples around the truth.
    pub nmr_dispersion: f64,
    pub sbr_dispersion: f64,
    pub aux_countries: usize,
    pub aux_counts: [f64; 2],
    pub aux_hic_share: f64,
    pub undefined_policy: UndefinedPolicy,
    pub truth: TrueParameters,
    pub templates: Vec<RegionTemplate>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            year_start: 2000,
            year_end: 2021,
            regions: 3,
            countries_per_region: 4,
            countries_without_data: 0,
            places_per_country: [1, 3],
            observations_per_place: [4, 8],
            counts: [100.0, 2000.0],
            coverage: [0.3, 1.0],
            multi_year_share: 0.1,
            samples: 200,
            nmr_dispersion: 0.1,
            sbr_dispersion: 0.1,
            aux_countries: 16,
            aux_counts: [500.0, 3000.0],
            aux_hic_share: 0.5,
            undefined_policy: UndefinedPolicy::TreatAsLate,
            truth: TrueParameters::default(),
            templates: default_templates(),
        }
    }
}

/// Three archetypes after the observed topology: a CRVS-dominated
/// high-income region, a mixed middle region and a survey/HMIS region.
pub fn default_templates() -> Vec<RegionTemplate> {
    vec![
        RegionTemplate {
            name: "north".into(),
            income: IncomeGroup::Hic,
            nmr: [2.0, 6.0],
            source_mix: SourceMix {
                crvs: 0.980,
                health_facility: 0.015,
                population_study: 0.004,
                hmis: 0.0,
            },
            definition_mix: DefinitionMix {
                early: 0.465,
                late: 0.526,
                undefined: 0.009,
            },
        },
        RegionTemplate {
            name: "latin".into(),
            income: IncomeGroup::Lmic,
            nmr: [6.0, 20.0],
            source_mix: SourceMix {
                crvs: 0.794,
                health_facility: 0.044,
                population_study: 0.162,
                hmis: 0.0,
            },
            definition_mix: DefinitionMix {
                early: 0.176,
                late: 0.570,
                undefined: 0.254,
            },
        },
        RegionTemplate {
            name: "south".into(),
            income: IncomeGroup::Lmic,
            nmr: [18.0, 40.0],
            source_mix: SourceMix {
                crvs: 0.007,
                health_facility: 0.139,
                population_study: 0.375,
                hmis: 0.479,
            },
            definition_mix: DefinitionMix {
                early: 0.254,
                late: 0.621,
                undefined: 0.125,
            },
        },
    ]
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SyntheticError> {
    Err(SyntheticError::InvalidConfig(msg.into()))
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2], min: T) -> Result<(), SyntheticError> {
    if !(r[0] >= min && r[0] <= r[1]) {
        return invalid(format!("{name} must be an increasing range starting at or above {min:?}, got {r:?}"));
    }
    Ok(())
}

fn check_mix(name: &str, weights: &[f64]) -> Result<(), SyntheticError> {
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return invalid(format!("{name} shares must lie in [0, 1]"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > MIX_TOLERANCE {
        return invalid(format!("{name} shares sum to {total}, not 1"));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SyntheticError> {
        let config: Self = toml::from_str(text).map_err(|e| SyntheticError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let text = std::fs::read_to_string(path).map_err(|e| SyntheticError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn window(&self) -> Result<Window, SyntheticError> {
        Window::new(self.year_start, self.year_end).map_err(|e| SyntheticError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        self.window()?;
        if self.regions == 0 || self.countries_per_region == 0 {
            return invalid("regions and countries_per_region must be positive");
        }
        check_range("places_per_country", &self.places_per_country, 1)?;
        check_range("observations_per_place", &self.observations_per_place, 1)?;
        check_range("counts", &self.counts, 1.0)?;
        check_range("aux_counts", &self.aux_counts, 1.0)?;
        if !(self.coverage[0] > 0.0 && self.coverage[0] <= self.coverage[1] && self.coverage[1] <= 1.0) {
            return invalid("coverage must be a range inside (0, 1]");
        }
        for (name, p) in [
            ("multi_year_share", self.multi_year_share),
            ("aux_hic_share", self.aux_hic_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.samples == 0 {
            return invalid("samples must be positive");
        }
        if !(self.nmr_dispersion >= 0.0 && self.sbr_dispersion >= 0.0) {
            return invalid("dispersions must be non-negative");
        }
        // zero scales give the noiseless limit
        for (name, s) in self.truth.scales() {
            if !(s >= 0.0 && s.is_finite()) {
                return invalid(format!("{name} must be a non-negative number, got {s}"));
            }
        }
        if self.templates.is_empty() {
            return invalid("at least one region template is required");
        }
        for t in &self.templates {
            let s = &t.source_mix;
            check_mix(
                &format!("{} source_mix", t.name),
                &[s.crvs, s.health_facility, s.population_study, s.hmis],
            )?;
            let d = &t.definition_mix;
            check_mix(&format!("{} definition_mix", t.name), &[d.early, d.late, d.undefined])?;
            if !(t.nmr[0] > 0.0 && t.nmr[0] <= t.nmr[1]) {
                return invalid(format!("{} nmr range must be positive and increasing", t.name));
            }
        }
        Ok(())
    }
}

fn choose<T: Copy, R: Rng>(rng: &mut R, weights: &[(T, f64)]) -> T {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in weights {
        if u < w {
            return v;
        }
        u -= w;
    }
    weights.iter().rev().find(|w| w.1 > 0.0).expect("positive weight").0
}

fn log_uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    (range[0].ln() + rng.random::<f64>() * (range[1].ln() - range[0].ln())).exp()
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + rng.random::<f64>() * (range[1] - range[0])
}

fn int_between<R: Rng>(rng: &mut R, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    Binomial::new(n, p).expect("probability in [0, 1]").sample(rng)
}

/// Latent values behind one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTruth {
    pub id: u64,
    /// Mean logit including the definition shift, without the error term.
    pub mu: f64,
    pub epsilon: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: TrueParameters,
    pub gamma_early_lmic: f64,
    pub beta_region: BTreeMap<String, f64>,
    pub beta_country: BTreeMap<String, f64>,
    pub beta_place: BTreeMap<String, f64>,
    /// Spline increments per place.
    pub delta: BTreeMap<String, Vec<f64>>,
    /// Trend per place over the window years.
    pub trend: BTreeMap<String, Vec<f64>>,
    pub nu: BTreeMap<String, f64>,
    /// Share of each country's stillbirths covered by its places.
    pub coverage: BTreeMap<String, f64>,
    pub observations: Vec<ObservationTruth>,
}

impl GroundTruth {
    pub fn gamma(&self, definition: Definition, income: IncomeGroup) -> f64 {
        match (definition, income) {
            (Definition::Early, IncomeGroup::Hic) => self.params.gamma_early_hic,
            (Definition::Early, IncomeGroup::Lmic) => self.gamma_early_lmic,
            _ => 0.0,
        }
    }

    /// True logit proportion of `place` in `year` for late-definition
    /// stillbirths, using the NMR point value.
    pub fn place_logit(&self, inputs: &ModelInputs, place: &str, year: i32) -> Option<f64> {
        let h = &inputs.hierarchy;
        let p = h.place(place)?;
        let c = &h.countries[h.places[p].country];
        let region = &h.regions[c.region];
        let nmr = inputs.covariates.nmr_point(&c.id, year)?;
        let k = inputs.window.contains(year).then(|| inputs.window.offset(year))?;
        Some(
            self.params.beta0
                + self.beta_region[region]
                + self.beta_country[&c.id]
                + self.beta_place[place]
                + self.params.beta_nmr * nmr.ln()
                + self.trend[place][k],
        )
    }

    pub fn write(&self, path: &Path) -> Result<(), SyntheticError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SyntheticError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

struct PlacePlan {
    id: String,
    size: f64,
    source: SourceType,
}

/// Simulate a dataset. Every draw comes from one seeded stream in a fixed
/// order, so equal configs give equal outputs.
pub fn generate(config: &ScenarioConfig) -> Result<(ModelInputs, GroundTruth), SyntheticError> {
    config.validate()?;
    let window = config.window()?;
    let basis = build_basis(window.start, window.end)?;
    let free_len = basis.free_len();
    let years: Vec<i32> = window.years().collect();
    let t = &config.truth;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let gamma_early_lmic = t.gamma_early_hic + t.sigma_gamma * std_normal(&mut rng);
    let mut truth = GroundTruth {
        params: t.clone(),
        gamma_early_lmic,
        beta_region: BTreeMap::new(),
        beta_country: BTreeMap::new(),
        beta_place: BTreeMap::new(),
        delta: BTreeMap::new(),
        trend: BTreeMap::new(),
        nu: BTreeMap::new(),
        coverage: BTreeMap::new(),
        observations: Vec::new(),
    };

    let mut cov = CovariateTables::default();
    let mut observations = Vec::new();
    let mut region_map = BTreeMap::new();
    let mut next_id = 1u64;

    for r in 0..config.regions {
        let template = &config.templates[r % config.templates.len()];
        let region = format!("R{}", r + 1);
        let beta_r = t.sigma_region * std_normal(&mut rng);
        truth.beta_region.insert(region.clone(), beta_r);
        let source_weights = template.source_mix.weights();
        let definition_weights = template.definition_mix.weights();

        for c in 0..config.countries_per_region + config.countries_without_data {
            let country = format!("{region}C{}", c + 1);
            region_map.insert(country.clone(), region.clone());
            let beta_c = t.sigma_country * std_normal(&mut rng);
            truth.beta_country.insert(country.clone(), beta_c);

            // declining NMR path
            let nmr0 = log_uniform(&mut rng, template.nmr);
            let decline = uniform(&mut rng, [0.01, 0.04]);
            let nmr_path: Vec<f64> = years
                .iter()
                .map(|&y| nmr0 * (-decline * (y - window.start) as f64).exp())
                .collect();

            let has_data = c < config.countries_per_region;
            let n_places = if has_data {
                int_between(&mut rng, config.places_per_country)
            } else {
                0
            };
            let plans: Vec<PlacePlan> = (0..n_places)
                .map(|p| PlacePlan {
                    id: format!("{country}P{}", p + 1),
                    size: log_uniform(&mut rng, config.counts),
                    source: choose(&mut rng, &source_weights),
                })
                .collect();
            let coverage = if has_data {
                uniform(&mut rng, config.coverage)
            } else {
                config.coverage[0]
            };
            truth.coverage.insert(country.clone(), coverage);
            // total stillbirths chosen so the places cover `coverage` of them
            let total_sb = if has_data {
                plans.iter().map(|p| p.size).sum::<f64>() / coverage
            } else {
                log_uniform(&mut rng, config.counts) / coverage
            };

            for (k, &y) in years.iter().enumerate() {
                let key = (country.clone(), y);
                cov.nmr_point.insert(key.clone(), nmr_path[k]);
                let jitter = |rng: &mut ChaCha8Rng, x: f64, sd: f64| -> Vec<f64> {
                    (0..config.samples).map(|_| x * (sd * std_normal(rng)).exp()).collect()
                };
                let nmr_samples = jitter(&mut rng, nmr_path[k], config.nmr_dispersion);
                cov.nmr_samples.insert(key.clone(), nmr_samples);
                let sbr_samples = jitter(&mut rng, total_sb, config.sbr_dispersion);
                cov.sbr_samples.insert(key, sbr_samples);
            }

            let single_place = plans.len() == 1;
            for plan in &plans {
                let beta_p = if single_place {
                    0.0
                } else {
                    t.sigma_place * std_normal(&mut rng)
                };
                let delta: Vec<f64> = (0..free_len).map(|_| t.sigma_delta * std_normal(&mut rng)).collect();
                let trend: Vec<f64> = years
                    .iter()
                    .map(|&y| basis.bz_row(y).iter().zip(&delta).map(|(a, b)| a * b).sum())
                    .collect();
                truth.beta_place.insert(plan.id.clone(), beta_p);

                let n_obs = int_between(&mut rng, config.observations_per_place).min(years.len());
                let mut starts: Vec<usize> = sample_indices(&mut rng, years.len(), n_obs).into_vec();
                starts.sort_unstable();
                for k in starts {
                    let start = years[k];
                    let span = if rng.random::<f64>() < config.multi_year_share && start < window.end {
                        2.0
                    } else {
                        1.0
                    };
                    let year_start = start as f64;
                    let year_end = year_start + span;
                    let grid = (0.5 * (year_start + year_end)).floor() as i32;
                    let g = window.offset(grid);
                    let definition = choose(&mut rng, &definition_weights);
                    let n = ((plan.size * span * (0.2 * std_normal(&mut rng)).exp()).round() as u64).max(1);
                    let z_eps = std_normal(&mut rng);
                    let epsilon = t.sigma_eps(plan.source) * z_eps;
                    let mu = t.beta0
                        + beta_r
                        + beta_c
                        + beta_p
                        + t.beta_nmr * nmr_path[g].ln()
                        + trend[g]
                        + truth.gamma(definition, template.income);
                    let phi = inv_logit(mu + epsilon);
                    let y = binomial(&mut rng, n, phi);
                    let id = next_id;
                    next_id += 1;
                    observations.push(Observation {
                        id,
                        country: country.clone(),
                        place: plan.id.clone(),
                        region: region.clone(),
                        year_start,
                        year_end,
                        y,
                        z: n - y,
                        source_type: plan.source,
                        definition,
                        income_group: template.income,
                    });
                    truth.observations.push(ObservationTruth { id, mu, epsilon, phi });
                }
                truth.delta.insert(plan.id.clone(), delta);
                truth.trend.insert(plan.id.clone(), trend);
            }
        }
    }

    let mut aux = Vec::new();
    for a in 0..config.aux_countries {
        let id = format!("AUX{:02}", a + 1);
        let income = if rng.random::<f64>() < config.aux_hic_share {
            IncomeGroup::Hic
        } else {
            IncomeGroup::Lmic
        };
        let nu = t.nu_mean + t.nu_sd * std_normal(&mut rng);
        truth.nu.insert(id.clone(), nu);
        for definition in [Definition::Late, Definition::Early] {
            let n = log_uniform(&mut rng, config.aux_counts).round() as u64;
            let y = binomial(&mut rng, n, inv_logit(nu + truth.gamma(definition, income)));
            aux.push(AuxObservation {
                aux_country: id.clone(),
                definition,
                y,
                z: n - y,
                income_group: income,
            });
        }
    }

    let inputs = ModelInputs::new(
        observations,
        aux,
        Arc::new(cov),
        &region_map,
        window,
        config.undefined_policy,
    )?;
    Ok((inputs, truth))
}

/// Write the input files and `ground_truth.json` into `dir`.
pub fn write_scenario(dir: &Path, inputs: &ModelInputs, truth: &GroundTruth) -> Result<InputPaths, SyntheticError> {
    let paths = write_inputs(dir, inputs)?;
    truth.write(&dir.join(GROUND_TRUTH_FILE))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_inputs;

    fn noiseless() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        let t = &mut c.truth;
        t.sigma_region = 0.0;
        t.sigma_country = 0.0;
        t.sigma_place = 0.0;
        t.sigma_delta = 0.0;
        t.sigma_gamma = 0.0;
        t.sigma_eps_health_facility = 0.0;
        t.sigma_eps_hmis = 0.0;
        t.sigma_eps_population_study = 0.0;
        c
    }

    #[test]
    fn zero_case_is_one_half() {
        let mut c = noiseless();
        c.truth.beta0 = 0.0;
        c.truth.beta_nmr = 0.0;
        c.truth.gamma_early_hic = 0.0;
        let (inputs, truth) = generate(&c).unwrap();
        assert!(!inputs.observations.is_empty());
        for o in &truth.observations {
            assert_eq!(o.phi, 0.5);
        }
    }

    #[test]
    fn definition_shift_is_additive() {
        let mut c = noiseless();
        c.truth.gamma_early_hic = 0.3;
        let (inputs, truth) = generate(&c).unwrap();
        let mut early = 0;
        for (o, t) in inputs.observations.iter().zip(&truth.observations) {
            assert_eq!(o.id, t.id);
            let late = c.truth.beta0 + c.truth.beta_nmr * inputs.covariates.nmr_point(&o.country, o.grid_year()).unwrap().ln();
            let shift = if o.definition == Definition::Early {
                early += 1;
                0.3
            } else {
                0.0
            };
            assert!((t.mu - late - shift).abs() < 1e-12, "{} vs {}", t.mu, late + shift);
        }
        assert!(early > 0);
    }

    #[test]
    fn large_counts_match_the_probability() {
        let mut c = ScenarioConfig::default();
        c.counts = [1e5, 1e5];
        c.multi_year_share = 0.0;
        let (inputs, truth) = generate(&c).unwrap();
        let mut gap = 0.0;
        for (o, t) in inputs.observations.iter().zip(&truth.observations) {
            let d = o.proportion() - t.phi;
            // binomial sd is at most 0.5 / sqrt(n) ~ 0.0013 at n ~ 1e5
            assert!(d.abs() < 0.01, "{d}");
            gap += d;
        }
        let mean_gap = gap / inputs.observations.len() as f64;
        assert!(mean_gap.abs() < 0.005, "{mean_gap}");
    }

    #[test]
    fn deterministic_under_seed() {
        let c = ScenarioConfig::default();
        let (a, ta) = generate(&c).unwrap();
        let (b, tb) = generate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (d, _) = generate(&ScenarioConfig { seed: 2, ..c }).unwrap();
        assert_ne!(a.observations, d.observations);
    }

    #[test]
    fn files_round_trip() {
        let c = ScenarioConfig {
            countries_without_data: 1,
            ..ScenarioConfig::default()
        };
        let (inputs, truth) = generate(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_scenario(dir.path(), &inputs, &truth).unwrap();
        let back = load_inputs(&paths, inputs.window, c.undefined_policy).unwrap();
        assert_eq!(back.observations, inputs.observations);
        assert_eq!(back.aux, inputs.aux);
        assert_eq!(back.hierarchy, inputs.hierarchy);
        assert_eq!(*back.covariates, *inputs.covariates);
        assert_eq!(GroundTruth::read(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(), truth);
        assert_eq!(inputs.hierarchy.countries.iter().filter(|c| !c.has_data).count(), 3);
    }

    #[test]
    fn config_toml_round_trip_and_errors() {
        let c = ScenarioConfig::default();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ScenarioConfig::from_toml("seed = 9\nregions = 2\n[truth]\ngamma_early_hic = 0.2\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.truth.gamma_early_hic, 0.2);
        assert_eq!(partial.truth.beta0, TrueParameters::default().beta0);

        for bad in [
            "regions = 0",
            "coverage = [0.5, 1.5]",
            "places_per_country = [3, 1]",
            "[truth]\nsigma_place = -1.0",
            "unknown_key = 1",
            "year_start = 2030",
        ] {
            assert!(
                matches!(ScenarioConfig::from_toml(bad), Err(SyntheticError::InvalidConfig(_))),
                "{bad}"
            );
        }
        let mut c = ScenarioConfig::default();
        c.templates[0].source_mix.crvs = 0.5;
        assert!(matches!(c.validate(), Err(SyntheticError::InvalidConfig(_))));
    }

    #[test]
    fn weights_recover_coverage() {
        let mut c = ScenarioConfig::default();
        c.multi_year_share = 0.0;
        c.sbr_dispersion = 0.0;
        let (inputs, truth) = generate(&c).unwrap();
        // each place's yearly count is its size times a jitter of sd 0.2, so
        // a country's mean weight sits near its coverage
        let weights = crate::estimation::compute_weights(&inputs, &inputs.covariates).unwrap();
        for w in &weights {
            let cov = truth.coverage[&w.country];
            assert!((w.mean_total() - cov).abs() < 0.5 * cov, "{} vs {cov}", w.mean_total());
        }
    }

    #[test]
    fn place_logit_matches_observation_mu() {
        let (inputs, truth) = generate(&ScenarioConfig::default()).unwrap();
        for (o, t) in inputs.observations.iter().zip(&truth.observations) {
            let base = truth.place_logit(&inputs, &o.place, o.grid_year()).unwrap();
            let gamma = truth.gamma(o.definition, o.income_group);
            assert!((base + gamma - t.mu).abs() < 1e-12);
        }
    }
}
