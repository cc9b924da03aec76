//! Joint log-posterior of the place-level model and its exact gradient.
//!
//! The sampled vector lives in an unconstrained space:
//!
//! * every standard deviation is stored as `log σ` (half-normal prior on
//!   `σ`, plus the log-Jacobian `log σ`);
//! * country and place effects, non-sampling errors and spline increments
//!   are non-centred: the vector holds standard-normal raw values and the
//!   model scales them, e.g. `β_c = σ_{β_c}·b_c`, `ε_i = σ_{ε,s[i]}·e_i`,
//!   `Δ_p = σ_Δ·u_p`;
//! * region effects and the low/middle-income definition adjustment are
//!   few and well identified, so they are sampled directly;
//! * the intercept coordinate is `β0 + mean_r β_r + β_NMR·m̄` with `m̄` the
//!   mean log NMR over observations. [`Model::beta0`] undoes the shift.
//!
//! The logit of the intrapartum proportion for observation `i` is
//!
//! ```text
//! β0 + β_r + β_c + β_p + β_NMR·log NMR_{c,t} + η_{p,t} + γ_{g,m} + ε_i
//! ```
//!
//! with `γ_late = 0` and `β_p = 0` when a country reports a single place.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use thiserror::Error;

use crate::data::{Definition, IncomeGroup, ModelInputs, SourceType};
use crate::math::{std_normal, binomial_logit_dx, binomial_logit_lpmf, half_normal_lpdf, inv_logit, normal_lpdf, softplus};
use crate::splines::{build_basis, SplineBasis, SplineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("non-finite log density in term `{0}`")]
    NonFiniteDensity(String),
    #[error("parameter vector has length {got}, layout expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// A differentiable log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Write the gradient into `grad` and return the log density.
    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, PosteriorError>;
}

/// Prior on the global intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterceptPrior {
    Normal { mean: f64, sd: f64 },
    /// `inv_logit(β0) ~ Beta(a, b)`, expressed on the logit scale.
    LogitBeta { a: f64, b: f64 },
}

/// Switches for the model components. The defaults give the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub region_effects: bool,
    pub country_effects: bool,
    pub place_effects: bool,
    pub nmr_covariate: bool,
    pub spline_trend: bool,
    pub source_error: bool,
    pub definition_adjustment: bool,
    pub intercept_prior: InterceptPrior,
    pub beta_nmr_prior_sd: f64,
    pub nu_prior_sd: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            region_effects: true,
            country_effects: true,
            place_effects: true,
            nmr_covariate: true,
            spline_trend: true,
            source_error: true,
            definition_adjustment: true,
            intercept_prior: InterceptPrior::Normal { mean: 0.0, sd: 1.0 },
            beta_nmr_prior_sd: 10.0,
            nu_prior_sd: 10.0,
        }
    }
}

impl ModelOptions {
    /// Intercept-only model: one binomial probability shared by every
    /// observation.
    pub fn intercept_only(intercept_prior: InterceptPrior) -> Self {
        Self {
            region_effects: false,
            country_effects: false,
            place_effects: false,
            nmr_covariate: false,
            spline_trend: false,
            source_error: false,
            definition_adjustment: false,
            intercept_prior,
            ..Self::default()
        }
    }
}

/// Standard deviations carried by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    EpsilonHealthFacility,
    EpsilonHmis,
    EpsilonPopulationStudy,
    BetaRegion,
    BetaCountry,
    BetaPlace,
    Delta,
    Gamma,
}

impl Scale {
    pub const ALL: [Scale; 8] = [
        Scale::EpsilonHealthFacility,
        Scale::EpsilonHmis,
        Scale::EpsilonPopulationStudy,
        Scale::BetaRegion,
        Scale::BetaCountry,
        Scale::BetaPlace,
        Scale::Delta,
        Scale::Gamma,
    ];

    pub fn epsilon(source: SourceType) -> Option<Scale> {
        source.noisy_index().map(|i| Scale::ALL[i])
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::EpsilonHealthFacility => "sigma_eps_health_facility",
            Scale::EpsilonHmis => "sigma_eps_hmis",
            Scale::EpsilonPopulationStudy => "sigma_eps_population_study",
            Scale::BetaRegion => "sigma_beta_region",
            Scale::BetaCountry => "sigma_beta_country",
            Scale::BetaPlace => "sigma_beta_place",
            Scale::Delta => "sigma_delta",
            Scale::Gamma => "sigma_gamma",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Contiguous run of coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Maps named model parameters onto the flat sampled vector. Blocks are
/// disjoint and tile `0..dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub dim: usize,
    pub beta0: usize,
    /// Region effects (sampled directly), one per region with data.
    pub beta_region: Option<Block>,
    pub region_slot: Vec<Option<usize>>,
    pub beta_country: Option<Block>,
    pub country_slot: Vec<Option<usize>>,
    /// Raw place effects; places of single-place countries have no slot.
    pub beta_place: Option<Block>,
    pub place_slot: Vec<Option<usize>>,
    pub beta_nmr: Option<usize>,
    /// Mean log NMR over the observations. The sampled intercept is
    /// `β0 + σ_r·mean(β̃_r) + β_NMR·nmr_centre`: the level the data pin down,
    /// rather than the loosely identified `β0` itself.
    pub nmr_centre: f64,
    /// Standardized spline increments, `free_len` per place.
    pub spline: Option<Block>,
    pub free_len: usize,
    /// Raw non-sampling errors, one per non-CRVS observation.
    pub epsilon: Option<Block>,
    pub obs_eps_slot: Vec<Option<usize>>,
    pub gamma_early_hic: Option<usize>,
    /// Low/middle-income adjustment, centred on the high-income one.
    pub gamma_early_lmic: Option<usize>,
    pub nu: Option<Block>,
    pub aux_countries: Vec<String>,
    pub log_sigma: BTreeMap<Scale, usize>,
    pub region_ids: Vec<String>,
    pub country_ids: Vec<String>,
    pub place_ids: Vec<String>,
    pub obs_ids: Vec<u64>,
}

impl ParameterLayout {
    pub fn build(inputs: &ModelInputs, options: &ModelOptions, free_len: usize) -> Self {
        let h = &inputs.hierarchy;
        let mut next = 0usize;
        let mut take = |n: usize| {
            let b = Block { start: next, len: n };
            next += n;
            b
        };
        let beta0 = take(1).start;

        let mut region_slot = vec![None; h.regions.len()];
        let beta_region = options.region_effects.then(|| {
            let with_data: Vec<usize> = (0..h.regions.len())
                .filter(|&r| h.countries_in_region(r).any(|c| h.countries[c].has_data))
                .collect();
            let b = take(with_data.len());
            for (k, r) in with_data.into_iter().enumerate() {
                region_slot[r] = Some(b.start + k);
            }
            b
        });

        let mut country_slot = vec![None; h.countries.len()];
        let beta_country = options.country_effects.then(|| {
            let with_data: Vec<usize> = (0..h.countries.len()).filter(|&c| h.countries[c].has_data).collect();
            let b = take(with_data.len());
            for (k, c) in with_data.into_iter().enumerate() {
                country_slot[c] = Some(b.start + k);
            }
            b
        });

        let mut place_slot = vec![None; h.places.len()];
        let beta_place = options.place_effects.then(|| {
            let free: Vec<usize> = (0..h.places.len())
                .filter(|&p| !h.countries[h.places[p].country].single_place)
                .collect();
            let b = take(free.len());
            for (k, p) in free.into_iter().enumerate() {
                place_slot[p] = Some(b.start + k);
            }
            b
        });

        let beta_nmr = options.nmr_covariate.then(|| take(1).start);
        let nmr_centre = if options.nmr_covariate && !inputs.observations.is_empty() {
            let total: f64 = inputs
                .observations
                .iter()
                .zip(&inputs.obs_index)
                .map(|(o, idx)| {
                    inputs
                        .covariates
                        .nmr_point(&o.country, idx.year)
                        .expect("validated covariate coverage")
                        .ln()
                })
                .sum();
            total / inputs.observations.len() as f64
        } else {
            0.0
        };
        let spline = options.spline_trend.then(|| take(h.places.len() * free_len));

        let mut obs_eps_slot = vec![None; inputs.observations.len()];
        let epsilon = options.source_error.then(|| {
            let noisy: Vec<usize> = inputs
                .observations
                .iter()
                .enumerate()
                .filter(|(_, o)| o.source_type != SourceType::Crvs)
                .map(|(i, _)| i)
                .collect();
            let b = take(noisy.len());
            for (k, i) in noisy.into_iter().enumerate() {
                obs_eps_slot[i] = Some(b.start + k);
            }
            b
        });

        let (gamma_early_hic, gamma_early_lmic) = if options.definition_adjustment {
            (Some(take(1).start), Some(take(1).start))
        } else {
            (None, None)
        };
        let aux_countries: Vec<String> = if options.definition_adjustment {
            let mut v: Vec<String> = inputs.aux.iter().map(|a| a.aux_country.clone()).collect();
            v.sort();
            v.dedup();
            v
        } else {
            Vec::new()
        };
        let nu = options.definition_adjustment.then(|| take(aux_countries.len()));

        let mut log_sigma = BTreeMap::new();
        for scale in Scale::ALL {
            let active = match scale {
                Scale::EpsilonHealthFacility | Scale::EpsilonHmis | Scale::EpsilonPopulationStudy => {
                    options.source_error
                }
                Scale::BetaRegion => options.region_effects,
                Scale::BetaCountry => options.country_effects,
                Scale::BetaPlace => options.place_effects,
                Scale::Delta => options.spline_trend,
                Scale::Gamma => options.definition_adjustment,
            };
            if active {
                log_sigma.insert(scale, take(1).start);
            }
        }

        Self {
            dim: next,
            beta0,
            beta_region,
            region_slot,
            beta_country,
            country_slot,
            beta_place,
            place_slot,
            beta_nmr,
            nmr_centre,
            spline,
            free_len,
            epsilon,
            obs_eps_slot,
            gamma_early_hic,
            gamma_early_lmic,
            nu,
            aux_countries,
            log_sigma,
            region_ids: h.regions.clone(),
            country_ids: h.countries.iter().map(|c| c.id.clone()).collect(),
            place_ids: h.places.iter().map(|p| p.id.clone()).collect(),
            obs_ids: inputs.observations.iter().map(|o| o.id).collect(),
        }
    }

    pub fn spline_block(&self, place: usize) -> Option<std::ops::Range<usize>> {
        self.spline.map(|b| {
            let s = b.start + place * self.free_len;
            s..s + self.free_len
        })
    }

    /// Human-readable name for every coordinate.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        names[self.beta0] = if self.beta_nmr.is_some() || self.beta_region.is_some_and(|b| b.len > 0) {
            "beta0_centred".into()
        } else {
            "beta0".into()
        };
        for (r, slot) in self.region_slot.iter().enumerate() {
            if let Some(s) = slot {
                names[*s] = format!("beta_region[{}]", self.region_ids[r]);
            }
        }
        for (c, slot) in self.country_slot.iter().enumerate() {
            if let Some(s) = slot {
                names[*s] = format!("beta_country_raw[{}]", self.country_ids[c]);
            }
        }
        for (p, slot) in self.place_slot.iter().enumerate() {
            if let Some(s) = slot {
                names[*s] = format!("beta_place_raw[{}]", self.place_ids[p]);
            }
        }
        if let Some(s) = self.beta_nmr {
            names[s] = "beta_nmr".into();
        }
        for p in 0..self.place_ids.len() {
            if let Some(range) = self.spline_block(p) {
                for (k, s) in range.enumerate() {
                    names[s] = format!("spline_raw[{}][{}]", self.place_ids[p], k);
                }
            }
        }
        for (i, slot) in self.obs_eps_slot.iter().enumerate() {
            if let Some(s) = slot {
                names[*s] = format!("epsilon_raw[{}]", self.obs_ids[i]);
            }
        }
        if let Some(s) = self.gamma_early_hic {
            names[s] = "gamma_early_hic".into();
        }
        if let Some(s) = self.gamma_early_lmic {
            names[s] = "gamma_early_lmic".into();
        }
        if let Some(b) = self.nu {
            for (k, c) in self.aux_countries.iter().enumerate() {
                names[b.start + k] = format!("nu[{c}]");
            }
        }
        for (scale, s) in &self.log_sigma {
            names[*s] = format!("log_{}", scale.name());
        }
        names
    }

    /// Coordinates of every standard deviation, natural scale.
    pub fn sigma(&self, theta: &[f64], scale: Scale) -> f64 {
        self.log_sigma.get(&scale).map_or(0.0, |&s| theta[s].exp())
    }
}

/// Value and gradient of the log posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Log posterior split into its three groups of terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTerms {
    pub likelihood: f64,
    pub aux_likelihood: f64,
    pub prior: f64,
}

impl DensityTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.aux_likelihood + self.prior
    }
}

#[derive(Debug, Clone)]
struct ObsTerm {
    y: u64,
    n: u64,
    region: usize,
    country: usize,
    place: usize,
    year: i32,
    log_nmr: f64,
    eps_slot: Option<usize>,
    eps_scale: Option<Scale>,
    /// `None` for late (no adjustment).
    gamma: Option<IncomeGroup>,
}

#[derive(Debug, Clone)]
struct AuxTerm {
    y: u64,
    n: u64,
    nu_slot: usize,
    gamma: Option<IncomeGroup>,
}

/// Natural-scale parameters decoded from one sampled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub beta0: f64,
    /// `None` for regions absent from the fit.
    pub beta_region: Vec<Option<f64>>,
    pub beta_country: Vec<Option<f64>>,
    pub beta_place: Vec<f64>,
    pub beta_nmr: f64,
    /// Spline increments `Δ_p = σ_Δ·u_p` per place (empty without trends).
    pub delta: Vec<Vec<f64>>,
    pub gamma_early: [f64; 2],
    pub sigma: BTreeMap<Scale, f64>,
}

impl NaturalParams {
    pub fn sigma(&self, scale: Scale) -> f64 {
        self.sigma.get(&scale).copied().unwrap_or(0.0)
    }

    pub fn gamma(&self, definition: Definition, income: IncomeGroup) -> f64 {
        match definition {
            Definition::Early => self.gamma_early[income as usize],
            _ => 0.0,
        }
    }
}

/// The fitted model: data, spline basis, options and parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub inputs: ModelInputs,
    pub options: ModelOptions,
    pub basis: SplineBasis,
    pub layout: ParameterLayout,
    obs: Vec<ObsTerm>,
    aux: Vec<AuxTerm>,
}

impl Model {
    pub fn new(inputs: ModelInputs, options: ModelOptions) -> Result<Self, PosteriorError> {
        let basis = build_basis(inputs.window.start, inputs.window.end)?;
        let layout = ParameterLayout::build(&inputs, &options, basis.free_len());
        let obs = inputs
            .observations
            .iter()
            .zip(&inputs.obs_index)
            .enumerate()
            .map(|(i, (o, idx))| {
                let nmr = inputs
                    .covariates
                    .nmr_point(&o.country, idx.year)
                    .expect("validated covariate coverage");
                ObsTerm {
                    y: o.y,
                    n: o.total(),
                    region: idx.region,
                    country: idx.country,
                    place: idx.place,
                    year: idx.year,
                    log_nmr: nmr.ln() - layout.nmr_centre,
                    eps_slot: layout.obs_eps_slot[i],
                    eps_scale: Scale::epsilon(o.source_type),
                    gamma: (options.definition_adjustment && idx.definition == Definition::Early)
                        .then_some(o.income_group),
                }
            })
            .collect();
        let aux = if options.definition_adjustment {
            inputs
                .aux
                .iter()
                .map(|a| AuxTerm {
                    y: a.y,
                    n: a.y + a.z,
                    nu_slot: layout.nu.expect("nu block").start
                        + layout.aux_countries.binary_search(&a.aux_country).expect("aux country"),
                    gamma: (a.definition == Definition::Early).then_some(a.income_group),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            inputs,
            options,
            basis,
            layout,
            obs,
            aux,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    fn check_dim(&self, theta: &[f64]) -> Result<(), PosteriorError> {
        if theta.len() != self.layout.dim {
            return Err(PosteriorError::Dimension {
                expected: self.layout.dim,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Decode a sampled vector to natural-scale parameters.
    pub fn natural(&self, theta: &[f64]) -> NaturalParams {
        let l = &self.layout;
        let sigma: BTreeMap<Scale, f64> = l.log_sigma.iter().map(|(s, &i)| (*s, theta[i].exp())).collect();
        let sd = |s: Scale| sigma.get(&s).copied().unwrap_or(0.0);
        let effect = |slot: &Option<usize>, on: bool, scale: Scale| -> Option<f64> {
            if !on {
                return Some(0.0);
            }
            slot.map(|s| sd(scale) * theta[s])
        };
        let beta_region = l
            .region_slot
            .iter()
            .map(|s| {
                if !self.options.region_effects {
                    return Some(0.0);
                }
                s.map(|s| theta[s])
            })
            .collect();
        let beta_country = l
            .country_slot
            .iter()
            .map(|s| effect(s, self.options.country_effects, Scale::BetaCountry))
            .collect();
        let beta_place = l
            .place_slot
            .iter()
            .map(|s| s.map_or(0.0, |s| sd(Scale::BetaPlace) * theta[s]))
            .collect();
        let sd_delta = sd(Scale::Delta);
        let delta = (0..l.place_ids.len())
            .filter_map(|p| l.spline_block(p))
            .map(|r| theta[r].iter().map(|u| sd_delta * u).collect())
            .collect();
        let gamma_hic = l.gamma_early_hic.map_or(0.0, |s| theta[s]);
        let gamma_lmic = l
            .gamma_early_lmic
            .map_or(0.0, |s| theta[s]);
        NaturalParams {
            beta0: self.beta0(theta),
            beta_region,
            beta_country,
            beta_place,
            beta_nmr: l.beta_nmr.map_or(0.0, |s| theta[s]),
            delta,
            gamma_early: [gamma_hic, gamma_lmic],
            sigma,
        }
    }

    /// Intercept `β0` on the natural scale.
    pub fn beta0(&self, theta: &[f64]) -> f64 {
        let l = &self.layout;
        theta[l.beta0] - self.region_mean(theta)
            - l.beta_nmr.map_or(0.0, |s| theta[s] * l.nmr_centre)
    }

    /// Mean of the region effects (0 without region effects).
    fn region_mean(&self, theta: &[f64]) -> f64 {
        match self.layout.beta_region {
            Some(b) if b.len > 0 => theta[b.range()].iter().sum::<f64>() / b.len as f64,
            _ => 0.0,
        }
    }

    /// Trend `η_{p,t}` at an integer grid year.
    pub fn trend(&self, theta: &[f64], place: usize, year: i32) -> f64 {
        match self.layout.spline_block(place) {
            Some(r) => {
                let sd = self.layout.sigma(theta, Scale::Delta);
                sd * dot(self.basis.bz_row(year), &theta[r])
            }
            None => 0.0,
        }
    }

    /// Trend from explicit increments (`Δ`, natural scale).
    pub fn trend_from_increments(&self, delta: &[f64], year: i32) -> f64 {
        if delta.is_empty() {
            return 0.0;
        }
        dot(self.basis.bz_row(year), delta)
    }

    /// Mean logit `μ_i` of training observation `i` (no error term).
    pub fn mu_of_observation(&self, theta: &[f64], i: usize) -> f64 {
        let t = &self.obs[i];
        let l = &self.layout;
        let mut mu = theta[l.beta0];
        if let Some(s) = l.region_slot[t.region] {
            mu += theta[s] - self.region_mean(theta);
        }
        if let Some(s) = l.country_slot[t.country] {
            mu += l.sigma(theta, Scale::BetaCountry) * theta[s];
        }
        if let Some(s) = l.place_slot[t.place] {
            mu += l.sigma(theta, Scale::BetaPlace) * theta[s];
        }
        if let Some(s) = l.beta_nmr {
            mu += theta[s] * t.log_nmr;
        }
        mu += self.trend(theta, t.place, t.year);
        mu + self.gamma_term(theta, t.gamma)
    }

    /// Non-sampling error `ε_i` of training observation `i`.
    pub fn epsilon_of_observation(&self, theta: &[f64], i: usize) -> f64 {
        let t = &self.obs[i];
        match (t.eps_slot, t.eps_scale) {
            (Some(s), Some(scale)) => self.layout.sigma(theta, scale) * theta[s],
            _ => 0.0,
        }
    }

    fn gamma_term(&self, theta: &[f64], gamma: Option<IncomeGroup>) -> f64 {
        let l = &self.layout;
        match gamma {
            None => 0.0,
            Some(IncomeGroup::Hic) => theta[l.gamma_early_hic.unwrap()],
            Some(IncomeGroup::Lmic) => theta[l.gamma_early_lmic.unwrap()],
        }
    }

    /// Log posterior and its gradient.
    pub fn log_posterior(&self, theta: &[f64]) -> Result<LogDensityResult, PosteriorError> {
        let mut gradient = vec![0.0; self.layout.dim];
        let value = self.evaluate(theta, Some(&mut gradient))?.total();
        Ok(LogDensityResult { value, gradient })
    }

    /// Log posterior split by term group, without gradient.
    pub fn log_posterior_terms(&self, theta: &[f64]) -> Result<DensityTerms, PosteriorError> {
        self.evaluate(theta, None)
    }

    fn evaluate(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> Result<DensityTerms, PosteriorError> {
        self.check_dim(theta)?;
        let l = &self.layout;
        let sigma = |s: Scale| l.sigma(theta, s);
        let sd_country = sigma(Scale::BetaCountry);
        let sd_place = sigma(Scale::BetaPlace);
        let sd_delta = sigma(Scale::Delta);
        // d/d log σ accumulated from the likelihood
        let mut g_log_sigma = [0.0f64; 8];
        let region_mean = self.region_mean(theta);
        let mut region_dx = 0.0;

        let mut likelihood = 0.0;
        for t in &self.obs {
            let mut x = theta[l.beta0];
            let br = l.region_slot[t.region].map(|s| (s, theta[s]));
            let bc = l.country_slot[t.country].map(|s| (s, theta[s]));
            let bp = l.place_slot[t.place].map(|s| (s, theta[s]));
            if let Some((_, beta)) = br {
                x += beta - region_mean;
            }
            if let Some((_, raw)) = bc {
                x += sd_country * raw;
            }
            if let Some((_, raw)) = bp {
                x += sd_place * raw;
            }
            if let Some(s) = l.beta_nmr {
                x += theta[s] * t.log_nmr;
            }
            let spline = l.spline_block(t.place);
            let eta = match &spline {
                Some(r) => sd_delta * dot(self.basis.bz_row(t.year), &theta[r.clone()]),
                None => 0.0,
            };
            x += eta;
            x += self.gamma_term(theta, t.gamma);
            let eps = match (t.eps_slot, t.eps_scale) {
                (Some(s), Some(scale)) => Some((s, scale, sigma(scale))),
                _ => None,
            };
            if let Some((s, _, sd)) = eps {
                x += sd * theta[s];
            }

            likelihood += binomial_logit_lpmf(t.y, t.n, x);

            if let Some(g) = grad.as_deref_mut() {
                let dx = binomial_logit_dx(t.y, t.n, x);
                g[l.beta0] += dx;
                if let Some((s, _)) = br {
                    g[s] += dx;
                    region_dx += dx;
                }
                if let Some((s, raw)) = bc {
                    g[s] += sd_country * dx;
                    g_log_sigma[Scale::BetaCountry.index()] += sd_country * raw * dx;
                }
                if let Some((s, raw)) = bp {
                    g[s] += sd_place * dx;
                    g_log_sigma[Scale::BetaPlace.index()] += sd_place * raw * dx;
                }
                if let Some(s) = l.beta_nmr {
                    g[s] += t.log_nmr * dx;
                }
                if let Some(r) = spline {
                    let row = self.basis.bz_row(t.year);
                    for (gk, bk) in g[r].iter_mut().zip(row) {
                        *gk += sd_delta * bk * dx;
                    }
                    g_log_sigma[Scale::Delta.index()] += eta * dx;
                }
                match t.gamma {
                    None => {}
                    Some(IncomeGroup::Hic) => g[l.gamma_early_hic.unwrap()] += dx,
                    Some(IncomeGroup::Lmic) => g[l.gamma_early_lmic.unwrap()] += dx,
                }
                if let Some((s, scale, sd)) = eps {
                    g[s] += sd * dx;
                    g_log_sigma[scale.index()] += sd * theta[s] * dx;
                }
            }
        }
        if !likelihood.is_finite() {
            return Err(PosteriorError::NonFiniteDensity("likelihood".into()));
        }
        if let (Some(g), Some(b)) = (grad.as_deref_mut(), l.beta_region) {
            if b.len > 0 {
                let share = region_dx / b.len as f64;
                g[b.range()].iter_mut().for_each(|gk| *gk -= share);
            }
        }

        let mut aux_likelihood = 0.0;
        for a in &self.aux {
            let x = theta[a.nu_slot] + self.gamma_term(theta, a.gamma);
            aux_likelihood += binomial_logit_lpmf(a.y, a.n, x);
            if let Some(g) = grad.as_deref_mut() {
                let dx = binomial_logit_dx(a.y, a.n, x);
                g[a.nu_slot] += dx;
                match a.gamma {
                    None => {}
                    Some(IncomeGroup::Hic) => g[l.gamma_early_hic.unwrap()] += dx,
                    Some(IncomeGroup::Lmic) => g[l.gamma_early_lmic.unwrap()] += dx,
                }
            }
        }
        if !aux_likelihood.is_finite() {
            return Err(PosteriorError::NonFiniteDensity("aux_likelihood".into()));
        }

        let prior = self.prior(theta, grad.as_deref_mut());
        if !prior.is_finite() {
            return Err(PosteriorError::NonFiniteDensity("prior".into()));
        }
        if let Some(g) = grad {
            for (scale, &s) in &l.log_sigma {
                g[s] += g_log_sigma[scale.index()];
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(PosteriorError::NonFiniteDensity(format!(
                    "gradient of {}",
                    l.names()[bad]
                )));
            }
        }
        Ok(DensityTerms {
            likelihood,
            aux_likelihood,
            prior,
        })
    }

    fn prior(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let mut lp = 0.0;

        let b0 = self.beta0(theta);
        let d_b0 = match self.options.intercept_prior {
            InterceptPrior::Normal { mean, sd } => {
                lp += normal_lpdf(b0, mean, sd);
                -(b0 - mean) / (sd * sd)
            }
            InterceptPrior::LogitBeta { a, b } => {
                lp += -a * softplus(-b0) - b * softplus(b0) - ln_beta(a, b);
                a - (a + b) * inv_logit(b0)
            }
        };
        if let Some(g) = grad.as_deref_mut() {
            g[l.beta0] += d_b0;
            if let Some(s) = l.beta_nmr {
                g[s] -= l.nmr_centre * d_b0;
            }
            if let Some(b) = l.beta_region.filter(|b| b.len > 0) {
                g[b.range()].iter_mut().for_each(|gk| *gk -= d_b0 / b.len as f64);
            }
        }

        let mut standard_normal = |range: std::ops::Range<usize>, grad: &mut Option<&mut [f64]>| {
            for i in range {
                lp += normal_lpdf(theta[i], 0.0, 1.0);
                if let Some(g) = grad.as_deref_mut() {
                    g[i] -= theta[i];
                }
            }
        };
        for block in [l.beta_country, l.beta_place, l.spline, l.epsilon].into_iter().flatten() {
            standard_normal(block.range(), &mut grad);
        }
        if let Some(s) = l.gamma_early_hic {
            standard_normal(s..s + 1, &mut grad);
        }
        // γ_LMIC ~ N(γ_HIC, σ_γ²), sampled directly
        if let (Some(h), Some(m)) = (l.gamma_early_hic, l.gamma_early_lmic) {
            let log_sd = l.log_sigma[&Scale::Gamma];
            let sd = theta[log_sd].exp();
            let z = (theta[m] - theta[h]) / sd;
            lp += normal_lpdf(theta[m], theta[h], sd);
            if let Some(g) = grad.as_deref_mut() {
                g[m] -= z / sd;
                g[h] += z / sd;
                g[log_sd] += z * z - 1.0;
            }
        }
        // region effects are sampled on their own scale
        if let Some(b) = l.beta_region {
            let log_sd = l.log_sigma[&Scale::BetaRegion];
            let sd = theta[log_sd].exp();
            for i in b.range() {
                lp += normal_lpdf(theta[i], 0.0, sd);
                if let Some(g) = grad.as_deref_mut() {
                    let z = theta[i] / sd;
                    g[i] -= z / sd;
                    g[log_sd] += z * z - 1.0;
                }
            }
        }

        if let Some(s) = l.beta_nmr {
            let sd = self.options.beta_nmr_prior_sd;
            lp += normal_lpdf(theta[s], 0.0, sd);
            if let Some(g) = grad.as_deref_mut() {
                g[s] -= theta[s] / (sd * sd);
            }
        }
        if let Some(b) = l.nu {
            let sd = self.options.nu_prior_sd;
            for i in b.range() {
                lp += normal_lpdf(theta[i], 0.0, sd);
                if let Some(g) = grad.as_deref_mut() {
                    g[i] -= theta[i] / (sd * sd);
                }
            }
        }
        // half-normal(0, 1) on σ, sampled as log σ with Jacobian
        for &s in l.log_sigma.values() {
            let log_sd = theta[s];
            let sd = log_sd.exp();
            lp += half_normal_lpdf(sd, 1.0) + log_sd;
            if let Some(g) = grad.as_deref_mut() {
                g[s] += 1.0 - sd * sd;
            }
        }
        lp
    }

    /// Draw a starting point with `Normal(0, sd²)` coordinates.
    pub fn jitter<R: Rng + ?Sized>(&self, rng: &mut R, sd: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|_| sd * std_normal(rng))
            .collect()
    }
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, PosteriorError> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        Ok(self.evaluate(x, Some(grad))?.total())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub points: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-2)`.
    pub max_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Largest accepted relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Floor for the relative-error denominator: an absolute error of 1e-7
/// near zero counts the same as a relative error of 1e-5.
pub const GRADIENT_ERROR_FLOOR: f64 = 1e-2;

/// Default finite-difference step. With a fourth-order stencil the
/// truncation error at this step is far below the roundoff of a smaller one.
pub const GRADIENT_FD_STEP: f64 = 1e-3;

/// Compare analytic gradients with fourth-order central differences at
/// `points` random locations drawn as `Normal(0, scale²)` per coordinate.
pub fn check_gradients<D: LogDensity + ?Sized, R: Rng + ?Sized>(
    density: &D,
    points: usize,
    step: f64,
    scale: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradientReport, PosteriorError> {
    let dim = density.dim();
    let mut grad = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut max_error = 0.0f64;
    let mut worst = 0;
    for _ in 0..points {
        let mut x: Vec<f64> = (0..dim).map(|_| scale * std_normal(rng)).collect();
        density.logp_and_grad(&x, &mut grad)?;
        for i in 0..dim {
            let orig = x[i];
            let mut f = |offset: f64| {
                x[i] = orig + offset;
                density.logp_and_grad(&x, &mut scratch)
            };
            let (up2, up, down, down2) = (f(2.0 * step)?, f(step)?, f(-step)?, f(-2.0 * step)?);
            x[i] = orig;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(GRADIENT_ERROR_FLOOR);
            if err > max_error {
                max_error = err;
                worst = i;
            }
        }
    }
    Ok(GradientReport {
        points,
        max_error,
        worst_coordinate: worst,
        tolerance,
    })
}
