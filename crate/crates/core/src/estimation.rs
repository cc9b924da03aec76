//! Place, unobserved-component and weighted country estimates from
//! posterior draws.
//!
//! Posterior draw `d` is paired with covariate sample `d mod J` for both the
//! NMR samples in the linear predictor and the SBR samples in the weights.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{CovariateTables, ModelInputs};
use crate::math::{inv_logit, quantiles, std_normal};
use crate::posterior::{Model, NaturalParams, Scale};
use crate::sampler::PosteriorDraws;

/// Quantiles written to estimate files.
pub const DEFAULT_QUANTILES: [f64; 5] = [0.05, 0.1, 0.5, 0.9, 0.95];

/// Stream offset separating region-level fresh draws from country-level ones.
const REGION_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("no SBR sample for {country} in {year}")]
    MissingSbr { country: String, year: i32 },
    #[error("no NMR sample for {country} in {year}")]
    MissingNmr { country: String, year: i32 },
    #[error("covariate tables hold no samples")]
    NoSamples,
    #[error("unknown place `{0}`")]
    UnknownPlace(String),
    #[error("unknown country `{0}`")]
    UnknownCountry(String),
    #[error("draw mismatch: {0}")]
    DrawMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed estimate file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Posterior samples per year: `samples[year_index][draw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub years: Vec<i32>,
    pub samples: Vec<Vec<f64>>,
}

impl Series {
    pub fn draws(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn year(&self, year: i32) -> Option<&[f64]> {
        self.years
            .iter()
            .position(|&y| y == year)
            .map(|i| self.samples[i].as_slice())
    }

    /// Quantiles per year, `out[year_index][quantile_index]`.
    pub fn summarize(&self, qs: &[f64]) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| quantiles(s, qs)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceWeight {
    pub place: String,
    /// One weight per covariate sample, after any downscaling.
    pub samples: Vec<f64>,
}

/// Coverage weights of a country's observed places.
#[derive(Debug, Clone, PartialEq)]
pub struct CountryWeights {
    pub country: String,
    pub places: Vec<PlaceWeight>,
    /// `ŵ_c` per covariate sample.
    pub total: Vec<f64>,
    /// Whether the raw place weights summed past 1 for that sample.
    pub downscaled: Vec<bool>,
}

impl CountryWeights {
    pub fn any_downscaled(&self) -> bool {
        self.downscaled.iter().any(|&d| d)
    }

    pub fn mean_total(&self) -> f64 {
        crate::math::mean(&self.total)
    }

    pub fn mean_unobserved_share(&self) -> f64 {
        1.0 - self.mean_total()
    }
}

fn sbr_sample_count(sbr: &CovariateTables) -> usize {
    sbr.sbr_samples.values().next().map_or(0, Vec::len)
}

/// Per-place coverage weights `ŵ_p = Σ s_i / Σ overlap_i(Y)·S̃_{c,Y}` for every
/// country in the hierarchy, downscaled per sample so each country's total
/// is at most 1.
pub fn compute_weights(inputs: &ModelInputs, sbr: &CovariateTables) -> Result<Vec<CountryWeights>, EstimationError> {
    let j_count = sbr_sample_count(sbr);
    if j_count == 0 {
        return Err(EstimationError::NoSamples);
    }
    let h = &inputs.hierarchy;
    let mut numer = vec![0.0; h.places.len()];
    let mut denom = vec![vec![0.0; j_count]; h.places.len()];
    for (o, idx) in inputs.observations.iter().zip(&inputs.obs_index) {
        numer[idx.place] += o.total() as f64;
        for year in o.calendar_years() {
            let frac = o.year_overlap(year);
            if frac <= 0.0 {
                continue;
            }
            let s = sbr.sbr_samples(&o.country, year).ok_or_else(|| EstimationError::MissingSbr {
                country: o.country.clone(),
                year,
            })?;
            for (d, &v) in denom[idx.place].iter_mut().zip(s) {
                *d += frac * v;
            }
        }
    }

    let mut out = Vec::with_capacity(h.countries.len());
    for (c, info) in h.countries.iter().enumerate() {
        let places: Vec<usize> = h.places_in_country(c).collect();
        let mut weights: Vec<PlaceWeight> = places
            .iter()
            .map(|&p| PlaceWeight {
                place: h.places[p].id.clone(),
                samples: denom[p].iter().map(|d| numer[p] / d).collect(),
            })
            .collect();
        let mut total = vec![0.0; j_count];
        let mut downscaled = vec![false; j_count];
        for j in 0..j_count {
            let raw: f64 = weights.iter().map(|w| w.samples[j]).sum();
            if raw > 1.0 {
                for w in &mut weights {
                    w.samples[j] /= raw;
                }
                downscaled[j] = true;
                total[j] = weights.iter().map(|w| w.samples[j]).sum();
            } else {
                total[j] = raw;
            }
        }
        out.push(CountryWeights {
            country: info.id.clone(),
            places: weights,
            total,
            downscaled,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceEstimate {
    pub place: String,
    pub country: String,
    pub series: Series,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryEstimate {
    pub country: String,
    pub series: Series,
    /// Absent when read back from a draw export.
    pub weights: Option<CountryWeights>,
}

/// Decoded draws bound to a model, ready for prediction.
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub draws: &'a PosteriorDraws,
    naturals: Vec<NaturalParams>,
    samples: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, draws: &'a PosteriorDraws) -> Result<Self, EstimationError> {
        match &draws.layout {
            Some(l) if *l == model.layout => {}
            Some(_) => return Err(EstimationError::DrawMismatch("draw layout differs from the model layout".into())),
            None if draws.dim == model.dim() => {}
            None => {
                return Err(EstimationError::DrawMismatch(format!(
                    "draws have dimension {}, model {}",
                    draws.dim,
                    model.dim()
                )))
            }
        }
        let samples = model.inputs.sample_count();
        if samples == 0 {
            return Err(EstimationError::NoSamples);
        }
        let naturals = draws.iter().map(|theta| model.natural(theta)).collect();
        Ok(Self {
            model,
            draws,
            naturals,
            samples,
        })
    }

    pub fn draw_count(&self) -> usize {
        self.naturals.len()
    }

    pub fn natural(&self, d: usize) -> &NaturalParams {
        &self.naturals[d]
    }

    /// Covariate sample paired with draw `d`.
    pub fn sample_index(&self, d: usize) -> usize {
        d % self.samples
    }

    pub fn years(&self) -> Vec<i32> {
        self.model.inputs.window.years().collect()
    }

    pub fn log_nmr_sample(&self, country: &str, year: i32, d: usize) -> Result<f64, EstimationError> {
        let s = self
            .model
            .inputs
            .covariates
            .nmr_samples(country, year)
            .ok_or_else(|| EstimationError::MissingNmr {
                country: country.to_string(),
                year,
            })?;
        Ok(s[self.sample_index(d)].ln())
    }

    /// Logit of the observed-population proportion for `place` in `year`
    /// under draw `d`, with no definition adjustment and no error term.
    pub fn place_logit(&self, place: usize, year: i32, d: usize) -> Result<f64, EstimationError> {
        let h = &self.model.inputs.hierarchy;
        let c = h.places[place].country;
        let r = h.countries[c].region;
        let n = &self.naturals[d];
        let mu = n.beta0
            + n.beta_region[r].unwrap_or(0.0)
            + n.beta_country[c].unwrap_or(0.0)
            + n.beta_place[place]
            + n.beta_nmr * self.log_nmr_sample(&h.countries[c].id, year, d)?
            + n.delta.get(place).map_or(0.0, |delta| self.model.trend_from_increments(delta, year));
        Ok(mu)
    }

    pub fn predict_place(&self, place_id: &str) -> Result<PlaceEstimate, EstimationError> {
        let h = &self.model.inputs.hierarchy;
        let place = h
            .place(place_id)
            .ok_or_else(|| EstimationError::UnknownPlace(place_id.to_string()))?;
        let years = self.years();
        let mut samples = Vec::with_capacity(years.len());
        for &year in &years {
            let row = (0..self.draw_count())
                .map(|d| self.place_logit(place, year, d).map(inv_logit))
                .collect::<Result<Vec<_>, _>>()?;
            samples.push(row);
        }
        Ok(PlaceEstimate {
            place: place_id.to_string(),
            country: h.countries[h.places[place].country].id.clone(),
            series: Series { years, samples },
        })
    }

    /// Region effect for draw `d`: the fitted value, or a fresh draw from its
    /// prior when the region had no data. One stream per region keeps the
    /// fresh value shared by all of the region's countries.
    fn region_effects(&self, region: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(REGION_STREAM + region as u64);
        self.naturals
            .iter()
            .map(|n| {
                let z = std_normal(&mut rng);
                n.beta_region[region].unwrap_or_else(|| n.sigma(Scale::BetaRegion) * z)
            })
            .collect()
    }

    /// Logit samples for the part of a country not covered by its observed
    /// places: fresh place effect and fresh trend per draw.
    pub fn predict_unobserved_logit(&self, country_id: &str, seed: u64) -> Result<Series, EstimationError> {
        let h = &self.model.inputs.hierarchy;
        let c = h
            .country(country_id)
            .ok_or_else(|| EstimationError::UnknownCountry(country_id.to_string()))?;
        let region_effect = self.region_effects(h.countries[c].region, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);

        let years = self.years();
        let free_len = self.model.basis.free_len();
        let trend_on = self.model.options.spline_trend;
        let mut samples = vec![vec![0.0; self.draw_count()]; years.len()];
        let mut delta = vec![0.0; free_len];
        for (d, n) in self.naturals.iter().enumerate() {
            let z_country = std_normal(&mut rng);
            let z_place = std_normal(&mut rng);
            let sd_delta = n.sigma(Scale::Delta);
            for v in delta.iter_mut() {
                *v = sd_delta * std_normal(&mut rng);
            }
            let beta_c = n.beta_country[c].unwrap_or_else(|| n.sigma(Scale::BetaCountry) * z_country);
            let beta_p = n.sigma(Scale::BetaPlace) * z_place;
            let base = n.beta0 + region_effect[d] + beta_c + beta_p;
            for (k, &year) in years.iter().enumerate() {
                let eta = if trend_on {
                    self.model.trend_from_increments(&delta, year)
                } else {
                    0.0
                };
                samples[k][d] = base + n.beta_nmr * self.log_nmr_sample(country_id, year, d)? + eta;
            }
        }
        Ok(Series { years, samples })
    }

    pub fn predict_unobserved(&self, country_id: &str, seed: u64) -> Result<Series, EstimationError> {
        let mut s = self.predict_unobserved_logit(country_id, seed)?;
        for row in &mut s.samples {
            row.iter_mut().for_each(|x| *x = inv_logit(*x));
        }
        Ok(s)
    }

    /// Every country in the hierarchy, in hierarchy order.
    pub fn predict_all(&self, weights: &[CountryWeights], seed: u64) -> Result<Vec<CountryEstimate>, EstimationError> {
        let by_country: BTreeMap<&str, &CountryWeights> = weights.iter().map(|w| (w.country.as_str(), w)).collect();
        self.model
            .inputs
            .hierarchy
            .countries
            .par_iter()
            .map(|info| {
                let w = by_country
                    .get(info.id.as_str())
                    .ok_or_else(|| EstimationError::UnknownCountry(info.id.clone()))?;
                let places = w
                    .places
                    .iter()
                    .map(|p| self.predict_place(&p.place))
                    .collect::<Result<Vec<_>, _>>()?;
                let unobserved = self.predict_unobserved(&info.id, seed)?;
                predict_country(w, &places, &unobserved)
            })
            .collect()
    }

    pub fn predict_places(&self) -> Result<Vec<PlaceEstimate>, EstimationError> {
        self.model
            .inputs
            .hierarchy
            .places
            .par_iter()
            .map(|p| self.predict_place(&p.id))
            .collect()
    }
}

/// Convex blend `Σ ŵ_p φ_p + (1 − ŵ_c) φ_unobs` per draw; weights use
/// covariate sample `d mod J`.
pub fn predict_country(
    weights: &CountryWeights,
    places: &[PlaceEstimate],
    unobserved: &Series,
) -> Result<CountryEstimate, EstimationError> {
    let draws = unobserved.draws();
    let j_count = weights.total.len();
    if j_count == 0 {
        return Err(EstimationError::NoSamples);
    }
    if places.len() != weights.places.len() {
        return Err(EstimationError::DrawMismatch(format!(
            "{} place estimates for {} weighted places",
            places.len(),
            weights.places.len()
        )));
    }
    for (p, w) in places.iter().zip(&weights.places) {
        if p.place != w.place {
            return Err(EstimationError::DrawMismatch(format!(
                "place estimate `{}` paired with weight for `{}`",
                p.place, w.place
            )));
        }
        if p.series.years != unobserved.years || p.series.draws() != draws {
            return Err(EstimationError::DrawMismatch(format!(
                "place `{}` has {} draws over {} years, unobserved component {} over {}",
                p.place,
                p.series.draws(),
                p.series.years.len(),
                draws,
                unobserved.years.len()
            )));
        }
    }
    let samples = unobserved
        .samples
        .iter()
        .enumerate()
        .map(|(k, unobs)| {
            (0..draws)
                .map(|d| {
                    let j = d % j_count;
                    let observed: f64 = places
                        .iter()
                        .zip(&weights.places)
                        .map(|(p, w)| w.samples[j] * p.series.samples[k][d])
                        .sum();
                    observed + (1.0 - weights.total[j]) * unobs[d]
                })
                .collect()
        })
        .collect();
    Ok(CountryEstimate {
        country: weights.country.clone(),
        series: Series {
            years: unobserved.years.clone(),
            samples,
        },
        weights: Some(weights.clone()),
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, EstimationError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn write_quantile_rows<W: Write>(
    w: &mut W,
    keys: &str,
    series: &Series,
    qs: &[f64],
) -> Result<(), EstimationError> {
    for (year, row) in series.years.iter().zip(series.summarize(qs)) {
        for (q, v) in qs.iter().zip(row) {
            writeln!(w, "{keys},{year},{q},{v}")?;
        }
    }
    Ok(())
}

/// `country,year,quantile,value`.
pub fn write_country_estimates(path: &Path, estimates: &[CountryEstimate], qs: &[f64]) -> Result<(), EstimationError> {
    let mut w = create(path)?;
    writeln!(w, "country,year,quantile,value")?;
    for e in estimates {
        write_quantile_rows(&mut w, &e.country, &e.series, qs)?;
    }
    w.flush()?;
    Ok(())
}

/// `place,country,year,quantile,value`.
pub fn write_place_estimates(path: &Path, estimates: &[PlaceEstimate], qs: &[f64]) -> Result<(), EstimationError> {
    let mut w = create(path)?;
    writeln!(w, "place,country,year,quantile,value")?;
    for e in estimates {
        write_quantile_rows(&mut w, &format!("{},{}", e.place, e.country), &e.series, qs)?;
    }
    w.flush()?;
    Ok(())
}

/// `country,place,weight_mean,observed_total_mean,unobserved_share_mean,downscaled`;
/// countries without places get one row with an empty place.
pub fn write_weights(path: &Path, weights: &[CountryWeights]) -> Result<(), EstimationError> {
    let mut w = create(path)?;
    writeln!(w, "country,place,weight_mean,observed_total_mean,unobserved_share_mean,downscaled")?;
    for c in weights {
        let total = c.mean_total();
        let share = c.mean_unobserved_share();
        let flag = c.any_downscaled();
        if c.places.is_empty() {
            writeln!(w, "{},,0,{total},{share},{flag}", c.country)?;
        }
        for p in &c.places {
            let m = crate::math::mean(&p.samples);
            writeln!(w, "{},{},{m},{total},{share},{flag}", c.country, p.place)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Full per-draw export, `country,year,draw,value`.
pub fn write_country_draws(path: &Path, estimates: &[CountryEstimate]) -> Result<(), EstimationError> {
    let mut w = create(path)?;
    writeln!(w, "country,year,draw,value")?;
    for e in estimates {
        for (year, row) in e.series.years.iter().zip(&e.series.samples) {
            for (d, v) in row.iter().enumerate() {
                writeln!(w, "{},{year},{d},{v}", e.country)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a file written by [`write_country_draws`].
pub fn read_country_draws(path: &Path) -> Result<Vec<CountryEstimate>, EstimationError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "country,year,draw,value")) => {}
        _ => {
            return Err(EstimationError::Malformed {
                line: 1,
                reason: "expected header `country,year,draw,value`".into(),
            })
        }
    }
    let mut map: BTreeMap<String, BTreeMap<i32, Vec<f64>>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (k, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| EstimationError::Malformed {
            line: k + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let year: i32 = f[1].parse().map_err(|_| bad("bad year"))?;
        let draw: usize = f[2].parse().map_err(|_| bad("bad draw index"))?;
        let value: f64 = f[3].parse().map_err(|_| bad("bad value"))?;
        if !map.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        let row = map.entry(f[0].to_string()).or_default().entry(year).or_default();
        if row.len() != draw {
            return Err(bad("draws out of order"));
        }
        row.push(value);
    }
    Ok(order
        .into_iter()
        .map(|c| {
            let years = map.remove(&c).unwrap_or_default();
            CountryEstimate {
                country: c,
                series: Series {
                    years: years.keys().copied().collect(),
                    samples: years.into_values().collect(),
                },
                weights: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateTables, Definition, Window};
    use crate::posterior::ModelOptions;
    use crate::sampler::{generic_names, SamplerConfig};
    use crate::test_support::{inputs, inputs_with, mixed_inputs, obs};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn draws_from(model: &Model, thetas: Vec<Vec<f64>>) -> PosteriorDraws {
        let n = thetas.len();
        PosteriorDraws::from_values(
            generic_names(model.dim()),
            Some(model.layout.clone()),
            SamplerConfig::default(),
            1,
            n,
            thetas.into_iter().flatten().collect(),
            vec![0],
            vec![1.0],
        )
    }

    fn random_draws(model: &Model, n: usize, seed: u64, sd: f64) -> PosteriorDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas = (0..n).map(|_| model.jitter(&mut rng, sd)).collect();
        draws_from(model, thetas)
    }

    fn with_sbr(inputs: &ModelInputs, country: &str, value: f64) -> CovariateTables {
        let mut t = (*inputs.covariates).clone();
        for y in inputs.window.years() {
            let j = t.sample_count();
            t.sbr_samples.insert((country.into(), y), vec![value; j]);
        }
        t
    }

    #[test]
    fn weight_is_direct_ratio() {
        let inp = inputs(vec![obs(1, "R", "A", "A1", 2010, 50, 150)]);
        let w = compute_weights(&inp, &with_sbr(&inp, "A", 1000.0)).unwrap();
        assert_abs_diff_eq!(w[0].places[0].samples[0], 0.2, epsilon = 1e-15);
        assert!(!w[0].any_downscaled());
    }

    #[test]
    fn partial_year_scales_denominator() {
        let mut o = obs(1, "R", "A", "A1", 2016, 100, 200);
        o.year_end = 2016.0 + 1.0 / 3.0;
        let inp = inputs(vec![o]);
        let w = compute_weights(&inp, &with_sbr(&inp, "A", 900.0)).unwrap();
        // denominator 300
        assert_abs_diff_eq!(w[0].places[0].samples[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn downscaling_to_one() {
        // raw weights 0.8 and 0.6 with S = 1000
        let inp = inputs(vec![obs(1, "R", "A", "A1", 2010, 300, 500), obs(2, "R", "A", "A2", 2010, 200, 400)]);
        let w = compute_weights(&inp, &with_sbr(&inp, "A", 1000.0)).unwrap();
        let c = &w[0];
        assert_abs_diff_eq!(c.places[0].samples[0], 4.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.places[1].samples[0], 3.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.total[0], 1.0, epsilon = 1e-12);
        assert!(c.any_downscaled());
    }

    #[test]
    fn missing_sbr_is_reported() {
        let inp = inputs(vec![obs(1, "R", "A", "A1", 2010, 3, 7)]);
        let mut t = (*inp.covariates).clone();
        t.sbr_samples.remove(&("A".to_string(), 2010));
        assert!(matches!(
            compute_weights(&inp, &t),
            Err(EstimationError::MissingSbr { year: 2010, .. })
        ));
    }

    #[test]
    fn zero_draw_gives_one_half() {
        let inp = inputs(vec![obs(1, "R", "A", "A1", 2010, 3, 7)]);
        let mut cov = (*inp.covariates).clone();
        for v in cov.nmr_samples.values_mut() {
            v.iter_mut().for_each(|x| *x = 1.0);
        }
        let inp = ModelInputs { covariates: Arc::new(cov), ..inp };
        let model = Model::new(inp, ModelOptions::default()).unwrap();
        let draws = draws_from(&model, vec![vec![0.0; model.dim()]]);
        let p = Predictor::new(&model, &draws).unwrap();
        let est = p.predict_place("A1").unwrap();
        assert_eq!(est.series.years.len(), 22);
        assert!(est.series.samples.iter().all(|r| r == &vec![0.5]));
    }

    #[test]
    fn nmr_term_uses_samples() {
        let inp = inputs(vec![obs(1, "R", "A", "A1", 2010, 3, 7)]);
        let mut cov = (*inp.covariates).clone();
        for v in cov.nmr_samples.values_mut() {
            *v = vec![2f64.exp(), 1.0, 1.0, 1.0];
        }
        let inp = ModelInputs { covariates: Arc::new(cov), ..inp };
        let model = Model::new(inp, ModelOptions::default()).unwrap();
        let mut theta = vec![0.0; model.dim()];
        theta[model.layout.beta_nmr.unwrap()] = 1.0;
        // natural intercept 0
        theta[model.layout.beta0] = model.layout.nmr_centre;
        let draws = draws_from(&model, vec![theta.clone(), theta]);
        let p = Predictor::new(&model, &draws).unwrap();
        let est = p.predict_place("A1").unwrap();
        for row in &est.series.samples {
            // draw 0 uses sample 0 (e^2), draw 1 uses sample 1 (1)
            assert_abs_diff_eq!(row[0], inv_logit(2.0), epsilon = 1e-15);
            assert_abs_diff_eq!(row[1], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn unknown_place_and_layout_mismatch() {
        let model = Model::new(mixed_inputs(), ModelOptions::default()).unwrap();
        let draws = random_draws(&model, 3, 1, 0.5);
        let p = Predictor::new(&model, &draws).unwrap();
        assert!(matches!(p.predict_place("nowhere"), Err(EstimationError::UnknownPlace(_))));

        let other = Model::new(
            mixed_inputs(),
            ModelOptions {
                spline_trend: false,
                ..ModelOptions::default()
            },
        )
        .unwrap();
        assert!(matches!(
            Predictor::new(&other, &draws),
            Err(EstimationError::DrawMismatch(_))
        ));
    }

    #[test]
    fn prediction_ignores_definition_labels() {
        let base = mixed_inputs();
        let relabelled: Vec<_> = base
            .observations
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.definition = match o.definition {
                    Definition::Early => Definition::Late,
                    _ => Definition::Early,
                };
                o
            })
            .collect();
        let a = Model::new(base.clone(), ModelOptions::default()).unwrap();
        let b = Model::new(base.with_observations(relabelled).unwrap(), ModelOptions::default()).unwrap();
        let draws = random_draws(&a, 5, 9, 0.7);
        let pa = Predictor::new(&a, &draws).unwrap();
        let pb = Predictor::new(&b, &draws).unwrap();
        for place in ["A1", "B1", "C2"] {
            assert_eq!(pa.predict_place(place).unwrap(), pb.predict_place(place).unwrap());
        }
    }

    #[test]
    fn degenerate_variances_give_structural_prediction() {
        let model = Model::new(mixed_inputs(), ModelOptions::default()).unwrap();
        let l = &model.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let thetas: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let mut t = model.jitter(&mut rng, 0.5);
                t[l.log_sigma[&Scale::BetaPlace]] = f64::NEG_INFINITY;
                t[l.log_sigma[&Scale::Delta]] = f64::NEG_INFINITY;
                t
            })
            .collect();
        let draws = draws_from(&model, thetas);
        let p = Predictor::new(&model, &draws).unwrap();
        let c = model.inputs.hierarchy.country("C").unwrap();
        let r = model.inputs.hierarchy.countries[c].region;
        let s = p.predict_unobserved_logit("C", 7).unwrap();
        for (k, &year) in s.years.iter().enumerate() {
            for d in 0..20 {
                let n = p.natural(d);
                let expected = n.beta0
                    + n.beta_region[r].unwrap()
                    + n.beta_country[c].unwrap()
                    + n.beta_nmr * p.log_nmr_sample("C", year, d).unwrap();
                assert_abs_diff_eq!(s.samples[k][d], expected, epsilon = 1e-12);
            }
        }
    }

    fn region_inputs() -> ModelInputs {
        // region R2 has data only through country D; country E in R2 has none
        let list = vec![
            obs(1, "R1", "A", "A1", 2005, 30, 70),
            obs(2, "R1", "A", "A2", 2006, 20, 60),
            obs(3, "R2", "D", "D1", 2007, 40, 40),
        ];
        let window = Window::default();
        let cov = CovariateTables::constant(&["A", "D", "E"], window, 12.0, 15.0, 4);
        let extra = BTreeMap::from([("E".to_string(), "R2".to_string())]);
        ModelInputs::new(list, Vec::new(), Arc::new(cov), &extra, window, Default::default()).unwrap()
    }

    #[test]
    fn no_data_country_shifts_with_region_effect() {
        let inp = region_inputs();
        let model = Model::new(inp, ModelOptions::default()).unwrap();
        let l = &model.layout;
        let r2 = model.inputs.hierarchy.region("R2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base: Vec<Vec<f64>> = (0..400).map(|_| model.jitter(&mut rng, 0.3)).collect();
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|t| {
                let mut t = t.clone();
                // b_r moves by 2; the sampled intercept carries the
                // region mean, so it moves too to keep β0 fixed
                let slot = l.region_slot[r2].unwrap();
                t[slot] += 2.0;
                t[l.beta0] += 2.0 / l.beta_region.unwrap().len as f64;
                t
            })
            .collect();
        let d0 = draws_from(&model, base);
        let d1 = draws_from(&model, shifted);
        let a = Predictor::new(&model, &d0).unwrap().predict_unobserved_logit("E", 3).unwrap();
        let b = Predictor::new(&model, &d1).unwrap().predict_unobserved_logit("E", 3).unwrap();
        for k in 0..a.years.len() {
            let diff = crate::math::mean(&b.samples[k]) - crate::math::mean(&a.samples[k]);
            assert_abs_diff_eq!(diff, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fresh_components_add_variance() {
        let model = Model::new(mixed_inputs(), ModelOptions::default()).unwrap();
        let l = &model.layout;
        let draws = random_draws(&model, 4000, 21, 0.6);
        let suppressed: Vec<Vec<f64>> = draws
            .iter()
            .map(|t| {
                let mut t = t.to_vec();
                t[l.log_sigma[&Scale::BetaPlace]] = f64::NEG_INFINITY;
                t[l.log_sigma[&Scale::Delta]] = f64::NEG_INFINITY;
                t
            })
            .collect();
        let quiet = draws_from(&model, suppressed);
        let full = Predictor::new(&model, &draws).unwrap().predict_unobserved_logit("A", 5).unwrap();
        let flat = Predictor::new(&model, &quiet).unwrap().predict_unobserved_logit("A", 5).unwrap();
        for k in 0..full.years.len() {
            let vf = crate::math::variance(&full.samples[k]);
            let vq = crate::math::variance(&flat.samples[k]);
            assert!(vf >= vq, "year {}: {vf} < {vq}", full.years[k]);
        }
    }

    #[test]
    fn unobserved_is_seeded() {
        let model = Model::new(mixed_inputs(), ModelOptions::default()).unwrap();
        let draws = random_draws(&model, 50, 2, 0.5);
        let p = Predictor::new(&model, &draws).unwrap();
        assert_eq!(p.predict_unobserved("A", 1).unwrap(), p.predict_unobserved("A", 1).unwrap());
        assert_ne!(p.predict_unobserved("A", 1).unwrap(), p.predict_unobserved("A", 2).unwrap());
        assert_ne!(p.predict_unobserved("A", 1).unwrap(), p.predict_unobserved("C", 1).unwrap());
    }

    fn one_year(values: Vec<f64>) -> Series {
        Series {
            years: vec![2010],
            samples: vec![values],
        }
    }

    fn weights(country: &str, places: &[(&str, f64)]) -> CountryWeights {
        let total: f64 = places.iter().map(|p| p.1).sum();
        CountryWeights {
            country: country.into(),
            places: places
                .iter()
                .map(|(p, w)| PlaceWeight {
                    place: p.to_string(),
                    samples: vec![*w],
                })
                .collect(),
            total: vec![total],
            downscaled: vec![false],
        }
    }

    fn place(id: &str, values: Vec<f64>) -> PlaceEstimate {
        PlaceEstimate {
            place: id.into(),
            country: "A".into(),
            series: one_year(values),
        }
    }

    #[test]
    fn country_blend_arithmetic() {
        let c = predict_country(&weights("A", &[("A1", 0.6)]), &[place("A1", vec![0.4])], &one_year(vec![0.5])).unwrap();
        assert_abs_diff_eq!(c.series.samples[0][0], 0.44, epsilon = 1e-15);
    }

    #[test]
    fn boundary_weights() {
        let obs_series = vec![0.31, 0.42, 0.27];
        let unobs = one_year(vec![0.6, 0.7, 0.8]);
        let full = predict_country(&weights("A", &[("A1", 1.0)]), &[place("A1", obs_series.clone())], &unobs).unwrap();
        assert_eq!(full.series.samples[0], obs_series);
        let none = predict_country(&weights("A", &[]), &[], &unobs).unwrap();
        assert_eq!(none.series.samples[0], unobs.samples[0]);
    }

    #[test]
    fn draw_mismatch() {
        let r = predict_country(
            &weights("A", &[("A1", 0.5)]),
            &[place("A1", vec![0.4, 0.3])],
            &one_year(vec![0.5]),
        );
        assert!(matches!(r, Err(EstimationError::DrawMismatch(_))));
    }

    #[test]
    fn country_pipeline_and_files() {
        let inp = region_inputs();
        let model = Model::new(inp, ModelOptions::default()).unwrap();
        let draws = random_draws(&model, 40, 5, 0.5);
        let p = Predictor::new(&model, &draws).unwrap();
        let w = compute_weights(&model.inputs, &model.inputs.covariates).unwrap();
        let est = p.predict_all(&w, 11).unwrap();
        assert_eq!(est.len(), 3);
        // E has no data: the unobserved component alone
        let e = est.iter().find(|c| c.country == "E").unwrap();
        assert_eq!(e.series, p.predict_unobserved("E", 11).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("country_draws.csv");
        write_country_draws(&path, &est).unwrap();
        let back = read_country_draws(&path).unwrap();
        for (a, b) in est.iter().zip(&back) {
            assert_eq!(a.country, b.country);
            assert_eq!(a.series, b.series);
        }
        let q = dir.path().join("country.csv");
        write_country_estimates(&q, &est, &DEFAULT_QUANTILES).unwrap();
        let text = std::fs::read_to_string(&q).unwrap();
        assert_eq!(text.lines().next().unwrap(), "country,year,quantile,value");
        assert_eq!(text.lines().count(), 1 + 3 * 22 * 5);
        write_weights(&dir.path().join("weights.csv"), &w).unwrap();
    }

    #[test]
    fn aux_and_sample_pairing_with_few_samples() {
        let inp = inputs_with(vec![obs(1, "R", "A", "A1", 2010, 3, 7)], Vec::new(), 3);
        let model = Model::new(inp, ModelOptions::default()).unwrap();
        let draws = random_draws(&model, 7, 1, 0.1);
        let p = Predictor::new(&model, &draws).unwrap();
        assert_eq!(p.sample_index(6), 0);
        assert_eq!(p.sample_index(5), 2);
    }
}
