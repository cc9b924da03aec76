//! Out-of-sample checks: time-based holdout and k-fold splits, posterior
//! predictive scoring of held-out observations, and the per-region report
//! of mean absolute error and 95% interval coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Definition, ModelInputs, Observation};
use crate::math::{inv_logit, quantiles, std_normal};
use crate::posterior::{Model, ModelOptions, PosteriorError, Scale};
use crate::sampler::{fit_model, PosteriorDraws, SamplerConfig, SamplerError};

/// Central predictive interval used for coverage.
pub const INTERVAL: (f64, f64) = (0.025, 0.975);
pub const GLOBAL: &str = "Global";

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("test set is empty")]
    EmptyTest,
    #[error("cutoff {cutoff} lies outside the window {start}-{end}")]
    CutoffOutsideWindow { cutoff: f64, start: i32, end: i32 },
    #[error("k must be at least 2 (got {0})")]
    InvalidFolds(usize),
    #[error("{n} observations cannot fill {k} folds")]
    TooFewObservations { n: usize, k: usize },
    #[error("observation {0} is part of the training data")]
    Leakage(u64),
    #[error("draw mismatch: {0}")]
    DrawMismatch(String),
    #[error("no NMR point value for {country} in {year}")]
    MissingNmr { country: String, year: i32 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Training inputs plus the observations held out from them.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: ModelInputs,
    pub test: Vec<Observation>,
}

/// Observations whose midpoint falls at or after `cutoff` form the test set.
/// Aux records always stay in training.
pub fn holdout_split(inputs: &ModelInputs, cutoff: f64) -> Result<Split, ValidationError> {
    let w = inputs.window;
    if !(cutoff > w.start as f64 && cutoff <= w.end as f64) {
        return Err(ValidationError::CutoffOutsideWindow {
            cutoff,
            start: w.start,
            end: w.end,
        });
    }
    let (test, train): (Vec<Observation>, Vec<Observation>) = inputs
        .observations
        .iter()
        .cloned()
        .partition(|o| o.midpoint() >= cutoff);
    if train.is_empty() {
        return Err(ValidationError::EmptyTrain);
    }
    if test.is_empty() {
        return Err(ValidationError::EmptyTest);
    }
    Ok(Split {
        train: inputs.with_observations(train)?,
        test,
    })
}

/// Random partition into `k` folds whose sizes differ by at most one.
pub fn kfold_split(inputs: &ModelInputs, k: usize, seed: u64) -> Result<Vec<Split>, ValidationError> {
    if k < 2 {
        return Err(ValidationError::InvalidFolds(k));
    }
    let n = inputs.observations.len();
    if n < k {
        return Err(ValidationError::TooFewObservations { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    (0..k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = inputs
                .observations
                .iter()
                .zip(&fold_of)
                .partition(|(_, &g)| g == f);
            let train = train.into_iter().map(|(o, _)| o.clone()).collect();
            Ok(Split {
                train: inputs.with_observations(train)?,
                test: test.into_iter().map(|(o, _)| o.clone()).collect(),
            })
        })
        .collect()
}

/// Predictive summary of one held-out observation, on the `y/n` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPoint {
    pub id: u64,
    pub region: String,
    pub observed: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ScoredPoint {
    pub fn abs_error(&self) -> f64 {
        (self.median - self.observed).abs()
    }

    pub fn covered(&self) -> bool {
        self.lower <= self.observed && self.observed <= self.upper
    }
}

/// Posterior predictive of each test observation: per draw, the mean logit
/// from the fitted (or freshly drawn) effects, a fresh source error and a
/// binomial draw with the observation's total.
pub fn score_points(
    test: &[Observation],
    model: &Model,
    draws: &PosteriorDraws,
    seed: u64,
) -> Result<Vec<ScoredPoint>, ValidationError> {
    match &draws.layout {
        Some(l) if *l == model.layout => {}
        Some(_) => return Err(ValidationError::DrawMismatch("draw layout differs from the model layout".into())),
        None if draws.dim == model.dim() => {}
        None => {
            return Err(ValidationError::DrawMismatch(format!(
                "draws have dimension {}, model {}",
                draws.dim,
                model.dim()
            )))
        }
    }
    let train_ids: BTreeSet<u64> = model.inputs.observations.iter().map(|o| o.id).collect();
    if let Some(o) = test.iter().find(|o| train_ids.contains(&o.id)) {
        return Err(ValidationError::Leakage(o.id));
    }
    let naturals: Vec<_> = draws.iter().map(|theta| model.natural(theta)).collect();
    let h = &model.inputs.hierarchy;
    let free_len = model.basis.free_len();
    let trend_on = model.options.spline_trend;

    test.par_iter()
        .enumerate()
        .map(|(i, o)| {
            let year = o.grid_year();
            let nmr = model
                .inputs
                .covariates
                .nmr_point(&o.country, year)
                .ok_or_else(|| ValidationError::MissingNmr {
                    country: o.country.clone(),
                    year,
                })?;
            let region = h.region(&o.region);
            let country = h.country(&o.country);
            let place = h.place(&o.place);
            let definition = match o.definition {
                Definition::Early => Definition::Early,
                _ => Definition::Late,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut delta = vec![0.0; free_len];
            let n_total = o.total();
            let mut ratios = Vec::with_capacity(naturals.len());
            for n in &naturals {
                let (z_region, z_country, z_place, z_eps) = (
                    std_normal(&mut rng),
                    std_normal(&mut rng),
                    std_normal(&mut rng),
                    std_normal(&mut rng),
                );
                let beta_r = region
                    .and_then(|r| n.beta_region[r])
                    .unwrap_or_else(|| n.sigma(Scale::BetaRegion) * z_region);
                let beta_c = country
                    .and_then(|c| n.beta_country[c])
                    .unwrap_or_else(|| n.sigma(Scale::BetaCountry) * z_country);
                let (beta_p, eta) = match place {
                    Some(p) => (
                        n.beta_place[p],
                        n.delta.get(p).map_or(0.0, |d| model.trend_from_increments(d, year)),
                    ),
                    None => {
                        let sd = n.sigma(Scale::Delta);
                        for v in delta.iter_mut() {
                            *v = sd * std_normal(&mut rng);
                        }
                        let eta = if trend_on {
                            model.trend_from_increments(&delta, year)
                        } else {
                            0.0
                        };
                        (n.sigma(Scale::BetaPlace) * z_place, eta)
                    }
                };
                let eps = Scale::epsilon(o.source_type).map_or(0.0, |s| n.sigma(s) * z_eps);
                let mu = n.beta0
                    + beta_r
                    + beta_c
                    + beta_p
                    + n.beta_nmr * nmr.ln()
                    + eta
                    + n.gamma(definition, o.income_group)
                    + eps;
                let y = Binomial::new(n_total, inv_logit(mu))
                    .expect("probability in [0, 1]")
                    .sample(&mut rng);
                ratios.push(y as f64 / n_total as f64);
            }
            let q = quantiles(&ratios, &[INTERVAL.0, 0.5, INTERVAL.1]);
            Ok(ScoredPoint {
                id: o.id,
                region: o.region.clone(),
                observed: o.proportion(),
                median: q[1],
                lower: q[0],
                upper: q[2],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub region: String,
    pub mae: f64,
    pub coverage95: f64,
    pub n: usize,
}

/// Global row first (all points pooled), then regions by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ReportRow>,
}

impl ValidationReport {
    pub fn from_points(points: &[ScoredPoint]) -> Self {
        let row = |region: &str, pts: &[&ScoredPoint]| {
            let n = pts.len();
            let (mae, coverage95) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (
                    pts.iter().map(|p| p.abs_error()).sum::<f64>() / n as f64,
                    pts.iter().filter(|p| p.covered()).count() as f64 / n as f64,
                )
            };
            ReportRow {
                region: region.to_string(),
                mae,
                coverage95,
                n,
            }
        };
        let mut by_region: BTreeMap<&str, Vec<&ScoredPoint>> = BTreeMap::new();
        for p in points {
            by_region.entry(p.region.as_str()).or_default().push(p);
        }
        let all: Vec<&ScoredPoint> = points.iter().collect();
        let mut rows = vec![row(GLOBAL, &all)];
        rows.extend(by_region.iter().map(|(r, pts)| row(r, pts)));
        Self { rows }
    }

    pub fn global(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn region(&self, name: &str) -> Option<&ReportRow> {
        self.rows[1..].iter().find(|r| r.region == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,mae,coverage95,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.region, r.mae, r.coverage95, r.n));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), ValidationError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

pub fn score(
    test: &[Observation],
    model: &Model,
    draws: &PosteriorDraws,
    seed: u64,
) -> Result<ValidationReport, ValidationError> {
    Ok(ValidationReport::from_points(&score_points(test, model, draws, seed)?))
}

/// Fit each split (concurrently) and score its test set; points from all
/// splits are pooled into one report.
pub fn fit_and_score(
    splits: &[Split],
    options: &ModelOptions,
    config: &SamplerConfig,
    seed: u64,
) -> Result<(ValidationReport, Vec<ScoredPoint>), ValidationError> {
    let per_split: Vec<Vec<ScoredPoint>> = splits
        .par_iter()
        .map(|s| {
            let model = Model::new(s.train.clone(), options.clone())?;
            let draws = fit_model(&model, config)?;
            score_points(&s.test, &model, &draws, seed)
        })
        .collect::<Result<_, ValidationError>>()?;
    let points: Vec<ScoredPoint> = per_split.into_iter().flatten().collect();
    Ok((ValidationReport::from_points(&points), points))
}
