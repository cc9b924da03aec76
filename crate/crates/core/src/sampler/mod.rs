//! Adaptive NUTS over any [`LogDensity`], run as independent parallel
//! chains.

pub mod diagnostics;
pub mod drawfile;
pub mod nuts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::std_normal;
use crate::posterior::{
    check_gradients, LogDensity, Model, ParameterLayout, PosteriorError, GRADIENT_FD_STEP, GRADIENT_TOLERANCE,
};
pub use diagnostics::{bulk_ess, compute_rhat, mean_ess, DiagnosticError, Rhat};
use nuts::{Metric, Nuts, Point};
pub use nuts::TransitionStats;

/// Share of divergent post-warmup transitions that aborts a run.
pub const DIVERGENCE_STORM_FRACTION: f64 = 0.1;
/// Standard deviation of the random initial values.
pub const INIT_SD: f64 = 0.1;
pub const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("chain {chain}: no finite initial point after {attempts} attempts")]
    InitializationFailed { chain: usize, attempts: usize },
    #[error("{divergent} of {total} post-warmup transitions diverged")]
    DivergenceStorm { divergent: usize, total: usize },
    #[error("gradient smoke test failed: max error {max_error:.3e} at coordinate {coordinate}")]
    GradientCheck { max_error: f64, coordinate: usize },
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_leapfrog: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            seed: 1,
            target_accept: 0.8,
            max_leapfrog: 1024,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if self.chains < 1 {
            return bad("chains must be at least 1");
        }
        if self.warmup < 100 {
            return bad("warmup must be at least 100");
        }
        if self.samples < 1 {
            return bad("samples must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.max_leapfrog < 2 {
            return bad("max_leapfrog must be at least 2");
        }
        Ok(())
    }

    /// Deepest tree whose leapfrog count stays within `max_leapfrog`.
    pub fn max_depth(&self) -> usize {
        (usize::BITS - 1 - self.max_leapfrog.leading_zeros()) as usize
    }
}

/// Nesterov dual averaging of `log(step size)`.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    // Larger than the customary 10: with a 50-iteration terminal buffer the
    // early iterates otherwise drag the averaged step size well below target.
    const T0: f64 = 50.0;
    const KAPPA: f64 = 0.75;

    pub fn new(step_size: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            target,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
        }
    }

    /// Feed one acceptance statistic, returning the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Slow adaptation windows `[start, end)` for the diagonal metric: a fast
/// initial buffer, doubling windows, and a fast terminal buffer.
pub fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (mut init, mut term, mut base) = (75, 50, 25);
    if init + term + base > warmup {
        init = warmup * 15 / 100;
        term = warmup / 10;
        base = warmup - init - term;
    }
    let end = warmup - term;
    let mut out = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        if stop + 2 * size > end {
            stop = end;
        }
        out.push((start, stop));
        start = stop;
        size *= 2;
    }
    out
}

#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *s += d * (xi - *m);
        }
    }

    /// Sample variances shrunk towards 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ChainOutput {
    draws: Vec<f64>,
    stats: Vec<TransitionStats>,
    step_size: f64,
    inv_mass: Vec<f64>,
}

fn initial_point<D: LogDensity + ?Sized>(density: &D, rng: &mut ChaCha8Rng, chain: usize) -> Result<Point, SamplerError> {
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..density.dim()).map(|_| INIT_SD * std_normal(rng)).collect();
        if let Some(z) = Point::at(density, q) {
            return Ok(z);
        }
    }
    Err(SamplerError::InitializationFailed {
        chain,
        attempts: INIT_ATTEMPTS,
    })
}

fn run_chain<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig, chain: usize) -> Result<ChainOutput, SamplerError> {
    let dim = density.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(chain as u64));
    let mut z = initial_point(density, &mut rng, chain)?;
    let mut nuts = Nuts {
        density,
        metric: Metric::unit(dim),
        step_size: 1.0,
        max_depth: config.max_depth(),
    };
    nuts.find_reasonable_step_size(&mut rng, &z);
    let mut da = DualAveraging::new(nuts.step_size, config.target_accept);

    let windows = adaptation_windows(config.warmup);
    let mut window = 0;
    let mut welford = Welford::new(dim);
    for it in 0..config.warmup {
        let (next, stats) = nuts.transition(&mut rng, &z);
        z = next;
        nuts.step_size = da.update(stats.accept_stat);
        if let Some(&(start, end)) = windows.get(window) {
            if it >= start && it < end {
                welford.add(&z.q);
            }
            if it + 1 == end {
                nuts.metric = Metric {
                    inv_mass: welford.regularized(),
                };
                welford = Welford::new(dim);
                window += 1;
                nuts.find_reasonable_step_size(&mut rng, &z);
                da = DualAveraging::new(nuts.step_size, config.target_accept);
            }
        }
    }
    nuts.step_size = da.final_step_size();

    let mut draws = Vec::with_capacity(config.samples * dim);
    let mut stats = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let (next, st) = nuts.transition(&mut rng, &z);
        z = next;
        draws.extend_from_slice(&z.q);
        stats.push(st);
    }
    Ok(ChainOutput {
        draws,
        stats,
        step_size: nuts.step_size,
        inv_mass: nuts.metric.inv_mass,
    })
}

/// Post-warmup draws, stored chain-major.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub layout: Option<ParameterLayout>,
    pub config: SamplerConfig,
    pub chains: usize,
    pub samples: usize,
    pub dim: usize,
    values: Vec<f64>,
    /// Per chain, per post-warmup transition. Empty for draws read from disk.
    pub stats: Vec<Vec<TransitionStats>>,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    /// `None` when there are too few chains or draws for R-hat.
    pub rhat: Option<Vec<Rhat>>,
    pub ess_bulk: Option<Vec<f64>>,
}

impl PosteriorDraws {
    /// Assemble draws and compute diagnostics. `values` is chain-major,
    /// `chains × samples × dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_values(
        names: Vec<String>,
        layout: Option<ParameterLayout>,
        config: SamplerConfig,
        chains: usize,
        samples: usize,
        values: Vec<f64>,
        divergences: Vec<usize>,
        step_sizes: Vec<f64>,
    ) -> Self {
        let dim = names.len();
        assert_eq!(values.len(), chains * samples * dim, "draw array has the wrong size");
        let mut out = Self {
            names,
            layout,
            config,
            chains,
            samples,
            dim,
            values,
            stats: Vec::new(),
            divergences,
            step_sizes,
            rhat: None,
            ess_bulk: None,
        };
        out.compute_diagnostics();
        out
    }

    fn compute_diagnostics(&mut self) {
        if self.chains < 2 || self.samples < 4 {
            return;
        }
        let per_param: Vec<(Rhat, f64)> = (0..self.dim)
            .into_par_iter()
            .map(|j| {
                let chains = self.parameter_chains(j);
                let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
                let r = compute_rhat(&refs).expect("shape checked above");
                let e = bulk_ess(&refs).expect("shape checked above");
                (r, e)
            })
            .collect();
        let (r, e) = per_param.into_iter().unzip();
        self.rhat = Some(r);
        self.ess_bulk = Some(e);
    }

    /// Total number of draws across chains.
    pub fn len(&self) -> usize {
        self.chains * self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn draw(&self, chain: usize, sample: usize) -> &[f64] {
        let start = (chain * self.samples + sample) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Draw `d` in chain-major order.
    pub fn flat(&self, d: usize) -> &[f64] {
        &self.values[d * self.dim..(d + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    pub fn parameter_chains(&self, j: usize) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| (0..self.samples).map(|s| self.draw(c, s)[j]).collect())
            .collect()
    }

    pub fn parameter(&self, j: usize) -> Vec<f64> {
        self.iter().map(|d| d[j]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat
            .as_ref()
            .map(|r| r.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn total_divergences(&self) -> usize {
        self.divergences.iter().sum()
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

/// Default names `theta[i]` for a density without a layout.
pub fn generic_names(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("theta[{i}]")).collect()
}

/// Run `config.chains` chains in parallel. Results depend only on the
/// configuration, not on thread scheduling.
pub fn run_hmc<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig) -> Result<PosteriorDraws, SamplerError> {
    let draws = run_hmc_unchecked(density, config)?;
    let divergent = draws.total_divergences();
    let total = draws.len();
    if divergent as f64 > DIVERGENCE_STORM_FRACTION * total as f64 {
        return Err(SamplerError::DivergenceStorm { divergent, total });
    }
    Ok(draws)
}

/// [`run_hmc`] without the divergence-storm check.
pub fn run_hmc_unchecked<D: LogDensity + ?Sized>(
    density: &D,
    config: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let outputs: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(density, config, c))
        .collect::<Result<_, _>>()?;

    let divergences: Vec<usize> = outputs
        .iter()
        .map(|o| o.stats.iter().filter(|s| s.diverging).count())
        .collect();
    let total = config.chains * config.samples;
    let step_sizes = outputs.iter().map(|o| o.step_size).collect();
    let mut values = Vec::with_capacity(total * density.dim());
    let mut stats = Vec::with_capacity(config.chains);
    for o in outputs {
        values.extend(o.draws);
        stats.push(o.stats);
    }
    let mut draws = PosteriorDraws::from_values(
        generic_names(density.dim()),
        None,
        config.clone(),
        config.chains,
        config.samples,
        values,
        divergences,
        step_sizes,
    );
    draws.stats = stats;
    Ok(draws)
}

/// Sample the model posterior; the draws carry the model's layout and
/// parameter names.
pub fn fit_model(model: &Model, config: &SamplerConfig) -> Result<PosteriorDraws, SamplerError> {
    gradient_smoke_test(model, config.seed)?;
    let mut draws = run_hmc(model, config)?;
    draws.names = model.layout.names();
    draws.layout = Some(model.layout.clone());
    Ok(draws)
}

/// Final inverse metric per chain, for inspection in tests and examples.
pub fn adapted_metrics<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig) -> Result<Vec<Vec<f64>>, SamplerError> {
    config.validate()?;
    (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(density, config, c).map(|o| o.inv_mass))
        .collect()
}

/// Compare the analytic gradient with finite differences at one random
/// point before sampling.
pub fn gradient_smoke_test(model: &Model, seed: u64) -> Result<(), SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = check_gradients(model, 1, GRADIENT_FD_STEP, 0.5, GRADIENT_TOLERANCE, &mut rng)?;
    if !report.passed() {
        return Err(SamplerError::GradientCheck {
            max_error: report.max_error,
            coordinate: report.worst_coordinate,
        });
    }
    Ok(())
}
