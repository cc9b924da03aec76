//! Batch command-line interface.
//!
//! Exit codes: 0 ok, 1 internal failure, 2 input or configuration error,
//! 3 nonconvergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_all, combine_regions, write_region_estimates};
use crate::data::{load_inputs, InputPaths, ModelInputs, UndefinedPolicy, Window};
use crate::estimation::{
    compute_weights, read_country_draws, write_country_draws, write_country_estimates, write_place_estimates,
    write_weights, Predictor, DEFAULT_QUANTILES,
};
use crate::manifest::{manifest_path_for, verify_inputs, RunManifest, MANIFEST_FILE};
use crate::posterior::{
    check_gradients, LogDensity, Model, ModelOptions, PosteriorError, GRADIENT_FD_STEP, GRADIENT_TOLERANCE,
};
use crate::sampler::drawfile::{read_draws, write_draws};
use crate::sampler::{fit_model, PosteriorDraws, SamplerConfig, SamplerError};
use crate::splines::build_basis;
use crate::synthetic::{generate, write_scenario, ScenarioConfig, SyntheticError, GROUND_TRUTH_FILE};
use crate::validation::{fit_and_score, holdout_split, kfold_split, ScoredPoint};

/// R-hat at or above this fails a fit.
pub const RHAT_THRESHOLD: f64 = 1.02;
pub const GLOBAL_REGION: &str = "Global";

pub const PLACES_FILE: &str = "places.csv";
pub const COUNTRY_ESTIMATES_FILE: &str = "countries.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const COUNTRY_DRAWS_FILE: &str = "country_draws.csv";
pub const REGIONS_FILE: &str = "regions.csv";
pub const POINTS_FILE: &str = "points.csv";

#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Input(String),
    Nonconverged(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Nonconverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Internal(m) | CliError::Input(m) | CliError::Nonconverged(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn sampler_error(e: SamplerError) -> CliError {
    match e {
        SamplerError::InvalidConfig(_) => input(e),
        SamplerError::DivergenceStorm { .. } => CliError::Nonconverged(e.to_string()),
        _ => internal(e),
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub year_start: i32,
    pub year_end: i32,
    pub undefined_policy: UndefinedPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            year_start: 2000,
            year_end: 2021,
            undefined_policy: UndefinedPolicy::TreatAsLate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub quantiles: Vec<f64>,
    /// Seed for the unobserved-component draws.
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            quantiles: DEFAULT_QUANTILES.to_vec(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    Holdout,
    Kfold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub mode: ValidationMode,
    pub cutoff: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            mode: ValidationMode::Holdout,
            cutoff: 2017.0,
            folds: 10,
            seed: 1,
        }
    }
}

/// Settings shared by `fit`, `predict`, `aggregate`, `validate` and
/// `check-gradients`, read from one TOML file. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelOptions,
    pub sampler: SamplerConfig,
    pub estimation: EstimationConfig,
    pub validation: ValidationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| input(format!("bad config {}: {e}", path.display())))
    }

    pub fn window(&self) -> CliResult<Window> {
        Window::new(self.data.year_start, self.data.year_end).map_err(input)
    }
}

/// Context stored in the draw file header.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitMeta {
    inputs: BTreeMap<String, String>,
    data: DataConfig,
    model: ModelOptions,
}

#[derive(Debug, Parser)]
#[command(name = "ipsb", version, about = "Intrapartum stillbirth proportion estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the posterior and write a draw file.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
        /// Exit 0 even when some R-hat reaches the threshold.
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Place and country estimates from a draw file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        draws: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regional and global estimates from `predict` output.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `predict`.
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Out-of-sample validation report.
    Validate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long, value_enum)]
        mode: Option<ValidationMode>,
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
        /// Report file; per-point scores go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    CheckGradients {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Perturb the analytic gradient (fault injection for tests).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write the spline basis on the integer year grid.
    Basis {
        #[arg(long, default_value_t = 2000)]
        start: i32,
        #[arg(long, default_value_t = 2021)]
        end: i32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory holding the input files.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SamplerFlags {
    fn apply(&self, c: &mut SamplerConfig) {
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.warmup {
            c.warmup = v;
        }
        if let Some(v) = self.samples {
            c.samples = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Fit {
            common,
            sampler,
            out,
            allow_nonconverged,
        } => cmd_fit(&common, &sampler, &out, allow_nonconverged),
        Command::Predict { common, draws, out } => cmd_predict(&common, &draws, &out),
        Command::Aggregate { common, estimates, out } => cmd_aggregate(&common, &estimates, &out),
        Command::Validate {
            common,
            sampler,
            mode,
            cutoff,
            folds,
            out,
        } => cmd_validate(&common, &sampler, mode, cutoff, folds, &out),
        Command::CheckGradients {
            common,
            points,
            seed,
            corrupt_gradient,
        } => cmd_check_gradients(&common, points, seed, corrupt_gradient),
        Command::Basis { start, end, out } => cmd_basis(start, end, &out),
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(internal)
}

fn load_data(dir: &Path, data: &DataConfig) -> CliResult<(InputPaths, ModelInputs)> {
    let paths = InputPaths::in_dir(dir);
    let window = Window::new(data.year_start, data.year_end).map_err(input)?;
    let inputs = load_inputs(&paths, window, data.undefined_policy).map_err(input)?;
    Ok((paths, inputs))
}

fn synthetic_error(e: SyntheticError) -> CliError {
    match e {
        SyntheticError::InvalidConfig(_) | SyntheticError::Read { .. } => input(e),
        _ => internal(e),
    }
}

pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut scenario = ScenarioConfig::load(config).map_err(synthetic_error)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let (inputs, truth) = generate(&scenario).map_err(synthetic_error)?;
    let paths = write_scenario(out, &inputs, &truth).map_err(internal)?;
    let mut manifest = RunManifest::new("simulate", to_json(&scenario)?, scenario.seed);
    manifest.record_input(config).map_err(input)?;
    for p in paths.all() {
        manifest.record_output(p).map_err(internal)?;
    }
    manifest.record_output(&out.join(GROUND_TRUTH_FILE)).map_err(internal)?;
    manifest.write(&out.join(MANIFEST_FILE)).map_err(internal)?;
    println!(
        "wrote {} observations and {} aux records to {}",
        inputs.observations.len(),
        inputs.aux.len(),
        out.display()
    );
    Ok(())
}

/// Largest R-hat and its parameter name.
fn rhat_summary(draws: &PosteriorDraws) -> Option<(f64, String, usize)> {
    let rhat = draws.rhat.as_ref()?;
    let (j, worst) = rhat.iter().enumerate().max_by(|a, b| a.1.value.total_cmp(&b.1.value))?;
    let over = rhat.iter().filter(|r| !(r.value < RHAT_THRESHOLD)).count();
    Some((worst.value, draws.names[j].clone(), over))
}

pub fn cmd_fit(common: &Common, flags: &SamplerFlags, out: &Path, allow_nonconverged: bool) -> CliResult<()> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    flags.apply(&mut config.sampler);
    config.sampler.validate().map_err(input)?;
    let (paths, inputs) = load_data(&common.data, &config.data)?;
    let mut manifest = RunManifest::new("fit", to_json(&config)?, config.sampler.seed);
    if let Some(c) = &common.config {
        manifest.record_input(c).map_err(input)?;
    }
    manifest.record_inputs(&paths).map_err(input)?;

    let model = Model::new(inputs, config.model.clone()).map_err(input)?;
    let draws = fit_model(&model, &config.sampler).map_err(sampler_error)?;
    let meta = FitMeta {
        inputs: manifest.inputs.clone(),
        data: config.data.clone(),
        model: config.model.clone(),
    };
    write_draws(out, &draws, to_json(&meta)?).map_err(internal)?;
    manifest.record_output(out).map_err(internal)?;
    manifest.write(&manifest_path_for(out)).map_err(internal)?;

    println!(
        "{} chains x {} draws, {} parameters",
        draws.chains,
        draws.samples,
        draws.names.len()
    );
    println!("divergent transitions: {}", draws.total_divergences());
    match rhat_summary(&draws) {
        Some((value, name, over)) => {
            println!("max R-hat {value:.4} ({name}); {over} parameters at or above {RHAT_THRESHOLD}");
            if over > 0 && !allow_nonconverged {
                return Err(CliError::Nonconverged(format!(
                    "{over} parameters have R-hat >= {RHAT_THRESHOLD} (max {value:.4} for {name})"
                )));
            }
        }
        None => println!("R-hat needs at least 2 chains with 4 draws each"),
    }
    Ok(())
}

/// Read a draw file and check it was fitted to the files in `data`.
fn load_fit(data: &Path, draws_path: &Path) -> CliResult<(InputPaths, Model, PosteriorDraws)> {
    let (draws, meta) = read_draws(draws_path).map_err(input)?;
    let meta: FitMeta = serde_json::from_value(meta).map_err(|e| input(format!("draw file context: {e}")))?;
    let paths = InputPaths::in_dir(data);
    verify_inputs(&meta.inputs, &paths).map_err(input)?;
    let (_, inputs) = load_data(data, &meta.data)?;
    let model = Model::new(inputs, meta.model).map_err(input)?;
    Ok((paths, model, draws))
}

pub fn cmd_predict(common: &Common, draws_path: &Path, out: &Path) -> CliResult<()> {
    let config = RunConfig::load(common.config.as_deref())?;
    let (paths, model, draws) = load_fit(&common.data, draws_path)?;
    let predictor = Predictor::new(&model, &draws).map_err(input)?;
    let weights = compute_weights(&model.inputs, &model.inputs.covariates).map_err(input)?;
    let places = predictor.predict_places().map_err(internal)?;
    let countries = predictor
        .predict_all(&weights, config.estimation.seed)
        .map_err(internal)?;

    std::fs::create_dir_all(out).map_err(internal)?;
    let qs = &config.estimation.quantiles;
    let files = [
        out.join(PLACES_FILE),
        out.join(COUNTRY_ESTIMATES_FILE),
        out.join(WEIGHTS_FILE),
        out.join(COUNTRY_DRAWS_FILE),
    ];
    write_place_estimates(&files[0], &places, qs).map_err(internal)?;
    write_country_estimates(&files[1], &countries, qs).map_err(internal)?;
    write_weights(&files[2], &weights).map_err(internal)?;
    write_country_draws(&files[3], &countries).map_err(internal)?;

    let mut manifest = RunManifest::new("predict", to_json(&config)?, config.estimation.seed);
    manifest.record_inputs(&paths).map_err(input)?;
    manifest.record_input(draws_path).map_err(input)?;
    for f in &files {
        manifest.record_output(f).map_err(internal)?;
    }
    manifest.write(&out.join(MANIFEST_FILE)).map_err(internal)?;
    println!(
        "{} places and {} countries over {} draws written to {}",
        places.len(),
        countries.len(),
        draws.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_aggregate(common: &Common, estimates: &Path, out: &Path) -> CliResult<()> {
    let config = RunConfig::load(common.config.as_deref())?;
    let upstream = RunManifest::read(&estimates.join(MANIFEST_FILE)).map_err(input)?;
    let paths = InputPaths::in_dir(&common.data);
    verify_inputs(&upstream.inputs, &paths).map_err(input)?;
    let draws_path = estimates.join(COUNTRY_DRAWS_FILE);
    let recorded = InputPaths {
        observations: draws_path.clone(),
        aux: draws_path.clone(),
        nmr: draws_path.clone(),
        sbr: draws_path.clone(),
        countries: None,
    };
    verify_inputs(&upstream.outputs, &recorded).map_err(input)?;

    let (_, inputs) = load_data(&common.data, &config.data)?;
    let countries = read_country_draws(&draws_path).map_err(input)?;
    let region_map = inputs.hierarchy.region_map();
    let mut regions = aggregate_all(&countries, &inputs.covariates, &region_map).map_err(input)?;
    let global = combine_regions(GLOBAL_REGION, &regions).map_err(input)?;
    regions.push(global);
    write_region_estimates(out, &regions, &config.estimation.quantiles).map_err(internal)?;

    let mut manifest = RunManifest::new("aggregate", to_json(&config)?, 0);
    manifest.record_inputs(&paths).map_err(input)?;
    manifest.record_input(&draws_path).map_err(input)?;
    manifest.record_output(out).map_err(internal)?;
    manifest.write(&manifest_path_for(out)).map_err(internal)?;
    println!("{} regions written to {}", regions.len(), out.display());
    Ok(())
}

fn write_points(path: &Path, points: &[ScoredPoint]) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(internal)?);
    let mut body = String::from("id,region,observed,median,lower,upper\n");
    for p in points {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.id, p.region, p.observed, p.median, p.lower, p.upper
        ));
    }
    w.write_all(body.as_bytes()).map_err(internal)?;
    w.flush().map_err(internal)
}

pub fn cmd_validate(
    common: &Common,
    flags: &SamplerFlags,
    mode: Option<ValidationMode>,
    cutoff: Option<f64>,
    folds: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    flags.apply(&mut config.sampler);
    config.sampler.validate().map_err(input)?;
    let v = &mut config.validation;
    if let Some(m) = mode {
        v.mode = m;
    }
    if let Some(c) = cutoff {
        v.cutoff = c;
    }
    if let Some(k) = folds {
        v.folds = k;
    }
    let (paths, inputs) = load_data(&common.data, &config.data)?;
    let v = &config.validation;
    let splits = match v.mode {
        ValidationMode::Holdout => vec![holdout_split(&inputs, v.cutoff).map_err(input)?],
        ValidationMode::Kfold => kfold_split(&inputs, v.folds, v.seed).map_err(input)?,
    };
    let (report, points) = fit_and_score(&splits, &config.model, &config.sampler, v.seed).map_err(|e| match e {
        crate::validation::ValidationError::Sampler(s) => sampler_error(s),
        e => internal(e),
    })?;
    report.write(out).map_err(internal)?;
    let points_path = out.with_file_name(POINTS_FILE);
    write_points(&points_path, &points)?;

    let mut manifest = RunManifest::new("validate", to_json(&config)?, v.seed);
    manifest.record_inputs(&paths).map_err(input)?;
    manifest.record_output(out).map_err(internal)?;
    manifest.record_output(&points_path).map_err(internal)?;
    manifest.write(&manifest_path_for(out)).map_err(internal)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// A density whose gradient is deliberately wrong in one coordinate.
struct Corrupted<'a>(&'a Model);

impl LogDensity for Corrupted<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, PosteriorError> {
        let v = self.0.logp_and_grad(x, grad)?;
        grad[0] += 0.01 * (1.0 + grad[0].abs());
        Ok(v)
    }
}

pub fn cmd_check_gradients(common: &Common, points: usize, seed: u64, corrupt: bool) -> CliResult<()> {
    let config = RunConfig::load(common.config.as_deref())?;
    let (_, inputs) = load_data(&common.data, &config.data)?;
    let model = Model::new(inputs, config.model.clone()).map_err(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density: &dyn LogDensity = if corrupt { &Corrupted(&model) } else { &model };
    let start = std::time::Instant::now();
    let report =
        check_gradients(density, points, GRADIENT_FD_STEP, 0.5, GRADIENT_TOLERANCE, &mut rng).map_err(internal)?;
    let names = model.layout.names();
    println!(
        "{} points, {} coordinates, max relative error {:.3e} ({}), {:.1}s",
        report.points,
        model.dim(),
        report.max_error,
        names[report.worst_coordinate],
        start.elapsed().as_secs_f64()
    );
    if report.passed() {
        println!("PASS (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        println!("FAIL (tolerance {:e})", report.tolerance);
        Err(CliError::Internal("analytic gradient disagrees with finite differences".into()))
    }
}

pub fn cmd_basis(start: i32, end: i32, out: &Path) -> CliResult<()> {
    let basis = build_basis(start, end).map_err(input)?;
    let mut body = String::from("year");
    for h in 0..basis.h {
        body.push_str(&format!(",b{h}"));
    }
    body.push('\n');
    for year in start..=end {
        body.push_str(&year.to_string());
        for v in basis.b_row(year) {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    std::fs::write(out, body).map_err(internal)?;
    println!("{} basis functions over {start}-{end} written to {}", basis.h, out.display());
    Ok(())
}
