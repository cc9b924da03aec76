//! Input records, the place/country/region hierarchy, and file ingestion.
//!
//! Time convention: `year_start` and `year_end` bound the half-open interval
//! `[year_start, year_end)` in continuous time, and calendar year `Y` is
//! `[Y, Y + 1)`. A full-year 2010 record is therefore `2010,2011` and a record
//! for the first third of 2016 is `2016,2016.3333`. The grid year used for
//! covariates and the spline trend is the calendar year containing the
//! midpoint of the interval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const AUX_FILE: &str = "aux.csv";
pub const NMR_FILE: &str = "nmr.csv";
pub const SBR_FILE: &str = "sbr.csv";
pub const COUNTRIES_FILE: &str = "countries.csv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: field `{field}`: {reason}")]
    MalformedRecord {
        file: String,
        line: u64,
        field: String,
        reason: String,
    },
    #[error("no {table} covariate for country `{country}` in {year}")]
    MissingCovariate {
        table: &'static str,
        country: String,
        year: i32,
    },
    #[error("hierarchy conflict: {0}")]
    HierarchyConflict(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid window {0}..={1}")]
    InvalidWindow(i32, i32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    Crvs,
    HealthFacility,
    Hmis,
    PopulationStudy,
}

impl SourceType {
    pub const ALL: [SourceType; 4] = [
        SourceType::Crvs,
        SourceType::HealthFacility,
        SourceType::Hmis,
        SourceType::PopulationStudy,
    ];

    /// Source types carrying an estimated non-sampling error.
    pub const NOISY: [SourceType; 3] = [
        SourceType::HealthFacility,
        SourceType::Hmis,
        SourceType::PopulationStudy,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SourceType::Crvs => "crvs",
            SourceType::HealthFacility => "health_facility",
            SourceType::Hmis => "hmis",
            SourceType::PopulationStudy => "population_study",
        }
    }

    /// Position within [`SourceType::NOISY`], `None` for CRVS.
    pub fn noisy_index(self) -> Option<usize> {
        match self {
            SourceType::Crvs => None,
            SourceType::HealthFacility => Some(0),
            SourceType::Hmis => Some(1),
            SourceType::PopulationStudy => Some(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definition {
    Early,
    Late,
    Undefined,
}

impl Definition {
    pub fn token(self) -> &'static str {
        match self {
            Definition::Early => "early",
            Definition::Late => "late",
            Definition::Undefined => "undefined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncomeGroup {
    Hic,
    Lmic,
}

impl IncomeGroup {
    pub fn token(self) -> &'static str {
        match self {
            IncomeGroup::Hic => "hic",
            IncomeGroup::Lmic => "lmic",
        }
    }
}

macro_rules! token_from_str {
    ($ty:ty, $($tok:literal => $val:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($tok => Ok($val),)+
                    other => Err(format!("unknown token `{other}`")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_from_str!(SourceType,
    "crvs" => SourceType::Crvs,
    "health_facility" => SourceType::HealthFacility,
    "hmis" => SourceType::Hmis,
    "population_study" => SourceType::PopulationStudy,
);
token_from_str!(Definition,
    "early" => Definition::Early,
    "late" => Definition::Late,
    "undefined" => Definition::Undefined,
);
token_from_str!(IncomeGroup, "hic" => IncomeGroup::Hic, "lmic" => IncomeGroup::Lmic);

/// How observations reported under no stated definition enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    /// Keep them and apply no definition adjustment.
    #[default]
    TreatAsLate,
    Exclude,
}

/// Inclusive range of calendar years being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i32,
    pub end: i32,
}

impl Window {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if end < start {
            return Err(DataError::InvalidWindow(start, end));
        }
        Ok(Self { start, end })
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }

    pub fn offset(&self, year: i32) -> usize {
        (year - self.start) as usize
    }
}

impl Default for Window {
    fn default() -> Self {
        Self {
            start: 2000,
            end: 2021,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub country: String,
    pub place: String,
    pub region: String,
    pub year_start: f64,
    pub year_end: f64,
    /// Intrapartum stillbirths.
    pub y: u64,
    /// Antepartum stillbirths.
    pub z: u64,
    pub source_type: SourceType,
    pub definition: Definition,
    pub income_group: IncomeGroup,
}

impl Observation {
    /// Classified stillbirths, `y + z`.
    pub fn total(&self) -> u64 {
        self.y + self.z
    }

    pub fn proportion(&self) -> f64 {
        self.y as f64 / self.total() as f64
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.year_start + self.year_end)
    }

    /// Calendar year containing the midpoint of the reporting interval.
    pub fn grid_year(&self) -> i32 {
        self.midpoint().floor() as i32
    }

    /// Fraction of calendar year `year` covered by the reporting interval.
    pub fn year_overlap(&self, year: i32) -> f64 {
        let lo = self.year_start.max(year as f64);
        let hi = self.year_end.min(year as f64 + 1.0);
        (hi - lo).max(0.0)
    }

    /// Calendar years touched by the reporting interval.
    pub fn calendar_years(&self) -> std::ops::RangeInclusive<i32> {
        let first = self.year_start.floor() as i32;
        let last = (self.year_end.ceil() as i32 - 1).max(first);
        first..=last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxObservation {
    pub aux_country: String,
    pub definition: Definition,
    pub y: u64,
    pub z: u64,
    pub income_group: IncomeGroup,
}

/// Country-year covariates. Sample vectors are draws from external
/// posteriors and all share the same length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTables {
    pub nmr_point: BTreeMap<(String, i32), f64>,
    pub nmr_samples: BTreeMap<(String, i32), Vec<f64>>,
    pub sbr_samples: BTreeMap<(String, i32), Vec<f64>>,
}

impl CovariateTables {
    /// Number of covariate samples per country-year (0 when empty).
    pub fn sample_count(&self) -> usize {
        self.nmr_samples
            .values()
            .chain(self.sbr_samples.values())
            .next()
            .map_or(0, Vec::len)
    }

    /// Tables with the same values for every country-year: NMR point and
    /// samples `nmr`, SBR samples `sbr`, `samples` draws each.
    pub fn constant(countries: &[&str], window: Window, nmr: f64, sbr: f64, samples: usize) -> Self {
        let mut t = Self::default();
        for c in countries {
            for year in window.years() {
                let key = (c.to_string(), year);
                t.nmr_point.insert(key.clone(), nmr);
                t.nmr_samples.insert(key.clone(), vec![nmr; samples]);
                t.sbr_samples.insert(key, vec![sbr; samples]);
            }
        }
        t
    }

    pub fn nmr_point(&self, country: &str, year: i32) -> Option<f64> {
        self.nmr_point.get(&(country.to_string(), year)).copied()
    }

    pub fn nmr_samples(&self, country: &str, year: i32) -> Option<&[f64]> {
        self.nmr_samples
            .get(&(country.to_string(), year))
            .map(Vec::as_slice)
    }

    pub fn sbr_samples(&self, country: &str, year: i32) -> Option<&[f64]> {
        self.sbr_samples
            .get(&(country.to_string(), year))
            .map(Vec::as_slice)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let j = self.sample_count();
        for (table, map) in [("nmr", &self.nmr_samples), ("sbr", &self.sbr_samples)] {
            for ((c, y), v) in map {
                if v.len() != j {
                    return Err(format!(
                        "{table} samples for {c}/{y} have length {} but expected {j}",
                        v.len()
                    ));
                }
                if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                    return Err(format!("{table} sample {bad} for {c}/{y} is not positive"));
                }
            }
        }
        for ((c, y), v) in &self.nmr_point {
            if !(v.is_finite() && *v > 0.0) {
                return Err(format!("nmr point estimate {v} for {c}/{y} is not positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryInfo {
    pub id: String,
    pub region: usize,
    pub has_data: bool,
    /// Exactly one place reports data for this country; its place effect is
    /// fixed at zero.
    pub single_place: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceInfo {
    pub id: String,
    pub country: usize,
}

/// Dense indices for regions, countries and places, each sorted by
/// identifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hierarchy {
    pub regions: Vec<String>,
    pub countries: Vec<CountryInfo>,
    pub places: Vec<PlaceInfo>,
    region_lookup: HashMap<String, usize>,
    country_lookup: HashMap<String, usize>,
    place_lookup: HashMap<String, usize>,
}

impl Hierarchy {
    pub fn region(&self, id: &str) -> Option<usize> {
        self.region_lookup.get(id).copied()
    }

    pub fn country(&self, id: &str) -> Option<usize> {
        self.country_lookup.get(id).copied()
    }

    pub fn place(&self, id: &str) -> Option<usize> {
        self.place_lookup.get(id).copied()
    }

    pub fn places_in_country(&self, country: usize) -> impl Iterator<Item = usize> + '_ {
        self.places
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.country == country)
            .map(|(i, _)| i)
    }

    pub fn countries_in_region(&self, region: usize) -> impl Iterator<Item = usize> + '_ {
        self.countries
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.region == region)
            .map(|(i, _)| i)
    }

    /// Country to region map over every known country.
    pub fn region_map(&self) -> BTreeMap<String, String> {
        self.countries
            .iter()
            .map(|c| (c.id.clone(), self.regions[c.region].clone()))
            .collect()
    }

    fn from_maps(
        place_country: &BTreeMap<String, String>,
        country_region: &BTreeMap<String, String>,
        countries_with_data: &BTreeSet<String>,
    ) -> Self {
        let regions: Vec<String> = country_region
            .values()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let region_lookup: HashMap<String, usize> = regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        let mut places_per_country: BTreeMap<&str, usize> = BTreeMap::new();
        for c in place_country.values() {
            *places_per_country.entry(c.as_str()).or_default() += 1;
        }
        let countries: Vec<CountryInfo> = country_region
            .iter()
            .map(|(c, r)| CountryInfo {
                id: c.clone(),
                region: region_lookup[r],
                has_data: countries_with_data.contains(c),
                single_place: places_per_country.get(c.as_str()) == Some(&1),
            })
            .collect();
        let country_lookup: HashMap<String, usize> = countries
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        let places: Vec<PlaceInfo> = place_country
            .iter()
            .map(|(p, c)| PlaceInfo {
                id: p.clone(),
                country: country_lookup[c],
            })
            .collect();
        let place_lookup = places
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        Self {
            regions,
            countries,
            places,
            region_lookup,
            country_lookup,
            place_lookup,
        }
    }
}

fn insert_unique(
    map: &mut BTreeMap<String, String>,
    key: &str,
    value: &str,
    what: &str,
) -> Result<()> {
    match map.get(key) {
        Some(existing) if existing != value => Err(DataError::HierarchyConflict(format!(
            "{what} `{key}` mapped to both `{existing}` and `{value}`"
        ))),
        Some(_) => Ok(()),
        None => {
            map.insert(key.to_string(), value.to_string());
            Ok(())
        }
    }
}

/// Build dense indices from observations, optionally extended by a
/// country-to-region map listing countries without data.
pub fn build_hierarchy_with(
    observations: &[Observation],
    extra_countries: &BTreeMap<String, String>,
) -> Result<Hierarchy> {
    let mut place_country = BTreeMap::new();
    let mut country_region = BTreeMap::new();
    let mut with_data = BTreeSet::new();
    for o in observations {
        insert_unique(&mut place_country, &o.place, &o.country, "place")?;
        insert_unique(&mut country_region, &o.country, &o.region, "country")?;
        with_data.insert(o.country.clone());
    }
    for (c, r) in extra_countries {
        insert_unique(&mut country_region, c, r, "country")?;
    }
    Ok(Hierarchy::from_maps(&place_country, &country_region, &with_data))
}

pub fn build_hierarchy(observations: &[Observation]) -> Result<Hierarchy> {
    if observations.is_empty() {
        return Err(DataError::Empty("observations"));
    }
    build_hierarchy_with(observations, &BTreeMap::new())
}

/// Per-observation dense indices resolved against a [`Hierarchy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsIndex {
    pub region: usize,
    pub country: usize,
    pub place: usize,
    pub year: i32,
    /// Definition after applying the undefined-definition policy.
    pub definition: Definition,
}

/// A validated, indexed dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// Sorted by id.
    pub observations: Vec<Observation>,
    pub aux: Vec<AuxObservation>,
    pub covariates: Arc<CovariateTables>,
    pub hierarchy: Hierarchy,
    pub obs_index: Vec<ObsIndex>,
    pub window: Window,
    pub undefined_policy: UndefinedPolicy,
    /// Undefined-definition observations kept under [`UndefinedPolicy::TreatAsLate`].
    pub undefined_treated_as_late: usize,
    pub undefined_excluded: usize,
}

impl ModelInputs {
    /// Validate and index an in-memory dataset.
    pub fn new(
        mut observations: Vec<Observation>,
        aux: Vec<AuxObservation>,
        covariates: Arc<CovariateTables>,
        extra_countries: &BTreeMap<String, String>,
        window: Window,
        undefined_policy: UndefinedPolicy,
    ) -> Result<Self> {
        let before = observations.len();
        if undefined_policy == UndefinedPolicy::Exclude {
            observations.retain(|o| o.definition != Definition::Undefined);
        }
        let undefined_excluded = before - observations.len();
        observations.sort_by_key(|o| o.id);
        for pair in observations.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(malformed("observations", 0, "id", format!("duplicate id {}", pair[0].id)));
            }
        }
        for o in &observations {
            check_observation(o, &window).map_err(|(field, reason)| {
                malformed("observations", 0, field, format!("id {}: {reason}", o.id))
            })?;
        }
        check_aux(&aux)?;
        covariates
            .validate()
            .map_err(|reason| malformed("covariates", 0, "value", reason))?;

        let hierarchy = build_hierarchy_with(&observations, extra_countries)?;
        for c in &hierarchy.countries {
            for year in window.years() {
                if covariates.nmr_point(&c.id, year).is_none() {
                    return Err(missing("nmr point", &c.id, year));
                }
                if covariates.nmr_samples(&c.id, year).is_none() {
                    return Err(missing("nmr sample", &c.id, year));
                }
                if covariates.sbr_samples(&c.id, year).is_none() {
                    return Err(missing("sbr sample", &c.id, year));
                }
            }
        }

        let obs_index = observations
            .iter()
            .map(|o| {
                let place = hierarchy.place(&o.place).expect("indexed place");
                let country = hierarchy.places[place].country;
                ObsIndex {
                    region: hierarchy.countries[country].region,
                    country,
                    place,
                    year: o.grid_year(),
                    definition: match o.definition {
                        Definition::Undefined => Definition::Late,
                        d => d,
                    },
                }
            })
            .collect();
        let undefined_treated_as_late = observations
            .iter()
            .filter(|o| o.definition == Definition::Undefined)
            .count();

        Ok(Self {
            observations,
            aux,
            covariates,
            hierarchy,
            obs_index,
            window,
            undefined_policy,
            undefined_treated_as_late,
            undefined_excluded,
        })
    }

    /// Same covariates, aux data and country list, restricted observations.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Self> {
        Self::new(
            observations,
            self.aux.clone(),
            Arc::clone(&self.covariates),
            &self.hierarchy.region_map(),
            self.window,
            self.undefined_policy,
        )
    }

    pub fn sample_count(&self) -> usize {
        self.covariates.sample_count()
    }
}

fn malformed(file: &str, line: u64, field: &str, reason: impl Into<String>) -> DataError {
    DataError::MalformedRecord {
        file: file.to_string(),
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn missing(table: &'static str, country: &str, year: i32) -> DataError {
    DataError::MissingCovariate {
        table,
        country: country.to_string(),
        year,
    }
}

fn check_observation(
    o: &Observation,
    window: &Window,
) -> std::result::Result<(), (&'static str, String)> {
    if o.y + o.z == 0 {
        return Err(("y", "y + z must be at least 1".into()));
    }
    if !(o.year_start.is_finite() && o.year_end.is_finite()) {
        return Err(("year_start", "non-finite year".into()));
    }
    if o.year_start >= o.year_end {
        return Err(("year_end", "year_end must exceed year_start".into()));
    }
    if o.year_start < window.start as f64 || o.year_end > window.end as f64 + 1.0 {
        return Err((
            "year_start",
            format!("interval outside window {}..={}", window.start, window.end),
        ));
    }
    Ok(())
}

fn check_aux(aux: &[AuxObservation]) -> Result<()> {
    let mut seen: BTreeMap<&str, (IncomeGroup, BTreeSet<Definition>)> = BTreeMap::new();
    for (i, a) in aux.iter().enumerate() {
        let line = i as u64 + 2;
        if a.y + a.z == 0 {
            return Err(malformed("aux", line, "y", "y + z must be at least 1"));
        }
        if a.definition == Definition::Undefined {
            return Err(malformed("aux", line, "definition", "must be early or late"));
        }
        let entry = seen
            .entry(a.aux_country.as_str())
            .or_insert((a.income_group, BTreeSet::new()));
        if entry.0 != a.income_group {
            return Err(malformed("aux", line, "income_group", "inconsistent income group"));
        }
        if !entry.1.insert(a.definition) {
            return Err(malformed("aux", line, "definition", "duplicate definition record"));
        }
    }
    for (c, (_, defs)) in &seen {
        if !defs.contains(&Definition::Late) {
            return Err(malformed(
                "aux",
                0,
                "definition",
                format!("aux country `{c}` lacks a late-definition record"),
            ));
        }
    }
    Ok(())
}

/// Paths of the canonical input files.
#[derive(Debug, Clone)]
pub struct InputPaths {
    pub observations: PathBuf,
    pub aux: PathBuf,
    pub nmr: PathBuf,
    pub sbr: PathBuf,
    /// Optional `country,region` list including countries without data.
    pub countries: Option<PathBuf>,
}

impl InputPaths {
    /// Canonical file names inside `dir`. The country list is used when present.
    pub fn in_dir(dir: &Path) -> Self {
        let countries = dir.join(COUNTRIES_FILE);
        Self {
            observations: dir.join(OBSERVATIONS_FILE),
            aux: dir.join(AUX_FILE),
            nmr: dir.join(NMR_FILE),
            sbr: dir.join(SBR_FILE),
            countries: countries.exists().then_some(countries),
        }
    }

    pub fn all(&self) -> Vec<&Path> {
        let mut v = vec![
            self.observations.as_path(),
            self.aux.as_path(),
            self.nmr.as_path(),
            self.sbr.as_path(),
        ];
        if let Some(c) = &self.countries {
            v.push(c.as_path());
        }
        v
    }
}

struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, expected: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let csv_err = |source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        for col in expected {
            if !headers.iter().any(|h| h == col) {
                return Err(malformed(&name, 1, col, "missing column"));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            name,
            headers,
            rows,
        })
    }

    fn field<T: FromStr>(&self, line: u64, rec: &csv::StringRecord, col: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let idx = self.headers.iter().position(|h| h == col).expect("checked column");
        let raw = rec
            .get(idx)
            .ok_or_else(|| malformed(&self.name, line, col, "missing value"))?;
        raw.parse::<T>()
            .map_err(|e| malformed(&self.name, line, col, format!("`{raw}`: {e}")))
    }
}

const OBS_COLUMNS: [&str; 11] = [
    "id",
    "country",
    "place",
    "region",
    "year_start",
    "year_end",
    "y",
    "z",
    "source_type",
    "definition",
    "income_group",
];
const AUX_COLUMNS: [&str; 5] = ["aux_country", "definition", "y", "z", "income_group"];
const COV_COLUMNS: [&str; 4] = ["country", "year", "sample_index", "value"];

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let t = Table::read(path, &OBS_COLUMNS)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let o = Observation {
            id: t.field(*line, rec, "id")?,
            country: t.field(*line, rec, "country")?,
            place: t.field(*line, rec, "place")?,
            region: t.field(*line, rec, "region")?,
            year_start: t.field(*line, rec, "year_start")?,
            year_end: t.field(*line, rec, "year_end")?,
            y: t.field(*line, rec, "y")?,
            z: t.field(*line, rec, "z")?,
            source_type: t.field(*line, rec, "source_type")?,
            definition: t.field(*line, rec, "definition")?,
            income_group: t.field(*line, rec, "income_group")?,
        };
        if o.y + o.z == 0 {
            return Err(malformed(&t.name, *line, "y", "y + z must be at least 1"));
        }
        out.push(o);
    }
    Ok(out)
}

pub fn read_aux(path: &Path) -> Result<Vec<AuxObservation>> {
    let t = Table::read(path, &AUX_COLUMNS)?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            Ok(AuxObservation {
                aux_country: t.field(*line, rec, "aux_country")?,
                definition: t.field(*line, rec, "definition")?,
                y: t.field(*line, rec, "y")?,
                z: t.field(*line, rec, "z")?,
                income_group: t.field(*line, rec, "income_group")?,
            })
        })
        .collect()
}

type LongTable = BTreeMap<(String, i32), BTreeMap<u32, f64>>;

fn read_long(path: &Path) -> Result<LongTable> {
    let t = Table::read(path, &COV_COLUMNS)?;
    let mut out: LongTable = BTreeMap::new();
    for (line, rec) in &t.rows {
        let country: String = t.field(*line, rec, "country")?;
        let year: i32 = t.field(*line, rec, "year")?;
        let idx: u32 = t.field(*line, rec, "sample_index")?;
        let value: f64 = t.field(*line, rec, "value")?;
        if !(value.is_finite() && value > 0.0) {
            return Err(malformed(&t.name, *line, "value", "must be positive"));
        }
        if out.entry((country, year)).or_default().insert(idx, value).is_some() {
            return Err(malformed(&t.name, *line, "sample_index", "duplicate sample index"));
        }
    }
    Ok(out)
}

fn samples_from(
    name: &str,
    entry: &BTreeMap<u32, f64>,
    key: &(String, i32),
) -> Result<Vec<f64>> {
    let samples: Vec<f64> = entry.range(1..).map(|(_, v)| *v).collect();
    let contiguous = entry.range(1..).enumerate().all(|(k, (i, _))| *i as usize == k + 1);
    if !contiguous {
        return Err(malformed(
            name,
            0,
            "sample_index",
            format!("sample indices for {}/{} are not 1..=J", key.0, key.1),
        ));
    }
    Ok(samples)
}

/// Read NMR (sample 0 is the point estimate, 1..=J the samples) and SBR
/// (samples 1..=J) long-format tables.
pub fn read_covariates(nmr_path: &Path, sbr_path: &Path) -> Result<CovariateTables> {
    let mut cov = CovariateTables::default();
    for (key, entry) in read_long(nmr_path)? {
        if let Some(point) = entry.get(&0) {
            cov.nmr_point.insert(key.clone(), *point);
        }
        cov.nmr_samples.insert(key.clone(), samples_from("nmr", &entry, &key)?);
    }
    for (key, entry) in read_long(sbr_path)? {
        if entry.contains_key(&0) {
            return Err(malformed("sbr", 0, "sample_index", "sample index 0 is reserved in sbr"));
        }
        cov.sbr_samples.insert(key.clone(), samples_from("sbr", &entry, &key)?);
    }
    cov.validate().map_err(|reason| malformed("covariates", 0, "value", reason))?;
    Ok(cov)
}

pub fn read_countries(path: &Path) -> Result<BTreeMap<String, String>> {
    let t = Table::read(path, &["country", "region"])?;
    let mut map = BTreeMap::new();
    for (line, rec) in &t.rows {
        let c: String = t.field(*line, rec, "country")?;
        let r: String = t.field(*line, rec, "region")?;
        insert_unique(&mut map, &c, &r, "country")?;
    }
    Ok(map)
}

/// Load and validate every input file.
pub fn load_inputs(
    paths: &InputPaths,
    window: Window,
    undefined_policy: UndefinedPolicy,
) -> Result<ModelInputs> {
    let observations = read_observations(&paths.observations)?;
    let aux = read_aux(&paths.aux)?;
    let covariates = read_covariates(&paths.nmr, &paths.sbr)?;
    let countries = match &paths.countries {
        Some(p) => read_countries(p)?,
        None => BTreeMap::new(),
    };
    ModelInputs::new(
        observations,
        aux,
        Arc::new(covariates),
        &countries,
        window,
        undefined_policy,
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    let mut w = create(path)?;
    let err = io_at(path);
    writeln!(w, "{}", OBS_COLUMNS.join(",")).map_err(&err)?;
    for o in obs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            o.id,
            o.country,
            o.place,
            o.region,
            o.year_start,
            o.year_end,
            o.y,
            o.z,
            o.source_type,
            o.definition,
            o.income_group
        )
        .map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn write_aux(path: &Path, aux: &[AuxObservation]) -> Result<()> {
    let mut w = create(path)?;
    let err = io_at(path);
    writeln!(w, "{}", AUX_COLUMNS.join(",")).map_err(&err)?;
    for a in aux {
        writeln!(w, "{},{},{},{},{}", a.aux_country, a.definition, a.y, a.z, a.income_group)
            .map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn write_covariates(nmr_path: &Path, sbr_path: &Path, cov: &CovariateTables) -> Result<()> {
    let mut w = create(nmr_path)?;
    let err = io_at(nmr_path);
    writeln!(w, "{}", COV_COLUMNS.join(",")).map_err(&err)?;
    for ((c, y), samples) in &cov.nmr_samples {
        if let Some(p) = cov.nmr_point.get(&(c.clone(), *y)) {
            writeln!(w, "{c},{y},0,{p}").map_err(&err)?;
        }
        for (i, v) in samples.iter().enumerate() {
            writeln!(w, "{c},{y},{},{v}", i + 1).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)?;

    let mut w = create(sbr_path)?;
    let err = io_at(sbr_path);
    writeln!(w, "{}", COV_COLUMNS.join(",")).map_err(&err)?;
    for ((c, y), samples) in &cov.sbr_samples {
        for (i, v) in samples.iter().enumerate() {
            writeln!(w, "{c},{y},{},{v}", i + 1).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

pub fn write_countries(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    let mut w = create(path)?;
    let err = io_at(path);
    writeln!(w, "country,region").map_err(&err)?;
    for (c, r) in map {
        writeln!(w, "{c},{r}").map_err(&err)?;
    }
    w.flush().map_err(&err)
}

/// Write `inputs` to the canonical files inside `dir`.
pub fn write_inputs(dir: &Path, inputs: &ModelInputs) -> Result<InputPaths> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let paths = InputPaths {
        observations: dir.join(OBSERVATIONS_FILE),
        aux: dir.join(AUX_FILE),
        nmr: dir.join(NMR_FILE),
        sbr: dir.join(SBR_FILE),
        countries: Some(dir.join(COUNTRIES_FILE)),
    };
    write_observations(&paths.observations, &inputs.observations)?;
    write_aux(&paths.aux, &inputs.aux)?;
    write_covariates(&paths.nmr, &paths.sbr, &inputs.covariates)?;
    write_countries(paths.countries.as_ref().unwrap(), &inputs.hierarchy.region_map())?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn obs(id: u64, country: &str, place: &str, year: i32) -> Observation {
        Observation {
            id,
            country: country.into(),
            place: place.into(),
            region: "R1".into(),
            year_start: year as f64,
            year_end: year as f64 + 1.0,
            y: 5,
            z: 15,
            source_type: SourceType::Crvs,
            definition: Definition::Late,
            income_group: IncomeGroup::Hic,
        }
    }

    #[test]
    fn single_place_flag() {
        let h = build_hierarchy(&[obs(1, "A", "A1", 2001), obs(2, "A", "A1", 2002), obs(3, "A", "A1", 2003)])
            .unwrap();
        assert!(h.countries[0].single_place);

        let h = build_hierarchy(&[
            obs(1, "A", "A1", 2001),
            obs(2, "A", "A1", 2002),
            obs(3, "A", "A2", 2003),
            obs(4, "A", "A2", 2004),
        ])
        .unwrap();
        assert!(!h.countries[0].single_place);
    }

    #[test]
    fn place_in_two_countries_conflicts() {
        let err = build_hierarchy(&[obs(1, "C1", "A", 2001), obs(2, "C2", "A", 2002)]).unwrap_err();
        assert!(matches!(err, DataError::HierarchyConflict(_)));
    }

    #[test]
    fn country_in_two_regions_conflicts() {
        let mut b = obs(2, "C1", "B", 2002);
        b.region = "R2".into();
        let err = build_hierarchy(&[obs(1, "C1", "A", 2001), b]).unwrap_err();
        assert!(matches!(err, DataError::HierarchyConflict(_)));
    }

    #[test]
    fn dense_indices() {
        let mut list = vec![];
        for (i, (c, p, r)) in [("C2", "P9", "R2"), ("C1", "P1", "R1"), ("C1", "P3", "R1"), ("C3", "P0", "R2")]
            .iter()
            .enumerate()
        {
            let mut o = obs(i as u64, c, p, 2005);
            o.region = r.to_string();
            list.push(o);
        }
        let h = build_hierarchy(&list).unwrap();
        assert_eq!(h.regions, vec!["R1", "R2"]);
        assert_eq!(h.countries.len(), 3);
        assert_eq!(h.places.len(), 4);
        for (i, p) in h.places.iter().enumerate() {
            assert_eq!(h.place(&p.id), Some(i));
            assert!(p.country < h.countries.len());
        }
    }

    #[test]
    fn grid_year_and_overlap() {
        let mut o = obs(1, "A", "A1", 2016);
        o.year_end = 2016.0 + 1.0 / 3.0;
        assert_eq!(o.grid_year(), 2016);
        // 2016 + 1/3 is not exactly representable
        assert!((o.year_overlap(2016) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(o.year_overlap(2017), 0.0);

        o.year_end = 2018.0;
        assert_eq!(o.grid_year(), 2017);
        assert_eq!(o.calendar_years(), 2016..=2017);
    }
}
