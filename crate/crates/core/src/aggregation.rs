//! Regional proportions as stillbirth-weighted means of country draws.
//!
//! Per draw `d` and year `t`, with `j = d mod J`:
//! `φ_r = Σ_c φ_c S̃_c^(j) / Σ_c S̃_c^(j)`. The numerator and denominator are
//! kept so regions can be pooled further without going back to countries.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::CovariateTables;
use crate::estimation::{CountryEstimate, Series};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("region `{0}` has no countries")]
    EmptyRegion(String),
    #[error("draw mismatch: {0}")]
    DrawMismatch(String),
    #[error("country `{0}` is not in the region map")]
    UnmappedCountry(String),
    #[error("no SBR sample for {country} in {year}")]
    MissingSbr { country: String, year: i32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEstimate {
    pub region: String,
    pub series: Series,
    /// `Σ_c φ_c S̃_c` per year and draw.
    pub numerator: Vec<Vec<f64>>,
    /// `Σ_c S̃_c` per year and draw.
    pub denominator: Vec<Vec<f64>>,
    pub countries: Vec<String>,
}

fn sbr_sample_count(sbr: &CovariateTables) -> usize {
    sbr.sbr_samples.values().next().map_or(0, Vec::len)
}

/// Aggregate the given countries into one region. Every country must share
/// the same years and draw count.
pub fn aggregate_countries(
    region: &str,
    countries: &[&CountryEstimate],
    sbr: &CovariateTables,
) -> Result<RegionEstimate, AggregationError> {
    let first = countries
        .first()
        .ok_or_else(|| AggregationError::EmptyRegion(region.to_string()))?;
    let years = first.series.years.clone();
    let draws = first.series.draws();
    let j_count = sbr_sample_count(sbr);
    if j_count == 0 {
        return Err(AggregationError::DrawMismatch("SBR tables hold no samples".into()));
    }
    for c in countries {
        if c.series.years != years || c.series.draws() != draws {
            return Err(AggregationError::DrawMismatch(format!(
                "country `{}` has {} draws over {} years, `{}` has {} over {}",
                c.country,
                c.series.draws(),
                c.series.years.len(),
                first.country,
                draws,
                years.len()
            )));
        }
    }
    let mut numerator = vec![vec![0.0; draws]; years.len()];
    let mut denominator = vec![vec![0.0; draws]; years.len()];
    for c in countries {
        for (k, &year) in years.iter().enumerate() {
            let s = sbr
                .sbr_samples(&c.country, year)
                .ok_or_else(|| AggregationError::MissingSbr {
                    country: c.country.clone(),
                    year,
                })?;
            for d in 0..draws {
                let weight = s[d % j_count];
                numerator[k][d] += c.series.samples[k][d] * weight;
                denominator[k][d] += weight;
            }
        }
    }
    Ok(finish(
        region,
        years,
        numerator,
        denominator,
        countries.iter().map(|c| c.country.clone()).collect(),
    ))
}

fn finish(
    region: &str,
    years: Vec<i32>,
    numerator: Vec<Vec<f64>>,
    denominator: Vec<Vec<f64>>,
    countries: Vec<String>,
) -> RegionEstimate {
    let samples = numerator
        .iter()
        .zip(&denominator)
        .map(|(n, d)| n.iter().zip(d).map(|(n, d)| n / d).collect())
        .collect();
    RegionEstimate {
        region: region.to_string(),
        series: Series { years, samples },
        numerator,
        denominator,
        countries,
    }
}

/// Aggregate the countries mapped to `region`.
pub fn aggregate_region(
    region: &str,
    countries: &[CountryEstimate],
    sbr: &CovariateTables,
    region_map: &BTreeMap<String, String>,
) -> Result<RegionEstimate, AggregationError> {
    let members: Vec<&CountryEstimate> = countries
        .iter()
        .filter(|c| region_map.get(&c.country).map(String::as_str) == Some(region))
        .collect();
    aggregate_countries(region, &members, sbr)
}

/// One estimate per region in the map (sorted by name), skipping regions
/// with no country estimates.
pub fn aggregate_all(
    countries: &[CountryEstimate],
    sbr: &CovariateTables,
    region_map: &BTreeMap<String, String>,
) -> Result<Vec<RegionEstimate>, AggregationError> {
    for c in countries {
        if !region_map.contains_key(&c.country) {
            return Err(AggregationError::UnmappedCountry(c.country.clone()));
        }
    }
    let mut regions: Vec<&String> = region_map.values().collect();
    regions.sort();
    regions.dedup();
    regions
        .into_iter()
        .filter(|r| countries.iter().any(|c| region_map[&c.country] == **r))
        .map(|r| aggregate_region(r, countries, sbr, region_map))
        .collect()
}

/// Pool several regions into one by summing their numerators and
/// denominators.
pub fn combine_regions(name: &str, regions: &[RegionEstimate]) -> Result<RegionEstimate, AggregationError> {
    let first = regions
        .first()
        .ok_or_else(|| AggregationError::EmptyRegion(name.to_string()))?;
    let years = first.series.years.clone();
    let draws = first.series.draws();
    let mut numerator = vec![vec![0.0; draws]; years.len()];
    let mut denominator = vec![vec![0.0; draws]; years.len()];
    let mut countries = Vec::new();
    for r in regions {
        if r.series.years != years || r.series.draws() != draws {
            return Err(AggregationError::DrawMismatch(format!(
                "region `{}` does not match `{}`",
                r.region, first.region
            )));
        }
        for k in 0..years.len() {
            for d in 0..draws {
                numerator[k][d] += r.numerator[k][d];
                denominator[k][d] += r.denominator[k][d];
            }
        }
        countries.extend(r.countries.iter().cloned());
    }
    Ok(finish(name, years, numerator, denominator, countries))
}

/// `region,year,quantile,value`.
pub fn write_region_estimates(path: &Path, regions: &[RegionEstimate], qs: &[f64]) -> Result<(), AggregationError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "region,year,quantile,value")?;
    for r in regions {
        for (year, row) in r.series.years.iter().zip(r.series.summarize(qs)) {
            for (q, v) in qs.iter().zip(row) {
                writeln!(w, "{},{year},{q},{v}", r.region)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
