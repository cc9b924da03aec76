//! Draw files: one JSON header line, then one CSV row per draw
//! (`chain,draw,<parameters...>`).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PosteriorDraws, SamplerConfig};
use crate::posterior::ParameterLayout;

pub const DRAW_FORMAT: &str = "ipsb-draws";
pub const DRAW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DrawFileError {
    #[error("i/o error on draw file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad draw file header: {0}")]
    Header(String),
    #[error("draw file line {line}: {reason}")]
    Row { line: usize, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawHeader {
    pub format: String,
    pub version: u32,
    pub names: Vec<String>,
    pub chains: usize,
    pub samples: usize,
    pub config: SamplerConfig,
    pub layout: Option<ParameterLayout>,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    /// Caller-supplied context such as model options and input digests.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_draws(path: &Path, draws: &PosteriorDraws, meta: serde_json::Value) -> Result<(), DrawFileError> {
    let header = DrawHeader {
        format: DRAW_FORMAT.to_string(),
        version: DRAW_FORMAT_VERSION,
        names: draws.names.clone(),
        chains: draws.chains,
        samples: draws.samples,
        config: draws.config.clone(),
        layout: draws.layout.clone(),
        divergences: draws.divergences.clone(),
        step_sizes: draws.step_sizes.clone(),
        meta,
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| DrawFileError::Header(e.to_string()))?;
    writeln!(w)?;
    let mut line = String::new();
    for c in 0..draws.chains {
        for s in 0..draws.samples {
            line.clear();
            line.push_str(&format!("{c},{s}"));
            for v in draws.draw(c, s) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<DrawHeader, DrawFileError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    r.read_line(&mut first)?;
    parse_header(&first)
}

fn parse_header(line: &str) -> Result<DrawHeader, DrawFileError> {
    let h: DrawHeader = serde_json::from_str(line.trim_end()).map_err(|e| DrawFileError::Header(e.to_string()))?;
    if h.format != DRAW_FORMAT || h.version != DRAW_FORMAT_VERSION {
        return Err(DrawFileError::Header(format!("unsupported format {} v{}", h.format, h.version)));
    }
    Ok(h)
}

pub fn read_draws(path: &Path) -> Result<(PosteriorDraws, serde_json::Value), DrawFileError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| DrawFileError::Header("empty file".into()))??;
    let h = parse_header(&first)?;
    let dim = h.names.len();
    let mut values = Vec::with_capacity(h.chains * h.samples * dim);
    let mut count = 0;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row_err = |reason: String| DrawFileError::Row { line: lineno, reason };
        let mut fields = line.split(',');
        let chain: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| row_err("bad chain index".into()))?;
        let draw: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| row_err("bad draw index".into()))?;
        if chain != count / h.samples.max(1) || draw != count % h.samples.max(1) {
            return Err(row_err(format!("expected chain {} draw {}", count / h.samples, count % h.samples)));
        }
        let before = values.len();
        for f in fields {
            values.push(f.parse::<f64>().map_err(|e| row_err(format!("{f:?}: {e}")))?);
        }
        if values.len() - before != dim {
            return Err(row_err(format!("expected {dim} values, found {}", values.len() - before)));
        }
        count += 1;
    }
    if count != h.chains * h.samples {
        return Err(DrawFileError::Header(format!(
            "header promises {} draws, file has {count}",
            h.chains * h.samples
        )));
    }
    let draws = PosteriorDraws::from_values(
        h.names,
        h.layout,
        h.config,
        h.chains,
        h.samples,
        values,
        h.divergences,
        h.step_sizes,
    );
    Ok((draws, h.meta))
}
