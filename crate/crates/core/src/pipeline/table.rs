//! Per-triangle parameter table and its text form: a header line, then one
//! tab-separated row per triangle
//! `triangle_id kd_r kd_g kd_b ks_r ks_g ks_b roughness estimator residual samples`.
//! Triangles below the sample floor carry `-` in the parameter columns and
//! the estimator tag `insufficient`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use super::PipelineError;
use crate::brdf::ReflectanceParams;

pub const TABLE_HEADER: &str =
    "triangle_id\tkd_r\tkd_g\tkd_b\tks_r\tks_g\tks_b\troughness\testimator\tresidual\tsamples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorTag {
    Fit,
    Nn,
    Insufficient,
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorTag::Fit => "fit",
            EstimatorTag::Nn => "nn",
            EstimatorTag::Insufficient => "insufficient",
        })
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fit" => Ok(EstimatorTag::Fit),
            "nn" => Ok(EstimatorTag::Nn),
            "insufficient" => Ok(EstimatorTag::Insufficient),
            _ => Err(format!("unknown estimator {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub triangle: u32,
    /// `None` exactly when the tag is `Insufficient`.
    pub params: Option<ReflectanceParams>,
    pub estimator: EstimatorTag,
    /// Fit: root-mean-square texel error. Regressor: the same error of the
    /// prediction under the known light, or NaN without one.
    pub residual: f64,
    /// Radiance samples aggregated into the triangle's map.
    pub samples: u64,
}

impl ParamRow {
    pub fn to_line(&self) -> String {
        let params = match &self.params {
            Some(p) => p.to_array().iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t"),
            None => vec!["-"; 7].join("\t"),
        };
        format!("{}\t{params}\t{}\t{}\t{}", self.triangle, self.estimator, self.residual, self.samples)
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self, PipelineError> {
        let bad = |message: String| PipelineError::TableParse { line: lineno, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", f.len())));
        }
        let triangle = f[0].parse().map_err(|_| bad(format!("bad triangle id {:?}", f[0])))?;
        let estimator: EstimatorTag = f[8].parse().map_err(bad)?;
        let params = if estimator == EstimatorTag::Insufficient {
            if f[1..8].iter().any(|v| *v != "-") {
                return Err(bad("insufficient row carries parameters".into()));
            }
            None
        } else {
            let v: Vec<f64> =
                f[1..8].iter().map(|s| s.parse().map_err(|_| bad(format!("bad number {s:?}")))).collect::<Result<_, _>>()?;
            Some(ReflectanceParams::from_slice(&v).map_err(|e| bad(e.to_string()))?)
        };
        let residual = f[9].parse().map_err(|_| bad(format!("bad residual {:?}", f[9])))?;
        let samples = f[10].parse().map_err(|_| bad(format!("bad sample count {:?}", f[10])))?;
        Ok(Self { triangle, params, estimator, residual, samples })
    }
}

/// Rows ordered by triangle id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
}

impl ParamTable {
    pub fn get(&self, triangle: u32) -> Option<&ParamRow> {
        self.rows.binary_search_by_key(&triangle, |r| r.triangle).ok().map(|i| &self.rows[i])
    }

    pub fn estimated(&self) -> impl Iterator<Item = (&ParamRow, &ReflectanceParams)> {
        self.rows.iter().filter_map(|r| r.params.as_ref().map(|p| (r, p)))
    }

    /// Per-face materials for `faces` triangles, `fallback` where the table
    /// has no estimate.
    pub fn materials(&self, faces: usize, fallback: ReflectanceParams) -> Vec<ReflectanceParams> {
        let mut out = vec![fallback; faces];
        for (row, p) in self.estimated() {
            if let Some(slot) = out.get_mut(row.triangle as usize) {
                *slot = *p;
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TABLE_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, PipelineError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != TABLE_HEADER {
                    return Err(PipelineError::TableParse { line: 1, message: "missing header".into() });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            rows.push(ParamRow::parse(&line, i + 1)?);
        }
        if !rows.windows(2).all(|w| w[0].triangle < w[1].triangle) {
            return Err(PipelineError::TableParse { line: 0, message: "triangle ids must increase".into() });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
