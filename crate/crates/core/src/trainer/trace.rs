use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "step,wall_seconds,elbo_mc,elbo_full,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub wall_seconds: f64,
    pub elbo_mc: f64,
    /// Only present on evaluation steps.
    pub elbo_full: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

impl Trace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt(r.wall_seconds),
                fmt(r.elbo_mc),
                r.elbo_full.map(fmt).unwrap_or_default(),
                fmt(r.grad_norm)
            ));
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader.headers().map_err(|e| parse_err(0, e))?.clone();
        let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: format!("trace header must be `{TRACE_HEADER}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e))?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).ok_or_else(|| Error::Parse {
                    line,
                    column: k + 1,
                    message: "missing field".into(),
                })
            };
            let num = |k: usize| -> Result<f64> {
                field(k)?.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    column: k + 1,
                    message: format!("`{}`: {e}", rec.get(k).unwrap_or("")),
                })
            };
            let step = field(0)?.parse::<usize>().map_err(|e| Error::Parse {
                line,
                column: 1,
                message: format!("step: {e}"),
            })?;
            let elbo_full = if field(3)?.is_empty() {
                None
            } else {
                Some(num(3)?)
            };
            rows.push(TraceRow {
                step,
                wall_seconds: num(1)?,
                elbo_mc: num(2)?,
                elbo_full,
                grad_norm: num(4)?,
            });
        }
        Ok(Trace { rows })
    }

    pub fn elbo_mc(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo_mc).collect()
    }

    /// `(step, elbo_full)` pairs of the evaluation steps.
    pub fn evaluations(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.elbo_full.map(|e| (r.step, e)))
            .collect()
    }
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(line);
    Error::Parse {
        line,
        column: 1,
        message: e.to_string(),
    }
}

/// The per-run JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_elbo: f64,
    pub final_elbo_se: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub parameter_count: usize,
    pub scheme: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_log_evidence: Option<f64>,
}
