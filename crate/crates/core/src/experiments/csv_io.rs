//! CSV rows and gnuplot-style plot blocks.

use super::EvalResult;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "sweep,estimator,value,mse,ci_low,ci_high,n_samples,ess,seed";

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Csv(e.to_string())
}

/// Serializes rows under [`CSV_HEADER`]. Reals use the shortest text that
/// parses back to the same value; a missing ESS is an empty field.
pub fn write_csv(rows: &[EvalResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep.clone(),
            r.estimator.clone(),
            r.value.to_string(),
            r.mse.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.n_samples.to_string(),
            r.ess.map_or_else(String::new, |e| e.to_string()),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let s = rec.get(i).ok_or_else(|| Error::Csv(format!("line {line}: missing column {i}")))?;
    s.parse()
        .map_err(|_| Error::Csv(format!("line {line}: cannot parse `{s}` in column {i}")))
}

pub fn parse_csv(text: &str) -> Result<Vec<EvalResult>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Csv(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 9 {
            return Err(Error::Csv(format!("line {line}: expected 9 columns, found {}", rec.len())));
        }
        let ess = match rec.get(7) {
            Some("") | None => None,
            Some(_) => Some(field(&rec, 7, line)?),
        };
        rows.push(EvalResult {
            sweep: rec[0].to_string(),
            estimator: rec[1].to_string(),
            value: field(&rec, 2, line)?,
            mse: field(&rec, 3, line)?,
            ci_low: field(&rec, 4, line)?,
            ci_high: field(&rec, 5, line)?,
            n_samples: field(&rec, 6, line)?,
            ess,
            seed: field(&rec, 8, line)?,
        });
    }
    Ok(rows)
}

/// One plot series: points `(value, mse, ci_low, ci_high)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotBlock {
    pub sweep: String,
    pub estimator: String,
    pub points: Vec<[f64; 4]>,
}

/// One block per (sweep, estimator) in order of first appearance, separated
/// by two blank lines so gnuplot addresses them with `index`.
pub fn emit_plot_data(rows: &[EvalResult]) -> String {
    let mut blocks: Vec<PlotBlock> = Vec::new();
    for r in rows {
        let p = [r.value, r.mse, r.ci_low, r.ci_high];
        match blocks.iter_mut().find(|b| b.sweep == r.sweep && b.estimator == r.estimator) {
            Some(b) => b.points.push(p),
            None => blocks.push(PlotBlock {
                sweep: r.sweep.clone(),
                estimator: r.estimator.clone(),
                points: vec![p],
            }),
        }
    }
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("# sweep={} estimator={}\n", b.sweep, b.estimator));
        out.push_str("# value mse ci_low ci_high\n");
        for p in &b.points {
            out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], p[3]));
        }
    }
    out
}

pub fn parse_plot_data(text: &str) -> Result<Vec<PlotBlock>> {
    let mut blocks: Vec<PlotBlock> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("# value") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let mut sweep = None;
            let mut estimator = None;
            for kv in rest.split_whitespace() {
                match kv.split_once('=') {
                    Some(("sweep", v)) => sweep = Some(v.to_string()),
                    Some(("estimator", v)) => estimator = Some(v.to_string()),
                    _ => {}
                }
            }
            match (sweep, estimator) {
                (Some(sweep), Some(estimator)) => blocks.push(PlotBlock {
                    sweep,
                    estimator,
                    points: Vec::new(),
                }),
                _ => return Err(Error::Csv(format!("malformed block header `{line}`"))),
            }
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Csv(format!("bad number `{s}`"))))
            .collect::<Result<_>>()?;
        let block = blocks
            .last_mut()
            .ok_or_else(|| Error::Csv("data before the first block header".into()))?;
        let p: [f64; 4] = vals
            .try_into()
            .map_err(|_| Error::Csv(format!("expected 4 columns in `{line}`")))?;
        block.points.push(p);
    }
    Ok(blocks)
}
