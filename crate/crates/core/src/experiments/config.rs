//! Flat `key = value` experiment configuration.

use std::fs;
use std::path::Path;

use crate::estimators::Proposal;
use crate::training::{format_bits, parse_bits, TrainConfig};
use crate::{Error, Result};

/// Training defaults plus evaluation and sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub n_test_tasks: usize,
    pub n_test_symbols: usize,
    /// Pre-training set sizes for the threshold sweep.
    pub m_grid: Vec<usize>,
    /// Test SNRs in dB for the SNR sweep.
    pub snr_grid_db: Vec<f64>,
    /// Receiver resolutions for the quantization sweep; `None` is unquantized.
    pub bits_grid: Vec<Option<u32>>,
    /// SNR in dB used by the quantization sweep.
    pub bits_sweep_snr_db: f64,
    /// Pre-training set size of the SNR and quantization sweeps.
    pub sweep_m_tasks: usize,
    pub mc_samples: usize,
    pub mc_proposal: Proposal,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n_test_tasks: 500,
            n_test_symbols: 64,
            m_grid: vec![1, 4, 16, 64, 256, 1024],
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            bits_grid: vec![Some(1), Some(2), Some(3), Some(4), Some(6), Some(8), None],
            bits_sweep_snr_db: 10.0,
            sweep_m_tasks: 4096,
            mc_samples: 1 << 14,
            mc_proposal: Proposal::ContextGaussian,
        }
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let out = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_test_tasks" => self.n_test_tasks = parse_num(key, value)?,
            "n_test_symbols" | "n_test_symbols_per_task" => self.n_test_symbols = parse_num(key, value)?,
            "m_grid" => self.m_grid = parse_list(key, value, |s| parse_num(key, s))?,
            "snr_grid_db" => self.snr_grid_db = parse_list(key, value, |s| parse_num(key, s))?,
            "bits_grid" => self.bits_grid = parse_list(key, value, parse_bits)?,
            "bits_sweep_snr_db" => self.bits_sweep_snr_db = parse_num(key, value)?,
            "sweep_m_tasks" => self.sweep_m_tasks = parse_num(key, value)?,
            "mc_samples" => self.mc_samples = parse_num(key, value)?,
            "mc_proposal" => self.mc_proposal = value.parse()?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn finalize(&mut self) -> Result<()> {
        self.train.finalize()?;
        if self.n_test_tasks == 0 || self.n_test_symbols == 0 || self.mc_samples == 0 {
            return Err(Error::Config("evaluation counts must be at least 1".into()));
        }
        if self.m_grid.contains(&0) || self.sweep_m_tasks == 0 {
            return Err(Error::Config("task-set sizes must be at least 1".into()));
        }
        Ok(())
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let extra = [
            ("n_test_tasks", self.n_test_tasks.to_string()),
            ("n_test_symbols", self.n_test_symbols.to_string()),
            ("m_grid", join(&self.m_grid, |m| m.to_string())),
            ("snr_grid_db", join(&self.snr_grid_db, |s| s.to_string())),
            ("bits_grid", join(&self.bits_grid, |b| format_bits(*b))),
            ("bits_sweep_snr_db", self.bits_sweep_snr_db.to_string()),
            ("sweep_m_tasks", self.sweep_m_tasks.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("mc_proposal", self.mc_proposal.to_string()),
        ];
        for (k, v) in extra {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
