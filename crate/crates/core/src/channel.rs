//! Quantized MIMO forward model, pilot contexts and the exact observation
//! likelihood.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::stats::log_cell_prob_unchecked;
use crate::numerics::{CMatrix, Complex, RngStream};

/// Per-antenna 4-QAM alphabet and the enumerated joint input set.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    n_t: usize,
    per_antenna: Vec<Complex>,
    joint: Vec<Vec<Complex>>,
}

impl Constellation {
    /// 4-QAM on every antenna with symbols `(±1 ± i) / sqrt(2 n_t)`, so that
    /// `E‖x‖² = 1`. Symbol order is (+,+), (+,-), (-,+), (-,-) in the signs
    /// of (re, im); joint inputs are enumerated lexicographically with the
    /// first antenna most significant.
    pub fn qam4(n_t: usize) -> Self {
        assert!(n_t >= 1, "need at least one transmit antenna");
        let a = 1.0 / (2.0 * n_t as f64).sqrt();
        let per_antenna = vec![
            Complex::new(a, a),
            Complex::new(a, -a),
            Complex::new(-a, a),
            Complex::new(-a, -a),
        ];
        let q = per_antenna.len();
        let count = q.pow(n_t as u32);
        let joint = (0..count)
            .map(|mut idx| {
                let mut x = vec![Complex::new(0.0, 0.0); n_t];
                for slot in x.iter_mut().rev() {
                    *slot = per_antenna[idx % q];
                    idx /= q;
                }
                x
            })
            .collect();
        Self {
            n_t,
            per_antenna,
            joint,
        }
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn per_antenna_symbols(&self) -> &[Complex] {
        &self.per_antenna
    }

    pub fn joint_inputs(&self) -> &[Vec<Complex>] {
        &self.joint
    }

    pub fn len(&self) -> usize {
        self.joint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint.is_empty()
    }

    pub fn input(&self, index: usize) -> &[Complex] {
        &self.joint[index]
    }

    /// Largest absolute real or imaginary coordinate over the alphabet.
    pub fn max_coordinate(&self) -> f64 {
        self.per_antenna
            .iter()
            .map(|s| s.re.abs().max(s.im.abs()))
            .fold(0.0, f64::max)
    }

    /// Index of `x` in the joint input list.
    pub fn index_of(&self, x: &[Complex]) -> Option<usize> {
        self.joint
            .iter()
            .position(|c| c.iter().zip(x).all(|(a, b)| (a - b).norm() < 1e-12))
    }

    /// Probability-weighted sum of joint inputs.
    pub fn weighted_mean(&self, probs: &[f64]) -> Vec<Complex> {
        let mut out = vec![Complex::new(0.0, 0.0); self.n_t];
        for (p, x) in probs.iter().zip(&self.joint) {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += xi * *p;
            }
        }
        out
    }
}

/// One equalization task: channel matrix and per-antenna noise power.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub h: CMatrix,
    pub sigma2: f64,
}

impl Task {
    pub fn new(h: CMatrix, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma2 = {sigma2}")));
        }
        if !h.is_finite() {
            return Err(Error::InvalidArgument("non-finite channel".into()));
        }
        Ok(Self { h, sigma2 })
    }

    pub fn n_r(&self) -> usize {
        self.h.rows()
    }

    pub fn n_t(&self) -> usize {
        self.h.cols()
    }
}

/// Linear SNR of a task; the transmit power is normalized to one.
pub fn snr_of(task: &Task) -> f64 {
    1.0 / task.sigma2
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(v: f64) -> f64 {
    10.0 * v.log10()
}

/// Distribution over tasks: i.i.d. CN(0,1) channel entries and a noise
/// power whose dB value is uniform on `[sigma2_db_min, sigma2_db_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDistributionSpec {
    pub n_t: usize,
    pub n_r: usize,
    pub sigma2_db_min: f64,
    pub sigma2_db_max: f64,
}

impl TaskDistributionSpec {
    pub fn new(n_t: usize, n_r: usize, sigma2_db_min: f64, sigma2_db_max: f64) -> Result<Self> {
        let spec = Self {
            n_t,
            n_r,
            sigma2_db_min,
            sigma2_db_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fixed noise power `sigma2` (linear).
    pub fn fixed(n_t: usize, n_r: usize, sigma2: f64) -> Self {
        let db = linear_to_db(sigma2);
        Self {
            n_t,
            n_r,
            sigma2_db_min: db,
            sigma2_db_max: db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::InvalidArgument("antenna counts must be positive".into()));
        }
        if !(self.sigma2_db_min <= self.sigma2_db_max) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 range [{}, {}] dB is empty",
                self.sigma2_db_min, self.sigma2_db_max
            )));
        }
        Ok(())
    }
}

pub fn sample_channel(n_r: usize, n_t: usize, rng: &mut RngStream) -> CMatrix {
    let data = (0..n_r * n_t).map(|_| rng.standard_complex_normal()).collect();
    CMatrix::from_vec(n_r, n_t, data).expect("sized by construction")
}

pub fn sample_task(spec: &TaskDistributionSpec, rng: &mut RngStream) -> Task {
    let h = sample_channel(spec.n_r, spec.n_t, rng);
    let sigma2 = if spec.sigma2_db_min == spec.sigma2_db_max {
        db_to_linear(spec.sigma2_db_min)
    } else {
        db_to_linear(rng.uniform_range(spec.sigma2_db_min, spec.sigma2_db_max))
    };
    Task { h, sigma2 }
}

/// Mid-rise uniform quantizer applied per real dimension, saturating at the
/// range ends. `bits = None` disables quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    bits: Option<u32>,
    range_lo: f64,
    range_hi: f64,
}

pub const DEFAULT_RANGE: (f64, f64) = (-4.0, 4.0);

impl Quantizer {
    pub fn with_bits(bits: u32) -> Self {
        assert!((1..=30).contains(&bits), "bits must be in 1..=30");
        Self {
            bits: Some(bits),
            range_lo: DEFAULT_RANGE.0,
            range_hi: DEFAULT_RANGE.1,
        }
    }

    pub fn unquantized() -> Self {
        Self {
            bits: None,
            range_lo: DEFAULT_RANGE.0,
            range_hi: DEFAULT_RANGE.1,
        }
    }

    /// `None` maps to the unquantized receiver.
    pub fn from_bits(bits: Option<u32>) -> Self {
        bits.map_or_else(Self::unquantized, Self::with_bits)
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("quantizer range [{lo}, {hi}]")));
        }
        self.range_lo = lo;
        self.range_hi = hi;
        Ok(self)
    }

    pub fn bits(&self) -> Option<u32> {
        self.bits
    }

    pub fn is_quantized(&self) -> bool {
        self.bits.is_some()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_lo, self.range_hi)
    }

    pub fn levels(&self) -> Option<usize> {
        self.bits.map(|b| 1usize << b)
    }

    /// Cell width Δ.
    pub fn step(&self) -> Option<f64> {
        self.levels()
            .map(|n| (self.range_hi - self.range_lo) / n as f64)
    }

    pub fn level_value(&self, k: usize) -> f64 {
        let d = self.step().expect("quantized");
        self.range_lo + d * (k as f64 + 0.5)
    }

    /// `(level_index, level_value)`; `(-1, v)` when unquantized.
    pub fn quantize(&self, v: f64) -> (i64, f64) {
        match (self.levels(), self.step()) {
            (Some(n), Some(d)) => {
                let raw = ((v - self.range_lo) / d).floor();
                let k = raw.clamp(0.0, (n - 1) as f64) as usize;
                (k as i64, self.level_value(k))
            }
            _ => (-1, v),
        }
    }

    /// Integration cell of a level; the extreme cells extend to ±∞.
    pub fn cell_bounds(&self, k: usize) -> Result<(f64, f64)> {
        let (n, d) = match (self.levels(), self.step()) {
            (Some(n), Some(d)) => (n, d),
            _ => {
                return Err(Error::InvalidArgument(
                    "unquantized receiver has no cells".into(),
                ))
            }
        };
        if k >= n {
            return Err(Error::InvalidArgument(format!(
                "level {k} out of range for {n} levels"
            )));
        }
        let lo = if k == 0 {
            f64::NEG_INFINITY
        } else {
            self.range_lo + d * k as f64
        };
        let hi = if k == n - 1 {
            f64::INFINITY
        } else {
            self.range_lo + d * (k + 1) as f64
        };
        Ok((lo, hi))
    }

    /// Level index of an observed value that must sit on the output grid.
    pub fn level_of(&self, v: f64) -> Result<usize> {
        let (n, d) = (self.levels().expect("quantized"), self.step().expect("quantized"));
        let k = ((v - self.range_lo) / d - 0.5).round();
        if !(k >= 0.0 && k < n as f64) {
            return Err(Error::OffGrid { value: v });
        }
        let k = k as usize;
        if (self.level_value(k) - v).abs() > 1e-9 * d {
            return Err(Error::OffGrid { value: v });
        }
        Ok(k)
    }
}

/// `y = Q_b(H x + z)` with `z ~ CN(0, sigma2 I)`.
pub fn apply_channel(task: &Task, q: &Quantizer, x: &[Complex], rng: &mut RngStream) -> Vec<Complex> {
    let std = (task.sigma2 / 2.0).sqrt();
    task.h
        .mul_vec(x)
        .into_iter()
        .map(|m| {
            let re = m.re + std * rng.standard_normal();
            let im = m.im + std * rng.standard_normal();
            Complex::new(q.quantize(re).1, q.quantize(im).1)
        })
        .collect()
}

/// A received vector prepared for repeated likelihood evaluation: the
/// integration cell of each real dimension, or the raw value when the
/// receiver is unquantized.
#[derive(Debug, Clone)]
pub struct PreparedObservation {
    dims: Vec<ObsDim>,
}

#[derive(Debug, Clone, Copy)]
enum ObsDim {
    Cell(f64, f64),
    Value(f64),
}

impl PreparedObservation {
    pub fn new(q: &Quantizer, y: &[Complex]) -> Result<Self> {
        let mut dims = Vec::with_capacity(2 * y.len());
        for v in y.iter().flat_map(|z| [z.re, z.im]) {
            if q.is_quantized() {
                let (lo, hi) = q.cell_bounds(q.level_of(v)?)?;
                dims.push(ObsDim::Cell(lo, hi));
            } else {
                dims.push(ObsDim::Value(v));
            }
        }
        Ok(Self { dims })
    }

    pub fn n_r(&self) -> usize {
        self.dims.len() / 2
    }

    /// `ln P(y | noiseless receive signal = mean)`, a density when
    /// unquantized.
    pub fn log_likelihood(&self, mean: &[Complex], sigma2: f64) -> f64 {
        let std = (sigma2 / 2.0).sqrt();
        let log_norm = -0.5 * (PI * sigma2).ln();
        let mut total = 0.0;
        for (i, d) in self.dims.iter().enumerate() {
            let m = if i % 2 == 0 { mean[i / 2].re } else { mean[i / 2].im };
            total += match *d {
                ObsDim::Cell(lo, hi) => log_cell_prob_unchecked(lo, hi, m, std),
                ObsDim::Value(v) => log_norm - (v - m) * (v - m) / sigma2,
            };
        }
        total
    }
}

/// `ln P(y | x, task)`.
pub fn log_likelihood(task: &Task, q: &Quantizer, x: &[Complex], y: &[Complex]) -> Result<f64> {
    if x.len() != task.n_t() || y.len() != task.n_r() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, y has {}; channel is {}x{}",
            x.len(),
            y.len(),
            task.n_r(),
            task.n_t()
        )));
    }
    let obs = PreparedObservation::new(q, y)?;
    Ok(obs.log_likelihood(&task.h.mul_vec(x), task.sigma2))
}

/// One labelled pilot.
#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub x_index: usize,
    pub x: Vec<Complex>,
    pub y: Vec<Complex>,
}

/// Ordered pilot pairs drawn from a single task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextSet {
    pub pairs: Vec<Pilot>,
}

impl ContextSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` pilots.
    pub fn prefix(&self, n: usize) -> ContextSet {
        ContextSet {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }
}

/// Draws a uniform joint input and its channel output.
pub fn sample_pilot(
    task: &Task,
    q: &Quantizer,
    constellation: &Constellation,
    rng: &mut RngStream,
) -> Pilot {
    let x_index = rng.index(constellation.len());
    let x = constellation.input(x_index).to_vec();
    let y = apply_channel(task, q, &x, rng);
    Pilot { x_index, x, y }
}

pub fn sample_context(
    task: &Task,
    q: &Quantizer,
    constellation: &Constellation,
    n: usize,
    rng: &mut RngStream,
) -> ContextSet {
    ContextSet {
        pairs: (0..n)
            .map(|_| sample_pilot(task, q, constellation, rng))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex {
        Complex::new(re, im)
    }

    fn random_task(rng: &mut RngStream, n_r: usize, n_t: usize, sigma2: f64) -> Task {
        Task::new(sample_channel(n_r, n_t, rng), sigma2).unwrap()
    }

    #[test]
    fn constellation_layout() {
        let k = Constellation::qam4(2);
        assert_eq!(k.len(), 16);
        let a = 0.5;
        assert_eq!(k.per_antenna_symbols()[1], c(a, -a));
        assert_eq!(k.input(0), &[c(a, a), c(a, a)]);
        assert_eq!(k.input(1), &[c(a, a), c(a, -a)]);
        assert_eq!(k.input(4), &[c(a, -a), c(a, a)]);
        assert_eq!(k.input(15), &[c(-a, -a), c(-a, -a)]);
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(k.input(i), k.input(j));
            }
        }
    }

    #[test]
    fn constellation_unit_energy_exact() {
        // Each coordinate is ±1/sqrt(2 n_t); squared it is exactly
        // 1/(2 n_t). Count squared coordinates as integers in units of
        // 1/(2 n_t): every vector contributes 2 n_t units.
        for n_t in 1..=3 {
            let k = Constellation::qam4(n_t);
            let units: usize = k
                .joint_inputs()
                .iter()
                .map(|x| {
                    x.iter()
                        .map(|z| {
                            let r = z.re * z.re * (2 * n_t) as f64;
                            let i = z.im * z.im * (2 * n_t) as f64;
                            (r.round() + i.round()) as usize
                        })
                        .sum::<usize>()
                })
                .sum();
            assert_eq!(units, k.len() * 2 * n_t);
            let e: f64 = k
                .joint_inputs()
                .iter()
                .map(|x| x.iter().map(|z| z.norm_sqr()).sum::<f64>())
                .sum::<f64>()
                / k.len() as f64;
            assert!((e - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn snr_values() {
        let h = CMatrix::identity(2);
        let t = |s| Task::new(h.clone(), s).unwrap();
        assert!((snr_of(&t(0.1)) - 10.0).abs() < 1e-12);
        assert_eq!(snr_of(&t(1.0)), 1.0);
        assert!((snr_of(&t(0.001)) - 1000.0).abs() < 1e-9);
        assert!((linear_to_db(snr_of(&t(0.001))) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn task_rejects_bad_noise() {
        assert!(Task::new(CMatrix::identity(2), 0.0).is_err());
        assert!(Task::new(CMatrix::identity(2), f64::NAN).is_err());
    }

    #[test]
    fn fixed_noise_spec_samples_exact_sigma2() {
        let spec = TaskDistributionSpec::new(2, 2, -10.0, -10.0).unwrap();
        let mut rng = RngStream::new(1, 1);
        for _ in 0..100 {
            let t = sample_task(&spec, &mut rng);
            assert!((t.sigma2 - 0.1).abs() < 1e-15);
        }
        assert!(TaskDistributionSpec::new(2, 2, 0.0, -1.0).is_err());
    }

    #[test]
    fn sampled_channel_power() {
        let spec = TaskDistributionSpec::new(2, 2, -30.0, 0.0).unwrap();
        let mut rng = RngStream::new(2, 1);
        let n = 100_000;
        let mut e = 0.0;
        for _ in 0..n {
            let t = sample_task(&spec, &mut rng);
            assert!(t.sigma2 >= 0.001 - 1e-15 && t.sigma2 <= 1.0 + 1e-15);
            e += t.h.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0;
        }
        assert!((e / n as f64 - 1.0).abs() < 0.02);
        let a = sample_task(&spec, &mut RngStream::new(2, 5));
        let b = sample_task(&spec, &mut RngStream::new(2, 6));
        assert_ne!(a.h, b.h);
    }

    #[test]
    fn quantize_examples() {
        let q4 = Quantizer::with_bits(4);
        assert_eq!(q4.quantize(0.1), (8, 0.25));
        assert_eq!(q4.quantize(100.0), (15, 3.75));
        assert_eq!(q4.quantize(-100.0), (0, -3.75));
        let q1 = Quantizer::with_bits(1);
        assert_eq!(q1.quantize(-0.3), (0, -2.0));
        assert_eq!(q1.quantize(0.3), (1, 2.0));
        assert_eq!(Quantizer::unquantized().quantize(1.234), (-1, 1.234));
    }

    #[test]
    fn cell_bounds_examples() {
        assert_eq!(
            Quantizer::with_bits(1).cell_bounds(0).unwrap(),
            (f64::NEG_INFINITY, 0.0)
        );
        assert_eq!(Quantizer::with_bits(4).cell_bounds(8).unwrap(), (0.0, 0.5));
        assert_eq!(
            Quantizer::with_bits(2).cell_bounds(3).unwrap(),
            (2.0, f64::INFINITY)
        );
        assert!(Quantizer::with_bits(2).cell_bounds(4).is_err());
    }

    #[test]
    fn cells_tile_the_line() {
        for b in 1..=8 {
            let q = Quantizer::with_bits(b);
            let n = q.levels().unwrap();
            let mut prev_hi = f64::NEG_INFINITY;
            for k in 0..n {
                let (lo, hi) = q.cell_bounds(k).unwrap();
                assert_eq!(lo, prev_hi, "gap/overlap at b={b}, k={k}");
                assert!(lo < hi);
                prev_hi = hi;
            }
            assert_eq!(prev_hi, f64::INFINITY);
        }
    }

    #[test]
    fn quantize_lands_in_containing_cell() {
        let mut rng = RngStream::new(3, 0);
        for b in 1..=8 {
            let q = Quantizer::with_bits(b);
            for _ in 0..100_000 {
                let v = rng.uniform_range(-6.0, 6.0);
                let (k, val) = q.quantize(v);
                let (lo, hi) = q.cell_bounds(k as usize).unwrap();
                assert!(lo <= v && v < hi, "b={b} v={v} cell=({lo},{hi})");
                assert_eq!(q.level_of(val).unwrap(), k as usize);
            }
        }
    }

    #[test]
    fn level_of_rejects_off_grid() {
        let q = Quantizer::with_bits(4);
        assert!(matches!(q.level_of(0.3), Err(Error::OffGrid { .. })));
        assert!(matches!(q.level_of(4.25), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn noiseless_unquantized_channel() {
        let mut rng = RngStream::new(4, 0);
        let mut t = random_task(&mut rng, 2, 2, 1.0);
        t.sigma2 = 1e-300;
        let x = Constellation::qam4(2).input(6).to_vec();
        let y = apply_channel(&t, &Quantizer::unquantized(), &x, &mut rng);
        let hx = t.h.mul_vec(&x);
        for (a, b) in y.iter().zip(&hx) {
            assert!((a - b).norm() < 1e-140);
        }
    }

    #[test]
    fn noise_power_matches_sigma2() {
        let mut rng = RngStream::new(5, 0);
        let t = random_task(&mut rng, 2, 2, 0.3);
        let x = Constellation::qam4(2).input(3).to_vec();
        let hx = t.h.mul_vec(&x);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = apply_channel(&t, &Quantizer::unquantized(), &x, &mut rng);
            acc += y.iter().zip(&hx).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
        let expected = 2.0 * 0.3;
        assert!((acc / n as f64 - expected).abs() < 0.02 * expected);
    }

    #[test]
    fn quantized_outputs_on_grid() {
        let mut rng = RngStream::new(6, 0);
        let t = random_task(&mut rng, 2, 2, 0.1);
        let q = Quantizer::with_bits(4);
        let k = Constellation::qam4(2);
        for i in 0..1000 {
            let y = apply_channel(&t, &q, k.input(i % 16), &mut rng);
            for v in y.iter().flat_map(|z| [z.re, z.im]) {
                q.level_of(v).unwrap();
            }
        }
    }

    fn all_outcomes(q: &Quantizer, n_r: usize) -> Vec<Vec<Complex>> {
        let n = q.levels().unwrap();
        let dims = 2 * n_r;
        (0..n.pow(dims as u32))
            .map(|mut idx| {
                let mut vals = Vec::with_capacity(dims);
                for _ in 0..dims {
                    vals.push(q.level_value(idx % n));
                    idx /= n;
                }
                vals.chunks(2).map(|p| c(p[0], p[1])).collect()
            })
            .collect()
    }

    #[test]
    fn likelihood_normalizes_by_enumeration() {
        let mut rng = RngStream::new(7, 0);
        let k = Constellation::qam4(2);
        let q = Quantizer::with_bits(2);
        let outcomes = all_outcomes(&q, 2);
        assert_eq!(outcomes.len(), 256);
        for _ in 0..5 {
            let s2 = rng.uniform_range(0.01, 1.0);
            let t = random_task(&mut rng, 2, 2, s2);
            let x = k.input(rng.index(16)).to_vec();
            let total: f64 = outcomes
                .iter()
                .map(|y| log_likelihood(&t, &q, &x, y).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "total = {total}");
        }
    }

    #[test]
    fn unquantized_peak_density() {
        let mut rng = RngStream::new(8, 0);
        let t = random_task(&mut rng, 2, 2, 0.2);
        let x = Constellation::qam4(2).input(9).to_vec();
        let y = t.h.mul_vec(&x);
        let ll = log_likelihood(&t, &Quantizer::unquantized(), &x, &y).unwrap();
        let expected = 4.0 * (1.0 / (PI * 0.2).sqrt()).ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn one_bit_sign_flip_symmetry() {
        let mut rng = RngStream::new(9, 0);
        let t = random_task(&mut rng, 2, 2, 0.3);
        let q = Quantizer::with_bits(1);
        let k = Constellation::qam4(2);
        for i in 0..16 {
            let x = k.input(i).to_vec();
            let y = apply_channel(&t, &q, &x, &mut rng);
            let nx: Vec<Complex> = x.iter().map(|z| -z).collect();
            let ny: Vec<Complex> = y.iter().map(|z| -z).collect();
            let a = log_likelihood(&t, &q, &x, &y).unwrap();
            let b = log_likelihood(&t, &q, &nx, &ny).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_rejects_off_grid_observation() {
        let t = Task::new(CMatrix::identity(2), 0.1).unwrap();
        let x = Constellation::qam4(2).input(0).to_vec();
        let y = vec![c(0.3, 0.25), c(0.25, 0.25)];
        assert!(matches!(
            log_likelihood(&t, &Quantizer::with_bits(4), &x, &y),
            Err(Error::OffGrid { .. })
        ));
    }

    #[test]
    fn fine_quantization_approaches_density() {
        let mut rng = RngStream::new(10, 0);
        let t = random_task(&mut rng, 2, 2, 0.1);
        let q = Quantizer::with_bits(10);
        let d = q.step().unwrap();
        let k = Constellation::qam4(2);
        for i in 0..16 {
            let x = k.input(i).to_vec();
            let y = apply_channel(&t, &q, &x, &mut rng);
            let quantized = log_likelihood(&t, &q, &x, &y).unwrap();
            let density = log_likelihood(&t, &Quantizer::unquantized(), &x, &y).unwrap();
            let approx = quantized - 4.0 * d.ln();
            assert!(
                ((density - approx) / density).abs() < 1e-3,
                "{density} vs {approx}"
            );
        }
    }

    #[test]
    fn context_sampling() {
        let mut rng = RngStream::new(11, 0);
        let t = random_task(&mut rng, 2, 2, 0.1);
        let q = Quantizer::with_bits(4);
        let k = Constellation::qam4(2);
        assert!(sample_context(&t, &q, &k, 0, &mut rng).is_empty());
        let ctx = sample_context(&t, &q, &k, 20, &mut RngStream::new(3, 3));
        assert_eq!(ctx.len(), 20);
        assert_eq!(ctx, sample_context(&t, &q, &k, 20, &mut RngStream::new(3, 3)));
        for p in &ctx.pairs {
            assert_eq!(k.index_of(&p.x), Some(p.x_index));
        }
    }

    #[test]
    fn context_inputs_uniform_chi_square() {
        let t = Task::new(CMatrix::identity(2), 0.1).unwrap();
        let q = Quantizer::with_bits(4);
        let k = Constellation::qam4(2);
        let mut counts = [0usize; 16];
        let mut rng = RngStream::new(12, 0);
        for _ in 0..5000 {
            for p in sample_context(&t, &q, &k, 20, &mut rng).pairs {
                counts[p.x_index] += 1;
            }
        }
        let n = 100_000.0;
        let e = n / 16.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 15 degrees of freedom, 0.999 quantile ≈ 37.7
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    proptest::proptest! {
        #[test]
        fn quantizer_lands_on_nearest_level(bits in 1u32..9, v in -6.0f64..6.0) {
            let q = Quantizer::with_bits(bits);
            let (k, out) = q.quantize(v);
            let k = k as usize;
            proptest::prop_assert_eq!(out, q.level_value(k));
            proptest::prop_assert_eq!(q.level_of(out).unwrap(), k);
            let step = q.step().unwrap();
            if (-4.0..4.0).contains(&v) {
                proptest::prop_assert!((out - v).abs() <= step / 2.0 + 1e-12);
            } else {
                proptest::prop_assert!(k == 0 || k == q.levels().unwrap() - 1);
            }
        }

        #[test]
        fn one_bit_likelihood_sums_to_one(
            h in proptest::collection::vec(-2.0f64..2.0, 8),
            sigma2_db in -30.0f64..10.0,
            x_index in 0usize..16,
        ) {
            let h = CMatrix::from_vec(2, 2, (0..4).map(|i| Complex::new(h[2 * i], h[2 * i + 1])).collect()).unwrap();
            let task = Task::new(h, db_to_linear(sigma2_db)).unwrap();
            let q = Quantizer::with_bits(1);
            let x = Constellation::qam4(2).input(x_index).to_vec();
            let mut total = 0.0;
            for idx in 0..16u32 {
                let d = |j: u32| if idx >> j & 1 == 0 { -2.0 } else { 2.0 };
                let y = [Complex::new(d(0), d(1)), Complex::new(d(2), d(3))];
                total += log_likelihood(&task, &q, &x, &y).unwrap().exp();
            }
            proptest::prop_assert!((total - 1.0).abs() < 1e-12, "{}", total);
        }
    }
}
