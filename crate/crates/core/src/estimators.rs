//! Reference equalizers: known-task MMSE, LMMSE, and Bayesian MMSE under a
//! discrete or continuous channel prior, plus the closed-form Gaussian
//! oracle used to validate the Monte Carlo estimator.
//!
//! All Bayesian estimators return the posterior mean `E[x | context, y]`:
//! each channel hypothesis is weighted by the pilot likelihood and by the
//! evidence `P(y | H)` of the query itself.

use std::f64::consts::PI;

use crate::channel::{Constellation, ContextSet, PreparedObservation, Quantizer, Task};
use crate::error::{Error, Result};
use crate::numerics::stats::{logsumexp_nonempty, normalize_log_weights};
use crate::numerics::{hermitian, cmatmul, CMatrix, Cholesky, Complex, RngStream};

/// Posterior over the joint input set under a known task.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPosterior {
    pub probs: Vec<f64>,
    /// `ln P(y | task)` under the uniform input prior.
    pub log_evidence: f64,
}

impl InputPosterior {
    pub fn mean(&self, constellation: &Constellation) -> Vec<Complex> {
        constellation.weighted_mean(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Noiseless receive signals `H x_c` for every joint input.
fn receive_means(h: &CMatrix, constellation: &Constellation) -> Vec<Vec<Complex>> {
    constellation
        .joint_inputs()
        .iter()
        .map(|x| h.mul_vec(x))
        .collect()
}

fn posterior_from_means(
    means: &[Vec<Complex>],
    sigma2: f64,
    obs: &PreparedObservation,
) -> Result<InputPosterior> {
    let mut lls: Vec<f64> = means.iter().map(|m| obs.log_likelihood(m, sigma2)).collect();
    let z = normalize_log_weights(&mut lls);
    if !z.is_finite() {
        return Err(Error::DegenerateEvidence);
    }
    Ok(InputPosterior {
        probs: lls,
        log_evidence: z - (means.len() as f64).ln(),
    })
}

pub fn input_posterior(
    task: &Task,
    q: &Quantizer,
    constellation: &Constellation,
    y: &[Complex],
) -> Result<InputPosterior> {
    check_dims(task.n_r(), task.n_t(), constellation, y)?;
    let obs = PreparedObservation::new(q, y)?;
    posterior_from_means(&receive_means(&task.h, constellation), task.sigma2, &obs)
}

fn check_dims(n_r: usize, n_t: usize, constellation: &Constellation, y: &[Complex]) -> Result<()> {
    if y.len() != n_r || constellation.n_t() != n_t {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries and inputs have {}; channel is {n_r}x{n_t}",
            y.len(),
            constellation.n_t()
        )));
    }
    Ok(())
}

/// Posterior-mean equalizer with full task knowledge.
pub fn mmse_known_task(
    task: &Task,
    q: &Quantizer,
    constellation: &Constellation,
    y: &[Complex],
) -> Result<Vec<Complex>> {
    Ok(input_posterior(task, q, constellation, y)?.mean(constellation))
}

/// `(sigma2 n_t I + H^H H)^{-1} H^H y`, ignoring the quantizer.
pub fn lmmse_known_task(task: &Task, y: &[Complex], n_t: usize) -> Result<Vec<Complex>> {
    if y.len() != task.n_r() || n_t != task.n_t() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, n_t = {n_t}; channel is {}x{}",
            y.len(),
            task.n_r(),
            task.n_t()
        )));
    }
    let hh = hermitian(&task.h);
    let mut a = cmatmul(&hh, &task.h)?;
    let reg = task.sigma2 * n_t as f64;
    for i in 0..n_t {
        a[(i, i)] += Complex::new(reg, 0.0);
    }
    let rhs = hh.mul_vec(y);
    Ok(Cholesky::new(&a)?.solve_vec(&rhs))
}

/// Channel prior used by the Bayesian equalizers.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPrior {
    /// i.i.d. CN(0, 1) entries.
    Continuous { n_r: usize, n_t: usize },
    /// Uniform over a finite set of channels.
    Discrete(Vec<CMatrix>),
}

impl ChannelPrior {
    pub fn discrete(channels: Vec<CMatrix>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty discrete channel prior".into()))?;
        let dims = (first.rows(), first.cols());
        if channels.iter().any(|h| (h.rows(), h.cols()) != dims) {
            return Err(Error::DimensionMismatch(
                "discrete prior channels differ in shape".into(),
            ));
        }
        Ok(Self::Discrete(channels))
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Continuous { n_r, n_t } => (*n_r, *n_t),
            Self::Discrete(hs) => (hs[0].rows(), hs[0].cols()),
        }
    }
}

fn prepare_context(q: &Quantizer, context: &ContextSet) -> Result<Vec<(Vec<Complex>, PreparedObservation)>> {
    context
        .pairs
        .iter()
        .map(|p| Ok((p.x.clone(), PreparedObservation::new(q, &p.y)?)))
        .collect()
}

fn context_log_likelihood(
    h: &CMatrix,
    sigma2: f64,
    prepared: &[(Vec<Complex>, PreparedObservation)],
    scratch: &mut Vec<Complex>,
) -> f64 {
    scratch.resize(h.rows(), Complex::new(0.0, 0.0));
    prepared
        .iter()
        .map(|(x, obs)| {
            h.mul_vec_into(x, scratch);
            obs.log_likelihood(scratch, sigma2)
        })
        .sum()
}

/// Unnormalized log posterior weight of each channel of a discrete prior
/// given the pilots: `Σ_i ln P(y_i | x_i, H_m)`.
pub fn channel_log_posterior_weights(
    prior: &ChannelPrior,
    sigma2: f64,
    q: &Quantizer,
    context: &ContextSet,
) -> Result<Vec<f64>> {
    let channels = match prior {
        ChannelPrior::Discrete(hs) => hs,
        ChannelPrior::Continuous { .. } => {
            return Err(Error::InvalidArgument(
                "pilot weights need a discrete prior".into(),
            ))
        }
    };
    let prepared = prepare_context(q, context)?;
    let mut scratch = Vec::new();
    Ok(channels
        .iter()
        .map(|h| context_log_likelihood(h, sigma2, &prepared, &mut scratch))
        .collect())
}

/// A weighted set of channel hypotheses conditioned on a context. The
/// weight of hypothesis `m` is `ln w_m` up to a constant; the query
/// evidence is folded in per received vector.
#[derive(Debug, Clone)]
pub struct ChannelMixture {
    channels: Vec<CMatrix>,
    log_weights: Vec<f64>,
    /// Hypotheses in descending weight order.
    order: Vec<usize>,
    sigma2: f64,
    quantizer: Quantizer,
    means: Vec<Vec<Vec<Complex>>>,
}

/// Output of a mixture equalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    pub x_hat: Vec<Complex>,
    /// `1 / Σ w̄²` of the final normalized hypothesis weights.
    pub ess: f64,
}

/// Hypotheses whose weight falls this far (in nats) below the best are
/// skipped; their total contribution is below 1e-18 relative.
const PRUNE_GAP: f64 = 60.0;

impl ChannelMixture {
    pub fn new(
        channels: Vec<CMatrix>,
        log_weights: Vec<f64>,
        sigma2: f64,
        quantizer: Quantizer,
        constellation: &Constellation,
    ) -> Self {
        assert_eq!(channels.len(), log_weights.len());
        let mut order: Vec<usize> = (0..channels.len()).collect();
        order.sort_by(|&a, &b| log_weights[b].total_cmp(&log_weights[a]));
        let means = channels.iter().map(|h| receive_means(h, constellation)).collect();
        Self {
            channels,
            log_weights,
            order,
            sigma2,
            quantizer,
            means,
        }
    }

    /// Uniform discrete prior updated by the pilots.
    pub fn discrete(
        channels: &[CMatrix],
        sigma2: f64,
        q: &Quantizer,
        constellation: &Constellation,
        context: &ContextSet,
    ) -> Result<Self> {
        let prior = ChannelPrior::discrete(channels.to_vec())?;
        let w = channel_log_posterior_weights(&prior, sigma2, q, context)?;
        Ok(Self::new(channels.to_vec(), w, sigma2, *q, constellation))
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[CMatrix] {
        &self.channels
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Largest possible `ln P(y | H)`.
    fn evidence_bound(&self, n_r: usize) -> f64 {
        if self.quantizer.is_quantized() {
            0.0
        } else {
            -(n_r as f64) * (PI * self.sigma2).ln()
        }
    }

    /// Posterior mean of `x` given the context and `y`.
    pub fn estimate(&self, constellation: &Constellation, y: &[Complex]) -> Result<MixtureEstimate> {
        let obs = PreparedObservation::new(&self.quantizer, y)?;
        let bound = self.evidence_bound(y.len());
        let mut best = f64::NEG_INFINITY;
        let mut terms: Vec<(f64, Vec<Complex>)> = Vec::new();
        for &m in &self.order {
            let prior_w = self.log_weights[m];
            if prior_w == f64::NEG_INFINITY || prior_w + bound < best - PRUNE_GAP {
                break;
            }
            let post = match posterior_from_means(&self.means[m], self.sigma2, &obs) {
                Ok(p) => p,
                Err(Error::DegenerateEvidence) => continue,
                Err(e) => return Err(e),
            };
            let w = prior_w + post.log_evidence;
            best = best.max(w);
            terms.push((w, post.mean(constellation)));
        }
        if terms.is_empty() || !best.is_finite() {
            return Err(Error::DegenerateEvidence);
        }
        let mut lw: Vec<f64> = terms.iter().map(|t| t.0).collect();
        normalize_log_weights(&mut lw);
        let mut x_hat = vec![Complex::new(0.0, 0.0); constellation.n_t()];
        for (w, (_, mean)) in lw.iter().zip(&terms) {
            for (o, m) in x_hat.iter_mut().zip(mean) {
                *o += m * *w;
            }
        }
        let ess = 1.0 / lw.iter().map(|w| w * w).sum::<f64>();
        Ok(MixtureEstimate { x_hat, ess })
    }
}

/// Bayesian MMSE under a uniform prior over `channels`.
pub fn bayes_mmse_discrete(
    prior: &ChannelPrior,
    sigma2: f64,
    q: &Quantizer,
    constellation: &Constellation,
    context: &ContextSet,
    y: &[Complex],
) -> Result<Vec<Complex>> {
    let channels = match prior {
        ChannelPrior::Discrete(hs) => hs,
        ChannelPrior::Continuous { .. } => {
            return Err(Error::InvalidArgument(
                "bayes_mmse_discrete needs a discrete prior".into(),
            ))
        }
    };
    let mix = ChannelMixture::discrete(channels, sigma2, q, constellation, context)?;
    Ok(mix.estimate(constellation, y)?.x_hat)
}

/// Importance-sampling proposal for the continuous-prior equalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    /// Draw channels from the CN(0, 1) prior itself.
    Prior,
    /// Gaussian channel posterior given the pilots, treating quantization
    /// as extra white noise of variance Δ²/12 per real dimension and
    /// doubling the covariance when quantized. Exact when unquantized.
    ContextGaussian,
}

impl std::str::FromStr for Proposal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Self::Prior),
            "context-gaussian" => Ok(Self::ContextGaussian),
            _ => Err(Error::Config(format!("unknown proposal `{s}`"))),
        }
    }
}

impl std::fmt::Display for Proposal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Prior => "prior",
            Self::ContextGaussian => "context-gaussian",
        })
    }
}

/// Gaussian posterior of each channel row `h_r` (where `y_r = X h_r + z`)
/// under a CN(0, I) prior: shared precision `P = I + X^H X / s²` and
/// per-row means `P^{-1} X^H y_r / s²`.
#[derive(Debug, Clone)]
pub struct GaussianRowPosterior {
    precision: Cholesky,
    covariance: CMatrix,
    means: Vec<Vec<Complex>>,
}

impl GaussianRowPosterior {
    pub fn new(n_r: usize, n_t: usize, noise_var: f64, context: &ContextSet) -> Result<Self> {
        let mut p = CMatrix::identity(n_t);
        for pilot in &context.pairs {
            for j in 0..n_t {
                for k in 0..n_t {
                    p[(j, k)] += pilot.x[j].conj() * pilot.x[k] / noise_var;
                }
            }
        }
        let precision = Cholesky::new(&p)?;
        let covariance = precision.inverse();
        let means = (0..n_r)
            .map(|r| {
                let mut b = vec![Complex::new(0.0, 0.0); n_t];
                for pilot in &context.pairs {
                    for (j, bj) in b.iter_mut().enumerate() {
                        *bj += pilot.x[j].conj() * pilot.y[r] / noise_var;
                    }
                }
                precision.solve_vec(&b)
            })
            .collect();
        Ok(Self {
            precision,
            covariance,
            means,
        })
    }

    pub fn covariance(&self) -> &CMatrix {
        &self.covariance
    }

    pub fn row_mean(&self, r: usize) -> &[Complex] {
        &self.means[r]
    }

    /// Draws a channel with every row covariance scaled by `inflation`.
    /// Returns the channel and `ln q(H)`.
    fn sample(&self, inflation: f64, rng: &mut RngStream) -> (CMatrix, f64) {
        let n_r = self.means.len();
        let n_t = self.covariance.rows();
        let s = inflation.sqrt();
        let mut h = CMatrix::zeros(n_r, n_t);
        let per_row_const =
            -(n_t as f64) * PI.ln() + self.precision.log_det() - n_t as f64 * inflation.ln();
        let mut log_q = 0.0;
        for r in 0..n_r {
            let mut w: Vec<Complex> = (0..n_t).map(|_| rng.standard_complex_normal()).collect();
            log_q += per_row_const - w.iter().map(|z| z.norm_sqr()).sum::<f64>();
            self.precision.backward_in_place(&mut w);
            for j in 0..n_t {
                h[(r, j)] = self.means[r][j] + w[j] * s;
            }
        }
        (h, log_q)
    }
}

/// Builds the importance-weighted channel mixture for the continuous
/// CN(0, 1) prior. Weights are `prior · pilot likelihood / proposal`.
pub fn continuous_prior_mixture(
    n_r: usize,
    sigma2: f64,
    q: &Quantizer,
    constellation: &Constellation,
    context: &ContextSet,
    samples: usize,
    proposal: Proposal,
    rng: &mut RngStream,
) -> Result<ChannelMixture> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let n_t = constellation.n_t();
    let prepared = prepare_context(q, context)?;
    let gaussian = match proposal {
        Proposal::Prior => None,
        Proposal::ContextGaussian => {
            let extra = q.step().map_or(0.0, |d| d * d / 6.0);
            Some(GaussianRowPosterior::new(n_r, n_t, sigma2 + extra, context)?)
        }
    };
    let inflation = if q.is_quantized() { 2.0 } else { 1.0 };
    let mut channels = Vec::with_capacity(samples);
    let mut log_w = Vec::with_capacity(samples);
    let mut scratch = Vec::new();
    let log_prior_const = -((n_r * n_t) as f64) * PI.ln();
    for _ in 0..samples {
        let (h, correction) = match &gaussian {
            None => {
                let h = crate::channel::sample_channel(n_r, n_t, rng);
                (h, 0.0)
            }
            Some(g) => {
                let (h, log_q) = g.sample(inflation, rng);
                let log_p = log_prior_const - h.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>();
                (h, log_p - log_q)
            }
        };
        let ll = context_log_likelihood(&h, sigma2, &prepared, &mut scratch);
        log_w.push(ll + correction);
        channels.push(h);
    }
    Ok(ChannelMixture::new(channels, log_w, sigma2, *q, constellation))
}

/// Bayesian MMSE under the continuous CN(0, 1) channel prior, by
/// self-normalized importance sampling with `samples` channel draws.
#[allow(clippy::too_many_arguments)]
pub fn bayes_mmse_continuous_mc(
    sigma2: f64,
    q: &Quantizer,
    constellation: &Constellation,
    context: &ContextSet,
    y: &[Complex],
    samples: usize,
    proposal: Proposal,
    rng: &mut RngStream,
) -> Result<MixtureEstimate> {
    let mix = continuous_prior_mixture(y.len(), sigma2, q, constellation, context, samples, proposal, rng)?;
    mix.estimate(constellation, y)
}

/// Exact posterior mean under the CN(0, 1) prior for an unquantized
/// receiver, via the Gaussian predictive of each receive antenna.
pub fn bayes_mmse_gaussian_exact(
    sigma2: f64,
    q: &Quantizer,
    constellation: &Constellation,
    context: &ContextSet,
    y: &[Complex],
) -> Result<Vec<Complex>> {
    if q.is_quantized() {
        return Err(Error::Incompatible {
            equalizer: "bayes_mmse_gaussian_exact".into(),
            reason: "requires an unquantized receiver".into(),
        });
    }
    let n_t = constellation.n_t();
    let post = GaussianRowPosterior::new(y.len(), n_t, sigma2, context)?;
    let cov = post.covariance();
    let lls: Vec<f64> = constellation
        .joint_inputs()
        .iter()
        .map(|x| {
            let mut quad = Complex::new(0.0, 0.0);
            for j in 0..n_t {
                for k in 0..n_t {
                    quad += x[j] * cov[(j, k)] * x[k].conj();
                }
            }
            let var = sigma2 + quad.re;
            y.iter()
                .enumerate()
                .map(|(r, yr)| {
                    let m: Complex = x.iter().zip(post.row_mean(r)).map(|(a, b)| a * b).sum();
                    -(PI * var).ln() - (yr - m).norm_sqr() / var
                })
                .sum::<f64>()
        })
        .collect();
    if !logsumexp_nonempty(&lls).is_finite() {
        return Err(Error::DegenerateEvidence);
    }
    let mut probs = lls;
    normalize_log_weights(&mut probs);
    Ok(constellation.weighted_mean(&probs))
}
