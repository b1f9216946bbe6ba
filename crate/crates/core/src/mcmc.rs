//! Adaptive random-walk Metropolis–Hastings and convergence diagnostics.
//!
//! During burn-in the global proposal scale is nudged toward the target
//! acceptance rate every `adapt_interval` steps and the proposal shape
//! tracks the empirical covariance of the chain. Both are frozen once
//! burn-in ends, so the retained draws come from a fixed kernel.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{Cholesky, Matrix};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Real;

/// Diagonal jitter added to the empirical proposal covariance.
pub const COV_JITTER: f64 = 1e-8;

/// Split-R̂ above this flags a chain set as not converged.
pub const DEFAULT_RHAT_MAX: f64 = 1.1;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid MCMC config: {0}")]
    Config(String),
    #[error("log posterior is not finite at the initial point ({0})")]
    NonFiniteInit(f64),
    #[error("need at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("chains disagree on shape: {0}")]
    ChainShape(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig<T> {
    pub n_samples: usize,
    pub n_burn: usize,
    pub init: Vec<T>,
    pub initial_proposal_cov: Matrix<T>,
    pub initial_scale: T,
    pub target_acceptance: f64,
    pub adapt_interval: usize,
    pub seed: u64,
    /// Box outside which proposals are rejected outright.
    pub support: Option<Vec<(T, T)>>,
}

impl<T: Real> McmcConfig<T> {
    /// Defaults: 20000 samples, 4000 burn-in, identity proposal shape with
    /// scale `2.38 / sqrt(d)`.
    pub fn new(init: Vec<T>, seed: u64) -> Self {
        let d = init.len();
        Self {
            n_samples: 20_000,
            n_burn: 4_000,
            initial_proposal_cov: Matrix::identity(d),
            initial_scale: T::lit(2.38) / T::from_usize_lossy(d.max(1)).sqrt(),
            init,
            target_acceptance: 0.234,
            adapt_interval: 50,
            seed,
            support: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }

    pub fn validate(&self) -> Result<Cholesky<T>, McmcError> {
        let d = self.dim();
        let bad = |m: String| Err(McmcError::Config(m));
        if d == 0 {
            return bad("empty initial point".into());
        }
        if self.n_samples == 0 || self.n_burn >= self.n_samples {
            return bad(format!("need n_burn < n_samples, got {} and {}", self.n_burn, self.n_samples));
        }
        if !(self.initial_scale > T::zero()) || !self.initial_scale.is_finite() {
            return bad(format!("initial proposal scale must be > 0, got {}", self.initial_scale));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad(format!("target acceptance must be in (0,1), got {}", self.target_acceptance));
        }
        if self.adapt_interval == 0 {
            return bad("adapt_interval must be >= 1".into());
        }
        if self.initial_proposal_cov.rows() != d || self.initial_proposal_cov.cols() != d {
            return bad(format!("proposal covariance must be {d}x{d}"));
        }
        if let Some(support) = &self.support {
            if support.len() != d {
                return bad(format!("support has {} ranges for dimension {d}", support.len()));
            }
            if !in_support(&self.init, support) {
                return bad("initial point outside support".into());
            }
        }
        Cholesky::factor(&self.initial_proposal_cov)
            .map_err(|e| McmcError::Config(format!("proposal covariance not SPD: {e}")))
    }
}

fn in_support<T: Real>(theta: &[T], support: &[(T, T)]) -> bool {
    theta.iter().zip(support).all(|(&t, &(lo, hi))| t >= lo && t <= hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain<T> {
    /// `n_samples x d`, burn-in included.
    pub draws: Matrix<T>,
    pub log_posterior_values: Vec<T>,
    pub accepted: Vec<bool>,
    /// Post-burn-in acceptance fraction.
    pub acceptance_rate: f64,
    /// `(step, scale)` after each adaptation.
    pub scale_history: Vec<(usize, T)>,
    pub n_burn: usize,
}

impl<T: Real> PosteriorChain<T> {
    pub fn n_samples(&self) -> usize {
        self.draws.rows()
    }

    pub fn dim(&self) -> usize {
        self.draws.cols()
    }

    /// Post-burn-in rows.
    pub fn retained(&self) -> impl Iterator<Item = &[T]> {
        self.draws.iter_rows().skip(self.n_burn)
    }

    /// Post-burn-in values of coordinate `k`.
    pub fn retained_column(&self, k: usize) -> Vec<T> {
        self.retained().map(|r| r[k]).collect()
    }

    /// CSV `step,theta1,...,thetad,log_post,accepted`, all steps.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), McmcError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((1..=self.dim()).map(|k| format!("theta{k}")));
        header.push("log_post".into());
        header.push("accepted".into());
        w.write_record(&header)?;
        for (step, row) in self.draws.iter_rows().enumerate() {
            let mut rec = vec![step.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(self.log_posterior_values[step].to_string());
            rec.push(u8::from(self.accepted[step]).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Running mean and scatter matrix.
struct Welford<T> {
    n: usize,
    mean: Vec<T>,
    m2: Matrix<T>,
}

impl<T: Real> Welford<T> {
    fn new(d: usize) -> Self {
        Self { n: 0, mean: vec![T::zero(); d], m2: Matrix::zeros(d, d) }
    }

    fn push(&mut self, x: &[T]) {
        self.n += 1;
        let nf = T::from_usize_lossy(self.n);
        let before: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        for (m, &dx) in self.mean.iter_mut().zip(&before) {
            *m += dx / nf;
        }
        let d = x.len();
        for i in 0..d {
            let after_i = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[(i, j)] += after_i * before[j];
            }
        }
    }

    fn covariance(&self) -> Matrix<T> {
        let d = self.mean.len();
        let denom = T::from_usize_lossy(self.n.saturating_sub(1).max(1));
        let mut c = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                // symmetrize away rounding drift
                c[(i, j)] = (self.m2[(i, j)] + self.m2[(j, i)]) * T::lit(0.5) / denom;
            }
        }
        c
    }
}

/// Runs one chain. `log_post` may return `-inf` for zero density; `NaN`
/// is treated the same way for proposals.
pub fn adaptive_mh<T, F>(mut log_post: F, config: &McmcConfig<T>) -> Result<PosteriorChain<T>, McmcError>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let mut chol = config.validate()?;
    let d = config.dim();
    let mut rng = seeded(config.seed);
    let mut theta = config.init.clone();
    let mut lp = log_post(&theta);
    if !lp.is_finite() {
        return Err(McmcError::NonFiniteInit(lp.as_f64()));
    }
    let mut scale = config.initial_scale;
    let mut draws = Vec::with_capacity(config.n_samples * d);
    let mut lps = Vec::with_capacity(config.n_samples);
    let mut accepted = Vec::with_capacity(config.n_samples);
    let mut scale_history = Vec::new();
    let mut stats = Welford::new(d);
    let mut window_accepts = 0usize;
    let mut kept_accepts = 0usize;
    let mut z = vec![T::zero(); d];
    let mut proposal = vec![T::zero(); d];

    for step in 0..config.n_samples {
        for zi in z.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *zi = T::lit(e);
        }
        let l = chol.factor_matrix();
        for i in 0..d {
            let mut s = T::zero();
            for j in 0..=i {
                s += l[(i, j)] * z[j];
            }
            proposal[i] = theta[i] + scale * s;
        }
        // the uniform is drawn every step so the stream does not depend
        // on which proposals fall outside the support
        let u: f64 = rng.random();
        let inside = config.support.as_ref().is_none_or(|s| in_support(&proposal, s));
        let mut ok = false;
        if inside {
            let lp_new = log_post(&proposal);
            if lp_new.is_finite() && u.ln() < (lp_new - lp).as_f64() {
                theta.copy_from_slice(&proposal);
                lp = lp_new;
                ok = true;
            }
        }
        draws.extend_from_slice(&theta);
        lps.push(lp);
        accepted.push(ok);

        if step < config.n_burn {
            window_accepts += usize::from(ok);
            stats.push(&theta);
            if (step + 1) % config.adapt_interval == 0 {
                let rate = window_accepts as f64 / config.adapt_interval as f64;
                scale = scale * T::lit((rate - config.target_acceptance).exp());
                window_accepts = 0;
                if stats.n >= 10 * d {
                    let mut cov = stats.covariance();
                    cov.add_diagonal(T::lit(COV_JITTER));
                    match Cholesky::factor(&cov) {
                        Ok(c) => chol = c,
                        Err(e) => log::debug!("step {step}: keeping previous proposal shape ({e})"),
                    }
                }
                scale_history.push((step + 1, scale));
            }
        } else {
            kept_accepts += usize::from(ok);
        }
    }
    let kept = config.n_samples - config.n_burn;
    Ok(PosteriorChain {
        draws: Matrix::from_vec(config.n_samples, d, draws).expect("shape"),
        log_posterior_values: lps,
        accepted,
        acceptance_rate: kept_accepts as f64 / kept as f64,
        scale_history,
        n_burn: config.n_burn,
    })
}

/// Runs `n_chains` chains in parallel; chain `k` uses seed
/// `derive_seed(config.seed, k)`.
pub fn run_chains<T, F>(log_post: F, config: &McmcConfig<T>, n_chains: usize) -> Result<Vec<PosteriorChain<T>>, McmcError>
where
    T: Real,
    F: Fn(&[T]) -> T + Sync,
{
    (0..n_chains)
        .into_par_iter()
        .map(|k| {
            let cfg = McmcConfig { seed: derive_seed(config.seed, k as u64), ..config.clone() };
            adaptive_mh(&log_post, &cfg)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub acceptance: Vec<f64>,
}

impl Diagnostics {
    /// Human-readable reasons the chain set should not be trusted.
    pub fn failures(&self, rhat_max: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (k, &r) in self.rhat.iter().enumerate() {
            if !(r < rhat_max) {
                out.push(format!("theta{}: rhat {r} >= {rhat_max}", k + 1));
            }
        }
        for (c, &a) in self.acceptance.iter().enumerate() {
            if a == 0.0 {
                out.push(format!("chain {c}: every post-burn-in proposal rejected"));
            }
        }
        out
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (r, e)) in self.rhat.iter().zip(&self.ess).enumerate() {
            writeln!(f, "rhat.theta{} = {r}", k + 1)?;
            writeln!(f, "ess.theta{} = {e}", k + 1)?;
        }
        for (c, a) in self.acceptance.iter().enumerate() {
            writeln!(f, "acceptance.chain{c} = {a}")?;
        }
        Ok(())
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = crate::scalar::pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (m, crate::scalar::pairwise_sum(&dev) / (n - 1.0))
}

/// Split-R̂ for one coordinate over post-burn-in draws. Returns infinity
/// when the within-chain variance is zero but the chains disagree.
fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains[0].len() / 2;
    let pieces: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[c.len() - half..]]).collect();
    let stats: Vec<(f64, f64)> = pieces.iter().map(|p| mean_var(p)).collect();
    let n = half as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let b_over_n = mean_var(&means).1;
    if w == 0.0 {
        return if b_over_n > 0.0 { f64::INFINITY } else { f64::NAN };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Multi-chain ESS with Geyer's initial positive sequence.
fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b_over_n = if m > 1 { mean_var(&means).1 } else { 0.0 };
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let autocov = |c: &[f64], mu: f64, lag: usize| -> f64 {
        (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / nf
    };
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains.iter().zip(&stats).map(|(c, s)| autocov(c, s.0, lag)).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut tau = -1.0;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        t += 2;
    }
    let total = (m * n) as f64;
    // capped as in common practice for antithetic chains
    (total / tau.max(f64::MIN_POSITIVE)).min(total * total.log10())
}

/// Split-R̂, ESS and acceptance over post-burn-in draws.
pub fn diagnostics<T: Real>(chains: &[PosteriorChain<T>]) -> Result<Diagnostics, McmcError> {
    if chains.len() < 2 {
        return Err(McmcError::TooFewChains(chains.len()));
    }
    let (d, n, burn) = (chains[0].dim(), chains[0].n_samples(), chains[0].n_burn);
    for c in chains {
        if c.dim() != d || c.n_samples() != n || c.n_burn != burn {
            return Err(McmcError::ChainShape(format!(
                "expected {n} samples in {d} dims with {burn} burn-in, got {} / {} / {}",
                c.n_samples(),
                c.dim(),
                c.n_burn
            )));
        }
    }
    if n - burn < 4 {
        return Err(McmcError::ChainShape("fewer than 4 retained draws".into()));
    }
    let mut rhat = Vec::with_capacity(d);
    let mut ess_out = Vec::with_capacity(d);
    for k in 0..d {
        let cols: Vec<Vec<f64>> =
            chains.iter().map(|c| c.retained_column(k).into_iter().map(|v| v.as_f64()).collect()).collect();
        rhat.push(split_rhat(&cols));
        ess_out.push(ess(&cols));
    }
    Ok(Diagnostics { rhat, ess: ess_out, acceptance: chains.iter().map(|c| c.acceptance_rate).collect() })
}
