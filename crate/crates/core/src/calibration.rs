//! Modular Bayesian calibration: emulate the code (GP_CC) on calibration
//! cases, model the discrepancy (GP_MD) on validation-case residuals, fix
//! both at their fitted hyperparameters, and sample the parameter
//! posterior with adaptive MH.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{
    BoundaryConditions, ExperimentCase, ForwardModel, ParameterVector, Partition, N_BOUNDARY, N_LOCATIONS, N_PARAMS,
    PARAMETER_NAMES,
};
use crate::gp::{FitOptions, GpError, GpModel};
use crate::linalg::Matrix;
use crate::mcmc::{diagnostics, run_chains, Diagnostics, McmcConfig, McmcError, PosteriorChain, DEFAULT_RHAT_MAX};
use crate::rng::derive_seed;
use crate::sampler::lhs_sample;
use crate::scalar::{mean, quantile_sorted, sort_floats, variance};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Minimum θ samples per calibration case for GP_CC training.
pub const MIN_THETA_DESIGN: usize = 20;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("theta_design_size = {0} below the minimum of {MIN_THETA_DESIGN}")]
    ThetaDesignTooSmall(usize),
    #[error("need at least {needed} validation cases for the discrepancy model, got {got}")]
    TooFewValidation { needed: usize, got: usize },
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("forward model failed at case {case_id}, theta {theta:?}: {message}")]
    Runner { case_id: u32, theta: [f64; N_PARAMS], message: String },
    #[error("calibration and discrepancy training sets share boundary conditions {0:?}")]
    Overlap([f64; N_BOUNDARY]),
    #[error("code emulator expects {expected} inputs, got {got}")]
    EmulatorShape { expected: usize, got: usize },
    #[error("mode with-discrepancy needs a discrepancy model")]
    MissingDiscrepancy,
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("need at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("surrogate prediction failed: {0}")]
    Gp(#[from] GpError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CalibrationMode {
    WithDiscrepancy,
    NoDiscrepancy,
}

impl CalibrationMode {
    pub const ALL: [Self; 2] = [Self::WithDiscrepancy, Self::NoDiscrepancy];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::WithDiscrepancy => "with_discrepancy",
            Self::NoDiscrepancy => "no_discrepancy",
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "with_discrepancy" => Ok(Self::WithDiscrepancy),
            "no_discrepancy" => Ok(Self::NoDiscrepancy),
            other => Err(format!("unknown mode {other:?} (expected with_discrepancy or no_discrepancy)")),
        }
    }
}

/// Independent uniform prior on a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub support: [(f64, f64); N_PARAMS],
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { support: [(0.05, 5.0); N_PARAMS] }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        for (k, &(lo, hi)) in self.support.iter().enumerate() {
            if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
                return Err(CalibrationError::Prior(format!("parameter {k}: need 0 <= lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == N_PARAMS && theta.iter().zip(&self.support).all(|(&t, &(lo, hi))| t >= lo && t <= hi)
    }

    /// Log density inside the support.
    pub fn log_density(&self) -> f64 {
        -self.support.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>()
    }
}

/// Discrepancy predictions `(mean, variance)` at a boundary condition.
pub trait DiscrepancyModel: Sync {
    fn predict(&self, x: &BoundaryConditions) -> Result<([f64; N_LOCATIONS], [f64; N_LOCATIONS]), GpError>;
}

impl DiscrepancyModel for GpModel<f64> {
    fn predict(&self, x: &BoundaryConditions) -> Result<([f64; N_LOCATIONS], [f64; N_LOCATIONS]), GpError> {
        let p = self.predict_one(&x.to_array())?;
        if p.mean.len() != N_LOCATIONS {
            return Err(GpError::DimensionMismatch { expected: N_LOCATIONS, got: p.mean.len() });
        }
        Ok((std::array::from_fn(|j| p.mean[j]), std::array::from_fn(|j| p.variance[j])))
    }
}

/// Predicts zero discrepancy with zero variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDiscrepancy;

impl DiscrepancyModel for ZeroDiscrepancy {
    fn predict(&self, _: &BoundaryConditions) -> Result<([f64; N_LOCATIONS], [f64; N_LOCATIONS]), GpError> {
        Ok(([0.0; N_LOCATIONS], [0.0; N_LOCATIONS]))
    }
}

/// Code emulator plus optional discrepancy model, with the boundary
/// conditions each was trained on. The two sets never intersect.
#[derive(Debug, Clone)]
pub struct SurrogatePair {
    gp_cc: GpModel<f64>,
    gp_md: Option<GpModel<f64>>,
    cc_x: Vec<[f64; N_BOUNDARY]>,
    md_x: Vec<[f64; N_BOUNDARY]>,
}

impl SurrogatePair {
    pub fn new(
        gp_cc: GpModel<f64>,
        cc_x: Vec<[f64; N_BOUNDARY]>,
        gp_md: Option<(GpModel<f64>, Vec<[f64; N_BOUNDARY]>)>,
    ) -> Result<Self, CalibrationError> {
        if gp_cc.n_inputs() != N_BOUNDARY + N_PARAMS || gp_cc.n_outputs() != N_LOCATIONS {
            return Err(CalibrationError::EmulatorShape { expected: N_BOUNDARY + N_PARAMS, got: gp_cc.n_inputs() });
        }
        let (gp_md, md_x) = match gp_md {
            Some((m, x)) => {
                if m.n_inputs() != N_BOUNDARY || m.n_outputs() != N_LOCATIONS {
                    return Err(CalibrationError::EmulatorShape { expected: N_BOUNDARY, got: m.n_inputs() });
                }
                (Some(m), x)
            }
            None => (None, Vec::new()),
        };
        for a in &cc_x {
            if md_x.iter().any(|b| a == b) {
                return Err(CalibrationError::Overlap(*a));
            }
        }
        Ok(Self { gp_cc, gp_md, cc_x, md_x })
    }

    pub fn gp_cc(&self) -> &GpModel<f64> {
        &self.gp_cc
    }

    pub fn gp_md(&self) -> Option<&GpModel<f64>> {
        self.gp_md.as_ref()
    }

    pub fn cc_boundary_conditions(&self) -> &[[f64; N_BOUNDARY]] {
        &self.cc_x
    }

    pub fn md_boundary_conditions(&self) -> &[[f64; N_BOUNDARY]] {
        &self.md_x
    }
}

fn run_model(
    runner: &dyn ForwardModel,
    case: &ExperimentCase,
    theta: &ParameterVector,
) -> Result<[f64; N_LOCATIONS], CalibrationError> {
    let y = runner.evaluate(&case.x, theta).map_err(|e| CalibrationError::Runner {
        case_id: case.case_id,
        theta: theta.0,
        message: e.0.clone(),
    })?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::Runner { case_id: case.case_id, theta: theta.0, message: "non-finite output".into() });
    }
    Ok(y)
}

/// Training table for the code emulator: for each calibration case,
/// `theta_design_size` LHS draws over the prior box, rows `x ⊕ θ`.
pub fn gp_cc_training_data(
    calibration: &[ExperimentCase],
    runner: &dyn ForwardModel,
    theta_design_size: usize,
    prior: &PriorSpec,
    seed: u64,
) -> Result<(Matrix<f64>, Matrix<f64>), CalibrationError> {
    if theta_design_size < MIN_THETA_DESIGN {
        return Err(CalibrationError::ThetaDesignTooSmall(theta_design_size));
    }
    if calibration.is_empty() {
        return Err(CalibrationError::EmptyCalibration);
    }
    prior.validate()?;
    let per_case: Vec<Result<Vec<(Vec<f64>, [f64; N_LOCATIONS])>, CalibrationError>> = calibration
        .par_iter()
        .map(|case| {
            let design = lhs_sample(theta_design_size, &prior.support, derive_seed(seed, u64::from(case.case_id)))
                .map_err(|e| CalibrationError::Prior(e.to_string()))?;
            design
                .points
                .iter_rows()
                .map(|t| {
                    let theta = ParameterVector::from_slice(t).expect("four parameters");
                    let y = run_model(runner, case, &theta)?;
                    let mut row = case.x.to_array().to_vec();
                    row.extend_from_slice(t);
                    Ok((row, y))
                })
                .collect()
        })
        .collect();
    let mut xs = Vec::with_capacity(calibration.len() * theta_design_size * (N_BOUNDARY + N_PARAMS));
    let mut ys = Vec::with_capacity(calibration.len() * theta_design_size * N_LOCATIONS);
    for rows in per_case {
        for (x, y) in rows? {
            xs.extend(x);
            ys.extend(y);
        }
    }
    let n = ys.len() / N_LOCATIONS;
    Ok((
        Matrix::from_vec(n, N_BOUNDARY + N_PARAMS, xs).expect("shape"),
        Matrix::from_vec(n, N_LOCATIONS, ys).expect("shape"),
    ))
}

/// Fits GP_CC on the calibration cases (see [`gp_cc_training_data`]).
pub fn build_gp_cc(
    partition: &Partition,
    cases: &[ExperimentCase],
    runner: &dyn ForwardModel,
    theta_design_size: usize,
    prior: &PriorSpec,
    fit: &FitOptions,
    seed: u64,
) -> Result<GpModel<f64>, CalibrationError> {
    let calibration = partition.calibration_cases(cases);
    let (x, y) = gp_cc_training_data(&calibration, runner, theta_design_size, prior, seed)?;
    log::info!("fitting code emulator on {} rows", x.rows());
    Ok(GpModel::fit(&x, &y, fit)?)
}

/// Fits GP_MD on validation-case residuals `y_exp - runner(x, theta_nominal)`.
pub fn build_gp_md(
    partition: &Partition,
    cases: &[ExperimentCase],
    runner: &dyn ForwardModel,
    theta_nominal: &ParameterVector,
    fit: &FitOptions,
) -> Result<GpModel<f64>, CalibrationError> {
    let validation = partition.validation_cases(cases);
    if validation.len() < N_BOUNDARY + 1 {
        return Err(CalibrationError::TooFewValidation { needed: N_BOUNDARY + 1, got: validation.len() });
    }
    let mut xs = Vec::with_capacity(validation.len() * N_BOUNDARY);
    let mut rs = Vec::with_capacity(validation.len() * N_LOCATIONS);
    for case in &validation {
        let y = run_model(runner, case, theta_nominal)?;
        xs.extend(case.x.to_array());
        rs.extend(case.y_exp.to_array().iter().zip(y).map(|(e, m)| e - m));
    }
    let n = validation.len();
    let x = Matrix::from_vec(n, N_BOUNDARY, xs).expect("shape");
    let r = Matrix::from_vec(n, N_LOCATIONS, rs).expect("shape");
    log::info!("fitting discrepancy model on {n} validation residuals");
    Ok(GpModel::fit(&x, &r, fit)?)
}

/// Builds GP_CC and, when `with_discrepancy`, GP_MD.
#[allow(clippy::too_many_arguments)]
pub fn build_surrogates(
    partition: &Partition,
    cases: &[ExperimentCase],
    runner: &dyn ForwardModel,
    theta_design_size: usize,
    prior: &PriorSpec,
    fit: &FitOptions,
    seed: u64,
    with_discrepancy: bool,
) -> Result<SurrogatePair, CalibrationError> {
    let gp_cc = build_gp_cc(partition, cases, runner, theta_design_size, prior, fit, seed)?;
    let cc_x = partition.calibration_cases(cases).iter().map(|c| c.x.to_array()).collect();
    let gp_md = if with_discrepancy {
        let md_fit = FitOptions { seed: derive_seed(fit.seed, 1), ..fit.clone() };
        let md = build_gp_md(partition, cases, runner, &ParameterVector::NOMINAL, &md_fit)?;
        let md_x = partition.validation_cases(cases).iter().map(|c| c.x.to_array()).collect();
        Some((md, md_x))
    } else {
        None
    };
    SurrogatePair::new(gp_cc, cc_x, gp_md)
}

/// How the emulator's own uncertainty enters the likelihood variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodeVariance {
    /// GP_CC predictive variance at each proposed θ. Exact but `O(n²)` per
    /// case and output.
    Predictive,
    /// Per case and output, the mean GP_CC predictive variance over an LHS
    /// of `n_theta` points in the prior box, held fixed during sampling.
    Averaged { n_theta: usize, seed: u64 },
    /// Emulator treated as exact.
    Zero,
}

/// Gaussian log density of residual `r` with variance `v`.
pub fn gaussian_log_density(r: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + r * r / v)
}

/// Precomputed per-observation variance terms of the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodCovariance {
    pub sigma2_exp: Vec<f64>,
    pub sigma2_delta: Vec<[f64; N_LOCATIONS]>,
    /// Empty under [`CodeVariance::Predictive`].
    pub sigma2_code: Vec<[f64; N_LOCATIONS]>,
}

/// Emulator mean for the GP_CC, using that the squared-exponential kernel
/// factors over the boundary and parameter blocks: the boundary part is
/// fixed per calibration case, so each evaluation costs `O(n)` per output.
#[derive(Debug, Clone)]
struct FastMean {
    theta_offset: [f64; N_PARAMS],
    theta_scale: [f64; N_PARAMS],
    /// standardized θ columns of the training table, row-major
    theta_train: Vec<f64>,
    outputs: Vec<FastOutput>,
}

#[derive(Debug, Clone)]
struct FastOutput {
    inv_ls: [f64; N_PARAMS],
    y_offset: f64,
    y_scale: f64,
    /// per case: `alpha_r * s2 * k_x(x_i, x_r)`
    weights: Vec<Vec<f64>>,
}

impl FastMean {
    fn new(gp: &GpModel<f64>, xs: &[[f64; N_BOUNDARY]]) -> Self {
        let s = gp.scaling();
        let train = gp.training_inputs();
        let n = gp.n_train();
        let mut theta_train = Vec::with_capacity(n * N_PARAMS);
        for r in 0..n {
            theta_train.extend_from_slice(&train.row(r)[N_BOUNDARY..]);
        }
        let theta_offset = std::array::from_fn(|k| s.x_offset[N_BOUNDARY + k]);
        let theta_scale = std::array::from_fn(|k| s.x_scale[N_BOUNDARY + k]);
        let outputs = (0..gp.n_outputs())
            .map(|j| {
                let om = gp.output(j);
                let k = &om.kernel;
                let alpha = om.alpha();
                let weights = xs
                    .iter()
                    .map(|x| {
                        let q: Vec<f64> = (0..N_BOUNDARY).map(|c| (x[c] - s.x_offset[c]) / s.x_scale[c]).collect();
                        (0..n)
                            .map(|r| {
                                let row = &train.row(r)[..N_BOUNDARY];
                                let mut r2 = 0.0;
                                for c in 0..N_BOUNDARY {
                                    let u = (q[c] - row[c]) / k.lengthscales[c];
                                    r2 += u * u;
                                }
                                alpha[r] * k.signal_variance * (-0.5 * r2).exp()
                            })
                            .collect()
                    })
                    .collect();
                FastOutput {
                    inv_ls: std::array::from_fn(|c| 1.0 / k.lengthscales[N_BOUNDARY + c]),
                    y_offset: s.y_offset[j],
                    y_scale: s.y_scale[j],
                    weights,
                }
            })
            .collect();
        Self { theta_offset, theta_scale, theta_train, outputs }
    }

    /// `out[i][j]` = emulator mean at case `i`, output `j`.
    fn means(&self, theta: &[f64], scratch: &mut Vec<f64>, out: &mut [[f64; N_LOCATIONS]]) {
        let q: [f64; N_PARAMS] = std::array::from_fn(|k| (theta[k] - self.theta_offset[k]) / self.theta_scale[k]);
        let n = self.theta_train.len() / N_PARAMS;
        scratch.resize(n, 0.0);
        for (j, o) in self.outputs.iter().enumerate() {
            for (r, kt) in scratch.iter_mut().enumerate() {
                let row = &self.theta_train[r * N_PARAMS..(r + 1) * N_PARAMS];
                let mut r2 = 0.0;
                for c in 0..N_PARAMS {
                    let u = (q[c] - row[c]) * o.inv_ls[c];
                    r2 += u * u;
                }
                *kt = (-0.5 * r2).exp();
            }
            for (i, w) in o.weights.iter().enumerate() {
                out[i][j] = o.y_offset + o.y_scale * crate::linalg::dot(w, scratch);
            }
        }
    }
}

/// The log posterior over θ for one mode, with everything that does not
/// depend on θ precomputed. Safe to share across chains.
#[derive(Debug, Clone)]
pub struct LogPosterior<'a> {
    gp_cc: &'a GpModel<f64>,
    prior: PriorSpec,
    xs: Vec<[f64; N_BOUNDARY]>,
    y: Vec<[f64; N_LOCATIONS]>,
    delta: Vec<[f64; N_LOCATIONS]>,
    covariance: LikelihoodCovariance,
    /// `sigma2_exp + sigma2_delta (+ sigma2_code when fixed)`
    base_variance: Vec<[f64; N_LOCATIONS]>,
    predictive: bool,
    fast: FastMean,
}

impl<'a> LogPosterior<'a> {
    pub fn new(
        gp_cc: &'a GpModel<f64>,
        discrepancy: Option<&dyn DiscrepancyModel>,
        calibration: &[ExperimentCase],
        mode: CalibrationMode,
        prior: PriorSpec,
        code_variance: CodeVariance,
    ) -> Result<Self, CalibrationError> {
        prior.validate()?;
        if calibration.is_empty() {
            return Err(CalibrationError::EmptyCalibration);
        }
        if gp_cc.n_inputs() != N_BOUNDARY + N_PARAMS || gp_cc.n_outputs() != N_LOCATIONS {
            return Err(CalibrationError::EmulatorShape { expected: N_BOUNDARY + N_PARAMS, got: gp_cc.n_inputs() });
        }
        let xs: Vec<[f64; N_BOUNDARY]> = calibration.iter().map(|c| c.x.to_array()).collect();
        let y = calibration.iter().map(|c| c.y_exp.to_array()).collect();
        let sigma2_exp: Vec<f64> = calibration.iter().map(|c| c.meas.sigma_exp * c.meas.sigma_exp).collect();
        let (delta, sigma2_delta): (Vec<_>, Vec<_>) = match mode {
            CalibrationMode::NoDiscrepancy => (vec![[0.0; N_LOCATIONS]; xs.len()], vec![[0.0; N_LOCATIONS]; xs.len()]),
            CalibrationMode::WithDiscrepancy => {
                let md = discrepancy.ok_or(CalibrationError::MissingDiscrepancy)?;
                calibration.iter().map(|c| md.predict(&c.x)).collect::<Result<Vec<_>, _>>()?.into_iter().unzip()
            }
        };
        let sigma2_code = match code_variance {
            CodeVariance::Predictive => Vec::new(),
            CodeVariance::Zero => vec![[0.0; N_LOCATIONS]; xs.len()],
            CodeVariance::Averaged { n_theta, seed } => averaged_code_variance(gp_cc, &xs, &prior, n_theta, seed)?,
        };
        let predictive = matches!(code_variance, CodeVariance::Predictive);
        let base_variance = (0..xs.len())
            .map(|i| {
                std::array::from_fn(|j| {
                    let code = if predictive { 0.0 } else { sigma2_code[i][j] };
                    sigma2_exp[i] + sigma2_delta[i][j] + code
                })
            })
            .collect();
        let fast = FastMean::new(gp_cc, &xs);
        Ok(Self {
            gp_cc,
            prior,
            xs,
            y,
            delta,
            covariance: LikelihoodCovariance { sigma2_exp, sigma2_delta, sigma2_code },
            base_variance,
            predictive,
            fast,
        })
    }

    pub fn covariance(&self) -> &LikelihoodCovariance {
        &self.covariance
    }

    /// Discrepancy means at the calibration cases.
    pub fn discrepancy(&self) -> &[[f64; N_LOCATIONS]] {
        &self.delta
    }

    /// Adds `extra` to every observation variance.
    pub fn with_extra_variance(mut self, extra: f64) -> Self {
        for v in &mut self.base_variance {
            for x in v.iter_mut() {
                *x += extra;
            }
        }
        self
    }

    /// `-inf` outside the prior support.
    pub fn evaluate(&self, theta: &[f64]) -> Result<f64, CalibrationError> {
        if !self.prior.contains(theta) {
            return Ok(f64::NEG_INFINITY);
        }
        let mut ll = 0.0;
        if self.predictive {
            for (i, x) in self.xs.iter().enumerate() {
                let mut point = x.to_vec();
                point.extend_from_slice(theta);
                let p = self.gp_cc.predict_one(&point)?;
                for j in 0..N_LOCATIONS {
                    let r = self.y[i][j] - p.mean[j] - self.delta[i][j];
                    ll += gaussian_log_density(r, self.base_variance[i][j] + p.variance[j]);
                }
            }
        } else {
            let mut means = vec![[0.0; N_LOCATIONS]; self.xs.len()];
            let mut scratch = Vec::new();
            self.fast.means(theta, &mut scratch, &mut means);
            for (i, m) in means.iter().enumerate() {
                for j in 0..N_LOCATIONS {
                    let r = self.y[i][j] - m[j] - self.delta[i][j];
                    ll += gaussian_log_density(r, self.base_variance[i][j]);
                }
            }
        }
        Ok(ll + self.prior.log_density())
    }

    /// Emulator means at every calibration case, through the general
    /// predictor rather than the precomputed path.
    pub fn emulator_means(&self, theta: &[f64]) -> Result<Vec<[f64; N_LOCATIONS]>, CalibrationError> {
        self.xs
            .iter()
            .map(|x| {
                let mut point = x.to_vec();
                point.extend_from_slice(theta);
                let m = self.gp_cc.predict_mean(&point)?;
                Ok(std::array::from_fn(|j| m[j]))
            })
            .collect()
    }

    #[cfg(test)]
    fn fast_means(&self, theta: &[f64]) -> Vec<[f64; N_LOCATIONS]> {
        let mut means = vec![[0.0; N_LOCATIONS]; self.xs.len()];
        self.fast.means(theta, &mut Vec::new(), &mut means);
        means
    }
}

fn averaged_code_variance(
    gp: &GpModel<f64>,
    xs: &[[f64; N_BOUNDARY]],
    prior: &PriorSpec,
    n_theta: usize,
    seed: u64,
) -> Result<Vec<[f64; N_LOCATIONS]>, CalibrationError> {
    let design = lhs_sample(n_theta.max(1), &prior.support, seed).map_err(|e| CalibrationError::Prior(e.to_string()))?;
    xs.par_iter()
        .map(|x| {
            let mut acc = [0.0; N_LOCATIONS];
            for t in design.points.iter_rows() {
                let mut point = x.to_vec();
                point.extend_from_slice(t);
                let p = gp.predict_one(&point)?;
                for j in 0..N_LOCATIONS {
                    acc[j] += p.variance[j];
                }
            }
            Ok(acc.map(|v| v / design.n() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub mean: f64,
    pub std: f64,
    pub p2_5: f64,
    pub p50: f64,
    pub p97_5: f64,
}

/// Pooled post-burn-in summary across chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub parameters: Vec<ParameterSummary>,
    pub correlation: Matrix<f64>,
}

impl PosteriorSummary {
    pub fn from_chains(chains: &[PosteriorChain<f64>]) -> Self {
        let d = chains.first().map_or(0, |c| c.dim());
        let cols: Vec<Vec<f64>> = (0..d).map(|k| chains.iter().flat_map(|c| c.retained_column(k)).collect()).collect();
        let parameters = cols
            .iter()
            .map(|col| {
                let mut sorted = col.clone();
                sort_floats(&mut sorted);
                ParameterSummary {
                    mean: mean(col),
                    std: variance(col, 1).sqrt(),
                    p2_5: quantile_sorted(&sorted, 0.025),
                    p50: quantile_sorted(&sorted, 0.5),
                    p97_5: quantile_sorted(&sorted, 0.975),
                }
            })
            .collect::<Vec<_>>();
        let mut correlation = Matrix::identity(d);
        for a in 0..d {
            for b in 0..a {
                let (ma, mb) = (parameters[a].mean, parameters[b].mean);
                let dev: Vec<f64> = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - ma) * (y - mb)).collect();
                let cov = crate::scalar::pairwise_sum(&dev) / (dev.len() as f64 - 1.0);
                let r = cov / (parameters[a].std * parameters[b].std);
                correlation[(a, b)] = r;
                correlation[(b, a)] = r;
            }
        }
        Self { parameters, correlation }
    }

    /// CSV `parameter,mean,std,p2.5,p50,p97.5`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CalibrationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "mean", "std", "p2.5", "p50", "p97.5"])?;
        for (name, p) in PARAMETER_NAMES.iter().zip(&self.parameters) {
            w.write_record([
                name.to_string(),
                p.mean.to_string(),
                p.std.to_string(),
                p.p2_5.to_string(),
                p.p50.to_string(),
                p.p97_5.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Square CSV with a `parameter` column and one column per parameter.
    pub fn write_correlation_csv<W: Write>(&self, out: W) -> Result<(), CalibrationError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["parameter".to_string()];
        header.extend(PARAMETER_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (a, name) in PARAMETER_NAMES.iter().enumerate() {
            let mut rec = vec![name.to_string()];
            rec.extend(self.correlation.row(a).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SamplerSettings {
    pub n_samples: usize,
    pub n_burn: usize,
    pub chains: usize,
    pub seed: u64,
    pub code_variance: CodeVariance,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { n_samples: 20_000, n_burn: 4_000, chains: 4, seed: 0, code_variance: CodeVariance::Averaged { n_theta: 16, seed: 0 } }
    }
}

/// Proposal start: nominal θ, diagonal shape `((hi - lo) / 20)²`.
pub fn default_mcmc_config(prior: &PriorSpec, settings: &SamplerSettings) -> McmcConfig<f64> {
    let mut cfg = McmcConfig::new(ParameterVector::NOMINAL.0.to_vec(), settings.seed);
    cfg.n_samples = settings.n_samples;
    cfg.n_burn = settings.n_burn;
    let diag: Vec<f64> = prior.support.iter().map(|(lo, hi)| ((hi - lo) / 20.0).powi(2)).collect();
    cfg.initial_proposal_cov = Matrix::from_diag(&diag);
    cfg.support = Some(prior.support.to_vec());
    cfg
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub mode: CalibrationMode,
    pub chains: Vec<PosteriorChain<f64>>,
    pub diagnostics: Diagnostics,
    pub summary: PosteriorSummary,
    pub covariance: LikelihoodCovariance,
}

impl CalibrationOutcome {
    pub fn converged(&self) -> bool {
        self.diagnostics.failures(DEFAULT_RHAT_MAX).is_empty()
    }

    /// Every retained draw from every chain, chain by chain.
    pub fn pooled_draws(&self) -> Vec<ParameterVector> {
        self.chains
            .iter()
            .flat_map(|c| c.retained().map(|r| ParameterVector::from_slice(r).expect("four parameters")))
            .collect()
    }
}

/// Samples the posterior of one mode against fixed surrogates.
pub fn calibrate(
    pair: &SurrogatePair,
    calibration: &[ExperimentCase],
    mode: CalibrationMode,
    prior: &PriorSpec,
    settings: &SamplerSettings,
) -> Result<CalibrationOutcome, CalibrationError> {
    if settings.chains < 2 {
        return Err(CalibrationError::TooFewChains(settings.chains));
    }
    let md = pair.gp_md().map(|m| m as &dyn DiscrepancyModel);
    let lp = LogPosterior::new(pair.gp_cc(), md, calibration, mode, *prior, settings.code_variance)?;
    let cfg = default_mcmc_config(prior, settings);
    cfg.validate()?;
    let failure = std::sync::Mutex::new(None);
    let target = |t: &[f64]| match lp.evaluate(t) {
        Ok(v) => v,
        Err(e) => {
            failure.lock().expect("poisoned").get_or_insert(e);
            f64::NAN
        }
    };
    let chains = run_chains(target, &cfg, settings.chains)?;
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    let diagnostics = diagnostics(&chains)?;
    for f in diagnostics.failures(DEFAULT_RHAT_MAX) {
        log::warn!("{mode}: {f}");
    }
    let summary = PosteriorSummary::from_chains(&chains);
    Ok(CalibrationOutcome { mode, chains, diagnostics, summary, covariance: lp.covariance().clone() })
}
