//! Forward propagation of posterior draws and held-out scoring.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{ExperimentCase, ForwardModel, ParameterVector, LOCATION_NAMES, N_LOCATIONS};
use crate::scalar::{mean, pairwise_sum, quantile_sorted, sort_floats, variance};

#[derive(Debug, Error)]
pub enum ForwardUqError {
    #[error("empty draw set")]
    EmptyDraws,
    #[error("asked for {requested} draws, only {available} available")]
    TooManyDraws { requested: usize, available: usize },
    #[error("forward model failed at case {case_id}: {message}")]
    Runner { case_id: u32, message: String },
    #[error("case ids are misaligned at position {index}: {left} vs {right}")]
    Misaligned { index: usize, left: u32, right: u32 },
    #[error("{0} prior predictions for {1} cases")]
    Length(usize, usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Monte Carlo summary of the propagated code response per case.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub case_ids: Vec<u32>,
    pub mean: Vec<[f64; N_LOCATIONS]>,
    pub std: Vec<[f64; N_LOCATIONS]>,
    pub p2_5: Vec<[f64; N_LOCATIONS]>,
    pub p97_5: Vec<[f64; N_LOCATIONS]>,
    pub n_used: usize,
}

/// `n_use` indices evenly spread over `0..available`, first index 0.
pub fn thin_indices(available: usize, n_use: usize) -> Vec<usize> {
    (0..n_use).map(|k| k * available / n_use).collect()
}

/// Runs `runner` at `n_use` evenly thinned draws for every case.
pub fn propagate(
    runner: &dyn ForwardModel,
    cases: &[ExperimentCase],
    draws: &[ParameterVector],
    n_use: usize,
) -> Result<PredictiveSummary, ForwardUqError> {
    if n_use == 0 || draws.is_empty() {
        return Err(ForwardUqError::EmptyDraws);
    }
    if n_use > draws.len() {
        return Err(ForwardUqError::TooManyDraws { requested: n_use, available: draws.len() });
    }
    let picked: Vec<&ParameterVector> = thin_indices(draws.len(), n_use).into_iter().map(|i| &draws[i]).collect();
    type CaseStats = ([f64; N_LOCATIONS], [f64; N_LOCATIONS], [f64; N_LOCATIONS], [f64; N_LOCATIONS]);
    let per_case: Vec<Result<CaseStats, ForwardUqError>> = cases
        .par_iter()
        .map(|case| {
            let mut cols: [Vec<f64>; N_LOCATIONS] = std::array::from_fn(|_| Vec::with_capacity(n_use));
            for theta in &picked {
                let y = runner
                    .evaluate(&case.x, theta)
                    .map_err(|e| ForwardUqError::Runner { case_id: case.case_id, message: e.0 })?;
                for j in 0..N_LOCATIONS {
                    cols[j].push(y[j]);
                }
            }
            let mut m = [0.0; N_LOCATIONS];
            let mut s = [0.0; N_LOCATIONS];
            let mut lo = [0.0; N_LOCATIONS];
            let mut hi = [0.0; N_LOCATIONS];
            for j in 0..N_LOCATIONS {
                m[j] = mean(&cols[j]);
                s[j] = if n_use > 1 { variance(&cols[j], 1).sqrt() } else { 0.0 };
                sort_floats(&mut cols[j]);
                lo[j] = quantile_sorted(&cols[j], 0.025);
                hi[j] = quantile_sorted(&cols[j], 0.975);
            }
            Ok((m, s, lo, hi))
        })
        .collect();
    let mut out = PredictiveSummary {
        case_ids: cases.iter().map(|c| c.case_id).collect(),
        mean: Vec::with_capacity(cases.len()),
        std: Vec::with_capacity(cases.len()),
        p2_5: Vec::with_capacity(cases.len()),
        p97_5: Vec::with_capacity(cases.len()),
        n_used: n_use,
    };
    for r in per_case {
        let (m, s, lo, hi) = r?;
        out.mean.push(m);
        out.std.push(s);
        out.p2_5.push(lo);
        out.p97_5.push(hi);
    }
    Ok(out)
}

/// Root mean square of `residuals`.
pub fn rmse(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let sq: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    (pairwise_sum(&sq) / residuals.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub case_id: u32,
    pub location: usize,
    pub y_exp: f64,
    pub y_prior: f64,
    pub y_post_mean: f64,
    pub y_post_std: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    /// Inside `[p2.5 - 2 sigma_exp, p97.5 + 2 sigma_exp]`.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rmse_prior: f64,
    pub rmse_posterior: f64,
    pub rmse_prior_by_location: [f64; N_LOCATIONS],
    pub rmse_posterior_by_location: [f64; N_LOCATIONS],
    /// Fraction inside the band widened by `±2 sigma_exp`.
    pub coverage_95: f64,
    /// Fraction inside the model-only `[p2.5, p97.5]` band.
    pub coverage_95_model: f64,
    pub rows: Vec<ValidationRow>,
}

/// Scores posterior-mean and prior predictions against held-out cases.
pub fn rmse_report(
    summary: &PredictiveSummary,
    prior_outputs: &[[f64; N_LOCATIONS]],
    cases: &[ExperimentCase],
) -> Result<ValidationReport, ForwardUqError> {
    if prior_outputs.len() != cases.len() || summary.case_ids.len() != cases.len() {
        return Err(ForwardUqError::Length(prior_outputs.len().min(summary.case_ids.len()), cases.len()));
    }
    for (index, (a, c)) in summary.case_ids.iter().zip(cases).enumerate() {
        if *a != c.case_id {
            return Err(ForwardUqError::Misaligned { index, left: *a, right: c.case_id });
        }
    }
    let mut rows = Vec::with_capacity(cases.len() * N_LOCATIONS);
    let mut prior_res: [Vec<f64>; N_LOCATIONS] = Default::default();
    let mut post_res: [Vec<f64>; N_LOCATIONS] = Default::default();
    let mut covered = 0usize;
    let mut covered_model = 0usize;
    for (i, case) in cases.iter().enumerate() {
        let y = case.y_exp.to_array();
        let widen = 2.0 * case.meas.sigma_exp;
        for j in 0..N_LOCATIONS {
            let (lo, hi) = (summary.p2_5[i][j], summary.p97_5[i][j]);
            let inside = y[j] >= lo - widen && y[j] <= hi + widen;
            covered += usize::from(inside);
            covered_model += usize::from(y[j] >= lo && y[j] <= hi);
            prior_res[j].push(y[j] - prior_outputs[i][j]);
            post_res[j].push(y[j] - summary.mean[i][j]);
            rows.push(ValidationRow {
                case_id: case.case_id,
                location: j,
                y_exp: y[j],
                y_prior: prior_outputs[i][j],
                y_post_mean: summary.mean[i][j],
                y_post_std: summary.std[i][j],
                p2_5: lo,
                p97_5: hi,
                covered: inside,
            });
        }
    }
    let all = |r: &[Vec<f64>; N_LOCATIONS]| -> Vec<f64> { r.iter().flatten().copied().collect() };
    let n_obs = rows.len().max(1) as f64;
    Ok(ValidationReport {
        rmse_prior: rmse(&all(&prior_res)),
        rmse_posterior: rmse(&all(&post_res)),
        rmse_prior_by_location: std::array::from_fn(|j| rmse(&prior_res[j])),
        rmse_posterior_by_location: std::array::from_fn(|j| rmse(&post_res[j])),
        coverage_95: covered as f64 / n_obs,
        coverage_95_model: covered_model as f64 / n_obs,
        rows,
    })
}

impl ValidationReport {
    /// CSV `case_id,location,y_exp,y_prior,y_post_mean,y_post_std,p2.5,p97.5,covered`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ForwardUqError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["case_id", "location", "y_exp", "y_prior", "y_post_mean", "y_post_std", "p2.5", "p97.5", "covered"])?;
        for r in &self.rows {
            w.write_record([
                r.case_id.to_string(),
                LOCATION_NAMES[r.location].to_string(),
                r.y_exp.to_string(),
                r.y_prior.to_string(),
                r.y_post_mean.to_string(),
                r.y_post_std.to_string(),
                r.p2_5.to_string(),
                r.p97_5.to_string(),
                r.covered.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Fraction of case-location pairs where the posterior mean is closer
    /// to the measurement than the prior prediction.
    pub fn fraction_improved(&self) -> f64 {
        let better = self.rows.iter().filter(|r| (r.y_exp - r.y_post_mean).abs() < (r.y_exp - r.y_prior).abs()).count();
        better as f64 / self.rows.len().max(1) as f64
    }
}

/// Runner outputs at one θ for every case.
pub fn point_predictions(
    runner: &dyn ForwardModel,
    cases: &[ExperimentCase],
    theta: &ParameterVector,
) -> Result<Vec<[f64; N_LOCATIONS]>, ForwardUqError> {
    cases
        .iter()
        .map(|c| runner.evaluate(&c.x, theta).map_err(|e| ForwardUqError::Runner { case_id: c.case_id, message: e.0 }))
        .collect()
}
