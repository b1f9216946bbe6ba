//! Synthetic void-fraction benchmark: a smooth parametric code model, a
//! known model discrepancy, and a dataset generator using the same schema
//! as real bundle measurements.
//!
//! Heat-transfer-like factors (`theta[0]`, `theta[1]`) raise the boiling
//! drive `c`; drag-like factors (`theta[2]`, `theta[3]`) widen the
//! saturation scale `d`. The discrepancy depends on the boundary
//! conditions only and is largest at the upper elevation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::domain::{
    partition_dataset, BoundaryConditions, DomainError, ExperimentCase, ForwardModel, MeasurementModel, ModelError,
    ParameterVector, VoidMeasurement, N_BOUNDARY, N_LOCATIONS,
};
use crate::rng::{derive_seed, seeded};
use crate::sampler::unit_lhs;

/// Measurement elevations as fractions of the heated length
/// (2216, 2699 and 3177 mm of 3658 mm).
pub const ELEVATIONS: [f64; N_LOCATIONS] = [0.606, 0.738, 0.868];

pub const THETA_TRUE: ParameterVector = ParameterVector([1.2, 0.9, 1.15, 0.85]);

const DESIGN_BOX: (f64, f64) = (0.05, 0.95);
const INFORMATIVE_FLOOR: f64 = 0.01;
const MAX_REDRAWS: usize = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("could not draw an informative case for slot {0} after {MAX_REDRAWS} attempts")]
    Uninformative(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub theta_true: ParameterVector,
    pub discrepancy_on: bool,
    pub sigma_exp: f64,
    pub n_cases: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { theta_true: THETA_TRUE, discrepancy_on: true, sigma_exp: 0.04, n_cases: 74, seed: 2024 }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma_exp >= 0.0) || !self.sigma_exp.is_finite() {
            return Err(SynthError::Config(format!("sigma_exp = {} must be >= 0", self.sigma_exp)));
        }
        if self.n_cases < 8 {
            return Err(SynthError::Config(format!("n_cases = {} must be >= 8", self.n_cases)));
        }
        if self.theta_true.0.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(SynthError::Config("theta_true must be positive".into()));
        }
        Ok(())
    }

    /// Ground-truth sidecar (`key = value` lines). For tests only; the
    /// calibration pipeline never reads it.
    pub fn sidecar(&self) -> String {
        let theta: Vec<String> = self.theta_true.0.iter().map(f64::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "theta_true = {}", theta.join(","));
        let _ = writeln!(s, "discrepancy_on = {}", self.discrepancy_on);
        let _ = writeln!(s, "sigma_exp = {}", self.sigma_exp);
        let _ = writeln!(s, "n_cases = {}", self.n_cases);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Void fractions at the three elevations.
pub fn code_model(x: &BoundaryConditions, theta: &ParameterVector) -> [f64; N_LOCATIONS] {
    let (xp, xt, xg, xq) = (x.pressure, x.inlet_temperature, x.mass_flow, x.power);
    let t = theta.0;
    let subcooling = 0.35 * (1.0 - xt) * (0.5 + 0.5 * xp);
    let drive = xq * (1.2 - 0.7 * xg);
    let width = 0.08 + 0.12 * t[2] + 0.10 * t[3] * (1.2 - xp);
    ELEVATIONS.map(|z| {
        let c = 0.45 * t[0] * drive * z + 0.25 * t[1] * drive * z * z - subcooling;
        (c / width).tanh().max(0.0)
    })
}

/// Known discrepancy `0.06 z² x_power`.
pub fn true_discrepancy(x: &BoundaryConditions) -> [f64; N_LOCATIONS] {
    ELEVATIONS.map(|z| 0.06 * z * z * x.power)
}

/// [`code_model`] behind the [`ForwardModel`] interface.
#[derive(Debug, Clone, Copy, Default)]
pub struct SynthCodeModel;

impl ForwardModel for SynthCodeModel {
    fn evaluate(&self, x: &BoundaryConditions, theta: &ParameterVector) -> Result<[f64; N_LOCATIONS], ModelError> {
        Ok(code_model(x, theta))
    }

    fn name(&self) -> &str {
        "synthbench"
    }
}

fn true_response(config: &SynthConfig, x: &BoundaryConditions) -> [f64; N_LOCATIONS] {
    let mut y = code_model(x, &config.theta_true);
    if config.discrepancy_on {
        for (v, d) in y.iter_mut().zip(true_discrepancy(x)) {
            *v += d;
        }
    }
    y
}

/// Draws `n_cases` boundary conditions by LHS over `[0.05, 0.95]^4` and
/// simulates noisy, clamped measurements. Cases whose three true void
/// fractions are all below 0.01 are redrawn uniformly in the box.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<ExperimentCase>, SynthError> {
    config.validate()?;
    let n = config.n_cases;
    let unit = unit_lhs(n, N_BOUNDARY, derive_seed(config.seed, 0));
    let mut redraw_rng = seeded(derive_seed(config.seed, 1));
    let mut noise_rng = seeded(derive_seed(config.seed, 2));
    let (lo, hi) = DESIGN_BOX;
    let scale = |u: f64| lo + (hi - lo) * u;

    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = BoundaryConditions::from_array(std::array::from_fn(|k| scale(unit[i * N_BOUNDARY + k])));
        let mut truth = true_response(config, &x);
        let mut attempts = 0;
        while truth.iter().all(|v| *v < INFORMATIVE_FLOOR) {
            if attempts == MAX_REDRAWS {
                return Err(SynthError::Uninformative(i));
            }
            attempts += 1;
            x = BoundaryConditions::from_array(std::array::from_fn(|_| scale(redraw_rng.random::<f64>())));
            truth = true_response(config, &x);
        }
        let y = truth.map(|v| {
            let e: f64 = noise_rng.sample(StandardNormal);
            (v + config.sigma_exp * e).clamp(0.0, 1.0)
        });
        // sigma 0 is allowed for generation but not for a likelihood
        let sigma = if config.sigma_exp > 0.0 { config.sigma_exp } else { MeasurementModel::default().sigma_exp };
        cases.push(ExperimentCase {
            case_id: (i + 1) as u32,
            x,
            y_exp: VoidMeasurement::from_array(y),
            meas: MeasurementModel { sigma_exp: sigma },
        });
    }
    Ok(cases)
}

/// A calibration set of `n_cal` cases whose bounding box sits inside the
/// validation box: every per-coordinate extreme stays in validation, and
/// calibration cases are then picked greedily to be far apart.
pub fn default_partition(cases: &[ExperimentCase], n_cal: usize) -> Result<BTreeSet<u32>, DomainError> {
    let mut reserved = BTreeSet::new();
    for k in 0..N_BOUNDARY {
        let key = |c: &&ExperimentCase| (c.x.to_array()[k], c.case_id);
        let cmp = |a: &&ExperimentCase, b: &&ExperimentCase| key(a).partial_cmp(&key(b)).unwrap();
        if let Some(c) = cases.iter().min_by(cmp) {
            reserved.insert(c.case_id);
        }
        if let Some(c) = cases.iter().max_by(cmp) {
            reserved.insert(c.case_id);
        }
    }
    let mut pool: Vec<&ExperimentCase> = cases.iter().filter(|c| !reserved.contains(&c.case_id)).collect();
    pool.sort_by_key(|c| c.case_id);
    let dist2 = |a: &ExperimentCase, b: &ExperimentCase| -> f64 {
        a.x.to_array().iter().zip(b.x.to_array()).map(|(u, v)| (u - v) * (u - v)).sum()
    };
    let center = BoundaryConditions::from_array([0.5; N_BOUNDARY]);
    let mut chosen: Vec<&ExperimentCase> = Vec::new();
    if let Some(first) = pool.iter().min_by(|a, b| {
        let da: f64 = a.x.to_array().iter().zip(center.to_array()).map(|(u, v)| (u - v).powi(2)).sum();
        let db: f64 = b.x.to_array().iter().zip(center.to_array()).map(|(u, v)| (u - v).powi(2)).sum();
        da.partial_cmp(&db).unwrap()
    }) {
        chosen.push(first);
    }
    while chosen.len() < n_cal.min(pool.len()) {
        let next = pool
            .iter()
            .filter(|c| !chosen.iter().any(|s| s.case_id == c.case_id))
            .max_by(|a, b| {
                let da = chosen.iter().map(|s| dist2(a, s)).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|s| dist2(b, s)).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap().then(b.case_id.cmp(&a.case_id))
            })
            .copied();
        match next {
            Some(c) => chosen.push(c),
            None => break,
        }
    }
    let ids: BTreeSet<u32> = chosen.iter().map(|c| c.case_id).collect();
    partition_dataset(cases, &ids)?;
    Ok(ids)
}
