//! Config-driven pipeline: ingest, partition, screening, Sobol indices,
//! surrogate building, calibration per mode, validation and exports.
//!
//! Every stage records a content hash of the inputs it depends on in
//! `manifest.txt`. A rerun into the same output directory skips stages
//! whose hash and artifacts are already present and refuses to continue
//! if a recorded hash disagrees with the current config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{
    build_gp_cc, build_gp_md, calibrate, CalibrationError, CalibrationMode, CodeVariance, DiscrepancyModel,
    PosteriorSummary, PriorSpec, SamplerSettings, SurrogatePair,
};
use crate::domain::{
    partition_dataset, read_dataset_csv, BoundaryConditions, DomainError, ExperimentCase, ForwardModel, IngestError, ModelError, ParameterVector,
    Partition, LOCATION_NAMES, N_LOCATIONS, N_PARAMS, PARAMETER_NAMES,
};
use crate::forward_uq::{point_predictions, propagate, rmse, rmse_report, ForwardUqError, ValidationReport};
use crate::gp::{FitOptions, GpError, GpModel};
use crate::mcmc::{Diagnostics, McmcError, PosteriorChain, DEFAULT_RHAT_MAX};
use crate::rng::derive_seed;
use crate::sensitivity::{oat_screen, sobol_indices, SensitivityError};
use crate::synthbench::SynthCodeModel;

pub const MANIFEST: &str = "manifest.txt";
pub const RUN_CONFIG: &str = "run.conf";
pub const DATASET_COPY: &str = "dataset.csv";
pub const GP_CC_FILE: &str = "surrogates/gp_cc.json";
pub const GP_MD_FILE: &str = "surrogates/gp_md.json";
pub const SCREENING_FILE: &str = "screening.csv";
pub const SOBOL_FILE: &str = "sobol.csv";
pub const VALIDATION_SUMMARY: &str = "validation_summary.txt";

const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("config line {line}: bad value for {key}: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("config: missing required key {0:?}")]
    Missing(&'static str),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("stage {stage}: config hash mismatch on resume (recorded {recorded}, current {current}); use a fresh output directory")]
    HashMismatch { stage: String, recorded: String, current: String },
    #[error("incomplete run directory {dir}: missing {missing}")]
    Incomplete { dir: PathBuf, missing: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

macro_rules! stage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for StageFailure {
            fn from(e: $t) -> Self {
                StageFailure(e.to_string())
            }
        }
    )*};
}

/// Error text of a stage before the stage name is attached.
#[derive(Debug)]
struct StageFailure(String);

stage_from!(
    CalibrationError,
    DomainError,
    IngestError,
    ForwardUqError,
    GpError,
    McmcError,
    SensitivityError,
    csv::Error,
    std::io::Error,
    String
);

fn in_stage<T>(stage: &'static str, r: Result<T, StageFailure>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage { stage, message: e.0 })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeVarianceSetting {
    Averaged,
    Predictive,
    Zero,
}

impl CodeVarianceSetting {
    fn as_str(&self) -> &'static str {
        match self {
            Self::Averaged => "averaged",
            Self::Predictive => "predictive",
            Self::Zero => "zero",
        }
    }
}

/// Flat `key = value` pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub calibration: BTreeSet<u32>,
    pub prior: PriorSpec,
    pub theta_design_size: usize,
    /// 0 skips the Sobol stage.
    pub sobol_n_base: usize,
    /// 0 skips the screening stage.
    pub screen_points: usize,
    pub screen_threshold: f64,
    pub n_samples: usize,
    pub n_burn: usize,
    pub chains: usize,
    pub seed: u64,
    pub modes: Vec<CalibrationMode>,
    pub out: PathBuf,
    pub model: String,
    pub export_thin: usize,
    pub n_propagate: usize,
    pub code_variance: CodeVarianceSetting,
    /// Score validation through the GP_CC mean instead of the forward
    /// model. Not a file key; validation is always recomputed.
    pub via_surrogate: bool,
}

const KEYS: [&str; 18] = [
    "dataset",
    "calibration",
    "prior_lo",
    "prior_hi",
    "theta_design_size",
    "sobol_n_base",
    "screen_points",
    "screen_threshold",
    "n_samples",
    "n_burn",
    "chains",
    "seed",
    "modes",
    "out",
    "model",
    "export_thin",
    "n_propagate",
    "code_variance",
];

fn parse_bounds(value: &str) -> Result<[f64; N_PARAMS], String> {
    let parts: Vec<f64> =
        value.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: {s:?}"))).collect::<Result<_, _>>()?;
    match parts.len() {
        1 => Ok([parts[0]; N_PARAMS]),
        N_PARAMS => Ok(std::array::from_fn(|k| parts[k])),
        n => Err(format!("expected 1 or {N_PARAMS} values, got {n}")),
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl PipelineConfig {
    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<&'static str, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: line_no, text: raw.to_string() })?;
            let k = k.trim();
            let key = *KEYS.iter().find(|&&known| known == k).ok_or_else(|| ConfigError::UnknownKey {
                line: line_no,
                key: k.to_string(),
            })?;
            if values.insert(key, (line_no, v.trim().to_string())).is_some() {
                return Err(ConfigError::Duplicate { line: line_no, key: k.to_string() });
            }
        }
        fn get<'a>(values: &'a BTreeMap<&'static str, (usize, String)>, key: &'static str) -> Option<(usize, &'a str)> {
            values.get(key).map(|(l, v)| (*l, v.as_str()))
        }
        fn parsed<T: std::str::FromStr>(
            values: &BTreeMap<&'static str, (usize, String)>,
            key: &'static str,
            default: Option<T>,
        ) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            match get(values, key) {
                Some((line, v)) => v.parse::<T>().map_err(|e| ConfigError::Value {
                    line,
                    key: key.to_string(),
                    message: e.to_string(),
                }),
                None => default.ok_or(ConfigError::Missing(key)),
            }
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let (_, dataset) = get(&values, "dataset").ok_or(ConfigError::Missing("dataset"))?;
        let (cal_line, cal) = get(&values, "calibration").ok_or(ConfigError::Missing("calibration"))?;
        let calibration = crate::domain::parse_id_list(cal).map_err(|e| ConfigError::Value {
            line: cal_line,
            key: "calibration".into(),
            message: e.to_string(),
        })?;
        let bounds = |key: &'static str, default: f64| -> Result<[f64; N_PARAMS], ConfigError> {
            match get(&values, key) {
                Some((line, v)) => parse_bounds(v).map_err(|message| ConfigError::Value { line, key: key.into(), message }),
                None => Ok([default; N_PARAMS]),
            }
        };
        let lo = bounds("prior_lo", 0.05)?;
        let hi = bounds("prior_hi", 5.0)?;
        let modes = match get(&values, "modes") {
            Some((line, v)) => v
                .split(',')
                .map(|s| s.parse::<CalibrationMode>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|message| ConfigError::Value { line, key: "modes".into(), message })?,
            None => CalibrationMode::ALL.to_vec(),
        };
        let code_variance = match get(&values, "code_variance") {
            None | Some((_, "averaged")) => CodeVarianceSetting::Averaged,
            Some((_, "predictive")) => CodeVarianceSetting::Predictive,
            Some((_, "zero")) => CodeVarianceSetting::Zero,
            Some((line, other)) => {
                return Err(ConfigError::Value {
                    line,
                    key: "code_variance".into(),
                    message: format!("{other:?} is not one of averaged, predictive, zero"),
                })
            }
        };
        let cfg = Self {
            dataset: resolve(dataset),
            calibration,
            prior: PriorSpec { support: std::array::from_fn(|k| (lo[k], hi[k])) },
            theta_design_size: parsed(&values, "theta_design_size", Some(100))?,
            sobol_n_base: parsed(&values, "sobol_n_base", Some(0))?,
            screen_points: parsed(&values, "screen_points", Some(50))?,
            screen_threshold: parsed(&values, "screen_threshold", Some(1e-3))?,
            n_samples: parsed(&values, "n_samples", Some(20_000))?,
            n_burn: parsed(&values, "n_burn", Some(4_000))?,
            chains: parsed(&values, "chains", Some(4))?,
            seed: parsed(&values, "seed", Some(0))?,
            modes,
            out: resolve(get(&values, "out").map_or("out", |(_, v)| v)),
            model: parsed(&values, "model", Some("synthbench".to_string()))?,
            export_thin: parsed(&values, "export_thin", Some(10))?,
            n_propagate: parsed(&values, "n_propagate", Some(1000))?,
            code_variance,
            via_surrogate: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    /// Checks every invariant that can be checked before any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_samples == 0 || self.n_burn >= self.n_samples {
            return bad(format!("n_burn ({}) must be below n_samples ({})", self.n_burn, self.n_samples));
        }
        if self.chains < 2 {
            return bad(format!("chains = {} but diagnostics need at least 2", self.chains));
        }
        if self.theta_design_size < crate::calibration::MIN_THETA_DESIGN {
            return bad(format!("theta_design_size = {} below {}", self.theta_design_size, crate::calibration::MIN_THETA_DESIGN));
        }
        if self.sobol_n_base != 0 && (self.sobol_n_base < 64 || !self.sobol_n_base.is_power_of_two()) {
            return bad(format!("sobol_n_base = {} must be 0 or a power of two >= 64", self.sobol_n_base));
        }
        if self.screen_points == 1 {
            return bad("screen_points must be 0 or >= 2".into());
        }
        if !(self.screen_threshold > 0.0) {
            return bad("screen_threshold must be > 0".into());
        }
        if self.export_thin == 0 || self.n_propagate == 0 {
            return bad("export_thin and n_propagate must be positive".into());
        }
        if self.n_propagate > (self.n_samples - self.n_burn) * self.chains {
            return bad(format!("n_propagate = {} exceeds the retained draws", self.n_propagate));
        }
        if self.modes.is_empty() {
            return bad("modes must not be empty".into());
        }
        let unique: BTreeSet<_> = self.modes.iter().collect();
        if unique.len() != self.modes.len() {
            return bad("modes listed twice".into());
        }
        if self.model != "synthbench" {
            return bad(format!("unknown model {:?} (only synthbench is built in)", self.model));
        }
        if self.calibration.is_empty() {
            return bad("calibration id list is empty".into());
        }
        self.prior.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.dataset.is_file() {
            return bad(format!("dataset {} does not exist", self.dataset.display()));
        }
        Ok(())
    }

    /// Canonical text of every setting except `out`, in fixed key order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        s.push_str(&self.canonical_settings());
        s
    }

    /// As [`Self::canonical`] without the dataset path, which is hashed by
    /// content instead so a moved dataset still resumes.
    fn canonical_settings(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "calibration = {}", join(&self.calibration));
        let _ = writeln!(s, "prior_lo = {}", join(self.prior.support.iter().map(|b| b.0)));
        let _ = writeln!(s, "prior_hi = {}", join(self.prior.support.iter().map(|b| b.1)));
        let _ = writeln!(s, "theta_design_size = {}", self.theta_design_size);
        let _ = writeln!(s, "sobol_n_base = {}", self.sobol_n_base);
        let _ = writeln!(s, "screen_points = {}", self.screen_points);
        let _ = writeln!(s, "screen_threshold = {}", self.screen_threshold);
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "n_burn = {}", self.n_burn);
        let _ = writeln!(s, "chains = {}", self.chains);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "modes = {}", join(&self.modes));
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "export_thin = {}", self.export_thin);
        let _ = writeln!(s, "n_propagate = {}", self.n_propagate);
        let _ = writeln!(s, "code_variance = {}", self.code_variance.as_str());
        s
    }

    fn sampler_settings(&self) -> SamplerSettings {
        let code_variance = match self.code_variance {
            CodeVarianceSetting::Averaged => CodeVariance::Averaged { n_theta: 16, seed: derive_seed(self.seed, 40) },
            CodeVarianceSetting::Predictive => CodeVariance::Predictive,
            CodeVarianceSetting::Zero => CodeVariance::Zero,
        };
        SamplerSettings {
            n_samples: self.n_samples,
            n_burn: self.n_burn,
            chains: self.chains,
            seed: derive_seed(self.seed, 30),
            code_variance,
        }
    }
}

/// How far [`run_pipeline`] goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Screen,
    Sobol,
    Calibrate,
    Validate,
    Export,
}

/// Stage hashes recorded in the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let entries = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Ok(Self { entries })
    }

    fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        write_atomic(&dir.join(MANIFEST), s.as_bytes())
    }

    /// `Ok(true)` when the stage is recorded with this hash and all its
    /// artifacts exist; an error when it is recorded with another hash.
    fn is_fresh(&self, stage: &str, hash: &str, dir: &Path, artifacts: &[PathBuf]) -> Result<bool, PipelineError> {
        match self.entries.get(stage) {
            None => Ok(false),
            Some(recorded) if recorded != hash => Err(PipelineError::HashMismatch {
                stage: stage.to_string(),
                recorded: recorded.clone(),
                current: hash.to_string(),
            }),
            Some(_) => Ok(artifacts.iter().all(|a| dir.join(a).is_file())),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), StageFailure>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), StageFailure>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf).map_err(|e| StageFailure(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub mode: CalibrationMode,
    pub converged: bool,
    pub diagnostics: Diagnostics,
    pub summary: PosteriorSummary,
    pub validation: Option<ValidationReport>,
    /// RMSE of posterior-mean code prediction plus GP_MD mean.
    pub rmse_code_plus_discrepancy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub config_hash: String,
    pub modes: Vec<ModeReport>,
    pub stages_reused: Vec<String>,
}

impl PipelineReport {
    /// True when every mode's diagnostics passed.
    pub fn converged(&self) -> bool {
        self.modes.iter().all(|m| m.converged)
    }

    pub fn mode(&self, mode: CalibrationMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn mode_dir(mode: CalibrationMode) -> PathBuf {
    PathBuf::from(mode.as_str())
}

fn chain_file(mode: CalibrationMode, k: usize) -> PathBuf {
    mode_dir(mode).join(format!("chain_{k}.csv"))
}

fn fit_options(seed: u64) -> FitOptions {
    FitOptions { seed, ..FitOptions::default() }
}

/// Reads a chain CSV written by [`PosteriorChain::write_csv`].
pub fn read_chain_csv(path: &Path, n_burn: usize) -> Result<PosteriorChain<f64>, PipelineError> {
    let fail = |m: String| PipelineError::Stage { stage: "calibrate", message: format!("{}: {m}", path.display()) };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let d = rdr.headers().map_err(|e| fail(e.to_string()))?.len().saturating_sub(3);
    let mut draws = Vec::new();
    let mut lps = Vec::new();
    let mut accepted = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        for k in 0..d {
            draws.push(rec[1 + k].parse::<f64>().map_err(|e| fail(e.to_string()))?);
        }
        lps.push(rec[1 + d].parse::<f64>().map_err(|e| fail(e.to_string()))?);
        accepted.push(&rec[2 + d] == "1");
    }
    let n = lps.len();
    if n <= n_burn {
        return Err(fail(format!("{n} rows, burn-in is {n_burn}")));
    }
    let kept = accepted[n_burn..].iter().filter(|a| **a).count();
    Ok(PosteriorChain {
        draws: crate::linalg::Matrix::from_vec(n, d, draws).map_err(|e| fail(e.to_string()))?,
        log_posterior_values: lps,
        accepted,
        acceptance_rate: kept as f64 / (n - n_burn) as f64,
        scale_history: Vec::new(),
        n_burn,
    })
}

fn runner_for(model: &str) -> Box<dyn ForwardModel> {
    debug_assert_eq!(model, "synthbench");
    Box::new(SynthCodeModel)
}

fn screening_point(partition: &Partition, cases: &[ExperimentCase]) -> ExperimentCase {
    partition.calibration_cases(cases)[0]
}

/// Runs the pipeline up to and including `until`.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<PipelineReport, PipelineError> {
    let runner = runner_for(&config.model);
    run_pipeline_with_model(config, until, runner.as_ref())
}

/// As [`run_pipeline`] with a caller-supplied forward model.
pub fn run_pipeline_with_model(
    config: &PipelineConfig,
    until: Stage,
    runner: &dyn ForwardModel,
) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    let out = &config.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = Manifest::load(out)?;
    let mut reused = Vec::new();

    // ingest
    let data_bytes = fs::read(&config.dataset).map_err(io_err(&config.dataset))?;
    let data_hash = sha256_hex(&[&data_bytes]);
    let cases = in_stage("ingest", read_dataset_csv(data_bytes.as_slice()).map_err(StageFailure::from))?;
    let partition = in_stage("partition", partition_dataset(&cases, &config.calibration).map_err(StageFailure::from))?;
    let settings_text = config.canonical_settings();
    let config_hash = sha256_hex(&[settings_text.as_bytes(), data_hash.as_bytes(), runner.name().as_bytes()]);
    if let Some(recorded) = manifest.entries.get("config") {
        if *recorded != config_hash {
            return Err(PipelineError::HashMismatch {
                stage: "config".into(),
                recorded: recorded.clone(),
                current: config_hash,
            });
        }
    }
    manifest.entries.insert("config".into(), config_hash.clone());
    manifest.entries.insert("dataset_sha256".into(), data_hash.clone());
    write_atomic(&out.join(DATASET_COPY), &data_bytes)?;
    write_atomic(&out.join(RUN_CONFIG), format!("dataset = {DATASET_COPY}\n{settings_text}").as_bytes())?;
    manifest.save(out)?;
    let key = |parts: &[&str]| -> String {
        let mut all: Vec<&[u8]> = vec![data_hash.as_bytes(), runner.name().as_bytes()];
        all.extend(parts.iter().map(|p| p.as_bytes()));
        sha256_hex(&all)
    };
    let ids = join(&config.calibration);
    let prior_text = format!("{:?}", config.prior.support);
    let seed_text = config.seed.to_string();
    let x_screen = screening_point(&partition, &cases);

    // screening
    if config.screen_points > 0 {
        let h = key(&["screen", &ids, &prior_text, &config.screen_points.to_string(), &config.screen_threshold.to_string()]);
        if manifest.is_fresh("stage.screen", &h, out, &[SCREENING_FILE.into()])? {
            reused.push("screen".to_string());
        } else {
            in_stage(
                "screen",
                (|| {
                    let run = |x: &BoundaryConditions, t: &[f64]| {
                        runner.evaluate(x, &ParameterVector::from_slice(t).expect("four parameters")).map(|y| y.to_vec())
                    };
                    let res = oat_screen(
                        run,
                        &x_screen.x,
                        &PARAMETER_NAMES,
                        &config.prior.support,
                        config.screen_points,
                        config.screen_threshold,
                    )?;
                    write_with(&out.join(SCREENING_FILE), |b| Ok(res.write_csv(&LOCATION_NAMES, b)?))
                })(),
            )?;
            manifest.entries.insert("stage.screen".into(), h);
            manifest.save(out)?;
        }
    }
    if until == Stage::Screen {
        return Ok(PipelineReport { config_hash, modes: Vec::new(), stages_reused: reused });
    }

    // surrogates
    let cc_hash = key(&["gp_cc", &ids, &prior_text, &config.theta_design_size.to_string(), &seed_text]);
    let gp_cc = if manifest.is_fresh("stage.gp_cc", &cc_hash, out, &[GP_CC_FILE.into()])? {
        reused.push("gp_cc".to_string());
        load_gp(&out.join(GP_CC_FILE), "surrogates")?
    } else {
        let gp = in_stage(
            "surrogates",
            build_gp_cc(
                &partition,
                &cases,
                runner,
                config.theta_design_size,
                &config.prior,
                &fit_options(derive_seed(config.seed, 10)),
                derive_seed(config.seed, 11),
            )
            .map_err(StageFailure::from),
        )?;
        save_gp(&out.join(GP_CC_FILE), &gp, &cc_hash)?;
        manifest.entries.insert("stage.gp_cc".into(), cc_hash.clone());
        manifest.save(out)?;
        gp
    };
    let need_md = config.modes.contains(&CalibrationMode::WithDiscrepancy);
    let gp_md = if need_md {
        let md_hash = key(&["gp_md", &ids, &seed_text]);
        if manifest.is_fresh("stage.gp_md", &md_hash, out, &[GP_MD_FILE.into()])? {
            reused.push("gp_md".to_string());
            Some(load_gp(&out.join(GP_MD_FILE), "surrogates")?)
        } else {
            let gp = in_stage(
                "surrogates",
                build_gp_md(&partition, &cases, runner, &ParameterVector::NOMINAL, &fit_options(derive_seed(config.seed, 12)))
                    .map_err(StageFailure::from),
            )?;
            save_gp(&out.join(GP_MD_FILE), &gp, &md_hash)?;
            manifest.entries.insert("stage.gp_md".into(), md_hash);
            manifest.save(out)?;
            Some(gp)
        }
    } else {
        None
    };
    let calibration = partition.calibration_cases(&cases);
    let validation = partition.validation_cases(&cases);
    let pair = in_stage(
        "surrogates",
        SurrogatePair::new(
            gp_cc,
            calibration.iter().map(|c| c.x.to_array()).collect(),
            gp_md.map(|m| (m, validation.iter().map(|c| c.x.to_array()).collect())),
        )
        .map_err(StageFailure::from),
    )?;

    // sobol, on the emulator mean at the screening case
    if config.sobol_n_base > 0 {
        let h = key(&["sobol", &cc_hash, &prior_text, &config.sobol_n_base.to_string(), &seed_text]);
        if manifest.is_fresh("stage.sobol", &h, out, &[SOBOL_FILE.into()])? {
            reused.push("sobol".to_string());
        } else {
            in_stage(
                "sobol",
                (|| {
                    let gp = pair.gp_cc();
                    let xa = x_screen.x.to_array();
                    let f = |t: &[f64]| {
                        let mut q = xa.to_vec();
                        q.extend_from_slice(t);
                        gp.predict_mean(&q)
                    };
                    let res = sobol_indices(f, &config.prior.support, config.sobol_n_base, derive_seed(config.seed, 20))?;
                    write_with(&out.join(SOBOL_FILE), |b| Ok(res.write_csv(&PARAMETER_NAMES, &LOCATION_NAMES, b)?))
                })(),
            )?;
            manifest.entries.insert("stage.sobol".into(), h);
            manifest.save(out)?;
        }
    }
    if until == Stage::Sobol {
        return Ok(PipelineReport { config_hash, modes: Vec::new(), stages_reused: reused });
    }

    // calibration per mode
    let settings = config.sampler_settings();
    let mut reports = Vec::new();
    for &mode in &config.modes {
        let h = key(&[
            "calibrate",
            mode.as_str(),
            &cc_hash,
            manifest.entries.get("stage.gp_md").map_or("", |s| s.as_str()),
            &prior_text,
            &config.n_samples.to_string(),
            &config.n_burn.to_string(),
            &config.chains.to_string(),
            &seed_text,
            config.code_variance.as_str(),
        ]);
        let stage_name = format!("stage.calibrate.{mode}");
        let mut artifacts: Vec<PathBuf> = (0..config.chains).map(|k| chain_file(mode, k)).collect();
        artifacts.push(mode_dir(mode).join("posterior_summary.csv"));
        artifacts.push(mode_dir(mode).join("posterior_correlation.csv"));
        artifacts.push(mode_dir(mode).join("diagnostics.txt"));
        let (chains, diagnostics, summary) = if manifest.is_fresh(&stage_name, &h, out, &artifacts)? {
            reused.push(format!("calibrate.{mode}"));
            let chains = (0..config.chains)
                .map(|k| read_chain_csv(&out.join(chain_file(mode, k)), config.n_burn))
                .collect::<Result<Vec<_>, _>>()?;
            let diagnostics = crate::mcmc::diagnostics(&chains).map_err(stage_err("calibrate"))?;
            let summary = PosteriorSummary::from_chains(&chains);
            (chains, diagnostics, summary)
        } else {
            let res = in_stage(
                "calibrate",
                calibrate(&pair, &calibration, mode, &config.prior, &settings).map_err(StageFailure::from),
            )?;
            in_stage(
                "calibrate",
                (|| {
                    let dir = out.join(mode_dir(mode));
                    for (k, c) in res.chains.iter().enumerate() {
                        write_with(&out.join(chain_file(mode, k)), |b| Ok(c.write_csv(b)?))?;
                    }
                    write_with(&dir.join("posterior_summary.csv"), |b| Ok(res.summary.write_csv(b)?))?;
                    write_with(&dir.join("posterior_correlation.csv"), |b| Ok(res.summary.write_correlation_csv(b)?))?;
                    let text = diagnostics_text(&config_hash, mode, &res.diagnostics);
                    write_with(&dir.join("diagnostics.txt"), |b| {
                        b.extend_from_slice(text.as_bytes());
                        Ok(())
                    })
                })(),
            )?;
            manifest.entries.insert(stage_name, h);
            manifest.save(out)?;
            (res.chains, res.diagnostics, res.summary)
        };
        let failures = diagnostics.failures(DEFAULT_RHAT_MAX);
        reports.push((
            ModeReport {
                mode,
                converged: failures.is_empty(),
                diagnostics,
                summary,
                validation: None,
                rmse_code_plus_discrepancy: None,
            },
            chains,
        ));
    }
    if until == Stage::Calibrate {
        return Ok(PipelineReport { config_hash, modes: reports.into_iter().map(|r| r.0).collect(), stages_reused: reused });
    }

    // validation on held-out cases
    let emulator = SurrogateModel(pair.gp_cc());
    let runner: &dyn ForwardModel = if config.via_surrogate { &emulator } else { runner };
    let prior_pred = in_stage(
        "validate",
        point_predictions(runner, &validation, &ParameterVector::NOMINAL).map_err(StageFailure::from),
    )?;
    for (report, chains) in reports.iter_mut() {
        let mode = report.mode;
        let draws: Vec<ParameterVector> = chains
            .iter()
            .flat_map(|c| c.retained().map(|r| ParameterVector::from_slice(r).expect("four parameters")))
            .collect();
        let (summary, vr) = in_stage(
            "validate",
            (|| {
                let s = propagate(runner, &validation, &draws, config.n_propagate)?;
                let vr = rmse_report(&s, &prior_pred, &validation)?;
                Ok((s, vr))
            })(),
        )?;
        in_stage(
            "validate",
            write_with(&out.join(mode_dir(mode)).join("validation_report.csv"), |b| Ok(vr.write_csv(b)?)),
        )?;
        if let Some(md) = pair.gp_md() {
            let mut res = Vec::with_capacity(validation.len() * N_LOCATIONS);
            for (i, c) in validation.iter().enumerate() {
                let (d, _) = in_stage("validate", DiscrepancyModel::predict(md, &c.x).map_err(StageFailure::from))?;
                for j in 0..N_LOCATIONS {
                    res.push(c.y_exp.to_array()[j] - summary.mean[i][j] - d[j]);
                }
            }
            report.rmse_code_plus_discrepancy = Some(rmse(&res));
        }
        report.validation = Some(vr);
    }
    let summary_text = validation_summary_text(&config_hash, &reports.iter().map(|r| &r.0).collect::<Vec<_>>());
    write_atomic(&out.join(VALIDATION_SUMMARY), summary_text.as_bytes())?;
    let report =
        PipelineReport { config_hash, modes: reports.into_iter().map(|r| r.0).collect(), stages_reused: reused };
    if until == Stage::Export {
        export_results(out)?;
    }
    Ok(report)
}

/// GP_CC mean used as a stand-in forward model.
struct SurrogateModel<'a>(&'a GpModel<f64>);

impl ForwardModel for SurrogateModel<'_> {
    fn evaluate(&self, x: &BoundaryConditions, theta: &ParameterVector) -> Result<[f64; 3], ModelError> {
        let mut q = x.to_array().to_vec();
        q.extend_from_slice(&theta.0);
        let m = self.0.predict_mean(&q).map_err(|e| ModelError(e.to_string()))?;
        Ok([m[0], m[1], m[2]])
    }

    fn name(&self) -> &str {
        "gp_cc"
    }
}

fn save_gp(path: &Path, gp: &GpModel<f64>, hash: &str) -> Result<(), PipelineError> {
    let mut meta = BTreeMap::new();
    meta.insert("stage_hash".to_string(), hash.to_string());
    write_atomic(path, gp.to_json(&meta).as_bytes())
}

fn load_gp(path: &Path, stage: &'static str) -> Result<GpModel<f64>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    GpModel::from_json(&text).map(|(m, _)| m).map_err(stage_err(stage))
}

fn diagnostics_text(config_hash: &str, mode: CalibrationMode, d: &Diagnostics) -> String {
    let failures = d.failures(DEFAULT_RHAT_MAX);
    let mut s = String::new();
    let _ = writeln!(s, "config_hash = {config_hash}");
    let _ = writeln!(s, "mode = {mode}");
    let _ = writeln!(s, "rhat_max = {DEFAULT_RHAT_MAX}");
    let _ = writeln!(s, "converged = {}", failures.is_empty());
    s.push_str(&d.to_string());
    for f in failures {
        let _ = writeln!(s, "failure = {f}");
    }
    s
}

fn validation_summary_text(config_hash: &str, modes: &[&ModeReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash = {config_hash}");
    let _ = writeln!(s, "# validation RMSE of the code response over held-out cases x locations");
    if let Some(v) = modes.iter().find_map(|m| m.validation.as_ref()) {
        let _ = writeln!(s, "rmse.prior_nominal = {}", v.rmse_prior);
        for (j, loc) in LOCATION_NAMES.iter().enumerate() {
            let _ = writeln!(s, "rmse.prior_nominal.{loc} = {}", v.rmse_prior_by_location[j]);
        }
    }
    for m in modes {
        if let Some(v) = &m.validation {
            let _ = writeln!(s, "rmse.{} = {}", m.mode, v.rmse_posterior);
            for (j, loc) in LOCATION_NAMES.iter().enumerate() {
                let _ = writeln!(s, "rmse.{}.{loc} = {}", m.mode, v.rmse_posterior_by_location[j]);
            }
            let _ = writeln!(s, "coverage_95.{} = {}", m.mode, v.coverage_95);
            let _ = writeln!(s, "coverage_95_model_only.{} = {}", m.mode, v.coverage_95_model);
        }
        if let Some(r) = m.rmse_code_plus_discrepancy {
            let _ = writeln!(s, "rmse_code_plus_discrepancy.{} = {r}", m.mode);
        }
        let _ = writeln!(s, "converged.{} = {}", m.mode, m.converged);
    }
    s
}

/// Writes plot-ready CSVs for a completed run directory:
/// `scatter_prior.csv` and, per mode, `posterior_pairs.csv`,
/// `posterior_marginals.csv` and `validation_errors.csv`.
pub fn export_results(run_dir: &Path) -> Result<(), PipelineError> {
    let need = |p: PathBuf| -> Result<PathBuf, PipelineError> {
        let full = run_dir.join(&p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(PipelineError::Incomplete { dir: run_dir.to_path_buf(), missing: p.display().to_string() })
        }
    };
    let conf_path = need(RUN_CONFIG.into())?;
    let text = fs::read_to_string(&conf_path).map_err(io_err(&conf_path))?;
    let mut config = PipelineConfig::parse(&text, run_dir)?;
    config.out = run_dir.to_path_buf();
    let runner = runner_for(&config.model);
    let bytes = fs::read(&config.dataset).map_err(io_err(&config.dataset))?;
    let cases = in_stage("export", read_dataset_csv(bytes.as_slice()).map_err(StageFailure::from))?;
    let mut chain_paths = Vec::new();
    for &mode in &config.modes {
        let paths: Vec<PathBuf> = (0..config.chains).map(|k| need(chain_file(mode, k))).collect::<Result<_, _>>()?;
        chain_paths.push((mode, paths, need(mode_dir(mode).join("validation_report.csv"))?));
    }

    in_stage(
        "export",
        (|| {
            let prior = point_predictions(runner.as_ref(), &cases, &ParameterVector::NOMINAL)?;
            write_with(&run_dir.join("scatter_prior.csv"), |b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["case_id", "location", "y_exp", "y_prior"])?;
                for (c, p) in cases.iter().zip(&prior) {
                    for j in 0..N_LOCATIONS {
                        w.write_record([
                            c.case_id.to_string(),
                            LOCATION_NAMES[j].to_string(),
                            c.y_exp.to_array()[j].to_string(),
                            p[j].to_string(),
                        ])?;
                    }
                }
                w.flush()?;
                Ok(())
            })
        })(),
    )?;

    for (mode, paths, report_path) in chain_paths {
        let chains = paths.iter().map(|p| read_chain_csv(p, config.n_burn)).collect::<Result<Vec<_>, _>>()?;
        let dir = run_dir.join(mode_dir(mode));
        in_stage("export", write_pairs(&dir.join("posterior_pairs.csv"), &chains, config.export_thin))?;
        in_stage("export", write_marginals(&dir.join("posterior_marginals.csv"), &chains, &config.prior))?;
        in_stage("export", write_errors(&report_path, &dir.join("validation_errors.csv")))?;
    }
    Ok(())
}

fn write_pairs(path: &Path, chains: &[PosteriorChain<f64>], thin: usize) -> Result<(), StageFailure> {
    write_with(path, |b| {
        let mut w = csv::Writer::from_writer(b);
        let mut header = vec!["chain".to_string(), "step".to_string()];
        header.extend(PARAMETER_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (k, c) in chains.iter().enumerate() {
            let kept = c.n_samples() - c.n_burn;
            for i in 0..kept / thin {
                let step = c.n_burn + i * thin;
                let mut rec = vec![k.to_string(), step.to_string()];
                rec.extend(c.draws.row(step).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

fn write_marginals(path: &Path, chains: &[PosteriorChain<f64>], prior: &PriorSpec) -> Result<(), StageFailure> {
    write_with(path, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["parameter", "bin_lo", "bin_hi", "count", "density"])?;
        for (k, name) in PARAMETER_NAMES.iter().enumerate() {
            let col: Vec<f64> = chains.iter().flat_map(|c| c.retained_column(k)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { prior.support[k] };
            let width = (hi - lo) / HISTOGRAM_BINS as f64;
            let mut counts = [0usize; HISTOGRAM_BINS];
            for v in &col {
                let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
            }
            for (i, &n) in counts.iter().enumerate() {
                let a = lo + width * i as f64;
                let density = n as f64 / (col.len() as f64 * width);
                w.write_record([name.to_string(), a.to_string(), (a + width).to_string(), n.to_string(), density.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

fn write_errors(report: &Path, path: &Path) -> Result<(), StageFailure> {
    let mut rdr = csv::Reader::from_path(report)?;
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    write_with(path, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["case_id", "location", "error_prior", "error_posterior"])?;
        for r in &rows {
            let num = |i: usize| r[i].parse::<f64>().map_err(|e| StageFailure(format!("{}: {e}", report.display())));
            let (y, prior, post) = (num(2)?, num(3)?, num(4)?);
            w.write_record([r[0].to_string(), r[1].to_string(), (y - prior).to_string(), (y - post).to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Writes `dataset.csv`, the ground-truth sidecar, `partition.txt` and a
/// ready-to-run `pipeline.conf` into `dir`.
pub fn write_synthetic_bundle(
    dir: &Path,
    synth: &crate::synthbench::SynthConfig,
    n_calibration: usize,
) -> Result<PathBuf, PipelineError> {
    let cases = crate::synthbench::generate_dataset(synth).map_err(stage_err("synth-gen"))?;
    let ids = crate::synthbench::default_partition(&cases, n_calibration).map_err(stage_err("synth-gen"))?;
    let mut data = Vec::new();
    crate::domain::write_dataset_csv(&cases, &mut data).map_err(stage_err("synth-gen"))?;
    write_atomic(&dir.join("dataset.csv"), &data)?;
    write_atomic(&dir.join("dataset.truth.txt"), synth.sidecar().as_bytes())?;
    write_atomic(&dir.join("partition.txt"), crate::domain::format_partition_file(&ids).as_bytes())?;
    let conf = format!(
        "# generated by synth-gen\ndataset = dataset.csv\ncalibration = {}\nseed = {}\nsobol_n_base = 1024\nout = run\n",
        join(&ids),
        synth.seed
    );
    let conf_path = dir.join("pipeline.conf");
    write_atomic(&conf_path, conf.as_bytes())?;
    Ok(conf_path)
}

/// Opens a buffered file for writing, creating parent directories.
pub fn create_file(path: &Path) -> Result<BufWriter<fs::File>, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}
