//! Experiment cases, calibration parameters and the calibration /
//! validation partition.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use thiserror::Error;

pub const N_PARAMS: usize = 4;
pub const N_LOCATIONS: usize = 3;
pub const N_BOUNDARY: usize = 4;

pub const PARAMETER_NAMES: [&str; N_PARAMS] = ["P1008", "P1012", "P1022", "P1028"];
pub const LOCATION_NAMES: [&str; N_LOCATIONS] = ["lower", "middle", "upper"];
pub const BOUNDARY_NAMES: [&str; N_BOUNDARY] = ["pressure", "inlet_temperature", "mass_flow", "power"];

/// Physical span that normalized value 0 and 1 stand for, per boundary
/// coordinate. Covers the steady-state bundle test matrix.
pub const PHYSICAL_RANGES: [(&str, f64, f64); N_BOUNDARY] = [
    ("MPa", 4.9, 16.8),
    ("degC", 140.0, 345.0),
    ("t/m2/h", 550.0, 4150.0),
    ("MW", 0.5, 3.2),
];

pub const DATASET_HEADER: [&str; 9] = [
    "case_id",
    "pressure",
    "inlet_temperature",
    "mass_flow",
    "power",
    "vf_lower",
    "vf_middle",
    "vf_upper",
    "sigma_exp",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("case {case_id}: non-finite value in {field}")]
    NonFinite { case_id: u32, field: &'static str },
    #[error("case {case_id}: boundary condition {field} = {value} outside normalized [0,1]")]
    BoundaryOutOfRange { case_id: u32, field: &'static str, value: f64 },
    #[error("case {case_id}: {field} = {value}: void fraction out of [0,1]")]
    VoidFractionOutOfRange { case_id: u32, field: &'static str, value: f64 },
    #[error("case {case_id}: sigma_exp = {value}: nonpositive measurement sigma")]
    NonpositiveSigma { case_id: u32, value: f64 },
    #[error("duplicate case_id {0}")]
    DuplicateId(u32),
    #[error("unknown case id {0} in calibration set")]
    UnknownId(u32),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("empty validation set")]
    EmptyValidation,
    #[error("need at least 2 validation cases, got {0}")]
    TooFewValidation(usize),
    #[error(
        "encompassment violated on coordinate \"{coordinate}\": calibration case {case_id} has {value}, validation range is [{lo}, {hi}]"
    )]
    Encompassment { coordinate: &'static str, case_id: u32, value: f64, lo: f64, hi: f64 },
    #[error("parameter {index} = {value} outside support [{lo}, {hi}]")]
    ParameterOutOfSupport { index: usize, value: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("bad header: missing column(s) {missing:?}, unexpected column(s) {extra:?}; expected `{expected}`")]
    Header { missing: Vec<String>, extra: Vec<String>, expected: String },
    #[error("line {line}: unparseable value {value:?} in column {column}")]
    Parse { line: u64, column: String, value: String },
    #[error("line {line}: wrong number of fields ({got}, expected {expected})")]
    FieldCount { line: u64, got: usize, expected: usize },
    #[error("line {line}: {source}")]
    Invalid { line: u64, source: DomainError },
    #[error("line {line}: duplicate case_id {case_id}")]
    DuplicateId { line: u64, case_id: u32 },
    #[error("partition file: {0}")]
    Partition(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Boundary conditions, each normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    pub pressure: f64,
    pub inlet_temperature: f64,
    pub mass_flow: f64,
    pub power: f64,
}

impl BoundaryConditions {
    pub fn new(pressure: f64, inlet_temperature: f64, mass_flow: f64, power: f64) -> Self {
        Self { pressure, inlet_temperature, mass_flow, power }
    }

    pub fn from_array(a: [f64; N_BOUNDARY]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; N_BOUNDARY] {
        [self.pressure, self.inlet_temperature, self.mass_flow, self.power]
    }

    /// Value in physical units for coordinate `k`.
    pub fn physical(&self, k: usize) -> f64 {
        let (_, lo, hi) = PHYSICAL_RANGES[k];
        lo + (hi - lo) * self.to_array()[k]
    }
}

/// Multiplicative physical-model factors (P1008, P1012, P1022, P1028).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterVector(pub [f64; N_PARAMS]);

impl ParameterVector {
    pub const NOMINAL: Self = Self([1.0; N_PARAMS]);

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(s: &[f64]) -> Option<Self> {
        <[f64; N_PARAMS]>::try_from(s).ok().map(Self)
    }

    /// Checks every component against `[lo, hi]`.
    pub fn check_support(&self, support: &[(f64, f64); N_PARAMS]) -> Result<(), DomainError> {
        for (index, (&value, &(lo, hi))) in self.0.iter().zip(support).enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(DomainError::ParameterOutOfSupport { index, value, lo, hi });
            }
        }
        Ok(())
    }
}

/// Chordal-averaged void fractions at the three measurement elevations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoidMeasurement {
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

impl VoidMeasurement {
    pub fn from_array(a: [f64; N_LOCATIONS]) -> Self {
        Self { lower: a[0], middle: a[1], upper: a[2] }
    }

    pub fn to_array(&self) -> [f64; N_LOCATIONS] {
        [self.lower, self.middle, self.upper]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    pub sigma_exp: f64,
}

impl Default for MeasurementModel {
    fn default() -> Self {
        Self { sigma_exp: 0.04 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentCase {
    pub case_id: u32,
    pub x: BoundaryConditions,
    pub y_exp: VoidMeasurement,
    pub meas: MeasurementModel,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("forward model failed: {0}")]
pub struct ModelError(pub String);

/// A forward model `y^M(x, theta)`: boundary conditions and calibration
/// parameters in, void fractions at the three elevations out.
pub trait ForwardModel: Sync {
    fn evaluate(&self, x: &BoundaryConditions, theta: &ParameterVector) -> Result<[f64; N_LOCATIONS], ModelError>;

    fn name(&self) -> &str;
}

impl<F> ForwardModel for F
where
    F: Fn(&BoundaryConditions, &ParameterVector) -> Result<[f64; N_LOCATIONS], ModelError> + Sync,
{
    fn evaluate(&self, x: &BoundaryConditions, theta: &ParameterVector) -> Result<[f64; N_LOCATIONS], ModelError> {
        self(x, theta)
    }

    fn name(&self) -> &str {
        "closure"
    }
}

/// Returns the case unchanged if every field is finite, boundary
/// conditions and void fractions lie in `[0, 1]`, and `sigma_exp > 0`.
pub fn validate_case(case: ExperimentCase) -> Result<ExperimentCase, DomainError> {
    let id = case.case_id;
    for (field, value) in BOUNDARY_NAMES.iter().zip(case.x.to_array()) {
        if !value.is_finite() {
            return Err(DomainError::NonFinite { case_id: id, field });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(DomainError::BoundaryOutOfRange { case_id: id, field, value });
        }
    }
    const VF_FIELDS: [&str; N_LOCATIONS] = ["vf_lower", "vf_middle", "vf_upper"];
    for (field, value) in VF_FIELDS.iter().zip(case.y_exp.to_array()) {
        if !value.is_finite() {
            return Err(DomainError::NonFinite { case_id: id, field });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(DomainError::VoidFractionOutOfRange { case_id: id, field, value });
        }
    }
    let s = case.meas.sigma_exp;
    if !s.is_finite() {
        return Err(DomainError::NonFinite { case_id: id, field: "sigma_exp" });
    }
    if s <= 0.0 {
        return Err(DomainError::NonpositiveSigma { case_id: id, value: s });
    }
    Ok(case)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub calibration_ids: BTreeSet<u32>,
    pub validation_ids: BTreeSet<u32>,
}

impl Partition {
    pub fn select<'a>(&self, cases: &'a [ExperimentCase], calibration: bool) -> Vec<&'a ExperimentCase> {
        let ids = if calibration { &self.calibration_ids } else { &self.validation_ids };
        let mut out: Vec<&ExperimentCase> = cases.iter().filter(|c| ids.contains(&c.case_id)).collect();
        out.sort_by_key(|c| c.case_id);
        out
    }

    pub fn calibration_cases(&self, cases: &[ExperimentCase]) -> Vec<ExperimentCase> {
        self.select(cases, true).into_iter().copied().collect()
    }

    pub fn validation_cases(&self, cases: &[ExperimentCase]) -> Vec<ExperimentCase> {
        self.select(cases, false).into_iter().copied().collect()
    }
}

/// Splits `cases` into calibration (`calibration_ids`) and validation
/// (everything else), requiring the calibration box to lie inside the
/// validation box on every boundary coordinate.
pub fn partition_dataset(cases: &[ExperimentCase], calibration_ids: &BTreeSet<u32>) -> Result<Partition, DomainError> {
    let mut all = BTreeSet::new();
    for c in cases {
        if !all.insert(c.case_id) {
            return Err(DomainError::DuplicateId(c.case_id));
        }
    }
    if let Some(&bad) = calibration_ids.iter().find(|id| !all.contains(id)) {
        return Err(DomainError::UnknownId(bad));
    }
    if calibration_ids.is_empty() {
        return Err(DomainError::EmptyCalibration);
    }
    let validation_ids: BTreeSet<u32> = all.difference(calibration_ids).copied().collect();
    if validation_ids.is_empty() {
        return Err(DomainError::EmptyValidation);
    }
    if validation_ids.len() < 2 {
        return Err(DomainError::TooFewValidation(validation_ids.len()));
    }
    let by_id: BTreeMap<u32, &ExperimentCase> = cases.iter().map(|c| (c.case_id, c)).collect();
    for (k, &coordinate) in BOUNDARY_NAMES.iter().enumerate() {
        let (lo, hi) = validation_ids.iter().map(|id| by_id[id].x.to_array()[k]).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), v| (lo.min(v), hi.max(v)),
        );
        for id in calibration_ids {
            let value = by_id[id].x.to_array()[k];
            if value < lo || value > hi {
                return Err(DomainError::Encompassment { coordinate, case_id: *id, value, lo, hi });
            }
        }
    }
    Ok(Partition { calibration_ids: calibration_ids.clone(), validation_ids })
}

/// Reads the dataset CSV (exact header, one row per case). Every row is
/// validated and ids must be unique.
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<ExperimentCase>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let missing: Vec<String> =
        DATASET_HEADER.iter().filter(|h| !header.iter().any(|c| c == *h)).map(|s| s.to_string()).collect();
    let extra: Vec<String> = header.iter().filter(|c| !DATASET_HEADER.contains(&c.as_str())).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() || header.len() != DATASET_HEADER.len() {
        return Err(IngestError::Header { missing, extra, expected: DATASET_HEADER.join(",") });
    }
    let pos: Vec<usize> = DATASET_HEADER.iter().map(|h| header.iter().position(|c| c == h).unwrap()).collect();

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != DATASET_HEADER.len() {
            return Err(IngestError::FieldCount { line, got: rec.len(), expected: DATASET_HEADER.len() });
        }
        let field = |k: usize| rec.get(pos[k]).unwrap_or("");
        let case_id: u32 = field(0).parse().map_err(|_| IngestError::Parse {
            line,
            column: DATASET_HEADER[0].to_string(),
            value: field(0).to_string(),
        })?;
        let mut vals = [0.0f64; 8];
        for (k, v) in vals.iter_mut().enumerate() {
            let raw = field(k + 1);
            *v = raw.parse().map_err(|_| IngestError::Parse {
                line,
                column: DATASET_HEADER[k + 1].to_string(),
                value: raw.to_string(),
            })?;
        }
        let case = ExperimentCase {
            case_id,
            x: BoundaryConditions::new(vals[0], vals[1], vals[2], vals[3]),
            y_exp: VoidMeasurement { lower: vals[4], middle: vals[5], upper: vals[6] },
            meas: MeasurementModel { sigma_exp: vals[7] },
        };
        let case = validate_case(case).map_err(|source| IngestError::Invalid { line, source })?;
        if !seen.insert(case_id) {
            return Err(IngestError::DuplicateId { line, case_id });
        }
        out.push(case);
    }
    Ok(out)
}

pub fn write_dataset_csv<W: Write>(cases: &[ExperimentCase], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATASET_HEADER)?;
    for c in cases {
        let x = c.x.to_array();
        let y = c.y_exp.to_array();
        w.write_record([
            c.case_id.to_string(),
            x[0].to_string(),
            x[1].to_string(),
            x[2].to_string(),
            x[3].to_string(),
            y[0].to_string(),
            y[1].to_string(),
            y[2].to_string(),
            c.meas.sigma_exp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a comma-separated id list such as `3, 7,12`.
pub fn parse_id_list(text: &str) -> Result<BTreeSet<u32>, IngestError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| IngestError::Partition(format!("bad case id {s:?}"))))
        .collect()
}

/// Parses a partition file: a single `calibration = id1,id2,...` line
/// (blank lines and `#` comments allowed).
pub fn parse_partition_file(text: &str) -> Result<BTreeSet<u32>, IngestError> {
    let mut found = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| IngestError::Partition(format!("expected `calibration = ...`, got {line:?}")))?;
        if key.trim() != "calibration" {
            return Err(IngestError::Partition(format!("unknown key {:?}", key.trim())));
        }
        if found.is_some() {
            return Err(IngestError::Partition("calibration listed twice".into()));
        }
        found = Some(parse_id_list(value)?);
    }
    found.ok_or_else(|| IngestError::Partition("no `calibration = ...` line".into()))
}

pub fn format_partition_file(ids: &BTreeSet<u32>) -> String {
    let list: Vec<String> = ids.iter().map(u32::to_string).collect();
    format!("calibration = {}\n", list.join(","))
}
