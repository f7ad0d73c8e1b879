use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use quasihom::{CellLattice, CutProjectMap, Envelope, MacroTrig, OperatorSpec, SliceTerm};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_K_MAX: usize = 8;
pub const DEFAULT_HARD_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckMap,
    CheckRank,
    GenField,
    Penrose,
    SolveCell,
    EffectiveTensor,
    FhomTable,
    Pairing,
    #[serde(rename = "verify-1d")]
    Verify1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threads {
    Count(usize),
    Named(String),
}

impl Threads {
    pub fn resolve(&self) -> Result<usize, CliError> {
        match self {
            Self::Count(0) => Err(CliError::validation("threads: must be >= 1 or \"auto\"")),
            Self::Count(k) => Ok(*k),
            Self::Named(s) if s == "auto" => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
            Self::Named(s) => s
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| CliError::validation(format!("threads: expected a positive integer or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<Threads>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }
}

pub fn parse_params<T: for<'de> Deserialize<'de>>(params: &Value) -> Result<T, CliError> {
    let v = if params.is_null() { Value::Object(Default::default()) } else { params.clone() };
    serde_json::from_value(v).map_err(|e| CliError::validation(format!("params: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Uniform(usize),
    PerAxis(Vec<usize>),
}

impl GridSpec {
    fn shape(&self, m: usize) -> Result<Vec<usize>, CliError> {
        match self {
            Self::Uniform(n) => Ok(vec![*n; m]),
            Self::PerAxis(v) if v.len() == m => Ok(v.clone()),
            Self::PerAxis(v) => Err(CliError::validation(format!(
                "map.grid: {} entries given, the map has m={m}",
                v.len()
            ))),
        }
    }
}

pub fn default_grid(m: usize) -> usize {
    match m {
        0..=2 => 128,
        3 => 64,
        4 => 24,
        _ => 12,
    }
}

/// Either a preset name or explicit rows of the `m × n` matrix `R`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Dimension `n` for the `periodic` preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
    pub grid: Option<GridSpec>,
    pub k_max: Option<usize>,
    pub hard_tolerance: Option<f64>,
}

impl MapParams {
    pub fn with_preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Self::default()
        }
    }

    fn m(&self) -> Result<usize, CliError> {
        match (&self.preset, &self.rows) {
            (Some(_), Some(_)) => Err(CliError::validation("map: give either preset or rows, not both")),
            (None, None) => Err(CliError::validation("map: preset or rows is required")),
            (None, Some(rows)) => Ok(rows.len()),
            (Some(p), None) => match p.as_str() {
                "golden" => Ok(2),
                "al-cu-fe" => Ok(6),
                "penrose" => Ok(5),
                "periodic" => Ok(self.n.unwrap_or(2)),
                other => Err(CliError::validation(format!(
                    "map.preset: unknown preset {other:?} (golden, al-cu-fe, penrose, periodic)"
                ))),
            },
        }
    }

    pub fn resolve(&mut self) -> Result<(), CliError> {
        let m = self.m()?;
        if self.preset.as_deref() == Some("periodic") {
            self.n.get_or_insert(2);
        } else if self.n.is_some() {
            return Err(CliError::validation("map.n: only used by the periodic preset"));
        }
        let g = default_grid(m);
        self.grid = Some(GridSpec::PerAxis(self.grid.get_or_insert(GridSpec::Uniform(g)).shape(m)?));
        self.k_max.get_or_insert(DEFAULT_K_MAX);
        self.hard_tolerance.get_or_insert(DEFAULT_HARD_TOLERANCE);
        Ok(())
    }

    pub fn build(&self) -> Result<CutProjectMap, CliError> {
        let m = self.m()?;
        let shape = self.grid.as_ref().map(|g| g.shape(m)).transpose()?.unwrap_or(vec![default_grid(m); m]);
        let ctx = |e: quasihom::Error| CliError::from(e).context("map");
        if let Some(rows) = &self.rows {
            let n = rows.first().map(|r| r.len()).unwrap_or(0);
            if n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(CliError::validation("map.rows: rows must be non-empty and of equal length"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let r = DMatrix::from_row_slice(m, n, &flat);
            let cell = CellLattice::unit(shape).map_err(ctx)?;
            return CutProjectMap::new(r, cell).map_err(ctx);
        }
        match self.preset.as_deref().unwrap_or_default() {
            "golden" => CutProjectMap::golden_ratio(shape),
            "al-cu-fe" => CutProjectMap::al_cu_fe(shape),
            "penrose" => CutProjectMap::penrose(shape),
            _ => {
                let n = self.n.unwrap_or(2);
                CutProjectMap::new(DMatrix::identity(n, n), CellLattice::unit(shape).map_err(ctx)?)
            }
        }
        .map_err(ctx)
    }

    pub fn build_validated(&self) -> Result<CutProjectMap, CliError> {
        self.build()?
            .validate(self.k_max.unwrap_or(DEFAULT_K_MAX), self.hard_tolerance.unwrap_or(DEFAULT_HARD_TOLERANCE))
            .map_err(|e| CliError::from(e).context("map"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// `A⁽ⁱ⁾` as row lists, one matrix per slow direction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<Vec<Vec<f64>>>>,
}

impl OperatorParams {
    pub fn build(&self) -> Result<OperatorSpec, CliError> {
        let ctx = |e: quasihom::Error| CliError::from(e).context("operator");
        match (&self.preset, &self.coeffs) {
            (Some(p), None) => OperatorSpec::preset(p).map_err(ctx),
            (None, Some(mats)) => {
                let mut out = Vec::with_capacity(mats.len());
                for (i, rows) in mats.iter().enumerate() {
                    let c = rows.first().map(|r| r.len()).unwrap_or(0);
                    if rows.iter().any(|r| r.len() != c) {
                        return Err(CliError::validation(format!("operator.coeffs[{i}]: ragged rows")));
                    }
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    out.push(DMatrix::from_row_slice(rows.len(), c, &flat));
                }
                OperatorSpec::new(out, None).map_err(ctx)
            }
            _ => Err(CliError::validation("operator: give exactly one of preset or coeffs")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub k: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigSum {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpTrig {
    pub beta: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

/// Cell coefficient. `constant` is a full matrix; `trig` and `exp-trig`
/// give a scalar profile `a(y)` used as `a(y) I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSpec {
    Constant(Vec<Vec<f64>>),
    Trig(TrigSum),
    ExpTrig(ExpTrig),
}

impl CoefficientSpec {
    fn trig_value(cell: &CellLattice, terms: &[TrigTerm], y: &[f64]) -> f64 {
        terms
            .iter()
            .map(|t| {
                let w = cell.frequency(&t.k);
                let ph = 2.0 * std::f64::consts::PI * w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                t.cos * ph.cos() + t.sin * ph.sin()
            })
            .sum()
    }

    fn check_modes(&self, m: usize) -> Result<(), CliError> {
        let terms = match self {
            Self::Constant(_) => return Ok(()),
            Self::Trig(t) => &t.terms,
            Self::ExpTrig(t) => &t.terms,
        };
        if let Some(t) = terms.iter().find(|t| t.k.len() != m) {
            return Err(CliError::validation(format!(
                "coefficient.terms: mode {:?} has {} entries, the map has m={m}",
                t.k,
                t.k.len()
            )));
        }
        Ok(())
    }

    /// Scalar profile at a physical cell point, when the spec is scalar.
    pub fn scalar(&self, cell: &CellLattice, y: &[f64]) -> Option<f64> {
        match self {
            Self::Constant(rows) if rows.len() == 1 && rows[0].len() == 1 => Some(rows[0][0]),
            Self::Constant(_) => None,
            Self::Trig(t) => Some(t.mean + Self::trig_value(cell, &t.terms, y)),
            Self::ExpTrig(t) => Some((t.beta * Self::trig_value(cell, &t.terms, y)).exp()),
        }
    }

    pub fn density(&self, cell: &CellLattice, d: usize) -> Result<quasihom::QuadraticDensity, CliError> {
        self.check_modes(cell.dimension())?;
        let ctx = |e: quasihom::Error| CliError::from(e).context("coefficient");
        match self {
            Self::Constant(rows) if !(rows.len() == 1 && rows[0].len() == 1 && d > 1) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(CliError::validation(format!(
                        "coefficient.constant: expected a {d}x{d} matrix for this operator"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                quasihom::QuadraticDensity::constant(cell.clone(), &DMatrix::from_row_slice(d, d, &flat)).map_err(ctx)
            }
            _ => quasihom::QuadraticDensity::isotropic(cell.clone(), d, |y| self.scalar(cell, y).unwrap_or(0.0))
                .map_err(ctx),
        }
    }

    pub fn scalar_field(&self, cell: &CellLattice) -> Result<quasihom::SpectralField, CliError> {
        self.check_modes(cell.dimension())?;
        if self.scalar(cell, &vec![0.0; cell.dimension()]).is_none() {
            return Err(CliError::validation("coefficient: this command needs a scalar coefficient"));
        }
        quasihom::SpectralField::from_fn(cell.clone(), 1, |y, o| o[0] = self.scalar(cell, y).unwrap_or(0.0))
            .map_err(|e| CliError::from(e).context("coefficient"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckMapParams {
    pub map: MapParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRankParams {
    pub operator: OperatorParams,
    pub samples: Option<usize>,
    pub svd_rel_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSampling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFieldParams {
    pub map: MapParams,
    pub coefficient: CoefficientSpec,
    pub interpolation: Option<quasihom::Interpolation>,
    pub slice: Option<SliceSampling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenroseParams {
    pub map: Option<MapParams>,
    pub window_radius: Option<f64>,
    pub extent: Option<f64>,
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub band_limit: Option<usize>,
}

impl SolverParams {
    pub fn resolve(&mut self) {
        self.tol.get_or_insert(DEFAULT_TOL);
        self.max_iter.get_or_insert(DEFAULT_MAX_ITER);
    }

    pub fn options(&self) -> Result<quasihom::SolverOptions, CliError> {
        let tol = self.tol.unwrap_or(DEFAULT_TOL);
        if !(tol > 0.0) {
            return Err(CliError::validation("solver.tol: must be > 0"));
        }
        let max_iter = self.max_iter.unwrap_or(DEFAULT_MAX_ITER);
        if max_iter == 0 {
            return Err(CliError::validation("solver.max_iter: must be >= 1"));
        }
        Ok(quasihom::SolverOptions::quadratic()
            .with_tol(tol)
            .with_max_iter(max_iter)
            .with_band_limit(self.band_limit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellParams {
    pub map: MapParams,
    pub operator: OperatorParams,
    pub coefficient: CoefficientSpec,
    #[serde(default)]
    pub solver: SolverParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveCellParams {
    pub map: MapParams,
    pub operator: OperatorParams,
    pub coefficient: CoefficientSpec,
    #[serde(default)]
    pub solver: SolverParams,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FhomTableParams {
    pub map: MapParams,
    pub operator: OperatorParams,
    pub coefficient: CoefficientSpec,
    #[serde(default)]
    pub solver: SolverParams,
    pub xis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaEntry {
    pub k: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

pub fn lambda_map(entries: &[LambdaEntry]) -> BTreeMap<Vec<i64>, Complex64> {
    entries.iter().map(|e| (e.k.clone(), Complex64::new(e.re, e.im))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryParams {
    pub u: MacroTrig,
    pub psi: Envelope,
    pub lambdas: Vec<LambdaEntry>,
    pub n_max: Option<usize>,
}

/// The oscillating sequence: a slice function `f(x, Rx/ε)` or the gradient
/// of a synthesized recovery sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SequenceSpec {
    Slice { components: usize, terms: Vec<SliceTerm> },
    RecoveryGradient(RecoveryParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingParams {
    pub map: MapParams,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub u: SequenceSpec,
    pub phi: Vec<SliceTerm>,
    pub quadrature_points_per_axis: Option<usize>,
    pub point_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verify1dParams {
    pub map: Option<MapParams>,
    pub coefficient: CoefficientSpec,
    pub domain_length: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverParams,
}
