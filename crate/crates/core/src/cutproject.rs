//! Cut-and-project maps `R: ℝⁿ → ℝᵐ`, the periodicity cell `Yᵐ`, the
//! irrationality (diophantine) check on `Rᵀk`, and quasi-crystalline fields
//! `σ_R(x) = σ(Rx)` sampled from periodic data on the cell.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fourier::SpectralField;

/// Resonances `|Rᵀk|` below this are exact rational relations.
pub const DEFAULT_HARD_TOLERANCE: f64 = 1e-12;
/// Frequencies with `|Rᵀk|` below this are reported as near-resonances.
pub const NEAR_RESONANCE_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_K_MAX: usize = 8;

const MAX_STORED_VIOLATIONS: usize = 1024;

/// The periodicity parallelotope `Yᵐ` together with its sampling grid.
///
/// Columns of `basis` span the cell. Grid nodes sit at basis coordinates
/// `s_j = i_j / N_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLattice {
    basis: DMatrix<f64>,
    basis_inv: DMatrix<f64>,
    grid_shape: Vec<usize>,
}

impl CellLattice {
    pub fn new(basis: DMatrix<f64>, grid_shape: Vec<usize>) -> Result<Self> {
        let m = basis.nrows();
        if m == 0 || basis.ncols() != m {
            return Err(invalid(format!(
                "cell basis must be square and non-empty, got {}x{}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        if grid_shape.len() != m {
            return Err(invalid(format!(
                "grid_shape has {} entries but the cell is {}-dimensional",
                grid_shape.len(),
                m
            )));
        }
        if let Some(&bad) = grid_shape.iter().find(|&&g| g < 2 || g % 2 != 0) {
            return Err(invalid(format!(
                "grid_shape entries must be even and >= 2, got {bad}"
            )));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cell basis has non-finite entries"));
        }
        let det = basis.determinant();
        if det.abs() <= 1e-14 {
            return Err(invalid(format!("cell basis is singular (det = {det:e})")));
        }
        let basis_inv = basis
            .clone()
            .try_inverse()
            .ok_or_else(|| invalid("cell basis is not invertible"))?;
        Ok(Self {
            basis,
            basis_inv,
            grid_shape,
        })
    }

    /// Unit cube `[0,1)ᵐ` with the given samples per axis.
    pub fn unit(grid_shape: Vec<usize>) -> Result<Self> {
        let m = grid_shape.len();
        Self::new(DMatrix::identity(m, m), grid_shape)
    }

    pub fn unit_uniform(m: usize, per_axis: usize) -> Result<Self> {
        Self::unit(vec![per_axis; m])
    }

    pub fn dimension(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    pub fn node_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Lebesgue measure of the cell, `|det basis|`.
    pub fn volume(&self) -> f64 {
        self.basis.determinant().abs()
    }

    /// Same cell, different sampling grid.
    pub fn with_grid(&self, grid_shape: Vec<usize>) -> Result<Self> {
        Self::new(self.basis.clone(), grid_shape)
    }

    /// Dual basis `B⁻ᵀ`: integer frequency `k` has physical wave vector `B⁻ᵀk`.
    pub fn dual_basis(&self) -> DMatrix<f64> {
        self.basis_inv.transpose()
    }

    pub fn frequency(&self, k: &[i64]) -> Vec<f64> {
        let m = self.dimension();
        (0..m)
            .map(|r| (0..m).map(|c| self.basis_inv[(c, r)] * k[c] as f64).sum())
            .collect()
    }

    /// Basis coordinates `s = B⁻¹y`.
    pub fn cell_coordinates(&self, y: &[f64]) -> Vec<f64> {
        let m = self.dimension();
        (0..m)
            .map(|r| (0..m).map(|c| self.basis_inv[(r, c)] * y[c]).sum())
            .collect()
    }

    /// Physical point `y = Bs`.
    pub fn physical_point(&self, s: &[f64]) -> Vec<f64> {
        let m = self.dimension();
        (0..m)
            .map(|r| (0..m).map(|c| self.basis[(r, c)] * s[c]).sum())
            .collect()
    }

    /// Multi-index of grid node `linear` (row-major, last axis fastest).
    pub fn node_index(&self, mut linear: usize) -> Vec<usize> {
        let mut idx = vec![0; self.grid_shape.len()];
        for (slot, &n) in idx.iter_mut().zip(&self.grid_shape).rev() {
            *slot = linear % n;
            linear /= n;
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.grid_shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Basis coordinates of grid node `linear`.
    pub fn node_coordinates(&self, linear: usize) -> Vec<f64> {
        self.node_index(linear)
            .iter()
            .zip(&self.grid_shape)
            .map(|(&i, &n)| i as f64 / n as f64)
            .collect()
    }

    pub fn node_point(&self, linear: usize) -> Vec<f64> {
        self.physical_point(&self.node_coordinates(linear))
    }
}

/// Diophantine state recorded on a map once [`CutProjectMap::validate`]
/// succeeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub k_max: usize,
    pub hard_tolerance: f64,
    pub min_norm: f64,
}

/// The linear map `R: ℝⁿ → ℝᵐ` (an `m × n` matrix) and its cell `Yᵐ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutProjectMap {
    r: DMatrix<f64>,
    cell: CellLattice,
    // Rᵀ B⁻ᵀ, so that the wave vector of frequency k seen along the slice is lifted * k.
    lifted: DMatrix<f64>,
    validation: Option<Validation>,
}

impl CutProjectMap {
    pub fn new(r: DMatrix<f64>, cell: CellLattice) -> Result<Self> {
        let (m, n) = r.shape();
        if n == 0 {
            return Err(invalid("map must have at least one column (n >= 1)"));
        }
        if m < n {
            return Err(invalid(format!(
                "map must satisfy m >= n, got m={m}, n={n}"
            )));
        }
        if cell.dimension() != m {
            return Err(invalid(format!(
                "cell dimension {} does not match map rows m={m}",
                cell.dimension()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(invalid("map has non-finite entries"));
        }
        let sv = r.clone().svd(false, false).singular_values;
        let largest = sv.max();
        let smallest = sv.min();
        if !(largest > 0.0) || smallest <= 1e-12 * largest {
            return Err(invalid(format!(
                "map must have full column rank {n} (singular values {:?})",
                sv.as_slice()
            )));
        }
        let lifted = r.transpose() * cell.dual_basis();
        Ok(Self {
            r,
            cell,
            lifted,
            validation: None,
        })
    }

    /// `R = [1; τ]` with τ the golden ratio, on the unit square.
    pub fn golden_ratio(grid_shape: Vec<usize>) -> Result<Self> {
        let tau = golden();
        Self::new(
            DMatrix::from_column_slice(2, 1, &[1.0, tau]),
            CellLattice::unit(grid_shape)?,
        )
    }

    /// The 6×3 icosahedral map associated with the Al-Cu-Fe quasi-crystalline phase.
    pub fn al_cu_fe(grid_shape: Vec<usize>) -> Result<Self> {
        let t = golden();
        let s = 1.0 / (2.0 * (t + 2.0)).sqrt();
        #[rustfmt::skip]
        let rows = [
            1.0, t, 0.0,
            t, 0.0, 1.0,
            0.0, 1.0, t,
            -1.0, t, 0.0,
            t, 0.0, -1.0,
            0.0, -1.0, t,
        ];
        let r = DMatrix::from_row_slice(6, 3, &rows) * s;
        Self::new(r, CellLattice::unit(grid_shape)?)
    }

    /// Canonical 5→2 strip-projection map with rows `(cos 2πj/5, sin 2πj/5)`.
    pub fn penrose(grid_shape: Vec<usize>) -> Result<Self> {
        let r = DMatrix::from_fn(5, 2, |j, c| {
            let a = 2.0 * PI * j as f64 / 5.0;
            if c == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        Self::new(r, CellLattice::unit(grid_shape)?)
    }

    /// `R = I` on the unit n-cube: ordinary periodic homogenization.
    pub fn periodic(n: usize, per_axis: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), CellLattice::unit_uniform(n, per_axis)?)
    }

    pub fn n(&self) -> usize {
        self.r.ncols()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn cell(&self) -> &CellLattice {
        &self.cell
    }

    pub fn validation(&self) -> Option<&Validation> {
        self.validation.as_ref()
    }

    pub fn is_validated(&self) -> bool {
        self.validation.is_some()
    }

    /// Same map and validation state on a different grid.
    pub fn with_grid(&self, grid_shape: Vec<usize>) -> Result<Self> {
        let cell = self.cell.with_grid(grid_shape)?;
        Ok(Self {
            r: self.r.clone(),
            cell,
            lifted: self.lifted.clone(),
            validation: self.validation,
        })
    }

    /// `y = Rx`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = self.r.shape();
        (0..m)
            .map(|i| (0..n).map(|j| self.r[(i, j)] * x[j]).sum())
            .collect()
    }

    /// `Rᵀ(B⁻ᵀk)`: the frequency `k` of the cell as seen along the slice.
    pub fn dual_frequency(&self, k: &[i64]) -> Vec<f64> {
        let (n, m) = self.lifted.shape();
        (0..n)
            .map(|i| (0..m).map(|j| self.lifted[(i, j)] * k[j] as f64).sum())
            .collect()
    }

    /// Runs [`check_diophantine`] and, when no violations are found, returns
    /// the map flagged as validated.
    pub fn validate(self, k_max: usize, hard_tolerance: f64) -> Result<Self> {
        let report = check_diophantine(&self, k_max, hard_tolerance)?;
        if !report.violations.is_empty() {
            return Err(Error::Diophantine {
                violations: report.violations,
                context: format!("map rejected at k_max={k_max}"),
            });
        }
        Ok(Self {
            validation: Some(Validation {
                k_max,
                hard_tolerance,
                min_norm: report.min_norm,
            }),
            ..self
        })
    }
}

pub fn golden() -> f64 {
    (1.0 + 5f64.sqrt()) / 2.0
}

/// Outcome of an exhaustive scan of `|Rᵀk|` over `0 < |k|∞ ≤ k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub k_max: usize,
    pub hard_tolerance: f64,
    pub min_norm: f64,
    pub argmin_k: Vec<i64>,
    /// Frequencies with `|Rᵀk| < hard_tolerance`, in lexicographic scan
    /// order; capped at 1024 entries (see `violation_count`).
    pub violations: Vec<Vec<i64>>,
    pub violation_count: usize,
    /// Count of frequencies with `hard_tolerance ≤ |Rᵀk| < 1e-3`.
    pub near_resonances: usize,
}

struct ScanChunk {
    min_norm: f64,
    argmin: usize,
    argmin_sup: i64,
    violations: Vec<usize>,
    violation_count: usize,
    near: usize,
}

/// Scans every integer frequency `k` with `0 < |k|∞ ≤ k_max` and reports the
/// smallest `|Rᵀk|` (wave vectors taken through the dual cell basis).
///
/// Ties are broken by the smaller `|k|∞`, then by lexicographic scan order,
/// so the reported frequency is primitive where possible and independent of
/// the thread count.
pub fn check_diophantine(
    map: &CutProjectMap,
    k_max: usize,
    hard_tolerance: f64,
) -> Result<DiophantineReport> {
    if k_max < 1 {
        return Err(invalid("k_max must be >= 1"));
    }
    if !(hard_tolerance > 0.0) {
        return Err(invalid("hard_tolerance must be > 0"));
    }
    let m = map.m();
    if map.cell.dimension() != m {
        return Err(invalid(format!(
            "map has m={m} rows but its cell is {}-dimensional",
            map.cell.dimension()
        )));
    }
    let side = 2 * k_max + 1;
    let total = side
        .checked_pow(m as u32)
        .ok_or_else(|| invalid("k_max box too large to enumerate"))?;
    let zero_index = (0..m).fold(0, |acc, _| acc * side + k_max);
    let lifted = &map.lifted;
    let n = map.n();
    let decode = |mut lin: usize, k: &mut [i64]| {
        for slot in k.iter_mut().rev() {
            *slot = (lin % side) as i64 - k_max as i64;
            lin /= side;
        }
    };

    const CHUNK: usize = 1 << 16;
    let chunks: Vec<ScanChunk> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(total);
            let mut k = vec![0i64; m];
            let mut out = ScanChunk {
                min_norm: f64::INFINITY,
                argmin: usize::MAX,
                argmin_sup: i64::MAX,
                violations: Vec::new(),
                violation_count: 0,
                near: 0,
            };
            for lin in start..end {
                if lin == zero_index {
                    continue;
                }
                decode(lin, &mut k);
                let mut sq = 0.0;
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, &kj) in k.iter().enumerate() {
                        acc += lifted[(i, j)] * kj as f64;
                    }
                    sq += acc * acc;
                }
                let norm = sq.sqrt();
                if norm <= out.min_norm {
                    let sup = k.iter().map(|v| v.abs()).max().unwrap_or(0);
                    if norm < out.min_norm || sup < out.argmin_sup {
                        out.min_norm = norm;
                        out.argmin = lin;
                        out.argmin_sup = sup;
                    }
                }
                if norm < hard_tolerance {
                    out.violation_count += 1;
                    if out.violations.len() < MAX_STORED_VIOLATIONS {
                        out.violations.push(lin);
                    }
                } else if norm < NEAR_RESONANCE_THRESHOLD {
                    out.near += 1;
                }
            }
            out
        })
        .collect();

    let mut min_norm = f64::INFINITY;
    let mut argmin = usize::MAX;
    let mut argmin_sup = i64::MAX;
    let mut violations = Vec::new();
    let mut violation_count = 0;
    let mut near_resonances = 0;
    for chunk in chunks {
        if chunk.min_norm < min_norm || (chunk.min_norm == min_norm && chunk.argmin_sup < argmin_sup) {
            min_norm = chunk.min_norm;
            argmin = chunk.argmin;
            argmin_sup = chunk.argmin_sup;
        }
        violation_count += chunk.violation_count;
        near_resonances += chunk.near;
        for lin in chunk.violations {
            if violations.len() < MAX_STORED_VIOLATIONS {
                let mut k = vec![0i64; m];
                decode(lin, &mut k);
                violations.push(k);
            }
        }
    }
    let mut argmin_k = vec![0i64; m];
    decode(argmin, &mut argmin_k);
    if near_resonances > 0 {
        log::warn!(
            "{near_resonances} near-resonant frequencies with |R*k| < {NEAR_RESONANCE_THRESHOLD:e} (k_max={k_max})"
        );
    }
    Ok(DiophantineReport {
        k_max,
        hard_tolerance,
        min_norm,
        argmin_k,
        violations,
        violation_count,
        near_resonances,
    })
}

/// How a periodic field is evaluated off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Multilinear interpolation between the `2ᵐ` surrounding nodes.
    Trilinear,
    /// Exact evaluation of the discrete Fourier series.
    #[default]
    Fourier,
}

/// A quasi-crystalline field `x ↦ σ(Rx)` with `σ` sampled on the cell grid.
#[derive(Debug, Clone)]
pub struct QuasiperiodicField {
    map: CutProjectMap,
    sigma: SpectralField,
    interpolation: Interpolation,
    // Nonzero Fourier modes of sigma: (signed frequency, per-component coefficient).
    spectrum: Vec<(Vec<i64>, Vec<Complex64>)>,
}

impl QuasiperiodicField {
    pub fn new(
        map: CutProjectMap,
        sigma: SpectralField,
        interpolation: Interpolation,
    ) -> Result<Self> {
        if sigma.cell().grid_shape() != map.cell().grid_shape() {
            return Err(invalid(format!(
                "field grid {:?} does not match map grid {:?}",
                sigma.cell().grid_shape(),
                map.cell().grid_shape()
            )));
        }
        if sigma.cell().basis() != map.cell().basis() {
            return Err(invalid("field cell basis differs from the map cell basis"));
        }
        let spectrum = sparse_spectrum(&sigma);
        Ok(Self {
            map,
            sigma,
            interpolation,
            spectrum,
        })
    }

    pub fn map(&self) -> &CutProjectMap {
        &self.map
    }

    pub fn sigma(&self) -> &SpectralField {
        &self.sigma
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Cell average of σ, which is the ergodic mean of `σ∘R` for a
    /// diophantine map. Unvalidated maps are checked at the default `k_max`.
    pub fn ergodic_mean(&self) -> Result<Vec<f64>> {
        if !self.map.is_validated() {
            let report = check_diophantine(&self.map, DEFAULT_K_MAX, DEFAULT_HARD_TOLERANCE)?;
            if !report.violations.is_empty() {
                return Err(Error::Diophantine {
                    violations: report.violations,
                    context: "ergodic mean not uniquely defined".into(),
                });
            }
        }
        Ok(self.sigma.mean())
    }

    /// Evaluates σ at a physical point of `ℝᵐ`, reducing it into the cell.
    pub fn evaluate_lifted(&self, y: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self
            .map
            .cell()
            .cell_coordinates(y)
            .into_iter()
            .map(|v| v - v.floor())
            .collect();
        match self.interpolation {
            Interpolation::Fourier => self.fourier_eval(&s),
            Interpolation::Trilinear => self.multilinear_eval(&s),
        }
    }

    /// `σ(Rx)` for each slice point.
    pub fn sample_slice(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.map.n();
        for (i, p) in points.iter().enumerate() {
            if p.len() != n {
                return Err(invalid(format!(
                    "point {i} has {} coordinates, expected n={n}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("point {i} is not finite")));
            }
        }
        Ok(points
            .par_iter()
            .map(|x| self.evaluate_lifted(&self.map.apply(x)))
            .collect())
    }

    /// Largest `|R*k|` over the nonzero modes of σ.
    pub fn max_slice_frequency(&self) -> f64 {
        self.spectrum
            .iter()
            .filter(|(k, _)| k.iter().any(|&v| v != 0))
            .map(|(k, _)| self.map.dual_frequency(k).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    fn fourier_eval(&self, s: &[f64]) -> Vec<f64> {
        let d = self.sigma.components();
        let mut out = vec![0.0; d];
        for (k, c) in &self.spectrum {
            let phase: f64 = 2.0 * PI * k.iter().zip(s).map(|(&k, &s)| k as f64 * s).sum::<f64>();
            let e = Complex64::new(phase.cos(), phase.sin());
            for (o, ci) in out.iter_mut().zip(c) {
                *o += (ci * e).re;
            }
        }
        out
    }

    fn multilinear_eval(&self, s: &[f64]) -> Vec<f64> {
        let cell = self.sigma.cell();
        let shape = cell.grid_shape();
        let m = shape.len();
        let d = self.sigma.components();
        let mut lo = vec![0usize; m];
        let mut t = vec![0.0; m];
        for a in 0..m {
            let g = s[a] * shape[a] as f64;
            let i = g.floor();
            t[a] = g - i;
            lo[a] = (i as usize) % shape[a];
        }
        let mut out = vec![0.0; d];
        let mut idx = vec![0usize; m];
        for corner in 0..(1usize << m) {
            let mut w = 1.0;
            for a in 0..m {
                if corner >> a & 1 == 1 {
                    idx[a] = (lo[a] + 1) % shape[a];
                    w *= t[a];
                } else {
                    idx[a] = lo[a];
                    w *= 1.0 - t[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let v = self.sigma.node_value(cell.linear_index(&idx));
            for (o, vi) in out.iter_mut().zip(v) {
                *o += w * vi;
            }
        }
        out
    }
}

fn sparse_spectrum(sigma: &SpectralField) -> Vec<(Vec<i64>, Vec<Complex64>)> {
    let spec = sigma.forward_transform();
    let coeffs = spec.coeffs().expect("forward transform populates coefficients");
    let d = sigma.components();
    let peak = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let cutoff = 1e-15 * peak;
    let cell = sigma.cell();
    (0..cell.node_count())
        .filter_map(|mode| {
            let c = &coeffs[mode * d..(mode + 1) * d];
            if c.iter().all(|v| v.norm() <= cutoff) {
                None
            } else {
                Some((crate::fourier::signed_mode(cell, mode), c.to_vec()))
            }
        })
        .collect()
}

/// 8-bit grayscale raster, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Rasterizes the strip-projection indicator of a 5→2 map.
///
/// A pixel at `x` lifts to `y = Rx`; it is lit when the perpendicular
/// component of `y` relative to its nearest lattice point lies strictly
/// inside the cube window `|·|∞ < window_radius` of the 3-dimensional
/// orthogonal complement of `range(R)`.
pub fn penrose_demo(
    map: &CutProjectMap,
    window_radius: f64,
    extent: f64,
    resolution: usize,
) -> Result<GrayImage> {
    if map.m() != 5 || map.n() != 2 {
        return Err(Error::UnsupportedDemo(format!(
            "penrose demo needs a 5x2 map, got {}x{}",
            map.m(),
            map.n()
        )));
    }
    if !(window_radius >= 0.0) || !window_radius.is_finite() {
        return Err(invalid("window_radius must be finite and >= 0"));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(invalid("extent must be finite and > 0"));
    }
    if resolution == 0 {
        return Err(invalid("resolution must be >= 1"));
    }
    let perp = perpendicular_basis(map.matrix());
    let cell = map.cell();
    let h = 2.0 * extent / resolution as f64;
    let rows: Vec<Vec<u8>> = (0..resolution)
        .into_par_iter()
        .map(|row| {
            let x2 = extent - (row as f64 + 0.5) * h;
            (0..resolution)
                .map(|col| {
                    let x1 = -extent + (col as f64 + 0.5) * h;
                    let y = map.apply(&[x1, x2]);
                    let s: Vec<f64> = cell
                        .cell_coordinates(&y)
                        .into_iter()
                        .map(|v| v - v.round())
                        .collect();
                    let offset = cell.physical_point(&s);
                    let inside = perp.iter().all(|p| {
                        let c: f64 = p.iter().zip(&offset).map(|(a, b)| a * b).sum();
                        c.abs() < window_radius
                    });
                    if inside {
                        255
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    Ok(GrayImage {
        width: resolution,
        height: resolution,
        pixels: rows.concat(),
    })
}

/// Orthonormal basis of `range(R)^⊥`, ordered by eigenvector index.
fn perpendicular_basis(r: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let m = r.nrows();
    let gram = r.transpose() * r;
    let gram_inv = gram.try_inverse().expect("full column rank");
    let proj = DMatrix::<f64>::identity(m, m) - r * gram_inv * r.transpose();
    let eig = SymmetricEigen::new(proj);
    let mut cols: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .filter(|(&l, _)| l > 0.5)
        .map(|(&l, v)| (l, v.into_owned()))
        .collect();
    cols.sort_by(|a, b| a.0.total_cmp(&b.0));
    cols.into_iter().map(|(_, v)| v.as_slice().to_vec()).collect()
}
