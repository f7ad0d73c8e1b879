//! Periodic fields on the cell grid, their discrete Fourier coefficients,
//! and the projection onto lifted-operator-free, mean-zero fields.
//!
//! Coefficients are normalized so that the `k = 0` coefficient is the grid
//! mean: `ŵ_k = N⁻¹ Σ_j w(s_j) e^{-2πi k·s_j}`. Modes are stored in the
//! same row-major order as the grid nodes; axis index `i` stands for the
//! signed frequency `i` when `i < N/2` and `i − N` otherwise, so the
//! Nyquist index `N/2` is read as `−N/2`.
//!
//! Binary field files (`.qlhf`) are a 32-byte header followed by the values
//! as little-endian `f64`, node-major with the component index fastest:
//!
//! ```text
//! offset  size  content
//!      0     4  magic "QLHF"
//!      4     4  version (u32 LE, currently 1)
//!      8     4  m, cell dimension (u32 LE, 1..=8)
//!     12     4  d, components per node (u32 LE)
//!     16    16  grid_shape as 8 × u16 LE, unused trailing entries 0
//!     32  8·N·d values
//! ```

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutproject::{CellLattice, CutProjectMap};
use crate::error::{invalid, Error, Result};
use crate::fft::FftNd;
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::operator::{kernel_projector_of, symbol, OperatorSpec, DEFAULT_SVD_REL_TOL};

pub const FIELD_MAGIC: &[u8; 4] = b"QLHF";
pub const FIELD_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const MAX_HEADER_DIMS: usize = 8;

/// A real `d`-component field sampled on the uniform grid of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    cell: CellLattice,
    components: usize,
    values: Vec<f64>,
    coeffs: Option<Vec<Complex64>>,
}

impl SpectralField {
    pub fn new(cell: CellLattice, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 {
            return Err(invalid("field must have at least one component"));
        }
        let expected = cell.node_count() * components;
        if values.len() != expected {
            return Err(invalid(format!(
                "field has {} values, grid {:?} with d={components} needs {expected}",
                values.len(),
                cell.grid_shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field values must be finite"));
        }
        Ok(Self {
            cell,
            components,
            values,
            coeffs: None,
        })
    }

    pub(crate) fn from_parts(cell: CellLattice, components: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), cell.node_count() * components);
        Self {
            cell,
            components,
            values,
            coeffs: None,
        }
    }

    pub fn zeros(cell: CellLattice, components: usize) -> Self {
        let n = cell.node_count();
        Self::from_parts(cell, components, vec![0.0; n * components])
    }

    pub fn constant(cell: CellLattice, value: &[f64]) -> Self {
        let n = cell.node_count();
        let values = value.iter().copied().cycle().take(n * value.len()).collect();
        Self::from_parts(cell, value.len(), values)
    }

    /// Samples `f(y, out)` at every node, where `y` is the physical node
    /// position `B s`.
    pub fn from_fn<F>(cell: CellLattice, components: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let mut values = vec![0.0; cell.node_count() * components];
        values
            .par_chunks_mut(components)
            .enumerate()
            .for_each(|(i, out)| f(&cell.node_point(i), out));
        Self::new(cell, components, values)
    }

    pub fn cell(&self) -> &CellLattice {
        &self.cell
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn coeffs(&self) -> Option<&[Complex64]> {
        self.coeffs.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.cell.node_count()
    }

    pub fn node_value(&self, node: usize) -> &[f64] {
        &self.values[node * self.components..(node + 1) * self.components]
    }

    /// Grid mean per component (compensated sums).
    pub fn mean(&self) -> Vec<f64> {
        let d = self.components;
        let n = self.node_count() as f64;
        (0..d)
            .map(|c| compensated_sum(self.values.iter().skip(c).step_by(d).copied()) / n)
            .collect()
    }

    /// Root-mean-square of the pointwise Euclidean norm.
    pub fn rms(&self) -> f64 {
        (compensated_sum(self.values.iter().map(|v| v * v)) / self.node_count() as f64).sqrt()
    }

    /// `a·u + b·v` on a shared grid.
    pub fn linear_combination(a: f64, u: &SpectralField, b: f64, v: &SpectralField) -> Result<Self> {
        if u.cell != v.cell || u.components != v.components {
            return Err(invalid("fields live on different grids or have different component counts"));
        }
        let values = u.values.iter().zip(&v.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self::from_parts(u.cell.clone(), u.components, values))
    }

    /// Copy of the field with its Fourier coefficients populated.
    pub fn forward_transform(&self) -> SpectralField {
        if self.coeffs.is_some() {
            return self.clone();
        }
        let ws = SpectralWorkspace::new(&self.cell, self.components);
        Self {
            coeffs: Some(ws.forward(&self.values)),
            ..self.clone()
        }
    }

    /// Builds the real field whose coefficients are `coeffs` (layout as in
    /// the module docs). The coefficients must be conjugate-symmetric to
    /// `1e-12` relative to the largest one.
    pub fn from_coeffs(cell: CellLattice, components: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if components == 0 || coeffs.len() != cell.node_count() * components {
            return Err(invalid(format!(
                "coefficient array has {} entries, expected {}",
                coeffs.len(),
                cell.node_count() * components
            )));
        }
        let defect = conjugate_symmetry_defect(&cell, components, &coeffs);
        let peak = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if defect > 1e-12 * peak {
            return Err(invalid(format!(
                "coefficients are not conjugate-symmetric (defect {defect:e} vs peak {peak:e})"
            )));
        }
        Ok(Self::from_coeffs_trusted(cell, components, coeffs))
    }

    pub(crate) fn from_coeffs_trusted(cell: CellLattice, components: usize, coeffs: Vec<Complex64>) -> Self {
        let ws = SpectralWorkspace::new(&cell, components);
        let values = ws.inverse(&coeffs);
        Self {
            cell,
            components,
            values,
            coeffs: Some(coeffs),
        }
    }

    /// Square partial sum: zeroes every coefficient with `|k|∞ > max_mode`.
    pub fn truncate(&self, max_mode: usize) -> SpectralField {
        let spec = self.forward_transform();
        let mut coeffs = spec.coeffs.expect("populated by forward_transform");
        let d = self.components;
        for mode in 0..self.node_count() {
            let k = signed_mode(&self.cell, mode);
            if k.iter().any(|&v| v.unsigned_abs() as usize > max_mode) {
                coeffs[mode * d..(mode + 1) * d].fill(Complex64::default());
            }
        }
        Self::from_coeffs_trusted(self.cell.clone(), d, coeffs)
    }

    /// Serializes to the `.qlhf` layout described in the module docs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = self.cell.grid_shape();
        if shape.len() > MAX_HEADER_DIMS {
            return Err(invalid(format!("field files support m <= {MAX_HEADER_DIMS}")));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.components as u32).to_le_bytes());
        for a in 0..MAX_HEADER_DIMS {
            let g = shape.get(a).copied().unwrap_or(0);
            let g = u16::try_from(g).map_err(|_| invalid(format!("grid axis {g} exceeds u16")))?;
            out.extend_from_slice(&g.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses a `.qlhf` buffer onto the unit cell.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, d, values) = parse_field_bytes(bytes)?;
        Self::new(CellLattice::unit(shape)?, d, values)
    }

    /// Parses a `.qlhf` buffer onto a given cell, whose grid must match.
    pub fn from_bytes_on(bytes: &[u8], cell: CellLattice) -> Result<Self> {
        let (shape, d, values) = parse_field_bytes(bytes)?;
        if shape != cell.grid_shape() {
            return Err(invalid(format!(
                "file grid {shape:?} does not match cell grid {:?}",
                cell.grid_shape()
            )));
        }
        Self::new(cell, d, values)
    }
}

fn parse_field_bytes(bytes: &[u8]) -> Result<(Vec<usize>, usize, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(invalid("field file shorter than its 32-byte header"));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(invalid("bad field magic (expected QLHF)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FIELD_VERSION {
        return Err(invalid(format!("unsupported field version {version}")));
    }
    let m = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    if m == 0 || m > MAX_HEADER_DIMS || d == 0 {
        return Err(invalid(format!("bad field header: m={m}, d={d}")));
    }
    let shape: Vec<usize> = (0..m)
        .map(|a| u16::from_le_bytes([bytes[16 + 2 * a], bytes[17 + 2 * a]]) as usize)
        .collect();
    let count = shape.iter().product::<usize>() * d;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 8 * count {
        return Err(invalid(format!(
            "field payload has {} bytes, header implies {}",
            payload.len(),
            8 * count
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((shape, d, values))
}

/// Signed frequency of a storage mode index.
pub fn signed_mode(cell: &CellLattice, mode: usize) -> Vec<i64> {
    cell.node_index(mode)
        .iter()
        .zip(cell.grid_shape())
        .map(|(&i, &n)| if i < n / 2 { i as i64 } else { i as i64 - n as i64 })
        .collect()
}

/// Whether any axis of the mode sits at the Nyquist index.
pub fn is_nyquist_mode(cell: &CellLattice, mode: usize) -> bool {
    cell.node_index(mode)
        .iter()
        .zip(cell.grid_shape())
        .any(|(&i, &n)| i == n / 2)
}

fn mirror_mode(cell: &CellLattice, mode: usize) -> usize {
    let idx: Vec<usize> = cell
        .node_index(mode)
        .iter()
        .zip(cell.grid_shape())
        .map(|(&i, &n)| (n - i) % n)
        .collect();
    cell.linear_index(&idx)
}

/// `max_k |ŵ_{−k} − conj(ŵ_k)|`.
pub fn conjugate_symmetry_defect(cell: &CellLattice, components: usize, coeffs: &[Complex64]) -> f64 {
    let d = components;
    (0..cell.node_count())
        .map(|mode| {
            let mirror = mirror_mode(cell, mode);
            (0..d)
                .map(|c| (coeffs[mirror * d + c] - coeffs[mode * d + c].conj()).norm())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Reusable FFT plans for one grid and component count.
pub(crate) struct SpectralWorkspace {
    fft: FftNd,
    nodes: usize,
    d: usize,
}

impl SpectralWorkspace {
    pub(crate) fn new(cell: &CellLattice, d: usize) -> Self {
        Self {
            fft: FftNd::new(cell.grid_shape()),
            nodes: cell.node_count(),
            d,
        }
    }

    pub(crate) fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let (n, d) = (self.nodes, self.d);
        let scale = 1.0 / n as f64;
        let mut out = vec![Complex64::default(); n * d];
        let mut buf = vec![Complex64::default(); n];
        for c in 0..d {
            for (b, v) in buf.iter_mut().zip(values.iter().skip(c).step_by(d)) {
                *b = Complex64::new(*v, 0.0);
            }
            self.fft.forward(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                out[i * d + c] = b * scale;
            }
        }
        out
    }

    /// Real part of the inverse transform.
    pub(crate) fn inverse(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let (n, d) = (self.nodes, self.d);
        let mut out = vec![0.0; n * d];
        let mut buf = vec![Complex64::default(); n];
        for c in 0..d {
            for (b, v) in buf.iter_mut().zip(coeffs.iter().skip(c).step_by(d)) {
                *b = *v;
            }
            self.fft.inverse(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                out[i * d + c] = b.re;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    /// The mean that was removed (the `k = 0` coefficient before projection).
    pub removed_mean: Vec<f64>,
    /// `(Σ_k |𝔸(Rᵀk/|Rᵀk|) v̂_k|²)^{1/2}` after projection, on the same
    /// scale as the field RMS.
    pub residual_norm: f64,
    /// Modes whose coefficient was changed by the projection.
    pub modes_touched: usize,
}

/// Per-mode orthogonal projectors onto `ker 𝔸(Rᵀk)` for one operator, map
/// and grid. The mean mode and Nyquist modes map to zero, as do modes beyond
/// an optional band limit.
#[derive(Debug, Clone)]
pub struct ConstraintProjector {
    op: OperatorSpec,
    map: CutProjectMap,
    d: usize,
    band_limit: Option<usize>,
    matrices: Vec<f64>,
}

impl ConstraintProjector {
    pub fn new(op: &OperatorSpec, map: &CutProjectMap) -> Result<Self> {
        Self::with_options(op, map, DEFAULT_SVD_REL_TOL, None)
    }

    pub fn with_options(
        op: &OperatorSpec,
        map: &CutProjectMap,
        svd_rel_tol: f64,
        band_limit: Option<usize>,
    ) -> Result<Self> {
        let validation = map.validation().ok_or_else(|| {
            Error::UnvalidatedMap("projection needs a map that passed the diophantine check".into())
        })?;
        if op.n() != map.n() {
            return Err(invalid(format!(
                "operator acts on n={} variables but the map slice has n={}",
                op.n(),
                map.n()
            )));
        }
        let cell = map.cell();
        let d = op.d();
        let mut matrices = vec![0.0; cell.node_count() * d * d];
        let hard = validation.hard_tolerance;
        matrices
            .par_chunks_mut(d * d)
            .enumerate()
            .try_for_each(|(mode, out)| -> Result<()> {
                if mode == 0 || is_nyquist_mode(cell, mode) {
                    return Ok(());
                }
                let k = signed_mode(cell, mode);
                if let Some(limit) = band_limit {
                    if k.iter().any(|&v| v.unsigned_abs() as usize > limit) {
                        return Ok(());
                    }
                }
                let w = map.dual_frequency(&k);
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < hard {
                    return Err(Error::Diophantine {
                        violations: vec![k],
                        context: "grid frequency with R*k = 0 inside the projection band".into(),
                    });
                }
                let p = kernel_projector_of(&symbol(op, &w)?, svd_rel_tol);
                for r in 0..d {
                    for c in 0..d {
                        out[r * d + c] = p[(r, c)];
                    }
                }
                Ok(())
            })?;
        Ok(Self {
            op: op.clone(),
            map: map.clone(),
            d,
            band_limit,
            matrices,
        })
    }

    pub fn components(&self) -> usize {
        self.d
    }

    pub fn cell(&self) -> &CellLattice {
        self.map.cell()
    }

    pub fn band_limit(&self) -> Option<usize> {
        self.band_limit
    }

    pub fn mode_matrix(&self, mode: usize) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_row_slice(d, d, &self.matrices[mode * d * d..(mode + 1) * d * d])
    }

    pub(crate) fn mode_slice(&self, mode: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.matrices[mode * dd..(mode + 1) * dd]
    }

    /// Dimension of the admissible subspace at one mode (trace of its projector).
    pub fn kernel_dimension(&self, mode: usize) -> usize {
        let d = self.d;
        let tr: f64 = (0..d).map(|i| self.matrices[mode * d * d + i * d + i]).sum();
        tr.round() as usize
    }

    /// Applies the per-mode projectors to a coefficient array in place.
    pub(crate) fn apply_coeffs(&self, coeffs: &mut [Complex64]) {
        let d = self.d;
        coeffs
            .par_chunks_mut(d)
            .zip(self.matrices.par_chunks(d * d))
            .for_each_init(
                || vec![Complex64::default(); d],
                |tmp, (c, p)| {
                    if d == 1 {
                        c[0] *= p[0];
                        return;
                    }
                    for r in 0..d {
                        let mut acc = Complex64::default();
                        for (j, cj) in c.iter().enumerate() {
                            acc += cj * p[r * d + j];
                        }
                        tmp[r] = acc;
                    }
                    c.copy_from_slice(tmp);
                },
            );
    }

    /// Projects a field onto the admissible mean-zero subspace.
    pub fn apply(&self, field: &SpectralField) -> Result<(SpectralField, ProjectionStats)> {
        if field.cell() != self.cell() {
            return Err(invalid(format!(
                "field grid {:?} does not match projector grid {:?}",
                field.cell().grid_shape(),
                self.cell().grid_shape()
            )));
        }
        if field.components() != self.d {
            return Err(invalid(format!(
                "field has d={} components, operator expects d={}",
                field.components(),
                self.d
            )));
        }
        let d = self.d;
        let spec = field.forward_transform();
        let before = spec.coeffs.expect("populated by forward_transform");
        let mut coeffs = before.clone();
        self.apply_coeffs(&mut coeffs);
        let removed_mean = before[..d].iter().map(|c| c.re).collect();
        let modes_touched = (0..self.cell().node_count())
            .filter(|&mode| {
                let a = &before[mode * d..(mode + 1) * d];
                let b = &coeffs[mode * d..(mode + 1) * d];
                a.iter().zip(b).any(|(x, y)| (x - y).norm() > 1e-14 * (x.norm() + 1e-300))
            })
            .count();
        let residual_norm = self.symbol_residual(&coeffs)?;
        let out = SpectralField::from_coeffs_trusted(self.cell().clone(), d, coeffs);
        Ok((
            out,
            ProjectionStats {
                removed_mean,
                residual_norm,
                modes_touched,
            },
        ))
    }

    fn symbol_residual(&self, coeffs: &[Complex64]) -> Result<f64> {
        let d = self.d;
        let cell = self.cell();
        let parts: Vec<f64> = (0..cell.node_count())
            .into_par_iter()
            .map(|mode| -> Result<f64> {
                if mode == 0 || is_nyquist_mode(cell, mode) {
                    return Ok(0.0);
                }
                let w = self.map.dual_frequency(&signed_mode(cell, mode));
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit: Vec<f64> = w.iter().map(|v| v / norm).collect();
                let a = symbol(&self.op, &unit)?;
                let c = &coeffs[mode * d..(mode + 1) * d];
                let mut sq = 0.0;
                for r in 0..a.nrows() {
                    let mut acc = Complex64::default();
                    for (j, cj) in c.iter().enumerate() {
                        acc += cj * a[(r, j)];
                    }
                    sq += acc.norm_sqr();
                }
                Ok(sq)
            })
            .collect::<Result<_>>()?;
        let mut acc = CompensatedSum::new();
        for p in parts {
            acc.add(p);
        }
        Ok(acc.value().sqrt())
    }
}

/// One-shot projection onto `𝒜_{R*}`-free, mean-zero fields.
pub fn project_ar_free(
    field: &SpectralField,
    op: &OperatorSpec,
    map: &CutProjectMap,
) -> Result<(SpectralField, ProjectionStats)> {
    if field.cell() != map.cell() {
        return Err(invalid("field cell differs from the map cell"));
    }
    ConstraintProjector::new(op, map)?.apply(field)
}

/// Builds the curl-case corrector field with coefficients `ŵ_k = λ_k Rᵀk`.
///
/// `lambdas` maps frequencies to coefficients; it must omit `k = 0` (or
/// set it to zero), satisfy `λ_{−k} = −conj(λ_k)` so that `ŵ` is
/// conjugate-symmetric, and stay strictly inside the grid band
/// (`|k_j| < N_j/2`).
pub fn synthesize_g_r(map: &CutProjectMap, lambdas: &BTreeMap<Vec<i64>, Complex64>) -> Result<SpectralField> {
    let cell = map.cell();
    let n = map.n();
    let m = map.m();
    let peak = lambdas.values().map(|c| c.norm()).fold(0.0, f64::max);
    let mut coeffs = vec![Complex64::default(); cell.node_count() * n];
    for (k, &lambda) in lambdas {
        if k.len() != m {
            return Err(invalid(format!("frequency {k:?} has {} entries, expected m={m}", k.len())));
        }
        if k.iter().all(|&v| v == 0) {
            if lambda.norm() != 0.0 {
                return Err(invalid("lambda at k = 0 must vanish"));
            }
            continue;
        }
        let mut idx = Vec::with_capacity(m);
        for (&kj, &nj) in k.iter().zip(cell.grid_shape()) {
            if kj.unsigned_abs() as usize >= nj / 2 {
                return Err(invalid(format!("frequency {k:?} is outside the grid band {:?}", cell.grid_shape())));
            }
            idx.push(kj.rem_euclid(nj as i64) as usize);
        }
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        let partner = lambdas.get(&neg).copied().unwrap_or_default();
        if (partner + lambda.conj()).norm() > 1e-14 * peak.max(f64::MIN_POSITIVE) {
            return Err(invalid(format!(
                "lambdas do not give a real field at {k:?}: lambda(-k) must equal -conj(lambda(k))"
            )));
        }
        let mode = cell.linear_index(&idx);
        let w = map.dual_frequency(k);
        for (c, wc) in w.iter().enumerate() {
            coeffs[mode * n + c] = lambda * *wc;
        }
    }
    Ok(SpectralField::from_coeffs_trusted(cell.clone(), n, coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(shape: &[usize]) -> CellLattice {
        CellLattice::unit(shape.to_vec()).unwrap()
    }

    #[test]
    fn constant_field_has_only_mean_coefficient() {
        let f = SpectralField::constant(unit(&[8, 8]), &[3.5]).forward_transform();
        let c = f.coeffs().unwrap();
        assert!((c[0] - Complex64::new(3.5, 0.0)).norm() < 1e-14);
        assert!(c[1..].iter().all(|v| v.norm() < 1e-14));
    }

    #[test]
    fn cosine_splits_into_two_halves() {
        let cell = unit(&[16, 16]);
        let f = SpectralField::from_fn(cell.clone(), 1, |y, o| o[0] = (2.0 * PI * y[0]).cos())
            .unwrap()
            .forward_transform();
        let c = f.coeffs().unwrap();
        let plus = cell.linear_index(&[1, 0]);
        let minus = cell.linear_index(&[15, 0]);
        for (mode, v) in c.iter().enumerate() {
            let expect = if mode == plus || mode == minus { 0.5 } else { 0.0 };
            assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-14, "mode {mode}: {v}");
        }
    }

    #[test]
    fn signed_modes_and_nyquist() {
        let cell = unit(&[4, 6]);
        assert_eq!(signed_mode(&cell, cell.linear_index(&[3, 5])), vec![-1, -1]);
        assert_eq!(signed_mode(&cell, cell.linear_index(&[2, 3])), vec![-2, -3]);
        assert!(is_nyquist_mode(&cell, cell.linear_index(&[2, 0])));
        assert!(!is_nyquist_mode(&cell, cell.linear_index(&[1, 5])));
    }

    #[test]
    fn from_coeffs_rejects_asymmetric_spectrum() {
        let cell = unit(&[4, 4]);
        let mut c = vec![Complex64::default(); 16];
        c[1] = Complex64::new(1.0, 0.0);
        assert!(SpectralField::from_coeffs(cell, 1, c).is_err());
    }

    #[test]
    fn binary_header_is_32_bytes() {
        let cell = unit(&[4, 2]);
        let f = SpectralField::from_fn(cell, 3, |y, o| {
            o[0] = y[0];
            o[1] = y[1];
            o[2] = -1.25;
        })
        .unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"QLHF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..20], &[4, 0, 2, 0]);
        assert!(bytes[20..32].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 32 + 8 * 8 * 3);
        // node (0,1) sits at y = (0, 0.5); its second component starts at byte 32 + 8*(3+1).
        assert_eq!(f64::from_le_bytes(bytes[64..72].try_into().unwrap()), 0.5);
        let back = SpectralField::from_bytes(&bytes).unwrap();
        assert_eq!(back.values(), f.values());
        assert!(SpectralField::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn projection_needs_validated_map() {
        let map = CutProjectMap::golden_ratio(vec![8, 8]).unwrap();
        let op = OperatorSpec::preset("curl1").unwrap();
        let f = SpectralField::zeros(map.cell().clone(), 1);
        assert!(matches!(project_ar_free(&f, &op, &map), Err(Error::UnvalidatedMap(_))));
    }

    #[test]
    fn constant_field_projects_to_zero() {
        let map = CutProjectMap::golden_ratio(vec![8, 8]).unwrap().validate(8, 1e-12).unwrap();
        let op = OperatorSpec::preset("curl1").unwrap();
        let f = SpectralField::constant(map.cell().clone(), &[2.0]);
        let (p, stats) = project_ar_free(&f, &op, &map).unwrap();
        assert!(p.values().iter().all(|v| v.abs() < 1e-14));
        assert!((stats.removed_mean[0] - 2.0).abs() < 1e-14);
        assert_eq!(stats.modes_touched, 1);
    }

    #[test]
    fn truncation_limits() {
        let cell = unit(&[16, 16]);
        let f = SpectralField::from_fn(cell, 1, |y, o| {
            o[0] = (2.0 * PI * y[0]).sin() + 0.3 * (2.0 * PI * (2.0 * y[0] - 3.0 * y[1])).cos()
        })
        .unwrap();
        let t0 = f.truncate(0);
        assert!(t0.values().iter().all(|v| v.abs() < 1e-14));
        let full = f.truncate(8);
        for (a, b) in full.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let t1 = f.truncate(1);
        for (i, v) in t1.values().iter().enumerate() {
            let y = t1.cell().node_point(i);
            assert!((v - (2.0 * PI * y[0]).sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn synthesize_rejects_bad_lambdas() {
        let map = CutProjectMap::golden_ratio(vec![8, 8]).unwrap();
        let mut l = BTreeMap::new();
        l.insert(vec![1, 0], Complex64::new(0.5, 0.0));
        assert!(synthesize_g_r(&map, &l).is_err());
        l.insert(vec![-1, 0], Complex64::new(0.5, 0.0));
        assert!(synthesize_g_r(&map, &l).is_err());
        l.insert(vec![-1, 0], Complex64::new(-0.5, 0.0));
        assert!(synthesize_g_r(&map, &l).is_ok());
        l.insert(vec![4, 0], Complex64::new(0.5, 0.0));
        assert!(synthesize_g_r(&map, &l).is_err());
        assert!(synthesize_g_r(&map, &BTreeMap::new()).unwrap().values().iter().all(|&v| v == 0.0));
    }
}
