//! The cell problem
//!
//! ```text
//! f_hom(ξ) = inf { ⨍_Y f(y, ξ + v(y)) dy : v mean-zero, 𝒜_{R*}-free }
//! ```
//!
//! solved over band-limited fields on the cell grid. Quadratic densities use
//! preconditioned conjugate gradients on the constrained subspace; convex C¹
//! densities use projected gradient descent with Armijo backtracking. Both
//! start from the admissible field `v = 0`, so every reported energy is
//! bounded by the unrelaxed mean `⨍ f(y, ξ) dy`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutproject::{CellLattice, CutProjectMap};
use crate::error::{invalid, Error, Result};
use crate::fourier::{ConstraintProjector, SpectralField, SpectralWorkspace};
use crate::numeric::{compensated_mean, compensated_sum};
use crate::operator::{check_constant_rank, OperatorSpec, DEFAULT_SVD_REL_TOL};

pub const DEFAULT_QUADRATIC_TOL: f64 = 1e-8;
pub const DEFAULT_CONVEX_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;

const ENERGY_SLACK: f64 = 1e-12;
const GRADIENT_CHECK_POINTS: usize = 8;
const GRADIENT_CHECK_TOL: f64 = 1e-5;

/// Growth metadata `0 ≤ f(y, ξ) ≤ C (1 + |ξ|^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub c: f64,
    pub p: f64,
}

impl Growth {
    pub fn bound(&self, xi: &[f64]) -> f64 {
        self.c * (1.0 + norm(xi).powf(self.p))
    }
}

/// `f(y, ξ) = ξ·A(y)ξ + b(y)·ξ + c(y)` sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct QuadraticDensity {
    d: usize,
    a: SpectralField,
    b: Option<SpectralField>,
    c: Option<SpectralField>,
    growth: Growth,
}

impl QuadraticDensity {
    /// `a` carries the `d × d` matrix of each node row-major (`d²`
    /// components); `b` has `d` components and `c` one. Every `A(y)` must be
    /// symmetric positive definite.
    pub fn new(a: SpectralField, b: Option<SpectralField>, c: Option<SpectralField>) -> Result<Self> {
        let dd = a.components();
        let d = (dd as f64).sqrt().round() as usize;
        if d * d != dd {
            return Err(invalid(format!("A field has {dd} components, not a square d*d")));
        }
        for (name, f, comps) in [("b", &b, d), ("c", &c, 1)] {
            if let Some(f) = f {
                if f.cell() != a.cell() {
                    return Err(invalid(format!("{name} field lives on a different grid than A")));
                }
                if f.components() != comps {
                    return Err(invalid(format!(
                        "{name} field has {} components, expected {comps}",
                        f.components()
                    )));
                }
            }
        }
        let mut lam_max = 0.0f64;
        for node in 0..a.node_count() {
            let m = DMatrix::from_row_slice(d, d, a.node_value(node));
            let asym = (&m - m.transpose()).norm();
            if asym > 1e-12 * m.norm().max(f64::MIN_POSITIVE) {
                return Err(invalid(format!("A(y) is not symmetric at node {node}")));
            }
            let eig = SymmetricEigen::new(m).eigenvalues;
            let lo = eig.min();
            if !(lo > 0.0) {
                return Err(invalid(format!(
                    "A(y) is not positive definite at node {node} (min eigenvalue {lo:e})"
                )));
            }
            lam_max = lam_max.max(eig.max());
        }
        let b_max = b
            .as_ref()
            .map(|f| (0..f.node_count()).map(|i| norm(f.node_value(i))).fold(0.0, f64::max))
            .unwrap_or(0.0);
        let c_max = c
            .as_ref()
            .map(|f| f.values().iter().map(|v| v.abs()).fold(0.0, f64::max))
            .unwrap_or(0.0);
        Ok(Self {
            d,
            a,
            b,
            c,
            growth: Growth {
                c: lam_max + b_max + c_max,
                p: 2.0,
            },
        })
    }

    /// `A(y) = a(y) I_d`.
    pub fn isotropic<F>(cell: CellLattice, d: usize, a: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let field = SpectralField::from_fn(cell, d * d, |y, out| {
            let v = a(y);
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = v;
            }
        })?;
        Self::new(field, None, None)
    }

    /// `A(y) = A₀` everywhere.
    pub fn constant(cell: CellLattice, a0: &DMatrix<f64>) -> Result<Self> {
        if a0.nrows() != a0.ncols() {
            return Err(invalid("constant coefficient must be square"));
        }
        let row_major: Vec<f64> = a0.transpose().as_slice().to_vec();
        Self::new(SpectralField::constant(cell, &row_major), None, None)
    }

    pub fn with_growth(mut self, growth: Growth) -> Self {
        self.growth = growth;
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn cell(&self) -> &CellLattice {
        self.a.cell()
    }

    pub fn a(&self) -> &SpectralField {
        &self.a
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn is_pure(&self) -> bool {
        self.b.is_none() && self.c.is_none()
    }

    pub fn matrix_at(&self, node: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, self.a.node_value(node))
    }

    /// `f(y_node, z)`.
    pub fn value_at(&self, node: usize, z: &[f64]) -> f64 {
        let d = self.d;
        let a = self.a.node_value(node);
        let mut f = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += a[i * d + j] * z[j];
            }
            f += z[i] * row;
        }
        if let Some(b) = &self.b {
            f += dot(b.node_value(node), z);
        }
        if let Some(c) = &self.c {
            f += c.node_value(node)[0];
        }
        f
    }

    /// `∂f/∂ξ(y_node, z) = 2A z + b`.
    pub fn gradient_at(&self, node: usize, z: &[f64], out: &mut [f64]) {
        let d = self.d;
        let a = self.a.node_value(node);
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += a[i * d + j] * z[j];
            }
            out[i] = 2.0 * row;
        }
        if let Some(b) = &self.b {
            for (o, bi) in out.iter_mut().zip(b.node_value(node)) {
                *o += bi;
            }
        }
    }

    /// Unrelaxed mean `⨍ f(y, ξ) dy` (the value at `v = 0`).
    pub fn mean_energy(&self, xi: &[f64]) -> f64 {
        let vals: Vec<f64> = (0..self.a.node_count()).map(|i| self.value_at(i, xi)).collect();
        compensated_mean(&vals)
    }

    /// Arithmetic mean `⨍ A` (Voigt bound).
    pub fn arithmetic_mean(&self) -> DMatrix<f64> {
        let m = self.a.mean();
        DMatrix::from_row_slice(self.d, self.d, &m)
    }

    /// Harmonic mean `(⨍ A⁻¹)⁻¹` (Reuss bound).
    pub fn harmonic_mean(&self) -> DMatrix<f64> {
        let d = self.d;
        let inv: Vec<f64> = (0..self.a.node_count())
            .flat_map(|i| {
                let m = self.matrix_at(i).try_inverse().expect("SPD checked at construction");
                m.transpose().as_slice().to_vec()
            })
            .collect();
        let field = SpectralField::from_parts(self.cell().clone(), d * d, inv);
        DMatrix::from_row_slice(d, d, &field.mean())
            .try_inverse()
            .expect("mean of SPD inverses is SPD")
    }

    /// Presents the sampled density through the convex callback interface.
    /// The callbacks must be evaluated at grid nodes of this density's cell.
    pub fn as_integrand(&self) -> SampledQuadratic {
        SampledQuadratic {
            density: self.clone(),
        }
    }
}

/// Convex C¹ integrand `f(y, ξ)` given by callbacks. `y` is a physical
/// point of the cell; the solvers evaluate it at grid nodes only.
pub trait ConvexIntegrand: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64], xi: &[f64]) -> f64;
    fn gradient(&self, y: &[f64], xi: &[f64], grad: &mut [f64]);
}

/// A [`QuadraticDensity`] behind the callback interface (see
/// [`QuadraticDensity::as_integrand`]).
#[derive(Debug, Clone)]
pub struct SampledQuadratic {
    density: QuadraticDensity,
}

impl SampledQuadratic {
    fn node_of(&self, y: &[f64]) -> usize {
        let cell = self.density.cell();
        let s = cell.cell_coordinates(y);
        let idx: Vec<usize> = s
            .iter()
            .zip(cell.grid_shape())
            .map(|(&s, &n)| ((s * n as f64).round() as i64).rem_euclid(n as i64) as usize)
            .collect();
        cell.linear_index(&idx)
    }
}

impl ConvexIntegrand for SampledQuadratic {
    fn dim(&self) -> usize {
        self.density.d
    }

    fn value(&self, y: &[f64], xi: &[f64]) -> f64 {
        self.density.value_at(self.node_of(y), xi)
    }

    fn gradient(&self, y: &[f64], xi: &[f64], grad: &mut [f64]) {
        self.density.gradient_at(self.node_of(y), xi, grad)
    }
}

/// A convex C¹ density with its growth metadata.
#[derive(Clone)]
pub struct ConvexDensity {
    integrand: Arc<dyn ConvexIntegrand>,
    growth: Growth,
}

impl std::fmt::Debug for ConvexDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvexDensity")
            .field("dim", &self.integrand.dim())
            .field("growth", &self.growth)
            .finish()
    }
}

impl ConvexDensity {
    pub fn new(integrand: Arc<dyn ConvexIntegrand>, growth: Growth) -> Self {
        Self { integrand, growth }
    }

    pub fn dim(&self) -> usize {
        self.integrand.dim()
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn integrand(&self) -> &dyn ConvexIntegrand {
        self.integrand.as_ref()
    }
}

#[derive(Debug, Clone)]
pub enum EnergyDensity {
    Quadratic(QuadraticDensity),
    Convex(ConvexDensity),
}

impl EnergyDensity {
    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::Convex(c) => c.dim(),
        }
    }

    pub fn growth(&self) -> Growth {
        match self {
            Self::Quadratic(q) => q.growth,
            Self::Convex(c) => c.growth,
        }
    }

    fn value(&self, cell: &CellLattice, node: usize, xi: &[f64]) -> f64 {
        match self {
            Self::Quadratic(q) => q.value_at(node, xi),
            Self::Convex(c) => c.integrand.value(&cell.node_point(node), xi),
        }
    }

    /// Checks `0 ≤ f(y, ξ) ≤ C(1 + |ξ|^p)` at `samples` seeded random nodes
    /// and directions with `|ξ|` up to `xi_scale`.
    pub fn check_growth(&self, cell: &CellLattice, samples: usize, xi_scale: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let growth = self.growth();
        let d = self.dim();
        for _ in 0..samples {
            let node = rng.gen_range(0..cell.node_count());
            let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-xi_scale..=xi_scale)).collect();
            let f = self.value(cell, node, &xi);
            if !(f >= 0.0) || f > growth.bound(&xi) * (1.0 + 1e-12) {
                return Err(invalid(format!(
                    "growth bound violated at node {node}, xi={xi:?}: f={f}, bound={}",
                    growth.bound(&xi)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once the projected-gradient RMS falls below `tol` times its
    /// initial value.
    pub tol: f64,
    pub max_iter: usize,
    /// Restrict correctors to modes with `|k|∞ ≤ band_limit`.
    pub band_limit: Option<usize>,
    pub svd_rel_tol: f64,
}

impl SolverOptions {
    pub fn quadratic() -> Self {
        Self {
            tol: DEFAULT_QUADRATIC_TOL,
            max_iter: DEFAULT_MAX_ITER,
            band_limit: None,
            svd_rel_tol: DEFAULT_SVD_REL_TOL,
        }
    }

    pub fn convex() -> Self {
        Self {
            tol: DEFAULT_CONVEX_TOL,
            ..Self::quadratic()
        }
    }

    pub fn with_tol(self, tol: f64) -> Self {
        Self { tol, ..self }
    }

    pub fn with_max_iter(self, max_iter: usize) -> Self {
        Self { max_iter, ..self }
    }

    pub fn with_band_limit(self, band_limit: Option<usize>) -> Self {
        Self { band_limit, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self::quadratic()
    }
}

/// Backtracking line-search parameters for the convex solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    /// Sufficient-decrease constant `c` in `E(v + αd) ≤ E(v) + cα⟨∇E, d⟩`.
    pub armijo: f64,
    /// Step shrink factor per rejected trial.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    /// Minimizing corrector (mean-zero, admissible).
    pub v: SpectralField,
    /// `⨍ f(y, ξ + v(y)) dy` by the grid rule.
    pub energy: f64,
    pub iterations: usize,
    /// Final projected-gradient RMS.
    pub residual: f64,
    pub initial_residual: f64,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

impl CellSolution {
    /// History energies never increase by more than `slack` per step.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.history
            .windows(2)
            .all(|w| w[1].energy <= w[0].energy + slack * w[0].energy.abs().max(1.0))
    }
}

/// Shared per-problem state: constraint projector, FFT plans, and the
/// quantities needed to evaluate `⨍ f(y, ξ + v)` on the grid.
struct Constrained {
    projector: ConstraintProjector,
    ws: SpectralWorkspace,
    d: usize,
    nodes: usize,
}

impl Constrained {
    fn new(dim: usize, density_cell: &CellLattice, op: &OperatorSpec, map: &CutProjectMap, opts: &SolverOptions) -> Result<Self> {
        opts.validate()?;
        if !map.is_validated() {
            return Err(Error::UnvalidatedMap(
                "cell problems need a map that passed the diophantine check".into(),
            ));
        }
        if op.d() != dim {
            return Err(invalid(format!(
                "density acts on d={dim} components but the operator expects d={}",
                op.d()
            )));
        }
        if density_cell != map.cell() {
            return Err(invalid(format!(
                "density grid {:?} differs from the map cell grid {:?}",
                density_cell.grid_shape(),
                map.cell().grid_shape()
            )));
        }
        let rank = check_constant_rank(op, 64, 0, opts.svd_rel_tol)?;
        if !rank.constant_rank {
            return Err(invalid(format!(
                "operator {} fails the constant-rank check (ranks {:?})",
                op.name().unwrap_or("<unnamed>"),
                rank.observed_ranks
            )));
        }
        let projector = ConstraintProjector::with_options(op, map, opts.svd_rel_tol, opts.band_limit)?;
        Ok(Self {
            projector,
            ws: SpectralWorkspace::new(map.cell(), dim),
            d: dim,
            nodes: map.cell().node_count(),
        })
    }

    fn cell(&self) -> &CellLattice {
        self.projector.cell()
    }

    fn project(&self, values: &[f64]) -> Vec<f64> {
        let mut c = self.ws.forward(values);
        self.projector.apply_coeffs(&mut c);
        self.ws.inverse(&c)
    }

    fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        compensated_sum(u.iter().zip(v).map(|(a, b)| a * b)) / self.nodes as f64
    }

    fn rms(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    fn field(&self, values: Vec<f64>) -> SpectralField {
        SpectralField::from_parts(self.cell().clone(), self.d, values)
    }
}

fn check_xi(xi: &[f64], d: usize) -> Result<()> {
    if xi.len() != d {
        return Err(invalid(format!("xi has {} entries, expected d={d}", xi.len())));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(invalid("xi must be finite"));
    }
    Ok(())
}

/// Prepared quadratic cell problem; reusable across macroscopic gradients.
pub struct QuadraticCellProblem<'a> {
    density: &'a QuadraticDensity,
    base: Constrained,
    // Per mode, pinv(P_k Ā P_k) with Ā the arithmetic mean of A.
    green: Vec<f64>,
    opts: SolverOptions,
}

impl<'a> QuadraticCellProblem<'a> {
    pub fn new(density: &'a QuadraticDensity, op: &OperatorSpec, map: &CutProjectMap, opts: SolverOptions) -> Result<Self> {
        let base = Constrained::new(density.d, density.cell(), op, map, &opts)?;
        let reference = density.arithmetic_mean();
        let green = green_operator(&base.projector, &reference);
        Ok(Self {
            density,
            base,
            green,
            opts,
        })
    }

    fn apply_a(&self, v: &[f64]) -> Vec<f64> {
        let d = self.base.d;
        let mut out = vec![0.0; v.len()];
        out.par_chunks_mut(d)
            .zip(v.par_chunks(d))
            .enumerate()
            .for_each(|(node, (o, z))| {
                let a = self.density.a.node_value(node);
                for i in 0..d {
                    o[i] = (0..d).map(|j| a[i * d + j] * z[j]).sum();
                }
            });
        out
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let d = self.base.d;
        let mut c = self.base.ws.forward(r);
        c.par_chunks_mut(d)
            .zip(self.green.par_chunks(d * d))
            .for_each(|(c, g)| {
                let orig: Vec<Complex64> = c.to_vec();
                for i in 0..d {
                    c[i] = (0..d).map(|j| orig[j] * g[i * d + j]).sum();
                }
            });
        self.base.ws.inverse(&c)
    }

    fn energy(&self, xi: &[f64], v: &[f64]) -> f64 {
        let d = self.base.d;
        let vals: Vec<f64> = v
            .par_chunks(d)
            .enumerate()
            .map(|(node, vn)| {
                let z: Vec<f64> = xi.iter().zip(vn).map(|(a, b)| a + b).collect();
                self.density.value_at(node, &z)
            })
            .collect();
        compensated_mean(&vals)
    }

    /// Negative projected half-gradient `−P(A(ξ + v) + b/2)`.
    fn residual(&self, xi: &[f64], v: &[f64]) -> Vec<f64> {
        let d = self.base.d;
        let z: Vec<f64> = v.chunks(d).flat_map(|vn| xi.iter().zip(vn).map(|(a, b)| a + b).collect::<Vec<_>>()).collect();
        let mut g = self.apply_a(&z);
        if let Some(b) = &self.density.b {
            for (gi, bi) in g.iter_mut().zip(b.values()) {
                *gi += 0.5 * bi;
            }
        }
        self.base.project(&g).into_iter().map(|x| -x).collect()
    }

    pub fn solve(&self, xi: &[f64]) -> Result<CellSolution> {
        let d = self.base.d;
        check_xi(xi, d)?;
        let n = self.base.nodes * d;
        let mut v = vec![0.0; n];
        let mut r = self.residual(xi, &v);
        let r0 = self.base.rms(&r);
        let mut energy = self.energy(xi, &v);
        let mut history = vec![IterationRecord {
            iteration: 0,
            energy,
            residual: r0,
        }];
        let target = self.opts.tol * r0;
        let mut res = r0;
        let mut iterations = 0;
        if res > target && r0 > 0.0 {
            let mut z = self.precondition(&r);
            let mut p = z.clone();
            let mut rz = self.base.inner(&r, &z);
            while iterations < self.opts.max_iter {
                iterations += 1;
                let q = self.base.project(&self.apply_a(&p));
                let pq = self.base.inner(&p, &q);
                if !(pq > 0.0) {
                    return Err(Error::Internal(format!(
                        "constrained operator lost positivity (p·Ap = {pq:e}) at iteration {iterations}"
                    )));
                }
                let alpha = rz / pq;
                for i in 0..n {
                    v[i] += alpha * p[i];
                    r[i] -= alpha * q[i];
                }
                res = self.base.rms(&r);
                let e = self.energy(xi, &v);
                if e > energy + ENERGY_SLACK * energy.abs().max(1.0) {
                    return Err(Error::Internal(format!(
                        "energy increased from {energy} to {e} at iteration {iterations}"
                    )));
                }
                energy = e;
                history.push(IterationRecord {
                    iteration: iterations,
                    energy,
                    residual: res,
                });
                if res <= target {
                    break;
                }
                z = self.precondition(&r);
                let rz_new = self.base.inner(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                for i in 0..n {
                    p[i] = z[i] + beta * p[i];
                }
            }
        }
        // Report the true (not recursively updated) residual.
        let true_res = self.base.rms(&self.residual(xi, &v));
        let converged = res <= target || r0 == 0.0;
        if !converged {
            log::warn!(
                "quadratic cell solve stopped after {iterations} iterations at relative residual {:e}",
                res / r0
            );
        }
        Ok(CellSolution {
            v: self.base.field(v),
            energy,
            iterations,
            residual: true_res,
            initial_residual: r0,
            converged,
            history,
        })
    }
}

fn green_operator(projector: &ConstraintProjector, reference: &DMatrix<f64>) -> Vec<f64> {
    let d = projector.components();
    let modes = projector.cell().node_count();
    let mut out = vec![0.0; modes * d * d];
    out.par_chunks_mut(d * d).enumerate().for_each(|(mode, g)| {
        let p = projector.mode_slice(mode);
        if p.iter().all(|&x| x == 0.0) {
            return;
        }
        if d == 1 {
            g[0] = p[0] / reference[(0, 0)];
            return;
        }
        let pm = DMatrix::from_row_slice(d, d, p);
        let m = &pm * reference * &pm;
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let top = eig.eigenvalues.max();
        let mut pinv = DMatrix::zeros(d, d);
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > 1e-10 * top {
                let col = eig.eigenvectors.column(i);
                pinv += col * col.transpose() / lam;
            }
        }
        for r in 0..d {
            for c in 0..d {
                g[r * d + c] = pinv[(r, c)];
            }
        }
    });
    out
}

/// Minimizes `⨍ f(y, ξ + v)` for a quadratic density by preconditioned
/// conjugate gradients on the constrained subspace.
///
/// The preconditioner is the Green operator of the arithmetic-mean reference
/// medium, `pinv(P_k Ā P_k)` per mode. A run that hits `max_iter` returns its
/// last (lowest-energy) iterate with `converged = false`.
pub fn solve_cell_quadratic(
    density: &QuadraticDensity,
    xi: &[f64],
    op: &OperatorSpec,
    map: &CutProjectMap,
    opts: SolverOptions,
) -> Result<CellSolution> {
    QuadraticCellProblem::new(density, op, map, opts)?.solve(xi)
}

/// Compares analytic gradients with central differences at `points` seeded
/// random nodes and directions; returns the largest relative discrepancy.
pub fn gradient_check(
    integrand: &dyn ConvexIntegrand,
    cell: &CellLattice,
    xi_scale: f64,
    points: usize,
    seed: u64,
) -> f64 {
    let d = integrand.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut analytic = vec![0.0; d];
    for _ in 0..points {
        let node = rng.gen_range(0..cell.node_count());
        let y = cell.node_point(node);
        let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0) * xi_scale).collect();
        integrand.gradient(&y, &xi, &mut analytic);
        let h = 1e-5 * norm(&xi).max(1.0);
        let mut diff = 0.0;
        for i in 0..d {
            let mut plus = xi.clone();
            let mut minus = xi.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (integrand.value(&y, &plus) - integrand.value(&y, &minus)) / (2.0 * h);
            diff += (fd - analytic[i]).powi(2);
        }
        let rel = diff.sqrt() / norm(&analytic).max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Minimizes `⨍ f(y, ξ + v)` for a convex C¹ density by projected gradient
/// descent: Barzilai–Borwein trial steps, accepted only under the Armijo
/// condition, so the energy never increases.
pub fn solve_cell_convex(
    density: &ConvexDensity,
    xi: &[f64],
    op: &OperatorSpec,
    map: &CutProjectMap,
    opts: SolverOptions,
    step: StepRule,
) -> Result<CellSolution> {
    let d = density.dim();
    check_xi(xi, d)?;
    if !(step.armijo > 0.0 && step.armijo < 1.0) || !(step.backtrack > 0.0 && step.backtrack < 1.0) {
        return Err(invalid("step rule needs 0 < armijo < 1 and 0 < backtrack < 1"));
    }
    let base = Constrained::new(d, map.cell(), op, map, &opts)?;
    let f = density.integrand.as_ref();
    let worst = gradient_check(f, base.cell(), 1.0 + norm(xi), GRADIENT_CHECK_POINTS, 0x5eed);
    if !(worst <= GRADIENT_CHECK_TOL) {
        return Err(invalid(format!(
            "gradient callback disagrees with finite differences of the value callback (relative error {worst:e})"
        )));
    }
    let points: Vec<Vec<f64>> = (0..base.nodes).map(|i| base.cell().node_point(i)).collect();
    let energy_of = |v: &[f64]| -> f64 {
        let vals: Vec<f64> = v
            .par_chunks(d)
            .zip(points.par_iter())
            .map(|(vn, y)| {
                let z: Vec<f64> = xi.iter().zip(vn).map(|(a, b)| a + b).collect();
                f.value(y, &z)
            })
            .collect();
        compensated_mean(&vals)
    };
    let projected_gradient = |v: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; v.len()];
        g.par_chunks_mut(d)
            .zip(v.par_chunks(d))
            .zip(points.par_iter())
            .for_each(|((gn, vn), y)| {
                let z: Vec<f64> = xi.iter().zip(vn).map(|(a, b)| a + b).collect();
                f.gradient(y, &z, gn);
            });
        base.project(&g)
    };

    let n = base.nodes * d;
    let mut v = vec![0.0; n];
    let mut energy = energy_of(&v);
    let mut pg = projected_gradient(&v);
    let r0 = base.rms(&pg);
    let mut res = r0;
    let target = opts.tol * r0;
    let mut history = vec![IterationRecord {
        iteration: 0,
        energy,
        residual: r0,
    }];
    let mut iterations = 0;
    let mut trial = 1.0;
    let mut stalled = false;
    while res > target && iterations < opts.max_iter {
        iterations += 1;
        let slope = -base.inner(&pg, &pg);
        let mut alpha = trial;
        let mut accepted = None;
        for _ in 0..=step.max_backtracks {
            let cand: Vec<f64> = v.iter().zip(&pg).map(|(a, g)| a - alpha * g).collect();
            let e = energy_of(&cand);
            if e <= energy + step.armijo * alpha * slope {
                accepted = Some((cand, e));
                break;
            }
            alpha *= step.backtrack;
        }
        let Some((cand, e)) = accepted else {
            // No representable decrease left along the projected gradient.
            stalled = true;
            iterations -= 1;
            break;
        };
        if e > energy + ENERGY_SLACK * energy.abs().max(1.0) {
            return Err(Error::Internal(format!(
                "energy increased from {energy} to {e} at iteration {iterations}"
            )));
        }
        let new_pg = projected_gradient(&cand);
        // Barzilai–Borwein trial step for the next iteration.
        let s: Vec<f64> = cand.iter().zip(&v).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = new_pg.iter().zip(&pg).map(|(a, b)| a - b).collect();
        let sy = base.inner(&s, &yv);
        trial = if sy > 0.0 { base.inner(&s, &s) / sy } else { alpha / step.backtrack };
        v = cand;
        energy = e;
        pg = new_pg;
        res = base.rms(&pg);
        history.push(IterationRecord {
            iteration: iterations,
            energy,
            residual: res,
        });
    }
    let converged = res <= target || r0 == 0.0;
    if !converged {
        log::warn!(
            "convex cell solve stopped after {iterations} iterations at relative residual {:e}{}",
            res / r0,
            if stalled { " (line search stalled)" } else { "" }
        );
    }
    Ok(CellSolution {
        v: base.field(v),
        energy,
        iterations,
        residual: res,
        initial_residual: r0,
        converged,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct EffectiveTensor {
    pub tensor: DMatrix<f64>,
    /// Solutions for `ξ = e_i`, in axis order.
    pub per_direction_solutions: Vec<CellSolution>,
    pub converged: bool,
}

/// `A_hom` for a pure quadratic density: diagonal entries from `ξ = e_i`,
/// off-diagonals by polarization with `ξ = e_i + e_j`.
pub fn effective_tensor(
    density: &QuadraticDensity,
    op: &OperatorSpec,
    map: &CutProjectMap,
    opts: SolverOptions,
) -> Result<EffectiveTensor> {
    if !density.is_pure() {
        return Err(invalid("effective tensor needs a pure quadratic density (b = 0, c = 0)"));
    }
    let d = density.dim();
    let problem = QuadraticCellProblem::new(density, op, map, opts)?;
    let unit = |i: usize| -> Vec<f64> { (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect() };
    let mut xis: Vec<Vec<f64>> = (0..d).map(unit).collect();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            pairs.push((i, j));
            xis.push((0..d).map(|k| if k == i || k == j { 1.0 } else { 0.0 }).collect());
        }
    }
    let solutions: Vec<CellSolution> = xis
        .par_iter()
        .map(|xi| problem.solve(xi))
        .collect::<Result<_>>()?;
    let mut tensor = DMatrix::zeros(d, d);
    for i in 0..d {
        tensor[(i, i)] = solutions[i].energy;
    }
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let off = 0.5 * (solutions[d + p].energy - solutions[i].energy - solutions[j].energy);
        tensor[(i, j)] = off;
        tensor[(j, i)] = off;
    }
    let converged = solutions.iter().all(|s| s.converged);
    let per_direction_solutions = solutions.into_iter().take(d).collect();
    Ok(EffectiveTensor {
        tensor,
        per_direction_solutions,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FHomEntry {
    pub xi: Vec<f64>,
    pub f_hom: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Evaluates the cell formula at each `ξ` (independent solves, run in
/// parallel, reported in input order).
pub fn f_hom_table(
    density: &EnergyDensity,
    op: &OperatorSpec,
    map: &CutProjectMap,
    xis: &[Vec<f64>],
    opts: SolverOptions,
) -> Result<Vec<FHomEntry>> {
    let solutions: Vec<CellSolution> = match density {
        EnergyDensity::Quadratic(q) => {
            let problem = QuadraticCellProblem::new(q, op, map, opts)?;
            xis.par_iter().map(|xi| problem.solve(xi)).collect::<Result<_>>()?
        }
        EnergyDensity::Convex(c) => xis
            .par_iter()
            .map(|xi| solve_cell_convex(c, xi, op, map, opts, StepRule::default()))
            .collect::<Result<_>>()?,
    };
    Ok(xis
        .iter()
        .zip(solutions)
        .map(|(xi, s)| FHomEntry {
            xi: xi.clone(),
            f_hom: s.energy,
            converged: s.converged,
            iterations: s.iterations,
        })
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn golden_map(n: usize) -> CutProjectMap {
        CutProjectMap::golden_ratio(vec![n, n]).unwrap().validate(8, 1e-12).unwrap()
    }

    #[test]
    fn non_spd_coefficient_is_rejected() {
        let cell = CellLattice::unit(vec![4, 4]).unwrap();
        let bad = QuadraticDensity::isotropic(cell.clone(), 1, |y| (2.0 * PI * y[0]).sin());
        assert!(matches!(bad, Err(Error::InvalidInput(_))));
        let asym = SpectralField::constant(cell, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticDensity::new(asym, None, None).is_err());
    }

    #[test]
    fn constant_coefficient_needs_no_corrector() {
        let map = CutProjectMap::periodic(2, 16).unwrap().validate(4, 1e-12).unwrap();
        let a0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let dens = QuadraticDensity::constant(map.cell().clone(), &a0).unwrap();
        let op = OperatorSpec::preset("curl2").unwrap();
        let xi = [0.3, -1.1];
        let sol = solve_cell_quadratic(&dens, &xi, &op, &map, SolverOptions::quadratic()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert!(sol.v.values().iter().all(|&v| v == 0.0));
        let expect = 2.0 * 0.09 + 2.0 * 0.5 * 0.3 * -1.1 + 1.21;
        assert!((sol.energy - expect).abs() < 1e-14);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let map = golden_map(8);
        let dens = QuadraticDensity::isotropic(map.cell().clone(), 1, |_| 1.0).unwrap();
        let op = OperatorSpec::preset("curl2").unwrap();
        assert!(solve_cell_quadratic(&dens, &[1.0], &op, &map, SolverOptions::quadratic()).is_err());
        let op = OperatorSpec::preset("curl1").unwrap();
        assert!(solve_cell_quadratic(&dens, &[1.0, 2.0], &op, &map, SolverOptions::quadratic()).is_err());
    }

    #[test]
    fn unvalidated_map_is_refused() {
        let map = CutProjectMap::golden_ratio(vec![8, 8]).unwrap();
        let dens = QuadraticDensity::isotropic(map.cell().clone(), 1, |_| 1.0).unwrap();
        let op = OperatorSpec::preset("curl1").unwrap();
        let err = solve_cell_quadratic(&dens, &[1.0], &op, &map, SolverOptions::quadratic());
        assert!(matches!(err, Err(Error::UnvalidatedMap(_))));
    }

    #[test]
    fn non_constant_rank_operator_is_refused() {
        let map = CutProjectMap::periodic(2, 8).unwrap().validate(2, 1e-12).unwrap();
        let dens = QuadraticDensity::isotropic(map.cell().clone(), 2, |_| 1.0).unwrap();
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let op = OperatorSpec::new(vec![a1, a2], None).unwrap();
        assert!(solve_cell_quadratic(&dens, &[1.0, 0.0], &op, &map, SolverOptions::quadratic()).is_err());
    }

    #[test]
    fn max_iter_exhaustion_is_flagged() {
        let map = golden_map(32);
        let dens = QuadraticDensity::isotropic(map.cell().clone(), 1, |y| {
            2.0 + (2.0 * PI * y[0]).sin() + 0.5 * (2.0 * PI * y[1]).cos()
        })
        .unwrap();
        let op = OperatorSpec::preset("curl1").unwrap();
        let opts = SolverOptions::quadratic().with_tol(1e-14).with_max_iter(2);
        let sol = solve_cell_quadratic(&dens, &[1.0], &op, &map, opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
        assert!(sol.energy <= dens.mean_energy(&[1.0]));
    }

    struct BadGradient;
    impl ConvexIntegrand for BadGradient {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, _y: &[f64], xi: &[f64]) -> f64 {
            xi[0] * xi[0]
        }
        fn gradient(&self, _y: &[f64], xi: &[f64], g: &mut [f64]) {
            g[0] = 3.0 * xi[0];
        }
    }

    #[test]
    fn inconsistent_gradient_is_rejected() {
        let map = golden_map(8);
        let dens = ConvexDensity::new(Arc::new(BadGradient), Growth { c: 1.0, p: 2.0 });
        let op = OperatorSpec::preset("curl1").unwrap();
        let err = solve_cell_convex(&dens, &[0.5], &op, &map, SolverOptions::convex(), StepRule::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn effective_tensor_rejects_affine_terms() {
        let map = golden_map(8);
        let a = SpectralField::constant(map.cell().clone(), &[1.0]);
        let c = SpectralField::constant(map.cell().clone(), &[1.0]);
        let dens = QuadraticDensity::new(a, None, Some(c)).unwrap();
        let op = OperatorSpec::preset("curl1").unwrap();
        assert!(effective_tensor(&dens, &op, &map, SolverOptions::quadratic()).is_err());
    }

    #[test]
    fn growth_check_flags_negative_density() {
        let cell = CellLattice::unit(vec![4, 4]).unwrap();
        let a = SpectralField::constant(cell.clone(), &[1.0]);
        let b = SpectralField::constant(cell.clone(), &[-3.0]);
        let dens = EnergyDensity::Quadratic(QuadraticDensity::new(a, Some(b), None).unwrap());
        assert!(dens.check_growth(&cell, 200, 2.0, 1).is_err());
    }
}
