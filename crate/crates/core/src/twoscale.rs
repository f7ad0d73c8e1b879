//! Two-scale convergence experiments along a cut-and-project slice.
//!
//! Oscillating sequences `u_ε(x)` are paired against test functions
//! `φ(x, Rx/ε)` over a box `Ω ⊂ ℝⁿ`, and the pairings are compared with the
//! closed-form two-scale limit `∫_Ω ⨍_Y u₀(x, y)·φ(x, y) dy dx`. Test
//! functions are finite trigonometric sums in `y` with smooth envelopes in
//! `x`, so every limit is exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{effective_tensor, QuadraticDensity, SolverOptions};
use crate::cutproject::{CellLattice, CutProjectMap, QuasiperiodicField, DEFAULT_HARD_TOLERANCE, DEFAULT_K_MAX};
use crate::error::{invalid, Error, Result};
use crate::numeric::{compensated_sum, CompositeRule};
use crate::operator::OperatorSpec;

const GL_ORDER: usize = 8;
/// Quadrature points per oscillation period of the fastest product mode.
const POINTS_PER_PERIOD: f64 = 16.0;
/// Minimum points per unit length, in units of `1/ε`.
const POINTS_PER_EPSILON: f64 = 10.0;
pub const DEFAULT_POINT_BUDGET: usize = 50_000_000;

/// Smooth scalar profile in the slow variable `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Envelope {
    One,
    /// `cos(2π q·x + phase)`.
    Trig { freq: Vec<f64>, phase: f64 },
    /// Product of `exp(4/L² − 1/((t−lo)(hi−t)))` over the axes, zero outside
    /// the box; peak value 1, all derivatives vanish on the boundary.
    Bump { lo: Vec<f64>, hi: Vec<f64> },
}

impl Envelope {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Trig { freq, phase } => (2.0 * PI * dot(freq, x) + phase).cos(),
            Self::Bump { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&t, (&a, &b))| bump(t, a, b).0)
                .product(),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::One => out.fill(0.0),
            Self::Trig { freq, phase } => {
                let s = -(2.0 * PI * dot(freq, x) + phase).sin();
                for (o, q) in out.iter_mut().zip(freq) {
                    *o = 2.0 * PI * q * s;
                }
            }
            Self::Bump { lo, hi } => {
                let parts: Vec<(f64, f64)> = x
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(&t, (&a, &b))| bump(t, a, b))
                    .collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = parts
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if i == j { p.1 } else { p.0 })
                        .product();
                }
            }
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            Self::One => Ok(()),
            Self::Trig { freq, .. } if freq.len() == n => Ok(()),
            Self::Bump { lo, hi } if lo.len() == n && hi.len() == n => {
                if lo.iter().zip(hi).all(|(a, b)| a < b) {
                    Ok(())
                } else {
                    Err(invalid("bump envelope needs lo < hi on every axis"))
                }
            }
            _ => Err(invalid(format!("envelope dimension does not match n={n}"))),
        }
    }
}

fn bump(t: f64, a: f64, b: f64) -> (f64, f64) {
    if t <= a || t >= b {
        return (0.0, 0.0);
    }
    let l = b - a;
    let p = (t - a) * (b - t);
    let v = (4.0 / (l * l) - 1.0 / p).exp();
    (v, v * ((b - t) - (t - a)) / (p * p))
}

/// One term `envelope(x) · Re(amplitude · e^{2πi k·y})`, where `k` indexes
/// the reciprocal lattice of the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTerm {
    pub k: Vec<i64>,
    pub amplitude: Vec<Complex64>,
    pub envelope: Envelope,
}

/// Finite sum of [`SliceTerm`]s: a vector function `f(x, y)` on `Ω × Y`.
#[derive(Debug, Clone)]
pub struct SliceFunction {
    cell: CellLattice,
    n: usize,
    components: usize,
    terms: Vec<SliceTerm>,
    waves: Vec<Vec<f64>>,
}

impl SliceFunction {
    pub fn new(cell: CellLattice, n: usize, components: usize, terms: Vec<SliceTerm>) -> Result<Self> {
        let m = cell.dimension();
        for t in &terms {
            if t.k.len() != m {
                return Err(invalid(format!("term mode {:?} has {} entries, expected m={m}", t.k, t.k.len())));
            }
            if t.amplitude.len() != components {
                return Err(invalid(format!(
                    "term amplitude has {} entries, expected {components}",
                    t.amplitude.len()
                )));
            }
            t.envelope.check(n)?;
        }
        let waves = terms.iter().map(|t| cell.frequency(&t.k)).collect();
        Ok(Self {
            cell,
            n,
            components,
            terms,
            waves,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn terms(&self) -> &[SliceTerm] {
        &self.terms
    }

    pub fn cell(&self) -> &CellLattice {
        &self.cell
    }

    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (t, w) in self.terms.iter().zip(&self.waves) {
            let env = t.envelope.value(x);
            if env == 0.0 {
                continue;
            }
            let ph = 2.0 * PI * dot(w, y);
            let e = Complex64::new(ph.cos(), ph.sin());
            for (o, a) in out.iter_mut().zip(&t.amplitude) {
                *o += env * (a * e).re;
            }
        }
    }

    /// Largest slice frequency `|R*k|` over the oscillating terms.
    pub fn max_slice_frequency(&self, map: &CutProjectMap) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.k.iter().any(|&v| v != 0))
            .map(|t| norm(&map.dual_frequency(&t.k)))
            .fold(0.0, f64::max)
    }

    /// Closed-form `∫_Ω ⨍_Y self·other dy dx` on the box `[lo, hi]`; only the
    /// slow envelope products are integrated numerically.
    pub fn two_scale_pairing(&self, other: &SliceFunction, lo: &[f64], hi: &[f64]) -> Result<f64> {
        if self.cell != other.cell || self.components != other.components || self.n != other.n {
            return Err(invalid("paired functions must share cell, components and slow dimension"));
        }
        let mut products: Vec<(f64, &Envelope, &Envelope)> = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                let same = a.k == b.k;
                let opposite = a.k.iter().zip(&b.k).all(|(p, q)| *p == -*q);
                if !same && !opposite {
                    continue;
                }
                let mut c = 0.0;
                for (aa, bb) in a.amplitude.iter().zip(&b.amplitude) {
                    if same {
                        c += 0.5 * (aa * bb.conj()).re;
                    }
                    if opposite {
                        c += 0.5 * (aa * bb).re;
                    }
                }
                if c != 0.0 {
                    products.push((c, &a.envelope, &b.envelope));
                }
            }
        }
        if products.is_empty() {
            return Ok(0.0);
        }
        let rules: Vec<CompositeRule> = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| CompositeRule::new(a, b, smooth_panels(self.n), 16))
            .collect();
        Ok(tensor_quadrature(&rules, |x| {
            compensated_sum(products.iter().map(|(c, ea, eb)| c * ea.value(x) * eb.value(x)))
        }))
    }
}

fn smooth_panels(n: usize) -> usize {
    match n {
        1 => 256,
        2 => 48,
        _ => 12,
    }
}

/// A family `ε ↦ u_ε` evaluated along the slice. Implementors receive the
/// lifted fast variable `y = Rx/ε` precomputed for the map used in the
/// pairing, which must be the map they were built on.
pub trait OscillatingSequence: Send + Sync {
    fn components(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64], eps: f64, out: &mut [f64]);
    /// Largest slice frequency `|R*k|` of the fast oscillations.
    fn max_slice_frequency(&self, map: &CutProjectMap) -> f64;
    /// Closed-form two-scale limit `u₀(x, y)`.
    fn two_scale_limit(&self) -> SliceFunction;
}

/// `u_ε(x) = f(x, Rx/ε)`: its two-scale limit is `f` itself.
impl OscillatingSequence for SliceFunction {
    fn components(&self) -> usize {
        self.components
    }

    fn eval(&self, x: &[f64], y: &[f64], _eps: f64, out: &mut [f64]) {
        SliceFunction::eval(self, x, y, out)
    }

    fn max_slice_frequency(&self, map: &CutProjectMap) -> f64 {
        SliceFunction::max_slice_frequency(self, map)
    }

    fn two_scale_limit(&self) -> SliceFunction {
        self.clone()
    }
}

#[derive(Clone)]
pub struct PairingExperiment {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Strictly decreasing, positive.
    pub epsilons: Vec<f64>,
    /// Lower bound on the quadrature points per axis.
    pub quadrature_points_per_axis: usize,
    /// Total tensor-product points allowed for a single `ε`.
    pub point_budget: usize,
    pub u: Arc<dyn OscillatingSequence>,
    pub phi: SliceFunction,
}

impl std::fmt::Debug for PairingExperiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PairingExperiment")
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("epsilons", &self.epsilons)
            .field("quadrature_points_per_axis", &self.quadrature_points_per_axis)
            .field("point_budget", &self.point_budget)
            .finish()
    }
}

impl PairingExperiment {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, epsilons: Vec<f64>, u: Arc<dyn OscillatingSequence>, phi: SliceFunction) -> Self {
        Self {
            lo,
            hi,
            epsilons,
            quadrature_points_per_axis: 64,
            point_budget: DEFAULT_POINT_BUDGET,
            u,
            phi,
        }
    }

    fn validate(&self, map: &CutProjectMap) -> Result<()> {
        let n = map.n();
        if self.lo.len() != n || self.hi.len() != n {
            return Err(invalid(format!("domain box must have n={n} coordinates")));
        }
        if self.lo.iter().zip(&self.hi).any(|(a, b)| !(a < b)) {
            return Err(invalid("domain box needs lo < hi on every axis"));
        }
        validate_epsilons(&self.epsilons)?;
        if self.u.components() != self.phi.components {
            return Err(invalid(format!(
                "sequence has {} components but the test function has {}",
                self.u.components(),
                self.phi.components
            )));
        }
        if self.phi.cell.dimension() != map.m() || self.phi.n != n {
            return Err(invalid("test function does not live on the map's slow and fast spaces"));
        }
        Ok(())
    }
}

fn validate_epsilons(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(invalid("epsilons must not be empty"));
    }
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(invalid("epsilons must be positive and finite"));
    }
    if eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(invalid("epsilons must be strictly decreasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `(ε, value)` in input order.
    pub values: Vec<(f64, f64)>,
    pub limit: f64,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log ε` over the last half
    /// of the list; `None` when fewer than two positive errors remain.
    pub fitted_rate: Option<f64>,
    /// Set when the quadrature budget stopped the sweep early.
    pub truncated: bool,
}

impl ConvergenceReport {
    fn assemble(values: Vec<(f64, f64)>, limit: f64, relative: bool, truncated: bool) -> Self {
        let scale = if relative { limit.abs().max(f64::MIN_POSITIVE) } else { 1.0 };
        let errors: Vec<f64> = values.iter().map(|(_, v)| (v - limit).abs() / scale).collect();
        let tail = values.len() / 2;
        let pts: Vec<(f64, f64)> = values[tail..]
            .iter()
            .zip(&errors[tail..])
            .filter(|(_, e)| **e > 0.0)
            .map(|((eps, _), e)| (eps.ln(), e.ln()))
            .collect();
        Self {
            values,
            limit,
            errors,
            fitted_rate: fit_slope(&pts),
            truncated,
        }
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,value,error\n");
        for ((eps, v), e) in self.values.iter().zip(&self.errors) {
            s.push_str(&format!("{eps},{v},{e}\n"));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("limit        {}\n", self.limit);
        for ((eps, v), e) in self.values.iter().zip(&self.errors) {
            s.push_str(&format!("eps {eps:<12.6e} value {v:<22} error {e:.3e}\n"));
        }
        match self.fitted_rate {
            Some(r) => s.push_str(&format!("fitted rate  {r:.3}\n")),
            None => s.push_str("fitted rate  n/a\n"),
        }
        if self.truncated {
            s.push_str("quadrature budget exhausted: report is partial\n");
        }
        s
    }
}

fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Evaluates `∫_Ω u_ε(x)·φ(x, Rx/ε) dx` for every `ε` of the experiment by
/// composite Gauss–Legendre quadrature fine enough to resolve the fastest
/// product oscillation, and compares with the closed-form two-scale limit.
pub fn oscillatory_pairing(exp: &PairingExperiment, map: &CutProjectMap) -> Result<ConvergenceReport> {
    if !map.is_validated() {
        return Err(Error::UnvalidatedMap(
            "two-scale pairings need a map that passed the diophantine check".into(),
        ));
    }
    exp.validate(map)?;
    let limit = exp.u.two_scale_limit().two_scale_pairing(&exp.phi, &exp.lo, &exp.hi)?;
    let wave = exp.u.max_slice_frequency(map) + exp.phi.max_slice_frequency(map);
    let comps = exp.phi.components;
    let r = map.matrix().clone();
    let mut values = Vec::with_capacity(exp.epsilons.len());
    let mut truncated = false;
    for &eps in &exp.epsilons {
        let per_unit = (POINTS_PER_EPSILON.max(POINTS_PER_PERIOD * wave)) / eps;
        let rules: Vec<CompositeRule> = exp
            .lo
            .iter()
            .zip(&exp.hi)
            .map(|(&a, &b)| {
                let pts = ((b - a) * per_unit).ceil().max(exp.quadrature_points_per_axis as f64);
                let panels = (pts / GL_ORDER as f64).ceil() as usize;
                CompositeRule::new(a, b, panels.max(1), GL_ORDER)
            })
            .collect();
        let total = rules.iter().map(|r| r.nodes.len() as f64).product::<f64>();
        if total > exp.point_budget as f64 {
            log::warn!("pairing at eps={eps} needs {total:.0} points, over the budget of {}", exp.point_budget);
            truncated = true;
            break;
        }
        let value = tensor_quadrature(&rules, |x| {
            let y = slice_point(&r, x, eps);
            let mut u = vec![0.0; comps];
            let mut p = vec![0.0; comps];
            exp.u.eval(x, &y, eps, &mut u);
            exp.phi.eval(x, &y, &mut p);
            dot(&u, &p)
        });
        values.push((eps, value));
    }
    Ok(ConvergenceReport::assemble(values, limit, false, truncated))
}

fn slice_point(r: &DMatrix<f64>, x: &[f64], eps: f64) -> Vec<f64> {
    (0..r.nrows())
        .map(|i| (0..r.ncols()).map(|j| r[(i, j)] * x[j]).sum::<f64>() / eps)
        .collect()
}

/// Tensor-product rule; the outer axis is split across threads and the
/// partial sums are combined in a fixed order.
fn tensor_quadrature<F>(rules: &[CompositeRule], f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = rules.len();
    let inner: usize = rules[1..].iter().map(|r| r.nodes.len()).product();
    let partial: Vec<f64> = rules[0]
        .nodes
        .par_iter()
        .zip(&rules[0].weights)
        .map(|(&x0, &w0)| {
            let mut x = vec![0.0; n];
            x[0] = x0;
            let mut acc = crate::numeric::CompensatedSum::new();
            for lin in 0..inner {
                let mut rem = lin;
                let mut w = w0;
                for axis in (1..n).rev() {
                    let len = rules[axis].nodes.len();
                    let i = rem % len;
                    rem /= len;
                    x[axis] = rules[axis].nodes[i];
                    w *= rules[axis].weights[i];
                }
                acc.add(w * f(&x));
            }
            acc.value()
        })
        .collect();
    compensated_sum(partial)
}

/// Smooth macroscopic profile `u(x) = Σ c_j cos(2π q_j·x + φ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroTrig {
    pub terms: Vec<MacroTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroTerm {
    pub coeff: f64,
    pub freq: Vec<f64>,
    pub phase: f64,
}

impl MacroTrig {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * (2.0 * PI * dot(&t.freq, x) + t.phase).cos())
            .sum()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            let s = -t.coeff * 2.0 * PI * (2.0 * PI * dot(&t.freq, x) + t.phase).sin();
            for (o, q) in out.iter_mut().zip(&t.freq) {
                *o += s * q;
            }
        }
    }
}

/// `u_ε(x) = u(x) + ε ψ(x) W̄(Rx/ε)` with `W̄ = Σ_k λ_k/(2πi) e^{2πi k·y}`,
/// so that `∇u_ε = ∇u + ε ∇ψ W̄ + ψ W(Rx/ε)` where `W = Σ_k λ_k R*k e^{2πi k·y}`
/// is the gradient-type oscillation synthesized from the `λ_k`.
///
/// As an [`OscillatingSequence`] it stands for the gradient `∇u_ε`, whose
/// two-scale limit is `∇u(x) + ψ(x) W(y)`.
#[derive(Debug, Clone)]
pub struct RecoverySequence {
    n: usize,
    cell: CellLattice,
    u: MacroTrig,
    psi: Envelope,
    // (k, cell wave B⁻ᵀk, slice frequency R*k, λ_k)
    modes: Vec<(Vec<i64>, Vec<f64>, Vec<f64>, Complex64)>,
}

/// Builds the recovery sequence for the macroscopic profile `u`, corrector
/// envelope `ψ` and coefficients `λ_k` with `λ_{−k} = −conj(λ_k)`, keeping the
/// modes with `|k|∞ ≤ n_max`.
pub fn synthesize_recovery(
    map: &CutProjectMap,
    u: MacroTrig,
    psi: Envelope,
    lambdas: &BTreeMap<Vec<i64>, Complex64>,
    n_max: usize,
) -> Result<RecoverySequence> {
    let n = map.n();
    let m = map.m();
    psi.check(n)?;
    if u.terms.iter().any(|t| t.freq.len() != n) {
        return Err(invalid(format!("macroscopic terms must have n={n} frequencies")));
    }
    let peak = lambdas.values().map(|c| c.norm()).fold(0.0, f64::max);
    let mut modes = Vec::new();
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
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        let partner = lambdas.get(&neg).copied().unwrap_or_default();
        if (partner + lambda.conj()).norm() > 1e-14 * peak.max(f64::MIN_POSITIVE) {
            return Err(invalid(format!(
                "lambdas do not give a real field at {k:?}: lambda(-k) must equal -conj(lambda(k))"
            )));
        }
        if k.iter().any(|v| v.unsigned_abs() as usize > n_max) {
            continue;
        }
        modes.push((k.clone(), map.cell().frequency(k), map.dual_frequency(k), lambda));
    }
    Ok(RecoverySequence {
        n,
        cell: map.cell().clone(),
        u,
        psi,
        modes,
    })
}

impl RecoverySequence {
    fn wbar(&self, y: &[f64]) -> f64 {
        self.modes
            .iter()
            .map(|(_, w, _, l)| {
                let ph = 2.0 * PI * dot(w, y);
                (l / Complex64::new(0.0, 2.0 * PI) * Complex64::new(ph.cos(), ph.sin())).re
            })
            .sum()
    }

    fn w(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (_, w, rk, l) in &self.modes {
            let ph = 2.0 * PI * dot(w, y);
            let c = (l * Complex64::new(ph.cos(), ph.sin())).re;
            for (o, r) in out.iter_mut().zip(rk) {
                *o += c * r;
            }
        }
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// `u_ε(x)` on the slice, with `r` the map matrix.
    pub fn value(&self, r: &DMatrix<f64>, x: &[f64], eps: f64) -> f64 {
        let y = slice_point(r, x, eps);
        self.u.value(x) + eps * self.psi.value(x) * self.wbar(&y)
    }

    /// `∇u_ε(x)` by the product and chain rules.
    pub fn gradient(&self, r: &DMatrix<f64>, x: &[f64], eps: f64) -> Vec<f64> {
        let y = slice_point(r, x, eps);
        let mut out = vec![0.0; self.n];
        OscillatingSequence::eval(self, x, &y, eps, &mut out);
        out
    }

    /// Largest discrepancy between [`Self::gradient`] and central differences
    /// of [`Self::value`] at seeded random points of `[lo, hi]`, relative to
    /// `max(1, |∇u_ε|)`.
    pub fn gradient_check(&self, map: &CutProjectMap, lo: &[f64], hi: &[f64], eps: f64, points: usize, seed: u64) -> f64 {
        let r = map.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4 * eps.min(1.0);
        let mut worst = 0.0f64;
        for _ in 0..points {
            let x: Vec<f64> = lo.iter().zip(hi).map(|(&a, &b)| rng.gen_range(a..b)).collect();
            let g = self.gradient(r, &x, eps);
            let mut diff = 0.0;
            for i in 0..self.n {
                let mut p = x.clone();
                let mut q = x.clone();
                p[i] += h;
                q[i] -= h;
                let fd = (self.value(r, &p, eps) - self.value(r, &q, eps)) / (2.0 * h);
                diff += (fd - g[i]).powi(2);
            }
            worst = worst.max(diff.sqrt() / norm(&g).max(1.0));
        }
        worst
    }
}

impl OscillatingSequence for RecoverySequence {
    fn components(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64], y: &[f64], eps: f64, out: &mut [f64]) {
        self.u.gradient(x, out);
        let psi = self.psi.value(x);
        let mut tmp = vec![0.0; self.n];
        if !self.modes.is_empty() {
            self.psi.gradient(x, &mut tmp);
            let wb = self.wbar(y);
            for (o, g) in out.iter_mut().zip(&tmp) {
                *o += eps * g * wb;
            }
            if psi != 0.0 {
                self.w(y, &mut tmp);
                for (o, w) in out.iter_mut().zip(&tmp) {
                    *o += psi * w;
                }
            }
        }
    }

    fn max_slice_frequency(&self, _map: &CutProjectMap) -> f64 {
        self.modes.iter().map(|(_, _, rk, _)| norm(rk)).fold(0.0, f64::max)
    }

    fn two_scale_limit(&self) -> SliceFunction {
        let m = self.cell.dimension();
        let mut terms = Vec::new();
        for t in &self.u.terms {
            terms.push(SliceTerm {
                k: vec![0; m],
                amplitude: t.freq.iter().map(|q| Complex64::new(2.0 * PI * q * t.coeff, 0.0)).collect(),
                envelope: Envelope::Trig {
                    freq: t.freq.clone(),
                    phase: t.phase + 0.5 * PI,
                },
            });
        }
        for (k, _, rk, l) in &self.modes {
            terms.push(SliceTerm {
                k: k.clone(),
                amplitude: rk.iter().map(|r| l * r).collect(),
                envelope: self.psi.clone(),
            });
        }
        SliceFunction::new(self.cell.clone(), self.n, self.n, terms).expect("terms built with consistent sizes")
    }
}

/// Fixed battery of vector test functions with `components` entries on the
/// map's slice: slow-only profiles plus bump-enveloped real and imaginary
/// modes along each lattice axis and the first diagonals.
pub fn test_battery(map: &CutProjectMap, lo: &[f64], hi: &[f64], components: usize) -> Result<Vec<SliceFunction>> {
    let n = map.n();
    let m = map.m();
    let bump = Envelope::Bump {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
    };
    let unit = |c: usize, z: Complex64| -> Vec<Complex64> {
        (0..components).map(|i| if i == c { z } else { Complex64::default() }).collect()
    };
    let mut modes: Vec<Vec<i64>> = (0..m)
        .map(|j| (0..m).map(|i| i64::from(i == j)).collect())
        .collect();
    if m >= 2 {
        modes.push((0..m).map(|i| if i == 0 { 1 } else if i == 1 { -1 } else { 0 }).collect());
        modes.push((0..m).map(|i| i64::from(i < 2)).collect());
    }
    let mut out = Vec::new();
    for c in 0..components {
        out.push(vec![SliceTerm {
            k: vec![0; m],
            amplitude: unit(c, Complex64::new(1.0, 0.0)),
            envelope: bump.clone(),
        }]);
        out.push(vec![SliceTerm {
            k: vec![0; m],
            amplitude: unit(c, Complex64::new(1.0, 0.0)),
            envelope: Envelope::Trig {
                freq: vec![0.5; n],
                phase: 0.25,
            },
        }]);
        for k in &modes {
            for z in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                out.push(vec![SliceTerm {
                    k: k.clone(),
                    amplitude: unit(c, z),
                    envelope: bump.clone(),
                }]);
            }
        }
    }
    out.into_iter()
        .map(|terms| SliceFunction::new(map.cell().clone(), n, components, terms))
        .collect()
}

/// One-dimensional direct-versus-homogenized check for `n = 1`.
///
/// For each `ε` the sliced medium `a(Rx/ε)` on `[0, L]` has the exact
/// effective coefficient `(⨍₀^L 1/a(Rx/ε) dx)⁻¹`, computed by adaptive
/// composite Gauss–Legendre. The report's limit is the cell-problem value
/// from [`effective_tensor`]; errors are relative.
pub fn direct_1d_experiment(
    a: &QuasiperiodicField,
    domain_length: f64,
    epsilons: &[f64],
    opts: SolverOptions,
) -> Result<ConvergenceReport> {
    let map = a.map();
    if map.n() != 1 {
        return Err(invalid(format!("direct 1D experiment needs n=1, got n={}", map.n())));
    }
    if a.sigma().components() != 1 {
        return Err(invalid("direct 1D experiment needs a scalar coefficient"));
    }
    if !(domain_length > 0.0) || !domain_length.is_finite() {
        return Err(invalid("domain_length must be positive"));
    }
    validate_epsilons(epsilons)?;
    let map = if map.is_validated() {
        map.clone()
    } else {
        map.clone().validate(DEFAULT_K_MAX, DEFAULT_HARD_TOLERANCE)?
    };
    let a_min = a.sigma().values().iter().copied().fold(f64::INFINITY, f64::min);
    if !(a_min > 0.0) {
        return Err(invalid(format!("coefficient is not uniformly positive (grid minimum {a_min:e})")));
    }
    let density = QuadraticDensity::new(a.sigma().clone(), None, None)?;
    let op = OperatorSpec::preset("curl1")?;
    let tensor = effective_tensor(&density, &op, &map, opts)?;
    if !tensor.converged {
        log::warn!("cell solve for the 1D reference value did not converge");
    }
    let cell_value = tensor.tensor[(0, 0)];
    let wave = a.max_slice_frequency();
    let values: Vec<(f64, f64)> = epsilons
        .par_iter()
        .map(|&eps| {
            let per_unit = POINTS_PER_EPSILON.max(POINTS_PER_PERIOD * wave) / eps;
            let mut panels = ((domain_length * per_unit) / GL_ORDER as f64).ceil().max(1.0) as usize;
            let integral = |panels: usize| -> f64 {
                let rule = CompositeRule::new(0.0, domain_length, panels, GL_ORDER);
                compensated_sum(
                    rule.nodes
                        .iter()
                        .zip(&rule.weights)
                        .map(|(&x, &w)| w / a.evaluate_lifted(&map.apply(&[x / eps]))[0]),
                )
            };
            let mut current = integral(panels);
            for _ in 0..6 {
                panels *= 2;
                let refined = integral(panels);
                let done = (refined - current).abs() <= 1e-13 * refined.abs();
                current = refined;
                if done {
                    break;
                }
            }
            (eps, domain_length / current)
        })
        .collect();
    Ok(ConvergenceReport::assemble(values, cell_value, true, false))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
