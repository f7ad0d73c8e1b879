//! First-order constant-coefficient operators `𝒜 = Σᵢ A⁽ⁱ⁾ ∂ᵢ`, their
//! symbols, and the orthogonal kernel projectors that characterize
//! `𝒜`-free fields frequency by frequency.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cutproject::CutProjectMap;
use crate::error::{invalid, Result};

/// Singular values below `DEFAULT_SVD_REL_TOL × σ_max` count as zero.
pub const DEFAULT_SVD_REL_TOL: f64 = 1e-10;

/// Coefficient matrices `A⁽¹⁾ … A⁽ⁿ⁾`, each `l × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    n: usize,
    d: usize,
    l: usize,
    coeffs: Vec<DMatrix<f64>>,
    name: Option<String>,
}

impl OperatorSpec {
    pub fn new(coeffs: Vec<DMatrix<f64>>, name: Option<String>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| invalid("operator needs at least one coefficient matrix"))?;
        let (l, d) = first.shape();
        if l == 0 || d == 0 {
            return Err(invalid("coefficient matrices must be non-empty"));
        }
        for (i, a) in coeffs.iter().enumerate() {
            if a.shape() != (l, d) {
                return Err(invalid(format!(
                    "coefficient A({}) is {}x{}, expected {l}x{d}",
                    i + 1,
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("coefficient A({}) is not finite", i + 1)));
            }
        }
        Ok(Self {
            n: coeffs.len(),
            d,
            l,
            coeffs,
            name,
        })
    }

    /// Named presets: `curl1` (the zero operator on scalar fields in one
    /// variable, so every field is a gradient), `curl2`, `curl3`, `div1`,
    /// `div2`, `div3`, and `grad-sym` (row-wise curl of 2×2 matrix fields,
    /// whose kernel is the displacement gradients of plane elasticity).
    pub fn preset(name: &str) -> Result<Self> {
        let coeffs = match name {
            "curl1" => vec![DMatrix::zeros(1, 1)],
            // curl u = ∂₁u₂ − ∂₂u₁, symbol (−w₂, w₁)
            "curl2" => vec![
                DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
                DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
            ],
            "curl3" => (0..3).map(cross_matrix_of_axis).collect(),
            "div1" | "div2" | "div3" => {
                let n: usize = name[3..].parse().expect("preset suffix is a digit");
                (0..n)
                    .map(|i| DMatrix::from_fn(1, n, |_, c| if c == i { 1.0 } else { 0.0 }))
                    .collect()
            }
            "grad-sym" => {
                // Field layout (U11, U12, U21, U22); row r of curl is ∂₁U_r2 − ∂₂U_r1.
                let a1 = DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
                let a2 = DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
                vec![a1, a2]
            }
            other => {
                return Err(invalid(format!(
                    "unknown operator preset '{other}' (expected curl1, curl2, curl3, div1, div2, div3, grad-sym)"
                )))
            }
        };
        Self::new(coeffs, Some(name.to_string()))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }
}

fn cross_matrix_of_axis(i: usize) -> DMatrix<f64> {
    let mut w = [0.0; 3];
    w[i] = 1.0;
    cross_matrix(&w)
}

/// `[w]×`, so that `[w]× u = w × u`.
pub fn cross_matrix(w: &[f64; 3]) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0],
    )
}

/// `𝔸(w) = Σᵢ A⁽ⁱ⁾ wᵢ`, summed in index order.
pub fn symbol(op: &OperatorSpec, w: &[f64]) -> Result<DMatrix<f64>> {
    if w.len() != op.n {
        return Err(invalid(format!(
            "symbol argument has {} entries, operator expects n={}",
            w.len(),
            op.n
        )));
    }
    let mut out = DMatrix::zeros(op.l, op.d);
    for (a, &wi) in op.coeffs.iter().zip(w) {
        out += a * wi;
    }
    Ok(out)
}

/// Numerical rank with a threshold relative to the leading singular value.
pub fn numerical_rank(a: &DMatrix<f64>, svd_rel_tol: f64) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > svd_rel_tol * top).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub samples: usize,
    /// One rank per evaluated direction: the random samples first, then the
    /// coordinate axes.
    pub observed_ranks: Vec<usize>,
    pub constant_rank: bool,
    pub r: Option<usize>,
}

/// Samples `rank 𝔸(w)` at `samples` seeded random unit directions plus every
/// coordinate axis. This can falsify the constant-rank property, not prove it.
pub fn check_constant_rank(
    op: &OperatorSpec,
    samples: usize,
    seed: u64,
    svd_rel_tol: f64,
) -> Result<RankReport> {
    if samples < 1 {
        return Err(invalid("samples must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(samples + op.n);
    while directions.len() < samples {
        // Box–Muller normals give isotropic directions.
        let w: Vec<f64> = (0..op.n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            directions.push(w.iter().map(|v| v / norm).collect());
        }
    }
    for i in 0..op.n {
        directions.push((0..op.n).map(|j| if i == j { 1.0 } else { 0.0 }).collect());
    }
    let observed_ranks: Vec<usize> = directions
        .iter()
        .map(|w| symbol(op, w).map(|a| numerical_rank(&a, svd_rel_tol)))
        .collect::<Result<_>>()?;
    let first = observed_ranks[0];
    let constant_rank = observed_ranks.iter().all(|&r| r == first);
    Ok(RankReport {
        samples,
        observed_ranks,
        constant_rank,
        r: constant_rank.then_some(first),
    })
}

/// Orthogonal projector onto `ker 𝔸(w)` for `w ≠ 0`.
pub fn kernel_projector(op: &OperatorSpec, w: &[f64], svd_rel_tol: f64) -> Result<DMatrix<f64>> {
    if w.iter().all(|&v| v == 0.0) {
        return Err(invalid(
            "kernel projector is undefined at w = 0 (the mean mode is handled separately)",
        ));
    }
    let a = symbol(op, w)?;
    Ok(kernel_projector_of(&a, svd_rel_tol))
}

/// Projector onto the numerical kernel of an arbitrary `l × d` matrix.
pub(crate) fn kernel_projector_of(a: &DMatrix<f64>, svd_rel_tol: f64) -> DMatrix<f64> {
    let (l, d) = a.shape();
    // Pad with zero rows so the SVD returns a full d×d right factor.
    let padded = if l < d {
        let mut p = DMatrix::zeros(d, d);
        p.view_mut((0, 0), (l, d)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let top = svd.singular_values.max();
    let mut proj = DMatrix::zeros(d, d);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if top > 0.0 && s > svd_rel_tol * top {
            continue;
        }
        let v = v_t.row(i);
        proj += v.transpose() * v;
    }
    // Symmetrize away rounding in the outer products.
    (&proj + proj.transpose()) * 0.5
}

/// Symbol of the lifted operator at cell frequency `k`: `𝔸(Rᵀk)` with `k`
/// taken through the dual cell basis.
pub fn lifted_symbol(op: &OperatorSpec, map: &CutProjectMap, k: &[i64]) -> Result<DMatrix<f64>> {
    if op.n != map.n() {
        return Err(invalid(format!(
            "operator acts on n={} variables but the map slice has n={}",
            op.n,
            map.n()
        )));
    }
    if k.len() != map.m() {
        return Err(invalid(format!(
            "frequency has {} entries, expected m={}",
            k.len(),
            map.m()
        )));
    }
    symbol(op, &map.dual_frequency(k))
}
