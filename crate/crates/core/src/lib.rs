//! Numerical toolkit for homogenization of quasi-crystalline media modeled
//! by cut-and-project schemes.
//!
//! A quasi-crystalline coefficient on `ℝⁿ` is the restriction `σ(Rx)` of a
//! periodic function `σ` on `ℝᵐ`. The modules here validate the map `R`,
//! sample such fields, project periodic vector fields onto the constraint
//! space of a lifted first-order operator, solve the resulting cell problem
//! for the homogenized energy density, and run desk-scale two-scale
//! convergence experiments.

pub mod cell;
pub mod cutproject;
pub mod error;
mod fft;
pub mod fourier;
pub mod numeric;
pub mod operator;
pub mod twoscale;

pub use cell::{
    effective_tensor, f_hom_table, solve_cell_convex, solve_cell_quadratic, CellSolution,
    ConvexDensity, ConvexIntegrand, EffectiveTensor, EnergyDensity, QuadraticDensity,
    SolverOptions, StepRule,
};
pub use cutproject::{
    check_diophantine, penrose_demo, CellLattice, CutProjectMap, DiophantineReport, GrayImage,
    Interpolation, QuasiperiodicField,
};
pub use error::{Error, Result};
pub use fourier::{
    project_ar_free, synthesize_g_r, ConstraintProjector, ProjectionStats, SpectralField,
};
pub use operator::{
    check_constant_rank, kernel_projector, lifted_symbol, symbol, OperatorSpec, RankReport,
};
pub use twoscale::{
    direct_1d_experiment, oscillatory_pairing, synthesize_recovery, test_battery,
    ConvergenceReport, Envelope, MacroTerm, MacroTrig, OscillatingSequence, PairingExperiment,
    RecoverySequence, SliceFunction, SliceTerm,
};
