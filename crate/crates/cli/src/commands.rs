use std::sync::Arc;

use quasihom::{
    check_constant_rank, check_diophantine, direct_1d_experiment, effective_tensor, f_hom_table, oscillatory_pairing,
    penrose_demo, solve_cell_quadratic, synthesize_recovery, EnergyDensity, Interpolation, OscillatingSequence,
    PairingExperiment, QuasiperiodicField, SliceFunction,
};
use serde_json::{json, Value};

use crate::config::*;
use crate::output::{f, Outputs};
use crate::CliError;

pub fn dispatch(command: Command, params: &Value, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    out.set_params(params);
    match command {
        Command::CheckMap => check_map(parse_params(params)?, out),
        Command::CheckRank => check_rank(parse_params(params)?, seed, out),
        Command::GenField => gen_field(parse_params(params)?, out),
        Command::Penrose => penrose(parse_params(params)?, out),
        Command::SolveCell => solve_cell(parse_params(params)?, out),
        Command::EffectiveTensor => effective(parse_params(params)?, out),
        Command::FhomTable => fhom_table(parse_params(params)?, out),
        Command::Pairing => pairing(parse_params(params)?, out),
        Command::Verify1d => verify_1d(parse_params(params)?, out),
    }
}

fn check_map(mut p: CheckMapParams, out: &mut Outputs) -> Result<(), CliError> {
    p.map.resolve()?;
    out.set_params(&p);
    let map = p.map.build()?;
    let report = check_diophantine(&map, p.map.k_max.unwrap_or(DEFAULT_K_MAX), p.map.hard_tolerance.unwrap_or(DEFAULT_HARD_TOLERANCE))
        .map_err(|e| CliError::from(e).context("map"))?;
    out.set_result(&report);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    out.write("diophantine.json", json.as_bytes())?;
    if report.violation_count > 0 {
        return Err(CliError::validation(format!(
            "map: {} resonant frequencies with |R*k| below the hard tolerance, smallest violator {:?}",
            report.violation_count, report.argmin_k
        )));
    }
    Ok(())
}

fn check_rank(mut p: CheckRankParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    p.samples.get_or_insert(64);
    p.svd_rel_tol.get_or_insert(1e-10);
    out.set_params(&p);
    let op = p.operator.build()?;
    let report = check_constant_rank(&op, p.samples.unwrap_or(64), seed, p.svd_rel_tol.unwrap_or(1e-10))
        .map_err(|e| CliError::from(e).context("operator"))?;
    out.set_result(&report);
    let rows: Vec<Vec<String>> = report
        .observed_ranks
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), r.to_string()])
        .collect();
    out.write_csv("ranks.csv", &["sample".into(), "rank".into()], &rows)
}

fn gen_field(mut p: GenFieldParams, out: &mut Outputs) -> Result<(), CliError> {
    p.map.resolve()?;
    p.interpolation.get_or_insert(Interpolation::Fourier);
    out.set_params(&p);
    let map = p.map.build_validated()?;
    let sigma = p.coefficient.scalar_field(map.cell())?;
    out.write("sigma.qlhf", &sigma.to_bytes().map_err(CliError::from)?)?;
    let field = QuasiperiodicField::new(map.clone(), sigma, p.interpolation.unwrap_or_default())?;
    let mean = field.ergodic_mean()?;
    out.set_result(&json!({ "ergodic_mean": mean[0] }));
    if let Some(s) = &p.slice {
        let n = map.n();
        if s.lo.len() != n || s.hi.len() != n {
            return Err(CliError::validation(format!("slice: lo and hi need n={n} entries")));
        }
        if s.points < 2 {
            return Err(CliError::validation("slice.points: must be >= 2"));
        }
        let total = s.points.pow(n as u32);
        let points: Vec<Vec<f64>> = (0..total)
            .map(|mut lin| {
                let mut x = vec![0.0; n];
                for axis in (0..n).rev() {
                    let i = lin % s.points;
                    lin /= s.points;
                    x[axis] = s.lo[axis] + (s.hi[axis] - s.lo[axis]) * i as f64 / (s.points - 1) as f64;
                }
                x
            })
            .collect();
        let vals = field.sample_slice(&points).map_err(|e| CliError::from(e).context("slice"))?;
        let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        let rows: Vec<Vec<String>> = points
            .iter()
            .zip(&vals)
            .map(|(x, v)| x.iter().chain(v.iter()).map(|&t| f(t)).collect())
            .collect();
        out.write_csv("slice.csv", &header, &rows)?;
    }
    Ok(())
}

fn penrose(mut p: PenroseParams, out: &mut Outputs) -> Result<(), CliError> {
    let map_params = p.map.get_or_insert_with(|| MapParams::with_preset("penrose"));
    map_params.resolve()?;
    p.window_radius.get_or_insert(0.5);
    p.extent.get_or_insert(10.0);
    p.resolution.get_or_insert(512);
    out.set_params(&p);
    let map = p.map.as_ref().expect("resolved").build()?;
    let img = penrose_demo(
        &map,
        p.window_radius.unwrap_or(0.5),
        p.extent.unwrap_or(10.0),
        p.resolution.unwrap_or(512),
    )?;
    let lit = (0..img.height)
        .flat_map(|r| (0..img.width).map(move |c| (r, c)))
        .filter(|&(r, c)| img.pixel(r, c) > 0)
        .count();
    out.set_result(&json!({ "width": img.width, "height": img.height, "lit_pixels": lit }));
    out.write("penrose.pgm", &img.to_pgm())
}

struct Prepared {
    map: quasihom::CutProjectMap,
    op: quasihom::OperatorSpec,
    density: quasihom::QuadraticDensity,
    opts: quasihom::SolverOptions,
}

fn prepare(
    map: &mut MapParams,
    operator: &OperatorParams,
    coefficient: &CoefficientSpec,
    solver: &mut SolverParams,
) -> Result<Prepared, CliError> {
    map.resolve()?;
    solver.resolve();
    let m = map.build_validated()?;
    let op = operator.build()?;
    if op.n() != m.n() {
        return Err(CliError::validation(format!(
            "operator: acts on n={} slow variables but the map has n={}",
            op.n(),
            m.n()
        )));
    }
    let density = coefficient.density(m.cell(), op.d())?;
    let opts = solver.options()?;
    Ok(Prepared {
        map: m,
        op,
        density,
        opts,
    })
}

fn solve_cell(mut p: SolveCellParams, out: &mut Outputs) -> Result<(), CliError> {
    let prep = prepare(&mut p.map, &p.operator, &p.coefficient, &mut p.solver)?;
    out.set_params(&p);
    let sol = solve_cell_quadratic(&prep.density, &p.xi, &prep.op, &prep.map, prep.opts)
        .map_err(|e| CliError::from(e).context("xi"))?;
    let rows: Vec<Vec<String>> = sol
        .history
        .iter()
        .map(|h| vec![h.iteration.to_string(), f(h.energy), f(h.residual)])
        .collect();
    out.write_csv("history.csv", &["iter".into(), "energy".into(), "residual".into()], &rows)?;
    let mut header: Vec<String> = (0..p.xi.len()).map(|i| format!("xi{i}")).collect();
    header.extend(["energy", "iterations", "residual", "converged"].map(String::from));
    let mut row: Vec<String> = p.xi.iter().map(|&v| f(v)).collect();
    row.extend([f(sol.energy), sol.iterations.to_string(), f(sol.residual), sol.converged.to_string()]);
    out.write_csv("solution.csv", &header, &[row])?;
    out.write("corrector.qlhf", &sol.v.to_bytes()?)?;
    out.set_result(&json!({
        "energy": sol.energy,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "converged": sol.converged,
    }));
    if !sol.converged {
        return Err(CliError::NotConverged(format!(
            "solver: no convergence in {} iterations (residual {:e})",
            sol.iterations, sol.residual
        )));
    }
    Ok(())
}

fn effective(mut p: CellParams, out: &mut Outputs) -> Result<(), CliError> {
    let prep = prepare(&mut p.map, &p.operator, &p.coefficient, &mut p.solver)?;
    out.set_params(&p);
    let t = effective_tensor(&prep.density, &prep.op, &prep.map, prep.opts)?;
    let d = t.tensor.nrows();
    let rows: Vec<Vec<String>> = (0..d).map(|i| (0..d).map(|j| f(t.tensor[(i, j)])).collect()).collect();
    let header: Vec<String> = (0..d).map(|j| format!("col{j}")).collect();
    out.write_csv("tensor.csv", &header, &rows)?;
    let voigt = prep.density.arithmetic_mean();
    let reuss = prep.density.harmonic_mean();
    let as_rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
    };
    out.set_result(&json!({
        "tensor": as_rows(&t.tensor),
        "arithmetic_mean": as_rows(&voigt),
        "harmonic_mean": as_rows(&reuss),
        "iterations": t.per_direction_solutions.iter().map(|s| s.iterations).collect::<Vec<_>>(),
        "converged": t.converged,
    }));
    if !t.converged {
        return Err(CliError::NotConverged("solver: a cell solve did not converge".into()));
    }
    Ok(())
}

fn fhom_table(mut p: FhomTableParams, out: &mut Outputs) -> Result<(), CliError> {
    let prep = prepare(&mut p.map, &p.operator, &p.coefficient, &mut p.solver)?;
    out.set_params(&p);
    if p.xis.is_empty() {
        return Err(CliError::validation("xis: must contain at least one vector"));
    }
    let d = prep.op.d();
    let table = f_hom_table(&EnergyDensity::Quadratic(prep.density), &prep.op, &prep.map, &p.xis, prep.opts)
        .map_err(|e| CliError::from(e).context("xis"))?;
    let mut header: Vec<String> = (0..d).map(|i| format!("xi{i}")).collect();
    header.extend(["f_hom", "converged", "iterations"].map(String::from));
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|e| {
            let mut r: Vec<String> = e.xi.iter().map(|&v| f(v)).collect();
            r.extend([f(e.f_hom), e.converged.to_string(), e.iterations.to_string()]);
            r
        })
        .collect();
    out.write_csv("fhom.csv", &header, &rows)?;
    out.set_result(&table);
    if table.iter().any(|e| !e.converged) {
        return Err(CliError::NotConverged("solver: a cell solve did not converge".into()));
    }
    Ok(())
}

fn pairing(mut p: PairingParams, out: &mut Outputs) -> Result<(), CliError> {
    p.map.resolve()?;
    p.quadrature_points_per_axis.get_or_insert(64);
    p.point_budget.get_or_insert(quasihom::twoscale::DEFAULT_POINT_BUDGET);
    if let SequenceSpec::RecoveryGradient(r) = &mut p.u {
        r.n_max.get_or_insert(8);
    }
    out.set_params(&p);
    let map = p.map.build_validated()?;
    let n = map.n();
    let (u, comps): (Arc<dyn OscillatingSequence>, usize) = match &p.u {
        SequenceSpec::Slice { components, terms } => (
            Arc::new(SliceFunction::new(map.cell().clone(), n, *components, terms.clone()).map_err(|e| CliError::from(e).context("u"))?),
            *components,
        ),
        SequenceSpec::RecoveryGradient(r) => (
            Arc::new(
                synthesize_recovery(&map, r.u.clone(), r.psi.clone(), &lambda_map(&r.lambdas), r.n_max.unwrap_or(8))
                    .map_err(|e| CliError::from(e).context("u"))?,
            ),
            n,
        ),
    };
    let phi = SliceFunction::new(map.cell().clone(), n, comps, p.phi.clone()).map_err(|e| CliError::from(e).context("phi"))?;
    let mut exp = PairingExperiment::new(p.lo.clone(), p.hi.clone(), p.epsilons.clone(), u, phi);
    exp.quadrature_points_per_axis = p.quadrature_points_per_axis.unwrap_or(64);
    exp.point_budget = p.point_budget.unwrap_or(quasihom::twoscale::DEFAULT_POINT_BUDGET);
    let report = oscillatory_pairing(&exp, &map)?;
    out.write("pairing.csv", report.to_csv().as_bytes())?;
    out.set_summary(report.summary());
    out.set_result(&report);
    Ok(())
}

fn verify_1d(mut p: Verify1dParams, out: &mut Outputs) -> Result<(), CliError> {
    let map_params = p.map.get_or_insert_with(|| MapParams::with_preset("golden"));
    map_params.resolve()?;
    p.domain_length.get_or_insert(1.0);
    p.epsilons
        .get_or_insert_with(|| (3..=9).map(|k| 0.5f64.powi(k)).collect());
    p.solver.resolve();
    out.set_params(&p);
    let map = p.map.as_ref().expect("resolved").build_validated()?;
    let sigma = p.coefficient.scalar_field(map.cell())?;
    let field = QuasiperiodicField::new(map, sigma, Interpolation::Fourier)?;
    let report = direct_1d_experiment(
        &field,
        p.domain_length.unwrap_or(1.0),
        p.epsilons.as_deref().unwrap_or_default(),
        p.solver.options()?,
    )?;
    out.write("verify_1d.csv", report.to_csv().as_bytes())?;
    out.set_summary(report.summary());
    out.set_result(&report);
    Ok(())
}
