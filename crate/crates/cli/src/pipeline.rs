//! One function per command. Each returns the result document, the CSV
//! tables and whether the run's checks passed.

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use pc_extrap::extrapolate::{
    increment_coefficients, solve_extrapolation, unpredictable_error, EstimateReport, SpectralCharacteristic,
};
use pc_extrap::increments::Horizon;
use pc_extrap::linalg::CMatrix;
use pc_extrap::minimax::{certify_saddle, solve_least_favorable, solve_multistart, CertificationReport, LeastFavorableResult};
use pc_extrap::saddle::{build_q, error_variance_mc, top_eigen};
use pc_extrap::validate::cross_validate;

use crate::artifacts::{complex_columns, Table};
use crate::config::{Command, ExperimentConfig};

pub struct Outcome {
    pub result: Value,
    pub tables: Vec<Table>,
    pub passed: bool,
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    match command {
        Command::Estimate | Command::EstimateFinite => estimate(command, cfg),
        Command::Validate => validate(cfg),
        Command::Saddle => saddle(cfg),
        Command::Minimax => minimax(cfg),
    }
}

fn to_value(x: &impl Serialize) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

fn h_table(report: &EstimateReport) -> Table {
    let k = report.h_samples.first().map_or(0, |s| s.h.len());
    let mut header = vec!["lambda".to_string()];
    header.extend(complex_columns("h", k));
    let mut t = Table::new("h_samples.csv", header);
    for s in &report.h_samples {
        let mut row = vec![s.lambda];
        row.extend(s.h.iter().flat_map(|z| [z.re, z.im]));
        t.rows.push(row);
    }
    t
}

fn residual_table(report: &EstimateReport) -> Table {
    let mut t = Table::new("residuals.csv", vec!["j".into(), "orthogonality_residual".into()]);
    t.rows = report.orthogonality_residuals.iter().map(|&(j, r)| vec![j as f64, r]).collect();
    t
}

fn estimate_value(report: &EstimateReport) -> Result<Value> {
    let mut v = to_value(report)?;
    if let Value::Object(m) = &mut v {
        m.remove("h_samples");
        m.insert("unpredictable_error".into(), json!(unpredictable_error(&report.b)));
    }
    Ok(v)
}

fn estimate(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let problem = cfg.problem(command)?;
    let report = solve_extrapolation(&problem).context("estimate pipeline")?;
    Ok(Outcome {
        result: json!({"command": command.name(), "estimate": estimate_value(&report)?}),
        tables: vec![h_table(&report), residual_table(&report)],
        passed: true,
    })
}

fn validate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let problem = cfg.problem(Command::Validate)?;
    let report = solve_extrapolation(&problem).context("validate pipeline: analytic solve")?;
    let oracle = cross_validate(&problem, cfg.mc.window, cfg.mc.n_paths, cfg.mc.seed).context("validate pipeline")?;
    let passed = oracle.analytic_agrees && oracle.empirical_agrees.unwrap_or(true);
    Ok(Outcome {
        result: json!({
            "command": "validate",
            "seed": cfg.mc.seed,
            "passed": passed,
            "cross_validation": to_value(&oracle)?,
            "estimate": estimate_value(&report)?,
        }),
        tables: vec![h_table(&report), residual_table(&report)],
        passed,
    })
}

fn matrix_rows(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect()).collect()
}

fn saddle(cfg: &ExperimentConfig) -> Result<Outcome> {
    let problem = cfg.problem(Command::Saddle)?;
    let Horizon::Finite(n) = problem.horizon else {
        bail!("config field `params.N`: required by `saddle`");
    };
    let (b, _) = increment_coefficients(&problem)?;
    let b = b.resized(n + 1);
    let q = build_q(&b, n)?;
    let res = top_eigen(&q, cfg.saddle.power, cfg.saddle.innovation_dim)?;
    let mut passed = true;
    let mc = if cfg.saddle.mc_reps > 0 {
        let (mean, se) = error_variance_mc(&b, &res, cfg.saddle.mc_reps, cfg.mc.seed)?;
        let agrees = (mean - res.max_error).abs() <= 3.0 * se;
        passed &= agrees;
        json!({"replications": cfg.saddle.mc_reps, "mean": mean, "standard_error": se, "agrees": agrees})
    } else {
        Value::Null
    };
    let ma: Vec<_> = res.ma_coefficients.iter().map(matrix_rows).collect();
    Ok(Outcome {
        result: json!({
            "command": "saddle",
            "horizon": n,
            "saddle": to_value(&res)?,
            "ma_coefficients": ma,
            "monte_carlo": mc,
            "passed": passed,
        }),
        tables: Vec::new(),
        passed,
    })
}

fn f0_table(r: &LeastFavorableResult) -> Table {
    let k = r.b.k();
    let mut header = vec!["lambda".to_string()];
    header.extend(complex_columns("g", k * k));
    header.extend(complex_columns("f", k * k));
    let mut t = Table::new("f0.csv", header);
    for row in r.f0_table() {
        let mut v = vec![row.lambda];
        v.extend(row.increment.iter().flatten());
        v.extend(row.process.iter().flatten());
        t.rows.push(v);
    }
    t
}

fn certification_value(rep: &CertificationReport) -> Result<Value> {
    to_value(rep)
}

fn minimax(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.class.as_ref().context("config field `class`: required by `minimax`")?;
    let problem = cfg.problem(Command::Minimax)?;
    let settings = &cfg.minimax;
    let result = solve_least_favorable(spec, &problem).context("minimax pipeline")?;
    let distinct = if settings.starts > 1 {
        solve_multistart(spec, &problem, settings.starts, cfg.mc.seed)?.len()
    } else {
        1
    };
    let cert = if result.converged && settings.n_probes > 0 {
        Some(certify_saddle(&result, spec, &problem, settings.n_probes, cfg.mc.seed)?)
    } else {
        None
    };
    let negative = if settings.negative_control {
        let bad = result.corrupted(result.g0.len() / 3, 0.1)?;
        Some(certify_saddle(&bad, spec, &problem, settings.n_probes.max(1), cfg.mc.seed)?)
    } else {
        None
    };
    let passed = result.converged
        && cert.as_ref().is_none_or(|c| c.passed)
        && negative.as_ref().is_none_or(|c| !c.passed);

    let table = pc_extrap::spectral::NodeTable::from_samples(result.g0.clone(), result.kernel, result.grid)?;
    let h = SpectralCharacteristic::from_table(&table, &result.b, &result.c);
    let k = result.b.k();
    let mut header = vec!["lambda".to_string()];
    header.extend(complex_columns("h", k));
    let mut ht = Table::new("h_samples.csv", header);
    for (l, v) in h.lambdas.iter().zip(&h.h) {
        let mut row = vec![*l];
        row.extend(v.iter().flat_map(|z| [z.re, z.im]));
        ht.rows.push(row);
    }
    let mut rt = Table::new("residuals.csv", vec!["iteration".into(), "relative_change".into()]);
    rt.rows = result.history.iter().enumerate().map(|(i, c)| vec![i as f64, *c]).collect();

    let mut lf = to_value(&result)?;
    lf["f0_table"] = to_value(&result.f0_table())?;
    Ok(Outcome {
        result: json!({
            "command": "minimax",
            "passed": passed,
            "least_favorable": lf,
            "distinct_fixed_points": distinct,
            "certification": cert.as_ref().map(certification_value).transpose()?,
            "negative_control": negative.as_ref().map(|c| json!({"passed": c.passed, "violation": c.violation})),
        }),
        tables: vec![ht, rt, f0_table(&result)],
        passed,
    })
}
