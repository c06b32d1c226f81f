//! Subcommand drivers. Each writes its artifacts into the output directory
//! and returns a JSON summary of the headline numbers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use jumpres_core::calibration::{
    empirical_moments, fit_acf_rate, fit_operation_rule, fit_tempered_stable, simulate_rule, CalibrationReport,
    HourlySeries,
};
use jumpres_core::dynamics::{
    evaluate_objective, simulate_controlled, simulate_ensemble, ControlledEnsemble, InitialControl, ReservoirSpec,
    ZeroPolicy,
};
use jumpres_core::format_float as ff;
use jumpres_core::jump_process::{
    autocorrelation_decay_rate, simulate_inflow_paths, stationary_moment_summary, MomentSet,
};
use jumpres_core::lq_exact::{solve_riccati, LqPolicy, RiccatiOptions, RiccatiTable};
use jumpres_core::lsmc::{
    coefficient_error, convergence_rate, ensemble_statistics, picard_solve, write_iteration_log, BasisId, LsmcNumerics,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{validate_config, DumpFormat, RunConfig, Severity, SimulatePolicy};
use crate::series::load_series;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Calibrate,
    Moments,
    SolveLq,
    SolveFbsde,
    ConvergenceStudy,
    FitRule,
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Moments => "moments",
            Command::SolveLq => "solve-lq",
            Command::SolveFbsde => "solve-fbsde",
            Command::ConvergenceStudy => "convergence-study",
            Command::FitRule => "fit-rule",
            Command::Simulate => "simulate",
        }
    }
}

/// Result of one run: written files and headline numbers.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: Value,
    pub warnings: Vec<String>,
}

pub fn version() -> &'static str {
    env!("JUMPRES_VERSION")
}

struct Output<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Output<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(path);
        Ok(BufWriter::new(file))
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(io_err)
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
        Ok(csv::Writer::from_writer(self.create(name)?))
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Validates, writes `manifest.json`, then dispatches. Errors in the config
/// are reported together before any computation.
pub fn run(command: Command, config: &RunConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let violations = validate_config(config);
    let (errors, warnings): (Vec<_>, Vec<_>) = violations.iter().partition(|v| v.severity == Severity::Error);
    if !errors.is_empty() {
        return Err(CliError::Config(errors.iter().map(|v| v.to_string()).collect()));
    }
    let warnings: Vec<String> = warnings.iter().map(|v| v.to_string()).collect();
    if matches!(command, Command::Calibrate | Command::FitRule) && config.experiment.series.is_none() {
        return Err(CliError::Config(vec![format!(
            "error: experiment.series: `{}` needs an input CSV",
            command.name()
        )]));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut out = Output { dir: out_dir, files: Vec::new() };
    let resolved = config.resolved();
    out.json(
        "manifest.json",
        &json!({
            "version": version(),
            "subcommand": command.name(),
            "seed": config.numerics.seed,
            "config": resolved,
        }),
    )?;

    let summary = match command {
        Command::Calibrate => calibrate(config, &mut out)?,
        Command::Moments => moments(config, &mut out)?,
        Command::SolveLq => solve_lq(config, &mut out)?,
        Command::SolveFbsde => solve_fbsde(config, &mut out)?,
        Command::ConvergenceStudy => convergence_study(config, &mut out)?,
        Command::FitRule => fit_rule(config, &mut out)?,
        Command::Simulate => simulate(config, &mut out)?,
    };
    Ok(RunOutcome { files: out.files, summary, warnings })
}

fn series(config: &RunConfig) -> Result<HourlySeries, CliError> {
    let path = config.experiment.series.as_ref().expect("checked by run");
    Ok(load_series(path)?)
}

fn calibrate(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let data = series(config)?;
    let empirical = empirical_moments(&data)?;
    let fit = fit_tempered_stable(&empirical, config.model.q_min, config.numerics.seed)?;
    let x = &config.experiment;
    let rho_c = match fit_acf_rate(&data, x.max_lag, x.min_lags) {
        Ok(r) => Some(r),
        Err(e) => {
            eprintln!("warning: recession rate not identified: {e}");
            None
        }
    };
    let report = CalibrationReport::new(config.model.q_min, empirical, &fit, rho_c);
    out.json("calibration.json", &report)?;
    Ok(serde_json::to_value(&report).map_err(io_err)?)
}

const MOMENT_HEADER: [&str; 11] = ["source", "q_min", "rho", "alpha", "a", "b", "M1", "Ave", "Sta", "Ske", "Kur"];

fn moment_row(source: &str, config: &RunConfig, m1: Option<f64>, m: &MomentSet) -> Vec<String> {
    let c = &config.model;
    let params = match m1 {
        Some(m1) => vec![ff(c.q_min), ff(c.rho), ff(c.alpha), ff(c.a), ff(c.b), ff(m1)],
        None => vec![String::new(); 6],
    };
    let mut row = vec![source.to_string()];
    row.extend(params);
    row.extend(m.as_array().iter().map(|&x| ff(x)));
    row
}

fn moments(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let model = config.model.build()?;
    let modelled = stationary_moment_summary(&model)?;
    let m1 = model.ts.m1();
    let mut w = out.csv("moments.csv")?;
    w.write_record(MOMENT_HEADER).map_err(io_err)?;
    w.write_record(moment_row("modelled", config, Some(m1), &modelled)).map_err(io_err)?;
    let mut summary = json!({
        "M1": m1,
        "rho_c": autocorrelation_decay_rate(&model),
        "modelled": modelled,
    });
    if config.experiment.series.is_some() {
        let empirical = empirical_moments(&series(config)?)?;
        w.write_record(moment_row("empirical", config, None, &empirical)).map_err(io_err)?;
        summary["empirical"] = serde_json::to_value(empirical).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(summary)
}

fn initial_control(config: &RunConfig) -> InitialControl {
    InitialControl { outflow: config.experiment.initial_outflow, volume: config.initial_volume() }
}

fn riccati_reference(config: &RunConfig, h: f64) -> Result<RiccatiTable, CliError> {
    let model = config.model.build()?;
    let dt = h / config.numerics.riccati_refinement as f64;
    let opts = RiccatiOptions { d_equation_variant: config.numerics.d_equation_variant, ..RiccatiOptions::default() };
    Ok(solve_riccati(&model, &config.objective(), config.reservoir.v_max, dt, &opts)?)
}

fn write_ensemble(ens: &ControlledEnsemble, format: DumpFormat, stem: &str, out: &mut Output) -> Result<(), CliError> {
    match format {
        DumpFormat::Csv => {
            let w = out.create(&format!("{stem}.csv"))?;
            ens.write_csv(w)?;
        }
        DumpFormat::Binary => {
            let mut w = out.create(&format!("{stem}.bin"))?;
            ens.write_binary(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn solve_lq(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let n = &config.numerics;
    let table = riccati_reference(config, n.h)?;
    table.write_csv(out.create("riccati.csv")?)?;
    let model = config.model.build()?;
    let spec = config.reservoir.build();
    let policy = LqPolicy { table: &table, w3: config.objective.w3, a_cap: spec.a_max };
    let init = initial_control(config);
    let paths = config.experiment.sample_paths.max(1);
    let ens = simulate_ensemble(&policy, &model, &spec, init, n.h, n.steps(), paths, n.seed)?;
    write_ensemble(&ens, config.experiment.dump_format, "lq_paths", out)?;
    let c0 = table.node(0);
    Ok(json!({
        "E0": c0.E, "F0": c0.F, "G0": c0.G, "I0": c0.I,
        "objective": evaluate_objective(&ens, &config.objective(), spec.v_max),
        "max_touch_fraction": ens.max_touch_fraction(),
    }))
}

fn write_statistics(config: &RunConfig, ens: &ControlledEnsemble, out: &mut Output) -> Result<Value, CliError> {
    let x = &config.experiment;
    let v_max = config.reservoir.v_max;
    let stats = ensemble_statistics(ens, x.bins, &x.band_edges, v_max)?;
    let obj = config.objective();

    let mut w = out.csv("density.csv")?;
    let mut header = vec!["t".to_string()];
    header.extend((0..x.bins).map(|b| ff((b as f64 + 0.5) * v_max / x.bins as f64)));
    w.write_record(&header).map_err(io_err)?;
    for s in &stats {
        let mut row = vec![ff(s.t)];
        row.extend(s.volume_histogram.iter().map(|&p| ff(p)));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mut w = out.csv("volume_stats.csv")?;
    w.write_record(["t", "target", "mean", "std"]).map_err(io_err)?;
    for s in &stats {
        w.write_record([ff(s.t), ff(obj.target_at(s.t, v_max)), ff(s.volume_mean), ff(s.volume_std)])
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mut w = out.csv("bands.csv")?;
    let mut header = vec!["t".to_string()];
    header.extend(x.band_edges.windows(2).map(|e| format!("[{},{})", ff(e[0]), ff(e[1]))));
    w.write_record(&header).map_err(io_err)?;
    for s in &stats {
        let mut row = vec![ff(s.t)];
        row.extend(s.outflow_band_probability.iter().map(|&p| ff(p)));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mut w = out.csv("touches.csv")?;
    w.write_record(["t", "touches", "fraction"]).map_err(io_err)?;
    for (i, &c) in ens.boundary_touches.iter().enumerate() {
        w.write_record([ff(ens.time(i)), c.to_string(), ff(c as f64 / ens.paths as f64)]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    Ok(json!({
        "max_touch_fraction": ens.max_touch_fraction(),
        "objective": evaluate_objective(ens, &obj, v_max),
    }))
}

fn solve_fbsde(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let model = config.model.build()?;
    let spec = config.reservoir.build();
    let numerics = config.numerics.lsmc();
    let init = initial_control(config);
    let outcome = picard_solve(&model, &spec, &config.objective(), init, &numerics, config.numerics.seed)?;
    outcome.surface.write_csv(out.create("surface.csv")?)?;
    write_iteration_log(&outcome.log, out.create("iterations.json")?)?;
    let ens = simulate_controlled(&outcome.policy, Arc::clone(&outcome.inflow), &spec, init.outflow, init.volume);
    let mut summary = write_statistics(config, &ens, out)?;
    let last = outcome.log.last().expect("converged runs log at least one iteration");
    summary["iterations"] = json!(outcome.log.len());
    summary["residual"] = json!(last.residual);
    summary["p_q0"] = json!(last.p_q0);
    Ok(summary)
}

/// One LSMC run against the refined Riccati reference; `(e1, e2, iterations)`.
pub fn coefficient_errors(config: &RunConfig, h: f64, paths: usize) -> Result<(f64, f64, usize), CliError> {
    let model = config.model.build()?;
    let obj = config.objective();
    let v_max = config.reservoir.v_max;
    let steps = (obj.horizon / h).round() as usize;
    let refinement = config.numerics.riccati_refinement;
    let reference = riccati_reference(config, h)?;
    let numerics = LsmcNumerics { h, steps, paths, ..config.numerics.lsmc() };
    let spec = ReservoirSpec::unconstrained(v_max);
    let outcome = picard_solve(&model, &spec, &obj, initial_control(config), &numerics, config.numerics.seed)?;
    let e_num = outcome.surface.q_coefficient_series(1, 0);
    let e_ref: Vec<f64> = (0..=steps).map(|i| reference.node(i * refinement).E).collect();
    let e1 = coefficient_error(&e_num[1..], &e_ref[1..], 1)?;
    let e2 = coefficient_error(&e_num[1..], &e_ref[1..], 2)?;
    Ok((e1, e2, outcome.log.len()))
}

/// Paths for step `h`: `paths_scale / sqrt(h)`, rounded to a bundle multiple.
pub fn study_paths(config: &RunConfig, h: f64) -> usize {
    let b = config.numerics.bundles;
    let s = config.experiment.paths_scale / h.sqrt();
    ((s / b as f64).round() as usize).max(1) * b
}

fn convergence_study(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    if config.objective.w4 > 0.0 || config.numerics.basis != BasisId::Lq {
        return Err(CliError::Config(vec![
            "error: objective.w4: the convergence study compares against the LQ solution; w4 must be 0 and the basis LQ".into(),
        ]));
    }
    let x = &config.experiment;
    let lambdas = if x.lambdas.is_empty() { vec![config.numerics.lambda] } else { x.lambdas.clone() };
    let mut hs = x.hs.clone();
    hs.sort_by(|a, b| b.total_cmp(a));

    let mut errors = out.csv("convergence_errors.csv")?;
    errors.write_record(["w3", "lambda", "h", "paths", "iterations", "e1", "e2"]).map_err(io_err)?;
    let mut rates = out.csv("convergence_rates.csv")?;
    rates.write_record(["w3", "lambda", "h_coarse", "h_fine", "cr_l1", "cr_l2"]).map_err(io_err)?;
    let mut rows = Vec::new();
    for &w3 in &x.w3s {
        for &lambda in &lambdas {
            let mut cfg = config.clone();
            cfg.objective.w3 = w3;
            cfg.numerics.lambda = lambda;
            let mut prev: Option<(f64, f64, f64)> = None;
            for &h in &hs {
                let paths = study_paths(&cfg, h);
                let (e1, e2, iterations) = coefficient_errors(&cfg, h, paths)?;
                errors
                    .write_record([
                        ff(w3),
                        ff(lambda),
                        ff(h),
                        paths.to_string(),
                        iterations.to_string(),
                        ff(e1),
                        ff(e2),
                    ])
                    .map_err(io_err)?;
                errors.flush().map_err(io_err)?;
                let mut row = json!({
                    "w3": w3, "lambda": lambda, "h": h, "paths": paths,
                    "iterations": iterations, "e1": e1, "e2": e2,
                });
                if let Some((hc, c1, c2)) = prev {
                    let (r1, r2) = (convergence_rate(c1, e1), convergence_rate(c2, e2));
                    rates.write_record([ff(w3), ff(lambda), ff(hc), ff(h), ff(r1), ff(r2)]).map_err(io_err)?;
                    row["cr_l1"] = json!(r1);
                    row["cr_l2"] = json!(r2);
                }
                rows.push(row);
                prev = Some((h, e1, e2));
            }
        }
    }
    errors.flush().map_err(io_err)?;
    rates.flush().map_err(io_err)?;
    Ok(Value::Array(rows))
}

fn fit_rule(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let data = series(config)?;
    let h = 1.0;
    let rule = fit_operation_rule(&data, h)?;
    let mut report = serde_json::to_value(rule).map_err(io_err)?;
    report["cV_per_m3"] = json!(rule.c_volume_per_m3());
    out.json("operation_rule.json", &report)?;

    let (q, v) = (data.outflow.as_ref().unwrap(), data.volume.as_ref().unwrap());
    let mut w = out.csv("operation_rule_fit.csv")?;
    w.write_record(["timestamp", "segment", "observed_m3s", "simulated_m3s"]).map_err(io_err)?;
    for (k, seg) in data.segments(&[&data.inflow, q, v]).into_iter().enumerate() {
        let sim = simulate_rule(&rule, &data.inflow[seg.clone()], &v[seg.clone()], q[seg.start], h);
        for (i, s) in seg.zip(sim) {
            let t = data.timestamps[i].format("%Y-%m-%dT%H:%M:%S").to_string();
            w.write_record([t, k.to_string(), ff(q[i]), ff(s)]).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(report)
}

fn simulate(config: &RunConfig, out: &mut Output) -> Result<Value, CliError> {
    let n = &config.numerics;
    let model = config.model.build()?;
    let spec = config.reservoir.build();
    let init = initial_control(config);
    let inflow = Arc::new(simulate_inflow_paths(&model, n.h, n.steps(), n.paths, n.seed)?);
    let ens = match config.experiment.policy {
        SimulatePolicy::Zero => simulate_controlled(&ZeroPolicy, inflow, &spec, init.outflow, init.volume),
        SimulatePolicy::Lq => {
            let table = riccati_reference(config, n.h)?;
            let policy = LqPolicy { table: &table, w3: config.objective.w3, a_cap: spec.a_max };
            simulate_controlled(&policy, inflow, &spec, init.outflow, init.volume)
        }
    };
    write_ensemble(&ens, config.experiment.dump_format, "ensemble", out)?;
    let terminal = ens.inflow.at_step(ens.steps);
    let mean = terminal.iter().sum::<f64>() / terminal.len() as f64;
    Ok(json!({
        "paths": ens.paths,
        "steps": ens.steps,
        "terminal_inflow_mean": mean,
        "max_touch_fraction": ens.max_touch_fraction(),
    }))
}
