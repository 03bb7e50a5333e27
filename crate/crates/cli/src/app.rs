use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use tboa_core::models::{conserved_subspace, Mechanism};
use tboa_core::Trajectory;

use crate::config::{BundleChoice, RunConfig, ToleranceConfig, Units, PRESETS};
use crate::error::{CliError, Result};
use crate::output::{write_json, Table};
use crate::pipeline::{attraction_check, certify_run, emit, evenly_spaced, run_sweep, Setup, SweepReport};

#[derive(Debug, Parser)]
#[command(name = "tboa", version, about = "Locate slow invariant curves by trajectory-based optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the level set, sweep the horizons, emit trajectories and certify.
    Run(RunArgs),
    /// Sample the level set and sweep the horizons only.
    Sweep(RunArgs),
    /// Check normal attraction along a trajectory file.
    Certify(CertifyArgs),
    /// Validate a mechanism file and print its rate constants.
    MechValidate(MechArgs),
    /// List built-in models and presets.
    Models,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (see `tboa models`).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol_rel: Option<f64>,
    #[arg(long)]
    pub tol_abs: Option<f64>,
    /// Use the stiff integrator and its default tolerances.
    #[arg(long)]
    pub stiff: bool,
    /// Concentration units of mechanism outputs: mol/cm3 or mol/L.
    #[arg(long)]
    pub units_out: Option<Units>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => return Err(CliError::Config("give --config PATH or --preset NAME".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.stiff {
            cfg.tolerances = ToleranceConfig { max_steps: cfg.tolerances.max_steps, ..ToleranceConfig::stiff() };
        }
        if let Some(rel) = self.tol_rel {
            cfg.tolerances.rel = rel;
        }
        if let Some(abs) = self.tol_abs {
            cfg.tolerances.abs = abs;
        }
        if let Some(units) = self.units_out {
            cfg.output.units = units;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; defaults to the config's, then `out/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trajectory CSV written by `run`, or any file with the same columns.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub nu: f64,
    #[arg(long)]
    pub nu_c: f64,
    /// Defaults to the config's attraction horizon, else its last horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub level: Option<u32>,
    #[arg(long)]
    pub bundle: Option<BundleChoice>,
    /// Check this many evenly spaced rows instead of all of them.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output file; defaults to `attraction_<stem>.json` beside the trajectory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MechArgs {
    /// Mechanism JSON file; the bundled hydrogen mechanism when omitted.
    pub path: Option<PathBuf>,
    /// Evaluate rate constants at this temperature instead of the file's.
    #[arg(long)]
    pub temperature: Option<f64>,
}

/// Parses the process arguments, runs the command and reports failures as
/// JSON on stderr (and in `error.json` when an output directory is known).
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out_dir = None;
    match execute(&cli, &mut out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            eprintln!("{text}");
            if let Some(dir) = out_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), text + "\n");
                }
            }
            ExitCode::from(report.exit_code)
        }
    }
}

pub fn execute(cli: &Cli, out_dir: &mut Option<PathBuf>) -> Result<()> {
    match &cli.command {
        Command::Run(args) | Command::Sweep(args) => {
            let full = matches!(cli.command, Command::Run(_));
            *out_dir = args.out.clone();
            let cfg = args.config.load()?;
            let dir = args
                .out
                .clone()
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| Path::new("out").join(&cfg.name));
            *out_dir = Some(dir.clone());
            let summary = run_to_dir(cfg, &dir, full)?;
            print!("{summary}");
            Ok(())
        }
        Command::Certify(args) => cmd_certify(args),
        Command::MechValidate(args) => {
            let report = mech_report(args.path.as_deref(), args.temperature)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Models => {
            print!("{}", models_listing());
            Ok(())
        }
    }
}

/// Executes a configuration and writes its artifacts into `dir`. With
/// `full` unset only the sweep is run. Returns a short text summary.
pub fn run_to_dir(cfg: RunConfig, dir: &Path, full: bool) -> Result<String> {
    let setup = Setup::new(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let saved = RunConfig { output: crate::config::OutputConfig { dir: None, ..setup.config.output.clone() }, ..setup.config.clone() };
    write_json(&dir.join("config.json"), &saved)?;

    let mut report = run_sweep(&setup)?;
    let failure = report.sweep.failure.take();
    write_json(&dir.join("sweep.json"), &report)?;
    let mut summary = sweep_summary(&report);

    if full {
        let trajectories = emit(&setup, &report)?;
        for (k, (rec, traj)) in report.sweep.records.iter().zip(&trajectories).enumerate() {
            let (table, subspace) = trajectory_tables(&setup, rec.horizon, traj);
            table.write(&dir.join(format!("trajectory_{}.csv", k + 1)))?;
            if let Some(s) = subspace {
                s.write(&dir.join(format!("subspace_{}.csv", k + 1)))?;
            }
        }
        let certs = certify_run(&setup, &report, &trajectories)?;
        write_json(&dir.join("certificates.json"), &certs)?;
        let flagged = certs.objective.iter().filter(|c| c.flagged).count();
        summary.push_str(&format!("objective certificates flagged: {flagged}/{}\n", certs.objective.len()));
        if let Some(a) = &certs.attraction {
            summary.push_str(&format!("attraction check: passed {} (worst slack {:e})\n", a.passed, a.worst_slack));
        }
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

fn sweep_summary(report: &SweepReport) -> String {
    let mut s = format!("model {}; epsilon {:e}\n", report.model, report.epsilon);
    for (r, state) in report.sweep.records.iter().zip(&report.output_states) {
        s.push_str(&format!("T = {:e}: F = {:.9e} at {:?} ({:?})\n", r.horizon, r.f_value, state, r.status));
    }
    s.push_str(&format!(
        "distances {:?}; accumulation {}; monotone at minimizers {}\n",
        report.sweep.distances, report.sweep.accumulation, report.sweep.monotone_at_points
    ));
    s
}

fn domain_note(traj: &Trajectory) -> String {
    let d = &traj.domain;
    let mut s = format!("emitted over [{:e}, {:e}]", traj.times.first().copied().unwrap_or(0.0), traj.times.last().copied().unwrap_or(0.0));
    if let Some(r) = &d.lower_failure {
        s.push_str(&format!("; backward truncated at {:e} ({r})", d.t_min));
    }
    if let Some(r) = &d.upper_failure {
        s.push_str(&format!("; forward truncated at {:e} ({r})", d.t_max));
    }
    s
}

/// The trajectory table in output coordinates and, for mechanisms, its
/// projection on the conserved subspace.
pub fn trajectory_tables(setup: &Setup, horizon: f64, traj: &Trajectory) -> (Table, Option<Table>) {
    let names = setup.output_names();
    let mut columns = vec!["t".to_string()];
    columns.extend(names.iter().cloned());
    columns.push("speed".into());
    let mut meta = vec![
        ("content".to_string(), format!("trajectory through the minimizer for horizon T = {horizon:e}")),
        ("domain".to_string(), domain_note(traj)),
    ];
    match &setup.species {
        None => {
            meta.insert(1, ("model".into(), setup.model.name().to_string()));
            meta.push(("time".into(), "t in model time units".into()));
            meta.push(("coordinates".into(), format!("state coordinates {} in model units", names.join(", "))));
            meta.push(("speed".into(), "norm of the vector field in the model metric, model units per time".into()));
            let rows = traj
                .times
                .iter()
                .zip(&traj.states)
                .zip(&traj.speeds)
                .map(|((t, p), v)| std::iter::once(*t).chain(p.iter().copied()).chain([*v]).collect())
                .collect();
            (Table { meta, columns, rows }, None)
        }
        Some(frame) => {
            let units = setup.config.output.units;
            let f = units.factor();
            let u = units.label();
            meta.insert(1, ("model".into(), format!("{} at {} K", frame.full.name(), frame.mechanism.temperature)));
            meta.push(("time".into(), "t in s".into()));
            meta.push(("coordinates".into(), format!("species concentrations {} in {u}", names.join(", "))));
            meta.push(("speed".into(), format!("Euclidean norm of the rate vector in {u}/s")));
            meta.push(("concentration_units".into(), u.into()));
            let rows = traj
                .times
                .iter()
                .zip(&traj.states)
                .zip(&traj.speeds)
                .map(|((t, w), v)| std::iter::once(*t).chain(frame.lift(w).iter().map(|c| c * f)).chain([v * f]).collect())
                .collect();
            let species = Table { meta: meta.clone(), columns, rows };

            let r = frame.basis.ncols();
            let mut sub_meta = meta;
            sub_meta.retain(|(k, _)| k != "coordinates");
            sub_meta.push((
                "coordinates".into(),
                format!("w_1..w_{r} in {u}: components of c - c0 on an orthonormal basis of the conserved affine subspace through c0"),
            ));
            let origin: Vec<f64> = frame.origin.iter().map(|c| c * f).collect();
            sub_meta.push(("origin".into(), format!("c0 = {origin:?} ({})", names.join(", "))));
            let basis: Vec<Vec<f64>> = frame.basis.column_iter().map(|c| c.iter().copied().collect()).collect();
            sub_meta.push(("basis".into(), format!("{basis:?}")));
            let mut sub_columns = vec!["t".to_string()];
            sub_columns.extend((1..=r).map(|i| format!("w_{i}")));
            sub_columns.push("speed".into());
            let sub_rows = traj
                .times
                .iter()
                .zip(&traj.states)
                .zip(&traj.speeds)
                .map(|((t, w), v)| std::iter::once(*t).chain(w.iter().map(|x| x * f)).chain([v * f]).collect())
                .collect();
            (species, Some(Table { meta: sub_meta, columns: sub_columns, rows: sub_rows }))
        }
    }
}

/// Search-space points of a trajectory table.
pub fn table_points(setup: &Setup, table: &Table) -> Result<Vec<DVector<f64>>> {
    let cols = &table.columns;
    if cols.len() < 3 || cols[0] != "t" || cols[cols.len() - 1] != "speed" {
        return Err(CliError::SchemaMismatch(format!("expected columns t, coordinates..., speed; found {cols:?}")));
    }
    let coords = &cols[1..cols.len() - 1];
    let names = setup.output_names();
    let factor = match table.meta("concentration_units") {
        Some(u) => u.parse::<Units>().map_err(CliError::SchemaMismatch)?.factor(),
        None => 1.0,
    };
    let row_coords = |row: &Vec<f64>| DVector::from_iterator(coords.len(), row[1..row.len() - 1].iter().map(|x| x / factor));
    match &setup.species {
        Some(frame) if coords == names.as_slice() => {
            Ok(table.rows.iter().map(|row| frame.project(&row_coords(row))).collect())
        }
        Some(frame) if coords.iter().enumerate().all(|(i, c)| *c == format!("w_{}", i + 1)) && coords.len() == frame.basis.ncols() => {
            Ok(table.rows.iter().map(row_coords).collect())
        }
        None if coords == names.as_slice() => Ok(table.rows.iter().map(row_coords).collect()),
        _ => Err(CliError::SchemaMismatch(format!("coordinate columns {coords:?} do not match the model's {names:?}"))),
    }
}

fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let defaults = cfg.certificate.attraction.clone();
    let last_horizon = *cfg.horizons.last().unwrap_or(&1.0);
    let setup = Setup::new(cfg)?;
    let table = Table::read(&args.trajectory)?;
    let mut points = table_points(&setup, &table)?;
    if let Some(n) = args.samples {
        points = evenly_spaced(&points, n.max(1));
    }
    let horizon = args.horizon.or(defaults.as_ref().map(|a| a.horizon)).unwrap_or(last_horizon);
    let level = args.level.or(defaults.as_ref().map(|a| a.level)).unwrap_or(4);
    let bundle = args.bundle.or(defaults.as_ref().map(|a| a.bundle)).unwrap_or_default();
    let cert = attraction_check(&setup, points, args.nu, args.nu_c, horizon, level, bundle)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.trajectory.file_stem().map_or("trajectory".into(), |s| s.to_string_lossy().into_owned());
        args.trajectory.with_file_name(format!("attraction_{stem}.json"))
    });
    write_json(&out, &cert)?;
    println!("passed {}; worst slack {:e}; ordering holds {}; written to {}", cert.passed, cert.worst_slack, cert.ordering_holds, out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct MechReport {
    pub file: String,
    pub temperature_k: f64,
    pub a_units: String,
    pub species: Vec<String>,
    pub elements: Vec<String>,
    pub conservation_rank: usize,
    pub reactions: Vec<RateRow>,
}

#[derive(Debug, Serialize)]
pub struct RateRow {
    pub label: String,
    pub k_forward: f64,
    pub k_reverse: Option<f64>,
}

pub fn mech_report(path: Option<&Path>, temperature: Option<f64>) -> Result<MechReport> {
    let mut mech = match path {
        Some(p) => Mechanism::from_path(p)?,
        None => Mechanism::hydrogen(),
    };
    if let Some(t) = temperature {
        mech = mech.with_temperature(t)?;
    }
    let reactions = mech
        .reactions
        .iter()
        .zip(mech.rate_constants())
        .map(|(r, (kf, kb))| RateRow { label: r.label.clone(), k_forward: kf, k_reverse: kb })
        .collect();
    Ok(MechReport {
        file: path.map_or("bundled hydrogen mechanism".into(), |p| p.display().to_string()),
        temperature_k: mech.temperature,
        a_units: mech.a_units.clone(),
        species: mech.species_names(),
        elements: mech.elements(),
        conservation_rank: conserved_subspace(&mech).nrows(),
        reactions,
    })
}

pub fn models_listing() -> String {
    let mut s = String::from(
        "built-in models (config \"model\": {\"kind\": ...}):\n\
         \x20 davis_skodje      gamma > 1\n\
         \x20 michaelis_menten  gamma, kappa, beta\n\
         \x20 linear            matrix (rows of a square matrix)\n\
         \x20 mechanism         file (bundled hydrogen when absent), temperature_k, initial\n\
         presets (--preset NAME):\n",
    );
    for (name, text) in PRESETS {
        let cfg = RunConfig::from_json(text).expect("presets parse");
        let kind = serde_json::to_value(&cfg.model).ok().and_then(|v| v["kind"].as_str().map(str::to_string)).unwrap_or_default();
        s.push_str(&format!("  {name:<22} {kind}, horizons {:?}\n", cfg.horizons));
    }
    s
}
