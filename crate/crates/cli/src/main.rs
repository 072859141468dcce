//! `deeplcc` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or failed
//! excitation certificate, 3 solver failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};

use deeplcc::config::RunConfig;
use deeplcc::controller::ControllerError;
use deeplcc::datamat::{
    is_hankel_exciting, is_page_exciting, min_samples, partition, required_order, MatrixKind, Series, DEFAULT_RANK_TOL,
};
use deeplcc::experiment::{column_sweep, compare, Context, ExperimentError, Mode, RunOutcome};
use deeplcc::io::{
    dataset_table, fmt_f64, read_dataset, run_log_table, summarize_run_log, trajectory_table, write_atomic, CsvTable,
    IoError,
};
use deeplcc::privacy::{channel_rmse, diversity_witnesses, naive_attacker_estimate, trajectory_gap};
use deeplcc::sim::{SimError, TrajectoryRecord};

#[derive(Parser)]
#[command(name = "deeplcc", version, about = "Data-driven and privacy-preserving leading cruise control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML configuration; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed, overriding `seed` of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect offline data and certify its excitation.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured scenario under one controller.
    Run {
        #[command(flatten)]
        common: Common,
        /// deeplcc, masked, mpc or hdv.
        #[arg(long)]
        mode: Mode,
    },
    /// Tabulate fuel and AAVE of run logs relative to the first one.
    Compare {
        /// Run-log CSV files.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Directory for `compare.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show what the central unit sees, what an eavesdropper infers, and
    /// alternative mask sets consistent with the observations.
    MaskDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Report ranks and sample bounds of a dataset; optionally sweep column counts.
    MatrixInfo {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; collected in memory when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// hankel or page; defaults to the configured kind.
        #[arg(long)]
        kind: Option<MatrixKind>,
        #[arg(long)]
        t_ini: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Column counts for a closed-loop cost sweep, e.g. `500,800,1100`.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Seeds of the sweep; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<IoError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
        if let Some(ExperimentError::Sim(SimError::ControllerFault { source: ControllerError::Qp(_), .. }))
        | Some(ExperimentError::Controller(ControllerError::Qp(_))) = cause.downcast_ref::<ExperimentError>()
        {
            return 3;
        }
    }
    2
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    match &common.out {
        Some(dir) => dir.clone(),
        None => cfg.resolve(&cfg.output_dir),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Collect { common } => cmd_collect(&common),
        Command::Run { common, mode } => cmd_run(&common, mode),
        Command::Compare { logs, out } => cmd_compare(&logs, out.as_deref()),
        Command::MaskDemo { common } => cmd_mask_demo(&common),
        Command::MatrixInfo { common, dataset, kind, t_ini, horizon, sweep, seeds } => {
            cmd_matrix_info(&common, dataset.as_deref(), kind, t_ini, horizon, &sweep, &seeds)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_collect(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let ctx = Context::new(&cfg)?;
    let out = out_dir(common, &cfg);
    let samples = cfg.samples();
    let kind = cfg.matrix_kind();
    let mut report = String::new();
    writeln!(report, "kind={}", kind.name())?;
    writeln!(report, "samples={samples}")?;
    writeln!(report, "columns={}", kind.columns(samples, cfg.controller.t_ini + cfg.controller.horizon))?;
    writeln!(report, "order={}", ctx.excitation_order())?;
    match ctx.collect() {
        Ok((record, cert)) => {
            writeln!(report, "rank={}\nrequired={}\nexciting={}", cert.rank, cert.required, cert.exciting)?;
            dataset_table(&record, cfg.simulation.dt).write(&out.join("dataset.csv"))?;
            write_text(&out.join("certificate.txt"), &report)?;
            print!("{report}");
            Ok(())
        }
        Err(ExperimentError::Sim(SimError::ExcitationFailure(cert))) => {
            writeln!(report, "rank={}\nrequired={}\nexciting=false", cert.rank, cert.required)?;
            write_text(&out.join("certificate.txt"), &report)?;
            print!("{report}");
            bail!(ExperimentError::Sim(SimError::ExcitationFailure(cert)))
        }
        Err(e) => Err(e.into()),
    }
}

/// The configured dataset when set, otherwise fresh in-memory data.
fn dataset(cfg: &RunConfig, ctx: &Context) -> Result<TrajectoryRecord> {
    match &cfg.data.dataset {
        Some(path) => {
            let path = cfg.resolve(path);
            Ok(read_dataset(&path).with_context(|| format!("reading dataset {}", path.display()))?)
        }
        None => Ok(ctx.collect()?.0),
    }
}

fn metrics_summary(out: &RunOutcome) -> String {
    let m = &out.metrics;
    let (mean, max) = out.solve_times();
    let mut s = String::new();
    // only line that varies between identical runs
    let _ = writeln!(s, "# timing mean_solve_s={mean:.6} max_solve_s={max:.6}");
    let _ = writeln!(s, "label={}", out.label);
    let _ = writeln!(s, "mode={}", out.mode);
    let _ = writeln!(s, "total_fuel_ml={}", fmt_f64(m.total_fuel));
    let _ = writeln!(s, "aave={}", fmt_f64(m.aave));
    let _ = writeln!(s, "aave_excluded_steps={}", m.aave_excluded_steps);
    let _ = writeln!(s, "quadratic_cost={}", fmt_f64(m.quadratic_cost));
    let _ = writeln!(s, "collision_events={}", m.collision_events);
    let _ = writeln!(s, "duration_s={}", fmt_f64(m.duration));
    let _ = writeln!(s, "decision_dim={}", out.decision_dim);
    let _ = writeln!(s, "flagged_steps={}", out.flagged_steps());
    if let Some(rho) = out.rho {
        let _ = writeln!(s, "rho={}", fmt_f64(rho));
    }
    s
}

fn cmd_run(common: &Common, mode: Mode) -> Result<()> {
    let cfg = load_config(common)?;
    let ctx = Context::new(&cfg)?;
    let out = out_dir(common, &cfg);
    let record = if mode.needs_data() { Some(dataset(&cfg, &ctx)?) } else { None };
    let outcome = ctx.run(mode, record.as_ref())?;
    run_log_table(&outcome.log).write(&out.join(format!("run_{mode}.csv")))?;
    let summary = metrics_summary(&outcome);
    write_text(&out.join(format!("metrics_{mode}.txt")), &summary)?;
    if let Some(ex) = &outcome.exchanges {
        let y: Vec<_> = ex.iter().map(|e| e.y_bar.clone()).collect();
        let u: Vec<_> = ex.iter().map(|e| e.u_bar.clone()).collect();
        trajectory_table(&y, &u, cfg.simulation.dt, true).write(&out.join("masked_exchange.csv"))?;
    }
    print!("{summary}");
    Ok(())
}

/// Largest per-step gap between the CAV input columns of two run logs.
fn input_gap(a: &Path, b: &Path) -> Result<Option<f64>> {
    let (ta, tb) = (CsvTable::read(a)?, CsvTable::read(b)?);
    let (ua, ub) = (ta.indexed_columns("u"), tb.indexed_columns("u"));
    if ua.len() != ub.len() || ua.is_empty() || ta.rows.len() != tb.rows.len() {
        return Ok(None);
    }
    let mut gap: f64 = 0.0;
    for r in 0..ta.rows.len() {
        for (&ca, &cb) in ua.iter().zip(&ub) {
            gap = gap.max((ta.number(a, r, ca)? - tb.number(b, r, cb)?).abs());
        }
    }
    Ok(Some(gap))
}

fn cmd_compare(logs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut entries = Vec::with_capacity(logs.len());
    for path in logs {
        let s = summarize_run_log(path)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        entries.push((label, s.total_fuel, s.aave));
    }
    let rows = compare(&entries);
    let mut table = CsvTable::new(
        ["log", "total_fuel_ml", "aave", "fuel_delta_pct", "aave_delta_pct", "max_input_gap"].map(String::from).to_vec(),
    );
    println!("{:<28} {:>14} {:>10} {:>10} {:>10} {:>14}", "log", "fuel [mL]", "AAVE", "fuel %", "AAVE %", "max |du|");
    for (row, path) in rows.iter().zip(logs) {
        let gap = input_gap(&logs[0], path)?;
        let gap_text = gap.map_or_else(|| "n/a".to_string(), |g| format!("{g:.3e}"));
        println!(
            "{:<28} {:>14.4} {:>10.6} {:>+10.2} {:>+10.2} {:>14}",
            row.label, row.total_fuel, row.aave, row.fuel_delta_pct, row.aave_delta_pct, gap_text
        );
        table.rows.push(vec![
            row.label.clone(),
            fmt_f64(row.total_fuel),
            fmt_f64(row.aave),
            fmt_f64(row.fuel_delta_pct),
            fmt_f64(row.aave_delta_pct),
            gap.map_or_else(String::new, fmt_f64),
        ]);
    }
    if let Some(dir) = out {
        table.write(&dir.join("compare.csv"))?;
    }
    Ok(())
}

fn cmd_mask_demo(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let ctx = Context::new(&cfg)?;
    let out = out_dir(common, &cfg);
    let record = dataset(&cfg, &ctx)?;
    let outcome = ctx.run(Mode::Masked, Some(&record))?;
    let exchanges = outcome.exchanges.as_deref().unwrap_or_default();
    let y_bar: Vec<_> = exchanges.iter().map(|e| e.y_bar.clone()).collect();
    let u_bar: Vec<_> = exchanges.iter().map(|e| e.u_bar.clone()).collect();
    let dt = cfg.simulation.dt;
    trajectory_table(&outcome.log.y, &outcome.log.u, dt, false).write(&out.join("true_trajectory.csv"))?;
    trajectory_table(&y_bar, &u_bar, dt, true).write(&out.join("masked_trajectory.csv"))?;

    // inputs the central unit sends are compared with the inputs the CAVs applied
    let (y_est, u_est) = naive_attacker_estimate(&y_bar, &u_bar);
    let mut rmse = CsvTable::new(["channel", "rmse"].map(String::from).to_vec());
    let mut text = String::new();
    let y_rmse = channel_rmse(&y_est, &outcome.log.y);
    let u_rmse = channel_rmse(&u_est, &outcome.log.u);
    for (name, values) in [("y", &y_rmse), ("u", &u_rmse)] {
        for (k, v) in values.iter().enumerate() {
            rmse.rows.push(vec![format!("{name}_{}", k + 1), fmt_f64(*v)]);
            writeln!(text, "rmse {name}_{} = {v:.6}", k + 1)?;
        }
    }
    rmse.write(&out.join("attack_rmse.csv"))?;

    let witnesses = diversity_witnesses(&ctx.fleet, &y_bar, &u_bar, cfg.privacy.witnesses, cfg.seed);
    let mut header = vec!["witness".to_string(), "remask_residual".to_string(), "min_separation".to_string()];
    for c in 1..=ctx.fleet.m() {
        header.extend(["p11", "p12", "p21", "p22", "l1", "l2", "pu", "lu"].map(|k| format!("cav{c}_{k}")));
    }
    let mut table = CsvTable::new(header);
    let mut worst_residual: f64 = 0.0;
    let mut min_sep = f64::INFINITY;
    for (i, w) in witnesses.iter().enumerate() {
        let sep = witnesses
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| trajectory_gap(w, o))
            .fold(f64::INFINITY, f64::min);
        worst_residual = worst_residual.max(w.remask_residual);
        min_sep = min_sep.min(sep);
        let mut row = vec![i.to_string(), fmt_f64(w.remask_residual), fmt_f64(sep)];
        for (s, u) in w.masks.state.iter().zip(&w.masks.input) {
            row.extend([s.p[(0, 0)], s.p[(0, 1)], s.p[(1, 0)], s.p[(1, 1)], s.l[0], s.l[1], u.p, u.l].map(fmt_f64));
        }
        table.rows.push(row);
    }
    table.write(&out.join("witnesses.csv"))?;
    writeln!(text, "witnesses={} max_remask_residual={worst_residual:.3e} min_separation={min_sep:.3e}", witnesses.len())?;
    if let Some(rho) = outcome.rho {
        writeln!(text, "rho={rho}")?;
    }
    write_text(&out.join("mask_demo.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_matrix_info(
    common: &Common,
    dataset_path: Option<&Path>,
    kind: Option<MatrixKind>,
    t_ini: Option<usize>,
    horizon: Option<usize>,
    sweep: &[usize],
    seeds: &[u64],
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(k) = kind {
        cfg.controller.matrix_kind = k;
    }
    cfg.controller.t_ini = t_ini.unwrap_or(cfg.controller.t_ini);
    cfg.controller.horizon = horizon.unwrap_or(cfg.controller.horizon);
    let ctx = Context::new(&cfg)?;
    let out = out_dir(common, &cfg);
    let record = match dataset_path {
        Some(p) => read_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?,
        None => dataset(&cfg, &ctx)?,
    };
    let c = &cfg.controller;
    let kind = c.matrix_kind;
    let (n, m) = (ctx.fleet.n(), ctx.fleet.m());
    let depth = c.t_ini + c.horizon;
    let blocks = partition(kind, &record.u, &record.eps, &record.y, c.t_ini, c.horizon)?;
    let input = Series::from_matrix(record.u.as_matrix().clone())?.stack(&record.eps)?;
    let mut text = String::new();
    writeln!(text, "kind={}\nsamples={}\ncolumns={}", kind.name(), record.len(), blocks.cols)?;
    for masked in [false, true] {
        let order = required_order(kind, n, c.t_ini, c.horizon, masked);
        let tag = if masked { "masked" } else { "plain" };
        writeln!(text, "{tag}_order={order}")?;
        writeln!(text, "{tag}_min_samples_hankel={}", min_samples(MatrixKind::Hankel, m, n, c.t_ini, c.horizon, masked))?;
        writeln!(text, "{tag}_min_samples_page={}", min_samples(MatrixKind::Page, m, n, c.t_ini, c.horizon, masked))?;
        let cert = match kind {
            MatrixKind::Hankel => Ok(is_hankel_exciting(&input, order, DEFAULT_RANK_TOL)),
            MatrixKind::Page => is_page_exciting(&input, depth, order, DEFAULT_RANK_TOL),
        };
        match cert {
            Ok(cert) => {
                writeln!(text, "{tag}_rank={}\n{tag}_required={}\n{tag}_exciting={}", cert.rank, cert.required, cert.exciting)?
            }
            Err(e) => writeln!(text, "{tag}_exciting=false\n{tag}_reason={e}")?,
        }
    }
    write_text(&out.join("matrix_info.txt"), &text)?;
    print!("{text}");

    if !sweep.is_empty() {
        let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
        let rows = column_sweep(&cfg, kind, sweep, &seeds)?;
        let mut table = CsvTable::new(["kind", "columns", "seed", "cost"].map(String::from).to_vec());
        for r in &rows {
            println!("{} columns={} seed={} cost={:.4}", r.kind.name(), r.columns, r.seed, r.cost);
            table.rows.push(vec![r.kind.name().to_string(), r.columns.to_string(), r.seed.to_string(), fmt_f64(r.cost)]);
        }
        table.write(&out.join("sweep.csv"))?;
    }
    Ok(())
}
