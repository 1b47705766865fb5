//! `gridroll` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gridroll_core::grid::{check_constraints, violation_hours};
use gridroll_core::pipeline::{build_agents, exit_code, run_pipeline, stage_bm, stage_dam, stage_te, PipelineError, RunReport, StageTimings};
use gridroll_core::scenario::{emit_results, load_scenario, read_bm_csv, read_dam_csv, OutputFormat, Scenario, ScenarioError};
use gridroll_core::Execution;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "gridroll",
    version,
    about = "EV aggregator scheduling: day-ahead, rolling balancing market, network negotiation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: DAM, rolling BM, security check, negotiation if needed.
    Run(Opts),
    /// Day-ahead schedules only.
    Dam(Opts),
    /// Balancing-market re-optimization of `dam_schedule.csv` from the input dir.
    Bm(Opts),
    /// Security check and negotiation on `bm_schedule.csv` from the input dir.
    Te(Opts),
    /// Validate the scenario; with a BM plan in the input dir, also run the security check.
    Check(Opts),
}

#[derive(Args, Clone)]
struct Opts {
    /// Scenario JSON. The bundled default is used when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// Where `bm`, `te` and `check` read prior-stage CSVs (defaults to the output dir).
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Override the forecast-error seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Leave battery operating cost out of the objectives.
    #[arg(long)]
    no_boc: bool,
    /// Solve the balancing market as one window over the whole horizon.
    #[arg(long)]
    no_rwo: bool,
    /// Negotiate even when the pre-TE check is clean.
    #[arg(long)]
    force_te: bool,
    /// Also write SVG plots.
    #[arg(long)]
    emit_plots: bool,
    /// Also write the full report as report.json.
    #[arg(long)]
    emit_json: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Disable data-parallel solves.
    #[arg(long)]
    sequential: bool,
}

impl Opts {
    fn input_dir(&self) -> &Path {
        self.input_dir.as_deref().unwrap_or(&self.output_dir)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn formats(&self) -> Vec<OutputFormat> {
        let mut f = vec![OutputFormat::Csv];
        if self.emit_plots {
            f.push(OutputFormat::Svg);
        }
        if self.emit_json {
            f.push(OutputFormat::Json);
        }
        f
    }

    fn scenario(&self) -> Result<Scenario, ScenarioError> {
        let mut sc = match &self.scenario {
            Some(p) => load_scenario(p)?,
            None => Scenario::default_scenario(),
        };
        if let Some(s) = self.seed {
            sc.prices.seed = Some(s);
        }
        if self.no_boc {
            sc.flags.include_boc = false;
        }
        if self.no_rwo {
            sc.flags.use_rwo = false;
        }
        if self.force_te {
            sc.flags.force_te = true;
        }
        if let Some(n) = self.max_iters {
            sc.negotiation.max_iters = n;
        }
        sc.validate()?;
        Ok(sc)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDROLL_LOG", "warn")).init();
    let cli = Cli::parse();
    let (name, opts) = match &cli.command {
        Command::Run(o) => ("run", o),
        Command::Dam(o) => ("dam", o),
        Command::Bm(o) => ("bm", o),
        Command::Te(o) => ("te", o),
        Command::Check(o) => ("check", o),
    };
    let (code, summary) = match execute(&cli.command, opts) {
        Ok((code, mut summary)) => {
            summary["status"] = json!(status(code));
            (code, summary)
        }
        Err(e) => {
            log::error!("{e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, |p| if p.is_infeasible() { 3 } else { 1 });
            let mut s = json!({ "status": status(code), "error": format!("{e:#}") });
            if let Some(issues) = e.downcast_ref::<ScenarioError>().map(|s| s.issues()) {
                s["issues"] = json!(issues.iter().map(|i| json!({ "path": i.path, "message": i.message })).collect::<Vec<_>>());
            }
            (code, s)
        }
    };
    let mut out = json!({ "command": name });
    if let (Value::Object(dst), Value::Object(src)) = (&mut out, summary) {
        dst.extend(src);
    }
    out["exit_code"] = json!(code);
    println!("{out}");
    ExitCode::from(code as u8)
}

fn status(code: i32) -> &'static str {
    match code {
        0 => "ok",
        2 => "not_converged",
        3 => "infeasible",
        _ => "error",
    }
}

fn execute(cmd: &Command, opts: &Opts) -> anyhow::Result<(i32, Value)> {
    let sc = opts.scenario()?;
    let exec = opts.exec();
    let started = Instant::now();
    let report = match cmd {
        Command::Run(_) => {
            let result = run_pipeline(&sc, exec);
            let code = exit_code(&result);
            let report = result?;
            return finish(&report, opts, code);
        }
        Command::Dam(_) => {
            let dam = stage_dam(&sc, exec)?;
            RunReport {
                config: sc,
                dam: Some(dam),
                bm: None,
                te: None,
                timings: StageTimings::default(),
            }
        }
        Command::Bm(_) => {
            let path = opts.input_dir().join("dam_schedule.csv");
            let dam = read_dam_csv(&path, &sc).with_context(|| format!("reading {}", path.display()))?;
            let bm = stage_bm(&sc, &dam, exec)?;
            RunReport {
                config: sc,
                dam: None,
                bm: Some(bm),
                te: None,
                timings: StageTimings::default(),
            }
        }
        Command::Te(_) => {
            let path = opts.input_dir().join("bm_schedule.csv");
            let bm = read_bm_csv(&path, &sc).with_context(|| format!("reading {}", path.display()))?;
            let te = stage_te(&sc, &bm, exec)?;
            RunReport {
                config: sc,
                dam: None,
                bm: None,
                te: Some(te),
                timings: StageTimings::default(),
            }
        }
        Command::Check(_) => return check(&sc, opts),
    };
    let mut report = report;
    let secs = started.elapsed().as_secs_f64();
    report.timings = StageTimings {
        dam: report.dam.as_ref().map_or(0.0, |_| secs),
        bm: report.bm.as_ref().map_or(0.0, |_| secs),
        te: report.te.as_ref().map_or(0.0, |_| secs),
        total: secs,
    };
    let code = if report.te.as_ref().is_some_and(|t| !t.converged()) { 2 } else { 0 };
    finish(&report, opts, code)
}

fn finish(report: &RunReport, opts: &Opts, code: i32) -> anyhow::Result<(i32, Value)> {
    let manifest = emit_results(report, &opts.output_dir, &opts.formats()).with_context(|| format!("writing {}", opts.output_dir.display()))?;
    let mut s = summarize(report);
    s["output_dir"] = json!(opts.output_dir);
    s["files"] = json!(manifest.iter().map(|m| m.file.as_str()).collect::<Vec<_>>());
    Ok((code, s))
}

fn summarize(r: &RunReport) -> Value {
    let mut stages = serde_json::Map::new();
    if let Some(d) = &r.dam {
        stages.insert(
            "dam".into(),
            json!({
                "total_cost": d.total_cost,
                "discharge_kwh": d.total_discharge_kwh(),
                "boc": d.boc,
                "seconds": d.solve_seconds,
            }),
        );
    }
    if let Some(b) = &r.bm {
        stages.insert(
            "bm".into(),
            json!({
                "realized_cost": b.realized_cost,
                "rolling": b.rolling,
                "windows": b.trace.len(),
                "fallbacks": b.fallback_count(),
                "seconds": b.solve_seconds,
            }),
        );
    }
    if let Some(t) = &r.te {
        let mut v = json!({
            "ran": t.te_ran(),
            "converged": t.converged(),
            "pre_te_violations": t.pre_te.len(),
            "pre_te_violation_hours": violation_hours(&t.pre_te),
            "post_te_violations": t.post_te.len(),
            "allocation_residual_kw": t.allocation_residual_kw,
        });
        if let Some(o) = &t.te {
            v["iterations"] = json!(o.iterations);
            v["max_abs_step"] = json!(o.history.last().map_or(0.0, |h| h.max_abs_step));
            v["seconds"] = json!(o.solve_seconds);
        }
        stages.insert("te".into(), v);
    }
    json!({
        "scenario": r.config.name,
        "seed": r.config.prices.seed,
        "stages": stages,
        "timings": r.timings,
    })
}

fn check(sc: &Scenario, opts: &Opts) -> anyhow::Result<(i32, Value)> {
    let mut s = json!({
        "scenario": sc.name,
        "valid": true,
        "evs": sc.fleet().len(),
        "aggregators": sc.aggregators.len(),
        "buses": sc.network.n_buses,
        "horizon": sc.horizon,
    });
    let path = opts.input_dir().join("bm_schedule.csv");
    if path.exists() {
        let bm = read_bm_csv(&path, sc).with_context(|| format!("reading {}", path.display()))?;
        let agents = build_agents(sc, &bm)?;
        let totals = gridroll_core::te::bus_targets(&agents, sc.network.n_buses, sc.horizon);
        let v = check_constraints(&sc.network_model(), &totals);
        s["security"] = json!({
            "plan": path,
            "violations": v.len(),
            "violation_hours": violation_hours(&v),
            "details": v,
        });
    }
    Ok((0, s))
}
