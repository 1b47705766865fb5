//! Result files. Floats are written in Rust's shortest round-trip form so a
//! CSV read back reproduces the exact value.
//!
//! | file | columns |
//! |---|---|
//! | dam_schedule.csv | ev, aggregator, bus, hour, p_ch_kw, p_dis_kw, soc_end |
//! | bm_schedule.csv | ev, aggregator, bus, hour, mode, up_kw, down_kw, delivered_kw, c_dis, c_ch, fallback |
//! | te_schedule.csv | aggregator, bus, hour, target_kw, p_ch_kw, p_dis_kw, net_kw, dso_kw, lambda |
//! | lambda_trace.csv | iteration, bus, hour, lambda, mismatch_kw |
//! | voltages.csv | stage, hour, bus, u_linear, u_nr |
//! | violations.csv | stage, hour, bus, kind, magnitude |
//! | ev_schedule.csv | ev, aggregator, bus, hour, p_ch_kw, p_dis_kw, soc_end |

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{line_plot, Series};
use super::Scenario;
use crate::bm::{settle_window, BmHour, BmSchedule, EvBm, Mode};
use crate::dam::{soc_path, DamSchedule, EvDam};
use crate::fleet::{EvSpec, Schedule};
use crate::grid::Violation;
use crate::pipeline::{RunReport, TeStage};

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Svg,
    Json,
}

impl OutputFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Svg => "svg",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub format: OutputFormat,
}

struct Out<'a> {
    dir: &'a Path,
    manifest: Vec<ManifestEntry>,
}

impl Out<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), EmitError> {
        let path = self.dir.join(name);
        let io = |e: csv::Error| EmitError::Format {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(&r).map_err(io)?;
        }
        w.flush().map_err(|source| EmitError::Io { path: path.clone(), source })?;
        self.manifest.push(ManifestEntry {
            file: name.into(),
            format: OutputFormat::Csv,
        });
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str, format: OutputFormat) -> Result<(), EmitError> {
        let path = self.dir.join(name);
        File::create(&path)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(|source| EmitError::Io { path, source })?;
        self.manifest.push(ManifestEntry { file: name.into(), format });
        Ok(())
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Writes whatever stages `run` contains, in the requested formats.
pub fn emit_results(run: &RunReport, out_dir: &Path, formats: &[OutputFormat]) -> Result<Vec<ManifestEntry>, EmitError> {
    std::fs::create_dir_all(out_dir).map_err(|source| EmitError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let mut out = Out {
        dir: out_dir,
        manifest: Vec::new(),
    };
    let sc = &run.config;
    let fleet = sc.fleet();
    let owner: Vec<&str> = sc.aggregator_index().iter().map(|&a| sc.aggregators[a].id.as_str()).collect();
    if formats.contains(&OutputFormat::Csv) {
        if let Some(dam) = &run.dam {
            write_dam(&mut out, &fleet, &owner, dam)?;
        }
        if let Some(bm) = &run.bm {
            write_bm(&mut out, &fleet, &owner, bm)?;
        }
        if let Some(te) = &run.te {
            write_te(&mut out, sc, &fleet, &owner, te)?;
        }
    }
    if formats.contains(&OutputFormat::Svg) {
        write_plots(&mut out, run, &fleet)?;
    }
    if formats.contains(&OutputFormat::Json) {
        let body = serde_json::to_string_pretty(run).map_err(|e| EmitError::Format {
            path: out_dir.join("report.json"),
            message: e.to_string(),
        })?;
        out.text("report.json", &body, OutputFormat::Json)?;
    }
    Ok(out.manifest)
}

fn write_dam(out: &mut Out<'_>, fleet: &[EvSpec], owner: &[&str], dam: &DamSchedule) -> Result<(), EmitError> {
    let mut rows = Vec::new();
    for ((ev, d), agg) in fleet.iter().zip(&dam.evs).zip(owner) {
        rows.extend(ev_rows(ev, agg, &d.schedule));
    }
    out.csv("dam_schedule.csv", &["ev", "aggregator", "bus", "hour", "p_ch_kw", "p_dis_kw", "soc_end"], rows)
}

fn ev_rows(ev: &EvSpec, agg: &str, s: &Schedule) -> Vec<Vec<String>> {
    let soc = soc_path(ev, s);
    (ev.arrival..ev.departure)
        .map(|t| {
            vec![
                ev.id.clone(),
                agg.to_string(),
                ev.bus.to_string(),
                t.to_string(),
                f(s.p_ch[t]),
                f(s.p_dis[t]),
                f(soc[t + 1]),
            ]
        })
        .collect()
}

fn write_bm(out: &mut Out<'_>, fleet: &[EvSpec], owner: &[&str], bm: &BmSchedule) -> Result<(), EmitError> {
    let mut rows = Vec::new();
    for ((ev, b), agg) in fleet.iter().zip(&bm.evs).zip(owner) {
        for t in ev.arrival..ev.departure {
            let h = &b.hours[t];
            rows.push(vec![
                ev.id.clone(),
                agg.to_string(),
                ev.bus.to_string(),
                t.to_string(),
                h.mode.as_str().to_string(),
                f(h.up),
                f(h.down),
                f(h.delivered),
                f(h.c_dis),
                f(h.c_ch),
                h.fallback.to_string(),
            ]);
        }
    }
    out.csv(
        "bm_schedule.csv",
        &[
            "ev",
            "aggregator",
            "bus",
            "hour",
            "mode",
            "up_kw",
            "down_kw",
            "delivered_kw",
            "c_dis",
            "c_ch",
            "fallback",
        ],
        rows,
    )
}

fn violation_rows(stage: &str, v: &[Violation]) -> Vec<Vec<String>> {
    v.iter()
        .map(|x| {
            vec![
                stage.to_string(),
                x.hour.to_string(),
                x.bus.map_or(String::new(), |b| b.to_string()),
                x.kind.as_str().to_string(),
                f(x.magnitude),
            ]
        })
        .collect()
}

fn write_te(out: &mut Out<'_>, sc: &Scenario, fleet: &[EvSpec], owner: &[&str], te: &TeStage) -> Result<(), EmitError> {
    let net = sc.network_model();
    let n = sc.network.n_buses;
    let h = sc.horizon;

    let mut rows = Vec::new();
    let mut trace = Vec::new();
    if let Some(o) = &te.te {
        for (agent, res) in te.agents.iter().zip(&o.agents) {
            for (k, (s, sched)) in agent.storages.iter().zip(&res.schedules).enumerate() {
                for t in s.active_hours() {
                    rows.push(vec![
                        agent.id.clone(),
                        s.bus.to_string(),
                        t.to_string(),
                        f(agent.targets[k][t]),
                        f(sched.p_ch[t]),
                        f(sched.p_dis[t]),
                        f(sched.net(t)),
                        f(o.dso[s.bus][t]),
                        f(o.lambda[s.bus][t]),
                    ]);
                }
            }
        }
        let active: Vec<(usize, usize)> = (0..n)
            .flat_map(|g| (0..h).map(move |t| (g, t)))
            .filter(|&(g, t)| {
                te.agents
                    .iter()
                    .flat_map(|a| &a.storages)
                    .any(|s| s.bus == g && (s.p_max_ch[t] > 0.0 || s.p_max_dis[t] > 0.0))
            })
            .collect();
        for rec in &o.history {
            for &(g, t) in &active {
                trace.push(vec![
                    rec.iteration.to_string(),
                    g.to_string(),
                    t.to_string(),
                    f(rec.lambda[g][t]),
                    f(rec.mismatch_kw[g][t]),
                ]);
            }
        }
    }
    out.csv(
        "te_schedule.csv",
        &["aggregator", "bus", "hour", "target_kw", "p_ch_kw", "p_dis_kw", "net_kw", "dso_kw", "lambda"],
        rows,
    )?;
    out.csv("lambda_trace.csv", &["iteration", "bus", "hour", "lambda", "mismatch_kw"], trace)?;

    let pre = crate::te::bus_targets(&te.agents, n, h);
    let mut post = vec![vec![0.0; h]; n];
    for (ev, (_, s)) in fleet.iter().zip(&te.ev_schedules) {
        for t in 0..h {
            post[ev.bus][t] += s.net(t);
        }
    }
    let mut volts = Vec::new();
    for (stage, p) in [("pre-TE", &pre), ("post-TE", &post)] {
        for t in 0..h {
            let inj: Vec<f64> = (0..n).map(|g| p[g][t]).collect();
            let lin = net.linear_voltages(t, &inj);
            let nr = net.nr_voltages(t, &inj).unwrap_or_else(|_| vec![f64::NAN; n]);
            for k in 0..n {
                volts.push(vec![stage.to_string(), t.to_string(), k.to_string(), f(lin[k]), f(nr[k])]);
            }
        }
    }
    out.csv("voltages.csv", &["stage", "hour", "bus", "u_linear", "u_nr"], volts)?;

    let mut viol = violation_rows("pre-TE", &te.pre_te);
    if te.te_ran() {
        viol.extend(violation_rows("post-TE", &te.post_te));
    }
    out.csv("violations.csv", &["stage", "hour", "bus", "kind", "magnitude"], viol)?;

    let mut rows = Vec::new();
    for ((ev, (_, s)), agg) in fleet.iter().zip(&te.ev_schedules).zip(owner) {
        rows.extend(ev_rows(ev, agg, s));
    }
    out.csv("ev_schedule.csv", &["ev", "aggregator", "bus", "hour", "p_ch_kw", "p_dis_kw", "soc_end"], rows)
}

fn write_plots(out: &mut Out<'_>, run: &RunReport, fleet: &[EvSpec]) -> Result<(), EmitError> {
    let h = run.config.horizon;
    let limit = Some((run.config.network.p_trans_max_kw, "transformer limit"));
    let sum = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> { (0..h).map(|t| (0..fleet.len()).map(|k| f(k, t)).sum()).collect() };
    match (&run.dam, &run.bm) {
        (Some(dam), Some(bm)) => {
            let damv = sum(&|k, t| dam.evs[k].schedule.net(t));
            let bmv = sum(&|k, t| bm.evs[k].hours[t].delivered);
            let svg = line_plot(
                "Aggregate EV power: day-ahead vs balancing market",
                "kW",
                &[
                    Series {
                        label: "DAM",
                        values: &damv,
                        color: "#1f77b4",
                    },
                    Series {
                        label: "BM",
                        values: &bmv,
                        color: "#ff7f0e",
                    },
                ],
                limit,
            );
            out.text("power_bm.svg", &svg, OutputFormat::Svg)?;
        }
        (Some(dam), None) => {
            let damv = sum(&|k, t| dam.evs[k].schedule.net(t));
            let svg = line_plot(
                "Aggregate EV power: day-ahead",
                "kW",
                &[Series {
                    label: "DAM",
                    values: &damv,
                    color: "#1f77b4",
                }],
                limit,
            );
            out.text("power_dam.svg", &svg, OutputFormat::Svg)?;
        }
        _ => {}
    }
    if let Some(te) = &run.te {
        // the agents' targets are the BM plan per bus
        let before: Vec<f64> = (0..h).map(|t| te.agents.iter().flat_map(|a| &a.targets).map(|row| row[t]).sum()).collect();
        let after = sum(&|k, t| te.ev_schedules[k].1.net(t));
        let svg = line_plot(
            "Aggregate EV power: before vs after negotiation",
            "kW",
            &[
                Series {
                    label: "before TE",
                    values: &before,
                    color: "#ff7f0e",
                },
                Series {
                    label: "after TE",
                    values: &after,
                    color: "#2ca02c",
                },
            ],
            limit,
        );
        out.text("power_te.svg", &svg, OutputFormat::Svg)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<csv::Reader<File>, EmitError> {
    csv::Reader::from_path(path).map_err(|e| EmitError::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn locate(fleet: &[EvSpec], path: &Path, id: &str, hour: usize, horizon: usize) -> Result<usize, EmitError> {
    let k = fleet.iter().position(|e| e.id == id).ok_or_else(|| EmitError::Format {
        path: path.to_owned(),
        message: format!("unknown EV {id}"),
    })?;
    if hour >= horizon {
        return Err(EmitError::Format {
            path: path.to_owned(),
            message: format!("EV {id}: hour {hour} outside the horizon"),
        });
    }
    Ok(k)
}

#[derive(Deserialize)]
struct DamRow {
    ev: String,
    hour: usize,
    p_ch_kw: f64,
    p_dis_kw: f64,
}

/// Rebuilds a day-ahead schedule from `dam_schedule.csv`; costs are recomputed
/// at `dam_prices` without the degradation term.
pub fn read_dam_csv(path: &Path, sc: &Scenario) -> Result<DamSchedule, EmitError> {
    let fleet = sc.fleet();
    let h = sc.horizon;
    let mut scheds: Vec<Schedule> = fleet.iter().map(|_| Schedule::zeros(h)).collect();
    for row in open(path)?.deserialize::<DamRow>() {
        let r = row.map_err(|e| EmitError::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let k = locate(&fleet, path, &r.ev, r.hour, h)?;
        scheds[k].p_ch[r.hour] = r.p_ch_kw;
        scheds[k].p_dis[r.hour] = r.p_dis_kw;
    }
    let evs: Vec<EvDam> = fleet
        .iter()
        .zip(scheds)
        .map(|(ev, schedule)| EvDam {
            id: ev.id.clone(),
            cost: (0..h).map(|t| sc.prices.dam[t] * schedule.net(t)).sum(),
            schedule,
            nodes: 0,
        })
        .collect();
    Ok(DamSchedule {
        total_cost: evs.iter().map(|e| e.cost).sum(),
        evs,
        boc: sc.flags.boc_mode(),
        solve_seconds: 0.0,
    })
}

#[derive(Deserialize)]
struct BmRow {
    ev: String,
    hour: usize,
    mode: Mode,
    up_kw: f64,
    down_kw: f64,
    delivered_kw: f64,
    c_dis: f64,
    c_ch: f64,
    fallback: bool,
}

/// Rebuilds a balancing-market plan from `bm_schedule.csv`. The realized cost
/// is settled again at the scenario's actual prices; the window trace is not
/// stored and comes back empty.
pub fn read_bm_csv(path: &Path, sc: &Scenario) -> Result<BmSchedule, EmitError> {
    let fleet = sc.fleet();
    let h = sc.horizon;
    let mut hours: Vec<Vec<BmHour>> = fleet.iter().map(|_| vec![BmHour::offline(); h]).collect();
    for row in open(path)?.deserialize::<BmRow>() {
        let r = row.map_err(|e| EmitError::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let k = locate(&fleet, path, &r.ev, r.hour, h)?;
        hours[k][r.hour] = BmHour {
            mode: r.mode,
            up: r.up_kw,
            down: r.down_kw,
            delivered: r.delivered_kw,
            c_dis: r.c_dis,
            c_ch: r.c_ch,
            fallback: r.fallback,
        };
    }
    let evs: Vec<EvBm> = fleet.iter().zip(hours).map(|(ev, hours)| EvBm { id: ev.id.clone(), hours }).collect();
    let realized_cost = evs
        .iter()
        .map(|e| settle_window(&e.hours.iter().copied().enumerate().collect::<Vec<_>>(), &sc.prices.bm))
        .sum();
    Ok(BmSchedule {
        evs,
        realized_cost,
        rolling: sc.flags.use_rwo,
        trace: Vec::new(),
        solve_seconds: 0.0,
    })
}
