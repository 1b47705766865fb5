//! Acceptance checks. One line per criterion; the process fails if any does.

mod common;

use std::time::Instant;

use common::*;
use gridroll_core::bm::*;
use gridroll_core::fleet::step_soc;
use gridroll_core::kernel::{solve_lp, solve_milp, DEFAULT_GAP};
use gridroll_core::pipeline::*;
use gridroll_core::scenario::{emit_results, OutputFormat, Scenario};
use gridroll_core::te::*;
use gridroll_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXEC: Execution = Execution::Parallel;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn with_flags(f: impl FnOnce(&mut Scenario)) -> Scenario {
    let mut sc = Scenario::default_scenario();
    f(&mut sc);
    sc
}

fn c1_boc_kills_v2g() -> Check {
    let t = Instant::now();
    let on = run_pipeline(&Scenario::default_scenario(), EXEC).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let off = stage_dam(&with_flags(|s| s.flags.include_boc = false), EXEC).map_err(|e| e.to_string())?;
    let (d_on, d_off) = (on.dam.as_ref().unwrap().total_discharge_kwh(), off.total_discharge_kwh());
    ensure(
        d_on == 0.0 && d_off > 0.0 && secs < 10.0,
        format!("discharge with BOC {d_on} kWh, without {d_off:.3} kWh, run {secs:.2} s"),
    )
}

fn c2_post_te_security() -> Check {
    let t = Instant::now();
    let run = run_pipeline(&Scenario::default_scenario(), EXEC).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let te = run.te.as_ref().unwrap();
    let o = te.te.as_ref().ok_or("negotiation did not run")?;
    let step = o.history.last().map_or(f64::INFINITY, |h| h.max_abs_step);
    ensure(
        !te.pre_te.is_empty() && o.converged && step <= 0.005 && te.post_te.is_empty() && o.iterations <= 500 && secs < 60.0,
        format!(
            "pre-TE {} violations, post-TE {}, {} iterations, last step {step:.5}, {secs:.2} s",
            te.pre_te.len(),
            te.post_te.len(),
            o.iterations
        ),
    )
}

fn c3_boc_congestion() -> Check {
    let hours = |sc: &Scenario| -> Result<usize, String> {
        let dam = stage_dam(sc, EXEC).map_err(|e| e.to_string())?;
        let bm = stage_bm(sc, &dam, EXEC).map_err(|e| e.to_string())?;
        let agents = build_agents(sc, &bm).map_err(|e| e.to_string())?;
        let v = gridroll_core::grid::check_constraints(&sc.network_model(), &bus_targets(&agents, sc.network.n_buses, sc.horizon));
        Ok(gridroll_core::grid::violation_hours(&v))
    };
    let on = hours(&Scenario::default_scenario())?;
    let off = hours(&with_flags(|s| s.flags.include_boc = false))?;
    ensure(on >= off, format!("pre-TE violation hours with BOC {on}, without {off}"))
}

fn c4_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = random_milp(&mut rng);
        let s = solve_milp(&p, DEFAULT_GAP).map_err(|e| e.to_string())?;
        match enumerate_milp(&p) {
            Some(v) if s.is_optimal() => worst = worst.max((s.objective_value - v).abs()),
            None if !s.is_optimal() => {}
            _ => return Err("MILP status disagrees with enumeration".into()),
        }
    }
    let mut worst_lp = 0.0f64;
    let mut lps = 0;
    while lps < 20 {
        let (n, m) = (rng.gen_range(2..=6), rng.gen_range(2..=8));
        let lp = random_lp(&mut rng, n, m);
        let s = solve_lp(&lp).map_err(|e| e.to_string())?;
        match vertex_enumeration(&lp) {
            Some(v) if s.is_optimal() => worst_lp = worst_lp.max((s.objective_value - v).abs()),
            None if !s.is_optimal() => {}
            _ => return Err("LP status disagrees with vertex enumeration".into()),
        }
        lps += 1;
    }
    ensure(
        worst <= 1e-6 && worst_lp <= 1e-6,
        format!("50 MILPs max gap {worst:.2e}, 20 LPs max gap {worst_lp:.2e}"),
    )
}

/// Re-solves every window of a default-scenario BM run from its trace.
fn default_windows(seed: u64, mut f: impl FnMut(&BmWindowModel, &[f64])) -> Result<BmSchedule, String> {
    let sc = with_flags(|s| s.prices.seed = Some(seed));
    let dam = stage_dam(&sc, EXEC).map_err(|e| e.to_string())?;
    let prices = sc.price_process();
    let opts = sc.bm_options(EXEC);
    let fleet = sc.fleet();
    let out = run_rolling(&fleet, &dam, &prices, &sc.rolling_config(), &opts).map_err(|e| e.to_string())?;
    for w in &out.trace {
        let fc = prices.forecast(w.start, w.len);
        for (k, ev) in fleet.iter().enumerate() {
            let input = WindowInput {
                ev,
                soc_start: w.soc_in[k],
                baseline: &dam.evs[k].schedule,
                forecast: &fc.prices,
                start: w.start,
                len: w.len,
            };
            let m = build_bm_window_model(&input, &opts).map_err(|e| e.to_string())?;
            if m.hours.is_empty() {
                continue;
            }
            let s = solve_milp(&m.milp, DEFAULT_GAP).map_err(|e| e.to_string())?;
            if s.is_optimal() {
                f(&m, &s.values);
            }
        }
    }
    Ok(out)
}

fn c5_big_m() -> Check {
    let (mut worst, mut slots, mut bad_modes) = (0.0f64, 0usize, 0usize);
    for seed in 0..10 {
        default_windows(seed, |m, x| {
            for h in &m.hours {
                let r = |j: usize| x[j].round();
                if r(h.d3) + r(h.d4) != 1.0 {
                    bad_modes += 1;
                }
                for (z, a, b, p) in [
                    (h.z1, h.d1, h.d3, h.p_up),
                    (h.z2, h.d2, h.d3, h.p_down),
                    (h.z3, h.d1, h.d4, h.p_up),
                    (h.z4, h.d2, h.d4, h.p_down),
                ] {
                    worst = worst.max((x[z] - r(a) * r(b) * x[p]).abs());
                }
                slots += 1;
            }
        })?;
    }
    ensure(
        worst <= 1e-6 && bad_modes == 0 && slots > 0,
        format!("{slots} slots, max |z - δδP| {worst:.2e}, mode sums off in {bad_modes}"),
    )
}

fn c6_convexification() -> Check {
    let cfg = NegotiationConfig::default();
    let pb = 70.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let agent = random_agent(&mut rng, 8);
        let lambda = vec![vec![0.0; 8], (0..8).map(|_| rng.gen_range(0.0..0.3)).collect()];
        let r = aggregator_response(&agent, &lambda, pb, &cfg).map_err(|e| e.to_string())?;
        for t in 0..8 {
            let both = r.schedules[0].p_ch[t].min(r.schedules[0].p_dis[t]) / pb;
            worst = worst.max(both - r.pwl_tolerance);
        }
    }
    let agent = random_agent(&mut rng, 8);
    let lambda = vec![vec![0.05; 8]; 2];
    let tol = |segments| {
        let cfg = NegotiationConfig {
            segments,
            resolution_kw: Some(0.0),
            ..Default::default()
        };
        aggregator_response(&agent, &lambda, pb, &cfg).map(|r| r.pwl_tolerance)
    };
    let (a, b, c) = (
        tol(32).map_err(|e| e.to_string())?,
        tol(64).map_err(|e| e.to_string())?,
        tol(128).map_err(|e| e.to_string())?,
    );
    let quad = a / b >= 4.0 * (1.0 - 1e-9) && b / c >= 4.0 * (1.0 - 1e-9);
    ensure(
        worst <= 0.0 && quad,
        format!("100 solves, max min(ch, dis) minus tolerance {worst:.2e}; tolerance 32/64/128 segments {a:.2e}/{b:.2e}/{c:.2e}"),
    )
}

fn c7_linearization() -> Check {
    let net = Scenario::default_scenario().network_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let hour = rng.gen_range(0..net.horizon());
        let p: Vec<f64> = net.spec.base_load_kw[hour].iter().map(|b| b * rng.gen_range(-0.2..=0.2)).collect();
        let lin = net.linear_voltages(hour, &p);
        let nr = net.nr_voltages(hour, &p).map_err(|e| e.to_string())?;
        worst = lin.iter().zip(&nr).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst <= 0.005, format!("1000 injections, max |U_lin - U_NR| {worst:.2e} p.u."))
}

fn c8_centralized() -> Check {
    let (agents, net) = micro_instance();
    let cfg = NegotiationConfig {
        security_margin: false,
        omega: 0.0005,
        ..Default::default()
    };
    let central = centralized_solve(&agents, &net, &cfg).map_err(|e| e.to_string())?;
    let out = negotiate(&agents, &net, &cfg, Execution::Sequential).map_err(|e| e.to_string())?;
    let scheds: Vec<Vec<_>> = out.agents.iter().map(|a| a.schedules.clone()).collect();
    let dec = social_cost(&agents, &scheds, &out.dso, net.spec.p_trans_max_kw);
    let rel = (dec - central.social_cost).abs() / central.social_cost.abs();
    ensure(
        out.converged && central.social_cost > 1e-3 && rel <= 0.01,
        format!(
            "negotiated {dec:.6}, centralized {:.6}, gap {:.3} % (ω = 0.0005)",
            central.social_cost,
            100.0 * rel
        ),
    )
}

fn c9_hand_off() -> Check {
    let (mut windows, mut rewrites, mut breaks) = (0usize, 0usize, 0usize);
    for seed in 0..10 {
        let sc = with_flags(|s| s.prices.seed = Some(seed));
        let fleet = sc.fleet();
        let dam = stage_dam(&sc, EXEC).map_err(|e| e.to_string())?;
        let out = stage_bm(&sc, &dam, EXEC).map_err(|e| e.to_string())?;
        let prices = sc.price_process();
        let opts = sc.bm_options(EXEC);
        for pair in out.trace.windows(2) {
            if pair[0].soc_out.iter().zip(&pair[1].soc_in).any(|(a, b)| a.to_bits() != b.to_bits()) {
                breaks += 1;
            }
        }
        for w in &out.trace {
            windows += 1;
            let fc = prices.forecast(w.start, w.len);
            for (k, ev) in fleet.iter().enumerate() {
                let mut s = w.soc_in[k];
                for &t in &w.committed {
                    if ev.is_connected(t) {
                        if t == ev.arrival {
                            s = ev.soc_init;
                        }
                        let d = out.evs[k].hours[t].delivered;
                        s = step_soc(s, d.max(0.0), (-d).max(0.0), ev, 1.0);
                    }
                }
                if s.to_bits() != w.soc_out[k].to_bits() {
                    breaks += 1;
                }
                if ev.departure <= w.start || ev.arrival >= w.start + w.len || w.fallbacks.contains(&ev.id) {
                    continue;
                }
                let input = WindowInput {
                    ev,
                    soc_start: w.soc_in[k],
                    baseline: &dam.evs[k].schedule,
                    forecast: &fc.prices,
                    start: w.start,
                    len: w.len,
                };
                if let Some(plan) = solve_window(&input, &opts).map_err(|e| e.to_string())? {
                    for &t in &w.committed {
                        if let Some((_, h)) = plan.hours.iter().find(|(h, _)| *h == t) {
                            if *h != out.evs[k].hours[t] {
                                rewrites += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure(
        breaks == 0 && rewrites == 0,
        format!("{windows} windows, {breaks} SOC breaks, {rewrites} rewritten commitments"),
    )
}

fn c10_rwo_value() -> Check {
    let mut rolling = Vec::new();
    let mut single = Vec::new();
    for seed in 0..20 {
        let sc = with_flags(|s| s.prices.seed = Some(seed));
        let dam = stage_dam(&sc, EXEC).map_err(|e| e.to_string())?;
        rolling.push(stage_bm(&sc, &dam, EXEC).map_err(|e| e.to_string())?.realized_cost);
        let sc1 = with_flags(|s| {
            s.prices.seed = Some(seed);
            s.flags.use_rwo = false;
        });
        single.push(stage_bm(&sc1, &dam, EXEC).map_err(|e| e.to_string())?.realized_cost);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    let (r, s) = (median(&mut rolling), median(&mut single));
    ensure(
        r <= s,
        format!("median realized BM cost, rolling {r:.4} Dkk vs single-shot {s:.4} Dkk over 20 seeds"),
    )
}

fn c11_determinism() -> Check {
    let bytes = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let run = run_pipeline(&Scenario::default_scenario(), EXEC).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let m = emit_results(&run, dir.path(), &[OutputFormat::Csv]).map_err(|e| e.to_string())?;
        m.iter()
            .map(|e| std::fs::read(dir.path().join(&e.file)).map(|b| (e.file.clone(), b)).map_err(|e| e.to_string()))
            .collect()
    };
    let (a, b) = (bytes()?, bytes()?);
    ensure(a == b, format!("{} CSV files compared", a.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("BOC removes V2G from the day-ahead plan", c1_boc_kills_v2g),
        ("negotiated schedules are secure", c2_post_te_security),
        ("BOC does not reduce congestion", c3_boc_congestion),
        ("kernel matches enumeration oracles", c4_oracles),
        ("big-M products are exact", c5_big_m),
        ("convexified response never overlaps", c6_convexification),
        ("linearized voltages track the exact flow", c7_linearization),
        ("negotiation matches the centralized optimum", c8_centralized),
        ("rolling SOC hand-off is exact", c9_hand_off),
        ("rolling beats the single-shot plan", c10_rwo_value),
        ("runs are byte-for-byte reproducible", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}: {name} ({detail}) [{:.2} s]", i + 1, t.elapsed().as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
