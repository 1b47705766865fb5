//! Scenario files, price forecasts and result emission.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use gridroll_core::pipeline::*;

use gridroll_core::scenario::*;
use gridroll_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_run() -> &'static RunReport {
    static RUN: OnceLock<RunReport> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline(&Scenario::default_scenario(), Execution::Sequential).unwrap())
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn forecast_errors_stay_inside_their_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let actual: Vec<f64> = (0..48).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut draws = 0;
    while draws < 10_000 {
        let seed = rng.gen();
        let start = rng.gen_range(0..40);
        let len = rng.gen_range(1..=8);
        let f = forecast_bm_prices(&actual, start, len, 0.015, seed);
        assert!(f.error_bounds.windows(2).all(|w| w[0] <= w[1]));
        for (lead, p) in f.prices.iter().enumerate() {
            let rel = (p / actual[start + lead] - 1.0).abs();
            assert!(rel <= 0.015 * (lead + 1) as f64 + 1e-12, "lead {lead}: {rel}");
            draws += 1;
        }
    }
    let again = forecast_bm_prices(&actual, 5, 6, 0.015, 9);
    let once = forecast_bm_prices(&actual, 5, 6, 0.015, 9);
    assert_eq!(
        again.prices.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        once.prices.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(forecast_bm_prices(&actual, 3, 4, 0.0, 1).prices, actual[3..7]);
}

#[test]
fn prices_can_come_from_a_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::default_scenario();
    let mut body = String::from("hour,dam_price,bm_price\n");
    for (h, (d, b)) in sc.prices.dam.iter().zip(&sc.prices.bm).enumerate() {
        body += &format!("{h},{d},{b}\n");
    }
    std::fs::write(dir.path().join("prices.csv"), body).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&sc.to_json()).unwrap();
    v["prices"]["dam"] = serde_json::json!([]);
    v["prices"]["bm"] = serde_json::json!([]);
    v["prices"]["csv"] = serde_json::json!("prices.csv");
    let path = dir.path().join("s.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let loaded = load_scenario(&path).unwrap();
    assert_eq!(loaded, sc);

    std::fs::write(dir.path().join("prices.csv"), "hour,dam_price,bm_price\n0,0.3,x\n").unwrap();
    assert!(load_scenario(&path).is_err());
}

#[test]
fn scenario_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    std::fs::write(&path, Scenario::default_scenario().to_json()).unwrap();
    assert_eq!(load_scenario(&path).unwrap(), Scenario::default_scenario());
    assert!(matches!(load_scenario(dir.path().join("missing.json")), Err(ScenarioError::Io { .. })));
    std::fs::write(&path, "{").unwrap();
    assert!(matches!(load_scenario(&path), Err(ScenarioError::Parse { .. })));
}

#[test]
fn congested_run_reports_only_pre_te_rows() {
    let run = default_run();
    let te = run.te.as_ref().unwrap();
    assert!(te.te_ran() && te.converged());
    assert!(!te.pre_te.is_empty() && te.post_te.is_empty());
    let dir = tempfile::tempdir().unwrap();
    emit_results(run, dir.path(), &[OutputFormat::Csv]).unwrap();
    let v = read(dir.path(), "violations.csv");
    let mut lines = v.lines();
    assert_eq!(lines.next(), Some("stage,hour,bus,kind,magnitude"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), te.pre_te.len());
    assert!(rows.iter().all(|r| r.starts_with("pre-TE,")));
    let volts = read(dir.path(), "voltages.csv");
    let stages: BTreeSet<&str> = volts.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, BTreeSet::from(["post-TE", "pre-TE"]));
}

#[test]
fn clean_run_writes_header_only_violations() {
    let mut sc = Scenario::default_scenario();
    sc.network.p_trans_max_kw = 500.0;
    let run = run_pipeline(&sc, Execution::Sequential).unwrap();
    assert!(!run.te.as_ref().unwrap().te_ran());
    let dir = tempfile::tempdir().unwrap();
    emit_results(&run, dir.path(), &[OutputFormat::Csv]).unwrap();
    assert_eq!(read(dir.path(), "violations.csv"), "stage,hour,bus,kind,magnitude\n");
    // negotiation tables keep their schema but stay empty
    assert_eq!(read(dir.path(), "lambda_trace.csv").lines().count(), 1);
    assert_eq!(read(dir.path(), "te_schedule.csv").lines().count(), 1);
}

#[test]
fn manifest_lists_exactly_the_requested_formats() {
    let run = default_run();
    for formats in [
        vec![OutputFormat::Csv],
        vec![OutputFormat::Svg],
        vec![OutputFormat::Json],
        vec![OutputFormat::Svg, OutputFormat::Json],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let m = emit_results(run, dir.path(), &formats).unwrap();
        let got: BTreeSet<OutputFormat> = m.iter().map(|e| e.format).collect();
        assert_eq!(got, formats.iter().copied().collect());
        let on_disk = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(on_disk, m.len());
        for e in &m {
            let ext = Path::new(&e.file).extension().unwrap().to_str().unwrap();
            assert_eq!(ext, e.format.as_str());
        }
    }
}

#[test]
fn csv_headers_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    emit_results(default_run(), dir.path(), &[OutputFormat::Csv]).unwrap();
    let golden = [
        ("dam_schedule.csv", "ev,aggregator,bus,hour,p_ch_kw,p_dis_kw,soc_end"),
        ("bm_schedule.csv", "ev,aggregator,bus,hour,mode,up_kw,down_kw,delivered_kw,c_dis,c_ch,fallback"),
        ("te_schedule.csv", "aggregator,bus,hour,target_kw,p_ch_kw,p_dis_kw,net_kw,dso_kw,lambda"),
        ("lambda_trace.csv", "iteration,bus,hour,lambda,mismatch_kw"),
        ("voltages.csv", "stage,hour,bus,u_linear,u_nr"),
        ("violations.csv", "stage,hour,bus,kind,magnitude"),
        ("ev_schedule.csv", "ev,aggregator,bus,hour,p_ch_kw,p_dis_kw,soc_end"),
    ];
    for (file, header) in golden {
        let body = read(dir.path(), file);
        assert_eq!(body.lines().next(), Some(header), "{file}");
        assert!(!body.contains('\r'), "{file}");
    }
}

fn csv_bytes(run: &RunReport) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let m = emit_results(run, dir.path(), &[OutputFormat::Csv]).unwrap();
    m.iter().map(|e| (e.file.clone(), std::fs::read(dir.path().join(&e.file)).unwrap())).collect()
}

#[test]
fn identical_inputs_give_identical_files() {
    let again = run_pipeline(&Scenario::default_scenario(), Execution::Parallel).unwrap();
    assert_eq!(again.without_timings(), default_run().without_timings());
    assert_eq!(csv_bytes(&again), csv_bytes(default_run()));
}

#[test]
fn stages_rerun_from_their_csv_inputs() {
    let sc = Scenario::default_scenario();
    let run = default_run();
    let dir = tempfile::tempdir().unwrap();
    emit_results(run, dir.path(), &[OutputFormat::Csv]).unwrap();

    let dam = read_dam_csv(&dir.path().join("dam_schedule.csv"), &sc).unwrap();
    let bm = stage_bm(&sc, &dam, Execution::Sequential).unwrap();
    assert_eq!(bm.evs, run.bm.as_ref().unwrap().evs);

    let bm_in = read_bm_csv(&dir.path().join("bm_schedule.csv"), &sc).unwrap();
    let te = stage_te(&sc, &bm_in, Execution::Sequential).unwrap();
    let staged = RunReport {
        config: sc.clone(),
        dam: Some(dam),
        bm: Some(bm_in),
        te: Some(te),
        timings: StageTimings::default(),
    };
    assert_eq!(csv_bytes(&staged), csv_bytes(run));
}
