//! Scenario files: one JSON document holding the fleet, the feeder, the
//! price series and every run setting. `load_scenario` returns a fully
//! validated, self-contained value (CSV price imports are resolved).

mod emit;
mod forecast;
mod svg;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bm::{BmOptions, DegradationSign, MidWindowTerminal, RollingConfig};
use crate::dam::BocMode;
use crate::exec::Execution;
use crate::fleet::EvSpec;
use crate::grid::{Branch, FeederSpec, NetworkModel};
use crate::te::NegotiationConfig;

pub use emit::{emit_results, read_bm_csv, read_dam_csv, EmitError, ManifestEntry, OutputFormat};
pub use forecast::{forecast_bm_prices, PriceForecast, PriceProcess, DEFAULT_ERROR_RATE};

static DEFAULT_SCENARIO: &str = include_str!("../../scenarios/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvType {
    pub id: u8,
    pub capacity_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub p_max_ch: f64,
    pub p_max_dis: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub cycle_life: f64,
    pub dod: f64,
    /// Battery replacement cost, Dkk.
    pub c_bat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvEntry {
    pub id: String,
    pub ev_type: u8,
    pub bus: usize,
    pub soc_init: f64,
    pub soc_desired: f64,
    pub arrival: usize,
    pub departure: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorEntry {
    pub id: String,
    /// M_g, applied to every bus of this aggregator.
    #[serde(default = "one")]
    pub participation: f64,
    pub evs: Vec<EvEntry>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub n_buses: usize,
    #[serde(default)]
    pub slack_bus: usize,
    #[serde(default = "one")]
    pub slack_voltage: f64,
    pub s_base_kva: f64,
    pub branches: Vec<Branch>,
    /// Peak household load per bus, kW.
    pub bus_peak_kw: Vec<f64>,
    /// Hourly fraction of the peak, one entry per horizon hour.
    pub load_profile: Vec<f64>,
    pub p_trans_max_kw: f64,
    pub u_min: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    /// Day-ahead prices, Dkk/kWh. May be left empty when `csv` is given.
    #[serde(default)]
    pub dam: Vec<f64>,
    /// Actual balancing-market prices, Dkk/kWh.
    #[serde(default)]
    pub bm: Vec<f64>,
    /// `hour,dam_price,bm_price` file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_rate")]
    pub error_rate: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_rate() -> f64 {
    DEFAULT_ERROR_RATE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollingSection {
    pub window_hours: usize,
    pub step_hours: usize,
}

impl Default for RollingSection {
    fn default() -> Self {
        RollingSection {
            window_hours: 6,
            step_hours: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub include_boc: bool,
    pub use_rwo: bool,
    /// Charge energy pays the degradation cost too.
    pub boc_on_charge: bool,
    pub degradation: DegradationSign,
    pub terminal: MidWindowTerminal,
    pub force_te: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            include_boc: true,
            use_rwo: true,
            boc_on_charge: false,
            degradation: DegradationSign::default(),
            terminal: MidWindowTerminal::default(),
            force_te: false,
        }
    }
}

impl Flags {
    pub fn boc_mode(&self) -> BocMode {
        BocMode::from_flags(self.include_boc, self.boc_on_charge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub horizon: usize,
    pub ev_types: Vec<EvType>,
    pub aggregators: Vec<AggregatorEntry>,
    pub network: NetworkSection,
    pub prices: PriceSection,
    #[serde(default)]
    pub rolling: RollingSection,
    #[serde(default)]
    pub negotiation: NegotiationConfig,
    #[serde(default)]
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario ({} problems):\n  {}", .0.len(), .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n  "))]
    Validation(Vec<Issue>),
}

impl ScenarioError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            ScenarioError::Validation(v) => v,
            _ => &[],
        }
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Scenario::from_json(&text, path.parent().unwrap_or(Path::new(".")), path)
}

impl Scenario {
    /// Parses, resolves a CSV price import against `base_dir`, and validates.
    pub fn from_json(text: &str, base_dir: &Path, origin: &Path) -> Result<Self, ScenarioError> {
        let mut sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })?;
        if let Some(rel) = sc.prices.csv.take() {
            let p = base_dir.join(&rel);
            let (dam, bm) = read_price_csv(&p)?;
            sc.prices.dam = dam;
            sc.prices.bm = bm;
        }
        sc.validate()?;
        Ok(sc)
    }

    /// The bundled 36-hour, 20-EV, 7-bus scenario.
    pub fn default_scenario() -> Self {
        Scenario::from_json(DEFAULT_SCENARIO, Path::new("."), Path::new("default.json")).expect("bundled scenario is valid")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_SCENARIO
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Validation(issues))
        }
    }

    /// Every problem, each tagged with a JSON-style field path.
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut bad = |path: String, message: String| out.push(Issue { path, message });
        let h = self.horizon;
        if h == 0 {
            bad("horizon".into(), "must be at least 1".into());
        }
        for (name, s) in [
            ("prices.dam", &self.prices.dam),
            ("prices.bm", &self.prices.bm),
            ("network.load_profile", &self.network.load_profile),
        ] {
            if s.len() != h {
                bad(name.into(), format!("series length mismatch: {} values for a {h} h horizon", s.len()));
            }
            if let Some(i) = s.iter().position(|v| !v.is_finite()) {
                bad(format!("{name}[{i}]"), "not a finite number".into());
            }
        }
        if !(self.prices.error_rate >= 0.0) {
            bad("prices.error_rate".into(), "must be >= 0".into());
        }
        if self.prices.error_rate > 0.0 && self.prices.seed.is_none() {
            bad("prices.seed".into(), "required when error_rate > 0".into());
        }

        for (i, t) in self.ev_types.iter().enumerate() {
            if self.ev_types[..i].iter().any(|o| o.id == t.id) {
                bad(format!("ev_types[{i}].id"), format!("duplicate type {}", t.id));
            }
            let probe = EvEntry {
                id: String::new(),
                ev_type: t.id,
                bus: 0,
                soc_init: t.soc_min,
                soc_desired: t.soc_min,
                arrival: 0,
                departure: 1,
            };
            for (field, msg) in resolve(&probe, t).violations() {
                if TYPE_FIELDS.contains(&field) {
                    bad(format!("ev_types[{i}].{field}"), msg);
                }
            }
        }

        let net = &self.network;
        let mut seen: Vec<&str> = Vec::new();
        for (a, agg) in self.aggregators.iter().enumerate() {
            if !(agg.participation > 0.0) {
                bad(format!("aggregators[{a}].participation"), "must be > 0".into());
            }
            for (e, ev) in agg.evs.iter().enumerate() {
                let p = format!("aggregators[{a}].evs[{e}]");
                if seen.contains(&ev.id.as_str()) {
                    bad(format!("{p}.id"), format!("duplicate EV id {}", ev.id));
                }
                seen.push(&ev.id);
                let Some(ty) = self.ev_type(ev.ev_type) else {
                    bad(format!("{p}.ev_type"), format!("EV {}: undeclared type {}", ev.id, ev.ev_type));
                    continue;
                };
                if ev.bus >= net.n_buses {
                    bad(
                        format!("{p}.bus"),
                        format!("EV {}: bus {} is not in the network (0..{})", ev.id, ev.bus, net.n_buses),
                    );
                } else if ev.bus == net.slack_bus {
                    bad(format!("{p}.bus"), format!("EV {}: cannot connect at the slack bus", ev.id));
                }
                if ev.departure > h {
                    bad(
                        format!("{p}.departure"),
                        format!("EV {}: departs at {} after the {h} h horizon", ev.id, ev.departure),
                    );
                }
                for (field, msg) in resolve(ev, ty).violations() {
                    if !TYPE_FIELDS.contains(&field) {
                        bad(format!("{p}.{field}"), format!("EV {}: {msg}", ev.id));
                    }
                }
            }
        }
        if seen.is_empty() {
            bad("aggregators".into(), "no EVs declared".into());
        }

        if net.bus_peak_kw.len() != net.n_buses {
            bad(
                "network.bus_peak_kw".into(),
                format!("{} values for {} buses", net.bus_peak_kw.len(), net.n_buses),
            );
        }
        if !(net.p_trans_max_kw > 0.0) {
            bad("network.p_trans_max_kw".into(), "must be > 0".into());
        }
        if !(net.u_min < net.u_max) {
            bad("network.u_min".into(), "must be below u_max".into());
        }
        if net.slack_bus >= net.n_buses {
            bad("network.slack_bus".into(), "not in the network".into());
        }
        for (i, b) in net.branches.iter().enumerate() {
            if b.from >= net.n_buses || b.to >= net.n_buses {
                bad(format!("network.branches[{i}]"), format!("endpoint outside 0..{}", net.n_buses));
            }
        }
        let network_ok = net.bus_peak_kw.len() == net.n_buses
            && net.load_profile.len() == h
            && net.slack_bus < net.n_buses
            && net.branches.iter().all(|b| b.from < net.n_buses && b.to < net.n_buses);
        if network_ok {
            if let Err(e) = NetworkModel::new(self.feeder_spec()) {
                bad("network".into(), e.to_string());
            }
        }

        if self.rolling.window_hours == 0 || self.rolling.step_hours == 0 || self.rolling.step_hours > self.rolling.window_hours {
            bad("rolling".into(), "need 1 <= step_hours <= window_hours".into());
        }
        let n = &self.negotiation;
        if !(n.beta > 0.0) {
            bad("negotiation.beta".into(), "must be > 0".into());
        }
        if !(n.omega > 0.0) {
            bad("negotiation.omega".into(), "must be > 0".into());
        }
        if n.max_iters == 0 {
            bad("negotiation.max_iters".into(), "must be >= 1".into());
        }
        if n.segments == 0 {
            bad("negotiation.segments".into(), "must be >= 1".into());
        }
        out
    }

    pub fn ev_type(&self, id: u8) -> Option<&EvType> {
        self.ev_types.iter().find(|t| t.id == id)
    }

    /// All EVs in aggregator order.
    pub fn fleet(&self) -> Vec<EvSpec> {
        self.aggregators
            .iter()
            .flat_map(|a| &a.evs)
            .map(|ev| resolve(ev, self.ev_type(ev.ev_type).expect("validated")))
            .collect()
    }

    /// Aggregator index of each EV in [`Scenario::fleet`] order.
    pub fn aggregator_index(&self) -> Vec<usize> {
        self.aggregators
            .iter()
            .enumerate()
            .flat_map(|(a, agg)| std::iter::repeat_n(a, agg.evs.len()))
            .collect()
    }

    pub fn feeder_spec(&self) -> FeederSpec {
        let n = &self.network;
        FeederSpec {
            n_buses: n.n_buses,
            slack_bus: n.slack_bus,
            slack_voltage: n.slack_voltage,
            s_base_kva: n.s_base_kva,
            branches: n.branches.clone(),
            base_load_kw: n.load_profile.iter().map(|f| n.bus_peak_kw.iter().map(|p| p * f).collect()).collect(),
            p_trans_max_kw: n.p_trans_max_kw,
            u_min: n.u_min,
            u_max: n.u_max,
        }
    }

    pub fn network_model(&self) -> NetworkModel {
        NetworkModel::new(self.feeder_spec()).expect("validated")
    }

    pub fn price_process(&self) -> PriceProcess {
        PriceProcess {
            actual: self.prices.bm.clone(),
            error_rate: self.prices.error_rate,
            seed: self.prices.seed.unwrap_or(0),
        }
    }

    pub fn rolling_config(&self) -> RollingConfig {
        if self.flags.use_rwo {
            RollingConfig::new(self.rolling.window_hours, self.rolling.step_hours, self.horizon).expect("validated")
        } else {
            RollingConfig::single_shot(self.horizon)
        }
    }

    pub fn bm_options(&self, exec: Execution) -> BmOptions {
        BmOptions {
            boc: self.flags.boc_mode(),
            degradation: self.flags.degradation,
            terminal: self.flags.terminal,
            exec,
        }
    }
}

const TYPE_FIELDS: [&str; 10] = [
    "capacity_kwh",
    "soc_min",
    "soc_max",
    "p_max_ch",
    "p_max_dis",
    "eta_ch",
    "eta_dis",
    "cycle_life",
    "dod",
    "c_bat",
];

fn resolve(ev: &EvEntry, ty: &EvType) -> EvSpec {
    EvSpec {
        id: ev.id.clone(),
        ev_type: ty.id,
        bus: ev.bus,
        capacity_kwh: ty.capacity_kwh,
        soc_min: ty.soc_min,
        soc_max: ty.soc_max,
        soc_init: ev.soc_init,
        soc_desired: ev.soc_desired,
        p_max_ch: ty.p_max_ch,
        p_max_dis: ty.p_max_dis,
        eta_ch: ty.eta_ch,
        eta_dis: ty.eta_dis,
        arrival: ev.arrival,
        departure: ev.departure,
        cycle_life: ty.cycle_life,
        dod: ty.dod,
        c_bat: ty.c_bat,
    }
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    hour: usize,
    dam_price: f64,
    bm_price: f64,
}

/// Reads `hour,dam_price,bm_price`; hours must run 0, 1, 2, … in order.
pub fn read_price_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), ScenarioError> {
    let err = |message: String| ScenarioError::Parse {
        path: path.to_owned(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ScenarioError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let mut dam = Vec::new();
    let mut bm = Vec::new();
    for (i, row) in rdr.deserialize::<PriceRow>().enumerate() {
        let row = row.map_err(|e| err(e.to_string()))?;
        if row.hour != i {
            return Err(err(format!("row {}: expected hour {i}, found {}", i + 1, row.hour)));
        }
        dam.push(row.dam_price);
        bm.push(row.bm_price);
    }
    Ok((dam, bm))
}
