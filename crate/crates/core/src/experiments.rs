//! Regime and probe catalogs, experiment families and run orchestration.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RegimeConfig;
use crate::error::{Error, Result};
use crate::lifecycle::ChurnParams;
use crate::metrics::{aggregate, GroupAggregate, RunSummary, DELTA_GRID};
use crate::overlay::OverlayKind;
use crate::sim::{run_once, RunReport};
use crate::workload::WorkloadParams;

pub const DESK_AGENTS: usize = 256;
pub const DESK_HOSTS: usize = 128;
pub const DESK_SEEDS: [u64; 3] = [1, 2, 3];

pub const ABLATION_VOCABULARY: [u32; 5] = [10, 25, 50, 100, 200];
pub const ABLATION_RANGES: [[u32; 2]; 3] = [[1, 1], [1, 3], [2, 5]];

fn ladder(name: &str, churn: ChurnParams) -> RegimeConfig {
    RegimeConfig { name: name.into(), churn, ..RegimeConfig::default() }
}

/// The stable baseline and the three instability ladders.
pub fn main_regimes() -> Vec<RegimeConfig> {
    vec![
        RegimeConfig { horizon: 60, warmup: 20, request_rate: 0.125, ..ladder("stable", ChurnParams::STABLE) },
        ladder("node-churn-mild", ChurnParams::node(180, 10)),
        ladder("node-churn-moderate", ChurnParams::node(100, 30)),
        ladder("node-churn-aggressive", ChurnParams::node(60, 45)),
        ladder("cooling-mild", ChurnParams::cooling(60, 3, 1)),
        ladder("cooling-moderate", ChurnParams::cooling(20, 6, 2)),
        ladder("cooling-aggressive", ChurnParams::cooling(8, 10, 4)),
        ladder("combined-mild", ChurnParams::combined(180, 10, 60, 3, 1)),
        ladder("combined-moderate", ChurnParams::combined(100, 30, 20, 6, 2)),
        ladder("combined-critical", ChurnParams::combined(100, 30, 8, 10, 4)),
    ]
}

/// Maintenance and staleness probes.
pub fn probe_regimes() -> Vec<RegimeConfig> {
    let maint = RegimeConfig {
        name: "maint-reference".into(),
        n_agents: 1024,
        n_hosts: 512,
        warmup: 9,
        ..RegimeConfig::default()
    };
    let no_warmup = RegimeConfig { name: "maint-no-warmup".into(), warmup: 0, ..maint.clone() };
    let mut dense = RegimeConfig { name: "maint-dense-gossip".into(), ..maint.clone() };
    dense.gossip.cyclon_period = 1;
    dense.gossip.vicinity_period = 1;
    dense.gossip.forward_k = 2;
    let mut vic = RegimeConfig { name: "maint-vicinity-dense".into(), ..maint.clone() };
    vic.gossip.cyclon_period = 20;
    vic.gossip.vicinity_period = 1;
    vic.gossip.forward_k = 2;
    let mut republish = RegimeConfig { name: "maint-republish-plus".into(), ..maint.clone() };
    republish.kademlia.republish_period = 1;

    let stale = RegimeConfig {
        name: "stale-reference".into(),
        n_agents: 512,
        n_hosts: 256,
        churn: ChurnParams::combined(100, 20, 18, 6, 2),
        ..RegimeConfig::default()
    };
    let belief =
        RegimeConfig { name: "stale-host-belief".into(), churn: ChurnParams::cooling(10, 10, 4), ..stale.clone() };
    let routing = RegimeConfig { name: "stale-routing".into(), churn: ChurnParams::node(80, 25), ..stale.clone() };
    let mut rescue = RegimeConfig { name: "stale-dense-gossip-rescue".into(), ..stale.clone() };
    rescue.gossip.cyclon_period = 1;
    rescue.gossip.vicinity_period = 1;

    vec![maint, no_warmup, dense, vic, republish, stale, belief, routing, rescue]
}

/// Skill vocabulary × skills-per-agent sweep on the stable regime at desk scale.
pub fn ablation_regimes() -> Vec<RegimeConfig> {
    let base = desk(&main_regimes()[0]);
    let mut out = Vec::new();
    for range in ABLATION_RANGES {
        for vocab in ABLATION_VOCABULARY {
            out.push(RegimeConfig {
                name: format!("ablation-v{vocab}-s{}-{}", range[0], range[1]),
                skill_catalog: vocab,
                skills_per_agent: range,
                ..base.clone()
            });
        }
    }
    out
}

/// Workload variants on a favourable and an unstable operating point.
pub fn workload_regimes() -> Vec<RegimeConfig> {
    let variants = [
        ("zipf", WorkloadParams { zipf_exponent: Some(1.0), ..WorkloadParams::default() }),
        ("locality", WorkloadParams { locality_window: Some(5), ..WorkloadParams::default() }),
    ];
    let mut out = Vec::new();
    for base in main_regimes().into_iter().filter(|c| c.name == "stable" || c.name == "combined-moderate") {
        for (tag, workload) in variants {
            out.push(RegimeConfig { name: format!("{}+{tag}", base.name), workload, ..base.clone() });
        }
    }
    out
}

/// Every named regime.
pub fn catalog() -> Vec<RegimeConfig> {
    let mut all = main_regimes();
    all.extend(probe_regimes());
    all
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace([' ', '_'], "-")
}

pub fn find_regime(name: &str) -> Result<RegimeConfig> {
    let key = normalize(name);
    catalog()
        .into_iter()
        .chain(workload_regimes())
        .chain(ablation_regimes())
        .find(|c| c.name == key)
        .ok_or_else(|| Error::UnknownRegime(name.to_string()))
}

/// Desk-scale copy of a regime: 256 agents on 128 hosts, three seeds.
pub fn desk(cfg: &RegimeConfig) -> RegimeConfig {
    RegimeConfig { n_agents: DESK_AGENTS, n_hosts: DESK_HOSTS, seeds: DESK_SEEDS.to_vec(), ..cfg.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    E1,
    E2,
    E3,
    E4,
    E5,
    Ablation,
    Probes,
}

impl Family {
    pub const ALL: [Family; 7] =
        [Family::E1, Family::E2, Family::E3, Family::E4, Family::E5, Family::Ablation, Family::Probes];

    pub fn parse(name: &str) -> Result<Self> {
        match normalize(name).as_str() {
            "e1" => Ok(Family::E1),
            "e2" => Ok(Family::E2),
            "e3" => Ok(Family::E3),
            "e4" => Ok(Family::E4),
            "e5" => Ok(Family::E5),
            "ablation" => Ok(Family::Ablation),
            "probes" => Ok(Family::Probes),
            _ => Err(Error::UnknownFamily(name.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::E1 => "e1",
            Family::E2 => "e2",
            Family::E3 => "e3",
            Family::E4 => "e4",
            Family::E5 => "e5",
            Family::Ablation => "ablation",
            Family::Probes => "probes",
        }
    }

    /// Regimes in the family, full scale.
    pub fn regimes(self) -> Vec<RegimeConfig> {
        let main = main_regimes();
        let pick = |prefix: &str| -> Vec<RegimeConfig> {
            let mut v = vec![main[0].clone()];
            v.extend(main.iter().filter(|c| c.name.starts_with(prefix)).cloned());
            v
        };
        match self {
            Family::E1 => vec![main[0].clone()],
            Family::E2 => pick("node-churn"),
            Family::E3 => pick("cooling"),
            Family::E4 => pick("combined"),
            Family::E5 => workload_regimes(),
            Family::Ablation => ablation_regimes(),
            Family::Probes => probe_regimes(),
        }
    }
}

/// One run per seed of `cfg` on `overlay`, in seed order.
pub fn run_regime(cfg: &RegimeConfig, overlay: OverlayKind) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_once(cfg, overlay, s)).collect()
}

/// Runs every (regime, overlay, seed) combination in parallel. Reports come
/// back sorted by (regime, overlay, seed).
pub fn run_all(regimes: &[RegimeConfig], overlays: &[OverlayKind]) -> Result<Vec<RunReport>> {
    for r in regimes {
        r.validate()?;
    }
    let jobs: Vec<(&RegimeConfig, OverlayKind, u64)> = regimes
        .iter()
        .flat_map(|r| overlays.iter().flat_map(move |&o| r.seeds.iter().map(move |&s| (r, o, s))))
        .collect();
    let mut reports: Vec<RunReport> = jobs.par_iter().map(|&(r, o, s)| run_once(r, o, s)).collect::<Result<_>>()?;
    reports.sort_by(|a, b| (&a.regime, a.overlay, a.seed).cmp(&(&b.regime, b.overlay, b.seed)));
    Ok(reports)
}

/// Column names of the run summary CSV.
pub fn runs_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "regime",
        "overlay",
        "seed",
        "n_requests",
        "success_rate",
        "p50",
        "p95",
        "req_msgs_per_request",
        "maint_msgs_per_cycle",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(DELTA_GRID.iter().map(|d| format!("u_delta_{d}")));
    h
}

pub const REQUESTS_HEADER: [&str; 16] = [
    "regime",
    "overlay",
    "seed",
    "request_id",
    "issued_at",
    "source",
    "skill",
    "success",
    "agent",
    "host",
    "l_disc",
    "l_route",
    "l_start",
    "l_total",
    "request_msgs",
    "hops",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_runs_csv<W: Write>(out: W, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(runs_header())?;
    for s in summaries {
        let mut row = vec![
            s.regime.clone(),
            s.overlay.to_string(),
            s.seed.to_string(),
            s.n_requests.to_string(),
            format!("{:.6}", s.success_rate),
            opt(s.p50),
            opt(s.p95),
            format!("{:.6}", s.req_msgs_per_request),
            format!("{:.6}", s.maint_msgs_per_cycle),
        ];
        row.extend(s.u_delta.iter().map(|u| format!("{u:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_requests_csv<W: Write>(out: W, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUESTS_HEADER)?;
    for r in reports {
        for o in &r.outcomes {
            w.write_record([
                r.regime.clone(),
                r.overlay.to_string(),
                r.seed.to_string(),
                o.request.id.to_string(),
                o.request.issued_at.to_string(),
                o.request.source.0.to_string(),
                o.request.skill.0.to_string(),
                (o.success as u8).to_string(),
                opt(o.agent.map(|a| a.agent.0)),
                opt(o.agent.map(|a| a.host.0)),
                opt(o.l_disc),
                opt(o.l_route),
                opt(o.l_start),
                opt(o.l_total),
                o.request_msgs.to_string(),
                o.hops.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateFile {
    pub delta_grid: Vec<u64>,
    pub groups: Vec<GroupAggregate>,
}

pub fn write_aggregate_json<W: Write>(out: W, summaries: &[RunSummary]) -> Result<()> {
    let file = AggregateFile { delta_grid: DELTA_GRID.to_vec(), groups: aggregate(summaries) };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Writes `runs.csv`, `requests.csv` and `aggregate.json` into `dir`.
pub fn write_outputs(dir: &Path, reports: &[RunReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summaries: Vec<RunSummary> = reports.iter().map(|r| r.summary.clone()).collect();
    write_runs_csv(fs::File::create(dir.join("runs.csv"))?, &summaries)?;
    write_requests_csv(fs::File::create(dir.join("requests.csv"))?, reports)?;
    write_aggregate_json(fs::File::create(dir.join("aggregate.json"))?, &summaries)?;
    Ok(())
}

#[derive(Serialize)]
struct CatalogDoc<'a> {
    regime: &'a [RegimeConfig],
}

/// TOML rendering of every named regime.
pub fn export_catalog() -> Result<String> {
    let all = catalog();
    Ok(toml::to_string(&CatalogDoc { regime: &all })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_sizes() {
        assert_eq!(Family::E1.regimes().len(), 1);
        for f in [Family::E2, Family::E3, Family::E4] {
            assert_eq!(f.regimes().len(), 4);
        }
        assert_eq!(Family::Probes.regimes().len(), 9);
        assert_eq!(Family::Ablation.regimes().len(), 15);
        assert_eq!(Family::E5.regimes().len(), 4);
        assert!(Family::parse("E9").is_err());
    }

    #[test]
    fn every_catalog_entry_validates_and_resolves() {
        for c in catalog().iter().chain(ablation_regimes().iter()).chain(workload_regimes().iter()) {
            c.validate().unwrap();
            assert_eq!(&find_regime(&c.name).unwrap(), c);
        }
        assert_eq!(find_regime("Combined Critical").unwrap().name, "combined-critical");
        assert!(find_regime("nope").is_err());
    }

    #[test]
    fn desk_preset() {
        let d = desk(&find_regime("combined-critical").unwrap());
        assert_eq!((d.n_agents, d.n_hosts, d.seeds.len()), (256, 128, 3));
        assert_eq!(d.churn, ChurnParams::combined(100, 30, 8, 10, 4));
    }

    #[test]
    fn catalog_exports() {
        let text = export_catalog().unwrap();
        assert!(text.contains("combined-critical"));
        let doc: toml::Table = text.parse().unwrap();
        assert_eq!(doc["regime"].as_array().unwrap().len(), 19);
    }

    #[test]
    fn runs_csv_header() {
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &[]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with("regime,overlay,seed,n_requests,success_rate,p50,p95,"));
        assert!(line.trim_end().ends_with("u_delta_48,u_delta_64"));
    }
}
