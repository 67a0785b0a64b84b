use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use discovery_sim::experiments::{self, desk, export_catalog, find_regime, write_outputs, Family};
use discovery_sim::{OverlayKind, RegimeConfig};

#[derive(Parser)]
#[command(name = "discsim", version, about = "Agent discovery simulator under node churn and agent cooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment family (e1..e5, ablation, probes) or a single named regime.
    Run {
        target: String,
        /// Replace the seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for runs.csv, requests.csv and aggregate.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Desk scale: 256 agents, 128 hosts, 3 seeds.
        #[arg(long)]
        desk: bool,
        /// Restrict to one overlay (kademlia or cyclon_vicinity).
        #[arg(long)]
        overlay: Option<OverlayKind>,
        /// TOML file whose keys override every selected regime.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the names of all built-in regimes and families.
    ListRegimes,
    /// Print the built-in catalog as TOML.
    ExportCatalog,
}

fn select(target: &str) -> Result<Vec<RegimeConfig>> {
    if let Ok(family) = Family::parse(target) {
        return Ok(family.regimes());
    }
    match find_regime(target) {
        Ok(cfg) => Ok(vec![cfg]),
        Err(_) => bail!("`{target}` is neither a family nor a known regime (see `discsim list-regimes`)"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::ListRegimes => {
            println!("families: {}", Family::ALL.map(Family::as_str).join(", "));
            for c in experiments::catalog()
                .iter()
                .chain(experiments::workload_regimes().iter())
                .chain(experiments::ablation_regimes().iter())
            {
                println!("{}", c.name);
            }
        }
        Command::ExportCatalog => print!("{}", export_catalog()?),
        Command::Run { target, seed, out, desk: desk_scale, overlay, config } => {
            let patch = config
                .as_ref()
                .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let mut regimes = Vec::new();
            for mut cfg in select(&target)? {
                if desk_scale {
                    cfg = desk(&cfg);
                }
                if let Some(doc) = &patch {
                    cfg = cfg.apply_overrides(doc).with_context(|| format!("applying overrides to {}", cfg.name))?;
                }
                if let Some(s) = seed {
                    cfg.seeds = vec![s];
                }
                regimes.push(cfg);
            }
            let overlays: Vec<OverlayKind> = match overlay {
                Some(o) => vec![o],
                None => OverlayKind::ALL.to_vec(),
            };
            let reports = experiments::run_all(&regimes, &overlays)?;
            write_outputs(&out, &reports)?;
            for r in &reports {
                let s = &r.summary;
                println!(
                    "{:<28} {:<16} seed {:>3}  success {:.3}  p95 {:>3}  req/q {:>6.2}  maint/cycle {:>9.1}",
                    s.regime,
                    s.overlay,
                    s.seed,
                    s.success_rate,
                    s.p95.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                    s.req_msgs_per_request,
                    s.maint_msgs_per_cycle,
                );
            }
            println!("wrote {} runs to {}", reports.len(), out.display());
        }
    }
    Ok(())
}
