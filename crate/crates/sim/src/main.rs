use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use creditnet_core::model::generate_network;
use creditnet_sim::scenario::network_config;
use creditnet_sim::{run_scenario, MetricsRecord, SimConfig};

#[derive(Parser)]
#[command(name = "creditnet", about = "Credit network rebalancing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a network and print it in text form.
    Gen(Common),
    /// Balance transfer routed over prefix embeddings.
    BtPrefix(Common),
    /// Balance transfer routed over a Chord ring.
    BtChord(Common),
    /// Landmark bailout.
    Bailout(Common),
    /// Bailout and prefix-bt rows for N in 1000..10000.
    Bench(Common),
    /// Run the configured scenario with its adversary and print the audit.
    Audit(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics (or network, for gen) output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to save the final ledger.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

impl Common {
    fn config(&self, scenario: Option<&str>) -> Result<SimConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p).map_err(|e| e.to_string())?,
            None => SimConfig::default(),
        };
        if let Some(n) = self.nodes {
            cfg.network.nodes = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = scenario {
            cfg.scenario = s.into();
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn emit(out: &Option<PathBuf>, lines: &[String]) -> Result<(), String> {
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| e.to_string()),
    }
}

fn run(c: &Common, scenario: Option<&str>, with_audit: bool) -> Result<(), String> {
    let cfg = c.config(scenario)?;
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let mut lines: Vec<String> = out.records.iter().map(MetricsRecord::to_string).collect();
    if with_audit {
        lines.extend(out.audit.lines());
    }
    if let Some(b) = &out.bailout {
        lines.push(format!(
            "bailout requestor={} landmark={} links={} fee={} rounds={} failed={}",
            b.requestor,
            b.landmark,
            b.links.len(),
            b.fee,
            b.rounds,
            b.failed
        ));
    }
    if let Some(p) = &c.ledger {
        out.world.ledger.save(p).map_err(|e| e.to_string())?;
    }
    emit(&c.out, &lines)
}

fn bench(c: &Common) -> Result<(), String> {
    let sizes: Vec<usize> = match c.nodes {
        Some(n) => vec![n],
        None => vec![1000, 2000, 4000, 8000, 10000],
    };
    let mut lines = Vec::new();
    for scenario in ["bailout", "prefix-bt"] {
        for &n in &sizes {
            let mut cfg = c.config(Some(scenario))?;
            cfg.network.nodes = n;
            let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
            lines.extend(out.records.iter().map(MetricsRecord::to_string));
        }
    }
    emit(&c.out, &lines)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Gen(c) => c
            .config(None)
            .and_then(|cfg| generate_network(&network_config(&cfg)).map_err(|e| e.to_string()))
            .and_then(|net| emit(&c.out, &[net.serialize().trim_end().to_string()])),
        Cmd::BtPrefix(c) => run(c, Some("prefix-bt"), false),
        Cmd::BtChord(c) => run(c, Some("chord-bt"), false),
        Cmd::Bailout(c) => run(c, Some("bailout"), false),
        Cmd::Bench(c) => bench(c),
        Cmd::Audit(c) => run(c, None, true),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
