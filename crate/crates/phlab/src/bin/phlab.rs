use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use phlab::harness::{
    append_records, read_records, report, run_experiment, verify_suite, ExperimentConfig, PolynomialMap, OUT_DIR_ENV,
};
use phlab::PhError;

/// Closing-lemma experiments on partially hyperbolic maps of the 3-torus.
#[derive(Parser)]
#[command(name = "phlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and append its records to the output sink.
    Run { config: PathBuf },
    /// Tables and CSV series from a records file.
    Report {
        records: PathBuf,
        /// Directory for the CSV files (defaults to $PHLAB_OUT_DIR, then the records directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment and exit nonzero if any invariant fails.
    Verify { config: PathBuf },
    /// Fixed point of a polynomial map on a box by the degree solver.
    Degree { map_spec: PathBuf },
}

const OK: u8 = 0;
const INVARIANT: u8 = 1;
const CONFIG: u8 = 2;

fn load(path: &Path) -> Result<ExperimentConfig, u8> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("config error: {e}");
        CONFIG
    })
}

fn run(path: &Path) -> anyhow::Result<u8> {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let records = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(PhError::ConfigInvalid(m)) => {
            eprintln!("config error: {m}");
            return Ok(CONFIG);
        }
        Err(e) => return Err(e.into()),
    };
    let sink = cfg.output_path();
    append_records(&sink, &records).with_context(|| format!("writing {}", sink.display()))?;
    for r in &records {
        let n = r.n.map(|n| format!(" n={n}")).unwrap_or_default();
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status} {:?}{n}{}", r.kind, r.error.as_ref().map(|e| format!(" ({e})")).unwrap_or_default());
    }
    println!("{} record(s) appended to {}", records.len(), sink.display());
    Ok(if records.iter().all(|r| r.pass) { OK } else { INVARIANT })
}

fn report_cmd(path: &Path, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let records = match read_records(path) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot read records: {e:#}");
            return Ok(CONFIG);
        }
    };
    let summary = report(&records);
    print!("{}", summary.table());
    let dir = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir)?;
    }
    std::fs::write(dir.join("closing.csv"), summary.closing_csv())?;
    std::fs::write(dir.join("lipschitz.csv"), summary.lipschitz_csv())?;
    Ok(OK)
}

fn verify(path: &Path) -> anyhow::Result<u8> {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let (outcome, _) = match verify_suite(&cfg) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(CONFIG);
        }
    };
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(if outcome.pass { OK } else { INVARIANT })
}

fn degree(path: &Path) -> anyhow::Result<u8> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return Ok(CONFIG);
        }
    };
    let map = match PolynomialMap::parse(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(CONFIG);
        }
    };
    let outcome = map.solve();
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(if outcome.fixed_point.is_some() { OK } else { INVARIANT })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config } => run(&config),
        Cmd::Report { records, out } => report_cmd(&records, out),
        Cmd::Verify { config } => verify(&config),
        Cmd::Degree { map_spec } => degree(&map_spec),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(INVARIANT)
        }
    }
}
