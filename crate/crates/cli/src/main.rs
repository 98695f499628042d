mod config;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use hris_core::bench::{
    append_result, brute_force, monte_carlo, read_results, run_scheme, sha256_hex, summarize,
    write_results, write_summary, write_timings, Scheme, TrialResult,
};
use hris_core::channel::gen_channel_set;
use hris_core::validation::{run_suite, Suite};

use config::{parse_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "hris",
    version,
    about = "Hybrid active/passive RIS uplink experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted or empty means the paper preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, with dotted keys such as `system.l=4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sweep over schemes, budgets and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory, overriding `sweep.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suites: mse, expectation, decomposition, closedform, bruteforce.
        #[arg(long, value_delimiter = ',')]
        suite: Vec<String>,
    },
    /// Tidy plot series from a results file.
    Plotdata {
        results: PathBuf,
        /// Output directory; defaults to the directory of the results file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PEBCD against exhaustive search on the configured (small) instances.
    Bruteforce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    parse_config(text.as_deref(), &common.overrides)
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        b = b.num_threads(n);
    }
    b.build().context("building thread pool")
}

fn write_manifest(dir: &Path, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = cfg.manifest()?;
    fs::write(dir.join("manifest.toml"), &manifest)?;
    Ok(sha256_hex(manifest.as_bytes()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_sweep(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = load(common)?;
    let sweep = cfg.sweep_config()?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.sweep.output_dir));
    let hash = write_manifest(&dir, &cfg)?;

    let journal_path = dir.join("journal.csv");
    let mut journal = create(&journal_path)?;
    writeln!(journal, "# manifest_sha256={hash}")?;
    journal.flush()?;
    let journal = Mutex::new((journal, true));
    let total = sweep.schemes.len() * sweep.p_hris_grid_dbm.len() * sweep.seeds.len();
    let done = AtomicUsize::new(0);
    let journal_err: Mutex<Option<String>> = Mutex::new(None);

    let rows = pool(common.threads)?.install(|| {
        monte_carlo(&sweep, |row| {
            let mut guard = journal.lock().expect("journal lock");
            let (w, header) = &mut *guard;
            let res = append_result(&mut *w, row, *header).and_then(|_| Ok(w.flush()?));
            *header = false;
            if let Err(e) = res {
                journal_err
                    .lock()
                    .expect("error lock")
                    .get_or_insert(e.to_string());
            }
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            eprintln!(
                "[{k}/{total}] {} {:+.1} dBm seed {}: mse {:.6} ({})",
                row.scheme, row.budget_dbm, row.seed, row.mse, row.status
            );
        })
    })?;
    if let Some(e) = journal_err.into_inner().expect("error lock") {
        bail!("writing journal: {e}");
    }

    write_results(create(&dir.join("results.csv"))?, &rows, &hash)?;
    write_summary(create(&dir.join("summary.csv"))?, &summarize(&rows), &hash)?;
    write_timings(create(&dir.join("timings.csv"))?, &rows, &hash)?;
    drop(journal);
    fs::remove_file(&journal_path)?;

    let failed = rows
        .iter()
        .filter(|r| r.status.starts_with("error"))
        .count();
    eprintln!(
        "wrote {} rows to {} ({failed} failed trials)",
        rows.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_validate(common: &Common, suites: &[String]) -> Result<()> {
    let cfg = load(common)?;
    let vcfg = cfg.validation();
    let selected: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites
            .iter()
            .map(|s| s.parse::<Suite>().map_err(|e| anyhow!(e)))
            .collect::<Result<_>>()?
    };
    let pool = pool(common.threads)?;
    let mut failed = Vec::new();
    for suite in selected {
        let report = pool.install(|| run_suite(suite, &vcfg))?;
        for c in &report.checks {
            println!("[{suite}] {c}");
        }
        println!(
            "[{suite}] {} in {:.1}s",
            if report.pass() { "PASS" } else { "FAIL" },
            report.elapsed.as_secs_f64()
        );
        if !report.pass() {
            failed.push(suite.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        bail!("failed suites: {}", failed.join(", "))
    }
}

#[derive(Serialize)]
struct PlotRow<'a> {
    budget_dbm: f64,
    scheme: &'a str,
    mean_mse: f64,
    ci_low: f64,
    ci_high: f64,
}

fn first_line(path: &Path) -> Result<String> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    Ok(line)
}

fn cmd_plotdata(results: &Path, out: Option<PathBuf>) -> Result<()> {
    if !results.is_file() {
        bail!("results file {} not found", results.display());
    }
    let rows: Vec<TrialResult> = read_results(results)?;
    if rows.is_empty() {
        bail!("{} has no result rows", results.display());
    }
    let mut summary = summarize(&rows);
    summary.sort_by(|a, b| {
        a.scheme
            .cmp(&b.scheme)
            .then(a.budget_dbm.total_cmp(&b.budget_dbm))
    });
    let dir = out.unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let path = dir.join("plot.csv");
    let mut w = create(&path)?;
    let head = first_line(results)?;
    if head.starts_with("# manifest_sha256=") {
        w.write_all(head.as_bytes())?;
    }
    let mut csv_w = csv::Writer::from_writer(w);
    for s in &summary {
        csv_w.serialize(PlotRow {
            budget_dbm: s.budget_dbm,
            scheme: &s.scheme,
            mean_mse: s.mean_mse,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        })?;
    }
    csv_w.flush()?;
    eprintln!("wrote {} rows to {}", summary.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct BruteRow {
    budget_dbm: f64,
    seed: u64,
    bruteforce_mse: f64,
    pebcd_mse: f64,
    rel_gap: f64,
}

fn cmd_bruteforce(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = load(common)?;
    let sweep = cfg.sweep_config()?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.sweep.output_dir));
    let hash = write_manifest(&dir, &cfg)?;
    let tasks: Vec<(f64, u64)> = sweep
        .p_hris_grid_dbm
        .iter()
        .flat_map(|&b| sweep.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let rows: Vec<BruteRow> = pool(common.threads)?.install(|| {
        tasks
            .par_iter()
            .map(|&(budget, seed)| -> Result<BruteRow> {
                let mut params = sweep.params.clone();
                params.p_hris = hris_core::bench::dbm_to_watts(budget);
                let ch = gen_channel_set(&sweep.geometry, &sweep.fading, &params, seed)?;
                let bf = brute_force(&params, &ch)?;
                let opts = hris_core::pebcd::PebcdOptions {
                    seed,
                    ..sweep.options.clone()
                };
                let pe = run_scheme(Scheme::DHris, &params, &ch, &opts)?;
                Ok(BruteRow {
                    budget_dbm: budget,
                    seed,
                    bruteforce_mse: bf.mse,
                    pebcd_mse: pe.solution.mse,
                    rel_gap: (pe.solution.mse - bf.mse) / bf.mse,
                })
            })
            .collect::<Result<_>>()
    })?;
    let path = dir.join("bruteforce.csv");
    let mut w = create(&path)?;
    writeln!(w, "# manifest_sha256={hash}")?;
    let mut csv_w = csv::Writer::from_writer(w);
    for r in &rows {
        csv_w.serialize(r)?;
    }
    csv_w.flush()?;
    let within = rows.iter().filter(|r| r.rel_gap <= 0.1).count();
    println!(
        "{within}/{} instances within 10% of the optimum; worst gap {:.4}",
        rows.len(),
        rows.iter()
            .map(|r| r.rel_gap)
            .fold(f64::NEG_INFINITY, f64::max)
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Sweep { common, out } => cmd_sweep(common, out.clone()),
        Command::Validate { common, suite } => cmd_validate(common, suite),
        Command::Plotdata { results, out } => cmd_plotdata(results, out.clone()),
        Command::Bruteforce { common, out } => cmd_bruteforce(common, out.clone()),
    }
}
