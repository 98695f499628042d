//! Benchmark schemes, the exhaustive oracle, and the Monte-Carlo harness.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{gen_channel_set, ChannelError, ChannelSet, FadingParams, Geometry};
use crate::pebcd::{
    solve, tune_amplification, AntennaBlock, Blocks, ModeBlock, PebcdError, PebcdOptions,
};
use crate::subsolvers::mu_ref;
use crate::system_model::{
    hris_power, mse_analytic, simulate_empirical_mse, AntennaSelection, ModelError, PhaseNoise,
    Solution, SystemParams,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Pebcd(#[from] PebcdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("instance too large for enumeration: {0} configurations (limit {BRUTE_FORCE_LIMIT})")]
    TooLarge(u128),
    #[error("invalid scheme: {0}")]
    Scheme(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    /// The first `n_active` elements.
    First,
    /// Which elements are active is optimized, the count is not.
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    DHris,
    /// `None` means half the elements.
    FHris {
        n_active: Option<usize>,
        placement: Placement,
    },
    ActiveRis,
    PassiveRis,
    NHris,
    DHrisNoAs,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::DHris => write!(f, "dhris"),
            Scheme::FHris {
                n_active,
                placement,
            } => {
                let base = match placement {
                    Placement::First => "fhris",
                    Placement::Optimized => "fhris-opt",
                };
                match n_active {
                    Some(k) => write!(f, "{base}:{k}"),
                    None => write!(f, "{base}"),
                }
            }
            Scheme::ActiveRis => write!(f, "active"),
            Scheme::PassiveRis => write!(f, "passive"),
            Scheme::NHris => write!(f, "nhris"),
            Scheme::DHrisNoAs => write!(f, "dhris-noas"),
        }
    }
}

impl FromStr for Scheme {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, count) = match s.split_once(':') {
            Some((b, c)) => {
                let k = c
                    .parse::<usize>()
                    .map_err(|_| BenchError::Scheme(format!("bad element count in {s:?}")))?;
                (b, Some(k))
            }
            None => (s, None),
        };
        let scheme = match base.to_ascii_lowercase().as_str() {
            "dhris" => Scheme::DHris,
            "fhris" => Scheme::FHris {
                n_active: count,
                placement: Placement::First,
            },
            "fhris-opt" => Scheme::FHris {
                n_active: count,
                placement: Placement::Optimized,
            },
            "active" => Scheme::ActiveRis,
            "passive" => Scheme::PassiveRis,
            "nhris" => Scheme::NHris,
            "dhris-noas" => Scheme::DHrisNoAs,
            _ => return Err(BenchError::Scheme(format!("unknown scheme {s:?}"))),
        };
        if count.is_some() && !matches!(scheme, Scheme::FHris { .. }) {
            return Err(BenchError::Scheme(format!("{base} takes no element count")));
        }
        Ok(scheme)
    }
}

impl Scheme {
    pub fn validate(&self, params: &SystemParams) -> Result<(), BenchError> {
        if let Scheme::FHris {
            n_active: Some(k), ..
        } = self
        {
            if *k > params.n {
                return Err(BenchError::Scheme(format!(
                    "fhris n_active {k} exceeds N = {}",
                    params.n
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOutcome {
    pub solution: Solution,
    pub iterations: usize,
    pub converged: bool,
    /// Parameters the solution was evaluated under.
    pub eval_params: SystemParams,
}

fn run_pebcd(
    params: &SystemParams,
    ch: &ChannelSet,
    options: &PebcdOptions,
    blocks: &Blocks,
) -> Result<(Solution, usize, bool, Vec<f64>), PebcdError> {
    match solve(params, ch, options, blocks) {
        Ok(out) => Ok((out.solution, out.state.iter, out.converged, out.state.gamma)),
        Err(PebcdError::NotConverged {
            iterations, best, ..
        }) => Ok((best.solution, iterations, false, best.state.gamma)),
        Err(e) => Err(e),
    }
}

pub fn run_scheme(
    scheme: Scheme,
    params: &SystemParams,
    ch: &ChannelSet,
    options: &PebcdOptions,
) -> Result<SchemeOutcome, BenchError> {
    params.validate()?;
    scheme.validate(params)?;
    let n = params.n;
    let mut eval_params = params.clone();
    let mut blocks = Blocks::default();
    match scheme {
        Scheme::DHris | Scheme::NHris => {}
        Scheme::FHris {
            n_active,
            placement,
        } => {
            let k = n_active.unwrap_or(n / 2);
            blocks.mode = match placement {
                Placement::First => ModeBlock::Fixed((0..n).map(|i| i < k).collect()),
                Placement::Optimized => ModeBlock::Count(k),
            };
        }
        Scheme::ActiveRis => blocks.mode = ModeBlock::Fixed(vec![true; n]),
        Scheme::PassiveRis => {
            blocks.mode = ModeBlock::Fixed(vec![false; n]);
            eval_params.p = params.p + params.p_hris;
        }
        Scheme::DHrisNoAs => {
            blocks.antenna = AntennaBlock::Fixed(AntennaSelection::first(params.l))
        }
    }

    if scheme == Scheme::NHris {
        let mut design = params.clone();
        design.k_t = 0.0;
        design.k_r = 0.0;
        design.phase_noise = PhaseNoise::None;
        let (sol, iterations, converged, relaxed) = run_pebcd(&design, ch, options, &blocks)?;
        let solution = evaluate_design(sol, &relaxed, ch, params)?;
        return Ok(SchemeOutcome {
            solution,
            iterations,
            converged,
            eval_params,
        });
    }

    let (solution, iterations, converged, _) = run_pebcd(&eval_params, ch, options, &blocks)?;
    Ok(SchemeOutcome {
        solution,
        iterations,
        converged,
        eval_params,
    })
}

/// Re-scores a design made under an idealized model with the true
/// impairments, keeping its receiver. The amplification is lowered if the
/// true loads exceed the budget, and the weakest elements are switched off
/// if even `μ_min` does not fit.
fn evaluate_design(
    mut sol: Solution,
    relaxed: &[f64],
    ch: &ChannelSet,
    params: &SystemParams,
) -> Result<Solution, BenchError> {
    let loads = params.element_loads(&ch.h_r);
    let as_f = |g: &[bool]| -> Vec<f64> { g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() };
    let gamma = &mut sol.hris.gamma;
    while gamma.iter().any(|&g| g) && mu_ref(&as_f(gamma), &loads, params.p_hris) < params.mu_min {
        let weakest = (0..gamma.len())
            .filter(|&i| gamma[i])
            .min_by(|&i, &j| relaxed[i].total_cmp(&relaxed[j]).then(j.cmp(&i)))
            .expect("some element is active");
        gamma[weakest] = false;
    }
    if gamma.iter().any(|&g| g) {
        let cap = mu_ref(&as_f(gamma), &loads, params.p_hris);
        sol.hris.mu = sol.hris.mu.min(cap);
    } else {
        sol.hris.mu = 1.0;
    }
    let s = sol.hris.surface(params.q_levels());
    let a = sol.antenna.matrix(params.n_r);
    sol.mse = mse_analytic(&sol.w, &a, ch, &s, params)?;
    sol.hris_power = hris_power(&s, ch, params);
    Ok(sol)
}

pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of discrete configurations: antenna subsets, mode patterns, and
/// phase assignments.
pub fn config_count(params: &SystemParams) -> u128 {
    let q = params.q_levels() as u128;
    let per_element = 2 * q;
    binomial(params.n_r, params.l).saturating_mul(per_element.saturating_pow(params.n as u32))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + n - k {
                break;
            }
            if i == 0 && cur[0] == n - k {
                return out;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Global optimum by enumeration. Mode patterns that cannot run at `μ_min`
/// within the budget are skipped; the amplification and receiver of each
/// configuration come from [`tune_amplification`].
pub fn brute_force(params: &SystemParams, ch: &ChannelSet) -> Result<Solution, BenchError> {
    params.validate()?;
    let count = config_count(params);
    if count > BRUTE_FORCE_LIMIT {
        return Err(BenchError::TooLarge(count));
    }
    let (n, q) = (params.n, params.q_levels());
    let loads = params.element_loads(&ch.h_r);
    let modes: Vec<Vec<bool>> = (0..1usize << n)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .filter(|g: &Vec<bool>| {
            let gf: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            mu_ref(&gf, &loads, params.p_hris) >= params.mu_min
        })
        .collect();
    let n_phase = q.pow(n as u32);
    let mut best: Option<Solution> = None;
    for subset in combinations(params.n_r, params.l) {
        let antenna = AntennaSelection { selected: subset };
        for code in 0..n_phase {
            let phase_idx: Vec<usize> = (0..n).map(|i| code / q.pow(i as u32) % q).collect();
            for gamma in &modes {
                let sol = tune_amplification(ch, params, &antenna, &phase_idx, gamma)?;
                if best.as_ref().is_none_or(|b| sol.mse < b.mse) {
                    best = Some(sol);
                }
            }
        }
    }
    best.ok_or_else(|| BenchError::Data("no feasible configuration".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Template; `p_hris` is replaced by each grid point.
    pub params: SystemParams,
    pub geometry: Geometry,
    pub fading: FadingParams,
    pub schemes: Vec<Scheme>,
    pub p_hris_grid_dbm: Vec<f64>,
    pub seeds: Vec<u64>,
    pub options: PebcdOptions,
    /// Symbols for the empirical MSE; 0 skips it.
    pub empirical_samples: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let mut errs = Vec::new();
        if let Err(e) = self.params.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.options.validate() {
            errs.push(e.to_string());
        }
        if self.schemes.is_empty() {
            errs.push("no schemes".into());
        }
        if self.p_hris_grid_dbm.is_empty() {
            errs.push("empty budget grid".into());
        }
        if self.p_hris_grid_dbm.iter().any(|x| !x.is_finite()) {
            errs.push("budget grid entries must be finite".into());
        }
        if self.seeds.is_empty() {
            errs.push("no seeds".into());
        }
        for s in &self.schemes {
            if let Err(e) = s.validate(&self.params) {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Data(errs.join("; ")))
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub scheme: String,
    pub budget_dbm: f64,
    pub seed: u64,
    pub p_hris: f64,
    pub mse: f64,
    pub empirical_mse: f64,
    pub hris_power: f64,
    pub n_active: usize,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    #[serde(skip)]
    pub wall_time: f64,
}

fn run_trial(
    cfg: &SweepConfig,
    ch: &ChannelSet,
    scheme: Scheme,
    budget_dbm: f64,
    seed: u64,
) -> TrialResult {
    let start = Instant::now();
    let mut params = cfg.params.clone();
    params.p_hris = dbm_to_watts(budget_dbm);
    let mut options = cfg.options.clone();
    options.seed = seed;
    let mut row = TrialResult {
        scheme: scheme.to_string(),
        budget_dbm,
        seed,
        p_hris: params.p_hris,
        mse: f64::NAN,
        empirical_mse: f64::NAN,
        hris_power: f64::NAN,
        n_active: 0,
        iterations: 0,
        converged: false,
        status: "ok".into(),
        wall_time: 0.0,
    };
    match run_scheme(scheme, &params, ch, &options) {
        Ok(out) => {
            row.mse = out.solution.mse;
            row.hris_power = out.solution.hris_power;
            row.n_active = out.solution.hris.n_active();
            row.iterations = out.iterations;
            row.converged = out.converged;
            if !out.converged {
                row.status = "not_converged".into();
            }
            if cfg.empirical_samples > 0 {
                match simulate_empirical_mse(
                    &out.solution,
                    ch,
                    &out.eval_params,
                    cfg.empirical_samples,
                    seed,
                ) {
                    Ok(e) => row.empirical_mse = e,
                    Err(e) => row.status = format!("error: {e}"),
                }
            }
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row.wall_time = start.elapsed().as_secs_f64();
    row
}

/// Runs every (scheme, budget, seed) trial. Channels depend only on the seed,
/// so all schemes and budgets see the same draws. Rows come back ordered by
/// scheme, budget, then seed, in config order; `on_result` is called as each
/// trial finishes, in completion order.
pub fn monte_carlo<F>(cfg: &SweepConfig, on_result: F) -> Result<Vec<TrialResult>, BenchError>
where
    F: Fn(&TrialResult) + Sync,
{
    cfg.validate()?;
    let channels: Vec<ChannelSet> = cfg
        .seeds
        .par_iter()
        .map(|&s| gen_channel_set(&cfg.geometry, &cfg.fading, &cfg.params, s))
        .collect::<Result<_, _>>()?;
    let tasks: Vec<(Scheme, f64, usize)> = cfg
        .schemes
        .iter()
        .flat_map(|&sc| {
            cfg.p_hris_grid_dbm
                .iter()
                .flat_map(move |&b| (0..cfg.seeds.len()).map(move |i| (sc, b, i)))
        })
        .collect();
    Ok(tasks
        .par_iter()
        .map(|&(sc, b, i)| {
            let row = run_trial(cfg, &channels[i], sc, b, cfg.seeds[i]);
            on_result(&row);
            row
        })
        .collect())
}

pub const RESULTS_HEADER: [&str; 11] = [
    "scheme",
    "budget_dbm",
    "seed",
    "p_hris",
    "mse",
    "empirical_mse",
    "hris_power",
    "n_active",
    "iterations",
    "converged",
    "status",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_line(hash: &str) -> String {
    format!("# manifest_sha256={hash}\n")
}

pub fn write_results<W: Write>(
    mut out: W,
    rows: &[TrialResult],
    manifest_hash: &str,
) -> Result<(), BenchError> {
    out.write_all(hash_line(manifest_hash).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one row to a journal opened by the caller; the header is written
/// when `header` is set.
pub fn append_result<W: Write>(out: W, row: &TrialResult, header: bool) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(header)
        .from_writer(out);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<TrialResult>, BenchError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let rows: Vec<TrialResult> = r.deserialize().collect::<Result<_, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub budget_dbm: f64,
    pub n: usize,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_empirical_mse: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per (scheme, budget) statistics over trials with a finite MSE, with a
/// normal-approximation 95% interval for the mean. Groups keep the order in
/// which they first appear.
pub fn summarize(rows: &[TrialResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys
            .iter()
            .any(|(s, b)| *s == r.scheme && *b == r.budget_dbm)
        {
            keys.push((r.scheme.clone(), r.budget_dbm));
        }
    }
    keys.into_iter()
        .map(|(scheme, budget)| {
            let group: Vec<&TrialResult> = rows
                .iter()
                .filter(|r| r.scheme == scheme && r.budget_dbm == budget && r.mse.is_finite())
                .collect();
            let mut v: Vec<f64> = group.iter().map(|r| r.mse).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let half = 1.96 * (var / n as f64).sqrt();
            let emp: Vec<f64> = group
                .iter()
                .map(|r| r.empirical_mse)
                .filter(|x| x.is_finite())
                .collect();
            let mean_emp = if emp.is_empty() {
                f64::NAN
            } else {
                emp.iter().sum::<f64>() / emp.len() as f64
            };
            SummaryRow {
                scheme,
                budget_dbm: budget,
                n,
                mean_mse: mean,
                median_mse: median(&v),
                ci_low: mean - half,
                ci_high: mean + half,
                mean_empirical_mse: mean_emp,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(
    mut out: W,
    rows: &[SummaryRow],
    manifest_hash: &str,
) -> Result<(), BenchError> {
    out.write_all(hash_line(manifest_hash).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings<W: Write>(
    mut out: W,
    rows: &[TrialResult],
    manifest_hash: &str,
) -> Result<(), BenchError> {
    out.write_all(hash_line(manifest_hash).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "budget_dbm", "seed", "wall_time_s"])?;
    for r in rows {
        w.write_record([
            r.scheme.clone(),
            r.budget_dbm.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}
