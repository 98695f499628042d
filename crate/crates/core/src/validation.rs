//! Oracle suites: the analytic model against Monte-Carlo simulation, the
//! coefficient builders against direct objective evaluation, the closed-form
//! updates against black-box search, and PEBCD against exhaustive enumeration.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::bench::{brute_force, config_count, dbm_to_watts, run_scheme, BenchError, Scheme};
use crate::channel::{gen_channel_set, ChannelError, ChannelSet, FadingParams, Geometry};
use crate::numerics::{real_quad_form, CMatrix, CVector, NumericsError, RMatrix};
use crate::pebcd::PebcdOptions;
use crate::rng::{substream, Purpose};
use crate::subsolvers::{
    amp_coeffs, aux_update, build_antenna_qp, build_k_k, build_mode_qp, build_p, build_phase_qp,
    build_x, mmse_receiver, optimal_mu, p_diag, selection_to_vec, z_to_theta,
};
use crate::system_model::{
    effective_channel, epsilon_b, hris_power, mse_analytic, omega_with_h,
    phase_noise_expectation_check, simulate_empirical_mse, AntennaSelection, HrisConfig,
    ModelError, PhaseNoise, Solution, Surface, SystemParams,
};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(
        "unknown suite '{0}' (expected mse, expectation, decomposition, closedform or bruteforce)"
    )]
    UnknownSuite(String),
    #[error("invalid validation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mse,
    Expectation,
    Decomposition,
    ClosedForm,
    BruteForce,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Mse,
        Suite::Expectation,
        Suite::Decomposition,
        Suite::ClosedForm,
        Suite::BruteForce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Mse => "mse",
            Suite::Expectation => "expectation",
            Suite::Decomposition => "decomposition",
            Suite::ClosedForm => "closedform",
            Suite::BruteForce => "bruteforce",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ValidationError::UnknownSuite(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            bound: Bound::AtMost,
            // NaN fails.
            pass: measured <= tolerance,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            bound: Bound::AtLeast,
            pass: measured >= tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{} {}: measured {:.3e} {} {:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            op,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub seed: u64,
    /// Random instances per identity check.
    pub instances: usize,
    pub mse_samples: usize,
    pub expectation_draws: usize,
    pub bruteforce_seeds: usize,
    pub bruteforce_budget_dbm: f64,
    pub geometry: Geometry,
    pub fading: FadingParams,
    pub options: PebcdOptions,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            mse_samples: 1_000_000,
            expectation_draws: 1_000_000,
            bruteforce_seeds: 50,
            bruteforce_budget_dbm: -60.0,
            geometry: Geometry::default(),
            fading: FadingParams::default(),
            options: PebcdOptions::default(),
        }
    }
}

impl ValidationConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        if self.instances == 0 {
            errs.push("instances must be >= 1".to_string());
        }
        if self.mse_samples == 0 || self.expectation_draws == 0 {
            errs.push("mse_samples and expectation_draws must be >= 1".to_string());
        }
        if self.bruteforce_seeds == 0 {
            errs.push("bruteforce_seeds must be >= 1".to_string());
        }
        if !self.bruteforce_budget_dbm.is_finite() {
            errs.push("bruteforce_budget_dbm must be finite".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationError::Config(errs.join("; ")))
        }
    }
}

/// Signature of the K/k builder, injectable so a broken builder can be shown
/// to fail the decomposition suite.
pub type KkBuilder =
    fn(&ChannelSet, &CVector, &SystemParams, &CVector, &RMatrix) -> (CMatrix, CVector);

pub fn run_suite(suite: Suite, cfg: &ValidationConfig) -> Result<SuiteReport, ValidationError> {
    cfg.validate()?;
    let t = Instant::now();
    let checks = match suite {
        Suite::Mse => mse_suite(cfg)?,
        Suite::Expectation => expectation_suite(cfg)?,
        Suite::Decomposition => decomposition_suite_with(cfg, build_k_k)?,
        Suite::ClosedForm => closed_form_suite(cfg)?,
        Suite::BruteForce => brute_force_suite(cfg)?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        elapsed: t.elapsed(),
    })
}

fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Parameters for the unit-scale identity checks: every term of the MSE is
/// of order one, so no term hides below round-off.
pub fn unit_params(n_r: usize, l: usize, n: usize, b_bits: u32) -> SystemParams {
    SystemParams {
        n_r,
        l,
        n,
        b_bits,
        p: 1.0,
        k_t: 0.08,
        k_r: 0.08,
        sigma_a2: 0.05,
        sigma_b2: 0.1,
        p_hris: 1e3,
        mu_min: 1.0,
        phase_noise: PhaseNoise::Quantization,
    }
}

/// Unit-variance i.i.d. channels.
pub fn unit_channels(params: &SystemParams, rng: &mut ChaCha8Rng) -> ChannelSet {
    ChannelSet {
        h_d: CVector::from_fn(params.n_r, |_, _| cn(rng)),
        h_r: CVector::from_fn(params.n, |_, _| cn(rng)),
        g: CMatrix::from_fn(params.n, params.n_r, |_, _| cn(rng)),
        seed: 0,
    }
}

fn random_antennas(params: &SystemParams, rng: &mut ChaCha8Rng) -> AntennaSelection {
    let mut idx: Vec<usize> = (0..params.n_r).collect();
    for i in 0..params.l {
        let j = rng.random_range(i..params.n_r);
        idx.swap(i, j);
    }
    AntennaSelection {
        selected: idx[..params.l].to_vec(),
    }
}

fn random_config(params: &SystemParams, rng: &mut ChaCha8Rng) -> HrisConfig {
    let q = params.q_levels();
    let mut gamma: Vec<bool> = (0..params.n).map(|_| rng.random_bool(0.5)).collect();
    if params.n > 0 && !gamma.iter().any(|&g| g) {
        gamma[0] = true;
    }
    HrisConfig {
        phase_idx: (0..params.n).map(|_| rng.random_range(0..q)).collect(),
        gamma,
        mu: rng.random_range(1.0..3.0),
    }
}

fn random_simplex_blocks(blocks: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(blocks * len);
    for _ in 0..blocks {
        let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

/// A relaxed point: fractional modes, phases inside the codeword hull, a
/// fractional antenna selection and an arbitrary receiver.
struct RelaxedPoint {
    ch: ChannelSet,
    s: Surface,
    a: RMatrix,
    w: CVector,
}

fn random_relaxed(params: &SystemParams, rng: &mut ChaCha8Rng) -> RelaxedPoint {
    let ch = unit_channels(params, rng);
    let q = params.q_levels();
    let s = Surface {
        gamma: (0..params.n).map(|_| rng.random::<f64>()).collect(),
        mu: rng.random_range(1.0..3.0),
        theta: z_to_theta(&random_simplex_blocks(params.n, q, rng), q),
    };
    let a = RMatrix::from_row_slice(
        params.l,
        params.n_r,
        &random_simplex_blocks(params.l, params.n_r, rng),
    );
    let w = CVector::from_fn(params.l, |_, _| cn(rng));
    RelaxedPoint { ch, s, a, w }
}

fn instance_rng(cfg: &ValidationConfig, salt: u64, index: usize) -> ChaCha8Rng {
    substream(cfg.seed, Purpose::Instance, (salt << 32) | index as u64)
}

/// Analytic MSE against the symbol-level simulation on random discrete
/// configurations with the MMSE receiver.
pub fn mse_suite(cfg: &ValidationConfig) -> Result<Vec<Check>, ValidationError> {
    let params = unit_params(8, 3, 8, 2);
    let errs: Vec<f64> = (0..cfg.instances)
        .map(|i| -> Result<f64, ValidationError> {
            let mut rng = instance_rng(cfg, 1, i);
            let ch = unit_channels(&params, &mut rng);
            let antenna = random_antennas(&params, &mut rng);
            let hris = random_config(&params, &mut rng);
            let s = hris.surface(params.q_levels());
            let a = antenna.matrix(params.n_r);
            let h = effective_channel(&ch, &s, &params)?;
            let omega = omega_with_h(&ch, &s, &params, &h);
            let w = mmse_receiver(&a, &omega, &h, &params)?;
            let mse = mse_analytic(&w, &a, &ch, &s, &params)?;
            let sol = Solution {
                hris_power: hris_power(&s, &ch, &params),
                antenna,
                hris,
                w,
                mse,
            };
            let emp =
                simulate_empirical_mse(&sol, &ch, &params, cfg.mse_samples, cfg.seed ^ i as u64)?;
            Ok((mse - emp).abs() / mse)
        })
        .collect::<Result<_, _>>()?;
    Ok(vec![Check::at_most(
        format!("analytic vs empirical MSE, {} configurations", errs.len()),
        max(&errs),
        0.01,
    )])
}

/// Phase-noise averaging identity for B = 1, 2, 3 and the value of ε_b(2).
pub fn expectation_suite(cfg: &ValidationConfig) -> Result<Vec<Check>, ValidationError> {
    let mut checks = Vec::new();
    for b in 1..=3u32 {
        let mut rng = instance_rng(cfg, 2, b as usize);
        let a = CMatrix::from_fn(8, 8, |_, _| cn(&mut rng));
        let (emp, ana) =
            phase_noise_expectation_check(&a, b, cfg.expectation_draws, cfg.seed + b as u64)?;
        let worst = emp
            .iter()
            .zip(ana.iter())
            .map(|(e, a)| (e - a).norm() / a.norm())
            .fold(0.0, f64::max);
        checks.push(Check::at_most(
            format!("E[phase-noise average], B={b}, entrywise"),
            worst,
            0.01,
        ));
    }
    checks.push(Check::at_most(
        "eps_b(2) vs 0.900316",
        (epsilon_b(2) - 0.900316).abs(),
        1e-6,
    ));
    Ok(checks)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Largest deviation of `model − f` from a constant over a set of block values,
/// relative to the objective scale.
fn constant_offset_error(pairs: &[(f64, f64)]) -> f64 {
    let (f0, q0) = pairs[0];
    pairs[1..]
        .iter()
        .map(|&(f, q)| ((f - f0) - (q - q0)).abs() / f.abs().max(f0.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

fn mse_at(
    p: &RelaxedPoint,
    s: &Surface,
    a: &RMatrix,
    params: &SystemParams,
) -> Result<f64, ModelError> {
    mse_analytic(&p.w, a, &p.ch, s, params)
}

const BLOCK_SAMPLES: usize = 6;

/// Decomposition identities with the default builders.
pub fn decomposition_suite(cfg: &ValidationConfig) -> Result<Vec<Check>, ValidationError> {
    decomposition_suite_with(cfg, build_k_k)
}

/// Each builder's quadratic model must equal the MSE restricted to its block
/// up to a constant. Mode and amplification coefficients are derived from
/// `kk`, so a broken K/k builder shows up in three checks.
pub fn decomposition_suite_with(
    cfg: &ValidationConfig,
    kk: KkBuilder,
) -> Result<Vec<Check>, ValidationError> {
    let params = unit_params(6, 3, 5, 2);
    let q = params.q_levels();
    let loads_of = |ch: &ChannelSet| params.element_loads(&ch.h_r);
    let names = [
        "K/k reproduces f_MSE",
        "E1/e reproduces f_MSE",
        "E2 reproduces the HRIS power",
        "a/b reproduces f_MSE",
        "M/m reproduces f_MSE",
        "N/n reproduces f_MSE",
        "Ñ/ñ reproduces f_MSE",
    ];
    let per_instance: Vec<[f64; 7]> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| -> Result<[f64; 7], ValidationError> {
            let mut rng = instance_rng(cfg, 3, i);
            let pt = random_relaxed(&params, &mut rng);
            let loads = loads_of(&pt.ch);
            let (k_mat, k_vec) = kk(&pt.ch, &pt.s.theta, &params, &pt.w, &pt.a);
            let d = p_diag(&build_p(&pt.ch.g, &build_x(&pt.w, &pt.a, params.k_r)));
            let mut out = [0.0; 7];

            // Amplitudes: (γ, μ) free, θ fixed.
            let mut pairs = Vec::new();
            for _ in 0..BLOCK_SAMPLES {
                let s = Surface {
                    gamma: (0..params.n).map(|_| rng.random::<f64>()).collect(),
                    mu: rng.random_range(1.0..3.0),
                    theta: pt.s.theta.clone(),
                };
                let om = s.omega();
                let model = real_quad_form(&k_mat, &om)
                    + 2.0
                        * om.iter()
                            .zip(k_vec.iter())
                            .map(|(o, k)| o * k.re)
                            .sum::<f64>()
                    + params.sigma_a2
                        * s.omega_noise()
                            .iter()
                            .zip(&d)
                            .map(|(o, d)| o * o * d)
                            .sum::<f64>();
                pairs.push((mse_at(&pt, &s, &pt.a, &params)?, model));
            }
            out[0] = constant_offset_error(&pairs);

            // Modes at fixed μ.
            let mode = build_mode_qp(pt.s.mu, &k_mat, &k_vec, &d, &loads, &params);
            let mut pairs = Vec::new();
            let mut power_err: f64 = 0.0;
            for _ in 0..BLOCK_SAMPLES {
                let s = Surface {
                    gamma: (0..params.n).map(|_| rng.random::<f64>()).collect(),
                    ..pt.s.clone()
                };
                let model = real_quad_form(&mode.e1, &s.gamma)
                    + mode.e.iter().zip(&s.gamma).map(|(e, g)| e * g).sum::<f64>();
                pairs.push((mse_at(&pt, &s, &pt.a, &params)?, model));
                let power: f64 = mode
                    .e2_diag
                    .iter()
                    .zip(&s.gamma)
                    .map(|(e, g)| e * g * g)
                    .sum();
                let truth = hris_power(&s, &pt.ch, &params);
                power_err = power_err.max((power - truth).abs() / truth.max(1e-300));
            }
            out[1] = constant_offset_error(&pairs);
            out[2] = power_err;

            // Amplification at fixed γ.
            let amp = amp_coeffs(&pt.s.gamma, &k_mat, &k_vec, &d, &loads, &params);
            let mut pairs = Vec::new();
            for _ in 0..BLOCK_SAMPLES {
                let mu = rng.random_range(1.0..3.0);
                let s = Surface { mu, ..pt.s.clone() };
                pairs.push((
                    mse_at(&pt, &s, &pt.a, &params)?,
                    amp.a * mu * mu + 2.0 * amp.b * mu,
                ));
            }
            out[3] = constant_offset_error(&pairs);

            // Antenna selection.
            let h = effective_channel(&pt.ch, &pt.s, &params)?;
            let omega = omega_with_h(&pt.ch, &pt.s, &params, &h);
            let (m_mat, m_vec) = build_antenna_qp(&pt.w, &omega, &h, &params);
            let mut pairs = Vec::new();
            for _ in 0..BLOCK_SAMPLES {
                let a = RMatrix::from_row_slice(
                    params.l,
                    params.n_r,
                    &random_simplex_blocks(params.l, params.n_r, &mut rng),
                );
                let av = selection_to_vec(&a);
                let lin: f64 = av.iter().zip(m_vec.iter()).map(|(x, m)| x * m.re).sum();
                let model = real_quad_form(&m_mat, &av) - 2.0 * lin;
                pairs.push((mse_at(&pt, &pt.s, &a, &params)?, model));
            }
            out[4] = constant_offset_error(&pairs);

            // Phases, element domain and codeword domain.
            let ph = build_phase_qp(&pt.ch, &pt.s, &params, &pt.w, &pt.a);
            let (mut pairs_el, mut pairs_cw) = (Vec::new(), Vec::new());
            for _ in 0..BLOCK_SAMPLES {
                let z = random_simplex_blocks(params.n, q, &mut rng);
                let theta = z_to_theta(&z, q);
                let s = Surface {
                    theta: theta.clone(),
                    ..pt.s.clone()
                };
                let f = mse_at(&pt, &s, &pt.a, &params)?;
                let el = ph.n_mat.clone() * &theta;
                let model_el = theta.dotc(&el).re + 2.0 * theta.dotc(&ph.n_vec).re;
                let lin: f64 = z.iter().zip(ph.nt_vec.iter()).map(|(x, m)| x * m.re).sum();
                let model_cw = real_quad_form(&ph.nt_mat, &z) + 2.0 * lin;
                pairs_el.push((f, model_el));
                pairs_cw.push((f, model_cw));
            }
            out[5] = constant_offset_error(&pairs_el);
            out[6] = constant_offset_error(&pairs_cw);
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let worst = per_instance.iter().map(|r| r[j]).fold(0.0, f64::max);
            Check::at_most(format!("{name}, {} instances", cfg.instances), worst, 1e-9)
        })
        .collect())
}

/// Minimizes a quadratic black box by exact coordinate line searches; the
/// line minimizer comes from three evaluations.
fn coordinate_minimize(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, sweeps: usize) -> (Vec<f64>, f64) {
    let mut x = x0;
    let mut fx = f(&x);
    for _ in 0..sweeps {
        let before = fx;
        for i in 0..x.len() {
            let h = x[i].abs().max(1.0);
            let mut xp = x.clone();
            xp[i] += h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            let curv = fp + fm - 2.0 * fx;
            if curv <= 0.0 {
                continue;
            }
            let step = -h * (fp - fm) / (2.0 * curv);
            xp[i] = x[i] + step;
            let fnew = f(&xp);
            if fnew < fx {
                x = xp;
                fx = fnew;
            }
        }
        if before - fx <= 1e-15 * fx.abs().max(1e-300) {
            break;
        }
    }
    (x, fx)
}

/// Closed-form block updates against direct search.
pub fn closed_form_suite(cfg: &ValidationConfig) -> Result<Vec<Check>, ValidationError> {
    let params = unit_params(6, 3, 5, 2);
    let rows: Vec<[f64; 4]> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| -> Result<[f64; 4], ValidationError> {
            let mut rng = instance_rng(cfg, 4, i);
            let ch = unit_channels(&params, &mut rng);
            let antenna = random_antennas(&params, &mut rng);
            let hris = random_config(&params, &mut rng);
            let a = antenna.matrix(params.n_r);
            let s = hris.surface(params.q_levels());

            // Receiver.
            let h = effective_channel(&ch, &s, &params)?;
            let omega = omega_with_h(&ch, &s, &params, &h);
            let w = mmse_receiver(&a, &omega, &h, &params)?;
            let f_w = mse_analytic(&w, &a, &ch, &s, &params)?;
            let black_box = |x: &[f64]| {
                let wv = CVector::from_fn(params.l, |k, _| Complex64::new(x[2 * k], x[2 * k + 1]));
                mse_analytic(&wv, &a, &ch, &s, &params).unwrap_or(f64::INFINITY)
            };
            let (_, f_num) = coordinate_minimize(&black_box, vec![0.0; 2 * params.l], 20_000);
            let gap_w = (f_num - f_w).abs();

            // Amplification on a grid over [μ_min, μ_ref].
            let loads = params.element_loads(&ch.h_r);
            let target_ref: f64 = rng.random_range(1.5..4.0);
            let used: f64 = s.gamma.iter().zip(&loads).map(|(g, c)| g * g * c).sum();
            let p_amp = SystemParams {
                p_hris: target_ref * target_ref * used,
                ..params.clone()
            };
            let (k_mat, k_vec) = build_k_k(&ch, &s.theta, &p_amp, &w, &a);
            let d = p_diag(&build_p(&ch.g, &build_x(&w, &a, p_amp.k_r)));
            let amp = amp_coeffs(&s.gamma, &k_mat, &k_vec, &d, &loads, &p_amp);
            let mu_star = optimal_mu(amp.a, amp.b, p_amp.mu_min, amp.mu_ref);
            let f_mu = |mu: f64| {
                let sm = Surface { mu, ..s.clone() };
                mse_analytic(&w, &a, &ch, &sm, &p_amp)
            };
            let n_grid = 100_000;
            let step = (amp.mu_ref - p_amp.mu_min) / (n_grid - 1) as f64;
            let (mut best_mu, mut best_f) = (p_amp.mu_min, f64::INFINITY);
            for k in 0..n_grid {
                let mu = p_amp.mu_min + k as f64 * step;
                let f = f_mu(mu)?;
                if f < best_f {
                    best_f = f;
                    best_mu = mu;
                }
            }
            let f_star = f_mu(mu_star)?;
            let mu_steps = (mu_star - best_mu).abs() / step;
            let mu_excess = (f_star - best_f).max(0.0) / best_f.abs();

            // Auxiliary update on the 3-D ball, against a spherical grid.
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let val = |u: &[f64]| -> f64 {
                x.iter()
                    .zip(u)
                    .map(|(x, u)| (2.0 * x - 1.0) * (2.0 * u - 1.0))
                    .sum()
            };
            let aux_gap = match aux_update(&x) {
                None => 0.0,
                Some(u) => {
                    let r = 3f64.sqrt() / 2.0;
                    let mut grid_best = f64::NEG_INFINITY;
                    let (nt, np) = (600, 1200);
                    for it in 0..=nt {
                        let th = std::f64::consts::PI * it as f64 / nt as f64;
                        for ip in 0..np {
                            let ph = 2.0 * std::f64::consts::PI * ip as f64 / np as f64;
                            let g = [
                                0.5 + r * th.sin() * ph.cos(),
                                0.5 + r * th.sin() * ph.sin(),
                                0.5 + r * th.cos(),
                            ];
                            grid_best = grid_best.max(val(&g));
                        }
                    }
                    let v = val(&u);
                    (grid_best - v).abs() / v.abs().max(1e-12)
                }
            };
            Ok([gap_w, mu_steps, mu_excess, aux_gap])
        })
        .collect::<Result<_, _>>()?;
    let col = |j: usize| rows.iter().map(|r| r[j]).fold(0.0, f64::max);
    Ok(vec![
        Check::at_most(
            "MMSE receiver vs coordinate search, objective gap",
            col(0),
            1e-6,
        ),
        Check::at_most(
            "optimal_mu vs 1e5-point grid, distance in grid steps",
            col(1),
            1.0,
        ),
        Check::at_most(
            "optimal_mu vs 1e5-point grid, relative excess MSE",
            col(2),
            1e-12,
        ),
        Check::at_most("aux_update vs spherical grid on the 3-D ball", col(3), 1e-3),
    ])
}

/// Parameters of the tiny instances used for exhaustive comparison.
pub fn tiny_params(budget_dbm: f64) -> SystemParams {
    SystemParams {
        n_r: 4,
        l: 2,
        n: 3,
        b_bits: 1,
        p: 0.01,
        k_t: 0.08,
        k_r: 0.08,
        sigma_a2: 1e-11,
        sigma_b2: 1e-11,
        p_hris: dbm_to_watts(budget_dbm),
        mu_min: 1.0,
        phase_noise: PhaseNoise::Quantization,
    }
}

/// Per-seed PEBCD and brute-force MSE on tiny instances.
pub fn brute_force_pairs(cfg: &ValidationConfig) -> Result<Vec<(f64, f64)>, ValidationError> {
    let params = tiny_params(cfg.bruteforce_budget_dbm);
    (0..cfg.bruteforce_seeds as u64)
        .into_par_iter()
        .map(|seed| -> Result<(f64, f64), ValidationError> {
            let ch = gen_channel_set(&cfg.geometry, &cfg.fading, &params, cfg.seed + seed)?;
            let bf = brute_force(&params, &ch)?;
            let opts = PebcdOptions {
                seed: cfg.seed + seed,
                ..cfg.options.clone()
            };
            let pe = run_scheme(Scheme::DHris, &params, &ch, &opts)?;
            Ok((pe.solution.mse, bf.mse))
        })
        .collect()
}

pub fn brute_force_suite(cfg: &ValidationConfig) -> Result<Vec<Check>, ValidationError> {
    let pairs = brute_force_pairs(cfg)?;
    let n = pairs.len() as f64;
    let within = pairs
        .iter()
        .filter(|(pe, bf)| (pe - bf) / bf <= 0.10)
        .count() as f64;
    let below = pairs
        .iter()
        .map(|(pe, bf)| bf - pe)
        .fold(f64::NEG_INFINITY, f64::max);
    let count = config_count(&tiny_params(cfg.bruteforce_budget_dbm)) as f64;
    Ok(vec![
        Check::at_most(
            "enumerated configurations vs 384",
            (count - 384.0).abs(),
            0.0,
        ),
        Check::at_least(
            "fraction of seeds within 10% of the optimum",
            within / n,
            0.8,
        ),
        Check::at_most("largest amount PEBCD falls below the optimum", below, 1e-9),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ValidationConfig {
        ValidationConfig {
            instances: 3,
            mse_samples: 20_000,
            expectation_draws: 20_000,
            bruteforce_seeds: 3,
            ..Default::default()
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
        assert_eq!("BruteForce".parse::<Suite>().unwrap(), Suite::BruteForce);
    }

    #[test]
    fn check_bounds_and_nan() {
        assert!(Check::at_most("x", 1.0, 1.0).pass);
        assert!(!Check::at_most("x", f64::NAN, 1.0).pass);
        assert!(Check::at_least("x", 0.8, 0.8).pass);
        assert!(!Check::at_least("x", 0.79, 0.8).pass);
        assert!(Check::at_most("x", 2.0, 1.0)
            .to_string()
            .starts_with("FAIL"));
    }

    #[test]
    fn config_errors_are_listed() {
        let cfg = ValidationConfig {
            instances: 0,
            bruteforce_seeds: 0,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("instances") && msg.contains("bruteforce_seeds"));
    }

    #[test]
    fn decomposition_passes_on_few_instances() {
        let checks = decomposition_suite(&quick()).unwrap();
        assert_eq!(checks.len(), 7);
        for c in &checks {
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn coordinate_search_finds_quadratic_minimum() {
        let f =
            |x: &[f64]| (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2) + 0.5 * x[0] * x[1] + 3.0;
        let (x, fx) = coordinate_minimize(&f, vec![0.0, 0.0], 1000);
        // Stationary point of the quadratic.
        let (a, b) = (2.0, 4.0);
        let det = a * b - 0.25;
        let xs = [(2.0 * b - 0.5 * -2.0) / det, (a * -2.0 - 0.5 * 2.0) / det];
        assert!((x[0] - xs[0]).abs() < 1e-7 && (x[1] - xs[1]).abs() < 1e-7);
        assert!(fx <= f(&xs) + 1e-12);
    }
}
