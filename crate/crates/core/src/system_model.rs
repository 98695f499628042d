//! Model constants, analytic MSE and power formulas, and a signal-level
//! simulator that draws every noise source explicitly.
//!
//! The analytic side works on a relaxed [`Surface`] (continuous mode vector and
//! complex phase vector) and a real antenna-selection matrix, so the same code
//! evaluates binary configurations and PEBCD iterates.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::ChannelSet;
use crate::numerics::{CMatrix, CVector, RMatrix, ZERO};
use crate::rng::{substream, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid system parameters: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Which phase-noise law the model averages over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseNoise {
    /// Uniform over half a quantization step of the configured `b_bits`.
    Quantization,
    /// Uniform over `±π/2^bits`, decoupled from the phase codebook size.
    Bits(u32),
    /// Ideal phase shifters.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub n_r: usize,
    pub l: usize,
    pub n: usize,
    pub b_bits: u32,
    /// User transmit power, W.
    pub p: f64,
    pub k_t: f64,
    pub k_r: f64,
    /// Noise power introduced by each active element, W.
    pub sigma_a2: f64,
    /// Receiver noise power at each BS antenna, W.
    pub sigma_b2: f64,
    /// HRIS power budget, W.
    pub p_hris: f64,
    pub mu_min: f64,
    pub phase_noise: PhaseNoise,
}

pub const MAX_B_BITS: u32 = 16;

impl SystemParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut errs = Vec::new();
        if self.n_r == 0 {
            errs.push("n_r must be at least 1".to_string());
        }
        if self.l == 0 || self.l >= self.n_r {
            errs.push(format!(
                "l must satisfy 1 <= l < n_r (got l={}, n_r={})",
                self.l, self.n_r
            ));
        }
        if self.b_bits < 1 || self.b_bits > MAX_B_BITS {
            errs.push(format!(
                "b_bits must be in 1..={MAX_B_BITS} (got {})",
                self.b_bits
            ));
        }
        if let PhaseNoise::Bits(b) = self.phase_noise {
            if b < 1 || b > 64 {
                errs.push(format!("phase-noise bits must be in 1..=64 (got {b})"));
            }
        }
        for (name, v) in [("k_t", self.k_t), ("k_r", self.k_r)] {
            if !(v >= 0.0) || !v.is_finite() {
                errs.push(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        for (name, v) in [
            ("p", self.p),
            ("sigma_a2", self.sigma_a2),
            ("sigma_b2", self.sigma_b2),
            ("p_hris", self.p_hris),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                errs.push(format!("{name} must be finite and > 0 (got {v})"));
            }
        }
        if !(self.mu_min >= 1.0) || !self.mu_min.is_finite() {
            errs.push(format!("mu_min must be >= 1 (got {})", self.mu_min));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(errs))
        }
    }

    /// Transmit power including transmit distortion, `p(1 + k_t²)`.
    pub fn p_tilde(&self) -> f64 {
        self.p * (1.0 + self.k_t * self.k_t)
    }

    /// Receiver noise including receive distortion of the noise, `σ_b²(1 + k_r²)`.
    pub fn sigma_b2_tilde(&self) -> f64 {
        self.sigma_b2 * (1.0 + self.k_r * self.k_r)
    }

    /// Number of phase levels `2^B`.
    pub fn q_levels(&self) -> usize {
        1usize << self.b_bits
    }

    /// Half-width of the uniform phase-noise interval.
    pub fn noise_half_width(&self) -> f64 {
        match self.phase_noise {
            PhaseNoise::Quantization => PI / 2f64.powi(self.b_bits as i32),
            PhaseNoise::Bits(b) => PI / 2f64.powi(b as i32),
            PhaseNoise::None => 0.0,
        }
    }

    /// Mean attenuation `E[e^{jφ̄}]` of the phase noise in force.
    pub fn eps_b(&self) -> f64 {
        match self.phase_noise {
            PhaseNoise::Quantization => epsilon_b(self.b_bits),
            PhaseNoise::Bits(b) => epsilon_b(b),
            PhaseNoise::None => 1.0,
        }
    }

    /// Per-element active load `p̃|h_r,n|² + σ_a²`; times μ² it is the power
    /// element n draws when active.
    pub fn element_loads(&self, h_r: &CVector) -> Vec<f64> {
        let pt = self.p_tilde();
        h_r.iter()
            .map(|h| pt * h.norm_sqr() + self.sigma_a2)
            .collect()
    }
}

/// `sin(π/2^B) / (π/2^B)`.
pub fn epsilon_b(b_bits: u32) -> f64 {
    let x = PI / 2f64.powi(b_bits as i32);
    if x < 1e-4 {
        // Taylor series keeps full precision where sin(x)/x cancels.
        1.0 - x * x / 6.0 + x.powi(4) / 120.0
    } else {
        x.sin() / x
    }
}

/// Unit phase codebook `θ_s[k] = e^{j2πk/Q}`.
pub fn phase_codebook(q: usize) -> CVector {
    CVector::from_iterator(
        q,
        (0..q).map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / q as f64)),
    )
}

/// Discrete HRIS configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HrisConfig {
    pub phase_idx: Vec<usize>,
    /// `true` for active elements.
    pub gamma: Vec<bool>,
    pub mu: f64,
}

impl HrisConfig {
    pub fn passive(n: usize) -> Self {
        Self {
            phase_idx: vec![0; n],
            gamma: vec![false; n],
            mu: 1.0,
        }
    }

    pub fn n_active(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count()
    }

    pub fn surface(&self, q: usize) -> Surface {
        let cb = phase_codebook(q);
        Surface {
            gamma: self
                .gamma
                .iter()
                .map(|&g| if g { 1.0 } else { 0.0 })
                .collect(),
            mu: self.mu,
            theta: CVector::from_iterator(
                self.phase_idx.len(),
                self.phase_idx.iter().map(|&i| cb[i % q]),
            ),
        }
    }
}

/// Indices of the BS antennas wired to the RF chains, in chain order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntennaSelection {
    pub selected: Vec<usize>,
}

impl AntennaSelection {
    pub fn first(l: usize) -> Self {
        Self {
            selected: (0..l).collect(),
        }
    }

    pub fn is_valid(&self, n_r: usize) -> bool {
        let mut seen = vec![false; n_r];
        for &s in &self.selected {
            if s >= n_r || seen[s] {
                return false;
            }
            seen[s] = true;
        }
        true
    }

    /// The `L × N_R` selection matrix.
    pub fn matrix(&self, n_r: usize) -> RMatrix {
        let mut a = RMatrix::zeros(self.selected.len(), n_r);
        for (i, &j) in self.selected.iter().enumerate() {
            a[(i, j)] = 1.0;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub antenna: AntennaSelection,
    pub hris: HrisConfig,
    pub w: CVector,
    pub mse: f64,
    pub hris_power: f64,
}

/// Relaxed HRIS state: continuous modes, shared amplification, complex phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub gamma: Vec<f64>,
    pub mu: f64,
    pub theta: CVector,
}

impl Surface {
    /// `ω = (μ−1)γ + 1`.
    pub fn omega(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|g| (self.mu - 1.0) * g + 1.0)
            .collect()
    }

    /// `ω̃ = μγ`, the amplitude seen by the active-element noise.
    pub fn omega_noise(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| self.mu * g).collect()
    }
}

fn check_dims(ch: &ChannelSet, s: &Surface) -> Result<(), ModelError> {
    let n = ch.h_r.len();
    if s.gamma.len() != n || s.theta.len() != n || ch.g.nrows() != n || ch.g.ncols() != ch.h_d.len()
    {
        return Err(ModelError::Dimension(format!(
            "surface has {} modes / {} phases, channels have N={} and G {}x{}",
            s.gamma.len(),
            s.theta.len(),
            n,
            ch.g.nrows(),
            ch.g.ncols()
        )));
    }
    Ok(())
}

/// Mean effective channel `h = h_d + ε_b Gᴴ diag(ω ⊙ θ) h_r`.
pub fn effective_channel(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
) -> Result<CVector, ModelError> {
    check_dims(ch, s)?;
    let eps = params.eps_b();
    let omega = s.omega();
    let r = CVector::from_iterator(
        s.theta.len(),
        (0..s.theta.len()).map(|i| s.theta[i] * ch.h_r[i] * omega[i] * eps),
    );
    Ok(&ch.h_d + ch.g.ad_mul(&r))
}

/// Average received covariance without the BS noise,
/// `Ω = p̃(hhᴴ + (1−ε_b²) Gᴴ diag(|ω_nθ_n h_r,n|²) G) + σ_a² Gᴴ diag(ω̃²) G`.
pub fn build_omega(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
) -> Result<CMatrix, ModelError> {
    let h = effective_channel(ch, s, params)?;
    Ok(omega_with_h(ch, s, params, &h))
}

/// Same as [`build_omega`] when `h` is already known.
pub fn omega_with_h(ch: &ChannelSet, s: &Surface, params: &SystemParams, h: &CVector) -> CMatrix {
    let pt = params.p_tilde();
    let eps = params.eps_b();
    let omega = s.omega();
    let mut diag = vec![0.0; s.gamma.len()];
    for (i, d) in diag.iter_mut().enumerate() {
        let g = s.gamma[i] * s.mu;
        *d = pt * (1.0 - eps * eps) * (omega[i] * s.theta[i] * ch.h_r[i]).norm_sqr()
            + params.sigma_a2 * g * g;
    }
    let mut out = h * h.adjoint();
    out.scale_mut(pt);
    out += gh_diag_g(&ch.g, &diag);
    out
}

/// `Gᴴ diag(d) G` for real `d`.
pub fn gh_diag_g(g: &CMatrix, d: &[f64]) -> CMatrix {
    let n_r = g.ncols();
    let mut scaled = g.clone();
    for (i, &di) in d.iter().enumerate() {
        for j in 0..n_r {
            scaled[(i, j)] *= di;
        }
    }
    g.ad_mul(&scaled)
}

/// `Q = AΩAᵀ + k_r² d̃iag(AΩAᵀ) + σ̃_b² I`.
pub fn build_q(a: &RMatrix, omega: &CMatrix, params: &SystemParams) -> CMatrix {
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let mut q = &ac * omega * ac.transpose();
    let kr2 = params.k_r * params.k_r;
    let sb = params.sigma_b2_tilde();
    for i in 0..q.nrows() {
        let d = q[(i, i)];
        q[(i, i)] = d + d * kr2 + Complex64::new(sb, 0.0);
    }
    q
}

/// `f = wᴴQw − 2√p Re{wᴴAh} + 1`.
pub fn mse_analytic(
    w: &CVector,
    a: &RMatrix,
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
) -> Result<f64, ModelError> {
    if w.len() != a.nrows() || a.ncols() != ch.h_d.len() {
        return Err(ModelError::Dimension(format!(
            "w has length {}, A is {}x{}, N_R={}",
            w.len(),
            a.nrows(),
            a.ncols(),
            ch.h_d.len()
        )));
    }
    let h = effective_channel(ch, s, params)?;
    let omega = omega_with_h(ch, s, params, &h);
    Ok(mse_from_parts(w, a, &omega, &h, params))
}

pub fn mse_from_parts(
    w: &CVector,
    a: &RMatrix,
    omega: &CMatrix,
    h: &CVector,
    params: &SystemParams,
) -> f64 {
    let q = build_q(a, omega, params);
    let ah = a.map(|x| Complex64::new(x, 0.0)) * h;
    let quad = w.dotc(&(&q * w)).re;
    quad - 2.0 * params.p.sqrt() * w.dotc(&ah).re + 1.0
}

/// HRIS power draw `μ² Σ γ_n² (p̃|h_r,n|² + σ_a²)`; equals the physical power
/// for binary γ.
pub fn hris_power(s: &Surface, ch: &ChannelSet, params: &SystemParams) -> f64 {
    let loads = params.element_loads(&ch.h_r);
    s.mu * s.mu
        * s.gamma
            .iter()
            .zip(&loads)
            .map(|(g, c)| g * g * c)
            .sum::<f64>()
}

/// Samples per parallel block of the Monte-Carlo simulators.
const BLOCK: usize = 1 << 15;

fn cn<R: Rng>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

fn phase_error<R: Rng>(rng: &mut R, half: f64) -> Complex64 {
    if half == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::from_polar(1.0, rng.random_range(-half..=half))
}

fn block_ranges(n_samples: usize) -> Vec<(u64, usize)> {
    (0..n_samples.div_ceil(BLOCK))
        .map(|b| (b as u64, BLOCK.min(n_samples - b * BLOCK)))
        .collect()
}

/// Empirical MSE of `ŝ = wᴴ(Ay + η_r)` over `n_samples` symbols.
///
/// Each symbol draws the data symbol, transmit distortion, active-element
/// noise, per-element phase errors, BS noise, and receive distortion. The
/// receive distortion variance is fixed to `k_r²` times the analytic average
/// received power per selected antenna.
pub fn simulate_empirical_mse(
    sol: &Solution,
    ch: &ChannelSet,
    params: &SystemParams,
    n_samples: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let n_samples = n_samples.max(1);
    let s = sol.hris.surface(params.q_levels());
    let a = sol.antenna.matrix(params.n_r);
    check_dims(ch, &s)?;
    if sol.w.len() != a.nrows() {
        return Err(ModelError::Dimension(
            "receiver length differs from L".into(),
        ));
    }
    let omega = build_omega(ch, &s, params)?;
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let aoa = &ac * &omega * ac.transpose();
    let kr2 = params.k_r * params.k_r;
    let eta_r_var: Vec<f64> = (0..a.nrows())
        .map(|i| kr2 * (aoa[(i, i)].re + params.sigma_b2))
        .collect();

    let n = ch.h_r.len();
    let om = s.omega();
    // Per-element reflected amplitude and noise amplitude, before phase error.
    let refl: Vec<Complex64> = (0..n).map(|i| s.theta[i] * om[i] * ch.h_r[i]).collect();
    let namp: Vec<Complex64> = (0..n).map(|i| s.theta[i] * (s.gamma[i] * s.mu)).collect();
    let active: Vec<bool> = s.gamma.iter().map(|&g| g > 0.0).collect();
    let sel = &sol.antenna.selected;
    let w = &sol.w;
    let half = params.noise_half_width();
    let sqrt_p = params.p.sqrt();
    let t_var = params.k_t * params.k_t * params.p;

    let sums: Vec<f64> = block_ranges(n_samples)
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = substream(seed, Purpose::Signal, b);
            let mut r = vec![ZERO; n];
            let mut acc = 0.0;
            for _ in 0..len {
                let sym = cn(&mut rng, 1.0);
                let x = sym * sqrt_p + cn(&mut rng, t_var);
                for i in 0..n {
                    let ph = phase_error(&mut rng, half);
                    let mut v = refl[i] * ph * x;
                    if active[i] {
                        v += namp[i] * ph * cn(&mut rng, params.sigma_a2);
                    }
                    r[i] = v;
                }
                let mut est = ZERO;
                for (li, &ant) in sel.iter().enumerate() {
                    let mut y = ch.h_d[ant] * x + cn(&mut rng, params.sigma_b2);
                    for i in 0..n {
                        y += ch.g[(i, ant)].conj() * r[i];
                    }
                    y += cn(&mut rng, eta_r_var[li]);
                    est += w[li].conj() * y;
                }
                acc += (est - sym).norm_sqr();
            }
            acc
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / n_samples as f64)
}

/// Empirical `E[yyᴴ] − σ_b² I` over `n_samples` received vectors, the
/// Monte-Carlo counterpart of [`build_omega`].
pub fn simulate_received_covariance(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
    n_samples: usize,
    seed: u64,
) -> Result<CMatrix, ModelError> {
    check_dims(ch, s)?;
    let n = ch.h_r.len();
    let n_r = ch.h_d.len();
    let om = s.omega();
    let half = params.noise_half_width();
    let sqrt_p = params.p.sqrt();
    let t_var = params.k_t * params.k_t * params.p;
    let n_samples = n_samples.max(1);
    let parts: Vec<CMatrix> = block_ranges(n_samples)
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = substream(seed, Purpose::Signal, b);
            let mut acc = CMatrix::zeros(n_r, n_r);
            let mut r = CVector::zeros(n);
            for _ in 0..len {
                let x = cn(&mut rng, 1.0) * sqrt_p + cn(&mut rng, t_var);
                for i in 0..n {
                    let ph = phase_error(&mut rng, half) * s.theta[i];
                    let mut v = ph * om[i] * ch.h_r[i] * x;
                    if s.gamma[i] > 0.0 {
                        v += ph * (s.gamma[i] * s.mu) * cn(&mut rng, params.sigma_a2);
                    }
                    r[i] = v;
                }
                let y = &ch.h_d * x + ch.g.ad_mul(&r);
                acc.ger(
                    Complex64::new(1.0, 0.0),
                    &y,
                    &y.conjugate(),
                    Complex64::new(1.0, 0.0),
                );
            }
            acc
        })
        .collect();
    let mut total = CMatrix::zeros(n_r, n_r);
    for p in &parts {
        total += p;
    }
    Ok(total.unscale(n_samples as f64))
}

/// Monte-Carlo `E[|ΛBΦ̃h_r x|² + |BΛΦ̃n_a|²]`, the power radiated by the
/// active elements.
pub fn simulate_hris_power(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let half = params.noise_half_width();
    let sqrt_p = params.p.sqrt();
    let t_var = params.k_t * params.k_t * params.p;
    let n_samples = n_samples.max(1);
    let sums: Vec<f64> = block_ranges(n_samples)
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = substream(seed, Purpose::Signal, b);
            let mut acc = 0.0;
            for _ in 0..len {
                let x = cn(&mut rng, 1.0) * sqrt_p + cn(&mut rng, t_var);
                for i in 0..s.gamma.len() {
                    let g = s.gamma[i] * s.mu;
                    if g == 0.0 {
                        continue;
                    }
                    let ph = phase_error(&mut rng, half) * s.theta[i];
                    acc += (ph * g * ch.h_r[i] * x).norm_sqr()
                        + (ph * g * cn(&mut rng, params.sigma_a2)).norm_sqr();
                }
            }
            acc
        })
        .collect();
    sums.iter().sum::<f64>() / n_samples as f64
}

/// Monte-Carlo average of `Φ̄AΦ̄ᴴ` next to the analytic
/// `ε_b²A + (1−ε_b²) d̃iag(A)`.
pub fn phase_noise_expectation_check(
    a: &CMatrix,
    b_bits: u32,
    n_draws: usize,
    seed: u64,
) -> Result<(CMatrix, CMatrix), ModelError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ModelError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let half = PI / 2f64.powi(b_bits as i32);
    let n_draws = n_draws.max(1);
    let parts: Vec<CMatrix> = block_ranges(n_draws)
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = substream(seed, Purpose::PhaseNoise, b);
            // Accumulate e^{j(φ_i − φ_j)} and scale by A once at the end.
            let mut acc = CMatrix::zeros(n, n);
            let mut ph = vec![ZERO; n];
            for _ in 0..len {
                for p in ph.iter_mut() {
                    *p = phase_error(&mut rng, half);
                }
                for j in 0..n {
                    let cj = ph[j].conj();
                    for i in 0..n {
                        acc[(i, j)] += ph[i] * cj;
                    }
                }
            }
            acc
        })
        .collect();
    let mut mean = CMatrix::zeros(n, n);
    for p in &parts {
        mean += p;
    }
    let mean = mean.unscale(n_draws as f64);
    let empirical = a.component_mul(&mean);
    let eps = epsilon_b(b_bits);
    let mut analytic = a.scale(eps * eps);
    for i in 0..n {
        analytic[(i, i)] = a[(i, i)];
    }
    Ok((empirical, analytic))
}

/// Real matrix helper for tests and callers that build selections by hand.
pub fn selection_from_rows(rows: &[Vec<f64>]) -> RMatrix {
    let l = rows.len();
    let n_r = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(l, n_r, |i, j| rows[i][j])
}
