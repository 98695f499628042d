//! Penalty-based exact block coordinate descent.
//!
//! The binary selections are relaxed to their convex hulls and tied back to
//! binary points through auxiliary vectors on matching balls. The penalty
//! `J_ρ = ρ[(N − γ̃ᵀũ) + (LN_R − ãᵀṽ) + (QN − z̃ᵀq̃)]`, with `x̃ = 2x − 1`, is
//! added to the MSE. Each sweep updates, in order, the receiver, the
//! amplification, the three auxiliaries, the modes, the antennas, and the
//! phases. Every update minimizes `L_ρ = f_MSE + J_ρ` over its block, so `L_ρ`
//! cannot increase while ρ is held fixed.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::channel::ChannelSet;
use crate::numerics::{CVector, NumericsError, RMatrix};
use crate::qp::{Constraint, ProjectedGradient, QpError, QpProblem, QpSolver};
use crate::rng::{substream, Purpose};
use crate::subsolvers::{
    amp_coeffs, aux_update, build_antenna_qp, build_mode_qp, build_p, build_x, k_k_from_parts,
    linear_core, mmse_receiver, mu_ref, optimal_mu, p_diag, p_min, phase_qp_from_parts,
    selection_to_vec, vec_to_selection, z_to_theta,
};
use crate::system_model::{
    effective_channel, hris_power, mse_analytic, mse_from_parts, omega_with_h, AntennaSelection,
    HrisConfig, ModelError, PhaseNoise, Solution, Surface, SystemParams,
};

#[derive(Debug, Error)]
pub enum PebcdError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid options: {0}")]
    Options(String),
    #[error("no convergence after {iterations} iterations (binary gap {gap:.3e})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        best: Box<RunOutput>,
    },
}

/// How the initial penalty weight is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoInit {
    /// Multiple of the MSE at the initial point.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PebcdOptions {
    pub rho0: RhoInit,
    pub rho_growth: f64,
    pub t_penalty: usize,
    pub eps_outer: f64,
    pub max_outer: usize,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub seed: u64,
    /// Binary gap required for convergence.
    pub gap_tol: f64,
    /// Initial common value of the relaxed mode vector before power scaling.
    pub gamma0: f64,
    /// Values of `gamma0` tried by [`solve`].
    pub mode_starts: Vec<f64>,
    /// Try rounding moves when the mode QP stalls on the power ball.
    pub mode_safeguard: bool,
    /// Add a start designed with all impairments switched off, whose
    /// discrete choices are carried over and refined under the true model.
    pub hardware_free_start: bool,
}

impl Default for PebcdOptions {
    fn default() -> Self {
        Self {
            rho0: RhoInit::Relative(1e-4),
            rho_growth: 5.0,
            t_penalty: 10,
            eps_outer: 1e-5,
            max_outer: 500,
            qp_tol: 1e-9,
            qp_max_iter: 2000,
            seed: 0,
            gap_tol: 1e-4,
            gamma0: 1.0,
            mode_starts: vec![1.0, 0.5],
            mode_safeguard: true,
            hardware_free_start: true,
        }
    }
}

impl PebcdOptions {
    pub fn validate(&self) -> Result<(), PebcdError> {
        let mut errs = Vec::new();
        match self.rho0 {
            RhoInit::Relative(r) | RhoInit::Absolute(r) if !(r > 0.0) => {
                errs.push(format!("rho0 must be > 0 (got {r})"))
            }
            _ => {}
        }
        if !(self.rho_growth > 1.0) {
            errs.push(format!("rho_growth must be > 1 (got {})", self.rho_growth));
        }
        if self.t_penalty == 0 {
            errs.push("t_penalty must be >= 1".into());
        }
        if !(self.eps_outer > 0.0) {
            errs.push(format!("eps_outer must be > 0 (got {})", self.eps_outer));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            errs.push("qp_tol must be > 0 and qp_max_iter >= 1".into());
        }
        for g in std::iter::once(&self.gamma0).chain(&self.mode_starts) {
            if !(*g > 0.0 && *g <= 1.0) {
                errs.push(format!("mode starts must be in (0, 1] (got {g})"));
            }
        }
        if self.mode_starts.is_empty() {
            errs.push("mode_starts must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PebcdError::Options(errs.join("; ")))
        }
    }
}

/// Mode block handling.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeBlock {
    Free,
    /// Modes frozen to this pattern.
    Fixed(Vec<bool>),
    /// Exactly this many active elements, placement optimized.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AntennaBlock {
    Free,
    Fixed(AntennaSelection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub mode: ModeBlock,
    pub antenna: AntennaBlock,
}

impl Default for Blocks {
    fn default() -> Self {
        Self {
            mode: ModeBlock::Free,
            antenna: AntennaBlock::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedState {
    pub w: CVector,
    pub mu: f64,
    pub gamma: Vec<f64>,
    /// `vec(Aᵀ)`, L blocks of length N_R.
    pub a: Vec<f64>,
    /// N blocks of length `2^B`.
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub rho: f64,
    pub iter: usize,
    /// Inner solves that stopped on the iteration cap.
    pub qp_warnings: usize,
}

impl RelaxedState {
    pub fn surface(&self, params: &SystemParams) -> Surface {
        Surface {
            gamma: self.gamma.clone(),
            mu: self.mu,
            theta: z_to_theta(&self.z, params.q_levels()),
        }
    }

    pub fn selection(&self, params: &SystemParams) -> RMatrix {
        vec_to_selection(&self.a, params.l, params.n_r)
    }

    /// Largest distance of a relaxed entry from the nearer binary value.
    pub fn binary_gap(&self) -> f64 {
        self.gamma
            .iter()
            .chain(&self.a)
            .chain(&self.z)
            .map(|&x| x.min(1.0 - x).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn n_active(&self) -> usize {
        self.gamma.iter().filter(|&&g| g >= 0.5).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangianParts {
    pub f_mse: f64,
    pub j_rho: f64,
    pub value: f64,
}

fn inner_penalty(x: &[f64], aux: &[f64]) -> f64 {
    x.len() as f64
        - x.iter()
            .zip(aux)
            .map(|(a, b)| (2.0 * a - 1.0) * (2.0 * b - 1.0))
            .sum::<f64>()
}

pub fn penalty(state: &RelaxedState) -> f64 {
    state.rho
        * (inner_penalty(&state.gamma, &state.u)
            + inner_penalty(&state.a, &state.v)
            + inner_penalty(&state.z, &state.q))
}

/// `L_ρ = f_MSE + J_ρ` at the state.
pub fn lagrangian(
    state: &RelaxedState,
    ch: &ChannelSet,
    params: &SystemParams,
) -> Result<LagrangianParts, PebcdError> {
    let s = state.surface(params);
    let h = effective_channel(ch, &s, params)?;
    let om = omega_with_h(ch, &s, params, &h);
    let f = mse_from_parts(&state.w, &state.selection(params), &om, &h, params);
    let j = penalty(state);
    Ok(LagrangianParts {
        f_mse: f,
        j_rho: j,
        value: f + j,
    })
}

fn mmse_at(
    ch: &ChannelSet,
    s: &Surface,
    a: &RMatrix,
    params: &SystemParams,
) -> Result<(CVector, f64), PebcdError> {
    let h = effective_channel(ch, s, params)?;
    let om = omega_with_h(ch, s, params, &h);
    let w = mmse_receiver(a, &om, &h, params)?;
    let f = mse_from_parts(&w, a, &om, &h, params);
    Ok((w, f))
}

/// Mode block after the power-threshold guard: below `P_min` nothing can be
/// active, so the modes are frozen passive.
fn effective_mode_block(blocks: &Blocks, ch: &ChannelSet, params: &SystemParams) -> ModeBlock {
    if params.n == 0 || params.p_hris < p_min(ch, params) {
        return ModeBlock::Fixed(vec![false; params.n]);
    }
    match &blocks.mode {
        ModeBlock::Fixed(pattern) => {
            let g: Vec<f64> = pattern.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let loads = params.element_loads(&ch.h_r);
            if mu_ref(&g, &loads, params.p_hris) < params.mu_min {
                ModeBlock::Fixed(vec![false; params.n])
            } else {
                ModeBlock::Fixed(pattern.clone())
            }
        }
        other => other.clone(),
    }
}

/// Weight moved onto one distinct antenna per row at start. With identical
/// rows every block update keeps them identical, so some asymmetry is needed;
/// small values stay closest to the uninformed start.
const ANTENNA_TILT: f64 = 0.01;

/// Starting point: modes scaled onto the power ball at `μ_min`, antenna rows
/// near the simplex centers with a seeded tilt, phases at the simplex
/// centers, auxiliaries at the ball centers, and the MMSE receiver.
pub fn init_state(
    params: &SystemParams,
    ch: &ChannelSet,
    options: &PebcdOptions,
    blocks: &Blocks,
) -> Result<RelaxedState, PebcdError> {
    params.validate()?;
    options.validate()?;
    let (n, l, n_r, q) = (params.n, params.l, params.n_r, params.q_levels());
    let loads = params.element_loads(&ch.h_r);
    let mode = effective_mode_block(blocks, ch, params);

    let mu = params.mu_min;
    let (gamma, u) = match &mode {
        ModeBlock::Fixed(p) => {
            let g: Vec<f64> = p.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            (g.clone(), g)
        }
        ModeBlock::Free => {
            let total: f64 = loads.iter().sum::<f64>() * mu * mu;
            let scale = (params.p_hris / total).sqrt().min(1.0);
            (vec![options.gamma0 * scale; n], vec![0.5; n])
        }
        ModeBlock::Count(k) => {
            let k = (*k).min(n) as f64;
            let w: Vec<f64> = loads.iter().map(|c| mu * mu * c).collect();
            let c = Constraint::BoxBallSum {
                weights: w,
                budget: params.p_hris,
                total: k,
            };
            (c.project(&vec![k / n as f64; n])?, vec![0.5; n])
        }
    };
    let mu = if gamma.iter().all(|&g| g == 0.0) {
        1.0
    } else {
        mu
    };

    let (a, v) = match &blocks.antenna {
        AntennaBlock::Fixed(sel) => {
            let av = selection_to_vec(&sel.matrix(n_r));
            (av.clone(), av)
        }
        AntennaBlock::Free => {
            let mut perm: Vec<usize> = (0..n_r).collect();
            let mut rng = substream(options.seed, Purpose::Init, 0);
            perm.shuffle(&mut rng);
            let mut a = vec![(1.0 - ANTENNA_TILT) / n_r as f64; l * n_r];
            for i in 0..l {
                a[i * n_r + perm[i]] += ANTENNA_TILT;
            }
            (a, vec![0.5; l * n_r])
        }
    };
    let z = vec![1.0 / q as f64; n * q];
    let qv = vec![0.5; n * q];

    let mut state = RelaxedState {
        w: CVector::zeros(l),
        mu,
        gamma,
        a,
        z,
        u,
        v,
        q: qv,
        rho: 0.0,
        iter: 0,
        qp_warnings: 0,
    };
    let (w, f) = mmse_at(ch, &state.surface(params), &state.selection(params), params)?;
    state.w = w;
    state.rho = match options.rho0 {
        RhoInit::Relative(r) => r * f,
        RhoInit::Absolute(r) => r,
    };
    Ok(state)
}

fn real_part(m: &crate::numerics::CMatrix, scale: f64) -> RMatrix {
    RMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        0.5 * scale * (m[(i, j)].re + m[(j, i)].re)
    })
}

fn solve_block(
    solver: &ProjectedGradient,
    problem: &QpProblem,
    x0: &[f64],
    warnings: &mut usize,
) -> Result<Vec<f64>, PebcdError> {
    let sol = solver.solve(problem, x0)?;
    if !sol.converged {
        *warnings += 1;
    }
    Ok(sol.x)
}

/// One sweep over all blocks.
pub fn pebcd_iteration(
    state: &RelaxedState,
    ch: &ChannelSet,
    params: &SystemParams,
    options: &PebcdOptions,
    blocks: &Blocks,
) -> Result<RelaxedState, PebcdError> {
    let mut st = state.clone();
    let q_levels = params.q_levels();
    let loads = params.element_loads(&ch.h_r);
    let mode = effective_mode_block(blocks, ch, params);
    let solver = ProjectedGradient {
        tol: options.qp_tol,
        max_iter: options.qp_max_iter,
    };

    // Receiver.
    let a_mat = st.selection(params);
    let (w, _) = mmse_at(ch, &st.surface(params), &a_mat, params)?;
    st.w = w;

    // Amplification.
    let theta = z_to_theta(&st.z, q_levels);
    let x = build_x(&st.w, &a_mat, params.k_r);
    let p = build_p(&ch.g, &x);
    let c = linear_core(ch, &x, &st.w, &a_mat, params);
    let (k_mat, k_vec) = k_k_from_parts(ch, &theta, params, &p, &c);
    let d = p_diag(&p);
    let any_active = st.gamma.iter().any(|&g| g > 1e-12);
    if any_active {
        let amp = amp_coeffs(&st.gamma, &k_mat, &k_vec, &d, &loads, params);
        let cap = budget_mu_ref(&st.gamma, &loads, params);
        st.mu = optimal_mu(amp.a, amp.b, params.mu_min, cap);
    } else {
        st.mu = 1.0;
    }

    // Auxiliaries.
    if let Some(u) = aux_update(&st.gamma) {
        st.u = u;
    }
    if let Some(v) = aux_update(&st.a) {
        st.v = v;
    }
    if let Some(q) = aux_update(&st.z) {
        st.q = q;
    }

    // Modes.
    let mode_free = !matches!(mode, ModeBlock::Fixed(_));
    if mode_free {
        let mq = build_mode_qp(st.mu, &k_mat, &k_vec, &d, &loads, params);
        let constraint = match mode {
            ModeBlock::Count(k) => Constraint::BoxBallSum {
                weights: mq.e2_diag.clone(),
                budget: params.p_hris,
                total: k.min(params.n) as f64,
            },
            _ => Constraint::BoxBall {
                weights: mq.e2_diag.clone(),
                budget: params.p_hris,
            },
        };
        let problem = QpProblem {
            hessian: real_part(&mq.e1, 2.0),
            linear: mq
                .e
                .iter()
                .zip(&st.u)
                .map(|(e, u)| e - 2.0 * st.rho * (2.0 * u - 1.0))
                .collect(),
            constraint,
        };
        st.gamma = solve_block(&solver, &problem, &st.gamma, &mut st.qp_warnings)?;
        if options.mode_safeguard && matches!(mode, ModeBlock::Free) {
            mode_safeguard(&mut st, ch, params, &loads)?;
        }
        if st.gamma.iter().all(|&g| g <= 1e-12) {
            st.mu = 1.0;
        }
    }

    // Antennas.
    if matches!(blocks.antenna, AntennaBlock::Free) {
        let s = st.surface(params);
        let h = effective_channel(ch, &s, params)?;
        let om = omega_with_h(ch, &s, params, &h);
        let (m_mat, m_vec) = build_antenna_qp(&st.w, &om, &h, params);
        let problem = QpProblem {
            hessian: real_part(&m_mat, 2.0),
            linear: m_vec
                .iter()
                .zip(&st.v)
                .map(|(m, v)| -2.0 * m.re - 2.0 * st.rho * (2.0 * v - 1.0))
                .collect(),
            constraint: Constraint::AssignmentPolytope {
                l: params.l,
                n_r: params.n_r,
            },
        };
        st.a = solve_block(&solver, &problem, &st.a, &mut st.qp_warnings)?;
    }

    // Phases.
    if params.n > 0 {
        let a_mat = st.selection(params);
        let x = build_x(&st.w, &a_mat, params.k_r);
        let p = build_p(&ch.g, &x);
        let c = linear_core(ch, &x, &st.w, &a_mat, params);
        let ph = phase_qp_from_parts(ch, &st.surface(params), params, &p, &c);
        let problem = QpProblem {
            hessian: real_part(&ph.nt_mat, 2.0),
            linear: ph
                .nt_vec
                .iter()
                .zip(&st.q)
                .map(|(n, q)| 2.0 * n.re - 2.0 * st.rho * (2.0 * q - 1.0))
                .collect(),
            constraint: Constraint::BlockSimplex {
                blocks: params.n,
                block_len: q_levels,
            },
        };
        st.z = solve_block(&solver, &problem, &st.z, &mut st.qp_warnings)?;
    }

    st.iter += 1;
    Ok(st)
}

/// `μ_ref` with projection round-off at the lower end absorbed into `μ_min`.
fn budget_mu_ref(gamma: &[f64], loads: &[f64], params: &SystemParams) -> f64 {
    let r = mu_ref(gamma, loads, params.p_hris);
    if r < params.mu_min && r >= params.mu_min * (1.0 - 1e-9) {
        params.mu_min
    } else {
        r
    }
}

/// Rounding moves for a mode vector stuck on the power ball with fractional
/// entries. A move is kept only if it lowers `L_ρ`.
fn mode_safeguard(
    st: &mut RelaxedState,
    ch: &ChannelSet,
    params: &SystemParams,
    loads: &[f64],
) -> Result<(), PebcdError> {
    let frac: Vec<usize> = (0..st.gamma.len())
        .filter(|&i| st.gamma[i] > 1e-9 && st.gamma[i] < 1.0 - 1e-9)
        .collect();
    if frac.is_empty() {
        return Ok(());
    }
    let used: f64 = st.mu
        * st.mu
        * st.gamma
            .iter()
            .zip(loads)
            .map(|(g, c)| g * g * c)
            .sum::<f64>();
    if used < params.p_hris * (1.0 - 1e-6) {
        return Ok(());
    }
    let current = lagrangian(st, ch, params)?.value;
    let mut best: Option<(f64, RelaxedState)> = None;

    let mut rounded = st.gamma.clone();
    for &i in &frac {
        rounded[i] = if rounded[i] >= 0.5 { 1.0 } else { 0.0 };
    }
    let mut zeroed = st.gamma.clone();
    for &i in &frac {
        zeroed[i] = 0.0;
    }
    for gamma in [rounded, zeroed] {
        let cap = budget_mu_ref(&gamma, loads, params);
        if cap < params.mu_min {
            continue;
        }
        let mu = st.mu.clamp(params.mu_min, cap);
        let mut cand = st.clone();
        cand.mu = if gamma.iter().all(|&g| g <= 1e-12) {
            1.0
        } else {
            mu
        };
        cand.gamma = gamma;
        if let Some(u) = aux_update(&cand.gamma) {
            cand.u = u;
        }
        let val = lagrangian(&cand, ch, params)?.value;
        if val < current && best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, cand));
        }
    }
    if let Some((_, cand)) = best {
        *st = cand;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub rho: f64,
    pub f_mse: f64,
    pub j_rho: f64,
    pub lagrangian: f64,
    pub binary_gap: f64,
    pub mu: f64,
    pub n_active: usize,
}

pub const TRACE_HEADER: [&str; 8] = [
    "iter",
    "rho",
    "f_mse",
    "j_rho",
    "lagrangian",
    "binary_gap",
    "mu",
    "n_active",
];

impl TraceRow {
    pub fn record(&self) -> [String; 8] {
        [
            self.iter.to_string(),
            format!("{:e}", self.rho),
            format!("{:e}", self.f_mse),
            format!("{:e}", self.j_rho),
            format!("{:e}", self.lagrangian),
            format!("{:e}", self.binary_gap),
            format!("{:e}", self.mu),
            self.n_active.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub solution: Solution,
    pub trace: Vec<TraceRow>,
    pub state: RelaxedState,
    pub converged: bool,
}

fn trace_row(state: &RelaxedState, parts: LagrangianParts) -> TraceRow {
    TraceRow {
        iter: state.iter,
        rho: state.rho,
        f_mse: parts.f_mse,
        j_rho: parts.j_rho,
        lagrangian: parts.value,
        binary_gap: state.binary_gap(),
        mu: state.mu,
        n_active: state.n_active(),
    }
}

/// Iterates until `L_ρ` settles and the selections are binary, raising ρ
/// every `t_penalty` sweeps, then recovers a discrete solution.
pub fn run(
    params: &SystemParams,
    ch: &ChannelSet,
    options: &PebcdOptions,
    blocks: &Blocks,
) -> Result<RunOutput, PebcdError> {
    let mut state = init_state(params, ch, options, blocks)?;
    let mut parts = lagrangian(&state, ch, params)?;
    let mut trace = vec![trace_row(&state, parts)];
    let mut converged = false;
    for t in 1..=options.max_outer {
        state = pebcd_iteration(&state, ch, params, options, blocks)?;
        let prev = parts.value;
        parts = lagrangian(&state, ch, params)?;
        trace.push(trace_row(&state, parts));
        let settled = (parts.value - prev).abs() <= options.eps_outer * parts.value.abs().max(1.0);
        if settled && state.binary_gap() <= options.gap_tol {
            converged = true;
            break;
        }
        if t % options.t_penalty == 0 {
            state.rho *= options.rho_growth;
            parts = lagrangian(&state, ch, params)?;
        }
    }
    let solution = round_and_recover(&state, ch, params, blocks)?;
    let gap = state.binary_gap();
    let out = RunOutput {
        solution,
        trace,
        state,
        converged,
    };
    if !converged && gap > 1e-2 {
        return Err(PebcdError::NotConverged {
            iterations: out.state.iter,
            gap,
            best: Box::new(out),
        });
    }
    Ok(out)
}

/// Phase-noise attenuation `1 − ε_b²` below which an otherwise ideal model is
/// designed as noise-free and only scored with the noise.
pub const NEGLIGIBLE_PHASE_NOISE: f64 = 1e-9;

/// Runs from each mode start in `options.mode_starts` and keeps the run with
/// the lowest recovered MSE. Earlier starts win ties. Non-converged runs
/// compete with their best-effort solution; the error is returned only if no
/// start converged.
///
/// With `hardware_free_start` and an impaired model, one more candidate is
/// the solve of the same problem with `k_t = k_r = 0` and no phase noise. Its
/// antennas, phases and modes are fitted to the true budget and refined under
/// `params`; its trace and state refer to the impairment-free model.
///
/// Without distortion and with phase noise below [`NEGLIGIBLE_PHASE_NOISE`],
/// the problem is solved noise-free and the result scored under `params`.
pub fn solve(
    params: &SystemParams,
    ch: &ChannelSet,
    options: &PebcdOptions,
    blocks: &Blocks,
) -> Result<RunOutput, PebcdError> {
    options.validate()?;
    if params.k_t == 0.0
        && params.k_r == 0.0
        && params.phase_noise != PhaseNoise::None
        && 1.0 - params.eps_b().powi(2) <= NEGLIGIBLE_PHASE_NOISE
    {
        let ideal = SystemParams {
            phase_noise: PhaseNoise::None,
            ..params.clone()
        };
        let rescore = |sol: &mut Solution| -> Result<(), PebcdError> {
            let s = sol.hris.surface(params.q_levels());
            sol.mse = mse_analytic(&sol.w, &sol.antenna.matrix(params.n_r), ch, &s, params)?;
            sol.hris_power = hris_power(&s, ch, params);
            Ok(())
        };
        return match solve(&ideal, ch, options, blocks) {
            Ok(mut o) => {
                rescore(&mut o.solution)?;
                Ok(o)
            }
            Err(PebcdError::NotConverged {
                iterations,
                gap,
                mut best,
            }) => {
                rescore(&mut best.solution)?;
                Err(PebcdError::NotConverged {
                    iterations,
                    gap,
                    best,
                })
            }
            Err(e) => Err(e),
        };
    }
    // Frozen modes make every mode start identical.
    let n_starts = match effective_mode_block(blocks, ch, params) {
        ModeBlock::Fixed(_) => 1,
        _ => options.mode_starts.len(),
    };
    let mut results = Vec::with_capacity(n_starts + 1);
    for &g in &options.mode_starts[..n_starts] {
        let opts = PebcdOptions {
            gamma0: g,
            ..options.clone()
        };
        results.push(run(params, ch, &opts, blocks));
    }
    let impaired = params.k_t > 0.0 || params.k_r > 0.0 || params.phase_noise != PhaseNoise::None;
    if options.hardware_free_start && impaired {
        let design = SystemParams {
            k_t: 0.0,
            k_r: 0.0,
            phase_noise: PhaseNoise::None,
            ..params.clone()
        };
        let carry = |sol: &Solution, state: &RelaxedState| {
            refine(
                ch,
                params,
                blocks,
                sol.antenna.clone(),
                sol.hris.phase_idx.clone(),
                sol.hris.gamma.clone(),
                &state.gamma,
            )
        };
        results.push(match solve(&design, ch, options, blocks) {
            Ok(mut o) => {
                o.solution = carry(&o.solution, &o.state)?;
                Ok(o)
            }
            Err(PebcdError::NotConverged {
                iterations,
                gap,
                mut best,
            }) => {
                best.solution = carry(&best.solution, &best.state)?;
                Err(PebcdError::NotConverged {
                    iterations,
                    gap,
                    best,
                })
            }
            Err(e) => Err(e),
        });
    }

    let score = |r: &Result<RunOutput, PebcdError>| match r {
        Ok(o) => Some((0, o.solution.mse)),
        Err(PebcdError::NotConverged { best, .. }) => Some((1, best.solution.mse)),
        Err(_) => None,
    };
    let mut best: Option<Result<RunOutput, PebcdError>> = None;
    for res in results {
        let better = match (&best, score(&res)) {
            (_, None) => return res,
            (None, Some(_)) => true,
            (Some(b), Some((rank, m))) => {
                let (brank, bm) = score(b).expect("stored runs are scored");
                rank < brank || (rank == brank && m < bm)
            }
        };
        if better {
            best = Some(res);
        }
    }
    best.expect("at least one start")
}

/// Discrete solution from a relaxed state: per-element argmax phases,
/// thresholded modes, distinct antennas, then the amplification and receiver
/// re-optimized for the rounded configuration. Antennas and free modes are
/// refined by single exchanges and toggles on the exact objective.
pub fn round_and_recover(
    state: &RelaxedState,
    ch: &ChannelSet,
    params: &SystemParams,
    blocks: &Blocks,
) -> Result<Solution, PebcdError> {
    let (n, q) = (params.n, params.q_levels());
    let phase_idx: Vec<usize> = (0..n)
        .map(|i| {
            let blk = &state.z[i * q..(i + 1) * q];
            (0..q).fold(0, |b, k| if blk[k] > blk[b] { k } else { b })
        })
        .collect();
    let gamma: Vec<bool> = match effective_mode_block(blocks, ch, params) {
        ModeBlock::Fixed(p) => p,
        ModeBlock::Free => state.gamma.iter().map(|&g| g >= 0.5).collect(),
        ModeBlock::Count(k) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| state.gamma[j].total_cmp(&state.gamma[i]).then(i.cmp(&j)));
            let mut g = vec![false; n];
            for &i in order.iter().take(k.min(n)) {
                g[i] = true;
            }
            g
        }
    };
    let antenna = match &blocks.antenna {
        AntennaBlock::Fixed(sel) => sel.clone(),
        AntennaBlock::Free => assign_antennas(&state.a, params.l, params.n_r),
    };
    refine(ch, params, blocks, antenna, phase_idx, gamma, &state.gamma)
}

/// Fits a discrete configuration to the budget of `params`, then tunes it.
/// Elements are switched off in increasing `priority` until `μ_min` fits;
/// free antennas and modes are then refined by single exchanges and toggles
/// on the exact objective.
fn refine(
    ch: &ChannelSet,
    params: &SystemParams,
    blocks: &Blocks,
    antenna: AntennaSelection,
    phase_idx: Vec<usize>,
    mut gamma: Vec<bool>,
    priority: &[f64],
) -> Result<Solution, PebcdError> {
    let n = params.n;
    let mode_block = effective_mode_block(blocks, ch, params);
    if let ModeBlock::Fixed(p) = &mode_block {
        gamma = p.clone();
    }
    let loads = params.element_loads(&ch.h_r);
    loop {
        let gf: Vec<f64> = gamma.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        if mu_ref(&gf, &loads, params.p_hris) >= params.mu_min {
            break;
        }
        let weakest = (0..n)
            .filter(|&i| gamma[i])
            .min_by(|&i, &j| priority[i].total_cmp(&priority[j]).then(j.cmp(&i)));
        match weakest {
            Some(i) => gamma[i] = false,
            None => break,
        }
    }

    let mut sol = tune_amplification(ch, params, &antenna, &phase_idx, &gamma)?;
    if blocks.antenna == AntennaBlock::Free {
        let polished = polish_antennas(ch, params, &sol)?;
        if polished != sol.antenna {
            let cand = tune_amplification(ch, params, &polished, &phase_idx, &gamma)?;
            if cand.mse < sol.mse {
                sol = cand;
            }
        }
    }
    if mode_block == ModeBlock::Free {
        let modes = polish_modes(ch, params, &sol)?;
        if modes != sol.hris.gamma {
            let cand = tune_amplification(ch, params, &sol.antenna, &phase_idx, &modes)?;
            if cand.mse < sol.mse {
                sol = cand;
            }
        }
    }
    Ok(sol)
}

const MODE_SCREEN: usize = 8;
const MODE_PASSES: usize = 8;

/// Single-element mode toggles with the antennas and phases of `sol` held
/// fixed. A toggle is kept when some amplification on a coarse grid within
/// the budget beats the incumbent MSE.
pub fn polish_modes(
    ch: &ChannelSet,
    params: &SystemParams,
    sol: &Solution,
) -> Result<Vec<bool>, PebcdError> {
    let q = params.q_levels();
    let a = sol.antenna.matrix(params.n_r);
    let loads = params.element_loads(&ch.h_r);
    let screen = |gamma: &[bool]| -> Result<f64, PebcdError> {
        let gf: Vec<f64> = gamma.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let hi = mu_ref(&gf, &loads, params.p_hris);
        if hi < params.mu_min {
            return Ok(f64::INFINITY);
        }
        let r = (hi / params.mu_min).ln();
        let mut best = f64::INFINITY;
        for i in 0..MODE_SCREEN {
            let mu = params.mu_min * (r * i as f64 / (MODE_SCREEN - 1) as f64).exp();
            let cfg = HrisConfig {
                phase_idx: sol.hris.phase_idx.clone(),
                gamma: gamma.to_vec(),
                mu,
            };
            best = best.min(mmse_at(ch, &cfg.surface(q), &a, params)?.1);
        }
        Ok(best)
    };
    let mut gamma = sol.hris.gamma.clone();
    let mut best = sol.mse;
    for _ in 0..MODE_PASSES {
        let mut improved = false;
        for i in 0..params.n {
            gamma[i] = !gamma[i];
            let f = if gamma.iter().any(|&g| g) {
                screen(&gamma)?
            } else {
                mmse_at(
                    ch,
                    &HrisConfig {
                        phase_idx: sol.hris.phase_idx.clone(),
                        gamma: gamma.clone(),
                        mu: 1.0,
                    }
                    .surface(q),
                    &a,
                    params,
                )?
                .1
            };
            if f < best * (1.0 - 1e-12) {
                best = f;
                improved = true;
            } else {
                gamma[i] = !gamma[i];
            }
        }
        if !improved {
            break;
        }
    }
    Ok(gamma)
}

/// Single-antenna exchanges on the exact MMSE objective, with the surface of
/// `sol` held fixed, until no exchange lowers the MSE.
pub fn polish_antennas(
    ch: &ChannelSet,
    params: &SystemParams,
    sol: &Solution,
) -> Result<AntennaSelection, PebcdError> {
    let s = sol.hris.surface(params.q_levels());
    let h = effective_channel(ch, &s, params)?;
    let om = omega_with_h(ch, &s, params, &h);
    let mse = |sel: &AntennaSelection| -> Result<f64, PebcdError> {
        let a = sel.matrix(params.n_r);
        let w = mmse_receiver(&a, &om, &h, params)?;
        Ok(mse_from_parts(&w, &a, &om, &h, params))
    };
    let mut sel = sol.antenna.clone();
    let mut best = mse(&sel)?;
    loop {
        let mut improved = false;
        for i in 0..params.l {
            for j in 0..params.n_r {
                if sel.selected.contains(&j) {
                    continue;
                }
                let mut cand = sel.clone();
                cand.selected[i] = j;
                let f = mse(&cand)?;
                if f < best * (1.0 - 1e-12) {
                    (sel, best, improved) = (cand, f, true);
                }
            }
        }
        if !improved {
            return Ok(sel);
        }
    }
}

/// Distinct antenna per RF chain maximizing `Σᵢ aᵢ[σ(i)]`: greedy pick, then
/// pairwise swaps and moves to unused antennas until no gain.
pub fn assign_antennas(a: &[f64], l: usize, n_r: usize) -> AntennaSelection {
    let score = |i: usize, j: usize| a[i * n_r + j];
    let mut sel = vec![usize::MAX; l];
    let mut used = vec![false; n_r];
    for _ in 0..l {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..l).filter(|&i| sel[i] == usize::MAX) {
            for j in (0..n_r).filter(|&j| !used[j]) {
                if best.is_none_or(|(b, _, _)| score(i, j) > b) {
                    best = Some((score(i, j), i, j));
                }
            }
        }
        let (_, i, j) = best.expect("l < n_r leaves a free antenna");
        sel[i] = j;
        used[j] = true;
    }
    loop {
        let mut improved = false;
        for i in 0..l {
            for k in (i + 1)..l {
                let now = score(i, sel[i]) + score(k, sel[k]);
                let swapped = score(i, sel[k]) + score(k, sel[i]);
                if swapped > now + 1e-15 {
                    sel.swap(i, k);
                    improved = true;
                }
            }
            for j in 0..n_r {
                if !used[j] && score(i, j) > score(i, sel[i]) + 1e-15 {
                    used[sel[i]] = false;
                    used[j] = true;
                    sel[i] = j;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    AntennaSelection { selected: sel }
}

const MU_GRID: usize = 64;
const GOLDEN_ITERS: usize = 60;

/// Best amplification and MMSE receiver for a fixed discrete configuration.
///
/// The MMSE-optimal MSE is not convex in μ, so the search combines the
/// receiver/amplification alternation with a geometric grid over
/// `[μ_min, μ_ref]` and a golden-section refinement around the best grid
/// point, keeping the lowest value found.
pub fn tune_amplification(
    ch: &ChannelSet,
    params: &SystemParams,
    antenna: &AntennaSelection,
    phase_idx: &[usize],
    gamma: &[bool],
) -> Result<Solution, PebcdError> {
    let q = params.q_levels();
    let a_mat = antenna.matrix(params.n_r);
    let loads = params.element_loads(&ch.h_r);
    let gf: Vec<f64> = gamma.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let cfg = |mu: f64| HrisConfig {
        phase_idx: phase_idx.to_vec(),
        gamma: gamma.to_vec(),
        mu,
    };
    let eval = |mu: f64| -> Result<(f64, CVector), PebcdError> {
        let (w, f) = mmse_at(ch, &cfg(mu).surface(q), &a_mat, params)?;
        Ok((f, w))
    };

    if !gamma.iter().any(|&g| g) {
        let (f, w) = eval(1.0)?;
        return Ok(Solution {
            antenna: antenna.clone(),
            hris: cfg(1.0),
            w,
            mse: f,
            hris_power: 0.0,
        });
    }
    let lo = params.mu_min;
    let hi = mu_ref(&gf, &loads, params.p_hris).max(lo);
    let mut best = (f64::INFINITY, lo, CVector::zeros(params.l));
    let consider = |mu: f64, best: &mut (f64, f64, CVector)| -> Result<f64, PebcdError> {
        let mu = mu.clamp(lo, hi);
        let (f, w) = eval(mu)?;
        if f < best.0 {
            *best = (f, mu, w);
        }
        Ok(f)
    };

    // Alternation from the lower end.
    let theta = cfg(lo).surface(q).theta;
    let mut mu = lo;
    for _ in 0..20 {
        let (_, w) = eval(mu)?;
        let x = build_x(&w, &a_mat, params.k_r);
        let p = build_p(&ch.g, &x);
        let c = linear_core(ch, &x, &w, &a_mat, params);
        let (k_mat, k_vec) = k_k_from_parts(ch, &theta, params, &p, &c);
        let amp = amp_coeffs(&gf, &k_mat, &k_vec, &p_diag(&p), &loads, params);
        let next = optimal_mu(amp.a, amp.b, lo, hi);
        consider(next, &mut best)?;
        if (next - mu).abs() <= 1e-12 * mu {
            break;
        }
        mu = next;
    }

    let grid: Vec<f64> = if hi > lo {
        let r = (hi / lo).ln();
        (0..MU_GRID)
            .map(|i| lo * (r * i as f64 / (MU_GRID - 1) as f64).exp())
            .collect()
    } else {
        vec![lo]
    };
    let mut vals = Vec::with_capacity(grid.len());
    for &m in &grid {
        vals.push(consider(m, &mut best)?);
    }
    let ibest = (0..vals.len()).fold(0, |b, i| if vals[i] < vals[b] { i } else { b });
    if grid.len() > 1 {
        let mut a = grid[ibest.saturating_sub(1)];
        let mut b = grid[(ibest + 1).min(grid.len() - 1)];
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = consider(x1, &mut best)?;
        let mut f2 = consider(x2, &mut best)?;
        for _ in 0..GOLDEN_ITERS {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = consider(x1, &mut best)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = consider(x2, &mut best)?;
            }
        }
    }

    let (f, mu, w) = best;
    let hris = cfg(mu);
    let power = hris_power(&hris.surface(q), ch, params);
    Ok(Solution {
        antenna: antenna.clone(),
        hris,
        w,
        mse: f,
        hris_power: power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_channel_set, FadingParams, Geometry};
    use crate::system_model::PhaseNoise;

    fn tiny() -> SystemParams {
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
            p_hris: 1e-6,
            mu_min: 1.0,
            phase_noise: PhaseNoise::Quantization,
        }
    }

    fn channels(p: &SystemParams, seed: u64) -> ChannelSet {
        gen_channel_set(&Geometry::default(), &FadingParams::default(), p, seed).unwrap()
    }

    #[test]
    fn init_is_feasible_and_deterministic() {
        let p = tiny();
        let ch = channels(&p, 1);
        let o = PebcdOptions::default();
        let s1 = init_state(&p, &ch, &o, &Blocks::default()).unwrap();
        let s2 = init_state(&p, &ch, &o, &Blocks::default()).unwrap();
        assert_eq!(s1, s2);
        let loads = p.element_loads(&ch.h_r);
        let used: f64 = s1
            .gamma
            .iter()
            .zip(&loads)
            .map(|(g, c)| g * g * c)
            .sum::<f64>()
            * s1.mu
            * s1.mu;
        assert!(used <= p.p_hris * (1.0 + 1e-9));
        let c = Constraint::AssignmentPolytope { l: 2, n_r: 4 };
        assert!(c.violation(&s1.a) < 1e-12);
        assert!(s1.rho > 0.0);
    }

    #[test]
    fn below_threshold_init_is_passive() {
        let mut p = tiny();
        let ch = channels(&p, 2);
        p.p_hris = 0.5 * p_min(&ch, &p);
        let s = init_state(&p, &ch, &PebcdOptions::default(), &Blocks::default()).unwrap();
        assert!(s.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn penalty_cases() {
        let p = tiny();
        let ch = channels(&p, 3);
        let mut s = init_state(&p, &ch, &PebcdOptions::default(), &Blocks::default()).unwrap();
        s.gamma = vec![1.0, 0.0, 1.0];
        s.u = s.gamma.clone();
        s.a = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        s.v = s.a.clone();
        s.z = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        s.q = s.z.clone();
        let parts = lagrangian(&s, &ch, &p).unwrap();
        assert_eq!(parts.j_rho, 0.0);
        assert_eq!(parts.value, parts.f_mse);
        s.gamma = vec![0.5; 3];
        assert!((penalty(&s) - s.rho * 3.0).abs() < 1e-15 * s.rho);
    }

    #[test]
    fn antenna_assignment_is_distinct_and_greedy_optimal_on_easy_case() {
        let a = [0.1, 0.8, 0.1, 0.0, 0.0, 0.7, 0.2, 0.1];
        assert_eq!(assign_antennas(&a, 2, 4).selected, vec![1, 2]);
        // Both rows prefer antenna 0; the second gets its runner-up.
        let a = [0.9, 0.1, 0.0, 0.8, 0.0, 0.2];
        let s = assign_antennas(&a, 2, 3);
        assert!(s.is_valid(3));
        assert_eq!(s.selected, vec![0, 2]);
    }

    #[test]
    fn recovery_thresholds_modes() {
        let mut p = tiny();
        p.n = 2;
        let mut ch = channels(&p, 4);
        ch.h_r = ch.h_r.rows(0, 2).into_owned();
        ch.g = ch.g.rows(0, 2).into_owned();
        p.p_hris = 1.0;
        let mut s = init_state(&p, &ch, &PebcdOptions::default(), &Blocks::default()).unwrap();
        s.gamma = vec![0.9, 0.1];
        let sol = round_and_recover(&s, &ch, &p, &Blocks::default()).unwrap();
        assert_eq!(sol.hris.gamma, vec![true, false]);
        assert!(sol.antenna.is_valid(p.n_r));
        assert!(sol.hris_power <= p.p_hris + 1e-9);
    }
}
