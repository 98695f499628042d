//! Closed-form block updates and the coefficient builders for the three
//! selection subproblems.
//!
//! With `P = GXGᴴ`, `T = p̃ε_b² h_r h_rᴴ + p̃(1−ε_b²) d̃iag(h_r h_rᴴ)` and
//! `c_n = ε_b[p̃(GXh_d)_n − √p(GAᵀw)_n]`, the MSE splits as
//! `f = ωᵀKω + 2ωᵀRe{k} + σ_a² ω̃ᵀ d̃iag(P) ω̃ + const` in the amplitudes and as
//! `f = θᴴNθ + 2Re{θᴴn} + const` in the phases.

use num_complex::Complex64;

use crate::channel::ChannelSet;
use crate::numerics::{hermitian_solve, kron, vec, CMatrix, CVector, NumericsError, RMatrix, ZERO};
use crate::system_model::{build_q, phase_codebook, Surface, SystemParams};

fn complexify(a: &RMatrix) -> CMatrix {
    a.map(|x| Complex64::new(x, 0.0))
}

/// `w* = √p Q⁻¹ A h`.
pub fn mmse_receiver(
    a: &RMatrix,
    omega: &CMatrix,
    h: &CVector,
    params: &SystemParams,
) -> Result<CVector, NumericsError> {
    let q = build_q(a, omega, params);
    let rhs = (complexify(a) * h).scale(params.p.sqrt());
    hermitian_solve(&q, &rhs)
}

/// `X = Aᵀ(wwᴴ + k_r² d̃iag(wwᴴ))A`.
pub fn build_x(w: &CVector, a: &RMatrix, k_r: f64) -> CMatrix {
    let mut ww = w * w.adjoint();
    let kr2 = k_r * k_r;
    for i in 0..ww.nrows() {
        ww[(i, i)] *= 1.0 + kr2;
    }
    let ac = complexify(a);
    ac.transpose() * ww * ac
}

/// `P = G X Gᴴ`.
pub fn build_p(g: &CMatrix, x: &CMatrix) -> CMatrix {
    g * x * g.adjoint()
}

/// `Tᵀ`, the second Hadamard factor of both K and N.
pub fn t_transposed(h_r: &CVector, params: &SystemParams) -> CMatrix {
    let pt = params.p_tilde();
    let eps = params.eps_b();
    let n = h_r.len();
    CMatrix::from_fn(n, n, |m, k| {
        let mut v = h_r[m].conj() * h_r[k] * (pt * eps * eps);
        if m == k {
            v += Complex64::new(pt * (1.0 - eps * eps) * h_r[m].norm_sqr(), 0.0);
        }
        v
    })
}

/// `c = ε_b[p̃ G X h_d − √p G Aᵀ w]`, shared by k and n.
pub fn linear_core(
    ch: &ChannelSet,
    x: &CMatrix,
    w: &CVector,
    a: &RMatrix,
    params: &SystemParams,
) -> CVector {
    let eps = params.eps_b();
    let gxh = &ch.g * (x * &ch.h_d);
    let gaw = &ch.g * (complexify(a).transpose() * w);
    (gxh.scale(params.p_tilde()) - gaw.scale(params.p.sqrt())).scale(eps)
}

/// `K = (ΦᴴPΦ) ⊙ Tᵀ` and `k_n = conj(θ_n h_r,n) c_n`.
pub fn build_k_k(
    ch: &ChannelSet,
    theta: &CVector,
    params: &SystemParams,
    w: &CVector,
    a: &RMatrix,
) -> (CMatrix, CVector) {
    let x = build_x(w, a, params.k_r);
    let p = build_p(&ch.g, &x);
    let c = linear_core(ch, &x, w, a, params);
    k_k_from_parts(ch, theta, params, &p, &c)
}

pub fn k_k_from_parts(
    ch: &ChannelSet,
    theta: &CVector,
    params: &SystemParams,
    p: &CMatrix,
    c: &CVector,
) -> (CMatrix, CVector) {
    let t = t_transposed(&ch.h_r, params);
    let n = theta.len();
    let k_mat = CMatrix::from_fn(n, n, |i, j| {
        theta[i].conj() * p[(i, j)] * theta[j] * t[(i, j)]
    });
    let k_vec = CVector::from_fn(n, |i, _| (theta[i] * ch.h_r[i]).conj() * c[i]);
    (k_mat, k_vec)
}

/// Diagonal of `GXGᴴ` as real numbers.
pub fn p_diag(p: &CMatrix) -> Vec<f64> {
    (0..p.nrows()).map(|i| p[(i, i)].re).collect()
}

/// Coefficients of the amplification quadratic `aμ² + 2bμ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpCoeffs {
    pub a: f64,
    pub b: f64,
    pub mu_ref: f64,
}

fn real_quad(m: &CMatrix, x: &[f64]) -> f64 {
    crate::numerics::real_quad_form(m, x)
}

/// `a = σ_a² γᵀDγ + γᵀKγ`, `b = γᵀRe{K1 + k} − γᵀKγ`, and the largest
/// budget-feasible amplification `μ_ref`.
pub fn amp_coeffs(
    gamma: &[f64],
    k_mat: &CMatrix,
    k_vec: &CVector,
    d_diag: &[f64],
    loads: &[f64],
    params: &SystemParams,
) -> AmpCoeffs {
    let gkg = real_quad(k_mat, gamma);
    let gdg: f64 = gamma.iter().zip(d_diag).map(|(g, d)| g * g * d).sum();
    let k1k = k1_plus_k(k_mat, k_vec);
    let lin: f64 = gamma.iter().zip(&k1k).map(|(g, v)| g * v).sum();
    AmpCoeffs {
        a: params.sigma_a2 * gdg + gkg,
        b: lin - gkg,
        mu_ref: mu_ref(gamma, loads, params.p_hris),
    }
}

/// `Re{K1 + k}`.
pub fn k1_plus_k(k_mat: &CMatrix, k_vec: &CVector) -> Vec<f64> {
    (0..k_vec.len())
        .map(|i| k_mat.row(i).iter().map(|z| z.re).sum::<f64>() + k_vec[i].re)
        .collect()
}

/// `√(P_HRIS / Σ γ_n² load_n)`; infinite when no load is drawn.
pub fn mu_ref(gamma: &[f64], loads: &[f64], p_hris: f64) -> f64 {
    let load: f64 = gamma.iter().zip(loads).map(|(g, c)| g * g * c).sum();
    if load > 0.0 {
        (p_hris / load).sqrt()
    } else {
        f64::INFINITY
    }
}

/// Minimizer of `aμ² + 2bμ` over `[μ_min, μ_ref]`.
///
/// For `a > 0` this is the clamp of `−b/a`. A non-convex or flat quadratic is
/// minimized at whichever endpoint is lower. An empty interval
/// (`μ_ref < μ_min`) returns `μ_ref`, leaving the caller to repair the mode set.
pub fn optimal_mu(a: f64, b: f64, mu_min: f64, mu_ref: f64) -> f64 {
    if mu_ref < mu_min {
        return mu_ref;
    }
    if a > 0.0 {
        let t = -b / a;
        return t.clamp(mu_min, mu_ref);
    }
    if !mu_ref.is_finite() {
        return if b < 0.0 || a < 0.0 { mu_ref } else { mu_min };
    }
    let f = |m: f64| a * m * m + 2.0 * b * m;
    if f(mu_ref) < f(mu_min) {
        mu_ref
    } else {
        mu_min
    }
}

/// `μ_min² min_n(p̃|h_r,n|² + σ_a²)`: below this budget no element can be
/// active.
pub fn p_min(ch: &ChannelSet, params: &SystemParams) -> f64 {
    let m = params
        .element_loads(&ch.h_r)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    params.mu_min * params.mu_min * m
}

/// Maximizer of `(2x−1)ᵀ(2u−1)` over the ball `‖2u−1‖² ≤ d`.
///
/// Returns `None` when `2x−1` vanishes, in which case every feasible `u` is
/// optimal and the caller keeps its previous value.
pub fn aux_update(x: &[f64]) -> Option<Vec<f64>> {
    let norm = x
        .iter()
        .map(|v| (2.0 * v - 1.0).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm < 1e-12 {
        return None;
    }
    let s = (x.len() as f64).sqrt() / norm;
    Some(x.iter().map(|v| s * (v - 0.5) + 0.5).collect())
}

/// Mode-selection QP data: minimize `γᵀE₁γ + γᵀe` subject to
/// `Σ E₂_n γ_n² ≤ P_HRIS`, `0 ≤ γ ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeQp {
    pub e1: CMatrix,
    pub e2_diag: Vec<f64>,
    pub e: Vec<f64>,
}

pub fn build_mode_qp(
    mu: f64,
    k_mat: &CMatrix,
    k_vec: &CVector,
    d_diag: &[f64],
    loads: &[f64],
    params: &SystemParams,
) -> ModeQp {
    let m1 = mu - 1.0;
    let mut e1 = k_mat.scale(m1 * m1);
    for (i, d) in d_diag.iter().enumerate() {
        e1[(i, i)] += Complex64::new(mu * mu * params.sigma_a2 * d, 0.0);
    }
    ModeQp {
        e1,
        e2_diag: loads.iter().map(|c| mu * mu * c).collect(),
        e: k1_plus_k(k_mat, k_vec)
            .into_iter()
            .map(|v| 2.0 * m1 * v)
            .collect(),
    }
}

/// `M = Wᵀ ⊗ Ω` with `W = wwᴴ + k_r² d̃iag(wwᴴ)`, and `m = √p vec(hwᴴ)`.
///
/// For `a = vec(Aᵀ)`, `aᵀMa − 2Re{aᵀm} = f_MSE − σ̃_b²‖w‖² − 1`.
pub fn build_antenna_qp(
    w: &CVector,
    omega: &CMatrix,
    h: &CVector,
    params: &SystemParams,
) -> (CMatrix, CVector) {
    let mut ww = w * w.adjoint();
    let kr2 = params.k_r * params.k_r;
    for i in 0..ww.nrows() {
        ww[(i, i)] *= 1.0 + kr2;
    }
    let m_mat = kron(&ww.transpose(), omega);
    let m_vec = vec(&(h * w.adjoint())).scale(params.p.sqrt());
    (m_mat, m_vec)
}

/// Phase QP data in both the element domain (`N`, `n`) and the one-hot
/// codeword domain (`Ñ = Nᵀ ⊗ θ_sθ_sᴴ`, `ñ = vec(θ_s nᴴ)`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseQp {
    pub n_mat: CMatrix,
    pub n_vec: CVector,
    pub nt_mat: CMatrix,
    pub nt_vec: CVector,
}

/// `N = (ΛPΛ) ⊙ Tᵀ` and `n_n = ω_n conj(h_r,n) c_n`, with `Λ = diag(ω)`.
pub fn build_phase_qp(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
    w: &CVector,
    a: &RMatrix,
) -> PhaseQp {
    let x = build_x(w, a, params.k_r);
    let p = build_p(&ch.g, &x);
    let c = linear_core(ch, &x, w, a, params);
    phase_qp_from_parts(ch, s, params, &p, &c)
}

pub fn phase_qp_from_parts(
    ch: &ChannelSet,
    s: &Surface,
    params: &SystemParams,
    p: &CMatrix,
    c: &CVector,
) -> PhaseQp {
    let om = s.omega();
    let t = t_transposed(&ch.h_r, params);
    let n = om.len();
    let n_mat = CMatrix::from_fn(n, n, |i, j| p[(i, j)] * (om[i] * om[j]) * t[(i, j)]);
    let n_vec = CVector::from_fn(n, |i, _| ch.h_r[i].conj() * c[i] * om[i]);
    let ts = phase_codebook(params.q_levels());
    let nt_mat = kron(&n_mat.transpose(), &(&ts * ts.adjoint()));
    let nt_vec = vec(&(&ts * n_vec.adjoint()));
    PhaseQp {
        n_mat,
        n_vec,
        nt_mat,
        nt_vec,
    }
}

/// Every subproblem coefficient evaluated at one point.
#[derive(Debug, Clone)]
pub struct SubproblemCoeffs {
    pub x_mat: CMatrix,
    pub k_mat: CMatrix,
    pub k_vec: CVector,
    pub e1: CMatrix,
    pub e2_diag: Vec<f64>,
    pub e_vec: Vec<f64>,
    pub m_mat: CMatrix,
    pub m_vec: CVector,
    pub n_mat: CMatrix,
    pub n_vec: CVector,
    pub nt_mat: CMatrix,
    pub nt_vec: CVector,
    pub a_quad: f64,
    pub b_lin: f64,
    pub mu_ref: f64,
}

impl SubproblemCoeffs {
    pub fn compute(
        ch: &ChannelSet,
        s: &Surface,
        a: &RMatrix,
        w: &CVector,
        params: &SystemParams,
    ) -> Result<Self, crate::system_model::ModelError> {
        let h = crate::system_model::effective_channel(ch, s, params)?;
        let omega = crate::system_model::omega_with_h(ch, s, params, &h);
        let x = build_x(w, a, params.k_r);
        let p = build_p(&ch.g, &x);
        let c = linear_core(ch, &x, w, a, params);
        let (k_mat, k_vec) = k_k_from_parts(ch, &s.theta, params, &p, &c);
        let d = p_diag(&p);
        let loads = params.element_loads(&ch.h_r);
        let amp = amp_coeffs(&s.gamma, &k_mat, &k_vec, &d, &loads, params);
        let mode = build_mode_qp(s.mu, &k_mat, &k_vec, &d, &loads, params);
        let (m_mat, m_vec) = build_antenna_qp(w, &omega, &h, params);
        let ph = phase_qp_from_parts(ch, s, params, &p, &c);
        Ok(Self {
            x_mat: x,
            k_mat,
            k_vec,
            e1: mode.e1,
            e2_diag: mode.e2_diag,
            e_vec: mode.e,
            m_mat,
            m_vec,
            n_mat: ph.n_mat,
            n_vec: ph.n_vec,
            nt_mat: ph.nt_mat,
            nt_vec: ph.nt_vec,
            a_quad: amp.a,
            b_lin: amp.b,
            mu_ref: amp.mu_ref,
        })
    }
}

/// `vec(Aᵀ)`: row `i` of `A` lands at `[i·N_R, (i+1)·N_R)`.
pub fn selection_to_vec(a: &RMatrix) -> Vec<f64> {
    let (l, n_r) = a.shape();
    let mut out = vec![0.0; l * n_r];
    for i in 0..l {
        for j in 0..n_r {
            out[i * n_r + j] = a[(i, j)];
        }
    }
    out
}

pub fn vec_to_selection(v: &[f64], l: usize, n_r: usize) -> RMatrix {
    RMatrix::from_fn(l, n_r, |i, j| v[i * n_r + j])
}

/// `θ = Zθ_s` with `z[nQ + k] = Z[n, k]`.
pub fn z_to_theta(z: &[f64], q: usize) -> CVector {
    let ts = phase_codebook(q);
    let n = z.len() / q;
    CVector::from_fn(n, |i, _| {
        (0..q).fold(ZERO, |acc, k| acc + ts[k] * z[i * q + k])
    })
}
