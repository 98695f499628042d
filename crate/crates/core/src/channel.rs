//! Seeded channel realizations for the BS / HRIS / user geometry.
//!
//! The direct link is Rayleigh; the HRIS links are Rician with a ULA
//! line-of-sight part. All three draw from separate substreams of the trial
//! seed.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::{CMatrix, CVector};
use crate::rng::{substream, Purpose};
use crate::system_model::SystemParams;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("distance must be positive, got {0}")]
    Distance(f64),
    #[error("Rician factor {0} outside the allowed range")]
    RicianFactor(f64),
    #[error("geometry has coincident nodes ({0})")]
    Geometry(&'static str),
    #[error("invalid fading parameters: {0}")]
    Fading(String),
    #[error("channel file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub bs_pos: Point,
    pub ris_pos: Point,
    pub user_pos: Point,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            bs_pos: [0.0, 80.0, 5.0],
            ris_pos: [50.0, 50.0, 15.0],
            user_pos: [0.0, 0.0, 2.0],
        }
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Azimuth of the line from `from` to `to`.
fn azimuth(from: &Point, to: &Point) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

impl Geometry {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if distance(&self.bs_pos, &self.ris_pos) <= 0.0 {
            return Err(ChannelError::Geometry("BS and HRIS"));
        }
        if distance(&self.ris_pos, &self.user_pos) <= 0.0 {
            return Err(ChannelError::Geometry("HRIS and user"));
        }
        if distance(&self.user_pos, &self.bs_pos) <= 0.0 {
            return Err(ChannelError::Geometry("user and BS"));
        }
        Ok(())
    }
}

/// How the configured Rician factor maps to the LoS power fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RicianInterpretation {
    /// The factor is the LoS power fraction itself.
    #[default]
    Fraction,
    /// The factor is the classical K = P_LoS / P_NLoS.
    KFactor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingParams {
    pub beta0_db: f64,
    pub alpha_rb: f64,
    pub alpha_ur: f64,
    pub alpha_ub: f64,
    pub rician_factor: f64,
    pub interpretation: RicianInterpretation,
}

impl Default for FadingParams {
    fn default() -> Self {
        Self {
            beta0_db: -30.0,
            alpha_rb: 2.2,
            alpha_ur: 2.2,
            alpha_ub: 3.5,
            rician_factor: 0.75,
            interpretation: RicianInterpretation::Fraction,
        }
    }
}

impl FadingParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !self.beta0_db.is_finite() {
            return Err(ChannelError::Fading("beta0_db must be finite".into()));
        }
        for (name, a) in [
            ("alpha_rb", self.alpha_rb),
            ("alpha_ur", self.alpha_ur),
            ("alpha_ub", self.alpha_ub),
        ] {
            if !(a > 0.0) || !a.is_finite() {
                return Err(ChannelError::Fading(format!("{name} must be > 0, got {a}")));
            }
        }
        self.los_fraction().map(|_| ())
    }

    /// LoS power fraction κ in `[0, 1)`.
    pub fn los_fraction(&self) -> Result<f64, ChannelError> {
        let f = self.rician_factor;
        match self.interpretation {
            RicianInterpretation::Fraction if (0.0..1.0).contains(&f) => Ok(f),
            RicianInterpretation::KFactor if f >= 0.0 && f.is_finite() => Ok(f / (1.0 + f)),
            _ => Err(ChannelError::RicianFactor(f)),
        }
    }
}

/// Linear power gain `10^(β₀/10) · d^(−α)`.
pub fn path_loss(d: f64, alpha: f64, beta0_db: f64) -> Result<f64, ChannelError> {
    if !(d > 0.0) {
        return Err(ChannelError::Distance(d));
    }
    Ok(10f64.powf(beta0_db / 10.0) * d.powf(-alpha))
}

fn cn01<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// I.i.d. `CN(0, variance)` matrix.
pub fn gen_rayleigh<R: Rng>(rows: usize, cols: usize, variance: f64, rng: &mut R) -> CMatrix {
    let s = variance.max(0.0).sqrt();
    // Fill column-major so that draw order matches storage order.
    let mut m = CMatrix::zeros(rows, cols);
    for z in m.iter_mut() {
        *z = cn01(rng) * s;
    }
    m
}

/// `√variance (√κ LoS + √(1−κ) NLoS)` with i.i.d. `CN(0,1)` NLoS entries.
pub fn gen_rician<R: Rng>(
    los: &CMatrix,
    kappa: f64,
    variance: f64,
    rng: &mut R,
) -> Result<CMatrix, ChannelError> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(ChannelError::RicianFactor(kappa));
    }
    let nlos = gen_rayleigh(los.nrows(), los.ncols(), 1.0, rng);
    let s = variance.max(0.0).sqrt();
    Ok(los.scale(kappa.sqrt() * s) + nlos.scale((1.0 - kappa).sqrt() * s))
}

/// Half-wavelength ULA response `e^{jπk sin φ}`.
pub fn steering(len: usize, phi: f64) -> CVector {
    CVector::from_iterator(
        len,
        (0..len).map(|k| Complex64::from_polar(1.0, PI * k as f64 * phi.sin())),
    )
}

/// One realization of the direct, user–HRIS and HRIS–BS channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h_d: CVector,
    pub h_r: CVector,
    /// `N × N_R`.
    pub g: CMatrix,
    pub seed: u64,
}

pub fn gen_channel_set(
    geometry: &Geometry,
    fading: &FadingParams,
    params: &SystemParams,
    seed: u64,
) -> Result<ChannelSet, ChannelError> {
    geometry.validate()?;
    fading.validate()?;
    let kappa = fading.los_fraction()?;
    let (n_r, n) = (params.n_r, params.n);
    let d_rb = distance(&geometry.ris_pos, &geometry.bs_pos);
    let d_ur = distance(&geometry.user_pos, &geometry.ris_pos);
    let d_ub = distance(&geometry.user_pos, &geometry.bs_pos);

    let mut rng = substream(seed, Purpose::DirectChannel, 0);
    let h_d = gen_rayleigh(
        n_r,
        1,
        path_loss(d_ub, fading.alpha_ub, fading.beta0_db)?,
        &mut rng,
    );

    let los_r = steering(n, azimuth(&geometry.ris_pos, &geometry.user_pos));
    let mut rng = substream(seed, Purpose::ReflectChannel, 0);
    let h_r = gen_rician(
        &CMatrix::from_column_slice(n, 1, los_r.as_slice()),
        kappa,
        path_loss(d_ur, fading.alpha_ur, fading.beta0_db)?,
        &mut rng,
    )?;

    let a_ris = steering(n, azimuth(&geometry.ris_pos, &geometry.bs_pos));
    let a_bs = steering(n_r, azimuth(&geometry.bs_pos, &geometry.ris_pos));
    let los_g = &a_ris * a_bs.adjoint();
    let mut rng = substream(seed, Purpose::BsRisChannel, 0);
    let g = gen_rician(
        &los_g,
        kappa,
        path_loss(d_rb, fading.alpha_rb, fading.beta0_db)?,
        &mut rng,
    )?;

    Ok(ChannelSet {
        h_d: h_d.column(0).into_owned(),
        h_r: h_r.column(0).into_owned(),
        g,
        seed,
    })
}

const MAGIC: &[u8; 8] = b"HRISCHv1";

fn put_c<W: Write>(w: &mut W, z: Complex64) -> io::Result<()> {
    w.write_all(&z.re.to_le_bytes())?;
    w.write_all(&z.im.to_le_bytes())
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_c<R: Read>(r: &mut R) -> io::Result<Complex64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let re = f64::from_le_bytes(b);
    r.read_exact(&mut b)?;
    Ok(Complex64::new(re, f64::from_le_bytes(b)))
}

/// Binary interchange format: `HRISCHv1`, u64 `N_R`, u64 `N`, u64 seed, then
/// `h_d`, `h_r`, and `G` in row-major order, each entry as little-endian
/// f64 real then imaginary part.
pub fn write_channel_set<W: Write>(ch: &ChannelSet, mut w: W) -> Result<(), ChannelError> {
    w.write_all(MAGIC)?;
    w.write_all(&(ch.h_d.len() as u64).to_le_bytes())?;
    w.write_all(&(ch.h_r.len() as u64).to_le_bytes())?;
    w.write_all(&ch.seed.to_le_bytes())?;
    for &z in ch.h_d.iter().chain(ch.h_r.iter()) {
        put_c(&mut w, z)?;
    }
    for i in 0..ch.g.nrows() {
        for j in 0..ch.g.ncols() {
            put_c(&mut w, ch.g[(i, j)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_channel_set<R: Read>(mut r: R) -> Result<ChannelSet, ChannelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ChannelError::Format("bad magic".into()));
    }
    let n_r = get_u64(&mut r)? as usize;
    let n = get_u64(&mut r)? as usize;
    let seed = get_u64(&mut r)?;
    if n_r == 0 || n_r > 1 << 20 || n > 1 << 20 {
        return Err(ChannelError::Format(format!(
            "implausible dims N_R={n_r}, N={n}"
        )));
    }
    let mut h_d = CVector::zeros(n_r);
    for z in h_d.iter_mut() {
        *z = get_c(&mut r)?;
    }
    let mut h_r = CVector::zeros(n);
    for z in h_r.iter_mut() {
        *z = get_c(&mut r)?;
    }
    let mut g = CMatrix::zeros(n, n_r);
    for i in 0..n {
        for j in 0..n_r {
            g[(i, j)] = get_c(&mut r)?;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ChannelError::Format("trailing bytes".into()));
    }
    Ok(ChannelSet { h_d, h_r, g, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system_model::PhaseNoise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n_r: usize, n: usize) -> SystemParams {
        SystemParams {
            n_r,
            l: 1,
            n,
            b_bits: 2,
            p: 0.01,
            k_t: 0.08,
            k_r: 0.08,
            sigma_a2: 1e-11,
            sigma_b2: 1e-11,
            p_hris: 1e-3,
            mu_min: 1.0,
            phase_noise: PhaseNoise::Quantization,
        }
    }

    #[test]
    fn path_loss_values() {
        assert!((path_loss(1.0, 2.2, -30.0).unwrap() - 1e-3).abs() < 1e-18);
        assert!((path_loss(10.0, 2.0, 0.0).unwrap() - 0.01).abs() < 1e-15);
        let g = Geometry::default();
        let d = distance(&g.bs_pos, &g.ris_pos);
        assert!((d - 59.1608).abs() < 1e-4);
        let expect = 1e-3 * d.powf(-2.2);
        assert!((path_loss(d, 2.2, -30.0).unwrap() - expect).abs() <= 1e-15 * expect);
        assert!(path_loss(0.0, 2.0, 0.0).is_err());
        assert!(path_loss(-1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn rayleigh_zero_variance_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gen_rayleigh(3, 2, 0.0, &mut rng)
            .iter()
            .all(|z| *z == Complex64::new(0.0, 0.0)));
        let m = gen_rayleigh(1_000_000, 1, 1.0, &mut rng);
        let var = m.iter().map(|z| z.norm_sqr()).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&var), "{var}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            gen_rayleigh(4, 4, 2.0, &mut a),
            gen_rayleigh(4, 4, 2.0, &mut b)
        );
    }

    #[test]
    fn rician_limits_and_los_fraction() {
        let los = CMatrix::from_column_slice(1_000_000, 1, steering(1_000_000, 0.4).as_slice());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero_k = gen_rician(&los, 0.0, 1.0, &mut rng).unwrap();
        let var = zero_k.iter().map(|z| z.norm_sqr()).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&var));
        // Projection onto the LoS direction estimates √(κ·var).
        let x = gen_rician(&los, 0.75, 4.0, &mut rng).unwrap();
        let proj = x
            .iter()
            .zip(los.iter())
            .map(|(a, b)| a * b.conj())
            .sum::<Complex64>()
            / 1e6;
        let frac = proj.norm_sqr() / 4.0;
        assert!((frac - 0.75).abs() < 0.01, "{frac}");
        let near = gen_rician(&los.rows(0, 8).into_owned(), 1.0 - 1e-12, 9.0, &mut rng).unwrap();
        assert!(near.iter().all(|z| (z.norm() - 3.0).abs() < 1e-4));
        assert!(gen_rician(&los, 1.0, 1.0, &mut rng).is_err());
        assert!(gen_rician(&los, -0.1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn kfactor_interpretation() {
        let mut f = FadingParams::default();
        assert_eq!(f.los_fraction().unwrap(), 0.75);
        f.interpretation = RicianInterpretation::KFactor;
        assert!((f.los_fraction().unwrap() - 0.75 / 1.75).abs() < 1e-15);
        f.rician_factor = 3.0;
        assert!((f.los_fraction().unwrap() - 0.75).abs() < 1e-15);
        f.interpretation = RicianInterpretation::Fraction;
        assert!(f.los_fraction().is_err());
    }

    #[test]
    fn channel_set_shapes_and_determinism() {
        let p = params(6, 5);
        let g = Geometry::default();
        let f = FadingParams::default();
        let a = gen_channel_set(&g, &f, &p, 42).unwrap();
        let b = gen_channel_set(&g, &f, &p, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.h_d.len(), 6);
        assert_eq!(a.h_r.len(), 5);
        assert_eq!(a.g.shape(), (5, 6));
        assert!(a
            .g
            .iter()
            .chain(a.h_d.iter())
            .all(|z| z.re.is_finite() && z.im.is_finite()));
        let c = gen_channel_set(&g, &f, &p, 43).unwrap();
        assert_ne!(a.h_d, c.h_d);
    }

    #[test]
    fn direct_link_power_calibration() {
        let p = params(4, 1);
        let g = Geometry::default();
        let f = FadingParams::default();
        let pl = path_loss(distance(&g.user_pos, &g.bs_pos), f.alpha_ub, f.beta0_db).unwrap();
        let seeds = 10_000u64;
        let mean: f64 = (0..seeds)
            .map(|s| gen_channel_set(&g, &f, &p, s).unwrap().h_d.norm_squared() / 4.0)
            .sum::<f64>()
            / seeds as f64;
        assert!((mean / pl - 1.0).abs() < 0.02, "{}", mean / pl);
    }

    #[test]
    fn file_round_trip() {
        let p = params(3, 4);
        let ch = gen_channel_set(&Geometry::default(), &FadingParams::default(), &p, 7).unwrap();
        let mut buf = Vec::new();
        write_channel_set(&ch, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 16 * (3 + 4 + 12));
        let back = read_channel_set(buf.as_slice()).unwrap();
        assert_eq!(back, ch);
        // First G entry sits right after h_d and h_r.
        let off = 32 + 16 * 7;
        let re = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        assert_eq!(re, ch.g[(0, 0)].re);
        let off = 32 + 16 * 8;
        let re = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        assert_eq!(re, ch.g[(0, 1)].re);
        buf[0] = b'X';
        assert!(read_channel_set(buf.as_slice()).is_err());
    }
}
