//! Run configuration: TOML presets, user files and `key=value` overrides,
//! merged in that order and resolved into core types.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use hris_core::bench::{dbm_to_watts, Scheme, SweepConfig};
use hris_core::channel::{FadingParams, Geometry, RicianInterpretation};
use hris_core::pebcd::{PebcdOptions, RhoInit};
use hris_core::system_model::{PhaseNoise, SystemParams};
use hris_core::validation::ValidationConfig;

const COMMON: &str = r#"
[system]
b_bits = 2
p_dbm = 10.0
k_t = 0.08
k_r = 0.08
sigma_a2_dbm = -80.0
sigma_b2_dbm = -80.0
mu_min = 1.0
phase_noise = "quantization"

[geometry]
bs_pos = [0.0, 80.0, 5.0]
ris_pos = [50.0, 50.0, 15.0]
user_pos = [0.0, 0.0, 2.0]

[fading]
beta0_db = -30.0
alpha_rb = 2.2
alpha_ur = 2.2
alpha_ub = 3.5
rician_factor = 0.75
rician_interpretation = "fraction"

[sweep]
schemes = ["dhris", "fhris", "active", "passive", "nhris", "dhris-noas"]
p_hris_grid_dbm = [-60.0, -55.0, -50.0, -45.0, -40.0]
seeds = { base = 0, count = 50 }
empirical_samples = 100000
output_dir = "out"

[pebcd]
rho0 = 1e-4
rho0_relative = true
rho_growth = 5.0
t_penalty = 10
eps_outer = 1e-5
max_outer = 500
qp_tol = 1e-9
qp_max_iter = 2000
gap_tol = 1e-4
mode_starts = [1.0, 0.5]
mode_safeguard = true
hardware_free_start = true

[validate]
seed = 0
instances = 20
mse_samples = 1000000
expectation_draws = 1000000
bruteforce_seeds = 50
bruteforce_budget_dbm = -60.0
"#;

const PAPER: &str = r#"
[system]
n_r = 32
l = 8
n = 64
"#;

const DESK: &str = r#"
[system]
n_r = 16
l = 4
n = 32
"#;

const TINY: &str = r#"
[system]
n_r = 4
l = 2
n = 3
b_bits = 1

[sweep]
schemes = ["dhris", "passive"]
p_hris_grid_dbm = [-60.0, -50.0]
seeds = { base = 0, count = 3 }
empirical_samples = 1000
"#;

pub const PRESETS: [&str; 3] = ["paper", "desk", "tiny"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_r: usize,
    pub l: usize,
    pub n: usize,
    pub b_bits: u32,
    pub p_dbm: f64,
    pub k_t: f64,
    pub k_r: f64,
    pub sigma_a2_dbm: f64,
    pub sigma_b2_dbm: f64,
    pub mu_min: f64,
    /// `quantization`, `none`, or `bits:<n>`.
    pub phase_noise: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub bs_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    pub user_pos: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadingSection {
    pub beta0_db: f64,
    pub alpha_rb: f64,
    pub alpha_ur: f64,
    pub alpha_ub: f64,
    pub rician_factor: f64,
    /// `fraction` or `kfactor`.
    pub rician_interpretation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { base: u64, count: u64 },
}

impl Seeds {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { base, count } => (*base..base + count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub schemes: Vec<String>,
    pub p_hris_grid_dbm: Vec<f64>,
    pub seeds: Seeds,
    pub empirical_samples: usize,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PebcdSection {
    pub rho0: f64,
    /// ρ⁰ is `rho0` times the initial MSE when set, an absolute value otherwise.
    pub rho0_relative: bool,
    pub rho_growth: f64,
    pub t_penalty: usize,
    pub eps_outer: f64,
    pub max_outer: usize,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub gap_tol: f64,
    pub mode_starts: Vec<f64>,
    pub mode_safeguard: bool,
    pub hardware_free_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    pub seed: u64,
    pub instances: usize,
    pub mse_samples: usize,
    pub expectation_draws: usize,
    pub bruteforce_seeds: usize,
    pub bruteforce_budget_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub system: SystemSection,
    pub geometry: GeometrySection,
    pub fading: FadingSection,
    pub sweep: SweepSection,
    pub pebcd: PebcdSection,
    pub validate: ValidateSection,
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| anyhow!("{origin}: {e}"))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn preset_table(name: &str) -> Result<Table> {
    let extra = match name {
        "paper" => PAPER,
        "desk" => DESK,
        "tiny" => TINY,
        other => bail!("unknown preset {other:?} (expected one of {PRESETS:?})"),
    };
    let mut t = parse_table(COMMON, "built-in preset")?;
    merge(&mut t, parse_table(extra, "built-in preset")?);
    t.insert("preset".into(), Value::String(name.into()));
    Ok(t)
}

/// Parses a `key=value` override. Keys are dotted paths; a bare key is
/// accepted when exactly one section has it. Values are TOML literals, and
/// anything that does not parse as one is taken as a string.
fn apply_override(user: &mut Table, reference: &Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else if reference.contains_key(key) {
        vec![key.to_string()]
    } else {
        let owners: Vec<&String> = reference
            .iter()
            .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(k, _)| k)
            .collect();
        match owners.as_slice() {
            [one] => vec![(*one).clone(), key.to_string()],
            [] => bail!("override {key:?} matches no config key"),
            many => bail!("override {key:?} is ambiguous between sections {many:?}"),
        }
    };
    let mut cur = user;
    for part in &path[..path.len() - 1] {
        cur = cur
            .entry(part.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part} is not a section"))?;
    }
    cur.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Resolves a config from optional file text and overrides. An empty or
/// missing file gives the `paper` preset.
pub fn parse_config(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut user = match text {
        Some(t) => parse_table(t, "config")?,
        None => Table::new(),
    };
    let reference = preset_table("paper")?;
    for o in overrides {
        apply_override(&mut user, &reference, o)?;
    }
    let name = match user.get("preset") {
        None => "paper".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => bail!("preset must be a string, got {other}"),
    };
    let mut merged = preset_table(&name)?;
    merge(&mut merged, user);
    let cfg: RunConfig = Value::Table(merged).try_into().context("invalid config")?;
    cfg.check()?;
    Ok(cfg)
}

pub fn parse_phase_noise(s: &str) -> Result<PhaseNoise> {
    match s.trim().to_ascii_lowercase().as_str() {
        "quantization" => Ok(PhaseNoise::Quantization),
        "none" => Ok(PhaseNoise::None),
        other => match other.strip_prefix("bits:") {
            Some(b) => {
                Ok(PhaseNoise::Bits(b.parse().map_err(|_| {
                    anyhow!("bad bit count in phase_noise {s:?}")
                })?))
            }
            None => bail!("phase_noise must be quantization, none or bits:<n> (got {s:?})"),
        },
    }
}

impl RunConfig {
    /// Collects every invariant violation instead of stopping at the first.
    pub fn check(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{e:#}"));
            }
        };
        note(self.system_params().and_then(|p| {
            p.validate().map_err(|e| anyhow!(e))?;
            Ok(())
        }));
        note(
            self.fading()
                .and_then(|f| f.validate().map_err(|e| anyhow!(e))),
        );
        note(self.geometry().validate().map_err(|e| anyhow!(e)));
        note(self.options().validate().map_err(|e| anyhow!(e)));
        note(self.schemes().map(|_| ()));
        note(self.validation().validate().map_err(|e| anyhow!(e)));
        if self.sweep.p_hris_grid_dbm.is_empty() {
            errs.push("sweep.p_hris_grid_dbm must not be empty".into());
        }
        if self.sweep.p_hris_grid_dbm.iter().any(|x| !x.is_finite()) {
            errs.push("sweep.p_hris_grid_dbm entries must be finite".into());
        }
        if self.sweep.seeds.expand().is_empty() {
            errs.push("sweep.seeds must not be empty".into());
        }
        if self.sweep.output_dir.trim().is_empty() {
            errs.push("sweep.output_dir must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  - {}", errs.join("\n  - "))
        }
    }

    /// Model parameters; `p_hris` is set to the first grid point.
    pub fn system_params(&self) -> Result<SystemParams> {
        let s = &self.system;
        Ok(SystemParams {
            n_r: s.n_r,
            l: s.l,
            n: s.n,
            b_bits: s.b_bits,
            p: dbm_to_watts(s.p_dbm),
            k_t: s.k_t,
            k_r: s.k_r,
            sigma_a2: dbm_to_watts(s.sigma_a2_dbm),
            sigma_b2: dbm_to_watts(s.sigma_b2_dbm),
            p_hris: dbm_to_watts(self.sweep.p_hris_grid_dbm.first().copied().unwrap_or(0.0)),
            mu_min: s.mu_min,
            phase_noise: parse_phase_noise(&s.phase_noise)?,
        })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            bs_pos: self.geometry.bs_pos,
            ris_pos: self.geometry.ris_pos,
            user_pos: self.geometry.user_pos,
        }
    }

    pub fn fading(&self) -> Result<FadingParams> {
        let f = &self.fading;
        let interpretation = match f.rician_interpretation.to_ascii_lowercase().as_str() {
            "fraction" => RicianInterpretation::Fraction,
            "kfactor" => RicianInterpretation::KFactor,
            other => bail!("rician_interpretation must be fraction or kfactor (got {other:?})"),
        };
        Ok(FadingParams {
            beta0_db: f.beta0_db,
            alpha_rb: f.alpha_rb,
            alpha_ur: f.alpha_ur,
            alpha_ub: f.alpha_ub,
            rician_factor: f.rician_factor,
            interpretation,
        })
    }

    pub fn options(&self) -> PebcdOptions {
        let p = &self.pebcd;
        PebcdOptions {
            rho0: if p.rho0_relative {
                RhoInit::Relative(p.rho0)
            } else {
                RhoInit::Absolute(p.rho0)
            },
            rho_growth: p.rho_growth,
            t_penalty: p.t_penalty,
            eps_outer: p.eps_outer,
            max_outer: p.max_outer,
            qp_tol: p.qp_tol,
            qp_max_iter: p.qp_max_iter,
            gap_tol: p.gap_tol,
            mode_starts: p.mode_starts.clone(),
            mode_safeguard: p.mode_safeguard,
            hardware_free_start: p.hardware_free_start,
            ..PebcdOptions::default()
        }
    }

    pub fn schemes(&self) -> Result<Vec<Scheme>> {
        let schemes: Vec<Scheme> = self
            .sweep
            .schemes
            .iter()
            .map(|s| s.parse::<Scheme>().map_err(|e| anyhow!(e)))
            .collect::<Result<_>>()?;
        if schemes.is_empty() {
            bail!("sweep.schemes must not be empty");
        }
        Ok(schemes)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            params: self.system_params()?,
            geometry: self.geometry(),
            fading: self.fading()?,
            schemes: self.schemes()?,
            p_hris_grid_dbm: self.sweep.p_hris_grid_dbm.clone(),
            seeds: self.sweep.seeds.expand(),
            options: self.options(),
            empirical_samples: self.sweep.empirical_samples,
        })
    }

    pub fn validation(&self) -> ValidationConfig {
        let v = &self.validate;
        ValidationConfig {
            seed: v.seed,
            instances: v.instances,
            mse_samples: v.mse_samples,
            expectation_draws: v.expectation_draws,
            bruteforce_seeds: v.bruteforce_seeds,
            bruteforce_budget_dbm: v.bruteforce_budget_dbm,
            geometry: self.geometry(),
            fading: self.fading().unwrap_or_default(),
            options: self.options(),
        }
    }

    /// Canonical TOML of the resolved config with seeds expanded; its hash
    /// tags every output file.
    pub fn manifest(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.sweep.seeds = Seeds::List(self.sweep.seeds.expand());
        toml::to_string(&resolved).context("serializing manifest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_paper_preset() {
        let cfg = parse_config(Some(""), &[]).unwrap();
        assert_eq!(cfg.preset, "paper");
        let p = cfg.system_params().unwrap();
        assert_eq!((p.n_r, p.l, p.n, p.b_bits), (32, 8, 64, 2));
        assert_eq!((p.k_t, p.k_r), (0.08, 0.08));
        assert!((p.p - 0.01).abs() < 1e-15);
        assert!((p.sigma_a2 - 1e-11).abs() < 1e-24 && (p.sigma_b2 - 1e-11).abs() < 1e-24);
        let f = cfg.fading().unwrap();
        assert_eq!(
            (f.beta0_db, f.alpha_rb, f.alpha_ur, f.alpha_ub),
            (-30.0, 2.2, 2.2, 3.5)
        );
        assert_eq!(f.rician_factor, 0.75);
        assert_eq!(cfg.geometry(), Geometry::default());
        assert_eq!(parse_config(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn presets_and_overrides() {
        let cfg = parse_config(
            Some("preset = \"desk\"\n[sweep]\nseeds = [4, 2]\n"),
            &["k_t=0.12".into()],
        )
        .unwrap();
        assert_eq!((cfg.system.n_r, cfg.system.l, cfg.system.n), (16, 4, 32));
        assert_eq!(cfg.sweep.seeds.expand(), vec![4, 2]);
        assert_eq!(cfg.system.k_t, 0.12);
        let cfg = parse_config(
            None,
            &["preset=tiny".into(), "sweep.output_dir=elsewhere".into()],
        )
        .unwrap();
        assert_eq!(cfg.system.n, 3);
        assert_eq!(cfg.sweep.output_dir, "elsewhere");
        assert_eq!(cfg.sweep.seeds.expand(), vec![0, 1, 2]);
    }

    #[test]
    fn l_larger_than_n_r_is_rejected() {
        let err = parse_config(None, &["l=40".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("l=40, n_r=32"), "{err:#}");
    }

    #[test]
    fn violations_are_listed_together() {
        let err = parse_config(
            None,
            &[
                "l=40".into(),
                "rho_growth=0.5".into(),
                "phase_noise=\"fuzzy\"".into(),
            ],
        )
        .unwrap_err();
        let msg = format!("{err:#}");
        assert!(
            msg.contains("rho_growth") && msg.contains("phase_noise"),
            "{msg}"
        );
    }

    #[test]
    fn unknown_keys_and_syntax_errors() {
        let err = parse_config(Some("[system]\nbogus = 1\n"), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
        let err = parse_config(Some("[system]\nn_r = \n"), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
        assert!(parse_config(None, &["nonexistent=3".into()]).is_err());
        assert!(parse_config(None, &["preset=huge".into()]).is_err());
    }

    #[test]
    fn phase_noise_strings() {
        assert_eq!(parse_phase_noise("bits:20").unwrap(), PhaseNoise::Bits(20));
        assert_eq!(parse_phase_noise("None").unwrap(), PhaseNoise::None);
        assert!(parse_phase_noise("bits:x").is_err());
    }

    #[test]
    fn manifest_round_trips_and_expands_seeds() {
        let cfg = parse_config(None, &["preset=tiny".into()]).unwrap();
        let text = cfg.manifest().unwrap();
        assert!(text.contains("seeds = [0, 1, 2]"), "{text}");
        let again = parse_config(Some(&text), &[]).unwrap();
        assert_eq!(again.sweep.seeds.expand(), cfg.sweep.seeds.expand());
        assert_eq!(again.manifest().unwrap(), text);
    }
}
