//! Configuration-driven parameter sweeps producing CSV tables of bounds and,
//! for validation runs, Monte-Carlo MSEs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    block_partition, expected_inverse_response, response_pdf, BlockSpec, FasGeometry, InverseMoment, MuConvention,
    ThresholdMode,
};
use crate::coherent::{crb_fas_from_moment, crb_fpa_coherent};
use crate::covariance::{crb_covariance, crb_covariance_orthogonal, PilotSet, SystemConfig};
use crate::error::{Error, Result};
use crate::estimators::{run_monte_carlo, McOptions, Scenario};
use crate::numerics::StreamRng;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 5] = ["axis", "curve", "crb", "mse", "stderr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// SNR in dB; `sigma_z^2 = pbar 10^(-snr/10)`.
    Snr,
    /// FAS port count `N`.
    Ports,
    /// Number of users `K`.
    Users,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Snr => "snr",
            Axis::Ports => "ports",
            Axis::Users => "users",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FasBase {
    pub ports: usize,
    pub aperture: f64,
    pub mu: f64,
    pub eig_threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub mu_convention: MuConvention,
}

impl Default for FasBase {
    fn default() -> Self {
        Self {
            ports: 2000,
            aperture: 5.0,
            mu: 0.97,
            eig_threshold: 0.001,
            threshold_mode: ThresholdMode::default(),
            mu_convention: MuConvention::default(),
        }
    }
}

impl FasBase {
    fn geometry(&self, ports: usize, aperture: f64) -> Result<FasGeometry> {
        let g = FasGeometry {
            ports,
            aperture,
            mu: self.mu,
            eig_threshold: self.eig_threshold,
            threshold_mode: self.threshold_mode,
            mu_convention: self.mu_convention,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Operating point shared by every curve before axis and curve overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub blocklength: usize,
    pub users: usize,
    pub pbar: f64,
    pub sigma_h2: f64,
    /// Amplitude `b_k` given to every user.
    pub activity: f64,
    /// Used whenever SNR is not the sweep axis.
    pub snr_db: f64,
    pub fas: FasBase,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            blocklength: 100,
            users: 50,
            pbar: 1.0,
            sigma_h2: 1.0,
            activity: 1.0,
            snr_db: 0.0,
            fas: FasBase::default(),
        }
    }
}

impl BaseConfig {
    fn system(&self, antennas: usize) -> SystemConfig {
        let mut c = SystemConfig::new(self.blocklength, self.users, antennas);
        c.pbar = self.pbar;
        c.sigma_h2 = self.sigma_h2;
        c.b = vec![self.activity; self.users];
        c.with_snr_db(self.snr_db)
    }
}

/// Which bound a curve evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "kebab-case")]
pub enum CurveKind {
    /// Coherent FAS bound averaged over pilots and the max-port gain.
    FasCoherent {
        #[serde(default)]
        ports: Option<usize>,
        #[serde(default)]
        aperture: Option<f64>,
    },
    /// Closed-form coherent bound of an M-antenna array.
    FpaCoherent { antennas: usize },
    /// Covariance bound with orthogonal pilots (closed form).
    CovarianceOrthogonal { antennas: usize },
    /// Covariance bound averaged over Gaussian pilot draws.
    CovarianceGaussian {
        antennas: usize,
        #[serde(default = "default_pilot_draws")]
        pilot_draws: usize,
    },
}

fn default_pilot_draws() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: CurveKind,
}

impl CurveSpec {
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.kind {
            CurveKind::FasCoherent { ports, aperture } => {
                let mut s = String::from("fas-coherent");
                if let Some(n) = ports {
                    s.push_str(&format!(" N={n}"));
                }
                if let Some(w) = aperture {
                    s.push_str(&format!(" W={w}"));
                }
                s
            }
            CurveKind::FpaCoherent { antennas } => format!("fpa-coherent M={antennas}"),
            CurveKind::CovarianceOrthogonal { antennas } => format!("covariance-orthogonal M={antennas}"),
            CurveKind::CovarianceGaussian { antennas, .. } => format!("covariance-gaussian M={antennas}"),
        }
    }
}

/// One Monte-Carlo scenario of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub scenario: Scenario,
    #[serde(default)]
    pub antennas: Option<usize>,
    #[serde(default)]
    pub ports: Option<usize>,
    #[serde(default)]
    pub aperture: Option<f64>,
    #[serde(default)]
    pub blocklength: Option<usize>,
    #[serde(default)]
    pub users: Option<usize>,
    #[serde(default)]
    pub options: McOptions,
}

impl ScenarioSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| match self.antennas {
            Some(m) => format!("{} M={m}", self.scenario),
            None => self.scenario.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    #[serde(default = "default_validation_trials")]
    pub trials: usize,
    pub scenarios: Vec<ScenarioSpec>,
}

fn default_validation_trials() -> usize {
    10_000
}

fn default_inverse_trials() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub version: u32,
    pub axis: Axis,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub curves: Vec<CurveSpec>,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub seed: u64,
    /// Draws for each `E[1/|g|^2]` estimate.
    #[serde(default = "default_inverse_trials")]
    pub inverse_trials: usize,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub validation: Option<ValidationSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Finite(f64),
    Infinite,
}

impl Bound {
    pub fn value(&self) -> f64 {
        match self {
            Bound::Finite(v) => *v,
            Bound::Infinite => f64::INFINITY,
        }
    }

    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Bound::Finite(v)),
            Err(e) if e.is_infinite_bound() => Ok(Bound::Infinite),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub curve: String,
    pub crb: Bound,
    pub mse: Option<f64>,
    pub std_error: Option<f64>,
}

impl SweepPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SweepPlan = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without evaluating a bound.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid values must be finite".into()));
        }
        let increasing = self.grid.windows(2).all(|w| w[0] < w[1]);
        let decreasing = self.grid.windows(2).all(|w| w[0] > w[1]);
        if !(increasing || decreasing) {
            return Err(Error::Config("grid must be strictly monotone".into()));
        }
        if matches!(self.axis, Axis::Ports | Axis::Users)
            && self.grid.iter().any(|v| *v < 1.0 || v.fract() != 0.0)
        {
            return Err(Error::Config(format!("{} grid must hold positive integers", self.axis)));
        }
        if self.curves.is_empty() && self.validation.is_none() {
            return Err(Error::Config("plan has no curves".into()));
        }
        let base = &self.base;
        base.system(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        base.fas
            .geometry(base.fas.ports.max(1), base.fas.aperture)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.inverse_trials < crate::channel::MIN_INVERSE_TRIALS {
            return Err(Error::Config(format!(
                "inverse_trials must be at least {}",
                crate::channel::MIN_INVERSE_TRIALS
            )));
        }
        let max_users = self.max_users();
        for c in &self.curves {
            match &c.kind {
                CurveKind::FpaCoherent { antennas }
                | CurveKind::CovarianceOrthogonal { antennas }
                | CurveKind::CovarianceGaussian { antennas, .. }
                    if *antennas == 0 =>
                {
                    return Err(Error::Config(format!("curve '{}' needs at least one antenna", c.label())));
                }
                CurveKind::CovarianceOrthogonal { .. } if max_users > base.blocklength => {
                    return Err(Error::Config(format!(
                        "curve '{}': {max_users} orthogonal pilots do not fit in L = {}",
                        c.label(),
                        base.blocklength
                    )));
                }
                CurveKind::CovarianceGaussian { pilot_draws: 0, .. } => {
                    return Err(Error::Config(format!("curve '{}' needs pilot_draws >= 1", c.label())));
                }
                CurveKind::FasCoherent { ports: Some(0), .. } => {
                    return Err(Error::Config(format!("curve '{}' needs at least one port", c.label())));
                }
                _ => {}
            }
            if let CurveKind::FasCoherent { aperture: Some(w), .. } = c.kind {
                if !(w > 0.0) {
                    return Err(Error::Config(format!("curve '{}' needs a positive aperture", c.label())));
                }
            }
        }
        if let Some(v) = &self.validation {
            if self.axis != Axis::Snr {
                return Err(Error::Config("validation runs sweep the snr axis".into()));
            }
            if v.scenarios.is_empty() {
                return Err(Error::Config("validation has no scenarios".into()));
            }
            if v.trials < crate::estimators::MIN_MC_TRIALS {
                return Err(Error::Config(format!(
                    "validation needs at least {} trials",
                    crate::estimators::MIN_MC_TRIALS
                )));
            }
            for s in &v.scenarios {
                let needs_array = matches!(s.scenario, Scenario::CoherentFpa | Scenario::CovarianceFpa);
                if needs_array && s.antennas.is_none() {
                    return Err(Error::Config(format!("scenario '{}' needs antennas", s.label())));
                }
            }
        }
        Ok(())
    }

    fn max_users(&self) -> usize {
        match self.axis {
            Axis::Users => self.grid.iter().fold(0.0_f64, |a, b| a.max(*b)) as usize,
            _ => self.base.users,
        }
    }

    /// System configuration at one grid point, before curve overrides.
    fn point(&self, value: f64, antennas: usize) -> SystemConfig {
        let mut base = self.base.clone();
        match self.axis {
            Axis::Snr => base.snr_db = value,
            Axis::Users => base.users = value as usize,
            Axis::Ports => {}
        }
        base.system(antennas)
    }

    fn fas_key(&self, curve: usize, value: f64) -> (usize, usize, f64) {
        let CurveKind::FasCoherent { ports, aperture } = &self.curves[curve].kind else {
            unreachable!("fas_key on a non-FAS curve")
        };
        let n = match self.axis {
            Axis::Ports => value as usize,
            _ => ports.unwrap_or(self.base.fas.ports),
        };
        (curve, n, aperture.unwrap_or(self.base.fas.aperture))
    }
}

type MomentTable = BTreeMap<(usize, usize, u64), InverseMoment>;

/// Stream id for curve-level random draws; grid points of one curve share
/// draws so curves stay smooth along the axis.
fn curve_stream(curve: usize, sub: usize) -> u64 {
    ((curve as u64) << 32) | sub as u64
}

fn inverse_moments(plan: &SweepPlan) -> Result<MomentTable> {
    let mut keys: Vec<(usize, usize, f64)> = Vec::new();
    for (ci, c) in plan.curves.iter().enumerate() {
        if matches!(c.kind, CurveKind::FasCoherent { .. }) {
            for v in &plan.grid {
                let k = plan.fas_key(ci, *v);
                if !keys.iter().any(|x| x.0 == k.0 && x.1 == k.1 && x.2 == k.2) {
                    keys.push(k);
                }
            }
        }
    }
    keys.par_iter()
        .map(|&(ci, n, w)| {
            let geometry = plan.base.fas.geometry(n, w)?;
            let spec = block_partition(&geometry)?;
            let mut rng = StreamRng::new(plan.seed, curve_stream(ci, n));
            let m = expected_inverse_response(&spec, plan.base.sigma_h2, &mut rng, plan.inverse_trials)?;
            Ok(((ci, n, w.to_bits()), m))
        })
        .collect()
}

fn covariance_gaussian(plan: &SweepPlan, curve: usize, config: &SystemConfig, draws: usize) -> Result<Bound> {
    // draw the widest pilot set once per draw and truncate, so a users sweep
    // sees nested pilot sets
    let width = plan.max_users().max(config.users);
    let mut total = 0.0;
    for d in 0..draws {
        let mut rng = StreamRng::new(plan.seed, curve_stream(curve, d));
        let pilots = PilotSet::gaussian(config.blocklength, width, config.pbar, &mut rng)?.truncated(config.users);
        match Bound::from_result(crb_covariance(&pilots, config, 0))? {
            Bound::Finite(v) => total += v,
            Bound::Infinite => return Ok(Bound::Infinite),
        }
    }
    Ok(Bound::Finite(total / draws as f64))
}

fn evaluate(plan: &SweepPlan, moments: &MomentTable, value: f64, curve: usize) -> Result<SweepRow> {
    let spec = &plan.curves[curve];
    let antennas = match spec.kind {
        CurveKind::FpaCoherent { antennas }
        | CurveKind::CovarianceOrthogonal { antennas }
        | CurveKind::CovarianceGaussian { antennas, .. } => antennas,
        CurveKind::FasCoherent { .. } => 1,
    };
    let config = plan.point(value, antennas);
    let crb = match &spec.kind {
        CurveKind::FasCoherent { .. } => {
            let (ci, n, w) = plan.fas_key(curve, value);
            let moment = &moments[&(ci, n, w.to_bits())];
            Bound::from_result(crb_fas_from_moment(&config, moment))?
        }
        CurveKind::FpaCoherent { .. } => Bound::from_result(crb_fpa_coherent(&config))?,
        CurveKind::CovarianceOrthogonal { .. } => Bound::from_result(crb_covariance_orthogonal(&config, 0))?,
        CurveKind::CovarianceGaussian { pilot_draws, .. } => covariance_gaussian(plan, curve, &config, *pilot_draws)?,
    };
    Ok(SweepRow {
        axis_value: value,
        curve: spec.label(),
        crb,
        mse: None,
        std_error: None,
    })
}

/// Evaluates every curve at every grid point. Rows come back in
/// (grid, curve) order whatever the evaluation order was.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    if plan.curves.is_empty() {
        return Err(Error::Config("plan has no curves".into()));
    }
    let moments = inverse_moments(plan)?;
    let jobs: Vec<(f64, usize)> = plan
        .grid
        .iter()
        .flat_map(|v| (0..plan.curves.len()).map(move |c| (*v, c)))
        .collect();
    jobs.par_iter().map(|&(v, c)| evaluate(plan, &moments, v, c)).collect()
}

/// Monte-Carlo validation: one row per (SNR, scenario) with the matched bound,
/// the empirical MSE of the amplitude and its standard error.
pub fn run_validation(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let spec = plan
        .validation
        .as_ref()
        .ok_or_else(|| Error::Config("plan has no validation section".into()))?;
    let mut rows = Vec::new();
    for &snr in &plan.grid {
        for (si, s) in spec.scenarios.iter().enumerate() {
            let mut base = plan.base.clone();
            base.snr_db = snr;
            if let Some(l) = s.blocklength {
                base.blocklength = l;
            }
            if let Some(k) = s.users {
                base.users = k;
            }
            let config = base.system(s.antennas.unwrap_or(1));
            let block_spec = match s.scenario {
                Scenario::CoherentFas => {
                    let g = base.fas.geometry(
                        s.ports.unwrap_or(base.fas.ports),
                        s.aperture.unwrap_or(base.fas.aperture),
                    )?;
                    Some(block_partition(&g)?)
                }
                _ => None,
            };
            let mut options = s.options.clone();
            if options.inverse_trials == McOptions::default().inverse_trials {
                options.inverse_trials = plan.inverse_trials;
            }
            // the same seed at every SNR gives common random numbers along the axis
            let seed = plan.seed.wrapping_add(si as u64);
            let r = run_monte_carlo(s.scenario, &config, block_spec.as_ref(), spec.trials, seed, &options)?;
            rows.push(SweepRow {
                axis_value: snr,
                curve: s.label(),
                crb: Bound::Finite(r.crb),
                mse: Some(r.mse_b),
                std_error: Some(r.std_error),
            });
        }
    }
    Ok(rows)
}

fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let crb = match r.crb {
            Bound::Finite(v) => format_float(v),
            Bound::Infinite => "inf".into(),
        };
        w.write_record([
            r.axis_value.to_string(),
            r.curve.clone(),
            crb,
            r.mse.map(format_float).unwrap_or_default(),
            r.std_error.map(format_float).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(file))
}

/// Max-port density tabulated at `points` equally spaced `t` in `[0, t_max]`.
pub fn pdf_table(spec: &BlockSpec, t_max: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::Config(format!("tmax must be positive, got {t_max}")));
    }
    if points < 2 {
        return Err(Error::Config("need at least two points".into()));
    }
    (0..points)
        .into_par_iter()
        .map(|i| {
            let t = t_max * i as f64 / (points - 1) as f64;
            Ok((t, response_pdf(t, spec)?))
        })
        .collect()
}

pub fn write_pdf_csv<W: Write>(table: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["t", "pdf"]).map_err(io)?;
    for (t, f) in table {
        w.write_record([format_float(*t), format_float(*f)]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
