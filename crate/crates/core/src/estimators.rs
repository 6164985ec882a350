//! Unbiased estimators for the activity amplitudes and the Monte-Carlo
//! harness that compares their empirical MSE with the bounds.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_block_channel, BlockSpec};
use crate::coherent::{crb_fas_averaged, crb_fpa_coherent, EffectiveSignature};
use crate::covariance::{amplitude_jacobian_sq, crb_covariance_orthogonal, power_crb, PilotKind, PilotSet, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{complement_component, sample_complex_gaussian, spd_condition, CMatrix, CVector, StreamRng, MAX_CONDITION};

pub const MIN_MC_TRIALS: usize = 1_000;

/// Largest fraction of failed trials that is dropped instead of aborting the run.
pub const MAX_FAILURE_RATE: f64 = 1e-3;

const PILOT_STREAM: u64 = u64::MAX;
const BOUND_STREAM: u64 = u64::MAX - 1;

/// Least squares for real amplitudes: `b = Re(Phi^H Phi)^{-1} Re(Phi^H y)`.
/// The factorisation is kept so one signature matrix can serve many noise draws.
pub struct LsSolver {
    phi: EffectiveSignature,
    chol: Cholesky<f64, Dyn>,
}

impl LsSolver {
    pub fn new(phi: &EffectiveSignature) -> Result<Self> {
        let gram = phi.matrix().adjoint() * phi.matrix();
        let k = gram.nrows();
        let normal = DMatrix::from_fn(k, k, |i, j| 0.5 * (gram[(i, j)].re + gram[(j, i)].re));
        let cond = spd_condition(&normal);
        if !(cond < MAX_CONDITION) {
            return Err(Error::RankDeficient(format!(
                "LS normal matrix of {k} users has condition number {cond:e}"
            )));
        }
        let chol = Cholesky::new(normal)
            .ok_or_else(|| Error::RankDeficient("LS normal matrix is not positive definite".into()))?;
        Ok(Self { phi: phi.clone(), chol })
    }

    pub fn estimate(&self, y: &CVector) -> Result<DVector<f64>> {
        if y.len() != self.phi.blocklength() {
            return Err(Error::InvalidArgument(format!(
                "observation has length {}, expected {}",
                y.len(),
                self.phi.blocklength()
            )));
        }
        let rhs = (self.phi.matrix().adjoint() * y).map(|z| z.re);
        Ok(self.chol.solve(&rhs))
    }

    /// `[Re(Phi^H Phi)^{-1}]_kk`; times `sigma_z^2 / 2` this is the conditional CRB.
    pub fn inverse_diagonal(&self, k: usize) -> f64 {
        let mut e = DVector::zeros(self.phi.users());
        e[k] = 1.0;
        self.chol.solve(&e)[k]
    }
}

pub fn ls_estimate(phi: &EffectiveSignature, y: &CVector) -> Result<DVector<f64>> {
    LsSolver::new(phi)?.estimate(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    /// Unbiased power estimates, possibly negative.
    pub theta: DVector<f64>,
    /// `sqrt(max(theta, 0) / sigma_h^2)`
    pub b: DVector<f64>,
}

/// Moment estimator `theta = B^{-1} t` with `B = |S^H S|^2` (elementwise) and
/// `t_k = s_k^H (R - sigma_z^2 I) s_k`, where `R` is the sample covariance
/// over antennas. `y` holds one antenna per row (`M x L`).
pub fn moment_estimate(y: &CMatrix, pilots: &PilotSet, sigma_z2: f64, sigma_h2: f64) -> Result<MomentEstimate> {
    if y.ncols() != pilots.blocklength() || y.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "observation is {}x{}, expected M x {}",
            y.nrows(),
            y.ncols(),
            pilots.blocklength()
        )));
    }
    if !(sigma_h2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_h2 must be positive, got {sigma_h2}")));
    }
    let s = pilots.matrix();
    let k = s.ncols();
    let m = y.nrows() as f64;
    // (Y conj(S))[m, k] = s_k^H y_m
    let corr = y * s.map(|z| z.conj());
    let t = DVector::from_fn(k, |j, _| {
        corr.column(j).norm_squared() / m - sigma_z2 * s.column(j).norm_squared()
    });
    let gram = s.adjoint() * s;
    let b_mat = gram.map(|z| z.norm_sqr());
    let cond = spd_condition(&b_mat);
    if !(cond < MAX_CONDITION) {
        return Err(Error::PilotDegeneracy(format!(
            "squared pilot Gram matrix has condition number {cond:e}"
        )));
    }
    let theta = Cholesky::new(b_mat)
        .ok_or_else(|| Error::PilotDegeneracy("squared pilot Gram matrix is not positive definite".into()))?
        .solve(&t);
    let b = theta.map(|x| (x.max(0.0) / sigma_h2).sqrt());
    Ok(MomentEstimate { theta, b })
}

/// Coherent estimate for user `k` of an `M`-antenna array: null the other
/// pilots, then combine antennas with the known channel `h_k`:
/// `b = Re(sum_m conj(h_mk) u^H y_m) / (||h_k||^2 ||u||^2)` with `u = P_perp s_k`.
pub fn nulling_estimate(y: &CMatrix, pilots: &PilotSet, channel: &CVector, k: usize) -> Result<f64> {
    if y.ncols() != pilots.blocklength() || y.nrows() != channel.len() {
        return Err(Error::InvalidArgument(format!(
            "observation is {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            channel.len(),
            pilots.blocklength()
        )));
    }
    let u = complement_component(&pilots.interferers(k), &pilots.column(k))?;
    combine_nulled(y, &u, channel)
}

fn combine_nulled(y: &CMatrix, u: &CVector, channel: &CVector) -> Result<f64> {
    let energy = u.norm_squared() * channel.norm_squared();
    if !(energy > 0.0) {
        return Err(Error::PilotDegeneracy("target pilot is nulled completely".into()));
    }
    let per_antenna = y * u.map(|z| z.conj());
    Ok(channel.dotc(&per_antenna).re / energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    CoherentFas,
    CoherentFpa,
    CovarianceFpa,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CoherentFas => "coherent-fas",
            Scenario::CoherentFpa => "coherent-fpa",
            Scenario::CovarianceFpa => "covariance-fpa",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    /// Target user; the first active user when unset.
    pub target: Option<usize>,
    pub pilots: PilotKind,
    /// Draw one pilot set for the whole run instead of one per trial.
    pub fixed_pilots: bool,
    /// Draws used for `E[1/|g|^2]` in the analytic FAS bound.
    pub inverse_trials: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            target: None,
            pilots: PilotKind::Gaussian,
            fixed_pilots: false,
            inverse_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub scenario: Option<Scenario>,
    pub target: usize,
    /// Trials that entered the averages.
    pub trials: usize,
    pub failures: usize,
    pub mse_b: f64,
    /// Standard error of `mse_b`.
    pub std_error: f64,
    pub mean_estimate: f64,
    pub mse_theta: Option<f64>,
    pub std_error_theta: Option<f64>,
    pub mean_theta: Option<f64>,
    /// Standard error of `mean_theta`.
    pub mean_theta_std_error: Option<f64>,
    /// Conditional bound of each trial averaged over the same draws.
    pub crb: f64,
    pub crb_theta: Option<f64>,
    /// Closed-form or semi-analytic bound for the configuration.
    pub analytic_crb: Option<f64>,
}

impl McResult {
    pub fn relative_std_error(&self) -> f64 {
        self.std_error / self.mse_b
    }
}

struct Trial {
    b_hat: f64,
    theta_hat: Option<f64>,
    crb: f64,
    crb_theta: Option<f64>,
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn reduce(outcomes: Vec<Result<Trial>>) -> Result<(Vec<Trial>, usize)> {
    let total = outcomes.len();
    let mut kept = Vec::with_capacity(total);
    let mut first_error = None;
    for o in outcomes {
        match o {
            Ok(t) => kept.push(t),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let failures = total - kept.len();
    if failures as f64 > MAX_FAILURE_RATE * total as f64 || kept.len() < 2 {
        return Err(Error::NumericalAccuracy(format!(
            "{failures} of {total} trials failed; first failure: {}",
            first_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    Ok((kept, failures))
}

fn summarise(
    scenario: Option<Scenario>,
    target: usize,
    outcomes: Vec<Result<Trial>>,
    b_true: f64,
    theta_true: f64,
    analytic_crb: Option<f64>,
) -> Result<McResult> {
    let (kept, failures) = reduce(outcomes)?;
    let n = kept.len() as f64;
    let (mse_b, std_error) = mean_and_se(kept.iter().map(|t| (t.b_hat - b_true).powi(2)));
    let mean_estimate = kept.iter().map(|t| t.b_hat).sum::<f64>() / n;
    let crb = kept.iter().map(|t| t.crb).sum::<f64>() / n;
    let has_theta = kept.iter().all(|t| t.theta_hat.is_some());
    let (mse_theta, std_error_theta, mean_theta, mean_theta_std_error, crb_theta) = if has_theta {
        let (mse, se) = mean_and_se(kept.iter().map(|t| (t.theta_hat.unwrap() - theta_true).powi(2)));
        let (mean, mean_se) = mean_and_se(kept.iter().map(|t| t.theta_hat.unwrap()));
        let bound = kept.iter().map(|t| t.crb_theta.unwrap_or(f64::NAN)).sum::<f64>() / n;
        (Some(mse), Some(se), Some(mean), Some(mean_se), Some(bound).filter(|b| b.is_finite()))
    } else {
        (None, None, None, None, None)
    };
    Ok(McResult {
        scenario,
        target,
        trials: kept.len(),
        failures,
        mse_b,
        std_error,
        mean_estimate,
        mse_theta,
        std_error_theta,
        mean_theta,
        mean_theta_std_error,
        crb,
        crb_theta,
        analytic_crb,
    })
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_MC_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_MC_TRIALS} trials, got {trials}"
        )));
    }
    Ok(())
}

/// LS over many noise draws with `Phi` held fixed. The reported `crb` is
/// `[J^{-1}]_kk` of this `Phi`.
pub fn run_conditional_ls(
    phi: &EffectiveSignature,
    b: &[f64],
    sigma_z2: f64,
    target: usize,
    trials: usize,
    seed: u64,
) -> Result<McResult> {
    check_trials(trials)?;
    if b.len() != phi.users() || target >= phi.users() {
        return Err(Error::InvalidArgument("amplitude vector or target does not match Phi".into()));
    }
    let solver = LsSolver::new(phi)?;
    let crb = 0.5 * sigma_z2 * solver.inverse_diagonal(target);
    let clean = phi.matrix() * DVector::from_iterator(b.len(), b.iter().map(|x| Complex64::new(*x, 0.0)));
    let outcomes: Vec<Result<Trial>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::new(seed, i);
            let y = CVector::from_fn(clean.len(), |n, _| clean[n] + rng.complex_gaussian(sigma_z2));
            let est = solver.estimate(&y)?;
            Ok(Trial {
                b_hat: est[target],
                theta_hat: None,
                crb,
                crb_theta: None,
            })
        })
        .collect();
    summarise(None, target, outcomes, b[target], 0.0, Some(crb))
}

fn draw_pilots(config: &SystemConfig, kind: PilotKind, rng: &mut StreamRng) -> Result<PilotSet> {
    match kind {
        PilotKind::Gaussian => PilotSet::gaussian(config.blocklength, config.users, config.pbar, rng),
        PilotKind::Orthogonal => PilotSet::orthogonal(config.blocklength, config.users, config.pbar),
    }
}

fn complex_amplitudes(config: &SystemConfig) -> CVector {
    CVector::from_iterator(config.users, config.b.iter().map(|x| Complex64::new(*x, 0.0)))
}

/// Per-antenna observations `Y = H diag(b) S^T + Z` (`M x L`).
fn array_observation(h: &CMatrix, pilots: &PilotSet, config: &SystemConfig, rng: &mut StreamRng) -> Result<CMatrix> {
    let mut weighted = h.clone();
    for (k, b) in config.b.iter().enumerate() {
        weighted.column_mut(k).scale_mut(*b);
    }
    let noise = sample_complex_gaussian(config.antennas, config.blocklength, config.sigma_z2, rng)?;
    Ok(weighted * pilots.matrix().transpose() + noise)
}

/// Empirical MSE of the estimator matching `scenario` for user `k0`.
///
/// * coherent-fas: block-model FAS channels, least squares on `y = Phi b + z`.
/// * coherent-fpa: i.i.d. Rayleigh array, pilot nulling plus maximum-ratio combining.
/// * covariance-fpa: i.i.d. Rayleigh array, moment estimator.
///
/// Trial `i` uses stream `i` of `seed`, so results do not depend on thread count.
pub fn run_monte_carlo(
    scenario: Scenario,
    config: &SystemConfig,
    spec: Option<&BlockSpec>,
    trials: usize,
    seed: u64,
    options: &McOptions,
) -> Result<McResult> {
    config.validate()?;
    check_trials(trials)?;
    let target = match options.target {
        Some(k) if k < config.users => k,
        Some(k) => return Err(Error::InvalidArgument(format!("target {k} out of range"))),
        None => config
            .first_active()
            .ok_or_else(|| Error::DegenerateParameter("no active user to target".into()))?,
    };
    let b_true = config.b[target];
    let theta_true = config.sigma_h2 * b_true * b_true;
    let fixed = if options.fixed_pilots || options.pilots == PilotKind::Orthogonal {
        Some(draw_pilots(config, options.pilots, &mut StreamRng::new(seed, PILOT_STREAM))?)
    } else {
        None
    };
    let pilots_for = |rng: &mut StreamRng| -> Result<PilotSet> {
        match &fixed {
            Some(p) => Ok(p.clone()),
            None => draw_pilots(config, options.pilots, rng),
        }
    };

    match scenario {
        Scenario::CoherentFas => {
            let spec = spec.ok_or_else(|| Error::InvalidArgument("coherent-fas needs a block spec".into()))?;
            let analytic = crb_fas_averaged(
                config,
                spec,
                &mut StreamRng::new(seed, BOUND_STREAM),
                options.inverse_trials,
                None,
            )?
            .averaged;
            let amplitudes = complex_amplitudes(config);
            let outcomes: Vec<Result<Trial>> = (0..trials as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = StreamRng::new(seed, i);
                    let gains: Vec<Complex64> = (0..config.users)
                        .map(|_| sample_block_channel(spec, config.sigma_h2, &mut rng).selected_gain())
                        .collect();
                    let pilots = pilots_for(&mut rng)?;
                    let phi = EffectiveSignature::new(&pilots, &gains)?;
                    let clean = phi.matrix() * &amplitudes;
                    let y = CVector::from_fn(clean.len(), |n, _| clean[n] + rng.complex_gaussian(config.sigma_z2));
                    let solver = LsSolver::new(&phi)?;
                    Ok(Trial {
                        b_hat: solver.estimate(&y)?[target],
                        theta_hat: None,
                        crb: 0.5 * config.sigma_z2 * solver.inverse_diagonal(target),
                        crb_theta: None,
                    })
                })
                .collect();
            summarise(Some(scenario), target, outcomes, b_true, theta_true, Some(analytic))
        }
        Scenario::CoherentFpa => {
            let analytic = crb_fpa_coherent(config)?;
            let outcomes: Vec<Result<Trial>> = (0..trials as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = StreamRng::new(seed, i);
                    let h = sample_complex_gaussian(config.antennas, config.users, config.sigma_h2, &mut rng)?;
                    let pilots = pilots_for(&mut rng)?;
                    let y = array_observation(&h, &pilots, config, &mut rng)?;
                    let channel = h.column(target).clone_owned();
                    let u = complement_component(&pilots.interferers(target), &pilots.column(target))?;
                    let b_hat = combine_nulled(&y, &u, &channel)?;
                    Ok(Trial {
                        b_hat,
                        theta_hat: None,
                        crb: config.sigma_z2 / (2.0 * channel.norm_squared() * u.norm_squared()),
                        crb_theta: None,
                    })
                })
                .collect();
            summarise(Some(scenario), target, outcomes, b_true, theta_true, Some(analytic))
        }
        Scenario::CovarianceFpa => {
            let orthogonal = options.pilots == PilotKind::Orthogonal;
            let analytic = if orthogonal {
                Some(crb_covariance_orthogonal(config, target)?)
            } else {
                None
            };
            let jacobian = amplitude_jacobian_sq(config, target)?;
            let fixed_bound = match &fixed {
                Some(p) => Some(power_crb(p, config, target)?),
                None => None,
            };
            let outcomes: Vec<Result<Trial>> = (0..trials as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = StreamRng::new(seed, i);
                    let h = sample_complex_gaussian(config.antennas, config.users, config.sigma_h2, &mut rng)?;
                    let pilots = pilots_for(&mut rng)?;
                    let y = array_observation(&h, &pilots, config, &mut rng)?;
                    let est = moment_estimate(&y, &pilots, config.sigma_z2, config.sigma_h2)?;
                    let crb_theta = match fixed_bound {
                        Some(b) => b,
                        None => power_crb(&pilots, config, target)?,
                    };
                    Ok(Trial {
                        b_hat: est.b[target],
                        theta_hat: Some(est.theta[target]),
                        crb: crb_theta / jacobian,
                        crb_theta: Some(crb_theta),
                    })
                })
                .collect();
            summarise(Some(scenario), target, outcomes, b_true, theta_true, analytic)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signature(l: usize, k: usize, seed: u64) -> EffectiveSignature {
        let mut rng = StreamRng::new(seed, 0);
        let pilots = PilotSet::gaussian(l, k, 1.0, &mut rng).unwrap();
        let gains: Vec<Complex64> = (0..k).map(|_| rng.complex_gaussian(1.0)).collect();
        EffectiveSignature::new(&pilots, &gains).unwrap()
    }

    #[test]
    fn ls_recovers_noiseless_amplitudes() {
        let phi = signature(12, 5, 1);
        let b = [1.0, 0.0, -0.5, 2.0, 0.3];
        let y = phi.matrix() * DVector::from_iterator(5, b.iter().map(|x| Complex64::new(*x, 0.0)));
        let est = ls_estimate(&phi, &y).unwrap();
        for (e, t) in est.iter().zip(b.iter()) {
            assert!((e - t).abs() < 1e-10);
        }
    }

    #[test]
    fn ls_single_user_is_scalar_projection() {
        let phi = signature(8, 1, 2);
        let mut rng = StreamRng::new(2, 5);
        let y = CVector::from_fn(8, |_, _| rng.complex_gaussian(1.0));
        let est = ls_estimate(&phi, &y).unwrap();
        let col = phi.matrix().column(0);
        let expected = col.dotc(&y).re / col.norm_squared();
        assert!((est[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ls_rejects_dependent_signatures() {
        let phi = signature(6, 2, 3);
        let mut m = phi.matrix().clone().insert_column(2, Complex64::new(0.0, 0.0));
        let copy = m.column(0).clone_owned();
        m.column_mut(2).copy_from(&copy);
        let y = CVector::zeros(6);
        assert!(matches!(
            ls_estimate(&EffectiveSignature::from_matrix(m), &y),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn ls_inverse_diagonal_matches_dense_inverse() {
        let phi = signature(10, 4, 4);
        let solver = LsSolver::new(&phi).unwrap();
        let fim = crate::coherent::fim_coherent(&phi, 2.0).unwrap();
        let inv = fim.try_inverse().unwrap();
        for k in 0..4 {
            assert!((solver.inverse_diagonal(k) / inv[(k, k)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn moment_estimator_noise_free_orthogonal_user() {
        // many antennas, no noise: theta concentrates on sigma_h^2 b^2
        let pilots = PilotSet::orthogonal(8, 1, 1.0).unwrap();
        let mut cfg = SystemConfig::new(8, 1, 10_000);
        cfg.b = vec![0.8];
        cfg.sigma_h2 = 1.5;
        cfg.sigma_z2 = 1e-300;
        let mut rng = StreamRng::new(5, 0);
        let h = sample_complex_gaussian(cfg.antennas, 1, cfg.sigma_h2, &mut rng).unwrap();
        let y = (h * Complex64::new(0.8, 0.0)) * pilots.matrix().transpose();
        let est = moment_estimate(&y, &pilots, 0.0, cfg.sigma_h2).unwrap();
        assert!((est.theta[0] / (1.5 * 0.64) - 1.0).abs() < 0.02);
        assert!((est.b[0] / 0.8 - 1.0).abs() < 0.01);
    }

    #[test]
    fn moment_estimator_keeps_negative_powers() {
        let pilots = PilotSet::orthogonal(8, 2, 1.0).unwrap();
        let y = CMatrix::zeros(3, 8);
        let est = moment_estimate(&y, &pilots, 1.0, 1.0).unwrap();
        assert!(est.theta.iter().all(|t| (*t + 1.0 / 8.0).abs() < 1e-12));
        assert!(est.b.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn moment_estimator_rejects_degenerate_pilots() {
        let col = PilotSet::orthogonal(4, 1, 1.0).unwrap().matrix().clone();
        let mut m = CMatrix::zeros(4, 2);
        m.column_mut(0).copy_from(&col.column(0));
        m.column_mut(1).copy_from(&col.column(0));
        let pilots = PilotSet::from_matrix(m, PilotKind::Gaussian, 1.0);
        let y = CMatrix::zeros(2, 4);
        assert!(matches!(moment_estimate(&y, &pilots, 1.0, 1.0), Err(Error::PilotDegeneracy(_))));
    }

    #[test]
    fn moment_estimator_unbiased_at_null() {
        let mut cfg = SystemConfig::new(16, 4, 4);
        cfg.b = vec![0.0; 4];
        cfg.b[0] = 0.0;
        let pilots = PilotSet::gaussian(16, 4, 1.0, &mut StreamRng::new(6, 0)).unwrap();
        let h = CMatrix::zeros(4, 4);
        let n = 10_000;
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = StreamRng::new(6, 1 + i);
                let y = array_observation(&h, &pilots, &cfg, &mut rng).unwrap();
                moment_estimate(&y, &pilots, cfg.sigma_z2, cfg.sigma_h2).unwrap().theta[0]
            })
            .collect();
        let (mean, se) = mean_and_se(values.iter().copied());
        assert!(mean.abs() < 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn nulling_estimate_is_exact_without_noise() {
        let mut cfg = SystemConfig::new(12, 3, 4);
        cfg.b = vec![0.7, 1.0, 0.4];
        cfg.sigma_z2 = 1e-300;
        let mut rng = StreamRng::new(7, 0);
        let pilots = PilotSet::gaussian(12, 3, 1.0, &mut rng).unwrap();
        let h = sample_complex_gaussian(4, 3, 1.0, &mut rng).unwrap();
        let mut weighted = h.clone();
        for (k, b) in cfg.b.iter().enumerate() {
            weighted.column_mut(k).scale_mut(*b);
        }
        let y = weighted * pilots.matrix().transpose();
        for k in 0..3 {
            let est = nulling_estimate(&y, &pilots, &h.column(k).clone_owned(), k).unwrap();
            assert!((est - cfg.b[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn conditional_ls_is_efficient_small() {
        let phi = signature(40, 6, 8);
        let res = run_conditional_ls(&phi, &[1.0; 6], 1.0, 0, 20_000, 8).unwrap();
        let ratio = res.mse_b / res.crb;
        assert!((ratio - 1.0).abs() < 4.0 * res.relative_std_error(), "{ratio}");
    }

    #[test]
    fn identical_seeds_give_identical_results() {
        let cfg = SystemConfig::new(32, 4, 4);
        let a = run_monte_carlo(Scenario::CovarianceFpa, &cfg, None, 1_000, 3, &McOptions::default()).unwrap();
        let b = run_monte_carlo(Scenario::CovarianceFpa, &cfg, None, 1_000, 3, &McOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn trial_count_guard() {
        let cfg = SystemConfig::new(32, 4, 4);
        assert!(run_monte_carlo(Scenario::CoherentFpa, &cfg, None, 999, 1, &McOptions::default()).is_err());
        assert!(run_monte_carlo(Scenario::CoherentFas, &cfg, None, 1_000, 1, &McOptions::default()).is_err());
    }

    #[test]
    fn short_and_long_runs_agree() {
        let cfg = SystemConfig::new(32, 4, 4).with_snr_db(0.0);
        let short = run_monte_carlo(Scenario::CoherentFpa, &cfg, None, 1_000, 11, &McOptions::default()).unwrap();
        let long = run_monte_carlo(Scenario::CoherentFpa, &cfg, None, 10_000, 11, &McOptions::default()).unwrap();
        let combined = (short.std_error.powi(2) + long.std_error.powi(2)).sqrt();
        assert!((short.mse_b - long.mse_b).abs() < 3.0 * combined);
    }

    #[test]
    fn fpa_nulling_mse_tracks_its_conditional_bound() {
        let cfg = SystemConfig::new(32, 8, 4).with_snr_db(-5.0);
        let res = run_monte_carlo(Scenario::CoherentFpa, &cfg, None, 10_000, 12, &McOptions::default()).unwrap();
        assert!((res.mse_b / res.crb - 1.0).abs() < 4.0 * res.relative_std_error());
        // E over pilots of 1/||P s||^2 is 1/(p (L-K)); the closed form uses (L-1)/(L (L-K))
        let expected = res.analytic_crb.unwrap() * 32.0 / 31.0;
        assert!((res.mse_b / expected - 1.0).abs() < 4.0 * res.relative_std_error());
    }
}
