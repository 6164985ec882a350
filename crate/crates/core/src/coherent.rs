//! Coherent detection with known channels.
//!
//! With the effective signatures `phi_k = g_k s_k` stacked into `Phi`, the
//! observation `y = Phi b + z` is linear in the real amplitudes and
//! `J = (2 / sigma_z^2) Re(Phi^H Phi)`. The Schur complement of `J` gives
//! `[J^{-1}]_kk = sigma_z^2 / (2 ||phi_k||^2 (1 - rho_k^2))`, where `rho_k^2` is
//! the fraction of `phi_k` lying in the span of the other signatures.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::{expected_inverse_response, BlockSpec, ChannelDraw, InverseMoment};
use crate::covariance::{PilotSet, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{span_energy, spd_inverse, CMatrix, StreamRng};

/// The `L x K` matrix of effective signatures `g_k s_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSignature {
    phi: CMatrix,
}

impl EffectiveSignature {
    pub fn new(pilots: &PilotSet, gains: &[Complex64]) -> Result<Self> {
        if gains.len() != pilots.users() {
            return Err(Error::InvalidArgument(format!(
                "{} gains for {} users",
                gains.len(),
                pilots.users()
            )));
        }
        let mut phi = pilots.matrix().clone();
        for (k, g) in gains.iter().enumerate() {
            phi.column_mut(k).iter_mut().for_each(|z| *z *= *g);
        }
        Ok(Self { phi })
    }

    pub fn from_matrix(phi: CMatrix) -> Self {
        Self { phi }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.phi
    }

    pub fn users(&self) -> usize {
        self.phi.ncols()
    }

    pub fn blocklength(&self) -> usize {
        self.phi.nrows()
    }

    /// `||phi_k||^2`
    pub fn energy(&self, k: usize) -> f64 {
        self.phi.column(k).norm_squared()
    }
}

/// Averaged coherent bound for one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherentBound {
    /// Bound for a supplied fading draw, averaged over the pilot geometry only.
    pub conditional: Option<f64>,
    /// `E[1 / (1 - rho^2)] = (L-1)/(L-K)`.
    pub penalty: f64,
    /// Bound averaged over both pilots and fading.
    pub averaged: f64,
    pub inverse_response: InverseMoment,
}

/// `J = (2 / sigma_z^2) Re(Phi^H Phi)`
pub fn fim_coherent(phi: &EffectiveSignature, sigma_z2: f64) -> Result<DMatrix<f64>> {
    if !(sigma_z2 > 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma_z2}")));
    }
    let gram = phi.matrix().adjoint() * phi.matrix();
    let k = gram.nrows();
    let scale = 2.0 / sigma_z2;
    Ok(DMatrix::from_fn(k, k, |i, j| {
        scale * 0.5 * (gram[(i, j)].re + gram[(j, i)].re)
    }))
}

fn check_index(phi: &EffectiveSignature, k: usize) -> Result<()> {
    if k >= phi.users() {
        return Err(Error::InvalidArgument(format!("user {k} out of range 0..{}", phi.users())));
    }
    if phi.users() > phi.blocklength() {
        return Err(Error::Divergence(format!(
            "{} signatures saturate the {}-dimensional pilot space",
            phi.users(),
            phi.blocklength()
        )));
    }
    if phi.energy(k) == 0.0 {
        return Err(Error::DegenerateParameter(format!("signature of user {k} is zero")));
    }
    Ok(())
}

/// `rho_k^2 = ||P phi_k||^2 / ||phi_k||^2` with `P` the projector onto the
/// span of the interfering signatures.
pub fn interference_factor(phi: &EffectiveSignature, k: usize) -> Result<f64> {
    check_index(phi, k)?;
    if phi.users() == 1 {
        return Ok(0.0);
    }
    let others = phi.matrix().clone().remove_column(k);
    let v = phi.matrix().column(k).clone_owned();
    Ok((span_energy(&others, &v)? / phi.energy(k)).clamp(0.0, 1.0))
}

/// Same quantity via block inversion of the Gram matrix `G = Phi^H Phi`:
/// `rho_k^2 = g^H G_{-k}^{-1} g / G_kk` with `g` the k-th column of `G`
/// without its diagonal entry.
pub fn interference_factor_gram(phi: &EffectiveSignature, k: usize) -> Result<f64> {
    check_index(phi, k)?;
    if phi.users() == 1 {
        return Ok(0.0);
    }
    let gram = phi.matrix().adjoint() * phi.matrix();
    let rest = gram.clone().remove_row(k).remove_column(k);
    let g = gram.column(k).clone_owned().remove_row(k);
    let x = rest
        .lu()
        .solve(&g)
        .ok_or_else(|| Error::SingularMatrix("interfering signatures are linearly dependent".into()))?;
    Ok((g.dotc(&x).re / gram[(k, k)].re).clamp(0.0, 1.0))
}

/// Interference factor of the real-amplitude FIM,
/// `v^T J_{-k}^{-1} v / J_kk`, so that `[J^{-1}]_kk = sigma_z^2 / (2 ||phi_k||^2 (1 - rho^2))`
/// holds exactly.
///
/// Only the in-phase part of the interference can mimic a real amplitude, so
/// this never exceeds [`interference_factor`]. The two agree for real-valued
/// signatures.
pub fn real_interference_factor(phi: &EffectiveSignature, k: usize) -> Result<f64> {
    check_index(phi, k)?;
    let fim = fim_coherent(phi, 2.0)?;
    if fim.nrows() == 1 {
        return Ok(0.0);
    }
    let rest = fim.clone().remove_row(k).remove_column(k);
    let v = fim.column(k).clone_owned().remove_row(k);
    let inv = spd_inverse(&rest)?;
    Ok(((v.transpose() * inv * &v)[(0, 0)] / fim[(k, k)]).clamp(0.0, 1.0))
}

/// `sigma_z^2 / (2 E |g|^2) / (1 - rho^2)` where `E` is the pilot energy
/// (exact `||s_k||^2` or its mean `L pbar`).
pub fn crb_coherent_conditional(gain: Complex64, pilot_energy: f64, sigma_z2: f64, rho2: f64) -> Result<f64> {
    if !(rho2 >= 0.0) || rho2.is_nan() {
        return Err(Error::InvalidArgument(format!("interference factor must be in [0, 1), got {rho2}")));
    }
    if rho2 >= 1.0 {
        return Err(Error::Divergence(format!(
            "signature lies in the interference span (rho^2 = {rho2})"
        )));
    }
    let energy = pilot_energy * gain.norm_sqr();
    if !(energy > 0.0) {
        return Err(Error::DegenerateParameter("zero effective signature energy".into()));
    }
    if !(sigma_z2 > 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma_z2}")));
    }
    Ok(sigma_z2 / (2.0 * energy) / (1.0 - rho2))
}

/// `E[1/(1-rho^2)] = (L-1)/(L-K)` for i.i.d. Gaussian pilots, where
/// `rho^2 ~ Beta(K-1, L-K+1)`.
pub fn expected_interference_penalty(blocklength: usize, users: usize) -> Result<f64> {
    if users == 0 || blocklength == 0 {
        return Err(Error::InvalidArgument("need at least one user and a non-empty pilot".into()));
    }
    if users >= blocklength {
        return Err(Error::Divergence(format!(
            "K = {users} >= L = {blocklength}: the interference penalty has no finite mean"
        )));
    }
    Ok((blocklength - 1) as f64 / (blocklength - users) as f64)
}

/// Coherent bound with FAS port selection, averaged over Gaussian pilots and
/// the max-port gain: `sigma_z^2 / (2 L pbar) (L-1)/(L-K) E[1/|g|^2]`.
///
/// `E[1/|g|^2]` is estimated by Monte Carlo from the block model. A
/// non-converged estimate is an error rather than a silently biased bound.
pub fn crb_fas_averaged(
    config: &SystemConfig,
    spec: &BlockSpec,
    rng: &mut StreamRng,
    trials: usize,
    draw: Option<&ChannelDraw>,
) -> Result<CoherentBound> {
    config.validate()?;
    expected_interference_penalty(config.blocklength, config.users)?;
    let inverse = expected_inverse_response(spec, config.sigma_h2, rng, trials)?;
    let averaged = crb_fas_from_moment(config, &inverse)?;
    let penalty = expected_interference_penalty(config.blocklength, config.users)?;
    let scale = config.sigma_z2 / (2.0 * config.blocklength as f64 * config.pbar) * penalty;
    let conditional = draw.map(|d| scale / d.selected_gain().norm_sqr());
    Ok(CoherentBound {
        conditional,
        penalty,
        averaged,
        inverse_response: inverse,
    })
}

/// The averaged FAS bound for a precomputed `E[1/|g|^2]`, so one estimate can
/// serve a whole SNR or user sweep.
pub fn crb_fas_from_moment(config: &SystemConfig, inverse: &InverseMoment) -> Result<f64> {
    config.validate()?;
    let penalty = expected_interference_penalty(config.blocklength, config.users)?;
    if !inverse.converged {
        return Err(Error::NumericalAccuracy(format!(
            "E[1/|g|^2] did not converge (mean {:e}, std error {:e}, tail index {:.2})",
            inverse.mean, inverse.std_error, inverse.tail_index
        )));
    }
    Ok(config.sigma_z2 / (2.0 * config.blocklength as f64 * config.pbar) * penalty * inverse.mean)
}

/// Coherent bound for an `M`-antenna fixed array with maximum-ratio
/// combining and interference nulling:
/// `sigma_z^2 / (2 pbar L) (L-1)/(L-K) / ((M-1) sigma_h^2)`.
pub fn crb_fpa_coherent(config: &SystemConfig) -> Result<f64> {
    config.validate()?;
    if config.antennas <= 1 {
        return Err(Error::UndefinedMoment(format!(
            "E[1/||h||^2] is infinite for M = {}",
            config.antennas
        )));
    }
    let penalty = expected_interference_penalty(config.blocklength, config.users)?;
    let l = config.blocklength as f64;
    Ok(config.sigma_z2 / (2.0 * config.pbar * l) * penalty
        / ((config.antennas - 1) as f64 * config.sigma_h2))
}

/// `||P_perp s_k||^2`, the pilot energy left after nulling the other users.
pub fn projected_pilot_energy(pilots: &PilotSet, k: usize) -> Result<f64> {
    if k >= pilots.users() {
        return Err(Error::InvalidArgument(format!("user {k} out of range 0..{}", pilots.users())));
    }
    if pilots.users() > pilots.blocklength() {
        return Err(Error::Divergence(format!(
            "{} pilots saturate a length-{} block",
            pilots.users(),
            pilots.blocklength()
        )));
    }
    let s = pilots.column(k);
    let total = s.norm_squared();
    if pilots.users() == 1 {
        return Ok(total);
    }
    let inside = span_energy(&pilots.interferers(k), &s)?;
    Ok((total - inside).max(0.0))
}

/// Mean of [`projected_pilot_energy`] for i.i.d. Gaussian pilots.
pub fn expected_projected_energy(blocklength: usize, users: usize, pbar: f64) -> Result<f64> {
    let penalty = expected_interference_penalty(blocklength, users)?;
    Ok(pbar * blocklength as f64 / penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::orthogonal_projector;

    fn pilots(l: usize, k: usize, seed: u64) -> PilotSet {
        PilotSet::gaussian(l, k, 1.0, &mut StreamRng::new(seed, 0)).unwrap()
    }

    fn gains(k: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = StreamRng::new(seed, 1);
        (0..k).map(|_| rng.complex_gaussian(1.0)).collect()
    }

    #[test]
    fn fim_is_symmetric_and_scales_with_noise() {
        let phi = EffectiveSignature::new(&pilots(10, 4, 1), &gains(4, 1)).unwrap();
        let a = fim_coherent(&phi, 1.0).unwrap();
        let b = fim_coherent(&phi, 0.5).unwrap();
        assert_eq!(a, a.transpose());
        assert!((b - a * 2.0).amax() < 1e-12);
    }

    #[test]
    fn fim_matches_finite_difference_hessian() {
        // -log p(y; b) = ||y - Phi b||^2 / sigma^2 + const
        let (l, k, sigma2) = (8, 3, 0.7);
        let phi = EffectiveSignature::new(&pilots(l, k, 2), &gains(k, 2)).unwrap();
        let mut rng = StreamRng::new(2, 9);
        let y: Vec<Complex64> = (0..l).map(|_| rng.complex_gaussian(1.0)).collect();
        let nll = |b: &[f64]| -> f64 {
            (0..l)
                .map(|n| {
                    let mut r = y[n];
                    for (j, bj) in b.iter().enumerate() {
                        r -= phi.matrix()[(n, j)] * *bj;
                    }
                    r.norm_sqr()
                })
                .sum::<f64>()
                / sigma2
        };
        let b0 = vec![0.3, -0.2, 0.8];
        let h = 1e-3;
        let j = fim_coherent(&phi, sigma2).unwrap();
        for i in 0..k {
            for c in 0..k {
                let at = |di: f64, dc: f64| {
                    let mut b = b0.clone();
                    b[i] += di;
                    b[c] += dc;
                    nll(&b)
                };
                let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                assert!((fd - j[(i, c)]).abs() < 1e-6 * j[(i, i)].max(1.0), "({i},{c}) {fd} vs {}", j[(i, c)]);
            }
        }
    }

    #[test]
    fn projection_and_block_inversion_agree() {
        for seed in 0..20 {
            let k_users = 2 + (seed as usize % 7);
            let phi = EffectiveSignature::new(&pilots(10, k_users, seed), &gains(k_users, seed)).unwrap();
            for k in 0..k_users {
                let a = interference_factor(&phi, k).unwrap();
                let b = interference_factor_gram(&phi, k).unwrap();
                assert!((a - b).abs() < 1e-9, "seed {seed} user {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn real_factor_reproduces_fim_inverse() {
        let phi = EffectiveSignature::new(&pilots(12, 5, 4), &gains(5, 4)).unwrap();
        let sigma2 = 0.4;
        let inv = spd_inverse(&fim_coherent(&phi, sigma2).unwrap()).unwrap();
        for k in 0..5 {
            let real = real_interference_factor(&phi, k).unwrap();
            let bound = sigma2 / (2.0 * phi.energy(k) * (1.0 - real));
            assert!((bound / inv[(k, k)] - 1.0).abs() < 1e-9);
            assert!(real <= interference_factor(&phi, k).unwrap() + 1e-12);
        }
    }

    #[test]
    fn real_signatures_collapse_both_factors() {
        let mut rng = StreamRng::new(3, 0);
        let phi = EffectiveSignature::from_matrix(CMatrix::from_fn(12, 5, |_, _| {
            Complex64::new(rng.standard_normal(), 0.0)
        }));
        for k in 0..5 {
            let a = interference_factor(&phi, k).unwrap();
            let b = real_interference_factor(&phi, k).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn factor_is_gain_invariant_and_bounded() {
        let p = pilots(10, 4, 5);
        let a = EffectiveSignature::new(&p, &gains(4, 5)).unwrap();
        let b = EffectiveSignature::new(&p, &gains(4, 6)).unwrap();
        for k in 0..4 {
            let ra = interference_factor(&a, k).unwrap();
            let rb = interference_factor(&b, k).unwrap();
            assert!((0.0..1.0).contains(&ra));
            assert!((ra - rb).abs() < 1e-10);
        }
    }

    #[test]
    fn single_user_has_no_interference() {
        let phi = EffectiveSignature::new(&pilots(5, 1, 7), &[Complex64::new(0.5, 0.5)]).unwrap();
        assert_eq!(interference_factor(&phi, 0).unwrap(), 0.0);
    }

    #[test]
    fn saturated_span_is_an_error() {
        let phi = EffectiveSignature::new(&pilots(4, 5, 8), &gains(5, 8)).unwrap();
        assert!(matches!(interference_factor(&phi, 0), Err(Error::Divergence(_))));
    }

    #[test]
    fn conditional_bound_values() {
        let v = crb_coherent_conditional(Complex64::new(1.0, 0.0), 100.0, 1.0, 0.0).unwrap();
        assert!((v - 0.005).abs() < 1e-15);
        assert!(matches!(
            crb_coherent_conditional(Complex64::new(1.0, 0.0), 100.0, 1.0, 1.0),
            Err(Error::Divergence(_))
        ));
        let a = crb_coherent_conditional(Complex64::new(0.3, 0.4), 50.0, 0.2, 0.3).unwrap();
        let b = crb_coherent_conditional(Complex64::new(0.3, 0.4), 50.0, 0.2, 0.6).unwrap();
        assert!(b > a);
    }

    #[test]
    fn penalty_values() {
        assert!((expected_interference_penalty(100, 50).unwrap() - 99.0 / 50.0).abs() < 1e-15);
        assert_eq!(expected_interference_penalty(100, 1).unwrap(), 1.0);
        assert!(matches!(expected_interference_penalty(10, 10), Err(Error::Divergence(_))));
        let mut prev = 0.0;
        for k in 1..100 {
            let p = expected_interference_penalty(100, k).unwrap();
            assert!(p > prev);
            prev = p;
        }
        assert!((expected_interference_penalty(100, 99).unwrap() / expected_interference_penalty(100, 50).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn fpa_closed_form_value() {
        let mut cfg = SystemConfig::new(100, 50, 10);
        cfg.sigma_z2 = 1.0;
        let v = crb_fpa_coherent(&cfg).unwrap();
        assert!((v - 1.0 / 200.0 * 1.98 / 9.0).abs() < 1e-15);
        assert!((v - 0.0011).abs() < 1e-6);
        cfg.antennas = 1;
        assert!(matches!(crb_fpa_coherent(&cfg), Err(Error::UndefinedMoment(_))));
    }

    #[test]
    fn fpa_bound_falls_with_antennas() {
        let mut prev = f64::INFINITY;
        for m in 2..20 {
            let v = crb_fpa_coherent(&SystemConfig::new(64, 10, m)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn projected_energy_agrees_with_explicit_projector() {
        let p = pilots(9, 4, 10);
        for k in 0..4 {
            let perp = orthogonal_projector(&p.interferers(k)).unwrap();
            let explicit = (perp * p.column(k)).norm_squared();
            assert!((projected_pilot_energy(&p, k).unwrap() - explicit).abs() < 1e-9 * explicit);
        }
    }

    #[test]
    fn pilot_inside_interference_span_has_no_energy() {
        let base = pilots(8, 3, 11);
        let mut m = CMatrix::zeros(8, 4);
        m.columns_mut(0, 3).copy_from(base.matrix());
        let combo = base.matrix().column(0) * Complex64::new(0.5, -1.0) + base.matrix().column(2) * Complex64::new(2.0, 0.0);
        m.column_mut(3).copy_from(&combo);
        let p = PilotSet::from_matrix(m, crate::covariance::PilotKind::Gaussian, 1.0);
        assert!(projected_pilot_energy(&p, 3).unwrap() < 1e-9);
    }

    #[test]
    fn orthogonal_pilots_keep_full_energy() {
        let p = PilotSet::orthogonal(16, 6, 1.0).unwrap();
        for k in 0..6 {
            assert!((projected_pilot_energy(&p, k).unwrap() - 16.0).abs() < 1e-9);
        }
    }
}
