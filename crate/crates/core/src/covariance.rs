//! Covariance-based activity detection with an M-antenna fixed-position array.
//!
//! Each antenna observes `y_m ~ CN(0, R)` with
//! `R = sum_k theta_k s_k s_k^H + sigma_z^2 I` and `theta_k = sigma_h^2 b_k^2`.
//! The Fisher information for `theta` follows from the Slepian-Bangs formula,
//! `[J]_ij = M |s_i^H R^{-1} s_j|^2`, and is mapped to the amplitude domain
//! with the Jacobian `2 sigma_h^2 b_k`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_complex_gaussian, spd_condition, spd_inverse_entry, CMatrix, CVector, StreamRng};

/// Scalar parameters of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Pilot length `L`.
    pub blocklength: usize,
    /// Number of users `K`.
    pub users: usize,
    /// Receive antennas `M`.
    pub antennas: usize,
    /// Pilot symbol power `p`.
    pub pbar: f64,
    pub sigma_z2: f64,
    pub sigma_h2: f64,
    /// Activity amplitudes `b_k`, one per user.
    pub b: Vec<f64>,
}

impl SystemConfig {
    /// All users active with `b_k = 1`, unit powers.
    pub fn new(blocklength: usize, users: usize, antennas: usize) -> Self {
        Self {
            blocklength,
            users,
            antennas,
            pbar: 1.0,
            sigma_z2: 1.0,
            sigma_h2: 1.0,
            b: vec![1.0; users],
        }
    }

    /// Sets the noise variance from an SNR in dB with the pilot power held fixed.
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.sigma_z2 = self.pbar * 10f64.powf(-snr_db / 10.0);
        self
    }

    pub fn with_users(mut self, users: usize) -> Self {
        let amplitude = self.b.first().copied().unwrap_or(1.0);
        self.users = users;
        self.b = vec![amplitude; users];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocklength < 2 {
            return Err(Error::InvalidArgument(format!(
                "blocklength must be at least 2, got {}",
                self.blocklength
            )));
        }
        if self.users == 0 || self.antennas == 0 {
            return Err(Error::InvalidArgument("need at least one user and one antenna".into()));
        }
        for (name, v) in [("pbar", self.pbar), ("sigma_z2", self.sigma_z2), ("sigma_h2", self.sigma_h2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.b.len() != self.users {
            return Err(Error::InvalidArgument(format!(
                "expected {} activity amplitudes, got {}",
                self.users,
                self.b.len()
            )));
        }
        Ok(())
    }

    /// `gamma = pbar / sigma_z^2`
    pub fn snr(&self) -> f64 {
        self.pbar / self.sigma_z2
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * self.snr().log10()
    }

    /// Effective powers `theta_k = sigma_h^2 b_k^2`.
    pub fn theta(&self) -> Vec<f64> {
        self.b.iter().map(|b| self.sigma_h2 * b * b).collect()
    }

    /// Index of the first active user.
    pub fn first_active(&self) -> Option<usize> {
        self.b.iter().position(|&b| b != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PilotKind {
    #[default]
    Gaussian,
    Orthogonal,
}

/// Pilot matrix stored column-per-user (`L x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSet {
    s: CMatrix,
    kind: PilotKind,
    pbar: f64,
}

impl PilotSet {
    /// i.i.d. CN(0, pbar) entries.
    pub fn gaussian(blocklength: usize, users: usize, pbar: f64, rng: &mut StreamRng) -> Result<Self> {
        Ok(Self {
            s: sample_complex_gaussian(blocklength, users, pbar, rng)?,
            kind: PilotKind::Gaussian,
            pbar,
        })
    }

    /// First `users` columns of the unitary DFT matrix scaled by `sqrt(L pbar)`,
    /// so `S^H S = L pbar I`.
    pub fn orthogonal(blocklength: usize, users: usize, pbar: f64) -> Result<Self> {
        if users > blocklength {
            return Err(Error::InvalidArgument(format!(
                "cannot build {users} orthogonal pilots of length {blocklength}"
            )));
        }
        if users == 0 || !(pbar > 0.0) {
            return Err(Error::InvalidArgument("need at least one user and positive power".into()));
        }
        let l = blocklength as f64;
        let amp = pbar.sqrt();
        let s = CMatrix::from_fn(blocklength, users, |n, k| {
            // reduce the phase index mod L to keep the argument small
            let idx = (n * k) % blocklength;
            Complex64::from_polar(amp, -2.0 * std::f64::consts::PI * idx as f64 / l)
        });
        Ok(Self {
            s,
            kind: PilotKind::Orthogonal,
            pbar,
        })
    }

    pub fn from_matrix(s: CMatrix, kind: PilotKind, pbar: f64) -> Self {
        Self { s, kind, pbar }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.s
    }

    pub fn kind(&self) -> PilotKind {
        self.kind
    }

    pub fn pbar(&self) -> f64 {
        self.pbar
    }

    pub fn blocklength(&self) -> usize {
        self.s.nrows()
    }

    pub fn users(&self) -> usize {
        self.s.ncols()
    }

    pub fn column(&self, k: usize) -> CVector {
        self.s.column(k).clone_owned()
    }

    /// `||s_k||^2`
    pub fn energy(&self, k: usize) -> f64 {
        self.s.column(k).norm_squared()
    }

    /// `L pbar`, the mean pilot energy.
    pub fn nominal_energy(&self) -> f64 {
        self.blocklength() as f64 * self.pbar
    }

    /// The `L x (K-1)` matrix of every pilot except user `k`.
    pub fn interferers(&self, k: usize) -> CMatrix {
        self.s.clone().remove_column(k)
    }

    /// Pilots of the first `users` users.
    pub fn truncated(&self, users: usize) -> Self {
        Self {
            s: self.s.columns(0, users).clone_owned(),
            kind: self.kind,
            pbar: self.pbar,
        }
    }
}

fn check_theta(pilots: &PilotSet, theta: &[f64], sigma_z2: f64) -> Result<()> {
    if theta.len() != pilots.users() {
        return Err(Error::InvalidArgument(format!(
            "{} effective powers for {} users",
            theta.len(),
            pilots.users()
        )));
    }
    if theta.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidArgument("effective powers must be non-negative".into()));
    }
    if !(sigma_z2 > 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma_z2}")));
    }
    Ok(())
}

/// `R = S diag(theta) S^H + sigma_z^2 I`
pub fn model_covariance(pilots: &PilotSet, theta: &[f64], sigma_z2: f64) -> Result<CMatrix> {
    check_theta(pilots, theta, sigma_z2)?;
    let s = pilots.matrix();
    let l = s.nrows();
    let mut scaled = s.clone();
    for (k, t) in theta.iter().enumerate() {
        scaled.column_mut(k).scale_mut(*t);
    }
    let mut r = scaled * s.adjoint();
    for i in 0..l {
        r[(i, i)] += Complex64::new(sigma_z2, 0.0);
    }
    Ok(r)
}

/// `S^H R^{-1} S` by an `L x L` Cholesky solve.
pub fn quadratic_forms_direct(pilots: &PilotSet, theta: &[f64], sigma_z2: f64) -> Result<CMatrix> {
    let r = model_covariance(pilots, theta, sigma_z2)?;
    let chol = r
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix("model covariance is not positive definite".into()))?;
    Ok(pilots.matrix().adjoint() * chol.solve(pilots.matrix()))
}

/// `S^H R^{-1} S = G (diag(theta) G + sigma_z^2 I)^{-1}` with `G = S^H S`,
/// which only needs a `K x K` solve.
pub fn quadratic_forms_reduced(pilots: &PilotSet, theta: &[f64], sigma_z2: f64) -> Result<CMatrix> {
    check_theta(pilots, theta, sigma_z2)?;
    let gram = pilots.matrix().ad_mul(pilots.matrix());
    let k = gram.nrows();
    let mut inner = gram.clone();
    for (i, t) in theta.iter().enumerate() {
        inner.row_mut(i).scale_mut(*t);
        inner[(i, i)] += Complex64::new(sigma_z2, 0.0);
    }
    // G X^{-1} = (X^{-T} G^T)^T; solve X^T Z = G^T instead of inverting X
    let lu = inner.transpose().lu();
    let z = lu
        .solve(&gram.transpose())
        .ok_or_else(|| Error::SingularMatrix(format!("reduced {k}x{k} system is singular")))?;
    Ok(z.transpose())
}

/// `S^H R^{-1} S`, choosing the cheaper of the two algebraic routes.
pub fn quadratic_forms(pilots: &PilotSet, theta: &[f64], sigma_z2: f64) -> Result<CMatrix> {
    if pilots.users() < pilots.blocklength() {
        quadratic_forms_reduced(pilots, theta, sigma_z2)
    } else {
        quadratic_forms_direct(pilots, theta, sigma_z2)
    }
}

/// Fisher information for `theta` from `M` independent antennas.
pub fn fim_covariance(pilots: &PilotSet, theta: &[f64], sigma_z2: f64, antennas: usize) -> Result<DMatrix<f64>> {
    Ok(fim_from_quadratic_forms(&quadratic_forms(pilots, theta, sigma_z2)?, antennas))
}

/// `J_ij = M |q_ij|^2` from `Q = S^H R^{-1} S`, so one `Q` serves every `M`.
pub fn fim_from_quadratic_forms(q: &CMatrix, antennas: usize) -> DMatrix<f64> {
    let m = antennas as f64;
    let k = q.nrows();
    // symmetrise: |q_ij| and |q_ji| agree up to round-off
    DMatrix::from_fn(k, k, |i, j| m * 0.5 * (q[(i, j)].norm_sqr() + q[(j, i)].norm_sqr()))
}

/// `(d theta_k / d b_k)^2 = 4 sigma_h^4 b_k^2`, the factor between the power and
/// amplitude bounds.
pub fn amplitude_jacobian_sq(config: &SystemConfig, k: usize) -> Result<f64> {
    let b = config.b[k];
    if b == 0.0 || !b.is_finite() {
        return Err(Error::DegenerateParameter(format!(
            "user {k} has amplitude {b}; the amplitude bound needs an active user"
        )));
    }
    Ok(4.0 * config.sigma_h2 * config.sigma_h2 * b * b)
}

fn check_user(config: &SystemConfig, k: usize) -> Result<()> {
    config.validate()?;
    if k >= config.users {
        return Err(Error::InvalidArgument(format!("user {k} out of range 0..{}", config.users)));
    }
    Ok(())
}

/// `[J^{-1}]_kk` of the power-domain FIM, with the rank check that separates
/// an identifiable operating point from the detection limit.
pub fn power_crb(pilots: &PilotSet, config: &SystemConfig, k: usize) -> Result<f64> {
    check_user(config, k)?;
    if pilots.users() != config.users || pilots.blocklength() != config.blocklength {
        return Err(Error::InvalidArgument(format!(
            "pilot set is {}x{}, config expects {}x{}",
            pilots.blocklength(),
            pilots.users(),
            config.blocklength,
            config.users
        )));
    }
    let fim = fim_covariance(pilots, &config.theta(), config.sigma_z2, config.antennas)?;
    spd_inverse_entry(&fim, k).map_err(|_| {
        Error::RankDeficient(format!(
            "covariance FIM of {} users with L = {} has condition number {:e}",
            config.users,
            config.blocklength,
            spd_condition(&fim)
        ))
    })
}

/// Amplitude-domain bound `[J^{-1}]_kk / (4 sigma_h^4 b_k^2)`.
pub fn crb_covariance(pilots: &PilotSet, config: &SystemConfig, k: usize) -> Result<f64> {
    check_user(config, k)?;
    let jac = amplitude_jacobian_sq(config, k)?;
    Ok(power_crb(pilots, config, k)? / jac)
}

/// Closed form for exactly orthogonal pilots:
/// `(L p sigma_h^2 b^2 + sigma_z^2)^2 / (4 M L^2 p^2 sigma_h^4 b^2)`.
pub fn crb_covariance_orthogonal(config: &SystemConfig, k: usize) -> Result<f64> {
    check_user(config, k)?;
    let jac = amplitude_jacobian_sq(config, k)?;
    let l = config.blocklength as f64;
    let p = config.pbar;
    let theta = config.sigma_h2 * config.b[k] * config.b[k];
    let eigen = theta * l * p + config.sigma_z2;
    Ok(eigen * eigen / (config.antennas as f64 * l * l * p * p) / jac)
}
