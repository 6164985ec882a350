//! Fluid-antenna channel model.
//!
//! Port correlation follows Clarke's model on a uniform linear aperture of
//! `W` wavelengths, which is then approximated by `B` independent blocks of
//! constant intra-block correlation. The effective channel of a user is the
//! strongest port.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eig, symmetric_eigenvalues, StreamRng};
use crate::special::{gauss_laguerre, gauss_legendre, ncx2_2_cdf, ncx2_2_pdf};

/// How the eigenvalue threshold of a [`FasGeometry`] is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Count eigenvalues above `threshold * N` (the trace of the correlation matrix).
    #[default]
    RelativeToTrace,
    /// Count eigenvalues above `threshold`.
    Absolute,
}

/// Whether the configured `mu` is the intra-block correlation itself or its square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MuConvention {
    /// `mu` is the off-diagonal correlation `mu_b^2`.
    #[default]
    Correlation,
    /// `mu` is `mu_b`; the block correlation is `mu^2`.
    Amplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FasGeometry {
    /// Number of ports `N`.
    pub ports: usize,
    /// Aperture `W` in wavelengths.
    pub aperture: f64,
    pub mu: f64,
    pub eig_threshold: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default)]
    pub mu_convention: MuConvention,
}

impl FasGeometry {
    pub fn new(ports: usize, aperture: f64) -> Result<Self> {
        let g = Self {
            ports,
            aperture,
            mu: 0.97,
            eig_threshold: 0.001,
            threshold_mode: ThresholdMode::default(),
            mu_convention: MuConvention::default(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ports == 0 {
            return Err(Error::InvalidArgument("FAS needs at least one port".into()));
        }
        if !(self.aperture > 0.0) || !self.aperture.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "aperture W must be positive, got {}",
                self.aperture
            )));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mu must lie in (0, 1), got {}",
                self.mu
            )));
        }
        if !(self.eig_threshold > 0.0 && self.eig_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eigenvalue threshold must lie in (0, 1), got {}",
                self.eig_threshold
            )));
        }
        Ok(())
    }

    /// Intra-block correlation `mu_b^2` implied by `mu` and its convention.
    pub fn block_correlation(&self) -> f64 {
        match self.mu_convention {
            MuConvention::Correlation => self.mu,
            MuConvention::Amplitude => self.mu * self.mu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub size: usize,
    /// Off-diagonal correlation `mu_b^2` inside the block.
    pub mu2: f64,
}

/// Block-diagonal approximation of the port correlation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    blocks: Vec<Block>,
}

impl BlockSpec {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("block spec has no blocks".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.size == 0 {
                return Err(Error::InvalidArgument(format!("block {i} is empty")));
            }
            if !(b.mu2 > 0.0 && b.mu2 < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "block {i} correlation must lie in (0, 1), got {}",
                    b.mu2
                )));
            }
        }
        Ok(Self { blocks })
    }

    /// `count` equal blocks of `size` ports each.
    pub fn uniform(count: usize, size: usize, mu2: f64) -> Result<Self> {
        Self::new(vec![Block { size, mu2 }; count])
    }

    /// Parses `"3x0.97,3x0.97"` (size `x` correlation, comma separated).
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (size, mu2) = item.split_once('x').ok_or_else(|| {
                Error::Config(format!("block `{item}` is not of the form <size>x<mu2>"))
            })?;
            let size = size
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad block size in `{item}`")))?;
            let mu2 = mu2
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad block correlation in `{item}`")))?;
            blocks.push(Block { size, mu2 });
        }
        Self::new(blocks).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn ports(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }
}

/// One realisation of the per-port gains of a single user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub per_port_gains: Vec<Complex64>,
    /// `max_n |g_n|^2`
    pub response: f64,
    pub argmax_port: usize,
}

impl ChannelDraw {
    fn from_gains(per_port_gains: Vec<Complex64>) -> Self {
        let (argmax_port, response) = per_port_gains
            .iter()
            .map(|g| g.norm_sqr())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        Self {
            per_port_gains,
            response,
            argmax_port,
        }
    }

    /// Complex gain of the selected (strongest) port.
    pub fn selected_gain(&self) -> Complex64 {
        self.per_port_gains[self.argmax_port]
    }
}

/// Spatial correlation `a(n) = sin(x)/x` at `x = 2 pi n W / (N - 1)`.
pub fn clarke_correlation(lag: usize, ports: usize, aperture: f64) -> f64 {
    if lag == 0 {
        return 1.0;
    }
    let x = 2.0 * std::f64::consts::PI * lag as f64 * aperture / (ports - 1) as f64;
    x.sin() / x
}

/// Real symmetric Toeplitz correlation matrix of `ports` uniformly spaced ports.
pub fn clarke_toeplitz(ports: usize, aperture: f64) -> Result<DMatrix<f64>> {
    if ports < 2 {
        return Err(Error::InvalidArgument(format!(
            "Clarke correlation needs at least two ports, got {ports}"
        )));
    }
    if !(aperture > 0.0) || !aperture.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "aperture W must be positive, got {aperture}"
        )));
    }
    let lags: Vec<f64> = (0..ports)
        .map(|n| clarke_correlation(n, ports, aperture))
        .collect();
    Ok(DMatrix::from_fn(ports, ports, |i, j| lags[i.abs_diff(j)]))
}

type EigCache = Mutex<HashMap<(usize, u64), Arc<Vec<f64>>>>;

/// Descending eigenvalues of the Clarke matrix, memoised per `(N, W)`.
pub fn clarke_eigenvalues(ports: usize, aperture: f64) -> Result<Arc<Vec<f64>>> {
    static CACHE: OnceLock<EigCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (ports, aperture.to_bits());
    if let Some(v) = cache.lock().unwrap().get(&key) {
        return Ok(Arc::clone(v));
    }
    let values = symmetric_eigenvalues(&clarke_toeplitz(ports, aperture)?)?;
    let values = Arc::new(values.iter().copied().collect::<Vec<_>>());
    Ok(cache.lock().unwrap().entry(key).or_insert(values).clone())
}

/// Number of significant Clarke eigenvalues under the geometry's threshold rule.
pub fn significant_modes(geometry: &FasGeometry) -> Result<usize> {
    geometry.validate()?;
    if geometry.ports == 1 {
        return Ok(1);
    }
    let cutoff = match geometry.threshold_mode {
        ThresholdMode::RelativeToTrace => geometry.eig_threshold * geometry.ports as f64,
        ThresholdMode::Absolute => geometry.eig_threshold,
    };
    let eig = clarke_eigenvalues(geometry.ports, geometry.aperture)?;
    Ok(eig.iter().filter(|&&l| l > cutoff).count())
}

/// Block approximation: one block per significant eigenmode, ports split as
/// evenly as possible with the remainder going to the leading blocks.
pub fn block_partition(geometry: &FasGeometry) -> Result<BlockSpec> {
    let count = significant_modes(geometry)?;
    if count == 0 {
        return Err(Error::DegeneratePartition(format!(
            "no eigenvalue of the {}-port correlation exceeds the threshold {}",
            geometry.ports, geometry.eig_threshold
        )));
    }
    let base = geometry.ports / count;
    let extra = geometry.ports % count;
    let mu2 = geometry.block_correlation();
    let blocks = (0..count)
        .map(|b| Block {
            size: base + usize::from(b < extra),
            mu2,
        })
        .collect();
    BlockSpec::new(blocks)
}

/// Gains under the block model: inside block `b`,
/// `g = mu_b x0 + sqrt(1 - mu_b^2) x_l` with one shared `x0` per block.
pub fn sample_block_channel(spec: &BlockSpec, sigma_h2: f64, rng: &mut StreamRng) -> ChannelDraw {
    let mut gains = Vec::with_capacity(spec.ports());
    for block in spec.blocks() {
        let shared = rng.complex_gaussian(sigma_h2) * block.mu2.sqrt();
        let own = (1.0 - block.mu2).sqrt();
        for _ in 0..block.size {
            gains.push(shared + rng.complex_gaussian(sigma_h2) * own);
        }
    }
    ChannelDraw::from_gains(gains)
}

/// Largest port power under the block model, without materialising gains.
pub fn sample_block_response(spec: &BlockSpec, sigma_h2: f64, rng: &mut StreamRng) -> f64 {
    let mut best = 0.0_f64;
    for block in spec.blocks() {
        let shared = rng.complex_gaussian(sigma_h2) * block.mu2.sqrt();
        let own = (1.0 - block.mu2).sqrt();
        for _ in 0..block.size {
            best = best.max((shared + rng.complex_gaussian(sigma_h2) * own).norm_sqr());
        }
    }
    best
}

/// Exact Clarke-correlated channel `g = Q Lambda^{1/2} g0`. Holds the
/// `N x r` colouring factor so repeated draws reuse one eigendecomposition.
#[derive(Debug, Clone)]
pub struct CorrelatedSampler {
    factor: DMatrix<f64>,
}

impl CorrelatedSampler {
    pub fn new(geometry: &FasGeometry) -> Result<Self> {
        geometry.validate()?;
        if geometry.ports == 1 {
            return Ok(Self {
                factor: DMatrix::from_element(1, 1, 1.0),
            });
        }
        let (q, lambda) = symmetric_eig(&clarke_toeplitz(geometry.ports, geometry.aperture)?)?;
        // negative eigenvalues are round-off from the sinc kernel
        let rank = lambda.iter().filter(|&&l| l > 0.0).count();
        let mut factor = DMatrix::zeros(geometry.ports, rank);
        for j in 0..rank {
            let s = lambda[j].sqrt();
            factor.set_column(j, &(q.column(j) * s));
        }
        Ok(Self { factor })
    }

    pub fn ports(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample(&self, sigma_h2: f64, rng: &mut StreamRng) -> ChannelDraw {
        let r = self.factor.ncols();
        let g0: Vec<Complex64> = (0..r).map(|_| rng.complex_gaussian(sigma_h2)).collect();
        let gains = (0..self.factor.nrows())
            .map(|n| {
                self.factor
                    .row(n)
                    .iter()
                    .zip(&g0)
                    .map(|(a, z)| z * *a)
                    .sum()
            })
            .collect();
        ChannelDraw::from_gains(gains)
    }
}

pub fn sample_full_channel(
    geometry: &FasGeometry,
    sigma_h2: f64,
    rng: &mut StreamRng,
) -> Result<ChannelDraw> {
    Ok(CorrelatedSampler::new(geometry)?.sample(sigma_h2, rng))
}

/// The chi-square form of the max-port density describes `2|g|^2 / sigma_h^2`
/// (unit-variance real and imaginary parts). This factor maps it onto
/// `|g|^2` with CN(0, 1) ports, so a single port has the Exp(1) density.
pub const CHI_SQUARE_SCALE: f64 = 2.0;

/// Gauss-Laguerre sizes tried in turn until two successive estimates agree.
const LAGUERRE_LADDER: [usize; 5] = [64, 128, 256, 512, 1024];
const QUADRATURE_RTOL: f64 = 1e-4;
const QUADRATURE_ATOL: f64 = 1e-12;

/// Per-block `F_b(s)` and `f_b(s)` in the chi-square convention, where
/// `F_b(s) = int e^{-u} F(s/(1-mu2); 2 mu2 u/(1-mu2))^{L_b} du`.
fn block_terms(s: f64, block: &Block, nodes: usize) -> (f64, f64) {
    let rule = gauss_laguerre(nodes);
    let spread = 1.0 - block.mu2;
    let x = s / spread;
    let l = block.size as i32;
    let mut cdf = 0.0;
    let mut pdf = 0.0;
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        let lambda = 2.0 * block.mu2 * u / spread;
        let f_cdf = ncx2_2_cdf(x, lambda);
        cdf += w * f_cdf.powi(l);
        if l == 1 {
            pdf += w * ncx2_2_pdf(x, lambda) / spread;
        } else if f_cdf > 0.0 {
            pdf += w * l as f64 * f_cdf.powi(l - 1) * ncx2_2_pdf(x, lambda) / spread;
        }
    }
    (cdf, pdf)
}

fn chi_square_density(s: f64, spec: &BlockSpec, nodes: usize) -> f64 {
    let terms: Vec<(f64, f64)> = spec.blocks().iter().map(|b| block_terms(s, b, nodes)).collect();
    (0..terms.len())
        .map(|b| {
            let others: f64 = terms
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != b)
                .map(|(_, t)| t.0)
                .product();
            terms[b].1 * others
        })
        .sum()
}

fn chi_square_cdf(s: f64, spec: &BlockSpec, nodes: usize) -> f64 {
    spec.blocks().iter().map(|b| block_terms(s, b, nodes).0).product()
}

fn refine<F: Fn(usize) -> f64>(what: &str, eval: F) -> Result<f64> {
    let mut prev = eval(LAGUERRE_LADDER[0]);
    for &n in &LAGUERRE_LADDER[1..] {
        let next = eval(n);
        if (next - prev).abs() <= QUADRATURE_RTOL * next.abs() + QUADRATURE_ATOL {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::NumericalAccuracy(format!(
        "{what}: Gauss-Laguerre quadrature did not converge with {} nodes",
        LAGUERRE_LADDER[LAGUERRE_LADDER.len() - 1]
    )))
}

/// Density of the max-port response `|g|^2` for unit channel variance,
/// by Gauss-Laguerre quadrature over each block's shared component.
pub fn response_pdf(t: f64, spec: &BlockSpec) -> Result<f64> {
    response_pdf_scaled(t, spec, 1.0)
}

/// [`response_pdf`] for channel variance `sigma_h2` (change of variables `t / sigma_h2`).
pub fn response_pdf_scaled(t: f64, spec: &BlockSpec, sigma_h2: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("response must be >= 0, got {t}")));
    }
    if !(sigma_h2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_h2 must be positive, got {sigma_h2}")));
    }
    let s = CHI_SQUARE_SCALE * t / sigma_h2;
    let density = refine("response density", |n| chi_square_density(s, spec, n))?;
    Ok((CHI_SQUARE_SCALE / sigma_h2 * density).max(0.0))
}

/// CDF of the max-port response from the closed product of per-block CDFs.
pub fn response_cdf(t: f64, spec: &BlockSpec) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("response must be >= 0, got {t}")));
    }
    let s = CHI_SQUARE_SCALE * t;
    refine("response cdf", |n| chi_square_cdf(s, spec, n)).map(|v| v.clamp(0.0, 1.0))
}

/// Tabulates the response CDF at the increasing points `ts` by integrating
/// [`response_pdf`] with 8-point Gauss-Legendre panels no wider than `panel`.
pub fn integrated_response_cdf(ts: &[f64], spec: &BlockSpec, panel: f64) -> Result<Vec<f64>> {
    if !(panel > 0.0) {
        return Err(Error::InvalidArgument("panel width must be positive".into()));
    }
    let rule = gauss_legendre(8);
    let mut out = Vec::with_capacity(ts.len());
    let mut acc = 0.0;
    let mut left = 0.0;
    for &t in ts {
        if t < left {
            return Err(Error::InvalidArgument("evaluation points must be increasing".into()));
        }
        let pieces = ((t - left) / panel).ceil().max(1.0) as usize;
        let h = (t - left) / pieces as f64;
        for p in 0..pieces {
            let a = left + p as f64 * h;
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                acc += 0.5 * h * w * response_pdf(a + 0.5 * h * (x + 1.0), spec)?;
            }
        }
        left = t;
        out.push(acc);
    }
    Ok(out)
}

/// Monte-Carlo estimate of `E[1/|g|^2]` with heavy-tail diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseMoment {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    /// Hill estimate of the tail index of `1/|g|^2` from its largest 1%.
    pub tail_index: f64,
    pub converged: bool,
}

pub const MIN_INVERSE_TRIALS: usize = 10_000;

/// Tail index below which the sample mean of `1/|g|^2` is not trusted.
pub const MIN_TAIL_INDEX: f64 = 1.5;

pub fn expected_inverse_response(
    spec: &BlockSpec,
    sigma_h2: f64,
    rng: &mut StreamRng,
    trials: usize,
) -> Result<InverseMoment> {
    if trials < MIN_INVERSE_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_INVERSE_TRIALS} trials, got {trials}"
        )));
    }
    if !(sigma_h2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_h2 must be positive, got {sigma_h2}")));
    }
    let checkpoint = trials - trials / 10;
    let mut samples = Vec::with_capacity(trials);
    let (mut mean, mut m2) = (0.0_f64, 0.0_f64);
    let mut se_checkpoint = f64::NAN;
    for i in 0..trials {
        let v = 1.0 / sample_block_response(spec, sigma_h2, rng);
        samples.push(v);
        let n = (i + 1) as f64;
        let delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
        if i + 1 == checkpoint {
            se_checkpoint = (m2 / (n - 1.0) / n).sqrt();
        }
    }
    let n = trials as f64;
    let std_error = (m2 / (n - 1.0) / n).sqrt();
    let tail_index = hill_tail_index(&mut samples, trials / 100);
    let converged =
        mean.is_finite() && std_error < se_checkpoint && tail_index > MIN_TAIL_INDEX;
    Ok(InverseMoment {
        mean,
        std_error,
        trials,
        tail_index,
        converged,
    })
}

/// Hill estimator over the `k` largest values.
fn hill_tail_index(values: &mut [f64], k: usize) -> f64 {
    let k = k.max(10).min(values.len() - 1);
    values.sort_by(|a, b| b.total_cmp(a));
    let threshold = values[k];
    let s: f64 = values[..k].iter().map(|v| (v / threshold).ln()).sum();
    if s > 0.0 {
        k as f64 / s
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(ports: usize, aperture: f64) -> FasGeometry {
        FasGeometry::new(ports, aperture).unwrap()
    }

    #[test]
    fn clarke_has_unit_diagonal_and_symmetry() {
        let s = clarke_toeplitz(30, 1.7).unwrap();
        for i in 0..30 {
            assert_eq!(s[(i, i)], 1.0);
            for j in 0..30 {
                assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }
        let eig = clarke_eigenvalues(30, 1.7).unwrap();
        assert!((eig.iter().sum::<f64>() - 30.0).abs() < 1e-8);
    }

    #[test]
    fn clarke_half_wavelength_pair_is_uncorrelated() {
        let s = clarke_toeplitz(2, 0.5).unwrap();
        // sin(pi)/pi
        assert!(s[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn clarke_rejects_single_port() {
        assert!(matches!(clarke_toeplitz(1, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn clarke_fig1_geometry_is_psd_up_to_roundoff() {
        let eig = clarke_eigenvalues(200, 2.0).unwrap();
        assert!(*eig.last().unwrap() >= -1e-10);
    }

    #[test]
    fn nearly_collapsed_aperture_is_one_block() {
        let spec = block_partition(&geometry(16, 1e-6)).unwrap();
        assert_eq!(spec.blocks().len(), 1);
        assert_eq!(spec.blocks()[0].size, 16);
    }

    #[test]
    fn partition_counts_significant_modes() {
        let g = geometry(16, 8.0);
        let eig = symmetric_eigenvalues(&clarke_toeplitz(16, 8.0).unwrap()).unwrap();
        let expected = eig.iter().filter(|&&l| l > 0.001 * 16.0).count();
        let spec = block_partition(&g).unwrap();
        assert_eq!(spec.blocks().len(), expected);
        assert_eq!(spec.ports(), 16);
    }

    #[test]
    fn partition_splits_remainder_to_leading_blocks() {
        let g = geometry(200, 2.0);
        let spec = block_partition(&g).unwrap();
        let sizes: Vec<usize> = spec.blocks().iter().map(|b| b.size).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 200);
        assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        assert!(spec.blocks().iter().all(|b| b.mu2 == 0.97));
    }

    #[test]
    fn absolute_threshold_keeps_more_modes() {
        let rel = block_partition(&geometry(200, 2.0)).unwrap();
        let abs = block_partition(&FasGeometry {
            threshold_mode: ThresholdMode::Absolute,
            ..geometry(200, 2.0)
        })
        .unwrap();
        assert!(abs.blocks().len() >= rel.blocks().len());
    }

    #[test]
    fn amplitude_convention_squares_mu() {
        let g = FasGeometry {
            mu_convention: MuConvention::Amplitude,
            ..geometry(10, 0.5)
        };
        assert!((g.block_correlation() - 0.9409).abs() < 1e-15);
    }

    #[test]
    fn degenerate_partition_is_reported() {
        // a threshold just under 1 with relative semantics needs lambda > 0.999 N
        let g = FasGeometry {
            eig_threshold: 0.999,
            ..geometry(10, 5.0)
        };
        assert!(matches!(block_partition(&g), Err(Error::DegeneratePartition(_))));
    }

    #[test]
    fn block_spec_rejects_unit_correlation() {
        assert!(BlockSpec::new(vec![Block { size: 3, mu2: 1.0 }]).is_err());
        assert!(BlockSpec::new(vec![]).is_err());
    }

    #[test]
    fn block_spec_parses_text_form() {
        let spec = BlockSpec::parse("3x0.97, 2x0.5").unwrap();
        assert_eq!(spec.ports(), 5);
        assert!(matches!(BlockSpec::parse("3-0.97"), Err(Error::Config(_))));
    }

    #[test]
    fn single_port_response_is_exponential() {
        let spec = BlockSpec::uniform(1, 1, 0.5).unwrap();
        let mut rng = StreamRng::new(21, 0);
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| sample_block_channel(&spec, 1.0, &mut rng).response)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.005, "{mean}");
    }

    #[test]
    fn argmax_attains_response() {
        let spec = BlockSpec::uniform(3, 4, 0.9).unwrap();
        let mut rng = StreamRng::new(2, 0);
        for _ in 0..100 {
            let d = sample_block_channel(&spec, 1.0, &mut rng);
            assert_eq!(d.per_port_gains[d.argmax_port].norm_sqr(), d.response);
            assert!(d.per_port_gains.iter().all(|g| g.norm_sqr() <= d.response));
        }
    }

    fn correlation(draws: &[Vec<Complex64>], i: usize, j: usize) -> f64 {
        let n = draws.len() as f64;
        let cross: Complex64 = draws.iter().map(|g| g[i] * g[j].conj()).sum::<Complex64>() / n;
        let pi = draws.iter().map(|g| g[i].norm_sqr()).sum::<f64>() / n;
        let pj = draws.iter().map(|g| g[j].norm_sqr()).sum::<f64>() / n;
        cross.re / (pi * pj).sqrt()
    }

    #[test]
    fn blocks_are_independent() {
        let spec = BlockSpec::uniform(2, 3, 0.97).unwrap();
        let mut rng = StreamRng::new(4, 0);
        let draws: Vec<Vec<Complex64>> = (0..100_000)
            .map(|_| sample_block_channel(&spec, 1.0, &mut rng).per_port_gains)
            .collect();
        assert!(correlation(&draws, 0, 3).abs() < 0.01);
        assert!(correlation(&draws, 2, 5).abs() < 0.01);
    }

    #[test]
    fn intra_block_correlation_matches_mu2() {
        let spec = BlockSpec::uniform(1, 10, 0.97).unwrap();
        let mut rng = StreamRng::new(5, 0);
        let draws: Vec<Vec<Complex64>> = (0..100_000)
            .map(|_| sample_block_channel(&spec, 1.0, &mut rng).per_port_gains)
            .collect();
        for &(i, j) in &[(0, 1), (3, 9), (4, 5)] {
            let c = correlation(&draws, i, j);
            assert!((c - 0.97).abs() < 0.01, "ports {i},{j}: {c}");
        }
    }

    #[test]
    fn block_ports_have_unit_marginal_power() {
        let spec = BlockSpec::new(vec![Block { size: 4, mu2: 0.97 }, Block { size: 2, mu2: 0.6 }])
            .unwrap();
        let mut rng = StreamRng::new(6, 0);
        let n = 100_000;
        let mut power = vec![0.0; 6];
        for _ in 0..n {
            let d = sample_block_channel(&spec, 2.0, &mut rng);
            for (p, g) in power.iter_mut().zip(&d.per_port_gains) {
                *p += g.norm_sqr() / n as f64;
            }
        }
        assert!(power.iter().all(|p| (p / 2.0 - 1.0).abs() < 0.01), "{power:?}");
    }

    #[test]
    fn more_ports_dominate_stochastically() {
        let small = BlockSpec::uniform(2, 2, 0.97).unwrap();
        let large = BlockSpec::uniform(4, 5, 0.97).unwrap();
        let n = 50_000;
        let mut rng = StreamRng::new(8, 0);
        let mut a: Vec<f64> = (0..n).map(|_| sample_block_response(&small, 1.0, &mut rng)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| sample_block_response(&large, 1.0, &mut rng)).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for d in 1..10 {
            let q = d * n / 10;
            assert!(b[q] > a[q], "decile {d}");
        }
    }

    #[test]
    fn full_channel_collapsed_aperture_is_rank_one() {
        let g = geometry(16, 1e-6);
        let mut rng = StreamRng::new(9, 0);
        let d = sample_full_channel(&g, 1.0, &mut rng).unwrap();
        let first = d.per_port_gains[0];
        for p in &d.per_port_gains {
            assert!((p - first).norm() < 1e-3 * first.norm().max(1e-3));
        }
        assert!((d.response / first.norm_sqr() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn full_channel_single_port() {
        let g = geometry(1, 1.0);
        let a = sample_full_channel(&g, 1.5, &mut StreamRng::new(3, 0)).unwrap();
        let b = StreamRng::new(3, 0).complex_gaussian(1.5);
        assert_eq!(a.per_port_gains, vec![b]);
    }

    #[test]
    fn full_channel_marginal_variance() {
        let sampler = CorrelatedSampler::new(&geometry(200, 2.0)).unwrap();
        let mut rng = StreamRng::new(10, 0);
        let n = 100_000;
        let mut power = vec![0.0; 200];
        for _ in 0..n {
            let d = sampler.sample(1.0, &mut rng);
            for (p, g) in power.iter_mut().zip(&d.per_port_gains) {
                *p += g.norm_sqr() / n as f64;
            }
        }
        for (i, p) in power.iter().enumerate() {
            assert!((p - 1.0).abs() < 0.01, "port {i}: {p}");
        }
    }

    #[test]
    fn single_port_density_is_exponential() {
        let spec = BlockSpec::uniform(1, 1, 0.97).unwrap();
        for &t in &[0.5, 1.0, 2.0] {
            let f = response_pdf(t, &spec).unwrap();
            assert!((f - (-t).exp()).abs() < 1e-3, "t={t}: {f}");
        }
    }

    #[test]
    fn density_at_zero_is_finite() {
        for spec in [
            BlockSpec::uniform(1, 1, 0.97).unwrap(),
            BlockSpec::uniform(2, 3, 0.97).unwrap(),
        ] {
            let f = response_pdf(0.0, &spec).unwrap();
            assert!(f.is_finite() && f >= 0.0);
        }
    }

    #[test]
    fn density_rescales_with_channel_variance() {
        let spec = BlockSpec::uniform(2, 3, 0.9).unwrap();
        let a = response_pdf_scaled(3.0, &spec, 2.0).unwrap();
        let b = response_pdf(1.5, &spec).unwrap() / 2.0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let spec = BlockSpec::uniform(2, 3, 0.97).unwrap();
        let cdf = integrated_response_cdf(&[40.0], &spec, 0.25).unwrap();
        assert!((cdf[0] - 1.0).abs() < 1e-3, "{}", cdf[0]);
    }

    #[test]
    fn integrated_density_matches_product_cdf() {
        let spec = BlockSpec::new(vec![Block { size: 3, mu2: 0.97 }, Block { size: 2, mu2: 0.8 }])
            .unwrap();
        let ts = [0.5, 1.0, 2.0, 4.0];
        let integrated = integrated_response_cdf(&ts, &spec, 0.1).unwrap();
        for (t, f) in ts.iter().zip(&integrated) {
            let closed = response_cdf(*t, &spec).unwrap();
            assert!((closed - f).abs() < 1e-4, "t={t}: {closed} vs {f}");
        }
    }

    #[test]
    fn inverse_moment_rejects_short_runs() {
        let spec = BlockSpec::uniform(2, 3, 0.97).unwrap();
        let mut rng = StreamRng::new(1, 0);
        assert!(expected_inverse_response(&spec, 1.0, &mut rng, 100).is_err());
    }

    #[test]
    fn inverse_moment_of_single_port_is_flagged() {
        let spec = BlockSpec::uniform(1, 1, 0.97).unwrap();
        for seed in 0..5 {
            let mut rng = StreamRng::new(seed, 0);
            let est = expected_inverse_response(&spec, 1.0, &mut rng, 20_000).unwrap();
            assert!(!est.converged, "seed {seed}: {est:?}");
        }
    }

    #[test]
    fn inverse_moment_is_seed_consistent() {
        let spec = BlockSpec::uniform(10, 20, 0.97).unwrap();
        let a = expected_inverse_response(&spec, 1.0, &mut StreamRng::new(1, 0), 20_000).unwrap();
        let b = expected_inverse_response(&spec, 1.0, &mut StreamRng::new(2, 0), 20_000).unwrap();
        assert!(a.converged && b.converged, "{a:?} {b:?}");
        let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 2.0 * combined, "{a:?} {b:?}");
    }

    #[test]
    fn inverse_moment_scales_with_channel_variance() {
        let spec = BlockSpec::uniform(10, 20, 0.97).unwrap();
        // same stream: the draws scale exactly with sigma_h
        let a = expected_inverse_response(&spec, 1.0, &mut StreamRng::new(3, 0), 20_000).unwrap();
        let b = expected_inverse_response(&spec, 2.0, &mut StreamRng::new(3, 0), 20_000).unwrap();
        assert!((b.mean - a.mean / 2.0).abs() < 1e-9 * a.mean);
        // independent streams agree within Monte-Carlo error
        let c = expected_inverse_response(&spec, 2.0, &mut StreamRng::new(4, 0), 20_000).unwrap();
        let combined = (a.std_error.powi(2) / 4.0 + c.std_error.powi(2)).sqrt();
        assert!((c.mean - a.mean / 2.0).abs() < 3.0 * combined);
    }
}
