//! Special functions and quadrature rules used by the channel-response density.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Nodes and weights of an n-point Gauss rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Golub-Welsch: nodes are the eigenvalues of the symmetric Jacobi matrix,
/// weights are `mu0` times the squared first eigenvector components.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> QuadratureRule {
    let n = diag.len();
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jacobi[(i, i)] = diag[i];
        if i + 1 < n {
            jacobi[(i, i + 1)] = off[i];
            jacobi[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let v0 = eig.eigenvectors[(0, j)];
            (eig.eigenvalues[j], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

type RuleCache = Mutex<HashMap<usize, Arc<QuadratureRule>>>;

fn cached(cache: &'static OnceLock<RuleCache>, n: usize, build: fn(usize) -> QuadratureRule) -> Arc<QuadratureRule> {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = map.lock().unwrap().get(&n) {
        return Arc::clone(rule);
    }
    let rule = Arc::new(build(n));
    map.lock().unwrap().entry(n).or_insert(rule).clone()
}

/// n-point Gauss-Laguerre rule for `int_0^inf e^{-x} f(x) dx`.
pub fn gauss_laguerre(n: usize) -> Arc<QuadratureRule> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, n, |n| {
        let diag: Vec<f64> = (0..n).map(|i| (2 * i + 1) as f64).collect();
        let off: Vec<f64> = (1..n).map(|i| i as f64).collect();
        golub_welsch(&diag, &off, 1.0)
    })
}

/// n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Arc<QuadratureRule> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, n, |n| {
        let diag = vec![0.0; n];
        let off: Vec<f64> = (1..n)
            .map(|i| {
                let i = i as f64;
                i / (4.0 * i * i - 1.0).sqrt()
            })
            .collect();
        golub_welsch(&diag, &off, 2.0)
    })
}

/// Exponentially scaled modified Bessel function `e^{-z} I_0(z)` for `z >= 0`.
pub fn bessel_i0e(z: f64) -> f64 {
    let z = z.abs();
    if z <= 30.0 {
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum * (-z).exp()
    } else {
        // Hankel asymptotic series; terms shrink until k ~ 2z.
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            let c = (2.0 * k - 1.0) * (2.0 * k - 1.0) / (8.0 * k * z);
            if c >= 1.0 {
                break;
            }
            term *= c;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum / (2.0 * std::f64::consts::PI * z).sqrt()
    }
}

/// Density of a non-central chi-square variable with two degrees of freedom.
pub fn ncx2_2_pdf(x: f64, noncentrality: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let lambda = noncentrality.max(0.0);
    let d = x.sqrt() - lambda.sqrt();
    0.5 * (-0.5 * d * d).exp() * bessel_i0e((lambda * x).sqrt())
}

/// Distance in standard deviations beyond which the Rician amplitude has
/// negligible mass (tail below e^{-72}).
const RICE_TAIL: f64 = 12.0;

/// CDF of a non-central chi-square variable with two degrees of freedom, via
/// its Poisson mixture of central chi-square laws:
/// `F(x; lambda) = sum_j Pois(j; lambda/2) P(Pois(x/2) > j)`.
pub fn ncx2_2_cdf(x: f64, noncentrality: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let lambda = noncentrality.max(0.0);
    if lambda == 0.0 {
        return -(-0.5 * x).exp_m1();
    }
    let d = x.sqrt() - lambda.sqrt();
    if d < -RICE_TAIL {
        return 0.0;
    }
    if d > RICE_TAIL {
        return 1.0;
    }
    let m = 0.5 * lambda;
    let y = 0.5 * x;
    let spread = 9.0 * m.sqrt() + 10.0;
    let j_lo = (m - spread).floor().max(0.0) as u64;
    let j_hi = (m + spread).ceil() as u64;

    let ln_m = m.ln();
    let ln_y = y.ln();
    // Tail probabilities T_j = P(Pois(y) > j) summed downward from j_hi so
    // that every update adds a positive term; the left tail stays accurate.
    let mut tail = gamma_lr(j_hi as f64 + 1.0, y);
    let mut ln_fact = ln_gamma(j_hi as f64 + 1.0);
    let mut total = 0.0;
    for j in (j_lo..=j_hi).rev() {
        let jf = j as f64;
        let weight = (-m + jf * ln_m - ln_fact).exp();
        total += weight * tail;
        tail += (-y + jf * ln_y - ln_fact).exp();
        if j > 0 {
            ln_fact -= jf.ln();
        }
    }
    total.clamp(0.0, 1.0)
}
