//! Angular power spectrum from a primordial spectrum, Gaussian sky
//! realizations and cosmic variance.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cosmofield::Deficit;
use crate::exec::{substream, Execution};
use crate::quadrature::{self, QuadratureError};

pub const DEFAULT_K_PIVOT: f64 = 0.05;
pub const QUAD_REL_TOL: f64 = 1e-8;
const MAX_INTERVALS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmbError {
    #[error("quadrature failed at l = {l}: {source}")]
    QuadratureFailure { l: usize, source: QuadratureError },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn default_n_s() -> f64 {
    0.96
}
fn default_k_pivot() -> f64 {
    DEFAULT_K_PIVOT
}

/// `P(k) = A (k/k_pivot)^(n_s - 1)`, times the deficit `ξ(k)` when present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimordialSpectrum {
    pub amplitude: f64,
    #[serde(default = "default_n_s")]
    pub n_s: f64,
    #[serde(default = "default_k_pivot")]
    pub k_pivot: f64,
    #[serde(default)]
    pub deficit: Option<Deficit>,
}

impl PrimordialSpectrum {
    pub fn new(amplitude: f64, n_s: f64) -> Self {
        Self { amplitude, n_s, k_pivot: DEFAULT_K_PIVOT, deficit: None }
    }

    pub fn with_deficit(self, deficit: Deficit) -> Self {
        Self { deficit: Some(deficit), ..self }
    }

    pub fn uncorrected(self) -> Self {
        Self { deficit: None, ..self }
    }

    pub fn validate(&self) -> Result<(), CmbError> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(CmbError::InvalidParameter(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if !self.n_s.is_finite() || !(self.k_pivot > 0.0 && self.k_pivot.is_finite()) {
            return Err(CmbError::InvalidParameter("n_s and k_pivot must be finite, k_pivot > 0".into()));
        }
        if let Some(d) = &self.deficit {
            if ![d.c1, d.c2, d.c3].iter().all(|c| c.is_finite()) {
                return Err(CmbError::InvalidParameter("deficit coefficients must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, k: f64) -> f64 {
        let base = self.amplitude * (k / self.k_pivot).powf(self.n_s - 1.0);
        match &self.deficit {
            Some(d) => base * d.eval(k),
            None => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferSpec {
    /// `T = 1` for `k1 <= k <= k2`, zero elsewhere.
    Box { k1: f64, k2: f64 },
    /// `T = j_l(k chi_star)`: projection of a thin last-scattering shell.
    SachsWolfe { chi_star: f64 },
}

impl TransferSpec {
    pub fn validate(&self) -> Result<(), CmbError> {
        match *self {
            TransferSpec::Box { k1, k2 } if !(k1 > 0.0 && k2 > k1 && k2.is_finite()) => {
                Err(CmbError::InvalidParameter(format!("box needs 0 < k1 < k2, got [{k1}, {k2}]")))
            }
            TransferSpec::SachsWolfe { chi_star } if !(chi_star > 0.0 && chi_star.is_finite()) => {
                Err(CmbError::InvalidParameter(format!("chi_star must be positive, got {chi_star}")))
            }
            _ => Ok(()),
        }
    }
}

/// `C_l = (1/2π²) ∫ T²(k, l) P(k) dk/k`, integrated adaptively in `ln k`.
pub fn cl_integral(spec: &PrimordialSpectrum, transfer: &TransferSpec, l: usize) -> Result<f64, CmbError> {
    spec.validate()?;
    transfer.validate()?;
    let fail = |source| CmbError::QuadratureFailure { l, source };
    let integral = match *transfer {
        TransferSpec::Box { k1, k2 } => {
            quadrature::integrate(|u| spec.eval(u.exp()), k1.ln(), k2.ln(), QUAD_REL_TOL, 0.0, MAX_INTERVALS)
                .map_err(fail)?
                .value
        }
        TransferSpec::SachsWolfe { chi_star } => {
            // j_l(x)^2 is negligible below x_lo; beyond x_hi it averages to 1/(2x^2)
            let lf = l.max(1) as f64;
            let x_lo = 1e-3 * lf;
            let x_hi = (40.0 * lf).max(2000.0);
            let integrand = |u: f64| {
                let x = u.exp();
                let j = spherical_jn(l, x);
                j * j * spec.eval(x / chi_star)
            };
            let body = quadrature::integrate(integrand, x_lo.ln(), x_hi.ln(), QUAD_REL_TOL, 0.0, MAX_INTERVALS)
                .map_err(fail)?
                .value;
            let nu = spec.n_s - 1.0;
            let tail = spec.eval(x_hi / chi_star) / (2.0 * (2.0 - nu) * x_hi * x_hi);
            body + tail
        }
    };
    Ok(integral / (2.0 * PI * PI))
}

/// Spherical Bessel function of the first kind.
///
/// Upward recurrence from `j_0, j_1` where it is stable (`x >= l`), Miller's
/// normalized downward recurrence below that.
pub fn spherical_jn(l: usize, x: f64) -> f64 {
    if x < 0.0 {
        let v = spherical_jn(l, -x);
        return if l % 2 == 0 { v } else { -v };
    }
    if x == 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    if l == 0 {
        return j0;
    }
    if x >= l as f64 {
        let mut prev = j0;
        let mut cur = s / (x * x) - c / x;
        for n in 1..l {
            let next = (2 * n + 1) as f64 / x * cur - prev;
            prev = cur;
            cur = next;
        }
        return cur;
    }
    let start = l + 30 + (40.0 * l.max(x as usize) as f64).sqrt() as usize;
    let mut above = 0.0;
    let mut cur = 1e-300;
    let mut at_l = 0.0;
    let mut at_1 = 0.0;
    for n in (1..=start).rev() {
        // cur = j_n, above = j_{n+1} (unnormalized)
        let below = (2 * n + 1) as f64 / x * cur - above;
        above = cur;
        cur = below;
        if n - 1 == l {
            at_l = cur;
        }
        if n - 1 == 1 {
            at_1 = cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            above *= 1e-250;
            at_l *= 1e-250;
            at_1 *= 1e-250;
        }
    }
    // cur now holds the unnormalized j_0; normalize against whichever of
    // j_0, j_1 is better conditioned
    let j1 = if x < 0.5 { x / 3.0 * (1.0 - x * x / 10.0 * (1.0 - x * x / 28.0)) } else { s / (x * x) - c / x };
    if j0.abs() >= j1.abs() {
        at_l * (j0 / cur)
    } else {
        at_l * (j1 / at_1)
    }
}

/// `C_l` for `l_min <= l <= l_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularSpectrum {
    pub l_min: usize,
    pub cl: Vec<f64>,
}

impl AngularSpectrum {
    pub fn l_max(&self) -> usize {
        self.l_min + self.cl.len() - 1
    }

    pub fn get(&self, l: usize) -> Option<f64> {
        l.checked_sub(self.l_min).and_then(|i| self.cl.get(i).copied())
    }

    pub fn compute(
        exec: Execution,
        spec: &PrimordialSpectrum,
        transfer: &TransferSpec,
        l_min: usize,
        l_max: usize,
    ) -> Result<Self, CmbError> {
        if l_min > l_max {
            return Err(CmbError::InvalidParameter(format!("empty l range [{l_min}, {l_max}]")));
        }
        let cl: Result<Vec<f64>, CmbError> =
            exec.map_range(l_max - l_min + 1, |i| cl_integral(spec, transfer, l_min + i)).into_iter().collect();
        Ok(Self { l_min, cl: cl? })
    }
}

/// Harmonic coefficients `a_lm` for `m >= 0`; negative `m` follow from the
/// reality condition `a_{l,-m} = (-1)^m conj(a_lm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyRealization {
    pub seed: u64,
    pub l_min: usize,
    alm: Vec<Vec<Complex64>>,
}

impl SkyRealization {
    pub fn l_max(&self) -> usize {
        self.l_min + self.alm.len() - 1
    }

    pub fn alm(&self, l: usize, m: i64) -> Complex64 {
        let row = &self.alm[l - self.l_min];
        let a = row[m.unsigned_abs() as usize];
        if m >= 0 {
            a
        } else if m % 2 == 0 {
            a.conj()
        } else {
            -a.conj()
        }
    }

    pub fn from_coefficients(seed: u64, l_min: usize, alm: Vec<Vec<Complex64>>) -> Self {
        Self { seed, l_min, alm }
    }
}

fn multipole_stream(realization: u64, l: usize) -> u64 {
    (realization << 20) | l as u64
}

/// Draws `a_lm, m = 0..=l` with `⟨|a_lm|²⟩ = C_l`.
fn sample_multipole<R: Rng>(cl: f64, l: usize, rng: &mut R) -> Vec<Complex64> {
    let sd = cl.max(0.0).sqrt();
    let half = sd * std::f64::consts::FRAC_1_SQRT_2;
    let mut row = Vec::with_capacity(l + 1);
    let z: f64 = rng.sample(StandardNormal);
    row.push(Complex64::new(sd * z, 0.0));
    for _ in 1..=l {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        row.push(Complex64::new(half * re, half * im));
    }
    row
}

/// One statistically isotropic Gaussian sky. Each multipole has its own
/// random stream, so a sub-range of `l` reproduces the same coefficients.
pub fn sample_sky(cl: &AngularSpectrum, seed: u64) -> SkyRealization {
    let alm = (cl.l_min..=cl.l_max())
        .map(|l| sample_multipole(cl.get(l).unwrap(), l, &mut substream(seed, multipole_stream(0, l))))
        .collect();
    SkyRealization { seed, l_min: cl.l_min, alm }
}

/// `C_l^sky = (1/(2l+1)) Σ_m |a_lm|²`.
pub fn cl_sky(sky: &SkyRealization, l: usize) -> f64 {
    let row = &sky.alm[l - sky.l_min];
    let sum = row[0].norm_sqr() + 2.0 * row[1..].iter().map(|a| a.norm_sqr()).sum::<f64>();
    sum / (2 * l + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosmicVariance {
    pub l: usize,
    /// `√(2/(2l+1))`.
    pub expected: f64,
    /// Sample standard deviation of `C_l^sky / C_l`.
    pub empirical: f64,
    /// Standard error of `empirical` under the chi-square law.
    pub stderr: f64,
    /// Sample mean of `C_l^sky / C_l`.
    pub mean_ratio: f64,
}

impl CosmicVariance {
    pub fn z_score(&self) -> f64 {
        (self.empirical - self.expected) / self.stderr
    }
}

pub fn cosmic_variance_expected(l: usize) -> f64 {
    (2.0 / (2 * l + 1) as f64).sqrt()
}

/// Ratios `C_l^sky / C_l` over `n` independent realizations of multipole `l`.
pub fn sky_ratios(exec: Execution, l: usize, n: usize, seed: u64) -> Vec<f64> {
    exec.map_range(n, |r| {
        // unit C_l: the ratio does not depend on the amplitude
        let row = sample_multipole(1.0, l, &mut substream(seed, multipole_stream(r as u64, l)));
        let sky = SkyRealization { seed, l_min: l, alm: vec![row] };
        cl_sky(&sky, l)
    })
}

pub fn cosmic_variance_check(exec: Execution, l: usize, n: usize, seed: u64) -> Result<CosmicVariance, CmbError> {
    if n < 2 {
        return Err(CmbError::InvalidParameter(format!("need at least 2 realizations, got {n}")));
    }
    let ratios = sky_ratios(exec, l, n, seed);
    let nf = n as f64;
    let mean = ratios.iter().sum::<f64>() / nf;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    // (2l+1) C_l^sky / C_l is chi-square with nu = 2l+1 degrees of freedom
    let nu = (2 * l + 1) as f64;
    let sigma2 = 2.0 / nu;
    let mu4 = 12.0 * (nu + 4.0) / nu.powi(3);
    let var_of_var = (mu4 - sigma2 * sigma2) / nf;
    let stderr = (var_of_var / (4.0 * sigma2)).sqrt();
    Ok(CosmicVariance { l, expected: cosmic_variance_expected(l), empirical: var.sqrt(), stderr, mean_ratio: mean })
}
