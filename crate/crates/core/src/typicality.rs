//! Sampling under `|Ψ_univ|^p` for a universe of unentangled copies of one
//! sub-system, and the histogram divergence of the induced distribution.
//!
//! For a product state the measure factorizes, so each sub-system is an
//! independent draw from `|ψ|^p` normalized. Draws use inverse-CDF sampling
//! on a dense tabulation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{substream, Execution};
use crate::wavefield::Wave1d;

/// Fewest samples [`induced_distribution_divergence`] accepts.
pub const MIN_SAMPLES: usize = 1000;
/// Nodes in a 1D tabulation.
pub const TABLE_NODES: usize = 20_001;
/// Sub-systems drawn per random substream.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypicalityError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("tabulated CDF is not monotone or not finite at node {index}")]
    Tabulation { index: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// `Ψ_univ = ψ ψ … ψ` over `n` sub-systems, sampled with `|Ψ_univ|^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductUniverse {
    pub psi: Wave1d,
    pub n: usize,
    pub p: f64,
}

impl ProductUniverse {
    pub fn new(psi: Wave1d, n: usize, p: f64) -> Result<Self, TypicalityError> {
        let u = Self { psi, n, p };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), TypicalityError> {
        if self.n == 0 {
            return Err(TypicalityError::InvalidParams("a universe needs at least one sub-system".into()));
        }
        check_exponent(self.p)
    }
}

fn check_exponent(p: f64) -> Result<(), TypicalityError> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(TypicalityError::InvalidParams(format!("exponent must be positive, got {p}")))
    }
}

/// Normalized `|ψ(x)|^p` tabulated on `[-L, L]`, with its cumulative
/// distribution by the trapezoid rule.
#[derive(Debug, Clone)]
pub struct Tabulation {
    x0: f64,
    dx: f64,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl Tabulation {
    pub fn new(psi: &Wave1d, p: f64) -> Result<Self, TypicalityError> {
        check_exponent(p)?;
        let top = psi.levels().iter().copied().max().unwrap_or(0) as f64;
        // classical turning point plus enough Gaussian tail for |ψ|^p ~ e^{-p x²/2}
        let half = (2.0 * top + 1.0).sqrt() + 12.0 / p.sqrt();
        let dx = 2.0 * half / (TABLE_NODES - 1) as f64;
        let x0 = -half;
        let mut density: Vec<f64> =
            (0..TABLE_NODES).map(|i| psi.eval(x0 + i as f64 * dx, 0.0).norm().powf(p)).collect();
        let mut cdf = vec![0.0; TABLE_NODES];
        for i in 1..TABLE_NODES {
            cdf[i] = cdf[i - 1] + 0.5 * dx * (density[i - 1] + density[i]);
            if !(cdf[i].is_finite() && cdf[i] >= cdf[i - 1]) {
                return Err(TypicalityError::Tabulation { index: i });
            }
        }
        let total = cdf[TABLE_NODES - 1];
        if !(total > 0.0) {
            return Err(TypicalityError::Tabulation { index: TABLE_NODES - 1 });
        }
        for (d, c) in density.iter_mut().zip(cdf.iter_mut()) {
            *d /= total;
            *c /= total;
        }
        Ok(Self { x0, dx, density, cdf })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.x0, self.x0 + (TABLE_NODES - 1) as f64 * self.dx)
    }

    pub fn density(&self, x: f64) -> f64 {
        let s = (x - self.x0) / self.dx;
        if !(s >= 0.0 && s <= (TABLE_NODES - 1) as f64) {
            return 0.0;
        }
        let i = (s.floor() as usize).min(TABLE_NODES - 2);
        let f = s - i as f64;
        self.density[i] * (1.0 - f) + self.density[i + 1] * f
    }

    /// Probability of `[a, b]`, from the tabulated CDF.
    pub fn probability(&self, a: f64, b: f64) -> f64 {
        self.cdf_at(b) - self.cdf_at(a)
    }

    fn cdf_at(&self, x: f64) -> f64 {
        let s = (x - self.x0) / self.dx;
        if s <= 0.0 {
            return 0.0;
        }
        if s >= (TABLE_NODES - 1) as f64 {
            return 1.0;
        }
        let i = s.floor() as usize;
        let f = s - i as f64;
        // exact integral of the linear density over the partial panel
        let (d0, d1) = (self.density[i], self.density[i + 1]);
        self.cdf[i] + self.dx * f * (d0 + 0.5 * f * (d1 - d0))
    }

    /// Inverse of the piecewise-quadratic CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, TABLE_NODES - 1) - 1;
        let (d0, d1) = (self.density[i], self.density[i + 1]);
        let r = (u - self.cdf[i]) / self.dx;
        // solve d0 f + (d1 - d0) f²/2 = r for f in [0, 1]
        let a = 0.5 * (d1 - d0);
        let f = if a.abs() < 1e-12 * d0.abs().max(1e-300) {
            if d0 > 0.0 {
                r / d0
            } else {
                0.5
            }
        } else {
            let disc = (d0 * d0 + 4.0 * a * r).max(0.0);
            2.0 * r / (d0 + disc.sqrt())
        };
        self.x0 + (i as f64 + f.clamp(0.0, 1.0)) * self.dx
    }
}

/// Configurations of the `n` sub-systems, deterministic per seed.
pub fn sample_universe(exec: Execution, u: &ProductUniverse, seed: u64) -> Result<Vec<f64>, TypicalityError> {
    u.validate()?;
    let table = Tabulation::new(&u.psi, u.p)?;
    Ok(draw(exec, u.n, seed, |rng| table.quantile(rng.random::<f64>())))
}

fn draw<F>(exec: Execution, n: usize, seed: u64, sample: F) -> Vec<f64>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    exec.map_range(chunks, |c| {
        let mut rng = substream(seed, c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len).map(|_| sample(&mut rng)).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Histogram bins used for `n` samples.
pub fn bin_count(n: usize) -> usize {
    (2.0 * (n as f64).cbrt()).ceil() as usize
}

/// `Σ P̂ ln(P̂/Q)` between the sample histogram and the bin probabilities of
/// normalized `|ψ|^q`, over equal-width bins spanning the samples.
pub fn induced_distribution_divergence(samples: &[f64], psi: &Wave1d, q: f64) -> Result<f64, TypicalityError> {
    if samples.len() < MIN_SAMPLES {
        return Err(TypicalityError::TooFewSamples { needed: MIN_SAMPLES, got: samples.len() });
    }
    let table = Tabulation::new(psi, q)?;
    Ok(histogram_divergence(samples, |a, b| table.probability(a, b)))
}

fn histogram_divergence<P: Fn(f64, f64) -> f64>(samples: &[f64], prob: P) -> f64 {
    let bins = bin_count(samples.len());
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &x in samples {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let q: Vec<f64> = (0..bins).map(|b| prob(lo + b as f64 * width, lo + (b + 1) as f64 * width)).collect();
    let q_total: f64 = q.iter().sum();
    let n = samples.len() as f64;
    counts
        .iter()
        .zip(&q)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &qb)| {
            let p = c as f64 / n;
            p * (p / (qb / q_total).max(f64::MIN_POSITIVE)).ln()
        })
        .sum()
}

/// Divergence of each marginal from its own Born density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestingReport {
    pub first: f64,
    pub second: f64,
}

/// Cells per axis of the joint tabulation in [`nesting_check`].
const JOINT_CELLS: usize = 800;

/// Samples `(x, y)` from the joint `|ψ₁(x) ψ₂(y)|²` as one 2D density and
/// compares each marginal with `|ψ₁|²` and `|ψ₂|²`.
pub fn nesting_check(
    exec: Execution,
    first: &Wave1d,
    second: &Wave1d,
    n: usize,
    seed: u64,
) -> Result<NestingReport, TypicalityError> {
    if n < MIN_SAMPLES {
        return Err(TypicalityError::TooFewSamples { needed: MIN_SAMPLES, got: n });
    }
    let (ta, tb) = (Tabulation::new(first, 2.0)?, Tabulation::new(second, 2.0)?);
    let (ax, bx) = (ta.support(), tb.support());
    let (dx, dy) = ((ax.1 - ax.0) / JOINT_CELLS as f64, (bx.1 - bx.0) / JOINT_CELLS as f64);
    // cell masses of the joint density on the 2D grid, not of either factor alone
    let mut cdf = Vec::with_capacity(JOINT_CELLS * JOINT_CELLS);
    let mut acc = 0.0;
    for i in 0..JOINT_CELLS {
        let x = ax.0 + (i as f64 + 0.5) * dx;
        let px = first.eval(x, 0.0);
        for j in 0..JOINT_CELLS {
            let y = bx.0 + (j as f64 + 0.5) * dy;
            acc += (px * second.eval(y, 0.0)).norm_sqr() * dx * dy;
            cdf.push(acc);
        }
    }
    if !(acc > 0.0 && acc.is_finite()) {
        return Err(TypicalityError::Tabulation { index: cdf.len() });
    }
    let pairs: Vec<(f64, f64)> = exec
        .map_range(n.div_ceil(CHUNK), |c| {
            let mut rng = substream(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| {
                    let u = rng.random::<f64>() * acc;
                    let cell = cdf.partition_point(|&v| v <= u).min(cdf.len() - 1);
                    let (i, j) = (cell / JOINT_CELLS, cell % JOINT_CELLS);
                    let x = ax.0 + (i as f64 + rng.random::<f64>()) * dx;
                    let y = bx.0 + (j as f64 + rng.random::<f64>()) * dy;
                    (x, y)
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(NestingReport {
        first: histogram_divergence(&xs, |a, b| ta.probability(a, b)),
        second: histogram_divergence(&ys, |a, b| tb.probability(a, b)),
    })
}

/// One line of the p-versus-q comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub n: usize,
    pub p: f64,
    pub q: f64,
    pub kl: f64,
}

/// Samples under every exponent in `ps` and scores each sample set against
/// every exponent in `ps`.
pub fn contrast(
    exec: Execution,
    psi: &Wave1d,
    n: usize,
    ps: &[f64],
    seed: u64,
) -> Result<Vec<ContrastRow>, TypicalityError> {
    let mut rows = Vec::new();
    for &p in ps {
        let samples = sample_universe(exec, &ProductUniverse::new(psi.clone(), n, p)?, seed)?;
        for &q in ps {
            rows.push(ContrastRow { n, p, q, kl: induced_distribution_divergence(&samples, psi, q)? });
        }
    }
    Ok(rows)
}
