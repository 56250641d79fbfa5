//! A single scalar-field mode on radiation-dominated expanding space.
//!
//! Each real component of the mode is an oscillator of mass `m = a³` and
//! frequency `ω = k/a`, so the mode is a 2D oscillator with time-dependent
//! coefficients. The Hamiltonian separates: the wave function is assembled
//! from 1D factors evolved by Strang-split FFT stepping, and the density at
//! `t_f` is found by backtracking grid nodes to `t_i`.
//!
//! Time is parametrized by the accumulated phase `θ = ∫ ω dt`, so a fixed
//! step in `θ` resolves every mode equally well whatever its wavelength.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::fit::{levenberg_marquardt, FitError};
use crate::wavefield::{hermite_functions, Superposition, WaveError};

/// Largest number of 1D levels per axis.
pub const MAX_LEVELS: usize = 8;
pub const NORM_DRIFT_LIMIT: f64 = 1e-5;
pub const DROP_FAIL_FRACTION: f64 = 1e-3;
/// Nodes with `|ψ|²` below this are treated as sitting on a node.
const NODE_DENSITY: f64 = 1e-300;
/// Largest RK4 stage displacement, in eigenstate widths, accepted without
/// sub-stepping.
const MAX_STAGE_JUMP: f64 = 0.2;
const MIN_SUBSTEP: f64 = 1.0 / 1024.0;
pub const DROP_FLAG_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CosmoError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("wave function norm drifted by {drift:e}")]
    NormDrift { drift: f64 },
    #[error("{dropped} of {total} grid nodes failed to backtrack")]
    TooManyDrops { dropped: usize, total: usize },
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// `a(t) = a_i (t/t_i)^{1/2}`.
    #[default]
    Radiation,
    /// `a(t) = a_i`: the same oscillator on static space.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosmoParams {
    pub a_i: f64,
    pub t_i: f64,
    pub t_f: f64,
    pub k: f64,
    #[serde(default)]
    pub expansion: Expansion,
}

impl CosmoParams {
    /// Parameters whose physical wavelength at `t_i` is `ratio` Hubble radii.
    pub fn from_hubble_ratio(ratio: f64, a_i: f64, t_i: f64, t_f: f64, expansion: Expansion) -> Self {
        Self { a_i, t_i, t_f, k: PI * a_i / (ratio * t_i), expansion }
    }

    pub fn validate(&self) -> Result<(), CosmoError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.a_i) && ok(self.t_i) && ok(self.t_f) && ok(self.k)) {
            return Err(CosmoError::InvalidParams("a_i, t_i, t_f and k must be positive".into()));
        }
        if self.t_f <= self.t_i {
            return Err(CosmoError::InvalidParams(format!("need t_i < t_f, got {} >= {}", self.t_i, self.t_f)));
        }
        Ok(())
    }

    pub fn with_expansion(self, expansion: Expansion) -> Self {
        Self { expansion, ..self }
    }

    pub fn scale_factor(&self, t: f64) -> f64 {
        match self.expansion {
            Expansion::Radiation => self.a_i * (t / self.t_i).sqrt(),
            Expansion::Static => self.a_i,
        }
    }

    pub fn mass(&self, t: f64) -> f64 {
        self.scale_factor(t).powi(3)
    }

    pub fn omega(&self, t: f64) -> f64 {
        self.k / self.scale_factor(t)
    }

    /// `a/ȧ`; infinite on static space.
    pub fn hubble_radius(&self, t: f64) -> f64 {
        match self.expansion {
            Expansion::Radiation => 2.0 * t,
            Expansion::Static => f64::INFINITY,
        }
    }

    pub fn lambda_phys(&self, t: f64) -> f64 {
        2.0 * PI * self.scale_factor(t) / self.k
    }

    /// `λ_phys / H⁻¹` at `t_i` on radiation-dominated space.
    pub fn lambda_over_hubble_at_ti(&self) -> f64 {
        PI * self.a_i / (self.k * self.t_i)
    }

    /// Accumulated phase `θ(t) = ∫_{t_i}^t ω dt'`.
    pub fn phase(&self, t: f64) -> f64 {
        match self.expansion {
            Expansion::Radiation => 2.0 * self.k / self.a_i * self.t_i.sqrt() * (t.sqrt() - self.t_i.sqrt()),
            Expansion::Static => self.k / self.a_i * (t - self.t_i),
        }
    }

    pub fn time_at_phase(&self, theta: f64) -> f64 {
        match self.expansion {
            Expansion::Radiation => {
                let s = self.t_i.sqrt() + theta * self.a_i / (2.0 * self.k * self.t_i.sqrt());
                s * s
            }
            Expansion::Static => self.t_i + theta * self.a_i / self.k,
        }
    }

    /// `m ω = a² k`, the inverse squared length scale of the instantaneous eigenstates.
    fn m_omega(&self, t: f64) -> f64 {
        let a = self.scale_factor(t);
        a * a * self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialRho {
    /// `ρ₀(q) = |ψ₀(q/w)|²/w²`: the equilibrium shape contracted by `w`.
    Contracted { width: f64 },
    Equilibrium,
}

impl Default for InitialRho {
    fn default() -> Self {
        InitialRho::Contracted { width: 0.5 }
    }
}

/// Coefficients over products of instantaneous eigenstates at `t_i`, and the
/// initial density.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    levels: usize,
    coeffs: Vec<Complex64>,
    pub state: Superposition,
    pub rho: InitialRho,
}

impl InitialData {
    pub fn new(state: Superposition, rho: InitialRho) -> Result<Self, CosmoError> {
        let levels = state.modes().iter().map(|m| m.m.max(m.n) as usize + 1).max().unwrap_or(1);
        if levels > MAX_LEVELS {
            return Err(CosmoError::InvalidParams(format!("at most {MAX_LEVELS} levels per axis, got {levels}")));
        }
        if let InitialRho::Contracted { width } = rho {
            if !(width > 0.0 && width.is_finite()) {
                return Err(CosmoError::InvalidParams(format!("contraction width must be positive, got {width}")));
            }
        }
        let mut coeffs = vec![Complex64::new(0.0, 0.0); levels * levels];
        for (mode, &c) in state.modes().iter().zip(state.coeffs()) {
            coeffs[mode.m as usize * levels + mode.n as usize] = c;
        }
        Ok(Self { levels, coeffs, state, rho })
    }

    /// Equal-weight random-phase superposition of all `side × side` product modes.
    pub fn random(side: u32, seed: u64, rho: InitialRho) -> Result<Self, CosmoError> {
        Self::new(Superposition::equal_weight_random_phase(Superposition::square_modes(side), seed)?, rho)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    fn psi0(&self, params: &CosmoParams, q: [f64; 2]) -> Complex64 {
        let mw = params.m_omega(params.t_i);
        let scale = mw.sqrt();
        let norm = mw.sqrt().sqrt();
        let mut h1 = [0.0; MAX_LEVELS];
        let mut h2 = [0.0; MAX_LEVELS];
        hermite_functions(scale * q[0], &mut h1[..self.levels]);
        hermite_functions(scale * q[1], &mut h2[..self.levels]);
        let mut psi = Complex64::new(0.0, 0.0);
        for m in 0..self.levels {
            let mut row = Complex64::new(0.0, 0.0);
            for n in 0..self.levels {
                row += self.coeffs[m * self.levels + n] * h2[n];
            }
            psi += row * h1[m];
        }
        psi * (norm * norm)
    }

    fn rho0(&self, params: &CosmoParams, q: [f64; 2]) -> f64 {
        match self.rho {
            InitialRho::Equilibrium => self.psi0(params, q).norm_sqr(),
            InitialRho::Contracted { width } => {
                self.psi0(params, [q[0] / width, q[1] / width]).norm_sqr() / (width * width)
            }
        }
    }

    /// `ρ₀/|ψ₀|²` at `q`, or `None` on a node of `ψ₀`.
    fn f_ratio(&self, params: &CosmoParams, q: [f64; 2]) -> Option<f64> {
        let psi2 = self.psi0(params, q).norm_sqr();
        if !(psi2 > 1e-300) {
            return None;
        }
        let rho = match self.rho {
            InitialRho::Equilibrium => psi2,
            InitialRho::Contracted { .. } => self.rho0(params, q),
        };
        Some(rho / psi2)
    }
}

fn default_dtheta() -> f64 {
    0.05
}
fn default_tolerance() -> f64 {
    1e-3
}
fn default_max_refinements() -> u32 {
    3
}
fn default_rho_cells() -> usize {
    64
}
fn default_sample_cells() -> usize {
    64
}
fn default_coarse_block() -> usize {
    4
}
fn default_tail_cutoff() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    /// Initial split step in phase units.
    #[serde(default = "default_dtheta")]
    pub dtheta: f64,
    /// Halve the step until ξ changes by less than this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_refinements")]
    pub max_refinements: u32,
    /// Density grid cells per axis at `t_f`.
    #[serde(default = "default_rho_cells")]
    pub rho_cells: usize,
    /// Quadrature nodes per axis over the initial density, carried forward
    /// for the second moment of ρ.
    #[serde(default = "default_sample_cells")]
    pub sample_cells: usize,
    /// Coarse-graining block (fine cells per side) for H̄.
    #[serde(default = "default_coarse_block")]
    pub coarse_block: usize,
    /// Nodes where `|ψ|²` is below this fraction of its peak are not
    /// backtracked and are excluded from all moments.
    #[serde(default = "default_tail_cutoff")]
    pub tail_cutoff: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            dtheta: default_dtheta(),
            tolerance: default_tolerance(),
            max_refinements: default_max_refinements(),
            rho_cells: default_rho_cells(),
            sample_cells: default_sample_cells(),
            coarse_block: default_coarse_block(),
            tail_cutoff: default_tail_cutoff(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<(), CosmoError> {
        if !(self.dtheta > 0.0 && self.dtheta.is_finite()) {
            return Err(CosmoError::InvalidParams("dtheta must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(CosmoError::InvalidParams("tolerance must be positive".into()));
        }
        if self.rho_cells < 8 || self.coarse_block < 1 || self.rho_cells % self.coarse_block != 0 {
            return Err(CosmoError::InvalidParams(format!(
                "rho_cells ({}) must be at least 8 and a multiple of coarse_block ({})",
                self.rho_cells, self.coarse_block
            )));
        }
        if self.sample_cells < 8 {
            return Err(CosmoError::InvalidParams(format!("sample_cells must be at least 8, got {}", self.sample_cells)));
        }
        if !(self.tail_cutoff >= 0.0 && self.tail_cutoff < 1.0) {
            return Err(CosmoError::InvalidParams("tail_cutoff must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Gaussian solution `exp(-A q²/2 + B)` of the 1D Schrödinger equation,
/// started from the instantaneous ground state at `t_i`.
///
/// `A` obeys the Riccati equation `dA/dt = -i (A²/m - a k²)`. Integrated with
/// classical RK4 in `θ` over `steps` steps; returns `(A, B)` at each step.
pub fn gaussian_track(params: &CosmoParams, steps: usize) -> Vec<(f64, Complex64, Complex64)> {
    let total = params.phase(params.t_f);
    let h = total / steps as f64;
    let rhs = |theta: f64, y: [Complex64; 2]| -> [Complex64; 2] {
        let t = params.time_at_phase(theta);
        let (m, a) = (params.mass(t), params.scale_factor(t));
        let dt_dtheta = 1.0 / params.omega(t);
        let i = Complex64::i();
        let da = -i * (y[0] * y[0] / m - a * params.k * params.k) * dt_dtheta;
        let db = -i * y[0] / (2.0 * m) * dt_dtheta;
        [da, db]
    };
    let a0 = params.m_omega(params.t_i);
    let mut y = [Complex64::new(a0, 0.0), Complex64::new(0.25 * (a0 / PI).ln(), 0.0)];
    let mut out = Vec::with_capacity(steps + 1);
    out.push((params.t_i, y[0], y[1]));
    let add = |y: [Complex64; 2], k: [Complex64; 2], s: f64| [y[0] + k[0] * s, y[1] + k[1] * s];
    for n in 0..steps {
        let th = n as f64 * h;
        let k1 = rhs(th, y);
        let k2 = rhs(th + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = rhs(th + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = rhs(th + h, add(y, k3, h));
        for c in 0..2 {
            y[c] += (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]) * (h / 6.0);
        }
        out.push((params.time_at_phase(th + h), y[0], y[1]));
    }
    out
}

/// Periodic 1D grid on `[-L, L)` with its FFT plans.
struct FactorGrid {
    n: usize,
    x0: f64,
    dx: f64,
    x2: Vec<f64>,
    p: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FactorGrid {
    /// Sized from the Gaussian envelope: covers ten position widths at the
    /// widest and ten momentum widths at the sharpest moment of the run.
    fn for_run(params: &CosmoParams, levels: usize) -> Self {
        let track = gaussian_track(params, 2000);
        let (mut sq, mut sp) = (0.0f64, 0.0f64);
        for &(_, a, _) in &track {
            sq = sq.max(1.0 / (2.0 * a.re).sqrt());
            sp = sp.max(a.norm() / (2.0 * a.re).sqrt());
        }
        let reach = 10.0 + (2.0 * levels as f64).sqrt();
        let half_width = reach * sq;
        let p_max = reach * sp;
        let needed = (2.0 * half_width * p_max / PI).ceil() as usize;
        let n = needed.next_power_of_two().max(128);
        Self::new(half_width, n)
    }

    fn new(half_width: f64, n: usize) -> Self {
        let dx = 2.0 * half_width / n as f64;
        let x0 = -half_width;
        let x2 = (0..n).map(|i| (x0 + i as f64 * dx).powi(2)).collect();
        let dp = 2.0 * PI / (2.0 * half_width);
        let p = (0..n)
            .map(|j| {
                if j < n / 2 {
                    j as f64 * dp
                } else if j == n / 2 {
                    0.0 // Nyquist: odd derivatives are undefined there
                } else {
                    (j as f64 - n as f64) * dp
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        Self { n, x0, dx, x2, p, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    /// |p|² including the Nyquist mode.
    fn p2(&self, j: usize) -> f64 {
        if j == self.n / 2 {
            let pn = PI / self.dx;
            pn * pn
        } else {
            self.p[j] * self.p[j]
        }
    }
}

/// The 1D factors `ψ_j(q, t)`, one per level, sharing a grid.
struct Factors {
    grid: FactorGrid,
    psi: Vec<Vec<Complex64>>,
    scratch: Vec<Complex64>,
}

impl Factors {
    fn initial(params: &CosmoParams, levels: usize, grid: FactorGrid) -> Self {
        let mw = params.m_omega(params.t_i);
        let scale = mw.sqrt();
        let norm = mw.sqrt().sqrt();
        let mut psi = vec![vec![Complex64::new(0.0, 0.0); grid.n]; levels];
        let mut h = [0.0; MAX_LEVELS];
        for i in 0..grid.n {
            hermite_functions(scale * grid.x(i), &mut h[..levels]);
            for j in 0..levels {
                psi[j][i] = Complex64::new(norm * h[j], 0.0);
            }
        }
        let scratch = vec![Complex64::new(0.0, 0.0); grid.fwd.get_inplace_scratch_len().max(grid.n)];
        Self { grid, psi, scratch }
    }

    fn norms(&self) -> Vec<f64> {
        self.psi.iter().map(|f| f.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.grid.dx).collect()
    }

    /// One Strang step from `t0` to `t1` with coefficients frozen at the
    /// midpoint. Stepping back from `t1` to `t0` is its exact inverse.
    fn step(&mut self, params: &CosmoParams, t0: f64, t1: f64) {
        let dt = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let a = params.scale_factor(tm);
        let m = a * a * a;
        let v_coef = 0.5 * a * params.k * params.k;
        let n = self.grid.n;
        let half_v: Vec<Complex64> = self.grid.x2.iter().map(|&x2| Complex64::cis(-v_coef * x2 * 0.5 * dt)).collect();
        let kin: Vec<Complex64> = (0..n).map(|j| Complex64::cis(-self.grid.p2(j) / (2.0 * m) * dt)).collect();
        let inv_n = 1.0 / n as f64;
        for f in self.psi.iter_mut() {
            for (c, v) in f.iter_mut().zip(&half_v) {
                *c *= v;
            }
            self.grid.fwd.process_with_scratch(f, &mut self.scratch);
            for (c, k) in f.iter_mut().zip(&kin) {
                *c *= k * inv_n;
            }
            self.grid.inv.process_with_scratch(f, &mut self.scratch);
            for (c, v) in f.iter_mut().zip(&half_v) {
                *c *= v;
            }
        }
    }

    /// `⟨q₁² + q₂²⟩` of the normalized 2D state built from the factors.
    fn second_moment(&self, coeffs: &[Complex64]) -> f64 {
        let levels = self.psi.len();
        let zero = Complex64::new(0.0, 0.0);
        let mut s = vec![zero; levels * levels];
        let mut x = vec![zero; levels * levels];
        for a in 0..levels {
            for b in 0..levels {
                for (i, (u, v)) in self.psi[a].iter().zip(&self.psi[b]).enumerate() {
                    let p = u.conj() * v;
                    s[a * levels + b] += p;
                    x[a * levels + b] += p * self.grid.x2[i];
                }
            }
        }
        let (mut norm, mut moment) = (zero, zero);
        for m in 0..levels {
            for n in 0..levels {
                let c = coeffs[m * levels + n].conj();
                for m2 in 0..levels {
                    for n2 in 0..levels {
                        let d = c * coeffs[m2 * levels + n2];
                        let (smm, snn) = (s[m * levels + m2], s[n * levels + n2]);
                        norm += d * smm * snn;
                        moment += d * (x[m * levels + m2] * snn + smm * x[n * levels + n2]);
                    }
                }
            }
        }
        moment.re / norm.re
    }

    /// Values and the first three derivatives at every node.
    fn interpolant(&mut self) -> Interpolant {
        let n = self.grid.n;
        let levels = self.psi.len();
        let mut data = vec![Complex64::new(0.0, 0.0); n * levels * 4];
        let inv_n = 1.0 / n as f64;
        let i = Complex64::i();
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        let mut work = vec![Complex64::new(0.0, 0.0); n];
        for (j, f) in self.psi.iter().enumerate() {
            spec.copy_from_slice(f);
            self.grid.fwd.process_with_scratch(&mut spec, &mut self.scratch);
            for (node, &v) in f.iter().enumerate() {
                data[(node * levels + j) * 4] = v;
            }
            for d in 1..4 {
                for (w, (s, &p)) in work.iter_mut().zip(spec.iter().zip(&self.grid.p)) {
                    *w = s * (i * p).powi(d as i32) * inv_n;
                }
                self.grid.inv.process_with_scratch(&mut work, &mut self.scratch);
                for (node, &v) in work.iter().enumerate() {
                    data[(node * levels + j) * 4 + d] = v;
                }
            }
        }
        Interpolant { x0: self.grid.x0, dx: self.grid.dx, n, levels, data }
    }
}

/// Quintic Hermite interpolation of every factor and its derivative.
struct Interpolant {
    x0: f64,
    dx: f64,
    n: usize,
    levels: usize,
    data: Vec<Complex64>,
}

impl Interpolant {
    /// Writes `ψ_j(x)` and `ψ_j'(x)`; `false` outside the grid.
    fn eval(&self, x: f64, val: &mut [Complex64; MAX_LEVELS], der: &mut [Complex64; MAX_LEVELS]) -> bool {
        let u = (x - self.x0) / self.dx;
        if !(u >= 0.0) {
            return false;
        }
        let i = u as usize;
        if i + 1 >= self.n {
            return false;
        }
        let t = u - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        let h = self.dx;
        let wl = [1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5, h * (t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5), h * h * (0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5)];
        let wr = [10.0 * t3 - 15.0 * t4 + 6.0 * t5, h * (-4.0 * t3 + 7.0 * t4 - 3.0 * t5), h * h * (0.5 * t3 - t4 + 0.5 * t5)];
        let l = self.levels;
        let left = &self.data[i * l * 4..(i + 1) * l * 4];
        let right = &self.data[(i + 1) * l * 4..(i + 2) * l * 4];
        for j in 0..l {
            let a = &left[j * 4..j * 4 + 4];
            let b = &right[j * 4..j * 4 + 4];
            val[j] = a[0] * wl[0] + a[1] * wl[1] + a[2] * wl[2] + b[0] * wr[0] + b[1] * wr[1] + b[2] * wr[2];
            der[j] = a[1] * wl[0] + a[2] * wl[1] + a[3] * wl[2] + b[1] * wr[0] + b[2] * wr[1] + b[3] * wr[2];
        }
        true
    }

    /// `ψ`, `∂₁ψ`, `∂₂ψ` of the 2D state at `q`.
    fn psi2d(&self, coeffs: &[Complex64], q: [f64; 2]) -> Option<[Complex64; 3]> {
        let zero = Complex64::new(0.0, 0.0);
        let (mut a, mut da, mut b, mut db) = ([zero; MAX_LEVELS], [zero; MAX_LEVELS], [zero; MAX_LEVELS], [zero; MAX_LEVELS]);
        if !(self.eval(q[0], &mut a, &mut da) && self.eval(q[1], &mut b, &mut db)) {
            return None;
        }
        let l = self.levels;
        let (mut psi, mut d1, mut d2) = (zero, zero, zero);
        for m in 0..l {
            let row = &coeffs[m * l..(m + 1) * l];
            let (mut c, mut d) = (zero, zero);
            for n in 0..l {
                c += row[n] * b[n];
                d += row[n] * db[n];
            }
            psi += a[m] * c;
            d1 += da[m] * c;
            d2 += a[m] * d;
        }
        Some([psi, d1, d2])
    }

    /// `dq/dθ = Im(∇ψ/ψ) / (m ω)`.
    fn velocity(&self, coeffs: &[Complex64], q: [f64; 2], m_omega: f64) -> Option<[f64; 2]> {
        let [psi, d1, d2] = self.psi2d(coeffs, q)?;
        let rho = psi.norm_sqr();
        if !(rho > NODE_DENSITY) {
            return None;
        }
        let s = 1.0 / (rho * m_omega);
        Some([(d1 * psi.conj()).im * s, (d2 * psi.conj()).im * s])
    }
}

/// The state at the start, middle and end of one backtracking step.
struct Window<'a> {
    levels: [&'a Interpolant; 3],
    m_omega: [f64; 3],
    coeffs: &'a [Complex64],
    /// Signed step in θ from the first level to the last.
    h: f64,
}

impl Window<'_> {
    fn rk4<V: Fn(usize, [f64; 2]) -> Option<[f64; 2]>>(
        q: [f64; 2],
        h: f64,
        v: V,
        max_jump: f64,
    ) -> Option<[f64; 2]> {
        let add = |a: [f64; 2], k: [f64; 2], s: f64| [a[0] + s * k[0], a[1] + s * k[1]];
        let jump = |k: [f64; 2]| (k[0].hypot(k[1]) * h.abs() <= max_jump).then_some(k);
        let k1 = jump(v(0, q)?)?;
        let k2 = jump(v(1, add(q, k1, 0.5 * h))?)?;
        let k3 = jump(v(1, add(q, k2, 0.5 * h))?)?;
        let k4 = jump(v(2, add(q, k3, h))?)?;
        Some([
            q[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            q[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ])
    }

    /// Velocity at fraction `tau` of the step, from quadratic interpolation
    /// in time of `ψ` and `∇ψ` through the three levels.
    fn velocity_at(&self, tau: f64, q: [f64; 2]) -> Option<[f64; 2]> {
        let w = [2.0 * (tau - 0.5) * (tau - 1.0), -4.0 * tau * (tau - 1.0), 2.0 * tau * (tau - 0.5)];
        let zero = Complex64::new(0.0, 0.0);
        let mut acc = [zero; 3];
        for (lvl, wt) in self.levels.iter().zip(w) {
            let v = lvl.psi2d(self.coeffs, q)?;
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b * wt;
            }
        }
        let [psi, d1, d2] = acc;
        let rho = psi.norm_sqr();
        if !(rho > NODE_DENSITY) {
            return None;
        }
        let mw = w.iter().zip(self.m_omega).map(|(a, b)| a * b).sum::<f64>();
        let s = 1.0 / (rho * mw);
        Some([(d1 * psi.conj()).im * s, (d2 * psi.conj()).im * s])
    }

    /// One step; points near a moving node fall back to sub-steps with the
    /// wave function interpolated in time.
    fn advance(&self, q: [f64; 2]) -> Option<[f64; 2]> {
        let width = 1.0 / self.m_omega[0].max(self.m_omega[2]).sqrt();
        let direct = |i: usize, x: [f64; 2]| self.levels[i].velocity(self.coeffs, x, self.m_omega[i]);
        if let Some(next) = Self::rk4(q, self.h, direct, MAX_STAGE_JUMP * width) {
            return Some(next);
        }
        // adaptive sub-steps in τ; the jump limit is dropped only at the finest level
        let (mut tau, mut dt, mut x) = (0.0, 0.5, q);
        while tau < 1.0 {
            dt = f64::min(dt, 1.0 - tau);
            let finest = dt <= MIN_SUBSTEP;
            let limit = if finest { f64::INFINITY } else { MAX_STAGE_JUMP * width };
            let v = |i: usize, y: [f64; 2]| self.velocity_at(tau + 0.5 * dt * i as f64, y);
            match Self::rk4(x, self.h * dt, v, limit) {
                Some(next) => {
                    x = next;
                    tau += dt;
                    dt = f64::min(2.0 * dt, 0.5);
                }
                None if finest => return None,
                None => dt *= 0.5,
            }
        }
        Some(x)
    }
}

/// Density grid over the `|ψ|²` support at the end of a run. Excluded nodes
/// (tails below the cutoff, failed backtracks) hold NaN in both arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub half_width: f64,
    pub cells: usize,
    pub t: f64,
    pub psi2: Vec<f64>,
    pub rho: Vec<f64>,
    pub dropped: usize,
    /// Dropped fraction reached the reporting threshold.
    pub flagged: bool,
    pub skipped: usize,
    /// Largest change of any 1D factor norm over the run.
    pub norm_drift: f64,
    /// Split steps used over `(t_i, t_f)`.
    pub steps: usize,
    /// `⟨q₁² + q₂²⟩_ρ`, by quadrature over initial nodes carried forward.
    pub rho_second_moment: f64,
    /// `⟨q₁² + q₂²⟩_{|ψ|²}` by the same quadrature with weights `|ψ₀|²`.
    pub psi2_second_moment: f64,
    /// `⟨q₁² + q₂²⟩_{|ψ|²}` from the 1D factors; differs from the quadrature
    /// value only by integration and quadrature error.
    pub psi2_exact_second_moment: f64,
    /// Initial-density quadrature nodes carried forward, and how many failed.
    pub samples: usize,
    pub samples_dropped: usize,
}

impl ModeState {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.spacing()
    }

    pub fn rho_mass(&self) -> f64 {
        let da = self.spacing().powi(2);
        self.rho.iter().filter(|v| !v.is_nan()).sum::<f64>() * da
    }

    pub fn psi2_mass(&self) -> f64 {
        let da = self.spacing().powi(2);
        self.psi2.iter().filter(|v| !v.is_nan()).sum::<f64>() * da
    }

    /// Coarse H̄ over `block × block` cells, both densities normalized.
    pub fn hbar(&self, block: usize) -> f64 {
        let side = self.cells / block;
        let mut rho_bar = vec![0.0; side * side];
        let mut psi_bar = vec![0.0; side * side];
        for r in 0..side * block {
            for c in 0..side * block {
                let idx = r * self.cells + c;
                if self.rho[idx].is_nan() {
                    continue;
                }
                let cell = (r / block) * side + c / block;
                rho_bar[cell] += self.rho[idx];
                psi_bar[cell] += self.psi2[idx];
            }
        }
        let (sr, sp) = (rho_bar.iter().sum::<f64>(), psi_bar.iter().sum::<f64>());
        rho_bar
            .iter()
            .zip(&psi_bar)
            .filter(|(&r, _)| r > 0.0)
            .map(|(&r, &p)| {
                let (r, p) = (r / sr, p / sp);
                if p > 0.0 {
                    r * (r / p).ln()
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// `⟨q₁² + q₂²⟩_ρ / ⟨q₁² + q₂²⟩_{|ψ|²}` at the end of the run, both from
/// the same forward quadrature.
pub fn xi_of_run(state: &ModeState) -> f64 {
    state.rho_second_moment / state.psi2_second_moment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub state: ModeState,
    pub xi: f64,
    pub hbar: f64,
    pub dtheta: f64,
    /// `(dtheta, ξ, H̄)` for every step size tried.
    pub history: Vec<(f64, f64, f64)>,
    pub converged: bool,
}

/// Evolves the mode from `t_i` to `t_f`, halving the step until ξ settles.
pub fn evolve_mode(
    exec: Execution,
    params: &CosmoParams,
    init: &InitialData,
    cfg: &EvolveConfig,
) -> Result<ModeRun, CosmoError> {
    params.validate()?;
    cfg.validate()?;
    let mut dtheta = cfg.dtheta;
    let mut history = Vec::new();
    let mut prev: Option<(ModeState, f64, f64)> = None;
    for _ in 0..=cfg.max_refinements {
        let state = run_at_step(exec, params, init, cfg, dtheta)?;
        let xi = xi_of_run(&state);
        let hbar = state.hbar(cfg.coarse_block);
        history.push((dtheta, xi, hbar));
        if let Some((_, pxi, _)) = &prev {
            if (xi - pxi).abs() < cfg.tolerance {
                return Ok(ModeRun { state, xi, hbar, dtheta, history, converged: true });
            }
        }
        prev = Some((state, xi, hbar));
        dtheta *= 0.5;
    }
    let (state, xi, hbar) = prev.expect("at least one run");
    Ok(ModeRun { state, xi, hbar, dtheta: dtheta * 2.0, history, converged: false })
}

/// Half-width beyond which every factor has less than `tail` probability.
fn support_half_width(factors: &Factors, tail: f64) -> f64 {
    let g = &factors.grid;
    let mut reach = 0.0f64;
    for f in &factors.psi {
        let total: f64 = f.iter().map(|c| c.norm_sqr()).sum();
        let mut acc = 0.0;
        // walk inwards from both ends together
        for d in 0..g.n / 2 {
            acc += f[d].norm_sqr() + f[g.n - 1 - d].norm_sqr();
            if acc > tail * total {
                reach = reach.max(g.x(g.n - 1 - d).abs().max(g.x(d).abs()));
                break;
            }
        }
    }
    reach
}

fn run_at_step(
    exec: Execution,
    params: &CosmoParams,
    init: &InitialData,
    cfg: &EvolveConfig,
    dtheta: f64,
) -> Result<ModeState, CosmoError> {
    let total = params.phase(params.t_f);
    let pairs = (total / (2.0 * dtheta)).ceil().max(1.0) as usize;
    let steps = 2 * pairs;
    let h = total / steps as f64;
    let time = |n: usize| if n == steps { params.t_f } else { params.time_at_phase(n as f64 * h) };

    const CHUNK: usize = 256;
    let grid = FactorGrid::for_run(params, init.levels);
    let mut factors = Factors::initial(params, init.levels, grid);
    let norms0 = factors.norms();

    // quadrature nodes over the initial support, carried forward with weights
    // ρ₀ and |ψ₀|² so that both moments share the same nodes
    let reach = support_half_width(&factors, 1e-12)
        * match init.rho {
            InitialRho::Contracted { width } => width.max(1.0),
            InitialRho::Equilibrium => 1.0,
        };
    let sc = cfg.sample_cells;
    let node = |i: usize| -reach + (i as f64 + 0.5) * 2.0 * reach / sc as f64;
    let weights: Vec<(f64, f64)> = (0..sc * sc)
        .map(|idx| {
            let q = [node(idx % sc), node(idx / sc)];
            (init.rho0(params, q), init.psi0(params, q).norm_sqr())
        })
        .collect();
    let peak_rho = weights.iter().map(|w| w.0).fold(0.0, f64::max);
    let peak_psi = weights.iter().map(|w| w.1).fold(0.0, f64::max);
    let seeds: Vec<usize> = (0..weights.len())
        .filter(|&i| weights[i].0 >= cfg.tail_cutoff * peak_rho || weights[i].1 >= cfg.tail_cutoff * peak_psi)
        .collect();
    let mut fwd: Vec<Option<[f64; 2]>> = seeds.iter().map(|&idx| Some([node(idx % sc), node(idx / sc)])).collect();

    let mut interp = factors.interpolant();
    for s in 0..pairs {
        let (t0, t1, t2) = (time(2 * s), time(2 * s + 1), time(2 * s + 2));
        factors.step(params, t0, t1);
        let mid = factors.interpolant();
        factors.step(params, t1, t2);
        let end = factors.interpolant();
        let window = Window {
            levels: [&interp, &mid, &end],
            m_omega: [params.m_omega(t0), params.m_omega(t1), params.m_omega(t2)],
            coeffs: &init.coeffs,
            h: 2.0 * h,
        };
        let chunks = fwd.len().div_ceil(CHUNK);
        let updated: Vec<Vec<Option<[f64; 2]>>> = exec.map_range(chunks, |c| {
            fwd[c * CHUNK..((c + 1) * CHUNK).min(fwd.len())].iter().map(|p| window.advance((*p)?)).collect()
        });
        fwd = updated.into_iter().flatten().collect();
        interp = end;
    }
    let (mut sums, mut samples_dropped) = ([0.0; 4], 0);
    for (&idx, p) in seeds.iter().zip(&fwd) {
        match p {
            Some(q) => {
                let (wr, wp) = weights[idx];
                let q2 = q[0] * q[0] + q[1] * q[1];
                sums[0] += wr;
                sums[1] += wr * q2;
                sums[2] += wp;
                sums[3] += wp * q2;
            }
            None => samples_dropped += 1,
        }
    }
    let drift = factors.norms().iter().zip(&norms0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if drift > NORM_DRIFT_LIMIT {
        return Err(CosmoError::NormDrift { drift });
    }

    // density grid at t_f
    let half_width = support_half_width(&factors, 1e-10);
    let psi2_exact_second_moment = factors.second_moment(&init.coeffs);
    let cells = cfg.rho_cells;
    let spacing = 2.0 * half_width / cells as f64;
    let coord = |i: usize| -half_width + (i as f64 + 0.5) * spacing;
    let psi2: Vec<f64> = (0..cells * cells)
        .map(|idx| {
            let q = [coord(idx % cells), coord(idx / cells)];
            interp.psi2d(&init.coeffs, q).map_or(0.0, |v| v[0].norm_sqr())
        })
        .collect();
    let peak = psi2.iter().cloned().fold(0.0, f64::max);
    let active: Vec<usize> = (0..psi2.len()).filter(|&i| psi2[i] >= cfg.tail_cutoff * peak).collect();
    let mut pos: Vec<Option<[f64; 2]>> =
        active.iter().map(|&idx| Some([coord(idx % cells), coord(idx / cells)])).collect();

    // backtrack in pairs of split steps: one RK4 step in θ spans t_{2s+2} -> t_{2s}
    let hstep = -2.0 * h;
    for s in (0..pairs).rev() {
        let (t2, t1, t0) = (time(2 * s + 2), time(2 * s + 1), time(2 * s));
        factors.step(params, t2, t1);
        let mid = factors.interpolant();
        factors.step(params, t1, t0);
        let end = factors.interpolant();
        let (w2, w1, w0) = (params.m_omega(t2), params.m_omega(t1), params.m_omega(t0));
        let start = &interp;
        let chunks = pos.len().div_ceil(CHUNK);
        let window = Window { levels: [start, &mid, &end], m_omega: [w2, w1, w0], coeffs: &init.coeffs, h: hstep };
        let updated: Vec<Vec<Option<[f64; 2]>>> = exec.map_range(chunks, |c| {
            pos[c * CHUNK..((c + 1) * CHUNK).min(pos.len())].iter().map(|p| window.advance((*p)?)).collect()
        });
        pos = updated.into_iter().flatten().collect();
        interp = end;
    }

    let mut rho = vec![f64::NAN; cells * cells];
    let mut psi2_out = vec![f64::NAN; cells * cells];
    let mut dropped = 0;
    for (&idx, p) in active.iter().zip(&pos) {
        match p.and_then(|q0| init.f_ratio(params, q0)) {
            Some(f) => {
                rho[idx] = psi2[idx] * f;
                psi2_out[idx] = psi2[idx];
            }
            None => dropped += 1,
        }
    }
    let total = active.len() + seeds.len();
    let lost = dropped + samples_dropped;
    if lost as f64 >= DROP_FAIL_FRACTION * total as f64 && lost > 0 {
        return Err(CosmoError::TooManyDrops { dropped: lost, total });
    }
    Ok(ModeState {
        half_width,
        cells,
        t: params.t_f,
        psi2: psi2_out,
        rho,
        dropped,
        flagged: lost as f64 >= DROP_FLAG_FRACTION * total as f64,
        skipped: cells * cells - active.len(),
        norm_drift: drift,
        steps,
        rho_second_moment: sums[1] / sums[0],
        psi2_second_moment: sums[3] / sums[2],
        psi2_exact_second_moment,
        samples: seeds.len(),
        samples_dropped,
    })
}

/// `ξ(k) = tan⁻¹(c₁ k/π + c₂) − π/2 + c₃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deficit {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Deficit {
    pub fn eval(&self, k: f64) -> f64 {
        (self.c1 * k / PI + self.c2).atan() - PI / 2.0 + self.c3
    }

    fn gradient(&self, k: f64) -> [f64; 3] {
        let u = self.c1 * k / PI + self.c2;
        let d = 1.0 / (1.0 + u * u);
        [d * k / PI, d, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeficitFit {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Root of the residual sum of squares.
    pub residual: f64,
}

impl DeficitFit {
    pub fn deficit(&self) -> Deficit {
        Deficit { c1: self.c1, c2: self.c2, c3: self.c3 }
    }
}

/// Least-squares arctan fit. A coarse search over `(c₁, c₂)`, with `c₃`
/// solved exactly at each point, seeds Levenberg–Marquardt.
pub fn fit_deficit(ks: &[f64], xi: &[f64]) -> Result<DeficitFit, CosmoError> {
    if ks.len() < 4 || ks.len() != xi.len() {
        return Err(FitError::TooFewPoints { needed: 4, got: ks.len().min(xi.len()) }.into());
    }
    let k_scale = ks.iter().map(|k| k.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut best = (f64::INFINITY, [1.0, 0.0, 1.0]);
    for i in 0..=40 {
        let c1 = PI / k_scale * 10f64.powf(-3.0 + 0.15 * i as f64);
        for j in 0..=16 {
            let c2 = -4.0 + 0.5 * j as f64;
            let shape: Vec<f64> = ks.iter().map(|&k| (c1 * k / PI + c2).atan() - PI / 2.0).collect();
            let c3 = xi.iter().zip(&shape).map(|(x, s)| x - s).sum::<f64>() / xi.len() as f64;
            let sse: f64 = xi.iter().zip(&shape).map(|(x, s)| (x - s - c3).powi(2)).sum();
            if sse < best.0 {
                best = (sse, [c1, c2, c3]);
            }
        }
    }
    let model = |p: &[f64; 3], k: f64| {
        let d = Deficit { c1: p[0], c2: p[1], c3: p[2] };
        (d.eval(k), d.gradient(k))
    };
    let out = levenberg_marquardt(model, ks, xi, best.1, 500)?;
    let [c1, c2, c3] = out.params;
    Ok(DeficitFit { c1, c2, c3, residual: out.residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitCurve {
    pub ks: Vec<f64>,
    pub lambda_over_hubble: Vec<f64>,
    pub xi: Vec<f64>,
    pub converged: Vec<bool>,
    pub fit: Option<DeficitFit>,
}

impl DeficitCurve {
    /// Three-point running mean of ξ in scan order (two-point at the ends).
    pub fn smoothed(&self) -> Vec<f64> {
        let n = self.xi.len();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                self.xi[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect()
    }

    /// Largest `|smoothed ξ − fit| / fit` over the scan.
    pub fn max_smoothed_residual(&self) -> Option<f64> {
        let fit = self.fit?.deficit();
        Some(
            self.ks
                .iter()
                .zip(self.smoothed())
                .map(|(&k, s)| ((s - fit.eval(k)) / fit.eval(k)).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// ξ(k) over `ratios` (λ_phys/H⁻¹ at `t_i`), sharing `template`'s times and
/// scale factor and the same initial data. The arctan fit is attempted when
/// there are at least four points.
pub fn deficit_scan(
    exec: Execution,
    template: &CosmoParams,
    ratios: &[f64],
    init: &InitialData,
    cfg: &EvolveConfig,
) -> Result<DeficitCurve, CosmoError> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(CosmoError::InvalidParams("wavelength ratios must be positive".into()));
    }
    let runs: Vec<Result<(CosmoParams, ModeRun), CosmoError>> = exec.map(ratios, |_, &r| {
        let p = CosmoParams::from_hubble_ratio(r, template.a_i, template.t_i, template.t_f, template.expansion);
        evolve_mode(exec, &p, init, cfg).map(|run| (p, run))
    });
    let mut curve = DeficitCurve { ks: vec![], lambda_over_hubble: vec![], xi: vec![], converged: vec![], fit: None };
    for run in runs {
        let (p, run) = run?;
        curve.ks.push(p.k);
        curve.lambda_over_hubble.push(p.lambda_over_hubble_at_ti());
        curve.xi.push(run.xi);
        curve.converged.push(run.converged);
    }
    if curve.ks.len() >= 4 {
        curve.fit = Some(fit_deficit(&curve.ks, &curve.xi)?);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavefield::Point2;

    fn radiation(ratio: f64) -> CosmoParams {
        CosmoParams::from_hubble_ratio(ratio, 1.0, 1.0, 101.0, Expansion::Radiation)
    }

    #[test]
    fn background_relations() {
        let p = radiation(10.0);
        assert!((p.lambda_over_hubble_at_ti() - 10.0).abs() < 1e-12);
        assert!((p.lambda_phys(p.t_i) / p.hubble_radius(p.t_i) - 10.0).abs() < 1e-12);
        assert!((p.scale_factor(4.0) - 2.0).abs() < 1e-15);
        for &t in &[1.0, 3.7, 55.0, 101.0] {
            assert!((p.time_at_phase(p.phase(t)) - t).abs() < 1e-12 * t);
        }
        // θ' = ω
        let (t, d) = (7.3, 1e-6);
        assert!(((p.phase(t + d) - p.phase(t - d)) / (2.0 * d) - p.omega(t)).abs() < 1e-8);
        let s = p.with_expansion(Expansion::Static);
        assert!((s.phase(11.0) - p.k * 10.0).abs() < 1e-12);
        assert!(s.hubble_radius(5.0).is_infinite());
        assert!(CosmoParams { t_f: 0.5, ..p }.validate().is_err());
    }

    #[test]
    fn quintic_interpolant_is_exact_for_quintics() {
        let grid = FactorGrid::new(4.0, 64);
        let levels = 1;
        let f = |x: f64| [x.powi(5) - 2.0 * x * x, 5.0 * x.powi(4) - 4.0 * x, 20.0 * x.powi(3) - 4.0, 60.0 * x * x];
        let mut data = vec![Complex64::new(0.0, 0.0); grid.n * 4];
        for i in 0..grid.n {
            let v = f(grid.x(i));
            for d in 0..4 {
                data[i * 4 + d] = Complex64::new(v[d], -v[d]);
            }
        }
        let it = Interpolant { x0: grid.x0, dx: grid.dx, n: grid.n, levels, data };
        let zero = Complex64::new(0.0, 0.0);
        let (mut val, mut der) = ([zero; MAX_LEVELS], [zero; MAX_LEVELS]);
        for &x in &[-3.91, -1.0, 0.017, 2.5, 3.8] {
            assert!(it.eval(x, &mut val, &mut der));
            let v = f(x);
            assert!((val[0].re - v[0]).abs() < 1e-9 && (val[0].im + v[0]).abs() < 1e-9);
            // the derivative is interpolated from (f', f'', f''') and is a quartic: exact too
            assert!((der[0].re - v[1]).abs() < 1e-9);
        }
        assert!(!it.eval(4.5, &mut val, &mut der));
        assert!(!it.eval(-4.5, &mut val, &mut der));
    }

    #[test]
    fn static_limit_matches_eigen_expansion() {
        // a ≡ 1, k = 1 is the unit oscillator; one period of 2π
        let params = CosmoParams { a_i: 1.0, t_i: 0.0, t_f: 2.0 * PI, k: 1.0, expansion: Expansion::Static };
        let state = Superposition::equal_weight_random_phase(Superposition::square_modes(4), 3).unwrap();
        let init = InitialData::new(state.clone(), InitialRho::Equilibrium).unwrap();
        let grid = FactorGrid::new(9.0, 256);
        let mut factors = Factors::initial(&params, 4, grid);
        let steps = 1 << 17;
        let dt = params.t_f / steps as f64;
        for n in 0..steps {
            factors.step(&params, n as f64 * dt, (n + 1) as f64 * dt);
        }
        let interp = factors.interpolant();
        let (mut err2, mut norm2) = (0.0, 0.0);
        let h = 0.05;
        for i in 0..200 {
            for j in 0..200 {
                let q = [-5.0 + (i as f64 + 0.5) * h, -5.0 + (j as f64 + 0.5) * h];
                let got = interp.psi2d(&init.coeffs, q).unwrap()[0];
                let want = state.eval_psi(Point2::new(q[0], q[1]), params.t_f);
                err2 += (got - want).norm_sqr() * h * h;
                norm2 += want.norm_sqr() * h * h;
            }
        }
        assert!((norm2 - 1.0).abs() < 1e-6);
        assert!(err2.sqrt() < 1e-8, "L2 error {:e}", err2.sqrt());
    }

    #[test]
    fn split_step_follows_the_gaussian_solution_on_expanding_space() {
        for ratio in [10.0, 0.5] {
            let params = CosmoParams::from_hubble_ratio(ratio, 1.0, 1.0, 11.0, Expansion::Radiation);
            let grid = FactorGrid::for_run(&params, 1);
            let (x0, dx, n) = (grid.x0, grid.dx, grid.n);
            let mut factors = Factors::initial(&params, 1, grid);
            let steps = 16_000;
            let total = params.phase(params.t_f);
            let t = |s: usize| params.time_at_phase(total * s as f64 / steps as f64);
            for s in 0..steps {
                factors.step(&params, t(s), t(s + 1));
            }
            let track = gaussian_track(&params, 20_000);
            let (_, a, b) = *track.last().unwrap();
            let mut err2 = 0.0;
            for i in 0..n {
                let x = x0 + i as f64 * dx;
                let want = (-a * x * x / 2.0 + b).exp();
                err2 += (factors.psi[0][i] - want).norm_sqr() * dx;
            }
            assert!(err2.sqrt() < 1e-5, "ratio {ratio}: L2 error {:e}", err2.sqrt());
            // exact inverse stepping returns to the initial state
            for s in (0..steps).rev() {
                factors.step(&params, t(s + 1), t(s));
            }
            let start = Factors::initial(&params, 1, FactorGrid::for_run(&params, 1));
            let back: f64 = factors.psi[0].iter().zip(&start.psi[0]).map(|(u, v)| (u - v).norm_sqr()).sum::<f64>();
            assert!((back * dx).sqrt() < 1e-10);
        }
    }

    #[test]
    fn gaussian_track_conserves_norm() {
        let params = radiation(2.0);
        for &(_, a, b) in gaussian_track(&params, 5000).iter().step_by(500) {
            // ∫ |exp(-A q²/2 + B)|² dq = sqrt(π / Re A) e^{2 Re B}
            let norm = (PI / a.re).sqrt() * (2.0 * b.re).exp();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    fn small_cfg() -> EvolveConfig {
        EvolveConfig { rho_cells: 48, dtheta: 0.05, max_refinements: 2, ..EvolveConfig::default() }
    }

    #[test]
    fn equilibrium_stays_equilibrium() {
        let init = InitialData::random(3, 5, InitialRho::Equilibrium).unwrap();
        for params in [radiation(10.0), radiation(1.0), radiation(10.0).with_expansion(Expansion::Static)] {
            let params = CosmoParams { t_f: 21.0, ..params };
            let run = evolve_mode(Execution::default(), &params, &init, &small_cfg()).unwrap();
            assert!((run.xi - 1.0).abs() < 1e-12, "xi = {}", run.xi);
            // equivariance: the pushed-forward |ψ₀|² has the second moment of |ψ|²
            let s = &run.state;
            assert!((s.psi2_second_moment / s.psi2_exact_second_moment - 1.0).abs() < 0.03);
            assert!(run.hbar.abs() < 1e-12);
            assert!(run.state.norm_drift < 1e-9);
        }
    }

    #[test]
    fn moment_scaling_of_contracted_density() {
        // with no evolution at all ρ is |ψ₀(q/w)|²/w², whose second moment is w² times that of |ψ₀|²
        let init = InitialData::random(3, 9, InitialRho::Contracted { width: 0.6 }).unwrap();
        let params = CosmoParams { a_i: 1.0, t_i: 1.0, t_f: 1.0 + 1e-9, k: 1.0, expansion: Expansion::Static };
        let run = evolve_mode(Execution::default(), &params, &init, &EvolveConfig { sample_cells: 160, ..small_cfg() })
            .unwrap();
        assert!((run.xi - 0.36).abs() < 1e-4, "xi = {}", run.xi);
    }

    #[test]
    fn super_hubble_width_stays_below_equilibrium() {
        let init = InitialData::random(4, 1, InitialRho::default()).unwrap();
        let run = evolve_mode(Execution::default(), &radiation(10.0), &init, &small_cfg()).unwrap();
        assert!(run.xi < 1.0 && run.xi > 0.2, "xi = {}", run.xi);
        assert_eq!(run.state.dropped, 0);
    }

    #[test]
    fn deficit_fit_recovers_exact_model() {
        let truth = Deficit { c1: 1.0, c2: 0.0, c3: 1.0 };
        let ks: Vec<f64> = (0..12).map(|i| 0.05 * 1.6f64.powi(i)).collect();
        let xi: Vec<f64> = ks.iter().map(|&k| truth.eval(k)).collect();
        let fit = fit_deficit(&ks, &xi).unwrap();
        assert!((fit.c1 - 1.0).abs() < 1e-8 && fit.c2.abs() < 1e-8 && (fit.c3 - 1.0).abs() < 1e-8, "{fit:?}");
    }

    #[test]
    fn deficit_fit_tolerates_oscillations() {
        let truth = Deficit { c1: 2.0, c2: 0.5, c3: 1.0 };
        let ks: Vec<f64> = (0..16).map(|i| 0.02 * 1.5f64.powi(i)).collect();
        for phase in [0.0, 1.0, 2.0, 3.0] {
            let xi: Vec<f64> =
                ks.iter().map(|&k| truth.eval(k) * (1.0 + 0.05 * (3.0 * k.ln() + phase).sin())).collect();
            let fit = fit_deficit(&ks, &xi).unwrap();
            for (got, want) in [(fit.c1, 2.0), (fit.c2, 0.5), (fit.c3, 1.0)] {
                assert!((got - want).abs() <= 0.1 * want.abs().max(1.0), "{fit:?}");
            }
        }
    }

    #[test]
    fn asymptote_is_the_large_k_mean() {
        let ks = [1e3, 2e3, 4e3, 8e3, 1.6e4];
        let xi = [0.97, 0.99, 0.98, 1.0, 0.985];
        let fit = fit_deficit(&ks, &xi).unwrap();
        let mean = xi.iter().sum::<f64>() / xi.len() as f64;
        assert!((fit.c3 - mean).abs() < 0.03, "{fit:?}");
    }

    #[test]
    fn fit_needs_four_points() {
        assert!(matches!(fit_deficit(&[1.0, 2.0, 3.0], &[0.5, 0.6, 0.7]), Err(CosmoError::Fit(_))));
    }

    #[test]
    fn smoothed_residual_of_exact_curve_is_small() {
        let d = Deficit { c1: 1.5, c2: 1.0, c3: 1.0 };
        let ks: Vec<f64> = (0..10).map(|i| 0.1 * 2f64.powi(i)).collect();
        let xi: Vec<f64> = ks.iter().map(|&k| d.eval(k)).collect();
        let fit = fit_deficit(&ks, &xi).unwrap();
        let curve = DeficitCurve {
            lambda_over_hubble: vec![0.0; ks.len()],
            converged: vec![true; ks.len()],
            ks,
            xi,
            fit: Some(fit),
        };
        assert!(curve.max_smoothed_residual().unwrap() < 0.15);
    }
}
