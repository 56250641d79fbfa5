//! Density transport by backtracking, coarse-graining and the coarse-grained
//! H-function.
//!
//! Because `f = ρ/|ψ|²` is constant along trajectories, the density at a grid
//! node `q` and time `t` is `|ψ(q,t)|² · ρ₀(q₀)/|ψ(q₀,0)|²`, where `q₀` is the
//! node traced back to `t = 0`. This yields `ρ` pointwise on a fine grid with
//! no sampling noise. Coarse averages of `ρ` and `|ψ|²` then give
//! `H̄ = Σ ρ̄ ln(ρ̄/|ψ|²̄) δV`, a relative entropy that decays as the two
//! densities mix.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::fit::{levenberg_marquardt, FitError};
use crate::integrator::{integrate_batch_with, IntegratorConfig};
use crate::wavefield::{Point2, Superposition};

/// Dropped fraction above which a run is flagged.
pub const DROP_FLAG_FRACTION: f64 = 1e-4;
/// Dropped fraction at which transport fails.
pub const DROP_FAIL_FRACTION: f64 = 1e-3;
/// Nodes with `|ψ|²` at or below this are not backtracked, and both `ρ` and
/// `|ψ|²` are set to 0 there.
/// Far out in the tails `f` is small, so the mass missed is negligible.
pub const TAIL_DENSITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelaxError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{dropped} of {total} grid points failed to backtrack")]
    TooManyDrops { dropped: usize, total: usize },
    #[error("coarse cell {cell} has rho > 0 where |psi|^2 = 0")]
    SupportMismatch { cell: usize },
    #[error("array length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Disjoint coarse cells.
    #[default]
    None,
    /// Sliding windows of side ε at fine-grid stride.
    Overlapping,
}

/// Square box `[-L, L]²` with a cell-centred fine grid and coarse cells of side ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub fine_cells: usize,
    pub coarse_cell: f64,
    pub smoothing: Smoothing,
}

impl Default for GridSpec {
    fn default() -> Self {
        // 1000 = 40 coarse cells of 25 fine cells each
        Self { half_width: 8.0, fine_cells: 1000, coarse_cell: 0.4, smoothing: Smoothing::None }
    }
}

impl GridSpec {
    pub fn new(half_width: f64, fine_cells: usize, coarse_cell: f64, smoothing: Smoothing) -> Result<Self, RelaxError> {
        let g = Self { half_width, fine_cells, coarse_cell, smoothing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), RelaxError> {
        let bad = |m: String| Err(RelaxError::InvalidGrid(m));
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return bad(format!("half_width must be positive, got {}", self.half_width));
        }
        if self.fine_cells == 0 {
            return bad("fine_cells must be positive".into());
        }
        if !(self.coarse_cell > 0.0) {
            return bad("coarse_cell must be positive".into());
        }
        let ratio = self.coarse_cell / self.spacing();
        let block = ratio.round();
        if (ratio - block).abs() > 1e-9 * ratio {
            return bad(format!("coarse cell {} is not a whole number of fine cells ({ratio})", self.coarse_cell));
        }
        if block < 2.0 {
            return bad("coarse cell must span at least two fine cells".into());
        }
        if block as usize > self.fine_cells {
            return bad("coarse cell larger than the box".into());
        }
        if self.smoothing == Smoothing::None && self.fine_cells % block as usize != 0 {
            return bad(format!("{} fine cells do not divide into blocks of {block}", self.fine_cells));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.fine_cells as f64
    }

    /// Fine cells per coarse-cell side.
    pub fn block(&self) -> usize {
        (self.coarse_cell / self.spacing()).round() as usize
    }

    /// Side length of the (square) coarse array.
    pub fn coarse_side(&self) -> usize {
        match self.smoothing {
            Smoothing::None => self.fine_cells / self.block(),
            Smoothing::Overlapping => self.fine_cells - self.block() + 1,
        }
    }

    /// Integration weight of one coarse value.
    pub fn coarse_volume(&self) -> f64 {
        match self.smoothing {
            Smoothing::None => self.coarse_cell * self.coarse_cell,
            Smoothing::Overlapping => self.spacing() * self.spacing(),
        }
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.spacing()
    }

    /// Fine-cell centres in row-major order (row index is y).
    pub fn nodes(&self) -> Vec<Point2> {
        let n = self.fine_cells;
        let mut out = Vec::with_capacity(n * n);
        for j in 0..n {
            let y = self.coordinate(j);
            for i in 0..n {
                out.push(Point2::new(self.coordinate(i), y));
            }
        }
        out
    }
}

/// Initial density for relaxation runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    /// `exp(-(x² + y²)/w²) / (π w²)`; `w = 1` is the unit-oscillator ground state.
    Gaussian { width: f64 },
    /// `|ψ(q, 0)|²`.
    Equilibrium,
}

impl InitialDensity {
    pub fn eval(&self, state: &Superposition, q: Point2) -> f64 {
        match *self {
            InitialDensity::Gaussian { width } => {
                let w2 = width * width;
                (-(q.x * q.x + q.y * q.y) / w2).exp() / (PI * w2)
            }
            InitialDensity::Equilibrium => state.born_density(q, 0.0),
        }
    }
}

/// Fine and coarse samples of `ρ` and `|ψ|²` at one time.
///
/// Dropped nodes hold NaN in both fine arrays and are left out of coarse means.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub t: f64,
    pub fine_rho: Vec<f64>,
    pub fine_psi2: Vec<f64>,
    pub coarse_rho: Vec<f64>,
    pub coarse_psi2: Vec<f64>,
    pub dropped: usize,
    /// Dropped fraction reached [`DROP_FLAG_FRACTION`].
    pub flagged: bool,
}

impl DensityGrid {
    /// `Σ ρ dA` over valid fine nodes.
    pub fn fine_mass(&self) -> f64 {
        let h = self.spec.spacing();
        self.fine_rho.iter().filter(|v| !v.is_nan()).sum::<f64>() * h * h
    }

    pub fn fine_psi2_mass(&self) -> f64 {
        let h = self.spec.spacing();
        self.fine_psi2.iter().filter(|v| !v.is_nan()).sum::<f64>() * h * h
    }

    /// Coarse arrays rescaled to unit mass.
    pub fn normalized_coarse(&self) -> (Vec<f64>, Vec<f64>) {
        let dv = self.spec.coarse_volume();
        let scale = |v: &[f64]| {
            let m: f64 = v.iter().sum::<f64>() * dv;
            v.iter().map(|x| x / m).collect::<Vec<f64>>()
        };
        (scale(&self.coarse_rho), scale(&self.coarse_psi2))
    }
}

/// Transports `rho0` to time `t` by backtracking every fine node.
pub fn transport_density<F>(
    state: &Superposition,
    rho0: F,
    t: f64,
    grid: &GridSpec,
    cfg: &IntegratorConfig,
) -> Result<DensityGrid, RelaxError>
where
    F: Fn(Point2) -> f64 + Sync,
{
    transport_density_with(Execution::default(), state, rho0, t, grid, cfg)
}

pub fn transport_density_with<F>(
    exec: Execution,
    state: &Superposition,
    rho0: F,
    t: f64,
    grid: &GridSpec,
    cfg: &IntegratorConfig,
) -> Result<DensityGrid, RelaxError>
where
    F: Fn(Point2) -> f64 + Sync,
{
    grid.validate()?;
    let nodes = grid.nodes();
    let psi2: Vec<f64> = exec.map(&nodes, |_, q| state.born_density(*q, t));

    let (fine_rho, fine_psi2, dropped) = if t == 0.0 {
        (nodes.iter().map(|q| rho0(*q)).collect::<Vec<f64>>(), psi2, 0)
    } else {
        let live: Vec<usize> = (0..nodes.len()).filter(|&k| psi2[k] > TAIL_DENSITY).collect();
        let starts: Vec<Point2> = live.iter().map(|&k| nodes[k]).collect();
        let mut origins: Vec<Option<Result<Point2, _>>> = (0..nodes.len()).map(|_| None).collect();
        for (k, r) in live.iter().zip(integrate_batch_with(exec, state, &starts, t, 0.0, cfg)) {
            origins[*k] = Some(r);
        }
        let mut rho = Vec::with_capacity(nodes.len());
        let mut p2 = psi2;
        let mut dropped = 0;
        for (k, origin) in origins.into_iter().enumerate() {
            let Some(origin) = origin else {
                // tail node: both densities are treated as zero
                rho.push(0.0);
                p2[k] = 0.0;
                continue;
            };
            let value = origin.ok().and_then(|q0| {
                let r0 = rho0(q0);
                let d0 = state.born_density(q0, 0.0);
                if d0 > 0.0 {
                    Some(p2[k] * (r0 / d0))
                } else if r0 == 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            });
            match value {
                Some(v) if v.is_finite() => rho.push(v),
                _ => {
                    dropped += 1;
                    rho.push(f64::NAN);
                    p2[k] = f64::NAN;
                }
            }
        }
        (rho, p2, dropped)
    };

    let total = nodes.len();
    let fraction = dropped as f64 / total as f64;
    if fraction >= DROP_FAIL_FRACTION {
        return Err(RelaxError::TooManyDrops { dropped, total });
    }
    let coarse_rho = coarse_grain(&fine_rho, grid)?;
    let coarse_psi2 = coarse_grain(&fine_psi2, grid)?;
    Ok(DensityGrid {
        spec: *grid,
        t,
        fine_rho,
        fine_psi2,
        coarse_rho,
        coarse_psi2,
        dropped,
        flagged: fraction >= DROP_FLAG_FRACTION,
    })
}

/// Coarse means of a fine field; NaN entries are skipped.
///
/// Disjoint blocks for [`Smoothing::None`], sliding windows at fine stride for
/// [`Smoothing::Overlapping`]. A window with no valid entries averages to 0.
pub fn coarse_grain(fine: &[f64], grid: &GridSpec) -> Result<Vec<f64>, RelaxError> {
    grid.validate()?;
    let n = grid.fine_cells;
    if fine.len() != n * n {
        return Err(RelaxError::LengthMismatch(fine.len(), n * n));
    }
    let s = grid.block();
    let stride = match grid.smoothing {
        Smoothing::None => s,
        Smoothing::Overlapping => 1,
    };
    let side = grid.coarse_side();

    // separable window sums: rows first, then columns
    let mut row_sum = vec![0.0; n * side];
    let mut row_cnt = vec![0u32; n * side];
    for j in 0..n {
        let row = &fine[j * n..(j + 1) * n];
        for c in 0..side {
            let (mut acc, mut cnt) = (0.0, 0);
            for v in &row[c * stride..c * stride + s] {
                if !v.is_nan() {
                    acc += v;
                    cnt += 1;
                }
            }
            row_sum[j * side + c] = acc;
            row_cnt[j * side + c] = cnt;
        }
    }
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let (mut acc, mut cnt) = (0.0, 0);
            for j in r * stride..r * stride + s {
                acc += row_sum[j * side + c];
                cnt += row_cnt[j * side + c];
            }
            out[r * side + c] = if cnt > 0 { acc / cnt as f64 } else { 0.0 };
        }
    }
    Ok(out)
}

/// `Σ ρ̄ ln(ρ̄/|ψ|²̄) δV` with `0 ln 0 = 0`. Inputs should be normalized.
pub fn hbar(rho_bar: &[f64], psi2_bar: &[f64], cell_volume: f64) -> Result<f64, RelaxError> {
    if rho_bar.len() != psi2_bar.len() {
        return Err(RelaxError::LengthMismatch(rho_bar.len(), psi2_bar.len()));
    }
    let mut h = 0.0;
    for (cell, (&r, &p)) in rho_bar.iter().zip(psi2_bar).enumerate() {
        if r <= 0.0 {
            continue;
        }
        if p <= 0.0 {
            return Err(RelaxError::SupportMismatch { cell });
        }
        h += r * (r / p).ln();
    }
    Ok(h * cell_volume)
}

/// `Σ |ρ̄ - |ψ|²̄| δV`.
pub fn l1_distance(rho_bar: &[f64], psi2_bar: &[f64], cell_volume: f64) -> f64 {
    rho_bar.iter().zip(psi2_bar).map(|(a, b)| (a - b).abs()).sum::<f64>() * cell_volume
}

/// Parameters of `H̄(t) ≈ H0 exp(-b t / 2π) + c`, with `τ = 2π/b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    #[serde(rename = "H0")]
    pub h0: f64,
    pub b: f64,
    pub c: f64,
    pub tau: f64,
    pub residual: f64,
}

impl DecayFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.h0 * (-self.b * t / (2.0 * PI)).exp() + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HCurve {
    pub times: Vec<f64>,
    /// H̄ on the reference (first) grid.
    pub hbar: Vec<f64>,
    /// Largest pairwise H̄ difference across grids.
    pub err: Vec<f64>,
    /// H̄ per grid, outer index = grid.
    pub per_grid: Vec<Vec<f64>>,
    /// Coarse L1 distance between ρ̄ and |ψ|²̄ on the reference grid.
    pub l1: Vec<f64>,
    /// Fine-grid mass of ρ on the reference grid before renormalization.
    pub mass: Vec<f64>,
    /// Dropped nodes, summed over grids.
    pub dropped: Vec<usize>,
    pub fit: Option<DecayFit>,
}

/// Runs the transport on every grid at every time. The first grid is the reference.
pub fn hcurve<F>(
    state: &Superposition,
    rho0: F,
    times: &[f64],
    grids: &[GridSpec],
    cfg: &IntegratorConfig,
) -> Result<HCurve, RelaxError>
where
    F: Fn(Point2) -> f64 + Sync,
{
    hcurve_observed(state, rho0, times, grids, cfg, |_| {})
}

/// [`hcurve`] with a callback receiving every reference-grid density.
pub fn hcurve_observed<F, O>(
    state: &Superposition,
    rho0: F,
    times: &[f64],
    grids: &[GridSpec],
    cfg: &IntegratorConfig,
    mut observe: O,
) -> Result<HCurve, RelaxError>
where
    F: Fn(Point2) -> f64 + Sync,
    O: FnMut(&DensityGrid),
{
    if grids.len() < 2 {
        return Err(RelaxError::InvalidGrid("error estimates need at least two grids".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RelaxError::InvalidGrid("times must be strictly increasing".into()));
    }
    for g in grids {
        g.validate()?;
    }
    let mut per_grid = vec![Vec::with_capacity(times.len()); grids.len()];
    let (mut l1, mut mass, mut dropped) = (Vec::new(), Vec::new(), vec![0; times.len()]);
    for (gi, grid) in grids.iter().enumerate() {
        for (ti, &t) in times.iter().enumerate() {
            let d = transport_density(state, &rho0, t, grid, cfg)?;
            let (r, p) = d.normalized_coarse();
            let dv = grid.coarse_volume();
            per_grid[gi].push(hbar(&r, &p, dv)?);
            dropped[ti] += d.dropped;
            if gi == 0 {
                l1.push(l1_distance(&r, &p, dv));
                mass.push(d.fine_mass());
                observe(&d);
            }
        }
    }
    let err = (0..times.len())
        .map(|i| {
            let mut e: f64 = 0.0;
            for a in 0..grids.len() {
                for b in a + 1..grids.len() {
                    e = e.max((per_grid[a][i] - per_grid[b][i]).abs());
                }
            }
            e
        })
        .collect();
    let mut curve =
        HCurve { times: times.to_vec(), hbar: per_grid[0].clone(), err, per_grid, l1, mass, dropped, fit: None };
    if times.len() >= 5 {
        curve.fit = fit_decay(&curve.times, &curve.hbar).ok();
    }
    Ok(curve)
}

/// Nonlinear least squares for `H0 exp(-b t/2π) + c`.
pub fn fit_decay(times: &[f64], hbar: &[f64]) -> Result<DecayFit, RelaxError> {
    if times.len() < 5 || hbar.len() != times.len() {
        return Err(FitError::TooFewPoints { needed: 5, got: times.len().min(hbar.len()) }.into());
    }
    let two_pi = 2.0 * PI;
    // start from a log-linear fit above a provisional floor
    let floor = hbar.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0) - 1e-12;
    let pts: Vec<(f64, f64)> =
        times.iter().zip(hbar).filter(|(_, &h)| h - floor > 0.0).map(|(&t, &h)| (t, (h - floor).ln())).collect();
    let n = pts.len() as f64;
    let (st, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, my) = (st / n, sy / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { -1.0 };
    let start = [(my - slope * mt).exp(), (-slope * two_pi).max(1e-3), floor];

    let model = |p: &[f64; 3], t: f64| {
        let e = (-p[1] * t / two_pi).exp();
        (p[0] * e + p[2], [e, -p[0] * t / two_pi * e, 1.0])
    };
    let out = levenberg_marquardt(model, times, hbar, start, 500)?;
    let [h0, b, c] = out.params;
    if !(h0.is_finite() && b.is_finite() && c.is_finite()) || b == 0.0 {
        return Err(FitError::FitDiverged(format!("H0={h0}, b={b}, c={c}")).into());
    }
    Ok(DecayFit { h0, b, c, tau: two_pi / b, residual: out.residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid(smoothing: Smoothing) -> GridSpec {
        GridSpec::new(2.0, 8, 1.0, smoothing).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::default().validate().is_ok());
        assert!(GridSpec::new(8.0, 1024, 0.4, Smoothing::None).is_err());
        assert!(GridSpec::new(8.0, 1024, 0.4, Smoothing::Overlapping).is_err());
        assert!(GridSpec::new(8.0, 480, 0.4, Smoothing::None).is_ok());
        assert!(GridSpec::new(1.0, 10, 0.4, Smoothing::None).is_ok());
        assert!(GridSpec::new(1.0, 10, 0.2, Smoothing::None).is_err(), "ε must exceed the fine spacing");
        assert!(GridSpec::new(1.0, 10, 0.3, Smoothing::None).is_err());
        assert!(GridSpec::new(-1.0, 10, 0.2, Smoothing::None).is_err());
        let g = GridSpec::new(8.0, 480, 0.4, Smoothing::Overlapping).unwrap();
        assert_eq!(g.block(), 12);
        assert_eq!(g.coarse_side(), 469);
    }

    #[test]
    fn uniform_field_is_unchanged() {
        for sm in [Smoothing::None, Smoothing::Overlapping] {
            let g = small_grid(sm);
            let fine = vec![0.3; 64];
            for v in coarse_grain(&fine, &g).unwrap() {
                assert!((v - 0.3).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_fine_cell_averages_to_a_quarter() {
        let g = GridSpec::new(1.0, 4, 1.0, Smoothing::None).unwrap();
        let mut fine = vec![0.0; 16];
        fine[0] = 1.0;
        let c = coarse_grain(&fine, &g).unwrap();
        assert_eq!(c, vec![0.25, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkerboard_becomes_constant() {
        for sm in [Smoothing::None, Smoothing::Overlapping] {
            let g = GridSpec::new(3.0, 12, 1.0, sm).unwrap();
            let fine: Vec<f64> = (0..144).map(|k| if (k / 12 + k % 12) % 2 == 0 { 2.0 } else { 0.0 }).collect();
            // oracle: every 2x2 window holds two 2s and two 0s
            for v in coarse_grain(&fine, &g).unwrap() {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn dropped_cells_are_skipped() {
        let g = GridSpec::new(1.0, 4, 1.0, Smoothing::None).unwrap();
        let mut fine = vec![1.0; 16];
        fine[0] = f64::NAN;
        fine[1] = 5.0;
        let c = coarse_grain(&fine, &g).unwrap();
        assert_eq!(c[0], 7.0 / 3.0);
    }

    #[test]
    fn hbar_examples() {
        let p = vec![0.25; 4];
        assert_eq!(hbar(&p, &p, 1.0).unwrap(), 0.0);
        let h = hbar(&[0.8, 0.2], &[0.5, 0.5], 1.0).unwrap();
        let oracle = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((h - oracle).abs() < 1e-15);
        assert!((h - 0.19274).abs() < 1e-5);
        assert_eq!(hbar(&[0.0, 1.0], &[0.5, 0.5], 1.0).unwrap(), 1.0 * 2f64.ln());
        assert_eq!(hbar(&[0.5, 0.5], &[1.0, 0.0], 1.0), Err(RelaxError::SupportMismatch { cell: 1 }));
    }

    #[test]
    fn hbar_is_gibbs_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut r: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let mut p: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + 1e-3).collect();
            let (sr, sp): (f64, f64) = (r.iter().sum(), p.iter().sum());
            r.iter_mut().for_each(|v| *v /= sr);
            p.iter_mut().for_each(|v| *v /= sp);
            assert!(hbar(&r, &p, 1.0).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn transport_identity_at_time_zero() {
        let s = Superposition::equal_weight_random_phase(Superposition::square_modes(3), 2).unwrap();
        let g = GridSpec::new(4.0, 16, 1.0, Smoothing::None).unwrap();
        let rho0 = |q: Point2| (-(q.x * q.x + q.y * q.y)).exp() / PI;
        let d = transport_density(&s, rho0, 0.0, &g, &IntegratorConfig::default()).unwrap();
        for (q, v) in g.nodes().iter().zip(&d.fine_rho) {
            assert_eq!(*v, rho0(*q));
        }
        assert_eq!(d.dropped, 0);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let s = Superposition::equal_weight_random_phase(Superposition::square_modes(3), 2).unwrap();
        let g = GridSpec::new(4.0, 16, 1.0, Smoothing::None).unwrap();
        let eq = |q: Point2| s.born_density(q, 0.0);
        let d = transport_density(&s, eq, 2.3, &g, &IntegratorConfig::default()).unwrap();
        for (q, v) in g.nodes().iter().zip(&d.fine_rho) {
            assert!((v - s.born_density(*q, 2.3)).abs() < 1e-6);
        }
        let (r, p) = d.normalized_coarse();
        assert!(hbar(&r, &p, g.coarse_volume()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_exact_model() {
        let times: Vec<f64> = (0..12).map(|i| i as f64 * 2.0).collect();
        let h: Vec<f64> = times.iter().map(|t| (-t / (2.0 * PI)).exp()).collect();
        let f = fit_decay(&times, &h).unwrap();
        assert!((f.h0 - 1.0).abs() < 1e-8 && (f.b - 1.0).abs() < 1e-8 && f.c.abs() < 1e-8, "{f:?}");
        assert!((f.tau - 2.0 * PI).abs() < 1e-7);
    }

    #[test]
    fn fit_tolerates_one_percent_noise() {
        let times: Vec<f64> = (0..21).map(|i| i as f64 * PI / 2.0).collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = times
                .iter()
                .map(|t| (1.0 * (-t / (2.0 * PI)).exp() + 0.1) * (1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0)))
                .collect();
            let f = fit_decay(&times, &h).unwrap();
            assert!((f.h0 - 1.0).abs() < 0.05 && (f.b - 1.0).abs() < 0.05 && (f.c - 0.1).abs() < 0.05, "{f:?}");
        }
    }

    #[test]
    fn fit_needs_five_points() {
        assert!(matches!(fit_decay(&[0.0, 1.0], &[1.0, 0.5]), Err(RelaxError::Fit(FitError::TooFewPoints { .. }))));
    }
}
