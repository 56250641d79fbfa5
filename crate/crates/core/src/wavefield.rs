//! Wave functions built from harmonic-oscillator eigenstates (ħ = mass = ω = 1).
//!
//! A [`Superposition`] is a finite sum of 2D product eigenstates
//! `φ_m(x) φ_n(y)` with energies `E = m + n + 1`. Time evolution is exact:
//! each coefficient picks up `exp(-i E t)`. From the amplitude we get the Born
//! density, the quantum current and the de Broglie velocity `Im(∇ψ/ψ)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this Born density the velocity field is treated as singular.
pub const NODE_THRESHOLD: f64 = 1e-300;

/// Highest single-axis quantum number accepted in a superposition.
pub const MAX_LEVEL: u32 = 30;

const BUF: usize = MAX_LEVEL as usize + 2;

// π^(-1/4)
const PI_POW_MINUS_QUARTER: f64 = 0.751_125_544_464_942_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveError {
    #[error("wave-function node at ({x}, {y}), t = {t}: |psi|^2 = {density:e}")]
    Node { x: f64, y: f64, t: f64, density: f64 },
    #[error("{coeffs} coefficients for {modes} modes")]
    LengthMismatch { modes: usize, coeffs: usize },
    #[error("mode ({0}, {1}) appears more than once")]
    DuplicateMode(u32, u32),
    #[error("mode level {0} exceeds the supported maximum {MAX_LEVEL}")]
    LevelTooHigh(u32),
    #[error("superposition has no modes")]
    Empty,
    #[error("coefficient {0} is not finite")]
    NonFinite(usize),
    #[error("sum of |c|^2 is {0}, expected 1")]
    NotNormalized(f64),
}

/// Quantum numbers of one 2D product eigenstate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeIndex {
    pub m: u32,
    pub n: u32,
}

impl ModeIndex {
    pub fn new(m: u32, n: u32) -> Self {
        Self { m, n }
    }

    pub fn energy(self) -> u32 {
        self.m + self.n + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

// [sqrt(2/(k+1)), sqrt(k/(k+1)), sqrt(k/2), sqrt((k+1)/2)] per level k
const RECURRENCE: [[f64; 4]; BUF + 1] = [
    [1.4142135623730951, 0.0, 0.0, 0.7071067811865476],
    [1.0, 0.7071067811865476, 0.7071067811865476, 1.0],
    [0.816496580927726, 0.816496580927726, 1.0, 1.224744871391589],
    [0.7071067811865476, 0.8660254037844386, 1.224744871391589, 1.4142135623730951],
    [0.6324555320336759, 0.8944271909999159, 1.4142135623730951, 1.5811388300841898],
    [0.5773502691896257, 0.9128709291752769, 1.5811388300841898, 1.7320508075688772],
    [0.5345224838248488, 0.9258200997725514, 1.7320508075688772, 1.8708286933869707],
    [0.5, 0.9354143466934853, 1.8708286933869707, 2.0],
    [0.4714045207910317, 0.9428090415820634, 2.0, 2.1213203435596424],
    [0.4472135954999579, 0.9486832980505138, 2.1213203435596424, 2.23606797749979],
    [0.4264014327112209, 0.9534625892455924, 2.23606797749979, 2.345207879911715],
    [0.408248290463863, 0.9574271077563381, 2.345207879911715, 2.449489742783178],
    [0.3922322702763681, 0.9607689228305228, 2.449489742783178, 2.5495097567963922],
    [0.3779644730092272, 0.9636241116594315, 2.5495097567963922, 2.6457513110645907],
    [0.3651483716701107, 0.9660917830792959, 2.6457513110645907, 2.7386127875258306],
    [0.3535533905932738, 0.9682458365518543, 2.7386127875258306, 2.8284271247461903],
    [0.3429971702850177, 0.9701425001453319, 2.8284271247461903, 2.9154759474226504],
    [0.3333333333333333, 0.97182531580755, 2.9154759474226504, 3.0],
    [0.3244428422615251, 0.9733285267845752, 3.0, 3.082207001484488],
    [0.31622776601683794, 0.9746794344808963, 3.082207001484488, 3.1622776601683795],
    [0.3086066999241838, 0.9759000729485332, 3.1622776601683795, 3.24037034920393],
    [0.30151134457776363, 0.9770084209183945, 3.24037034920393, 3.3166247903554],
    [0.29488391230979427, 0.9780192938436515, 3.3166247903554, 3.391164991562634],
    [0.28867513459481287, 0.9789450103725609, 3.391164991562634, 3.4641016151377544],
    [0.282842712474619, 0.9797958971132712, 3.4641016151377544, 3.5355339059327378],
    [0.2773500981126146, 0.9805806756909202, 3.5355339059327378, 3.605551275463989],
    [0.2721655269759087, 0.9813067629253163, 3.605551275463989, 3.6742346141747673],
    [0.2672612419124244, 0.9819805060619657, 3.6742346141747673, 3.7416573867739413],
    [0.2626128657194451, 0.982607368881035, 3.7416573867739413, 3.8078865529319543],
    [0.2581988897471611, 0.983192080250175, 3.8078865529319543, 3.872983346207417],
    [0.254000254000381, 0.9837387536759294, 3.872983346207417, 3.9370039370059056],
    [0.25, 0.9842509842514764, 3.9370039370059056, 4.0],
    [0.24618298195866548, 0.9847319278346619, 4.0, 4.06201920231798],
];

/// Normalized 1D Hermite functions `φ_0..=φ_len-1` at `x` by the three-term
/// recurrence on the normalized functions (no raw Hermite polynomials).
pub fn hermite_functions(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = PI_POW_MINUS_QUARTER * (-0.5 * x * x).exp();
    if out.len() > 1 {
        out[1] = std::f64::consts::SQRT_2 * x * out[0];
    }
    let n = out.len();
    if n <= BUF {
        let r = &RECURRENCE;
        for k in 1..n - 1 {
            out[k + 1] = r[k][0] * x * out[k] - r[k][1] * out[k - 1];
        }
    } else {
        for k in 1..n - 1 {
            let kf = k as f64;
            out[k + 1] = (2.0 / (kf + 1.0)).sqrt() * x * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
        }
    }
}

/// Values and first derivatives of `φ_0..=φ_levels-1`.
///
/// `values` must hold one more entry than `derivs`, since
/// `φ_k' = sqrt(k/2) φ_{k-1} - sqrt((k+1)/2) φ_{k+1}`.
pub fn hermite_with_derivatives(x: f64, values: &mut [f64], derivs: &mut [f64]) {
    debug_assert!(values.len() > derivs.len());
    hermite_functions(x, values);
    for k in 0..derivs.len() {
        let (lo, hi) = if k < BUF {
            (RECURRENCE[k][2], RECURRENCE[k][3])
        } else {
            ((k as f64 / 2.0).sqrt(), ((k as f64 + 1.0) / 2.0).sqrt())
        };
        let lower = if k > 0 { lo * values[k - 1] } else { 0.0 };
        derivs[k] = lower - hi * values[k + 1];
    }
}

// Both axes in one pass so the two recurrences interleave.
fn hermite_pair(
    x: f64,
    y: f64,
    levels: usize,
    fx: &mut [f64; BUF],
    dfx: &mut [f64; BUF],
    fy: &mut [f64; BUF],
    dfy: &mut [f64; BUF],
) {
    let r = &RECURRENCE;
    fx[0] = PI_POW_MINUS_QUARTER * (-0.5 * x * x).exp();
    fy[0] = PI_POW_MINUS_QUARTER * (-0.5 * y * y).exp();
    fx[1] = std::f64::consts::SQRT_2 * x * fx[0];
    fy[1] = std::f64::consts::SQRT_2 * y * fy[0];
    for k in 1..levels.min(BUF - 1) {
        fx[k + 1] = r[k][0] * x * fx[k] - r[k][1] * fx[k - 1];
        fy[k + 1] = r[k][0] * y * fy[k] - r[k][1] * fy[k - 1];
    }
    dfx[0] = -r[0][3] * fx[1];
    dfy[0] = -r[0][3] * fy[1];
    for k in 1..levels.min(BUF - 1) {
        dfx[k] = r[k][2] * fx[k - 1] - r[k][3] * fx[k + 1];
        dfy[k] = r[k][2] * fy[k - 1] - r[k][3] * fy[k + 1];
    }
}

/// A normalized superposition of 2D oscillator eigenstates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SuperpositionRepr", into = "SuperpositionRepr")]
pub struct Superposition {
    modes: Vec<ModeIndex>,
    coeffs: Vec<Complex64>,
    // dense (m, n) coefficient table, row-major with `cols` columns
    table: Vec<Complex64>,
    rows: usize,
    cols: usize,
    max_energy: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuperpositionRepr {
    modes: Vec<[u32; 2]>,
    coeffs: Vec<[f64; 2]>,
}

impl TryFrom<SuperpositionRepr> for Superposition {
    type Error = WaveError;

    fn try_from(r: SuperpositionRepr) -> Result<Self, WaveError> {
        let modes = r.modes.iter().map(|&[m, n]| ModeIndex::new(m, n)).collect();
        let coeffs = r.coeffs.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
        Superposition::new(modes, coeffs)
    }
}

impl From<Superposition> for SuperpositionRepr {
    fn from(s: Superposition) -> Self {
        SuperpositionRepr {
            modes: s.modes.iter().map(|k| [k.m, k.n]).collect(),
            coeffs: s.coeffs.iter().map(|c| [c.re, c.im]).collect(),
        }
    }
}

fn check_modes(modes: &[ModeIndex], coeffs: &[Complex64]) -> Result<(), WaveError> {
    if modes.is_empty() {
        return Err(WaveError::Empty);
    }
    if modes.len() != coeffs.len() {
        return Err(WaveError::LengthMismatch { modes: modes.len(), coeffs: coeffs.len() });
    }
    let mut seen = std::collections::HashSet::new();
    for k in modes {
        if k.m > MAX_LEVEL || k.n > MAX_LEVEL {
            return Err(WaveError::LevelTooHigh(k.m.max(k.n)));
        }
        if !seen.insert(*k) {
            return Err(WaveError::DuplicateMode(k.m, k.n));
        }
    }
    if let Some(i) = coeffs.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(WaveError::NonFinite(i));
    }
    Ok(())
}

impl Superposition {
    /// Builds a state from already-normalized coefficients (tolerance 1e-12).
    pub fn new(modes: Vec<ModeIndex>, coeffs: Vec<Complex64>) -> Result<Self, WaveError> {
        check_modes(&modes, &coeffs)?;
        let norm: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(WaveError::NotNormalized(norm));
        }
        Ok(Self::build(modes, coeffs))
    }

    /// Rescales the coefficients to unit norm.
    pub fn normalized(modes: Vec<ModeIndex>, coeffs: Vec<Complex64>) -> Result<Self, WaveError> {
        check_modes(&modes, &coeffs)?;
        let norm: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(WaveError::NotNormalized(0.0));
        }
        let coeffs = coeffs.into_iter().map(|c| c / norm).collect();
        Ok(Self::build(modes, coeffs))
    }

    pub fn eigenstate(m: u32, n: u32) -> Result<Self, WaveError> {
        Self::new(vec![ModeIndex::new(m, n)], vec![Complex64::new(1.0, 0.0)])
    }

    /// Equal weights `1/sqrt(M)` with phases drawn uniformly from `[0, 2π)`.
    pub fn equal_weight_random_phase(modes: Vec<ModeIndex>, seed: u64) -> Result<Self, WaveError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = 1.0 / (modes.len().max(1) as f64).sqrt();
        let coeffs = modes
            .iter()
            .map(|_| Complex64::from_polar(amp, rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self::normalized(modes, coeffs)
    }

    /// All modes with `m, n < side`, e.g. `side = 5` gives the 25-mode set.
    pub fn square_modes(side: u32) -> Vec<ModeIndex> {
        (0..side).flat_map(|m| (0..side).map(move |n| ModeIndex::new(m, n))).collect()
    }

    fn build(modes: Vec<ModeIndex>, coeffs: Vec<Complex64>) -> Self {
        let rows = modes.iter().map(|k| k.m).max().unwrap_or(0) as usize + 1;
        let cols = modes.iter().map(|k| k.n).max().unwrap_or(0) as usize + 1;
        let mut table = vec![Complex64::new(0.0, 0.0); rows * cols];
        for (k, c) in modes.iter().zip(&coeffs) {
            table[k.m as usize * cols + k.n as usize] = *c;
        }
        let max_energy = modes.iter().map(|k| k.energy()).max().unwrap_or(1) as usize;
        Self { modes, coeffs, table, rows, cols, max_energy }
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn is_stationary(&self) -> bool {
        let e0 = self.modes[0].energy();
        self.modes.iter().all(|k| k.energy() == e0)
    }

    /// Swaps the roles of x and y.
    pub fn transposed(&self) -> Self {
        let modes = self.modes.iter().map(|k| ModeIndex::new(k.n, k.m)).collect();
        Self::build(modes, self.coeffs.clone())
    }

    fn phases(&self, t: f64, out: &mut [Complex64; 2 * BUF]) {
        let base = Complex64::from_polar(1.0, -t);
        let mut p = Complex64::new(1.0, 0.0);
        for slot in out.iter_mut().take(self.max_energy + 1) {
            *slot = p;
            p *= base;
        }
    }

    /// Amplitude and gradient at `q`, with an optional Laplacian.
    fn evaluate(&self, q: Point2, t: f64, want_laplacian: bool) -> Evaluation {
        let mut phase = [Complex64::new(0.0, 0.0); 2 * BUF];
        self.phases(t, &mut phase);

        let mut fx = [0.0; BUF];
        let mut dfx = [0.0; BUF];
        let mut fy = [0.0; BUF];
        let mut dfy = [0.0; BUF];
        let levels = self.rows.max(self.cols);
        hermite_pair(q.x, q.y, levels, &mut fx, &mut dfx, &mut fy, &mut dfy);

        let zero = Complex64::new(0.0, 0.0);
        let (mut psi, mut dx, mut dy, mut hpsi) = (zero, zero, zero, zero);
        for m in 0..self.rows {
            let row = &self.table[m * self.cols..(m + 1) * self.cols];
            let (mut s, mut ds, mut es) = (zero, zero, zero);
            for (n, c) in row.iter().enumerate() {
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let e = m + n + 1;
                let ct = c * phase[e];
                s += ct * fy[n];
                ds += ct * dfy[n];
                if want_laplacian {
                    es += ct * (e as f64 * fy[n]);
                }
            }
            psi += s * fx[m];
            dx += s * dfx[m];
            dy += ds * fx[m];
            hpsi += es * fx[m];
        }
        // φ_k'' = (x² - (2k+1)) φ_k  =>  ∇²ψ = (x² + y²) ψ - 2 Σ E c φφ
        let laplacian = if want_laplacian {
            psi * (q.x * q.x + q.y * q.y) - hpsi * 2.0
        } else {
            zero
        };
        Evaluation { single_mode: self.modes.len() == 1, psi, grad: [dx, dy], laplacian }
    }

    pub fn eval_psi(&self, q: Point2, t: f64) -> Complex64 {
        self.evaluate(q, t, false).psi
    }

    pub fn born_density(&self, q: Point2, t: f64) -> f64 {
        self.eval_psi(q, t).norm_sqr()
    }

    /// Quantum current `Im(ψ* ∇ψ)`.
    pub fn current(&self, q: Point2, t: f64) -> [f64; 2] {
        let ev = self.evaluate(q, t, false);
        [(ev.psi.conj() * ev.grad[0]).im, (ev.psi.conj() * ev.grad[1]).im]
    }

    /// de Broglie velocity `Im(∇ψ/ψ)`.
    pub fn velocity(&self, q: Point2, t: f64) -> Result<[f64; 2], WaveError> {
        let ev = self.evaluate(q, t, false);
        ev.velocity(q, t)
    }

    /// Velocity together with its divergence `Im(∇²ψ/ψ - (∇ψ/ψ)²)`.
    pub fn velocity_and_divergence(&self, q: Point2, t: f64) -> Result<([f64; 2], f64), WaveError> {
        let ev = self.evaluate(q, t, true);
        let v = ev.velocity(q, t)?;
        if ev.single_mode {
            return Ok((v, 0.0));
        }
        let gx = ev.grad[0] / ev.psi;
        let gy = ev.grad[1] / ev.psi;
        let div = (ev.laplacian / ev.psi - gx * gx - gy * gy).im;
        Ok((v, div))
    }
}

struct Evaluation {
    single_mode: bool,
    psi: Complex64,
    grad: [Complex64; 2],
    laplacian: Complex64,
}

impl Evaluation {
    fn velocity(&self, q: Point2, t: f64) -> Result<[f64; 2], WaveError> {
        let density = self.psi.norm_sqr();
        if !(density >= NODE_THRESHOLD) {
            return Err(WaveError::Node { x: q.x, y: q.y, t, density });
        }
        if self.single_mode {
            // real spatial part times a global phase
            return Ok([0.0, 0.0]);
        }
        let conj = self.psi.conj();
        Ok([(conj * self.grad[0]).im / density, (conj * self.grad[1]).im / density])
    }
}

/// Superposition of 1D oscillator eigenstates `φ_k(x)`, energies `k + 1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Wave1dRepr", into = "Wave1dRepr")]
pub struct Wave1d {
    levels: Vec<u32>,
    coeffs: Vec<Complex64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wave1dRepr {
    levels: Vec<u32>,
    coeffs: Vec<[f64; 2]>,
}

impl TryFrom<Wave1dRepr> for Wave1d {
    type Error = WaveError;

    fn try_from(r: Wave1dRepr) -> Result<Self, WaveError> {
        let coeffs = r.coeffs.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
        Wave1d::normalized(r.levels, coeffs)
    }
}

impl From<Wave1d> for Wave1dRepr {
    fn from(w: Wave1d) -> Self {
        Wave1dRepr { levels: w.levels, coeffs: w.coeffs.iter().map(|c| [c.re, c.im]).collect() }
    }
}

impl Wave1d {
    pub fn normalized(levels: Vec<u32>, coeffs: Vec<Complex64>) -> Result<Self, WaveError> {
        let modes: Vec<ModeIndex> = levels.iter().map(|&k| ModeIndex::new(k, 0)).collect();
        check_modes(&modes, &coeffs)?;
        let norm: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(WaveError::NotNormalized(0.0));
        }
        let coeffs = coeffs.into_iter().map(|c| c / norm).collect();
        Ok(Self { levels, coeffs })
    }

    pub fn eigenstate(k: u32) -> Self {
        Self { levels: vec![k], coeffs: vec![Complex64::new(1.0, 0.0)] }
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn eval(&self, x: f64, t: f64) -> Complex64 {
        let top = *self.levels.iter().max().unwrap_or(&0) as usize;
        let mut f = [0.0; BUF];
        hermite_functions(x, &mut f[..top + 1]);
        self.levels
            .iter()
            .zip(&self.coeffs)
            .map(|(&k, c)| c * Complex64::from_polar(f[k as usize], -(k as f64 + 0.5) * t))
            .sum()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.eval(x, 0.0).norm_sqr()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_mode() -> Superposition {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Superposition::new(
            vec![ModeIndex::new(0, 0), ModeIndex::new(1, 0)],
            vec![Complex64::new(h, 0.0), Complex64::new(h, 0.0)],
        )
        .unwrap()
    }

    // closed forms: φ0 = π^-1/4 e^{-x²/2}, φ1 = √2 x φ0, φ2 = (2x²-1)/√2 φ0,
    // φ3 = (2x³ - 3x)/√3 φ0
    #[test]
    fn hermite_matches_closed_forms() {
        for &x in &[-3.1, -0.4, 0.0, 0.7, 2.5] {
            let mut f = [0.0; 4];
            hermite_functions(x, &mut f);
            let g = PI.powf(-0.25) * (-0.5 * x * x).exp();
            assert_relative_eq!(f[0], g, max_relative = 1e-14);
            assert_relative_eq!(f[1], 2f64.sqrt() * x * g, max_relative = 1e-14, epsilon = 1e-300);
            assert_relative_eq!(f[2], (2.0 * x * x - 1.0) / 2f64.sqrt() * g, max_relative = 1e-13);
            assert_relative_eq!(f[3], (2.0 * x.powi(3) - 3.0 * x) / 3f64.sqrt() * g, epsilon = 1e-14);
        }
    }

    #[test]
    fn hermite_derivatives_match_finite_differences() {
        let h = 1e-5;
        for &x in &[-2.0, 0.3, 1.7] {
            let mut v = [0.0; 12];
            let mut d = [0.0; 11];
            hermite_with_derivatives(x, &mut v, &mut d);
            let mut p = [0.0; 11];
            let mut m = [0.0; 11];
            hermite_functions(x + h, &mut p);
            hermite_functions(x - h, &mut m);
            for k in 0..11 {
                assert!((d[k] - (p[k] - m[k]) / (2.0 * h)).abs() < 1e-8, "k={k}");
            }
        }
    }

    #[test]
    fn ground_state_peak() {
        let s = Superposition::eigenstate(0, 0).unwrap();
        let psi = s.eval_psi(Point2::new(0.0, 0.0), 0.0);
        assert_relative_eq!(psi.re, PI.powf(-0.5), max_relative = 1e-15);
        assert_eq!(psi.im, 0.0);
        assert_relative_eq!(s.born_density(Point2::new(0.0, 0.0), 3.0), 1.0 / PI, max_relative = 1e-14);
    }

    #[test]
    fn node_line_of_first_excited_state() {
        let s = Superposition::eigenstate(1, 0).unwrap();
        for &y in &[-2.0, 0.0, 1.3] {
            for &t in &[0.0, 0.4, 9.0] {
                assert_eq!(s.eval_psi(Point2::new(0.0, y), t).norm(), 0.0);
            }
        }
        assert!(matches!(s.velocity(Point2::new(0.0, 0.5), 0.0), Err(WaveError::Node { .. })));
    }

    #[test]
    fn period_two_pi() {
        let s = Superposition::equal_weight_random_phase(Superposition::square_modes(5), 7).unwrap();
        let q = Point2::new(0.8, -1.1);
        let a = s.eval_psi(q, 1.3);
        let b = s.eval_psi(q, 1.3 + 2.0 * PI);
        // E is an integer, so a full period gives exactly the same amplitude.
        assert!((a - b).norm() < 1e-13);
        assert!((s.born_density(q, 1.3) - s.born_density(q, 1.3 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn eigenmode_velocity_vanishes() {
        let s = Superposition::eigenstate(2, 1).unwrap();
        let v = s.velocity(Point2::new(0.3, 0.45), 1.7).unwrap();
        assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
    }

    #[test]
    fn velocity_matches_phase_gradient() {
        let s = two_mode();
        let (q, t, h) = (Point2::new(0.5, 0.3), 0.7, 1e-5);
        let phase = |x: f64, y: f64| s.eval_psi(Point2::new(x, y), t).arg();
        let vx = (phase(q.x + h, q.y) - phase(q.x - h, q.y)) / (2.0 * h);
        let vy = (phase(q.x, q.y + h) - phase(q.x, q.y - h)) / (2.0 * h);
        let v = s.velocity(q, t).unwrap();
        assert!((v[0] - vx).abs() < 1e-6, "{} vs {}", v[0], vx);
        assert!((v[1] - vy).abs() < 1e-6, "{} vs {}", v[1], vy);
    }

    #[test]
    fn divergence_matches_finite_differences() {
        let s = Superposition::equal_weight_random_phase(Superposition::square_modes(3), 3).unwrap();
        let (q, t, h) = (Point2::new(0.4, -0.9), 2.2, 1e-5);
        let (_, div) = s.velocity_and_divergence(q, t).unwrap();
        let vx = |x: f64| s.velocity(Point2::new(x, q.y), t).unwrap()[0];
        let vy = |y: f64| s.velocity(Point2::new(q.x, y), t).unwrap()[1];
        let fd = (vx(q.x + h) - vx(q.x - h) + vy(q.y + h) - vy(q.y - h)) / (2.0 * h);
        assert!((div - fd).abs() < 1e-5 * (1.0 + fd.abs()), "{div} vs {fd}");
    }

    #[test]
    fn symmetric_state_symmetries() {
        let (a, b, c) = (Complex64::from_polar(1.0, 0.2), Complex64::from_polar(0.8, 1.1), Complex64::from_polar(0.5, -2.0));
        let s = Superposition::normalized(
            vec![ModeIndex::new(0, 0), ModeIndex::new(1, 0), ModeIndex::new(0, 1), ModeIndex::new(2, 1), ModeIndex::new(1, 2)],
            vec![a, b, b, c, c],
        )
        .unwrap();
        let (x, y, t) = (0.7, -0.2, 0.4);
        let d1 = s.born_density(Point2::new(x, y), t);
        let d2 = s.born_density(Point2::new(y, x), t);
        assert!((d1 - d2).abs() < 1e-15);
        let v1 = s.velocity(Point2::new(x, y), t).unwrap();
        let v2 = s.velocity(Point2::new(y, x), t).unwrap();
        assert!((v1[0] - v2[1]).abs() < 1e-13 && (v1[1] - v2[0]).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_states() {
        let one = Complex64::new(1.0, 0.0);
        assert_eq!(Superposition::new(vec![], vec![]), Err(WaveError::Empty));
        assert!(matches!(
            Superposition::new(vec![ModeIndex::new(0, 0)], vec![one * 0.5]),
            Err(WaveError::NotNormalized(_))
        ));
        assert_eq!(
            Superposition::normalized(vec![ModeIndex::new(1, 1), ModeIndex::new(1, 1)], vec![one, one]),
            Err(WaveError::DuplicateMode(1, 1))
        );
        assert!(matches!(
            Superposition::new(vec![ModeIndex::new(0, 0)], vec![one, one]),
            Err(WaveError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let s = Superposition::equal_weight_random_phase(Superposition::square_modes(5), 11).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.starts_with("{\"modes\":[[0,0],[0,1]"));
        let back: Superposition = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.coeffs().iter().zip(s.coeffs()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }
}
