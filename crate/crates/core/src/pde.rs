//! Ground-truth data generators: random input fields and spectral solvers
//! for the fractional Poisson, viscous Burgers and 2D Navier–Stokes
//! (vorticity) problems.
//!
//! Every solution is returned as a truncated spectral series, so it can be
//! evaluated exactly at the nodes of any grid. Periodic fields use complex
//! exponentials `Σ c_k e^{2πi k·x}` with Hermitian coefficients; Dirichlet
//! fields use `Σ c_ij sin(πix) sin(πjy)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::grid::{FunctionSample, Grid, GridError};

/// Any spectral coefficient above this magnitude aborts a time integration.
pub const BLOW_UP_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("invalid parameter: {0}")]
    Config(String),
    #[error("wrong field type: {0}")]
    Basis(String),
    #[error("solution blew up at t = {time:.5} (|coefficient| = {magnitude:e})")]
    BlowUp { time: f64, magnitude: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Periodic complex exponentials, indices `-K..=K` per axis.
    Fourier,
    /// Dirichlet sines, indices `1..=K` per axis.
    Sine,
}

/// Truncated spectral series on `[0, 1]^d`.
///
/// Coefficients are stored row-major over the wavevector with the `x`
/// index outer, matching the grid node order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    dim: usize,
    kmax: usize,
    basis: Basis,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    fn side(basis: Basis, kmax: usize) -> usize {
        match basis {
            Basis::Fourier => 2 * kmax + 1,
            Basis::Sine => kmax,
        }
    }

    fn check_shape(dim: usize, kmax: usize) -> Result<(), PdeError> {
        if dim != 1 && dim != 2 {
            return Err(PdeError::Config(format!("dimension {dim}")));
        }
        if kmax == 0 {
            return Err(PdeError::Config("mode cutoff must be at least 1".into()));
        }
        Ok(())
    }

    pub fn zeros(dim: usize, kmax: usize, basis: Basis) -> Result<Self, PdeError> {
        Self::check_shape(dim, kmax)?;
        let n = Self::side(basis, kmax).pow(dim as u32);
        Ok(Self {
            dim,
            kmax,
            basis,
            coeffs: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    /// Periodic field from coefficients; rejects non-Hermitian input.
    pub fn fourier(dim: usize, kmax: usize, coeffs: Vec<Complex64>) -> Result<Self, PdeError> {
        let mut f = Self::zeros(dim, kmax, Basis::Fourier)?;
        if coeffs.len() != f.coeffs.len() {
            return Err(PdeError::Config(format!(
                "expected {} coefficients, got {}",
                f.coeffs.len(),
                coeffs.len()
            )));
        }
        f.coeffs = coeffs;
        let scale = f.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
        for k in f.wavevectors() {
            let a = f.coeff(k);
            let b = f.coeff([-k[0], -k[1]]).conj();
            if (a - b).norm() > 1e-12 * scale {
                return Err(PdeError::Basis(format!("coefficients at {k:?} break Hermitian symmetry")));
            }
        }
        Ok(f)
    }

    pub fn sine(dim: usize, kmax: usize, coeffs: Vec<f64>) -> Result<Self, PdeError> {
        let mut f = Self::zeros(dim, kmax, Basis::Sine)?;
        if coeffs.len() != f.coeffs.len() {
            return Err(PdeError::Config(format!(
                "expected {} coefficients, got {}",
                f.coeffs.len(),
                coeffs.len()
            )));
        }
        f.coeffs = coeffs.into_iter().map(|c| Complex64::new(c, 0.0)).collect();
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    fn axis_range(&self) -> std::ops::RangeInclusive<i64> {
        match self.basis {
            Basis::Fourier => -(self.kmax as i64)..=self.kmax as i64,
            Basis::Sine => 1..=self.kmax as i64,
        }
    }

    /// All stored wavevectors in storage order (second entry 0 in 1D).
    pub fn wavevectors(&self) -> Vec<[i64; 2]> {
        let r = self.axis_range();
        match self.dim {
            1 => r.map(|k| [k, 0]).collect(),
            _ => r
                .clone()
                .flat_map(|a| r.clone().map(move |b| [a, b]))
                .collect(),
        }
    }

    fn index(&self, k: [i64; 2]) -> Option<usize> {
        let side = Self::side(self.basis, self.kmax) as i64;
        let offset = match self.basis {
            Basis::Fourier => self.kmax as i64,
            Basis::Sine => -1,
        };
        let a = k[0] + offset;
        let b = k[1] + offset;
        if a < 0 || a >= side {
            return None;
        }
        match self.dim {
            1 => (k[1] == 0).then_some(a as usize),
            _ => (b >= 0 && b < side).then_some((a * side + b) as usize),
        }
    }

    /// Coefficient at a wavevector; zero outside the stored range.
    pub fn coeff(&self, k: [i64; 2]) -> Complex64 {
        self.index(k).map_or(Complex64::new(0.0, 0.0), |i| self.coeffs[i])
    }

    pub fn set_coeff(&mut self, k: [i64; 2], c: Complex64) -> Result<(), PdeError> {
        let i = self
            .index(k)
            .ok_or_else(|| PdeError::Config(format!("wavevector {k:?} outside the stored range")))?;
        self.coeffs[i] = c;
        Ok(())
    }

    /// Sets `c` at `k` and its conjugate at `-k`.
    pub fn set_hermitian(&mut self, k: [i64; 2], c: Complex64) -> Result<(), PdeError> {
        if self.basis != Basis::Fourier {
            return Err(PdeError::Basis("Hermitian pair on a sine field".into()));
        }
        self.set_coeff(k, c)?;
        self.set_coeff([-k[0], -k[1]], c.conj())
    }

    /// `L²([0,1]^d)` norm by Parseval.
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.coeffs.iter().map(|c| c.norm_sqr()).sum();
        match self.basis {
            Basis::Fourier => s.sqrt(),
            Basis::Sine => (s * 0.5f64.powi(self.dim as i32)).sqrt(),
        }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Pointwise value of the series.
    pub fn eval_at(&self, x: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.wavevectors().into_iter().zip(&self.coeffs) {
            acc += match self.basis {
                Basis::Fourier => {
                    let arg = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                    c.re * arg.cos() - c.im * arg.sin()
                }
                Basis::Sine => {
                    let sy = if self.dim == 2 {
                        (PI * k[1] as f64 * x[1]).sin()
                    } else {
                        1.0
                    };
                    c.re * (PI * k[0] as f64 * x[0]).sin() * sy
                }
            };
        }
        acc
    }

    /// Exact evaluation of the truncated series at every node of `grid`.
    pub fn evaluate_on_grid(&self, grid: &Grid) -> Result<FunctionSample, PdeError> {
        GridEvaluator::new(grid, self.basis, self.kmax)?.evaluate(self)
    }

    fn with_kmax(&self, kmax: usize) -> Self {
        let mut out = Self::zeros(self.dim, kmax, self.basis).expect("valid shape");
        for k in out.wavevectors() {
            let c = self.coeff(k);
            out.set_coeff(k, c).expect("in range");
        }
        out
    }
}

/// Per-axis basis tables for repeated evaluation of fields on one grid.
pub struct GridEvaluator {
    grid: Grid,
    basis: Basis,
    kmax: usize,
    // [node][mode], complex for Fourier (im = 0 for Sine)
    table: Vec<Complex64>,
    side: usize,
}

impl GridEvaluator {
    pub fn new(grid: &Grid, basis: Basis, kmax: usize) -> Result<Self, PdeError> {
        let r = grid.points_per_axis();
        let intervals = (r - 1) as i64;
        let side = SpectralField::side(basis, kmax);
        let mut table = Vec::with_capacity(r * side);
        for n in 0..r as i64 {
            match basis {
                Basis::Fourier => {
                    for k in -(kmax as i64)..=kmax as i64 {
                        // reduce the phase exactly so x = 0 and x = 1 coincide
                        let phase = (k * n).rem_euclid(intervals);
                        let arg = 2.0 * PI * phase as f64 / intervals as f64;
                        table.push(Complex64::new(arg.cos(), arg.sin()));
                    }
                }
                Basis::Sine => {
                    for a in 1..=kmax as i64 {
                        let phase = (a * n).rem_euclid(2 * intervals);
                        let arg = PI * phase as f64 / intervals as f64;
                        table.push(Complex64::new(arg.sin(), 0.0));
                    }
                }
            }
        }
        Ok(Self {
            grid: *grid,
            basis,
            kmax,
            table,
            side,
        })
    }

    pub fn evaluate(&self, f: &SpectralField) -> Result<FunctionSample, PdeError> {
        if f.dim != self.grid.dim() {
            return Err(PdeError::Config(format!(
                "{}D field on a {}D grid",
                f.dim,
                self.grid.dim()
            )));
        }
        if f.basis != self.basis {
            return Err(PdeError::Basis("evaluator built for another basis".into()));
        }
        let f = if f.kmax == self.kmax {
            std::borrow::Cow::Borrowed(f)
        } else {
            std::borrow::Cow::Owned(f.with_kmax(self.kmax))
        };
        let r = self.grid.points_per_axis();
        let s = self.side;
        let t = |n: usize, m: usize| self.table[n * s + m];
        let values = match f.dim {
            1 => (0..r)
                .map(|n| (0..s).map(|m| (f.coeffs[m] * t(n, m)).re).sum())
                .collect(),
            _ => {
                // partial[a][j] = Σ_b c[a][b] T_y[j][b]
                let mut partial = vec![Complex64::new(0.0, 0.0); s * r];
                for a in 0..s {
                    let row = &f.coeffs[a * s..(a + 1) * s];
                    for j in 0..r {
                        partial[a * r + j] = row.iter().enumerate().map(|(b, c)| c * t(j, b)).sum();
                    }
                }
                let mut v = Vec::with_capacity(r * r);
                for i in 0..r {
                    for j in 0..r {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for a in 0..s {
                            acc += t(i, a) * partial[a * r + j];
                        }
                        v.push(acc.re);
                    }
                }
                v
            }
        };
        Ok(FunctionSample::new(self.grid, values)?)
    }
}

/// Periodic Gaussian random field `N(0, σ²(−Δ + τ²)^{−α/2})` truncated to `|k_i| ≤ K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrfSpec {
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub kmax: usize,
}

impl GrfSpec {
    /// Burgers initial conditions: covariance `25 (−Δ + 25 I)^{−1}`.
    pub fn burgers() -> Self {
        Self {
            sigma: 5.0,
            tau: 5.0,
            alpha: 2.0,
            kmax: 128,
        }
    }

    /// Navier–Stokes initial vorticity.
    pub fn navier_stokes() -> Self {
        Self {
            sigma: 7f64.powf(0.75),
            tau: 7.0,
            alpha: 2.5,
            kmax: 32,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), PdeError> {
        if !(self.sigma > 0.0 && self.tau > 0.0) {
            return Err(PdeError::Config("GRF sigma and tau must be positive".into()));
        }
        if !(self.alpha > dim as f64 / 2.0) {
            return Err(PdeError::Config(format!(
                "GRF smoothness alpha = {} must exceed d/2 = {}",
                self.alpha,
                dim as f64 / 2.0
            )));
        }
        if self.kmax == 0 {
            return Err(PdeError::Config("GRF mode cutoff must be at least 1".into()));
        }
        Ok(())
    }

    /// Standard deviation of the coefficient at wavevector `k`.
    pub fn coefficient_std(&self, k: [i64; 2]) -> f64 {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        self.sigma * (4.0 * PI * PI * k2 + self.tau * self.tau).powf(-self.alpha / 4.0)
    }
}

pub fn sample_grf_periodic(spec: &GrfSpec, dim: usize, seed: u64) -> Result<SpectralField, PdeError> {
    spec.validate(dim)?;
    let mut f = SpectralField::zeros(dim, spec.kmax, Basis::Fourier)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.kmax as i64;
    let half: Vec<[i64; 2]> = match dim {
        1 => (1..=k).map(|a| [a, 0]).collect(),
        _ => (0..=k)
            .flat_map(|a| (-k..=k).map(move |b| [a, b]))
            .filter(|&[a, b]| a > 0 || b > 0)
            .collect(),
    };
    for kv in half {
        let s = spec.coefficient_std(kv) / 2f64.sqrt();
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        f.set_hermitian(kv, Complex64::new(s * re, s * im))?;
    }
    Ok(f)
}

/// `f = amplitude Σ ξ_ij (i² + j²)^{−decay/2} sin(πix) sin(πjy)` on the unit square.
pub fn sample_random_fourier_series(
    decay: f64,
    kmax: usize,
    amplitude: f64,
    seed: u64,
) -> Result<SpectralField, PdeError> {
    if kmax == 0 {
        return Err(PdeError::Config("random Fourier series needs K >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Vec::with_capacity(kmax * kmax);
    for i in 1..=kmax {
        for j in 1..=kmax {
            let xi: f64 = StandardNormal.sample(&mut rng);
            c.push(amplitude * xi * ((i * i + j * j) as f64).powf(-decay / 2.0));
        }
    }
    SpectralField::sine(2, kmax, c)
}

/// Spectral fractional Laplacian inverse on the Dirichlet sine basis:
/// `u_ij = f_ij / (π²(i² + j²))^{α/2}`.
pub fn solve_fractional_poisson_spectral(f: &SpectralField, alpha: f64) -> Result<SpectralField, PdeError> {
    if f.basis != Basis::Sine {
        return Err(PdeError::Basis("fractional Poisson expects a sine-basis right-hand side".into()));
    }
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(PdeError::Config(format!("fractional order {alpha} outside (0, 2]")));
    }
    let mut u = f.clone();
    for (k, c) in f.wavevectors().into_iter().zip(u.coeffs.iter_mut()) {
        let lambda = PI * PI * (k[0] * k[0] + k[1] * k[1]) as f64;
        *c /= lambda.powf(alpha / 2.0);
    }
    Ok(u)
}

fn fft_size(kmax: usize) -> usize {
    (3 * kmax + 1).next_power_of_two()
}

fn wrap(k: i64, m: usize) -> usize {
    k.rem_euclid(m as i64) as usize
}

/// Viscous Burgers solver parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersConfig {
    pub nu: f64,
    pub t_final: f64,
    /// Retained Fourier modes; wavenumbers `|k| ≤ modes / 2` are kept.
    pub modes: usize,
    /// Time step; chosen from the CFL condition when `None`.
    pub dt: Option<f64>,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            nu: 0.005,
            t_final: 1.0,
            modes: 256,
            dt: None,
        }
    }
}

struct Fft1 {
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft1 {
    fn new(m: usize) -> Self {
        let mut p = FftPlanner::new();
        let fwd = p.plan_fft_forward(m);
        let inv = p.plan_fft_inverse(m);
        let n = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self {
            m,
            fwd,
            inv,
            scratch: vec![Complex64::new(0.0, 0.0); n],
        }
    }
}

/// Max |u| on the collocation grid of size `m`, from retained 1D coefficients.
fn physical_max_1d(coeffs: &[Complex64], kmax: usize, fft: &mut Fft1) -> f64 {
    let mut buf = vec![Complex64::new(0.0, 0.0); fft.m];
    for (i, c) in coeffs.iter().enumerate() {
        buf[wrap(i as i64 - kmax as i64, fft.m)] = *c;
    }
    fft.inv.process_with_scratch(&mut buf, &mut fft.scratch);
    buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max)
}

fn blow_up_check(coeffs: &[Complex64], time: f64) -> Result<(), PdeError> {
    let magnitude = coeffs
        .iter()
        .map(|c| c.norm())
        .fold(0.0, |m, x| if x.is_nan() || x > m { x } else { m });
    if !(magnitude <= BLOW_UP_LIMIT) {
        return Err(PdeError::BlowUp { time, magnitude });
    }
    Ok(())
}

fn step_count(t_final: f64, dt: f64) -> usize {
    ((t_final / dt) - 1e-9).ceil().max(1.0) as usize
}

/// `u_t + ½(u²)_x = ν u_xx` on the periodic unit interval, returning `u(·, T)`.
///
/// Fourier pseudospectral in space with 2/3-rule dealiasing of the quadratic
/// term; classical RK4 applied in integrating-factor form so diffusion is
/// integrated exactly.
pub fn solve_burgers(u0: &SpectralField, cfg: &BurgersConfig) -> Result<SpectralField, PdeError> {
    if u0.basis != Basis::Fourier || u0.dim != 1 {
        return Err(PdeError::Basis("Burgers needs a 1D periodic initial condition".into()));
    }
    if !(cfg.nu > 0.0 && cfg.t_final > 0.0) {
        return Err(PdeError::Config("viscosity and final time must be positive".into()));
    }
    if cfg.modes < 2 {
        return Err(PdeError::Config("Burgers solver needs at least 2 modes".into()));
    }
    let kmax = cfg.modes / 2;
    let mut fft = Fft1::new(fft_size(kmax));
    let m = fft.m;
    let n = 2 * kmax + 1;
    let mut u = u0.with_kmax(kmax).coeffs;

    let umax = physical_max_1d(&u, kmax, &mut fft);
    let dx = 1.0 / m as f64;
    let dt = match cfg.dt {
        Some(dt) => {
            if !(dt > 0.0) || dt * umax / dx > 0.5 + 1e-12 {
                return Err(PdeError::Config(format!(
                    "time step {dt} gives CFL number {:.3} > 0.5",
                    dt * umax / dx
                )));
            }
            dt
        }
        None => {
            let cfl = if umax > 0.0 { 0.5 * dx / umax } else { f64::INFINITY };
            cfl.min(cfg.t_final / 10.0)
        }
    };
    let steps = step_count(cfg.t_final, dt);
    let h = cfg.t_final / steps as f64;

    let wavenumber = |i: usize| i as f64 - kmax as f64;
    let lin: Vec<f64> = (0..n)
        .map(|i| -cfg.nu * (2.0 * PI * wavenumber(i)).powi(2))
        .collect();
    let e_half: Vec<f64> = lin.iter().map(|l| (l * h / 2.0).exp()).collect();

    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    let mut nonlinear = |state: &[Complex64], out: &mut [Complex64]| {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (i, c) in state.iter().enumerate() {
            buf[wrap(i as i64 - kmax as i64, m)] = *c;
        }
        fft.inv.process_with_scratch(&mut buf, &mut fft.scratch);
        for b in buf.iter_mut() {
            *b = Complex64::new(b.re * b.re, 0.0);
        }
        fft.fwd.process_with_scratch(&mut buf, &mut fft.scratch);
        let scale = 1.0 / m as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let k = wavenumber(i);
            // -(1/2) ∂x (u²) = -πik (u²)^
            *o = Complex64::new(0.0, -PI * k) * buf[wrap(i as i64 - kmax as i64, m)] * scale;
        }
    };

    let zero = Complex64::new(0.0, 0.0);
    let (mut n1, mut n2, mut n3, mut n4) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
    let mut tmp = vec![zero; n];
    for step in 0..steps {
        nonlinear(&u, &mut n1);
        for i in 0..n {
            tmp[i] = e_half[i] * (u[i] + 0.5 * h * n1[i]);
        }
        nonlinear(&tmp, &mut n2);
        for i in 0..n {
            tmp[i] = e_half[i] * u[i] + 0.5 * h * n2[i];
        }
        nonlinear(&tmp, &mut n3);
        for i in 0..n {
            tmp[i] = e_half[i] * e_half[i] * u[i] + h * e_half[i] * n3[i];
        }
        nonlinear(&tmp, &mut n4);
        for i in 0..n {
            let e2 = e_half[i] * e_half[i];
            u[i] = e2 * u[i] + h / 6.0 * (e2 * n1[i] + 2.0 * e_half[i] * (n2[i] + n3[i]) + n4[i]);
        }
        // keep the stored field exactly real
        for i in 0..kmax {
            let avg = 0.5 * (u[n - 1 - i] + u[i].conj());
            u[n - 1 - i] = avg;
            u[i] = avg.conj();
        }
        u[kmax].im = 0.0;
        blow_up_check(&u, (step + 1) as f64 * h)?;
    }
    Ok(SpectralField {
        dim: 1,
        kmax,
        basis: Basis::Fourier,
        coeffs: u,
    })
}

/// Navier–Stokes (vorticity form) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavierStokesConfig {
    pub nu: f64,
    pub t_final: f64,
    /// Retained modes per axis; wavenumbers `|k_i| ≤ modes / 2` are kept.
    pub modes: usize,
    pub dt: Option<f64>,
}

impl Default for NavierStokesConfig {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            t_final: 2.2,
            modes: 64,
            dt: None,
        }
    }
}

/// `amplitude (sin(2π(x + y)) + cos(2π(x + y)))`.
pub fn default_forcing(amplitude: f64, kmax: usize) -> Result<SpectralField, PdeError> {
    let mut f = SpectralField::zeros(2, kmax.max(1), Basis::Fourier)?;
    // cos θ + sin θ = ((1 - i)/2) e^{iθ} + c.c.
    f.set_hermitian([1, 1], Complex64::new(0.5 * amplitude, -0.5 * amplitude))?;
    Ok(f)
}

/// Velocity `(ψ_y, −ψ_x)` with `Δψ = −ω`, as spectral fields.
pub fn velocity_coefficients(w: &SpectralField) -> Result<(SpectralField, SpectralField), PdeError> {
    if w.basis != Basis::Fourier || w.dim != 2 {
        return Err(PdeError::Basis("velocity needs a 2D periodic vorticity".into()));
    }
    let mut u = SpectralField::zeros(2, w.kmax, Basis::Fourier)?;
    let mut v = u.clone();
    for (i, k) in w.wavevectors().into_iter().enumerate() {
        let (kx, ky) = (k[0] as f64, k[1] as f64);
        let k2 = kx * kx + ky * ky;
        if k2 == 0.0 {
            continue;
        }
        let psi = w.coeffs[i] / (4.0 * PI * PI * k2);
        u.coeffs[i] = Complex64::new(0.0, 2.0 * PI * ky) * psi;
        v.coeffs[i] = Complex64::new(0.0, -2.0 * PI * kx) * psi;
    }
    Ok((u, v))
}

struct Fft2 {
    m: usize,
    fft: Fft1,
    tbuf: Vec<Complex64>,
}

impl Fft2 {
    fn new(m: usize) -> Self {
        Self {
            m,
            fft: Fft1::new(m),
            tbuf: vec![Complex64::new(0.0, 0.0); m * m],
        }
    }

    fn transpose(src: &[Complex64], dst: &mut [Complex64], m: usize) {
        for i in 0..m {
            for j in 0..m {
                dst[j * m + i] = src[i * m + j];
            }
        }
    }

    fn process(&mut self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.fft.inv } else { &self.fft.fwd };
        plan.process_with_scratch(data, &mut self.fft.scratch);
        Self::transpose(data, &mut self.tbuf, self.m);
        plan.process_with_scratch(&mut self.tbuf, &mut self.fft.scratch);
        Self::transpose(&self.tbuf, data, self.m);
    }
}

/// Pseudospectral vorticity solver: Crank–Nicolson on diffusion, explicit
/// Euler on advection and forcing, square 2/3-rule truncation.
pub struct NavierStokesSolver {
    kmax: usize,
    nu: f64,
    dt: f64,
    steps: usize,
    taken: usize,
    omega: Vec<Complex64>,
    forcing: Vec<Complex64>,
    lap: Vec<f64>,
    waves: Vec<[f64; 2]>,
    fft: Fft2,
    bufs: [Vec<Complex64>; 4],
}

impl NavierStokesSolver {
    pub fn new(w0: &SpectralField, forcing: &SpectralField, cfg: &NavierStokesConfig) -> Result<Self, PdeError> {
        for (name, f) in [("initial vorticity", w0), ("forcing", forcing)] {
            if f.basis != Basis::Fourier || f.dim != 2 {
                return Err(PdeError::Basis(format!("{name} must be a 2D periodic field")));
            }
        }
        if forcing.coeff([0, 0]).norm() > 1e-14 {
            return Err(PdeError::Config("forcing must have zero mean".into()));
        }
        if !(cfg.nu > 0.0 && cfg.t_final > 0.0) {
            return Err(PdeError::Config("viscosity and final time must be positive".into()));
        }
        if cfg.modes < 2 {
            return Err(PdeError::Config("Navier-Stokes solver needs at least 2 modes".into()));
        }
        let kmax = cfg.modes / 2;
        let m = fft_size(kmax);
        let omega = w0.with_kmax(kmax).coeffs;
        let forcing = forcing.with_kmax(kmax).coeffs;
        let proto = SpectralField::zeros(2, kmax, Basis::Fourier)?;
        let waves: Vec<[f64; 2]> = proto
            .wavevectors()
            .into_iter()
            .map(|k| [k[0] as f64, k[1] as f64])
            .collect();
        let lap = waves
            .iter()
            .map(|k| 4.0 * PI * PI * (k[0] * k[0] + k[1] * k[1]))
            .collect();
        let zero = vec![Complex64::new(0.0, 0.0); m * m];
        let mut s = Self {
            kmax,
            nu: cfg.nu,
            dt: 0.0,
            steps: 0,
            taken: 0,
            omega,
            forcing,
            lap,
            waves,
            fft: Fft2::new(m),
            bufs: [zero.clone(), zero.clone(), zero.clone(), zero],
        };
        let (umax, speed) = s.velocity_bounds();
        let dx = 1.0 / m as f64;
        let dt = match cfg.dt {
            Some(dt) => {
                if !(dt > 0.0) || dt * umax / dx > 0.5 + 1e-12 {
                    return Err(PdeError::Config(format!(
                        "time step {dt} gives CFL number {:.3} > 0.5",
                        dt * umax / dx
                    )));
                }
                dt
            }
            None => {
                let cfl = if umax > 0.0 { 0.5 * dx / umax } else { f64::INFINITY };
                // explicit advection stays dissipative while dt |u|² ≤ ν
                let damp = if speed > 0.0 { cfg.nu / (speed * speed) } else { f64::INFINITY };
                cfl.min(damp).min(1e-2).min(cfg.t_final)
            }
        };
        s.steps = step_count(cfg.t_final, dt);
        s.dt = cfg.t_final / s.steps as f64;
        Ok(s)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.taken as f64 * self.dt
    }

    pub fn state(&self) -> SpectralField {
        SpectralField {
            dim: 2,
            kmax: self.kmax,
            basis: Basis::Fourier,
            coeffs: self.omega.clone(),
        }
    }

    fn scatter(&self, coeffs: impl Iterator<Item = Complex64>, buf: &mut [Complex64]) {
        let m = self.fft.m;
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (c, k) in coeffs.zip(&self.waves) {
            buf[wrap(k[0] as i64, m) * m + wrap(k[1] as i64, m)] = c;
        }
    }

    /// (max(|u|) + max(|v|), max |(u, v)|) on the collocation grid.
    fn velocity_bounds(&mut self) -> (f64, f64) {
        self.physical_velocity();
        let [u, v, _, _] = &self.bufs;
        let (mut mu, mut mv, mut sp) = (0.0f64, 0.0f64, 0.0f64);
        for (a, b) in u.iter().zip(v) {
            mu = mu.max(a.re.abs());
            mv = mv.max(b.re.abs());
            sp = sp.max(a.re.hypot(b.re));
        }
        (mu + mv, sp)
    }

    fn physical_velocity(&mut self) {
        let tp = 2.0 * PI;
        let psi: Vec<Complex64> = self
            .omega
            .iter()
            .zip(&self.lap)
            .map(|(w, l)| if *l == 0.0 { Complex64::new(0.0, 0.0) } else { w / l })
            .collect();
        let mut bufs = std::mem::take(&mut self.bufs);
        let u_hat = psi.iter().zip(&self.waves).map(|(p, k)| Complex64::new(0.0, tp * k[1]) * p);
        self.scatter(u_hat, &mut bufs[0]);
        let v_hat = psi.iter().zip(&self.waves).map(|(p, k)| Complex64::new(0.0, -tp * k[0]) * p);
        self.scatter(v_hat, &mut bufs[1]);
        self.fft.process(&mut bufs[0], true);
        self.fft.process(&mut bufs[1], true);
        self.bufs = bufs;
    }

    /// Advances one time step.
    pub fn step(&mut self) -> Result<(), PdeError> {
        let tp = 2.0 * PI;
        self.physical_velocity();
        let mut bufs = std::mem::take(&mut self.bufs);
        let wx = self.omega.iter().zip(&self.waves).map(|(w, k)| Complex64::new(0.0, tp * k[0]) * w);
        self.scatter(wx, &mut bufs[2]);
        let wy = self.omega.iter().zip(&self.waves).map(|(w, k)| Complex64::new(0.0, tp * k[1]) * w);
        self.scatter(wy, &mut bufs[3]);
        self.fft.process(&mut bufs[2], true);
        self.fft.process(&mut bufs[3], true);
        {
            let [u, v, wx, wy] = &mut bufs;
            for i in 0..u.len() {
                wx[i] = Complex64::new(u[i].re * wx[i].re + v[i].re * wy[i].re, 0.0);
            }
        }
        self.fft.process(&mut bufs[2], false);
        let m = self.fft.m;
        let scale = 1.0 / (m * m) as f64;
        let half = 0.5 * self.dt * self.nu;
        for (i, k) in self.waves.iter().enumerate() {
            let mut adv = bufs[2][wrap(k[0] as i64, m) * m + wrap(k[1] as i64, m)] * scale;
            if self.lap[i] == 0.0 {
                adv = Complex64::new(0.0, 0.0);
            }
            let l = self.lap[i];
            self.omega[i] =
                (-self.dt * adv + self.dt * self.forcing[i] + (1.0 - half * l) * self.omega[i]) / (1.0 + half * l);
        }
        self.bufs = bufs;
        self.taken += 1;
        blow_up_check(&self.omega, self.time())
    }

    pub fn run(mut self) -> Result<SpectralField, PdeError> {
        while self.taken < self.steps {
            self.step()?;
        }
        Ok(self.state())
    }
}

/// Vorticity `ω(·, T)` for initial vorticity `w0` and forcing `forcing`.
pub fn solve_navier_stokes_vorticity(
    w0: &SpectralField,
    forcing: &SpectralField,
    cfg: &NavierStokesConfig,
) -> Result<SpectralField, PdeError> {
    NavierStokesSolver::new(w0, forcing, cfg)?.run()
}

/// A generator of (input, output) truth pairs for one PDE problem.
pub trait Problem: Sync {
    fn tag(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn sample_pair(&self, seed: u64) -> Result<(SpectralField, SpectralField), PdeError>;
    /// Canonical `key=value;...` listing of every generator parameter.
    fn config_string(&self) -> String;
}

/// Fractional Poisson: random sine series in, spectral solution out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonProblem {
    pub alpha: f64,
    pub decay: f64,
    pub modes: usize,
    pub amplitude: f64,
}

impl Default for PoissonProblem {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            decay: 2.0,
            modes: 12,
            amplitude: 10.0,
        }
    }
}

impl Problem for PoissonProblem {
    fn tag(&self) -> &'static str {
        "poisson"
    }
    fn dim(&self) -> usize {
        2
    }
    fn sample_pair(&self, seed: u64) -> Result<(SpectralField, SpectralField), PdeError> {
        let f = sample_random_fourier_series(self.decay, self.modes, self.amplitude, seed)?;
        let u = solve_fractional_poisson_spectral(&f, self.alpha)?;
        Ok((f, u))
    }
    fn config_string(&self) -> String {
        format!(
            "problem=poisson;alpha={:?};rfs_decay={:?};rfs_modes={};rfs_amplitude={:?}",
            self.alpha, self.decay, self.modes, self.amplitude
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersProblem {
    pub grf: GrfSpec,
    pub solver: BurgersConfig,
}

impl Default for BurgersProblem {
    fn default() -> Self {
        Self {
            grf: GrfSpec::burgers(),
            solver: BurgersConfig::default(),
        }
    }
}

impl Problem for BurgersProblem {
    fn tag(&self) -> &'static str {
        "burgers"
    }
    fn dim(&self) -> usize {
        1
    }
    fn sample_pair(&self, seed: u64) -> Result<(SpectralField, SpectralField), PdeError> {
        let u0 = sample_grf_periodic(&self.grf, 1, seed)?;
        let ut = solve_burgers(&u0, &self.solver)?;
        Ok((u0, ut))
    }
    fn config_string(&self) -> String {
        format!(
            "problem=burgers;grf_sigma={:?};grf_tau={:?};grf_alpha={:?};grf_modes={};nu={:?};t_final={:?};solver_modes={};dt={}",
            self.grf.sigma,
            self.grf.tau,
            self.grf.alpha,
            self.grf.kmax,
            self.solver.nu,
            self.solver.t_final,
            self.solver.modes,
            self.solver.dt.map_or("auto".to_string(), |d| format!("{d:?}"))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavierStokesProblem {
    pub grf: GrfSpec,
    pub solver: NavierStokesConfig,
    pub forcing_amplitude: f64,
}

impl Default for NavierStokesProblem {
    fn default() -> Self {
        Self {
            grf: GrfSpec::navier_stokes(),
            solver: NavierStokesConfig::default(),
            forcing_amplitude: 0.1,
        }
    }
}

impl Problem for NavierStokesProblem {
    fn tag(&self) -> &'static str {
        "navier_stokes"
    }
    fn dim(&self) -> usize {
        2
    }
    fn sample_pair(&self, seed: u64) -> Result<(SpectralField, SpectralField), PdeError> {
        let w0 = sample_grf_periodic(&self.grf, 2, seed)?;
        let f = default_forcing(self.forcing_amplitude, 1)?;
        let wt = solve_navier_stokes_vorticity(&w0, &f, &self.solver)?;
        Ok((w0, wt))
    }
    fn config_string(&self) -> String {
        format!(
            "problem=navier_stokes;grf_sigma={:?};grf_tau={:?};grf_alpha={:?};grf_modes={};nu={:?};t_final={:?};solver_modes={};dt={};forcing_amplitude={:?}",
            self.grf.sigma,
            self.grf.tau,
            self.grf.alpha,
            self.grf.kmax,
            self.solver.nu,
            self.solver.t_final,
            self.solver.modes,
            self.solver.dt.map_or("auto".to_string(), |d| format!("{d:?}")),
            self.forcing_amplitude
        )
    }
}
