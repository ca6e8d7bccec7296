//! Probabilistic solution `u(t, x) = Y^{t,x}_t` of
//! `u_t + L u + g(t, x, u, sigma^T grad u) = 0`, `u(T, .) = Phi`,
//! a finite-difference reference in one space dimension, and the
//! test-function residual check.

use std::fmt;
use std::sync::Arc;

use crate::error::{BsdeError, Result};
use crate::generator::{linear, BsdeProblem, ExperimentConfig, Generator, Terminal};
use crate::paths::{euler_maruyama, sample_brownian, InitialState, Sde, TimeGrid};
use crate::representation::{representation_quotient, ProbePoint, QuotientOptions};
use crate::solver::{solve_bsde, SolutionBatch};

pub type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type SpaceTimeFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
pub type SpaceTimeVecFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct PdeProblem {
    pub name: String,
    pub sde: Sde,
    pub generator: Generator,
    pub terminal: Arc<ScalarFn>,
    /// `(L, p)` with `|Phi(x)| + |g(t, x, 0, 0)| <= L (1 + |x|^p)`.
    pub growth: (f64, f64),
    pub horizon: f64,
    /// Spatial domain of the finite-difference reference.
    pub domain: (f64, f64),
    /// Classical solution, when known.
    pub exact: Option<Arc<SpaceTimeFn>>,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("name", &self.name)
            .field("generator", &self.generator.name)
            .field("horizon", &self.horizon)
            .field("domain", &self.domain)
            .finish()
    }
}

impl PdeProblem {
    fn scalar_brownian(
        name: &str,
        generator: Generator,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        growth: (f64, f64),
        exact: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let four_pi = 4.0 * std::f64::consts::PI;
        PdeProblem {
            name: name.into(),
            sde: Sde::brownian(1),
            generator,
            terminal: Arc::new(terminal),
            growth,
            horizon: 1.0,
            domain: (-four_pi, four_pi),
            exact: Some(Arc::new(exact)),
        }
    }

    /// `u_t + u_xx / 2 = 0`, `Phi = cos`: `u = exp(-(T - t)/2) cos x`.
    pub fn heat() -> Self {
        PdeProblem::scalar_brownian("heat", linear(0.0, vec![0.0], 0.0), |x| x[0].cos(), (1.0, 0.0), |t, x| {
            (-(1.0 - t) / 2.0).exp() * x[0].cos()
        })
    }

    /// `u_t + u_xx / 2 - u = 0`, `Phi = cos`: `u = exp(-3(T - t)/2) cos x`.
    pub fn semilinear() -> Self {
        PdeProblem::scalar_brownian("semilinear", linear(-1.0, vec![0.0], 0.0), |x| x[0].cos(), (1.0, 0.0), |t, x| {
            (-1.5 * (1.0 - t)).exp() * x[0].cos()
        })
    }

    /// `Phi = x^2`: `u = x^2 + T - t`.
    pub fn quadratic() -> Self {
        PdeProblem::scalar_brownian("quadratic", linear(0.0, vec![0.0], 0.0), |x| x[0] * x[0], (1.0, 2.0), |t, x| {
            x[0] * x[0] + 1.0 - t
        })
    }

    /// `Phi = a + b x`, which every solver must reproduce exactly.
    pub fn affine(a: f64, b: f64) -> Self {
        PdeProblem::scalar_brownian(
            "affine",
            linear(0.0, vec![0.0], 0.0),
            move |x| a + b * x[0],
            (a.abs() + b.abs(), 1.0),
            move |_t, x| a + b * x[0],
        )
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "heat" => Ok(PdeProblem::heat()),
            "semilinear" => Ok(PdeProblem::semilinear()),
            "quadratic" => Ok(PdeProblem::quadratic()),
            "affine" => Ok(PdeProblem::affine(0.5, 2.0)),
            other => Err(BsdeError::invalid("problem", format!("unknown PDE problem `{other}`"))),
        }
    }

    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// Sample the declared polynomial growth on a grid covering the domain.
    pub fn check_growth(&self) -> Result<()> {
        let (l, p) = self.growth;
        let (lo, hi) = (self.domain.0.min(-10.0), self.domain.1.max(10.0));
        let zero = vec![0.0; self.sde.d];
        for i in 0..=20 {
            let t = self.horizon * i as f64 / 20.0;
            for j in 0..=400 {
                let x = vec![lo + (hi - lo) * j as f64 / 400.0; self.sde.n];
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let lhs = self.terminal_value(&x).abs() + self.generator.eval(t, &x, 0.0, &zero).abs();
                let rhs = l * (1.0 + r.powf(p));
                if !(lhs <= rhs * (1.0 + 1e-12)) {
                    return Err(BsdeError::Hypothesis(format!(
                        "growth bound L(1+|x|^p) with (L, p) = ({l}, {p}) fails at t = {t}, x = {}",
                        x[0]
                    )));
                }
            }
        }
        Ok(())
    }

    fn bsde(&self, t: f64) -> Result<BsdeProblem> {
        let phi = self.terminal.clone();
        BsdeProblem::new(self.generator.clone(), t, self.horizon, self.sde.d, Terminal::of_final_state(move |x| phi(x)))
    }
}

#[derive(Debug, Clone)]
pub struct McEstimate {
    pub u: f64,
    pub sd: f64,
    pub se: f64,
    pub solution: SolutionBatch,
}

/// Solve the BSDE along `X^{t,x}` on `[t, T]`.
pub fn mc_solution(problem: &PdeProblem, t: f64, x: &[f64], config: &ExperimentConfig) -> Result<McEstimate> {
    if !(t < problem.horizon) {
        return Err(BsdeError::invalid("t", "must be before the horizon"));
    }
    problem.check_growth()?;
    let grid = TimeGrid::new(t, problem.horizon, config.n_steps)?;
    let brownian = sample_brownian(&grid, config.n_paths, problem.sde.d, config.seed)?;
    let forward = euler_maruyama(&grid, &problem.sde, &InitialState::Fixed(x.to_vec()), &brownian)?;
    let solution = solve_bsde(&problem.bsde(t)?, &forward, &brownian, config, None)?;
    let se = solution.y0_standard_error();
    Ok(McEstimate { u: solution.y0_mean(), sd: se * (config.n_paths as f64).sqrt(), se, solution })
}

#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x: Vec<f64>,
    /// `Y_{t_k}` on the original path.
    pub conditional: f64,
    /// Fresh solve started at `(t_k, X_{t_k})`.
    pub rerooted: f64,
    pub se: f64,
}

/// Compare `Y_{t_k}` along sampled paths with solves re-rooted at
/// `(t_k, X_{t_k})`.
pub fn flow_check(
    problem: &PdeProblem,
    t: f64,
    x: &[f64],
    step: usize,
    samples: usize,
    config: &ExperimentConfig,
) -> Result<Vec<FlowSample>> {
    let base = mc_solution(problem, t, x, config)?;
    let grid = *base.solution.grid();
    if step == 0 || step >= grid.n_steps() {
        return Err(BsdeError::invalid("step", "must be strictly inside the grid"));
    }
    let brownian = sample_brownian(&grid, config.n_paths, problem.sde.d, config.seed)?;
    let forward = euler_maruyama(&grid, &problem.sde, &InitialState::Fixed(x.to_vec()), &brownian)?;
    let t_k = grid.time(step);
    let stride = (config.n_paths / samples.max(1)).max(1);
    let sub = ExperimentConfig {
        n_steps: grid.n_steps() - step,
        seed: config.seed.wrapping_add(1),
        ..config.clone()
    };
    (0..samples.min(config.n_paths))
        .map(|j| {
            let m = j * stride;
            let xk = forward.state(m, step).to_vec();
            let fresh = mc_solution(problem, t_k, &xk, &sub)?;
            Ok(FlowSample { conditional: base.solution.y(m, step), rerooted: fresh.u, se: fresh.se, x: xk })
        })
        .collect()
}

/// Dirichlet data for the finite-difference march.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Terminal data transported by the Gaussian kernel of the coefficients
    /// frozen at the boundary point.
    HeatKernel,
    /// Zero second derivative at the boundary.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    pub h: f64,
    pub k: f64,
    pub theta: f64,
    pub boundary: Boundary,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings { h: std::f64::consts::PI / 64.0, k: 1e-3, theta: 0.5, boundary: Boundary::HeatKernel }
    }
}

/// Grid solution `u[time][space]`, rows ascending in time.
#[derive(Debug, Clone)]
pub struct FdField {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub h: f64,
    pub k: f64,
    pub theta: f64,
}

impl FdField {
    fn space_interp(&self, row: &[f64], x: f64) -> Result<f64> {
        let (lo, hi) = (self.xs[0], *self.xs.last().unwrap());
        if !(x >= lo && x <= hi) {
            return Err(BsdeError::invalid("x", format!("{x} outside the FD domain [{lo}, {hi}]")));
        }
        let pos = ((x - lo) / self.h).min((self.xs.len() - 1) as f64);
        let j = (pos.floor() as usize).min(self.xs.len() - 2);
        let w = pos - j as f64;
        Ok((1.0 - w) * row[j] + w * row[j + 1])
    }

    /// Linear interpolation in `x` and `t`.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        if !(t >= t0 - 1e-12 && t <= t1 + 1e-12) {
            return Err(BsdeError::invalid("t", format!("{t} outside the FD time range")));
        }
        let n = self.times.len() - 1;
        let pos = ((t - t0) / (t1 - t0) * n as f64).clamp(0.0, n as f64);
        let i = (pos.floor() as usize).min(n - 1);
        let w = pos - i as f64;
        let a = self.space_interp(&self.u[i], x)?;
        let b = self.space_interp(&self.u[i + 1], x)?;
        Ok((1.0 - w) * a + w * b)
    }
}

/// Solve `a x_{j-1} + b x_j + c x_{j+1} = r` (Thomas algorithm).
fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &mut [f64]) -> Result<()> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 {
        return Err(BsdeError::NonFinite { context: "tridiagonal pivot", path: 0, step: 0 });
    }
    cp[0] = c[0] / denom;
    r[0] /= denom;
    for j in 1..n {
        denom = b[j] - a[j] * cp[j - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(BsdeError::NonFinite { context: "tridiagonal pivot", path: 0, step: j });
        }
        cp[j] = c[j] / denom;
        r[j] = (r[j] - a[j] * r[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        r[j] -= cp[j] * r[j + 1];
    }
    Ok(())
}

/// Gaussian expectation `E[Phi(mean + sd N)]` by the trapezoid rule on
/// `[-8, 8]`.
fn gaussian_expectation(phi: &ScalarFn, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return phi(&[mean]);
    }
    const NODES: usize = 321;
    let step = 16.0 / (NODES - 1) as f64;
    let norm = step / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = 0.0;
    // symmetric pairs keep odd moments exact
    for j in 0..NODES / 2 {
        let s = 8.0 - j as f64 * step;
        let w = (-0.5 * s * s).exp() * if j == 0 { 0.5 } else { 1.0 };
        acc += w * (phi(&[mean + sd * s]) + phi(&[mean - sd * s]));
    }
    acc += phi(&[mean]);
    acc * norm
}

/// Backward theta-scheme for `u_t + a u_xx + b u_x + g = 0` on the problem's
/// domain and `[t_start, T]`, with `a = sigma^2 / 2` and `g` explicit.
pub fn fd_reference(problem: &PdeProblem, t_start: f64, s: &FdSettings) -> Result<FdField> {
    if problem.sde.n != 1 || problem.sde.d != 1 {
        return Err(BsdeError::invalid("problem", "the FD reference is one-dimensional"));
    }
    if !(0.0..=1.0).contains(&s.theta) {
        return Err(BsdeError::invalid("theta", "must lie in [0, 1]"));
    }
    if !(s.h > 0.0 && s.k > 0.0) {
        return Err(BsdeError::invalid("h/k", "steps must be positive"));
    }
    let (lo, hi) = problem.domain;
    if !(lo < hi) {
        return Err(BsdeError::invalid("domain", "need x_lo < x_hi"));
    }
    if !(t_start < problem.horizon) {
        return Err(BsdeError::invalid("t", "must be before the horizon"));
    }
    let cells = ((hi - lo) / s.h).round() as usize;
    if cells < 4 || ((hi - lo) / s.h - cells as f64).abs() > 1e-6 {
        return Err(BsdeError::invalid("h", "must divide the domain into at least 4 cells"));
    }
    let h = (hi - lo) / cells as f64;
    let xs: Vec<f64> = (0..=cells).map(|j| lo + j as f64 * h).collect();
    let n_t = ((problem.horizon - t_start) / s.k).ceil().max(1.0) as usize;
    let k = (problem.horizon - t_start) / n_t as f64;
    let times: Vec<f64> = (0..=n_t).map(|i| if i == n_t { problem.horizon } else { t_start + i as f64 * k }).collect();

    let coeffs = |t: f64| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut a = Vec::with_capacity(xs.len());
        let mut b = Vec::with_capacity(xs.len());
        let mut sig = Vec::with_capacity(xs.len());
        let (mut bo, mut so) = ([0.0], [0.0]);
        for &x in &xs {
            problem.sde.drift(t, &[x], &mut bo);
            problem.sde.diffusion(t, &[x], &mut so);
            a.push(0.5 * so[0] * so[0]);
            b.push(bo[0]);
            sig.push(so[0]);
        }
        (a, b, sig)
    };
    if s.theta < 0.5 {
        let a_max = (0..=n_t).map(|i| coeffs(times[i]).0.into_iter().fold(0.0, f64::max)).fold(0.0, f64::max);
        let r = (1.0 - 2.0 * s.theta) * a_max * k / (h * h);
        if r > 0.5 {
            return Err(BsdeError::Cfl(format!("(1 - 2 theta) a k / h^2 = {r:.3} exceeds 1/2")));
        }
    }

    let phi = problem.terminal.clone();
    let boundary_value = |t: f64, x: f64| -> f64 {
        let (mut bo, mut so) = ([0.0], [0.0]);
        problem.sde.drift(t, &[x], &mut bo);
        problem.sde.diffusion(t, &[x], &mut so);
        let tau = problem.horizon - t;
        gaussian_expectation(phi.as_ref(), x + bo[0] * tau, so[0].abs() * tau.sqrt())
    };

    let j_max = cells;
    let interior = j_max - 1;
    let mut u = vec![Vec::new(); n_t + 1];
    u[n_t] = xs.iter().map(|&x| phi(&[x])).collect();
    let apply_l = |row: &[f64], a: &[f64], b: &[f64], j: usize| -> f64 {
        a[j] * (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (h * h) + b[j] * (row[j + 1] - row[j - 1]) / (2.0 * h)
    };
    for n in (0..n_t).rev() {
        let (t_new, t_old) = (times[n], times[n + 1]);
        let next = &u[n + 1];
        let (a_old, b_old, s_old) = coeffs(t_old);
        let (a_new, b_new, _) = coeffs(t_new);
        let mut rhs = vec![0.0; interior];
        for j in 1..j_max {
            let ux = (next[j + 1] - next[j - 1]) / (2.0 * h);
            let gval = problem.generator.eval(t_old, &[xs[j]], next[j], &[s_old[j] * ux]);
            rhs[j - 1] = next[j] + (1.0 - s.theta) * k * apply_l(next, &a_old, &b_old, j) + k * gval;
        }
        let lower: Vec<f64> = (1..j_max).map(|j| -s.theta * k * (a_new[j] / (h * h) - b_new[j] / (2.0 * h))).collect();
        let diag: Vec<f64> = (1..j_max).map(|j| 1.0 + s.theta * k * 2.0 * a_new[j] / (h * h)).collect();
        let upper: Vec<f64> = (1..j_max).map(|j| -s.theta * k * (a_new[j] / (h * h) + b_new[j] / (2.0 * h))).collect();
        let (mut lower, mut diag, mut upper) = (lower, diag, upper);
        let mut row = vec![0.0; j_max + 1];
        match s.boundary {
            Boundary::HeatKernel => {
                row[0] = boundary_value(t_new, xs[0]);
                row[j_max] = boundary_value(t_new, xs[j_max]);
                rhs[0] -= lower[0] * row[0];
                rhs[interior - 1] -= upper[interior - 1] * row[j_max];
            }
            Boundary::Linear => {
                // u_0 = 2 u_1 - u_2 and u_J = 2 u_{J-1} - u_{J-2}
                diag[0] += 2.0 * lower[0];
                upper[0] -= lower[0];
                diag[interior - 1] += 2.0 * upper[interior - 1];
                lower[interior - 1] -= upper[interior - 1];
            }
        }
        lower[0] = 0.0;
        upper[interior - 1] = 0.0;
        thomas(&lower, &diag, &upper, &mut rhs)?;
        row[1..j_max].copy_from_slice(&rhs);
        if s.boundary == Boundary::Linear {
            row[0] = 2.0 * row[1] - row[2];
            row[j_max] = 2.0 * row[j_max - 1] - row[j_max - 2];
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(BsdeError::NonFinite { context: "FD field", path: j, step: n });
        }
        u[n] = row;
    }
    Ok(FdField { times, xs, u, h, k, theta: s.theta })
}

#[derive(Debug, Clone)]
pub struct FkRow {
    pub t: f64,
    pub x: f64,
    pub u_mc: f64,
    pub sd: f64,
    pub se: f64,
    pub u_fd: f64,
    pub diff: f64,
    /// `|u(h, k) - u(2h, 2k)|` plus the change from doubling the domain.
    pub fd_budget: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Point-by-point comparison of the Monte Carlo and finite-difference
/// solutions. Tolerance: `max(2% relative, 3 SE + FD budget)`.
pub fn mc_vs_fd(problem: &PdeProblem, points: &[(f64, f64)], config: &ExperimentConfig, fd: &FdSettings) -> Result<Vec<FkRow>> {
    let t_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if !t_min.is_finite() {
        return Ok(Vec::new());
    }
    let fine = fd_reference(problem, t_min, fd)?;
    let coarse = fd_reference(problem, t_min, &FdSettings { h: 2.0 * fd.h, k: 2.0 * fd.k, ..*fd })?;
    let (lo, hi) = problem.domain;
    let wide_problem = PdeProblem { domain: (lo - (hi - lo) / 2.0, hi + (hi - lo) / 2.0), ..problem.clone() };
    let wide = fd_reference(&wide_problem, t_min, fd)?;
    points
        .iter()
        .map(|&(t, x)| {
            let mc = mc_solution(problem, t, &[x], config)?;
            let u_fd = fine.value(t, x)?;
            let fd_budget = (u_fd - coarse.value(t, x)?).abs() + (u_fd - wide.value(t, x)?).abs();
            let diff = (mc.u - u_fd).abs();
            let tolerance = (0.02 * u_fd.abs()).max(3.0 * mc.se + fd_budget);
            Ok(FkRow { t, x, u_mc: mc.u, sd: mc.sd, se: mc.se, u_fd, diff, fd_budget, tolerance, pass: diff <= tolerance })
        })
        .collect()
}

/// Smooth test function with analytic derivatives (scalar state).
#[derive(Clone)]
pub struct TestFunction {
    pub phi: Arc<SpaceTimeFn>,
    pub phi_t: Arc<SpaceTimeFn>,
    pub phi_x: Arc<SpaceTimeFn>,
    pub phi_xx: Arc<SpaceTimeFn>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TestFunction(..)")
    }
}

impl TestFunction {
    pub fn new<A, B, C, D>(phi: A, phi_t: B, phi_x: C, phi_xx: D) -> Self
    where
        A: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        B: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        C: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        D: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        TestFunction { phi: Arc::new(phi), phi_t: Arc::new(phi_t), phi_x: Arc::new(phi_x), phi_xx: Arc::new(phi_xx) }
    }

    /// `exp(-c (T - t)) cos x`, the classical solutions of the cosine problems.
    pub fn cosine_decay(c: f64, horizon: f64) -> Self {
        TestFunction::new(
            move |t, x| (-c * (horizon - t)).exp() * x[0].cos(),
            move |t, x| c * (-c * (horizon - t)).exp() * x[0].cos(),
            move |t, x| -(-c * (horizon - t)).exp() * x[0].sin(),
            move |t, x| -(-c * (horizon - t)).exp() * x[0].cos(),
        )
    }

    /// Add `sign * (x - x0)^4`, which leaves value and first two derivatives
    /// at `x0` unchanged.
    pub fn with_bump(&self, x0: f64, sign: f64) -> Self {
        let (p, pt, px, pxx) = (self.phi.clone(), self.phi_t.clone(), self.phi_x.clone(), self.phi_xx.clone());
        TestFunction::new(
            move |t, x| p(t, x) + sign * (x[0] - x0).powi(4),
            move |t, x| pt(t, x),
            move |t, x| px(t, x) + sign * 4.0 * (x[0] - x0).powi(3),
            move |t, x| pxx(t, x) + sign * 12.0 * (x[0] - x0).powi(2),
        )
    }

    /// Classical solution of a built-in problem as a test function.
    pub fn classical(problem: &PdeProblem) -> Result<Self> {
        let horizon = problem.horizon;
        match problem.name.as_str() {
            "heat" => Ok(TestFunction::cosine_decay(0.5, horizon)),
            "semilinear" => Ok(TestFunction::cosine_decay(1.5, horizon)),
            "quadratic" => Ok(TestFunction::new(
                move |t, x| x[0] * x[0] + horizon - t,
                |_, _| -1.0,
                |_, x| 2.0 * x[0],
                |_, _| 2.0,
            )),
            "affine" => {
                let phi = problem.terminal.clone();
                let (a, b) = (phi(&[0.0]), phi(&[1.0]) - phi(&[0.0]));
                Ok(TestFunction::new(move |_, x| a + b * x[0], |_, _| 0.0, move |_, _| b, |_, _| 0.0))
            }
            other => Err(BsdeError::invalid("problem", format!("no classical test function for `{other}`"))),
        }
    }

    fn shifted(&self, c: f64) -> Self {
        let p = self.phi.clone();
        TestFunction { phi: Arc::new(move |t, x| p(t, x) + c), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TouchMode {
    /// `u - phi` has a local maximum.
    Sub,
    /// `u - phi` has a local minimum.
    Super,
}

impl TouchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TouchMode::Sub => "sub",
            TouchMode::Super => "super",
        }
    }
}

#[derive(Debug, Clone)]
pub enum USource<'a> {
    Fd(&'a FdField),
    Mc(ExperimentConfig),
}

#[derive(Debug, Clone)]
pub struct TouchSettings {
    pub eps: f64,
    pub stencil_dx: f64,
    pub stencil_dt: f64,
    /// Allowed stencil excess of `u - phi` over its center value.
    pub touch_tol: f64,
    /// Floor for round-off in the analytic derivatives.
    pub roundoff: f64,
    pub quotient: ExperimentConfig,
}

impl Default for TouchSettings {
    fn default() -> Self {
        TouchSettings {
            eps: 0.02,
            stencil_dx: 0.1,
            stencil_dt: 0.02,
            touch_tol: 1e-4,
            roundoff: 1e-9,
            quotient: ExperimentConfig { n_paths: 20_000, n_steps: 50, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TouchReport {
    pub t: f64,
    pub x: f64,
    pub mode: TouchMode,
    pub u: f64,
    pub residual_direct: f64,
    pub residual_quotient: f64,
    pub tolerance: f64,
    pub touching_excess: f64,
    pub agree: bool,
    pub sign_ok: bool,
    pub pass: bool,
}

fn drift_sigma(sde: &Sde, t: f64, x: f64) -> (f64, f64) {
    let (mut b, mut s) = ([0.0], [0.0]);
    sde.drift(t, &[x], &mut b);
    sde.diffusion(t, &[x], &mut s);
    (b[0], s[0])
}

/// `(phi_t + L phi)(t, x) + g(t, x, y + phi, z + sigma phi_x)`.
fn test_generator(problem: &PdeProblem, phi: &TestFunction) -> Generator {
    let (p, g, sde) = (phi.clone(), problem.generator.clone(), problem.sde.clone());
    let lambda = g.lipschitz_z;
    Generator::custom("test_function_residual", lambda, move |t, x, y, z| {
        let (b, s) = drift_sigma(&sde, t, x[0]);
        let lin = (p.phi_t)(t, x) + 0.5 * s * s * (p.phi_xx)(t, x) + b * (p.phi_x)(t, x);
        lin + g.eval(t, x, y + (p.phi)(t, x), &[z[0] + s * (p.phi_x)(t, x)])
    })
    .expect("lambda comes from a validated generator")
    .with_flags(false, true)
}

/// Check the sub/supersolution inequality at `(t, x)` twice: directly from
/// the derivatives of `phi`, and through the representation quotient of the
/// residual generator at `(y, z) = (0, 0)`.
pub fn viscosity_touch_check(
    problem: &PdeProblem,
    source: &USource<'_>,
    phi: &TestFunction,
    t: f64,
    x: f64,
    mode: TouchMode,
    settings: &TouchSettings,
) -> Result<TouchReport> {
    if problem.sde.n != 1 || problem.sde.d != 1 {
        return Err(BsdeError::invalid("problem", "touch check is one-dimensional"));
    }
    if !(t + settings.eps < problem.horizon) {
        return Err(BsdeError::invalid("t", "need t + eps before the horizon"));
    }
    let (u_at, source_tol): (Box<dyn Fn(f64, f64) -> Result<f64> + '_>, f64) = match source {
        USource::Fd(field) => (Box::new(move |t, x| field.value(t, x)), 0.0),
        USource::Mc(cfg) => {
            let center = mc_solution(problem, t, &[x], cfg)?;
            (Box::new(move |t, x| Ok(mc_solution(problem, t, &[x], cfg)?.u)), 3.0 * center.se)
        }
    };
    let u = u_at(t, x)?;
    let phi = phi.shifted(u - (phi.phi)(t, &[x]));
    let sign = match mode {
        TouchMode::Sub => 1.0,
        TouchMode::Super => -1.0,
    };
    let (dx, dtt) = (settings.stencil_dx, settings.stencil_dt);
    let mut excess = f64::NEG_INFINITY;
    for (pt, px) in [(t, x - 2.0 * dx), (t, x - dx), (t, x + dx), (t, x + 2.0 * dx), (t + dtt, x), (t + dtt, x + dx), (t + dtt, x - dx)] {
        let gap = u_at(pt, px)? - (phi.phi)(pt, &[px]);
        excess = excess.max(sign * gap);
    }
    if excess > settings.touch_tol + source_tol {
        return Err(BsdeError::invalid(
            "phi",
            format!("(t, x) is not a local {} of u - phi: stencil excess {excess:.3e}", if sign > 0.0 { "max" } else { "min" }),
        ));
    }

    let (b, s) = drift_sigma(&problem.sde, t, x);
    let xs = [x];
    let residual_direct = (phi.phi_t)(t, &xs)
        + 0.5 * s * s * (phi.phi_xx)(t, &xs)
        + b * (phi.phi_x)(t, &xs)
        + problem.generator.eval(t, &xs, u, &[s * (phi.phi_x)(t, &xs)]);

    let g_test = test_generator(problem, &phi);
    let point = ProbePoint::fixed(t, vec![x], 0.0, vec![0.0]);
    let opts = QuotientOptions { horizon: problem.horizon, sde: Some(problem.sde.clone()), ..Default::default() };
    let q1 = representation_quotient(&g_test, &point, settings.eps, &settings.quotient, &opts)?;
    let q2 = representation_quotient(&g_test, &point, settings.eps / 2.0, &settings.quotient, &opts)?;
    let residual_quotient = 2.0 * q2.mean - q1.mean;
    let tolerance = (q1.mean - q2.mean).abs() + 3.0 * (4.0 * q2.se * q2.se + q1.se * q1.se).sqrt() + settings.roundoff;
    let agree = (residual_direct - residual_quotient).abs() <= tolerance;
    let sign_ok = match mode {
        TouchMode::Sub => residual_direct >= -tolerance && residual_quotient >= -tolerance,
        TouchMode::Super => residual_direct <= tolerance && residual_quotient <= tolerance,
    };
    Ok(TouchReport {
        t,
        x,
        mode,
        u,
        residual_direct,
        residual_quotient,
        tolerance,
        touching_excess: excess,
        agree,
        sign_ok,
        pass: agree && sign_ok,
    })
}
