//! Backward regression Monte Carlo solver for one-dimensional BSDEs.
//!
//! Step `i` (from `N-1` down to 0) works on the cross-section of paths:
//!
//! 1. `Z_i` is the regression of `(Y_{i+1} - E^0_i) dB_i / dt` on the basis,
//!    where `E^0_i` is a first regression of `Y_{i+1}`;
//! 2. the conditional mean `E_i[Y_{i+1}]` is the regression of
//!    `Y_{i+1} - Z_i dB_i` (or of `Y_{i+1}` without martingale control);
//! 3. `Y_i` solves `y = E_i[Y_{i+1}] + g(t_i, x_i, y, Z_i) dt_eff` pathwise,
//!    with `dt_eff = 0` once the path is stopped.
//!
//! Regression features are the displacement `x_i - x_0` and the starting
//! point `x_0`; constant columns are dropped, so a fixed start reduces to a
//! basis in the displacement alone.

use rayon::prelude::*;

use crate::error::{BsdeError, Result};
use crate::generator::{dot, BsdeProblem, ExperimentConfig, Generator, Terminal};
use crate::paths::{BrownianBatch, ForwardBatch, PathView, TimeGrid};
use crate::regression::{BasisModel, Design};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub degree: usize,
    pub cond: f64,
    pub picard_iters_max: usize,
    pub bisection_fallbacks: usize,
}

/// Regression coefficients of one step, enough to re-evaluate the step at an
/// arbitrary state.
#[derive(Debug, Clone)]
pub struct StepModel {
    pub basis: BasisModel,
    pub coef_mean: Vec<f64>,
    pub coef_z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SolutionBatch {
    grid: TimeGrid,
    n_paths: usize,
    d: usize,
    generator: Generator,
    picard_tol: f64,
    picard_max: usize,
    /// `y[i][m]`, `i = 0..=N`.
    y: Vec<Vec<f64>>,
    /// `z[i][m * d + k]`, `i = 0..N`.
    z: Vec<Vec<f64>>,
    /// `g(t_i, x_i, Y_i, Z_i) * dt_eff`, `driver[i][m]`.
    driver: Vec<Vec<f64>>,
    /// `sum_i Z_i . dB_i` along each path.
    stochastic_integral: Vec<f64>,
    pub models: Vec<StepModel>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SolutionBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn y(&self, m: usize, i: usize) -> f64 {
        self.y[i][m]
    }

    pub fn y_step(&self, i: usize) -> &[f64] {
        &self.y[i]
    }

    pub fn z(&self, m: usize, i: usize) -> &[f64] {
        &self.z[i][m * self.d..(m + 1) * self.d]
    }

    pub fn z_step(&self, i: usize) -> &[f64] {
        &self.z[i]
    }

    pub fn terminal_values(&self) -> &[f64] {
        &self.y[self.grid.n_steps()]
    }

    pub fn y0_mean(&self) -> f64 {
        stats::mean(&self.y[0])
    }

    /// Pathwise reconstruction
    /// `xi + sum_i g_i dt_eff - sum_i Z_i . dB_i` of `Y_0`; equals `Y_0[m]`
    /// exactly for an exact solution.
    pub fn pathwise_y0(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        (0..self.n_paths)
            .map(|m| {
                let drift: f64 = (0..n).map(|i| self.driver[i][m]).sum();
                self.y[n][m] + drift - self.stochastic_integral[m]
            })
            .collect()
    }

    /// Standard error of [`Self::y0_mean`]: spread of `Y_0` across paths
    /// plus spread of the reconstruction residual.
    pub fn y0_standard_error(&self) -> f64 {
        let recon = self.pathwise_y0();
        let resid: Vec<f64> = recon.iter().zip(&self.y[0]).map(|(r, y)| r - y).collect();
        ((stats::variance(&self.y[0]) + stats::variance(&resid)) / self.n_paths as f64).sqrt()
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Re-run step `i` at an arbitrary state `x` with start point `x0`,
    /// using the stored regression coefficients (no stopping).
    pub fn evaluate_y(&self, i: usize, x: &[f64], x0: &[f64]) -> Result<f64> {
        if i >= self.grid.n_steps() {
            return Err(BsdeError::invalid("step", "only steps before the terminal time are stored"));
        }
        let model = &self.models[i];
        let raw = raw_features(x, x0);
        let mut phi = vec![0.0; model.basis.len()];
        model.basis.eval(&raw, &mut phi);
        let e = dot(&phi, &model.coef_mean);
        let z: Vec<f64> = model.coef_z.iter().map(|c| dot(&phi, c)).collect();
        implicit_step(
            &self.generator,
            self.grid.time(i),
            x,
            &z,
            e,
            self.grid.dt(),
            self.picard_tol,
            self.picard_max,
        )
        .map(|s| s.y)
        .map_err(|residual| BsdeError::PicardDivergence { step: i, path: usize::MAX, residual })
    }
}

fn raw_features(x: &[f64], x0: &[f64]) -> Vec<f64> {
    x.iter().zip(x0).map(|(a, b)| a - b).chain(x0.iter().copied()).collect()
}

#[derive(Debug, Clone, Copy)]
struct StepSolve {
    y: f64,
    iters: usize,
    bisected: bool,
}

/// Solve `y = e + g(t, x, y, z) dt` by Picard iteration, switching to
/// damping 1/2 when the residual grows and to bisection when iterations run
/// out. `Err` carries the final residual.
#[allow(clippy::too_many_arguments)]
fn implicit_step(
    g: &Generator,
    t: f64,
    x: &[f64],
    z: &[f64],
    e: f64,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> std::result::Result<StepSolve, f64> {
    if dt == 0.0 {
        return Ok(StepSolve { y: e, iters: 0, bisected: false });
    }
    let f = |y: f64| e + g.eval(t, x, y, z) * dt;
    let mut y = e;
    let mut damping = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..=max_iter {
        let fy = f(y);
        let r = (fy - y).abs();
        if !r.is_finite() {
            break;
        }
        if r <= tol * (1.0 + y.abs()) {
            return Ok(StepSolve { y, iters: k, bisected: false });
        }
        if r >= prev && damping == 1.0 {
            damping = 0.5;
        }
        prev = r;
        y += damping * (fy - y);
    }

    // y - f(y) is increasing whenever dt times the y-slope of g is below 1
    let residual = |y: f64| y - f(y);
    let mut w = 1e-3 * (1.0 + e.abs());
    let (mut lo, mut hi) = (e - w, e + w);
    let mut found = false;
    for _ in 0..80 {
        let (rl, rh) = (residual(lo), residual(hi));
        if rl.is_finite() && rh.is_finite() && rl <= 0.0 && rh >= 0.0 {
            found = true;
            break;
        }
        w *= 2.0;
        lo = e - w;
        hi = e + w;
    }
    if !found {
        return Err(residual(y).abs());
    }
    let mut iters = max_iter;
    while hi - lo > tol * (1.0 + lo.abs().max(hi.abs())) && iters < max_iter + 400 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    Ok(StepSolve { y: 0.5 * (lo + hi), iters, bisected: true })
}

fn check_inputs(
    problem: &BsdeProblem,
    forward: &ForwardBatch,
    brownian: &BrownianBatch,
    stop: Option<&[usize]>,
) -> Result<()> {
    if forward.grid() != brownian.grid() {
        return Err(BsdeError::Dimension("forward and Brownian grids differ".into()));
    }
    if forward.n_paths() != brownian.n_paths() {
        return Err(BsdeError::Dimension("forward and Brownian path counts differ".into()));
    }
    if problem.dimension != brownian.dim() {
        return Err(BsdeError::Dimension(format!(
            "problem dimension {} but Brownian dimension {}",
            problem.dimension,
            brownian.dim()
        )));
    }
    let grid = brownian.grid();
    let scale = 1e-12 * (1.0 + problem.t_end.abs());
    if (grid.t_start() - problem.t_start).abs() > scale || (grid.t_end() - problem.t_end).abs() > scale {
        return Err(BsdeError::Dimension("grid does not span [t_start, t_end]".into()));
    }
    if let Some(s) = stop {
        if s.len() != brownian.n_paths() {
            return Err(BsdeError::Dimension("one stopping index per path required".into()));
        }
    }
    Ok(())
}

/// Solve the BSDE on the supplied paths. With `stop`, the generator is
/// switched off from each path's stopping index onward.
pub fn solve_bsde(
    problem: &BsdeProblem,
    forward: &ForwardBatch,
    brownian: &BrownianBatch,
    config: &ExperimentConfig,
    stop: Option<&[usize]>,
) -> Result<SolutionBatch> {
    config.validate()?;
    check_inputs(problem, forward, brownian, stop)?;
    let grid = *brownian.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let m_paths = brownian.n_paths();
    let d = brownian.dim();
    let n = forward.dim();
    let g = &problem.generator;
    let stop_at = |m: usize| stop.map_or(n_steps, |s| s[m]);

    let terminal: Vec<f64> = (0..m_paths)
        .into_par_iter()
        .map(|m| problem.terminal.eval(&PathView::new(brownian, forward, m, stop_at(m))))
        .collect();
    if let Some(m) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(BsdeError::NonFinite { context: "terminal condition", path: m, step: n_steps });
    }

    let mut y = vec![Vec::new(); n_steps + 1];
    let mut z = vec![Vec::new(); n_steps];
    let mut driver = vec![Vec::new(); n_steps];
    let mut models = Vec::with_capacity(n_steps);
    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut stochastic_integral = vec![0.0; m_paths];
    y[n_steps] = terminal;

    let width = 2 * n;
    let mut raw = vec![0.0; m_paths * width];
    for i in (0..n_steps).rev() {
        let t = grid.time(i);
        raw.par_chunks_mut(width).enumerate().for_each(|(m, row)| {
            let x0 = forward.state(m, 0);
            let xi = forward.state(m, i);
            for k in 0..n {
                row[k] = xi[k] - x0[k];
                row[n + k] = x0[k];
            }
        });
        let design = Design::build(&raw, width, config.degree, config.cond_max)
            .map_err(|cond| BsdeError::IllConditioned { step: i, cond })?;
        if design.model.degree < config.degree && !design.model.kept.is_empty() {
            log::debug!(
                "step {i}: regression degree lowered to {} (cond {:.3e})",
                design.model.degree,
                design.cond
            );
        }

        let next = &y[i + 1];
        let coef_pre = design.fit(|m| next[m]);
        let pre: Vec<f64> = (0..m_paths).into_par_iter().map(|m| design.predict(&coef_pre, m)).collect();
        let coef_z: Vec<Vec<f64>> = (0..d)
            .map(|k| design.fit(|m| (next[m] - pre[m]) * brownian.increment(m, i)[k] / dt))
            .collect();
        let mut z_i = vec![0.0; m_paths * d];
        z_i.par_chunks_mut(d).enumerate().for_each(|(m, out)| {
            for (o, c) in out.iter_mut().zip(&coef_z) {
                *o = design.predict(c, m);
            }
        });
        let coef_mean = if config.martingale_control {
            design.fit(|m| next[m] - dot(&z_i[m * d..(m + 1) * d], brownian.increment(m, i)))
        } else {
            coef_pre.clone()
        };

        let solved: Vec<std::result::Result<StepSolve, f64>> = (0..m_paths)
            .into_par_iter()
            .map(|m| {
                let e = design.predict(&coef_mean, m);
                let dt_eff = if i < stop_at(m) { dt } else { 0.0 };
                implicit_step(
                    g,
                    t,
                    forward.state(m, i),
                    &z_i[m * d..(m + 1) * d],
                    e,
                    dt_eff,
                    config.picard_tol,
                    config.picard_max,
                )
            })
            .collect();

        let mut y_i = Vec::with_capacity(m_paths);
        let mut iters_max = 0;
        let mut bisections = 0;
        for (m, s) in solved.into_iter().enumerate() {
            match s {
                Ok(s) => {
                    if !s.y.is_finite() {
                        return Err(BsdeError::NonFinite { context: "Y", path: m, step: i });
                    }
                    iters_max = iters_max.max(s.iters);
                    bisections += s.bisected as usize;
                    y_i.push(s.y);
                }
                Err(residual) => return Err(BsdeError::PicardDivergence { step: i, path: m, residual }),
            }
        }
        if let Some(p) = z_i.iter().position(|v| !v.is_finite()) {
            return Err(BsdeError::NonFinite { context: "Z", path: p / d, step: i });
        }
        let drv: Vec<f64> = (0..m_paths)
            .into_par_iter()
            .map(|m| {
                if i < stop_at(m) {
                    g.eval(t, forward.state(m, i), y_i[m], &z_i[m * d..(m + 1) * d]) * dt
                } else {
                    0.0
                }
            })
            .collect();
        for (m, acc) in stochastic_integral.iter_mut().enumerate() {
            *acc += dot(&z_i[m * d..(m + 1) * d], brownian.increment(m, i));
        }

        diagnostics.push(StepDiagnostics {
            degree: design.model.degree,
            cond: design.cond,
            picard_iters_max: iters_max,
            bisection_fallbacks: bisections,
        });
        models.push(StepModel { basis: design.model.clone(), coef_mean, coef_z });
        y[i] = y_i;
        z[i] = z_i;
        driver[i] = drv;
    }
    models.reverse();
    diagnostics.reverse();

    Ok(SolutionBatch {
        grid,
        n_paths: m_paths,
        d,
        generator: g.clone(),
        picard_tol: config.picard_tol,
        picard_max: config.picard_max,
        y,
        z,
        driver,
        stochastic_integral,
        models,
        diagnostics,
    })
}

/// Exact `Y_{t_start}` for `g = a y + <b, z> + c` and
/// `xi = y0 + <z0, B_T - B_{t_start}>`.
///
/// Under the Girsanov measure `B_T - B_t` has mean `b (T - t)`, so
/// `Y_t = e^{a tau} (y0 + <z0, b> tau) + c (e^{a tau} - 1) / a`.
pub fn closed_form_linear(a: f64, b: &[f64], c: f64, y0: f64, z0: &[f64], t_end: f64, t_start: f64) -> Result<f64> {
    if b.len() != z0.len() {
        return Err(BsdeError::Dimension("b and z0 must have the same length".into()));
    }
    if !(t_end >= t_start) {
        return Err(BsdeError::invalid("t_end", "must be >= t_start"));
    }
    let tau = t_end - t_start;
    let growth = (a * tau).exp();
    let accumulated = if a == 0.0 { tau } else { (growth - 1.0) / a };
    Ok(growth * (y0 + dot(z0, b) * tau) + c * accumulated)
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub fraction_ordered: f64,
    pub pairs: usize,
    pub worst_gap: f64,
    pub slack: f64,
    pub y0_first: f64,
    pub y0_second: f64,
    pub se_diff: f64,
}

/// Check `g1 >= g2` on sampled tuples; `Err(Hypothesis)` on the first
/// counterexample.
pub fn check_generator_order(
    g1: &Generator,
    g2: &Generator,
    forward: &ForwardBatch,
    samples: usize,
    seed: u64,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = forward.grid();
    let d_guess = forward.dim();
    for _ in 0..samples {
        let m = rng.random_range(0..forward.n_paths());
        let i = rng.random_range(0..grid.n_steps());
        let t = grid.time(i);
        let x = forward.state(m, i);
        let y: f64 = rng.random_range(-5.0..5.0);
        let z: Vec<f64> = (0..d_guess).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, b) = (g1.eval(t, x, y, &z), g2.eval(t, x, y, &z));
        if a < b - 1e-12 * (1.0 + a.abs().max(b.abs())) {
            return Err(BsdeError::Hypothesis(format!(
                "{} < {} at t={t}, y={y}: {a} < {b}",
                g1.name, g2.name
            )));
        }
    }
    Ok(())
}

/// Solve `BSDE(g1)` and `BSDE(g2)` on the same paths and report how often
/// `Y1 >= Y2 - slack` holds, with slack = solver tolerance + 3 SE of the
/// `Y_0` difference.
pub fn comparison_check(
    g1: &Generator,
    g2: &Generator,
    template: &BsdeProblem,
    forward: &ForwardBatch,
    brownian: &BrownianBatch,
    config: &ExperimentConfig,
) -> Result<ComparisonReport> {
    if forward.dim() != brownian.dim() {
        // z samples are drawn with the state dimension; keep them honest
        log::debug!("comparison: state dimension differs from noise dimension");
    }
    check_generator_order(g1, g2, forward, 2000, config.seed ^ 0xC0FF_EE00)?;
    let p1 = BsdeProblem { generator: g1.clone(), ..template.clone() };
    let p2 = BsdeProblem { generator: g2.clone(), ..template.clone() };
    let s1 = solve_bsde(&p1, forward, brownian, config, None)?;
    let s2 = solve_bsde(&p2, forward, brownian, config, None)?;
    let se_diff = difference_standard_error(&s1, &s2);
    let scale = s1.max_abs_y().max(s2.max_abs_y());
    let slack = config.picard_tol * (1.0 + scale) * (s1.grid.n_steps() as f64) + 3.0 * se_diff;
    let mut ordered = 0usize;
    let mut worst = f64::INFINITY;
    let steps = s1.grid.n_steps() + 1;
    for i in 0..steps {
        for (a, b) in s1.y[i].iter().zip(&s2.y[i]) {
            let gap = a - b;
            worst = worst.min(gap);
            if gap >= -slack {
                ordered += 1;
            }
        }
    }
    let pairs = steps * s1.n_paths;
    Ok(ComparisonReport {
        fraction_ordered: ordered as f64 / pairs as f64,
        pairs,
        worst_gap: worst,
        slack,
        y0_first: s1.y0_mean(),
        y0_second: s2.y0_mean(),
        se_diff,
    })
}

/// Standard error of `Y0(s1) - Y0(s2)` for solutions on common paths.
pub fn difference_standard_error(s1: &SolutionBatch, s2: &SolutionBatch) -> f64 {
    let r1 = s1.pathwise_y0();
    let r2 = s2.pathwise_y0();
    let dy: Vec<f64> = s1.y[0].iter().zip(&s2.y[0]).map(|(a, b)| a - b).collect();
    let dres: Vec<f64> = (0..s1.n_paths)
        .map(|m| (r1[m] - s1.y[0][m]) - (r2[m] - s2.y[0][m]))
        .collect();
    ((stats::variance(&dy) + stats::variance(&dres)) / s1.n_paths as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// `E[sup_i |dY_i|^2]`
    pub numerator: f64,
    /// `E[|d xi|^2]`
    pub denominator: f64,
    pub ratio: f64,
    /// Numerator with the perturbation halved.
    pub numerator_half: f64,
    /// `numerator_half / numerator`; close to 1/4 for Lipschitz generators.
    pub halving_factor: f64,
    pub finite: bool,
    pub quartering_ok: bool,
}

/// Sensitivity of the solution to the terminal condition.
pub fn stability_check(
    problem: &BsdeProblem,
    perturbed: &Terminal,
    forward: &ForwardBatch,
    brownian: &BrownianBatch,
    config: &ExperimentConfig,
) -> Result<StabilityReport> {
    let base = solve_bsde(problem, forward, brownian, config, None)?;
    let p_full = BsdeProblem { terminal: perturbed.clone(), ..problem.clone() };
    let full = solve_bsde(&p_full, forward, brownian, config, None)?;
    let (t0, t1) = (problem.terminal.clone(), perturbed.clone());
    let half_terminal = Terminal::new(move |p| 0.5 * (t0.eval(p) + t1.eval(p)));
    let p_half = BsdeProblem { terminal: half_terminal, ..problem.clone() };
    let half = solve_bsde(&p_half, forward, brownian, config, None)?;

    let sup_sq = |other: &SolutionBatch| -> f64 {
        let steps = base.grid.n_steps() + 1;
        let per_path: Vec<f64> = (0..base.n_paths)
            .map(|m| {
                (0..steps)
                    .map(|i| (other.y[i][m] - base.y[i][m]).powi(2))
                    .fold(0.0, f64::max)
            })
            .collect();
        stats::mean(&per_path)
    };
    let numerator = sup_sq(&full);
    let numerator_half = sup_sq(&half);
    let n = base.grid.n_steps();
    let dxi: Vec<f64> = (0..base.n_paths).map(|m| (full.y[n][m] - base.y[n][m]).powi(2)).collect();
    let denominator = stats::mean(&dxi);
    let ratio = if denominator > 0.0 { numerator / denominator } else { 0.0 };
    let halving_factor = if numerator > 0.0 { numerator_half / numerator } else { 0.25 };
    let finite = ratio.is_finite() && numerator.is_finite();
    Ok(StabilityReport {
        numerator,
        denominator,
        ratio,
        numerator_half,
        halving_factor,
        finite,
        quartering_ok: (halving_factor - 0.25).abs() <= 0.2 * 0.25,
    })
}
