//! Representation quotients `(Y_t(g, (t+eps) ^ tau, y + <z, B_{(t+eps)^tau} - B_t>) - y) / eps`
//! and their convergence to `g(t, x, y, z)`.
//!
//! For a fixed state the quotient is one number per cell. For a random state
//! (`x = B_t`) the estimator is nested: outer states are drawn from the law of
//! `B_t`, and each gets its own fixed-start solve, so the target is compared
//! state by state without smoothing `g` through a regression in `x`.

use rand::{Rng, SeedableRng};

use crate::error::{BsdeError, Result};
use crate::generator::{BsdeProblem, ExperimentConfig, Generator, Terminal};
use crate::paths::{
    brownian_forward, euler_maruyama, sample_brownian, sample_normal_points, stopping_indices, InitialState, Sde, TimeGrid,
};
use crate::solver::{comparison_check, difference_standard_error, solve_bsde, SolutionBatch};
use crate::stats;

/// Below this many steps per cell the solver bias is not negligible next to
/// the `O(eps)` representation error.
pub const MIN_STEPS_PER_CELL: usize = 50;

pub const MIN_INNER_PATHS: usize = 1000;

/// Fraction of stopped paths above which a warning is logged.
pub const STOPPING_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum StateSpec {
    Fixed(Vec<f64>),
    /// `x = origin + B_t - B_{t0}`, sampled.
    Brownian { origin: Vec<f64>, t0: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub t: f64,
    pub state: StateSpec,
    pub y: f64,
    pub z: Vec<f64>,
}

impl ProbePoint {
    pub fn fixed(t: f64, x: Vec<f64>, y: f64, z: Vec<f64>) -> Self {
        ProbePoint { t, state: StateSpec::Fixed(x), y, z }
    }

    /// State `B_t` of a Brownian motion started at 0 at time 0.
    pub fn brownian(t: f64, y: f64, z: Vec<f64>) -> Self {
        let d = z.len();
        ProbePoint { t, state: StateSpec::Brownian { origin: vec![0.0; d], t0: 0.0 }, y, z }
    }
}

#[derive(Debug, Clone)]
pub struct QuotientOptions {
    /// Horizon `T`; every cell must end by then.
    pub horizon: f64,
    /// Barrier of the stopping time.
    pub barrier: f64,
    /// Outer states for a random state. The path budget `n_paths` is split
    /// evenly across them, with at least [`MIN_INNER_PATHS`] each.
    pub outer_paths: usize,
    /// Forward dynamics of the state; `None` means `x + B`.
    pub sde: Option<Sde>,
}

impl Default for QuotientOptions {
    fn default() -> Self {
        QuotientOptions { horizon: 1.0, barrier: 1.0, outer_paths: 32, sde: None }
    }
}

/// One `(point, eps)` cell.
#[derive(Debug, Clone)]
pub struct QuotientEstimate {
    pub eps: f64,
    /// Mean quotient over outer states (or the single quotient).
    pub mean: f64,
    /// Spread of the quotient's Monte Carlo distribution.
    pub sd: f64,
    /// Standard error of `mean`.
    pub se: f64,
    /// Quotient per outer state.
    pub samples: Vec<f64>,
    /// Standard error of each sample.
    pub sample_se: Vec<f64>,
    /// `g(t, x, y, z)` per outer state.
    pub targets: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Pathwise quotients `(R_m - y) / eps` of the first outer state.
    pub per_path: Vec<f64>,
    pub stopped_fraction: f64,
}

impl QuotientEstimate {
    pub fn target_mean(&self) -> f64 {
        stats::mean(&self.targets)
    }

    /// `(mean_k |q_k - g_k|^p)^{1/p}` and its standard error.
    pub fn lp_error(&self, p: f64) -> (f64, f64) {
        let errs: Vec<f64> = self.samples.iter().zip(&self.targets).map(|(q, g)| (q - g).abs()).collect();
        let k = errs.len() as f64;
        let powered: Vec<f64> = errs.iter().map(|e| e.powf(p)).collect();
        let value = stats::mean(&powered).powf(1.0 / p);
        let inner = stats::mean(&self.sample_se.iter().map(|s| s * s).collect::<Vec<_>>());
        let se = ((stats::variance(&errs) + inner) / k).sqrt();
        (value, se)
    }
}

fn derive_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Cell {
    solution: SolutionBatch,
    stopped: usize,
}

fn solve_cell(g: &Generator, point: &ProbePoint, x: &[f64], eps: f64, seed: u64, config: &ExperimentConfig, opts: &QuotientOptions) -> Result<Cell> {
    let d = point.z.len();
    let grid = TimeGrid::new(point.t, point.t + eps, config.n_steps)?;
    let brownian = sample_brownian(&grid, config.n_paths, d, seed)?;
    let forward = match &opts.sde {
        Some(sde) => euler_maruyama(&grid, sde, &InitialState::Fixed(x.to_vec()), &brownian)?,
        None => brownian_forward(&brownian, &InitialState::Fixed(x.to_vec()))?,
    };
    let stop = stopping_indices(&brownian, g, Some(&forward), opts.barrier);
    let stopped = stop.iter().filter(|&&k| k < grid.n_steps()).count();
    let problem = BsdeProblem::new(g.clone(), point.t, point.t + eps, d, Terminal::brownian_affine(point.y, point.z.clone()))?;
    let solution = solve_bsde(&problem, &forward, &brownian, config, Some(&stop))?;
    Ok(Cell { solution, stopped })
}

fn check_point(point: &ProbePoint, eps: f64, config: &ExperimentConfig, opts: &QuotientOptions) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(BsdeError::invalid("eps", "must be > 0"));
    }
    if point.z.is_empty() {
        return Err(BsdeError::invalid("z", "need at least one coordinate"));
    }
    if !(point.t >= 0.0) || point.t + eps > opts.horizon + 1e-12 {
        return Err(BsdeError::invalid("eps", format!("t + eps must lie in [0, {}]", opts.horizon)));
    }
    if config.n_steps < MIN_STEPS_PER_CELL {
        return Err(BsdeError::invalid("n_steps", format!("need at least {MIN_STEPS_PER_CELL} steps per cell")));
    }
    if !(opts.barrier > 0.0) {
        return Err(BsdeError::invalid("barrier", "must be > 0"));
    }
    let x_len = match &point.state {
        StateSpec::Fixed(x) => x.len(),
        StateSpec::Brownian { origin, t0 } => {
            if !(*t0 <= point.t) {
                return Err(BsdeError::invalid("t0", "must not exceed t"));
            }
            if opts.outer_paths < 2 {
                return Err(BsdeError::invalid("outer_paths", "need at least 2 for a random state"));
            }
            origin.len()
        }
    };
    let (n, d) = opts.sde.as_ref().map_or((point.z.len(), point.z.len()), |s| (s.n, s.d));
    if x_len != n || point.z.len() != d {
        return Err(BsdeError::Dimension("state or z does not match the forward dynamics".into()));
    }
    Ok(())
}

/// Per-state solver settings: a random state spreads the path budget over
/// its outer states.
fn inner_config(point: &ProbePoint, config: &ExperimentConfig, opts: &QuotientOptions) -> ExperimentConfig {
    match point.state {
        StateSpec::Fixed(_) => config.clone(),
        StateSpec::Brownian { .. } => ExperimentConfig {
            n_paths: (config.n_paths / opts.outer_paths).max(MIN_INNER_PATHS),
            ..config.clone()
        },
    }
}

fn outer_states(point: &ProbePoint, seed: u64, opts: &QuotientOptions) -> Vec<Vec<f64>> {
    match &point.state {
        StateSpec::Fixed(x) => vec![x.clone()],
        StateSpec::Brownian { origin, t0 } => sample_normal_points(seed, opts.outer_paths, origin, point.t - t0),
    }
}

/// Estimate the representation quotient at `point` for one `eps`.
pub fn representation_quotient(
    g: &Generator,
    point: &ProbePoint,
    eps: f64,
    config: &ExperimentConfig,
    opts: &QuotientOptions,
) -> Result<QuotientEstimate> {
    check_point(point, eps, config, opts)?;
    let states = outer_states(point, config.seed, opts);
    let config = &inner_config(point, config, opts);
    let zero_based = matches!(point.state, StateSpec::Fixed(_));
    let mut samples = Vec::with_capacity(states.len());
    let mut sample_se = Vec::with_capacity(states.len());
    let mut targets = Vec::with_capacity(states.len());
    let mut per_path = Vec::new();
    let mut stopped = 0;
    for (k, x) in states.iter().enumerate() {
        let seed = if zero_based { config.seed } else { derive_seed(config.seed, k) };
        let cell = solve_cell(g, point, x, eps, seed, config, opts)?;
        let s = &cell.solution;
        samples.push((s.y0_mean() - point.y) / eps);
        sample_se.push(s.y0_standard_error() / eps);
        targets.push(g.eval(point.t, x, point.y, &point.z));
        if k == 0 {
            per_path = s.pathwise_y0().iter().map(|r| (r - point.y) / eps).collect();
        }
        stopped += cell.stopped;
    }
    let total = (states.len() * config.n_paths) as f64;
    let stopped_fraction = stopped as f64 / total;
    if stopped_fraction > STOPPING_WARN_FRACTION {
        log::warn!(
            "stopping time binds on {:.2}% of paths at eps = {eps}; eps is large for barrier {}",
            100.0 * stopped_fraction,
            opts.barrier
        );
    }
    log::info!("quotient cell eps = {eps}: {} state(s), {} paths each", states.len(), config.n_paths);
    let k = samples.len() as f64;
    let inner = stats::mean(&sample_se.iter().map(|s| s * s).collect::<Vec<_>>());
    let (sd, se) = if samples.len() > 1 {
        (stats::std_dev(&samples), ((stats::variance(&samples) + inner) / k).sqrt())
    } else {
        (stats::std_dev(&per_path), sample_se[0])
    };
    Ok(QuotientEstimate {
        eps,
        mean: stats::mean(&samples),
        sd,
        se,
        samples,
        sample_se,
        targets,
        states,
        per_path,
        stopped_fraction,
    })
}

#[derive(Debug, Clone)]
pub struct RepresentationReport {
    pub point: ProbePoint,
    pub cells: Vec<QuotientEstimate>,
    pub l1: Vec<f64>,
    pub l1_se: Vec<f64>,
    pub l2: Vec<f64>,
    pub l2_se: Vec<f64>,
    /// Slope of `log L1` against `log eps`; `None` when fewer than two errors
    /// stand above 3 SE.
    pub fitted_rate: Option<f64>,
    /// L1 errors strictly decrease along the schedule, up to 1 SE.
    pub monotone: bool,
    pub failures: Vec<String>,
}

impl RepresentationReport {
    pub fn eps(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.eps).collect()
    }

    pub fn target_mean(&self) -> f64 {
        self.cells.first().map_or(f64::NAN, |c| c.target_mean())
    }

    /// Mean of `|g(t, x, y, z)|` over outer states.
    pub fn target_abs_mean(&self) -> f64 {
        self.cells.first().map_or(f64::NAN, |c| stats::mean(&c.targets.iter().map(|v| v.abs()).collect::<Vec<_>>()))
    }
}

/// Quotients along a decreasing `eps` schedule with L1/L2 errors and a
/// log-log rate fit. A non-monotone error sequence is recorded in
/// `failures`, not raised.
pub fn convergence_study(
    g: &Generator,
    point: &ProbePoint,
    schedule: &[f64],
    config: &ExperimentConfig,
    opts: &QuotientOptions,
) -> Result<RepresentationReport> {
    if schedule.is_empty() {
        return Err(BsdeError::invalid("eps_schedule", "must not be empty"));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(BsdeError::invalid("eps_schedule", "must be strictly decreasing"));
    }
    let cells = schedule
        .iter()
        .map(|&eps| representation_quotient(g, point, eps, config, opts))
        .collect::<Result<Vec<_>>>()?;
    let (l1, l1_se): (Vec<f64>, Vec<f64>) = cells.iter().map(|c| c.lp_error(1.0)).unzip();
    let (l2, l2_se): (Vec<f64>, Vec<f64>) = cells.iter().map(|c| c.lp_error(2.0)).unzip();

    let mut failures = Vec::new();
    for j in 1..l1.len() {
        let slack = l1_se[j].max(l1_se[j - 1]);
        if l1[j] >= l1[j - 1] + slack && !(l1[j] == 0.0 && l1[j - 1] == 0.0) {
            failures.push(format!(
                "L1 error did not decrease from eps = {} ({:.4e}) to eps = {} ({:.4e})",
                schedule[j - 1],
                l1[j - 1],
                schedule[j],
                l1[j]
            ));
        }
    }
    let usable: Vec<(f64, f64)> = schedule
        .iter()
        .zip(l1.iter().zip(&l1_se))
        .filter(|(_, (e, se))| **e > 3.0 * **se && **e > 0.0)
        .map(|(eps, (e, _))| (eps.ln(), e.ln()))
        .collect();
    let fitted_rate = if usable.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
        stats::linear_fit(&x, &y).map(|(slope, _)| slope)
    } else {
        None
    };
    Ok(RepresentationReport {
        point: point.clone(),
        monotone: failures.is_empty(),
        cells,
        l1,
        l1_se,
        l2,
        l2_se,
        fitted_rate,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ordered,
    Violation,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Ordered => "ORDERED",
            Verdict::Violation => "VIOLATION",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub point_id: usize,
    pub point: ProbePoint,
    pub mean1: f64,
    pub mean2: f64,
    pub se_diff: f64,
    pub verdict: Verdict,
}

impl ProbeRow {
    pub fn difference(&self) -> f64 {
        self.mean1 - self.mean2
    }
}

/// Terminal families on which solution ordering is checked before probing.
fn hypothesis_terminals(d: usize) -> Vec<(&'static str, Terminal)> {
    vec![
        ("zero", Terminal::constant(0.0)),
        ("brownian", Terminal::brownian_affine(0.0, vec![1.0; d])),
        ("sine", Terminal::of_final_state(|x| x[0].sin())),
    ]
}

/// Paths used for the solution-ordering hypothesis check.
const HYPOTHESIS_PATHS: usize = 4096;
const HYPOTHESIS_STEPS: usize = 20;

/// Check that `Y(g1) >= Y(g2)` on a few terminal families; `Err(Hypothesis)`
/// otherwise.
pub fn verify_solution_ordering(g1: &Generator, g2: &Generator, d: usize, config: &ExperimentConfig, horizon: f64) -> Result<()> {
    let grid = TimeGrid::new(0.0, horizon, HYPOTHESIS_STEPS)?;
    let m = HYPOTHESIS_PATHS.min(config.n_paths.max(256));
    let brownian = sample_brownian(&grid, m, d, derive_seed(config.seed, usize::MAX - 1))?;
    let forward = brownian_forward(&brownian, &InitialState::Fixed(vec![0.0; d]))?;
    let cfg = ExperimentConfig { n_paths: m, n_steps: HYPOTHESIS_STEPS, ..config.clone() };
    for (name, terminal) in hypothesis_terminals(d) {
        let template = BsdeProblem::new(g2.clone(), 0.0, horizon, d, terminal)?;
        let report = comparison_check(g1, g2, &template, &forward, &brownian, &cfg)?;
        if report.fraction_ordered < 0.999 {
            return Err(BsdeError::Hypothesis(format!(
                "solutions not ordered for terminal `{name}`: {:.4}% of pairs",
                100.0 * report.fraction_ordered
            )));
        }
    }
    Ok(())
}

/// Compare the quotients of `g1` and `g2` on common paths at each point.
pub fn converse_comparison_probe(
    g1: &Generator,
    g2: &Generator,
    points: &[ProbePoint],
    eps: f64,
    config: &ExperimentConfig,
    opts: &QuotientOptions,
) -> Result<Vec<ProbeRow>> {
    let d = points.first().map_or(1, |p| p.z.len());
    verify_solution_ordering(g1, g2, d, config, opts.horizon)?;
    let mut rows = Vec::with_capacity(points.len());
    for (id, point) in points.iter().enumerate() {
        check_point(point, eps, config, opts)?;
        let states = outer_states(point, config.seed, opts);
        let config = &inner_config(point, config, opts);
        let fixed = matches!(point.state, StateSpec::Fixed(_));
        let mut q1 = Vec::new();
        let mut q2 = Vec::new();
        let mut diffs = Vec::new();
        let mut inner_se = Vec::new();
        for (k, x) in states.iter().enumerate() {
            let seed = if fixed { config.seed } else { derive_seed(config.seed, k) };
            let a = solve_cell(g1, point, x, eps, seed, config, opts)?.solution;
            let b = solve_cell(g2, point, x, eps, seed, config, opts)?.solution;
            let (m1, m2) = ((a.y0_mean() - point.y) / eps, (b.y0_mean() - point.y) / eps);
            let floor = config.picard_tol * (1.0 + a.max_abs_y().max(b.max_abs_y())) / eps;
            let se = difference_standard_error(&a, &b) / eps;
            q1.push(m1);
            q2.push(m2);
            diffs.push(m1 - m2);
            inner_se.push((se * se + floor * floor).sqrt());
        }
        let k = diffs.len() as f64;
        let inner = stats::mean(&inner_se.iter().map(|s| s * s).collect::<Vec<_>>());
        let se_diff = if fixed { inner_se[0] } else { ((stats::variance(&diffs) + inner) / k).sqrt() };
        let (mean1, mean2) = (stats::mean(&q1), stats::mean(&q2));
        let verdict = if mean1 >= mean2 - 3.0 * se_diff { Verdict::Ordered } else { Verdict::Violation };
        rows.push(ProbeRow { point_id: id, point: point.clone(), mean1, mean2, se_diff, verdict });
    }
    Ok(rows)
}

/// `count` fixed-state probe points with `t` in `[0, t_max]`, state and `z`
/// in `[-1, 1]^d`, `y` in `[-1, 1]`.
pub fn random_probe_points(seed: u64, count: usize, d: usize, t_max: f64) -> Vec<ProbePoint> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, usize::MAX));
    (0..count)
        .map(|_| {
            let t = rng.random_range(0.0..=t_max);
            let x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(-1.0..1.0);
            let z = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            ProbePoint::fixed(t, x, y, z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{entropy_stress, linear, z_abs};

    fn cfg(m: usize) -> ExperimentConfig {
        ExperimentConfig { n_paths: m, n_steps: 50, ..Default::default() }
    }

    #[test]
    fn constant_generator_quotient() {
        let g = linear(0.0, vec![0.0], 1.7);
        let p = ProbePoint::fixed(0.2, vec![0.0], 0.4, vec![0.5]);
        for eps in [0.05, 0.02] {
            let q = representation_quotient(&g, &p, eps, &cfg(20_000), &QuotientOptions::default()).unwrap();
            assert!((q.mean - 1.7).abs() <= (0.02 * 1.7f64).max(3.0 * q.se), "{} se {}", q.mean, q.se);
        }
    }

    #[test]
    fn linear_quotient_tracks_ode_oracle() {
        let g = linear(1.0, vec![0.0], 0.0);
        let p = ProbePoint::fixed(0.0, vec![0.0], 1.0, vec![0.0]);
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.05] {
            let q = representation_quotient(&g, &p, eps, &cfg(2000), &QuotientOptions::default()).unwrap();
            let oracle = (eps.exp() - 1.0) / eps;
            let scheme = ((1.0 - eps / 50.0).powi(-50) - 1.0) / eps;
            // a handful of paths cross the barrier at eps = 0.1
            assert!((q.mean - scheme).abs() < 2.0 * q.stopped_fraction + 1e-8, "{} vs {scheme}", q.mean);
            assert!((q.mean - oracle).abs() < 0.02 * eps, "{} vs {oracle}", q.mean);
            let err = (q.mean - 1.0).abs();
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn girsanov_quotient() {
        let g = linear(0.0, vec![0.5], 0.0);
        let p = ProbePoint::fixed(0.0, vec![0.0], 0.0, vec![1.0]);
        let q = representation_quotient(&g, &p, 0.05, &cfg(50_000), &QuotientOptions::default()).unwrap();
        assert!((q.mean - 0.5).abs() <= (0.01f64).max(3.0 * q.se), "{} se {}", q.mean, q.se);
    }

    #[test]
    fn linear_study_rate() {
        let g = linear(1.0, vec![0.0], 0.0);
        let p = ProbePoint::fixed(0.0, vec![0.0], 1.0, vec![0.0]);
        let r = convergence_study(&g, &p, &[0.1, 0.05, 0.025], &cfg(2000), &QuotientOptions::default()).unwrap();
        for (e, eps) in r.l1.iter().zip([0.1, 0.05, 0.025]) {
            assert!((e / (eps / 2.0) - 1.0).abs() < 0.1, "{e} at {eps}");
        }
        assert!(r.monotone);
        let rate = r.fitted_rate.unwrap();
        assert!((0.7..=1.3).contains(&rate), "{rate}");
        for (a, b) in r.l1.iter().zip(&r.l2) {
            assert!(a <= b);
        }
    }

    #[test]
    fn zero_generator_skips_rate() {
        let g = linear(0.0, vec![0.0], 0.0);
        let p = ProbePoint::fixed(0.0, vec![0.0], 0.3, vec![0.7]);
        let r = convergence_study(&g, &p, &[0.05, 0.025], &cfg(5000), &QuotientOptions::default()).unwrap();
        for (e, se) in r.l1.iter().zip(&r.l1_se) {
            assert!(*e <= 3.0 * se + 1e-9, "{e} se {se}");
        }
        assert!(r.fitted_rate.is_none());
    }

    #[test]
    fn stress_generator_nested_estimate() {
        let g = entropy_stress(0.1).unwrap();
        let p = ProbePoint::brownian(0.5, 0.2, vec![0.3]);
        let opts = QuotientOptions { outer_paths: 16, ..Default::default() };
        let r = convergence_study(&g, &p, &[0.1, 0.05, 0.025], &cfg(4000), &opts).unwrap();
        assert!(r.monotone, "{:?}", r.failures);
        assert!(r.l1[2] < 0.1 * r.target_abs_mean(), "{:?}", r.l1);
        for (a, b) in r.l1.iter().zip(&r.l2) {
            assert!(a <= b);
        }
        // outer states follow B_0.5 and are shared across eps
        assert_eq!(r.cells[0].states, r.cells[2].states);
    }

    #[test]
    fn barrier_robustness() {
        let g = z_abs(1.0, 0.0).unwrap();
        let p = ProbePoint::fixed(0.0, vec![0.0], 0.0, vec![1.0]);
        let a = representation_quotient(&g, &p, 0.05, &cfg(20_000), &QuotientOptions::default()).unwrap();
        let b = representation_quotient(&g, &p, 0.05, &cfg(20_000), &QuotientOptions { barrier: 2.0, ..Default::default() }).unwrap();
        assert!((a.mean - b.mean).abs() <= a.se.max(1e-12), "{} vs {}", a.mean, b.mean);
    }

    #[test]
    fn large_eps_stops_paths() {
        let g = linear(0.0, vec![0.0], 0.0);
        let p = ProbePoint::fixed(0.0, vec![0.0], 0.0, vec![1.0]);
        let q = representation_quotient(&g, &p, 1.0, &cfg(5000), &QuotientOptions::default()).unwrap();
        assert!(q.stopped_fraction > STOPPING_WARN_FRACTION);
    }

    #[test]
    fn invalid_cells() {
        let g = linear(0.0, vec![0.0], 0.0);
        let p = ProbePoint::fixed(0.9, vec![0.0], 0.0, vec![1.0]);
        let o = QuotientOptions::default();
        assert!(representation_quotient(&g, &p, 0.2, &cfg(100), &o).is_err());
        assert!(representation_quotient(&g, &p, 0.05, &ExperimentConfig { n_steps: 10, ..cfg(100) }, &o).is_err());
        assert!(convergence_study(&g, &p, &[0.05, 0.05], &cfg(100), &o).is_err());
        let bad = ProbePoint::fixed(0.0, vec![0.0, 0.0], 0.0, vec![1.0]);
        assert!(representation_quotient(&g, &bad, 0.05, &cfg(100), &o).is_err());
    }

    #[test]
    fn probe_identical_generators() {
        let g = z_abs(1.0, 0.2).unwrap();
        let pts = random_probe_points(3, 3, 1, 0.9);
        let rows = converse_comparison_probe(&g, &g, &pts, 0.02, &cfg(2000), &QuotientOptions::default()).unwrap();
        for r in rows {
            assert_eq!(r.verdict, Verdict::Ordered);
            assert_eq!(r.difference(), 0.0);
        }
    }

    #[test]
    fn probe_constant_gap() {
        let pts = random_probe_points(5, 3, 1, 0.9);
        let rows = converse_comparison_probe(
            &linear(0.0, vec![0.0], 1.0),
            &linear(0.0, vec![0.0], 0.0),
            &pts,
            0.02,
            &cfg(2000),
            &QuotientOptions::default(),
        )
        .unwrap();
        for r in rows {
            assert!((r.difference() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn probe_linear_shift_matches_ode_oracle() {
        let eps = 0.02;
        let pts = random_probe_points(7, 5, 1, 0.9);
        let rows = converse_comparison_probe(
            &linear(-1.0, vec![0.0], 0.5),
            &linear(-1.0, vec![0.0], 0.0),
            &pts,
            eps,
            &cfg(2000),
            &QuotientOptions::default(),
        )
        .unwrap();
        // implicit scheme for the difference: D_i = (D_{i+1} + dt/2) / (1 + dt)
        let dt = eps / 50.0;
        let mut dd = 0.0;
        for _ in 0..50 {
            dd = (dd + 0.5 * dt) / (1.0 + dt);
        }
        for r in rows {
            assert_eq!(r.verdict, Verdict::Ordered);
            assert!((r.difference() - dd / eps).abs() < 1e-8, "{}", r.difference());
            assert!((r.difference() - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn probe_rejects_unordered_pair() {
        let pts = random_probe_points(1, 1, 1, 0.5);
        let err = converse_comparison_probe(
            &linear(0.0, vec![0.0], 0.0),
            &linear(0.0, vec![0.0], 0.5),
            &pts,
            0.02,
            &cfg(500),
            &QuotientOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.tag(), "HYPOTHESIS_FAIL");
    }
}
