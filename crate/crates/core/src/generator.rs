//! Generators (drivers) of one-dimensional BSDEs, BSDE problems and the
//! built-in generator library.
//!
//! A generator is evaluated as `g(t, x, y, z)` where `x` is the current value
//! of the driving state (Brownian motion or forward SDE). Path dependence of
//! the driver, such as `|B_t|` in the entropy stress generator, is expressed
//! through `x`.
//!
//! Each generator carries the regularity metadata that the experiments rely
//! on: the Lipschitz constant in `z`, an optional monotonicity modulus `rho`
//! with `(y1 - y2)(g(y1) - g(y2)) <= rho(|y1 - y2|^2)`, and an optional growth
//! bound `psi(alpha, t, x) >= sup_{|y| <= alpha} |g(t,x,y,0) - g(t,x,0,0)|`.
//! None of this is proven by the code; [`Generator::validate_metadata`]
//! samples it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Once};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BsdeError, Result};
use crate::paths::PathView;

pub type DriverFn = dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync;
pub type ModulusFn = dyn Fn(f64) -> f64 + Send + Sync;
pub type GrowthFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;
pub type TerminalFn = dyn Fn(&PathView<'_>) -> f64 + Send + Sync;

/// Exponent cap for the stress generator's `exp(y |x|)`.
pub const STRESS_EXPONENT_CAP: f64 = 50.0;

/// Generator parameters: every value is a vector, scalars have length one.
pub type GeneratorParams = BTreeMap<String, Vec<f64>>;

#[derive(Clone)]
pub struct Generator {
    pub name: String,
    eval: Arc<DriverFn>,
    pub lipschitz_z: f64,
    monotonicity: Option<Arc<ModulusFn>>,
    growth: Option<Arc<GrowthFn>>,
    pub deterministic_in_t: bool,
    pub state_dependent: bool,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("name", &self.name)
            .field("lipschitz_z", &self.lipschitz_z)
            .field("has_modulus", &self.monotonicity.is_some())
            .field("has_growth_bound", &self.growth.is_some())
            .field("deterministic_in_t", &self.deterministic_in_t)
            .field("state_dependent", &self.state_dependent)
            .finish()
    }
}

impl Generator {
    /// Host-code generator. Metadata defaults to "nothing declared" except
    /// for `lipschitz_z`, which is mandatory.
    pub fn custom<F>(name: impl Into<String>, lipschitz_z: f64, eval: F) -> Result<Self>
    where
        F: Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(lipschitz_z >= 0.0 && lipschitz_z.is_finite()) {
            return Err(BsdeError::invalid("lipschitz_z", "must be finite and >= 0"));
        }
        Ok(Generator {
            name: name.into(),
            eval: Arc::new(eval),
            lipschitz_z,
            monotonicity: None,
            growth: None,
            deterministic_in_t: false,
            state_dependent: true,
        })
    }

    pub fn with_modulus<F>(mut self, rho: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.monotonicity = Some(Arc::new(rho));
        self
    }

    pub fn with_growth_bound<F>(mut self, psi: F) -> Self
    where
        F: Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.growth = Some(Arc::new(psi));
        self
    }

    pub fn with_flags(mut self, deterministic_in_t: bool, state_dependent: bool) -> Self {
        self.deterministic_in_t = deterministic_in_t;
        self.state_dependent = state_dependent;
        self
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.eval)(t, x, y, z)
    }

    pub fn modulus(&self, s: f64) -> Option<f64> {
        self.monotonicity.as_ref().map(|rho| rho(s))
    }

    pub fn has_modulus(&self) -> bool {
        self.monotonicity.is_some()
    }

    pub fn growth_bound(&self, alpha: f64, t: f64, x: &[f64]) -> Option<f64> {
        self.growth.as_ref().map(|psi| psi(alpha, t, x))
    }

    /// `c * g`, keeping metadata consistent for `c >= 0`.
    pub fn scaled(&self, c: f64) -> Result<Generator> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(BsdeError::invalid("scale", "must be finite and >= 0"));
        }
        let inner = self.eval.clone();
        let mut out = self.clone();
        out.name = format!("{c}*{}", self.name);
        out.eval = Arc::new(move |t, x, y, z| c * inner(t, x, y, z));
        out.lipschitz_z = c * self.lipschitz_z;
        out.monotonicity = self
            .monotonicity
            .clone()
            .map(|rho| Arc::new(move |s: f64| c * rho(s)) as Arc<ModulusFn>);
        out.growth = self
            .growth
            .clone()
            .map(|psi| Arc::new(move |a: f64, t: f64, x: &[f64]| c * psi(a, t, x)) as Arc<GrowthFn>);
        Ok(out)
    }

    /// `g + c` for a constant shift.
    pub fn shifted(&self, c: f64) -> Generator {
        let inner = self.eval.clone();
        let mut out = self.clone();
        out.name = format!("{}+{c}", self.name);
        out.eval = Arc::new(move |t, x, y, z| inner(t, x, y, z) + c);
        out
    }

    /// Sample the declared metadata on `samples` random tuples.
    ///
    /// Tuples are drawn with `t in [0,1]`, `x in [-3,3]^n`, `y in [-3,3]`,
    /// `z in [-3,3]^d`. The slack is relative: `slack * (1 + |lhs| + |rhs|)`.
    pub fn validate_metadata(
        &self,
        n: usize,
        d: usize,
        samples: usize,
        seed: u64,
        slack: f64,
    ) -> MetadataReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = MetadataReport::default();
        let mut x = vec![0.0; n];
        let mut z1 = vec![0.0; d];
        let mut z2 = vec![0.0; d];
        for _ in 0..samples {
            let t: f64 = rng.random_range(0.0..1.0);
            x.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            let y1: f64 = rng.random_range(-3.0..3.0);
            let y2: f64 = rng.random_range(-3.0..3.0);
            z1.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            z2.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));

            let dz = norm(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let lhs = (self.eval(t, &x, y1, &z1) - self.eval(t, &x, y1, &z2)).abs();
            let rhs = self.lipschitz_z * dz;
            let excess = lhs - rhs - slack * (1.0 + lhs + rhs);
            report.lipschitz_worst = report.lipschitz_worst.max(lhs - rhs);
            if excess > 0.0 {
                report.lipschitz_violations += 1;
            }

            if let Some(rho) = &self.monotonicity {
                let dy = y1 - y2;
                let lhs = dy * (self.eval(t, &x, y1, &z1) - self.eval(t, &x, y2, &z1));
                let rhs = rho(dy * dy);
                report.modulus_worst = report.modulus_worst.max(lhs - rhs);
                if lhs - rhs > slack * (1.0 + lhs.abs() + rhs.abs()) {
                    report.modulus_violations += 1;
                }
            }

            if let Some(psi) = &self.growth {
                let alpha = y1.abs().max(y2.abs());
                let zero = vec![0.0; d];
                let g0 = self.eval(t, &x, 0.0, &zero);
                let lhs = (self.eval(t, &x, y1, &zero) - g0).abs();
                let rhs = psi(alpha, t, &x);
                report.growth_worst = report.growth_worst.max(lhs - rhs);
                if lhs - rhs > slack * (1.0 + lhs + rhs.abs()) {
                    report.growth_violations += 1;
                }
            }
            report.samples += 1;
        }
        report
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetadataReport {
    pub samples: usize,
    pub lipschitz_violations: usize,
    pub lipschitz_worst: f64,
    pub modulus_violations: usize,
    pub modulus_worst: f64,
    pub growth_violations: usize,
    pub growth_worst: f64,
}

impl MetadataReport {
    pub fn is_consistent(&self) -> bool {
        self.lipschitz_violations == 0 && self.modulus_violations == 0 && self.growth_violations == 0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Radial clamp `alpha * y / max(|y|, alpha)`; identically 0 when `alpha == 0`.
pub fn q_trunc(y: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(BsdeError::invalid("alpha", "must be >= 0"));
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    Ok(alpha * y / y.abs().max(alpha))
}

#[inline]
pub fn clamp_radial(y: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        0.0
    } else {
        alpha * y / y.abs().max(alpha)
    }
}

/// Entropy modulus: `-u ln u` on `[0, delta]`, continued by its tangent at
/// `delta` for `u > delta`.
pub fn h_entropy(u: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(u >= 0.0) {
        return Err(BsdeError::invalid("u", "must be >= 0"));
    }
    Ok(entropy_unchecked(u, delta))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < (-1.0f64).exp()) {
        return Err(BsdeError::invalid("delta", "must lie in (0, 1/e)"));
    }
    Ok(())
}

#[inline]
fn entropy_unchecked(u: f64, delta: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else if u <= delta {
        -u * u.ln()
    } else {
        let slope = -delta.ln() - 1.0;
        slope * (u - delta) - delta * delta.ln()
    }
}

static CLAMP_WARNING: Once = Once::new();

fn stress_exponent(y: f64, x: &[f64]) -> f64 {
    let e = y * norm(x);
    if e.abs() > STRESS_EXPONENT_CAP {
        CLAMP_WARNING.call_once(|| {
            log::warn!(
                "stress generator exponent |y|x|| exceeded {STRESS_EXPONENT_CAP}; clamping"
            )
        });
        e.clamp(-STRESS_EXPONENT_CAP, STRESS_EXPONENT_CAP)
    } else {
        e
    }
}

fn scalar(params: &GeneratorParams, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) if v.len() == 1 && v[0].is_finite() => Ok(v[0]),
        Some(_) => Err(BsdeError::invalid(key, "expected one finite number")),
        None => default.ok_or_else(|| BsdeError::invalid(key, "missing")),
    }
}

fn check_keys(name: &str, params: &GeneratorParams, allowed: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(BsdeError::invalid(
                format!("generator.param.{k}"),
                format!("not a parameter of `{name}`"),
            ));
        }
    }
    Ok(())
}

/// Look up a built-in generator.
///
/// * `linear`: `a*y + <b,z> + c` (`b` may be a vector, defaults to zero)
/// * `z_abs`: `k*|z| + c`
/// * `paper_example`: `-exp(y|x|) + h(|y|) + |z|` with entropy parameter `delta`
/// * `negative_exponential`: `-y`
///
/// `d` is the Brownian dimension, used to validate and pad `b`.
pub fn builtin_generator(name: &str, params: &GeneratorParams, d: usize) -> Result<Generator> {
    match name {
        "linear" => {
            check_keys(name, params, &["a", "b", "c"])?;
            let a = scalar(params, "a", Some(0.0))?;
            let c = scalar(params, "c", Some(0.0))?;
            let b = match params.get("b") {
                None => vec![0.0; d],
                Some(v) if v.len() == 1 && d > 1 => vec![v[0]; d],
                Some(v) if v.len() == d && v.iter().all(|x| x.is_finite()) => v.clone(),
                Some(_) => return Err(BsdeError::invalid("b", format!("expected {d} finite values"))),
            };
            Ok(linear(a, b, c))
        }
        "z_abs" => {
            check_keys(name, params, &["k", "c"])?;
            let k = scalar(params, "k", Some(1.0))?;
            let c = scalar(params, "c", Some(0.0))?;
            z_abs(k, c)
        }
        "paper_example" => {
            check_keys(name, params, &["delta"])?;
            let delta = scalar(params, "delta", None)?;
            entropy_stress(delta)
        }
        "negative_exponential" => {
            check_keys(name, params, &[])?;
            Ok(linear(-1.0, vec![0.0; d], 0.0).renamed("negative_exponential"))
        }
        other => Err(BsdeError::UnknownGenerator(other.to_string())),
    }
}

impl Generator {
    fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

/// `a*y + <b,z> + c`.
pub fn linear(a: f64, b: Vec<f64>, c: f64) -> Generator {
    let lambda = norm(&b);
    let b_eval = b.clone();
    Generator {
        name: "linear".into(),
        eval: Arc::new(move |_t, _x, y, z| a * y + dot(&b_eval, z) + c),
        lipschitz_z: lambda,
        monotonicity: Some(Arc::new(move |s| a.max(0.0) * s)),
        growth: Some(Arc::new(move |alpha, _t, _x| a.abs() * alpha)),
        deterministic_in_t: true,
        state_dependent: false,
    }
}

/// `k*|z| + c`.
pub fn z_abs(k: f64, c: f64) -> Result<Generator> {
    Ok(Generator {
        name: "z_abs".into(),
        eval: Arc::new(move |_t, _x, _y, z| k * norm(z) + c),
        lipschitz_z: k.abs(),
        monotonicity: Some(Arc::new(|_| 0.0)),
        growth: Some(Arc::new(|_, _, _| 0.0)),
        deterministic_in_t: true,
        state_dependent: false,
    })
}

/// `-exp(y |x|) + h(|y|) + |z|`, the general-growth stress generator.
///
/// The declared modulus is `h(s) + delta*s`. `h` alone is violated once
/// `|y1 - y2| > 1` because the tangent continuation gives
/// `u h(u) - h(u^2) = delta (u - 1)`.
pub fn entropy_stress(delta: f64) -> Result<Generator> {
    check_delta(delta)?;
    Ok(Generator {
        name: "paper_example".into(),
        eval: Arc::new(move |_t, x, y, z| {
            -stress_exponent(y, x).exp() + entropy_unchecked(y.abs(), delta) + norm(z)
        }),
        lipschitz_z: 1.0,
        monotonicity: Some(Arc::new(move |s| entropy_unchecked(s, delta) + delta * s)),
        growth: Some(Arc::new(move |alpha, _t, x| {
            (stress_exponent(alpha, x).exp() - 1.0) + entropy_unchecked(alpha, delta)
        })),
        deterministic_in_t: false,
        state_dependent: true,
    })
}

/// Terminal condition as a functional of one discrete path.
#[derive(Clone)]
pub struct Terminal {
    f: Arc<TerminalFn>,
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Terminal(..)")
    }
}

impl Terminal {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&PathView<'_>) -> f64 + Send + Sync + 'static,
    {
        Terminal { f: Arc::new(f) }
    }

    pub fn constant(c: f64) -> Self {
        Terminal::new(move |_| c)
    }

    /// `y0 + <z0, B_stop - B_start>` where `stop` is the path's stopping index
    /// (the grid end when the path is not stopped).
    pub fn brownian_affine(y0: f64, z0: Vec<f64>) -> Self {
        Terminal::new(move |p| y0 + dot(&z0, &p.brownian_displacement(p.stop)))
    }

    /// `phi(X_T)` of the forward state at the grid end.
    pub fn of_final_state<F>(phi: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Terminal::new(move |p| phi(p.state(p.n_steps())))
    }

    pub fn eval(&self, path: &PathView<'_>) -> f64 {
        (self.f)(path)
    }
}

#[derive(Debug, Clone)]
pub struct BsdeProblem {
    pub generator: Generator,
    pub t_start: f64,
    pub t_end: f64,
    pub dimension: usize,
    pub terminal: Terminal,
}

impl BsdeProblem {
    pub fn new(
        generator: Generator,
        t_start: f64,
        t_end: f64,
        dimension: usize,
        terminal: Terminal,
    ) -> Result<Self> {
        if !(0.0 <= t_start && t_start < t_end && t_end.is_finite()) {
            return Err(BsdeError::invalid("t_start/t_end", "need 0 <= t_start < t_end"));
        }
        if dimension == 0 {
            return Err(BsdeError::invalid("dimension", "must be positive"));
        }
        Ok(BsdeProblem {
            generator,
            t_start,
            t_end,
            dimension,
            terminal,
        })
    }
}

/// Monte Carlo and solver settings shared by every experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub degree: usize,
    pub picard_max: usize,
    pub picard_tol: f64,
    pub p_norms: Vec<f64>,
    /// Largest Gram-matrix condition number accepted before lowering the degree.
    pub cond_max: f64,
    /// Regress `Y_{i+1} - Z_i dB_i` instead of `Y_{i+1}` for the conditional mean.
    pub martingale_control: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 20170501,
            n_paths: 100_000,
            n_steps: 50,
            degree: 3,
            picard_max: 100,
            picard_tol: 1e-12,
            p_norms: vec![1.0, 2.0],
            cond_max: 1e10,
            martingale_control: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(BsdeError::invalid("n_paths", "must be positive"));
        }
        if self.n_steps == 0 {
            return Err(BsdeError::invalid("n_steps", "must be positive"));
        }
        if self.picard_max == 0 {
            return Err(BsdeError::invalid("picard_max", "must be positive"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(BsdeError::invalid("picard_tol", "must be > 0"));
        }
        if self.p_norms.iter().any(|p| !(1.0..=2.0).contains(p)) {
            return Err(BsdeError::invalid("p_norms", "each p must lie in [1, 2]"));
        }
        if !(self.cond_max > 1.0) {
            return Err(BsdeError::invalid("cond_max", "must be > 1"));
        }
        Ok(())
    }
}
