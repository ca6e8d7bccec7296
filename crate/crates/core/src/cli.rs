//! Experiment harness: flat `key = value` configuration, subcommand
//! dispatch and CSV output with a `#` manifest header.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand as ClapSubcommand};
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use crate::envelope::{convergence_curve, sandwich_check, EnvelopePoint};
use crate::error::{BsdeError, FailureClass, Result};
use crate::feynmankac::{
    fd_reference, mc_vs_fd, viscosity_touch_check, Boundary, FdSettings, PdeProblem, TestFunction, TouchMode,
    TouchSettings, USource,
};
use crate::generator::{builtin_generator, BsdeProblem, ExperimentConfig, Generator, GeneratorParams, Terminal};
use crate::paths::{euler_maruyama, sample_brownian, stopping_indices, InitialState, Sde, TimeGrid};
use crate::representation::{
    convergence_study, converse_comparison_probe, random_probe_points, ProbePoint, QuotientOptions, StateSpec,
    Verdict,
};
use crate::solver::solve_bsde;
use crate::stats;

pub const SCHEMA_VERSION: u32 = 1;

const ENGINE_KEYS: &[&str] = &[
    "seed",
    "threads",
    "n_paths",
    "n_steps",
    "degree",
    "picard_max",
    "picard_tol",
    "cond_max",
    "martingale_control",
    "p_norms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subcommand {
    Simulate,
    Solve,
    Envelope,
    Represent,
    Converse,
    Fk,
    Touch,
}

impl Subcommand {
    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Solve => "solve",
            Subcommand::Envelope => "envelope",
            Subcommand::Represent => "represent",
            Subcommand::Converse => "converse",
            Subcommand::Fk => "fk",
            Subcommand::Touch => "touch",
        }
    }

    /// Accepted exact keys and key prefixes beyond the engine keys.
    fn keys(self) -> (Vec<&'static str>, &'static [&'static str]) {
        const SDE: &[&str] = &["dimension", "t_start", "t_end", "x0", "sde", "sde.mu", "sde.sigma"];
        match self {
            Subcommand::Simulate => ([SDE, &["barrier", "generator.name"]].concat(), &["generator.param."]),
            Subcommand::Solve => (
                [SDE, &["generator.name", "terminal", "terminal.value", "terminal.y0", "terminal.z0"]].concat(),
                &["generator.param."],
            ),
            Subcommand::Envelope => (
                vec!["generator.name", "dimension", "alpha", "n_list", "t", "x", "u_resolution", "sandwich_samples"],
                &["generator.param."],
            ),
            Subcommand::Represent => (
                vec!["generator.name", "t", "state", "x", "y", "z", "eps_schedule", "horizon", "barrier", "outer_paths"],
                &["generator.param."],
            ),
            Subcommand::Converse => (
                vec!["generator1.name", "generator2.name", "dimension", "eps", "points", "t_max", "horizon", "barrier"],
                &["generator1.param.", "generator2.param."],
            ),
            Subcommand::Fk => (vec!["problem", "t", "x", "fd.h", "fd.k", "fd.theta", "fd.boundary"], &[]),
            Subcommand::Touch => (
                vec![
                    "problem",
                    "t",
                    "x",
                    "mode",
                    "eps",
                    "phi",
                    "bump.center",
                    "source",
                    "stencil_dx",
                    "stencil_dt",
                    "touch_tol",
                    "fd.h",
                    "fd.k",
                    "fd.theta",
                    "fd.boundary",
                ],
                &[],
            ),
        }
    }
}

/// Parsed run request.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    pub parameters: BTreeMap<String, String>,
    pub output_path: Option<PathBuf>,
    /// `--seed` override; the `seed` key or the default applies otherwise.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BsdeError::invalid(format!("line {}", lineno + 1), "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(BsdeError::invalid(format!("line {}", lineno + 1), "empty key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(BsdeError::invalid(k, "duplicate key"));
        }
    }
    Ok(out)
}

struct Params<'a> {
    map: &'a BTreeMap<String, String>,
}

impl<'a> Params<'a> {
    fn raw(&self, key: &str) -> Option<&'a str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| BsdeError::invalid(key, format!("cannot parse `{v}`"))),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(BsdeError::invalid(key, "must be finite"))
        }
    }

    fn list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => parse_list(key, v),
        }
    }

    fn string(&self, key: &str, default: &'a str) -> &'a str {
        self.raw(key).unwrap_or(default)
    }

    fn generator(&self, prefix: &str, d: usize, default: Option<&str>) -> Result<Generator> {
        let name_key = format!("{prefix}.name");
        let name = match (self.raw(&name_key), default) {
            (Some(n), _) => n,
            (None, Some(n)) => n,
            (None, None) => return Err(BsdeError::invalid(name_key, "missing")),
        };
        let param_prefix = format!("{prefix}.param.");
        let mut params = GeneratorParams::new();
        for (k, v) in self.map.range(param_prefix.clone()..) {
            let Some(short) = k.strip_prefix(&param_prefix) else { break };
            params.insert(short.to_string(), parse_list(k, v)?);
        }
        builtin_generator(name, &params, d)
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(BsdeError::invalid(key, format!("cannot parse `{v}` as a list of numbers"))),
        })
        .collect()
}

impl RunConfig {
    fn check_keys(&self) -> Result<()> {
        let (exact, prefixes) = self.subcommand.keys();
        for k in self.parameters.keys() {
            let known = ENGINE_KEYS.contains(&k.as_str())
                || exact.contains(&k.as_str())
                || prefixes.iter().any(|p| k.starts_with(p) && k.len() > p.len());
            if !known {
                return Err(BsdeError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    fn effective_seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => Params { map: &self.parameters }.parse("seed", ExperimentConfig::default().seed),
        }
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let p = Params { map: &self.parameters };
        let base = ExperimentConfig::default();
        let n_paths: i64 = p.parse("n_paths", base.n_paths as i64)?;
        let n_steps: i64 = p.parse("n_steps", base.n_steps as i64)?;
        if n_paths < 1 {
            return Err(BsdeError::invalid("n_paths", "must be positive"));
        }
        if n_steps < 1 {
            return Err(BsdeError::invalid("n_steps", "must be positive"));
        }
        let cfg = ExperimentConfig {
            seed: self.effective_seed()?,
            n_paths: n_paths as usize,
            n_steps: n_steps as usize,
            degree: p.parse("degree", base.degree)?,
            picard_max: p.parse("picard_max", base.picard_max)?,
            picard_tol: p.f64("picard_tol", base.picard_tol)?,
            p_norms: p.list("p_norms", &base.p_norms)?,
            cond_max: p.f64("cond_max", base.cond_max)?,
            martingale_control: p.parse("martingale_control", base.martingale_control)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the sorted parameters with the effective seed; `threads`
    /// is excluded because it does not affect the output.
    pub fn config_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.subcommand.as_str().as_bytes());
        h.update(b"\n");
        for (k, v) in &self.parameters {
            if k == "seed" || k == "threads" {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.update(format!("seed={}\n", self.effective_seed()?).as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    fn thread_count(&self) -> Result<Option<usize>> {
        let p = Params { map: &self.parameters };
        let t = match (self.threads, p.raw("threads")) {
            (Some(t), _) => Some(t),
            (None, Some(_)) => Some(p.parse::<usize>("threads", 0)?),
            (None, None) => None,
        };
        if t == Some(0) {
            return Err(BsdeError::invalid("threads", "must be positive"));
        }
        Ok(t)
    }
}

/// Successful run: CSV text plus an optional failed experiment assertion.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: String,
    pub assertion_failure: Option<String>,
}

fn manifest(config: &RunConfig, extra: &[(&str, String)]) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "# schema_version={SCHEMA_VERSION}").unwrap();
    writeln!(s, "# subcommand={}", config.subcommand.as_str()).unwrap();
    writeln!(s, "# seed={}", config.effective_seed()?).unwrap();
    writeln!(s, "# config_sha256={}", config.config_hash()?).unwrap();
    writeln!(s, "# version={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")).unwrap();
    for (k, v) in extra {
        writeln!(s, "# {k}={v}").unwrap();
    }
    Ok(s)
}

fn row(s: &mut String, fields: &[String]) {
    s.push_str(&fields.join(","));
    s.push('\n');
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn indexed(name: &str, d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("{name}_{k}")).collect()
}

/// Execute the subcommand and render its CSV.
pub fn execute(config: &RunConfig) -> Result<RunOutput> {
    config.check_keys()?;
    log::info!("running `{}` with seed {}", config.subcommand.as_str(), config.effective_seed()?);
    let p = Params { map: &config.parameters };
    match config.subcommand {
        Subcommand::Simulate => simulate(config, &p),
        Subcommand::Solve => solve(config, &p),
        Subcommand::Envelope => envelope(config, &p),
        Subcommand::Represent => represent(config, &p),
        Subcommand::Converse => converse(config, &p),
        Subcommand::Fk => fk(config, &p),
        Subcommand::Touch => touch(config, &p),
    }
}

fn forward_setup(p: &Params<'_>) -> Result<(Sde, TimeGrid, Vec<f64>)> {
    let d: usize = p.parse("dimension", 1)?;
    if d == 0 {
        return Err(BsdeError::invalid("dimension", "must be positive"));
    }
    let sde = match p.string("sde", "brownian") {
        "brownian" => Sde::brownian(d),
        "geometric" => {
            if d != 1 {
                return Err(BsdeError::Dimension("geometric dynamics need dimension = 1".into()));
            }
            Sde::geometric(p.f64("sde.mu", 0.0)?, p.f64("sde.sigma", 1.0)?)
        }
        "constant" => {
            let mu = p.list("sde.mu", &vec![0.0; d])?;
            let n = mu.len();
            let mut identity = vec![0.0; n * d];
            for k in 0..n.min(d) {
                identity[k * d + k] = 1.0;
            }
            Sde::constant(mu, p.list("sde.sigma", &identity)?, d)?
        }
        other => return Err(BsdeError::invalid("sde", format!("unknown dynamics `{other}`"))),
    };
    let grid = TimeGrid::new(p.f64("t_start", 0.0)?, p.f64("t_end", 1.0)?, 1)?;
    let x0 = p.list("x0", &vec![0.0; sde.n])?;
    if x0.len() != sde.n {
        return Err(BsdeError::Dimension(format!("x0 has {} entries, state dimension is {}", x0.len(), sde.n)));
    }
    Ok((sde, grid, x0))
}

fn simulate(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let (sde, span, x0) = forward_setup(p)?;
    let g = p.generator("generator", sde.d, Some("linear"))?;
    let barrier = p.f64("barrier", 1.0)?;
    let grid = TimeGrid::new(span.t_start(), span.t_end(), cfg.n_steps)?;
    let brownian = sample_brownian(&grid, cfg.n_paths, sde.d, cfg.seed)?;
    let forward = euler_maruyama(&grid, &sde, &InitialState::Fixed(x0), &brownian)?;
    let stops = stopping_indices(&brownian, &g, Some(&forward), barrier);
    let mut s = manifest(config, &[])?;
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend(indexed("mean_x", sde.n));
    header.extend(indexed("sd_x", sde.n));
    header.push("stopped_fraction".into());
    row(&mut s, &header);
    for i in 0..=grid.n_steps() {
        let mut fields = vec![i.to_string(), num(grid.time(i))];
        let cols: Vec<Vec<f64>> =
            (0..sde.n).map(|k| (0..cfg.n_paths).map(|m| forward.state(m, i)[k]).collect()).collect();
        fields.extend(cols.iter().map(|c| num(stats::mean(c))));
        fields.extend(cols.iter().map(|c| num(stats::std_dev(c))));
        let stopped = stops.iter().filter(|&&k| k <= i && k < grid.n_steps()).count();
        fields.push(num(stopped as f64 / cfg.n_paths as f64));
        row(&mut s, &fields);
    }
    Ok(RunOutput { csv: s, assertion_failure: None })
}

fn solve(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let (sde, span, x0) = forward_setup(p)?;
    let d = sde.d;
    let g = p.generator("generator", d, None)?;
    let terminal = match p.string("terminal", "constant") {
        "constant" => Terminal::constant(p.f64("terminal.value", 1.0)?),
        "brownian_affine" => {
            let z0 = p.list("terminal.z0", &vec![1.0; d])?;
            if z0.len() != d {
                return Err(BsdeError::Dimension("terminal.z0 must have `dimension` entries".into()));
            }
            Terminal::brownian_affine(p.f64("terminal.y0", 0.0)?, z0)
        }
        "cos" => Terminal::of_final_state(|x| x[0].cos()),
        "identity" => Terminal::of_final_state(|x| x[0]),
        other => return Err(BsdeError::invalid("terminal", format!("unknown terminal `{other}`"))),
    };
    let problem = BsdeProblem::new(g, span.t_start(), span.t_end(), d, terminal)?;
    let grid = TimeGrid::new(span.t_start(), span.t_end(), cfg.n_steps)?;
    let brownian = sample_brownian(&grid, cfg.n_paths, d, cfg.seed)?;
    let forward = euler_maruyama(&grid, &sde, &InitialState::Fixed(x0), &brownian)?;
    let sol = solve_bsde(&problem, &forward, &brownian, &cfg, None)?;
    let mut s = manifest(
        config,
        &[("y0_mean", num(sol.y0_mean())), ("y0_standard_error", num(sol.y0_standard_error()))],
    )?;
    let mut header = vec!["step".into(), "t".into(), "meanY".into(), "sdY".into()];
    header.extend(indexed("meanZ", d));
    header.extend(["picard_iters_max".into(), "cond_number".into()]);
    row(&mut s, &header);
    for i in 0..=grid.n_steps() {
        let mut fields = vec![i.to_string(), num(grid.time(i)), num(stats::mean(sol.y_step(i))), num(stats::std_dev(sol.y_step(i)))];
        if i < grid.n_steps() {
            let z = sol.z_step(i);
            fields.extend((0..d).map(|k| num(z.iter().skip(k).step_by(d).sum::<f64>() / cfg.n_paths as f64)));
            let diag = &sol.diagnostics[i];
            fields.extend([diag.picard_iters_max.to_string(), num(diag.cond)]);
        } else {
            fields.extend(std::iter::repeat_n(String::new(), d + 2));
        }
        row(&mut s, &fields);
    }
    Ok(RunOutput { csv: s, assertion_failure: None })
}

fn envelope(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let seed = config.effective_seed()?;
    let d: usize = p.parse("dimension", 1)?;
    let g = p.generator("generator", d, None)?;
    let alpha = p.f64("alpha", 1.0)?;
    let n_list = p.list("n_list", &[1.0, 2.0, 4.0, 8.0, 16.0])?;
    if n_list.iter().any(|n| *n < 1.0 || n.fract() != 0.0 || *n > u32::MAX as f64) {
        return Err(BsdeError::invalid("n_list", "entries must be positive integers"));
    }
    let n_list: Vec<u32> = n_list.into_iter().map(|n| n as u32).collect();
    let t = p.f64("t", 0.0)?;
    let x = p.list("x", &[0.0])?;
    let res = p.f64("u_resolution", 1e-4)?;
    let samples: usize = p.parse("sandwich_samples", 100)?;
    let at = EnvelopePoint::new(t, x, d);
    let curve = convergence_curve(&g, alpha, &at, &n_list, res)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<f64> = (0..samples).map(|_| rng.random_range(-2.0 * alpha..=2.0 * alpha)).collect();
    let mut failures = Vec::new();
    for &n in &n_list {
        let sw = sandwich_check(&g, alpha, n, &at, &ys, res)?;
        if !sw.holds() {
            failures.push(format!("sandwich fails at n = {n}: {} violations", sw.violations));
        }
    }
    if !curve.all_hold() {
        failures.push(format!(
            "curve properties: lower nondecreasing {}, upper nonincreasing {}, combined nonincreasing {}, bound violations {}",
            curve.lower_nondecreasing, curve.upper_nonincreasing, curve.combined_nonincreasing, curve.bound_violations
        ));
    }
    let mut s = manifest(config, &[])?;
    row(&mut s, &["alpha", "n", "t", "lower", "upper", "combined", "bound"].map(String::from));
    for r in &curve.rows {
        row(
            &mut s,
            &[num(alpha), r.n.to_string(), num(t), num(r.lower), num(r.upper), num(r.combined), r.bound.map(num).unwrap_or_default()],
        );
    }
    Ok(RunOutput { csv: s, assertion_failure: (!failures.is_empty()).then(|| failures.join("; ")) })
}

fn represent(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let z = p.list("z", &[0.0])?;
    let d = z.len();
    let g = p.generator("generator", d, None)?;
    let t = p.f64("t", 0.0)?;
    let y = p.f64("y", 0.0)?;
    let point = match p.string("state", "fixed") {
        "fixed" => ProbePoint::fixed(t, p.list("x", &vec![0.0; d])?, y, z.clone()),
        "brownian" => ProbePoint { state: StateSpec::Brownian { origin: p.list("x", &vec![0.0; d])?, t0: 0.0 }, ..ProbePoint::brownian(t, y, z.clone()) },
        other => return Err(BsdeError::invalid("state", format!("unknown state `{other}`"))),
    };
    let schedule = p.list("eps_schedule", &[0.1, 0.05, 0.025, 0.0125])?;
    let opts = QuotientOptions {
        horizon: p.f64("horizon", 1.0)?,
        barrier: p.f64("barrier", 1.0)?,
        outer_paths: p.parse("outer_paths", QuotientOptions::default().outer_paths)?,
        sde: None,
    };
    let report = convergence_study(&g, &point, &schedule, &cfg, &opts)?;
    let mut s = manifest(config, &[])?;
    let mut header = vec!["t".to_string(), "y".into()];
    header.extend(if d == 1 { vec!["z".to_string()] } else { indexed("z", d) });
    header.extend(["eps", "quotient_mean", "sd", "target", "l1_err", "l2_err", "rate"].map(String::from));
    row(&mut s, &header);
    for (j, cell) in report.cells.iter().enumerate() {
        let mut fields = vec![num(t), num(y)];
        fields.extend(z.iter().map(|v| num(*v)));
        fields.extend([
            num(cell.eps),
            num(cell.mean),
            num(cell.sd),
            num(cell.target_mean()),
            num(report.l1[j]),
            num(report.l2[j]),
            report.fitted_rate.map(num).unwrap_or_default(),
        ]);
        row(&mut s, &fields);
    }
    Ok(RunOutput { csv: s, assertion_failure: (!report.monotone).then(|| report.failures.join("; ")) })
}

fn converse(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let d: usize = p.parse("dimension", 1)?;
    let g1 = p.generator("generator1", d, None)?;
    let g2 = p.generator("generator2", d, None)?;
    let eps = p.f64("eps", 0.02)?;
    let count: usize = p.parse("points", 5)?;
    let opts = QuotientOptions {
        horizon: p.f64("horizon", 1.0)?,
        barrier: p.f64("barrier", 1.0)?,
        ..Default::default()
    };
    let t_max = p.f64("t_max", (opts.horizon - eps).min(0.5))?;
    let points = random_probe_points(cfg.seed, count, d, t_max);
    let rows = converse_comparison_probe(&g1, &g2, &points, eps, &cfg, &opts)?;
    let mut s = manifest(config, &[])?;
    row(&mut s, &["point_id", "mean1", "mean2", "se_diff", "verdict"].map(String::from));
    for r in &rows {
        row(&mut s, &[r.point_id.to_string(), num(r.mean1), num(r.mean2), num(r.se_diff), r.verdict.as_str().into()]);
    }
    let bad: Vec<String> = rows.iter().filter(|r| r.verdict == Verdict::Violation).map(|r| r.point_id.to_string()).collect();
    Ok(RunOutput {
        csv: s,
        assertion_failure: (!bad.is_empty()).then(|| format!("quotient ordering violated at points {}", bad.join(" "))),
    })
}

fn fd_settings(p: &Params<'_>) -> Result<FdSettings> {
    let base = FdSettings::default();
    Ok(FdSettings {
        h: p.f64("fd.h", base.h)?,
        k: p.f64("fd.k", base.k)?,
        theta: p.f64("fd.theta", base.theta)?,
        boundary: match p.string("fd.boundary", "heat_kernel") {
            "heat_kernel" => Boundary::HeatKernel,
            "linear" => Boundary::Linear,
            other => return Err(BsdeError::invalid("fd.boundary", format!("unknown boundary `{other}`"))),
        },
    })
}

fn fk(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let problem = PdeProblem::builtin(p.string("problem", "heat"))?;
    let ts = p.list("t", &[0.0])?;
    let xs = p.list("x", &[0.0])?;
    if ts.len() != xs.len() {
        return Err(BsdeError::Dimension("`t` and `x` lists must have equal length".into()));
    }
    let points: Vec<(f64, f64)> = ts.into_iter().zip(xs).collect();
    let rows = mc_vs_fd(&problem, &points, &cfg, &fd_settings(p)?)?;
    let mut s = manifest(config, &[("problem", problem.name.clone())])?;
    row(&mut s, &["t", "x", "u_mc", "sd", "u_fd", "diff", "pass"].map(String::from));
    for r in &rows {
        row(&mut s, &[num(r.t), num(r.x), num(r.u_mc), num(r.sd), num(r.u_fd), num(r.diff), r.pass.to_string()]);
    }
    let bad = rows.iter().filter(|r| !r.pass).count();
    Ok(RunOutput { csv: s, assertion_failure: (bad > 0).then(|| format!("{bad} point(s) outside the MC/FD budget")) })
}

fn touch(config: &RunConfig, p: &Params<'_>) -> Result<RunOutput> {
    let cfg = config.experiment()?;
    let problem = PdeProblem::builtin(p.string("problem", "heat"))?;
    let t = p.f64("t", 0.3)?;
    let x = p.f64("x", 0.4)?;
    let mode = match p.string("mode", "sub") {
        "sub" => TouchMode::Sub,
        "super" => TouchMode::Super,
        other => return Err(BsdeError::invalid("mode", format!("unknown mode `{other}`"))),
    };
    let classical = TestFunction::classical(&problem)?;
    let phi = match p.string("phi", "exact") {
        "exact" => classical,
        "bump" => {
            let sign = if mode == TouchMode::Sub { 1.0 } else { -1.0 };
            classical.with_bump(p.f64("bump.center", x)?, sign)
        }
        other => return Err(BsdeError::invalid("phi", format!("unknown test function `{other}`"))),
    };
    let base = TouchSettings::default();
    let settings = TouchSettings {
        eps: p.f64("eps", base.eps)?,
        stencil_dx: p.f64("stencil_dx", base.stencil_dx)?,
        stencil_dt: p.f64("stencil_dt", base.stencil_dt)?,
        touch_tol: p.f64("touch_tol", base.touch_tol)?,
        roundoff: base.roundoff,
        quotient: cfg.clone(),
    };
    let field;
    let source = match p.string("source", "fd") {
        "fd" => {
            field = fd_reference(&problem, 0.0f64.min(t), &fd_settings(p)?)?;
            USource::Fd(&field)
        }
        "mc" => USource::Mc(cfg.clone()),
        other => return Err(BsdeError::invalid("source", format!("unknown source `{other}`"))),
    };
    let r = viscosity_touch_check(&problem, &source, &phi, t, x, mode, &settings)?;
    let mut s = manifest(config, &[("problem", problem.name.clone()), ("tolerance", num(r.tolerance))])?;
    row(&mut s, &["t", "x", "mode", "residual_direct", "residual_quotient", "pass"].map(String::from));
    row(&mut s, &[num(r.t), num(r.x), mode.as_str().into(), num(r.residual_direct), num(r.residual_quotient), r.pass.to_string()]);
    Ok(RunOutput {
        csv: s,
        assertion_failure: (!r.pass).then(|| format!("touch check failed: agree {}, sign {}", r.agree, r.sign_ok)),
    })
}

fn diagnostic(tag: &str, code: i32, reason: &str) {
    let reason = reason.replace(['\n', '\r'], " ");
    eprintln!("bsdelab: status={tag} exit={code} reason={reason}");
}

/// Run, write the CSV and return the process exit code.
pub fn run(config: &RunConfig) -> i32 {
    let outcome = config.thread_count().and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| BsdeError::invalid("threads", e.to_string()))?;
        pool.install(|| execute(config))
    });
    let out = match outcome {
        Ok(out) => out,
        Err(e) => {
            let code = e.class().exit_code();
            diagnostic(e.tag(), code, &e.to_string());
            return code;
        }
    };
    let written = match &config.output_path {
        Some(path) => std::fs::write(path, &out.csv),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(out.csv.as_bytes())
        }
    };
    if let Err(e) = written {
        let e = BsdeError::from(e);
        diagnostic(e.tag(), e.class().exit_code(), &e.to_string());
        return e.class().exit_code();
    }
    match out.assertion_failure {
        Some(reason) => {
            let code = FailureClass::Experiment.exit_code();
            diagnostic("EXPERIMENT_FAIL", code, &reason);
            code
        }
        None => 0,
    }
}

const AFTER_HELP: &str = "\
Configuration: one `key = value` per line, `#` starts a comment. Unknown keys
are rejected. Engine keys (all subcommands): seed, threads, n_paths, n_steps,
degree, picard_max, picard_tol, cond_max, martingale_control, p_norms.
Generators: generator.name = linear | z_abs | paper_example |
negative_exponential, parameters as generator.param.<name> (lists are
comma-separated). `converse` uses generator1.* and generator2.*.

Output: CSV with `#` manifest lines (schema_version, subcommand, seed,
config_sha256, version) followed by a header row.

Exit codes: 0 success, 2 invalid input or failed hypothesis, 3 numerical
failure (Picard divergence, NaN, ill-conditioning), 4 experiment assertion
failure. Failures print one `bsdelab: status=<TAG> exit=<code> reason=...`
line on stderr.";

#[derive(Debug, Parser)]
#[command(name = "bsdelab", version, about = "Regression Monte Carlo BSDE laboratory", after_help = AFTER_HELP)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CSV output path (stdout when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the `threads` key.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Forward paths and stopping times.
    #[command(after_help = "\
Keys: dimension, t_start, t_end, x0, sde = brownian | geometric | constant,
sde.mu, sde.sigma, barrier, generator.* (stopping-time integrand).
Columns: step, t, mean_x_1..n (sample mean of X), sd_x_1..n (sample standard
deviation of X), stopped_fraction (paths stopped at or before the step).")]
    Simulate,
    /// Solve a BSDE by regression Monte Carlo.
    #[command(after_help = "\
Keys: dimension, t_start, t_end, x0, sde.*, generator.*, terminal = constant |
brownian_affine | cos | identity, terminal.value, terminal.y0, terminal.z0.
Columns: step, t, meanY (sample mean of Y), sdY (sample standard deviation of
Y), meanZ_1..d (sample mean of Z, empty at the last step), picard_iters_max
(largest Picard count of the step), cond_number (Gram condition number).")]
    Solve,
    /// Lower and upper envelopes of the truncated generator.
    #[command(after_help = "\
Keys: generator.*, dimension, alpha, n_list, t, x, u_resolution,
sandwich_samples.
Columns: alpha (truncation level), n (penalty), t, lower, upper (envelope
values at y = 0), combined (|lower - g0| + |upper - g0|), bound (2 psi + 4|g0|,
empty without a declared growth bound).")]
    Envelope,
    /// Representation quotient along an eps schedule.
    #[command(after_help = "\
Keys: generator.*, t, state = fixed | brownian, x, y, z, eps_schedule, horizon,
barrier, outer_paths.
Columns: t, y, z (or z_1..z_d), eps, quotient_mean ((E[Y_t] - y)/eps),
sd (spread of the quotient), target (g(t, x, y, z), averaged over states),
l1_err, l2_err (Lp distance to target), rate (log-log slope of l1_err, empty
when undetermined).")]
    Represent,
    /// Converse-comparison probe for two generators.
    #[command(after_help = "\
Keys: generator1.*, generator2.*, dimension, eps, points, t_max, horizon,
barrier.
Columns: point_id, mean1, mean2 (quotients of generator1 and generator2),
se_diff (standard error of mean1 - mean2), verdict (ORDERED | VIOLATION).")]
    Converse,
    /// Monte Carlo versus finite-difference PDE solution.
    #[command(after_help = "\
Keys: problem = heat | semilinear | quadratic | affine, t, x (equal-length
lists), fd.h, fd.k, fd.theta, fd.boundary = heat_kernel | linear.
Columns: t, x, u_mc (Monte Carlo), sd (per-path spread), u_fd (finite
difference), diff (|u_mc - u_fd|), pass (within max(2%, 3 SE + FD budget)).")]
    Fk,
    /// Test-function residual check.
    #[command(after_help = "\
Keys: problem, t, x, mode = sub | super, eps, phi = exact | bump, bump.center,
source = fd | mc, stencil_dx, stencil_dt, touch_tol, fd.*.
Columns: t, x, mode, residual_direct (from derivatives of phi),
residual_quotient (Richardson-extrapolated representation quotient),
pass (agreement and sign within tolerance).")]
    Touch,
}

/// Parse command-line arguments, run and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let subcommand = match cli.command {
        Command::Simulate => Subcommand::Simulate,
        Command::Solve => Subcommand::Solve,
        Command::Envelope => Subcommand::Envelope,
        Command::Represent => Subcommand::Represent,
        Command::Converse => Subcommand::Converse,
        Command::Fk => Subcommand::Fk,
        Command::Touch => Subcommand::Touch,
    };
    let parameters = match &cli.config {
        None => Ok(BTreeMap::new()),
        Some(path) => std::fs::read_to_string(path).map_err(BsdeError::from).and_then(|t| parse_config(&t)),
    };
    let parameters = match parameters {
        Ok(p) => p,
        Err(e) => {
            let code = e.class().exit_code();
            diagnostic(e.tag(), code, &e.to_string());
            return code;
        }
    };
    run(&RunConfig { subcommand, parameters, output_path: cli.out, seed: cli.seed, threads: cli.threads })
}
