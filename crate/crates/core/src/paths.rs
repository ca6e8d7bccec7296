//! Seeded Brownian batches, Euler-Maruyama forward simulation and discrete
//! detection of the localising stopping time.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, domain)` with
//! the path index as stream id, so path `m` is bit-identical whatever the
//! batch size or the number of worker threads.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{BsdeError, Result};
use crate::generator::{norm, Generator};

const DOMAIN_INCREMENTS: u64 = 0x4252_4f57_4e49_4e43;
const DOMAIN_POINTS: u64 = 0x504f_494e_5453_0001;

pub(crate) fn keyed_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_start < t_end) {
            return Err(BsdeError::invalid("grid", "need finite t_start < t_end"));
        }
        if n_steps == 0 {
            return Err(BsdeError::invalid("n_steps", "must be positive"));
        }
        Ok(TimeGrid { t_start, t_end, n_steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Grid point `i`, computed by multiplication; `time(n_steps) == t_end`.
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt()
        }
    }
}

/// Brownian increments laid out as `[path][step][coordinate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    pub seed: u64,
    grid: TimeGrid,
    n_paths: usize,
    d: usize,
    increments: Vec<f64>,
}

impl BrownianBatch {
    /// Build from explicit increments, e.g. deterministic test paths.
    pub fn from_increments(
        grid: TimeGrid,
        n_paths: usize,
        d: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if n_paths == 0 || d == 0 {
            return Err(BsdeError::invalid("batch", "need at least one path and one dimension"));
        }
        if increments.len() != n_paths * grid.n_steps() * d {
            return Err(BsdeError::Dimension(format!(
                "expected {} increments, got {}",
                n_paths * grid.n_steps() * d,
                increments.len()
            )));
        }
        Ok(BrownianBatch { seed: 0, grid, n_paths, d, increments })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn path(&self, m: usize) -> &[f64] {
        let w = self.grid.n_steps() * self.d;
        &self.increments[m * w..(m + 1) * w]
    }

    pub fn increment(&self, m: usize, i: usize) -> &[f64] {
        let base = (m * self.grid.n_steps() + i) * self.d;
        &self.increments[base..base + self.d]
    }

    /// `B_{t_k} - B_{t_0}` along path `m`.
    pub fn displacement(&self, m: usize, k: usize) -> Vec<f64> {
        displacement_of(self.path(m), self.d, k)
    }
}

fn displacement_of(path: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for step in path.chunks_exact(d).take(k) {
        out.iter_mut().zip(step).for_each(|(o, s)| *o += s);
    }
    out
}

/// `M` paths of `d`-dimensional Brownian increments on `grid`.
pub fn sample_brownian(grid: &TimeGrid, n_paths: usize, d: usize, seed: u64) -> Result<BrownianBatch> {
    if n_paths == 0 || d == 0 {
        return Err(BsdeError::invalid("batch", "need at least one path and one dimension"));
    }
    let w = grid.n_steps() * d;
    let sd = grid.dt().sqrt();
    let mut increments = vec![0.0; n_paths * w];
    increments
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(m, path)| {
            let mut rng = keyed_rng(seed, DOMAIN_INCREMENTS, m as u64);
            for v in path.iter_mut() {
                let u: f64 = StandardNormal.sample(&mut rng);
                *v = sd * u;
            }
        });
    Ok(BrownianBatch { seed, grid: *grid, n_paths, d, increments })
}

/// `count` points `mean + sqrt(variance) * N(0, I_n)`, keyed like path draws
/// but in a separate domain.
pub fn sample_normal_points(seed: u64, count: usize, mean: &[f64], variance: f64) -> Vec<Vec<f64>> {
    let sd = variance.max(0.0).sqrt();
    (0..count)
        .map(|k| {
            let mut rng = keyed_rng(seed, DOMAIN_POINTS, k as u64);
            mean.iter()
                .map(|m| {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    m + sd * u
                })
                .collect()
        })
        .collect()
}

pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Forward SDE `dX = b(t,X) dt + sigma(t,X) dB`; `sigma` is written row-major
/// as an `n x d` matrix.
#[derive(Clone)]
pub struct Sde {
    pub n: usize,
    pub d: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
}

impl fmt::Debug for Sde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sde").field("n", &self.n).field("d", &self.d).finish()
    }
}

impl Sde {
    pub fn new<B, S>(n: usize, d: usize, drift: B, diffusion: S) -> Self
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Sde { n, d, drift: Arc::new(drift), diffusion: Arc::new(diffusion) }
    }

    /// `X = x0 + B`.
    pub fn brownian(d: usize) -> Self {
        Sde::new(
            d,
            d,
            |_, _, b| b.fill(0.0),
            move |_, _, s| {
                s.fill(0.0);
                for k in 0..d {
                    s[k * d + k] = 1.0;
                }
            },
        )
    }

    /// Constant drift `mu` (length `n`) and diffusion `sigma` (`n x d`).
    pub fn constant(mu: Vec<f64>, sigma: Vec<f64>, d: usize) -> Result<Self> {
        let n = mu.len();
        if n == 0 || sigma.len() != n * d {
            return Err(BsdeError::Dimension("sigma must be n x d".into()));
        }
        Ok(Sde::new(
            n,
            d,
            move |_, _, b| b.copy_from_slice(&mu),
            move |_, _, s| s.copy_from_slice(&sigma),
        ))
    }

    /// Scalar geometric Brownian motion `dX = mu X dt + vol X dB`.
    pub fn geometric(mu: f64, vol: f64) -> Self {
        Sde::new(1, 1, move |_, x, b| b[0] = mu * x[0], move |_, x, s| s[0] = vol * x[0])
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// One starting point per path, `[path][coordinate]`.
    PerPath(Vec<f64>),
}

/// Forward states laid out as `[path][step][coordinate]` with `n_steps + 1`
/// time points.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    grid: TimeGrid,
    n: usize,
    n_paths: usize,
    states: Vec<f64>,
}

impl ForwardBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn path(&self, m: usize) -> &[f64] {
        let w = (self.grid.n_steps() + 1) * self.n;
        &self.states[m * w..(m + 1) * w]
    }

    pub fn state(&self, m: usize, i: usize) -> &[f64] {
        let base = (m * (self.grid.n_steps() + 1) + i) * self.n;
        &self.states[base..base + self.n]
    }
}

/// Euler-Maruyama: `X_{i+1} = X_i + b(t_i, X_i) dt + sigma(t_i, X_i) dB_i`.
pub fn euler_maruyama(
    grid: &TimeGrid,
    sde: &Sde,
    x0: &InitialState,
    batch: &BrownianBatch,
) -> Result<ForwardBatch> {
    if batch.grid() != grid {
        return Err(BsdeError::Dimension("Brownian batch lives on a different grid".into()));
    }
    if sde.d != batch.dim() {
        return Err(BsdeError::Dimension(format!(
            "SDE noise dimension {} but batch dimension {}",
            sde.d,
            batch.dim()
        )));
    }
    let n = sde.n;
    let m_paths = batch.n_paths();
    match x0 {
        InitialState::Fixed(v) if v.len() != n => {
            return Err(BsdeError::Dimension(format!("x0 has {} entries, expected {n}", v.len())))
        }
        InitialState::PerPath(v) if v.len() != n * m_paths => {
            return Err(BsdeError::Dimension(format!(
                "per-path x0 has {} entries, expected {}",
                v.len(),
                n * m_paths
            )))
        }
        _ => {}
    }
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let d = sde.d;
    let w = (n_steps + 1) * n;
    let mut states = vec![0.0; m_paths * w];
    let bad: Option<(usize, usize)> = states
        .par_chunks_mut(w)
        .enumerate()
        .map(|(m, path)| {
            let start = match x0 {
                InitialState::Fixed(v) => &v[..],
                InitialState::PerPath(v) => &v[m * n..(m + 1) * n],
            };
            path[..n].copy_from_slice(start);
            let mut b = vec![0.0; n];
            let mut s = vec![0.0; n * d];
            for i in 0..n_steps {
                let t = grid.time(i);
                let (head, tail) = path.split_at_mut((i + 1) * n);
                let x = &head[i * n..];
                sde.drift(t, x, &mut b);
                sde.diffusion(t, x, &mut s);
                let db = batch.increment(m, i);
                let next = &mut tail[..n];
                for r in 0..n {
                    let noise: f64 = (0..d).map(|c| s[r * d + c] * db[c]).sum();
                    next[r] = x[r] + b[r] * dt + noise;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Some((m, i + 1));
                }
            }
            None
        })
        .find_first(|r| r.is_some())
        .flatten();
    if let Some((path, step)) = bad {
        return Err(BsdeError::NonFinite { context: "forward SDE", path, step });
    }
    Ok(ForwardBatch { grid: *grid, n, n_paths: m_paths, states })
}

/// Forward batch `X = x0 + B` without going through the SDE machinery.
pub fn brownian_forward(batch: &BrownianBatch, x0: &InitialState) -> Result<ForwardBatch> {
    euler_maruyama(batch.grid(), &Sde::brownian(batch.dim()), x0, batch)
}

/// Borrowed view of one path, handed to terminal functionals.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub index: usize,
    pub grid: &'a TimeGrid,
    pub d: usize,
    pub n: usize,
    pub increments: &'a [f64],
    pub states: &'a [f64],
    /// Stopping index of this path; `n_steps` when not stopped.
    pub stop: usize,
}

impl<'a> PathView<'a> {
    pub fn new(brownian: &'a BrownianBatch, forward: &'a ForwardBatch, m: usize, stop: usize) -> Self {
        PathView {
            index: m,
            grid: brownian.grid(),
            d: brownian.dim(),
            n: forward.dim(),
            increments: brownian.path(m),
            states: forward.path(m),
            stop,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn brownian_displacement(&self, k: usize) -> Vec<f64> {
        displacement_of(self.increments, self.d, k)
    }

    pub fn state(&self, k: usize) -> &'a [f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }
}

/// Smallest grid index `k` with
/// `|B_{t_k} - B_{t_0}| + sum_{i<k} |g(t_i, x_i, 0, 0)|^2 dt > barrier`,
/// or `n_steps` when the barrier is never crossed.
///
/// Without `x_path` the state fed to `g` is the Brownian displacement.
pub fn stopping_index(
    batch: &BrownianBatch,
    m: usize,
    g: &Generator,
    x_path: Option<&ForwardBatch>,
    barrier: f64,
) -> usize {
    let grid = batch.grid();
    let d = batch.dim();
    let dt = grid.dt();
    let zero = vec![0.0; d];
    let mut disp = vec![0.0; d];
    let mut integral = 0.0;
    for k in 1..=grid.n_steps() {
        let i = k - 1;
        let t = grid.time(i);
        let g0 = match x_path {
            Some(f) => g.eval(t, f.state(m, i), 0.0, &zero),
            None => g.eval(t, &disp, 0.0, &zero),
        };
        integral += g0 * g0 * dt;
        disp.iter_mut().zip(batch.increment(m, i)).for_each(|(a, b)| *a += b);
        if norm(&disp) + integral > barrier {
            return k;
        }
    }
    grid.n_steps()
}

pub fn stopping_indices(
    batch: &BrownianBatch,
    g: &Generator,
    x_path: Option<&ForwardBatch>,
    barrier: f64,
) -> Vec<usize> {
    (0..batch.n_paths())
        .into_par_iter()
        .map(|m| stopping_index(batch, m, g, x_path, barrier))
        .collect()
}
