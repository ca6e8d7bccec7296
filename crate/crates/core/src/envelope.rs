//! Inf-convolution envelopes of the truncated generator `y -> g(t, x, q_alpha(y), 0)`:
//!
//! ```text
//! lower_n = inf_u { g(q_alpha(u)) + n|u| },   upper_n = sup_u { g(q_alpha(u)) - n|u| }
//! ```
//!
//! The search runs over the lattice `u = k * u_resolution` restricted to
//! `|u| <= U = (2 psi + 2|g0| + 1) / n`. Beyond `U` the penalty alone exceeds
//! the `u = 0` candidate. Because the lattice is anchored at zero, the grid
//! for a larger `n` is a subset of the grid for a smaller one, which makes
//! the computed sequences exactly monotone in `n`.

use rayon::prelude::*;

use crate::error::{BsdeError, Result};
use crate::generator::{clamp_radial, Generator};

/// Number of points of the empirical growth grid on `[-alpha, alpha]`.
pub const EMPIRICAL_GRID: usize = 2048;

/// Evaluation point of the envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePoint {
    pub t: f64,
    pub x: Vec<f64>,
    /// Length of the zero `z` argument.
    pub d: usize,
}

impl EnvelopePoint {
    pub fn new(t: f64, x: Vec<f64>, d: usize) -> Self {
        EnvelopePoint { t, x, d }
    }

    fn g(&self, g: &Generator, y: f64) -> f64 {
        g.eval(self.t, &self.x, y, &vec![0.0; self.d])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeResult {
    pub n: u32,
    pub alpha: f64,
    pub value: f64,
    /// Optimizer of the objective on the lattice.
    pub argmin_u: f64,
    pub search_bound: f64,
    pub g0: f64,
    pub psi_hat: f64,
    pub psi_declared: bool,
}

/// Declared growth bound at `alpha`, else the empirical sup of
/// `|g(y) - g(0)|` over the growth grid.
pub fn psi_hat(g: &Generator, alpha: f64, at: &EnvelopePoint) -> Result<(f64, bool)> {
    if let Some(psi) = g.growth_bound(alpha, at.t, &at.x) {
        if !psi.is_finite() || psi < 0.0 {
            return Err(BsdeError::NonFinite { context: "growth bound", path: 0, step: 0 });
        }
        return Ok((psi, true));
    }
    let g0 = at.g(g, 0.0);
    let mut sup = 0.0f64;
    for k in 0..EMPIRICAL_GRID {
        let y = -alpha + 2.0 * alpha * k as f64 / (EMPIRICAL_GRID - 1) as f64;
        let v = (at.g(g, y) - g0).abs();
        if !v.is_finite() {
            return Err(BsdeError::NonFinite { context: "growth grid", path: 0, step: k });
        }
        sup = sup.max(v);
    }
    Ok((sup, false))
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Lower,
    Upper,
}

fn check_args(alpha: f64, n: u32, u_resolution: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(BsdeError::invalid("alpha", "must be finite and >= 0"));
    }
    if n == 0 {
        return Err(BsdeError::invalid("n", "must be a positive integer"));
    }
    if !(u_resolution > 0.0 && u_resolution.is_finite()) {
        return Err(BsdeError::invalid("u_resolution", "must be > 0"));
    }
    Ok(())
}

fn envelope(g: &Generator, alpha: f64, n: u32, at: &EnvelopePoint, u_resolution: f64, side: Side) -> Result<EnvelopeResult> {
    check_args(alpha, n, u_resolution)?;
    let (psi, declared) = psi_hat(g, alpha, at)?;
    let g0 = at.g(g, 0.0);
    if !g0.is_finite() {
        return Err(BsdeError::NonFinite { context: "g(t, x, 0, 0)", path: 0, step: 0 });
    }
    let nf = n as f64;
    let bound = (2.0 * psi + 2.0 * g0.abs() + 1.0) / nf;
    let k_max = (bound / u_resolution).ceil() as i64;
    let objective = |k: i64| -> f64 {
        let u = k as f64 * u_resolution;
        let v = at.g(g, clamp_radial(u, alpha));
        match side {
            Side::Lower => v + nf * u.abs(),
            Side::Upper => v - nf * u.abs(),
        }
    };
    // ties break on |u|, so the result does not depend on the reduction order
    let best = (-k_max..=k_max)
        .into_par_iter()
        .map(|k| (objective(k), k))
        .try_fold(
            || None::<(f64, i64)>,
            |acc, (v, k)| {
                if !v.is_finite() {
                    return Err(k);
                }
                Ok(Some(pick(acc, (v, k), side)))
            },
        )
        .try_reduce(
            || None,
            |a, b| {
                Ok(match (a, b) {
                    (Some(a), Some(b)) => Some(pick(Some(a), b, side)),
                    (a, None) => a,
                    (None, b) => b,
                })
            },
        );
    let (value, k) = match best {
        Ok(Some(b)) => b,
        Ok(None) => unreachable!("lattice always contains u = 0"),
        Err(k) => {
            return Err(BsdeError::NonFinite { context: "envelope objective", path: 0, step: k.unsigned_abs() as usize })
        }
    };
    Ok(EnvelopeResult {
        n,
        alpha,
        value,
        argmin_u: k as f64 * u_resolution,
        search_bound: bound,
        g0,
        psi_hat: psi,
        psi_declared: declared,
    })
}

/// Better of two candidates; ties go to the smaller `|u|`, then to negative `u`.
fn pick(acc: Option<(f64, i64)>, cand: (f64, i64), side: Side) -> (f64, i64) {
    let Some(cur) = acc else { return cand };
    let better = match side {
        Side::Lower => cand.0 < cur.0,
        Side::Upper => cand.0 > cur.0,
    };
    let tie = cand.0 == cur.0 && (cand.1.abs(), cand.1) < (cur.1.abs(), cur.1);
    if better || tie {
        cand
    } else {
        cur
    }
}

pub fn lower_envelope(g: &Generator, alpha: f64, n: u32, at: &EnvelopePoint, u_resolution: f64) -> Result<EnvelopeResult> {
    envelope(g, alpha, n, at, u_resolution, Side::Lower)
}

pub fn upper_envelope(g: &Generator, alpha: f64, n: u32, at: &EnvelopePoint, u_resolution: f64) -> Result<EnvelopeResult> {
    envelope(g, alpha, n, at, u_resolution, Side::Upper)
}

/// Largest finite-difference slope of `y -> g(y)` on the growth grid.
fn local_lipschitz(g: &Generator, alpha: f64, at: &EnvelopePoint) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let h = 2.0 * alpha / (EMPIRICAL_GRID - 1) as f64;
    let mut prev = at.g(g, -alpha);
    let mut worst = 0.0f64;
    for k in 1..EMPIRICAL_GRID {
        let v = at.g(g, -alpha + k as f64 * h);
        worst = worst.max(((v - prev) / h).abs());
        prev = v;
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest amount by which an inequality failed (negative when all hold).
    pub worst_violation: f64,
    pub tolerance: f64,
}

impl SandwichReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Check `lower - n|y| <= g(q_alpha(y)) <= upper + n|y|` for each sample.
/// Tolerance is `10 * u_resolution * (n + local Lipschitz constant)`.
pub fn sandwich_check(
    g: &Generator,
    alpha: f64,
    n: u32,
    at: &EnvelopePoint,
    y_samples: &[f64],
    u_resolution: f64,
) -> Result<SandwichReport> {
    let lower = lower_envelope(g, alpha, n, at, u_resolution)?;
    let upper = upper_envelope(g, alpha, n, at, u_resolution)?;
    let tolerance = 10.0 * u_resolution * (n as f64 + local_lipschitz(g, alpha, at));
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for &y in y_samples {
        let v = at.g(g, clamp_radial(y, alpha));
        let pen = n as f64 * y.abs();
        for gap in [lower.value - pen - v, v - upper.value - pen] {
            worst = worst.max(gap);
            if gap > tolerance {
                violations += 1;
            }
        }
    }
    Ok(SandwichReport { checked: y_samples.len(), violations, worst_violation: worst, tolerance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub n: u32,
    pub lower: f64,
    pub upper: f64,
    /// `|lower - g0| + |upper - g0|`
    pub combined: f64,
    /// `2 psi + 4|g0|`, when the growth bound is declared.
    pub bound: Option<f64>,
    pub argmin_lower: f64,
    pub argmax_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveReport {
    pub alpha: f64,
    pub t: f64,
    pub g0: f64,
    pub rows: Vec<CurveRow>,
    pub lower_nondecreasing: bool,
    pub upper_nonincreasing: bool,
    pub combined_nonincreasing: bool,
    pub bound_violations: usize,
    pub tolerance: f64,
}

impl CurveReport {
    pub fn all_hold(&self) -> bool {
        self.lower_nondecreasing && self.upper_nonincreasing && self.combined_nonincreasing && self.bound_violations == 0
    }
}

/// Envelopes along an increasing list of penalties. Monotonicity is judged
/// with a tolerance of two grid cells of objective variation.
pub fn convergence_curve(
    g: &Generator,
    alpha: f64,
    at: &EnvelopePoint,
    n_list: &[u32],
    u_resolution: f64,
) -> Result<CurveReport> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BsdeError::invalid("n_list", "must be strictly increasing"));
    }
    let lip = local_lipschitz(g, alpha, at);
    let mut rows = Vec::with_capacity(n_list.len());
    let mut g0 = at.g(g, 0.0);
    for &n in n_list {
        let lo = lower_envelope(g, alpha, n, at, u_resolution)?;
        let up = upper_envelope(g, alpha, n, at, u_resolution)?;
        g0 = lo.g0;
        rows.push(CurveRow {
            n,
            lower: lo.value,
            upper: up.value,
            combined: (lo.value - g0).abs() + (up.value - g0).abs(),
            bound: lo.psi_declared.then(|| 2.0 * lo.psi_hat + 4.0 * g0.abs()),
            argmin_lower: lo.argmin_u,
            argmax_upper: up.argmin_u,
        });
    }
    let n_max = n_list.last().copied().unwrap_or(0) as f64;
    let tolerance = 2.0 * u_resolution * (lip + n_max);
    let pairs = || rows.windows(2);
    let bound_violations = rows
        .iter()
        .filter(|r| r.bound.is_some_and(|b| r.combined > b + tolerance))
        .count();
    Ok(CurveReport {
        alpha,
        t: at.t,
        g0,
        lower_nondecreasing: pairs().all(|w| w[1].lower >= w[0].lower - tolerance),
        upper_nonincreasing: pairs().all(|w| w[1].upper <= w[0].upper + tolerance),
        combined_nonincreasing: pairs().all(|w| w[1].combined <= w[0].combined + 2.0 * tolerance),
        bound_violations,
        rows,
        tolerance,
    })
}

/// Monte Carlo estimate of `E[|g^n_alpha(t)|^2]` over sampled states.
pub fn mean_square_combined(
    g: &Generator,
    alpha: f64,
    n: u32,
    t: f64,
    states: &[Vec<f64>],
    d: usize,
    u_resolution: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(BsdeError::invalid("states", "need at least one state"));
    }
    let mut acc = 0.0;
    for x in states {
        let at = EnvelopePoint::new(t, x.clone(), d);
        let lo = lower_envelope(g, alpha, n, &at, u_resolution)?;
        let up = upper_envelope(g, alpha, n, &at, u_resolution)?;
        let c = (lo.value - lo.g0).abs() + (up.value - lo.g0).abs();
        acc += c * c;
    }
    Ok(acc / states.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{entropy_stress, linear};
    use proptest::prelude::*;

    fn origin() -> EnvelopePoint {
        EnvelopePoint::new(0.0, vec![0.0], 1)
    }

    /// Brute-force oracle: dense scan of `u` in `[-3, 3]`.
    fn oracle(f: impl Fn(f64) -> f64, alpha: f64, n: f64, lower: bool) -> f64 {
        let steps = 60_000;
        let mut best = if lower { f64::INFINITY } else { f64::NEG_INFINITY };
        for k in 0..=steps {
            let u = -3.0 + 6.0 * k as f64 / steps as f64;
            let q = if u.abs() <= alpha { u } else { alpha * u.signum() };
            let v = if lower { f(q) + n * u.abs() } else { f(q) - n * u.abs() };
            best = if lower { best.min(v) } else { best.max(v) };
        }
        best
    }

    #[test]
    fn penalty_dominated_lower_is_g0() {
        let g = linear(-1.0, vec![0.0], 0.0);
        for n in [1, 2, 5] {
            let r = lower_envelope(&g, 1.0, n, &origin(), 1e-4).unwrap();
            assert!(r.value.abs() < 1e-12);
            assert!((r.value - oracle(|y| -y, 1.0, n as f64, true)).abs() < 1e-3);
        }
    }

    #[test]
    fn steep_linear_lower_example() {
        let g = linear(-2.0, vec![0.0], 0.0);
        let r = lower_envelope(&g, 1.0, 1, &origin(), 1e-4).unwrap();
        assert!((r.value + 1.0).abs() < 1e-9);
        assert!((r.argmin_u - 1.0).abs() < 1e-9);
        assert!((r.value - oracle(|y| -2.0 * y, 1.0, 1.0, true)).abs() < 1e-3);
    }

    #[test]
    fn upper_examples() {
        let g = linear(1.0, vec![0.0], 0.0);
        assert!(upper_envelope(&g, 1.0, 1, &origin(), 1e-4).unwrap().value.abs() < 1e-12);
        let c = linear(0.0, vec![0.0], 2.5);
        for n in [1, 3] {
            for alpha in [0.0, 0.5, 2.0] {
                assert_eq!(upper_envelope(&c, alpha, n, &origin(), 1e-3).unwrap().value, 2.5);
            }
        }
    }

    #[test]
    fn steep_linear_curve() {
        let g = linear(-2.0, vec![0.0], 0.0);
        let c = convergence_curve(&g, 1.0, &origin(), &[1, 2, 4], 1e-4).unwrap();
        let lower: Vec<f64> = c.rows.iter().map(|r| r.lower).collect();
        let upper: Vec<f64> = c.rows.iter().map(|r| r.upper).collect();
        let combined: Vec<f64> = c.rows.iter().map(|r| r.combined).collect();
        for (v, e) in lower.iter().zip([-1.0, 0.0, 0.0]) {
            assert!((v - e).abs() < 1e-3);
        }
        for (v, e) in upper.iter().zip([1.0, 0.0, 0.0]) {
            assert!((v - e).abs() < 1e-3);
        }
        for (v, e) in combined.iter().zip([2.0, 0.0, 0.0]) {
            assert!((v - e).abs() < 1e-3);
        }
        assert!(c.all_hold());
        assert_eq!(c.rows[0].bound, Some(4.0));
    }

    #[test]
    fn lipschitz_curve_vanishes_above_constant() {
        let g = linear(1.5, vec![0.0], 0.7);
        let c = convergence_curve(&g, 2.0, &origin(), &[2, 3, 8], 1e-4).unwrap();
        assert!(c.rows.iter().all(|r| r.combined.abs() < 1e-12));
        let k = linear(0.0, vec![0.0], -4.0);
        let c = convergence_curve(&k, 2.0, &origin(), &[1, 2], 1e-4).unwrap();
        assert!(c.rows.iter().all(|r| r.combined == 0.0));
    }

    #[test]
    fn zero_candidate_bounds() {
        let g = entropy_stress(0.1).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            let at = EnvelopePoint::new(0.3, vec![x], 1);
            let g0 = at.g(&g, 0.0);
            for n in [1, 7] {
                assert!(lower_envelope(&g, 2.0, n, &at, 1e-3).unwrap().value <= g0);
                assert!(upper_envelope(&g, 2.0, n, &at, 1e-3).unwrap().value >= g0);
            }
        }
    }

    #[test]
    fn stress_envelope_against_dense_oracle() {
        let g = entropy_stress(0.1).unwrap();
        let x = 0.8;
        let f = |y: f64| g.eval(0.0, &[x], y, &[0.0]);
        let at = EnvelopePoint::new(0.0, vec![x], 1);
        for n in [1, 2, 5] {
            let lo = lower_envelope(&g, 1.5, n, &at, 1e-4).unwrap().value;
            let up = upper_envelope(&g, 1.5, n, &at, 1e-4).unwrap().value;
            assert!((lo - oracle(f, 1.5, n as f64, true)).abs() < 2e-3, "n={n}");
            assert!((up - oracle(f, 1.5, n as f64, false)).abs() < 2e-3, "n={n}");
        }
    }

    #[test]
    fn sandwich_linear_and_trivial() {
        let g = linear(-0.8, vec![0.0], 0.3);
        let ys: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
        let r = sandwich_check(&g, 1.0, 1, &origin(), &ys, 1e-4).unwrap();
        assert!(r.holds() && r.worst_violation <= 0.0);
        let r = sandwich_check(&g, 1.0, 1, &origin(), &[0.0], 1e-4).unwrap();
        assert!(r.worst_violation <= 0.0);
    }

    #[test]
    fn sandwich_stress_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = entropy_stress(0.1).unwrap();
        let at = EnvelopePoint::new(0.5, vec![0.4], 1);
        let r = sandwich_check(&g, 2.0, 50, &at, &ys, 1e-4).unwrap();
        assert!(r.holds(), "{r:?}");
    }

    #[test]
    fn truncation_coherence() {
        // (u - 1)^2 + |u| is minimized at u = 1/2
        let g = Generator::custom("well", 0.0, |_t, _x, y, _z| (y - 1.0).powi(2)).unwrap();
        let a = lower_envelope(&g, 1.0, 1, &origin(), 1e-4).unwrap();
        let b = lower_envelope(&g, 3.0, 1, &origin(), 1e-4).unwrap();
        assert!((a.argmin_u - 0.5).abs() < 1e-9);
        assert!((a.value - b.value).abs() < 1e-9);
        assert!((a.argmin_u - b.argmin_u).abs() < 1e-9);
    }

    #[test]
    fn undeclared_growth_uses_empirical_grid() {
        let g = Generator::custom("cubic", 0.0, |_t, _x, y, _z| y * y * y).unwrap();
        let (psi, declared) = psi_hat(&g, 2.0, &origin()).unwrap();
        assert!(!declared);
        assert!((psi - 8.0).abs() < 1e-12);
        let c = convergence_curve(&g, 2.0, &origin(), &[1, 2, 4, 8, 16], 1e-4).unwrap();
        assert!(c.rows.iter().all(|r| r.bound.is_none()));
        assert!(c.lower_nondecreasing && c.upper_nonincreasing && c.combined_nonincreasing);
        assert!(c.rows.last().unwrap().combined < 1e-12);
    }

    #[test]
    fn invalid_arguments() {
        let g = linear(0.0, vec![0.0], 0.0);
        assert!(lower_envelope(&g, -1.0, 1, &origin(), 1e-3).is_err());
        assert!(lower_envelope(&g, 1.0, 0, &origin(), 1e-3).is_err());
        assert!(lower_envelope(&g, 1.0, 1, &origin(), 0.0).is_err());
        assert!(convergence_curve(&g, 1.0, &origin(), &[2, 1], 1e-3).is_err());
        let bad = Generator::custom("nan", 0.0, |_t, _x, y, _z| if y > 0.5 { f64::NAN } else { 0.0 }).unwrap();
        assert!(matches!(lower_envelope(&bad, 1.0, 1, &origin(), 1e-3), Err(BsdeError::NonFinite { .. })));
    }

    #[test]
    fn mean_square_over_states() {
        let g = linear(-2.0, vec![0.0], 0.0);
        let states = vec![vec![0.0], vec![1.0], vec![-1.0]];
        let v = mean_square_combined(&g, 1.0, 1, 0.0, &states, 1, 1e-4).unwrap();
        assert!((v - 4.0).abs() < 1e-6);
        assert_eq!(mean_square_combined(&g, 1.0, 2, 0.0, &states, 1, 1e-4).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn monotone_in_n(a in -4.0f64..4.0, c in -1.0f64..1.0, x in -1.5f64..1.5, alpha in 0.0f64..2.5) {
            let gens = [linear(a, vec![0.0], c), entropy_stress(0.1).unwrap()];
            for g in &gens {
                let at = EnvelopePoint::new(0.2, vec![x], 1);
                let cur = convergence_curve(g, alpha, &at, &[1, 2, 3, 5, 9], 1e-3).unwrap();
                prop_assert!(cur.lower_nondecreasing && cur.upper_nonincreasing);
                prop_assert_eq!(cur.bound_violations, 0);
                for w in cur.rows.windows(2) {
                    prop_assert!(w[1].lower >= w[0].lower);
                    prop_assert!(w[1].upper <= w[0].upper);
                }
            }
        }
    }
}
