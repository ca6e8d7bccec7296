//! Least-squares projection onto polynomial bases of standardized features.
//!
//! Reductions run over fixed-size path chunks whose partial sums are combined
//! in chunk order, so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const CHUNK: usize = 2048;

/// Relative spread below which a feature column is treated as constant.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Standardized monomial basis of total degree `<= degree` in the kept
/// (non-constant) raw feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisModel {
    pub degree: usize,
    pub kept: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for total in 1..=degree {
        let mut current = vec![0u32; vars];
        fill(&mut out, &mut current, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, current: &mut [u32], pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.to_vec());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        fill(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

impl BasisModel {
    /// Inspect raw features (`rows` x `width`, row-major) and build the basis.
    pub fn fit(raw: &[f64], width: usize, degree: usize) -> BasisModel {
        let rows = if width == 0 { 0 } else { raw.len() / width };
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for c in 0..width {
            // two passes: a constant column must give exactly zero spread
            let mean = chunked_sum(rows, |m| raw[m * width + c]) / rows as f64;
            let var = chunked_sum(rows, |m| (raw[m * width + c] - mean).powi(2)) / rows as f64;
            let sd = var.sqrt();
            if sd > DEGENERATE_SPREAD * (1.0 + mean.abs()) {
                kept.push(c);
                means.push(mean);
                scales.push(sd);
            }
        }
        let degree = if kept.is_empty() { 0 } else { degree };
        let exponents = if kept.is_empty() { vec![vec![]] } else { monomials(kept.len(), degree) };
        BasisModel { degree, kept, means, scales, exponents }
    }

    pub fn with_degree(&self, degree: usize) -> BasisModel {
        let mut out = self.clone();
        out.degree = degree;
        out.exponents = if self.kept.is_empty() { vec![vec![]] } else { monomials(self.kept.len(), degree) };
        out
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval(&self, raw_row: &[f64], out: &mut [f64]) {
        let stride = self.degree + 1;
        let need = self.kept.len() * stride;
        let mut stack = [0.0f64; 64];
        let mut heap;
        let powers: &mut [f64] = if need <= stack.len() {
            &mut stack[..need]
        } else {
            heap = vec![0.0; need];
            &mut heap
        };
        for (j, &c) in self.kept.iter().enumerate() {
            let s = (raw_row[c] - self.means[j]) / self.scales[j];
            let p = &mut powers[j * stride..(j + 1) * stride];
            p[0] = 1.0;
            for e in 1..stride {
                p[e] = p[e - 1] * s;
            }
        }
        for (o, exps) in out.iter_mut().zip(&self.exponents) {
            *o = exps
                .iter()
                .enumerate()
                .map(|(j, &e)| powers[j * stride + e as usize])
                .product();
        }
    }
}

fn chunked_sum<F>(rows: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let parts: Vec<f64> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(rows)).map(&f).sum())
        .collect();
    parts.into_iter().sum()
}

/// Evaluated design matrix together with its factorized Gram matrix.
#[derive(Debug, Clone)]
pub struct Design {
    pub model: BasisModel,
    pub cond: f64,
    rows: usize,
    phi: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Design {
    /// Evaluate the basis on every row, lowering the degree until the Gram
    /// matrix condition number is at most `cond_max`. Returns `Err(cond)` when
    /// even degree 0 fails, which only happens for an empty row set.
    pub fn build(raw: &[f64], width: usize, degree: usize, cond_max: f64) -> Result<Design, f64> {
        let rows = if width == 0 { raw.len() } else { raw.len() / width };
        let base = BasisModel::fit(raw, width, degree);
        let mut deg = base.degree;
        loop {
            let model = base.with_degree(deg);
            let k = model.len();
            let mut phi = vec![0.0; rows * k];
            phi.par_chunks_mut(k).enumerate().for_each(|(m, row)| {
                model.eval(&raw[m * width..(m + 1) * width], row)
            });
            let gram = gram_matrix(&phi, rows, k);
            let cond = condition_number(&gram);
            if cond <= cond_max {
                if let Some(chol) = gram.cholesky() {
                    return Ok(Design { model, cond, rows, phi, chol });
                }
            }
            if deg == 0 {
                return Err(cond);
            }
            deg -= 1;
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.model.len()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let k = self.width();
        &self.phi[m * k..(m + 1) * k]
    }

    /// Least-squares coefficients of the regressand `r(m)`.
    pub fn fit<F>(&self, r: F) -> Vec<f64>
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let k = self.width();
        let rows = self.rows;
        let parts: Vec<Vec<f64>> = (0..rows.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; k];
                for m in c * CHUNK..((c + 1) * CHUNK).min(rows) {
                    let v = r(m);
                    acc.iter_mut().zip(self.row(m)).for_each(|(a, p)| *a += p * v);
                }
                acc
            })
            .collect();
        let mut rhs = vec![0.0; k];
        for p in parts {
            rhs.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let rhs = DVector::from_iterator(k, rhs.into_iter().map(|v| v / rows as f64));
        self.chol.solve(&rhs).iter().copied().collect()
    }

    pub fn predict(&self, coef: &[f64], m: usize) -> f64 {
        self.row(m).iter().zip(coef).map(|(a, b)| a * b).sum()
    }
}

fn gram_matrix(phi: &[f64], rows: usize, k: usize) -> DMatrix<f64> {
    let parts: Vec<Vec<f64>> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; k * k];
            for m in c * CHUNK..((c + 1) * CHUNK).min(rows) {
                let row = &phi[m * k..(m + 1) * k];
                for a in 0..k {
                    for b in a..k {
                        acc[a * k + b] += row[a] * row[b];
                    }
                }
            }
            acc
        })
        .collect();
    let mut g = vec![0.0; k * k];
    for p in parts {
        g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = g[a * k + b] / rows.max(1) as f64;
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

fn condition_number(gram: &DMatrix<f64>) -> f64 {
    if gram.nrows() == 1 {
        return if gram[(0, 0)] > 0.0 { 1.0 } else { f64::INFINITY };
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}
