//! Symmetric positive definite solvers: banded Cholesky and Jacobi-PCG.

use crate::error::{Error, Result};

/// Symmetric band matrix storing the lower band row by row:
/// entry `(i, j)` with `i - bw <= j <= i` lives at `i * (bw + 1) + (j + bw - i)`.
#[derive(Clone, Debug)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBand {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)` of the full symmetric matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entries `(i, j)` and `(j, i)` (once on the diagonal).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            let off = self.bw - (i - j0);
            let mut acc = 0.0;
            for (j, &a) in (j0..i).zip(&row[off..self.bw]) {
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc + row[self.bw] * x[i];
        }
    }

    /// In-place Cholesky factorization `A = L L^T`.
    pub fn cholesky(mut self) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut sum = self.data[i * w + (j + bw - i)];
                let ri = i * w + (k0 + bw - i);
                let rj = j * w + (k0 + bw - j);
                let len = j - k0;
                let (a, b) = (&self.data[ri..ri + len], &self.data[rj..rj + len]);
                sum -= a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: sum });
                    }
                    self.data[i * w + bw] = sum.sqrt();
                } else {
                    self.data[i * w + (j + bw - i)] = sum / self.data[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { l: self })
    }
}

#[derive(Clone, Debug)]
pub struct BandCholesky {
    l: SymBand,
}

impl BandCholesky {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.l.n, self.l.bw);
        let w = bw + 1;
        let d = &self.l.data;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = &d[i * w + (j0 + bw - i)..i * w + bw];
            let s: f64 = row.iter().zip(&b[j0..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - s) / d[i * w + bw];
        }
        for i in (0..n).rev() {
            b[i] /= d[i * w + bw];
            let xi = b[i];
            let j0 = i.saturating_sub(bw);
            for j in j0..i {
                b[j] -= d[i * w + (j + bw - i)] * xi;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `A x = b` with the cached factor and a few steps of iterative
/// refinement against the unfactored matrix.
pub fn refined_band_solve(
    a: &SymBand,
    factor: &BandCholesky,
    b: &[f64],
    tol: f64,
    max_refine: usize,
) -> (Vec<f64>, SolveStats) {
    let bnorm = norm(b);
    let mut x = b.to_vec();
    factor.solve_in_place(&mut x);
    if bnorm == 0.0 {
        return (
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        );
    }
    let mut r = vec![0.0; b.len()];
    let mut rel = f64::INFINITY;
    let mut steps = 0;
    for k in 0..=max_refine {
        a.matvec(&x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let new_rel = norm(&r) / bnorm;
        steps = k;
        if new_rel <= tol || new_rel >= rel || k == max_refine {
            rel = rel.min(new_rel);
            break;
        }
        rel = new_rel;
        factor.solve_in_place(&mut r);
        x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
    }
    (
        x,
        SolveStats {
            iterations: steps,
            relative_residual: rel,
        },
    )
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator given as a closure.
pub fn pcg<F>(apply: F, diag: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let inv: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: it, value: pap });
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        let rel = norm(&r) / bnorm;
        if rel <= tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    relative_residual: rel,
                },
            ));
        }
        z.iter_mut()
            .zip(r.iter().zip(&inv))
            .for_each(|(zi, (ri, di))| *zi = ri * di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(Error::SolverStagnation {
        iterations: max_iter,
        residual: norm(&r) / bnorm,
    })
}
