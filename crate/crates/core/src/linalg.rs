//! Sparse matrices, cell stiffness assembly and a Jacobi-preconditioned
//! conjugate gradient solver.

use crate::error::{Error, Result};
use crate::geometry::StructuredGrid;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square matrix from `(row, col, value)` triplets; duplicates are summed
    /// and exact zeros dropped.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                if let Some((lr, lc)) = last {
                    if *vals.last().unwrap() == 0.0 && (lr, lc) != (r, c) {
                        cols.pop();
                        vals.pop();
                        row_ptr[lr + 1] -= 1;
                    }
                }
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        if let Some((lr, _)) = last {
            if *vals.last().unwrap() == 0.0 {
                cols.pop();
                vals.pop();
                row_ptr[lr + 1] -= 1;
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn diagonal_matrix(diag: &[f64]) -> Self {
        let n = diag.len();
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: diag.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).find(|&(c, _)| c == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    /// `scale * self + diag(shift)`; keeps the sparsity pattern of `self` plus the diagonal.
    pub fn scaled_plus_diagonal(&self, scale: f64, shift: &[f64]) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                triplets.push((i, c, scale * v));
            }
            triplets.push((i, i, shift[i]));
        }
        CsrMatrix::from_triplets(self.n, triplets)
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate().take(self.n) {
            let mut row = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.vals[k] * y[self.cols[k]];
            }
            acc += xi * row;
        }
        acc
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            self.row(i).all(|(j, v)| {
                let vt = self.row(j).find(|&(c, _)| c == i).map_or(0.0, |(_, v)| v);
                (v - vt).abs() <= tol * v.abs().max(1.0)
            })
        })
    }
}

/// Local `2^d x 2^d` stiffness matrix of one grid cell for the quadratic form
/// `int A grad u . grad u`, row-major, corners ordered by bitmask.
///
/// Diagonal tensor entries act edge by edge (each edge receives `1/2^(d-1)` of
/// the cell), off-diagonal entries couple the cell-averaged difference quotients.
/// With `A = I` this reproduces the standard `2d+1`-point Laplacian.
pub fn local_stiffness(dim: usize, h: f64, tensor: &[Vec<f64>]) -> Vec<f64> {
    let nc = 1usize << dim;
    let mut k = vec![0.0; nc * nc];
    let edge_share = 1.0 / (1usize << (dim - 1)) as f64;
    let scale = h.powi(dim as i32 - 2);
    for a in 0..dim {
        let w = tensor[a][a] * edge_share * scale;
        for c in 0..nc {
            if (c >> a) & 1 == 0 {
                let c2 = c | (1 << a);
                k[c * nc + c] += w;
                k[c2 * nc + c2] += w;
                k[c * nc + c2] -= w;
                k[c2 * nc + c] -= w;
            }
        }
    }
    let avg = edge_share * edge_share * scale;
    for a in 0..dim {
        for b in 0..dim {
            if a == b || tensor[a][b] == 0.0 {
                continue;
            }
            let w = tensor[a][b] * avg;
            for i in 0..nc {
                let si = if (i >> a) & 1 == 1 { 1.0 } else { -1.0 };
                for j in 0..nc {
                    let sj = if (j >> b) & 1 == 1 { 1.0 } else { -1.0 };
                    // symmetric split of the a-b cross term
                    k[i * nc + j] += 0.5 * w * si * sj;
                    k[j * nc + i] += 0.5 * w * si * sj;
                }
            }
        }
    }
    k
}

/// Assembles `int_{fluid} A grad u . grad u` over the fluid cells of `grid`,
/// indexed by the grid's unknown nodes (Dirichlet nodes are eliminated).
pub fn assemble_stiffness(grid: &StructuredGrid, tensor: &[Vec<f64>]) -> CsrMatrix {
    let d = grid.dim();
    let nc = 1usize << d;
    let local = local_stiffness(d, grid.h(), tensor);
    let mut triplets = Vec::with_capacity(grid.cell_count() * nc * nc / 2);
    let mut idx = vec![None; nc];
    for cell in 0..grid.cell_count() {
        if !grid.cell_is_fluid(cell) {
            continue;
        }
        for (slot, node) in idx.iter_mut().zip(grid.cell_corners(cell)) {
            *slot = grid.unknown_index(node);
        }
        for i in 0..nc {
            let Some(gi) = idx[i] else { continue };
            for j in 0..nc {
                let Some(gj) = idx[j] else { continue };
                let v = local[i * nc + j];
                if v != 0.0 {
                    triplets.push((gi, gj, v));
                }
            }
        }
    }
    CsrMatrix::from_triplets(grid.unknown_nodes().len(), triplets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            rel_tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A x = b` for symmetric positive (semi)definite `A` with Jacobi
/// preconditioning, starting from the contents of `x`.
///
/// With `singular = true` the system is treated as having the constant
/// vector as its null space: the residual is kept mean-free throughout.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    inv_diag: &[f64],
    opts: CgOptions,
    singular: bool,
) -> Result<CgOutcome> {
    let n = a.dim();
    let mut b_eff = b.to_vec();
    if singular {
        remove_mean(&mut b_eff);
    }
    let b_norm = dot(&b_eff, &b_eff).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    a.mul_vec_into(x, &mut r);
    for i in 0..n {
        r[i] = b_eff[i] - r[i];
    }
    if singular {
        remove_mean(&mut r);
    }
    let mut res = dot(&r, &r).sqrt() / b_norm;
    if res <= opts.rel_tol {
        return Ok(CgOutcome {
            iterations: 0,
            rel_residual: res,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    if singular {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=opts.max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Solver {
                iterations: it,
                residual: res,
                tolerance: opts.rel_tol,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if singular {
            remove_mean(&mut r);
        }
        res = dot(&r, &r).sqrt() / b_norm;
        if res <= opts.rel_tol {
            return Ok(CgOutcome {
                iterations: it,
                rel_residual: res,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if singular {
            remove_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver {
        iterations: opts.max_iter,
        residual: res,
        tolerance: opts.rel_tol,
    })
}
