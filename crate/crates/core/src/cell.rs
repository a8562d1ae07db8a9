//! Periodic cell problems on the perforated unit cell and the effective tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{StructuredGrid, UnitCellSpec, MAX_DIM};
use crate::linalg::{local_stiffness, pcg, CgOptions, CsrMatrix};

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorVariant {
    /// `(1/|Y|) int_{Y*} grad w_i . grad w_j`.
    #[default]
    GradientForm,
    /// `(1/|Y|) int_{Y*} w_i w_j`, kept for comparison.
    PaperLiteral,
}

impl std::str::FromStr for TensorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient-form" => Ok(TensorVariant::GradientForm),
            "paper-literal" => Ok(TensorVariant::PaperLiteral),
            other => Err(Error::Validation(format!(
                "unknown tensor variant `{other}` (expected gradient-form or paper-literal)"
            ))),
        }
    }
}

/// Periodic node lattice on the cell with `n_a = l_a / h` nodes per axis.
#[derive(Debug, Clone, PartialEq)]
struct CellGrid {
    dim: usize,
    h: f64,
    n: [usize; MAX_DIM],
    fluid_cell: Vec<bool>,
    /// Unknown index per node, `None` for nodes touching no fluid cell.
    unknown: Vec<Option<usize>>,
    unknowns: usize,
}

impl CellGrid {
    fn new(cell: &UnitCellSpec, h: f64) -> Result<Self> {
        let d = cell.dim();
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(
                "cell.h",
                format!("spacing must be positive, got {h}"),
            ));
        }
        let steps = |x: f64, axis: usize| -> Result<usize> {
            let q = x / h;
            if (q - q.round()).abs() > ALIGN_TOL * q.abs().max(1.0) {
                return Err(Error::config(
                    "cell.h",
                    format!("spacing {h} does not resolve coordinate {x} on axis {axis}"),
                ));
            }
            Ok(q.round() as usize)
        };
        let mut n = [1usize; MAX_DIM];
        for (a, slot) in n.iter_mut().enumerate().take(d) {
            *slot = steps(cell.lengths()[a], a)?;
            if *slot < 2 {
                return Err(Error::config(
                    "cell.h",
                    format!("fewer than two cells on axis {a}"),
                ));
            }
        }
        let mut hole_range = [(0usize, 0usize); MAX_DIM];
        if let Some(hole) = cell.hole() {
            for (a, slot) in hole_range.iter_mut().enumerate().take(d) {
                *slot = (steps(hole.lower[a], a)?, steps(hole.upper[a], a)?);
            }
        }
        let cells = n[0] * n[1] * n[2];
        let mut fluid_cell = vec![true; cells];
        if cell.hole().is_some() {
            for (c, f) in fluid_cell.iter_mut().enumerate() {
                let idx = unflatten(c, n);
                *f = !(0..d).all(|a| idx[a] >= hole_range[a].0 && idx[a] < hole_range[a].1);
            }
        }
        let mut grid = CellGrid {
            dim: d,
            h,
            n,
            fluid_cell,
            unknown: vec![None; cells],
            unknowns: 0,
        };
        let mut used = vec![false; cells];
        for c in 0..cells {
            if grid.fluid_cell[c] {
                for node in grid.corners(c) {
                    used[node] = true;
                }
            }
        }
        let mut next = 0;
        for (slot, u) in grid.unknown.iter_mut().zip(&used) {
            if *u {
                *slot = Some(next);
                next += 1;
            }
        }
        if next == 0 {
            return Err(Error::Validation("the hole leaves no fluid cells".into()));
        }
        grid.unknowns = next;
        Ok(grid)
    }

    fn cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    /// Corner node ids of a cell with periodic wrap, ordered by bitmask.
    fn corners(&self, c: usize) -> Vec<usize> {
        let base = unflatten(c, self.n);
        (0..1usize << self.dim)
            .map(|mask| {
                let mut idx = base;
                for (a, slot) in idx.iter_mut().enumerate().take(self.dim) {
                    *slot = (*slot + ((mask >> a) & 1)) % self.n[a];
                }
                flatten(idx, self.n)
            })
            .collect()
    }
}

fn unflatten(mut i: usize, n: [usize; MAX_DIM]) -> [usize; MAX_DIM] {
    let mut idx = [0; MAX_DIM];
    for a in 0..MAX_DIM {
        idx[a] = i % n[a];
        i /= n[a];
    }
    idx
}

fn flatten(idx: [usize; MAX_DIM], n: [usize; MAX_DIM]) -> usize {
    idx[0] + n[0] * (idx[1] + n[1] * idx[2])
}

/// Periodic correctors of the unit cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    cell: UnitCellSpec,
    grid: CellGrid,
    /// `phi_i = w_i - y_i` per direction, one value per lattice node
    /// (zero at nodes outside the fluid).
    phi: Vec<Vec<f64>>,
    /// Max absolute residual of the assembled equations for `w_i`.
    pub residual: f64,
    pub iterations: usize,
}

pub fn solve_cell_problem(cell: &UnitCellSpec, h: f64) -> Result<CellSolution> {
    solve_cell_problem_with(cell, h, CgOptions::default())
}

pub fn solve_cell_problem_with(cell: &UnitCellSpec, h: f64, cg: CgOptions) -> Result<CellSolution> {
    let grid = CellGrid::new(cell, h)?;
    let d = grid.dim;
    let nc = 1usize << d;
    let identity: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let local = local_stiffness(d, h, &identity);
    let mut triplets = Vec::new();
    let mut rhs = vec![vec![0.0; grid.unknowns]; d];
    for c in 0..grid.cells() {
        if !grid.fluid_cell[c] {
            continue;
        }
        let corners = grid.corners(c);
        for i in 0..nc {
            let gi = grid.unknown[corners[i]].expect("fluid corner");
            for j in 0..nc {
                let gj = grid.unknown[corners[j]].expect("fluid corner");
                let k = local[i * nc + j];
                if k != 0.0 {
                    triplets.push((gi, gj, k));
                }
                for (axis, b) in rhs.iter_mut().enumerate() {
                    // unwrapped y_axis of corner j, up to a constant
                    b[gi] -= k * h * ((j >> axis) & 1) as f64;
                }
            }
        }
    }
    let matrix = CsrMatrix::from_triplets(grid.unknowns, triplets);
    let inv_diag: Vec<f64> = matrix.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut weight = vec![0.0; grid.unknowns];
    let cell_vol = h.powi(d as i32) / nc as f64;
    for c in 0..grid.cells() {
        if grid.fluid_cell[c] {
            for node in grid.corners(c) {
                weight[grid.unknown[node].unwrap()] += cell_vol;
            }
        }
    }
    let total_weight: f64 = weight.iter().sum();
    let mut phi = Vec::with_capacity(d);
    let mut residual: f64 = 0.0;
    let mut iterations = 0;
    for b in &rhs {
        let mut x = vec![0.0; grid.unknowns];
        let out = pcg(&matrix, b, &mut x, &inv_diag, cg, true)?;
        iterations += out.iterations;
        let mean = x.iter().zip(&weight).map(|(x, w)| x * w).sum::<f64>() / total_weight;
        x.iter_mut().for_each(|v| *v -= mean);
        let kx = matrix.mul_vec(&x);
        residual = residual.max(
            kx.iter()
                .zip(b)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let mut full = vec![0.0; grid.cells()];
        for (node, slot) in grid.unknown.iter().enumerate() {
            if let Some(k) = slot {
                full[node] = x[*k];
            }
        }
        phi.push(full);
    }
    Ok(CellSolution {
        cell: cell.clone(),
        grid,
        phi,
        residual,
        iterations,
    })
}

impl CellSolution {
    pub fn cell(&self) -> &UnitCellSpec {
        &self.cell
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    /// Nodes per axis of the periodic lattice.
    pub fn shape(&self) -> [usize; MAX_DIM] {
        self.grid.n
    }

    /// `phi_i = w_i - y_i` at lattice node `idx`.
    pub fn phi(&self, i: usize, idx: [usize; MAX_DIM]) -> f64 {
        self.phi[i][flatten(idx, self.grid.n)]
    }

    /// Whether lattice node `idx` belongs to the fluid part of the cell.
    pub fn is_fluid_node(&self, idx: [usize; MAX_DIM]) -> bool {
        self.grid.unknown[flatten(idx, self.grid.n)].is_some()
    }

    /// `w_i = phi_i + y_i` at node `idx`, with `y` in `[0, l)`.
    pub fn w(&self, i: usize, idx: [usize; MAX_DIM]) -> f64 {
        self.phi(i, idx) + idx[i] as f64 * self.grid.h
    }

    /// Multilinear interpolation of `phi_i` at a point of the cell (wrapped
    /// into `[0, l)`).
    pub fn phi_at(&self, i: usize, y: &[f64]) -> f64 {
        let d = self.grid.dim;
        let h = self.grid.h;
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..d {
            let l = self.cell.lengths()[a];
            let s = y[a].rem_euclid(l) / h;
            let k = (s.floor() as usize).min(self.grid.n[a] - 1);
            base[a] = k;
            frac[a] = s - k as f64;
        }
        let mut acc = 0.0;
        for mask in 0..1usize << d {
            let mut idx = base;
            let mut wgt = 1.0;
            for a in 0..d {
                let bit = (mask >> a) & 1;
                idx[a] = (idx[a] + bit) % self.grid.n[a];
                wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if wgt != 0.0 {
                acc += wgt * self.phi(i, idx);
            }
        }
        acc
    }

    /// Max over nodes of `|phi_i(y_1, y_2) - phi_j(y_2, y_1)|` for the swap `i <-> j`.
    pub fn swap_asymmetry(&self, i: usize, j: usize) -> f64 {
        let n = self.grid.n;
        let mut worst: f64 = 0.0;
        for node in 0..self.grid.cells() {
            let idx = unflatten(node, n);
            let mut sw = idx;
            sw.swap(i, j);
            if sw[i] >= n[i] || sw[j] >= n[j] {
                continue;
            }
            worst = worst.max((self.phi(i, idx) - self.phi(j, sw)).abs());
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensor {
    pub matrix: Vec<Vec<f64>>,
    pub porosity: f64,
    pub variant: TensorVariant,
}

pub fn effective_tensor(sol: &CellSolution, variant: TensorVariant) -> EffectiveTensor {
    let grid = &sol.grid;
    let d = grid.dim;
    let nc = 1usize << d;
    let h = grid.h;
    let local = local_stiffness(
        d,
        h,
        &(0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>(),
    );
    let cell_measure = h.powi(d as i32);
    let mut a = vec![vec![0.0; d]; d];
    let mut w_loc = vec![vec![0.0; nc]; d];
    for c in 0..grid.cells() {
        if !grid.fluid_cell[c] {
            continue;
        }
        let base = unflatten(c, grid.n);
        let corners = grid.corners(c);
        for (i, wl) in w_loc.iter_mut().enumerate() {
            for (k, &node) in corners.iter().enumerate() {
                // unwrapped coordinate keeps w_i continuous across the period
                let y = (base[i] + ((k >> i) & 1)) as f64 * h;
                wl[k] = sol.phi[i][node] + y;
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = match variant {
                    TensorVariant::GradientForm => {
                        let mut q = 0.0;
                        for p in 0..nc {
                            for r in 0..nc {
                                q += w_loc[i][p] * local[p * nc + r] * w_loc[j][r];
                            }
                        }
                        q
                    }
                    TensorVariant::PaperLiteral => {
                        let mi = w_loc[i].iter().sum::<f64>() / nc as f64;
                        let mj = w_loc[j].iter().sum::<f64>() / nc as f64;
                        mi * mj * cell_measure
                    }
                };
                a[i][j] += v;
            }
        }
    }
    let vol = sol.cell.volume();
    for i in 0..d {
        for j in i..d {
            a[i][j] /= vol;
            a[j][i] = a[i][j];
        }
    }
    EffectiveTensor {
        matrix: a,
        porosity: sol.cell.porosity(),
        variant,
    }
}

impl EffectiveTensor {
    pub fn identity(dim: usize) -> Self {
        EffectiveTensor {
            matrix: (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            porosity: 1.0,
            variant: TensorVariant::GradientForm,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                worst = worst.max((self.matrix[i][j] - self.matrix[j][i]).abs());
            }
        }
        worst
    }

    /// Cholesky test for positive definiteness.
    pub fn is_positive_definite(&self) -> bool {
        let d = self.dim();
        let mut l = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let p = self.matrix[i][i] - s;
                    if !(p > 0.0) {
                        return false;
                    }
                    l[i][i] = p.sqrt();
                } else {
                    l[i][j] = (self.matrix[i][j] - s) / l[j][j];
                }
            }
        }
        true
    }

    /// Checks shape, finiteness, symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(2..=3).contains(&d) || self.matrix.iter().any(|row| row.len() != d) {
            return Err(Error::Validation(format!(
                "effective tensor must be square of size 2 or 3, got {d} rows"
            )));
        }
        if self.matrix.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation(
                "effective tensor has non-finite entries".into(),
            ));
        }
        if self.max_asymmetry() > 1e-8 {
            return Err(Error::Validation(
                "effective tensor is not symmetric".into(),
            ));
        }
        if !self.is_positive_definite() {
            return Err(Error::Validation(
                "effective tensor is not positive definite".into(),
            ));
        }
        if !(self.porosity > 0.0 && self.porosity <= 1.0) {
            return Err(Error::Validation(format!(
                "porosity must lie in (0, 1], got {}",
                self.porosity
            )));
        }
        Ok(())
    }
}

/// Observed order and extrapolated limit from values on `h, h/2, h/4`.
/// Returns `None` when the differences do not shrink monotonically.
pub fn richardson(values: [f64; 3]) -> Option<(f64, f64)> {
    let d1 = values[0] - values[1];
    let d2 = values[1] - values[2];
    if d2 == 0.0 || d1 / d2 <= 1.0 {
        return None;
    }
    let p = (d1 / d2).log2();
    Some((p, values[2] - d2 / (2f64.powf(p) - 1.0)))
}

/// Tensor entries on a refinement sequence with per-entry Richardson data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConvergence {
    pub h: Vec<f64>,
    pub tensors: Vec<EffectiveTensor>,
    /// Observed order per entry (`NaN` when not monotone).
    pub order: Vec<Vec<f64>>,
    pub extrapolated: Vec<Vec<f64>>,
}

pub fn cell_convergence(
    cell: &UnitCellSpec,
    h: [f64; 3],
    variant: TensorVariant,
) -> Result<CellConvergence> {
    let tensors = h
        .iter()
        .map(|&hc| solve_cell_problem(cell, hc).map(|s| effective_tensor(&s, variant)))
        .collect::<Result<Vec<_>>>()?;
    let d = cell.dim();
    let mut order = vec![vec![f64::NAN; d]; d];
    let mut extrapolated = vec![vec![f64::NAN; d]; d];
    for i in 0..d {
        for j in 0..d {
            let vals = [
                tensors[0].matrix[i][j],
                tensors[1].matrix[i][j],
                tensors[2].matrix[i][j],
            ];
            if let Some((p, x)) = richardson(vals) {
                order[i][j] = p;
                extrapolated[i][j] = x;
            } else if vals[1] == vals[2] {
                extrapolated[i][j] = vals[2];
            }
        }
    }
    Ok(CellConvergence {
        h: h.to_vec(),
        tensors,
        order,
        extrapolated,
    })
}

/// `u + eps * sum_i d_i u * (w_i - y_i)(x / eps)` on a full grid; gradients
/// by central differences (one-sided at the outer boundary).
pub fn corrector_expand(
    u: &[f64],
    grid: &StructuredGrid,
    sol: &CellSolution,
    eps: f64,
) -> Result<Vec<f64>> {
    if u.len() != grid.node_count() {
        return Err(Error::ShapeMismatch {
            expected: grid.node_count(),
            actual: u.len(),
        });
    }
    let d = grid.dim();
    if sol.dim() != d {
        return Err(Error::Validation("cell and grid dimensions differ".into()));
    }
    let shape = grid.shape();
    let h = grid.h();
    let mut out = u.to_vec();
    for (node, slot) in out.iter_mut().enumerate() {
        let idx = grid.multi_index(node);
        let x = grid.coord(node);
        let y: Vec<f64> = (0..d).map(|a| x[a] / eps).collect();
        let mut corr = 0.0;
        for i in 0..d {
            let (lo, hi) = (idx[i].saturating_sub(1), (idx[i] + 1).min(shape[i] - 1));
            let mut il = idx;
            il[i] = lo;
            let mut ih = idx;
            ih[i] = hi;
            let grad = (u[grid.node_id(ih)] - u[grid.node_id(il)]) / ((hi - lo) as f64 * h);
            if grad != 0.0 {
                corr += grad * sol.phi_at(i, &y);
            }
        }
        *slot += eps * corr;
    }
    Ok(out)
}
