//! Unit cell, periodically perforated domain and the structured grid that
//! resolves it.
//!
//! Holes are axis-aligned boxes. The hole of lattice site `k` occupies
//! `eps * (k * l + S)`; only holes whose closure lies strictly inside the
//! outer box are kept. Grid planes coincide with every retained hole face, so
//! a grid cell is either entirely fluid or entirely inside a hole.
//!
//! Node weights are lumped cell measures: every node receives `h^d / 2^d`
//! from each adjacent fluid cell. Boundary degrees of freedom live on hole
//! faces, one per (node, face) pair, with a lumped `h^(d-1) / 2^(d-1)` share
//! of every face element touching the node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Relative tolerance used when checking that coordinates fall on grid planes.
const ALIGN_TOL: f64 = 1e-9;
/// Absolute tolerance for strict containment of hole closures in the outer box.
const CONTAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > MAX_DIM {
            return Err(Error::Validation(format!(
                "box corners must have equal length between 1 and {MAX_DIM} (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (a, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Validation(format!(
                    "box is empty along axis {a}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(AxisBox { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        AxisBox {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.extent(a)).product()
    }

    /// Measure of the box boundary (perimeter in 2D, area in 3D).
    pub fn surface_measure(&self) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|a| {
                2.0 * (0..d)
                    .filter(|&b| b != a)
                    .map(|b| self.extent(b))
                    .product::<f64>()
            })
            .sum()
    }

    pub fn contains_open(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|a| x[a] > self.lower[a] && x[a] < self.upper[a])
    }
}

/// Reference cell `Y = [0, l_1) x ... x [0, l_d)` with an optional box hole `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCellSpec {
    lengths: Vec<f64>,
    hole: Option<AxisBox>,
}

impl UnitCellSpec {
    pub fn new(lengths: Vec<f64>, hole: Option<AxisBox>) -> Result<Self> {
        let d = lengths.len();
        if !(2..=3).contains(&d) {
            return Err(Error::Validation(format!(
                "cell dimension must be 2 or 3, got {d}"
            )));
        }
        if let Some(a) = lengths.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Validation(format!(
                "cell edge length along axis {a} must be positive"
            )));
        }
        if let Some(hole) = &hole {
            if hole.dim() != d {
                return Err(Error::Validation(format!(
                    "hole has dimension {} but the cell has dimension {d}",
                    hole.dim()
                )));
            }
            for a in 0..d {
                if !(hole.lower[a] > 0.0 && hole.upper[a] < lengths[a]) {
                    return Err(Error::Validation(format!(
                        "hole [{}, {}] along axis {a} is not strictly inside the cell [0, {}]",
                        hole.lower[a], hole.upper[a], lengths[a]
                    )));
                }
            }
        }
        Ok(UnitCellSpec { lengths, hole })
    }

    pub fn unit_square(hole: Option<AxisBox>) -> Result<Self> {
        Self::new(vec![1.0, 1.0], hole)
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn hole(&self) -> Option<&AxisBox> {
        self.hole.as_ref()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Fluid volume fraction `|Y*| / |Y|`.
    pub fn porosity(&self) -> f64 {
        match &self.hole {
            None => 1.0,
            Some(h) => 1.0 - h.volume() / self.volume(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerforatedDomainSpec {
    pub outer: AxisBox,
    pub eps: f64,
    pub cell: UnitCellSpec,
    /// Retained holes in absolute coordinates.
    pub holes: Vec<AxisBox>,
}

impl PerforatedDomainSpec {
    pub fn hole_count(&self) -> usize {
        self.holes.len()
    }

    pub fn porosity(&self) -> f64 {
        self.cell.porosity()
    }

    /// Exact measure of `D^eps`.
    pub fn fluid_measure(&self) -> f64 {
        self.outer.volume() - self.holes.iter().map(AxisBox::volume).sum::<f64>()
    }

    /// Exact measure of the hole boundaries.
    pub fn hole_surface_measure(&self) -> f64 {
        self.holes.iter().map(AxisBox::surface_measure).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeClass {
    FluidInterior,
    HoleInterior,
    HoleBoundary,
    OuterBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDof {
    pub node: usize,
    pub hole: usize,
    /// Axis of the hole face the degree of freedom sits on.
    pub axis: usize,
    /// `+1` when the normal (pointing out of `D^eps`, into the hole) is `+e_axis`.
    pub sign: f64,
    pub weight: f64,
}

impl BoundaryDof {
    pub fn normal(&self) -> [f64; MAX_DIM] {
        let mut n = [0.0; MAX_DIM];
        n[self.axis] = self.sign;
        n
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDofMap {
    dofs: Vec<BoundaryDof>,
}

impl BoundaryDofMap {
    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn dofs(&self) -> &[BoundaryDof] {
        &self.dofs
    }

    pub fn weights(&self) -> Vec<f64> {
        self.dofs.iter().map(|d| d.weight).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.dofs.iter().map(|d| d.weight).sum()
    }
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct StructuredGrid {
    dim: usize,
    origin: [f64; MAX_DIM],
    h: f64,
    nodes: [usize; MAX_DIM],
    class: Vec<NodeClass>,
    cell_fluid: Vec<bool>,
    weight: Vec<f64>,
    unknown: Vec<usize>,
    node_to_unknown: Vec<u32>,
    domain: Vec<usize>,
}

impl StructuredGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.dim]
    }

    /// Nodes per axis.
    pub fn shape(&self) -> &[usize] {
        &self.nodes[..self.dim]
    }

    pub fn node_count(&self) -> usize {
        self.class.len()
    }

    pub fn cell_shape(&self) -> [usize; MAX_DIM] {
        let mut c = [1; MAX_DIM];
        for a in 0..self.dim {
            c[a] = self.nodes[a] - 1;
        }
        c
    }

    pub fn cell_count(&self) -> usize {
        self.cell_fluid.len()
    }

    pub fn multi_index(&self, id: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut rest = id;
        for a in 0..MAX_DIM {
            idx[a] = rest % self.nodes[a];
            rest /= self.nodes[a];
        }
        idx
    }

    pub fn node_id(&self, idx: [usize; MAX_DIM]) -> usize {
        idx[0] + self.nodes[0] * (idx[1] + self.nodes[1] * idx[2])
    }

    pub fn coord(&self, id: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(id);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = self.origin[a] + idx[a] as f64 * self.h;
        }
        x
    }

    pub fn class(&self, id: usize) -> NodeClass {
        self.class[id]
    }

    pub fn classes(&self) -> &[NodeClass] {
        &self.class
    }

    /// Lumped volume weight of every node (zero inside holes).
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn cell_is_fluid(&self, cell: usize) -> bool {
        self.cell_fluid[cell]
    }

    /// Node ids of the `2^d` corners of a cell, ordered by corner bitmask
    /// (bit `a` set means the upper node along axis `a`).
    pub fn cell_corners(&self, cell: usize) -> Vec<usize> {
        let cs = self.cell_shape();
        let mut base = [0; MAX_DIM];
        let mut rest = cell;
        for a in 0..MAX_DIM {
            base[a] = rest % cs[a];
            rest /= cs[a];
        }
        (0..1usize << self.dim)
            .map(|mask| {
                let mut idx = base;
                for (a, slot) in idx.iter_mut().enumerate().take(self.dim) {
                    *slot += (mask >> a) & 1;
                }
                self.node_id(idx)
            })
            .collect()
    }

    /// Interior nodes of the closure of `D^eps` that carry state unknowns:
    /// fluid-interior and hole-boundary nodes.
    pub fn unknown_nodes(&self) -> &[usize] {
        &self.unknown
    }

    pub fn unknown_index(&self, node: usize) -> Option<usize> {
        match self.node_to_unknown[node] {
            NONE => None,
            i => Some(i as usize),
        }
    }

    /// Nodes of the closure of `D^eps` (everything except hole interiors).
    pub fn domain_nodes(&self) -> &[usize] {
        &self.domain
    }

    /// Lumped weights restricted to the unknown nodes.
    pub fn unknown_weights(&self) -> Vec<f64> {
        self.unknown.iter().map(|&n| self.weight[n]).collect()
    }

    /// Discrete measure of `D^eps`.
    pub fn fluid_measure(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Expand a vector on the unknown nodes to the full grid, zero elsewhere.
    pub fn scatter_unknowns(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.unknown.len() {
            return Err(Error::ShapeMismatch {
                expected: self.unknown.len(),
                actual: values.len(),
            });
        }
        let mut full = vec![0.0; self.node_count()];
        for (&n, &v) in self.unknown.iter().zip(values) {
            full[n] = v;
        }
        Ok(full)
    }

    pub fn gather_unknowns(&self, full: &[f64]) -> Result<Vec<f64>> {
        if full.len() != self.node_count() {
            return Err(Error::ShapeMismatch {
                expected: self.node_count(),
                actual: full.len(),
            });
        }
        Ok(self.unknown.iter().map(|&n| full[n]).collect())
    }

    /// Weighted L2 norm of a full-grid field using the lumped fluid weights.
    pub fn l2_norm(&self, full: &[f64]) -> f64 {
        full.iter()
            .zip(&self.weight)
            .map(|(f, w)| w * f * f)
            .sum::<f64>()
            .sqrt()
    }
}

fn grid_index(x: f64, origin: f64, h: f64) -> Option<usize> {
    let q = (x - origin) / h;
    let r = q.round();
    if r >= 0.0 && (q - r).abs() <= ALIGN_TOL * r.abs().max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Lattice sites `k` along one axis whose hole closure lies strictly inside
/// `(lo, hi)`.
fn admissible_shifts(lo: f64, hi: f64, eps: f64, period: f64, s_lo: f64, s_hi: f64) -> Vec<i64> {
    let k_min = ((lo / eps - s_hi) / period).floor() as i64 - 1;
    let k_max = ((hi / eps - s_lo) / period).ceil() as i64 + 1;
    (k_min..=k_max)
        .filter(|&k| {
            let a = eps * (k as f64 * period + s_lo);
            let b = eps * (k as f64 * period + s_hi);
            a > lo + CONTAIN_TOL && b < hi - CONTAIN_TOL
        })
        .collect()
}

/// Builds `D^eps`, its structured grid and the hole-boundary degrees of freedom.
pub fn build_perforated_domain(
    outer: &AxisBox,
    eps: f64,
    cell: &UnitCellSpec,
    h: f64,
) -> Result<(PerforatedDomainSpec, StructuredGrid, BoundaryDofMap)> {
    let d = cell.dim();
    if outer.dim() != d {
        return Err(Error::config(
            "domain.box",
            format!(
                "outer box has dimension {} but the cell has {d}",
                outer.dim()
            ),
        ));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(
            "grid.eps",
            format!("eps must lie in (0, 1), got {eps}"),
        ));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(
            "grid.h",
            format!("spacing must be positive, got {h}"),
        ));
    }
    let mut nodes = [1usize; MAX_DIM];
    for a in 0..d {
        let n = grid_index(outer.upper[a], outer.lower[a], h).ok_or_else(|| {
            Error::config(
                "grid.h",
                format!("spacing {h} does not divide the outer box edge along axis {a}"),
            )
        })?;
        if n < 2 {
            return Err(Error::config(
                "grid.h",
                format!("spacing {h} leaves no interior nodes along axis {a}"),
            ));
        }
        nodes[a] = n + 1;
    }

    let mut holes = Vec::new();
    if let Some(hole) = cell.hole() {
        for a in 0..d {
            let period = eps * cell.lengths()[a];
            if period >= outer.extent(a) {
                return Err(Error::config(
                    "grid.eps",
                    format!("eps*l[{a}] = {period} is not smaller than the outer box edge"),
                ));
            }
            if grid_index(period, 0.0, h).is_none() {
                return Err(Error::config(
                    "grid.h",
                    format!("spacing {h} does not divide eps*l along axis {a} ({period})"),
                ));
            }
        }
        let shifts: Vec<Vec<i64>> = (0..d)
            .map(|a| {
                admissible_shifts(
                    outer.lower[a],
                    outer.upper[a],
                    eps,
                    cell.lengths()[a],
                    hole.lower[a],
                    hole.upper[a],
                )
            })
            .collect();
        let total: usize = shifts.iter().map(Vec::len).product();
        for flat in 0..total {
            let mut rest = flat;
            let mut lower = vec![0.0; d];
            let mut upper = vec![0.0; d];
            for a in 0..d {
                let k = shifts[a][rest % shifts[a].len()] as f64;
                rest /= shifts[a].len();
                let base = k * cell.lengths()[a];
                lower[a] = eps * (base + hole.lower[a]);
                upper[a] = eps * (base + hole.upper[a]);
            }
            holes.push(AxisBox { lower, upper });
        }
    }

    let mut origin = [0.0; MAX_DIM];
    origin[..d].copy_from_slice(&outer.lower);
    let mut cell_shape = [1usize; MAX_DIM];
    for a in 0..d {
        cell_shape[a] = nodes[a] - 1;
    }
    let cell_total: usize = cell_shape.iter().product();
    let mut cell_fluid = vec![true; cell_total];
    let mut hole_ranges = Vec::with_capacity(holes.len());
    for hole in &holes {
        let mut lo = [0usize; MAX_DIM];
        let mut hi = [1usize; MAX_DIM];
        for a in 0..d {
            let misaligned = || {
                Error::config(
                    "grid.h",
                    format!("hole faces along axis {a} do not fall on grid planes of spacing {h}"),
                )
            };
            lo[a] = grid_index(hole.lower[a], origin[a], h).ok_or_else(misaligned)?;
            hi[a] = grid_index(hole.upper[a], origin[a], h).ok_or_else(misaligned)?;
        }
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    let c = i + cell_shape[0] * (j + cell_shape[1] * k);
                    cell_fluid[c] = false;
                }
            }
        }
        hole_ranges.push((lo, hi));
    }

    let node_total: usize = nodes.iter().product();
    let mut class = Vec::with_capacity(node_total);
    let mut weight = Vec::with_capacity(node_total);
    let cell_measure = h.powi(d as i32) / (1usize << d) as f64;
    for id in 0..node_total {
        let idx = {
            let mut idx = [0; MAX_DIM];
            let mut rest = id;
            for a in 0..MAX_DIM {
                idx[a] = rest % nodes[a];
                rest /= nodes[a];
            }
            idx
        };
        let mut present = 0usize;
        let mut fluid = 0usize;
        for mask in 0..1usize << d {
            let mut c = [0usize; MAX_DIM];
            let mut inside = true;
            for a in 0..d {
                let off = (mask >> a) & 1;
                if idx[a] + off == 0 || idx[a] + off > cell_shape[a] {
                    inside = false;
                    break;
                }
                c[a] = idx[a] + off - 1;
            }
            if !inside {
                continue;
            }
            present += 1;
            if cell_fluid[c[0] + cell_shape[0] * (c[1] + cell_shape[1] * c[2])] {
                fluid += 1;
            }
        }
        weight.push(cell_measure * fluid as f64);
        let on_outer = (0..d).any(|a| idx[a] == 0 || idx[a] == nodes[a] - 1);
        class.push(if on_outer {
            NodeClass::OuterBoundary
        } else if fluid == 0 {
            NodeClass::HoleInterior
        } else if fluid < present {
            NodeClass::HoleBoundary
        } else {
            NodeClass::FluidInterior
        });
    }

    let mut unknown = Vec::new();
    let mut node_to_unknown = vec![NONE; node_total];
    let mut domain = Vec::new();
    for (id, c) in class.iter().enumerate() {
        if *c != NodeClass::HoleInterior {
            domain.push(id);
        }
        if matches!(c, NodeClass::FluidInterior | NodeClass::HoleBoundary) {
            node_to_unknown[id] = unknown.len() as u32;
            unknown.push(id);
        }
    }

    let grid = StructuredGrid {
        dim: d,
        origin,
        h,
        nodes,
        class,
        cell_fluid,
        weight,
        unknown,
        node_to_unknown,
        domain,
    };

    let mut dofs = Vec::new();
    let face_measure = h.powi(d as i32 - 1) / (1usize << (d - 1)) as f64;
    for (hole_id, (lo, hi)) in hole_ranges.iter().enumerate() {
        for axis in 0..d {
            for (plane, sign) in [(lo[axis], 1.0), (hi[axis], -1.0)] {
                let others: Vec<usize> = (0..d).filter(|&b| b != axis).collect();
                let counts: Vec<usize> = others.iter().map(|&b| hi[b] - lo[b] + 1).collect();
                let total: usize = counts.iter().product();
                for flat in 0..total {
                    let mut idx = [0usize; MAX_DIM];
                    idx[axis] = plane;
                    let mut rest = flat;
                    let mut elements = 1usize;
                    for (slot, &b) in others.iter().enumerate() {
                        let j = lo[b] + rest % counts[slot];
                        rest /= counts[slot];
                        idx[b] = j;
                        // face elements along axis b touching this node
                        elements *= usize::from(j > lo[b]) + usize::from(j < hi[b]);
                    }
                    dofs.push(BoundaryDof {
                        node: grid.node_id(idx),
                        hole: hole_id,
                        axis,
                        sign,
                        weight: face_measure * elements as f64,
                    });
                }
            }
        }
    }

    let spec = PerforatedDomainSpec {
        outer: outer.clone(),
        eps,
        cell: cell.clone(),
        holes,
    };
    Ok((spec, grid, BoundaryDofMap { dofs }))
}

/// `chi` on every grid node: 1 on the closure of `D^eps`, 0 strictly inside holes.
pub fn indicator_field(grid: &StructuredGrid) -> Vec<f64> {
    grid.classes()
        .iter()
        .map(|c| {
            if *c == NodeClass::HoleInterior {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Zero extension of a field given on `grid.domain_nodes()` to the whole grid.
pub fn zero_extend(field: &[f64], grid: &StructuredGrid) -> Result<Vec<f64>> {
    let domain = grid.domain_nodes();
    if field.len() != domain.len() {
        return Err(Error::ShapeMismatch {
            expected: domain.len(),
            actual: field.len(),
        });
    }
    let mut full = vec![0.0; grid.node_count()];
    for (&n, &v) in domain.iter().zip(field) {
        full[n] = v;
    }
    Ok(full)
}

/// Weighted L2 norm of a field given on `grid.domain_nodes()`.
pub fn domain_l2_norm(field: &[f64], grid: &StructuredGrid) -> f64 {
    grid.domain_nodes()
        .iter()
        .zip(field)
        .map(|(&n, f)| grid.weights()[n] * f * f)
        .sum::<f64>()
        .sqrt()
}
