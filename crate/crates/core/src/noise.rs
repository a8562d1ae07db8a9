//! Trace-class Q-Wiener processes through truncated Karhunen-Loeve expansions.
//!
//! The eigenfunctions are the L2-normalized Dirichlet sine modes of the outer
//! box. Standard normals come from a counter-based generator: the ChaCha
//! keystream of `(seed, stream)` is addressed directly at the word offset of
//! `(step, mode)`, so any increment can be regenerated without replaying the
//! stream and independent paths share no state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AxisBox, StructuredGrid, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    eigenvalues: Vec<f64>,
}

impl CovarianceSpec {
    /// `alpha_i = c * i^(-gamma)` for `i = 1..=modes`.
    pub fn power_law(c: f64, gamma: f64, modes: usize) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Validation(format!(
                "eigenvalue scale c must be >= 0, got {c}"
            )));
        }
        if !(gamma > 1.0) {
            return Err(Error::Validation(format!(
                "eigenvalue decay gamma must exceed 1, got {gamma}"
            )));
        }
        if modes == 0 {
            return Err(Error::Validation(
                "at least one noise mode is required".into(),
            ));
        }
        Ok(CovarianceSpec {
            eigenvalues: (1..=modes).map(|i| c * (i as f64).powf(-gamma)).collect(),
        })
    }

    pub fn explicit(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Validation(
                "at least one noise mode is required".into(),
            ));
        }
        if let Some(i) = eigenvalues
            .iter()
            .position(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return Err(Error::Validation(format!(
                "eigenvalue {} is negative or not finite",
                i + 1
            )));
        }
        Ok(CovarianceSpec { eigenvalues })
    }

    /// All-zero covariance with `modes` modes (noise switched off).
    pub fn zero(modes: usize) -> Self {
        CovarianceSpec {
            eigenvalues: vec![0.0; modes.max(1)],
        }
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn is_zero(&self) -> bool {
        self.eigenvalues.iter().all(|&a| a == 0.0)
    }

    /// Same eigenfunctions with every eigenvalue multiplied by `factor^2`
    /// (the covariance of `factor * W`).
    pub fn scaled(&self, factor: f64) -> Self {
        CovarianceSpec {
            eigenvalues: self
                .eigenvalues
                .iter()
                .map(|a| a * factor * factor)
                .collect(),
        }
    }
}

/// `Tr Q = sum_i alpha_i` of the truncated covariance.
pub fn trace(spec: &CovarianceSpec) -> f64 {
    spec.eigenvalues.iter().sum()
}

/// Dirichlet sine eigenbasis of an axis-aligned box, ordered by Laplacian
/// eigenvalue (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq)]
pub struct SineBasis {
    outer: AxisBox,
    wavenumbers: Vec<[usize; MAX_DIM]>,
}

impl SineBasis {
    pub fn new(outer: &AxisBox, modes: usize) -> Self {
        let d = outer.dim();
        // enough candidates per axis to contain the `modes` lowest eigenvalues
        let per_axis = modes + 1;
        let mut candidates = Vec::new();
        let total = per_axis.pow(d as u32);
        for flat in 0..total {
            let mut m = [0usize; MAX_DIM];
            let mut rest = flat;
            for slot in m.iter_mut().take(d) {
                *slot = rest % per_axis + 1;
                rest /= per_axis;
            }
            let lambda: f64 = (0..d)
                .map(|a| (m[a] as f64 / outer.extent(a)).powi(2))
                .sum();
            candidates.push((lambda, m));
        }
        candidates.sort_by(|x, y| {
            x.0.partial_cmp(&y.0)
                .unwrap()
                .then_with(|| x.1[..d].cmp(&y.1[..d]))
        });
        SineBasis {
            outer: outer.clone(),
            wavenumbers: candidates.into_iter().take(modes).map(|c| c.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.wavenumbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavenumbers.is_empty()
    }

    pub fn wavenumbers(&self, i: usize) -> &[usize] {
        &self.wavenumbers[i][..self.outer.dim()]
    }

    pub fn eval(&self, i: usize, x: &[f64]) -> f64 {
        let m = &self.wavenumbers[i];
        (0..self.outer.dim())
            .map(|a| {
                let l = self.outer.extent(a);
                (2.0 / l).sqrt()
                    * (m[a] as f64 * std::f64::consts::PI * (x[a] - self.outer.lower[a]) / l).sin()
            })
            .product()
    }

    pub fn gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let m = &self.wavenumbers[i];
        let d = self.outer.dim();
        let factor = |a: usize, diff: bool| {
            let l = self.outer.extent(a);
            let k = m[a] as f64 * std::f64::consts::PI / l;
            let arg = k * (x[a] - self.outer.lower[a]);
            (2.0 / l).sqrt() * if diff { k * arg.cos() } else { arg.sin() }
        };
        (0..d)
            .map(|b| (0..d).map(|a| factor(a, a == b)).product())
            .collect()
    }

    /// Tabulates the basis at the given grid nodes.
    pub fn tabulate(&self, grid: &StructuredGrid, nodes: &[usize]) -> NodalBasis {
        let n = nodes.len();
        let mut values = Vec::with_capacity(self.len() * n);
        for i in 0..self.len() {
            values.extend(nodes.iter().map(|&node| self.eval(i, &grid.coord(node))));
        }
        NodalBasis {
            modes: self.len(),
            len: n,
            values,
        }
    }
}

/// Basis values at a fixed node set, mode-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalBasis {
    modes: usize,
    len: usize,
    values: Vec<f64>,
}

impl NodalBasis {
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    /// `sum_i coeffs[i] * e_i` at the tabulated nodes.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.synthesize_into(coeffs, &mut out);
        out
    }

    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &c) in coeffs.iter().enumerate().take(self.modes) {
            if c == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(self.mode(i)) {
                *o += c * e;
            }
        }
    }

    /// `sum_i alpha_i * sum_j w_j e_i(x_j)^2`: expected squared weighted norm of
    /// a unit-time increment restricted to these nodes.
    pub fn weighted_trace(&self, spec: &CovarianceSpec, weights: &[f64]) -> f64 {
        spec.eigenvalues()
            .iter()
            .enumerate()
            .take(self.modes)
            .map(|(i, a)| {
                a * self
                    .mode(i)
                    .iter()
                    .zip(weights)
                    .map(|(e, w)| w * e * e)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Identifies one scalar Brownian family: ensemble role, path and process (1 or 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub ensemble: u32,
    pub path: u32,
    pub process: u8,
}

impl StreamId {
    pub fn new(ensemble: u32, path: u32, process: u8) -> Self {
        StreamId {
            ensemble,
            path,
            process,
        }
    }

    fn as_u64(self) -> u64 {
        (u64::from(self.ensemble) << 40) | (u64::from(self.path) << 8) | u64::from(self.process)
    }
}

/// Reproducible increment generator for one Q-Wiener process on one path.
#[derive(Debug, Clone)]
pub struct WienerSampler {
    spec: CovarianceSpec,
    seed: u64,
    stream: StreamId,
    step: u64,
    rng: ChaCha8Rng,
}

impl WienerSampler {
    pub fn new(spec: CovarianceSpec, seed: u64, stream: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream.as_u64());
        WienerSampler {
            spec,
            seed,
            stream,
            step: 0,
            rng,
        }
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// Index of the next increment to be drawn.
    pub fn step(&self) -> u64 {
        self.step
    }

    fn words_per_step(&self) -> u128 {
        // Box-Muller pairs, two u64 (four u32 words) per pair
        4 * self.spec.modes().div_ceil(2) as u128
    }

    /// The standard normals `xi_i` of increment `step`, independent of any
    /// previously drawn step.
    pub fn normals_at(&mut self, step: u64) -> Vec<f64> {
        let m = self.spec.modes();
        self.rng
            .set_word_pos(u128::from(step) * self.words_per_step());
        let mut out = Vec::with_capacity(m + 1);
        while out.len() < m {
            let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            out.push(radius * angle.cos());
            out.push(radius * angle.sin());
        }
        out.truncate(m);
        out
    }

    /// Karhunen-Loeve coefficients `sqrt(alpha_i dt) xi_i` of the next increment.
    pub fn next_coefficients(&mut self, dt: f64) -> Vec<f64> {
        let xi = self.normals_at(self.step);
        self.step += 1;
        xi.iter()
            .zip(self.spec.eigenvalues())
            .map(|(x, a)| (a * dt).sqrt() * x)
            .collect()
    }

    /// Next increment `W(t + dt) - W(t)` evaluated at the nodes of `basis`.
    pub fn sample_increment(&mut self, dt: f64, basis: &NodalBasis) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(Error::Validation(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let c = self.next_coefficients(dt);
        Ok(basis.synthesize(&c))
    }
}

/// Which node set a full-grid field is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestrictTarget {
    /// The unknown (interior fluid) nodes.
    FluidNodes,
    /// The hole-boundary degrees of freedom, one value per dof.
    BoundaryDofs,
}

/// Copies the values of a full-grid field at the target nodes.
pub fn restrict(
    field: &[f64],
    grid: &StructuredGrid,
    dofs: &crate::geometry::BoundaryDofMap,
    target: RestrictTarget,
) -> Result<Vec<f64>> {
    if field.len() != grid.node_count() {
        return Err(Error::ShapeMismatch {
            expected: grid.node_count(),
            actual: field.len(),
        });
    }
    Ok(match target {
        RestrictTarget::FluidNodes => grid.unknown_nodes().iter().map(|&n| field[n]).collect(),
        RestrictTarget::BoundaryDofs => dofs.dofs().iter().map(|d| field[d.node]).collect(),
    })
}
