//! Damped Sine-Gordon wave equation on the perforated domain with dynamical
//! boundary conditions on the hole surfaces.
//!
//! Unknowns: `u, v` on the fluid nodes (outer-boundary nodes are eliminated,
//! so the Dirichlet condition holds exactly) and `delta, theta` on the
//! hole-boundary degrees of freedom. The discrete Laplacian is written in
//! summation-by-parts form
//!
//! ```text
//! L u = W^{-1} (-K u + T^T S theta)
//! ```
//!
//! with `K` the fluid stiffness matrix, `W` the lumped mass, `T` the trace
//! (dof -> node) and `S` the surface weights. This is the ghost-node closure
//! with Neumann flux `du/dn = theta`, and it makes the discrete energy balance
//! mirror the continuous one term by term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_perforated_domain, AxisBox, BoundaryDofMap, NodeClass, PerforatedDomainSpec,
    StructuredGrid, UnitCellSpec, MAX_DIM,
};
use crate::linalg::{assemble_stiffness, pcg, CgOptions, CgOutcome, CsrMatrix};
use crate::noise::{trace, CovarianceSpec, NodalBasis, SineBasis, StreamId, WienerSampler};

const BLOW_UP: f64 = 1e12;

/// Linear operators of one wave problem: stiffness, lumped mass and the
/// boundary coupling. Shared read-only by all paths.
#[derive(Debug, Clone)]
pub struct WaveSystem {
    domain: PerforatedDomainSpec,
    grid: StructuredGrid,
    dofs: BoundaryDofMap,
    eps: f64,
    stiffness: CsrMatrix,
    weights: Vec<f64>,
    outer_weight: f64,
    trace: Vec<usize>,
    surface: Vec<f64>,
    boundary_diag: Vec<f64>,
}

impl WaveSystem {
    /// Micro problem on `D^eps` with the identity diffusion tensor.
    pub fn perforated(outer: &AxisBox, eps: f64, cell: &UnitCellSpec, h: f64) -> Result<Self> {
        let (domain, grid, dofs) = build_perforated_domain(outer, eps, cell, h)?;
        let d = grid.dim();
        let identity: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let stiffness = assemble_stiffness(&grid, &identity);
        Ok(Self::from_parts(domain, grid, dofs, eps, stiffness))
    }

    pub(crate) fn from_parts(
        domain: PerforatedDomainSpec,
        grid: StructuredGrid,
        dofs: BoundaryDofMap,
        eps: f64,
        stiffness: CsrMatrix,
    ) -> Self {
        let weights = grid.unknown_weights();
        let outer_weight = grid
            .domain_nodes()
            .iter()
            .filter(|&&n| grid.class(n) == NodeClass::OuterBoundary)
            .map(|&n| grid.weights()[n])
            .sum();
        let trace: Vec<usize> = dofs
            .dofs()
            .iter()
            .map(|b| {
                grid.unknown_index(b.node)
                    .expect("hole-boundary node is an unknown")
            })
            .collect();
        let surface = dofs.weights();
        let mut boundary_diag = vec![0.0; weights.len()];
        for (&i, &s) in trace.iter().zip(&surface) {
            boundary_diag[i] += s;
        }
        WaveSystem {
            domain,
            grid,
            dofs,
            eps,
            stiffness,
            weights,
            outer_weight,
            trace,
            surface,
            boundary_diag,
        }
    }

    pub fn domain(&self) -> &PerforatedDomainSpec {
        &self.domain
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn dofs(&self) -> &BoundaryDofMap {
        &self.dofs
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Lumped mass of the unknown nodes.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn surface_weights(&self) -> &[f64] {
        &self.surface
    }

    pub fn unknowns(&self) -> usize {
        self.weights.len()
    }

    pub fn boundary_len(&self) -> usize {
        self.surface.len()
    }

    /// Unknown index of the node carrying each boundary dof.
    pub fn trace_map(&self) -> &[usize] {
        &self.trace
    }

    /// Evaluates `f` at the unknown nodes.
    pub fn nodal(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        self.grid
            .unknown_nodes()
            .iter()
            .map(|&n| f(&self.grid.coord(n)[..self.grid.dim()]))
            .collect()
    }

    /// Evaluates `f` at the nodes of the boundary dofs.
    pub fn boundary_nodal(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        self.dofs
            .dofs()
            .iter()
            .map(|b| f(&self.grid.coord(b.node)[..self.grid.dim()]))
            .collect()
    }

    /// `n . grad u` at the boundary dofs, with `n` pointing into the hole.
    pub fn normal_derivative(&self, grad: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        self.dofs
            .dofs()
            .iter()
            .map(|b| b.sign * grad(&self.grid.coord(b.node)[..self.grid.dim()])[b.axis])
            .collect()
    }

    pub fn trace_of(&self, u: &[f64]) -> Vec<f64> {
        self.trace.iter().map(|&i| u[i]).collect()
    }

    pub fn volume_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn volume_norm2(&self, a: &[f64]) -> f64 {
        self.volume_dot(a, a)
    }

    pub fn surface_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.surface
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn surface_norm2(&self, a: &[f64]) -> f64 {
        self.surface_dot(a, a)
    }

    /// `<u, delta>` on the hole boundary.
    pub fn trace_dot(&self, u: &[f64], delta: &[f64]) -> f64 {
        self.trace
            .iter()
            .zip(self.surface.iter().zip(delta))
            .map(|(&i, (w, d))| w * u[i] * d)
            .sum()
    }

    pub fn gradient_norm2(&self, u: &[f64]) -> f64 {
        self.stiffness.bilinear(u, u)
    }

    /// `||cos(u/2)||^2` over the closure of the domain; outer-boundary nodes
    /// carry `u = 0`.
    pub fn cos_half_norm2(&self, u: &[f64]) -> f64 {
        self.outer_weight
            + self
                .weights
                .iter()
                .zip(u)
                .map(|(w, x)| {
                    let c = (0.5 * x).cos();
                    w * c * c
                })
                .sum::<f64>()
    }

    /// Discrete Laplacian with Neumann flux `theta` on the hole boundary.
    pub fn laplacian(&self, u: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.mul_vec(u);
        out.iter_mut().for_each(|x| *x = -*x);
        for ((&i, s), th) in self.trace.iter().zip(&self.surface).zip(theta) {
            out[i] += s * th;
        }
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o /= w;
        }
        out
    }

    /// Drift of the first-order system:
    /// `(v, Lu - u - v + sin u, theta, -theta/eps^2 - delta - Tv)`.
    pub fn apply_generator(&self, state: &MicroState) -> MicroState {
        let lap = self.laplacian(&state.u, &state.theta);
        let dv = lap
            .iter()
            .zip(state.u.iter().zip(&state.v))
            .map(|(l, (u, v))| l - u - v + u.sin())
            .collect();
        let inv_eps2 = 1.0 / (self.eps * self.eps);
        let dtheta = self
            .trace
            .iter()
            .zip(state.theta.iter().zip(&state.delta))
            .map(|(&i, (th, de))| -th * inv_eps2 - de - state.v[i])
            .collect();
        MicroState {
            t: state.t,
            u: state.v.clone(),
            v: dv,
            delta: state.theta.clone(),
            theta: dtheta,
        }
    }

    /// Prefactors and matrix of the implicit velocity solve.
    pub fn step_operator(&self, config: &MicroStepperConfig) -> Result<StepOperator> {
        let dt = config.dt;
        let flags = config.implicit;
        let kappa = if flags.boundary {
            1.0 + dt / (self.eps * self.eps) + dt * dt
        } else {
            1.0
        };
        let le = if flags.laplacian { 1.0 } else { 0.0 };
        let ld = if flags.damping { 1.0 } else { 0.0 };
        let lb = if flags.boundary { 1.0 } else { 0.0 };
        let mass_factor = 1.0 + ld * dt + le * dt * dt;
        let shift: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.boundary_diag)
            .map(|(w, b)| mass_factor * w + lb * dt * dt / kappa * b)
            .collect();
        let matrix = self.stiffness.scaled_plus_diagonal(le * dt * dt, &shift);
        let inv_diag = matrix
            .diagonal()
            .iter()
            .map(|&d| {
                if d > 0.0 {
                    Ok(1.0 / d)
                } else {
                    Err(Error::Validation(
                        "implicit system has a non-positive diagonal".into(),
                    ))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(StepOperator {
            dt,
            flags,
            kappa,
            matrix,
            inv_diag,
            cg: config.cg,
        })
    }

    /// One semi-implicit Euler-Maruyama step with prescribed increments.
    ///
    /// `forcing` is a deterministic source for the velocity equation at the
    /// unknown nodes, evaluated by the caller at the new time.
    pub fn step_with(
        &self,
        op: &StepOperator,
        state: &mut MicroState,
        dw1: &[f64],
        dw2: &[f64],
        forcing: Option<&[f64]>,
    ) -> Result<CgOutcome> {
        let dt = op.dt;
        let explicit_damping = if op.flags.damping { 0.0 } else { dt };
        let mut rhs: Vec<f64> = self.stiffness.mul_vec(&state.u);
        for i in 0..rhs.len() {
            let (u, v) = (state.u[i], state.v[i]);
            let mut acc = v - explicit_damping * v + dt * (u.sin() - u) + dw1[i];
            if let Some(g) = forcing {
                acc += dt * g[i];
            }
            rhs[i] = self.weights[i] * acc - dt * rhs[i];
        }
        if op.flags.boundary {
            let c = dt / op.kappa;
            for (j, &i) in self.trace.iter().enumerate() {
                rhs[i] += c * self.surface[j] * (state.theta[j] - dt * state.delta[j] + dw2[j]);
            }
        } else {
            for (j, &i) in self.trace.iter().enumerate() {
                rhs[i] += dt * self.surface[j] * state.theta[j];
            }
        }
        let v_old = state.v.clone();
        let outcome = pcg(&op.matrix, &rhs, &mut state.v, &op.inv_diag, op.cg, false)?;
        for (u, v) in state.u.iter_mut().zip(&state.v) {
            *u += dt * v;
        }
        let inv_eps2 = 1.0 / (self.eps * self.eps);
        for (j, &i) in self.trace.iter().enumerate() {
            let (th, de) = (state.theta[j], state.delta[j]);
            if op.flags.boundary {
                let th_new = (th - dt * de + dw2[j] - dt * state.v[i]) / op.kappa;
                state.theta[j] = th_new;
                state.delta[j] = de + dt * th_new;
            } else {
                state.theta[j] = th + dt * (-th * inv_eps2 - de - v_old[i]) + dw2[j];
                state.delta[j] = de + dt * th;
            }
        }
        state.t += dt;
        Ok(outcome)
    }

    /// Draws the next increments from `noise` and advances one step.
    pub fn step(
        &self,
        op: &StepOperator,
        state: &mut MicroState,
        noise: &mut NoiseDriver<'_>,
        step_index: usize,
    ) -> Result<CgOutcome> {
        let (dw1, dw2) = noise.next(op.dt)?;
        let out = self.step_with(op, state, &dw1, &dw2, None)?;
        state.check_finite(step_index)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplicitFlags {
    pub laplacian: bool,
    pub damping: bool,
    pub boundary: bool,
}

impl Default for ImplicitFlags {
    fn default() -> Self {
        ImplicitFlags {
            laplacian: true,
            damping: true,
            boundary: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordOptions {
    /// Diagnostics (and states, if kept) every `stride` steps.
    pub stride: usize,
    pub states: bool,
    pub noise_log: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions {
            stride: 1,
            states: false,
            noise_log: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroStepperConfig {
    pub dt: f64,
    pub t_end: f64,
    pub implicit: ImplicitFlags,
    pub record: RecordOptions,
    pub cg: CgOptions,
}

impl MicroStepperConfig {
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        let cfg = MicroStepperConfig {
            dt,
            t_end,
            implicit: ImplicitFlags::default(),
            record: RecordOptions::default(),
            cg: CgOptions::default(),
        };
        cfg.steps()?;
        Ok(cfg)
    }

    pub fn with_record(mut self, record: RecordOptions) -> Self {
        self.record = record;
        self
    }

    /// Number of steps `N` with `T = N dt`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(
                "stepper.dt",
                format!("time step must be positive, got {}", self.dt),
            ));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(
                "stepper.t_end",
                format!("horizon must be >= 0, got {}", self.t_end),
            ));
        }
        let n = (self.t_end / self.dt).round();
        if (n * self.dt - self.t_end).abs() > 1e-9 * self.t_end.max(1.0) {
            return Err(Error::config(
                "stepper.dt",
                format!(
                    "horizon {} is not an integer multiple of dt = {}",
                    self.t_end, self.dt
                ),
            ));
        }
        if self.record.stride == 0 {
            return Err(Error::config(
                "stepper.record.stride",
                "stride must be at least 1",
            ));
        }
        Ok(n as usize)
    }
}

/// Assembled implicit system for a fixed time step.
#[derive(Debug, Clone)]
pub struct StepOperator {
    dt: f64,
    flags: ImplicitFlags,
    kappa: f64,
    matrix: CsrMatrix,
    inv_diag: Vec<f64>,
    cg: CgOptions,
}

impl StepOperator {
    pub fn dt(&self) -> f64 {
        self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub delta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl MicroState {
    pub fn zeros(system: &WaveSystem) -> Self {
        MicroState {
            t: 0.0,
            u: vec![0.0; system.unknowns()],
            v: vec![0.0; system.unknowns()],
            delta: vec![0.0; system.boundary_len()],
            theta: vec![0.0; system.boundary_len()],
        }
    }

    pub fn from_fields(
        system: &WaveSystem,
        u: Vec<f64>,
        v: Vec<f64>,
        delta: Vec<f64>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        for (len, want) in [
            (u.len(), system.unknowns()),
            (v.len(), system.unknowns()),
            (delta.len(), system.boundary_len()),
            (theta.len(), system.boundary_len()),
        ] {
            if len != want {
                return Err(Error::ShapeMismatch {
                    expected: want,
                    actual: len,
                });
            }
        }
        Ok(MicroState {
            t: 0.0,
            u,
            v,
            delta,
            theta,
        })
    }

    pub fn negated(&self) -> Self {
        let neg = |x: &Vec<f64>| x.iter().map(|a| -a).collect();
        MicroState {
            t: self.t,
            u: neg(&self.u),
            v: neg(&self.v),
            delta: neg(&self.delta),
            theta: neg(&self.theta),
        }
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        let bad = |x: &f64| !x.is_finite() || x.abs() > BLOW_UP;
        if self.u.iter().any(bad)
            || self.v.iter().any(bad)
            || self.delta.iter().any(bad)
            || self.theta.iter().any(bad)
        {
            return Err(Error::BlowUp { step, time: self.t });
        }
        Ok(())
    }
}

/// State in the shifted variables `v_r = v + r u`, `theta_r = theta + r delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoState {
    pub t: f64,
    pub r: f64,
    pub u: Vec<f64>,
    pub v_r: Vec<f64>,
    pub delta: Vec<f64>,
    pub theta_r: Vec<f64>,
}

pub fn pseudo_transform(state: &MicroState, r: f64) -> PseudoState {
    PseudoState {
        t: state.t,
        r,
        u: state.u.clone(),
        v_r: state
            .v
            .iter()
            .zip(&state.u)
            .map(|(v, u)| v + r * u)
            .collect(),
        delta: state.delta.clone(),
        theta_r: state
            .theta
            .iter()
            .zip(&state.delta)
            .map(|(th, d)| th + r * d)
            .collect(),
    }
}

impl PseudoState {
    pub fn inverse(&self) -> MicroState {
        let r = self.r;
        MicroState {
            t: self.t,
            u: self.u.clone(),
            v: self
                .v_r
                .iter()
                .zip(&self.u)
                .map(|(v, u)| v - r * u)
                .collect(),
            delta: self.delta.clone(),
            theta: self
                .theta_r
                .iter()
                .zip(&self.delta)
                .map(|(th, d)| th - r * d)
                .collect(),
        }
    }
}

/// Seven-term pseudo energy `E_r`.
pub fn pseudo_energy(ps: &PseudoState, system: &WaveSystem) -> f64 {
    let r = ps.r;
    let eps2 = system.eps() * system.eps();
    system.volume_norm2(&ps.v_r)
        + system.gradient_norm2(&ps.u)
        + (1.0 - r + r * r) * system.volume_norm2(&ps.u)
        + system.surface_norm2(&ps.theta_r)
        + (1.0 - r / eps2 + r * r) * system.surface_norm2(&ps.delta)
        + 4.0 * system.cos_half_norm2(&ps.u)
        + 2.0 * r * system.trace_dot(&ps.u, &ps.delta)
}

/// Deterministic part of `dE_r/dt`: cross terms minus dissipation.
pub fn pseudo_energy_rate(ps: &PseudoState, system: &WaveSystem) -> f64 {
    let r = ps.r;
    let eps2 = system.eps() * system.eps();
    let u2 = system.volume_norm2(&ps.u);
    let dissipation = 2.0 * (1.0 - r) * system.volume_norm2(&ps.v_r)
        + 2.0 * r * system.gradient_norm2(&ps.u)
        + 2.0 * r * (1.0 - r + r * r) * u2
        + 2.0 * (1.0 / eps2 - r) * system.surface_norm2(&ps.theta_r)
        + 2.0 * (1.0 - r / eps2 + r * r) * r * system.surface_norm2(&ps.delta);
    let sin_u: Vec<f64> = ps.u.iter().map(|x| x.sin()).collect();
    let cross = 2.0 * r * system.volume_dot(&ps.u, &sin_u)
        + 4.0 * r * system.trace_dot(&ps.u, &ps.theta_r)
        - 4.0 * r * r * system.trace_dot(&ps.u, &ps.delta);
    cross - dissipation
}

/// Squared product-space norm of a (pseudo) state.
pub fn state_norm2(ps: &PseudoState, system: &WaveSystem) -> f64 {
    system.gradient_norm2(&ps.u)
        + system.volume_norm2(&ps.u)
        + system.volume_norm2(&ps.v_r)
        + system.surface_norm2(&ps.delta)
        + system.surface_norm2(&ps.theta_r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoParams {
    pub r: f64,
    pub eps: f64,
}

impl PseudoParams {
    pub fn new(r: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::config(
                "pseudo.r",
                format!("r must lie in [0, 1), got {r}"),
            ));
        }
        Ok(PseudoParams { r, eps })
    }

    /// The five quantities that must be positive for the a priori estimate,
    /// with `c_ti` the trace constant.
    pub fn smallness_terms(&self, c_ti: f64) -> [f64; 5] {
        let r = self.r;
        let c2 = c_ti * c_ti;
        let e2 = self.eps * self.eps;
        [
            1.0 - 2.0 * r,
            1.0 - 3.0 * r * c2,
            1.0 - r - r / e2 + r * r,
            1.0 - 2.0 * r - 6.0 * r * c2 + 2.0 * r * r,
            1.0 - r - r * c2 + r * r,
        ]
    }

    pub fn satisfies_smallness(&self, c_ti: f64) -> bool {
        self.smallness_terms(c_ti).iter().all(|&x| x > 0.0)
    }
}

/// Estimates the trace constant `sup ||u||_{dS} / ||u||_{H1}` over 20 random
/// smooth fields (low sine modes with Gaussian coefficients).
pub fn estimate_trace_constant(system: &WaveSystem, seed: u64) -> f64 {
    if system.boundary_len() == 0 {
        return 0.0;
    }
    let modes = 8;
    let basis = SineBasis::new(&system.domain.outer, modes)
        .tabulate(&system.grid, system.grid.unknown_nodes());
    let spec = CovarianceSpec::explicit(vec![1.0; modes]).expect("valid unit spec");
    let mut sampler = WienerSampler::new(spec, seed, StreamId::new(u32::MAX, 0, 0));
    let mut best: f64 = 0.0;
    for _ in 0..20 {
        let u = basis.synthesize(&sampler.next_coefficients(1.0));
        let h1 = system.gradient_norm2(&u) + system.volume_norm2(&u);
        if h1 > 0.0 {
            let tr = system.surface_norm2(&system.trace_of(&u));
            best = best.max(tr / h1);
        }
    }
    best.sqrt()
}

/// How the Ito correction of the energy identity is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItoTrace {
    /// Traces of the covariances restricted to the discrete fluid and
    /// boundary node sets (what the discrete noise actually injects).
    #[default]
    Discrete,
    /// `Tr Q_1 + Tr Q_2` of the full-space covariances.
    Literal,
}

/// Bases and covariances of the two Wiener processes on one system.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    spec1: CovarianceSpec,
    spec2: CovarianceSpec,
    basis1: NodalBasis,
    basis2: NodalBasis,
}

impl NoiseModel {
    pub fn new(system: &WaveSystem, spec1: CovarianceSpec, spec2: CovarianceSpec) -> Self {
        let outer = &system.domain.outer;
        let basis1 = SineBasis::new(outer, spec1.modes())
            .tabulate(&system.grid, system.grid.unknown_nodes());
        let bnodes: Vec<usize> = system.dofs.dofs().iter().map(|b| b.node).collect();
        let basis2 = SineBasis::new(outer, spec2.modes()).tabulate(&system.grid, &bnodes);
        NoiseModel {
            spec1,
            spec2,
            basis1,
            basis2,
        }
    }

    pub fn silent(system: &WaveSystem) -> Self {
        Self::new(system, CovarianceSpec::zero(1), CovarianceSpec::zero(1))
    }

    pub fn spec1(&self) -> &CovarianceSpec {
        &self.spec1
    }

    pub fn spec2(&self) -> &CovarianceSpec {
        &self.spec2
    }

    pub fn basis1(&self) -> &NodalBasis {
        &self.basis1
    }

    pub fn basis2(&self) -> &NodalBasis {
        &self.basis2
    }

    /// Per-unit-time Ito corrections of the two processes.
    pub fn ito_traces(&self, system: &WaveSystem, mode: ItoTrace) -> (f64, f64) {
        match mode {
            ItoTrace::Literal => (trace(&self.spec1), trace(&self.spec2)),
            ItoTrace::Discrete => (
                self.basis1.weighted_trace(&self.spec1, system.weights()),
                self.basis2
                    .weighted_trace(&self.spec2, system.surface_weights()),
            ),
        }
    }

    /// Increment source for one path. `ensemble` separates independent
    /// families of paths drawn from the same master seed.
    pub fn driver(&self, seed: u64, ensemble: u32, path: u32, record: bool) -> NoiseDriver<'_> {
        NoiseDriver {
            model: self,
            s1: WienerSampler::new(self.spec1.clone(), seed, StreamId::new(ensemble, path, 1)),
            s2: WienerSampler::new(self.spec2.clone(), seed, StreamId::new(ensemble, path, 2)),
            log: record.then(|| NoiseLog::new(self.spec1.modes(), self.spec2.modes())),
        }
    }

    /// Field increments encoded by one logged step.
    pub fn increments_from_log(&self, log: &NoiseLog, step: usize) -> (Vec<f64>, Vec<f64>) {
        let (c1, c2) = log.step(step);
        (self.basis1.synthesize(c1), self.basis2.synthesize(c2))
    }
}

pub struct NoiseDriver<'a> {
    model: &'a NoiseModel,
    s1: WienerSampler,
    s2: WienerSampler,
    log: Option<NoiseLog>,
}

impl NoiseDriver<'_> {
    /// Increments of `W_1` at the unknown nodes and `W_2` at the boundary dofs.
    pub fn next(&mut self, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (dw1, c1) = draw(&mut self.s1, &self.model.basis1, dt)?;
        let (dw2, c2) = draw(&mut self.s2, &self.model.basis2, dt)?;
        if let Some(log) = &mut self.log {
            log.push(&c1, &c2);
        }
        Ok((dw1, dw2))
    }

    pub fn take_log(&mut self) -> Option<NoiseLog> {
        self.log.take()
    }
}

fn draw(s: &mut WienerSampler, basis: &NodalBasis, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.spec().is_zero() {
        return Ok((vec![0.0; basis.len()], vec![0.0; s.spec().modes()]));
    }
    if !(dt > 0.0) {
        return Err(Error::Validation(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let c = s.next_coefficients(dt);
    Ok((basis.synthesize(&c), c))
}

/// Per-step Karhunen-Loeve coefficients of both processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLog {
    pub modes1: usize,
    pub modes2: usize,
    pub coefficients: Vec<f64>,
}

impl NoiseLog {
    pub fn new(modes1: usize, modes2: usize) -> Self {
        NoiseLog {
            modes1,
            modes2,
            coefficients: Vec::new(),
        }
    }

    fn push(&mut self, c1: &[f64], c2: &[f64]) {
        self.coefficients.extend_from_slice(c1);
        self.coefficients.extend_from_slice(c2);
    }

    pub fn steps(&self) -> usize {
        self.coefficients.len() / (self.modes1 + self.modes2)
    }

    pub fn step(&self, n: usize) -> (&[f64], &[f64]) {
        let w = self.modes1 + self.modes2;
        let row = &self.coefficients[n * w..(n + 1) * w];
        row.split_at(self.modes1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    /// `E_0`, the physical energy.
    pub energy: f64,
    pub pseudo_energy: f64,
    /// Squared norm of the pseudo state.
    pub norm2: f64,
    pub u_l2: f64,
}

/// Diagnostics of one state, as stored in a trajectory.
pub fn record_of(state: &MicroState, system: &WaveSystem, r: f64) -> Record {
    let p0 = pseudo_transform(state, 0.0);
    let pr = pseudo_transform(state, r);
    Record {
        t: state.t,
        energy: pseudo_energy(&p0, system),
        pseudo_energy: pseudo_energy(&pr, system),
        norm2: state_norm2(&pr, system),
        u_l2: system.volume_norm2(&state.u).sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub stride: usize,
    pub r: f64,
    pub records: Vec<Record>,
    /// States at the record times, when requested.
    pub states: Vec<MicroState>,
    pub noise: Option<NoiseLog>,
    pub final_state: MicroState,
}

/// Runs one path from `init` to `config.t_end`.
pub fn simulate(
    system: &WaveSystem,
    init: MicroState,
    config: &MicroStepperConfig,
    noise: &mut NoiseDriver<'_>,
    r: f64,
) -> Result<Trajectory> {
    let steps = config.steps()?;
    let op = system.step_operator(config)?;
    let stride = config.record.stride;
    let mut state = init;
    let mut records = vec![record_of(&state, system, r)];
    let mut states = Vec::new();
    if config.record.states {
        states.push(state.clone());
    }
    for n in 0..steps {
        system.step(&op, &mut state, noise, n + 1)?;
        if (n + 1) % stride == 0 || n + 1 == steps {
            records.push(record_of(&state, system, r));
            if config.record.states {
                states.push(state.clone());
            }
        }
    }
    Ok(Trajectory {
        dt: config.dt,
        stride,
        r,
        records,
        states,
        noise: if config.record.noise_log {
            noise.take_log()
        } else {
            None
        },
        final_state: state,
    })
}

fn require_full_record(traj: &Trajectory) -> Result<&NoiseLog> {
    let log = traj.noise.as_ref().ok_or(Error::MissingNoiseLog)?;
    if traj.stride != 1 || traj.states.len() != log.steps() + 1 {
        return Err(Error::Validation(
            "replay needs every state (record stride 1 with states kept)".into(),
        ));
    }
    Ok(log)
}

/// Both sides of the pathwise energy identity at every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentitySeries {
    pub times: Vec<f64>,
    /// `E_r(t) - E_r(0)`.
    pub lhs: Vec<f64>,
    /// Time integral of cross terms minus dissipation.
    pub drift: Vec<f64>,
    /// Ito integrals against the logged increments.
    pub stochastic: Vec<f64>,
    /// `t (Tr Q_1 + Tr Q_2)`.
    pub ito: Vec<f64>,
}

impl IdentitySeries {
    pub fn residual(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|k| self.lhs[k] - self.drift[k] - self.stochastic[k] - self.ito[k])
            .collect()
    }

    /// Residual of the expected identity (stochastic integrals dropped).
    pub fn expected_residual(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|k| self.lhs[k] - self.drift[k] - self.ito[k])
            .collect()
    }
}

pub fn energy_identity_residual(
    system: &WaveSystem,
    traj: &Trajectory,
    model: &NoiseModel,
    r: f64,
    ito: ItoTrace,
) -> Result<IdentitySeries> {
    let log = require_full_record(traj)?;
    let (tr1, tr2) = model.ito_traces(system, ito);
    let pseudo: Vec<PseudoState> = traj.states.iter().map(|s| pseudo_transform(s, r)).collect();
    let e0 = pseudo_energy(&pseudo[0], system);
    let mut rate_prev = pseudo_energy_rate(&pseudo[0], system);
    let mut out = IdentitySeries {
        times: vec![traj.states[0].t],
        lhs: vec![0.0],
        drift: vec![0.0],
        stochastic: vec![0.0],
        ito: vec![0.0],
    };
    let (mut drift, mut stoch) = (0.0, 0.0);
    for n in 0..log.steps() {
        let (dw1, dw2) = model.increments_from_log(log, n);
        stoch += 2.0 * system.volume_dot(&pseudo[n].v_r, &dw1)
            + 2.0 * system.surface_dot(&pseudo[n].theta_r, &dw2);
        let rate = pseudo_energy_rate(&pseudo[n + 1], system);
        drift += 0.5 * traj.dt * (rate_prev + rate);
        rate_prev = rate;
        let t = traj.states[n + 1].t;
        out.times.push(t);
        out.lhs.push(pseudo_energy(&pseudo[n + 1], system) - e0);
        out.drift.push(drift);
        out.stochastic.push(stoch);
        out.ito.push((t - traj.states[0].t) * (tr1 + tr2));
    }
    Ok(out)
}

/// Ensemble mean of the squared pseudo-state norm over time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

pub fn moment_monitor(trajectories: &[Trajectory]) -> Result<MomentSeries> {
    if trajectories.len() < 2 {
        return Err(Error::Validation(
            "moment monitor needs at least two paths".into(),
        ));
    }
    let len = trajectories[0].records.len();
    if trajectories.iter().any(|t| t.records.len() != len) {
        return Err(Error::Validation(
            "paths have different record times".into(),
        ));
    }
    let m = trajectories.len() as f64;
    let mut out = MomentSeries {
        times: trajectories[0].records.iter().map(|r| r.t).collect(),
        mean: Vec::with_capacity(len),
        std_err: Vec::with_capacity(len),
    };
    for k in 0..len {
        let xs: Vec<f64> = trajectories.iter().map(|t| t.records[k].norm2).collect();
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        out.mean.push(mean);
        out.std_err.push((var / m).sqrt());
    }
    Ok(out)
}

/// Smooth test function with compact support in space-time, given analytically.
pub trait TestFunction {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn dt(&self, t: f64, x: &[f64]) -> f64;
    fn dtt(&self, t: f64, x: &[f64]) -> f64;
    /// Closed time interval outside which the function vanishes.
    fn time_support(&self) -> (f64, f64);
    /// Closed box outside which the function vanishes.
    fn space_support(&self) -> AxisBox;
}

/// `amplitude * b(t) * prod_a b(x_a)` with the `C^3` bump
/// `b(s) = (4 s (1 - s))^4` rescaled to each support interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpFunction {
    pub amplitude: f64,
    pub time: (f64, f64),
    pub space: AxisBox,
}

fn bump(s: f64) -> [f64; 3] {
    if s <= 0.0 || s >= 1.0 {
        return [0.0; 3];
    }
    // q = 4 s (1 - s), b = q^4
    let q = 4.0 * s * (1.0 - s);
    let dq = 4.0 - 8.0 * s;
    let ddq = -8.0;
    [
        q.powi(4),
        4.0 * q.powi(3) * dq,
        12.0 * q * q * dq * dq + 4.0 * q.powi(3) * ddq,
    ]
}

impl BumpFunction {
    fn time_part(&self, t: f64) -> [f64; 3] {
        let len = self.time.1 - self.time.0;
        let [b, db, ddb] = bump((t - self.time.0) / len);
        [b, db / len, ddb / (len * len)]
    }

    fn space_part(&self, x: &[f64]) -> f64 {
        (0..self.space.dim())
            .map(|a| bump((x[a] - self.space.lower[a]) / self.space.extent(a))[0])
            .product()
    }
}

impl TestFunction for BumpFunction {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.amplitude * self.time_part(t)[0] * self.space_part(x)
    }

    fn dt(&self, t: f64, x: &[f64]) -> f64 {
        self.amplitude * self.time_part(t)[1] * self.space_part(x)
    }

    fn dtt(&self, t: f64, x: &[f64]) -> f64 {
        self.amplitude * self.time_part(t)[2] * self.space_part(x)
    }

    fn time_support(&self) -> (f64, f64) {
        self.time
    }

    fn space_support(&self) -> AxisBox {
        self.space.clone()
    }
}

fn boxes_meet(a: &AxisBox, b: &AxisBox) -> bool {
    (0..a.dim()).all(|k| a.lower[k] <= b.upper[k] && b.lower[k] <= a.upper[k])
}

/// Signed sum of the terms of the variational formulation with time
/// derivatives moved onto `phi`, evaluated on a recorded trajectory.
pub fn weak_residual(
    system: &WaveSystem,
    traj: &Trajectory,
    model: &NoiseModel,
    phi: &dyn TestFunction,
) -> Result<f64> {
    let log = require_full_record(traj)?;
    let support = phi.space_support();
    let outer = &system.domain.outer;
    let d = outer.dim();
    if support.dim() != d {
        return Err(Error::Validation(
            "test function has the wrong dimension".into(),
        ));
    }
    if (0..d).any(|a| support.lower[a] <= outer.lower[a] || support.upper[a] >= outer.upper[a]) {
        return Err(Error::Validation(
            "test function support touches the outer boundary".into(),
        ));
    }
    if system
        .domain
        .holes
        .iter()
        .any(|hole| boxes_meet(hole, &support))
    {
        return Err(Error::Validation(
            "test function support intersects a hole".into(),
        ));
    }
    let (t0, t1) = phi.time_support();
    let t_end = traj.states.last().map_or(0.0, |s| s.t);
    if t0 < traj.states[0].t || t1 > t_end {
        return Err(Error::Validation(
            "test function time support exceeds the trajectory".into(),
        ));
    }
    let eps2 = system.eps() * system.eps();
    let dt = traj.dt;
    let mut total = 0.0;
    let mut xs: Vec<[f64; MAX_DIM]> = Vec::new();
    for &n in system.grid.unknown_nodes() {
        xs.push(system.grid.coord(n));
    }
    let bx: Vec<[f64; MAX_DIM]> = system
        .dofs
        .dofs()
        .iter()
        .map(|b| system.grid.coord(b.node))
        .collect();
    for (n, s) in traj.states.iter().enumerate().take(log.steps()) {
        let t = s.t;
        let p: Vec<f64> = xs.iter().map(|x| phi.value(t, x)).collect();
        let pt: Vec<f64> = xs.iter().map(|x| phi.dt(t, x)).collect();
        let ptt: Vec<f64> = xs.iter().map(|x| phi.dtt(t, x)).collect();
        let q: Vec<f64> = bx.iter().map(|x| phi.value(t, x)).collect();
        let qt: Vec<f64> = bx.iter().map(|x| phi.dt(t, x)).collect();
        let qtt: Vec<f64> = bx.iter().map(|x| phi.dtt(t, x)).collect();
        let sin_u: Vec<f64> = s.u.iter().map(|x| x.sin()).collect();
        let tu = system.trace_of(&s.u);
        let volume = system.volume_dot(&s.u, &ptt) - system.volume_dot(&s.u, &pt)
            + system.stiffness.bilinear(&s.u, &p)
            + system.volume_dot(&s.u, &p)
            - system.volume_dot(&sin_u, &p);
        let surface = eps2 * system.surface_dot(&s.delta, &qtt)
            + eps2 * system.surface_dot(&s.delta, &q)
            - eps2 * system.surface_dot(&tu, &qt);
        let (dw1, dw2) = model.increments_from_log(log, n);
        let forcing = system.volume_dot(&p, &dw1) + eps2 * system.surface_dot(&q, &dw2);
        total += dt * (volume + surface) - forcing;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn perforated(h: f64) -> WaveSystem {
        let hole = AxisBox::new(vec![0.25, 0.25], vec![0.75, 0.75]).unwrap();
        let cell = UnitCellSpec::unit_square(Some(hole)).unwrap();
        WaveSystem::perforated(&AxisBox::unit(2), 0.25, &cell, h).unwrap()
    }

    fn plain(h: f64) -> WaveSystem {
        let cell = UnitCellSpec::unit_square(None).unwrap();
        WaveSystem::perforated(&AxisBox::unit(2), 0.5, &cell, h).unwrap()
    }

    fn smooth_u(x: &[f64]) -> (f64, [f64; 2]) {
        let (s0, c0) = (PI * x[0]).sin_cos();
        let (s1, c1) = (2.0 * PI * x[1]).sin_cos();
        (0.3 * s0 * s1, [0.3 * PI * c0 * s1, 0.6 * PI * s0 * c1])
    }

    /// Smooth data whose boundary velocity matches the normal derivative of `u`.
    fn generic_state(sys: &WaveSystem) -> MicroState {
        let u = sys.nodal(|x| smooth_u(x).0);
        let v = sys.nodal(|x| 0.2 * (PI * x[0]).sin() * (PI * x[1]).sin());
        let delta = sys.boundary_nodal(|x| 0.1 * x[0]);
        let theta = sys
            .dofs()
            .dofs()
            .iter()
            .map(|b| {
                let x = sys.grid().coord(b.node);
                b.sign * smooth_u(&x).1[b.axis]
            })
            .collect();
        MicroState::from_fields(sys, u, v, delta, theta).unwrap()
    }

    #[test]
    fn zero_state_has_zero_drift() {
        let sys = perforated(1.0 / 32.0);
        let d = sys.apply_generator(&MicroState::zeros(&sys));
        assert!(d
            .u
            .iter()
            .chain(&d.v)
            .chain(&d.delta)
            .chain(&d.theta)
            .all(|&x| x == 0.0));
    }

    #[test]
    fn constant_field_drift_away_from_boundaries() {
        let sys = plain(1.0 / 16.0);
        let mut s = MicroState::zeros(&sys);
        s.u.iter_mut().for_each(|x| *x = PI / 2.0);
        let d = sys.apply_generator(&s);
        let node = sys.grid().node_id([8, 8, 0]);
        let i = sys.grid().unknown_index(node).unwrap();
        assert_eq!(d.u[i], 0.0);
        assert_relative_eq!(d.v[i], 1.0 - PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_is_second_order_on_smooth_field() {
        let mut errs = Vec::new();
        for h in [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
            let sys = plain(h);
            let u = sys.nodal(|x| (PI * x[0]).sin() * (PI * x[1]).sin());
            let lap = sys.laplacian(&u, &[]);
            let err = lap
                .iter()
                .zip(&u)
                .map(|(l, u)| (l + 2.0 * PI * PI * u).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        let order = (errs[1] / errs[2]).log2();
        assert!(order > 1.9, "observed order {order}, errors {errs:?}");
    }

    #[test]
    fn summation_by_parts_pairs_flux_with_trace() {
        let sys = perforated(1.0 / 32.0);
        let s = generic_state(&sys);
        let lap = sys.laplacian(&s.u, &s.theta);
        let lhs = sys.volume_dot(&s.v, &lap);
        let rhs =
            -sys.stiffness().bilinear(&s.v, &s.u) + sys.surface_dot(&sys.trace_of(&s.v), &s.theta);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let sys = perforated(1.0 / 32.0);
        let cfg = MicroStepperConfig::new(1.0 / 32.0, 0.5).unwrap();
        let model = NoiseModel::silent(&sys);
        let traj = simulate(
            &sys,
            MicroState::zeros(&sys),
            &cfg,
            &mut model.driver(1, 0, 0, false),
            0.0,
        )
        .unwrap();
        let f = &traj.final_state;
        assert!(f
            .u
            .iter()
            .chain(&f.v)
            .chain(&f.delta)
            .chain(&f.theta)
            .all(|&x| x == 0.0));
        assert_relative_eq!(
            traj.records[0].energy,
            4.0 * sys.grid().fluid_measure(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn step_commutes_with_sign_flip() {
        let sys = perforated(1.0 / 32.0);
        let cfg = MicroStepperConfig::new(1.0 / 64.0, 1.0 / 64.0).unwrap();
        let op = sys.step_operator(&cfg).unwrap();
        let mut a = generic_state(&sys);
        let mut b = a.negated();
        let z1 = vec![0.0; sys.unknowns()];
        let z2 = vec![0.0; sys.boundary_len()];
        sys.step_with(&op, &mut a, &z1, &z2, None).unwrap();
        sys.step_with(&op, &mut b, &z1, &z2, None).unwrap();
        assert_eq!(a.negated(), b);
    }

    #[test]
    fn pseudo_transform_examples() {
        let sys = perforated(1.0 / 32.0);
        let s = generic_state(&sys);
        let p0 = pseudo_transform(&s, 0.0);
        assert_eq!(p0.v_r, s.v);
        assert_eq!(p0.theta_r, s.theta);
        let mut c = MicroState::zeros(&sys);
        c.u.iter_mut().for_each(|x| *x = 1.0);
        c.v.iter_mut().for_each(|x| *x = 2.0);
        assert!(pseudo_transform(&c, 0.5).v_r.iter().all(|&x| x == 2.5));
        let back = pseudo_transform(&s, 0.5).inverse();
        for (a, b) in back.v.iter().zip(&s.v) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn pseudo_energy_at_zero_state_counts_domain_measure() {
        let sys = perforated(1.0 / 32.0);
        let z = MicroState::zeros(&sys);
        for r in [0.0, 0.01, 0.5] {
            let e = pseudo_energy(&pseudo_transform(&z, r), &sys);
            assert_relative_eq!(e, 4.0 * sys.domain().fluid_measure(), epsilon = 1e-12);
        }
    }

    #[test]
    fn pseudo_energy_r0_is_plain_energy() {
        let sys = perforated(1.0 / 32.0);
        let s = generic_state(&sys);
        let e = pseudo_energy(&pseudo_transform(&s, 0.0), &sys);
        let direct = sys.volume_norm2(&s.v)
            + sys.gradient_norm2(&s.u)
            + sys.volume_norm2(&s.u)
            + sys.surface_norm2(&s.theta)
            + sys.surface_norm2(&s.delta)
            + 4.0 * sys.cos_half_norm2(&s.u);
        assert_relative_eq!(e, direct, epsilon = 1e-12);
    }

    #[test]
    fn delta_coefficient_is_kept_negative_when_r_exceeds_eps_squared() {
        let sys = perforated(1.0 / 32.0);
        let mut s = MicroState::zeros(&sys);
        s.delta.iter_mut().for_each(|x| *x = 1.0);
        let r = 0.5;
        let e = pseudo_energy(&pseudo_transform(&s, r), &sys);
        let bnorm = sys.surface_norm2(&s.delta);
        // theta_r = r delta contributes r^2 |delta|^2
        let expect =
            4.0 * sys.domain().fluid_measure() + (r * r + 1.0 - r / 0.0625 + r * r) * bnorm;
        assert_relative_eq!(e, expect, epsilon = 1e-10);
        assert!(e < 4.0 * sys.domain().fluid_measure());
    }

    #[test]
    fn identity_needs_noise_log() {
        let sys = perforated(1.0 / 16.0);
        let cfg = MicroStepperConfig::new(0.125, 0.25).unwrap();
        let model = NoiseModel::silent(&sys);
        let traj = simulate(
            &sys,
            MicroState::zeros(&sys),
            &cfg,
            &mut model.driver(0, 0, 0, false),
            0.0,
        )
        .unwrap();
        let err =
            energy_identity_residual(&sys, &traj, &model, 0.0, ItoTrace::Discrete).unwrap_err();
        assert!(matches!(err, Error::MissingNoiseLog));
    }

    #[test]
    fn identity_residual_vanishes_at_rest() {
        let sys = perforated(1.0 / 16.0);
        let cfg = MicroStepperConfig::new(0.125, 0.5)
            .unwrap()
            .with_record(RecordOptions {
                stride: 1,
                states: true,
                noise_log: true,
            });
        let model = NoiseModel::silent(&sys);
        let mut drv = model.driver(0, 0, 0, true);
        let traj = simulate(&sys, MicroState::zeros(&sys), &cfg, &mut drv, 0.01).unwrap();
        let id = energy_identity_residual(&sys, &traj, &model, 0.01, ItoTrace::Discrete).unwrap();
        assert!(id.residual().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_identity_residual_shrinks_with_dt() {
        let sys = perforated(1.0 / 32.0);
        let model = NoiseModel::silent(&sys);
        for r in [0.0, 0.03] {
            let mut res = Vec::new();
            for k in [5, 6, 7] {
                let dt = 0.5f64.powi(k);
                let cfg = MicroStepperConfig::new(dt, 0.5)
                    .unwrap()
                    .with_record(RecordOptions {
                        stride: 1,
                        states: true,
                        noise_log: true,
                    });
                let traj = simulate(
                    &sys,
                    generic_state(&sys),
                    &cfg,
                    &mut model.driver(0, 0, 0, true),
                    r,
                )
                .unwrap();
                let id =
                    energy_identity_residual(&sys, &traj, &model, r, ItoTrace::Discrete).unwrap();
                res.push(id.residual().last().unwrap().abs());
            }
            let order = (res[1] / res[2]).log2();
            assert!(order > 0.9, "r = {r}: residuals {res:?}");
        }
    }

    #[test]
    fn trace_constant_is_positive_and_smallness_checks() {
        let sys = perforated(1.0 / 32.0);
        let c = estimate_trace_constant(&sys, 3);
        assert!(c > 0.0 && c.is_finite());
        let ok = PseudoParams::new(0.25 * 0.25 / 2.0, 0.25).unwrap();
        let bad = PseudoParams::new(0.5, 0.25).unwrap();
        assert!(!bad.satisfies_smallness(c));
        assert!(ok.smallness_terms(0.0)[2] > 0.0);
        assert!(PseudoParams::new(1.0, 0.25).is_err());
    }

    #[test]
    fn explicit_and_implicit_boundaries_agree_for_small_steps() {
        let sys = perforated(1.0 / 16.0);
        let model = NoiseModel::silent(&sys);
        let mut ends = Vec::new();
        for implicit in [true, false] {
            let mut cfg = MicroStepperConfig::new(1.0 / 4096.0, 0.125).unwrap();
            cfg.implicit.boundary = implicit;
            let t = simulate(
                &sys,
                generic_state(&sys),
                &cfg,
                &mut model.driver(0, 0, 0, false),
                0.0,
            )
            .unwrap();
            ends.push(t.final_state);
        }
        let diff: Vec<f64> = ends[0]
            .u
            .iter()
            .zip(&ends[1].u)
            .map(|(a, b)| a - b)
            .collect();
        assert!(sys.volume_norm2(&diff).sqrt() < 1e-3 * sys.volume_norm2(&ends[0].u).sqrt());
    }

    #[test]
    fn weak_residual_rejects_bad_support_and_vanishes_for_zero_phi() {
        let sys = perforated(1.0 / 32.0);
        let model = NoiseModel::silent(&sys);
        let cfg = MicroStepperConfig::new(1.0 / 32.0, 0.5)
            .unwrap()
            .with_record(RecordOptions {
                stride: 1,
                states: true,
                noise_log: true,
            });
        let traj = simulate(
            &sys,
            generic_state(&sys),
            &cfg,
            &mut model.driver(0, 0, 0, true),
            0.0,
        )
        .unwrap();
        let good = AxisBox::new(vec![0.19, 0.1], vec![0.31, 0.9]).unwrap();
        let zero = BumpFunction {
            amplitude: 0.0,
            time: (0.1, 0.4),
            space: good.clone(),
        };
        assert_eq!(weak_residual(&sys, &traj, &model, &zero).unwrap(), 0.0);
        let hits = BumpFunction {
            amplitude: 1.0,
            time: (0.1, 0.4),
            space: AxisBox::new(vec![0.1, 0.1], vec![0.3, 0.3]).unwrap(),
        };
        assert!(weak_residual(&sys, &traj, &model, &hits).is_err());
        let edge = BumpFunction {
            amplitude: 1.0,
            time: (0.1, 0.4),
            space: AxisBox::new(vec![0.0, 0.1], vec![0.1, 0.9]).unwrap(),
        };
        assert!(weak_residual(&sys, &traj, &model, &edge).is_err());
        let rest = simulate(
            &sys,
            MicroState::zeros(&sys),
            &cfg,
            &mut model.driver(0, 0, 0, true),
            0.0,
        )
        .unwrap();
        let phi = BumpFunction {
            amplitude: 1.0,
            time: (0.1, 0.4),
            space: good,
        };
        assert_eq!(weak_residual(&sys, &rest, &model, &phi).unwrap(), 0.0);
    }
}
