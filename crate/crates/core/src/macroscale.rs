//! Homogenized wave equation on the full box:
//! `V_tt + V_t - div(A* grad V) / nu + V - sin V = nu dW_1/dt + g`.
//!
//! The discretization is the micro scheme on a hole-free grid with the
//! stiffness matrix assembled from `A* / nu`, so micro/macro differences come
//! from the geometry alone.

use serde::{Deserialize, Serialize};

use crate::cell::EffectiveTensor;
use crate::error::{Error, Result};
use crate::geometry::{build_perforated_domain, AxisBox, UnitCellSpec};
use crate::linalg::{assemble_stiffness, CgOutcome};
use crate::micro::{
    pseudo_energy, pseudo_transform, MicroState, MicroStepperConfig, NoiseDriver, NoiseModel,
    StepOperator, WaveSystem,
};
use crate::noise::CovarianceSpec;

#[derive(Debug, Clone)]
pub struct MacroSystem {
    wave: WaveSystem,
    tensor: EffectiveTensor,
}

impl MacroSystem {
    pub fn new(outer: &AxisBox, h: f64, tensor: &EffectiveTensor) -> Result<Self> {
        tensor.validate()?;
        let d = outer.dim();
        if tensor.dim() != d {
            return Err(Error::Validation(format!(
                "tensor is {}x{} but the domain has dimension {d}",
                tensor.dim(),
                tensor.dim()
            )));
        }
        let cell = UnitCellSpec::new(vec![1.0; d], None)?;
        let (domain, grid, dofs) = build_perforated_domain(outer, 0.5, &cell, h)?;
        let nu = tensor.porosity;
        let scaled: Vec<Vec<f64>> = tensor
            .matrix
            .iter()
            .map(|row| row.iter().map(|a| a / nu).collect())
            .collect();
        let stiffness = assemble_stiffness(&grid, &scaled);
        Ok(MacroSystem {
            wave: WaveSystem::from_parts(domain, grid, dofs, 0.5, stiffness),
            tensor: tensor.clone(),
        })
    }

    pub fn wave(&self) -> &WaveSystem {
        &self.wave
    }

    pub fn tensor(&self) -> &EffectiveTensor {
        &self.tensor
    }

    pub fn porosity(&self) -> f64 {
        self.tensor.porosity
    }

    /// Noise model of `nu W_1` with the same eigenfunctions and streams as the
    /// micro `W_1`.
    pub fn noise_model(&self, spec1: &CovarianceSpec) -> NoiseModel {
        NoiseModel::new(
            &self.wave,
            spec1.scaled(self.porosity()),
            CovarianceSpec::zero(1),
        )
    }

    /// `||V_t||^2 + <A* grad V, grad V>/nu + ||V||^2 + 4 ||cos(V/2)||^2`.
    pub fn energy(&self, state: &MacroState) -> f64 {
        let ms = MicroState {
            t: state.t,
            u: state.value.clone(),
            v: state.rate.clone(),
            delta: Vec::new(),
            theta: Vec::new(),
        };
        pseudo_energy(&pseudo_transform(&ms, 0.0), &self.wave)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub t: f64,
    /// `V` at the unknown nodes.
    pub value: Vec<f64>,
    /// `V_t` at the unknown nodes.
    pub rate: Vec<f64>,
}

impl MacroState {
    pub fn zeros(system: &MacroSystem) -> Self {
        let n = system.wave.unknowns();
        MacroState {
            t: 0.0,
            value: vec![0.0; n],
            rate: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialScaling {
    /// `V(0) = u_0 / nu`, `V_t(0) = v_0 / nu`.
    #[default]
    PaperLiteral,
    /// `V(0) = nu u_0`, `V_t(0) = nu v_0`.
    DerivedConsistent,
}

pub fn initialize_macro(
    u0: &[f64],
    v0: &[f64],
    nu: f64,
    scaling: InitialScaling,
) -> Result<MacroState> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Validation(format!(
            "porosity must lie in (0, 1], got {nu}"
        )));
    }
    if u0.len() != v0.len() {
        return Err(Error::ShapeMismatch {
            expected: u0.len(),
            actual: v0.len(),
        });
    }
    let f = match scaling {
        InitialScaling::PaperLiteral => 1.0 / nu,
        InitialScaling::DerivedConsistent => nu,
    };
    Ok(MacroState {
        t: 0.0,
        value: u0.iter().map(|x| x * f).collect(),
        rate: v0.iter().map(|x| x * f).collect(),
    })
}

/// Deterministic source `g(t, x)`.
pub type Forcing<'a> = &'a dyn Fn(f64, &[f64]) -> f64;

/// One step of the homogenized equation; `forcing` is evaluated at the new time.
pub fn macro_step(
    system: &MacroSystem,
    op: &StepOperator,
    state: &mut MacroState,
    noise: &mut NoiseDriver<'_>,
    forcing: Option<Forcing<'_>>,
) -> Result<CgOutcome> {
    let (dw1, _) = noise.next(op.dt())?;
    let g = forcing.map(|f| system.wave.nodal(|x| f(state.t + op.dt(), x)));
    let mut ms = MicroState {
        t: state.t,
        u: std::mem::take(&mut state.value),
        v: std::mem::take(&mut state.rate),
        delta: Vec::new(),
        theta: Vec::new(),
    };
    let out = system.wave.step_with(op, &mut ms, &dw1, &[], g.as_deref());
    state.t = ms.t;
    state.value = ms.u;
    state.rate = ms.v;
    out
}

/// Runs `init` to `config.t_end`, calling `observe` after every step
/// (and once on the initial state).
pub fn run_macro(
    system: &MacroSystem,
    init: MacroState,
    config: &MicroStepperConfig,
    noise: &mut NoiseDriver<'_>,
    forcing: Option<Forcing<'_>>,
    mut observe: impl FnMut(&MacroState),
) -> Result<MacroState> {
    let steps = config.steps()?;
    let op = system.wave.step_operator(config)?;
    let mut state = init;
    observe(&state);
    for n in 0..steps {
        macro_step(system, &op, &mut state, noise, forcing)?;
        if state
            .value
            .iter()
            .chain(&state.rate)
            .any(|x| !x.is_finite() || x.abs() > 1e12)
        {
            return Err(Error::BlowUp {
                step: n + 1,
                time: state.t,
            });
        }
        observe(&state);
    }
    Ok(state)
}

/// `V*(t, x) = e^{-t} prod_a sin(pi x_a)` on the unit box and the forcing that
/// makes it an exact solution of the noise-free homogenized equation.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedSolution {
    pub tensor: Vec<Vec<f64>>,
    pub porosity: f64,
}

impl ManufacturedSolution {
    pub fn new(tensor: &EffectiveTensor) -> Self {
        ManufacturedSolution {
            tensor: tensor.matrix.clone(),
            porosity: tensor.porosity,
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (-t).exp()
            * x.iter()
                .map(|xi| (std::f64::consts::PI * xi).sin())
                .product::<f64>()
    }

    pub fn rate(&self, t: f64, x: &[f64]) -> f64 {
        -self.value(t, x)
    }

    pub fn forcing(&self, t: f64, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        let d = x.len();
        let v = self.value(t, x);
        let sines: Vec<f64> = x.iter().map(|xi| (PI * xi).sin()).collect();
        let cosines: Vec<f64> = x.iter().map(|xi| (PI * xi).cos()).collect();
        // -div(A grad V)
        let mut div = 0.0;
        for a in 0..d {
            div += self.tensor[a][a] * PI * PI * v;
            for b in 0..d {
                if a != b {
                    let others: f64 = (0..d)
                        .filter(|&k| k != a && k != b)
                        .map(|k| sines[k])
                        .product();
                    div -=
                        self.tensor[a][b] * PI * PI * (-t).exp() * cosines[a] * cosines[b] * others;
                }
            }
        }
        // V_tt + V_t = V - V = 0
        div / self.porosity + v - v.sin()
    }
}
