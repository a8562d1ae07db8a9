//! Stochastic Sine-Gordon waves with random dynamical boundary conditions on
//! periodically perforated domains, their homogenized limit, and a Monte
//! Carlo lab comparing the two.

pub mod cell;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lab;
pub mod linalg;
pub mod macroscale;
pub mod micro;
pub mod noise;

pub use cell::{effective_tensor, solve_cell_problem, EffectiveTensor, TensorVariant};
pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};
pub use geometry::{AxisBox, PerforatedDomainSpec, StructuredGrid, UnitCellSpec};
pub use lab::{run_study, DistanceReport, EnsembleSpec};
pub use macroscale::{MacroState, MacroSystem};
pub use micro::{simulate, MicroState, MicroStepperConfig, NoiseModel, Trajectory, WaveSystem};
pub use noise::CovarianceSpec;
