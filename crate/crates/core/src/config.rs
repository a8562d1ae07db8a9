//! TOML run configuration: every section has documented defaults, unknown
//! keys are rejected, and validation reports all problems at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::TensorVariant;
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, UnitCellSpec};
use crate::lab::EnsembleSpec;
use crate::macroscale::InitialScaling;
use crate::micro::{
    ImplicitFlags, ItoTrace, MicroState, MicroStepperConfig, RecordOptions, WaveSystem,
};
use crate::noise::{CovarianceSpec, SineBasis};

pub const FORMAT_VERSION: &str = "1";

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_version")]
    pub format_version: String,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub domain: DomainSection,
    #[serde(default)]
    pub cell: CellSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub noise1: NoiseSection,
    #[serde(default)]
    pub noise2: NoiseSection,
    #[serde(default)]
    pub stepper: StepperSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub pseudo: PseudoSection,
    #[serde(default)]
    pub energy_check: EnergyCheckSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
}

fn default_seed() -> u64 {
    42
}

fn default_version() -> String {
    FORMAT_VERSION.to_string()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            format_version: default_version(),
            output_dir: None,
            domain: DomainSection::default(),
            cell: CellSection::default(),
            grid: GridSection::default(),
            noise1: NoiseSection::default(),
            noise2: NoiseSection::default(),
            stepper: StepperSection::default(),
            initial: InitialSection::default(),
            pseudo: PseudoSection::default(),
            energy_check: EnergyCheckSection::default(),
            ensemble: EnsembleSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    /// `[[lower...], [upper...]]`.
    #[serde(rename = "box")]
    pub bounds: Vec<Vec<f64>>,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            bounds: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        }
    }
}

/// `hole = "none"` or `hole = [[lower...], [upper...]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HoleSpec {
    Keyword(String),
    Corners(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellSection {
    pub l: Vec<f64>,
    pub hole: HoleSpec,
    /// Cell-problem grid spacing.
    pub h: f64,
    /// Spacings of the refinement study reported by `cell`.
    pub refine: Vec<f64>,
    pub variant: TensorVariant,
}

impl Default for CellSection {
    fn default() -> Self {
        CellSection {
            l: vec![1.0, 1.0],
            hole: HoleSpec::Corners(vec![vec![0.25, 0.25], vec![0.75, 0.75]]),
            h: 1.0 / 64.0,
            refine: vec![1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
            variant: TensorVariant::GradientForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub h: f64,
    pub eps: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            h: 1.0 / 64.0,
            eps: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub c: f64,
    pub gamma: f64,
    pub modes: usize,
    /// Overrides the power law when present.
    pub eigenvalues: Option<Vec<f64>>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            c: 0.5,
            gamma: 2.0,
            modes: 16,
            eigenvalues: None,
        }
    }
}

impl NoiseSection {
    pub fn to_spec(&self) -> Result<CovarianceSpec> {
        match &self.eigenvalues {
            Some(list) => CovarianceSpec::explicit(list.clone()),
            None => CovarianceSpec::power_law(self.c, self.gamma, self.modes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepperSection {
    pub dt: f64,
    pub t_end: f64,
    pub implicit: ImplicitFlags,
    pub record_stride: usize,
    /// Write `state_XXXX.bin` at every record time.
    pub snapshots: bool,
    pub noise_log: bool,
}

impl Default for StepperSection {
    fn default() -> Self {
        StepperSection {
            dt: 1.0 / 64.0,
            t_end: 1.0,
            implicit: ImplicitFlags::default(),
            record_stride: 1,
            snapshots: false,
            noise_log: false,
        }
    }
}

/// Initial data: multiples of the first Dirichlet mode for `u` and `v`,
/// constants on the hole boundary. With `theta_compatible`, the normal
/// derivative of `u0` is added to `theta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub u0: f64,
    pub v0: f64,
    pub delta0: f64,
    pub theta0: f64,
    pub theta_compatible: bool,
    pub scaling: InitialScaling,
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection {
            u0: 0.0,
            v0: 0.0,
            delta0: 0.0,
            theta0: 0.0,
            theta_compatible: true,
            scaling: InitialScaling::PaperLiteral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub r: f64,
    pub ito: ItoTrace,
}

impl Default for PseudoSection {
    fn default() -> Self {
        PseudoSection {
            r: 0.0,
            ito: ItoTrace::Discrete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyCheckSection {
    pub dt_list: Vec<f64>,
    /// Pass threshold on `max |residual|` at the finest step.
    pub threshold: f64,
    pub paths: usize,
}

impl Default for EnergyCheckSection {
    fn default() -> Self {
        EnergyCheckSection {
            dt_list: vec![1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
            threshold: 0.05,
            paths: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub eps: Vec<f64>,
    pub paths: usize,
    pub t_end: f64,
    pub cells_per_eps: usize,
    pub dt_ratio: f64,
    pub common_random_numbers: bool,
    pub null_calibration: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            eps: vec![0.25, 0.125, 0.0625],
            paths: 64,
            t_end: 1.0,
            cells_per_eps: 16,
            dt_ratio: 1.0,
            common_random_numbers: false,
            null_calibration: false,
        }
    }
}

/// Reads and validates a TOML file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::config("syntax", e.to_string()))?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::ConfigIssues(issues))
    }
}

fn is_multiple(x: f64, h: f64) -> bool {
    let q = x / h;
    (q - q.round()).abs() <= ALIGN_TOL * q.abs().max(1.0)
}

impl RunConfig {
    pub fn outer_box(&self) -> Result<AxisBox> {
        match self.domain.bounds.as_slice() {
            [lo, hi] => AxisBox::new(lo.clone(), hi.clone()),
            _ => Err(Error::config(
                "domain.box",
                "expected [[lower...], [upper...]]",
            )),
        }
    }

    pub fn cell_spec(&self) -> Result<UnitCellSpec> {
        let hole = match &self.cell.hole {
            HoleSpec::Keyword(k) if k == "none" => None,
            HoleSpec::Keyword(k) => {
                return Err(Error::config(
                    "cell.hole",
                    format!("expected \"none\" or a box, got \"{k}\""),
                ))
            }
            HoleSpec::Corners(c) => match c.as_slice() {
                [lo, hi] => Some(AxisBox::new(lo.clone(), hi.clone())?),
                _ => {
                    return Err(Error::config(
                        "cell.hole",
                        "expected [[lower...], [upper...]]",
                    ))
                }
            },
        };
        UnitCellSpec::new(self.cell.l.clone(), hole)
    }

    pub fn stepper_config(&self) -> Result<MicroStepperConfig> {
        let mut cfg = MicroStepperConfig::new(self.stepper.dt, self.stepper.t_end)?;
        cfg.implicit = self.stepper.implicit;
        cfg.record = RecordOptions {
            stride: self.stepper.record_stride,
            states: self.stepper.snapshots,
            noise_log: self.stepper.noise_log,
        };
        cfg.steps()?;
        Ok(cfg)
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        let spec = EnsembleSpec {
            eps: self.ensemble.eps.clone(),
            paths: self.ensemble.paths,
            t_end: self.ensemble.t_end,
            seed: self.seed,
            outer: self.outer_box()?,
            cells_per_eps: self.ensemble.cells_per_eps,
            dt_ratio: self.ensemble.dt_ratio,
            noise1: self.noise1.to_spec()?,
            noise2: self.noise2.to_spec()?,
            common_random_numbers: self.ensemble.common_random_numbers,
            null_calibration: self.ensemble.null_calibration,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Micro initial state on `system` from the `[initial]` section.
    pub fn initial_state(&self, system: &WaveSystem) -> Result<MicroState> {
        let ini = &self.initial;
        let basis = SineBasis::new(&system.domain().outer, 1);
        let u = system.nodal(|x| ini.u0 * basis.eval(0, x));
        let v = system.nodal(|x| ini.v0 * basis.eval(0, x));
        let delta = vec![ini.delta0; system.boundary_len()];
        let mut theta = vec![ini.theta0; system.boundary_len()];
        if ini.theta_compatible && ini.u0 != 0.0 {
            let dn = system.normal_derivative(|x| basis.gradient(0, x));
            theta.iter_mut().zip(dn).for_each(|(t, g)| *t += ini.u0 * g);
        }
        MicroState::from_fields(system, u, v, delta, theta)
    }

    /// Spacing `h` must put the outer box faces and every hole face of the
    /// `eps`-scaled cell on grid planes.
    fn spacing_issues(&self, field: &str, eps: f64, h: f64, out: &mut Vec<(String, String)>) {
        let Ok(outer) = self.outer_box() else { return };
        let Ok(cell) = self.cell_spec() else { return };
        if !(h > 0.0 && h.is_finite()) {
            out.push((field.into(), format!("spacing must be positive, got {h}")));
            return;
        }
        for a in 0..outer.dim().min(cell.dim()) {
            if !is_multiple(outer.extent(a), h) || !is_multiple(outer.lower[a], h) {
                out.push((
                    field.into(),
                    format!("h = {h} does not divide the domain on axis {a}"),
                ));
                continue;
            }
            if let Some(hole) = cell.hole() {
                let ok = is_multiple(eps * cell.lengths()[a], h)
                    && is_multiple(eps * hole.lower[a], h)
                    && is_multiple(eps * hole.upper[a], h);
                if !ok {
                    out.push((
                        field.into(),
                        format!("h = {h} does not divide eps * l (eps = {eps}) or the hole faces on axis {a}"),
                    ));
                }
            }
        }
    }

    /// All semantic problems, as `(field path, message)`.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |f: &str, m: String| out.push((f.to_string(), m));
        if self.format_version != FORMAT_VERSION {
            push(
                "format_version",
                format!(
                    "unsupported version \"{}\" (expected \"{FORMAT_VERSION}\")",
                    self.format_version
                ),
            );
        }
        let outer = self.outer_box();
        match &outer {
            Err(e) => push("domain.box", e.to_string()),
            Ok(b) if !(2..=3).contains(&b.dim()) => push(
                "domain.box",
                format!("dimension must be 2 or 3, got {}", b.dim()),
            ),
            Ok(_) => {}
        }
        let cell = self.cell_spec();
        match (&cell, &outer) {
            (Err(e), _) => push("cell", e.to_string()),
            (Ok(c), Ok(b)) if c.dim() != b.dim() => push(
                "cell.l",
                format!(
                    "cell has dimension {} but the domain has {}",
                    c.dim(),
                    b.dim()
                ),
            ),
            _ => {}
        }
        if let Ok(c) = &cell {
            for &hc in std::iter::once(&self.cell.h).chain(&self.cell.refine) {
                let aligned = hc > 0.0
                    && (0..c.dim()).all(|a| {
                        is_multiple(c.lengths()[a], hc)
                            && c.hole().is_none_or(|s| {
                                is_multiple(s.lower[a], hc) && is_multiple(s.upper[a], hc)
                            })
                    });
                if !aligned {
                    push(
                        "cell.h",
                        format!("cell spacing {hc} does not resolve the cell and hole faces"),
                    );
                }
            }
        }
        if !matches!(self.cell.refine.len(), 0 | 3) {
            push(
                "cell.refine",
                format!(
                    "expected zero or three spacings, got {}",
                    self.cell.refine.len()
                ),
            );
        }
        if !(self.grid.eps > 0.0 && self.grid.eps < 1.0) {
            push(
                "grid.eps",
                format!("eps must lie in (0, 1), got {}", self.grid.eps),
            );
        }
        for (name, section) in [("noise1", &self.noise1), ("noise2", &self.noise2)] {
            if let Err(e) = section.to_spec() {
                push(name, e.to_string());
            }
        }
        if let Err(e) = self.stepper_config() {
            let field = match &e {
                Error::Config { field, .. } => field.clone(),
                _ => "stepper".into(),
            };
            push(&field, e.to_string());
        }
        if !(0.0..1.0).contains(&self.pseudo.r) {
            push(
                "pseudo.r",
                format!("r must lie in [0, 1), got {}", self.pseudo.r),
            );
        }
        if self.energy_check.dt_list.len() < 2
            || self.energy_check.dt_list.iter().any(|&d| !(d > 0.0))
        {
            push(
                "energy_check.dt_list",
                "need at least two positive time steps".into(),
            );
        }
        if self.energy_check.paths == 0 {
            push("energy_check.paths", "need at least one path".into());
        }
        let ens = &self.ensemble;
        if ens.eps.is_empty() || ens.eps.windows(2).any(|w| w[1] >= w[0]) {
            push(
                "ensemble.eps",
                "eps values must be nonempty and strictly decreasing".into(),
            );
        }
        if ens.eps.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            push("ensemble.eps", "eps values must lie in (0, 1)".into());
        }
        if ens.paths < 30 {
            push(
                "ensemble.paths",
                format!(
                    "distance estimation needs at least 30 paths, got {}",
                    ens.paths
                ),
            );
        }
        if ens.cells_per_eps == 0 {
            push("ensemble.cells_per_eps", "must be positive".into());
        }
        if !(ens.dt_ratio > 0.0) {
            push("ensemble.dt_ratio", "must be positive".into());
        }
        if !(ens.t_end > 0.0) {
            push("ensemble.t_end", "must be positive".into());
        }
        self.spacing_issues("grid.h", self.grid.eps, self.grid.h, &mut out);
        if ens.cells_per_eps > 0 {
            for &e in &ens.eps {
                if e > 0.0 && e < 1.0 {
                    self.spacing_issues(
                        "ensemble.cells_per_eps",
                        e,
                        e / ens.cells_per_eps as f64,
                        &mut out,
                    );
                }
            }
        }
        out
    }

    /// Non-fatal remarks: smallness terms that do not need the trace constant.
    pub fn warnings(&self) -> Vec<String> {
        let r = self.pseudo.r;
        let e2 = self.grid.eps * self.grid.eps;
        let mut w = Vec::new();
        if r > 0.0 && 1.0 - r - r / e2 + r * r <= 0.0 {
            w.push(format!(
                "pseudo.r = {r} violates 1 - r - r/eps^2 + r^2 > 0 for eps = {}",
                self.grid.eps
            ));
        }
        if r > 0.0 && 1.0 - 2.0 * r <= 0.0 {
            w.push(format!("pseudo.r = {r} violates 1 - 2r > 0"));
        }
        w
    }
}
