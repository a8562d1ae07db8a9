//! Matched micro/macro Monte Carlo ensembles and distribution distances of
//! path functionals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::EffectiveTensor;
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, UnitCellSpec};
use crate::macroscale::{run_macro, MacroState, MacroSystem};
use crate::micro::{MicroState, MicroStepperConfig, NoiseModel, WaveSystem};
use crate::noise::{CovarianceSpec, SineBasis};

/// Ensemble ids separating the random streams of the three path families.
const MICRO_ENSEMBLE: u32 = 0;
const MACRO_ENSEMBLE: u32 = 1;
const NULL_ENSEMBLE: u32 = 2;

/// Number of equally spaced times at which ensemble-mean fields are kept.
const MEAN_FIELD_SAMPLES: usize = 16;

/// Paths integrated together before their results are folded in path order.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    pub paths: usize,
    pub t_end: f64,
    pub seed: u64,
    pub outer: AxisBox,
    /// Grid spacing is `eps / cells_per_eps`.
    pub cells_per_eps: usize,
    /// Time step is `dt_ratio * h`.
    pub dt_ratio: f64,
    pub noise1: CovarianceSpec,
    pub noise2: CovarianceSpec,
    /// Share `W_1` streams between micro path `k` and macro path `k`.
    pub common_random_numbers: bool,
    /// Also compare against a second, independent macro ensemble.
    pub null_calibration: bool,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() {
            return Err(Error::config(
                "ensemble.eps",
                "at least one eps value is required",
            ));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config(
                "ensemble.eps",
                "eps values must be strictly decreasing",
            ));
        }
        if self.paths < 2 {
            return Err(Error::config(
                "ensemble.paths",
                "at least two paths are required",
            ));
        }
        if self.cells_per_eps == 0 {
            return Err(Error::config("ensemble.cells_per_eps", "must be positive"));
        }
        if !(self.dt_ratio > 0.0) {
            return Err(Error::config("ensemble.dt_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn h(&self, eps: f64) -> f64 {
        eps / self.cells_per_eps as f64
    }

    pub fn dt(&self, eps: f64) -> f64 {
        self.dt_ratio * self.h(eps)
    }
}

/// Scalar path functionals of a field trajectory `u(t)` on `D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    /// `int_0^T ||u||^2 dt`.
    pub j1: f64,
    /// `<u(T), g>`.
    pub j2: f64,
    /// `int_0^T <u, g> dt`.
    pub j3: f64,
}

impl FunctionalSample {
    pub fn get(&self, k: usize) -> f64 {
        [self.j1, self.j2, self.j3][k]
    }
}

pub const FUNCTIONAL_NAMES: [&str; 3] = ["J1", "J2", "J3"];

/// Running trapezoid accumulation of the functionals plus sparse snapshots
/// of the zero-extended field for the mean-field gap.
struct Accumulator<'a> {
    weights: &'a [f64],
    probe: &'a [f64],
    dt: f64,
    steps: usize,
    step: usize,
    prev: Option<(f64, f64)>,
    j1: f64,
    j3: f64,
    last_gu: f64,
    snapshots: Vec<Vec<f64>>,
}

impl<'a> Accumulator<'a> {
    fn new(weights: &'a [f64], probe: &'a [f64], dt: f64, steps: usize) -> Self {
        Accumulator {
            weights,
            probe,
            dt,
            steps,
            step: 0,
            prev: None,
            j1: 0.0,
            j3: 0.0,
            last_gu: 0.0,
            snapshots: Vec::with_capacity(MEAN_FIELD_SAMPLES + 1),
        }
    }

    fn observe(&mut self, u: &[f64]) {
        let (mut uu, mut gu) = (0.0, 0.0);
        for ((w, x), g) in self.weights.iter().zip(u).zip(self.probe) {
            uu += w * x * x;
            gu += w * x * g;
        }
        if let Some((puu, pgu)) = self.prev {
            self.j1 += 0.5 * self.dt * (puu + uu);
            self.j3 += 0.5 * self.dt * (pgu + gu);
        }
        self.prev = Some((uu, gu));
        self.last_gu = gu;
        if (self.step * MEAN_FIELD_SAMPLES).is_multiple_of(self.steps.max(1)) || self.steps == 0 {
            self.snapshots.push(u.to_vec());
        }
        self.step += 1;
    }

    fn finish(self) -> (FunctionalSample, Vec<Vec<f64>>) {
        (
            FunctionalSample {
                j1: self.j1,
                j2: self.last_gu,
                j3: self.j3,
            },
            self.snapshots,
        )
    }
}

/// One path's functionals and mean-field snapshots, or `None` if it blew up.
type PathResult = Option<(FunctionalSample, Vec<Vec<f64>>)>;

fn micro_path(
    system: &WaveSystem,
    model: &NoiseModel,
    cfg: &MicroStepperConfig,
    probe: &[f64],
    seed: u64,
    ensemble: u32,
    path: u32,
) -> Result<PathResult> {
    let steps = cfg.steps()?;
    let op = system.step_operator(cfg)?;
    let mut driver = model.driver(seed, ensemble, path, false);
    let mut state = MicroState::zeros(system);
    let mut acc = Accumulator::new(system.weights(), probe, cfg.dt, steps);
    acc.observe(&state.u);
    for n in 0..steps {
        match system.step(&op, &mut state, &mut driver, n + 1) {
            Ok(_) => acc.observe(&state.u),
            Err(Error::BlowUp { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(acc.finish()))
}

fn macro_path(
    system: &MacroSystem,
    model: &NoiseModel,
    cfg: &MicroStepperConfig,
    probe: &[f64],
    seed: u64,
    ensemble: u32,
    path: u32,
) -> Result<PathResult> {
    let steps = cfg.steps()?;
    let mut driver = model.driver(seed, ensemble, path, false);
    let mut acc = Accumulator::new(system.wave().weights(), probe, cfg.dt, steps);
    match run_macro(
        system,
        MacroState::zeros(system),
        cfg,
        &mut driver,
        None,
        |s| acc.observe(&s.value),
    ) {
        Ok(_) => Ok(Some(acc.finish())),
        Err(Error::BlowUp { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Functionals of one ensemble plus the ensemble-mean field snapshots, lifted
/// to the full grid.
struct EnsembleOutcome {
    samples: Vec<FunctionalSample>,
    excluded: usize,
    mean_fields: Vec<Vec<f64>>,
}

fn run_ensemble(
    paths: usize,
    nodes: usize,
    scatter: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    run: &(dyn Fn(u32) -> Result<PathResult> + Sync),
) -> Result<EnsembleOutcome> {
    let mut samples = Vec::with_capacity(paths);
    let mut excluded = 0;
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let ids: Vec<u32> = (0..paths as u32).collect();
    for chunk in ids.chunks(CHUNK) {
        let results: Vec<Result<PathResult>> = chunk.par_iter().map(|&p| run(p)).collect();
        for res in results {
            match res? {
                Some((sample, snaps)) => {
                    samples.push(sample);
                    if sums.is_empty() {
                        sums = vec![vec![0.0; nodes]; snaps.len()];
                    }
                    for (acc, snap) in sums.iter_mut().zip(&snaps) {
                        for (a, x) in acc.iter_mut().zip(scatter(snap)) {
                            *a += x;
                        }
                    }
                }
                None => excluded += 1,
            }
        }
    }
    let kept = samples.len().max(1) as f64;
    for s in &mut sums {
        s.iter_mut().for_each(|x| *x /= kept);
    }
    Ok(EnsembleOutcome {
        samples,
        excluded,
        mean_fields: sums,
    })
}

/// V-statistic energy distance
/// `2 E|a - b| - E|a - a'| - E|b - b'|`, computed in `O(n log n)`.
pub fn energy_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation(
            "energy distance needs two nonempty samples".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let cross = mean_abs_cross(&sa, &sb);
    let d = 2.0 * cross - mean_abs_within(&sa) - mean_abs_within(&sb);
    Ok(d.max(0.0))
}

fn mean_abs_within(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let s: f64 = sorted
        .iter()
        .enumerate()
        .map(|(j, x)| x * (2.0 * j as f64 - n + 1.0))
        .sum();
    2.0 * s / (n * n)
}

fn mean_abs_cross(sa: &[f64], sb: &[f64]) -> f64 {
    let total: f64 = sb.iter().sum();
    let mut prefix = 0.0;
    let mut k = 0;
    let mut acc = 0.0;
    let m = sb.len() as f64;
    for &x in sa {
        while k < sb.len() && sb[k] <= x {
            prefix += sb[k];
            k += 1;
        }
        acc += x * k as f64 - prefix + (total - prefix) - x * (m - k as f64);
    }
    acc / (sa.len() as f64 * m)
}

/// Jackknife standard error of the energy distance.
pub fn energy_distance_se(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut reps = Vec::with_capacity(a.len() + b.len());
    let n = a.len() + b.len();
    for i in 0..a.len() {
        if a.len() > 1 {
            let mut aa = a.to_vec();
            aa.remove(i);
            reps.push(energy_distance(&aa, b)?);
        }
    }
    for i in 0..b.len() {
        if b.len() > 1 {
            let mut bb = b.to_vec();
            bb.remove(i);
            reps.push(energy_distance(a, &bb)?);
        }
    }
    if reps.len() < 2 {
        return Ok(0.0);
    }
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let var = reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    Ok(var.sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation(
            "KS statistic needs two nonempty samples".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDistance {
    pub name: String,
    pub energy_distance: f64,
    pub energy_se: f64,
    pub ks: f64,
    pub micro_mean: f64,
    pub macro_mean: f64,
    /// Distance between the macro ensemble and an independent copy.
    pub null_distance: Option<f64>,
    pub null_se: Option<f64>,
}

impl FunctionalDistance {
    /// Whether the micro/macro distance is indistinguishable from the null
    /// distance within two combined standard errors.
    pub fn consistent_with_null(&self) -> Option<bool> {
        let (d0, s0) = (self.null_distance?, self.null_se?);
        Some(
            (self.energy_distance - d0).abs() <= 2.0 * (self.energy_se.powi(2) + s0.powi(2)).sqrt(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsReport {
    pub eps: f64,
    pub h: f64,
    pub dt: f64,
    pub holes: usize,
    pub micro_excluded: usize,
    pub macro_excluded: usize,
    pub functionals: Vec<FunctionalDistance>,
    /// `||E[u~] - E[V]||` in `L2((0,T) x D)` from sparse time samples.
    pub mean_field_gap: f64,
    #[serde(skip)]
    pub micro_samples: Vec<FunctionalSample>,
    #[serde(skip)]
    pub macro_samples: Vec<FunctionalSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub functional: String,
    /// Each distance is at most the previous one plus two combined standard errors.
    pub non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub spec: EnsembleSpec,
    pub tensor: EffectiveTensor,
    pub per_eps: Vec<EpsReport>,
    pub trend: Vec<TrendVerdict>,
    /// False when more than 5% of the paths of some ensemble blew up.
    pub valid: bool,
}

pub fn trend_non_increasing(d: &[f64], se: &[f64]) -> bool {
    (1..d.len()).all(|k| d[k] <= d[k - 1] + 2.0 * (se[k].powi(2) + se[k - 1].powi(2)).sqrt())
}

fn distances(
    name: &str,
    k: usize,
    micro: &[FunctionalSample],
    mac: &[FunctionalSample],
    null: Option<&[FunctionalSample]>,
) -> Result<FunctionalDistance> {
    let a: Vec<f64> = micro.iter().map(|s| s.get(k)).collect();
    let b: Vec<f64> = mac.iter().map(|s| s.get(k)).collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let (null_distance, null_se) = match null {
        Some(n) => {
            let c: Vec<f64> = n.iter().map(|s| s.get(k)).collect();
            (
                Some(energy_distance(&c, &b)?),
                Some(energy_distance_se(&c, &b)?),
            )
        }
        None => (None, None),
    };
    Ok(FunctionalDistance {
        name: name.to_string(),
        energy_distance: energy_distance(&a, &b)?,
        energy_se: energy_distance_se(&a, &b)?,
        ks: ks_statistic(&a, &b)?,
        micro_mean: mean(&a),
        macro_mean: mean(&b),
        null_distance,
        null_se,
    })
}

fn mean_field_gap(a: &[Vec<f64>], b: &[Vec<f64>], weights: &[f64], t_end: f64) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let sq: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .zip(weights)
                .map(|((x, y), w)| w * (x - y).powi(2))
                .sum()
        })
        .collect();
    let dt = t_end / (sq.len() - 1) as f64;
    let integral: f64 = sq.windows(2).map(|w| 0.5 * dt * (w[0] + w[1])).sum();
    integral.sqrt()
}

/// Runs the micro and macro ensembles for every `eps` and compares the laws
/// of the path functionals.
pub fn run_study(
    spec: &EnsembleSpec,
    cell: &UnitCellSpec,
    tensor: &EffectiveTensor,
) -> Result<DistanceReport> {
    spec.validate()?;
    tensor.validate()?;
    let mut per_eps = Vec::with_capacity(spec.eps.len());
    let mut valid = true;
    for &eps in &spec.eps {
        let h = spec.h(eps);
        let cfg = MicroStepperConfig::new(spec.dt(eps), spec.t_end)?;
        let micro = WaveSystem::perforated(&spec.outer, eps, cell, h)?;
        let mac = MacroSystem::new(&spec.outer, h, tensor)?;
        let micro_noise = NoiseModel::new(&micro, spec.noise1.clone(), spec.noise2.clone());
        let macro_noise = mac.noise_model(&spec.noise1);
        let basis = SineBasis::new(&spec.outer, 1);
        let micro_probe = micro.nodal(|x| basis.eval(0, x));
        let macro_probe = mac.wave().nodal(|x| basis.eval(0, x));
        let nodes = micro.grid().node_count();
        let micro_scatter = |u: &[f64]| {
            micro
                .grid()
                .scatter_unknowns(u)
                .expect("unknown-sized field")
        };
        let macro_scatter = |u: &[f64]| {
            mac.wave()
                .grid()
                .scatter_unknowns(u)
                .expect("unknown-sized field")
        };
        let macro_ensemble = if spec.common_random_numbers {
            MICRO_ENSEMBLE
        } else {
            MACRO_ENSEMBLE
        };

        let m = run_ensemble(spec.paths, nodes, &micro_scatter, &|p| {
            micro_path(
                &micro,
                &micro_noise,
                &cfg,
                &micro_probe,
                spec.seed,
                MICRO_ENSEMBLE,
                p,
            )
        })?;
        let a = run_ensemble(spec.paths, nodes, &macro_scatter, &|p| {
            macro_path(
                &mac,
                &macro_noise,
                &cfg,
                &macro_probe,
                spec.seed,
                macro_ensemble,
                p,
            )
        })?;
        let null = if spec.null_calibration {
            Some(run_ensemble(spec.paths, nodes, &macro_scatter, &|p| {
                macro_path(
                    &mac,
                    &macro_noise,
                    &cfg,
                    &macro_probe,
                    spec.seed,
                    NULL_ENSEMBLE,
                    p,
                )
            })?)
        } else {
            None
        };
        let limit = spec.paths as f64 * 0.05;
        if m.excluded as f64 > limit || a.excluded as f64 > limit {
            valid = false;
        }
        if m.samples.len() < 2 || a.samples.len() < 2 {
            return Err(Error::Validation(format!(
                "fewer than two surviving paths at eps = {eps}"
            )));
        }
        let functionals = (0..3)
            .map(|k| {
                distances(
                    FUNCTIONAL_NAMES[k],
                    k,
                    &m.samples,
                    &a.samples,
                    null.as_ref().map(|n| n.samples.as_slice()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let full_weights = mac.wave().grid().weights().to_vec();
        per_eps.push(EpsReport {
            eps,
            h,
            dt: cfg.dt,
            holes: micro.domain().hole_count(),
            micro_excluded: m.excluded,
            macro_excluded: a.excluded,
            functionals,
            mean_field_gap: mean_field_gap(
                &m.mean_fields,
                &a.mean_fields,
                &full_weights,
                spec.t_end,
            ),
            micro_samples: m.samples,
            macro_samples: a.samples,
        });
    }
    let trend = (0..3)
        .map(|k| {
            let d: Vec<f64> = per_eps
                .iter()
                .map(|r| r.functionals[k].energy_distance)
                .collect();
            let se: Vec<f64> = per_eps.iter().map(|r| r.functionals[k].energy_se).collect();
            TrendVerdict {
                functional: FUNCTIONAL_NAMES[k].to_string(),
                non_increasing: trend_non_increasing(&d, &se),
            }
        })
        .collect();
    Ok(DistanceReport {
        spec: spec.clone(),
        tensor: tensor.clone(),
        per_eps,
        trend,
        valid,
    })
}
