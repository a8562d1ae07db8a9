use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use perfowave::cell::{cell_convergence, CellConvergence};
use perfowave::io::{snapshot_name, write_noise_log, write_snapshot, write_trajectory_csv};
use perfowave::lab::{EpsReport, FUNCTIONAL_NAMES};
use perfowave::macroscale::{initialize_macro, run_macro};
use perfowave::micro::{
    energy_identity_residual, estimate_trace_constant, record_of, PseudoParams, Record,
};
use perfowave::{
    effective_tensor, run_study, simulate, solve_cell_problem, EffectiveTensor, Error, MacroSystem,
    MicroState, NoiseModel, Result, RunConfig, TensorVariant, WaveSystem,
};

use crate::manifest::RunLog;

/// Options that only some subcommands accept.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eps_list: Option<Vec<f64>>,
    pub variant: Option<TensorVariant>,
    pub tensor: Option<PathBuf>,
}

pub fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = &ov.eps_list {
        cfg.ensemble.eps = eps.clone();
    }
    if let Some(v) = ov.variant {
        cfg.cell.variant = v;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CellReport {
    variant: TensorVariant,
    h: f64,
    porosity: f64,
    /// The tensor of the selected variant at spacing `h`.
    tensor: EffectiveTensor,
    gradient_form: EffectiveTensor,
    paper_literal: EffectiveTensor,
    residual: f64,
    iterations: usize,
    refinement: Option<Refinement>,
}

#[derive(Debug, Serialize)]
struct Refinement {
    gradient_form: CellConvergence,
    paper_literal: CellConvergence,
}

/// `cell`: writes the effective tensor report to `out`.
pub fn cell(cfg: &RunConfig, log: &mut RunLog, out: &Path) -> Result<()> {
    let spec = cfg.cell_spec()?;
    let sol = log.stage("cell-solve", || solve_cell_problem(&spec, cfg.cell.h))?;
    let gradient_form = effective_tensor(&sol, TensorVariant::GradientForm);
    let paper_literal = effective_tensor(&sol, TensorVariant::PaperLiteral);
    let refinement = match cfg.cell.refine.as_slice() {
        &[a, b, c] => Some(log.stage("cell-refine", || {
            Ok(Refinement {
                gradient_form: cell_convergence(&spec, [a, b, c], TensorVariant::GradientForm)?,
                paper_literal: cell_convergence(&spec, [a, b, c], TensorVariant::PaperLiteral)?,
            })
        })?),
        _ => None,
    };
    let tensor = match cfg.cell.variant {
        TensorVariant::GradientForm => gradient_form.clone(),
        TensorVariant::PaperLiteral => paper_literal.clone(),
    };
    if let Err(e) = tensor.validate() {
        log.warn(format!("selected tensor is not admissible: {e}"));
    }
    let report = CellReport {
        variant: cfg.cell.variant,
        h: cfg.cell.h,
        porosity: tensor.porosity,
        tensor,
        gradient_form,
        paper_literal,
        residual: sol.residual,
        iterations: sol.iterations,
        refinement,
    };
    write_json(out, &report)?;
    log.output(out.to_path_buf());
    Ok(())
}

/// Reads either a bare tensor or a `cell` report.
pub fn read_tensor(path: &Path) -> Result<EffectiveTensor> {
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    let inner = value.get("tensor").cloned().unwrap_or(value);
    let tensor: EffectiveTensor = serde_json::from_value(inner)?;
    tensor.validate()?;
    Ok(tensor)
}

fn resolve_tensor(cfg: &RunConfig, ov: &Overrides, log: &mut RunLog) -> Result<EffectiveTensor> {
    match &ov.tensor {
        Some(p) => read_tensor(p),
        None => log.stage("cell-solve", || {
            let sol = solve_cell_problem(&cfg.cell_spec()?, cfg.cell.h)?;
            let t = effective_tensor(&sol, cfg.cell.variant);
            t.validate()?;
            Ok(t)
        }),
    }
}

fn micro_system(cfg: &RunConfig) -> Result<WaveSystem> {
    WaveSystem::perforated(
        &cfg.outer_box()?,
        cfg.grid.eps,
        &cfg.cell_spec()?,
        cfg.grid.h,
    )
}

fn check_smallness(cfg: &RunConfig, sys: &WaveSystem, log: &mut RunLog) -> Result<()> {
    for w in cfg.warnings() {
        log.warn(w);
    }
    if cfg.pseudo.r > 0.0 {
        let c_ti = estimate_trace_constant(sys, cfg.seed);
        let params = PseudoParams::new(cfg.pseudo.r, cfg.grid.eps)?;
        if !params.satisfies_smallness(c_ti) {
            log.warn(format!(
                "pseudo.r = {} fails the smallness conditions (terms {:?}, trace constant {c_ti:.3})",
                cfg.pseudo.r,
                params.smallness_terms(c_ti)
            ));
        }
    }
    Ok(())
}

fn write_run_outputs(
    log: &mut RunLog,
    sys: &WaveSystem,
    records: &[Record],
    states: &[MicroState],
) -> Result<()> {
    let csv = log.path("trajectory.csv");
    write_trajectory_csv(&csv, records)?;
    log.output(csv);
    for (k, s) in states.iter().enumerate() {
        let p = log.path(&snapshot_name(k));
        write_snapshot(&p, sys, s)?;
        log.output(perfowave::io::sidecar(&p));
        log.output(p);
    }
    Ok(())
}

/// `micro`: one path of the perforated system.
pub fn micro(cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    let sys = log.stage("setup", || micro_system(cfg))?;
    check_smallness(cfg, &sys, log)?;
    let step_cfg = cfg.stepper_config()?;
    let model = NoiseModel::new(&sys, cfg.noise1.to_spec()?, cfg.noise2.to_spec()?);
    let init = cfg.initial_state(&sys)?;
    let mut driver = model.driver(cfg.seed, 0, 0, cfg.stepper.noise_log);
    let traj = log.stage("integrate", || {
        simulate(&sys, init, &step_cfg, &mut driver, cfg.pseudo.r)
    })?;
    write_run_outputs(log, &sys, &traj.records, &traj.states)?;
    if let Some(noise) = &traj.noise {
        let p = log.path("noise.log");
        write_noise_log(&p, noise, step_cfg.dt, cfg.seed)?;
        log.output(perfowave::io::sidecar(&p));
        log.output(p);
    }
    Ok(())
}

/// `macro`: one path of the homogenized equation on the hole-free box.
pub fn macroscale(cfg: &RunConfig, ov: &Overrides, log: &mut RunLog) -> Result<()> {
    let tensor = resolve_tensor(cfg, ov, log)?;
    let outer = cfg.outer_box()?;
    let sys = log.stage("setup", || MacroSystem::new(&outer, cfg.grid.h, &tensor))?;
    let wave = sys.wave();
    let step_cfg = cfg.stepper_config()?;
    let model = sys.noise_model(&cfg.noise1.to_spec()?);
    let micro_init = cfg.initial_state(wave)?;
    let init = initialize_macro(
        &micro_init.u,
        &micro_init.v,
        sys.porosity(),
        cfg.initial.scaling,
    )?;
    let mut driver = model.driver(cfg.seed, 0, 0, cfg.stepper.noise_log);
    let stride = cfg.stepper.record_stride;
    let steps = step_cfg.steps()?;
    let mut records = Vec::new();
    let mut states = Vec::new();
    let mut n = 0usize;
    log.stage("integrate", || {
        run_macro(&sys, init, &step_cfg, &mut driver, None, |s| {
            if n.is_multiple_of(stride) || n == steps {
                let ms = MicroState {
                    t: s.t,
                    u: s.value.clone(),
                    v: s.rate.clone(),
                    delta: Vec::new(),
                    theta: Vec::new(),
                };
                records.push(record_of(&ms, wave, 0.0));
                if cfg.stepper.snapshots {
                    states.push(ms);
                }
            }
            n += 1;
        })
    })?;
    write_run_outputs(log, wave, &records, &states)?;
    if let Some(noise) = driver.take_log() {
        let p = log.path("noise.log");
        write_noise_log(&p, &noise, step_cfg.dt, cfg.seed)?;
        log.output(perfowave::io::sidecar(&p));
        log.output(p);
    }
    let p = log.path("A_star.json");
    write_json(&p, &tensor)?;
    log.output(p);
    Ok(())
}

#[derive(Debug, Serialize)]
struct StepCheck {
    dt: f64,
    /// Largest pathwise `|residual|` over time and paths.
    max_abs_residual: f64,
    /// Mean over paths of the expected-identity residual at the final time.
    expected_final_mean: f64,
    expected_final_se: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EnergyCheckReport {
    r: f64,
    eps: f64,
    h: f64,
    t_end: f64,
    paths: usize,
    steps: Vec<StepCheck>,
    /// Observed orders of `max_abs_residual` between consecutive steps.
    observed_orders: Vec<f64>,
    threshold: f64,
    pass: bool,
}

/// `energy-check`: replays the pathwise energy identity at several steps.
pub fn energy_check(cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    let sys = log.stage("setup", || micro_system(cfg))?;
    check_smallness(cfg, &sys, log)?;
    let model = NoiseModel::new(&sys, cfg.noise1.to_spec()?, cfg.noise2.to_spec()?);
    let init = cfg.initial_state(&sys)?;
    let paths = cfg.energy_check.paths;
    let mut steps = Vec::new();
    for &dt in &cfg.energy_check.dt_list {
        let mut step_cfg = perfowave::MicroStepperConfig::new(dt, cfg.stepper.t_end)?;
        step_cfg.implicit = cfg.stepper.implicit;
        step_cfg.record.states = true;
        step_cfg.record.noise_log = true;
        let mut max_abs: f64 = 0.0;
        let mut finals = Vec::with_capacity(paths);
        log.stage(&format!("dt={dt}"), || {
            for p in 0..paths {
                let mut driver = model.driver(cfg.seed, 0, p as u32, true);
                let traj = simulate(&sys, init.clone(), &step_cfg, &mut driver, cfg.pseudo.r)?;
                let series =
                    energy_identity_residual(&sys, &traj, &model, cfg.pseudo.r, cfg.pseudo.ito)?;
                max_abs = series
                    .residual()
                    .iter()
                    .fold(max_abs, |m, x| m.max(x.abs()));
                finals.push(*series.expected_residual().last().unwrap());
            }
            Ok(())
        })?;
        let mean = finals.iter().sum::<f64>() / paths as f64;
        let se = (paths > 1).then(|| {
            let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
            (var / paths as f64).sqrt()
        });
        steps.push(StepCheck {
            dt,
            max_abs_residual: max_abs,
            expected_final_mean: mean,
            expected_final_se: se,
        });
    }
    let observed_orders = steps
        .windows(2)
        .map(|w| (w[0].max_abs_residual / w[1].max_abs_residual).ln() / (w[0].dt / w[1].dt).ln())
        .collect();
    let finest = steps.iter().min_by(|a, b| a.dt.total_cmp(&b.dt)).unwrap();
    let report = EnergyCheckReport {
        r: cfg.pseudo.r,
        eps: cfg.grid.eps,
        h: cfg.grid.h,
        t_end: cfg.stepper.t_end,
        paths,
        pass: finest.max_abs_residual <= cfg.energy_check.threshold,
        steps,
        observed_orders,
        threshold: cfg.energy_check.threshold,
    };
    if !report.pass {
        log.warn(format!(
            "energy identity residual exceeds threshold {}",
            cfg.energy_check.threshold
        ));
    }
    let p = log.path("energy_check.json");
    write_json(&p, &report)?;
    log.output(p);
    Ok(())
}

pub fn functionals_name(eps: f64) -> String {
    format!("functionals_eps_{eps}.csv")
}

fn write_functionals(path: &Path, rep: &EpsReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let names = FUNCTIONAL_NAMES;
    writeln!(
        w,
        "path,micro_{0},micro_{1},micro_{2},macro_{0},macro_{1},macro_{2}",
        names[0], names[1], names[2]
    )?;
    let rows = rep.micro_samples.len().max(rep.macro_samples.len());
    let cell = |s: Option<&perfowave::lab::FunctionalSample>, k: usize| {
        s.map(|s| s.get(k).to_string()).unwrap_or_default()
    };
    for p in 0..rows {
        let (a, b) = (rep.micro_samples.get(p), rep.macro_samples.get(p));
        writeln!(
            w,
            "{p},{},{},{},{},{},{}",
            cell(a, 0),
            cell(a, 1),
            cell(a, 2),
            cell(b, 0),
            cell(b, 1),
            cell(b, 2)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `converge`: the micro/macro distance study over the `eps` list.
pub fn converge(cfg: &RunConfig, ov: &Overrides, log: &mut RunLog, out: &Path) -> Result<()> {
    let tensor = resolve_tensor(cfg, ov, log)?;
    let spec = cfg.ensemble_spec()?;
    let report = log.stage("ensembles", || run_study(&spec, &cfg.cell_spec()?, &tensor))?;
    if !report.valid {
        log.warn(
            "more than 5% of the paths of some ensemble were excluded; the study is invalid".into(),
        );
    }
    for rep in &report.per_eps {
        let p = log.path(&functionals_name(rep.eps));
        write_functionals(&p, rep)?;
        log.output(p);
    }
    write_json(out, &report)?;
    log.output(out.to_path_buf());
    Ok(())
}

/// Machine-readable error record.
pub fn error_json(stage: &str, err: &Error) -> serde_json::Value {
    let issues: Vec<serde_json::Value> = match err {
        Error::ConfigIssues(list) => list
            .iter()
            .map(|(f, m)| json!({ "field": f, "message": m }))
            .collect(),
        Error::Config { field, message } => vec![json!({ "field": field, "message": message })],
        _ => Vec::new(),
    };
    json!({
        "stage": stage,
        "kind": err.kind(),
        "message": err.to_string(),
        "issues": issues,
    })
}
